use std::collections::HashSet;
use std::fs;
use std::fmt::Write as _;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use periocount::checkpoint::{summarize, Checkpoint};
use periocount::config::{hex, RunConfig};
use periocount::eval::{count_video, format_report, run_protocol, summary_line, Counter, ProtocolSpec, ReportHeader};
use periocount::gradsuite::{run_suite, TOLERANCE};
use periocount::numerics::{OpKind, Precision, Real};
use periocount::synthdata::{generate_corpus, read_dataset, write_dataset, Profile, Sample};
use periocount::training::{train_stage, TraceRecord};
use periocount::{Error, Result};

/// Repetition counting on synthetic videos.
///
/// Any configuration key can be overridden as `--key value` (dashes or
/// underscores), after `--config FILE` is read.
#[derive(Parser)]
#[command(name = "periocount", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum Split {
    Train,
    Test,
}

#[derive(Clone, Copy, ValueEnum)]
enum ProtocolArg {
    InDomain,
    Cross,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a seeded synthetic dataset.
    GenData {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_enum, default_value = "train")]
        split: Split,
    },
    /// Run one training stage.
    Train {
        #[arg(long, value_parser = clap::value_parser!(u8).range(1..=3))]
        stage: u8,
        #[arg(long)]
        data: PathBuf,
        /// Checkpoint of the previous stage; stage 1 starts fresh without it.
        #[arg(long = "in")]
        input: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Loss trace, one `stage epoch step loss` line per step.
        /// Defaults to the output path with `.trace` appended.
        #[arg(long)]
        trace: Option<PathBuf>,
        #[arg(long)]
        ablate: Vec<String>,
        /// Accept an input checkpoint built under a different configuration.
        #[arg(long)]
        force: bool,
    },
    /// Evaluate a checkpoint and write a report.
    Eval {
        #[arg(long, value_enum)]
        protocol: ProtocolArg,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        report: PathBuf,
        /// Use ground-truth clip labels instead of the model.
        #[arg(long)]
        oracle: bool,
    },
    /// Count one video and show the per-clip answers.
    Count {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        video: usize,
        #[arg(long)]
        oracle: bool,
    },
    /// Finite-difference gradient checks in f64.
    GradCheck {
        /// Negate the backward rule of one operation.
        #[arg(long)]
        sign_flip: Option<String>,
        #[arg(long, default_value_t = 20)]
        cases: usize,
    },
    /// Print a checkpoint's header, provenance and tensor table.
    InspectCheckpoint { path: PathBuf },
}

/// Pulls `--config FILE` and `--key value` overrides for known keys out of
/// the argument list.
fn split_overrides(args: Vec<String>) -> Result<(Vec<String>, RunConfig)> {
    let keys: HashSet<&str> = RunConfig::default().to_pairs().into_iter().map(|(k, _)| k).collect();
    let mut rest = Vec::new();
    let mut file = None;
    let mut pairs = Vec::new();
    let mut it = args.into_iter();
    while let Some(a) = it.next() {
        let Some(flag) = a.strip_prefix("--") else {
            rest.push(a);
            continue;
        };
        let (name, inline) = match flag.split_once('=') {
            Some((n, v)) => (n.to_string(), Some(v.to_string())),
            None => (flag.to_string(), None),
        };
        let key = name.replace('-', "_");
        if key == "config" || keys.contains(key.as_str()) {
            let value = match inline.or_else(|| it.next()) {
                Some(v) => v,
                None => return Err(Error::Config(format!("--{name} needs a value"))),
            };
            if key == "config" {
                file = Some(value);
            } else {
                pairs.push((key, value));
            }
        } else {
            rest.push(a);
        }
    }
    let mut all = match file {
        Some(f) => RunConfig::parse_text(&fs::read_to_string(&f).map_err(|e| Error::Config(format!("{f}: {e}")))?)?,
        None => Vec::new(),
    };
    all.extend(pairs);
    let mut cfg = RunConfig::default();
    cfg.apply(all.iter().map(|(k, v)| (k.as_str(), v.as_str())))?;
    Ok((rest, cfg))
}

fn limit_threads() -> Result<()> {
    let Ok(v) = std::env::var("PERIOCOUNT_THREADS") else {
        return Ok(());
    };
    let n: usize = v
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| Error::Config(format!("PERIOCOUNT_THREADS={v:?} is not a positive integer")))?;
    // the pool may already exist when called twice in one process
    let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    Ok(())
}

fn main() -> ExitCode {
    let args: Vec<String> = std::env::args().collect();
    let (rest, cfg) = match split_overrides(args) {
        Ok(x) => x,
        Err(e) => return fail(&e),
    };
    let cli = match Cli::try_parse_from(rest) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match limit_threads().and_then(|_| run(cli.command, cfg)) {
        Ok(code) => code,
        Err(e) => fail(&e),
    }
}

fn fail(e: &Error) -> ExitCode {
    eprintln!("error: {e}");
    ExitCode::from(e.exit_code() as u8)
}

fn run(cmd: Command, cfg: RunConfig) -> Result<ExitCode> {
    match cmd {
        Command::GenData { out, split } => gen_data(&cfg, &out, split),
        Command::GradCheck { sign_flip, cases } => grad_check(sign_flip.as_deref(), cases),
        Command::InspectCheckpoint { path } => inspect(&path),
        cmd => match cfg.precision {
            Precision::Standard => run_typed::<f32>(cmd, cfg),
            Precision::High => run_typed::<f64>(cmd, cfg),
        },
    }
}

fn run_typed<T: Real>(cmd: Command, mut cfg: RunConfig) -> Result<ExitCode> {
    match cmd {
        Command::Train {
            stage,
            data,
            input,
            out,
            trace,
            ablate,
            force,
        } => {
            let input = match input {
                Some(p) => {
                    let ck = Checkpoint::<T>::load(&p)?;
                    adopt_ablations(&mut cfg, &ck)?;
                    Some(ck)
                }
                None => None,
            };
            for a in &ablate {
                cfg.ablate(a)?;
            }
            cfg.validate()?;
            let input = match input {
                Some(mut ck) if ck.digest != cfg.digest() => {
                    if !force {
                        return Err(Error::DigestMismatch {
                            found: hex(&ck.digest),
                            expected: hex(&cfg.digest()),
                        });
                    }
                    eprintln!("warning: input checkpoint digest {} differs, continuing (--force)", hex(&ck.digest));
                    ck.digest = cfg.digest();
                    Some(ck)
                }
                other => other,
            };
            let samples = read_dataset(&data)?;
            let trace = trace.unwrap_or_else(|| with_suffix(&out, ".trace"));
            let mut lines = String::new();
            let mut steps = 0usize;
            let ck = train_stage::<T>(&cfg, stage, &samples, input, &mut |r: &TraceRecord| {
                lines.push_str(&r.to_string());
                lines.push('\n');
                if r.stage == stage {
                    steps += 1;
                }
            })?;
            ck.save(&out)?;
            fs::write(&trace, lines)?;
            println!(
                "stage {stage}: {steps} steps, checkpoint {} (stages {}), trace {}",
                out.display(),
                ck.meta("stages").unwrap_or(""),
                trace.display()
            );
            Ok(ExitCode::SUCCESS)
        }
        Command::Eval {
            protocol,
            checkpoint,
            data,
            report,
            oracle,
        } => {
            let ck = load_for_eval::<T>(&mut cfg, checkpoint.as_deref(), oracle)?;
            let samples = read_dataset(&data)?;
            let trained_on = ck
                .as_ref()
                .and_then(|c| c.meta("train_profile"))
                .map(str::parse::<Profile>)
                .transpose()?;
            let train_profile = trained_on.unwrap_or(cfg.train_profile);
            let test_profile = match protocol {
                ProtocolArg::InDomain => train_profile,
                ProtocolArg::Cross => {
                    if cfg.test_profile == train_profile {
                        return Err(Error::Config(format!(
                            "cross protocol needs test_profile different from the training profile {train_profile}"
                        )));
                    }
                    cfg.test_profile
                }
            };
            let spec = ProtocolSpec {
                train_profile,
                test_profile,
                split_seed: cfg.test_seed,
            };
            let counter = counter(&cfg, ck.as_ref(), oracle);
            let mut result = run_protocol(&spec, &counter, &samples, trained_on)?;
            let stray = samples
                .iter()
                .filter(|s| {
                    let f = s.video.spec.family;
                    f.is_periodic() && !test_profile.families().contains(&f)
                })
                .count();
            if stray > 0 {
                result
                    .warnings
                    .push(format!("{stray} videos fall outside the {test_profile} generator families"));
            }
            let kind = if oracle { "oracle" } else { spec.kind().name() };
            let header = ReportHeader {
                digest: ck.as_ref().map_or_else(|| hex(&cfg.digest()), |c| hex(&c.digest)),
                protocol: kind.into(),
                train: train_profile.name().into(),
                test: test_profile.name().into(),
            };
            fs::write(&report, format_report(&header, &result))?;
            for w in &result.warnings {
                eprintln!("warning: {w}");
            }
            println!("{}", summary_line(&result));
            Ok(ExitCode::SUCCESS)
        }
        Command::Count {
            checkpoint,
            data,
            video,
            oracle,
        } => {
            let ck = load_for_eval::<T>(&mut cfg, checkpoint.as_deref(), oracle)?;
            let samples = read_dataset(&data)?;
            let sample = samples.get(video).ok_or_else(|| {
                Error::Input(format!("video {video} out of range, dataset has {}", samples.len()))
            })?;
            let counter = counter(&cfg, ck.as_ref(), oracle);
            print_count(&counter, sample, video)?;
            Ok(ExitCode::SUCCESS)
        }
        _ => unreachable!("handled before dispatch"),
    }
}

fn with_suffix(p: &Path, suffix: &str) -> PathBuf {
    let mut s = p.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

/// Re-applies the ablations a checkpoint was trained under.
fn adopt_ablations<T: Real>(cfg: &mut RunConfig, ck: &Checkpoint<T>) -> Result<()> {
    for a in ck.meta("ablations").unwrap_or("").split(',').filter(|a| !a.is_empty()) {
        cfg.ablate(a)?;
    }
    Ok(())
}

fn load_for_eval<T: Real>(cfg: &mut RunConfig, path: Option<&Path>, oracle: bool) -> Result<Option<Checkpoint<T>>> {
    let Some(path) = path else {
        return if oracle {
            Ok(None)
        } else {
            Err(Error::Config("--checkpoint is required unless --oracle is given".into()))
        };
    };
    let ck = Checkpoint::<T>::load(path)?;
    adopt_ablations(cfg, &ck)?;
    if ck.digest != cfg.digest() {
        return Err(Error::DigestMismatch {
            found: hex(&ck.digest),
            expected: hex(&cfg.digest()),
        });
    }
    Ok(Some(ck))
}

fn counter<'a, T: Real>(cfg: &RunConfig, ck: Option<&'a Checkpoint<T>>, oracle: bool) -> Counter<'a, T> {
    match ck {
        Some(ck) if !oracle => Counter::model(&ck.params, cfg),
        _ => Counter::Oracle {
            clip_len: cfg.stage(3).clip_frames,
            sample_interval: cfg.sample_interval,
        },
    }
}

fn print_count<T: Real>(counter: &Counter<'_, T>, sample: &Sample, id: usize) -> Result<()> {
    let (count, diag) = count_video(counter, sample)?;
    let mut out = std::io::stdout().lock();
    writeln!(
        out,
        "video {id}: {} frames, {} clips, ground truth {}",
        sample.video.t,
        diag.answers.len(),
        sample.annotation.count
    )?;
    for (i, (raw, a)) in diag.raw.iter().zip(&diag.answers).enumerate() {
        if raw == &a.to_string() {
            writeln!(out, "clip {i}: {a}")?;
        } else {
            writeln!(out, "clip {i}: {raw:?} does not parse, counted as {a}")?;
        }
    }
    for (i, w) in diag.answers.windows(2).enumerate() {
        if w[0].f && w[1].e {
            writeln!(out, "clips {i}-{}: cycle spans the boundary, +1", i + 1)?;
        }
    }
    if diag.parse_failures > 0 {
        writeln!(
            out,
            "note: {} clip answer(s) fell back to [0000,0,0]",
            diag.parse_failures
        )?;
    }
    writeln!(out, "count {count}")?;
    Ok(())
}

fn gen_data(cfg: &RunConfig, out: &Path, split: Split) -> Result<ExitCode> {
    cfg.validate()?;
    let (profile, n, seed) = match split {
        Split::Train => (cfg.train_profile, cfg.train_videos, cfg.data_seed),
        Split::Test => (cfg.test_profile, cfg.test_videos, cfg.test_seed),
    };
    let samples = generate_corpus(profile, n, seed, &cfg.corpus)?;
    write_dataset(out, &samples)?;
    println!("{n} {profile} videos (seed {seed}) written to {}", out.display());
    Ok(ExitCode::SUCCESS)
}

fn grad_check(sign_flip: Option<&str>, cases: usize) -> Result<ExitCode> {
    let flip = sign_flip
        .map(|s| {
            OpKind::parse(s).ok_or_else(|| {
                let names: Vec<&str> = OpKind::DIFFERENTIABLE.iter().map(|k| k.name()).collect();
                Error::Config(format!("unknown operation {s:?}, expected one of {}", names.join(", ")))
            })
        })
        .transpose()?;
    if cases == 0 {
        return Err(Error::Config("--cases must be positive".into()));
    }
    let rows = run_suite(cases, 0x9c, flip);
    println!("precision f64, tolerance {TOLERANCE:e}");
    println!("{:<26} {:>5} {:>12}  result", "check", "cases", "max_rel_err");
    let mut failed = 0;
    for r in &rows {
        let verdict = if r.passed() { "pass" } else { "FAIL" };
        failed += usize::from(!r.passed());
        match &r.error {
            Some(e) => println!("{:<26} {:>5} {:>12}  {verdict} ({e})", r.name, r.cases, "-"),
            None => println!("{:<26} {:>5} {:>12.3e}  {verdict}", r.name, r.cases, r.max_rel_err),
        }
    }
    println!("{} of {} checks passed", rows.len() - failed, rows.len());
    Ok(if failed == 0 { ExitCode::SUCCESS } else { ExitCode::from(3) })
}

fn inspect(path: &Path) -> Result<ExitCode> {
    let buf = fs::read(path)?;
    let s = summarize(&buf)?;
    let mut out = String::new();
    let _ = writeln!(out, "format version {}", s.version);
    let _ = writeln!(out, "config digest {}", hex(&s.digest));
    let _ = writeln!(out, "precision f{}", s.width as usize * 8);
    for (k, v) in &s.meta {
        let _ = writeln!(out, "meta {k} = {v}");
    }
    let total: usize = s.tensors.iter().map(|t| t.2.iter().product::<usize>()).sum();
    let _ = writeln!(out, "{} tensors, {total} values", s.tensors.len());
    for (name, group, shape) in &s.tensors {
        let dims: Vec<String> = shape.iter().map(|d| d.to_string()).collect();
        let _ = writeln!(out, "  {name:<32} {:<14} {}", group.name(), dims.join("x"));
    }
    // a closed pipe (e.g. `| head`) is not an error
    let _ = std::io::stdout().lock().write_all(out.as_bytes());
    Ok(ExitCode::SUCCESS)
}
