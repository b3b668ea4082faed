use std::path::{Path, PathBuf};
use std::process::{Command, Output};

const TINY: &str = concat!(env!("CARGO_MANIFEST_DIR"), "/tests/tiny.cfg");

fn run(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_periocount"))
        .args(["--config", TINY])
        .args(args)
        .output()
        .unwrap()
}

fn ok(args: &[&str]) -> String {
    let out = run(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn code(args: &[&str]) -> i32 {
    run(args).status.code().unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

struct Run {
    _dir: tempfile::TempDir,
    train: PathBuf,
    test: PathBuf,
    root: PathBuf,
}

fn datasets() -> Run {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path().to_path_buf();
    let train = root.join("train.bin");
    let test = root.join("test.bin");
    ok(&["gen-data", "--out", s(&train)]);
    ok(&["gen-data", "--out", s(&test), "--split", "test"]);
    Run {
        _dir: dir,
        train,
        test,
        root,
    }
}

fn train_all(r: &Run, extra: &[&str]) -> PathBuf {
    let mut prev: Option<PathBuf> = None;
    for stage in ["1", "2", "3"] {
        let out = r.root.join(format!("s{stage}.ckpt"));
        let mut args = vec!["train", "--stage", stage, "--data", s(&r.train), "--out", s(&out)];
        if let Some(p) = &prev {
            args.extend(["--in", s(p)]);
        }
        args.extend(extra);
        ok(&args);
        prev = Some(out);
    }
    prev.unwrap()
}

#[test]
fn gen_data_is_deterministic_and_sized() {
    let r = datasets();
    let again = r.root.join("again.bin");
    ok(&["gen-data", "--out", s(&again)]);
    assert_eq!(std::fs::read(&r.train).unwrap(), std::fs::read(&again).unwrap());
    let samples = periocount::synthdata::read_dataset(&r.train).unwrap();
    assert_eq!(samples.len(), 8);
    let bigger = r.root.join("bigger.bin");
    ok(&["gen-data", "--out", s(&bigger), "--train-videos", "11"]);
    assert_eq!(periocount::synthdata::read_dataset(&bigger).unwrap().len(), 11);
}

#[test]
fn usage_errors_exit_with_one() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("x.bin");
    assert_eq!(code(&["gen-data", "--out", s(&out), "--train-profile", "nope"]), 1);
    assert_eq!(code(&["no-such-command"]), 1);
    assert_eq!(code(&["gen-data", "--out", s(&out), "--no-such-key", "3"]), 1);
    assert_eq!(code(&["grad-check", "--sign-flip", "nonsense"]), 1);
}

#[test]
fn data_errors_exit_with_two() {
    let dir = tempfile::tempdir().unwrap();
    let junk = dir.path().join("junk.bin");
    std::fs::write(&junk, b"not a dataset").unwrap();
    let out = dir.path().join("o.ckpt");
    assert_eq!(code(&["train", "--stage", "1", "--data", s(&junk), "--out", s(&out)]), 2);
    assert_eq!(code(&["inspect-checkpoint", s(&junk)]), 2);
}

#[test]
fn stage_two_without_stage_one_is_refused() {
    let r = datasets();
    let out = r.root.join("s2.ckpt");
    let o = run(&["train", "--stage", "2", "--data", s(&r.train), "--out", s(&out)]);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("stage order"));
    assert!(!out.exists());
}

#[test]
fn full_pipeline_with_provenance_eval_and_count() {
    let r = datasets();
    let ck = train_all(&r, &["--ablate", "no-description"]);
    let info = ok(&["inspect-checkpoint", s(&ck)]);
    assert!(info.contains("meta stages = 1,2,3"), "{info}");
    assert!(info.contains("meta ablations = no-description"), "{info}");
    let trace = std::fs::read_to_string(r.root.join("s3.ckpt.trace")).unwrap();
    assert!(trace.lines().all(|l| l.starts_with("3 ")));

    let report = r.root.join("report.txt");
    let line = ok(&["eval", "--protocol", "in-domain", "--checkpoint", s(&ck), "--data", s(&r.test), "--report", s(&report)]);
    assert!(line.starts_with("OBO="), "{line}");
    let text = std::fs::read_to_string(&report).unwrap();
    let (header, result) = periocount::eval::parse_report(&text).unwrap();
    assert_eq!(header.protocol, "in-domain");
    assert_eq!(result.n, 4);

    let counted = ok(&["count", "--checkpoint", s(&ck), "--data", s(&r.test), "--video", "0"]);
    assert!(counted.lines().last().unwrap().starts_with("count "), "{counted}");

    // a changed architecture no longer matches the checkpoint
    let o = run(&["--d-z", "16", "eval", "--protocol", "in-domain", "--checkpoint", s(&ck), "--data", s(&r.test), "--report", s(&report)]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn oracle_eval_is_exact_and_cross_needs_another_profile() {
    let r = datasets();
    let report = r.root.join("oracle.txt");
    let line = ok(&["eval", "--protocol", "in-domain", "--oracle", "--data", s(&r.test), "--report", s(&report)]);
    assert!(line.starts_with("OBO=1 MAE=0 "), "{line}");
    assert_eq!(code(&["eval", "--protocol", "cross", "--oracle", "--data", s(&r.test), "--report", s(&report)]), 1);
    let b = r.root.join("b.bin");
    ok(&["gen-data", "--out", s(&b), "--split", "test", "--test-profile", "family-b"]);
    let line = ok(&[
        "--test-profile", "family-b", "eval", "--protocol", "cross", "--oracle", "--data", s(&b), "--report", s(&report),
    ]);
    assert!(line.starts_with("OBO=1 "), "{line}");
    assert!(std::fs::read_to_string(&report).unwrap().contains("protocol oracle train family-a test family-b"));
}

#[test]
fn count_shows_the_boundary_join() {
    let r = datasets();
    let samples = periocount::synthdata::read_dataset(&r.test).unwrap();
    let mut shown = false;
    for (i, _) in samples.iter().enumerate() {
        let out = ok(&["count", "--oracle", "--data", s(&r.test), "--video", &i.to_string()]);
        shown |= out.contains("+1");
    }
    assert!(shown, "no test video has a cycle across a clip boundary");
    assert_eq!(code(&["count", "--oracle", "--data", s(&r.test), "--video", "99"]), 2);
}

#[test]
fn grad_check_passes_and_names_a_flipped_rule() {
    let out = ok(&["grad-check", "--cases", "2"]);
    assert!(out.contains("precision f64"));
    assert!(!out.contains("FAIL"), "{out}");
    let o = run(&["grad-check", "--cases", "1", "--sign-flip", "gelu"]);
    assert_eq!(o.status.code(), Some(3));
    let text = String::from_utf8(o.stdout).unwrap();
    let failing: Vec<&str> = text.lines().filter(|l| l.contains("FAIL")).collect();
    assert!(failing.iter().any(|l| l.starts_with("gelu ")), "{text}");
}
