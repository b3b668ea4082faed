//! Clip-by-clip counting of whole videos and the evaluation protocols.

use crate::error::{Error, Result};
use crate::exec;
use crate::lm::{generate_cached, tokenize, BOS};
use crate::model::{clip_tensor, periodic_tokens, ModelConfig};
use crate::numerics::Real;
use crate::params::{Ctx, GroupSet, ParamStore};
use crate::protocol::{answer_text, build_instruction, decode_answer, reconcile_counts, ClipAnswer};
use crate::synthdata::{split_into_clips, Profile, Sample};

use super::metrics::{mae, obo};

/// Evaluation prompt: variant 0 of the question set.
pub const EVAL_QUESTION: usize = 0;

/// Source of clip answers.
pub enum Counter<'a, T: Real> {
    Model {
        params: &'a ParamStore<T>,
        model: ModelConfig,
        description: bool,
        max_answer_len: usize,
        clip_len: usize,
        sample_interval: usize,
    },
    /// Ground-truth clip labels in place of generations.
    Oracle { clip_len: usize, sample_interval: usize },
}

impl<'a, T: Real> Counter<'a, T> {
    pub fn model(params: &'a ParamStore<T>, cfg: &crate::config::RunConfig) -> Self {
        Counter::Model {
            params,
            model: cfg.model_config(),
            description: cfg.description,
            max_answer_len: cfg.max_answer_len,
            clip_len: cfg.stage(3).clip_frames,
            sample_interval: cfg.sample_interval,
        }
    }

    fn split(&self) -> (usize, usize) {
        match self {
            Counter::Model {
                clip_len,
                sample_interval,
                ..
            }
            | Counter::Oracle {
                clip_len,
                sample_interval,
            } => (*clip_len, *sample_interval),
        }
    }
}

/// What happened on each clip of one video.
#[derive(Clone, Debug, PartialEq)]
pub struct CountDiagnostics {
    /// Generated text per clip; ground-truth answers in oracle mode.
    pub raw: Vec<String>,
    /// Answers used for reconciliation, with fallbacks applied.
    pub answers: Vec<ClipAnswer>,
    pub parse_failures: usize,
    /// Boundaries where a cycle spanning two clips added one.
    pub joins: usize,
}

/// Greedy answer text for one clip.
pub fn answer_clip<T: Real>(
    params: &ParamStore<T>,
    mc: &ModelConfig,
    prompt: &[usize],
    frames: &[f32],
    max_answer_len: usize,
) -> Result<String> {
    let clip = clip_tensor::<T>(frames, mc.frame_size)?;
    let mut ctx = Ctx::new(params, GroupSet::EMPTY);
    let p = periodic_tokens(&mut ctx, mc, &clip)?;
    let p = ctx.g.value(p).clone();
    let ids = generate_cached(params, &mc.lm, Some(&p), prompt, max_answer_len, mc.lm_lora())?;
    Ok(answer_text(&ids))
}

pub fn eval_prompt(description: bool, n_slots: usize) -> Result<Vec<usize>> {
    let rec = build_instruction(EVAL_QUESTION, n_slots, description)?;
    let mut ids = vec![BOS];
    ids.extend(tokenize(&rec.prompt_text())?);
    Ok(ids)
}

/// Splits, answers every clip, decodes, and reconciles. Unparseable clips
/// count as `[0000,0,0]`.
pub fn count_video<T: Real>(counter: &Counter<'_, T>, sample: &Sample) -> Result<(u64, CountDiagnostics)> {
    let (clip_len, interval) = counter.split();
    let clips = split_into_clips(&sample.video, &sample.annotation, clip_len, interval)?;
    let mut raw = Vec::with_capacity(clips.len());
    let mut answers = Vec::with_capacity(clips.len());
    let mut parse_failures = 0;
    match counter {
        Counter::Oracle { .. } => {
            for c in &clips {
                let a = ClipAnswer::from(c.label);
                raw.push(a.to_string());
                answers.push(a);
            }
        }
        Counter::Model {
            params,
            model,
            description,
            max_answer_len,
            ..
        } => {
            let prompt = eval_prompt(*description, model.n_queries)?;
            for c in &clips {
                let text = answer_clip(params, model, &prompt, &c.frames, *max_answer_len)?;
                match decode_answer(&text) {
                    Ok(a) => answers.push(a),
                    Err(_) => {
                        parse_failures += 1;
                        answers.push(ClipAnswer::default());
                    }
                }
                raw.push(text);
            }
        }
    }
    let count = reconcile_counts(&answers)?;
    let joins = answers.windows(2).filter(|w| w[0].f && w[1].e).count();
    Ok((
        count,
        CountDiagnostics {
            raw,
            answers,
            parse_failures,
            joins,
        },
    ))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ProtocolKind {
    InDomain,
    Cross,
}

impl ProtocolKind {
    pub fn name(self) -> &'static str {
        match self {
            ProtocolKind::InDomain => "in-domain",
            ProtocolKind::Cross => "cross",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "in-domain" => Ok(ProtocolKind::InDomain),
            "cross" => Ok(ProtocolKind::Cross),
            _ => Err(Error::Config(format!("unknown protocol {s:?}, expected in-domain or cross"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ProtocolSpec {
    pub train_profile: Profile,
    pub test_profile: Profile,
    pub split_seed: u64,
}

impl ProtocolSpec {
    pub fn kind(&self) -> ProtocolKind {
        if self.train_profile == self.test_profile {
            ProtocolKind::InDomain
        } else {
            ProtocolKind::Cross
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct VideoResult {
    pub video_id: usize,
    pub gt: u64,
    pub pred: u64,
    pub parse_failures: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalResult {
    pub rows: Vec<VideoResult>,
    pub obo: f64,
    /// `None` when no video has a nonzero count.
    pub mae: Option<f64>,
    pub n: usize,
    pub n_mae: usize,
    /// Failed parses per generated clip answer.
    pub parse_fail_rate: f64,
    /// Non-fatal notes such as profile mismatches.
    pub warnings: Vec<String>,
}

impl EvalResult {
    pub fn from_rows(rows: Vec<VideoResult>, clips: usize) -> Result<Self> {
        let gts: Vec<u64> = rows.iter().map(|r| r.gt).collect();
        let preds: Vec<u64> = rows.iter().map(|r| r.pred).collect();
        let m = mae(&gts, &preds)?;
        let failures: usize = rows.iter().map(|r| r.parse_failures).sum();
        Ok(EvalResult {
            obo: obo(&gts, &preds)?,
            mae: m.value,
            n: rows.len(),
            n_mae: m.n,
            parse_fail_rate: if clips == 0 { 0.0 } else { failures as f64 / clips as f64 },
            rows,
            warnings: Vec::new(),
        })
    }
}

/// Counts every video of `data`, in parallel, in order.
pub fn evaluate<T: Real>(counter: &Counter<'_, T>, data: &[Sample]) -> Result<EvalResult> {
    let out = exec::try_map_range(data.len(), |i| count_video(counter, &data[i]))?;
    let mut clips = 0;
    let rows = out
        .into_iter()
        .enumerate()
        .map(|(i, (pred, d))| {
            clips += d.answers.len();
            VideoResult {
                video_id: i,
                gt: data[i].annotation.count as u64,
                pred,
                parse_failures: d.parse_failures,
            }
        })
        .collect();
    EvalResult::from_rows(rows, clips)
}

/// Evaluates on `test` videos drawn for `spec`. `trained_on` is the profile
/// recorded with the checkpoint, if any.
pub fn run_protocol<T: Real>(
    spec: &ProtocolSpec,
    counter: &Counter<'_, T>,
    test: &[Sample],
    trained_on: Option<Profile>,
) -> Result<EvalResult> {
    let mut result = evaluate(counter, test)?;
    if let Some(p) = trained_on {
        if p != spec.train_profile {
            result.warnings.push(format!(
                "checkpoint was trained on {p}, protocol expects {}",
                spec.train_profile
            ));
        }
    }
    Ok(result)
}
