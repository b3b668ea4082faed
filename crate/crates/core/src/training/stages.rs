//! Stage plans, batch assembly, and the stage trainer.

use std::fmt;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::losses::{loss_ptc, loss_vtc};
use super::optim::{optimizer_step, AdamConfig, AdamState};
use super::per_example_grads;
use crate::checkpoint::Checkpoint;
use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::exec;
use crate::lm::{lm_hidden, logits_at, pretrain_lm, tokenize, BOS, EOS};
use crate::model::{
    clip_tensor, encode_text, encode_text_graph, init_params, periodic_tokens, represent, text_head, ModelConfig,
};
use crate::numerics::{Real, Tensor, Var};
use crate::params::{Ctx, GradBuffer, Group, GroupSet, ParamStore};
use crate::protocol::{answer_ids, build_instruction, ClipAnswer, DESCRIPTION, DESCRIPTION_VERSION, QUESTIONS};
use crate::synthdata::{caption_of, clips_of, make_stage2_pairs, splitmix64, Sample};

pub const TAU_MIN: f64 = 0.01;
pub const TAU_MAX: f64 = 1.0;

#[derive(Clone, Debug, PartialEq)]
pub struct StagePlan {
    pub stage: u8,
    pub trainable: GroupSet,
    pub frozen: GroupSet,
    pub epochs: usize,
    pub batch: usize,
    pub lr: f64,
    pub clip_frames: usize,
}

impl StagePlan {
    pub fn new(cfg: &RunConfig, stage: u8) -> Result<Self> {
        let trainable = match stage {
            1 => GroupSet::of(&[Group::Periodicity, Group::TextEncoder, Group::TextHead, Group::Temperature]),
            // the text encoder is frozen here so E_per stays fixed
            2 => GroupSet::of(&[Group::Periodicity, Group::TextHead]),
            3 => {
                let mut s = GroupSet::of(&[Group::Periodicity, Group::Projector]);
                if cfg.adapters.video() {
                    s = s.with(Group::VideoAdapter);
                }
                if cfg.adapters.lm() {
                    s = s.with(Group::LmAdapter);
                }
                if cfg.model_config().count_tokens {
                    s = s.with(Group::CountTokens);
                }
                s
            }
            _ => return Err(Error::StageOrder(format!("no stage {stage}, expected 1, 2 or 3"))),
        };
        let sched = cfg.stage(stage as usize);
        Ok(StagePlan {
            stage,
            trainable,
            frozen: trainable.complement(),
            epochs: sched.epochs,
            batch: sched.batch,
            lr: sched.lr,
            clip_frames: sched.clip_frames,
        })
    }
}

/// One optimizer step of one stage. Stage 0 is language-model warm-up.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TraceRecord {
    pub stage: u8,
    pub epoch: usize,
    pub step: usize,
    pub loss: f64,
}

impl fmt::Display for TraceRecord {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} {} {} {:.9e}", self.stage, self.epoch, self.step, self.loss)
    }
}

impl std::str::FromStr for TraceRecord {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::Parse(s.to_string());
        let mut it = s.split_whitespace();
        let mut next = || it.next().ok_or_else(bad);
        let rec = TraceRecord {
            stage: next()?.parse().map_err(|_| bad())?,
            epoch: next()?.parse().map_err(|_| bad())?,
            step: next()?.parse().map_err(|_| bad())?,
            loss: next()?.parse().map_err(|_| bad())?,
        };
        Ok(rec)
    }
}

/// Stages that must be complete before `stage` runs.
fn required_before(cfg: &RunConfig, stage: u8) -> Vec<u8> {
    (1..stage)
        .filter(|&s| !(s == 1 && cfg.skip_stage1 || s == 2 && cfg.skip_stage2))
        .collect()
}

fn check_order<T: Real>(cfg: &RunConfig, stage: u8, input: Option<&Checkpoint<T>>) -> Result<()> {
    let need = required_before(cfg, stage);
    let done = input.map(|c| c.stages()).unwrap_or_default();
    if let Some(&later) = done.iter().find(|&&s| s >= stage) {
        return Err(Error::StageOrder(format!(
            "stage {stage} cannot follow a checkpoint that already completed stage {later}"
        )));
    }
    if let Some(&missing) = need.iter().find(|s| !done.contains(s)) {
        return Err(Error::StageOrder(format!(
            "stage {stage} requires a checkpoint from stage {missing}"
        )));
    }
    if input.is_some_and(|c| c.meta("lm_pretrain").is_none()) {
        return Err(Error::StageOrder("input checkpoint was not built by this trainer".into()));
    }
    Ok(())
}

fn stamp<T: Real>(ck: &mut Checkpoint<T>, cfg: &RunConfig) {
    ck.set_meta("description_version", DESCRIPTION_VERSION.to_string());
    ck.set_meta("ablations", cfg.ablations().join(","));
    ck.set_meta("train_profile", cfg.train_profile.name());
}

/// Fresh parameters with the language model warmed up and ready for stage 1.
pub fn initial_checkpoint<T: Real>(cfg: &RunConfig, log: &mut dyn FnMut(&TraceRecord)) -> Result<Checkpoint<T>> {
    cfg.validate()?;
    let mc = cfg.model_config();
    let mut params = init_params::<T>(&mc, cfg.model_seed)?;
    let losses = pretrain_lm(&mut params, &mc.lm, mc.n_queries, &cfg.pretrain)?;
    let per_epoch = cfg.pretrain.sequences.div_ceil(cfg.pretrain.batch.max(1)).max(1);
    for (i, &loss) in losses.iter().enumerate() {
        log(&TraceRecord {
            stage: 0,
            epoch: i / per_epoch,
            step: i,
            loss,
        });
    }
    let mut ck = Checkpoint::new(cfg.digest(), params);
    ck.set_meta("stages", "");
    ck.set_meta("lm_pretrain", format!("{} steps", losses.len()));
    stamp(&mut ck, cfg);
    Ok(ck)
}

/// Deterministic per-(stage, epoch) generator.
fn epoch_rng(cfg: &RunConfig, stage: u8, epoch: usize) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(splitmix64(cfg.train_seed ^ splitmix64(((stage as u64) << 32) | epoch as u64)))
}

/// `len` frames of `s` from `start`, repeating the final frame past the end.
pub fn window(s: &Sample, start: usize, len: usize) -> Vec<f32> {
    let v = &s.video;
    let mut out = Vec::with_capacity(len * v.h * v.w);
    for j in start..start + len {
        out.extend_from_slice(v.frame(j.min(v.t - 1)));
    }
    out
}

/// Trains one stage. `input` must carry the preceding stages (or be `None`
/// where the schedule allows a fresh start). Every step is reported to `log`
/// as it completes.
pub fn train_stage<T: Real>(
    cfg: &RunConfig,
    stage: u8,
    data: &[Sample],
    input: Option<Checkpoint<T>>,
    log: &mut dyn FnMut(&TraceRecord),
) -> Result<Checkpoint<T>> {
    cfg.validate()?;
    let plan = StagePlan::new(cfg, stage)?;
    check_order(cfg, stage, input.as_ref())?;
    let mut ck = match input {
        Some(c) => {
            if c.digest != cfg.digest() {
                return Err(Error::DigestMismatch {
                    found: crate::config::hex(&c.digest),
                    expected: crate::config::hex(&cfg.digest()),
                });
            }
            c
        }
        None => initial_checkpoint(cfg, log)?,
    };
    if data.is_empty() {
        return Err(Error::Input("no training videos".into()));
    }
    let mc = cfg.model_config();
    let mut trainer = Trainer {
        cfg,
        plan: &plan,
        mc: &mc,
        adam: AdamConfig {
            clip_norm: Some(cfg.clip_norm),
            ..AdamConfig::with_lr(plan.lr)
        },
        state: AdamState::new(ck.params.len()),
        step: 0,
    };
    match stage {
        1 => trainer.stage1(&mut ck.params, data, log)?,
        2 => trainer.stage2(&mut ck.params, data, log)?,
        _ => trainer.stage3(&mut ck.params, data, log)?,
    }
    let mut stages = ck.stages();
    stages.push(stage);
    ck.set_meta("stages", stages.iter().map(|s| s.to_string()).collect::<Vec<_>>().join(","));
    ck.set_meta(&format!("stage{stage}_steps"), trainer.step.to_string());
    stamp(&mut ck, cfg);
    Ok(ck)
}

/// Runs warm-up and every scheduled stage in order.
pub fn run_pipeline<T: Real>(
    cfg: &RunConfig,
    data: &[Sample],
    log: &mut dyn FnMut(&TraceRecord),
) -> Result<Checkpoint<T>> {
    let mut ck = initial_checkpoint(cfg, log)?;
    for stage in 1..=3u8 {
        if stage == 1 && cfg.skip_stage1 || stage == 2 && cfg.skip_stage2 {
            continue;
        }
        ck = train_stage(cfg, stage, data, Some(ck), log)?;
    }
    Ok(ck)
}

struct Trainer<'a, T: Real> {
    cfg: &'a RunConfig,
    plan: &'a StagePlan,
    mc: &'a ModelConfig,
    adam: AdamConfig,
    state: AdamState<T>,
    step: usize,
}

impl<T: Real> Trainer<'_, T> {
    fn apply(
        &mut self,
        params: &mut ParamStore<T>,
        grads: &GradBuffer<T>,
        epoch: usize,
        loss: f64,
        log: &mut dyn FnMut(&TraceRecord),
    ) -> Result<()> {
        if !loss.is_finite() {
            return Err(Error::NonFinite(format!(
                "stage {} epoch {epoch} step {}: loss {loss}",
                self.plan.stage, self.step
            )));
        }
        optimizer_step(params, grads, &mut self.state, &self.adam).map_err(|e| match e {
            Error::NonFinite(m) => Error::NonFinite(format!("stage {} step {}: {m}", self.plan.stage, self.step)),
            other => other,
        })?;
        if self.plan.trainable.contains(Group::Temperature) {
            let id = params.id("tau").expect("tau is registered");
            let t = params.value(id).map(|x| T::from_f64(x.to_f64().clamp(TAU_MIN, TAU_MAX)));
            params.set(id, t)?;
        }
        log(&TraceRecord {
            stage: self.plan.stage,
            epoch,
            step: self.step,
            loss,
        });
        self.step += 1;
        Ok(())
    }

    /// Video-text contrastive alignment on random windows and captions.
    fn stage1(
        &mut self,
        params: &mut ParamStore<T>,
        data: &[Sample],
        log: &mut dyn FnMut(&TraceRecord),
    ) -> Result<()> {
        let len = self.plan.clip_frames;
        let captions: Vec<String> = data.iter().map(|s| caption_of(&s.video.spec)).collect();
        let mut order: Vec<usize> = (0..data.len()).collect();
        for epoch in 0..self.plan.epochs {
            let mut rng = epoch_rng(self.cfg, 1, epoch);
            order.shuffle(&mut rng);
            let starts: Vec<usize> = (0..data.len())
                .map(|i| {
                    let t = data[i].video.t;
                    if t > len {
                        rng.random_range(0..=t - len)
                    } else {
                        0
                    }
                })
                .collect();
            for batch in order.chunks(self.plan.batch) {
                if batch.len() < 2 {
                    continue;
                }
                let (loss, grads) = vtc_step(params, self.mc, self.plan.trainable, batch.len(), |i| {
                    let j = batch[i];
                    (window(&data[j], starts[j], len), captions[j].as_str())
                })?;
                self.apply(params, &grads, epoch, loss, log)?;
            }
        }
        Ok(())
    }

    /// Binary periodicity-text alignment against the fixed description.
    fn stage2(
        &mut self,
        params: &mut ParamStore<T>,
        data: &[Sample],
        log: &mut dyn FnMut(&TraceRecord),
    ) -> Result<()> {
        let pairs = make_stage2_pairs(data, self.plan.clip_frames, splitmix64(self.cfg.train_seed ^ 2))?;
        let e_per = encode_text(params, self.mc, DESCRIPTION)?;
        let mut order: Vec<usize> = (0..pairs.len()).collect();
        for epoch in 0..self.plan.epochs {
            let mut rng = epoch_rng(self.cfg, 2, epoch);
            order.shuffle(&mut rng);
            for batch in order.chunks(self.plan.batch) {
                let k = batch.len();
                let (loss, grads) = per_example_grads(params, self.plan.trainable, k, |ctx, i| {
                    let (frames, label) = &pairs[batch[i]];
                    let clip = clip_tensor::<T>(frames, self.mc.frame_size)?;
                    let z = represent(ctx, self.mc, &clip)?;
                    let z = text_head(ctx, z)?;
                    let e = ctx.g.constant(e_per.clone())?;
                    let l = loss_ptc(&mut ctx.g, &[z], e, &[*label])?;
                    ctx.g.scale(l, T::from_f64(1.0 / k as f64))
                })?;
                self.apply(params, &grads, epoch, loss, log)?;
            }
        }
        Ok(())
    }

    /// Instruction tuning on clip answers.
    fn stage3(
        &mut self,
        params: &mut ParamStore<T>,
        data: &[Sample],
        log: &mut dyn FnMut(&TraceRecord),
    ) -> Result<()> {
        let clips: Vec<_> = clips_of(data, self.plan.clip_frames, 1)?.into_iter().flatten().collect();
        let mode = self.cfg.answer_tokens;
        let targets: Vec<Vec<usize>> = clips
            .iter()
            .map(|c| {
                let mut ids = answer_ids(ClipAnswer::from(c.label), mode)?;
                ids.push(EOS);
                Ok(ids)
            })
            .collect::<Result<_>>()?;
        let prompts: Vec<Vec<usize>> = (0..QUESTIONS.len())
            .map(|v| {
                let rec = build_instruction(v, self.mc.n_queries, self.cfg.description)?;
                let mut ids = vec![BOS];
                ids.extend(tokenize(&rec.prompt_text())?);
                Ok(ids)
            })
            .collect::<Result<_>>()?;
        let mut order: Vec<usize> = (0..clips.len()).collect();
        for epoch in 0..self.plan.epochs {
            let mut rng = epoch_rng(self.cfg, 3, epoch);
            order.shuffle(&mut rng);
            let variants: Vec<usize> = (0..clips.len()).map(|_| rng.random_range(0..QUESTIONS.len())).collect();
            for batch in order.chunks(self.plan.batch) {
                let k = batch.len();
                let (loss, grads) = per_example_grads(params, self.plan.trainable, k, |ctx, i| {
                    let j = batch[i];
                    let clip = clip_tensor::<T>(&clips[j].frames, self.mc.frame_size)?;
                    let l = instruction_loss(ctx, self.mc, &clip, &prompts[variants[j]], &targets[j])?;
                    ctx.g.scale(l, T::from_f64(1.0 / k as f64))
                })?;
                self.apply(params, &grads, epoch, loss, log)?;
            }
        }
        Ok(())
    }
}

/// Summed answer-token cross-entropy of one clip. `prompt` starts with BOS;
/// `target` is the answer followed by EOS.
pub fn instruction_loss<T: Real>(
    ctx: &mut Ctx<'_, T>,
    mc: &ModelConfig,
    clip: &Tensor<T>,
    prompt: &[usize],
    target: &[usize],
) -> Result<Var> {
    let p = periodic_tokens(ctx, mc, clip)?;
    let mut ids = prompt.to_vec();
    ids.extend_from_slice(&target[..target.len() - 1]);
    let h = lm_hidden(ctx, &mc.lm, Some(p), &ids, mc.lm_lora())?;
    let n = mc.n_queries;
    let positions: Vec<usize> = (0..target.len()).map(|j| n + prompt.len() - 1 + j).collect();
    let logits = logits_at(ctx, h, &positions)?;
    super::losses::loss_llm(&mut ctx.g, logits, target)
}

/// One contrastive step: per-example forward graphs, a shared loss graph on
/// their outputs, then per-example backward passes seeded from it.
/// `example(i)` yields the clip frames and caption of batch row `i`.
pub fn vtc_step<'c, T, F>(
    params: &ParamStore<T>,
    mc: &ModelConfig,
    trainable: GroupSet,
    k: usize,
    example: F,
) -> Result<(f64, GradBuffer<T>)>
where
    T: Real,
    F: Fn(usize) -> (Vec<f32>, &'c str) + Sync + Send,
{
    let forwards = exec::try_map_range(k, |i| {
        let (frames, caption) = example(i);
        let mut ctx = Ctx::new(params, trainable);
        let clip = clip_tensor::<T>(&frames, mc.frame_size)?;
        let z = represent(&mut ctx, mc, &clip)?;
        let z = text_head(&mut ctx, z)?;
        let e = encode_text_graph(&mut ctx, mc, caption)?;
        Ok((ctx, z, e))
    })?;
    let mut lg = crate::numerics::Graph::new();
    let zs = forwards
        .iter()
        .map(|(c, z, _)| lg.leaf(c.g.value(*z).clone(), true))
        .collect::<Result<Vec<_>>>()?;
    let es = forwards
        .iter()
        .map(|(c, _, e)| lg.leaf(c.g.value(*e).clone(), true))
        .collect::<Result<Vec<_>>>()?;
    let e_all = lg.concat_rows(&es)?;
    let tau_id = params.id("tau").ok_or_else(|| Error::Parameter("tau".into()))?;
    let tau = lg.leaf((**params.value(tau_id)).clone(), trainable.contains(Group::Temperature))?;
    let loss = loss_vtc(&mut lg, &zs, e_all, tau)?;
    let value = lg.value(loss).item().to_f64();
    if !value.is_finite() {
        return Err(Error::NonFinite(format!("contrastive loss is {value}")));
    }
    let mut lgrads = lg.backward(loss)?;
    let seeds: Vec<(Option<Tensor<T>>, Option<Tensor<T>>)> =
        (0..k).map(|i| (lgrads.take(zs[i]), lgrads.take(es[i]))).collect();
    let jobs: Vec<_> = forwards.into_iter().zip(seeds).collect();
    let parts = exec::try_map_vec(jobs, |((mut ctx, z, e), (dz, de))| {
        let mut buf = GradBuffer::new(params.len());
        let mut terms = Vec::new();
        for (v, d) in [(z, dz), (e, de)] {
            if let Some(d) = d {
                if ctx.g.requires_grad(v) {
                    let c = ctx.g.constant(d)?;
                    let m = ctx.g.mul(v, c)?;
                    terms.push(ctx.g.sum_all(m)?);
                }
            }
        }
        let Some((&first, rest)) = terms.split_first() else {
            return Ok(buf);
        };
        let mut s = first;
        for &t in rest {
            s = ctx.g.add(s, t)?;
        }
        let mut grads = ctx.g.backward(s)?;
        ctx.collect(&mut grads, &mut buf);
        Ok(buf)
    })?;
    let mut acc = GradBuffer::new(params.len());
    for p in parts {
        acc.merge(p);
    }
    if trainable.contains(Group::Temperature) {
        if let Some(gt) = lgrads.take(tau) {
            acc.add(tau_id, gt);
        }
    }
    Ok((value, acc))
}

/// Mean `σ(g(Z, E_per))` over positive and negative periodicity clips of
/// `data`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Separation {
    pub positive: f64,
    pub negative: f64,
    pub n_positive: usize,
    pub n_negative: usize,
}

impl Separation {
    pub fn gap(&self) -> f64 {
        self.positive - self.negative
    }
}

pub fn stage2_separation<T: Real>(params: &ParamStore<T>, cfg: &RunConfig, data: &[Sample]) -> Result<Separation> {
    let mc = cfg.model_config();
    let pairs = make_stage2_pairs(data, cfg.stage(2).clip_frames, splitmix64(cfg.test_seed ^ 2))?;
    let e_per = encode_text(params, &mc, DESCRIPTION)?;
    let scores = exec::try_map_range(pairs.len(), |i| {
        let mut ctx = Ctx::new(params, GroupSet::EMPTY);
        let clip = clip_tensor::<T>(&pairs[i].0, mc.frame_size)?;
        let z = represent(&mut ctx, &mc, &clip)?;
        let z = text_head(&mut ctx, z)?;
        let e = ctx.g.constant(e_per.clone())?;
        let g = crate::model::similarity_g(&mut ctx.g, z, e)?;
        let s = ctx.g.sigmoid(g)?;
        Ok(ctx.g.value(s).item().to_f64())
    })?;
    let mean = |want: bool| {
        let v: Vec<f64> = pairs.iter().zip(&scores).filter(|(p, _)| p.1 == want).map(|(_, &s)| s).collect();
        (v.iter().sum::<f64>() / v.len().max(1) as f64, v.len())
    };
    let (positive, n_positive) = mean(true);
    let (negative, n_negative) = mean(false);
    Ok(Separation {
        positive,
        negative,
        n_positive,
        n_negative,
    })
}

