//! Losses, optimizer, and the three-stage training schedule.

mod losses;
mod optim;
mod stages;

pub use losses::{loss_llm, loss_ptc, loss_vtc, ptc_from_similarities, vtc_from_similarities};
pub use optim::{optimizer_step, AdamConfig, AdamState};
pub use stages::{
    initial_checkpoint, instruction_loss, run_pipeline, stage2_separation, train_stage, vtc_step, window, Separation,
    StagePlan, TraceRecord, TAU_MAX,
    TAU_MIN,
};

use crate::error::{Error, Result};
use crate::exec;
use crate::numerics::{Real, Var};
use crate::params::{Ctx, GradBuffer, GroupSet, ParamStore};

/// Runs `n` independent scalar-loss graphs, possibly in parallel, and sums
/// their losses and gradients in index order.
pub fn per_example_grads<T, F>(
    store: &ParamStore<T>,
    trainable: GroupSet,
    n: usize,
    f: F,
) -> Result<(f64, GradBuffer<T>)>
where
    T: Real,
    F: Fn(&mut Ctx<'_, T>, usize) -> Result<Var> + Sync + Send,
{
    let parts = exec::try_map_range(n, |i| {
        let mut ctx = Ctx::new(store, trainable);
        let loss = f(&mut ctx, i)?;
        let value = ctx.g.value(loss).item().to_f64();
        if !value.is_finite() {
            return Err(Error::NonFinite(format!("loss of example {i} is {value}")));
        }
        let mut grads = ctx.g.backward(loss)?;
        let mut buf = GradBuffer::new(store.len());
        ctx.collect(&mut grads, &mut buf);
        Ok((value, buf))
    })?;
    let mut total = 0.0;
    let mut acc = GradBuffer::new(store.len());
    for (l, g) in parts {
        total += l;
        acc.merge(g);
    }
    Ok((total, acc))
}
