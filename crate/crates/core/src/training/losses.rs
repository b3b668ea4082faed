//! Contrastive and token-level training objectives.

use crate::error::{Error, Result};
use crate::model::similarity_g;
use crate::numerics::{Graph, Real, Var};

/// Symmetric contrastive loss from a `K x K` similarity matrix whose entry
/// `(i, j)` is `g(Z_i, E_j)`; pairs on the diagonal match.
pub fn vtc_from_similarities<T: Real>(g: &mut Graph<T>, sims: Var, tau: Var) -> Result<Var> {
    let (k, k2) = g.shape(sims);
    if k != k2 {
        return Err(Error::Batch(format!("similarity matrix must be square, got {k}x{k2}")));
    }
    if k < 2 {
        return Err(Error::Batch(format!("contrastive batch needs K >= 2, got {k}")));
    }
    let s = g.div_scalar(sims, tau)?;
    let diag: Vec<usize> = (0..k).collect();
    let v2t = g.softmax_cross_entropy(s, &diag)?;
    let st = g.transpose(s)?;
    let t2v = g.softmax_cross_entropy(st, &diag)?;
    let total = g.add(v2t, t2v)?;
    g.scale(total, T::from_f64(1.0 / k as f64))
}

/// Video-text contrastive loss over periodic representations `z[i]`
/// (`n x d` each) and text embeddings `e` (`K x d`).
pub fn loss_vtc<T: Real>(g: &mut Graph<T>, z: &[Var], e: Var, tau: Var) -> Result<Var> {
    if z.len() != g.shape(e).0 {
        return Err(Error::Batch(format!("{} representations for {} texts", z.len(), g.shape(e).0)));
    }
    if z.len() < 2 {
        return Err(Error::Batch(format!("contrastive batch needs K >= 2, got {}", z.len())));
    }
    let rows = z.iter().map(|&zi| similarity_g(g, zi, e)).collect::<Result<Vec<_>>>()?;
    let sims = g.concat_rows(&rows)?;
    vtc_from_similarities(g, sims, tau)
}

/// Periodicity-text loss from similarities `g(Z_i, E_per)` (any shape
/// holding `K` values) and binary labels.
pub fn ptc_from_similarities<T: Real>(g: &mut Graph<T>, sims: Var, labels: &[bool]) -> Result<Var> {
    let k = g.value(sims).len();
    if k != labels.len() || k == 0 {
        return Err(Error::Batch(format!("{} labels for {k} similarities", labels.len())));
    }
    let s = g.sigmoid(sims)?;
    let y: Vec<T> = labels.iter().map(|&b| if b { T::ONE } else { T::ZERO }).collect();
    let l = g.binary_cross_entropy(s, &y)?;
    g.scale(l, T::from_f64(1.0 / k as f64))
}

/// Periodicity-text loss over representations `z[i]` against one shared
/// description embedding `e_per` (`1 x d`).
pub fn loss_ptc<T: Real>(g: &mut Graph<T>, z: &[Var], e_per: Var, labels: &[bool]) -> Result<Var> {
    if z.len() != labels.len() {
        return Err(Error::Batch(format!("{} labels for {} representations", labels.len(), z.len())));
    }
    let sims = z.iter().map(|&zi| similarity_g(g, zi, e_per)).collect::<Result<Vec<_>>>()?;
    let sims = if sims.len() == 1 { sims[0] } else { g.concat_rows(&sims)? };
    ptc_from_similarities(g, sims, labels)
}

/// Summed cross-entropy of answer-position logits against target ids.
pub fn loss_llm<T: Real>(g: &mut Graph<T>, logits: Var, targets: &[usize]) -> Result<Var> {
    let rows = g.shape(logits).0;
    if rows != targets.len() {
        return Err(Error::Length {
            len: targets.len(),
            max: rows,
        });
    }
    g.softmax_cross_entropy(logits, targets)
}


#[cfg(test)]
mod props {
    use proptest::prelude::*;

    use super::*;
    use crate::numerics::Tensor;

    fn vtc(z: &[Tensor<f64>], e: &Tensor<f64>, order: &[usize]) -> f64 {
        let mut g = Graph::new();
        let zs: Vec<Var> = order.iter().map(|&i| g.constant(z[i].clone()).unwrap()).collect();
        let rows: Vec<f64> = order.iter().flat_map(|&i| e.row(i).to_vec()).collect();
        let e = g.constant(Tensor::new(e.shape().to_vec(), rows).unwrap()).unwrap();
        let tau = g.constant(Tensor::full(&[1, 1], 0.2)).unwrap();
        let l = loss_vtc(&mut g, &zs, e, tau).unwrap();
        g.value(l).item()
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn vtc_ignores_batch_order(
            data in prop::collection::vec(-1.0f64..1.0, 4 * 2 * 3 + 4 * 3),
            perm in Just((0..4usize).collect::<Vec<_>>()).prop_shuffle(),
        ) {
            let z: Vec<Tensor<f64>> = (0..4)
                .map(|k| Tensor::new(vec![2, 3], data[k * 6..k * 6 + 6].to_vec()).unwrap())
                .collect();
            let e = Tensor::new(vec![4, 3], data[24..].to_vec()).unwrap();
            let a = vtc(&z, &e, &[0, 1, 2, 3]);
            let b = vtc(&z, &e, &perm);
            prop_assert!((a - b).abs() < 1e-10 * a.abs().max(1.0));
        }
    }
}
