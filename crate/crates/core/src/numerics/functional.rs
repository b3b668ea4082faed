//! Value-level kernels used directly by losses, metrics, and tests.

use super::graph::{self, Graph, Var, PROB_EPS};
use super::real::Real;
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// A probability vector: non-negative entries summing to one.
#[derive(Clone, Debug, PartialEq)]
pub struct Distribution(Vec<f64>);

impl Distribution {
    /// Validates `values` as a distribution (sum within 1e-6 of one).
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if values.iter().any(|&v| !(0.0..=1.0 + 1e-12).contains(&v)) {
            return Err(Error::Parameter("distribution entries must lie in [0, 1]".into()));
        }
        let s: f64 = values.iter().sum();
        if (s - 1.0).abs() > 1e-6 {
            return Err(Error::Parameter(format!("distribution sums to {s}")));
        }
        Ok(Distribution(values))
    }

    pub fn values(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

/// Temperature softmax with max subtraction.
pub fn softmax(v: &[f64], tau: f64) -> Result<Distribution> {
    if !(tau > 0.0) {
        return Err(Error::Parameter(format!("temperature must be positive, got {tau}")));
    }
    if v.is_empty() {
        return Err(Error::Parameter("softmax of an empty vector".into()));
    }
    if v.iter().any(|x| !x.is_finite()) {
        return Err(Error::NonFinite("softmax input".into()));
    }
    let mut out: Vec<f64> = v.iter().map(|&x| x / tau).collect();
    graph::softmax_in_place(&mut out);
    Ok(Distribution(out))
}

pub fn sigmoid(x: f64) -> f64 {
    graph::sigmoid(x)
}

/// `-sum(target * ln(pred + eps))`.
pub fn cross_entropy(target: &[f64], pred: &Distribution) -> Result<f64> {
    if target.len() != pred.len() {
        return Err(Error::dim(
            "cross_entropy",
            format!("target length {} vs prediction length {}", target.len(), pred.len()),
        ));
    }
    Ok(-target
        .iter()
        .zip(pred.values())
        .map(|(&t, &p)| t * (p + PROB_EPS).ln())
        .sum::<f64>())
}

/// Binary cross-entropy with the probability clamped to `[eps, 1 - eps]`.
pub fn binary_cross_entropy(y: f64, s: f64) -> f64 {
    graph::bce(y, s)
}

/// `softmax(q k^T / sqrt(d)) v`, row-wise, recorded on `g`. With `causal`,
/// query `i` only sees keys `0..=i`.
pub fn attention<T: Real>(g: &mut Graph<T>, q: Var, k: Var, v: Var, causal: bool) -> Result<Var> {
    let (_, dq) = g.shape(q);
    let (mk, dk) = g.shape(k);
    let (mv, _) = g.shape(v);
    if dq != dk || mk != mv {
        return Err(Error::dim(
            "attention",
            format!("q {:?}, k {:?}, v {:?}", g.shape(q), g.shape(k), g.shape(v)),
        ));
    }
    let scale = T::from_f64(1.0 / (dq as f64).sqrt());
    let scores = g.matmul_ext(q, k, false, true, scale)?;
    let p = g.softmax_masked(scores, causal)?;
    g.matmul(p, v)
}

/// Value-level scaled dot-product attention.
pub fn scaled_dot_attention<T: Real>(q: &Tensor<T>, k: &Tensor<T>, v: &Tensor<T>) -> Result<Tensor<T>> {
    if v.cols() != q.cols() {
        return Err(Error::dim(
            "attention",
            format!("q {:?} and v {:?} widths differ", q.shape(), v.shape()),
        ));
    }
    let mut g = Graph::new();
    let (qv, kv, vv) = (
        g.constant(q.clone())?,
        g.constant(k.clone())?,
        g.constant(v.clone())?,
    );
    let out = attention(&mut g, qv, kv, vv, false)?;
    Ok(g.value(out).clone())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn softmax_examples() {
        let d = softmax(&[2.5, 2.5, 2.5], 0.3).unwrap();
        for &p in d.values() {
            assert!((p - 1.0 / 3.0).abs() < 1e-12);
        }
        assert_eq!(softmax(&[-4.0], 1.0).unwrap().values(), &[1.0]);
        let d = softmax(&[0.0, 3f64.ln()], 1.0).unwrap();
        assert!((d.values()[0] - 0.25).abs() < 1e-12);
        assert!((d.values()[1] - 0.75).abs() < 1e-12);
        assert!(matches!(softmax(&[1.0], 0.0), Err(Error::Parameter(_))));
        assert!(matches!(softmax(&[1.0], -1.0), Err(Error::Parameter(_))));
    }

    #[test]
    fn sigmoid_examples() {
        assert_eq!(sigmoid(0.0), 0.5);
        assert!((sigmoid(3f64.ln()) - 0.75).abs() < 1e-12);
        assert!(sigmoid(800.0) == 1.0 && sigmoid(-800.0) >= 0.0);
        assert!(sigmoid(-800.0).is_finite());
    }

    #[test]
    fn cross_entropy_examples() {
        let one_hot = Distribution::new(vec![1.0, 0.0]).unwrap();
        assert!(cross_entropy(&[1.0, 0.0], &one_hot).unwrap().abs() < 1e-11);
        let half = Distribution::new(vec![0.5, 0.5]).unwrap();
        assert!((cross_entropy(&[1.0, 0.0], &half).unwrap() - 2f64.ln()).abs() < 1e-9);
        let q = Distribution::new(vec![0.25, 0.75]).unwrap();
        assert!((cross_entropy(&[0.0, 1.0], &q).unwrap() + 0.75f64.ln()).abs() < 1e-9);
        assert!(matches!(cross_entropy(&[1.0], &q), Err(Error::Dimension { .. })));
    }

    #[test]
    fn bce_examples() {
        assert!((binary_cross_entropy(1.0, 0.5) - 2f64.ln()).abs() < 1e-12);
        assert!(binary_cross_entropy(1.0, 1.0) < 1e-9);
        assert!((binary_cross_entropy(0.0, 0.25) + 0.75f64.ln()).abs() < 1e-12);
        assert!(binary_cross_entropy(0.0, 1.0).is_finite());
    }

    #[test]
    fn attention_single_key_broadcasts_value() {
        let q = Tensor::<f64>::from_rows(&[vec![1.0, -2.0], vec![0.3, 0.1], vec![5.0, 5.0]]).unwrap();
        let k = Tensor::from_rows(&[vec![0.7, 0.2]]).unwrap();
        let v = Tensor::from_rows(&[vec![4.0, -1.5]]).unwrap();
        let out = scaled_dot_attention(&q, &k, &v).unwrap();
        for i in 0..3 {
            assert_eq!(out.row(i), &[4.0, -1.5]);
        }
    }

    #[test]
    fn attention_identical_keys_average_values() {
        let q = Tensor::<f64>::from_rows(&[vec![1.0, 2.0], vec![-3.0, 0.5]]).unwrap();
        let k = Tensor::from_rows(&[vec![0.4, 0.4], vec![0.4, 0.4], vec![0.4, 0.4]]).unwrap();
        let v = Tensor::from_rows(&[vec![1.0, 0.0], vec![2.0, 3.0], vec![6.0, -3.0]]).unwrap();
        let out = scaled_dot_attention(&q, &k, &v).unwrap();
        for i in 0..2 {
            assert!((out.row(i)[0] - 3.0).abs() < 1e-12);
            assert!(out.row(i)[1].abs() < 1e-12);
        }
    }

    #[test]
    fn attention_hand_case() {
        // d = 1: scores are q*k; with keys [0, ln 3] and q = 1 the weights
        // are [1/4, 3/4]; with q = 0 they are uniform.
        let q = Tensor::<f64>::from_rows(&[vec![1.0], vec![0.0]]).unwrap();
        let k = Tensor::from_rows(&[vec![0.0], vec![3f64.ln()]]).unwrap();
        let v = Tensor::from_rows(&[vec![2.0], vec![10.0]]).unwrap();
        let out = scaled_dot_attention(&q, &k, &v).unwrap();
        assert!((out.data()[0] - 8.0).abs() < 1e-12);
        assert!((out.data()[1] - 6.0).abs() < 1e-12);
    }

    #[test]
    fn attention_dimension_mismatch() {
        let q = Tensor::<f64>::zeros(&[2, 3]);
        let k = Tensor::<f64>::zeros(&[2, 2]);
        assert!(scaled_dot_attention(&q, &k, &k).is_err());
    }

    proptest! {
        #[test]
        fn softmax_is_a_distribution(v in prop::collection::vec(-50.0f64..50.0, 1..20), tau in 0.01f64..5.0) {
            let d = softmax(&v, tau).unwrap();
            let s: f64 = d.values().iter().sum();
            prop_assert!((s - 1.0).abs() < 1e-6);
            prop_assert!(d.values().iter().all(|&p| (0.0..=1.0).contains(&p)));
        }

        #[test]
        fn sigmoid_antisymmetry(x in -40.0f64..40.0) {
            prop_assert!((sigmoid(x) + sigmoid(-x) - 1.0).abs() < 1e-12);
        }

        #[test]
        fn cross_entropy_nonnegative(v in prop::collection::vec(-10.0f64..10.0, 2..8), t in 0usize..8) {
            let d = softmax(&v, 1.0).unwrap();
            let t = t % v.len();
            let mut target = vec![0.0; v.len()];
            target[t] = 1.0;
            prop_assert!(cross_entropy(&target, &d).unwrap() >= 0.0);
        }

        #[test]
        fn matmul_associative(seed in 0u64..1000) {
            use rand::{Rng, SeedableRng};
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let mut rand_t = |r: usize, c: usize| {
                Tensor::<f64>::from_fn(&[r, c], |_| rng.random_range(-1.0..1.0))
            };
            let a = rand_t(3, 4);
            let b = rand_t(4, 5);
            let c = rand_t(5, 2);
            let left = a.matmul(&b).unwrap().matmul(&c).unwrap();
            let right = a.matmul(&b.matmul(&c).unwrap()).unwrap();
            for (x, y) in left.data().iter().zip(right.data()) {
                prop_assert!((x - y).abs() <= 1e-5 * x.abs().max(y.abs()).max(1e-8));
            }
        }
    }
}
