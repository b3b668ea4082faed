//! Central-difference gradient checking in high precision.

use super::graph::{Graph, OpKind, Var};
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Relative error `|a - n| / max(|a|, |n|, 1e-5)`. The floor keeps an
/// exactly-zero gradient (key biases under softmax shift invariance) from
/// turning central-difference round-off, about 1e-10, into a large ratio.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-5)
}

/// Max relative error between the analytic gradient of the scalar `f` at
/// `x` and its central-difference estimate with step `eps`.
pub fn grad_check<F>(f: F, x: &Tensor<f64>, eps: f64) -> Result<f64>
where
    F: Fn(&mut Graph<f64>, Var) -> Result<Var>,
{
    GradChecker::new(eps).check(|g, vars| f(g, vars[0]), std::slice::from_ref(x))
}

/// Gradient checker over several inputs, optionally with a deliberately
/// broken backward rule.
#[derive(Clone, Copy, Debug)]
pub struct GradChecker {
    pub eps: f64,
    pub sign_flip: Option<OpKind>,
}

impl GradChecker {
    pub fn new(eps: f64) -> Self {
        GradChecker { eps, sign_flip: None }
    }

    pub fn with_sign_flip(mut self, kind: Option<OpKind>) -> Self {
        self.sign_flip = kind;
        self
    }

    fn graph(&self) -> Graph<f64> {
        match self.sign_flip {
            Some(k) => Graph::with_sign_flip(k),
            None => Graph::new(),
        }
    }

    fn eval<F>(&self, f: &F, inputs: &[Tensor<f64>]) -> Result<f64>
    where
        F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
    {
        let mut g = Graph::new();
        let vars = inputs
            .iter()
            .map(|t| g.leaf(t.clone(), true))
            .collect::<Result<Vec<_>>>()?;
        let out = f(&mut g, &vars)?;
        let v = g.value(out);
        if v.len() != 1 {
            return Err(Error::dim("grad_check", format!("non-scalar output {:?}", v.shape())));
        }
        let y = v.item();
        if !y.is_finite() {
            return Err(Error::NonFinite(format!("function value {y}")));
        }
        Ok(y)
    }

    /// Max relative error over every coordinate of every input.
    pub fn check<F>(&self, f: F, inputs: &[Tensor<f64>]) -> Result<f64>
    where
        F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
    {
        let mut g = self.graph();
        let vars = inputs
            .iter()
            .map(|t| g.leaf(t.clone(), true))
            .collect::<Result<Vec<_>>>()?;
        let out = f(&mut g, &vars)?;
        if !g.value(out).item().is_finite() {
            return Err(Error::NonFinite(format!("function value {}", g.value(out).item())));
        }
        let grads = g.backward(out)?;
        let mut worst = 0.0f64;
        let mut probe = inputs.to_vec();
        for (idx, &v) in vars.iter().enumerate() {
            let analytic = grads
                .get(v)
                .map(|t| t.data().to_vec())
                .unwrap_or_else(|| vec![0.0; inputs[idx].len()]);
            for j in 0..inputs[idx].len() {
                let orig = inputs[idx].data()[j];
                probe[idx].data_mut()[j] = orig + self.eps;
                let up = self.eval(&f, &probe)?;
                probe[idx].data_mut()[j] = orig - self.eps;
                let down = self.eval(&f, &probe)?;
                probe[idx].data_mut()[j] = orig;
                let numeric = (up - down) / (2.0 * self.eps);
                worst = worst.max(relative_error(analytic[j], numeric));
            }
        }
        Ok(worst)
    }
}
