//! Off-by-one accuracy and normalised mean absolute error.

use crate::error::{Error, Result};

fn check(gts: &[u64], preds: &[u64]) -> Result<()> {
    if gts.len() != preds.len() {
        return Err(Error::Input(format!("{} ground truths for {} predictions", gts.len(), preds.len())));
    }
    if gts.is_empty() {
        return Err(Error::Input("no videos to score".into()));
    }
    Ok(())
}

/// Share of videos whose prediction is within one of the ground truth.
pub fn obo(gts: &[u64], preds: &[u64]) -> Result<f64> {
    check(gts, preds)?;
    let hits = gts.iter().zip(preds).filter(|(&g, &p)| g.abs_diff(p) <= 1).count();
    Ok(hits as f64 / gts.len() as f64)
}

/// MAE over the videos with a nonzero ground truth.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Mae {
    /// `None` when every ground truth is zero.
    pub value: Option<f64>,
    /// Videos that entered the mean.
    pub n: usize,
}

/// Mean of `|gt - pred| / gt`; zero-count videos are left out.
pub fn mae(gts: &[u64], preds: &[u64]) -> Result<Mae> {
    check(gts, preds)?;
    let mut sum = 0.0;
    let mut n = 0;
    for (&g, &p) in gts.iter().zip(preds) {
        if g > 0 {
            sum += g.abs_diff(p) as f64 / g as f64;
            n += 1;
        }
    }
    Ok(Mae {
        value: (n > 0).then(|| sum / n as f64),
        n,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn obo_examples() {
        assert!((obo(&[5, 3, 10], &[6, 5, 10]).unwrap() - 2.0 / 3.0).abs() < 1e-15);
        assert_eq!(obo(&[0], &[1]).unwrap(), 1.0);
        assert_eq!(obo(&[4, 9], &[4, 9]).unwrap(), 1.0);
        assert!(obo(&[], &[]).is_err());
        assert!(obo(&[1], &[1, 2]).is_err());
    }

    #[test]
    fn mae_examples() {
        assert_eq!(mae(&[4], &[5]).unwrap().value, Some(0.25));
        assert_eq!(mae(&[3, 7], &[3, 7]).unwrap().value, Some(0.0));
        let m = mae(&[2, 0], &[4, 0]).unwrap();
        assert_eq!((m.value, m.n), (Some(1.0), 1));
        assert_eq!(obo(&[2, 0], &[4, 0]).unwrap(), 0.5);
        assert_eq!(mae(&[0, 0], &[1, 0]).unwrap(), Mae { value: None, n: 0 });
    }
}
