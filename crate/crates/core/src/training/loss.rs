use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::labels::Regime;

/// Probabilities are clipped to `[CLIP_EPS, 1 - CLIP_EPS]` before logarithms.
pub const CLIP_EPS: f64 = 1e-7;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum LossKind {
    #[serde(rename = "categorical-cross-entropy")]
    CategoricalCrossEntropy,
    #[serde(rename = "binary-cross-entropy")]
    BinaryCrossEntropy,
}

impl LossKind {
    pub fn for_regime(regime: Regime) -> Self {
        match regime {
            Regime::Single => LossKind::CategoricalCrossEntropy,
            Regime::Multi => LossKind::BinaryCrossEntropy,
        }
    }
}

fn check(predictions: &[f64], targets: &[f64], units: usize) -> Result<usize> {
    if units == 0
        || predictions.len() != targets.len()
        || !predictions.len().is_multiple_of(units)
        || predictions.is_empty()
    {
        return Err(Error::Shape(format!(
            "predictions ({}) and targets ({}) must both be B×{units} with B ≥ 1",
            predictions.len(),
            targets.len()
        )));
    }
    if predictions.iter().chain(targets).any(|v| v.is_nan()) {
        return Err(Error::InvalidArgument("NaN in loss inputs".into()));
    }
    Ok(predictions.len() / units)
}

fn clip(p: f64) -> f64 {
    p.clamp(CLIP_EPS, 1.0 - CLIP_EPS)
}

/// Mean loss over a row-major `B × units` batch.
///
/// Categorical: mean over rows of `−Σ y log p`. Binary: mean over all `B × units`
/// entries of `−[y log p + (1−y) log(1−p)]`.
pub fn compute_loss(predictions: &[f64], targets: &[f64], units: usize, kind: LossKind) -> Result<f64> {
    let b = check(predictions, targets, units)?;
    let sum: f64 = predictions
        .iter()
        .zip(targets)
        .map(|(&p, &y)| {
            let p = clip(p);
            match kind {
                LossKind::CategoricalCrossEntropy => -y * p.ln(),
                LossKind::BinaryCrossEntropy => -(y * p.ln() + (1.0 - y) * (1.0 - p).ln()),
            }
        })
        .sum();
    Ok(match kind {
        LossKind::CategoricalCrossEntropy => sum / b as f64,
        LossKind::BinaryCrossEntropy => sum / predictions.len() as f64,
    })
}

/// Loss and its derivative with respect to each prediction. The derivative is
/// that of the logarithms at the clipped value; the clip itself is treated as
/// the identity so saturated outputs still receive a gradient.
pub fn loss_and_gradient(
    predictions: &[f64],
    targets: &[f64],
    units: usize,
    kind: LossKind,
) -> Result<(f64, Vec<f64>)> {
    let loss = compute_loss(predictions, targets, units, kind)?;
    let b = predictions.len() / units;
    let grad = predictions
        .iter()
        .zip(targets)
        .map(|(&p, &y)| {
            let p = clip(p);
            match kind {
                LossKind::CategoricalCrossEntropy => -y / p / b as f64,
                LossKind::BinaryCrossEntropy => (-y / p + (1.0 - y) / (1.0 - p)) / predictions.len() as f64,
            }
        })
        .collect();
    Ok((loss, grad))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    const CCE: LossKind = LossKind::CategoricalCrossEntropy;
    const BCE: LossKind = LossKind::BinaryCrossEntropy;

    #[test]
    fn analytic_values() {
        let uniform = [0.2; 5];
        let onehot = [0.0, 0.0, 1.0, 0.0, 0.0];
        assert!((compute_loss(&uniform, &onehot, 5, CCE).unwrap() - 5f64.ln()).abs() < 1e-12);
        assert!(compute_loss(&onehot, &onehot, 5, CCE).unwrap() < 1e-6);
        let ordinal = [1.0, 1.0, 1.0, 0.0, 0.0];
        assert!(compute_loss(&ordinal, &ordinal, 5, BCE).unwrap() < 1e-6);
        let half = [0.5; 5];
        assert!((compute_loss(&half, &ordinal, 5, BCE).unwrap() - 2f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn errors() {
        assert!(matches!(
            compute_loss(&[0.5; 5], &[0.0; 4], 5, BCE),
            Err(Error::Shape(_))
        ));
        assert!(matches!(
            compute_loss(&[0.5; 4], &[0.0; 4], 5, BCE),
            Err(Error::Shape(_))
        ));
        let mut p = [0.5; 5];
        p[2] = f64::NAN;
        assert!(matches!(
            compute_loss(&p, &[0.0; 5], 5, BCE),
            Err(Error::InvalidArgument(_))
        ));
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let p = [0.3, 0.6, 0.05, 0.9, 0.5, 0.2, 0.1, 0.4, 0.7, 0.99];
        let y = [1.0, 1.0, 0.0, 1.0, 0.0, 0.0, 1.0, 0.0, 1.0, 1.0];
        for kind in [CCE, BCE] {
            let (_, g) = loss_and_gradient(&p, &y, 5, kind).unwrap();
            for i in 0..p.len() {
                let h = 1e-6;
                let mut a = p;
                a[i] += h;
                let mut b = p;
                b[i] -= h;
                let fd = (compute_loss(&a, &y, 5, kind).unwrap() - compute_loss(&b, &y, 5, kind).unwrap()) / (2.0 * h);
                assert!(
                    (fd - g[i]).abs() < 1e-6 * fd.abs().max(1.0),
                    "{kind:?}[{i}] {fd} vs {}",
                    g[i]
                );
            }
        }
    }

    proptest! {
        #[test]
        fn losses_are_nonnegative(p in prop::collection::vec(0.0f64..=1.0, 10), bits in prop::collection::vec(any::<bool>(), 10)) {
            let y: Vec<f64> = bits.iter().map(|&b| f64::from(u8::from(b))).collect();
            prop_assert!(compute_loss(&p, &y, 5, BCE).unwrap() >= 0.0);
            prop_assert!(compute_loss(&p, &y, 5, CCE).unwrap() >= 0.0);
        }
    }
}
