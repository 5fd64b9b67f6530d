//! Confusion matrix, precision/recall/F1, accuracy, quadratic weighted kappa
//! and the assembled evaluation report.

mod render;

use serde::{Deserialize, Serialize};

pub use render::{comparison_row, render_report, write_confusion_csv, write_metrics_json, ComparisonRow, ReportFormat};

use crate::data::{GradeLabel, NUM_GRADES};
use crate::error::{Error, Result};
use crate::labels::{OrdinalVector, ProbabilityVector, Regime};

/// Counts indexed `[true grade][predicted grade]`. Serialized row-major.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(into = "Vec<u64>", try_from = "Vec<u64>")]
pub struct ConfusionMatrix {
    counts: [[u64; NUM_GRADES]; NUM_GRADES],
}

impl ConfusionMatrix {
    pub fn from_counts(counts: [[u64; NUM_GRADES]; NUM_GRADES]) -> Self {
        ConfusionMatrix { counts }
    }

    pub fn counts(&self) -> &[[u64; NUM_GRADES]; NUM_GRADES] {
        &self.counts
    }

    pub fn get(&self, truth: usize, predicted: usize) -> u64 {
        self.counts[truth][predicted]
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().flatten().sum()
    }

    pub fn trace(&self) -> u64 {
        (0..NUM_GRADES).map(|k| self.counts[k][k]).sum()
    }

    pub fn row_sum(&self, k: usize) -> u64 {
        self.counts[k].iter().sum()
    }

    pub fn col_sum(&self, k: usize) -> u64 {
        self.counts.iter().map(|r| r[k]).sum()
    }

    pub fn row_major(&self) -> Vec<u64> {
        self.counts.iter().flatten().copied().collect()
    }

    /// One (true, predicted) pair per counted sample, in row-major cell order.
    pub fn label_lists(&self) -> (Vec<GradeLabel>, Vec<GradeLabel>) {
        let mut t = Vec::new();
        let mut p = Vec::new();
        for (i, row) in self.counts.iter().enumerate() {
            for (j, &c) in row.iter().enumerate() {
                for _ in 0..c {
                    t.push(GradeLabel::ALL[i]);
                    p.push(GradeLabel::ALL[j]);
                }
            }
        }
        (t, p)
    }
}

impl From<ConfusionMatrix> for Vec<u64> {
    fn from(cm: ConfusionMatrix) -> Self {
        cm.row_major()
    }
}

impl TryFrom<Vec<u64>> for ConfusionMatrix {
    type Error = String;

    fn try_from(v: Vec<u64>) -> std::result::Result<Self, String> {
        if v.len() != NUM_GRADES * NUM_GRADES {
            return Err(format!(
                "confusion matrix needs {} entries, got {}",
                NUM_GRADES * NUM_GRADES,
                v.len()
            ));
        }
        let mut counts = [[0u64; NUM_GRADES]; NUM_GRADES];
        for (k, c) in v.into_iter().enumerate() {
            counts[k / NUM_GRADES][k % NUM_GRADES] = c;
        }
        Ok(ConfusionMatrix { counts })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClassMetrics {
    pub grade: GradeLabel,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub support: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Averages {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub regime: Regime,
    pub per_class: Vec<ClassMetrics>,
    #[serde(rename = "macro")]
    pub macro_avg: Averages,
    pub weighted: Averages,
    pub accuracy: f64,
    pub qwk: Option<f64>,
    pub multilabel_accuracy: Option<f64>,
    pub confusion: ConfusionMatrix,
    pub warnings: Vec<String>,
}

pub fn confusion_matrix(truth: &[GradeLabel], predicted: &[GradeLabel]) -> Result<ConfusionMatrix> {
    check_lengths(truth.len(), predicted.len())?;
    let mut counts = [[0u64; NUM_GRADES]; NUM_GRADES];
    for (t, p) in truth.iter().zip(predicted) {
        counts[t.index()][p.index()] += 1;
    }
    Ok(ConfusionMatrix { counts })
}

fn check_lengths(a: usize, b: usize) -> Result<()> {
    if a != b {
        return Err(Error::Shape(format!("{a} true labels but {b} predictions")));
    }
    if a == 0 {
        return Err(Error::InvalidArgument("no samples to evaluate".into()));
    }
    Ok(())
}

fn ratio(num: u64, den: u64) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

fn f1(p: f64, r: f64) -> f64 {
    if p + r == 0.0 {
        0.0
    } else {
        2.0 * p * r / (p + r)
    }
}

/// Precision, recall, F1 and support per grade. Empty denominators give 0.
pub fn per_class_metrics(cm: &ConfusionMatrix) -> Result<Vec<ClassMetrics>> {
    if cm.total() == 0 {
        return Err(Error::InvalidArgument("confusion matrix is all zero".into()));
    }
    Ok(GradeLabel::ALL
        .iter()
        .map(|&g| {
            let k = g.index();
            let precision = ratio(cm.get(k, k), cm.col_sum(k));
            let recall = ratio(cm.get(k, k), cm.row_sum(k));
            ClassMetrics {
                grade: g,
                precision,
                recall,
                f1: f1(precision, recall),
                support: cm.row_sum(k),
            }
        })
        .collect())
}

/// Macro (unweighted) and support-weighted averages, plus trace/total accuracy.
pub fn aggregate_metrics(per_class: &[ClassMetrics], cm: &ConfusionMatrix) -> Result<(Averages, Averages, f64)> {
    if per_class.len() != NUM_GRADES {
        return Err(Error::Shape(format!(
            "expected {NUM_GRADES} classes, got {}",
            per_class.len()
        )));
    }
    for c in per_class {
        if c.support != cm.row_sum(c.grade.index()) {
            return Err(Error::InvalidArgument(format!(
                "support {} for {} does not match confusion row sum {}",
                c.support,
                c.grade.name(),
                cm.row_sum(c.grade.index())
            )));
        }
    }
    let total = cm.total();
    if total == 0 {
        return Err(Error::InvalidArgument("confusion matrix is all zero".into()));
    }
    let n = NUM_GRADES as f64;
    let mean = |f: fn(&ClassMetrics) -> f64| per_class.iter().map(f).sum::<f64>() / n;
    let weighted =
        |f: fn(&ClassMetrics) -> f64| per_class.iter().map(|c| f(c) * c.support as f64).sum::<f64>() / total as f64;
    let macro_avg = Averages {
        precision: mean(|c| c.precision),
        recall: mean(|c| c.recall),
        f1: mean(|c| c.f1),
    };
    let weighted_avg = Averages {
        precision: weighted(|c| c.precision),
        recall: weighted(|c| c.recall),
        f1: weighted(|c| c.f1),
    };
    Ok((macro_avg, weighted_avg, cm.trace() as f64 / total as f64))
}

/// Fraction of the `B × 5` unit positions where `p > threshold` agrees with the
/// binary target.
pub fn multilabel_accuracy(truth: &[OrdinalVector], probs: &[ProbabilityVector], threshold: f64) -> Result<f64> {
    check_lengths(truth.len(), probs.len())?;
    let agree: usize = truth
        .iter()
        .zip(probs)
        .map(|(t, p)| {
            t.values()
                .iter()
                .zip(p.values())
                .filter(|(&y, &v)| (v > threshold) == (y == 1))
                .count()
        })
        .sum();
    Ok(agree as f64 / (truth.len() * NUM_GRADES) as f64)
}

/// Cohen's kappa with quadratic weights `(i−j)²/(n−1)²` and expected counts
/// from the product of the marginals.
///
/// Computed from first and second moments of the two label lists in exact
/// integer arithmetic: the weighted observed disagreement is `Σ(t−p)²` and the
/// weighted expected disagreement is `(N·Σt² + N·Σp² − 2·Σt·Σp)/N`. The
/// `(n−1)²` normalizer cancels. Returns 1.0 when the expected disagreement is
/// zero (both lists constant and equal).
pub fn quadratic_weighted_kappa(truth: &[usize], predicted: &[usize], num_classes: usize) -> Result<f64> {
    check_lengths(truth.len(), predicted.len())?;
    if num_classes < 2 {
        return Err(Error::InvalidArgument(format!(
            "kappa needs at least 2 classes, got {num_classes}"
        )));
    }
    let (mut s1t, mut s1p, mut s2t, mut s2p, mut disagree) = (0i128, 0i128, 0i128, 0i128, 0i128);
    for (&t, &p) in truth.iter().zip(predicted) {
        if t >= num_classes || p >= num_classes {
            return Err(Error::InvalidArgument(format!(
                "grade {} out of range for {num_classes} classes",
                t.max(p)
            )));
        }
        let (t, p) = (t as i128, p as i128);
        s1t += t;
        s1p += p;
        s2t += t * t;
        s2p += p * p;
        disagree += (t - p) * (t - p);
    }
    let n = truth.len() as i128;
    let expected = n * (s2t + s2p) - 2 * s1t * s1p;
    if expected == 0 {
        return Ok(1.0);
    }
    Ok(1.0 - (n * disagree) as f64 / expected as f64)
}

/// Grade-level kappa over [`GradeLabel`] lists with five classes.
pub fn grade_kappa(truth: &[GradeLabel], predicted: &[GradeLabel]) -> Result<f64> {
    let t: Vec<usize> = truth.iter().map(|g| g.index()).collect();
    let p: Vec<usize> = predicted.iter().map(|g| g.index()).collect();
    quadratic_weighted_kappa(&t, &p, NUM_GRADES)
}

/// Unit-level inputs for [`multilabel_accuracy`].
pub struct MultilabelInputs<'a> {
    pub targets: &'a [OrdinalVector],
    pub probabilities: &'a [ProbabilityVector],
    pub threshold: f64,
}

pub fn build_report(
    truth: &[GradeLabel],
    predicted: &[GradeLabel],
    regime: Regime,
    multilabel: Option<MultilabelInputs<'_>>,
) -> Result<MetricsReport> {
    let cm = confusion_matrix(truth, predicted)?;
    let per_class = per_class_metrics(&cm)?;
    let (macro_avg, weighted, accuracy) = aggregate_metrics(&per_class, &cm)?;
    let qwk = grade_kappa(truth, predicted)?;
    let multilabel_accuracy = match (regime, multilabel) {
        (Regime::Multi, Some(m)) => {
            if m.targets.len() != truth.len() {
                return Err(Error::Shape(format!(
                    "{} unit targets for {} samples",
                    m.targets.len(),
                    truth.len()
                )));
            }
            Some(multilabel_accuracy(m.targets, m.probabilities, m.threshold)?)
        }
        (Regime::Single, Some(_)) => {
            return Err(Error::InvalidArgument(
                "unit-level inputs given for the single-label regime".into(),
            ))
        }
        (_, None) => None,
    };
    let mut warnings = Vec::new();
    for g in GradeLabel::ALL {
        let k = g.index();
        if cm.col_sum(k) == 0 {
            warnings.push(format!(
                "precision for {} is undefined (never predicted); reported as 0",
                g.name()
            ));
        }
        if cm.row_sum(k) == 0 {
            warnings.push(format!(
                "recall for {} is undefined (no true samples); reported as 0",
                g.name()
            ));
        }
    }
    Ok(MetricsReport {
        regime,
        per_class,
        macro_avg,
        weighted,
        accuracy,
        qwk: Some(qwk),
        multilabel_accuracy,
        confusion: cm,
        warnings,
    })
}
