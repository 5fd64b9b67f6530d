//! Losses, the Adam optimizer, the epoch loop and split evaluation.

mod adam;
mod curves;
mod loss;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use adam::{Adam, ADAM_BETA1, ADAM_BETA2, ADAM_EPSILON};
pub use curves::{read_curves_csv, write_curves_csv, CURVES_HEADER};
pub use loss::{compute_loss, loss_and_gradient, LossKind, CLIP_EPS};

use crate::data::{
    iterate_batches, prepare_image, DatasetSplit, GradeLabel, ImageRecord, Pipeline, PreprocessConfig, NUM_GRADES,
};
use crate::error::{Error, Result};
use crate::labels::{encode_ordinal, ProbabilityVector, Regime, DEFAULT_THRESHOLD};
use crate::metrics::{build_report, grade_kappa, multilabel_accuracy, MetricsReport, MultilabelInputs};
use crate::model::{activation_for, stack_images, ModelHandle};

/// Images per inference forward pass.
const EVAL_CHUNK: usize = 16;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Optimizer {
    #[default]
    Adam,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub regime: Regime,
    /// Defaults to the regime's loss when absent.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub loss: Option<LossKind>,
    pub optimizer: Optimizer,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    /// Recorded with the run; not used by training.
    pub alpha: f64,
    pub seed: u64,
    /// Trains the head only.
    pub freeze_backbone: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            regime: Regime::Multi,
            loss: None,
            optimizer: Optimizer::Adam,
            learning_rate: 0.00005,
            batch_size: 32,
            epochs: 15,
            alpha: 0.2,
            seed: 42,
            freeze_backbone: false,
        }
    }
}

impl TrainConfig {
    pub fn loss_kind(&self) -> LossKind {
        self.loss.unwrap_or(LossKind::for_regime(self.regime))
    }

    pub fn violations(&self) -> Vec<String> {
        let mut v = Vec::new();
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            v.push(format!("train.learning_rate: must be > 0, got {}", self.learning_rate));
        }
        if self.batch_size < 1 {
            v.push("train.batch_size: must be >= 1, got 0".into());
        }
        if self.epochs < 1 {
            v.push("train.epochs: must be >= 1, got 0".into());
        }
        if !self.alpha.is_finite() {
            v.push(format!("train.alpha: must be finite, got {}", self.alpha));
        }
        if let Some(loss) = self.loss {
            if loss != LossKind::for_regime(self.regime) {
                v.push(format!(
                    "train.loss: regime {} requires {}",
                    self.regime,
                    match self.regime {
                        Regime::Single => "categorical-cross-entropy",
                        Regime::Multi => "binary-cross-entropy",
                    }
                ));
            }
        }
        v
    }

    pub fn validate(&self) -> Result<()> {
        let v = self.violations();
        if v.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(v.join("; ")))
        }
    }
}

/// Metrics recorded after one epoch.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochTrace {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    /// Grade accuracy (single) or per-unit binary accuracy (multi).
    pub train_accuracy: f64,
    pub val_accuracy: f64,
    /// Multi regime only.
    pub val_qwk: Option<f64>,
}

fn check_regime(model: &ModelHandle, regime: Regime) -> Result<()> {
    if model.spec().output_activation != activation_for(regime) {
        return Err(Error::InvalidArgument(format!(
            "model head ({:?}) does not match the {regime} regime",
            model.spec().output_activation
        )));
    }
    Ok(())
}

/// Normalized network inputs for `items`.
fn load_batch(items: &[(usize, &ImageRecord)], size: usize, pipeline: Pipeline<'_>) -> Result<crate::model::Tensor> {
    let images = items
        .iter()
        .map(|&(i, r)| prepare_image(r, i, size, pipeline))
        .collect::<Result<Vec<_>>>()?;
    stack_images(&images, size)
}

/// Inference-mode pooled features for every record, row-major.
fn extract_features(model: &ModelHandle, records: &[ImageRecord]) -> Result<Vec<f32>> {
    let mut out = Vec::with_capacity(records.len() * model.backbone().num_features());
    let indexed: Vec<_> = records.iter().enumerate().collect();
    for chunk in indexed.chunks(EVAL_CHUNK) {
        let x = load_batch(chunk, model.input_size(), Pipeline::Eval)?;
        out.extend(model.features(&x));
    }
    Ok(out)
}

fn to_vectors(probs: &[f64]) -> Result<Vec<ProbabilityVector>> {
    probs
        .chunks(NUM_GRADES)
        .map(|row| {
            let arr: [f64; NUM_GRADES] = row
                .try_into()
                .map_err(|_| Error::Shape("head must have 5 units".into()))?;
            ProbabilityVector::new(arr)
        })
        .collect()
}

/// Inference-mode probabilities for every record.
pub fn predict_records(model: &ModelHandle, records: &[ImageRecord]) -> Result<Vec<ProbabilityVector>> {
    if records.is_empty() {
        return Err(Error::InvalidArgument("no records to predict".into()));
    }
    let features = extract_features(model, records)?;
    to_vectors(&model.predict_from_features(&features))
}

/// Calibrates the backbone's batch-norm statistics on `records` in one
/// batch (see [`ModelHandle::calibrate_batch_norm`]).
pub fn calibrate_on_records(model: &mut ModelHandle, records: &[ImageRecord]) -> Result<()> {
    if records.is_empty() {
        return Err(Error::InvalidArgument("no records to calibrate on".into()));
    }
    let indexed: Vec<_> = records.iter().enumerate().collect();
    let x = load_batch(&indexed, model.input_size(), Pipeline::Eval)?;
    model.calibrate_batch_norm(&x);
    Ok(())
}

struct SubsetScore {
    loss: f64,
    accuracy: f64,
    qwk: Option<f64>,
}

fn score(probs: &[ProbabilityVector], records: &[ImageRecord], regime: Regime, kind: LossKind) -> Result<SubsetScore> {
    let flat: Vec<f64> = probs.iter().flat_map(|p| *p.values()).collect();
    let targets: Vec<f64> = records.iter().flat_map(|r| regime.encode(r.grade)).collect();
    let loss = compute_loss(&flat, &targets, NUM_GRADES, kind)?;
    let truth: Vec<GradeLabel> = records.iter().map(|r| r.grade).collect();
    let decoded: Vec<GradeLabel> = probs.iter().map(|p| regime.decode(p, DEFAULT_THRESHOLD)).collect();
    Ok(match regime {
        Regime::Single => SubsetScore {
            loss,
            accuracy: truth.iter().zip(&decoded).filter(|(a, b)| a == b).count() as f64 / truth.len() as f64,
            qwk: None,
        },
        Regime::Multi => {
            let ordinal: Vec<_> = truth.iter().map(|&g| encode_ordinal(g)).collect();
            SubsetScore {
                loss,
                accuracy: multilabel_accuracy(&ordinal, probs, DEFAULT_THRESHOLD)?,
                qwk: Some(grade_kappa(&truth, &decoded)?),
            }
        }
    })
}

/// Trains for exactly `config.epochs` epochs and returns the final-epoch model
/// with one trace entry per epoch.
pub fn train_model(
    model: ModelHandle,
    split: &DatasetSplit,
    config: &TrainConfig,
    preprocess: &PreprocessConfig,
) -> Result<(ModelHandle, Vec<EpochTrace>)> {
    train_model_with(model, split, config, preprocess, |_| {})
}

/// [`train_model`] with a callback after every epoch.
pub fn train_model_with(
    mut model: ModelHandle,
    split: &DatasetSplit,
    config: &TrainConfig,
    preprocess: &PreprocessConfig,
    mut on_epoch: impl FnMut(&EpochTrace),
) -> Result<(ModelHandle, Vec<EpochTrace>)> {
    config.validate()?;
    preprocess.validate()?;
    check_regime(&model, config.regime)?;
    if split.train.is_empty() || split.validation.is_empty() {
        return Err(Error::Split(format!(
            "training needs both subsets non-empty (train {}, validation {})",
            split.train.len(),
            split.validation.len()
        )));
    }
    let size = model.input_size();
    if preprocess.target_size != size {
        return Err(Error::InvalidArgument(format!(
            "preprocess.target_size {} differs from the model input size {size}",
            preprocess.target_size
        )));
    }
    if config.freeze_backbone {
        model.freeze_backbone();
    }
    let regime = config.regime;
    let kind = config.loss_kind();
    let units = model.head().units();

    // A frozen backbone on unaugmented inputs yields fixed features.
    let cached = model.backbone_frozen() && preprocess.is_identity();
    let (train_feats, val_feats) = if cached {
        (
            extract_features(&model, &split.train)?,
            extract_features(&model, &split.validation)?,
        )
    } else {
        (Vec::new(), Vec::new())
    };
    let nf = model.backbone().num_features();

    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(config.seed);
    shuffle_rng.set_stream(2);
    let mut dropout_rng = ChaCha8Rng::seed_from_u64(config.seed);
    dropout_rng.set_stream(3);
    let mut adam = Adam::new(config.learning_rate);
    let mut trace = Vec::with_capacity(config.epochs);

    for epoch in 1..=config.epochs {
        let batches = iterate_batches(&split.train, config.batch_size, true, &mut shuffle_rng)?;
        for (b, batch) in batches.enumerate() {
            let targets: Vec<f64> = batch.iter().flat_map(|(_, r)| regime.encode(r.grade)).collect();
            let cache = if cached {
                let feats: Vec<f32> = batch
                    .iter()
                    .flat_map(|&(i, _)| train_feats[i * nf..(i + 1) * nf].iter().copied())
                    .collect();
                model.forward_train_from_features(&feats, None, &mut dropout_rng)
            } else {
                let pipeline = Pipeline::Train {
                    config: preprocess,
                    seed: config.seed,
                    epoch,
                };
                let x = load_batch(&batch, size, pipeline)?;
                model.forward_train(&x, &mut dropout_rng)
            };
            let (loss, grad) = loss_and_gradient(cache.probabilities(), &targets, units, kind)
                .map_err(|_| Error::NonFiniteLoss { epoch, batch: b + 1 })?;
            if !loss.is_finite() {
                return Err(Error::NonFiniteLoss { epoch, batch: b + 1 });
            }
            model.zero_grad();
            model.backward(&cache, &grad);
            drop(cache);
            adam.step(model.trainable_params_mut().into_iter().map(|(_, p)| p));
        }

        let (train_probs, val_probs) = if cached {
            (
                to_vectors(&model.predict_from_features(&train_feats))?,
                to_vectors(&model.predict_from_features(&val_feats))?,
            )
        } else {
            (
                predict_records(&model, &split.train)?,
                predict_records(&model, &split.validation)?,
            )
        };
        let tr = score(&train_probs, &split.train, regime, kind)?;
        let va = score(&val_probs, &split.validation, regime, kind)?;
        let entry = EpochTrace {
            epoch,
            train_loss: tr.loss,
            val_loss: va.loss,
            train_accuracy: tr.accuracy,
            val_accuracy: va.accuracy,
            val_qwk: va.qwk,
        };
        log::info!(
            "epoch {epoch}/{}: train_loss {:.4} val_loss {:.4} train_acc {:.4} val_acc {:.4}{}",
            config.epochs,
            entry.train_loss,
            entry.val_loss,
            entry.train_accuracy,
            entry.val_accuracy,
            entry.val_qwk.map(|q| format!(" val_qwk {q:.4}")).unwrap_or_default()
        );
        on_epoch(&entry);
        trace.push(entry);
    }
    Ok((model, trace))
}

/// Predicts every record, decodes with the regime's decoder and builds the
/// full report.
pub fn evaluate_on_split(
    model: &ModelHandle,
    records: &[ImageRecord],
    regime: Regime,
    threshold: f64,
) -> Result<MetricsReport> {
    check_regime(model, regime)?;
    let probs = predict_records(model, records)?;
    report_from_probabilities(records, &probs, regime, threshold)
}

/// Builds a report from precomputed probabilities.
pub fn report_from_probabilities(
    records: &[ImageRecord],
    probs: &[ProbabilityVector],
    regime: Regime,
    threshold: f64,
) -> Result<MetricsReport> {
    let truth: Vec<GradeLabel> = records.iter().map(|r| r.grade).collect();
    let predicted: Vec<GradeLabel> = probs.iter().map(|p| regime.decode(p, threshold)).collect();
    match regime {
        Regime::Single => build_report(&truth, &predicted, regime, None),
        Regime::Multi => {
            let targets: Vec<_> = truth.iter().map(|&g| encode_ordinal(g)).collect();
            let inputs = MultilabelInputs {
                targets: &targets,
                probabilities: probs,
                threshold,
            };
            build_report(&truth, &predicted, regime, Some(inputs))
        }
    }
}
