//! DenseNet121 backbone with a dropout + dense classification head.

mod checkpoint;
mod densenet;
mod head;
mod layers;
pub mod ops;
mod pretrained;

use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use checkpoint::{
    load_checkpoint, save_checkpoint, CheckpointMeta, TrainingFingerprint, CHECKPOINT_FORMAT_VERSION, SPEC_FILE,
    WEIGHTS_FILE,
};
pub use densenet::{Backbone, BackboneCache, DenseNetConfig};
pub use head::{Dense, Head, HeadCache, OutputActivation};
pub use layers::{BatchNorm, Conv2d, Layer, Param};
pub use ops::Tensor;
pub use pretrained::{default_weights_path, load_pretrained_backbone, CACHE_ENV, PRETRAINED_FILE};

use crate::data::{ImageTensor, NUM_GRADES};
use crate::error::{Error, Result};
use crate::labels::{ProbabilityVector, Regime};

pub const DENSENET121: &str = "densenet121";

/// Architecture contract of the classifier.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSpec {
    pub backbone: String,
    pub input_size: usize,
    pub pooled_features: usize,
    pub dropout_rate: f64,
    pub output_units: usize,
    pub output_activation: OutputActivation,
    pub pretrained: bool,
}

impl Default for ModelSpec {
    fn default() -> Self {
        ModelSpec::for_regime(Regime::Multi)
    }
}

impl ModelSpec {
    pub fn for_regime(regime: Regime) -> Self {
        ModelSpec {
            backbone: DENSENET121.into(),
            input_size: 224,
            pooled_features: 1024,
            dropout_rate: 0.5,
            output_units: NUM_GRADES,
            output_activation: activation_for(regime),
            pretrained: true,
        }
    }

    pub fn violations(&self) -> Vec<String> {
        let mut v = Vec::new();
        if self.backbone != DENSENET121 {
            v.push(format!(
                "model.backbone: unknown backbone `{}` (only densenet121)",
                self.backbone
            ));
        }
        if self.input_size != 224 {
            v.push(format!(
                "model.input_size: must be 224 for densenet121, got {}",
                self.input_size
            ));
        }
        if self.pooled_features != 1024 {
            v.push(format!(
                "model.pooled_features: densenet121 produces 1024 features, got {}",
                self.pooled_features
            ));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            v.push(format!(
                "model.dropout_rate: must be in [0, 1), got {}",
                self.dropout_rate
            ));
        }
        if self.output_units != NUM_GRADES {
            v.push(format!(
                "model.output_units: must be {NUM_GRADES}, got {}",
                self.output_units
            ));
        }
        v
    }

    pub fn validate(&self) -> Result<()> {
        if self.backbone != DENSENET121 {
            return Err(Error::UnknownBackbone(self.backbone.clone()));
        }
        let v = self.violations();
        if v.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(v.join("; ")))
        }
    }
}

pub fn activation_for(regime: Regime) -> OutputActivation {
    match regime {
        Regime::Single => OutputActivation::Softmax,
        Regime::Multi => OutputActivation::Sigmoid,
    }
}

/// A built network: backbone, head and per-layer trainable flags.
#[derive(Debug, Clone)]
pub struct ModelHandle {
    spec: ModelSpec,
    backbone: Backbone,
    head: Head,
}

/// State of a training-mode forward pass.
pub struct TrainCache {
    backbone: Option<BackboneCache>,
    head: HeadCache,
}

impl TrainCache {
    pub fn probabilities(&self) -> &[f64] {
        self.head.probabilities()
    }
}

/// Builds the network. Pretrained backbone weights are read from the weights
/// cache (see [`default_weights_path`]); everything randomly initialized is
/// drawn from `seed`.
pub fn build_model(spec: &ModelSpec, seed: u64) -> Result<ModelHandle> {
    let path = spec.pretrained.then(default_weights_path);
    build_model_with_weights(spec, seed, path.as_deref())
}

/// Like [`build_model`] with an explicit pretrained weights file, used when
/// `spec.pretrained` is set.
pub fn build_model_with_weights(spec: &ModelSpec, seed: u64, weights: Option<&Path>) -> Result<ModelHandle> {
    spec.validate()?;
    let mut model = ModelHandle::random(spec.clone(), DenseNetConfig::densenet121(), seed);
    if spec.pretrained {
        let path: PathBuf = match weights {
            Some(p) => p.to_path_buf(),
            None => default_weights_path(),
        };
        load_pretrained_backbone(&mut model.backbone, &path)?;
    }
    Ok(model)
}

pub fn count_parameters(model: &ModelHandle, trainable_only: bool) -> usize {
    model.count_parameters(trainable_only)
}

/// Class probabilities for a batch of normalized 224×224 images, in inference
/// mode.
pub fn predict_batch(model: &ModelHandle, batch: &[ImageTensor]) -> Result<Vec<ProbabilityVector>> {
    const CHUNK: usize = 16;
    let mut out = Vec::with_capacity(batch.len());
    for chunk in batch.chunks(CHUNK) {
        let x = stack_images(chunk, model.spec.input_size)?;
        let probs = model.predict(&x);
        for row in probs.chunks(NUM_GRADES) {
            let arr: [f64; NUM_GRADES] = row.try_into().expect("five units");
            out.push(ProbabilityVector::new(arr.map(|p| p.clamp(0.0, 1.0)))?);
        }
    }
    Ok(out)
}

/// Stacks normalized images into an NCHW tensor.
pub fn stack_images(images: &[ImageTensor], size: usize) -> Result<Tensor> {
    let mut data = Vec::with_capacity(images.len() * 3 * size * size);
    for (i, img) in images.iter().enumerate() {
        if img.height() != size || img.width() != size {
            return Err(Error::Shape(format!(
                "image {i} is {}x{}, expected {size}x{size}",
                img.height(),
                img.width()
            )));
        }
        if !img.is_normalized() {
            return Err(Error::InvalidArgument(format!("image {i} has not been normalized")));
        }
        data.extend_from_slice(img.data());
    }
    Ok(Tensor::from_vec(images.len(), 3, size, size, data))
}

impl ModelHandle {
    /// Randomly initialized network on an arbitrary DenseNet configuration.
    /// The architecture fields of `spec` are not checked against `config`; this
    /// exists for small test networks.
    #[doc(hidden)]
    pub fn random(spec: ModelSpec, config: DenseNetConfig, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let backbone = Backbone::new(config, &mut rng);
        let mut head_rng = ChaCha8Rng::seed_from_u64(seed);
        head_rng.set_stream(1);
        let head = Head::new(
            backbone.num_features(),
            spec.output_units,
            spec.dropout_rate,
            spec.output_activation,
            &mut head_rng,
        );
        ModelHandle { spec, backbone, head }
    }

    pub fn spec(&self) -> &ModelSpec {
        &self.spec
    }

    pub fn backbone(&self) -> &Backbone {
        &self.backbone
    }

    pub fn head(&self) -> &Head {
        &self.head
    }

    pub fn head_mut(&mut self) -> &mut Head {
        &mut self.head
    }

    pub fn input_size(&self) -> usize {
        self.spec.input_size
    }

    pub fn layers(&self) -> Vec<&dyn Layer> {
        let mut v = self.backbone.layers();
        v.push(&self.head.dense);
        v
    }

    pub fn layers_mut(&mut self) -> Vec<&mut dyn Layer> {
        let mut v = self.backbone.layers_mut();
        v.push(&mut self.head.dense);
        v
    }

    pub fn trainable_flags(&self) -> Vec<(String, bool)> {
        self.layers()
            .iter()
            .map(|l| (l.name().to_string(), l.trainable()))
            .collect()
    }

    /// Sets the trainable flag of every layer whose name starts with `prefix`.
    pub fn set_trainable(&mut self, prefix: &str, trainable: bool) {
        for l in self.layers_mut() {
            if l.name().starts_with(prefix) {
                l.set_trainable(trainable);
            }
        }
    }

    pub(crate) fn set_trainable_exact(&mut self, name: &str, trainable: bool) {
        for l in self.layers_mut() {
            if l.name() == name {
                l.set_trainable(trainable);
            }
        }
    }

    pub fn freeze_backbone(&mut self) {
        for l in self.backbone.layers_mut() {
            l.set_trainable(false);
        }
    }

    pub fn backbone_frozen(&self) -> bool {
        !self.backbone.any_trainable()
    }

    /// Number of stored values. Batch-norm running statistics belong to their
    /// layer and are counted with it.
    pub fn count_parameters(&self, trainable_only: bool) -> usize {
        self.layers()
            .iter()
            .filter(|l| !trainable_only || l.trainable())
            .flat_map(|l| l.params())
            .map(|(_, p)| p.len())
            .sum()
    }

    /// Every tensor with its full dotted name, in a fixed order.
    pub fn named_tensors(&self) -> Vec<(String, &Param)> {
        self.layers()
            .into_iter()
            .flat_map(|l| {
                let name = l.name().to_string();
                l.params().into_iter().map(move |(t, p)| (format!("{name}.{t}"), p))
            })
            .collect()
    }

    pub fn named_tensors_mut(&mut self) -> Vec<(String, &mut Param)> {
        self.layers_mut()
            .into_iter()
            .flat_map(|l| {
                let name = l.name().to_string();
                l.params_mut().into_iter().map(move |(t, p)| (format!("{name}.{t}"), p))
            })
            .collect()
    }

    /// Learnable tensors of trainable layers.
    pub fn trainable_params_mut(&mut self) -> Vec<(String, &mut Param)> {
        self.layers_mut()
            .into_iter()
            .filter(|l| l.trainable())
            .flat_map(|l| {
                let name = l.name().to_string();
                l.params_mut()
                    .into_iter()
                    .filter(|(_, p)| p.learnable)
                    .map(move |(t, p)| (format!("{name}.{t}"), p))
            })
            .collect()
    }

    pub fn zero_grad(&mut self) {
        for (_, p) in self.trainable_params_mut() {
            p.zero_grad();
        }
    }

    /// Sets every backbone batch-norm running statistic to the batch statistics
    /// of `x`, regardless of trainable flags.
    pub fn calibrate_batch_norm(&mut self, x: &Tensor) {
        let flags: Vec<bool> = self.backbone.layers().iter().map(|l| l.trainable()).collect();
        for l in self.backbone.layers_mut() {
            l.set_trainable(true);
        }
        let (_, cache) = self.backbone.forward(x, true);
        self.backbone
            .set_running_stats(cache.as_ref().expect("a trainable backbone records its statistics"));
        for (l, f) in self.backbone.layers_mut().into_iter().zip(flags) {
            l.set_trainable(f);
        }
    }

    /// Pooled backbone features in inference mode (`n × num_features`).
    pub fn features(&self, x: &Tensor) -> Vec<f32> {
        self.backbone.forward(x, false).0
    }

    /// Inference-mode probabilities, row-major `n × units`.
    pub fn predict(&self, x: &Tensor) -> Vec<f64> {
        self.predict_from_features(&self.features(x))
    }

    pub fn predict_from_features(&self, features: &[f32]) -> Vec<f64> {
        self.head.forward::<ChaCha8Rng>(features, None).0
    }

    /// Training-mode forward pass: batch statistics in trainable batch-norm
    /// layers and dropout drawn from `dropout_rng`.
    pub fn forward_train<R: Rng + ?Sized>(&self, x: &Tensor, dropout_rng: &mut R) -> TrainCache {
        let (features, backbone) = self.backbone.forward(x, true);
        self.forward_train_from_features(&features, backbone, dropout_rng)
    }

    /// Training-mode head pass on precomputed (frozen-backbone) features.
    pub fn forward_train_from_features<R: Rng + ?Sized>(
        &self,
        features: &[f32],
        backbone: Option<BackboneCache>,
        dropout_rng: &mut R,
    ) -> TrainCache {
        let (_, head) = self.head.forward(features, Some(dropout_rng));
        TrainCache { backbone, head }
    }

    /// Accumulates gradients given dL/dprobabilities and advances batch-norm
    /// running statistics.
    pub fn backward(&mut self, cache: &TrainCache, dprobs: &[f64]) {
        let dfeatures = self.head.backward(&cache.head, dprobs);
        if let Some(bc) = &cache.backbone {
            self.backbone.backward(bc, &dfeatures);
            self.backbone.update_running_stats(bc);
        }
    }
}
