use rand::Rng;
use rand_distr::{Distribution, Normal};

use super::ops::{bn_affine, ConvGeom};

/// A named weight tensor. Learnable tensors carry a gradient buffer; running
/// statistics do not.
#[derive(Debug, Clone, PartialEq)]
pub struct Param {
    pub shape: Vec<usize>,
    pub value: Vec<f32>,
    pub grad: Vec<f32>,
    pub learnable: bool,
}

impl Param {
    pub fn learnable(shape: Vec<usize>, value: Vec<f32>) -> Self {
        assert_eq!(shape.iter().product::<usize>(), value.len());
        let grad = vec![0.0; value.len()];
        Param {
            shape,
            value,
            grad,
            learnable: true,
        }
    }

    pub fn buffer(shape: Vec<usize>, value: Vec<f32>) -> Self {
        assert_eq!(shape.iter().product::<usize>(), value.len());
        Param {
            shape,
            value,
            grad: Vec::new(),
            learnable: false,
        }
    }

    pub fn len(&self) -> usize {
        self.value.len()
    }

    pub fn is_empty(&self) -> bool {
        self.value.is_empty()
    }

    pub fn zero_grad(&mut self) {
        self.grad.fill(0.0);
    }
}

/// Access to a layer's tensors by their conventional (torchvision) names.
pub trait Layer {
    fn name(&self) -> &str;
    fn trainable(&self) -> bool;
    fn set_trainable(&mut self, trainable: bool);
    fn params(&self) -> Vec<(&'static str, &Param)>;
    fn params_mut(&mut self) -> Vec<(&'static str, &mut Param)>;
}

#[derive(Debug, Clone)]
pub struct Conv2d {
    pub name: String,
    pub geom: ConvGeom,
    pub weight: Param,
    pub trainable: bool,
}

impl Conv2d {
    /// Kaiming-normal initialization (fan-in, ReLU gain).
    pub fn new<R: Rng + ?Sized>(name: String, geom: ConvGeom, rng: &mut R) -> Self {
        let fan_in = (geom.in_c * geom.kernel * geom.kernel) as f32;
        let normal = Normal::new(0.0, (2.0 / fan_in).sqrt()).expect("positive std");
        let value = (0..geom.weight_len()).map(|_| normal.sample(rng)).collect();
        Conv2d {
            name,
            weight: Param::learnable(vec![geom.out_c, geom.in_c, geom.kernel, geom.kernel], value),
            geom,
            trainable: true,
        }
    }
}

impl Layer for Conv2d {
    fn name(&self) -> &str {
        &self.name
    }
    fn trainable(&self) -> bool {
        self.trainable
    }
    fn set_trainable(&mut self, trainable: bool) {
        self.trainable = trainable;
    }
    fn params(&self) -> Vec<(&'static str, &Param)> {
        vec![("weight", &self.weight)]
    }
    fn params_mut(&mut self) -> Vec<(&'static str, &mut Param)> {
        vec![("weight", &mut self.weight)]
    }
}

pub const BN_EPS: f32 = 1e-5;
pub const BN_MOMENTUM: f32 = 0.1;

#[derive(Debug, Clone)]
pub struct BatchNorm {
    pub name: String,
    pub gamma: Param,
    pub beta: Param,
    pub running_mean: Param,
    pub running_var: Param,
    pub trainable: bool,
}

/// Statistics a batch-norm used in one forward pass.
#[derive(Debug, Clone)]
pub struct BnStats {
    pub mean: Vec<f32>,
    pub var: Vec<f32>,
    /// True when computed from the batch (training mode).
    pub batch: bool,
}

impl BatchNorm {
    pub fn new(name: String, channels: usize) -> Self {
        BatchNorm {
            name,
            gamma: Param::learnable(vec![channels], vec![1.0; channels]),
            beta: Param::learnable(vec![channels], vec![0.0; channels]),
            running_mean: Param::buffer(vec![channels], vec![0.0; channels]),
            running_var: Param::buffer(vec![channels], vec![1.0; channels]),
            trainable: true,
        }
    }

    pub fn channels(&self) -> usize {
        self.gamma.len()
    }

    pub fn running_stats(&self) -> BnStats {
        BnStats {
            mean: self.running_mean.value.clone(),
            var: self.running_var.value.clone(),
            batch: false,
        }
    }

    pub fn affine(&self, stats: &BnStats) -> (Vec<f32>, Vec<f32>) {
        bn_affine(&self.gamma.value, &self.beta.value, &stats.mean, &stats.var, BN_EPS)
    }
}

impl Layer for BatchNorm {
    fn name(&self) -> &str {
        &self.name
    }
    fn trainable(&self) -> bool {
        self.trainable
    }
    fn set_trainable(&mut self, trainable: bool) {
        self.trainable = trainable;
    }
    fn params(&self) -> Vec<(&'static str, &Param)> {
        vec![
            ("weight", &self.gamma),
            ("bias", &self.beta),
            ("running_mean", &self.running_mean),
            ("running_var", &self.running_var),
        ]
    }
    fn params_mut(&mut self) -> Vec<(&'static str, &mut Param)> {
        vec![
            ("weight", &mut self.gamma),
            ("bias", &mut self.beta),
            ("running_mean", &mut self.running_mean),
            ("running_var", &mut self.running_var),
        ]
    }
}
