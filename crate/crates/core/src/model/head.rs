use rand::Rng;
use serde::{Deserialize, Serialize};

use super::layers::{Layer, Param};

/// Final activation of the classification head.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum OutputActivation {
    /// Softmax over the units.
    #[serde(rename = "normalized-exponential")]
    Softmax,
    /// Independent logistic sigmoid per unit.
    #[serde(rename = "independent-sigmoid")]
    Sigmoid,
}

/// Fully connected layer, `out × in` weights plus bias.
#[derive(Debug, Clone)]
pub struct Dense {
    pub name: String,
    pub in_features: usize,
    pub out_features: usize,
    pub weight: Param,
    pub bias: Param,
    pub trainable: bool,
}

impl Dense {
    /// Uniform `±1/sqrt(in)` weights, zero bias.
    pub fn new<R: Rng + ?Sized>(name: String, in_features: usize, out_features: usize, rng: &mut R) -> Self {
        let bound = 1.0 / (in_features as f32).sqrt();
        let weight = (0..in_features * out_features)
            .map(|_| rng.random_range(-bound..bound))
            .collect();
        Dense {
            name,
            in_features,
            out_features,
            weight: Param::learnable(vec![out_features, in_features], weight),
            bias: Param::learnable(vec![out_features], vec![0.0; out_features]),
            trainable: true,
        }
    }

    pub fn param_count(&self) -> usize {
        self.weight.len() + self.bias.len()
    }
}

impl Layer for Dense {
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
        vec![("weight", &self.weight), ("bias", &self.bias)]
    }
    fn params_mut(&mut self) -> Vec<(&'static str, &mut Param)> {
        vec![("weight", &mut self.weight), ("bias", &mut self.bias)]
    }
}

/// Dropout, dense layer and output activation on top of pooled features.
/// Computed in double precision.
#[derive(Debug, Clone)]
pub struct Head {
    pub dense: Dense,
    pub dropout_rate: f64,
    pub activation: OutputActivation,
}

pub struct HeadCache {
    inputs: Vec<f64>,
    mask: Option<Vec<f64>>,
    probs: Vec<f64>,
    rows: usize,
}

impl HeadCache {
    pub fn probabilities(&self) -> &[f64] {
        &self.probs
    }
}

impl Head {
    pub fn new<R: Rng + ?Sized>(
        in_features: usize,
        units: usize,
        dropout_rate: f64,
        activation: OutputActivation,
        rng: &mut R,
    ) -> Self {
        Head {
            dense: Dense::new("classifier".into(), in_features, units, rng),
            dropout_rate,
            activation,
        }
    }

    pub fn units(&self) -> usize {
        self.dense.out_features
    }

    /// Row-major `rows × units` probabilities. Dropout is applied only when a
    /// random source is supplied (training mode), with inverted scaling.
    pub fn forward<R: Rng + ?Sized>(&self, features: &[f32], dropout: Option<&mut R>) -> (Vec<f64>, HeadCache) {
        let fin = self.dense.in_features;
        assert_eq!(features.len() % fin, 0, "feature width");
        let rows = features.len() / fin;
        let mut inputs: Vec<f64> = features.iter().map(|&v| v as f64).collect();
        let mask = match dropout {
            Some(rng) if self.dropout_rate > 0.0 => {
                let keep = 1.0 - self.dropout_rate;
                let m: Vec<f64> = (0..inputs.len())
                    .map(|_| if rng.random_bool(keep) { 1.0 / keep } else { 0.0 })
                    .collect();
                inputs.iter_mut().zip(&m).for_each(|(x, k)| *x *= k);
                Some(m)
            }
            _ => None,
        };
        let probs = self.activate(&self.logits(&inputs, rows));
        let cache = HeadCache {
            inputs,
            mask,
            probs: probs.clone(),
            rows,
        };
        (probs, cache)
    }

    fn logits(&self, inputs: &[f64], rows: usize) -> Vec<f64> {
        let (fin, units) = (self.dense.in_features, self.units());
        let w = &self.dense.weight.value;
        let b = &self.dense.bias.value;
        let mut z = Vec::with_capacity(rows * units);
        for r in 0..rows {
            let x = &inputs[r * fin..(r + 1) * fin];
            for k in 0..units {
                let wk = &w[k * fin..(k + 1) * fin];
                let dot: f64 = wk.iter().zip(x).map(|(&a, &b)| a as f64 * b).sum();
                z.push(dot + b[k] as f64);
            }
        }
        z
    }

    fn activate(&self, z: &[f64]) -> Vec<f64> {
        let units = self.units();
        match self.activation {
            OutputActivation::Sigmoid => z.iter().map(|&v| 1.0 / (1.0 + (-v).exp())).collect(),
            OutputActivation::Softmax => z
                .chunks(units)
                .flat_map(|row| {
                    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                    let e: Vec<f64> = row.iter().map(|&v| (v - max).exp()).collect();
                    let s: f64 = e.iter().sum();
                    e.into_iter().map(move |v| v / s)
                })
                .collect(),
        }
    }

    /// Back-propagates the gradient with respect to the probabilities.
    /// Accumulates dense-layer gradients when trainable and returns the gradient
    /// with respect to the input features.
    pub fn backward(&mut self, cache: &HeadCache, dprobs: &[f64]) -> Vec<f32> {
        let (fin, units) = (self.dense.in_features, self.units());
        assert_eq!(dprobs.len(), cache.rows * units);
        let mut dz = vec![0f64; dprobs.len()];
        for r in 0..cache.rows {
            let p = &cache.probs[r * units..(r + 1) * units];
            let g = &dprobs[r * units..(r + 1) * units];
            let out = &mut dz[r * units..(r + 1) * units];
            match self.activation {
                OutputActivation::Sigmoid => {
                    for k in 0..units {
                        out[k] = g[k] * p[k] * (1.0 - p[k]);
                    }
                }
                OutputActivation::Softmax => {
                    let dot: f64 = g.iter().zip(p).map(|(a, b)| a * b).sum();
                    for k in 0..units {
                        out[k] = p[k] * (g[k] - dot);
                    }
                }
            }
        }

        if self.dense.trainable {
            let Dense { weight, bias, .. } = &mut self.dense;
            for r in 0..cache.rows {
                let x = &cache.inputs[r * fin..(r + 1) * fin];
                for k in 0..units {
                    let d = dz[r * units + k];
                    bias.grad[k] += d as f32;
                    for (gw, &xv) in weight.grad[k * fin..(k + 1) * fin].iter_mut().zip(x) {
                        *gw += (d * xv) as f32;
                    }
                }
            }
        }

        let w = &self.dense.weight.value;
        let mut dx = vec![0f32; cache.rows * fin];
        for r in 0..cache.rows {
            let row = &mut dx[r * fin..(r + 1) * fin];
            for k in 0..units {
                let d = dz[r * units + k];
                for (o, &wv) in row.iter_mut().zip(&w[k * fin..(k + 1) * fin]) {
                    *o += (d * wv as f64) as f32;
                }
            }
            if let Some(mask) = &cache.mask {
                for (o, &m) in row.iter_mut().zip(&mask[r * fin..(r + 1) * fin]) {
                    *o *= m as f32;
                }
            }
        }
        dx
    }
}
