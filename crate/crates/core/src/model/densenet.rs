//! DenseNet feature extractor with hand-written backward pass.
//!
//! Each dense block writes its layers' outputs into one preallocated buffer, so
//! a layer's input is a channel prefix of that buffer rather than a fresh
//! concatenation. The training cache keeps only the block buffers, the
//! bottleneck outputs and the normalization statistics; normalized
//! activations are recomputed during the backward pass.

use rand::Rng;

use super::layers::{BatchNorm, BnStats, Conv2d, Layer};
use super::ops::{
    affine_relu, avg_pool_2x2, avg_pool_2x2_backward, bn_relu_backward, channel_stats, conv2d_backward, conv2d_forward,
    global_avg_pool, max_pool_3x3_s2, max_pool_backward, Chan, ConvGeom, Tensor,
};

/// Width and depth hyper-parameters of a DenseNet.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DenseNetConfig {
    pub init_features: usize,
    pub growth_rate: usize,
    pub bn_size: usize,
    pub block_layers: Vec<usize>,
}

impl DenseNetConfig {
    /// The standard 121-layer network: blocks of 6/12/24/16 layers, growth 32.
    pub fn densenet121() -> Self {
        DenseNetConfig {
            init_features: 64,
            growth_rate: 32,
            bn_size: 4,
            block_layers: vec![6, 12, 24, 16],
        }
    }

    /// Width of the final feature map.
    pub fn num_features(&self) -> usize {
        let mut c = self.init_features;
        for (i, &l) in self.block_layers.iter().enumerate() {
            c += l * self.growth_rate;
            if i + 1 < self.block_layers.len() {
                c /= 2;
            }
        }
        c
    }
}

#[derive(Debug, Clone)]
pub struct DenseLayer {
    pub norm1: BatchNorm,
    pub conv1: Conv2d,
    pub norm2: BatchNorm,
    pub conv2: Conv2d,
}

#[derive(Debug, Clone)]
pub struct Transition {
    pub norm: BatchNorm,
    pub conv: Conv2d,
}

#[derive(Debug, Clone)]
pub struct Backbone {
    config: DenseNetConfig,
    pub conv0: Conv2d,
    pub norm0: BatchNorm,
    pub blocks: Vec<Vec<DenseLayer>>,
    pub transitions: Vec<Transition>,
    pub norm5: BatchNorm,
}

struct LayerCache {
    stats1: BnStats,
    z1: Tensor,
    stats2: BnStats,
}

struct BlockCache {
    buf: Tensor,
    layers: Vec<LayerCache>,
}

/// Intermediate state of a training-mode forward pass.
pub struct BackboneCache {
    input: Tensor,
    c0: Tensor,
    stats0: BnStats,
    pool_idx: Vec<u32>,
    blocks: Vec<BlockCache>,
    transitions: Vec<BnStats>,
    stats5: BnStats,
}

fn relu_bn(x: Chan<'_>, norm: &BatchNorm, stats: &BnStats, h: usize, w: usize) -> Tensor {
    let (scale, shift) = norm.affine(stats);
    let mut out = Tensor::zeros(x.n, x.c, h, w);
    affine_relu(x, &scale, &shift, out.all_mut());
    out
}

/// Batch statistics when the layer trains in this pass, running averages otherwise.
fn forward_stats(norm: &BatchNorm, x: Chan<'_>, train: bool, pre: Option<(&[f32], &[f32])>) -> BnStats {
    if train && norm.trainable {
        let (mean, var) = match pre {
            Some((m, v)) => (m.to_vec(), v.to_vec()),
            None => channel_stats(x),
        };
        BnStats { mean, var, batch: true }
    } else {
        norm.running_stats()
    }
}

fn bn_backward(
    norm: &mut BatchNorm,
    x: Chan<'_>,
    dout: Chan<'_>,
    stats: &BnStats,
    dx: Option<super::ops::ChanMut<'_>>,
) {
    let trainable = norm.trainable;
    let BatchNorm { gamma, beta, .. } = norm;
    let params = if trainable {
        Some((&mut gamma.grad[..], &mut beta.grad[..]))
    } else {
        None
    };
    bn_relu_backward(
        x,
        dout,
        &gamma.value,
        &beta.value,
        &stats.mean,
        &stats.var,
        super::layers::BN_EPS,
        stats.batch,
        params,
        dx,
    );
}

fn conv_backward(
    conv: &mut Conv2d,
    x: Chan<'_>,
    h: usize,
    w: usize,
    dy: Chan<'_>,
    dx: Option<super::ops::ChanMut<'_>>,
) {
    let trainable = conv.trainable;
    let geom = conv.geom;
    let super::layers::Param { value, grad, .. } = &mut conv.weight;
    let dweight = if trainable { Some(&mut grad[..]) } else { None };
    conv2d_backward(x, h, w, &geom, value, dy, dweight, dx);
}

fn update_running(norm: &mut BatchNorm, stats: &BnStats, count: usize, m: f32) {
    if !stats.batch {
        return;
    }
    let unbias = if count > 1 {
        count as f32 / (count - 1) as f32
    } else {
        1.0
    };
    for c in 0..stats.mean.len() {
        let rm = &mut norm.running_mean.value[c];
        *rm = (1.0 - m) * *rm + m * stats.mean[c];
        let rv = &mut norm.running_var.value[c];
        *rv = (1.0 - m) * *rv + m * stats.var[c] * unbias;
    }
}

impl Backbone {
    pub fn new<R: Rng + ?Sized>(config: DenseNetConfig, rng: &mut R) -> Self {
        let f = |s: &str| format!("features.{s}");
        let init = config.init_features;
        let conv0 = Conv2d::new(
            f("conv0"),
            ConvGeom {
                in_c: 3,
                out_c: init,
                kernel: 7,
                stride: 2,
                pad: 3,
            },
            rng,
        );
        let norm0 = BatchNorm::new(f("norm0"), init);
        let inter = config.bn_size * config.growth_rate;
        let mut c = init;
        let mut blocks = Vec::new();
        let mut transitions = Vec::new();
        for (b, &n_layers) in config.block_layers.iter().enumerate() {
            let mut layers = Vec::with_capacity(n_layers);
            for l in 0..n_layers {
                let p = f(&format!("denseblock{}.denselayer{}", b + 1, l + 1));
                layers.push(DenseLayer {
                    norm1: BatchNorm::new(format!("{p}.norm1"), c),
                    conv1: Conv2d::new(
                        format!("{p}.conv1"),
                        ConvGeom {
                            in_c: c,
                            out_c: inter,
                            kernel: 1,
                            stride: 1,
                            pad: 0,
                        },
                        rng,
                    ),
                    norm2: BatchNorm::new(format!("{p}.norm2"), inter),
                    conv2: Conv2d::new(
                        format!("{p}.conv2"),
                        ConvGeom {
                            in_c: inter,
                            out_c: config.growth_rate,
                            kernel: 3,
                            stride: 1,
                            pad: 1,
                        },
                        rng,
                    ),
                });
                c += config.growth_rate;
            }
            blocks.push(layers);
            if b + 1 < config.block_layers.len() {
                let p = f(&format!("transition{}", b + 1));
                transitions.push(Transition {
                    norm: BatchNorm::new(format!("{p}.norm"), c),
                    conv: Conv2d::new(
                        format!("{p}.conv"),
                        ConvGeom {
                            in_c: c,
                            out_c: c / 2,
                            kernel: 1,
                            stride: 1,
                            pad: 0,
                        },
                        rng,
                    ),
                });
                c /= 2;
            }
        }
        let norm5 = BatchNorm::new(f("norm5"), c);
        Backbone {
            config,
            conv0,
            norm0,
            blocks,
            transitions,
            norm5,
        }
    }

    pub fn config(&self) -> &DenseNetConfig {
        &self.config
    }

    pub fn num_features(&self) -> usize {
        self.norm5.channels()
    }

    /// Every layer in forward order.
    pub fn layers(&self) -> Vec<&dyn Layer> {
        let mut out: Vec<&dyn Layer> = vec![&self.conv0, &self.norm0];
        for (b, block) in self.blocks.iter().enumerate() {
            for l in block {
                out.extend([&l.norm1 as &dyn Layer, &l.conv1, &l.norm2, &l.conv2]);
            }
            if let Some(t) = self.transitions.get(b) {
                out.extend([&t.norm as &dyn Layer, &t.conv]);
            }
        }
        out.push(&self.norm5);
        out
    }

    pub fn layers_mut(&mut self) -> Vec<&mut dyn Layer> {
        let mut out: Vec<&mut dyn Layer> = vec![&mut self.conv0, &mut self.norm0];
        for (block, t) in self.blocks.iter_mut().zip(
            self.transitions
                .iter_mut()
                .map(Some)
                .chain(std::iter::repeat_with(|| None)),
        ) {
            for l in block {
                out.extend([&mut l.norm1 as &mut dyn Layer, &mut l.conv1, &mut l.norm2, &mut l.conv2]);
            }
            if let Some(t) = t {
                out.extend([&mut t.norm as &mut dyn Layer, &mut t.conv]);
            }
        }
        out.push(&mut self.norm5);
        out
    }

    pub fn any_trainable(&self) -> bool {
        self.layers().iter().any(|l| l.trainable())
    }

    /// Runs the feature extractor, returning pooled features (`n × num_features`).
    ///
    /// With `training`, trainable batch-norm layers normalize with batch
    /// statistics and a cache for [`Backbone::backward`] is returned; call
    /// [`Backbone::update_running_stats`] with it to advance the running averages.
    pub fn forward(&self, x: &Tensor, training: bool) -> (Vec<f32>, Option<BackboneCache>) {
        let train = training && self.any_trainable();
        let n = x.n;
        let g0 = self.conv0.geom;
        let (h0, w0) = g0.out_size(x.h, x.w);
        let mut c0 = Tensor::zeros(n, g0.out_c, h0, w0);
        conv2d_forward(x.all(), x.h, x.w, &g0, &self.conv0.weight.value, c0.all_mut());
        let stats0 = forward_stats(&self.norm0, c0.all(), train, None);
        let a0 = relu_bn(c0.all(), &self.norm0, &stats0, h0, w0);
        let (mut cur, pool_idx) = max_pool_3x3_s2(&a0);
        drop(a0);

        let growth = self.config.growth_rate;
        let inter = self.config.bn_size * growth;
        let mut block_caches = Vec::new();
        let mut transition_stats = Vec::new();
        let mut features = Vec::new();
        let mut stats5 = None;

        for (b, layers) in self.blocks.iter().enumerate() {
            let (h, w) = (cur.h, cur.w);
            let c_in = cur.c;
            let c_out = c_in + layers.len() * growth;
            let mut buf = Tensor::zeros(n, c_out, h, w);
            for i in 0..n {
                buf.chan_mut(0..c_in).image(i).copy_from_slice(cur.image(i));
            }
            drop(cur);
            // batch statistics per channel, shared by every layer that reads it
            let (mut cmean, mut cvar) = if train {
                channel_stats(buf.chan(0..c_in))
            } else {
                (Vec::new(), Vec::new())
            };
            let mut layer_caches = Vec::new();
            for (l, layer) in layers.iter().enumerate() {
                let cl = c_in + l * growth;
                let pre = train.then(|| (&cmean[..cl], &cvar[..cl]));
                let stats1 = forward_stats(&layer.norm1, buf.chan(0..cl), train, pre);
                let a1 = relu_bn(buf.chan(0..cl), &layer.norm1, &stats1, h, w);
                let mut z1 = Tensor::zeros(n, inter, h, w);
                conv2d_forward(
                    a1.all(),
                    h,
                    w,
                    &layer.conv1.geom,
                    &layer.conv1.weight.value,
                    z1.all_mut(),
                );
                drop(a1);
                let stats2 = forward_stats(&layer.norm2, z1.all(), train, None);
                let a2 = relu_bn(z1.all(), &layer.norm2, &stats2, h, w);
                conv2d_forward(
                    a2.all(),
                    h,
                    w,
                    &layer.conv2.geom,
                    &layer.conv2.weight.value,
                    buf.chan_mut(cl..cl + growth),
                );
                if train {
                    let (m, v) = channel_stats(buf.chan(cl..cl + growth));
                    cmean.extend(m);
                    cvar.extend(v);
                    layer_caches.push(LayerCache { stats1, z1, stats2 });
                }
            }

            let pre = train.then(|| (&cmean[..], &cvar[..]));
            if let Some(t) = self.transitions.get(b) {
                let stats = forward_stats(&t.norm, buf.all(), train, pre);
                let r = relu_bn(buf.all(), &t.norm, &stats, h, w);
                let mut tout = Tensor::zeros(n, t.conv.geom.out_c, h, w);
                conv2d_forward(r.all(), h, w, &t.conv.geom, &t.conv.weight.value, tout.all_mut());
                drop(r);
                let mut next = Tensor::zeros(n, tout.c, h / 2, w / 2);
                avg_pool_2x2(&tout, next.all_mut());
                cur = next;
                if train {
                    transition_stats.push(stats);
                }
            } else {
                let stats = forward_stats(&self.norm5, buf.all(), train, pre);
                let f = relu_bn(buf.all(), &self.norm5, &stats, h, w);
                features = global_avg_pool(&f);
                stats5 = Some(stats);
                cur = Tensor::zeros(0, 0, 0, 0);
            }
            if train {
                block_caches.push(BlockCache {
                    buf,
                    layers: layer_caches,
                });
            }
        }

        let cache = train.then(|| BackboneCache {
            input: x.clone(),
            c0,
            stats0,
            pool_idx,
            blocks: block_caches,
            transitions: transition_stats,
            stats5: stats5.expect("at least one block"),
        });
        (features, cache)
    }

    /// Advances running averages of every batch-normalized layer with the
    /// statistics recorded in `cache`.
    pub fn update_running_stats(&mut self, cache: &BackboneCache) {
        self.blend_running_stats(cache, super::layers::BN_MOMENTUM);
    }

    /// Replaces running statistics with the batch statistics in `cache`.
    pub fn set_running_stats(&mut self, cache: &BackboneCache) {
        self.blend_running_stats(cache, 1.0);
    }

    fn blend_running_stats(&mut self, cache: &BackboneCache, m: f32) {
        let n = cache.input.n;
        update_running(&mut self.norm0, &cache.stats0, n * cache.c0.hw(), m);
        for (b, (layers, bc)) in self.blocks.iter_mut().zip(&cache.blocks).enumerate() {
            let count = n * bc.buf.hw();
            for (layer, lc) in layers.iter_mut().zip(&bc.layers) {
                update_running(&mut layer.norm1, &lc.stats1, count, m);
                update_running(&mut layer.norm2, &lc.stats2, count, m);
            }
            if let (Some(t), Some(st)) = (self.transitions.get_mut(b), cache.transitions.get(b)) {
                update_running(&mut t.norm, st, count, m);
            }
        }
        let last = cache.blocks.last().expect("at least one block");
        update_running(&mut self.norm5, &cache.stats5, n * last.buf.hw(), m);
    }

    /// Accumulates parameter gradients of trainable layers given the gradient of
    /// the pooled features (`n × num_features`).
    pub fn backward(&mut self, cache: &BackboneCache, dfeatures: &[f32]) {
        let n = cache.input.n;
        let growth = self.config.growth_rate;
        let inter = self.config.bn_size * growth;
        let last = cache.blocks.last().expect("at least one block");
        let (h, w) = (last.buf.h, last.buf.w);
        let hw = (h * w) as f32;
        let f = last.buf.c;
        assert_eq!(dfeatures.len(), n * f);

        let mut da = Tensor::zeros(n, f, h, w);
        for (plane, &d) in da.data.chunks_mut(h * w).zip(dfeatures) {
            plane.fill(d / hw);
        }
        let mut grad = Tensor::zeros(n, f, h, w);
        bn_backward(
            &mut self.norm5,
            last.buf.all(),
            da.all(),
            &cache.stats5,
            Some(grad.all_mut()),
        );
        drop(da);

        for b in (0..self.blocks.len()).rev() {
            let bc = &cache.blocks[b];
            let (h, w) = (bc.buf.h, bc.buf.w);
            let c_in = bc.buf.c - self.blocks[b].len() * growth;
            for l in (0..self.blocks[b].len()).rev() {
                let layer = &mut self.blocks[b][l];
                let lc = &bc.layers[l];
                let cl = c_in + l * growth;

                let a2 = relu_bn(lc.z1.all(), &layer.norm2, &lc.stats2, h, w);
                let mut da2 = Tensor::zeros(n, inter, h, w);
                conv_backward(
                    &mut layer.conv2,
                    a2.all(),
                    h,
                    w,
                    grad.chan(cl..cl + growth),
                    Some(da2.all_mut()),
                );
                drop(a2);
                let mut dz1 = Tensor::zeros(n, inter, h, w);
                bn_backward(
                    &mut layer.norm2,
                    lc.z1.all(),
                    da2.all(),
                    &lc.stats2,
                    Some(dz1.all_mut()),
                );
                drop(da2);

                let a1 = relu_bn(bc.buf.chan(0..cl), &layer.norm1, &lc.stats1, h, w);
                let mut da1 = Tensor::zeros(n, cl, h, w);
                conv_backward(&mut layer.conv1, a1.all(), h, w, dz1.all(), Some(da1.all_mut()));
                drop(a1);
                bn_backward(
                    &mut layer.norm1,
                    bc.buf.chan(0..cl),
                    da1.all(),
                    &lc.stats1,
                    Some(grad.chan_mut(0..cl)),
                );
            }

            if b > 0 {
                let prev = &cache.blocks[b - 1].buf;
                let t = &mut self.transitions[b - 1];
                let stats = &cache.transitions[b - 1];
                let dt = avg_pool_2x2_backward(grad.chan(0..c_in), prev.h, prev.w);
                let r = relu_bn(prev.all(), &t.norm, stats, prev.h, prev.w);
                let mut dr = Tensor::zeros(n, prev.c, prev.h, prev.w);
                conv_backward(&mut t.conv, r.all(), prev.h, prev.w, dt.all(), Some(dr.all_mut()));
                drop(r);
                let mut prev_grad = Tensor::zeros(n, prev.c, prev.h, prev.w);
                bn_backward(&mut t.norm, prev.all(), dr.all(), stats, Some(prev_grad.all_mut()));
                grad = prev_grad;
            } else if self.conv0.trainable || self.norm0.trainable {
                let c0 = &cache.c0;
                let dn0 = max_pool_backward(grad.chan(0..c0.c), &cache.pool_idx, c0.h, c0.w);
                let mut dc0 = Tensor::zeros(n, c0.c, c0.h, c0.w);
                bn_backward(&mut self.norm0, c0.all(), dn0.all(), &cache.stats0, Some(dc0.all_mut()));
                drop(dn0);
                let x = &cache.input;
                conv_backward(&mut self.conv0, x.all(), x.h, x.w, dc0.all(), None);
            }
        }
    }
}
