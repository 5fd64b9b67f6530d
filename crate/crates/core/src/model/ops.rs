//! CPU kernels for the convolutional backbone: NCHW tensors, im2col convolution
//! on top of `matrixmultiply`, fused batch-norm + ReLU, and pooling, each with
//! its backward pass.

use std::ops::Range;

/// Dense NCHW activation tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub data: Vec<f32>,
}

impl Tensor {
    pub fn zeros(n: usize, c: usize, h: usize, w: usize) -> Self {
        Tensor {
            n,
            c,
            h,
            w,
            data: vec![0.0; n * c * h * w],
        }
    }

    pub fn from_vec(n: usize, c: usize, h: usize, w: usize, data: Vec<f32>) -> Self {
        assert_eq!(data.len(), n * c * h * w, "tensor data length");
        Tensor { n, c, h, w, data }
    }

    pub fn hw(&self) -> usize {
        self.h * self.w
    }

    pub fn image_len(&self) -> usize {
        self.c * self.h * self.w
    }

    pub fn image(&self, i: usize) -> &[f32] {
        let len = self.image_len();
        &self.data[i * len..(i + 1) * len]
    }

    pub fn chan(&self, range: Range<usize>) -> Chan<'_> {
        assert!(range.end <= self.c);
        let hw = self.hw();
        Chan {
            data: &self.data,
            offset: range.start * hw,
            img_stride: self.image_len(),
            n: self.n,
            c: range.len(),
            hw,
        }
    }

    pub fn all(&self) -> Chan<'_> {
        self.chan(0..self.c)
    }

    pub fn chan_mut(&mut self, range: Range<usize>) -> ChanMut<'_> {
        assert!(range.end <= self.c);
        let hw = self.hw();
        let img_stride = self.image_len();
        ChanMut {
            data: &mut self.data,
            offset: range.start * hw,
            img_stride,
            n: self.n,
            c: range.len(),
            hw,
        }
    }

    pub fn all_mut(&mut self) -> ChanMut<'_> {
        let c = self.c;
        self.chan_mut(0..c)
    }
}

/// A contiguous channel range of every image in a tensor.
#[derive(Clone, Copy)]
pub struct Chan<'a> {
    data: &'a [f32],
    offset: usize,
    img_stride: usize,
    pub n: usize,
    pub c: usize,
    pub hw: usize,
}

impl<'a> Chan<'a> {
    pub fn image(&self, i: usize) -> &'a [f32] {
        let start = i * self.img_stride + self.offset;
        &self.data[start..start + self.c * self.hw]
    }

    pub fn plane(&self, i: usize, ch: usize) -> &'a [f32] {
        let start = i * self.img_stride + self.offset + ch * self.hw;
        &self.data[start..start + self.hw]
    }
}

pub struct ChanMut<'a> {
    data: &'a mut [f32],
    offset: usize,
    img_stride: usize,
    pub n: usize,
    pub c: usize,
    pub hw: usize,
}

impl ChanMut<'_> {
    pub fn image(&mut self, i: usize) -> &mut [f32] {
        let start = i * self.img_stride + self.offset;
        &mut self.data[start..start + self.c * self.hw]
    }

    pub fn plane(&mut self, i: usize, ch: usize) -> &mut [f32] {
        let start = i * self.img_stride + self.offset + ch * self.hw;
        &mut self.data[start..start + self.hw]
    }
}

/// `C (m×n) = A (m×k) · B (k×n)`, optionally accumulating into C. `a_t`/`b_t`
/// mean the operand is stored transposed (k×m / n×k, row-major).
#[allow(clippy::too_many_arguments)]
pub fn gemm(m: usize, k: usize, n: usize, a: &[f32], a_t: bool, b: &[f32], b_t: bool, c: &mut [f32], accumulate: bool) {
    assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    let (rsa, csa) = if a_t { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_t { (1, k as isize) } else { (n as isize, 1) };
    let beta = if accumulate { 1.0 } else { 0.0 };
    // SAFETY: bounds asserted above; strides describe the stated layouts.
    unsafe {
        matrixmultiply::sgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Geometry of a square-kernel, bias-free convolution.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeom {
    pub in_c: usize,
    pub out_c: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvGeom {
    pub fn out_size(&self, h: usize, w: usize) -> (usize, usize) {
        (
            (h + 2 * self.pad - self.kernel) / self.stride + 1,
            (w + 2 * self.pad - self.kernel) / self.stride + 1,
        )
    }

    fn pointwise(&self) -> bool {
        self.kernel == 1 && self.stride == 1 && self.pad == 0
    }

    pub fn weight_len(&self) -> usize {
        self.out_c * self.in_c * self.kernel * self.kernel
    }
}

#[allow(clippy::too_many_arguments)]
fn im2col(x: &[f32], c: usize, h: usize, w: usize, g: &ConvGeom, ho: usize, wo: usize, cols: &mut [f32]) {
    let k = g.kernel;
    let plane_out = ho * wo;
    for ci in 0..c {
        let xp = &x[ci * h * w..(ci + 1) * h * w];
        for ky in 0..k {
            for kx in 0..k {
                let row = (ci * k + ky) * k + kx;
                let dst = &mut cols[row * plane_out..(row + 1) * plane_out];
                for oy in 0..ho {
                    let out_row = &mut dst[oy * wo..(oy + 1) * wo];
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= h as isize {
                        out_row.fill(0.0);
                        continue;
                    }
                    let src = &xp[iy as usize * w..(iy as usize + 1) * w];
                    if g.stride == 1 {
                        // valid ox: 0 <= ox + kx - pad < w
                        let lo = g.pad.saturating_sub(kx).min(wo);
                        let hi = (w + g.pad).saturating_sub(kx).min(wo).max(lo);
                        out_row[..lo].fill(0.0);
                        out_row[hi..].fill(0.0);
                        let s0 = lo + kx - g.pad;
                        out_row[lo..hi].copy_from_slice(&src[s0..s0 + (hi - lo)]);
                    } else {
                        for (ox, o) in out_row.iter_mut().enumerate() {
                            let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                            *o = if ix >= 0 && ix < w as isize {
                                src[ix as usize]
                            } else {
                                0.0
                            };
                        }
                    }
                }
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn col2im_add(cols: &[f32], c: usize, h: usize, w: usize, g: &ConvGeom, ho: usize, wo: usize, dx: &mut [f32]) {
    let k = g.kernel;
    let plane_out = ho * wo;
    for ci in 0..c {
        let xp = &mut dx[ci * h * w..(ci + 1) * h * w];
        for ky in 0..k {
            for kx in 0..k {
                let row = (ci * k + ky) * k + kx;
                let src = &cols[row * plane_out..(row + 1) * plane_out];
                for oy in 0..ho {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let in_row = &mut xp[iy as usize * w..(iy as usize + 1) * w];
                    let col_row = &src[oy * wo..(oy + 1) * wo];
                    for (ox, &v) in col_row.iter().enumerate() {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        if ix >= 0 && ix < w as isize {
                            in_row[ix as usize] += v;
                        }
                    }
                }
            }
        }
    }
}

/// Forward convolution of `x` (`n × in_c × h × w`) into `out`.
pub fn conv2d_forward(x: Chan<'_>, h: usize, w: usize, g: &ConvGeom, weight: &[f32], mut out: ChanMut<'_>) {
    assert_eq!(x.c, g.in_c);
    assert_eq!(out.c, g.out_c);
    let (ho, wo) = g.out_size(h, w);
    assert_eq!(out.hw, ho * wo);
    let kdim = g.in_c * g.kernel * g.kernel;
    let mut cols = if g.pointwise() {
        Vec::new()
    } else {
        vec![0.0; kdim * ho * wo]
    };
    for i in 0..x.n {
        let src = x.image(i);
        let dst = out.image(i);
        if g.pointwise() {
            gemm(g.out_c, kdim, ho * wo, weight, false, src, false, dst, false);
        } else {
            im2col(src, g.in_c, h, w, g, ho, wo, &mut cols);
            gemm(g.out_c, kdim, ho * wo, weight, false, &cols, false, dst, false);
        }
    }
}

/// Backward convolution. Accumulates the weight gradient into `dweight` and
/// writes the input gradient into `dx` (overwriting), when requested.
#[allow(clippy::too_many_arguments)]
pub fn conv2d_backward(
    x: Chan<'_>,
    h: usize,
    w: usize,
    g: &ConvGeom,
    weight: &[f32],
    dy: Chan<'_>,
    mut dweight: Option<&mut [f32]>,
    mut dx: Option<ChanMut<'_>>,
) {
    let (ho, wo) = g.out_size(h, w);
    let plane_out = ho * wo;
    let kdim = g.in_c * g.kernel * g.kernel;
    let mut cols = if g.pointwise() {
        Vec::new()
    } else {
        vec![0.0; kdim * plane_out]
    };
    for i in 0..x.n {
        let dyi = dy.image(i);
        if let Some(dw) = dweight.as_deref_mut() {
            if g.pointwise() {
                gemm(g.out_c, plane_out, kdim, dyi, false, x.image(i), true, dw, true);
            } else {
                im2col(x.image(i), g.in_c, h, w, g, ho, wo, &mut cols);
                gemm(g.out_c, plane_out, kdim, dyi, false, &cols, true, dw, true);
            }
        }
        if let Some(dx) = dx.as_mut() {
            let dxi = dx.image(i);
            if g.pointwise() {
                gemm(kdim, g.out_c, plane_out, weight, true, dyi, false, dxi, false);
            } else {
                gemm(kdim, g.out_c, plane_out, weight, true, dyi, false, &mut cols, false);
                dxi.fill(0.0);
                col2im_add(&cols, g.in_c, h, w, g, ho, wo, dxi);
            }
        }
    }
}

/// Per-channel batch mean and biased variance over (N, H, W).
pub fn channel_stats(x: Chan<'_>) -> (Vec<f32>, Vec<f32>) {
    let m = (x.n * x.hw) as f64;
    let mut mean = vec![0f32; x.c];
    let mut var = vec![0f32; x.c];
    for ch in 0..x.c {
        let mut sum = 0f64;
        for i in 0..x.n {
            sum += x.plane(i, ch).iter().map(|&v| v as f64).sum::<f64>();
        }
        let mu = sum / m;
        let mut sq = 0f64;
        for i in 0..x.n {
            sq += x
                .plane(i, ch)
                .iter()
                .map(|&v| {
                    let d = v as f64 - mu;
                    d * d
                })
                .sum::<f64>();
        }
        mean[ch] = mu as f32;
        var[ch] = (sq / m) as f32;
    }
    (mean, var)
}

/// Affine form of a batch-norm: `y = scale * x + shift`.
pub fn bn_affine(gamma: &[f32], beta: &[f32], mean: &[f32], var: &[f32], eps: f32) -> (Vec<f32>, Vec<f32>) {
    let scale: Vec<f32> = gamma.iter().zip(var).map(|(&g, &v)| g / (v + eps).sqrt()).collect();
    let shift = beta
        .iter()
        .zip(mean)
        .zip(&scale)
        .map(|((&b, &mu), &s)| b - mu * s)
        .collect();
    (scale, shift)
}

/// `out = relu(scale * x + shift)` per channel.
pub fn affine_relu(x: Chan<'_>, scale: &[f32], shift: &[f32], mut out: ChanMut<'_>) {
    for i in 0..x.n {
        for ch in 0..x.c {
            let (s, b) = (scale[ch], shift[ch]);
            let src = x.plane(i, ch);
            for (o, &v) in out.plane(i, ch).iter_mut().zip(src) {
                *o = (s * v + b).max(0.0);
            }
        }
    }
}

/// Backward of `relu(batchnorm(x))`.
///
/// `dout` is the gradient at the ReLU output. With `batch_stats` the
/// normalization statistics are treated as functions of the batch (training
/// mode); otherwise they are constants. Parameter gradients are accumulated
/// into `params` (`dgamma`, `dbeta`) when given; the input gradient is added
/// to `dx` when given.
#[allow(clippy::too_many_arguments)]
pub fn bn_relu_backward(
    x: Chan<'_>,
    dout: Chan<'_>,
    gamma: &[f32],
    beta: &[f32],
    mean: &[f32],
    var: &[f32],
    eps: f32,
    batch_stats: bool,
    mut params: Option<(&mut [f32], &mut [f32])>,
    mut dx: Option<ChanMut<'_>>,
) {
    let m = (x.n * x.hw) as f64;
    for ch in 0..x.c {
        let (g, b, mu) = (gamma[ch], beta[ch], mean[ch]);
        let inv_std = 1.0 / (var[ch] + eps).sqrt();
        let (mut sum_dy, mut sum_dy_xhat) = (0f64, 0f64);
        for i in 0..x.n {
            let (mut a, mut c) = (0f32, 0f32);
            for (&v, &d) in x.plane(i, ch).iter().zip(dout.plane(i, ch)) {
                let xhat = (v - mu) * inv_std;
                if g * xhat + b > 0.0 {
                    a += d;
                    c += d * xhat;
                }
            }
            sum_dy += a as f64;
            sum_dy_xhat += c as f64;
        }
        if let Some((dgamma, dbeta)) = params.as_mut() {
            dgamma[ch] += sum_dy_xhat as f32;
            dbeta[ch] += sum_dy as f32;
        }
        if let Some(dx) = dx.as_mut() {
            let k = g * inv_std;
            let (mean_dy, mean_dy_xhat) = if batch_stats {
                ((sum_dy / m) as f32, (sum_dy_xhat / m) as f32)
            } else {
                (0.0, 0.0)
            };
            for i in 0..x.n {
                let xs = x.plane(i, ch);
                let ds = dout.plane(i, ch);
                for ((o, &v), &d) in dx.plane(i, ch).iter_mut().zip(xs).zip(ds) {
                    let xhat = (v - mu) * inv_std;
                    let dy = if g * xhat + b > 0.0 { d } else { 0.0 };
                    *o += k * (dy - mean_dy - xhat * mean_dy_xhat);
                }
            }
        }
    }
}

/// 3×3, stride 2, padding 1 max pooling. Returns the output and, per output
/// element, the in-plane index of the selected input.
pub fn max_pool_3x3_s2(x: &Tensor) -> (Tensor, Vec<u32>) {
    let ho = (x.h + 2 - 3) / 2 + 1;
    let wo = (x.w + 2 - 3) / 2 + 1;
    let mut out = Tensor::zeros(x.n, x.c, ho, wo);
    let mut idx = vec![0u32; out.data.len()];
    let (h, w) = (x.h as isize, x.w as isize);
    for (p, plane) in x.data.chunks(x.hw()).enumerate() {
        let o = &mut out.data[p * ho * wo..(p + 1) * ho * wo];
        let ix = &mut idx[p * ho * wo..(p + 1) * ho * wo];
        for oy in 0..ho {
            for ox in 0..wo {
                let (mut best, mut arg) = (f32::NEG_INFINITY, 0u32);
                for ky in 0..3isize {
                    let iy = oy as isize * 2 + ky - 1;
                    if iy < 0 || iy >= h {
                        continue;
                    }
                    for kx in 0..3isize {
                        let ixx = ox as isize * 2 + kx - 1;
                        if ixx < 0 || ixx >= w {
                            continue;
                        }
                        let j = (iy * w + ixx) as usize;
                        if plane[j] > best {
                            best = plane[j];
                            arg = j as u32;
                        }
                    }
                }
                o[oy * wo + ox] = best;
                ix[oy * wo + ox] = arg;
            }
        }
    }
    (out, idx)
}

/// Scatters `dy` back to the argmax positions of a `h × w` input.
pub fn max_pool_backward(dy: Chan<'_>, idx: &[u32], h: usize, w: usize) -> Tensor {
    let mut dx = Tensor::zeros(dy.n, dy.c, h, w);
    let hw = h * w;
    for i in 0..dy.n {
        for ch in 0..dy.c {
            let p = i * dy.c + ch;
            let d = dy.plane(i, ch);
            let ix = &idx[p * dy.hw..(p + 1) * dy.hw];
            let dst = &mut dx.data[p * hw..(p + 1) * hw];
            for (&g, &j) in d.iter().zip(ix) {
                dst[j as usize] += g;
            }
        }
    }
    dx
}

/// 2×2, stride 2 average pooling (floor mode), written into `out`.
pub fn avg_pool_2x2(x: &Tensor, mut out: ChanMut<'_>) {
    let (ho, wo) = (x.h / 2, x.w / 2);
    assert_eq!(out.hw, ho * wo);
    for i in 0..x.n {
        for ch in 0..x.c {
            let src = &x.data[(i * x.c + ch) * x.hw()..(i * x.c + ch + 1) * x.hw()];
            let dst = out.plane(i, ch);
            for oy in 0..ho {
                let r0 = &src[2 * oy * x.w..];
                let r1 = &src[(2 * oy + 1) * x.w..];
                for ox in 0..wo {
                    dst[oy * wo + ox] = 0.25 * (r0[2 * ox] + r0[2 * ox + 1] + r1[2 * ox] + r1[2 * ox + 1]);
                }
            }
        }
    }
}

pub fn avg_pool_2x2_backward(dy: Chan<'_>, h: usize, w: usize) -> Tensor {
    let (ho, wo) = (h / 2, w / 2);
    let mut dx = Tensor::zeros(dy.n, dy.c, h, w);
    for i in 0..dy.n {
        for ch in 0..dy.c {
            let d = dy.plane(i, ch);
            let dst = &mut dx.data[(i * dy.c + ch) * h * w..(i * dy.c + ch + 1) * h * w];
            for oy in 0..ho {
                for ox in 0..wo {
                    let g = 0.25 * d[oy * wo + ox];
                    dst[2 * oy * w + 2 * ox] = g;
                    dst[2 * oy * w + 2 * ox + 1] = g;
                    dst[(2 * oy + 1) * w + 2 * ox] = g;
                    dst[(2 * oy + 1) * w + 2 * ox + 1] = g;
                }
            }
        }
    }
    dx
}

/// Mean over each plane: `n × c × h × w` to `n × c`.
pub fn global_avg_pool(x: &Tensor) -> Vec<f32> {
    let hw = x.hw() as f64;
    x.data
        .chunks(x.hw())
        .map(|p| (p.iter().map(|&v| v as f64).sum::<f64>() / hw) as f32)
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(n: usize, c: usize, h: usize, w: usize, seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_vec(
            n,
            c,
            h,
            w,
            (0..n * c * h * w).map(|_| rng.random_range(-1.0..1.0)).collect(),
        )
    }

    /// Direct-loop convolution used as an oracle.
    fn conv_naive(x: &Tensor, g: &ConvGeom, wt: &[f32]) -> Tensor {
        let (ho, wo) = g.out_size(x.h, x.w);
        let mut out = Tensor::zeros(x.n, g.out_c, ho, wo);
        for i in 0..x.n {
            for co in 0..g.out_c {
                for oy in 0..ho {
                    for ox in 0..wo {
                        let mut s = 0f64;
                        for ci in 0..g.in_c {
                            for ky in 0..g.kernel {
                                for kx in 0..g.kernel {
                                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                                    let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                                    if iy < 0 || ix < 0 || iy >= x.h as isize || ix >= x.w as isize {
                                        continue;
                                    }
                                    let xv = x.data[((i * x.c + ci) * x.h + iy as usize) * x.w + ix as usize];
                                    let wv = wt[((co * g.in_c + ci) * g.kernel + ky) * g.kernel + kx];
                                    s += (xv * wv) as f64;
                                }
                            }
                        }
                        out.data[((i * g.out_c + co) * ho + oy) * wo + ox] = s as f32;
                    }
                }
            }
        }
        out
    }

    #[test]
    fn conv_matches_direct_loops() {
        for g in [
            ConvGeom {
                in_c: 3,
                out_c: 4,
                kernel: 7,
                stride: 2,
                pad: 3,
            },
            ConvGeom {
                in_c: 5,
                out_c: 3,
                kernel: 3,
                stride: 1,
                pad: 1,
            },
            ConvGeom {
                in_c: 6,
                out_c: 2,
                kernel: 1,
                stride: 1,
                pad: 0,
            },
        ] {
            let x = random(2, g.in_c, 9, 8, 1);
            let wt = random(1, 1, 1, g.weight_len(), 2).data;
            let (ho, wo) = g.out_size(9, 8);
            let mut out = Tensor::zeros(2, g.out_c, ho, wo);
            conv2d_forward(x.all(), 9, 8, &g, &wt, out.all_mut());
            let expect = conv_naive(&x, &g, &wt);
            for (a, b) in out.data.iter().zip(&expect.data) {
                assert!((a - b).abs() < 1e-4, "{a} vs {b} for {g:?}");
            }
        }
    }

    /// Conv backward checked against the adjoint identity
    /// `<conv(x), dy> = <x, dx> = <w, dw>`, which holds exactly for a bilinear map.
    #[test]
    fn conv_backward_is_adjoint() {
        for g in [
            ConvGeom {
                in_c: 3,
                out_c: 4,
                kernel: 7,
                stride: 2,
                pad: 3,
            },
            ConvGeom {
                in_c: 5,
                out_c: 3,
                kernel: 3,
                stride: 1,
                pad: 1,
            },
            ConvGeom {
                in_c: 6,
                out_c: 2,
                kernel: 1,
                stride: 1,
                pad: 0,
            },
        ] {
            let x = random(2, g.in_c, 10, 7, 3);
            let wt = random(1, 1, 1, g.weight_len(), 4).data;
            let (ho, wo) = g.out_size(10, 7);
            let dy = random(2, g.out_c, ho, wo, 5);
            let y = conv_naive(&x, &g, &wt);
            let lhs: f64 = y.data.iter().zip(&dy.data).map(|(a, b)| (a * b) as f64).sum();
            let mut dw = vec![0f32; wt.len()];
            let mut dx = Tensor::zeros(2, g.in_c, 10, 7);
            conv2d_backward(x.all(), 10, 7, &g, &wt, dy.all(), Some(&mut dw), Some(dx.all_mut()));
            let via_x: f64 = x.data.iter().zip(&dx.data).map(|(a, b)| (a * b) as f64).sum();
            let via_w: f64 = wt.iter().zip(&dw).map(|(a, b)| (a * b) as f64).sum();
            assert!((lhs - via_x).abs() < 1e-3 * lhs.abs().max(1.0), "{lhs} vs {via_x}");
            assert!((lhs - via_w).abs() < 1e-3 * lhs.abs().max(1.0), "{lhs} vs {via_w}");
        }
    }

    fn bn_relu_loss(
        x: &Tensor,
        gamma: &[f32],
        beta: &[f32],
        dout: &Tensor,
        batch: bool,
        stats: &(Vec<f32>, Vec<f32>),
    ) -> f64 {
        let (mean, var) = if batch { channel_stats(x.all()) } else { stats.clone() };
        let (s, b) = bn_affine(gamma, beta, &mean, &var, 1e-5);
        let mut y = Tensor::zeros(x.n, x.c, x.h, x.w);
        affine_relu(x.all(), &s, &b, y.all_mut());
        y.data.iter().zip(&dout.data).map(|(a, b)| (a * b) as f64).sum()
    }

    #[test]
    fn bn_relu_backward_matches_finite_differences() {
        for batch in [true, false] {
            let x = random(3, 2, 3, 3, 11);
            let dout = random(3, 2, 3, 3, 12);
            let gamma = vec![1.3, 0.7];
            let beta = vec![0.1, -0.2];
            let running = (vec![0.05, -0.1], vec![0.8, 1.2]);
            let (mean, var) = if batch { channel_stats(x.all()) } else { running.clone() };
            let mut dx = Tensor::zeros(3, 2, 3, 3);
            let (mut dg, mut db) = (vec![0f32; 2], vec![0f32; 2]);
            bn_relu_backward(
                x.all(),
                dout.all(),
                &gamma,
                &beta,
                &mean,
                &var,
                1e-5,
                batch,
                Some((&mut dg, &mut db)),
                Some(dx.all_mut()),
            );
            let h = 1e-2f32;
            for j in [0usize, 5, 9, 17, 30] {
                let mut xp = x.clone();
                xp.data[j] += h;
                let mut xm = x.clone();
                xm.data[j] -= h;
                let fd = (bn_relu_loss(&xp, &gamma, &beta, &dout, batch, &running)
                    - bn_relu_loss(&xm, &gamma, &beta, &dout, batch, &running))
                    / (2.0 * h as f64);
                assert!(
                    (fd - dx.data[j] as f64).abs() < 2e-2 * fd.abs().max(0.1),
                    "x[{j}] batch={batch}: fd {fd} vs {}",
                    dx.data[j]
                );
            }
            for ch in 0..2 {
                let mut gp = gamma.clone();
                gp[ch] += h;
                let mut gm = gamma.clone();
                gm[ch] -= h;
                let fd = (bn_relu_loss(&x, &gp, &beta, &dout, batch, &running)
                    - bn_relu_loss(&x, &gm, &beta, &dout, batch, &running))
                    / (2.0 * h as f64);
                assert!(
                    (fd - dg[ch] as f64).abs() < 2e-2 * fd.abs().max(0.1),
                    "gamma fd {fd} vs {}",
                    dg[ch]
                );
            }
        }
    }

    #[test]
    fn pooling_shapes_and_gradients() {
        let x = random(2, 3, 8, 8, 21);
        let (mp, idx) = max_pool_3x3_s2(&x);
        assert_eq!((mp.h, mp.w), (4, 4));
        let ones = Tensor::from_vec(2, 3, 4, 4, vec![1.0; 96]);
        let back = max_pool_backward(ones.all(), &idx, 8, 8);
        assert!((back.data.iter().sum::<f32>() - 96.0).abs() < 1e-6);
        for (j, &v) in mp.data.iter().enumerate() {
            let p = j / 16;
            assert_eq!(v, x.data[p * 64 + idx[j] as usize]);
        }

        let mut ap = Tensor::zeros(2, 3, 4, 4);
        avg_pool_2x2(&x, ap.all_mut());
        assert!((ap.data[0] - 0.25 * (x.data[0] + x.data[1] + x.data[8] + x.data[9])).abs() < 1e-6);
        let g = avg_pool_2x2_backward(ones.all(), 8, 8);
        assert!(g.data.iter().all(|&v| v == 0.25));

        let gap = global_avg_pool(&x);
        assert_eq!(gap.len(), 6);
        assert!((gap[0] - x.data[..64].iter().sum::<f32>() / 64.0).abs() < 1e-5);
    }
}
