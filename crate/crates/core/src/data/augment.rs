use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::image::ImageTensor;
use crate::error::{Error, Result};

/// Resize target and random augmentation settings for training images.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PreprocessConfig {
    pub target_size: usize,
    /// Zoom scale is drawn from `[1 - zoom_range, 1 + zoom_range]`.
    pub zoom_range: f64,
    pub horizontal_flip: bool,
    pub vertical_flip: bool,
    pub flip_probability: f64,
}

impl Default for PreprocessConfig {
    fn default() -> Self {
        PreprocessConfig {
            target_size: 224,
            zoom_range: 0.15,
            horizontal_flip: true,
            vertical_flip: true,
            flip_probability: 0.5,
        }
    }
}

impl PreprocessConfig {
    /// Configuration that leaves images untouched.
    pub fn identity(target_size: usize) -> Self {
        PreprocessConfig {
            target_size,
            zoom_range: 0.0,
            horizontal_flip: false,
            vertical_flip: false,
            flip_probability: 0.5,
        }
    }

    pub fn is_identity(&self) -> bool {
        self.zoom_range == 0.0 && ((!self.horizontal_flip && !self.vertical_flip) || self.flip_probability == 0.0)
    }

    /// Lists every violated constraint as `field: constraint`.
    pub fn violations(&self) -> Vec<String> {
        let mut v = Vec::new();
        if self.target_size == 0 {
            v.push("preprocess.target_size: must be > 0".to_string());
        }
        if !(0.0..1.0).contains(&self.zoom_range) {
            v.push(format!(
                "preprocess.zoom_range: must be in [0, 1), got {}",
                self.zoom_range
            ));
        }
        if !(0.0..=1.0).contains(&self.flip_probability) {
            v.push(format!(
                "preprocess.flip_probability: must be in [0, 1], got {}",
                self.flip_probability
            ));
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

/// Random source for one record in one epoch, independent of processing order.
pub fn record_rng(seed: u64, epoch: usize, index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (epoch as u64 + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15));
    rng.set_stream(index as u64);
    rng
}

/// Random zoom (one scale shared by both axes, about the image centre) followed by
/// independent horizontal and vertical flips.
///
/// Scales above 1 crop the centre and enlarge it; scales below 1 shrink the image
/// and fill the border by edge replication. Sampling is bilinear.
pub fn augment_image<R: Rng + ?Sized>(image: &ImageTensor, config: &PreprocessConfig, rng: &mut R) -> ImageTensor {
    let mut out = image.clone();
    if config.zoom_range > 0.0 {
        let scale = rng.random_range(1.0 - config.zoom_range..=1.0 + config.zoom_range);
        if scale != 1.0 {
            out = zoom(image, scale);
        }
    }
    if config.horizontal_flip && rng.random_bool(config.flip_probability) {
        flip_horizontal(&mut out);
    }
    if config.vertical_flip && rng.random_bool(config.flip_probability) {
        flip_vertical(&mut out);
    }
    out
}

pub fn zoom(image: &ImageTensor, scale: f64) -> ImageTensor {
    let (h, w) = (image.height(), image.width());
    let (cy, cx) = (h as f64 / 2.0, w as f64 / 2.0);
    let source = |dst: usize, centre: f64, len: usize| {
        let s = (centre + (dst as f64 + 0.5 - centre) / scale - 0.5).clamp(0.0, (len - 1) as f64);
        let lo = s.floor() as usize;
        let hi = (lo + 1).min(len - 1);
        (lo, hi, (s - lo as f64) as f32)
    };
    let rows: Vec<_> = (0..h).map(|y| source(y, cy, h)).collect();
    let cols: Vec<_> = (0..w).map(|x| source(x, cx, w)).collect();

    let mut out = image.clone();
    let src = image.data();
    let plane = h * w;
    let dst = out.data_mut();
    for c in 0..3 {
        let p = &src[c * plane..(c + 1) * plane];
        for (y, &(y0, y1, fy)) in rows.iter().enumerate() {
            for (x, &(x0, x1, fx)) in cols.iter().enumerate() {
                let top = p[y0 * w + x0] * (1.0 - fx) + p[y0 * w + x1] * fx;
                let bottom = p[y1 * w + x0] * (1.0 - fx) + p[y1 * w + x1] * fx;
                dst[c * plane + y * w + x] = top * (1.0 - fy) + bottom * fy;
            }
        }
    }
    out
}

pub fn flip_horizontal(image: &mut ImageTensor) {
    let w = image.width();
    for row in image.data_mut().chunks_mut(w) {
        row.reverse();
    }
}

pub fn flip_vertical(image: &mut ImageTensor) {
    let (h, w) = (image.height(), image.width());
    let plane = h * w;
    for channel in image.data_mut().chunks_mut(plane) {
        for y in 0..h / 2 {
            let (top, bottom) = channel.split_at_mut((h - 1 - y) * w);
            top[y * w..(y + 1) * w].swap_with_slice(&mut bottom[..w]);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn gradient(h: usize, w: usize) -> ImageTensor {
        let data = (0..3 * h * w).map(|i| (i * 37 % 256) as f32).collect();
        ImageTensor::new(h, w, data).unwrap()
    }

    #[test]
    fn identity_config_is_identity() {
        let img = gradient(16, 12);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let out = augment_image(&img, &PreprocessConfig::identity(16), &mut rng);
        assert_eq!(out, img);
    }

    #[test]
    fn flips_are_involutions() {
        let img = gradient(7, 5);
        let mut f = img.clone();
        flip_horizontal(&mut f);
        assert_ne!(f, img);
        assert_eq!(f.pixel(1, 2, 0), img.pixel(1, 2, 4));
        flip_horizontal(&mut f);
        assert_eq!(f, img);
        flip_vertical(&mut f);
        assert_eq!(f.pixel(2, 0, 3), img.pixel(2, 6, 3));
        flip_vertical(&mut f);
        assert_eq!(f, img);
    }

    #[test]
    fn zoom_in_enlarges_centre_and_zoom_out_replicates_edges() {
        let img = gradient(20, 20);
        assert_eq!(zoom(&img, 1.0), img);
        let wide = zoom(&img, 0.5);
        // corners sample outside the source and clamp to the corner pixel
        assert_eq!(wide.pixel(0, 0, 0), img.pixel(0, 0, 0));
        assert_eq!(wide.pixel(0, 19, 19), img.pixel(0, 19, 19));
        let flat = ImageTensor::filled(10, 10, [5.0, 6.0, 7.0]);
        for scale in [1.15, 0.85] {
            let z = zoom(&flat, scale);
            assert!(z.data().iter().zip(flat.data()).all(|(a, b)| (a - b).abs() < 1e-5));
        }
    }

    #[test]
    fn seeded_augmentation_is_reproducible() {
        let img = gradient(32, 32);
        let cfg = PreprocessConfig {
            target_size: 32,
            ..Default::default()
        };
        let a = augment_image(&img, &cfg, &mut record_rng(9, 2, 5));
        let b = augment_image(&img, &cfg, &mut record_rng(9, 2, 5));
        assert_eq!(a.data(), b.data());
        let differs = (0..20).any(|i| augment_image(&img, &cfg, &mut record_rng(9, 2, i)).data() != a.data());
        assert!(differs);
    }

    #[test]
    fn violations_reported_per_field() {
        let cfg = PreprocessConfig {
            target_size: 0,
            zoom_range: 1.0,
            flip_probability: 1.5,
            ..Default::default()
        };
        assert_eq!(cfg.violations().len(), 3);
        assert!(PreprocessConfig::default().validate().is_ok());
    }

    proptest! {
        #[test]
        fn augmentation_preserves_shape(
            h in 1usize..24, w in 1usize..24,
            zoom_range in 0.0f64..0.99,
            hf in any::<bool>(), vf in any::<bool>(),
            p in 0.0f64..=1.0, seed in any::<u64>(),
        ) {
            let img = gradient(h, w);
            let cfg = PreprocessConfig { target_size: h, zoom_range, horizontal_flip: hf, vertical_flip: vf, flip_probability: p };
            let out = augment_image(&img, &cfg, &mut ChaCha8Rng::seed_from_u64(seed));
            prop_assert_eq!((out.height(), out.width()), (h, w));
            prop_assert!(out.data().iter().all(|v| v.is_finite() && (0.0..=255.0).contains(v)));
        }
    }
}
