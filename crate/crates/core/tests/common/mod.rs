#![allow(dead_code)]

use std::path::{Path, PathBuf};

use image::{Rgb, RgbImage};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use retina_grade::data::{write_manifest, GradeLabel, ImageRecord};

/// Base colour per grade; the classes differ strongly in every channel mix.
const PALETTE: [[u8; 3]; 5] = [
    [20, 20, 20],
    [220, 40, 40],
    [40, 200, 60],
    [40, 60, 220],
    [235, 235, 235],
];

/// Pixel intensity multiplier of the grade's texture at (x, y): flat, fine
/// checkerboard, horizontal bars, a centred disc, vertical bars.
fn texture(grade: usize, x: u32, y: u32, size: u32) -> f32 {
    match grade {
        0 => 1.0,
        1 => ((x / 4 + y / 4) % 2) as f32,
        2 => ((y / 28) % 2) as f32,
        3 => {
            let (dx, dy) = (x as f32 - size as f32 / 2.0, y as f32 - size as f32 / 2.0);
            f32::from(u8::from(dx * dx + dy * dy < (size as f32 / 3.0).powi(2)))
        }
        _ => ((x / 14) % 2) as f32,
    }
}

/// Writes `count` noisy textured PNGs of `size`×`size` plus a manifest,
/// cycling through the five grades. Returns (manifest path, images dir, records).
pub fn synthetic_dataset(dir: &Path, count: usize, size: u32, seed: u64) -> (PathBuf, PathBuf, Vec<ImageRecord>) {
    let images = dir.join("images");
    std::fs::create_dir_all(&images).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut records = Vec::with_capacity(count);
    for i in 0..count {
        let grade = GradeLabel::ALL[i % 5];
        let base = PALETTE[grade.index()];
        let img = RgbImage::from_fn(size, size, |x, y| {
            let t = 0.35 + 0.65 * texture(grade.index(), x, y, size);
            let mut px = |c: u8| (c as f32 * t + rng.random_range(-10.0f32..=10.0)).clamp(0.0, 255.0) as u8;
            Rgb([px(base[0]), px(base[1]), px(base[2])])
        });
        let id = format!("img{i:04}");
        let path = images.join(format!("{id}.png"));
        img.save(&path).unwrap();
        records.push(ImageRecord::new(id, path, grade).unwrap());
    }
    let manifest = dir.join("manifest.csv");
    write_manifest(&manifest, &records).unwrap();
    (manifest, images, records)
}

/// Validation confusion matrix of the published single-label run (rows true, columns predicted).
pub const PUBLISHED_CONFUSION: [[u64; 5]; 5] = [
    [281, 4, 1, 0, 0],
    [6, 24, 19, 0, 1],
    [2, 3, 141, 2, 1],
    [0, 0, 15, 6, 3],
    [0, 3, 15, 0, 23],
];

/// Truth and prediction lists realizing [`PUBLISHED_CONFUSION`].
pub fn published_label_lists() -> (Vec<GradeLabel>, Vec<GradeLabel>) {
    let (mut truth, mut pred) = (Vec::new(), Vec::new());
    for (t, row) in PUBLISHED_CONFUSION.iter().enumerate() {
        for (p, &n) in row.iter().enumerate() {
            for _ in 0..n {
                truth.push(GradeLabel::ALL[t]);
                pred.push(GradeLabel::ALL[p]);
            }
        }
    }
    (truth, pred)
}
