use std::path::Path;

use image::imageops::FilterType;
use serde::{Deserialize, Serialize};

use super::manifest::ImageRecord;
use crate::error::{Error, Result};

/// ImageNet channel statistics, applied after scaling to [0, 1].
pub const IMAGENET_MEAN: [f32; 3] = [0.485, 0.456, 0.406];
pub const IMAGENET_STD: [f32; 3] = [0.229, 0.224, 0.225];

/// Planar RGB image (channel-major, `3 × height × width`).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageTensor {
    height: usize,
    width: usize,
    data: Vec<f32>,
    normalized: bool,
}

impl ImageTensor {
    pub const CHANNELS: usize = 3;

    pub fn new(height: usize, width: usize, data: Vec<f32>) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(Error::Shape(format!("zero-sized image {height}x{width}")));
        }
        if data.len() != Self::CHANNELS * height * width {
            return Err(Error::Shape(format!(
                "{} values for a 3x{height}x{width} image",
                data.len()
            )));
        }
        Ok(ImageTensor {
            height,
            width,
            data,
            normalized: false,
        })
    }

    /// Image filled with one RGB colour (values in [0, 255]).
    pub fn filled(height: usize, width: usize, rgb: [f32; 3]) -> Self {
        let plane = height * width;
        let mut data = Vec::with_capacity(3 * plane);
        for v in rgb {
            data.extend(std::iter::repeat_n(v, plane));
        }
        ImageTensor {
            height,
            width,
            data,
            normalized: false,
        }
    }

    pub fn from_rgb8(img: &image::RgbImage) -> Self {
        let (w, h) = (img.width() as usize, img.height() as usize);
        let plane = w * h;
        let mut data = vec![0f32; 3 * plane];
        for (i, px) in img.pixels().enumerate() {
            for c in 0..3 {
                data[c * plane + i] = px[c] as f32;
            }
        }
        ImageTensor {
            height: h,
            width: w,
            data,
            normalized: false,
        }
    }

    /// Converts back to 8-bit RGB, rounding and clamping. Only meaningful before
    /// normalization.
    pub fn to_rgb8(&self) -> image::RgbImage {
        let plane = self.height * self.width;
        image::RgbImage::from_fn(self.width as u32, self.height as u32, |x, y| {
            let i = y as usize * self.width + x as usize;
            image::Rgb(std::array::from_fn(|c| {
                self.data[c * plane + i].round().clamp(0.0, 255.0) as u8
            }))
        })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn is_normalized(&self) -> bool {
        self.normalized
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn channel(&self, c: usize) -> &[f32] {
        let plane = self.height * self.width;
        &self.data[c * plane..(c + 1) * plane]
    }

    pub fn pixel(&self, c: usize, y: usize, x: usize) -> f32 {
        self.data[(c * self.height + y) * self.width + x]
    }
}

/// Decodes the record's image as 8-bit RGB and resizes it to a square of
/// `target_size` with bilinear (triangle) filtering.
pub fn load_and_resize_image(record: &ImageRecord, target_size: usize) -> Result<ImageTensor> {
    load_and_resize_path(&record.image_path, target_size)
}

pub fn load_and_resize_path(path: &Path, target_size: usize) -> Result<ImageTensor> {
    if target_size == 0 {
        return Err(Error::InvalidArgument("target_size must be positive".into()));
    }
    let reader = image::ImageReader::open(path)
        .map_err(|e| Error::io(path, e))?
        .with_guessed_format()
        .map_err(|e| Error::io(path, e))?;
    let decoded = reader.decode().map_err(|e| Error::Decode {
        path: path.to_path_buf(),
        message: e.to_string(),
    })?;
    if decoded.width() == 0 || decoded.height() == 0 {
        return Err(Error::Decode {
            path: path.to_path_buf(),
            message: "image has a zero dimension".into(),
        });
    }
    let rgb = decoded.to_rgb8();
    let t = target_size as u32;
    let rgb = if rgb.width() == t && rgb.height() == t {
        rgb
    } else {
        image::imageops::resize(&rgb, t, t, FilterType::Triangle)
    };
    Ok(ImageTensor::from_rgb8(&rgb))
}

/// Scales to [0, 1] and standardizes each channel with the ImageNet statistics.
/// Fails if the tensor was already normalized.
pub fn normalize_image(mut image: ImageTensor) -> Result<ImageTensor> {
    if image.normalized {
        return Err(Error::InvalidArgument("image is already normalized".into()));
    }
    let plane = image.height * image.width;
    for (c, chunk) in image.data.chunks_mut(plane).enumerate() {
        let (mean, std) = (IMAGENET_MEAN[c], IMAGENET_STD[c]);
        for v in chunk {
            *v = (*v / 255.0 - mean) / std;
        }
    }
    image.normalized = true;
    Ok(image)
}
