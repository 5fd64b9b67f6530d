//! Manifest ingestion, splitting, image loading, augmentation and batching.

mod augment;
mod batch;
mod grade;
mod image;
mod manifest;
mod split;

pub use augment::{augment_image, flip_horizontal, flip_vertical, record_rng, zoom, PreprocessConfig};
pub use batch::{iterate_batches, prepare_image, Batches, Pipeline};
pub use grade::{GradeLabel, NUM_GRADES};
pub use image::{
    load_and_resize_image, load_and_resize_path, normalize_image, ImageTensor, IMAGENET_MEAN, IMAGENET_STD,
};
pub use manifest::{
    load_ids, load_manifest, load_manifest_with_ext, write_manifest, ImageRecord, DEFAULT_IMAGE_EXT, MANIFEST_HEADER,
};
pub use split::{read_split, split_dataset, stratified_quotas, write_split, DatasetSplit, SPLIT_HEADER};
