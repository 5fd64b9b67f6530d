use std::path::{Path, PathBuf};

use safetensors::{Dtype, SafeTensors};

use super::densenet::Backbone;
use crate::error::{Error, Result};

/// Environment variable naming the pretrained-weights cache directory.
pub const CACHE_ENV: &str = "RETINA_GRADE_CACHE";
/// File name of the ImageNet DenseNet121 weights inside the cache.
pub const PRETRAINED_FILE: &str = "densenet121.safetensors";

/// `$RETINA_GRADE_CACHE/densenet121.safetensors`, falling back to
/// `$HOME/.cache/retina-grade/densenet121.safetensors`.
pub fn default_weights_path() -> PathBuf {
    let dir = match std::env::var_os(CACHE_ENV) {
        Some(d) if !d.is_empty() => PathBuf::from(d),
        _ => std::env::var_os("HOME")
            .map(PathBuf::from)
            .unwrap_or_else(|| PathBuf::from("."))
            .join(".cache")
            .join("retina-grade"),
    };
    dir.join(PRETRAINED_FILE)
}

/// Copies ImageNet weights (torchvision tensor names, f32) into the backbone.
/// The classifier in the file and `num_batches_tracked` entries are ignored.
pub fn load_pretrained_backbone(backbone: &mut Backbone, path: &Path) -> Result<()> {
    if !path.is_file() {
        return Err(Error::PretrainedUnavailable(format!(
            "{} not found (set {CACHE_ENV} to the directory holding {PRETRAINED_FILE})",
            path.display()
        )));
    }
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let file = SafeTensors::deserialize(&bytes)
        .map_err(|e| Error::PretrainedUnavailable(format!("{}: {e}", path.display())))?;
    let unavailable = |msg: String| Error::PretrainedUnavailable(format!("{}: {msg}", path.display()));
    for layer in backbone.layers_mut() {
        let layer_name = layer.name().to_string();
        for (tensor, param) in layer.params_mut() {
            let name = format!("{layer_name}.{tensor}");
            let view = file
                .tensor(&name)
                .map_err(|_| unavailable(format!("missing tensor {name}")))?;
            if view.dtype() != Dtype::F32 {
                return Err(unavailable(format!(
                    "tensor {name} has dtype {:?}, expected F32",
                    view.dtype()
                )));
            }
            if view.shape() != param.shape.as_slice() {
                return Err(unavailable(format!(
                    "tensor {name} has shape {:?}, expected {:?}",
                    view.shape(),
                    param.shape
                )));
            }
            for (dst, chunk) in param.value.iter_mut().zip(view.data().chunks_exact(4)) {
                *dst = f32::from_le_bytes(chunk.try_into().expect("4 bytes"));
            }
        }
    }
    Ok(())
}
