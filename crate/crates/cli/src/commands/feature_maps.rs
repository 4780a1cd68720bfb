//! `ncd feature-maps`: render a checkpointed model's convolution-stack
//! activations for one input image.

use ncd_core::architectures::load_checkpoint;
use ncd_core::data::load_single_image;
use ncd_core::metrics::emit_feature_maps;
use ncd_core::{Error, Result};
use std::path::{Path, PathBuf};

pub fn cmd_feature_maps(
    checkpoint: &Path,
    image: &Path,
    layers: &[String],
    out: &Path,
) -> Result<Vec<PathBuf>> {
    if layers.is_empty() {
        return Err(Error::Config("no layers requested".into()));
    }
    let loaded = load_checkpoint(checkpoint)?;
    let shape = loaded.spec.input_shape.clone();
    let (channels, h, w) = match shape.as_slice() {
        [c, h, w] => (*c, *h, *w),
        other => {
            return Err(Error::Config(format!(
                "model input shape {other:?} is not an image"
            )))
        }
    };
    let tensor = load_single_image(image, channels, (w, h))?;
    let names: Vec<&str> = layers.iter().map(|s| s.as_str()).collect();
    emit_feature_maps(&loaded.model, &tensor, &names, out)
}
