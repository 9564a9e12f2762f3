//! Binary (P5) graymap export of masks: 255 for active, 0 for inactive.
//! Conv masks are laid out as `n_out` rows of `n_in * kh * kw` pixels.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::nn::SparseLayerState;

/// The full P5 file contents for `layer`'s mask.
pub fn mask_image(layer: &SparseLayerState) -> Vec<u8> {
    let (rows, cols) = (layer.shape.n_out, layer.shape.row_len());
    let mut out = format!("P5\n{cols} {rows}\n255\n").into_bytes();
    out.extend(layer.mask.data().iter().map(|&m| if m != 0.0 { 255u8 } else { 0 }));
    out
}

pub fn export_mask_image(layer: &SparseLayerState, path: &Path) -> Result<()> {
    fs::write(path, mask_image(layer)).map_err(|e| Error::io(path, e))
}
