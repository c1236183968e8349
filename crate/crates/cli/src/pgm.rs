//! Binary greyscale PGM (`P5`, maxval 255) rendering of 2-D tensors.

use anyhow::{bail, Result};
use cwtmel::Tensor;

/// Rows of the image are the tensor's first dimension. Values are min-max
/// scaled to 0..=255; a constant tensor renders as mid-grey 128.
pub fn encode_pgm(t: &Tensor) -> Result<Vec<u8>> {
    if t.ndim() != 2 {
        bail!("plot needs a 2-D tensor, got shape {:?}", t.shape());
    }
    let (rows, cols) = (t.shape()[0], t.shape()[1]);
    let (lo, hi) = t
        .data()
        .iter()
        .fold((f32::INFINITY, f32::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));
    let mut out = format!("P5\n{cols} {rows}\n255\n").into_bytes();
    if hi > lo {
        let span = hi as f64 - lo as f64;
        out.extend(
            t.data()
                .iter()
                .map(|&v| ((v as f64 - lo as f64) / span * 255.0).round() as u8),
        );
    } else {
        out.resize(out.len() + rows * cols, 128);
    }
    Ok(out)
}
