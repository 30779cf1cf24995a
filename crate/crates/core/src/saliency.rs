//! Input-gradient saliency maps and their heat overlays.

use std::io::Cursor;

use image::{ImageFormat, RgbImage};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{Capability, ModelBackend, ModelError};
use crate::tensor::ImageTensor;

#[derive(Debug, Error)]
pub enum SaliencyError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("class {class_index} outside [0, {num_classes})")]
    InvalidClass { class_index: usize, num_classes: usize },
    #[error("saliency is {saliency_h}x{saliency_w}, image is {image_h}x{image_w}")]
    DimensionMismatch {
        saliency_h: usize,
        saliency_w: usize,
        image_h: usize,
        image_w: usize,
    },
    #[error("alpha {0} outside [0, 1]")]
    InvalidAlpha(f64),
}

/// Per-pixel sensitivity of one class logit, scaled so the maximum is 1.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SaliencyMap {
    pub image_id: String,
    pub class_index: usize,
    pub checkpoint_id: String,
    pub width: usize,
    pub height: usize,
    /// Row-major, `height × width`.
    pub values: Vec<f64>,
}

impl SaliencyMap {
    pub fn rows(&self) -> Vec<Vec<f64>> {
        self.values.chunks(self.width.max(1)).map(<[f64]>::to_vec).collect()
    }
}

/// Channel-wise max of `|∂ logit[class] / ∂ input|`, before normalisation.
pub fn raw_saliency(
    backend: &dyn ModelBackend,
    params: &[f64],
    input: &ImageTensor,
    class_index: usize,
) -> Result<Vec<f64>, SaliencyError> {
    let desc = backend.descriptor();
    if class_index >= desc.num_classes {
        return Err(SaliencyError::InvalidClass {
            class_index,
            num_classes: desc.num_classes,
        });
    }
    desc.require(Capability::Gradient)?;
    let grad = backend.input_gradient(params, input, class_index)?;
    let plane = grad.pixel_count();
    Ok((0..plane)
        .map(|p| grad.pixel(p).map(f64::abs).fold(0.0, f64::max))
        .collect())
}

pub fn compute_saliency(
    backend: &dyn ModelBackend,
    params: &[f64],
    checkpoint_id: &str,
    image_id: &str,
    input: &ImageTensor,
    class_index: usize,
) -> Result<SaliencyMap, SaliencyError> {
    let mut values = raw_saliency(backend, params, input, class_index)?;
    let max = values.iter().copied().fold(0.0, f64::max);
    if max > 0.0 {
        values.iter_mut().for_each(|v| *v /= max);
    }
    Ok(SaliencyMap {
        image_id: image_id.to_string(),
        class_index,
        checkpoint_id: checkpoint_id.to_string(),
        width: input.width,
        height: input.height,
        values,
    })
}

const JET: [(f64, [f64; 3]); 6] = [
    (0.0, [0.0, 0.0, 143.0]),
    (0.125, [0.0, 0.0, 255.0]),
    (0.375, [0.0, 255.0, 255.0]),
    (0.625, [255.0, 255.0, 0.0]),
    (0.875, [255.0, 0.0, 0.0]),
    (1.0, [128.0, 0.0, 0.0]),
];

/// Jet-style colour ramp; `heat_color(0.0)` is the floor colour.
pub fn heat_color(t: f64) -> [f64; 3] {
    let t = t.clamp(0.0, 1.0);
    for pair in JET.windows(2) {
        let ((t0, c0), (t1, c1)) = (pair[0], pair[1]);
        if t <= t1 {
            let f = (t - t0) / (t1 - t0);
            return [
                c0[0] + f * (c1[0] - c0[0]),
                c0[1] + f * (c1[1] - c0[1]),
                c0[2] + f * (c1[2] - c0[2]),
            ];
        }
    }
    JET[JET.len() - 1].1
}

/// Heat-coloured saliency alpha-blended over the image's luminance, as an
/// RGB PNG.
pub fn render_saliency_overlay(
    image: &ImageTensor,
    saliency: &SaliencyMap,
    alpha: f64,
) -> Result<Vec<u8>, SaliencyError> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(SaliencyError::InvalidAlpha(alpha));
    }
    if saliency.width != image.width || saliency.height != image.height {
        return Err(SaliencyError::DimensionMismatch {
            saliency_h: saliency.height,
            saliency_w: saliency.width,
            image_h: image.height,
            image_w: image.width,
        });
    }
    let mut raw = Vec::with_capacity(image.pixel_count() * 3);
    for p in 0..image.pixel_count() {
        let gray = (image.luminance_at(p).clamp(0.0, 1.0) * 255.0).round();
        let heat = heat_color(saliency.values[p]);
        for c in heat {
            raw.push(((1.0 - alpha) * gray + alpha * c).round().clamp(0.0, 255.0) as u8);
        }
    }
    let img = RgbImage::from_raw(image.width as u32, image.height as u32, raw).expect("overlay buffer matches shape");
    let mut out = Vec::new();
    img.write_to(&mut Cursor::new(&mut out), ImageFormat::Png)
        .expect("PNG encoding to memory does not fail");
    Ok(out)
}
