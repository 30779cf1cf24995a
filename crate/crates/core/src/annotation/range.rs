use serde::{Deserialize, Serialize};

use super::{MaskError, PixelMask};
use crate::tensor::ImageTensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum ChannelMode {
    /// `0.299 R + 0.587 G + 0.114 B` (the value itself for gray images).
    #[default]
    Luminance,
    /// Some channel lies in range.
    AnyChannel,
    /// Every channel lies in range.
    AllChannels,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RangeFilterSpec {
    pub lo: f64,
    pub hi: f64,
    #[serde(default)]
    pub channel_mode: ChannelMode,
}

impl RangeFilterSpec {
    pub fn validate(&self) -> Result<(), MaskError> {
        let in_unit = |v: f64| (0.0..=1.0).contains(&v);
        if !(in_unit(self.lo) && in_unit(self.hi) && self.lo <= self.hi) {
            return Err(MaskError::InvalidRange {
                lo: self.lo,
                hi: self.hi,
            });
        }
        Ok(())
    }

    fn contains(&self, v: f64) -> bool {
        self.lo <= v && v <= self.hi
    }
}

/// Marks every pixel whose intensity statistic falls in `[lo, hi]`.
/// Pixels are judged independently of their neighbours.
pub fn propose_mask_range(image_id: &str, image: &ImageTensor, spec: &RangeFilterSpec) -> Result<PixelMask, MaskError> {
    spec.validate()?;
    let bits = (0..image.pixel_count())
        .map(|p| {
            let hit = match spec.channel_mode {
                ChannelMode::Luminance => spec.contains(image.luminance_at(p)),
                ChannelMode::AnyChannel => image.pixel(p).any(|v| spec.contains(v)),
                ChannelMode::AllChannels => image.pixel(p).all(|v| spec.contains(v)),
            };
            u8::from(hit)
        })
        .collect();
    Ok(PixelMask {
        image_id: image_id.to_string(),
        width: image.width,
        height: image.height,
        bits,
    })
}
