//! Canonical numeric image representation: channels-first `f64` in `[0, 1]`.

use std::io::Cursor;

use image::{DynamicImage, ImageFormat};
use serde::{Deserialize, Serialize};

/// Luminance weights applied to RGB triples.
pub const LUMA_WEIGHTS: [f64; 3] = [0.299, 0.587, 0.114];

/// Channels-first image with values in `[0, 1]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageTensor {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub data: Vec<f64>,
}

impl ImageTensor {
    pub fn zeros(channels: usize, height: usize, width: usize) -> Self {
        Self {
            channels,
            height,
            width,
            data: vec![0.0; channels * height * width],
        }
    }

    /// Builds a tensor from CHW data. Returns `None` when the length does not
    /// match the shape.
    pub fn from_vec(channels: usize, height: usize, width: usize, data: Vec<f64>) -> Option<Self> {
        (data.len() == channels * height * width).then_some(Self {
            channels,
            height,
            width,
            data,
        })
    }

    pub fn pixel_count(&self) -> usize {
        self.height * self.width
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        (self.channels, self.height, self.width)
    }

    #[inline]
    pub fn get(&self, c: usize, y: usize, x: usize) -> f64 {
        self.data[(c * self.height + y) * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, c: usize, y: usize, x: usize, v: f64) {
        self.data[(c * self.height + y) * self.width + x] = v;
    }

    /// Luminance at pixel index `p` (row-major). Single-channel images return
    /// their value unchanged.
    pub fn luminance_at(&self, p: usize) -> f64 {
        let plane = self.pixel_count();
        match self.channels {
            1 => self.data[p],
            _ => {
                LUMA_WEIGHTS[0] * self.data[p]
                    + LUMA_WEIGHTS[1] * self.data[plane + p]
                    + LUMA_WEIGHTS[2] * self.data[2 * plane + p]
            }
        }
    }

    /// Values of pixel `p` across channels.
    pub fn pixel(&self, p: usize) -> impl Iterator<Item = f64> + '_ {
        let plane = self.pixel_count();
        (0..self.channels).map(move |c| self.data[c * plane + p])
    }

    /// Converts between 1 and 3 channels (luminance or replication).
    pub fn to_channels(&self, channels: usize) -> ImageTensor {
        if channels == self.channels {
            return self.clone();
        }
        let plane = self.pixel_count();
        let mut out = ImageTensor::zeros(channels, self.height, self.width);
        for p in 0..plane {
            if channels == 1 {
                out.data[p] = self.luminance_at(p);
            } else {
                let v = self.data[p];
                for c in 0..channels {
                    out.data[c * plane + p] = v;
                }
            }
        }
        out
    }

    /// Decodes PNG or JPEG bytes. Gray images yield one channel, everything
    /// else three; alpha is dropped and 8-bit values are divided by 255.
    pub fn decode(bytes: &[u8]) -> Result<ImageTensor, image::ImageError> {
        let img = image::load_from_memory(bytes)?;
        Ok(Self::from_dynamic(&img))
    }

    pub fn from_dynamic(img: &DynamicImage) -> ImageTensor {
        let gray = matches!(
            img.color(),
            image::ColorType::L8 | image::ColorType::La8 | image::ColorType::L16 | image::ColorType::La16
        );
        let (w, h) = (img.width() as usize, img.height() as usize);
        if gray {
            let buf = img.to_luma8();
            let data = buf.as_raw().iter().map(|&v| f64::from(v) / 255.0).collect();
            ImageTensor {
                channels: 1,
                height: h,
                width: w,
                data,
            }
        } else {
            let buf = img.to_rgb8();
            let mut out = ImageTensor::zeros(3, h, w);
            let plane = w * h;
            for (p, px) in buf.pixels().enumerate() {
                for c in 0..3 {
                    out.data[c * plane + p] = f64::from(px.0[c]) / 255.0;
                }
            }
            out
        }
    }

    /// Encodes as an 8-bit PNG (gray or RGB), rounding to the nearest level.
    pub fn encode_png(&self) -> Vec<u8> {
        let to_u8 = |v: f64| (v.clamp(0.0, 1.0) * 255.0).round() as u8;
        let plane = self.pixel_count();
        let img = if self.channels == 1 {
            let raw = self.data.iter().map(|&v| to_u8(v)).collect();
            DynamicImage::ImageLuma8(
                image::GrayImage::from_raw(self.width as u32, self.height as u32, raw).expect("buffer matches shape"),
            )
        } else {
            let mut raw = Vec::with_capacity(plane * 3);
            for p in 0..plane {
                for c in 0..3 {
                    raw.push(to_u8(self.data[c * plane + p]));
                }
            }
            DynamicImage::ImageRgb8(
                image::RgbImage::from_raw(self.width as u32, self.height as u32, raw).expect("buffer matches shape"),
            )
        };
        let mut out = Vec::new();
        img.write_to(&mut Cursor::new(&mut out), ImageFormat::Png)
            .expect("PNG encoding to memory does not fail");
        out
    }
}
