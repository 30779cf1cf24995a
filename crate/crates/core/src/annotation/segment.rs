//! Segmentation-assisted mask proposals.
//!
//! Backends return a mask with background pixels set to 1. The built-in
//! `border-flood` backend grows a single region from every border pixel;
//! external backends are executables called as
//! `<exe> <image_path> <output_png> [key=value ...]` that must exit 0.

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::path::{Path, PathBuf};
use std::process::Command;

use serde_json::Value;

use super::{MaskError, PixelMask};
use crate::tensor::ImageTensor;

pub const BORDER_FLOOD: &str = "border-flood";
pub const DEFAULT_TOLERANCE: f64 = 0.1;

pub type SegmentationParams = BTreeMap<String, Value>;

pub trait SegmentationBackend: Send + Sync + fmt::Debug {
    /// Background mask for `image`, or a human-readable failure reason.
    fn propose(
        &self,
        image_id: &str,
        image: &ImageTensor,
        image_path: &Path,
        params: &SegmentationParams,
    ) -> Result<PixelMask, String>;
}

// Fixed-point scale for order-independent region sums.
const SUM_SCALE: f64 = (1u64 << 40) as f64;

/// Flood fill from the whole border.
///
/// The region starts as every border pixel. Each round, every 4-neighbour of
/// the region whose per-channel distance to the region's running mean is at
/// most `tolerance` joins at once; rounds repeat until none qualifies. Since
/// a round depends only on the region as a set, and sums are kept in fixed
/// point, the result is independent of scan order (and so commutes with
/// rotating the image).
pub fn border_flood(image: &ImageTensor, tolerance: f64) -> Vec<u8> {
    let (h, w, ch) = (image.height, image.width, image.channels);
    let n = h * w;
    let mut region = vec![false; n];
    let mut candidate = vec![false; n];
    let mut sums = vec![0i128; ch];
    let mut count: u64 = 0;
    let mut frontier: Vec<usize> = Vec::new();

    let add = |p: usize, region: &mut [bool], sums: &mut [i128], count: &mut u64| {
        region[p] = true;
        for (c, v) in image.pixel(p).enumerate() {
            sums[c] += (v * SUM_SCALE).round() as i128;
        }
        *count += 1;
    };
    let neighbours = |p: usize| {
        let (y, x) = (p / w, p % w);
        let mut out = [usize::MAX; 4];
        if y > 0 {
            out[0] = p - w;
        }
        if y + 1 < h {
            out[1] = p + w;
        }
        if x > 0 {
            out[2] = p - 1;
        }
        if x + 1 < w {
            out[3] = p + 1;
        }
        out
    };

    let mut seeds = Vec::new();
    for p in 0..n {
        let (y, x) = (p / w, p % w);
        if y == 0 || x == 0 || y + 1 == h || x + 1 == w {
            add(p, &mut region, &mut sums, &mut count);
            seeds.push(p);
        }
    }
    for &p in &seeds {
        for q in neighbours(p) {
            if q != usize::MAX && !region[q] && !candidate[q] {
                candidate[q] = true;
                frontier.push(q);
            }
        }
    }

    while count > 0 {
        let mean: Vec<f64> = sums.iter().map(|&s| s as f64 / SUM_SCALE / count as f64).collect();
        let (accepted, rejected): (Vec<usize>, Vec<usize>) = frontier
            .iter()
            .partition(|&&p| image.pixel(p).zip(&mean).all(|(v, m)| (v - m).abs() <= tolerance));
        if accepted.is_empty() {
            break;
        }
        frontier = rejected;
        for &p in &accepted {
            candidate[p] = false;
            add(p, &mut region, &mut sums, &mut count);
        }
        for &p in &accepted {
            for q in neighbours(p) {
                if q != usize::MAX && !region[q] && !candidate[q] {
                    candidate[q] = true;
                    frontier.push(q);
                }
            }
        }
    }
    region.into_iter().map(u8::from).collect()
}

#[derive(Debug, Default)]
pub struct BorderFlood;

impl SegmentationBackend for BorderFlood {
    fn propose(
        &self,
        image_id: &str,
        image: &ImageTensor,
        _image_path: &Path,
        params: &SegmentationParams,
    ) -> Result<PixelMask, String> {
        let tolerance = match params.get("tolerance") {
            None => DEFAULT_TOLERANCE,
            Some(v) => v
                .as_f64()
                .filter(|t| t.is_finite() && *t >= 0.0)
                .ok_or_else(|| format!("tolerance must be a non-negative number, got {v}"))?,
        };
        Ok(PixelMask {
            image_id: image_id.to_string(),
            width: image.width,
            height: image.height,
            bits: border_flood(image, tolerance),
        })
    }
}

#[derive(Debug)]
pub struct ExternalSegmentation {
    exe: PathBuf,
}

impl ExternalSegmentation {
    pub fn new(exe: impl Into<PathBuf>) -> Self {
        Self { exe: exe.into() }
    }
}

impl SegmentationBackend for ExternalSegmentation {
    fn propose(
        &self,
        image_id: &str,
        image: &ImageTensor,
        image_path: &Path,
        params: &SegmentationParams,
    ) -> Result<PixelMask, String> {
        let out_dir = tempfile::Builder::new()
            .prefix("despur-seg-")
            .tempdir()
            .map_err(|e| format!("cannot create temp dir: {e}"))?;
        let out_path = out_dir.path().join("mask.png");
        let args = params.iter().map(|(k, v)| match v {
            Value::String(s) => format!("{k}={s}"),
            other => format!("{k}={other}"),
        });
        let output = Command::new(&self.exe)
            .arg(image_path)
            .arg(&out_path)
            .args(args)
            .output()
            .map_err(|e| format!("cannot start {}: {e}", self.exe.display()));
        let result = output.and_then(|output| {
            if !output.status.success() {
                return Err(format!(
                    "exited with {}: {}",
                    output.status,
                    String::from_utf8_lossy(&output.stderr).trim()
                ));
            }
            let bytes = std::fs::read(&out_path).map_err(|e| format!("no mask written: {e}"))?;
            let mask = PixelMask::from_png(image_id, &bytes).map_err(|e| e.to_string())?;
            if mask.width != image.width || mask.height != image.height {
                return Err(format!(
                    "mask is {}x{}, image is {}x{}",
                    mask.height, mask.width, image.height, image.width
                ));
            }
            Ok(mask)
        });
        drop(out_dir);
        result
    }
}

/// Named segmentation backends. `border-flood` is always registered.
#[derive(Debug)]
pub struct SegmentationRegistry {
    backends: HashMap<String, Box<dyn SegmentationBackend>>,
}

impl Default for SegmentationRegistry {
    fn default() -> Self {
        let mut backends: HashMap<String, Box<dyn SegmentationBackend>> = HashMap::new();
        backends.insert(BORDER_FLOOD.to_string(), Box::new(BorderFlood));
        Self { backends }
    }
}

impl SegmentationRegistry {
    pub fn with_plugins(plugins: &BTreeMap<String, PathBuf>) -> Self {
        let mut reg = Self::default();
        for (name, exe) in plugins {
            reg.register(name, Box::new(ExternalSegmentation::new(exe)));
        }
        reg
    }

    pub fn register(&mut self, name: &str, backend: Box<dyn SegmentationBackend>) {
        self.backends.insert(name.to_string(), backend);
    }

    pub fn names(&self) -> Vec<String> {
        let mut names: Vec<_> = self.backends.keys().cloned().collect();
        names.sort();
        names
    }

    pub fn contains(&self, name: &str) -> bool {
        self.backends.contains_key(name)
    }

    pub fn propose(
        &self,
        backend_name: &str,
        image_id: &str,
        image: &ImageTensor,
        image_path: &Path,
        params: &SegmentationParams,
    ) -> Result<PixelMask, MaskError> {
        let backend = self
            .backends
            .get(backend_name)
            .ok_or_else(|| MaskError::UnknownBackend(backend_name.to_string()))?;
        backend
            .propose(image_id, image, image_path, params)
            .map_err(|reason| MaskError::BackendFailure {
                backend: backend_name.to_string(),
                reason,
            })
    }
}
