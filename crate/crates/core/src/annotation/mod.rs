//! Spurious-pixel masks: persistence and proposal generators.
//!
//! A mask bit of 1 marks a spurious pixel (randomized during paired
//! training). Masks are stored as single-channel 8-bit PNGs at
//! `<mask_root>/<image_id>.png`; on load a level ≥ 128 reads as 1.
//! Proposals are previews and never touch the store.

mod range;
pub mod segment;

use std::collections::{BTreeSet, HashMap};
use std::fs;
use std::io::Cursor;
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex, RwLock};

use image::{GrayImage, ImageFormat};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::{Dataset, Split};
use crate::fsutil::write_atomic;

pub use range::{propose_mask_range, ChannelMode, RangeFilterSpec};
pub use segment::{SegmentationBackend, SegmentationRegistry};

#[derive(Debug, Error)]
pub enum MaskError {
    #[error("unknown image id `{0}`")]
    UnknownImageId(String),
    #[error("mask is {actual_h}x{actual_w}, image is {expected_h}x{expected_w}")]
    DimensionMismatch {
        expected_h: usize,
        expected_w: usize,
        actual_h: usize,
        actual_w: usize,
    },
    #[error("mask contains values other than 0 and 1")]
    NonBinaryMask,
    #[error("image `{0}` is in the test split; masks are only stored for training images")]
    TestSplitReadOnly(String),
    #[error("mask file {path} is corrupt: {reason}")]
    CorruptMaskFile { path: PathBuf, reason: String },
    #[error("invalid range: lo {lo} > hi {hi} or outside [0, 1]")]
    InvalidRange { lo: f64, hi: f64 },
    #[error("unknown segmentation backend `{0}`")]
    UnknownBackend(String),
    #[error("segmentation backend `{backend}` failed: {reason}")]
    BackendFailure { backend: String, reason: String },
    #[error("cannot decode mask PNG: {0}")]
    UndecodableMask(String),
    #[error("i/o error on {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
}

/// Binary H×W mask, row-major.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PixelMask {
    pub image_id: String,
    pub width: usize,
    pub height: usize,
    pub bits: Vec<u8>,
}

impl PixelMask {
    pub fn zeros(image_id: impl Into<String>, height: usize, width: usize) -> Self {
        Self {
            image_id: image_id.into(),
            width,
            height,
            bits: vec![0; width * height],
        }
    }

    pub fn filled(image_id: impl Into<String>, height: usize, width: usize, value: u8) -> Self {
        Self {
            image_id: image_id.into(),
            width,
            height,
            bits: vec![value; width * height],
        }
    }

    pub fn is_binary(&self) -> bool {
        self.bits.len() == self.width * self.height && self.bits.iter().all(|&b| b <= 1)
    }

    pub fn count_ones(&self) -> usize {
        self.bits.iter().filter(|&&b| b == 1).count()
    }

    pub fn is_empty(&self) -> bool {
        self.bits.iter().all(|&b| b == 0)
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize) -> u8 {
        self.bits[y * self.width + x]
    }

    /// Encodes as a gray PNG with 1 → 255 and 0 → 0.
    pub fn to_png(&self) -> Vec<u8> {
        let raw = self.bits.iter().map(|&b| if b != 0 { 255 } else { 0 }).collect();
        let img = GrayImage::from_raw(self.width as u32, self.height as u32, raw).expect("mask buffer matches shape");
        let mut out = Vec::new();
        img.write_to(&mut Cursor::new(&mut out), ImageFormat::Png)
            .expect("PNG encoding to memory does not fail");
        out
    }

    /// Decodes any PNG, thresholding its luminance at 128.
    pub fn from_png(image_id: impl Into<String>, bytes: &[u8]) -> Result<Self, MaskError> {
        let img = image::load_from_memory_with_format(bytes, ImageFormat::Png)
            .map_err(|e| MaskError::UndecodableMask(e.to_string()))?
            .to_luma8();
        Ok(Self {
            image_id: image_id.into(),
            width: img.width() as usize,
            height: img.height() as usize,
            bits: img.as_raw().iter().map(|&v| u8::from(v >= 128)).collect(),
        })
    }
}

/// File-backed mask store with per-image write serialization.
#[derive(Debug)]
pub struct MaskStore {
    root: PathBuf,
    dataset: Arc<Dataset>,
    revisions: Mutex<HashMap<String, u64>>,
    write_locks: Mutex<HashMap<String, Arc<Mutex<()>>>>,
    annotated: RwLock<BTreeSet<String>>,
}

impl MaskStore {
    /// Opens the store and indexes the masks already on disk. Unreadable
    /// mask files are skipped here and reported by [`MaskStore::load_mask`].
    pub fn open(root: &Path, dataset: Arc<Dataset>) -> Result<Self, MaskError> {
        fs::create_dir_all(root).map_err(|source| MaskError::Io {
            path: root.to_path_buf(),
            source,
        })?;
        let store = MaskStore {
            root: root.to_path_buf(),
            dataset,
            revisions: Mutex::new(HashMap::new()),
            write_locks: Mutex::new(HashMap::new()),
            annotated: RwLock::new(BTreeSet::new()),
        };
        let ids: Vec<String> = store
            .dataset
            .split_records(Split::Train)
            .map(|r| r.image_id.clone())
            .collect();
        for id in ids {
            match store.load_mask(&id) {
                Ok(Some(mask)) => {
                    store.revisions.lock().unwrap().insert(id.clone(), 1);
                    if !mask.is_empty() {
                        store.annotated.write().unwrap().insert(id);
                    }
                }
                Ok(None) => {}
                Err(e) => tracing::warn!("ignoring mask for {id}: {e}"),
            }
        }
        Ok(store)
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn path_for(&self, image_id: &str) -> PathBuf {
        self.root.join(format!("{image_id}.png"))
    }

    fn image_dims(&self, image_id: &str) -> Result<(usize, usize, Split), MaskError> {
        let rec = self
            .dataset
            .record(image_id)
            .map_err(|_| MaskError::UnknownImageId(image_id.to_string()))?;
        Ok((rec.height, rec.width, rec.split))
    }

    fn check_dims(mask: &PixelMask, h: usize, w: usize) -> Result<(), MaskError> {
        if mask.height != h || mask.width != w || mask.bits.len() != h * w {
            return Err(MaskError::DimensionMismatch {
                expected_h: h,
                expected_w: w,
                actual_h: mask.height,
                actual_w: mask.width,
            });
        }
        Ok(())
    }

    /// Persists `mask` for its image and returns the new revision number.
    pub fn save_mask(&self, mask: &PixelMask) -> Result<u64, MaskError> {
        let id = mask.image_id.as_str();
        let (h, w, split) = self.image_dims(id)?;
        if split == Split::Test {
            return Err(MaskError::TestSplitReadOnly(id.to_string()));
        }
        Self::check_dims(mask, h, w)?;
        if !mask.is_binary() {
            return Err(MaskError::NonBinaryMask);
        }
        let lock = self
            .write_locks
            .lock()
            .unwrap()
            .entry(id.to_string())
            .or_default()
            .clone();
        let _guard = lock.lock().unwrap();
        let path = self.path_for(id);
        write_atomic(&path, &mask.to_png()).map_err(|source| MaskError::Io { path, source })?;
        {
            let mut annotated = self.annotated.write().unwrap();
            if mask.is_empty() {
                annotated.remove(id);
            } else {
                annotated.insert(id.to_string());
            }
        }
        let mut revisions = self.revisions.lock().unwrap();
        let rev = revisions.entry(id.to_string()).or_insert(0);
        *rev += 1;
        Ok(*rev)
    }

    /// Latest mask, or `None` when the image was never annotated.
    pub fn load_mask(&self, image_id: &str) -> Result<Option<PixelMask>, MaskError> {
        let (h, w, _) = self.image_dims(image_id)?;
        let path = self.path_for(image_id);
        let bytes = match fs::read(&path) {
            Ok(b) => b,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(None),
            Err(source) => return Err(MaskError::Io { path, source }),
        };
        let corrupt = |reason: String| MaskError::CorruptMaskFile {
            path: path.clone(),
            reason,
        };
        let mask = PixelMask::from_png(image_id, &bytes).map_err(|e| corrupt(e.to_string()))?;
        if mask.height != h || mask.width != w {
            return Err(corrupt(format!(
                "mask is {}x{}, image is {h}x{w}",
                mask.height, mask.width
            )));
        }
        Ok(Some(mask))
    }

    pub fn revision(&self, image_id: &str) -> u64 {
        self.revisions.lock().unwrap().get(image_id).copied().unwrap_or(0)
    }

    pub fn has_mask(&self, image_id: &str) -> bool {
        self.revision(image_id) > 0
    }

    /// Ids with a stored mask that has at least one spurious pixel, sorted.
    pub fn list_annotated(&self) -> Vec<String> {
        self.annotated.read().unwrap().iter().cloned().collect()
    }

    pub fn annotated_set(&self) -> BTreeSet<String> {
        self.annotated.read().unwrap().clone()
    }

    pub fn propose_range(&self, image_id: &str, spec: &RangeFilterSpec) -> Result<PixelMask, MaskError> {
        let image = self
            .dataset
            .original_tensor(image_id)
            .map_err(|_| MaskError::UnknownImageId(image_id.to_string()))?;
        propose_mask_range(image_id, &image, spec)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::DatasetConfig;
    use crate::tensor::ImageTensor;
    use proptest::prelude::*;

    pub(crate) fn fixture() -> (tempfile::TempDir, Arc<Dataset>) {
        let dir = tempfile::tempdir().unwrap();
        for (split, class, name, h, w) in [
            ("train", "a", "000.png", 8, 6),
            ("train", "a", "001.png", 8, 6),
            ("train", "b", "000.png", 8, 6),
            ("test", "a", "000.png", 8, 6),
        ] {
            let p = dir.path().join(format!("data/{split}/{class}/{name}"));
            fs::create_dir_all(p.parent().unwrap()).unwrap();
            let t = ImageTensor::from_vec(1, h, w, (0..h * w).map(|i| i as f64 / 64.0).collect()).unwrap();
            fs::write(p, t.encode_png()).unwrap();
        }
        fs::create_dir_all(dir.path().join("data/test/b")).unwrap();
        let ds = Dataset::ingest(
            &dir.path().join("data"),
            DatasetConfig {
                class_names: vec!["a".into(), "b".into()],
                input_shape: None,
            },
        )
        .unwrap();
        (dir, Arc::new(ds))
    }

    #[test]
    fn save_load_and_revisions() {
        let (dir, ds) = fixture();
        let store = MaskStore::open(&dir.path().join("masks"), ds).unwrap();
        assert!(store.load_mask("train/a/000.png").unwrap().is_none());
        let mut m = PixelMask::zeros("train/a/000.png", 8, 6);
        m.bits[5] = 1;
        assert_eq!(store.save_mask(&m).unwrap(), 1);
        m.bits[7] = 1;
        assert_eq!(store.save_mask(&m).unwrap(), 2);
        assert_eq!(store.load_mask("train/a/000.png").unwrap().unwrap(), m);
        assert!(dir.path().join("masks/train/a/000.png.png").is_file());
    }

    #[test]
    fn save_errors() {
        let (dir, ds) = fixture();
        let store = MaskStore::open(&dir.path().join("masks"), ds).unwrap();
        let small = PixelMask::zeros("train/a/000.png", 4, 3);
        assert!(matches!(
            store.save_mask(&small),
            Err(MaskError::DimensionMismatch { .. })
        ));
        let mut bad = PixelMask::zeros("train/a/000.png", 8, 6);
        bad.bits[0] = 2;
        assert!(matches!(store.save_mask(&bad), Err(MaskError::NonBinaryMask)));
        let unknown = PixelMask::zeros("train/zz.png", 8, 6);
        assert!(matches!(store.save_mask(&unknown), Err(MaskError::UnknownImageId(_))));
        let test = PixelMask::zeros("test/a/000.png", 8, 6);
        assert!(matches!(store.save_mask(&test), Err(MaskError::TestSplitReadOnly(_))));
        assert!(matches!(store.load_mask("../x"), Err(MaskError::UnknownImageId(_))));
    }

    #[test]
    fn corrupt_files_are_reported_with_path() {
        let (dir, ds) = fixture();
        let store = MaskStore::open(&dir.path().join("masks"), ds).unwrap();
        let wrong = PixelMask::zeros("train/a/001.png", 3, 3);
        let path = store.path_for("train/a/001.png");
        fs::create_dir_all(path.parent().unwrap()).unwrap();
        fs::write(&path, wrong.to_png()).unwrap();
        match store.load_mask("train/a/001.png") {
            Err(MaskError::CorruptMaskFile { path: p, .. }) => assert_eq!(p, path),
            other => panic!("{other:?}"),
        }
        fs::write(&path, b"junk").unwrap();
        assert!(matches!(
            store.load_mask("train/a/001.png"),
            Err(MaskError::CorruptMaskFile { .. })
        ));
    }

    #[test]
    fn anti_aliased_levels_threshold_at_128() {
        let img = GrayImage::from_raw(4, 1, vec![0, 127, 128, 255]).unwrap();
        let mut bytes = Vec::new();
        img.write_to(&mut Cursor::new(&mut bytes), ImageFormat::Png).unwrap();
        assert_eq!(PixelMask::from_png("x", &bytes).unwrap().bits, vec![0, 0, 1, 1]);
    }

    #[test]
    fn list_annotated_ignores_empty_masks() {
        let (dir, ds) = fixture();
        let root = dir.path().join("masks");
        let store = MaskStore::open(&root, ds.clone()).unwrap();
        assert!(store.list_annotated().is_empty());
        store.save_mask(&PixelMask::zeros("train/a/000.png", 8, 6)).unwrap();
        assert!(store.list_annotated().is_empty());
        store.save_mask(&PixelMask::filled("train/b/000.png", 8, 6, 1)).unwrap();
        store.save_mask(&PixelMask::filled("train/a/001.png", 8, 6, 1)).unwrap();
        assert_eq!(store.list_annotated(), vec!["train/a/001.png", "train/b/000.png"]);
        // reopening indexes what is on disk
        let reopened = MaskStore::open(&root, ds).unwrap();
        assert_eq!(reopened.list_annotated(), store.list_annotated());
        assert!(reopened.has_mask("train/a/000.png"));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]

        #[test]
        fn png_round_trip_is_identity(bits in proptest::collection::vec(0u8..=1, 48)) {
            let m = PixelMask { image_id: "x".into(), width: 6, height: 8, bits };
            prop_assert_eq!(PixelMask::from_png("x", &m.to_png()).unwrap(), m);
        }
    }
}
