//! Seeded synthetic datasets used by the oracles, the benchmark and demos.
//!
//! Pixel values are quantised to multiples of 1/255 at generation time so a
//! dataset written with [`SyntheticDataset::write_tree`] and re-ingested
//! yields exactly the in-memory tensors.

use std::io;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::annotation::PixelMask;
use crate::config::InputShape;
use crate::dataset::Split;
use crate::fsutil::write_atomic;
use crate::tensor::ImageTensor;

fn quantize(v: f64) -> f64 {
    (v.clamp(0.0, 1.0) * 255.0).round() / 255.0
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticImage {
    pub image_id: String,
    pub image: ImageTensor,
    pub label: usize,
    pub mask: Option<PixelMask>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticDataset {
    pub class_names: Vec<String>,
    pub input_shape: InputShape,
    pub train: Vec<SyntheticImage>,
    pub test: Vec<SyntheticImage>,
}

impl SyntheticDataset {
    fn build(
        class_names: &[&str],
        input_shape: InputShape,
        train: Vec<(ImageTensor, usize, Option<Vec<u8>>)>,
        test: Vec<(ImageTensor, usize)>,
    ) -> Self {
        let class_names: Vec<String> = class_names.iter().map(|s| s.to_string()).collect();
        let id =
            |split: Split, label: usize, i: usize| format!("{}/{}/{i:04}.png", split.dir_name(), class_names[label]);
        let train = train
            .into_iter()
            .enumerate()
            .map(|(i, (image, label, bits))| {
                let image_id = id(Split::Train, label, i);
                let mask = bits.map(|bits| PixelMask {
                    image_id: image_id.clone(),
                    width: image.width,
                    height: image.height,
                    bits,
                });
                SyntheticImage {
                    image_id,
                    image,
                    label,
                    mask,
                }
            })
            .collect();
        let test = test
            .into_iter()
            .enumerate()
            .map(|(i, (image, label))| SyntheticImage {
                image_id: id(Split::Test, label, i),
                image,
                label,
                mask: None,
            })
            .collect();
        SyntheticDataset {
            class_names,
            input_shape,
            train,
            test,
        }
    }

    /// Writes `<root>/{train,test}/<class>/<nnnn>.png`, creating every class
    /// directory even when empty.
    pub fn write_tree(&self, root: &Path) -> io::Result<()> {
        for split in Split::ALL {
            for class in &self.class_names {
                std::fs::create_dir_all(root.join(split.dir_name()).join(class))?;
            }
        }
        for img in self.train.iter().chain(&self.test) {
            write_atomic(&root.join(&img.image_id), &img.image.encode_png())?;
        }
        Ok(())
    }

    /// Writes every training mask to `<mask_root>/<image_id>.png`.
    pub fn write_masks(&self, mask_root: &Path) -> io::Result<usize> {
        let mut n = 0;
        for img in &self.train {
            if let Some(mask) = &img.mask {
                write_atomic(&mask_root.join(format!("{}.png", img.image_id)), &mask.to_png())?;
                n += 1;
            }
        }
        Ok(n)
    }

    /// Writes the image tree to `paths.data_root` and returns the matching
    /// reference-backend config.
    pub fn install(&self, paths: &crate::workbench::WorkbenchPaths) -> io::Result<crate::config::AppConfig> {
        self.write_tree(&paths.data_root)?;
        Ok(crate::config::AppConfig::from_value(self.config_json()).expect("generated config is valid"))
    }

    /// JSON config for the reference backend.
    pub fn config_json(&self) -> serde_json::Value {
        let s = self.input_shape;
        serde_json::json!({
            "class_names": self.class_names,
            "input_shape": [s.channels, s.height, s.width],
            "backend_name": crate::model::logreg::BACKEND_NAME,
            "backend_params": {},
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BlobSpec {
    pub n_train: usize,
    pub n_test: usize,
    /// Feature means of class 0 and class 1.
    pub centers: [[f64; 2]; 2],
    pub std_dev: f64,
    pub seed: u64,
}

impl Default for BlobSpec {
    fn default() -> Self {
        Self {
            n_train: 40,
            n_test: 10,
            centers: [[0.35, 0.4], [0.65, 0.6]],
            std_dev: 0.12,
            seed: 0,
        }
    }
}

/// Two isotropic Gaussian blobs rendered as 1×2 single-channel images.
/// Classes alternate, so each split is balanced.
pub fn gaussian_blobs(spec: &BlobSpec) -> SyntheticDataset {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let noise = Normal::new(0.0, spec.std_dev).expect("finite std_dev");
    let mut draw = |label: usize| {
        let c = spec.centers[label];
        let data = vec![
            quantize(c[0] + noise.sample(&mut rng)),
            quantize(c[1] + noise.sample(&mut rng)),
        ];
        (ImageTensor::from_vec(1, 1, 2, data).expect("1x2"), label)
    };
    let train = (0..spec.n_train)
        .map(|i| draw(i % 2))
        .map(|(x, y)| (x, y, None))
        .collect();
    let test = (0..spec.n_test).map(|i| draw(i % 2)).collect();
    SyntheticDataset::build(
        &["neg", "pos"],
        InputShape {
            channels: 1,
            height: 1,
            width: 2,
        },
        train,
        test,
    )
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SpuriousPatchSpec {
    pub size: usize,
    pub n_train: usize,
    pub n_test: usize,
    pub patch: usize,
    /// Peak height of the class blob above the background.
    pub blob_amplitude: f64,
    pub blob_sigma: f64,
    pub background: f64,
    pub pixel_noise: f64,
    pub seed: u64,
}

impl Default for SpuriousPatchSpec {
    fn default() -> Self {
        Self {
            size: 16,
            n_train: 400,
            n_test: 200,
            patch: 3,
            blob_amplitude: 0.3,
            blob_sigma: 1.5,
            background: 0.5,
            pixel_noise: 0.1,
            seed: 7,
        }
    }
}

/// Grayscale two-class images whose true signal is where a blob sits (left
/// half for class 0, right half for class 1). In the training split the
/// top-left `patch × patch` corner is 0 for class 0 and 1 for class 1, and
/// every training image carries a mask over that corner; in the test split
/// the corner holds one uniformly random level per image, so the test split
/// is out of domain for a model that learned the shortcut.
pub fn spurious_patch(spec: &SpuriousPatchSpec) -> SyntheticDataset {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let noise = Normal::new(0.0, spec.pixel_noise).expect("finite noise");
    let n = spec.size;
    let margin = spec.patch + 1;
    let half = n / 2;
    let render = |label: usize, in_domain: bool, rng: &mut ChaCha8Rng| {
        let cy = rng.random_range(margin as f64..(n - 2) as f64);
        let cx = if label == 0 {
            rng.random_range(2.0..(half - 2) as f64)
        } else {
            rng.random_range((half + 1) as f64..(n - 2) as f64)
        };
        let patch_value = if in_domain { label as f64 } else { rng.random::<f64>() };
        let mut img = ImageTensor::zeros(1, n, n);
        for y in 0..n {
            for x in 0..n {
                let d2 = (y as f64 - cy).powi(2) + (x as f64 - cx).powi(2);
                let bump = spec.blob_amplitude * (-d2 / (2.0 * spec.blob_sigma.powi(2))).exp();
                let v = if y < spec.patch && x < spec.patch {
                    patch_value
                } else {
                    spec.background + bump + noise.sample(rng)
                };
                img.set(0, y, x, quantize(v));
            }
        }
        img
    };
    let patch_bits: Vec<u8> = (0..n * n)
        .map(|p| u8::from(p / n < spec.patch && p % n < spec.patch))
        .collect();
    let train = (0..spec.n_train)
        .map(|i| {
            let label = i % 2;
            (render(label, true, &mut rng), label, Some(patch_bits.clone()))
        })
        .collect();
    let test = (0..spec.n_test)
        .map(|i| {
            let label = i % 2;
            (render(label, false, &mut rng), label)
        })
        .collect();
    SyntheticDataset::build(
        &["left", "right"],
        InputShape {
            channels: 1,
            height: n,
            width: n,
        },
        train,
        test,
    )
}
