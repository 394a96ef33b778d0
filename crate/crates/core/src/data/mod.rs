//! Image ingestion, two-view augmentation and the synthetic shapes dataset.

pub mod augment;
pub mod color;
pub mod ppm;
pub mod shapes;

use std::fs;
use std::path::{Path, PathBuf};

pub use augment::{
    replay_rng, sample_pretrain_pair, sample_seg_pair, AugmentConfig, AugmentedPair, PhotometricLog,
};
pub use ppm::{load_ppm, save_ppm};
pub use shapes::gen_shapes_dataset;

use crate::dst1::{Container, Entry, Payload};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const DATASET_FILE: &str = "dataset.dst1";
pub const MANIFEST_FILE: &str = "manifest.txt";

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ClassKind {
    Stuff,
    Thing,
}

impl ClassKind {
    pub fn code(self) -> i64 {
        match self {
            ClassKind::Stuff => 0,
            ClassKind::Thing => 1,
        }
    }

    pub fn from_code(code: i64) -> Result<Self> {
        match code {
            0 => Ok(ClassKind::Stuff),
            1 => Ok(ClassKind::Thing),
            other => Err(Error::parse("class_kinds", format!("unknown kind code {other}"))),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            ClassKind::Stuff => "stuff",
            ClassKind::Thing => "thing",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LabeledImage {
    pub image: Tensor<f32>,
    /// Row-major `[S, S]` class labels.
    pub mask: Vec<i64>,
    pub class_kinds: Vec<ClassKind>,
}

/// An in-memory image collection, optionally with segmentation labels.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub images: Vec<Tensor<f32>>,
    pub masks: Option<Vec<Vec<i64>>>,
    pub class_kinds: Vec<ClassKind>,
}

impl Dataset {
    pub fn from_labeled(items: Vec<LabeledImage>) -> Self {
        let class_kinds = items.first().map(|l| l.class_kinds.clone()).unwrap_or_default();
        let (images, masks) = items.into_iter().map(|l| (l.image, l.mask)).unzip();
        Dataset { images, masks: Some(masks), class_kinds }
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn num_classes(&self) -> usize {
        self.class_kinds.len()
    }

    /// `(height, width)` of the first image.
    pub fn image_size(&self) -> Option<(usize, usize)> {
        self.images.first().map(|t| (t.shape()[1], t.shape()[2]))
    }

    pub fn to_container(&self) -> Result<Container> {
        let (h, w) = self.image_size().ok_or_else(|| Error::Usage("empty dataset".into()))?;
        let mut pixels = Vec::with_capacity(self.len() * 3 * h * w);
        for img in &self.images {
            if img.shape() != [3, h, w] {
                return Err(Error::Dimension(format!("image of shape {:?} in a {h}x{w} dataset", img.shape())));
            }
            pixels.extend_from_slice(img.data());
        }
        let mut c = Container::new();
        c.push(Entry::new("images", &[self.len(), 3, h, w], Payload::F32(pixels))?);
        if let Some(masks) = &self.masks {
            let flat: Vec<i64> = masks.iter().flatten().copied().collect();
            c.push(Entry::new("masks", &[self.len(), h, w], Payload::I64(flat))?);
        }
        if !self.class_kinds.is_empty() {
            let kinds: Vec<i64> = self.class_kinds.iter().map(|k| k.code()).collect();
            c.push(Entry::new("class_kinds", &[kinds.len()], Payload::I64(kinds))?);
        }
        Ok(c)
    }

    pub fn from_container(c: &Container) -> Result<Self> {
        let (shape, pixels) = c.f32("images")?;
        if shape.len() != 4 || shape[1] != 3 {
            return Err(Error::parse("images", format!("expected [N,3,H,W], got {shape:?}")));
        }
        let (n, h, w) = (shape[0], shape[2], shape[3]);
        let per = 3 * h * w;
        let images = (0..n).map(|i| Tensor::new(&[3, h, w], pixels[i * per..(i + 1) * per].to_vec())).collect::<Result<_>>()?;
        let class_kinds = match c.get("class_kinds") {
            Some(_) => c.i64("class_kinds")?.1.iter().map(|&k| ClassKind::from_code(k)).collect::<Result<_>>()?,
            None => Vec::new(),
        };
        let masks = match c.get("masks") {
            Some(_) => {
                let (ms, flat) = c.i64("masks")?;
                if ms != [n, h, w] {
                    return Err(Error::parse("masks", format!("expected [{n},{h},{w}], got {ms:?}")));
                }
                let k = class_kinds.len() as i64;
                if let Some(bad) = flat.iter().find(|&&m| m < 0 || (k > 0 && m >= k)) {
                    return Err(Error::parse("masks", format!("label {bad} outside [0,{k})")));
                }
                Some(flat.chunks(h * w).map(|m| m.to_vec()).collect())
            }
            None => None,
        };
        Ok(Dataset { images, masks, class_kinds })
    }

    pub fn manifest(&self, seed: Option<u64>) -> String {
        let (h, w) = self.image_size().unwrap_or((0, 0));
        let mut s = format!("num_images = {}\nheight = {h}\nwidth = {w}\nnum_classes = {}\n", self.len(), self.num_classes());
        let kinds: Vec<&str> = self.class_kinds.iter().map(|k| k.name()).collect();
        s.push_str(&format!("class_kinds = {}\n", kinds.join(",")));
        if let Some(seed) = seed {
            s.push_str(&format!("seed = {seed}\n"));
        }
        s
    }

    /// Writes `dataset.dst1` and `manifest.txt` into `dir`.
    pub fn save_dir(&self, dir: impl AsRef<Path>, seed: Option<u64>) -> Result<()> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        self.to_container()?.save(dir.join(DATASET_FILE))?;
        let manifest = dir.join(MANIFEST_FILE);
        fs::write(&manifest, self.manifest(seed)).map_err(|e| Error::io(manifest, e))
    }

    /// Loads a DST1 file, a directory holding `dataset.dst1`, or a directory
    /// of `.ppm` images (unlabeled, sorted by file name).
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        if path.is_file() {
            return Self::from_container(&Container::load(path)?);
        }
        if !path.is_dir() {
            return Err(Error::Input(format!("data path {} does not exist", path.display())));
        }
        let packed = path.join(DATASET_FILE);
        if packed.is_file() {
            return Self::from_container(&Container::load(packed)?);
        }
        let mut files: Vec<PathBuf> = fs::read_dir(path)
            .map_err(|e| Error::io(path, e))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|x| x.eq_ignore_ascii_case("ppm")))
            .collect();
        files.sort();
        if files.is_empty() {
            return Err(Error::Input(format!("no {DATASET_FILE} or .ppm files in {}", path.display())));
        }
        let images = files.iter().map(load_ppm).collect::<Result<_>>()?;
        Ok(Dataset { images, masks: None, class_kinds: Vec::new() })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn dataset_container_round_trip_is_bit_exact() {
        let ds = Dataset::from_labeled(gen_shapes_dataset(5, 3, 16, 2).unwrap());
        let c = ds.to_container().unwrap();
        let bytes = c.to_bytes();
        let back = Dataset::from_container(&Container::from_bytes(&bytes).unwrap()).unwrap();
        assert_eq!(back, ds);
        assert_eq!(back.to_container().unwrap().to_bytes(), bytes);
    }

    #[test]
    fn loads_ppm_directory() {
        let dir = tempfile::tempdir().unwrap();
        let ds = Dataset::from_labeled(gen_shapes_dataset(3, 2, 16, 1).unwrap());
        for (i, img) in ds.images.iter().enumerate() {
            save_ppm(img, dir.path().join(format!("{i:03}.ppm"))).unwrap();
        }
        let back = Dataset::load(dir.path()).unwrap();
        assert_eq!(back.len(), 3);
        assert!(back.masks.is_none());
        assert!(back.images[0].max_abs_diff(&ds.images[0]) <= 0.5 / 255.0 + 1e-6);
    }

    #[test]
    fn missing_path_is_input_error() {
        assert!(matches!(Dataset::load("/nonexistent/data"), Err(Error::Input(_))));
    }
}
