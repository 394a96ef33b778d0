//! Two-view augmentation: random resized crop + horizontal flip, then
//! color jitter, grayscale and blur. Geometry is recorded exactly in a
//! [`ViewSpec`]; photometric ops never touch it.

use rand::seq::SliceRandom;
use rand::Rng as _;

use super::color;
use crate::geometry::{intersect, CropBox, ViewSpec};
use crate::rng::{self, Rng};
use crate::tensor::{grid_sample_value, Tensor};

const OVERLAP_ATTEMPTS: usize = 50;
const CROP_ATTEMPTS: usize = 10;

#[derive(Clone, Debug, PartialEq)]
pub struct AugmentConfig {
    pub out_size: usize,
    /// Crop area as a fraction of the image area.
    pub crop_scale: (f64, f64),
    pub crop_ratio: (f64, f64),
    pub flip_p: f64,
    pub jitter_p: f64,
    pub brightness: f64,
    pub contrast: f64,
    pub saturation: f64,
    pub hue: f64,
    pub gray_p: f64,
    pub blur_p: f64,
    pub blur_sigma: (f64, f64),
}

impl AugmentConfig {
    /// Pretraining recipe: crop scale [0.2, 1], jitter (0.4, 0.4, 0.4, 0.1)
    /// with p = 0.8, grayscale p = 0.2, blur σ ∈ [0.1, 2].
    pub fn pretrain(out_size: usize) -> Self {
        AugmentConfig {
            out_size,
            crop_scale: (0.2, 1.0),
            crop_ratio: (3.0 / 4.0, 4.0 / 3.0),
            flip_p: 0.5,
            jitter_p: 0.8,
            brightness: 0.4,
            contrast: 0.4,
            saturation: 0.4,
            hue: 0.1,
            gray_p: 0.2,
            blur_p: 0.5,
            blur_sigma: (0.1, 2.0),
        }
    }

    /// Segmentation recipe: crop scale [0.5, 1], jitter (0.3, 0.3, 0.3, 0.1)
    /// with p = 0.8, grayscale p = 0.2.
    pub fn segmentation(out_size: usize) -> Self {
        AugmentConfig {
            crop_scale: (0.5, 1.0),
            brightness: 0.3,
            contrast: 0.3,
            saturation: 0.3,
            ..Self::pretrain(out_size)
        }
    }

    /// Full-image crops and no photometric change.
    pub fn disabled(out_size: usize) -> Self {
        AugmentConfig {
            out_size,
            crop_scale: (1.0, 1.0),
            crop_ratio: (1.0, 1.0),
            flip_p: 0.0,
            jitter_p: 0.0,
            brightness: 0.0,
            contrast: 0.0,
            saturation: 0.0,
            hue: 0.0,
            gray_p: 0.0,
            blur_p: 0.0,
            blur_sigma: (0.1, 2.0),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum JitterOp {
    Brightness(f64),
    Contrast(f64),
    Saturation(f64),
    Hue(f64),
}

/// Photometric parameters actually applied to one view.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct PhotometricLog {
    /// Jitter ops in application order; empty when jitter was skipped.
    pub jitter: Vec<JitterOp>,
    pub grayscale: bool,
    pub blur_sigma: Option<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AugmentedPair {
    pub x1: Tensor<f32>,
    pub x2: Tensor<f32>,
    pub spec1: ViewSpec,
    pub spec2: ViewSpec,
    pub photometric: [PhotometricLog; 2],
}

/// Random resized crop with real-valued boxes, so the area fraction stays
/// inside `crop_scale` exactly.
pub fn sample_crop(width: usize, height: usize, cfg: &AugmentConfig, rng: &mut Rng) -> CropBox {
    let (wf, hf) = (width as f64, height as f64);
    let area = wf * hf;
    if cfg.crop_scale.0 >= 1.0 {
        return CropBox::full(width, height);
    }
    let (lr0, lr1) = (cfg.crop_ratio.0.ln(), cfg.crop_ratio.1.ln());
    for _ in 0..CROP_ATTEMPTS {
        let target = area * uniform(rng, cfg.crop_scale.0, cfg.crop_scale.1);
        let aspect = uniform(rng, lr0, lr1).exp();
        let w = (target * aspect).sqrt();
        let h = (target / aspect).sqrt();
        if w >= 1.0 && h >= 1.0 && w <= wf && h <= hf {
            let x0 = uniform(rng, 0.0, wf - w);
            let y0 = uniform(rng, 0.0, hf - h);
            return CropBox::new(x0, y0, w, h);
        }
    }
    // central crop with the aspect ratio clamped into range
    let in_ratio = wf / hf;
    let (w, h) = if in_ratio < cfg.crop_ratio.0 {
        (wf, wf / cfg.crop_ratio.0)
    } else if in_ratio > cfg.crop_ratio.1 {
        (hf * cfg.crop_ratio.1, hf)
    } else {
        (wf, hf)
    };
    CropBox::new((wf - w) / 2.0, (hf - h) / 2.0, w, h)
}

fn uniform(rng: &mut Rng, lo: f64, hi: f64) -> f64 {
    if hi > lo {
        rng.random_range(lo..hi)
    } else {
        lo
    }
}

/// Resamples the crop of `image` described by `spec` to `S×S`.
pub fn render_view(image: &Tensor<f32>, spec: &ViewSpec) -> Tensor<f32> {
    let s = spec.out_size;
    let (ih, iw) = (image.shape()[1], image.shape()[2]);
    let mut coords = Vec::with_capacity(s * s * 2);
    for i in 0..s {
        for j in 0..s {
            let mut u = (j as f64 + 0.5) / s as f64;
            let v = (i as f64 + 0.5) / s as f64;
            if spec.hflip {
                u = 1.0 - u;
            }
            let x = spec.crop.x0 + u * spec.crop.w;
            let y = spec.crop.y0 + v * spec.crop.h;
            coords.push((x / iw as f64) as f32);
            coords.push((y / ih as f64) as f32);
        }
    }
    let field = image.clone().reshape(&[1, 3, ih, iw]).expect("image is [3,H,W]");
    let coords = Tensor::new(&[1, s, s, 2], coords).expect("coords shape");
    grid_sample_value(&field, &coords).reshape(&[3, s, s]).expect("view shape")
}

pub fn apply_photometric(img: &mut Tensor<f32>, cfg: &AugmentConfig, rng: &mut Rng) -> PhotometricLog {
    let mut log = PhotometricLog::default();
    if rng.random_bool(cfg.jitter_p.clamp(0.0, 1.0)) {
        let mut ops = vec![
            JitterOp::Brightness(uniform(rng, (1.0 - cfg.brightness).max(0.0), 1.0 + cfg.brightness)),
            JitterOp::Contrast(uniform(rng, (1.0 - cfg.contrast).max(0.0), 1.0 + cfg.contrast)),
            JitterOp::Saturation(uniform(rng, (1.0 - cfg.saturation).max(0.0), 1.0 + cfg.saturation)),
            JitterOp::Hue(uniform(rng, -cfg.hue, cfg.hue)),
        ];
        ops.shuffle(rng);
        for op in &ops {
            match *op {
                JitterOp::Brightness(f) => color::adjust_brightness(img, f as f32),
                JitterOp::Contrast(f) => color::adjust_contrast(img, f as f32),
                JitterOp::Saturation(f) => color::adjust_saturation(img, f as f32),
                JitterOp::Hue(f) => color::adjust_hue(img, f as f32),
            }
        }
        log.jitter = ops;
    }
    if rng.random_bool(cfg.gray_p.clamp(0.0, 1.0)) {
        color::to_grayscale(img);
        log.grayscale = true;
    }
    if rng.random_bool(cfg.blur_p.clamp(0.0, 1.0)) {
        let sigma = uniform(rng, cfg.blur_sigma.0, cfg.blur_sigma.1);
        color::gaussian_blur(img, sigma as f32);
        log.blur_sigma = Some(sigma);
    }
    log
}

/// Samples the two view geometries. Crops are resampled jointly until they
/// overlap; after `OVERLAP_ATTEMPTS` failures both fall back to the full image.
pub fn sample_view_pair(width: usize, height: usize, cfg: &AugmentConfig, rng: &mut Rng) -> (ViewSpec, ViewSpec) {
    let make = |crop: CropBox, hflip: bool| ViewSpec { crop, hflip, out_size: cfg.out_size, image_size: (width, height) };
    for _ in 0..OVERLAP_ATTEMPTS {
        let c1 = sample_crop(width, height, cfg, rng);
        let c2 = sample_crop(width, height, cfg, rng);
        let f1 = rng.random_bool(cfg.flip_p.clamp(0.0, 1.0));
        let f2 = rng.random_bool(cfg.flip_p.clamp(0.0, 1.0));
        let (v1, v2) = (make(c1, f1), make(c2, f2));
        if intersect(&v1, &v2).is_some() {
            return (v1, v2);
        }
    }
    let full = CropBox::full(width, height);
    (make(full, false), make(full, false))
}

fn sample_pair(image: &Tensor<f32>, rng: &mut Rng, cfg: &AugmentConfig) -> AugmentedPair {
    let (h, w) = (image.shape()[1], image.shape()[2]);
    let (spec1, spec2) = sample_view_pair(w, h, cfg, rng);
    let mut x1 = render_view(image, &spec1);
    let mut x2 = render_view(image, &spec2);
    let p1 = apply_photometric(&mut x1, cfg, rng);
    let p2 = apply_photometric(&mut x2, cfg, rng);
    AugmentedPair { x1, x2, spec1, spec2, photometric: [p1, p2] }
}

/// Two independently augmented views with the pretraining parameter set.
pub fn sample_pretrain_pair(image: &Tensor<f32>, rng: &mut Rng, cfg: &AugmentConfig) -> AugmentedPair {
    sample_pair(image, rng, cfg)
}

/// Two views with the segmentation parameter set. Use [`replay_rng`] to get
/// the per-epoch replayed transforms.
pub fn sample_seg_pair(image: &Tensor<f32>, rng: &mut Rng, cfg: &AugmentConfig) -> AugmentedPair {
    sample_pair(image, rng, cfg)
}

/// Generator for image `index` in `epoch`: transforms are sampled once per
/// epoch and every query inside that epoch replays them.
pub fn replay_rng(seed: u64, epoch: u64, index: u64) -> Rng {
    rng::stream(seed, "augment", &[epoch, index])
}
