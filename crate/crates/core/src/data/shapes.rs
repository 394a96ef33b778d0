//! Synthetic labeled-shapes images: a textured background ("stuff") with
//! one to four non-overlapping colored circles and rectangles ("things").

use rand::Rng as _;
use rand_distr::{Distribution, Normal};

use super::color::hsv_to_rgb;
use super::{ClassKind, LabeledImage};
use crate::error::{Error, Result};
use crate::rng;
use crate::tensor::Tensor;

pub const HUE_SLOTS: usize = 12;
const MAX_SHAPES: usize = 4;
const PLACEMENT_TRIES: usize = 100;
/// Shape radius (or rectangle half-width) as a fraction of the image side.
const EXTENT: (f64, f64) = (1.0 / 6.0, 1.0 / 3.0);

#[derive(Clone, Copy, Debug)]
enum Shape {
    Circle { cx: f64, cy: f64, r: f64 },
    Rect { cx: f64, cy: f64, hw: f64, hh: f64 },
}

impl Shape {
    fn contains(&self, x: f64, y: f64) -> bool {
        match *self {
            Shape::Circle { cx, cy, r } => (x - cx).powi(2) + (y - cy).powi(2) <= r * r,
            Shape::Rect { cx, cy, hw, hh } => (x - cx).abs() <= hw && (y - cy).abs() <= hh,
        }
    }

    fn bounding(&self) -> (f64, f64, f64) {
        match *self {
            Shape::Circle { cx, cy, r } => (cx, cy, r),
            Shape::Rect { cx, cy, hw, hh } => (cx, cy, (hw * hw + hh * hh).sqrt()),
        }
    }
}

/// Hue slot used by thing class `class` (1-based) when `num_classes` classes exist.
/// Thing classes are spread evenly over the slots.
pub fn class_hue(class: usize, num_classes: usize) -> f64 {
    let things = num_classes - 1;
    let slot = (class - 1) * HUE_SLOTS / things;
    slot as f64 / HUE_SLOTS as f64
}

pub fn gen_shapes_dataset(n: usize, num_classes: usize, size: usize, seed: u64) -> Result<Vec<LabeledImage>> {
    if num_classes < 2 {
        return Err(Error::Config(format!("need at least 2 classes (background + 1 thing), got {num_classes}")));
    }
    if num_classes > HUE_SLOTS {
        return Err(Error::Config(format!("{num_classes} classes exceed the {HUE_SLOTS} available hue slots")));
    }
    if size < 8 {
        return Err(Error::Config(format!("image size {size} too small (min 8)")));
    }
    let kinds: Vec<ClassKind> = (0..num_classes).map(|c| if c == 0 { ClassKind::Stuff } else { ClassKind::Thing }).collect();
    Ok((0..n as u64).map(|i| gen_one(num_classes, size, seed, i, &kinds)).collect())
}

fn gen_one(num_classes: usize, size: usize, seed: u64, index: u64, kinds: &[ClassKind]) -> LabeledImage {
    let mut rng = rng::stream(seed, "shapes", &[index]);
    let s = size as f64;
    let noise = Normal::new(0.0, 0.03).unwrap();

    // background: low-saturation warm gray with a random oriented stripe texture
    let bg_v = rng.random_range(0.42..0.5);
    let bg_rgb = hsv_to_rgb(0.08, 0.15, bg_v as f32);
    let angle: f64 = rng.random_range(0.0..std::f64::consts::PI);
    let freq: f64 = rng.random_range(0.3..0.8);
    let phase: f64 = rng.random_range(0.0..std::f64::consts::TAU);

    let count = rng.random_range(1..=MAX_SHAPES);
    let mut shapes: Vec<(Shape, usize, (f32, f32, f32))> = Vec::new();
    for _ in 0..count {
        let class = rng.random_range(1..num_classes);
        let extent = rng.random_range(s * EXTENT.0..s * EXTENT.1).max(1.5);
        for _ in 0..PLACEMENT_TRIES {
            let cx = rng.random_range(extent..s - extent);
            let cy = rng.random_range(extent..s - extent);
            let shape = if rng.random_bool(0.5) {
                Shape::Circle { cx, cy, r: extent }
            } else {
                let aspect: f64 = rng.random_range(0.6..1.0);
                Shape::Rect { cx, cy, hw: extent, hh: extent * aspect }
            };
            let (x, y, r) = shape.bounding();
            let clear = shapes.iter().all(|(o, _, _)| {
                let (ox, oy, or) = o.bounding();
                ((x - ox).powi(2) + (y - oy).powi(2)).sqrt() > r + or + 1.0
            });
            if clear {
                let value = rng.random_range(0.6..0.95);
                let rgb = hsv_to_rgb(class_hue(class, num_classes) as f32, 0.75, value as f32);
                shapes.push((shape, class, rgb));
                break;
            }
        }
    }

    let plane = size * size;
    let mut data = vec![0f32; 3 * plane];
    let mut mask = vec![0i64; plane];
    let (sa, ca) = angle.sin_cos();
    for y in 0..size {
        for x in 0..size {
            let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
            let p = y * size + x;
            let hit = shapes.iter().find(|(sh, _, _)| sh.contains(px, py));
            let rgb = match hit {
                Some((_, class, rgb)) => {
                    mask[p] = *class as i64;
                    *rgb
                }
                None => {
                    let t = 0.06 * ((px * ca + py * sa) * freq + phase).sin();
                    (bg_rgb.0 + t as f32, bg_rgb.1 + t as f32, bg_rgb.2 + t as f32)
                }
            };
            for (c, v) in [rgb.0, rgb.1, rgb.2].into_iter().enumerate() {
                let n: f64 = noise.sample(&mut rng);
                data[c * plane + p] = (v + n as f32).clamp(0.0, 1.0);
            }
        }
    }
    LabeledImage {
        image: Tensor::new(&[3, size, size], data).expect("image shape"),
        mask,
        class_kinds: kinds.to_vec(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::BTreeSet;

    #[test]
    fn two_class_single_image_has_both_labels() {
        let ds = gen_shapes_dataset(1, 2, 32, 0).unwrap();
        let labels: BTreeSet<i64> = ds[0].mask.iter().copied().collect();
        assert_eq!(labels, BTreeSet::from([0, 1]));
    }

    #[test]
    fn labels_in_range_and_deterministic() {
        let a = gen_shapes_dataset(20, 5, 24, 11).unwrap();
        let b = gen_shapes_dataset(20, 5, 24, 11).unwrap();
        assert_eq!(a, b);
        assert!(a.iter().flat_map(|l| &l.mask).all(|&m| (0..5).contains(&m)));
        assert!(a.iter().all(|l| l.image.data().iter().all(|v| (0.0..=1.0).contains(v))));
    }

    #[test]
    fn background_dominates_every_thing_class() {
        let ds = gen_shapes_dataset(200, 4, 32, 5).unwrap();
        let mut freq = [0usize; 4];
        for l in &ds {
            for &m in &l.mask {
                freq[m as usize] += 1;
            }
        }
        assert!(freq[1..].iter().all(|&f| f < freq[0]), "{freq:?}");
    }

    #[test]
    fn config_errors() {
        assert!(matches!(gen_shapes_dataset(1, 1, 32, 0), Err(Error::Config(_))));
        assert!(matches!(gen_shapes_dataset(1, 13, 32, 0), Err(Error::Config(_))));
    }
}
