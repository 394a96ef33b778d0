//! Exact point correspondence between two crop+flip views of one image.
//!
//! Coordinates are continuous original-image pixel units: pixel `(i, j)`
//! covers `[j, j+1) × [i, i+1)` and has its center at `(j+0.5, i+0.5)`.
//! View coordinates are normalized to `[0,1]²` over the crop box, which
//! matches the pixel-center convention of [`Graph::grid_sample`](crate::Graph::grid_sample).

use rand::Rng as _;

use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Axis-aligned box `(x0, y0, w, h)` in original-image pixel units.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CropBox {
    pub x0: f64,
    pub y0: f64,
    pub w: f64,
    pub h: f64,
}

impl CropBox {
    pub fn new(x0: f64, y0: f64, w: f64, h: f64) -> Self {
        CropBox { x0, y0, w, h }
    }

    pub fn full(width: usize, height: usize) -> Self {
        CropBox::new(0.0, 0.0, width as f64, height as f64)
    }

    pub fn area(&self) -> f64 {
        self.w * self.h
    }

    pub fn contains(&self, (x, y): (f64, f64)) -> bool {
        x >= self.x0 && x <= self.x0 + self.w && y >= self.y0 && y <= self.y0 + self.h
    }
}

/// Geometry of one augmented view.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ViewSpec {
    pub crop: CropBox,
    pub hflip: bool,
    /// Side length `S` of the square augmented view.
    pub out_size: usize,
    /// `(width, height)` of the source image.
    pub image_size: (usize, usize),
}

impl ViewSpec {
    pub fn identity(width: usize, height: usize, out_size: usize) -> Self {
        ViewSpec { crop: CropBox::full(width, height), hflip: false, out_size, image_size: (width, height) }
    }

    pub fn validate(&self) -> Result<()> {
        let c = &self.crop;
        let (iw, ih) = (self.image_size.0 as f64, self.image_size.1 as f64);
        let eps = 1e-9 * iw.max(ih);
        if c.x0 < 0.0 || c.y0 < 0.0 || c.x0 + c.w > iw + eps || c.y0 + c.h > ih + eps || c.w < 1.0 || c.h < 1.0 {
            return Err(Error::Input(format!("crop {c:?} invalid for a {iw}x{ih} image")));
        }
        if self.out_size == 0 {
            return Err(Error::Input("view size must be positive".into()));
        }
        Ok(())
    }
}

/// K×K grid of shared original-image points and their per-view coordinates.
#[derive(Clone, Debug, PartialEq)]
pub struct CorrespondenceGrid {
    pub k: usize,
    /// Row-major (`i` over y, `j` over x) original-image points.
    pub points_orig: Vec<(f64, f64)>,
    pub coords_v1: Vec<(f64, f64)>,
    pub coords_v2: Vec<(f64, f64)>,
}

pub fn intersect(a: &ViewSpec, b: &ViewSpec) -> Option<CropBox> {
    let (ca, cb) = (&a.crop, &b.crop);
    let x0 = ca.x0.max(cb.x0);
    let y0 = ca.y0.max(cb.y0);
    let x1 = (ca.x0 + ca.w).min(cb.x0 + cb.w);
    let y1 = (ca.y0 + ca.h).min(cb.y0 + cb.h);
    (x1 > x0 && y1 > y0).then(|| CropBox::new(x0, y0, x1 - x0, y1 - y0))
}

/// Cell-center lattice: point `(i, j) = (x0 + (j+0.5)·w/K, y0 + (i+0.5)·h/K)`.
pub fn make_grid(inter: &CropBox, k: usize) -> Result<Vec<(f64, f64)>> {
    if k == 0 {
        return Err(Error::Usage("grid size K must be at least 1".into()));
    }
    let kf = k as f64;
    let mut pts = Vec::with_capacity(k * k);
    for i in 0..k {
        for j in 0..k {
            pts.push((inter.x0 + (j as f64 + 0.5) * inter.w / kf, inter.y0 + (i as f64 + 0.5) * inter.h / kf));
        }
    }
    Ok(pts)
}

/// `n` points drawn uniformly inside `inter`.
pub fn random_points(inter: &CropBox, n: usize, rng: &mut Rng) -> Vec<(f64, f64)> {
    (0..n)
        .map(|_| {
            let u: f64 = rng.random();
            let v: f64 = rng.random();
            (inter.x0 + u * inter.w, inter.y0 + v * inter.h)
        })
        .collect()
}

/// Original-image point to normalized view coordinates.
pub fn map_to_view(p: (f64, f64), v: &ViewSpec) -> Result<(f64, f64)> {
    if !v.crop.contains(p) {
        return Err(Error::Input(format!("point {p:?} outside crop {:?}", v.crop)));
    }
    let mut u = (p.0 - v.crop.x0) / v.crop.w;
    let t = (p.1 - v.crop.y0) / v.crop.h;
    if v.hflip {
        u = 1.0 - u;
    }
    Ok((u, t))
}

/// Inverse of [`map_to_view`].
pub fn unmap_from_view(uv: (f64, f64), v: &ViewSpec) -> (f64, f64) {
    let u = if v.hflip { 1.0 - uv.0 } else { uv.0 };
    (v.crop.x0 + u * v.crop.w, v.crop.y0 + uv.1 * v.crop.h)
}

/// Maps an arbitrary point set into both views.
pub fn correspond_points(v1: &ViewSpec, v2: &ViewSpec, points: Vec<(f64, f64)>, k: usize) -> Result<CorrespondenceGrid> {
    let coords_v1 = points.iter().map(|&p| map_to_view(p, v1)).collect::<Result<_>>()?;
    let coords_v2 = points.iter().map(|&p| map_to_view(p, v2)).collect::<Result<_>>()?;
    Ok(CorrespondenceGrid { k, points_orig: points, coords_v1, coords_v2 })
}

pub fn build_correspondence(v1: &ViewSpec, v2: &ViewSpec, k: usize) -> Result<CorrespondenceGrid> {
    if v1.image_size != v2.image_size {
        return Err(Error::Usage("views reference different image sizes".into()));
    }
    let inter = intersect(v1, v2).ok_or(Error::EmptyOverlap)?;
    let points = make_grid(&inter, k)?;
    correspond_points(v1, v2, points, k)
}

/// Packs per-sample coordinates into a `[B, K, K, 2]` sampling tensor.
pub fn coords_tensor<T: Scalar>(coords: &[&[(f64, f64)]], k: usize) -> Result<Tensor<T>> {
    let mut data = Vec::with_capacity(coords.len() * k * k * 2);
    for c in coords {
        if c.len() != k * k {
            return Err(Error::Dimension(format!("expected {} points, got {}", k * k, c.len())));
        }
        for &(x, y) in c.iter() {
            data.push(T::from_f64_lossy(x));
            data.push(T::from_f64_lossy(y));
        }
    }
    Tensor::new(&[coords.len(), k, k, 2], data)
}

/// Normalized pixel-center coordinates of every pixel of an `h×w` map,
/// shaped `[1, h, w, 2]`; resamples a field onto that lattice.
pub fn pixel_center_coords<T: Scalar>(h: usize, w: usize) -> Tensor<T> {
    let mut data = Vec::with_capacity(h * w * 2);
    for i in 0..h {
        for j in 0..w {
            data.push(T::from_f64_lossy((j as f64 + 0.5) / w as f64));
            data.push(T::from_f64_lossy((i as f64 + 0.5) / h as f64));
        }
    }
    Tensor::from_parts(vec![1, h, w, 2], data)
}
