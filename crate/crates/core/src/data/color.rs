//! Photometric transforms on `[3, H, W]` images in `[0, 1]`.

use crate::tensor::Tensor;

const LUMA: [f32; 3] = [0.299, 0.587, 0.114];

fn planes(img: &Tensor<f32>) -> (usize, usize) {
    let s = img.shape();
    (s[1], s[2])
}

pub fn grayscale_plane(img: &Tensor<f32>) -> Vec<f32> {
    let (h, w) = planes(img);
    let n = h * w;
    let d = img.data();
    (0..n).map(|p| LUMA[0] * d[p] + LUMA[1] * d[n + p] + LUMA[2] * d[2 * n + p]).collect()
}

pub fn to_grayscale(img: &mut Tensor<f32>) {
    let gray = grayscale_plane(img);
    let n = gray.len();
    for c in 0..3 {
        img.data_mut()[c * n..(c + 1) * n].copy_from_slice(&gray);
    }
}

fn blend(img: &mut Tensor<f32>, other: impl Fn(usize) -> f32, factor: f32) {
    let n = img.numel() / 3;
    for (i, v) in img.data_mut().iter_mut().enumerate() {
        *v = (factor * *v + (1.0 - factor) * other(i % n)).clamp(0.0, 1.0);
    }
}

pub fn adjust_brightness(img: &mut Tensor<f32>, factor: f32) {
    blend(img, |_| 0.0, factor);
}

pub fn adjust_contrast(img: &mut Tensor<f32>, factor: f32) {
    let gray = grayscale_plane(img);
    let mean = gray.iter().sum::<f32>() / gray.len() as f32;
    blend(img, |_| mean, factor);
}

pub fn adjust_saturation(img: &mut Tensor<f32>, factor: f32) {
    let gray = grayscale_plane(img);
    blend(img, |p| gray[p], factor);
}

pub fn rgb_to_hsv(r: f32, g: f32, b: f32) -> (f32, f32, f32) {
    let max = r.max(g).max(b);
    let min = r.min(g).min(b);
    let delta = max - min;
    let h = if delta <= 0.0 {
        0.0
    } else if max == r {
        ((g - b) / delta).rem_euclid(6.0) / 6.0
    } else if max == g {
        ((b - r) / delta + 2.0) / 6.0
    } else {
        ((r - g) / delta + 4.0) / 6.0
    };
    let s = if max <= 0.0 { 0.0 } else { delta / max };
    (h, s, max)
}

pub fn hsv_to_rgb(h: f32, s: f32, v: f32) -> (f32, f32, f32) {
    let h6 = h.rem_euclid(1.0) * 6.0;
    let sector = (h6.floor() as i32).rem_euclid(6);
    let f = h6 - h6.floor();
    let p = v * (1.0 - s);
    let q = v * (1.0 - s * f);
    let t = v * (1.0 - s * (1.0 - f));
    match sector {
        0 => (v, t, p),
        1 => (q, v, p),
        2 => (p, v, t),
        3 => (p, q, v),
        4 => (t, p, v),
        _ => (v, p, q),
    }
}

/// Rotates hue by `shift` turns (`shift ∈ [-0.5, 0.5]`).
pub fn adjust_hue(img: &mut Tensor<f32>, shift: f32) {
    let n = img.numel() / 3;
    let d = img.data_mut();
    for p in 0..n {
        let (h, s, v) = rgb_to_hsv(d[p], d[n + p], d[2 * n + p]);
        let (r, g, b) = hsv_to_rgb(h + shift, s, v);
        d[p] = r.clamp(0.0, 1.0);
        d[n + p] = g.clamp(0.0, 1.0);
        d[2 * n + p] = b.clamp(0.0, 1.0);
    }
}

/// Separable Gaussian blur with reflected borders; kernel radius `ceil(3σ)`.
pub fn gaussian_blur(img: &mut Tensor<f32>, sigma: f32) {
    let (h, w) = planes(img);
    let radius = (3.0 * sigma).ceil().max(1.0) as isize;
    let kernel: Vec<f32> = (-radius..=radius).map(|i| (-((i * i) as f32) / (2.0 * sigma * sigma)).exp()).collect();
    let total: f32 = kernel.iter().sum();
    let kernel: Vec<f32> = kernel.iter().map(|k| k / total).collect();
    let reflect = |i: isize, n: usize| -> usize {
        let n = n as isize;
        if n == 1 {
            return 0;
        }
        let period = 2 * (n - 1);
        let m = i.rem_euclid(period);
        (if m < n { m } else { period - m }) as usize
    };
    let n = h * w;
    let mut tmp = vec![0f32; n];
    for c in 0..3 {
        let plane = &mut img.data_mut()[c * n..(c + 1) * n];
        for y in 0..h {
            for x in 0..w {
                let mut s = 0.0;
                for (k, &kv) in kernel.iter().enumerate() {
                    s += kv * plane[y * w + reflect(x as isize + k as isize - radius, w)];
                }
                tmp[y * w + x] = s;
            }
        }
        for y in 0..h {
            for x in 0..w {
                let mut s = 0.0;
                for (k, &kv) in kernel.iter().enumerate() {
                    s += kv * tmp[reflect(y as isize + k as isize - radius, h) * w + x];
                }
                plane[y * w + x] = s.clamp(0.0, 1.0);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hsv_round_trip() {
        for &(r, g, b) in &[(0.9f32, 0.2, 0.1), (0.1, 0.8, 0.4), (0.3, 0.3, 0.9), (0.5, 0.5, 0.5)] {
            let (h, s, v) = rgb_to_hsv(r, g, b);
            let (r2, g2, b2) = hsv_to_rgb(h, s, v);
            assert!((r - r2).abs() < 1e-5 && (g - g2).abs() < 1e-5 && (b - b2).abs() < 1e-5);
        }
    }

    #[test]
    fn blur_preserves_constant_image() {
        let mut t = Tensor::full(&[3, 5, 7], 0.25f32);
        gaussian_blur(&mut t, 1.3);
        assert!(t.data().iter().all(|&v| (v - 0.25).abs() < 1e-6));
    }

    #[test]
    fn unit_factors_are_identity() {
        let data: Vec<f32> = (0..12).map(|v| v as f32 / 12.0).collect();
        let orig = Tensor::new(&[3, 2, 2], data).unwrap();
        let mut t = orig.clone();
        adjust_brightness(&mut t, 1.0);
        adjust_contrast(&mut t, 1.0);
        adjust_saturation(&mut t, 1.0);
        assert_eq!(t, orig);
    }
}
