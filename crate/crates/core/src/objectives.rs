//! Similarity, contrastive and pseudo-label losses.
//!
//! Every symmetric loss is built as `½(a + b)`; float addition commutes, so
//! exchanging the two views leaves the value bit-identical.

use rand::seq::index;

use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::scalar::Scalar;
use crate::tensor::{Graph, Tensor, Var};

/// Guard for L2 normalization of (near) zero vectors.
pub const NORM_EPS: f64 = 1e-12;
pub const DEFAULT_TAU: f64 = 0.1;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Distance {
    Cosine,
    Ce,
}

/// How the target operand of an asymmetric loss term enters the graph.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Target {
    /// Stop-gradient node.
    Detached,
    /// A fresh constant holding the same value.
    Constant,
    /// Gradient flows through the target.
    Attached,
}

fn target<T: Scalar>(g: &mut Graph<T>, v: Var, t: Target) -> Var {
    match t {
        Target::Detached => g.stop_gradient(v),
        Target::Constant => {
            let value = g.value(v).clone();
            g.constant(value)
        }
        Target::Attached => v,
    }
}

fn check_pair<T: Scalar>(g: &Graph<T>, a: Var, b: Var, what: &str) -> Result<()> {
    if g.shape(a) != g.shape(b) {
        return Err(Error::Dimension(format!("{what}: {:?} vs {:?}", g.shape(a), g.shape(b))));
    }
    Ok(())
}

/// Mean over all other axes of `−⟨p/‖p‖, z/‖z‖⟩` taken along `axis`.
pub fn dist_cosine<T: Scalar>(g: &mut Graph<T>, p: Var, z: Var, axis: usize) -> Result<Var> {
    check_pair(g, p, z, "dist_cosine")?;
    let eps = T::from_f64_lossy(NORM_EPS);
    let pn = g.l2_normalize(p, axis, eps)?;
    let zn = g.l2_normalize(z, axis, eps)?;
    let prod = g.mul(pn, zn)?;
    let dots = g.sum_axis(prod, axis)?;
    let m = g.mean(dots);
    Ok(g.neg(m))
}

/// Mean over all other axes of `−⟨softmax(p), log_softmax(z)⟩` along `axis`.
pub fn dist_ce<T: Scalar>(g: &mut Graph<T>, p: Var, z: Var, axis: usize) -> Result<Var> {
    check_pair(g, p, z, "dist_ce")?;
    let sp = g.softmax(p, axis)?;
    let lz = g.log_softmax(z, axis)?;
    let prod = g.mul(sp, lz)?;
    let s = g.sum_axis(prod, axis)?;
    let m = g.mean(s);
    Ok(g.neg(m))
}

pub fn distance<T: Scalar>(g: &mut Graph<T>, d: Distance, p: Var, z: Var, axis: usize) -> Result<Var> {
    match d {
        Distance::Cosine => dist_cosine(g, p, z, axis),
        Distance::Ce => dist_ce(g, p, z, axis),
    }
}

/// Grid-sampled projector (`z`) and predictor (`p`) outputs of both views,
/// each `[B,N,K,K]`.
#[derive(Clone, Copy, Debug)]
pub struct SampledGrids {
    pub z1p: Var,
    pub z2p: Var,
    pub p1p: Var,
    pub p2p: Var,
}

impl SampledGrids {
    pub fn swapped(self) -> Self {
        SampledGrids { z1p: self.z2p, z2p: self.z1p, p1p: self.p2p, p2p: self.p1p }
    }
}

fn symmetric<T: Scalar>(g: &mut Graph<T>, a: Var, b: Var) -> Result<Var> {
    let s = g.add(a, b)?;
    Ok(g.scale(s, T::from_f64_lossy(0.5)))
}

/// `½D(p′₁, sg(z′₂)) + ½D(p′₂, sg(z′₁))` with the channel axis as the vector.
pub fn pixsim_loss<T: Scalar>(g: &mut Graph<T>, s: &SampledGrids, d: Distance) -> Result<Var> {
    pixsim_loss_with(g, s, d, Target::Detached)
}

pub fn pixsim_loss_with<T: Scalar>(g: &mut Graph<T>, s: &SampledGrids, d: Distance, t: Target) -> Result<Var> {
    let z2 = target(g, s.z2p, t);
    let a = distance(g, d, s.p1p, z2, 1)?;
    let z1 = target(g, s.z1p, t);
    let b = distance(g, d, s.p2p, z1, 1)?;
    symmetric(g, a, b)
}

/// `e[b,n,c] = Σ_ij softmax_n(z′)[b,n,ij] · f[b,c,ij]`, shaped `[B,N,C]`.
pub fn region_embeddings<T: Scalar>(g: &mut Graph<T>, zp: Var, enc_grid: Var) -> Result<Var> {
    let (zs, fs) = (g.shape(zp).to_vec(), g.shape(enc_grid).to_vec());
    if zs.len() != 4 || fs.len() != 4 || zs[0] != fs[0] || zs[2..] != fs[2..] {
        return Err(Error::Dimension(format!("region_embeddings: masks {zs:?}, features {fs:?}")));
    }
    let kk = zs[2] * zs[3];
    let masks = g.softmax(zp, 1)?;
    let masks = g.reshape(masks, &[zs[0], zs[1], kk])?;
    let feats = g.reshape(enc_grid, &[fs[0], fs[1], kk])?;
    let feats = g.transpose(feats)?;
    g.matmul(masks, feats)
}

/// InfoNCE over the regions of each sample: row `i` of `u` must pick row `i`
/// of `v` among all rows. Rows are L2-normalized and logits divided by `τ`;
/// summed over regions, averaged over the batch.
fn region_infonce<T: Scalar>(g: &mut Graph<T>, u: Var, v: Var, tau: f64) -> Result<Var> {
    check_pair(g, u, v, "region_contrastive")?;
    let s = g.shape(u).to_vec();
    if s.len() != 3 {
        return Err(Error::Dimension(format!("region_contrastive: expected [B,N,D], got {s:?}")));
    }
    if tau <= 0.0 {
        return Err(Error::Config(format!("temperature must be positive, got {tau}")));
    }
    let (b, n) = (s[0], s[1]);
    let eps = T::from_f64_lossy(NORM_EPS);
    let un = g.l2_normalize(u, 2, eps)?;
    let vn = g.l2_normalize(v, 2, eps)?;
    let vt = g.transpose(vn)?;
    let logits = g.matmul(un, vt)?;
    let logits = g.scale(logits, T::from_f64_lossy(1.0 / tau));
    let ls = g.log_softmax(logits, 2)?;
    let mut eye = Tensor::zeros(&[b, n, n]);
    for bi in 0..b {
        for i in 0..n {
            eye.data_mut()[(bi * n + i) * n + i] = T::one();
        }
    }
    let eye = g.constant(eye);
    let picked = g.mul(ls, eye)?;
    let total = g.sum(picked);
    Ok(g.scale(total, T::from_f64_lossy(-1.0 / b as f64)))
}

/// `½L_c(u₁, sg(v₂)) + ½L_c(u₂, sg(v₁))`.
pub fn region_contrastive_loss<T: Scalar>(g: &mut Graph<T>, u1: Var, u2: Var, v1: Var, v2: Var, tau: f64) -> Result<Var> {
    region_contrastive_loss_with(g, u1, u2, v1, v2, tau, Target::Detached)
}

pub fn region_contrastive_loss_with<T: Scalar>(
    g: &mut Graph<T>,
    u1: Var,
    u2: Var,
    v1: Var,
    v2: Var,
    tau: f64,
    t: Target,
) -> Result<Var> {
    let v2t = target(g, v2, t);
    let a = region_infonce(g, u1, v2t, tau)?;
    let v1t = target(g, v1, t);
    let b = region_infonce(g, u2, v1t, tau)?;
    symmetric(g, a, b)
}

/// `½D_cos(p_g1, sg(z_g2)) + ½D_cos(p_g2, sg(z_g1))` on `[B,D]` embeddings.
pub fn global_loss<T: Scalar>(g: &mut Graph<T>, p1: Var, z1: Var, p2: Var, z2: Var) -> Result<Var> {
    global_loss_with(g, p1, z1, p2, z2, Target::Detached)
}

pub fn global_loss_with<T: Scalar>(g: &mut Graph<T>, p1: Var, z1: Var, p2: Var, z2: Var, t: Target) -> Result<Var> {
    let z2t = target(g, z2, t);
    let a = dist_cosine(g, p1, z2t, 1)?;
    let z1t = target(g, z1, t);
    let b = dist_cosine(g, p2, z1t, 1)?;
    symmetric(g, a, b)
}

/// Channel argmax of a `[B,N,...]` tensor; ties go to the lowest index.
pub fn argmax_channels<T: Scalar>(z: &Tensor<T>) -> Vec<usize> {
    let s = z.shape();
    let (b, n) = (s[0], s[1]);
    let inner: usize = s[2..].iter().product();
    let mut out = Vec::with_capacity(b * inner);
    for bi in 0..b {
        for p in 0..inner {
            let mut best = 0;
            let mut best_v = z.data()[bi * n * inner + p];
            for c in 1..n {
                let v = z.data()[(bi * n + c) * inner + p];
                if v > best_v {
                    best = c;
                    best_v = v;
                }
            }
            out.push(best);
        }
    }
    out
}

/// Class weights `clamp(median(freq)/freq(c), 0.1, 10)` from label counts;
/// absent classes get weight 0 and the median runs over present classes.
pub fn balanced_class_weights(labels: &[usize], n: usize) -> Vec<f64> {
    let mut counts = vec![0usize; n];
    for &l in labels {
        counts[l] += 1;
    }
    let mut present: Vec<f64> = counts.iter().filter(|&&c| c > 0).map(|&c| c as f64).collect();
    if present.is_empty() {
        return vec![0.0; n];
    }
    present.sort_by(f64::total_cmp);
    let m = present.len();
    let median = if m % 2 == 1 { present[m / 2] } else { 0.5 * (present[m / 2 - 1] + present[m / 2]) };
    counts.iter().map(|&c| if c == 0 { 0.0 } else { (median / c as f64).clamp(0.1, 10.0) }).collect()
}

/// Class-balanced cross entropy of `z[B,N,...]` against the channel argmax of
/// `label_source` (normally `z` itself), normalized by the total weight.
pub fn seg_ce_loss<T: Scalar>(g: &mut Graph<T>, z: Var, label_source: Var) -> Result<Var> {
    check_pair(g, z, label_source, "seg_ce_loss")?;
    let s = g.shape(z).to_vec();
    if s.len() < 2 {
        return Err(Error::Dimension(format!("seg_ce_loss: rank {} input", s.len())));
    }
    let n = s[1];
    let inner: usize = s[2..].iter().product();
    let labels = argmax_channels(g.value(label_source));
    let w = balanced_class_weights(&labels, n);
    let total: f64 = labels.iter().map(|&l| w[l]).sum();
    let mut mask = Tensor::zeros(&s);
    for (idx, &l) in labels.iter().enumerate() {
        let (bi, p) = (idx / inner, idx % inner);
        mask.data_mut()[(bi * n + l) * inner + p] = T::from_f64_lossy(w[l] / total);
    }
    let ls = g.log_softmax(z, 1)?;
    let mask = g.constant(mask);
    let picked = g.mul(ls, mask)?;
    let sum = g.sum(picked);
    Ok(g.neg(sum))
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossWeights {
    pub lambda_dense: f64,
    pub lambda_region: f64,
    pub lambda_seg: f64,
    pub lambda_aux: f64,
}

impl LossWeights {
    /// `λ1 = 1`, `λ2 = 0.1`.
    pub fn pretrain_default() -> Self {
        LossWeights { lambda_dense: 1.0, lambda_region: 0.1, lambda_seg: 0.0, lambda_aux: 0.0 }
    }

    /// Dense and auxiliary weights from the head sizes, `λ2 = 0.1`, `λ3 = 1`.
    pub fn seg(n: usize, n_aux: usize) -> Result<Self> {
        let (l1, l4) = seg_lambdas(n, n_aux)?;
        Ok(LossWeights { lambda_dense: l1, lambda_region: 0.1, lambda_seg: 1.0, lambda_aux: l4 })
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("lambda_dense", self.lambda_dense),
            ("lambda_region", self.lambda_region),
            ("lambda_seg", self.lambda_seg),
            ("lambda_aux", self.lambda_aux),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("{name} must be a non-negative number, got {v}")));
            }
        }
        Ok(())
    }
}

/// `(λ1, λ4) = (ln N_aux, ln N) / (ln N + ln N_aux)`.
pub fn seg_lambdas(n: usize, n_aux: usize) -> Result<(f64, f64)> {
    if n < 2 || n_aux < 2 {
        return Err(Error::Config(format!("head sizes must be at least 2, got N={n}, N_aux={n_aux}")));
    }
    if n_aux <= n {
        log::warn!("n_aux={n_aux} is not larger than N={n}; the auxiliary head is meant to over-cluster");
    }
    let (ln, la) = ((n as f64).ln(), (n_aux as f64).ln());
    Ok((la / (ln + la), ln / (ln + la)))
}

/// `L_sim + λ1·L_dense (+ λ2·L_region)`.
pub fn combine_pretrain(l_sim: f64, l_dense: f64, l_region: Option<f64>, w: &LossWeights) -> f64 {
    let base = l_sim + w.lambda_dense * l_dense;
    match l_region {
        Some(r) => base + w.lambda_region * r,
        None => base,
    }
}

pub fn total_pretrain_loss<T: Scalar>(g: &mut Graph<T>, l_sim: Var, l_dense: Var, l_region: Option<Var>, w: &LossWeights) -> Result<Var> {
    let d = g.scale(l_dense, T::from_f64_lossy(w.lambda_dense));
    let base = g.add(l_sim, d)?;
    match l_region {
        Some(r) => {
            let r = g.scale(r, T::from_f64_lossy(w.lambda_region));
            g.add(base, r)
        }
        None => Ok(base),
    }
}

/// `λ1·L_dense (+ λ2·L_region) + λ3·L_seg + λ4·L_aux`.
pub fn combine_seg(l_dense: f64, l_region: Option<f64>, l_seg: f64, l_aux: f64, w: &LossWeights) -> f64 {
    let mut t = w.lambda_dense * l_dense;
    if let Some(r) = l_region {
        t += w.lambda_region * r;
    }
    t + w.lambda_seg * l_seg + w.lambda_aux * l_aux
}

pub fn total_seg_loss<T: Scalar>(
    g: &mut Graph<T>,
    l_dense: Var,
    l_region: Option<Var>,
    l_seg: Var,
    l_aux: Var,
    w: &LossWeights,
) -> Result<Var> {
    let mut t = g.scale(l_dense, T::from_f64_lossy(w.lambda_dense));
    if let Some(r) = l_region {
        let r = g.scale(r, T::from_f64_lossy(w.lambda_region));
        t = g.add(t, r)?;
    }
    let s = g.scale(l_seg, T::from_f64_lossy(w.lambda_seg));
    t = g.add(t, s)?;
    let a = g.scale(l_aux, T::from_f64_lossy(w.lambda_aux));
    g.add(t, a)
}

/// `−⟨softmax(p), log_softmax(z)⟩` of two logit vectors.
pub fn ce_value(p: &[f64], z: &[f64]) -> f64 {
    let softmax = |v: &[f64]| {
        let m = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = m + v.iter().map(|x| (x - m).exp()).sum::<f64>().ln();
        v.iter().map(|x| x - lse).collect::<Vec<f64>>()
    };
    let (lp, lz) = (softmax(p), softmax(z));
    -lp.iter().zip(&lz).map(|(a, b)| a.exp() * b).sum::<f64>()
}

/// Picks `n` of `k·n` candidate points: the `⌊β·n⌋` most dissimilar, then the
/// rest uniformly from the remaining candidates. Returns sorted indices.
pub fn select_hard_points(dissimilarity: &[f64], k: usize, beta: f64, n: usize, rng: &mut Rng) -> Result<Vec<usize>> {
    if k == 0 || n == 0 {
        return Err(Error::Usage(format!("need k >= 1 and n >= 1, got k={k}, n={n}")));
    }
    if !(0.0..=1.0).contains(&beta) {
        return Err(Error::Usage(format!("beta {beta} outside [0,1]")));
    }
    if dissimilarity.len() != k * n {
        return Err(Error::Dimension(format!("expected {} candidates, got {}", k * n, dissimilarity.len())));
    }
    let hard = ((beta * n as f64) + 1e-9).floor() as usize;
    let mut order: Vec<usize> = (0..dissimilarity.len()).collect();
    order.sort_by(|&a, &b| dissimilarity[b].total_cmp(&dissimilarity[a]).then(a.cmp(&b)));
    let mut picked: Vec<usize> = order[..hard].to_vec();
    let mut rest: Vec<usize> = order[hard..].to_vec();
    rest.sort_unstable();
    let need = n - hard;
    if need == rest.len() {
        picked.extend(rest);
    } else {
        picked.extend(index::sample(rng, rest.len(), need).into_iter().map(|i| rest[i]));
    }
    picked.sort_unstable();
    Ok(picked)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    fn eval(f: impl FnOnce(&mut Graph<f64>) -> Result<Var>) -> f64 {
        let mut g = Graph::new();
        let v = f(&mut g).unwrap();
        g.value(v).item()
    }

    fn t(shape: &[usize], v: &[f64]) -> Tensor<f64> {
        Tensor::from_f64(shape, v).unwrap()
    }

    #[test]
    #[allow(clippy::approx_constant)] // the documented example value, rounded to four places
    fn cosine_examples() {
        let d = |p: &[f64], z: &[f64]| {
            eval(|g| {
                let (p, z) = (g.leaf(t(&[1, 2], p)), g.leaf(t(&[1, 2], z)));
                dist_cosine(g, p, z, 1)
            })
        };
        assert_eq!(d(&[1.0, 0.0], &[1.0, 0.0]), -1.0);
        assert_eq!(d(&[1.0, 0.0], &[0.0, 1.0]), 0.0);
        assert_abs_diff_eq!(d(&[1.0, 1.0], &[1.0, 0.0]), -0.7071, epsilon = 1e-4);
        assert_eq!(d(&[0.0, 0.0], &[1.0, 0.0]), 0.0);
    }

    #[test]
    fn ce_examples() {
        let d = |p: &[f64], z: &[f64]| {
            let n = p.len();
            eval(|g| {
                let (p, z) = (g.leaf(t(&[1, n], p)), g.leaf(t(&[1, n], z)));
                dist_ce(g, p, z, 1)
            })
        };
        assert_abs_diff_eq!(d(&[0.0, 0.0], &[0.0, 0.0]), 2f64.ln(), epsilon = 1e-6);
        assert!(d(&[10.0, -10.0], &[10.0, -10.0]) < 1e-6);
        let u = vec![0.3; 27];
        assert_abs_diff_eq!(d(&u, &u), 27f64.ln(), epsilon = 1e-4);
        assert_abs_diff_eq!(ce_value(&u, &u), 27f64.ln(), epsilon = 1e-12);
    }

    #[test]
    fn pixsim_perfect_match_is_minus_one() {
        let a = Tensor::randn(&[2, 3, 2, 2], 1.0, &mut rng::stream(0, "t", &[]));
        let b = Tensor::randn(&[2, 3, 2, 2], 1.0, &mut rng::stream(1, "t", &[]));
        let v = eval(|g| {
            let s = SampledGrids { z1p: g.leaf(a.clone()), z2p: g.leaf(b.clone()), p1p: g.leaf(b.clone()), p2p: g.leaf(a.clone()) };
            pixsim_loss(g, &s, Distance::Cosine)
        });
        assert_abs_diff_eq!(v, -1.0, epsilon = 1e-12);
    }

    #[test]
    fn region_embedding_hand_example() {
        // logits giving softmax weights (0.25, 0.75)
        let z = t(&[1, 2, 1, 1], &[0.0, 3f64.ln()]);
        let f = t(&[1, 2, 1, 1], &[2.0, -4.0]);
        let mut g = Graph::new();
        let (zv, fv) = (g.leaf(z), g.leaf(f));
        let e = region_embeddings(&mut g, zv, fv).unwrap();
        let got = g.value(e).data().to_vec();
        for (a, b) in got.iter().zip([0.5, -1.0, 1.5, -3.0]) {
            assert_abs_diff_eq!(*a, b, epsilon = 1e-12);
        }
    }

    #[test]
    fn region_embedding_constant_feature_closed_form() {
        let z = Tensor::randn(&[1, 3, 2, 2], 1.0, &mut rng::stream(2, "t", &[]));
        let f = Tensor::full(&[1, 2, 2, 2], 1.5);
        let w = crate::tensor::softmax_value(&z, 1);
        let mut g = Graph::new();
        let (zv, fv) = (g.leaf(z), g.leaf(f));
        let e = region_embeddings(&mut g, zv, fv).unwrap();
        for n in 0..3 {
            let mass: f64 = (0..4).map(|p| w.data()[n * 4 + p]).sum();
            for c in 0..2 {
                assert_abs_diff_eq!(g.value(e).at(&[0, n, c]), 1.5 * mass, epsilon = 1e-12);
            }
        }
    }

    fn contrastive(u1: &Tensor<f64>, u2: &Tensor<f64>, v1: &Tensor<f64>, v2: &Tensor<f64>, tau: f64) -> f64 {
        eval(|g| {
            let (a, b, c, d) = (g.leaf(u1.clone()), g.leaf(u2.clone()), g.leaf(v1.clone()), g.leaf(v2.clone()));
            region_contrastive_loss(g, a, b, c, d, tau)
        })
    }

    #[test]
    fn region_contrastive_examples() {
        let eye = t(&[1, 2, 2], &[1.0, 0.0, 0.0, 1.0]);
        assert_abs_diff_eq!(contrastive(&eye, &eye, &eye, &eye, 1.0), 2.0 * (1.0 + (-1f64).exp()).ln(), epsilon = 1e-12);
        assert_abs_diff_eq!(contrastive(&eye, &eye, &eye, &eye, 1.0), 0.6265, epsilon = 1e-3);
        let one = Tensor::randn(&[3, 1, 4], 1.0, &mut rng::stream(3, "t", &[]));
        assert_eq!(contrastive(&one, &one, &one, &one, 0.1), 0.0);
    }

    #[test]
    fn seg_ce_examples() {
        let ce = |z: Tensor<f64>| {
            eval(|g| {
                let v = g.leaf(z);
                seg_ce_loss(g, v, v)
            })
        };
        let mut sharp = Tensor::full(&[1, 3, 2, 2], -10.0);
        for (p, c) in [0, 1, 2, 0].into_iter().enumerate() {
            sharp.data_mut()[c * 4 + p] = 10.0;
        }
        assert!(ce(sharp) < 1e-3);
        assert_abs_diff_eq!(ce(Tensor::zeros(&[2, 3, 2, 2])), 3f64.ln(), epsilon = 1e-6);
        let z = Tensor::randn(&[2, 3, 3, 3], 1.0, &mut rng::stream(4, "t", &[]));
        assert!(ce(z.map(|v| 2.0 * v)) < ce(z));
    }

    #[test]
    fn class_weights_follow_median_rule() {
        // counts 6, 2, 1, 0 → median 2
        let labels = [0, 0, 0, 0, 0, 0, 1, 1, 2];
        let w = balanced_class_weights(&labels, 4);
        assert_eq!(w, vec![2.0 / 6.0, 1.0, 2.0, 0.0]);
        // counts 1000, 50, 1 → median 50, both clamps active
        let many: Vec<usize> = std::iter::repeat_n(0, 1000).chain(std::iter::repeat_n(1, 50)).chain([2]).collect();
        let w = balanced_class_weights(&many, 3);
        assert_eq!(w, vec![0.1, 1.0, 10.0]);
    }

    #[test]
    fn lambda_anchors() {
        let (l1, l4) = seg_lambdas(27, 128).unwrap();
        assert_abs_diff_eq!(l4, 0.4045, epsilon = 1e-4);
        assert_abs_diff_eq!(l1, 0.5955, epsilon = 1e-4);
        assert_eq!(seg_lambdas(10, 10).unwrap(), (0.5, 0.5));
        assert!(seg_lambdas(1, 10).is_err());
    }

    #[test]
    fn combination_examples() {
        let w = LossWeights::pretrain_default();
        assert_abs_diff_eq!(combine_pretrain(-1.0, 0.5, Some(0.2), &w), -0.48, epsilon = 1e-15);
        let zero = LossWeights { lambda_dense: 0.0, lambda_region: 0.0, ..w };
        assert_eq!(combine_pretrain(-0.7, 0.5, Some(0.2), &zero), -0.7);
        let ws = LossWeights::seg(27, 128).unwrap();
        assert_eq!(combine_seg(0.0, Some(0.0), 0.0, 0.0, &ws), 0.0);
        let neg = LossWeights { lambda_region: -0.1, ..w };
        assert!(matches!(neg.validate(), Err(Error::Config(_))));
        // graph version agrees with the scalar version
        let v = eval(|g| {
            let (a, b, c) = (g.leaf(Tensor::scalar(-1.0)), g.leaf(Tensor::scalar(0.5)), g.leaf(Tensor::scalar(0.2)));
            total_pretrain_loss(g, a, b, Some(c), &w)
        });
        assert_eq!(v, combine_pretrain(-1.0, 0.5, Some(0.2), &w));
    }

    #[test]
    fn hard_point_examples() {
        let mut r = rng::stream(0, "t", &[]);
        assert_eq!(select_hard_points(&[0.9, 0.1, 0.5, 0.2], 2, 1.0, 2, &mut r).unwrap(), vec![0, 2]);
        assert_eq!(select_hard_points(&[0.3, 0.1, 0.5], 1, 0.0, 3, &mut r).unwrap(), vec![0, 1, 2]);
        assert!(select_hard_points(&[0.3], 1, 1.5, 1, &mut r).is_err());
    }

    proptest! {
        #[test]
        fn ce_is_bounded_by_entropy(p in prop::collection::vec(-5.0f64..5.0, 1..8), shift in -3.0f64..3.0, noise in prop::collection::vec(-2.0f64..2.0, 8)) {
            let z: Vec<f64> = p.iter().zip(&noise).map(|(a, b)| a + b).collect();
            let entropy = ce_value(&p, &p);
            prop_assert!(ce_value(&p, &z) >= entropy - 1e-9);
            let shifted: Vec<f64> = p.iter().map(|v| v + shift).collect();
            prop_assert!((ce_value(&p, &shifted) - entropy).abs() < 1e-9);
        }

        #[test]
        fn lambdas_sum_to_one(n in 2usize..500, extra in 1usize..500) {
            let (l1, l4) = seg_lambdas(n, n + extra).unwrap();
            prop_assert!((l1 + l4 - 1.0).abs() <= 1e-12);
            prop_assert!(l1 > 0.0 && l1 < 1.0 && l4 > 0.0 && l4 < 1.0);
        }

        #[test]
        fn hard_points_are_unique_and_sized(k in 1usize..4, n in 1usize..10, beta in 0.0f64..=1.0, seed in 0u64..1000) {
            let mut r = rng::stream(seed, "t", &[]);
            let d: Vec<f64> = (0..k * n).map(|i| ((i * 7919 + seed as usize) % 13) as f64).collect();
            let idx = select_hard_points(&d, k, beta, n, &mut r).unwrap();
            prop_assert_eq!(idx.len(), n);
            prop_assert!(idx.windows(2).all(|w| w[0] < w[1]));
            prop_assert!(idx.iter().all(|&i| i < k * n));
        }

        #[test]
        fn region_loss_is_nonnegative_and_permutation_invariant(seed in 0u64..500, n in 1usize..5) {
            let mut r = rng::stream(seed, "t", &[]);
            let mk = |r: &mut crate::rng::Rng| Tensor::<f64>::randn(&[2, n, 3], 1.0, r);
            let (u1, u2, v1, v2) = (mk(&mut r), mk(&mut r), mk(&mut r), mk(&mut r));
            let base = contrastive(&u1, &u2, &v1, &v2, 0.5);
            prop_assert!(base >= 0.0);
            // reverse the region axis of all four inputs
            let rev = |x: &Tensor<f64>| {
                let mut y = x.clone();
                for b in 0..2 { for i in 0..n { for c in 0..3 {
                    y.data_mut()[(b * n + i) * 3 + c] = x.data()[(b * n + (n - 1 - i)) * 3 + c];
                }}}
                y
            };
            let permuted = contrastive(&rev(&u1), &rev(&u2), &rev(&v1), &rev(&v2), 0.5);
            prop_assert!((base - permuted).abs() < 1e-12);
        }
    }
}
