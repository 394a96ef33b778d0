//! Segmentation scoring: confusion counts, one-to-one label assignment and
//! IoU summaries split by stuff and things.

use rand::distr::{weighted::WeightedIndex, Distribution};

use crate::data::{ClassKind, Dataset};
use crate::error::{Error, Result};
use crate::rng;

/// `counts[p * n_gt + g]` = pixels predicted `p` with ground truth `g`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ConfusionMatrix {
    pub n_pred: usize,
    pub n_gt: usize,
    pub counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn new(n_pred: usize, n_gt: usize) -> Self {
        ConfusionMatrix { n_pred, n_gt, counts: vec![0; n_pred * n_gt] }
    }

    pub fn get(&self, p: usize, g: usize) -> u64 {
        self.counts[p * self.n_gt + g]
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn accumulate(&mut self, pred: &[usize], gt: &[i64]) -> Result<()> {
        if pred.len() != gt.len() {
            return Err(Error::Dimension(format!("prediction has {} pixels, ground truth {}", pred.len(), gt.len())));
        }
        for (&p, &g) in pred.iter().zip(gt) {
            if p >= self.n_pred || g < 0 || g as usize >= self.n_gt {
                return Err(Error::Input(format!("label pair ({p}, {g}) outside {}x{}", self.n_pred, self.n_gt)));
            }
            self.counts[p * self.n_gt + g as usize] += 1;
        }
        Ok(())
    }

    pub fn merge(&mut self, other: &ConfusionMatrix) -> Result<()> {
        if (self.n_pred, self.n_gt) != (other.n_pred, other.n_gt) {
            return Err(Error::Dimension("confusion matrices of different sizes".into()));
        }
        self.counts.iter_mut().zip(&other.counts).for_each(|(a, b)| *a += b);
        Ok(())
    }

    /// Zero-padded to `max(n_pred, n_gt)` on both sides.
    pub fn padded(&self) -> ConfusionMatrix {
        let n = self.n_pred.max(self.n_gt);
        let mut out = ConfusionMatrix::new(n, n);
        for p in 0..self.n_pred {
            for g in 0..self.n_gt {
                out.counts[p * n + g] = self.get(p, g);
            }
        }
        out
    }
}

/// Minimum-cost assignment `row → column` of a square matrix. Among all
/// optimal assignments the lexicographically smallest is returned.
pub fn hungarian_assign(cost: &[Vec<f64>]) -> Result<Vec<usize>> {
    let n = cost.len();
    if cost.iter().any(|r| r.len() != n) {
        return Err(Error::Usage("hungarian_assign needs a square matrix; pad it first".into()));
    }
    if cost.iter().flatten().any(|c| !c.is_finite()) {
        return Err(Error::Input("hungarian_assign: non-finite cost".into()));
    }
    if n == 0 {
        return Ok(Vec::new());
    }
    let (assign, u, v) = potentials(cost);
    let scale = cost.iter().flatten().fold(1.0f64, |m, c| m.max(c.abs()));
    let tol = 1e-9 * scale;
    let tight: Vec<Vec<bool>> =
        (0..n).map(|i| (0..n).map(|j| (cost[i][j] - u[i] - v[j]).abs() <= tol).collect()).collect();
    Ok(lexicographic_matching(&tight, assign))
}

/// Shortest-augmenting-path solver with dual potentials, O(n³).
/// Returns the assignment and duals `u`, `v` with `u_i + v_j ≤ c_ij`,
/// equality on every assigned pair.
fn potentials(cost: &[Vec<f64>]) -> (Vec<usize>, Vec<f64>, Vec<f64>) {
    let n = cost.len();
    // 1-based with a virtual column 0
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; n + 1];
    let mut p = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    for i in 1..=n {
        p[0] = i;
        let mut j0 = 0;
        let mut minv = vec![f64::INFINITY; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0;
            for j in 1..=n {
                if !used[j] {
                    let cur = cost[i0 - 1][j - 1] - u[i0] - v[j];
                    if cur < minv[j] {
                        minv[j] = cur;
                        way[j] = j0;
                    }
                    if minv[j] < delta {
                        delta = minv[j];
                        j1 = j;
                    }
                }
            }
            for j in 0..=n {
                if used[j] {
                    u[p[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if p[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut assign = vec![0; n];
    for j in 1..=n {
        assign[p[j] - 1] = j - 1;
    }
    (assign, u[1..].to_vec(), v[1..].to_vec())
}

const NONE: usize = usize::MAX;

/// Optimal assignments are exactly the perfect matchings on tight edges.
/// Rows are fixed in order to the smallest column that still admits a
/// perfect matching of the remaining rows; `start` is one such matching.
fn lexicographic_matching(tight: &[Vec<bool>], start: Vec<usize>) -> Vec<usize> {
    let n = tight.len();
    let mut row_of = vec![NONE; n];
    for (r, &c) in start.iter().enumerate() {
        row_of[c] = r;
    }
    let mut col_of = start;
    for i in 0..n {
        for c in 0..n {
            if !tight[i][c] || row_of[c] < i {
                continue;
            }
            if col_of[i] == c {
                break;
            }
            // give c to i; its owner r must reach i's old column f
            let (r, f) = (row_of[c], col_of[i]);
            row_of[c] = i;
            col_of[r] = NONE;
            row_of[f] = NONE;
            let mut visited = vec![false; n];
            if augment(tight, r, i, &mut row_of, &mut col_of, &mut visited) {
                col_of[i] = c;
                break;
            }
            row_of[c] = r;
            col_of[r] = c;
            row_of[f] = i;
        }
    }
    col_of
}

fn augment(tight: &[Vec<bool>], r: usize, fixed: usize, row_of: &mut [usize], col_of: &mut [usize], visited: &mut [bool]) -> bool {
    for d in 0..tight.len() {
        if !tight[r][d] || visited[d] {
            continue;
        }
        let owner = row_of[d];
        if owner != NONE && owner <= fixed {
            continue;
        }
        visited[d] = true;
        if owner == NONE || augment(tight, owner, fixed, row_of, col_of, visited) {
            row_of[d] = r;
            col_of[r] = d;
            return true;
        }
    }
    false
}

#[derive(Clone, Debug, PartialEq)]
pub struct SegMetrics {
    /// `mapping[p]` is the ground-truth class assigned to predicted label `p`.
    pub mapping: Vec<usize>,
    /// IoU per ground-truth class; `None` when its union is empty.
    pub per_class: Vec<Option<f64>>,
    pub miou: f64,
    pub miou_stuff: f64,
    pub miou_thing: f64,
}

/// Per-class IoU after relabeling predictions through `mapping`.
pub fn compute_miou(cm: &ConfusionMatrix, mapping: &[usize], kinds: &[ClassKind]) -> Result<SegMetrics> {
    if mapping.len() != cm.n_pred {
        return Err(Error::Dimension(format!("mapping covers {} labels, matrix has {}", mapping.len(), cm.n_pred)));
    }
    let n = cm.n_gt;
    if kinds.len() != n {
        return Err(Error::Dimension(format!("{} class kinds for {n} classes", kinds.len())));
    }
    let mut seen = vec![false; mapping.len().max(n)];
    if mapping.iter().any(|&g| g >= seen.len() || std::mem::replace(&mut seen[g], true)) {
        return Err(Error::Usage("mapping is not one-to-one".into()));
    }
    let mut inter = vec![0u64; n];
    let mut pred_sum = vec![0u64; n];
    let mut gt_sum = vec![0u64; n];
    for (p, &mapped) in mapping.iter().enumerate() {
        for g in 0..n {
            let c = cm.get(p, g);
            gt_sum[g] += c;
            if mapped < n {
                pred_sum[mapped] += c;
                if mapped == g {
                    inter[g] += c;
                }
            }
        }
    }
    let per_class: Vec<Option<f64>> = (0..n)
        .map(|c| {
            let union = pred_sum[c] + gt_sum[c] - inter[c];
            (union > 0).then(|| inter[c] as f64 / union as f64)
        })
        .collect();
    let mean = |filter: &dyn Fn(ClassKind) -> bool| {
        let vals: Vec<f64> = per_class.iter().zip(kinds).filter(|(_, &k)| filter(k)).filter_map(|(v, _)| *v).collect();
        if vals.is_empty() {
            f64::NAN
        } else {
            vals.iter().sum::<f64>() / vals.len() as f64
        }
    };
    Ok(SegMetrics {
        mapping: mapping.to_vec(),
        miou: mean(&|_| true),
        miou_stuff: mean(&|k| k == ClassKind::Stuff),
        miou_thing: mean(&|k| k == ClassKind::Thing),
        per_class,
    })
}

/// Pads, assigns by maximum overlap and scores.
pub fn evaluate(cm: &ConfusionMatrix, kinds: &[ClassKind]) -> Result<SegMetrics> {
    let sq = cm.padded();
    let n = sq.n_pred;
    let cost: Vec<Vec<f64>> = (0..n).map(|p| (0..n).map(|g| -(sq.get(p, g) as f64)).collect()).collect();
    let assign = hungarian_assign(&cost)?;
    compute_miou(cm, &assign[..cm.n_pred], kinds)
}

/// Mean matched mIoU of `trials` labelings that draw every pixel
/// independently from `marginals`.
pub fn random_baseline(gt: &[Vec<i64>], marginals: &[f64], kinds: &[ClassKind], trials: usize, seed: u64) -> Result<f64> {
    let dist = WeightedIndex::new(marginals).map_err(|e| Error::Input(format!("invalid label marginals: {e}")))?;
    let mut total = 0.0;
    for t in 0..trials {
        let mut r = rng::stream(seed, "random-baseline", &[t as u64]);
        let mut cm = ConfusionMatrix::new(marginals.len(), kinds.len());
        for mask in gt {
            let pred: Vec<usize> = (0..mask.len()).map(|_| dist.sample(&mut r)).collect();
            cm.accumulate(&pred, mask)?;
        }
        total += evaluate(&cm, kinds)?.miou;
    }
    Ok(total / trials as f64)
}

/// Confusion of per-image label maps against the dataset masks, and the
/// matched metrics.
pub fn score_predictions(preds: &[Vec<usize>], n_pred: usize, data: &Dataset) -> Result<(ConfusionMatrix, SegMetrics)> {
    let masks = data.masks.as_ref().ok_or_else(|| Error::Input("dataset has no masks to evaluate against".into()))?;
    if preds.len() != masks.len() {
        return Err(Error::Dimension(format!("{} predictions for {} images", preds.len(), masks.len())));
    }
    let mut cm = ConfusionMatrix::new(n_pred, data.num_classes());
    for (p, m) in preds.iter().zip(masks) {
        cm.accumulate(p, m)?;
    }
    let metrics = evaluate(&cm, &data.class_kinds)?;
    Ok((cm, metrics))
}

/// Relative frequency of each label in `0..n` over all maps.
pub fn label_marginals(preds: &[Vec<usize>], n: usize) -> Vec<f64> {
    let mut counts = vec![0u64; n];
    for &l in preds.iter().flatten() {
        counts[l] += 1;
    }
    let total = counts.iter().sum::<u64>().max(1) as f64;
    counts.iter().map(|&c| c as f64 / total).collect()
}

fn fmt4(v: f64) -> String {
    if v.is_nan() {
        "nan".to_string()
    } else {
        format!("{v:.4}")
    }
}

pub fn summary_line(m: &SegMetrics) -> String {
    format!("mIoU={} mIoU_St={} mIoU_Th={}", fmt4(m.miou), fmt4(m.miou_stuff), fmt4(m.miou_thing))
}

/// Per-class table followed by the summary line.
pub fn report_text(m: &SegMetrics, kinds: &[ClassKind]) -> String {
    let mut s = String::from("class  kind   IoU\n");
    for (c, (iou, k)) in m.per_class.iter().zip(kinds).enumerate() {
        s.push_str(&format!("{c:<6} {:<6} {}\n", k.name(), iou.map_or("-".to_string(), fmt4)));
    }
    s.push_str(&summary_line(m));
    s.push('\n');
    s
}

pub fn report_csv(m: &SegMetrics, kinds: &[ClassKind]) -> String {
    let mut s = String::from("class,kind,iou\n");
    for (c, (iou, k)) in m.per_class.iter().zip(kinds).enumerate() {
        s.push_str(&format!("{c},{},{}\n", k.name(), iou.map_or(String::new(), fmt4)));
    }
    s.push_str(&format!("mIoU,all,{}\nmIoU_St,stuff,{}\nmIoU_Th,thing,{}\n", fmt4(m.miou), fmt4(m.miou_stuff), fmt4(m.miou_thing)));
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::Rng as _;

    fn brute_force(cost: &[Vec<f64>]) -> (f64, Vec<usize>) {
        let n = cost.len();
        let mut perm: Vec<usize> = (0..n).collect();
        let mut best = (f64::INFINITY, perm.clone());
        // lexicographic enumeration keeps the first optimum on ties
        loop {
            let c: f64 = perm.iter().enumerate().map(|(i, &j)| cost[i][j]).sum();
            if c < best.0 {
                best = (c, perm.clone());
            }
            let Some(i) = (0..n.saturating_sub(1)).rev().find(|&i| perm[i] < perm[i + 1]) else { break };
            let j = (i + 1..n).rev().find(|&j| perm[j] > perm[i]).unwrap();
            perm.swap(i, j);
            perm[i + 1..].reverse();
        }
        best
    }

    fn optimal_count(cost: &[Vec<f64>]) -> usize {
        let best = brute_force(cost).0;
        let n = cost.len();
        let mut count = 0;
        let mut perm: Vec<usize> = (0..n).collect();
        loop {
            if perm.iter().enumerate().map(|(i, &j)| cost[i][j]).sum::<f64>() == best {
                count += 1;
            }
            let Some(i) = (0..n - 1).rev().find(|&i| perm[i] < perm[i + 1]) else { break };
            let j = (i + 1..n).rev().find(|&j| perm[j] > perm[i]).unwrap();
            perm.swap(i, j);
            perm[i + 1..].reverse();
        }
        count
    }

    #[test]
    fn two_by_two_example() {
        let a = hungarian_assign(&[vec![1.0, 2.0], vec![3.0, 1.0]]).unwrap();
        assert_eq!(a, vec![0, 1]);
    }

    #[test]
    fn ties_resolve_to_smallest_permutation() {
        let flat = vec![vec![1.0; 4]; 4];
        assert_eq!(hungarian_assign(&flat).unwrap(), vec![0, 1, 2, 3]);
        let c = vec![vec![0.0, 0.0, 5.0], vec![0.0, 0.0, 5.0], vec![5.0, 0.0, 0.0]];
        assert_eq!(hungarian_assign(&c).unwrap(), brute_force(&c).1);
    }

    #[test]
    fn non_square_is_usage_error() {
        assert!(matches!(hungarian_assign(&[vec![1.0, 2.0]]), Err(Error::Usage(_))));
    }

    #[test]
    fn matches_brute_force_on_small_integer_matrices() {
        let mut r = rng::stream(5, "hungarian", &[]);
        for n in 1..=6 {
            for _ in 0..100 {
                let c: Vec<Vec<f64>> = (0..n).map(|_| (0..n).map(|_| r.random_range(0..5) as f64).collect()).collect();
                assert_eq!(hungarian_assign(&c).unwrap(), brute_force(&c).1, "{c:?}");
            }
        }
    }

    #[test]
    fn confusion_examples() {
        let mut cm = ConfusionMatrix::new(2, 2);
        cm.accumulate(&[0, 1, 1], &[0, 1, 1]).unwrap();
        assert_eq!(cm.counts, vec![1, 0, 0, 2]);
        let mut one = ConfusionMatrix::new(2, 2);
        one.accumulate(&[1], &[0]).unwrap();
        assert_eq!(one.get(1, 0), 1);
        assert!(one.accumulate(&[2], &[0]).is_err());
    }

    #[test]
    fn miou_examples() {
        let kinds = [ClassKind::Stuff, ClassKind::Thing];
        let cm = ConfusionMatrix { n_pred: 2, n_gt: 2, counts: vec![3, 1, 1, 3] };
        let m = compute_miou(&cm, &[0, 1], &kinds).unwrap();
        assert_eq!(m.per_class, vec![Some(0.6), Some(0.6)]);
        assert!((m.miou - 0.6).abs() < 1e-12);
        assert_eq!(summary_line(&m), "mIoU=0.6000 mIoU_St=0.6000 mIoU_Th=0.6000");
        let perfect = ConfusionMatrix { n_pred: 2, n_gt: 2, counts: vec![0, 5, 7, 0] };
        let m = evaluate(&perfect, &kinds).unwrap();
        assert_eq!(m.mapping, vec![1, 0]);
        assert_eq!(m.miou, 1.0);
    }

    #[test]
    fn empty_union_classes_are_excluded() {
        let kinds = [ClassKind::Stuff, ClassKind::Thing, ClassKind::Thing];
        let cm = ConfusionMatrix { n_pred: 3, n_gt: 3, counts: vec![4, 0, 0, 0, 2, 0, 0, 0, 0] };
        let m = evaluate(&cm, &kinds).unwrap();
        assert_eq!(m.per_class[2], None);
        assert_eq!(m.miou, 1.0);
        assert_eq!(m.miou_thing, 1.0);
    }

    #[test]
    fn fewer_predicted_labels_are_padded() {
        let kinds = [ClassKind::Stuff, ClassKind::Thing, ClassKind::Thing];
        let mut cm = ConfusionMatrix::new(2, 3);
        cm.accumulate(&[0, 0, 1, 1], &[0, 0, 2, 1]).unwrap();
        let m = evaluate(&cm, &kinds).unwrap();
        assert_eq!(m.mapping.len(), 2);
        assert_eq!(m.per_class[0], Some(1.0));
    }

    proptest! {
        #[test]
        fn accumulation_is_additive(a in prop::collection::vec((0usize..3, 0i64..3), 1..50), b in prop::collection::vec((0usize..3, 0i64..3), 1..50)) {
            let split = |v: &[(usize, i64)]| (v.iter().map(|x| x.0).collect::<Vec<_>>(), v.iter().map(|x| x.1).collect::<Vec<_>>());
            let (pa, ga) = split(&a);
            let (pb, gb) = split(&b);
            let mut m1 = ConfusionMatrix::new(3, 3);
            m1.accumulate(&pa, &ga).unwrap();
            let mut m2 = ConfusionMatrix::new(3, 3);
            m2.accumulate(&pb, &gb).unwrap();
            m1.merge(&m2).unwrap();
            let mut whole = ConfusionMatrix::new(3, 3);
            whole.accumulate(&[pa, pb].concat(), &[ga, gb].concat()).unwrap();
            prop_assert_eq!(m1, whole);
        }

        #[test]
        fn relabeling_leaves_metrics_unchanged(pix in prop::collection::vec((0usize..4, 0i64..4), 1..80), perm_seed in 0u64..100) {
            let kinds = [ClassKind::Stuff, ClassKind::Thing, ClassKind::Thing, ClassKind::Thing];
            let mut perm: Vec<usize> = (0..4).collect();
            use rand::seq::SliceRandom;
            perm.shuffle(&mut rng::stream(perm_seed, "perm", &[]));
            let pred: Vec<usize> = pix.iter().map(|x| x.0).collect();
            let gt: Vec<i64> = pix.iter().map(|x| x.1).collect();
            let relabeled: Vec<usize> = pred.iter().map(|&p| perm[p]).collect();
            let mut a = ConfusionMatrix::new(4, 4);
            a.accumulate(&pred, &gt).unwrap();
            // with several maximum-overlap matchings the metrics may differ
            let cost: Vec<Vec<f64>> = (0..4).map(|p| (0..4).map(|g| -(a.get(p, g) as f64)).collect()).collect();
            prop_assume!(optimal_count(&cost) == 1);
            let mut b = ConfusionMatrix::new(4, 4);
            b.accumulate(&relabeled, &gt).unwrap();
            let (ma, mb) = (evaluate(&a, &kinds).unwrap(), evaluate(&b, &kinds).unwrap());
            prop_assert_eq!(ma.per_class, mb.per_class);
        }

        #[test]
        fn correct_pixels_never_lower_iou(pix in prop::collection::vec((0usize..3, 0i64..3), 1..60), extra in 0i64..3) {
            let kinds = [ClassKind::Stuff, ClassKind::Thing, ClassKind::Thing];
            let pred: Vec<usize> = pix.iter().map(|x| x.0).collect();
            let gt: Vec<i64> = pix.iter().map(|x| x.1).collect();
            let mut cm = ConfusionMatrix::new(3, 3);
            cm.accumulate(&pred, &gt).unwrap();
            let mapping = [0, 1, 2];
            let before = compute_miou(&cm, &mapping, &kinds).unwrap();
            cm.accumulate(&[extra as usize], &[extra]).unwrap();
            let after = compute_miou(&cm, &mapping, &kinds).unwrap();
            for (b, a) in before.per_class.iter().zip(&after.per_class) {
                prop_assert!(a.unwrap_or(0.0) >= b.unwrap_or(0.0));
            }
        }
    }
}
