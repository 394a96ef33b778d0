//! SGD with momentum and L2 weight decay, learning-rate
//! schedules and the representation-collapse statistic.

use std::collections::BTreeMap;

use super::config::Schedule;
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Batches are normalized against this reference size.
pub const LR_REFERENCE_BATCH: f64 = 256.0;

/// `base_lr · batch_size / 256`.
pub fn effective_lr(base_lr: f64, batch_size: usize) -> Result<f64> {
    if batch_size == 0 {
        return Err(Error::Config("batch_size must be at least 1".into()));
    }
    Ok(base_lr * batch_size as f64 / LR_REFERENCE_BATCH)
}

/// Learning rate at step `t` of `total`. Cosine reaches 0 at `t = total`.
pub fn lr_at(lr0: f64, t: u64, total: u64, schedule: Schedule) -> f64 {
    match schedule {
        Schedule::Constant => lr0,
        Schedule::Cosine if total == 0 => lr0,
        Schedule::Cosine => {
            let frac = (t.min(total) as f64) / total as f64;
            lr0 * 0.5 * (1.0 + (std::f64::consts::PI * frac).cos())
        }
    }
}

/// One in-place update of every parameter that has a gradient:
/// `g = grad + wd·p; buf = m·buf + g; p -= lr·buf`. Parameters without a
/// gradient (unused this step) are left untouched, buffers included.
pub fn sgd_step<T: Scalar>(
    params: &mut BTreeMap<String, Tensor<T>>,
    grads: &BTreeMap<String, Tensor<T>>,
    momentum_buffers: &mut BTreeMap<String, Tensor<T>>,
    lr: f64,
    momentum: f64,
    weight_decay: f64,
) -> Result<()> {
    let (lr, m, wd) = (T::from_f64_lossy(lr), T::from_f64_lossy(momentum), T::from_f64_lossy(weight_decay));
    for (name, grad) in grads {
        let p = params
            .get_mut(name)
            .ok_or_else(|| Error::Usage(format!("gradient for unknown parameter {name}")))?;
        if p.shape() != grad.shape() {
            return Err(Error::Dimension(format!("{name}: parameter {:?}, gradient {:?}", p.shape(), grad.shape())));
        }
        let buf = momentum_buffers.entry(name.clone()).or_insert_with(|| Tensor::zeros(grad.shape()));
        for ((pv, &gv), bv) in p.data_mut().iter_mut().zip(grad.data()).zip(buf.data_mut()) {
            let g = gv + wd * *pv;
            *bv = m * *bv + g;
            *pv -= lr * *bv;
        }
    }
    Ok(())
}

/// Mean over channels of the population standard deviation, across the
/// batch, of row-L2-normalized `[B,D]` embeddings. 0 means full collapse;
/// well-spread embeddings give about `1/√D`.
pub fn collapse_metric<T: Scalar>(z: &Tensor<T>) -> Result<f64> {
    let s = z.shape();
    if s.len() != 2 || s[0] == 0 || s[1] == 0 {
        return Err(Error::Dimension(format!("collapse_metric needs a non-empty [B,D] batch, got {s:?}")));
    }
    let (b, d) = (s[0], s[1]);
    let rows: Vec<Vec<f64>> = z
        .data()
        .chunks(d)
        .map(|r| {
            let r: Vec<f64> = r.iter().map(|v| v.to_f64_lossy()).collect();
            let norm = r.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-12);
            r.iter().map(|v| v / norm).collect()
        })
        .collect();
    let mut total = 0.0;
    for j in 0..d {
        let mean = rows.iter().map(|r| r[j]).sum::<f64>() / b as f64;
        let var = rows.iter().map(|r| (r[j] - mean).powi(2)).sum::<f64>() / b as f64;
        total += var.sqrt();
    }
    Ok(total / d as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    fn one(name: &str, v: &[f64]) -> BTreeMap<String, Tensor<f64>> {
        BTreeMap::from([(name.to_string(), Tensor::from_f64(&[v.len()], v).unwrap())])
    }

    #[test]
    fn effective_lr_examples() {
        assert_eq!(effective_lr(0.05, 512).unwrap(), 0.1);
        assert_eq!(effective_lr(0.05, 256).unwrap(), 0.05);
        assert_abs_diff_eq!(effective_lr(0.05, 64).unwrap(), 0.0125, epsilon = 1e-15);
        assert!(matches!(effective_lr(0.05, 0), Err(Error::Config(_))));
    }

    #[test]
    fn schedule_examples() {
        assert_eq!(lr_at(0.2, 0, 100, Schedule::Cosine), 0.2);
        assert_abs_diff_eq!(lr_at(0.2, 50, 100, Schedule::Cosine), 0.1, epsilon = 1e-15);
        assert_abs_diff_eq!(lr_at(0.2, 100, 100, Schedule::Cosine), 0.0, epsilon = 1e-15);
        assert_eq!(lr_at(0.2, 77, 100, Schedule::Constant), 0.2);
    }

    #[test]
    fn vanilla_step_subtracts_gradient() {
        let mut p = one("w", &[1.0, -2.0]);
        let mut bufs = BTreeMap::new();
        sgd_step(&mut p, &one("w", &[0.5, 0.25]), &mut bufs, 1.0, 0.0, 0.0).unwrap();
        assert_eq!(p["w"].data(), &[0.5, -2.25]);
    }

    #[test]
    fn momentum_recurrence_over_two_steps() {
        let g = 0.3;
        let mut p = one("w", &[0.0]);
        let mut bufs = BTreeMap::new();
        for _ in 0..2 {
            sgd_step(&mut p, &one("w", &[g]), &mut bufs, 1.0, 0.9, 0.0).unwrap();
        }
        assert_abs_diff_eq!(p["w"].data()[0], -(g + 1.9 * g), epsilon = 1e-15);
    }

    #[test]
    fn weight_decay_alone_shrinks_geometrically() {
        let (lr, wd) = (0.1, 0.01);
        let mut p = one("w", &[2.0]);
        let mut bufs = BTreeMap::new();
        for _ in 0..5 {
            sgd_step(&mut p, &one("w", &[0.0]), &mut bufs, lr, 0.0, wd).unwrap();
        }
        assert_abs_diff_eq!(p["w"].data()[0], 2.0 * (1.0 - lr * wd).powi(5), epsilon = 1e-14);
    }

    #[test]
    fn params_without_gradient_are_untouched() {
        let mut p = one("w", &[1.0]);
        p.insert("frozen".into(), Tensor::from_f64(&[1], &[3.0]).unwrap());
        let mut bufs = BTreeMap::new();
        sgd_step(&mut p, &one("w", &[1.0]), &mut bufs, 0.1, 0.9, 0.1).unwrap();
        assert_eq!(p["frozen"].data(), &[3.0]);
        assert!(!bufs.contains_key("frozen"));
    }

    #[test]
    fn shape_mismatch_and_unknown_name_fail() {
        let mut p = one("w", &[1.0]);
        let mut bufs = BTreeMap::new();
        assert!(matches!(sgd_step(&mut p, &one("w", &[1.0, 2.0]), &mut bufs, 1.0, 0.0, 0.0), Err(Error::Dimension(_))));
        assert!(matches!(sgd_step(&mut p, &one("v", &[1.0]), &mut bufs, 1.0, 0.0, 0.0), Err(Error::Usage(_))));
    }

    #[test]
    fn collapse_examples() {
        let same = Tensor::<f64>::from_f64(&[3, 2], &[1.0, 2.0, 1.0, 2.0, 2.0, 4.0]).unwrap();
        assert_abs_diff_eq!(collapse_metric(&same).unwrap(), 0.0, epsilon = 1e-15);
        let d = 6;
        let mut eye = Tensor::<f64>::zeros(&[d, d]);
        for i in 0..d {
            eye.data_mut()[i * d + i] = 1.0;
        }
        let df = d as f64;
        assert_abs_diff_eq!(collapse_metric(&eye).unwrap(), (1.0 / df * (1.0 - 1.0 / df)).sqrt(), epsilon = 1e-15);
        let d = 16;
        let z = Tensor::<f64>::randn(&[20_000, d], 1.0, &mut rng::stream(3, "collapse", &[]));
        assert_abs_diff_eq!(collapse_metric(&z).unwrap(), 1.0 / (d as f64).sqrt(), epsilon = 0.01);
    }

    proptest! {
        #[test]
        fn cosine_schedule_is_monotone_and_bounded(total in 1u64..500, a in 0u64..500, b in 0u64..500) {
            let (t1, t2) = (a.min(b).min(total), a.max(b).min(total));
            let (l1, l2) = (lr_at(1.0, t1, total, Schedule::Cosine), lr_at(1.0, t2, total, Schedule::Cosine));
            prop_assert!(l1 >= l2 && (0.0..=1.0).contains(&l2) && l1 <= 1.0);
        }

        #[test]
        fn zero_lr_never_moves_parameters(v in proptest::collection::vec(-10.0f64..10.0, 1..8), m in 0.0f64..0.99, wd in 0.0f64..0.1) {
            let mut p = one("w", &v);
            let g = one("w", &v.iter().map(|x| x * 0.5 + 1.0).collect::<Vec<_>>());
            let mut bufs = BTreeMap::new();
            for _ in 0..3 {
                sgd_step(&mut p, &g, &mut bufs, 0.0, m, wd).unwrap();
            }
            prop_assert_eq!(p["w"].data(), &v[..]);
        }
    }
}
