//! Central finite-difference verification of analytic gradients.

use super::{Graph, Tensor, Var};
use crate::error::Result;

pub const GRAD_CHECK_TOLERANCE: f64 = 1e-4;

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    pub pass: bool,
    /// Set when the check could not run to completion.
    pub failure: Option<String>,
    /// `(input index, flat coordinate)` of the largest relative error.
    pub worst: Option<(usize, usize)>,
    pub coordinates: usize,
}

impl GradCheckReport {
    fn failed(reason: String) -> Self {
        GradCheckReport { max_rel_err: f64::INFINITY, pass: false, failure: Some(reason), worst: None, coordinates: 0 }
    }
}

fn eval<F>(f: &F, inputs: &[Tensor<f64>]) -> Result<f64>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.leaf(t.clone())).collect();
    let out = f(&mut g, &vars)?;
    Ok(g.value(out).item())
}

/// Compares the graph's gradients of `f` against central differences with
/// step `1e-5·max(1,|x|)` and relative error `|a−n| / max(1e-8, |a|+|n|)`.
pub fn grad_check<F>(f: F, inputs: &[Tensor<f64>], tolerance: f64) -> GradCheckReport
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    grad_check_scaled(f, inputs, tolerance, 1.0)
}

/// As [`grad_check`], but multiplies the analytic gradient by `analytic_scale`
/// first. Any factor other than one must make the check fail.
pub fn grad_check_scaled<F>(f: F, inputs: &[Tensor<f64>], tolerance: f64, analytic_scale: f64) -> GradCheckReport
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.leaf(t.clone())).collect();
    let out = match f(&mut g, &vars) {
        Ok(v) => v,
        Err(e) => return GradCheckReport::failed(format!("forward failed: {e}")),
    };
    let base = g.value(out).clone();
    if base.numel() != 1 {
        return GradCheckReport::failed(format!("output shape {:?} is not scalar", base.shape()));
    }
    if let Err(e) = g.backward(out) {
        return GradCheckReport::failed(format!("backward failed: {e}"));
    }
    match eval(&f, inputs) {
        Ok(again) if again.to_bits() == base.item().to_bits() => {}
        Ok(again) => {
            return GradCheckReport::failed(format!(
                "function is not deterministic: {} then {again}",
                base.item()
            ))
        }
        Err(e) => return GradCheckReport::failed(format!("re-evaluation failed: {e}")),
    }

    let mut max_rel: f64 = 0.0;
    let mut worst = None;
    let mut coordinates = 0;
    let mut probe: Vec<Tensor<f64>> = inputs.to_vec();
    for (ti, var) in vars.iter().enumerate() {
        let analytic = g.grad(*var).map(|t| t.data().to_vec()).unwrap_or_else(|| vec![0.0; inputs[ti].numel()]);
        for k in 0..inputs[ti].numel() {
            let x = inputs[ti].data()[k];
            let h = 1e-5 * x.abs().max(1.0);
            let (xp, xm) = (x + h, x - h);
            probe[ti].data_mut()[k] = xp;
            let fp = eval(&f, &probe);
            probe[ti].data_mut()[k] = xm;
            let fm = eval(&f, &probe);
            probe[ti].data_mut()[k] = x;
            let (fp, fm) = match (fp, fm) {
                (Ok(a), Ok(b)) => (a, b),
                (Err(e), _) | (_, Err(e)) => return GradCheckReport::failed(format!("perturbed forward failed: {e}")),
            };
            let numeric = (fp - fm) / (xp - xm);
            let a = analytic[k] * analytic_scale;
            let rel = (a - numeric).abs() / (a.abs() + numeric.abs()).max(1e-8);
            coordinates += 1;
            if rel > max_rel || rel.is_nan() {
                max_rel = if rel.is_nan() { f64::INFINITY } else { rel };
                worst = Some((ti, k));
            }
        }
    }
    GradCheckReport { max_rel_err: max_rel, pass: max_rel < tolerance, failure: None, worst, coordinates }
}
