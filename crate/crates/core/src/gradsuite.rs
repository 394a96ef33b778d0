//! Finite-difference verification of every differentiable primitive and
//! every loss, over many random draws, in `f64`.
//!
//! Each case reduces its output to a scalar through a random constant
//! weighting, so no coordinate of the gradient is trivially zero. Losses
//! are checked with gradients flowing through their targets because the
//! numeric derivative cannot see a stop-gradient.

use rand::Rng as _;

use crate::error::Result;
use crate::objectives::{self, Distance, LossWeights, SampledGrids, Target};
use crate::rng::{self, Rng};
use crate::tensor::{grad_check_scaled, Graph, Tensor, Var, GRAD_CHECK_TOLERANCE};

/// Number of random draws per case used by the CLI and acceptance checks.
pub const DEFAULT_SEEDS: usize = 20;

/// Analytic-gradient factor used to demonstrate that the checker fails.
pub const SABOTAGE_SCALE: f64 = 1.1;

type CaseFn = Box<dyn Fn(&mut Graph<f64>, &[Var]) -> Result<Var>>;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Group {
    Primitive,
    Loss,
}

impl Group {
    pub fn as_str(self) -> &'static str {
        match self {
            Group::Primitive => "primitive",
            Group::Loss => "loss",
        }
    }
}

#[derive(Clone, Debug)]
pub struct CaseResult {
    pub name: &'static str,
    pub group: Group,
    pub seeds: usize,
    pub coordinates: usize,
    pub max_rel_err: f64,
    /// First seed that failed, with the reason when the check did not run.
    pub first_failure: Option<(usize, String)>,
}

impl CaseResult {
    pub fn pass(&self) -> bool {
        self.first_failure.is_none()
    }
}

struct Case {
    name: &'static str,
    group: Group,
    build: fn(&mut Rng) -> (Vec<Tensor<f64>>, CaseFn),
}

fn normal(shape: &[usize], rng: &mut Rng) -> Tensor<f64> {
    Tensor::randn(shape, 1.0, rng)
}

fn uniform(shape: &[usize], lo: f64, hi: f64, rng: &mut Rng) -> Tensor<f64> {
    let n: usize = shape.iter().product();
    let v: Vec<f64> = (0..n).map(|_| rng.random_range(lo..hi)).collect();
    Tensor::from_f64(shape, &v).expect("shape matches data")
}

/// `Σ out ⊙ r` for a fixed random `r` of the output's shape.
fn readout(g: &mut Graph<f64>, out: Var, r: &Tensor<f64>) -> Result<Var> {
    let w = g.constant(r.clone());
    let m = g.mul(out, w)?;
    Ok(g.sum(m))
}

/// A case whose output of shape `out_shape` is weighted by a random readout.
fn weighted(
    inputs: Vec<Tensor<f64>>,
    out_shape: &[usize],
    rng: &mut Rng,
    f: impl Fn(&mut Graph<f64>, &[Var]) -> Result<Var> + 'static,
) -> (Vec<Tensor<f64>>, CaseFn) {
    let r = normal(out_shape, rng);
    (inputs, Box::new(move |g, v| {
        let out = f(g, v)?;
        readout(g, out, &r)
    }))
}

fn unary(shape: &[usize], rng: &mut Rng, f: fn(&mut Graph<f64>, Var) -> Var) -> (Vec<Tensor<f64>>, CaseFn) {
    let x = normal(shape, rng);
    weighted(vec![x], shape, rng, move |g, v| Ok(f(g, v[0])))
}

fn binary(rng: &mut Rng, f: fn(&mut Graph<f64>, Var, Var) -> Result<Var>) -> (Vec<Tensor<f64>>, CaseFn) {
    let s = [2, 3, 4];
    let (a, b) = (normal(&s, rng), normal(&s, rng));
    weighted(vec![a, b], &s, rng, move |g, v| f(g, v[0], v[1]))
}

fn conv(rng: &mut Rng, stride: usize) -> (Vec<Tensor<f64>>, CaseFn) {
    let x = normal(&[2, 2, 6, 6], rng);
    let w = normal(&[3, 2, 3, 3], rng);
    let o = (6 + 2 - 3) / stride + 1;
    weighted(vec![x, w], &[2, 3, o, o], rng, move |g, v| g.conv2d(v[0], v[1], stride, 1))
}

/// Leaves `[z1p, z2p, p1p, p2p]` of shape `[B,N,K,K]`.
fn grid_inputs(b: usize, n: usize, k: usize, rng: &mut Rng) -> Vec<Tensor<f64>> {
    (0..4).map(|_| normal(&[b, n, k, k], rng)).collect()
}

fn grids(v: &[Var]) -> SampledGrids {
    SampledGrids { z1p: v[0], z2p: v[1], p1p: v[2], p2p: v[3] }
}

fn scalar_case(inputs: Vec<Tensor<f64>>, f: impl Fn(&mut Graph<f64>, &[Var]) -> Result<Var> + 'static) -> (Vec<Tensor<f64>>, CaseFn) {
    (inputs, Box::new(f))
}

/// Region embeddings of both views from mask logits `v[0], v[1]` and
/// encoder grids `v[2], v[3]`.
fn region_pair(g: &mut Graph<f64>, v: &[Var]) -> Result<(Var, Var)> {
    let e1 = objectives::region_embeddings(g, v[0], v[2])?;
    let e2 = objectives::region_embeddings(g, v[1], v[3])?;
    Ok((e1, e2))
}

fn seg_ce_pair(g: &mut Graph<f64>, z1: Var, z2: Var) -> Result<Var> {
    let a = objectives::seg_ce_loss(g, z1, z1)?;
    let b = objectives::seg_ce_loss(g, z2, z2)?;
    let s = g.add(a, b)?;
    Ok(g.scale(s, 0.5))
}

fn cases() -> Vec<Case> {
    use Group::{Loss, Primitive};
    vec![
        Case { name: "add", group: Primitive, build: |r| binary(r, |g, a, b| g.add(a, b)) },
        Case { name: "sub", group: Primitive, build: |r| binary(r, |g, a, b| g.sub(a, b)) },
        Case { name: "mul", group: Primitive, build: |r| binary(r, |g, a, b| g.mul(a, b)) },
        Case {
            name: "scale_neg_add_scalar",
            group: Primitive,
            build: |r| {
                unary(&[3, 5], r, |g, x| {
                    let s = g.scale(x, 1.7);
                    let n = g.neg(s);
                    g.add_scalar(n, 0.3)
                })
            },
        },
        Case { name: "relu", group: Primitive, build: |r| unary(&[4, 6], r, |g, x| g.relu(x)) },
        Case { name: "exp", group: Primitive, build: |r| unary(&[4, 6], r, |g, x| g.exp(x)) },
        Case {
            name: "log",
            group: Primitive,
            build: |r| {
                let x = uniform(&[4, 6], 0.5, 2.0, r);
                weighted(vec![x], &[4, 6], r, |g, v| Ok(g.log(v[0])))
            },
        },
        Case {
            name: "sum_axis",
            group: Primitive,
            build: |r| {
                let x = normal(&[2, 3, 4], r);
                weighted(vec![x], &[2, 4], r, |g, v| g.sum_axis(v[0], 1))
            },
        },
        Case {
            name: "sum_mean",
            group: Primitive,
            build: |r| {
                let x = normal(&[3, 4], r);
                scalar_case(vec![x], |g, v| {
                    let sq = g.mul(v[0], v[0])?;
                    let m = g.mean(sq);
                    let s = g.sum(v[0]);
                    g.mul(m, s)
                })
            },
        },
        Case {
            name: "reshape_permute_transpose",
            group: Primitive,
            build: |r| {
                let x = normal(&[2, 3, 4], r);
                weighted(vec![x], &[4, 6], r, |g, v| {
                    let p = g.permute(v[0], &[2, 0, 1])?;
                    let s = g.reshape(p, &[6, 4])?;
                    g.transpose(s)
                })
            },
        },
        Case {
            name: "matmul",
            group: Primitive,
            build: |r| {
                let (a, b) = (normal(&[3, 4], r), normal(&[4, 5], r));
                weighted(vec![a, b], &[3, 5], r, |g, v| g.matmul(v[0], v[1]))
            },
        },
        Case {
            name: "matmul_batched",
            group: Primitive,
            build: |r| {
                let (a, b) = (normal(&[2, 3, 4], r), normal(&[2, 4, 5], r));
                weighted(vec![a, b], &[2, 3, 5], r, |g, v| g.matmul(v[0], v[1]))
            },
        },
        Case { name: "conv2d", group: Primitive, build: |r| conv(r, 1) },
        Case { name: "conv2d_stride2", group: Primitive, build: |r| conv(r, 2) },
        Case {
            name: "batch_norm",
            group: Primitive,
            build: |r| {
                let x = normal(&[4, 3, 2, 2], r);
                weighted(vec![x], &[4, 3, 2, 2], r, |g, v| Ok(g.batch_norm(v[0], 1e-5)?.0))
            },
        },
        Case {
            name: "channel_affine",
            group: Primitive,
            build: |r| {
                let (x, s, b) = (normal(&[2, 3, 2, 2], r), normal(&[3], r), normal(&[3], r));
                weighted(vec![x, s, b], &[2, 3, 2, 2], r, |g, v| g.channel_affine(v[0], Some(v[1]), Some(v[2])))
            },
        },
        Case {
            name: "softmax",
            group: Primitive,
            build: |r| {
                let x = normal(&[2, 4, 3], r);
                weighted(vec![x], &[2, 4, 3], r, |g, v| g.softmax(v[0], 1))
            },
        },
        Case {
            name: "log_softmax",
            group: Primitive,
            build: |r| {
                let x = normal(&[2, 4, 3], r);
                weighted(vec![x], &[2, 4, 3], r, |g, v| g.log_softmax(v[0], 1))
            },
        },
        Case {
            name: "l2_normalize",
            group: Primitive,
            build: |r| {
                let x = normal(&[2, 4, 3], r);
                weighted(vec![x], &[2, 4, 3], r, |g, v| g.l2_normalize(v[0], 1, 1e-12))
            },
        },
        Case {
            name: "grid_sample_field",
            group: Primitive,
            build: |r| {
                let field = normal(&[2, 3, 4, 4], r);
                let coords = uniform(&[2, 3, 2, 2], 0.05, 0.95, r);
                weighted(vec![field], &[2, 3, 3, 2], r, move |g, v| {
                    let c = g.constant(coords.clone());
                    g.grid_sample(v[0], c)
                })
            },
        },
        Case {
            name: "grid_sample_coords",
            group: Primitive,
            build: |r| {
                let field = normal(&[2, 3, 4, 4], r);
                let coords = uniform(&[2, 3, 2, 2], 0.05, 0.95, r);
                weighted(vec![coords], &[2, 3, 3, 2], r, move |g, v| {
                    let f = g.constant(field.clone());
                    g.grid_sample(f, v[0])
                })
            },
        },
        Case {
            name: "dist_cosine",
            group: Loss,
            build: |r| {
                let (p, z) = (normal(&[3, 5, 2], r), normal(&[3, 5, 2], r));
                scalar_case(vec![p, z], |g, v| objectives::dist_cosine(g, v[0], v[1], 1))
            },
        },
        Case {
            name: "dist_ce",
            group: Loss,
            build: |r| {
                let (p, z) = (normal(&[3, 5, 2], r), normal(&[3, 5, 2], r));
                scalar_case(vec![p, z], |g, v| objectives::dist_ce(g, v[0], v[1], 1))
            },
        },
        Case {
            name: "pixsim_loss_cosine",
            group: Loss,
            build: |r| {
                scalar_case(grid_inputs(2, 4, 2, r), |g, v| {
                    objectives::pixsim_loss_with(g, &grids(v), Distance::Cosine, Target::Attached)
                })
            },
        },
        Case {
            name: "pixsim_loss_ce",
            group: Loss,
            build: |r| {
                scalar_case(grid_inputs(2, 4, 2, r), |g, v| {
                    objectives::pixsim_loss_with(g, &grids(v), Distance::Ce, Target::Attached)
                })
            },
        },
        Case {
            name: "region_embeddings",
            group: Loss,
            build: |r| {
                let (z, f) = (normal(&[2, 3, 2, 2], r), normal(&[2, 4, 2, 2], r));
                weighted(vec![z, f], &[2, 3, 4], r, |g, v| objectives::region_embeddings(g, v[0], v[1]))
            },
        },
        Case {
            name: "region_contrastive_loss",
            group: Loss,
            build: |r| {
                // wide rows keep cosines small, so logits over τ stay out of saturation
                let inputs = (0..4).map(|_| normal(&[2, 4, 16], r)).collect();
                scalar_case(inputs, |g, v| {
                    objectives::region_contrastive_loss_with(g, v[0], v[1], v[2], v[3], objectives::DEFAULT_TAU, Target::Attached)
                })
            },
        },
        Case {
            name: "global_loss",
            group: Loss,
            build: |r| {
                let inputs = (0..4).map(|_| normal(&[3, 5], r)).collect();
                scalar_case(inputs, |g, v| objectives::global_loss_with(g, v[0], v[1], v[2], v[3], Target::Attached))
            },
        },
        Case {
            name: "seg_ce_loss",
            group: Loss,
            build: |r| {
                let z = normal(&[2, 3, 3, 3], r);
                scalar_case(vec![z], |g, v| objectives::seg_ce_loss(g, v[0], v[0]))
            },
        },
        Case {
            name: "total_pretrain_loss",
            group: Loss,
            build: |r| {
                // grids, encoder grids, then global p1 z1 p2 z2
                let mut inputs = grid_inputs(2, 3, 2, r);
                inputs.extend((0..2).map(|_| normal(&[2, 16, 2, 2], r)));
                inputs.extend((0..4).map(|_| normal(&[2, 5], r)));
                scalar_case(inputs, |g, v| {
                    let l_dense = objectives::pixsim_loss_with(g, &grids(v), Distance::Ce, Target::Attached)?;
                    let (e1, e2) = region_pair(g, &[v[0], v[1], v[4], v[5]])?;
                    let l_region = objectives::region_contrastive_loss_with(g, e1, e2, e1, e2, objectives::DEFAULT_TAU, Target::Attached)?;
                    let l_sim = objectives::global_loss_with(g, v[6], v[7], v[8], v[9], Target::Attached)?;
                    objectives::total_pretrain_loss(g, l_sim, l_dense, Some(l_region), &LossWeights::pretrain_default())
                })
            },
        },
        Case {
            name: "total_seg_loss",
            group: Loss,
            build: |r| {
                // main grids, encoder grids, then auxiliary grids
                let mut inputs = grid_inputs(2, 3, 2, r);
                inputs.extend((0..2).map(|_| normal(&[2, 16, 2, 2], r)));
                inputs.extend(grid_inputs(2, 5, 2, r));
                scalar_case(inputs, |g, v| {
                    let l_dense = objectives::pixsim_loss_with(g, &grids(v), Distance::Ce, Target::Attached)?;
                    let (e1, e2) = region_pair(g, &[v[0], v[1], v[4], v[5]])?;
                    let l_region = objectives::region_contrastive_loss_with(g, e1, e2, e1, e2, objectives::DEFAULT_TAU, Target::Attached)?;
                    let l_seg = seg_ce_pair(g, v[0], v[1])?;
                    let l_aux = objectives::pixsim_loss_with(g, &grids(&v[6..]), Distance::Ce, Target::Attached)?;
                    objectives::total_seg_loss(g, l_dense, Some(l_region), l_seg, l_aux, &LossWeights::seg(3, 5)?)
                })
            },
        },
    ]
}

/// Names of all cases in run order.
pub fn case_names() -> Vec<&'static str> {
    cases().iter().map(|c| c.name).collect()
}

/// Runs every case on `seeds` independent draws. `analytic_scale` other
/// than 1 multiplies the analytic gradients and must make cases fail.
pub fn run_suite(seeds: usize, analytic_scale: f64) -> Vec<CaseResult> {
    cases()
        .into_iter()
        .enumerate()
        .map(|(ci, case)| {
            let mut res = CaseResult {
                name: case.name,
                group: case.group,
                seeds,
                coordinates: 0,
                max_rel_err: 0.0,
                first_failure: None,
            };
            for s in 0..seeds {
                let mut rng = rng::stream(0, "grad-suite", &[ci as u64, s as u64]);
                let (inputs, f) = (case.build)(&mut rng);
                let rep = grad_check_scaled(&f, &inputs, GRAD_CHECK_TOLERANCE, analytic_scale);
                res.coordinates += rep.coordinates;
                res.max_rel_err = res.max_rel_err.max(rep.max_rel_err);
                if !rep.pass && res.first_failure.is_none() {
                    let why = rep.failure.unwrap_or_else(|| format!("relative error {:.3e} at {:?}", rep.max_rel_err, rep.worst));
                    res.first_failure = Some((s, why));
                }
            }
            res
        })
        .collect()
}

/// One line per case plus a final verdict line.
pub fn report(results: &[CaseResult]) -> String {
    let mut out = String::new();
    for r in results {
        let verdict = if r.pass() { "PASS" } else { "FAIL" };
        out.push_str(&format!(
            "{verdict} {:<9} {:<28} seeds={} coords={} max_rel_err={:.3e}",
            r.group.as_str(),
            r.name,
            r.seeds,
            r.coordinates,
            r.max_rel_err
        ));
        if let Some((s, why)) = &r.first_failure {
            out.push_str(&format!(" first_failure=seed {s}: {why}"));
        }
        out.push('\n');
    }
    let failed = results.iter().filter(|r| !r.pass()).count();
    out.push_str(&format!("{} of {} cases passed (tolerance {:e})\n", results.len() - failed, results.len(), GRAD_CHECK_TOLERANCE));
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_case_passes_on_a_few_seeds() {
        let res = run_suite(3, 1.0);
        assert!(res.iter().all(CaseResult::pass), "{}", report(&res));
        assert_eq!(res.len(), case_names().len());
    }

    #[test]
    fn sabotage_fails_every_case() {
        let res = run_suite(1, SABOTAGE_SCALE);
        assert!(res.iter().all(|r| !r.pass()), "{}", report(&res));
    }
}
