//! Training loop shared by both modes.
//!
//! Every random draw derives from `(seed, role, indices)`, so a run is a pure
//! function of its config and data: the epoch shuffle, the per-image view
//! transforms and the hard-point draws are all recomputed on resume rather
//! than stored.

mod config;
mod optim;

use std::collections::BTreeMap;
use std::path::Path;
use std::sync::mpsc::sync_channel;

use rand::seq::SliceRandom;
use rayon::prelude::*;

pub use config::{GridSampling, Schedule, TrainConfig, KEYS};
pub use optim::{collapse_metric, effective_lr, lr_at, sgd_step, LR_REFERENCE_BATCH};

use crate::data::{replay_rng, sample_pretrain_pair, sample_seg_pair, AugmentConfig, Dataset};
use crate::dst1::{Container, Entry, Payload};
use crate::error::{Error, Result};
use crate::geometry::{coords_tensor, correspond_points, intersect, make_grid, random_points};
use crate::nn::{global_avg_pool, load_checkpoint, save_checkpoint, Ctx, DenseHead, DenseSiamModel, Mode, BN_MOMENTUM};
use crate::objectives::{
    ce_value, pixsim_loss, region_contrastive_loss_with, region_embeddings, seg_ce_loss, select_hard_points, total_pretrain_loss,
    total_seg_loss, global_loss, Distance, LossWeights, SampledGrids, Target,
};
use crate::rng;
use crate::scalar::Scalar;
use crate::tensor::{grid_sample_value, Graph, Tensor, Var};

pub const METRICS_HEADER: &str = "step,epoch,lr,l_sim,l_dense,l_region,l_seg,l_aux,collapse";
pub const STATE_STEP: &str = "state.step";
pub const STATE_EPOCH: &str = "state.epoch";
pub const MOMENTUM_PREFIX: &str = "optim.momentum.";
/// Prepared batches waiting for the optimizer.
const PREFETCH_DEPTH: usize = 2;

/// Loss components and diagnostics of one optimizer step. Components that
/// were not computed (inactive or absent in the mode) are `None`.
#[derive(Clone, Debug, PartialEq)]
pub struct StepMetrics {
    pub step: u64,
    pub epoch: u64,
    pub lr: f64,
    pub l_sim: Option<f64>,
    pub l_dense: f64,
    pub l_region: Option<f64>,
    pub l_seg: Option<f64>,
    pub l_aux: Option<f64>,
    pub collapse: f64,
    pub total: f64,
}

fn opt(v: Option<f64>) -> String {
    v.map_or(String::new(), |v| v.to_string())
}

impl StepMetrics {
    /// One CSV line matching [`METRICS_HEADER`], newline included. Floats use
    /// the shortest round-trip representation.
    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{},{}\n",
            self.step,
            self.epoch,
            self.lr,
            opt(self.l_sim),
            self.l_dense,
            opt(self.l_region),
            opt(self.l_seg),
            opt(self.l_aux),
            self.collapse
        )
    }

    fn components(&self) -> String {
        format!(
            "l_sim={} l_dense={} l_region={} l_seg={} l_aux={} total={}",
            opt(self.l_sim),
            self.l_dense,
            opt(self.l_region),
            opt(self.l_seg),
            opt(self.l_aux),
            self.total
        )
    }
}

/// Per-epoch means of the step metrics.
#[derive(Clone, Debug, PartialEq)]
pub struct EpochSummary {
    pub epoch: u64,
    pub steps: u64,
    pub mean_total: f64,
    pub mean_dense: f64,
    pub last_collapse: f64,
}

/// Two augmented view batches and the sampling points of every sample in
/// each view (`K²` points, or `hard_k·K²` candidates in biased mode).
struct Batch<T: Scalar> {
    indices: Vec<usize>,
    x1: Tensor<T>,
    x2: Tensor<T>,
    pts1: Vec<Vec<(f64, f64)>>,
    pts2: Vec<Vec<(f64, f64)>>,
}

fn prepare_batch<T: Scalar>(data: &Dataset, cfg: &TrainConfig, epoch: u64, indices: &[usize]) -> Result<Batch<T>> {
    let size = cfg.view_size.expect("resolved config");
    let aug = match cfg.mode {
        Mode::Pretrain => AugmentConfig::pretrain(size),
        Mode::Seg => AugmentConfig::segmentation(size),
    };
    let k = cfg.grid_size;
    let items = indices
        .par_iter()
        .map(|&i| {
            let mut r = replay_rng(cfg.seed, epoch, i as u64);
            let pair = match cfg.mode {
                Mode::Pretrain => sample_pretrain_pair(&data.images[i], &mut r, &aug),
                Mode::Seg => sample_seg_pair(&data.images[i], &mut r, &aug),
            };
            let inter = intersect(&pair.spec1, &pair.spec2).ok_or(Error::EmptyOverlap)?;
            let points = match cfg.grid_sampling {
                GridSampling::Uniform => make_grid(&inter, k)?,
                GridSampling::Biased => {
                    random_points(&inter, cfg.hard_k * k * k, &mut rng::stream(cfg.seed, "candidates", &[epoch, i as u64]))
                }
            };
            let grid = correspond_points(&pair.spec1, &pair.spec2, points, k)?;
            Ok((pair.x1, pair.x2, grid.coords_v1, grid.coords_v2))
        })
        .collect::<Result<Vec<_>>>()?;
    let mut x1 = Vec::with_capacity(items.len());
    let mut x2 = Vec::with_capacity(items.len());
    let mut pts1 = Vec::with_capacity(items.len());
    let mut pts2 = Vec::with_capacity(items.len());
    for (a, b, c1, c2) in items {
        x1.push(a);
        x2.push(b);
        pts1.push(c1);
        pts2.push(c2);
    }
    Ok(Batch {
        indices: indices.to_vec(),
        x1: Tensor::stack(&x1)?.cast(),
        x2: Tensor::stack(&x2)?.cast(),
        pts1,
        pts2,
    })
}

/// `[B, M, 1, 2]` sampling tensor of arbitrary point lists.
fn column_coords<T: Scalar>(pts: &[Vec<(f64, f64)>]) -> Result<Tensor<T>> {
    let m = pts.first().map_or(0, Vec::len);
    let data = pts.iter().flatten().flat_map(|&(x, y)| [T::from_f64_lossy(x), T::from_f64_lossy(y)]).collect();
    Tensor::new(&[pts.len(), m, 1, 2], data)
}

/// Per-candidate symmetric dissimilarity of the predictor/projector pairs.
fn point_dissimilarity<T: Scalar>(d: Distance, p: &Tensor<T>, z: &Tensor<T>, b: usize, m: usize) -> f64 {
    let n = p.shape()[1];
    let col = |t: &Tensor<T>| -> Vec<f64> { (0..n).map(|c| t.data()[(b * n + c) * p.shape()[2] + m].to_f64_lossy()).collect() };
    let (pv, zv) = (col(p), col(z));
    match d {
        Distance::Ce => ce_value(&pv, &zv),
        Distance::Cosine => {
            let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
            -pv.iter().zip(&zv).map(|(a, b)| a * b).sum::<f64>() / (norm(&pv) * norm(&zv))
        }
    }
}

pub struct Trainer<T: Scalar> {
    config: TrainConfig,
    pub model: DenseSiamModel<T>,
    momentum: BTreeMap<String, Tensor<T>>,
    step: u64,
    epoch: u64,
    weights: LossWeights,
}

impl<T: Scalar> Trainer<T> {
    /// Fresh run: resolves `config` against `data` and initializes the model
    /// from the config seed.
    pub fn new(config: &TrainConfig, data: &Dataset) -> Result<Self> {
        let (h, w) = data.image_size().ok_or_else(|| Error::Input("training set is empty".into()))?;
        let labeled = if data.masks.is_some() { data.num_classes() } else { 0 };
        let config = config.resolve(labeled, h.min(w))?;
        let model = DenseSiamModel::new(config.model_config()?, config.seed)?;
        Self::from_parts(config, model, BTreeMap::new(), 0, 0)
    }

    fn from_parts(config: TrainConfig, model: DenseSiamModel<T>, momentum: BTreeMap<String, Tensor<T>>, step: u64, epoch: u64) -> Result<Self> {
        let weights = config.loss_weights()?;
        Ok(Trainer { config, model, momentum, step, epoch, weights })
    }

    /// Restores model, optimizer state and counters written by
    /// [`Self::save_checkpoint`].
    pub fn from_checkpoint(path: impl AsRef<Path>) -> Result<Self> {
        let mut config = None;
        let parts = load_checkpoint::<T>(path, |meta| {
            let c = TrainConfig::from_text(meta)?;
            let mc = c.model_config()?;
            config = Some(c);
            Ok(mc)
        })?;
        let config = config.expect("set by the loader");
        let counter = |name: &str| -> Result<u64> {
            match parts.extra.i64(name)?.1 {
                [v] if *v >= 0 => Ok(*v as u64),
                other => Err(Error::parse(name, format!("expected one non-negative counter, got {other:?}"))),
            }
        };
        let (step, epoch) = (counter(STATE_STEP)?, counter(STATE_EPOCH)?);
        let mut momentum = BTreeMap::new();
        for e in &parts.extra.entries {
            if let Some(name) = e.name.strip_prefix(MOMENTUM_PREFIX) {
                let slot = parts.model.param(name)?;
                let t = parts.extra.tensor::<T>(&e.name)?;
                if t.shape() != slot.shape() {
                    return Err(Error::parse(e.name.clone(), format!("shape {:?}, parameter has {:?}", t.shape(), slot.shape())));
                }
                momentum.insert(name.to_string(), t);
            }
        }
        Self::from_parts(config, parts.model, momentum, step, epoch)
    }

    pub fn save_checkpoint(&self, path: impl AsRef<Path>) -> Result<()> {
        save_checkpoint(path, &self.model, &self.config.to_text(), self.state_entries()?)
    }

    fn state_entries(&self) -> Result<Vec<Entry>> {
        let mut out = vec![
            Entry::new(STATE_STEP, &[1], Payload::I64(vec![self.step as i64]))?,
            Entry::new(STATE_EPOCH, &[1], Payload::I64(vec![self.epoch as i64]))?,
        ];
        out.extend(self.momentum.iter().map(|(n, t)| Entry::from_tensor(format!("{MOMENTUM_PREFIX}{n}"), t)));
        Ok(out)
    }

    /// The resolved configuration (no `auto` values).
    pub fn config(&self) -> &TrainConfig {
        &self.config
    }

    /// Optimizer steps taken so far.
    pub fn step(&self) -> u64 {
        self.step
    }

    /// Index of the next epoch to run.
    pub fn epoch(&self) -> u64 {
        self.epoch
    }

    pub fn momentum_buffers(&self) -> &BTreeMap<String, Tensor<T>> {
        &self.momentum
    }

    /// Drop-last batching; a set smaller than one batch forms a single batch.
    pub fn steps_per_epoch(&self, n: usize) -> u64 {
        match n {
            0 => 0,
            n if n < self.config.batch_size => 1,
            n => (n / self.config.batch_size) as u64,
        }
    }

    pub fn total_steps(&self, n: usize) -> u64 {
        let full = self.config.epochs * self.steps_per_epoch(n);
        if self.config.max_steps > 0 {
            full.min(self.config.max_steps)
        } else {
            full
        }
    }

    pub fn is_finished(&self, n: usize) -> bool {
        self.epoch >= self.config.epochs || self.step >= self.total_steps(n)
    }

    /// Region loss is on from the first epoch `e` with
    /// `e ≥ region_start_fraction · epochs`, and only with a positive weight.
    pub fn region_active(&self, epoch: u64) -> bool {
        self.weights.lambda_region > 0.0 && epoch as f64 >= self.config.region_start_fraction * self.config.epochs as f64
    }

    fn check_data(&self, data: &Dataset) -> Result<()> {
        let (h, w) = data.image_size().ok_or_else(|| Error::Input("training set is empty".into()))?;
        if self.config.mode == Mode::Seg {
            let n = self.config.num_classes.expect("resolved config");
            if data.masks.is_some() && data.num_classes() != n {
                return Err(Error::Config(format!("model has {n} classes but the dataset has {}", data.num_classes())));
            }
        }
        if data.images.iter().any(|t| t.shape() != [3, h, w]) {
            return Err(Error::Input("training images differ in size".into()));
        }
        Ok(())
    }

    /// Runs epochs until the configured end or until epoch `stop_after`
    /// (exclusive) is reached, calling `on_step` after each step and
    /// `on_epoch` after each completed epoch.
    pub fn run(
        &mut self,
        data: &Dataset,
        stop_after: Option<u64>,
        on_step: &mut dyn FnMut(&StepMetrics) -> Result<()>,
        on_epoch: &mut dyn FnMut(&Self, &EpochSummary) -> Result<()>,
    ) -> Result<()> {
        self.check_data(data)?;
        while !self.is_finished(data.len()) && stop_after.is_none_or(|s| self.epoch < s) {
            let summary = self.train_epoch(data, on_step)?;
            on_epoch(self, &summary)?;
        }
        Ok(())
    }

    /// One pass over the shuffled set; augmentation runs ahead of the
    /// optimizer on a bounded, order-preserving queue.
    pub fn train_epoch(&mut self, data: &Dataset, on_step: &mut dyn FnMut(&StepMetrics) -> Result<()>) -> Result<EpochSummary> {
        self.check_data(data)?;
        let epoch = self.epoch;
        let n = data.len();
        let spe = self.steps_per_epoch(n);
        let total = self.total_steps(n);
        let first = epoch * spe;
        let steps = spe.min(total.saturating_sub(first));
        let batch = self.config.batch_size.min(n);
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut rng::stream(self.config.seed, "shuffle", &[epoch]));
        let chunks: Vec<Vec<usize>> = (0..steps as usize).map(|b| order[b * batch..(b + 1) * batch].to_vec()).collect();

        let cfg = self.config.clone();
        let mut records = Vec::with_capacity(chunks.len());
        std::thread::scope(|s| -> Result<()> {
            let (tx, rx) = sync_channel(PREFETCH_DEPTH);
            s.spawn(move || {
                for idx in &chunks {
                    if tx.send(prepare_batch::<T>(data, &cfg, epoch, idx)).is_err() {
                        break;
                    }
                }
            });
            for b in rx {
                let m = self.train_step(b?, epoch, total)?;
                on_step(&m)?;
                records.push(m);
            }
            Ok(())
        })?;
        self.epoch += 1;
        let k = records.len().max(1) as f64;
        Ok(EpochSummary {
            epoch,
            steps: records.len() as u64,
            mean_total: records.iter().map(|m| m.total).sum::<f64>() / k,
            mean_dense: records.iter().map(|m| m.l_dense).sum::<f64>() / k,
            last_collapse: records.last().map_or(f64::NAN, |m| m.collapse),
        })
    }

    /// Replaces the `hard_k·K²` candidates of each sample by the `K²`
    /// selected ones.
    fn select_points(&self, g: &Graph<T>, heads: [Var; 4], batch: &Batch<T>, epoch: u64) -> Result<(Vec<Vec<(f64, f64)>>, Vec<Vec<(f64, f64)>>)> {
        let [z1, p1, z2, p2] = heads;
        let (c1, c2) = (column_coords::<T>(&batch.pts1)?, column_coords::<T>(&batch.pts2)?);
        let p1s = grid_sample_value(g.value(p1), &c1);
        let z1s = grid_sample_value(g.value(z1), &c1);
        let p2s = grid_sample_value(g.value(p2), &c2);
        let z2s = grid_sample_value(g.value(z2), &c2);
        let kk = self.config.grid_size * self.config.grid_size;
        let d = self.config.distance;
        let mut out1 = Vec::with_capacity(batch.indices.len());
        let mut out2 = Vec::with_capacity(batch.indices.len());
        for (b, &idx) in batch.indices.iter().enumerate() {
            let m = batch.pts1[b].len();
            let dis: Vec<f64> =
                (0..m).map(|j| 0.5 * (point_dissimilarity(d, &p1s, &z2s, b, j) + point_dissimilarity(d, &p2s, &z1s, b, j))).collect();
            let mut r = rng::stream(self.config.seed, "hard-points", &[epoch, idx as u64]);
            let picks = select_hard_points(&dis, self.config.hard_k, self.config.hard_beta, kk, &mut r)?;
            out1.push(picks.iter().map(|&j| batch.pts1[b][j]).collect());
            out2.push(picks.iter().map(|&j| batch.pts2[b][j]).collect());
        }
        Ok((out1, out2))
    }

    fn train_step(&mut self, batch: Batch<T>, epoch: u64, total_steps: u64) -> Result<StepMetrics> {
        let cfg = &self.config;
        let model = &self.model;
        let k = cfg.grid_size;
        let mut ctx = Ctx::<T>::train();
        let x1 = ctx.graph.constant(batch.x1.clone());
        let x2 = ctx.graph.constant(batch.x2.clone());
        let f1 = model.encoder(&mut ctx, x1)?;
        let f2 = model.encoder(&mut ctx, x2)?;
        let z1 = model.dense_projector(&mut ctx, DenseHead::Main, f1)?;
        let p1 = model.dense_predictor(&mut ctx, DenseHead::Main, z1)?;
        let z2 = model.dense_projector(&mut ctx, DenseHead::Main, f2)?;
        let p2 = model.dense_predictor(&mut ctx, DenseHead::Main, z2)?;

        let (pts1, pts2) = match cfg.grid_sampling {
            GridSampling::Uniform => (batch.pts1.clone(), batch.pts2.clone()),
            GridSampling::Biased => self.select_points(&ctx.graph, [z1, p1, z2, p2], &batch, epoch)?,
        };
        let c1 = ctx.graph.constant(coords_tensor(&pts1.iter().map(Vec::as_slice).collect::<Vec<_>>(), k)?);
        let c2 = ctx.graph.constant(coords_tensor(&pts2.iter().map(Vec::as_slice).collect::<Vec<_>>(), k)?);
        let g = &mut ctx.graph;
        let grids = SampledGrids {
            z1p: g.grid_sample(z1, c1)?,
            z2p: g.grid_sample(z2, c2)?,
            p1p: g.grid_sample(p1, c1)?,
            p2p: g.grid_sample(p2, c2)?,
        };
        let l_dense = pixsim_loss(g, &grids, cfg.distance)?;

        let l_region = if self.region_active(epoch) {
            let e1 = g.grid_sample(f1, c1)?;
            let e2 = g.grid_sample(f2, c2)?;
            let e1 = region_embeddings(g, grids.z1p, e1)?;
            let e2 = region_embeddings(g, grids.z2p, e2)?;
            let (u1, v1) = model.region_heads(&mut ctx, e1)?;
            let (u2, v2) = model.region_heads(&mut ctx, e2)?;
            let t = if cfg.region_detach { Target::Detached } else { Target::Attached };
            Some(region_contrastive_loss_with(&mut ctx.graph, u1, u2, v1, v2, cfg.tau, t)?)
        } else {
            None
        };

        let (total, l_sim, l_seg, l_aux, collapse) = match cfg.mode {
            Mode::Pretrain => {
                let (pg1, zg1) = model.global_branch(&mut ctx, f1)?;
                let (pg2, zg2) = model.global_branch(&mut ctx, f2)?;
                let g = &mut ctx.graph;
                let l_sim = global_loss(g, pg1, zg1, pg2, zg2)?;
                let total = total_pretrain_loss(g, l_sim, l_dense, l_region, &self.weights)?;
                let collapse = collapse_metric(g.value(zg1))?;
                (total, Some(l_sim), None, None, collapse)
            }
            Mode::Seg => {
                let za1 = model.dense_projector(&mut ctx, DenseHead::Aux, f1)?;
                let pa1 = model.dense_predictor(&mut ctx, DenseHead::Aux, za1)?;
                let za2 = model.dense_projector(&mut ctx, DenseHead::Aux, f2)?;
                let pa2 = model.dense_predictor(&mut ctx, DenseHead::Aux, za2)?;
                let g = &mut ctx.graph;
                let aux = SampledGrids {
                    z1p: g.grid_sample(za1, c1)?,
                    z2p: g.grid_sample(za2, c2)?,
                    p1p: g.grid_sample(pa1, c1)?,
                    p2p: g.grid_sample(pa2, c2)?,
                };
                let l_aux = pixsim_loss(g, &aux, cfg.distance)?;
                let (src1, src2) = if cfg.seg_cross_view { (grids.z2p, grids.z1p) } else { (grids.z1p, grids.z2p) };
                let s1 = seg_ce_loss(g, grids.z1p, src1)?;
                let s2 = seg_ce_loss(g, grids.z2p, src2)?;
                let s = g.add(s1, s2)?;
                let l_seg = g.scale(s, T::from_f64_lossy(0.5));
                let total = total_seg_loss(g, l_dense, l_region, l_seg, l_aux, &self.weights)?;
                let pooled = global_avg_pool(g, z1)?;
                let collapse = collapse_metric(g.value(pooled))?;
                (total, None, Some(l_seg), Some(l_aux), collapse)
            }
        };

        let g = &ctx.graph;
        let val = |v: Var| g.value(v).item().to_f64_lossy();
        let lr0 = effective_lr(cfg.base_lr, cfg.batch_size)?;
        let schedule = cfg.schedule.expect("resolved config");
        let metrics = StepMetrics {
            step: self.step,
            epoch,
            lr: lr_at(lr0, self.step, total_steps, schedule),
            l_sim: l_sim.map(val),
            l_dense: val(l_dense),
            l_region: l_region.map(val),
            l_seg: l_seg.map(val),
            l_aux: l_aux.map(val),
            collapse,
            total: val(total),
        };
        if !metrics.total.is_finite() {
            return Err(Error::NonFinite { step: self.step, components: metrics.components() });
        }
        ctx.graph.backward(total)?;
        let grads = ctx.param_grads();
        let bn = ctx.take_bn_updates();
        let (momentum, wd) = (self.config.momentum, self.config.weight_decay);
        sgd_step(self.model.params_mut(), &grads, &mut self.momentum, metrics.lr, momentum, wd)?;
        self.model.apply_bn_updates(&bn, T::from_f64_lossy(BN_MOMENTUM))?;
        self.step += 1;
        Ok(metrics)
    }
}

/// Trainer state as a DST1 container, for inspection without a model config.
pub fn state_summary(c: &Container) -> Result<(u64, u64)> {
    let get = |n: &str| c.i64(n).map(|(_, v)| v.first().copied().unwrap_or(0).max(0) as u64);
    Ok((get(STATE_STEP)?, get(STATE_EPOCH)?))
}
