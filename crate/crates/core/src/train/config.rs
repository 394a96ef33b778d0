//! Run configuration: flat `key = value` text with `#` comments.
//!
//! Keys whose default depends on the mode or the dataset accept `auto`;
//! [`TrainConfig::resolve`] replaces every `auto` with a concrete value.

use std::collections::BTreeSet;
use std::fmt::Display;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::nn::{Mode, ModelConfig};
use crate::objectives::{seg_lambdas, Distance, LossWeights};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Schedule {
    Cosine,
    Constant,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum GridSampling {
    Uniform,
    Biased,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub mode: Mode,
    pub seed: u64,
    pub epochs: u64,
    /// Caps the total number of steps; 0 means no cap.
    pub max_steps: u64,
    pub batch_size: usize,
    pub base_lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub schedule: Option<Schedule>,
    pub grid_size: usize,
    pub distance: Distance,
    pub tau: f64,
    pub lambda_dense: Option<f64>,
    pub lambda_region: f64,
    pub lambda_seg: f64,
    pub lambda_aux: Option<f64>,
    pub region_start_fraction: f64,
    pub region_detach: bool,
    pub seg_cross_view: bool,
    pub grid_sampling: GridSampling,
    pub hard_k: usize,
    pub hard_beta: f64,
    pub stage_channels: Vec<usize>,
    pub output_stride: Option<usize>,
    pub head_width: usize,
    pub num_classes: Option<usize>,
    pub n_aux: usize,
    pub view_size: Option<usize>,
    pub data: Option<String>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            mode: Mode::Pretrain,
            seed: 0,
            epochs: 10,
            max_steps: 0,
            batch_size: 32,
            base_lr: 0.05,
            momentum: 0.9,
            weight_decay: 1e-4,
            schedule: None,
            grid_size: 7,
            distance: Distance::Ce,
            tau: 0.1,
            lambda_dense: None,
            lambda_region: 0.1,
            lambda_seg: 1.0,
            lambda_aux: None,
            region_start_fraction: 0.5,
            region_detach: true,
            seg_cross_view: false,
            grid_sampling: GridSampling::Uniform,
            hard_k: 2,
            hard_beta: 0.5,
            stage_channels: vec![16, 32, 64],
            output_stride: None,
            head_width: 64,
            num_classes: None,
            n_aux: 128,
            view_size: None,
            data: None,
        }
    }
}

/// Every accepted key with its default and meaning, in output order.
pub const KEYS: &[(&str, &str, &str)] = &[
    ("mode", "pretrain", "pretrain | seg"),
    ("seed", "0", "root seed of every random stream"),
    ("epochs", "10", "passes over the training set"),
    ("max_steps", "0", "stop after this many steps in total; 0 = no cap"),
    ("batch_size", "32", "images per step"),
    ("base_lr", "0.05", "learning rate before linear batch scaling"),
    ("momentum", "0.9", "SGD momentum"),
    ("weight_decay", "0.0001", "L2 penalty added to gradients"),
    ("schedule", "auto", "cosine | constant; auto = cosine (pretrain), constant (seg)"),
    ("grid_size", "7", "correspondence grid side K"),
    ("distance", "ce", "ce | cosine, pixel-level distance"),
    ("tau", "0.1", "region contrastive temperature"),
    ("lambda_dense", "auto", "pixel loss weight; auto = 1 (pretrain), ln N_aux/(ln N + ln N_aux) (seg)"),
    ("lambda_region", "0.1", "region loss weight"),
    ("lambda_seg", "1", "pseudo-label cross-entropy weight (seg)"),
    ("lambda_aux", "auto", "auxiliary head weight; auto = ln N/(ln N + ln N_aux) (seg)"),
    ("region_start_fraction", "0.5", "region loss active from epoch >= fraction * epochs"),
    ("region_detach", "true", "stop-gradient on region targets"),
    ("seg_cross_view", "false", "pseudo labels from the other view instead of the same view"),
    ("grid_sampling", "uniform", "uniform | biased"),
    ("hard_k", "2", "biased sampling: candidates per grid point"),
    ("hard_beta", "0.5", "biased sampling: fraction chosen by dissimilarity"),
    ("stage_channels", "16,32,64", "encoder stage widths"),
    ("output_stride", "auto", "encoder downsampling; auto = 8 (pretrain), 2 (seg)"),
    ("head_width", "64", "hidden width of every head"),
    ("num_classes", "auto", "projector channels N; auto = 32 (pretrain), dataset classes (seg)"),
    ("n_aux", "128", "auxiliary head channels (seg)"),
    ("view_size", "auto", "side of the augmented views; auto = image size"),
    ("data", "", "training data path; the --data flag takes precedence"),
];

fn parse<V: FromStr>(key: &str, value: &str) -> Result<V>
where
    V::Err: Display,
{
    value.parse().map_err(|e| Error::Config(format!("{key}: cannot parse {value:?}: {e}")))
}

fn parse_auto<V: FromStr>(key: &str, value: &str) -> Result<Option<V>>
where
    V::Err: Display,
{
    if value == "auto" {
        Ok(None)
    } else {
        parse(key, value).map(Some)
    }
}

fn show_auto<V: Display>(v: &Option<V>) -> String {
    v.as_ref().map_or("auto".to_string(), |v| v.to_string())
}

impl TrainConfig {
    pub fn from_text(text: &str) -> Result<Self> {
        let mut cfg = TrainConfig::default();
        let mut seen = BTreeSet::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected `key = value`, got {raw:?}", lineno + 1)))?;
            let (key, value) = (key.trim(), value.trim());
            if !seen.insert(key.to_string()) {
                return Err(Error::Config(format!("line {}: duplicate key {key}", lineno + 1)));
            }
            cfg.set(key, value).map_err(|e| match e {
                Error::Config(m) => Error::Config(format!("line {}: {m}", lineno + 1)),
                other => other,
            })?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        match key {
            "mode" => {
                self.mode = match value {
                    "pretrain" => Mode::Pretrain,
                    "seg" => Mode::Seg,
                    _ => return Err(Error::Config(format!("mode: expected pretrain or seg, got {value:?}"))),
                }
            }
            "seed" => self.seed = parse(key, value)?,
            "epochs" => self.epochs = parse(key, value)?,
            "max_steps" => self.max_steps = parse(key, value)?,
            "batch_size" => self.batch_size = parse(key, value)?,
            "base_lr" => self.base_lr = parse(key, value)?,
            "momentum" => self.momentum = parse(key, value)?,
            "weight_decay" => self.weight_decay = parse(key, value)?,
            "schedule" => {
                self.schedule = match value {
                    "auto" => None,
                    "cosine" => Some(Schedule::Cosine),
                    "constant" => Some(Schedule::Constant),
                    _ => return Err(Error::Config(format!("schedule: expected cosine, constant or auto, got {value:?}"))),
                }
            }
            "grid_size" => self.grid_size = parse(key, value)?,
            "distance" => {
                self.distance = match value {
                    "ce" => Distance::Ce,
                    "cosine" => Distance::Cosine,
                    _ => return Err(Error::Config(format!("distance: expected ce or cosine, got {value:?}"))),
                }
            }
            "tau" => self.tau = parse(key, value)?,
            "lambda_dense" => self.lambda_dense = parse_auto(key, value)?,
            "lambda_region" => self.lambda_region = parse(key, value)?,
            "lambda_seg" => self.lambda_seg = parse(key, value)?,
            "lambda_aux" => self.lambda_aux = parse_auto(key, value)?,
            "region_start_fraction" => self.region_start_fraction = parse(key, value)?,
            "region_detach" => self.region_detach = parse(key, value)?,
            "seg_cross_view" => self.seg_cross_view = parse(key, value)?,
            "grid_sampling" => {
                self.grid_sampling = match value {
                    "uniform" => GridSampling::Uniform,
                    "biased" => GridSampling::Biased,
                    _ => return Err(Error::Config(format!("grid_sampling: expected uniform or biased, got {value:?}"))),
                }
            }
            "hard_k" => self.hard_k = parse(key, value)?,
            "hard_beta" => self.hard_beta = parse(key, value)?,
            "stage_channels" => {
                self.stage_channels = value.split(',').map(|v| parse(key, v.trim())).collect::<Result<_>>()?;
            }
            "output_stride" => self.output_stride = parse_auto(key, value)?,
            "head_width" => self.head_width = parse(key, value)?,
            "num_classes" => self.num_classes = parse_auto(key, value)?,
            "n_aux" => self.n_aux = parse(key, value)?,
            "view_size" => self.view_size = parse_auto(key, value)?,
            "data" => self.data = (!value.is_empty()).then(|| value.to_string()),
            _ => return Err(Error::Config(format!("unknown key {key:?}"))),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if !(self.base_lr > 0.0 && self.base_lr.is_finite()) {
            return bad(format!("base_lr must be positive, got {}", self.base_lr));
        }
        if self.batch_size == 0 {
            return bad("batch_size must be at least 1".into());
        }
        if !(0.0..=1.0).contains(&self.region_start_fraction) {
            return bad(format!("region_start_fraction {} outside [0,1]", self.region_start_fraction));
        }
        if self.grid_size == 0 {
            return bad("grid_size must be at least 1".into());
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad(format!("momentum {} outside [0,1)", self.momentum));
        }
        if !(self.weight_decay >= 0.0) {
            return bad(format!("weight_decay must be non-negative, got {}", self.weight_decay));
        }
        if !(self.tau > 0.0) {
            return bad(format!("tau must be positive, got {}", self.tau));
        }
        if self.hard_k == 0 || !(0.0..=1.0).contains(&self.hard_beta) {
            return bad(format!("hard_k must be >= 1 and hard_beta in [0,1], got {} and {}", self.hard_k, self.hard_beta));
        }
        for (name, v) in [
            ("lambda_dense", self.lambda_dense),
            ("lambda_region", Some(self.lambda_region)),
            ("lambda_seg", Some(self.lambda_seg)),
            ("lambda_aux", self.lambda_aux),
        ] {
            if let Some(v) = v {
                if !(v >= 0.0 && v.is_finite()) {
                    return bad(format!("{name} must be non-negative, got {v}"));
                }
            }
        }
        Ok(())
    }

    pub fn to_text(&self) -> String {
        let schedule = self.schedule.map_or("auto", |s| match s {
            Schedule::Cosine => "cosine",
            Schedule::Constant => "constant",
        });
        let distance = match self.distance {
            Distance::Ce => "ce",
            Distance::Cosine => "cosine",
        };
        let sampling = match self.grid_sampling {
            GridSampling::Uniform => "uniform",
            GridSampling::Biased => "biased",
        };
        let channels: Vec<String> = self.stage_channels.iter().map(|c| c.to_string()).collect();
        let values: Vec<String> = vec![
            self.mode.name().into(),
            self.seed.to_string(),
            self.epochs.to_string(),
            self.max_steps.to_string(),
            self.batch_size.to_string(),
            self.base_lr.to_string(),
            self.momentum.to_string(),
            self.weight_decay.to_string(),
            schedule.into(),
            self.grid_size.to_string(),
            distance.into(),
            self.tau.to_string(),
            show_auto(&self.lambda_dense),
            self.lambda_region.to_string(),
            self.lambda_seg.to_string(),
            show_auto(&self.lambda_aux),
            self.region_start_fraction.to_string(),
            self.region_detach.to_string(),
            self.seg_cross_view.to_string(),
            sampling.into(),
            self.hard_k.to_string(),
            self.hard_beta.to_string(),
            channels.join(","),
            show_auto(&self.output_stride),
            self.head_width.to_string(),
            show_auto(&self.num_classes),
            self.n_aux.to_string(),
            show_auto(&self.view_size),
            self.data.clone().unwrap_or_default(),
        ];
        KEYS.iter().zip(values).map(|((k, _, _), v)| format!("{k} = {v}\n")).collect()
    }

    /// Fills every `auto` for a dataset with `dataset_classes` classes
    /// (0 when unlabeled) and images of side `image_size`.
    pub fn resolve(&self, dataset_classes: usize, image_size: usize) -> Result<TrainConfig> {
        let mut c = self.clone();
        let seg = c.mode == Mode::Seg;
        c.schedule.get_or_insert(if seg { Schedule::Constant } else { Schedule::Cosine });
        c.output_stride.get_or_insert(if seg { 2 } else { 8 });
        c.view_size.get_or_insert(image_size);
        if seg {
            if dataset_classes == 0 {
                return Err(Error::Config("seg mode needs a labeled dataset to fix the class count".into()));
            }
            let n = *c.num_classes.get_or_insert(dataset_classes);
            if n != dataset_classes {
                return Err(Error::Config(format!("num_classes = {n} but the dataset has {dataset_classes} classes")));
            }
            let (l1, l4) = seg_lambdas(n, c.n_aux)?;
            c.lambda_dense.get_or_insert(l1);
            c.lambda_aux.get_or_insert(l4);
        } else {
            c.num_classes.get_or_insert(32);
            c.lambda_dense.get_or_insert(1.0);
            c.lambda_aux.get_or_insert(0.0);
        }
        c.model_config()?.validate()?;
        Ok(c)
    }

    pub fn is_resolved(&self) -> bool {
        self.schedule.is_some()
            && self.output_stride.is_some()
            && self.view_size.is_some()
            && self.num_classes.is_some()
            && self.lambda_dense.is_some()
            && self.lambda_aux.is_some()
    }

    fn require_resolved(&self) -> Result<()> {
        if self.is_resolved() {
            Ok(())
        } else {
            Err(Error::Usage("configuration still contains `auto` values".into()))
        }
    }

    pub fn model_config(&self) -> Result<ModelConfig> {
        self.require_resolved()?;
        Ok(ModelConfig {
            mode: self.mode,
            input_size: self.view_size.unwrap(),
            stage_channels: self.stage_channels.clone(),
            output_stride: self.output_stride.unwrap(),
            head_width: self.head_width,
            num_classes: self.num_classes.unwrap(),
            n_aux: self.n_aux,
        })
    }

    pub fn loss_weights(&self) -> Result<LossWeights> {
        self.require_resolved()?;
        let w = LossWeights {
            lambda_dense: self.lambda_dense.unwrap(),
            lambda_region: self.lambda_region,
            lambda_seg: if self.mode == Mode::Seg { self.lambda_seg } else { 0.0 },
            lambda_aux: self.lambda_aux.unwrap(),
        };
        w.validate()?;
        Ok(w)
    }
}
