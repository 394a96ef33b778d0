//! Encoder, dense heads, region heads and the global branch.
//!
//! Parameters live in a name-keyed store; a forward pass binds each one it
//! touches into a [`Ctx`] graph, so gradients can be read back by name.

mod checkpoint;

use std::collections::BTreeMap;

pub use checkpoint::{load_checkpoint, save_checkpoint, CheckpointParts, META_CONFIG};

use crate::error::{Error, Result};
use crate::geometry::pixel_center_coords;
use crate::objectives::argmax_channels;
use crate::rng;
use crate::scalar::Scalar;
use crate::tensor::{grid_sample_value, Graph, Tensor, Var};

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;
/// Minimum hidden width of a bottleneck predictor.
pub const MIN_BOTTLENECK: usize = 8;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Pretrain,
    Seg,
}

impl Mode {
    pub fn name(self) -> &'static str {
        match self {
            Mode::Pretrain => "pretrain",
            Mode::Seg => "seg",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub mode: Mode,
    pub input_size: usize,
    pub stage_channels: Vec<usize>,
    pub output_stride: usize,
    pub head_width: usize,
    /// Output channels of the dense projector (pseudo-categories or classes).
    pub num_classes: usize,
    /// Output channels of the auxiliary dense head (seg mode only).
    pub n_aux: usize,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let os = self.output_stride;
        if os == 0 || !os.is_power_of_two() {
            return Err(Error::Config(format!("output_stride {os} must be a power of two")));
        }
        let reductions = os.trailing_zeros() as usize;
        if reductions > self.stage_channels.len() {
            return Err(Error::Config(format!(
                "output_stride {os} needs {reductions} stride-2 stages, only {} configured",
                self.stage_channels.len()
            )));
        }
        if self.stage_channels.is_empty() || self.stage_channels.contains(&0) {
            return Err(Error::Config("stage_channels must be non-empty and positive".into()));
        }
        if self.input_size == 0 || !self.input_size.is_multiple_of(os) {
            return Err(Error::Config(format!("input size {} not divisible by output_stride {os}", self.input_size)));
        }
        if self.head_width == 0 || self.num_classes == 0 {
            return Err(Error::Config("head_width and num_classes must be positive".into()));
        }
        if self.mode == Mode::Seg && self.n_aux == 0 {
            return Err(Error::Config("n_aux must be positive in seg mode".into()));
        }
        Ok(())
    }

    pub fn encoder_channels(&self) -> usize {
        *self.stage_channels.last().expect("validated")
    }

    pub fn feature_size(&self) -> usize {
        self.input_size / self.output_stride
    }

    pub fn has_aux(&self) -> bool {
        self.mode == Mode::Seg
    }

    pub fn has_global(&self) -> bool {
        self.mode == Mode::Pretrain
    }

    /// Closed-form trainable parameter count.
    pub fn param_count(&self) -> usize {
        // three layers, first two with affine BN, last BN affine-free
        let projector = |cin: usize, w: usize, out: usize| cin * w + 2 * w + w * w + 2 * w + w * out;
        // two layers, affine BN in between, biased output
        let predictor = |n: usize| {
            let hd = bottleneck_width(n);
            n * hd + 2 * hd + hd * n + n
        };
        let mut cin = 3;
        let mut total = 0;
        for &c in &self.stage_channels {
            total += 9 * cin * c + 2 * c;
            cin = c;
        }
        let (c, w) = (self.encoder_channels(), self.head_width);
        total += projector(c, w, self.num_classes) + predictor(self.num_classes);
        total += projector(c, w, w) + predictor(w);
        if self.has_aux() {
            total += projector(c, w, self.n_aux) + predictor(self.n_aux);
        }
        if self.has_global() {
            total += projector(c, w, w) + predictor(w);
        }
        total
    }
}

/// Hidden width of a bottleneck predictor over `n` channels.
pub fn bottleneck_width(n: usize) -> usize {
    (n / 4).max(MIN_BOTTLENECK)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DenseHead {
    Main,
    Aux,
}

impl DenseHead {
    fn prefixes(self) -> (&'static str, &'static str) {
        match self {
            DenseHead::Main => ("proj", "pred"),
            DenseHead::Aux => ("aux_proj", "aux_pred"),
        }
    }
}

/// Batch statistics observed by one train-mode batch norm.
#[derive(Clone, Debug)]
pub struct BnUpdate<T> {
    pub name: String,
    pub mean: Vec<T>,
    pub var: Vec<T>,
}

/// One forward evaluation: the graph plus the parameter bindings it used.
pub struct Ctx<T: Scalar> {
    pub graph: Graph<T>,
    /// Batch norm uses batch statistics (train) or running statistics (eval).
    pub train_bn: bool,
    trainable: bool,
    bound: BTreeMap<String, Var>,
    bn_updates: Vec<BnUpdate<T>>,
}

impl<T: Scalar> Ctx<T> {
    pub fn new(train_bn: bool, trainable: bool) -> Self {
        Ctx { graph: Graph::new(), train_bn, trainable, bound: BTreeMap::new(), bn_updates: Vec::new() }
    }

    /// Batch statistics, trainable parameters.
    pub fn train() -> Self {
        Self::new(true, true)
    }

    /// Running statistics, constant parameters.
    pub fn eval() -> Self {
        Self::new(false, false)
    }

    pub fn bound(&self) -> &BTreeMap<String, Var> {
        &self.bound
    }

    pub fn take_bn_updates(&mut self) -> Vec<BnUpdate<T>> {
        std::mem::take(&mut self.bn_updates)
    }

    /// Gradient of every bound parameter after `graph.backward`.
    pub fn param_grads(&self) -> BTreeMap<String, Tensor<T>> {
        self.bound
            .iter()
            .filter_map(|(name, &v)| self.graph.grad(v).map(|g| (name.clone(), g.clone())))
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DenseSiamModel<T: Scalar> {
    pub config: ModelConfig,
    params: BTreeMap<String, Tensor<T>>,
    /// Batch-norm running statistics; never trained or decayed.
    buffers: BTreeMap<String, Tensor<T>>,
}

impl<T: Scalar> DenseSiamModel<T> {
    /// Weights ~ N(0, sqrt(2/fan_in)); BN scale 1, shift 0; biases 0;
    /// running mean 0 and variance 1.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut m = DenseSiamModel { config, params: BTreeMap::new(), buffers: BTreeMap::new() };
        let cfg = m.config.clone();
        let mut cin = 3;
        for (i, &c) in cfg.stage_channels.iter().enumerate() {
            m.init_conv(&format!("encoder.stage{i}.conv"), c, cin, 3, false, seed);
            m.init_bn(&format!("encoder.stage{i}.bn"), c, true);
            cin = c;
        }
        let (c, w) = (cfg.encoder_channels(), cfg.head_width);
        m.init_projector("proj", c, w, cfg.num_classes, true, seed);
        m.init_predictor("pred", cfg.num_classes, true, seed);
        m.init_projector("region_proj", c, w, w, false, seed);
        m.init_predictor("region_pred", w, false, seed);
        if cfg.has_aux() {
            m.init_projector("aux_proj", c, w, cfg.n_aux, true, seed);
            m.init_predictor("aux_pred", cfg.n_aux, true, seed);
        }
        if cfg.has_global() {
            m.init_projector("global_proj", c, w, w, false, seed);
            m.init_predictor("global_pred", w, false, seed);
        }
        Ok(m)
    }

    fn he_normal(name: &str, shape: &[usize], fan_in: usize, seed: u64) -> Tensor<T> {
        let mut r = rng::stream(seed, &format!("init:{name}"), &[]);
        Tensor::randn(shape, (2.0 / fan_in as f64).sqrt(), &mut r)
    }

    fn init_conv(&mut self, prefix: &str, cout: usize, cin: usize, k: usize, bias: bool, seed: u64) {
        let name = format!("{prefix}.weight");
        let w = Self::he_normal(&name, &[cout, cin, k, k], cin * k * k, seed);
        self.params.insert(name, w);
        if bias {
            self.params.insert(format!("{prefix}.bias"), Tensor::zeros(&[cout]));
        }
    }

    /// Linear weights are stored `[in, out]`.
    fn init_linear(&mut self, prefix: &str, cin: usize, cout: usize, bias: bool, seed: u64) {
        let name = format!("{prefix}.weight");
        let w = Self::he_normal(&name, &[cin, cout], cin, seed);
        self.params.insert(name, w);
        if bias {
            self.params.insert(format!("{prefix}.bias"), Tensor::zeros(&[cout]));
        }
    }

    fn init_bn(&mut self, prefix: &str, c: usize, affine: bool) {
        if affine {
            self.params.insert(format!("{prefix}.weight"), Tensor::ones(&[c]));
            self.params.insert(format!("{prefix}.bias"), Tensor::zeros(&[c]));
        }
        self.buffers.insert(format!("{prefix}.running_mean"), Tensor::zeros(&[c]));
        self.buffers.insert(format!("{prefix}.running_var"), Tensor::ones(&[c]));
    }

    fn init_layer(&mut self, prefix: &str, cin: usize, cout: usize, dense: bool, bias: bool, seed: u64) {
        if dense {
            self.init_conv(&format!("{prefix}.conv"), cout, cin, 1, bias, seed);
        } else {
            self.init_linear(&format!("{prefix}.linear"), cin, cout, bias, seed);
        }
    }

    fn init_projector(&mut self, prefix: &str, cin: usize, w: usize, out: usize, dense: bool, seed: u64) {
        self.init_layer(&format!("{prefix}.l0"), cin, w, dense, false, seed);
        self.init_bn(&format!("{prefix}.l0.bn"), w, true);
        self.init_layer(&format!("{prefix}.l1"), w, w, dense, false, seed);
        self.init_bn(&format!("{prefix}.l1.bn"), w, true);
        self.init_layer(&format!("{prefix}.l2"), w, out, dense, false, seed);
        self.init_bn(&format!("{prefix}.l2.bn"), out, false);
    }

    fn init_predictor(&mut self, prefix: &str, n: usize, dense: bool, seed: u64) {
        let hd = bottleneck_width(n);
        self.init_layer(&format!("{prefix}.l0"), n, hd, dense, false, seed);
        self.init_bn(&format!("{prefix}.l0.bn"), hd, true);
        self.init_layer(&format!("{prefix}.l1"), hd, n, dense, true, seed);
    }

    // ---- parameter access ---------------------------------------------------

    pub fn params(&self) -> &BTreeMap<String, Tensor<T>> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut BTreeMap<String, Tensor<T>> {
        &mut self.params
    }

    pub fn buffers(&self) -> &BTreeMap<String, Tensor<T>> {
        &self.buffers
    }

    pub fn buffers_mut(&mut self) -> &mut BTreeMap<String, Tensor<T>> {
        &mut self.buffers
    }

    pub fn num_params(&self) -> usize {
        self.params.values().map(|t| t.numel()).sum()
    }

    pub fn param(&self, name: &str) -> Result<&Tensor<T>> {
        self.params.get(name).ok_or_else(|| Error::Usage(format!("unknown parameter {name}")))
    }

    fn bind(&self, ctx: &mut Ctx<T>, name: &str) -> Result<Var> {
        if let Some(&v) = ctx.bound.get(name) {
            return Ok(v);
        }
        let t = self.param(name)?.clone();
        let v = if ctx.trainable { ctx.graph.leaf(t) } else { ctx.graph.constant(t) };
        ctx.bound.insert(name.to_string(), v);
        Ok(v)
    }

    /// Folds a set of batch statistics into the running estimates:
    /// `r ← (1−m)·r + m·batch`, variance unbiased.
    pub fn apply_bn_updates(&mut self, updates: &[BnUpdate<T>], momentum: T) -> Result<()> {
        for u in updates {
            for (suffix, stat) in [("running_mean", &u.mean), ("running_var", &u.var)] {
                let key = format!("{}.{suffix}", u.name);
                let buf = self.buffers.get_mut(&key).ok_or_else(|| Error::Usage(format!("unknown buffer {key}")))?;
                for (r, &s) in buf.data_mut().iter_mut().zip(stat) {
                    *r = (T::one() - momentum) * *r + momentum * s;
                }
            }
        }
        Ok(())
    }

    // ---- layers --------------------------------------------------------------

    fn conv(&self, ctx: &mut Ctx<T>, prefix: &str, x: Var, stride: usize, pad: usize) -> Result<Var> {
        let w = self.bind(ctx, &format!("{prefix}.weight"))?;
        let y = ctx.graph.conv2d(x, w, stride, pad)?;
        self.maybe_bias(ctx, prefix, y)
    }

    fn linear(&self, ctx: &mut Ctx<T>, prefix: &str, x: Var) -> Result<Var> {
        let w = self.bind(ctx, &format!("{prefix}.weight"))?;
        let y = ctx.graph.matmul(x, w)?;
        self.maybe_bias(ctx, prefix, y)
    }

    fn maybe_bias(&self, ctx: &mut Ctx<T>, prefix: &str, y: Var) -> Result<Var> {
        let bias = format!("{prefix}.bias");
        if !self.params.contains_key(&bias) {
            return Ok(y);
        }
        let b = self.bind(ctx, &bias)?;
        ctx.graph.channel_affine(y, None, Some(b))
    }

    /// Batch norm over axis 1; affine when the store holds scale/shift.
    fn bn(&self, ctx: &mut Ctx<T>, prefix: &str, x: Var) -> Result<Var> {
        let eps = T::from_f64_lossy(BN_EPS);
        let normed = if ctx.train_bn {
            let (y, mean, var) = ctx.graph.batch_norm(x, eps)?;
            ctx.bn_updates.push(BnUpdate { name: prefix.to_string(), mean, var });
            y
        } else {
            let rm = &self.buffers[&format!("{prefix}.running_mean")];
            let rv = &self.buffers[&format!("{prefix}.running_var")];
            let scale: Vec<T> = rv.data().iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
            let shift = rm.data().iter().zip(&scale).map(|(&m, &s)| -m * s).collect();
            ctx.graph.channel_affine_const(x, scale, shift)?
        };
        let weight = format!("{prefix}.weight");
        if !self.params.contains_key(&weight) {
            return Ok(normed);
        }
        let (g, b) = (self.bind(ctx, &weight)?, self.bind(ctx, &format!("{prefix}.bias"))?);
        ctx.graph.channel_affine(normed, Some(g), Some(b))
    }

    fn layer(&self, ctx: &mut Ctx<T>, prefix: &str, x: Var, dense: bool) -> Result<Var> {
        if dense {
            self.conv(ctx, &format!("{prefix}.conv"), x, 1, 0)
        } else {
            self.linear(ctx, &format!("{prefix}.linear"), x)
        }
    }

    fn projector(&self, ctx: &mut Ctx<T>, prefix: &str, x: Var, dense: bool) -> Result<Var> {
        let mut h = x;
        for l in 0..3 {
            let name = format!("{prefix}.l{l}");
            h = self.layer(ctx, &name, h, dense)?;
            h = self.bn(ctx, &format!("{name}.bn"), h)?;
            if l < 2 {
                h = ctx.graph.relu(h);
            }
        }
        Ok(h)
    }

    fn predictor(&self, ctx: &mut Ctx<T>, prefix: &str, x: Var, dense: bool) -> Result<Var> {
        let h = self.layer(ctx, &format!("{prefix}.l0"), x, dense)?;
        let h = self.bn(ctx, &format!("{prefix}.l0.bn"), h)?;
        let h = ctx.graph.relu(h);
        self.layer(ctx, &format!("{prefix}.l1"), h, dense)
    }

    // ---- components ------------------------------------------------------------

    /// `[B,3,S,S]` → `[B,C_enc,S/os,S/os]`.
    pub fn encoder(&self, ctx: &mut Ctx<T>, x: Var) -> Result<Var> {
        let s = ctx.graph.shape(x).to_vec();
        if s.len() != 4 || s[1] != 3 {
            return Err(Error::Dimension(format!("encoder input {s:?}, expected [B,3,S,S]")));
        }
        let os = self.config.output_stride;
        if !s[2].is_multiple_of(os) || !s[3].is_multiple_of(os) {
            return Err(Error::Config(format!("input {}x{} not divisible by output_stride {os}", s[2], s[3])));
        }
        let reductions = os.trailing_zeros() as usize;
        let mut h = x;
        for i in 0..self.config.stage_channels.len() {
            let stride = if i < reductions { 2 } else { 1 };
            h = self.conv(ctx, &format!("encoder.stage{i}.conv"), h, stride, 1)?;
            h = self.bn(ctx, &format!("encoder.stage{i}.bn"), h)?;
            h = ctx.graph.relu(h);
        }
        Ok(h)
    }

    fn check_head(&self, head: DenseHead) -> Result<()> {
        if head == DenseHead::Aux && !self.config.has_aux() {
            return Err(Error::Usage("auxiliary head exists only in seg mode".into()));
        }
        Ok(())
    }

    /// Dense projector g (or its auxiliary twin): spatial dims preserved.
    pub fn dense_projector(&self, ctx: &mut Ctx<T>, head: DenseHead, feat: Var) -> Result<Var> {
        self.check_head(head)?;
        self.projector(ctx, head.prefixes().0, feat, true)
    }

    /// Dense predictor h (or its auxiliary twin).
    pub fn dense_predictor(&self, ctx: &mut Ctx<T>, head: DenseHead, z: Var) -> Result<Var> {
        self.check_head(head)?;
        self.predictor(ctx, head.prefixes().1, z, true)
    }

    /// Region heads on `e[B,N,C_enc]`: returns `(u, v) = (h′(g′(e)), g′(e))`,
    /// each `[B,N,D]`, applied row-wise.
    pub fn region_heads(&self, ctx: &mut Ctx<T>, e: Var) -> Result<(Var, Var)> {
        let s = ctx.graph.shape(e).to_vec();
        if s.len() != 3 {
            return Err(Error::Dimension(format!("region embeddings {s:?}, expected [B,N,C]")));
        }
        let rows = ctx.graph.reshape(e, &[s[0] * s[1], s[2]])?;
        let v = self.projector(ctx, "region_proj", rows, false)?;
        let u = self.predictor(ctx, "region_pred", v, false)?;
        let d = self.config.head_width;
        let u = ctx.graph.reshape(u, &[s[0], s[1], d])?;
        let v = ctx.graph.reshape(v, &[s[0], s[1], d])?;
        Ok((u, v))
    }

    /// Global average pooling followed by the image-level projector and
    /// predictor; returns `(p_g, z_g)`, each `[B,D]`.
    pub fn global_branch(&self, ctx: &mut Ctx<T>, feat: Var) -> Result<(Var, Var)> {
        if !self.config.has_global() {
            return Err(Error::Usage("global branch exists only in pretrain mode".into()));
        }
        let pooled = global_avg_pool(&mut ctx.graph, feat)?;
        let z = self.projector(ctx, "global_proj", pooled, false)?;
        let p = self.predictor(ctx, "global_pred", z, false)?;
        Ok((p, z))
    }
}

impl<T: Scalar> DenseSiamModel<T> {
    /// Inference path: encoder and projector with running BN statistics,
    /// upsampled bilinearly to the input lattice, then the channel argmax.
    /// `[B,3,H,W]` → one `H·W` label map per image.
    pub fn segment(&self, images: &Tensor<T>) -> Result<Vec<Vec<usize>>> {
        let s = images.shape().to_vec();
        if s.len() != 4 {
            return Err(Error::Dimension(format!("segment input {s:?}, expected [B,3,H,W]")));
        }
        let mut ctx = Ctx::eval();
        let x = ctx.graph.constant(images.clone());
        let f = self.encoder(&mut ctx, x)?;
        let z = self.dense_projector(&mut ctx, DenseHead::Main, f)?;
        let lattice = pixel_center_coords::<T>(s[2], s[3]).index_first(0);
        let coords = Tensor::stack(&vec![lattice; s[0]])?;
        let up = grid_sample_value(ctx.graph.value(z), &coords);
        Ok(argmax_channels(&up).chunks(s[2] * s[3]).map(<[usize]>::to_vec).collect())
    }

    /// [`Self::segment`] over a whole image list in chunks of `batch`.
    pub fn segment_all(&self, images: &[Tensor<f32>], batch: usize) -> Result<Vec<Vec<usize>>> {
        let mut out = Vec::with_capacity(images.len());
        for chunk in images.chunks(batch.max(1)) {
            out.extend(self.segment(&Tensor::stack(chunk)?.cast::<T>())?);
        }
        Ok(out)
    }
}

/// `[B,C,H,W]` → `[B,C]` spatial mean.
pub fn global_avg_pool<T: Scalar>(g: &mut Graph<T>, feat: Var) -> Result<Var> {
    let s = g.shape(feat).to_vec();
    if s.len() != 4 {
        return Err(Error::Dimension(format!("global pooling needs [B,C,H,W], got {s:?}")));
    }
    let flat = g.reshape(feat, &[s[0], s[1], s[2] * s[3]])?;
    let summed = g.sum_axis(flat, 2)?;
    Ok(g.scale(summed, T::one() / T::from_usize(s[2] * s[3]).unwrap()))
}
