//! Tape-based reverse-mode autodiff.
//!
//! Nodes are appended in evaluation order, so the node index is already a
//! topological order and `backward` is a single reverse sweep.

use super::kernels::{self, ConvGeom, SampleGeom};
use super::{split_axis, Tensor};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    Constant,
    StopGradient,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    AddScalar(Var),
    Relu(Var),
    Exp(Var),
    Log(Var),
    Sum(Var),
    SumAxis { input: Var, axis: usize },
    Reshape(Var),
    Permute { input: Var, perm: Vec<usize> },
    MatMul { a: Var, b: Var },
    Conv2d { input: Var, weight: Var, geom: ConvGeom },
    BatchNorm { input: Var, inv_std: Vec<T> },
    ChannelAffine { input: Var, scale: Option<Var>, shift: Option<Var>, scale_const: Option<Vec<T>> },
    Softmax { input: Var, axis: usize },
    LogSoftmax { input: Var, axis: usize },
    L2Normalize { input: Var, axis: usize, eps: T, norms: Vec<T> },
    GridSample { field: Var, coords: Var },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// A computation graph owning every intermediate value of one evaluation.
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
    grads: Vec<Option<Tensor<T>>>,
    zero_norm_hits: usize,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn same_shape<T: Scalar>(op: &str, a: &Tensor<T>, b: &Tensor<T>) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::Dimension(format!("{op}: {:?} vs {:?}", a.shape(), b.shape())));
    }
    Ok(())
}

fn check_axis(op: &str, shape: &[usize], axis: usize) -> Result<()> {
    if axis >= shape.len() {
        return Err(Error::Usage(format!("{op}: axis {axis} invalid for shape {shape:?}")));
    }
    Ok(())
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Graph { nodes: Vec::new(), grads: Vec::new(), zero_norm_hits: 0 }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, op, requires_grad });
        self.grads.push(None);
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// A trainable input whose gradient is accumulated by [`Graph::backward`].
    pub fn leaf(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, true)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Constant, false)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.rg(v)
    }

    /// Accumulated gradient of a leaf, if any backward pass reached it.
    pub fn grad(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads[v.0].as_ref()
    }

    pub fn zero_grad(&mut self) {
        self.grads.iter_mut().for_each(|g| *g = None);
    }

    /// Number of zero vectors seen by `l2_normalize` so far.
    pub fn zero_norm_hits(&self) -> usize {
        self.zero_norm_hits
    }

    // ---- elementwise -------------------------------------------------------

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        same_shape("add", va, vb)?;
        let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| x + y).collect();
        let out = Tensor::from_parts(va.shape().to_vec(), data);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::Add(a, b), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        same_shape("sub", va, vb)?;
        let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| x - y).collect();
        let out = Tensor::from_parts(va.shape().to_vec(), data);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::Sub(a, b), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        same_shape("mul", va, vb)?;
        let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| x * y).collect();
        let out = Tensor::from_parts(va.shape().to_vec(), data);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::Mul(a, b), rg))
    }

    pub fn scale(&mut self, a: Var, s: T) -> Var {
        let out = self.value(a).map(|x| x * s);
        let rg = self.rg(a);
        self.push(out, Op::Scale(a, s), rg)
    }

    pub fn neg(&mut self, a: Var) -> Var {
        self.scale(a, -T::one())
    }

    pub fn add_scalar(&mut self, a: Var, s: T) -> Var {
        let out = self.value(a).map(|x| x + s);
        let rg = self.rg(a);
        self.push(out, Op::AddScalar(a), rg)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|x| x.max(T::zero()));
        let rg = self.rg(a);
        self.push(out, Op::Relu(a), rg)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|x| x.exp());
        let rg = self.rg(a);
        self.push(out, Op::Exp(a), rg)
    }

    pub fn log(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|x| x.ln());
        let rg = self.rg(a);
        self.push(out, Op::Log(a), rg)
    }

    /// Forward identity; contributes no gradient to `a`.
    pub fn stop_gradient(&mut self, a: Var) -> Var {
        let out = self.value(a).clone();
        self.push(out, Op::StopGradient, false)
    }

    // ---- reductions and shape ---------------------------------------------

    pub fn sum(&mut self, a: Var) -> Var {
        let s: T = self.value(a).data().iter().copied().sum();
        let rg = self.rg(a);
        self.push(Tensor::scalar(s), Op::Sum(a), rg)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = T::from_usize(self.value(a).numel()).unwrap();
        let s = self.sum(a);
        self.scale(s, T::one() / n)
    }

    /// Sums over `axis`, removing it from the shape.
    pub fn sum_axis(&mut self, a: Var, axis: usize) -> Result<Var> {
        let va = self.value(a);
        check_axis("sum_axis", va.shape(), axis)?;
        let (outer, len, inner) = split_axis(va.shape(), axis);
        let mut data = vec![T::zero(); outer * inner];
        for o in 0..outer {
            for k in 0..len {
                let src = &va.data()[(o * len + k) * inner..(o * len + k + 1) * inner];
                for (d, &s) in data[o * inner..(o + 1) * inner].iter_mut().zip(src) {
                    *d += s;
                }
            }
        }
        let mut shape = va.shape().to_vec();
        shape.remove(axis);
        let rg = self.rg(a);
        Ok(self.push(Tensor::from_parts(shape, data), Op::SumAxis { input: a, axis }, rg))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(a).clone().reshape(shape)?;
        let rg = self.rg(a);
        Ok(self.push(out, Op::Reshape(a), rg))
    }

    pub fn permute(&mut self, a: Var, perm: &[usize]) -> Result<Var> {
        let va = self.value(a);
        let rank = va.rank();
        let mut seen = vec![false; rank];
        if perm.len() != rank || perm.iter().any(|&p| p >= rank || std::mem::replace(&mut seen[p], true)) {
            return Err(Error::Usage(format!("invalid permutation {perm:?} for rank {rank}")));
        }
        let (shape, data) = kernels::permute(va.shape(), perm, va.data());
        let rg = self.rg(a);
        Ok(self.push(Tensor::from_parts(shape, data), Op::Permute { input: a, perm: perm.to_vec() }, rg))
    }

    /// Swaps the last two axes.
    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let rank = self.value(a).rank();
        if rank < 2 {
            return Err(Error::Usage("transpose needs rank >= 2".into()));
        }
        let mut perm: Vec<usize> = (0..rank).collect();
        perm.swap(rank - 2, rank - 1);
        self.permute(a, &perm)
    }

    /// Matrix product of `[M,K]·[K,N]` or batched `[B,M,K]·[B,K,N]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let (batch, m, k, n, out_shape) = match (sa.as_slice(), sb.as_slice()) {
            ([m, k], [k2, n]) if k == k2 => (1, *m, *k, *n, vec![*m, *n]),
            ([b1, m, k], [b2, k2, n]) if k == k2 && b1 == b2 => (*b1, *m, *k, *n, vec![*b1, *m, *n]),
            _ => return Err(Error::Dimension(format!("matmul: {sa:?} x {sb:?}"))),
        };
        let (va, vb) = (self.value(a).data(), self.value(b).data());
        let mut out = vec![T::zero(); batch * m * n];
        for i in 0..batch {
            T::gemm(
                m,
                k,
                n,
                &va[i * m * k..(i + 1) * m * k],
                k as isize,
                1,
                &vb[i * k * n..(i + 1) * k * n],
                n as isize,
                1,
                false,
                &mut out[i * m * n..(i + 1) * m * n],
                n as isize,
                1,
            );
        }
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::from_parts(out_shape, out), Op::MatMul { a, b }, rg))
    }

    // ---- network primitives ------------------------------------------------

    /// 2-D convolution of `[B,Cin,H,W]` by `[Cout,Cin,kh,kw]` without bias.
    pub fn conv2d(&mut self, input: Var, weight: Var, stride: usize, padding: usize) -> Result<Var> {
        let (si, sw) = (self.shape(input), self.shape(weight));
        if si.len() != 4 || sw.len() != 4 {
            return Err(Error::Dimension(format!("conv2d: input {si:?}, weight {sw:?}")));
        }
        if si[1] != sw[1] {
            return Err(Error::Dimension(format!(
                "conv2d: input has {} channels, weight expects {}",
                si[1], sw[1]
            )));
        }
        if stride == 0 || si[2] + 2 * padding < sw[2] || si[3] + 2 * padding < sw[3] {
            return Err(Error::Usage(format!("conv2d: kernel {sw:?} does not fit input {si:?}")));
        }
        let geom = ConvGeom {
            batch: si[0],
            cin: si[1],
            h: si[2],
            w: si[3],
            cout: sw[0],
            kh: sw[2],
            kw: sw[3],
            stride,
            pad: padding,
            ho: (si[2] + 2 * padding - sw[2]) / stride + 1,
            wo: (si[3] + 2 * padding - sw[3]) / stride + 1,
        };
        let out = kernels::conv2d_forward(&geom, self.value(input).data(), self.value(weight).data());
        let shape = vec![geom.batch, geom.cout, geom.ho, geom.wo];
        let rg = self.rg(input) || self.rg(weight);
        Ok(self.push(Tensor::from_parts(shape, out), Op::Conv2d { input, weight, geom }, rg))
    }

    /// Training-mode batch normalization over every axis except 1, without
    /// affine parameters. Returns the normalized node together with the batch
    /// mean and unbiased variance (for running-statistics updates).
    pub fn batch_norm(&mut self, input: Var, eps: T) -> Result<(Var, Vec<T>, Vec<T>)> {
        let v = self.value(input);
        if v.rank() < 2 {
            return Err(Error::Dimension(format!("batch_norm: rank {} input", v.rank())));
        }
        let (outer, c, inner) = split_axis(v.shape(), 1);
        let count = outer * inner;
        if count < 2 {
            return Err(Error::Usage("batch_norm in train mode needs >= 2 values per channel".into()));
        }
        let (mean, var) = kernels::channel_stats(v.shape(), v.data());
        let inv_std: Vec<T> = var.iter().map(|&s| T::one() / (s + eps).sqrt()).collect();
        let mut out = v.data().to_vec();
        for o in 0..outer {
            for ch in 0..c {
                let base = (o * c + ch) * inner;
                for x in &mut out[base..base + inner] {
                    *x = (*x - mean[ch]) * inv_std[ch];
                }
            }
        }
        let n = T::from_usize(count).unwrap();
        let unbiased = var.iter().map(|&s| s * n / (n - T::one())).collect();
        let shape = v.shape().to_vec();
        let rg = self.rg(input);
        let node = self.push(Tensor::from_parts(shape, out), Op::BatchNorm { input, inv_std }, rg);
        Ok((node, mean, unbiased))
    }

    /// `x·scale[c] + shift[c]` broadcast along axis 1.
    pub fn channel_affine(&mut self, input: Var, scale: Option<Var>, shift: Option<Var>) -> Result<Var> {
        let c = self.channels_of(input)?;
        for p in scale.iter().chain(shift.iter()) {
            if self.shape(*p) != [c] {
                return Err(Error::Dimension(format!(
                    "channel_affine: parameter {:?} for {c} channels",
                    self.shape(*p)
                )));
            }
        }
        let sc = scale.map(|s| self.value(s).data().to_vec());
        let sh = shift.map(|s| self.value(s).data().to_vec());
        let out = self.affine_value(input, sc.as_deref(), sh.as_deref());
        let rg = self.rg(input) || scale.is_some_and(|s| self.rg(s)) || shift.is_some_and(|s| self.rg(s));
        Ok(self.push(out, Op::ChannelAffine { input, scale, shift, scale_const: None }, rg))
    }

    /// `x·scale[c] + shift[c]` with constant per-channel coefficients.
    pub fn channel_affine_const(&mut self, input: Var, scale: Vec<T>, shift: Vec<T>) -> Result<Var> {
        let c = self.channels_of(input)?;
        if scale.len() != c || shift.len() != c {
            return Err(Error::Dimension("channel_affine_const: coefficient length".into()));
        }
        let out = self.affine_value(input, Some(&scale), Some(&shift));
        let rg = self.rg(input);
        Ok(self.push(out, Op::ChannelAffine { input, scale: None, shift: None, scale_const: Some(scale) }, rg))
    }

    fn channels_of(&self, v: Var) -> Result<usize> {
        let s = self.shape(v);
        if s.len() < 2 {
            return Err(Error::Dimension(format!("expected rank >= 2, got {s:?}")));
        }
        Ok(s[1])
    }

    fn affine_value(&self, input: Var, scale: Option<&[T]>, shift: Option<&[T]>) -> Tensor<T> {
        let v = self.value(input);
        let (outer, c, inner) = split_axis(v.shape(), 1);
        let mut out = v.data().to_vec();
        for o in 0..outer {
            for ch in 0..c {
                let base = (o * c + ch) * inner;
                let s = scale.map_or(T::one(), |s| s[ch]);
                let b = shift.map_or(T::zero(), |b| b[ch]);
                for x in &mut out[base..base + inner] {
                    *x = *x * s + b;
                }
            }
        }
        Tensor::from_parts(v.shape().to_vec(), out)
    }

    pub fn softmax(&mut self, input: Var, axis: usize) -> Result<Var> {
        let v = self.value(input);
        check_axis("softmax", v.shape(), axis)?;
        let out = kernels::softmax_forward(v.shape(), axis, v.data(), false);
        let out = Tensor::from_parts(v.shape().to_vec(), out);
        let rg = self.rg(input);
        Ok(self.push(out, Op::Softmax { input, axis }, rg))
    }

    pub fn log_softmax(&mut self, input: Var, axis: usize) -> Result<Var> {
        let v = self.value(input);
        check_axis("log_softmax", v.shape(), axis)?;
        let out = kernels::softmax_forward(v.shape(), axis, v.data(), true);
        let out = Tensor::from_parts(v.shape().to_vec(), out);
        let rg = self.rg(input);
        Ok(self.push(out, Op::LogSoftmax { input, axis }, rg))
    }

    /// `x / max(‖x‖₂, eps)` along `axis`; zero vectors map to zero.
    pub fn l2_normalize(&mut self, input: Var, axis: usize, eps: T) -> Result<Var> {
        let v = self.value(input);
        check_axis("l2_normalize", v.shape(), axis)?;
        let (outer, len, inner) = split_axis(v.shape(), axis);
        let mut norms = vec![T::zero(); outer * inner];
        let mut out = v.data().to_vec();
        let mut hits = 0;
        for o in 0..outer {
            for i in 0..inner {
                let idx = |k: usize| (o * len + k) * inner + i;
                let mut s = T::zero();
                for k in 0..len {
                    s += out[idx(k)] * out[idx(k)];
                }
                let norm = s.sqrt();
                if norm <= eps {
                    hits += 1;
                }
                let d = norm.max(eps);
                for k in 0..len {
                    out[idx(k)] = out[idx(k)] / d;
                }
                norms[o * inner + i] = norm;
            }
        }
        if hits > 0 && cfg!(debug_assertions) {
            log::debug!("l2_normalize: {hits} vectors below eps");
        }
        let out = Tensor::from_parts(v.shape().to_vec(), out);
        self.zero_norm_hits += hits;
        let rg = self.rg(input);
        Ok(self.push(out, Op::L2Normalize { input, axis, eps, norms }, rg))
    }

    /// Bilinear sampling of `field[B,C,H,W]` at normalized `(x, y)` coordinates
    /// `coords[B,Ho,Wo,2]` in `[0,1]²`, pixel centers at `((j+0.5)/W, (i+0.5)/H)`.
    /// Out-of-lattice coordinates clamp to the border.
    pub fn grid_sample(&mut self, field: Var, coords: Var) -> Result<Var> {
        let (fs, cs) = (self.shape(field), self.shape(coords));
        if fs.len() != 4 || cs.len() != 4 || cs[3] != 2 || cs[0] != fs[0] {
            return Err(Error::Dimension(format!("grid_sample: field {fs:?}, coords {cs:?}")));
        }
        if !self.value(coords).is_finite() {
            return Err(Error::Input("grid_sample: non-finite coordinates".into()));
        }
        let out = kernels::grid_sample_value(self.value(field), self.value(coords));
        let rg = self.rg(field) || self.rg(coords);
        Ok(self.push(out, Op::GridSample { field, coords }, rg))
    }

    // ---- backward ----------------------------------------------------------

    /// Accumulates `∂loss/∂leaf` into every reachable leaf.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).numel() != 1 {
            return Err(Error::Usage(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut adj: Vec<Option<Vec<T>>> = (0..=loss.0).map(|_| None).collect();
        adj[loss.0] = Some(vec![T::one()]);
        for i in (0..=loss.0).rev() {
            let Some(g) = adj[i].take() else { continue };
            if !self.nodes[i].requires_grad {
                continue;
            }
            if matches!(self.nodes[i].op, Op::Leaf) {
                let shape = self.nodes[i].value.shape().to_vec();
                match &mut self.grads[i] {
                    Some(acc) => acc.data_mut().iter_mut().zip(&g).for_each(|(a, &b)| *a += b),
                    slot => *slot = Some(Tensor::from_parts(shape, g)),
                }
                continue;
            }
            for (parent, contrib) in self.node_backward(i, &g) {
                if !self.nodes[parent.0].requires_grad {
                    continue;
                }
                match &mut adj[parent.0] {
                    Some(acc) => acc.iter_mut().zip(&contrib).for_each(|(a, &b)| *a += b),
                    slot => *slot = Some(contrib),
                }
            }
        }
        Ok(())
    }

    fn node_backward(&self, i: usize, g: &[T]) -> Vec<(Var, Vec<T>)> {
        let node = &self.nodes[i];
        let val = |v: Var| self.value(v).data();
        let out = node.value.data();
        match &node.op {
            Op::Leaf | Op::Constant | Op::StopGradient => Vec::new(),
            Op::Add(a, b) => vec![(*a, g.to_vec()), (*b, g.to_vec())],
            Op::Sub(a, b) => vec![(*a, g.to_vec()), (*b, g.iter().map(|&x| -x).collect())],
            Op::Mul(a, b) => {
                let (va, vb) = (val(*a), val(*b));
                let mut res = Vec::new();
                if self.rg(*a) {
                    res.push((*a, g.iter().zip(vb).map(|(&g, &y)| g * y).collect()));
                }
                if self.rg(*b) {
                    res.push((*b, g.iter().zip(va).map(|(&g, &x)| g * x).collect()));
                }
                res
            }
            Op::Scale(a, s) => vec![(*a, g.iter().map(|&x| x * *s).collect())],
            Op::AddScalar(a) | Op::Reshape(a) => vec![(*a, g.to_vec())],
            Op::Relu(a) => {
                let d = g.iter().zip(val(*a)).map(|(&g, &x)| if x > T::zero() { g } else { T::zero() });
                vec![(*a, d.collect())]
            }
            Op::Exp(a) => vec![(*a, g.iter().zip(out).map(|(&g, &y)| g * y).collect())],
            Op::Log(a) => vec![(*a, g.iter().zip(val(*a)).map(|(&g, &x)| g / x).collect())],
            Op::Sum(a) => vec![(*a, vec![g[0]; self.value(*a).numel()])],
            Op::SumAxis { input, axis } => {
                let (outer, len, inner) = split_axis(self.shape(*input), *axis);
                let mut d = vec![T::zero(); outer * len * inner];
                for o in 0..outer {
                    for k in 0..len {
                        d[(o * len + k) * inner..(o * len + k + 1) * inner]
                            .copy_from_slice(&g[o * inner..(o + 1) * inner]);
                    }
                }
                vec![(*input, d)]
            }
            Op::Permute { input, perm } => {
                let mut inverse = vec![0; perm.len()];
                for (i, &p) in perm.iter().enumerate() {
                    inverse[p] = i;
                }
                let (_, d) = kernels::permute(node.value.shape(), &inverse, g);
                vec![(*input, d)]
            }
            Op::MatMul { a, b } => self.matmul_backward(*a, *b, g),
            Op::Conv2d { input, weight, geom } => {
                let (dx, dw) = kernels::conv2d_backward(
                    geom,
                    val(*input),
                    val(*weight),
                    g,
                    self.rg(*input),
                    self.rg(*weight),
                );
                let mut res = Vec::new();
                if let Some(dx) = dx {
                    res.push((*input, dx));
                }
                if let Some(dw) = dw {
                    res.push((*weight, dw));
                }
                res
            }
            Op::BatchNorm { input, inv_std } => {
                let (outer, c, inner) = split_axis(node.value.shape(), 1);
                let n = T::from_usize(outer * inner).unwrap();
                let mut d = vec![T::zero(); g.len()];
                for ch in 0..c {
                    let (mut sg, mut sgx) = (T::zero(), T::zero());
                    for o in 0..outer {
                        let base = (o * c + ch) * inner;
                        for k in base..base + inner {
                            sg += g[k];
                            sgx += g[k] * out[k];
                        }
                    }
                    let (mg, mgx) = (sg / n, sgx / n);
                    for o in 0..outer {
                        let base = (o * c + ch) * inner;
                        for k in base..base + inner {
                            d[k] = inv_std[ch] * (g[k] - mg - out[k] * mgx);
                        }
                    }
                }
                vec![(*input, d)]
            }
            Op::ChannelAffine { input, scale, shift, scale_const } => {
                let shape = node.value.shape();
                let (outer, c, inner) = split_axis(shape, 1);
                let x = val(*input);
                let coef: Option<&[T]> = match (scale, scale_const) {
                    (Some(s), _) => Some(val(*s)),
                    (None, Some(s)) => Some(s.as_slice()),
                    _ => None,
                };
                let mut dx = vec![T::zero(); g.len()];
                let mut dscale = vec![T::zero(); c];
                let mut dshift = vec![T::zero(); c];
                for o in 0..outer {
                    for ch in 0..c {
                        let s = coef.map_or(T::one(), |s| s[ch]);
                        let base = (o * c + ch) * inner;
                        for k in base..base + inner {
                            dx[k] = g[k] * s;
                            dscale[ch] += g[k] * x[k];
                            dshift[ch] += g[k];
                        }
                    }
                }
                let mut res = vec![(*input, dx)];
                if let Some(s) = scale {
                    res.push((*s, dscale));
                }
                if let Some(b) = shift {
                    res.push((*b, dshift));
                }
                res
            }
            Op::Softmax { input, axis } => {
                let (outer, len, inner) = split_axis(node.value.shape(), *axis);
                let mut d = vec![T::zero(); g.len()];
                for o in 0..outer {
                    for i in 0..inner {
                        let idx = |k: usize| (o * len + k) * inner + i;
                        let dot: T = (0..len).map(|k| g[idx(k)] * out[idx(k)]).sum();
                        for k in 0..len {
                            d[idx(k)] = out[idx(k)] * (g[idx(k)] - dot);
                        }
                    }
                }
                vec![(*input, d)]
            }
            Op::LogSoftmax { input, axis } => {
                let (outer, len, inner) = split_axis(node.value.shape(), *axis);
                let mut d = vec![T::zero(); g.len()];
                for o in 0..outer {
                    for i in 0..inner {
                        let idx = |k: usize| (o * len + k) * inner + i;
                        let total: T = (0..len).map(|k| g[idx(k)]).sum();
                        for k in 0..len {
                            d[idx(k)] = g[idx(k)] - out[idx(k)].exp() * total;
                        }
                    }
                }
                vec![(*input, d)]
            }
            Op::L2Normalize { input, axis, eps, norms } => {
                let (outer, len, inner) = split_axis(node.value.shape(), *axis);
                let mut d = vec![T::zero(); g.len()];
                for o in 0..outer {
                    for i in 0..inner {
                        let idx = |k: usize| (o * len + k) * inner + i;
                        let norm = norms[o * inner + i];
                        if norm > *eps {
                            let dot: T = (0..len).map(|k| g[idx(k)] * out[idx(k)]).sum();
                            for k in 0..len {
                                d[idx(k)] = (g[idx(k)] - out[idx(k)] * dot) / norm;
                            }
                        } else {
                            for k in 0..len {
                                d[idx(k)] = g[idx(k)] / *eps;
                            }
                        }
                    }
                }
                vec![(*input, d)]
            }
            Op::GridSample { field, coords } => {
                let (fs, cs) = (self.shape(*field), self.shape(*coords));
                let geom = SampleGeom { batch: fs[0], channels: fs[1], h: fs[2], w: fs[3], ho: cs[1], wo: cs[2] };
                let (df, dc) = kernels::grid_sample_backward(&geom, val(*field), val(*coords), g);
                vec![(*field, df), (*coords, dc)]
            }
        }
    }

    fn matmul_backward(&self, a: Var, b: Var, g: &[T]) -> Vec<(Var, Vec<T>)> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        let (batch, m, k, n) = if sa.len() == 2 {
            (1, sa[0], sa[1], sb[1])
        } else {
            (sa[0], sa[1], sa[2], sb[2])
        };
        let (va, vb) = (self.value(a).data(), self.value(b).data());
        let mut res = Vec::new();
        if self.rg(a) {
            // dA = dC · Bᵀ
            let mut da = vec![T::zero(); batch * m * k];
            for i in 0..batch {
                T::gemm(
                    m,
                    n,
                    k,
                    &g[i * m * n..(i + 1) * m * n],
                    n as isize,
                    1,
                    &vb[i * k * n..(i + 1) * k * n],
                    1,
                    n as isize,
                    false,
                    &mut da[i * m * k..(i + 1) * m * k],
                    k as isize,
                    1,
                );
            }
            res.push((a, da));
        }
        if self.rg(b) {
            // dB = Aᵀ · dC
            let mut db = vec![T::zero(); batch * k * n];
            for i in 0..batch {
                T::gemm(
                    k,
                    m,
                    n,
                    &va[i * m * k..(i + 1) * m * k],
                    1,
                    k as isize,
                    &g[i * m * n..(i + 1) * m * n],
                    n as isize,
                    1,
                    false,
                    &mut db[i * k * n..(i + 1) * k * n],
                    n as isize,
                    1,
                );
            }
            res.push((b, db));
        }
        res
    }
}
