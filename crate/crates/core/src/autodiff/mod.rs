//! Minimal reverse-mode automatic differentiation.
//!
//! A [`Graph`] records operations in execution order. Every node holds its
//! value and, after [`Graph::backward`], its gradient. Only the operations
//! the network and its loss need are provided; all tensors are f32 and
//! channels-last with an implicit batch of one.

pub mod checkpoint;
pub mod conv;
pub mod optim;

use std::sync::Arc;

use crate::error::{shape_err, Error, Result};
use conv::{swap_channel_axes, ConvGeom};

/// Dense f32 array with a shape.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f32>,
}

impl Tensor {
    pub fn zeros(shape: &[usize]) -> Self {
        Tensor {
            shape: shape.to_vec(),
            data: vec![0.0; shape.iter().product()],
        }
    }

    pub fn filled(shape: &[usize], v: f32) -> Self {
        Tensor {
            shape: shape.to_vec(),
            data: vec![v; shape.iter().product()],
        }
    }

    pub fn from_vec(shape: &[usize], data: Vec<f32>) -> Result<Self> {
        if shape.iter().product::<usize>() != data.len() {
            return Err(shape_err!("{} values for shape {shape:?}", data.len()));
        }
        Ok(Tensor { shape: shape.to_vec(), data })
    }

    pub fn scalar(v: f32) -> Self {
        Tensor { shape: vec![1], data: vec![v] }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Extent of the last axis.
    pub fn channels(&self) -> usize {
        *self.shape.last().unwrap_or(&1)
    }

    pub fn reshaped(mut self, shape: &[usize]) -> Result<Self> {
        if shape.iter().product::<usize>() != self.data.len() {
            return Err(shape_err!("cannot reshape {:?} to {shape:?}", self.shape));
        }
        self.shape = shape.to_vec();
        Ok(self)
    }
}

/// Handle to a node in a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(&self) -> usize {
        self.0
    }
}

/// Bilinear gather: each output row reads up to four weighted source rows.
///
/// Rows are channel vectors; entries with `None` produce zeros and pass no
/// gradient.
#[derive(Debug, Clone, PartialEq)]
pub struct GatherPlan {
    pub source_rows: usize,
    pub entries: Vec<Option<([u32; 4], [f32; 4])>>,
}

/// Per-channel statistics observed by a training-mode batch norm.
#[derive(Debug, Clone)]
pub struct BatchStats {
    pub mean: Vec<f32>,
    pub var: Vec<f32>,
}

#[derive(Debug)]
enum Op {
    Leaf,
    Conv {
        input: Var,
        kernel: Var,
        geom: Arc<ConvGeom>,
    },
    Deconv {
        input: Var,
        kernel: Var,
        geom: Arc<ConvGeom>,
    },
    Relu(Var),
    Add(Var, Var),
    BiasAdd(Var, Var),
    BatchNorm {
        input: Var,
        scale: Var,
        shift: Var,
        xhat: Vec<f32>,
        inv_std: Vec<f32>,
        training: bool,
    },
    SoftArgmin {
        input: Var,
        probs: Vec<f32>,
    },
    MaskedL1 {
        pred: Var,
        coeff: Vec<f32>,
    },
    Gather {
        input: Var,
        plan: Arc<GatherPlan>,
    },
    Concat {
        inputs: Vec<Var>,
        widths: Vec<usize>,
    },
    Reshape(Var),
    WeightedSum {
        input: Var,
        weights: Vec<f32>,
    },
}

struct Node {
    value: Tensor,
    grad: Option<Vec<f32>>,
    requires_grad: bool,
    op: Op,
}

/// Tape of recorded operations.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

pub const BN_EPS: f32 = 1e-5;

impl Graph {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, parents: &[Var]) -> Var {
        let requires_grad = parents.iter().any(|p| self.nodes[p.0].requires_grad);
        self.nodes.push(Node {
            value,
            grad: None,
            requires_grad,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    /// Constant input; no gradient is tracked.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.nodes.push(Node {
            value: t,
            grad: None,
            requires_grad: false,
            op: Op::Leaf,
        });
        Var(self.nodes.len() - 1)
    }

    /// Trainable leaf.
    pub fn variable(&mut self, t: Tensor) -> Var {
        self.nodes.push(Node {
            value: t,
            grad: None,
            requires_grad: true,
            op: Op::Leaf,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn grad(&self, v: Var) -> Option<&[f32]> {
        self.nodes[v.0].grad.as_deref()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    // ---------------------------------------------------------------- ops

    /// 2D convolution of `(H, W, Cin)` with a `(kh, kw, Cin, Cout)` kernel.
    pub fn conv2d(&mut self, input: Var, kernel: Var, stride: usize, dilation: usize) -> Result<Var> {
        let (is, ks) = (self.shape(input).to_vec(), self.shape(kernel).to_vec());
        if is.len() != 3 || ks.len() != 4 {
            return Err(shape_err!("conv2d expects (H,W,C) and (kh,kw,Cin,Cout), got {is:?} and {ks:?}"));
        }
        if ks[2] != is[2] {
            return Err(shape_err!("conv2d channel mismatch: input {} vs kernel {}", is[2], ks[2]));
        }
        if ks[0] % 2 == 0 || ks[1] % 2 == 0 {
            return Err(shape_err!("conv2d kernel must be odd-sized, got {ks:?}"));
        }
        let geom = ConvGeom::new(
            [is[0], is[1], 1],
            [ks[0], ks[1], 1],
            [stride, stride, 1],
            [dilation, dilation, 1],
            [false; 3],
            ks[2],
            ks[3],
        );
        let y = geom.forward(self.value(input).data(), self.value(kernel).data());
        let shape = [geom.out_dims[0], geom.out_dims[1], geom.cout];
        let t = Tensor::from_vec(&shape, y)?;
        Ok(self.push(t, Op::Conv { input, kernel, geom: Arc::new(geom) }, &[input, kernel]))
    }

    /// 3D convolution of `(H, W, D, Cin)` with a `(kh, kw, kd, Cin, Cout)`
    /// kernel; the W axis is circular, H and D are zero padded.
    pub fn conv3d(&mut self, input: Var, kernel: Var, stride: [usize; 3]) -> Result<Var> {
        let (is, ks) = (self.shape(input).to_vec(), self.shape(kernel).to_vec());
        if is.len() != 4 || ks.len() != 5 {
            return Err(shape_err!("conv3d expects (H,W,D,C) and (kh,kw,kd,Cin,Cout), got {is:?} and {ks:?}"));
        }
        if ks[3] != is[3] {
            return Err(shape_err!("conv3d channel mismatch: input {} vs kernel {}", is[3], ks[3]));
        }
        let geom = ConvGeom::new(
            [is[0], is[1], is[2]],
            [ks[0], ks[1], ks[2]],
            stride,
            [1, 1, 1],
            [false, true, false],
            ks[3],
            ks[4],
        );
        let y = geom.forward(self.value(input).data(), self.value(kernel).data());
        let [a, b, c] = geom.out_dims;
        let t = Tensor::from_vec(&[a, b, c, geom.cout], y)?;
        Ok(self.push(t, Op::Conv { input, kernel, geom: Arc::new(geom) }, &[input, kernel]))
    }

    /// Transposed 3D convolution: the adjoint of the `conv3d` that maps the
    /// output extents back to the input's. Kernel `(kh, kw, kd, Cin, Cout)`.
    pub fn deconv3d(&mut self, input: Var, kernel: Var, stride: [usize; 3]) -> Result<Var> {
        let (is, ks) = (self.shape(input).to_vec(), self.shape(kernel).to_vec());
        if is.len() != 4 || ks.len() != 5 {
            return Err(shape_err!("deconv3d expects (H,W,D,C) and (kh,kw,kd,Cin,Cout), got {is:?} and {ks:?}"));
        }
        if ks[3] != is[3] {
            return Err(shape_err!("deconv3d channel mismatch: input {} vs kernel {}", is[3], ks[3]));
        }
        let big = [is[0] * stride[0], is[1] * stride[1], is[2] * stride[2]];
        // the matching forward conv runs big -> small with Cout -> Cin
        let geom = ConvGeom::with_output(
            big,
            [is[0], is[1], is[2]],
            [ks[0], ks[1], ks[2]],
            stride,
            [1, 1, 1],
            [false, true, false],
            ks[4],
            ks[3],
        );
        let taps = ks[0] * ks[1] * ks[2];
        let w = swap_channel_axes(self.value(kernel).data(), taps, ks[3], ks[4]);
        let y = geom.backward_input(self.value(input).data(), &w);
        let t = Tensor::from_vec(&[big[0], big[1], big[2], ks[4]], y)?;
        Ok(self.push(t, Op::Deconv { input, kernel, geom: Arc::new(geom) }, &[input, kernel]))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let data = v.data().iter().map(|&a| a.max(0.0)).collect();
        let t = Tensor { shape: v.shape().to_vec(), data };
        self.push(t, Op::Relu(x), &[x])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(shape_err!("add: {:?} vs {:?}", self.shape(a), self.shape(b)));
        }
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x + y)
            .collect();
        let t = Tensor { shape: self.shape(a).to_vec(), data };
        Ok(self.push(t, Op::Add(a, b), &[a, b]))
    }

    /// Adds a per-channel bias broadcast over all leading axes.
    pub fn bias_add(&mut self, x: Var, bias: Var) -> Result<Var> {
        let c = self.value(x).channels();
        if self.value(bias).len() != c {
            return Err(shape_err!("bias of {} for {c} channels", self.value(bias).len()));
        }
        let b = self.value(bias).data().to_vec();
        let data = self
            .value(x)
            .data()
            .chunks_exact(c)
            .flat_map(|row| row.iter().zip(&b).map(|(v, b)| v + b).collect::<Vec<_>>())
            .collect();
        let t = Tensor { shape: self.shape(x).to_vec(), data };
        Ok(self.push(t, Op::BiasAdd(x, bias), &[x, bias]))
    }

    /// Batch norm with statistics of this input over all non-channel axes.
    pub fn batchnorm_train(&mut self, x: Var, scale: Var, shift: Var) -> Result<(Var, BatchStats)> {
        let c = self.value(x).channels();
        let m = self.value(x).len() / c;
        let xs = self.value(x).data();
        let mut mean = vec![0.0f64; c];
        for row in xs.chunks_exact(c) {
            for (m, v) in mean.iter_mut().zip(row) {
                *m += *v as f64;
            }
        }
        mean.iter_mut().for_each(|v| *v /= m as f64);
        let mut var = vec![0.0f64; c];
        for row in xs.chunks_exact(c) {
            for ((s, v), mu) in var.iter_mut().zip(row).zip(&mean) {
                let d = *v as f64 - mu;
                *s += d * d;
            }
        }
        var.iter_mut().for_each(|v| *v /= m as f64);
        let mean32: Vec<f32> = mean.iter().map(|&v| v as f32).collect();
        let var32: Vec<f32> = var.iter().map(|&v| v as f32).collect();
        let v = self.normalize(x, scale, shift, &mean32, &var32, true)?;
        Ok((v, BatchStats { mean: mean32, var: var32 }))
    }

    /// Batch norm with fixed (running) statistics.
    pub fn batchnorm_eval(&mut self, x: Var, scale: Var, shift: Var, mean: &[f32], var: &[f32]) -> Result<Var> {
        self.normalize(x, scale, shift, mean, var, false)
    }

    fn normalize(&mut self, x: Var, scale: Var, shift: Var, mean: &[f32], var: &[f32], training: bool) -> Result<Var> {
        let c = self.value(x).channels();
        for (name, len) in [
            ("scale", self.value(scale).len()),
            ("shift", self.value(shift).len()),
            ("mean", mean.len()),
            ("var", var.len()),
        ] {
            if len != c {
                return Err(shape_err!("batchnorm {name} has {len} entries for {c} channels"));
            }
        }
        let inv_std: Vec<f32> = var.iter().map(|v| 1.0 / (v + BN_EPS).sqrt()).collect();
        let g = self.value(scale).data().to_vec();
        let b = self.value(shift).data().to_vec();
        let xs = self.value(x).data();
        let mut xhat = Vec::with_capacity(xs.len());
        let mut out = Vec::with_capacity(xs.len());
        for row in xs.chunks_exact(c) {
            for k in 0..c {
                let h = (row[k] - mean[k]) * inv_std[k];
                xhat.push(h);
                out.push(g[k] * h + b[k]);
            }
        }
        let t = Tensor { shape: self.shape(x).to_vec(), data: out };
        Ok(self.push(
            t,
            Op::BatchNorm {
                input: x,
                scale,
                shift,
                xhat,
                inv_std,
                training,
            },
            &[x, scale, shift],
        ))
    }

    /// Expectation of the index along the last axis under `softmax(-cost)`.
    pub fn softargmin(&mut self, cost: Var) -> Result<Var> {
        let shape = self.shape(cost).to_vec();
        let n = *shape.last().ok_or_else(|| shape_err!("softargmin of a scalar"))?;
        if n == 0 {
            return Err(shape_err!("softargmin over an empty axis"));
        }
        let cs = self.value(cost).data();
        let mut probs = Vec::with_capacity(cs.len());
        let mut out = Vec::with_capacity(cs.len() / n);
        for row in cs.chunks_exact(n) {
            let lo = row.iter().copied().fold(f32::INFINITY, f32::min);
            let e: Vec<f64> = row.iter().map(|&c| (-((c - lo) as f64)).exp()).collect();
            let z: f64 = e.iter().sum();
            let mut acc = 0.0f64;
            for (k, ek) in e.iter().enumerate() {
                let p = ek / z;
                acc += k as f64 * p;
                probs.push(p as f32);
            }
            out.push(acc as f32);
        }
        let t = Tensor { shape: shape[..shape.len() - 1].to_vec(), data: out };
        Ok(self.push(t, Op::SoftArgmin { input: cost, probs }, &[cost]))
    }

    /// `mean_{p in P} |pred(p) - round(target(p))| / coverage(p)` where `P`
    /// are the cells with nonzero coverage.
    pub fn masked_l1_loss(&mut self, pred: Var, target: &[f32], coverage: &[u32]) -> Result<Var> {
        let n = self.value(pred).len();
        if target.len() != n || coverage.len() != n {
            return Err(shape_err!(
                "masked_l1_loss: pred {n}, target {}, coverage {}",
                target.len(),
                coverage.len()
            ));
        }
        let count = coverage.iter().filter(|&&c| c > 0).count();
        if count == 0 {
            return Err(Error::InvalidInput("masked_l1_loss: no covered cells".into()));
        }
        let p = self.value(pred).data();
        let mut coeff = vec![0.0f32; n];
        let mut total = 0.0f64;
        for i in 0..n {
            if coverage[i] == 0 {
                continue;
            }
            let diff = p[i] - target[i].round();
            let w = 1.0 / (coverage[i] as f64 * count as f64);
            total += w * diff.abs() as f64;
            coeff[i] = (w as f32) * sign(diff);
        }
        Ok(self.push(Tensor::scalar(total as f32), Op::MaskedL1 { pred, coeff }, &[pred]))
    }

    /// Weighted bilinear gather. `input` is `(rows..., C)` with
    /// `plan.source_rows` channel vectors; the output is `out_shape + [C]`.
    pub fn gather(&mut self, input: Var, plan: Arc<GatherPlan>, out_shape: &[usize]) -> Result<Var> {
        let c = self.value(input).channels();
        if self.value(input).len() != plan.source_rows * c {
            return Err(shape_err!(
                "gather source has {} rows, plan expects {}",
                self.value(input).len() / c.max(1),
                plan.source_rows
            ));
        }
        if out_shape.iter().product::<usize>() != plan.entries.len() {
            return Err(shape_err!("gather plan has {} entries for {out_shape:?}", plan.entries.len()));
        }
        let src = self.value(input).data();
        let mut out = vec![0.0f32; plan.entries.len() * c];
        crate::par::for_each_chunk_mut(&mut out, 1024 * c, |chunk, block| {
            let first = chunk * 1024;
            for (j, dst) in block.chunks_exact_mut(c).enumerate() {
                if let Some((idx, w)) = &plan.entries[first + j] {
                    for k in 0..4 {
                        let s = &src[idx[k] as usize * c..(idx[k] as usize + 1) * c];
                        for (d, v) in dst.iter_mut().zip(s) {
                            *d += w[k] * v;
                        }
                    }
                }
            }
        });
        let mut shape = out_shape.to_vec();
        shape.push(c);
        let t = Tensor { shape, data: out };
        Ok(self.push(t, Op::Gather { input, plan }, &[input]))
    }

    /// Concatenates along the last axis in the given order.
    pub fn concat_channels(&mut self, inputs: &[Var]) -> Result<Var> {
        let first = inputs.first().ok_or_else(|| shape_err!("concat of nothing"))?;
        let lead = self.shape(*first)[..self.shape(*first).len() - 1].to_vec();
        let mut widths = Vec::with_capacity(inputs.len());
        for v in inputs {
            let s = self.shape(*v);
            if s[..s.len() - 1] != lead[..] {
                return Err(shape_err!("concat: {:?} vs {:?}", s, self.shape(*first)));
            }
            widths.push(*s.last().unwrap());
        }
        let total: usize = widths.iter().sum();
        let rows: usize = lead.iter().product();
        let mut out = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for (v, &w) in inputs.iter().zip(&widths) {
                out.extend_from_slice(&self.value(*v).data()[r * w..(r + 1) * w]);
            }
        }
        let mut shape = lead;
        shape.push(total);
        let t = Tensor { shape, data: out };
        Ok(self.push(t, Op::Concat { inputs: inputs.to_vec(), widths }, inputs))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(x).clone().reshaped(shape)?;
        Ok(self.push(t, Op::Reshape(x), &[x]))
    }

    /// `sum_i x_i * w_i` as a scalar.
    pub fn weighted_sum(&mut self, x: Var, weights: Vec<f32>) -> Result<Var> {
        if weights.len() != self.value(x).len() {
            return Err(shape_err!("weighted_sum: {} weights for {}", weights.len(), self.value(x).len()));
        }
        let s: f64 = self
            .value(x)
            .data()
            .iter()
            .zip(&weights)
            .map(|(a, b)| (*a as f64) * (*b as f64))
            .sum();
        Ok(self.push(Tensor::scalar(s as f32), Op::WeightedSum { input: x, weights }, &[x]))
    }

    // ----------------------------------------------------------- backward

    /// Back-propagates from a scalar node.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).len() != 1 {
            return Err(shape_err!("backward needs a scalar, got {:?}", self.shape(loss)));
        }
        self.backward_from(loss, vec![1.0])
    }

    /// Back-propagates an explicit output gradient.
    pub fn backward_from(&mut self, out: Var, seed: Vec<f32>) -> Result<()> {
        if seed.len() != self.value(out).len() {
            return Err(shape_err!("seed of {} for {:?}", seed.len(), self.shape(out)));
        }
        for n in &mut self.nodes {
            n.grad = None;
        }
        self.nodes[out.0].grad = Some(seed);
        for i in (0..=out.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(g) = self.nodes[i].grad.take() else { continue };
            let contributions = self.local_backward(i, &g);
            self.nodes[i].grad = Some(g);
            for (parent, d) in contributions {
                if !self.nodes[parent.0].requires_grad {
                    continue;
                }
                match &mut self.nodes[parent.0].grad {
                    Some(acc) => acc.iter_mut().zip(&d).for_each(|(a, b)| *a += b),
                    slot @ None => *slot = Some(d),
                }
            }
        }
        Ok(())
    }

    fn local_backward(&self, i: usize, g: &[f32]) -> Vec<(Var, Vec<f32>)> {
        let needs = |v: &Var| self.nodes[v.0].requires_grad;
        match &self.nodes[i].op {
            Op::Leaf => vec![],
            Op::Conv { input, kernel, geom } => {
                let mut out = Vec::new();
                if needs(input) {
                    out.push((*input, geom.backward_input(g, self.value(*kernel).data())));
                }
                if needs(kernel) {
                    out.push((*kernel, geom.backward_kernel(self.value(*input).data(), g)));
                }
                out
            }
            Op::Deconv { input, kernel, geom } => {
                let ks = self.shape(*kernel);
                let taps = ks[0] * ks[1] * ks[2];
                let (cin, cout) = (ks[3], ks[4]);
                let mut out = Vec::new();
                if needs(input) {
                    let w = swap_channel_axes(self.value(*kernel).data(), taps, cin, cout);
                    out.push((*input, geom.forward(g, &w)));
                }
                if needs(kernel) {
                    // the forward conv's kernel gradient is laid out (tap, Cout, Cin)
                    let dw = geom.backward_kernel(g, self.value(*input).data());
                    out.push((*kernel, swap_channel_axes(&dw, taps, cout, cin)));
                }
                out
            }
            Op::Relu(x) => {
                let xs = self.value(*x).data();
                vec![(*x, g.iter().zip(xs).map(|(g, &x)| if x > 0.0 { *g } else { 0.0 }).collect())]
            }
            Op::Add(a, b) => vec![(*a, g.to_vec()), (*b, g.to_vec())],
            Op::BiasAdd(x, bias) => {
                let c = self.value(*bias).len();
                let mut db = vec![0.0f32; c];
                for row in g.chunks_exact(c) {
                    db.iter_mut().zip(row).for_each(|(d, v)| *d += v);
                }
                vec![(*x, g.to_vec()), (*bias, db)]
            }
            Op::BatchNorm {
                input,
                scale,
                shift,
                xhat,
                inv_std,
                training,
            } => {
                let c = inv_std.len();
                let m = (g.len() / c) as f64;
                let gamma = self.value(*scale).data();
                let mut sum_g = vec![0.0f64; c];
                let mut sum_gx = vec![0.0f64; c];
                for (grow, hrow) in g.chunks_exact(c).zip(xhat.chunks_exact(c)) {
                    for k in 0..c {
                        sum_g[k] += grow[k] as f64;
                        sum_gx[k] += (grow[k] * hrow[k]) as f64;
                    }
                }
                let mut dx = Vec::with_capacity(g.len());
                for (grow, hrow) in g.chunks_exact(c).zip(xhat.chunks_exact(c)) {
                    for k in 0..c {
                        let v = if *training {
                            let a = grow[k] as f64 - sum_g[k] / m - hrow[k] as f64 * sum_gx[k] / m;
                            (gamma[k] * inv_std[k]) as f64 * a
                        } else {
                            (gamma[k] * inv_std[k] * grow[k]) as f64
                        };
                        dx.push(v as f32);
                    }
                }
                vec![
                    (*input, dx),
                    (*scale, sum_gx.iter().map(|&v| v as f32).collect()),
                    (*shift, sum_g.iter().map(|&v| v as f32).collect()),
                ]
            }
            Op::SoftArgmin { input, probs } => {
                let n = *self.shape(*input).last().unwrap();
                let out = self.nodes[i].value.data();
                let mut d = Vec::with_capacity(probs.len());
                for ((prow, &gv), &mean) in probs.chunks_exact(n).zip(g).zip(out) {
                    for (k, &p) in prow.iter().enumerate() {
                        d.push(-gv * p * (k as f32 - mean));
                    }
                }
                vec![(*input, d)]
            }
            Op::MaskedL1 { pred, coeff } => vec![(*pred, coeff.iter().map(|c| c * g[0]).collect())],
            Op::Gather { input, plan } => {
                let c = self.value(*input).channels();
                // many cells land on each source pixel; accumulate wide
                let mut d = vec![0.0f64; plan.source_rows * c];
                for (j, e) in plan.entries.iter().enumerate() {
                    if let Some((idx, w)) = e {
                        let gs = &g[j * c..(j + 1) * c];
                        for k in 0..4 {
                            let dst = &mut d[idx[k] as usize * c..(idx[k] as usize + 1) * c];
                            for (a, b) in dst.iter_mut().zip(gs) {
                                *a += (w[k] * b) as f64;
                            }
                        }
                    }
                }
                vec![(*input, d.into_iter().map(|v| v as f32).collect())]
            }
            Op::Concat { inputs, widths } => {
                let total: usize = widths.iter().sum();
                let rows = g.len() / total;
                let mut parts: Vec<Vec<f32>> = widths.iter().map(|w| Vec::with_capacity(rows * w)).collect();
                for r in 0..rows {
                    let mut off = r * total;
                    for (p, &w) in parts.iter_mut().zip(widths) {
                        p.extend_from_slice(&g[off..off + w]);
                        off += w;
                    }
                }
                inputs.iter().copied().zip(parts).collect()
            }
            Op::Reshape(x) => vec![(*x, g.to_vec())],
            Op::WeightedSum { input, weights } => vec![(*input, weights.iter().map(|w| w * g[0]).collect())],
        }
    }
}

#[inline]
fn sign(x: f32) -> f32 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

#[cfg(test)]
mod tests;
