//! Tape-based reverse-mode automatic differentiation.
//!
//! A [`Tape`] owns every value computed during a forward pass. Operations
//! append nodes and hand back [`Var`] handles; [`Tape::backward`] replays the
//! nodes in reverse insertion order and returns a fresh [`Gradients`] store,
//! leaving the tape untouched so it can be differentiated again from another
//! output (saliency uses this for every row of the matrix).

mod conv;
mod gradcheck;

use rand::Rng;

use crate::error::{Error, Result};
use crate::tensor::Tensor;
use conv::VolumeDims;

pub use gradcheck::{grad_check, relative_error, DEFAULT_EPS};

/// Batch norm numerical stabilizer.
pub const BN_EPS: f32 = 1e-5;
/// Weight of the newest batch in the running-statistics update.
pub const BN_MOMENTUM: f32 = 0.1;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum UnaryKind {
    Relu,
    Tanh,
    Sigmoid,
    /// `max(x, 0)`, the hinge used by the consistency penalty.
    HingePos,
    Ln,
    /// `scale * x + shift`
    Affine {
        scale: f32,
        shift: f32,
    },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BinaryKind {
    Add,
    Sub,
    Mul,
}

/// Elementwise operation selector for [`Tape::pointwise`].
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum PointwiseKind {
    Relu,
    Tanh,
    Sigmoid,
    Add,
    Sub,
    Mul,
    Scale(f32),
    HingePos,
}

#[derive(Debug)]
enum Op {
    Leaf,
    Conv3d {
        input: Var,
        kernels: Var,
        bias: Var,
        dims: VolumeDims,
    },
    MaxPool3d {
        input: Var,
        argmax: Vec<u32>,
    },
    Linear {
        x: Var,
        w: Var,
        b: Option<Var>,
    },
    Unary {
        input: Var,
        kind: UnaryKind,
    },
    Binary {
        a: Var,
        b: Var,
        kind: BinaryKind,
    },
    BatchNorm {
        input: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f32>,
        inv_std: Vec<f32>,
        train: bool,
    },
    Concat {
        inputs: Vec<Var>,
        axis: usize,
    },
    MeanOfSet {
        inputs: Vec<Var>,
    },
    Reshape {
        input: Var,
    },
    Slice {
        input: Var,
        start: usize,
    },
    Dropout {
        input: Var,
        mask: Vec<f32>,
    },
    Sum {
        input: Var,
    },
    SumSquares {
        input: Var,
    },
    Clamp {
        input: Var,
        lo: f32,
        hi: f32,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    /// Double-precision shadow of scalar results, so loss values are not
    /// rounded to f32 before finite differencing.
    precise: Option<f64>,
}

/// Per-channel statistics of one training-mode batch norm call.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchStats {
    pub mean: Vec<f32>,
    /// Unbiased variance (falls back to the biased one for a single voxel).
    pub var: Vec<f32>,
}

/// Running batch norm statistics used in eval mode.
#[derive(Clone, Debug, PartialEq)]
pub struct RunningStats {
    pub mean: Vec<f32>,
    pub var: Vec<f32>,
}

impl RunningStats {
    pub fn new(channels: usize) -> Self {
        RunningStats {
            mean: vec![0.0; channels],
            var: vec![1.0; channels],
        }
    }

    pub fn empty() -> Self {
        RunningStats {
            mean: Vec::new(),
            var: Vec::new(),
        }
    }

    pub fn is_populated(&self) -> bool {
        !self.mean.is_empty()
    }

    pub fn update(&mut self, batch: &BatchStats, momentum: f32) {
        if !self.is_populated() {
            *self = RunningStats {
                mean: batch.mean.clone(),
                var: batch.var.clone(),
            };
            return;
        }
        for (r, &b) in self.mean.iter_mut().zip(&batch.mean) {
            *r = (1.0 - momentum) * *r + momentum * b;
        }
        for (r, &b) in self.var.iter_mut().zip(&batch.var) {
            *r = (1.0 - momentum) * *r + momentum * b;
        }
    }
}

/// Gradient store produced by [`Tape::backward`].
#[derive(Clone, Debug, PartialEq)]
pub struct Gradients {
    grads: Vec<Option<Vec<f32>>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    /// Gradient of the loss w.r.t. `v`; zeros when `v` does not reach the loss.
    pub fn get(&self, v: Var) -> Tensor {
        match &self.grads[v.0] {
            Some(g) => Tensor::new(self.shapes[v.0].clone(), g.clone()).expect("tape shape"),
            None => Tensor::zeros(self.shapes[v.0].clone()),
        }
    }

    pub fn data(&self, v: Var) -> Option<&[f32]> {
        self.grads[v.0].as_deref()
    }

    pub fn take(&mut self, v: Var) -> Tensor {
        match self.grads[v.0].take() {
            Some(g) => Tensor::new(self.shapes[v.0].clone(), g).expect("tape shape"),
            None => Tensor::zeros(self.shapes[v.0].clone()),
        }
    }
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

fn sigmoid(x: f32) -> f32 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn add_into(dst: &mut Option<Vec<f32>>, src: &[f32]) {
    match dst {
        Some(d) => d.iter_mut().zip(src).for_each(|(a, b)| *a += b),
        None => *dst = Some(src.to_vec()),
    }
}

fn add_into_owned(dst: &mut Option<Vec<f32>>, src: Vec<f32>) {
    match dst {
        Some(d) => d.iter_mut().zip(&src).for_each(|(a, b)| *a += b),
        None => *dst = Some(src),
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        self.nodes.push(Node {
            value,
            op,
            precise: None,
        });
        Var(self.nodes.len() - 1)
    }

    fn push_precise(&mut self, precise: f64, op: Op) -> Var {
        let value = Tensor::scalar(precise as f32);
        self.nodes.push(Node {
            value,
            op,
            precise: Some(precise),
        });
        Var(self.nodes.len() - 1)
    }

    /// Value of a scalar node, in double precision where the tape kept it.
    pub fn scalar_f64(&self, v: Var) -> f64 {
        let n = &self.nodes[v.0];
        n.precise.unwrap_or(n.value.item() as f64)
    }

    /// Records an input or parameter.
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn scalar(&self, v: Var) -> f32 {
        self.nodes[v.0].value.item()
    }

    // ---- convolution / pooling -------------------------------------------------

    /// Same-padded, stride-1 3x3x3 convolution over `[C, D, H, W]` or a batch
    /// `[N, C, D, H, W]`. Kernels are `[C_out, C_in, 3, 3, 3]`, bias `[C_out]`.
    pub fn conv3d(&mut self, input: Var, kernels: Var, bias: Var) -> Result<Var> {
        let in_shape = self.shape(input).to_vec();
        let dims = VolumeDims::from_shape(&in_shape).ok_or_else(|| {
            Error::shape(
                "conv3d",
                format!("input must be rank 4 or 5, got {in_shape:?}"),
            )
        })?;
        let k_shape = self.shape(kernels).to_vec();
        if k_shape.len() != 5 || k_shape[2..] != [3, 3, 3] {
            return Err(Error::shape(
                "conv3d",
                format!("kernels must be [C_out, C_in, 3, 3, 3], got {k_shape:?}"),
            ));
        }
        if k_shape[1] != dims.c {
            return Err(Error::shape(
                "conv3d",
                format!(
                    "input has {} channels but kernels expect {}",
                    dims.c, k_shape[1]
                ),
            ));
        }
        let c_out = k_shape[0];
        if self.shape(bias) != [c_out] {
            return Err(Error::shape(
                "conv3d",
                format!("bias must be [{c_out}], got {:?}", self.shape(bias)),
            ));
        }
        let out = conv::conv3d_forward(
            self.value(input).data(),
            dims,
            self.value(kernels).data(),
            self.value(bias).data(),
            c_out,
        );
        let mut out_shape = in_shape;
        let ch_axis = out_shape.len() - 4;
        out_shape[ch_axis] = c_out;
        let value = Tensor::new(out_shape, out)?;
        Ok(self.push(
            value,
            Op::Conv3d {
                input,
                kernels,
                bias,
                dims,
            },
        ))
    }

    /// Disjoint 2x2x2 max pooling; spatial extents must be even.
    pub fn maxpool3d(&mut self, input: Var) -> Result<Var> {
        let in_shape = self.shape(input).to_vec();
        let dims = VolumeDims::from_shape(&in_shape).ok_or_else(|| {
            Error::shape(
                "maxpool3d",
                format!("input must be rank 4 or 5, got {in_shape:?}"),
            )
        })?;
        if dims.d % 2 != 0 || dims.h % 2 != 0 || dims.w % 2 != 0 {
            return Err(Error::shape(
                "maxpool3d",
                format!(
                    "spatial extents must be even, got {:?}",
                    &in_shape[in_shape.len() - 3..]
                ),
            ));
        }
        let (values, argmax) = conv::maxpool3d_forward(self.value(input).data(), dims);
        let mut out_shape = in_shape;
        let r = out_shape.len();
        for e in &mut out_shape[r - 3..] {
            *e /= 2;
        }
        let value = Tensor::new(out_shape, values)?;
        Ok(self.push(value, Op::MaxPool3d { input, argmax }))
    }

    // ---- dense -----------------------------------------------------------------

    /// `y = W x + b` for `x: [N]` or row-batched `x: [B, N]`, `W: [M, N]`, `b: [M]`.
    pub fn dense(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        self.linear_impl(x, w, Some(b))
    }

    /// `y = W x` without a bias.
    pub fn linear(&mut self, x: Var, w: Var) -> Result<Var> {
        self.linear_impl(x, w, None)
    }

    fn linear_impl(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        if ws.len() != 2 {
            return Err(Error::shape(
                "dense",
                format!("weight must be rank 2, got {ws:?}"),
            ));
        }
        let (m, n) = (ws[0], ws[1]);
        let (rows, out_shape) = match xs.as_slice() {
            [k] if *k == n => (1, vec![m]),
            [r, k] if *k == n => (*r, vec![*r, m]),
            _ => {
                return Err(Error::shape(
                    "dense",
                    format!("input {xs:?} incompatible with weight {ws:?}"),
                ))
            }
        };
        if let Some(b) = b {
            if self.shape(b) != [m] {
                return Err(Error::shape(
                    "dense",
                    format!("bias must be [{m}], got {:?}", self.shape(b)),
                ));
            }
        }
        let xv = self.value(x).data();
        let wv = self.value(w).data();
        let bv = b.map(|b| self.value(b).data());
        let mut out = Vec::with_capacity(rows * m);
        for r in 0..rows {
            let xr = &xv[r * n..(r + 1) * n];
            for i in 0..m {
                let wr = &wv[i * n..(i + 1) * n];
                let mut acc: f64 = bv.map_or(0.0, |b| b[i] as f64);
                for (a, c) in wr.iter().zip(xr) {
                    acc += (*a as f64) * (*c as f64);
                }
                out.push(acc as f32);
            }
        }
        let value = Tensor::new(out_shape, out)?;
        Ok(self.push(value, Op::Linear { x, w, b }))
    }

    // ---- elementwise -----------------------------------------------------------

    pub fn unary(&mut self, input: Var, kind: UnaryKind) -> Var {
        if self.nodes[input.0].precise.is_some() {
            let v = self.scalar_f64(input);
            let y = match kind {
                UnaryKind::Relu | UnaryKind::HingePos => v.max(0.0),
                UnaryKind::Tanh => v.tanh(),
                UnaryKind::Sigmoid => 1.0 / (1.0 + (-v).exp()),
                UnaryKind::Ln => v.ln(),
                UnaryKind::Affine { scale, shift } => scale as f64 * v + shift as f64,
            };
            return self.push_precise(y, Op::Unary { input, kind });
        }
        let x = self.value(input);
        let data: Vec<f32> = match kind {
            UnaryKind::Relu | UnaryKind::HingePos => x
                .data()
                .iter()
                .map(|&v| if v > 0.0 { v } else { 0.0 })
                .collect(),
            UnaryKind::Tanh => x.data().iter().map(|v| v.tanh()).collect(),
            UnaryKind::Sigmoid => x.data().iter().map(|&v| sigmoid(v)).collect(),
            UnaryKind::Ln => x.data().iter().map(|v| v.ln()).collect(),
            UnaryKind::Affine { scale, shift } => {
                x.data().iter().map(|&v| scale * v + shift).collect()
            }
        };
        let value = Tensor::new(x.shape().to_vec(), data).expect("same shape");
        self.push(value, Op::Unary { input, kind })
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.unary(x, UnaryKind::Relu)
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        self.unary(x, UnaryKind::Tanh)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(x, UnaryKind::Sigmoid)
    }

    pub fn hinge_pos(&mut self, x: Var) -> Var {
        self.unary(x, UnaryKind::HingePos)
    }

    pub fn ln(&mut self, x: Var) -> Var {
        self.unary(x, UnaryKind::Ln)
    }

    pub fn scale(&mut self, x: Var, c: f32) -> Var {
        self.unary(
            x,
            UnaryKind::Affine {
                scale: c,
                shift: 0.0,
            },
        )
    }

    pub fn affine(&mut self, x: Var, scale: f32, shift: f32) -> Var {
        self.unary(x, UnaryKind::Affine { scale, shift })
    }

    pub fn binary(&mut self, a: Var, b: Var, kind: BinaryKind) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape() != bv.shape() {
            return Err(Error::shape(
                "pointwise",
                format!(
                    "operand shapes differ: {:?} vs {:?}",
                    av.shape(),
                    bv.shape()
                ),
            ));
        }
        if av.is_scalar()
            && (self.nodes[a.0].precise.is_some() || self.nodes[b.0].precise.is_some())
        {
            let (x, y) = (self.scalar_f64(a), self.scalar_f64(b));
            let z = match kind {
                BinaryKind::Add => x + y,
                BinaryKind::Sub => x - y,
                BinaryKind::Mul => x * y,
            };
            return Ok(self.push_precise(z, Op::Binary { a, b, kind }));
        }
        let f = match kind {
            BinaryKind::Add => |x: f32, y: f32| x + y,
            BinaryKind::Sub => |x: f32, y: f32| x - y,
            BinaryKind::Mul => |x: f32, y: f32| x * y,
        };
        let data = av
            .data()
            .iter()
            .zip(bv.data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        let value = Tensor::new(av.shape().to_vec(), data)?;
        Ok(self.push(value, Op::Binary { a, b, kind }))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, BinaryKind::Add)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, BinaryKind::Sub)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, BinaryKind::Mul)
    }

    /// Dispatches one of the elementwise kinds. Unary kinds take one operand,
    /// binary kinds two; `Scale` carries its scalar in the kind.
    pub fn pointwise(&mut self, kind: PointwiseKind, operands: &[Var]) -> Result<Var> {
        let arity = match kind {
            PointwiseKind::Add | PointwiseKind::Sub | PointwiseKind::Mul => 2,
            _ => 1,
        };
        if operands.len() != arity {
            return Err(Error::invalid(
                "pointwise",
                format!("{kind:?} takes {arity} operand(s), got {}", operands.len()),
            ));
        }
        Ok(match kind {
            PointwiseKind::Relu => self.relu(operands[0]),
            PointwiseKind::Tanh => self.tanh(operands[0]),
            PointwiseKind::Sigmoid => self.sigmoid(operands[0]),
            PointwiseKind::HingePos => self.hinge_pos(operands[0]),
            PointwiseKind::Scale(c) => self.scale(operands[0], c),
            PointwiseKind::Add => self.add(operands[0], operands[1])?,
            PointwiseKind::Sub => self.sub(operands[0], operands[1])?,
            PointwiseKind::Mul => self.mul(operands[0], operands[1])?,
        })
    }

    /// Clamps into `[lo, hi]`; gradient passes only where the input is inside.
    pub fn clamp(&mut self, input: Var, lo: f32, hi: f32) -> Var {
        let x = self.value(input);
        let data = x.data().iter().map(|v| v.clamp(lo, hi)).collect();
        let value = Tensor::new(x.shape().to_vec(), data).expect("same shape");
        self.push(value, Op::Clamp { input, lo, hi })
    }

    // ---- batch norm ------------------------------------------------------------

    fn bn_layout(&self, input: Var, gamma: Var, beta: Var) -> Result<VolumeDims> {
        let shape = self.shape(input);
        let dims = VolumeDims::from_shape(shape).ok_or_else(|| {
            Error::shape(
                "batchnorm3d",
                format!("input must be rank 4 or 5, got {shape:?}"),
            )
        })?;
        if self.shape(gamma) != [dims.c] || self.shape(beta) != [dims.c] {
            return Err(Error::shape(
                "batchnorm3d",
                format!(
                    "gamma/beta must be [{}], got {:?}/{:?}",
                    dims.c,
                    self.shape(gamma),
                    self.shape(beta)
                ),
            ));
        }
        Ok(dims)
    }

    /// Training-mode batch norm: normalizes each channel over every voxel of
    /// every batch item. Returns the batch statistics so the caller can fold
    /// them into its running statistics.
    pub fn batchnorm_train(
        &mut self,
        input: Var,
        gamma: Var,
        beta: Var,
    ) -> Result<(Var, BatchStats)> {
        let dims = self.bn_layout(input, gamma, beta)?;
        let x = self.value(input).data();
        let s = dims.voxels();
        let count = (dims.n * s) as f64;
        let mut mean = vec![0.0f64; dims.c];
        let mut var = vec![0.0f64; dims.c];
        for n in 0..dims.n {
            for c in 0..dims.c {
                let chunk = &x[(n * dims.c + c) * s..][..s];
                mean[c] += chunk.iter().map(|&v| v as f64).sum::<f64>();
            }
        }
        mean.iter_mut().for_each(|m| *m /= count);
        for n in 0..dims.n {
            for c in 0..dims.c {
                let chunk = &x[(n * dims.c + c) * s..][..s];
                var[c] += chunk
                    .iter()
                    .map(|&v| (v as f64 - mean[c]).powi(2))
                    .sum::<f64>();
            }
        }
        let biased: Vec<f64> = var.iter().map(|v| v / count).collect();
        let inv_std: Vec<f32> = biased
            .iter()
            .map(|v| (1.0 / (v + BN_EPS as f64).sqrt()) as f32)
            .collect();
        let mean32: Vec<f32> = mean.iter().map(|&m| m as f32).collect();
        let (xhat, out) = self.bn_apply(input, gamma, beta, dims, &mean32, &inv_std);
        let stats = BatchStats {
            mean: mean32,
            var: var
                .iter()
                .zip(&biased)
                .map(|(v, b)| {
                    if count > 1.0 {
                        (v / (count - 1.0)) as f32
                    } else {
                        *b as f32
                    }
                })
                .collect(),
        };
        let shape = self.shape(input).to_vec();
        let value = Tensor::new(shape, out)?;
        let var = self.push(
            value,
            Op::BatchNorm {
                input,
                gamma,
                beta,
                xhat,
                inv_std,
                train: true,
            },
        );
        Ok((var, stats))
    }

    /// Eval-mode batch norm using running statistics.
    pub fn batchnorm_eval(
        &mut self,
        input: Var,
        gamma: Var,
        beta: Var,
        stats: &RunningStats,
    ) -> Result<Var> {
        if !stats.is_populated() {
            return Err(Error::MissingRunningStats);
        }
        let dims = self.bn_layout(input, gamma, beta)?;
        if stats.mean.len() != dims.c || stats.var.len() != dims.c {
            return Err(Error::shape(
                "batchnorm3d",
                format!(
                    "running stats have {} channels, input has {}",
                    stats.mean.len(),
                    dims.c
                ),
            ));
        }
        let inv_std: Vec<f32> = stats
            .var
            .iter()
            .map(|&v| (1.0 / (v as f64 + BN_EPS as f64).sqrt()) as f32)
            .collect();
        let (xhat, out) = self.bn_apply(input, gamma, beta, dims, &stats.mean, &inv_std);
        let shape = self.shape(input).to_vec();
        let value = Tensor::new(shape, out)?;
        Ok(self.push(
            value,
            Op::BatchNorm {
                input,
                gamma,
                beta,
                xhat,
                inv_std,
                train: false,
            },
        ))
    }

    fn bn_apply(
        &self,
        input: Var,
        gamma: Var,
        beta: Var,
        dims: VolumeDims,
        mean: &[f32],
        inv_std: &[f32],
    ) -> (Vec<f32>, Vec<f32>) {
        let x = self.value(input).data();
        let g = self.value(gamma).data();
        let b = self.value(beta).data();
        let s = dims.voxels();
        let mut xhat = vec![0.0f32; x.len()];
        let mut out = vec![0.0f32; x.len()];
        for n in 0..dims.n {
            for c in 0..dims.c {
                let off = (n * dims.c + c) * s;
                for i in off..off + s {
                    let h = (x[i] - mean[c]) * inv_std[c];
                    xhat[i] = h;
                    out[i] = g[c] * h + b[c];
                }
            }
        }
        (xhat, out)
    }

    // ---- structural ------------------------------------------------------------

    /// Concatenates along `axis`; all other extents must agree.
    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Result<Var> {
        let first = inputs
            .first()
            .ok_or_else(|| Error::invalid("concat", "no operands"))?;
        let base = self.shape(*first).to_vec();
        if axis >= base.len() {
            return Err(Error::shape(
                "concat",
                format!("axis {axis} out of range for {base:?}"),
            ));
        }
        let mut total = 0;
        for &v in inputs {
            let s = self.shape(v);
            if s.len() != base.len()
                || s.iter()
                    .zip(&base)
                    .enumerate()
                    .any(|(i, (a, b))| i != axis && a != b)
            {
                return Err(Error::shape(
                    "concat",
                    format!("operand {s:?} incompatible with {base:?} along axis {axis}"),
                ));
            }
            total += s[axis];
        }
        let outer: usize = base[..axis].iter().product();
        let inner: usize = base[axis + 1..].iter().product();
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &v in inputs {
                let chunk = self.shape(v)[axis] * inner;
                out.extend_from_slice(&self.value(v).data()[o * chunk..(o + 1) * chunk]);
            }
        }
        let mut shape = base;
        shape[axis] = total;
        let value = Tensor::new(shape, out)?;
        Ok(self.push(
            value,
            Op::Concat {
                inputs: inputs.to_vec(),
                axis,
            },
        ))
    }

    /// Elementwise mean of a non-empty set of same-shaped tensors.
    pub fn mean_of_set(&mut self, inputs: &[Var]) -> Result<Var> {
        let first = inputs
            .first()
            .ok_or_else(|| Error::invalid("mean_of_set", "empty operand set"))?;
        let shape = self.shape(*first).to_vec();
        if let Some(bad) = inputs.iter().find(|&&v| self.shape(v) != shape.as_slice()) {
            return Err(Error::shape(
                "mean_of_set",
                format!("operand {:?} differs from {shape:?}", self.shape(*bad)),
            ));
        }
        let k = inputs.len() as f64;
        let n = shape.iter().product::<usize>();
        let data = (0..n)
            .map(|i| {
                let s: f64 = inputs.iter().map(|&v| self.value(v).data()[i] as f64).sum();
                (s / k) as f32
            })
            .collect();
        let value = Tensor::new(shape, data)?;
        Ok(self.push(
            value,
            Op::MeanOfSet {
                inputs: inputs.to_vec(),
            },
        ))
    }

    pub fn reshape(&mut self, input: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(input).clone().reshape(shape.to_vec())?;
        Ok(self.push(value, Op::Reshape { input }))
    }

    pub fn flatten(&mut self, input: Var) -> Result<Var> {
        let n = self.value(input).len();
        self.reshape(input, &[n])
    }

    /// Rows `start..start+len` along axis 0.
    pub fn slice(&mut self, input: Var, start: usize, len: usize) -> Result<Var> {
        let shape = self.shape(input).to_vec();
        if len == 0 || start + len > shape[0] {
            return Err(Error::shape(
                "slice",
                format!("rows {start}..{} out of range for {shape:?}", start + len),
            ));
        }
        let inner: usize = shape[1..].iter().product();
        let data = self.value(input).data()[start * inner..(start + len) * inner].to_vec();
        let mut out_shape = shape;
        out_shape[0] = len;
        let value = Tensor::new(out_shape, data)?;
        Ok(self.push(value, Op::Slice { input, start }))
    }

    /// Row `index` along axis 0 with that axis dropped (a `[1]` scalar for rank-1 input).
    pub fn select(&mut self, input: Var, index: usize) -> Result<Var> {
        let row = self.slice(input, index, 1)?;
        let shape = self.shape(input);
        let out_shape = if shape.len() == 1 {
            vec![1]
        } else {
            shape[1..].to_vec()
        };
        self.reshape(row, &out_shape)
    }

    /// Inverted dropout. `rng = None` (eval mode) or `rate == 0` passes the input through.
    pub fn dropout<R: Rng + ?Sized>(
        &mut self,
        input: Var,
        rate: f32,
        rng: Option<&mut R>,
    ) -> Result<Var> {
        if !(0.0..1.0).contains(&rate) {
            return Err(Error::invalid(
                "dropout",
                format!("rate must be in [0, 1), got {rate}"),
            ));
        }
        let Some(rng) = rng else { return Ok(input) };
        if rate == 0.0 {
            return Ok(input);
        }
        let keep = 1.0 / (1.0 - rate);
        let x = self.value(input);
        let mask: Vec<f32> = (0..x.len())
            .map(|_| if rng.gen::<f32>() < rate { 0.0 } else { keep })
            .collect();
        let data = x.data().iter().zip(&mask).map(|(a, m)| a * m).collect();
        let value = Tensor::new(x.shape().to_vec(), data)?;
        Ok(self.push(value, Op::Dropout { input, mask }))
    }

    pub fn sum(&mut self, input: Var) -> Var {
        let s: f64 = if self.value(input).is_scalar() {
            self.scalar_f64(input)
        } else {
            self.value(input).data().iter().map(|&v| v as f64).sum()
        };
        self.push_precise(s, Op::Sum { input })
    }

    pub fn sum_squares(&mut self, input: Var) -> Var {
        let s = self.value(input).sum_squares();
        self.push_precise(s, Op::SumSquares { input })
    }

    // ---- reverse pass ----------------------------------------------------------

    /// Computes d(loss)/d(v) for every node. The tape is not modified.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if !self.value(loss).is_scalar() {
            return Err(Error::shape(
                "backward",
                format!("loss must be scalar, got {:?}", self.shape(loss)),
            ));
        }
        let mut grads: Vec<Option<Vec<f32>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![1.0]);
        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            self.backprop_node(idx, &g, &mut grads);
            grads[idx] = Some(g);
        }
        grads.resize(self.nodes.len(), None);
        Ok(Gradients {
            grads,
            shapes: self
                .nodes
                .iter()
                .map(|n| n.value.shape().to_vec())
                .collect(),
        })
    }

    fn backprop_node(&self, idx: usize, g: &[f32], grads: &mut [Option<Vec<f32>>]) {
        let node = &self.nodes[idx];
        match &node.op {
            Op::Leaf => {}
            Op::Conv3d {
                input,
                kernels,
                bias,
                dims,
            } => {
                let c_out = self.shape(*kernels)[0];
                let cg = conv::conv3d_backward(
                    self.value(*input).data(),
                    *dims,
                    self.value(*kernels).data(),
                    c_out,
                    g,
                );
                add_into_owned(&mut grads[input.0], cg.input);
                add_into_owned(&mut grads[kernels.0], cg.kernels);
                add_into_owned(&mut grads[bias.0], cg.bias);
            }
            Op::MaxPool3d { input, argmax } => {
                let mut dx = vec![0.0f32; self.value(*input).len()];
                for (&i, &gv) in argmax.iter().zip(g) {
                    dx[i as usize] += gv;
                }
                add_into_owned(&mut grads[input.0], dx);
            }
            Op::Linear { x, w, b } => {
                let ws = self.shape(*w);
                let (m, n) = (ws[0], ws[1]);
                let rows = g.len() / m;
                let xv = self.value(*x).data();
                let wv = self.value(*w).data();
                let mut dx = vec![0.0f32; rows * n];
                let mut dw = vec![0.0f64; m * n];
                for r in 0..rows {
                    let gr = &g[r * m..(r + 1) * m];
                    let xr = &xv[r * n..(r + 1) * n];
                    for j in 0..n {
                        let mut acc = 0.0f64;
                        for i in 0..m {
                            acc += gr[i] as f64 * wv[i * n + j] as f64;
                        }
                        dx[j + r * n] = acc as f32;
                    }
                    for i in 0..m {
                        let gi = gr[i] as f64;
                        for j in 0..n {
                            dw[i * n + j] += gi * xr[j] as f64;
                        }
                    }
                }
                add_into_owned(&mut grads[x.0], dx);
                add_into_owned(&mut grads[w.0], dw.into_iter().map(|v| v as f32).collect());
                if let Some(b) = b {
                    let db: Vec<f32> = (0..m)
                        .map(|i| (0..rows).map(|r| g[r * m + i] as f64).sum::<f64>() as f32)
                        .collect();
                    add_into_owned(&mut grads[b.0], db);
                }
            }
            Op::Unary { input, kind } => {
                let y = node.value.data();
                let x = self.value(*input).data();
                let dx: Vec<f32> = match kind {
                    UnaryKind::Relu | UnaryKind::HingePos => x
                        .iter()
                        .zip(g)
                        .map(|(&v, &gv)| if v > 0.0 { gv } else { 0.0 })
                        .collect(),
                    UnaryKind::Tanh => y
                        .iter()
                        .zip(g)
                        .map(|(&t, &gv)| gv * (1.0 - t * t))
                        .collect(),
                    UnaryKind::Sigmoid => y
                        .iter()
                        .zip(g)
                        .map(|(&s, &gv)| gv * s * (1.0 - s))
                        .collect(),
                    UnaryKind::Ln => x.iter().zip(g).map(|(&v, &gv)| gv / v).collect(),
                    UnaryKind::Affine { scale, .. } => g.iter().map(|&gv| gv * scale).collect(),
                };
                add_into_owned(&mut grads[input.0], dx);
            }
            Op::Binary { a, b, kind } => match kind {
                BinaryKind::Add => {
                    add_into(&mut grads[a.0], g);
                    add_into(&mut grads[b.0], g);
                }
                BinaryKind::Sub => {
                    add_into(&mut grads[a.0], g);
                    add_into_owned(&mut grads[b.0], g.iter().map(|v| -v).collect());
                }
                BinaryKind::Mul => {
                    let av = self.value(*a).data();
                    let bv = self.value(*b).data();
                    let da: Vec<f32> = g.iter().zip(bv).map(|(x, y)| x * y).collect();
                    let db: Vec<f32> = g.iter().zip(av).map(|(x, y)| x * y).collect();
                    add_into_owned(&mut grads[a.0], da);
                    add_into_owned(&mut grads[b.0], db);
                }
            },
            Op::BatchNorm {
                input,
                gamma,
                beta,
                xhat,
                inv_std,
                train,
            } => {
                let dims = VolumeDims::from_shape(self.shape(*input)).expect("validated");
                let s = dims.voxels();
                let gam = self.value(*gamma).data();
                let mut dgamma = vec![0.0f64; dims.c];
                let mut dbeta = vec![0.0f64; dims.c];
                for n in 0..dims.n {
                    for c in 0..dims.c {
                        let off = (n * dims.c + c) * s;
                        for i in off..off + s {
                            dgamma[c] += g[i] as f64 * xhat[i] as f64;
                            dbeta[c] += g[i] as f64;
                        }
                    }
                }
                let mut dx = vec![0.0f32; g.len()];
                let count = (dims.n * s) as f64;
                for n in 0..dims.n {
                    for c in 0..dims.c {
                        let off = (n * dims.c + c) * s;
                        for i in off..off + s {
                            let dxhat = g[i] as f64 * gam[c] as f64;
                            dx[i] = if *train {
                                // d/dx of (x - mean) / std with batch statistics
                                let t = count * dxhat
                                    - dbeta[c] * gam[c] as f64
                                    - xhat[i] as f64 * dgamma[c] * gam[c] as f64;
                                (inv_std[c] as f64 * t / count) as f32
                            } else {
                                (dxhat * inv_std[c] as f64) as f32
                            };
                        }
                    }
                }
                add_into_owned(&mut grads[input.0], dx);
                add_into_owned(
                    &mut grads[gamma.0],
                    dgamma.into_iter().map(|v| v as f32).collect(),
                );
                add_into_owned(
                    &mut grads[beta.0],
                    dbeta.into_iter().map(|v| v as f32).collect(),
                );
            }
            Op::Concat { inputs, axis } => {
                let shape = node.value.shape();
                let outer: usize = shape[..*axis].iter().product();
                let inner: usize = shape[axis + 1..].iter().product();
                let total = shape[*axis] * inner;
                let mut offset = 0;
                for &v in inputs {
                    let chunk = self.shape(v)[*axis] * inner;
                    let mut dv = Vec::with_capacity(outer * chunk);
                    for o in 0..outer {
                        dv.extend_from_slice(&g[o * total + offset..o * total + offset + chunk]);
                    }
                    add_into_owned(&mut grads[v.0], dv);
                    offset += chunk;
                }
            }
            Op::MeanOfSet { inputs } => {
                let k = inputs.len() as f32;
                let share: Vec<f32> = g.iter().map(|v| v / k).collect();
                for &v in inputs {
                    add_into(&mut grads[v.0], &share);
                }
            }
            Op::Reshape { input } => add_into(&mut grads[input.0], g),
            Op::Slice { input, start } => {
                let inner: usize = self.shape(*input)[1..].iter().product();
                let mut dx = vec![0.0f32; self.value(*input).len()];
                dx[start * inner..start * inner + g.len()].copy_from_slice(g);
                add_into_owned(&mut grads[input.0], dx);
            }
            Op::Dropout { input, mask } => {
                add_into_owned(
                    &mut grads[input.0],
                    g.iter().zip(mask).map(|(a, m)| a * m).collect(),
                );
            }
            Op::Sum { input } => {
                let n = self.value(*input).len();
                add_into_owned(&mut grads[input.0], vec![g[0]; n]);
            }
            Op::SumSquares { input } => {
                let dx = self
                    .value(*input)
                    .data()
                    .iter()
                    .map(|&v| 2.0 * v * g[0])
                    .collect();
                add_into_owned(&mut grads[input.0], dx);
            }
            Op::Clamp { input, lo, hi } => {
                let dx = self
                    .value(*input)
                    .data()
                    .iter()
                    .zip(g)
                    .map(|(&v, &gv)| if v >= *lo && v <= *hi { gv } else { 0.0 })
                    .collect();
                add_into_owned(&mut grads[input.0], dx);
            }
        }
    }
}
