//! Minimal N-dimensional tensors with reverse-mode automatic differentiation.
//!
//! A [`Graph`] is a define-by-run tape: every operation appends a node
//! holding its f32 result, its shape, and the opcode with parent indices.
//! [`Graph::backward`] walks the tape in reverse, which is already a
//! topological order, and accumulates gradients; trainable leaves bound from
//! [`Param`]s receive their gradients in binding order.
//!
//! Graphs are single-threaded and short-lived (one per training step or
//! sampler step). Values are immutable once written; only [`Param`] storage
//! mutates between steps, via the optimizer.

mod adam;
mod gradcheck;
mod kernels;

pub use adam::{adam_update, AdamState};
pub use gradcheck::{grad_check, grad_check_params};

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::rc::Rc;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;
use core::cell::{Cell, Ref, RefCell};

use crate::error::{Error, Result};
use crate::num::Real;
use crate::rng::Rng;

/// Handle to a node in a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Tensor(usize);

/// A named piece of trainable state living outside any graph.
///
/// Cloning is shallow; clones share storage, and pointer identity is what
/// ties a parameter to its leaf when it is bound into a graph.
#[derive(Clone)]
pub struct Param(Rc<ParamInner>);

struct ParamInner {
    data: RefCell<Vec<f32>>,
    shape: Vec<usize>,
    grad: RefCell<Vec<f32>>,
    trainable: Cell<bool>,
}

impl Param {
    pub fn new(data: Vec<f32>, shape: Vec<usize>) -> Result<Param> {
        if numel(&shape) != data.len() {
            return Err(Error::shape(format!(
                "param data length {} does not match shape {:?}",
                data.len(),
                shape
            )));
        }
        let n = data.len();
        Ok(Param(Rc::new(ParamInner {
            data: RefCell::new(data),
            shape,
            grad: RefCell::new(vec![0.0; n]),
            trainable: Cell::new(true),
        })))
    }

    pub fn zeros(shape: Vec<usize>) -> Param {
        let n = numel(&shape);
        Param::new(vec![0.0; n], shape).expect("consistent by construction")
    }

    /// Kaiming fan-in initialization: `N(0, sqrt(2 / fan_in))`.
    pub fn kaiming(rng: &mut Rng, shape: Vec<usize>, fan_in: usize) -> Param {
        let std = libm::sqrtf(2.0 / fan_in as f32);
        let n = numel(&shape);
        let data = (0..n).map(|_| rng.normal() * std).collect();
        Param::new(data, shape).expect("consistent by construction")
    }

    /// `N(0, std)` initialization.
    pub fn normal(rng: &mut Rng, shape: Vec<usize>, std: f32) -> Param {
        let n = numel(&shape);
        let data = (0..n).map(|_| rng.normal() * std).collect();
        Param::new(data, shape).expect("consistent by construction")
    }

    pub fn shape(&self) -> &[usize] {
        &self.0.shape
    }

    pub fn numel(&self) -> usize {
        numel(&self.0.shape)
    }

    pub fn data(&self) -> Ref<'_, Vec<f32>> {
        self.0.data.borrow()
    }

    pub fn to_vec(&self) -> Vec<f32> {
        self.0.data.borrow().clone()
    }

    /// Replace the stored values; the shape is fixed at construction.
    pub fn set_data(&self, data: Vec<f32>) -> Result<()> {
        if data.len() != self.numel() {
            return Err(Error::shape(format!(
                "param of shape {:?} cannot take {} values",
                self.shape(),
                data.len()
            )));
        }
        *self.0.data.borrow_mut() = data;
        Ok(())
    }

    pub fn grad(&self) -> Ref<'_, Vec<f32>> {
        self.0.grad.borrow()
    }

    /// Overwrite the stored gradient, e.g. to drive the optimizer directly.
    pub fn set_grad(&self, grad: Vec<f32>) -> Result<()> {
        if grad.len() != self.numel() {
            return Err(Error::shape(format!(
                "gradient of {} values does not match param shape {:?}",
                grad.len(),
                self.shape()
            )));
        }
        *self.0.grad.borrow_mut() = grad;
        Ok(())
    }

    pub fn zero_grad(&self) {
        for g in self.0.grad.borrow_mut().iter_mut() {
            *g = 0.0;
        }
    }

    pub fn trainable(&self) -> bool {
        self.0.trainable.get()
    }

    /// Frozen parameters still participate in forward passes and pass
    /// gradients through, but their own gradient is not requested.
    pub fn set_trainable(&self, trainable: bool) {
        self.0.trainable.set(trainable);
    }

    fn key(&self) -> usize {
        Rc::as_ptr(&self.0) as usize
    }

    fn accumulate_grad(&self, g: &[f32]) {
        let mut slot = self.0.grad.borrow_mut();
        for (a, &b) in slot.iter_mut().zip(g) {
            *a += b;
        }
    }
}

impl core::fmt::Debug for Param {
    fn fmt(&self, f: &mut core::fmt::Formatter<'_>) -> core::fmt::Result {
        f.debug_struct("Param")
            .field("shape", &self.0.shape)
            .field("trainable", &self.0.trainable.get())
            .finish()
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Neg(usize),
    Scale(usize, f32),
    AddScalar(usize, f32),
    Exp(usize),
    Ln(usize),
    Silu(usize),
    Clamp(usize, f32, f32),
    /// x `[n, c, spatial...]` + bias `[c]`
    AddChanBias(usize, usize),
    /// x `[n, c, spatial...]` + bias `[n, c]`
    AddChanBiasBatch(usize, usize),
    /// x `[rows, cols]` + bias `[cols]`
    AddRowBias(usize, usize),
    Matmul(usize, usize),
    Transpose(usize),
    Conv2d {
        x: usize,
        w: usize,
        stride: usize,
        pad: usize,
    },
    SoftmaxRows(usize),
    GroupNorm {
        x: usize,
        gamma: usize,
        beta: usize,
        groups: usize,
        eps: f32,
    },
    MeanAll(usize),
    SumAll(usize),
    Reshape(usize),
    Gather {
        x: usize,
        idx: Rc<Vec<usize>>,
    },
    Scatter {
        x: usize,
        idx: Rc<Vec<usize>>,
    },
}

impl Op {
    fn parents(&self, out: &mut Vec<usize>) {
        out.clear();
        match *self {
            Op::Leaf => {}
            Op::Neg(a)
            | Op::Scale(a, _)
            | Op::AddScalar(a, _)
            | Op::Exp(a)
            | Op::Ln(a)
            | Op::Silu(a)
            | Op::Clamp(a, _, _)
            | Op::Transpose(a)
            | Op::SoftmaxRows(a)
            | Op::MeanAll(a)
            | Op::SumAll(a)
            | Op::Reshape(a)
            | Op::Gather { x: a, .. }
            | Op::Scatter { x: a, .. } => out.push(a),
            Op::Add(a, b)
            | Op::Sub(a, b)
            | Op::Mul(a, b)
            | Op::AddChanBias(a, b)
            | Op::AddChanBiasBatch(a, b)
            | Op::AddRowBias(a, b)
            | Op::Matmul(a, b)
            | Op::Conv2d { x: a, w: b, .. } => {
                out.push(a);
                out.push(b);
            }
            Op::GroupNorm { x, gamma, beta, .. } => {
                out.push(x);
                out.push(gamma);
                out.push(beta);
            }
        }
    }
}

struct Node {
    data: Vec<f32>,
    shape: Vec<usize>,
    grad: Option<Vec<f32>>,
    op: Op,
    needs_grad: bool,
}

/// Define-by-run computation tape.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    bindings: Vec<(Param, usize)>,
    bound: BTreeMap<usize, usize>,
}

pub(crate) fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

fn shape_str(shape: &[usize]) -> String {
    format!("{shape:?}")
}

impl Graph {
    pub fn new() -> Graph {
        Graph::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, data: Vec<f32>, shape: Vec<usize>, op: Op, needs_grad: bool) -> Tensor {
        debug_assert_eq!(numel(&shape), data.len());
        self.nodes.push(Node {
            data,
            shape,
            grad: None,
            op,
            needs_grad,
        });
        Tensor(self.nodes.len() - 1)
    }

    /// Constant leaf.
    pub fn leaf(&mut self, data: Vec<f32>, shape: Vec<usize>) -> Result<Tensor> {
        if numel(&shape) != data.len() {
            return Err(Error::shape(format!(
                "leaf data length {} does not match shape {}",
                data.len(),
                shape_str(&shape)
            )));
        }
        Ok(self.push(data, shape, Op::Leaf, false))
    }

    pub fn scalar(&mut self, v: f32) -> Tensor {
        self.push(vec![v], vec![1], Op::Leaf, false)
    }

    pub fn zeros(&mut self, shape: Vec<usize>) -> Tensor {
        let n = numel(&shape);
        self.push(vec![0.0; n], shape, Op::Leaf, false)
    }

    pub fn full(&mut self, shape: Vec<usize>, v: f32) -> Tensor {
        let n = numel(&shape);
        self.push(vec![v; n], shape, Op::Leaf, false)
    }

    /// Standard-normal leaf drawn from `rng`.
    pub fn randn(&mut self, rng: &mut Rng, shape: Vec<usize>) -> Tensor {
        let mut data = vec![0.0; numel(&shape)];
        rng.fill_normal(&mut data);
        self.push(data, shape, Op::Leaf, false)
    }

    /// Bind a parameter as a leaf. Binding the same parameter twice returns
    /// the same node, so shared weights accumulate one gradient.
    pub fn param(&mut self, p: &Param) -> Tensor {
        if let Some(&id) = self.bound.get(&p.key()) {
            return Tensor(id);
        }
        let t = self.push(
            p.to_vec(),
            p.shape().to_vec(),
            Op::Leaf,
            p.trainable(),
        );
        self.bound.insert(p.key(), t.0);
        self.bindings.push((p.clone(), t.0));
        t
    }

    /// The leaf a parameter is bound to in this graph, if any.
    pub fn binding(&self, p: &Param) -> Option<Tensor> {
        self.bound.get(&p.key()).map(|&id| Tensor(id))
    }

    pub fn data(&self, t: Tensor) -> &[f32] {
        &self.nodes[t.0].data
    }

    pub fn to_vec(&self, t: Tensor) -> Vec<f32> {
        self.nodes[t.0].data.clone()
    }

    pub fn shape(&self, t: Tensor) -> &[usize] {
        &self.nodes[t.0].shape
    }

    pub fn grad(&self, t: Tensor) -> Option<&[f32]> {
        self.nodes[t.0].grad.as_deref()
    }

    /// Value of a single-element tensor.
    pub fn scalar_value(&self, t: Tensor) -> Result<f32> {
        let n = &self.nodes[t.0];
        if n.data.len() != 1 {
            return Err(Error::shape(format!(
                "expected scalar, found shape {}",
                shape_str(&n.shape)
            )));
        }
        Ok(n.data[0])
    }

    fn needs(&self, ids: &[usize]) -> bool {
        ids.iter().any(|&i| self.nodes[i].needs_grad)
    }

    // ---- elementwise ----------------------------------------------------

    fn check_same_shape(&self, a: Tensor, b: Tensor, what: &str) -> Result<()> {
        if self.nodes[a.0].shape != self.nodes[b.0].shape {
            return Err(Error::shape(format!(
                "{what}: shapes {} and {} differ",
                shape_str(&self.nodes[a.0].shape),
                shape_str(&self.nodes[b.0].shape)
            )));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Tensor, b: Tensor) -> Result<Tensor> {
        self.check_same_shape(a, b, "add")?;
        let data = kernels::zip(&self.nodes[a.0].data, &self.nodes[b.0].data, |x, y| x + y);
        let shape = self.nodes[a.0].shape.clone();
        let ng = self.needs(&[a.0, b.0]);
        Ok(self.push(data, shape, Op::Add(a.0, b.0), ng))
    }

    pub fn sub(&mut self, a: Tensor, b: Tensor) -> Result<Tensor> {
        self.check_same_shape(a, b, "sub")?;
        let data = kernels::zip(&self.nodes[a.0].data, &self.nodes[b.0].data, |x, y| x - y);
        let shape = self.nodes[a.0].shape.clone();
        let ng = self.needs(&[a.0, b.0]);
        Ok(self.push(data, shape, Op::Sub(a.0, b.0), ng))
    }

    pub fn mul(&mut self, a: Tensor, b: Tensor) -> Result<Tensor> {
        self.check_same_shape(a, b, "mul")?;
        let data = kernels::zip(&self.nodes[a.0].data, &self.nodes[b.0].data, |x, y| x * y);
        let shape = self.nodes[a.0].shape.clone();
        let ng = self.needs(&[a.0, b.0]);
        Ok(self.push(data, shape, Op::Mul(a.0, b.0), ng))
    }

    pub fn neg(&mut self, a: Tensor) -> Tensor {
        let data = kernels::map(&self.nodes[a.0].data, |x| -x);
        let shape = self.nodes[a.0].shape.clone();
        let ng = self.nodes[a.0].needs_grad;
        self.push(data, shape, Op::Neg(a.0), ng)
    }

    pub fn scale(&mut self, a: Tensor, c: f32) -> Tensor {
        let data = kernels::map(&self.nodes[a.0].data, |x| x * c);
        let shape = self.nodes[a.0].shape.clone();
        let ng = self.nodes[a.0].needs_grad;
        self.push(data, shape, Op::Scale(a.0, c), ng)
    }

    pub fn add_scalar(&mut self, a: Tensor, c: f32) -> Tensor {
        let data = kernels::map(&self.nodes[a.0].data, |x| x + c);
        let shape = self.nodes[a.0].shape.clone();
        let ng = self.nodes[a.0].needs_grad;
        self.push(data, shape, Op::AddScalar(a.0, c), ng)
    }

    pub fn exp(&mut self, a: Tensor) -> Tensor {
        let data = kernels::map(&self.nodes[a.0].data, |x| Real::exp(x));
        let shape = self.nodes[a.0].shape.clone();
        let ng = self.nodes[a.0].needs_grad;
        self.push(data, shape, Op::Exp(a.0), ng)
    }

    pub fn ln(&mut self, a: Tensor) -> Tensor {
        let data = kernels::map(&self.nodes[a.0].data, |x| Real::ln(x));
        let shape = self.nodes[a.0].shape.clone();
        let ng = self.nodes[a.0].needs_grad;
        self.push(data, shape, Op::Ln(a.0), ng)
    }

    pub fn silu(&mut self, a: Tensor) -> Tensor {
        let data = kernels::map(&self.nodes[a.0].data, kernels::silu);
        let shape = self.nodes[a.0].shape.clone();
        let ng = self.nodes[a.0].needs_grad;
        self.push(data, shape, Op::Silu(a.0), ng)
    }

    /// Hard clamp. The gradient passes through on the closed interval
    /// `[lo, hi]` and is zero outside it.
    pub fn clamp(&mut self, a: Tensor, lo: f32, hi: f32) -> Tensor {
        let data = kernels::map(&self.nodes[a.0].data, |x| Real::rmin(Real::rmax(x, lo), hi));
        let shape = self.nodes[a.0].shape.clone();
        let ng = self.nodes[a.0].needs_grad;
        self.push(data, shape, Op::Clamp(a.0, lo, hi), ng)
    }

    pub fn sqr(&mut self, a: Tensor) -> Result<Tensor> {
        self.mul(a, a)
    }

    // ---- bias broadcasts -------------------------------------------------

    fn chan_layout(&self, x: Tensor) -> Result<(usize, usize, usize)> {
        let shape = &self.nodes[x.0].shape;
        if shape.len() < 2 {
            return Err(Error::shape(format!(
                "channel bias needs rank >= 2, found {}",
                shape_str(shape)
            )));
        }
        let n = shape[0];
        let c = shape[1];
        let spatial = shape[2..].iter().product::<usize>().max(1);
        Ok((n, c, spatial))
    }

    /// `x [n, c, ...] + b [c]`, broadcast over batch and spatial dims.
    pub fn add_chan_bias(&mut self, x: Tensor, b: Tensor) -> Result<Tensor> {
        let (n, c, spatial) = self.chan_layout(x)?;
        if self.nodes[b.0].shape != [c] {
            return Err(Error::shape(format!(
                "channel bias shape {} does not match {} channels",
                shape_str(&self.nodes[b.0].shape),
                c
            )));
        }
        let mut data = self.nodes[x.0].data.clone();
        let bias = &self.nodes[b.0].data;
        for bi in 0..n {
            for ch in 0..c {
                let v = bias[ch];
                let base = (bi * c + ch) * spatial;
                for s in &mut data[base..base + spatial] {
                    *s += v;
                }
            }
        }
        let shape = self.nodes[x.0].shape.clone();
        let ng = self.needs(&[x.0, b.0]);
        Ok(self.push(data, shape, Op::AddChanBias(x.0, b.0), ng))
    }

    /// `x [n, c, ...] + b [n, c]`, one bias vector per batch element.
    pub fn add_chan_bias_batch(&mut self, x: Tensor, b: Tensor) -> Result<Tensor> {
        let (n, c, spatial) = self.chan_layout(x)?;
        if self.nodes[b.0].shape != [n, c] {
            return Err(Error::shape(format!(
                "per-sample bias shape {} does not match [{} x {}]",
                shape_str(&self.nodes[b.0].shape),
                n,
                c
            )));
        }
        let mut data = self.nodes[x.0].data.clone();
        let bias = &self.nodes[b.0].data;
        for bi in 0..n {
            for ch in 0..c {
                let v = bias[bi * c + ch];
                let base = (bi * c + ch) * spatial;
                for s in &mut data[base..base + spatial] {
                    *s += v;
                }
            }
        }
        let shape = self.nodes[x.0].shape.clone();
        let ng = self.needs(&[x.0, b.0]);
        Ok(self.push(data, shape, Op::AddChanBiasBatch(x.0, b.0), ng))
    }

    /// `x [rows, cols] + b [cols]`.
    pub fn add_row_bias(&mut self, x: Tensor, b: Tensor) -> Result<Tensor> {
        let shape = self.nodes[x.0].shape.clone();
        if shape.len() != 2 {
            return Err(Error::shape(format!(
                "row bias needs a matrix, found {}",
                shape_str(&shape)
            )));
        }
        let (rows, cols) = (shape[0], shape[1]);
        if self.nodes[b.0].shape != [cols] {
            return Err(Error::shape(format!(
                "row bias shape {} does not match {} columns",
                shape_str(&self.nodes[b.0].shape),
                cols
            )));
        }
        let mut data = self.nodes[x.0].data.clone();
        let bias = &self.nodes[b.0].data;
        for r in 0..rows {
            for (v, &bv) in data[r * cols..(r + 1) * cols].iter_mut().zip(bias) {
                *v += bv;
            }
        }
        let ng = self.needs(&[x.0, b.0]);
        Ok(self.push(data, shape, Op::AddRowBias(x.0, b.0), ng))
    }

    // ---- linear algebra ---------------------------------------------------

    pub fn matmul(&mut self, a: Tensor, b: Tensor) -> Result<Tensor> {
        let sa = &self.nodes[a.0].shape;
        let sb = &self.nodes[b.0].shape;
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::shape(format!(
                "matmul: incompatible shapes {} x {}",
                shape_str(sa),
                shape_str(sb)
            )));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let data = kernels::matmul(&self.nodes[a.0].data, &self.nodes[b.0].data, m, k, n);
        let ng = self.needs(&[a.0, b.0]);
        Ok(self.push(data, vec![m, n], Op::Matmul(a.0, b.0), ng))
    }

    pub fn transpose(&mut self, a: Tensor) -> Result<Tensor> {
        let s = &self.nodes[a.0].shape;
        if s.len() != 2 {
            return Err(Error::shape(format!(
                "transpose needs a matrix, found {}",
                shape_str(s)
            )));
        }
        let (rows, cols) = (s[0], s[1]);
        let data = kernels::transpose(&self.nodes[a.0].data, rows, cols);
        let ng = self.nodes[a.0].needs_grad;
        Ok(self.push(data, vec![cols, rows], Op::Transpose(a.0), ng))
    }

    /// 2-D cross-correlation. `x` is `[cin, h, w]` or `[n, cin, h, w]`,
    /// `w` is `[cout, cin, k, k]`; the output keeps `x`'s rank.
    pub fn conv2d(&mut self, x: Tensor, w: Tensor, stride: usize, pad: usize) -> Result<Tensor> {
        if stride == 0 {
            return Err(Error::config("conv2d: stride must be positive"));
        }
        let xs = self.nodes[x.0].shape.clone();
        let ws = self.nodes[w.0].shape.clone();
        let (batched, n, cin, h, w_in) = match xs.len() {
            3 => (false, 1, xs[0], xs[1], xs[2]),
            4 => (true, xs[0], xs[1], xs[2], xs[3]),
            _ => {
                return Err(Error::shape(format!(
                    "conv2d input must be rank 3 or 4, found {}",
                    shape_str(&xs)
                )))
            }
        };
        if ws.len() != 4 || ws[2] != ws[3] {
            return Err(Error::shape(format!(
                "conv2d kernel must be [cout, cin, k, k], found {}",
                shape_str(&ws)
            )));
        }
        let (cout, k) = (ws[0], ws[2]);
        if ws[1] != cin {
            return Err(Error::shape(format!(
                "conv2d: input has {} channels but kernel expects {}",
                cin, ws[1]
            )));
        }
        if k > h + 2 * pad || k > w_in + 2 * pad {
            return Err(Error::shape(format!(
                "conv2d: kernel {k} exceeds padded input {}x{}",
                h + 2 * pad,
                w_in + 2 * pad
            )));
        }
        let oh = kernels::conv_extent(h, k, stride, pad).ok_or_else(|| {
            Error::shape(format!(
                "conv2d: stride {stride} does not produce an integral height from {h} (k={k}, pad={pad})"
            ))
        })?;
        let ow = kernels::conv_extent(w_in, k, stride, pad).ok_or_else(|| {
            Error::shape(format!(
                "conv2d: stride {stride} does not produce an integral width from {w_in} (k={k}, pad={pad})"
            ))
        })?;
        let data = kernels::conv2d(
            &self.nodes[x.0].data,
            n,
            cin,
            h,
            w_in,
            &self.nodes[w.0].data,
            cout,
            k,
            stride,
            pad,
            oh,
            ow,
        );
        let shape = if batched {
            vec![n, cout, oh, ow]
        } else {
            vec![cout, oh, ow]
        };
        let ng = self.needs(&[x.0, w.0]);
        Ok(self.push(
            data,
            shape,
            Op::Conv2d {
                x: x.0,
                w: w.0,
                stride,
                pad,
            },
            ng,
        ))
    }

    /// Row-wise softmax of a matrix, stabilized by row-max subtraction.
    pub fn softmax_rows(&mut self, a: Tensor) -> Result<Tensor> {
        let s = &self.nodes[a.0].shape;
        if s.len() != 2 {
            return Err(Error::shape(format!(
                "softmax_rows needs a matrix, found {}",
                shape_str(s)
            )));
        }
        if self.nodes[a.0].data.iter().any(|v| !v.is_finite()) {
            return Err(Error::numeric("softmax_rows: non-finite input"));
        }
        let (rows, cols) = (s[0], s[1]);
        let data = kernels::softmax_rows(&self.nodes[a.0].data, rows, cols);
        let ng = self.nodes[a.0].needs_grad;
        Ok(self.push(data, vec![rows, cols], Op::SoftmaxRows(a.0), ng))
    }

    /// Group normalization over `[n, c, spatial...]` with per-channel affine.
    pub fn group_norm(
        &mut self,
        x: Tensor,
        gamma: Tensor,
        beta: Tensor,
        groups: usize,
        eps: f32,
    ) -> Result<Tensor> {
        let (n, c, spatial) = self.chan_layout(x)?;
        if groups == 0 || c % groups != 0 {
            return Err(Error::config(format!(
                "group_norm: {groups} groups do not divide {c} channels"
            )));
        }
        if self.nodes[gamma.0].shape != [c] || self.nodes[beta.0].shape != [c] {
            return Err(Error::shape(format!(
                "group_norm affine shapes {} / {} do not match {} channels",
                shape_str(&self.nodes[gamma.0].shape),
                shape_str(&self.nodes[beta.0].shape),
                c
            )));
        }
        let data = kernels::group_norm(
            &self.nodes[x.0].data,
            n,
            c,
            spatial,
            groups,
            &self.nodes[gamma.0].data,
            &self.nodes[beta.0].data,
            eps,
        );
        let shape = self.nodes[x.0].shape.clone();
        let ng = self.needs(&[x.0, gamma.0, beta.0]);
        Ok(self.push(
            data,
            shape,
            Op::GroupNorm {
                x: x.0,
                gamma: gamma.0,
                beta: beta.0,
                groups,
                eps,
            },
            ng,
        ))
    }

    // ---- reductions and shape ----------------------------------------------

    pub fn mean_all(&mut self, a: Tensor) -> Tensor {
        let n = self.nodes[a.0].data.len();
        let v = kernels::sum_all(&self.nodes[a.0].data) / n as f32;
        let ng = self.nodes[a.0].needs_grad;
        self.push(vec![v], vec![1], Op::MeanAll(a.0), ng)
    }

    pub fn sum_all(&mut self, a: Tensor) -> Tensor {
        let v = kernels::sum_all(&self.nodes[a.0].data);
        let ng = self.nodes[a.0].needs_grad;
        self.push(vec![v], vec![1], Op::SumAll(a.0), ng)
    }

    pub fn reshape(&mut self, a: Tensor, shape: Vec<usize>) -> Result<Tensor> {
        if numel(&shape) != self.nodes[a.0].data.len() {
            return Err(Error::shape(format!(
                "reshape: {} elements cannot form {}",
                self.nodes[a.0].data.len(),
                shape_str(&shape)
            )));
        }
        let data = self.nodes[a.0].data.clone();
        let ng = self.nodes[a.0].needs_grad;
        Ok(self.push(data, shape, Op::Reshape(a.0), ng))
    }

    /// `out[i] = x[idx[i]]`; `idx` addresses the flattened input.
    pub fn gather(&mut self, x: Tensor, idx: Rc<Vec<usize>>, shape: Vec<usize>) -> Result<Tensor> {
        if numel(&shape) != idx.len() {
            return Err(Error::shape(format!(
                "gather: {} indices cannot form {}",
                idx.len(),
                shape_str(&shape)
            )));
        }
        let src = &self.nodes[x.0].data;
        if let Some(&bad) = idx.iter().find(|&&i| i >= src.len()) {
            return Err(Error::range(format!(
                "gather index {bad} out of bounds for {} elements",
                src.len()
            )));
        }
        let data = idx.iter().map(|&i| src[i]).collect();
        let ng = self.nodes[x.0].needs_grad;
        Ok(self.push(data, shape, Op::Gather { x: x.0, idx }, ng))
    }

    /// Inverse of [`Graph::gather`]: `out[idx[i]] = x[i]`, zeros elsewhere.
    /// Indices must be distinct.
    pub fn scatter(&mut self, x: Tensor, idx: Rc<Vec<usize>>, shape: Vec<usize>) -> Result<Tensor> {
        let src = &self.nodes[x.0].data;
        if idx.len() != src.len() {
            return Err(Error::shape(format!(
                "scatter: {} indices for {} elements",
                idx.len(),
                src.len()
            )));
        }
        let total = numel(&shape);
        if let Some(&bad) = idx.iter().find(|&&i| i >= total) {
            return Err(Error::range(format!(
                "scatter index {bad} out of bounds for {total} elements"
            )));
        }
        let mut data = vec![0.0f32; total];
        for (&i, &v) in idx.iter().zip(src) {
            data[i] = v;
        }
        let ng = self.nodes[x.0].needs_grad;
        Ok(self.push(data, shape, Op::Scatter { x: x.0, idx }, ng))
    }

    /// Nearest-neighbour 2x upsampling of `[n, c, h, w]`.
    pub fn upsample2x(&mut self, x: Tensor) -> Result<Tensor> {
        let s = self.nodes[x.0].shape.clone();
        if s.len() != 4 {
            return Err(Error::shape(format!(
                "upsample2x needs [n, c, h, w], found {}",
                shape_str(&s)
            )));
        }
        let (n, c, h, w) = (s[0], s[1], s[2], s[3]);
        let mut idx = Vec::with_capacity(n * c * h * w * 4);
        for b in 0..n {
            for ch in 0..c {
                let base = (b * c + ch) * h * w;
                for oh in 0..2 * h {
                    for ow in 0..2 * w {
                        idx.push(base + (oh / 2) * w + ow / 2);
                    }
                }
            }
        }
        self.gather(x, Rc::new(idx), vec![n, c, 2 * h, 2 * w])
    }

    // ---- backward -----------------------------------------------------------

    /// Reverse pass from a scalar loss. Gradients of trainable bound
    /// parameters are accumulated into their `Param` storage in binding
    /// order.
    pub fn backward(&mut self, loss: Tensor) -> Result<()> {
        if self.nodes[loss.0].data.len() != 1 {
            return Err(Error::shape(format!(
                "backward needs a scalar loss, found {}",
                shape_str(&self.nodes[loss.0].shape)
            )));
        }
        self.nodes[loss.0].grad = Some(vec![1.0]);
        let mut parents = Vec::with_capacity(3);
        for id in (0..=loss.0).rev() {
            if self.nodes[id].grad.is_none() || !self.nodes[id].needs_grad {
                continue;
            }
            let op = self.nodes[id].op.clone();
            op.parents(&mut parents);
            if parents.is_empty() {
                continue;
            }
            self.backprop_one(id, &op)?;
        }
        for (p, id) in &self.bindings {
            if p.trainable() {
                if let Some(g) = self.nodes[*id].grad.as_deref() {
                    p.accumulate_grad(g);
                }
            }
        }
        Ok(())
    }

    fn grad_buf(&mut self, id: usize) -> &mut Vec<f32> {
        if self.nodes[id].grad.is_none() {
            let n = self.nodes[id].data.len();
            self.nodes[id].grad = Some(vec![0.0; n]);
        }
        self.nodes[id].grad.as_mut().unwrap()
    }

    fn add_to_grad(&mut self, id: usize, delta: &[f32]) {
        if !self.nodes[id].needs_grad {
            return;
        }
        let buf = self.grad_buf(id);
        for (a, &b) in buf.iter_mut().zip(delta) {
            *a += b;
        }
    }

    fn backprop_one(&mut self, id: usize, op: &Op) -> Result<()> {
        let g = self.nodes[id].grad.clone().expect("grad present");
        match *op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.add_to_grad(a, &g);
                self.add_to_grad(b, &g);
            }
            Op::Sub(a, b) => {
                self.add_to_grad(a, &g);
                let neg: Vec<f32> = g.iter().map(|&v| -v).collect();
                self.add_to_grad(b, &neg);
            }
            Op::Mul(a, b) => {
                if self.nodes[a].needs_grad {
                    let da: Vec<f32> = g
                        .iter()
                        .zip(&self.nodes[b].data)
                        .map(|(&gv, &bv)| gv * bv)
                        .collect();
                    self.add_to_grad(a, &da);
                }
                if self.nodes[b].needs_grad {
                    let db: Vec<f32> = g
                        .iter()
                        .zip(&self.nodes[a].data)
                        .map(|(&gv, &av)| gv * av)
                        .collect();
                    self.add_to_grad(b, &db);
                }
            }
            Op::Neg(a) => {
                let d: Vec<f32> = g.iter().map(|&v| -v).collect();
                self.add_to_grad(a, &d);
            }
            Op::Scale(a, c) => {
                let d: Vec<f32> = g.iter().map(|&v| v * c).collect();
                self.add_to_grad(a, &d);
            }
            Op::AddScalar(a, _) => {
                self.add_to_grad(a, &g);
            }
            Op::Exp(a) => {
                let d: Vec<f32> = g
                    .iter()
                    .zip(&self.nodes[id].data)
                    .map(|(&gv, &ev)| gv * ev)
                    .collect();
                self.add_to_grad(a, &d);
            }
            Op::Ln(a) => {
                let d: Vec<f32> = g
                    .iter()
                    .zip(&self.nodes[a].data)
                    .map(|(&gv, &xv)| gv / xv)
                    .collect();
                self.add_to_grad(a, &d);
            }
            Op::Silu(a) => {
                let d: Vec<f32> = g
                    .iter()
                    .zip(&self.nodes[a].data)
                    .map(|(&gv, &xv)| {
                        let s = kernels::sigmoid(xv);
                        gv * s * (1.0 + xv * (1.0 - s))
                    })
                    .collect();
                self.add_to_grad(a, &d);
            }
            Op::Clamp(a, lo, hi) => {
                let d: Vec<f32> = g
                    .iter()
                    .zip(&self.nodes[a].data)
                    .map(|(&gv, &xv)| if xv >= lo && xv <= hi { gv } else { 0.0 })
                    .collect();
                self.add_to_grad(a, &d);
            }
            Op::AddChanBias(x, b) => {
                self.add_to_grad(x, &g);
                if self.nodes[b].needs_grad {
                    let (n, c, spatial) = self.chan_layout(Tensor(x))?;
                    let mut db = vec![0.0f32; c];
                    for bi in 0..n {
                        for ch in 0..c {
                            let base = (bi * c + ch) * spatial;
                            let mut s = 0.0f32;
                            for &gv in &g[base..base + spatial] {
                                s += gv;
                            }
                            db[ch] += s;
                        }
                    }
                    self.add_to_grad(b, &db);
                }
            }
            Op::AddChanBiasBatch(x, b) => {
                self.add_to_grad(x, &g);
                if self.nodes[b].needs_grad {
                    let (n, c, spatial) = self.chan_layout(Tensor(x))?;
                    let mut db = vec![0.0f32; n * c];
                    for bi in 0..n {
                        for ch in 0..c {
                            let base = (bi * c + ch) * spatial;
                            let mut s = 0.0f32;
                            for &gv in &g[base..base + spatial] {
                                s += gv;
                            }
                            db[bi * c + ch] = s;
                        }
                    }
                    self.add_to_grad(b, &db);
                }
            }
            Op::AddRowBias(x, b) => {
                self.add_to_grad(x, &g);
                if self.nodes[b].needs_grad {
                    let cols = self.nodes[b].data.len();
                    let rows = self.nodes[x].data.len() / cols;
                    let mut db = vec![0.0f32; cols];
                    for r in 0..rows {
                        for (d, &gv) in db.iter_mut().zip(&g[r * cols..(r + 1) * cols]) {
                            *d += gv;
                        }
                    }
                    self.add_to_grad(b, &db);
                }
            }
            Op::Matmul(a, b) => {
                let (m, k) = (self.nodes[a].shape[0], self.nodes[a].shape[1]);
                let n = self.nodes[b].shape[1];
                if self.nodes[a].needs_grad {
                    let da = kernels::matmul_nt(&g, &self.nodes[b].data, m, n, k);
                    self.add_to_grad(a, &da);
                }
                if self.nodes[b].needs_grad {
                    let db = kernels::matmul_tn(&self.nodes[a].data, &g, m, k, n);
                    self.add_to_grad(b, &db);
                }
            }
            Op::Transpose(a) => {
                let (rows, cols) = (self.nodes[id].shape[0], self.nodes[id].shape[1]);
                let d = kernels::transpose(&g, rows, cols);
                self.add_to_grad(a, &d);
            }
            Op::Conv2d { x, w, stride, pad } => {
                let xs = &self.nodes[x].shape;
                let (n, cin, h, win) = if xs.len() == 4 {
                    (xs[0], xs[1], xs[2], xs[3])
                } else {
                    (1, xs[0], xs[1], xs[2])
                };
                let ws = &self.nodes[w].shape;
                let (cout, k) = (ws[0], ws[2]);
                let os = &self.nodes[id].shape;
                let (oh, ow) = (os[os.len() - 2], os[os.len() - 1]);
                if self.nodes[x].needs_grad {
                    let dx = kernels::conv2d_backward_input(
                        &g,
                        n,
                        cin,
                        h,
                        win,
                        &self.nodes[w].data,
                        cout,
                        k,
                        stride,
                        pad,
                        oh,
                        ow,
                    );
                    self.add_to_grad(x, &dx);
                }
                if self.nodes[w].needs_grad {
                    let dw = kernels::conv2d_backward_weight(
                        &g,
                        &self.nodes[x].data,
                        n,
                        cin,
                        h,
                        win,
                        cout,
                        k,
                        stride,
                        pad,
                        oh,
                        ow,
                    );
                    self.add_to_grad(w, &dw);
                }
            }
            Op::SoftmaxRows(a) => {
                let (rows, cols) = (self.nodes[id].shape[0], self.nodes[id].shape[1]);
                let s = &self.nodes[id].data;
                let mut d = vec![0.0f32; rows * cols];
                for r in 0..rows {
                    let srow = &s[r * cols..(r + 1) * cols];
                    let grow = &g[r * cols..(r + 1) * cols];
                    let mut dot = 0.0f32;
                    for (&sv, &gv) in srow.iter().zip(grow) {
                        dot += sv * gv;
                    }
                    for ((dv, &sv), &gv) in d[r * cols..(r + 1) * cols].iter_mut().zip(srow).zip(grow)
                    {
                        *dv = sv * (gv - dot);
                    }
                }
                self.add_to_grad(a, &d);
            }
            Op::GroupNorm {
                x,
                gamma,
                beta,
                groups,
                eps,
            } => {
                self.group_norm_backward(id, x, gamma, beta, groups, eps, &g)?;
            }
            Op::MeanAll(a) => {
                let n = self.nodes[a].data.len();
                let d = vec![g[0] / n as f32; n];
                self.add_to_grad(a, &d);
            }
            Op::SumAll(a) => {
                let n = self.nodes[a].data.len();
                let d = vec![g[0]; n];
                self.add_to_grad(a, &d);
            }
            Op::Reshape(a) => {
                self.add_to_grad(a, &g);
            }
            Op::Gather { x, ref idx } => {
                if self.nodes[x].needs_grad {
                    let mut d = vec![0.0f32; self.nodes[x].data.len()];
                    for (&i, &gv) in idx.iter().zip(&g) {
                        d[i] += gv;
                    }
                    self.add_to_grad(x, &d);
                }
            }
            Op::Scatter { x, ref idx } => {
                if self.nodes[x].needs_grad {
                    let d: Vec<f32> = idx.iter().map(|&i| g[i]).collect();
                    self.add_to_grad(x, &d);
                }
            }
        }
        Ok(())
    }

    #[allow(clippy::too_many_arguments)]
    fn group_norm_backward(
        &mut self,
        out_id: usize,
        x: usize,
        gamma: usize,
        beta: usize,
        groups: usize,
        eps: f32,
        g: &[f32],
    ) -> Result<()> {
        let (n, c, spatial) = self.chan_layout(Tensor(x))?;
        let cg = c / groups;
        let m = cg * spatial;
        let xd = &self.nodes[x].data;
        let gad = &self.nodes[gamma].data;
        let mut dx = vec![0.0f32; xd.len()];
        let mut dgamma = vec![0.0f32; c];
        let mut dbeta = vec![0.0f32; c];
        for b in 0..n {
            for gi in 0..groups {
                let start = (b * c + gi * cg) * spatial;
                let xs = &xd[start..start + m];
                let (mean, var) = kernels::mean_var(xs);
                let inv_std = 1.0 / libm::sqrtf(var + eps);
                // Means of dxhat and dxhat*xhat over the group.
                let mut sum_dxhat = 0.0f64;
                let mut sum_dxhat_xhat = 0.0f64;
                for lc in 0..cg {
                    let ch = gi * cg + lc;
                    let ga = gad[ch];
                    let base = start + lc * spatial;
                    for s in 0..spatial {
                        let xhat = (xd[base + s] - mean) * inv_std;
                        let gv = g[base + s];
                        dgamma[ch] += gv * xhat;
                        dbeta[ch] += gv;
                        let dxhat = gv * ga;
                        sum_dxhat += dxhat as f64;
                        sum_dxhat_xhat += (dxhat * xhat) as f64;
                    }
                }
                let mean_dxhat = (sum_dxhat / m as f64) as f32;
                let mean_dxhat_xhat = (sum_dxhat_xhat / m as f64) as f32;
                for lc in 0..cg {
                    let ch = gi * cg + lc;
                    let ga = gad[ch];
                    let base = start + lc * spatial;
                    for s in 0..spatial {
                        let xhat = (xd[base + s] - mean) * inv_std;
                        let dxhat = g[base + s] * ga;
                        dx[base + s] = inv_std * (dxhat - mean_dxhat - xhat * mean_dxhat_xhat);
                    }
                }
            }
        }
        let _ = out_id;
        self.add_to_grad(x, &dx);
        self.add_to_grad(gamma, &dgamma);
        self.add_to_grad(beta, &dbeta);
        Ok(())
    }

    // ---- f64 shadow evaluation ------------------------------------------------

    /// Re-evaluate the recorded graph in f64 up to `target`, with one leaf
    /// element nudged by `delta`. Used for finite-difference gradient checks;
    /// f32 rounding would otherwise dominate the difference quotient.
    pub(crate) fn eval_f64(&self, target: Tensor, leaf: Tensor, elem: usize, delta: f64) -> Result<f64> {
        let mut vals: Vec<Vec<f64>> = Vec::with_capacity(target.0 + 1);
        for id in 0..=target.0 {
            let node = &self.nodes[id];
            let v = match &node.op {
                Op::Leaf => {
                    let mut v: Vec<f64> = node.data.iter().map(|&x| x as f64).collect();
                    if id == leaf.0 {
                        v[elem] += delta;
                    }
                    v
                }
                Op::Add(a, b) => kernels::zip(&vals[*a], &vals[*b], |x, y| x + y),
                Op::Sub(a, b) => kernels::zip(&vals[*a], &vals[*b], |x, y| x - y),
                Op::Mul(a, b) => kernels::zip(&vals[*a], &vals[*b], |x, y| x * y),
                Op::Neg(a) => kernels::map(&vals[*a], |x| -x),
                Op::Scale(a, c) => {
                    let c = *c as f64;
                    kernels::map(&vals[*a], |x| x * c)
                }
                Op::AddScalar(a, c) => {
                    let c = *c as f64;
                    kernels::map(&vals[*a], |x| x + c)
                }
                Op::Exp(a) => kernels::map(&vals[*a], |x| Real::exp(x)),
                Op::Ln(a) => kernels::map(&vals[*a], |x| Real::ln(x)),
                Op::Silu(a) => kernels::map(&vals[*a], kernels::silu),
                Op::Clamp(a, lo, hi) => {
                    let (lo, hi) = (*lo as f64, *hi as f64);
                    kernels::map(&vals[*a], |x| Real::rmin(Real::rmax(x, lo), hi))
                }
                Op::AddChanBias(x, b) => {
                    let (n, c, spatial) = self.chan_layout(Tensor(*x))?;
                    let mut out = vals[*x].clone();
                    for bi in 0..n {
                        for ch in 0..c {
                            let v = vals[*b][ch];
                            let base = (bi * c + ch) * spatial;
                            for s in &mut out[base..base + spatial] {
                                *s += v;
                            }
                        }
                    }
                    out
                }
                Op::AddChanBiasBatch(x, b) => {
                    let (n, c, spatial) = self.chan_layout(Tensor(*x))?;
                    let mut out = vals[*x].clone();
                    for bi in 0..n {
                        for ch in 0..c {
                            let v = vals[*b][bi * c + ch];
                            let base = (bi * c + ch) * spatial;
                            for s in &mut out[base..base + spatial] {
                                *s += v;
                            }
                        }
                    }
                    out
                }
                Op::AddRowBias(x, b) => {
                    let cols = self.nodes[*b].data.len();
                    let mut out = vals[*x].clone();
                    for (r, v) in out.iter_mut().enumerate() {
                        *v += vals[*b][r % cols];
                    }
                    out
                }
                Op::Matmul(a, b) => {
                    let (m, k) = (self.nodes[*a].shape[0], self.nodes[*a].shape[1]);
                    let n = self.nodes[*b].shape[1];
                    kernels::matmul(&vals[*a], &vals[*b], m, k, n)
                }
                Op::Transpose(a) => {
                    let s = &self.nodes[*a].shape;
                    kernels::transpose(&vals[*a], s[0], s[1])
                }
                Op::Conv2d { x, w, stride, pad } => {
                    let xs = &self.nodes[*x].shape;
                    let (n, cin, h, win) = if xs.len() == 4 {
                        (xs[0], xs[1], xs[2], xs[3])
                    } else {
                        (1, xs[0], xs[1], xs[2])
                    };
                    let ws = &self.nodes[*w].shape;
                    let os = &self.nodes[id].shape;
                    kernels::conv2d(
                        &vals[*x],
                        n,
                        cin,
                        h,
                        win,
                        &vals[*w],
                        ws[0],
                        ws[2],
                        *stride,
                        *pad,
                        os[os.len() - 2],
                        os[os.len() - 1],
                    )
                }
                Op::SoftmaxRows(a) => {
                    let s = &self.nodes[*a].shape;
                    kernels::softmax_rows(&vals[*a], s[0], s[1])
                }
                Op::GroupNorm {
                    x,
                    gamma,
                    beta,
                    groups,
                    eps,
                } => {
                    let (n, c, spatial) = self.chan_layout(Tensor(*x))?;
                    kernels::group_norm(
                        &vals[*x],
                        n,
                        c,
                        spatial,
                        *groups,
                        &vals[*gamma],
                        &vals[*beta],
                        *eps as f64,
                    )
                }
                Op::MeanAll(a) => {
                    let n = vals[*a].len() as f64;
                    vec![kernels::sum_all(&vals[*a]) / n]
                }
                Op::SumAll(a) => vec![kernels::sum_all(&vals[*a])],
                Op::Reshape(a) => vals[*a].clone(),
                Op::Gather { x, idx } => idx.iter().map(|&i| vals[*x][i]).collect(),
                Op::Scatter { x, idx } => {
                    let mut out = vec![0.0f64; node.data.len()];
                    for (&i, &v) in idx.iter().zip(&vals[*x]) {
                        out[i] = v;
                    }
                    out
                }
            };
            vals.push(v);
        }
        Ok(vals[target.0][0])
    }
}
