//! Reverse-mode differentiation over a linear record of executed operations.
//!
//! Every operation is a method on [`Tape`]. An operation whose inputs depend on
//! a parameter appends a node holding whatever it needs for its backward rule;
//! everything else is evaluated eagerly and leaves no trace, so inference on a
//! [`Tape::no_grad`] tape never retains intermediates.

use std::cell::RefCell;
use std::sync::Arc;

use rayon::prelude::*;

use super::tensor::{numel, strides, Element, Tensor};
use crate::error::{Error, Result};

pub const LAYER_NORM_EPS: f64 = 1e-5;

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

/// A value flowing through the tape.
#[derive(Debug)]
pub struct Var<T> {
    id: Option<usize>,
    value: Arc<Tensor<T>>,
}

impl<T> Clone for Var<T> {
    fn clone(&self) -> Self {
        Self { id: self.id, value: Arc::clone(&self.value) }
    }
}

impl<T: Element> Var<T> {
    pub fn value(&self) -> &Tensor<T> {
        &self.value
    }

    pub fn shape(&self) -> &[usize] {
        self.value.shape()
    }

    pub fn requires_grad(&self) -> bool {
        self.id.is_some()
    }

    pub fn into_tensor(self) -> Tensor<T> {
        Arc::try_unwrap(self.value).unwrap_or_else(|v| (*v).clone())
    }
}

/// Right-aligned broadcast of `b` onto the shape of `a`, expressed as runs of
/// `run` contiguous elements with one `b` offset per run.
#[derive(Debug)]
struct Broadcast {
    run: usize,
    offsets: Vec<usize>,
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    Add { a: Option<usize>, b: Option<usize>, map: Broadcast, b_len: usize },
    Mul { a: Option<usize>, b: Option<usize>, av: Arc<Tensor<T>>, bv: Arc<Tensor<T>> },
    Scale { a: usize, c: T },
    MatMul { a: Option<usize>, w: Option<usize>, av: Arc<Tensor<T>>, wv: Arc<Tensor<T>>, rows: usize, k: usize, n: usize },
    BatchMatMul { a: Option<usize>, b: Option<usize>, av: Arc<Tensor<T>>, bv: Arc<Tensor<T>>, dims: BmmDims },
    Reshape { a: usize },
    Permute { a: usize, in_shape: Vec<usize>, axes: Vec<usize> },
    Gather { a: usize, idx: Arc<Vec<usize>>, row: usize, in_rows: usize },
    Concat { parts: Vec<(Option<usize>, usize)>, outer: usize, total: usize, inner: usize },
    Narrow { a: usize, outer: usize, extent: usize, start: usize, len: usize, inner: usize },
    Gelu { a: usize, x: Arc<Tensor<T>> },
    Softmax { a: usize, y: Arc<Tensor<T>>, width: usize },
    LayerNorm { x: Option<usize>, gamma: Option<usize>, beta: Option<usize>, xhat: Vec<T>, inv_std: Vec<T>, gv: Arc<Tensor<T>>, width: usize },
    L1 { a: Option<usize>, b: Option<usize>, sign: Vec<i8> },
    Sum { a: usize, n: usize, scale: f64 },
}

#[derive(Debug, Clone, Copy)]
struct BmmDims {
    batch: usize,
    m: usize,
    k: usize,
    n: usize,
    trans_b: bool,
}

#[derive(Debug)]
struct Node<T> {
    op: Op<T>,
    shape: Vec<usize>,
}

/// Ordered record of operations for one forward/backward pass.
#[derive(Debug)]
pub struct Tape<T> {
    nodes: RefCell<Vec<Node<T>>>,
    record: bool,
}

impl<T: Element> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients produced by [`Tape::backward`], addressed by the parameter [`Var`]s.
#[derive(Debug)]
pub struct Gradients<T> {
    grads: Vec<Option<Vec<T>>>,
    shapes: Vec<Vec<usize>>,
}

impl<T: Element> Gradients<T> {
    /// Gradient of the loss with respect to `var`; `None` if `var` did not
    /// contribute to the loss or is not a leaf.
    pub fn get(&self, var: &Var<T>) -> Option<Tensor<T>> {
        let id = var.id?;
        let g = self.grads.get(id)?.as_ref()?;
        Tensor::new(self.shapes[id].clone(), g.clone()).ok()
    }

    /// Like [`get`](Self::get) but returns zeros for untouched parameters.
    pub fn get_or_zeros(&self, var: &Var<T>) -> Tensor<T> {
        self.get(var).unwrap_or_else(|| Tensor::zeros(var.shape().to_vec()))
    }
}

fn slot<T: Element>(grads: &mut [Option<Vec<T>>], id: usize, len: usize) -> &mut Vec<T> {
    grads[id].get_or_insert_with(|| vec![T::ZERO; len])
}

fn check_same_shape(context: &str, a: &[usize], b: &[usize]) -> Result<()> {
    if a != b {
        return Err(Error::dim(context, format!("{a:?} vs {b:?}")));
    }
    Ok(())
}

impl<T: Element> Tape<T> {
    pub fn new() -> Self {
        Self { nodes: RefCell::new(Vec::new()), record: true }
    }

    /// A tape that records nothing: parameters bound to it do not require
    /// gradients and intermediates are freed as soon as they are dropped.
    pub fn no_grad() -> Self {
        Self { nodes: RefCell::new(Vec::new()), record: false }
    }

    pub fn is_recording(&self) -> bool {
        self.record
    }

    /// Number of recorded nodes.
    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, op: Op<T>, shape: &[usize]) -> usize {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node { op, shape: shape.to_vec() });
        nodes.len() - 1
    }

    fn emit(&self, value: Tensor<T>, tracked: bool, op: impl FnOnce() -> Op<T>) -> Var<T> {
        let id = if self.record && tracked { Some(self.push(op(), value.shape())) } else { None };
        Var { id, value: Arc::new(value) }
    }

    /// A leaf that requires gradients (on a recording tape).
    pub fn param(&self, value: Tensor<T>) -> Var<T> {
        self.param_shared(Arc::new(value))
    }

    pub fn param_shared(&self, value: Arc<Tensor<T>>) -> Var<T> {
        let id = if self.record { Some(self.push(Op::Leaf, value.shape())) } else { None };
        Var { id, value }
    }

    pub fn constant(&self, value: Tensor<T>) -> Var<T> {
        Var { id: None, value: Arc::new(value) }
    }

    pub fn constant_shared(&self, value: Arc<Tensor<T>>) -> Var<T> {
        Var { id: None, value }
    }

    // ---------------------------------------------------------------- algebra

    /// `a + b`, where `b` broadcasts onto the shape of `a` (right-aligned, each
    /// extent of `b` equal to that of `a` or 1).
    pub fn add(&self, a: &Var<T>, b: &Var<T>) -> Result<Var<T>> {
        let map = broadcast_map(a.shape(), b.shape())?;
        let av = a.value.data();
        let bv = b.value.data();
        let mut out = av.to_vec();
        for (c, off) in map.offsets.iter().enumerate() {
            let dst = &mut out[c * map.run..(c + 1) * map.run];
            for (d, s) in dst.iter_mut().zip(&bv[*off..*off + map.run]) {
                *d += *s;
            }
        }
        let value = Tensor::new(a.shape().to_vec(), out)?;
        let b_len = bv.len();
        Ok(self.emit(value, a.id.is_some() || b.id.is_some(), || Op::Add { a: a.id, b: b.id, map, b_len }))
    }

    /// Elementwise product of equally shaped operands.
    pub fn mul(&self, a: &Var<T>, b: &Var<T>) -> Result<Var<T>> {
        check_same_shape("mul", a.shape(), b.shape())?;
        let data = a.value.data().iter().zip(b.value.data()).map(|(x, y)| *x * *y).collect();
        let value = Tensor::new(a.shape().to_vec(), data)?;
        Ok(self.emit(value, a.id.is_some() || b.id.is_some(), || Op::Mul {
            a: a.id,
            b: b.id,
            av: Arc::clone(&a.value),
            bv: Arc::clone(&b.value),
        }))
    }

    pub fn scale(&self, a: &Var<T>, c: f64) -> Var<T> {
        let c = T::from_f64(c);
        let data = a.value.data().iter().map(|x| *x * c).collect();
        let value = Tensor::new(a.shape().to_vec(), data).expect("same shape");
        match a.id {
            Some(id) => self.emit(value, true, || Op::Scale { a: id, c }),
            None => self.emit(value, false, || Op::Leaf),
        }
    }

    /// `x W` with `x: [..., k]` and `W: [k, n]`.
    pub fn matmul(&self, x: &Var<T>, w: &Var<T>) -> Result<Var<T>> {
        let xs = x.shape();
        let ws = w.shape();
        if xs.is_empty() || ws.len() != 2 || xs[xs.len() - 1] != ws[0] {
            return Err(Error::dim("matmul", format!("{xs:?} x {ws:?}")));
        }
        let (k, n) = (ws[0], ws[1]);
        let rows = numel(xs) / k.max(1);
        let mut out = vec![T::ZERO; rows * n];
        // SAFETY: row-major operands of the stated extents.
        unsafe {
            T::gemm(
                rows, k, n, T::ONE,
                x.value.data().as_ptr(), k as isize, 1,
                w.value.data().as_ptr(), n as isize, 1,
                T::ZERO, out.as_mut_ptr(), n as isize, 1,
            );
        }
        let mut shape = xs.to_vec();
        *shape.last_mut().unwrap() = n;
        let value = Tensor::new(shape, out)?;
        Ok(self.emit(value, x.id.is_some() || w.id.is_some(), || Op::MatMul {
            a: x.id,
            w: w.id,
            av: Arc::clone(&x.value),
            wv: Arc::clone(&w.value),
            rows,
            k,
            n,
        }))
    }

    /// `x W + b`.
    pub fn linear(&self, x: &Var<T>, w: &Var<T>, b: &Var<T>) -> Result<Var<T>> {
        let y = self.matmul(x, w)?;
        self.add(&y, b)
    }

    /// Batched product over identical leading dimensions:
    /// `a: [.., m, k]`, `b: [.., k, n]` (or `[.., n, k]` with `trans_b`).
    pub fn bmm(&self, a: &Var<T>, b: &Var<T>, trans_b: bool) -> Result<Var<T>> {
        let ash = a.shape();
        let bsh = b.shape();
        let r = ash.len();
        if r < 2 || bsh.len() != r || ash[..r - 2] != bsh[..r - 2] {
            return Err(Error::dim("bmm", format!("{ash:?} x {bsh:?}")));
        }
        let (m, k) = (ash[r - 2], ash[r - 1]);
        let (bk, n) = if trans_b { (bsh[r - 1], bsh[r - 2]) } else { (bsh[r - 2], bsh[r - 1]) };
        if bk != k {
            return Err(Error::dim("bmm", format!("{ash:?} x {bsh:?} (trans_b = {trans_b})")));
        }
        let batch = numel(&ash[..r - 2]);
        let dims = BmmDims { batch, m, k, n, trans_b };
        let mut out = vec![T::ZERO; batch * m * n];
        let (rsb, csb) = if trans_b { (1, k as isize) } else { (n as isize, 1) };
        let ad = a.value.data();
        let bd = b.value.data();
        if m * n > 0 {
            out.par_chunks_mut(m * n).enumerate().for_each(|(i, c)| {
                let a_i = &ad[i * m * k..(i + 1) * m * k];
                let b_i = &bd[i * k * n..(i + 1) * k * n];
                // SAFETY: per-batch slices of exactly the addressed extents.
                unsafe {
                    T::gemm(
                        m, k, n, T::ONE,
                        a_i.as_ptr(), k as isize, 1,
                        b_i.as_ptr(), rsb, csb,
                        T::ZERO, c.as_mut_ptr(), n as isize, 1,
                    );
                }
            });
        }
        let mut shape = ash[..r - 2].to_vec();
        shape.extend([m, n]);
        let value = Tensor::new(shape, out)?;
        Ok(self.emit(value, a.id.is_some() || b.id.is_some(), || Op::BatchMatMul {
            a: a.id,
            b: b.id,
            av: Arc::clone(&a.value),
            bv: Arc::clone(&b.value),
            dims,
        }))
    }

    // ------------------------------------------------------------ data layout

    pub fn reshape(&self, a: &Var<T>, shape: &[usize]) -> Result<Var<T>> {
        if numel(shape) != a.value.len() {
            return Err(Error::dim("reshape", format!("{:?} -> {shape:?}", a.shape())));
        }
        let value = Tensor::new(shape.to_vec(), a.value.data().to_vec())?;
        Ok(match a.id {
            Some(id) => self.emit(value, true, || Op::Reshape { a: id }),
            None => self.emit(value, false, || Op::Leaf),
        })
    }

    /// Reorders axes: output axis `i` is input axis `axes[i]`.
    pub fn permute(&self, a: &Var<T>, axes: &[usize]) -> Result<Var<T>> {
        let in_shape = a.shape().to_vec();
        let mut seen = vec![false; in_shape.len()];
        if axes.len() != in_shape.len() || axes.iter().any(|&x| x >= seen.len() || std::mem::replace(&mut seen[x], true)) {
            return Err(Error::dim("permute", format!("axes {axes:?} for shape {in_shape:?}")));
        }
        let out_shape: Vec<usize> = axes.iter().map(|&i| in_shape[i]).collect();
        let mut out = vec![T::ZERO; a.value.len()];
        permute_walk(&in_shape, axes, |o, i| out[o] = a.value.data()[i]);
        let value = Tensor::new(out_shape, out)?;
        Ok(match a.id {
            Some(id) => self.emit(value, true, || Op::Permute { a: id, in_shape, axes: axes.to_vec() }),
            None => self.emit(value, false, || Op::Leaf),
        })
    }

    /// Selects rows of `a` viewed as `[rows, row]` where `row` is the product
    /// of all but the first axis. Output shape is `[idx.len(), a.shape[1..]]`.
    pub fn gather_rows(&self, a: &Var<T>, idx: &Arc<Vec<usize>>) -> Result<Var<T>> {
        let shape = a.shape();
        if shape.is_empty() {
            return Err(Error::dim("gather_rows", "scalar input"));
        }
        let in_rows = shape[0];
        let row = numel(&shape[1..]);
        if let Some(bad) = idx.iter().find(|&&i| i >= in_rows) {
            return Err(Error::dim("gather_rows", format!("row {bad} of {in_rows}")));
        }
        let src = a.value.data();
        let mut out = Vec::with_capacity(idx.len() * row);
        for &i in idx.iter() {
            out.extend_from_slice(&src[i * row..(i + 1) * row]);
        }
        let mut out_shape = shape.to_vec();
        out_shape[0] = idx.len();
        let value = Tensor::new(out_shape, out)?;
        Ok(match a.id {
            Some(id) => self.emit(value, true, || Op::Gather { a: id, idx: Arc::clone(idx), row, in_rows }),
            None => self.emit(value, false, || Op::Leaf),
        })
    }

    pub fn concat(&self, parts: &[&Var<T>], axis: usize) -> Result<Var<T>> {
        let first = parts.first().ok_or_else(|| Error::dim("concat", "no inputs"))?.shape();
        if axis >= first.len() {
            return Err(Error::dim("concat", format!("axis {axis} for shape {first:?}")));
        }
        for p in parts {
            let s = p.shape();
            if s.len() != first.len() || s[..axis] != first[..axis] || s[axis + 1..] != first[axis + 1..] {
                return Err(Error::dim("concat", format!("{s:?} vs {first:?} along axis {axis}")));
            }
        }
        let outer = numel(&first[..axis]);
        let inner = numel(&first[axis + 1..]);
        let total: usize = parts.iter().map(|p| p.shape()[axis]).sum();
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for p in parts {
                let e = p.shape()[axis] * inner;
                out.extend_from_slice(&p.value.data()[o * e..(o + 1) * e]);
            }
        }
        let mut shape = first.to_vec();
        shape[axis] = total;
        let value = Tensor::new(shape, out)?;
        let tracked = parts.iter().any(|p| p.id.is_some());
        Ok(self.emit(value, tracked, || Op::Concat {
            parts: parts.iter().map(|p| (p.id, p.shape()[axis])).collect(),
            outer,
            total,
            inner,
        }))
    }

    /// The slice `[start, start + len)` along `axis`.
    pub fn narrow(&self, a: &Var<T>, axis: usize, start: usize, len: usize) -> Result<Var<T>> {
        let shape = a.shape();
        if axis >= shape.len() || start + len > shape[axis] {
            return Err(Error::dim("narrow", format!("[{start}, {}) on axis {axis} of {shape:?}", start + len)));
        }
        let outer = numel(&shape[..axis]);
        let inner = numel(&shape[axis + 1..]);
        let extent = shape[axis];
        let src = a.value.data();
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * extent + start) * inner;
            out.extend_from_slice(&src[base..base + len * inner]);
        }
        let mut out_shape = shape.to_vec();
        out_shape[axis] = len;
        let value = Tensor::new(out_shape, out)?;
        Ok(match a.id {
            Some(id) => self.emit(value, true, || Op::Narrow { a: id, outer, extent, start, len, inner }),
            None => self.emit(value, false, || Op::Leaf),
        })
    }

    /// Splits `a` along `axis` into pieces of the given extents.
    pub fn split(&self, a: &Var<T>, axis: usize, sizes: &[usize]) -> Result<Vec<Var<T>>> {
        let total: usize = sizes.iter().sum();
        if axis >= a.shape().len() || total != a.shape()[axis] {
            return Err(Error::dim("split", format!("{sizes:?} on axis {axis} of {:?}", a.shape())));
        }
        let mut start = 0;
        sizes
            .iter()
            .map(|&len| {
                let piece = self.narrow(a, axis, start, len);
                start += len;
                piece
            })
            .collect()
    }

    // ----------------------------------------------------------- nonlinearity

    /// GELU, tanh approximation.
    pub fn gelu(&self, a: &Var<T>) -> Var<T> {
        let data = a
            .value
            .data()
            .iter()
            .map(|&x| {
                let x = x.to_f64();
                T::from_f64(0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh()))
            })
            .collect();
        let value = Tensor::new(a.shape().to_vec(), data).expect("same shape");
        match a.id {
            Some(id) => self.emit(value, true, || Op::Gelu { a: id, x: Arc::clone(&a.value) }),
            None => self.emit(value, false, || Op::Leaf),
        }
    }

    /// Softmax over the last axis.
    pub fn softmax(&self, a: &Var<T>) -> Result<Var<T>> {
        let width = *a.shape().last().ok_or_else(|| Error::dim("softmax", "scalar input"))?;
        let mut out = a.value.data().to_vec();
        if width > 0 {
            out.par_chunks_mut(width).for_each(|row| {
                let max = row.iter().fold(f64::NEG_INFINITY, |m, v| m.max(v.to_f64()));
                let mut sum = 0.0;
                for v in row.iter_mut() {
                    let e = (v.to_f64() - max).exp();
                    sum += e;
                    *v = T::from_f64(e);
                }
                let inv = 1.0 / sum;
                for v in row.iter_mut() {
                    *v = T::from_f64(v.to_f64() * inv);
                }
            });
        }
        let value = Arc::new(Tensor::new(a.shape().to_vec(), out)?);
        let id = match a.id {
            Some(id) if self.record => Some(self.push(Op::Softmax { a: id, y: Arc::clone(&value), width }, value.shape())),
            _ => None,
        };
        Ok(Var { id, value })
    }

    /// Softmax of `logits + mask`, the mask broadcasting onto the logits.
    pub fn softmax_with_mask(&self, logits: &Var<T>, mask: Option<&Var<T>>) -> Result<Var<T>> {
        match mask {
            Some(m) => {
                let l = self.add(logits, m)?;
                self.softmax(&l)
            }
            None => self.softmax(logits),
        }
    }

    /// Layer normalization over the last axis with affine `gamma`, `beta`.
    pub fn layer_norm(&self, x: &Var<T>, gamma: &Var<T>, beta: &Var<T>) -> Result<Var<T>> {
        let width = *x.shape().last().ok_or_else(|| Error::dim("layer_norm", "scalar input"))?;
        if gamma.shape() != [width] || beta.shape() != [width] {
            return Err(Error::dim(
                "layer_norm",
                format!("x {:?}, gamma {:?}, beta {:?}", x.shape(), gamma.shape(), beta.shape()),
            ));
        }
        let rows = x.value.len() / width.max(1);
        let g = gamma.value.data();
        let b = beta.value.data();
        let mut out = vec![T::ZERO; x.value.len()];
        let mut xhat = vec![T::ZERO; x.value.len()];
        let mut inv_std = vec![T::ZERO; rows];
        let src = x.value.data();
        for r in 0..rows {
            let row = &src[r * width..(r + 1) * width];
            let mean = row.iter().map(|v| v.to_f64()).sum::<f64>() / width as f64;
            let var = row.iter().map(|v| (v.to_f64() - mean).powi(2)).sum::<f64>() / width as f64;
            let is = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            inv_std[r] = T::from_f64(is);
            for j in 0..width {
                let h = (row[j].to_f64() - mean) * is;
                xhat[r * width + j] = T::from_f64(h);
                out[r * width + j] = T::from_f64(h * g[j].to_f64() + b[j].to_f64());
            }
        }
        let value = Tensor::new(x.shape().to_vec(), out)?;
        let tracked = x.id.is_some() || gamma.id.is_some() || beta.id.is_some();
        Ok(self.emit(value, tracked, || Op::LayerNorm {
            x: x.id,
            gamma: gamma.id,
            beta: beta.id,
            xhat,
            inv_std,
            gv: Arc::clone(&gamma.value),
            width,
        }))
    }

    // -------------------------------------------------------------- reduction

    /// Mean absolute difference, a scalar. The subgradient at ties is 0.
    pub fn l1(&self, a: &Var<T>, b: &Var<T>) -> Result<Var<T>> {
        check_same_shape("l1", a.shape(), b.shape())?;
        let n = a.value.len();
        let mut sum = 0.0;
        let mut sign = Vec::with_capacity(if self.record { n } else { 0 });
        for (x, y) in a.value.data().iter().zip(b.value.data()) {
            let d = x.to_f64() - y.to_f64();
            sum += d.abs();
            if self.record {
                sign.push(if d > 0.0 { 1 } else if d < 0.0 { -1 } else { 0 });
            }
        }
        let value = Tensor::scalar(T::from_f64(sum / n.max(1) as f64));
        Ok(self.emit(value, a.id.is_some() || b.id.is_some(), || Op::L1 { a: a.id, b: b.id, sign }))
    }

    pub fn sum(&self, a: &Var<T>) -> Var<T> {
        self.reduce(a, 1.0)
    }

    pub fn mean(&self, a: &Var<T>) -> Var<T> {
        self.reduce(a, 1.0 / a.value.len().max(1) as f64)
    }

    fn reduce(&self, a: &Var<T>, scale: f64) -> Var<T> {
        let n = a.value.len();
        let s: f64 = a.value.data().iter().map(|v| v.to_f64()).sum();
        let value = Tensor::scalar(T::from_f64(s * scale));
        match a.id {
            Some(id) => self.emit(value, true, || Op::Sum { a: id, n, scale }),
            None => self.emit(value, false, || Op::Leaf),
        }
    }

    // --------------------------------------------------------------- backward

    /// Propagates gradients from the scalar `loss` to every leaf, consuming
    /// the tape.
    pub fn backward(self, loss: &Var<T>) -> Result<Gradients<T>> {
        if loss.value.len() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                loss.shape()
            )));
        }
        let root = loss
            .id
            .ok_or_else(|| Error::Contract("loss is not connected to any parameter".into()))?;
        let nodes = self.nodes.into_inner();
        let mut grads: Vec<Option<Vec<T>>> = (0..nodes.len()).map(|_| None).collect();
        grads[root] = Some(vec![T::ONE]);

        for i in (0..=root).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &nodes[i];
            match &node.op {
                Op::Leaf => {
                    grads[i] = Some(g);
                }
                Op::Add { a, b, map, b_len } => {
                    if let Some(a) = *a {
                        let ga = slot(&mut grads, a, g.len());
                        ga.iter_mut().zip(&g).for_each(|(d, s)| *d += *s);
                    }
                    if let Some(b) = *b {
                        let gb = slot(&mut grads, b, *b_len);
                        for (c, off) in map.offsets.iter().enumerate() {
                            let src = &g[c * map.run..(c + 1) * map.run];
                            gb[*off..*off + map.run].iter_mut().zip(src).for_each(|(d, s)| *d += *s);
                        }
                    }
                }
                Op::Mul { a, b, av, bv } => {
                    if let Some(a) = *a {
                        let ga = slot(&mut grads, a, g.len());
                        for ((d, s), y) in ga.iter_mut().zip(&g).zip(bv.data()) {
                            *d += *s * *y;
                        }
                    }
                    if let Some(b) = *b {
                        let gb = slot(&mut grads, b, g.len());
                        for ((d, s), x) in gb.iter_mut().zip(&g).zip(av.data()) {
                            *d += *s * *x;
                        }
                    }
                }
                Op::Scale { a, c } => {
                    let ga = slot(&mut grads, *a, g.len());
                    ga.iter_mut().zip(&g).for_each(|(d, s)| *d += *s * *c);
                }
                Op::MatMul { a, w, av, wv, rows, k, n } => {
                    let (rows, k, n) = (*rows, *k, *n);
                    if let Some(a) = *a {
                        let ga = slot(&mut grads, a, rows * k);
                        // ga += g W^T
                        unsafe {
                            T::gemm(
                                rows, n, k, T::ONE,
                                g.as_ptr(), n as isize, 1,
                                wv.data().as_ptr(), 1, n as isize,
                                T::ONE, ga.as_mut_ptr(), k as isize, 1,
                            );
                        }
                    }
                    if let Some(w) = *w {
                        let gw = slot(&mut grads, w, k * n);
                        // gw += x^T g
                        unsafe {
                            T::gemm(
                                k, rows, n, T::ONE,
                                av.data().as_ptr(), 1, k as isize,
                                g.as_ptr(), n as isize, 1,
                                T::ONE, gw.as_mut_ptr(), n as isize, 1,
                            );
                        }
                    }
                }
                Op::BatchMatMul { a, b, av, bv, dims } => {
                    bmm_backward(&mut grads, &g, *a, *b, av, bv, *dims);
                }
                Op::Reshape { a } => {
                    let ga = slot(&mut grads, *a, g.len());
                    ga.iter_mut().zip(&g).for_each(|(d, s)| *d += *s);
                }
                Op::Permute { a, in_shape, axes } => {
                    let ga = slot(&mut grads, *a, g.len());
                    permute_walk(in_shape, axes, |o, i| ga[i] += g[o]);
                }
                Op::Gather { a, idx, row, in_rows } => {
                    let ga = slot(&mut grads, *a, in_rows * row);
                    for (o, &i) in idx.iter().enumerate() {
                        let src = &g[o * row..(o + 1) * row];
                        ga[i * row..(i + 1) * row].iter_mut().zip(src).for_each(|(d, s)| *d += *s);
                    }
                }
                Op::Concat { parts, outer, total, inner } => {
                    let mut offset = 0;
                    for (id, extent) in parts {
                        if let Some(id) = *id {
                            let e = extent * inner;
                            let gp = slot(&mut grads, id, outer * e);
                            for o in 0..*outer {
                                let src = &g[o * total * inner + offset * inner..][..e];
                                gp[o * e..(o + 1) * e].iter_mut().zip(src).for_each(|(d, s)| *d += *s);
                            }
                        }
                        offset += extent;
                    }
                }
                Op::Narrow { a, outer, extent, start, len, inner } => {
                    let ga = slot(&mut grads, *a, outer * extent * inner);
                    let e = len * inner;
                    for o in 0..*outer {
                        let base = (o * extent + start) * inner;
                        ga[base..base + e].iter_mut().zip(&g[o * e..(o + 1) * e]).for_each(|(d, s)| *d += *s);
                    }
                }
                Op::Gelu { a, x } => {
                    let ga = slot(&mut grads, *a, g.len());
                    for ((d, s), x) in ga.iter_mut().zip(&g).zip(x.data()) {
                        let x = x.to_f64();
                        let t = (GELU_C * (x + GELU_A * x * x * x)).tanh();
                        let dt = GELU_C * (1.0 + 3.0 * GELU_A * x * x);
                        let dy = 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * dt;
                        *d += T::from_f64(s.to_f64() * dy);
                    }
                }
                Op::Softmax { a, y, width } => {
                    let ga = slot(&mut grads, *a, g.len());
                    let w = *width;
                    ga.par_chunks_mut(w)
                        .zip(g.par_chunks(w))
                        .zip(y.data().par_chunks(w))
                        .for_each(|((d, gr), yr)| {
                            let dot: f64 = gr.iter().zip(yr).map(|(a, b)| a.to_f64() * b.to_f64()).sum();
                            for ((d, gv), yv) in d.iter_mut().zip(gr).zip(yr) {
                                *d += T::from_f64(yv.to_f64() * (gv.to_f64() - dot));
                            }
                        });
                }
                Op::LayerNorm { x, gamma, beta, xhat, inv_std, gv, width } => {
                    let w = *width;
                    let rows = g.len() / w.max(1);
                    if let Some(gamma) = *gamma {
                        let gg = slot(&mut grads, gamma, w);
                        for r in 0..rows {
                            for j in 0..w {
                                gg[j] += g[r * w + j] * xhat[r * w + j];
                            }
                        }
                    }
                    if let Some(beta) = *beta {
                        let gb = slot(&mut grads, beta, w);
                        for r in 0..rows {
                            for j in 0..w {
                                gb[j] += g[r * w + j];
                            }
                        }
                    }
                    if let Some(x) = *x {
                        let gx = slot(&mut grads, x, g.len());
                        let gamma = gv.data();
                        for r in 0..rows {
                            let mut m1 = 0.0;
                            let mut m2 = 0.0;
                            for j in 0..w {
                                let gh = g[r * w + j].to_f64() * gamma[j].to_f64();
                                m1 += gh;
                                m2 += gh * xhat[r * w + j].to_f64();
                            }
                            m1 /= w as f64;
                            m2 /= w as f64;
                            let is = inv_std[r].to_f64();
                            for j in 0..w {
                                let gh = g[r * w + j].to_f64() * gamma[j].to_f64();
                                let h = xhat[r * w + j].to_f64();
                                gx[r * w + j] += T::from_f64(is * (gh - m1 - h * m2));
                            }
                        }
                    }
                }
                Op::L1 { a, b, sign } => {
                    let n = sign.len().max(1) as f64;
                    let s = g[0].to_f64() / n;
                    if let Some(a) = *a {
                        let ga = slot(&mut grads, a, sign.len());
                        ga.iter_mut().zip(sign).for_each(|(d, &sg)| *d += T::from_f64(s * sg as f64));
                    }
                    if let Some(b) = *b {
                        let gb = slot(&mut grads, b, sign.len());
                        gb.iter_mut().zip(sign).for_each(|(d, &sg)| *d -= T::from_f64(s * sg as f64));
                    }
                }
                Op::Sum { a, n, scale } => {
                    let v = T::from_f64(g[0].to_f64() * scale);
                    let ga = slot(&mut grads, *a, *n);
                    ga.iter_mut().for_each(|d| *d += v);
                }
            }
        }
        let shapes = nodes.into_iter().map(|n| n.shape).collect();
        Ok(Gradients { grads, shapes })
    }
}

#[allow(clippy::too_many_arguments)]
fn bmm_backward<T: Element>(
    grads: &mut [Option<Vec<T>>],
    g: &[T],
    a: Option<usize>,
    b: Option<usize>,
    av: &Tensor<T>,
    bv: &Tensor<T>,
    d: BmmDims,
) {
    let BmmDims { batch, m, k, n, trans_b } = d;
    if let Some(a) = a {
        let ga = slot(grads, a, batch * m * k);
        // ga += g B^T, where B is the logical k x n operand.
        let (rs, cs) = if trans_b { (k as isize, 1) } else { (1, n as isize) };
        if m * k > 0 {
            ga.par_chunks_mut(m * k).enumerate().for_each(|(i, ga)| unsafe {
                T::gemm(
                    m, n, k, T::ONE,
                    g[i * m * n..].as_ptr(), n as isize, 1,
                    bv.data()[i * k * n..].as_ptr(), rs, cs,
                    T::ONE, ga.as_mut_ptr(), k as isize, 1,
                );
            });
        }
    }
    if let Some(b) = b {
        let gb = slot(grads, b, batch * k * n);
        if k * n > 0 {
            gb.par_chunks_mut(k * n).enumerate().for_each(|(i, gb)| unsafe {
                let ap = av.data()[i * m * k..].as_ptr();
                let gp = g[i * m * n..].as_ptr();
                if trans_b {
                    // stored n x k: gb += g^T A
                    T::gemm(n, m, k, T::ONE, gp, 1, n as isize, ap, k as isize, 1, T::ONE, gb.as_mut_ptr(), k as isize, 1);
                } else {
                    // k x n: gb += A^T g
                    T::gemm(k, m, n, T::ONE, ap, 1, k as isize, gp, n as isize, 1, T::ONE, gb.as_mut_ptr(), n as isize, 1);
                }
            });
        }
    }
}

fn broadcast_map(a: &[usize], b: &[usize]) -> Result<Broadcast> {
    if b.len() > a.len() {
        return Err(Error::dim("broadcast", format!("{b:?} onto {a:?}")));
    }
    let pad = a.len() - b.len();
    let bfull: Vec<usize> = std::iter::repeat(1).take(pad).chain(b.iter().copied()).collect();
    for (x, y) in a.iter().zip(&bfull) {
        if *y != *x && *y != 1 {
            return Err(Error::dim("broadcast", format!("{b:?} onto {a:?}")));
        }
    }
    // Longest suffix on which the shapes agree forms one contiguous run.
    let mut split = a.len();
    while split > 0 && a[split - 1] == bfull[split - 1] {
        split -= 1;
    }
    let run = numel(&a[split..]);
    let outer_shape = &a[..split];
    let b_strides = strides(&bfull);
    let n_runs = numel(outer_shape);
    let mut offsets = Vec::with_capacity(n_runs);
    let mut idx = vec![0usize; split];
    for _ in 0..n_runs {
        let off = (0..split).map(|d| if bfull[d] == 1 { 0 } else { idx[d] * b_strides[d] }).sum();
        offsets.push(off);
        for d in (0..split).rev() {
            idx[d] += 1;
            if idx[d] < outer_shape[d] {
                break;
            }
            idx[d] = 0;
        }
    }
    Ok(Broadcast { run, offsets })
}

/// Visits every element of a permuted view, calling `f(out_offset, in_offset)`.
fn permute_walk(in_shape: &[usize], axes: &[usize], mut f: impl FnMut(usize, usize)) {
    let in_strides = strides(in_shape);
    let out_shape: Vec<usize> = axes.iter().map(|&i| in_shape[i]).collect();
    let ps: Vec<usize> = axes.iter().map(|&i| in_strides[i]).collect();
    let total = numel(&out_shape);
    if total == 0 {
        return;
    }
    let r = out_shape.len();
    if r == 0 {
        f(0, 0);
        return;
    }
    let last = out_shape[r - 1];
    let last_stride = ps[r - 1];
    let mut idx = vec![0usize; r - 1];
    let mut base = 0usize;
    let mut o = 0usize;
    while o < total {
        for j in 0..last {
            f(o + j, base + j * last_stride);
        }
        o += last;
        for d in (0..r - 1).rev() {
            idx[d] += 1;
            base += ps[d];
            if idx[d] < out_shape[d] {
                break;
            }
            base -= ps[d] * out_shape[d];
            idx[d] = 0;
        }
    }
}
