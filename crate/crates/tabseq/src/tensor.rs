//! Dense f64 tensors and a reverse-mode automatic differentiation tape.
//!
//! Everything the model computes goes through here: plain [`Tensor`] values
//! for parameters and inference buffers, and a [`Tape`] that records
//! differentiable operations so a single `backward` call accumulates
//! gradients into every trainable leaf.

use crate::error::{Error, Result};

/// A plain dense tensor: row-major f64 data plus a shape.
///
/// Tensors are immutable once built (the tape owns mutation) and safe to
/// share across threads, which the wavefront scheduler relies on.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::Shape(format!(
                "shape {:?} implies {} elements, got {}",
                shape,
                numel,
                data.len()
            )));
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let numel = shape.iter().product();
        Tensor { shape: shape.to_vec(), data: vec![0.0; numel] }
    }

    pub fn scalar(v: f64) -> Self {
        Tensor { shape: vec![1], data: vec![v] }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    /// Element at a full multi-dimensional index.
    pub fn at(&self, idx: &[usize]) -> f64 {
        debug_assert_eq!(idx.len(), self.shape.len());
        let mut flat = 0;
        for (d, &i) in idx.iter().enumerate() {
            debug_assert!(i < self.shape[d]);
            flat = flat * self.shape[d] + i;
        }
        self.data[flat]
    }

    /// Contiguous row `r` when the tensor is viewed as `[R, inner]`.
    pub fn row(&self, r: usize) -> &[f64] {
        let inner: usize = self.shape[1..].iter().product();
        &self.data[r * inner..(r + 1) * inner]
    }
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct TensorId(usize);

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    /// `a` viewed as `[R, K]` (leading dims collapsed) times `b` `[K, P]`.
    MatMul { a: TensorId, b: TensorId, r: usize, k: usize, p: usize },
    Add { a: TensorId, b: TensorId },
    Sub { a: TensorId, b: TensorId },
    Mul { a: TensorId, b: TensorId },
    Scale { a: TensorId, alpha: f64 },
    OneMinus { a: TensorId },
    Tanh { a: TensorId },
    Sigmoid { a: TensorId },
    Relu { a: TensorId },
    Softmax { a: TensorId, axis: usize },
    /// Rows of `a` viewed as `[R, inner]`, in the given order (may repeat).
    Gather { a: TensorId, indices: Vec<usize> },
    Concat { axis: usize, inputs: Vec<TensorId> },
    Reshape { a: TensorId },
    Transpose2d { a: TensorId },
    Sum { a: TensorId },
    LayerNorm { x: TensorId, gain: TensorId, bias: TensorId, eps: f64 },
    Dropout { a: TensorId, mask: Vec<f64>, keep: f64 },
    /// Summed `-log softmax(logits)[target]` over unmasked rows.
    CrossEntropyRows { logits: TensorId, targets: Vec<Option<usize>> },
}

struct Node {
    value: Tensor,
    op: Op,
    requires: bool,
}

/// Append-only record of executed operations, in topological order by
/// construction. One tape per forward pass; `backward` walks it in reverse.
pub struct Tape {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

// ── matmul kernels ──────────────────────────────────────────────────

/// c[r,p] += sum_k a[r,k] * b[k,p]; accumulation runs in ascending k for
/// every output element, which keeps schedules bit-comparable.
pub(crate) fn matmul_acc(a: &[f64], b: &[f64], rows: usize, k: usize, p: usize, c: &mut [f64]) {
    for r in 0..rows {
        let a_row = &a[r * k..(r + 1) * k];
        let c_row = &mut c[r * p..(r + 1) * p];
        for (kk, &av) in a_row.iter().enumerate() {
            let b_row = &b[kk * p..(kk + 1) * p];
            for (cv, &bv) in c_row.iter_mut().zip(b_row) {
                *cv += av * bv;
            }
        }
    }
}

/// da[r,k] += sum_p g[r,p] * b[k,p]  (g · bᵀ)
fn matmul_nt_acc(g: &[f64], b: &[f64], rows: usize, k: usize, p: usize, da: &mut [f64]) {
    for r in 0..rows {
        let g_row = &g[r * p..(r + 1) * p];
        let da_row = &mut da[r * k..(r + 1) * k];
        for kk in 0..k {
            let b_row = &b[kk * p..(kk + 1) * p];
            let mut s = 0.0;
            for (gv, bv) in g_row.iter().zip(b_row) {
                s += gv * bv;
            }
            da_row[kk] += s;
        }
    }
}

/// db[k,p] += sum_r a[r,k] * g[r,p]  (aᵀ · g)
fn matmul_tn_acc(a: &[f64], g: &[f64], rows: usize, k: usize, p: usize, db: &mut [f64]) {
    for r in 0..rows {
        let a_row = &a[r * k..(r + 1) * k];
        let g_row = &g[r * p..(r + 1) * p];
        for (kk, &av) in a_row.iter().enumerate() {
            let db_row = &mut db[kk * p..(kk + 1) * p];
            for (dv, &gv) in db_row.iter_mut().zip(g_row) {
                *dv += av * gv;
            }
        }
    }
}

// ── broadcasting helpers ────────────────────────────────────────────

fn broadcast_shape(a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
    let n = a.len().max(b.len());
    let mut out = vec![0usize; n];
    for i in 0..n {
        let da = if i < n - a.len() { 1 } else { a[i - (n - a.len())] };
        let db = if i < n - b.len() { 1 } else { b[i - (n - b.len())] };
        if da != db && da != 1 && db != 1 {
            return Err(Error::Shape(format!(
                "shapes {:?} and {:?} are not broadcastable",
                a, b
            )));
        }
        out[i] = da.max(db);
    }
    Ok(out)
}

fn pad_left(shape: &[usize], n: usize) -> Vec<usize> {
    let mut out = vec![1usize; n];
    out[n - shape.len()..].copy_from_slice(shape);
    out
}

/// Flat index into `shape` (padded) for coordinates `coords` in the
/// broadcast output, collapsing broadcast axes to 0.
fn src_index(coords: &[usize], padded: &[usize]) -> usize {
    let mut f = 0;
    for (d, &c) in coords.iter().enumerate() {
        let cc = if padded[d] == 1 { 0 } else { c };
        f = f * padded[d] + cc;
    }
    f
}

fn for_each_broadcast(
    out_shape: &[usize],
    a_shape: &[usize],
    b_shape: &[usize],
    mut f: impl FnMut(usize, usize, usize),
) {
    let n = out_shape.len();
    let a_pad = pad_left(a_shape, n);
    let b_pad = pad_left(b_shape, n);
    let numel: usize = out_shape.iter().product();
    let mut coords = vec![0usize; n];
    for flat in 0..numel {
        let ai = src_index(&coords, &a_pad);
        let bi = src_index(&coords, &b_pad);
        f(flat, ai, bi);
        for d in (0..n).rev() {
            coords[d] += 1;
            if coords[d] < out_shape[d] {
                break;
            }
            coords[d] = 0;
        }
    }
}

/// Reduce `grad` (shaped `out_shape`) back onto `target_shape` by summing
/// over broadcast axes.
fn reduce_to_shape(grad: &[f64], out_shape: &[usize], target_shape: &[usize]) -> Vec<f64> {
    if out_shape == target_shape {
        return grad.to_vec();
    }
    let numel_t: usize = target_shape.iter().product();
    let mut out = vec![0.0; numel_t];
    let n = out_shape.len();
    let t_pad = pad_left(target_shape, n);
    let mut coords = vec![0usize; n];
    for &g in grad.iter() {
        out[src_index(&coords, &t_pad)] += g;
        for d in (0..n).rev() {
            coords[d] += 1;
            if coords[d] < out_shape[d] {
                break;
            }
            coords[d] = 0;
        }
    }
    out
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new(), grads: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, requires: bool) -> TensorId {
        self.nodes.push(Node { value, op, requires });
        self.grads.push(None);
        TensorId(self.nodes.len() - 1)
    }

    fn requires(&self, id: TensorId) -> bool {
        self.nodes[id.0].requires
    }

    pub fn value(&self, id: TensorId) -> &Tensor {
        &self.nodes[id.0].value
    }

    pub fn data(&self, id: TensorId) -> &[f64] {
        self.nodes[id.0].value.data()
    }

    pub fn shape(&self, id: TensorId) -> &[usize] {
        self.nodes[id.0].value.shape()
    }

    pub fn grad(&self, id: TensorId) -> Option<&[f64]> {
        self.grads[id.0].as_deref()
    }

    /// Record a leaf. Trainable leaves receive gradients on `backward`.
    pub fn leaf(&mut self, t: Tensor, trainable: bool) -> TensorId {
        self.push(t, Op::Leaf, trainable)
    }

    pub fn constant(&mut self, t: Tensor) -> TensorId {
        self.leaf(t, false)
    }

    pub fn zeros(&mut self, shape: &[usize]) -> TensorId {
        self.constant(Tensor::zeros(shape))
    }

    // ── forward ops ─────────────────────────────────────────────────

    /// `a` is `[.., M, K]` (leading dims collapsed into rows), `b` is `[K, P]`.
    pub fn matmul(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        let a_shape = self.shape(a).to_vec();
        let b_shape = self.shape(b).to_vec();
        if a_shape.is_empty() || b_shape.len() != 2 {
            return Err(Error::Shape(format!(
                "matmul needs [..,M,K] by [K,P], got {:?} by {:?}",
                a_shape, b_shape
            )));
        }
        let k = *a_shape.last().unwrap();
        if b_shape[0] != k {
            return Err(Error::Shape(format!(
                "matmul inner dimensions disagree: {:?} by {:?}",
                a_shape, b_shape
            )));
        }
        let p = b_shape[1];
        let rows = self.data(a).len() / k;
        let mut out = vec![0.0; rows * p];
        matmul_acc(self.data(a), self.data(b), rows, k, p, &mut out);
        let mut out_shape = a_shape.clone();
        *out_shape.last_mut().unwrap() = p;
        let req = self.requires(a) || self.requires(b);
        Ok(self.push(
            Tensor { shape: out_shape, data: out },
            Op::MatMul { a, b, r: rows, k, p },
            req,
        ))
    }

    fn binary(&mut self, a: TensorId, b: TensorId, which: u8) -> Result<TensorId> {
        let a_shape = self.shape(a).to_vec();
        let b_shape = self.shape(b).to_vec();
        let req = self.requires(a) || self.requires(b);
        let (out_shape, data) = if a_shape == b_shape {
            // fast path, no index arithmetic
            let av = self.data(a);
            let bv = self.data(b);
            let data: Vec<f64> = match which {
                0 => av.iter().zip(bv).map(|(x, y)| x + y).collect(),
                1 => av.iter().zip(bv).map(|(x, y)| x - y).collect(),
                _ => av.iter().zip(bv).map(|(x, y)| x * y).collect(),
            };
            (a_shape, data)
        } else {
            let out_shape = broadcast_shape(&a_shape, &b_shape)?;
            let numel: usize = out_shape.iter().product();
            let mut data = vec![0.0; numel];
            let av = self.data(a);
            let bv = self.data(b);
            for_each_broadcast(&out_shape, &a_shape, &b_shape, |o, ai, bi| {
                data[o] = match which {
                    0 => av[ai] + bv[bi],
                    1 => av[ai] - bv[bi],
                    _ => av[ai] * bv[bi],
                };
            });
            (out_shape, data)
        };
        let op = match which {
            0 => Op::Add { a, b },
            1 => Op::Sub { a, b },
            _ => Op::Mul { a, b },
        };
        Ok(self.push(Tensor { shape: out_shape, data }, op, req))
    }

    pub fn add(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        self.binary(a, b, 0)
    }

    pub fn sub(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        self.binary(a, b, 1)
    }

    pub fn mul(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        self.binary(a, b, 2)
    }

    pub fn scale(&mut self, a: TensorId, alpha: f64) -> TensorId {
        let value = Tensor {
            shape: self.shape(a).to_vec(),
            data: self.data(a).iter().map(|&x| x * alpha).collect(),
        };
        let req = self.requires(a);
        self.push(value, Op::Scale { a, alpha }, req)
    }

    pub fn one_minus(&mut self, a: TensorId) -> TensorId {
        let value = Tensor {
            shape: self.shape(a).to_vec(),
            data: self.data(a).iter().map(|&x| 1.0 - x).collect(),
        };
        let req = self.requires(a);
        self.push(value, Op::OneMinus { a }, req)
    }

    fn unary(&mut self, a: TensorId, f: impl Fn(f64) -> f64, op: Op) -> TensorId {
        let value = Tensor {
            shape: self.shape(a).to_vec(),
            data: self.data(a).iter().map(|&x| f(x)).collect(),
        };
        let req = self.requires(a);
        self.push(value, op, req)
    }

    pub fn tanh(&mut self, a: TensorId) -> TensorId {
        self.unary(a, f64::tanh, Op::Tanh { a })
    }

    pub fn sigmoid(&mut self, a: TensorId) -> TensorId {
        self.unary(a, |x| 1.0 / (1.0 + (-x).exp()), Op::Sigmoid { a })
    }

    pub fn relu(&mut self, a: TensorId) -> TensorId {
        self.unary(a, |x| x.max(0.0), Op::Relu { a })
    }

    pub fn softmax(&mut self, a: TensorId, axis: usize) -> Result<TensorId> {
        let shape = self.shape(a).to_vec();
        if axis >= shape.len() {
            return Err(Error::Shape(format!(
                "softmax axis {} out of range for shape {:?}",
                axis, shape
            )));
        }
        let axis_len = shape[axis];
        let outer: usize = shape[..axis].iter().product();
        let inner: usize = shape[axis + 1..].iter().product();
        let src = self.data(a);
        let mut data = vec![0.0; src.len()];
        for o in 0..outer {
            for i in 0..inner {
                let base = o * axis_len * inner + i;
                let mut m = f64::NEG_INFINITY;
                for s in 0..axis_len {
                    let v = src[base + s * inner];
                    if v > m {
                        m = v;
                    }
                }
                let mut sum = 0.0;
                for s in 0..axis_len {
                    let e = (src[base + s * inner] - m).exp();
                    data[base + s * inner] = e;
                    sum += e;
                }
                for s in 0..axis_len {
                    data[base + s * inner] /= sum;
                }
            }
        }
        let req = self.requires(a);
        Ok(self.push(Tensor { shape, data }, Op::Softmax { a, axis }, req))
    }

    /// Select rows (first axis) of `a` in the given order; indices may repeat.
    pub fn gather(&mut self, a: TensorId, indices: &[usize]) -> Result<TensorId> {
        let shape = self.shape(a).to_vec();
        if shape.is_empty() {
            return Err(Error::Shape("gather needs at least one axis".into()));
        }
        let rows = shape[0];
        let inner: usize = shape[1..].iter().product();
        for &ix in indices {
            if ix >= rows {
                return Err(Error::Shape(format!(
                    "gather index {} out of range for {} rows",
                    ix, rows
                )));
            }
        }
        let src = self.data(a);
        let mut data = vec![0.0; indices.len() * inner];
        for (r, &ix) in indices.iter().enumerate() {
            data[r * inner..(r + 1) * inner].copy_from_slice(&src[ix * inner..(ix + 1) * inner]);
        }
        let mut out_shape = shape.clone();
        out_shape[0] = indices.len();
        let req = self.requires(a);
        Ok(self.push(
            Tensor { shape: out_shape, data },
            Op::Gather { a, indices: indices.to_vec() },
            req,
        ))
    }

    pub fn row(&mut self, a: TensorId, r: usize) -> Result<TensorId> {
        self.gather(a, &[r])
    }

    pub fn concat(&mut self, axis: usize, inputs: &[TensorId]) -> Result<TensorId> {
        if inputs.is_empty() {
            return Err(Error::Shape("concat of zero tensors".into()));
        }
        let first = self.shape(inputs[0]).to_vec();
        if axis >= first.len() {
            return Err(Error::Shape(format!(
                "concat axis {} out of range for shape {:?}",
                axis, first
            )));
        }
        let mut axis_total = 0;
        for &t in inputs {
            let s = self.shape(t);
            if s.len() != first.len()
                || s[..axis] != first[..axis]
                || s[axis + 1..] != first[axis + 1..]
            {
                return Err(Error::Shape(format!(
                    "concat shapes disagree off axis {}: {:?} vs {:?}",
                    axis, first, s
                )));
            }
            axis_total += s[axis];
        }
        let outer: usize = first[..axis].iter().product();
        let inner: usize = first[axis + 1..].iter().product();
        let mut out_shape = first.clone();
        out_shape[axis] = axis_total;
        let mut data = vec![0.0; outer * axis_total * inner];
        let mut offset = 0;
        for &t in inputs {
            let s_axis = self.shape(t)[axis];
            let block = s_axis * inner;
            let src = self.data(t);
            for o in 0..outer {
                let dst = o * axis_total * inner + offset * inner;
                data[dst..dst + block].copy_from_slice(&src[o * block..(o + 1) * block]);
            }
            offset += s_axis;
        }
        let req = inputs.iter().any(|&t| self.requires(t));
        Ok(self.push(
            Tensor { shape: out_shape, data },
            Op::Concat { axis, inputs: inputs.to_vec() },
            req,
        ))
    }

    pub fn reshape(&mut self, a: TensorId, shape: &[usize]) -> Result<TensorId> {
        let numel: usize = shape.iter().product();
        if numel != self.data(a).len() {
            return Err(Error::Shape(format!(
                "reshape {:?} -> {:?} changes element count",
                self.shape(a),
                shape
            )));
        }
        let value = Tensor { shape: shape.to_vec(), data: self.data(a).to_vec() };
        let req = self.requires(a);
        Ok(self.push(value, Op::Reshape { a }, req))
    }

    pub fn transpose2d(&mut self, a: TensorId) -> Result<TensorId> {
        let shape = self.shape(a).to_vec();
        if shape.len() != 2 {
            return Err(Error::Shape(format!("transpose needs 2-D, got {:?}", shape)));
        }
        let (r, c) = (shape[0], shape[1]);
        let src = self.data(a);
        let mut data = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                data[j * r + i] = src[i * c + j];
            }
        }
        let req = self.requires(a);
        Ok(self.push(Tensor { shape: vec![c, r], data }, Op::Transpose2d { a }, req))
    }

    /// Sum of all elements, as a scalar.
    pub fn sum(&mut self, a: TensorId) -> TensorId {
        let s: f64 = self.data(a).iter().sum();
        let req = self.requires(a);
        self.push(Tensor::scalar(s), Op::Sum { a }, req)
    }

    /// Normalize the last axis to zero mean and unit variance, then apply
    /// learned gain and bias. `eps` sits inside the square root so constant
    /// rows stay finite.
    pub fn layer_norm(
        &mut self,
        x: TensorId,
        gain: TensorId,
        bias: TensorId,
        eps: f64,
    ) -> Result<TensorId> {
        let shape = self.shape(x).to_vec();
        let d = *shape.last().ok_or_else(|| Error::Shape("layer_norm on 0-d tensor".into()))?;
        if self.shape(gain) != [d] || self.shape(bias) != [d] {
            return Err(Error::Shape(format!(
                "layer_norm gain/bias must be [{}], got {:?}/{:?}",
                d,
                self.shape(gain),
                self.shape(bias)
            )));
        }
        let src = self.data(x);
        let g = self.data(gain);
        let b = self.data(bias);
        let mut data = vec![0.0; src.len()];
        for (row, out_row) in src.chunks(d).zip(data.chunks_mut(d)) {
            let mean: f64 = row.iter().sum::<f64>() / d as f64;
            let var: f64 = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let inv = 1.0 / (var + eps).sqrt();
            for j in 0..d {
                out_row[j] = (row[j] - mean) * inv * g[j] + b[j];
            }
        }
        let req = self.requires(x) || self.requires(gain) || self.requires(bias);
        Ok(self.push(
            Tensor { shape, data },
            Op::LayerNorm { x, gain, bias, eps },
            req,
        ))
    }

    /// Inverted dropout: keeps each element with probability `keep` and
    /// rescales by `1/keep`, so inference (no dropout call) is identity.
    /// `keep == 1.0` is exact identity.
    pub fn dropout(&mut self, a: TensorId, keep: f64, rng: &mut impl rand::Rng) -> TensorId {
        if keep >= 1.0 {
            let value = self.value(a).clone();
            let req = self.requires(a);
            let mask = vec![1.0; self.data(a).len()];
            return self.push(value, Op::Dropout { a, mask, keep: 1.0 }, req);
        }
        let n = self.data(a).len();
        let mask: Vec<f64> =
            (0..n).map(|_| if rng.gen::<f64>() < keep { 1.0 } else { 0.0 }).collect();
        let data: Vec<f64> =
            self.data(a).iter().zip(&mask).map(|(&x, &m)| x * m / keep).collect();
        let value = Tensor { shape: self.shape(a).to_vec(), data };
        let req = self.requires(a);
        self.push(value, Op::Dropout { a, mask, keep }, req)
    }

    /// `-log softmax(logits)[target]` summed over rows with a target;
    /// `None` rows (padding, diagonal cells) contribute exactly zero.
    pub fn cross_entropy_rows(
        &mut self,
        logits: TensorId,
        targets: &[Option<usize>],
    ) -> Result<TensorId> {
        let shape = self.shape(logits).to_vec();
        if shape.len() != 2 {
            return Err(Error::Shape(format!(
                "cross_entropy expects [rows, classes], got {:?}",
                shape
            )));
        }
        let (rows, classes) = (shape[0], shape[1]);
        if targets.len() != rows {
            return Err(Error::Shape(format!(
                "cross_entropy got {} targets for {} rows",
                targets.len(),
                rows
            )));
        }
        let src = self.data(logits);
        let mut total = 0.0;
        for (r, t) in targets.iter().enumerate() {
            if let Some(y) = *t {
                if y >= classes {
                    return Err(Error::Label(format!(
                        "target class {} out of range (0..{})",
                        y, classes
                    )));
                }
                let row = &src[r * classes..(r + 1) * classes];
                let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let lse: f64 = row.iter().map(|&v| (v - m).exp()).sum::<f64>().ln() + m;
                total -= row[y] - lse;
            }
        }
        let req = self.requires(logits);
        Ok(self.push(
            Tensor::scalar(total),
            Op::CrossEntropyRows { logits, targets: targets.to_vec() },
            req,
        ))
    }

    /// Single-row convenience: `-log softmax(logits)[target]`.
    pub fn cross_entropy(&mut self, logits: TensorId, target: usize) -> Result<TensorId> {
        let n = self.data(logits).len();
        let flat = self.reshape(logits, &[1, n])?;
        self.cross_entropy_rows(flat, &[Some(target)])
    }

    // ── backward ────────────────────────────────────────────────────

    fn acc(&self, grads: &mut [Option<Vec<f64>>], id: TensorId, g: &[f64]) {
        if !self.requires(id) {
            return;
        }
        let slot = &mut grads[id.0];
        match slot {
            Some(buf) => {
                for (a, b) in buf.iter_mut().zip(g) {
                    *a += b;
                }
            }
            None => *slot = Some(g.to_vec()),
        }
    }

    /// Accumulate gradients of a scalar `loss` into every node that needs
    /// them. Each call propagates only its own seed, so gradients add
    /// across repeated calls; use [`Tape::zero_grads`] to reuse the tape
    /// for an independent pass.
    pub fn backward(&mut self, loss: TensorId) -> Result<()> {
        if self.data(loss).len() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut local: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        self.acc(&mut local, loss, &[1.0]);
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].requires {
                continue;
            }
            let g = match &local[i] {
                Some(g) => g.clone(),
                None => continue,
            };
            let op = self.nodes[i].op.clone();
            match op {
                Op::Leaf => {}
                Op::MatMul { a, b, r, k, p } => {
                    if self.requires(a) {
                        let mut da = vec![0.0; r * k];
                        matmul_nt_acc(&g, self.data(b), r, k, p, &mut da);
                        self.acc(&mut local, a, &da);
                    }
                    if self.requires(b) {
                        let mut db = vec![0.0; k * p];
                        matmul_tn_acc(self.data(a), &g, r, k, p, &mut db);
                        self.acc(&mut local, b, &db);
                    }
                }
                Op::Add { a, b } => {
                    let out_shape = self.shape(TensorId(i)).to_vec();
                    if self.requires(a) {
                        let da = reduce_to_shape(&g, &out_shape, self.shape(a));
                        self.acc(&mut local, a, &da);
                    }
                    if self.requires(b) {
                        let db = reduce_to_shape(&g, &out_shape, self.shape(b));
                        self.acc(&mut local, b, &db);
                    }
                }
                Op::Sub { a, b } => {
                    let out_shape = self.shape(TensorId(i)).to_vec();
                    if self.requires(a) {
                        let da = reduce_to_shape(&g, &out_shape, self.shape(a));
                        self.acc(&mut local, a, &da);
                    }
                    if self.requires(b) {
                        let neg: Vec<f64> = g.iter().map(|&v| -v).collect();
                        let db = reduce_to_shape(&neg, &out_shape, self.shape(b));
                        self.acc(&mut local, b, &db);
                    }
                }
                Op::Mul { a, b } => {
                    let out_shape = self.shape(TensorId(i)).to_vec();
                    let a_shape = self.shape(a).to_vec();
                    let b_shape = self.shape(b).to_vec();
                    if a_shape == b_shape {
                        if self.requires(a) {
                            let da: Vec<f64> =
                                g.iter().zip(self.data(b)).map(|(&gv, &bv)| gv * bv).collect();
                            self.acc(&mut local, a, &da);
                        }
                        if self.requires(b) {
                            let db: Vec<f64> =
                                g.iter().zip(self.data(a)).map(|(&gv, &av)| gv * av).collect();
                            self.acc(&mut local, b, &db);
                        }
                    } else {
                        let numel: usize = out_shape.iter().product();
                        let mut da_full = vec![0.0; numel];
                        let mut db_full = vec![0.0; numel];
                        {
                            let av = self.data(a);
                            let bv = self.data(b);
                            for_each_broadcast(&out_shape, &a_shape, &b_shape, |o, ai, bi| {
                                da_full[o] = g[o] * bv[bi];
                                db_full[o] = g[o] * av[ai];
                            });
                        }
                        if self.requires(a) {
                            let da = reduce_to_shape(&da_full, &out_shape, &a_shape);
                            self.acc(&mut local, a, &da);
                        }
                        if self.requires(b) {
                            let db = reduce_to_shape(&db_full, &out_shape, &b_shape);
                            self.acc(&mut local, b, &db);
                        }
                    }
                }
                Op::Scale { a, alpha } => {
                    let da: Vec<f64> = g.iter().map(|&v| v * alpha).collect();
                    self.acc(&mut local, a, &da);
                }
                Op::OneMinus { a } => {
                    let da: Vec<f64> = g.iter().map(|&v| -v).collect();
                    self.acc(&mut local, a, &da);
                }
                Op::Tanh { a } => {
                    let out = self.data(TensorId(i));
                    let da: Vec<f64> =
                        g.iter().zip(out).map(|(&gv, &t)| gv * (1.0 - t * t)).collect();
                    self.acc(&mut local, a, &da);
                }
                Op::Sigmoid { a } => {
                    let out = self.data(TensorId(i));
                    let da: Vec<f64> =
                        g.iter().zip(out).map(|(&gv, &s)| gv * s * (1.0 - s)).collect();
                    self.acc(&mut local, a, &da);
                }
                Op::Relu { a } => {
                    let src = self.data(a);
                    let da: Vec<f64> = g
                        .iter()
                        .zip(src)
                        .map(|(&gv, &x)| if x > 0.0 { gv } else { 0.0 })
                        .collect();
                    self.acc(&mut local, a, &da);
                }
                Op::Softmax { a, axis } => {
                    let shape = self.shape(TensorId(i)).to_vec();
                    let out = self.data(TensorId(i));
                    let axis_len = shape[axis];
                    let outer: usize = shape[..axis].iter().product();
                    let inner: usize = shape[axis + 1..].iter().product();
                    let mut da = vec![0.0; out.len()];
                    for o in 0..outer {
                        for ii in 0..inner {
                            let base = o * axis_len * inner + ii;
                            let mut dot = 0.0;
                            for s in 0..axis_len {
                                let f = base + s * inner;
                                dot += g[f] * out[f];
                            }
                            for s in 0..axis_len {
                                let f = base + s * inner;
                                da[f] = out[f] * (g[f] - dot);
                            }
                        }
                    }
                    self.acc(&mut local, a, &da);
                }
                Op::Gather { a, indices } => {
                    let inner: usize = self.shape(a)[1..].iter().product();
                    let mut da = vec![0.0; self.data(a).len()];
                    for (r, &ix) in indices.iter().enumerate() {
                        let dst = &mut da[ix * inner..(ix + 1) * inner];
                        let src = &g[r * inner..(r + 1) * inner];
                        for (d, s) in dst.iter_mut().zip(src) {
                            *d += s;
                        }
                    }
                    self.acc(&mut local, a, &da);
                }
                Op::Concat { axis, inputs } => {
                    let out_shape = self.shape(TensorId(i)).to_vec();
                    let outer: usize = out_shape[..axis].iter().product();
                    let inner: usize = out_shape[axis + 1..].iter().product();
                    let axis_total = out_shape[axis];
                    let mut offset = 0;
                    for &t in &inputs {
                        let s_axis = self.shape(t)[axis];
                        let block = s_axis * inner;
                        if self.requires(t) {
                            let mut dt = vec![0.0; self.data(t).len()];
                            for o in 0..outer {
                                let src = o * axis_total * inner + offset * inner;
                                dt[o * block..(o + 1) * block]
                                    .copy_from_slice(&g[src..src + block]);
                            }
                            self.acc(&mut local, t, &dt);
                        }
                        offset += s_axis;
                    }
                }
                Op::Reshape { a } => {
                    self.acc(&mut local, a, &g);
                }
                Op::Transpose2d { a } => {
                    let out_shape = self.shape(TensorId(i)).to_vec();
                    let (r, c) = (out_shape[0], out_shape[1]);
                    let mut da = vec![0.0; g.len()];
                    for x in 0..r {
                        for y in 0..c {
                            da[y * r + x] = g[x * c + y];
                        }
                    }
                    self.acc(&mut local, a, &da);
                }
                Op::Sum { a } => {
                    let da = vec![g[0]; self.data(a).len()];
                    self.acc(&mut local, a, &da);
                }
                Op::LayerNorm { x, gain, bias, eps } => {
                    let d = *self.shape(x).last().unwrap();
                    let src = self.data(x).to_vec();
                    let gv = self.data(gain).to_vec();
                    let mut dx = vec![0.0; src.len()];
                    let mut dgain = vec![0.0; d];
                    let mut dbias = vec![0.0; d];
                    for (v, row) in src.chunks(d).enumerate() {
                        let go = &g[v * d..(v + 1) * d];
                        let mean: f64 = row.iter().sum::<f64>() / d as f64;
                        let var: f64 =
                            row.iter().map(|&x| (x - mean) * (x - mean)).sum::<f64>() / d as f64;
                        let inv = 1.0 / (var + eps).sqrt();
                        let xhat: Vec<f64> = row.iter().map(|&x| (x - mean) * inv).collect();
                        let mut dxhat = vec![0.0; d];
                        for j in 0..d {
                            dgain[j] += go[j] * xhat[j];
                            dbias[j] += go[j];
                            dxhat[j] = go[j] * gv[j];
                        }
                        let sum_dxhat: f64 = dxhat.iter().sum();
                        let sum_dxhat_xhat: f64 =
                            dxhat.iter().zip(&xhat).map(|(a, b)| a * b).sum();
                        let df = d as f64;
                        for j in 0..d {
                            dx[v * d + j] =
                                inv / df * (df * dxhat[j] - sum_dxhat - xhat[j] * sum_dxhat_xhat);
                        }
                    }
                    if self.requires(x) {
                        self.acc(&mut local, x, &dx);
                    }
                    if self.requires(gain) {
                        self.acc(&mut local, gain, &dgain);
                    }
                    if self.requires(bias) {
                        self.acc(&mut local, bias, &dbias);
                    }
                }
                Op::Dropout { a, mask, keep } => {
                    let da: Vec<f64> =
                        g.iter().zip(&mask).map(|(&gv, &m)| gv * m / keep).collect();
                    self.acc(&mut local, a, &da);
                }
                Op::CrossEntropyRows { logits, targets } => {
                    let shape = self.shape(logits).to_vec();
                    let (rows, classes) = (shape[0], shape[1]);
                    let src = self.data(logits);
                    let mut dl = vec![0.0; rows * classes];
                    for (r, t) in targets.iter().enumerate() {
                        if let Some(y) = *t {
                            let row = &src[r * classes..(r + 1) * classes];
                            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                            let exps: Vec<f64> = row.iter().map(|&v| (v - m).exp()).collect();
                            let sum: f64 = exps.iter().sum();
                            for c in 0..classes {
                                let soft = exps[c] / sum;
                                let onehot = if c == y { 1.0 } else { 0.0 };
                                dl[r * classes + c] = g[0] * (soft - onehot);
                            }
                        }
                    }
                    self.acc(&mut local, logits, &dl);
                }
            }
        }
        for (slot, new) in self.grads.iter_mut().zip(local) {
            if let Some(g) = new {
                match slot {
                    Some(buf) => {
                        for (a, b) in buf.iter_mut().zip(&g) {
                            *a += b;
                        }
                    }
                    None => *slot = Some(g),
                }
            }
        }
        Ok(())
    }

    /// Clear all accumulated gradients so the tape can be reused.
    pub fn zero_grads(&mut self) {
        for g in self.grads.iter_mut() {
            *g = None;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    fn rand_vec(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
        (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()
    }

    fn close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol * (1.0 + a.abs().max(b.abs()))
    }

    /// Central finite differences on a scalar function of flat inputs.
    fn numerical_grad(
        f: &dyn Fn(&[Vec<f64>]) -> f64,
        inputs: &[Vec<f64>],
        h: f64,
    ) -> Vec<Vec<f64>> {
        let mut out = Vec::new();
        for p in 0..inputs.len() {
            let mut g = vec![0.0; inputs[p].len()];
            for i in 0..inputs[p].len() {
                let mut plus = inputs.to_vec();
                plus[p][i] += h;
                let mut minus = inputs.to_vec();
                minus[p][i] -= h;
                g[i] = (f(&plus) - f(&minus)) / (2.0 * h);
            }
            out.push(g);
        }
        out
    }

    fn assert_grads_match(analytic: &[f64], numeric: &[f64], rel: f64, what: &str) {
        for (i, (&a, &n)) in analytic.iter().zip(numeric).enumerate() {
            let denom = a.abs().max(n.abs());
            let ok = (a - n).abs() <= rel * denom + 1e-8;
            assert!(ok, "{}[{}]: analytic {} vs numeric {}", what, i, a, n);
        }
    }

    #[test]
    fn matmul_identity() {
        let mut t = Tape::new();
        let a = t.leaf(Tensor::new(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap(), false);
        let eye = t.constant(Tensor::new(vec![2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap());
        let c = t.matmul(a, eye).unwrap();
        assert_eq!(t.data(c), &[1.0, 2.0, 3.0, 4.0]);
    }

    #[test]
    fn matmul_inner_product() {
        let mut t = Tape::new();
        let a = t.constant(Tensor::new(vec![1, 2], vec![1.0, 2.0]).unwrap());
        let b = t.constant(Tensor::new(vec![2, 1], vec![3.0, 4.0]).unwrap());
        let c = t.matmul(a, b).unwrap();
        assert_eq!(t.data(c), &[11.0]);
        assert_eq!(t.shape(c), &[1, 1]);
    }

    #[test]
    fn matmul_shape_mismatch_names_shapes() {
        let mut t = Tape::new();
        let a = t.zeros(&[2, 3]);
        let b = t.zeros(&[4, 2]);
        let err = t.matmul(a, b).unwrap_err().to_string();
        assert!(err.contains("[2, 3]") && err.contains("[4, 2]"), "{}", err);
    }

    #[test]
    fn matmul_gradient_closed_form_and_fd() {
        let mut r = rng(7);
        let a_data = rand_vec(&mut r, 12);
        let b_data = rand_vec(&mut r, 8);

        let f = |inp: &[Vec<f64>]| {
            let mut t = Tape::new();
            let a = t.leaf(Tensor::new(vec![3, 4], inp[0].clone()).unwrap(), true);
            let b = t.leaf(Tensor::new(vec![4, 2], inp[1].clone()).unwrap(), true);
            let c = t.matmul(a, b).unwrap();
            let s = t.sum(c);
            t.data(s)[0]
        };

        let mut t = Tape::new();
        let a = t.leaf(Tensor::new(vec![3, 4], a_data.clone()).unwrap(), true);
        let b = t.leaf(Tensor::new(vec![4, 2], b_data.clone()).unwrap(), true);
        let c = t.matmul(a, b).unwrap();
        let s = t.sum(c);
        t.backward(s).unwrap();

        // d sum(AB) / dA = ones(3,2) · Bᵀ
        let mut expect = vec![0.0; 12];
        for i in 0..3 {
            for k in 0..4 {
                expect[i * 4 + k] = b_data[k * 2] + b_data[k * 2 + 1];
            }
        }
        let ga = t.grad(a).unwrap();
        for (x, y) in ga.iter().zip(&expect) {
            assert!(close(*x, *y, 1e-12));
        }

        let num = numerical_grad(&f, &[a_data, b_data], 1e-6);
        assert_grads_match(ga, &num[0], 1e-6, "dA");
        assert_grads_match(t.grad(b).unwrap(), &num[1], 1e-6, "dB");
    }

    #[test]
    fn batched_matmul_collapses_leading_dims() {
        let mut t = Tape::new();
        let a = t.constant(Tensor::new(vec![2, 2, 3], (0..12).map(|x| x as f64).collect()).unwrap());
        let b = t.constant(Tensor::new(vec![3, 2], vec![1.0; 6]).unwrap());
        let c = t.matmul(a, b).unwrap();
        assert_eq!(t.shape(c), &[2, 2, 2]);
        // each output element is the row sum of a
        assert_eq!(t.data(c)[0], 0.0 + 1.0 + 2.0);
        assert_eq!(t.data(c)[7], 9.0 + 10.0 + 11.0);
    }

    #[test]
    fn elementwise_analytic_values() {
        let mut t = Tape::new();
        let x = t.constant(Tensor::new(vec![3], vec![0.0, -3.0, 3.0]).unwrap());
        let th = t.tanh(x);
        let sg = t.sigmoid(x);
        let rl = t.relu(x);
        assert_eq!(t.data(th)[0], 0.0);
        assert_eq!(t.data(sg)[0], 0.5);
        assert_eq!(t.data(rl), &[0.0, 0.0, 3.0]);
    }

    #[test]
    fn tanh_gradient_matches_fd() {
        let f = |inp: &[Vec<f64>]| {
            let mut t = Tape::new();
            let x = t.leaf(Tensor::new(vec![1], inp[0].clone()).unwrap(), true);
            let y = t.tanh(x);
            let s = t.sum(y);
            t.data(s)[0]
        };
        let mut t = Tape::new();
        let x = t.leaf(Tensor::new(vec![1], vec![0.3]).unwrap(), true);
        let y = t.tanh(x);
        let s = t.sum(y);
        t.backward(s).unwrap();
        let num = numerical_grad(&f, &[vec![0.3]], 1e-6);
        assert_grads_match(t.grad(x).unwrap(), &num[0], 1e-6, "dtanh");
    }

    #[test]
    fn broadcast_add_and_error() {
        let mut t = Tape::new();
        let a = t.constant(Tensor::new(vec![2, 3], vec![1.0; 6]).unwrap());
        let b = t.constant(Tensor::new(vec![3], vec![1.0, 2.0, 3.0]).unwrap());
        let c = t.add(a, b).unwrap();
        assert_eq!(t.data(c), &[2.0, 3.0, 4.0, 2.0, 3.0, 4.0]);

        let bad = t.constant(Tensor::new(vec![2], vec![0.0; 2]).unwrap());
        let err = t.add(a, bad).unwrap_err().to_string();
        assert!(err.contains("[2, 3]") && err.contains("[2]"), "{}", err);
    }

    #[test]
    fn broadcast_bias_gradient_matches_fd() {
        let mut r = rng(11);
        let x_data = rand_vec(&mut r, 6);
        let b_data = rand_vec(&mut r, 3);
        let f = |inp: &[Vec<f64>]| {
            let mut t = Tape::new();
            let x = t.leaf(Tensor::new(vec![2, 3], inp[0].clone()).unwrap(), true);
            let b = t.leaf(Tensor::new(vec![3], inp[1].clone()).unwrap(), true);
            let y = t.add(x, b).unwrap();
            let z = t.tanh(y);
            let s = t.sum(z);
            t.data(s)[0]
        };
        let mut t = Tape::new();
        let x = t.leaf(Tensor::new(vec![2, 3], x_data.clone()).unwrap(), true);
        let b = t.leaf(Tensor::new(vec![3], b_data.clone()).unwrap(), true);
        let y = t.add(x, b).unwrap();
        let z = t.tanh(y);
        let s = t.sum(z);
        t.backward(s).unwrap();
        let num = numerical_grad(&f, &[x_data, b_data], 1e-6);
        assert_grads_match(t.grad(x).unwrap(), &num[0], 1e-6, "dx");
        assert_grads_match(t.grad(b).unwrap(), &num[1], 1e-6, "dbias");
    }

    #[test]
    fn softmax_symmetry_and_stability() {
        let mut t = Tape::new();
        let a = t.constant(Tensor::new(vec![3], vec![0.0, 0.0, 0.0]).unwrap());
        let s = t.softmax(a, 0).unwrap();
        for &v in t.data(s) {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
        let big = t.constant(Tensor::new(vec![2], vec![1000.0, 0.0]).unwrap());
        let s2 = t.softmax(big, 0).unwrap();
        assert!((t.data(s2)[0] - 1.0).abs() < 1e-12);
        assert!(t.data(s2)[1].abs() < 1e-12);
    }

    #[test]
    fn softmax_jacobian_matches_fd() {
        let x0 = vec![0.1, 0.2, 0.3];
        // check full Jacobian by probing each output through a weighted sum
        for probe in 0..3 {
            let weights: Vec<f64> = (0..3).map(|i| if i == probe { 1.0 } else { 0.0 }).collect();
            let w2 = weights.clone();
            let f = move |inp: &[Vec<f64>]| {
                let mut t = Tape::new();
                let x = t.leaf(Tensor::new(vec![3], inp[0].clone()).unwrap(), true);
                let s = t.softmax(x, 0).unwrap();
                let w = t.constant(Tensor::new(vec![3], w2.clone()).unwrap());
                let y = t.mul(s, w).unwrap();
                let out = t.sum(y);
                t.data(out)[0]
            };
            let mut t = Tape::new();
            let x = t.leaf(Tensor::new(vec![3], x0.clone()).unwrap(), true);
            let s = t.softmax(x, 0).unwrap();
            let w = t.constant(Tensor::new(vec![3], weights).unwrap());
            let y = t.mul(s, w).unwrap();
            let out = t.sum(y);
            t.backward(out).unwrap();
            let num = numerical_grad(&f, &[x0.clone()], 1e-6);
            assert_grads_match(t.grad(x).unwrap(), &num[0], 1e-6, "softmax row");
        }
    }

    #[test]
    fn softmax_rows_sum_to_one_property() {
        let mut r = rng(3);
        for _ in 0..200 {
            let n = r.gen_range(1..8);
            let data = rand_vec(&mut r, n * 4).iter().map(|v| v * 100.0).collect::<Vec<_>>();
            let mut t = Tape::new();
            let x = t.constant(Tensor::new(vec![n, 4], data).unwrap());
            let s = t.softmax(x, 1).unwrap();
            for row in t.data(s).chunks(4) {
                let sum: f64 = row.iter().sum();
                assert!((sum - 1.0).abs() <= 1e-12);
                assert!(row.iter().all(|&v| v >= 0.0));
            }
        }
    }

    #[test]
    fn layer_norm_constant_row_is_zero() {
        let mut t = Tape::new();
        let x = t.constant(Tensor::new(vec![1, 4], vec![5.0; 4]).unwrap());
        let g = t.constant(Tensor::new(vec![4], vec![1.0; 4]).unwrap());
        let b = t.constant(Tensor::new(vec![4], vec![0.0; 4]).unwrap());
        let y = t.layer_norm(x, g, b, 1e-5).unwrap();
        for &v in t.data(y) {
            assert_eq!(v, 0.0);
        }
    }

    #[test]
    fn layer_norm_moments_property() {
        let mut r = rng(5);
        for _ in 0..200 {
            let d = r.gen_range(2..16);
            let data: Vec<f64> = rand_vec(&mut r, d).iter().map(|v| v * 10.0 + 1.0).collect();
            // skip degenerate constant rows
            let spread = data.iter().cloned().fold(f64::NEG_INFINITY, f64::max)
                - data.iter().cloned().fold(f64::INFINITY, f64::min);
            if spread < 1e-3 {
                continue;
            }
            let mut t = Tape::new();
            let x = t.constant(Tensor::new(vec![1, d], data).unwrap());
            let g = t.constant(Tensor::new(vec![d], vec![1.0; d]).unwrap());
            let b = t.constant(Tensor::new(vec![d], vec![0.0; d]).unwrap());
            let y = t.layer_norm(x, g, b, 1e-5).unwrap();
            let out = t.data(y);
            let mean: f64 = out.iter().sum::<f64>() / d as f64;
            let var: f64 = out.iter().map(|&v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            assert!(mean.abs() < 1e-10, "mean {}", mean);
            assert!((var - 1.0).abs() < 1e-3, "var {}", var);
        }
    }

    #[test]
    fn layer_norm_gradient_matches_fd() {
        let mut r = rng(13);
        let x_data = rand_vec(&mut r, 8);
        let g_data = rand_vec(&mut r, 4);
        let b_data = rand_vec(&mut r, 4);
        let f = |inp: &[Vec<f64>]| {
            let mut t = Tape::new();
            let x = t.leaf(Tensor::new(vec![2, 4], inp[0].clone()).unwrap(), true);
            let g = t.leaf(Tensor::new(vec![4], inp[1].clone()).unwrap(), true);
            let b = t.leaf(Tensor::new(vec![4], inp[2].clone()).unwrap(), true);
            let y = t.layer_norm(x, g, b, 1e-5).unwrap();
            let z = t.tanh(y);
            let s = t.sum(z);
            t.data(s)[0]
        };
        let mut t = Tape::new();
        let x = t.leaf(Tensor::new(vec![2, 4], x_data.clone()).unwrap(), true);
        let g = t.leaf(Tensor::new(vec![4], g_data.clone()).unwrap(), true);
        let b = t.leaf(Tensor::new(vec![4], b_data.clone()).unwrap(), true);
        let y = t.layer_norm(x, g, b, 1e-5).unwrap();
        let z = t.tanh(y);
        let s = t.sum(z);
        t.backward(s).unwrap();
        let num = numerical_grad(&f, &[x_data, g_data, b_data], 1e-6);
        assert_grads_match(t.grad(x).unwrap(), &num[0], 1e-5, "ln dx");
        assert_grads_match(t.grad(g).unwrap(), &num[1], 1e-5, "ln dgain");
        assert_grads_match(t.grad(b).unwrap(), &num[2], 1e-5, "ln dbias");
    }

    #[test]
    fn cross_entropy_uniform_is_ln_k() {
        let mut t = Tape::new();
        let logits = t.constant(Tensor::new(vec![1, 2], vec![0.0, 0.0]).unwrap());
        let l = t.cross_entropy_rows(logits, &[Some(0)]).unwrap();
        assert!((t.data(l)[0] - 2.0f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn cross_entropy_masked_rows_contribute_zero() {
        let mut t = Tape::new();
        let logits = t.constant(Tensor::new(vec![2, 3], vec![5.0, -2.0, 0.1, 9.0, 9.0, 9.0]).unwrap());
        let l_masked = t.cross_entropy_rows(logits, &[Some(1), None]).unwrap();
        let one = t.gather(logits, &[0]).unwrap();
        let l_single = t.cross_entropy_rows(one, &[Some(1)]).unwrap();
        assert_eq!(t.data(l_masked)[0], t.data(l_single)[0]);
    }

    #[test]
    fn cross_entropy_label_out_of_range() {
        let mut t = Tape::new();
        let logits = t.constant(Tensor::new(vec![1, 2], vec![0.0, 0.0]).unwrap());
        let err = t.cross_entropy_rows(logits, &[Some(5)]).unwrap_err();
        assert!(matches!(err, Error::Label(_)));
    }

    #[test]
    fn cross_entropy_gradient_matches_fd() {
        let mut r = rng(17);
        let x_data = rand_vec(&mut r, 6);
        let f = |inp: &[Vec<f64>]| {
            let mut t = Tape::new();
            let x = t.leaf(Tensor::new(vec![2, 3], inp[0].clone()).unwrap(), true);
            let l = t.cross_entropy_rows(x, &[Some(2), Some(0)]).unwrap();
            t.data(l)[0]
        };
        let mut t = Tape::new();
        let x = t.leaf(Tensor::new(vec![2, 3], x_data.clone()).unwrap(), true);
        let l = t.cross_entropy_rows(x, &[Some(2), Some(0)]).unwrap();
        t.backward(l).unwrap();
        let num = numerical_grad(&f, &[x_data], 1e-6);
        assert_grads_match(t.grad(x).unwrap(), &num[0], 1e-6, "ce dlogits");
    }

    #[test]
    fn dropout_keep_one_is_identity() {
        let mut r = rng(1);
        let mut t = Tape::new();
        let x = t.constant(Tensor::new(vec![4], vec![1.5, -2.0, 0.0, 3.25]).unwrap());
        let y = t.dropout(x, 1.0, &mut r);
        assert_eq!(t.data(x), t.data(y));
    }

    #[test]
    fn dropout_scales_surviving_elements() {
        let mut r = rng(2);
        let mut t = Tape::new();
        let x = t.constant(Tensor::new(vec![1000], vec![1.0; 1000]).unwrap());
        let y = t.dropout(x, 0.5, &mut r);
        let out = t.data(y);
        assert!(out.iter().all(|&v| v == 0.0 || v == 2.0));
        let kept = out.iter().filter(|&&v| v != 0.0).count();
        assert!(kept > 400 && kept < 600, "kept {}", kept);
    }

    #[test]
    fn gather_concat_transpose_gradients_match_fd() {
        let mut r = rng(23);
        let x_data = rand_vec(&mut r, 6);
        let f = |inp: &[Vec<f64>]| {
            let mut t = Tape::new();
            let x = t.leaf(Tensor::new(vec![3, 2], inp[0].clone()).unwrap(), true);
            let g = t.gather(x, &[0, 2, 0]).unwrap();
            let tr = t.transpose2d(g).unwrap();
            let cat = t.concat(0, &[tr, tr]).unwrap();
            let y = t.sigmoid(cat);
            let s = t.sum(y);
            t.data(s)[0]
        };
        let mut t = Tape::new();
        let x = t.leaf(Tensor::new(vec![3, 2], x_data.clone()).unwrap(), true);
        let g = t.gather(x, &[0, 2, 0]).unwrap();
        let tr = t.transpose2d(g).unwrap();
        let cat = t.concat(0, &[tr, tr]).unwrap();
        let y = t.sigmoid(cat);
        let s = t.sum(y);
        t.backward(s).unwrap();
        let num = numerical_grad(&f, &[x_data], 1e-6);
        assert_grads_match(t.grad(x).unwrap(), &num[0], 1e-6, "gather/concat/transpose");
    }

    #[test]
    fn backward_requires_scalar() {
        let mut t = Tape::new();
        let x = t.leaf(Tensor::new(vec![2], vec![1.0, 2.0]).unwrap(), true);
        let err = t.backward(x).unwrap_err();
        assert!(matches!(err, Error::Contract(_)));
    }

    #[test]
    fn gradient_accumulation_is_additive() {
        let x_data = vec![0.4, -0.7, 1.2];

        // grads of f and g accumulated on one tape...
        let mut t = Tape::new();
        let x = t.leaf(Tensor::new(vec![3], x_data.clone()).unwrap(), true);
        let f_out = t.tanh(x);
        let f_sum = t.sum(f_out);
        let g_out = t.sigmoid(x);
        let g_sum = t.sum(g_out);
        t.backward(f_sum).unwrap();
        t.backward(g_sum).unwrap();
        let acc = t.grad(x).unwrap().to_vec();

        // ...equal the gradient of f + g
        let mut t2 = Tape::new();
        let x2 = t2.leaf(Tensor::new(vec![3], x_data).unwrap(), true);
        let f_out = t2.tanh(x2);
        let f_sum = t2.sum(f_out);
        let g_out = t2.sigmoid(x2);
        let g_sum = t2.sum(g_out);
        let total = t2.add(f_sum, g_sum).unwrap();
        t2.backward(total).unwrap();
        let joint = t2.grad(x2).unwrap();

        for (a, b) in acc.iter().zip(joint) {
            assert!((a - b).abs() < 1e-14);
        }
    }

    #[test]
    fn zero_grads_allows_reuse() {
        let mut t = Tape::new();
        let x = t.leaf(Tensor::new(vec![2], vec![1.0, 2.0]).unwrap(), true);
        let y = t.tanh(x);
        let s = t.sum(y);
        t.backward(s).unwrap();
        let g1 = t.grad(x).unwrap().to_vec();
        t.zero_grads();
        assert!(t.grad(x).is_none());
        t.backward(s).unwrap();
        assert_eq!(g1, t.grad(x).unwrap());
    }

    #[test]
    fn frozen_leaf_gets_no_gradient() {
        let mut t = Tape::new();
        let frozen = t.leaf(Tensor::new(vec![2, 2], vec![1.0; 4]).unwrap(), false);
        let w = t.leaf(Tensor::new(vec![2, 2], vec![0.5; 4]).unwrap(), true);
        let y = t.matmul(frozen, w).unwrap();
        let s = t.sum(y);
        t.backward(s).unwrap();
        assert!(t.grad(frozen).is_none());
        assert!(t.grad(w).is_some());
    }
}
