//! Dense tensors with reverse-mode gradients.
//!
//! Every differentiable operation the model composes is recorded on a
//! [`Tape`]: the forward value is computed eagerly, and [`Tape::backward`]
//! replays the recorded operations in reverse to accumulate gradients.
//! The recording is an internal contract; callers only see value ids.
//!
//! Masked attention needs `-inf` entries to survive up to the softmax, so
//! tensors admit `-inf` as an explicit additive mask value. Everything else
//! is expected to stay finite; [`Tape::ensure_finite`] is the hook model
//! code uses to abort a run with the offending layer named.

use std::sync::Arc;

use thiserror::Error;

use super::real::Real;
use super::rng::Rng;

#[derive(Debug, Error)]
pub enum NumericsError {
    #[error("shape mismatch in {op}: left {left:?}, right {right:?}")]
    ShapeMismatch {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },
    #[error("{op} expects rank-{expected} input, got shape {shape:?}")]
    BadRank {
        op: &'static str,
        expected: usize,
        shape: Vec<usize>,
    },
    #[error("{op} received NaN input")]
    NanInput { op: &'static str },
    #[error("non-finite activation in {layer}")]
    NonFinite { layer: String },
    #[error("data length {len} does not match shape {shape:?}")]
    DataLength { len: usize, shape: Vec<usize> },
    #[error("backward requires a scalar output, got shape {shape:?}")]
    NonScalarLoss { shape: Vec<usize> },
    #[error("finite-difference step must be positive, got {h}")]
    BadStep { h: f64 },
    #[error("finite-difference probe produced a non-finite value")]
    NonFiniteProbe,
}

/// Plain tensor value: row-major data plus shape.
#[derive(Debug, Clone, PartialEq)]
pub struct TensorData<R: Real> {
    pub shape: Vec<usize>,
    pub data: Vec<R>,
}

impl<R: Real> TensorData<R> {
    pub fn new(shape: Vec<usize>, data: Vec<R>) -> Result<Self, NumericsError> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(NumericsError::DataLength {
                len: data.len(),
                shape,
            });
        }
        Ok(TensorData { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let numel = shape.iter().product();
        TensorData {
            shape: shape.to_vec(),
            data: vec![R::ZERO; numel],
        }
    }

    /// Uniform init in `[-scale, scale]`.
    pub fn rand_uniform(shape: &[usize], scale: f64, rng: &mut Rng) -> Self {
        let numel = shape.iter().product();
        let data = (0..numel)
            .map(|_| R::from_f64(rng.uniform_in(-scale, scale)))
            .collect();
        TensorData {
            shape: shape.to_vec(),
            data,
        }
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }
}

pub type Vid = usize;

struct Node<R: Real> {
    data: Vec<R>,
    shape: Vec<usize>,
    grad: Option<Vec<R>>,
}

enum Op<R: Real> {
    Matmul { a: Vid, b: Vid, out: Vid, m: usize, k: usize, n: usize },
    Add { a: Vid, b: Vid, out: Vid },
    Sub { a: Vid, b: Vid, out: Vid },
    Mul { a: Vid, b: Vid, out: Vid },
    Scale { a: Vid, c: R, out: Vid },
    AddRow { a: Vid, bias: Vid, out: Vid, rows: usize, cols: usize },
    MulConst { a: Vid, konst: Arc<Vec<R>>, out: Vid },
    AddConst { a: Vid, out: Vid },
    Sigmoid { a: Vid, out: Vid },
    Silu { a: Vid, out: Vid },
    Abs { a: Vid, out: Vid },
    Ln { a: Vid, out: Vid },
    Clamp { a: Vid, lo: R, hi: R, out: Vid },
    /// Softmax over the last axis. `fallback` marks rows whose entries were
    /// all -inf; those emit uniform weights and are constant w.r.t. input.
    SoftmaxLast { a: Vid, out: Vid, rows: usize, cols: usize, fallback: Arc<Vec<bool>> },
    Mean { a: Vid, out: Vid },
    Sum { a: Vid, out: Vid },
    /// out[i] = if map[i] < 0 { 0 } else { a[map[i]] }. Covers im2col,
    /// patchify/unpatchify, nearest upsampling, and layout permutations.
    Gather { a: Vid, map: Arc<Vec<i64>>, out: Vid },
    Concat2 { a: Vid, b: Vid, out: Vid },
    Slice { a: Vid, start: usize, len: usize, out: Vid },
}

/// Operation recorder and gradient engine.
pub struct Tape<R: Real> {
    nodes: Vec<Node<R>>,
    ops: Vec<Op<R>>,
    backward_done: bool,
}

impl<R: Real> Default for Tape<R> {
    fn default() -> Self {
        Self::new()
    }
}

impl<R: Real> Tape<R> {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            ops: Vec::new(),
            backward_done: false,
        }
    }

    /// Register a leaf value (input, parameter, or constant).
    pub fn leaf(&mut self, t: TensorData<R>) -> Vid {
        self.push_node(t.data, t.shape)
    }

    pub fn leaf_from(&mut self, shape: &[usize], data: Vec<R>) -> Result<Vid, NumericsError> {
        Ok(self.leaf(TensorData::new(shape.to_vec(), data)?))
    }

    fn push_node(&mut self, data: Vec<R>, shape: Vec<usize>) -> Vid {
        let id = self.nodes.len();
        self.nodes.push(Node {
            data,
            shape,
            grad: None,
        });
        id
    }

    pub fn value(&self, v: Vid) -> &[R] {
        &self.nodes[v].data
    }

    pub fn shape(&self, v: Vid) -> &[usize] {
        &self.nodes[v].shape
    }

    pub fn numel(&self, v: Vid) -> usize {
        self.nodes[v].data.len()
    }

    pub fn grad(&self, v: Vid) -> Option<&[R]> {
        self.nodes[v].grad.as_deref()
    }

    pub fn to_tensor(&self, v: Vid) -> TensorData<R> {
        TensorData {
            shape: self.nodes[v].shape.clone(),
            data: self.nodes[v].data.clone(),
        }
    }

    /// Scalar convenience accessor.
    pub fn scalar(&self, v: Vid) -> R {
        debug_assert_eq!(self.numel(v), 1);
        self.nodes[v].data[0]
    }

    /// Abort hook: error if the node holds NaN or +/-inf.
    pub fn ensure_finite(&self, v: Vid, layer: &str) -> Result<(), NumericsError> {
        if self.nodes[v].data.iter().any(|x| !x.is_finite()) {
            return Err(NumericsError::NonFinite {
                layer: layer.to_string(),
            });
        }
        Ok(())
    }

    // ── shape helpers ────────────────────────────────────────────────

    fn rank2(&self, v: Vid, op: &'static str) -> Result<(usize, usize), NumericsError> {
        let s = &self.nodes[v].shape;
        if s.len() != 2 {
            return Err(NumericsError::BadRank {
                op,
                expected: 2,
                shape: s.clone(),
            });
        }
        Ok((s[0], s[1]))
    }

    fn same_shape(&self, a: Vid, b: Vid, op: &'static str) -> Result<(), NumericsError> {
        if self.nodes[a].shape != self.nodes[b].shape {
            return Err(NumericsError::ShapeMismatch {
                op,
                left: self.nodes[a].shape.clone(),
                right: self.nodes[b].shape.clone(),
            });
        }
        Ok(())
    }

    // ── recorded operations ──────────────────────────────────────────

    pub fn matmul(&mut self, a: Vid, b: Vid) -> Result<Vid, NumericsError> {
        let (m, ka) = self.rank2(a, "matmul")?;
        let (kb, n) = self.rank2(b, "matmul")?;
        if ka != kb {
            return Err(NumericsError::ShapeMismatch {
                op: "matmul",
                left: self.nodes[a].shape.clone(),
                right: self.nodes[b].shape.clone(),
            });
        }
        let mut out = vec![R::ZERO; m * n];
        mm(&self.nodes[a].data, &self.nodes[b].data, &mut out, m, ka, n);
        let id = self.push_node(out, vec![m, n]);
        self.ops.push(Op::Matmul { a, b, out: id, m, k: ka, n });
        Ok(id)
    }

    pub fn add(&mut self, a: Vid, b: Vid) -> Result<Vid, NumericsError> {
        self.same_shape(a, b, "add")?;
        let data: Vec<R> = self.nodes[a]
            .data
            .iter()
            .zip(&self.nodes[b].data)
            .map(|(&x, &y)| x + y)
            .collect();
        let shape = self.nodes[a].shape.clone();
        let id = self.push_node(data, shape);
        self.ops.push(Op::Add { a, b, out: id });
        Ok(id)
    }

    pub fn sub(&mut self, a: Vid, b: Vid) -> Result<Vid, NumericsError> {
        self.same_shape(a, b, "sub")?;
        let data: Vec<R> = self.nodes[a]
            .data
            .iter()
            .zip(&self.nodes[b].data)
            .map(|(&x, &y)| x - y)
            .collect();
        let shape = self.nodes[a].shape.clone();
        let id = self.push_node(data, shape);
        self.ops.push(Op::Sub { a, b, out: id });
        Ok(id)
    }

    pub fn mul(&mut self, a: Vid, b: Vid) -> Result<Vid, NumericsError> {
        self.same_shape(a, b, "mul")?;
        let data: Vec<R> = self.nodes[a]
            .data
            .iter()
            .zip(&self.nodes[b].data)
            .map(|(&x, &y)| x * y)
            .collect();
        let shape = self.nodes[a].shape.clone();
        let id = self.push_node(data, shape);
        self.ops.push(Op::Mul { a, b, out: id });
        Ok(id)
    }

    pub fn scale(&mut self, a: Vid, c: R) -> Vid {
        let data: Vec<R> = self.nodes[a].data.iter().map(|&x| x * c).collect();
        let shape = self.nodes[a].shape.clone();
        let id = self.push_node(data, shape);
        self.ops.push(Op::Scale { a, c, out: id });
        id
    }

    /// Broadcast-add a length-`cols` bias over the rows of `a` (`[rows, cols]`).
    pub fn add_row(&mut self, a: Vid, bias: Vid) -> Result<Vid, NumericsError> {
        let (rows, cols) = self.rank2(a, "add_row")?;
        if self.nodes[bias].data.len() != cols {
            return Err(NumericsError::ShapeMismatch {
                op: "add_row",
                left: self.nodes[a].shape.clone(),
                right: self.nodes[bias].shape.clone(),
            });
        }
        let mut data = self.nodes[a].data.clone();
        for r in 0..rows {
            for c in 0..cols {
                data[r * cols + c] += self.nodes[bias].data[c];
            }
        }
        let shape = self.nodes[a].shape.clone();
        let id = self.push_node(data, shape);
        self.ops.push(Op::AddRow { a, bias, out: id, rows, cols });
        Ok(id)
    }

    /// Elementwise product with a constant array (no gradient to the constant).
    pub fn mul_const(&mut self, a: Vid, konst: Arc<Vec<R>>) -> Result<Vid, NumericsError> {
        if konst.len() != self.nodes[a].data.len() {
            return Err(NumericsError::ShapeMismatch {
                op: "mul_const",
                left: self.nodes[a].shape.clone(),
                right: vec![konst.len()],
            });
        }
        let data: Vec<R> = self.nodes[a]
            .data
            .iter()
            .zip(konst.iter())
            .map(|(&x, &k)| x * k)
            .collect();
        let shape = self.nodes[a].shape.clone();
        let id = self.push_node(data, shape);
        self.ops.push(Op::MulConst { a, konst, out: id });
        Ok(id)
    }

    /// Elementwise sum with a constant array. The constant may contain -inf
    /// (additive attention masks); everything else should be finite.
    pub fn add_const(&mut self, a: Vid, konst: &[R]) -> Result<Vid, NumericsError> {
        if konst.len() != self.nodes[a].data.len() {
            return Err(NumericsError::ShapeMismatch {
                op: "add_const",
                left: self.nodes[a].shape.clone(),
                right: vec![konst.len()],
            });
        }
        let data: Vec<R> = self.nodes[a]
            .data
            .iter()
            .zip(konst.iter())
            .map(|(&x, &k)| x + k)
            .collect();
        let shape = self.nodes[a].shape.clone();
        let id = self.push_node(data, shape);
        self.ops.push(Op::AddConst { a, out: id });
        Ok(id)
    }

    pub fn sigmoid(&mut self, a: Vid) -> Vid {
        let data: Vec<R> = self.nodes[a].data.iter().map(|&x| sigmoid(x)).collect();
        let shape = self.nodes[a].shape.clone();
        let id = self.push_node(data, shape);
        self.ops.push(Op::Sigmoid { a, out: id });
        id
    }

    pub fn silu(&mut self, a: Vid) -> Vid {
        let data: Vec<R> = self.nodes[a].data.iter().map(|&x| x * sigmoid(x)).collect();
        let shape = self.nodes[a].shape.clone();
        let id = self.push_node(data, shape);
        self.ops.push(Op::Silu { a, out: id });
        id
    }

    pub fn abs(&mut self, a: Vid) -> Vid {
        let data: Vec<R> = self.nodes[a].data.iter().map(|&x| x.abs()).collect();
        let shape = self.nodes[a].shape.clone();
        let id = self.push_node(data, shape);
        self.ops.push(Op::Abs { a, out: id });
        id
    }

    pub fn ln(&mut self, a: Vid) -> Vid {
        let data: Vec<R> = self.nodes[a].data.iter().map(|&x| x.ln()).collect();
        let shape = self.nodes[a].shape.clone();
        let id = self.push_node(data, shape);
        self.ops.push(Op::Ln { a, out: id });
        id
    }

    pub fn clamp(&mut self, a: Vid, lo: R, hi: R) -> Vid {
        let data: Vec<R> = self.nodes[a]
            .data
            .iter()
            .map(|&x| x.max(lo).min(hi))
            .collect();
        let shape = self.nodes[a].shape.clone();
        let id = self.push_node(data, shape);
        self.ops.push(Op::Clamp { a, lo, hi, out: id });
        id
    }

    /// Softmax along the last axis. Entries may be finite or -inf; NaN is
    /// rejected. A slice that is entirely -inf produces uniform weights and
    /// passes no gradient (the output does not depend on the inputs there).
    pub fn softmax_last(&mut self, a: Vid) -> Result<Vid, NumericsError> {
        let shape = self.nodes[a].shape.clone();
        let cols = *shape.last().unwrap_or(&0);
        if cols == 0 {
            return Err(NumericsError::BadRank {
                op: "softmax_last",
                expected: 1,
                shape,
            });
        }
        let rows = self.nodes[a].data.len() / cols;
        if self.nodes[a].data.iter().any(|x| x.is_nan()) {
            return Err(NumericsError::NanInput { op: "softmax_last" });
        }
        let mut out = vec![R::ZERO; rows * cols];
        let mut fallback = vec![false; rows];
        for r in 0..rows {
            let row = &self.nodes[a].data[r * cols..(r + 1) * cols];
            let mut mx = R::NEG_INFINITY;
            for &x in row {
                mx = mx.max(x);
            }
            let orow = &mut out[r * cols..(r + 1) * cols];
            if !mx.is_finite() {
                // Entire slice masked out: defined uniform fallback.
                fallback[r] = true;
                let u = R::ONE / R::from_f64(cols as f64);
                for o in orow.iter_mut() {
                    *o = u;
                }
                continue;
            }
            let mut z = R::ZERO;
            for (o, &x) in orow.iter_mut().zip(row) {
                let e = (x - mx).exp();
                *o = e;
                z += e;
            }
            for o in orow.iter_mut() {
                *o = *o / z;
            }
        }
        let id = self.push_node(out, shape);
        self.ops.push(Op::SoftmaxLast {
            a,
            out: id,
            rows,
            cols,
            fallback: Arc::new(fallback),
        });
        Ok(id)
    }

    pub fn mean(&mut self, a: Vid) -> Vid {
        let n = self.nodes[a].data.len();
        let s: R = self.nodes[a].data.iter().copied().sum();
        let v = s / R::from_f64(n as f64);
        let id = self.push_node(vec![v], vec![1]);
        self.ops.push(Op::Mean { a, out: id });
        id
    }

    pub fn sum(&mut self, a: Vid) -> Vid {
        let s: R = self.nodes[a].data.iter().copied().sum();
        let id = self.push_node(vec![s], vec![1]);
        self.ops.push(Op::Sum { a, out: id });
        id
    }

    /// Index-map gather; `map[i] < 0` fills zero. Backward scatter-adds.
    pub fn gather(
        &mut self,
        a: Vid,
        map: Arc<Vec<i64>>,
        out_shape: Vec<usize>,
    ) -> Result<Vid, NumericsError> {
        let numel: usize = out_shape.iter().product();
        if numel != map.len() {
            return Err(NumericsError::DataLength {
                len: map.len(),
                shape: out_shape,
            });
        }
        let src = &self.nodes[a].data;
        let data: Vec<R> = map
            .iter()
            .map(|&ix| if ix < 0 { R::ZERO } else { src[ix as usize] })
            .collect();
        let id = self.push_node(data, out_shape);
        self.ops.push(Op::Gather { a, map, out: id });
        Ok(id)
    }

    /// Concatenate flat contents with an explicit output shape (used for
    /// channel concatenation of `[C,h,w]` blocks, where the flat layouts abut).
    pub fn concat2(&mut self, a: Vid, b: Vid, out_shape: Vec<usize>) -> Result<Vid, NumericsError> {
        let numel: usize = out_shape.iter().product();
        let (la, lb) = (self.nodes[a].data.len(), self.nodes[b].data.len());
        if numel != la + lb {
            return Err(NumericsError::DataLength {
                len: la + lb,
                shape: out_shape,
            });
        }
        let mut data = Vec::with_capacity(la + lb);
        data.extend_from_slice(&self.nodes[a].data);
        data.extend_from_slice(&self.nodes[b].data);
        let id = self.push_node(data, out_shape);
        self.ops.push(Op::Concat2 { a, b, out: id });
        Ok(id)
    }

    /// Flat contiguous slice with an explicit output shape.
    pub fn slice(
        &mut self,
        a: Vid,
        start: usize,
        len: usize,
        out_shape: Vec<usize>,
    ) -> Result<Vid, NumericsError> {
        let numel: usize = out_shape.iter().product();
        if numel != len || start + len > self.nodes[a].data.len() {
            return Err(NumericsError::DataLength {
                len,
                shape: out_shape,
            });
        }
        let data = self.nodes[a].data[start..start + len].to_vec();
        let id = self.push_node(data, out_shape);
        self.ops.push(Op::Slice { a, start, len, out: id });
        Ok(id)
    }

    // ── backward ─────────────────────────────────────────────────────

    fn grad_mut(&mut self, v: Vid) -> &mut Vec<R> {
        let n = self.nodes[v].data.len();
        self.nodes[v].grad.get_or_insert_with(|| vec![R::ZERO; n])
    }

    fn take_out_grad(&mut self, out: Vid) -> Option<Vec<R>> {
        self.nodes[out].grad.clone()
    }

    /// Reverse pass from a scalar node. Call once per tape.
    pub fn backward(&mut self, loss: Vid) -> Result<(), NumericsError> {
        if self.nodes[loss].data.len() != 1 {
            return Err(NumericsError::NonScalarLoss {
                shape: self.nodes[loss].shape.clone(),
            });
        }
        assert!(!self.backward_done, "backward called twice on one tape");
        self.backward_done = true;
        *self.grad_mut(loss) = vec![R::ONE];

        for idx in (0..self.ops.len()).rev() {
            // Ops own only ids and shared constants; lift what backward needs.
            match &self.ops[idx] {
                Op::Matmul { a, b, out, m, k, n } => {
                    let (a, b, out, m, k, n) = (*a, *b, *out, *m, *k, *n);
                    if let Some(d) = self.take_out_grad(out) {
                        let bt = self.nodes[b].data.clone();
                        let at = self.nodes[a].data.clone();
                        let mut da = vec![R::ZERO; m * k];
                        mm_tb(&d, &bt, &mut da, m, n, k);
                        acc(self.grad_mut(a), &da);
                        let mut db = vec![R::ZERO; k * n];
                        mm_ta(&at, &d, &mut db, m, k, n);
                        acc(self.grad_mut(b), &db);
                    }
                }
                Op::Add { a, b, out } => {
                    let (a, b, out) = (*a, *b, *out);
                    if let Some(d) = self.take_out_grad(out) {
                        acc(self.grad_mut(a), &d);
                        acc(self.grad_mut(b), &d);
                    }
                }
                Op::Sub { a, b, out } => {
                    let (a, b, out) = (*a, *b, *out);
                    if let Some(d) = self.take_out_grad(out) {
                        acc(self.grad_mut(a), &d);
                        let neg: Vec<R> = d.iter().map(|&x| -x).collect();
                        acc(self.grad_mut(b), &neg);
                    }
                }
                Op::Mul { a, b, out } => {
                    let (a, b, out) = (*a, *b, *out);
                    if let Some(d) = self.take_out_grad(out) {
                        let da: Vec<R> = d
                            .iter()
                            .zip(&self.nodes[b].data)
                            .map(|(&g, &y)| g * y)
                            .collect();
                        let db: Vec<R> = d
                            .iter()
                            .zip(&self.nodes[a].data)
                            .map(|(&g, &x)| g * x)
                            .collect();
                        acc(self.grad_mut(a), &da);
                        acc(self.grad_mut(b), &db);
                    }
                }
                Op::Scale { a, c, out } => {
                    let (a, c, out) = (*a, *c, *out);
                    if let Some(d) = self.take_out_grad(out) {
                        let da: Vec<R> = d.iter().map(|&g| g * c).collect();
                        acc(self.grad_mut(a), &da);
                    }
                }
                Op::AddRow { a, bias, out, rows, cols } => {
                    let (a, bias, out, rows, cols) = (*a, *bias, *out, *rows, *cols);
                    if let Some(d) = self.take_out_grad(out) {
                        acc(self.grad_mut(a), &d);
                        let mut db = vec![R::ZERO; cols];
                        for r in 0..rows {
                            for c in 0..cols {
                                db[c] += d[r * cols + c];
                            }
                        }
                        acc(self.grad_mut(bias), &db);
                    }
                }
                Op::MulConst { a, konst, out } => {
                    let (a, out) = (*a, *out);
                    let konst = Arc::clone(konst);
                    if let Some(d) = self.take_out_grad(out) {
                        let da: Vec<R> = d
                            .iter()
                            .zip(konst.iter())
                            .map(|(&g, &k)| g * k)
                            .collect();
                        acc(self.grad_mut(a), &da);
                    }
                }
                Op::AddConst { a, out } => {
                    let (a, out) = (*a, *out);
                    if let Some(d) = self.take_out_grad(out) {
                        acc(self.grad_mut(a), &d);
                    }
                }
                Op::Sigmoid { a, out } => {
                    let (a, out) = (*a, *out);
                    if let Some(d) = self.take_out_grad(out) {
                        let da: Vec<R> = d
                            .iter()
                            .zip(&self.nodes[out].data)
                            .map(|(&g, &s)| g * s * (R::ONE - s))
                            .collect();
                        acc(self.grad_mut(a), &da);
                    }
                }
                Op::Silu { a, out } => {
                    let (a, out) = (*a, *out);
                    if let Some(d) = self.take_out_grad(out) {
                        let da: Vec<R> = d
                            .iter()
                            .zip(&self.nodes[a].data)
                            .map(|(&g, &x)| {
                                let s = sigmoid(x);
                                g * (s + x * s * (R::ONE - s))
                            })
                            .collect();
                        acc(self.grad_mut(a), &da);
                    }
                }
                Op::Abs { a, out } => {
                    let (a, out) = (*a, *out);
                    if let Some(d) = self.take_out_grad(out) {
                        let da: Vec<R> = d
                            .iter()
                            .zip(&self.nodes[a].data)
                            .map(|(&g, &x)| {
                                if x > R::ZERO {
                                    g
                                } else if x < R::ZERO {
                                    -g
                                } else {
                                    R::ZERO
                                }
                            })
                            .collect();
                        acc(self.grad_mut(a), &da);
                    }
                }
                Op::Ln { a, out } => {
                    let (a, out) = (*a, *out);
                    if let Some(d) = self.take_out_grad(out) {
                        let da: Vec<R> = d
                            .iter()
                            .zip(&self.nodes[a].data)
                            .map(|(&g, &x)| g / x)
                            .collect();
                        acc(self.grad_mut(a), &da);
                    }
                }
                Op::Clamp { a, lo, hi, out } => {
                    let (a, lo, hi, out) = (*a, *lo, *hi, *out);
                    if let Some(d) = self.take_out_grad(out) {
                        let da: Vec<R> = d
                            .iter()
                            .zip(&self.nodes[a].data)
                            .map(|(&g, &x)| if x > lo && x < hi { g } else { R::ZERO })
                            .collect();
                        acc(self.grad_mut(a), &da);
                    }
                }
                Op::SoftmaxLast { a, out, rows, cols, fallback } => {
                    let (a, out, rows, cols) = (*a, *out, *rows, *cols);
                    let fallback = Arc::clone(fallback);
                    if let Some(d) = self.take_out_grad(out) {
                        let mut da = vec![R::ZERO; rows * cols];
                        for r in 0..rows {
                            if fallback[r] {
                                continue; // uniform fallback is constant
                            }
                            let o = &self.nodes[out].data[r * cols..(r + 1) * cols];
                            let g = &d[r * cols..(r + 1) * cols];
                            let mut dot = R::ZERO;
                            for c in 0..cols {
                                dot += g[c] * o[c];
                            }
                            for c in 0..cols {
                                da[r * cols + c] = o[c] * (g[c] - dot);
                            }
                        }
                        acc(self.grad_mut(a), &da);
                    }
                }
                Op::Mean { a, out } => {
                    let (a, out) = (*a, *out);
                    if let Some(d) = self.take_out_grad(out) {
                        let n = self.nodes[a].data.len();
                        let g = d[0] / R::from_f64(n as f64);
                        let da = vec![g; n];
                        acc(self.grad_mut(a), &da);
                    }
                }
                Op::Sum { a, out } => {
                    let (a, out) = (*a, *out);
                    if let Some(d) = self.take_out_grad(out) {
                        let n = self.nodes[a].data.len();
                        let da = vec![d[0]; n];
                        acc(self.grad_mut(a), &da);
                    }
                }
                Op::Gather { a, map, out } => {
                    let (a, out) = (*a, *out);
                    let map = Arc::clone(map);
                    if let Some(d) = self.take_out_grad(out) {
                        let mut da = vec![R::ZERO; self.nodes[a].data.len()];
                        for (i, &ix) in map.iter().enumerate() {
                            if ix >= 0 {
                                da[ix as usize] += d[i];
                            }
                        }
                        acc(self.grad_mut(a), &da);
                    }
                }
                Op::Concat2 { a, b, out } => {
                    let (a, b, out) = (*a, *b, *out);
                    if let Some(d) = self.take_out_grad(out) {
                        let la = self.nodes[a].data.len();
                        acc(self.grad_mut(a), &d[..la]);
                        acc(self.grad_mut(b), &d[la..]);
                    }
                }
                Op::Slice { a, start, len, out } => {
                    let (a, start, len, out) = (*a, *start, *len, *out);
                    if let Some(d) = self.take_out_grad(out) {
                        let ga = self.grad_mut(a);
                        for i in 0..len {
                            ga[start + i] += d[i];
                        }
                    }
                }
            }
        }
        Ok(())
    }
}

#[inline]
fn sigmoid<R: Real>(x: R) -> R {
    R::ONE / (R::ONE + (-x).exp())
}

fn acc<R: Real>(dst: &mut [R], src: &[R]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += *s;
    }
}

/// out`[m,n]` += a[m,k] · b[k,n]
pub(crate) fn mm<R: Real>(a: &[R], b: &[R], out: &mut [R], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let orow = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == R::ZERO {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
}

/// out[m,k] += a`[m,n]` · b[k,n]^T  (b stored row-major [k,n])
fn mm_tb<R: Real>(a: &[R], b: &[R], out: &mut [R], m: usize, n: usize, k: usize) {
    for i in 0..m {
        let arow = &a[i * n..(i + 1) * n];
        let orow = &mut out[i * k..(i + 1) * k];
        for (j, o) in orow.iter_mut().enumerate() {
            let brow = &b[j * n..(j + 1) * n];
            let mut s = R::ZERO;
            for (&x, &y) in arow.iter().zip(brow) {
                s += x * y;
            }
            *o += s;
        }
    }
}

/// out[k,n] += a[m,k]^T · b`[m,n]`  (a stored row-major [m,k])
fn mm_ta<R: Real>(a: &[R], b: &[R], out: &mut [R], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let brow = &b[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == R::ZERO {
                continue;
            }
            let orow = &mut out[p * n..(p + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
}
