//! Define-by-run reverse-mode differentiation over [`NumArray`] values.
//!
//! Every operation appends one node to the [`Tape`]; nodes only reference
//! earlier nodes, so the node list is already in topological order and
//! [`Tape::backward`] is a single reverse sweep.

use super::{NumArray, NumericsError};

/// L2 norms below this are rejected by [`Tape::l2_normalize`].
pub const NORM_TOLERANCE: f64 = 1e-12;

/// Handle to a node recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BinaryKind {
    Add,
    Sub,
    Mul,
    Div,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum UnaryKind {
    Tanh,
    Exp,
    Log,
    Neg,
    Square,
    Relu,
    Sigmoid,
    /// Multiply by a constant.
    Scale(f64),
    /// Add a constant.
    Shift(f64),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ReduceKind {
    Sum,
    Mean,
}

#[derive(Debug)]
enum Op {
    Leaf,
    Binary(BinaryKind, Var, Var),
    Unary(UnaryKind, Var),
    MatMul(Var, Var),
    Transpose(Var),
    Reshape(Var),
    Reduce {
        kind: ReduceKind,
        src: Var,
        axis: Option<usize>,
    },
    Softmax {
        src: Var,
        axis: usize,
    },
    LogSoftmax {
        src: Var,
        axis: usize,
    },
    L2Normalize {
        src: Var,
        norms: Vec<f64>,
    },
    SqEuclidean(Var, Var),
    GatherRows {
        src: Var,
        ids: Vec<usize>,
    },
    Concat {
        parts: Vec<Var>,
        axis: usize,
    },
    Unfold {
        src: Var,
        seq_len: usize,
        window: usize,
        lengths: Vec<usize>,
    },
    MaskedMaxPool {
        src: Var,
        argmax: Vec<usize>,
    },
}

#[derive(Debug)]
struct Node {
    value: NumArray,
    op: Op,
    requires_grad: bool,
}

/// Recorded computation for one forward pass.
///
/// A tape is single-threaded and meant to be rebuilt for every episode.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients of a scalar loss with respect to every node that requires one.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<NumArray>>,
}

impl Gradients {
    pub fn get(&self, var: Var) -> Option<&NumArray> {
        self.grads.get(var.0).and_then(Option::as_ref)
    }

    /// Gradient for `var`, or zeros shaped like `like` when the loss does not depend on it.
    pub fn wrt(&self, var: Var, like: &NumArray) -> NumArray {
        self.get(var).cloned().unwrap_or_else(|| NumArray::zeros(like.shape()))
    }
}

fn broadcast_shape(a: &[usize], b: &[usize]) -> Option<Vec<usize>> {
    let rank = a.len().max(b.len());
    let mut out = vec![0; rank];
    for i in 0..rank {
        let da = if i + a.len() >= rank { a[i + a.len() - rank] } else { 1 };
        let db = if i + b.len() >= rank { b[i + b.len() - rank] } else { 1 };
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => return None,
        };
    }
    Some(out)
}

/// Row-major strides of `shape` aligned to `out`, zero along broadcast dimensions.
fn aligned_strides(shape: &[usize], out: &[usize]) -> Vec<usize> {
    let offset = out.len() - shape.len();
    let mut strides = vec![0; out.len()];
    let mut acc = 1;
    for i in (0..shape.len()).rev() {
        if shape[i] != 1 {
            strides[i + offset] = acc;
        }
        acc *= shape[i];
    }
    strides
}

fn broadcast_walk(out: &[usize], sa: &[usize], sb: &[usize], mut f: impl FnMut(usize, usize, usize)) {
    let n: usize = out.iter().product();
    let rank = out.len();
    let mut idx = vec![0usize; rank];
    let (mut ia, mut ib) = (0usize, 0usize);
    for o in 0..n {
        f(o, ia, ib);
        let mut d = rank;
        while d > 0 {
            d -= 1;
            idx[d] += 1;
            ia += sa[d];
            ib += sb[d];
            if idx[d] < out[d] {
                break;
            }
            ia -= sa[d] * out[d];
            ib -= sb[d] * out[d];
            idx[d] = 0;
        }
    }
}

/// Splits `shape` around `axis` into (outer, extent, inner) element counts.
fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `c (+)= a · b` for row-major operands with explicit strides.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    (rsa, csa): (usize, usize),
    b: &[f64],
    (rsb, csb): (usize, usize),
    accumulate: bool,
    c: &mut [f64],
) {
    debug_assert!(c.len() >= m * n);
    let beta = if accumulate { 1.0 } else { 0.0 };
    // SAFETY: the caller guarantees the strided views stay inside each slice;
    // every call site passes dense row-major buffers of the matching extents.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, var: Var) -> &NumArray {
        &self.nodes[var.0].value
    }

    fn push(&mut self, value: NumArray, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    fn shape(&self, var: Var) -> &[usize] {
        self.nodes[var.0].value.shape()
    }

    /// Leaf that receives a gradient.
    pub fn param(&mut self, value: NumArray) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Leaf treated as a constant.
    pub fn constant(&mut self, value: NumArray) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// Elementwise binary operation with NumPy-style broadcasting.
    pub fn elementwise(&mut self, a: Var, b: Var, kind: BinaryKind) -> Result<Var, NumericsError> {
        let (av, bv) = (self.value(a), self.value(b));
        let out_shape = broadcast_shape(av.shape(), bv.shape()).ok_or_else(|| NumericsError::ShapeMismatch {
            op: "elementwise",
            left: av.shape().to_vec(),
            right: bv.shape().to_vec(),
        })?;
        let f = match kind {
            BinaryKind::Add => |x: f64, y: f64| x + y,
            BinaryKind::Sub => |x: f64, y: f64| x - y,
            BinaryKind::Mul => |x: f64, y: f64| x * y,
            BinaryKind::Div => |x: f64, y: f64| x / y,
        };
        let values = if av.shape() == bv.shape() {
            av.values().iter().zip(bv.values()).map(|(&x, &y)| f(x, y)).collect()
        } else {
            let sa = aligned_strides(av.shape(), &out_shape);
            let sb = aligned_strides(bv.shape(), &out_shape);
            let mut out = vec![0.0; out_shape.iter().product()];
            let (xa, xb) = (av.values(), bv.values());
            broadcast_walk(&out_shape, &sa, &sb, |o, ia, ib| out[o] = f(xa[ia], xb[ib]));
            out
        };
        let rg = self.needs(&[a, b]);
        Ok(self.push(NumArray::new(out_shape, values)?, Op::Binary(kind, a, b), rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, NumericsError> {
        self.elementwise(a, b, BinaryKind::Add)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, NumericsError> {
        self.elementwise(a, b, BinaryKind::Sub)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, NumericsError> {
        self.elementwise(a, b, BinaryKind::Mul)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var, NumericsError> {
        self.elementwise(a, b, BinaryKind::Div)
    }

    pub fn unary(&mut self, a: Var, kind: UnaryKind) -> Result<Var, NumericsError> {
        let av = self.value(a);
        if kind == UnaryKind::Log {
            if let Some(bad) = av.values().iter().find(|v| v.is_nan() || **v <= 0.0) {
                return Err(NumericsError::Domain {
                    op: "log",
                    detail: format!("non-positive input {bad}"),
                });
            }
        }
        let out = match kind {
            UnaryKind::Tanh => av.map(f64::tanh),
            UnaryKind::Exp => av.map(f64::exp),
            UnaryKind::Log => av.map(f64::ln),
            UnaryKind::Neg => av.map(|x| -x),
            UnaryKind::Square => av.map(|x| x * x),
            UnaryKind::Relu => av.map(|x| if x > 0.0 { x } else { 0.0 }),
            UnaryKind::Sigmoid => av.map(sigmoid),
            UnaryKind::Scale(c) => av.map(|x| c * x),
            UnaryKind::Shift(c) => av.map(|x| x + c),
        };
        let rg = self.needs(&[a]);
        Ok(self.push(out, Op::Unary(kind, a), rg))
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var, NumericsError> {
        self.unary(a, UnaryKind::Tanh)
    }

    pub fn exp(&mut self, a: Var) -> Result<Var, NumericsError> {
        self.unary(a, UnaryKind::Exp)
    }

    pub fn log(&mut self, a: Var) -> Result<Var, NumericsError> {
        self.unary(a, UnaryKind::Log)
    }

    pub fn neg(&mut self, a: Var) -> Result<Var, NumericsError> {
        self.unary(a, UnaryKind::Neg)
    }

    pub fn square(&mut self, a: Var) -> Result<Var, NumericsError> {
        self.unary(a, UnaryKind::Square)
    }

    pub fn relu(&mut self, a: Var) -> Result<Var, NumericsError> {
        self.unary(a, UnaryKind::Relu)
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var, NumericsError> {
        self.unary(a, UnaryKind::Sigmoid)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var, NumericsError> {
        self.unary(a, UnaryKind::Scale(c))
    }

    pub fn shift(&mut self, a: Var, c: f64) -> Result<Var, NumericsError> {
        self.unary(a, UnaryKind::Shift(c))
    }

    /// Sum or mean over one axis (which is removed) or over everything (giving a scalar).
    pub fn reduce(&mut self, a: Var, axis: Option<usize>, kind: ReduceKind) -> Result<Var, NumericsError> {
        let av = self.value(a);
        let out = match axis {
            None => {
                let s: f64 = av.values().iter().sum();
                let v = match kind {
                    ReduceKind::Sum => s,
                    ReduceKind::Mean => s / av.numel() as f64,
                };
                NumArray::scalar(v)
            }
            Some(ax) => {
                if ax >= av.rank() {
                    return Err(NumericsError::Contract {
                        op: "reduce",
                        detail: format!("axis {ax} out of range for shape {:?}", av.shape()),
                    });
                }
                let (outer, n, inner) = axis_split(av.shape(), ax);
                let x = av.values();
                let mut vals = vec![0.0; outer * inner];
                for o in 0..outer {
                    for j in 0..n {
                        let base = (o * n + j) * inner;
                        for i in 0..inner {
                            vals[o * inner + i] += x[base + i];
                        }
                    }
                }
                if kind == ReduceKind::Mean {
                    for v in &mut vals {
                        *v /= n as f64;
                    }
                }
                let mut shape = av.shape().to_vec();
                shape.remove(ax);
                NumArray::new(shape, vals)?
            }
        };
        let rg = self.needs(&[a]);
        Ok(self.push(out, Op::Reduce { kind, src: a, axis }, rg))
    }

    pub fn sum(&mut self, a: Var) -> Result<Var, NumericsError> {
        self.reduce(a, None, ReduceKind::Sum)
    }

    pub fn sum_axis(&mut self, a: Var, axis: usize) -> Result<Var, NumericsError> {
        self.reduce(a, Some(axis), ReduceKind::Sum)
    }

    pub fn mean(&mut self, a: Var) -> Result<Var, NumericsError> {
        self.reduce(a, None, ReduceKind::Mean)
    }

    pub fn mean_axis(&mut self, a: Var, axis: usize) -> Result<Var, NumericsError> {
        self.reduce(a, Some(axis), ReduceKind::Mean)
    }

    fn check_axis(&self, op: &'static str, a: Var, axis: usize) -> Result<(), NumericsError> {
        if axis >= self.shape(a).len() {
            return Err(NumericsError::Contract {
                op,
                detail: format!("axis {axis} out of range for shape {:?}", self.shape(a)),
            });
        }
        Ok(())
    }

    /// Softmax along `axis`, stabilized by subtracting each slice's maximum.
    pub fn softmax(&mut self, a: Var, axis: usize) -> Result<Var, NumericsError> {
        self.check_axis("softmax", a, axis)?;
        let out = softmax_values(self.value(a), axis, false);
        let rg = self.needs(&[a]);
        Ok(self.push(out, Op::Softmax { src: a, axis }, rg))
    }

    pub fn log_softmax(&mut self, a: Var, axis: usize) -> Result<Var, NumericsError> {
        self.check_axis("log_softmax", a, axis)?;
        let out = softmax_values(self.value(a), axis, true);
        let rg = self.needs(&[a]);
        Ok(self.push(out, Op::LogSoftmax { src: a, axis }, rg))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, NumericsError> {
        let (av, bv) = (self.value(a), self.value(b));
        let (sa, sb) = (av.shape(), bv.shape());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(NumericsError::ShapeMismatch {
                op: "matmul",
                left: sa.to_vec(),
                right: sb.to_vec(),
            });
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, av.values(), (k, 1), bv.values(), (n, 1), false, &mut out);
        let rg = self.needs(&[a, b]);
        Ok(self.push(NumArray::new(vec![m, n], out)?, Op::MatMul(a, b), rg))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var, NumericsError> {
        let av = self.value(a);
        if av.rank() != 2 {
            return Err(NumericsError::Contract {
                op: "transpose",
                detail: format!("expected a matrix, got shape {:?}", av.shape()),
            });
        }
        let (r, c) = (av.shape()[0], av.shape()[1]);
        let x = av.values();
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = x[i * c + j];
            }
        }
        let rg = self.needs(&[a]);
        Ok(self.push(NumArray::new(vec![c, r], out)?, Op::Transpose(a), rg))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var, NumericsError> {
        let out = self.value(a).reshaped(shape)?;
        let rg = self.needs(&[a]);
        Ok(self.push(out, Op::Reshape(a), rg))
    }

    /// Scales each slice along the last axis to unit Euclidean norm.
    ///
    /// Fails with [`NumericsError::Degenerate`] when any slice has norm below
    /// [`NORM_TOLERANCE`].
    pub fn l2_normalize(&mut self, a: Var) -> Result<Var, NumericsError> {
        let av = self.value(a);
        let d = *av.shape().last().ok_or(NumericsError::Contract {
            op: "l2_normalize",
            detail: "scalar input".into(),
        })?;
        let x = av.values();
        let mut norms = Vec::with_capacity(x.len() / d);
        let mut out = vec![0.0; x.len()];
        for (row, dst) in x.chunks(d).zip(out.chunks_mut(d)) {
            let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            if norm.is_nan() || norm < NORM_TOLERANCE {
                return Err(NumericsError::Degenerate {
                    norm,
                    tol: NORM_TOLERANCE,
                });
            }
            for (o, v) in dst.iter_mut().zip(row) {
                *o = v / norm;
            }
            norms.push(norm);
        }
        let shape = av.shape().to_vec();
        let rg = self.needs(&[a]);
        Ok(self.push(NumArray::new(shape, out)?, Op::L2Normalize { src: a, norms }, rg))
    }

    /// Squared Euclidean distance between two vectors of equal length.
    pub fn sq_euclidean(&mut self, a: Var, b: Var) -> Result<Var, NumericsError> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.rank() != 1 || av.shape() != bv.shape() {
            return Err(NumericsError::ShapeMismatch {
                op: "sq_euclidean",
                left: av.shape().to_vec(),
                right: bv.shape().to_vec(),
            });
        }
        let d: f64 = av
            .values()
            .iter()
            .zip(bv.values())
            .map(|(x, y)| (x - y) * (x - y))
            .sum();
        let rg = self.needs(&[a, b]);
        Ok(self.push(NumArray::scalar(d), Op::SqEuclidean(a, b), rg))
    }

    /// Selects slices along the first axis (rows may repeat).
    pub fn gather_rows(&mut self, a: Var, ids: &[usize]) -> Result<Var, NumericsError> {
        let av = self.value(a);
        let rows = *av.shape().first().ok_or(NumericsError::Contract {
            op: "gather_rows",
            detail: "scalar input".into(),
        })?;
        if ids.is_empty() {
            return Err(NumericsError::Contract {
                op: "gather_rows",
                detail: "empty index list".into(),
            });
        }
        let width = av.numel() / rows;
        let x = av.values();
        let mut out = Vec::with_capacity(ids.len() * width);
        for &id in ids {
            if id >= rows {
                return Err(NumericsError::Contract {
                    op: "gather_rows",
                    detail: format!("row {id} out of range for {rows} rows"),
                });
            }
            out.extend_from_slice(&x[id * width..(id + 1) * width]);
        }
        let mut shape = av.shape().to_vec();
        shape[0] = ids.len();
        let rg = self.needs(&[a]);
        Ok(self.push(
            NumArray::new(shape, out)?,
            Op::GatherRows {
                src: a,
                ids: ids.to_vec(),
            },
            rg,
        ))
    }

    /// Concatenates along `axis`; all other extents must agree.
    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var, NumericsError> {
        let first = *parts.first().ok_or(NumericsError::Contract {
            op: "concat",
            detail: "no inputs".into(),
        })?;
        self.check_axis("concat", first, axis)?;
        let base = self.shape(first).to_vec();
        let mut total = 0;
        for &p in parts {
            let s = self.shape(p);
            let compatible =
                s.len() == base.len() && s.iter().zip(&base).enumerate().all(|(i, (x, y))| i == axis || x == y);
            if !compatible {
                return Err(NumericsError::ShapeMismatch {
                    op: "concat",
                    left: base.clone(),
                    right: s.to_vec(),
                });
            }
            total += s[axis];
        }
        let (outer, _, inner) = axis_split(&base, axis);
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &p in parts {
                let pv = self.value(p);
                let chunk = pv.shape()[axis] * inner;
                out.extend_from_slice(&pv.values()[o * chunk..(o + 1) * chunk]);
            }
        }
        let mut shape = base;
        shape[axis] = total;
        let rg = self.needs(parts);
        Ok(self.push(
            NumArray::new(shape, out)?,
            Op::Concat {
                parts: parts.to_vec(),
                axis,
            },
            rg,
        ))
    }

    /// Gathers centered convolution windows from a batch of sequences.
    ///
    /// `a` is `[batch·seq_len, channels]`, one block of `seq_len` rows per
    /// sequence. Row `t` of the output concatenates input rows
    /// `t - (window-1)/2 ..` for `window` steps; positions outside
    /// `0..lengths[b]` read as zeros.
    pub fn unfold(&mut self, a: Var, seq_len: usize, window: usize, lengths: &[usize]) -> Result<Var, NumericsError> {
        let av = self.value(a);
        if av.rank() != 2 || seq_len == 0 || av.shape()[0] != seq_len * lengths.len() || window == 0 {
            return Err(NumericsError::Contract {
                op: "unfold",
                detail: format!(
                    "shape {:?} does not hold {} sequences of length {seq_len} (window {window})",
                    av.shape(),
                    lengths.len()
                ),
            });
        }
        if let Some(&bad) = lengths.iter().find(|&&l| l > seq_len) {
            return Err(NumericsError::Contract {
                op: "unfold",
                detail: format!("length {bad} exceeds sequence length {seq_len}"),
            });
        }
        let c = av.shape()[1];
        let left = (window - 1) / 2;
        let x = av.values();
        let rows = av.shape()[0];
        let mut out = vec![0.0; rows * window * c];
        for (b, &len) in lengths.iter().enumerate() {
            for t in 0..seq_len {
                let dst = &mut out[(b * seq_len + t) * window * c..][..window * c];
                for o in 0..window {
                    let src = t as isize + o as isize - left as isize;
                    if src >= 0 && (src as usize) < len {
                        let from = (b * seq_len + src as usize) * c;
                        dst[o * c..(o + 1) * c].copy_from_slice(&x[from..from + c]);
                    }
                }
            }
        }
        let rg = self.needs(&[a]);
        Ok(self.push(
            NumArray::new(vec![rows, window * c], out)?,
            Op::Unfold {
                src: a,
                seq_len,
                window,
                lengths: lengths.to_vec(),
            },
            rg,
        ))
    }

    /// Per-sequence max over the first `lengths[b]` rows of each `seq_len` block.
    pub fn masked_max_pool(&mut self, a: Var, seq_len: usize, lengths: &[usize]) -> Result<Var, NumericsError> {
        let av = self.value(a);
        if av.rank() != 2 || av.shape()[0] != seq_len * lengths.len() {
            return Err(NumericsError::Contract {
                op: "masked_max_pool",
                detail: format!(
                    "shape {:?} does not hold {} sequences of length {seq_len}",
                    av.shape(),
                    lengths.len()
                ),
            });
        }
        if let Some(&bad) = lengths.iter().find(|&&l| l == 0 || l > seq_len) {
            return Err(NumericsError::Contract {
                op: "masked_max_pool",
                detail: format!("invalid sequence length {bad}"),
            });
        }
        let h = av.shape()[1];
        let x = av.values();
        let mut out = vec![f64::NEG_INFINITY; lengths.len() * h];
        let mut argmax = vec![0usize; lengths.len() * h];
        for (b, &len) in lengths.iter().enumerate() {
            for t in 0..len {
                let row = b * seq_len + t;
                for j in 0..h {
                    let v = x[row * h + j];
                    if v > out[b * h + j] {
                        out[b * h + j] = v;
                        argmax[b * h + j] = row;
                    }
                }
            }
        }
        let rg = self.needs(&[a]);
        Ok(self.push(
            NumArray::new(vec![lengths.len(), h], out)?,
            Op::MaskedMaxPool { src: a, argmax },
            rg,
        ))
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients, NumericsError> {
        let lv = self.value(loss);
        if lv.numel() != 1 {
            return Err(NumericsError::NonScalarLoss {
                shape: lv.shape().to_vec(),
            });
        }
        let mut grads: Vec<Option<NumArray>> = vec![None; loss.0 + 1];
        if self.nodes[loss.0].requires_grad {
            grads[loss.0] = Some(NumArray::filled(lv.shape(), 1.0));
        }
        for i in (0..=loss.0).rev() {
            let (lower, upper) = grads.split_at_mut(i);
            let Some(g) = upper[0].as_ref() else { continue };
            self.propagate(i, g.values(), lower);
        }
        Ok(Gradients { grads })
    }

    /// Gradient buffer of an input, allocated on first use; `None` for constants.
    fn grad_slot<'a>(&self, lower: &'a mut [Option<NumArray>], v: Var) -> Option<&'a mut [f64]> {
        let n = &self.nodes[v.0];
        if !n.requires_grad {
            return None;
        }
        Some(
            lower[v.0]
                .get_or_insert_with(|| NumArray::zeros(n.value.shape()))
                .values_mut(),
        )
    }

    fn propagate(&self, i: usize, g: &[f64], lower: &mut [Option<NumArray>]) {
        let node = &self.nodes[i];
        let y = node.value.values();
        macro_rules! grad_of {
            ($v:expr) => {
                self.grad_slot(lower, $v)
            };
        }
        match &node.op {
            Op::Leaf => {}
            Op::Binary(kind, a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let out_shape = node.value.shape();
                let sa = aligned_strides(av.shape(), out_shape);
                let sb = aligned_strides(bv.shape(), out_shape);
                let (xa, xb) = (av.values(), bv.values());
                if let Some(ga) = grad_of!(*a) {
                    broadcast_walk(out_shape, &sa, &sb, |o, ia, ib| {
                        ga[ia] += match kind {
                            BinaryKind::Add | BinaryKind::Sub => g[o],
                            BinaryKind::Mul => g[o] * xb[ib],
                            BinaryKind::Div => g[o] / xb[ib],
                        }
                    });
                }
                if let Some(gb) = grad_of!(*b) {
                    broadcast_walk(out_shape, &sa, &sb, |o, ia, ib| {
                        gb[ib] += match kind {
                            BinaryKind::Add => g[o],
                            BinaryKind::Sub => -g[o],
                            BinaryKind::Mul => g[o] * xa[ia],
                            BinaryKind::Div => -g[o] * xa[ia] / (xb[ib] * xb[ib]),
                        }
                    });
                }
            }
            Op::Unary(kind, a) => {
                let x = self.value(*a).values();
                if let Some(ga) = grad_of!(*a) {
                    for k in 0..g.len() {
                        ga[k] += g[k]
                            * match kind {
                                UnaryKind::Tanh => 1.0 - y[k] * y[k],
                                UnaryKind::Exp => y[k],
                                UnaryKind::Log => 1.0 / x[k],
                                UnaryKind::Neg => -1.0,
                                UnaryKind::Square => 2.0 * x[k],
                                UnaryKind::Relu => {
                                    if x[k] > 0.0 {
                                        1.0
                                    } else {
                                        0.0
                                    }
                                }
                                UnaryKind::Sigmoid => y[k] * (1.0 - y[k]),
                                UnaryKind::Scale(c) => *c,
                                UnaryKind::Shift(_) => 1.0,
                            };
                    }
                }
            }
            Op::MatMul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let (m, k) = (av.shape()[0], av.shape()[1]);
                let n = bv.shape()[1];
                if let Some(ga) = grad_of!(*a) {
                    // dA = G · Bᵀ
                    gemm(m, n, k, g, (n, 1), bv.values(), (1, n), true, ga);
                }
                if let Some(gb) = grad_of!(*b) {
                    // dB = Aᵀ · G
                    gemm(k, m, n, av.values(), (1, k), g, (n, 1), true, gb);
                }
            }
            Op::Transpose(a) => {
                if let Some(ga) = grad_of!(*a) {
                    let shape = self.shape(*a);
                    let (r, c) = (shape[0], shape[1]);
                    for i in 0..r {
                        for j in 0..c {
                            ga[i * c + j] += g[j * r + i];
                        }
                    }
                }
            }
            Op::Reshape(a) => {
                if let Some(ga) = grad_of!(*a) {
                    for (d, s) in ga.iter_mut().zip(g) {
                        *d += s;
                    }
                }
            }
            Op::Reduce { kind, src, axis } => {
                let shape = self.shape(*src).to_vec();
                if let Some(ga) = grad_of!(*src) {
                    match axis {
                        None => {
                            let scale = match kind {
                                ReduceKind::Sum => 1.0,
                                ReduceKind::Mean => 1.0 / ga.len() as f64,
                            };
                            for d in ga.iter_mut() {
                                *d += g[0] * scale;
                            }
                        }
                        Some(ax) => {
                            let (outer, n, inner) = axis_split(&shape, *ax);
                            let scale = match kind {
                                ReduceKind::Sum => 1.0,
                                ReduceKind::Mean => 1.0 / n as f64,
                            };
                            for o in 0..outer {
                                for j in 0..n {
                                    let base = (o * n + j) * inner;
                                    for t in 0..inner {
                                        ga[base + t] += g[o * inner + t] * scale;
                                    }
                                }
                            }
                        }
                    }
                }
            }
            Op::Softmax { src, axis } => {
                let shape = self.shape(*src).to_vec();
                if let Some(ga) = grad_of!(*src) {
                    let (outer, n, inner) = axis_split(&shape, *axis);
                    for o in 0..outer {
                        for t in 0..inner {
                            let at = |j: usize| (o * n + j) * inner + t;
                            let dot: f64 = (0..n).map(|j| g[at(j)] * y[at(j)]).sum();
                            for j in 0..n {
                                ga[at(j)] += y[at(j)] * (g[at(j)] - dot);
                            }
                        }
                    }
                }
            }
            Op::LogSoftmax { src, axis } => {
                let shape = self.shape(*src).to_vec();
                if let Some(ga) = grad_of!(*src) {
                    let (outer, n, inner) = axis_split(&shape, *axis);
                    for o in 0..outer {
                        for t in 0..inner {
                            let at = |j: usize| (o * n + j) * inner + t;
                            let total: f64 = (0..n).map(|j| g[at(j)]).sum();
                            for j in 0..n {
                                ga[at(j)] += g[at(j)] - y[at(j)].exp() * total;
                            }
                        }
                    }
                }
            }
            Op::L2Normalize { src, norms } => {
                if let Some(ga) = grad_of!(*src) {
                    let d = y.len() / norms.len();
                    for (r, norm) in norms.iter().enumerate() {
                        let range = r * d..(r + 1) * d;
                        let (yr, gr) = (&y[range.clone()], &g[range.clone()]);
                        let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                        for (k, dst) in ga[range].iter_mut().enumerate() {
                            *dst += (gr[k] - yr[k] * dot) / norm;
                        }
                    }
                }
            }
            Op::SqEuclidean(a, b) => {
                let (xa, xb) = (self.value(*a).values(), self.value(*b).values());
                if let Some(ga) = grad_of!(*a) {
                    for k in 0..xa.len() {
                        ga[k] += 2.0 * g[0] * (xa[k] - xb[k]);
                    }
                }
                if let Some(gb) = grad_of!(*b) {
                    for k in 0..xa.len() {
                        gb[k] -= 2.0 * g[0] * (xa[k] - xb[k]);
                    }
                }
            }
            Op::GatherRows { src, ids } => {
                if let Some(ga) = grad_of!(*src) {
                    let width = g.len() / ids.len();
                    for (r, &id) in ids.iter().enumerate() {
                        for k in 0..width {
                            ga[id * width + k] += g[r * width + k];
                        }
                    }
                }
            }
            Op::Concat { parts, axis } => {
                let (outer, total, inner) = axis_split(node.value.shape(), *axis);
                let mut offset = 0;
                for &p in parts {
                    let extent = self.shape(p)[*axis];
                    if let Some(gp) = grad_of!(p) {
                        let chunk = extent * inner;
                        for o in 0..outer {
                            let from = o * total * inner + offset * inner;
                            for k in 0..chunk {
                                gp[o * chunk + k] += g[from + k];
                            }
                        }
                    }
                    offset += extent;
                }
            }
            Op::Unfold {
                src,
                seq_len,
                window,
                lengths,
            } => {
                let c = self.shape(*src)[1];
                if let Some(ga) = grad_of!(*src) {
                    let left = (window - 1) / 2;
                    for (b, &len) in lengths.iter().enumerate() {
                        for t in 0..*seq_len {
                            let from = &g[(b * seq_len + t) * window * c..][..window * c];
                            for o in 0..*window {
                                let s = t as isize + o as isize - left as isize;
                                if s >= 0 && (s as usize) < len {
                                    let to = (b * seq_len + s as usize) * c;
                                    for k in 0..c {
                                        ga[to + k] += from[o * c + k];
                                    }
                                }
                            }
                        }
                    }
                }
            }
            Op::MaskedMaxPool { src, argmax } => {
                let h = node.value.shape()[1];
                if let Some(ga) = grad_of!(*src) {
                    for (k, &row) in argmax.iter().enumerate() {
                        ga[row * h + k % h] += g[k];
                    }
                }
            }
        }
    }
}

fn softmax_values(av: &NumArray, axis: usize, log: bool) -> NumArray {
    let (outer, n, inner) = axis_split(av.shape(), axis);
    let x = av.values();
    let mut out = vec![0.0; x.len()];
    for o in 0..outer {
        for t in 0..inner {
            let at = |j: usize| (o * n + j) * inner + t;
            let max = (0..n).map(|j| x[at(j)]).fold(f64::NEG_INFINITY, f64::max);
            let total: f64 = (0..n).map(|j| (x[at(j)] - max).exp()).sum();
            for j in 0..n {
                out[at(j)] = if log {
                    x[at(j)] - max - total.ln()
                } else {
                    (x[at(j)] - max).exp() / total
                };
            }
        }
    }
    NumArray::new(av.shape().to_vec(), out).expect("shape preserved")
}
