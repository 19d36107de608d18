//! Record-on-forward tape for reverse-mode differentiation.
//!
//! Every operation appends a node holding its result and enough context to
//! replay the chain rule in reverse. Nodes are created in evaluation order,
//! so the tape itself is the topological order: one reverse sweep visits
//! each node after all of its consumers.

use super::{AdError, Tensor};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum BinKind {
    Add,
    Sub,
    Mul,
    Div,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum UnKind {
    Neg,
    Sqrt,
    Abs,
    Tanhshrink,
    Softplus,
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Matmul { a: Var, b: Var },
    Transpose { a: Var },
    Binary { kind: BinKind, a: Var, b: Var },
    Unary { kind: UnKind, a: Var },
    Scale { a: Var, c: f64 },
    Offset { a: Var },
    SumAll { a: Var },
    MeanAll { a: Var },
    Concat { parts: Vec<Var>, axis: usize },
    Narrow { a: Var, axis: usize, start: usize },
    Reshape { a: Var },
    MaskedSoftmax { logits: Var, mask: Var, axis: usize },
    PairRotate { a: Var },
}

struct Node {
    op: Op,
    shape: Vec<usize>,
    data: Vec<f64>,
    requires_grad: bool,
}

/// Recording context for one forward/backward pass.
///
/// Parameters are registered per pass; a frozen model evaluated on a fresh
/// tape per thread shares no mutable state.
pub struct Tape {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
    backward_done: bool,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

// ── Broadcast helpers ────────────────────────────────────────────────

/// Maps output linear indices back to an input's linear indices under
/// numpy-style broadcasting (stride 0 on size-1 / missing dims).
struct BcastMap {
    out_shape: Vec<usize>,
    strides: Vec<usize>,
    trivial: bool,
}

impl BcastMap {
    fn new(out_shape: &[usize], in_shape: &[usize]) -> Self {
        let rank = out_shape.len();
        let pad = rank - in_shape.len();
        let mut in_strides = vec![0usize; rank];
        let mut acc = 1usize;
        for k in (0..in_shape.len()).rev() {
            in_strides[pad + k] = if in_shape[k] == 1 { 0 } else { acc };
            acc *= in_shape[k];
        }
        let trivial = in_shape == out_shape;
        BcastMap {
            out_shape: out_shape.to_vec(),
            strides: in_strides,
            trivial,
        }
    }

    #[inline]
    fn map(&self, mut lin: usize) -> usize {
        if self.trivial {
            return lin;
        }
        let mut off = 0;
        for k in (0..self.out_shape.len()).rev() {
            let e = self.out_shape[k];
            let i = lin % e;
            lin /= e;
            off += i * self.strides[k];
        }
        off
    }
}

fn broadcast_shape(a: &[usize], b: &[usize], op: &'static str) -> Result<Vec<usize>, AdError> {
    let rank = a.len().max(b.len());
    let mut out = vec![0usize; rank];
    for k in 0..rank {
        let ea = if k < rank - a.len() { 1 } else { a[k - (rank - a.len())] };
        let eb = if k < rank - b.len() { 1 } else { b[k - (rank - b.len())] };
        if ea == eb || ea == 1 || eb == 1 {
            out[k] = ea.max(eb);
        } else {
            return Err(AdError::ShapeMismatch {
                op,
                lhs: a.to_vec(),
                rhs: b.to_vec(),
            });
        }
    }
    Ok(out)
}

fn lane_geometry(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let extent = shape[axis];
    let outer: usize = shape[..axis].iter().product();
    let inner: usize = shape[axis + 1..].iter().product();
    (outer, extent, inner)
}

impl Tape {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            grads: Vec::new(),
            backward_done: false,
        }
    }

    fn push(&mut self, op: Op, shape: Vec<usize>, data: Vec<f64>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            op,
            shape,
            data,
            requires_grad,
        });
        self.grads.push(None);
        Var(self.nodes.len() - 1)
    }

    fn requires(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Register a constant: participates in the forward pass, receives no gradient.
    pub fn input(&mut self, t: &Tensor) -> Var {
        self.push(Op::Leaf, t.shape().to_vec(), t.data().to_vec(), false)
    }

    /// Register a trainable leaf: `grad()` is defined for it after `backward()`.
    pub fn param(&mut self, t: &Tensor) -> Var {
        self.push(Op::Leaf, t.shape().to_vec(), t.data().to_vec(), true)
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn data(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].data
    }

    pub fn value(&self, v: Var) -> Tensor {
        Tensor::from_vec(self.nodes[v.0].shape.clone(), self.nodes[v.0].data.clone())
            .expect("node shape/data consistent")
    }

    /// Gradient of the last `backward()` loss w.r.t. `v`, if any flowed to it.
    pub fn grad(&self, v: Var) -> Option<Tensor> {
        self.grads[v.0].as_ref().map(|g| {
            Tensor::from_vec(self.nodes[v.0].shape.clone(), g.clone())
                .expect("grad shape mirrors node shape")
        })
    }

    pub fn num_nodes(&self) -> usize {
        self.nodes.len()
    }

    // ── Forward operations ───────────────────────────────────────────

    /// Rank-2 matrix product `[p,q]·[q,r] → [p,r]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, AdError> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(AdError::ShapeMismatch {
                op: "matmul",
                lhs: sa.to_vec(),
                rhs: sb.to_vec(),
            });
        }
        let (p, q, r) = (sa[0], sa[1], sb[1]);
        let da = &self.nodes[a.0].data;
        let db = &self.nodes[b.0].data;
        let mut out = vec![0.0; p * r];
        for i in 0..p {
            for k in 0..q {
                let aik = da[i * q + k];
                if aik == 0.0 {
                    continue;
                }
                let brow = &db[k * r..(k + 1) * r];
                let orow = &mut out[i * r..(i + 1) * r];
                for (o, &bv) in orow.iter_mut().zip(brow) {
                    *o += aik * bv;
                }
            }
        }
        let req = self.requires(a) || self.requires(b);
        Ok(self.push(Op::Matmul { a, b }, vec![p, r], out, req))
    }

    /// Rank-2 transpose.
    pub fn transpose(&mut self, a: Var) -> Result<Var, AdError> {
        let sa = self.shape(a);
        if sa.len() != 2 {
            return Err(AdError::ShapeMismatch {
                op: "transpose",
                lhs: sa.to_vec(),
                rhs: vec![],
            });
        }
        let (p, q) = (sa[0], sa[1]);
        let da = &self.nodes[a.0].data;
        let mut out = vec![0.0; p * q];
        for i in 0..p {
            for j in 0..q {
                out[j * p + i] = da[i * q + j];
            }
        }
        let req = self.requires(a);
        Ok(self.push(Op::Transpose { a }, vec![q, p], out, req))
    }

    fn binary(&mut self, kind: BinKind, a: Var, b: Var) -> Result<Var, AdError> {
        let op_name = match kind {
            BinKind::Add => "add",
            BinKind::Sub => "sub",
            BinKind::Mul => "mul",
            BinKind::Div => "div",
        };
        let out_shape = broadcast_shape(self.shape(a), self.shape(b), op_name)?;
        let ma = BcastMap::new(&out_shape, self.shape(a));
        let mb = BcastMap::new(&out_shape, self.shape(b));
        let numel: usize = out_shape.iter().product();
        let da = &self.nodes[a.0].data;
        let db = &self.nodes[b.0].data;
        let mut out = vec![0.0; numel];
        for (i, o) in out.iter_mut().enumerate() {
            let x = da[ma.map(i)];
            let y = db[mb.map(i)];
            *o = match kind {
                BinKind::Add => x + y,
                BinKind::Sub => x - y,
                BinKind::Mul => x * y,
                BinKind::Div => x / y,
            };
        }
        let req = self.requires(a) || self.requires(b);
        Ok(self.push(Op::Binary { kind, a, b }, out_shape, out, req))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, AdError> {
        self.binary(BinKind::Add, a, b)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, AdError> {
        self.binary(BinKind::Sub, a, b)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, AdError> {
        self.binary(BinKind::Mul, a, b)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var, AdError> {
        self.binary(BinKind::Div, a, b)
    }

    fn unary(&mut self, kind: UnKind, a: Var) -> Var {
        let data: Vec<f64> = self.nodes[a.0]
            .data
            .iter()
            .map(|&x| match kind {
                UnKind::Neg => -x,
                UnKind::Sqrt => x.sqrt(),
                UnKind::Abs => x.abs(),
                UnKind::Tanhshrink => x - x.tanh(),
                UnKind::Softplus => softplus(x),
            })
            .collect();
        let shape = self.nodes[a.0].shape.clone();
        let req = self.requires(a);
        self.push(Op::Unary { kind, a }, shape, data, req)
    }

    pub fn neg(&mut self, a: Var) -> Var {
        self.unary(UnKind::Neg, a)
    }

    pub fn sqrt(&mut self, a: Var) -> Var {
        self.unary(UnKind::Sqrt, a)
    }

    pub fn abs(&mut self, a: Var) -> Var {
        self.unary(UnKind::Abs, a)
    }

    /// Elementwise `x − tanh(x)`.
    pub fn tanhshrink(&mut self, a: Var) -> Var {
        self.unary(UnKind::Tanhshrink, a)
    }

    /// Elementwise `ln(1 + eˣ)`, numerically stabilized.
    pub fn softplus(&mut self, a: Var) -> Var {
        self.unary(UnKind::Softplus, a)
    }

    /// Multiply by a compile-time constant.
    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let data: Vec<f64> = self.nodes[a.0].data.iter().map(|&x| x * c).collect();
        let shape = self.nodes[a.0].shape.clone();
        let req = self.requires(a);
        self.push(Op::Scale { a, c }, shape, data, req)
    }

    /// Add a constant to every element.
    pub fn offset(&mut self, a: Var, c: f64) -> Var {
        let data: Vec<f64> = self.nodes[a.0].data.iter().map(|&x| x + c).collect();
        let shape = self.nodes[a.0].shape.clone();
        let req = self.requires(a);
        self.push(Op::Offset { a }, shape, data, req)
    }

    /// Sum of all elements, as a scalar.
    pub fn sum_all(&mut self, a: Var) -> Var {
        let s: f64 = self.nodes[a.0].data.iter().sum();
        let req = self.requires(a);
        self.push(Op::SumAll { a }, vec![], vec![s], req)
    }

    /// Mean of all elements, as a scalar.
    pub fn mean_all(&mut self, a: Var) -> Var {
        let n = self.nodes[a.0].data.len();
        let s: f64 = self.nodes[a.0].data.iter().sum();
        let req = self.requires(a);
        self.push(Op::MeanAll { a }, vec![], vec![s / n as f64], req)
    }

    /// Concatenate along `axis`; all other extents must agree.
    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var, AdError> {
        let first = parts.first().ok_or(AdError::EmptyConcat)?;
        let rank = self.shape(*first).len();
        if axis >= rank {
            return Err(AdError::ShapeMismatch {
                op: "concat",
                lhs: self.shape(*first).to_vec(),
                rhs: vec![axis],
            });
        }
        let mut out_shape = self.shape(*first).to_vec();
        out_shape[axis] = 0;
        for &p in parts {
            let sp = self.shape(p);
            if sp.len() != rank
                || sp[..axis] != out_shape[..axis]
                || sp[axis + 1..] != out_shape[axis + 1..]
            {
                return Err(AdError::ShapeMismatch {
                    op: "concat",
                    lhs: out_shape,
                    rhs: sp.to_vec(),
                });
            }
            out_shape[axis] += sp[axis];
        }
        let (outer, extent, inner) = lane_geometry(&out_shape, axis);
        let mut out = vec![0.0; outer * extent * inner];
        let mut at = 0usize;
        for &p in parts {
            let ep = self.shape(p)[axis];
            let dp = &self.nodes[p.0].data;
            for o in 0..outer {
                let src = &dp[o * ep * inner..(o + 1) * ep * inner];
                let dst_base = o * extent * inner + at * inner;
                out[dst_base..dst_base + ep * inner].copy_from_slice(src);
            }
            at += ep;
        }
        let req = parts.iter().any(|&p| self.requires(p));
        Ok(self.push(
            Op::Concat {
                parts: parts.to_vec(),
                axis,
            },
            out_shape,
            out,
            req,
        ))
    }

    /// Contiguous slice `[start, start+len)` along `axis`.
    pub fn narrow(&mut self, a: Var, axis: usize, start: usize, len: usize) -> Result<Var, AdError> {
        let sa = self.shape(a).to_vec();
        if axis >= sa.len() || start + len > sa[axis] {
            return Err(AdError::ShapeMismatch {
                op: "narrow",
                lhs: sa,
                rhs: vec![axis, start, len],
            });
        }
        let (outer, extent, inner) = lane_geometry(&sa, axis);
        let mut out_shape = sa.clone();
        out_shape[axis] = len;
        let da = &self.nodes[a.0].data;
        let mut out = vec![0.0; outer * len * inner];
        for o in 0..outer {
            let src_base = o * extent * inner + start * inner;
            let dst_base = o * len * inner;
            out[dst_base..dst_base + len * inner]
                .copy_from_slice(&da[src_base..src_base + len * inner]);
        }
        let req = self.requires(a);
        Ok(self.push(Op::Narrow { a, axis, start }, out_shape, out, req))
    }

    /// View with a new shape of identical element count.
    pub fn reshape(&mut self, a: Var, shape: Vec<usize>) -> Result<Var, AdError> {
        let numel: usize = shape.iter().product();
        if numel != self.nodes[a.0].data.len() {
            return Err(AdError::ShapeMismatch {
                op: "reshape",
                lhs: self.shape(a).to_vec(),
                rhs: shape,
            });
        }
        let data = self.nodes[a.0].data.clone();
        let req = self.requires(a);
        Ok(self.push(Op::Reshape { a }, shape, data, req))
    }

    /// Softmax along `axis`, excluding positions where `mask` is 1.
    ///
    /// Masked positions receive weight exactly 0.0 and are skipped when
    /// computing the stabilizing maximum and the normalizer; a lane with no
    /// unmasked position is an error. `mask` must broadcast to `logits` and
    /// never receives gradient.
    pub fn masked_softmax(&mut self, logits: Var, mask: Var, axis: usize) -> Result<Var, AdError> {
        let shape = self.shape(logits).to_vec();
        if axis >= shape.len() {
            return Err(AdError::ShapeMismatch {
                op: "masked_softmax",
                lhs: shape,
                rhs: vec![axis],
            });
        }
        // Mask must broadcast onto the logits shape exactly.
        let bshape = broadcast_shape(&shape, self.shape(mask), "masked_softmax")?;
        if bshape != shape {
            return Err(AdError::ShapeMismatch {
                op: "masked_softmax",
                lhs: shape,
                rhs: self.shape(mask).to_vec(),
            });
        }
        let mmap = BcastMap::new(&shape, self.shape(mask));
        let (outer, extent, inner) = lane_geometry(&shape, axis);
        let dl = &self.nodes[logits.0].data;
        let dm = &self.nodes[mask.0].data;
        let mut out = vec![0.0; dl.len()];
        for o in 0..outer {
            for i in 0..inner {
                let idx = |k: usize| o * extent * inner + k * inner + i;
                let active = |k: usize| dm[mmap.map(idx(k))] < 0.5;
                let mut max = f64::NEG_INFINITY;
                for k in 0..extent {
                    if active(k) {
                        max = max.max(dl[idx(k)]);
                    }
                }
                if max == f64::NEG_INFINITY {
                    return Err(AdError::FullyMaskedRow);
                }
                let mut denom = 0.0;
                for k in 0..extent {
                    if active(k) {
                        let e = (dl[idx(k)] - max).exp();
                        out[idx(k)] = e;
                        denom += e;
                    }
                }
                for k in 0..extent {
                    if active(k) {
                        out[idx(k)] /= denom;
                    }
                }
            }
        }
        let req = self.requires(logits);
        Ok(self.push(Op::MaskedSoftmax { logits, mask, axis }, shape, out, req))
    }

    /// Per adjacent pair `(x₀,x₁) → (−x₁, x₀)` on the last axis.
    ///
    /// Combined with elementwise cos/sin factors this realizes 2-D plane
    /// rotations without any dense rotation matrix.
    pub fn pair_rotate(&mut self, a: Var) -> Result<Var, AdError> {
        let shape = self.shape(a).to_vec();
        let last = *shape.last().ok_or(AdError::ShapeMismatch {
            op: "pair_rotate",
            lhs: shape.clone(),
            rhs: vec![],
        })?;
        if last % 2 != 0 {
            return Err(AdError::ShapeMismatch {
                op: "pair_rotate",
                lhs: shape,
                rhs: vec![2],
            });
        }
        let da = &self.nodes[a.0].data;
        let mut out = vec![0.0; da.len()];
        for p in 0..da.len() / 2 {
            out[2 * p] = -da[2 * p + 1];
            out[2 * p + 1] = da[2 * p];
        }
        let req = self.requires(a);
        Ok(self.push(Op::PairRotate { a }, shape, out, req))
    }

    // ── Backward ─────────────────────────────────────────────────────

    /// Accumulate `dLoss/dNode` for every `requires_grad` node reachable
    /// from the scalar `loss`. A tape records exactly one backward pass.
    pub fn backward(&mut self, loss: Var) -> Result<(), AdError> {
        if self.backward_done {
            return Err(AdError::BackwardTwice);
        }
        if self.nodes[loss.0].data.len() != 1 {
            return Err(AdError::NonScalarLoss {
                shape: self.shape(loss).to_vec(),
            });
        }
        self.backward_done = true;
        self.grads[loss.0] = Some(vec![1.0]);
        for id in (0..=loss.0).rev() {
            if self.grads[id].is_none() || !self.nodes[id].requires_grad {
                continue;
            }
            let g = self.grads[id].take().expect("checked above");
            self.step_backward(id, &g);
            self.grads[id] = Some(g);
        }
        Ok(())
    }

    fn accumulate(&mut self, v: Var, idx: usize, val: f64) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        let slot = self.grads[v.0].get_or_insert_with(|| vec![0.0; self.nodes[v.0].data.len()]);
        slot[idx] += val;
    }

    fn accumulate_all(&mut self, v: Var, vals: &[f64]) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        let slot = self.grads[v.0].get_or_insert_with(|| vec![0.0; self.nodes[v.0].data.len()]);
        for (s, &x) in slot.iter_mut().zip(vals) {
            *s += x;
        }
    }

    fn step_backward(&mut self, id: usize, g: &[f64]) {
        let op = self.nodes[id].op.clone();
        match op {
            Op::Leaf => {}
            Op::Matmul { a, b } => {
                let (p, q) = (self.nodes[a.0].shape[0], self.nodes[a.0].shape[1]);
                let r = self.nodes[b.0].shape[1];
                if self.requires(a) {
                    // dL/da = g · bᵀ
                    let db = self.nodes[b.0].data.clone();
                    let mut da = vec![0.0; p * q];
                    for i in 0..p {
                        for j in 0..r {
                            let gv = g[i * r + j];
                            if gv == 0.0 {
                                continue;
                            }
                            for k in 0..q {
                                da[i * q + k] += gv * db[k * r + j];
                            }
                        }
                    }
                    self.accumulate_all(a, &da);
                }
                if self.requires(b) {
                    // dL/db = aᵀ · g
                    let da = self.nodes[a.0].data.clone();
                    let mut db = vec![0.0; q * r];
                    for i in 0..p {
                        for k in 0..q {
                            let av = da[i * q + k];
                            if av == 0.0 {
                                continue;
                            }
                            for j in 0..r {
                                db[k * r + j] += av * g[i * r + j];
                            }
                        }
                    }
                    self.accumulate_all(b, &db);
                }
            }
            Op::Transpose { a } => {
                let (q, p) = (self.nodes[id].shape[0], self.nodes[id].shape[1]);
                let mut da = vec![0.0; p * q];
                for j in 0..q {
                    for i in 0..p {
                        da[i * q + j] = g[j * p + i];
                    }
                }
                self.accumulate_all(a, &da);
            }
            Op::Binary { kind, a, b } => {
                let out_shape = self.nodes[id].shape.clone();
                let ma = BcastMap::new(&out_shape, &self.nodes[a.0].shape);
                let mb = BcastMap::new(&out_shape, &self.nodes[b.0].shape);
                let need_a = self.requires(a);
                let need_b = self.requires(b);
                let da = self.nodes[a.0].data.clone();
                let db = self.nodes[b.0].data.clone();
                for (i, &gv) in g.iter().enumerate() {
                    if gv == 0.0 {
                        continue;
                    }
                    let (ia, ib) = (ma.map(i), mb.map(i));
                    match kind {
                        BinKind::Add => {
                            if need_a {
                                self.accumulate(a, ia, gv);
                            }
                            if need_b {
                                self.accumulate(b, ib, gv);
                            }
                        }
                        BinKind::Sub => {
                            if need_a {
                                self.accumulate(a, ia, gv);
                            }
                            if need_b {
                                self.accumulate(b, ib, -gv);
                            }
                        }
                        BinKind::Mul => {
                            if need_a {
                                self.accumulate(a, ia, gv * db[ib]);
                            }
                            if need_b {
                                self.accumulate(b, ib, gv * da[ia]);
                            }
                        }
                        BinKind::Div => {
                            let y = db[ib];
                            if need_a {
                                self.accumulate(a, ia, gv / y);
                            }
                            if need_b {
                                self.accumulate(b, ib, -gv * da[ia] / (y * y));
                            }
                        }
                    }
                }
            }
            Op::Unary { kind, a } => {
                let xs = self.nodes[a.0].data.clone();
                let da: Vec<f64> = g
                    .iter()
                    .zip(&xs)
                    .map(|(&gv, &x)| {
                        gv * match kind {
                            UnKind::Neg => -1.0,
                            UnKind::Sqrt => 0.5 / x.sqrt(),
                            UnKind::Abs => {
                                if x > 0.0 {
                                    1.0
                                } else if x < 0.0 {
                                    -1.0
                                } else {
                                    0.0
                                }
                            }
                            UnKind::Tanhshrink => {
                                let t = x.tanh();
                                t * t
                            }
                            UnKind::Softplus => sigmoid(x),
                        }
                    })
                    .collect();
                self.accumulate_all(a, &da);
            }
            Op::Scale { a, c } => {
                let da: Vec<f64> = g.iter().map(|&gv| gv * c).collect();
                self.accumulate_all(a, &da);
            }
            Op::Offset { a } => {
                self.accumulate_all(a, g);
            }
            Op::SumAll { a } => {
                let n = self.nodes[a.0].data.len();
                self.accumulate_all(a, &vec![g[0]; n]);
            }
            Op::MeanAll { a } => {
                let n = self.nodes[a.0].data.len();
                self.accumulate_all(a, &vec![g[0] / n as f64; n]);
            }
            Op::Concat { parts, axis } => {
                let out_shape = self.nodes[id].shape.clone();
                let (outer, extent, inner) = lane_geometry(&out_shape, axis);
                let mut at = 0usize;
                for &p in &parts {
                    let ep = self.nodes[p.0].shape[axis];
                    if self.requires(p) {
                        let mut dp = vec![0.0; self.nodes[p.0].data.len()];
                        for o in 0..outer {
                            let src_base = o * extent * inner + at * inner;
                            let dst_base = o * ep * inner;
                            dp[dst_base..dst_base + ep * inner]
                                .copy_from_slice(&g[src_base..src_base + ep * inner]);
                        }
                        self.accumulate_all(p, &dp);
                    }
                    at += ep;
                }
            }
            Op::Narrow { a, axis, start } => {
                let in_shape = self.nodes[a.0].shape.clone();
                let (outer, extent, inner) = lane_geometry(&in_shape, axis);
                let len = self.nodes[id].shape[axis];
                let mut da = vec![0.0; self.nodes[a.0].data.len()];
                for o in 0..outer {
                    let dst_base = o * extent * inner + start * inner;
                    let src_base = o * len * inner;
                    da[dst_base..dst_base + len * inner]
                        .copy_from_slice(&g[src_base..src_base + len * inner]);
                }
                self.accumulate_all(a, &da);
            }
            Op::Reshape { a } => {
                self.accumulate_all(a, g);
            }
            Op::MaskedSoftmax { logits, mask, axis } => {
                let shape = self.nodes[id].shape.clone();
                let mmap = BcastMap::new(&shape, &self.nodes[mask.0].shape);
                let (outer, extent, inner) = lane_geometry(&shape, axis);
                let w = self.nodes[id].data.clone();
                let dm = self.nodes[mask.0].data.clone();
                let mut dl = vec![0.0; w.len()];
                for o in 0..outer {
                    for i in 0..inner {
                        let idx = |k: usize| o * extent * inner + k * inner + i;
                        let mut dot = 0.0;
                        for k in 0..extent {
                            if dm[mmap.map(idx(k))] < 0.5 {
                                dot += g[idx(k)] * w[idx(k)];
                            }
                        }
                        for k in 0..extent {
                            if dm[mmap.map(idx(k))] < 0.5 {
                                dl[idx(k)] = w[idx(k)] * (g[idx(k)] - dot);
                            }
                        }
                    }
                }
                self.accumulate_all(logits, &dl);
            }
            Op::PairRotate { a } => {
                // Transpose of (x₀,x₁)→(−x₁,x₀) is (g₀,g₁)→(g₁,−g₀).
                let mut da = vec![0.0; g.len()];
                for p in 0..g.len() / 2 {
                    da[2 * p] = g[2 * p + 1];
                    da[2 * p + 1] = -g[2 * p];
                }
                self.accumulate_all(a, &da);
            }
        }
    }
}

#[inline]
fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[inline]
fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}
