//! A build-per-forward reverse-mode tape.
//!
//! Every operation on a [`Var`] appends a node holding its value and, when
//! any input requires a gradient, a closure mapping the output gradient to
//! one gradient per input. [`Tape::backward`] walks the nodes in reverse
//! insertion order, which is a valid topological order because a node can
//! only reference earlier nodes.
//!
//! The tape also owns a multiply-accumulate counter so that attention
//! kernels can be measured by instrumentation rather than by formula.

use std::cell::{Cell, Ref, RefCell};
use std::fmt;
use std::rc::Rc;

use crate::error::{Error, Result};
use crate::tensor::{dot, matmul_into, Tensor};

type BackwardFn = Box<dyn Fn(&Tensor) -> Vec<Tensor>>;

struct Node {
    value: Rc<Tensor>,
    parents: Vec<usize>,
    backward: Option<BackwardFn>,
    requires_grad: bool,
}

/// Category a multiply-accumulate is booked under.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MacKind {
    /// Query-key dot products.
    AttnScore,
    /// Attention-weighted value sums.
    AttnValue,
    /// Dense projections (Q/K/V/output, FC, FFN, SAPE).
    Linear,
    /// Sparse convolution taps.
    Conv,
}

impl MacKind {
    const ALL: [MacKind; 4] = [
        MacKind::AttnScore,
        MacKind::AttnValue,
        MacKind::Linear,
        MacKind::Conv,
    ];

    fn slot(self) -> usize {
        self as usize
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct MacCounts {
    pub attn_score: u64,
    pub attn_value: u64,
    pub linear: u64,
    pub conv: u64,
}

impl MacCounts {
    /// Attention MACs only (scores plus weighted values).
    pub fn attention(&self) -> u64 {
        self.attn_score + self.attn_value
    }

    pub fn get(&self, kind: MacKind) -> u64 {
        match kind {
            MacKind::AttnScore => self.attn_score,
            MacKind::AttnValue => self.attn_value,
            MacKind::Linear => self.linear,
            MacKind::Conv => self.conv,
        }
    }
}

impl std::ops::Sub for MacCounts {
    type Output = MacCounts;

    fn sub(self, rhs: Self) -> Self {
        MacCounts {
            attn_score: self.attn_score - rhs.attn_score,
            attn_value: self.attn_value - rhs.attn_value,
            linear: self.linear - rhs.linear,
            conv: self.conv - rhs.conv,
        }
    }
}

#[derive(Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
    macs: Cell<[u64; 4]>,
}

impl fmt::Debug for Tape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tape")
            .field("nodes", &self.nodes.borrow().len())
            .field("macs", &self.macs())
            .finish()
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Leaf that receives a gradient.
    pub fn param(&self, value: Tensor) -> Var<'_> {
        self.push(value, Vec::new(), None, true)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&self, value: Tensor) -> Var<'_> {
        self.push(value, Vec::new(), None, false)
    }

    /// Registers a fused operation. `backward` maps the output gradient to
    /// one gradient per parent, in order and with matching shapes.
    pub fn custom<'t, F>(&'t self, value: Tensor, parents: &[Var<'t>], backward: F) -> Var<'t>
    where
        F: Fn(&Tensor) -> Vec<Tensor> + 'static,
    {
        let requires_grad = parents.iter().any(|p| p.requires_grad());
        let backward: Option<BackwardFn> = requires_grad.then(|| Box::new(backward) as BackwardFn);
        self.push(
            value,
            parents.iter().map(|p| p.id).collect(),
            backward,
            requires_grad,
        )
    }

    fn push(
        &self,
        value: Tensor,
        parents: Vec<usize>,
        backward: Option<BackwardFn>,
        requires_grad: bool,
    ) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        let id = nodes.len();
        nodes.push(Node {
            value: Rc::new(value),
            parents,
            backward,
            requires_grad,
        });
        Var { tape: self, id }
    }

    pub fn count_macs(&self, kind: MacKind, n: u64) {
        let mut m = self.macs.get();
        m[kind.slot()] += n;
        self.macs.set(m);
    }

    pub fn macs(&self) -> MacCounts {
        let m = self.macs.get();
        let mut out = MacCounts::default();
        for kind in MacKind::ALL {
            let v = m[kind.slot()];
            match kind {
                MacKind::AttnScore => out.attn_score = v,
                MacKind::AttnValue => out.attn_value = v,
                MacKind::Linear => out.linear = v,
                MacKind::Conv => out.conv = v,
            }
        }
        out
    }

    /// Reverse sweep from a scalar output.
    pub fn backward(&self, output: Var<'_>) -> Result<Grads> {
        let nodes = self.nodes.borrow();
        if nodes[output.id].value.numel() != 1 {
            return Err(Error::Dimension {
                op: "backward",
                lhs: nodes[output.id].value.shape().to_vec(),
                rhs: vec![1],
            });
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; output.id + 1];
        grads[output.id] = Some(Tensor::full(nodes[output.id].value.shape(), 1.0));
        for id in (0..=output.id).rev() {
            let node = &nodes[id];
            let Some(backward) = node.backward.as_ref() else {
                continue;
            };
            let Some(g) = grads[id].take() else {
                continue;
            };
            let parent_grads = backward(&g);
            debug_assert_eq!(parent_grads.len(), node.parents.len());
            for (&pid, pg) in node.parents.iter().zip(parent_grads) {
                if !nodes[pid].requires_grad {
                    continue;
                }
                debug_assert_eq!(pg.shape(), nodes[pid].value.shape());
                match &mut grads[pid] {
                    Some(acc) => acc
                        .data_mut()
                        .iter_mut()
                        .zip(pg.data())
                        .for_each(|(a, b)| *a += b),
                    slot @ None => *slot = Some(pg),
                }
            }
            // keep leaf gradients, drop interior ones
            if node.parents.is_empty() {
                grads[id] = Some(g);
            }
        }
        // leaves without backward functions keep their accumulated gradient
        Ok(Grads { grads })
    }
}

/// Gradients from one reverse sweep, indexed by node.
#[derive(Debug)]
pub struct Grads {
    grads: Vec<Option<Tensor>>,
}

impl Grads {
    pub fn get(&self, var: Var<'_>) -> Option<&Tensor> {
        self.grads.get(var.id).and_then(Option::as_ref)
    }

    /// Gradient of `var`, zero-filled when nothing flowed into it.
    pub fn wrt(&self, var: Var<'_>) -> Tensor {
        self.get(var)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(var.value().shape()))
    }
}

/// Handle to a tensor recorded on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    id: usize,
}

impl fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Var")
            .field("id", &self.id)
            .field("shape", &self.shape())
            .finish()
    }
}

fn dims_err(op: &'static str, a: &Tensor, b: &Tensor) -> Error {
    Error::Dimension {
        op,
        lhs: a.shape().to_vec(),
        rhs: b.shape().to_vec(),
    }
}

impl<'t> Var<'t> {
    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn id(&self) -> usize {
        self.id
    }

    pub fn value(&self) -> Rc<Tensor> {
        Rc::clone(&self.node().value)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.node().value.shape().to_vec()
    }

    pub fn requires_grad(&self) -> bool {
        self.node().requires_grad
    }

    fn node(&self) -> Ref<'t, Node> {
        Ref::map(self.tape.nodes.borrow(), |n| &n[self.id])
    }

    fn matrix(&self, op: &'static str) -> Result<(Rc<Tensor>, usize, usize)> {
        let v = self.value();
        if v.ndim() != 2 {
            return Err(Error::Dimension {
                op,
                lhs: v.shape().to_vec(),
                rhs: vec![],
            });
        }
        let (m, n) = (v.shape()[0], v.shape()[1]);
        Ok((v, m, n))
    }

    pub fn matmul(self, rhs: Var<'t>) -> Result<Var<'t>> {
        self.matmul_as(rhs, MacKind::Linear)
    }

    /// `self · rhs`, booking `m·p·n` MACs under `kind`.
    pub fn matmul_as(self, rhs: Var<'t>, kind: MacKind) -> Result<Var<'t>> {
        let (a, m, p) = self.matrix("matmul")?;
        let (b, p2, n) = rhs.matrix("matmul")?;
        if p != p2 {
            return Err(dims_err("matmul", &a, &b));
        }
        let mut out = vec![0.0; m * n];
        matmul_into(a.data(), b.data(), &mut out, m, p, n);
        self.tape.count_macs(kind, (m * p * n) as u64);
        let value = Tensor::new([m, n], out)?;
        Ok(self.tape.custom(value, &[self, rhs], move |g| {
            // dA = G Bᵀ, dB = Aᵀ G
            let da = g.matmul(&b.transpose()).expect("matmul backward");
            let db = a.transpose().matmul(g).expect("matmul backward");
            vec![da, db]
        }))
    }

    /// `self · rhsᵀ` for `self: m×p`, `rhs: n×p`.
    pub fn matmul_t(self, rhs: Var<'t>, kind: MacKind) -> Result<Var<'t>> {
        let (a, m, p) = self.matrix("matmul_t")?;
        let (b, n, p2) = rhs.matrix("matmul_t")?;
        if p != p2 {
            return Err(dims_err("matmul_t", &a, &b));
        }
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let ar = a.row(i);
            for j in 0..n {
                out[i * n + j] = dot(ar, b.row(j));
            }
        }
        self.tape.count_macs(kind, (m * p * n) as u64);
        let value = Tensor::new([m, n], out)?;
        Ok(self.tape.custom(value, &[self, rhs], move |g| {
            // C = A Bᵀ: dA = G B, dB = Gᵀ A
            let da = g.matmul(&b).expect("matmul_t backward");
            let db = g.transpose().matmul(&a).expect("matmul_t backward");
            vec![da, db]
        }))
    }

    fn same_shape(self, rhs: Var<'t>, op: &'static str) -> Result<(Rc<Tensor>, Rc<Tensor>)> {
        let (a, b) = (self.value(), rhs.value());
        if a.shape() != b.shape() {
            return Err(dims_err(op, &a, &b));
        }
        Ok((a, b))
    }

    pub fn add(self, rhs: Var<'t>) -> Result<Var<'t>> {
        let (a, b) = self.same_shape(rhs, "add")?;
        let value = a.zip_map(&b, |x, y| x + y);
        Ok(self
            .tape
            .custom(value, &[self, rhs], |g| vec![g.clone(), g.clone()]))
    }

    pub fn sub(self, rhs: Var<'t>) -> Result<Var<'t>> {
        let (a, b) = self.same_shape(rhs, "sub")?;
        let value = a.zip_map(&b, |x, y| x - y);
        Ok(self
            .tape
            .custom(value, &[self, rhs], |g| vec![g.clone(), g.map(|x| -x)]))
    }

    /// Elementwise product.
    pub fn mul(self, rhs: Var<'t>) -> Result<Var<'t>> {
        let (a, b) = self.same_shape(rhs, "mul")?;
        let value = a.zip_map(&b, |x, y| x * y);
        Ok(self.tape.custom(value, &[self, rhs], move |g| {
            vec![g.zip_map(&b, |x, y| x * y), g.zip_map(&a, |x, y| x * y)]
        }))
    }

    pub fn scale(self, c: f64) -> Var<'t> {
        let value = self.value().map(|x| x * c);
        self.tape
            .custom(value, &[self], move |g| vec![g.map(|x| x * c)])
    }

    /// Adds a constant tensor that never receives a gradient (masks, offsets).
    pub fn add_const(self, c: &Tensor) -> Result<Var<'t>> {
        let a = self.value();
        if a.shape() != c.shape() {
            return Err(dims_err("add_const", &a, c));
        }
        let value = a.zip_map(c, |x, y| x + y);
        Ok(self.tape.custom(value, &[self], |g| vec![g.clone()]))
    }

    /// Broadcast-adds a length-`n` vector to every row of an `m×n` matrix.
    pub fn add_row(self, bias: Var<'t>) -> Result<Var<'t>> {
        let (a, m, n) = self.matrix("add_row")?;
        let b = bias.value();
        if b.numel() != n {
            return Err(dims_err("add_row", &a, &b));
        }
        let mut out = a.as_ref().clone();
        for i in 0..m {
            out.row_mut(i)
                .iter_mut()
                .zip(b.data())
                .for_each(|(o, &x)| *o += x);
        }
        let bshape = b.shape().to_vec();
        Ok(self.tape.custom(out, &[self, bias], move |g| {
            let mut gb = vec![0.0; n];
            for i in 0..m {
                gb.iter_mut().zip(g.row(i)).for_each(|(s, &x)| *s += x);
            }
            vec![g.clone(), Tensor::new(bshape.clone(), gb).expect("bias grad")]
        }))
    }

    pub fn relu(self) -> Var<'t> {
        let a = self.value();
        let value = a.map(|x| x.max(0.0));
        self.tape.custom(value, &[self], move |g| {
            vec![g.zip_map(&a, |gx, x| if x > 0.0 { gx } else { 0.0 })]
        })
    }

    pub fn sigmoid(self) -> Var<'t> {
        let value = self.value().map(|x| 1.0 / (1.0 + (-x).exp()));
        let s = value.clone();
        self.tape.custom(value, &[self], move |g| {
            vec![g.zip_map(&s, |gx, y| gx * y * (1.0 - y))]
        })
    }

    /// Sum of all entries, as a one-element tensor.
    pub fn sum(self) -> Var<'t> {
        let a = self.value();
        let shape = a.shape().to_vec();
        self.tape.custom(Tensor::scalar(a.sum()), &[self], move |g| {
            vec![Tensor::full(shape.clone(), g.data()[0])]
        })
    }

    /// `Σ self ⊙ weights` with constant weights.
    pub fn weighted_sum(self, weights: &Tensor) -> Result<Var<'t>> {
        let a = self.value();
        if a.shape() != weights.shape() {
            return Err(dims_err("weighted_sum", &a, weights));
        }
        let w = weights.clone();
        let value = Tensor::scalar(dot(a.data(), w.data()));
        Ok(self
            .tape
            .custom(value, &[self], move |g| vec![w.map(|x| x * g.data()[0])]))
    }

    /// Row-wise softmax with an optional validity mask (`true` = attend).
    ///
    /// Masked entries get weight exactly zero. A row with no valid entry
    /// comes back all-zero and is flagged in the returned vector.
    pub fn softmax_rows(self, mask: Option<&[bool]>) -> Result<(Var<'t>, Vec<bool>)> {
        let (a, m, n) = self.matrix("softmax_rows")?;
        if let Some(mask) = mask {
            if mask.len() != m * n {
                return Err(Error::Dimension {
                    op: "softmax_rows",
                    lhs: a.shape().to_vec(),
                    rhs: vec![mask.len()],
                });
            }
        }
        let valid = |i: usize, j: usize| mask.is_none_or(|mk| mk[i * n + j]);
        let mut out = Tensor::zeros([m, n]);
        let mut all_masked = vec![false; m];
        for i in 0..m {
            let row = a.row(i);
            let max = (0..n)
                .filter(|&j| valid(i, j))
                .map(|j| row[j])
                .fold(f64::NEG_INFINITY, f64::max);
            if max == f64::NEG_INFINITY {
                all_masked[i] = true;
                continue;
            }
            let orow = out.row_mut(i);
            let mut total = 0.0;
            for j in 0..n {
                if valid(i, j) {
                    let e = (row[j] - max).exp();
                    orow[j] = e;
                    total += e;
                }
            }
            orow.iter_mut().for_each(|x| *x /= total);
        }
        let p = out.clone();
        let var = self.tape.custom(out, &[self], move |g| {
            let mut dx = Tensor::zeros([m, n]);
            for i in 0..m {
                let (pr, gr) = (p.row(i), g.row(i));
                let inner = dot(pr, gr);
                dx.row_mut(i)
                    .iter_mut()
                    .zip(pr.iter().zip(gr))
                    .for_each(|(d, (&pv, &gv))| *d = pv * (gv - inner));
            }
            vec![dx]
        });
        Ok((var, all_masked))
    }

    /// Column-wise concatenation of matrices with equal row counts.
    pub fn concat_cols(parts: &[Var<'t>]) -> Result<Var<'t>> {
        let first = parts
            .first()
            .ok_or_else(|| Error::Param("concat_cols of nothing".into()))?;
        let tape = first.tape;
        let values: Vec<Rc<Tensor>> = parts.iter().map(Var::value).collect();
        let m = values[0].rows();
        let widths: Vec<usize> = values.iter().map(|v| v.cols()).collect();
        for v in &values {
            if v.ndim() != 2 || v.rows() != m {
                return Err(dims_err("concat_cols", &values[0], v));
            }
        }
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(m * total);
        for i in 0..m {
            for v in &values {
                out.extend_from_slice(v.row(i));
            }
        }
        let value = Tensor::new([m, total], out)?;
        Ok(tape.custom(value, parts, move |g| {
            let mut offset = 0;
            widths
                .iter()
                .map(|&w| {
                    let mut part = Vec::with_capacity(m * w);
                    for i in 0..m {
                        part.extend_from_slice(&g.row(i)[offset..offset + w]);
                    }
                    offset += w;
                    Tensor::new([m, w], part).expect("concat grad")
                })
                .collect()
        }))
    }

    /// Row-wise concatenation of matrices with equal column counts.
    pub fn concat_rows(parts: &[Var<'t>]) -> Result<Var<'t>> {
        let first = parts
            .first()
            .ok_or_else(|| Error::Param("concat_rows of nothing".into()))?;
        let tape = first.tape;
        let values: Vec<Rc<Tensor>> = parts.iter().map(Var::value).collect();
        let n = values[0].cols();
        for v in &values {
            if v.ndim() != 2 || v.cols() != n {
                return Err(dims_err("concat_rows", &values[0], v));
            }
        }
        let heights: Vec<usize> = values.iter().map(|v| v.rows()).collect();
        let mut out = Vec::with_capacity(heights.iter().sum::<usize>() * n);
        for v in &values {
            out.extend_from_slice(v.data());
        }
        let value = Tensor::new([heights.iter().sum(), n], out)?;
        Ok(tape.custom(value, parts, move |g| {
            let mut offset = 0;
            heights
                .iter()
                .map(|&h| {
                    let part = g.data()[offset * n..(offset + h) * n].to_vec();
                    offset += h;
                    Tensor::new([h, n], part).expect("concat grad")
                })
                .collect()
        }))
    }

    /// Rows `start..end` of a matrix.
    pub fn slice_rows(self, start: usize, end: usize) -> Result<Var<'t>> {
        let (a, m, n) = self.matrix("slice_rows")?;
        if start > end || end > m {
            return Err(Error::Param(format!(
                "slice_rows {start}..{end} out of range for {m} rows"
            )));
        }
        let value = Tensor::new([end - start, n], a.data()[start * n..end * n].to_vec())?;
        Ok(self.tape.custom(value, &[self], move |g| {
            let mut d = Tensor::zeros([m, n]);
            d.data_mut()[start * n..end * n].copy_from_slice(g.data());
            vec![d]
        }))
    }

    /// Output row `i` is input row `index[i]`, or zeros for `None`.
    /// The backward pass scatter-adds.
    pub fn gather_rows(self, index: &[Option<usize>]) -> Result<Var<'t>> {
        let (a, m, n) = self.matrix("gather_rows")?;
        if let Some(bad) = index.iter().flatten().find(|&&r| r >= m) {
            return Err(Error::Param(format!(
                "gather_rows index {bad} out of range for {m} rows"
            )));
        }
        let mut out = Tensor::zeros([index.len(), n]);
        for (i, r) in index.iter().enumerate() {
            if let Some(r) = *r {
                out.row_mut(i).copy_from_slice(a.row(r));
            }
        }
        let index = index.to_vec();
        Ok(self.tape.custom(out, &[self], move |g| {
            let mut d = Tensor::zeros([m, n]);
            for (i, r) in index.iter().enumerate() {
                if let Some(r) = *r {
                    d.row_mut(r)
                        .iter_mut()
                        .zip(g.row(i))
                        .for_each(|(x, &y)| *x += y);
                }
            }
            vec![d]
        }))
    }

    /// Channelwise max over rows sharing a segment id.
    ///
    /// Ties go to the lowest input row; the winning rows are recorded and
    /// the backward pass routes gradient only to them. Empty segments
    /// produce zeros.
    pub fn segment_max(self, segment: &[usize], num_segments: usize) -> Result<Var<'t>> {
        let (a, m, n) = self.matrix("segment_max")?;
        check_segments("segment_max", segment, m, num_segments)?;
        let mut out = Tensor::full([num_segments, n], f64::NEG_INFINITY);
        let mut argmax: Vec<Option<usize>> = vec![None; num_segments * n];
        for (r, &s) in segment.iter().enumerate() {
            let row = a.row(r);
            let orow = out.row_mut(s);
            for c in 0..n {
                // strict comparison keeps the lowest row on ties
                if row[c] > orow[c] || argmax[s * n + c].is_none() {
                    orow[c] = row[c];
                    argmax[s * n + c] = Some(r);
                }
            }
        }
        for (v, am) in out.data_mut().iter_mut().zip(&argmax) {
            if am.is_none() {
                *v = 0.0;
            }
        }
        Ok(self.tape.custom(out, &[self], move |g| {
            let mut d = Tensor::zeros([m, n]);
            for (slot, am) in argmax.iter().enumerate() {
                if let Some(r) = *am {
                    d.data_mut()[r * n + slot % n] += g.data()[slot];
                }
            }
            vec![d]
        }))
    }

    /// Mean over rows sharing a segment id; empty segments produce zeros.
    pub fn segment_mean(self, segment: &[usize], num_segments: usize) -> Result<Var<'t>> {
        let (a, m, n) = self.matrix("segment_mean")?;
        check_segments("segment_mean", segment, m, num_segments)?;
        let mut counts = vec![0usize; num_segments];
        let mut out = Tensor::zeros([num_segments, n]);
        for (r, &s) in segment.iter().enumerate() {
            counts[s] += 1;
            out.row_mut(s)
                .iter_mut()
                .zip(a.row(r))
                .for_each(|(o, &x)| *o += x);
        }
        for (s, &c) in counts.iter().enumerate() {
            if c > 0 {
                out.row_mut(s).iter_mut().for_each(|x| *x /= c as f64);
            }
        }
        let segment = segment.to_vec();
        Ok(self.tape.custom(out, &[self], move |g| {
            let mut d = Tensor::zeros([m, n]);
            for (r, &s) in segment.iter().enumerate() {
                let inv = 1.0 / counts[s] as f64;
                d.row_mut(r)
                    .iter_mut()
                    .zip(g.row(s))
                    .for_each(|(x, &y)| *x = y * inv);
            }
            vec![d]
        }))
    }

    /// Batch normalization over the row axis with current-batch statistics
    /// (biased variance), followed by the per-channel affine transform.
    pub fn batch_norm(self, gamma: Var<'t>, beta: Var<'t>, eps: f64) -> Result<Var<'t>> {
        let (x, m, d) = self.matrix("batch_norm")?;
        let (g, b) = (gamma.value(), beta.value());
        if g.numel() != d || b.numel() != d {
            return Err(dims_err("batch_norm", &x, &g));
        }
        if m == 0 {
            let gshape = g.shape().to_vec();
            let bshape = b.shape().to_vec();
            return Ok(self.tape.custom(
                Tensor::zeros([0, d]),
                &[self, gamma, beta],
                move |_| {
                    vec![
                        Tensor::zeros([0, d]),
                        Tensor::zeros(gshape.clone()),
                        Tensor::zeros(bshape.clone()),
                    ]
                },
            ));
        }
        let mf = m as f64;
        let mut mean = vec![0.0; d];
        for i in 0..m {
            mean.iter_mut().zip(x.row(i)).for_each(|(s, &v)| *s += v);
        }
        mean.iter_mut().for_each(|s| *s /= mf);
        let mut var = vec![0.0; d];
        for i in 0..m {
            for (c, &v) in x.row(i).iter().enumerate() {
                var[c] += (v - mean[c]) * (v - mean[c]);
            }
        }
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v / mf + eps).sqrt()).collect();
        let mut xhat = Tensor::zeros([m, d]);
        let mut out = Tensor::zeros([m, d]);
        for i in 0..m {
            for c in 0..d {
                let h = (x.row(i)[c] - mean[c]) * inv_std[c];
                xhat.row_mut(i)[c] = h;
                out.row_mut(i)[c] = g.data()[c] * h + b.data()[c];
            }
        }
        let (gshape, bshape) = (g.shape().to_vec(), b.shape().to_vec());
        Ok(self.tape.custom(out, &[self, gamma, beta], move |dy| {
            let mut sum_dy = vec![0.0; d];
            let mut sum_dy_xhat = vec![0.0; d];
            for i in 0..m {
                for c in 0..d {
                    sum_dy[c] += dy.row(i)[c];
                    sum_dy_xhat[c] += dy.row(i)[c] * xhat.row(i)[c];
                }
            }
            let mut dx = Tensor::zeros([m, d]);
            for i in 0..m {
                for c in 0..d {
                    dx.row_mut(i)[c] = g.data()[c] * inv_std[c] / mf
                        * (mf * dy.row(i)[c] - sum_dy[c] - xhat.row(i)[c] * sum_dy_xhat[c]);
                }
            }
            vec![
                dx,
                Tensor::new(gshape.clone(), sum_dy_xhat).expect("gamma grad"),
                Tensor::new(bshape.clone(), sum_dy).expect("beta grad"),
            ]
        }))
    }
}

fn check_segments(op: &'static str, segment: &[usize], m: usize, num: usize) -> Result<()> {
    if segment.len() != m {
        return Err(Error::Dimension {
            op,
            lhs: vec![m],
            rhs: vec![segment.len()],
        });
    }
    if let Some(bad) = segment.iter().find(|&&s| s >= num) {
        return Err(Error::Param(format!(
            "{op}: segment id {bad} out of range for {num} segments"
        )));
    }
    Ok(())
}
