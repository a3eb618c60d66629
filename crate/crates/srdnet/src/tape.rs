//! Reverse-mode autodiff tape, rebuilt per forward pass (define-by-run).
//!
//! Every operation pushes a node holding its output values, parent indices,
//! and whatever the backward rule needs. `backward` replays the node list in
//! reverse and returns gradients for every `requires_grad` leaf. The tape is
//! read-only after the forward pass, so `backward` may be called repeatedly.
//!
//! Tensors from another tape (or from no tape) enter as constant leaves;
//! gradient only flows to leaves marked `requires_grad`.

use std::collections::HashMap;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use crate::error::{Result, SrdError};
use crate::ops::conv;
use crate::ops::pool;
use crate::ops::resample::Taps;
use crate::tensor::{TapeRef, Tensor};

static NEXT_EPOCH: AtomicU64 = AtomicU64::new(1);

pub struct Tape {
    epoch: u64,
    nodes: Vec<Node>,
    interned: HashMap<u64, usize>,
}

pub(crate) struct Node {
    pub op: Op,
    pub parents: Vec<usize>,
    pub value: Arc<Vec<f64>>,
    pub shape: Vec<usize>,
    pub needs_grad: bool,
}

pub(crate) enum Op {
    Leaf { tensor_id: u64, requires_grad: bool },
    Add,
    Sub,
    Mul,
    ScalarMul(f64),
    Matmul,
    Reshape,
    Concat { axis: usize },
    Slice { axis: usize, start: usize },
    Relu,
    Sigmoid,
    Softmax { axis: usize },
    SumAll,
    L1Loss { target: Arc<Vec<f64>> },
    Conv2d,
    Conv3d,
    ConvTranspose2d { stride: usize, pad: usize },
    MaxPool2 { argmax: Arc<Vec<usize>> },
    AvgPool2,
    Resample { ytaps: Arc<Taps>, xtaps: Arc<Taps> },
    // Per-voxel gradient is fixed at forward time (the spectral weights are
    // treated as constants), so the node just stores it.
    FreqLoss { grad: Arc<Vec<f64>> },
}

fn op_name(op: &Op) -> &'static str {
    match op {
        Op::Leaf { .. } => "leaf",
        Op::Add => "add",
        Op::Sub => "sub",
        Op::Mul => "mul",
        Op::ScalarMul(_) => "scalar_mul",
        Op::Matmul => "matmul",
        Op::Reshape => "reshape",
        Op::Concat { .. } => "concat",
        Op::Slice { .. } => "slice",
        Op::Relu => "relu",
        Op::Sigmoid => "sigmoid",
        Op::Softmax { .. } => "softmax",
        Op::SumAll => "sum",
        Op::L1Loss { .. } => "l1_loss",
        Op::Conv2d => "conv2d",
        Op::Conv3d => "conv3d",
        Op::ConvTranspose2d { .. } => "conv_transpose2d",
        Op::MaxPool2 { .. } => "max_pool2",
        Op::AvgPool2 => "avg_pool2",
        Op::Resample { .. } => "resample",
        Op::FreqLoss { .. } => "freq_loss",
    }
}

/// Gradients keyed by leaf tensor identity.
pub struct Gradients {
    map: HashMap<u64, Tensor>,
}

impl Gradients {
    pub fn get(&self, t: &Tensor) -> Option<&Tensor> {
        self.map.get(&t.id())
    }

    pub fn by_id(&self, id: u64) -> Option<&Tensor> {
        self.map.get(&id)
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }
}

/// True when `b` can broadcast into `a`: equal rank, each dim equal or 1 on
/// the `b` side.
pub(crate) fn broadcastable(a: &[usize], b: &[usize]) -> bool {
    a.len() == b.len() && a.iter().zip(b).all(|(&da, &db)| db == da || db == 1)
}

/// Visit every flat index of `a` together with the flat index of the
/// broadcast `b` element it pairs with.
pub(crate) fn for_each_bcast(a_shape: &[usize], b_shape: &[usize], mut f: impl FnMut(usize, usize)) {
    let rank = a_shape.len();
    let mut b_strides = vec![0usize; rank];
    let mut s = 1usize;
    for i in (0..rank).rev() {
        b_strides[i] = if b_shape[i] == 1 { 0 } else { s };
        s *= b_shape[i];
    }
    let n: usize = a_shape.iter().product();
    let mut idx = vec![0usize; rank];
    let mut bi = 0usize;
    for ai in 0..n {
        f(ai, bi);
        for d in (0..rank).rev() {
            idx[d] += 1;
            bi += b_strides[d];
            if idx[d] < a_shape[d] {
                break;
            }
            idx[d] = 0;
            bi -= b_strides[d] * a_shape[d];
        }
    }
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Tape {
        Tape {
            epoch: NEXT_EPOCH.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::new(),
            interned: HashMap::new(),
        }
    }

    pub fn num_nodes(&self) -> usize {
        self.nodes.len()
    }

    /// Node index for a tensor, interning it as a leaf if it is not an
    /// output of this tape.
    pub(crate) fn node_of(&mut self, t: &Tensor) -> usize {
        if let Some(r) = t.node {
            if r.epoch == self.epoch {
                return r.index;
            }
        }
        if let Some(&i) = self.interned.get(&t.id()) {
            return i;
        }
        let index = self.nodes.len();
        self.nodes.push(Node {
            op: Op::Leaf {
                tensor_id: t.id(),
                requires_grad: t.requires_grad(),
            },
            parents: Vec::new(),
            value: t.data_arc(),
            shape: t.shape().to_vec(),
            needs_grad: t.requires_grad(),
        });
        self.interned.insert(t.id(), index);
        index
    }

    pub(crate) fn push(
        &mut self,
        op: Op,
        parents: Vec<usize>,
        value: Vec<f64>,
        shape: Vec<usize>,
    ) -> Tensor {
        let needs_grad = parents.iter().any(|&p| self.nodes[p].needs_grad);
        debug_assert!(
            value.iter().all(|v| v.is_finite()),
            "non-finite forward value in {}",
            op_name(&op)
        );
        let index = self.nodes.len();
        let out = Tensor::from_op(
            value,
            shape.clone(),
            TapeRef {
                epoch: self.epoch,
                index,
            },
        );
        self.nodes.push(Node {
            op,
            parents,
            value: out.data_arc(),
            shape,
            needs_grad,
        });
        out
    }

    // ── elementwise ──────────────────────────────────────────────

    fn binary(
        &mut self,
        a: &Tensor,
        b: &Tensor,
        op: Op,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Tensor> {
        if !broadcastable(a.shape(), b.shape()) {
            return Err(SrdError::shape(format!(
                "{} on {:?} vs {:?}",
                op_name(&op),
                a.shape(),
                b.shape()
            )));
        }
        let pa = self.node_of(a);
        let pb = self.node_of(b);
        let ad = a.data();
        let bd = b.data();
        let mut out = vec![0.0; ad.len()];
        if a.shape() == b.shape() {
            for ((o, &x), &y) in out.iter_mut().zip(ad).zip(bd) {
                *o = f(x, y);
            }
        } else {
            for_each_bcast(a.shape(), b.shape(), |ai, bi| out[ai] = f(ad[ai], bd[bi]));
        }
        Ok(self.push(op, vec![pa, pb], out, a.shape().to_vec()))
    }

    pub fn add(&mut self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        self.binary(a, b, Op::Add, |x, y| x + y)
    }

    pub fn sub(&mut self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        self.binary(a, b, Op::Sub, |x, y| x - y)
    }

    pub fn mul(&mut self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        self.binary(a, b, Op::Mul, |x, y| x * y)
    }

    pub fn scalar_mul(&mut self, a: &Tensor, s: f64) -> Tensor {
        let pa = self.node_of(a);
        let out = a.data().iter().map(|&x| s * x).collect();
        self.push(Op::ScalarMul(s), vec![pa], out, a.shape().to_vec())
    }

    // ── linear algebra ───────────────────────────────────────────

    pub fn matmul(&mut self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        let (m, k) = match a.shape() {
            [m, k] => (*m, *k),
            s => return Err(SrdError::shape(format!("matmul lhs must be 2-d, got {s:?}"))),
        };
        let (k2, n) = match b.shape() {
            [k2, n] => (*k2, *n),
            s => return Err(SrdError::shape(format!("matmul rhs must be 2-d, got {s:?}"))),
        };
        if k != k2 {
            return Err(SrdError::shape(format!("matmul inner dims {k} vs {k2}")));
        }
        let pa = self.node_of(a);
        let pb = self.node_of(b);
        let ad = a.data();
        let bd = b.data();
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for l in 0..k {
                let av = ad[i * k + l];
                if av == 0.0 {
                    continue;
                }
                let brow = &bd[l * n..(l + 1) * n];
                let orow = &mut out[i * n..(i + 1) * n];
                for (o, &bv) in orow.iter_mut().zip(brow) {
                    *o += av * bv;
                }
            }
        }
        Ok(self.push(Op::Matmul, vec![pa, pb], out, vec![m, n]))
    }

    // ── data movement ────────────────────────────────────────────

    pub fn reshape(&mut self, t: &Tensor, shape: &[usize]) -> Result<Tensor> {
        let n: usize = shape.iter().product();
        if shape.iter().any(|&d| d == 0) || n != t.len() {
            return Err(SrdError::shape(format!(
                "reshape {:?} -> {:?}",
                t.shape(),
                shape
            )));
        }
        let p = self.node_of(t);
        Ok(self.push(Op::Reshape, vec![p], t.data().to_vec(), shape.to_vec()))
    }

    pub fn concat(&mut self, parts: &[&Tensor], axis: usize) -> Result<Tensor> {
        if parts.is_empty() {
            return Err(SrdError::shape("concat of zero tensors"));
        }
        let rank = parts[0].shape().len();
        if axis >= rank {
            return Err(SrdError::shape(format!("concat axis {axis} out of range")));
        }
        let mut out_shape = parts[0].shape().to_vec();
        let mut axis_total = 0usize;
        for p in parts {
            if p.shape().len() != rank {
                return Err(SrdError::shape("concat rank mismatch"));
            }
            for (d, (&a, &b)) in out_shape.iter().zip(p.shape()).enumerate() {
                if d != axis && a != b {
                    return Err(SrdError::shape(format!(
                        "concat dim {d}: {:?} vs {:?}",
                        out_shape,
                        p.shape()
                    )));
                }
            }
            axis_total += p.shape()[axis];
        }
        out_shape[axis] = axis_total;

        let outer: usize = out_shape[..axis].iter().product();
        let inner: usize = out_shape[axis + 1..].iter().product();
        let mut out = vec![0.0; outer * axis_total * inner];
        let mut parents = Vec::with_capacity(parts.len());
        let mut offset = 0usize;
        for p in parts {
            parents.push(self.node_of(p));
            let la = p.shape()[axis];
            let src = p.data();
            for o in 0..outer {
                let dst_base = (o * axis_total + offset) * inner;
                let src_base = o * la * inner;
                out[dst_base..dst_base + la * inner]
                    .copy_from_slice(&src[src_base..src_base + la * inner]);
            }
            offset += la;
        }
        Ok(self.push(Op::Concat { axis }, parents, out, out_shape))
    }

    pub fn slice(&mut self, t: &Tensor, axis: usize, start: usize, end: usize) -> Result<Tensor> {
        let rank = t.shape().len();
        if axis >= rank {
            return Err(SrdError::shape(format!("slice axis {axis} out of range")));
        }
        let la = t.shape()[axis];
        if start >= end || end > la {
            return Err(SrdError::shape(format!(
                "slice [{start}, {end}) of axis length {la}"
            )));
        }
        let mut out_shape = t.shape().to_vec();
        out_shape[axis] = end - start;
        let outer: usize = t.shape()[..axis].iter().product();
        let inner: usize = t.shape()[axis + 1..].iter().product();
        let src = t.data();
        let mut out = vec![0.0; outer * (end - start) * inner];
        for o in 0..outer {
            let src_base = (o * la + start) * inner;
            let dst_base = o * (end - start) * inner;
            out[dst_base..dst_base + (end - start) * inner]
                .copy_from_slice(&src[src_base..src_base + (end - start) * inner]);
        }
        let p = self.node_of(t);
        Ok(self.push(Op::Slice { axis, start }, vec![p], out, out_shape))
    }

    // ── activations ──────────────────────────────────────────────

    pub fn relu(&mut self, t: &Tensor) -> Tensor {
        let p = self.node_of(t);
        let out = t.data().iter().map(|&x| x.max(0.0)).collect();
        self.push(Op::Relu, vec![p], out, t.shape().to_vec())
    }

    pub fn sigmoid(&mut self, t: &Tensor) -> Tensor {
        let p = self.node_of(t);
        let out = t.data().iter().map(|&x| 1.0 / (1.0 + (-x).exp())).collect();
        self.push(Op::Sigmoid, vec![p], out, t.shape().to_vec())
    }

    pub fn softmax(&mut self, t: &Tensor, axis: usize) -> Result<Tensor> {
        if axis >= t.shape().len() {
            return Err(SrdError::shape(format!("softmax axis {axis} out of range")));
        }
        let (outer, l, inner) = lane_dims(t.shape(), axis);
        let x = t.data();
        let mut out = vec![0.0; x.len()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |j: usize| (o * l + j) * inner + i;
                let mut mx = f64::NEG_INFINITY;
                for j in 0..l {
                    mx = mx.max(x[at(j)]);
                }
                let mut denom = 0.0;
                for j in 0..l {
                    let e = (x[at(j)] - mx).exp();
                    out[at(j)] = e;
                    denom += e;
                }
                for j in 0..l {
                    out[at(j)] /= denom;
                }
            }
        }
        let p = self.node_of(t);
        Ok(self.push(Op::Softmax { axis }, vec![p], out, t.shape().to_vec()))
    }

    // ── reductions / losses ──────────────────────────────────────

    pub fn sum(&mut self, t: &Tensor) -> Tensor {
        let p = self.node_of(t);
        let s: f64 = t.data().iter().sum();
        self.push(Op::SumAll, vec![p], vec![s], vec![1])
    }

    /// Mean absolute error against a constant target.
    pub fn l1_loss(&mut self, pred: &Tensor, target: &Tensor) -> Result<Tensor> {
        if pred.shape() != target.shape() {
            return Err(SrdError::shape(format!(
                "l1_loss on {:?} vs {:?}",
                pred.shape(),
                target.shape()
            )));
        }
        let p = self.node_of(pred);
        let n = pred.len() as f64;
        let v = pred
            .data()
            .iter()
            .zip(target.data())
            .map(|(a, b)| (a - b).abs())
            .sum::<f64>()
            / n;
        Ok(self.push(
            Op::L1Loss {
                target: target.data_arc(),
            },
            vec![p],
            vec![v],
            vec![1],
        ))
    }

    // ── backward ─────────────────────────────────────────────────

    /// Reverse sweep from a scalar loss on this tape. Returns gradients for
    /// every `requires_grad` leaf that the loss depends on.
    pub fn backward(&self, loss: &Tensor) -> Result<Gradients> {
        let start = match loss.node {
            Some(r) if r.epoch == self.epoch => r.index,
            _ => {
                return Err(SrdError::Usage(
                    "backward target is not an output of this tape".into(),
                ))
            }
        };
        if !loss.is_scalar() {
            return Err(SrdError::Usage(format!(
                "backward needs a scalar loss, got shape {:?}",
                loss.shape()
            )));
        }

        let mut grads: Vec<Option<Vec<f64>>> = vec![None; start + 1];
        grads[start] = Some(vec![1.0]);

        for idx in (0..=start).rev() {
            let g = match grads[idx].take() {
                Some(g) => g,
                None => continue,
            };
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            if let Op::Leaf { .. } = node.op {
                grads[idx] = Some(g); // keep for collection below
                continue;
            }
            self.backward_node(idx, &g, &mut grads);
        }

        let mut map = HashMap::new();
        for (idx, node) in self.nodes.iter().enumerate().take(start + 1) {
            if let Op::Leaf {
                tensor_id,
                requires_grad: true,
            } = node.op
            {
                if let Some(g) = grads[idx].take() {
                    let t = Tensor::from_vec(g, &node.shape)
                        .expect("gradient buffer matches leaf shape");
                    map.insert(tensor_id, t);
                }
            }
        }
        Ok(Gradients { map })
    }

    fn accum(&self, grads: &mut [Option<Vec<f64>>], parent: usize, f: impl FnOnce(&mut [f64])) {
        if !self.nodes[parent].needs_grad {
            return;
        }
        let buf = grads[parent]
            .get_or_insert_with(|| vec![0.0; self.nodes[parent].value.len()]);
        f(buf);
    }

    fn backward_node(&self, idx: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[idx];
        let ps = &node.parents;
        match &node.op {
            Op::Leaf { .. } => unreachable!("leaves handled in backward()"),

            Op::Add => {
                let a_shape = self.nodes[ps[0]].shape.clone();
                let b_shape = self.nodes[ps[1]].shape.clone();
                self.accum(grads, ps[0], |da| {
                    for (d, &gv) in da.iter_mut().zip(g) {
                        *d += gv;
                    }
                });
                self.accum(grads, ps[1], |db| {
                    if a_shape == b_shape {
                        for (d, &gv) in db.iter_mut().zip(g) {
                            *d += gv;
                        }
                    } else {
                        for_each_bcast(&a_shape, &b_shape, |ai, bi| db[bi] += g[ai]);
                    }
                });
            }

            Op::Sub => {
                let a_shape = self.nodes[ps[0]].shape.clone();
                let b_shape = self.nodes[ps[1]].shape.clone();
                self.accum(grads, ps[0], |da| {
                    for (d, &gv) in da.iter_mut().zip(g) {
                        *d += gv;
                    }
                });
                self.accum(grads, ps[1], |db| {
                    if a_shape == b_shape {
                        for (d, &gv) in db.iter_mut().zip(g) {
                            *d -= gv;
                        }
                    } else {
                        for_each_bcast(&a_shape, &b_shape, |ai, bi| db[bi] -= g[ai]);
                    }
                });
            }

            Op::Mul => {
                let a_shape = self.nodes[ps[0]].shape.clone();
                let b_shape = self.nodes[ps[1]].shape.clone();
                let av = Arc::clone(&self.nodes[ps[0]].value);
                let bv = Arc::clone(&self.nodes[ps[1]].value);
                self.accum(grads, ps[0], |da| {
                    if a_shape == b_shape {
                        for ((d, &gv), &b) in da.iter_mut().zip(g).zip(bv.iter()) {
                            *d += gv * b;
                        }
                    } else {
                        for_each_bcast(&a_shape, &b_shape, |ai, bi| da[ai] += g[ai] * bv[bi]);
                    }
                });
                self.accum(grads, ps[1], |db| {
                    if a_shape == b_shape {
                        for ((d, &gv), &a) in db.iter_mut().zip(g).zip(av.iter()) {
                            *d += gv * a;
                        }
                    } else {
                        for_each_bcast(&a_shape, &b_shape, |ai, bi| db[bi] += g[ai] * av[ai]);
                    }
                });
            }

            Op::ScalarMul(s) => {
                let s = *s;
                self.accum(grads, ps[0], |da| {
                    for (d, &gv) in da.iter_mut().zip(g) {
                        *d += s * gv;
                    }
                });
            }

            Op::Matmul => {
                let m = self.nodes[ps[0]].shape[0];
                let k = self.nodes[ps[0]].shape[1];
                let n = self.nodes[ps[1]].shape[1];
                let av = Arc::clone(&self.nodes[ps[0]].value);
                let bv = Arc::clone(&self.nodes[ps[1]].value);
                // da = g · bᵀ
                self.accum(grads, ps[0], |da| {
                    for i in 0..m {
                        for l in 0..k {
                            let mut acc = 0.0;
                            let grow = &g[i * n..(i + 1) * n];
                            let brow = &bv[l * n..(l + 1) * n];
                            for (&gv, &b) in grow.iter().zip(brow) {
                                acc += gv * b;
                            }
                            da[i * k + l] += acc;
                        }
                    }
                });
                // db = aᵀ · g
                self.accum(grads, ps[1], |db| {
                    for i in 0..m {
                        for l in 0..k {
                            let a = av[i * k + l];
                            if a == 0.0 {
                                continue;
                            }
                            let grow = &g[i * n..(i + 1) * n];
                            let drow = &mut db[l * n..(l + 1) * n];
                            for (d, &gv) in drow.iter_mut().zip(grow) {
                                *d += a * gv;
                            }
                        }
                    }
                });
            }

            Op::Reshape => {
                self.accum(grads, ps[0], |da| {
                    for (d, &gv) in da.iter_mut().zip(g) {
                        *d += gv;
                    }
                });
            }

            Op::Concat { axis } => {
                let axis = *axis;
                let out_shape = &node.shape;
                let outer: usize = out_shape[..axis].iter().product();
                let inner: usize = out_shape[axis + 1..].iter().product();
                let axis_total = out_shape[axis];
                let mut offset = 0usize;
                for &p in ps {
                    let la = self.nodes[p].shape[axis];
                    self.accum(grads, p, |dp| {
                        for o in 0..outer {
                            let src_base = (o * axis_total + offset) * inner;
                            let dst_base = o * la * inner;
                            for j in 0..la * inner {
                                dp[dst_base + j] += g[src_base + j];
                            }
                        }
                    });
                    offset += la;
                }
            }

            Op::Slice { axis, start } => {
                let (axis, start) = (*axis, *start);
                let in_shape = self.nodes[ps[0]].shape.clone();
                let la = in_shape[axis];
                let lo = node.shape[axis];
                let outer: usize = in_shape[..axis].iter().product();
                let inner: usize = in_shape[axis + 1..].iter().product();
                self.accum(grads, ps[0], |dp| {
                    for o in 0..outer {
                        let dst_base = (o * la + start) * inner;
                        let src_base = o * lo * inner;
                        for j in 0..lo * inner {
                            dp[dst_base + j] += g[src_base + j];
                        }
                    }
                });
            }

            Op::Relu => {
                let xv = Arc::clone(&self.nodes[ps[0]].value);
                self.accum(grads, ps[0], |da| {
                    for ((d, &gv), &x) in da.iter_mut().zip(g).zip(xv.iter()) {
                        if x > 0.0 {
                            *d += gv;
                        }
                    }
                });
            }

            Op::Sigmoid => {
                let yv = Arc::clone(&node.value);
                self.accum(grads, ps[0], |da| {
                    for ((d, &gv), &y) in da.iter_mut().zip(g).zip(yv.iter()) {
                        *d += gv * y * (1.0 - y);
                    }
                });
            }

            Op::Softmax { axis } => {
                let (outer, l, inner) = lane_dims(&node.shape, *axis);
                let yv = Arc::clone(&node.value);
                self.accum(grads, ps[0], |da| {
                    for o in 0..outer {
                        for i in 0..inner {
                            let at = |j: usize| (o * l + j) * inner + i;
                            let mut dot = 0.0;
                            for j in 0..l {
                                dot += yv[at(j)] * g[at(j)];
                            }
                            for j in 0..l {
                                da[at(j)] += yv[at(j)] * (g[at(j)] - dot);
                            }
                        }
                    }
                });
            }

            Op::SumAll => {
                let gv = g[0];
                self.accum(grads, ps[0], |da| {
                    for d in da.iter_mut() {
                        *d += gv;
                    }
                });
            }

            Op::L1Loss { target } => {
                let gv = g[0];
                let xv = Arc::clone(&self.nodes[ps[0]].value);
                let t = Arc::clone(target);
                let n = xv.len() as f64;
                self.accum(grads, ps[0], |da| {
                    for i in 0..da.len() {
                        let diff = xv[i] - t[i];
                        if diff != 0.0 {
                            da[i] += gv * diff.signum() / n;
                        }
                    }
                });
            }

            Op::Conv2d => conv::conv2d_backward(self, idx, g, grads),
            Op::Conv3d => conv::conv3d_backward(self, idx, g, grads),
            Op::ConvTranspose2d { stride, pad } => {
                conv::conv_transpose2d_backward(self, idx, g, grads, *stride, *pad)
            }
            Op::MaxPool2 { argmax } => {
                let am = Arc::clone(argmax);
                self.accum(grads, ps[0], |da| {
                    for (o, &src) in am.iter().enumerate() {
                        da[src] += g[o];
                    }
                });
            }
            Op::AvgPool2 => pool::avg_pool2_backward(self, idx, g, grads),
            Op::Resample { ytaps, xtaps } => {
                crate::ops::resample::resample_backward(self, idx, g, grads, ytaps, xtaps)
            }

            Op::FreqLoss { grad } => {
                let gv = g[0];
                let per = Arc::clone(grad);
                self.accum(grads, ps[0], |da| {
                    for (d, &pg) in da.iter_mut().zip(per.iter()) {
                        *d += gv * pg;
                    }
                });
            }
        }
    }

    // ── shared node accessors for the op modules ────────────────

    pub(crate) fn node_value(&self, idx: usize) -> &[f64] {
        &self.nodes[idx].value
    }

    pub(crate) fn node_shape(&self, idx: usize) -> &[usize] {
        &self.nodes[idx].shape
    }

    pub(crate) fn node_parents(&self, idx: usize) -> &[usize] {
        &self.nodes[idx].parents
    }

    pub(crate) fn accum_parent(
        &self,
        grads: &mut [Option<Vec<f64>>],
        parent: usize,
        f: impl FnOnce(&mut [f64]),
    ) {
        self.accum(grads, parent, f)
    }

    /// First node in forward order holding a non-finite value, as an
    /// op-name/index label. Used for the non-finite-loss diagnostic.
    pub fn first_non_finite(&self) -> Option<String> {
        for (i, n) in self.nodes.iter().enumerate() {
            if !n.value.iter().all(|v| v.is_finite()) {
                return Some(format!("{}#{}", op_name(&n.op), i));
            }
        }
        None
    }
}

pub(crate) fn lane_dims(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer: usize = shape[..axis].iter().product();
    let inner: usize = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(data: &[f64], shape: &[usize]) -> Tensor {
        Tensor::from_vec(data.to_vec(), shape).unwrap()
    }

    #[test]
    fn add_values() {
        let mut tape = Tape::new();
        let a = t(&[1.0, 2.0], &[2]);
        let b = t(&[3.0, 4.0], &[2]);
        let c = tape.add(&a, &b).unwrap();
        assert_eq!(c.data(), &[4.0, 6.0]);
    }

    #[test]
    fn add_shape_mismatch() {
        let mut tape = Tape::new();
        let a = t(&[1.0, 2.0], &[2]);
        let b = t(&[1.0, 2.0, 3.0], &[3]);
        assert!(tape.add(&a, &b).is_err());
    }

    #[test]
    fn broadcast_mul_channel_map() {
        // C×H×W times C×1×1 scales each channel.
        let mut tape = Tape::new();
        let x = t(&[1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0], &[2, 2, 2]);
        let m = t(&[10.0, 100.0], &[2, 1, 1]);
        let y = tape.mul(&x, &m).unwrap();
        assert_eq!(y.data(), &[10.0, 20.0, 30.0, 40.0, 500.0, 600.0, 700.0, 800.0]);
    }

    #[test]
    fn mul_gradient_analytic() {
        // d(a·b)/da at a=[2], b=[5] is 5.
        let mut tape = Tape::new();
        let a = t(&[2.0], &[1]).with_grad();
        let b = t(&[5.0], &[1]).with_grad();
        let y = tape.mul(&a, &b).unwrap();
        let loss = tape.sum(&y);
        let grads = tape.backward(&loss).unwrap();
        assert_eq!(grads.get(&a).unwrap().data(), &[5.0]);
        assert_eq!(grads.get(&b).unwrap().data(), &[2.0]);
    }

    #[test]
    fn broadcast_add_gradient_reduces() {
        let mut tape = Tape::new();
        let a = t(&[0.0; 8], &[2, 2, 2]);
        let b = t(&[1.0, 2.0], &[2, 1, 1]).with_grad();
        let y = tape.add(&a, &b).unwrap();
        let loss = tape.sum(&y);
        let grads = tape.backward(&loss).unwrap();
        // each b element feeds 4 outputs
        assert_eq!(grads.get(&b).unwrap().data(), &[4.0, 4.0]);
    }

    #[test]
    fn matmul_identity_and_hand_case() {
        let mut tape = Tape::new();
        let eye = t(&[1.0, 0.0, 0.0, 1.0], &[2, 2]);
        let m = t(&[1.0, 2.0, 3.0, 4.0], &[2, 2]);
        let y = tape.matmul(&eye, &m).unwrap();
        assert_eq!(y.data(), m.data());

        // [1,2]·[3,4]ᵀ = 11
        let a = t(&[1.0, 2.0], &[1, 2]);
        let b = t(&[3.0, 4.0], &[2, 1]);
        let y = tape.matmul(&a, &b).unwrap();
        assert_eq!(y.data(), &[11.0]);
    }

    #[test]
    fn matmul_grad_is_column_sums() {
        // d sum(A·B) / dA[i,l] = Σ_j B[l,j]
        let mut tape = Tape::new();
        let a = t(&[1.0, 2.0, 3.0, 4.0], &[2, 2]).with_grad();
        let b = t(&[1.0, 10.0, 100.0, 1000.0], &[2, 2]);
        let y = tape.matmul(&a, &b).unwrap();
        let loss = tape.sum(&y);
        let grads = tape.backward(&loss).unwrap();
        assert_eq!(grads.get(&a).unwrap().data(), &[11.0, 1100.0, 11.0, 1100.0]);
    }

    #[test]
    fn reshape_round_trip_and_grad() {
        let mut tape = Tape::new();
        let x = t(&[1.0, 2.0, 3.0, 4.0, 5.0, 6.0], &[2, 3]).with_grad();
        let a = tape.reshape(&x, &[1, 2, 3]).unwrap();
        let b = tape.reshape(&a, &[2, 3]).unwrap();
        assert_eq!(b.data(), x.data());
        let loss = tape.sum(&b);
        let grads = tape.backward(&loss).unwrap();
        assert_eq!(grads.get(&x).unwrap().data(), &[1.0; 6]);
    }

    #[test]
    fn reshape_bad_count() {
        let mut tape = Tape::new();
        let x = t(&[1.0, 2.0], &[2]);
        assert!(tape.reshape(&x, &[3]).is_err());
    }

    #[test]
    fn concat_axis0() {
        let mut tape = Tape::new();
        let a = t(&[1.0, 2.0, 3.0, 4.0, 5.0, 6.0], &[2, 3]);
        let b = t(&[7.0, 8.0, 9.0], &[1, 3]);
        let y = tape.concat(&[&a, &b], 0).unwrap();
        assert_eq!(y.shape(), &[3, 3]);
        assert_eq!(y.data(), &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0, 9.0]);
    }

    #[test]
    fn slice_then_concat_is_identity() {
        let mut tape = Tape::new();
        let x = t(&[1.0, 2.0, 3.0, 4.0, 5.0, 6.0], &[2, 3]);
        let left = tape.slice(&x, 1, 0, 1).unwrap();
        let right = tape.slice(&x, 1, 1, 3).unwrap();
        let y = tape.concat(&[&left, &right], 1).unwrap();
        assert_eq!(y.data(), x.data());
        assert_eq!(y.shape(), x.shape());
    }

    #[test]
    fn sum_gradient_is_ones() {
        let mut tape = Tape::new();
        let x = t(&[1.0, -2.0, 3.0], &[3]).with_grad();
        let loss = tape.sum(&x);
        let grads = tape.backward(&loss).unwrap();
        assert_eq!(grads.get(&x).unwrap().data(), &[1.0, 1.0, 1.0]);
    }

    #[test]
    fn sum_of_squares_gradient() {
        // loss = sum(x²) at x=[1,2] → grad [2,4]
        let mut tape = Tape::new();
        let x = t(&[1.0, 2.0], &[2]).with_grad();
        let sq = tape.mul(&x, &x).unwrap();
        let loss = tape.sum(&sq);
        let grads = tape.backward(&loss).unwrap();
        assert_eq!(grads.get(&x).unwrap().data(), &[2.0, 4.0]);
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut tape = Tape::new();
        let x = t(&[1.0, 2.0], &[2]).with_grad();
        let y = tape.relu(&x);
        assert!(tape.backward(&y).is_err());
    }

    #[test]
    fn backward_rejects_foreign_tensor() {
        let tape = Tape::new();
        let x = Tensor::scalar(1.0);
        assert!(tape.backward(&x).is_err());
    }

    #[test]
    fn backward_linearity() {
        // grad of (2f + 3g) equals 2·grad f + 3·grad g
        let x0 = t(&[0.3, -0.7, 1.1], &[3]).with_grad();

        let grad_of = |coef_f: f64, coef_g: f64, x: &Tensor| -> Vec<f64> {
            let mut tape = Tape::new();
            let f = tape.sum(&tape.mul(x, x).unwrap());
            let sg = tape.sigmoid(x);
            let g = tape.sum(&sg);
            let cf = tape.scalar_mul(&f, coef_f);
            let cg = tape.scalar_mul(&g, coef_g);
            let loss = tape.add(&cf, &cg).unwrap();
            tape.backward(&loss).unwrap().get(x).unwrap().data().to_vec()
        };

        let gf = grad_of(1.0, 0.0, &x0);
        let gg = grad_of(0.0, 1.0, &x0);
        let gmix = grad_of(2.0, 3.0, &x0);
        for i in 0..3 {
            assert!((gmix[i] - (2.0 * gf[i] + 3.0 * gg[i])).abs() < 1e-12);
        }
    }

    #[test]
    fn softmax_normalizes() {
        let mut tape = Tape::new();
        let x = t(&[0.0, 0.0], &[2]);
        let y = tape.softmax(&x, 0).unwrap();
        assert_eq!(y.data(), &[0.5, 0.5]);

        let x = Tensor::uniform(&mut crate::rng::Rng::new(3), &[4, 5], -2.0, 2.0).unwrap();
        let y = tape.softmax(&x, 1).unwrap();
        for r in 0..4 {
            let s: f64 = y.data()[r * 5..(r + 1) * 5].iter().sum();
            assert!((s - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn gradient_accumulates_across_uses() {
        // y = x·x + x ⇒ dy/dx = 2x + 1
        let mut tape = Tape::new();
        let x = t(&[3.0], &[1]).with_grad();
        let sq = tape.mul(&x, &x).unwrap();
        let y = tape.add(&sq, &x).unwrap();
        let loss = tape.sum(&y);
        let grads = tape.backward(&loss).unwrap();
        assert_eq!(grads.get(&x).unwrap().data(), &[7.0]);
    }

    #[test]
    fn determinism_same_seed_same_ops() {
        let run = || {
            let mut rng = crate::rng::Rng::new(99);
            let x = Tensor::uniform(&mut rng, &[3, 3], -1.0, 1.0).unwrap().with_grad();
            let mut tape = Tape::new();
            let y = tape.sigmoid(&x);
            let z = tape.mul(&y, &x).unwrap();
            let loss = tape.sum(&z);
            let grads = tape.backward(&loss).unwrap();
            (loss.item(), grads.get(&x).unwrap().data().to_vec())
        };
        let (l1, g1) = run();
        let (l2, g2) = run();
        assert_eq!(l1.to_bits(), l2.to_bits());
        for (a, b) in g1.iter().zip(&g2) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }
}
