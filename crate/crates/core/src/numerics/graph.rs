//! Define-by-run compute graph with reverse-mode automatic differentiation.
//!
//! A `Graph` is rebuilt for every batch. Each builder method validates
//! shapes, evaluates the forward value immediately through the kernels in
//! [`super::kernels`], and records the operation for the backward pass.
//! Node ids are assigned in insertion order, so ids are already a valid
//! topological order: `backward` walks them once, in reverse.
//!
//! Gradients are accumulated additively, which makes the backward of a sum
//! of losses exactly the sum of the individual backwards.

use std::collections::BTreeMap;

use rand_chacha::ChaCha8Rng;

use super::kernels;
use super::tensor::Tensor;
use crate::error::{Error, Result};

pub type NodeId = usize;

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Add { a: NodeId, b: NodeId },
    AddRow { a: NodeId, row: NodeId },
    MulRow { a: NodeId, row: NodeId },
    ScalarMul { a: NodeId, c: f64 },
    MatMul { a: NodeId, b: NodeId, ta: bool, tb: bool },
    Relu { a: NodeId },
    Softmax { a: NodeId },
    LayerNorm { a: NodeId, eps: f64 },
    Dropout { a: NodeId, mask: Vec<f64> },
    ConcatRows { parts: Vec<NodeId> },
    ConcatCols { parts: Vec<NodeId> },
    SliceRows { a: NodeId, from: usize, to: usize },
    SliceCols { a: NodeId, from: usize, to: usize },
    MeanPoolRows { a: NodeId },
    Embed { table: NodeId, ids: Vec<usize> },
    Reshape { a: NodeId },
    ClampLog { a: NodeId, min: f64 },
    CrossEntropy { logits: NodeId, targets: Vec<usize>, probs: Tensor },
    Bce { logits: NodeId, targets: Vec<f64> },
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Add { .. } => "add",
            Op::AddRow { .. } => "add_row_broadcast",
            Op::MulRow { .. } => "mul_row_broadcast",
            Op::ScalarMul { .. } => "scalar_mul",
            Op::MatMul { .. } => "matmul",
            Op::Relu { .. } => "relu",
            Op::Softmax { .. } => "softmax",
            Op::LayerNorm { .. } => "layernorm",
            Op::Dropout { .. } => "dropout",
            Op::ConcatRows { .. } => "concat_rows",
            Op::ConcatCols { .. } => "concat_cols",
            Op::SliceRows { .. } => "slice_rows",
            Op::SliceCols { .. } => "slice_cols",
            Op::MeanPoolRows { .. } => "mean_pool",
            Op::Embed { .. } => "embedding",
            Op::Reshape { .. } => "reshape",
            Op::ClampLog { .. } => "clamp_log",
            Op::CrossEntropy { .. } => "cross_entropy",
            Op::Bce { .. } => "binary_cross_entropy",
        }
    }
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
    param: Option<String>,
}

#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    grads: Vec<Option<Tensor>>,
    check_finite: bool,
}

impl Graph {
    pub fn new() -> Self {
        Graph::default()
    }

    /// A graph that verifies every forward value is finite, reporting the
    /// offending kernel by name. Used by gradient checking.
    pub fn with_finite_checks() -> Self {
        Graph {
            check_finite: true,
            ..Graph::default()
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id].value
    }

    /// Gradient of the last `backward` target with respect to node `id`.
    pub fn grad(&self, id: NodeId) -> Option<&Tensor> {
        self.grads.get(id).and_then(|g| g.as_ref())
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Result<NodeId> {
        if self.check_finite && !value.all_finite() {
            return Err(Error::non_finite(op.name()));
        }
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
            param: None,
        });
        Ok(self.nodes.len() - 1)
    }

    fn needs(&self, ids: &[NodeId]) -> bool {
        ids.iter().any(|&i| self.nodes[i].requires_grad)
    }

    /// Constant input; no gradient flows into it.
    pub fn leaf(&mut self, value: Tensor) -> NodeId {
        self.push(value, Op::Leaf, false)
            .expect("leaf insertion cannot fail shape checks")
    }

    /// Named trainable input. Gradients for all params are collected by
    /// [`Graph::param_grads`] after `backward`.
    pub fn param(&mut self, name: &str, value: Tensor) -> NodeId {
        let id = self
            .push(value, Op::Leaf, true)
            .expect("param insertion cannot fail shape checks");
        self.nodes[id].param = Some(name.to_string());
        id
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = kernels::add(&self.nodes[a].value, &self.nodes[b].value)?;
        let rg = self.needs(&[a, b]);
        self.push(v, Op::Add { a, b }, rg)
    }

    pub fn add_row(&mut self, a: NodeId, row: NodeId) -> Result<NodeId> {
        let v = kernels::add_row_broadcast(&self.nodes[a].value, &self.nodes[row].value)?;
        let rg = self.needs(&[a, row]);
        self.push(v, Op::AddRow { a, row }, rg)
    }

    pub fn mul_row(&mut self, a: NodeId, row: NodeId) -> Result<NodeId> {
        let v = kernels::mul_row_broadcast(&self.nodes[a].value, &self.nodes[row].value)?;
        let rg = self.needs(&[a, row]);
        self.push(v, Op::MulRow { a, row }, rg)
    }

    pub fn scalar_mul(&mut self, a: NodeId, c: f64) -> Result<NodeId> {
        let v = kernels::scalar_mul(&self.nodes[a].value, c);
        let rg = self.needs(&[a]);
        self.push(v, Op::ScalarMul { a, c }, rg)
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId, ta: bool, tb: bool) -> Result<NodeId> {
        let v = kernels::matmul(&self.nodes[a].value, &self.nodes[b].value, ta, tb)?;
        let rg = self.needs(&[a, b]);
        self.push(v, Op::MatMul { a, b, ta, tb }, rg)
    }

    /// `x wᵀ + b` with `w` stored `(out, in)`.
    pub fn linear(&mut self, x: NodeId, w: NodeId, b: NodeId) -> Result<NodeId> {
        let y = self.matmul(x, w, false, true)?;
        self.add_row(y, b)
    }

    pub fn relu(&mut self, a: NodeId) -> Result<NodeId> {
        let v = kernels::relu(&self.nodes[a].value);
        let rg = self.needs(&[a]);
        self.push(v, Op::Relu { a }, rg)
    }

    pub fn softmax(&mut self, a: NodeId) -> Result<NodeId> {
        let v = kernels::softmax_rows(&self.nodes[a].value)?;
        let rg = self.needs(&[a]);
        self.push(v, Op::Softmax { a }, rg)
    }

    pub fn layernorm(&mut self, a: NodeId, eps: f64) -> Result<NodeId> {
        let v = kernels::layernorm_rows(&self.nodes[a].value, eps)?;
        let rg = self.needs(&[a]);
        self.push(v, Op::LayerNorm { a, eps }, rg)
    }

    /// Inverted dropout drawing its keep mask from `rng`. `p == 0` is the
    /// identity and inserts no node. Eval mode is expressed by not calling
    /// this at all.
    pub fn dropout(&mut self, a: NodeId, p: f64, rng: &mut ChaCha8Rng) -> Result<NodeId> {
        if p == 0.0 {
            return Ok(a);
        }
        let (v, mask) = kernels::dropout(&self.nodes[a].value, p, true, rng)?;
        let mask = mask.expect("training-mode dropout with p > 0 returns a mask");
        let rg = self.needs(&[a]);
        self.push(v, Op::Dropout { a, mask }, rg)
    }

    pub fn concat_rows(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        let tensors: Vec<&Tensor> = parts.iter().map(|&i| &self.nodes[i].value).collect();
        let v = kernels::concat_rows(&tensors)?;
        let rg = self.needs(parts);
        self.push(v, Op::ConcatRows { parts: parts.to_vec() }, rg)
    }

    pub fn concat_cols(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        let tensors: Vec<&Tensor> = parts.iter().map(|&i| &self.nodes[i].value).collect();
        let v = kernels::concat_cols(&tensors)?;
        let rg = self.needs(parts);
        self.push(v, Op::ConcatCols { parts: parts.to_vec() }, rg)
    }

    pub fn slice_rows(&mut self, a: NodeId, from: usize, to: usize) -> Result<NodeId> {
        let t = &self.nodes[a].value;
        let (r, c) = t.expect_2d("slice_rows")?;
        if from >= to || to > r {
            return Err(Error::shape(
                "slice_rows",
                format!("rows {from}..{to} out of bounds for {r} rows"),
            ));
        }
        let v = Tensor::new(
            vec![to - from, c],
            t.data()[from * c..to * c].to_vec(),
        )?;
        let rg = self.needs(&[a]);
        self.push(v, Op::SliceRows { a, from, to }, rg)
    }

    pub fn slice_cols(&mut self, a: NodeId, from: usize, to: usize) -> Result<NodeId> {
        let t = &self.nodes[a].value;
        let (r, c) = t.expect_2d("slice_cols")?;
        if from >= to || to > c {
            return Err(Error::shape(
                "slice_cols",
                format!("cols {from}..{to} out of bounds for {c} cols"),
            ));
        }
        let mut data = Vec::with_capacity(r * (to - from));
        for i in 0..r {
            data.extend_from_slice(&t.data()[i * c + from..i * c + to]);
        }
        let v = Tensor::new(vec![r, to - from], data)?;
        let rg = self.needs(&[a]);
        self.push(v, Op::SliceCols { a, from, to }, rg)
    }

    pub fn mean_pool_rows(&mut self, a: NodeId) -> Result<NodeId> {
        let v = kernels::mean_pool_rows(&self.nodes[a].value)?;
        let rg = self.needs(&[a]);
        self.push(v, Op::MeanPoolRows { a }, rg)
    }

    /// Gather rows of `table` by token id: output row `i` is `table[ids[i]]`.
    pub fn embed(&mut self, table: NodeId, ids: &[usize]) -> Result<NodeId> {
        let t = &self.nodes[table].value;
        let (rows, d) = t.expect_2d("embedding")?;
        if ids.is_empty() {
            return Err(Error::shape("embedding", "empty id list"));
        }
        if let Some(&bad) = ids.iter().find(|&&i| i >= rows) {
            return Err(Error::data(format!(
                "embedding: token id {bad} outside table of {rows} rows"
            )));
        }
        let mut data = Vec::with_capacity(ids.len() * d);
        for &i in ids {
            data.extend_from_slice(t.row(i));
        }
        let v = Tensor::new(vec![ids.len(), d], data)?;
        let rg = self.needs(&[table]);
        self.push(v, Op::Embed { table, ids: ids.to_vec() }, rg)
    }

    pub fn reshape(&mut self, a: NodeId, shape: Vec<usize>) -> Result<NodeId> {
        let t = &self.nodes[a].value;
        if shape.iter().product::<usize>() != t.len() || shape.iter().any(|&d| d == 0) {
            return Err(Error::shape(
                "reshape",
                format!("cannot view {:?} as {:?}", t.shape(), shape),
            ));
        }
        let v = Tensor::new(shape, t.data().to_vec())?;
        let rg = self.needs(&[a]);
        self.push(v, Op::Reshape { a }, rg)
    }

    /// `ln(max(x, min))` with zero gradient on the clamped branch.
    pub fn clamp_log(&mut self, a: NodeId, min: f64) -> Result<NodeId> {
        if min <= 0.0 {
            return Err(Error::config(format!(
                "clamp_log floor must be positive, got {min}"
            )));
        }
        let t = &self.nodes[a].value;
        let data = t.data().iter().map(|&x| x.max(min).ln()).collect();
        let v = Tensor::new(t.shape().to_vec(), data)?;
        let rg = self.needs(&[a]);
        self.push(v, Op::ClampLog { a, min }, rg)
    }

    /// Mean negative log-likelihood of `targets` under row-wise softmax of
    /// `logits`. Returns a scalar node.
    pub fn cross_entropy(&mut self, logits: NodeId, targets: &[usize]) -> Result<NodeId> {
        let t = &self.nodes[logits].value;
        let (r, c) = t.expect_2d("cross_entropy")?;
        if targets.len() != r {
            return Err(Error::shape(
                "cross_entropy",
                format!("{} targets for {r} logit rows", targets.len()),
            ));
        }
        if let Some(&bad) = targets.iter().find(|&&t| t >= c) {
            return Err(Error::data(format!(
                "cross_entropy: target class {bad} outside {c} classes"
            )));
        }
        let probs = kernels::softmax_rows(t)?;
        let mut loss = 0.0;
        for (i, &target) in targets.iter().enumerate() {
            let row = &t.data()[i * c..(i + 1) * c];
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = row.iter().map(|&v| (v - max).exp()).sum::<f64>().ln() + max;
            loss -= row[target] - lse;
        }
        loss /= r as f64;
        let rg = self.needs(&[logits]);
        self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy { logits, targets: targets.to_vec(), probs },
            rg,
        )
    }

    /// Mean element-wise binary cross-entropy of logits against targets in
    /// `[0, 1]`, computed in the numerically stable logit form. Scalar node.
    pub fn bce(&mut self, logits: NodeId, targets: &[f64]) -> Result<NodeId> {
        let t = &self.nodes[logits].value;
        if targets.len() != t.len() {
            return Err(Error::shape(
                "binary_cross_entropy",
                format!("{} targets for {} logits", targets.len(), t.len()),
            ));
        }
        let mut loss = 0.0;
        for (&x, &y) in t.data().iter().zip(targets) {
            loss += x.max(0.0) - x * y + (-x.abs()).exp().ln_1p();
        }
        loss /= targets.len() as f64;
        let rg = self.needs(&[logits]);
        self.push(
            Tensor::scalar(loss),
            Op::Bce { logits, targets: targets.to_vec() },
            rg,
        )
    }

    /// Multi-head scaled dot-product attention composed from graph ops, so
    /// its gradient follows from the primitive backward rules. Matches
    /// [`kernels::scaled_dot_attention`] forward.
    pub fn attention(
        &mut self,
        q: NodeId,
        k: NodeId,
        v: NodeId,
        key_mask: Option<&[bool]>,
        heads: usize,
    ) -> Result<NodeId> {
        let (_, d) = self.nodes[q].value.expect_2d("attention")?;
        let (nk, dk) = self.nodes[k].value.expect_2d("attention")?;
        let (nv, dv) = self.nodes[v].value.expect_2d("attention")?;
        if d != dk || d != dv || nk != nv {
            return Err(Error::shape(
                "attention",
                format!(
                    "incompatible q {:?}, k {:?}, v {:?}",
                    self.nodes[q].value.shape(),
                    self.nodes[k].value.shape(),
                    self.nodes[v].value.shape()
                ),
            ));
        }
        if heads == 0 || d % heads != 0 {
            return Err(Error::config(format!(
                "attention: model dim {d} not divisible by heads {heads}"
            )));
        }
        let mask_row = match key_mask {
            Some(m) => {
                if m.len() != nk {
                    return Err(Error::shape(
                        "attention",
                        format!("mask length {} != key count {nk}", m.len()),
                    ));
                }
                if m.iter().all(|&x| x) {
                    return Err(Error::data("attention: every key is masked".to_string()));
                }
                let row: Vec<f64> = m
                    .iter()
                    .map(|&pad| if pad { kernels::MASK_NEG } else { 0.0 })
                    .collect();
                Some(self.leaf(Tensor::new(vec![1, nk], row)?))
            }
            None => None,
        };
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut head_outs = Vec::with_capacity(heads);
        for h in 0..heads {
            let (from, to) = (h * dh, (h + 1) * dh);
            let qh = self.slice_cols(q, from, to)?;
            let kh = self.slice_cols(k, from, to)?;
            let vh = self.slice_cols(v, from, to)?;
            let scores = self.matmul(qh, kh, false, true)?;
            let scaled = self.scalar_mul(scores, scale)?;
            let logits = match mask_row {
                Some(m) => self.add_row(scaled, m)?,
                None => scaled,
            };
            let weights = self.softmax(logits)?;
            head_outs.push(self.matmul(weights, vh, false, false)?);
        }
        if heads == 1 {
            Ok(head_outs[0])
        } else {
            self.concat_cols(&head_outs)
        }
    }

    /// Reverse-mode sweep from scalar node `loss`, seeding `d loss / d loss`
    /// with `seed`. Gradients accumulate; nodes are visited exactly once in
    /// reverse insertion (= reverse topological) order.
    pub fn backward(&mut self, loss: NodeId, seed: f64) -> Result<()> {
        if self.nodes[loss].value.len() != 1 {
            return Err(Error::shape(
                "backward",
                format!(
                    "loss must be scalar, got {:?}",
                    self.nodes[loss].value.shape()
                ),
            ));
        }
        let n = self.nodes.len();
        let mut grads: Vec<Option<Tensor>> = (0..n).map(|_| None).collect();
        grads[loss] = Some(Tensor::new(
            self.nodes[loss].value.shape().to_vec(),
            vec![seed],
        )?);

        for id in (0..=loss).rev() {
            let Some(g) = grads[id].take() else { continue };
            if !self.nodes[id].requires_grad {
                grads[id] = Some(g);
                continue;
            }
            self.apply_backward(id, &g, &mut grads)?;
            grads[id] = Some(g);
        }
        self.grads = grads;
        Ok(())
    }

    /// Gradients of all named params, keyed by name. Params never touched by
    /// the loss get zero gradients.
    pub fn param_grads(&self) -> BTreeMap<String, Tensor> {
        let mut out = BTreeMap::new();
        for (id, node) in self.nodes.iter().enumerate() {
            if let Some(name) = &node.param {
                let g = match self.grads.get(id).and_then(|g| g.clone()) {
                    Some(g) => g,
                    None => Tensor::zeros(node.value.shape().to_vec())
                        .expect("param shapes are valid"),
                };
                out.insert(name.clone(), g);
            }
        }
        out
    }

    fn ensure<'a>(
        grads: &'a mut [Option<Tensor>],
        id: NodeId,
        shape: &[usize],
    ) -> &'a mut Tensor {
        if grads[id].is_none() {
            grads[id] = Some(Tensor::zeros(shape.to_vec()).expect("valid node shape"));
        }
        grads[id].as_mut().expect("just initialized")
    }

    fn apply_backward(
        &self,
        id: NodeId,
        g: &Tensor,
        grads: &mut [Option<Tensor>],
    ) -> Result<()> {
        let nodes = &self.nodes;
        let rg = |i: NodeId| nodes[i].requires_grad;
        match &nodes[id].op {
            Op::Leaf => {}
            Op::Add { a, b } => {
                for &i in &[*a, *b] {
                    if rg(i) {
                        let dst = Self::ensure(grads, i, nodes[i].value.shape());
                        for (d, &s) in dst.data_mut().iter_mut().zip(g.data()) {
                            *d += s;
                        }
                    }
                }
            }
            Op::AddRow { a, row } => {
                let (r, c) = nodes[*a].value.expect_2d("add_row backward")?;
                if rg(*a) {
                    let dst = Self::ensure(grads, *a, nodes[*a].value.shape());
                    for (d, &s) in dst.data_mut().iter_mut().zip(g.data()) {
                        *d += s;
                    }
                }
                if rg(*row) {
                    let dst = Self::ensure(grads, *row, nodes[*row].value.shape());
                    for i in 0..r {
                        for j in 0..c {
                            dst.data_mut()[j] += g.data()[i * c + j];
                        }
                    }
                }
            }
            Op::MulRow { a, row } => {
                let (r, c) = nodes[*a].value.expect_2d("mul_row backward")?;
                let av = nodes[*a].value.data();
                let rv = nodes[*row].value.data();
                if rg(*a) {
                    let dst = Self::ensure(grads, *a, nodes[*a].value.shape());
                    for i in 0..r {
                        for j in 0..c {
                            dst.data_mut()[i * c + j] += g.data()[i * c + j] * rv[j];
                        }
                    }
                }
                if rg(*row) {
                    let dst = Self::ensure(grads, *row, nodes[*row].value.shape());
                    for i in 0..r {
                        for j in 0..c {
                            dst.data_mut()[j] += g.data()[i * c + j] * av[i * c + j];
                        }
                    }
                }
            }
            Op::ScalarMul { a, c } => {
                if rg(*a) {
                    let dst = Self::ensure(grads, *a, nodes[*a].value.shape());
                    for (d, &s) in dst.data_mut().iter_mut().zip(g.data()) {
                        *d += c * s;
                    }
                }
            }
            Op::MatMul { a, b, ta, tb } => {
                let (m, _) = nodes[id].value.expect_2d("matmul backward")?;
                let n = nodes[id].value.cols();
                debug_assert_eq!(g.rows(), m);
                debug_assert_eq!(g.cols(), n);
                let av = &nodes[*a].value;
                let bv = &nodes[*b].value;
                if rg(*a) {
                    let (ar, ac) = av.expect_2d("matmul backward")?;
                    let dst = Self::ensure(grads, *a, av.shape());
                    if !*ta {
                        // dA = G · op_b(B)ᵀ
                        kernels::matmul_acc(dst.data_mut(), ar, ac, 1.0, g, bv, false, !*tb)?;
                    } else {
                        // dA = op_b(B) · Gᵀ
                        kernels::matmul_acc(dst.data_mut(), ar, ac, 1.0, bv, g, *tb, true)?;
                    }
                }
                if rg(*b) {
                    let (br, bc) = bv.expect_2d("matmul backward")?;
                    let dst = Self::ensure(grads, *b, bv.shape());
                    if !*tb {
                        // dB = op_a(A)ᵀ · G
                        kernels::matmul_acc(dst.data_mut(), br, bc, 1.0, av, g, !*ta, false)?;
                    } else {
                        // dB = Gᵀ · op_a(A)
                        kernels::matmul_acc(dst.data_mut(), br, bc, 1.0, g, av, true, *ta)?;
                    }
                }
            }
            Op::Relu { a } => {
                if rg(*a) {
                    let x = nodes[*a].value.data();
                    let dst = Self::ensure(grads, *a, nodes[*a].value.shape());
                    for (i, (d, &s)) in dst.data_mut().iter_mut().zip(g.data()).enumerate() {
                        if x[i] > 0.0 {
                            *d += s;
                        }
                    }
                }
            }
            Op::Softmax { a } => {
                if rg(*a) {
                    let y = &nodes[id].value;
                    let (r, c) = y.expect_2d("softmax backward")?;
                    let dst = Self::ensure(grads, *a, nodes[*a].value.shape());
                    for i in 0..r {
                        let yrow = &y.data()[i * c..(i + 1) * c];
                        let grow = &g.data()[i * c..(i + 1) * c];
                        let dot: f64 = yrow.iter().zip(grow).map(|(y, g)| y * g).sum();
                        for j in 0..c {
                            dst.data_mut()[i * c + j] += yrow[j] * (grow[j] - dot);
                        }
                    }
                }
            }
            Op::LayerNorm { a, eps } => {
                if rg(*a) {
                    let x = &nodes[*a].value;
                    let (r, c) = x.expect_2d("layernorm backward")?;
                    let dst = Self::ensure(grads, *a, x.shape());
                    let nf = c as f64;
                    for i in 0..r {
                        let xrow = &x.data()[i * c..(i + 1) * c];
                        let grow = &g.data()[i * c..(i + 1) * c];
                        let mean = xrow.iter().sum::<f64>() / nf;
                        let var =
                            xrow.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / nf;
                        let inv = 1.0 / (var + eps).sqrt();
                        let xhat: Vec<f64> = xrow.iter().map(|v| (v - mean) * inv).collect();
                        let gmean = grow.iter().sum::<f64>() / nf;
                        let gx = grow
                            .iter()
                            .zip(&xhat)
                            .map(|(g, h)| g * h)
                            .sum::<f64>()
                            / nf;
                        for j in 0..c {
                            dst.data_mut()[i * c + j] +=
                                inv * (grow[j] - gmean - xhat[j] * gx);
                        }
                    }
                }
            }
            Op::Dropout { a, mask } => {
                if rg(*a) {
                    let dst = Self::ensure(grads, *a, nodes[*a].value.shape());
                    for (i, (d, &s)) in dst.data_mut().iter_mut().zip(g.data()).enumerate() {
                        *d += s * mask[i];
                    }
                }
            }
            Op::ConcatRows { parts } => {
                let cols = nodes[id].value.cols();
                let mut off = 0;
                for &p in parts {
                    let r = nodes[p].value.rows();
                    if rg(p) {
                        let dst = Self::ensure(grads, p, nodes[p].value.shape());
                        for (d, &s) in dst
                            .data_mut()
                            .iter_mut()
                            .zip(&g.data()[off * cols..(off + r) * cols])
                        {
                            *d += s;
                        }
                    }
                    off += r;
                }
            }
            Op::ConcatCols { parts } => {
                let rows = nodes[id].value.rows();
                let cols = nodes[id].value.cols();
                let mut off = 0;
                for &p in parts {
                    let c = nodes[p].value.cols();
                    if rg(p) {
                        let dst = Self::ensure(grads, p, nodes[p].value.shape());
                        for i in 0..rows {
                            for j in 0..c {
                                dst.data_mut()[i * c + j] += g.data()[i * cols + off + j];
                            }
                        }
                    }
                    off += c;
                }
            }
            Op::SliceRows { a, from, to } => {
                if rg(*a) {
                    let c = nodes[*a].value.cols();
                    let dst = Self::ensure(grads, *a, nodes[*a].value.shape());
                    for (d, &s) in dst.data_mut()[from * c..to * c]
                        .iter_mut()
                        .zip(g.data())
                    {
                        *d += s;
                    }
                }
            }
            Op::SliceCols { a, from, to } => {
                if rg(*a) {
                    let (r, c) = nodes[*a].value.expect_2d("slice_cols backward")?;
                    let w = to - from;
                    let dst = Self::ensure(grads, *a, nodes[*a].value.shape());
                    for i in 0..r {
                        for j in 0..w {
                            dst.data_mut()[i * c + from + j] += g.data()[i * w + j];
                        }
                    }
                }
            }
            Op::MeanPoolRows { a } => {
                if rg(*a) {
                    let (r, c) = nodes[*a].value.expect_2d("mean_pool backward")?;
                    let dst = Self::ensure(grads, *a, nodes[*a].value.shape());
                    let inv = 1.0 / r as f64;
                    for i in 0..r {
                        for j in 0..c {
                            dst.data_mut()[i * c + j] += g.data()[j] * inv;
                        }
                    }
                }
            }
            Op::Embed { table, ids } => {
                if rg(*table) {
                    let d = nodes[*table].value.cols();
                    let dst = Self::ensure(grads, *table, nodes[*table].value.shape());
                    for (r, &tok) in ids.iter().enumerate() {
                        for j in 0..d {
                            dst.data_mut()[tok * d + j] += g.data()[r * d + j];
                        }
                    }
                }
            }
            Op::Reshape { a } => {
                if rg(*a) {
                    let dst = Self::ensure(grads, *a, nodes[*a].value.shape());
                    for (d, &s) in dst.data_mut().iter_mut().zip(g.data()) {
                        *d += s;
                    }
                }
            }
            Op::ClampLog { a, min } => {
                if rg(*a) {
                    let x = nodes[*a].value.data();
                    let dst = Self::ensure(grads, *a, nodes[*a].value.shape());
                    for (i, (d, &s)) in dst.data_mut().iter_mut().zip(g.data()).enumerate() {
                        if x[i] > *min {
                            *d += s / x[i];
                        }
                    }
                }
            }
            Op::CrossEntropy { logits, targets, probs } => {
                if rg(*logits) {
                    let (r, c) = probs.expect_2d("cross_entropy backward")?;
                    let dst = Self::ensure(grads, *logits, nodes[*logits].value.shape());
                    let scale = g.data()[0] / r as f64;
                    for i in 0..r {
                        for j in 0..c {
                            let one_hot = if targets[i] == j { 1.0 } else { 0.0 };
                            dst.data_mut()[i * c + j] +=
                                scale * (probs.at2(i, j) - one_hot);
                        }
                    }
                }
            }
            Op::Bce { logits, targets } => {
                if rg(*logits) {
                    let x = &nodes[*logits].value;
                    let sig = kernels::sigmoid(x);
                    let dst = Self::ensure(grads, *logits, x.shape());
                    let scale = g.data()[0] / targets.len() as f64;
                    for (i, (d, &y)) in
                        dst.data_mut().iter_mut().zip(targets).enumerate()
                    {
                        *d += scale * (sig.data()[i] - y);
                    }
                }
            }
        }
        Ok(())
    }
}
