//! Computation graph with reverse-mode differentiation.
//!
//! Every operation evaluates eagerly at construction time and records its
//! parents, so a forward pass leaves behind a complete tape. `backward`
//! walks the tape in reverse, applying hand-written vector-Jacobian rules.
//! Gradient flow is pruned below nodes that cannot reach a parameter.

use crate::error::{CitrasError, Result};
use crate::numerics::params::{ParamId, ParamStore};
use crate::numerics::tensor::Tensor;

pub type NodeId = usize;

/// Which attention kernel the following matmuls belong to, for the
/// multiply-accumulate counters used by the complexity probe.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum KernelScope {
    #[default]
    None,
    CrossTime,
    CrossVariate,
}

/// Multiply-accumulate counts per attention kernel (score and
/// weight-times-value matmuls only).
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct MacCounters {
    pub cross_time: u64,
    pub cross_variate: u64,
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul { a: NodeId, b: NodeId },
    Transpose { a: NodeId },
    Add { a: NodeId, b: NodeId },
    Sub { a: NodeId, b: NodeId },
    MulElem { a: NodeId, b: NodeId },
    Scale { a: NodeId, factor: f64 },
    AddScalar { a: NodeId },
    AddRowBias { a: NodeId, bias: NodeId },
    Relu { a: NodeId },
    Dropout { a: NodeId, mask: Vec<f64> },
    Sum { a: NodeId },
    LayerNorm { a: NodeId, gamma: NodeId, beta: NodeId, eps: f64 },
    SoftmaxRows { a: NodeId },
    Rope { a: NodeId, base: f64 },
    ConcatRows { parts: Vec<NodeId> },
    SliceRows { a: NodeId, start: usize, count: usize },
    ConcatCols { parts: Vec<NodeId> },
    SliceCols { a: NodeId, start: usize, count: usize },
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
    param: Option<ParamId>,
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    scope: KernelScope,
    counters: MacCounters,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
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

    pub fn set_kernel_scope(&mut self, scope: KernelScope) {
        self.scope = scope;
    }

    pub fn counters(&self) -> MacCounters {
        self.counters
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> NodeId {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
            param: None,
        });
        self.nodes.len() - 1
    }

    fn needs(&self, id: NodeId) -> bool {
        self.nodes[id].needs_grad
    }

    /// Inserts a constant leaf: gradients never flow into it.
    pub fn constant(&mut self, value: Tensor) -> NodeId {
        self.push(value, Op::Leaf, false)
    }

    /// Inserts a parameter leaf tied to a `ParamStore` slot; after
    /// `backward`, `accumulate_grads` adds this node's gradient into the
    /// slot's accumulator.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> NodeId {
        let node = self.push(store.value(id).clone(), Op::Leaf, true);
        self.nodes[node].param = Some(id);
        node
    }

    // ── Operations ──────────────────────────────────────────────────────

    /// 2-D matrix product `[m×k] @ [k×n] -> [m×n]`.
    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (av, bv) = (&self.nodes[a].value, &self.nodes[b].value);
        if av.shape().len() != 2 || bv.shape().len() != 2 || av.cols() != bv.rows() {
            return Err(CitrasError::Dimension {
                op: "matmul",
                lhs: av.shape().to_vec(),
                rhs: bv.shape().to_vec(),
            });
        }
        let (m, k, n) = (av.rows(), av.cols(), bv.cols());
        let out = matmul_raw(av.data(), bv.data(), m, k, n);
        match self.scope {
            KernelScope::CrossTime => self.counters.cross_time += (m * k * n) as u64,
            KernelScope::CrossVariate => self.counters.cross_variate += (m * k * n) as u64,
            KernelScope::None => {}
        }
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(
            Tensor::matrix(m, n, out).expect("matmul output shape"),
            Op::MatMul { a, b },
            needs,
        ))
    }

    pub fn transpose(&mut self, a: NodeId) -> Result<NodeId> {
        let av = &self.nodes[a].value;
        if av.shape().len() != 2 {
            return Err(CitrasError::Dimension {
                op: "transpose",
                lhs: av.shape().to_vec(),
                rhs: vec![],
            });
        }
        let (m, n) = (av.rows(), av.cols());
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = av.at2(i, j);
            }
        }
        let needs = self.needs(a);
        Ok(self.push(
            Tensor::matrix(n, m, out).expect("transpose shape"),
            Op::Transpose { a },
            needs,
        ))
    }

    fn elementwise(
        &mut self,
        op_name: &'static str,
        a: NodeId,
        b: NodeId,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<NodeId> {
        let (av, bv) = (&self.nodes[a].value, &self.nodes[b].value);
        if av.shape() != bv.shape() {
            return Err(CitrasError::Dimension {
                op: op_name,
                lhs: av.shape().to_vec(),
                rhs: bv.shape().to_vec(),
            });
        }
        let data: Vec<f64> = av
            .data()
            .iter()
            .zip(bv.data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        let shape = av.shape().to_vec();
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(Tensor::new(shape, data).expect("elementwise shape"), op, needs))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.elementwise("add", a, b, |x, y| x + y, Op::Add { a, b })
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.elementwise("sub", a, b, |x, y| x - y, Op::Sub { a, b })
    }

    pub fn mul_elem(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.elementwise("mul_elem", a, b, |x, y| x * y, Op::MulElem { a, b })
    }

    pub fn scale(&mut self, a: NodeId, factor: f64) -> NodeId {
        let av = &self.nodes[a].value;
        let data: Vec<f64> = av.data().iter().map(|&x| x * factor).collect();
        let shape = av.shape().to_vec();
        let needs = self.needs(a);
        self.push(
            Tensor::new(shape, data).expect("scale shape"),
            Op::Scale { a, factor },
            needs,
        )
    }

    pub fn add_scalar(&mut self, a: NodeId, offset: f64) -> NodeId {
        let av = &self.nodes[a].value;
        let data: Vec<f64> = av.data().iter().map(|&x| x + offset).collect();
        let shape = av.shape().to_vec();
        let needs = self.needs(a);
        self.push(
            Tensor::new(shape, data).expect("add_scalar shape"),
            Op::AddScalar { a },
            needs,
        )
    }

    /// Adds a 1-D bias to every row of a matrix.
    pub fn add_row_bias(&mut self, a: NodeId, bias: NodeId) -> Result<NodeId> {
        let (av, bv) = (&self.nodes[a].value, &self.nodes[bias].value);
        if av.shape().len() != 2 || bv.numel() != av.cols() {
            return Err(CitrasError::Dimension {
                op: "add_row_bias",
                lhs: av.shape().to_vec(),
                rhs: bv.shape().to_vec(),
            });
        }
        let cols = av.cols();
        let data: Vec<f64> = av
            .data()
            .iter()
            .enumerate()
            .map(|(i, &x)| x + bv.data()[i % cols])
            .collect();
        let shape = av.shape().to_vec();
        let needs = self.needs(a) || self.needs(bias);
        Ok(self.push(
            Tensor::new(shape, data).expect("add_row_bias shape"),
            Op::AddRowBias { a, bias },
            needs,
        ))
    }

    /// Affine map `x @ w + b` over rows.
    pub fn linear(&mut self, x: NodeId, w: NodeId, b: NodeId) -> Result<NodeId> {
        let prod = self.matmul(x, w)?;
        self.add_row_bias(prod, b)
    }

    pub fn relu(&mut self, a: NodeId) -> NodeId {
        let av = &self.nodes[a].value;
        let data: Vec<f64> = av.data().iter().map(|&x| x.max(0.0)).collect();
        let shape = av.shape().to_vec();
        let needs = self.needs(a);
        self.push(
            Tensor::new(shape, data).expect("relu shape"),
            Op::Relu { a },
            needs,
        )
    }

    /// Inverted dropout with a precomputed mask of keep-scaled factors
    /// (0 or 1/(1-p)); the same mask is reused in the backward pass.
    pub fn dropout(&mut self, a: NodeId, mask: Vec<f64>) -> Result<NodeId> {
        let av = &self.nodes[a].value;
        if mask.len() != av.numel() {
            return Err(CitrasError::Dimension {
                op: "dropout",
                lhs: av.shape().to_vec(),
                rhs: vec![mask.len()],
            });
        }
        let data: Vec<f64> = av.data().iter().zip(&mask).map(|(&x, &m)| x * m).collect();
        let shape = av.shape().to_vec();
        let needs = self.needs(a);
        Ok(self.push(
            Tensor::new(shape, data).expect("dropout shape"),
            Op::Dropout { a, mask },
            needs,
        ))
    }

    /// Sum of all elements, as a scalar node.
    pub fn sum(&mut self, a: NodeId) -> NodeId {
        let mut acc = 0.0;
        for &v in self.nodes[a].value.data() {
            acc += v;
        }
        let needs = self.needs(a);
        self.push(Tensor::scalar(acc), Op::Sum { a }, needs)
    }

    /// Per-row normalization to zero mean and unit variance (eps-regularized),
    /// followed by the affine map `gamma * xhat + beta`.
    pub fn layer_norm(
        &mut self,
        a: NodeId,
        gamma: NodeId,
        beta: NodeId,
        eps: f64,
    ) -> Result<NodeId> {
        if eps <= 0.0 {
            return Err(CitrasError::Contract(format!(
                "layer_norm eps must be positive, got {eps}"
            )));
        }
        let av = &self.nodes[a].value;
        let (gv, bv) = (&self.nodes[gamma].value, &self.nodes[beta].value);
        if av.shape().len() != 2 || gv.numel() != av.cols() || bv.numel() != av.cols() {
            return Err(CitrasError::Dimension {
                op: "layer_norm",
                lhs: av.shape().to_vec(),
                rhs: gv.shape().to_vec(),
            });
        }
        let (rows, cols) = (av.rows(), av.cols());
        let mut data = vec![0.0; rows * cols];
        for r in 0..rows {
            let row = av.row(r);
            let (mean, var) = mean_var(row);
            let denom = (var + eps).sqrt();
            for c in 0..cols {
                let xhat = (row[c] - mean) / denom;
                data[r * cols + c] = gv.data()[c] * xhat + bv.data()[c];
            }
        }
        let needs = self.needs(a) || self.needs(gamma) || self.needs(beta);
        Ok(self.push(
            Tensor::matrix(rows, cols, data).expect("layer_norm shape"),
            Op::LayerNorm { a, gamma, beta, eps },
            needs,
        ))
    }

    /// Numerically stable softmax over the last axis. Entries where
    /// `allowed` is false receive exactly zero weight; a fully-masked row
    /// is an error.
    pub fn masked_softmax(&mut self, a: NodeId, allowed: Option<Vec<bool>>) -> Result<NodeId> {
        let av = &self.nodes[a].value;
        if av.shape().len() != 2 {
            return Err(CitrasError::Dimension {
                op: "masked_softmax",
                lhs: av.shape().to_vec(),
                rhs: vec![],
            });
        }
        if let Some(mask) = &allowed {
            if mask.len() != av.numel() {
                return Err(CitrasError::Dimension {
                    op: "masked_softmax",
                    lhs: av.shape().to_vec(),
                    rhs: vec![mask.len()],
                });
            }
        }
        let (rows, cols) = (av.rows(), av.cols());
        let mut data = vec![0.0; rows * cols];
        for r in 0..rows {
            let row = av.row(r);
            let keep = |c: usize| allowed.as_ref().map_or(true, |m| m[r * cols + c]);
            let mut max = f64::NEG_INFINITY;
            for c in 0..cols {
                if keep(c) && row[c] > max {
                    max = row[c];
                }
            }
            if max == f64::NEG_INFINITY {
                return Err(CitrasError::DegenerateMask { row: r });
            }
            let mut denom = 0.0;
            for c in 0..cols {
                if keep(c) {
                    let e = (row[c] - max).exp();
                    data[r * cols + c] = e;
                    denom += e;
                }
            }
            for c in 0..cols {
                data[r * cols + c] /= denom;
            }
        }
        let needs = self.needs(a);
        Ok(self.push(
            Tensor::matrix(rows, cols, data).expect("softmax shape"),
            Op::SoftmaxRows { a },
            needs,
        ))
    }

    /// Rotary position embedding over consecutive coordinate pairs. The
    /// position of each row is its row index; pair `j` rotates by
    /// `pos * base^(-2j/d)`.
    pub fn rope(&mut self, a: NodeId, base: f64) -> Result<NodeId> {
        let av = &self.nodes[a].value;
        if av.shape().len() != 2 || av.cols() % 2 != 0 {
            return Err(CitrasError::Config(format!(
                "rotary embedding requires an even per-head dimension, got shape {:?}",
                av.shape()
            )));
        }
        let (rows, cols) = (av.rows(), av.cols());
        let mut data = vec![0.0; rows * cols];
        for r in 0..rows {
            rope_rotate_row(av.row(r), r as f64, base, &mut data[r * cols..(r + 1) * cols]);
        }
        let needs = self.needs(a);
        Ok(self.push(
            Tensor::matrix(rows, cols, data).expect("rope shape"),
            Op::Rope { a, base },
            needs,
        ))
    }

    pub fn concat_rows(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        if parts.is_empty() {
            return Err(CitrasError::Contract("concat_rows of zero parts".into()));
        }
        let cols = self.nodes[parts[0]].value.cols();
        let mut rows = 0;
        let mut data = Vec::new();
        let mut needs = false;
        for &p in parts {
            let pv = &self.nodes[p].value;
            if pv.shape().len() != 2 || pv.cols() != cols {
                return Err(CitrasError::Dimension {
                    op: "concat_rows",
                    lhs: self.nodes[parts[0]].value.shape().to_vec(),
                    rhs: self.nodes[p].value.shape().to_vec(),
                });
            }
            rows += pv.rows();
            data.extend_from_slice(pv.data());
            needs |= self.needs(p);
        }
        Ok(self.push(
            Tensor::matrix(rows, cols, data).expect("concat_rows shape"),
            Op::ConcatRows {
                parts: parts.to_vec(),
            },
            needs,
        ))
    }

    pub fn slice_rows(&mut self, a: NodeId, start: usize, count: usize) -> Result<NodeId> {
        let av = &self.nodes[a].value;
        if av.shape().len() != 2 || start + count > av.rows() || count == 0 {
            return Err(CitrasError::Dimension {
                op: "slice_rows",
                lhs: av.shape().to_vec(),
                rhs: vec![start, count],
            });
        }
        let cols = av.cols();
        let data = av.data()[start * cols..(start + count) * cols].to_vec();
        let needs = self.needs(a);
        Ok(self.push(
            Tensor::matrix(count, cols, data).expect("slice_rows shape"),
            Op::SliceRows { a, start, count },
            needs,
        ))
    }

    pub fn concat_cols(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        if parts.is_empty() {
            return Err(CitrasError::Contract("concat_cols of zero parts".into()));
        }
        let rows = self.nodes[parts[0]].value.rows();
        let mut cols = 0;
        let mut needs = false;
        for &p in parts {
            let pv = &self.nodes[p].value;
            if pv.shape().len() != 2 || pv.rows() != rows {
                return Err(CitrasError::Dimension {
                    op: "concat_cols",
                    lhs: self.nodes[parts[0]].value.shape().to_vec(),
                    rhs: pv.shape().to_vec(),
                });
            }
            cols += pv.cols();
            needs |= self.needs(p);
        }
        let mut data = vec![0.0; rows * cols];
        let mut offset = 0;
        for &p in parts {
            let pv = &self.nodes[p].value;
            let pc = pv.cols();
            for r in 0..rows {
                data[r * cols + offset..r * cols + offset + pc].copy_from_slice(pv.row(r));
            }
            offset += pc;
        }
        Ok(self.push(
            Tensor::matrix(rows, cols, data).expect("concat_cols shape"),
            Op::ConcatCols {
                parts: parts.to_vec(),
            },
            needs,
        ))
    }

    pub fn slice_cols(&mut self, a: NodeId, start: usize, count: usize) -> Result<NodeId> {
        let av = &self.nodes[a].value;
        if av.shape().len() != 2 || start + count > av.cols() || count == 0 {
            return Err(CitrasError::Dimension {
                op: "slice_cols",
                lhs: av.shape().to_vec(),
                rhs: vec![start, count],
            });
        }
        let (rows, cols) = (av.rows(), av.cols());
        let mut data = Vec::with_capacity(rows * count);
        for r in 0..rows {
            data.extend_from_slice(&av.data()[r * cols + start..r * cols + start + count]);
        }
        let needs = self.needs(a);
        Ok(self.push(
            Tensor::matrix(rows, count, data).expect("slice_cols shape"),
            Op::SliceCols { a, start, count },
            needs,
        ))
    }

    // ── Backward pass ───────────────────────────────────────────────────

    /// Reverse-mode sweep from a scalar loss. Returns one gradient slot per
    /// node; slots stay `None` where no gradient flows.
    pub fn backward(&self, loss: NodeId) -> Result<Vec<Option<Tensor>>> {
        let lv = &self.nodes[loss].value;
        if !lv.is_scalar() {
            return Err(CitrasError::Contract(format!(
                "backward requires a scalar loss, got shape {:?}",
                lv.shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        if !self.nodes[loss].needs_grad {
            return Ok(grads);
        }
        grads[loss] = Some(Tensor::scalar(1.0));

        for id in (0..=loss).rev() {
            let g = match grads[id].take() {
                Some(g) => g,
                None => continue,
            };
            if !self.nodes[id].needs_grad {
                grads[id] = Some(g);
                continue;
            }
            self.apply_vjp(id, &g, &mut grads);
            grads[id] = Some(g);
        }
        Ok(grads)
    }

    /// Adds every parameter node's gradient into the store accumulators.
    /// Parameters that appear in the graph but receive no gradient flow are
    /// accumulated as zeros (they still count as touched).
    pub fn accumulate_grads(
        &self,
        grads: &[Option<Tensor>],
        store: &mut ParamStore,
    ) -> Result<()> {
        for (id, node) in self.nodes.iter().enumerate() {
            if let Some(pid) = node.param {
                match &grads[id] {
                    Some(g) => store.add_grad(pid, g)?,
                    None => store.add_grad(pid, &Tensor::zeros(node.value.shape().to_vec()))?,
                }
            }
        }
        Ok(())
    }

    fn apply_vjp(&self, id: NodeId, g: &Tensor, grads: &mut [Option<Tensor>]) {
        match &self.nodes[id].op {
            Op::Leaf => {}
            Op::MatMul { a, b } => {
                let (av, bv) = (&self.nodes[*a].value, &self.nodes[*b].value);
                let (m, k, n) = (av.rows(), av.cols(), bv.cols());
                if self.needs(*a) {
                    // dA = G @ B^T
                    let da = matmul_nt(g.data(), bv.data(), m, n, k);
                    self.accumulate(grads, *a, &da);
                }
                if self.needs(*b) {
                    // dB = A^T @ G
                    let db = matmul_tn(av.data(), g.data(), m, k, n);
                    self.accumulate(grads, *b, &db);
                }
            }
            Op::Transpose { a } => {
                if self.needs(*a) {
                    let (m, n) = (g.rows(), g.cols());
                    let mut da = vec![0.0; m * n];
                    for i in 0..m {
                        for j in 0..n {
                            da[j * m + i] = g.at2(i, j);
                        }
                    }
                    self.accumulate(grads, *a, &da);
                }
            }
            Op::Add { a, b } => {
                if self.needs(*a) {
                    self.accumulate(grads, *a, g.data());
                }
                if self.needs(*b) {
                    self.accumulate(grads, *b, g.data());
                }
            }
            Op::Sub { a, b } => {
                if self.needs(*a) {
                    self.accumulate(grads, *a, g.data());
                }
                if self.needs(*b) {
                    let neg: Vec<f64> = g.data().iter().map(|&x| -x).collect();
                    self.accumulate(grads, *b, &neg);
                }
            }
            Op::MulElem { a, b } => {
                if self.needs(*a) {
                    let da: Vec<f64> = g
                        .data()
                        .iter()
                        .zip(self.nodes[*b].value.data())
                        .map(|(&gx, &y)| gx * y)
                        .collect();
                    self.accumulate(grads, *a, &da);
                }
                if self.needs(*b) {
                    let db: Vec<f64> = g
                        .data()
                        .iter()
                        .zip(self.nodes[*a].value.data())
                        .map(|(&gx, &x)| gx * x)
                        .collect();
                    self.accumulate(grads, *b, &db);
                }
            }
            Op::Scale { a, factor } => {
                if self.needs(*a) {
                    let da: Vec<f64> = g.data().iter().map(|&x| x * factor).collect();
                    self.accumulate(grads, *a, &da);
                }
            }
            Op::AddScalar { a } => {
                if self.needs(*a) {
                    self.accumulate(grads, *a, g.data());
                }
            }
            Op::AddRowBias { a, bias } => {
                if self.needs(*a) {
                    self.accumulate(grads, *a, g.data());
                }
                if self.needs(*bias) {
                    let cols = self.nodes[*bias].value.numel();
                    let mut db = vec![0.0; cols];
                    for (i, &gx) in g.data().iter().enumerate() {
                        db[i % cols] += gx;
                    }
                    self.accumulate(grads, *bias, &db);
                }
            }
            Op::Relu { a } => {
                if self.needs(*a) {
                    let da: Vec<f64> = g
                        .data()
                        .iter()
                        .zip(self.nodes[*a].value.data())
                        .map(|(&gx, &x)| if x > 0.0 { gx } else { 0.0 })
                        .collect();
                    self.accumulate(grads, *a, &da);
                }
            }
            Op::Dropout { a, mask } => {
                if self.needs(*a) {
                    let da: Vec<f64> = g
                        .data()
                        .iter()
                        .zip(mask)
                        .map(|(&gx, &m)| gx * m)
                        .collect();
                    self.accumulate(grads, *a, &da);
                }
            }
            Op::Sum { a } => {
                if self.needs(*a) {
                    let da = vec![g.item(); self.nodes[*a].value.numel()];
                    self.accumulate(grads, *a, &da);
                }
            }
            Op::LayerNorm { a, gamma, beta, eps } => {
                let av = &self.nodes[*a].value;
                let gv = &self.nodes[*gamma].value;
                let (rows, cols) = (av.rows(), av.cols());
                let mut da = vec![0.0; rows * cols];
                let mut dgamma = vec![0.0; cols];
                let mut dbeta = vec![0.0; cols];
                for r in 0..rows {
                    let row = av.row(r);
                    let (mean, var) = mean_var(row);
                    let denom = (var + eps).sqrt();
                    let grow = g.row(r);
                    let mut m1 = 0.0; // mean of gamma ⊙ g
                    let mut m2 = 0.0; // mean of gamma ⊙ g ⊙ xhat
                    for c in 0..cols {
                        let xhat = (row[c] - mean) / denom;
                        let h = gv.data()[c] * grow[c];
                        m1 += h;
                        m2 += h * xhat;
                        dgamma[c] += grow[c] * xhat;
                        dbeta[c] += grow[c];
                    }
                    m1 /= cols as f64;
                    m2 /= cols as f64;
                    for c in 0..cols {
                        let xhat = (row[c] - mean) / denom;
                        let h = gv.data()[c] * grow[c];
                        da[r * cols + c] = (h - m1 - xhat * m2) / denom;
                    }
                }
                if self.needs(*a) {
                    self.accumulate(grads, *a, &da);
                }
                if self.needs(*gamma) {
                    self.accumulate(grads, *gamma, &dgamma);
                }
                if self.needs(*beta) {
                    self.accumulate(grads, *beta, &dbeta);
                }
            }
            Op::SoftmaxRows { a } => {
                if self.needs(*a) {
                    let yv = &self.nodes[id].value;
                    let (rows, cols) = (yv.rows(), yv.cols());
                    let mut da = vec![0.0; rows * cols];
                    for r in 0..rows {
                        let y = yv.row(r);
                        let grow = g.row(r);
                        let mut dot = 0.0;
                        for c in 0..cols {
                            dot += grow[c] * y[c];
                        }
                        for c in 0..cols {
                            da[r * cols + c] = y[c] * (grow[c] - dot);
                        }
                    }
                    self.accumulate(grads, *a, &da);
                }
            }
            Op::Rope { a, base } => {
                if self.needs(*a) {
                    let (rows, cols) = (g.rows(), g.cols());
                    let mut da = vec![0.0; rows * cols];
                    for r in 0..rows {
                        // The rotation is orthogonal; the VJP rotates by -θ.
                        rope_rotate_row(
                            g.row(r),
                            -(r as f64),
                            *base,
                            &mut da[r * cols..(r + 1) * cols],
                        );
                    }
                    self.accumulate(grads, *a, &da);
                }
            }
            Op::ConcatRows { parts } => {
                let mut start = 0;
                let cols = g.cols();
                for &p in parts {
                    let prows = self.nodes[p].value.rows();
                    if self.needs(p) {
                        let slice = &g.data()[start * cols..(start + prows) * cols];
                        self.accumulate(grads, p, slice);
                    }
                    start += prows;
                }
            }
            Op::SliceRows { a, start, count } => {
                if self.needs(*a) {
                    let av = &self.nodes[*a].value;
                    let cols = av.cols();
                    let mut da = vec![0.0; av.numel()];
                    da[start * cols..(start + count) * cols].copy_from_slice(g.data());
                    self.accumulate(grads, *a, &da);
                }
            }
            Op::ConcatCols { parts } => {
                let rows = g.rows();
                let cols = g.cols();
                let mut offset = 0;
                for &p in parts {
                    let pc = self.nodes[p].value.cols();
                    if self.needs(p) {
                        let mut dp = vec![0.0; rows * pc];
                        for r in 0..rows {
                            dp[r * pc..(r + 1) * pc]
                                .copy_from_slice(&g.data()[r * cols + offset..r * cols + offset + pc]);
                        }
                        self.accumulate(grads, p, &dp);
                    }
                    offset += pc;
                }
            }
            Op::SliceCols { a, start, count } => {
                if self.needs(*a) {
                    let av = &self.nodes[*a].value;
                    let (rows, cols) = (av.rows(), av.cols());
                    let mut da = vec![0.0; rows * cols];
                    for r in 0..rows {
                        da[r * cols + start..r * cols + start + count]
                            .copy_from_slice(g.row(r));
                    }
                    self.accumulate(grads, *a, &da);
                }
            }
        }
    }

    fn accumulate(&self, grads: &mut [Option<Tensor>], id: NodeId, contribution: &[f64]) {
        let slot = grads[id]
            .get_or_insert_with(|| Tensor::zeros(self.nodes[id].value.shape().to_vec()));
        for (dst, &src) in slot.data_mut().iter_mut().zip(contribution) {
            *dst += src;
        }
    }
}

// ── Raw kernels ─────────────────────────────────────────────────────────

fn matmul_raw(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            let orow = &mut out[i * n..(i + 1) * n];
            for j in 0..n {
                orow[j] += av * brow[j];
            }
        }
    }
    out
}

/// `A [m×n] @ B^T` where `B` is `[k×n]`, producing `[m×k]`.
fn matmul_nt(a: &[f64], b: &[f64], m: usize, n: usize, k: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * k];
    for i in 0..m {
        for j in 0..k {
            let mut acc = 0.0;
            for p in 0..n {
                acc += a[i * n + p] * b[j * n + p];
            }
            out[i * k + j] = acc;
        }
    }
    out
}

/// `A^T @ B` where `A` is `[m×k]` and `B` is `[m×n]`, producing `[k×n]`.
fn matmul_tn(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; k * n];
    for p in 0..m {
        for i in 0..k {
            let av = a[p * k + i];
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            let orow = &mut out[i * n..(i + 1) * n];
            for j in 0..n {
                orow[j] += av * brow[j];
            }
        }
    }
    out
}

fn mean_var(row: &[f64]) -> (f64, f64) {
    let n = row.len() as f64;
    let mut mean = 0.0;
    for &v in row {
        mean += v;
    }
    mean /= n;
    let mut var = 0.0;
    for &v in row {
        let d = v - mean;
        var += d * d;
    }
    (mean, var / n)
}

/// Rotates consecutive coordinate pairs of one row by `pos * base^(-2j/d)`.
pub(crate) fn rope_rotate_row(row: &[f64], pos: f64, base: f64, out: &mut [f64]) {
    let d = row.len();
    for j in 0..d / 2 {
        let theta = pos * base.powf(-2.0 * j as f64 / d as f64);
        let (sin, cos) = theta.sin_cos();
        let (x, y) = (row[2 * j], row[2 * j + 1]);
        out[2 * j] = x * cos - y * sin;
        out[2 * j + 1] = x * sin + y * cos;
    }
}
