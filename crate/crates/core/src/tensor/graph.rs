use super::{gemm_acc, matmul, transpose, Tensor, MASK_SENTINEL};
use crate::error::{Error, Result};

/// Handle to a node recorded on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// One `KL(reference || probs[row, :])` term of a [`Graph::kl_rows`] sum.
#[derive(Debug, Clone, PartialEq)]
pub struct KlTerm {
    pub row: usize,
    pub reference: Vec<f64>,
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    AddBias(Var, Var),
    Add(Var, Var),
    Mul(Var, Var),
    AddConst(Var),
    Scale(Var, f64),
    Relu(Var),
    Sigmoid(Var),
    SoftmaxRows(Var),
    Concat { inputs: Vec<Var>, axis: usize },
    GatherRows { table: Var, ids: Vec<usize> },
    Mask { input: Var, keep: Vec<bool> },
    StackColumns(Vec<Var>),
    PickRows { inputs: Vec<Var>, choice: Vec<usize> },
    Mixture { weights: Var, experts: Vec<Var> },
    KlRows { probs: Var, terms: Vec<KlTerm>, scale: f64 },
    BceMean { pred: Var, labels: Vec<f64>, eps: f64 },
    Sum(Var),
    Mean(Var),
    SumSquares(Var),
    WeightedSum(Vec<(Var, f64)>),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    grad: Option<Vec<f64>>,
    requires_grad: bool,
    op: Op,
}

/// Reverse-mode tape. Nodes are appended in evaluation order, so the node
/// list is always a valid topological order.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
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

    /// A leaf that accumulates gradient.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.push(value, true, Op::Leaf)
    }

    /// A leaf that does not participate in differentiation.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, false, Op::Leaf)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Gradient accumulated by [`Graph::backward`], if any reached this node.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.nodes[v.0].grad.as_deref()
    }

    /// Gradient of a node, or zeros when nothing flowed into it.
    pub fn grad_or_zero(&self, v: Var) -> Vec<f64> {
        match &self.nodes[v.0].grad {
            Some(g) => g.clone(),
            None => vec![0.0; self.nodes[v.0].value.len()],
        }
    }

    fn push(&mut self, value: Tensor, requires_grad: bool, op: Op) -> Var {
        self.nodes.push(Node {
            value,
            grad: None,
            requires_grad,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    fn any_grad(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    fn record(&mut self, value: Tensor, inputs: &[Var], op: Op) -> Var {
        let rg = self.any_grad(inputs);
        self.push(value, rg, op)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = matmul(self.value(a), self.value(b))?;
        Ok(self.record(out, &[a, b], Op::MatMul(a, b)))
    }

    /// `a` (rows×c) plus a bias of length `c` broadcast over rows.
    pub fn add_bias(&mut self, a: Var, bias: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(bias));
        let c = av.cols();
        if bv.len() != c {
            return Err(Error::dim("add_bias", av.shape(), bv.shape()));
        }
        let mut data = av.data().to_vec();
        for row in data.chunks_mut(c) {
            for (x, b) in row.iter_mut().zip(bv.data()) {
                *x += b;
            }
        }
        let out = Tensor::new(av.shape().to_vec(), data)?;
        Ok(self.record(out, &[a, bias], Op::AddBias(a, bias)))
    }

    /// Affine map `x·w + b`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let h = self.matmul(x, w)?;
        self.add_bias(h, b)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.zip(a, b, "add", |x, y| x + y)?;
        Ok(self.record(out, &[a, b], Op::Add(a, b)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.zip(a, b, "mul", |x, y| x * y)?;
        Ok(self.record(out, &[a, b], Op::Mul(a, b)))
    }

    fn zip(&self, a: Var, b: Var, op: &'static str, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape() != bv.shape() {
            return Err(Error::dim(op, av.shape(), bv.shape()));
        }
        let data = av.data().iter().zip(bv.data()).map(|(&x, &y)| f(x, y)).collect();
        Tensor::new(av.shape().to_vec(), data)
    }

    /// Adds a constant tensor of the same shape (used for gate noise).
    pub fn add_const(&mut self, a: Var, c: &Tensor) -> Result<Var> {
        let av = self.value(a);
        if av.shape() != c.shape() {
            return Err(Error::dim("add_const", av.shape(), c.shape()));
        }
        let data = av.data().iter().zip(c.data()).map(|(x, y)| x + y).collect();
        let out = Tensor::new(av.shape().to_vec(), data)?;
        Ok(self.record(out, &[a], Op::AddConst(a)))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let av = self.value(a);
        let out = Tensor {
            shape: av.shape().to_vec(),
            data: av.data().iter().map(|x| x * s).collect(),
        };
        self.record(out, &[a], Op::Scale(a, s))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let av = self.value(a);
        let out = Tensor {
            shape: av.shape().to_vec(),
            data: av.data().iter().map(|&x| x.max(0.0)).collect(),
        };
        self.record(out, &[a], Op::Relu(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let out = super::sigmoid(self.value(a));
        self.record(out, &[a], Op::Sigmoid(a))
    }

    pub fn softmax_rows(&mut self, a: Var) -> Result<Var> {
        let out = super::softmax_rows(self.value(a))?;
        Ok(self.record(out, &[a], Op::SoftmaxRows(a)))
    }

    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Result<Var> {
        let refs: Vec<&Tensor> = inputs.iter().map(|&v| self.value(v)).collect();
        let out = super::concat(&refs, axis)?;
        Ok(self.record(
            out,
            inputs,
            Op::Concat {
                inputs: inputs.to_vec(),
                axis,
            },
        ))
    }

    /// Row lookup: output row `i` is `table[ids[i], :]`.
    pub fn gather_rows(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let tv = self.value(table);
        let (rows, cols) = (tv.rows(), tv.cols());
        let mut data = Vec::with_capacity(ids.len() * cols);
        for &id in ids {
            if id >= rows {
                return Err(Error::Data(format!(
                    "row id {id} out of range for table with {rows} rows"
                )));
            }
            data.extend_from_slice(tv.row(id));
        }
        let out = Tensor::matrix(ids.len(), cols, data)?;
        Ok(self.record(
            out,
            &[table],
            Op::GatherRows {
                table,
                ids: ids.to_vec(),
            },
        ))
    }

    /// Copies entries where `keep` is true and writes [`MASK_SENTINEL`] elsewhere.
    pub fn mask(&mut self, input: Var, keep: Vec<bool>) -> Result<Var> {
        let iv = self.value(input);
        if keep.len() != iv.len() {
            return Err(Error::dim("mask", iv.shape(), &[keep.len()]));
        }
        let data = iv
            .data()
            .iter()
            .zip(&keep)
            .map(|(&x, &k)| if k { x } else { MASK_SENTINEL })
            .collect();
        let out = Tensor::new(iv.shape().to_vec(), data)?;
        Ok(self.record(out, &[input], Op::Mask { input, keep }))
    }

    /// Interleaves `m` tensors of shape B×n into one (B·n)×m tensor with
    /// `out[b·n + k, j] = inputs[j][b, k]`.
    pub fn stack_columns(&mut self, inputs: &[Var]) -> Result<Var> {
        let first = self.value(
            *inputs
                .first()
                .ok_or_else(|| Error::Contract("stack_columns of zero tensors".into()))?,
        );
        let (b, n) = (first.rows(), first.cols());
        let m = inputs.len();
        let first_shape = first.shape().to_vec();
        let mut data = vec![0.0; b * n * m];
        for (j, &v) in inputs.iter().enumerate() {
            let t = self.value(v);
            if t.rows() != b || t.cols() != n {
                return Err(Error::dim("stack_columns", &first_shape, t.shape()));
            }
            for (idx, &x) in t.data().iter().enumerate() {
                data[idx * m + j] = x;
            }
        }
        let out = Tensor::matrix(b * n, m, data)?;
        Ok(self.record(out, inputs, Op::StackColumns(inputs.to_vec())))
    }

    /// Output row `b` is row `b` of `inputs[choice[b]]`.
    pub fn pick_rows(&mut self, inputs: &[Var], choice: &[usize]) -> Result<Var> {
        let first = self.value(
            *inputs
                .first()
                .ok_or_else(|| Error::Contract("pick_rows of zero tensors".into()))?,
        );
        let (b, c) = (first.rows(), first.cols());
        if choice.len() != b {
            return Err(Error::dim("pick_rows", first.shape(), &[choice.len()]));
        }
        let mut data = Vec::with_capacity(b * c);
        for (r, &j) in choice.iter().enumerate() {
            let src = inputs
                .get(j)
                .ok_or_else(|| Error::Contract(format!("branch {j} out of range")))?;
            let t = self.value(*src);
            if t.rows() != b || t.cols() != c {
                return Err(Error::dim("pick_rows", &[b, c], t.shape()));
            }
            data.extend_from_slice(t.row(r));
        }
        let out = Tensor::matrix(b, c, data)?;
        Ok(self.record(
            out,
            inputs,
            Op::PickRows {
                inputs: inputs.to_vec(),
                choice: choice.to_vec(),
            },
        ))
    }

    /// Per-row convex combination: `out[b, :] = Σ_i weights[b, i] · experts[i][b, :]`.
    pub fn mixture(&mut self, weights: Var, experts: &[Var]) -> Result<Var> {
        let wv = self.value(weights);
        let (b, n) = (wv.rows(), wv.cols());
        if n != experts.len() || experts.is_empty() {
            return Err(Error::dim("mixture", wv.shape(), &[experts.len()]));
        }
        let h = self.value(experts[0]).cols();
        let mut data = vec![0.0; b * h];
        for (i, &e) in experts.iter().enumerate() {
            let ev = self.value(e);
            if ev.rows() != b || ev.cols() != h {
                return Err(Error::Config(format!(
                    "expert {i} output shape {:?} differs from expected [{b}, {h}]",
                    ev.shape()
                )));
            }
            for r in 0..b {
                let w = wv.get(r, i);
                if w == 0.0 {
                    continue;
                }
                let out = &mut data[r * h..(r + 1) * h];
                for (o, x) in out.iter_mut().zip(ev.row(r)) {
                    *o += w * x;
                }
            }
        }
        let out = Tensor::matrix(b, h, data)?;
        let mut inputs = vec![weights];
        inputs.extend_from_slice(experts);
        Ok(self.record(
            out,
            &inputs,
            Op::Mixture {
                weights,
                experts: experts.to_vec(),
            },
        ))
    }

    /// `scale · Σ_terms KL(reference || probs[row, :])`, with `0·ln 0 = 0`.
    pub fn kl_rows(&mut self, probs: Var, terms: Vec<KlTerm>, scale: f64) -> Result<Var> {
        let pv = self.value(probs);
        let m = pv.cols();
        let mut total = 0.0;
        for term in &terms {
            if term.row >= pv.rows() || term.reference.len() != m {
                return Err(Error::dim("kl_rows", pv.shape(), &[term.row, term.reference.len()]));
            }
            total += crate::selection::kl_divergence(&term.reference, pv.row(term.row))?;
        }
        let out = Tensor::scalar(scale * total);
        Ok(self.record(out, &[probs], Op::KlRows { probs, terms, scale }))
    }

    /// Mean binary cross-entropy; predictions are clamped to `[eps, 1-eps]`.
    pub fn bce_mean(&mut self, pred: Var, labels: &[f64], eps: f64) -> Result<Var> {
        let pv = self.value(pred);
        if pv.len() != labels.len() || labels.is_empty() {
            return Err(Error::dim("bce_mean", pv.shape(), &[labels.len()]));
        }
        let mut total = 0.0;
        for (&p, &y) in pv.data().iter().zip(labels) {
            total += crate::objective::bce_with_eps(p, y, eps)?;
        }
        let out = Tensor::scalar(total / labels.len() as f64);
        Ok(self.record(
            out,
            &[pred],
            Op::BceMean {
                pred,
                labels: labels.to_vec(),
                eps,
            },
        ))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().sum();
        self.record(Tensor::scalar(s), &[a], Op::Sum(a))
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let av = self.value(a);
        let s = av.data().iter().sum::<f64>() / av.len().max(1) as f64;
        self.record(Tensor::scalar(s), &[a], Op::Mean(a))
    }

    pub fn sum_squares(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().map(|x| x * x).sum();
        self.record(Tensor::scalar(s), &[a], Op::SumSquares(a))
    }

    /// `Σ coeff · term` over scalar terms.
    pub fn weighted_sum(&mut self, terms: &[(Var, f64)]) -> Result<Var> {
        let mut total = 0.0;
        for &(v, c) in terms {
            total += c * self.value(v).item()?;
        }
        let inputs: Vec<Var> = terms.iter().map(|t| t.0).collect();
        Ok(self.record(
            Tensor::scalar(total),
            &inputs,
            Op::WeightedSum(terms.to_vec()),
        ))
    }

    /// Reverse sweep from a scalar `loss`, accumulating into every node that
    /// requires grad.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if loss.0 >= self.nodes.len() {
            return Err(Error::Contract("loss is not on this tape".into()));
        }
        if !self.nodes[loss.0].value.is_scalar() {
            return Err(Error::Contract(format!(
                "backward requires a scalar loss, got shape {:?}",
                self.nodes[loss.0].value.shape()
            )));
        }
        if !self.nodes[loss.0].requires_grad {
            return Ok(());
        }
        self.accumulate(loss, &[1.0]);
        for idx in (0..=loss.0).rev() {
            if !self.nodes[idx].requires_grad || matches!(self.nodes[idx].op, Op::Leaf) {
                continue;
            }
            let Some(g) = self.nodes[idx].grad.take() else {
                continue;
            };
            self.propagate(idx, &g);
            self.nodes[idx].grad = Some(g);
        }
        Ok(())
    }

    fn accumulate(&mut self, v: Var, g: &[f64]) {
        let node = &mut self.nodes[v.0];
        if !node.requires_grad {
            return;
        }
        match &mut node.grad {
            Some(acc) => {
                for (a, x) in acc.iter_mut().zip(g) {
                    *a += x;
                }
            }
            None => node.grad = Some(g.to_vec()),
        }
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn propagate(&mut self, idx: usize, g: &[f64]) {
        // The op is moved out temporarily so inputs can be borrowed mutably.
        let op = std::mem::replace(&mut self.nodes[idx].op, Op::Leaf);
        match &op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (av, bv) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
                let (p, q, r) = (av.rows(), av.cols(), bv.cols());
                if self.wants(*a) {
                    // dA = dC · Bᵀ
                    let bt = transpose(bv.data(), q, r);
                    let mut da = vec![0.0; p * q];
                    gemm_acc(g, &bt, p, r, q, &mut da);
                    self.accumulate(*a, &da);
                }
                let av = &self.nodes[a.0].value;
                if self.wants(*b) {
                    // dB = Aᵀ · dC
                    let at = transpose(av.data(), p, q);
                    let mut db = vec![0.0; q * r];
                    gemm_acc(&at, g, q, p, r, &mut db);
                    self.accumulate(*b, &db);
                }
            }
            Op::AddBias(a, bias) => {
                self.accumulate(*a, g);
                if self.wants(*bias) {
                    let c = self.nodes[bias.0].value.len();
                    let mut db = vec![0.0; c];
                    for row in g.chunks(c) {
                        for (d, x) in db.iter_mut().zip(row) {
                            *d += x;
                        }
                    }
                    self.accumulate(*bias, &db);
                }
            }
            Op::Add(a, b) => {
                self.accumulate(*a, g);
                self.accumulate(*b, g);
            }
            Op::Mul(a, b) => {
                if self.wants(*a) {
                    let da: Vec<f64> = g
                        .iter()
                        .zip(self.nodes[b.0].value.data())
                        .map(|(x, y)| x * y)
                        .collect();
                    self.accumulate(*a, &da);
                }
                if self.wants(*b) {
                    let db: Vec<f64> = g
                        .iter()
                        .zip(self.nodes[a.0].value.data())
                        .map(|(x, y)| x * y)
                        .collect();
                    self.accumulate(*b, &db);
                }
            }
            Op::AddConst(a) => self.accumulate(*a, g),
            Op::Scale(a, s) => {
                let da: Vec<f64> = g.iter().map(|x| x * s).collect();
                self.accumulate(*a, &da);
            }
            Op::Relu(a) => {
                let da: Vec<f64> = g
                    .iter()
                    .zip(self.nodes[a.0].value.data())
                    .map(|(&x, &v)| if v > 0.0 { x } else { 0.0 })
                    .collect();
                self.accumulate(*a, &da);
            }
            Op::Sigmoid(a) => {
                let y = self.nodes[idx].value.data();
                let da: Vec<f64> = g.iter().zip(y).map(|(x, y)| x * y * (1.0 - y)).collect();
                self.accumulate(*a, &da);
            }
            Op::SoftmaxRows(a) => {
                let y = &self.nodes[idx].value;
                let c = y.cols();
                let mut da = vec![0.0; y.len()];
                for ((drow, grow), yrow) in da.chunks_mut(c).zip(g.chunks(c)).zip(y.data().chunks(c)) {
                    let dot: f64 = grow.iter().zip(yrow).map(|(x, y)| x * y).sum();
                    for ((d, x), y) in drow.iter_mut().zip(grow).zip(yrow) {
                        *d = y * (x - dot);
                    }
                }
                self.accumulate(*a, &da);
            }
            Op::Concat { inputs, axis } => {
                let out_cols = self.nodes[idx].value.cols();
                let rank = self.nodes[idx].value.shape().len();
                let mut offset = 0;
                for &v in inputs {
                    let t = &self.nodes[v.0].value;
                    let piece: Vec<f64> = if rank == 2 && *axis == 1 {
                        let (rows, cols) = (t.rows(), t.cols());
                        let mut p = Vec::with_capacity(rows * cols);
                        for r in 0..rows {
                            let start = r * out_cols + offset;
                            p.extend_from_slice(&g[start..start + cols]);
                        }
                        offset += cols;
                        p
                    } else {
                        let n = t.len();
                        let p = g[offset..offset + n].to_vec();
                        offset += n;
                        p
                    };
                    self.accumulate(v, &piece);
                }
            }
            Op::GatherRows { table, ids } => {
                if self.wants(*table) {
                    let t = &self.nodes[table.0].value;
                    let c = t.cols();
                    let mut dt = vec![0.0; t.len()];
                    for (r, &id) in ids.iter().enumerate() {
                        for (d, x) in dt[id * c..(id + 1) * c].iter_mut().zip(&g[r * c..(r + 1) * c]) {
                            *d += x;
                        }
                    }
                    self.accumulate(*table, &dt);
                }
            }
            Op::Mask { input, keep } => {
                let da: Vec<f64> = g
                    .iter()
                    .zip(keep)
                    .map(|(&x, &k)| if k { x } else { 0.0 })
                    .collect();
                self.accumulate(*input, &da);
            }
            Op::StackColumns(inputs) => {
                let m = inputs.len();
                for (j, &v) in inputs.iter().enumerate() {
                    if !self.wants(v) {
                        continue;
                    }
                    let n = self.nodes[v.0].value.len();
                    let dv: Vec<f64> = (0..n).map(|i| g[i * m + j]).collect();
                    self.accumulate(v, &dv);
                }
            }
            Op::PickRows { inputs, choice } => {
                let c = self.nodes[idx].value.cols();
                let len = self.nodes[idx].value.len();
                for (j, &v) in inputs.iter().enumerate() {
                    if !self.wants(v) {
                        continue;
                    }
                    let mut dv = vec![0.0; len];
                    let mut touched = false;
                    for (r, &ch) in choice.iter().enumerate() {
                        if ch == j {
                            dv[r * c..(r + 1) * c].copy_from_slice(&g[r * c..(r + 1) * c]);
                            touched = true;
                        }
                    }
                    if touched {
                        self.accumulate(v, &dv);
                    }
                }
            }
            Op::Mixture { weights, experts } => {
                let h = self.nodes[idx].value.cols();
                let b = self.nodes[idx].value.rows();
                let n = experts.len();
                if self.wants(*weights) {
                    let mut dw = vec![0.0; b * n];
                    for (i, e) in experts.iter().enumerate() {
                        let ev = &self.nodes[e.0].value;
                        for r in 0..b {
                            dw[r * n + i] = ev.row(r).iter().zip(&g[r * h..(r + 1) * h]).map(|(x, y)| x * y).sum();
                        }
                    }
                    self.accumulate(*weights, &dw);
                }
                for (i, &e) in experts.iter().enumerate() {
                    if !self.wants(e) {
                        continue;
                    }
                    let wv = &self.nodes[weights.0].value;
                    let mut de = vec![0.0; b * h];
                    for r in 0..b {
                        let w = wv.get(r, i);
                        if w == 0.0 {
                            continue;
                        }
                        for (d, x) in de[r * h..(r + 1) * h].iter_mut().zip(&g[r * h..(r + 1) * h]) {
                            *d = w * x;
                        }
                    }
                    self.accumulate(e, &de);
                }
            }
            Op::KlRows { probs, terms, scale } => {
                let pv = &self.nodes[probs.0].value;
                let m = pv.cols();
                let mut dp = vec![0.0; pv.len()];
                for term in terms {
                    for (j, &r) in term.reference.iter().enumerate() {
                        if r > 0.0 {
                            dp[term.row * m + j] -= g[0] * scale * r / pv.get(term.row, j);
                        }
                    }
                }
                self.accumulate(*probs, &dp);
            }
            Op::BceMean { pred, labels, eps } => {
                let pv = &self.nodes[pred.0].value;
                let n = labels.len() as f64;
                let dp: Vec<f64> = pv
                    .data()
                    .iter()
                    .zip(labels)
                    .map(|(&p, &y)| {
                        if p < *eps || p > 1.0 - eps {
                            0.0
                        } else {
                            g[0] * (-y / p + (1.0 - y) / (1.0 - p)) / n
                        }
                    })
                    .collect();
                self.accumulate(*pred, &dp);
            }
            Op::Sum(a) => {
                let n = self.nodes[a.0].value.len();
                self.accumulate(*a, &vec![g[0]; n]);
            }
            Op::Mean(a) => {
                let n = self.nodes[a.0].value.len();
                self.accumulate(*a, &vec![g[0] / n as f64; n]);
            }
            Op::SumSquares(a) => {
                let da: Vec<f64> = self.nodes[a.0].value.data().iter().map(|x| 2.0 * x * g[0]).collect();
                self.accumulate(*a, &da);
            }
            Op::WeightedSum(terms) => {
                for &(v, c) in terms {
                    self.accumulate(v, &[c * g[0]]);
                }
            }
        }
        self.nodes[idx].op = op;
    }
}
