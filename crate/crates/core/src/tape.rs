//! Reverse-mode automatic differentiation over a recorded operation tape.
//!
//! A [`Tape`] owns every tensor produced during one forward pass. Operations
//! compute their value eagerly, record their inputs, and return a [`Var`]
//! handle; [`Tape::backward`] replays the recording in reverse, accumulating
//! gradients additively across fan-out. Tapes are cheap and short-lived: one
//! per training step or per inference call.
//!
//! Reductions that run over attention keys (softmax denominators and the
//! weight-times-value contraction) use order-independent summation so that
//! permuting instance rows permutes outputs bit-exactly.

use rand::Rng;

use crate::error::{Error, Result};
use crate::numeric::{exact_sum, log1p_exp_neg_abs, sigmoid};
use crate::tensor::Tensor;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Clone)]
enum Op {
    Leaf,
    /// `a [m×k] · b [k×n]`. The forward pass may use order-independent
    /// inner sums; the backward pass always contracts in index order, which
    /// is deterministic because the graph fixes the operand layout.
    MatMul {
        a: Var,
        b: Var,
    },
    /// `a [m×k] · bᵀ` with `b [n×k]`.
    MatMulNt {
        a: Var,
        b: Var,
    },
    Add {
        a: Var,
        b: Var,
    },
    /// Row-broadcast bias add: `x [m×d] + b [d]`.
    AddBias {
        x: Var,
        b: Var,
    },
    Scale {
        x: Var,
        c: f64,
    },
    Relu {
        x: Var,
    },
    /// Row-wise softmax with optional column (key) mask; masked columns get
    /// exactly zero weight and are excluded from the normalization.
    SoftmaxRows {
        x: Var,
        key_valid: Option<Vec<bool>>,
    },
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        eps: f64,
    },
    /// Inverted dropout; `mask` entries are `0` or `1/keep`.
    Dropout {
        x: Var,
        mask: Vec<f64>,
    },
    /// Mean over one axis of a rank-2 tensor, reduced axis kept with size 1.
    MeanAxis {
        x: Var,
        axis: usize,
    },
    SliceCols {
        x: Var,
        start: usize,
        len: usize,
    },
    ConcatCols {
        parts: Vec<Var>,
        widths: Vec<usize>,
    },
    SumAll {
        x: Var,
    },
    /// Per-class mean of the top scoring valid rows; `picked[c]` lists the
    /// selected row indices for class `c` in descending-score order.
    TopKMeanCols {
        x: Var,
        picked: Vec<Vec<usize>>,
        k_eff: usize,
    },
    /// Mean element-wise binary cross-entropy with logits over valid rows.
    BceWithLogitsMean {
        x: Var,
        targets: Vec<f64>,
        row_valid: Option<Vec<bool>>,
        count: usize,
    },
    /// Softmax cross-entropy of a single logit row against a one-hot target.
    SoftmaxCrossEntropy {
        x: Var,
        target: Vec<f64>,
    },
}

struct Node {
    tensor: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Recorded computation graph for one forward/backward cycle.
pub struct Tape {
    nodes: Vec<Node>,
    backward_done: bool,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            backward_done: false,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Registers an input tensor. Gradients accumulate for it iff
    /// `tensor.requires_grad` is set.
    pub fn leaf(&mut self, tensor: Tensor) -> Var {
        let needs = tensor.requires_grad;
        self.push(tensor, Op::Leaf, needs)
    }

    /// Value of a node.
    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].tensor
    }

    /// Accumulated gradient of a node, if backward produced one.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.nodes[v.0].tensor.grad.as_deref()
    }

    fn push(&mut self, tensor: Tensor, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            tensor,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn t(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].tensor
    }

    fn require_rank2(&self, v: Var, what: &str) -> Result<(usize, usize)> {
        let t = self.t(v);
        if t.rank() != 2 {
            return Err(Error::Shape(format!(
                "{what} requires a rank-2 tensor, got shape {:?}",
                t.shape()
            )));
        }
        Ok((t.shape()[0], t.shape()[1]))
    }

    // ---- operations -----------------------------------------------------

    /// Matrix product `a · b`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, false)
    }

    /// Matrix product with order-independent inner summation. Semantically
    /// identical to [`Tape::matmul`]; used where the contraction runs over a
    /// permutable instance axis.
    pub fn matmul_exact(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, true)
    }

    fn matmul_impl(&mut self, a: Var, b: Var, exact: bool) -> Result<Var> {
        let (m, k) = self.require_rank2(a, "matmul lhs")?;
        let (k2, n) = self.require_rank2(b, "matmul rhs")?;
        if k != k2 {
            return Err(Error::Shape(format!(
                "matmul inner dims differ: lhs is {m}x{k}, rhs is {k2}x{n}"
            )));
        }
        let out = if exact {
            mm_exact(self.t(a).data(), m, k, self.t(b).data(), n)
        } else {
            mm(self.t(a).data(), m, k, self.t(b).data(), n)
        };
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(Tensor::new(&[m, n], out)?, Op::MatMul { a, b }, needs))
    }

    /// Matrix product `a · bᵀ` (`b` given row-major as `[n×k]`).
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.require_rank2(a, "matmul_nt lhs")?;
        let (n, k2) = self.require_rank2(b, "matmul_nt rhs")?;
        if k != k2 {
            return Err(Error::Shape(format!(
                "matmul_nt contraction dims differ: lhs is {m}x{k}, rhs is {n}x{k2}"
            )));
        }
        let out = mm_nt(self.t(a).data(), m, k, self.t(b).data(), n);
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(Tensor::new(&[m, n], out)?, Op::MatMulNt { a, b }, needs))
    }

    /// Element-wise sum of two same-shape tensors.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.t(a).shape() != self.t(b).shape() {
            return Err(Error::Shape(format!(
                "add requires equal shapes, got {:?} and {:?}",
                self.t(a).shape(),
                self.t(b).shape()
            )));
        }
        let data: Vec<f64> = self
            .t(a)
            .data()
            .iter()
            .zip(self.t(b).data())
            .map(|(x, y)| x + y)
            .collect();
        let shape = self.t(a).shape().to_vec();
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(Tensor::new(&shape, data)?, Op::Add { a, b }, needs))
    }

    /// Adds a rank-1 bias to every row of a rank-2 tensor.
    pub fn add_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        let (m, d) = self.require_rank2(x, "add_bias input")?;
        let bt = self.t(b);
        if bt.rank() != 1 || bt.numel() != d {
            return Err(Error::Shape(format!(
                "add_bias bias must be rank-1 of length {d}, got shape {:?}",
                bt.shape()
            )));
        }
        let mut data = self.t(x).data().to_vec();
        for i in 0..m {
            for (j, bv) in self.t(b).data().iter().enumerate() {
                data[i * d + j] += bv;
            }
        }
        let needs = self.needs(x) || self.needs(b);
        Ok(self.push(Tensor::new(&[m, d], data)?, Op::AddBias { x, b }, needs))
    }

    /// Multiplies every element by a finite constant.
    pub fn scale(&mut self, x: Var, c: f64) -> Result<Var> {
        if !c.is_finite() {
            return Err(Error::Config(format!(
                "scale factor must be finite, got {c}"
            )));
        }
        let data: Vec<f64> = self.t(x).data().iter().map(|v| v * c).collect();
        let shape = self.t(x).shape().to_vec();
        let needs = self.needs(x);
        Ok(self.push(Tensor::new(&shape, data)?, Op::Scale { x, c }, needs))
    }

    /// Element-wise `max(0, x)`.
    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let data: Vec<f64> = self.t(x).data().iter().map(|v| v.max(0.0)).collect();
        let shape = self.t(x).shape().to_vec();
        let needs = self.needs(x);
        Ok(self.push(Tensor::new(&shape, data)?, Op::Relu { x }, needs))
    }

    /// Row-wise softmax over a rank-2 tensor (all columns valid).
    pub fn softmax_rows(&mut self, x: Var) -> Result<Var> {
        self.softmax_rows_masked(x, None)
    }

    /// Row-wise softmax with an optional column-validity mask. Masked
    /// columns receive exactly zero weight and never enter the
    /// normalization, so their content cannot influence the result.
    pub fn softmax_rows_masked(&mut self, x: Var, key_valid: Option<&[bool]>) -> Result<Var> {
        let (m, n) = self.require_rank2(x, "softmax input")?;
        if let Some(mask) = key_valid {
            if mask.len() != n {
                return Err(Error::Shape(format!(
                    "softmax key mask length {} does not match {n} columns",
                    mask.len()
                )));
            }
            if !mask.iter().any(|&v| v) {
                return Err(Error::Data("softmax over zero valid keys".into()));
            }
        }
        let data = softmax_forward(self.t(x).data(), m, n, key_valid);
        let needs = self.needs(x);
        Ok(self.push(
            Tensor::new(&[m, n], data)?,
            Op::SoftmaxRows {
                x,
                key_valid: key_valid.map(|m| m.to_vec()),
            },
            needs,
        ))
    }

    /// Row-wise layer normalization with learned gain and bias.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let (m, d) = self.require_rank2(x, "layer_norm input")?;
        for (v, what) in [(gain, "gain"), (bias, "bias")] {
            let t = self.t(v);
            if t.rank() != 1 || t.numel() != d {
                return Err(Error::Shape(format!(
                    "layer_norm {what} must be rank-1 of length {d}, got {:?}",
                    t.shape()
                )));
            }
        }
        if eps.is_nan() || eps <= 0.0 {
            return Err(Error::Config(format!(
                "layer_norm eps must be positive, got {eps}"
            )));
        }
        let mut data = vec![0.0; m * d];
        for i in 0..m {
            let row = &self.t(x).data()[i * d..(i + 1) * d];
            let (xhat, _inv) = layer_norm_row(row, eps);
            for j in 0..d {
                data[i * d + j] = self.t(gain).data()[j] * xhat[j] + self.t(bias).data()[j];
            }
        }
        let needs = self.needs(x) || self.needs(gain) || self.needs(bias);
        Ok(self.push(
            Tensor::new(&[m, d], data)?,
            Op::LayerNorm { x, gain, bias, eps },
            needs,
        ))
    }

    /// Inverted dropout. Identity when `training` is false or `rate` is 0;
    /// otherwise keeps each element with probability `1 - rate` and scales
    /// survivors by `1/(1 - rate)`. Rates outside `[0, 1)` are rejected.
    pub fn dropout<R: Rng>(
        &mut self,
        x: Var,
        rate: f64,
        training: bool,
        rng: &mut R,
    ) -> Result<Var> {
        if !(0.0..1.0).contains(&rate) {
            return Err(Error::Config(format!(
                "dropout rate must be in [0, 1), got {rate}"
            )));
        }
        if !training || rate == 0.0 {
            return Ok(x);
        }
        let keep = 1.0 - rate;
        let inv = 1.0 / keep;
        let mask: Vec<f64> = (0..self.t(x).numel())
            .map(|_| if rng.gen::<f64>() < keep { inv } else { 0.0 })
            .collect();
        let data: Vec<f64> = self
            .t(x)
            .data()
            .iter()
            .zip(&mask)
            .map(|(v, m)| v * m)
            .collect();
        let shape = self.t(x).shape().to_vec();
        let needs = self.needs(x);
        Ok(self.push(Tensor::new(&shape, data)?, Op::Dropout { x, mask }, needs))
    }

    /// Mean over one axis of a rank-2 tensor; the reduced axis keeps size 1.
    pub fn mean_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let (m, n) = self.require_rank2(x, "mean_axis input")?;
        if axis > 1 {
            return Err(Error::Shape(format!(
                "mean_axis axis must be 0 or 1, got {axis}"
            )));
        }
        let xd = self.t(x).data();
        let (shape, data) = if axis == 0 {
            let mut out = vec![0.0; n];
            for i in 0..m {
                for j in 0..n {
                    out[j] += xd[i * n + j];
                }
            }
            for v in &mut out {
                *v /= m as f64;
            }
            (vec![1, n], out)
        } else {
            let mut out = vec![0.0; m];
            for i in 0..m {
                out[i] = xd[i * n..(i + 1) * n].iter().sum::<f64>() / n as f64;
            }
            (vec![m, 1], out)
        };
        let needs = self.needs(x);
        Ok(self.push(Tensor::new(&shape, data)?, Op::MeanAxis { x, axis }, needs))
    }

    /// Column slice `[start, start+len)` of a rank-2 tensor.
    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (m, n) = self.require_rank2(x, "slice_cols input")?;
        if len == 0 || start + len > n {
            return Err(Error::Shape(format!(
                "slice_cols [{start}, {}) out of range for {n} columns",
                start + len
            )));
        }
        let xd = self.t(x).data();
        let mut data = Vec::with_capacity(m * len);
        for i in 0..m {
            data.extend_from_slice(&xd[i * n + start..i * n + start + len]);
        }
        let needs = self.needs(x);
        Ok(self.push(
            Tensor::new(&[m, len], data)?,
            Op::SliceCols { x, start, len },
            needs,
        ))
    }

    /// Concatenates rank-2 tensors with equal row counts along columns.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::Shape("concat_cols needs at least one part".into()));
        }
        let (m, _) = self.require_rank2(parts[0], "concat_cols part")?;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (mp, np) = self.require_rank2(p, "concat_cols part")?;
            if mp != m {
                return Err(Error::Shape(format!(
                    "concat_cols row counts differ: {m} vs {mp}"
                )));
            }
            widths.push(np);
        }
        let total: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(m * total);
        for i in 0..m {
            for (&p, &w) in parts.iter().zip(&widths) {
                let pd = self.t(p).data();
                data.extend_from_slice(&pd[i * w..(i + 1) * w]);
            }
        }
        let needs = parts.iter().any(|&p| self.needs(p));
        Ok(self.push(
            Tensor::new(&[m, total], data)?,
            Op::ConcatCols {
                parts: parts.to_vec(),
                widths,
            },
            needs,
        ))
    }

    /// Sum of all elements, as a rank-1 scalar.
    pub fn sum_all(&mut self, x: Var) -> Result<Var> {
        let total = exact_sum(self.t(x).data().iter().copied());
        let needs = self.needs(x);
        Ok(self.push(Tensor::scalar(total)?, Op::SumAll { x }, needs))
    }

    /// Per-class mean of the `k` highest scoring valid rows of `x [m×c]`,
    /// producing `[1×c]`. `k` clamps to the valid-row count; ties prefer the
    /// lower row index; gradient flows only to the selected rows.
    pub fn topk_mean_cols(&mut self, x: Var, k: usize, row_valid: &[bool]) -> Result<Var> {
        let (m, c) = self.require_rank2(x, "topk_mean_cols input")?;
        if row_valid.len() != m {
            return Err(Error::Shape(format!(
                "topk row mask length {} does not match {m} rows",
                row_valid.len()
            )));
        }
        let (picked, pooled, k_eff) = topk_select(self.t(x).data(), m, c, row_valid, k)?;
        let needs = self.needs(x);
        Ok(self.push(
            Tensor::new(&[1, c], pooled)?,
            Op::TopKMeanCols { x, picked, k_eff },
            needs,
        ))
    }

    /// Mean element-wise binary cross-entropy with logits over valid rows of
    /// `x [m×c]`; targets must lie in `[0, 1]`.
    pub fn bce_with_logits_mean(
        &mut self,
        x: Var,
        targets: &[f64],
        row_valid: Option<&[bool]>,
    ) -> Result<Var> {
        let (m, c) = self.require_rank2(x, "bce input")?;
        if targets.len() != m * c {
            return Err(Error::Shape(format!(
                "bce targets length {} does not match {m}x{c} logits",
                targets.len()
            )));
        }
        if let Some(bad) = targets.iter().find(|t| !(0.0..=1.0).contains(*t)) {
            return Err(Error::Data(format!("bce target {bad} outside [0, 1]")));
        }
        if let Some(mask) = row_valid {
            if mask.len() != m {
                return Err(Error::Shape(format!(
                    "bce row mask length {} does not match {m} rows",
                    mask.len()
                )));
            }
        }
        let valid_rows = row_valid.map_or(m, |mask| mask.iter().filter(|&&v| v).count());
        if valid_rows == 0 {
            return Err(Error::Data("bce loss over zero valid rows".into()));
        }
        let count = valid_rows * c;
        let xd = self.t(x).data();
        let mut total = 0.0;
        for i in 0..m {
            if row_valid.is_none_or(|mask| mask[i]) {
                for j in 0..c {
                    let z = xd[i * c + j];
                    let y = targets[i * c + j];
                    total += z.max(0.0) - z * y + log1p_exp_neg_abs(z);
                }
            }
        }
        let needs = self.needs(x);
        Ok(self.push(
            Tensor::scalar(total / count as f64)?,
            Op::BceWithLogitsMean {
                x,
                targets: targets.to_vec(),
                row_valid: row_valid.map(|s| s.to_vec()),
                count,
            },
            needs,
        ))
    }

    /// Softmax cross-entropy of a `[1×c]` logit row against a one-hot target.
    pub fn softmax_cross_entropy(&mut self, x: Var, target: &[f64]) -> Result<Var> {
        let (m, c) = self.require_rank2(x, "softmax_cross_entropy input")?;
        if m != 1 {
            return Err(Error::Shape(format!(
                "softmax_cross_entropy expects a single logit row, got {m} rows"
            )));
        }
        if target.len() != c {
            return Err(Error::Shape(format!(
                "softmax_cross_entropy target length {} does not match {c} classes",
                target.len()
            )));
        }
        let ones = target.iter().filter(|&&v| v == 1.0).count();
        if ones != 1 || target.iter().any(|&v| v != 0.0 && v != 1.0) {
            return Err(Error::Data(format!(
                "softmax_cross_entropy target must be one-hot, got {target:?}"
            )));
        }
        let xd = self.t(x).data();
        let mx = xd.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        let lse = mx + xd.iter().map(|v| (v - mx).exp()).sum::<f64>().ln();
        let picked: f64 = xd.iter().zip(target).map(|(v, y)| v * y).sum();
        let needs = self.needs(x);
        Ok(self.push(
            Tensor::scalar(lse - picked)?,
            Op::SoftmaxCrossEntropy {
                x,
                target: target.to_vec(),
            },
            needs,
        ))
    }

    // ---- backward -------------------------------------------------------

    /// Reverse pass from a scalar loss; accumulates gradients for every
    /// `requires_grad` tensor the loss depends on. Runs at most once per tape.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.backward_done {
            return Err(Error::Usage("backward already ran on this tape".into()));
        }
        if self.t(loss).numel() != 1 {
            return Err(Error::Usage(format!(
                "backward requires a scalar loss, got shape {:?}",
                self.t(loss).shape()
            )));
        }
        self.backward_done = true;
        if !self.needs(loss) {
            return Ok(());
        }
        self.ensure_grad(loss);
        self.nodes[loss.0].tensor.grad.as_mut().unwrap()[0] = 1.0;

        for id in (0..=loss.0).rev() {
            if !self.nodes[id].needs_grad || self.nodes[id].tensor.grad.is_none() {
                continue;
            }
            let g = self.nodes[id].tensor.grad.clone().unwrap();
            let op = self.nodes[id].op.clone();
            match op {
                Op::Leaf => {}
                Op::MatMul { a, b } => {
                    let (m, k) = (self.t(a).shape()[0], self.t(a).shape()[1]);
                    let n = self.t(b).shape()[1];
                    if self.needs(a) {
                        let da = mm_nt(&g, m, n, self.t(b).data(), k);
                        self.add_grad(a, &da);
                    }
                    if self.needs(b) {
                        let db = mm_tn(self.t(a).data(), m, k, &g, n);
                        self.add_grad(b, &db);
                    }
                }
                Op::MatMulNt { a, b } => {
                    let (m, k) = (self.t(a).shape()[0], self.t(a).shape()[1]);
                    let n = self.t(b).shape()[0];
                    if self.needs(a) {
                        let da = mm(&g, m, n, self.t(b).data(), k);
                        self.add_grad(a, &da);
                    }
                    if self.needs(b) {
                        let db = mm_tn(&g, m, n, self.t(a).data(), k);
                        self.add_grad(b, &db);
                    }
                }
                Op::Add { a, b } => {
                    if self.needs(a) {
                        self.add_grad(a, &g);
                    }
                    if self.needs(b) {
                        self.add_grad(b, &g);
                    }
                }
                Op::AddBias { x, b } => {
                    let (m, d) = (self.t(x).shape()[0], self.t(x).shape()[1]);
                    if self.needs(x) {
                        self.add_grad(x, &g);
                    }
                    if self.needs(b) {
                        let mut db = vec![0.0; d];
                        for i in 0..m {
                            for j in 0..d {
                                db[j] += g[i * d + j];
                            }
                        }
                        self.add_grad(b, &db);
                    }
                }
                Op::Scale { x, c } => {
                    if self.needs(x) {
                        let dx: Vec<f64> = g.iter().map(|v| v * c).collect();
                        self.add_grad(x, &dx);
                    }
                }
                Op::Relu { x } => {
                    if self.needs(x) {
                        let dx: Vec<f64> = self
                            .t(x)
                            .data()
                            .iter()
                            .zip(&g)
                            .map(|(v, gv)| if *v > 0.0 { *gv } else { 0.0 })
                            .collect();
                        self.add_grad(x, &dx);
                    }
                }
                Op::SoftmaxRows { x, key_valid } => {
                    if self.needs(x) {
                        let w = self.nodes[id].tensor.data();
                        let (m, n) = (self.t(x).shape()[0], self.t(x).shape()[1]);
                        let mut dx = vec![0.0; m * n];
                        for i in 0..m {
                            let row_w = &w[i * n..(i + 1) * n];
                            let row_g = &g[i * n..(i + 1) * n];
                            let dot = exact_sum(
                                (0..n)
                                    .filter(|&j| key_valid.as_ref().is_none_or(|mk| mk[j]))
                                    .map(|j| row_g[j] * row_w[j]),
                            );
                            for j in 0..n {
                                if key_valid.as_ref().is_none_or(|mk| mk[j]) {
                                    dx[i * n + j] = row_w[j] * (row_g[j] - dot);
                                }
                            }
                        }
                        self.add_grad(x, &dx);
                    }
                }
                Op::LayerNorm { x, gain, bias, eps } => {
                    let (m, d) = (self.t(x).shape()[0], self.t(x).shape()[1]);
                    let gaind = self.t(gain).data().to_vec();
                    let mut dx = vec![0.0; m * d];
                    let mut dgain = vec![0.0; d];
                    let mut dbias = vec![0.0; d];
                    for i in 0..m {
                        let row = &self.t(x).data()[i * d..(i + 1) * d];
                        let (xhat, inv) = layer_norm_row(row, eps);
                        let gr = &g[i * d..(i + 1) * d];
                        let ghat: Vec<f64> = gr.iter().zip(&gaind).map(|(a, b)| a * b).collect();
                        let mg = ghat.iter().sum::<f64>() / d as f64;
                        let mgx =
                            ghat.iter().zip(&xhat).map(|(a, b)| a * b).sum::<f64>() / d as f64;
                        for j in 0..d {
                            dx[i * d + j] = inv * (ghat[j] - mg - xhat[j] * mgx);
                            dgain[j] += gr[j] * xhat[j];
                            dbias[j] += gr[j];
                        }
                    }
                    if self.needs(x) {
                        self.add_grad(x, &dx);
                    }
                    if self.needs(gain) {
                        self.add_grad(gain, &dgain);
                    }
                    if self.needs(bias) {
                        self.add_grad(bias, &dbias);
                    }
                }
                Op::Dropout { x, mask } => {
                    if self.needs(x) {
                        let dx: Vec<f64> = g.iter().zip(&mask).map(|(gv, m)| gv * m).collect();
                        self.add_grad(x, &dx);
                    }
                }
                Op::MeanAxis { x, axis } => {
                    if self.needs(x) {
                        let (m, n) = (self.t(x).shape()[0], self.t(x).shape()[1]);
                        let mut dx = vec![0.0; m * n];
                        if axis == 0 {
                            for i in 0..m {
                                for j in 0..n {
                                    dx[i * n + j] = g[j] / m as f64;
                                }
                            }
                        } else {
                            for i in 0..m {
                                for j in 0..n {
                                    dx[i * n + j] = g[i] / n as f64;
                                }
                            }
                        }
                        self.add_grad(x, &dx);
                    }
                }
                Op::SliceCols { x, start, len } => {
                    if self.needs(x) {
                        let (m, n) = (self.t(x).shape()[0], self.t(x).shape()[1]);
                        let mut dx = vec![0.0; m * n];
                        for i in 0..m {
                            for j in 0..len {
                                dx[i * n + start + j] = g[i * len + j];
                            }
                        }
                        self.add_grad(x, &dx);
                    }
                }
                Op::ConcatCols { parts, widths } => {
                    let m = self.nodes[id].tensor.shape()[0];
                    let total: usize = widths.iter().sum();
                    let mut offset = 0;
                    for (&p, &w) in parts.iter().zip(&widths) {
                        if self.needs(p) {
                            let mut dp = vec![0.0; m * w];
                            for i in 0..m {
                                dp[i * w..(i + 1) * w].copy_from_slice(
                                    &g[i * total + offset..i * total + offset + w],
                                );
                            }
                            self.add_grad(p, &dp);
                        }
                        offset += w;
                    }
                }
                Op::SumAll { x } => {
                    if self.needs(x) {
                        let dx = vec![g[0]; self.t(x).numel()];
                        self.add_grad(x, &dx);
                    }
                }
                Op::TopKMeanCols { x, picked, k_eff } => {
                    if self.needs(x) {
                        let (m, c) = (self.t(x).shape()[0], self.t(x).shape()[1]);
                        let mut dx = vec![0.0; m * c];
                        for (cls, rows) in picked.iter().enumerate() {
                            for &r in rows {
                                dx[r * c + cls] += g[cls] / k_eff as f64;
                            }
                        }
                        self.add_grad(x, &dx);
                    }
                }
                Op::BceWithLogitsMean {
                    x,
                    targets,
                    row_valid,
                    count,
                } => {
                    if self.needs(x) {
                        let (m, c) = (self.t(x).shape()[0], self.t(x).shape()[1]);
                        let xd = self.t(x).data();
                        let mut dx = vec![0.0; m * c];
                        for i in 0..m {
                            if row_valid.as_ref().is_none_or(|mask| mask[i]) {
                                for j in 0..c {
                                    let z = xd[i * c + j];
                                    dx[i * c + j] =
                                        (sigmoid(z) - targets[i * c + j]) * g[0] / count as f64;
                                }
                            }
                        }
                        self.add_grad(x, &dx);
                    }
                }
                Op::SoftmaxCrossEntropy { x, target } => {
                    if self.needs(x) {
                        let xd = self.t(x).data();
                        let mx = xd.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b));
                        let exps: Vec<f64> = xd.iter().map(|v| (v - mx).exp()).collect();
                        let denom: f64 = exps.iter().sum();
                        let dx: Vec<f64> = exps
                            .iter()
                            .zip(&target)
                            .map(|(e, y)| (e / denom - y) * g[0])
                            .collect();
                        self.add_grad(x, &dx);
                    }
                }
            }
        }
        Ok(())
    }

    fn ensure_grad(&mut self, v: Var) {
        let node = &mut self.nodes[v.0];
        if node.tensor.grad.is_none() {
            node.tensor.grad = Some(vec![0.0; node.tensor.numel()]);
        }
    }

    fn add_grad(&mut self, v: Var, delta: &[f64]) {
        self.ensure_grad(v);
        let grad = self.nodes[v.0].tensor.grad.as_mut().unwrap();
        debug_assert_eq!(grad.len(), delta.len());
        for (gv, dv) in grad.iter_mut().zip(delta) {
            *gv += dv;
        }
    }
}

// ---- shared kernels -----------------------------------------------------

fn mm(a: &[f64], m: usize, k: usize, b: &[f64], n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let orow = &mut out[i * n..(i + 1) * n];
        for (p, &av) in arow.iter().enumerate() {
            let brow = &b[p * n..(p + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    out
}

fn mm_exact(a: &[f64], m: usize, k: usize, b: &[f64], n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            out[i * n + j] = exact_sum((0..k).map(|p| a[i * k + p] * b[p * n + j]));
        }
    }
    out
}

/// `a [m×k] · bᵀ` with `b [n×k]`.
fn mm_nt(a: &[f64], m: usize, k: usize, b: &[f64], n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let brow = &b[j * k..(j + 1) * k];
            out[i * n + j] = arow.iter().zip(brow).map(|(x, y)| x * y).sum();
        }
    }
    out
}

/// `aᵀ · b` with `a [m×k]`, `b [m×n]`, producing `[k×n]`.
fn mm_tn(a: &[f64], m: usize, k: usize, b: &[f64], n: usize) -> Vec<f64> {
    let mut out = vec![0.0; k * n];
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let brow = &b[i * n..(i + 1) * n];
        for (p, &av) in arow.iter().enumerate() {
            let orow = &mut out[p * n..(p + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    out
}

fn softmax_forward(x: &[f64], m: usize, n: usize, key_valid: Option<&[bool]>) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let row = &x[i * n..(i + 1) * n];
        let mut mx = f64::NEG_INFINITY;
        for j in 0..n {
            if key_valid.is_none_or(|mk| mk[j]) {
                mx = mx.max(row[j]);
            }
        }
        let exps: Vec<f64> = (0..n)
            .map(|j| {
                if key_valid.is_none_or(|mk| mk[j]) {
                    (row[j] - mx).exp()
                } else {
                    0.0
                }
            })
            .collect();
        let denom = exact_sum(
            (0..n)
                .filter(|&j| key_valid.is_none_or(|mk| mk[j]))
                .map(|j| exps[j]),
        );
        for j in 0..n {
            out[i * n + j] = exps[j] / denom;
        }
    }
    out
}

/// Normalized row and inverse standard deviation for layer normalization.
fn layer_norm_row(row: &[f64], eps: f64) -> (Vec<f64>, f64) {
    let d = row.len() as f64;
    let mean = row.iter().sum::<f64>() / d;
    let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d;
    let inv = 1.0 / (var + eps).sqrt();
    (row.iter().map(|v| (v - mean) * inv).collect(), inv)
}

/// Shared top-k selection used by the tape op and the inference path.
///
/// Returns per-class selected row indices (descending score, ties to the
/// lower index), the pooled per-class means summed in that canonical order,
/// and the effective `k` after clamping to the valid-row count.
pub(crate) fn topk_select(
    x: &[f64],
    m: usize,
    c: usize,
    row_valid: &[bool],
    k: usize,
) -> Result<(Vec<Vec<usize>>, Vec<f64>, usize)> {
    if k == 0 {
        return Err(Error::Config("top-k pooling requires k >= 1".into()));
    }
    if x.len() != m * c || row_valid.len() != m {
        return Err(Error::Shape(format!(
            "top-k pooling over {m}x{c} scores got {} values and a mask of {}",
            x.len(),
            row_valid.len()
        )));
    }
    let n_valid = row_valid.iter().filter(|&&v| v).count();
    if n_valid == 0 {
        return Err(Error::Data(
            "top-k pooling requires at least one valid instance".into(),
        ));
    }
    let k_eff = k.min(n_valid);
    let mut picked = Vec::with_capacity(c);
    let mut pooled = Vec::with_capacity(c);
    let mut candidates: Vec<(usize, f64)> = Vec::with_capacity(n_valid);
    for cls in 0..c {
        candidates.clear();
        for (row, &ok) in row_valid.iter().enumerate() {
            if ok {
                candidates.push((row, x[row * c + cls]));
            }
        }
        candidates.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(a.0.cmp(&b.0)));
        candidates.truncate(k_eff);
        // Summing in descending-score order keeps the pooled value identical
        // under any permutation of tie-free input rows.
        let sum: f64 = candidates.iter().map(|(_, v)| v).sum();
        pooled.push(sum / k_eff as f64);
        picked.push(candidates.iter().map(|(r, _)| *r).collect());
    }
    Ok((picked, pooled, k_eff))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::testutil::{fd_check, rand_tensor, rand_tensor_nonzero, rng};
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    const FD_TOL: f64 = 1e-6;

    #[test]
    fn matmul_known_product() {
        let mut tape = Tape::new();
        let a = tape.leaf(Tensor::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap());
        let b = tape.leaf(Tensor::from_rows(&[vec![5.0, 6.0], vec![7.0, 8.0]]).unwrap());
        let c = tape.matmul(a, b).unwrap();
        assert_eq!(tape.value(c).data(), &[19.0, 22.0, 43.0, 50.0]);
    }

    #[test]
    fn matmul_rejects_inner_dim_mismatch() {
        let mut tape = Tape::new();
        let a = tape.leaf(Tensor::zeros(&[2, 3]).unwrap());
        let b = tape.leaf(Tensor::zeros(&[4, 2]).unwrap());
        assert!(matches!(tape.matmul(a, b), Err(Error::Shape(_))));
    }

    #[test]
    fn matmul_exact_agrees_with_plain() {
        let mut r = rng(11);
        let a = rand_tensor(&[5, 7], &mut r);
        let b = rand_tensor(&[7, 4], &mut r);
        let mut tape = Tape::new();
        let (va, vb) = (tape.leaf(a), tape.leaf(b));
        let plain = tape.matmul(va, vb).unwrap();
        let exact = tape.matmul_exact(va, vb).unwrap();
        for (p, e) in tape
            .value(plain)
            .data()
            .iter()
            .zip(tape.value(exact).data())
        {
            assert!((p - e).abs() < 1e-12);
        }
    }

    #[test]
    fn fd_matmul() {
        let mut r = rng(1);
        let inputs = [rand_tensor(&[3, 4], &mut r), rand_tensor(&[4, 2], &mut r)];
        fd_check(
            &inputs,
            &|t, v| {
                let m = t.matmul(v[0], v[1]).unwrap();
                t.sum_all(m).unwrap()
            },
            FD_TOL,
        );
    }

    #[test]
    fn fd_matmul_nt_and_exact() {
        let mut r = rng(2);
        let inputs = [rand_tensor(&[3, 4], &mut r), rand_tensor(&[5, 4], &mut r)];
        fd_check(
            &inputs,
            &|t, v| {
                let m = t.matmul_nt(v[0], v[1]).unwrap();
                t.sum_all(m).unwrap()
            },
            FD_TOL,
        );
        let inputs = [rand_tensor(&[3, 4], &mut r), rand_tensor(&[4, 2], &mut r)];
        fd_check(
            &inputs,
            &|t, v| {
                let m = t.matmul_exact(v[0], v[1]).unwrap();
                t.sum_all(m).unwrap()
            },
            FD_TOL,
        );
    }

    #[test]
    fn fd_add_scale_bias() {
        let mut r = rng(3);
        let inputs = [
            rand_tensor(&[3, 4], &mut r),
            rand_tensor(&[3, 4], &mut r),
            rand_tensor(&[4], &mut r),
        ];
        fd_check(
            &inputs,
            &|t, v| {
                let s = t.add(v[0], v[1]).unwrap();
                let s = t.scale(s, 1.7).unwrap();
                let s = t.add_bias(s, v[2]).unwrap();
                t.sum_all(s).unwrap()
            },
            FD_TOL,
        );
    }

    #[test]
    fn fd_relu_away_from_kink() {
        let mut r = rng(4);
        let inputs = [rand_tensor_nonzero(&[4, 3], &mut r)];
        fd_check(
            &inputs,
            &|t, v| {
                let y = t.relu(v[0]).unwrap();
                t.sum_all(y).unwrap()
            },
            FD_TOL,
        );
    }

    #[test]
    fn fd_softmax_plain_and_masked() {
        let mut r = rng(5);
        let x = rand_tensor(&[3, 5], &mut r);
        let w = rand_tensor(&[5, 2], &mut r);
        let wc = w.clone();
        fd_check(
            std::slice::from_ref(&x),
            &move |t, v| {
                let sm = t.softmax_rows(v[0]).unwrap();
                let wv = t.leaf(wc.clone());
                let y = t.matmul(sm, wv).unwrap();
                t.sum_all(y).unwrap()
            },
            FD_TOL,
        );
        let mask = vec![true, false, true, true, false];
        let wc = w.clone();
        fd_check(
            &[x],
            &move |t, v| {
                let sm = t.softmax_rows_masked(v[0], Some(&mask)).unwrap();
                let wv = t.leaf(wc.clone());
                let y = t.matmul(sm, wv).unwrap();
                t.sum_all(y).unwrap()
            },
            FD_TOL,
        );
    }

    #[test]
    fn fd_layer_norm() {
        let mut r = rng(6);
        let inputs = [
            rand_tensor(&[3, 5], &mut r),
            rand_tensor(&[5], &mut r),
            rand_tensor(&[5], &mut r),
        ];
        let w = rand_tensor(&[5, 2], &mut r);
        fd_check(
            &inputs,
            &move |t, v| {
                let y = t.layer_norm(v[0], v[1], v[2], 1e-5).unwrap();
                let wv = t.leaf(w.clone());
                let y = t.matmul(y, wv).unwrap();
                t.sum_all(y).unwrap()
            },
            FD_TOL,
        );
    }

    #[test]
    fn fd_mean_axis_both_axes() {
        let mut r = rng(7);
        let x = rand_tensor(&[4, 3], &mut r);
        let w0 = rand_tensor(&[3, 2], &mut r);
        fd_check(
            std::slice::from_ref(&x),
            &move |t, v| {
                let m = t.mean_axis(v[0], 0).unwrap();
                let wv = t.leaf(w0.clone());
                let y = t.matmul(m, wv).unwrap();
                t.sum_all(y).unwrap()
            },
            FD_TOL,
        );
        let w1 = rand_tensor(&[1, 2], &mut r);
        fd_check(
            &[x],
            &move |t, v| {
                let m = t.mean_axis(v[0], 1).unwrap();
                let wv = t.leaf(w1.clone());
                let y = t.matmul(m, wv).unwrap();
                t.sum_all(y).unwrap()
            },
            FD_TOL,
        );
    }

    #[test]
    fn fd_slice_concat_roundtrip() {
        let mut r = rng(8);
        let x = rand_tensor(&[3, 5], &mut r);
        let w = rand_tensor(&[5, 2], &mut r);
        fd_check(
            &[x],
            &move |t, v| {
                let left = t.slice_cols(v[0], 0, 2).unwrap();
                let right = t.slice_cols(v[0], 2, 3).unwrap();
                let joined = t.concat_cols(&[left, right]).unwrap();
                let wv = t.leaf(w.clone());
                let y = t.matmul(joined, wv).unwrap();
                t.sum_all(y).unwrap()
            },
            FD_TOL,
        );
    }

    #[test]
    fn fd_topk_with_separated_scores() {
        // Scores separated by >> 2h so the selection never flips under FD.
        let x = Tensor::from_rows(&[
            vec![0.10, 0.90, 0.30],
            vec![0.55, 0.20, 0.80],
            vec![0.95, 0.45, 0.15],
            vec![0.30, 0.70, 0.60],
        ])
        .unwrap();
        let valid = vec![true, true, true, true];
        fd_check(
            &[x],
            &move |t, v| {
                let pooled = t.topk_mean_cols(v[0], 2, &valid).unwrap();
                t.sum_all(pooled).unwrap()
            },
            FD_TOL,
        );
    }

    #[test]
    fn fd_dropout_with_reseeded_mask() {
        let mut r = rng(9);
        let x = rand_tensor(&[4, 4], &mut r);
        fd_check(
            &[x],
            &|t, v| {
                let mut mask_rng = ChaCha8Rng::seed_from_u64(42);
                let y = t.dropout(v[0], 0.5, true, &mut mask_rng).unwrap();
                t.sum_all(y).unwrap()
            },
            FD_TOL,
        );
    }

    #[test]
    fn fd_bce_with_logits() {
        let mut r = rng(10);
        let x = rand_tensor(&[3, 4], &mut r);
        let targets: Vec<f64> = (0..12).map(|i| f64::from(i % 2 == 0)).collect();
        let mask = vec![true, false, true];
        fd_check(
            &[x],
            &move |t, v| t.bce_with_logits_mean(v[0], &targets, Some(&mask)).unwrap(),
            FD_TOL,
        );
    }

    #[test]
    fn fd_softmax_cross_entropy() {
        let mut r = rng(12);
        let x = rand_tensor(&[1, 5], &mut r);
        let target = vec![0.0, 0.0, 1.0, 0.0, 0.0];
        fd_check(
            &[x],
            &move |t, v| t.softmax_cross_entropy(v[0], &target).unwrap(),
            FD_TOL,
        );
    }

    #[test]
    fn softmax_rows_sum_to_one_and_survive_extremes() {
        let x = Tensor::from_rows(&[vec![1000.0, 1001.0, 999.0], vec![-1000.0, 0.0, 3.0]]).unwrap();
        let mut tape = Tape::new();
        let v = tape.leaf(x);
        let sm = tape.softmax_rows(v).unwrap();
        let out = tape.value(sm);
        for i in 0..2 {
            let sum: f64 = out.row(i).iter().sum();
            assert!((sum - 1.0).abs() < 1e-12, "row {i} sums to {sum}");
            assert!(out.row(i).iter().all(|w| w.is_finite() && *w >= 0.0));
        }
    }

    #[test]
    fn softmax_two_element_closed_form() {
        let mut tape = Tape::new();
        let v = tape.leaf(Tensor::from_rows(&[vec![1.0, 2.0]]).unwrap());
        let sm = tape.softmax_rows(v).unwrap();
        let e = std::f64::consts::E;
        assert!((tape.value(sm).at(0, 0) - 1.0 / (1.0 + e)).abs() < 1e-12);
        assert!((tape.value(sm).at(0, 1) - e / (1.0 + e)).abs() < 1e-12);
    }

    #[test]
    fn masked_softmax_ignores_masked_content_exactly() {
        let mask = vec![true, false, true];
        let a = Tensor::from_rows(&[vec![0.3, 0.0, -0.2]]).unwrap();
        let b = Tensor::from_rows(&[vec![0.3, 1e300, -0.2]]).unwrap();
        let run = |x: Tensor| {
            let mut tape = Tape::new();
            let v = tape.leaf(x);
            let sm = tape.softmax_rows_masked(v, Some(&mask)).unwrap();
            tape.value(sm).data().to_vec()
        };
        let (wa, wb) = (run(a), run(b));
        for j in 0..3 {
            assert_eq!(wa[j].to_bits(), wb[j].to_bits());
        }
        assert_eq!(wa[1], 0.0);
    }

    #[test]
    fn softmax_with_no_valid_keys_is_a_data_error() {
        let mut tape = Tape::new();
        let v = tape.leaf(Tensor::zeros(&[2, 3]).unwrap());
        let mask = vec![false, false, false];
        assert!(matches!(
            tape.softmax_rows_masked(v, Some(&mask)),
            Err(Error::Data(_))
        ));
    }

    #[test]
    fn attention_core_is_permutation_invariant_over_keys() {
        // softmax over keys followed by an exact-sum contraction with the
        // values must not change (bitwise) when key/value rows permute.
        let mut r = rng(13);
        let q = rand_tensor(&[4, 6], &mut r);
        let k = rand_tensor(&[5, 6], &mut r);
        let v = rand_tensor(&[5, 8], &mut r);
        let mask = vec![true, true, false, true, true];
        let perm = [3usize, 0, 4, 1, 2];

        let run = |k: &Tensor, v: &Tensor, mask: &[bool]| {
            let mut tape = Tape::new();
            let (vq, vk, vv) = (
                tape.leaf(q.clone()),
                tape.leaf(k.clone()),
                tape.leaf(v.clone()),
            );
            let scores = tape.matmul_nt(vq, vk).unwrap();
            let scaled = tape.scale(scores, 1.0 / (6.0f64).sqrt()).unwrap();
            let w = tape.softmax_rows_masked(scaled, Some(mask)).unwrap();
            let out = tape.matmul_exact(w, vv).unwrap();
            tape.value(out).data().to_vec()
        };

        let base = run(&k, &v, &mask);
        let kp = Tensor::from_rows(&perm.iter().map(|&i| k.row(i).to_vec()).collect::<Vec<_>>())
            .unwrap();
        let vp = Tensor::from_rows(&perm.iter().map(|&i| v.row(i).to_vec()).collect::<Vec<_>>())
            .unwrap();
        let maskp: Vec<bool> = perm.iter().map(|&i| mask[i]).collect();
        let permuted = run(&kp, &vp, &maskp);
        for (a, b) in base.iter().zip(&permuted) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }

    #[test]
    fn layer_norm_constant_row_collapses_to_bias() {
        let mut r = rng(14);
        let gain = rand_tensor(&[4], &mut r);
        let bias = rand_tensor(&[4], &mut r);
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::from_rows(&[vec![2.5; 4]]).unwrap());
        let (g, b) = (tape.leaf(gain), tape.leaf(bias.clone()));
        let y = tape.layer_norm(x, g, b, 1e-5).unwrap();
        assert_eq!(tape.value(y).data(), bias.data());
    }

    #[test]
    fn dropout_contract() {
        let mut r = rng(15);
        let x = rand_tensor(&[3, 3], &mut r);
        let mut tape = Tape::new();
        let v = tape.leaf(x.clone());

        // Rates outside [0, 1) are configuration errors.
        assert!(matches!(
            tape.dropout(v, 1.0, true, &mut r),
            Err(Error::Config(_))
        ));
        assert!(matches!(
            tape.dropout(v, -0.1, true, &mut r),
            Err(Error::Config(_))
        ));
        assert!(matches!(
            tape.dropout(v, 1.5, true, &mut r),
            Err(Error::Config(_))
        ));

        // Identity in inference mode and at rate zero.
        assert_eq!(tape.dropout(v, 0.7, false, &mut r).unwrap(), v);
        assert_eq!(tape.dropout(v, 0.0, true, &mut r).unwrap(), v);

        // Training mode: survivors scaled by 1/keep, deterministic per seed,
        // and consecutive calls consume disjoint draws.
        let run = |seed: u64| {
            let mut tape = Tape::new();
            let mut drop_rng = ChaCha8Rng::seed_from_u64(seed);
            let v = tape.leaf(x.clone());
            let d1 = tape.dropout(v, 0.5, true, &mut drop_rng).unwrap();
            let d2 = tape.dropout(v, 0.5, true, &mut drop_rng).unwrap();
            (
                tape.value(d1).data().to_vec(),
                tape.value(d2).data().to_vec(),
            )
        };
        let (a1, a2) = run(99);
        let (b1, _) = run(99);
        assert_eq!(a1, b1, "same seed must reproduce the same mask");
        assert_ne!(a1, a2, "consecutive calls must consume disjoint draws");
        for (orig, dropped) in x.data().iter().zip(&a1) {
            let ratio = dropped / orig;
            assert!(
                ratio == 0.0 || (ratio - 2.0).abs() < 1e-12,
                "inverted dropout at rate 0.5 scales survivors by 2, got {ratio}"
            );
        }
    }

    #[test]
    fn zero_scaled_loss_yields_zero_gradients() {
        let mut r = rng(16);
        let x = rand_tensor(&[3, 3], &mut r);
        let mut tape = Tape::new();
        let v = tape.leaf(x.with_grad());
        let y = tape.scale(v, 0.0).unwrap();
        let loss = tape.sum_all(y).unwrap();
        tape.backward(loss).unwrap();
        assert!(tape.grad(v).unwrap().iter().all(|&g| g == 0.0));
    }

    #[test]
    fn fanout_gradients_accumulate_additively() {
        let mut r = rng(17);
        let x = rand_tensor(&[2, 3], &mut r);
        let mut tape = Tape::new();
        let v = tape.leaf(x.with_grad());
        let y = tape.add(v, v).unwrap();
        let loss = tape.sum_all(y).unwrap();
        tape.backward(loss).unwrap();
        assert!(tape.grad(v).unwrap().iter().all(|&g| g == 2.0));
    }

    proptest! {
        #[test]
        fn fanout_accumulation_matches_sum_of_branch_factors(
            a in -3.0f64..3.0,
            b in -3.0f64..3.0,
            seed in any::<u64>(),
        ) {
            let mut r = ChaCha8Rng::seed_from_u64(seed);
            let x = rand_tensor(&[2, 2], &mut r);
            let mut tape = Tape::new();
            let v = tape.leaf(x.with_grad());
            let ya = tape.scale(v, a).unwrap();
            let yb = tape.scale(v, b).unwrap();
            let y = tape.add(ya, yb).unwrap();
            let loss = tape.sum_all(y).unwrap();
            tape.backward(loss).unwrap();
            for &g in tape.grad(v).unwrap() {
                prop_assert_eq!(g, a + b);
            }
        }
    }

    #[test]
    fn backward_requires_scalar_loss() {
        let mut tape = Tape::new();
        let v = tape.leaf(Tensor::zeros(&[2, 2]).unwrap().with_grad());
        assert!(matches!(tape.backward(v), Err(Error::Usage(_))));
    }

    #[test]
    fn backward_runs_at_most_once() {
        let mut tape = Tape::new();
        let v = tape.leaf(Tensor::scalar(1.0).unwrap().with_grad());
        let loss = tape.scale(v, 2.0).unwrap();
        tape.backward(loss).unwrap();
        assert!(matches!(tape.backward(loss), Err(Error::Usage(_))));
    }

    #[test]
    fn topk_matches_drop_worst_example() {
        let x = Tensor::from_rows(&[vec![0.1], vec![0.9], vec![0.3]]).unwrap();
        let mut tape = Tape::new();
        let v = tape.leaf(x);
        let pooled = tape.topk_mean_cols(v, 2, &[true, true, true]).unwrap();
        assert!((tape.value(pooled).at(0, 0) - 0.6).abs() < 1e-12);
    }

    #[test]
    fn topk_limits() {
        let x = Tensor::from_rows(&[vec![0.1, -0.4], vec![0.9, 0.2], vec![0.3, 0.5]]).unwrap();
        let all = vec![true, true, true];
        let mut tape = Tape::new();
        let v = tape.leaf(x.clone());

        // k = 1 selects each column's max.
        let top1 = tape.topk_mean_cols(v, 1, &all).unwrap();
        assert_eq!(tape.value(top1).data(), &[0.9, 0.5]);

        // k = rows reduces to the column mean.
        let top_all = tape.topk_mean_cols(v, 3, &all).unwrap();
        let mean0 = (0.1 + 0.9 + 0.3) / 3.0;
        let mean1 = (-0.4 + 0.2 + 0.5) / 3.0;
        assert!((tape.value(top_all).at(0, 0) - mean0).abs() < 1e-12);
        assert!((tape.value(top_all).at(0, 1) - mean1).abs() < 1e-12);

        // k beyond the valid count clamps to it.
        let partial = vec![true, false, true];
        let clamped = tape.topk_mean_cols(v, 10, &partial).unwrap();
        let two = tape.topk_mean_cols(v, 2, &partial).unwrap();
        assert_eq!(tape.value(clamped).data(), tape.value(two).data());

        // Zero valid rows is a data error; k = 0 a config error.
        assert!(matches!(
            tape.topk_mean_cols(v, 2, &[false, false, false]),
            Err(Error::Data(_))
        ));
        assert!(matches!(
            tape.topk_mean_cols(v, 0, &all),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn topk_ties_prefer_lower_index_and_route_gradient_only_to_selected() {
        let x = Tensor::from_rows(&[vec![0.5], vec![0.5], vec![0.2]]).unwrap();
        let mut tape = Tape::new();
        let v = tape.leaf(x.with_grad());
        let pooled = tape.topk_mean_cols(v, 1, &[true, true, true]).unwrap();
        let loss = tape.sum_all(pooled).unwrap();
        tape.backward(loss).unwrap();
        let g = tape.grad(v).unwrap();
        assert_eq!(
            g,
            &[1.0, 0.0, 0.0],
            "tie must resolve to the lower row index"
        );
    }

    #[test]
    fn bce_all_zero_logits_is_ln_two() {
        let mut tape = Tape::new();
        let v = tape.leaf(Tensor::zeros(&[1, 4]).unwrap());
        let loss = tape
            .bce_with_logits_mean(v, &[1.0, 0.0, 1.0, 0.0], None)
            .unwrap();
        assert!((tape.value(loss).data()[0] - std::f64::consts::LN_2).abs() < 1e-15);
    }

    #[test]
    fn bce_matches_scalar_oracle() {
        use rand::Rng;
        let mut r = rng(18);
        let m = 3;
        let c = 4;
        let logits: Vec<f64> = (0..m * c).map(|_| r.gen_range(-5.0..5.0)).collect();
        let targets: Vec<f64> = (0..m * c).map(|_| f64::from(r.gen::<bool>())).collect();
        let mut tape = Tape::new();
        let v = tape.leaf(Tensor::new(&[m, c], logits.clone()).unwrap());
        let loss = tape.bce_with_logits_mean(v, &targets, None).unwrap();

        // Independent oracle: naive per-element cross-entropy on sigmoids.
        let mut expect = 0.0;
        for (z, y) in logits.iter().zip(&targets) {
            let p = 1.0 / (1.0 + (-z).exp());
            expect += -(y * p.ln() + (1.0 - y) * (1.0 - p).ln());
        }
        expect /= (m * c) as f64;
        assert!((tape.value(loss).data()[0] - expect).abs() < 1e-12);
    }

    #[test]
    fn bce_masked_rows_are_fully_excluded() {
        let mask = vec![true, false];
        let targets = vec![1.0, 0.0, 0.0, 1.0];
        let run = |second_row: [f64; 2]| {
            let mut tape = Tape::new();
            let v = tape.leaf(Tensor::from_rows(&[vec![0.4, -0.3], second_row.to_vec()]).unwrap());
            let loss = tape.bce_with_logits_mean(v, &targets, Some(&mask)).unwrap();
            tape.value(loss).data()[0]
        };
        assert_eq!(run([0.0, 0.0]).to_bits(), run([123.0, -77.0]).to_bits());
    }

    #[test]
    fn softmax_cross_entropy_matches_hand_computation() {
        let logits = vec![0.2, 1.1, -0.7];
        let mut tape = Tape::new();
        let v = tape.leaf(Tensor::new(&[1, 3], logits.clone()).unwrap());
        let loss = tape.softmax_cross_entropy(v, &[0.0, 1.0, 0.0]).unwrap();
        let denom: f64 = logits.iter().map(|z| z.exp()).sum();
        let expect = -(logits[1].exp() / denom).ln();
        assert!((tape.value(loss).data()[0] - expect).abs() < 1e-12);

        assert!(matches!(
            tape.softmax_cross_entropy(v, &[0.5, 0.5, 0.0]),
            Err(Error::Data(_))
        ));
    }

    #[test]
    fn shape_errors_are_reported_not_panicked() {
        let mut tape = Tape::new();
        let a = tape.leaf(Tensor::zeros(&[2, 3]).unwrap());
        let b = tape.leaf(Tensor::zeros(&[3, 3]).unwrap());
        assert!(tape.add(a, b).is_err());
        assert!(tape.slice_cols(a, 2, 2).is_err());
        assert!(tape.concat_cols(&[a, b]).is_err());
        let bias = tape.leaf(Tensor::zeros(&[4]).unwrap());
        assert!(tape.add_bias(a, bias).is_err());
    }

    #[test]
    fn mean_axis_of_constant_tensor_is_the_constant() {
        let mut tape = Tape::new();
        let v = tape.leaf(Tensor::new(&[4, 3], vec![3.5; 12]).unwrap());
        let m0 = tape.mean_axis(v, 0).unwrap();
        let m1 = tape.mean_axis(v, 1).unwrap();
        assert_eq!(tape.value(m0).data(), &[3.5, 3.5, 3.5]);
        assert_eq!(tape.value(m1).data(), &[3.5, 3.5, 3.5, 3.5]);
        assert_eq!(tape.value(m0).shape(), &[1, 3]);
        assert_eq!(tape.value(m1).shape(), &[4, 1]);
    }
}
