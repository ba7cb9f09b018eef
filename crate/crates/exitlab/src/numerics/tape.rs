//! Tape-based reverse-mode automatic differentiation.
//!
//! Forward calls record one node per operation and compute values eagerly;
//! [`Tape::backward`] walks the recording in reverse and returns gradients
//! for every node, including bound parameters. The same forward code runs
//! during rollouts and updates, so re-evaluating an unchanged policy yields
//! bit-identical action log-probabilities.

use std::collections::HashMap;

use crate::error::{shape_error, Error, Result};
use crate::numerics::store::{ParamId, ParameterStore};
use crate::numerics::tensor::{Element, Tensor};

/// Handle to a node on the tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(u32);

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    /// `a * b^T`.
    MatMulNT(Var, Var),
    Add(Var, Var),
    /// `(n,d) + (1,d)` broadcast over rows.
    AddBias(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    /// `mul * x + add`, elementwise with scalar constants.
    Affine(Var, f64),
    Relu(Var),
    Sigmoid(Var),
    Tanh(Var),
    Exp(Var),
    Square(Var),
    SoftmaxRows(Var),
    LogSoftmaxRows(Var),
    LayerNormRows {
        x: Var,
        gamma: Var,
        beta: Var,
        eps: f64,
    },
    /// Negative log-likelihood of `label` under row-vector logits.
    CrossEntropy { logits: Var, label: usize },
    /// Mean absolute difference over all elements.
    L1Mean(Var, Var),
    Clamp { x: Var, lo: f64, hi: f64 },
    /// Elementwise minimum; ties route the gradient to the first operand.
    Min2(Var, Var),
    /// Extracts one element as a `1x1` scalar.
    Pick { x: Var, row: usize, col: usize },
    SliceRows { x: Var, start: usize, len: usize },
    SliceCols { x: Var, start: usize, len: usize },
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    /// `(1,d) -> (n,d)`.
    RepeatRow { x: Var, n: usize },
    MeanAll(Var),
    SumAll(Var),
    /// Elementwise sum of same-shaped tensors.
    SumList(Vec<Var>),
}

#[derive(Debug, Clone)]
struct Node<E: Element> {
    op: Op,
    value: Tensor<E>,
}

/// Per-node gradients produced by [`Tape::backward`].
pub struct Gradients<E: Element> {
    by_var: Vec<Option<Tensor<E>>>,
}

impl<E: Element> Gradients<E> {
    /// Gradient of the loss with respect to `v`, if `v` influenced the loss.
    pub fn wrt(&self, v: Var) -> Option<&Tensor<E>> {
        self.by_var[v.0 as usize].as_ref()
    }
}

/// Recording of one forward computation.
pub struct Tape<E: Element> {
    nodes: Vec<Node<E>>,
    bound: Vec<(Var, ParamId)>,
    memo: HashMap<ParamId, Var>,
}

impl<E: Element> Default for Tape<E> {
    fn default() -> Self {
        Self::new()
    }
}

impl<E: Element> Tape<E> {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            bound: Vec::new(),
            memo: HashMap::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<E> {
        &self.nodes[v.0 as usize].value
    }

    /// Scalar value of a `1x1` node.
    pub fn scalar(&self, v: Var) -> E {
        self.nodes[v.0 as usize].value.value()
    }

    fn push(&mut self, op: Op, value: Tensor<E>) -> Var {
        let id = u32::try_from(self.nodes.len()).expect("tape shorter than u32::MAX nodes");
        self.nodes.push(Node { op, value });
        Var(id)
    }

    /// Records a constant input. Gradients stop here.
    pub fn constant(&mut self, value: Tensor<E>) -> Var {
        self.push(Op::Leaf, value)
    }

    pub fn constant_scalar(&mut self, value: f64) -> Var {
        self.constant(Tensor::scalar(E::from_f64(value)))
    }

    /// Binds a stored parameter. Repeated binds of the same parameter return
    /// the same node, so gradients accumulate across every use.
    pub fn param(&mut self, store: &ParameterStore<E>, id: ParamId) -> Var {
        if let Some(&v) = self.memo.get(&id) {
            return v;
        }
        let var = self.push(Op::Leaf, store.value(id).clone());
        self.bound.push((var, id));
        self.memo.insert(id, var);
        var
    }

    fn shape(&self, v: Var) -> (usize, usize) {
        self.nodes[v.0 as usize].value.shape()
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(shape_error(
                op,
                "matching shapes".to_string(),
                format!(
                    "{} vs {}",
                    self.value(a).shape_string(),
                    self.value(b).shape_string()
                ),
            ));
        }
        Ok(())
    }

    // ---- arithmetic -----------------------------------------------------

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).matmul(self.value(b))?;
        Ok(self.push(Op::MatMul(a, b), value))
    }

    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).matmul_nt(self.value(b))?;
        Ok(self.push(Op::MatMulNT(a, b), value))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let mut value = self.value(a).clone();
        value.add_assign_scaled(self.value(b), E::ONE);
        Ok(self.push(Op::Add(a, b), value))
    }

    /// Adds a `1 x d` bias row to every row of `x`.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (_, d) = self.shape(x);
        if self.shape(bias) != (1, d) {
            return Err(shape_error(
                "add_bias",
                format!("bias of shape 1x{d}"),
                self.value(bias).shape_string(),
            ));
        }
        let mut value = self.value(x).clone();
        for r in 0..value.rows() {
            let bias_row: Vec<E> = self.value(bias).row(0).to_vec();
            for (o, b) in value.row_mut(r).iter_mut().zip(bias_row) {
                *o += b;
            }
        }
        Ok(self.push(Op::AddBias(x, bias), value))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let mut value = self.value(a).clone();
        value.add_assign_scaled(self.value(b), -E::ONE);
        Ok(self.push(Op::Sub(a, b), value))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let bv = self.value(b).clone();
        let value = Tensor::from_vec(
            bv.rows(),
            bv.cols(),
            self.value(a)
                .data()
                .iter()
                .zip(bv.data())
                .map(|(&x, &y)| x * y)
                .collect(),
        )?;
        Ok(self.push(Op::Mul(a, b), value))
    }

    /// `mul * x + add` with scalar constants.
    pub fn affine(&mut self, x: Var, mul: f64, add: f64) -> Var {
        let m = E::from_f64(mul);
        let c = E::from_f64(add);
        let value = self.value(x).map(|v| v * m + c);
        self.push(Op::Affine(x, mul), value)
    }

    pub fn neg(&mut self, x: Var) -> Var {
        self.affine(x, -1.0, 0.0)
    }

    // ---- activations ----------------------------------------------------

    pub fn relu(&mut self, x: Var) -> Var {
        let value = self.value(x).map(|v| v.maximum(E::ZERO));
        self.push(Op::Relu(x), value)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let value = self.value(x).map(|v| E::ONE / (E::ONE + (-v).exp()));
        self.push(Op::Sigmoid(x), value)
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        let value = self.value(x).map(|v| v.tanh());
        self.push(Op::Tanh(x), value)
    }

    pub fn exp(&mut self, x: Var) -> Var {
        let value = self.value(x).map(|v| v.exp());
        self.push(Op::Exp(x), value)
    }

    pub fn square(&mut self, x: Var) -> Var {
        let value = self.value(x).map(|v| v * v);
        self.push(Op::Square(x), value)
    }

    // ---- reductions and structured ops ----------------------------------

    /// Row-wise softmax with max subtraction for stability.
    pub fn softmax_rows(&mut self, x: Var) -> Var {
        let src = self.value(x);
        let mut value = Tensor::zeros(src.rows(), src.cols());
        for r in 0..src.rows() {
            softmax_row(src.row(r), value.row_mut(r));
        }
        self.push(Op::SoftmaxRows(x), value)
    }

    /// Row-wise log-softmax.
    pub fn log_softmax_rows(&mut self, x: Var) -> Var {
        let src = self.value(x);
        let mut value = Tensor::zeros(src.rows(), src.cols());
        for r in 0..src.rows() {
            log_softmax_row(src.row(r), value.row_mut(r));
        }
        self.push(Op::LogSoftmaxRows(x), value)
    }

    /// Row-wise layer normalization with learned scale and shift.
    pub fn layer_norm_rows(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let (_, d) = self.shape(x);
        for (name, v) in [("gamma", gamma), ("beta", beta)] {
            if self.shape(v) != (1, d) {
                return Err(shape_error(
                    "layer_norm_rows",
                    format!("{name} of shape 1x{d}"),
                    self.value(v).shape_string(),
                ));
            }
        }
        let src = self.value(x);
        let g = self.value(gamma);
        let b = self.value(beta);
        let mut value = Tensor::zeros(src.rows(), src.cols());
        for r in 0..src.rows() {
            let row = src.row(r);
            let (mean, var) = mean_var(row);
            let denom = (var + E::from_f64(eps)).sqrt();
            for c in 0..d {
                let hat = (row[c] - mean) / denom;
                value.set(r, c, g.get(0, c) * hat + b.get(0, c));
            }
        }
        Ok(self.push(Op::LayerNormRows { x, gamma, beta, eps }, value))
    }

    /// Negative log-likelihood of `label` under `1 x C` logits.
    pub fn cross_entropy(&mut self, logits: Var, label: usize) -> Result<Var> {
        let (rows, cols) = self.shape(logits);
        if rows != 1 || label >= cols {
            return Err(shape_error(
                "cross_entropy",
                format!("1xC logits with label < C (label {label})"),
                self.value(logits).shape_string(),
            ));
        }
        let mut logp = vec![E::ZERO; cols];
        log_softmax_row(self.value(logits).row(0), &mut logp);
        let value = Tensor::scalar(-logp[label]);
        Ok(self.push(Op::CrossEntropy { logits, label }, value))
    }

    /// Mean absolute difference between same-shaped tensors.
    pub fn l1_mean(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("l1_mean", a, b)?;
        let av = self.value(a);
        let bv = self.value(b);
        let n = E::from_f64(av.len() as f64);
        let mut acc = E::ZERO;
        for (&x, &y) in av.data().iter().zip(bv.data()) {
            acc += (x - y).abs();
        }
        let value = Tensor::scalar(acc / n);
        Ok(self.push(Op::L1Mean(a, b), value))
    }

    pub fn clamp(&mut self, x: Var, lo: f64, hi: f64) -> Var {
        let l = E::from_f64(lo);
        let h = E::from_f64(hi);
        let value = self.value(x).map(|v| v.maximum(l).minimum(h));
        self.push(Op::Clamp { x, lo, hi }, value)
    }

    pub fn min2(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("min2", a, b)?;
        let bv = self.value(b).clone();
        let value = Tensor::from_vec(
            bv.rows(),
            bv.cols(),
            self.value(a)
                .data()
                .iter()
                .zip(bv.data())
                .map(|(&x, &y)| x.minimum(y))
                .collect(),
        )?;
        Ok(self.push(Op::Min2(a, b), value))
    }

    /// Extracts element `(row, col)` as a scalar node.
    pub fn pick(&mut self, x: Var, row: usize, col: usize) -> Result<Var> {
        let (r, c) = self.shape(x);
        if row >= r || col >= c {
            return Err(shape_error(
                "pick",
                format!("index within {r}x{c}"),
                format!("({row},{col})"),
            ));
        }
        let value = Tensor::scalar(self.value(x).get(row, col));
        Ok(self.push(Op::Pick { x, row, col }, value))
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (r, c) = self.shape(x);
        if start + len > r {
            return Err(shape_error(
                "slice_rows",
                format!("rows within 0..{r}"),
                format!("{start}..{}", start + len),
            ));
        }
        let src = self.value(x);
        let data = src.data()[start * c..(start + len) * c].to_vec();
        let value = Tensor::from_vec(len, c, data)?;
        Ok(self.push(Op::SliceRows { x, start, len }, value))
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (r, c) = self.shape(x);
        if start + len > c {
            return Err(shape_error(
                "slice_cols",
                format!("cols within 0..{c}"),
                format!("{start}..{}", start + len),
            ));
        }
        let src = self.value(x);
        let mut value = Tensor::zeros(r, len);
        for i in 0..r {
            value.row_mut(i).copy_from_slice(&src.row(i)[start..start + len]);
        }
        Ok(self.push(Op::SliceCols { x, start, len }, value))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(shape_error("concat_cols", "at least one operand", "none"));
        }
        let rows = self.shape(parts[0]).0;
        let mut cols = 0;
        for &p in parts {
            let (r, c) = self.shape(p);
            if r != rows {
                return Err(shape_error(
                    "concat_cols",
                    format!("{rows} rows"),
                    self.value(p).shape_string(),
                ));
            }
            cols += c;
        }
        let mut value = Tensor::zeros(rows, cols);
        for r in 0..rows {
            let mut offset = 0;
            for &p in parts {
                let src = self.value(p);
                let width = src.cols();
                value.row_mut(r)[offset..offset + width].copy_from_slice(src.row(r));
                offset += width;
            }
        }
        Ok(self.push(Op::ConcatCols(parts.to_vec()), value))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(shape_error("concat_rows", "at least one operand", "none"));
        }
        let cols = self.shape(parts[0]).1;
        let mut rows = 0;
        for &p in parts {
            let (r, c) = self.shape(p);
            if c != cols {
                return Err(shape_error(
                    "concat_rows",
                    format!("{cols} cols"),
                    self.value(p).shape_string(),
                ));
            }
            rows += r;
        }
        let mut data = Vec::with_capacity(rows * cols);
        for &p in parts {
            data.extend_from_slice(self.value(p).data());
        }
        let value = Tensor::from_vec(rows, cols, data)?;
        Ok(self.push(Op::ConcatRows(parts.to_vec()), value))
    }

    pub fn repeat_row(&mut self, x: Var, n: usize) -> Result<Var> {
        let (r, c) = self.shape(x);
        if r != 1 {
            return Err(shape_error("repeat_row", "a 1xd row", self.value(x).shape_string()));
        }
        let mut data = Vec::with_capacity(n * c);
        for _ in 0..n {
            data.extend_from_slice(self.value(x).row(0));
        }
        let value = Tensor::from_vec(n, c, data)?;
        Ok(self.push(Op::RepeatRow { x, n }, value))
    }

    pub fn mean_all(&mut self, x: Var) -> Var {
        let src = self.value(x);
        let n = E::from_f64(src.len() as f64);
        let mut acc = E::ZERO;
        for &v in src.data() {
            acc += v;
        }
        let value = Tensor::scalar(acc / n);
        self.push(Op::MeanAll(x), value)
    }

    pub fn sum_all(&mut self, x: Var) -> Var {
        let src = self.value(x);
        let mut acc = E::ZERO;
        for &v in src.data() {
            acc += v;
        }
        let value = Tensor::scalar(acc);
        self.push(Op::SumAll(x), value)
    }

    pub fn sum_list(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(shape_error("sum_list", "at least one operand", "none"));
        }
        for &p in &parts[1..] {
            self.same_shape("sum_list", parts[0], p)?;
        }
        let mut value = self.value(parts[0]).clone();
        for &p in &parts[1..] {
            value.add_assign_scaled(self.value(p), E::ONE);
        }
        Ok(self.push(Op::SumList(parts.to_vec()), value))
    }

    /// Mean of a list of scalars.
    pub fn mean_of(&mut self, parts: &[Var]) -> Result<Var> {
        let total = self.sum_list(parts)?;
        Ok(self.affine(total, 1.0 / parts.len() as f64, 0.0))
    }

    // ---- differentiation -------------------------------------------------

    /// Reverse pass from a scalar `root`. Returns gradients for every node
    /// that influences the root.
    pub fn backward(&self, root: Var) -> Result<Gradients<E>> {
        if self.value(root).len() != 1 {
            return Err(Error::Internal(format!(
                "backward requires a scalar root, got {}",
                self.value(root).shape_string()
            )));
        }
        let mut grads: Vec<Option<Tensor<E>>> = vec![None; self.nodes.len()];
        grads[root.0 as usize] = Some(Tensor::scalar(E::ONE));

        for idx in (0..=root.0 as usize).rev() {
            let Some(grad) = grads[idx].take() else {
                continue;
            };
            self.propagate(idx, &grad, &mut grads)?;
            grads[idx] = Some(grad);
        }
        Ok(Gradients { by_var: grads })
    }

    fn propagate(&self, idx: usize, g: &Tensor<E>, grads: &mut [Option<Tensor<E>>]) -> Result<()> {
        let acc = |grads: &mut [Option<Tensor<E>>], v: Var, delta: Tensor<E>| {
            let slot = &mut grads[v.0 as usize];
            match slot {
                Some(t) => t.add_assign_scaled(&delta, E::ONE),
                None => *slot = Some(delta),
            }
        };
        let node = &self.nodes[idx];
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let ga = g.matmul_nt(self.value(*b))?;
                let gb = self.value(*a).matmul_tn(g)?;
                acc(grads, *a, ga);
                acc(grads, *b, gb);
            }
            Op::MatMulNT(a, b) => {
                let ga = g.matmul(self.value(*b))?;
                let gb = g.matmul_tn(self.value(*a))?;
                acc(grads, *a, ga);
                acc(grads, *b, gb);
            }
            Op::Add(a, b) => {
                acc(grads, *a, g.clone());
                acc(grads, *b, g.clone());
            }
            Op::AddBias(x, bias) => {
                acc(grads, *x, g.clone());
                let mut gb = Tensor::zeros(1, g.cols());
                for r in 0..g.rows() {
                    for (o, &v) in gb.row_mut(0).iter_mut().zip(g.row(r)) {
                        *o += v;
                    }
                }
                acc(grads, *bias, gb);
            }
            Op::Sub(a, b) => {
                acc(grads, *a, g.clone());
                acc(grads, *b, g.scale(-E::ONE));
            }
            Op::Mul(a, b) => {
                let ga = elementwise(g, self.value(*b), |x, y| x * y);
                let gb = elementwise(g, self.value(*a), |x, y| x * y);
                acc(grads, *a, ga);
                acc(grads, *b, gb);
            }
            Op::Affine(x, mul) => {
                acc(grads, *x, g.scale(E::from_f64(*mul)));
            }
            Op::Relu(x) => {
                let gx = elementwise(g, self.value(*x), |gi, xi| {
                    if xi > E::ZERO {
                        gi
                    } else {
                        E::ZERO
                    }
                });
                acc(grads, *x, gx);
            }
            Op::Sigmoid(x) => {
                let gx = elementwise(g, &node.value, |gi, yi| gi * yi * (E::ONE - yi));
                acc(grads, *x, gx);
            }
            Op::Tanh(x) => {
                let gx = elementwise(g, &node.value, |gi, yi| gi * (E::ONE - yi * yi));
                acc(grads, *x, gx);
            }
            Op::Exp(x) => {
                let gx = elementwise(g, &node.value, |gi, yi| gi * yi);
                acc(grads, *x, gx);
            }
            Op::Square(x) => {
                let two = E::from_f64(2.0);
                let gx = elementwise(g, self.value(*x), |gi, xi| gi * xi * two);
                acc(grads, *x, gx);
            }
            Op::SoftmaxRows(x) => {
                let y = &node.value;
                let mut gx = Tensor::zeros(y.rows(), y.cols());
                for r in 0..y.rows() {
                    let mut dot = E::ZERO;
                    for (gi, yi) in g.row(r).iter().zip(y.row(r)) {
                        dot += *gi * *yi;
                    }
                    for c in 0..y.cols() {
                        gx.set(r, c, y.get(r, c) * (g.get(r, c) - dot));
                    }
                }
                acc(grads, *x, gx);
            }
            Op::LogSoftmaxRows(x) => {
                let y = &node.value;
                let mut gx = Tensor::zeros(y.rows(), y.cols());
                for r in 0..y.rows() {
                    let mut gsum = E::ZERO;
                    for gi in g.row(r) {
                        gsum += *gi;
                    }
                    for c in 0..y.cols() {
                        let p = y.get(r, c).exp();
                        gx.set(r, c, g.get(r, c) - p * gsum);
                    }
                }
                acc(grads, *x, gx);
            }
            Op::LayerNormRows { x, gamma, beta, eps } => {
                let xv = self.value(*x);
                let gv = self.value(*gamma);
                let d = xv.cols();
                let dn = E::from_f64(d as f64);
                let mut gx = Tensor::zeros(xv.rows(), d);
                let mut ggamma = Tensor::zeros(1, d);
                let mut gbeta = Tensor::zeros(1, d);
                for r in 0..xv.rows() {
                    let row = xv.row(r);
                    let (mean, var) = mean_var(row);
                    let denom = (var + E::from_f64(*eps)).sqrt();
                    let mut u = vec![E::ZERO; d];
                    let mut hat = vec![E::ZERO; d];
                    let mut m1 = E::ZERO;
                    let mut m2 = E::ZERO;
                    for c in 0..d {
                        hat[c] = (row[c] - mean) / denom;
                        u[c] = gv.get(0, c) * g.get(r, c);
                        m1 += u[c];
                        m2 += u[c] * hat[c];
                        ggamma.set(0, c, ggamma.get(0, c) + g.get(r, c) * hat[c]);
                        gbeta.set(0, c, gbeta.get(0, c) + g.get(r, c));
                    }
                    m1 /= dn;
                    m2 /= dn;
                    for c in 0..d {
                        gx.set(r, c, (u[c] - m1 - hat[c] * m2) / denom);
                    }
                }
                acc(grads, *x, gx);
                acc(grads, *gamma, ggamma);
                acc(grads, *beta, gbeta);
            }
            Op::CrossEntropy { logits, label } => {
                let gs = g.value();
                let lv = self.value(*logits);
                let mut probs = vec![E::ZERO; lv.cols()];
                softmax_row(lv.row(0), &mut probs);
                let mut gl = Tensor::zeros(1, lv.cols());
                for c in 0..lv.cols() {
                    let indicator = if c == *label { E::ONE } else { E::ZERO };
                    gl.set(0, c, gs * (probs[c] - indicator));
                }
                acc(grads, *logits, gl);
            }
            Op::L1Mean(a, b) => {
                let gs = g.value();
                let av = self.value(*a);
                let bv = self.value(*b);
                let n = E::from_f64(av.len() as f64);
                let mut ga = Tensor::zeros(av.rows(), av.cols());
                for (o, (&x, &y)) in ga.data_mut().iter_mut().zip(av.data().iter().zip(bv.data())) {
                    let s = if x > y {
                        E::ONE
                    } else if x < y {
                        -E::ONE
                    } else {
                        E::ZERO
                    };
                    *o = gs * s / n;
                }
                let gb = ga.scale(-E::ONE);
                acc(grads, *a, ga);
                acc(grads, *b, gb);
            }
            Op::Clamp { x, lo, hi } => {
                let l = E::from_f64(*lo);
                let h = E::from_f64(*hi);
                let gx = elementwise(g, self.value(*x), |gi, xi| {
                    if xi >= l && xi <= h {
                        gi
                    } else {
                        E::ZERO
                    }
                });
                acc(grads, *x, gx);
            }
            Op::Min2(a, b) => {
                let av = self.value(*a);
                let bv = self.value(*b);
                let mut ga = Tensor::zeros(av.rows(), av.cols());
                let mut gb = Tensor::zeros(av.rows(), av.cols());
                for i in 0..av.len() {
                    if av.data()[i] <= bv.data()[i] {
                        ga.data_mut()[i] = g.data()[i];
                    } else {
                        gb.data_mut()[i] = g.data()[i];
                    }
                }
                acc(grads, *a, ga);
                acc(grads, *b, gb);
            }
            Op::Pick { x, row, col } => {
                let (r, c) = self.shape(*x);
                let mut gx = Tensor::zeros(r, c);
                gx.set(*row, *col, g.value());
                acc(grads, *x, gx);
            }
            Op::SliceRows { x, start, len } => {
                let (r, c) = self.shape(*x);
                let mut gx = Tensor::zeros(r, c);
                for i in 0..*len {
                    gx.row_mut(start + i).copy_from_slice(g.row(i));
                }
                acc(grads, *x, gx);
            }
            Op::SliceCols { x, start, len } => {
                let (r, c) = self.shape(*x);
                let mut gx = Tensor::zeros(r, c);
                for i in 0..r {
                    gx.row_mut(i)[*start..start + len].copy_from_slice(g.row(i));
                }
                acc(grads, *x, gx);
            }
            Op::ConcatCols(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let (r, c) = self.shape(p);
                    let mut gp = Tensor::zeros(r, c);
                    for i in 0..r {
                        gp.row_mut(i).copy_from_slice(&g.row(i)[offset..offset + c]);
                    }
                    offset += c;
                    acc(grads, p, gp);
                }
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let (r, c) = self.shape(p);
                    let mut gp = Tensor::zeros(r, c);
                    for i in 0..r {
                        gp.row_mut(i).copy_from_slice(g.row(offset + i));
                    }
                    offset += r;
                    acc(grads, p, gp);
                }
            }
            Op::RepeatRow { x, n } => {
                let (_, c) = self.shape(*x);
                let mut gx = Tensor::zeros(1, c);
                for r in 0..*n {
                    for (o, &v) in gx.row_mut(0).iter_mut().zip(g.row(r)) {
                        *o += v;
                    }
                }
                acc(grads, *x, gx);
            }
            Op::MeanAll(x) => {
                let (r, c) = self.shape(*x);
                let scale = g.value() / E::from_f64((r * c) as f64);
                acc(grads, *x, Tensor::full(r, c, scale));
            }
            Op::SumAll(x) => {
                let (r, c) = self.shape(*x);
                acc(grads, *x, Tensor::full(r, c, g.value()));
            }
            Op::SumList(parts) => {
                for &p in parts {
                    acc(grads, p, g.clone());
                }
            }
        }
        Ok(())
    }

    /// Adds `scale * dL/dp` into the gradient buffers of every parameter
    /// bound on this tape.
    pub fn accumulate_param_grads(
        &self,
        grads: &Gradients<E>,
        store: &mut ParameterStore<E>,
        scale: E,
    ) -> Result<()> {
        for &(var, id) in &self.bound {
            if let Some(g) = grads.wrt(var) {
                store.accumulate_grad(id, g, scale)?;
            }
        }
        Ok(())
    }

    /// Smallest distance of any input to a non-differentiable point (ReLU and
    /// clamp corners, min ties, absolute-value kinks). Finite-difference
    /// checks reject instances where this margin is below the probe step.
    pub fn kink_margin(&self) -> f64 {
        let mut margin = f64::INFINITY;
        let mut update = |m: f64| {
            if m < margin {
                margin = m;
            }
        };
        for node in &self.nodes {
            match &node.op {
                Op::Relu(x) => {
                    for v in self.value(*x).data() {
                        update(v.to_f64().abs());
                    }
                }
                Op::Clamp { x, lo, hi } => {
                    for v in self.value(*x).data() {
                        let v = v.to_f64();
                        update((v - lo).abs());
                        update((v - hi).abs());
                    }
                }
                Op::Min2(a, b) => {
                    for (x, y) in self.value(*a).data().iter().zip(self.value(*b).data()) {
                        update((x.to_f64() - y.to_f64()).abs());
                    }
                }
                Op::L1Mean(a, b) => {
                    for (x, y) in self.value(*a).data().iter().zip(self.value(*b).data()) {
                        update((x.to_f64() - y.to_f64()).abs());
                    }
                }
                _ => {}
            }
        }
        margin
    }
}

fn elementwise<E: Element>(a: &Tensor<E>, b: &Tensor<E>, f: impl Fn(E, E) -> E) -> Tensor<E> {
    debug_assert_eq!(a.shape(), b.shape());
    let mut out = Tensor::zeros(a.rows(), a.cols());
    for (o, (&x, &y)) in out.data_mut().iter_mut().zip(a.data().iter().zip(b.data())) {
        *o = f(x, y);
    }
    out
}

/// Stable softmax of one row into `out`.
pub fn softmax_row<E: Element>(row: &[E], out: &mut [E]) {
    let mut max = row[0];
    for &v in row {
        max = max.maximum(v);
    }
    let mut total = E::ZERO;
    for (o, &v) in out.iter_mut().zip(row) {
        *o = (v - max).exp();
        total += *o;
    }
    for o in out.iter_mut() {
        *o /= total;
    }
}

/// Stable log-softmax of one row into `out`.
pub fn log_softmax_row<E: Element>(row: &[E], out: &mut [E]) {
    let mut max = row[0];
    for &v in row {
        max = max.maximum(v);
    }
    let mut total = E::ZERO;
    for &v in row {
        total += (v - max).exp();
    }
    let log_z = max + total.ln();
    for (o, &v) in out.iter_mut().zip(row) {
        *o = v - log_z;
    }
}

fn mean_var<E: Element>(row: &[E]) -> (E, E) {
    let n = E::from_f64(row.len() as f64);
    let mut mean = E::ZERO;
    for &v in row {
        mean += v;
    }
    mean /= n;
    let mut var = E::ZERO;
    for &v in row {
        let d = v - mean;
        var += d * d;
    }
    var /= n;
    (mean, var)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar_tape() -> Tape<f64> {
        Tape::new()
    }

    #[test]
    fn softmax_of_log3_logits_matches_closed_form() {
        let mut tape = scalar_tape();
        let x = tape.constant(Tensor::row_vector(vec![(3.0_f64).ln(), 0.0]));
        let y = tape.softmax_rows(x);
        let v = tape.value(y);
        assert!((v.get(0, 0) - 0.75).abs() < 1e-12);
        assert!((v.get(0, 1) - 0.25).abs() < 1e-12);
    }

    #[test]
    fn cross_entropy_of_uniform_logits_is_ln2() {
        let mut tape = scalar_tape();
        let logits = tape.constant(Tensor::row_vector(vec![0.0_f64, 0.0]));
        let loss = tape.cross_entropy(logits, 0).unwrap();
        assert!((tape.scalar(loss) - std::f64::consts::LN_2).abs() < 1e-12);
    }

    #[test]
    fn l1_mean_matches_worked_example() {
        let mut tape = scalar_tape();
        let a = tape.constant(Tensor::row_vector(vec![1.0_f64, -1.0]));
        let b = tape.constant(Tensor::row_vector(vec![3.0_f64, 1.0]));
        let loss = tape.l1_mean(a, b).unwrap();
        assert_eq!(tape.scalar(loss), 2.0);
    }

    #[test]
    fn backward_of_product_matches_partials() {
        let mut tape = scalar_tape();
        let a = tape.constant(Tensor::scalar(3.0_f64));
        let b = tape.constant(Tensor::scalar(4.0_f64));
        let p = tape.mul(a, b).unwrap();
        let grads = tape.backward(p).unwrap();
        assert_eq!(grads.wrt(a).unwrap().value(), 4.0);
        assert_eq!(grads.wrt(b).unwrap().value(), 3.0);
    }

    #[test]
    fn repeated_parameter_use_accumulates_gradient() {
        let mut store = ParameterStore::<f64>::new();
        let id = store.register("w", Tensor::scalar(2.0)).unwrap();
        let mut tape = Tape::new();
        let w = tape.param(&store, id);
        let w_again = tape.param(&store, id);
        assert_eq!(w, w_again);
        // loss = w * w => dloss/dw = 2w = 4
        let loss = tape.mul(w, w_again).unwrap();
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads.wrt(w).unwrap().value(), 4.0);
    }

    #[test]
    fn min2_routes_ties_to_first_operand() {
        let mut tape = scalar_tape();
        let a = tape.constant(Tensor::scalar(1.0_f64));
        let b = tape.constant(Tensor::scalar(1.0_f64));
        let m = tape.min2(a, b).unwrap();
        let grads = tape.backward(m).unwrap();
        assert_eq!(grads.wrt(a).unwrap().value(), 1.0);
        assert!(grads.wrt(b).is_none() || grads.wrt(b).unwrap().value() == 0.0);
    }

    #[test]
    fn kink_margin_sees_relu_inputs() {
        let mut tape = scalar_tape();
        let x = tape.constant(Tensor::row_vector(vec![0.5_f64, -0.02]));
        let _ = tape.relu(x);
        assert!((tape.kink_margin() - 0.02).abs() < 1e-12);
    }

    #[test]
    fn shape_mismatch_is_reported() {
        let mut tape = scalar_tape();
        let a = tape.constant(Tensor::zeros(2, 3));
        let b = tape.constant(Tensor::zeros(3, 2));
        let err = tape.add(a, b).unwrap_err();
        assert!(err.to_string().contains("shape mismatch"));
    }
}
