use std::sync::Arc;

use super::tensor::{matmul_transposed_a, matmul_transposed_b};
use super::{AutodiffError, Tensor};

/// Largest argument passed to `exp`; beyond this the op saturates.
const EXP_CLAMP: f64 = 700.0;
/// Smallest argument passed to `ln`.
const LOG_FLOOR: f64 = 1e-300;

/// Handle to a node recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
pub(crate) enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    AddScalar(Var),
    Scale(Var, f64),
    ScaleBy { scalar: Var, x: Var },
    MatMul(Var, Var),
    AddRowBroadcast { x: Var, bias: Var },
    Relu(Var),
    Exp(Var),
    Log(Var),
    Square(Var),
    XLogX(Var),
    Sum(Var),
    Mean(Var),
    SumRows(Var),
    SoftmaxRows(Var),
    LogSoftmaxRows(Var),
    CrossEntropy { logits: Var, targets: Arc<Vec<usize>>, probs: Tensor },
    Mse { pred: Var, target: Arc<Tensor> },
    GatherCols { x: Var, cols: Arc<Vec<usize>> },
    SelectRows { x: Var, rows: Arc<Vec<usize>> },
    ConcatCols(Vec<Var>),
    Reshape(Var),
}

impl Op {
    fn inputs(&self) -> Vec<Var> {
        use Op::*;
        match self {
            Leaf => vec![],
            Add(a, b) | Sub(a, b) | Mul(a, b) | Div(a, b) | MatMul(a, b) => vec![*a, *b],
            ScaleBy { scalar, x } => vec![*scalar, *x],
            AddRowBroadcast { x, bias } => vec![*x, *bias],
            AddScalar(a) | Scale(a, _) | Relu(a) | Exp(a) | Log(a) | Square(a) | XLogX(a)
            | Sum(a) | Mean(a) | SumRows(a) | SoftmaxRows(a) | LogSoftmaxRows(a)
            | Reshape(a) => vec![*a],
            CrossEntropy { logits, .. } => vec![*logits],
            Mse { pred, .. } => vec![*pred],
            GatherCols { x, .. } | SelectRows { x, .. } => vec![*x],
            ConcatCols(parts) => parts.clone(),
        }
    }

    pub(crate) fn name(&self) -> &'static str {
        use Op::*;
        match self {
            Leaf => "leaf",
            Add(..) => "add",
            Sub(..) => "sub",
            Mul(..) => "mul",
            Div(..) => "div",
            AddScalar(..) => "add_scalar",
            Scale(..) => "scale",
            ScaleBy { .. } => "scale_by",
            MatMul(..) => "matmul",
            AddRowBroadcast { .. } => "add_row_broadcast",
            Relu(..) => "relu",
            Exp(..) => "exp",
            Log(..) => "log",
            Square(..) => "square",
            XLogX(..) => "xlogx",
            Sum(..) => "sum",
            Mean(..) => "mean",
            SumRows(..) => "sum_rows",
            SoftmaxRows(..) => "softmax_rows",
            LogSoftmaxRows(..) => "log_softmax_rows",
            CrossEntropy { .. } => "cross_entropy",
            Mse { .. } => "mse",
            GatherCols { .. } => "gather_cols",
            SelectRows { .. } => "select_rows",
            ConcatCols(..) => "concat_cols",
            Reshape(..) => "reshape",
        }
    }
}

struct Node {
    value: Arc<Tensor>,
    op: Op,
    requires_grad: bool,
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    /// Gradient of the root with respect to `var`; zero when `var` is not on
    /// any path to the root.
    pub fn wrt(&self, var: Var) -> Tensor {
        match &self.grads[var.0] {
            Some(g) => g.clone(),
            None => Tensor::zeros(&self.shapes[var.0]),
        }
    }
}

/// Reverse-mode tape. Records are appended in evaluation order, so every
/// input of a record precedes it; `backward` replays them once, in reverse.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

type OpResult = Result<Var, AutodiffError>;

fn mismatch(op: &'static str, a: &Tensor, b: &Tensor) -> AutodiffError {
    AutodiffError::ShapeMismatch {
        op,
        left: a.shape().to_vec(),
        right: b.shape().to_vec(),
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

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn op_name(&self, v: Var) -> &'static str {
        self.nodes[v.0].op.name()
    }

    /// Checks that every record only references earlier records.
    pub fn is_topologically_ordered(&self) -> bool {
        self.nodes
            .iter()
            .enumerate()
            .all(|(i, n)| n.op.inputs().iter().all(|v| v.0 < i))
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        let requires_grad = op.inputs().iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value: Arc::new(value),
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Tracked leaf: gradients are accumulated for it.
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.nodes.push(Node {
            value: Arc::new(value),
            op: Op::Leaf,
            requires_grad: true,
        });
        Var(self.nodes.len() - 1)
    }

    /// Untracked input; no gradient flows into it.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.constant_shared(Arc::new(value))
    }

    pub fn constant_shared(&mut self, value: Arc<Tensor>) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    /// Copy of `v`'s value as a new constant, cutting gradient flow.
    pub fn detach(&mut self, v: Var) -> Var {
        let value = Arc::clone(&self.nodes[v.0].value);
        self.constant_shared(value)
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<(), AutodiffError> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(mismatch(op, ta, tb));
        }
        Ok(())
    }

    fn zip_with(&mut self, op: Op, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> OpResult {
        self.same_shape(op.name(), a, b)?;
        let (ta, tb) = (self.value(a), self.value(b));
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        let out = Tensor::new(ta.shape().to_vec(), data)?;
        Ok(self.push(out, op))
    }

    fn map_with(&mut self, op: Op, a: Var, f: impl Fn(f64) -> f64) -> Var {
        let out = self.value(a).map(f);
        self.push(out, op)
    }

    pub fn add(&mut self, a: Var, b: Var) -> OpResult {
        self.zip_with(Op::Add(a, b), a, b, |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> OpResult {
        self.zip_with(Op::Sub(a, b), a, b, |x, y| x - y)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> OpResult {
        self.zip_with(Op::Mul(a, b), a, b, |x, y| x * y)
    }

    pub fn div(&mut self, a: Var, b: Var) -> OpResult {
        self.zip_with(Op::Div(a, b), a, b, |x, y| x / y)
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        self.map_with(Op::AddScalar(a), a, |x| x + c)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        self.map_with(Op::Scale(a, c), a, |x| x * c)
    }

    pub fn neg(&mut self, a: Var) -> Var {
        self.scale(a, -1.0)
    }

    /// Multiplies every element of `x` by the single-element tensor `scalar`.
    pub fn scale_by(&mut self, scalar: Var, x: Var) -> OpResult {
        let s = self.value(scalar);
        if s.len() != 1 {
            return Err(mismatch("scale_by", s, self.value(x)));
        }
        let s = s.item();
        Ok(self.map_with(Op::ScaleBy { scalar, x }, x, |v| v * s))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> OpResult {
        let out = self.value(a).matmul(self.value(b))?;
        Ok(self.push(out, Op::MatMul(a, b)))
    }

    /// `x (n×m) + bias` where `bias` has `m` elements, added to every row.
    pub fn add_row_broadcast(&mut self, x: Var, bias: Var) -> OpResult {
        let (tx, tb) = (self.value(x), self.value(bias));
        let (n, m) = tx.dims2();
        if !tx.is_matrix() || tb.len() != m {
            return Err(mismatch("add_row_broadcast", tx, tb));
        }
        let mut data = tx.data().to_vec();
        for i in 0..n {
            for (o, &b) in data[i * m..(i + 1) * m].iter_mut().zip(tb.data()) {
                *o += b;
            }
        }
        let out = Tensor::matrix(n, m, data)?;
        Ok(self.push(out, Op::AddRowBroadcast { x, bias }))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.map_with(Op::Relu(a), a, |x| x.max(0.0))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.map_with(Op::Exp(a), a, |x| x.min(EXP_CLAMP).exp())
    }

    pub fn log(&mut self, a: Var) -> Var {
        self.map_with(Op::Log(a), a, |x| x.max(LOG_FLOOR).ln())
    }

    pub fn square(&mut self, a: Var) -> Var {
        self.map_with(Op::Square(a), a, |x| x * x)
    }

    /// `x·ln x`, with `0·ln 0 = 0`. Inputs must be non-negative.
    pub fn xlogx(&mut self, a: Var) -> Var {
        self.map_with(Op::XLogX(a), a, |x| if x > 0.0 { x * x.ln() } else { 0.0 })
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).sum();
        self.push(Tensor::scalar(s), Op::Sum(a))
    }

    pub fn mean(&mut self, a: Var) -> OpResult {
        let t = self.value(a);
        if t.is_empty() {
            return Err(AutodiffError::InvalidInput("mean of empty tensor".into()));
        }
        let m = t.sum() / t.len() as f64;
        Ok(self.push(Tensor::scalar(m), Op::Mean(a)))
    }

    /// Column sums of an `n×k` matrix, returned as `1×k`.
    pub fn sum_rows(&mut self, a: Var) -> OpResult {
        let t = self.value(a);
        if !t.is_matrix() {
            return Err(AutodiffError::InvalidInput(format!(
                "sum_rows expects a matrix, got {:?}",
                t.shape()
            )));
        }
        let (n, k) = t.dims2();
        let mut out = vec![0.0; k];
        for i in 0..n {
            for (o, &v) in out.iter_mut().zip(t.row(i)) {
                *o += v;
            }
        }
        let out = Tensor::matrix(1, k, out)?;
        Ok(self.push(out, Op::SumRows(a)))
    }

    /// Row-wise softmax, stabilized by subtracting each row's maximum.
    pub fn softmax_rows(&mut self, a: Var) -> OpResult {
        let out = softmax_rows_values(self.value(a))?;
        Ok(self.push(out, Op::SoftmaxRows(a)))
    }

    pub fn log_softmax_rows(&mut self, a: Var) -> OpResult {
        let t = self.value(a);
        if !t.is_matrix() {
            return Err(AutodiffError::InvalidInput("log_softmax_rows expects a matrix".into()));
        }
        let (n, k) = t.dims2();
        let mut data = Vec::with_capacity(n * k);
        for i in 0..n {
            let row = t.row(i);
            let lse = log_sum_exp(row);
            data.extend(row.iter().map(|&z| z - lse));
        }
        let out = Tensor::matrix(n, k, data)?;
        Ok(self.push(out, Op::LogSoftmaxRows(a)))
    }

    /// Per-sample `−log softmax(logits)[y]`, evaluated in log space.
    pub fn cross_entropy(&mut self, logits: Var, targets: Arc<Vec<usize>>) -> OpResult {
        let t = self.value(logits);
        let (n, c) = t.dims2();
        if !t.is_matrix() || targets.len() != n {
            return Err(AutodiffError::InvalidInput(format!(
                "cross_entropy: logits {:?} vs {} targets",
                t.shape(),
                targets.len()
            )));
        }
        if let Some(&bad) = targets.iter().find(|&&y| y >= c) {
            return Err(AutodiffError::InvalidInput(format!(
                "class index {bad} out of range for {c} classes"
            )));
        }
        let probs = softmax_rows_values(t)?;
        let losses = (0..n)
            .map(|i| {
                let row = t.row(i);
                log_sum_exp(row) - row[targets[i]]
            })
            .collect();
        let out = Tensor::vector(losses);
        Ok(self.push(out, Op::CrossEntropy { logits, targets, probs }))
    }

    /// Per-sample squared error against a constant target.
    pub fn mse(&mut self, pred: Var, target: Arc<Tensor>) -> OpResult {
        let p = self.value(pred);
        if p.len() != target.len() {
            return Err(mismatch("mse", p, &target));
        }
        let data = p.data().iter().zip(target.data()).map(|(a, b)| (a - b) * (a - b)).collect();
        let out = Tensor::vector(data);
        Ok(self.push(out, Op::Mse { pred, target }))
    }

    /// Picks `x[i, cols[i]]` from every row, giving an `[n]` vector.
    pub fn gather_cols(&mut self, x: Var, cols: Arc<Vec<usize>>) -> OpResult {
        let t = self.value(x);
        let (n, k) = t.dims2();
        if cols.len() != n || cols.iter().any(|&c| c >= k) {
            return Err(AutodiffError::InvalidInput(format!(
                "gather_cols: {} indices for a {n}×{k} matrix",
                cols.len()
            )));
        }
        let data = (0..n).map(|i| t.get(i, cols[i])).collect();
        Ok(self.push(Tensor::vector(data), Op::GatherCols { x, cols }))
    }

    pub fn select_rows(&mut self, x: Var, rows: Arc<Vec<usize>>) -> OpResult {
        let t = self.value(x);
        let n = t.rows();
        if let Some(&bad) = rows.iter().find(|&&r| r >= n) {
            return Err(AutodiffError::InvalidInput(format!(
                "select_rows: row {bad} out of range for {n} rows"
            )));
        }
        let out = t.select_rows(&rows);
        Ok(self.push(out, Op::SelectRows { x, rows }))
    }

    /// Stacks equal-length vectors as the columns of an `n×k` matrix.
    pub fn concat_cols(&mut self, parts: &[Var]) -> OpResult {
        let Some(&first) = parts.first() else {
            return Err(AutodiffError::InvalidInput("concat_cols of nothing".into()));
        };
        let n = self.value(first).len();
        for &p in parts {
            if self.value(p).len() != n {
                return Err(mismatch("concat_cols", self.value(first), self.value(p)));
            }
        }
        let k = parts.len();
        let mut data = vec![0.0; n * k];
        for (j, &p) in parts.iter().enumerate() {
            for (i, &v) in self.value(p).data().iter().enumerate() {
                data[i * k + j] = v;
            }
        }
        let out = Tensor::matrix(n, k, data)?;
        Ok(self.push(out, Op::ConcatCols(parts.to_vec())))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> OpResult {
        let out = self.value(a).reshape(shape)?;
        Ok(self.push(out, Op::Reshape(a)))
    }

    /// Back-propagates from a single-element root.
    pub fn backward(&self, root: Var) -> Result<Gradients, AutodiffError> {
        let root_val = self.value(root);
        if root_val.len() != 1 {
            return Err(AutodiffError::Usage(format!(
                "backward needs a scalar root, got shape {:?}",
                root_val.shape()
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[root.0] = Some(vec![1.0]);

        for idx in (0..=root.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            if node.requires_grad {
                self.propagate(idx, &g, &mut grads);
            }
            grads[idx] = Some(g);
        }

        let shapes = self.nodes.iter().map(|n| n.value.shape().to_vec()).collect();
        let grads = grads
            .into_iter()
            .zip(&self.nodes)
            .map(|(g, n)| {
                g.filter(|_| n.requires_grad)
                    .map(|g| Tensor::new(n.value.shape().to_vec(), g).expect("gradient shape"))
            })
            .collect();
        Ok(Gradients { grads, shapes })
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn accumulate(&self, grads: &mut [Option<Vec<f64>>], v: Var, f: impl FnOnce(&mut [f64])) {
        if !self.wants(v) {
            return;
        }
        let slot = grads[v.0].get_or_insert_with(|| vec![0.0; self.nodes[v.0].value.len()]);
        f(slot);
    }

    fn propagate(&self, idx: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let out = &self.nodes[idx].value;
        let val = |v: Var| -> &Tensor { &self.nodes[v.0].value };
        match &self.nodes[idx].op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.accumulate(grads, *a, |s| add_into(s, g));
                self.accumulate(grads, *b, |s| add_into(s, g));
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, |s| add_into(s, g));
                self.accumulate(grads, *b, |s| {
                    s.iter_mut().zip(g).for_each(|(o, &gv)| *o -= gv)
                });
            }
            Op::Mul(a, b) => {
                let (ta, tb) = (val(*a), val(*b));
                self.accumulate(grads, *a, |s| {
                    for ((o, &gv), &bv) in s.iter_mut().zip(g).zip(tb.data()) {
                        *o += gv * bv;
                    }
                });
                self.accumulate(grads, *b, |s| {
                    for ((o, &gv), &av) in s.iter_mut().zip(g).zip(ta.data()) {
                        *o += gv * av;
                    }
                });
            }
            Op::Div(a, b) => {
                let (ta, tb) = (val(*a), val(*b));
                self.accumulate(grads, *a, |s| {
                    for ((o, &gv), &bv) in s.iter_mut().zip(g).zip(tb.data()) {
                        *o += gv / bv;
                    }
                });
                self.accumulate(grads, *b, |s| {
                    for (((o, &gv), &av), &bv) in
                        s.iter_mut().zip(g).zip(ta.data()).zip(tb.data())
                    {
                        *o -= gv * av / (bv * bv);
                    }
                });
            }
            Op::AddScalar(a) | Op::Reshape(a) => {
                self.accumulate(grads, *a, |s| add_into(s, g));
            }
            Op::Scale(a, c) => {
                self.accumulate(grads, *a, |s| {
                    s.iter_mut().zip(g).for_each(|(o, &gv)| *o += gv * c)
                });
            }
            Op::ScaleBy { scalar, x } => {
                let sv = val(*scalar).item();
                let tx = val(*x);
                self.accumulate(grads, *scalar, |s| {
                    s[0] += g.iter().zip(tx.data()).map(|(gv, xv)| gv * xv).sum::<f64>();
                });
                self.accumulate(grads, *x, |s| {
                    s.iter_mut().zip(g).for_each(|(o, &gv)| *o += gv * sv)
                });
            }
            Op::MatMul(a, b) => {
                let (ta, tb) = (val(*a), val(*b));
                let (m, k) = ta.dims2();
                let n = tb.cols();
                self.accumulate(grads, *a, |s| matmul_transposed_b(g, tb.data(), s, m, n, k));
                self.accumulate(grads, *b, |s| matmul_transposed_a(ta.data(), g, s, m, k, n));
            }
            Op::AddRowBroadcast { x, bias } => {
                let m = val(*bias).len();
                self.accumulate(grads, *x, |s| add_into(s, g));
                self.accumulate(grads, *bias, |s| {
                    for row in g.chunks(m) {
                        add_into(s, row);
                    }
                });
            }
            Op::Relu(a) => {
                let ta = val(*a);
                self.accumulate(grads, *a, |s| {
                    for ((o, &gv), &x) in s.iter_mut().zip(g).zip(ta.data()) {
                        if x > 0.0 {
                            *o += gv;
                        }
                    }
                });
            }
            Op::Exp(a) => {
                let ta = val(*a);
                self.accumulate(grads, *a, |s| {
                    for (((o, &gv), &y), &x) in
                        s.iter_mut().zip(g).zip(out.data()).zip(ta.data())
                    {
                        if x < EXP_CLAMP {
                            *o += gv * y;
                        }
                    }
                });
            }
            Op::Log(a) => {
                let ta = val(*a);
                self.accumulate(grads, *a, |s| {
                    for ((o, &gv), &x) in s.iter_mut().zip(g).zip(ta.data()) {
                        if x > LOG_FLOOR {
                            *o += gv / x;
                        }
                    }
                });
            }
            Op::Square(a) => {
                let ta = val(*a);
                self.accumulate(grads, *a, |s| {
                    for ((o, &gv), &x) in s.iter_mut().zip(g).zip(ta.data()) {
                        *o += 2.0 * gv * x;
                    }
                });
            }
            Op::XLogX(a) => {
                let ta = val(*a);
                self.accumulate(grads, *a, |s| {
                    for ((o, &gv), &x) in s.iter_mut().zip(g).zip(ta.data()) {
                        *o += gv * (x.max(LOG_FLOOR).ln() + 1.0);
                    }
                });
            }
            Op::Sum(a) => {
                self.accumulate(grads, *a, |s| s.iter_mut().for_each(|o| *o += g[0]));
            }
            Op::Mean(a) => {
                let n = val(*a).len() as f64;
                self.accumulate(grads, *a, |s| s.iter_mut().for_each(|o| *o += g[0] / n));
            }
            Op::SumRows(a) => {
                let k = g.len();
                self.accumulate(grads, *a, |s| {
                    for row in s.chunks_mut(k) {
                        add_into(row, g);
                    }
                });
            }
            Op::SoftmaxRows(a) => {
                let k = out.cols();
                self.accumulate(grads, *a, |s| {
                    for ((srow, grow), prow) in
                        s.chunks_mut(k).zip(g.chunks(k)).zip(out.data().chunks(k))
                    {
                        let dot: f64 = grow.iter().zip(prow).map(|(a, b)| a * b).sum();
                        for ((o, &gv), &p) in srow.iter_mut().zip(grow).zip(prow) {
                            *o += p * (gv - dot);
                        }
                    }
                });
            }
            Op::LogSoftmaxRows(a) => {
                let k = out.cols();
                self.accumulate(grads, *a, |s| {
                    for ((srow, grow), lrow) in
                        s.chunks_mut(k).zip(g.chunks(k)).zip(out.data().chunks(k))
                    {
                        let total: f64 = grow.iter().sum();
                        for ((o, &gv), &l) in srow.iter_mut().zip(grow).zip(lrow) {
                            *o += gv - l.exp() * total;
                        }
                    }
                });
            }
            Op::CrossEntropy { logits, targets, probs } => {
                let c = probs.cols();
                self.accumulate(grads, *logits, |s| {
                    for (i, (srow, prow)) in
                        s.chunks_mut(c).zip(probs.data().chunks(c)).enumerate()
                    {
                        for (j, (o, &p)) in srow.iter_mut().zip(prow).enumerate() {
                            let hot = if j == targets[i] { 1.0 } else { 0.0 };
                            *o += g[i] * (p - hot);
                        }
                    }
                });
            }
            Op::Mse { pred, target } => {
                let tp = val(*pred);
                self.accumulate(grads, *pred, |s| {
                    for (((o, &gv), &p), &t) in
                        s.iter_mut().zip(g).zip(tp.data()).zip(target.data())
                    {
                        *o += 2.0 * gv * (p - t);
                    }
                });
            }
            Op::GatherCols { x, cols } => {
                let k = val(*x).cols();
                self.accumulate(grads, *x, |s| {
                    for (i, (&c, &gv)) in cols.iter().zip(g).enumerate() {
                        s[i * k + c] += gv;
                    }
                });
            }
            Op::SelectRows { x, rows } => {
                let k = val(*x).cols();
                self.accumulate(grads, *x, |s| {
                    for (&r, grow) in rows.iter().zip(g.chunks(k)) {
                        add_into(&mut s[r * k..(r + 1) * k], grow);
                    }
                });
            }
            Op::ConcatCols(parts) => {
                let k = parts.len();
                for (j, &p) in parts.iter().enumerate() {
                    self.accumulate(grads, p, |s| {
                        for (i, o) in s.iter_mut().enumerate() {
                            *o += g[i * k + j];
                        }
                    });
                }
            }
        }
    }
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    dst.iter_mut().zip(src).for_each(|(d, &s)| *d += s);
}

pub(crate) fn log_sum_exp(row: &[f64]) -> f64 {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        return max;
    }
    max + row.iter().map(|&z| (z - max).exp()).sum::<f64>().ln()
}

/// Row-wise softmax of an `n×k` matrix without recording anything.
pub fn softmax_rows_values(t: &Tensor) -> Result<Tensor, AutodiffError> {
    if !t.is_matrix() {
        return Err(AutodiffError::InvalidInput(format!(
            "softmax_rows expects a matrix, got {:?}",
            t.shape()
        )));
    }
    let (n, k) = t.dims2();
    let mut data = Vec::with_capacity(n * k);
    for i in 0..n {
        let row = t.row(i);
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let start = data.len();
        data.extend(row.iter().map(|&z| (z - max).exp()));
        let total: f64 = data[start..].iter().sum();
        data[start..].iter_mut().for_each(|v| *v /= total);
    }
    Tensor::matrix(n, k, data)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn m(rows: usize, cols: usize, data: &[f64]) -> Tensor {
        Tensor::matrix(rows, cols, data.to_vec()).unwrap()
    }

    #[test]
    fn matmul_identity() {
        let mut tape = Tape::new();
        let i = tape.constant(Tensor::identity(2));
        let x = tape.constant(m(2, 2, &[1., 2., 3., 4.]));
        let y = tape.matmul(i, x).unwrap();
        assert_eq!(tape.value(y).data(), &[1., 2., 3., 4.]);
    }

    #[test]
    fn matmul_row_by_column() {
        let mut tape = Tape::new();
        let a = tape.constant(m(1, 2, &[1., 2.]));
        let b = tape.constant(m(2, 1, &[3., 4.]));
        let c = tape.matmul(a, b).unwrap();
        assert_eq!(tape.value(c).data(), &[11.]);
    }

    #[test]
    fn matmul_zero_left() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::zeros(&[2, 3]));
        let b = tape.constant(m(3, 2, &[1., -2., 3., 4., 5., 6.]));
        let c = tape.matmul(a, b).unwrap();
        assert_eq!(tape.value(c).shape(), &[2, 2]);
        assert!(tape.value(c).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn matmul_shape_mismatch() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::zeros(&[2, 3]));
        let b = tape.constant(Tensor::zeros(&[2, 3]));
        assert!(matches!(tape.matmul(a, b), Err(AutodiffError::ShapeMismatch { .. })));
    }

    #[test]
    fn matmul_backward_rule() {
        let mut tape = Tape::new();
        let a = tape.leaf(m(1, 2, &[1., 2.]));
        let b = tape.leaf(m(2, 1, &[3., 4.]));
        let c = tape.matmul(a, b).unwrap();
        let s = tape.sum(c);
        let g = tape.backward(s).unwrap();
        // a.grad = g·bᵀ, b.grad = aᵀ·g with g = 1
        assert_eq!(g.wrt(a).data(), &[3., 4.]);
        assert_eq!(g.wrt(b).data(), &[1., 2.]);
    }

    #[test]
    fn softmax_examples() {
        let mut tape = Tape::new();
        let z = tape.constant(m(3, 2, &[0., 0., 3f64.ln(), 0., 1000., 0.]));
        let p = tape.softmax_rows(z).unwrap();
        let p = tape.value(p);
        assert_close!(p.get(0, 0), 0.5, 1e-15);
        assert_close!(p.get(0, 1), 0.5, 1e-15);
        assert_close!(p.get(1, 0), 0.75, 1e-12);
        assert_close!(p.get(1, 1), 0.25, 1e-12);
        assert_close!(p.get(2, 0), 1.0, 1e-12);
        assert!(p.get(2, 1) < 1e-300 || p.get(2, 1) == 0.0);
        assert!(p.all_finite());
    }

    #[test]
    fn cross_entropy_examples() {
        let mut tape = Tape::new();
        let z = tape.constant(m(3, 2, &[0., 0., 9f64.ln(), 0., 9f64.ln(), 0.]));
        let l = tape.cross_entropy(z, Arc::new(vec![0, 0, 1])).unwrap();
        let l = tape.value(l);
        assert_close!(l.data()[0], 2f64.ln(), 1e-12);
        assert_close!(l.data()[1], (10.0f64 / 9.0).ln(), 1e-12);
        assert_close!(l.data()[2], 10f64.ln(), 1e-12);
    }

    #[test]
    fn cross_entropy_rejects_bad_class() {
        let mut tape = Tape::new();
        let z = tape.constant(m(1, 2, &[0., 0.]));
        assert!(matches!(
            tape.cross_entropy(z, Arc::new(vec![2])),
            Err(AutodiffError::InvalidInput(_))
        ));
    }

    #[test]
    fn mse_examples() {
        let mut tape = Tape::new();
        let p = tape.constant(Tensor::vector(vec![3., -1., 0.5]));
        let l = tape.mse(p, Arc::new(Tensor::vector(vec![1., 1., 0.5]))).unwrap();
        assert_eq!(tape.value(l).data(), &[4., 4., 0.]);
        let bad = tape.mse(p, Arc::new(Tensor::vector(vec![1.])));
        assert!(bad.is_err());
    }

    #[test]
    fn backward_sum_of_squares() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::vector(vec![1., 2., 3.]));
        let sq = tape.square(x);
        let s = tape.sum(sq);
        let g = tape.backward(s).unwrap();
        assert_eq!(g.wrt(x).data(), &[2., 4., 6.]);
    }

    #[test]
    fn backward_mean() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::vector(vec![1., -2., 3., 0.5]));
        let mu = tape.mean(x).unwrap();
        let g = tape.backward(mu).unwrap();
        assert_eq!(g.wrt(x).data(), &[0.25; 4]);
    }

    #[test]
    fn backward_constant_root_gives_zero() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::vector(vec![1., 2.]));
        let c = tape.constant(Tensor::scalar(5.0));
        let g = tape.backward(c).unwrap();
        assert_eq!(g.wrt(x).data(), &[0., 0.]);
    }

    #[test]
    fn backward_rejects_non_scalar_root() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::vector(vec![1., 2.]));
        assert!(matches!(tape.backward(x), Err(AutodiffError::Usage(_))));
    }

    #[test]
    fn detach_blocks_gradient() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::vector(vec![2.0]));
        let d = tape.detach(x);
        let y = tape.mul(x, d).unwrap();
        let s = tape.sum(y);
        let g = tape.backward(s).unwrap();
        assert_eq!(g.wrt(x).data(), &[2.0]);
    }

    #[test]
    fn exp_saturates_instead_of_overflowing() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::vector(vec![1e6]));
        let y = tape.exp(x);
        assert!(tape.value(y).all_finite());
    }

    #[test]
    fn records_are_topologically_ordered() {
        let mut tape = Tape::new();
        let x = tape.leaf(m(2, 2, &[1., 2., 3., 4.]));
        let y = tape.relu(x);
        let z = tape.matmul(y, x).unwrap();
        let _ = tape.sum(z);
        assert!(tape.is_topologically_ordered());
    }
}
