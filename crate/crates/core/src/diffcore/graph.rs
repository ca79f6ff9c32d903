//! Tape-based reverse-mode differentiation over dense matrices.
//!
//! A [`Graph`] records every operation as a node holding its forward value.
//! [`Graph::backward`] walks the tape in reverse and produces one gradient
//! buffer per node; parameter leaves can then be folded into a
//! [`ParamStore`]. Everything is 2-D: vectors are `1 x n`, scalars `1 x 1`.

use super::{ParamId, ParamStore, Tensor, TensorError};

/// Node handle inside a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Clone, Debug)]
enum Op {
    Input,
    Param(ParamId),
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    AddRow(Var, Var),
    MulCol(Var, Var),
    DivCol(Var, Var),
    ConcatCols(Vec<Var>),
    SliceCols(Var, usize),
    GatherRows(Var, Vec<usize>),
    PickCols(Var, Vec<usize>),
    RowDot(Var, Var),
    RowSum(Var),
    RowL2(Var),
    Relu(Var),
    Sigmoid(Var),
    Exp(Var),
    Log(Var),
    SoftmaxRows(Var),
    LogSoftmaxRows(Var),
    Sum(Var),
    Mean(Var),
    Mse(Var, Var),
    L1(Var),
    L2(Var),
    Min(Var, Var),
    BlockMatMul(Var, Var),
    BlockMean(Var, usize),
    RepeatBlocks(Var, usize),
}

#[derive(Clone, Debug)]
struct Node {
    rows: usize,
    cols: usize,
    value: Vec<f64>,
    op: Op,
    needs_grad: bool,
}

/// Recorded computation. Build it with the op methods, then call
/// [`Graph::backward`] on a scalar node.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    track_kinks: bool,
    kinks: u64,
}

/// Gradient buffers produced by [`Graph::backward`], one per node.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    pub fn wrt(&self, var: Var) -> Option<&[f64]> {
        self.grads[var.0].as_deref()
    }
}

const KINK_SEED: u64 = 0xcbf2_9ce4_8422_2325;

fn mix(h: u64, v: u64) -> u64 {
    (h ^ v).wrapping_mul(0x0000_0100_0000_01b3)
}

fn sign_class(x: f64) -> u64 {
    if x > 0.0 {
        1
    } else if x < 0.0 {
        2
    } else {
        3
    }
}

impl Graph {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            track_kinks: false,
            kinks: KINK_SEED,
        }
    }

    /// Graph that fingerprints which side of every non-differentiable point
    /// each kinked op is evaluated on. Used by gradient checking.
    pub fn with_kink_tracking() -> Self {
        Self {
            track_kinks: true,
            ..Self::new()
        }
    }

    /// Fingerprint of the branch taken by every kinked op so far.
    pub fn kink_signature(&self) -> u64 {
        self.kinks
    }

    /// Folds an externally made discrete decision (for example a threshold
    /// gate) into the kink signature.
    pub fn note_kink(&mut self, code: u64) {
        if self.track_kinks {
            self.kinks = mix(self.kinks, code);
        }
    }

    fn note_signs(&mut self, values: impl Iterator<Item = f64>) {
        if self.track_kinks {
            let mut h = self.kinks;
            for v in values {
                h = mix(h, sign_class(v));
            }
            self.kinks = h;
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn dims(&self, v: Var) -> (usize, usize) {
        let n = &self.nodes[v.0];
        (n.rows, n.cols)
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].value
    }

    /// Value of a `1 x 1` node.
    pub fn scalar(&self, v: Var) -> f64 {
        let n = &self.nodes[v.0];
        debug_assert_eq!(n.value.len(), 1);
        n.value[0]
    }

    pub fn to_tensor(&self, v: Var) -> Tensor {
        let n = &self.nodes[v.0];
        Tensor::matrix(n.rows, n.cols, n.value.clone()).expect("node shape is consistent")
    }

    fn push(&mut self, rows: usize, cols: usize, value: Vec<f64>, op: Op) -> Var {
        debug_assert_eq!(rows * cols, value.len());
        let needs_grad = match &op {
            Op::Input => false,
            Op::Param(_) => true,
            op => op_parents(op).iter().any(|p| self.nodes[p.0].needs_grad),
        };
        self.nodes.push(Node {
            rows,
            cols,
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn node(&self, v: Var) -> &Node {
        &self.nodes[v.0]
    }

    fn mismatch(&self, op: &'static str, a: Var, b: Var) -> TensorError {
        let (ar, ac) = self.dims(a);
        let (br, bc) = self.dims(b);
        TensorError::ShapeMismatch {
            op,
            left: vec![ar, ac],
            right: vec![br, bc],
        }
    }

    // ----- leaves -----

    /// Constant input; never receives a gradient.
    pub fn input(&mut self, t: &Tensor) -> Var {
        let (r, c) = t.dims();
        self.push(r, c, t.values().to_vec(), Op::Input)
    }

    pub fn constant(&mut self, rows: usize, cols: usize, values: Vec<f64>) -> Result<Var, TensorError> {
        if rows * cols != values.len() {
            return Err(TensorError::ShapeMismatch {
                op: "constant",
                left: vec![rows, cols],
                right: vec![values.len()],
            });
        }
        Ok(self.push(rows, cols, values, Op::Input))
    }

    /// Trainable leaf read from `store`.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        let t = store.get(id);
        let (r, c) = t.dims();
        let op = if t.requires_grad() {
            Op::Param(id)
        } else {
            Op::Input
        };
        self.push(r, c, t.values().to_vec(), op)
    }

    /// Reads a parameter as a constant (no gradient flows into it).
    pub fn frozen_param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        self.input(store.get(id))
    }

    // ----- linear algebra -----

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let (m, k) = self.dims(a);
        let (k2, n) = self.dims(b);
        if k != k2 {
            return Err(self.mismatch("matmul", a, b));
        }
        let out = matmul(&self.node(a).value, &self.node(b).value, m, k, n);
        Ok(self.push(m, n, out, Op::MatMul(a, b)))
    }

    /// Applies a square `n x n` matrix to every consecutive block of `n` rows
    /// of `x`, i.e. a block-diagonal product with a shared block.
    pub fn block_matmul(&mut self, left: Var, x: Var) -> Result<Var, TensorError> {
        let (n, n2) = self.dims(left);
        let (rows, cols) = self.dims(x);
        if n != n2 || n == 0 || rows % n != 0 {
            return Err(self.mismatch("block_matmul", left, x));
        }
        let l = &self.node(left).value;
        let xv = &self.node(x).value;
        let mut out = vec![0.0; rows * cols];
        for b in 0..rows / n {
            let off = b * n * cols;
            let block = matmul(l, &xv[off..off + n * cols], n, n, cols);
            out[off..off + n * cols].copy_from_slice(&block);
        }
        Ok(self.push(rows, cols, out, Op::BlockMatMul(left, x)))
    }

    // ----- elementwise -----

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<(usize, usize), TensorError> {
        if self.dims(a) != self.dims(b) {
            return Err(self.mismatch(op, a, b));
        }
        Ok(self.dims(a))
    }

    fn zip_with(&self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Vec<f64> {
        self.node(a)
            .value
            .iter()
            .zip(&self.node(b).value)
            .map(|(&x, &y)| f(x, y))
            .collect()
    }

    fn map(&self, a: Var, f: impl Fn(f64) -> f64) -> Vec<f64> {
        self.node(a).value.iter().map(|&x| f(x)).collect()
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let (r, c) = self.same_shape("add", a, b)?;
        let v = self.zip_with(a, b, |x, y| x + y);
        Ok(self.push(r, c, v, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let (r, c) = self.same_shape("sub", a, b)?;
        let v = self.zip_with(a, b, |x, y| x - y);
        Ok(self.push(r, c, v, Op::Sub(a, b)))
    }

    /// Elementwise (Hadamard) product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let (r, c) = self.same_shape("mul", a, b)?;
        let v = self.zip_with(a, b, |x, y| x * y);
        Ok(self.push(r, c, v, Op::Mul(a, b)))
    }

    /// Elementwise minimum; ties pass the gradient to `a`.
    pub fn min(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let (r, c) = self.same_shape("min", a, b)?;
        let v = self.zip_with(a, b, f64::min);
        if self.track_kinks {
            let diffs = self.zip_with(a, b, |x, y| x - y);
            self.note_signs(diffs.into_iter());
        }
        Ok(self.push(r, c, v, Op::Min(a, b)))
    }

    pub fn scale(&mut self, a: Var, k: f64) -> Var {
        let (r, c) = self.dims(a);
        let v = self.map(a, |x| x * k);
        self.push(r, c, v, Op::Scale(a, k))
    }

    pub fn add_scalar(&mut self, a: Var, k: f64) -> Var {
        let (r, c) = self.dims(a);
        let v = self.map(a, |x| x + k);
        self.push(r, c, v, Op::AddScalar(a))
    }

    /// `a (r x c) + row (1 x c)` broadcast down the rows.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var, TensorError> {
        let (r, c) = self.dims(a);
        if self.dims(row) != (1, c) {
            return Err(self.mismatch("add_row", a, row));
        }
        let rv = &self.node(row).value;
        let v: Vec<f64> = self
            .node(a)
            .value
            .iter()
            .enumerate()
            .map(|(i, x)| x + rv[i % c])
            .collect();
        Ok(self.push(r, c, v, Op::AddRow(a, row)))
    }

    /// Scales each row of `a (r x c)` by the matching entry of `col (r x 1)`.
    pub fn mul_col(&mut self, a: Var, col: Var) -> Result<Var, TensorError> {
        let (r, c) = self.dims(a);
        if self.dims(col) != (r, 1) {
            return Err(self.mismatch("mul_col", a, col));
        }
        let s = &self.node(col).value;
        let v: Vec<f64> = self
            .node(a)
            .value
            .iter()
            .enumerate()
            .map(|(i, x)| x * s[i / c])
            .collect();
        Ok(self.push(r, c, v, Op::MulCol(a, col)))
    }

    /// Divides each row of `a (r x c)` by the matching entry of `col (r x 1)`.
    pub fn div_col(&mut self, a: Var, col: Var) -> Result<Var, TensorError> {
        let (r, c) = self.dims(a);
        if self.dims(col) != (r, 1) {
            return Err(self.mismatch("div_col", a, col));
        }
        let s = &self.node(col).value;
        let v: Vec<f64> = self
            .node(a)
            .value
            .iter()
            .enumerate()
            .map(|(i, x)| x / s[i / c])
            .collect();
        Ok(self.push(r, c, v, Op::DivCol(a, col)))
    }

    /// Rectifier; the subgradient at 0 is 0.
    pub fn relu(&mut self, a: Var) -> Var {
        let (r, c) = self.dims(a);
        if self.track_kinks {
            let vals = self.node(a).value.clone();
            self.note_signs(vals.into_iter());
        }
        let v = self.map(a, |x| x.max(0.0));
        self.push(r, c, v, Op::Relu(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let (r, c) = self.dims(a);
        let v = self.map(a, |x| 1.0 / (1.0 + (-x).exp()));
        self.push(r, c, v, Op::Sigmoid(a))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let (r, c) = self.dims(a);
        let v = self.map(a, f64::exp);
        self.push(r, c, v, Op::Exp(a))
    }

    pub fn log(&mut self, a: Var) -> Var {
        let (r, c) = self.dims(a);
        let v = self.map(a, f64::ln);
        self.push(r, c, v, Op::Log(a))
    }

    // ----- shape ops -----

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var, TensorError> {
        let Some(&first) = parts.first() else {
            return Err(TensorError::Empty("concat_cols"));
        };
        let rows = self.dims(first).0;
        for &p in parts {
            if self.dims(p).0 != rows {
                return Err(self.mismatch("concat_cols", first, p));
            }
        }
        let cols: usize = parts.iter().map(|&p| self.dims(p).1).sum();
        let mut v = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for &p in parts {
                let (_, pc) = self.dims(p);
                v.extend_from_slice(&self.node(p).value[r * pc..(r + 1) * pc]);
            }
        }
        Ok(self.push(rows, cols, v, Op::ConcatCols(parts.to_vec())))
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Result<Var, TensorError> {
        let (r, c) = self.dims(a);
        if start + len > c || len == 0 {
            return Err(TensorError::ShapeMismatch {
                op: "slice_cols",
                left: vec![r, c],
                right: vec![start, len],
            });
        }
        let av = &self.node(a).value;
        let mut v = Vec::with_capacity(r * len);
        for row in 0..r {
            v.extend_from_slice(&av[row * c + start..row * c + start + len]);
        }
        Ok(self.push(r, len, v, Op::SliceCols(a, start)))
    }

    /// Selects rows by index (rows may repeat).
    pub fn gather_rows(&mut self, a: Var, rows: &[usize]) -> Result<Var, TensorError> {
        let (r, c) = self.dims(a);
        if let Some(&bad) = rows.iter().find(|&&i| i >= r) {
            return Err(TensorError::Index { op: "gather_rows", index: bad, bound: r });
        }
        let av = &self.node(a).value;
        let mut v = Vec::with_capacity(rows.len() * c);
        for &i in rows {
            v.extend_from_slice(&av[i * c..(i + 1) * c]);
        }
        Ok(self.push(rows.len(), c, v, Op::GatherRows(a, rows.to_vec())))
    }

    /// Picks one column per row: `out[r] = a[r, cols[r]]`, shape `r x 1`.
    pub fn pick_cols(&mut self, a: Var, cols: &[usize]) -> Result<Var, TensorError> {
        let (r, c) = self.dims(a);
        if cols.len() != r {
            return Err(TensorError::ShapeMismatch {
                op: "pick_cols",
                left: vec![r, c],
                right: vec![cols.len()],
            });
        }
        if let Some(&bad) = cols.iter().find(|&&j| j >= c) {
            return Err(TensorError::Index { op: "pick_cols", index: bad, bound: c });
        }
        let av = &self.node(a).value;
        let v = cols.iter().enumerate().map(|(row, &j)| av[row * c + j]).collect();
        Ok(self.push(r, 1, v, Op::PickCols(a, cols.to_vec())))
    }

    /// Mean of each consecutive block of `n` rows: `(B*n) x c -> B x c`.
    pub fn block_mean(&mut self, a: Var, n: usize) -> Result<Var, TensorError> {
        let (r, c) = self.dims(a);
        if n == 0 || r % n != 0 {
            return Err(TensorError::ShapeMismatch {
                op: "block_mean",
                left: vec![r, c],
                right: vec![n],
            });
        }
        let blocks = r / n;
        let av = &self.node(a).value;
        let mut v = vec![0.0; blocks * c];
        for b in 0..blocks {
            for i in 0..n {
                let row = &av[(b * n + i) * c..(b * n + i + 1) * c];
                for (o, x) in v[b * c..(b + 1) * c].iter_mut().zip(row) {
                    *o += x;
                }
            }
        }
        let inv = 1.0 / n as f64;
        v.iter_mut().for_each(|x| *x *= inv);
        Ok(self.push(blocks, c, v, Op::BlockMean(a, n)))
    }

    /// Repeats every row `n` times consecutively: `B x c -> (B*n) x c`.
    pub fn repeat_blocks(&mut self, a: Var, n: usize) -> Var {
        let (r, c) = self.dims(a);
        let av = &self.node(a).value;
        let mut v = Vec::with_capacity(r * n * c);
        for b in 0..r {
            for _ in 0..n {
                v.extend_from_slice(&av[b * c..(b + 1) * c]);
            }
        }
        self.push(r * n, c, v, Op::RepeatBlocks(a, n))
    }

    // ----- row reductions -----

    pub fn row_dot(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let (r, c) = self.same_shape("row_dot", a, b)?;
        let av = &self.node(a).value;
        let bv = &self.node(b).value;
        let v = (0..r)
            .map(|i| {
                av[i * c..(i + 1) * c]
                    .iter()
                    .zip(&bv[i * c..(i + 1) * c])
                    .map(|(x, y)| x * y)
                    .sum()
            })
            .collect();
        Ok(self.push(r, 1, v, Op::RowDot(a, b)))
    }

    pub fn row_sum(&mut self, a: Var) -> Var {
        let (r, c) = self.dims(a);
        let av = &self.node(a).value;
        let v = (0..r).map(|i| av[i * c..(i + 1) * c].iter().sum()).collect();
        self.push(r, 1, v, Op::RowSum(a))
    }

    /// Euclidean norm of each row, `r x 1`. Subgradient 0 at the zero row.
    pub fn row_l2(&mut self, a: Var) -> Var {
        let (r, c) = self.dims(a);
        let av = &self.node(a).value;
        let v: Vec<f64> = (0..r)
            .map(|i| av[i * c..(i + 1) * c].iter().map(|x| x * x).sum::<f64>().sqrt())
            .collect();
        if self.track_kinks {
            self.note_signs(v.clone().into_iter());
        }
        self.push(r, 1, v, Op::RowL2(a))
    }

    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let (r, c) = self.dims(a);
        let mut v = self.node(a).value.clone();
        for row in v.chunks_mut(c) {
            softmax_in_place(row);
        }
        self.push(r, c, v, Op::SoftmaxRows(a))
    }

    pub fn log_softmax_rows(&mut self, a: Var) -> Var {
        let (r, c) = self.dims(a);
        let mut v = self.node(a).value.clone();
        for row in v.chunks_mut(c) {
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = m + row.iter().map(|x| (x - m).exp()).sum::<f64>().ln();
            row.iter_mut().for_each(|x| *x -= lse);
        }
        self.push(r, c, v, Op::LogSoftmaxRows(a))
    }

    // ----- full reductions to 1 x 1 -----

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.node(a).value.iter().sum();
        self.push(1, 1, vec![s], Op::Sum(a))
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = self.node(a).value.len().max(1) as f64;
        let s = self.node(a).value.iter().sum::<f64>() / n;
        self.push(1, 1, vec![s], Op::Mean(a))
    }

    /// Mean squared error between two same-shaped nodes.
    pub fn mse(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.same_shape("mse", a, b)?;
        let n = self.node(a).value.len().max(1) as f64;
        let s = self
            .node(a)
            .value
            .iter()
            .zip(&self.node(b).value)
            .map(|(x, y)| (x - y) * (x - y))
            .sum::<f64>()
            / n;
        Ok(self.push(1, 1, vec![s], Op::Mse(a, b)))
    }

    /// Sum of absolute values; subgradient 0 at 0.
    pub fn l1_norm(&mut self, a: Var) -> Var {
        if self.track_kinks {
            let vals = self.node(a).value.clone();
            self.note_signs(vals.into_iter());
        }
        let s = self.node(a).value.iter().map(|x| x.abs()).sum();
        self.push(1, 1, vec![s], Op::L1(a))
    }

    /// Euclidean norm of all entries; subgradient 0 at the origin.
    pub fn l2_norm(&mut self, a: Var) -> Var {
        let s = self.node(a).value.iter().map(|x| x * x).sum::<f64>().sqrt();
        self.note_signs(std::iter::once(s));
        self.push(1, 1, vec![s], Op::L2(a))
    }

    // ----- reverse pass -----

    /// Reverse-mode sweep from a `1 x 1` loss node.
    pub fn backward(&self, loss: Var) -> Result<Gradients, TensorError> {
        let (r, c) = self.dims(loss);
        if (r, c) != (1, 1) {
            return Err(TensorError::NonScalarLoss(vec![r, c]));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);
        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            if node.needs_grad {
                self.propagate(node, &g, &mut grads);
            }
            grads[idx] = Some(g);
        }
        Ok(Gradients { grads })
    }

    /// Runs [`Graph::backward`] and adds every parameter gradient into `store`.
    pub fn backward_into(&self, loss: Var, store: &mut ParamStore) -> Result<(), TensorError> {
        let grads = self.backward(loss)?;
        self.accumulate(&grads, store);
        Ok(())
    }

    /// Adds the gradients of all parameter leaves into their store tensors.
    pub fn accumulate(&self, grads: &Gradients, store: &mut ParamStore) {
        for (i, node) in self.nodes.iter().enumerate() {
            if let Op::Param(id) = node.op {
                if let Some(g) = &grads.grads[i] {
                    store.get_mut(id).accumulate_grad(g);
                }
            }
        }
    }

    fn propagate(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let wants = |v: Var| self.nodes[v.0].needs_grad;
        let (rows, cols) = (node.rows, node.cols);
        match &node.op {
            Op::Input | Op::Param(_) => {}
            Op::MatMul(a, b) => {
                let (m, k) = self.dims(*a);
                let n = cols;
                if wants(*a) {
                    let ga = matmul_a_bt(g, &self.node(*b).value, m, n, k);
                    add_into(grads, *a, &ga);
                }
                if wants(*b) {
                    let gb = matmul_at_b(&self.node(*a).value, g, m, k, n);
                    add_into(grads, *b, &gb);
                }
            }
            Op::BlockMatMul(l, x) => {
                let (n, _) = self.dims(*l);
                let blocks = rows / n;
                let lv = &self.node(*l).value;
                let xv = &self.node(*x).value;
                if wants(*l) {
                    let mut gl = vec![0.0; n * n];
                    for b in 0..blocks {
                        let off = b * n * cols;
                        let part = matmul_a_bt(&g[off..off + n * cols], &xv[off..off + n * cols], n, cols, n);
                        gl.iter_mut().zip(&part).for_each(|(a, p)| *a += p);
                    }
                    add_into(grads, *l, &gl);
                }
                if wants(*x) {
                    let mut gx = vec![0.0; rows * cols];
                    for b in 0..blocks {
                        let off = b * n * cols;
                        let part = matmul_at_b(lv, &g[off..off + n * cols], n, n, cols);
                        gx[off..off + n * cols].copy_from_slice(&part);
                    }
                    add_into(grads, *x, &gx);
                }
            }
            Op::Add(a, b) => {
                if wants(*a) {
                    add_into(grads, *a, g);
                }
                if wants(*b) {
                    add_into(grads, *b, g);
                }
            }
            Op::Sub(a, b) => {
                if wants(*a) {
                    add_into(grads, *a, g);
                }
                if wants(*b) {
                    let neg: Vec<f64> = g.iter().map(|x| -x).collect();
                    add_into(grads, *b, &neg);
                }
            }
            Op::Mul(a, b) => {
                if wants(*a) {
                    let ga: Vec<f64> = g.iter().zip(&self.node(*b).value).map(|(x, y)| x * y).collect();
                    add_into(grads, *a, &ga);
                }
                if wants(*b) {
                    let gb: Vec<f64> = g.iter().zip(&self.node(*a).value).map(|(x, y)| x * y).collect();
                    add_into(grads, *b, &gb);
                }
            }
            Op::Min(a, b) => {
                let av = &self.node(*a).value;
                let bv = &self.node(*b).value;
                if wants(*a) {
                    let ga: Vec<f64> = (0..g.len()).map(|i| if av[i] <= bv[i] { g[i] } else { 0.0 }).collect();
                    add_into(grads, *a, &ga);
                }
                if wants(*b) {
                    let gb: Vec<f64> = (0..g.len()).map(|i| if av[i] <= bv[i] { 0.0 } else { g[i] }).collect();
                    add_into(grads, *b, &gb);
                }
            }
            Op::Scale(a, k) => {
                let ga: Vec<f64> = g.iter().map(|x| x * k).collect();
                add_into(grads, *a, &ga);
            }
            Op::AddScalar(a) => add_into(grads, *a, g),
            Op::AddRow(a, row) => {
                if wants(*a) {
                    add_into(grads, *a, g);
                }
                if wants(*row) {
                    let mut gr = vec![0.0; cols];
                    for chunk in g.chunks(cols) {
                        gr.iter_mut().zip(chunk).for_each(|(o, x)| *o += x);
                    }
                    add_into(grads, *row, &gr);
                }
            }
            Op::MulCol(a, col) => {
                let av = &self.node(*a).value;
                let s = &self.node(*col).value;
                if wants(*a) {
                    let ga: Vec<f64> = g.iter().enumerate().map(|(i, x)| x * s[i / cols]).collect();
                    add_into(grads, *a, &ga);
                }
                if wants(*col) {
                    let gs: Vec<f64> = (0..rows)
                        .map(|r| (0..cols).map(|j| g[r * cols + j] * av[r * cols + j]).sum())
                        .collect();
                    add_into(grads, *col, &gs);
                }
            }
            Op::DivCol(a, col) => {
                let av = &self.node(*a).value;
                let s = &self.node(*col).value;
                if wants(*a) {
                    let ga: Vec<f64> = g.iter().enumerate().map(|(i, x)| x / s[i / cols]).collect();
                    add_into(grads, *a, &ga);
                }
                if wants(*col) {
                    let gs: Vec<f64> = (0..rows)
                        .map(|r| {
                            let dot: f64 = (0..cols).map(|j| g[r * cols + j] * av[r * cols + j]).sum();
                            -dot / (s[r] * s[r])
                        })
                        .collect();
                    add_into(grads, *col, &gs);
                }
            }
            Op::ConcatCols(parts) => {
                let mut off = 0;
                for p in parts {
                    let (_, pc) = self.dims(*p);
                    if wants(*p) {
                        let mut gp = Vec::with_capacity(rows * pc);
                        for r in 0..rows {
                            gp.extend_from_slice(&g[r * cols + off..r * cols + off + pc]);
                        }
                        add_into(grads, *p, &gp);
                    }
                    off += pc;
                }
            }
            Op::SliceCols(a, start) => {
                let (_, ac) = self.dims(*a);
                let mut ga = vec![0.0; rows * ac];
                for r in 0..rows {
                    ga[r * ac + start..r * ac + start + cols].copy_from_slice(&g[r * cols..(r + 1) * cols]);
                }
                add_into(grads, *a, &ga);
            }
            Op::GatherRows(a, idx) => {
                let (ar, _) = self.dims(*a);
                let mut ga = vec![0.0; ar * cols];
                for (k, &i) in idx.iter().enumerate() {
                    for j in 0..cols {
                        ga[i * cols + j] += g[k * cols + j];
                    }
                }
                add_into(grads, *a, &ga);
            }
            Op::PickCols(a, idx) => {
                let (_, ac) = self.dims(*a);
                let mut ga = vec![0.0; rows * ac];
                for (r, &j) in idx.iter().enumerate() {
                    ga[r * ac + j] = g[r];
                }
                add_into(grads, *a, &ga);
            }
            Op::BlockMean(a, n) => {
                let inv = 1.0 / *n as f64;
                let mut ga = Vec::with_capacity(rows * n * cols);
                for b in 0..rows {
                    for _ in 0..*n {
                        ga.extend(g[b * cols..(b + 1) * cols].iter().map(|x| x * inv));
                    }
                }
                add_into(grads, *a, &ga);
            }
            Op::RepeatBlocks(a, n) => {
                let (ar, _) = self.dims(*a);
                let mut ga = vec![0.0; ar * cols];
                for b in 0..ar {
                    for i in 0..*n {
                        let src = &g[(b * n + i) * cols..(b * n + i + 1) * cols];
                        ga[b * cols..(b + 1) * cols].iter_mut().zip(src).for_each(|(o, x)| *o += x);
                    }
                }
                add_into(grads, *a, &ga);
            }
            Op::RowDot(a, b) => {
                let (_, c) = self.dims(*a);
                let av = &self.node(*a).value;
                let bv = &self.node(*b).value;
                if wants(*a) {
                    let ga: Vec<f64> = bv.iter().enumerate().map(|(i, y)| y * g[i / c]).collect();
                    add_into(grads, *a, &ga);
                }
                if wants(*b) {
                    let gb: Vec<f64> = av.iter().enumerate().map(|(i, x)| x * g[i / c]).collect();
                    add_into(grads, *b, &gb);
                }
            }
            Op::RowSum(a) => {
                let (_, c) = self.dims(*a);
                let ga: Vec<f64> = (0..rows * c).map(|i| g[i / c]).collect();
                add_into(grads, *a, &ga);
            }
            Op::RowL2(a) => {
                let (_, c) = self.dims(*a);
                let av = &self.node(*a).value;
                let ga: Vec<f64> = (0..rows * c)
                    .map(|i| {
                        let norm = node.value[i / c];
                        if norm > 0.0 {
                            g[i / c] * av[i] / norm
                        } else {
                            0.0
                        }
                    })
                    .collect();
                add_into(grads, *a, &ga);
            }
            Op::Relu(a) => {
                let av = &self.node(*a).value;
                let ga: Vec<f64> = g.iter().zip(av).map(|(x, &v)| if v > 0.0 { *x } else { 0.0 }).collect();
                add_into(grads, *a, &ga);
            }
            Op::Sigmoid(a) => {
                let ga: Vec<f64> = g.iter().zip(&node.value).map(|(x, s)| x * s * (1.0 - s)).collect();
                add_into(grads, *a, &ga);
            }
            Op::Exp(a) => {
                let ga: Vec<f64> = g.iter().zip(&node.value).map(|(x, e)| x * e).collect();
                add_into(grads, *a, &ga);
            }
            Op::Log(a) => {
                let ga: Vec<f64> = g.iter().zip(&self.node(*a).value).map(|(x, v)| x / v).collect();
                add_into(grads, *a, &ga);
            }
            Op::SoftmaxRows(a) => {
                let y = &node.value;
                let mut ga = vec![0.0; rows * cols];
                for r in 0..rows {
                    let yr = &y[r * cols..(r + 1) * cols];
                    let gr = &g[r * cols..(r + 1) * cols];
                    let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for j in 0..cols {
                        ga[r * cols + j] = yr[j] * (gr[j] - dot);
                    }
                }
                add_into(grads, *a, &ga);
            }
            Op::LogSoftmaxRows(a) => {
                let y = &node.value;
                let mut ga = vec![0.0; rows * cols];
                for r in 0..rows {
                    let gr = &g[r * cols..(r + 1) * cols];
                    let total: f64 = gr.iter().sum();
                    for j in 0..cols {
                        ga[r * cols + j] = gr[j] - y[r * cols + j].exp() * total;
                    }
                }
                add_into(grads, *a, &ga);
            }
            Op::Sum(a) => {
                let n = self.node(*a).value.len();
                add_into(grads, *a, &vec![g[0]; n]);
            }
            Op::Mean(a) => {
                let n = self.node(*a).value.len();
                add_into(grads, *a, &vec![g[0] / n.max(1) as f64; n]);
            }
            Op::Mse(a, b) => {
                let av = &self.node(*a).value;
                let bv = &self.node(*b).value;
                let k = 2.0 * g[0] / av.len().max(1) as f64;
                if wants(*a) {
                    let ga: Vec<f64> = av.iter().zip(bv).map(|(x, y)| k * (x - y)).collect();
                    add_into(grads, *a, &ga);
                }
                if wants(*b) {
                    let gb: Vec<f64> = av.iter().zip(bv).map(|(x, y)| -k * (x - y)).collect();
                    add_into(grads, *b, &gb);
                }
            }
            Op::L1(a) => {
                let ga: Vec<f64> = self
                    .node(*a)
                    .value
                    .iter()
                    .map(|&x| {
                        if x > 0.0 {
                            g[0]
                        } else if x < 0.0 {
                            -g[0]
                        } else {
                            0.0
                        }
                    })
                    .collect();
                add_into(grads, *a, &ga);
            }
            Op::L2(a) => {
                let norm = node.value[0];
                let ga: Vec<f64> = self
                    .node(*a)
                    .value
                    .iter()
                    .map(|x| if norm > 0.0 { g[0] * x / norm } else { 0.0 })
                    .collect();
                add_into(grads, *a, &ga);
            }
        }
    }
}

fn op_parents(op: &Op) -> Vec<Var> {
    match op {
        Op::Input | Op::Param(_) => vec![],
        Op::MatMul(a, b)
        | Op::Add(a, b)
        | Op::Sub(a, b)
        | Op::Mul(a, b)
        | Op::AddRow(a, b)
        | Op::MulCol(a, b)
        | Op::DivCol(a, b)
        | Op::RowDot(a, b)
        | Op::Mse(a, b)
        | Op::Min(a, b)
        | Op::BlockMatMul(a, b) => vec![*a, *b],
        Op::ConcatCols(parts) => parts.clone(),
        Op::Scale(a, _)
        | Op::AddScalar(a)
        | Op::SliceCols(a, _)
        | Op::GatherRows(a, _)
        | Op::PickCols(a, _)
        | Op::RowSum(a)
        | Op::RowL2(a)
        | Op::Relu(a)
        | Op::Sigmoid(a)
        | Op::Exp(a)
        | Op::Log(a)
        | Op::SoftmaxRows(a)
        | Op::LogSoftmaxRows(a)
        | Op::Sum(a)
        | Op::Mean(a)
        | Op::L1(a)
        | Op::L2(a)
        | Op::BlockMean(a, _)
        | Op::RepeatBlocks(a, _) => vec![*a],
    }
}

fn add_into(grads: &mut [Option<Vec<f64>>], v: Var, delta: &[f64]) {
    match &mut grads[v.0] {
        Some(g) => g.iter_mut().zip(delta).for_each(|(a, b)| *a += b),
        slot @ None => *slot = Some(delta.to_vec()),
    }
}

pub(crate) fn softmax_in_place(row: &mut [f64]) {
    let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for x in row.iter_mut() {
        *x = (*x - m).exp();
        total += *x;
    }
    row.iter_mut().for_each(|x| *x /= total);
}

/// `A (m x k) * B (k x n)`.
pub(crate) fn matmul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let orow = &mut out[i * n..(i + 1) * n];
        for (p, &av) in a[i * k..(i + 1) * k].iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (o, bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    out
}

/// `A (m x n) * B^T` where `B` is `k x n`; result `m x k`.
fn matmul_a_bt(a: &[f64], b: &[f64], m: usize, n: usize, k: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * k];
    for i in 0..m {
        let arow = &a[i * n..(i + 1) * n];
        for j in 0..k {
            let brow = &b[j * n..(j + 1) * n];
            out[i * k + j] = arow.iter().zip(brow).map(|(x, y)| x * y).sum();
        }
    }
    out
}

/// `A^T * G` where `A` is `m x k` and `G` is `m x n`; result `k x n`.
fn matmul_at_b(a: &[f64], g: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; k * n];
    for i in 0..m {
        let grow = &g[i * n..(i + 1) * n];
        for (p, &av) in a[i * k..(i + 1) * k].iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let orow = &mut out[p * n..(p + 1) * n];
            for (o, gv) in orow.iter_mut().zip(grow) {
                *o += av * gv;
            }
        }
    }
    out
}
