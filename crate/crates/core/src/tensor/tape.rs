use super::{Tensor, TensorError};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    /// `b` may be a `1 x cols` row broadcast over the rows of `a`.
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    MulConst(Var, Tensor),
    Scale(Var, f64),
    Shift(Var),
    Concat(Var, Var),
    Sigmoid(Var),
    LogSigmoid(Var),
    Relu(Var),
    Log(Var),
    Exp(Var),
    Square(Var),
    Clamp(Var, f64, f64),
    SelectRows(Var, Vec<usize>),
    SoftmaxRows(Var),
    Sum(Var),
    WeightedSum(Var, Tensor),
    RowSum(Var),
    ColMean(Var),
    StandardizeCols {
        input: Var,
        inv_std: Vec<f64>,
    },
    /// Scalar node with externally supplied local gradients.
    Custom {
        parents: Vec<Var>,
        grads: Vec<Tensor>,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
}

/// A single forward/backward recording. Build one per optimization step.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

type OpResult = Result<Var, TensorError>;

fn mismatch(op: &'static str, a: &Tensor, b: &Tensor) -> TensorError {
    TensorError::ShapeMismatch {
        op,
        lhs: a.shape(),
        rhs: b.shape(),
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn log_sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        -(-x).exp().ln_1p()
    } else {
        x - x.exp().ln_1p()
    }
}

/// Row-broadcast compatible: same shape, or `b` is `1 x a.cols`.
fn broadcastable(a: &Tensor, b: &Tensor) -> bool {
    a.shape() == b.shape() || (b.rows == 1 && b.cols == a.cols)
}

fn zip_broadcast(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    let mut out = a.clone();
    if a.shape() == b.shape() {
        for (o, &y) in out.data.iter_mut().zip(&b.data) {
            *o = f(*o, y);
        }
    } else {
        for r in 0..a.rows {
            for c in 0..a.cols {
                let o = &mut out.data[r * a.cols + c];
                *o = f(*o, b.data[c]);
            }
        }
    }
    out
}

/// Reduces a gradient of `a`'s shape back to `b`'s shape (sums broadcast rows).
fn unbroadcast(grad: &Tensor, target: (usize, usize)) -> Tensor {
    if grad.shape() == target {
        return grad.clone();
    }
    let mut out = Tensor::zeros(1, grad.cols);
    for r in 0..grad.rows {
        for c in 0..grad.cols {
            out.data[c] += grad.data[r * grad.cols + c];
        }
    }
    out
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

    fn push(&mut self, value: Tensor, op: Op, name: &'static str) -> OpResult {
        if !value.is_finite() {
            return Err(TensorError::NonFinite(name));
        }
        self.nodes.push(Node { value, op });
        Ok(Var(self.nodes.len() - 1))
    }

    /// Leaf node (parameter or constant input).
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, "leaf")
            .expect("leaf values must be finite")
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> OpResult {
        let value = self.value(a).matmul(self.value(b))?;
        self.push(value, Op::MatMul(a, b), "matmul")
    }

    pub fn add(&mut self, a: Var, b: Var) -> OpResult {
        let (ta, tb) = (self.value(a), self.value(b));
        if !broadcastable(ta, tb) {
            return Err(mismatch("add", ta, tb));
        }
        let value = zip_broadcast(ta, tb, |x, y| x + y);
        self.push(value, Op::Add(a, b), "add")
    }

    pub fn sub(&mut self, a: Var, b: Var) -> OpResult {
        let (ta, tb) = (self.value(a), self.value(b));
        if !broadcastable(ta, tb) {
            return Err(mismatch("sub", ta, tb));
        }
        let value = zip_broadcast(ta, tb, |x, y| x - y);
        self.push(value, Op::Sub(a, b), "sub")
    }

    /// Elementwise product of equal-shape nodes.
    pub fn mul(&mut self, a: Var, b: Var) -> OpResult {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(mismatch("mul", ta, tb));
        }
        let value = zip_broadcast(ta, tb, |x, y| x * y);
        self.push(value, Op::Mul(a, b), "mul")
    }

    /// Elementwise product with a constant of the same shape.
    pub fn mul_const(&mut self, a: Var, c: Tensor) -> OpResult {
        let ta = self.value(a);
        if ta.shape() != c.shape() {
            return Err(mismatch("mul_const", ta, &c));
        }
        let value = zip_broadcast(ta, &c, |x, y| x * y);
        self.push(value, Op::MulConst(a, c), "mul_const")
    }

    pub fn scale(&mut self, a: Var, s: f64) -> OpResult {
        let value = self.value(a).map(|x| x * s);
        self.push(value, Op::Scale(a, s), "scale")
    }

    pub fn add_scalar(&mut self, a: Var, s: f64) -> OpResult {
        let value = self.value(a).map(|x| x + s);
        self.push(value, Op::Shift(a), "add_scalar")
    }

    /// Column-wise concatenation `[a | b]`.
    pub fn concat(&mut self, a: Var, b: Var) -> OpResult {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.rows != tb.rows {
            return Err(mismatch("concat", ta, tb));
        }
        let cols = ta.cols + tb.cols;
        let mut data = Vec::with_capacity(ta.rows * cols);
        for r in 0..ta.rows {
            data.extend_from_slice(ta.row_slice(r));
            data.extend_from_slice(tb.row_slice(r));
        }
        let value = Tensor::new(ta.rows, cols, data)?;
        self.push(value, Op::Concat(a, b), "concat")
    }

    pub fn sigmoid(&mut self, a: Var) -> OpResult {
        let value = self.value(a).map(sigmoid);
        self.push(value, Op::Sigmoid(a), "sigmoid")
    }

    /// Numerically stable `ln(sigmoid(a))`.
    pub fn log_sigmoid(&mut self, a: Var) -> OpResult {
        let value = self.value(a).map(log_sigmoid);
        self.push(value, Op::LogSigmoid(a), "log_sigmoid")
    }

    pub fn relu(&mut self, a: Var) -> OpResult {
        let value = self.value(a).map(|x| x.max(0.0));
        self.push(value, Op::Relu(a), "relu")
    }

    pub fn log(&mut self, a: Var) -> OpResult {
        let value = self.value(a).map(f64::ln);
        self.push(value, Op::Log(a), "log")
    }

    pub fn exp(&mut self, a: Var) -> OpResult {
        let value = self.value(a).map(f64::exp);
        self.push(value, Op::Exp(a), "exp")
    }

    /// Gathers rows `idx` (repeats allowed); gradients scatter-add back.
    pub fn select_rows(&mut self, a: Var, idx: &[usize]) -> OpResult {
        let ta = self.value(a);
        if let Some(&bad) = idx.iter().find(|&&i| i >= ta.rows) {
            return Err(TensorError::ShapeMismatch {
                op: "select_rows",
                lhs: ta.shape(),
                rhs: (bad, 0),
            });
        }
        let value = ta.select_rows(idx);
        self.push(value, Op::SelectRows(a, idx.to_vec()), "select_rows")
    }

    /// Clamps into `[lo, hi]`; the gradient is zero where the input was clipped.
    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> OpResult {
        let value = self.value(a).map(|x| x.clamp(lo, hi));
        self.push(value, Op::Clamp(a, lo, hi), "clamp")
    }

    pub fn square(&mut self, a: Var) -> OpResult {
        let value = self.value(a).map(|x| x * x);
        self.push(value, Op::Square(a), "square")
    }

    pub fn softmax_rows(&mut self, a: Var) -> OpResult {
        let ta = self.value(a);
        let mut value = ta.clone();
        for r in 0..ta.rows {
            let row = &mut value.data[r * ta.cols..(r + 1) * ta.cols];
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut total = 0.0;
            for x in row.iter_mut() {
                *x = (*x - max).exp();
                total += *x;
            }
            row.iter_mut().for_each(|x| *x /= total);
        }
        self.push(value, Op::SoftmaxRows(a), "softmax_rows")
    }

    /// Sum of all entries, as a scalar.
    pub fn sum(&mut self, a: Var) -> OpResult {
        let value = Tensor::scalar(self.value(a).data.iter().sum());
        self.push(value, Op::Sum(a), "sum")
    }

    /// Mean of all entries, as a scalar.
    pub fn mean(&mut self, a: Var) -> OpResult {
        let n = self.value(a).len() as f64;
        let total = self.sum(a)?;
        self.scale(total, 1.0 / n)
    }

    /// `sum_ij w_ij a_ij` with constant weights of the same shape.
    pub fn weighted_sum(&mut self, a: Var, weights: Tensor) -> OpResult {
        let ta = self.value(a);
        if ta.shape() != weights.shape() {
            return Err(mismatch("weighted_sum", ta, &weights));
        }
        let value = Tensor::scalar(ta.data.iter().zip(&weights.data).map(|(x, w)| x * w).sum());
        self.push(value, Op::WeightedSum(a, weights), "weighted_sum")
    }

    /// Per-row sums as an `rows x 1` column.
    pub fn row_sum(&mut self, a: Var) -> OpResult {
        let ta = self.value(a);
        let value = Tensor::column((0..ta.rows).map(|r| ta.row_slice(r).iter().sum()).collect());
        self.push(value, Op::RowSum(a), "row_sum")
    }

    /// Per-column means as a `1 x cols` row.
    pub fn col_mean(&mut self, a: Var) -> OpResult {
        let ta = self.value(a);
        let mut value = Tensor::zeros(1, ta.cols);
        for r in 0..ta.rows {
            for (o, x) in value.data.iter_mut().zip(ta.row_slice(r)) {
                *o += x;
            }
        }
        let n = ta.rows as f64;
        value.data.iter_mut().for_each(|o| *o /= n);
        self.push(value, Op::ColMean(a), "col_mean")
    }

    /// Standardizes each column to zero mean and unit (population) variance,
    /// with `eps` added to the variance.
    pub fn standardize_cols(&mut self, a: Var, eps: f64) -> OpResult {
        let ta = self.value(a);
        let (rows, cols) = ta.shape();
        let n = rows as f64;
        let mut mean = vec![0.0; cols];
        for r in 0..rows {
            for (m, x) in mean.iter_mut().zip(ta.row_slice(r)) {
                *m += x / n;
            }
        }
        let mut var = vec![0.0; cols];
        for r in 0..rows {
            for c in 0..cols {
                let d = ta.get(r, c) - mean[c];
                var[c] += d * d / n;
            }
        }
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let mut value = ta.clone();
        for r in 0..rows {
            for c in 0..cols {
                value.data[r * cols + c] = (ta.get(r, c) - mean[c]) * inv_std[c];
            }
        }
        self.push(
            value,
            Op::StandardizeCols { input: a, inv_std },
            "standardize_cols",
        )
    }

    /// Scalar node whose value and local gradients were computed elsewhere.
    pub fn custom_scalar(&mut self, value: f64, parents: Vec<Var>, grads: Vec<Tensor>) -> OpResult {
        assert_eq!(parents.len(), grads.len());
        for (p, g) in parents.iter().zip(&grads) {
            let tp = self.value(*p);
            if tp.shape() != g.shape() {
                return Err(mismatch("custom_scalar", tp, g));
            }
        }
        self.push(
            Tensor::scalar(value),
            Op::Custom { parents, grads },
            "custom_scalar",
        )
    }

    /// Reverse pass from a scalar root.
    pub fn backward(&self, root: Var) -> Result<Gradients, TensorError> {
        let shape = self.value(root).shape();
        if shape != (1, 1) {
            return Err(TensorError::NonScalarRoot(shape));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        grads[root.0] = Some(Tensor::scalar(1.0));

        fn accumulate(grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
            match &mut grads[v.0] {
                Some(existing) => existing.add_assign(&g),
                slot => *slot = Some(g),
            }
        }

        for index in (0..=root.0).rev() {
            let Some(g) = grads[index].take() else {
                continue;
            };
            let node = &self.nodes[index];
            let out = &node.value;
            match &node.op {
                Op::Leaf => grads[index] = Some(g),
                Op::MatMul(a, b) => {
                    let (ta, tb) = (self.value(*a), self.value(*b));
                    accumulate(&mut grads, *a, g.matmul_nt(tb));
                    accumulate(&mut grads, *b, ta.matmul_tn(&g));
                }
                Op::Add(a, b) => {
                    let tb = self.value(*b).shape();
                    accumulate(&mut grads, *b, unbroadcast(&g, tb));
                    accumulate(&mut grads, *a, g);
                }
                Op::Sub(a, b) => {
                    let tb = self.value(*b).shape();
                    accumulate(&mut grads, *b, unbroadcast(&g, tb).map(|x| -x));
                    accumulate(&mut grads, *a, g);
                }
                Op::Mul(a, b) => {
                    let (ta, tb) = (self.value(*a), self.value(*b));
                    accumulate(&mut grads, *a, zip_broadcast(&g, tb, |x, y| x * y));
                    accumulate(&mut grads, *b, zip_broadcast(&g, ta, |x, y| x * y));
                }
                Op::MulConst(a, c) => {
                    accumulate(&mut grads, *a, zip_broadcast(&g, c, |x, y| x * y))
                }
                Op::Scale(a, s) => accumulate(&mut grads, *a, g.map(|x| x * s)),
                Op::Shift(a) => accumulate(&mut grads, *a, g),
                Op::Concat(a, b) => {
                    let ca = self.value(*a).cols;
                    let cb = self.value(*b).cols;
                    let mut ga = Tensor::zeros(g.rows, ca);
                    let mut gb = Tensor::zeros(g.rows, cb);
                    for r in 0..g.rows {
                        let row = g.row_slice(r);
                        ga.data[r * ca..(r + 1) * ca].copy_from_slice(&row[..ca]);
                        gb.data[r * cb..(r + 1) * cb].copy_from_slice(&row[ca..]);
                    }
                    accumulate(&mut grads, *a, ga);
                    accumulate(&mut grads, *b, gb);
                }
                Op::Sigmoid(a) => {
                    accumulate(
                        &mut grads,
                        *a,
                        zip_broadcast(&g, out, |d, s| d * s * (1.0 - s)),
                    );
                }
                Op::LogSigmoid(a) => {
                    let ta = self.value(*a);
                    accumulate(
                        &mut grads,
                        *a,
                        zip_broadcast(&g, ta, |d, x| d * sigmoid(-x)),
                    );
                }
                Op::Relu(a) => {
                    let ta = self.value(*a);
                    accumulate(
                        &mut grads,
                        *a,
                        zip_broadcast(&g, ta, |d, x| if x > 0.0 { d } else { 0.0 }),
                    );
                }
                Op::Log(a) => {
                    let ta = self.value(*a);
                    accumulate(&mut grads, *a, zip_broadcast(&g, ta, |d, x| d / x));
                }
                Op::Exp(a) => accumulate(&mut grads, *a, zip_broadcast(&g, out, |d, e| d * e)),
                Op::Square(a) => {
                    let ta = self.value(*a);
                    accumulate(&mut grads, *a, zip_broadcast(&g, ta, |d, x| 2.0 * d * x));
                }
                Op::SelectRows(a, idx) => {
                    let (r, c) = self.value(*a).shape();
                    let mut ga = Tensor::zeros(r, c);
                    for (k, &i) in idx.iter().enumerate() {
                        for j in 0..c {
                            ga.data[i * c + j] += g.data[k * c + j];
                        }
                    }
                    accumulate(&mut grads, *a, ga);
                }
                Op::Clamp(a, lo, hi) => {
                    let ta = self.value(*a);
                    let (lo, hi) = (*lo, *hi);
                    accumulate(
                        &mut grads,
                        *a,
                        zip_broadcast(&g, ta, |d, x| if (lo..=hi).contains(&x) { d } else { 0.0 }),
                    );
                }
                Op::SoftmaxRows(a) => {
                    let mut ga = g.clone();
                    for r in 0..out.rows {
                        let s = out.row_slice(r);
                        let d = g.row_slice(r);
                        let dot: f64 = s.iter().zip(d).map(|(s, d)| s * d).sum();
                        for c in 0..out.cols {
                            ga.data[r * out.cols + c] = s[c] * (d[c] - dot);
                        }
                    }
                    accumulate(&mut grads, *a, ga);
                }
                Op::Sum(a) => {
                    let (r, c) = self.value(*a).shape();
                    accumulate(&mut grads, *a, Tensor::full(r, c, g.item()));
                }
                Op::WeightedSum(a, w) => {
                    let s = g.item();
                    accumulate(&mut grads, *a, w.map(|x| x * s));
                }
                Op::RowSum(a) => {
                    let (r, c) = self.value(*a).shape();
                    let mut ga = Tensor::zeros(r, c);
                    for i in 0..r {
                        ga.data[i * c..(i + 1) * c].fill(g.data[i]);
                    }
                    accumulate(&mut grads, *a, ga);
                }
                Op::ColMean(a) => {
                    let (r, c) = self.value(*a).shape();
                    let mut ga = Tensor::zeros(r, c);
                    for i in 0..r {
                        for j in 0..c {
                            ga.data[i * c + j] = g.data[j] / r as f64;
                        }
                    }
                    accumulate(&mut grads, *a, ga);
                }
                Op::StandardizeCols { input, inv_std } => {
                    // out = xhat; dx = inv_std * (dy - mean(dy) - xhat * mean(dy * xhat))
                    let (r, c) = out.shape();
                    let n = r as f64;
                    let mut mean_dy = vec![0.0; c];
                    let mut mean_dy_xhat = vec![0.0; c];
                    for i in 0..r {
                        for j in 0..c {
                            let dy = g.data[i * c + j];
                            mean_dy[j] += dy / n;
                            mean_dy_xhat[j] += dy * out.data[i * c + j] / n;
                        }
                    }
                    let mut ga = Tensor::zeros(r, c);
                    for i in 0..r {
                        for j in 0..c {
                            let k = i * c + j;
                            ga.data[k] = inv_std[j]
                                * (g.data[k] - mean_dy[j] - out.data[k] * mean_dy_xhat[j]);
                        }
                    }
                    accumulate(&mut grads, *input, ga);
                }
                Op::Custom {
                    parents,
                    grads: local,
                } => {
                    let s = g.item();
                    for (p, lg) in parents.iter().zip(local) {
                        accumulate(&mut grads, *p, lg.map(|x| x * s));
                    }
                }
            }
        }
        Ok(Gradients {
            shapes: self.nodes.iter().map(|n| n.value.shape()).collect(),
            grads,
        })
    }
}

/// Result of [`Tape::backward`].
#[derive(Debug)]
pub struct Gradients {
    shapes: Vec<(usize, usize)>,
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient of the root with respect to `v`; exactly zero when `v` does not
    /// influence the root. Only leaves keep their gradient after the pass.
    pub fn wrt(&self, v: Var) -> Tensor {
        match &self.grads[v.0] {
            Some(g) => g.clone(),
            None => {
                let (r, c) = self.shapes[v.0];
                Tensor::zeros(r, c)
            }
        }
    }
}
