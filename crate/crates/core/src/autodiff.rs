//! A small tape-based reverse-mode autodiff over dense `f64` matrices.
//!
//! Every value is a 2-D matrix; scalars are `1 × 1`. A [`Graph`] records the
//! forward computation and [`Graph::backward`] walks it in reverse. Nodes whose
//! inputs never require gradients are skipped on the way back, so frozen
//! weights cost nothing beyond the forward pass.

use std::sync::Arc;

use ndarray::{s, Array2, Axis};

pub type Mat = Array2<f64>;

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

enum Op {
    Leaf,
    MatMul(Var, Var),
    /// `a · bᵀ`
    MatMulT(Var, Var),
    Add(Var, Var),
    /// `a + 1ᵀ b` where `b` is a single row.
    AddRow(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Relu(Var),
    Tanh(Var),
    Reshape(Var),
    SliceCols(Var, usize),
    SliceRows(Var, usize),
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    CausalSoftmax(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Mat,
        inv_std: Vec<f64>,
    },
    Gather {
        table: Var,
        ids: Vec<usize>,
    },
    CrossEntropySum {
        logits: Var,
        targets: Vec<Option<usize>>,
        probs: Mat,
    },
    MeanSquare(Var),
    Sum(Var),
    MeanRows(Var),
    L2NormalizeRows {
        x: Var,
        norms: Vec<f64>,
    },
}

struct Node {
    value: Arc<Mat>,
    op: Op,
    needs_grad: bool,
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Gradients produced by [`Graph::backward`], indexed by [`Var`].
pub struct Grads {
    grads: Vec<Option<Mat>>,
}

impl Grads {
    pub fn get(&self, v: Var) -> Option<&Mat> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Mat> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
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

    fn push(&mut self, value: Mat, op: Op, needs_grad: bool) -> Var {
        self.push_rc(Arc::new(value), op, needs_grad)
    }

    fn push_rc(&mut self, value: Arc<Mat>, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node { value, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub fn value(&self, v: Var) -> &Mat {
        &self.nodes[v.0].value
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value[[0, 0]]
    }

    /// A leaf that takes part in differentiation when `requires_grad` is set.
    pub fn leaf(&mut self, value: Arc<Mat>, requires_grad: bool) -> Var {
        self.push_rc(value, Op::Leaf, requires_grad)
    }

    pub fn param(&mut self, value: Mat) -> Var {
        self.push(value, Op::Leaf, true)
    }

    pub fn constant(&mut self, value: Mat) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// Stop-gradient: a constant copy of `v`'s current value.
    pub fn detach(&mut self, v: Var) -> Var {
        let value = Arc::clone(&self.nodes[v.0].value);
        self.push_rc(value, Op::Leaf, false)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a).dot(self.value(b));
        let ng = self.ng(a) || self.ng(b);
        self.push(out, Op::MatMul(a, b), ng)
    }

    pub fn matmul_t(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a).dot(&self.value(b).t());
        let ng = self.ng(a) || self.ng(b);
        self.push(out, Op::MatMulT(a, b), ng)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a) + self.value(b);
        let ng = self.ng(a) || self.ng(b);
        self.push(out, Op::Add(a, b), ng)
    }

    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        assert_eq!(self.value(row).nrows(), 1, "add_row expects a single row");
        let out = self.value(a) + self.value(row);
        let ng = self.ng(a) || self.ng(row);
        self.push(out, Op::AddRow(a, row), ng)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a) - self.value(b);
        let ng = self.ng(a) || self.ng(b);
        self.push(out, Op::Sub(a, b), ng)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a) * self.value(b);
        let ng = self.ng(a) || self.ng(b);
        self.push(out, Op::Mul(a, b), ng)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let out = self.value(a) * c;
        let ng = self.ng(a);
        self.push(out, Op::Scale(a, c), ng)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let out = self.value(a).mapv(|x| x.max(0.0));
        let ng = self.ng(a);
        self.push(out, Op::Relu(a), ng)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let out = self.value(a).mapv(f64::tanh);
        let ng = self.ng(a);
        self.push(out, Op::Tanh(a), ng)
    }

    /// Row-major reshape.
    pub fn reshape(&mut self, a: Var, rows: usize, cols: usize) -> Var {
        let src = self.value(a);
        assert_eq!(src.len(), rows * cols, "reshape must preserve element count");
        let flat: Vec<f64> = src.iter().copied().collect();
        let out = Mat::from_shape_vec((rows, cols), flat).expect("shape checked");
        let ng = self.ng(a);
        self.push(out, Op::Reshape(a), ng)
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, end: usize) -> Var {
        let out = self.value(a).slice(s![.., start..end]).to_owned();
        let ng = self.ng(a);
        self.push(out, Op::SliceCols(a, start), ng)
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, end: usize) -> Var {
        let out = self.value(a).slice(s![start..end, ..]).to_owned();
        let ng = self.ng(a);
        self.push(out, Op::SliceRows(a, start), ng)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let views: Vec<_> = parts.iter().map(|p| self.value(*p).view()).collect();
        let out = ndarray::concatenate(Axis(1), &views).expect("row counts must agree");
        let ng = parts.iter().any(|p| self.ng(*p));
        self.push(out, Op::ConcatCols(parts.to_vec()), ng)
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        let views: Vec<_> = parts.iter().map(|p| self.value(*p).view()).collect();
        let out = ndarray::concatenate(Axis(0), &views).expect("column counts must agree");
        let ng = parts.iter().any(|p| self.ng(*p));
        self.push(out, Op::ConcatRows(parts.to_vec()), ng)
    }

    /// Row-wise softmax where entry `(i, j)` with `j > i` is masked out.
    pub fn causal_softmax(&mut self, scores: Var) -> Var {
        let x = self.value(scores);
        let (rows, cols) = x.dim();
        let mut out = Mat::zeros((rows, cols));
        for i in 0..rows {
            let visible = (i + 1).min(cols);
            let row = x.row(i);
            let max = row.iter().take(visible).fold(f64::NEG_INFINITY, |m, &v| m.max(v));
            let mut total = 0.0;
            for j in 0..visible {
                let e = (row[j] - max).exp();
                out[[i, j]] = e;
                total += e;
            }
            for j in 0..visible {
                out[[i, j]] /= total;
            }
        }
        let ng = self.ng(scores);
        self.push(out, Op::CausalSoftmax(scores), ng)
    }

    /// Row-wise layer normalization with learned gain and bias rows.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Var {
        const EPS: f64 = 1e-5;
        let xv = self.value(x);
        let (rows, cols) = xv.dim();
        let mut xhat = Mat::zeros((rows, cols));
        let mut inv_std = Vec::with_capacity(rows);
        for (i, row) in xv.outer_iter().enumerate() {
            let mean = row.sum() / cols as f64;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / cols as f64;
            let is = 1.0 / (var + EPS).sqrt();
            inv_std.push(is);
            for j in 0..cols {
                xhat[[i, j]] = (row[j] - mean) * is;
            }
        }
        let out = &xhat * self.value(gain) + self.value(bias);
        let ng = self.ng(x) || self.ng(gain) || self.ng(bias);
        self.push(
            out,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            },
            ng,
        )
    }

    /// Rows of `table` selected by `ids`.
    pub fn gather(&mut self, table: Var, ids: &[usize]) -> Var {
        let t = self.value(table);
        let mut out = Mat::zeros((ids.len(), t.ncols()));
        for (r, &id) in ids.iter().enumerate() {
            out.row_mut(r).assign(&t.row(id));
        }
        let ng = self.ng(table);
        self.push(
            out,
            Op::Gather {
                table,
                ids: ids.to_vec(),
            },
            ng,
        )
    }

    /// Sum over rows with a target of `-log softmax(logits)[target]`; rows
    /// whose target is `None` contribute nothing.
    pub fn cross_entropy_sum(&mut self, logits: Var, targets: &[Option<usize>]) -> Var {
        let l = self.value(logits);
        assert_eq!(l.nrows(), targets.len(), "one target slot per row");
        let mut probs = Mat::zeros(l.dim());
        let mut total = 0.0;
        for (i, row) in l.outer_iter().enumerate() {
            let Some(t) = targets[i] else { continue };
            let max = row.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
            let mut z = 0.0;
            for (j, &v) in row.iter().enumerate() {
                let e = (v - max).exp();
                probs[[i, j]] = e;
                z += e;
            }
            probs.row_mut(i).mapv_inplace(|p| p / z);
            total += -(row[t] - max - z.ln());
        }
        let ng = self.ng(logits);
        self.push(
            Mat::from_elem((1, 1), total),
            Op::CrossEntropySum {
                logits,
                targets: targets.to_vec(),
                probs,
            },
            ng,
        )
    }

    /// Mean of squared entries, as a `1 × 1` scalar.
    pub fn mean_square(&mut self, a: Var) -> Var {
        let v = self.value(a);
        let out = v.iter().map(|x| x * x).sum::<f64>() / v.len() as f64;
        let ng = self.ng(a);
        self.push(Mat::from_elem((1, 1), out), Op::MeanSquare(a), ng)
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let out = self.value(a).sum();
        let ng = self.ng(a);
        self.push(Mat::from_elem((1, 1), out), Op::Sum(a), ng)
    }

    /// Column means, as a single row.
    pub fn mean_rows(&mut self, a: Var) -> Var {
        let out = self
            .value(a)
            .mean_axis(Axis(0))
            .expect("non-empty input")
            .insert_axis(Axis(0));
        let ng = self.ng(a);
        self.push(out, Op::MeanRows(a), ng)
    }

    pub fn l2_normalize_rows(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let mut out = xv.clone();
        let mut norms = Vec::with_capacity(xv.nrows());
        for mut row in out.outer_iter_mut() {
            let n = row.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-12);
            norms.push(n);
            row.mapv_inplace(|v| v / n);
        }
        let ng = self.ng(x);
        self.push(out, Op::L2NormalizeRows { x, norms }, ng)
    }

    /// Reverse pass from a scalar `root`, seeded with `seed` (normally 1).
    pub fn backward(&self, root: Var, seed: f64) -> Grads {
        let n = self.nodes.len();
        let mut grads: Vec<Option<Mat>> = (0..n).map(|_| None).collect();
        if !self.ng(root) {
            return Grads { grads };
        }
        grads[root.0] = Some(Mat::from_elem(self.value(root).dim(), seed));

        for idx in (0..=root.0).rev() {
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            let Some(dout) = grads[idx].take() else {
                continue;
            };
            let out = &node.value;
            match &node.op {
                Op::Leaf => {
                    grads[idx] = Some(dout);
                    continue;
                }
                Op::MatMul(a, b) => {
                    if self.ng(*a) {
                        let d = dout.dot(&self.value(*b).t());
                        accumulate(&mut grads, *a, d);
                    }
                    if self.ng(*b) {
                        let d = self.value(*a).t().dot(&dout);
                        accumulate(&mut grads, *b, d);
                    }
                }
                Op::MatMulT(a, b) => {
                    if self.ng(*a) {
                        let d = dout.dot(self.value(*b));
                        accumulate(&mut grads, *a, d);
                    }
                    if self.ng(*b) {
                        let d = dout.t().dot(self.value(*a));
                        accumulate(&mut grads, *b, d);
                    }
                }
                Op::Add(a, b) => {
                    if self.ng(*b) {
                        accumulate(&mut grads, *b, dout.clone());
                    }
                    if self.ng(*a) {
                        accumulate(&mut grads, *a, dout);
                    }
                }
                Op::AddRow(a, row) => {
                    if self.ng(*row) {
                        let d = dout.sum_axis(Axis(0)).insert_axis(Axis(0));
                        accumulate(&mut grads, *row, d);
                    }
                    if self.ng(*a) {
                        accumulate(&mut grads, *a, dout);
                    }
                }
                Op::Sub(a, b) => {
                    if self.ng(*b) {
                        accumulate(&mut grads, *b, -&dout);
                    }
                    if self.ng(*a) {
                        accumulate(&mut grads, *a, dout);
                    }
                }
                Op::Mul(a, b) => {
                    if self.ng(*a) {
                        accumulate(&mut grads, *a, &dout * self.value(*b));
                    }
                    if self.ng(*b) {
                        accumulate(&mut grads, *b, &dout * self.value(*a));
                    }
                }
                Op::Scale(a, c) => accumulate(&mut grads, *a, dout * *c),
                Op::Relu(a) => {
                    let mut d = dout;
                    d.zip_mut_with(out, |g, &y| {
                        if y <= 0.0 {
                            *g = 0.0
                        }
                    });
                    accumulate(&mut grads, *a, d);
                }
                Op::Tanh(a) => {
                    let mut d = dout;
                    d.zip_mut_with(out, |g, &y| *g *= 1.0 - y * y);
                    accumulate(&mut grads, *a, d);
                }
                Op::Reshape(a) => {
                    let shape = self.value(*a).dim();
                    let flat: Vec<f64> = dout.iter().copied().collect();
                    let d = Mat::from_shape_vec(shape, flat).expect("same element count");
                    accumulate(&mut grads, *a, d);
                }
                Op::SliceCols(a, start) => {
                    let mut d = Mat::zeros(self.value(*a).dim());
                    d.slice_mut(s![.., *start..*start + dout.ncols()]).assign(&dout);
                    accumulate(&mut grads, *a, d);
                }
                Op::SliceRows(a, start) => {
                    let mut d = Mat::zeros(self.value(*a).dim());
                    d.slice_mut(s![*start..*start + dout.nrows(), ..]).assign(&dout);
                    accumulate(&mut grads, *a, d);
                }
                Op::ConcatCols(parts) => {
                    let mut offset = 0;
                    for p in parts {
                        let w = self.value(*p).ncols();
                        if self.ng(*p) {
                            let d = dout.slice(s![.., offset..offset + w]).to_owned();
                            accumulate(&mut grads, *p, d);
                        }
                        offset += w;
                    }
                }
                Op::ConcatRows(parts) => {
                    let mut offset = 0;
                    for p in parts {
                        let h = self.value(*p).nrows();
                        if self.ng(*p) {
                            let d = dout.slice(s![offset..offset + h, ..]).to_owned();
                            accumulate(&mut grads, *p, d);
                        }
                        offset += h;
                    }
                }
                Op::CausalSoftmax(a) => {
                    let mut d = Mat::zeros(out.dim());
                    for i in 0..out.nrows() {
                        let p = out.row(i);
                        let g = dout.row(i);
                        let dot: f64 = p.iter().zip(g.iter()).map(|(p, g)| p * g).sum();
                        for j in 0..out.ncols() {
                            d[[i, j]] = p[j] * (g[j] - dot);
                        }
                    }
                    accumulate(&mut grads, *a, d);
                }
                Op::LayerNorm {
                    x,
                    gain,
                    bias,
                    xhat,
                    inv_std,
                } => {
                    if self.ng(*bias) {
                        let d = dout.sum_axis(Axis(0)).insert_axis(Axis(0));
                        accumulate(&mut grads, *bias, d);
                    }
                    if self.ng(*gain) {
                        let d = (&dout * xhat).sum_axis(Axis(0)).insert_axis(Axis(0));
                        accumulate(&mut grads, *gain, d);
                    }
                    if self.ng(*x) {
                        let dxhat = &dout * self.value(*gain);
                        let cols = xhat.ncols() as f64;
                        let mut d = Mat::zeros(xhat.dim());
                        for i in 0..xhat.nrows() {
                            let dh = dxhat.row(i);
                            let h = xhat.row(i);
                            let sum_dh = dh.sum();
                            let sum_dh_h: f64 = dh.iter().zip(h.iter()).map(|(a, b)| a * b).sum();
                            for j in 0..xhat.ncols() {
                                d[[i, j]] = inv_std[i] / cols * (cols * dh[j] - sum_dh - h[j] * sum_dh_h);
                            }
                        }
                        accumulate(&mut grads, *x, d);
                    }
                }
                Op::Gather { table, ids } => {
                    let mut d = Mat::zeros(self.value(*table).dim());
                    for (r, &id) in ids.iter().enumerate() {
                        let mut row = d.row_mut(id);
                        row += &dout.row(r);
                    }
                    accumulate(&mut grads, *table, d);
                }
                Op::CrossEntropySum { logits, targets, probs } => {
                    let g = dout[[0, 0]];
                    let mut d = probs * g;
                    for (i, t) in targets.iter().enumerate() {
                        if let Some(t) = t {
                            d[[i, *t]] -= g;
                        }
                    }
                    accumulate(&mut grads, *logits, d);
                }
                Op::MeanSquare(a) => {
                    let v = self.value(*a);
                    let c = 2.0 * dout[[0, 0]] / v.len() as f64;
                    accumulate(&mut grads, *a, v * c);
                }
                Op::Sum(a) => {
                    let d = Mat::from_elem(self.value(*a).dim(), dout[[0, 0]]);
                    accumulate(&mut grads, *a, d);
                }
                Op::MeanRows(a) => {
                    let v = self.value(*a);
                    let rows = v.nrows();
                    let row = &dout.row(0) / rows as f64;
                    let d = row.broadcast(v.dim()).expect("broadcast row").to_owned();
                    accumulate(&mut grads, *a, d);
                }
                Op::L2NormalizeRows { x, norms } => {
                    let mut d = Mat::zeros(out.dim());
                    for i in 0..out.nrows() {
                        let y = out.row(i);
                        let g = dout.row(i);
                        let dot: f64 = y.iter().zip(g.iter()).map(|(a, b)| a * b).sum();
                        for j in 0..out.ncols() {
                            d[[i, j]] = (g[j] - y[j] * dot) / norms[i];
                        }
                    }
                    accumulate(&mut grads, *x, d);
                }
            }
        }
        Grads { grads }
    }
}

fn accumulate(grads: &mut [Option<Mat>], v: Var, d: Mat) {
    match &mut grads[v.0] {
        Some(g) => *g += &d,
        slot @ None => *slot = Some(d),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Mat {
        Mat::from_shape_fn((rows, cols), |_| rng.random_range(-1.0..1.0))
    }

    /// Central-difference check of d(build)/d(input) for every entry.
    fn check_grad(input: Mat, build: impl Fn(&mut Graph, Var) -> Var) {
        let mut g = Graph::new();
        let x = g.param(input.clone());
        let y = build(&mut g, x);
        let grads = g.backward(y, 1.0);
        let analytic = grads.get(x).cloned().unwrap_or_else(|| Mat::zeros(input.dim()));

        let eval = |m: &Mat| {
            let mut g = Graph::new();
            let x = g.constant(m.clone());
            let y = build(&mut g, x);
            g.scalar(y)
        };
        let h = 1e-6;
        for idx in ndarray::indices(input.dim()) {
            let mut plus = input.clone();
            plus[idx] += h;
            let mut minus = input.clone();
            minus[idx] -= h;
            let numeric = (eval(&plus) - eval(&minus)) / (2.0 * h);
            let a = analytic[idx];
            let scale = a.abs().max(numeric.abs()).max(1e-3);
            assert!(
                (a - numeric).abs() / scale < 1e-5,
                "grad mismatch at {idx:?}: analytic {a}, numeric {numeric}"
            );
        }
    }

    #[test]
    fn matmul_and_transpose_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let w = random(4, 3, &mut rng);
        let v = random(5, 3, &mut rng);
        check_grad(random(2, 4, &mut rng), |g, x| {
            let w = g.constant(w.clone());
            let v = g.constant(v.clone());
            let h = g.matmul(x, w);
            let o = g.matmul_t(h, v);
            g.mean_square(o)
        });
    }

    #[test]
    fn layer_norm_and_tanh_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let gain = random(1, 5, &mut rng);
        let bias = random(1, 5, &mut rng);
        let w = random(3, 5, &mut rng);
        check_grad(random(3, 5, &mut rng), |g, x| {
            let gn = g.constant(gain.clone());
            let bs = g.constant(bias.clone());
            let y = g.layer_norm(x, gn, bs);
            let y = g.tanh(y);
            let w = g.constant(w.clone());
            let y = g.mul(y, w);
            g.sum(y)
        });
    }

    #[test]
    fn softmax_cross_entropy_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let v = random(4, 3, &mut rng);
        check_grad(random(4, 4, &mut rng), |g, x| {
            let p = g.causal_softmax(x);
            let v = g.constant(v.clone());
            let h = g.matmul(p, v);
            g.cross_entropy_sum(h, &[Some(0), None, Some(2), Some(1)])
        });
    }

    #[test]
    fn structural_op_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let w = random(6, 2, &mut rng);
        check_grad(random(3, 4, &mut rng), |g, x| {
            let a = g.slice_cols(x, 0, 2);
            let b = g.slice_cols(x, 2, 4);
            let c = g.concat_rows(&[a, b]);
            let r = g.reshape(c, 2, 6);
            let w = g.constant(w.clone());
            let y = g.matmul(r, w);
            let y = g.relu(y);
            let top = g.slice_rows(y, 0, 1);
            let z = g.concat_cols(&[y, y]);
            let m = g.mean_rows(z);
            let n = g.l2_normalize_rows(m);
            let q = g.add_row(y, top);
            let s1 = g.sum(n);
            let s2 = g.mean_square(q);
            let t = g.sub(s1, s2);
            g.scale(t, 0.5)
        });
    }

    #[test]
    fn gather_accumulates_repeated_rows() {
        let mut g = Graph::new();
        let table = g.param(Mat::zeros((3, 2)));
        let rows = g.gather(table, &[1, 1, 2]);
        let s = g.sum(rows);
        let grads = g.backward(s, 1.0);
        let d = grads.get(table).unwrap();
        assert_eq!(d.row(0).to_vec(), vec![0.0, 0.0]);
        assert_eq!(d.row(1).to_vec(), vec![2.0, 2.0]);
        assert_eq!(d.row(2).to_vec(), vec![1.0, 1.0]);
    }

    #[test]
    fn detached_branches_receive_no_gradient() {
        let mut g = Graph::new();
        let x = g.param(Mat::from_elem((1, 2), 3.0));
        let d = g.detach(x);
        let y = g.mul(x, d);
        let s = g.sum(y);
        let grads = g.backward(s, 1.0);
        // d/dx of x * sg[x] is sg[x] only.
        assert_eq!(grads.get(x).unwrap()[[0, 0]], 3.0);
        assert!(grads.get(d).is_none());
    }
}
