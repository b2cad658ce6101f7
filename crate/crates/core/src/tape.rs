//! Minimal reverse-mode differentiation over dense matrices.
//!
//! A [`Tape`] records every intermediate matrix with the operation that
//! produced it. [`Tape::backward`] walks the record in reverse, accumulating
//! `∂out/∂node` for a scalar (`1x1`) output. Graph-batched operations work
//! on row-stacked blocks: a batch of `B` graphs with `n` nodes is a
//! `(B·n) x d` matrix and block `b` is rows `b·n .. (b+1)·n`.

use std::sync::Arc;

use nalgebra::DMatrix;

use crate::entropy;
use crate::error::Result;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    /// `m x k` plus a `1 x k` row broadcast over rows.
    AddRow(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    MulConst(Var, DMatrix<f64>),
    /// Elementwise map with its pointwise derivative recorded.
    Map(Var, DMatrix<f64>),
    Sum(Var),
    RowSoftmax(Var),
    BlockSymmetrize(Var, usize),
    GinAggregate {
        h: Var,
        eps: Var,
        adj: Arc<Vec<DMatrix<f64>>>,
    },
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: DMatrix<f64>,
        inv_std: Vec<f64>,
        /// Batch statistics flow into the gradient only in training mode.
        batch_stats: bool,
    },
    BlockGram(Var, usize),
    RbfGram(Var, f64),
    TraceNormalize(Var),
    /// Scalar-valued op whose gradient was computed in the forward pass.
    ScalarWithGrad(Var, DMatrix<f64>),
}

struct Node {
    value: DMatrix<f64>,
    op: Op,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Per-column batch statistics produced by [`Tape::batch_norm`].
#[derive(Debug, Clone)]
pub struct BatchStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

pub const BN_EPS: f64 = 1e-5;

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    fn push(&mut self, value: DMatrix<f64>, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn leaf(&mut self, value: DMatrix<f64>) -> Var {
        self.push(value, Op::Leaf)
    }

    pub fn value(&self, v: Var) -> &DMatrix<f64> {
        &self.nodes[v.0].value
    }

    pub fn scalar(&self, v: Var) -> f64 {
        let m = self.value(v);
        debug_assert_eq!(m.shape(), (1, 1));
        m[(0, 0)]
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a) * self.value(b);
        self.push(v, Op::MatMul(a, b))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a) + self.value(b);
        self.push(v, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a) - self.value(b);
        self.push(v, Op::Sub(a, b))
    }

    pub fn add_row(&mut self, x: Var, row: Var) -> Var {
        let r = self.value(row);
        assert_eq!(r.nrows(), 1, "add_row expects a 1 x k row");
        let mut v = self.value(x).clone();
        for mut vr in v.row_iter_mut() {
            vr += r;
        }
        self.push(v, Op::AddRow(x, row))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).component_mul(self.value(b));
        self.push(v, Op::Mul(a, b))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let v = self.value(x) * c;
        self.push(v, Op::Scale(x, c))
    }

    /// Hadamard product with a constant matrix.
    pub fn mul_const(&mut self, x: Var, c: DMatrix<f64>) -> Var {
        let v = self.value(x).component_mul(&c);
        self.push(v, Op::MulConst(x, c))
    }

    fn map(&mut self, x: Var, f: impl Fn(f64) -> (f64, f64)) -> Var {
        let src = self.value(x);
        let mut value = src.clone();
        let mut deriv = src.clone();
        for (v, d) in value.iter_mut().zip(deriv.iter_mut()) {
            let (fv, dv) = f(*v);
            *v = fv;
            *d = dv;
        }
        self.push(value, Op::Map(x, deriv))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.map(x, |v| {
            let s = 1.0 / (1.0 + (-v).exp());
            (s, s * (1.0 - s))
        })
    }

    /// Elementwise clamp to `[lo, hi]`; zero gradient where clamped.
    pub fn clamp(&mut self, x: Var, lo: f64, hi: f64) -> Var {
        self.map(x, |v| {
            let c = v.clamp(lo, hi);
            (c, if v == c { 1.0 } else { 0.0 })
        })
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.map(x, |v| if v > 0.0 { (v, 1.0) } else { (0.0, 0.0) })
    }

    /// `ln(p / (1 - p))` with `p` clamped to `[lo, hi]`; zero gradient where clamped.
    pub fn clamped_logit(&mut self, x: Var, lo: f64, hi: f64) -> Var {
        self.map(x, |p| {
            let c = p.clamp(lo, hi);
            let d = if p == c { 1.0 / (c * (1.0 - c)) } else { 0.0 };
            ((c / (1.0 - c)).ln(), d)
        })
    }

    /// `ln(p)` with `p` clamped to `[lo, hi]`.
    pub fn clamped_ln(&mut self, x: Var, lo: f64, hi: f64) -> Var {
        self.map(x, |p| {
            let c = p.clamp(lo, hi);
            let d = if p == c { 1.0 / c } else { 0.0 };
            (c.ln(), d)
        })
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let v = DMatrix::from_element(1, 1, self.value(x).sum());
        self.push(v, Op::Sum(x))
    }

    pub fn row_softmax(&mut self, x: Var) -> Var {
        let mut v = self.value(x).clone();
        for mut row in v.row_iter_mut() {
            let m = row.max();
            row.apply(|e| *e = (*e - m).exp());
            let s = row.sum();
            row /= s;
        }
        self.push(v, Op::RowSoftmax(x))
    }

    /// Per block `(X_b + X_bᵀ) / 2` with the diagonal set to 0.
    pub fn block_symmetrize(&mut self, x: Var, n: usize) -> Var {
        let v = block_symmetrize(self.value(x), n);
        self.push(v, Op::BlockSymmetrize(x, n))
    }

    /// GIN aggregation per block: `(1 + ε) H_b + A_b H_b`.
    pub fn gin_aggregate(&mut self, h: Var, eps: Var, adj: Arc<Vec<DMatrix<f64>>>) -> Var {
        let e = self.scalar(eps);
        let hv = self.value(h);
        let n = adj.first().map_or(0, DMatrix::nrows);
        assert_eq!(hv.nrows(), n * adj.len(), "aggregate: block layout mismatch");
        let mut out = hv * (1.0 + e);
        for (b, a) in adj.iter().enumerate() {
            let hb = hv.rows(b * n, n);
            let mut ob = out.rows_mut(b * n, n);
            ob.gemm(1.0, a, &hb, 1.0);
        }
        self.push(out, Op::GinAggregate { h, eps, adj })
    }

    /// Batch normalization over rows using the batch's own statistics.
    pub fn batch_norm(&mut self, x: Var, gamma: Var, beta: Var) -> (Var, BatchStats) {
        let xv = self.value(x);
        let m = xv.nrows() as f64;
        let mut mean = Vec::with_capacity(xv.ncols());
        let mut var = Vec::with_capacity(xv.ncols());
        for col in xv.column_iter() {
            let mu = col.sum() / m;
            let v = col.iter().map(|&e| (e - mu) * (e - mu)).sum::<f64>() / m;
            mean.push(mu);
            var.push(v);
        }
        let out = self.normalize_with(x, gamma, beta, &mean, &var, true);
        (out, BatchStats { mean, var })
    }

    /// Batch normalization with fixed (running) statistics.
    pub fn fixed_norm(&mut self, x: Var, gamma: Var, beta: Var, mean: &[f64], var: &[f64]) -> Var {
        self.normalize_with(x, gamma, beta, mean, var, false)
    }

    fn normalize_with(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        mean: &[f64],
        var: &[f64],
        batch_stats: bool,
    ) -> Var {
        let xv = self.value(x);
        let g = self.value(gamma);
        let bt = self.value(beta);
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + BN_EPS).sqrt()).collect();
        let xhat = DMatrix::from_fn(xv.nrows(), xv.ncols(), |i, j| (xv[(i, j)] - mean[j]) * inv_std[j]);
        let out = DMatrix::from_fn(xv.nrows(), xv.ncols(), |i, j| g[(0, j)] * xhat[(i, j)] + bt[(0, j)]);
        self.push(
            out,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                batch_stats,
            },
        )
    }

    /// Second-order pooling per block: row `b` is `vec(Y_bᵀ Y_b)` (row-major).
    pub fn block_gram(&mut self, y: Var, n: usize) -> Var {
        let yv = self.value(y);
        let f = yv.ncols();
        let blocks = yv.nrows() / n;
        let mut out = DMatrix::zeros(blocks, f * f);
        for b in 0..blocks {
            let yb = yv.rows(b * n, n);
            let g = yb.transpose() * yb;
            for p in 0..f {
                for q in 0..f {
                    out[(b, p * f + q)] = g[(p, q)];
                }
            }
        }
        self.push(out, Op::BlockGram(y, n))
    }

    /// Mean softmax cross-entropy over rows of `logits`.
    pub fn softmax_cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Var {
        let lv = self.value(logits);
        let rows = lv.nrows();
        assert_eq!(rows, labels.len(), "one label per logit row");
        let mut loss = 0.0;
        let mut grad = DMatrix::zeros(rows, lv.ncols());
        for (r, &y) in labels.iter().enumerate() {
            let row = lv.row(r);
            let m = row.max();
            let lse = m + row.iter().map(|&v| (v - m).exp()).sum::<f64>().ln();
            loss += lse - row[y];
            for c in 0..lv.ncols() {
                let p = (row[c] - lse).exp();
                grad[(r, c)] = (p - if c == y { 1.0 } else { 0.0 }) / rows as f64;
            }
        }
        let v = DMatrix::from_element(1, 1, loss / rows as f64);
        self.push(v, Op::ScalarWithGrad(logits, grad))
    }

    pub fn rbf_gram(&mut self, z: Var, sigma: f64) -> Var {
        let v = entropy::rbf_values(self.value(z), sigma);
        self.push(v, Op::RbfGram(z, sigma))
    }

    pub fn trace_normalize(&mut self, k: Var) -> Var {
        let kv = self.value(k);
        let v = kv / kv.trace();
        self.push(v, Op::TraceNormalize(k))
    }

    /// Rényi α-entropy (bits) of a trace-normalized Gram matrix.
    pub fn renyi_entropy(&mut self, d: Var, alpha: f64, eig_floor: f64) -> Result<Var> {
        let (h, grad) = entropy::renyi_value_and_grad(self.value(d), alpha, eig_floor)?;
        Ok(self.push(DMatrix::from_element(1, 1, h), Op::ScalarWithGrad(d, grad)))
    }

    /// Mean over blocks of `‖RowNorm(S_bᵀ A_b S_b) - I‖_F`.
    pub fn connectivity_loss(&mut self, s: Var, adj: &[DMatrix<f64>]) -> Var {
        let sv = self.value(s);
        let n = adj.first().map_or(0, DMatrix::nrows);
        assert_eq!(sv.nrows(), n * adj.len(), "connectivity: block layout mismatch");
        let mut total = 0.0;
        let mut grad = DMatrix::zeros(sv.nrows(), sv.ncols());
        for (b, a) in adj.iter().enumerate() {
            let sb = sv.rows(b * n, n).into_owned();
            let (loss, g) = connectivity_value_and_grad(&sb, a);
            total += loss;
            grad.rows_mut(b * n, n).copy_from(&g);
        }
        let count = adj.len().max(1) as f64;
        grad /= count;
        self.push(
            DMatrix::from_element(1, 1, total / count),
            Op::ScalarWithGrad(s, grad),
        )
    }

    /// Gradients of the scalar `out` with respect to every recorded node.
    pub fn backward(&self, out: Var) -> Gradients {
        assert_eq!(self.value(out).shape(), (1, 1), "backward needs a scalar output");
        let mut grads: Vec<Option<DMatrix<f64>>> = vec![None; self.nodes.len()];
        grads[out.0] = Some(DMatrix::from_element(1, 1, 1.0));

        for idx in (0..=out.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            match &node.op {
                Op::Leaf => {}
                Op::MatMul(a, b) => {
                    let ga = &g * self.value(*b).transpose();
                    let gb = self.value(*a).transpose() * &g;
                    accumulate(&mut grads, *a, ga);
                    accumulate(&mut grads, *b, gb);
                }
                Op::Add(a, b) => {
                    accumulate(&mut grads, *a, g.clone());
                    accumulate(&mut grads, *b, g.clone());
                }
                Op::Sub(a, b) => {
                    accumulate(&mut grads, *a, g.clone());
                    accumulate(&mut grads, *b, -&g);
                }
                Op::AddRow(x, row) => {
                    let gr = DMatrix::from_fn(1, g.ncols(), |_, j| g.column(j).sum());
                    accumulate(&mut grads, *x, g.clone());
                    accumulate(&mut grads, *row, gr);
                }
                Op::Mul(a, b) => {
                    let ga = g.component_mul(self.value(*b));
                    let gb = g.component_mul(self.value(*a));
                    accumulate(&mut grads, *a, ga);
                    accumulate(&mut grads, *b, gb);
                }
                Op::Scale(x, c) => accumulate(&mut grads, *x, &g * *c),
                Op::MulConst(x, c) => accumulate(&mut grads, *x, g.component_mul(c)),
                Op::Map(x, d) => accumulate(&mut grads, *x, g.component_mul(d)),
                Op::Sum(x) => {
                    let shape = self.value(*x).shape();
                    accumulate(&mut grads, *x, DMatrix::from_element(shape.0, shape.1, g[(0, 0)]));
                }
                Op::RowSoftmax(x) => {
                    let y = &node.value;
                    let mut gx = g.component_mul(y);
                    for (r, mut row) in gx.row_iter_mut().enumerate() {
                        let dot = row.sum();
                        for c in 0..row.len() {
                            row[c] -= y[(r, c)] * dot;
                        }
                    }
                    accumulate(&mut grads, *x, gx);
                }
                Op::BlockSymmetrize(x, n) => {
                    accumulate(&mut grads, *x, block_symmetrize(&g, *n));
                }
                Op::GinAggregate { h, eps, adj } => {
                    let e = self.scalar(*eps);
                    let hv = self.value(*h);
                    let n = adj[0].nrows();
                    let mut gh = &g * (1.0 + e);
                    for (b, a) in adj.iter().enumerate() {
                        let gb = g.rows(b * n, n);
                        let mut out = gh.rows_mut(b * n, n);
                        out.gemm(1.0, &a.transpose(), &gb, 1.0);
                    }
                    let ge = DMatrix::from_element(1, 1, g.dot(hv));
                    accumulate(&mut grads, *h, gh);
                    accumulate(&mut grads, *eps, ge);
                }
                Op::BatchNorm {
                    x,
                    gamma,
                    beta,
                    xhat,
                    inv_std,
                    batch_stats,
                } => {
                    let gm = self.value(*gamma);
                    let (rows, cols) = g.shape();
                    let m = rows as f64;
                    let mut g_gamma = DMatrix::zeros(1, cols);
                    let mut g_beta = DMatrix::zeros(1, cols);
                    let mut gx = DMatrix::zeros(rows, cols);
                    for j in 0..cols {
                        let mut sum_dxhat = 0.0;
                        let mut sum_dxhat_xhat = 0.0;
                        for i in 0..rows {
                            let dy = g[(i, j)];
                            g_gamma[(0, j)] += dy * xhat[(i, j)];
                            g_beta[(0, j)] += dy;
                            let dxh = dy * gm[(0, j)];
                            sum_dxhat += dxh;
                            sum_dxhat_xhat += dxh * xhat[(i, j)];
                        }
                        for i in 0..rows {
                            let dxh = g[(i, j)] * gm[(0, j)];
                            gx[(i, j)] = if *batch_stats {
                                inv_std[j] / m * (m * dxh - sum_dxhat - xhat[(i, j)] * sum_dxhat_xhat)
                            } else {
                                inv_std[j] * dxh
                            };
                        }
                    }
                    accumulate(&mut grads, *x, gx);
                    accumulate(&mut grads, *gamma, g_gamma);
                    accumulate(&mut grads, *beta, g_beta);
                }
                Op::BlockGram(y, n) => {
                    let yv = self.value(*y);
                    let f = yv.ncols();
                    let mut gy = DMatrix::zeros(yv.nrows(), f);
                    for b in 0..g.nrows() {
                        let gb = DMatrix::from_fn(f, f, |p, q| g[(b, p * f + q)]);
                        let sym = &gb + gb.transpose();
                        let yb = yv.rows(b * n, *n);
                        gy.rows_mut(b * n, *n).copy_from(&(yb * sym));
                    }
                    accumulate(&mut grads, *y, gy);
                }
                Op::RbfGram(z, sigma) => {
                    let gz = entropy::rbf_backward(self.value(*z), &node.value, *sigma, &g);
                    accumulate(&mut grads, *z, gz);
                }
                Op::TraceNormalize(k) => {
                    let gk = entropy::trace_normalize_backward(self.value(*k), &g);
                    accumulate(&mut grads, *k, gk);
                }
                Op::ScalarWithGrad(x, local) => accumulate(&mut grads, *x, local * g[(0, 0)]),
            }
            grads[idx] = Some(g);
        }
        Gradients { grads }
    }
}

fn accumulate(grads: &mut [Option<DMatrix<f64>>], v: Var, g: DMatrix<f64>) {
    match &mut grads[v.0] {
        Some(existing) => *existing += g,
        slot @ None => *slot = Some(g),
    }
}

fn block_symmetrize(x: &DMatrix<f64>, n: usize) -> DMatrix<f64> {
    let mut out = DMatrix::zeros(x.nrows(), x.ncols());
    for b in 0..x.nrows() / n {
        let xb = x.rows(b * n, n);
        for i in 0..n {
            for j in 0..n {
                out[(b * n + i, j)] = if i == j { 0.0 } else { 0.5 * (xb[(i, j)] + xb[(j, i)]) };
            }
        }
    }
    out
}

/// `‖RowNorm(SᵀAS) - I‖_F` and its gradient with respect to `S`. Rows of
/// `SᵀAS` summing to zero are left unnormalized.
pub(crate) fn connectivity_value_and_grad(s: &DMatrix<f64>, a: &DMatrix<f64>) -> (f64, DMatrix<f64>) {
    let n = s.ncols();
    let as_ = a * s;
    let m = s.transpose() * &as_;
    let row_sums: Vec<f64> = m.row_iter().map(|r| r.sum()).collect();
    let mut r = m.clone();
    for (i, &rs) in row_sums.iter().enumerate() {
        if rs != 0.0 {
            r.row_mut(i).unscale_mut(rs);
        }
    }
    let diff = &r - DMatrix::<f64>::identity(n, n);
    let loss = diff.norm();
    if loss == 0.0 {
        return (0.0, DMatrix::zeros(s.nrows(), s.ncols()));
    }
    let grad_r = &diff / loss;
    let mut grad_m = grad_r.clone();
    for (i, &rs) in row_sums.iter().enumerate() {
        if rs != 0.0 {
            let dot: f64 = grad_r.row(i).dot(&m.row(i));
            for j in 0..n {
                grad_m[(i, j)] = grad_r[(i, j)] / rs - dot / (rs * rs);
            }
        }
    }
    // M = Sᵀ (A S): ∂/∂S = A S ∂Mᵀ + Aᵀ S ∂M
    let grad_s = &as_ * grad_m.transpose() + a.transpose() * s * &grad_m;
    (loss, grad_s)
}

pub struct Gradients {
    grads: Vec<Option<DMatrix<f64>>>,
}

impl Gradients {
    /// Gradient of `v`, zero-shaped like `shape` if `v` did not influence the output.
    pub fn get(&self, v: Var) -> Option<&DMatrix<f64>> {
        self.grads[v.0].as_ref()
    }

    pub fn get_or_zeros(&self, v: Var, shape: (usize, usize)) -> DMatrix<f64> {
        self.get(v)
            .cloned()
            .unwrap_or_else(|| DMatrix::zeros(shape.0, shape.1))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_m(rng: &mut ChaCha8Rng, r: usize, c: usize) -> DMatrix<f64> {
        DMatrix::from_fn(r, c, |_, _| rng.random_range(-1.0..1.0))
    }

    /// Checks `∂ sum(f(x) ∘ w) / ∂x` against central differences.
    fn check(x0: DMatrix<f64>, f: impl Fn(&mut Tape, Var) -> Var, tol: f64) {
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let probe = {
            let mut t = Tape::new();
            let x = t.leaf(x0.clone());
            let y = f(&mut t, x);
            t.value(y).shape()
        };
        let w = rand_m(&mut rng, probe.0, probe.1);
        let eval = |x: &DMatrix<f64>| {
            let mut t = Tape::new();
            let xv = t.leaf(x.clone());
            let y = f(&mut t, xv);
            let yw = t.mul_const(y, w.clone());
            let out = t.sum(yw);
            (t.scalar(out), t.backward(out).get_or_zeros(xv, x.shape()))
        };
        let (_, g) = eval(&x0);
        let h = 1e-6;
        let mut fd = DMatrix::zeros(x0.nrows(), x0.ncols());
        for i in 0..x0.len() {
            let mut xp = x0.clone();
            xp[i] += h;
            let mut xm = x0.clone();
            xm[i] -= h;
            fd[i] = (eval(&xp).0 - eval(&xm).0) / (2.0 * h);
        }
        let rel = (&g - &fd).norm() / fd.norm().max(1e-12);
        assert!(rel < tol, "relative error {rel}\nanalytic {g}\nfd {fd}");
    }

    #[test]
    fn elementwise_and_linear_ops() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let w = rand_m(&mut rng, 3, 4);
        let bias = rand_m(&mut rng, 1, 4);
        check(rand_m(&mut rng, 5, 3), |t, x| {
            let wv = t.leaf(w.clone());
            let bv = t.leaf(bias.clone());
            let y = t.matmul(x, wv);
            let y = t.add_row(y, bv);
            let y = t.sigmoid(y);
            let z = t.scale(y, 3.0);
            t.mul(z, y)
        }, 1e-7);
        check(rand_m(&mut rng, 4, 4).map(|v| 0.5 + 0.4 * v), |t, x| {
            let a = t.clamped_logit(x, 1e-7, 1.0 - 1e-7);
            let b = t.clamped_ln(x, 1e-7, 1.0);
            t.sub(a, b)
        }, 1e-7);
        check(rand_m(&mut rng, 3, 5), |t, x| t.row_softmax(x), 1e-7);
        check(rand_m(&mut rng, 6, 3), |t, x| t.block_symmetrize(x, 3), 1e-7);
    }

    #[test]
    fn relu_away_from_kink() {
        let x = DMatrix::from_row_slice(2, 2, &[0.5, -0.3, -1.0, 2.0]);
        check(x, |t, x| t.relu(x), 1e-9);
    }

    #[test]
    fn gin_aggregate_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let adj: Vec<DMatrix<f64>> = (0..2)
            .map(|_| {
                let mut a = DMatrix::from_fn(3, 3, |_, _| if rng.random_bool(0.5) { 1.0 } else { 0.0 });
                a.fill_diagonal(0.0);
                &a + a.transpose()
            })
            .map(|a| a.map(|v: f64| v.min(1.0)))
            .collect();
        let adj = Arc::new(adj);
        let h0 = rand_m(&mut rng, 6, 2);
        let a2 = adj.clone();
        check(DMatrix::from_element(1, 1, 0.3), move |t, e| {
            let h = t.leaf(h0.clone());
            t.gin_aggregate(h, e, a2.clone())
        }, 1e-8);
        check(rand_m(&mut rng, 6, 2), move |t, h| {
            let e = t.leaf(DMatrix::from_element(1, 1, 0.3));
            t.gin_aggregate(h, e, adj.clone())
        }, 1e-8);
    }

    #[test]
    fn aggregate_sums_neighbours() {
        let mut t = Tape::new();
        let h = t.leaf(DMatrix::from_row_slice(3, 1, &[2.0, 5.0, 7.0]));
        let e = t.leaf(DMatrix::zeros(1, 1));
        // nodes 0 and 1 connected, node 2 isolated
        let a = DMatrix::from_row_slice(3, 3, &[0.0, 1.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 0.0]);
        let out = t.gin_aggregate(h, e, Arc::new(vec![a]));
        assert_eq!(t.value(out).as_slice(), &[7.0, 7.0, 7.0]);
    }

    #[test]
    fn batch_norm_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let gamma = rand_m(&mut rng, 1, 3);
        let beta = rand_m(&mut rng, 1, 3);
        let (g2, b2) = (gamma.clone(), beta.clone());
        check(rand_m(&mut rng, 7, 3), move |t, x| {
            let g = t.leaf(g2.clone());
            let b = t.leaf(b2.clone());
            t.batch_norm(x, g, b).0
        }, 1e-6);
        let x0 = rand_m(&mut rng, 7, 3);
        check(gamma.clone(), move |t, g| {
            let x = t.leaf(x0.clone());
            let b = t.leaf(beta.clone());
            t.batch_norm(x, g, b).0
        }, 1e-7);
        check(rand_m(&mut rng, 4, 3), move |t, x| {
            let g = t.leaf(gamma.clone());
            let b = t.leaf(DMatrix::zeros(1, 3));
            t.fixed_norm(x, g, b, &[0.1, -0.2, 0.0], &[1.5, 0.3, 2.0])
        }, 1e-7);
    }

    #[test]
    fn block_gram_and_cross_entropy() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        check(rand_m(&mut rng, 6, 3), |t, y| t.block_gram(y, 3), 1e-7);
        check(rand_m(&mut rng, 4, 2), |t, l| t.softmax_cross_entropy(l, &[0, 1, 1, 0]), 1e-7);
    }

    #[test]
    fn kernel_and_entropy_chain() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        check(rand_m(&mut rng, 6, 3), |t, z| {
            let k = t.rbf_gram(z, 0.8);
            let d = t.trace_normalize(k);
            t.renyi_entropy(d, 1.01, 1e-12).unwrap()
        }, 1e-6);
        let other = rand_m(&mut rng, 6, 2);
        check(rand_m(&mut rng, 6, 3), move |t, z| {
            let o = t.leaf(other.clone());
            let ka = t.rbf_gram(z, 0.8);
            let kb = t.rbf_gram(o, 0.6);
            let da = t.trace_normalize(ka);
            let db = t.trace_normalize(kb);
            let j = t.mul(da, db);
            let dj = t.trace_normalize(j);
            t.renyi_entropy(dj, 2.0, 1e-12).unwrap()
        }, 1e-6);
    }

    #[test]
    fn connectivity_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let adj: Vec<DMatrix<f64>> = (0..2).map(|_| crate::graph::complete_adjacency(4)).collect();
        check(
            DMatrix::from_fn(8, 4, |_, _| rng.random_range(0.05..0.95)),
            move |t, s| t.connectivity_loss(s, &adj),
            1e-6,
        );
    }

    #[test]
    fn connectivity_closed_forms() {
        for n in [4usize, 8] {
            let a = crate::graph::complete_adjacency(n);
            let (loss, _) = connectivity_value_and_grad(&DMatrix::from_element(n, n, 1.0), &a);
            assert!((loss - ((n - 1) as f64).sqrt()).abs() < 1e-10);
        }
        // S = I with A = I gives SᵀAS = I exactly
        let (zero, g) = connectivity_value_and_grad(&DMatrix::identity(3, 3), &DMatrix::identity(3, 3));
        assert_eq!(zero, 0.0);
        assert_eq!(g.amax(), 0.0);
    }

    #[test]
    fn shared_inputs_accumulate() {
        let mut t = Tape::new();
        let x = t.leaf(DMatrix::from_element(1, 1, 3.0));
        let y = t.mul(x, x);
        let z = t.add(y, x);
        let g = t.backward(z);
        assert_eq!(g.get(x).unwrap()[(0, 0)], 7.0);
    }
}
