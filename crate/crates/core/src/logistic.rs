//! L2-regularized logistic regression over sparse rows, solved with L-BFGS.

use std::collections::VecDeque;

use crate::linalg::{axpy, dot, norm};

/// Row-compressed sparse design matrix.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct SparseRows {
    dim: usize,
    indptr: Vec<usize>,
    indices: Vec<u32>,
    values: Vec<f64>,
}

impl SparseRows {
    pub fn new(dim: usize) -> Self {
        Self {
            dim,
            indptr: vec![0],
            indices: Vec::new(),
            values: Vec::new(),
        }
    }

    /// Appends a row of `(index, value)` pairs; indices must be `< dim`.
    pub fn push_row(&mut self, row: impl IntoIterator<Item = (usize, f64)>) {
        for (i, v) in row {
            assert!(i < self.dim, "feature index {i} out of range {}", self.dim);
            self.indices.push(i as u32);
            self.values.push(v);
        }
        self.indptr.push(self.indices.len());
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn rows(&self) -> usize {
        self.indptr.len() - 1
    }

    pub fn row(&self, r: usize) -> impl Iterator<Item = (usize, f64)> + '_ {
        let span = self.indptr[r]..self.indptr[r + 1];
        self.indices[span.clone()]
            .iter()
            .zip(&self.values[span])
            .map(|(&i, &v)| (i as usize, v))
    }
}

/// `log(1 + exp(u))` without overflow.
#[inline]
pub fn softplus(u: f64) -> f64 {
    u.max(0.0) + (-u.abs()).exp().ln_1p()
}

#[inline]
pub fn sigmoid(u: f64) -> f64 {
    if u >= 0.0 {
        1.0 / (1.0 + (-u).exp())
    } else {
        let e = u.exp();
        e / (1.0 + e)
    }
}

/// Cross-entropy loss with targets in `[0, 1]` plus `reg/2 * ||w||^2`.
/// For 0/1 targets the data term equals `sum log(1 + exp(-y (w.z + b)))`
/// with `y = 2t - 1`. Features with `active[i] == false` are held at zero;
/// the bias is neither regularized nor masked.
#[derive(Debug, Clone, Copy)]
pub struct LogisticProblem<'a> {
    pub rows: &'a SparseRows,
    pub targets: &'a [f64],
    pub active: Option<&'a [bool]>,
    pub reg: f64,
}

impl LogisticProblem<'_> {
    /// Parameter count: one weight per feature plus the bias (last).
    pub fn param_len(&self) -> usize {
        self.rows.dim() + 1
    }

    fn is_active(&self, i: usize) -> bool {
        self.active.is_none_or(|a| a[i])
    }

    /// Objective at `params`, writing the gradient into `grad`.
    pub fn value_grad(&self, params: &[f64], grad: &mut [f64]) -> f64 {
        let d = self.rows.dim();
        let (w, b) = (&params[..d], params[d]);
        grad.iter_mut().for_each(|g| *g = 0.0);
        let mut loss = 0.0;
        for (r, &t) in self.targets.iter().enumerate() {
            let u = b + self
                .rows
                .row(r)
                .filter(|&(i, _)| self.is_active(i))
                .map(|(i, v)| w[i] * v)
                .sum::<f64>();
            loss += softplus(u) - t * u;
            let e = sigmoid(u) - t;
            for (i, v) in self.rows.row(r) {
                if self.is_active(i) {
                    grad[i] += e * v;
                }
            }
            grad[d] += e;
        }
        loss += 0.5 * self.reg * dot(w, w);
        axpy(self.reg, w, &mut grad[..d]);
        loss
    }

    pub fn value(&self, params: &[f64]) -> f64 {
        let mut g = vec![0.0; params.len()];
        self.value_grad(params, &mut g)
    }
}

/// Stopping rules for [`minimize_lbfgs`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SolverOptions {
    pub max_iterations: usize,
    /// Stop once the gradient norm falls to this value.
    pub grad_tol: f64,
    /// Number of correction pairs kept.
    pub memory: usize,
}

impl Default for SolverOptions {
    fn default() -> Self {
        Self {
            max_iterations: 200,
            grad_tol: 1e-6,
            memory: 10,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Minimum {
    pub params: Vec<f64>,
    pub value: f64,
    pub grad_norm: f64,
    pub iterations: usize,
}

/// Limited-memory BFGS with a backtracking Armijo line search.
/// `f(x, grad)` returns the objective and fills the gradient.
pub fn minimize_lbfgs(
    mut f: impl FnMut(&[f64], &mut [f64]) -> f64,
    x0: Vec<f64>,
    opts: &SolverOptions,
) -> Minimum {
    let n = x0.len();
    let mut x = x0;
    let mut g = vec![0.0; n];
    let mut fx = f(&x, &mut g);
    let mut pairs: VecDeque<(Vec<f64>, Vec<f64>, f64)> = VecDeque::with_capacity(opts.memory);
    let mut dir = vec![0.0; n];
    let mut x_new = vec![0.0; n];
    let mut g_new = vec![0.0; n];
    let mut iterations = 0;

    while iterations < opts.max_iterations && norm(&g) > opts.grad_tol {
        iterations += 1;
        // two-loop recursion
        dir.iter_mut().zip(&g).for_each(|(d, gi)| *d = -gi);
        let mut alphas = Vec::with_capacity(pairs.len());
        for (s, y, rho) in pairs.iter().rev() {
            let a = rho * dot(s, &dir);
            axpy(-a, y, &mut dir);
            alphas.push(a);
        }
        let gamma = match pairs.back() {
            Some((s, y, _)) => dot(s, y) / dot(y, y),
            None => 1.0 / norm(&g).max(1.0),
        };
        dir.iter_mut().for_each(|d| *d *= gamma);
        for ((s, y, rho), a) in pairs.iter().zip(alphas.into_iter().rev()) {
            let beta = rho * dot(y, &dir);
            axpy(a - beta, s, &mut dir);
        }
        let mut slope = dot(&g, &dir);
        if !(slope < 0.0) {
            pairs.clear();
            dir.iter_mut().zip(&g).for_each(|(d, gi)| *d = -gi / norm(&g).max(1.0));
            slope = dot(&g, &dir);
        }

        let mut step = 1.0;
        let mut accepted = false;
        for _ in 0..60 {
            x_new.iter_mut().zip(&x).zip(&dir).for_each(|((xn, xi), di)| *xn = xi + step * di);
            let f_new = f(&x_new, &mut g_new);
            if f_new <= fx + 1e-4 * step * slope {
                let s: Vec<f64> = x_new.iter().zip(&x).map(|(a, b)| a - b).collect();
                let y: Vec<f64> = g_new.iter().zip(&g).map(|(a, b)| a - b).collect();
                let sy = dot(&s, &y);
                if sy > 1e-12 * norm(&s) * norm(&y) && sy > 0.0 {
                    if pairs.len() == opts.memory {
                        pairs.pop_front();
                    }
                    pairs.push_back((s, y, 1.0 / sy));
                }
                std::mem::swap(&mut x, &mut x_new);
                std::mem::swap(&mut g, &mut g_new);
                fx = f_new;
                accepted = true;
                break;
            }
            step *= 0.5;
        }
        if !accepted {
            break;
        }
    }
    Minimum {
        grad_norm: norm(&g),
        params: x,
        value: fx,
        iterations,
    }
}

/// Result of [`fit_logistic`].
#[derive(Debug, Clone, PartialEq)]
pub struct LogisticFit {
    pub weights: Vec<f64>,
    pub bias: f64,
    pub objective: f64,
    pub grad_norm: f64,
    pub iterations: usize,
    /// True when every target took the same value and only a bias was fit.
    pub bias_only: bool,
}

/// Fits an L2-regularized logistic model from the zero vector.
///
/// When all targets are identical the unregularized bias has no finite
/// optimum; the model then degenerates to a smoothed bias-only predictor
/// `logit((sum t + 1) / (n + 2))` with zero weights.
pub fn fit_logistic(problem: &LogisticProblem, opts: &SolverOptions) -> LogisticFit {
    let d = problem.rows.dim();
    let n = problem.targets.len();
    let first = problem.targets.first().copied().unwrap_or(0.0);
    if problem.targets.iter().all(|&t| t == first) {
        let pos: f64 = problem.targets.iter().sum();
        let p = (pos + 1.0) / (n as f64 + 2.0);
        let mut params = vec![0.0; d + 1];
        params[d] = (p / (1.0 - p)).ln();
        let mut g = vec![0.0; d + 1];
        let objective = problem.value_grad(&params, &mut g);
        return LogisticFit {
            weights: vec![0.0; d],
            bias: params[d],
            objective,
            grad_norm: norm(&g),
            iterations: 0,
            bias_only: true,
        };
    }
    let min = minimize_lbfgs(
        |x, g| problem.value_grad(x, g),
        vec![0.0; d + 1],
        opts,
    );
    let mut weights = min.params;
    let bias = weights.pop().expect("bias slot");
    LogisticFit {
        weights,
        bias,
        objective: min.value,
        grad_norm: min.grad_norm,
        iterations: min.iterations,
        bias_only: false,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn toy(seed: u64, n: usize, d: usize, noise: f64) -> (SparseRows, Vec<f64>) {
        let mut r = crate::seed::rng(seed);
        let truth: Vec<f64> = (0..d).map(|_| r.gen_range(-2.0..2.0)).collect();
        let mut rows = SparseRows::new(d);
        let mut t = Vec::new();
        for _ in 0..n {
            let mut row = Vec::new();
            for i in 0..d {
                if r.gen_bool(0.4) {
                    row.push((i, r.gen_range(0.0..1.5)));
                }
            }
            let u: f64 = row.iter().map(|&(i, v)| truth[i] * v).sum::<f64>() - 0.3;
            let u = u + noise * r.gen_range(-1.0..1.0);
            t.push(if u > 0.0 { 1.0 } else { 0.0 });
            rows.push_row(row);
        }
        (rows, t)
    }

    #[test]
    fn softplus_and_sigmoid_are_stable() {
        assert_eq!(softplus(-1000.0), 0.0);
        assert_eq!(softplus(1000.0), 1000.0);
        assert!((softplus(0.0) - 2f64.ln()).abs() < 1e-15);
        assert_eq!(sigmoid(-1000.0), 0.0);
        assert_eq!(sigmoid(1000.0), 1.0);
    }

    #[test]
    fn separable_toy_is_fit_exactly() {
        let mut rows = SparseRows::new(2);
        let mut t = Vec::new();
        let mut r = crate::seed::rng(3);
        for _ in 0..60 {
            let a: f64 = r.gen_range(0.0..1.0);
            let b: f64 = r.gen_range(0.0..1.0);
            if (a - b).abs() < 0.1 {
                continue;
            }
            rows.push_row([(0, a), (1, b)]);
            t.push(if a > b { 1.0 } else { 0.0 });
        }
        let p = LogisticProblem { rows: &rows, targets: &t, active: None, reg: 1e-6 };
        let fit = fit_logistic(&p, &SolverOptions::default());
        for (r_i, &ti) in t.iter().enumerate() {
            let u = fit.bias + rows.row(r_i).map(|(i, v)| fit.weights[i] * v).sum::<f64>();
            assert_eq!(u > 0.0, ti == 1.0);
        }
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let (rows, t) = toy(7, 80, 6, 0.5);
        let p = LogisticProblem { rows: &rows, targets: &t, active: None, reg: 0.7 };
        let mut r = crate::seed::rng(1);
        let x: Vec<f64> = (0..7).map(|_| r.gen_range(-1.0..1.0)).collect();
        let mut g = vec![0.0; 7];
        p.value_grad(&x, &mut g);
        for i in 0..7 {
            let h = 1e-6;
            let mut xp = x.clone();
            xp[i] += h;
            let mut xm = x.clone();
            xm[i] -= h;
            let fd = (p.value(&xp) - p.value(&xm)) / (2.0 * h);
            assert!((fd - g[i]).abs() <= 1e-4 * g[i].abs().max(1e-3), "{i}: {fd} vs {}", g[i]);
        }
    }

    #[test]
    fn solver_reaches_stationarity_and_beats_zero() {
        let (rows, t) = toy(11, 400, 12, 1.0);
        let p = LogisticProblem { rows: &rows, targets: &t, active: None, reg: 1.0 };
        let fit = fit_logistic(&p, &SolverOptions::default());
        assert!(!fit.bias_only);
        assert!(fit.grad_norm <= 1e-6, "gradient {}", fit.grad_norm);
        assert!(fit.objective <= p.value(&vec![0.0; 13]));
    }

    #[test]
    fn masked_features_stay_zero() {
        let (rows, t) = toy(5, 200, 8, 0.5);
        let mask: Vec<bool> = (0..8).map(|i| i % 2 == 0).collect();
        let p = LogisticProblem { rows: &rows, targets: &t, active: Some(&mask), reg: 1.0 };
        let fit = fit_logistic(&p, &SolverOptions::default());
        for i in (1..8).step_by(2) {
            assert_eq!(fit.weights[i], 0.0);
        }
        assert!(fit.weights.iter().step_by(2).any(|&w| w != 0.0));
    }

    #[test]
    fn single_class_degenerates_to_bias() {
        let (rows, _) = toy(2, 30, 4, 0.0);
        let t = vec![0.0; 30];
        let p = LogisticProblem { rows: &rows, targets: &t, active: None, reg: 1.0 };
        let fit = fit_logistic(&p, &SolverOptions::default());
        assert!(fit.bias_only);
        assert!(fit.weights.iter().all(|&w| w == 0.0));
        assert!((sigmoid(fit.bias) - 1.0 / 32.0).abs() < 1e-12);
    }
}
