//! Dictionary learning with a mutual-incoherence penalty.
//!
//! Minimizes `||X - DZ||_F^2 + lambda * sum_{i != j} |d_i^T d_j|` subject to
//! unit-norm atoms and at most `K` nonzeros per code, by alternating batch
//! OMP coding with a sequential sweep of rank-one atom updates. Every step
//! only accepts moves that do not raise the objective, so the recorded
//! trace is non-increasing.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dict::{coherence_penalty, init_dictionary, Dictionary};
use crate::encode::{encode_columns, GramCache};
use crate::error::{invalid, Result};
use crate::grid::PatchMatrix;
use crate::linalg::{axpy, dot, norm, norm_sq};
use crate::sparse::SparseVector;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MiKsvdConfig {
    /// Weight of the pairwise coherence term.
    pub lambda: f64,
    /// Maximum number of code/update alternations.
    pub iterations: usize,
    pub seed: u64,
    /// Re-seed atoms that no signal uses with the worst-reconstructed patch.
    pub replace_unused_atoms: bool,
    /// Stop once the relative objective improvement of an iteration falls
    /// below this value.
    pub early_stop_tol: f64,
}

impl Default for MiKsvdConfig {
    fn default() -> Self {
        Self {
            lambda: 1e-2,
            iterations: 25,
            seed: 0,
            replace_unused_atoms: true,
            early_stop_tol: 1e-4,
        }
    }
}

impl MiKsvdConfig {
    pub fn validate(&self) -> Result<()> {
        if self.iterations == 0 {
            return Err(invalid("iterations must be >= 1"));
        }
        if !(self.lambda >= 0.0) || !self.lambda.is_finite() {
            return Err(invalid(format!("lambda must be finite and >= 0, got {}", self.lambda)));
        }
        if !(self.early_stop_tol >= 0.0) {
            return Err(invalid("early_stop_tol must be >= 0"));
        }
        Ok(())
    }
}

/// Squared reconstruction error of one signal.
fn code_error(x: &[f64], dict: &Dictionary, code: &SparseVector) -> f64 {
    let mut r = x.to_vec();
    for (i, v) in code.iter() {
        axpy(-v, dict.atom(i), &mut r);
    }
    norm_sq(&r)
}

/// Total squared reconstruction error `||X - DZ||_F^2`.
pub fn reconstruction_error(x: &PatchMatrix, dict: &Dictionary, codes: &[SparseVector]) -> f64 {
    let errs: Vec<f64> = x
        .data()
        .par_chunks_exact(x.dim())
        .zip(codes.par_iter())
        .map(|(col, code)| code_error(col, dict, code))
        .collect();
    errs.iter().sum()
}

/// The penalized objective `||X - DZ||_F^2 + lambda * coherence(D)`.
pub fn objective(x: &PatchMatrix, dict: &Dictionary, codes: &[SparseVector], lambda: f64) -> f64 {
    reconstruction_error(x, dict, codes) + lambda * coherence_penalty(dict)
}

/// Trains a dictionary of `atom_count` atoms at sparsity `sparsity`.
/// Returns the dictionary and the objective after each iteration.
pub fn mi_ksvd_train(
    x: &PatchMatrix,
    cfg: &MiKsvdConfig,
    atom_count: usize,
    sparsity: usize,
) -> Result<(Dictionary, Vec<f64>)> {
    let mut out = None;
    let trace = mi_ksvd_train_observed(x, cfg, atom_count, sparsity, |_, d, _| {
        out = Some(d.clone());
    })?;
    Ok((out.expect("at least one iteration runs"), trace))
}

/// Like [`mi_ksvd_train`], calling `observe(iteration, dictionary, codes)`
/// after every full iteration.
pub fn mi_ksvd_train_observed(
    x: &PatchMatrix,
    cfg: &MiKsvdConfig,
    atom_count: usize,
    sparsity: usize,
    mut observe: impl FnMut(usize, &Dictionary, &[SparseVector]),
) -> Result<Vec<f64>> {
    cfg.validate()?;
    if x.is_empty() {
        return Err(invalid("empty training matrix"));
    }
    if sparsity == 0 || sparsity > atom_count {
        return Err(invalid(format!(
            "sparsity must satisfy 1 <= K <= L, got K={sparsity}, L={atom_count}"
        )));
    }
    let mut dict = init_dictionary(x, atom_count, sparsity, cfg.seed)?;
    let mut codes = vec![SparseVector::empty(atom_count); x.count()];
    let mut trace: Vec<f64> = Vec::with_capacity(cfg.iterations);

    for iter in 0..cfg.iterations {
        let errors = sparse_coding_step(x, &dict, &mut codes)?;
        let mut errors = errors;
        atom_sweep(x, &mut dict, &mut codes, &mut errors, cfg);
        let obj = objective(x, &dict, &codes, cfg.lambda);
        log::debug!("mi-ksvd iteration {iter}: objective {obj:.6e}");
        observe(iter, &dict, &codes);
        let prev = trace.last().copied();
        trace.push(obj);
        if let Some(prev) = prev {
            if prev <= 0.0 || (prev - obj) / prev < cfg.early_stop_tol {
                break;
            }
        }
    }
    Ok(trace)
}

/// Re-codes every signal with batch OMP, keeping the previous code where it
/// reconstructs better under the current dictionary. Returns per-signal
/// squared errors.
fn sparse_coding_step(
    x: &PatchMatrix,
    dict: &Dictionary,
    codes: &mut [SparseVector],
) -> Result<Vec<f64>> {
    let cache = GramCache::new(dict);
    let fresh = encode_columns(x, dict, &cache)?;
    let n = x.dim();
    let errors: Vec<f64> = codes
        .par_iter_mut()
        .zip(fresh.into_par_iter())
        .zip(x.data().par_chunks_exact(n))
        .map(|((old, new), col)| {
            let e_new = code_error(col, dict, &new);
            let e_old = code_error(col, dict, old);
            if e_new <= e_old {
                *old = new;
                e_new
            } else {
                e_old
            }
        })
        .collect();
    Ok(errors)
}

/// `sum_{j != i} |d^T d_j|`
fn atom_coherence(dict: &Dictionary, i: usize, d: &[f64]) -> f64 {
    (0..dict.atom_count())
        .filter(|&j| j != i)
        .map(|j| dot(d, dict.atom(j)).abs())
        .sum()
}

/// Restricted residual block: one column per supporting signal.
struct ResidualBlock {
    n: usize,
    data: Vec<f64>,
}

impl ResidualBlock {
    fn cols(&self) -> std::slice::ChunksExact<'_, f64> {
        self.data.chunks_exact(self.n)
    }

    /// `E^T d`
    fn project(&self, d: &[f64]) -> Vec<f64> {
        self.cols().map(|c| dot(c, d)).collect()
    }

    /// `E E^T d`, normalized; `None` when it vanishes.
    fn power_step(&self, d: &[f64]) -> Option<Vec<f64>> {
        let mut u = vec![0.0; self.n];
        for c in self.cols() {
            axpy(dot(c, d), c, &mut u);
        }
        normalize(u)
    }

    fn frob_sq(&self) -> f64 {
        norm_sq(&self.data)
    }
}

fn normalize(mut v: Vec<f64>) -> Option<Vec<f64>> {
    let nv = norm(&v);
    if nv <= 1e-300 || !nv.is_finite() {
        return None;
    }
    v.iter_mut().for_each(|x| *x /= nv);
    Some(v)
}

/// KSVD rank-one update on a fixed support: one power-iteration step from
/// the current atom, with least-squares coefficients for the new atom.
/// Returns `(atom, coefficients)`.
pub fn rank_one_update(residual_cols: &[f64], n: usize, atom: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let block = ResidualBlock {
        n,
        data: residual_cols.to_vec(),
    };
    let d = block.power_step(atom).unwrap_or_else(|| atom.to_vec());
    let g = block.project(&d);
    (d, g)
}

fn atom_sweep(
    x: &PatchMatrix,
    dict: &mut Dictionary,
    codes: &mut [SparseVector],
    errors: &mut [f64],
    cfg: &MiKsvdConfig,
) {
    let l = dict.atom_count();
    let n = x.dim();
    let lambda = cfg.lambda;
    let mut usage: Vec<Vec<usize>> = vec![Vec::new(); l];
    for (s, code) in codes.iter().enumerate() {
        for &i in code.indices() {
            usage[i as usize].push(s);
        }
    }

    for i in 0..l {
        let support: Vec<usize> = usage[i]
            .iter()
            .copied()
            .filter(|&s| codes[s].get(i) != 0.0)
            .collect();
        if support.is_empty() {
            if cfg.replace_unused_atoms {
                replace_unused(x, dict, codes, errors, i, lambda);
            }
            continue;
        }

        let mut block = ResidualBlock {
            n,
            data: Vec::with_capacity(n * support.len()),
        };
        for &s in &support {
            let start = block.data.len();
            block.data.extend_from_slice(x.column(s));
            for (j, v) in codes[s].iter() {
                if j != i {
                    axpy(-v, dict.atom(j), &mut block.data[start..]);
                }
            }
        }
        let e_sq = block.frob_sq();
        let cost = |d: &[f64]| {
            let g = block.project(d);
            e_sq - norm_sq(&g) + 2.0 * lambda * atom_coherence(dict, i, d)
        };

        let d_old = dict.atom(i).to_vec();
        let mut best_cost = cost(&d_old);
        let mut best = d_old.clone();
        if let Some(d_pow) = block.power_step(&d_old) {
            let c_pow = cost(&d_pow);
            if c_pow <= best_cost {
                best_cost = c_pow;
                best = d_pow.clone();
            }
            if lambda > 0.0 {
                // push the atom away from the atoms it correlates with
                let mut push = vec![0.0; n];
                for j in (0..l).filter(|&j| j != i) {
                    let a = dict.atom(j);
                    axpy(dot(a, &d_pow).signum(), a, &mut push);
                }
                let mut step = 1.0;
                for _ in 0..12 {
                    let mut cand = d_pow.clone();
                    axpy(-lambda * step, &push, &mut cand);
                    if let Some(cand) = normalize(cand) {
                        let c = cost(&cand);
                        if c < best_cost {
                            best_cost = c;
                            best = cand;
                            break;
                        }
                    }
                    step *= 0.5;
                }
            }
        }

        let g = block.project(&best);
        dict.atom_mut(i).copy_from_slice(&best);
        for ((&s, &gs), col) in support.iter().zip(&g).zip(block.cols()) {
            set_coefficient(&mut codes[s], i, gs);
            errors[s] = (norm_sq(col) - gs * gs).max(0.0);
        }
    }
}

/// Replaces unused atom `i` by the normalized worst-reconstructed signal if
/// that lowers the objective; the signal is then coded by the new atom alone.
fn replace_unused(
    x: &PatchMatrix,
    dict: &mut Dictionary,
    codes: &mut [SparseVector],
    errors: &mut [f64],
    i: usize,
    lambda: f64,
) {
    let mut worst = 0;
    for (s, &e) in errors.iter().enumerate() {
        if e > errors[worst] {
            worst = s;
        }
    }
    let gain = errors[worst];
    if gain <= 0.0 {
        return;
    }
    let col = x.column(worst);
    let scale = norm(col);
    let Some(cand) = normalize(col.to_vec()) else {
        return;
    };
    let old_coh = atom_coherence(dict, i, dict.atom(i));
    let new_coh = atom_coherence(dict, i, &cand);
    let new_err = {
        let mut r = col.to_vec();
        axpy(-scale, &cand, &mut r);
        norm_sq(&r)
    };
    if new_err - gain + 2.0 * lambda * (new_coh - old_coh) >= 0.0 {
        return;
    }
    dict.atom_mut(i).copy_from_slice(&cand);
    codes[worst] = SparseVector::from_pairs(dict.atom_count(), vec![(i, scale)])
        .expect("single in-range index");
    errors[worst] = new_err;
}

fn set_coefficient(code: &mut SparseVector, index: usize, value: f64) {
    let pairs = code
        .iter()
        .map(|(j, v)| if j == index { (j, value) } else { (j, v) })
        .collect();
    *code = SparseVector::from_pairs(code.dim(), pairs).expect("indices unchanged");
}
