//! Greedy sparse coding against a fixed dictionary.
//!
//! [`omp_encode`] is the reference orthogonal matching pursuit: it keeps an
//! explicit residual and solves the support least-squares problem through a
//! modified Gram-Schmidt QR. [`batch_omp_encode`] is the batch variant that
//! works purely from `D^T x` and the cached Gram matrix, updating a Cholesky
//! factor of the support Gram block one row per round. Both share the same
//! selection and stopping rules, so they agree on supports.

use std::io::{Read, Write};
use std::path::Path;

use rayon::prelude::*;

use crate::dict::Dictionary;
use crate::error::{Error, Result};
use crate::grid::{extract_patch_into, zero_mean_in_place, ImageGrid, PatchMatrix};
use crate::linalg::{axpy, dot, norm, PackedLower};
use crate::sparse::{read_u32, SparseCodeMap, SparseVector};

/// Residual norm at or below which pursuit stops.
pub const RESIDUAL_TOL: f64 = 1e-12;
/// Correlations at or below this fraction of `||x||` count as zero.
pub const CORRELATION_TOL: f64 = 1e-10;
/// Minimum squared norm of a new atom's component orthogonal to the support.
pub const PIVOT_TOL: f64 = 1e-10;
/// Relative gap under which two correlations tie (lowest index wins).
const TIE_TOL: f64 = 1e-12;

/// Picks the unselected atom of largest `|corr|`, lowest index on ties.
fn select_atom(corr: &[f64], selected: &[bool]) -> Option<(usize, f64)> {
    let mut best = 0.0f64;
    for (c, &s) in corr.iter().zip(selected) {
        if !s && c.abs() > best {
            best = c.abs();
        }
    }
    if best == 0.0 {
        return None;
    }
    let cut = best * (1.0 - TIE_TOL);
    corr.iter()
        .zip(selected)
        .position(|(c, &s)| !s && c.abs() >= cut)
        .map(|i| (i, best))
}

/// State after one round of reference OMP.
#[derive(Debug, Clone)]
pub struct OmpStep {
    /// Atom indices in selection order.
    pub support: Vec<usize>,
    /// Least-squares coefficients aligned with `support`.
    pub coefficients: Vec<f64>,
    pub residual: Vec<f64>,
}

/// Runs reference OMP and returns the state after every round.
pub fn omp_path(x: &[f64], dict: &Dictionary) -> Result<Vec<OmpStep>> {
    let n = dict.signal_dim();
    if x.len() != n {
        return Err(Error::DimensionMismatch {
            expected: n,
            got: x.len(),
        });
    }
    let l = dict.atom_count();
    let k_max = dict.sparsity();
    let x_norm = norm(x);
    let mut steps = Vec::new();
    let mut selected = vec![false; l];
    let mut support = Vec::with_capacity(k_max);
    // orthonormal basis of the support span, R factor (column-packed), Q^T x
    let mut q_basis: Vec<Vec<f64>> = Vec::with_capacity(k_max);
    let mut r_cols: Vec<Vec<f64>> = Vec::with_capacity(k_max);
    let mut qtx: Vec<f64> = Vec::with_capacity(k_max);
    let mut residual = x.to_vec();
    let mut corr = vec![0.0; l];

    while support.len() < k_max {
        if norm(&residual) <= RESIDUAL_TOL {
            break;
        }
        dict.correlate(&residual, &mut corr);
        let Some((k, best)) = select_atom(&corr, &selected) else {
            break;
        };
        if best <= CORRELATION_TOL * x_norm {
            break;
        }
        let atom = dict.atom(k);
        let mut q = atom.to_vec();
        let mut r = vec![0.0; q_basis.len() + 1];
        for _pass in 0..2 {
            for (j, qj) in q_basis.iter().enumerate() {
                let c = dot(qj, &q);
                r[j] += c;
                axpy(-c, qj, &mut q);
            }
        }
        let pivot = dot(&q, &q);
        if pivot < PIVOT_TOL {
            break;
        }
        let qn = pivot.sqrt();
        q.iter_mut().for_each(|v| *v /= qn);
        r[q_basis.len()] = qn;
        qtx.push(dot(&q, x));
        q_basis.push(q);
        r_cols.push(r);
        selected[k] = true;
        support.push(k);

        // back substitution R gamma = Q^T x
        let s = support.len();
        let mut gamma = qtx.clone();
        for i in (0..s).rev() {
            let mut v = gamma[i];
            for (j, col) in r_cols.iter().enumerate().skip(i + 1) {
                v -= col[i] * gamma[j];
            }
            gamma[i] = v / r_cols[i][i];
        }
        residual.copy_from_slice(x);
        for (&idx, &g) in support.iter().zip(&gamma) {
            axpy(-g, dict.atom(idx), &mut residual);
        }
        steps.push(OmpStep {
            support: support.clone(),
            coefficients: gamma,
            residual: residual.clone(),
        });
    }
    Ok(steps)
}

/// Reference OMP: at most `K` atoms, each round picking the atom most
/// correlated with the residual and re-projecting onto the support.
pub fn omp_encode(x: &[f64], dict: &Dictionary) -> Result<SparseVector> {
    let steps = omp_path(x, dict)?;
    let pairs = match steps.last() {
        Some(s) => s.support.iter().copied().zip(s.coefficients.iter().copied()).collect(),
        None => Vec::new(),
    };
    SparseVector::from_pairs(dict.atom_count(), pairs)
}

/// Precomputed `D^T D` tied to the dictionary it came from.
#[derive(Debug, Clone, PartialEq)]
pub struct GramCache {
    gram: Vec<f64>,
    atom_count: usize,
    fingerprint: u64,
}

const GRAM_MAGIC: &[u8; 4] = b"SLGC";

impl GramCache {
    pub fn new(dict: &Dictionary) -> Self {
        Self {
            gram: dict.gram(),
            atom_count: dict.atom_count(),
            fingerprint: dict.fingerprint(),
        }
    }

    pub fn gram(&self) -> &[f64] {
        &self.gram
    }

    pub fn fingerprint(&self) -> u64 {
        self.fingerprint
    }

    pub fn check(&self, dict: &Dictionary) -> Result<()> {
        let fp = dict.fingerprint();
        if fp != self.fingerprint || self.atom_count != dict.atom_count() {
            return Err(Error::StaleGramCache {
                cache: self.fingerprint,
                dict: fp,
            });
        }
        Ok(())
    }

    pub fn write_to(&self, mut w: impl Write) -> Result<()> {
        w.write_all(GRAM_MAGIC)?;
        w.write_all(&self.fingerprint.to_le_bytes())?;
        w.write_all(&(self.atom_count as u32).to_le_bytes())?;
        for v in &self.gram {
            w.write_all(&v.to_le_bytes())?;
        }
        Ok(())
    }

    pub fn read_from(mut r: impl Read) -> Result<Self> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != GRAM_MAGIC {
            return Err(Error::Format("not a gram cache (bad magic)".into()));
        }
        let mut b8 = [0u8; 8];
        r.read_exact(&mut b8)?;
        let fingerprint = u64::from_le_bytes(b8);
        let atom_count = read_u32(&mut r)? as usize;
        let mut gram = vec![0.0; atom_count * atom_count];
        for v in gram.iter_mut() {
            r.read_exact(&mut b8)?;
            *v = f64::from_le_bytes(b8);
        }
        Ok(Self {
            gram,
            atom_count,
            fingerprint,
        })
    }

    /// Loads `<dir>/<fingerprint>.gram` when present and valid for `dict`,
    /// otherwise computes the cache and stores it there.
    pub fn load_or_build(dict: &Dictionary, dir: impl AsRef<Path>) -> Result<Self> {
        let path = dir.as_ref().join(format!("{:016x}.gram", dict.fingerprint()));
        if let Ok(f) = std::fs::File::open(&path) {
            if let Ok(cache) = Self::read_from(std::io::BufReader::new(f)) {
                if cache.check(dict).is_ok() {
                    return Ok(cache);
                }
            }
        }
        let cache = Self::new(dict);
        std::fs::create_dir_all(dir.as_ref())?;
        cache.write_to(std::io::BufWriter::new(std::fs::File::create(&path)?))?;
        Ok(cache)
    }
}

/// Scratch buffers for one batch-OMP worker.
struct BompWorkspace {
    alpha0: Vec<f64>,
    alpha: Vec<f64>,
    selected: Vec<bool>,
    nz: Vec<(usize, f64)>,
}

impl BompWorkspace {
    fn new(atom_count: usize) -> Self {
        Self {
            alpha0: vec![0.0; atom_count],
            alpha: vec![0.0; atom_count],
            selected: vec![false; atom_count],
            nz: Vec::new(),
        }
    }

    fn encode(&mut self, x: &[f64], dict: &Dictionary, gram: &[f64]) -> SparseVector {
        self.nz.clear();
        self.nz
            .extend(x.iter().enumerate().filter(|(_, &v)| v != 0.0).map(|(i, &v)| (i, v)));
        if self.nz.len() * 4 < x.len() {
            dict.correlate_sparse(&self.nz, &mut self.alpha0);
        } else {
            dict.correlate(x, &mut self.alpha0);
        }
        let x_norm_sq: f64 = self.nz.iter().map(|(_, v)| v * v).sum();
        bomp_from_correlations(
            &self.alpha0,
            x_norm_sq,
            gram,
            dict.sparsity(),
            &mut self.alpha,
            &mut self.selected,
        )
    }
}

/// Batch OMP from `alpha0 = D^T x` and `||x||^2` alone.
fn bomp_from_correlations(
    alpha0: &[f64],
    x_norm_sq: f64,
    gram: &[f64],
    k_max: usize,
    alpha: &mut [f64],
    selected: &mut [bool],
) -> SparseVector {
    let l = alpha0.len();
    let x_norm = x_norm_sq.sqrt();
    alpha.copy_from_slice(alpha0);
    selected.iter_mut().for_each(|s| *s = false);
    let mut support: Vec<usize> = Vec::with_capacity(k_max);
    let mut chol = PackedLower::with_capacity(k_max);
    let mut gamma: Vec<f64> = Vec::new();
    let mut w = Vec::with_capacity(k_max);

    while support.len() < k_max {
        let explained: f64 = support.iter().zip(&gamma).map(|(&i, g)| g * alpha0[i]).sum();
        let res_norm = (x_norm_sq - explained).max(0.0).sqrt();
        if res_norm <= RESIDUAL_TOL {
            break;
        }
        let Some((k, best)) = select_atom(alpha, selected) else {
            break;
        };
        if best <= CORRELATION_TOL * x_norm {
            break;
        }
        let gkk = gram[k * l + k];
        w.clear();
        w.extend(support.iter().map(|&i| gram[k * l + i]));
        chol.solve_lower(&mut w);
        let pivot = gkk - dot(&w, &w);
        if pivot < PIVOT_TOL {
            break;
        }
        chol.push_row(&w, pivot.sqrt());
        support.push(k);
        selected[k] = true;

        gamma.clear();
        gamma.extend(support.iter().map(|&i| alpha0[i]));
        chol.solve_lower(&mut gamma);
        chol.solve_upper_t(&mut gamma);

        alpha.copy_from_slice(alpha0);
        for (&i, &g) in support.iter().zip(&gamma) {
            axpy(-g, &gram[i * l..(i + 1) * l], alpha);
        }
    }
    let pairs = support.into_iter().zip(gamma).collect();
    SparseVector::from_pairs(l, pairs).expect("support indices are unique and in range")
}

/// Batch OMP over every column of `patches`.
pub fn batch_omp_encode(
    patches: &PatchMatrix,
    dict: &Dictionary,
    cache: &GramCache,
) -> Result<Vec<SparseVector>> {
    cache.check(dict)?;
    encode_columns(patches, dict, cache)
}

/// Same as [`batch_omp_encode`] for callers that already validated `cache`.
pub(crate) fn encode_columns(
    patches: &PatchMatrix,
    dict: &Dictionary,
    cache: &GramCache,
) -> Result<Vec<SparseVector>> {
    if patches.dim() != dict.signal_dim() {
        return Err(Error::DimensionMismatch {
            expected: dict.signal_dim(),
            got: patches.dim(),
        });
    }
    let l = dict.atom_count();
    let gram = cache.gram();
    let data = patches.data();
    let n = patches.dim();
    const CHUNK: usize = 256;
    let out: Vec<Vec<SparseVector>> = data
        .par_chunks(n * CHUNK)
        .map(|chunk| {
            let mut ws = BompWorkspace::new(l);
            chunk.chunks_exact(n).map(|x| ws.encode(x, dict, gram)).collect()
        })
        .collect();
    Ok(out.into_iter().flatten().collect())
}

/// Encodes the patch around every pixel of `img`.
pub fn encode_image(img: &ImageGrid, dict: &Dictionary) -> Result<SparseCodeMap> {
    let cache = GramCache::new(dict);
    encode_image_cached(img, dict, &cache)
}

pub fn encode_image_cached(
    img: &ImageGrid,
    dict: &Dictionary,
    cache: &GramCache,
) -> Result<SparseCodeMap> {
    let geom = dict.geometry();
    if img.channels() != geom.channels() {
        return Err(Error::ChannelMismatch {
            expected: geom.channels(),
            got: img.channels(),
        });
    }
    cache.check(dict)?;
    let l = dict.atom_count();
    let gram = cache.gram();
    let zero_mean = dict.zero_mean_input();
    let rows: Vec<Result<Vec<SparseVector>>> = (0..img.height())
        .into_par_iter()
        .map(|y| {
            let mut ws = BompWorkspace::new(l);
            let mut patch = vec![0.0; geom.len()];
            let mut row = Vec::with_capacity(img.width());
            for x in 0..img.width() {
                extract_patch_into(img, x, y, geom, &mut patch)?;
                if zero_mean {
                    zero_mean_in_place(&mut patch, geom.channels());
                }
                row.push(ws.encode(&patch, dict, gram));
            }
            Ok(row)
        })
        .collect();
    let mut cells = Vec::with_capacity(img.pixel_count());
    for row in rows {
        cells.extend(row?);
    }
    SparseCodeMap::new(img.width(), img.height(), l, cells)
}

/// Stamps every pixel's decoded patch `D z` centered at that pixel and
/// averages overlapping stamps uniformly.
pub fn reconstruct_image(codes: &SparseCodeMap, dict: &Dictionary) -> Result<ImageGrid> {
    if codes.dim() != dict.atom_count() {
        return Err(Error::DimensionMismatch {
            expected: dict.atom_count(),
            got: codes.dim(),
        });
    }
    let geom = dict.geometry();
    let (w, h) = (codes.width(), codes.height());
    let n = geom.len();
    let c = geom.channels();
    let side = geom.side();
    let r = geom.radius() as isize;

    // decoded patch per nonempty pixel
    let decoded: Vec<Option<Vec<f64>>> = codes
        .cells()
        .par_iter()
        .map(|cell| {
            if cell.is_empty() {
                return None;
            }
            let mut p = vec![0.0; n];
            for (i, v) in cell.iter() {
                axpy(v, dict.atom(i), &mut p);
            }
            Some(p)
        })
        .collect();

    let rows: Vec<Vec<f64>> = (0..h)
        .into_par_iter()
        .map(|qy| {
            let mut row = vec![0.0; w * c];
            for qx in 0..w {
                let mut count = 0usize;
                let acc = &mut row[qx * c..(qx + 1) * c];
                for py in (qy as isize - r).max(0)..=(qy as isize + r).min(h as isize - 1) {
                    for px in (qx as isize - r).max(0)..=(qx as isize + r).min(w as isize - 1) {
                        count += 1;
                        if let Some(p) = &decoded[py as usize * w + px as usize] {
                            let oy = (qy as isize - py + r) as usize;
                            let ox = (qx as isize - px + r) as usize;
                            let base = (oy * side + ox) * c;
                            for ch in 0..c {
                                acc[ch] += p[base + ch];
                            }
                        }
                    }
                }
                acc.iter_mut().for_each(|v| *v /= count as f64);
            }
            row
        })
        .collect();
    ImageGrid::from_vec(w, h, c, rows.concat())
}
