//! Patch dictionaries: unit-norm atoms over `side x side x channels` patches.

use std::io::{Read, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{invalid, Error, Result};
use crate::grid::{ImageGrid, PatchGeometry, PatchMatrix};
use crate::linalg::{dot, norm};
use crate::sparse::read_u32;

const DICT_MAGIC: &[u8; 4] = b"SLDC";
const DICT_VERSION: u32 = 1;
const UNIT_NORM_TOL: f64 = 1e-8;

/// `L` unit-norm atoms stored column-major (each atom contiguous).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dictionary {
    geometry: PatchGeometry,
    atom_count: usize,
    sparsity: usize,
    zero_mean_input: bool,
    atoms: Vec<f64>,
}

impl Dictionary {
    /// Wraps atoms that are already unit norm.
    pub fn new(
        geometry: PatchGeometry,
        atoms: Vec<f64>,
        sparsity: usize,
        zero_mean_input: bool,
    ) -> Result<Self> {
        let n = geometry.len();
        if atoms.is_empty() || atoms.len() % n != 0 {
            return Err(Error::DimensionMismatch {
                expected: n,
                got: atoms.len(),
            });
        }
        let atom_count = atoms.len() / n;
        if sparsity == 0 || sparsity > atom_count {
            return Err(invalid(format!(
                "sparsity must satisfy 1 <= K <= L, got K={sparsity}, L={atom_count}"
            )));
        }
        for (i, a) in atoms.chunks_exact(n).enumerate() {
            let nrm = norm(a);
            if !nrm.is_finite() || (nrm - 1.0).abs() > UNIT_NORM_TOL {
                return Err(invalid(format!("atom {i} has norm {nrm}, expected 1")));
            }
        }
        Ok(Self {
            geometry,
            atom_count,
            sparsity,
            zero_mean_input,
            atoms,
        })
    }

    /// Normalizes every column to unit norm first. Zero columns are rejected.
    pub fn normalized(
        geometry: PatchGeometry,
        mut atoms: Vec<f64>,
        sparsity: usize,
        zero_mean_input: bool,
    ) -> Result<Self> {
        let n = geometry.len();
        if atoms.len() % n != 0 {
            return Err(Error::DimensionMismatch {
                expected: n,
                got: atoms.len(),
            });
        }
        for (i, a) in atoms.chunks_exact_mut(n).enumerate() {
            let nrm = norm(a);
            if nrm == 0.0 || !nrm.is_finite() {
                return Err(invalid(format!("atom {i} has zero norm")));
            }
            a.iter_mut().for_each(|v| *v /= nrm);
        }
        Self::new(geometry, atoms, sparsity, zero_mean_input)
    }

    pub fn geometry(&self) -> PatchGeometry {
        self.geometry
    }

    /// Signal dimension `side * side * channels`.
    pub fn signal_dim(&self) -> usize {
        self.geometry.len()
    }

    pub fn atom_count(&self) -> usize {
        self.atom_count
    }

    pub fn sparsity(&self) -> usize {
        self.sparsity
    }

    pub fn zero_mean_input(&self) -> bool {
        self.zero_mean_input
    }

    pub fn set_zero_mean_input(&mut self, flag: bool) {
        self.zero_mean_input = flag;
    }

    pub fn atom(&self, i: usize) -> &[f64] {
        let n = self.geometry.len();
        &self.atoms[i * n..(i + 1) * n]
    }

    pub fn atoms(&self) -> &[f64] {
        &self.atoms
    }

    pub(crate) fn atom_mut(&mut self, i: usize) -> &mut [f64] {
        let n = self.geometry.len();
        &mut self.atoms[i * n..(i + 1) * n]
    }

    /// `D^T x` for a dense signal.
    pub fn correlate(&self, x: &[f64], out: &mut [f64]) {
        for (o, a) in out.iter_mut().zip(self.atoms.chunks_exact(self.geometry.len())) {
            *o = dot(a, x);
        }
    }

    /// `D^T x` touching only the listed nonzero entries of `x`.
    pub fn correlate_sparse(&self, nz: &[(usize, f64)], out: &mut [f64]) {
        let n = self.geometry.len();
        for (j, o) in out.iter_mut().enumerate() {
            let a = &self.atoms[j * n..(j + 1) * n];
            *o = nz.iter().map(|&(r, v)| a[r] * v).sum();
        }
    }

    /// Dense Gram matrix `D^T D`, row-major `L x L`.
    pub fn gram(&self) -> Vec<f64> {
        let l = self.atom_count;
        let mut g = vec![0.0; l * l];
        for i in 0..l {
            for j in i..l {
                let v = dot(self.atom(i), self.atom(j));
                g[i * l + j] = v;
                g[j * l + i] = v;
            }
        }
        g
    }

    /// Content hash of the binary encoding.
    pub fn fingerprint(&self) -> u64 {
        let mut buf = Vec::with_capacity(32 + self.atoms.len() * 8);
        self.write_to(&mut buf).expect("writing to a Vec cannot fail");
        let digest = Sha256::digest(&buf);
        u64::from_le_bytes(digest[..8].try_into().unwrap())
    }

    /// Binary `SLDC` record: magic, version, m, c, L, K (u32 LE), zero-mean
    /// flag (u8), then the atoms as column-major little-endian f64.
    pub fn write_to(&self, mut w: impl Write) -> Result<()> {
        w.write_all(DICT_MAGIC)?;
        for v in [
            DICT_VERSION,
            self.geometry.side() as u32,
            self.geometry.channels() as u32,
            self.atom_count as u32,
            self.sparsity as u32,
        ] {
            w.write_all(&v.to_le_bytes())?;
        }
        w.write_all(&[self.zero_mean_input as u8])?;
        for v in &self.atoms {
            w.write_all(&v.to_le_bytes())?;
        }
        Ok(())
    }

    pub fn read_from(mut r: impl Read) -> Result<Self> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != DICT_MAGIC {
            return Err(Error::Format("not a dictionary file (bad magic)".into()));
        }
        let version = read_u32(&mut r)?;
        if version != DICT_VERSION {
            return Err(Error::Format(format!("unsupported dictionary version {version}")));
        }
        let side = read_u32(&mut r)? as usize;
        let channels = read_u32(&mut r)? as usize;
        let atom_count = read_u32(&mut r)? as usize;
        let sparsity = read_u32(&mut r)? as usize;
        let mut flag = [0u8; 1];
        r.read_exact(&mut flag)?;
        let geometry = PatchGeometry::new(side, channels)?;
        let mut atoms = vec![0.0; geometry.len() * atom_count];
        let mut b = [0u8; 8];
        for v in atoms.iter_mut() {
            r.read_exact(&mut b)?;
            *v = f64::from_le_bytes(b);
        }
        Self::new(geometry, atoms, sparsity, flag[0] != 0)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let f = std::io::BufWriter::new(std::fs::File::create(path)?);
        self.write_to(f)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let f = std::io::BufReader::new(std::fs::File::open(path)?);
        Self::read_from(f)
    }

    /// Lossless JSON dump (f64 values round-trip through their shortest
    /// decimal representation).
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let d: Dictionary = serde_json::from_str(s)?;
        Self::new(d.geometry, d.atoms, d.sparsity, d.zero_mean_input)
    }
}

/// Picks `atom_count` training patches (seeded, without replacement) and
/// normalizes them into atoms. Zero patches and exact duplicates of an
/// already chosen direction are skipped.
pub fn init_dictionary(
    patches: &PatchMatrix,
    atom_count: usize,
    sparsity: usize,
    seed: u64,
) -> Result<Dictionary> {
    if atom_count == 0 {
        return Err(invalid("atom count must be >= 1"));
    }
    let n = patches.dim();
    let mut order: Vec<usize> = (0..patches.count()).collect();
    order.shuffle(&mut crate::seed::rng(seed));
    let mut atoms: Vec<f64> = Vec::with_capacity(atom_count * n);
    let mut chosen = 0;
    for idx in order {
        if chosen == atom_count {
            break;
        }
        let col = patches.column(idx);
        let nrm = norm(col);
        if nrm <= 1e-12 {
            continue;
        }
        let unit: Vec<f64> = col.iter().map(|v| v / nrm).collect();
        let duplicate = atoms
            .chunks_exact(n)
            .any(|a| (dot(a, &unit).abs() - 1.0).abs() < 1e-12);
        if duplicate {
            continue;
        }
        atoms.extend_from_slice(&unit);
        chosen += 1;
    }
    if chosen < atom_count {
        return Err(Error::InsufficientPatches {
            needed: atom_count,
            found: chosen,
        });
    }
    Dictionary::new(patches.geometry(), atoms, sparsity, false)
}

/// Sum of `|d_i^T d_j|` over ordered pairs `i != j` (unweighted).
pub fn coherence_penalty(dict: &Dictionary) -> f64 {
    let l = dict.atom_count();
    let mut total = 0.0;
    for i in 0..l {
        for j in i + 1..l {
            total += dot(dict.atom(i), dict.atom(j)).abs();
        }
    }
    2.0 * total
}

/// Tiles every atom into one image for viewing, each stretched to `[0, 1]`
/// on its own, with a one-pixel gap between tiles. One- and three-channel
/// atoms keep their channels; wider atoms show the per-pixel norm across
/// channels.
pub fn atom_mosaic(dict: &Dictionary) -> ImageGrid {
    let geom = dict.geometry();
    let (side, c) = (geom.side(), geom.channels());
    let out_c = if c == 3 { 3 } else { 1 };
    let n = dict.atom_count();
    let cols = (n as f64).sqrt().ceil() as usize;
    let rows = n.div_ceil(cols);
    let step = side + 1;
    let mut out = ImageGrid::zeros(cols * step + 1, rows * step + 1, out_c);
    for i in 0..n {
        let atom = dict.atom(i);
        let values: Vec<f64> = if c == out_c {
            atom.to_vec()
        } else {
            atom.chunks(c).map(norm).collect()
        };
        let lo = values.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let span = if hi > lo { hi - lo } else { 1.0 };
        let (ox, oy) = ((i % cols) * step + 1, (i / cols) * step + 1);
        for py in 0..side {
            for px in 0..side {
                for ch in 0..out_c {
                    let v = values[(py * side + px) * out_c + ch];
                    out.set(ox + px, oy + py, ch, (v - lo) / span);
                }
            }
        }
    }
    out
}
