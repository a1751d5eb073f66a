//! Sparse coefficient vectors and per-pixel sparse maps.

use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::grid::ImageGrid;

/// A sparse vector with strictly increasing indices and no stored zeros.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct SparseVector {
    indices: Vec<u32>,
    values: Vec<f64>,
    dim: usize,
}

impl SparseVector {
    pub fn empty(dim: usize) -> Self {
        Self {
            indices: Vec::new(),
            values: Vec::new(),
            dim,
        }
    }

    /// Builds a vector from unordered `(index, value)` pairs. Zeros are
    /// dropped; duplicate or out-of-range indices are rejected.
    pub fn from_pairs(dim: usize, mut pairs: Vec<(usize, f64)>) -> Result<Self> {
        pairs.sort_by_key(|p| p.0);
        let mut out = Self::empty(dim);
        for (i, v) in pairs {
            if i >= dim {
                return Err(invalid(format!("sparse index {i} out of range for dim {dim}")));
            }
            if out.indices.last().is_some_and(|&last| last as usize == i) {
                return Err(invalid(format!("duplicate sparse index {i}")));
            }
            if !v.is_finite() {
                return Err(invalid("non-finite sparse value"));
            }
            if v != 0.0 {
                out.indices.push(i as u32);
                out.values.push(v);
            }
        }
        Ok(out)
    }

    /// Appends an entry whose index exceeds every stored index.
    pub(crate) fn push_sorted(&mut self, index: usize, value: f64) {
        debug_assert!(index < self.dim);
        debug_assert!(self.indices.last().is_none_or(|&l| (l as usize) < index));
        if value != 0.0 {
            self.indices.push(index as u32);
            self.values.push(value);
        }
    }

    pub fn from_dense(dense: &[f64]) -> Self {
        let mut out = Self::empty(dense.len());
        for (i, &v) in dense.iter().enumerate() {
            out.push_sorted(i, v);
        }
        out
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn nnz(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    pub fn indices(&self) -> &[u32] {
        &self.indices
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn iter(&self) -> impl Iterator<Item = (usize, f64)> + '_ {
        self.indices
            .iter()
            .zip(&self.values)
            .map(|(&i, &v)| (i as usize, v))
    }

    pub fn get(&self, index: usize) -> f64 {
        match self.indices.binary_search(&(index as u32)) {
            Ok(pos) => self.values[pos],
            Err(_) => 0.0,
        }
    }

    pub fn to_dense(&self) -> Vec<f64> {
        let mut out = vec![0.0; self.dim];
        for (i, v) in self.iter() {
            out[i] = v;
        }
        out
    }

    /// Rounds every stored value through `f32`, the precision of the binary
    /// map format.
    pub fn quantize_f32(&mut self) {
        for v in &mut self.values {
            *v = *v as f32 as f64;
        }
        let mut k = 0;
        for j in 0..self.values.len() {
            if self.values[j] != 0.0 {
                self.values[k] = self.values[j];
                self.indices[k] = self.indices[j];
                k += 1;
            }
        }
        self.values.truncate(k);
        self.indices.truncate(k);
    }
}

/// One sparse vector per pixel of a `width x height` grid.
#[derive(Debug, Clone, PartialEq)]
pub struct SparseCodeMap {
    width: usize,
    height: usize,
    dim: usize,
    cells: Vec<SparseVector>,
}

const CODE_MAP_MAGIC: &[u8; 4] = b"SLZM";

impl SparseCodeMap {
    pub fn new(width: usize, height: usize, dim: usize, cells: Vec<SparseVector>) -> Result<Self> {
        if cells.len() != width * height {
            return Err(Error::DimensionMismatch {
                expected: width * height,
                got: cells.len(),
            });
        }
        if let Some(bad) = cells.iter().find(|c| c.dim() != dim) {
            return Err(Error::DimensionMismatch {
                expected: dim,
                got: bad.dim(),
            });
        }
        Ok(Self {
            width,
            height,
            dim,
            cells,
        })
    }

    pub fn empty(width: usize, height: usize, dim: usize) -> Self {
        Self {
            width,
            height,
            dim,
            cells: vec![SparseVector::empty(dim); width * height],
        }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn cells(&self) -> &[SparseVector] {
        &self.cells
    }

    pub fn into_cells(self) -> Vec<SparseVector> {
        self.cells
    }

    pub fn cell(&self, x: usize, y: usize) -> &SparseVector {
        &self.cells[y * self.width + x]
    }

    pub fn total_nnz(&self) -> usize {
        self.cells.iter().map(SparseVector::nnz).sum()
    }

    /// Dense grid with one channel per sparse dimension.
    pub fn to_dense_grid(&self) -> ImageGrid {
        let mut data = vec![0.0; self.width * self.height * self.dim];
        for (p, cell) in self.cells.iter().enumerate() {
            for (i, v) in cell.iter() {
                data[p * self.dim + i] = v;
            }
        }
        ImageGrid::from_vec(self.width, self.height, self.dim, data)
            .expect("sparse map values are finite")
    }

    /// Writes the binary `SLZM` record: magic, width, height, dim (u32 LE),
    /// then per cell an nnz count (u16) and `(u32 index, f32 value)` pairs.
    pub fn write_to(&self, mut w: impl Write) -> Result<()> {
        w.write_all(CODE_MAP_MAGIC)?;
        for v in [self.width, self.height, self.dim] {
            w.write_all(&(v as u32).to_le_bytes())?;
        }
        for cell in &self.cells {
            let nnz = u16::try_from(cell.nnz())
                .map_err(|_| invalid(format!("cell nnz {} exceeds u16", cell.nnz())))?;
            w.write_all(&nnz.to_le_bytes())?;
            for (i, v) in cell.iter() {
                w.write_all(&(i as u32).to_le_bytes())?;
                w.write_all(&(v as f32).to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn read_from(mut r: impl Read) -> Result<Self> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != CODE_MAP_MAGIC {
            return Err(Error::Format("not a sparse code map (bad magic)".into()));
        }
        let width = read_u32(&mut r)? as usize;
        let height = read_u32(&mut r)? as usize;
        let dim = read_u32(&mut r)? as usize;
        let mut cells = Vec::with_capacity(width * height);
        for _ in 0..width * height {
            let mut nb = [0u8; 2];
            r.read_exact(&mut nb)?;
            let nnz = u16::from_le_bytes(nb) as usize;
            let mut pairs = Vec::with_capacity(nnz);
            for _ in 0..nnz {
                let i = read_u32(&mut r)? as usize;
                let mut vb = [0u8; 4];
                r.read_exact(&mut vb)?;
                pairs.push((i, f32::from_le_bytes(vb) as f64));
            }
            cells.push(SparseVector::from_pairs(dim, pairs)?);
        }
        Self::new(width, height, dim, cells)
    }
}

pub(crate) fn read_u32(r: &mut impl Read) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn from_pairs_sorts_and_drops_zeros() {
        let v = SparseVector::from_pairs(10, vec![(7, 1.5), (2, 0.0), (3, -2.0)]).unwrap();
        assert_eq!(v.indices(), &[3, 7]);
        assert_eq!(v.values(), &[-2.0, 1.5]);
        assert!(SparseVector::from_pairs(4, vec![(4, 1.0)]).is_err());
        assert!(SparseVector::from_pairs(4, vec![(1, 1.0), (1, 2.0)]).is_err());
    }

    #[test]
    fn rejects_bad_magic() {
        assert!(SparseCodeMap::read_from(&b"XXXX\0\0\0\0"[..]).is_err());
    }

    proptest! {
        #[test]
        fn binary_round_trip_is_f32_exact(
            w in 1usize..5, h in 1usize..5, dim in 1usize..40, seed in 0u64..500,
        ) {
            use rand::Rng;
            let mut rng = crate::seed::rng(seed);
            let mut cells = Vec::new();
            for _ in 0..w * h {
                let mut pairs = Vec::new();
                for i in 0..dim {
                    if rng.gen_bool(0.2) {
                        pairs.push((i, rng.gen_range(-3.0..3.0)));
                    }
                }
                cells.push(SparseVector::from_pairs(dim, pairs).unwrap());
            }
            let mut map = SparseCodeMap::new(w, h, dim, cells).unwrap();
            let mut buf = Vec::new();
            map.write_to(&mut buf).unwrap();
            let back = SparseCodeMap::read_from(&buf[..]).unwrap();
            for c in &mut map.cells { c.quantize_f32(); }
            prop_assert_eq!(back, map);
        }
    }
}
