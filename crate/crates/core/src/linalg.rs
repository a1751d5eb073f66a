//! Small dense kernels shared by the solvers.

#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = [0.0f64; 4];
    let chunks = a.len() / 4;
    for k in 0..chunks {
        let i = 4 * k;
        acc[0] += a[i] * b[i];
        acc[1] += a[i + 1] * b[i + 1];
        acc[2] += a[i + 2] * b[i + 2];
        acc[3] += a[i + 3] * b[i + 3];
    }
    let mut s = (acc[0] + acc[1]) + (acc[2] + acc[3]);
    for i in 4 * chunks..a.len() {
        s += a[i] * b[i];
    }
    s
}

#[inline]
pub fn norm_sq(a: &[f64]) -> f64 {
    dot(a, a)
}

#[inline]
pub fn norm(a: &[f64]) -> f64 {
    norm_sq(a).sqrt()
}

/// `y += alpha * x`
#[inline]
pub fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

/// Lower-triangular factor stored row-packed: row `i` holds `i + 1` entries.
#[derive(Debug, Clone, Default)]
pub struct PackedLower {
    data: Vec<f64>,
    n: usize,
}

impl PackedLower {
    pub fn with_capacity(n: usize) -> Self {
        Self {
            data: Vec::with_capacity(n * (n + 1) / 2),
            n: 0,
        }
    }

    pub fn size(&self) -> usize {
        self.n
    }

    #[inline]
    pub fn at(&self, i: usize, j: usize) -> f64 {
        self.data[i * (i + 1) / 2 + j]
    }

    /// Appends a row `[w, diag]`.
    pub fn push_row(&mut self, w: &[f64], diag: f64) {
        debug_assert_eq!(w.len(), self.n);
        self.data.extend_from_slice(w);
        self.data.push(diag);
        self.n += 1;
    }

    /// Solves `L y = b` in place.
    pub fn solve_lower(&self, b: &mut [f64]) {
        for i in 0..b.len() {
            let mut s = b[i];
            for j in 0..i {
                s -= self.at(i, j) * b[j];
            }
            b[i] = s / self.at(i, i);
        }
    }

    /// Solves `L^T y = b` in place.
    pub fn solve_upper_t(&self, b: &mut [f64]) {
        for i in (0..b.len()).rev() {
            let mut s = b[i];
            for j in i + 1..b.len() {
                s -= self.at(j, i) * b[j];
            }
            b[i] = s / self.at(i, i);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn packed_solves() {
        // L = [[2,0],[1,3]]
        let mut l = PackedLower::with_capacity(2);
        l.push_row(&[], 2.0);
        l.push_row(&[1.0], 3.0);
        let mut b = vec![4.0, 11.0];
        l.solve_lower(&mut b);
        assert_eq!(b, vec![2.0, 3.0]);
        let mut c = vec![5.0, 6.0];
        l.solve_upper_t(&mut c);
        // L^T = [[2,1],[0,3]] -> y1 = 2, y0 = (5 - 2)/2
        assert_eq!(c, vec![1.5, 2.0]);
        assert_eq!(dot(&[1.0, 2.0, 3.0, 4.0, 5.0], &[1.0; 5]), 15.0);
    }
}
