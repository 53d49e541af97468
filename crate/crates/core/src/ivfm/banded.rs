//! Symmetric banded LDL^T without pivoting.
//!
//! Used on quasi-definite matrices (positive definite leading block,
//! negative definite trailing block), for which the factorization exists
//! under any symmetric ordering.

use crate::error::{Result, VfmError};

/// Lower band of a symmetric matrix: row `i` stores columns
/// `i - bw ..= i`.
#[derive(Clone, Debug)]
pub struct BandMatrix {
    n: usize,
    bw: usize,
    data: Vec<f64>,
}

impl BandMatrix {
    pub fn zeros(n: usize, bw: usize) -> Self {
        Self {
            n,
            bw,
            data: vec![0.0; n * (bw + 1)],
        }
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn bandwidth(&self) -> usize {
        self.bw
    }

    #[inline]
    fn slot(&self, i: usize, j: usize) -> usize {
        debug_assert!(j <= i && i - j <= self.bw);
        i * (self.bw + 1) + (self.bw - (i - j))
    }

    /// Add `v` at `(i, j)` and, implicitly, at `(j, i)`.
    pub fn add(&mut self, i: usize, j: usize, v: f64) {
        let (i, j) = if i >= j { (i, j) } else { (j, i) };
        assert!(i - j <= self.bw, "entry ({i},{j}) outside bandwidth {}", self.bw);
        let s = self.slot(i, j);
        self.data[s] += v;
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        let (i, j) = if i >= j { (i, j) } else { (j, i) };
        if i - j > self.bw {
            0.0
        } else {
            self.data[self.slot(i, j)]
        }
    }

    /// Factor in place. Fails on a zero or non-finite pivot.
    pub fn factor(mut self) -> Result<BandLdl> {
        let (n, bw) = (self.n, self.bw);
        let w = bw + 1;
        let mut d = vec![0.0; n];
        let mut scaled = vec![0.0; w];
        for j in 0..n {
            let k0 = j.saturating_sub(bw);
            let row_j = j * w;
            // scaled[k - k0] = L[j][k] * D[k]
            let mut dj = self.data[row_j + bw];
            for k in k0..j {
                let l = self.data[row_j + bw - (j - k)];
                scaled[k - k0] = l * d[k];
                dj -= l * scaled[k - k0];
            }
            if !(dj.is_finite()) || dj == 0.0 {
                return Err(VfmError::Optimization(format!("zero or non-finite pivot at {j}")));
            }
            d[j] = dj;
            self.data[row_j + bw] = 1.0;
            let i_max = (j + bw).min(n - 1);
            for i in j + 1..=i_max {
                let row_i = i * w;
                let ki0 = i.saturating_sub(bw).max(k0);
                let mut s = self.data[row_i + bw - (i - j)];
                for k in ki0..j {
                    s -= self.data[row_i + bw - (i - k)] * scaled[k - k0];
                }
                self.data[row_i + bw - (i - j)] = s / dj;
            }
        }
        Ok(BandLdl { l: self, d })
    }
}

#[derive(Clone, Debug)]
pub struct BandLdl {
    l: BandMatrix,
    d: Vec<f64>,
}

impl BandLdl {
    pub fn solve(&self, b: &[f64]) -> Vec<f64> {
        let (n, bw) = (self.l.n, self.l.bw);
        let w = bw + 1;
        let data = &self.l.data;
        let mut x = b.to_vec();
        for i in 0..n {
            let k0 = i.saturating_sub(bw);
            let mut s = x[i];
            for k in k0..i {
                s -= data[i * w + bw - (i - k)] * x[k];
            }
            x[i] = s;
        }
        for i in 0..n {
            x[i] /= self.d[i];
        }
        for i in (0..n).rev() {
            let xi = x[i];
            let k0 = i.saturating_sub(bw);
            for k in k0..i {
                x[k] -= data[i * w + bw - (i - k)] * xi;
            }
        }
        x
    }

    /// Pivot signs: (positive, negative).
    pub fn inertia(&self) -> (usize, usize) {
        let pos = self.d.iter().filter(|&&v| v > 0.0).count();
        (pos, self.d.len() - pos)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn solves_quasi_definite_tridiagonal_system() {
        // [[4, 1, 0], [1, 3, 1], [0, 1, -2]]
        let mut m = BandMatrix::zeros(3, 1);
        m.add(0, 0, 4.0);
        m.add(1, 0, 1.0);
        m.add(1, 1, 3.0);
        m.add(2, 1, 1.0);
        m.add(2, 2, -2.0);
        let f = m.factor().unwrap();
        let x = f.solve(&[1.0, 2.0, 3.0]);
        let r = [
            4.0 * x[0] + x[1] - 1.0,
            x[0] + 3.0 * x[1] + x[2] - 2.0,
            x[1] - 2.0 * x[2] - 3.0,
        ];
        assert!(r.iter().all(|v| v.abs() < 1e-14));
        assert_eq!(f.inertia(), (2, 1));
    }

    #[test]
    fn zero_pivot_is_reported() {
        let m = BandMatrix::zeros(2, 1);
        assert!(m.factor().is_err());
    }
}
