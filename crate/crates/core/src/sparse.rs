//! Minimal compressed-sparse-row matrix for stencil operators.

/// Row-compressed sparse matrix. Column indices within a row keep their
/// insertion order after duplicates are merged.
#[derive(Clone, Debug, PartialEq)]
pub struct CsrMatrix {
    rows: usize,
    cols: usize,
    indptr: Vec<usize>,
    indices: Vec<usize>,
    values: Vec<f64>,
}

/// Row-by-row builder.
#[derive(Debug)]
pub struct CsrBuilder {
    cols: usize,
    indptr: Vec<usize>,
    indices: Vec<usize>,
    values: Vec<f64>,
}

impl CsrBuilder {
    pub fn new(cols: usize) -> Self {
        Self {
            cols,
            indptr: vec![0],
            indices: Vec::new(),
            values: Vec::new(),
        }
    }

    /// Append a row; repeated columns are summed.
    pub fn push_row(&mut self, entries: &[(usize, f64)]) {
        let start = self.indices.len();
        for &(c, v) in entries {
            assert!(c < self.cols, "column {c} out of range {}", self.cols);
            if let Some(k) = self.indices[start..].iter().position(|&x| x == c) {
                self.values[start + k] += v;
            } else {
                self.indices.push(c);
                self.values.push(v);
            }
        }
        self.indptr.push(self.indices.len());
    }

    pub fn rows(&self) -> usize {
        self.indptr.len() - 1
    }

    pub fn finish(self) -> CsrMatrix {
        CsrMatrix {
            rows: self.indptr.len() - 1,
            cols: self.cols,
            indptr: self.indptr,
            indices: self.indices,
            values: self.values,
        }
    }
}

impl CsrMatrix {
    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn nnz(&self) -> usize {
        self.values.len()
    }

    pub fn row(&self, r: usize) -> impl Iterator<Item = (usize, f64)> + '_ {
        let span = self.indptr[r]..self.indptr[r + 1];
        self.indices[span.clone()]
            .iter()
            .copied()
            .zip(self.values[span].iter().copied())
    }

    pub fn matvec(&self, x: &[f64]) -> Vec<f64> {
        assert_eq!(x.len(), self.cols);
        (0..self.rows)
            .map(|r| self.row(r).map(|(c, v)| v * x[c]).sum())
            .collect()
    }

    /// `y += A^T x`
    pub fn transpose_matvec_acc(&self, x: &[f64], y: &mut [f64]) {
        assert_eq!(x.len(), self.rows);
        assert_eq!(y.len(), self.cols);
        for (r, &xr) in x.iter().enumerate() {
            if xr == 0.0 {
                continue;
            }
            for (c, v) in self.row(r) {
                y[c] += v * xr;
            }
        }
    }

    pub fn transpose_matvec(&self, x: &[f64]) -> Vec<f64> {
        let mut y = vec![0.0; self.cols];
        self.transpose_matvec_acc(x, &mut y);
        y
    }

    pub fn to_dense(&self) -> Vec<Vec<f64>> {
        let mut d = vec![vec![0.0; self.cols]; self.rows];
        for (r, row) in d.iter_mut().enumerate() {
            for (c, v) in self.row(r) {
                row[c] += v;
            }
        }
        d
    }

    pub fn triplets(&self) -> impl Iterator<Item = (usize, usize, f64)> + '_ {
        (0..self.rows).flat_map(move |r| self.row(r).map(move |(c, v)| (r, c, v)))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn products_and_duplicates() {
        let mut b = CsrBuilder::new(3);
        b.push_row(&[(0, 1.0), (2, 2.0), (0, 0.5)]);
        b.push_row(&[]);
        b.push_row(&[(1, -1.0)]);
        let m = b.finish();
        assert_eq!(m.rows(), 3);
        assert_eq!(m.nnz(), 3);
        assert_eq!(m.matvec(&[1.0, 2.0, 3.0]), vec![7.5, 0.0, -2.0]);
        assert_eq!(m.transpose_matvec(&[1.0, 5.0, 2.0]), vec![1.5, -2.0, 2.0]);
        assert_eq!(m.to_dense()[0], vec![1.5, 0.0, 2.0]);
    }
}
