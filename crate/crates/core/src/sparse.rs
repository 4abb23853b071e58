//! Compressed sparse column storage, just enough for the overlap embedding.

use nalgebra::DMatrix;

#[derive(Debug, Clone, PartialEq)]
pub struct SparseColMatrix {
    nrows: usize,
    ncols: usize,
    col_ptr: Vec<usize>,
    row_idx: Vec<usize>,
    values: Vec<f64>,
}

impl SparseColMatrix {
    /// Builds from `(row, col, value)` triplets; duplicates are summed and
    /// explicit zeros dropped.
    pub fn from_triplets(
        nrows: usize,
        ncols: usize,
        triplets: impl IntoIterator<Item = (usize, usize, f64)>,
    ) -> Self {
        let mut trips: Vec<(usize, usize, f64)> = triplets.into_iter().collect();
        trips.sort_by_key(|a| (a.1, a.0));
        let mut col_ptr = vec![0usize; ncols + 1];
        let mut row_idx = Vec::with_capacity(trips.len());
        let mut values: Vec<f64> = Vec::with_capacity(trips.len());
        let mut last: Option<(usize, usize)> = None;
        for (r, c, v) in trips {
            assert!(r < nrows && c < ncols, "triplet ({r},{c}) out of bounds");
            if last == Some((r, c)) {
                *values.last_mut().unwrap() += v;
                continue;
            }
            row_idx.push(r);
            values.push(v);
            col_ptr[c + 1] += 1;
            last = Some((r, c));
        }
        for c in 0..ncols {
            col_ptr[c + 1] += col_ptr[c];
        }
        let mut m = SparseColMatrix {
            nrows,
            ncols,
            col_ptr,
            row_idx,
            values,
        };
        m.prune_zeros();
        m
    }

    pub fn from_dense(d: &DMatrix<f64>) -> Self {
        let trips = (0..d.ncols()).flat_map(|c| {
            (0..d.nrows()).filter_map(move |r| {
                let v = d[(r, c)];
                (v != 0.0).then_some((r, c, v))
            })
        });
        Self::from_triplets(d.nrows(), d.ncols(), trips)
    }

    fn prune_zeros(&mut self) {
        if self.values.iter().all(|&v| v != 0.0) {
            return;
        }
        let mut col_ptr = vec![0usize; self.ncols + 1];
        let mut row_idx = Vec::new();
        let mut values = Vec::new();
        for c in 0..self.ncols {
            for k in self.col_ptr[c]..self.col_ptr[c + 1] {
                if self.values[k] != 0.0 {
                    row_idx.push(self.row_idx[k]);
                    values.push(self.values[k]);
                }
            }
            col_ptr[c + 1] = row_idx.len();
        }
        self.col_ptr = col_ptr;
        self.row_idx = row_idx;
        self.values = values;
    }

    pub fn nrows(&self) -> usize {
        self.nrows
    }

    pub fn ncols(&self) -> usize {
        self.ncols
    }

    pub fn nnz(&self) -> usize {
        self.values.len()
    }

    /// Row indices and values of column `c`.
    pub fn column(&self, c: usize) -> (&[usize], &[f64]) {
        let range = self.col_ptr[c]..self.col_ptr[c + 1];
        (&self.row_idx[range.clone()], &self.values[range])
    }

    pub fn column_mut_values(&mut self, c: usize) -> &mut [f64] {
        let range = self.col_ptr[c]..self.col_ptr[c + 1];
        &mut self.values[range]
    }

    pub fn triplets(&self) -> impl Iterator<Item = (usize, usize, f64)> + '_ {
        (0..self.ncols).flat_map(move |c| {
            let (rows, vals) = self.column(c);
            rows.iter().zip(vals).map(move |(&r, &v)| (r, c, v))
        })
    }

    pub fn sum(&self) -> f64 {
        self.values.iter().sum()
    }

    /// `self * x` for dense `x` with `ncols` rows.
    pub fn mul_dense(&self, x: &DMatrix<f64>) -> DMatrix<f64> {
        assert_eq!(x.nrows(), self.ncols);
        let mut out = DMatrix::zeros(self.nrows, x.ncols());
        for c in 0..self.ncols {
            let (rows, vals) = self.column(c);
            for j in 0..x.ncols() {
                let xc = x[(c, j)];
                if xc == 0.0 {
                    continue;
                }
                for (&r, &v) in rows.iter().zip(vals) {
                    out[(r, j)] += v * xc;
                }
            }
        }
        out
    }

    /// `self^T * y` for dense `y` with `nrows` rows.
    pub fn tr_mul_dense(&self, y: &DMatrix<f64>) -> DMatrix<f64> {
        assert_eq!(y.nrows(), self.nrows);
        let mut out = DMatrix::zeros(self.ncols, y.ncols());
        for c in 0..self.ncols {
            let (rows, vals) = self.column(c);
            for j in 0..y.ncols() {
                let col = y.column(j);
                out[(c, j)] = rows.iter().zip(vals).map(|(&r, &v)| v * col[r]).sum();
            }
        }
        out
    }

    pub fn to_dense(&self) -> DMatrix<f64> {
        let mut d = DMatrix::zeros(self.nrows, self.ncols);
        for (r, c, v) in self.triplets() {
            d[(r, c)] = v;
        }
        d
    }
}
