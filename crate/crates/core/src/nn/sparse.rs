//! Sparse square operators for message passing.
//!
//! A `GraphOperator` bundles the three normalizations the layer kinds need:
//! the raw weighted adjacency, the GCN symmetric normalization of `M + I`,
//! and the row-normalized neighbor-mean operator. All are CSR with a
//! precomputed transpose so backward passes stay O(nnz).

use super::matrix::Matrix;
use std::rc::Rc;

#[derive(Debug, Clone)]
pub struct Csr {
    n_rows: usize,
    n_cols: usize,
    indptr: Vec<usize>,
    indices: Vec<u32>,
    values: Vec<f64>,
}

impl Csr {
    pub fn from_triplets(n_rows: usize, n_cols: usize, triplets: &[(u32, u32, f64)]) -> Self {
        let mut counts = vec![0usize; n_rows + 1];
        for &(r, _, _) in triplets {
            counts[r as usize + 1] += 1;
        }
        for i in 0..n_rows {
            counts[i + 1] += counts[i];
        }
        let indptr = counts.clone();
        let mut cursor = counts;
        let mut indices = vec![0u32; triplets.len()];
        let mut values = vec![0.0; triplets.len()];
        for &(r, c, v) in triplets {
            let slot = cursor[r as usize];
            indices[slot] = c;
            values[slot] = v;
            cursor[r as usize] += 1;
        }
        // Deterministic column order within each row.
        let mut csr = Self {
            n_rows,
            n_cols,
            indptr,
            indices,
            values,
        };
        csr.sort_rows();
        csr
    }

    fn sort_rows(&mut self) {
        for r in 0..self.n_rows {
            let (start, end) = (self.indptr[r], self.indptr[r + 1]);
            let mut pairs: Vec<(u32, f64)> = (start..end)
                .map(|k| (self.indices[k], self.values[k]))
                .collect();
            pairs.sort_by_key(|p| p.0);
            for (off, (c, v)) in pairs.into_iter().enumerate() {
                self.indices[start + off] = c;
                self.values[start + off] = v;
            }
        }
    }

    pub fn transpose(&self) -> Csr {
        let triplets: Vec<(u32, u32, f64)> = self
            .iter()
            .map(|(r, c, v)| (c, r as u32, v))
            .collect();
        Csr::from_triplets(self.n_cols, self.n_rows, &triplets)
    }

    pub fn iter(&self) -> impl Iterator<Item = (usize, u32, f64)> + '_ {
        (0..self.n_rows).flat_map(move |r| {
            (self.indptr[r]..self.indptr[r + 1]).map(move |k| (r, self.indices[k], self.values[k]))
        })
    }

    pub fn row_sum(&self, r: usize) -> f64 {
        self.values[self.indptr[r]..self.indptr[r + 1]].iter().sum()
    }

    /// Dense product `self * m`.
    pub fn matmul_dense(&self, m: &Matrix) -> Matrix {
        assert_eq!(self.n_cols, m.rows(), "spmm dim mismatch");
        let cols = m.cols();
        let mut out = Matrix::zeros(self.n_rows, cols);
        for r in 0..self.n_rows {
            for k in self.indptr[r]..self.indptr[r + 1] {
                let c = self.indices[k] as usize;
                let v = self.values[k];
                let src = m.row(c);
                let dst = &mut out.data_mut()[r * cols..(r + 1) * cols];
                for (d, s) in dst.iter_mut().zip(src) {
                    *d += v * s;
                }
            }
        }
        out
    }

    pub fn to_dense(&self) -> Matrix {
        let mut out = Matrix::zeros(self.n_rows, self.n_cols);
        for (r, c, v) in self.iter() {
            out.add_at(r, c as usize, v);
        }
        out
    }

    pub fn nnz(&self) -> usize {
        self.values.len()
    }

    pub fn heap_bytes(&self) -> usize {
        self.indptr.capacity() * std::mem::size_of::<usize>()
            + self.indices.capacity() * std::mem::size_of::<u32>()
            + self.values.capacity() * std::mem::size_of::<f64>()
    }
}

/// A CSR matrix paired with its transpose (for gradients).
#[derive(Debug, Clone)]
pub struct CsrPair {
    pub fwd: Csr,
    pub bwd: Csr,
}

impl CsrPair {
    pub fn new(fwd: Csr) -> Self {
        let bwd = fwd.transpose();
        Self { fwd, bwd }
    }
}

/// Message-passing operators derived from one weighted adjacency.
#[derive(Debug, Clone)]
pub struct GraphOperator {
    n: usize,
    /// Raw weighted adjacency (no self loops).
    pub raw: Rc<CsrPair>,
    /// Symmetric normalization of raw + I.
    pub gcn: Rc<CsrPair>,
    /// Row-normalized adjacency; all-zero rows for isolated nodes.
    pub mean: Rc<CsrPair>,
}

impl GraphOperator {
    /// Build from `(src, dst, weight)` entries over `n` nodes. For undirected
    /// graphs callers must pass both orientations.
    pub fn from_entries(n: usize, entries: &[(u32, u32, f64)]) -> Self {
        let raw = Csr::from_triplets(n, n, entries);

        let mut with_self: Vec<(u32, u32, f64)> = entries.to_vec();
        for i in 0..n {
            with_self.push((i as u32, i as u32, 1.0));
        }
        let augmented = Csr::from_triplets(n, n, &with_self);
        let deg: Vec<f64> = (0..n).map(|r| augmented.row_sum(r)).collect();
        let gcn_triplets: Vec<(u32, u32, f64)> = with_self
            .iter()
            .map(|&(r, c, v)| {
                let d = (deg[r as usize] * deg[c as usize]).sqrt();
                (r, c, v / d)
            })
            .collect();
        let gcn = Csr::from_triplets(n, n, &gcn_triplets);

        let mean_triplets: Vec<(u32, u32, f64)> = entries
            .iter()
            .map(|&(r, c, v)| {
                let d = raw.row_sum(r as usize);
                (r, c, if d > 0.0 { v / d } else { 0.0 })
            })
            .collect();
        let mean = Csr::from_triplets(n, n, &mean_triplets);

        Self {
            n,
            raw: Rc::new(CsrPair::new(raw)),
            gcn: Rc::new(CsrPair::new(gcn)),
            mean: Rc::new(CsrPair::new(mean)),
        }
    }

    pub fn n_nodes(&self) -> usize {
        self.n
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gcn_normalization_two_node_path() {
        // A = [[0,1],[1,0]]: A+I has degree 2 everywhere, so every entry of
        // the normalized operator is 1/2.
        let op = GraphOperator::from_entries(2, &[(0, 1, 1.0), (1, 0, 1.0)]);
        let dense = op.gcn.fwd.to_dense();
        for r in 0..2 {
            for c in 0..2 {
                assert!((dense.get(r, c) - 0.5).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn mean_operator_rows_sum_to_one_or_zero() {
        let op = GraphOperator::from_entries(3, &[(0, 1, 2.0), (0, 2, 2.0), (1, 0, 2.0)]);
        let dense = op.mean.fwd.to_dense();
        let r0: f64 = dense.row(0).iter().sum();
        let r1: f64 = dense.row(1).iter().sum();
        let r2: f64 = dense.row(2).iter().sum();
        assert!((r0 - 1.0).abs() < 1e-12);
        assert!((r1 - 1.0).abs() < 1e-12);
        assert_eq!(r2, 0.0);
    }

    #[test]
    fn spmm_matches_dense_product() {
        let op = GraphOperator::from_entries(3, &[(0, 1, 1.5), (1, 0, 1.5), (2, 1, 0.5)]);
        let h = Matrix::from_vec(3, 2, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let sparse = op.raw.fwd.matmul_dense(&h);
        let dense = op.raw.fwd.to_dense().matmul(&h);
        for r in 0..3 {
            for c in 0..2 {
                assert!((sparse.get(r, c) - dense.get(r, c)).abs() < 1e-12);
            }
        }
    }
}
