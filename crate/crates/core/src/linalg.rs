//! Sparse storage and the linear solvers used by assembly, training and the
//! FEM baselines.
//!
//! Two solvers are provided:
//!
//! * [`SpdFactor`]: an envelope (profile) Cholesky factorization under a
//!   reverse Cuthill-McKee ordering, used for the Gram matrix `B` and the
//!   Galerkin baseline. A factor is immutable and can be shared across
//!   threads.
//! * [`cgnr_solve`]: conjugate gradients on the normal equations (CGLS
//!   variant), used for the nonsymmetric Petrov-Galerkin systems and the
//!   last-layer least-squares problem.

use std::collections::VecDeque;
use std::io::{self, Write};

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LinalgError {
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("matrix is not symmetric positive definite (pivot {pivot:e} at row {row})")]
    NotSpd { row: usize, pivot: f64 },
    #[error("no convergence after {iterations} iterations (relative residual {residual:e})")]
    NoConvergence { iterations: usize, residual: f64 },
}

/// Anything that can be applied as `y = A x` and `y = Aᵀ x`.
pub trait LinearOperator {
    fn nrows(&self) -> usize;
    fn ncols(&self) -> usize;
    /// `y = A x`; `y` is overwritten.
    fn apply(&self, x: &[f64], y: &mut [f64]);
    /// `y = Aᵀ x`; `y` is overwritten.
    fn apply_transpose(&self, x: &[f64], y: &mut [f64]);
}

/// Compressed sparse row matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct SparseMat {
    nrows: usize,
    ncols: usize,
    row_ptr: Vec<usize>,
    col_idx: Vec<usize>,
    values: Vec<f64>,
}

impl SparseMat {
    /// Builds a matrix from `(row, col, value)` triplets, summing duplicates.
    ///
    /// Duplicates are summed after sorting by `(row, col, value)`, so the
    /// result is bitwise independent of the order the triplets were pushed.
    pub fn from_triplets(nrows: usize, ncols: usize, mut triplets: Vec<(usize, usize, f64)>) -> Self {
        triplets.sort_unstable_by(|a, b| (a.0, a.1).cmp(&(b.0, b.1)).then(a.2.total_cmp(&b.2)));
        let mut row_ptr = vec![0usize; nrows + 1];
        let mut col_idx = Vec::with_capacity(triplets.len());
        let mut values: Vec<f64> = Vec::with_capacity(triplets.len());
        let mut last: Option<(usize, usize)> = None;
        for (r, c, v) in triplets {
            assert!(r < nrows && c < ncols, "triplet ({r}, {c}) out of bounds");
            if last == Some((r, c)) {
                *values.last_mut().unwrap() += v;
            } else {
                col_idx.push(c);
                values.push(v);
                row_ptr[r + 1] += 1;
                last = Some((r, c));
            }
        }
        for i in 0..nrows {
            row_ptr[i + 1] += row_ptr[i];
        }
        SparseMat { nrows, ncols, row_ptr, col_idx, values }
    }

    pub fn identity(n: usize) -> Self {
        SparseMat { nrows: n, ncols: n, row_ptr: (0..=n).collect(), col_idx: (0..n).collect(), values: vec![1.0; n] }
    }

    pub fn from_dense(rows: &[Vec<f64>]) -> Self {
        let nrows = rows.len();
        let ncols = rows.first().map_or(0, |r| r.len());
        let mut t = Vec::new();
        for (i, row) in rows.iter().enumerate() {
            for (j, &v) in row.iter().enumerate() {
                if v != 0.0 {
                    t.push((i, j, v));
                }
            }
        }
        Self::from_triplets(nrows, ncols, t)
    }

    pub fn nnz(&self) -> usize {
        self.values.len()
    }

    pub fn row(&self, i: usize) -> (&[usize], &[f64]) {
        let (a, b) = (self.row_ptr[i], self.row_ptr[i + 1]);
        (&self.col_idx[a..b], &self.values[a..b])
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        let (cols, vals) = self.row(i);
        match cols.binary_search(&j) {
            Ok(p) => vals[p],
            Err(_) => 0.0,
        }
    }

    /// `y = A x` or `y = Aᵀ x`.
    pub fn spmv(&self, transpose: bool, x: &[f64]) -> Result<Vec<f64>, LinalgError> {
        let (n_in, n_out) = if transpose { (self.nrows, self.ncols) } else { (self.ncols, self.nrows) };
        if x.len() != n_in {
            return Err(LinalgError::DimensionMismatch { expected: n_in, got: x.len() });
        }
        let mut y = vec![0.0; n_out];
        if transpose {
            self.apply_transpose(x, &mut y);
        } else {
            self.apply(x, &mut y);
        }
        Ok(y)
    }

    pub fn transpose(&self) -> SparseMat {
        let mut t = Vec::with_capacity(self.nnz());
        for i in 0..self.nrows {
            let (cols, vals) = self.row(i);
            for (&j, &v) in cols.iter().zip(vals) {
                t.push((j, i, v));
            }
        }
        SparseMat::from_triplets(self.ncols, self.nrows, t)
    }

    pub fn to_dense(&self) -> Vec<Vec<f64>> {
        let mut d = vec![vec![0.0; self.ncols]; self.nrows];
        for (i, row) in d.iter_mut().enumerate() {
            let (cols, vals) = self.row(i);
            for (&j, &v) in cols.iter().zip(vals) {
                row[j] = v;
            }
        }
        d
    }

    /// Writes the matrix in coordinate text format, one `i j value` per line.
    pub fn write_coo<W: Write>(&self, mut w: W) -> io::Result<()> {
        writeln!(w, "# {} {} {}", self.nrows, self.ncols, self.nnz())?;
        for i in 0..self.nrows {
            let (cols, vals) = self.row(i);
            for (&j, &v) in cols.iter().zip(vals) {
                writeln!(w, "{i} {j} {v:.17e}")?;
            }
        }
        Ok(())
    }
}

impl LinearOperator for SparseMat {
    fn nrows(&self) -> usize {
        self.nrows
    }
    fn ncols(&self) -> usize {
        self.ncols
    }
    fn apply(&self, x: &[f64], y: &mut [f64]) {
        for (i, yi) in y.iter_mut().enumerate() {
            let (cols, vals) = self.row(i);
            *yi = cols.iter().zip(vals).map(|(&j, &v)| v * x[j]).sum();
        }
    }
    fn apply_transpose(&self, x: &[f64], y: &mut [f64]) {
        y.iter_mut().for_each(|v| *v = 0.0);
        for (i, &xi) in x.iter().enumerate() {
            let (cols, vals) = self.row(i);
            for (&j, &v) in cols.iter().zip(vals) {
                y[j] += v * xi;
            }
        }
    }
}

/// Reverse Cuthill-McKee ordering of the symmetric sparsity pattern of `a`.
/// Returns `perm` with `perm[new] = old`.
pub fn rcm_ordering(a: &SparseMat) -> Vec<usize> {
    let n = a.nrows;
    let adj: Vec<Vec<usize>> = (0..n).map(|i| a.row(i).0.iter().copied().filter(|&j| j != i).collect()).collect();
    let degree: Vec<usize> = adj.iter().map(Vec::len).collect();
    let mut visited = vec![false; n];
    let mut order = Vec::with_capacity(n);

    let bfs_levels = |start: usize, visited_mask: &[bool]| -> (Vec<usize>, usize) {
        let mut level = vec![usize::MAX; n];
        let mut q = VecDeque::new();
        level[start] = 0;
        q.push_back(start);
        let mut last = start;
        while let Some(u) = q.pop_front() {
            last = u;
            for &v in &adj[u] {
                if !visited_mask[v] && level[v] == usize::MAX {
                    level[v] = level[u] + 1;
                    q.push_back(v);
                }
            }
        }
        let depth = level[last];
        let far: Vec<usize> = (0..n).filter(|&v| level[v] == depth).collect();
        (far, depth)
    };

    for seed in 0..n {
        if visited[seed] {
            continue;
        }
        // pseudo-peripheral start node
        let mut start = seed;
        let (mut far, mut depth) = bfs_levels(start, &visited);
        loop {
            let cand = *far.iter().min_by_key(|&&v| (degree[v], v)).unwrap();
            let (far2, depth2) = bfs_levels(cand, &visited);
            if depth2 > depth {
                start = cand;
                far = far2;
                depth = depth2;
            } else {
                break;
            }
        }
        let mut q = VecDeque::new();
        visited[start] = true;
        q.push_back(start);
        while let Some(u) = q.pop_front() {
            order.push(u);
            let mut nb: Vec<usize> = adj[u].iter().copied().filter(|&v| !visited[v]).collect();
            nb.sort_by_key(|&v| (degree[v], v));
            for v in nb {
                visited[v] = true;
                q.push_back(v);
            }
        }
    }
    order.reverse();
    order
}

/// Envelope Cholesky factor `P A Pᵀ = L Lᵀ`.
#[derive(Debug, Clone)]
pub struct SpdFactor {
    n: usize,
    /// `perm[new] = old`
    perm: Vec<usize>,
    /// first column stored in each row of `L`
    first: Vec<usize>,
    /// offsets of each row segment `first[i]..=i` in `values`
    offset: Vec<usize>,
    values: Vec<f64>,
}

impl SpdFactor {
    pub fn factor(a: &SparseMat) -> Result<Self, LinalgError> {
        if a.nrows != a.ncols {
            return Err(LinalgError::DimensionMismatch { expected: a.nrows, got: a.ncols });
        }
        let n = a.nrows;
        let perm = rcm_ordering(a);
        let mut iperm = vec![0usize; n];
        for (new, &old) in perm.iter().enumerate() {
            iperm[old] = new;
        }
        let mut first: Vec<usize> = (0..n).collect();
        for old in 0..n {
            let i = iperm[old];
            for &oj in a.row(old).0 {
                let j = iperm[oj];
                if j < i {
                    first[i] = first[i].min(j);
                } else if i < j {
                    first[j] = first[j].min(i);
                }
            }
        }
        let mut offset = vec![0usize; n + 1];
        for i in 0..n {
            offset[i + 1] = offset[i] + (i - first[i] + 1);
        }
        let mut values = vec![0.0; offset[n]];
        // scatter lower triangle
        for old in 0..n {
            let i = iperm[old];
            let (cols, vals) = a.row(old);
            for (&oj, &v) in cols.iter().zip(vals) {
                let j = iperm[oj];
                if j <= i {
                    values[offset[i] + j - first[i]] = v;
                }
            }
        }
        for i in 0..n {
            let fi = first[i];
            for j in fi..i {
                let fj = first[j];
                let k0 = fi.max(fj);
                let (row_i, row_j) = {
                    let (lo, hi) = values.split_at(offset[i]);
                    (hi, &lo[offset[j]..offset[j + 1]])
                };
                let ri = &row_i[k0 - fi..j - fi];
                let rj = &row_j[k0 - fj..j - fj];
                let dot: f64 = ri.iter().zip(rj).map(|(a, b)| a * b).sum();
                let ljj = row_j[j - fj];
                values[offset[i] + j - fi] = (values[offset[i] + j - fi] - dot) / ljj;
            }
            let row = &values[offset[i]..offset[i + 1] - 1];
            let d = values[offset[i + 1] - 1] - row.iter().map(|v| v * v).sum::<f64>();
            if d <= 0.0 || !d.is_finite() {
                return Err(LinalgError::NotSpd { row: perm[i], pivot: d });
            }
            values[offset[i + 1] - 1] = d.sqrt();
        }
        Ok(SpdFactor { n, perm, first, offset, values })
    }

    pub fn dim(&self) -> usize {
        self.n
    }

    /// Number of stored entries of the triangular factor.
    pub fn envelope_size(&self) -> usize {
        self.values.len()
    }

    pub fn solve(&self, b: &[f64]) -> Result<Vec<f64>, LinalgError> {
        if b.len() != self.n {
            return Err(LinalgError::DimensionMismatch { expected: self.n, got: b.len() });
        }
        let n = self.n;
        let mut y: Vec<f64> = self.perm.iter().map(|&o| b[o]).collect();
        for i in 0..n {
            let fi = self.first[i];
            let row = &self.values[self.offset[i]..self.offset[i + 1]];
            let dot: f64 = row[..i - fi].iter().zip(&y[fi..i]).map(|(a, b)| a * b).sum();
            y[i] = (y[i] - dot) / row[i - fi];
        }
        for i in (0..n).rev() {
            let fi = self.first[i];
            let row = &self.values[self.offset[i]..self.offset[i + 1]];
            y[i] /= row[i - fi];
            let xi = y[i];
            for (yj, &l) in y[fi..i].iter_mut().zip(&row[..i - fi]) {
                *yj -= l * xi;
            }
        }
        let mut x = vec![0.0; n];
        for (new, &old) in self.perm.iter().enumerate() {
            x[old] = y[new];
        }
        Ok(x)
    }

    /// Dense `L Lᵀ` in the permuted ordering together with the permutation.
    pub fn reconstruct_permuted(&self) -> (Vec<usize>, Vec<Vec<f64>>) {
        let n = self.n;
        let mut l = vec![vec![0.0; n]; n];
        for i in 0..n {
            for j in self.first[i]..=i {
                l[i][j] = self.values[self.offset[i] + j - self.first[i]];
            }
        }
        let mut m = vec![vec![0.0; n]; n];
        for i in 0..n {
            for j in 0..n {
                m[i][j] = (0..n).map(|k| l[i][k] * l[j][k]).sum();
            }
        }
        (self.perm.clone(), m)
    }
}

/// Convergence summary of [`cgnr_solve`].
#[derive(Debug, Clone)]
pub struct CgnrReport {
    pub x: Vec<f64>,
    pub iterations: usize,
    /// `‖Aᵀ(b − A x)‖ / ‖Aᵀ b‖` at exit
    pub relative_residual: f64,
}

fn norm2(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Least-squares solve of `A x ≈ b` by conjugate gradients on `AᵀA x = Aᵀb`
/// (CGLS form, `AᵀA` is never built). Stops when
/// `‖Aᵀ(A x − b)‖ ≤ tol · ‖Aᵀ b‖`.
pub fn cgnr_solve<A: LinearOperator + ?Sized>(a: &A, b: &[f64], tol: f64, maxit: usize) -> Result<CgnrReport, LinalgError> {
    if b.len() != a.nrows() {
        return Err(LinalgError::DimensionMismatch { expected: a.nrows(), got: b.len() });
    }
    let (m, n) = (a.nrows(), a.ncols());
    let mut x = vec![0.0; n];
    let mut r = b.to_vec();
    let mut s = vec![0.0; n];
    a.apply_transpose(&r, &mut s);
    let norm_atb = norm2(&s);
    if norm_atb == 0.0 {
        return Ok(CgnrReport { x, iterations: 0, relative_residual: 0.0 });
    }
    let mut p = s.clone();
    let mut gamma = s.iter().map(|v| v * v).sum::<f64>();
    let mut q = vec![0.0; m];
    for it in 1..=maxit {
        a.apply(&p, &mut q);
        let qq: f64 = q.iter().map(|v| v * v).sum();
        if qq == 0.0 {
            break;
        }
        let alpha = gamma / qq;
        x.iter_mut().zip(&p).for_each(|(xi, pi)| *xi += alpha * pi);
        r.iter_mut().zip(&q).for_each(|(ri, qi)| *ri -= alpha * qi);
        a.apply_transpose(&r, &mut s);
        let gamma_new: f64 = s.iter().map(|v| v * v).sum();
        let rel = gamma_new.sqrt() / norm_atb;
        if rel <= tol {
            return Ok(CgnrReport { x, iterations: it, relative_residual: rel });
        }
        let beta = gamma_new / gamma;
        gamma = gamma_new;
        p.iter_mut().zip(&s).for_each(|(pi, si)| *pi = si + beta * *pi);
    }
    Err(LinalgError::NoConvergence { iterations: maxit, residual: gamma.sqrt() / norm_atb })
}

/// Row-major dense matrix viewed as a [`LinearOperator`].
#[derive(Debug, Clone)]
pub struct DenseOp {
    pub nrows: usize,
    pub ncols: usize,
    pub data: Vec<f64>,
}

impl LinearOperator for DenseOp {
    fn nrows(&self) -> usize {
        self.nrows
    }
    fn ncols(&self) -> usize {
        self.ncols
    }
    fn apply(&self, x: &[f64], y: &mut [f64]) {
        for (i, yi) in y.iter_mut().enumerate() {
            let row = &self.data[i * self.ncols..(i + 1) * self.ncols];
            *yi = row.iter().zip(x).map(|(a, b)| a * b).sum();
        }
    }
    fn apply_transpose(&self, x: &[f64], y: &mut [f64]) {
        y.iter_mut().for_each(|v| *v = 0.0);
        for (i, &xi) in x.iter().enumerate() {
            let row = &self.data[i * self.ncols..(i + 1) * self.ncols];
            for (yj, a) in y.iter_mut().zip(row) {
                *yj += a * xi;
            }
        }
    }
}

/// `[A; √λ I]` so that CGLS minimizes `‖A x − b‖² + λ‖x‖²`.
pub struct Ridge<'a, A: LinearOperator + ?Sized> {
    pub inner: &'a A,
    pub lambda: f64,
}

impl<A: LinearOperator + ?Sized> LinearOperator for Ridge<'_, A> {
    fn nrows(&self) -> usize {
        self.inner.nrows() + self.inner.ncols()
    }
    fn ncols(&self) -> usize {
        self.inner.ncols()
    }
    fn apply(&self, x: &[f64], y: &mut [f64]) {
        let m = self.inner.nrows();
        self.inner.apply(x, &mut y[..m]);
        let s = self.lambda.sqrt();
        for (yi, xi) in y[m..].iter_mut().zip(x) {
            *yi = s * xi;
        }
    }
    fn apply_transpose(&self, x: &[f64], y: &mut [f64]) {
        let m = self.inner.nrows();
        self.inner.apply_transpose(&x[..m], y);
        let s = self.lambda.sqrt();
        for (yi, xi) in y.iter_mut().zip(&x[m..]) {
            *yi += s * xi;
        }
    }
}
