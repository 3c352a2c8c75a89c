//! Sparse linear algebra for the structured-grid operators.
//!
//! Two solvers sit behind one matrix type: a Jacobi-preconditioned
//! conjugate gradient method (optionally projected onto the mean-zero
//! subspace, for the singular periodic cell problems) and a banded
//! Cholesky factorization that is computed once per operator and reused
//! for every time step of every Monte Carlo path.

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LinalgError {
    #[error("dimension mismatch: expected {expected}, got {got}")]
    Dimension { expected: usize, got: usize },
    #[error("conjugate gradients did not converge in {iterations} iterations (relative residual {residual:e})")]
    NotConverged { iterations: usize, residual: f64 },
    #[error(
        "singular system is inconsistent: right-hand side has a null-space component {component:e}"
    )]
    Inconsistent { component: f64 },
    #[error("matrix is not positive definite (pivot {pivot:e} at row {row})")]
    NotPositiveDefinite { row: usize, pivot: f64 },
}

/// Compressed sparse row matrix, square.
#[derive(Debug, Clone, PartialEq)]
pub struct CsrMatrix {
    n: usize,
    row_ptr: Vec<usize>,
    col_idx: Vec<usize>,
    values: Vec<f64>,
}

impl CsrMatrix {
    /// Assembles from `(row, col, value)` triplets; duplicates are summed.
    pub fn from_triplets(n: usize, mut triplets: Vec<(usize, usize, f64)>) -> Self {
        triplets.sort_unstable_by_key(|a| (a.0, a.1));
        let mut row_ptr = vec![0usize; n + 1];
        let mut col_idx = Vec::with_capacity(triplets.len());
        let mut values: Vec<f64> = Vec::with_capacity(triplets.len());
        let mut last: Option<(usize, usize)> = None;
        for (r, c, v) in triplets {
            assert!(r < n && c < n, "triplet ({r}, {c}) outside {n}x{n}");
            if last == Some((r, c)) {
                *values.last_mut().unwrap() += v;
            } else {
                col_idx.push(c);
                values.push(v);
                row_ptr[r + 1] += 1;
                last = Some((r, c));
            }
        }
        for i in 0..n {
            row_ptr[i + 1] += row_ptr[i];
        }
        Self {
            n,
            row_ptr,
            col_idx,
            values,
        }
    }

    pub fn dim(&self) -> usize {
        self.n
    }

    pub fn nnz(&self) -> usize {
        self.values.len()
    }

    pub fn row(&self, i: usize) -> impl Iterator<Item = (usize, f64)> + '_ {
        let span = self.row_ptr[i]..self.row_ptr[i + 1];
        self.col_idx[span.clone()]
            .iter()
            .copied()
            .zip(self.values[span].iter().copied())
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.row(i).find(|&(c, _)| c == j).map_or(0.0, |(_, v)| v)
    }

    pub fn diagonal(&self) -> Vec<f64> {
        (0..self.n).map(|i| self.get(i, i)).collect()
    }

    pub fn matvec(&self, x: &[f64], y: &mut [f64]) {
        debug_assert_eq!(x.len(), self.n);
        for (i, yi) in y.iter_mut().enumerate() {
            let mut acc = 0.0;
            for k in self.row_ptr[i]..self.row_ptr[i + 1] {
                acc += self.values[k] * x[self.col_idx[k]];
            }
            *yi = acc;
        }
    }

    pub fn mul(&self, x: &[f64]) -> Vec<f64> {
        let mut y = vec![0.0; self.n];
        self.matvec(x, &mut y);
        y
    }

    /// Quadratic form `xᵀAx`.
    pub fn energy(&self, x: &[f64]) -> f64 {
        let mut e = 0.0;
        for i in 0..self.n {
            let xi = x[i];
            for (j, v) in self.row(i) {
                e += xi * v * x[j];
            }
        }
        e
    }

    /// Returns `diag(d) + s·A`.
    pub fn scaled_plus_diagonal(&self, s: f64, d: &[f64]) -> Self {
        assert_eq!(d.len(), self.n);
        let mut triplets = Vec::with_capacity(self.nnz() + self.n);
        for i in 0..self.n {
            for (j, v) in self.row(i) {
                triplets.push((i, j, s * v));
            }
            triplets.push((i, i, d[i]));
        }
        Self::from_triplets(self.n, triplets)
    }

    /// Largest `|A_ij − A_ji|` over stored entries.
    pub fn max_asymmetry(&self) -> f64 {
        let mut worst: f64 = 0.0;
        for i in 0..self.n {
            for (j, v) in self.row(i) {
                worst = worst.max((v - self.get(j, i)).abs());
            }
        }
        worst
    }

    /// Largest `|i − j|` over stored entries.
    pub fn bandwidth(&self) -> usize {
        (0..self.n)
            .flat_map(|i| self.row(i).map(move |(j, _)| i.abs_diff(j)))
            .max()
            .unwrap_or(0)
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    // four independent partial sums let the compiler vectorize
    let mut acc = [0.0; 4];
    let (ca, cb) = (a.chunks_exact(4), b.chunks_exact(4));
    let tail: f64 = ca
        .remainder()
        .iter()
        .zip(cb.remainder())
        .map(|(x, y)| x * y)
        .sum();
    for (x, y) in ca.zip(cb) {
        for k in 0..4 {
            acc[k] += x[k] * y[k];
        }
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

fn remove_mean(v: &mut [f64]) {
    if v.is_empty() {
        return;
    }
    let mean = v.iter().sum::<f64>() / v.len() as f64;
    v.iter_mut().for_each(|x| *x -= mean);
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CgOptions {
    /// Relative residual target `‖b − Ax‖ / ‖b‖`.
    pub tol: f64,
    pub max_iter: usize,
    /// Work in the subspace orthogonal to constants (singular periodic problems).
    pub project_constants: bool,
}

impl CgOptions {
    pub fn new(tol: f64, max_iter: usize) -> Self {
        Self {
            tol,
            max_iter,
            project_constants: false,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CgOutcome {
    pub iterations: usize,
    pub residual: f64,
}

/// Jacobi-preconditioned conjugate gradients; `x` holds the initial guess on entry.
pub fn conjugate_gradient(
    a: &CsrMatrix,
    b: &[f64],
    x: &mut [f64],
    opts: CgOptions,
) -> Result<CgOutcome, LinalgError> {
    let n = a.dim();
    if b.len() != n {
        return Err(LinalgError::Dimension {
            expected: n,
            got: b.len(),
        });
    }
    if x.len() != n {
        return Err(LinalgError::Dimension {
            expected: n,
            got: x.len(),
        });
    }
    let mut rhs = b.to_vec();
    let b_norm = dot(b, b).sqrt();
    if opts.project_constants && n > 0 {
        let mean = rhs.iter().sum::<f64>() / n as f64;
        let component = mean.abs() * (n as f64).sqrt();
        if component > 1e-8 * b_norm.max(f64::MIN_POSITIVE) && component > 1e-300 {
            return Err(LinalgError::Inconsistent { component });
        }
        remove_mean(&mut rhs);
        remove_mean(x);
    }
    let rhs_norm = dot(&rhs, &rhs).sqrt();
    if rhs_norm == 0.0 {
        x.iter_mut().for_each(|v| *v = 0.0);
        return Ok(CgOutcome {
            iterations: 0,
            residual: 0.0,
        });
    }
    let inv_diag: Vec<f64> = a
        .diagonal()
        .into_iter()
        .map(|d| if d > 0.0 { 1.0 / d } else { 1.0 })
        .collect();

    let mut r = vec![0.0; n];
    a.matvec(x, &mut r);
    for i in 0..n {
        r[i] = rhs[i] - r[i];
    }
    if opts.project_constants {
        remove_mean(&mut r);
    }
    let precondition = |r: &[f64], z: &mut [f64]| {
        for i in 0..n {
            z[i] = inv_diag[i] * r[i];
        }
        if opts.project_constants {
            remove_mean(z);
        }
    };
    let mut z = vec![0.0; n];
    precondition(&r, &mut z);
    let mut p = z.clone();
    let mut rz = dot(&r, &z);
    let mut ap = vec![0.0; n];
    let mut residual = dot(&r, &r).sqrt() / rhs_norm;
    let mut iterations = 0;
    while residual > opts.tol {
        if iterations >= opts.max_iter {
            return Err(LinalgError::NotConverged {
                iterations,
                residual,
            });
        }
        a.matvec(&p, &mut ap);
        let pap = dot(&p, &ap);
        if pap <= 0.0 {
            return Err(LinalgError::NotPositiveDefinite { row: 0, pivot: pap });
        }
        let alpha = rz / pap;
        for i in 0..n {
            x[i] += alpha * p[i];
            r[i] -= alpha * ap[i];
        }
        if opts.project_constants {
            remove_mean(&mut r);
        }
        precondition(&r, &mut z);
        let rz_next = dot(&r, &z);
        let beta = rz_next / rz;
        rz = rz_next;
        for i in 0..n {
            p[i] = z[i] + beta * p[i];
        }
        iterations += 1;
        residual = dot(&r, &r).sqrt() / rhs_norm;
    }
    if opts.project_constants {
        remove_mean(x);
    }
    Ok(CgOutcome {
        iterations,
        residual,
    })
}

/// Cholesky factor `A = L·Lᵀ` of a symmetric positive definite banded matrix.
///
/// Row `i` of `L` is stored densely over columns `i − bw ..= i`.
#[derive(Debug, Clone)]
pub struct BandedCholesky {
    n: usize,
    bw: usize,
    lower: Vec<f64>,
}

impl BandedCholesky {
    pub fn factor(a: &CsrMatrix) -> Result<Self, LinalgError> {
        let n = a.dim();
        let bw = a.bandwidth();
        let width = bw + 1;
        let mut lower = vec![0.0; n * width];
        for i in 0..n {
            for (j, v) in a.row(i) {
                if j <= i {
                    lower[i * width + (j + bw - i)] = v;
                }
            }
        }
        for i in 0..n {
            let first = i.saturating_sub(bw);
            for j in first..=i {
                let k0 = first.max(j.saturating_sub(bw));
                let row_i = &lower[i * width + (k0 + bw - i)..i * width + (j + bw - i)];
                let row_j = &lower[j * width + (k0 + bw - j)..j * width + bw];
                let s = lower[i * width + (j + bw - i)] - dot(row_i, row_j);
                if i == j {
                    if s <= 0.0 || !s.is_finite() {
                        return Err(LinalgError::NotPositiveDefinite { row: i, pivot: s });
                    }
                    lower[i * width + bw] = s.sqrt();
                } else {
                    lower[i * width + (j + bw - i)] = s / lower[j * width + bw];
                }
            }
        }
        Ok(Self { n, bw, lower })
    }

    pub fn dim(&self) -> usize {
        self.n
    }

    /// Solves `A x = b` in place.
    pub fn solve_in_place(&self, x: &mut [f64]) {
        self.solve_many(x, 1);
    }

    /// Solves `k` systems at once; `x[i * k + r]` is entry `i` of right-hand side `r`.
    ///
    /// Each right-hand side sees the same operations in the same order as a
    /// single solve, so results do not depend on `k`. Sharing one pass over
    /// the factor between several right-hand sides is what makes this faster.
    pub fn solve_many(&self, x: &mut [f64], k: usize) {
        let (n, bw, width) = (self.n, self.bw, self.bw + 1);
        assert_eq!(x.len(), n * k);
        if k == 0 {
            return;
        }
        let mut acc = vec![0.0; k];
        for i in 0..n {
            let first = i.saturating_sub(bw);
            let row = &self.lower[i * width + (first + bw - i)..i * width + bw];
            acc.copy_from_slice(&x[i * k..(i + 1) * k]);
            for (l, xs) in row.iter().zip(x[first * k..i * k].chunks_exact(k)) {
                for (a, v) in acc.iter_mut().zip(xs) {
                    *a -= l * v;
                }
            }
            let d = self.lower[i * width + bw];
            for (xi, a) in x[i * k..(i + 1) * k].iter_mut().zip(&acc) {
                *xi = a / d;
            }
        }
        for i in (0..n).rev() {
            let d = self.lower[i * width + bw];
            for (a, xi) in acc.iter_mut().zip(&mut x[i * k..(i + 1) * k]) {
                *xi /= d;
                *a = *xi;
            }
            let first = i.saturating_sub(bw);
            let row = &self.lower[i * width + (first + bw - i)..i * width + bw];
            for (l, xs) in row.iter().zip(x[first * k..i * k].chunks_exact_mut(k)) {
                for (v, a) in xs.iter_mut().zip(&acc) {
                    *v -= l * a;
                }
            }
        }
    }
}

/// How implicit time steps solve `(M + Δt·K)x = r`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum SolverMethod {
    /// Banded Cholesky factor, computed once.
    #[default]
    Cholesky,
    /// Jacobi-preconditioned conjugate gradients, warm-started from the previous state.
    Cg,
}

impl SolverMethod {
    pub fn name(&self) -> &'static str {
        match self {
            SolverMethod::Cholesky => "cholesky",
            SolverMethod::Cg => "cg",
        }
    }
}

impl std::str::FromStr for SolverMethod {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim() {
            "cholesky" => Ok(SolverMethod::Cholesky),
            "cg" => Ok(SolverMethod::Cg),
            other => Err(format!("unknown solver `{other}`: expected cholesky or cg")),
        }
    }
}

/// A symmetric positive definite system matrix prepared for repeated solves.
#[derive(Debug, Clone)]
pub struct ImplicitSolver {
    matrix: CsrMatrix,
    factor: Option<BandedCholesky>,
    tol: f64,
}

impl ImplicitSolver {
    /// Prepares `matrix`; fails if the Cholesky factorization finds it indefinite.
    pub fn new(matrix: CsrMatrix, method: SolverMethod, tol: f64) -> Result<Self, LinalgError> {
        let factor = match method {
            SolverMethod::Cholesky => Some(BandedCholesky::factor(&matrix)?),
            SolverMethod::Cg => {
                if let Some((row, &pivot)) = matrix
                    .diagonal()
                    .iter()
                    .enumerate()
                    .find(|(_, d)| **d <= 0.0)
                {
                    return Err(LinalgError::NotPositiveDefinite { row, pivot });
                }
                None
            }
        };
        Ok(Self {
            matrix,
            factor,
            tol,
        })
    }

    pub fn matrix(&self) -> &CsrMatrix {
        &self.matrix
    }

    pub fn method(&self) -> SolverMethod {
        if self.factor.is_some() {
            SolverMethod::Cholesky
        } else {
            SolverMethod::Cg
        }
    }

    /// Overwrites `rhs` with the solution; `guess` seeds the iterative method.
    pub fn solve(&self, rhs: &mut [f64], guess: &[f64]) -> Result<(), LinalgError> {
        match &self.factor {
            Some(f) => {
                f.solve_in_place(rhs);
                Ok(())
            }
            None => {
                let mut x = guess.to_vec();
                let opts = CgOptions::new(self.tol, 10 * self.matrix.dim().max(10));
                conjugate_gradient(&self.matrix, rhs, &mut x, opts)?;
                rhs.copy_from_slice(&x);
                Ok(())
            }
        }
    }

    /// Solves for several right-hand sides; `guesses[r]` warm-starts `rhs[r]` under CG.
    ///
    /// Each result equals what [`ImplicitSolver::solve`] gives for that right-hand side alone.
    pub fn solve_batch(&self, rhs: &mut [Vec<f64>], guesses: &[&[f64]]) -> Result<(), LinalgError> {
        assert_eq!(rhs.len(), guesses.len());
        match &self.factor {
            Some(f) => {
                let (n, k) = (f.dim(), rhs.len());
                let mut buf = vec![0.0; n * k];
                for (r, v) in rhs.iter().enumerate() {
                    assert_eq!(v.len(), n);
                    for (i, &x) in v.iter().enumerate() {
                        buf[i * k + r] = x;
                    }
                }
                f.solve_many(&mut buf, k);
                for (r, v) in rhs.iter_mut().enumerate() {
                    for (i, x) in v.iter_mut().enumerate() {
                        *x = buf[i * k + r];
                    }
                }
                Ok(())
            }
            None => rhs
                .iter_mut()
                .zip(guesses)
                .try_for_each(|(r, g)| self.solve(r, g)),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn laplacian_1d(n: usize, shift: f64) -> CsrMatrix {
        let mut t = Vec::new();
        for i in 0..n {
            t.push((i, i, 2.0 + shift));
            if i > 0 {
                t.push((i, i - 1, -1.0));
            }
            if i + 1 < n {
                t.push((i, i + 1, -1.0));
            }
        }
        CsrMatrix::from_triplets(n, t)
    }

    #[test]
    fn duplicates_are_summed() {
        let a = CsrMatrix::from_triplets(2, vec![(0, 0, 1.0), (0, 0, 2.0), (1, 0, -1.0)]);
        assert_eq!(a.get(0, 0), 3.0);
        assert_eq!(a.get(1, 0), -1.0);
        assert_eq!(a.get(0, 1), 0.0);
        assert_eq!(a.nnz(), 2);
    }

    #[test]
    fn cg_and_cholesky_agree() {
        let a = laplacian_1d(50, 0.01);
        let b: Vec<f64> = (0..50).map(|i| (i as f64 * 0.3).sin()).collect();
        let mut x_cg = vec![0.0; 50];
        let out = conjugate_gradient(&a, &b, &mut x_cg, CgOptions::new(1e-13, 500)).unwrap();
        assert!(out.residual <= 1e-13);
        let chol = BandedCholesky::factor(&a).unwrap();
        let mut x_ch = b.clone();
        chol.solve_in_place(&mut x_ch);
        for (p, q) in x_cg.iter().zip(&x_ch) {
            assert!((p - q).abs() < 1e-9, "{p} vs {q}");
        }
        let r = a.mul(&x_ch);
        for (ri, bi) in r.iter().zip(&b) {
            assert!((ri - bi).abs() < 1e-12);
        }
    }

    fn grid_laplacian(side: usize, shift: f64) -> CsrMatrix {
        let idx = |i: usize, j: usize| j * side + i;
        let mut t = Vec::new();
        for j in 0..side {
            for i in 0..side {
                t.push((idx(i, j), idx(i, j), 4.0 + shift));
                if i > 0 {
                    t.push((idx(i, j), idx(i - 1, j), -1.0));
                    t.push((idx(i - 1, j), idx(i, j), -1.0));
                }
                if j > 0 {
                    t.push((idx(i, j), idx(i, j - 1), -1.0));
                    t.push((idx(i, j - 1), idx(i, j), -1.0));
                }
            }
        }
        CsrMatrix::from_triplets(side * side, t)
    }

    proptest::proptest! {
        #[test]
        fn batch_solves_match_single_solves_bitwise(
            side in 2usize..9,
            shift in 0.01..2.0f64,
            seeds in proptest::collection::vec(-1.0..1.0f64, 1..6),
        ) {
            let a = grid_laplacian(side, shift);
            let solver = ImplicitSolver::new(a, SolverMethod::Cholesky, 1e-12).unwrap();
            let n = side * side;
            let rhs: Vec<Vec<f64>> = seeds
                .iter()
                .map(|&s| (0..n).map(|i| (s * i as f64 + s).sin()).collect())
                .collect();
            let mut batch = rhs.clone();
            let zeros = vec![0.0; n];
            let guesses: Vec<&[f64]> = rhs.iter().map(|_| zeros.as_slice()).collect();
            solver.solve_batch(&mut batch, &guesses).unwrap();
            for (single, b) in rhs.iter().zip(&batch) {
                let mut x = single.clone();
                solver.solve(&mut x, &zeros).unwrap();
                proptest::prop_assert_eq!(&x, b);
                let r = solver.matrix().mul(&x);
                for (ri, bi) in r.iter().zip(single) {
                    proptest::prop_assert!((ri - bi).abs() < 1e-10);
                }
            }
        }
    }

    #[test]
    fn cholesky_rejects_indefinite() {
        let a = laplacian_1d(5, -3.0);
        assert!(matches!(
            BandedCholesky::factor(&a),
            Err(LinalgError::NotPositiveDefinite { .. })
        ));
    }

    #[test]
    fn projected_cg_on_periodic_laplacian() {
        let n = 16;
        let mut t = Vec::new();
        for i in 0..n {
            t.push((i, i, 2.0));
            t.push((i, (i + 1) % n, -1.0));
            t.push((i, (i + n - 1) % n, -1.0));
        }
        let a = CsrMatrix::from_triplets(n, t);
        let b: Vec<f64> = (0..n)
            .map(|i| (2.0 * std::f64::consts::PI * i as f64 / n as f64).cos())
            .collect();
        let mut x = vec![0.0; n];
        let mut opts = CgOptions::new(1e-12, 200);
        opts.project_constants = true;
        conjugate_gradient(&a, &b, &mut x, opts).unwrap();
        assert!(x.iter().sum::<f64>().abs() < 1e-12);
        let r = a.mul(&x);
        for (ri, bi) in r.iter().zip(&b) {
            assert!((ri - bi).abs() < 1e-10);
        }
        let inconsistent = vec![1.0; n];
        let mut y = vec![0.0; n];
        assert!(matches!(
            conjugate_gradient(&a, &inconsistent, &mut y, opts),
            Err(LinalgError::Inconsistent { .. })
        ));
    }

    #[test]
    fn zero_rhs_gives_zero() {
        let a = laplacian_1d(4, 0.0);
        let mut x = vec![1.0; 4];
        let out = conjugate_gradient(&a, &[0.0; 4], &mut x, CgOptions::new(1e-10, 10)).unwrap();
        assert_eq!(out.iterations, 0);
        assert!(x.iter().all(|&v| v == 0.0));
    }
}
