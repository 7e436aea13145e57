//! Small dense factorizations used throughout: counted Cholesky, Householder
//! QR with column pivoting, LU with full pivoting, and null/range bases.

use std::cell::Cell;

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use serde::{Deserialize, Serialize};

thread_local! {
    static FACTORIZATIONS: Cell<u64> = const { Cell::new(0) };
}

/// Number of matrix factorizations performed so far on the current thread.
pub fn factorization_count() -> u64 {
    FACTORIZATIONS.with(|c| c.get())
}

fn record_factorization() {
    FACTORIZATIONS.with(|c| c.set(c.get() + 1));
}

/// Relative pivot threshold below which a Gram-type Cholesky is declared singular.
pub const GRAM_PIVOT_TOL: f64 = 1e-12;

pub fn default_rank_tol(rows: usize, cols: usize) -> f64 {
    rows.max(cols).max(1) as f64 * f64::EPSILON
}

pub fn max_abs(m: &DMatrix<f64>) -> f64 {
    m.iter().fold(0.0_f64, |acc, v| acc.max(v.abs()))
}

pub fn symmetrize(m: &mut DMatrix<f64>) {
    let n = m.nrows();
    for i in 0..n {
        for j in (i + 1)..n {
            let v = 0.5 * (m[(i, j)] + m[(j, i)]);
            m[(i, j)] = v;
            m[(j, i)] = v;
        }
    }
}

/// Cholesky factor kept around for repeated solves.
#[derive(Clone, Debug)]
pub struct CholeskyFactor {
    inner: Option<Cholesky<f64, Dyn>>,
    dim: usize,
}

impl CholeskyFactor {
    pub fn new(m: &DMatrix<f64>) -> Option<Self> {
        record_factorization();
        let dim = m.nrows();
        if dim == 0 {
            return Some(Self { inner: None, dim });
        }
        if m.iter().any(|v| !v.is_finite()) {
            return None;
        }
        Cholesky::new(m.clone()).map(|c| Self { inner: Some(c), dim })
    }

    /// Cholesky of a positive semidefinite Gram-type matrix. Rejects the matrix
    /// as singular when some squared pivot falls below `rel_tol · max diag`.
    pub fn new_gram(m: &DMatrix<f64>, rel_tol: f64) -> Option<Self> {
        let mut sym = m.clone();
        symmetrize(&mut sym);
        let f = Self::new(&sym)?;
        if let Some(c) = &f.inner {
            let scale = (0..f.dim).map(|i| sym[(i, i)].abs()).fold(0.0, f64::max);
            let l = c.l_dirty();
            if (0..f.dim).any(|i| l[(i, i)] * l[(i, i)] <= rel_tol * scale) {
                return None;
            }
        }
        Some(f)
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn solve(&self, b: &DMatrix<f64>) -> DMatrix<f64> {
        match &self.inner {
            Some(c) => c.solve(b),
            None => DMatrix::zeros(0, b.ncols()),
        }
    }

    pub fn solve_vec(&self, b: &DVector<f64>) -> DVector<f64> {
        match &self.inner {
            Some(c) => c.solve(b),
            None => DVector::zeros(0),
        }
    }
}

/// Householder QR with column pivoting: `M P = Q R`.
#[derive(Clone, Debug)]
pub struct ColPivQr {
    r: DMatrix<f64>,
    reflectors: Vec<(DVector<f64>, f64)>,
    perm: Vec<usize>,
    rank: usize,
}

impl ColPivQr {
    pub fn new(m: &DMatrix<f64>, rank_tol: f64) -> Self {
        record_factorization();
        let (rows, cols) = m.shape();
        let mut r = m.clone();
        let mut perm: Vec<usize> = (0..cols).collect();
        let steps = rows.min(cols);
        let mut reflectors = Vec::with_capacity(steps);
        for j in 0..steps {
            // Pick the remaining column with the largest trailing norm.
            let mut best = j;
            let mut best_norm = -1.0;
            for c in j..cols {
                let n = r.view((j, c), (rows - j, 1)).norm_squared();
                if n > best_norm {
                    best_norm = n;
                    best = c;
                }
            }
            if best != j {
                r.swap_columns(j, best);
                perm.swap(j, best);
            }
            let x = r.view((j, j), (rows - j, 1)).clone_owned();
            let norm = x.norm();
            let mut v = DVector::from_column_slice(x.as_slice());
            let beta;
            if norm == 0.0 {
                beta = 0.0;
            } else {
                let alpha = if x[0] >= 0.0 { -norm } else { norm };
                v[0] -= alpha;
                let vv = v.norm_squared();
                beta = if vv == 0.0 { 0.0 } else { 2.0 / vv };
                let mut block = r.view_mut((j, j), (rows - j, cols - j));
                let w = block.tr_mul(&v);
                block.ger(-beta, &v, &w, 1.0);
                r[(j, j)] = alpha;
                for i in (j + 1)..rows {
                    r[(i, j)] = 0.0;
                }
            }
            reflectors.push((v, beta));
        }
        let lead = if steps > 0 { r[(0, 0)].abs() } else { 0.0 };
        let mut rank = 0;
        if lead > 0.0 {
            while rank < steps && r[(rank, rank)].abs() > rank_tol * lead {
                rank += 1;
            }
        }
        Self { r, reflectors, perm, rank }
    }

    pub fn rank(&self) -> usize {
        self.rank
    }

    pub fn r(&self) -> &DMatrix<f64> {
        &self.r
    }

    /// Column `j` of `R` corresponds to column `perm[j]` of the input.
    pub fn permutation(&self) -> &[usize] {
        &self.perm
    }

    /// Qᵀ·b.
    pub fn qt_mul(&self, b: &DMatrix<f64>) -> DMatrix<f64> {
        let mut out = b.clone();
        let rows = out.nrows();
        for (j, (v, beta)) in self.reflectors.iter().enumerate() {
            if *beta == 0.0 {
                continue;
            }
            let mut block = out.view_mut((j, 0), (rows - j, b.ncols()));
            let w = block.tr_mul(v);
            block.ger(-beta, v, &w, 1.0);
        }
        out
    }

    /// Q·b.
    pub fn q_mul(&self, b: &DMatrix<f64>) -> DMatrix<f64> {
        let mut out = b.clone();
        let rows = out.nrows();
        for (j, (v, beta)) in self.reflectors.iter().enumerate().rev() {
            if *beta == 0.0 {
                continue;
            }
            let mut block = out.view_mut((j, 0), (rows - j, b.ncols()));
            let w = block.tr_mul(v);
            block.ger(-beta, v, &w, 1.0);
        }
        out
    }

    /// The full orthogonal factor.
    pub fn q(&self) -> DMatrix<f64> {
        let rows = self.r.nrows();
        self.q_mul(&DMatrix::identity(rows, rows))
    }

    /// Basic least-squares solution of `M x = b` using the leading `rank`
    /// columns; returns the solution and the residual norm per column.
    pub fn solve_least_squares(&self, b: &DMatrix<f64>) -> (DMatrix<f64>, f64) {
        let cols = self.r.ncols();
        let k = self.rank;
        let qtb = self.qt_mul(b);
        let mut x = DMatrix::zeros(cols, b.ncols());
        if k > 0 {
            let r11 = self.r.view((0, 0), (k, k)).clone_owned();
            let rhs = qtb.rows(0, k).clone_owned();
            let y = r11
                .solve_upper_triangular(&rhs)
                .unwrap_or_else(|| DMatrix::zeros(k, b.ncols()));
            for (j, &p) in self.perm.iter().take(k).enumerate() {
                x.row_mut(p).copy_from(&y.row(j));
            }
        }
        let residual = qtb.rows(k, qtb.nrows() - k).norm();
        (x, residual)
    }

    /// Minimum-norm solution of `Mᵀ g = w` for `M` with full column rank.
    pub fn solve_transpose_min_norm(&self, w: &DMatrix<f64>) -> DMatrix<f64> {
        let rows = self.r.nrows();
        let k = self.rank;
        let mut pw = DMatrix::zeros(k, w.ncols());
        for (j, &p) in self.perm.iter().take(k).enumerate() {
            pw.row_mut(j).copy_from(&w.row(p));
        }
        let r11t = self.r.view((0, 0), (k, k)).transpose();
        let z = r11t
            .solve_lower_triangular(&pw)
            .unwrap_or_else(|| DMatrix::zeros(k, w.ncols()));
        let mut full = DMatrix::zeros(rows, w.ncols());
        full.rows_mut(0, k).copy_from(&z);
        self.q_mul(&full)
    }
}

/// Gaussian elimination with complete pivoting: `P M Q = L U`.
#[derive(Clone, Debug)]
pub struct FullPivLu {
    lu: DMatrix<f64>,
    row_perm: Vec<usize>,
    col_perm: Vec<usize>,
    rank: usize,
}

impl FullPivLu {
    pub fn new(m: &DMatrix<f64>, rank_tol: f64) -> Self {
        record_factorization();
        let (rows, cols) = m.shape();
        let mut lu = m.clone();
        let mut row_perm: Vec<usize> = (0..rows).collect();
        let mut col_perm: Vec<usize> = (0..cols).collect();
        let steps = rows.min(cols);
        let mut lead = 0.0;
        let mut rank = 0;
        for k in 0..steps {
            let (mut pi, mut pj, mut pmax) = (k, k, -1.0);
            for j in k..cols {
                for i in k..rows {
                    let v = lu[(i, j)].abs();
                    if v > pmax {
                        pmax = v;
                        pi = i;
                        pj = j;
                    }
                }
            }
            if k == 0 {
                lead = pmax;
            }
            if pmax <= 0.0 || pmax <= rank_tol * lead {
                break;
            }
            lu.swap_rows(k, pi);
            row_perm.swap(k, pi);
            lu.swap_columns(k, pj);
            col_perm.swap(k, pj);
            let piv = lu[(k, k)];
            for i in (k + 1)..rows {
                let l = lu[(i, k)] / piv;
                lu[(i, k)] = l;
                for j in (k + 1)..cols {
                    let u = lu[(k, j)];
                    lu[(i, j)] -= l * u;
                }
            }
            rank += 1;
        }
        Self { lu, row_perm, col_perm, rank }
    }

    pub fn rank(&self) -> usize {
        self.rank
    }

    /// Solve a square, full-rank system.
    pub fn solve(&self, b: &DMatrix<f64>) -> Option<DMatrix<f64>> {
        let n = self.lu.nrows();
        if n != self.lu.ncols() || self.rank < n {
            return None;
        }
        let mut y = DMatrix::zeros(n, b.ncols());
        for (i, &p) in self.row_perm.iter().enumerate() {
            y.row_mut(i).copy_from(&b.row(p));
        }
        for i in 0..n {
            for j in 0..i {
                let l = self.lu[(i, j)];
                let rj = y.row(j).clone_owned();
                y.row_mut(i).zip_apply(&rj, |a, b| *a -= l * b);
            }
        }
        for i in (0..n).rev() {
            for j in (i + 1)..n {
                let u = self.lu[(i, j)];
                let rj = y.row(j).clone_owned();
                y.row_mut(i).zip_apply(&rj, |a, b| *a -= u * b);
            }
            let d = self.lu[(i, i)];
            y.row_mut(i).scale_mut(1.0 / d);
        }
        let mut x = DMatrix::zeros(n, b.ncols());
        for (l, &c) in self.col_perm.iter().enumerate() {
            x.row_mut(c).copy_from(&y.row(l));
        }
        Some(x)
    }

    /// Basis of the right nullspace (not orthonormal): `Q·[−U₁₁⁻¹U₁₂; I]`.
    pub fn null_basis(&self) -> DMatrix<f64> {
        let cols = self.lu.ncols();
        let r = self.rank;
        let nz = cols - r;
        let mut np = DMatrix::zeros(cols, nz);
        if r > 0 && nz > 0 {
            let u11 = self.lu.view((0, 0), (r, r)).upper_triangle();
            let u12 = self.lu.view((0, r), (r, nz)).clone_owned();
            let t = u11
                .solve_upper_triangular(&u12)
                .unwrap_or_else(|| DMatrix::zeros(r, nz));
            np.rows_mut(0, r).copy_from(&(-t));
        }
        for j in 0..nz {
            np[(r + j, j)] = 1.0;
        }
        let mut out = DMatrix::zeros(cols, nz);
        for (l, &c) in self.col_perm.iter().enumerate() {
            out.row_mut(c).copy_from(&np.row(l));
        }
        out
    }

    /// Rows of `U` mapped back to the original column order, as columns.
    pub fn row_space_basis(&self) -> DMatrix<f64> {
        let cols = self.lu.ncols();
        let r = self.rank;
        let mut out = DMatrix::zeros(cols, r);
        for j in 0..r {
            for l in j..cols {
                out[(self.col_perm[l], j)] = self.lu[(j, l)];
            }
        }
        out
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BasisBackend {
    #[default]
    Qr,
    Lu,
}

/// Orthonormal-ish bases of `null(M)` and of the row space of `M`.
#[derive(Clone, Debug)]
pub struct NullRangeBases {
    /// Columns span null(M); `m × n_z`.
    pub z: DMatrix<f64>,
    /// Orthonormal columns spanning range(Mᵀ); `m × n_y`.
    pub y: DMatrix<f64>,
    pub rank: usize,
}

/// Null/range bases of `M` (`p × m`) in ℝᵐ, using the chosen rank-revealing backend.
pub fn nullspace_bases_with(m: &DMatrix<f64>, rank_tol: f64, backend: BasisBackend) -> NullRangeBases {
    let n = m.ncols();
    match backend {
        BasisBackend::Qr => {
            let qr = ColPivQr::new(&m.transpose(), rank_tol);
            let q = qr.q();
            let r = qr.rank();
            NullRangeBases {
                z: q.columns(r, n - r).clone_owned(),
                y: q.columns(0, r).clone_owned(),
                rank: r,
            }
        }
        BasisBackend::Lu => {
            let lu = FullPivLu::new(m, rank_tol);
            let r = lu.rank();
            let z = lu.null_basis();
            let rows = lu.row_space_basis();
            // Orthonormalize both; the nullspace basis from LU is well conditioned
            // under complete pivoting, the row basis needs Gram–Schmidt for Yᵀ Y = I.
            NullRangeBases { z: orthonormalize(&z), y: orthonormalize(&rows), rank: r }
        }
    }
}

pub fn nullspace_bases(m: &DMatrix<f64>, rank_tol: f64) -> NullRangeBases {
    nullspace_bases_with(m, rank_tol, BasisBackend::Qr)
}

/// Modified Gram–Schmidt (twice) on the columns of a full-column-rank matrix.
fn orthonormalize(a: &DMatrix<f64>) -> DMatrix<f64> {
    let mut q = a.clone();
    for j in 0..q.ncols() {
        for _ in 0..2 {
            for i in 0..j {
                let qi = q.column(i).clone_owned();
                let d = qi.dot(&q.column(j));
                q.column_mut(j).axpy(-d, &qi, 1.0);
            }
        }
        let n = q.column(j).norm();
        if n > 0.0 {
            q.column_mut(j).scale_mut(1.0 / n);
        }
    }
    q
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(rows: usize, cols: usize, seed: u64) -> DMatrix<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        DMatrix::from_fn(rows, cols, |_, _| rng.random_range(-1.0..1.0))
    }

    fn projector(b: &DMatrix<f64>) -> DMatrix<f64> {
        b * b.transpose()
    }

    #[test]
    fn qr_reconstructs_permuted_matrix() {
        let m = random(5, 3, 1);
        let qr = ColPivQr::new(&m, 1e-12);
        let qrm = qr.q() * qr.r();
        for (j, &p) in qr.permutation().iter().enumerate() {
            assert!((qrm.column(j) - m.column(p)).norm() < 1e-12);
        }
        assert_eq!(qr.rank(), 3);
        let q = qr.q();
        assert!((q.transpose() * &q - DMatrix::identity(5, 5)).norm() < 1e-12);
    }

    #[test]
    fn qr_least_squares_matches_normal_equations() {
        let m = random(6, 3, 2);
        let b = random(6, 2, 3);
        let (x, _) = ColPivQr::new(&m, 1e-12).solve_least_squares(&b);
        let normal = (m.transpose() * &m).lu().solve(&(m.transpose() * &b)).unwrap();
        assert!((x - normal).norm() < 1e-10);
    }

    #[test]
    fn qr_transpose_min_norm() {
        let m = random(5, 2, 4);
        let w = random(2, 1, 5);
        let g = ColPivQr::new(&m, 1e-12).solve_transpose_min_norm(&w);
        assert!((m.transpose() * &g - &w).norm() < 1e-12);
        // min-norm: g in range(M)
        let proj = &m * (m.transpose() * &m).try_inverse().unwrap() * m.transpose();
        assert!((&proj * &g - &g).norm() < 1e-12);
    }

    #[test]
    fn lu_solves_square_system() {
        let m = random(4, 4, 6);
        let b = random(4, 2, 7);
        let x = FullPivLu::new(&m, 1e-14).solve(&b).unwrap();
        assert!((m * x - b).norm() < 1e-12);
    }

    #[test]
    fn rank_one_bases() {
        let m = DMatrix::from_row_slice(2, 2, &[1.0, 1.0, 1.0, 1.0]);
        for backend in [BasisBackend::Qr, BasisBackend::Lu] {
            let b = nullspace_bases_with(&m, default_rank_tol(2, 2), backend);
            assert_eq!(b.rank, 1);
            let y = DMatrix::from_column_slice(2, 1, &[1.0, 1.0]) / 2f64.sqrt();
            let z = DMatrix::from_column_slice(2, 1, &[1.0, -1.0]) / 2f64.sqrt();
            assert!((projector(&b.y) - projector(&y)).norm() < 1e-12);
            assert!((projector(&b.z) - projector(&z)).norm() < 1e-12);
        }
    }

    #[test]
    fn identity_and_zero_bases() {
        let b = nullspace_bases(&DMatrix::identity(3, 3), default_rank_tol(3, 3));
        assert_eq!((b.rank, b.z.ncols()), (3, 0));
        for backend in [BasisBackend::Qr, BasisBackend::Lu] {
            let b = nullspace_bases_with(&DMatrix::zeros(2, 2), 1e-15, backend);
            assert_eq!((b.rank, b.y.ncols()), (0, 0));
            assert!((b.z.transpose() * &b.z - DMatrix::identity(2, 2)).norm() < 1e-14);
        }
    }

    #[test]
    fn backends_agree_on_random_rank_deficient() {
        let base = random(2, 5, 8);
        let m = DMatrix::from_fn(4, 5, |i, j| base[(i % 2, j)]);
        let tol = default_rank_tol(4, 5);
        let qr = nullspace_bases_with(&m, tol, BasisBackend::Qr);
        let lu = nullspace_bases_with(&m, tol, BasisBackend::Lu);
        assert_eq!(qr.rank, 2);
        assert_eq!(lu.rank, 2);
        assert!((projector(&qr.y) - projector(&lu.y)).norm() < 1e-10);
        assert!((projector(&qr.z) - projector(&lu.z)).norm() < 1e-10);
        assert!(max_abs(&(&m * &qr.z)) < 1e-12);
    }

    #[test]
    fn gram_cholesky_rejects_rank_one() {
        let s = DMatrix::from_row_slice(2, 2, &[1.0, 1.0, 1.0, 1.0]);
        assert!(CholeskyFactor::new_gram(&s, GRAM_PIVOT_TOL).is_none());
        assert!(CholeskyFactor::new_gram(&DMatrix::identity(2, 2), GRAM_PIVOT_TOL).is_some());
    }

    #[test]
    fn counter_counts() {
        let before = factorization_count();
        let _ = CholeskyFactor::new(&DMatrix::identity(2, 2));
        let _ = ColPivQr::new(&DMatrix::identity(2, 2), 1e-12);
        assert_eq!(factorization_count() - before, 2);
    }
}
