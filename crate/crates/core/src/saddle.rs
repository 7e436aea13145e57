//! Dense reference solver for `min ½wᵀAw − aᵀw  s.t.  Bw = b`.
//!
//! Stationarity reads `Aw + Bᵀy = a`, so `w = ŵ − W̌y` with `ŵ = A⁻¹a` and
//! `W̌ = A⁻¹Bᵀ`. This module is deliberately dense and simple: it is the
//! oracle the Riccati code is checked against.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::linalg::{
    default_rank_tol, max_abs, nullspace_bases, CholeskyFactor, FullPivLu, GRAM_PIVOT_TOL,
};

/// Relative tolerance for declaring a constraint right-hand side inconsistent.
pub const CONSISTENCY_TOL: f64 = 1e-8;

#[derive(Clone, Debug)]
pub struct SaddleSystem {
    /// Symmetric `n_w × n_w`.
    pub matrix: DMatrix<f64>,
    pub rhs: DVector<f64>,
    /// `n_b × n_w`.
    pub constraints: DMatrix<f64>,
    pub constraint_rhs: DVector<f64>,
}

#[derive(Clone, Debug)]
pub struct SaddleSolution {
    pub w: DVector<f64>,
    pub y: DVector<f64>,
    pub w_hat: DVector<f64>,
    pub w_check: DMatrix<f64>,
}

impl SaddleSystem {
    pub fn new(
        matrix: DMatrix<f64>,
        rhs: DVector<f64>,
        constraints: DMatrix<f64>,
        constraint_rhs: DVector<f64>,
    ) -> Result<Self> {
        let sys = Self { matrix, rhs, constraints, constraint_rhs };
        sys.validate()?;
        Ok(sys)
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.matrix.nrows();
        if self.matrix.ncols() != n
            || self.rhs.len() != n
            || self.constraints.ncols() != n
            || self.constraints.nrows() != self.constraint_rhs.len()
        {
            return Err(Error::DimensionMismatch(format!(
                "A {:?}, a {}, B {:?}, b {}",
                self.matrix.shape(),
                self.rhs.len(),
                self.constraints.shape(),
                self.constraint_rhs.len()
            )));
        }
        let asym = max_abs(&(&self.matrix - self.matrix.transpose()));
        if asym > 1e-12 * max_abs(&self.matrix).max(f64::MIN_POSITIVE) {
            return Err(Error::DimensionMismatch("A is not symmetric".into()));
        }
        Ok(())
    }

    pub fn primal_dim(&self) -> usize {
        self.matrix.nrows()
    }

    pub fn constraint_dim(&self) -> usize {
        self.constraints.nrows()
    }

    /// The stacked KKT matrix `[A Bᵀ; B 0]` and right-hand side `[a; b]`.
    pub fn kkt(&self) -> (DMatrix<f64>, DVector<f64>) {
        let n = self.primal_dim();
        let m = self.constraint_dim();
        let mut k = DMatrix::zeros(n + m, n + m);
        k.view_mut((0, 0), (n, n)).copy_from(&self.matrix);
        k.view_mut((n, 0), (m, n)).copy_from(&self.constraints);
        k.view_mut((0, n), (n, m)).copy_from(&self.constraints.transpose());
        let mut r = DVector::zeros(n + m);
        r.rows_mut(0, n).copy_from(&self.rhs);
        r.rows_mut(n, m).copy_from(&self.constraint_rhs);
        (k, r)
    }

    /// ∞-norm of the KKT residual at `(w, y)`.
    pub fn residual(&self, w: &DVector<f64>, y: &DVector<f64>) -> f64 {
        let r1 = &self.matrix * w + self.constraints.transpose() * y - &self.rhs;
        let r2 = &self.constraints * w - &self.constraint_rhs;
        r1.amax().max(r2.amax())
    }

    /// Objective `½wᵀAw − aᵀw`.
    pub fn objective(&self, w: &DVector<f64>) -> f64 {
        0.5 * w.dot(&(&self.matrix * w)) - self.rhs.dot(w)
    }
}

fn split(w_hat: DVector<f64>, w_check: DMatrix<f64>, y: DVector<f64>) -> SaddleSolution {
    let w = &w_hat - &w_check * &y;
    SaddleSolution { w, y, w_hat, w_check }
}

/// Full pivoted solve of the stacked KKT system.
pub fn solve_kkt_dense(sys: &SaddleSystem) -> Result<SaddleSolution> {
    sys.validate()?;
    let n = sys.primal_dim();
    let m = sys.constraint_dim();
    let (k, r) = sys.kkt();
    let lu = FullPivLu::new(&k, default_rank_tol(n + m, n + m));
    let sol = lu
        .solve(&DMatrix::from_column_slice(n + m, 1, r.as_slice()))
        .ok_or(Error::SingularSystem)?;
    let y = DVector::from_iterator(m, sol.column(0).rows(n, m).iter().copied());
    let a_lu = FullPivLu::new(&sys.matrix, default_rank_tol(n, n));
    let mut rhs = DMatrix::zeros(n, m + 1);
    rhs.column_mut(0).copy_from(&sys.rhs);
    rhs.columns_mut(1, m).copy_from(&sys.constraints.transpose());
    let (w_hat, w_check) = match a_lu.solve(&rhs) {
        Some(x) => (x.column(0).clone_owned(), x.columns(1, m).clone_owned()),
        None => {
            // A itself singular (KKT still regular): report only the combined primal.
            let w = DVector::from_iterator(n, sol.column(0).rows(0, n).iter().copied());
            return Ok(SaddleSolution { w: w.clone(), y, w_hat: w, w_check: DMatrix::zeros(n, m) });
        }
    };
    Ok(split(w_hat, w_check, y))
}

fn hat_and_check(sys: &SaddleSystem) -> Result<(DVector<f64>, DMatrix<f64>)> {
    let chol = CholeskyFactor::new(&sys.matrix).ok_or(Error::NotPositiveDefinite { stage: None })?;
    let w_hat = chol.solve_vec(&sys.rhs);
    let w_check = chol.solve(&sys.constraints.transpose());
    Ok((w_hat, w_check))
}

/// Schur-complement resolution `y = −S⁻¹(b − Bŵ)`, `S = BA⁻¹Bᵀ`.
pub fn solve_schur(sys: &SaddleSystem) -> Result<SaddleSolution> {
    sys.validate()?;
    let (w_hat, w_check) = hat_and_check(sys)?;
    let s = &sys.constraints * &w_check;
    let chol = CholeskyFactor::new_gram(&s, GRAM_PIVOT_TOL).ok_or(Error::SingularSchur)?;
    let rho = &sys.constraint_rhs - &sys.constraints * &w_hat;
    let y = -chol.solve_vec(&rho);
    Ok(split(w_hat, w_check, y))
}

/// Range-space resolution tolerant of rank-deficient `B`.
pub fn solve_nullspace(sys: &SaddleSystem, rank_tol: f64) -> Result<SaddleSolution> {
    sys.validate()?;
    let (w_hat, w_check) = hat_and_check(sys)?;
    let bases = nullspace_bases(&sys.constraints.transpose(), rank_tol);
    let rho = &sys.constraint_rhs - &sys.constraints * &w_hat;
    let scale = 1.0 + sys.constraint_rhs.norm() + (&sys.constraints * &w_hat).norm();
    if (bases.z.transpose() * &rho).norm() > CONSISTENCY_TOL * scale {
        return Err(Error::InconsistentConstraint);
    }
    let s = &sys.constraints * &w_check;
    let sy = bases.y.transpose() * &s * &bases.y;
    let chol = CholeskyFactor::new(&sy).ok_or(Error::SingularSchur)?;
    let y = -(&bases.y * chol.solve_vec(&(bases.y.transpose() * &rho)));
    Ok(split(w_hat, w_check, y))
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::dmatrix;
    use nalgebra::dvector;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn seeded(seed: u64, n: usize, m: usize) -> SaddleSystem {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let g = DMatrix::from_fn(n, n, |_, _| rng.random_range(-1.0..1.0));
        let a = &g * g.transpose() + DMatrix::identity(n, n) * n as f64 * 0.1;
        let b = DMatrix::from_fn(m, n, |_, _| rng.random_range(-1.0..1.0));
        let av = DVector::from_fn(n, |_, _| rng.random_range(-1.0..1.0));
        let bv = DVector::from_fn(m, |_, _| rng.random_range(-1.0..1.0));
        let mut sys = SaddleSystem { matrix: a, rhs: av, constraints: b, constraint_rhs: bv };
        crate::linalg::symmetrize(&mut sys.matrix);
        sys
    }

    fn identity_case() -> SaddleSystem {
        SaddleSystem::new(DMatrix::identity(2, 2), dvector![1.0, 1.0], dmatrix![1.0, 0.0], dvector![2.0]).unwrap()
    }

    #[test]
    fn identity_hand_solved() {
        for sol in [solve_kkt_dense(&identity_case()).unwrap(), solve_schur(&identity_case()).unwrap()] {
            assert!((sol.w - dvector![2.0, 1.0]).norm() < 1e-14);
            assert!((sol.y[0] + 1.0).abs() < 1e-14);
        }
    }

    #[test]
    fn unconstrained() {
        let sys = SaddleSystem::new(DMatrix::identity(2, 2), dvector![3.0, -1.0], DMatrix::zeros(0, 2), DVector::zeros(0))
            .unwrap();
        let sol = solve_kkt_dense(&sys).unwrap();
        assert!((sol.w - dvector![3.0, -1.0]).norm() < 1e-14);
        assert_eq!(sol.y.len(), 0);
        let sol = solve_nullspace(&sys, 1e-12).unwrap();
        assert!((sol.w - dvector![3.0, -1.0]).norm() < 1e-14);
    }

    #[test]
    fn dense_matches_independent_solve() {
        let sys = seeded(42, 6, 2);
        let sol = solve_kkt_dense(&sys).unwrap();
        let (k, r) = sys.kkt();
        let reference = k.lu().solve(&r).unwrap();
        assert!((sol.w - reference.rows(0, 6)).amax() < 1e-10);
        assert!((sol.y - reference.rows(6, 2)).amax() < 1e-10);
        let sch = solve_schur(&sys).unwrap();
        assert!((&sch.w - reference.rows(0, 6)).amax() < 1e-9);
        let ns = solve_nullspace(&sys, 1e-12).unwrap();
        assert!((&ns.w - &sch.w).amax() < 1e-9);
    }

    #[test]
    fn duplicated_rows() {
        let dup = dmatrix![1.0, 0.0; 1.0, 0.0];
        let sys = SaddleSystem::new(DMatrix::identity(2, 2), dvector![0.0, 0.0], dup.clone(), dvector![1.0, 1.0]).unwrap();
        assert_eq!(solve_schur(&sys).unwrap_err(), Error::SingularSchur);
        let sol = solve_nullspace(&sys, default_rank_tol(2, 2)).unwrap();
        assert!((sol.w - dvector![1.0, 0.0]).norm() < 1e-14);
        assert!((sol.y - dvector![-0.5, -0.5]).norm() < 1e-14);
        let bad = SaddleSystem::new(DMatrix::identity(2, 2), dvector![0.0, 0.0], dup, dvector![1.0, 2.0]).unwrap();
        assert_eq!(solve_nullspace(&bad, default_rank_tol(2, 2)).unwrap_err(), Error::InconsistentConstraint);
    }

    #[test]
    fn decomposition_identity() {
        let sys = seeded(3, 5, 2);
        for sol in [solve_schur(&sys).unwrap(), solve_nullspace(&sys, 1e-12).unwrap(), solve_kkt_dense(&sys).unwrap()] {
            assert!((&sys.matrix * &sol.w_hat - &sys.rhs).amax() < 1e-10);
            assert!((&sys.matrix * &sol.w_check - sys.constraints.transpose()).amax() < 1e-10);
            assert!(sys.residual(&sol.w, &sol.y) < 1e-10);
        }
    }

    #[test]
    fn rejects_bad_dimensions() {
        assert!(SaddleSystem::new(DMatrix::identity(2, 2), dvector![1.0], DMatrix::zeros(0, 2), DVector::zeros(0)).is_err());
    }
}
