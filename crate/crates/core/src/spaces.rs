//! 1D discretization primitives: equispaced grids, piecewise-linear FEM mass and
//! stiffness matrices, Laplacian-like prior operators, and dense generalized
//! eigendecompositions for SPD pencils.

use std::sync::Arc;

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};

use crate::error::{Error, Result};

/// Equispaced 1D grid on `[a, b]` including both endpoints.
#[derive(Debug, Clone)]
pub struct Grid1D {
    n: usize,
    domain: (f64, f64),
    nodes: DVector<f64>,
}

impl Grid1D {
    pub fn n(&self) -> usize {
        self.n
    }

    pub fn domain(&self) -> (f64, f64) {
        self.domain
    }

    pub fn nodes(&self) -> &DVector<f64> {
        &self.nodes
    }

    /// Grid spacing `(b - a) / (n - 1)`.
    pub fn spacing(&self) -> f64 {
        (self.domain.1 - self.domain.0) / (self.n as f64 - 1.0)
    }

    /// Sample a function at the grid nodes.
    pub fn sample(&self, f: impl Fn(f64) -> f64) -> DVector<f64> {
        DVector::from_iterator(self.n, self.nodes.iter().map(|&x| f(x)))
    }
}

/// Build an equispaced grid with `n >= 3` nodes on `[a, b]`.
pub fn build_grid(n: usize, a: f64, b: f64) -> Result<Grid1D> {
    if n < 3 {
        return Err(Error::InvalidArgument(format!(
            "grid needs at least 3 nodes, got {n}"
        )));
    }
    if !(a < b) {
        return Err(Error::InvalidArgument(format!(
            "grid interval must satisfy a < b, got [{a}, {b}]"
        )));
    }
    let h = (b - a) / (n as f64 - 1.0);
    let mut nodes = DVector::zeros(n);
    for i in 0..n {
        nodes[i] = a + h * i as f64;
    }
    nodes[n - 1] = b;
    Ok(Grid1D {
        n,
        domain: (a, b),
        nodes,
    })
}

/// Dense symmetric positive definite operator with a cached Cholesky factor.
#[derive(Debug, Clone)]
pub struct SpdOperator {
    dim: usize,
    matrix: DMatrix<f64>,
    cholesky: Cholesky<f64, Dyn>,
}

impl SpdOperator {
    /// Validates symmetry (1e-12 relative) and positive definiteness.
    pub fn new(matrix: DMatrix<f64>) -> Result<Self> {
        let dim = matrix.nrows();
        if matrix.ncols() != dim {
            return Err(Error::DimensionMismatch(format!(
                "operator must be square, got {}x{}",
                matrix.nrows(),
                matrix.ncols()
            )));
        }
        let scale = matrix.norm().max(f64::MIN_POSITIVE);
        let asym = (&matrix - matrix.transpose()).norm();
        if asym > 1e-12 * scale {
            return Err(Error::NotSpd(format!(
                "asymmetry {asym:.3e} exceeds 1e-12 relative tolerance"
            )));
        }
        // Symmetrize so the cached factor matches the stored matrix exactly.
        let matrix = (&matrix + matrix.transpose()) * 0.5;
        let cholesky = Cholesky::new(matrix.clone())
            .ok_or_else(|| Error::NotSpd("Cholesky factorization failed".into()))?;
        Ok(Self {
            dim,
            matrix,
            cholesky,
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.matrix
    }

    pub fn apply(&self, v: &DVector<f64>) -> DVector<f64> {
        &self.matrix * v
    }

    /// Solve `A x = b`.
    pub fn solve(&self, b: &DVector<f64>) -> DVector<f64> {
        self.cholesky.solve(b)
    }

    pub fn solve_mat(&self, b: &DMatrix<f64>) -> DMatrix<f64> {
        self.cholesky.solve(b)
    }

    /// Lower-triangular Cholesky factor `L` with `L L^T = A`.
    pub fn chol_l(&self) -> DMatrix<f64> {
        self.cholesky.l()
    }

    pub fn inverse(&self) -> DMatrix<f64> {
        self.cholesky.inverse()
    }

    /// Weighted inner product `u^T A v`.
    pub fn inner(&self, u: &DVector<f64>, v: &DVector<f64>) -> f64 {
        u.dot(&self.apply(v))
    }

    /// Weighted norm `sqrt(v^T A v)`.
    pub fn norm(&self, v: &DVector<f64>) -> f64 {
        self.inner(v, v).max(0.0).sqrt()
    }

    /// Dual norm `sqrt(v^T A^{-1} v)`.
    pub fn dual_norm(&self, v: &DVector<f64>) -> f64 {
        v.dot(&self.solve(v)).max(0.0).sqrt()
    }
}

/// Piecewise-linear FEM mass matrix on an equispaced grid (tridiagonal).
pub fn mass_matrix(grid: &Grid1D) -> SpdOperator {
    let n = grid.n();
    let h = grid.spacing();
    let mut m = DMatrix::zeros(n, n);
    for e in 0..n - 1 {
        m[(e, e)] += h / 3.0;
        m[(e + 1, e + 1)] += h / 3.0;
        m[(e, e + 1)] += h / 6.0;
        m[(e + 1, e)] += h / 6.0;
    }
    SpdOperator::new(m).expect("FEM mass matrix is SPD by construction")
}

/// Piecewise-linear FEM stiffness matrix with natural (Neumann) boundary
/// conditions. Singular on its own: annihilates constant vectors.
pub fn stiffness_matrix(grid: &Grid1D) -> DMatrix<f64> {
    let n = grid.n();
    let h = grid.spacing();
    let mut k = DMatrix::zeros(n, n);
    for e in 0..n - 1 {
        k[(e, e)] += 1.0 / h;
        k[(e + 1, e + 1)] += 1.0 / h;
        k[(e, e + 1)] -= 1.0 / h;
        k[(e + 1, e)] -= 1.0 / h;
    }
    k
}

/// Laplacian-like prior operator `W = gamma*K + beta*M`, SPD for positive weights.
pub fn laplacian_prior(grid: &Grid1D, gamma: f64, beta: f64) -> Result<SpdOperator> {
    if !(gamma > 0.0) || !(beta > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "prior weights must be positive, got gamma={gamma}, beta={beta}"
        )));
    }
    let w = stiffness_matrix(grid) * gamma + mass_matrix(grid).matrix() * beta;
    SpdOperator::new(w)
}

/// Truncated generalized eigenpairs `A v_j = rho_j M v_j` with `V^T M V = I`,
/// eigenvalues sorted descending.
#[derive(Debug, Clone)]
pub struct GenEigPairs {
    values: DVector<f64>,
    vectors: DMatrix<f64>,
    metric: Arc<SpdOperator>,
}

impl GenEigPairs {
    pub fn values(&self) -> &DVector<f64> {
        &self.values
    }

    pub fn vectors(&self) -> &DMatrix<f64> {
        &self.vectors
    }

    pub fn metric(&self) -> &Arc<SpdOperator> {
        &self.metric
    }
}

/// Fix the sign of each column so its largest-magnitude entry is positive.
pub(crate) fn fix_column_signs(mat: &mut DMatrix<f64>) {
    for j in 0..mat.ncols() {
        let col = mat.column(j);
        let mut best = 0usize;
        let mut best_abs = -1.0;
        for (i, &v) in col.iter().enumerate() {
            if v.abs() > best_abs {
                best_abs = v.abs();
                best = i;
            }
        }
        if mat[(best, j)] < 0.0 {
            for i in 0..mat.nrows() {
                mat[(i, j)] = -mat[(i, j)];
            }
        }
    }
}

/// Dense symmetric-definite generalized eigendecomposition via Cholesky
/// reduction: `A v = rho M v` reduces to the ordinary symmetric problem
/// `G^{-1} A G^{-T} q = rho q` with `M = G G^T`.
pub fn generalized_eig(a: &DMatrix<f64>, m: &Arc<SpdOperator>, r: usize) -> Result<GenEigPairs> {
    let dim = m.dim();
    if a.nrows() != dim || a.ncols() != dim {
        return Err(Error::DimensionMismatch(format!(
            "pencil dimensions disagree: A is {}x{}, M is {}x{}",
            a.nrows(),
            a.ncols(),
            dim,
            dim
        )));
    }
    if r == 0 || r > dim {
        return Err(Error::InvalidArgument(format!(
            "rank must satisfy 1 <= r <= {dim}, got {r}"
        )));
    }
    let scale = a.norm().max(f64::MIN_POSITIVE);
    if (a - a.transpose()).norm() > 1e-10 * scale {
        return Err(Error::InvalidArgument(
            "pencil matrix A must be symmetric".into(),
        ));
    }
    let g = m.chol_l();
    // B = G^{-1} A G^{-T}
    let ainv_rows = g
        .solve_lower_triangular(a)
        .ok_or_else(|| Error::EigenFailure("singular Cholesky factor".into()))?;
    let b = g
        .solve_lower_triangular(&ainv_rows.transpose())
        .ok_or_else(|| Error::EigenFailure("singular Cholesky factor".into()))?;
    let b = (&b + b.transpose()) * 0.5;
    let eig = nalgebra::SymmetricEigen::try_new(b, f64::EPSILON, 0)
        .ok_or_else(|| Error::EigenFailure("symmetric eigensolver did not converge".into()))?;

    let mut order: Vec<usize> = (0..dim).collect();
    order.sort_by(|&i, &j| {
        eig.eigenvalues[j]
            .partial_cmp(&eig.eigenvalues[i])
            .expect("eigenvalues are finite")
    });

    let mut values = DVector::zeros(r);
    let mut q = DMatrix::zeros(dim, r);
    for (k, &idx) in order.iter().take(r).enumerate() {
        values[k] = eig.eigenvalues[idx];
        q.set_column(k, &eig.eigenvectors.column(idx));
    }
    // Back-transform: v = G^{-T} q.
    let vectors_t = g
        .transpose()
        .solve_upper_triangular(&q)
        .ok_or_else(|| Error::EigenFailure("singular Cholesky factor".into()))?;
    let mut vectors = vectors_t;
    fix_column_signs(&mut vectors);

    Ok(GenEigPairs {
        values,
        vectors,
        metric: Arc::clone(m),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;

    fn random_spd(n: usize, rng: &mut impl Rng) -> DMatrix<f64> {
        let b = DMatrix::from_fn(n, n, |_, _| rng.gen_range(-1.0..1.0));
        &b * b.transpose() + DMatrix::identity(n, n) * 0.5
    }

    #[test]
    fn build_grid_equispacing() {
        let g = build_grid(3, 0.0, 1.0).unwrap();
        assert_eq!(g.nodes().as_slice(), &[0.0, 0.5, 1.0]);
        let g5 = build_grid(5, 0.0, 1.0).unwrap();
        assert_relative_eq!(g5.spacing(), 0.25);
    }

    #[test]
    fn build_grid_rejects_bad_arguments() {
        assert!(build_grid(2, 0.0, 1.0).is_err());
        assert!(build_grid(5, 1.0, 1.0).is_err());
        assert!(build_grid(5, 2.0, 1.0).is_err());
    }

    #[test]
    fn mass_matrix_entries_and_row_sums() {
        let g = build_grid(3, 0.0, 1.0).unwrap();
        let m = mass_matrix(&g);
        let h = 0.5;
        assert_relative_eq!(m.matrix()[(0, 0)], h / 3.0);
        assert_relative_eq!(m.matrix()[(1, 1)], 2.0 * h / 3.0);
        assert_relative_eq!(m.matrix()[(0, 1)], h / 6.0);
        // e^T M e = interval length
        let e = DVector::from_element(3, 1.0);
        assert_relative_eq!(m.inner(&e, &e), 1.0, epsilon = 1e-14);
        // symmetry by construction
        assert_eq!(m.matrix(), &m.matrix().transpose());
    }

    #[test]
    fn stiffness_annihilates_constants() {
        let g = build_grid(17, -1.0, 2.0).unwrap();
        let k = stiffness_matrix(&g);
        let c = DVector::from_element(17, 3.7);
        assert!((&k * &c).norm() < 1e-12);
        let g3 = build_grid(3, 0.0, 1.0).unwrap();
        let k3 = stiffness_matrix(&g3);
        assert_relative_eq!(k3[(0, 0)], 2.0); // 1/h with h = 0.5
    }

    #[test]
    fn laplacian_prior_limits_and_spd() {
        let g = build_grid(9, 0.0, 1.0).unwrap();
        let m = mass_matrix(&g);
        // Wc = beta*Mc on constants.
        let w = laplacian_prior(&g, 1.0, 2.5).unwrap();
        let c = DVector::from_element(9, 1.0);
        assert_relative_eq!(
            (w.apply(&c) - m.apply(&c) * 2.5).norm(),
            0.0,
            epsilon = 1e-13
        );
        // SPD across sizes up to 512.
        for n in [17, 65, 512] {
            let g = build_grid(n, 0.0, 1.0).unwrap();
            assert!(laplacian_prior(&g, 0.1, 1.0).is_ok());
        }
        assert!(laplacian_prior(&g, 0.0, 1.0).is_err());
        assert!(laplacian_prior(&g, 1.0, -1.0).is_err());
    }

    #[test]
    fn generalized_eig_identity_and_scaled_pencils() {
        let g = build_grid(6, 0.0, 1.0).unwrap();
        let m = Arc::new(mass_matrix(&g));
        let pairs = generalized_eig(m.matrix(), &m, 6).unwrap();
        for v in pairs.values().iter() {
            assert_relative_eq!(*v, 1.0, epsilon = 1e-10);
        }
        let a2 = m.matrix() * 2.0;
        let top = generalized_eig(&a2, &m, 1).unwrap();
        assert_relative_eq!(top.values()[0], 2.0, epsilon = 1e-10);
    }

    #[test]
    fn generalized_eig_reconstructs_dense_pencil() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let a = random_spd(5, &mut rng);
        let m = Arc::new(SpdOperator::new(random_spd(5, &mut rng)).unwrap());
        let pairs = generalized_eig(&a, &m, 5).unwrap();
        let v = pairs.vectors();
        // V^T M V = I
        let gram = v.transpose() * m.matrix() * v;
        assert!((gram - DMatrix::identity(5, 5)).norm() < 1e-10);
        // A = M V diag(rho) V^T M
        let rec =
            m.matrix() * v * DMatrix::from_diagonal(pairs.values()) * v.transpose() * m.matrix();
        assert!((&rec - &a).norm() / a.norm() < 1e-9);
        // A V = M V diag(rho)
        let lhs = &a * v;
        let rhs = m.matrix() * v * DMatrix::from_diagonal(pairs.values());
        assert!((lhs - rhs).norm() / a.norm() < 1e-9);
    }

    #[test]
    fn generalized_eig_sign_convention() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let a = random_spd(4, &mut rng);
        let m = Arc::new(SpdOperator::new(random_spd(4, &mut rng)).unwrap());
        let pairs = generalized_eig(&a, &m, 4).unwrap();
        for j in 0..4 {
            let col = pairs.vectors().column(j);
            let max = col.iter().cloned().fold(f64::MIN, f64::max);
            let min = col.iter().cloned().fold(f64::MAX, f64::min);
            assert!(max >= min.abs());
        }
    }

    #[test]
    fn generalized_eig_rejects_bad_rank() {
        let g = build_grid(4, 0.0, 1.0).unwrap();
        let m = Arc::new(mass_matrix(&g));
        assert!(generalized_eig(m.matrix(), &m, 0).is_err());
        assert!(generalized_eig(m.matrix(), &m, 5).is_err());
    }
}
