//! Affine model-discrepancy representation and its structured Gaussian prior.
//!
//! The discrepancy parameters are held as an intercept vector plus a slope
//! matrix rather than one long flattened vector: every prior operation below
//! works through the Kronecker block structure of the precision factorization,
//! so all arithmetic stays in the state and optimization-variable dimensions.

use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::spaces::{generalized_eig, SpdOperator};

/// Parameters of the affine discrepancy `delta(z, theta) = intercept + slope * (M_z z)`.
#[derive(Debug, Clone, PartialEq)]
pub struct DiscrepancyParams {
    pub intercept: DVector<f64>,
    pub slope: DMatrix<f64>,
}

impl DiscrepancyParams {
    pub fn new(intercept: DVector<f64>, slope: DMatrix<f64>) -> Result<Self> {
        if slope.nrows() != intercept.len() {
            return Err(Error::DimensionMismatch(format!(
                "slope has {} rows but intercept has {} entries",
                slope.nrows(),
                intercept.len()
            )));
        }
        Ok(Self { intercept, slope })
    }

    pub fn zeros(n_u: usize, n_z: usize) -> Self {
        Self {
            intercept: DVector::zeros(n_u),
            slope: DMatrix::zeros(n_u, n_z),
        }
    }

    pub fn dim_u(&self) -> usize {
        self.intercept.len()
    }

    pub fn dim_z(&self) -> usize {
        self.slope.ncols()
    }

    pub fn is_zero(&self) -> bool {
        self.intercept.iter().all(|&v| v == 0.0) && self.slope.iter().all(|&v| v == 0.0)
    }

    /// Euclidean inner product on the structured representation; identical to
    /// the dot product of the flattened parameter vector.
    pub fn dot(&self, other: &Self) -> f64 {
        self.intercept.dot(&other.intercept) + self.slope.dot(&other.slope)
    }

    pub fn norm(&self) -> f64 {
        self.dot(self).sqrt()
    }

    pub fn scale(&self, t: f64) -> Self {
        Self {
            intercept: &self.intercept * t,
            slope: &self.slope * t,
        }
    }

    pub fn add(&self, other: &Self) -> Self {
        Self {
            intercept: &self.intercept + &other.intercept,
            slope: &self.slope + &other.slope,
        }
    }

    pub fn sub(&self, other: &Self) -> Self {
        Self {
            intercept: &self.intercept - &other.intercept,
            slope: &self.slope - &other.slope,
        }
    }

    /// Standard-normal draw with the shape of a parameter vector.
    pub fn standard_normal(n_u: usize, n_z: usize, rng: &mut impl Rng) -> Self {
        Self {
            intercept: DVector::from_fn(n_u, |_, _| rng.sample(StandardNormal)),
            slope: DMatrix::from_fn(n_u, n_z, |_, _| rng.sample(StandardNormal)),
        }
    }
}

/// Evaluate `delta(z, theta) = intercept + slope * (M_z z)`.
pub fn eval_delta(
    theta: &DiscrepancyParams,
    z: &DVector<f64>,
    m_z: &SpdOperator,
) -> Result<DVector<f64>> {
    if z.len() != theta.dim_z() || m_z.dim() != theta.dim_z() {
        return Err(Error::DimensionMismatch(format!(
            "eval_delta: slope has {} columns, z has {} entries, M_z dim {}",
            theta.dim_z(),
            z.len(),
            m_z.dim()
        )));
    }
    Ok(&theta.intercept + &theta.slope * m_z.apply(z))
}

/// Adjoint of the evaluation operator: `A(z)^T w` as a parameter-shaped object,
/// i.e. intercept `w` and slope `w (M_z z)^T`.
pub fn apply_a_transpose(
    z: &DVector<f64>,
    w: &DVector<f64>,
    m_z: &SpdOperator,
) -> Result<DiscrepancyParams> {
    if z.len() != m_z.dim() {
        return Err(Error::DimensionMismatch(format!(
            "apply_a_transpose: z has {} entries, M_z dim {}",
            z.len(),
            m_z.dim()
        )));
    }
    let mz = m_z.apply(z);
    Ok(DiscrepancyParams {
        intercept: w.clone(),
        slope: w * mz.transpose(),
    })
}

/// Prior precision factorization. Holds the generalized eigendecomposition of
/// `W_u` in the `M_u` inner product together with everything needed to apply
/// the triangular factor `L` (with `L L^T = W_theta`), its transpose, and
/// their inverses in intercept/slope coordinates.
#[derive(Debug, Clone)]
pub struct PriorFactor {
    /// Eigenvectors of `W_u` in the `M_u` inner product (columns), `X^T M_u X = I`.
    x: DMatrix<f64>,
    /// Eigenvalues of the pencil, all positive.
    lambda: DVector<f64>,
    z_tilde: DVector<f64>,
    m_z: Arc<SpdOperator>,
    w_z: Arc<SpdOperator>,
    m_u: Arc<SpdOperator>,
    /// Lower Cholesky factor of `W_z`.
    w_z_sqrt: DMatrix<f64>,

    // Cached pieces for the block formulas.
    u_mat: DMatrix<f64>,   // M_u X Lambda^{1/2}
    y_mat: DMatrix<f64>,   // Lambda^{-1/2} X^T
    f_inv: DMatrix<f64>,   // (W_z^{1/2})^{-1}
    m_ztilde: DVector<f64>, // M_z z_tilde
    w_z_inv: DMatrix<f64>, // W_z^{-1}
    xmx: DVector<f64>,     // x_j^T M_u x_j
}

impl PriorFactor {
    pub fn new(
        w_u: &SpdOperator,
        m_u: Arc<SpdOperator>,
        w_z: Arc<SpdOperator>,
        m_z: Arc<SpdOperator>,
        z_tilde: DVector<f64>,
    ) -> Result<Self> {
        let n_u = m_u.dim();
        let n_z = m_z.dim();
        if w_u.dim() != n_u || w_z.dim() != n_z || z_tilde.len() != n_z {
            return Err(Error::DimensionMismatch(
                "prior operators and center point disagree in dimension".into(),
            ));
        }
        let pairs = generalized_eig(w_u.matrix(), &m_u, n_u)?;
        let lambda = pairs.values().clone();
        if lambda.iter().any(|&l| l <= 0.0) {
            return Err(Error::NotSpd(
                "prior state operator has non-positive generalized eigenvalues".into(),
            ));
        }
        let x = pairs.vectors().clone();

        let sqrt_lambda = lambda.map(f64::sqrt);
        let u_mat = m_u.matrix() * &x * DMatrix::from_diagonal(&sqrt_lambda);
        let y_mat = DMatrix::from_diagonal(&lambda.map(|l| 1.0 / l.sqrt())) * x.transpose();
        let w_z_sqrt = w_z.chol_l();
        let f_inv = w_z_sqrt
            .clone()
            .solve_lower_triangular(&DMatrix::identity(n_z, n_z))
            .ok_or_else(|| Error::NotSpd("W_z Cholesky factor is singular".into()))?;
        let m_ztilde = m_z.apply(&z_tilde);
        let w_z_inv = w_z.inverse();
        let xmx = DVector::from_fn(n_u, |j, _| x.column(j).dot(&(m_u.matrix() * x.column(j))));

        Ok(Self {
            x,
            lambda,
            z_tilde,
            m_z,
            w_z,
            m_u,
            w_z_sqrt,
            u_mat,
            y_mat,
            f_inv,
            m_ztilde,
            w_z_inv,
            xmx,
        })
    }

    pub fn dim_u(&self) -> usize {
        self.m_u.dim()
    }

    pub fn dim_z(&self) -> usize {
        self.m_z.dim()
    }

    pub fn x(&self) -> &DMatrix<f64> {
        &self.x
    }

    pub fn lambda(&self) -> &DVector<f64> {
        &self.lambda
    }

    pub fn z_tilde(&self) -> &DVector<f64> {
        &self.z_tilde
    }

    pub fn m_z(&self) -> &Arc<SpdOperator> {
        &self.m_z
    }

    pub fn w_z(&self) -> &Arc<SpdOperator> {
        &self.w_z
    }

    pub fn m_u(&self) -> &Arc<SpdOperator> {
        &self.m_u
    }

    pub fn w_z_sqrt(&self) -> &DMatrix<f64> {
        &self.w_z_sqrt
    }

    pub fn w_z_inv(&self) -> &DMatrix<f64> {
        &self.w_z_inv
    }

    /// Mass norms `x_j^T M_u x_j` (unity up to roundoff; kept explicit).
    pub fn x_mass_norms(&self) -> &DVector<f64> {
        &self.xmx
    }

    pub fn m_ztilde(&self) -> &DVector<f64> {
        &self.m_ztilde
    }

    /// `theta -> L theta`.
    pub fn apply_l(&self, theta: &DiscrepancyParams) -> Result<DiscrepancyParams> {
        self.check(theta)?;
        let ui = &self.u_mat * &theta.intercept;
        let slope = &ui * self.m_ztilde.transpose() + &self.u_mat * &theta.slope * self.w_z_sqrt.transpose();
        Ok(DiscrepancyParams {
            intercept: ui,
            slope,
        })
    }

    /// `theta -> L^T theta`.
    pub fn apply_l_t(&self, theta: &DiscrepancyParams) -> Result<DiscrepancyParams> {
        self.check(theta)?;
        let ut = self.u_mat.transpose();
        let intercept = &ut * (&theta.intercept + &theta.slope * &self.m_ztilde);
        let slope = &ut * &theta.slope * &self.w_z_sqrt;
        Ok(DiscrepancyParams { intercept, slope })
    }

    /// `theta -> L^{-1} theta`.
    pub fn apply_l_inv(&self, theta: &DiscrepancyParams) -> Result<DiscrepancyParams> {
        self.check(theta)?;
        let yi = &self.y_mat * &theta.intercept;
        let fm = &self.f_inv * &self.m_ztilde;
        let slope = -(&yi) * fm.transpose() + &self.y_mat * &theta.slope * self.f_inv.transpose();
        Ok(DiscrepancyParams {
            intercept: yi,
            slope,
        })
    }

    /// `theta -> L^{-T} theta`.
    pub fn apply_l_inv_t(&self, theta: &DiscrepancyParams) -> Result<DiscrepancyParams> {
        self.check(theta)?;
        let yt = self.y_mat.transpose();
        let fm = &self.f_inv * &self.m_ztilde;
        let intercept = &yt * (&theta.intercept - &theta.slope * &fm);
        let slope = &yt * &theta.slope * &self.f_inv;
        Ok(DiscrepancyParams { intercept, slope })
    }

    /// `theta -> W_theta^{-1} theta = L^{-T} L^{-1} theta`.
    pub fn w_theta_inv_apply(&self, theta: &DiscrepancyParams) -> Result<DiscrepancyParams> {
        self.apply_l_inv_t(&self.apply_l_inv(theta)?)
    }

    /// Quadratic form `theta^T W_theta theta = ||L^T theta||^2`.
    pub fn quadratic_form(&self, theta: &DiscrepancyParams) -> Result<f64> {
        let lt = self.apply_l_t(theta)?;
        Ok(lt.dot(&lt))
    }

    /// Draw from the prior `N(0, W_theta^{-1})` given a standard-normal draw.
    pub fn prior_sample(&self, noise: &DiscrepancyParams) -> Result<DiscrepancyParams> {
        self.apply_l_inv_t(noise)
    }

    fn check(&self, theta: &DiscrepancyParams) -> Result<()> {
        if theta.dim_u() != self.dim_u() || theta.dim_z() != self.dim_z() {
            return Err(Error::DimensionMismatch(format!(
                "parameters are {}x{} but prior is for {}x{}",
                theta.dim_u(),
                theta.dim_z(),
                self.dim_u(),
                self.dim_z()
            )));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::spaces::{build_grid, laplacian_prior, mass_matrix};
    use approx::assert_relative_eq;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use crate::test_oracles::{dense_l, dense_w_theta, dense_w_u, flatten, test_prior};

    fn random_theta(n_u: usize, n_z: usize, rng: &mut impl rand::Rng) -> DiscrepancyParams {
        DiscrepancyParams {
            intercept: DVector::from_fn(n_u, |_, _| rng.gen_range(-1.0..1.0)),
            slope: DMatrix::from_fn(n_u, n_z, |_, _| rng.gen_range(-1.0..1.0)),
        }
    }

    #[test]
    fn eval_delta_basics() {
        let gz = build_grid(3, 0.0, 1.0).unwrap();
        let m_z = mass_matrix(&gz);
        let z = DVector::from_vec(vec![0.3, -0.2, 0.9]);
        let zero = DiscrepancyParams::zeros(4, 3);
        assert!(eval_delta(&zero, &z, &m_z).unwrap().norm() == 0.0);

        let theta = DiscrepancyParams::new(
            DVector::from_vec(vec![1.0, -2.0, 0.5, 0.0]),
            DMatrix::zeros(4, 3),
        )
        .unwrap();
        let d = eval_delta(&theta, &z, &m_z).unwrap();
        assert_eq!(d, theta.intercept);
    }

    #[test]
    fn eval_delta_identity_mass_case() {
        // n_u = n_z = 2 with M_z = I, intercept (1,0), slope I, z = (1,2) -> (2,2)
        let m_z = SpdOperator::new(DMatrix::identity(2, 2)).unwrap();
        let theta =
            DiscrepancyParams::new(DVector::from_vec(vec![1.0, 0.0]), DMatrix::identity(2, 2))
                .unwrap();
        let z = DVector::from_vec(vec![1.0, 2.0]);
        let d = eval_delta(&theta, &z, &m_z).unwrap();
        assert_relative_eq!(d[0], 2.0);
        assert_relative_eq!(d[1], 2.0);
    }

    #[test]
    fn apply_a_transpose_structure() {
        let gz = build_grid(3, 0.0, 1.0).unwrap();
        let m_z = mass_matrix(&gz);
        let w = DVector::from_vec(vec![1.0, 2.0]);
        let z0 = DVector::zeros(3);
        let t = apply_a_transpose(&z0, &w, &m_z).unwrap();
        assert_eq!(t.intercept, w);
        assert_eq!(t.slope, DMatrix::zeros(2, 3));

        let w0 = DVector::zeros(2);
        let z = DVector::from_vec(vec![0.5, 0.1, -0.3]);
        let t0 = apply_a_transpose(&z, &w0, &m_z).unwrap();
        assert!(t0.is_zero());
    }

    #[test]
    fn adjoint_identity_against_brute_force() {
        let gz = build_grid(4, 0.0, 1.0).unwrap();
        let m_z = mass_matrix(&gz);
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        for _ in 0..20 {
            let z = DVector::from_fn(4, |_, _| rng.gen_range(-2.0..2.0));
            let w = DVector::from_fn(3, |_, _| rng.gen_range(-2.0..2.0));
            let theta = random_theta(3, 4, &mut rng);
            let lhs = apply_a_transpose(&z, &w, &m_z).unwrap().dot(&theta);
            let rhs = w.dot(&eval_delta(&theta, &z, &m_z).unwrap());
            assert_relative_eq!(lhs, rhs, max_relative = 1e-12);
        }
    }

    #[test]
    fn l_inverse_round_trip() {
        let prior = test_prior(4, 3, 1);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..10 {
            let theta = random_theta(4, 3, &mut rng);
            let back = prior.apply_l_inv(&prior.apply_l(&theta).unwrap()).unwrap();
            assert!(back.sub(&theta).norm() / theta.norm() < 1e-10);
            let back_t = prior
                .apply_l_inv_t(&prior.apply_l_t(&theta).unwrap())
                .unwrap();
            assert!(back_t.sub(&theta).norm() / theta.norm() < 1e-10);
        }
    }

    #[test]
    fn block_application_matches_dense_kronecker_expansion() {
        let prior = test_prior(3, 2, 3);
        let l = dense_l(&prior);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let theta = random_theta(3, 2, &mut rng);
        let flat = flatten(&theta);

        let lt = prior.apply_l(&theta).unwrap();
        assert!((flatten(&lt) - &l * &flat).norm() / flat.norm() < 1e-12);

        let ltt = prior.apply_l_t(&theta).unwrap();
        assert!((flatten(&ltt) - l.transpose() * &flat).norm() / flat.norm() < 1e-12);

        let linv = l.clone().try_inverse().unwrap();
        let li = prior.apply_l_inv(&theta).unwrap();
        assert!((flatten(&li) - &linv * &flat).norm() / flat.norm() < 1e-12);
        let lit = prior.apply_l_inv_t(&theta).unwrap();
        assert!((flatten(&lit) - linv.transpose() * &flat).norm() / flat.norm() < 1e-12);
    }

    #[test]
    fn factorization_matches_dense_w_theta() {
        for (n_u, n_z, seed) in [(3, 2, 5), (4, 3, 6)] {
            let prior = test_prior(n_u, n_z, seed);
            let w = dense_w_theta(&prior);
            let l = dense_l(&prior);
            let rec = &l * l.transpose();
            assert!((&rec - &w).norm() / w.norm() < 1e-10);
            let n_t = n_u * (n_z + 1);
            let linv = l.clone().try_inverse().unwrap();
            assert!((&linv * &l - DMatrix::identity(n_t, n_t)).norm() < 1e-10);
        }
    }

    #[test]
    fn quadratic_form_cases() {
        let prior = test_prior(3, 2, 7);
        let zero = DiscrepancyParams::zeros(3, 2);
        assert_eq!(prior.quadratic_form(&zero).unwrap(), 0.0);

        // slope = 0: form reduces to ||delta(z~, theta)||_{W_u}^2 with
        // delta = intercept, i.e. intercept^T W_u intercept.
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let intercept = DVector::from_fn(3, |_, _| rng.gen_range(-1.0..1.0));
        let theta = DiscrepancyParams::new(intercept.clone(), DMatrix::zeros(3, 2)).unwrap();
        let w_u = dense_w_u(&prior);
        let expected = intercept.dot(&(&w_u * &intercept));
        assert_relative_eq!(
            prior.quadratic_form(&theta).unwrap(),
            expected,
            max_relative = 1e-9
        );

        // dense oracle
        let theta = random_theta(3, 2, &mut rng);
        let flat = flatten(&theta);
        let dense = flat.dot(&(&dense_w_theta(&prior) * &flat));
        assert_relative_eq!(
            prior.quadratic_form(&theta).unwrap(),
            dense,
            max_relative = 1e-12
        );
    }

    #[test]
    fn centered_prior_has_no_intercept_coupling() {
        // z~ = 0: the off-diagonal block of L^{-1} reduces to zero, so the
        // slope of L^{-1}(theta) no longer sees the intercept.
        let gu = build_grid(3, 0.0, 1.0).unwrap();
        let gz = build_grid(4, 0.0, 1.0).unwrap();
        let m_u = Arc::new(mass_matrix(&gu));
        let m_z = Arc::new(mass_matrix(&gz));
        let w_u = laplacian_prior(&gu, 0.1, 1.0).unwrap();
        let w_z = Arc::new(laplacian_prior(&gz, 0.1, 1.0).unwrap());
        let prior = PriorFactor::new(&w_u, m_u, w_z, m_z, DVector::zeros(4)).unwrap();
        let theta = DiscrepancyParams::new(
            DVector::from_vec(vec![1.0, -1.0, 2.0]),
            DMatrix::zeros(3, 4),
        )
        .unwrap();
        let li = prior.apply_l_inv(&theta).unwrap();
        assert!(li.slope.norm() < 1e-14);
    }

    #[test]
    fn interpolated_delta_converges_under_refinement() {
        // Fixed smooth intercept / slope kernel / z triple evaluated on three
        // grids; successive L2 differences (on a common fine grid) decrease.
        let intercept_fn = |x: f64| (std::f64::consts::PI * x).sin();
        let kernel = |x: f64, y: f64| (std::f64::consts::PI * x).cos() * (1.0 + y) * 0.5;
        let z_fn = |y: f64| y * y;

        let fine = build_grid(129, 0.0, 1.0).unwrap();
        let m_fine = mass_matrix(&fine);
        let mut deltas = Vec::new();
        for n in [17usize, 33, 65] {
            let g = build_grid(n, 0.0, 1.0).unwrap();
            let m = mass_matrix(&g);
            let theta = DiscrepancyParams::new(
                g.sample(intercept_fn),
                DMatrix::from_fn(n, n, |i, j| kernel(g.nodes()[i], g.nodes()[j])),
            )
            .unwrap();
            let z = g.sample(z_fn);
            let d = eval_delta(&theta, &z, &m).unwrap();
            // linear interpolation onto the fine grid
            let interp = fine.sample(|x| {
                let h = g.spacing();
                let idx = ((x / h).floor() as usize).min(n - 2);
                let t = (x - g.nodes()[idx]) / h;
                d[idx] * (1.0 - t) + d[idx + 1] * t
            });
            deltas.push(interp);
        }
        let d01 = m_fine.norm(&(&deltas[1] - &deltas[0]));
        let d12 = m_fine.norm(&(&deltas[2] - &deltas[1]));
        assert!(
            d12 < d01,
            "refinement differences should decrease: {d01:.3e} -> {d12:.3e}"
        );
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(16))]
        #[test]
        fn adjoint_identity_property(seed in 0u64..1000) {
            let gz = build_grid(4, 0.0, 1.0).unwrap();
            let m_z = mass_matrix(&gz);
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let z = DVector::from_fn(4, |_, _| rng.gen_range(-2.0..2.0));
            let w = DVector::from_fn(3, |_, _| rng.gen_range(-2.0..2.0));
            let theta = random_theta(3, 4, &mut rng);
            let lhs = apply_a_transpose(&z, &w, &m_z).unwrap().dot(&theta);
            let rhs = w.dot(&eval_delta(&theta, &z, &m_z).unwrap());
            prop_assert!((lhs - rhs).abs() <= 1e-12 * (1.0 + lhs.abs().max(rhs.abs())));
        }
    }
}
