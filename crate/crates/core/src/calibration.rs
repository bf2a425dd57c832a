//! Bayesian inference of the discrepancy parameters from evaluation data.
//!
//! The posterior covariance is never materialized. Its action is represented
//! as the prior inverse minus a data-reduction term assembled from the
//! eigendecomposition of the small design Gram matrix `G`, so every operation
//! here costs arithmetic in the state and optimization-variable dimensions
//! only.

use std::sync::Arc;

use nalgebra::{DMatrix, DVector};

use crate::discrepancy::{apply_a_transpose, DiscrepancyParams, PriorFactor};
use crate::error::{Error, Result};
use crate::spaces::{fix_column_signs, SpdOperator};

/// Evaluation points `z_1 .. z_N`, pairwise linearly independent.
#[derive(Debug, Clone)]
pub struct DesignSet {
    points: Vec<DVector<f64>>,
}

impl DesignSet {
    /// Validates linear independence through the Gram matrix in the `M_z`
    /// inner product (relative eigenvalue tolerance 1e-10).
    pub fn new(points: Vec<DVector<f64>>, m_z: &SpdOperator) -> Result<Self> {
        if points.is_empty() {
            return Err(Error::InvalidArgument(
                "design needs at least one point".into(),
            ));
        }
        let n = points.len();
        for p in &points {
            if p.len() != m_z.dim() {
                return Err(Error::DimensionMismatch(
                    "design point dimension disagrees with M_z".into(),
                ));
            }
        }
        let mut gram = DMatrix::zeros(n, n);
        for i in 0..n {
            let mp = m_z.apply(&points[i]);
            for j in 0..n {
                gram[(i, j)] = points[j].dot(&mp);
            }
        }
        let gram = (&gram + gram.transpose()) * 0.5;
        let eig = nalgebra::SymmetricEigen::try_new(gram, f64::EPSILON, 0)
            .ok_or_else(|| Error::EigenFailure("gram eigensolver failed".into()))?;
        let max = eig.eigenvalues.iter().cloned().fold(0.0_f64, f64::max);
        let min = eig.eigenvalues.iter().cloned().fold(f64::MAX, f64::min);
        if min < 1e-10 * max {
            return Err(Error::RankDeficientDesign(format!(
                "gram eigenvalue ratio {:.3e} below 1e-10",
                min / max.max(f64::MIN_POSITIVE)
            )));
        }
        Ok(Self { points })
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn points(&self) -> &[DVector<f64>] {
        &self.points
    }
}

/// Discrepancy evaluations `d_l = S(z_l) - S~(z_l)` matching a design.
#[derive(Debug, Clone)]
pub struct DiscrepancyData {
    pub values: Vec<DVector<f64>>,
}

impl DiscrepancyData {
    pub fn new(values: Vec<DVector<f64>>) -> Self {
        Self { values }
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }
}

/// Design Gram matrix `G = e e^T + (Z - z~ e^T)^T M_z W_z^{-1} M_z (Z - z~ e^T)`.
pub fn build_g(design: &DesignSet, prior: &PriorFactor) -> DMatrix<f64> {
    let n = design.len();
    let z_tilde = prior.z_tilde();
    let centered: Vec<DVector<f64>> = design.points().iter().map(|z| z - z_tilde).collect();
    let c_applied: Vec<DVector<f64>> = centered
        .iter()
        .map(|v| prior.m_z().apply(&prior.w_z().solve(&prior.m_z().apply(v))))
        .collect();
    let mut g = DMatrix::from_element(n, n, 1.0);
    for i in 0..n {
        for j in 0..n {
            g[(i, j)] += centered[i].dot(&c_applied[j]);
        }
    }
    (&g + g.transpose()) * 0.5
}

/// Design-dependent posterior factorization: eigenpairs of `G` together with
/// the vectors `y_i` and scalars `s_i` that, with the prior factor, represent
/// the posterior covariance implicitly.
#[derive(Debug, Clone)]
pub struct PosteriorFactors {
    mu: DVector<f64>,
    g_vecs: DMatrix<f64>,
    y: Vec<DVector<f64>>,
    s: Vec<f64>,
    alpha_d: f64,
    prior: Arc<PriorFactor>,
    design: Arc<DesignSet>,
    /// `q_i = W_z^{-1} M_z y_i`
    q: Vec<DVector<f64>>,
    /// `c_i = M_z W_z^{-1} M_z y_i`
    c: Vec<DVector<f64>>,
}

/// Eigendecomposition of `G` plus the `y_i`, `s_i` vectors of the implicit
/// posterior representation. Warns (does not fail) on cond(G) > 1e12.
pub fn posterior_factors(
    design: Arc<DesignSet>,
    data: &DiscrepancyData,
    prior: Arc<PriorFactor>,
    alpha_d: f64,
) -> Result<PosteriorFactors> {
    if !(alpha_d > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "alpha_d must be positive, got {alpha_d}"
        )));
    }
    if data.len() != design.len() {
        return Err(Error::DimensionMismatch(format!(
            "{} data values for {} design points",
            data.len(),
            design.len()
        )));
    }
    let n = design.len();
    let g = build_g(&design, &prior);
    let eig = nalgebra::SymmetricEigen::try_new(g.clone(), f64::EPSILON, 0)
        .ok_or_else(|| Error::EigenFailure("eigendecomposition of G failed".into()))?;
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| eig.eigenvalues[j].partial_cmp(&eig.eigenvalues[i]).unwrap());
    let mut mu = DVector::zeros(n);
    let mut g_vecs = DMatrix::zeros(n, n);
    for (k, &idx) in order.iter().enumerate() {
        mu[k] = eig.eigenvalues[idx];
        g_vecs.set_column(k, &eig.eigenvectors.column(idx));
    }
    fix_column_signs(&mut g_vecs);

    let mu_max = mu[0].max(f64::MIN_POSITIVE);
    let mu_min = mu[n - 1];
    if mu_min <= mu_max * 1e-12 {
        log::warn!(
            "ill-conditioned design: cond(G) = {:.3e} exceeds 1e12",
            mu_max / mu_min.max(f64::MIN_POSITIVE)
        );
    }

    let z_tilde = prior.z_tilde();
    let mut y = Vec::with_capacity(n);
    let mut s = Vec::with_capacity(n);
    let mut q = Vec::with_capacity(n);
    let mut c = Vec::with_capacity(n);
    for i in 0..n {
        let gi = g_vecs.column(i);
        let e_dot = gi.sum();
        let mut yi = DVector::zeros(prior.dim_z());
        for (l, z) in design.points().iter().enumerate() {
            yi += z * gi[l];
        }
        yi -= z_tilde * e_dot;
        let qi = prior.w_z().solve(&prior.m_z().apply(&yi));
        let ci = prior.m_z().apply(&qi);
        let si = e_dot - ci.dot(z_tilde);
        y.push(yi);
        s.push(si);
        q.push(qi);
        c.push(ci);
    }

    Ok(PosteriorFactors {
        mu,
        g_vecs,
        y,
        s,
        alpha_d,
        prior,
        design,
        q,
        c,
    })
}

impl PosteriorFactors {
    pub fn mu(&self) -> &DVector<f64> {
        &self.mu
    }

    pub fn g_vectors(&self) -> &DMatrix<f64> {
        &self.g_vecs
    }

    pub fn y(&self) -> &[DVector<f64>] {
        &self.y
    }

    pub fn s(&self) -> &[f64] {
        &self.s
    }

    pub fn alpha_d(&self) -> f64 {
        self.alpha_d
    }

    pub fn prior(&self) -> &Arc<PriorFactor> {
        &self.prior
    }

    pub fn design(&self) -> &Arc<DesignSet> {
        &self.design
    }

    fn n(&self) -> usize {
        self.design.len()
    }

    /// Data-reduction term applied to a parameter vector:
    /// `theta -> Psi diag(k_ij) Psi^T theta` where the caller supplies the
    /// combined coefficient `k_ij = coeff(mu_i, lambda_j)` which already
    /// absorbs both `1/sqrt(mu_i lambda_j)` normalizations.
    fn reduction_apply(
        &self,
        theta: &DiscrepancyParams,
        coeff: impl Fn(f64, f64) -> f64,
    ) -> DiscrepancyParams {
        let prior = &self.prior;
        let x = prior.x();
        let lambda = prior.lambda();
        let n_u = prior.dim_u();
        let n_z = prior.dim_z();
        let mut out = DiscrepancyParams::zeros(n_u, n_z);
        for i in 0..self.n() {
            let u_i = &theta.intercept * self.s[i] + &theta.slope * &self.q[i];
            let mut w = x.transpose() * u_i;
            for j in 0..n_u {
                w[j] *= coeff(self.mu[i], lambda[j]);
            }
            let xw = x * w;
            out.intercept += &xw * self.s[i];
            out.slope += xw * self.q[i].transpose();
        }
        out
    }

    /// MAP estimate `theta_bar = (W_theta^{-1} - Psi D Psi^T) A^T W_d d`.
    pub fn map_estimate(&self, data: &DiscrepancyData) -> Result<DiscrepancyParams> {
        if data.len() != self.n() {
            return Err(Error::DimensionMismatch(format!(
                "{} data values for {} design points",
                data.len(),
                self.n()
            )));
        }
        let prior = &self.prior;
        let mut rhs = DiscrepancyParams::zeros(prior.dim_u(), prior.dim_z());
        for (z, d) in self.design.points().iter().zip(&data.values) {
            if d.len() != prior.dim_u() {
                return Err(Error::DimensionMismatch(
                    "data value dimension disagrees with M_u".into(),
                ));
            }
            let w = prior.m_u().apply(d) / self.alpha_d;
            rhs = rhs.add(&apply_a_transpose(z, &w, prior.m_z())?);
        }
        let prior_part = prior.w_theta_inv_apply(&rhs)?;
        let alpha_d = self.alpha_d;
        let reduction = self.reduction_apply(&rhs, |mu, lam| 1.0 / (lam * (mu + alpha_d * lam)));
        Ok(prior_part.sub(&reduction))
    }

    /// Exact posterior draw `theta_bar + L^{-T}(xi - Q(I - (I-D)^{1/2})Q^T xi)`
    /// with `Q = L^T Psi`, given a standard-normal parameter-shaped `xi`.
    pub fn posterior_sample(
        &self,
        map: &DiscrepancyParams,
        noise: &DiscrepancyParams,
    ) -> Result<DiscrepancyParams> {
        let prior = &self.prior;
        let eta = prior.apply_l(noise)?;
        let alpha_d = self.alpha_d;
        // Combined coefficient of Psi (1 - sqrt(1-D)) Psi^T: guard mu ~ 0,
        // where the data carries no information and the factor vanishes.
        let correction = self.reduction_apply(&eta, |mu, lam| {
            if mu <= 0.0 {
                return 0.0;
            }
            let d = mu / (mu + alpha_d * lam);
            (1.0 - (1.0 - d).sqrt()) / (mu * lam)
        });
        let inner = noise.sub(&prior.apply_l_t(&correction)?);
        Ok(map.add(&prior.apply_l_inv_t(&inner)?))
    }

    /// Trace table `T(mu) = sum_j (x_j^T M_u x_j) / (lambda_j (mu + alpha_d lambda_j))`.
    pub fn trace_table(&self, mu: f64) -> f64 {
        trace_table(
            self.prior.lambda(),
            self.prior.x_mass_norms(),
            self.alpha_d,
            mu,
        )
    }

    /// Pushforward variance `tr(Sigma_delta(z) M_u)` at a fixed `z`, split as
    /// prior term minus data-reduction term.
    pub fn pushforward_trace(&self, z: &DVector<f64>) -> Result<f64> {
        let prior = &self.prior;
        if z.len() != prior.dim_z() {
            return Err(Error::DimensionMismatch(
                "evaluation point dimension disagrees with M_z".into(),
            ));
        }
        let centered = z - prior.z_tilde();
        let c_applied = prior
            .m_z()
            .apply(&prior.w_z().solve(&prior.m_z().apply(&centered)));
        let g_z = 1.0 + centered.dot(&c_applied);
        let lambda = prior.lambda();
        let xmx = prior.x_mass_norms();
        let prior_trace: f64 = (0..prior.dim_u()).map(|j| xmx[j] / lambda[j]).sum();
        let mut reduction = 0.0;
        for i in 0..self.n() {
            let r = self.s[i] + self.c[i].dot(z);
            reduction += r * r * self.trace_table(self.mu[i]);
        }
        Ok(g_z * prior_trace - reduction)
    }
}

pub(crate) fn trace_table(lambda: &DVector<f64>, xmx: &DVector<f64>, alpha_d: f64, mu: f64) -> f64 {
    lambda
        .iter()
        .zip(xmx.iter())
        .map(|(&lam, &m)| m / (lam * (mu + alpha_d * lam)))
        .sum()
}
