//! Low-fidelity optimization, Hessian projection, and pseudo-time continuation
//! of the post-optimality solution update.
//!
//! The parameterized objective is `J(S~(z) + delta(z, theta), z)`; problems
//! expose its exact first and second derivatives through [`OptProblem`]. The
//! continuation scheme integrates the minimizer along the homotopy path
//! `theta(t) = t * theta_bar` with a forward-Euler predictor and Newton
//! correction of the projected optimality residual.

use std::sync::Arc;

use nalgebra::{Cholesky, DMatrix, DVector};

use crate::discrepancy::DiscrepancyParams;
use crate::error::{Error, Result};
use crate::spaces::{generalized_eig, SpdOperator};

/// Interface to a parameterized optimization problem built on a low-fidelity
/// solver. Implementations must be reentrant: no mutable state across calls.
pub trait OptProblem {
    fn dim_u(&self) -> usize;
    fn dim_z(&self) -> usize;
    fn mass_z(&self) -> &Arc<SpdOperator>;
    fn mass_u(&self) -> &Arc<SpdOperator>;

    /// Low-fidelity state solve `S~(z)`.
    fn lowfi_solve(&self, z: &DVector<f64>) -> Result<DVector<f64>>;

    /// Objective `J(u, z)` for a given state.
    fn objective(&self, u: &DVector<f64>, z: &DVector<f64>) -> f64;

    /// Gradient of `J(S~(z) + delta(z, theta), z)` with respect to `z`.
    fn composite_gradient(
        &self,
        z: &DVector<f64>,
        theta: &DiscrepancyParams,
    ) -> Result<DVector<f64>>;

    /// Hessian-vector product of the composite objective in `z`.
    fn composite_hvp(
        &self,
        z: &DVector<f64>,
        theta: &DiscrepancyParams,
        v: &DVector<f64>,
    ) -> Result<DVector<f64>>;

    /// Directional derivative of `composite_gradient` in `theta` along `dtheta`.
    fn mixed_apply(
        &self,
        z: &DVector<f64>,
        theta: &DiscrepancyParams,
        dtheta: &DiscrepancyParams,
    ) -> Result<DVector<f64>>;

    /// Composite objective value.
    fn composite_objective(&self, z: &DVector<f64>, theta: &DiscrepancyParams) -> Result<f64> {
        let delta = crate::discrepancy::eval_delta(theta, z, self.mass_z())?;
        let u = self.lowfi_solve(z)? + delta;
        Ok(self.objective(&u, z))
    }
}

/// Pairing of high- and low-fidelity solution operators over the same
/// composite-objective interface.
pub trait FidelityPair: OptProblem {
    fn hifi_solve(&self, z: &DVector<f64>) -> Result<DVector<f64>>;

    /// Objective evaluated on the high-fidelity state (diagnostic).
    fn hifi_objective(&self, z: &DVector<f64>) -> Result<f64> {
        let u = self.hifi_solve(z)?;
        Ok(self.objective(&u, z))
    }
}

/// Truncated Hessian subspace `V` with `V^T W_z V = I` and the retained
/// generalized eigenvalues; the projector is `P = V V^T W_z`.
#[derive(Debug, Clone)]
pub struct Projector {
    v: DMatrix<f64>,
    rho: DVector<f64>,
    w_z: Arc<SpdOperator>,
}

impl Projector {
    pub fn new(v: DMatrix<f64>, rho: DVector<f64>, w_z: Arc<SpdOperator>) -> Result<Self> {
        let r = v.ncols();
        if rho.len() != r || v.nrows() != w_z.dim() {
            return Err(Error::DimensionMismatch(
                "projector pieces disagree in dimension".into(),
            ));
        }
        let gram = v.transpose() * w_z.matrix() * &v;
        if (&gram - DMatrix::identity(r, r)).norm() > 1e-10 * (r as f64).sqrt() {
            return Err(Error::InvalidArgument(
                "projector basis is not W_z-orthonormal".into(),
            ));
        }
        for j in 1..r {
            if rho[j] > rho[j - 1] + 1e-12 * rho[0].abs() {
                return Err(Error::InvalidArgument(
                    "projector eigenvalues must be descending".into(),
                ));
            }
        }
        if rho.iter().any(|&x| x <= 0.0) {
            return Err(Error::IndefiniteHessian(
                "retained eigenvalues must be positive".into(),
            ));
        }
        Ok(Self { v, rho, w_z })
    }

    pub fn rank(&self) -> usize {
        self.v.ncols()
    }

    pub fn v(&self) -> &DMatrix<f64> {
        &self.v
    }

    pub fn rho(&self) -> &DVector<f64> {
        &self.rho
    }

    pub fn w_z(&self) -> &Arc<SpdOperator> {
        &self.w_z
    }

    /// `P v = V V^T W_z v`.
    pub fn apply(&self, x: &DVector<f64>) -> DVector<f64> {
        &self.v * (self.v.transpose() * self.w_z.apply(x))
    }

    /// Subspace coordinates of `z - z_tilde`: `b = V^T W_z (z - z_tilde)`.
    pub fn coords(&self, z: &DVector<f64>, z_tilde: &DVector<f64>) -> DVector<f64> {
        self.v.transpose() * self.w_z.apply(&(z - z_tilde))
    }

    pub fn lift(&self, z_tilde: &DVector<f64>, b: &DVector<f64>) -> DVector<f64> {
        z_tilde + &self.v * b
    }
}

/// How a truncation rank is chosen.
#[derive(Debug, Clone, Copy)]
pub enum RankSpec {
    Fixed(usize),
    /// Smallest `r` with `rho_{r+1} <= tol * rho_1`, capped.
    Auto { tol: f64, cap: usize },
}

impl Default for RankSpec {
    fn default() -> Self {
        RankSpec::Auto {
            tol: 1e-3,
            cap: 25,
        }
    }
}

/// Assemble the dense composite Hessian at `(z, theta)` column by column from
/// Hessian-vector products.
pub fn assemble_hessian<P: OptProblem + ?Sized>(
    problem: &P,
    z: &DVector<f64>,
    theta: &DiscrepancyParams,
) -> Result<DMatrix<f64>> {
    let n = problem.dim_z();
    let mut h = DMatrix::zeros(n, n);
    let mut e = DVector::zeros(n);
    for j in 0..n {
        e[j] = 1.0;
        h.set_column(j, &problem.composite_hvp(z, theta, &e)?);
        e[j] = 0.0;
    }
    Ok((&h + h.transpose()) * 0.5)
}

/// Top-rank generalized eigenpairs of the low-fidelity Hessian against `W_z`,
/// assembled densely at a converged minimizer.
pub fn hessian_projector<P: OptProblem + ?Sized>(
    problem: &P,
    z_tilde: &DVector<f64>,
    w_z: &Arc<SpdOperator>,
    rank: RankSpec,
) -> Result<Projector> {
    let n = problem.dim_z();
    let zero = DiscrepancyParams::zeros(problem.dim_u(), n);
    let h = assemble_hessian(problem, z_tilde, &zero)?;
    let (probe, cap) = match rank {
        RankSpec::Fixed(r) => (r, r),
        RankSpec::Auto { cap, .. } => (n.min(cap + 1).max(1), cap),
    };
    let pairs = generalized_eig(&h, w_z, probe)?;
    let r = match rank {
        RankSpec::Fixed(r) => r,
        RankSpec::Auto { tol, .. } => {
            let rho1 = pairs.values()[0];
            let mut r = probe;
            for j in 1..probe {
                if pairs.values()[j] <= tol * rho1 {
                    r = j;
                    break;
                }
            }
            r.min(cap).max(1)
        }
    };
    let v = pairs.vectors().columns(0, r).into_owned();
    let rho = pairs.values().rows(0, r).into_owned();
    if rho.iter().any(|&x| x <= 0.0) {
        return Err(Error::IndefiniteHessian(format!(
            "retained eigenvalue is non-positive (smallest retained {:.3e})",
            rho[r - 1]
        )));
    }
    Projector::new(v, rho, Arc::clone(w_z))
}

/// Newton minimization with backtracking line search and a Levenberg-style
/// shift on indefinite Hessians. Convergence is declared in the dual norm
/// induced by `dual_metric`.
pub(crate) fn newton_argmin(
    z0: &DVector<f64>,
    tol: f64,
    max_iter: usize,
    dual_metric: &SpdOperator,
    shift_metric: &DMatrix<f64>,
    mut obj: impl FnMut(&DVector<f64>) -> Result<f64>,
    mut grad: impl FnMut(&DVector<f64>) -> Result<DVector<f64>>,
    mut hess: impl FnMut(&DVector<f64>) -> Result<DMatrix<f64>>,
) -> Result<DVector<f64>> {
    let mut z = z0.clone();
    let mut g = grad(&z)?;
    for _it in 0..max_iter {
        if dual_metric.dual_norm(&g) <= tol {
            return Ok(z);
        }
        let h = hess(&z)?;
        let mut tau = 0.0;
        let chol = loop {
            let shifted = if tau > 0.0 {
                &h + shift_metric * tau
            } else {
                h.clone()
            };
            match Cholesky::new(shifted) {
                Some(c) => break c,
                None => {
                    if tau == 0.0 {
                        log::warn!("indefinite Hessian encountered; applying Levenberg shift");
                        tau = 1e-8;
                    } else {
                        tau *= 10.0;
                    }
                    if tau > 1e12 {
                        return Err(Error::IndefiniteHessian(
                            "shift exceeded 1e12 without reaching positive definiteness".into(),
                        ));
                    }
                }
            }
        };
        let step = chol.solve(&(-&g));
        let f0 = obj(&z)?;
        let slope = g.dot(&step);
        let mut t = 1.0;
        let mut accepted = false;
        for _ in 0..40 {
            let cand = &z + &step * t;
            if let Ok(f) = obj(&cand) {
                if f <= f0 + 1e-4 * t * slope {
                    z = cand;
                    accepted = true;
                    break;
                }
            }
            t *= 0.5;
        }
        if !accepted {
            return Err(Error::NoConvergence {
                iterations: _it,
                residual: dual_metric.dual_norm(&g),
            });
        }
        g = grad(&z)?;
    }
    let res = dual_metric.dual_norm(&g);
    if res <= tol {
        Ok(z)
    } else {
        Err(Error::NoConvergence {
            iterations: max_iter,
            residual: res,
        })
    }
}

/// Newton solve of the low-fidelity problem `min_z J(S~(z), z)` from `z0`,
/// converged when the `M_z^{-1}`-weighted dual norm of the gradient is at most
/// `tol`. Reports (without failing) an indefinite Hessian at the solution.
pub fn solve_lowfi<P: OptProblem + ?Sized>(
    problem: &P,
    z0: &DVector<f64>,
    tol: f64,
) -> Result<DVector<f64>> {
    let zero = DiscrepancyParams::zeros(problem.dim_u(), problem.dim_z());
    let m_z = Arc::clone(problem.mass_z());
    let shift = m_z.matrix().clone();
    let z = newton_argmin(
        z0,
        tol,
        100,
        &m_z,
        &shift,
        |z| problem.composite_objective(z, &zero),
        |z| problem.composite_gradient(z, &zero),
        |z| assemble_hessian(problem, z, &zero),
    )?;
    // Second-order check at the solution.
    let h = assemble_hessian(problem, &z, &zero)?;
    if Cholesky::new(h).is_none() {
        log::warn!("low-fidelity Hessian is indefinite at the returned minimizer");
    }
    Ok(z)
}

/// Corrector policy for the continuation scheme.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CorrectorMode {
    /// Pure forward-Euler prediction.
    Off,
    /// One Newton correction per step (the textbook Euler-Newton scheme).
    Single,
    /// Newton corrections iterated to `corrector_tol` (at most 10).
    Tolerance,
}

#[derive(Debug, Clone, Copy)]
pub struct ContinuationOptions {
    pub n_steps: usize,
    pub corrector_tol: f64,
    pub mode: CorrectorMode,
}

impl Default for ContinuationOptions {
    fn default() -> Self {
        Self {
            n_steps: 3,
            corrector_tol: 1e-10,
            mode: CorrectorMode::Tolerance,
        }
    }
}

/// Outcome of a continuation run.
#[derive(Debug, Clone)]
pub struct ContinuationResult {
    pub b_bar: DVector<f64>,
    pub z_bar: DVector<f64>,
    /// `(t_n, b_n)` along the path, including the initial `(0, 0)`.
    pub trajectory: Vec<(f64, DVector<f64>)>,
    /// Projected gradient norm after the corrector of each step.
    pub corrector_residuals: Vec<f64>,
}

struct ProjectedDerivatives<'a, P: OptProblem + ?Sized> {
    problem: &'a P,
    projector: &'a Projector,
    z_tilde: &'a DVector<f64>,
}

impl<'a, P: OptProblem + ?Sized> ProjectedDerivatives<'a, P> {
    fn z_at(&self, b: &DVector<f64>) -> DVector<f64> {
        self.projector.lift(self.z_tilde, b)
    }

    fn grad(&self, b: &DVector<f64>, theta: &DiscrepancyParams) -> Result<DVector<f64>> {
        let z = self.z_at(b);
        Ok(self.projector.v().transpose() * self.problem.composite_gradient(&z, theta)?)
    }

    fn hessian(&self, b: &DVector<f64>, theta: &DiscrepancyParams) -> Result<DMatrix<f64>> {
        let z = self.z_at(b);
        let r = self.projector.rank();
        let mut h = DMatrix::zeros(r, r);
        for j in 0..r {
            let vj = self.projector.v().column(j).into_owned();
            let hv = self.problem.composite_hvp(&z, theta, &vj)?;
            h.set_column(j, &(self.projector.v().transpose() * hv));
        }
        Ok((&h + h.transpose()) * 0.5)
    }

    fn mixed(
        &self,
        b: &DVector<f64>,
        theta: &DiscrepancyParams,
        dtheta: &DiscrepancyParams,
    ) -> Result<DVector<f64>> {
        let z = self.z_at(b);
        Ok(self.projector.v().transpose() * self.problem.mixed_apply(&z, theta, dtheta)?)
    }

    fn chol(&self, b: &DVector<f64>, theta: &DiscrepancyParams) -> Result<Cholesky<f64, nalgebra::Dyn>> {
        Cholesky::new(self.hessian(b, theta)?).ok_or_else(|| {
            Error::IndefiniteHessian("projected Hessian along the continuation path".into())
        })
    }
}

/// One linearized post-optimality update: solves the projected system
/// `(V^T H V) db = -V^T B theta` at the low-fidelity minimizer and returns
/// `z_tilde + V db`. Identical to a single corrector-free continuation step.
pub fn linear_update<P: OptProblem + ?Sized>(
    projector: &Projector,
    problem: &P,
    z_tilde: &DVector<f64>,
    theta: &DiscrepancyParams,
) -> Result<DVector<f64>> {
    let pd = ProjectedDerivatives {
        problem,
        projector,
        z_tilde,
    };
    let zero = DiscrepancyParams::zeros(problem.dim_u(), problem.dim_z());
    let b0 = DVector::zeros(projector.rank());
    let rhs = pd.mixed(&b0, &zero, theta)?;
    let chol = pd.chol(&b0, &zero)?;
    let db = chol.solve(&(-rhs));
    Ok(pd.z_at(&db))
}

/// Euler-Newton continuation from `theta = 0` to `theta_bar` over `n_steps`
/// uniform pseudo-time steps.
pub fn continuation_update<P: OptProblem + ?Sized>(
    problem: &P,
    projector: &Projector,
    z_tilde: &DVector<f64>,
    theta_bar: &DiscrepancyParams,
    opts: &ContinuationOptions,
) -> Result<ContinuationResult> {
    if opts.n_steps == 0 {
        return Err(Error::InvalidArgument(
            "continuation needs at least one step".into(),
        ));
    }
    let pd = ProjectedDerivatives {
        problem,
        projector,
        z_tilde,
    };
    let r = projector.rank();
    let dt = 1.0 / opts.n_steps as f64;
    let mut b = DVector::zeros(r);
    let mut trajectory = vec![(0.0, b.clone())];
    let mut residuals = Vec::with_capacity(opts.n_steps);

    for n in 0..opts.n_steps {
        let t_n = n as f64 * dt;
        let t_next = (n + 1) as f64 * dt;
        let theta_n = theta_bar.scale(t_n);
        let theta_next = theta_bar.scale(t_next);

        // Predictor: forward Euler on the sensitivity ODE.
        let rhs = pd.mixed(&b, &theta_n, theta_bar)?;
        let chol = pd.chol(&b, &theta_n)?;
        b -= chol.solve(&rhs) * dt;

        // Corrector: Newton on the projected optimality residual at theta_{n+1}.
        let mut g = pd.grad(&b, &theta_next)?;
        match opts.mode {
            CorrectorMode::Off => {}
            CorrectorMode::Single => {
                let chol = pd.chol(&b, &theta_next)?;
                b -= chol.solve(&g);
                g = pd.grad(&b, &theta_next)?;
            }
            CorrectorMode::Tolerance => {
                let mut grow_streak = 0usize;
                let mut last_norm = g.norm();
                let mut iters = 0usize;
                while g.norm() > opts.corrector_tol {
                    if iters >= 10 {
                        return Err(Error::CorrectorDivergence {
                            step: n + 1,
                            grad_norm: g.norm(),
                        });
                    }
                    let chol = pd.chol(&b, &theta_next)?;
                    b -= chol.solve(&g);
                    g = pd.grad(&b, &theta_next)?;
                    iters += 1;
                    if g.norm() > last_norm {
                        grow_streak += 1;
                        if grow_streak >= 3 {
                            return Err(Error::CorrectorDivergence {
                                step: n + 1,
                                grad_norm: g.norm(),
                            });
                        }
                    } else {
                        grow_streak = 0;
                    }
                    last_norm = g.norm();
                }
            }
        }
        residuals.push(g.norm());
        trajectory.push((t_next, b.clone()));
    }

    let z_bar = pd.z_at(&b);
    Ok(ContinuationResult {
        b_bar: b,
        z_bar,
        trajectory,
        corrector_residuals: residuals,
    })
}

/// Continuation driven by a posterior sample instead of the posterior mean;
/// pushes the sample forward to an optimal-solution sample.
pub fn pushforward_sample_update<P: OptProblem + ?Sized>(
    problem: &P,
    projector: &Projector,
    z_tilde: &DVector<f64>,
    theta_sample: &DiscrepancyParams,
    opts: &ContinuationOptions,
) -> Result<ContinuationResult> {
    continuation_update(problem, projector, z_tilde, theta_sample, opts)
}

/// Full Newton solve of the projected problem `min_b J(z_tilde + V b, theta)`,
/// independent of the continuation path. Serves as the re-optimization oracle.
pub fn projected_argmin<P: OptProblem + ?Sized>(
    problem: &P,
    projector: &Projector,
    z_tilde: &DVector<f64>,
    theta: &DiscrepancyParams,
    b0: &DVector<f64>,
    tol: f64,
) -> Result<DVector<f64>> {
    let pd = ProjectedDerivatives {
        problem,
        projector,
        z_tilde,
    };
    let r = projector.rank();
    let identity = SpdOperator::new(DMatrix::identity(r, r)).expect("identity is SPD");
    let shift = DMatrix::identity(r, r);
    newton_argmin(
        b0,
        tol,
        200,
        &identity,
        &shift,
        |b| problem.composite_objective(&pd.z_at(b), theta),
        |b| pd.grad(b, theta),
        |b| pd.hessian(b, theta),
    )
}

#[cfg(test)]
pub(crate) mod test_problems {
    use super::*;

    /// Synthetic problem with state map `S~(z) = Q z + eps (z^T M_z z) b` and
    /// objective `1/2 ||u - t||_{M_u}^2 + gamma/2 ||z||_{M_z}^2`. All
    /// derivatives in closed form; `eps = 0` makes it exactly quadratic.
    pub struct SyntheticProblem {
        pub q: DMatrix<f64>,
        pub b: DVector<f64>,
        pub eps: f64,
        pub target: DVector<f64>,
        pub gamma: f64,
        pub m_u: Arc<SpdOperator>,
        pub m_z: Arc<SpdOperator>,
    }

    impl SyntheticProblem {
        fn jac(&self, z: &DVector<f64>, theta: &DiscrepancyParams) -> DMatrix<f64> {
            let mz = self.m_z.apply(z);
            &self.q
                + &self.b * (mz.transpose() * 2.0 * self.eps)
                + &theta.slope * self.m_z.matrix()
        }

        fn state(&self, z: &DVector<f64>) -> DVector<f64> {
            &self.q * z + &self.b * (self.eps * self.m_z.inner(z, z))
        }
    }

    impl OptProblem for SyntheticProblem {
        fn dim_u(&self) -> usize {
            self.m_u.dim()
        }

        fn dim_z(&self) -> usize {
            self.m_z.dim()
        }

        fn mass_z(&self) -> &Arc<SpdOperator> {
            &self.m_z
        }

        fn mass_u(&self) -> &Arc<SpdOperator> {
            &self.m_u
        }

        fn lowfi_solve(&self, z: &DVector<f64>) -> Result<DVector<f64>> {
            Ok(self.state(z))
        }

        fn objective(&self, u: &DVector<f64>, z: &DVector<f64>) -> f64 {
            let e = u - &self.target;
            0.5 * self.m_u.inner(&e, &e) + 0.5 * self.gamma * self.m_z.inner(z, z)
        }

        fn composite_gradient(
            &self,
            z: &DVector<f64>,
            theta: &DiscrepancyParams,
        ) -> Result<DVector<f64>> {
            let e = self.state(z) + crate::discrepancy::eval_delta(theta, z, &self.m_z)?
                - &self.target;
            let me = self.m_u.apply(&e);
            Ok(self.jac(z, theta).transpose() * me + self.m_z.apply(z) * self.gamma)
        }

        fn composite_hvp(
            &self,
            z: &DVector<f64>,
            theta: &DiscrepancyParams,
            v: &DVector<f64>,
        ) -> Result<DVector<f64>> {
            let e = self.state(z) + crate::discrepancy::eval_delta(theta, z, &self.m_z)?
                - &self.target;
            let jac = self.jac(z, theta);
            let jv = &jac * v;
            let curvature = self.m_z.apply(v) * (2.0 * self.eps * self.b.dot(&self.m_u.apply(&e)));
            Ok(jac.transpose() * self.m_u.apply(&jv) + curvature + self.m_z.apply(v) * self.gamma)
        }

        fn mixed_apply(
            &self,
            z: &DVector<f64>,
            theta: &DiscrepancyParams,
            dtheta: &DiscrepancyParams,
        ) -> Result<DVector<f64>> {
            let e = self.state(z) + crate::discrepancy::eval_delta(theta, z, &self.m_z)?
                - &self.target;
            let ddelta = crate::discrepancy::eval_delta(dtheta, z, &self.m_z)?;
            Ok(self.m_z.matrix() * dtheta.slope.transpose() * self.m_u.apply(&e)
                + self.jac(z, theta).transpose() * self.m_u.apply(&ddelta))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::test_problems::SyntheticProblem;
    use super::*;
    use crate::test_oracles::random_spd;
    use approx::assert_relative_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn make_problem(n: usize, eps: f64, gamma: f64, seed: u64) -> SyntheticProblem {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let m_u = Arc::new(random_spd(n, &mut rng));
        let m_z = Arc::new(random_spd(n, &mut rng));
        let q = DMatrix::from_fn(n, n, |_, _| rng.gen_range(-1.0..1.0))
            + DMatrix::identity(n, n) * 1.5;
        let b = DVector::from_fn(n, |_, _| rng.gen_range(-1.0..1.0));
        let target = DVector::from_fn(n, |_, _| rng.gen_range(-1.0..1.0));
        SyntheticProblem {
            q,
            b,
            eps,
            target,
            gamma,
            m_u,
            m_z,
        }
    }

    fn random_theta(n_u: usize, n_z: usize, scale: f64, rng: &mut impl Rng) -> DiscrepancyParams {
        DiscrepancyParams {
            intercept: DVector::from_fn(n_u, |_, _| rng.gen_range(-scale..scale)),
            slope: DMatrix::from_fn(n_u, n_z, |_, _| rng.gen_range(-scale..scale)),
        }
    }

    fn fd_directional(
        f: impl Fn(&DVector<f64>) -> f64,
        z: &DVector<f64>,
        v: &DVector<f64>,
        h: f64,
    ) -> f64 {
        (f(&(z + v * h)) - f(&(z - v * h))) / (2.0 * h)
    }

    #[test]
    fn synthetic_derivatives_match_finite_differences() {
        let p = make_problem(5, 0.3, 1e-2, 1);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let theta = random_theta(5, 5, 0.4, &mut rng);
        let z = DVector::from_fn(5, |_, _| rng.gen_range(-1.0..1.0));
        let v = DVector::from_fn(5, |_, _| rng.gen_range(-1.0..1.0));

        let g = p.composite_gradient(&z, &theta).unwrap();
        let fd = fd_directional(
            |zz| p.composite_objective(zz, &theta).unwrap(),
            &z,
            &v,
            1e-5,
        );
        assert_relative_eq!(g.dot(&v), fd, max_relative = 1e-6);

        let hv = p.composite_hvp(&z, &theta, &v).unwrap();
        let w = DVector::from_fn(5, |_, _| rng.gen_range(-1.0..1.0));
        let fd_h = fd_directional(
            |zz| p.composite_gradient(zz, &theta).unwrap().dot(&w),
            &z,
            &v,
            1e-5,
        );
        assert_relative_eq!(hv.dot(&w), fd_h, max_relative = 1e-5);

        // mixed derivative against finite differences in theta
        let dtheta = random_theta(5, 5, 0.5, &mut rng);
        let h = 1e-6;
        let gp = p
            .composite_gradient(&z, &theta.add(&dtheta.scale(h)))
            .unwrap();
        let gm = p
            .composite_gradient(&z, &theta.add(&dtheta.scale(-h)))
            .unwrap();
        let fd_mixed = (gp - gm) / (2.0 * h);
        let mixed = p.mixed_apply(&z, &theta, &dtheta).unwrap();
        assert!((mixed - &fd_mixed).norm() / fd_mixed.norm() < 1e-6);
    }

    #[test]
    fn quadratic_objective_converges_in_one_step() {
        // J(z) = 1/2 ||z - c||_{M_z}^2 via Q = I, target c, gamma = 0.
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let m = Arc::new(random_spd(4, &mut rng));
        let c = DVector::from_fn(4, |_, _| rng.gen_range(-1.0..1.0));
        let p = SyntheticProblem {
            q: DMatrix::identity(4, 4),
            b: DVector::zeros(4),
            eps: 0.0,
            target: c.clone(),
            gamma: 0.0,
            m_u: Arc::clone(&m),
            m_z: Arc::clone(&m),
        };
        let z = solve_lowfi(&p, &DVector::zeros(4), 1e-12).unwrap();
        assert!((z - &c).norm() < 1e-10);

        // started at the solution: returns input unchanged
        let z2 = solve_lowfi(&p, &c, 1e-12).unwrap();
        assert_eq!(z2, c);
    }

    #[test]
    fn solve_lowfi_reaches_stated_tolerance_on_nonlinear_problem() {
        let p = make_problem(6, 0.2, 1e-2, 4);
        let z = solve_lowfi(&p, &DVector::zeros(6), 1e-11).unwrap();
        let zero = DiscrepancyParams::zeros(6, 6);
        let g = p.composite_gradient(&z, &zero).unwrap();
        assert!(p.mass_z().dual_norm(&g) <= 1e-11);
    }

    #[test]
    fn projector_identity_pencil_and_idempotence() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let p = make_problem(5, 0.1, 1e-2, 5);
        let w_z = Arc::new(random_spd(5, &mut rng));
        let z_tilde = solve_lowfi(&p, &DVector::zeros(5), 1e-10).unwrap();
        let proj = hessian_projector(&p, &z_tilde, &w_z, RankSpec::Fixed(5)).unwrap();
        // full rank: P acts as identity
        for _ in 0..3 {
            let v = DVector::from_fn(5, |_, _| rng.gen_range(-1.0..1.0));
            assert!((proj.apply(&v) - &v).norm() / v.norm() < 1e-10);
        }
        let truncated = hessian_projector(&p, &z_tilde, &w_z, RankSpec::Fixed(2)).unwrap();
        let v = DVector::from_fn(5, |_, _| rng.gen_range(-1.0..1.0));
        let once = truncated.apply(&v);
        let twice = truncated.apply(&once);
        assert!((twice - &once).norm() <= 1e-12 * once.norm().max(1.0));
    }

    #[test]
    fn projector_identity_when_hessian_equals_metric() {
        // H = W_z: all eigenvalues 1 and P V = V.
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let m = Arc::new(random_spd(4, &mut rng));
        let w_z = Arc::clone(&m);
        // Q^T M_u Q = W_z with Q = chol(W_z)^T and M_u = I: build directly.
        let ident = Arc::new(SpdOperator::new(DMatrix::identity(4, 4)).unwrap());
        let p = SyntheticProblem {
            q: m.chol_l().transpose(),
            b: DVector::zeros(4),
            eps: 0.0,
            target: DVector::zeros(4),
            gamma: 0.0,
            m_u: Arc::clone(&ident),
            m_z: Arc::clone(&ident),
        };
        let proj = hessian_projector(&p, &DVector::zeros(4), &w_z, RankSpec::Fixed(3)).unwrap();
        for v in proj.rho().iter() {
            assert_relative_eq!(*v, 1.0, epsilon = 1e-9);
        }
        let pv = proj.apply(&proj.v().column(1).into_owned());
        assert!((pv - proj.v().column(1)).norm() < 1e-9);
    }

    #[test]
    fn linear_update_basics() {
        let p = make_problem(5, 0.25, 1e-2, 7);
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let w_z = Arc::new(random_spd(5, &mut rng));
        let z_tilde = solve_lowfi(&p, &DVector::zeros(5), 1e-11).unwrap();
        let proj = hessian_projector(&p, &z_tilde, &w_z, RankSpec::Fixed(4)).unwrap();

        let zero = DiscrepancyParams::zeros(5, 5);
        let z_same = linear_update(&proj, &p, &z_tilde, &zero).unwrap();
        assert!((z_same.clone() - &z_tilde).norm() < 1e-12);

        // additive in theta
        let t1 = random_theta(5, 5, 0.3, &mut rng);
        let t2 = random_theta(5, 5, 0.3, &mut rng);
        let u1 = linear_update(&proj, &p, &z_tilde, &t1).unwrap() - &z_tilde;
        let u2 = linear_update(&proj, &p, &z_tilde, &t2).unwrap() - &z_tilde;
        let u12 = linear_update(&proj, &p, &z_tilde, &t1.add(&t2)).unwrap() - &z_tilde;
        assert!((u12.clone() - (&u1 + &u2)).norm() / u12.norm() < 1e-10);
    }

    #[test]
    fn linear_update_matches_reoptimization_direction() {
        // Brute-force oracle: for small eps_scale the re-optimized minimizer
        // displacement divided by eps matches the linear update direction.
        let p = make_problem(5, 0.25, 1e-2, 9);
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let w_z = Arc::new(random_spd(5, &mut rng));
        let z_tilde = solve_lowfi(&p, &DVector::zeros(5), 1e-12).unwrap();
        let proj = hessian_projector(&p, &z_tilde, &w_z, RankSpec::Fixed(5)).unwrap();
        let theta = random_theta(5, 5, 0.5, &mut rng);

        let eps = 1e-5;
        let b_eps = projected_argmin(
            &p,
            &proj,
            &z_tilde,
            &theta.scale(eps),
            &DVector::zeros(5),
            1e-13,
        )
        .unwrap();
        let direction_fd = (proj.lift(&z_tilde, &b_eps) - &z_tilde) / eps;
        let direction = linear_update(&proj, &p, &z_tilde, &theta).unwrap() - &z_tilde;
        assert!(
            (direction.clone() - &direction_fd).norm() / direction.norm() < 1e-3,
            "rel err {}",
            (direction.clone() - &direction_fd).norm() / direction.norm()
        );
    }

    #[test]
    fn continuation_zero_theta_is_stationary() {
        let p = make_problem(5, 0.25, 1e-2, 11);
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let w_z = Arc::new(random_spd(5, &mut rng));
        let z_tilde = solve_lowfi(&p, &DVector::zeros(5), 1e-11).unwrap();
        let proj = hessian_projector(&p, &z_tilde, &w_z, RankSpec::Fixed(3)).unwrap();
        let zero = DiscrepancyParams::zeros(5, 5);
        let res = continuation_update(&p, &proj, &z_tilde, &zero, &Default::default()).unwrap();
        assert!(res.b_bar.norm() < 1e-9);
        assert!((res.z_bar.clone() - &z_tilde).norm() < 1e-8);
    }

    #[test]
    fn single_euler_step_reproduces_linear_update() {
        let p = make_problem(5, 0.3, 1e-2, 13);
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        let w_z = Arc::new(random_spd(5, &mut rng));
        let z_tilde = solve_lowfi(&p, &DVector::zeros(5), 1e-12).unwrap();
        let proj = hessian_projector(&p, &z_tilde, &w_z, RankSpec::Fixed(4)).unwrap();
        let theta = random_theta(5, 5, 0.4, &mut rng);
        let opts = ContinuationOptions {
            n_steps: 1,
            corrector_tol: 1e-10,
            mode: CorrectorMode::Off,
        };
        let res = continuation_update(&p, &proj, &z_tilde, &theta, &opts).unwrap();
        let lin = linear_update(&proj, &p, &z_tilde, &theta).unwrap();
        assert!((res.z_bar.clone() - &lin).norm() <= 1e-12 * lin.norm().max(1.0));
    }

    #[test]
    fn continuation_converges_to_direct_solve() {
        let p = make_problem(5, 0.4, 1e-2, 15);
        let mut rng = ChaCha8Rng::seed_from_u64(16);
        let w_z = Arc::new(random_spd(5, &mut rng));
        let z_tilde = solve_lowfi(&p, &DVector::zeros(5), 1e-12).unwrap();
        let proj = hessian_projector(&p, &z_tilde, &w_z, RankSpec::Fixed(4)).unwrap();
        // Moderate magnitude keeps the Hessian positive definite along the path.
        let theta = random_theta(5, 5, 0.25, &mut rng);

        let b_direct =
            projected_argmin(&p, &proj, &z_tilde, &theta, &DVector::zeros(4), 1e-13).unwrap();

        let mut errs = Vec::new();
        for n_steps in [1usize, 2, 4, 8, 16] {
            let opts = ContinuationOptions {
                n_steps,
                corrector_tol: 1e-10,
                mode: CorrectorMode::Single,
            };
            let res = continuation_update(&p, &proj, &z_tilde, &theta, &opts).unwrap();
            errs.push((res.b_bar - &b_direct).norm());
        }
        for w in errs.windows(2) {
            assert!(
                w[1] <= w[0] + 1e-12,
                "continuation error should be non-increasing: {errs:?}"
            );
        }
        assert!(
            errs[4] < 0.01 * errs[0],
            "16 steps should be far more accurate than 1: {errs:?}"
        );
    }

    #[test]
    fn corrector_residuals_meet_tolerance() {
        let p = make_problem(5, 0.4, 1e-2, 17);
        let mut rng = ChaCha8Rng::seed_from_u64(18);
        let w_z = Arc::new(random_spd(5, &mut rng));
        let z_tilde = solve_lowfi(&p, &DVector::zeros(5), 1e-12).unwrap();
        let proj = hessian_projector(&p, &z_tilde, &w_z, RankSpec::Fixed(4)).unwrap();
        let theta = random_theta(5, 5, 0.5, &mut rng);
        let opts = ContinuationOptions {
            n_steps: 3,
            corrector_tol: 1e-10,
            mode: CorrectorMode::Tolerance,
        };
        let res = continuation_update(&p, &proj, &z_tilde, &theta, &opts).unwrap();
        assert_eq!(res.corrector_residuals.len(), 3);
        for r in &res.corrector_residuals {
            assert!(*r <= 1e-10);
        }
        // z_bar - z_tilde lies in range(V) exactly
        let diff = &res.z_bar - &z_tilde;
        let rec = proj.v() * &res.b_bar;
        assert!((diff - rec).norm() <= 1e-12 * res.b_bar.norm().max(1.0));

        // sample update with the same parameters is identical
        let res2 = pushforward_sample_update(&p, &proj, &z_tilde, &theta, &opts).unwrap();
        assert_eq!(res.z_bar, res2.z_bar);
        // zero sample is stationary
        let res0 = pushforward_sample_update(
            &p,
            &proj,
            &z_tilde,
            &DiscrepancyParams::zeros(5, 5),
            &opts,
        )
        .unwrap();
        assert!((res0.z_bar.clone() - &z_tilde).norm() < 1e-8);
    }

    #[test]
    fn auto_rank_selects_spectral_gap() {
        let p = make_problem(6, 0.0, 1e-6, 19);
        let mut rng = ChaCha8Rng::seed_from_u64(20);
        let w_z = Arc::new(random_spd(6, &mut rng));
        let z_tilde = solve_lowfi(&p, &DVector::zeros(6), 1e-10).unwrap();
        let proj = hessian_projector(
            &p,
            &z_tilde,
            &w_z,
            RankSpec::Auto {
                tol: 1e-3,
                cap: 3,
            },
        )
        .unwrap();
        assert!(proj.rank() >= 1 && proj.rank() <= 3);
    }
}
