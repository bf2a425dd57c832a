//! Nonlinear diffusion-reaction control testbed.
//!
//! State equation `-kappa u'' + R(u) = z` on (0,1) with homogeneous Neumann
//! boundaries, discretized with piecewise-linear finite elements and Gauss
//! quadrature for the reaction terms. The high-fidelity reaction is spatially
//! heterogeneous, `R(u) = (1 + 0.7 sin(2 pi x)) u^2`; the low-fidelity model
//! uses `R~(u) = u^2`. The objective tracks a target state with quadratic
//! regularization. All composite derivatives are exact second-order adjoints.

use std::f64::consts::PI;
use std::sync::Arc;

use nalgebra::DVector;

use crate::discrepancy::{eval_delta, DiscrepancyParams};
use crate::error::{Error, Result};
use crate::postopt::{FidelityPair, OptProblem};
use crate::spaces::{build_grid, mass_matrix, Grid1D, SpdOperator};

use super::{Fidelity, Tridiag};

// 5-point Gauss-Legendre rule on [0, 1].
const GAUSS_PTS: [f64; 5] = [
    0.046910077030668,
    0.230765344947158,
    0.5,
    0.769234655052841,
    0.953089922969332,
];
const GAUSS_WTS: [f64; 5] = [
    0.118463442528095,
    0.239314335249683,
    0.284444444444444,
    0.239314335249683,
    0.118463442528095,
];

pub struct DiffusionReactionProblem {
    grid: Grid1D,
    mass: Arc<SpdOperator>,
    stiff: Tridiag,
    target: DVector<f64>,
    kappa: f64,
    gamma_reg: f64,
}

impl DiffusionReactionProblem {
    pub fn new(n: usize, kappa: f64, gamma_reg: f64) -> Result<Self> {
        if !(kappa > 0.0) || !(gamma_reg > 0.0) {
            return Err(Error::InvalidArgument(
                "kappa and gamma_reg must be positive".into(),
            ));
        }
        let grid = build_grid(n, 0.0, 1.0)?;
        let mass = Arc::new(mass_matrix(&grid));
        let h = grid.spacing();
        let mut stiff = Tridiag::zeros(n);
        for e in 0..n - 1 {
            stiff.diag[e] += 1.0 / h;
            stiff.diag[e + 1] += 1.0 / h;
            stiff.sub[e] -= 1.0 / h;
            stiff.sup[e] -= 1.0 / h;
        }
        let target = grid.sample(|x| 20.0 * (x + 0.5) * (1.3 - x));
        Ok(Self {
            grid,
            mass,
            stiff,
            target,
            kappa,
            gamma_reg,
        })
    }

    pub fn with_defaults() -> Result<Self> {
        Self::new(65, 0.05, 1e-4)
    }

    pub fn grid(&self) -> &Grid1D {
        &self.grid
    }

    pub fn target(&self) -> &DVector<f64> {
        &self.target
    }

    pub fn kappa(&self) -> f64 {
        self.kappa
    }

    pub fn gamma_reg(&self) -> f64 {
        self.gamma_reg
    }

    fn weight(&self, fidelity: Fidelity, x: f64) -> f64 {
        match fidelity {
            Fidelity::High => 1.0 + 0.7 * (2.0 * PI * x).sin(),
            Fidelity::Low => 1.0,
        }
    }

    /// `out_i = int w(x) a_h b_h phi_i dx` assembled with Gauss quadrature.
    fn weighted_product_vector(
        &self,
        fidelity: Fidelity,
        a: &DVector<f64>,
        b: &DVector<f64>,
    ) -> DVector<f64> {
        let n = self.grid.n();
        let h = self.grid.spacing();
        let nodes = self.grid.nodes();
        let mut out = DVector::zeros(n);
        for e in 0..n - 1 {
            for (&xi, &wq) in GAUSS_PTS.iter().zip(GAUSS_WTS.iter()) {
                let x = nodes[e] + h * xi;
                let av = a[e] * (1.0 - xi) + a[e + 1] * xi;
                let bv = b[e] * (1.0 - xi) + b[e + 1] * xi;
                let f = self.weight(fidelity, x) * av * bv * wq * h;
                out[e] += f * (1.0 - xi);
                out[e + 1] += f * xi;
            }
        }
        out
    }

    /// Weighted mass matrix `int 2 w(x) u_h phi_i phi_j dx` (reaction Jacobian).
    fn reaction_jacobian(&self, fidelity: Fidelity, u: &DVector<f64>) -> Tridiag {
        let n = self.grid.n();
        let h = self.grid.spacing();
        let nodes = self.grid.nodes();
        let mut t = Tridiag::zeros(n);
        for e in 0..n - 1 {
            for (&xi, &wq) in GAUSS_PTS.iter().zip(GAUSS_WTS.iter()) {
                let x = nodes[e] + h * xi;
                let uv = u[e] * (1.0 - xi) + u[e + 1] * xi;
                let f = 2.0 * self.weight(fidelity, x) * uv * wq * h;
                t.diag[e] += f * (1.0 - xi) * (1.0 - xi);
                t.diag[e + 1] += f * xi * xi;
                t.sub[e] += f * xi * (1.0 - xi);
                t.sup[e] += f * xi * (1.0 - xi);
            }
        }
        t
    }

    /// Nonlinear residual `F(u) = kappa K u + rho_w(u) - M z`.
    fn residual(&self, fidelity: Fidelity, u: &DVector<f64>, z: &DVector<f64>) -> DVector<f64> {
        let mut r = self.stiff.matvec(u) * self.kappa;
        let n = self.grid.n();
        let h = self.grid.spacing();
        let nodes = self.grid.nodes();
        for e in 0..n - 1 {
            for (&xi, &wq) in GAUSS_PTS.iter().zip(GAUSS_WTS.iter()) {
                let x = nodes[e] + h * xi;
                let uv = u[e] * (1.0 - xi) + u[e + 1] * xi;
                let f = self.weight(fidelity, x) * uv * uv * wq * h;
                r[e] += f * (1.0 - xi);
                r[e + 1] += f * xi;
            }
        }
        r - self.mass.apply(z)
    }

    fn state_jacobian(&self, fidelity: Fidelity, u: &DVector<f64>) -> Tridiag {
        let mut j = self.reaction_jacobian(fidelity, u);
        let n = self.grid.n();
        for i in 0..n {
            j.diag[i] += self.kappa * self.stiff.diag[i];
        }
        for i in 0..n - 1 {
            j.sub[i] += self.kappa * self.stiff.sub[i];
            j.sup[i] += self.kappa * self.stiff.sup[i];
        }
        j
    }

    /// Damped Newton solve of the state equation to dual-norm residual 1e-11.
    pub fn solve_state(&self, fidelity: Fidelity, z: &DVector<f64>) -> Result<DVector<f64>> {
        if z.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument("state forcing is not finite".into()));
        }
        let n = self.grid.n();
        let nodes = self.grid.nodes();
        // Pointwise balance R(u) ~ z gives a robust starting guess.
        let mut u = DVector::from_fn(n, |i, _| {
            (z[i].max(1e-8) / self.weight(fidelity, nodes[i])).sqrt()
        });
        let tol = 1e-11;
        let mut r = self.residual(fidelity, &u, z);
        let mut rnorm = self.mass.dual_norm(&r);
        for _ in 0..100 {
            if rnorm <= tol {
                return Ok(u);
            }
            let j = self.state_jacobian(fidelity, &u);
            let step = j
                .solve(&(-&r))
                .ok_or(Error::NewtonDivergence { residual: rnorm })?;
            let mut t = 1.0;
            let mut accepted = false;
            for _ in 0..40 {
                let cand = &u + &step * t;
                let rc = self.residual(fidelity, &cand, z);
                let rc_norm = self.mass.dual_norm(&rc);
                if rc_norm < (1.0 - 1e-4 * t) * rnorm {
                    u = cand;
                    r = rc;
                    rnorm = rc_norm;
                    accepted = true;
                    break;
                }
                t *= 0.5;
            }
            if !accepted {
                return Err(Error::NewtonDivergence { residual: rnorm });
            }
        }
        if rnorm <= tol {
            Ok(u)
        } else {
            Err(Error::NewtonDivergence { residual: rnorm })
        }
    }

    fn composite_gradient_for(
        &self,
        fidelity: Fidelity,
        z: &DVector<f64>,
        theta: &DiscrepancyParams,
    ) -> Result<DVector<f64>> {
        let u = self.solve_state(fidelity, z)?;
        let delta = eval_delta(theta, z, &self.mass)?;
        let e = &u + delta - &self.target;
        let me = self.mass.apply(&e);
        let j = self.state_jacobian(fidelity, &u);
        let lambda = j
            .solve(&me)
            .ok_or_else(|| Error::EigenFailure("singular state Jacobian".into()))?;
        Ok(self.mass.apply(&lambda)
            + self.mass.apply(z) * self.gamma_reg
            + self.mass.apply(&(theta.slope.transpose() * &me)))
    }

    fn composite_hvp_for(
        &self,
        fidelity: Fidelity,
        z: &DVector<f64>,
        theta: &DiscrepancyParams,
        v: &DVector<f64>,
    ) -> Result<DVector<f64>> {
        let u = self.solve_state(fidelity, z)?;
        let delta = eval_delta(theta, z, &self.mass)?;
        let e = &u + delta - &self.target;
        let j = self.state_jacobian(fidelity, &u);
        let lambda = j
            .solve(&self.mass.apply(&e))
            .ok_or_else(|| Error::EigenFailure("singular state Jacobian".into()))?;
        let du = j
            .solve(&self.mass.apply(v))
            .ok_or_else(|| Error::EigenFailure("singular state Jacobian".into()))?;
        let de = &du + &theta.slope * self.mass.apply(v);
        // Second-order adjoint: dJ[du] lambda has entries int 2 w du lambda phi_i.
        let curv = self.weighted_product_vector(fidelity, &du, &lambda) * 2.0;
        let dlambda = j
            .solve(&(self.mass.apply(&de) - curv))
            .ok_or_else(|| Error::EigenFailure("singular state Jacobian".into()))?;
        Ok(self.mass.apply(&dlambda)
            + self.mass.apply(v) * self.gamma_reg
            + self
                .mass
                .apply(&(theta.slope.transpose() * self.mass.apply(&de))))
    }

    fn mixed_apply_for(
        &self,
        fidelity: Fidelity,
        z: &DVector<f64>,
        theta: &DiscrepancyParams,
        dtheta: &DiscrepancyParams,
    ) -> Result<DVector<f64>> {
        let u = self.solve_state(fidelity, z)?;
        let delta = eval_delta(theta, z, &self.mass)?;
        let e = &u + delta - &self.target;
        let ddelta = eval_delta(dtheta, z, &self.mass)?;
        let j = self.state_jacobian(fidelity, &u);
        let dlambda = j
            .solve(&self.mass.apply(&ddelta))
            .ok_or_else(|| Error::EigenFailure("singular state Jacobian".into()))?;
        Ok(self.mass.apply(&dlambda)
            + self
                .mass
                .apply(&(dtheta.slope.transpose() * self.mass.apply(&e)))
            + self
                .mass
                .apply(&(theta.slope.transpose() * self.mass.apply(&ddelta))))
    }

    /// View of the same problem whose "low-fidelity" composite runs on the
    /// high-fidelity reaction; used to compute the direct high-fidelity
    /// optimum as a test oracle.
    pub fn hifi_view(&self) -> DrHifiView<'_> {
        DrHifiView { inner: self }
    }

    /// Direct Newton solve of the true high-fidelity problem (diagnostic
    /// oracle; never an input to the update pipeline).
    pub fn hifi_optimum(&self, z0: &DVector<f64>, tol: f64) -> Result<DVector<f64>> {
        crate::postopt::solve_lowfi(&self.hifi_view(), z0, tol)
    }
}

/// Solve the state equation at the requested fidelity.
pub fn dr_solve(
    problem: &DiffusionReactionProblem,
    z: &DVector<f64>,
    fidelity: Fidelity,
) -> Result<DVector<f64>> {
    problem.solve_state(fidelity, z)
}

impl OptProblem for DiffusionReactionProblem {
    fn dim_u(&self) -> usize {
        self.grid.n()
    }

    fn dim_z(&self) -> usize {
        self.grid.n()
    }

    fn mass_z(&self) -> &Arc<SpdOperator> {
        &self.mass
    }

    fn mass_u(&self) -> &Arc<SpdOperator> {
        &self.mass
    }

    fn lowfi_solve(&self, z: &DVector<f64>) -> Result<DVector<f64>> {
        self.solve_state(Fidelity::Low, z)
    }

    fn objective(&self, u: &DVector<f64>, z: &DVector<f64>) -> f64 {
        let e = u - &self.target;
        0.5 * self.mass.inner(&e, &e) + 0.5 * self.gamma_reg * self.mass.inner(z, z)
    }

    fn composite_gradient(
        &self,
        z: &DVector<f64>,
        theta: &DiscrepancyParams,
    ) -> Result<DVector<f64>> {
        self.composite_gradient_for(Fidelity::Low, z, theta)
    }

    fn composite_hvp(
        &self,
        z: &DVector<f64>,
        theta: &DiscrepancyParams,
        v: &DVector<f64>,
    ) -> Result<DVector<f64>> {
        self.composite_hvp_for(Fidelity::Low, z, theta, v)
    }

    fn mixed_apply(
        &self,
        z: &DVector<f64>,
        theta: &DiscrepancyParams,
        dtheta: &DiscrepancyParams,
    ) -> Result<DVector<f64>> {
        self.mixed_apply_for(Fidelity::Low, z, theta, dtheta)
    }
}

impl FidelityPair for DiffusionReactionProblem {
    fn hifi_solve(&self, z: &DVector<f64>) -> Result<DVector<f64>> {
        self.solve_state(Fidelity::High, z)
    }
}

/// High-fidelity composite view; see [`DiffusionReactionProblem::hifi_view`].
pub struct DrHifiView<'a> {
    inner: &'a DiffusionReactionProblem,
}

impl OptProblem for DrHifiView<'_> {
    fn dim_u(&self) -> usize {
        self.inner.dim_u()
    }

    fn dim_z(&self) -> usize {
        self.inner.dim_z()
    }

    fn mass_z(&self) -> &Arc<SpdOperator> {
        &self.inner.mass
    }

    fn mass_u(&self) -> &Arc<SpdOperator> {
        &self.inner.mass
    }

    fn lowfi_solve(&self, z: &DVector<f64>) -> Result<DVector<f64>> {
        self.inner.solve_state(Fidelity::High, z)
    }

    fn objective(&self, u: &DVector<f64>, z: &DVector<f64>) -> f64 {
        self.inner.objective(u, z)
    }

    fn composite_gradient(
        &self,
        z: &DVector<f64>,
        theta: &DiscrepancyParams,
    ) -> Result<DVector<f64>> {
        self.inner.composite_gradient_for(Fidelity::High, z, theta)
    }

    fn composite_hvp(
        &self,
        z: &DVector<f64>,
        theta: &DiscrepancyParams,
        v: &DVector<f64>,
    ) -> Result<DVector<f64>> {
        self.inner.composite_hvp_for(Fidelity::High, z, theta, v)
    }

    fn mixed_apply(
        &self,
        z: &DVector<f64>,
        theta: &DiscrepancyParams,
        dtheta: &DiscrepancyParams,
    ) -> Result<DVector<f64>> {
        self.inner.mixed_apply_for(Fidelity::High, z, theta, dtheta)
    }
}
