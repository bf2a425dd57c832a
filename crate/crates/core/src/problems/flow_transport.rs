//! Coupled compressible-flow contaminant transport testbed.
//!
//! High fidelity advances the fully coupled (rho, u, e, c) system with
//! explicit first-order upwind advection, implicit centered diffusion, and
//! explicit reaction/coupling sources. Low fidelity freezes the velocity at
//! the nominal (zero initial concentration) field and advances only the
//! contaminant equation, which is linear in the initial condition.

use std::sync::Arc;

use nalgebra::{DMatrix, DVector};

use crate::discrepancy::{eval_delta, DiscrepancyParams};
use crate::error::{Error, Result};
use crate::postopt::{FidelityPair, OptProblem};
use crate::spaces::{build_grid, mass_matrix, Grid1D, SpdOperator};

use super::{Fidelity, Tridiag};

/// Physical and numerical parameters; defaults follow the testbed setup.
#[derive(Debug, Clone)]
pub struct FlowConfig {
    pub n: usize,
    pub n_steps: usize,
    pub t_final: f64,
    pub gamma_d: f64,
    pub c_v: f64,
    pub k_thermal: f64,
    pub r_gas: f64,
    pub nu: f64,
    pub gamma_reg: f64,
    /// Synthetic true initial concentration: amp * exp(-(x-center)^2 / (2 width^2)).
    pub source_amp: f64,
    pub source_center: f64,
    pub source_width: f64,
}

impl Default for FlowConfig {
    fn default() -> Self {
        Self {
            n: 65,
            n_steps: 400,
            t_final: 0.1,
            gamma_d: 0.05,
            c_v: 1.0,
            k_thermal: 30.0,
            r_gas: 1.0,
            nu: 1e5,
            gamma_reg: 1e-6,
            source_amp: 2e-4,
            source_center: 0.3,
            source_width: 0.08,
        }
    }
}

struct FlowState {
    rho: DVector<f64>,
    u: DVector<f64>,
    e: DVector<f64>,
    c: DVector<f64>,
}

pub struct FlowTransportProblem {
    grid: Grid1D,
    mass: Arc<SpdOperator>,
    config: FlowConfig,
    dt: f64,
    /// Velocity fields used by each time step of the nominal run (rows).
    nominal_velocity: DMatrix<f64>,
    /// Cached explicit transport operators A_n built on the nominal field.
    lofi_steps: Vec<Tridiag>,
    /// Constant implicit diffusion matrix for the contaminant equation.
    b_c: Tridiag,
    /// Observed terminal concentration (synthesized from the true source).
    c_bar: DVector<f64>,
    z_true: DVector<f64>,
}

impl FlowTransportProblem {
    pub fn new(config: FlowConfig) -> Result<Self> {
        if config.n < 3 || config.n_steps == 0 {
            return Err(Error::InvalidArgument(
                "flow problem needs n >= 3 and at least one time step".into(),
            ));
        }
        let grid = build_grid(config.n, 0.0, 1.0)?;
        let mass = Arc::new(mass_matrix(&grid));
        let dt = config.t_final / config.n_steps as f64;
        let h = grid.spacing();
        let b_c = implicit_diffusion_matrix(config.n, dt, config.gamma_d, h);

        let mut partial = Self {
            grid,
            mass,
            config,
            dt,
            nominal_velocity: DMatrix::zeros(0, 0),
            lofi_steps: Vec::new(),
            b_c,
            c_bar: DVector::zeros(0),
            z_true: DVector::zeros(0),
        };

        // Nominal run: coupled system from c = 0; the velocity history defines
        // the frozen-field transport model.
        let zeros = DVector::zeros(partial.config.n);
        let (_, velocity) = partial.run_coupled(&zeros, true)?;
        let velocity = velocity.expect("velocity storage requested");
        partial.lofi_steps = (0..partial.config.n_steps)
            .map(|s| partial.explicit_transport_matrix(&velocity.row(s).transpose()))
            .collect();
        partial.nominal_velocity = velocity;

        let z_true = partial.grid.sample(|x| {
            partial.config.source_amp
                * (-(x - partial.config.source_center).powi(2)
                    / (2.0 * partial.config.source_width.powi(2)))
                .exp()
        });
        let (c_bar, _) = partial.run_coupled(&z_true, false)?;
        partial.c_bar = c_bar;
        partial.z_true = z_true;
        Ok(partial)
    }

    pub fn with_defaults() -> Result<Self> {
        Self::new(FlowConfig::default())
    }

    pub fn grid(&self) -> &Grid1D {
        &self.grid
    }

    pub fn config(&self) -> &FlowConfig {
        &self.config
    }

    pub fn z_true(&self) -> &DVector<f64> {
        &self.z_true
    }

    pub fn c_bar(&self) -> &DVector<f64> {
        &self.c_bar
    }

    /// Velocity history of the nominal high-fidelity run; row `s` is the field
    /// used by time step `s`.
    pub fn nominal_velocity(&self) -> &DMatrix<f64> {
        &self.nominal_velocity
    }

    /// Explicit part of one contaminant step against a given velocity field:
    /// `A c = c - dt (u c_x^up + c u_x) - dt f(c)` with `f(c) = c`.
    fn explicit_transport_matrix(&self, u: &DVector<f64>) -> Tridiag {
        let n = self.config.n;
        let h = self.grid.spacing();
        let dt = self.dt;
        let mut a = Tridiag::zeros(n);
        for i in 0..n {
            let ux = central_dx(u, i, h);
            let mut diag = 1.0 - dt * ux - dt;
            let mut sub = 0.0;
            let mut sup = 0.0;
            if u[i] >= 0.0 {
                if i > 0 {
                    diag -= dt * u[i] / h;
                    sub += dt * u[i] / h;
                }
            } else if i + 1 < n {
                diag += dt * u[i] / h;
                sup -= dt * u[i] / h;
            }
            a.diag[i] = diag;
            if i > 0 {
                a.sub[i - 1] = sub;
            }
            if i + 1 < n {
                a.sup[i] = sup;
            }
        }
        a
    }

    /// One contaminant step given the velocity field of that step.
    fn contaminant_step(&self, a: &Tridiag, c: &DVector<f64>) -> Result<DVector<f64>> {
        let rhs = a.matvec(c);
        self.b_c
            .solve(&rhs)
            .ok_or_else(|| Error::EigenFailure("implicit diffusion solve failed".into()))
    }

    /// Advance the fully coupled system; optionally record the velocity field
    /// used by each step.
    fn run_coupled(
        &self,
        z: &DVector<f64>,
        store_velocity: bool,
    ) -> Result<(DVector<f64>, Option<DMatrix<f64>>)> {
        if z.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument(
                "initial concentration is not finite".into(),
            ));
        }
        let n = self.config.n;
        let h = self.grid.spacing();
        let dt = self.dt;
        let cfg = &self.config;
        let nodes = self.grid.nodes();
        let mut state = FlowState {
            rho: DVector::from_element(n, 1.0),
            u: DVector::from_fn(n, |i, _| 1.0 - nodes[i] / 2.0),
            e: DVector::from_fn(n, |i, _| 1.0 + nodes[i]),
            c: z.clone(),
        };
        let mut velocity = if store_velocity {
            Some(DMatrix::zeros(cfg.n_steps, n))
        } else {
            None
        };

        for step in 0..cfg.n_steps {
            let cfl = state.u.amax() * dt / h;
            if cfl > 0.9 {
                return Err(Error::CflViolation { step, cfl });
            }
            if let Some(v) = velocity.as_mut() {
                v.row_mut(step).copy_from(&state.u.transpose());
            }

            // Pressure from the ideal-gas closure; outflow pressure imposed.
            let mut p = DVector::from_fn(n, |i, _| {
                (cfg.r_gas / cfg.c_v) * state.rho[i] * state.e[i]
            });
            p[n - 1] = 2.0;

            let u_old = state.u.clone();
            let rho_old = state.rho.clone();

            // Density: explicit upwind advection plus compression source.
            let mut rho_new = rho_old.clone();
            for i in 1..n - 1 {
                let adv = u_old[i] * upwind_dx(&rho_old, &u_old, i, h)
                    + rho_old[i] * central_dx(&u_old, i, h);
                rho_new[i] = rho_old[i] - dt * adv;
            }
            rho_new[0] = 1.0;
            rho_new[n - 1] = rho_new[n - 2];

            // Momentum: explicit upwind advection plus pressure gradient.
            let mut u_new = u_old.clone();
            for i in 1..n {
                let px = if i + 1 < n {
                    central_dx(&p, i, h)
                } else {
                    (p[i] - p[i - 1]) / h
                };
                let adv = u_old[i] * upwind_dx(&u_old, &u_old, i, h) + px / rho_old[i];
                u_new[i] = u_old[i] - dt * adv;
            }
            u_new[0] = 1.0;
            u_new[n - 1] = u_new[n - 2];

            // Energy: implicit diffusion with spatially varying coefficient,
            // explicit advection, compression work, and contaminant coupling.
            let mut rhs_e = DVector::zeros(n);
            for i in 0..n {
                let adv = u_old[i] * upwind_dx(&state.e, &u_old, i, h)
                    + (p[i] / rho_old[i]) * central_dx(&u_old, i, h);
                rhs_e[i] =
                    state.e[i] - dt * adv + dt * (cfg.nu / rho_old[i]) * state.c[i];
            }
            let mut b_e = Tridiag::zeros(n);
            for i in 0..n {
                let coeff = dt * cfg.k_thermal / (rho_old[i] * cfg.c_v) / (h * h);
                if i == 0 {
                    b_e.diag[0] = 1.0 + 2.0 * coeff;
                    b_e.sup[0] = -2.0 * coeff;
                } else if i == n - 1 {
                    b_e.diag[n - 1] = 1.0 + 2.0 * coeff;
                    b_e.sub[n - 2] = -2.0 * coeff;
                } else {
                    b_e.diag[i] = 1.0 + 2.0 * coeff;
                    b_e.sub[i - 1] = -coeff;
                    b_e.sup[i] = -coeff;
                }
            }
            let e_new = b_e
                .solve(&rhs_e)
                .ok_or_else(|| Error::EigenFailure("energy diffusion solve failed".into()))?;

            // Contaminant: same update as the frozen-field model, against the
            // current velocity.
            let a = self.explicit_transport_matrix(&u_old);
            let c_new = self.contaminant_step(&a, &state.c)?;

            state.rho = rho_new;
            state.u = u_new;
            state.e = e_new;
            state.c = c_new;

            for field in [&state.rho, &state.u, &state.e, &state.c] {
                if field.iter().any(|v| !v.is_finite()) {
                    return Err(Error::NonFiniteState { step });
                }
            }
        }
        Ok((state.c, velocity))
    }

    /// Frozen-velocity transport propagator (linear in `z`).
    fn lofi_propagate(&self, z: &DVector<f64>) -> Result<DVector<f64>> {
        let mut c = z.clone();
        for a in &self.lofi_steps {
            c = self.contaminant_step(a, &c)?;
        }
        Ok(c)
    }

    /// Transpose of the frozen-velocity propagator.
    fn lofi_propagate_transpose(&self, w: &DVector<f64>) -> Result<DVector<f64>> {
        let mut v = w.clone();
        for a in self.lofi_steps.iter().rev() {
            let mid = self
                .b_c
                .solve_transpose(&v)
                .ok_or_else(|| Error::EigenFailure("implicit diffusion solve failed".into()))?;
            v = a.matvec_transpose(&mid);
        }
        Ok(v)
    }
}

fn implicit_diffusion_matrix(n: usize, dt: f64, gamma: f64, h: f64) -> Tridiag {
    let coeff = dt * gamma / (h * h);
    let mut b = Tridiag::zeros(n);
    b.diag[0] = 1.0 + 2.0 * coeff;
    b.sup[0] = -2.0 * coeff;
    for i in 1..n - 1 {
        b.diag[i] = 1.0 + 2.0 * coeff;
        b.sub[i - 1] = -coeff;
        b.sup[i] = -coeff;
    }
    b.diag[n - 1] = 1.0 + 2.0 * coeff;
    b.sub[n - 2] = -2.0 * coeff;
    b
}

/// First-order upwind derivative of `field` at node `i` for velocity `u[i]`;
/// mirror ghosts make the boundary derivative vanish.
fn upwind_dx(field: &DVector<f64>, u: &DVector<f64>, i: usize, h: f64) -> f64 {
    let n = field.len();
    if u[i] >= 0.0 {
        if i == 0 {
            0.0
        } else {
            (field[i] - field[i - 1]) / h
        }
    } else if i + 1 == n {
        0.0
    } else {
        (field[i + 1] - field[i]) / h
    }
}

fn central_dx(field: &DVector<f64>, i: usize, h: f64) -> f64 {
    let n = field.len();
    if i == 0 {
        (field[1] - field[0]) / h
    } else if i + 1 == n {
        (field[n - 1] - field[n - 2]) / h
    } else {
        (field[i + 1] - field[i - 1]) / (2.0 * h)
    }
}

/// Solve the transport problem at the requested fidelity.
pub fn flow_solve(
    problem: &FlowTransportProblem,
    z: &DVector<f64>,
    fidelity: Fidelity,
) -> Result<DVector<f64>> {
    match fidelity {
        Fidelity::High => Ok(problem.run_coupled(z, false)?.0),
        Fidelity::Low => problem.lofi_propagate(z),
    }
}

impl OptProblem for FlowTransportProblem {
    fn dim_u(&self) -> usize {
        self.config.n
    }

    fn dim_z(&self) -> usize {
        self.config.n
    }

    fn mass_z(&self) -> &Arc<SpdOperator> {
        &self.mass
    }

    fn mass_u(&self) -> &Arc<SpdOperator> {
        &self.mass
    }

    fn lowfi_solve(&self, z: &DVector<f64>) -> Result<DVector<f64>> {
        self.lofi_propagate(z)
    }

    fn objective(&self, u: &DVector<f64>, z: &DVector<f64>) -> f64 {
        let e = u - &self.c_bar;
        0.5 * self.mass.inner(&e, &e) + 0.5 * self.config.gamma_reg * self.mass.inner(z, z)
    }

    fn composite_gradient(
        &self,
        z: &DVector<f64>,
        theta: &DiscrepancyParams,
    ) -> Result<DVector<f64>> {
        let e = self.lofi_propagate(z)? + eval_delta(theta, z, &self.mass)? - &self.c_bar;
        let me = self.mass.apply(&e);
        Ok(self.lofi_propagate_transpose(&me)?
            + self.mass.apply(&(theta.slope.transpose() * &me))
            + self.mass.apply(z) * self.config.gamma_reg)
    }

    fn composite_hvp(
        &self,
        z: &DVector<f64>,
        theta: &DiscrepancyParams,
        v: &DVector<f64>,
    ) -> Result<DVector<f64>> {
        let _ = z; // the low-fidelity objective is quadratic in z
        let de = self.lofi_propagate(v)? + &theta.slope * self.mass.apply(v);
        let mde = self.mass.apply(&de);
        Ok(self.lofi_propagate_transpose(&mde)?
            + self.mass.apply(&(theta.slope.transpose() * &mde))
            + self.mass.apply(v) * self.config.gamma_reg)
    }

    fn mixed_apply(
        &self,
        z: &DVector<f64>,
        theta: &DiscrepancyParams,
        dtheta: &DiscrepancyParams,
    ) -> Result<DVector<f64>> {
        let e = self.lofi_propagate(z)? + eval_delta(theta, z, &self.mass)? - &self.c_bar;
        let ddelta = eval_delta(dtheta, z, &self.mass)?;
        let mdd = self.mass.apply(&ddelta);
        Ok(self.lofi_propagate_transpose(&mdd)?
            + self.mass.apply(&(dtheta.slope.transpose() * self.mass.apply(&e)))
            + self.mass.apply(&(theta.slope.transpose() * &mdd)))
    }
}

impl FidelityPair for FlowTransportProblem {
    fn hifi_solve(&self, z: &DVector<f64>) -> Result<DVector<f64>> {
        Ok(self.run_coupled(z, false)?.0)
    }
}
