//! Diagnostic studies: continuation-step sweep, acquisition-policy
//! comparison with uncertainty scatter, and batch-size sweep.

use std::path::Path;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::calibration::{posterior_factors, DesignSet, DiscrepancyData};
use crate::discrepancy::DiscrepancyParams;
use crate::error::{Error, Result};
use crate::oed::{optimize_design, random_design, CriterionWorkspace, OptimizeOptions};
use crate::postopt::{continuation_update, projected_argmin, ContinuationOptions, CorrectorMode};

use super::sequential::eta_matrix;
use super::{run_sequential, Budgeted, ProblemKind, RunConfig, RunRecord, Session};

/// One row of the continuation sweep.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ContinuationRow {
    pub n_steps: usize,
    pub objective: f64,
    pub rel_error: f64,
}

pub struct ContinuationStudy {
    pub rows: Vec<ContinuationRow>,
    /// Optimal value of the direct projected re-optimization oracle.
    pub direct_objective: f64,
    pub theta_nom_norm: f64,
}

impl ContinuationStudy {
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent)?;
        }
        let mut w = csv::Writer::from_path(path)?;
        for row in &self.rows {
            w.serialize(row)?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Build the nominal discrepancy parameter by linearizing the true
/// discrepancy at a center point: the value plus forward-difference Jacobian
/// columns along the projector directions (`r + 1` high-fidelity solves).
pub fn linearized_discrepancy_at(
    session: &Session,
    budget: &Budgeted<'_>,
    center: &DVector<f64>,
) -> Result<DiscrepancyParams> {
    let problem = session.problem.pair();
    let v = session.projector.v();
    let r = v.ncols();
    let d0 = budget.diagnostic_solve(center)? - problem.lowfi_solve(center)?;
    let eps = 1e-4 * (1.0 + center.amax());
    let mut fd = DMatrix::zeros(problem.dim_u(), r);
    for j in 0..r {
        let zj = center + v.column(j) * eps;
        let dj = budget.diagnostic_solve(&zj)? - problem.lowfi_solve(&zj)?;
        fd.set_column(j, &((dj - &d0) / eps));
    }
    // Slope S with S M_z v_j = fd_j: S = fd (V^T M_z V)^{-1} V^T.
    let m_z = problem.mass_z();
    let vmv = v.transpose() * m_z.matrix() * v;
    let vmv_inv = vmv
        .try_inverse()
        .ok_or_else(|| Error::EigenFailure("projected mass matrix is singular".into()))?;
    let slope = &fd * vmv_inv * v.transpose();
    let intercept = &d0 - &slope * m_z.apply(center);
    DiscrepancyParams::new(intercept, slope)
}

/// Sweep the number of continuation steps at a fixed nominal discrepancy and
/// measure the objective error against direct projected re-optimization.
pub fn run_continuation_study(session: &Session) -> Result<ContinuationStudy> {
    let dr = session
        .problem
        .diffusion_reaction()
        .ok_or_else(|| Error::Config("continuation study requires the diffusion-reaction problem".into()))?;
    let problem = session.problem.pair();
    let budget = Budgeted::new(problem);

    // Nominal discrepancy linearized at the true high-fidelity optimum.
    let z_star = dr.hifi_optimum(&session.z_tilde, 1e-9)?;
    let theta_nom = linearized_discrepancy_at(session, &budget, &z_star)?;

    let r = session.projector.rank();
    let b_direct = projected_argmin(
        problem,
        &session.projector,
        &session.z_tilde,
        &theta_nom,
        &DVector::zeros(r),
        1e-12,
    )?;
    let z_direct = session.projector.lift(&session.z_tilde, &b_direct);
    let direct_objective = problem.composite_objective(&z_direct, &theta_nom)?;

    let mut rows = Vec::new();
    for n_steps in [1usize, 2, 4, 8, 16] {
        let opts = ContinuationOptions {
            n_steps,
            corrector_tol: session.config.corrector_tol,
            mode: CorrectorMode::Single,
        };
        let res = continuation_update(
            problem,
            &session.projector,
            &session.z_tilde,
            &theta_nom,
            &opts,
        )?;
        let objective = problem.composite_objective(&res.z_bar, &theta_nom)?;
        let rel_error = (objective - direct_objective) / direct_objective.abs().max(1e-300);
        rows.push(ContinuationRow {
            n_steps,
            objective,
            rel_error,
        });
    }

    Ok(ContinuationStudy {
        rows,
        direct_objective,
        theta_nom_norm: theta_nom.norm(),
    })
}

/// One scatter point of the acquisition comparison.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ScatterRow {
    pub round: usize,
    pub kind: String,
    /// Relative uncertainty reduction near the current update.
    pub criterion_rel: f64,
    /// Relative uncertainty reduction near the known high-fidelity optimum.
    pub hifi_rel: f64,
}

pub struct OedVsRandomStudy {
    pub record: RunRecord,
    pub scatter: Vec<ScatterRow>,
    /// Pearson correlation between the two uncertainty axes.
    pub correlation: f64,
}

impl OedVsRandomStudy {
    pub fn write_scatter_csv(&self, path: &Path) -> Result<()> {
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent)?;
        }
        let mut w = csv::Writer::from_path(path)?;
        for row in &self.scatter {
            w.serialize(row)?;
        }
        w.flush()?;
        Ok(())
    }
}

fn pearson(xs: &[f64], ys: &[f64]) -> f64 {
    let n = xs.len() as f64;
    if n < 2.0 {
        return f64::NAN;
    }
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let mut sxy = 0.0;
    let mut sxx = 0.0;
    let mut syy = 0.0;
    for (x, y) in xs.iter().zip(ys) {
        sxy += (x - mx) * (y - my);
        sxx += (x - mx) * (x - mx);
        syy += (y - my) * (y - my);
    }
    sxy / (sxx.sqrt() * syy.sqrt()).max(1e-300)
}

/// Sequential run under the acquisition criterion, with every round also
/// scoring the chosen point and a cloud of random candidates on two
/// uncertainty axes (near the current update and near the true optimum).
pub fn run_oed_vs_random(session: &Session) -> Result<OedVsRandomStudy> {
    if session.config.problem != ProblemKind::DiffusionReaction {
        return Err(Error::Config(
            "the acquisition comparison study needs the diffusion-reaction optimum oracle".into(),
        ));
    }
    let dr = session.problem.diffusion_reaction().expect("checked above");
    let problem = session.problem.pair();
    let config = &session.config;
    let budget = Budgeted::new(problem);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let cont_opts = config.continuation_options();
    let opt_opts = OptimizeOptions {
        n_starts: config.n_starts,
        ..Default::default()
    };
    let z_star = dr.hifi_optimum(&session.z_tilde, 1e-9)?;

    let mut scatter = Vec::new();
    let mut points = vec![session.z_tilde.clone()];
    let mut etas = vec![DVector::zeros(session.projector.rank())];
    let mut data: Vec<DVector<f64>> = Vec::new();
    let mut z_bar_prev = session.z_tilde.clone();
    let mut record = RunRecord::default();
    let mut crit_axis = Vec::new();
    let mut hifi_axis = Vec::new();

    let mut round = 0usize;
    loop {
        round += 1;
        // Evaluate all pending points (the last batch).
        while data.len() < points.len() {
            let z = &points[data.len()];
            let hi = budget.acquire(z)?;
            let lo = problem.lowfi_solve(z)?;
            data.push(hi - lo);
        }

        let design = Arc::new(DesignSet::new(points.clone(), session.prior.m_z())?);
        let dset = DiscrepancyData::new(data.clone());
        let factors =
            posterior_factors(design, &dset, Arc::clone(&session.prior), config.alpha_d)?;
        let theta_bar = factors.map_estimate(&dset)?;
        let res = continuation_update(
            problem,
            &session.projector,
            &session.z_tilde,
            &theta_bar,
            &cont_opts,
        )?;
        let z_bar = res.z_bar;
        let alpha_k = session.alpha.alpha_k(&z_bar, &z_bar_prev);

        record.rows.push(super::RunRow {
            k: points.len(),
            points_eta: String::new(),
            points_z: super::fmt_points(&points[points.len() - 1..]),
            data_norms: String::new(),
            alpha_k: Some(alpha_k),
            criterion_value: None,
            theta_intercept_norm: theta_bar.intercept.norm(),
            theta_slope_norm: theta_bar.slope.norm(),
            z_bar: super::fmt_vec(&z_bar),
            j_lofi: problem.composite_objective(
                &z_bar,
                &DiscrepancyParams::zeros(problem.dim_u(), problem.dim_z()),
            )?,
            j_hifi: budget.diagnostic_objective(&z_bar)?,
            wall_time_s: 0.0,
        });

        if budget.acquisition_count() >= config.n_budget {
            break;
        }

        // Score candidates on both uncertainty axes before committing.
        let eta_known = eta_matrix(&etas);
        let ws_center = CriterionWorkspace::new(
            &session.prior,
            Arc::clone(&session.projector),
            eta_known.clone(),
            &z_bar,
            alpha_k,
            config.alpha_d,
        )?;
        let ws_star = CriterionWorkspace::new(
            &session.prior,
            Arc::clone(&session.projector),
            eta_known,
            &z_star,
            alpha_k,
            config.alpha_d,
        )?;
        // Duplicate-point normalization: next point placed again at the last.
        let dup = DMatrix::from_column_slice(
            session.projector.rank(),
            1,
            etas.last().expect("at least one point").as_slice(),
        );
        let u0_center = ws_center.expected_uncertainty_degenerate(&dup)?;
        let u0_star = ws_star.expected_uncertainty_degenerate(&dup)?;

        let chosen = optimize_design(&ws_center, 1, &opt_opts, &mut rng)?;
        let mut candidates = vec![("oed".to_string(), chosen.eta().clone())];
        for _ in 0..config.scatter_candidates {
            let r = random_design(&ws_center, 1, &mut rng)?;
            candidates.push(("random".to_string(), r.eta().clone()));
        }
        for (kind, eta) in &candidates {
            let uc = ws_center.expected_uncertainty(eta)?;
            let us = ws_star.expected_uncertainty(eta)?;
            let criterion_rel = (u0_center - uc) / u0_center.abs().max(1e-300);
            let hifi_rel = (u0_star - us) / u0_star.abs().max(1e-300);
            crit_axis.push(criterion_rel);
            hifi_axis.push(hifi_rel);
            scatter.push(ScatterRow {
                round,
                kind: kind.clone(),
                criterion_rel,
                hifi_rel,
            });
        }

        points.extend(chosen.points());
        etas.push(chosen.eta().column(0).into_owned());
        z_bar_prev = z_bar;
    }

    let correlation = pearson(&crit_axis, &hifi_axis);
    Ok(OedVsRandomStudy {
        record,
        scatter,
        correlation,
    })
}

pub struct BatchStudy {
    pub runs: Vec<(usize, RunRecord)>,
}

/// Run the sequential loop at batch sizes {1, 2, 3, 6} with a shared seed and
/// budget; emits one record per batch size.
pub fn run_batch_study(session_config: &RunConfig) -> Result<BatchStudy> {
    let mut runs = Vec::new();
    for p in [1usize, 2, 3, 6] {
        let cfg = RunConfig {
            batch: p,
            n_budget: 6,
            ..session_config.clone()
        };
        let session = Session::new(cfg)?;
        let outcome = run_sequential(&session)?;
        if outcome.acquisition_count != 6 {
            return Err(Error::Budget(format!(
                "batch study consumed {} acquisitions instead of 6",
                outcome.acquisition_count
            )));
        }
        runs.push((p, outcome.record));
    }
    Ok(BatchStudy { runs })
}
