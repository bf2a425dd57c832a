//! The sequential acquisition loop: evaluate, calibrate, update, acquire.

use std::sync::Arc;
use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::calibration::{posterior_factors, DesignSet, DiscrepancyData};
use crate::discrepancy::DiscrepancyParams;
use crate::error::{Error, Result};
use crate::oed::{optimize_design, random_design, tracing_design, CriterionWorkspace, OptimizeOptions};
use crate::postopt::{continuation_update, linear_update, ContinuationOptions};

use super::{fmt_points, fmt_vec, Budgeted, PolicyKind, RunRecord, RunRow, Session, UpdateKind};

/// Everything a run produces beyond the record: the acquired design and data
/// (for replays), the per-round updates, and the budget accounting.
pub struct SequentialOutcome {
    pub record: RunRecord,
    pub points: Vec<DVector<f64>>,
    pub etas: Vec<DVector<f64>>,
    pub data: Vec<DVector<f64>>,
    pub z_bars: Vec<DVector<f64>>,
    pub acquisition_count: usize,
    pub diagnostic_count: usize,
}

fn update_solution(
    session: &Session,
    theta_bar: &DiscrepancyParams,
    opts: &ContinuationOptions,
    kind: UpdateKind,
) -> Result<DVector<f64>> {
    let problem = session.problem.pair();
    match kind {
        UpdateKind::Linear => {
            linear_update(&session.projector, problem, &session.z_tilde, theta_bar)
        }
        UpdateKind::Continuation => {
            match continuation_update(problem, &session.projector, &session.z_tilde, theta_bar, opts)
            {
                Ok(res) => Ok(res.z_bar),
                // One automatic retry with doubled step count.
                Err(Error::CorrectorDivergence { .. }) => {
                    let retry = ContinuationOptions {
                        n_steps: opts.n_steps * 2,
                        ..*opts
                    };
                    log::warn!(
                        "corrector diverged; retrying with {} continuation steps",
                        retry.n_steps
                    );
                    Ok(continuation_update(
                        problem,
                        &session.projector,
                        &session.z_tilde,
                        theta_bar,
                        &retry,
                    )?
                    .z_bar)
                }
                Err(e) => Err(e),
            }
        }
    }
}

/// Run the configured sequential loop to budget exhaustion.
pub fn run_sequential(session: &Session) -> Result<SequentialOutcome> {
    let config = &session.config;
    let problem = session.problem.pair();
    let budget = Budgeted::new(problem);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let cont_opts = config.continuation_options();
    let opt_opts = OptimizeOptions {
        n_starts: config.n_starts,
        ..Default::default()
    };

    let mut record = RunRecord::default();

    // Baseline row at the low-fidelity minimizer.
    let t0 = Instant::now();
    let zero_theta = DiscrepancyParams::zeros(problem.dim_u(), problem.dim_z());
    let j_lofi_0 = problem.composite_objective(&session.z_tilde, &zero_theta)?;
    let j_hifi_0 = budget.diagnostic_objective(&session.z_tilde)?;
    record.rows.push(RunRow {
        k: 0,
        points_eta: String::new(),
        points_z: String::new(),
        data_norms: String::new(),
        alpha_k: None,
        criterion_value: None,
        theta_intercept_norm: 0.0,
        theta_slope_norm: 0.0,
        z_bar: fmt_vec(&session.z_tilde),
        j_lofi: j_lofi_0,
        j_hifi: j_hifi_0,
        wall_time_s: t0.elapsed().as_secs_f64(),
    });

    // Pending batch: points to evaluate at the start of the next round. The
    // first input is always the low-fidelity minimizer.
    let mut pending_points = vec![session.z_tilde.clone()];
    let mut pending_etas = vec![DVector::zeros(session.projector.rank())];
    let mut pending_criterion: Option<f64> = None;

    let mut points: Vec<DVector<f64>> = Vec::new();
    let mut etas: Vec<DVector<f64>> = Vec::new();
    let mut data: Vec<DVector<f64>> = Vec::new();
    let mut z_bars: Vec<DVector<f64>> = Vec::new();
    let mut z_bar_prev = session.z_tilde.clone();
    let mut round = 0usize;

    loop {
        round += 1;
        let t_round = Instant::now();

        // Evaluate the pending batch.
        let mut batch_norms = Vec::new();
        for z in &pending_points {
            let hi = budget.acquire(z).map_err(|e| e.at_round(round))?;
            let lo = problem.lowfi_solve(z).map_err(|e| e.at_round(round))?;
            let d = hi - lo;
            batch_norms.push(format!("{:.17e}", problem.mass_u().norm(&d)));
            data.push(d);
        }
        points.extend(pending_points.iter().cloned());
        etas.extend(pending_etas.iter().cloned());

        // Calibrate.
        let design = Arc::new(
            DesignSet::new(points.clone(), session.prior.m_z()).map_err(|e| e.at_round(round))?,
        );
        let dset = DiscrepancyData::new(data.clone());
        let factors = posterior_factors(design, &dset, Arc::clone(&session.prior), config.alpha_d)
            .map_err(|e| e.at_round(round))?;
        let theta_bar = factors.map_estimate(&dset).map_err(|e| e.at_round(round))?;

        // Update the optimal solution.
        let z_bar = update_solution(session, &theta_bar, &cont_opts, config.update)
            .map_err(|e| e.at_round(round))?;
        let alpha_k = session.alpha.alpha_k(&z_bar, &z_bar_prev);

        let j_lofi = problem.composite_objective(&z_bar, &zero_theta)?;
        let j_hifi = budget.diagnostic_objective(&z_bar)?;
        record.rows.push(RunRow {
            k: points.len(),
            points_eta: fmt_points(&pending_etas),
            points_z: fmt_points(&pending_points),
            data_norms: batch_norms.join("|"),
            alpha_k: Some(alpha_k),
            criterion_value: pending_criterion,
            theta_intercept_norm: theta_bar.intercept.norm(),
            theta_slope_norm: theta_bar.slope.norm(),
            z_bar: fmt_vec(&z_bar),
            j_lofi,
            j_hifi,
            wall_time_s: t_round.elapsed().as_secs_f64(),
        });
        z_bars.push(z_bar.clone());

        if budget.acquisition_count() >= config.n_budget {
            break;
        }

        // Acquire the next batch by the configured policy.
        let p_eff = config.batch.min(config.n_budget - budget.acquisition_count());
        let eta_known = eta_matrix(&etas);
        let ws = CriterionWorkspace::new(
            &session.prior,
            Arc::clone(&session.projector),
            eta_known,
            &z_bar,
            alpha_k,
            config.alpha_d,
        )
        .map_err(|e| e.at_round(round))?;
        let (params, criterion_value) = match config.policy {
            PolicyKind::Oed => {
                let d = optimize_design(&ws, p_eff, &opt_opts, &mut rng)
                    .map_err(|e| e.at_round(round))?;
                let v = ws.criterion(d.eta()).ok();
                (d, v)
            }
            PolicyKind::Random => {
                let d = random_design(&ws, p_eff, &mut rng).map_err(|e| e.at_round(round))?;
                let v = ws.criterion(d.eta()).ok();
                (d, v)
            }
            PolicyKind::Tracing => {
                let d = tracing_design(&ws, &z_bar);
                let v = ws.criterion(d.eta()).ok();
                (d, v)
            }
        };
        pending_points = params.points();
        pending_etas = (0..params.n_points())
            .map(|l| params.eta().column(l).into_owned())
            .collect();
        pending_criterion = criterion_value;
        z_bar_prev = z_bar;
    }

    Ok(SequentialOutcome {
        record,
        points,
        etas,
        data,
        z_bars,
        acquisition_count: budget.acquisition_count(),
        diagnostic_count: budget.diagnostic_count(),
    })
}

pub fn eta_matrix(etas: &[DVector<f64>]) -> DMatrix<f64> {
    let r = etas.first().map_or(0, |e| e.len());
    let mut m = DMatrix::zeros(r, etas.len());
    for (j, e) in etas.iter().enumerate() {
        m.set_column(j, e);
    }
    m
}

/// Recompute the per-prefix solution updates on a fixed acquired data set
/// with the requested update rule. Returns the update after each prefix
/// `1..=N`; acquisitions are not repeated.
pub fn replay_trajectory(
    session: &Session,
    points: &[DVector<f64>],
    data: &[DVector<f64>],
    update: UpdateKind,
) -> Result<Vec<DVector<f64>>> {
    if points.len() != data.len() {
        return Err(Error::DimensionMismatch(
            "replay needs matching points and data".into(),
        ));
    }
    let cont_opts = session.config.continuation_options();
    let mut out = Vec::with_capacity(points.len());
    for k in 1..=points.len() {
        let design = Arc::new(DesignSet::new(
            points[..k].to_vec(),
            session.prior.m_z(),
        )?);
        let dset = DiscrepancyData::new(data[..k].to_vec());
        let factors = posterior_factors(
            design,
            &dset,
            Arc::clone(&session.prior),
            session.config.alpha_d,
        )?;
        let theta_bar = factors.map_estimate(&dset)?;
        let z_bar = update_solution(session, &theta_bar, &cont_opts, update)?;
        out.push(z_bar);
    }
    Ok(out)
}
