// Scratch probe: round-by-round diagnostics of the p=1 budget-6 run.
use mfopt::calibration::{build_g, posterior_factors, DesignSet, DiscrepancyData};
use mfopt::harness::{RunConfig, Session};
use mfopt::oed::{optimize_design, CriterionWorkspace, OptimizeOptions};
use mfopt::postopt::{continuation_update, OptProblem as _};
use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::sync::Arc;

fn main() -> mfopt::Result<()> {
    let cfg = RunConfig { n_budget: 6, ..RunConfig::default() };
    let session = Session::new(cfg.clone())?;
    let problem = session.problem.pair();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut points = vec![session.z_tilde.clone()];
    let mut etas = vec![DVector::zeros(session.projector.rank())];
    let mut data: Vec<DVector<f64>> = Vec::new();
    let mut z_prev = session.z_tilde.clone();
    for round in 1..=6 {
        while data.len() < points.len() {
            let z = &points[data.len()];
            data.push(problem.hifi_solve(z)? - problem.lowfi_solve(z)?);
        }
        let design = Arc::new(DesignSet::new(points.clone(), session.prior.m_z())?);
        let dset = DiscrepancyData::new(data.clone());
        let g = build_g(&design, &session.prior);
        let f = posterior_factors(design, &dset, Arc::clone(&session.prior), cfg.alpha_d)?;
        let th = f.map_estimate(&dset)?;
        // affine fit residual at each design point
        let mut worst_fit = 0.0f64;
        for (z, d) in points.iter().zip(&data) {
            let fit = mfopt::discrepancy::eval_delta(&th, z, session.prior.m_z())?;
            worst_fit = worst_fit.max(problem.mass_u().norm(&(fit - d)));
        }
        let res = continuation_update(problem, &session.projector, &session.z_tilde, &th, &cfg.continuation_options())?;
        let alpha = session.alpha.alpha_k(&res.z_bar, &z_prev);
        let jh = problem.hifi_objective(&res.z_bar)?;
        let cond = f.mu()[0] / f.mu()[f.mu().len()-1].max(1e-300);
        println!("round {round}: N={} condG={cond:.2e} |i|={:.3} |S|={:.3} fit_resid={worst_fit:.2e} alpha={alpha:.3e} |zbar-zt|={:.2} Jh={jh:.5}",
            points.len(), th.intercept.norm(), th.slope.norm(), (res.z_bar.clone()-&session.z_tilde).norm());
        let _ = g;
        if round == 6 { break; }
        let ws = CriterionWorkspace::new(&session.prior, Arc::clone(&session.projector),
            mfopt::harness::eta_matrix(&etas), &res.z_bar, alpha, cfg.alpha_d)?;
        let dp = optimize_design(&ws, 1, &OptimizeOptions::default(), &mut rng)?;
        points.extend(dp.points());
        etas.push(dp.eta().column(0).into_owned());
        z_prev = res.z_bar;
    }
    Ok(())
}
