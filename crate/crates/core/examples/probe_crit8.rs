// Scratch probe: criterion-8 protocol exactly, at candidate defaults.
use std::sync::Arc;

use mfopt::calibration::{posterior_factors, DesignSet, DiscrepancyData};
use mfopt::harness::{eta_matrix, run_sequential, PolicyKind, RunConfig, Session};
use mfopt::oed::{optimize_design, random_design, CriterionWorkspace, OptimizeOptions};
use mfopt::postopt::{continuation_update, OptProblem as _};
use nalgebra::DVector;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

fn main() -> mfopt::Result<()> {
    for (bz, ad) in [(10.0, 4e-2), (10.0, 8e-2)] {
        println!("=== bz={bz} ad={ad:.0e} ===");
        let base = RunConfig {
            prior_beta_z: bz,
            prior_gamma_z: 0.1 * bz,
            alpha_d: ad,
            n_budget: 3,
            ..RunConfig::default()
        };
        let mut crit_wins = 0;
        let mut oed_finals = Vec::new();
        let mut rand_finals = Vec::new();
        for seed in 0..20u64 {
            // OED run up to the third acquisition decision.
            let cfg = RunConfig {
                seed,
                ..base.clone()
            };
            let session = Session::new(cfg.clone())?;
            let problem = session.problem.pair();
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut points = vec![session.z_tilde.clone()];
            let mut etas = vec![DVector::zeros(session.projector.rank())];
            let mut data: Vec<DVector<f64>> = Vec::new();
            let mut z_prev = session.z_tilde.clone();
            let mut crit_win_here = false;
            for round in 1..=2 {
                while data.len() < points.len() {
                    let z = &points[data.len()];
                    data.push(problem.hifi_solve(z)? - problem.lowfi_solve(z)?);
                }
                let design = Arc::new(DesignSet::new(points.clone(), session.prior.m_z())?);
                let dset = DiscrepancyData::new(data.clone());
                let f = posterior_factors(design, &dset, Arc::clone(&session.prior), cfg.alpha_d)?;
                let th = f.map_estimate(&dset)?;
                let res = continuation_update(
                    problem,
                    &session.projector,
                    &session.z_tilde,
                    &th,
                    &cfg.continuation_options(),
                )?;
                let alpha = session.alpha.alpha_k(&res.z_bar, &z_prev);
                let ws = CriterionWorkspace::new(
                    &session.prior,
                    Arc::clone(&session.projector),
                    eta_matrix(&etas),
                    &res.z_bar,
                    alpha,
                    cfg.alpha_d,
                )?;
                let chosen = optimize_design(&ws, 1, &OptimizeOptions::default(), &mut rng)?;
                if round == 2 {
                    // third acquisition: compare criterion values
                    let oed_val = ws.criterion(chosen.eta())?;
                    let mut rand_vals = Vec::new();
                    for _ in 0..30 {
                        let r = random_design(&ws, 1, &mut rng)?;
                        if let Ok(v) = ws.criterion(r.eta()) {
                            rand_vals.push(v);
                        }
                    }
                    crit_win_here = oed_val >= median(rand_vals);
                }
                points.extend(chosen.points());
                etas.push(chosen.eta().column(0).into_owned());
                z_prev = res.z_bar;
            }
            if crit_win_here {
                crit_wins += 1;
            }

            // full runs for end-of-run objectives
            let s_oed = Session::new(RunConfig {
                policy: PolicyKind::Oed,
                ..cfg.clone()
            })?;
            oed_finals.push(run_sequential(&s_oed)?.record.rows.last().unwrap().j_hifi);
            let s_rnd = Session::new(RunConfig {
                policy: PolicyKind::Random,
                ..cfg
            })?;
            rand_finals.push(run_sequential(&s_rnd)?.record.rows.last().unwrap().j_hifi);
        }
        println!("criterion wins: {crit_wins}/20");
        println!(
            "end-of-run: oed median {:.5} vs random median {:.5} ({} of oed finals identical)",
            median(oed_finals.clone()),
            median(rand_finals.clone()),
            oed_finals
                .iter()
                .filter(|&&x| (x - oed_finals[0]).abs() < 1e-9)
                .count()
        );
    }
    Ok(())
}
