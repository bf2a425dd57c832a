// Scratch probe: theta_bar and update vs alpha_d.
use mfopt::calibration::{posterior_factors, DesignSet, DiscrepancyData};
use mfopt::harness::{RunConfig, Session};
use mfopt::postopt::{continuation_update, OptProblem as _};
use std::sync::Arc;

fn main() -> mfopt::Result<()> {
    let cfg = RunConfig::default();
    let session = Session::new(cfg.clone())?;
    let problem = session.problem.pair();
    let z1 = session.z_tilde.clone();
    let d1 = problem.hifi_solve(&z1)? - problem.lowfi_solve(&z1)?;
    println!("d1 norm {:.4}", problem.mass_u().norm(&d1));
    for ad in [1e-2, 1e-1, 3e-1, 1.0] {
        let design = Arc::new(DesignSet::new(vec![z1.clone()], session.prior.m_z())?);
        let data = DiscrepancyData::new(vec![d1.clone()]);
        let f = posterior_factors(design, &data, Arc::clone(&session.prior), ad)?;
        let th = f.map_estimate(&data)?;
        let res = continuation_update(problem, &session.projector, &session.z_tilde, &th, &cfg.continuation_options());
        match res {
            Ok(r) => println!("ad={ad:.0e}: |i|={:.4} |S|={:.4} -> Jh(zbar)={:.5}", th.intercept.norm(), th.slope.norm(), problem.hifi_objective(&r.z_bar)?),
            Err(e) => println!("ad={ad:.0e}: |i|={:.4} -> update FAILED: {e}", th.intercept.norm()),
        }
    }
    Ok(())
}
