// Scratch probe: testbed configuration grid for the acceptance behaviors.
use mfopt::harness::{run_sequential, RunConfig, Session, UpdateKind};
use mfopt::postopt::OptProblem as _;

fn batch_finals(cfg: &RunConfig) -> mfopt::Result<Vec<(usize, f64, Vec<f64>)>> {
    let mut out = Vec::new();
    for p in [1usize, 2, 3, 6] {
        let cfg_p = RunConfig {
            batch: p,
            n_budget: 6,
            ..cfg.clone()
        };
        let session = Session::new(cfg_p)?;
        let outcome = run_sequential(&session)?;
        let traj: Vec<f64> = outcome.record.rows.iter().map(|r| r.j_hifi).collect();
        out.push((p, *traj.last().unwrap(), traj));
    }
    Ok(out)
}

fn main() {
    for (beta_u, beta_z) in [(1.0, 3.0), (1.0, 10.0), (1.0, 30.0), (0.3, 10.0)] {
        for alpha_d in [1e-2, 4e-2] {
            {
                let cfg = RunConfig {
                    prior_beta_u: beta_u,
                    prior_gamma_u: 0.1 * beta_u,
                    prior_beta_z: beta_z,
                    prior_gamma_z: 0.1 * beta_z,
                    alpha_d,
                    update: UpdateKind::Continuation,
                    ..RunConfig::default()
                };
                print!("bu={beta_u:.0e} bz={beta_z:.0e} ad={alpha_d:.0e}: ");
                // criterion 6 check: N=3 gap recovery
                let c6 = (|| -> mfopt::Result<(f64, f64, f64)> {
                    let cfg3 = RunConfig {
                        n_budget: 3,
                        ..cfg.clone()
                    };
                    let session = Session::new(cfg3)?;
                    let dr = session.problem.diffusion_reaction().unwrap();
                    let z_star = dr.hifi_optimum(&session.z_tilde, 1e-8)?;
                    let j_best = session.problem.pair().hifi_objective(&z_star)?;
                    let outcome = run_sequential(&session)?;
                    let j0 = outcome.record.rows[0].j_hifi;
                    let jf = outcome.record.rows.last().unwrap().j_hifi;
                    Ok((j0, jf, j_best))
                })();
                match c6 {
                    Ok((j0, jf, jb)) => {
                        let recovery = 1.0 - (jf - jb) / (j0 - jb);
                        print!("gap_rec={:.1}% ", recovery * 100.0);
                    }
                    Err(e) => print!("N3 FAILED ({e}) "),
                }
                match batch_finals(&cfg) {
                    Ok(rows) => {
                        let f: Vec<(usize, f64)> =
                            rows.iter().map(|(p, j, _)| (*p, *j)).collect();
                        let p1_at_2 = rows[0].2.get(2).cloned().unwrap_or(f64::NAN);
                        let p6_final = f[3].1;
                        println!(
                            "finals p1={:.4} p2={:.4} p3={:.4} p6={:.4} | p1@N2={:.4} {} order16 {}",
                            f[0].1,
                            f[1].1,
                            f[2].1,
                            f[3].1,
                            p1_at_2,
                            if p1_at_2 < p6_final { "BEATS" } else { "loses" },
                            if f[0].1 <= f[1].1 && f[1].1 <= f[3].1 {
                                "OK"
                            } else {
                                "BAD"
                            }
                        );
                    }
                    Err(e) => println!("batch FAILED ({e})"),
                }
            }
        }
    }
}
