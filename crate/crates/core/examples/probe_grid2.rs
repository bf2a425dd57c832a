// Scratch probe: refinement grid for endgame stability.
use mfopt::harness::{run_sequential, PolicyKind, RunConfig, Session};

fn finals(cfg: &RunConfig, budget: usize, batch: usize) -> mfopt::Result<Vec<f64>> {
    let cfg = RunConfig {
        n_budget: budget,
        batch,
        ..cfg.clone()
    };
    let session = Session::new(cfg)?;
    let outcome = run_sequential(&session)?;
    Ok(outcome.record.rows.iter().map(|r| r.j_hifi).collect())
}

fn main() {
    for beta_z in [10.0, 20.0] {
        for alpha_d in [4e-2, 8e-2] {
            for rank in [0usize, 5] {
                let cfg = RunConfig {
                    prior_beta_z: beta_z,
                    prior_gamma_z: 0.1 * beta_z,
                    alpha_d,
                    rank,
                    ..RunConfig::default()
                };
                print!("bz={beta_z:.0} ad={alpha_d:.0e} r={rank}: ");
                let ok = (|| -> mfopt::Result<()> {
                    let t1 = finals(&cfg, 6, 1)?;
                    let t2 = finals(&cfg, 6, 2)?;
                    let t6 = finals(&cfg, 6, 6)?;
                    let (p1, p2, p6) = (
                        *t1.last().unwrap(),
                        *t2.last().unwrap(),
                        *t6.last().unwrap(),
                    );
                    let p1n2 = t1[2];
                    print!(
                        "traj={} | p1={p1:.4} p2={p2:.4} p6={p6:.4} p1@2={p1n2:.4} ord={} beats={} ",
                        t1.iter()
                            .map(|j| format!("{j:.3}"))
                            .collect::<Vec<_>>()
                            .join(">"),
                        p1 <= p2 && p2 <= p6,
                        p1n2 < p6
                    );
                    // criterion 8 medians over 6 seeds
                    let mut oed = Vec::new();
                    let mut rnd = Vec::new();
                    for seed in 0..6 {
                        let c = RunConfig {
                            n_budget: 3,
                            seed,
                            ..cfg.clone()
                        };
                        let s1 = Session::new(RunConfig {
                            policy: PolicyKind::Oed,
                            ..c.clone()
                        })?;
                        oed.push(
                            run_sequential(&s1)?.record.rows.last().unwrap().j_hifi,
                        );
                        let s2 = Session::new(RunConfig {
                            policy: PolicyKind::Random,
                            ..c
                        })?;
                        rnd.push(
                            run_sequential(&s2)?.record.rows.last().unwrap().j_hifi,
                        );
                    }
                    oed.sort_by(|a, b| a.partial_cmp(b).unwrap());
                    rnd.sort_by(|a, b| a.partial_cmp(b).unwrap());
                    println!("| c8: oed_med={:.4} rnd_med={:.4}", oed[3], rnd[3]);
                    Ok(())
                })();
                if let Err(e) = ok {
                    println!("FAILED: {e}");
                }
            }
        }
    }
}
