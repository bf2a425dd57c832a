// Scratch probe: acceptance criteria 7, 8, 9 behaviors at the defaults.
use mfopt::harness::{
    replay_trajectory, run_sequential, PolicyKind, RunConfig, Session, UpdateKind,
};
use mfopt::postopt::OptProblem as _;

fn main() -> mfopt::Result<()> {
    // Criterion 7: continuation vs linear on the same acquired data, N = 5.
    let cfg = RunConfig {
        n_budget: 5,
        ..RunConfig::default()
    };
    let session = Session::new(cfg.clone())?;
    let outcome = run_sequential(&session)?;
    let cont_traj = replay_trajectory(
        &session,
        &outcome.points,
        &outcome.data,
        UpdateKind::Continuation,
    )?;
    let lin_traj = replay_trajectory(
        &session,
        &outcome.points,
        &outcome.data,
        UpdateKind::Linear,
    )?;
    println!("criterion 7 (same data, J_hifi):");
    for (k, (zc, zl)) in cont_traj.iter().zip(&lin_traj).enumerate() {
        let jc = session.problem.pair().hifi_objective(zc)?;
        let jl = session.problem.pair().hifi_objective(zl)?;
        println!("  N={}: continuation {jc:.5} vs linear {jl:.5} {}", k + 1,
            if jc < jl { "OK" } else { "VIOLATION" });
    }

    // Criterion 8: over seeds, OED final vs random-policy final.
    println!("criterion 8 (final J_hifi per seed):");
    let mut oed_wins = 0;
    let n_seeds = 8u64; // subset for the probe; acceptance uses 20
    let mut oed_finals = Vec::new();
    let mut rand_finals = Vec::new();
    for seed in 0..n_seeds {
        let mk = |policy| -> mfopt::Result<f64> {
            let cfg = RunConfig {
                n_budget: 3,
                seed,
                policy,
                ..RunConfig::default()
            };
            let session = Session::new(cfg)?;
            let outcome = run_sequential(&session)?;
            Ok(outcome.record.rows.last().unwrap().j_hifi)
        };
        let jo = mk(PolicyKind::Oed)?;
        let jr = mk(PolicyKind::Random)?;
        if jo < jr {
            oed_wins += 1;
        }
        oed_finals.push(jo);
        rand_finals.push(jr);
        println!("  seed {seed}: oed {jo:.5} random {jr:.5}");
    }
    println!("  oed beats random in {oed_wins}/{n_seeds} seeds");
    oed_finals.sort_by(|a, b| a.partial_cmp(b).unwrap());
    rand_finals.sort_by(|a, b| a.partial_cmp(b).unwrap());
    println!(
        "  medians: oed {:.5} vs random {:.5}",
        oed_finals[oed_finals.len() / 2],
        rand_finals[rand_finals.len() / 2]
    );
    Ok(())
}
