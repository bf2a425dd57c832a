use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use mfopt::harness::{
    run_batch_study, run_continuation_study, run_oed_vs_random, run_sequential, PolicyKind,
    RunConfig, Session,
};

#[derive(Parser)]
#[command(name = "mfopt", about = "Multi-fidelity optimizer correction driver")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum PolicyArg {
    Oed,
    Random,
    Tracing,
}

#[derive(Clone, Copy, ValueEnum)]
enum StudyArg {
    Sequential,
    Continuation,
    OedVsRandom,
    Batch,
}

#[derive(Subcommand)]
enum Command {
    /// Run the sequential loop or one of the studies from a config file.
    Run {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, value_enum)]
        policy: Option<PolicyArg>,
        #[arg(long, value_enum, default_value = "sequential")]
        study: StudyArg,
    },
}

fn run(cli: Cli) -> mfopt::Result<()> {
    match cli.command {
        Command::Run {
            config,
            seed,
            out,
            policy,
            study,
        } => {
            let mut cfg = RunConfig::from_file(&config)?;
            if let Some(s) = seed {
                cfg.seed = s;
            }
            if let Some(o) = out {
                cfg.out_dir = o.to_string_lossy().into_owned();
            }
            if let Some(p) = policy {
                cfg.policy = match p {
                    PolicyArg::Oed => PolicyKind::Oed,
                    PolicyArg::Random => PolicyKind::Random,
                    PolicyArg::Tracing => PolicyKind::Tracing,
                };
            }
            cfg.validate()?;
            let out_dir = PathBuf::from(&cfg.out_dir);
            mfopt::harness::write_resolved_config(&cfg, &out_dir)?;

            match study {
                StudyArg::Sequential => {
                    let session = Session::new(cfg)?;
                    let outcome = run_sequential(&session)?;
                    outcome.record.write_csv(&out_dir.join("record.csv"))?;
                    log::info!(
                        "run complete: {} acquisitions, {} diagnostic solves",
                        outcome.acquisition_count,
                        outcome.diagnostic_count
                    );
                }
                StudyArg::Continuation => {
                    let session = Session::new(cfg)?;
                    let study = run_continuation_study(&session)?;
                    study.write_csv(&out_dir.join("continuation.csv"))?;
                }
                StudyArg::OedVsRandom => {
                    let session = Session::new(cfg)?;
                    let study = run_oed_vs_random(&session)?;
                    study.record.write_csv(&out_dir.join("record.csv"))?;
                    study.write_scatter_csv(&out_dir.join("scatter.csv"))?;
                    log::info!("uncertainty-axis correlation: {:.4}", study.correlation);
                }
                StudyArg::Batch => {
                    let study = run_batch_study(&cfg)?;
                    for (p, record) in &study.runs {
                        record.write_csv(&out_dir.join(format!("record_p{p}.csv")))?;
                    }
                }
            }
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    env_logger::init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
