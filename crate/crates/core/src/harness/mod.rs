//! Configuration-driven driver for the sequential acquisition loop and the
//! accompanying studies, with machine-readable CSV/JSON outputs.

mod sequential;
mod studies;

pub use sequential::{eta_matrix, replay_trajectory, run_sequential, SequentialOutcome};
pub use studies::{
    run_batch_study, run_continuation_study, run_oed_vs_random, BatchStudy, ContinuationStudy,
    OedVsRandomStudy, ScatterRow,
};

use std::cell::Cell;
use std::path::Path;
use std::sync::Arc;

use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use crate::discrepancy::PriorFactor;
use crate::error::{Error, Result};
use crate::oed::AlphaHeuristic;
use crate::postopt::{
    hessian_projector, solve_lowfi, ContinuationOptions, CorrectorMode, FidelityPair, Projector,
    RankSpec,
};
use crate::problems::{DiffusionReactionProblem, FlowConfig, FlowTransportProblem};
use crate::spaces::{build_grid, laplacian_prior, mass_matrix};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProblemKind {
    DiffusionReaction,
    FlowTransport,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PolicyKind {
    Oed,
    Random,
    Tracing,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum UpdateKind {
    Continuation,
    Linear,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CorrectorKind {
    Off,
    Single,
    Tolerance,
}

impl From<CorrectorKind> for CorrectorMode {
    fn from(k: CorrectorKind) -> Self {
        match k {
            CorrectorKind::Off => CorrectorMode::Off,
            CorrectorKind::Single => CorrectorMode::Single,
            CorrectorKind::Tolerance => CorrectorMode::Tolerance,
        }
    }
}

/// Resolved run configuration. Unknown keys in a config file are errors; all
/// defaults are materialized into the JSON sidecar of every run.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub problem: ProblemKind,
    /// Grid nodes; state and optimization variable share the grid.
    pub n: usize,
    pub prior_gamma_u: f64,
    pub prior_beta_u: f64,
    pub prior_gamma_z: f64,
    pub prior_beta_z: f64,
    pub alpha_d: f64,
    /// Truncation rank; 0 selects the automatic spectral threshold.
    pub rank: usize,
    pub rank_tol: f64,
    pub rank_cap: usize,
    pub n_steps: usize,
    pub corrector_tol: f64,
    pub corrector: CorrectorKind,
    pub update: UpdateKind,
    /// Total high-fidelity evaluations, including the first one at the
    /// low-fidelity minimizer.
    pub n_budget: usize,
    pub batch: usize,
    pub policy: PolicyKind,
    pub n_starts: usize,
    pub seed: u64,
    pub out_dir: String,
    pub alpha_floor_scale: f64,
    pub lowfi_tol: f64,
    /// Diffusion-reaction: diffusion coefficient and regularization weight.
    pub kappa: f64,
    pub gamma_reg: f64,
    /// Flow transport: time steps, regularization, and synthetic source.
    pub flow_steps: usize,
    pub flow_gamma_reg: f64,
    pub flow_source_amp: f64,
    pub flow_source_center: f64,
    pub flow_source_width: f64,
    /// Random comparison points per round in the acquisition-comparison study.
    pub scatter_candidates: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            problem: ProblemKind::DiffusionReaction,
            n: 65,
            prior_gamma_u: 0.1,
            prior_beta_u: 1.0,
            prior_gamma_z: 1.0,
            prior_beta_z: 10.0,
            alpha_d: 4e-2,
            rank: 0,
            rank_tol: 1e-3,
            rank_cap: 25,
            n_steps: 3,
            corrector_tol: 1e-10,
            corrector: CorrectorKind::Tolerance,
            update: UpdateKind::Continuation,
            n_budget: 3,
            batch: 1,
            policy: PolicyKind::Oed,
            n_starts: 8,
            seed: 0,
            out_dir: "out".into(),
            alpha_floor_scale: 1e-8,
            lowfi_tol: 1e-9,
            kappa: 0.05,
            gamma_reg: 1e-3,
            flow_steps: 400,
            flow_gamma_reg: 1e-6,
            flow_source_amp: 2e-4,
            flow_source_center: 0.3,
            flow_source_width: 0.08,
            scatter_candidates: 30,
        }
    }
}

impl RunConfig {
    /// Defaults adapted to the testbed's natural scales. The flow problem's
    /// source, discrepancy, and objective live at much smaller magnitudes
    /// than the diffusion-reaction problem, so its prior weights and noise
    /// scale follow the field scales (priors ~ 1/scale^2).
    pub fn for_problem(problem: ProblemKind) -> Self {
        match problem {
            ProblemKind::DiffusionReaction => Self::default(),
            ProblemKind::FlowTransport => Self {
                problem: ProblemKind::FlowTransport,
                n_budget: 5,
                prior_gamma_u: 2e8,
                prior_beta_u: 2e9,
                prior_gamma_z: 2e-7,
                prior_beta_z: 2e-6,
                alpha_d: 1e-13,
                rank: 10,
                flow_source_amp: 4e-3,
                ..Self::default()
            },
        }
    }

    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: RunConfig =
            toml::from_str(text).map_err(|e| Error::Config(format!("config parse: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_toml_str(&text)
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_budget < 1 {
            return Err(Error::Budget("n_budget must be at least 1".into()));
        }
        if self.batch < 1 || self.batch > self.n_budget {
            return Err(Error::Budget(format!(
                "batch must satisfy 1 <= p <= n_budget, got p={} with n_budget={}",
                self.batch, self.n_budget
            )));
        }
        if self.policy == PolicyKind::Tracing && self.batch != 1 {
            return Err(Error::Config(
                "the tracing policy acquires one point per round (batch = 1)".into(),
            ));
        }
        if self.n < 3 {
            return Err(Error::Config("grid needs at least 3 nodes".into()));
        }
        if !(self.alpha_d > 0.0) {
            return Err(Error::Config("alpha_d must be positive".into()));
        }
        if self.n_steps < 1 {
            return Err(Error::Config("n_steps must be at least 1".into()));
        }
        Ok(())
    }

    pub fn continuation_options(&self) -> ContinuationOptions {
        ContinuationOptions {
            n_steps: self.n_steps,
            corrector_tol: self.corrector_tol,
            mode: self.corrector.into(),
        }
    }

    pub fn rank_spec(&self) -> RankSpec {
        if self.rank > 0 {
            RankSpec::Fixed(self.rank)
        } else {
            RankSpec::Auto {
                tol: self.rank_tol,
                cap: self.rank_cap,
            }
        }
    }
}

/// High-fidelity call counter distinguishing acquisition evaluations (the
/// budget) from tagged diagnostic evaluations.
pub struct Budgeted<'a> {
    inner: &'a dyn FidelityPair,
    acquisition: Cell<usize>,
    diagnostic: Cell<usize>,
}

impl<'a> Budgeted<'a> {
    pub fn new(inner: &'a dyn FidelityPair) -> Self {
        Self {
            inner,
            acquisition: Cell::new(0),
            diagnostic: Cell::new(0),
        }
    }

    pub fn acquire(&self, z: &DVector<f64>) -> Result<DVector<f64>> {
        self.acquisition.set(self.acquisition.get() + 1);
        self.inner.hifi_solve(z)
    }

    pub fn diagnostic_solve(&self, z: &DVector<f64>) -> Result<DVector<f64>> {
        self.diagnostic.set(self.diagnostic.get() + 1);
        self.inner.hifi_solve(z)
    }

    pub fn diagnostic_objective(&self, z: &DVector<f64>) -> Result<f64> {
        let u = self.diagnostic_solve(z)?;
        Ok(self.inner.objective(&u, z))
    }

    pub fn acquisition_count(&self) -> usize {
        self.acquisition.get()
    }

    pub fn diagnostic_count(&self) -> usize {
        self.diagnostic.get()
    }
}

/// Concrete testbed instance selected by the configuration.
pub enum ProblemInstance {
    DiffusionReaction(DiffusionReactionProblem),
    FlowTransport(FlowTransportProblem),
}

impl ProblemInstance {
    pub fn pair(&self) -> &dyn FidelityPair {
        match self {
            ProblemInstance::DiffusionReaction(p) => p,
            ProblemInstance::FlowTransport(p) => p,
        }
    }

    pub fn diffusion_reaction(&self) -> Option<&DiffusionReactionProblem> {
        match self {
            ProblemInstance::DiffusionReaction(p) => Some(p),
            _ => None,
        }
    }
}

/// A fully constructed run context: problem, prior, low-fidelity minimizer,
/// and projector.
pub struct Session {
    pub config: RunConfig,
    pub problem: ProblemInstance,
    pub prior: Arc<PriorFactor>,
    pub projector: Arc<Projector>,
    pub z_tilde: DVector<f64>,
    pub alpha: AlphaHeuristic,
}

impl Session {
    pub fn new(config: RunConfig) -> Result<Self> {
        config.validate()?;
        let problem = match config.problem {
            ProblemKind::DiffusionReaction => ProblemInstance::DiffusionReaction(
                DiffusionReactionProblem::new(config.n, config.kappa, config.gamma_reg)?,
            ),
            ProblemKind::FlowTransport => {
                ProblemInstance::FlowTransport(FlowTransportProblem::new(FlowConfig {
                    n: config.n,
                    n_steps: config.flow_steps,
                    gamma_reg: config.flow_gamma_reg,
                    source_amp: config.flow_source_amp,
                    source_center: config.flow_source_center,
                    source_width: config.flow_source_width,
                    ..FlowConfig::default()
                })?)
            }
        };

        let grid = build_grid(config.n, 0.0, 1.0)?;
        let m = Arc::new(mass_matrix(&grid));
        let w_u = laplacian_prior(&grid, config.prior_gamma_u, config.prior_beta_u)?;
        let w_z = Arc::new(laplacian_prior(
            &grid,
            config.prior_gamma_z,
            config.prior_beta_z,
        )?);

        let z0 = match config.problem {
            ProblemKind::DiffusionReaction => DVector::from_element(config.n, 1.0),
            ProblemKind::FlowTransport => DVector::zeros(config.n),
        };
        let z_tilde = solve_lowfi(problem.pair(), &z0, config.lowfi_tol)?;

        let projector = Arc::new(hessian_projector(
            problem.pair(),
            &z_tilde,
            &w_z,
            config.rank_spec(),
        )?);

        let prior = Arc::new(PriorFactor::new(
            &w_u,
            Arc::clone(&m),
            Arc::clone(&w_z),
            Arc::clone(&m),
            z_tilde.clone(),
        )?);
        let alpha = AlphaHeuristic::new(&w_z, Arc::clone(&m), config.alpha_floor_scale);

        Ok(Self {
            config,
            problem,
            prior,
            projector,
            z_tilde,
            alpha,
        })
    }
}

/// One per-iteration record row. Vectors are serialized as `;`-joined decimal
/// strings; multiple acquired points are `|`-separated.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct RunRow {
    pub k: usize,
    pub points_eta: String,
    pub points_z: String,
    pub data_norms: String,
    pub alpha_k: Option<f64>,
    pub criterion_value: Option<f64>,
    pub theta_intercept_norm: f64,
    pub theta_slope_norm: f64,
    pub z_bar: String,
    pub j_lofi: f64,
    pub j_hifi: f64,
    pub wall_time_s: f64,
}

#[derive(Debug, Clone, Default)]
pub struct RunRecord {
    pub rows: Vec<RunRow>,
}

pub(crate) fn fmt_vec(v: &DVector<f64>) -> String {
    v.iter()
        .map(|x| format!("{x:.17e}"))
        .collect::<Vec<_>>()
        .join(";")
}

pub(crate) fn fmt_points(points: &[DVector<f64>]) -> String {
    points.iter().map(fmt_vec).collect::<Vec<_>>().join("|")
}

impl RunRecord {
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

    pub fn read_csv(path: &Path) -> Result<Self> {
        let mut r = csv::Reader::from_path(path)?;
        let mut rows = Vec::new();
        for rec in r.deserialize() {
            rows.push(rec?);
        }
        Ok(Self { rows })
    }
}

/// Write the fully resolved configuration next to the run outputs.
pub fn write_resolved_config(config: &RunConfig, out_dir: &Path) -> Result<()> {
    std::fs::create_dir_all(out_dir)?;
    let path = out_dir.join("config.resolved.json");
    let json = serde_json::to_string_pretty(config)?;
    std::fs::write(path, json)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn config_defaults_round_trip_and_unknown_keys_error() {
        let cfg = RunConfig::default();
        let json = serde_json::to_string(&cfg).unwrap();
        let back: RunConfig = serde_json::from_str(&json).unwrap();
        assert_eq!(back.n, cfg.n);

        let toml_ok = "problem = \"diffusion_reaction\"\nn_budget = 2\n";
        assert!(RunConfig::from_toml_str(toml_ok).is_ok());

        let toml_bad = "problem = \"diffusion_reaction\"\nnot_a_key = 1\n";
        assert!(matches!(
            RunConfig::from_toml_str(toml_bad),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn config_budget_validation() {
        let mut cfg = RunConfig::default();
        cfg.n_budget = 0;
        assert!(matches!(cfg.validate(), Err(Error::Budget(_))));
        cfg.n_budget = 2;
        cfg.batch = 3;
        assert!(matches!(cfg.validate(), Err(Error::Budget(_))));
        cfg.batch = 2;
        cfg.policy = PolicyKind::Tracing;
        assert!(matches!(cfg.validate(), Err(Error::Config(_))));
    }

    #[test]
    fn exit_codes_follow_error_kinds() {
        assert_eq!(Error::Config("x".into()).exit_code(), 2);
        assert_eq!(Error::Budget("x".into()).exit_code(), 4);
        assert_eq!(
            Error::NoConvergence {
                iterations: 1,
                residual: 1.0
            }
            .exit_code(),
            3
        );
    }
}
