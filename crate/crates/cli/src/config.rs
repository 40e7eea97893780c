//! Command-line flags, the TOML config file and the resolved run configuration.

use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use dpwate::sim::Scenario;
use dpwate::{EstimandKind, EstimandSpec, PositivityBound, PrivacyBudget};
use serde::{Deserialize, Serialize};

use crate::ingest::{ColumnSpec, Rescale, Roles};
use crate::CliError;

pub const DEFAULT_ETA: f64 = 0.05;
/// Budget split used by `simulate` unless overridden.
pub const SIMULATION_P: f64 = 0.2;
pub const SIMULATION_R: f64 = 0.3;

#[derive(Debug, Parser)]
#[command(name = "dpwate", version, about = "Differentially private weighted average treatment effects")]
pub struct Cli {
    #[command(subcommand)]
    pub command: CommandArgs,
}

#[derive(Debug, Subcommand)]
pub enum CommandArgs {
    /// Private point estimate, variance and interval for a CSV file.
    Analyze(Flags),
    /// Monte Carlo study on a synthetic scenario.
    Simulate(Flags),
    /// Covariate balance table only.
    Balance(Flags),
}

impl CommandArgs {
    pub fn split(self) -> (Command, Flags) {
        match self {
            Self::Analyze(f) => (Command::Analyze, f),
            Self::Simulate(f) => (Command::Simulate, f),
            Self::Balance(f) => (Command::Balance, f),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Command {
    Analyze,
    Simulate,
    Balance,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum ScenarioArg {
    WellSpecified,
    Misspecified,
}

impl From<ScenarioArg> for Scenario {
    fn from(s: ScenarioArg) -> Self {
        match s {
            ScenarioArg::WellSpecified => Scenario::WellSpecified,
            ScenarioArg::Misspecified => Scenario::Misspecified,
        }
    }
}

/// Every setting is optional here; the config file and the defaults fill
/// the gaps. Keys in the TOML file use the flag names.
#[derive(Debug, Clone, Default, Args, Deserialize)]
#[serde(default, deny_unknown_fields, rename_all = "kebab-case")]
pub struct Flags {
    /// TOML file whose values take precedence over the flags.
    #[arg(long)]
    #[serde(skip)]
    pub config: Option<PathBuf>,
    /// Accepted in config files so a report's config echo can be reused.
    #[arg(skip)]
    pub command: Option<Command>,
    /// Input CSV with a header row.
    #[arg(long)]
    pub input: Option<PathBuf>,
    /// Treatment column, coded 0/1
    #[arg(long)]
    pub treatment: Option<String>,
    /// Outcome column, or `positive(col)` for `1{col > 0}`.
    #[arg(long)]
    pub outcome: Option<String>,
    /// Comma-separated covariate columns.
    #[arg(long, value_delimiter = ',')]
    pub covariates: Option<Vec<String>>,
    /// ate, att, atc, ato or custom:<alpha>,<beta>.
    #[arg(long)]
    pub estimand: Option<String>,
    /// Score used to fit the propensity model (defaults to ate for att and atc).
    #[arg(long)]
    pub propensity_estimand: Option<String>,
    /// Total privacy budget of one analysis
    #[arg(long)]
    pub epsilon: Option<f64>,
    /// Positivity bound; propensities are truncated to [eta, 1 - eta].
    #[arg(long)]
    pub eta: Option<f64>,
    /// Extra private analyses at these eta values. Each costs a further epsilon.
    #[arg(long, value_delimiter = ',')]
    pub eta_sweep: Option<Vec<f64>>,
    /// Share of the point-estimate budget spent on the propensity model.
    #[arg(long)]
    pub p: Option<f64>,
    /// Shares of the component budget for the treated outcome sum, treated
    /// weight sum, control outcome sum and control weight sum
    #[arg(long)]
    pub q1: Option<f64>,
    #[arg(long)]
    pub q2: Option<f64>,
    #[arg(long)]
    pub q3: Option<f64>,
    #[arg(long)]
    pub q4: Option<f64>,
    /// Share of epsilon spent on the variance.
    #[arg(long)]
    pub r: Option<f64>,
    /// RNG seed. Drawn at random and echoed when absent.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Bring covariates into the unit ball (bare flag means min-max).
    #[arg(long, num_args = 0..=1, default_missing_value = "min-max")]
    pub rescale: Option<Rescale>,
    /// Also report the non-private estimate. It is NOT privacy-protected.
    #[arg(long, num_args = 0, default_missing_value = "true")]
    pub include_nonprivate: Option<bool>,
    /// Write the JSON report here instead of standard output.
    #[arg(long)]
    pub output: Option<PathBuf>,
    /// Synthetic scenario for `simulate`.
    #[arg(long, value_enum)]
    pub scenario: Option<ScenarioArg>,
    /// Sample sizes for `simulate`, one table row each.
    #[arg(long = "n", value_delimiter = ',')]
    pub n: Option<Vec<usize>>,
    /// Replicates per sample size.
    #[arg(long)]
    pub n_sim: Option<usize>,
    /// Known value of the estimand; computed by Monte Carlo when absent.
    #[arg(long)]
    pub truth: Option<f64>,
    /// Monte Carlo draws for the truth.
    #[arg(long)]
    pub truth_draws: Option<usize>,
}

impl Flags {
    /// Fields set in `self` win over those in `other`.
    fn over(self, other: Flags) -> Flags {
        Flags {
            config: self.config.or(other.config),
            command: self.command.or(other.command),
            input: self.input.or(other.input),
            treatment: self.treatment.or(other.treatment),
            outcome: self.outcome.or(other.outcome),
            covariates: self.covariates.or(other.covariates),
            estimand: self.estimand.or(other.estimand),
            propensity_estimand: self.propensity_estimand.or(other.propensity_estimand),
            epsilon: self.epsilon.or(other.epsilon),
            eta: self.eta.or(other.eta),
            eta_sweep: self.eta_sweep.or(other.eta_sweep),
            p: self.p.or(other.p),
            q1: self.q1.or(other.q1),
            q2: self.q2.or(other.q2),
            q3: self.q3.or(other.q3),
            q4: self.q4.or(other.q4),
            r: self.r.or(other.r),
            seed: self.seed.or(other.seed),
            rescale: self.rescale.or(other.rescale),
            include_nonprivate: self.include_nonprivate.or(other.include_nonprivate),
            output: self.output.or(other.output),
            scenario: self.scenario.or(other.scenario),
            n: self.n.or(other.n),
            n_sim: self.n_sim.or(other.n_sim),
            truth: self.truth.or(other.truth),
            truth_draws: self.truth_draws.or(other.truth_draws),
        }
    }
}

/// Fully resolved settings. Serialized with the same keys as the config
/// file, so the echo in a report re-runs the command exactly.
#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub struct RunConfig {
    pub command: Command,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub input: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub treatment: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub outcome: Option<String>,
    #[serde(skip_serializing_if = "Vec::is_empty")]
    pub covariates: Vec<String>,
    pub estimand: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub propensity_estimand: Option<String>,
    pub epsilon: f64,
    pub eta: f64,
    #[serde(skip_serializing_if = "Vec::is_empty")]
    pub eta_sweep: Vec<f64>,
    pub p: f64,
    pub q1: f64,
    pub q2: f64,
    pub q3: f64,
    pub q4: f64,
    pub r: f64,
    pub seed: u64,
    pub rescale: Rescale,
    pub include_nonprivate: bool,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub output: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub scenario: Option<ScenarioArg>,
    #[serde(skip_serializing_if = "Vec::is_empty")]
    pub n: Vec<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub n_sim: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub truth: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub truth_draws: Option<usize>,
}

pub fn load_config_file(path: &Path) -> Result<Flags, CliError> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| CliError::Config(format!("cannot read config file {}: {e}", path.display())))?;
    toml::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))
}

impl RunConfig {
    /// Merges the config file (if any) over `flags`, applies defaults and
    /// validates the result.
    pub fn resolve(command: Command, flags: Flags) -> Result<Self, CliError> {
        let flags = match &flags.config {
            Some(path) => load_config_file(path)?.over(flags),
            None => flags,
        };
        if let Some(c) = flags.command {
            if c != command {
                return Err(CliError::Config(format!("config file is for '{c:?}', not '{command:?}'").to_lowercase()));
            }
        }
        // 53 bits keeps the seed exact in JSON and TOML readers.
        Self::from_flags(command, flags, || rand::random::<u64>() >> 11)
    }

    /// As [`RunConfig::resolve`] without reading a config file; `seed` is
    /// called only when no seed was given.
    pub fn from_flags(command: Command, f: Flags, seed: impl FnOnce() -> u64) -> Result<Self, CliError> {
        let simulate = command == Command::Simulate;
        let estimand: EstimandSpec = f.estimand.as_deref().unwrap_or("ate").parse()?;
        let propensity_estimand = match f.propensity_estimand.as_deref() {
            Some(s) => Some(s.parse::<EstimandSpec>()?.to_string()),
            None if matches!(estimand.kind, EstimandKind::Att | EstimandKind::Atc) => Some("ate".to_string()),
            None => None,
        };
        let (p_default, r_default) = if simulate {
            (SIMULATION_P, SIMULATION_R)
        } else {
            let d = PrivacyBudget::with_defaults(1.0)?;
            (d.p, d.r)
        };
        let epsilon = match (f.epsilon, simulate) {
            (Some(e), _) => e,
            (None, true) => 5.0,
            (None, false) => return Err(CliError::Config("--epsilon is required".into())),
        };
        if !simulate {
            for (name, v) in [("--input", f.input.is_some()), ("--treatment", f.treatment.is_some()), ("--outcome", f.outcome.is_some())] {
                if !v {
                    return Err(CliError::Config(format!("{name} is required")));
                }
            }
            if f.covariates.as_ref().is_none_or(Vec::is_empty) {
                return Err(CliError::Config("--covariates is required".into()));
            }
        }
        let cfg = RunConfig {
            command,
            input: f.input,
            treatment: f.treatment,
            outcome: f.outcome,
            covariates: f.covariates.unwrap_or_default(),
            estimand: estimand.to_string(),
            propensity_estimand,
            epsilon,
            eta: f.eta.unwrap_or(DEFAULT_ETA),
            eta_sweep: f.eta_sweep.unwrap_or_default(),
            p: f.p.unwrap_or(p_default),
            q1: f.q1.unwrap_or(0.25),
            q2: f.q2.unwrap_or(0.25),
            q3: f.q3.unwrap_or(0.25),
            q4: f.q4.unwrap_or(0.25),
            r: f.r.unwrap_or(r_default),
            seed: f.seed.unwrap_or_else(seed),
            rescale: f.rescale.unwrap_or_default(),
            include_nonprivate: f.include_nonprivate.unwrap_or(false),
            output: f.output,
            scenario: simulate.then(|| f.scenario.unwrap_or(ScenarioArg::WellSpecified)),
            n: if simulate { f.n.unwrap_or_else(|| vec![5000]) } else { Vec::new() },
            n_sim: simulate.then(|| f.n_sim.unwrap_or(100)),
            truth: f.truth,
            truth_draws: simulate.then(|| f.truth_draws.unwrap_or(2_000_000)),
        };
        cfg.budget()?;
        PositivityBound::new(cfg.eta)?;
        for &eta in &cfg.eta_sweep {
            PositivityBound::new(eta)?;
        }
        if simulate && (cfg.n.is_empty() || cfg.n_sim == Some(0)) {
            return Err(CliError::Config("simulate needs at least one sample size and one replicate".into()));
        }
        Ok(cfg)
    }

    pub fn budget(&self) -> Result<PrivacyBudget, CliError> {
        Ok(PrivacyBudget::new(self.epsilon, self.p, [self.q1, self.q2, self.q3, self.q4], self.r)?)
    }

    pub fn estimand_spec(&self) -> Result<EstimandSpec, CliError> {
        Ok(self.estimand.parse()?)
    }

    pub fn propensity_spec(&self) -> Result<Option<EstimandSpec>, CliError> {
        Ok(self.propensity_estimand.as_deref().map(str::parse).transpose()?)
    }

    pub fn eta_bound(&self) -> Result<PositivityBound, CliError> {
        Ok(PositivityBound::new(self.eta)?)
    }

    pub fn roles(&self) -> Result<Roles, CliError> {
        let missing = |name: &str| CliError::Config(format!("--{name} is required"));
        Ok(Roles {
            treatment: self.treatment.clone().ok_or_else(|| missing("treatment"))?,
            outcome: self.outcome.as_deref().ok_or_else(|| missing("outcome"))?.parse::<ColumnSpec>()?,
            covariates: self.covariates.clone(),
        })
    }
}
