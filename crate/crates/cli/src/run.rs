//! The three commands.

use std::path::Path;

use dpwate::cbsr::ScoreObjective;
use dpwate::sieve::{BasisConfig, BasisMap};
use dpwate::sim::{self, ScenarioConfig, SimOptions};
use dpwate::solve::{balancing_weights, fit_nonprivate, unadjusted_balance, weighted_mean_difference};
use dpwate::wate::{analyze, AnalysisOptions, Mechanisms};
use dpwate::{EstimandSpec, PositivityBound, PrivateEstimate};
use nalgebra::DVector;
use serde::Serialize;

use crate::config::{Command, RunConfig};
use crate::ingest::{ingest_csv, Ingested};
use crate::report::*;
use crate::CliError;

const BALANCE_NOTICE: &str = "Balance rows are diagnostics computed from the raw data; they are NOT privacy-protected.";
const NONPRIVATE_NOTICE: &str = "Non-private reference estimate: NOT privacy-protected. Do not release.";

/// What a command produced: the JSON document and an optional console table.
#[derive(Debug, Clone)]
pub struct Outcome {
    pub json: String,
    pub table: Option<String>,
}

/// Runs a resolved configuration and writes the JSON report to
/// `config.output` when set. Returns what should go to the console.
pub fn run(config: &RunConfig) -> Result<Outcome, CliError> {
    let outcome = execute(config)?;
    if let Some(path) = &config.output {
        std::fs::write(path, format!("{}\n", outcome.json))
            .map_err(|e| CliError::Output { path: path.display().to_string(), message: e.to_string() })?;
    }
    Ok(outcome)
}

/// As [`run`] without touching the file system beyond reading the input.
pub fn execute(config: &RunConfig) -> Result<Outcome, CliError> {
    match config.command {
        Command::Analyze => {
            let report = analyze_report(config)?;
            Ok(Outcome { json: to_json(&report)?, table: None })
        }
        Command::Balance => {
            let report = balance_report(config)?;
            let table = render_balance(&report.balance);
            Ok(Outcome { json: to_json(&report)?, table: Some(table) })
        }
        Command::Simulate => {
            let report = simulate_report(config)?;
            let table = render_simulation(&report);
            Ok(Outcome { json: to_json(&report)?, table: Some(table) })
        }
    }
}

fn to_json<T: Serialize>(value: &T) -> Result<String, CliError> {
    serde_json::to_string_pretty(value).map_err(|e| CliError::Config(format!("cannot serialize report: {e}")))
}

/// Data, basis and options shared by `analyze` and `balance`.
struct Prepared {
    ingested: Ingested,
    basis: BasisMap,
    spec: EstimandSpec,
    eta: PositivityBound,
    options: AnalysisOptions,
}

fn prepare(config: &RunConfig) -> Result<Prepared, CliError> {
    let input = config.input.as_deref().ok_or_else(|| CliError::Config("--input is required".into()))?;
    let ingested = ingest_csv(Path::new(input), &config.roles()?, config.rescale)?;
    let basis = BasisMap::build(&ingested.dataset, BasisConfig::default())?;
    let options = AnalysisOptions { propensity_estimand: config.propensity_spec()?, ..AnalysisOptions::default() };
    Ok(Prepared { ingested, basis, spec: config.estimand_spec()?, eta: config.eta_bound()?, options })
}

fn release(est: &PrivateEstimate) -> Release {
    Release {
        point: est.point,
        variance: est.variance,
        ci: [est.ci_low, est.ci_high],
        denominator_floored: est.denominator_floored,
        variance_fallback: est.variance_fallback,
    }
}

/// Seed for the `k`-th sweep release, independent of the main one.
fn sweep_seed(seed: u64, k: usize) -> u64 {
    seed ^ (k as u64 + 1).wrapping_mul(0x9e37_79b9_7f4a_7c15)
}

fn balance_table(
    prep: &Prepared,
    private: &[(String, Vec<f64>)],
    include_nonprivate: bool,
) -> Result<BalanceTable, CliError> {
    let data = &prep.ingested.dataset;
    let raw = &prep.ingested.raw_covariates;
    let objective = ScoreObjective::new(data, &prep.basis, prep.spec, prep.eta)?;
    let weighted = |theta: &[f64]| -> Result<Vec<f64>, CliError> {
        let theta = DVector::from_column_slice(theta);
        let w = balancing_weights(&objective, &theta)?;
        Ok(weighted_mean_difference(raw, data.treatment(), &w)?.iter().copied().collect())
    };
    let mut rows = vec![BalanceRow {
        label: "Unadjusted Balance".into(),
        values: unadjusted_balance(raw, data.treatment())?.iter().copied().collect(),
    }];
    if include_nonprivate {
        let fit_spec = prep.options.propensity_estimand.unwrap_or(prep.spec);
        let theta = fit_nonprivate(data, &prep.basis, &fit_spec, prep.eta, &prep.options.solver)?;
        rows.push(BalanceRow {
            label: format!("Non-private CBSR ({UNPROTECTED})"),
            values: weighted(theta.as_slice())?,
        });
    }
    for (label, theta) in private {
        rows.push(BalanceRow { label: label.clone(), values: weighted(theta)? });
    }
    Ok(BalanceTable { notice: BALANCE_NOTICE.into(), covariates: prep.ingested.covariate_names.clone(), rows })
}

fn private_label(epsilon: f64, eta: Option<f64>) -> String {
    match eta {
        Some(eta) => format!("Private CBSR (epsilon={epsilon}, eta={eta})"),
        None => format!("Private CBSR (epsilon={epsilon})"),
    }
}

pub fn analyze_report(config: &RunConfig) -> Result<AnalyzeReport, CliError> {
    let prep = prepare(config)?;
    let budget = config.budget()?;
    let data = &prep.ingested.dataset;
    let est = analyze(data, &prep.basis, &prep.spec, prep.eta, &budget, config.seed, &prep.options)?;
    let mut private_rows = vec![(private_label(config.epsilon, None), est.theta_private.clone())];

    let mut eta_sweep = Vec::new();
    for (k, &eta) in config.eta_sweep.iter().enumerate() {
        let seed = sweep_seed(config.seed, k);
        let swept = analyze(data, &prep.basis, &prep.spec, PositivityBound::new(eta)?, &budget, seed, &prep.options)?;
        private_rows.push((private_label(config.epsilon, Some(eta)), swept.theta_private.clone()));
        eta_sweep.push(SweepEntry { eta, seed, epsilon: swept.ledger.spent(), release: release(&swept) });
    }

    let nonprivate = if config.include_nonprivate {
        let options = AnalysisOptions { mechanisms: Mechanisms::Disabled, ..prep.options };
        let np = analyze(data, &prep.basis, &prep.spec, prep.eta, &budget, config.seed, &options)?;
        Some(NonPrivateReport {
            protected: false,
            notice: NONPRIVATE_NOTICE.into(),
            point: np.point,
            variance: np.variance,
            ci: [np.ci_low, np.ci_high],
        })
    } else {
        None
    };

    let balance = balance_table(&prep, &private_rows, config.include_nonprivate)?;
    Ok(AnalyzeReport {
        command: "analyze",
        estimand: prep.spec.to_string(),
        n: data.len(),
        n_treated: data.n_treated(),
        n_control: data.n_control(),
        estimate: release(&est),
        ledger: (&est.ledger).into(),
        seed: config.seed,
        total_epsilon: est.ledger.spent() + eta_sweep.iter().map(|s| s.epsilon).sum::<f64>(),
        eta_sweep,
        nonprivate,
        balance,
        config: config.clone(),
    })
}

/// Balance of the private fit; the rest of the private release is drawn but
/// not reported, so the cost is still the full epsilon.
pub fn balance_report(config: &RunConfig) -> Result<BalanceReport, CliError> {
    let prep = prepare(config)?;
    let budget = config.budget()?;
    let est = analyze(&prep.ingested.dataset, &prep.basis, &prep.spec, prep.eta, &budget, config.seed, &prep.options)?;
    let balance = balance_table(&prep, &[(private_label(config.epsilon, None), est.theta_private)], config.include_nonprivate)?;
    Ok(BalanceReport {
        command: "balance",
        estimand: prep.spec.to_string(),
        seed: config.seed,
        total_epsilon: est.ledger.spent(),
        balance,
        config: config.clone(),
    })
}

pub fn simulate_report(config: &RunConfig) -> Result<SimulateReport, CliError> {
    let scenario = config.scenario.ok_or_else(|| CliError::Config("simulate needs a scenario".into()))?;
    let spec = config.estimand_spec()?;
    let base = ScenarioConfig {
        scenario: scenario.into(),
        n_sim: config.n_sim.unwrap_or(100),
        epsilon: config.epsilon,
        estimand: spec,
        ..ScenarioConfig::default()
    };
    let truth = match config.truth {
        Some(t) => t,
        None => sim::oracle_truth(&base, &spec, config.truth_draws.unwrap_or(2_000_000), config.seed ^ 0x7472_7574)?.value,
    };
    let options = SimOptions {
        eta: config.eta_bound()?,
        analysis: AnalysisOptions { propensity_estimand: config.propensity_spec()?, ..AnalysisOptions::default() },
        truth: Some(truth),
        ..SimOptions::default()
    };
    let budget = config.budget()?;
    let mut rows = Vec::new();
    for &n in &config.n {
        let cfg = ScenarioConfig { n, ..base.clone() };
        let r = sim::run_replicates(&cfg, &budget, config.seed, &options)?;
        rows.push(SimulationRow {
            n,
            mse: r.mse,
            relative_bias: r.relative_bias,
            bias: r.bias,
            coverage: r.coverage,
            interval_length: r.interval_length,
            replicates: r.per_replicate.len(),
            failures: r.failures,
        });
    }
    let scenario_name = match scenario {
        crate::config::ScenarioArg::WellSpecified => "well-specified",
        crate::config::ScenarioArg::Misspecified => "misspecified",
    };
    Ok(SimulateReport {
        command: "simulate",
        scenario: scenario_name.into(),
        estimand: spec.to_string(),
        epsilon: config.epsilon,
        truth,
        seed: config.seed,
        rows,
        config: config.clone(),
    })
}
