//! Monte Carlo harness: the two simulation scenarios, an oracle for the true
//! estimand, and a replicate runner with the four evaluation metrics.
//!
//! Covariates are drawn from an equicorrelated normal and each row is divided
//! by `max(1, ||x||)`. The treatment and outcome models are evaluated on the
//! rescaled covariates, so the estimand refers to the distribution the
//! estimator actually sees.

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::cbsr::{expit, h_fn};
use crate::error::{Error, Result};
use crate::model::{CausalDataset, EstimandSpec, PositivityBound, PrivacyBudget};
use crate::sieve::{BasisConfig, BasisMap};
use crate::wate::{analyze, AnalysisOptions};

/// ATE at the default configuration, from 10^7 oracle draws. The ATE does
/// not involve the propensity, so it is the same for both scenarios.
pub const SCENARIO1_ATE_TRUTH: f64 = 0.216_902_38;
/// Monte Carlo standard error of [`SCENARIO1_ATE_TRUTH`].
pub const SCENARIO1_ATE_TRUTH_SE: f64 = 7.4e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scenario {
    /// Logistic propensity, linear in the covariates.
    WellSpecified,
    /// Nonlinear propensity; a linear working model is misspecified.
    Misspecified,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioConfig {
    pub n: usize,
    pub rho: f64,
    pub d_raw: usize,
    /// `(beta_0, ..., beta_d)` of the outcome model.
    pub outcome_coeffs: Vec<f64>,
    pub gamma: f64,
    pub scenario: Scenario,
    pub n_sim: usize,
    pub epsilon: f64,
    pub estimand: EstimandSpec,
}

impl Default for ScenarioConfig {
    fn default() -> Self {
        Self {
            n: 5000,
            rho: 0.2,
            d_raw: 4,
            outcome_coeffs: vec![0.15, -0.2, 0.3, -0.4, 0.6],
            gamma: 1.0,
            scenario: Scenario::WellSpecified,
            n_sim: 100,
            epsilon: 5.0,
            estimand: EstimandSpec::ate(),
        }
    }
}

impl ScenarioConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.rho) {
            return Err(Error::InvalidParameter(format!("rho must lie in [0, 1], got {}", self.rho)));
        }
        if self.n_sim == 0 || self.n < 2 {
            return Err(Error::InvalidParameter("need n >= 2 and n_sim >= 1".into()));
        }
        if self.d_raw != 4 {
            return Err(Error::InvalidParameter(format!(
                "the scenario propensity models use 4 covariates, got d_raw = {}",
                self.d_raw
            )));
        }
        if self.outcome_coeffs.len() != self.d_raw + 1 {
            return Err(Error::DimensionMismatch(format!(
                "{} outcome coefficients for {} covariates",
                self.outcome_coeffs.len(),
                self.d_raw
            )));
        }
        Ok(())
    }

    pub fn model(&self) -> ScenarioModel {
        ScenarioModel {
            scenario: self.scenario,
            rho: self.rho,
            d_raw: self.d_raw,
            outcome_coeffs: self.outcome_coeffs.clone(),
            gamma: self.gamma,
        }
    }
}

/// The data-generating process, kept alongside each generated dataset.
#[derive(Debug, Clone, PartialEq)]
pub struct ScenarioModel {
    scenario: Scenario,
    rho: f64,
    d_raw: usize,
    outcome_coeffs: Vec<f64>,
    gamma: f64,
}

impl ScenarioModel {
    /// Rescaled covariate row.
    pub fn draw_covariates<R: Rng + ?Sized>(&self, rng: &mut R, out: &mut [f64]) {
        let shared: f64 = StandardNormal.sample(rng);
        let (a, b) = ((1.0 - self.rho).sqrt(), self.rho.sqrt());
        for v in out.iter_mut() {
            let own: f64 = StandardNormal.sample(rng);
            *v = a * own + b * shared;
        }
        let norm = out.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm > 1.0 {
            out.iter_mut().for_each(|v| *v /= norm);
        }
    }

    pub fn propensity(&self, x: &[f64]) -> f64 {
        let g = match self.scenario {
            Scenario::WellSpecified => 0.1 + 0.8 * x[0] + 2.0 * x[1] - 1.0 * x[2] - 1.8 * x[3],
            Scenario::Misspecified => {
                0.1 + 0.4 * (-x[0] / 2.0).exp() + x[1] * x[2] - 0.6 * x[0].sin() - 0.9 * x[3] * x[3]
            }
        };
        expit(g)
    }

    /// `E[Y(z) | X = x]`.
    pub fn outcome_mean(&self, x: &[f64], z: u8) -> f64 {
        let c = &self.outcome_coeffs;
        let g = c[0] + x.iter().zip(&c[1..]).map(|(a, b)| a * b).sum::<f64>() + self.gamma * f64::from(z);
        expit(g)
    }
}

/// A generated dataset with the true propensities of its units.
#[derive(Debug, Clone, PartialEq)]
pub struct GeneratedData {
    pub data: CausalDataset,
    pub true_propensity: Vec<f64>,
    pub model: ScenarioModel,
}

pub fn gen_dataset<R: Rng + ?Sized>(cfg: &ScenarioConfig, rng: &mut R) -> Result<GeneratedData> {
    cfg.validate()?;
    let model = cfg.model();
    let n = cfg.n;
    let mut x = DMatrix::zeros(n, cfg.d_raw);
    let mut z = Vec::with_capacity(n);
    let mut y = Vec::with_capacity(n);
    let mut e = Vec::with_capacity(n);
    let mut row = vec![0.0; cfg.d_raw];
    for i in 0..n {
        model.draw_covariates(rng, &mut row);
        for (j, &v) in row.iter().enumerate() {
            x[(i, j)] = v;
        }
        let p = model.propensity(&row);
        let zi = u8::from(rng.random::<f64>() < p);
        let y0 = u8::from(rng.random::<f64>() < model.outcome_mean(&row, 0));
        let y1 = u8::from(rng.random::<f64>() < model.outcome_mean(&row, 1));
        z.push(f64::from(zi));
        y.push(f64::from(if zi == 1 { y1 } else { y0 }));
        e.push(p);
    }
    let data = CausalDataset::validate(x, &z, &y, false)?;
    Ok(GeneratedData { data, true_propensity: e, model })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OracleTruth {
    pub value: f64,
    pub std_error: f64,
}

const ORACLE_CHUNK: usize = 1 << 16;

/// Monte Carlo value of `E[h(e(X)) {m1(X) - m0(X)}] / E[h(e(X))]` under the
/// true propensity, with a delta-method standard error.
pub fn oracle_truth(cfg: &ScenarioConfig, spec: &EstimandSpec, m_draws: usize, seed: u64) -> Result<OracleTruth> {
    cfg.validate()?;
    if m_draws < 2 {
        return Err(Error::InvalidParameter("oracle needs at least 2 draws".into()));
    }
    let model = cfg.model();
    let chunks = m_draws.div_ceil(ORACLE_CHUNK);
    // Per-chunk sums of h, h*delta, h^2, h^2 delta, h^2 delta^2.
    let sums = (0..chunks)
        .into_par_iter()
        .map(|c| {
            let mut rng = stream_rng(seed, c as u64);
            let len = ORACLE_CHUNK.min(m_draws - c * ORACLE_CHUNK);
            let mut row = vec![0.0; cfg.d_raw];
            let mut s = [0.0; 5];
            for _ in 0..len {
                model.draw_covariates(&mut rng, &mut row);
                let h = h_fn(model.propensity(&row), spec);
                let delta = model.outcome_mean(&row, 1) - model.outcome_mean(&row, 0);
                s[0] += h;
                s[1] += h * delta;
                s[2] += h * h;
                s[3] += h * h * delta;
                s[4] += h * h * delta * delta;
            }
            s
        })
        .collect::<Vec<_>>()
        .into_iter()
        .fold([0.0; 5], |mut acc, s| {
            acc.iter_mut().zip(s).for_each(|(a, b)| *a += b);
            acc
        });
    let m = m_draws as f64;
    let value = sums[1] / sums[0];
    // Residuals h (delta - value): mean zero by construction.
    let resid_sq = sums[4] - 2.0 * value * sums[3] + value * value * sums[2];
    let mean_h = sums[0] / m;
    let std_error = (resid_sq / (m - 1.0)).sqrt() / (mean_h * m.sqrt());
    Ok(OracleTruth { value, std_error })
}

/// RNG for stream `index` of `seed`, keyed by SHA-256 of both.
pub fn stream_rng(seed: u64, index: u64) -> ChaCha20Rng {
    let mut hasher = Sha256::new();
    hasher.update(seed.to_le_bytes());
    hasher.update(index.to_le_bytes());
    ChaCha20Rng::from_seed(hasher.finalize().into())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SimOptions {
    pub basis: BasisConfig,
    pub eta: PositivityBound,
    pub analysis: AnalysisOptions,
    /// Draws for the oracle truth when `truth` is not given.
    pub truth_draws: usize,
    pub truth: Option<f64>,
}

impl Default for SimOptions {
    fn default() -> Self {
        Self {
            basis: BasisConfig::default(),
            eta: PositivityBound::default(),
            analysis: AnalysisOptions::default(),
            truth_draws: 2_000_000,
            truth: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ReplicateResult {
    pub index: usize,
    pub estimate: f64,
    pub ci_low: f64,
    pub ci_high: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplicateFailure {
    pub index: usize,
    pub error: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimulationReport {
    pub truth: f64,
    pub mse: f64,
    /// Mean of `|tau - tau_hat| / tau`.
    pub relative_bias: f64,
    /// Mean of `tau_hat - tau`.
    pub bias: f64,
    pub coverage: f64,
    pub interval_length: f64,
    pub per_replicate: Vec<ReplicateResult>,
    pub failures: Vec<ReplicateFailure>,
}

impl SimulationReport {
    /// Metrics over the successful replicates, in index order.
    pub fn aggregate(truth: f64, mut per_replicate: Vec<ReplicateResult>, mut failures: Vec<ReplicateFailure>) -> Self {
        per_replicate.sort_by_key(|r| r.index);
        failures.sort_by_key(|f| f.index);
        let k = per_replicate.len() as f64;
        let mean = |f: &dyn Fn(&ReplicateResult) -> f64| per_replicate.iter().map(f).sum::<f64>() / k;
        Self {
            truth,
            mse: mean(&|r| (truth - r.estimate).powi(2)),
            relative_bias: mean(&|r| (truth - r.estimate).abs() / truth),
            bias: mean(&|r| r.estimate - truth),
            coverage: mean(&|r| f64::from(u8::from(r.ci_low <= truth && truth <= r.ci_high))),
            interval_length: mean(&|r| r.ci_high - r.ci_low),
            per_replicate,
            failures,
        }
    }
}

/// Runs `n_sim` independent generate-and-analyze replicates in parallel.
/// Replicate `i` uses stream `i` of `seed`, so results do not depend on
/// scheduling.
pub fn run_replicates(cfg: &ScenarioConfig, budget: &PrivacyBudget, seed: u64, options: &SimOptions) -> Result<SimulationReport> {
    cfg.validate()?;
    let truth = match options.truth {
        Some(t) => t,
        None => oracle_truth(cfg, &cfg.estimand, options.truth_draws, seed ^ 0x7275_7468)?.value,
    };
    let outcomes: Vec<std::result::Result<ReplicateResult, ReplicateFailure>> = (0..cfg.n_sim)
        .into_par_iter()
        .map(|index| {
            run_one(cfg, budget, seed, index, options).map_err(|e| ReplicateFailure { index, error: e.to_string() })
        })
        .collect();
    let (ok, failed): (Vec<_>, Vec<_>) = outcomes.into_iter().partition(|r| r.is_ok());
    Ok(SimulationReport::aggregate(
        truth,
        ok.into_iter().map(|r| r.unwrap()).collect(),
        failed.into_iter().map(|r| r.unwrap_err()).collect(),
    ))
}

fn run_one(cfg: &ScenarioConfig, budget: &PrivacyBudget, seed: u64, index: usize, options: &SimOptions) -> Result<ReplicateResult> {
    let mut rng = stream_rng(seed, index as u64);
    let generated = gen_dataset(cfg, &mut rng)?;
    let basis = BasisMap::build(&generated.data, options.basis)?;
    let analysis_seed = rng.random::<u64>();
    let est = analyze(&generated.data, &basis, &cfg.estimand, options.eta, budget, analysis_seed, &options.analysis)?;
    Ok(ReplicateResult { index, estimate: est.point, ci_low: est.ci_low, ci_high: est.ci_high })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn equicorrelated_covariates_before_rescaling() {
        let model = ScenarioConfig { rho: 0.2, ..Default::default() }.model();
        let mut rng = ChaCha20Rng::seed_from_u64(1);
        // Undo the rescaling by sampling the raw draw directly.
        let m = 200_000;
        let mut cov = [[0.0; 4]; 4];
        let (a, b) = (0.8f64.sqrt(), 0.2f64.sqrt());
        for _ in 0..m {
            let shared: f64 = StandardNormal.sample(&mut rng);
            let x: Vec<f64> = (0..4)
                .map(|_| {
                    let own: f64 = StandardNormal.sample(&mut rng);
                    a * own + b * shared
                })
                .collect();
            for i in 0..4 {
                for j in 0..4 {
                    cov[i][j] += x[i] * x[j] / m as f64;
                }
            }
        }
        for (i, row) in cov.iter().enumerate() {
            for (j, &c) in row.iter().enumerate() {
                let target = if i == j { 1.0 } else { 0.2 };
                assert!((c - target).abs() < 0.015, "({i},{j}) {c}");
            }
        }
        let mut row = [0.0; 4];
        for _ in 0..1000 {
            model.draw_covariates(&mut rng, &mut row);
            assert!(row.iter().map(|v| v * v).sum::<f64>() <= 1.0 + 1e-12);
        }
    }

    #[test]
    fn null_effect_has_zero_truth() {
        let cfg = ScenarioConfig { gamma: 0.0, ..Default::default() };
        for spec in [EstimandSpec::ate(), EstimandSpec::ato(), EstimandSpec::att()] {
            assert_eq!(oracle_truth(&cfg, &spec, 10_000, 1).unwrap().value, 0.0);
        }
    }

    #[test]
    fn pinned_truth_agrees_with_fresh_oracle() {
        let t = oracle_truth(&ScenarioConfig::default(), &EstimandSpec::ate(), 1_000_000, 99).unwrap();
        let se = (t.std_error.powi(2) + SCENARIO1_ATE_TRUTH_SE.powi(2)).sqrt();
        assert!((t.value - SCENARIO1_ATE_TRUTH).abs() < 4.0 * se, "{} vs {}", t.value, SCENARIO1_ATE_TRUTH);
    }

    #[test]
    fn stream_rngs_are_distinct_and_reproducible() {
        let a: u64 = stream_rng(5, 0).random();
        let b: u64 = stream_rng(5, 1).random();
        assert_ne!(a, b);
        assert_eq!(a, stream_rng(5, 0).random::<u64>());
    }

    #[test]
    fn report_metrics() {
        let reps = vec![
            ReplicateResult { index: 1, estimate: 0.3, ci_low: 0.1, ci_high: 0.5 },
            ReplicateResult { index: 0, estimate: 0.1, ci_low: 0.05, ci_high: 0.15 },
        ];
        let r = SimulationReport::aggregate(0.2, reps.clone(), vec![]);
        assert!((r.mse - 0.01).abs() < 1e-15);
        assert!((r.relative_bias - 0.5).abs() < 1e-12);
        assert!(r.bias.abs() < 1e-15);
        assert_eq!(r.coverage, 0.5);
        assert!((r.interval_length - 0.25).abs() < 1e-15);
        assert!(r.mse >= r.bias * r.bias);
        let reversed = SimulationReport::aggregate(0.2, reps.into_iter().rev().collect(), vec![]);
        assert_eq!(r, reversed);
    }
}
