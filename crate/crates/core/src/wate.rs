//! Private point estimate, private variance, confidence interval, and the
//! orchestration that splits the budget between them.
//!
//! The budget is split as `p (1-r) eps` for the propensity draw,
//! `(1-p) q_j (1-r) eps` for each of the four Hajek components and `r eps`
//! for the variance. The variance stage reuses the private propensity
//! coefficients, which is post-processing.

use nalgebra::DVector;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};

use crate::cbsr::{h_fn, weight, ScoreObjective};
use crate::error::{Error, Result};
use crate::kng::{sample_kng_objective, KngConfig};
use crate::model::{CausalDataset, EstimandKind, EstimandSpec, PositivityBound, PrivacyBudget, PrivateEstimate};
use crate::noise::{laplace_draw, BudgetLedger};
use crate::sieve::BasisMap;
use crate::solve::{balance_of, fit_objective, SolverConfig};

pub const DENOMINATOR_FLOOR: f64 = 1e-8;
const Z_975: f64 = 1.959_963_984_540_054;

/// The four weighted sums of the Hajek estimator.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HajekComponents {
    /// `sum Z w(X,1) Y`
    pub t1: f64,
    /// `sum Z w(X,1)`
    pub t2: f64,
    /// `sum (1-Z) w(X,0) Y`
    pub t3: f64,
    /// `sum (1-Z) w(X,0)`
    pub t4: f64,
}

impl HajekComponents {
    pub fn compute(propensities: &[f64], treatment: &[u8], outcome: &[f64], spec: &EstimandSpec) -> Self {
        let mut c = Self { t1: 0.0, t2: 0.0, t3: 0.0, t4: 0.0 };
        for ((&e, &z), &y) in propensities.iter().zip(treatment).zip(outcome) {
            let w = weight(e, z, spec);
            if z == 1 {
                c.t1 += w * y;
                c.t2 += w;
            } else {
                c.t3 += w * y;
                c.t4 += w;
            }
        }
        c
    }

    pub fn as_array(&self) -> [f64; 4] {
        [self.t1, self.t2, self.t3, self.t4]
    }

    /// `t1 / t2 - t3 / t4`.
    pub fn estimate(&self) -> f64 {
        self.t1 / self.t2 - self.t3 / self.t4
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mechanisms {
    Private,
    /// No noise anywhere and the non-private fit in place of the KNG draw.
    /// Reproduces the non-private estimator; nothing released this way is private.
    Disabled,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AnalysisOptions {
    pub mechanisms: Mechanisms,
    /// Floor noised Hajek denominators at [`DENOMINATOR_FLOOR`].
    pub floor_denominators: bool,
    /// Clip the point estimate to `[-1, 1]`.
    pub clip_estimate: bool,
    /// Estimand whose score fits the propensity model; defaults to the target
    /// estimand. Needed for ATT and ATC, whose scores are not strongly convex.
    pub propensity_estimand: Option<EstimandSpec>,
    pub kng: KngConfig,
    pub solver: SolverConfig,
}

impl Default for AnalysisOptions {
    fn default() -> Self {
        Self {
            mechanisms: Mechanisms::Private,
            floor_denominators: true,
            clip_estimate: true,
            propensity_estimand: None,
            kng: KngConfig::default(),
            solver: SolverConfig::default(),
        }
    }
}

impl AnalysisOptions {
    pub fn nonprivate() -> Self {
        Self { mechanisms: Mechanisms::Disabled, ..Self::default() }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PointRelease {
    pub tau: f64,
    /// Sums before noise.
    pub components: HajekComponents,
    pub noise: [f64; 4],
    pub denominator_floored: bool,
}

/// Noised Hajek estimate at fixed propensity coefficients. Laplace scales are
/// `1 / ((1-p) q_j (1-r) eps eta)`, each component having sensitivity `1 / eta`.
#[allow(clippy::too_many_arguments)]
pub fn point_estimate<R: Rng + ?Sized>(
    data: &CausalDataset,
    basis: &BasisMap,
    spec: &EstimandSpec,
    eta: PositivityBound,
    budget: &PrivacyBudget,
    theta_tilde: &DVector<f64>,
    rng: &mut R,
    options: &AnalysisOptions,
) -> Result<PointRelease> {
    let objective = ScoreObjective::new(data, basis, *spec, eta)?;
    point_from_objective(&objective, data.outcome(), budget, theta_tilde, rng, options)
}

fn point_from_objective<R: Rng + ?Sized>(
    objective: &ScoreObjective,
    outcome: &[f64],
    budget: &PrivacyBudget,
    theta: &DVector<f64>,
    rng: &mut R,
    options: &AnalysisOptions,
) -> Result<PointRelease> {
    let e = objective.propensities(theta)?;
    let components = HajekComponents::compute(&e, objective.treatment(), outcome, objective.spec());
    let eta = objective.eta().eta();
    let mut noise = [0.0; 4];
    if options.mechanisms == Mechanisms::Private {
        for (j, v) in noise.iter_mut().enumerate() {
            *v = laplace_draw(1.0 / (budget.component_epsilon(j) * eta), rng);
        }
    }
    let [t1, t2, t3, t4] = components.as_array();
    let (mut d1, mut d0) = (t2 + noise[1], t4 + noise[3]);
    let mut floored = false;
    if options.floor_denominators {
        if d1 < DENOMINATOR_FLOOR {
            d1 = DENOMINATOR_FLOOR;
            floored = true;
        }
        if d0 < DENOMINATOR_FLOOR {
            d0 = DENOMINATOR_FLOOR;
            floored = true;
        }
    }
    let mut tau = (t1 + noise[0]) / d1 - (t3 + noise[2]) / d0;
    if options.clip_estimate {
        tau = tau.clamp(-1.0, 1.0);
    }
    Ok(PointRelease { tau, components, noise, denominator_floored: floored })
}

/// `C = min{eta^(a+1) (1-eta)^(b+1), (1-eta)^(a+1) eta^(b+1)}`.
pub fn variance_constant(spec: &EstimandSpec, eta: PositivityBound) -> f64 {
    let eta = eta.eta();
    let (a, b) = (spec.alpha, spec.beta);
    (eta.powf(a + 1.0) * (1.0 - eta).powf(b + 1.0)).min((1.0 - eta).powf(a + 1.0) * eta.powf(b + 1.0))
}

/// Sensitivity of the plug-in variance, `1 / (2 n eta C)`.
pub fn variance_sensitivity(spec: &EstimandSpec, eta: PositivityBound, n: usize) -> f64 {
    1.0 / (2.0 * n as f64 * eta.eta() * variance_constant(spec, eta))
}

/// Replacement for a non-positive noised variance:
/// `1 / (4 n eta C) + 1 / (2 eps^2 n^2 eta^2)`.
pub fn variance_fallback(spec: &EstimandSpec, eta: PositivityBound, n: usize, epsilon_v: f64) -> f64 {
    let (n, e) = (n as f64, eta.eta());
    1.0 / (4.0 * n * e * variance_constant(spec, eta)) + 1.0 / (2.0 * epsilon_v * epsilon_v * n * n * e * e)
}

/// Plug-in variance `sum h^2 v / (e (1-e)) / (sum h)^2` with `v` the pooled
/// unbiased sample variance of the outcomes.
pub fn plugin_variance(propensities: &[f64], outcome: &[f64], spec: &EstimandSpec) -> f64 {
    let n = outcome.len() as f64;
    let mean = outcome.iter().sum::<f64>() / n;
    let v = outcome.iter().map(|y| (y - mean).powi(2)).sum::<f64>() / (n - 1.0);
    let (mut num, mut den) = (0.0, 0.0);
    for &e in propensities {
        let h = h_fn(e, spec);
        num += h * h * v / (e * (1.0 - e));
        den += h;
    }
    num / (den * den)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VarianceRelease {
    pub value: f64,
    pub pre_noise: f64,
    pub noise: f64,
    pub fallback: bool,
}

/// Post-processing of the variance release. The plug-in is first clamped to
/// `[0, Delta_V]`, so that the stated sensitivity holds for every input.
pub fn release_variance(
    pre_noise: f64,
    noise: f64,
    spec: &EstimandSpec,
    eta: PositivityBound,
    n: usize,
    epsilon_v: f64,
) -> VarianceRelease {
    let clamped = pre_noise.clamp(0.0, variance_sensitivity(spec, eta, n));
    let noised = clamped + noise;
    if noised > 0.0 {
        VarianceRelease { value: noised, pre_noise, noise, fallback: false }
    } else {
        VarianceRelease { value: variance_fallback(spec, eta, n, epsilon_v), pre_noise, noise, fallback: true }
    }
}

/// Private variance at the private propensity coefficients.
#[allow(clippy::too_many_arguments)]
pub fn variance_estimate<R: Rng + ?Sized>(
    data: &CausalDataset,
    basis: &BasisMap,
    spec: &EstimandSpec,
    eta: PositivityBound,
    theta_tilde: &DVector<f64>,
    epsilon_v: f64,
    rng: &mut R,
) -> Result<VarianceRelease> {
    let objective = ScoreObjective::new(data, basis, *spec, eta)?;
    variance_from_objective(&objective, data.outcome(), theta_tilde, epsilon_v, rng, Mechanisms::Private)
}

fn variance_from_objective<R: Rng + ?Sized>(
    objective: &ScoreObjective,
    outcome: &[f64],
    theta: &DVector<f64>,
    epsilon_v: f64,
    rng: &mut R,
    mechanisms: Mechanisms,
) -> Result<VarianceRelease> {
    let e = objective.propensities(theta)?;
    let spec = objective.spec();
    let pre = plugin_variance(&e, outcome, spec);
    match mechanisms {
        Mechanisms::Private => {
            let n = objective.n();
            let scale = variance_sensitivity(spec, objective.eta(), n) / epsilon_v;
            let noise = laplace_draw(scale, rng);
            Ok(release_variance(pre, noise, spec, objective.eta(), n, epsilon_v))
        }
        Mechanisms::Disabled => Ok(VarianceRelease { value: pre, pre_noise: pre, noise: 0.0, fallback: false }),
    }
}

/// Normal-approximation 95% interval `tau -/+ 1.96 sqrt(v)`.
pub fn confidence_interval(tau: f64, variance: f64) -> Result<(f64, f64)> {
    if !(variance > 0.0 && variance.is_finite()) {
        return Err(Error::NonpositiveVariance(variance));
    }
    let half = Z_975 * variance.sqrt();
    Ok((tau - half, tau + half))
}

/// Runs the full private pipeline with an RNG seeded from `seed`.
pub fn analyze(
    data: &CausalDataset,
    basis: &BasisMap,
    spec: &EstimandSpec,
    eta: PositivityBound,
    budget: &PrivacyBudget,
    seed: u64,
    options: &AnalysisOptions,
) -> Result<PrivateEstimate> {
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let mut ledger = BudgetLedger::new(budget.epsilon)?;
    let fit_spec = options.propensity_estimand.unwrap_or(*spec);
    if matches!(fit_spec.kind, EstimandKind::Att | EstimandKind::Atc) && options.mechanisms == Mechanisms::Private {
        return Err(Error::NotStronglyConvex { alpha: fit_spec.alpha, beta: fit_spec.beta });
    }
    let objective = ScoreObjective::new(data, basis, *spec, eta)?;
    let fit_objective_spec = if fit_spec == *spec {
        objective.clone()
    } else {
        ScoreObjective::from_features(objective.features().clone(), objective.treatment().to_vec(), fit_spec, eta)?
    };

    let (theta, proposals) = match options.mechanisms {
        Mechanisms::Private => {
            let draw = sample_kng_objective(
                &fit_objective_spec,
                basis.c_phi(),
                budget.kng_epsilon(),
                &mut rng,
                &options.kng,
                &options.solver,
            )?;
            (draw.theta, draw.proposals)
        }
        Mechanisms::Disabled => (fit_objective(&fit_objective_spec, &options.solver)?.theta, 0),
    };
    ledger.spend("propensity (KNG)", budget.kng_epsilon())?;

    let point = point_from_objective(&objective, data.outcome(), budget, &theta, &mut rng, options)?;
    for (j, label) in ["treated outcome sum", "treated weight sum", "control outcome sum", "control weight sum"]
        .into_iter()
        .enumerate()
    {
        ledger.spend(format!("{label} (Laplace)"), budget.component_epsilon(j))?;
    }

    let variance = variance_from_objective(
        &objective,
        data.outcome(),
        &theta,
        budget.variance_epsilon(),
        &mut rng,
        options.mechanisms,
    )?;
    ledger.spend("variance (Laplace)", budget.variance_epsilon())?;

    let (ci_low, ci_high) = confidence_interval(point.tau, variance.value)?;
    let balance = balance_of(&objective, &theta)?;

    Ok(PrivateEstimate {
        point: point.tau,
        variance: variance.value,
        ci_low,
        ci_high,
        balance: balance.iter().copied().collect(),
        theta_private: theta.iter().copied().collect(),
        ledger,
        seed,
        denominator_floored: point.denominator_floored,
        variance_fallback: variance.fallback,
        kng_proposals: proposals,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use nalgebra::DMatrix;

    fn eta(v: f64) -> PositivityBound {
        PositivityBound::new(v).unwrap()
    }

    #[test]
    fn constant_propensity_collapses_to_difference_in_means() {
        let x = DMatrix::zeros(4, 1);
        let data = CausalDataset::validate(x, &[1.0, 1.0, 0.0, 0.0], &[1.0, 0.0, 1.0, 1.0], false).unwrap();
        let c = HajekComponents::compute(&[0.5; 4], data.treatment(), data.outcome(), &EstimandSpec::ate());
        assert_relative_eq!(c.estimate(), -0.5);
    }

    #[test]
    fn variance_constants() {
        assert_relative_eq!(variance_sensitivity(&EstimandSpec::ate(), eta(0.05), 1000), 0.01, max_relative = 1e-12);
        assert_relative_eq!(variance_sensitivity(&EstimandSpec::ato(), eta(0.1), 100), 1.0 / 1.8, max_relative = 1e-12);
        assert_relative_eq!(variance_sensitivity(&EstimandSpec::att(), eta(0.1), 100), 0.5, max_relative = 1e-12);
        assert_relative_eq!(variance_fallback(&EstimandSpec::ate(), eta(0.05), 1000, 1.0), 0.0052, max_relative = 1e-12);
        let r = release_variance(0.001, -1.0, &EstimandSpec::ate(), eta(0.05), 1000, 1.0);
        assert!(r.fallback);
        assert_relative_eq!(r.value, 0.0052, max_relative = 1e-12);
    }

    #[test]
    fn interval_arithmetic() {
        let (lo, hi) = confidence_interval(0.1, 0.0004).unwrap();
        assert_relative_eq!(lo, 0.1 - Z_975 * 0.02, epsilon = 1e-15);
        assert!((lo - 0.0608).abs() < 1e-4 && (hi - 0.1392).abs() < 1e-4);
        assert!(matches!(confidence_interval(0.1, 0.0), Err(Error::NonpositiveVariance(_))));
    }
}
