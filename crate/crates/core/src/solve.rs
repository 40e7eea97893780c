//! Non-private maximum-score fit and the covariate-balance diagnostic.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::cbsr::{weight, ScoreObjective};
use crate::error::{Error, Result};
use crate::model::{CausalDataset, EstimandSpec, PositivityBound};
use crate::sieve::BasisMap;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LineSearch {
    Backtracking,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SolverConfig {
    /// Stop once `||grad|| / n` falls below this.
    pub grad_tolerance: f64,
    pub max_iterations: usize,
    pub line_search: LineSearch,
    /// `||theta||` beyond which the data are declared separable.
    pub separation_bound: f64,
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self {
            grad_tolerance: 1e-9,
            max_iterations: 200,
            line_search: LineSearch::Backtracking,
            separation_bound: 1e3,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FitReport {
    pub theta: DVector<f64>,
    pub iterations: usize,
    /// `||grad|| / n` at `theta`.
    pub grad_norm: f64,
}

const MAX_STEP_HALVINGS: usize = 60;
const ARMIJO: f64 = 1e-4;
const RELATIVE_EIGEN_FLOOR: f64 = 1e-10;

/// Ascent direction: Newton when the negative Hessian is well conditioned,
/// otherwise the gradient scaled by the largest curvature.
fn direction(neg_hessian: DMatrix<f64>, grad: &DVector<f64>, n: usize) -> DVector<f64> {
    let eig = SymmetricEigen::new(neg_hessian);
    let (lmin, lmax) = (eig.eigenvalues.min(), eig.eigenvalues.max());
    if lmax > 0.0 && lmin > RELATIVE_EIGEN_FLOOR * lmax {
        let coords = eig.eigenvectors.tr_mul(grad).component_div(&eig.eigenvalues);
        &eig.eigenvectors * coords
    } else if lmax > 0.0 {
        grad / lmax
    } else {
        grad / n as f64
    }
}

/// Maximizes the summed score from `theta = 0` by damped Newton.
///
/// Steps are accepted when the directional derivative at the trial point is
/// still nonnegative, which by concavity guarantees the objective did not
/// decrease, or when the Armijo condition holds. Rejected steps shrink
/// toward the secant root of the directional derivative.
pub fn fit_objective(obj: &ScoreObjective, cfg: &SolverConfig) -> Result<FitReport> {
    if !(cfg.grad_tolerance > 0.0) {
        return Err(Error::InvalidParameter("grad_tolerance must be positive".into()));
    }
    let n = obj.n();
    let has_value = obj.spec().is_named();
    let mut theta = DVector::zeros(obj.dim());
    let mut grad = obj.gradient(&theta)?;
    let mut value = if has_value { obj.value(&theta)? } else { 0.0 };

    for iteration in 0..cfg.max_iterations {
        let grad_norm = grad.norm() / n as f64;
        if grad_norm <= cfg.grad_tolerance {
            return Ok(FitReport { theta, iterations: iteration, grad_norm });
        }
        let d = direction(obj.neg_hessian(&theta)?, &grad, n);
        let slope0 = grad.dot(&d);
        let mut step = 1.0;
        let mut accepted = None;
        for _ in 0..MAX_STEP_HALVINGS {
            let trial = &theta + &d * step;
            let trial_grad = obj.gradient(&trial)?;
            let slope = trial_grad.dot(&d);
            let trial_value = if has_value { obj.value(&trial)? } else { 0.0 };
            let armijo = has_value && trial_value >= value + ARMIJO * step * slope0;
            if slope >= 0.0 || armijo {
                accepted = Some((trial, trial_grad, trial_value));
                break;
            }
            let secant = slope0 / (slope0 - slope);
            step *= secant.clamp(0.1, 0.9);
        }
        let Some((t, g, v)) = accepted else {
            return Err(Error::DidNotConverge {
                theta: theta.iter().copied().collect(),
                grad_norm,
                iterations: iteration,
            });
        };
        theta = t;
        grad = g;
        value = v;
        let theta_norm = theta.norm();
        if theta_norm > cfg.separation_bound {
            return Err(Error::SeparableData { theta: theta.iter().copied().collect(), theta_norm });
        }
    }

    let grad_norm = grad.norm() / n as f64;
    if grad_norm <= cfg.grad_tolerance {
        Ok(FitReport { theta, iterations: cfg.max_iterations, grad_norm })
    } else {
        Err(Error::DidNotConverge {
            theta: theta.iter().copied().collect(),
            grad_norm,
            iterations: cfg.max_iterations,
        })
    }
}

/// Non-private maximum-score estimate of `theta`.
pub fn fit_nonprivate(
    data: &CausalDataset,
    basis: &BasisMap,
    spec: &EstimandSpec,
    eta: PositivityBound,
    cfg: &SolverConfig,
) -> Result<DVector<f64>> {
    let obj = ScoreObjective::new(data, basis, *spec, eta)?;
    Ok(fit_objective(&obj, cfg)?.theta)
}

/// Signed imbalance `sum_i {Z_i - (1 - Z_i)} w(X_i, Z_i) phi(X_i)`.
pub fn balance_diagnostic(
    theta: &DVector<f64>,
    data: &CausalDataset,
    basis: &BasisMap,
    spec: &EstimandSpec,
    eta: PositivityBound,
) -> Result<DVector<f64>> {
    let obj = ScoreObjective::new(data, basis, *spec, eta)?;
    balance_of(&obj, theta)
}

pub(crate) fn balance_of(obj: &ScoreObjective, theta: &DVector<f64>) -> Result<DVector<f64>> {
    let e = obj.propensities(theta)?;
    let signed = DVector::from_iterator(
        obj.n(),
        e.iter().zip(obj.treatment()).map(|(&e, &z)| {
            let w = weight(e, z, obj.spec());
            if z == 1 { w } else { -w }
        }),
    );
    Ok(obj.features().tr_mul(&signed))
}

/// Weighted mean difference of each column of `values` between arms:
/// `sum_{Z=1} w x / sum_{Z=1} w - sum_{Z=0} w x / sum_{Z=0} w`.
pub fn weighted_mean_difference(values: &DMatrix<f64>, treatment: &[u8], weights: &[f64]) -> Result<DVector<f64>> {
    if values.nrows() != treatment.len() || weights.len() != treatment.len() {
        return Err(Error::DimensionMismatch(format!(
            "{} rows, {} treatments, {} weights",
            values.nrows(),
            treatment.len(),
            weights.len()
        )));
    }
    let mut sums = [DVector::zeros(values.ncols()), DVector::zeros(values.ncols())];
    let mut totals = [0.0; 2];
    for (i, (&z, &w)) in treatment.iter().zip(weights).enumerate() {
        sums[z as usize] += values.row(i).transpose() * w;
        totals[z as usize] += w;
    }
    if totals[0] <= 0.0 || totals[1] <= 0.0 {
        return Err(Error::InvalidParameter("an arm has zero total weight".into()));
    }
    Ok(&sums[1] / totals[1] - &sums[0] / totals[0])
}

/// Unadjusted balance: plain difference of arm means (`w = 1 / n_z`).
pub fn unadjusted_balance(values: &DMatrix<f64>, treatment: &[u8]) -> Result<DVector<f64>> {
    weighted_mean_difference(values, treatment, &vec![1.0; treatment.len()])
}

/// Balancing weights `w(e_theta(X_i), Z_i)` with clamped propensities.
pub fn balancing_weights(obj: &ScoreObjective, theta: &DVector<f64>) -> Result<Vec<f64>> {
    Ok(obj
        .propensities(theta)?
        .iter()
        .zip(obj.treatment())
        .map(|(&e, &z)| weight(e, z, obj.spec()))
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cbsr::{expit, logit};
    use crate::sieve::{BasisConfig, DimensionRule};
    use approx::assert_relative_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha20Rng;
    use rand_distr::{Distribution, StandardNormal};

    fn logistic_data(n: usize, coef: &[f64], seed: u64) -> CausalDataset {
        let k = coef.len() - 1;
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        let x = DMatrix::from_fn(n, k, |_, _| {
            let v: f64 = StandardNormal.sample(&mut rng);
            0.5 * v
        });
        let alternating: Vec<f64> = (0..n).map(|i| (i % 2) as f64).collect();
        let x = CausalDataset::validate(x, &alternating, &vec![0.5; n], true).unwrap().covariates().clone();
        let z: Vec<f64> = (0..n)
            .map(|i| {
                let g = coef[0] + (0..k).map(|j| coef[j + 1] * x[(i, j)]).sum::<f64>();
                f64::from(u8::from(rng.random::<f64>() < expit(g)))
            })
            .collect();
        let y: Vec<f64> = (0..n).map(|_| rng.random()).collect();
        CausalDataset::validate(x, &z, &y, false).unwrap()
    }

    /// Plain IRLS for the unclamped logistic likelihood.
    fn irls(x: &DMatrix<f64>, z: &[u8]) -> DVector<f64> {
        let mut beta = DVector::zeros(x.ncols());
        for _ in 0..100 {
            let p: Vec<f64> = (x * &beta).iter().map(|&g| expit(g)).collect();
            let w = DMatrix::from_diagonal(&DVector::from_iterator(p.len(), p.iter().map(|p| p * (1.0 - p))));
            let resid = DVector::from_iterator(p.len(), z.iter().zip(&p).map(|(&z, p)| f64::from(z) - p));
            let info = x.transpose() * w * x;
            beta += info.cholesky().unwrap().solve(&(x.transpose() * resid));
        }
        beta
    }

    #[test]
    fn intercept_only_fit_is_logit_of_treated_share() {
        let data = logistic_data(300, &[0.4, 0.0, 0.0], 1);
        let cfg = BasisConfig { dimension_rule: DimensionRule::Fixed(1), ..Default::default() };
        let basis = BasisMap::build(&data, cfg).unwrap();
        let theta = fit_nonprivate(&data, &basis, &EstimandSpec::ato(), PositivityBound::default(), &SolverConfig::default()).unwrap();
        let share = data.n_treated() as f64 / data.len() as f64;
        assert_relative_eq!(theta[0], logit(share), epsilon = 1e-8);
    }

    #[test]
    fn ato_fit_matches_logistic_regression() {
        for seed in 0..5 {
            let data = logistic_data(500, &[0.2, 0.8, -0.6, 0.3], seed);
            let basis = BasisMap::build(&data, BasisConfig { whiten: false, ..Default::default() }).unwrap();
            let theta = fit_nonprivate(&data, &basis, &EstimandSpec::ato(), PositivityBound::new(0.01).unwrap(), &SolverConfig::default()).unwrap();
            let reference = irls(&basis.features(&data).unwrap(), data.treatment());
            assert!((theta - reference).amax() < 1e-6);
        }
    }

    #[test]
    fn converged_fit_balances_and_matches_gradient() {
        let data = logistic_data(800, &[0.1, 1.0, -1.0, 0.5], 7);
        let basis = BasisMap::build(&data, BasisConfig::default()).unwrap();
        let cfg = SolverConfig::default();
        let eta = PositivityBound::default();
        let specs = [EstimandSpec::ate(), EstimandSpec::ato(), EstimandSpec::custom(-0.5, -0.3).unwrap()];
        for spec in specs {
            let obj = ScoreObjective::new(&data, &basis, spec, eta).unwrap();
            let fit = fit_objective(&obj, &cfg).unwrap();
            let delta = balance_diagnostic(&fit.theta, &data, &basis, &spec, eta).unwrap();
            let bound = data.len() as f64 * cfg.grad_tolerance * (basis.dimension() as f64).sqrt();
            assert!(delta.amax() <= bound, "{spec}: {}", delta.amax());
            let theta = DVector::from_fn(basis.dimension(), |j, _| 0.3 * (j as f64 - 1.0));
            let grad = obj.gradient(&theta).unwrap();
            let bal = balance_of(&obj, &theta).unwrap();
            assert!((grad - &bal).amax() <= 1e-12 * bal.amax().max(1.0));
        }
    }

    #[test]
    fn objective_never_decreases() {
        let data = logistic_data(400, &[-0.5, 2.0, 1.5, -1.0], 3);
        let basis = BasisMap::build(&data, BasisConfig { degree: 2, ..Default::default() }).unwrap();
        for spec in [EstimandSpec::ate(), EstimandSpec::ato(), EstimandSpec::att()] {
            let obj = ScoreObjective::new(&data, &basis, spec, PositivityBound::default()).unwrap();
            let mut last = f64::NEG_INFINITY;
            for iters in 0..15 {
                let cfg = SolverConfig { max_iterations: iters, ..Default::default() };
                let theta = match fit_objective(&obj, &cfg) {
                    Ok(r) => r.theta,
                    Err(Error::DidNotConverge { theta, .. }) => DVector::from_vec(theta),
                    Err(e) => panic!("{e}"),
                };
                let v = obj.value(&theta).unwrap();
                assert!(v >= last - 1e-12 * last.abs(), "{spec} iteration {iters}");
                last = v;
            }
        }
    }

    #[test]
    fn identical_arms_have_zero_unadjusted_imbalance() {
        let x = DMatrix::from_row_slice(4, 2, &[0.1, 0.2, 0.1, 0.2, -0.3, 0.5, -0.3, 0.5]);
        let d = unadjusted_balance(&x, &[1, 0, 1, 0]).unwrap();
        assert_eq!(d.amax(), 0.0);
        let d = unadjusted_balance(&x, &[1, 1, 0, 0]).unwrap();
        assert!(d.amax() > 0.0);
    }
}
