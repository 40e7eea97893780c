//! Domain types shared by every stage of the pipeline.
//!
//! Everything here is immutable once constructed. Constructors validate the
//! boundedness assumptions the privacy analysis depends on: covariates in the
//! unit ball, outcomes in `[0, 1]`, binary treatment with both arms present.

use std::fmt;
use std::str::FromStr;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::noise::BudgetLedger;

const NORM_SLACK: f64 = 1e-12;

/// Observational data: covariates in the unit ball, binary treatment, bounded outcome.
#[derive(Debug, Clone, PartialEq)]
pub struct CausalDataset {
    covariates: DMatrix<f64>,
    treatment: Vec<u8>,
    outcome: Vec<f64>,
}

impl CausalDataset {
    /// Validates raw columns. With `rescale` set, each covariate row `x` is
    /// replaced by `x / max(1, ||x||)`; otherwise out-of-ball rows are rejected.
    /// Outcomes are never clipped.
    pub fn validate(
        raw_covariates: DMatrix<f64>,
        treatment: &[f64],
        outcome: &[f64],
        rescale: bool,
    ) -> Result<Self> {
        let n = raw_covariates.nrows();
        if treatment.len() != n || outcome.len() != n {
            return Err(Error::DimensionMismatch(format!(
                "{} covariate rows, {} treatments, {} outcomes",
                n,
                treatment.len(),
                outcome.len()
            )));
        }
        if n < 2 {
            return Err(Error::InvalidParameter(format!("need at least 2 units, got {n}")));
        }

        let mut z = Vec::with_capacity(n);
        for (row, &t) in treatment.iter().enumerate() {
            if t == 0.0 {
                z.push(0u8);
            } else if t == 1.0 {
                z.push(1u8);
            } else {
                return Err(Error::InvalidTreatment { row, value: t });
            }
        }
        for (row, &y) in outcome.iter().enumerate() {
            if !(0.0..=1.0).contains(&y) {
                return Err(Error::OutcomeOutOfRange { row, value: y });
            }
        }
        let treated = z.iter().filter(|&&v| v == 1).count();
        if treated == 0 {
            return Err(Error::EmptyArm { arm: 1 });
        }
        if treated == n {
            return Err(Error::EmptyArm { arm: 0 });
        }

        let mut covariates = raw_covariates;
        for row in 0..n {
            let norm = covariates.row(row).norm();
            if !norm.is_finite() {
                return Err(Error::InvalidParameter(format!("non-finite covariate in row {row}")));
            }
            // Rows within rounding of the sphere are left alone so that
            // validation is idempotent.
            if norm > 1.0 + NORM_SLACK {
                if rescale {
                    let mut r = covariates.row_mut(row);
                    r /= norm;
                } else {
                    return Err(Error::NormViolation { row, norm });
                }
            }
        }

        Ok(Self {
            covariates,
            treatment: z,
            outcome: outcome.to_vec(),
        })
    }

    pub fn len(&self) -> usize {
        self.treatment.len()
    }

    pub fn is_empty(&self) -> bool {
        self.treatment.is_empty()
    }

    pub fn n_covariates(&self) -> usize {
        self.covariates.ncols()
    }

    pub fn covariates(&self) -> &DMatrix<f64> {
        &self.covariates
    }

    pub fn treatment(&self) -> &[u8] {
        &self.treatment
    }

    pub fn outcome(&self) -> &[f64] {
        &self.outcome
    }

    pub fn n_treated(&self) -> usize {
        self.treatment.iter().filter(|&&z| z == 1).count()
    }

    pub fn n_control(&self) -> usize {
        self.len() - self.n_treated()
    }

    pub fn max_row_norm(&self) -> f64 {
        (0..self.len())
            .map(|i| self.covariates.row(i).norm())
            .fold(0.0, f64::max)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EstimandKind {
    Ate,
    Atc,
    Att,
    Ato,
    Custom,
}

/// The (alpha, beta) pair of the Beta-family scoring rule, which fixes the
/// target population through the tilting function `h = e^(a+1) (1-e)^(b+1)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EstimandSpec {
    pub alpha: f64,
    pub beta: f64,
    pub kind: EstimandKind,
}

impl EstimandSpec {
    pub const fn ate() -> Self {
        Self { alpha: -1.0, beta: -1.0, kind: EstimandKind::Ate }
    }

    pub const fn atc() -> Self {
        Self { alpha: -1.0, beta: 0.0, kind: EstimandKind::Atc }
    }

    pub const fn att() -> Self {
        Self { alpha: 0.0, beta: -1.0, kind: EstimandKind::Att }
    }

    pub const fn ato() -> Self {
        Self { alpha: 0.0, beta: 0.0, kind: EstimandKind::Ato }
    }

    /// Any pair in `[-1, 0]^2`. Pairs on a named corner get the named kind.
    pub fn custom(alpha: f64, beta: f64) -> Result<Self> {
        let in_range = |v: f64| (-1.0..=0.0).contains(&v);
        if !in_range(alpha) || !in_range(beta) {
            return Err(Error::InvalidParameter(format!(
                "alpha and beta must lie in [-1, 0], got ({alpha}, {beta})"
            )));
        }
        let named = [Self::ate(), Self::atc(), Self::att(), Self::ato()];
        Ok(named
            .into_iter()
            .find(|s| s.alpha == alpha && s.beta == beta)
            .unwrap_or(Self { alpha, beta, kind: EstimandKind::Custom }))
    }

    pub fn is_named(&self) -> bool {
        self.kind != EstimandKind::Custom
    }
}

impl fmt::Display for EstimandSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.kind {
            EstimandKind::Ate => write!(f, "ate"),
            EstimandKind::Atc => write!(f, "atc"),
            EstimandKind::Att => write!(f, "att"),
            EstimandKind::Ato => write!(f, "ato"),
            EstimandKind::Custom => write!(f, "custom:{},{}", self.alpha, self.beta),
        }
    }
}

impl FromStr for EstimandSpec {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let lower = s.trim().to_ascii_lowercase();
        match lower.as_str() {
            "ate" => Ok(Self::ate()),
            "atc" => Ok(Self::atc()),
            "att" => Ok(Self::att()),
            "ato" => Ok(Self::ato()),
            other => {
                let args = other.strip_prefix("custom:").ok_or_else(|| {
                    Error::InvalidParameter(format!("unknown estimand '{s}'"))
                })?;
                let mut parts = args.split(',').map(|p| p.trim().parse::<f64>());
                match (parts.next(), parts.next(), parts.next()) {
                    (Some(Ok(a)), Some(Ok(b)), None) => Self::custom(a, b),
                    _ => Err(Error::InvalidParameter(format!(
                        "expected custom:<alpha>,<beta>, got '{s}'"
                    ))),
                }
            }
        }
    }
}

/// Positivity bound: propensities are assumed (and truncated) to lie in `[eta, 1 - eta]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "f64", into = "f64")]
pub struct PositivityBound(f64);

impl PositivityBound {
    pub fn new(eta: f64) -> Result<Self> {
        if eta > 0.0 && eta <= 0.5 {
            Ok(Self(eta))
        } else {
            Err(Error::InvalidParameter(format!("eta must lie in (0, 0.5], got {eta}")))
        }
    }

    pub fn eta(&self) -> f64 {
        self.0
    }

    pub fn clamp(&self, e: f64) -> f64 {
        e.clamp(self.0, 1.0 - self.0)
    }
}

impl Default for PositivityBound {
    fn default() -> Self {
        Self(0.05)
    }
}

impl TryFrom<f64> for PositivityBound {
    type Error = Error;

    fn try_from(v: f64) -> Result<Self> {
        Self::new(v)
    }
}

impl From<PositivityBound> for f64 {
    fn from(b: PositivityBound) -> f64 {
        b.0
    }
}

/// Total budget `epsilon` and its split: `r` goes to the variance release; of
/// the remaining `(1 - r) epsilon`, `p` goes to the propensity stage and
/// `(1 - p) q_j` to each of the four Hajek components.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PrivacyBudget {
    pub epsilon: f64,
    pub p: f64,
    pub q: [f64; 4],
    pub r: f64,
}

impl PrivacyBudget {
    pub fn new(epsilon: f64, p: f64, q: [f64; 4], r: f64) -> Result<Self> {
        let open_unit = |v: f64| v > 0.0 && v < 1.0;
        if !(epsilon > 0.0 && epsilon.is_finite()) {
            return Err(Error::InvalidParameter(format!("epsilon must be positive, got {epsilon}")));
        }
        if !open_unit(p) || !open_unit(r) || !q.iter().all(|&v| open_unit(v)) {
            return Err(Error::InvalidParameter(format!(
                "p, r and each q_j must lie in (0, 1); got p={p}, q={q:?}, r={r}"
            )));
        }
        let total: f64 = q.iter().sum();
        if (total - 1.0).abs() > 1e-12 {
            return Err(Error::InvalidParameter(format!("q must sum to 1, got {total}")));
        }
        Ok(Self { epsilon, p, q, r })
    }

    /// `p = 0.5`, `q_j = 0.25`, `r = 1/6`: equal shares for the variance
    /// release and each of the five point-estimate releases.
    pub fn with_defaults(epsilon: f64) -> Result<Self> {
        Self::new(epsilon, 0.5, [0.25; 4], 1.0 / 6.0)
    }

    /// `min{p, (1-p) q_1, ..., (1-p) q_4}`.
    pub fn rate_constant(&self) -> f64 {
        self.q
            .iter()
            .map(|q| (1.0 - self.p) * q)
            .fold(self.p, f64::min)
    }

    /// Budget of the point-estimate stage, `(1 - r) epsilon`.
    pub fn point_epsilon(&self) -> f64 {
        (1.0 - self.r) * self.epsilon
    }

    pub fn kng_epsilon(&self) -> f64 {
        self.p * self.point_epsilon()
    }

    pub fn component_epsilon(&self, j: usize) -> f64 {
        (1.0 - self.p) * self.q[j] * self.point_epsilon()
    }

    pub fn variance_epsilon(&self) -> f64 {
        self.r * self.epsilon
    }
}

/// Released output of a private analysis.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PrivateEstimate {
    pub point: f64,
    pub variance: f64,
    pub ci_low: f64,
    pub ci_high: f64,
    /// Signed imbalance per basis coordinate at the private coefficients.
    pub balance: Vec<f64>,
    pub theta_private: Vec<f64>,
    pub ledger: BudgetLedger,
    pub seed: u64,
    /// A noised Hajek denominator fell below the floor and was replaced.
    pub denominator_floored: bool,
    /// The variance release was non-positive and replaced by the fallback bound.
    pub variance_fallback: bool,
    /// Proposals drawn by the rejection sampler (0 when mechanisms are disabled).
    pub kng_proposals: usize,
}
