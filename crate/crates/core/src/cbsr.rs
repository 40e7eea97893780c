//! Beta-family covariate-balancing scoring rules.
//!
//! The family is generated by `G''(e) = e^(a-1) (1-e)^(b-1)`. With a logistic
//! link `e = expit(g)` the per-unit score gradient in the linear predictor is
//! `(z - e) e^a (1-e)^b`, and the fitting equation is a covariate-balance
//! constraint with weights `w(e,1) = e^a (1-e)^(b+1)`, `w(e,0) = e^(a+1) (1-e)^b`.
//!
//! Propensities enter every data-dependent quantity clamped to `[eta, 1-eta]`.
//! Outside that range the summed score is continued linearly in `g`, which
//! keeps it concave and continuously differentiable with the clamped gradient.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::model::{CausalDataset, EstimandKind, EstimandSpec, PositivityBound};
use crate::sieve::BasisMap;

const GRID_POINTS: usize = 10_000;
const GOLDEN_TOL: f64 = 1e-12;

pub fn expit(g: f64) -> f64 {
    if g >= 0.0 {
        1.0 / (1.0 + (-g).exp())
    } else {
        let t = g.exp();
        t / (1.0 + t)
    }
}

pub fn logit(e: f64) -> f64 {
    (e / (1.0 - e)).ln()
}

/// `x^a` with the exponents that occur at the named corners special-cased.
#[inline]
fn pow(x: f64, a: f64) -> f64 {
    if a == 0.0 {
        1.0
    } else if a == -1.0 {
        1.0 / x
    } else if a == 1.0 {
        x
    } else {
        x.powf(a)
    }
}

/// Closed-form score `S(e, z)`; only the four named estimands have one.
pub fn score(e: f64, z: u8, spec: &EstimandSpec) -> Result<f64> {
    let l = e.ln();
    let m = (1.0 - e).ln();
    let v = match (spec.kind, z) {
        (EstimandKind::Ate, 1) => l - m - 1.0 / e,
        (EstimandKind::Ate, _) => m - l - 1.0 / (1.0 - e),
        (EstimandKind::Atc, 1) => -1.0 / e,
        (EstimandKind::Atc, _) => m - l,
        (EstimandKind::Att, 1) => l - m,
        (EstimandKind::Att, _) => -1.0 / (1.0 - e),
        (EstimandKind::Ato, 1) => l,
        (EstimandKind::Ato, _) => m,
        (EstimandKind::Custom, _) => return Err(Error::UnsupportedEstimand(spec.to_string())),
    };
    Ok(v)
}

/// `dS/de = (z - e) G''(e)`.
pub fn score_grad_e(e: f64, z: u8, spec: &EstimandSpec) -> f64 {
    (f64::from(z) - e) * pow(e, spec.alpha - 1.0) * pow(1.0 - e, spec.beta - 1.0)
}

/// `dS/dg = (z - e) e^a (1-e)^b` under the logistic link.
pub fn score_grad_g(e: f64, z: u8, spec: &EstimandSpec) -> f64 {
    (f64::from(z) - e) * pow(e, spec.alpha) * pow(1.0 - e, spec.beta)
}

/// `-d^2 S / dg^2`, the per-unit curvature in the linear predictor.
pub fn curvature_g(e: f64, z: u8, spec: &EstimandSpec) -> f64 {
    let (a, b) = (spec.alpha, spec.beta);
    if z == 1 {
        pow(e, a) * pow(1.0 - e, b + 1.0) * ((b + 1.0) * e - a * (1.0 - e))
    } else {
        pow(e, a + 1.0) * pow(1.0 - e, b) * ((a + 1.0) * (1.0 - e) - b * e)
    }
}

/// Balancing weight `w(e, z)`.
pub fn weight(e: f64, z: u8, spec: &EstimandSpec) -> f64 {
    if z == 1 {
        pow(e, spec.alpha) * pow(1.0 - e, spec.beta + 1.0)
    } else {
        pow(e, spec.alpha + 1.0) * pow(1.0 - e, spec.beta)
    }
}

/// Tilting function `h(e) = e^(a+1) (1-e)^(b+1)`.
pub fn h_fn(e: f64, spec: &EstimandSpec) -> f64 {
    pow(e, spec.alpha + 1.0) * pow(1.0 - e, spec.beta + 1.0)
}

/// Golden-section minimizer of a unimodal `f` on `[a, b]`.
pub(crate) fn golden_min(f: impl Fn(f64) -> f64, mut a: f64, mut b: f64, tol: f64) -> f64 {
    let inv_phi = (5f64.sqrt() - 1.0) / 2.0;
    let mut c = b - inv_phi * (b - a);
    let mut d = a + inv_phi * (b - a);
    let (mut fc, mut fd) = (f(c), f(d));
    while (b - a).abs() > tol * (1.0 + a.abs() + b.abs()) {
        if fc < fd {
            b = d;
            d = c;
            fd = fc;
            c = b - inv_phi * (b - a);
            fc = f(c);
        } else {
            a = c;
            c = d;
            fc = fd;
            d = a + inv_phi * (b - a);
            fd = f(d);
        }
    }
    0.5 * (a + b)
}

/// Grid search over `[lo, hi]` followed by golden-section refinement.
/// Returns the location of the minimum of `f`.
fn grid_min(f: impl Fn(f64) -> f64, lo: f64, hi: f64) -> f64 {
    let step = (hi - lo) / GRID_POINTS as f64;
    let at = |i: usize| if i == GRID_POINTS { hi } else { lo + step * i as f64 };
    let best = (0..=GRID_POINTS)
        .min_by(|&i, &j| f(at(i)).total_cmp(&f(at(j))))
        .expect("non-empty grid");
    let a = at(best.saturating_sub(1));
    let b = at((best + 1).min(GRID_POINTS));
    let refined = golden_min(&f, a, b, GOLDEN_TOL);
    [refined, at(best)].into_iter().min_by(|&x, &y| f(x).total_cmp(&f(y))).unwrap()
}

/// Sensitivity of the summed gradient: `2 C_phi max_{e, z} |dS/dg|`.
pub fn sensitivity_theta(spec: &EstimandSpec, eta: PositivityBound, c_phi: f64) -> f64 {
    let eta = eta.eta();
    match spec.kind {
        EstimandKind::Ate => 2.0 * c_phi / eta,
        EstimandKind::Atc | EstimandKind::Att => 2.0 * c_phi * (1.0 - eta) / eta,
        EstimandKind::Ato => 2.0 * c_phi * (1.0 - eta),
        EstimandKind::Custom => {
            let peak = [0u8, 1]
                .into_iter()
                .map(|z| {
                    let f = |e: f64| -score_grad_g(e, z, spec).abs();
                    -f(grid_min(f, eta, 1.0 - eta))
                })
                .fold(0.0, f64::max);
            2.0 * c_phi * peak
        }
    }
}

/// Minimum of the per-unit curvature over `e in [eta, 1-eta]` and both arms.
/// Zero for the two corners whose score is not strongly convex.
pub fn curvature_per_unit(spec: &EstimandSpec, eta: PositivityBound) -> f64 {
    CurvatureProfile::new(*spec, eta).global_min()
}

/// Interior local minima of a smooth function on `[lo, hi]`.
#[derive(Debug, Clone)]
struct Minima(Vec<f64>);

impl Minima {
    fn locate(f: impl Fn(f64) -> f64, lo: f64, hi: f64) -> Self {
        let step = (hi - lo) / GRID_POINTS as f64;
        let at = |i: usize| lo + step * i as f64;
        let values: Vec<f64> = (0..=GRID_POINTS).map(|i| f(at(i))).collect();
        let minima = (1..GRID_POINTS)
            .filter(|&i| values[i] < values[i - 1] && values[i] <= values[i + 1])
            .map(|i| golden_min(&f, at(i - 1), at(i + 1), GOLDEN_TOL))
            .collect();
        Self(minima)
    }

    /// Minimum of `f` over `[lo, hi]`. Interior minima are lowered by a
    /// relative `1e-9` to cover the rounding of their location.
    fn minimum(&self, f: impl Fn(f64) -> f64, lo: f64, hi: f64) -> f64 {
        self.0
            .iter()
            .filter(|&&m| m > lo && m < hi)
            .map(|&m| f(m) - 1e-9 * f(m).abs())
            .fold(f(lo).min(f(hi)), f64::min)
    }
}

/// Interior local minima of the per-unit curvature, so that its minimum over
/// any sub-interval of `[eta, 1-eta]` costs a few evaluations.
#[derive(Debug, Clone)]
pub struct CurvatureProfile {
    spec: EstimandSpec,
    eta: f64,
    curvature: [Minima; 2],
}

impl CurvatureProfile {
    pub fn new(spec: EstimandSpec, eta: PositivityBound) -> Self {
        let eta = eta.eta();
        let (lo, hi) = (eta, 1.0 - eta);
        let curvature = [0, 1].map(|z| Minima::locate(|e| curvature_g(e, z, &spec), lo, hi));
        Self { spec, eta, curvature }
    }

    pub fn spec(&self) -> &EstimandSpec {
        &self.spec
    }

    /// Minimum curvature for arm `z` over propensities in `[e_a, e_b]`.
    /// Zero if the interval reaches past the clamp range, where the
    /// linearly continued score has no curvature.
    pub fn min_on(&self, z: u8, e_a: f64, e_b: f64) -> f64 {
        let (lo, hi) = (e_a.min(e_b), e_a.max(e_b));
        if lo < self.eta || hi > 1.0 - self.eta {
            return 0.0;
        }
        self.curvature[z as usize].minimum(|e| curvature_g(e, z, &self.spec), lo, hi).max(0.0)
    }

    pub fn global_min(&self) -> f64 {
        let (lo, hi) = (self.eta, 1.0 - self.eta);
        self.min_on(0, lo, hi).min(self.min_on(1, lo, hi))
    }
}

/// Constants the privacy mechanisms need for a given estimand.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScoreConstants {
    pub estimand: EstimandSpec,
    pub eta: PositivityBound,
    pub c_phi: f64,
    pub sensitivity_theta: f64,
    pub curvature_per_unit: f64,
}

impl ScoreConstants {
    pub fn new(estimand: EstimandSpec, eta: PositivityBound, c_phi: f64) -> Result<Self> {
        if !(c_phi > 0.0 && c_phi.is_finite()) {
            return Err(Error::InvalidParameter(format!("c_phi must be positive, got {c_phi}")));
        }
        Ok(Self {
            estimand,
            eta,
            c_phi,
            sensitivity_theta: sensitivity_theta(&estimand, eta, c_phi),
            curvature_per_unit: curvature_per_unit(&estimand, eta),
        })
    }

    pub fn is_strongly_convex(&self) -> bool {
        self.curvature_per_unit > 0.0
    }
}

/// The summed clamped score of a feature matrix, as a function of `theta`.
#[derive(Debug, Clone)]
pub struct ScoreObjective {
    features: DMatrix<f64>,
    treatment: Vec<u8>,
    spec: EstimandSpec,
    eta: PositivityBound,
}

impl ScoreObjective {
    pub fn new(data: &CausalDataset, basis: &BasisMap, spec: EstimandSpec, eta: PositivityBound) -> Result<Self> {
        Ok(Self {
            features: basis.features(data)?,
            treatment: data.treatment().to_vec(),
            spec,
            eta,
        })
    }

    /// Builds from a precomputed `n x d` feature matrix.
    pub fn from_features(features: DMatrix<f64>, treatment: Vec<u8>, spec: EstimandSpec, eta: PositivityBound) -> Result<Self> {
        if features.nrows() != treatment.len() {
            return Err(Error::DimensionMismatch(format!(
                "{} feature rows, {} treatments",
                features.nrows(),
                treatment.len()
            )));
        }
        Ok(Self { features, treatment, spec, eta })
    }

    pub fn n(&self) -> usize {
        self.treatment.len()
    }

    pub fn dim(&self) -> usize {
        self.features.ncols()
    }

    pub fn features(&self) -> &DMatrix<f64> {
        &self.features
    }

    pub fn treatment(&self) -> &[u8] {
        &self.treatment
    }

    pub fn spec(&self) -> &EstimandSpec {
        &self.spec
    }

    pub fn eta(&self) -> PositivityBound {
        self.eta
    }

    pub fn linear_predictor(&self, theta: &DVector<f64>) -> Result<DVector<f64>> {
        if theta.len() != self.dim() {
            return Err(Error::DimensionMismatch(format!(
                "theta has length {}, basis dimension is {}",
                theta.len(),
                self.dim()
            )));
        }
        Ok(&self.features * theta)
    }

    /// Clamped propensities `e_theta(X_i)`.
    pub fn propensities(&self, theta: &DVector<f64>) -> Result<Vec<f64>> {
        Ok(self.linear_predictor(theta)?.iter().map(|&g| self.eta.clamp(expit(g))).collect())
    }

    /// `sum_i (Z_i - e_i) e_i^a (1-e_i)^b phi(X_i)` with clamped `e_i`.
    pub fn gradient(&self, theta: &DVector<f64>) -> Result<DVector<f64>> {
        let terms = DVector::from_iterator(
            self.n(),
            self.propensities(theta)?
                .iter()
                .zip(&self.treatment)
                .map(|(&e, &z)| score_grad_g(e, z, &self.spec)),
        );
        Ok(self.features.tr_mul(&terms))
    }

    /// Negative Hessian `sum_i kappa_i phi_i phi_i^T`; units whose propensity
    /// is clamped contribute nothing.
    pub fn neg_hessian(&self, theta: &DVector<f64>) -> Result<DMatrix<f64>> {
        let g = self.linear_predictor(theta)?;
        let eta = self.eta.eta();
        let mut scaled = self.features.clone();
        for i in 0..self.n() {
            let e = expit(g[i]);
            let k = if e < eta || e > 1.0 - eta { 0.0 } else { curvature_g(e, self.treatment[i], &self.spec) };
            scaled.row_mut(i).scale_mut(k);
        }
        Ok(self.features.tr_mul(&scaled))
    }

    /// Summed score with the linear continuation outside the clamp range.
    pub fn value(&self, theta: &DVector<f64>) -> Result<f64> {
        if !self.spec.is_named() {
            return Err(Error::UnsupportedEstimand(self.spec.to_string()));
        }
        let g = self.linear_predictor(theta)?;
        let eta = self.eta.eta();
        let (g_lo, g_hi) = (logit(eta), logit(1.0 - eta));
        let mut total = 0.0;
        for (i, &z) in self.treatment.iter().enumerate() {
            let gc = g[i].clamp(g_lo, g_hi);
            let e = self.eta.clamp(expit(gc));
            total += score(e, z, &self.spec)? + (g[i] - gc) * score_grad_g(e, z, &self.spec);
        }
        Ok(total)
    }
}

/// Summed score gradient at `theta`.
pub fn grad_theta(
    theta: &DVector<f64>,
    data: &CausalDataset,
    basis: &BasisMap,
    spec: &EstimandSpec,
    eta: PositivityBound,
) -> Result<DVector<f64>> {
    ScoreObjective::new(data, basis, *spec, eta)?.gradient(theta)
}
