//! Sieve feature map for the propensity model: monomials of the covariates
//! in graded lexicographic order, an optional whitening transform that makes
//! the empirical second moment the identity, and an l2 clip at `c_phi`.
//!
//! The whitening transform is estimated from the data and is not covered by
//! the privacy budget. For end-to-end accounting use [`BasisConfig::strict`],
//! which fixes the map independently of the data.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::CausalDataset;

const EIGEN_FLOOR: f64 = 1e-10;
const MAX_DEGREE: usize = 3;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DimensionRule {
    /// Every monomial up to the configured degree.
    Full,
    /// The first `d` monomials in graded order.
    Fixed(usize),
    /// The first `ceil(n^a)` monomials, `0 < a <= 1/9`.
    PowerOfN(f64),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BasisConfig {
    pub degree: usize,
    pub include_intercept: bool,
    pub whiten: bool,
    /// Clip bound on `||phi(x)||`. `None` uses the supremum of the unclipped
    /// map over the unit ball, so no point of the domain is clipped.
    pub c_phi: Option<f64>,
    pub dimension_rule: DimensionRule,
}

impl Default for BasisConfig {
    fn default() -> Self {
        Self {
            degree: 1,
            include_intercept: true,
            whiten: true,
            c_phi: None,
            dimension_rule: DimensionRule::Full,
        }
    }
}

impl BasisConfig {
    /// Fixed monomial map with no data-dependent transform.
    pub fn strict(degree: usize, c_phi: f64) -> Self {
        Self {
            degree,
            include_intercept: true,
            whiten: false,
            c_phi: Some(c_phi),
            dimension_rule: DimensionRule::Full,
        }
    }

    fn validate(&self) -> Result<()> {
        if self.degree == 0 || self.degree > MAX_DEGREE {
            return Err(Error::InvalidParameter(format!(
                "basis degree must lie in 1..={MAX_DEGREE}, got {}",
                self.degree
            )));
        }
        if let Some(c) = self.c_phi {
            if !(c > 0.0 && c.is_finite()) {
                return Err(Error::InvalidParameter(format!("c_phi must be positive, got {c}")));
            }
        }
        match self.dimension_rule {
            DimensionRule::Fixed(0) => Err(Error::InvalidParameter("basis dimension must be >= 1".into())),
            DimensionRule::PowerOfN(a) if !(a > 0.0 && a <= 1.0 / 9.0) => Err(Error::InvalidParameter(
                format!("power-of-n exponent must lie in (0, 1/9], got {a}"),
            )),
            _ => Ok(()),
        }
    }
}

/// A fitted feature map `phi`.
#[derive(Debug, Clone, PartialEq)]
pub struct BasisMap {
    config: BasisConfig,
    n_raw: usize,
    /// Each monomial as a sorted list of covariate indices (empty = intercept).
    monomials: Vec<Vec<usize>>,
    whitening: Option<DMatrix<f64>>,
    c_phi: f64,
}

/// Graded lexicographic monomials of `n_raw` variables up to `degree`.
fn graded_monomials(n_raw: usize, degree: usize, intercept: bool) -> Vec<Vec<usize>> {
    fn level(n_raw: usize, k: usize, start: usize, prefix: &mut Vec<usize>, out: &mut Vec<Vec<usize>>) {
        if prefix.len() == k {
            out.push(prefix.clone());
            return;
        }
        for i in start..n_raw {
            prefix.push(i);
            level(n_raw, k, i, prefix, out);
            prefix.pop();
        }
    }
    let mut out = Vec::new();
    if intercept {
        out.push(Vec::new());
    }
    for k in 1..=degree {
        level(n_raw, k, 0, &mut Vec::with_capacity(k), &mut out);
    }
    out
}

fn eval_monomials(monomials: &[Vec<usize>], x: &[f64]) -> DVector<f64> {
    DVector::from_iterator(
        monomials.len(),
        monomials.iter().map(|m| m.iter().map(|&i| x[i]).product::<f64>()),
    )
}

/// Jacobian of the monomial vector, `monomials.len() x x.len()`.
fn monomial_jacobian(monomials: &[Vec<usize>], x: &[f64]) -> DMatrix<f64> {
    let mut jac = DMatrix::zeros(monomials.len(), x.len());
    for (row, m) in monomials.iter().enumerate() {
        for p in 0..m.len() {
            let rest: f64 = m.iter().enumerate().filter(|&(q, _)| q != p).map(|(_, &i)| x[i]).product();
            jac[(row, m[p])] += rest;
        }
    }
    jac
}

fn clip_to(mut v: DVector<f64>, bound: f64) -> DVector<f64> {
    let norm = v.norm();
    if norm > bound {
        v *= bound / norm;
    }
    v
}

impl BasisMap {
    pub fn build(data: &CausalDataset, config: BasisConfig) -> Result<Self> {
        config.validate()?;
        let n_raw = data.n_covariates();
        let mut monomials = graded_monomials(n_raw, config.degree, config.include_intercept);
        let budget = match config.dimension_rule {
            DimensionRule::Full => monomials.len(),
            DimensionRule::Fixed(d) => d,
            DimensionRule::PowerOfN(a) => (data.len() as f64).powf(a).ceil() as usize,
        };
        if budget == 0 {
            return Err(Error::InvalidParameter("basis has no features".into()));
        }
        monomials.truncate(budget);

        let n = data.len();
        let raw = DMatrix::from_fn(n, monomials.len(), |i, j| {
            monomials[j].iter().map(|&c| data.covariates()[(i, c)]).product::<f64>()
        });

        let whitening = if config.whiten {
            let moment = raw.tr_mul(&raw) / n as f64;
            let eig = SymmetricEigen::new(moment);
            let min_eigenvalue = eig.eigenvalues.min();
            if min_eigenvalue < EIGEN_FLOOR {
                return Err(Error::SingularMoment { min_eigenvalue });
            }
            let inv_sqrt = eig.eigenvalues.map(|l| 1.0 / l.sqrt());
            Some(&eig.eigenvectors * DMatrix::from_diagonal(&inv_sqrt) * eig.eigenvectors.transpose())
        } else {
            None
        };

        let mut map = Self {
            config,
            n_raw,
            monomials,
            whitening,
            c_phi: f64::INFINITY,
        };
        map.c_phi = match config.c_phi {
            Some(c) => c,
            None => {
                let training_max = (0..n)
                    .map(|i| map.unclipped(&raw.row(i).transpose()).norm())
                    .fold(0.0, f64::max);
                map.domain_supremum(data).max(training_max)
            }
        };
        Ok(map)
    }

    pub fn config(&self) -> &BasisConfig {
        &self.config
    }

    pub fn dimension(&self) -> usize {
        self.monomials.len()
    }

    pub fn n_raw(&self) -> usize {
        self.n_raw
    }

    pub fn c_phi(&self) -> f64 {
        self.c_phi
    }

    pub fn whitening_transform(&self) -> Option<&DMatrix<f64>> {
        self.whitening.as_ref()
    }

    fn unclipped(&self, monomial_values: &DVector<f64>) -> DVector<f64> {
        match &self.whitening {
            Some(a) => a * monomial_values,
            None => monomial_values.clone(),
        }
    }

    /// Monomial features before whitening and clipping.
    pub fn monomial_features(&self, x: &[f64]) -> Result<DVector<f64>> {
        if x.len() != self.n_raw {
            return Err(Error::DimensionMismatch(format!(
                "basis expects {} covariates, got {}",
                self.n_raw,
                x.len()
            )));
        }
        Ok(eval_monomials(&self.monomials, x))
    }

    /// `phi(x)`, clipped to norm `c_phi`.
    pub fn apply(&self, x: &[f64]) -> Result<DVector<f64>> {
        let m = self.monomial_features(x)?;
        Ok(clip_to(self.unclipped(&m), self.c_phi))
    }

    /// Feature matrix with one row `phi(X_i)` per unit.
    pub fn features(&self, data: &CausalDataset) -> Result<DMatrix<f64>> {
        if data.n_covariates() != self.n_raw {
            return Err(Error::DimensionMismatch(format!(
                "basis expects {} covariates, dataset has {}",
                self.n_raw,
                data.n_covariates()
            )));
        }
        let n = data.len();
        let mut out = DMatrix::zeros(n, self.dimension());
        let mut x = vec![0.0; self.n_raw];
        for i in 0..n {
            for (c, v) in x.iter_mut().enumerate() {
                *v = data.covariates()[(i, c)];
            }
            let phi = self.apply(&x)?;
            out.set_row(i, &phi.transpose());
        }
        Ok(out)
    }

    /// Numerical supremum of the unclipped `||phi(x)||` over the unit ball.
    /// Without whitening the value is exact: each degree level contributes at
    /// most 1 to `||m(x)||^2`, with equality at a coordinate axis.
    fn domain_supremum(&self, data: &CausalDataset) -> f64 {
        let k = self.n_raw;
        if self.whitening.is_none() {
            let mut levels: Vec<usize> = self.monomials.iter().map(Vec::len).collect();
            levels.dedup();
            return (levels.len() as f64).sqrt();
        }

        let objective = |x: &[f64]| self.unclipped(&eval_monomials(&self.monomials, x)).norm_squared();
        let mut starts: Vec<Vec<f64>> = Vec::new();
        for i in 0..k {
            for s in [1.0, -1.0] {
                let mut e = vec![0.0; k];
                e[i] = s;
                starts.push(e);
            }
        }
        let stride = (data.len() / 64).max(1);
        for i in (0..data.len()).step_by(stride) {
            let row: Vec<f64> = data.covariates().row(i).iter().copied().collect();
            let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            if norm > 0.0 {
                starts.push(row.iter().map(|v| v / norm).collect());
            }
        }
        let mut rng = ChaCha20Rng::seed_from_u64(0x5eed_ba5e);
        for _ in 0..64 {
            let v: Vec<f64> = (0..k).map(|_| rng.random::<f64>() * 2.0 - 1.0).collect();
            let norm = v.iter().map(|a| a * a).sum::<f64>().sqrt().max(1e-12);
            let radius: f64 = rng.random();
            starts.push(v.iter().map(|a| a / norm * radius).collect());
        }

        let project = |x: &mut Vec<f64>| {
            let norm = x.iter().map(|a| a * a).sum::<f64>().sqrt();
            if norm > 1.0 {
                x.iter_mut().for_each(|a| *a /= norm);
            }
        };
        let mut best: f64 = 0.0;
        for mut x in starts {
            let mut fx = objective(&x);
            let mut step = 0.5;
            for _ in 0..200 {
                let m = eval_monomials(&self.monomials, &x);
                let a = self.whitening.as_ref().expect("whitened branch");
                let grad = (monomial_jacobian(&self.monomials, &x).transpose() * a.transpose() * (a * m)) * 2.0;
                if grad.norm() < 1e-14 {
                    break;
                }
                let mut improved = false;
                while step > 1e-10 {
                    let mut cand: Vec<f64> = x.iter().zip(grad.iter()).map(|(xi, gi)| xi + step * gi).collect();
                    project(&mut cand);
                    let fc = objective(&cand);
                    if fc > fx {
                        x = cand;
                        fx = fc;
                        improved = true;
                        step *= 2.0;
                        break;
                    }
                    step *= 0.5;
                }
                if !improved {
                    break;
                }
            }
            best = best.max(fx);
        }
        best.sqrt()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use rand_distr::{Distribution, StandardNormal};

    fn random_data(n: usize, k: usize, seed: u64) -> CausalDataset {
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        let x = DMatrix::from_fn(n, k, |_, _| StandardNormal.sample(&mut rng));
        let z: Vec<f64> = (0..n).map(|i| (i % 2) as f64).collect();
        let y: Vec<f64> = (0..n).map(|_| rng.random()).collect();
        CausalDataset::validate(x, &z, &y, true).unwrap()
    }

    #[test]
    fn monomial_order_and_count() {
        let m = graded_monomials(2, 2, true);
        assert_eq!(m, vec![vec![], vec![0], vec![1], vec![0, 0], vec![0, 1], vec![1, 1]]);
        let data = random_data(20, 2, 1);
        let basis = BasisMap::build(&data, BasisConfig { whiten: false, ..Default::default() }).unwrap();
        assert_eq!(basis.dimension(), 3);
    }

    #[test]
    fn identity_basis_passes_covariates_through() {
        let data = random_data(20, 2, 2);
        let cfg = BasisConfig { include_intercept: false, whiten: false, ..Default::default() };
        let basis = BasisMap::build(&data, cfg).unwrap();
        let phi = basis.apply(&[0.3, -0.4]).unwrap();
        assert_eq!(phi.as_slice(), &[0.3, -0.4]);
        assert!(basis.apply(&[0.3]).is_err());
    }

    #[test]
    fn quadratic_monomials_before_whitening() {
        let data = random_data(20, 1, 3);
        let cfg = BasisConfig { degree: 2, whiten: false, c_phi: Some(10.0), ..Default::default() };
        let basis = BasisMap::build(&data, cfg).unwrap();
        assert_eq!(basis.apply(&[0.5]).unwrap().as_slice(), &[1.0, 0.5, 0.25]);
        let auto = BasisMap::build(&data, BasisConfig { c_phi: None, ..cfg }).unwrap();
        assert_relative_eq!(auto.c_phi(), 3f64.sqrt());
    }

    #[test]
    fn whitened_features_have_identity_second_moment() {
        for (seed, degree) in [(4, 1), (5, 2)] {
            let data = random_data(400, 3, seed);
            let basis = BasisMap::build(&data, BasisConfig { degree, ..Default::default() }).unwrap();
            let f = basis.features(&data).unwrap();
            let gram = f.tr_mul(&f) / data.len() as f64;
            let err = (gram - DMatrix::identity(basis.dimension(), basis.dimension())).abs().max();
            assert!(err < 1e-8, "degree {degree}: {err}");
        }
    }

    #[test]
    fn duplicate_columns_are_singular() {
        let base = random_data(50, 1, 6);
        let col = base.covariates().column(0).clone_owned() * 0.5;
        let x = DMatrix::from_columns(&[col.clone(), col]);
        let z: Vec<f64> = base.treatment().iter().map(|&v| v as f64).collect();
        let data = CausalDataset::validate(x, &z, base.outcome(), false).unwrap();
        assert!(matches!(
            BasisMap::build(&data, BasisConfig::default()),
            Err(Error::SingularMoment { .. })
        ));
    }

    #[test]
    fn power_of_n_truncates_graded_order() {
        let data = random_data(5000, 3, 7);
        let cfg = BasisConfig {
            degree: 2,
            whiten: false,
            dimension_rule: DimensionRule::PowerOfN(1.0 / 9.0),
            ..Default::default()
        };
        let basis = BasisMap::build(&data, cfg).unwrap();
        assert_eq!(basis.dimension(), (5000f64).powf(1.0 / 9.0).ceil() as usize);
        assert!(BasisMap::build(&data, BasisConfig { dimension_rule: DimensionRule::PowerOfN(0.5), ..cfg }).is_err());
    }

    #[test]
    fn clip_bound_holds_and_preserves_direction() {
        let data = random_data(200, 3, 8);
        let basis = BasisMap::build(&data, BasisConfig { c_phi: Some(1.0), ..Default::default() }).unwrap();
        let mut rng = ChaCha20Rng::seed_from_u64(9);
        for _ in 0..500 {
            let mut x: Vec<f64> = (0..3).map(|_| rng.random::<f64>() * 2.0 - 1.0).collect();
            let norm = x.iter().map(|v| v * v).sum::<f64>().sqrt();
            if norm > 1.0 {
                x.iter_mut().for_each(|v| *v /= norm);
            }
            let phi = basis.apply(&x).unwrap();
            assert!(phi.norm() <= 1.0 + 1e-12);
            let raw = basis.whitening_transform().unwrap() * basis.monomial_features(&x).unwrap();
            let cos = raw.dot(&phi) / (raw.norm() * phi.norm());
            assert_relative_eq!(cos, 1.0, epsilon = 1e-12);
        }
    }

    #[test]
    fn automatic_bound_dominates_the_ball() {
        let data = random_data(300, 3, 10);
        let basis = BasisMap::build(&data, BasisConfig::default()).unwrap();
        let mut rng = ChaCha20Rng::seed_from_u64(11);
        let a = basis.whitening_transform().unwrap();
        for _ in 0..2000 {
            let v: Vec<f64> = (0..3).map(|_| StandardNormal.sample(&mut rng)).collect();
            let norm = v.iter().map(|a| a * a).sum::<f64>().sqrt();
            let x: Vec<f64> = v.iter().map(|a| a / norm).collect();
            let raw = a * basis.monomial_features(&x).unwrap();
            assert!(raw.norm() <= basis.c_phi() * (1.0 + 1e-9));
        }
    }
}
