#![allow(dead_code)]

use dpwate::cbsr::ScoreObjective;
use dpwate::{EstimandSpec, PositivityBound};
use nalgebra::{DMatrix, DVector};
use rand::Rng;

pub const NAMED: [EstimandSpec; 4] = [EstimandSpec::ate(), EstimandSpec::atc(), EstimandSpec::att(), EstimandSpec::ato()];

pub fn eta(v: f64) -> PositivityBound {
    PositivityBound::new(v).unwrap()
}

/// Row uniform in the ball of radius `c_phi`, with an intercept-like first
/// coordinate.
pub fn feature_row<R: Rng>(rng: &mut R, d: usize, c_phi: f64) -> Vec<f64> {
    let mut v: Vec<f64> = (0..d).map(|_| rng.random_range(-1.0..1.0)).collect();
    v[0] = 0.5;
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let scale = c_phi * rng.random::<f64>() / norm;
    v.iter_mut().for_each(|x| *x *= scale);
    v
}

/// Random features with both arms present.
pub fn instance<R: Rng>(rng: &mut R, n: usize, d: usize, c_phi: f64) -> (DMatrix<f64>, Vec<u8>) {
    let rows: Vec<f64> = (0..n).flat_map(|_| feature_row(rng, d, c_phi)).collect();
    let mut z: Vec<u8> = (0..n).map(|_| u8::from(rng.random::<bool>())).collect();
    z[0] = 0;
    z[1] = 1;
    (DMatrix::from_row_slice(n, d, &rows), z)
}

pub fn objective(features: DMatrix<f64>, z: Vec<u8>, spec: EstimandSpec, e: f64) -> ScoreObjective {
    ScoreObjective::from_features(features, z, spec, eta(e)).unwrap()
}

pub fn random_theta<R: Rng>(rng: &mut R, d: usize, scale: f64) -> DVector<f64> {
    DVector::from_fn(d, |_, _| rng.random_range(-scale..scale))
}
