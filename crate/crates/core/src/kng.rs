//! K-Norm Gradient mechanism with the l2 norm.
//!
//! The target density is `exp(-c ||grad L(theta)||)` with `c = eps / (2 Delta)`.
//! Draws are exact, by rejection from a radial envelope centred at an anchor
//! `theta*` (the non-private optimum). Along any ray from the anchor,
//!
//! ```text
//! ||grad L(theta* + r u)|| >= integral_0^r m(s) ds - ||grad L(theta*)||
//! ```
//!
//! where `m(s)` lower-bounds the smallest eigenvalue of the negative Hessian
//! on the ball of radius `s` around the anchor. `m` is evaluated on a
//! geometric grid and used as a step function, which makes the bound `M(r)`
//! piecewise linear and the envelope `exp(-c (M(r) - G*))` sampleable in
//! closed form. At grid radii `M` is raised to a floor on the growth of the
//! gradient along every ray, which targets may certify more sharply than the
//! integral. A constant `m` recovers the plain K-norm envelope.
//!
//! The anchor only affects running time, never the output distribution.
//!
//! Because propensities are clamped, the gradient of the score is bounded and
//! the density is not integrable on all of R^d. Scores are therefore sampled
//! on the data-independent ball `||theta|| <= theta_bound`.

use std::collections::BinaryHeap;

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::Rng;
use rand_distr::{Distribution, Gamma, StandardNormal};
use serde::{Deserialize, Serialize};
use statrs::function::gamma::{gamma_ur, ln_gamma};

use crate::cbsr::{expit, logit, score_grad_g, sensitivity_theta, CurvatureProfile, ScoreObjective};
use crate::error::{Error, Result};
use crate::model::{CausalDataset, EstimandSpec, PositivityBound};
use crate::sieve::BasisMap;
use crate::solve::{fit_objective, SolverConfig};

const ENVELOPE_TOLERANCE: f64 = 1e-9;
const FIRST_KNOT_FRACTION: f64 = 0.125;
const KNOT_RATIO: f64 = 1.15;
const MAX_KNOTS: usize = 400;
const UNBOUNDED_HORIZON: f64 = 64.0;
const CURVATURE_SHRINK: f64 = 1.0 - 1e-10;
/// Envelope levels beyond this many nats above the anchor's carry negligible mass.
const CEILING_MARGIN: f64 = 3.0;
const TOLERANCE_EXPONENT: f64 = 0.5;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KngConfig {
    pub max_proposals: usize,
    /// Radius of the parameter domain. `None` samples on all of R^d, which
    /// is only proper for targets with curvature bounded away from zero.
    pub theta_bound: Option<f64>,
}

impl Default for KngConfig {
    fn default() -> Self {
        Self { max_proposals: 1_000_000, theta_bound: Some(10.0) }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct KnormSample {
    pub value: DVector<f64>,
    pub accepted_after: usize,
}

/// `d`-dimensional l2 K-norm draw: uniform direction, Gamma(d, scale) radius.
pub fn sample_knorm_l2<R: Rng + ?Sized>(d: usize, location: &DVector<f64>, scale: f64, rng: &mut R) -> DVector<f64> {
    assert_eq!(location.len(), d, "location must have length d");
    if scale == 0.0 {
        return location.clone();
    }
    let radius = Gamma::new(d as f64, scale).expect("positive shape and scale").sample(rng);
    location + random_direction(d, rng) * radius
}

fn random_direction<R: Rng + ?Sized>(d: usize, rng: &mut R) -> DVector<f64> {
    loop {
        let v: DVector<f64> = DVector::from_fn(d, |_, _| StandardNormal.sample(rng));
        let norm = v.norm();
        if norm > 0.0 {
            return v / norm;
        }
    }
}

/// `ln Vol_d` of the unit l2 ball, `pi^(d/2) / Gamma(1 + d/2)`.
pub fn ln_unit_ball_volume(d: usize) -> f64 {
    0.5 * d as f64 * std::f64::consts::PI.ln() - ln_gamma(1.0 + 0.5 * d as f64)
}

pub fn knorm_log_density(x: &DVector<f64>, location: &DVector<f64>, scale: f64) -> f64 {
    let d = x.len();
    -(x - location).norm() / scale - ln_gamma(d as f64 + 1.0) - d as f64 * scale.ln() - ln_unit_ball_volume(d)
}

/// `ln P(k, x)`, the log regularized lower incomplete gamma function.
fn ln_lower_gamma_regularized(k: f64, x: f64) -> f64 {
    if x <= 0.0 {
        return f64::NEG_INFINITY;
    }
    if x < k + 1.0 {
        // P(k, x) = x^k e^-x / Gamma(k + 1) * sum_n x^n / ((k+1)...(k+n))
        let mut term = 1.0;
        let mut sum = 1.0;
        let mut n = 1.0;
        while term > sum * 1e-17 {
            term *= x / (k + n);
            sum += term;
            n += 1.0;
        }
        k * x.ln() - x - ln_gamma(k + 1.0) + sum.ln()
    } else {
        (-gamma_ur(k, x)).ln_1p()
    }
}

/// A log-density `-c ||grad L||` that the envelope can dominate.
pub trait KngTarget {
    fn dim(&self) -> usize;

    fn gradient(&self, theta: &DVector<f64>) -> Result<DVector<f64>>;

    /// Lower bound on the smallest eigenvalue of the negative Hessian of `L`
    /// at every point within `radius` of `anchor`. `radius` may be infinite.
    fn curvature_bound(&self, anchor: &DVector<f64>, radius: f64) -> Result<f64>;

    /// Floors `f_k` with `u^T grad L(anchor) - u^T grad L(anchor + r_k u) >= f_k`
    /// for every unit vector `u`, at increasing radii `r_k`. Implementations
    /// may refine floors only from radius `from` on, and stop once a floor is
    /// within `tolerance` of the true minimum over directions or above `ceiling`.
    fn radial_floors(&self, anchor: &DVector<f64>, radii: &[f64], from: f64, tolerance: f64, ceiling: f64) -> Result<Vec<f64>> {
        let _ = (from, tolerance, ceiling);
        radii.iter().map(|&r| Ok(r * self.curvature_bound(anchor, r)?)).collect()
    }
}

/// `L(theta) = -lambda ||theta||^2 / 2`; the target is the K-norm
/// distribution with scale `1 / (c lambda)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct QuadraticTarget {
    pub dim: usize,
    pub lambda: f64,
}

impl KngTarget for QuadraticTarget {
    fn dim(&self) -> usize {
        self.dim
    }

    fn gradient(&self, theta: &DVector<f64>) -> Result<DVector<f64>> {
        Ok(theta * -self.lambda)
    }

    fn curvature_bound(&self, _anchor: &DVector<f64>, _radius: f64) -> Result<f64> {
        Ok(self.lambda)
    }
}

/// The summed clamped score as a KNG target.
#[derive(Debug, Clone)]
pub struct ScoreTarget<'a> {
    objective: &'a ScoreObjective,
    profile: CurvatureProfile,
    row_norms: Vec<f64>,
}

impl<'a> ScoreTarget<'a> {
    pub fn new(objective: &'a ScoreObjective) -> Self {
        let profile = CurvatureProfile::new(*objective.spec(), objective.eta());
        let f = objective.features();
        let row_norms = (0..f.nrows()).map(|i| f.row(i).norm()).collect();
        Self { objective, profile, row_norms }
    }
}

impl KngTarget for ScoreTarget<'_> {
    fn dim(&self) -> usize {
        self.objective.dim()
    }

    fn gradient(&self, theta: &DVector<f64>) -> Result<DVector<f64>> {
        self.objective.gradient(theta)
    }

    /// On the ball, unit `i` has linear predictor within `radius ||phi_i||`
    /// of its anchor value, so its curvature is at least the minimum over
    /// that interval, and the negative Hessian dominates `sum_i k_i phi_i phi_i^T`.
    fn curvature_bound(&self, anchor: &DVector<f64>, radius: f64) -> Result<f64> {
        let g = self.objective.linear_predictor(anchor)?;
        let features = self.objective.features();
        let mut scaled = features.clone();
        for (i, &z) in self.objective.treatment().iter().enumerate() {
            let spread = radius * self.row_norms[i];
            let k = if spread.is_finite() {
                self.profile.min_on(z, expit(g[i] - spread), expit(g[i] + spread))
            } else if self.row_norms[i] == 0.0 {
                self.profile.min_on(z, expit(g[i]), expit(g[i]))
            } else {
                0.0
            };
            scaled.row_mut(i).scale_mut(k);
        }
        Ok(smallest_eigenvalue(features.tr_mul(&scaled)))
    }

    /// Along a ray the gradient changes by `sum_i F_i(r v_i) / r` with
    /// `v_i = phi_i^T u` and `F_i(t) = t (s_i(g_i) - s_i(g_i + t))`, where `s_i`
    /// is the unit's score slope. `F_i` is nonnegative and nondecreasing in `|t|`,
    /// and `F_i(t) >= a_i t^2` with `a_i` the smallest mean curvature over
    /// `[0, t]` on the side of `t`. Two floors are combined:
    /// `r lambda_min(sum_i a_i phi_i phi_i^T)` with both sides pooled, and at
    /// sparse radii a branch and bound over the sphere of directions.
    fn radial_floors(&self, anchor: &DVector<f64>, radii: &[f64], from: f64, tolerance: f64, ceiling: f64) -> Result<Vec<f64>> {
        if radii.windows(2).any(|w| w[1] < w[0]) {
            return Err(Error::InvalidParameter("radii must be increasing".into()));
        }
        let rays = RayTerms::new(self, anchor)?;
        let features = self.objective.features();
        let mut mean_curvature = vec![[f64::INFINITY; 2]; rays.n];
        let mut previous: f64 = 0.0;
        let mut searched_from = f64::NEG_INFINITY;
        let mut floor: f64 = 0.0;
        let mut search = SphereSearch::default();
        let mut out = Vec::with_capacity(radii.len());
        for &r in radii {
            let mut scaled = features.clone();
            for i in 0..rays.n {
                let (rho_prev, rho) = (previous * self.row_norms[i], r * self.row_norms[i]);
                let sides = &mut mean_curvature[i];
                for (side, sign) in [(0, 1.0), (1, -1.0)] {
                    if rho_prev == 0.0 {
                        let (x, z) = (rays.g[i], rays.z[i]);
                        let (a, b) = (x, x + sign * rho);
                        sides[side] = self.profile.min_on(z, expit(a.min(b)), expit(a.max(b)));
                    } else if rho > 0.0 {
                        sides[side] = sides[side].min(rays.level(i, sign * rho_prev) / (rho_prev * rho));
                    }
                }
                scaled.row_mut(i).scale_mut(sides[0].min(sides[1]));
            }
            previous = r;
            floor = floor.max(r * smallest_eigenvalue(features.tr_mul(&scaled)));
            if r >= from && r > 0.0 && floor < ceiling && r >= searched_from * SEARCH_RATIO {
                let bound = rays.sphere_minimum(&mut search, r, &mean_curvature, tolerance, ceiling);
                floor = floor.max(bound);
                searched_from = r;
            }
            out.push(floor);
        }
        Ok(out)
    }
}

const SEARCH_RATIO: f64 = 1.5;
/// Cell evaluations per searched radius.
const SEARCH_EVALUATIONS: usize = 1500;
const SEARCH_RELATIVE_GAP: f64 = 0.05;
const SLOPE_GRID: usize = 4096;

/// The clamped score slope `S_z(x)` of a unit with treatment `z` and linear
/// predictor `x`, tabulated on a uniform grid over the unclamped range.
/// `S_z` is nonincreasing and constant outside the range.
struct SlopeTable {
    points: Vec<f64>,
    values: [Vec<f64>; 2],
    step: f64,
}

impl SlopeTable {
    fn new(spec: &EstimandSpec, eta: PositivityBound) -> Self {
        let (lo, hi) = (logit(eta.eta()), logit(1.0 - eta.eta()));
        let step = (hi - lo) / (SLOPE_GRID - 1) as f64;
        let mut points: Vec<f64> = (0..SLOPE_GRID).map(|k| lo + k as f64 * step).collect();
        points[SLOPE_GRID - 1] = hi;
        let values = [0u8, 1].map(|z| points.iter().map(|&x| score_grad_g(eta.clamp(expit(x)), z, spec)).collect());
        Self { points, values, step }
    }

    /// Largest grid index at or below `x`, or 0 below the range.
    fn below(&self, x: f64) -> usize {
        let last = self.points.len() - 1;
        let mut k = ((x - self.points[0]) / self.step).clamp(0.0, last as f64) as usize;
        while k > 0 && self.points[k] > x {
            k -= 1;
        }
        while k < last && self.points[k + 1] <= x {
            k += 1;
        }
        k
    }

    /// `S_z(x) <= upper(z, x)` for every `x`.
    fn upper(&self, z: u8, x: f64) -> f64 {
        self.values[usize::from(z)][self.below(x)]
    }

    /// `S_z(x) >= lower(z, x)` for every `x`.
    fn lower(&self, z: u8, x: f64) -> f64 {
        let k = self.below(x);
        let k = if self.points[k] < x { (k + 1).min(self.points.len() - 1) } else { k };
        self.values[usize::from(z)][k]
    }
}

/// Per-unit quantities for bounding the gradient along rays from an anchor.
struct RayTerms<'a> {
    /// Row-major copy of the features.
    rows: Vec<f64>,
    row_norms: &'a [f64],
    z: &'a [u8],
    g: DVector<f64>,
    slope0: Vec<f64>,
    slopes: SlopeTable,
    n: usize,
    d: usize,
}

impl<'a> RayTerms<'a> {
    fn new(target: &'a ScoreTarget<'_>, anchor: &DVector<f64>) -> Result<Self> {
        let objective = target.objective;
        let features = objective.features();
        let g = objective.linear_predictor(anchor)?;
        let (spec, eta) = (*objective.spec(), objective.eta());
        let z = objective.treatment();
        let (n, d) = features.shape();
        let slope0 = g.iter().zip(z).map(|(&x, &zi)| score_grad_g(eta.clamp(expit(x)), zi, &spec)).collect();
        let rows = (0..n).flat_map(|i| (0..d).map(move |k| features[(i, k)])).collect();
        Ok(Self {
            rows,
            row_norms: &target.row_norms,
            z,
            g,
            slope0,
            slopes: SlopeTable::new(&spec, eta),
            n,
            d,
        })
    }

    /// Lower bound on `F_i(t)`.
    fn level(&self, i: usize, t: f64) -> f64 {
        t.abs() * self.dropped(i, t)
    }

    /// Lower bound on `|D_i(t)|`.
    fn dropped(&self, i: usize, t: f64) -> f64 {
        let x = self.g[i] + t;
        let dropped = if t > 0.0 {
            self.slope0[i] - self.slopes.upper(self.z[i], x)
        } else {
            self.slopes.lower(self.z[i], x) - self.slope0[i]
        };
        dropped.max(0.0)
    }

    fn project(&self, u: &DVector<f64>) -> Vec<f64> {
        self.rows.chunks_exact(self.d).map(|row| row.iter().zip(u.iter()).map(|(a, b)| a * b).sum()).collect()
    }

    /// Lower bound on the growth `sum_i F_i(r v_i) / r` at `u`.
    fn growth_floor(&self, u: &DVector<f64>, r: f64) -> f64 {
        self.project(u).iter().enumerate().map(|(i, &vi)| self.level(i, r * vi)).sum::<f64>() / r
    }

    /// Lower bound on the growth over all unit directions within chord
    /// `delta` of `u`. Each unit gets a minorant of `F_i(r v_i) / r` valid on
    /// its range `[lo, hi]` of `v_i` over the cell. If the sign of `v_i` is
    /// fixed, this is the larger at the centre of the linear `|D_i(r lo)| v_i`
    /// (`D_i` grows with `|t|`) and the quadratic `a_i v_i^2`, with `a_i` from
    /// `F_i(r lo) / hi^2` or `mean[i]`, bounds on the mean curvature over
    /// `[0, r ||phi_i||]` and `[-r ||phi_i||, 0]`. Otherwise it is quadratic
    /// with the smaller of the two. The summed minorant `b^T u + u^T A u`,
    /// `A >= 0`, is expanded at the centre and minimized over the cap.
    fn cell_floor(&self, u: &DVector<f64>, delta: f64, r: f64, mean: &[[f64; 2]]) -> f64 {
        let v = self.project(u);
        let mut gradient = vec![0.0; self.d];
        let (mut value, mut quadratic, mut linear) = (0.0, 0.0, 0.0);
        for (i, &vi) in v.iter().enumerate() {
            let (w, reach) = (self.row_norms[i] * delta, self.row_norms[i]);
            let (lo, hi) = ((vi - w).max(-reach), (vi + w).min(reach));
            let [up, down] = mean[i];
            let (near, far, curvature) = if lo > 0.0 {
                (lo, hi, up)
            } else if hi < 0.0 {
                (hi, lo, down)
            } else {
                (0.0, 0.0, up.min(down))
            };
            let slope = if near == 0.0 { 0.0 } else { self.dropped(i, r * near).copysign(near) };
            let a = if near == 0.0 { curvature * r } else { (self.level(i, r * near) / (r * far * far)).max(curvature * r) };
            let row = &self.rows[i * self.d..(i + 1) * self.d];
            let (weight, here) = if slope * vi >= a * vi * vi {
                linear += slope * vi;
                (slope, slope * vi)
            } else {
                quadratic += a * vi * vi;
                (2.0 * a * vi, a * vi * vi)
            };
            value += here;
            for (acc, x) in gradient.iter_mut().zip(row) {
                *acc += weight * x;
            }
        }
        let radial: f64 = gradient.iter().zip(u.iter()).map(|(g, x)| g * x).sum();
        let across = gradient.iter().zip(u.iter()).map(|(g, x)| (g - radial * x).powi(2)).sum::<f64>().sqrt();
        (value - across * delta - (0.5 * linear.abs() + quadratic) * delta * delta).max(0.0)
    }

    /// Certified lower bound on the minimum growth over the unit sphere at
    /// radius `r`, refining the partition kept in `search`. Cells are boxes
    /// on the faces of the cube `[-1, 1]^d` projected radially onto the
    /// sphere. The growth is nondecreasing in `r`, so floors from earlier,
    /// smaller radii stay valid and are only refreshed when popped.
    fn sphere_minimum(&self, search: &mut SphereSearch, r: f64, mean: &[[f64; 2]], tolerance: f64, ceiling: f64) -> f64 {
        let d = self.d;
        let mut best = f64::INFINITY;
        let consider = |u: DVector<f64>, best: &mut f64, best_dir: &mut Option<DVector<f64>>| {
            let value = self.growth_floor(&u, r);
            if value < *best {
                *best = value;
                *best_dir = Some(u);
            }
        };
        if d == 1 {
            consider(DVector::from_element(1, 1.0), &mut best, &mut search.best_dir);
            consider(DVector::from_element(1, -1.0), &mut best, &mut search.best_dir);
            return best;
        }
        if let Some(u) = search.best_dir.take() {
            consider(u, &mut best, &mut search.best_dir);
        }
        if search.heap.is_empty() {
            for axis in 0..d {
                for sign in [-1.0, 1.0] {
                    let cell = Cell { axis, sign, lo: vec![-1.0; d - 1], hi: vec![1.0; d - 1], floor: 0.0, radius: 0.0 };
                    search.heap.push(cell);
                }
            }
        }
        let budget = SEARCH_EVALUATIONS;
        let mut evaluations = 0;
        loop {
            let cell = search.heap.pop().expect("cells cover the sphere");
            let gap = tolerance.max(SEARCH_RELATIVE_GAP * best);
            if cell.floor >= ceiling || (best.is_finite() && best - cell.floor <= gap) || evaluations + 2 > budget {
                let floor = cell.floor.min(best);
                search.heap.push(cell);
                return floor;
            }
            let pieces = if cell.radius < r {
                vec![cell]
            } else {
                let (left, right) = cell.split();
                vec![left, right]
            };
            for mut piece in pieces {
                let (u, delta) = piece.center_and_chord();
                piece.floor = piece.floor.max(self.cell_floor(&u, delta, r, mean));
                piece.radius = r;
                consider(u, &mut best, &mut search.best_dir);
                search.heap.push(piece);
                evaluations += 1;
            }
        }
    }
}

/// Partition of the sphere of directions, refined across radii.
#[derive(Debug, Default)]
struct SphereSearch {
    heap: BinaryHeap<Cell>,
    best_dir: Option<DVector<f64>>,
}

#[derive(Debug, Clone)]
struct Cell {
    axis: usize,
    sign: f64,
    lo: Vec<f64>,
    hi: Vec<f64>,
    floor: f64,
    /// Radius at which `floor` was computed.
    radius: f64,
}

impl Cell {
    fn lift(&self, free: impl Iterator<Item = f64>) -> DVector<f64> {
        let mut p = Vec::with_capacity(self.lo.len() + 1);
        let mut free = free;
        for k in 0..=self.lo.len() {
            p.push(if k == self.axis { self.sign } else { free.next().expect("free coordinate") });
        }
        DVector::from_vec(p)
    }

    /// Unit centre and a bound on the chord distance from it to any
    /// direction in the cell.
    fn center_and_chord(&self) -> (DVector<f64>, f64) {
        let center = self.lift(self.lo.iter().zip(&self.hi).map(|(a, b)| 0.5 * (a + b)));
        let half = self.lift(self.lo.iter().zip(&self.hi).map(|(a, b)| 0.5 * (b - a)));
        let norm = center.norm();
        let diagonal = {
            let mut h = half.clone();
            h[self.axis] = 0.0;
            h.norm()
        };
        // All points p of the box have p . center > 0 and lie within `diagonal`
        // of the centre, so their angle to it is at most asin(diagonal / |center|).
        let min_dot = norm * norm
            - center.iter().zip(half.iter()).enumerate().filter(|(k, _)| *k != self.axis).map(|(_, (c, h))| c.abs() * h).sum::<f64>();
        let chord = if min_dot > 0.0 && diagonal < norm {
            2.0 * (0.5 * (diagonal / norm).asin()).sin()
        } else {
            2.0
        };
        (center / norm, chord)
    }

    fn split(self) -> (Cell, Cell) {
        let k = (0..self.lo.len())
            .max_by(|&a, &b| (self.hi[a] - self.lo[a]).total_cmp(&(self.hi[b] - self.lo[b])))
            .expect("at least one free coordinate");
        let mid = 0.5 * (self.lo[k] + self.hi[k]);
        let mut left = self.clone();
        let mut right = self;
        left.hi[k] = mid;
        right.lo[k] = mid;
        (left, right)
    }
}

impl PartialEq for Cell {
    fn eq(&self, other: &Self) -> bool {
        self.floor.total_cmp(&other.floor).is_eq()
    }
}

impl Eq for Cell {}

impl PartialOrd for Cell {
    fn partial_cmp(&self, other: &Self) -> Option<std::cmp::Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for Cell {
    /// Reversed so that the heap pops the smallest floor first.
    fn cmp(&self, other: &Self) -> std::cmp::Ordering {
        other.floor.total_cmp(&self.floor)
    }
}

fn smallest_eigenvalue(m: DMatrix<f64>) -> f64 {
    SymmetricEigen::new(m).eigenvalues.min()
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct Segment {
    start: f64,
    /// Infinite for the tail of an unbounded envelope.
    length: f64,
    /// Slope of `M` on the segment, already multiplied by `c`.
    rate: f64,
    /// `c M(start)`.
    offset: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct Component {
    segment: usize,
    power: usize,
    log_weight: f64,
}

/// Radial envelope `exp(-c M(r))` around an anchor, with `M` piecewise linear.
#[derive(Debug, Clone, PartialEq)]
pub struct RadialEnvelope {
    dim: usize,
    c: f64,
    segments: Vec<Segment>,
    components: Vec<Component>,
    cumulative: Vec<f64>,
}

impl RadialEnvelope {
    /// Builds the envelope out to `r_max`, or to infinity when `r_max` is `None`.
    pub fn build<T: KngTarget>(target: &T, anchor: &DVector<f64>, c: f64, r_max: Option<f64>) -> Result<Self> {
        let d = target.dim();
        if !(c > 0.0 && c.is_finite()) {
            return Err(Error::InvalidParameter(format!("KNG scale c must be positive, got {c}")));
        }
        let m0 = target.curvature_bound(anchor, 0.0)?;
        if !(m0 > 0.0) {
            return Err(Error::ImproperTarget("no curvature at the anchor".into()));
        }
        let typical = d as f64 / (c * m0);
        let horizon = r_max.unwrap_or(UNBOUNDED_HORIZON * typical);
        let mut knots = vec![0.0];
        let mut t = FIRST_KNOT_FRACTION * typical;
        while t < horizon && knots.len() < MAX_KNOTS {
            knots.push(t);
            t *= KNOT_RATIO;
        }
        knots.push(horizon);

        // M grows at least at the curvature rate within a segment, and at each
        // knot it is also at least the radial floor there.
        let ceiling = (d as f64 * ((horizon / typical).max(1.0).ln() + 1.0) + CEILING_MARGIN) / c;
        let floors = target.radial_floors(anchor, &knots, typical, TOLERANCE_EXPONENT / c, ceiling)?;
        let mut segments = Vec::with_capacity(knots.len());
        let mut offset = 0.0;
        for (k, w) in knots.windows(2).enumerate() {
            let rate = c * target.curvature_bound(anchor, w[1])?.max(0.0) * CURVATURE_SHRINK;
            segments.push(Segment { start: w[0], length: w[1] - w[0], rate, offset });
            let floor = c * floors[k + 1].max(0.0) * CURVATURE_SHRINK;
            offset = (offset + rate * (w[1] - w[0])).max(floor);
        }
        if r_max.is_none() {
            let rate = c * target.curvature_bound(anchor, f64::INFINITY)?.max(0.0) * CURVATURE_SHRINK;
            if !(rate > 0.0) {
                return Err(Error::ImproperTarget(
                    "curvature vanishes far from the anchor; set a parameter bound".into(),
                ));
            }
            segments.push(Segment { start: horizon, length: f64::INFINITY, rate, offset });
        }

        // Segment mass: e^{-offset} sum_j C(d-1, j) start^{d-1-j} int_0^L s^j e^{-rate s} ds.
        let mut components = Vec::new();
        for (k, seg) in segments.iter().enumerate() {
            for j in 0..d {
                let lead = (d - 1 - j) as f64;
                if seg.start == 0.0 && lead > 0.0 {
                    continue;
                }
                let shape = j as f64 + 1.0;
                let ln_binom = ln_gamma(d as f64) - ln_gamma(shape) - ln_gamma(lead + 1.0);
                let ln_start = if lead > 0.0 { lead * seg.start.ln() } else { 0.0 };
                let x = seg.rate * seg.length;
                let ln_integral = if seg.rate > 0.0 && x > 1e-300 {
                    let ln_p = if seg.length.is_finite() { ln_lower_gamma_regularized(shape, x) } else { 0.0 };
                    ln_gamma(shape) - shape * seg.rate.ln() + ln_p
                } else {
                    shape * seg.length.ln() - shape.ln()
                };
                components.push(Component {
                    segment: k,
                    power: j,
                    log_weight: -seg.offset + ln_binom + ln_start + ln_integral,
                });
            }
        }
        let top = components.iter().map(|c| c.log_weight).fold(f64::NEG_INFINITY, f64::max);
        let mut cumulative = Vec::with_capacity(components.len());
        let mut acc = 0.0;
        for comp in &components {
            acc += (comp.log_weight - top).exp();
            cumulative.push(acc);
        }
        Ok(Self { dim: d, c, segments, components, cumulative })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// `c M(r)`.
    pub fn scaled_bound(&self, r: f64) -> f64 {
        let k = self.segments.partition_point(|s| s.start <= r).saturating_sub(1);
        let seg = &self.segments[k];
        seg.offset + seg.rate * (r - seg.start).min(seg.length)
    }

    /// Largest radius the envelope covers.
    pub fn reach(&self) -> f64 {
        let last = self.segments.last().expect("non-empty envelope");
        last.start + last.length
    }

    pub fn sample_radius<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        let total = *self.cumulative.last().expect("non-empty envelope");
        let u = rng.random::<f64>() * total;
        let idx = self.cumulative.partition_point(|&w| w <= u).min(self.components.len() - 1);
        let comp = self.components[idx];
        let seg = self.segments[comp.segment];
        seg.start + sample_truncated_gamma(comp.power as f64 + 1.0, seg.rate, seg.length, rng)
    }
}

/// Draw from the density proportional to `s^(k-1) e^(-a s)` on `[0, len]`.
fn sample_truncated_gamma<R: Rng + ?Sized>(k: f64, a: f64, len: f64, rng: &mut R) -> f64 {
    if a > 0.0 && !len.is_finite() {
        return Gamma::new(k, 1.0 / a).expect("valid gamma").sample(rng);
    }
    if a > 0.0 && ln_lower_gamma_regularized(k, a * len) >= 0.25f64.ln() {
        let gamma = Gamma::new(k, 1.0 / a).expect("valid gamma");
        loop {
            let s = gamma.sample(rng);
            if s <= len {
                return s;
            }
        }
    }
    loop {
        let s = len * rng.random::<f64>().powf(1.0 / k);
        if a == 0.0 || rng.random::<f64>() < (-a * s).exp() {
            return s;
        }
    }
}

/// Rejection sampler for a [`KngTarget`] on the ball `||theta|| <= bound`.
#[derive(Debug, Clone)]
pub struct KngSampler<'a, T: KngTarget> {
    target: &'a T,
    anchor: DVector<f64>,
    c: f64,
    bound: Option<f64>,
    anchor_grad_norm: f64,
    envelope: RadialEnvelope,
}

impl<'a, T: KngTarget> KngSampler<'a, T> {
    /// `anchor` is projected onto the domain before use.
    pub fn new(target: &'a T, anchor: &DVector<f64>, c: f64, bound: Option<f64>) -> Result<Self> {
        if anchor.len() != target.dim() {
            return Err(Error::DimensionMismatch(format!(
                "anchor has length {}, target dimension is {}",
                anchor.len(),
                target.dim()
            )));
        }
        if let Some(b) = bound {
            if !(b > 0.0 && b.is_finite()) {
                return Err(Error::InvalidParameter(format!("theta_bound must be positive, got {b}")));
            }
        }
        let mut anchor = anchor.clone();
        if let Some(b) = bound {
            let norm = anchor.norm();
            if norm > b {
                anchor *= b / norm;
            }
        }
        let anchor_grad_norm = target.gradient(&anchor)?.norm();
        let r_max = bound.map(|b| b + anchor.norm());
        let envelope = RadialEnvelope::build(target, &anchor, c, r_max)?;
        Ok(Self { target, anchor, c, bound, anchor_grad_norm, envelope })
    }

    pub fn anchor(&self) -> &DVector<f64> {
        &self.anchor
    }

    pub fn envelope(&self) -> &RadialEnvelope {
        &self.envelope
    }

    /// Log of `exp(-c ||grad L||)` over the envelope at `theta`; `None`
    /// outside the domain.
    pub fn log_ratio(&self, theta: &DVector<f64>) -> Result<Option<f64>> {
        if self.bound.is_some_and(|b| theta.norm() > b) {
            return Ok(None);
        }
        let r = (theta - &self.anchor).norm();
        let envelope = self.envelope.scaled_bound(r) - self.c * self.anchor_grad_norm;
        Ok(Some(-self.c * self.target.gradient(theta)?.norm() + envelope))
    }

    /// One proposal and its log acceptance ratio.
    pub fn propose<R: Rng + ?Sized>(&self, rng: &mut R) -> Result<(DVector<f64>, Option<f64>)> {
        let r = self.envelope.sample_radius(rng);
        let theta = &self.anchor + random_direction(self.target.dim(), rng) * r;
        let ratio = self.log_ratio(&theta)?;
        Ok((theta, ratio))
    }

    pub fn sample<R: Rng + ?Sized>(&self, max_proposals: usize, rng: &mut R) -> Result<KnormSample> {
        for attempt in 1..=max_proposals {
            let (theta, ratio) = self.propose(rng)?;
            let Some(log_ratio) = ratio else { continue };
            if log_ratio > ENVELOPE_TOLERANCE {
                return Err(Error::EnvelopeViolation { log_ratio });
            }
            if rng.random::<f64>().ln() < log_ratio {
                return Ok(KnormSample { value: theta, accepted_after: attempt });
            }
        }
        Err(Error::MaxProposalsExceeded { max_proposals })
    }
}

/// A private draw of the propensity coefficients.
#[derive(Debug, Clone, PartialEq)]
pub struct KngDraw {
    pub theta: DVector<f64>,
    /// Non-private optimum used to centre the envelope. Not releasable.
    pub anchor: DVector<f64>,
    pub proposals: usize,
    /// Exponent scale `epsilon1 / (2 Delta)`.
    pub c: f64,
}

/// Draws `theta` with density proportional to `exp(-c ||grad S_n(theta)||)`
/// on the domain ball, `c = epsilon1 / (2 Delta_theta)`.
pub fn sample_kng_objective<R: Rng + ?Sized>(
    objective: &ScoreObjective,
    c_phi: f64,
    epsilon1: f64,
    rng: &mut R,
    cfg: &KngConfig,
    solver: &SolverConfig,
) -> Result<KngDraw> {
    let spec = objective.spec();
    let profile = CurvatureProfile::new(*spec, objective.eta());
    if !(profile.global_min() > 0.0) {
        return Err(Error::NotStronglyConvex { alpha: spec.alpha, beta: spec.beta });
    }
    if !(epsilon1 > 0.0 && epsilon1.is_finite()) {
        return Err(Error::InvalidParameter(format!("epsilon1 must be positive, got {epsilon1}")));
    }
    let c = epsilon1 / (2.0 * sensitivity_theta(spec, objective.eta(), c_phi));
    let anchor = fit_objective(objective, solver)?.theta;
    let target = ScoreTarget::new(objective);
    let sampler = KngSampler::new(&target, &anchor, c, cfg.theta_bound)?;
    let draw = sampler.sample(cfg.max_proposals, rng)?;
    Ok(KngDraw { theta: draw.value, anchor, proposals: draw.accepted_after, c })
}

pub fn sample_kng_theta<R: Rng + ?Sized>(
    data: &CausalDataset,
    basis: &BasisMap,
    spec: &EstimandSpec,
    eta: PositivityBound,
    epsilon1: f64,
    rng: &mut R,
    cfg: &KngConfig,
    solver: &SolverConfig,
) -> Result<KngDraw> {
    let objective = ScoreObjective::new(data, basis, *spec, eta)?;
    sample_kng_objective(&objective, basis.c_phi(), epsilon1, rng, cfg, solver)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use rand::SeedableRng;
    use rand_chacha::ChaCha20Rng;

    fn laplace_cdf(x: f64, b: f64) -> f64 {
        if x < 0.0 { 0.5 * (x / b).exp() } else { 1.0 - 0.5 * (-x / b).exp() }
    }

    fn ks_statistic(mut xs: Vec<f64>, cdf: impl Fn(f64) -> f64) -> f64 {
        xs.sort_by(f64::total_cmp);
        let n = xs.len() as f64;
        xs.iter()
            .enumerate()
            .map(|(i, &x)| {
                let f = cdf(x);
                (f - i as f64 / n).abs().max((i as f64 + 1.0) / n - f)
            })
            .fold(0.0, f64::max)
    }

    #[test]
    fn one_dimensional_knorm_is_laplace() {
        let mut rng = ChaCha20Rng::seed_from_u64(1);
        let loc = DVector::from_element(1, 0.7);
        let xs: Vec<f64> = (0..10_000).map(|_| sample_knorm_l2(1, &loc, 1.5, &mut rng)[0] - 0.7).collect();
        assert!(ks_statistic(xs, |x| laplace_cdf(x, 1.5)) < 0.02);
        assert_eq!(sample_knorm_l2(1, &loc, 0.0, &mut rng), loc);
    }

    #[test]
    fn knorm_radius_has_gamma_mean() {
        let mut rng = ChaCha20Rng::seed_from_u64(2);
        let loc = DVector::zeros(3);
        let mean = (0..100_000).map(|_| sample_knorm_l2(3, &loc, 2.0, &mut rng).norm()).sum::<f64>() / 1e5;
        assert!((mean - 6.0).abs() < 0.12, "{mean}");
    }

    #[test]
    fn knorm_density_normalizes() {
        let loc = DVector::from_vec(vec![0.3, -0.2]);
        assert_relative_eq!(knorm_log_density(&DVector::zeros(1), &DVector::zeros(1), 1.0), 0.5f64.ln(), epsilon = 1e-12);
        let h = 0.02;
        let mut total = 0.0;
        for i in -1000..1000 {
            for j in -1000..1000 {
                let x = DVector::from_vec(vec![0.3 + (i as f64 + 0.5) * h, -0.2 + (j as f64 + 0.5) * h]);
                total += knorm_log_density(&x, &loc, 1.0).exp() * h * h;
            }
        }
        assert!((total - 1.0).abs() < 1e-3, "{total}");
        let shift = DVector::from_vec(vec![5.0, 5.0]);
        let x = DVector::from_vec(vec![1.0, 2.0]);
        assert_relative_eq!(
            knorm_log_density(&x, &loc, 0.7),
            knorm_log_density(&(&x + &shift), &(&loc + &shift), 0.7),
            epsilon = 1e-12
        );
    }

    #[test]
    fn incomplete_gamma_branches_agree() {
        for (k, x) in [(1.0, 0.5), (3.0, 3.9), (5.0, 6.1), (2.0, 10.0), (4.0, 1e-6)] {
            let series = ln_lower_gamma_regularized(k, x);
            let reference = (1.0 - gamma_ur(k, x)).ln();
            if x > 1e-3 {
                assert_relative_eq!(series, reference, max_relative = 1e-10);
            }
        }
        // P(1, x) = 1 - e^-x.
        assert_relative_eq!(ln_lower_gamma_regularized(1.0, 0.5).exp(), 1.0 - (-0.5f64).exp(), max_relative = 1e-14);
    }

    #[test]
    fn truncated_gamma_matches_its_cdf() {
        let mut rng = ChaCha20Rng::seed_from_u64(3);
        for (k, a, len) in [(3.0, 2.0, 0.5), (2.0, 0.5, 4.0), (4.0, 3.0, 10.0), (1.0, 0.0, 2.0)] {
            let xs: Vec<f64> = (0..20_000).map(|_| sample_truncated_gamma(k, a, len, &mut rng)).collect();
            let cdf = |s: f64| {
                if a == 0.0 {
                    (s / len).powf(k)
                } else {
                    (ln_lower_gamma_regularized(k, a * s) - ln_lower_gamma_regularized(k, a * len)).exp()
                }
            };
            assert!(ks_statistic(xs, cdf) < 0.015, "k={k} a={a} len={len}");
        }
    }

    #[test]
    fn envelope_radius_follows_its_density() {
        // Piecewise target: curvature 2 within radius 1 of the anchor, 0.5 beyond.
        struct Kinked;
        impl KngTarget for Kinked {
            fn dim(&self) -> usize {
                3
            }
            fn gradient(&self, theta: &DVector<f64>) -> Result<DVector<f64>> {
                let r = theta.norm();
                let m = if r <= 1.0 { 2.0 * r } else { 2.0 + 0.5 * (r - 1.0) };
                Ok(if r > 0.0 { theta * (m / r) } else { theta.clone() })
            }
            fn curvature_bound(&self, _: &DVector<f64>, radius: f64) -> Result<f64> {
                Ok(if radius <= 1.0 { 2.0 } else { 0.5 })
            }
        }
        let anchor = DVector::zeros(3);
        let sampler = KngSampler::new(&Kinked, &anchor, 1.0, None).unwrap();
        let mut rng = ChaCha20Rng::seed_from_u64(4);
        let mut radii = Vec::new();
        while radii.len() < 20_000 {
            radii.push(sampler.sample(1000, &mut rng).unwrap().value.norm());
        }
        // Radial target density r^2 exp(-||grad||) by quadrature.
        let m = |r: f64| if r <= 1.0 { 2.0 * r } else { 2.0 + 0.5 * (r - 1.0) };
        let h = 1e-3;
        let grid: Vec<f64> = (0..40_000).map(|i| (i as f64 + 0.5) * h).collect();
        let mut cumulative = Vec::with_capacity(grid.len());
        let mut acc = 0.0;
        for &r in &grid {
            acc += r * r * (-m(r)).exp();
            cumulative.push(acc);
        }
        let cdf = |x: f64| cumulative[grid.partition_point(|&r| r <= x).saturating_sub(1)] / acc;
        assert!(ks_statistic(radii, cdf) < 0.015);
    }

    #[test]
    fn quadratic_target_is_exact_laplace() {
        let target = QuadraticTarget { dim: 1, lambda: 3.0 };
        let c = 0.5;
        let sampler = KngSampler::new(&target, &DVector::zeros(1), c, None).unwrap();
        let mut rng = ChaCha20Rng::seed_from_u64(5);
        let xs: Vec<f64> = (0..10_000).map(|_| sampler.sample(100, &mut rng).unwrap().value[0]).collect();
        assert!(ks_statistic(xs, |x| laplace_cdf(x, 1.0 / (c * target.lambda))) < 0.02);
    }

    #[test]
    fn improper_targets_are_refused() {
        struct Flat;
        impl KngTarget for Flat {
            fn dim(&self) -> usize {
                2
            }
            fn gradient(&self, theta: &DVector<f64>) -> Result<DVector<f64>> {
                Ok(theta.map(|v| v.tanh()))
            }
            fn curvature_bound(&self, _: &DVector<f64>, radius: f64) -> Result<f64> {
                Ok(if radius.is_finite() { 1.0 - radius.tanh().powi(2) } else { 0.0 })
            }
        }
        let anchor = DVector::zeros(2);
        assert!(matches!(KngSampler::new(&Flat, &anchor, 1.0, None), Err(Error::ImproperTarget(_))));
        assert!(KngSampler::new(&Flat, &anchor, 1.0, Some(5.0)).is_ok());
    }

    fn fitted_score(n: usize, scenario: crate::sim::Scenario, estimand: EstimandSpec, seed: u64) -> (ScoreObjective, DVector<f64>) {
        let cfg = crate::sim::ScenarioConfig { n, scenario, estimand, ..Default::default() };
        let data = crate::sim::gen_dataset(&cfg, &mut ChaCha20Rng::seed_from_u64(seed)).unwrap().data;
        let basis = BasisMap::build(&data, Default::default()).unwrap();
        let objective = ScoreObjective::new(&data, &basis, estimand, PositivityBound::default()).unwrap();
        let anchor = fit_objective(&objective, &SolverConfig::default()).unwrap().theta;
        (objective, anchor)
    }

    fn exact_growth(objective: &ScoreObjective, anchor: &DVector<f64>, u: &DVector<f64>, r: f64) -> f64 {
        let at = objective.gradient(anchor).unwrap();
        let moved = objective.gradient(&(anchor + u * r)).unwrap();
        u.dot(&at) - u.dot(&moved)
    }

    #[test]
    fn radial_floors_never_exceed_the_growth() {
        use crate::sim::Scenario;
        let mut rng = ChaCha20Rng::seed_from_u64(17);
        for (scenario, estimand, seed) in
            [(Scenario::WellSpecified, EstimandSpec::ate(), 1), (Scenario::Misspecified, EstimandSpec::ato(), 2)]
        {
            let (objective, anchor) = fitted_score(800, scenario, estimand, seed);
            let target = ScoreTarget::new(&objective);
            let radii: Vec<f64> = (0..30).map(|k| 0.02 * 1.3f64.powi(k)).collect();
            let floors = target.radial_floors(&anchor, &radii, 0.0, 1e-9, f64::INFINITY).unwrap();
            assert!(floors.windows(2).all(|w| w[1] >= w[0]));
            assert!(floors[floors.len() - 1] > 0.0);
            let scaling = anchor.normalize();
            for k in 0..400 {
                // Scaling the fitted model up or down is close to the worst direction.
                let u = match k % 4 {
                    0 => random_direction(anchor.len(), &mut rng),
                    1 => -&scaling,
                    _ => (&scaling * (2.0 * (k % 2) as f64 - 1.0) + random_direction(anchor.len(), &mut rng) * 0.2).normalize(),
                };
                for (&r, &floor) in radii.iter().zip(&floors) {
                    let growth = exact_growth(&objective, &anchor, &u, r);
                    assert!(growth >= floor - 1e-9 * growth.abs().max(1.0), "r={r}: {growth} < {floor}");
                }
            }
        }
    }

    #[test]
    fn cell_floors_bound_every_direction_in_the_cell() {
        let (objective, anchor) = fitted_score(600, crate::sim::Scenario::WellSpecified, EstimandSpec::ate(), 3);
        let target = ScoreTarget::new(&objective);
        let rays = RayTerms::new(&target, &anchor).unwrap();
        let d = anchor.len();
        let mut rng = ChaCha20Rng::seed_from_u64(4);
        for &r in &[0.05, 0.4, 1.5, 6.0] {
            let mean: Vec<[f64; 2]> = (0..rays.n)
                .map(|i| {
                    let rho = r * target.row_norms[i];
                    let (x, z) = (rays.g[i], rays.z[i]);
                    // Mean curvature bounded by the smallest curvature on each side.
                    [target.profile.min_on(z, expit(x), expit(x + rho)), target.profile.min_on(z, expit(x - rho), expit(x))]
                })
                .collect();
            for _ in 0..200 {
                let centre = random_direction(d, &mut rng);
                let delta = 0.3 * rng.random::<f64>();
                let floor = rays.cell_floor(&centre, delta, r, &mean);
                for _ in 0..10 {
                    let step = random_direction(d, &mut rng) * (delta * rng.random::<f64>());
                    let u = (&centre + step).normalize();
                    if (&u - &centre).norm() > delta {
                        continue;
                    }
                    let point = rays.growth_floor(&u, r);
                    let growth = exact_growth(&objective, &anchor, &u, r);
                    assert!(point >= floor - 1e-9 * point.max(1.0), "r={r}: {point} < {floor}");
                    assert!(growth >= point - 1e-9 * growth.max(1.0), "r={r}: {growth} < {point}");
                }
            }
        }
    }
}
