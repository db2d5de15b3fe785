//! Horizontal UAV placement by successive convex approximation.
//!
//! With phases and association fixed, the rate of UAV m serving user k is
//! `log₂(Σ_l c_l/t_l + σ²) − log₂(Σ_{l≠k} c_l/t_l + σ²)` where
//! `c_l = ρ₀ p_l g_{m,l}` and `t_l = ‖w_m − u_l‖²`. The first term is
//! convex in `t`, so its tangent is a global minorizer. The second term is
//! bounded by replacing `t_l` with a slack `α_l` capped by the tangent of
//! `‖w − u_l‖²`. The resulting surrogate is concave in the horizontal
//! coordinates and is maximized by projected gradient ascent.

use nalgebra::Vector2;

use crate::channel::MIN_LINK_DISTANCE;
use crate::config::SolverConfig;
use crate::energy::{energy_feasible, max_travel_radius};
use crate::error::{Error, Result};
use crate::scenario::{safety_ok, Scenario, Vec3};

type V2 = Vector2<f64>;

const LOG2_E: f64 = std::f64::consts::LOG2_E;
const DYKSTRA_SWEEPS: usize = 50;
const DYKSTRA_TOL: f64 = 1e-8;
const ARMIJO_C: f64 = 1e-4;
const MAX_BACKTRACKS: usize = 40;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PlacementSettings {
    pub max_rounds: usize,
    pub tolerance: f64,
    pub inner_max_iterations: usize,
    /// Stop when the gradient mapping falls below this, in bit/s/Hz per m.
    pub gradient_tolerance: f64,
}

impl Default for PlacementSettings {
    fn default() -> Self {
        Self { max_rounds: 30, tolerance: 1e-6, inner_max_iterations: 500, gradient_tolerance: 1e-6 }
    }
}

impl From<&SolverConfig> for PlacementSettings {
    fn from(s: &SolverConfig) -> Self {
        Self {
            max_rounds: s.sca_max_rounds,
            tolerance: s.sca_tolerance,
            inner_max_iterations: s.inner_max_iterations,
            gradient_tolerance: 1e-6,
        }
    }
}

/// `c[m][l] = ρ₀ p_l g_{m,l}`, the received power from user l at unit distance.
pub fn link_weights(scenario: &Scenario, gains: &[Vec<f64>]) -> Vec<Vec<f64>> {
    gains
        .iter()
        .map(|row| {
            row.iter()
                .zip(&scenario.users)
                .map(|(g, u)| scenario.radio.reference_gain * u.transmit_power * g)
                .collect()
        })
        .collect()
}

fn squared_distance(w: &Vec3, u: &Vec3) -> f64 {
    (w - u).norm_squared().max(MIN_LINK_DISTANCE * MIN_LINK_DISTANCE)
}

/// Sum rate of the served links at `positions` with the gains held fixed.
pub fn true_objective(scenario: &Scenario, served: &[Option<usize>], weights: &[Vec<f64>], positions: &[Vec3]) -> f64 {
    served
        .iter()
        .enumerate()
        .filter_map(|(m, k)| k.map(|k| (m, k)))
        .map(|(m, k)| {
            let rx: Vec<f64> = scenario
                .users
                .iter()
                .zip(&weights[m])
                .map(|(u, c)| c / squared_distance(&positions[m], &u.position))
                .collect();
            let total: f64 = rx.iter().sum();
            let sigma2 = scenario.uavs[m].noise_power;
            (total + sigma2).log2() - ((total - rx[k]).max(0.0) + sigma2).log2()
        })
        .sum()
}

/// Tangent slopes `A[m][l]` (per m² of `t_l`) and values `B[m]` of
/// `log₂(Σ_l c_l/t_l + σ²)` at the anchor.
pub fn taylor_coefficients(scenario: &Scenario, weights: &[Vec<f64>], anchors: &[Vec3]) -> (Vec<Vec<f64>>, Vec<f64>) {
    let mut a = Vec::with_capacity(anchors.len());
    let mut b = Vec::with_capacity(anchors.len());
    for (m, w) in anchors.iter().enumerate() {
        let t: Vec<f64> = scenario.users.iter().map(|u| squared_distance(w, &u.position)).collect();
        let s: f64 = weights[m].iter().zip(&t).map(|(c, t)| c / t).sum::<f64>() + scenario.uavs[m].noise_power;
        a.push(weights[m].iter().zip(&t).map(|(c, t)| c * LOG2_E / (t * t) / s).collect());
        b.push(s.log2());
    }
    (a, b)
}

/// The concave program solved in one SCA round.
#[derive(Debug, Clone)]
pub struct SurrogateProblem {
    pub a: Vec<Vec<f64>>,
    pub b: Vec<f64>,
    pub anchors: Vec<Vec3>,
    pub initial: Vec<Vec3>,
    pub weights: Vec<Vec<f64>>,
    pub served: Vec<Option<usize>>,
    pub users: Vec<Vec3>,
    pub noise: Vec<f64>,
    pub d_min: f64,
    pub travel_radius: f64,
    anchor_t: Vec<Vec<f64>>,
}

impl SurrogateProblem {
    pub fn at(scenario: &Scenario, served: &[Option<usize>], weights: &[Vec<f64>], anchors: &[Vec3]) -> Self {
        let (a, b) = taylor_coefficients(scenario, weights, anchors);
        let users = scenario.user_positions();
        let anchor_t = anchors.iter().map(|w| users.iter().map(|u| squared_distance(w, u)).collect()).collect();
        Self {
            a,
            b,
            anchors: anchors.to_vec(),
            initial: scenario.initial_positions(),
            weights: weights.to_vec(),
            served: served.to_vec(),
            users,
            noise: scenario.noise_powers(),
            d_min: scenario.d_min,
            travel_radius: max_travel_radius(&scenario.energy),
            anchor_t,
        }
    }

    fn num_uavs(&self) -> usize {
        self.anchors.len()
    }

    /// Linearized upper bound on `α[m][l]`: the tangent of `‖w − u_l‖²`.
    pub fn alpha_cap(&self, positions: &[Vec3]) -> Vec<Vec<f64>> {
        positions
            .iter()
            .enumerate()
            .map(|(m, w)| {
                let a = &self.anchors[m];
                self.users
                    .iter()
                    .zip(&self.anchor_t[m])
                    .map(|(u, t0)| t0 + 2.0 * horiz(&(a - u)).dot(&horiz(&(w - a))))
                    .collect()
            })
            .collect()
    }

    fn objective_xy(&self, x: &[V2]) -> f64 {
        let positions: Vec<Vec3> = x.iter().zip(&self.anchors).map(|(p, a)| Vec3::new(p.x, p.y, a.z)).collect();
        let alpha = self.alpha_cap(&positions);
        if alpha.iter().flatten().any(|&v| v < MIN_LINK_DISTANCE * MIN_LINK_DISTANCE) {
            return f64::NEG_INFINITY;
        }
        surrogate_objective(self, &positions, &alpha)
    }

    fn gradient_xy(&self, x: &[V2]) -> Vec<V2> {
        let mut grad = vec![V2::zeros(); x.len()];
        for (m, k) in self.served.iter().enumerate() {
            let Some(k) = *k else { continue };
            let a3 = &self.anchors[m];
            let a = horiz(a3);
            let mut g = V2::zeros();
            let mut interference = self.noise[m];
            let mut d_interference = V2::zeros();
            for (l, u3) in self.users.iter().enumerate() {
                let u = horiz(u3);
                g -= 2.0 * self.a[m][l] * (x[m] - u);
                if l != k {
                    let cap = self.anchor_t[m][l] + 2.0 * (a - u).dot(&(x[m] - a));
                    let c = self.weights[m][l];
                    interference += c / cap;
                    d_interference += c / (cap * cap) * 2.0 * (a - u);
                }
            }
            g += d_interference * (LOG2_E / interference);
            grad[m] = g;
        }
        grad
    }
}

fn horiz(v: &Vec3) -> V2 {
    V2::new(v.x, v.y)
}

/// Surrogate sum rate at `positions` with slack `alpha`.
pub fn surrogate_objective(p: &SurrogateProblem, positions: &[Vec3], alpha: &[Vec<f64>]) -> f64 {
    let mut total = 0.0;
    for (m, k) in p.served.iter().enumerate() {
        let Some(k) = *k else { continue };
        let mut value = p.b[m];
        for (l, u) in p.users.iter().enumerate() {
            value -= p.a[m][l] * (squared_distance(&positions[m], u) - p.anchor_t[m][l]);
        }
        let interference: f64 = (0..p.users.len())
            .filter(|&l| l != k)
            .map(|l| p.weights[m][l] / alpha[m][l])
            .sum::<f64>()
            + p.noise[m];
        total += value - interference.log2();
    }
    total
}

#[derive(Debug, Clone, PartialEq)]
pub struct UlopSolution {
    pub positions: Vec<Vec3>,
    pub alpha: Vec<Vec<f64>>,
    pub iterations: usize,
    pub converged: bool,
}

/// Convex feasible set: linearized separation half-spaces and energy disks.
struct FeasibleSet {
    /// `(i, j, n, b)`: `nᵀ(x_i − x_j) ≥ b`.
    halfspaces: Vec<(usize, usize, V2, f64)>,
    centers: Vec<V2>,
    radius: f64,
}

impl FeasibleSet {
    fn new(p: &SurrogateProblem) -> Self {
        let m = p.num_uavs();
        let mut halfspaces = Vec::new();
        let margin = 1e-7 * p.d_min * p.d_min;
        for i in 0..m {
            for j in i + 1..m {
                let e = horiz(&p.anchors[i]) - horiz(&p.anchors[j]);
                halfspaces.push((i, j, 2.0 * e, p.d_min * p.d_min + e.norm_squared() + margin));
            }
        }
        let radius = (p.travel_radius * (1.0 - 1e-9) - 1e-6).max(0.0);
        Self { halfspaces, centers: p.initial.iter().map(horiz).collect(), radius }
    }

    /// Dykstra's alternating projection onto the intersection.
    fn project(&self, x: &[V2]) -> Vec<V2> {
        let m = x.len();
        let mut y = x.to_vec();
        let mut inc_h = vec![(V2::zeros(), V2::zeros()); self.halfspaces.len()];
        let mut inc_b = vec![V2::zeros(); m];
        for _ in 0..DYKSTRA_SWEEPS {
            let mut change = 0.0f64;
            for (h, &(i, j, n, b)) in self.halfspaces.iter().enumerate() {
                let (pi, pj) = inc_h[h];
                let zi = y[i] + pi;
                let zj = y[j] + pj;
                let slack = b - n.dot(&(zi - zj));
                let (ni, nj) = if slack > 0.0 {
                    let s = slack / (2.0 * n.norm_squared());
                    (zi + n * s, zj - n * s)
                } else {
                    (zi, zj)
                };
                inc_h[h] = (zi - ni, zj - nj);
                change = change.max((ni - y[i]).norm()).max((nj - y[j]).norm());
                y[i] = ni;
                y[j] = nj;
            }
            for k in 0..m {
                let z = y[k] + inc_b[k];
                let d = z - self.centers[k];
                let n = if d.norm() > self.radius { self.centers[k] + d * (self.radius / d.norm()) } else { z };
                inc_b[k] = z - n;
                change = change.max((n - y[k]).norm());
                y[k] = n;
            }
            if change <= DYKSTRA_TOL {
                break;
            }
        }
        y
    }
}

fn lift(x: &[V2], anchors: &[Vec3]) -> Vec<Vec3> {
    x.iter().zip(anchors).map(|(p, a)| Vec3::new(p.x, p.y, a.z)).collect()
}

fn exactly_feasible(p: &SurrogateProblem, positions: &[Vec3], energy: &crate::energy::EnergyParams) -> bool {
    safety_ok(positions, p.d_min) && positions.iter().zip(&p.initial).all(|(w, w0)| energy_feasible(w, w0, energy))
}

/// Maximizes the surrogate over the linearized feasible set.
pub fn solve_m_ulop(
    p: &SurrogateProblem,
    energy: &crate::energy::EnergyParams,
    settings: &PlacementSettings,
) -> Result<UlopSolution> {
    if !exactly_feasible(p, &p.anchors, energy) {
        return Err(Error::SolverFailure("placement anchor violates separation or energy limits".into()));
    }
    let mut x: Vec<V2> = p.anchors.iter().map(horiz).collect();
    let mut f = p.objective_xy(&x);
    if !f.is_finite() {
        return Err(Error::SolverFailure("surrogate is not finite at the anchor".into()));
    }
    let done = |x: &[V2], it: usize, converged: bool| {
        let positions = lift(x, &p.anchors);
        let alpha = p.alpha_cap(&positions);
        UlopSolution { positions, alpha, iterations: it, converged }
    };
    if p.travel_radius <= 0.0 {
        return Ok(done(&x, 0, true));
    }
    let set = FeasibleSet::new(p);
    let mut step = f64::NAN;
    for it in 0..settings.inner_max_iterations {
        let g = p.gradient_xy(&x);
        if g.iter().any(|v| !v.x.is_finite() || !v.y.is_finite()) {
            return Err(Error::SolverFailure("non-finite placement gradient".into()));
        }
        let gnorm = g.iter().map(|v| v.norm_squared()).sum::<f64>().sqrt();
        if step.is_nan() {
            step = if gnorm > 0.0 { 10.0 / gnorm } else { 1.0 };
        }
        let mut accepted = None;
        for _ in 0..MAX_BACKTRACKS {
            let trial: Vec<V2> = x.iter().zip(&g).map(|(a, b)| a + b * step).collect();
            let cand = set.project(&trial);
            let ascent: f64 = cand.iter().zip(&x).zip(&g).map(|((c, a), g)| g.dot(&(c - a))).sum();
            let fc = p.objective_xy(&cand);
            if fc.is_finite() && fc >= f + ARMIJO_C * ascent.max(0.0) && exactly_feasible(p, &lift(&cand, &p.anchors), energy) {
                accepted = Some((cand, fc));
                break;
            }
            step *= 0.5;
        }
        let Some((cand, fc)) = accepted else {
            return Ok(done(&x, it, true));
        };
        let moved = cand.iter().zip(&x).map(|(a, b)| (a - b).norm_squared()).sum::<f64>().sqrt();
        let gain = fc - f;
        x = cand;
        f = fc;
        step *= 2.0;
        if moved / step * 2.0 <= settings.gradient_tolerance || gain <= 1e-13 {
            return Ok(done(&x, it + 1, true));
        }
    }
    Ok(done(&x, settings.inner_max_iterations, false))
}

#[derive(Debug, Clone, PartialEq)]
pub struct PlacementOutcome {
    pub positions: Vec<Vec3>,
    /// True objective at the start and after every completed round.
    pub objective_trace: Vec<f64>,
    /// Starting positions and every accepted round's positions.
    pub iterates: Vec<Vec<Vec3>>,
    pub rounds: usize,
    pub failure: Option<String>,
}

/// Repeats tangent construction and surrogate maximization from the
/// scenario's current positions.
pub fn sca_loop(
    scenario: &Scenario,
    served: &[Option<usize>],
    gains: &[Vec<f64>],
    settings: &PlacementSettings,
) -> PlacementOutcome {
    let weights = link_weights(scenario, gains);
    let mut positions = scenario.uav_positions();
    let mut current = true_objective(scenario, served, &weights, &positions);
    let mut trace = vec![current];
    let mut iterates = vec![positions.clone()];
    let mut failure = None;
    let mut rounds = 0;
    while rounds < settings.max_rounds {
        let problem = SurrogateProblem::at(scenario, served, &weights, &positions);
        let sol = match solve_m_ulop(&problem, &scenario.energy, settings) {
            Ok(sol) => sol,
            Err(e) => {
                failure = Some(e.to_string());
                break;
            }
        };
        rounds += 1;
        let next = true_objective(scenario, served, &weights, &sol.positions);
        if next < current {
            // Rounding can leave the minorizer a hair above the true value.
            trace.push(current);
            break;
        }
        positions = sol.positions;
        iterates.push(positions.clone());
        trace.push(next);
        let gain = next - current;
        current = next;
        if gain <= settings.tolerance {
            break;
        }
    }
    PlacementOutcome { positions, objective_trace: trace, iterates, rounds, failure }
}
