//! Baselines: random deployment, uniform deployment, population
//! metaheuristics for the phase step, and UAVs without a metasurface.

use std::f64::consts::{PI, TAU};

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::ao::{ao_solve, capacity, AoSettings, PhaseStrategy};
use crate::association::{binarize, solve_m_auuop};
use crate::channel::{path_gain, rate_table_from_sinr, ChannelRealization, PhaseTensor, TransferSet};
use crate::energy::energy_feasible;
use crate::error::{Error, Result};
use crate::scenario::{repair_separation, safety_ok, AssociationMatrix, Scenario, Vec3};
use crate::seed;

pub const RD_CANDIDATES: usize = 100;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PsoParams {
    pub population: usize,
    pub iterations: usize,
    pub inertia: f64,
    pub cognitive: f64,
    pub social: f64,
}

impl Default for PsoParams {
    fn default() -> Self {
        Self { population: 30, iterations: 50, inertia: 0.729, cognitive: 1.49, social: 1.49 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DeParams {
    pub population: usize,
    pub iterations: usize,
    pub differential_weight: f64,
    pub crossover: f64,
}

impl Default for DeParams {
    fn default() -> Self {
        Self { population: 30, iterations: 50, differential_weight: 0.5, crossover: 0.9 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Metaheuristic {
    Pso(PsoParams),
    De(DeParams),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BenchResult {
    pub capacity: f64,
    pub iterations: usize,
}

/// Best of [`RD_CANDIDATES`] random association, placement and phase draws.
pub fn benchmark_rd(
    scenario: &Scenario,
    transfers: &TransferSet,
    channels: &ChannelRealization,
    seed: u64,
) -> Result<BenchResult> {
    let history = rd_history(scenario, transfers, channels, seed, RD_CANDIDATES)?;
    Ok(BenchResult { capacity: history.last().copied().unwrap_or(0.0), iterations: RD_CANDIDATES })
}

/// Running best capacity after each random candidate.
pub fn rd_history(
    scenario: &Scenario,
    transfers: &TransferSet,
    channels: &ChannelRealization,
    seed: u64,
    candidates: usize,
) -> Result<Vec<f64>> {
    let mut rng = seed::stream(seed, &[seed::TAG_BENCH, 1]);
    let (m, k) = (scenario.num_uavs(), scenario.num_users());
    let mut best = f64::NEG_INFINITY;
    let mut history = Vec::with_capacity(candidates);
    for _ in 0..candidates {
        let (cand, s, phases) = random_candidate(scenario, &mut rng)?;
        debug_assert_eq!((s.uavs, s.users), (m, k));
        best = best.max(capacity(&cand, &s, &phases, transfers, channels));
        history.push(best);
    }
    Ok(history)
}

/// One feasible random `(scenario with new positions, S, θ)`.
pub fn random_candidate<R: Rng>(scenario: &Scenario, rng: &mut R) -> Result<(Scenario, AssociationMatrix, PhaseTensor)> {
    let (m, k) = (scenario.num_uavs(), scenario.num_users());
    let mut users: Vec<usize> = (0..k).collect();
    users.shuffle(rng);
    let served: Vec<Option<usize>> = (0..m).map(|i| users.get(i).copied()).collect();
    let s = AssociationMatrix::from_served(k, &served);

    let [ax, ay] = scenario.area;
    let mut positions: Vec<Vec3> = Vec::new();
    for _ in 0..20 {
        positions = (0..m)
            .map(|_| Vec3::new(rng.random::<f64>() * ax, rng.random::<f64>() * ay, scenario.altitude))
            .collect();
        repair_separation(&mut positions, scenario.area, scenario.d_min, rng.next_u64())?;
        let reachable = positions
            .iter()
            .zip(&scenario.uavs)
            .all(|(w, u)| energy_feasible(w, &u.initial_position, &scenario.energy));
        if reachable {
            break;
        }
        positions = scenario.initial_positions();
    }
    let mut cand = scenario.clone();
    cand.set_positions(&positions);
    let phases = PhaseTensor::random(m, scenario.sim.layers, scenario.sim.atoms_per_layer, rng);
    Ok((cand, s, phases))
}

/// Centres of `m` cells on a grid with ⌈√m⌉ columns. The last row is
/// stretched across the full width when it is short.
pub fn grid_centers(area: [f64; 2], m: usize, altitude: f64) -> Vec<Vec3> {
    let cols = (m as f64).sqrt().ceil() as usize;
    let rows = m.div_ceil(cols);
    let cell_h = area[1] / rows as f64;
    let mut out = Vec::with_capacity(m);
    for r in 0..rows {
        let in_row = if r + 1 == rows { m - cols * (rows - 1) } else { cols };
        let cell_w = area[0] / in_row as f64;
        for c in 0..in_row {
            out.push(Vec3::new((c as f64 + 0.5) * cell_w, (r as f64 + 0.5) * cell_h, altitude));
        }
    }
    out
}

/// Scenario copy with UAVs parked at grid centres.
pub fn uniform_deployment(scenario: &Scenario) -> Result<Scenario> {
    let centers = grid_centers(scenario.area, scenario.num_uavs(), scenario.altitude);
    if !safety_ok(&centers, scenario.d_min) {
        return Err(Error::InfeasibleGeometry(format!(
            "grid cells for {} UAVs are closer than {} m",
            scenario.num_uavs(),
            scenario.d_min
        )));
    }
    let mut s = scenario.clone();
    for (u, c) in s.uavs.iter_mut().zip(&centers) {
        u.position = *c;
        u.initial_position = *c;
    }
    Ok(s)
}

/// Uniform deployment, then association and phases as in the full solver.
pub fn benchmark_ud(
    scenario: &Scenario,
    transfers: &TransferSet,
    channels: &ChannelRealization,
    settings: &AoSettings,
    seed: u64,
) -> Result<BenchResult> {
    let ud = uniform_deployment(scenario)?;
    let fixed = AoSettings { fixed_positions: true, ..*settings };
    let sol = ao_solve(&ud, transfers, channels, PhaseStrategy::Lbl, &fixed, seed);
    Ok(BenchResult { capacity: sol.capacity(), iterations: sol.trace.iterations.len() })
}

/// The full loop with the phase step replaced by a metaheuristic.
pub fn benchmark_metaheuristic(
    kind: Metaheuristic,
    scenario: &Scenario,
    transfers: &TransferSet,
    channels: &ChannelRealization,
    settings: &AoSettings,
    seed: u64,
) -> BenchResult {
    let sol = ao_solve(scenario, transfers, channels, PhaseStrategy::Metaheuristic(kind), settings, seed);
    BenchResult { capacity: sol.capacity(), iterations: sol.trace.iterations.len() }
}

pub fn benchmark_pso(
    scenario: &Scenario,
    transfers: &TransferSet,
    channels: &ChannelRealization,
    settings: &AoSettings,
    seed: u64,
) -> BenchResult {
    benchmark_metaheuristic(Metaheuristic::Pso(PsoParams::default()), scenario, transfers, channels, settings, seed)
}

pub fn benchmark_de(
    scenario: &Scenario,
    transfers: &TransferSet,
    channels: &ChannelRealization,
    settings: &AoSettings,
    seed: u64,
) -> BenchResult {
    benchmark_metaheuristic(Metaheuristic::De(DeParams::default()), scenario, transfers, channels, settings, seed)
}

/// Best phases found by the metaheuristic; the incumbent seeds the population.
pub fn metaheuristic_phases(
    kind: Metaheuristic,
    scenario: &Scenario,
    s: &AssociationMatrix,
    incumbent: &PhaseTensor,
    transfers: &TransferSet,
    channels: &ChannelRealization,
    rng: &mut ChaCha8Rng,
) -> PhaseTensor {
    let eval = |x: &[f64]| {
        let t = PhaseTensor::from_flat(incumbent.uavs, incumbent.layers, incumbent.atoms, x);
        capacity(scenario, s, &t, transfers, channels)
    };
    let (best, _) = match kind {
        Metaheuristic::Pso(p) => pso(&eval, incumbent.as_flat(), &p, rng),
        Metaheuristic::De(p) => de(&eval, incumbent.as_flat(), &p, rng),
    };
    PhaseTensor::from_flat(incumbent.uavs, incumbent.layers, incumbent.atoms, &best)
}

fn wrap(x: f64) -> f64 {
    crate::channel::wrap_phase(x)
}

/// Particle swarm over wrapped angles. Returns the best point and the best
/// value after each iteration.
pub fn pso<F: Fn(&[f64]) -> f64, R: Rng>(f: &F, incumbent: &[f64], p: &PsoParams, rng: &mut R) -> (Vec<f64>, Vec<f64>) {
    let dim = incumbent.len();
    let mut x: Vec<Vec<f64>> = (0..p.population)
        .map(|i| if i == 0 { incumbent.to_vec() } else { (0..dim).map(|_| rng.random::<f64>() * TAU).collect() })
        .collect();
    let mut v: Vec<Vec<f64>> = (0..p.population).map(|_| (0..dim).map(|_| (rng.random::<f64>() - 0.5) * PI).collect()).collect();
    let mut fx: Vec<f64> = x.iter().map(|xi| f(xi)).collect();
    let mut pbest = x.clone();
    let mut pval = fx.clone();
    let mut g = argmax(&pval);
    let mut gbest = pbest[g].clone();
    let mut gval = pval[g];
    let mut history = Vec::with_capacity(p.iterations);
    for _ in 0..p.iterations {
        for i in 0..p.population {
            for d in 0..dim {
                let (r1, r2): (f64, f64) = (rng.random(), rng.random());
                let vel = p.inertia * v[i][d]
                    + p.cognitive * r1 * (pbest[i][d] - x[i][d])
                    + p.social * r2 * (gbest[d] - x[i][d]);
                v[i][d] = vel.clamp(-PI, PI);
                x[i][d] = wrap(x[i][d] + v[i][d]);
            }
            fx[i] = f(&x[i]);
            if fx[i] > pval[i] {
                pval[i] = fx[i];
                pbest[i] = x[i].clone();
            }
        }
        g = argmax(&pval);
        if pval[g] > gval {
            gval = pval[g];
            gbest = pbest[g].clone();
        }
        history.push(gval);
    }
    (gbest, history)
}

/// DE/rand/1/bin over wrapped angles.
pub fn de<F: Fn(&[f64]) -> f64, R: Rng>(f: &F, incumbent: &[f64], p: &DeParams, rng: &mut R) -> (Vec<f64>, Vec<f64>) {
    let dim = incumbent.len();
    let n = p.population.max(4);
    let mut x: Vec<Vec<f64>> = (0..n)
        .map(|i| if i == 0 { incumbent.to_vec() } else { (0..dim).map(|_| rng.random::<f64>() * TAU).collect() })
        .collect();
    let mut fx: Vec<f64> = x.iter().map(|xi| f(xi)).collect();
    let mut history = Vec::with_capacity(p.iterations);
    for _ in 0..p.iterations {
        for i in 0..n {
            let mut pick = || loop {
                let j = rng.random_range(0..n);
                if j != i {
                    break j;
                }
            };
            let a = pick();
            let b = loop {
                let j = pick();
                if j != a {
                    break j;
                }
            };
            let c = loop {
                let j = pick();
                if j != a && j != b {
                    break j;
                }
            };
            let forced = rng.random_range(0..dim);
            let trial: Vec<f64> = (0..dim)
                .map(|d| {
                    if d == forced || rng.random::<f64>() < p.crossover {
                        wrap(x[a][d] + p.differential_weight * (x[b][d] - x[c][d]))
                    } else {
                        x[i][d]
                    }
                })
                .collect();
            let ft = f(&trial);
            if ft >= fx[i] {
                x[i] = trial;
                fx[i] = ft;
            }
        }
        history.push(fx[argmax(&fx)]);
    }
    let best = argmax(&fx);
    (x[best].clone(), history)
}

fn argmax(v: &[f64]) -> usize {
    (0..v.len()).fold(0, |b, i| if v[i] > v[b] { i } else { b })
}

/// UAVs without a metasurface: uniform grid, scalar Rayleigh links, same
/// association solver.
pub fn benchmark_no_sim(scenario: &Scenario, seed: u64) -> Result<BenchResult> {
    let ud = uniform_deployment(scenario)?;
    let rates = no_sim_rates(&ud, seed);
    let s = binarize(&solve_m_auuop(&rates)?, &rates);
    Ok(BenchResult { capacity: s.objective(&rates), iterations: 1 })
}

/// Rate table with `h = √β z`, `z ~ CN(0, 1)` per pair.
pub fn no_sim_rates(scenario: &Scenario, seed: u64) -> Vec<Vec<f64>> {
    let base = seed::derive(seed, &[seed::TAG_NO_SIM]);
    let sinr: Vec<Vec<f64>> = scenario
        .uavs
        .iter()
        .enumerate()
        .map(|(m, uav)| {
            let rx: Vec<f64> = scenario
                .users
                .iter()
                .enumerate()
                .map(|(k, u)| {
                    let mut r = seed::stream(base, &[m as u64, k as u64]);
                    let re: f64 = r.sample(StandardNormal);
                    let im: f64 = r.sample(StandardNormal);
                    let z2 = 0.5 * (re * re + im * im);
                    u.transmit_power * path_gain(&scenario.radio, &uav.position, &u.position) * z2
                })
                .collect();
            let total: f64 = rx.iter().sum();
            rx.iter().map(|&s| s / ((total - s).max(0.0) + uav.noise_power)).collect()
        })
        .collect();
    rate_table_from_sinr(&sinr)
}
