//! Alternating optimization over association, placement and phases.

use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::association::{binarize, rate_table, solve_m_auuop};
use crate::bench::{metaheuristic_phases, Metaheuristic};
use crate::channel::{whitened_gains, ChannelRealization, CVector, PhaseTensor, TransferSet};
use crate::config::SolverConfig;
use crate::placement::{sca_loop, PlacementSettings};
use crate::phase::cvae::CvaeModel;
use crate::phase::hgpso::{hgpso_select, PhaseSolver};
use crate::phase::lbl_ipso;
use crate::scenario::{AssociationMatrix, AssociationMode, Scenario};
use crate::seed;

#[derive(Debug, Clone, Copy)]
pub enum PhaseStrategy<'a> {
    Lbl,
    Cvae(&'a CvaeModel),
    /// Cost-based switch between the two above.
    Hgpso(Option<&'a CvaeModel>),
    Metaheuristic(Metaheuristic),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AoSettings {
    pub epsilon: f64,
    pub max_iterations: usize,
    pub kappa_max: usize,
    pub placement: PlacementSettings,
    /// Keep UAVs at their initial positions (uniform deployment baseline).
    pub fixed_positions: bool,
    pub hgpso_budget_ops: f64,
}

impl Default for AoSettings {
    fn default() -> Self {
        Self::from(&SolverConfig::default())
    }
}

impl From<&SolverConfig> for AoSettings {
    fn from(s: &SolverConfig) -> Self {
        Self {
            epsilon: s.epsilon,
            max_iterations: s.max_outer_iterations,
            kappa_max: s.kappa_max,
            placement: PlacementSettings::from(s),
            fixed_positions: false,
            hgpso_budget_ops: s.hgpso_budget_ops,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Termination {
    Converged,
    MaxIter,
    SolverFailure,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationRecord {
    pub tau: usize,
    pub after_association: f64,
    pub after_placement: f64,
    pub after_phase: f64,
    pub sca_rounds: usize,
    /// False when the phase candidate lowered capacity and was discarded.
    pub phase_accepted: bool,
    pub wall_ms: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SolveTrace {
    pub initial_capacity: f64,
    pub iterations: Vec<IterationRecord>,
    pub termination: Termination,
    pub failures: Vec<String>,
}

impl SolveTrace {
    pub fn final_capacity(&self) -> f64 {
        self.iterations.last().map_or(self.initial_capacity, |r| r.after_phase)
    }

    /// Capacity after every sub-step, in order.
    pub fn steps(&self) -> Vec<f64> {
        self.iterations
            .iter()
            .flat_map(|r| [r.after_association, r.after_placement, r.after_phase])
            .collect()
    }

    /// First outer iteration whose capacity is within `frac` of the final value.
    pub fn iterations_to_within(&self, frac: f64) -> usize {
        let fin = self.final_capacity();
        self.iterations
            .iter()
            .find(|r| r.after_phase >= fin * (1.0 - frac))
            .map_or(self.iterations.len(), |r| r.tau)
    }
}

#[derive(Debug, Clone)]
pub struct AoSolution {
    pub association: AssociationMatrix,
    pub scenario: Scenario,
    pub phases: PhaseTensor,
    pub trace: SolveTrace,
}

impl AoSolution {
    pub fn capacity(&self) -> f64 {
        self.trace.final_capacity()
    }
}

/// `Σ S R` at the scenario's current positions.
pub fn capacity(
    scenario: &Scenario,
    s: &AssociationMatrix,
    phases: &PhaseTensor,
    transfers: &TransferSet,
    channels: &ChannelRealization,
) -> f64 {
    s.objective(&rate_table(scenario, phases, transfers, channels))
}

/// Served-user channels for the phase solvers.
pub fn served_channels<'c>(s: &AssociationMatrix, channels: &'c ChannelRealization) -> Vec<Option<&'c CVector>> {
    s.served().iter().enumerate().map(|(m, k)| k.map(|k| &channels.whitened[m][k])).collect()
}

/// Runs the alternating loop from random phases drawn from `seed`.
pub fn ao_solve(
    scenario: &Scenario,
    transfers: &TransferSet,
    channels: &ChannelRealization,
    strategy: PhaseStrategy<'_>,
    settings: &AoSettings,
    seed: u64,
) -> AoSolution {
    let mut rng = seed::stream(seed, &[seed::TAG_PHASE_INIT]);
    let phases = PhaseTensor::random(scenario.num_uavs(), scenario.sim.layers, scenario.sim.atoms_per_layer, &mut rng);
    ao_solve_from(scenario, transfers, channels, strategy, settings, phases, seed)
}

pub fn ao_solve_from(
    scenario: &Scenario,
    transfers: &TransferSet,
    channels: &ChannelRealization,
    strategy: PhaseStrategy<'_>,
    settings: &AoSettings,
    mut phases: PhaseTensor,
    seed: u64,
) -> AoSolution {
    let mut scenario = scenario.clone();
    let mut s = AssociationMatrix::zeros(scenario.num_uavs(), scenario.num_users(), AssociationMode::Binary);
    let mut trace = SolveTrace {
        initial_capacity: 0.0,
        iterations: Vec::new(),
        termination: Termination::MaxIter,
        failures: Vec::new(),
    };
    let mut previous = f64::NEG_INFINITY;
    let mut meta_rng = ChaCha8Rng::seed_from_u64(seed::derive(seed, &[seed::TAG_BENCH]));

    for tau in 1..=settings.max_iterations {
        let started = Instant::now();

        let rates = rate_table(&scenario, &phases, transfers, channels);
        match solve_m_auuop(&rates) {
            Ok(cont) => s = binarize(&cont, &rates),
            Err(e) => {
                trace.failures.push(e.to_string());
                trace.termination = Termination::SolverFailure;
                break;
            }
        }
        let after_association = s.objective(&rates);
        if tau == 1 {
            trace.initial_capacity = after_association;
        }

        let mut sca_rounds = 0;
        let after_placement = if settings.fixed_positions {
            after_association
        } else {
            let gains = whitened_gains(&phases, transfers, channels);
            let out = sca_loop(&scenario, &s.served(), &gains, &settings.placement);
            sca_rounds = out.rounds;
            if let Some(f) = out.failure {
                trace.failures.push(format!("iteration {tau}: {f}"));
            }
            scenario.set_positions(&out.positions);
            capacity(&scenario, &s, &phases, transfers, channels)
        };

        let candidate = phase_step(&scenario, &s, &phases, transfers, channels, strategy, settings, &mut meta_rng);
        let candidate_capacity = capacity(&scenario, &s, &candidate, transfers, channels);
        let phase_accepted = candidate_capacity >= after_placement;
        let after_phase = if phase_accepted {
            phases = candidate;
            candidate_capacity
        } else {
            after_placement
        };

        trace.iterations.push(IterationRecord {
            tau,
            after_association,
            after_placement,
            after_phase,
            sca_rounds,
            phase_accepted,
            wall_ms: started.elapsed().as_secs_f64() * 1e3,
        });
        if after_phase - previous <= settings.epsilon {
            trace.termination = Termination::Converged;
            break;
        }
        previous = after_phase;
    }
    AoSolution { association: s, scenario, phases, trace }
}

#[allow(clippy::too_many_arguments)]
fn phase_step(
    scenario: &Scenario,
    s: &AssociationMatrix,
    phases: &PhaseTensor,
    transfers: &TransferSet,
    channels: &ChannelRealization,
    strategy: PhaseStrategy<'_>,
    settings: &AoSettings,
    rng: &mut ChaCha8Rng,
) -> PhaseTensor {
    let lbl = || lbl_ipso(&served_channels(s, channels), transfers, phases, settings.kappa_max).0;
    let cvae = |model: &CvaeModel| model.generate_for(scenario, s, channels, rng.clone()).unwrap_or_else(|_| lbl());
    match strategy {
        PhaseStrategy::Lbl => lbl(),
        PhaseStrategy::Cvae(model) => cvae(model),
        PhaseStrategy::Hgpso(model) => match hgpso_select(scenario, settings.kappa_max, settings.hgpso_budget_ops, model) {
            PhaseSolver::Cvae => cvae(model.expect("selected only with a model")),
            PhaseSolver::Lbl => lbl(),
        },
        PhaseStrategy::Metaheuristic(kind) => metaheuristic_phases(kind, scenario, s, phases, transfers, channels, rng),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::channel::{build_transfers, sample_channels};
    use crate::config::ScenarioConfig;
    use crate::energy::energy_feasible;
    use crate::scenario::{generate_scenario, safety_ok, validate_association};

    fn run(cfg: &ScenarioConfig, seed: u64) -> (Scenario, AoSolution) {
        let s = generate_scenario(cfg, seed).unwrap();
        let t = build_transfers(&s).unwrap();
        let ch = sample_channels(&s, &mut seed::stream(seed, &[seed::TAG_CHANNEL]));
        let sol = ao_solve(&s, &t, &ch, PhaseStrategy::Lbl, &AoSettings::from(&cfg.solver), seed);
        (s, sol)
    }

    #[test]
    fn single_link_converges_fast() {
        let mut cfg = ScenarioConfig::reference_defaults();
        cfg.num_uavs = 1;
        cfg.num_users = 1;
        cfg.allow_more_uavs_than_users = true;
        cfg.sim.atoms_per_layer = 16;
        let (_, sol) = run(&cfg, 3);
        assert!(sol.trace.iterations.len() <= 3, "{:?}", sol.trace);
    }

    #[test]
    fn outer_loop_is_monotone_and_feasible() {
        let mut cfg = ScenarioConfig::reference_defaults();
        cfg.sim.atoms_per_layer = 16;
        cfg.sim.layers = 2;
        cfg.solver.kappa_max = 20;
        for seed in 0..6 {
            let (s0, sol) = run(&cfg, seed);
            let steps = sol.trace.steps();
            assert!(steps.windows(2).all(|w| w[1] >= w[0] - 1e-9), "{steps:?}");
            assert!(sol.trace.iterations.len() <= 50);
            assert!(validate_association(&sol.association));
            assert!(safety_ok(&sol.scenario.uav_positions(), s0.d_min));
            for u in &sol.scenario.uavs {
                assert!(energy_feasible(&u.position, &u.initial_position, &s0.energy));
            }
            assert!(sol.phases.in_range());
            assert!((sol.capacity() - capacity(&sol.scenario, &sol.association, &sol.phases, &build_transfers(&s0).unwrap(), &sample_channels(&s0, &mut seed::stream(seed, &[seed::TAG_CHANNEL])))).abs() < 1e-9);
        }
    }

    #[test]
    fn deterministic() {
        let mut cfg = ScenarioConfig::reference_defaults();
        cfg.sim.atoms_per_layer = 9;
        cfg.sim.layers = 2;
        cfg.solver.kappa_max = 5;
        let (_, a) = run(&cfg, 8);
        let (_, b) = run(&cfg, 8);
        assert_eq!(a.phases, b.phases);
        assert_eq!(a.trace.steps(), b.trace.steps());
    }
}
