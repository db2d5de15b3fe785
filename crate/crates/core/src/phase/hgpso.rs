//! Cost-based switch between LBL-IPSO and the learned generator.

use crate::phase::cvae::CvaeModel;
use crate::phase::predicted_cost;
use crate::scenario::Scenario;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PhaseSolver {
    Lbl,
    Cvae,
}

/// Picks the generator when LBL-IPSO's predicted operation count exceeds
/// `budget_ops` and a model for this geometry is available.
pub fn hgpso_select(scenario: &Scenario, kappa_max: usize, budget_ops: f64, model: Option<&CvaeModel>) -> PhaseSolver {
    let cost = predicted_cost(scenario.sim.atoms_per_layer, scenario.num_uavs(), scenario.sim.layers, kappa_max);
    if cost <= budget_ops {
        return PhaseSolver::Lbl;
    }
    match model {
        Some(m) if m.matches(scenario) => PhaseSolver::Cvae,
        _ => {
            log::warn!("predicted LBL-IPSO cost {cost:.3e} exceeds budget {budget_ops:.3e} but no matching model is loaded");
            PhaseSolver::Lbl
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::ScenarioConfig;
    use crate::phase::cvae::ModelLayout;
    use crate::scenario::generate_scenario;

    #[test]
    fn selection_rules() {
        let mut cfg = ScenarioConfig::reference_defaults();
        cfg.num_uavs = 1;
        cfg.num_users = 2;
        cfg.sim.layers = 1;
        cfg.sim.atoms_per_layer = 4;
        let tiny = generate_scenario(&cfg, 1).unwrap();
        assert_eq!(hgpso_select(&tiny, 200, 1e8, None), PhaseSolver::Lbl);

        let big = generate_scenario(&ScenarioConfig::reference_defaults(), 1).unwrap();
        let layout = ModelLayout { users: 5, layers: 4, atoms: 36, hidden: 4, latent: 2 };
        let model = CvaeModel::new(layout, big.sim, big.radio.wavelength, 0);
        assert_eq!(hgpso_select(&big, 200, 1.0, Some(&model)), PhaseSolver::Cvae);
        assert_eq!(hgpso_select(&big, 200, 1.0, None), PhaseSolver::Lbl);
        assert_eq!(hgpso_select(&tiny, 200, 1.0, Some(&model)), PhaseSolver::Lbl);
    }
}
