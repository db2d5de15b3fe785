//! Monte-Carlo sweeps over L, N or K.
//!
//! Each (value, trial) cell gets a fresh scenario and channel draw keyed by
//! `derive(master, [value, trial])`; every method in the cell sees the same
//! draw. Cells run in parallel on the ambient rayon pool and come back in
//! cell order, so the table does not depend on the worker count.

use std::collections::BTreeSet;
use std::fmt;
use std::path::Path;
use std::str::FromStr;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::ao::{ao_solve, AoSettings, PhaseStrategy, SolveTrace};
use crate::bench::{benchmark_de, benchmark_no_sim, benchmark_pso, benchmark_rd, benchmark_ud};
use crate::channel::{build_transfers, sample_channels};
use crate::config::ScenarioConfig;
use crate::error::{Error, Result};
use crate::scenario::generate_scenario;
use crate::seed;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum SweepVar {
    L,
    N,
    K,
}

impl SweepVar {
    pub fn apply(self, cfg: &mut ScenarioConfig, value: usize) {
        match self {
            SweepVar::L => cfg.sim.layers = value,
            SweepVar::N => cfg.sim.atoms_per_layer = value,
            SweepVar::K => cfg.num_users = value,
        }
    }
}

impl fmt::Display for SweepVar {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SweepVar::L => "L",
            SweepVar::N => "N",
            SweepVar::K => "K",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    /// Full alternating optimization with LBL-IPSO phases.
    Ao,
    Ud,
    Rd,
    Pso,
    De,
    NoSim,
}

impl Method {
    pub const ALL: [Method; 6] = [Method::Ao, Method::Ud, Method::Rd, Method::Pso, Method::De, Method::NoSim];

    pub fn name(self) -> &'static str {
        match self {
            Method::Ao => "ao",
            Method::Ud => "ud",
            Method::Rd => "rd",
            Method::Pso => "pso",
            Method::De => "de",
            Method::NoSim => "no_sim",
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown method '{s}'")))
    }
}

fn default_methods() -> Vec<Method> {
    vec![Method::Ao]
}

fn default_base() -> ScenarioConfig {
    ScenarioConfig::reference_defaults()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentSpec {
    pub sweep_var: SweepVar,
    pub values: Vec<usize>,
    pub trials: usize,
    #[serde(default = "default_methods")]
    pub methods: Vec<Method>,
    #[serde(default)]
    pub master_seed: u64,
    /// Record wall-clock times; off by default so tables are reproducible.
    #[serde(default)]
    pub timing: bool,
    #[serde(default = "default_base")]
    pub base: ScenarioConfig,
}

impl ExperimentSpec {
    pub fn from_toml_str(s: &str) -> Result<Self> {
        let spec: Self = toml::from_str(s)?;
        spec.check()?;
        Ok(spec)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_toml_str(&std::fs::read_to_string(path)?)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("spec serializes")
    }

    pub fn check(&self) -> Result<()> {
        if self.values.is_empty() {
            return Err(Error::Config("experiment needs at least one sweep value".into()));
        }
        if self.trials == 0 {
            return Err(Error::Config("experiment needs at least one trial".into()));
        }
        if self.methods.is_empty() {
            return Err(Error::Config("experiment needs at least one method".into()));
        }
        for &v in &self.values {
            self.config_for(v)?.check()?;
        }
        Ok(())
    }

    pub fn config_for(&self, value: usize) -> Result<ScenarioConfig> {
        let mut cfg = self.base.clone();
        self.sweep_var.apply(&mut cfg, value);
        if self.sweep_var == SweepVar::N {
            let r = (value as f64).sqrt().round() as usize;
            if r * r != value {
                return Err(Error::Config(format!("N = {value} is not a perfect square")));
            }
        }
        Ok(cfg)
    }

    pub fn cell_seed(&self, value: usize, trial: usize) -> u64 {
        seed::derive(self.master_seed, &[value as u64, trial as u64])
    }

    /// All cells in table order.
    pub fn cells(&self) -> Vec<(usize, usize)> {
        self.values.iter().flat_map(|&v| (0..self.trials).map(move |t| (v, t))).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultRow {
    pub sweep_var: String,
    pub value: usize,
    pub trial: usize,
    pub method: String,
    pub capacity_bits_s_hz: f64,
    pub iterations: usize,
    pub wall_ms: f64,
    pub seed: u64,
}

#[derive(Debug, Clone)]
pub struct CellOutcome {
    pub value: usize,
    pub trial: usize,
    pub seed: u64,
    pub rows: Vec<ResultRow>,
    /// AO trace, when the method set includes it.
    pub trace: Option<SolveTrace>,
    pub error: Option<String>,
}

pub fn run_cell(spec: &ExperimentSpec, value: usize, trial: usize) -> CellOutcome {
    let cell_seed = spec.cell_seed(value, trial);
    let mut out = CellOutcome { value, trial, seed: cell_seed, rows: Vec::new(), trace: None, error: None };
    if let Err(e) = fill_cell(spec, &mut out) {
        out.error = Some(e.to_string());
        out.rows.clear();
    }
    out
}

fn fill_cell(spec: &ExperimentSpec, out: &mut CellOutcome) -> Result<()> {
    let cfg = spec.config_for(out.value)?;
    let scenario = generate_scenario(&cfg, out.seed)?;
    let transfers = build_transfers(&scenario)?;
    let channels = sample_channels(&scenario, &mut seed::stream(out.seed, &[seed::TAG_CHANNEL]));
    let settings = AoSettings::from(&cfg.solver);

    for &method in &spec.methods {
        let started = Instant::now();
        let (capacity, iterations) = match method {
            Method::Ao => {
                let sol = ao_solve(&scenario, &transfers, &channels, PhaseStrategy::Lbl, &settings, out.seed);
                let mut trace = sol.trace.clone();
                if !spec.timing {
                    trace.iterations.iter_mut().for_each(|r| r.wall_ms = 0.0);
                }
                out.trace = Some(trace);
                (sol.capacity(), sol.trace.iterations.len())
            }
            Method::Ud => {
                let r = benchmark_ud(&scenario, &transfers, &channels, &settings, out.seed)?;
                (r.capacity, r.iterations)
            }
            Method::Rd => {
                let r = benchmark_rd(&scenario, &transfers, &channels, out.seed)?;
                (r.capacity, r.iterations)
            }
            Method::Pso => {
                let r = benchmark_pso(&scenario, &transfers, &channels, &settings, out.seed);
                (r.capacity, r.iterations)
            }
            Method::De => {
                let r = benchmark_de(&scenario, &transfers, &channels, &settings, out.seed);
                (r.capacity, r.iterations)
            }
            Method::NoSim => {
                let r = benchmark_no_sim(&scenario, out.seed)?;
                (r.capacity, r.iterations)
            }
        };
        if !capacity.is_finite() {
            return Err(Error::SolverFailure(format!("{method} returned a non-finite capacity")));
        }
        out.rows.push(ResultRow {
            sweep_var: spec.sweep_var.to_string(),
            value: out.value,
            trial: out.trial,
            method: method.to_string(),
            capacity_bits_s_hz: capacity,
            iterations,
            wall_ms: if spec.timing { started.elapsed().as_secs_f64() * 1e3 } else { 0.0 },
            seed: out.seed,
        });
    }
    Ok(())
}

/// Runs every cell not in `done`, in parallel, returning outcomes in cell order.
pub fn run_experiment(spec: &ExperimentSpec, done: &BTreeSet<(usize, usize)>) -> Vec<CellOutcome> {
    let todo: Vec<(usize, usize)> = spec.cells().into_iter().filter(|c| !done.contains(c)).collect();
    todo.par_iter().map(|&(v, t)| run_cell(spec, v, t)).collect()
}

/// Median capacity of `method` per sweep value, in value order.
pub fn median_by_value(rows: &[ResultRow], values: &[usize], method: Method) -> Vec<f64> {
    values
        .iter()
        .map(|&v| {
            let caps: Vec<f64> = rows
                .iter()
                .filter(|r| r.value == v && r.method == method.name())
                .map(|r| r.capacity_bits_s_hz)
                .collect();
            median(caps)
        })
        .collect()
}

pub fn median(mut v: Vec<f64>) -> f64 {
    if v.is_empty() {
        return f64::NAN;
    }
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}
