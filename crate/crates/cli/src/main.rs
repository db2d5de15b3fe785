use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, Context};
use clap::{Parser, Subcommand, ValueEnum};
use serde::Serialize;

use simuav::ao::{ao_solve, AoSettings, PhaseStrategy, SolveTrace, Termination};
use simuav::channel::{build_transfers, sample_channels};
use simuav::config::ScenarioConfig;
use simuav::dataset::{generate_dataset, read_dataset, write_dataset};
use simuav::experiment::{median_by_value, run_experiment, ExperimentSpec, ResultRow};
use simuav::phase::cvae::{train_cvae, CvaeModel, ModelLayout, TrainSettings};
use simuav::scenario::generate_scenario;
use simuav::seed;

const EXIT_CONFIG: u8 = 2;
const EXIT_FAILURE: u8 = 3;

#[derive(Parser)]
#[command(name = "simuav", version, about = "UAV-mounted stacked metasurface network optimizer")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the alternating optimizer on one scenario.
    Solve {
        config: PathBuf,
        /// Overrides the seed in the config.
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, value_enum, default_value_t = PhaseArg::Lbl)]
        phase: PhaseArg,
        /// Trained generator, required for `--phase cvae`.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long, env = "SIMUAV_OUT_DIR", default_value = "out")]
        out: PathBuf,
        /// Record wall-clock times in the trace.
        #[arg(long)]
        timing: bool,
    },
    /// Run a parameter sweep; re-running resumes from the existing table.
    Experiment {
        spec: PathBuf,
        #[arg(long)]
        jobs: Option<usize>,
        #[arg(long, env = "SIMUAV_OUT_DIR", default_value = "out")]
        out_dir: PathBuf,
    },
    /// Generate LBL-IPSO training samples.
    Dataset {
        config: PathBuf,
        #[arg(long)]
        count: usize,
        #[arg(long, env = "SIMUAV_OUT_DIR", default_value = "out")]
        out: PathBuf,
        /// Master seed for the sample scenarios; defaults to the config seed.
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        jobs: Option<usize>,
    },
    /// Train the phase generator on a dataset directory.
    Train {
        dataset: PathBuf,
        #[arg(long, default_value_t = 300)]
        epochs: usize,
        #[arg(long, default_value_t = 1e-4)]
        lr: f64,
        #[arg(long, default_value_t = 64)]
        batch_size: usize,
        #[arg(long, default_value_t = 256)]
        hidden: usize,
        #[arg(long, default_value_t = 32)]
        latent: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Checkpoint path; the loss curve goes next to it as `<out>.loss.csv`.
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum PhaseArg {
    Lbl,
    Cvae,
    Auto,
}

/// Errors that map to the configuration exit code.
#[derive(Debug)]
struct ConfigError(anyhow::Error);

impl std::fmt::Display for ConfigError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{:#}", self.0)
    }
}

impl std::error::Error for ConfigError {}

fn config_err(e: impl Into<anyhow::Error>) -> anyhow::Error {
    anyhow::Error::new(ConfigError(e.into()))
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Solve { config, seed, phase, checkpoint, out, timing } => {
            cmd_solve(&config, seed, phase, checkpoint.as_deref(), &out, timing)
        }
        Command::Experiment { spec, jobs, out_dir } => with_jobs(jobs, || cmd_experiment(&spec, &out_dir)),
        Command::Dataset { config, count, out, seed, jobs } => with_jobs(jobs, || cmd_dataset(&config, count, &out, seed)),
        Command::Train { dataset, epochs, lr, batch_size, hidden, latent, seed, out } => {
            let settings = TrainSettings { epochs, lr, batch_size, seed };
            cmd_train(&dataset, settings, hidden, latent, &out)
        }
    };
    match result {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            if e.downcast_ref::<ConfigError>().is_some() {
                ExitCode::from(EXIT_CONFIG)
            } else {
                ExitCode::from(EXIT_FAILURE)
            }
        }
    }
}

fn with_jobs(jobs: Option<usize>, f: impl FnOnce() -> anyhow::Result<ExitCode> + Send) -> anyhow::Result<ExitCode> {
    match jobs {
        None => f(),
        Some(0) => Err(config_err(anyhow!("--jobs must be at least 1"))),
        Some(n) => rayon::ThreadPoolBuilder::new().num_threads(n).build()?.install(f),
    }
}

fn load_config(path: &Path) -> anyhow::Result<ScenarioConfig> {
    let cfg = ScenarioConfig::load(path).with_context(|| format!("reading config {}", path.display())).map_err(config_err)?;
    cfg.check().map_err(config_err)?;
    Ok(cfg)
}

#[derive(Serialize)]
struct SolutionFile<'a> {
    seed: u64,
    phase_solver: &'static str,
    capacity_bits_s_hz: f64,
    termination: Termination,
    /// Served user per UAV.
    association: Vec<Option<usize>>,
    uav_positions: Vec<[f64; 3]>,
    phases: &'a [f64],
    phases_shape: [usize; 3],
}

#[derive(Serialize)]
struct TraceRow {
    tau: usize,
    after_association: f64,
    after_placement: f64,
    after_phase: f64,
    sca_rounds: usize,
    phase_accepted: bool,
    wall_ms: f64,
}

fn write_trace_csv(path: &Path, trace: &SolveTrace) -> anyhow::Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in &trace.iterations {
        w.serialize(TraceRow {
            tau: r.tau,
            after_association: r.after_association,
            after_placement: r.after_placement,
            after_phase: r.after_phase,
            sca_rounds: r.sca_rounds,
            phase_accepted: r.phase_accepted,
            wall_ms: r.wall_ms,
        })?;
    }
    w.flush()?;
    Ok(())
}

fn cmd_solve(
    config: &Path,
    seed_override: Option<u64>,
    phase: PhaseArg,
    checkpoint: Option<&Path>,
    out: &Path,
    timing: bool,
) -> anyhow::Result<ExitCode> {
    let cfg = load_config(config)?;
    let model = match (phase, checkpoint) {
        (PhaseArg::Cvae, None) => return Err(config_err(anyhow!("--phase cvae needs --checkpoint with a trained model"))),
        (_, Some(p)) => Some(CvaeModel::load(p).with_context(|| format!("loading checkpoint {}", p.display())).map_err(config_err)?),
        (_, None) => None,
    };
    let run_seed = seed_override.unwrap_or(cfg.seed);
    let scenario = generate_scenario(&cfg, run_seed).map_err(config_err)?;
    if let Some(m) = &model {
        if phase == PhaseArg::Cvae && !m.matches(&scenario) {
            return Err(config_err(anyhow!("checkpoint dimensions do not match the scenario")));
        }
    }
    let transfers = build_transfers(&scenario).map_err(config_err)?;
    let channels = sample_channels(&scenario, &mut seed::stream(run_seed, &[seed::TAG_CHANNEL]));
    let (strategy, name) = match phase {
        PhaseArg::Lbl => (PhaseStrategy::Lbl, "lbl"),
        PhaseArg::Cvae => (PhaseStrategy::Cvae(model.as_ref().expect("checked above")), "cvae"),
        PhaseArg::Auto => (PhaseStrategy::Hgpso(model.as_ref().filter(|m| m.matches(&scenario))), "auto"),
    };
    let mut sol = ao_solve(&scenario, &transfers, &channels, strategy, &AoSettings::from(&cfg.solver), run_seed);
    if !timing {
        sol.trace.iterations.iter_mut().for_each(|r| r.wall_ms = 0.0);
    }

    fs::create_dir_all(out)?;
    let file = SolutionFile {
        seed: run_seed,
        phase_solver: name,
        capacity_bits_s_hz: sol.capacity(),
        termination: sol.trace.termination,
        association: sol.association.served(),
        uav_positions: sol.scenario.uav_positions().iter().map(|p| [p.x, p.y, p.z]).collect(),
        phases: sol.phases.as_flat(),
        phases_shape: [sol.phases.uavs, sol.phases.layers, sol.phases.atoms],
    };
    fs::write(out.join("solution.json"), serde_json::to_string_pretty(&file)?)?;
    fs::write(out.join("trace.json"), serde_json::to_string_pretty(&sol.trace)?)?;
    write_trace_csv(&out.join("trace.csv"), &sol.trace)?;

    for f in &sol.trace.failures {
        eprintln!("warning: {f}");
    }
    println!(
        "capacity {:.6} bits/s/Hz after {} iterations ({:?})",
        sol.capacity(),
        sol.trace.iterations.len(),
        sol.trace.termination
    );
    if sol.trace.termination == Termination::SolverFailure {
        eprintln!("error: solver failure, partial results written to {}", out.display());
        return Ok(ExitCode::from(EXIT_FAILURE));
    }
    Ok(ExitCode::SUCCESS)
}

fn read_rows(path: &Path) -> anyhow::Result<Vec<ResultRow>> {
    if !path.exists() {
        return Ok(Vec::new());
    }
    let mut r = csv::Reader::from_path(path)?;
    r.deserialize().collect::<Result<_, _>>().with_context(|| format!("reading {}", path.display()))
}

fn write_rows(path: &Path, rows: &[ResultRow]) -> anyhow::Result<()> {
    let tmp = path.with_extension("csv.tmp");
    let mut w = csv::Writer::from_path(&tmp)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    drop(w);
    fs::rename(tmp, path)?;
    Ok(())
}

fn cmd_experiment(spec_path: &Path, out_dir: &Path) -> anyhow::Result<ExitCode> {
    let spec = ExperimentSpec::load(spec_path)
        .with_context(|| format!("reading experiment spec {}", spec_path.display()))
        .map_err(config_err)?;
    let traces = out_dir.join("traces");
    fs::create_dir_all(&traces)?;
    let table = out_dir.join("results.csv");

    // Keep rows from earlier runs that belong to this spec; a cell counts
    // as done only when every method has a row.
    let cells = spec.cells();
    let var = spec.sweep_var.to_string();
    let method_rank = |name: &str| spec.methods.iter().position(|m| m.name() == name);
    let mut rows: Vec<ResultRow> = read_rows(&table)?
        .into_iter()
        .filter(|r| r.sweep_var == var && method_rank(&r.method).is_some() && r.seed == spec.cell_seed(r.value, r.trial))
        .filter(|r| cells.contains(&(r.value, r.trial)))
        .collect();
    let done: BTreeSet<(usize, usize)> = cells
        .iter()
        .copied()
        .filter(|&(v, t)| rows.iter().filter(|r| r.value == v && r.trial == t).count() == spec.methods.len())
        .collect();
    rows.retain(|r| done.contains(&(r.value, r.trial)));
    if !done.is_empty() {
        log::info!("resuming: {} of {} cells already done", done.len(), cells.len());
    }

    let order = |r: &ResultRow| {
        let cell = cells.iter().position(|&c| c == (r.value, r.trial)).unwrap_or(usize::MAX);
        (cell, method_rank(&r.method).unwrap_or(usize::MAX))
    };
    // Work in batches so an interrupted run keeps what it finished.
    let batch = 2 * rayon::current_num_threads();
    let pending: Vec<(usize, usize)> = cells.iter().copied().filter(|c| !done.contains(c)).collect();
    let mut failed = 0;
    for chunk in pending.chunks(batch.max(1)) {
        let skip: BTreeSet<(usize, usize)> = cells.iter().copied().filter(|c| !chunk.contains(c)).collect();
        for cell in run_experiment(&spec, &skip) {
            if let Some(e) = &cell.error {
                failed += 1;
                eprintln!("error: {}={} trial {}: {e}", var, cell.value, cell.trial);
                continue;
            }
            if let Some(trace) = &cell.trace {
                let name = format!("{var}{}-trial{}.json", cell.value, cell.trial);
                fs::write(traces.join(name), serde_json::to_string_pretty(trace)?)?;
            }
            rows.extend(cell.rows);
        }
        rows.sort_by_key(order);
        write_rows(&table, &rows)?;
    }
    rows.sort_by_key(order);
    write_rows(&table, &rows)?;

    for &m in &spec.methods {
        let med = median_by_value(&rows, &spec.values, m);
        let line: Vec<String> = spec.values.iter().zip(&med).map(|(v, c)| format!("{var}={v}: {c:.3}")).collect();
        println!("{:<7} {}", m.name(), line.join("  "));
    }
    if failed > 0 {
        eprintln!("error: {failed} cell(s) failed; table written to {}", table.display());
        return Ok(ExitCode::from(EXIT_FAILURE));
    }
    Ok(ExitCode::SUCCESS)
}

fn cmd_dataset(config: &Path, count: usize, out: &Path, seed_override: Option<u64>) -> anyhow::Result<ExitCode> {
    let cfg = load_config(config)?;
    let master = seed_override.unwrap_or(cfg.seed);
    let (dataset, failure) = generate_dataset(&cfg, count, master).map_err(config_err)?;
    let shards = write_dataset(out, &dataset)?;
    println!("{} records in {} shard(s) under {}", dataset.records.len(), shards.len(), out.display());
    if let Some(e) = failure {
        eprintln!("error: generation stopped after {} of {count} records: {e}", dataset.records.len());
        return Ok(ExitCode::from(EXIT_FAILURE));
    }
    Ok(ExitCode::SUCCESS)
}

#[derive(Serialize)]
struct LossRow {
    epoch: usize,
    total: f64,
    recon: f64,
    kl: f64,
    capacity: f64,
}

fn cmd_train(dir: &Path, settings: TrainSettings, hidden: usize, latent: usize, out: &Path) -> anyhow::Result<ExitCode> {
    if settings.epochs == 0 || !(settings.lr > 0.0) || settings.batch_size == 0 || hidden == 0 || latent == 0 {
        return Err(config_err(anyhow!("epochs, lr, batch size, hidden and latent sizes must be positive")));
    }
    let dataset = read_dataset(dir).with_context(|| format!("reading dataset {}", dir.display())).map_err(config_err)?;
    if dataset.records.is_empty() {
        return Err(config_err(anyhow!("dataset {} has no records", dir.display())));
    }
    if !dataset.complete {
        eprintln!("warning: dataset footer reports an incomplete generation run");
    }
    let h = &dataset.header;
    let layout = ModelLayout {
        users: h.users,
        layers: h.geometry.layers,
        atoms: h.geometry.atoms_per_layer,
        hidden,
        latent,
    };
    let model = CvaeModel::new(layout, h.geometry.clone(), h.wavelength, seed::derive(settings.seed, &[1]));
    let outcome = train_cvae(&dataset.training_samples()?, model, &settings)?;

    if let Some(parent) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent)?;
    }
    outcome.model.save(out)?;
    let loss_path = PathBuf::from(format!("{}.loss.csv", out.display()));
    let mut w = csv::Writer::from_path(&loss_path)?;
    for (i, t) in outcome.curve.iter().enumerate() {
        w.serialize(LossRow { epoch: i + 1, total: t.total, recon: t.recon, kl: t.kl, capacity: t.capacity })?;
    }
    w.flush()?;

    if let Some(epoch) = outcome.diverged_at {
        eprintln!("error: training diverged at epoch {epoch}; best checkpoint so far written to {}", out.display());
        return Ok(ExitCode::from(EXIT_FAILURE));
    }
    if let (Some(first), Some(last)) = (outcome.curve.first(), outcome.curve.last()) {
        println!("loss {:.6} -> {:.6} over {} epochs", first.total, last.total, outcome.curve.len());
    }
    Ok(ExitCode::SUCCESS)
}
