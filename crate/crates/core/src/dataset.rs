//! Training data for the phase generator.
//!
//! A dataset is a directory of JSON-lines shards `shard-00000.jsonl`, … of
//! at most [`SHARD_SIZE`] records each. Every shard starts with a header
//! line and ends with a footer line carrying the record count and whether
//! generation finished. Records store the full sample context, so stored
//! phases can be re-evaluated without regenerating the scenario.

use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::association::{binarize, rate_table, solve_m_auuop};
use crate::ao::served_channels;
use crate::channel::{build_transfers, build_transfers_for, sample_channels, CVector, PhaseTensor, SimGeometry, TransferSet, C64};
use crate::config::ScenarioConfig;
use crate::error::{Error, Result};
use crate::phase::cvae::{decoded_capacity, encode_phases, SampleContext, TrainingSample};
use crate::phase::lbl_ipso;
use crate::scenario::{generate_scenario, Vec3};
use crate::seed;

pub const DATASET_SCHEMA: u32 = 1;
pub const SHARD_SIZE: usize = 10_000;
const TAG_DATASET: u64 = 0x4441_5441;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetHeader {
    pub schema_version: u32,
    pub uavs: usize,
    pub users: usize,
    pub geometry: SimGeometry,
    pub wavelength: f64,
    pub kappa_max: usize,
    pub master_seed: u64,
    pub shard: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetFooter {
    pub count: usize,
    pub complete: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetRecord {
    pub id: usize,
    pub seed: u64,
    pub area: [f64; 2],
    pub uav_positions: Vec<[f64; 3]>,
    pub user_positions: Vec<[f64; 3]>,
    pub served: Vec<Option<usize>>,
    pub received_scale: Vec<Vec<f64>>,
    pub path_gains: Vec<Vec<f64>>,
    pub noise: Vec<f64>,
    /// `[m][k]` whitened channels as interleaved (re, im).
    pub whitened: Vec<Vec<Vec<f64>>>,
    pub condition: Vec<f64>,
    /// Flat `[m][l][n]` phases in radians.
    pub phases: Vec<f64>,
    pub capacity: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
enum Line {
    Header(DatasetHeader),
    Record(Box<DatasetRecord>),
    Footer(DatasetFooter),
}

fn point(v: &Vec3) -> [f64; 3] {
    [v.x, v.y, v.z]
}

impl DatasetRecord {
    pub fn from_parts(id: usize, seed: u64, ctx: &SampleContext, phases: &PhaseTensor, capacity: f64) -> Self {
        Self {
            id,
            seed,
            area: ctx.area,
            uav_positions: ctx.uav_positions.iter().map(point).collect(),
            user_positions: ctx.user_positions.iter().map(point).collect(),
            served: ctx.served.clone(),
            received_scale: ctx.received_scale.clone(),
            path_gains: ctx.path_gains.clone(),
            noise: ctx.noise.clone(),
            whitened: ctx
                .whitened
                .iter()
                .map(|row| row.iter().map(|h| h.iter().flat_map(|z| [z.re, z.im]).collect()).collect())
                .collect(),
            condition: ctx.features(),
            phases: phases.as_flat().to_vec(),
            capacity,
        }
    }

    pub fn context(&self) -> SampleContext {
        let v = |p: &[f64; 3]| Vec3::new(p[0], p[1], p[2]);
        SampleContext {
            area: self.area,
            uav_positions: self.uav_positions.iter().map(v).collect(),
            user_positions: self.user_positions.iter().map(v).collect(),
            served: self.served.clone(),
            received_scale: self.received_scale.clone(),
            path_gains: self.path_gains.clone(),
            noise: self.noise.clone(),
            whitened: self
                .whitened
                .iter()
                .map(|row| {
                    row.iter()
                        .map(|h| CVector::from_iterator(h.len() / 2, h.chunks_exact(2).map(|p| C64::new(p[0], p[1]))))
                        .collect()
                })
                .collect(),
        }
    }

    pub fn phase_tensor(&self, header: &DatasetHeader) -> PhaseTensor {
        PhaseTensor::from_flat(header.uavs, header.geometry.layers, header.geometry.atoms_per_layer, &self.phases)
    }

    /// Capacity of the stored phases under the stored context.
    pub fn replay(&self, header: &DatasetHeader, transfers: &TransferSet) -> f64 {
        decoded_capacity(&self.context(), transfers, &encode_phases(&self.phase_tensor(header)), false).0
    }

    /// One sample per served UAV. `single` is the one-UAV transfer set.
    pub fn to_training_samples(&self, header: &DatasetHeader, single: &TransferSet) -> Vec<TrainingSample> {
        TrainingSample::per_uav(&self.context(), &self.phase_tensor(header), single)
    }
}

#[derive(Debug, Clone)]
pub struct Dataset {
    pub header: DatasetHeader,
    pub records: Vec<DatasetRecord>,
    /// False when any shard footer reports an interrupted run.
    pub complete: bool,
}

impl Dataset {
    pub fn transfers(&self) -> Result<TransferSet> {
        build_transfers_for(&self.header.geometry, self.header.wavelength, self.header.uavs)
    }

    pub fn training_samples(&self) -> Result<Vec<TrainingSample>> {
        let single = build_transfers_for(&self.header.geometry, self.header.wavelength, 1)?;
        Ok(self.records.iter().flat_map(|r| r.to_training_samples(&self.header, &single)).collect())
    }
}

/// One sample: scenario and channels from `seed`, association by the
/// assignment solver at zero phases, then LBL-IPSO from zero phases.
pub fn generate_record(cfg: &ScenarioConfig, id: usize, seed: u64, kappa_max: usize) -> Result<DatasetRecord> {
    let scenario = generate_scenario(cfg, seed)?;
    let transfers = build_transfers(&scenario)?;
    let channels = sample_channels(&scenario, &mut seed::stream(seed, &[seed::TAG_CHANNEL]));
    let zero = PhaseTensor::zeros(scenario.num_uavs(), scenario.sim.layers, scenario.sim.atoms_per_layer);
    let rates = rate_table(&scenario, &zero, &transfers, &channels);
    let s = binarize(&solve_m_auuop(&rates)?, &rates);
    let (phases, _) = lbl_ipso(&served_channels(&s, &channels), &transfers, &zero, kappa_max);
    let ctx = SampleContext::from_state(&scenario, &s, &channels);
    let capacity = decoded_capacity(&ctx, &transfers, &encode_phases(&phases), false).0;
    Ok(DatasetRecord::from_parts(id, seed, &ctx, &phases, capacity))
}

pub fn record_seed(master: u64, id: usize) -> u64 {
    seed::derive(master, &[TAG_DATASET, id as u64])
}

pub fn header_for(cfg: &ScenarioConfig, master_seed: u64) -> Result<DatasetHeader> {
    let wavelength = cfg.wavelength()?;
    Ok(DatasetHeader {
        schema_version: DATASET_SCHEMA,
        uavs: cfg.num_uavs,
        users: cfg.num_users,
        geometry: SimGeometry::new(cfg.sim.layers, cfg.sim.atoms_per_layer, cfg.thickness()?, wavelength)?,
        wavelength,
        kappa_max: cfg.solver.kappa_max,
        master_seed,
        shard: 0,
    })
}

/// Generates `count` records in parallel; order is by id regardless of the
/// worker count. Generation stops at the first failing id.
pub fn generate_dataset(cfg: &ScenarioConfig, count: usize, master_seed: u64) -> Result<(Dataset, Option<Error>)> {
    cfg.check()?;
    let header = header_for(cfg, master_seed)?;
    let results: Vec<Result<DatasetRecord>> = (0..count)
        .into_par_iter()
        .map(|id| generate_record(cfg, id, record_seed(master_seed, id), cfg.solver.kappa_max))
        .collect();
    let mut records = Vec::with_capacity(count);
    let mut failure = None;
    for r in results {
        match r {
            Ok(rec) => records.push(rec),
            Err(e) => {
                failure = Some(e);
                break;
            }
        }
    }
    let complete = failure.is_none();
    Ok((Dataset { header, records, complete }, failure))
}

pub fn shard_path(dir: &Path, shard: usize) -> PathBuf {
    dir.join(format!("shard-{shard:05}.jsonl"))
}

/// Writes `dataset` into `dir`, replacing any shards already there.
pub fn write_dataset(dir: &Path, dataset: &Dataset) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(dir)?;
    for old in list_shards(dir)? {
        fs::remove_file(old)?;
    }
    let chunks: Vec<&[DatasetRecord]> = if dataset.records.is_empty() {
        vec![&[]]
    } else {
        dataset.records.chunks(SHARD_SIZE).collect()
    };
    let mut paths = Vec::with_capacity(chunks.len());
    for (i, chunk) in chunks.iter().enumerate() {
        let path = shard_path(dir, i);
        let mut w = BufWriter::new(fs::File::create(&path)?);
        let header = DatasetHeader { shard: i, ..dataset.header.clone() };
        writeln!(w, "{}", serde_json::to_string(&Line::Header(header))?)?;
        for rec in *chunk {
            writeln!(w, "{}", serde_json::to_string(&Line::Record(Box::new(rec.clone())))?)?;
        }
        let footer = DatasetFooter { count: chunk.len(), complete: dataset.complete };
        writeln!(w, "{}", serde_json::to_string(&Line::Footer(footer))?)?;
        w.flush()?;
        paths.push(path);
    }
    Ok(paths)
}

fn list_shards(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut shards: Vec<PathBuf> = fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.file_name()
                .and_then(|n| n.to_str())
                .is_some_and(|n| n.starts_with("shard-") && n.ends_with(".jsonl"))
        })
        .collect();
    shards.sort();
    Ok(shards)
}

/// Reads every shard in `dir`, checking headers agree and footers match.
pub fn read_dataset(dir: &Path) -> Result<Dataset> {
    let shards = list_shards(dir)?;
    if shards.is_empty() {
        return Err(Error::Dataset(format!("no shards in {}", dir.display())));
    }
    let mut header: Option<DatasetHeader> = None;
    let mut records = Vec::new();
    let mut complete = true;
    for path in shards {
        let bad = |what: &str| Error::Dataset(format!("{}: {what}", path.display()));
        let mut lines = BufReader::new(fs::File::open(&path)?).lines();
        let first = lines.next().ok_or_else(|| bad("empty shard"))??;
        let Line::Header(h) = serde_json::from_str(&first)? else {
            return Err(bad("first line is not a header"));
        };
        if h.schema_version != DATASET_SCHEMA {
            return Err(bad(&format!("unsupported schema {}", h.schema_version)));
        }
        match &header {
            Some(prev) if DatasetHeader { shard: h.shard, ..prev.clone() } != h => {
                return Err(bad("header disagrees with the first shard"));
            }
            None => header = Some(h),
            _ => {}
        }
        let mut in_shard = 0;
        let mut footer = None;
        for line in lines {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            match serde_json::from_str(&line)? {
                Line::Record(r) if footer.is_none() => {
                    records.push(*r);
                    in_shard += 1;
                }
                Line::Footer(f) if footer.is_none() => footer = Some(f),
                _ => return Err(bad("unexpected line after footer or repeated header")),
            }
        }
        let footer = footer.ok_or_else(|| bad("missing footer"))?;
        if footer.count != in_shard {
            return Err(bad(&format!("footer says {} records, found {in_shard}", footer.count)));
        }
        complete &= footer.complete;
    }
    let mut header = header.expect("at least one shard");
    header.shard = 0;
    Ok(Dataset { header, records, complete })
}
