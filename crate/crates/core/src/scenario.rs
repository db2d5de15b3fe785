//! Deployment geometry, the association matrix, and the feasibility
//! predicates for UAV separation and one-to-one association.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::channel::SimGeometry;
use crate::config::ScenarioConfig;
use crate::energy::EnergyParams;
use crate::error::{Error, Result};
use crate::seed;

pub type Vec3 = nalgebra::Vector3<f64>;

const REPAIR_STEPS: usize = 1000;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UserSite {
    /// Ground position, z = 0.
    pub position: Vec3,
    /// W.
    pub transmit_power: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UavState {
    pub position: Vec3,
    /// Take-off point used by the battery constraint.
    pub initial_position: Vec3,
    /// W.
    pub noise_power: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RadioParams {
    /// m.
    pub wavelength: f64,
    /// Channel power gain at 1 m.
    pub reference_gain: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scenario {
    pub users: Vec<UserSite>,
    pub uavs: Vec<UavState>,
    pub sim: SimGeometry,
    pub radio: RadioParams,
    pub energy: EnergyParams,
    /// Horizontal extents (x, y) in m.
    pub area: [f64; 2],
    /// Flight altitude H in m.
    pub altitude: f64,
    pub d_min: f64,
    pub seed: u64,
}

impl Scenario {
    pub fn num_uavs(&self) -> usize {
        self.uavs.len()
    }

    pub fn num_users(&self) -> usize {
        self.users.len()
    }

    pub fn uav_positions(&self) -> Vec<Vec3> {
        self.uavs.iter().map(|u| u.position).collect()
    }

    pub fn initial_positions(&self) -> Vec<Vec3> {
        self.uavs.iter().map(|u| u.initial_position).collect()
    }

    pub fn user_positions(&self) -> Vec<Vec3> {
        self.users.iter().map(|u| u.position).collect()
    }

    pub fn transmit_powers(&self) -> Vec<f64> {
        self.users.iter().map(|u| u.transmit_power).collect()
    }

    pub fn noise_powers(&self) -> Vec<f64> {
        self.uavs.iter().map(|u| u.noise_power).collect()
    }

    /// Moves the UAVs; altitude is pinned to H.
    pub fn set_positions(&mut self, positions: &[Vec3]) {
        for (u, p) in self.uavs.iter_mut().zip(positions) {
            u.position = Vec3::new(p.x, p.y, self.altitude);
        }
    }

    pub fn check(&self, allow_more_uavs_than_users: bool) -> Result<()> {
        let (m, k) = (self.num_uavs(), self.num_users());
        if m == 0 || k == 0 {
            return Err(Error::Config("scenario needs at least one UAV and one user".into()));
        }
        if m >= k && !allow_more_uavs_than_users {
            return Err(Error::Config(format!("expected fewer UAVs ({m}) than users ({k})")));
        }
        if !(self.altitude > 0.0 && self.d_min > 0.0 && self.area[0] > 0.0 && self.area[1] > 0.0) {
            return Err(Error::Config("altitude, d_min and area extents must be positive".into()));
        }
        for u in &self.users {
            if u.position.z != 0.0 || !(u.transmit_power > 0.0) {
                return Err(Error::Config("users must sit at z = 0 with positive power".into()));
            }
        }
        for u in &self.uavs {
            if u.position.z != self.altitude || !(u.noise_power > 0.0) {
                return Err(Error::Config("UAVs must fly at altitude H with positive noise power".into()));
            }
        }
        Ok(())
    }
}

/// Samples a scenario from `config`; `seed` overrides `config.seed`.
///
/// Users and UAVs draw from separate streams and are sampled in index
/// order, so scenarios that differ only in `num_users` share their first
/// users and their UAV placement.
pub fn generate_scenario(config: &ScenarioConfig, seed: u64) -> Result<Scenario> {
    config.check()?;
    let lambda = config.wavelength()?;
    let sim = SimGeometry::new(
        config.sim.layers,
        config.sim.atoms_per_layer,
        config.thickness()?,
        lambda,
    )?;
    let radio = RadioParams { wavelength: lambda, reference_gain: config.reference_gain()? };
    let energy = config.energy_params()?;
    let (p_tx, noise) = (config.transmit_power()?, config.noise_power()?);
    let [ax, ay] = config.area_m;
    let h = config.altitude_m;

    let mut user_rng = seed::stream(seed, &[seed::TAG_USERS]);
    let users = (0..config.num_users)
        .map(|_| UserSite {
            position: Vec3::new(user_rng.random::<f64>() * ax, user_rng.random::<f64>() * ay, 0.0),
            transmit_power: p_tx,
        })
        .collect();

    let mut uav_rng = seed::stream(seed, &[seed::TAG_UAVS]);
    let mut positions: Vec<Vec3> = (0..config.num_uavs)
        .map(|_| Vec3::new(uav_rng.random::<f64>() * ax, uav_rng.random::<f64>() * ay, h))
        .collect();
    repair_separation(&mut positions, config.area_m, config.d_min_m, seed)?;

    let uavs = positions
        .into_iter()
        .map(|p| UavState { position: p, initial_position: p, noise_power: noise })
        .collect();

    Ok(Scenario {
        users,
        uavs,
        sim,
        radio,
        energy,
        area: config.area_m,
        altitude: h,
        d_min: config.d_min_m,
        seed,
    })
}

/// Pushes too-close UAV pairs apart until every pair is `d_min` apart,
/// keeping everyone inside the area.
pub fn repair_separation(positions: &mut [Vec3], area: [f64; 2], d_min: f64, seed: u64) -> Result<()> {
    let m = positions.len();
    if m < 2 {
        return Ok(());
    }
    if area[0].hypot(area[1]) < d_min {
        return Err(Error::InfeasibleGeometry(format!(
            "area {}x{} m cannot separate {m} UAVs by {d_min} m",
            area[0], area[1]
        )));
    }
    let mut rng = seed::stream(seed, &[seed::TAG_REPAIR]);
    let clamp = |p: &mut Vec3| {
        p.x = p.x.clamp(0.0, area[0]);
        p.y = p.y.clamp(0.0, area[1]);
    };
    for _ in 0..REPAIR_STEPS {
        if safety_ok(positions, d_min) {
            return Ok(());
        }
        for i in 0..m {
            for j in (i + 1)..m {
                let dx = positions[j].x - positions[i].x;
                let dy = positions[j].y - positions[i].y;
                let dist = dx.hypot(dy);
                if dist >= d_min {
                    continue;
                }
                let (ux, uy) = if dist > 1e-9 {
                    (dx / dist, dy / dist)
                } else {
                    let a = rng.random::<f64>() * std::f64::consts::TAU;
                    (a.cos(), a.sin())
                };
                let push = 0.5 * (d_min - dist) + 1e-6;
                positions[i].x -= ux * push;
                positions[i].y -= uy * push;
                positions[j].x += ux * push;
                positions[j].y += uy * push;
                clamp(&mut positions[i]);
                clamp(&mut positions[j]);
            }
        }
    }
    if safety_ok(positions, d_min) {
        Ok(())
    } else {
        Err(Error::InfeasibleGeometry(format!(
            "could not separate {m} UAVs by {d_min} m inside {}x{} m after {REPAIR_STEPS} steps",
            area[0], area[1]
        )))
    }
}

/// Pairwise separation `‖w_i − w_j‖ ≥ d_min`.
pub fn safety_ok(positions: &[Vec3], d_min: f64) -> bool {
    positions.iter().enumerate().all(|(i, a)| {
        positions[i + 1..].iter().all(|b| (a - b).norm() >= d_min)
    })
}

pub fn user_distance(w: &Vec3, u: &Vec3) -> f64 {
    (w - u).norm()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AssociationMode {
    Continuous,
    Binary,
}

/// `S` in `[0,1]^{M×K}`, row-major.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AssociationMatrix {
    pub uavs: usize,
    pub users: usize,
    pub entries: Vec<f64>,
    pub mode: AssociationMode,
}

const ASSOC_TOL: f64 = 1e-9;

impl AssociationMatrix {
    pub fn zeros(uavs: usize, users: usize, mode: AssociationMode) -> Self {
        Self { uavs, users, entries: vec![0.0; uavs * users], mode }
    }

    /// Binary matrix from a per-UAV served user.
    pub fn from_served(users: usize, served: &[Option<usize>]) -> Self {
        let mut s = Self::zeros(served.len(), users, AssociationMode::Binary);
        for (m, k) in served.iter().enumerate() {
            if let Some(k) = k {
                s.set(m, *k, 1.0);
            }
        }
        s
    }

    pub fn get(&self, m: usize, k: usize) -> f64 {
        self.entries[m * self.users + k]
    }

    pub fn set(&mut self, m: usize, k: usize, v: f64) {
        self.entries[m * self.users + k] = v;
    }

    pub fn row(&self, m: usize) -> &[f64] {
        &self.entries[m * self.users..(m + 1) * self.users]
    }

    /// Served user of UAV `m` (first entry equal to one).
    pub fn served_user(&self, m: usize) -> Option<usize> {
        self.row(m).iter().position(|&v| v >= 0.5)
    }

    pub fn served(&self) -> Vec<Option<usize>> {
        (0..self.uavs).map(|m| self.served_user(m)).collect()
    }

    /// `Σ S_{m,k} r_{m,k}`.
    pub fn objective(&self, rates: &[Vec<f64>]) -> f64 {
        let mut total = 0.0;
        for m in 0..self.uavs {
            for k in 0..self.users {
                total += self.get(m, k) * rates[m][k];
            }
        }
        total
    }
}

/// Row sums, column sums and entry range; binary mode also requires {0,1}.
pub fn validate_association(s: &AssociationMatrix) -> bool {
    if s.entries.len() != s.uavs * s.users {
        return false;
    }
    let in_range = s.entries.iter().all(|&v| (-ASSOC_TOL..=1.0 + ASSOC_TOL).contains(&v));
    let binary = s.mode == AssociationMode::Continuous || s.entries.iter().all(|&v| v == 0.0 || v == 1.0);
    let rows = (0..s.uavs).all(|m| s.row(m).iter().sum::<f64>() <= 1.0 + ASSOC_TOL);
    let cols = (0..s.users).all(|k| (0..s.uavs).map(|m| s.get(m, k)).sum::<f64>() <= 1.0 + ASSOC_TOL);
    in_range && binary && rows && cols
}
