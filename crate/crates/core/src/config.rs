//! Structured-text scenario configuration.
//!
//! The on-disk format is TOML. Powers may be given in watts or dBm and the
//! radio wavelength either directly or through the carrier frequency; both
//! are resolved once here so the rest of the crate works in SI units.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::energy::{EnergyParams, GRAVITY};
use crate::error::{Error, Result};

pub const SPEED_OF_LIGHT: f64 = 2.998e8;
pub const SCHEMA_VERSION: u32 = 1;

pub const REFERENCE_TOML: &str = include_str!("../presets/reference.toml");

pub fn dbm_to_watts(dbm: f64) -> f64 {
    10f64.powf((dbm - 30.0) / 10.0)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioConfig {
    #[serde(default = "default_schema")]
    pub schema_version: u32,
    #[serde(default)]
    pub seed: u64,
    pub num_uavs: usize,
    pub num_users: usize,
    /// Permits `num_uavs >= num_users`.
    #[serde(default)]
    pub allow_more_uavs_than_users: bool,
    pub area_m: [f64; 2],
    pub altitude_m: f64,
    pub d_min_m: f64,
    pub radio: RadioConfig,
    pub sim: SimConfig,
    #[serde(default)]
    pub energy: EnergyConfig,
    #[serde(default)]
    pub solver: SolverConfig,
}

fn default_schema() -> u32 {
    SCHEMA_VERSION
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RadioConfig {
    pub wavelength_m: Option<f64>,
    pub carrier_hz: Option<f64>,
    /// Channel power at 1 m; defaults to `(λ / 4π)²`.
    pub reference_gain: Option<f64>,
    pub transmit_power_w: Option<f64>,
    pub transmit_power_dbm: Option<f64>,
    pub noise_power_w: Option<f64>,
    pub noise_power_dbm: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimConfig {
    pub layers: usize,
    pub atoms_per_layer: usize,
    pub thickness_m: Option<f64>,
    pub thickness_wavelengths: Option<f64>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EnergyConfig {
    pub uav_weight_n: Option<f64>,
    pub uav_mass_kg: Option<f64>,
    pub sim_mass_kg: Option<f64>,
    pub blade_profile_power_w: Option<f64>,
    /// Overrides the value implied by the induced-power constant.
    pub induced_hover_power_w: Option<f64>,
    pub induced_power_constant: Option<f64>,
    pub tip_speed_mps: Option<f64>,
    pub induced_velocity_mps: Option<f64>,
    pub fuselage_drag_ratio: Option<f64>,
    pub air_density: Option<f64>,
    pub rotor_solidity: Option<f64>,
    pub rotor_disc_area_m2: Option<f64>,
    pub battery_energy_j: Option<f64>,
    pub extra_power_w: Option<f64>,
    pub operation_time_s: Option<f64>,
    pub cruise_speed_mps: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SolverConfig {
    pub epsilon: f64,
    pub max_outer_iterations: usize,
    pub kappa_max: usize,
    pub sca_max_rounds: usize,
    pub sca_tolerance: f64,
    pub inner_max_iterations: usize,
    /// Predicted LBL-IPSO operation count above which a trained generator is preferred.
    pub hgpso_budget_ops: f64,
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self {
            epsilon: 1e-6,
            max_outer_iterations: 50,
            kappa_max: 200,
            sca_max_rounds: 30,
            sca_tolerance: 1e-6,
            inner_max_iterations: 500,
            hgpso_budget_ops: 1e8,
        }
    }
}

impl ScenarioConfig {
    pub fn reference_defaults() -> Self {
        toml::from_str(REFERENCE_TOML).expect("shipped preset parses")
    }

    pub fn from_toml_str(s: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(s)?;
        cfg.check()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let text = std::fs::read_to_string(path.as_ref())?;
        Self::from_toml_str(&text)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    pub fn wavelength(&self) -> Result<f64> {
        match (self.radio.wavelength_m, self.radio.carrier_hz) {
            (Some(l), None) => Ok(l),
            (None, Some(f)) => Ok(SPEED_OF_LIGHT / f),
            (Some(_), Some(_)) => Err(Error::Config(
                "radio: give either wavelength_m or carrier_hz, not both".into(),
            )),
            (None, None) => Err(Error::Config("radio: wavelength_m or carrier_hz is required".into())),
        }
    }

    pub fn reference_gain(&self) -> Result<f64> {
        let lambda = self.wavelength()?;
        Ok(self
            .radio
            .reference_gain
            .unwrap_or_else(|| (lambda / (4.0 * std::f64::consts::PI)).powi(2)))
    }

    pub fn transmit_power(&self) -> Result<f64> {
        watts("transmit_power", self.radio.transmit_power_w, self.radio.transmit_power_dbm)
    }

    pub fn noise_power(&self) -> Result<f64> {
        watts("noise_power", self.radio.noise_power_w, self.radio.noise_power_dbm)
    }

    pub fn thickness(&self) -> Result<f64> {
        let lambda = self.wavelength()?;
        match (self.sim.thickness_m, self.sim.thickness_wavelengths) {
            (Some(t), None) => Ok(t),
            (None, Some(w)) => Ok(w * lambda),
            (Some(_), Some(_)) => Err(Error::Config(
                "sim: give either thickness_m or thickness_wavelengths, not both".into(),
            )),
            (None, None) => Err(Error::Config("sim: thickness is required".into())),
        }
    }

    pub fn energy_params(&self) -> Result<EnergyParams> {
        let e = &self.energy;
        let mut p = EnergyParams::table_preset();
        if let Some(w) = e.uav_weight_n {
            p.uav_mass = w / GRAVITY;
        }
        let set = |dst: &mut f64, v: Option<f64>| {
            if let Some(v) = v {
                *dst = v;
            }
        };
        set(&mut p.uav_mass, e.uav_mass_kg);
        set(&mut p.sim_mass, e.sim_mass_kg);
        set(&mut p.blade_profile_power, e.blade_profile_power_w);
        set(&mut p.induced_power_constant, e.induced_power_constant);
        set(&mut p.tip_speed, e.tip_speed_mps);
        set(&mut p.induced_velocity, e.induced_velocity_mps);
        set(&mut p.fuselage_drag_ratio, e.fuselage_drag_ratio);
        set(&mut p.air_density, e.air_density);
        set(&mut p.rotor_solidity, e.rotor_solidity);
        set(&mut p.rotor_disc_area, e.rotor_disc_area_m2);
        set(&mut p.battery_energy, e.battery_energy_j);
        set(&mut p.extra_power, e.extra_power_w);
        set(&mut p.operation_time, e.operation_time_s);
        set(&mut p.cruise_speed, e.cruise_speed_mps);
        match e.induced_hover_power_w {
            Some(v) => p.induced_hover_power = v,
            None => p.refresh_induced_power(),
        }
        p.validate().map_err(Error::Config)?;
        Ok(p)
    }

    /// Validates every field that can be checked without sampling.
    pub fn check(&self) -> Result<()> {
        if self.schema_version != SCHEMA_VERSION {
            return Err(Error::Config(format!(
                "unsupported schema_version {} (expected {SCHEMA_VERSION})",
                self.schema_version
            )));
        }
        if self.num_uavs == 0 || self.num_users == 0 {
            return Err(Error::Config("num_uavs and num_users must be at least 1".into()));
        }
        if self.num_uavs >= self.num_users && !self.allow_more_uavs_than_users {
            return Err(Error::Config(format!(
                "num_uavs ({}) must be below num_users ({}) unless allow_more_uavs_than_users is set",
                self.num_uavs, self.num_users
            )));
        }
        positive("area_m[0]", self.area_m[0])?;
        positive("area_m[1]", self.area_m[1])?;
        positive("altitude_m", self.altitude_m)?;
        positive("d_min_m", self.d_min_m)?;
        positive("wavelength", self.wavelength()?)?;
        positive("reference_gain", self.reference_gain()?)?;
        positive("transmit_power", self.transmit_power()?)?;
        positive("noise_power", self.noise_power()?)?;
        positive("thickness", self.thickness()?)?;
        if self.sim.layers == 0 {
            return Err(Error::Config("sim.layers must be at least 1".into()));
        }
        let n = self.sim.atoms_per_layer;
        let side = (n as f64).sqrt().round() as usize;
        if n == 0 || side * side != n {
            return Err(Error::Config(format!("sim.atoms_per_layer must be a perfect square, got {n}")));
        }
        self.energy_params()?;
        let s = &self.solver;
        positive("solver.epsilon", s.epsilon)?;
        positive("solver.sca_tolerance", s.sca_tolerance)?;
        if s.max_outer_iterations == 0 || s.kappa_max == 0 || s.sca_max_rounds == 0 || s.inner_max_iterations == 0 {
            return Err(Error::Config("solver iteration limits must be at least 1".into()));
        }
        Ok(())
    }
}

fn positive(name: &str, v: f64) -> Result<()> {
    if v.is_finite() && v > 0.0 {
        Ok(())
    } else {
        Err(Error::Config(format!("{name} must be positive, got {v}")))
    }
}

fn watts(name: &str, w: Option<f64>, dbm: Option<f64>) -> Result<f64> {
    match (w, dbm) {
        (Some(w), None) => Ok(w),
        (None, Some(d)) => Ok(dbm_to_watts(d)),
        (Some(_), Some(_)) => Err(Error::Config(format!("radio: give {name} in W or dBm, not both"))),
        (None, None) => Err(Error::Config(format!("radio: {name} is required"))),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn preset_resolves() {
        let c = ScenarioConfig::reference_defaults();
        c.check().unwrap();
        assert_relative_eq!(c.noise_power().unwrap(), 1e-14, max_relative = 1e-12);
        assert_eq!(c.transmit_power().unwrap(), 0.5);
        assert_relative_eq!(c.reference_gain().unwrap(), 7.25e-7, max_relative = 2e-3);
        assert_relative_eq!(c.thickness().unwrap(), 5.0 * 0.0107, max_relative = 1e-12);
    }

    #[test]
    fn carrier_frequency_converts() {
        let mut c = ScenarioConfig::reference_defaults();
        c.radio.wavelength_m = None;
        c.radio.carrier_hz = Some(28e9);
        assert_relative_eq!(c.wavelength().unwrap(), 2.998e8 / 28e9, max_relative = 1e-15);
        c.radio.wavelength_m = Some(0.01);
        assert!(c.check().is_err());
    }

    #[test]
    fn dbm_conversion() {
        assert_relative_eq!(dbm_to_watts(30.0), 1.0, max_relative = 1e-15);
        assert_relative_eq!(dbm_to_watts(26.9897), 0.5, max_relative = 1e-4);
    }

    #[test]
    fn rejects_bad_values() {
        let mut c = ScenarioConfig::reference_defaults();
        c.sim.atoms_per_layer = 30;
        assert!(c.check().is_err());
        let mut c = ScenarioConfig::reference_defaults();
        c.num_uavs = 5;
        assert!(c.check().is_err());
        c.allow_more_uavs_than_users = true;
        assert!(c.check().is_ok());
        let mut c = ScenarioConfig::reference_defaults();
        c.altitude_m = 0.0;
        assert!(c.check().is_err());
    }

    #[test]
    fn toml_roundtrip() {
        let c = ScenarioConfig::reference_defaults();
        let back = ScenarioConfig::from_toml_str(&c.to_toml_string()).unwrap();
        assert_eq!(c, back);
    }
}
