//! Rotary-wing power model and the battery constraint on UAV relocation.
//!
//! Table-preset values describe a 120 N quadrotor-class platform. The
//! induced-power constant is not tabulated; the preset back-solves it from
//! the hover induced power, the platform weight and the rotor disc area so
//! that `induced_power` reproduces the table.
//!
//! The table's profile drag coefficient shares a symbol with the SIM layer
//! spacing; here it is `profile_drag_coefficient` and is unrelated to
//! [`crate::channel::SimGeometry::layer_spacing`].

use serde::{Deserialize, Serialize};

use crate::scenario::Vec3;

pub const GRAVITY: f64 = 9.81;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnergyParams {
    /// Blade profile power in hover, W.
    pub blade_profile_power: f64,
    /// Induced power in hover, W.
    pub induced_hover_power: f64,
    /// Rotor blade tip speed, m/s.
    pub tip_speed: f64,
    /// Mean rotor induced velocity in hover, m/s.
    pub induced_velocity: f64,
    /// Fuselage drag ratio.
    pub fuselage_drag_ratio: f64,
    /// kg/m^3.
    pub air_density: f64,
    pub rotor_solidity: f64,
    /// m^2.
    pub rotor_disc_area: f64,
    pub rotor_radius: f64,
    /// rad/s.
    pub rotor_angular_velocity: f64,
    pub profile_drag_coefficient: f64,
    /// kg.
    pub uav_mass: f64,
    /// kg.
    pub sim_mass: f64,
    /// W kg^-3/2 m.
    pub induced_power_constant: f64,
    /// J.
    pub battery_energy: f64,
    /// W, SIM reconfiguration and radio electronics.
    pub extra_power: f64,
    /// s.
    pub operation_time: f64,
    /// Relocation speed, m/s.
    pub cruise_speed: f64,
}

impl EnergyParams {
    /// Table values plus the artifact defaults for battery, service time
    /// and extra power (500 kJ, 180 s, 20 W).
    pub fn table_preset() -> Self {
        let weight_n = 120.0;
        let uav_mass = weight_n / GRAVITY;
        let area = 0.79;
        let induced = 944.9;
        let kappa = induced / (uav_mass.powi(3) / area).sqrt();
        Self {
            blade_profile_power: 580.7,
            induced_hover_power: induced,
            tip_speed: 200.0,
            induced_velocity: 7.87,
            fuselage_drag_ratio: 0.3,
            air_density: 1.225,
            rotor_solidity: 0.05,
            rotor_disc_area: area,
            rotor_radius: 0.5,
            rotor_angular_velocity: 400.0,
            profile_drag_coefficient: 0.012,
            uav_mass,
            sim_mass: 0.0,
            induced_power_constant: kappa,
            battery_energy: 500e3,
            extra_power: 20.0,
            operation_time: 180.0,
            cruise_speed: 10.0,
        }
    }

    pub fn total_mass(&self) -> f64 {
        self.uav_mass + self.sim_mass
    }

    /// Recomputes the hover induced power for the current total mass.
    pub fn refresh_induced_power(&mut self) {
        self.induced_hover_power =
            induced_power(self.total_mass(), self.rotor_disc_area, self.induced_power_constant);
    }

    /// Profile power implied by the rotor geometry, `δ/8 ρ s A Ω³ R³`.
    pub fn profile_power_from_rotor(&self) -> f64 {
        self.profile_drag_coefficient / 8.0
            * self.air_density
            * self.rotor_solidity
            * self.rotor_disc_area
            * (self.rotor_angular_velocity * self.rotor_radius).powi(3)
    }

    pub fn validate(&self) -> Result<(), String> {
        let fields = [
            ("blade_profile_power", self.blade_profile_power),
            ("induced_hover_power", self.induced_hover_power),
            ("tip_speed", self.tip_speed),
            ("induced_velocity", self.induced_velocity),
            ("fuselage_drag_ratio", self.fuselage_drag_ratio),
            ("air_density", self.air_density),
            ("rotor_solidity", self.rotor_solidity),
            ("rotor_disc_area", self.rotor_disc_area),
            ("uav_mass", self.uav_mass),
            ("induced_power_constant", self.induced_power_constant),
            ("battery_energy", self.battery_energy),
            ("extra_power", self.extra_power),
            ("operation_time", self.operation_time),
            ("cruise_speed", self.cruise_speed),
        ];
        for (name, v) in fields {
            if !(v.is_finite() && v > 0.0) {
                return Err(format!("energy.{name} must be positive, got {v}"));
            }
        }
        if !(self.sim_mass.is_finite() && self.sim_mass >= 0.0) {
            return Err(format!("energy.sim_mass must be non-negative, got {}", self.sim_mass));
        }
        let implied =
            induced_power(self.total_mass(), self.rotor_disc_area, self.induced_power_constant);
        if (implied - self.induced_hover_power).abs() > 0.05 * self.induced_hover_power {
            return Err(format!(
                "induced power constant implies {implied:.1} W but induced_hover_power is {:.1} W",
                self.induced_hover_power
            ));
        }
        Ok(())
    }
}

impl Default for EnergyParams {
    fn default() -> Self {
        Self::table_preset()
    }
}

/// Propulsion power at forward speed `v`.
pub fn propulsion_power(v: f64, p: &EnergyParams) -> f64 {
    let v2 = v * v;
    let v0_2 = p.induced_velocity * p.induced_velocity;
    let profile = p.blade_profile_power * (1.0 + 3.0 * v2 / (p.tip_speed * p.tip_speed));
    let induced = p.induced_hover_power
        * ((1.0 + v2 * v2 / (4.0 * v0_2 * v0_2)).sqrt() - v2 / (2.0 * v0_2)).sqrt();
    let parasite =
        0.5 * p.fuselage_drag_ratio * p.air_density * p.rotor_solidity * p.rotor_disc_area * v2 * v;
    profile + induced + parasite
}

pub fn hover_power(p: &EnergyParams) -> f64 {
    p.blade_profile_power + p.induced_hover_power
}

/// `κ √(m³ / A)`.
pub fn induced_power(total_mass: f64, disc_area: f64, kappa: f64) -> f64 {
    kappa * (total_mass.powi(3) / disc_area).sqrt()
}

/// Energy left for relocation after hovering for the whole service time.
pub fn residual_budget(p: &EnergyParams) -> f64 {
    p.battery_energy - (hover_power(p) + p.extra_power) * p.operation_time
}

fn travel_energy(distance: f64, p: &EnergyParams) -> f64 {
    propulsion_power(p.cruise_speed, p) * distance / p.cruise_speed
}

pub fn energy_feasible(w: &Vec3, w0: &Vec3, p: &EnergyParams) -> bool {
    (hover_power(p) + p.extra_power) * p.operation_time + travel_energy((w - w0).norm(), p)
        <= p.battery_energy
}

/// Radius of the disk around the initial position that the battery allows.
pub fn max_travel_radius(p: &EnergyParams) -> f64 {
    let budget = residual_budget(p);
    if budget <= 0.0 {
        return 0.0;
    }
    budget * p.cruise_speed / propulsion_power(p.cruise_speed, p)
}
