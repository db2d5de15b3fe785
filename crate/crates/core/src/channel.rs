//! Wave-domain channel of a stacked intelligent metasurface.
//!
//! Layers are indexed 1..=L in the math and `0..L` in storage. The user
//! channel enters the stack at layer L and layer 1 radiates to the UAV's
//! receive antenna, so the received amplitude for user k at UAV m is
//! `w¹ᴴ Gᴴ h = (G w¹)ᴴ h` with `G = Φᴸ Wᴸ ⋯ Φ² W² Φ¹`.
//!
//! Geometry conventions that the model leaves open:
//! * the obliquity factor for parallel planar layers is `cos ψ = δ / d`;
//! * the receive antenna sits on the stack axis one layer spacing behind
//!   the output layer and couples through the same diffraction kernel;
//! * the atom pitch is λ/2, matching the (λ/2)² atom area.

use std::f64::consts::{PI, TAU};

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::{Rng, RngCore};
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scenario::{AssociationMatrix, RadioParams, Scenario, Vec3};
use crate::seed;

pub type C64 = nalgebra::Complex<f64>;
pub type CVector = DVector<C64>;
pub type CMatrix = DMatrix<C64>;

/// Distances below this are clamped in path-loss evaluation (reference distance of ρ₀).
pub const MIN_LINK_DISTANCE: f64 = 1.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SimGeometry {
    pub layers: usize,
    pub atoms_per_layer: usize,
    /// Stack thickness T_SIM, m.
    pub thickness: f64,
    /// Centre-to-centre spacing of adjacent atoms, m.
    pub atom_pitch: f64,
    /// d_x d_y, m².
    pub atom_area: f64,
}

impl SimGeometry {
    /// Half-wavelength lattice with (λ/2)² atoms.
    pub fn new(layers: usize, atoms_per_layer: usize, thickness: f64, wavelength: f64) -> Result<Self> {
        let side = (atoms_per_layer as f64).sqrt().round() as usize;
        if layers == 0 || side == 0 || side * side != atoms_per_layer {
            return Err(Error::Config(format!(
                "need L >= 1 and a square atom count, got L={layers}, N={atoms_per_layer}"
            )));
        }
        if !(thickness > 0.0 && wavelength > 0.0) {
            return Err(Error::Config("SIM thickness and wavelength must be positive".into()));
        }
        let pitch = wavelength / 2.0;
        Ok(Self { layers, atoms_per_layer, thickness, atom_pitch: pitch, atom_area: pitch * pitch })
    }

    pub fn n_max(&self) -> usize {
        (self.atoms_per_layer as f64).sqrt().round() as usize
    }

    /// δ = T_SIM / L.
    pub fn layer_spacing(&self) -> f64 {
        self.thickness / self.layers as f64
    }

    /// In-plane coordinates of 1-based atom `n`, origin at atom 1.
    fn atom_xy(&self, n: usize) -> (f64, f64) {
        let (nx, ny) = atom_index(n, self.n_max());
        ((nx - 1) as f64 * self.atom_pitch, (ny - 1) as f64 * self.atom_pitch)
    }
}

/// Lattice indices `(n_x, n_y)` of 1-based atom `n`.
pub fn atom_index(n: usize, n_max: usize) -> (usize, usize) {
    debug_assert!(n >= 1 && n <= n_max * n_max);
    ((n - 1) % n_max + 1, n.div_ceil(n_max))
}

/// Same-layer distance between atoms `n` and `n2` (1-based).
pub fn intra_layer_spacing(n: usize, n2: usize, geom: &SimGeometry) -> f64 {
    let nm = geom.n_max();
    let (ax, ay) = atom_index(n, nm);
    let (bx, by) = atom_index(n2, nm);
    let dx = ax as f64 - bx as f64;
    let dy = ay as f64 - by as f64;
    geom.atom_pitch * (dx * dx + dy * dy).sqrt()
}

/// Distance between atom `n2` on one layer and atom `n` on the next.
pub fn inter_layer_distance(n: usize, n2: usize, geom: &SimGeometry) -> f64 {
    intra_layer_spacing(n, n2, geom).hypot(geom.layer_spacing())
}

/// Rayleigh–Sommerfeld coupling between two atoms a distance `d` apart.
pub fn diffraction_coefficient(d: f64, cos_psi: f64, atom_area: f64, wavelength: f64) -> Result<C64> {
    if !(d > 0.0) {
        return Err(Error::DegenerateGeometry(format!("propagation distance must be positive, got {d}")));
    }
    let amplitude = atom_area * cos_psi / d;
    let kernel = C64::new(1.0 / (2.0 * PI * d), -1.0 / wavelength);
    Ok(kernel * amplitude * C64::from_polar(1.0, TAU * d / wavelength))
}

/// Wraps an angle into `[0, 2π)`.
pub fn wrap_phase(x: f64) -> f64 {
    let r = x.rem_euclid(TAU);
    if r >= TAU {
        0.0
    } else {
        r
    }
}

/// Phase shifts θ[m][l][n], always stored wrapped into `[0, 2π)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhaseTensor {
    pub uavs: usize,
    pub layers: usize,
    pub atoms: usize,
    data: Vec<f64>,
}

impl PhaseTensor {
    pub fn zeros(uavs: usize, layers: usize, atoms: usize) -> Self {
        Self { uavs, layers, atoms, data: vec![0.0; uavs * layers * atoms] }
    }

    pub fn random<R: Rng + ?Sized>(uavs: usize, layers: usize, atoms: usize, rng: &mut R) -> Self {
        let mut t = Self::zeros(uavs, layers, atoms);
        for v in t.data.iter_mut() {
            *v = wrap_phase(rng.random::<f64>() * TAU);
        }
        t
    }

    /// Builds a tensor from flat `[m][l][n]` data, wrapping every entry.
    pub fn from_flat(uavs: usize, layers: usize, atoms: usize, flat: &[f64]) -> Self {
        assert_eq!(flat.len(), uavs * layers * atoms);
        Self { uavs, layers, atoms, data: flat.iter().map(|&x| wrap_phase(x)).collect() }
    }

    fn offset(&self, m: usize, l: usize) -> usize {
        (m * self.layers + l) * self.atoms
    }

    pub fn get(&self, m: usize, l: usize, n: usize) -> f64 {
        self.data[self.offset(m, l) + n]
    }

    pub fn set(&mut self, m: usize, l: usize, n: usize, theta: f64) {
        let o = self.offset(m, l);
        self.data[o + n] = wrap_phase(theta);
    }

    pub fn layer(&self, m: usize, l: usize) -> &[f64] {
        let o = self.offset(m, l);
        &self.data[o..o + self.atoms]
    }

    pub fn set_layer(&mut self, m: usize, l: usize, thetas: &[f64]) {
        let o = self.offset(m, l);
        for (dst, &t) in self.data[o..o + self.atoms].iter_mut().zip(thetas) {
            *dst = wrap_phase(t);
        }
    }

    pub fn uav(&self, m: usize) -> &[f64] {
        let o = self.offset(m, 0);
        &self.data[o..o + self.layers * self.atoms]
    }

    pub fn set_uav(&mut self, m: usize, thetas: &[f64]) {
        for l in 0..self.layers {
            self.set_layer(m, l, &thetas[l * self.atoms..(l + 1) * self.atoms]);
        }
    }

    pub fn clear_uav(&mut self, m: usize) {
        let o = self.offset(m, 0);
        self.data[o..o + self.layers * self.atoms].fill(0.0);
    }

    pub fn as_flat(&self) -> &[f64] {
        &self.data
    }

    /// `e^{jθ}` for one layer (the diagonal of Φ^l).
    pub fn phasors(&self, m: usize, l: usize) -> Vec<C64> {
        self.layer(m, l).iter().map(|&t| C64::from_polar(1.0, t)).collect()
    }

    pub fn in_range(&self) -> bool {
        self.data.iter().all(|&t| (0.0..TAU).contains(&t))
    }
}

/// Inter-layer matrices `W^l` (l = 2..=L, stored at `l - 2`) and the
/// output-layer-to-antenna vectors `w¹_m`.
#[derive(Debug, Clone, PartialEq)]
pub struct TransferSet {
    pub inter_layer: Vec<CMatrix>,
    pub output: Vec<CVector>,
}

impl TransferSet {
    pub fn layers(&self) -> usize {
        self.inter_layer.len() + 1
    }

    pub fn atoms(&self) -> usize {
        self.output[0].len()
    }

    /// `W^l` for 1-based `l` in `2..=L`.
    pub fn w(&self, l: usize) -> &CMatrix {
        &self.inter_layer[l - 2]
    }
}

pub fn build_transfers(scenario: &Scenario) -> Result<TransferSet> {
    build_transfers_for(&scenario.sim, scenario.radio.wavelength, scenario.num_uavs())
}

pub fn build_transfers_for(geom: &SimGeometry, wavelength: f64, uavs: usize) -> Result<TransferSet> {
    let n = geom.atoms_per_layer;
    let delta = geom.layer_spacing();
    let mut w = CMatrix::zeros(n, n);
    for a in 1..=n {
        for b in 1..=n {
            let d = inter_layer_distance(a, b, geom);
            w[(a - 1, b - 1)] = diffraction_coefficient(d, delta / d, geom.atom_area, wavelength)?;
        }
    }
    let c = (geom.n_max() - 1) as f64 * geom.atom_pitch / 2.0;
    let mut out = CVector::zeros(n);
    for a in 1..=n {
        let (x, y) = geom.atom_xy(a);
        let d = (x - c).hypot(y - c).hypot(delta);
        out[a - 1] = diffraction_coefficient(d, delta / d, geom.atom_area, wavelength)?;
    }
    Ok(TransferSet {
        inter_layer: vec![w; geom.layers - 1],
        output: vec![out; uavs],
    })
}

/// `G_m = Φᴸ Wᴸ ⋯ Φ² W² Φ¹`.
pub fn equivalent_response(m: usize, phases: &PhaseTensor, transfers: &TransferSet) -> CMatrix {
    let n = phases.atoms;
    let mut g = CMatrix::from_diagonal(&CVector::from_vec(phases.phasors(m, 0)));
    for l in 2..=phases.layers {
        g = transfers.w(l) * g;
        let phi = phases.phasors(m, l - 1);
        for r in 0..n {
            for c in 0..n {
                g[(r, c)] *= phi[r];
            }
        }
    }
    g
}

/// `G_m w¹_m`, so that the received amplitude is `vᴴ h`.
pub fn receive_vector(m: usize, phases: &PhaseTensor, transfers: &TransferSet) -> CVector {
    let mut v = transfers.output[m].clone();
    scale_by_phases(&mut v, phases.layer(m, 0));
    for l in 2..=phases.layers {
        v = transfers.w(l) * v;
        scale_by_phases(&mut v, phases.layer(m, l - 1));
    }
    v
}

fn scale_by_phases(v: &mut CVector, thetas: &[f64]) {
    for (x, &t) in v.iter_mut().zip(thetas) {
        *x *= C64::from_polar(1.0, t);
    }
}

/// `vᴴ h`.
pub fn hermitian_dot(v: &CVector, h: &CVector) -> C64 {
    v.iter().zip(h.iter()).map(|(a, b)| a.conj() * b).sum()
}

/// Normalized sinc, `sin(πx)/(πx)`.
pub fn sinc(x: f64) -> f64 {
    if x == 0.0 {
        1.0
    } else {
        (PI * x).sin() / (PI * x)
    }
}

/// `R_{n,ñ} = sinc(2 d_{n,ñ} / λ)`.
pub fn spatial_correlation(geom: &SimGeometry, wavelength: f64) -> DMatrix<f64> {
    let n = geom.atoms_per_layer;
    DMatrix::from_fn(n, n, |a, b| sinc(2.0 * intra_layer_spacing(a + 1, b + 1, geom) / wavelength))
}

/// `V √Λ₊` from the symmetric eigendecomposition, with negative
/// eigenvalues clipped to zero. Returns the factor and the smallest
/// eigenvalue before clipping.
pub fn correlation_factor(r: &DMatrix<f64>) -> (DMatrix<f64>, f64) {
    let eig = SymmetricEigen::new(r.clone());
    let min = eig.eigenvalues.iter().cloned().fold(f64::INFINITY, f64::min);
    let mut factor = eig.eigenvectors.clone();
    for (j, &lam) in eig.eigenvalues.iter().enumerate() {
        let s = lam.max(0.0).sqrt();
        factor.column_mut(j).scale_mut(s);
    }
    (factor, min)
}

/// One quasi-static channel draw. Only the distance-free part `h̃` is
/// stored; `h = √β h̃` follows the UAV as it moves.
#[derive(Debug, Clone, PartialEq)]
pub struct ChannelRealization {
    /// `h̃[m][k]`.
    pub whitened: Vec<Vec<CVector>>,
    pub correlation: DMatrix<f64>,
    pub correlation_factor: DMatrix<f64>,
}

impl ChannelRealization {
    pub fn channel(&self, m: usize, k: usize, radio: &RadioParams, w: &Vec3, u: &Vec3) -> CVector {
        &self.whitened[m][k] * C64::from(path_gain(radio, w, u).sqrt())
    }
}

/// β = ρ₀ / D².
pub fn path_gain(radio: &RadioParams, w: &Vec3, u: &Vec3) -> f64 {
    let d = (w - u).norm().max(MIN_LINK_DISTANCE);
    radio.reference_gain / (d * d)
}

/// β[m][k] for the given UAV positions.
pub fn path_gains(scenario: &Scenario, positions: &[Vec3]) -> Vec<Vec<f64>> {
    positions
        .iter()
        .map(|w| scenario.users.iter().map(|u| path_gain(&scenario.radio, w, &u.position)).collect())
        .collect()
}

/// Draws `h̃_{m,k} = F z` with `z ~ CN(0, I)`.
///
/// One value is taken from `rng`; each (m, k) pair then gets its own
/// derived stream, so channel draws for a pair do not depend on how many
/// UAVs or users the scenario has.
pub fn sample_channels<R: RngCore + ?Sized>(scenario: &Scenario, rng: &mut R) -> ChannelRealization {
    let r = spatial_correlation(&scenario.sim, scenario.radio.wavelength);
    let (factor, _) = correlation_factor(&r);
    let base = rng.next_u64();
    let whitened = (0..scenario.num_uavs())
        .map(|m| {
            (0..scenario.num_users())
                .map(|k| {
                    let mut s = seed::stream(base, &[seed::TAG_CHANNEL, m as u64, k as u64]);
                    correlated_draw(&factor, &mut s)
                })
                .collect()
        })
        .collect();
    ChannelRealization { whitened, correlation: r, correlation_factor: factor }
}

/// `F z` with `z` circular complex Gaussian of unit variance per entry.
pub fn correlated_draw<R: Rng + ?Sized>(factor: &DMatrix<f64>, rng: &mut R) -> CVector {
    let n = factor.ncols();
    let half = std::f64::consts::FRAC_1_SQRT_2;
    let z = CVector::from_fn(n, |_, _| {
        let re: f64 = rng.sample(StandardNormal);
        let im: f64 = rng.sample(StandardNormal);
        C64::new(re * half, im * half)
    });
    factor.map(C64::from) * z
}

/// `g[m][k] = |w¹ᴴ Gᴴ h̃_{m,k}|²`, the phase-dependent part of every link.
pub fn whitened_gains(phases: &PhaseTensor, transfers: &TransferSet, channels: &ChannelRealization) -> Vec<Vec<f64>> {
    (0..phases.uavs)
        .map(|m| {
            let v = receive_vector(m, phases, transfers);
            channels.whitened[m].iter().map(|h| hermitian_dot(&v, h).norm_sqr()).collect()
        })
        .collect()
}

/// SINR table from whitened gains, path gains, powers and noise.
pub fn sinr_table_from_gains(gains: &[Vec<f64>], betas: &[Vec<f64>], powers: &[f64], noise: &[f64]) -> Vec<Vec<f64>> {
    gains
        .iter()
        .zip(betas)
        .zip(noise)
        .map(|((g, b), &sigma2)| {
            let rx: Vec<f64> = g.iter().zip(b).zip(powers).map(|((g, b), p)| g * b * p).collect();
            let total: f64 = rx.iter().sum();
            rx.iter().map(|&s| s / ((total - s).max(0.0) + sigma2)).collect()
        })
        .collect()
}

/// γ[m][k] for every pair. The interference sum runs over all other users
/// whether or not they are associated.
pub fn sinr_table(
    scenario: &Scenario,
    phases: &PhaseTensor,
    transfers: &TransferSet,
    channels: &ChannelRealization,
) -> Vec<Vec<f64>> {
    let gains = whitened_gains(phases, transfers, channels);
    let betas = path_gains(scenario, &scenario.uav_positions());
    sinr_table_from_gains(&gains, &betas, &scenario.transmit_powers(), &scenario.noise_powers())
}

pub fn sinr(
    m: usize,
    k: usize,
    scenario: &Scenario,
    phases: &PhaseTensor,
    transfers: &TransferSet,
    channels: &ChannelRealization,
) -> f64 {
    let v = receive_vector(m, phases, transfers);
    let w = &scenario.uavs[m].position;
    let rx: Vec<f64> = scenario
        .users
        .iter()
        .enumerate()
        .map(|(j, u)| {
            let h = channels.channel(m, j, &scenario.radio, w, &u.position);
            hermitian_dot(&v, &h).norm_sqr() * u.transmit_power
        })
        .collect();
    let interference: f64 = rx.iter().enumerate().filter(|(j, _)| *j != k).map(|(_, p)| p).sum();
    rx[k] / (interference + scenario.uavs[m].noise_power)
}

pub fn rate(sinr: f64) -> f64 {
    (1.0 + sinr).log2()
}

/// `R_{m,k} = log₂(1 + γ_{m,k})` for every pair.
pub fn rate_table_from_sinr(sinr: &[Vec<f64>]) -> Vec<Vec<f64>> {
    sinr.iter().map(|row| row.iter().map(|&g| rate(g)).collect()).collect()
}

/// `Σ_m Σ_k S_{m,k} R_{m,k}`, in bit/s/Hz.
pub fn network_capacity(s: &AssociationMatrix, rates: &[Vec<f64>]) -> f64 {
    s.objective(rates)
}
