//! Conditional variational autoencoder that maps a network state to
//! metasurface phases, trained with an extra capacity-matching term.
//!
//! A link's rate depends only on its own UAV's phases and channels, so the
//! network works on one UAV at a time and is shared by every UAV.
//!
//! Phases are encoded as (cos θ, sin θ) pairs. Decoder outputs are
//! normalized per atom to a unit phasor before capacity is evaluated, and
//! the capacity gradient flows back through that normalization.

use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::channel::{hermitian_dot, path_gain, wrap_phase, CVector, ChannelRealization, PhaseTensor, SimGeometry, TransferSet, C64};
use crate::error::{Error, Result};
use crate::scenario::{AssociationMatrix, Scenario, Vec3};

pub const CHECKPOINT_SCHEMA: u32 = 1;
const LN2: f64 = std::f64::consts::LN_2;
const LOGVAR_CLAMP: f64 = 20.0;

/// Everything needed to evaluate capacity for one sample and to build its
/// condition vector.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleContext {
    pub area: [f64; 2],
    pub uav_positions: Vec<Vec3>,
    pub user_positions: Vec<Vec3>,
    pub served: Vec<Option<usize>>,
    /// `p_l β_{m,l}`.
    pub received_scale: Vec<Vec<f64>>,
    pub path_gains: Vec<Vec<f64>>,
    pub noise: Vec<f64>,
    /// `h̃[m][l]`.
    pub whitened: Vec<Vec<CVector>>,
}

impl SampleContext {
    pub fn from_state(scenario: &Scenario, s: &AssociationMatrix, channels: &ChannelRealization) -> Self {
        let path_gains: Vec<Vec<f64>> = scenario
            .uavs
            .iter()
            .map(|w| scenario.users.iter().map(|u| path_gain(&scenario.radio, &w.position, &u.position)).collect())
            .collect();
        let received_scale = path_gains
            .iter()
            .map(|row| row.iter().zip(&scenario.users).map(|(b, u)| b * u.transmit_power).collect())
            .collect();
        Self {
            area: scenario.area,
            uav_positions: scenario.uav_positions(),
            user_positions: scenario.user_positions(),
            served: s.served(),
            received_scale,
            path_gains,
            noise: scenario.noise_powers(),
            whitened: channels.whitened.clone(),
        }
    }

    pub fn uavs(&self) -> usize {
        self.uav_positions.len()
    }

    pub fn users(&self) -> usize {
        self.user_positions.len()
    }

    /// The part of the state seen by UAV `m` alone.
    pub fn single(&self, m: usize) -> SampleContext {
        SampleContext {
            area: self.area,
            uav_positions: vec![self.uav_positions[m]],
            user_positions: self.user_positions.clone(),
            served: vec![self.served[m]],
            received_scale: vec![self.received_scale[m].clone()],
            path_gains: vec![self.path_gains[m].clone()],
            noise: vec![self.noise[m]],
            whitened: vec![self.whitened[m].clone()],
        }
    }

    /// Raw condition features: UAV positions, served-user positions, log
    /// path gains and the served user's whitened channel.
    pub fn features(&self) -> Vec<f64> {
        let atoms = self.whitened[0][0].len();
        let mut c = Vec::with_capacity(condition_dim(self.uavs(), self.users(), atoms));
        for w in &self.uav_positions {
            c.extend([w.x / self.area[0], w.y / self.area[1]]);
        }
        for k in &self.served {
            match k {
                Some(k) => {
                    let u = &self.user_positions[*k];
                    c.extend([u.x / self.area[0], u.y / self.area[1]]);
                }
                None => c.extend([-1.0, -1.0]),
            }
        }
        for row in &self.path_gains {
            c.extend(row.iter().map(|b| b.log10()));
        }
        for (m, k) in self.served.iter().enumerate() {
            match k {
                Some(k) => c.extend(self.whitened[m][*k].iter().flat_map(|z| [z.re, z.im])),
                None => c.extend(std::iter::repeat_n(0.0, 2 * atoms)),
            }
        }
        c
    }
}

pub fn condition_dim(uavs: usize, users: usize, atoms: usize) -> usize {
    4 * uavs + uavs * users + 2 * uavs * atoms
}

/// (cos, sin) encoding in `[m][l][n]` order.
pub fn encode_phases(phases: &PhaseTensor) -> Vec<f64> {
    phases.as_flat().iter().flat_map(|t| [t.cos(), t.sin()]).collect()
}

/// Normalizes each (cos, sin) pair and extracts the angle.
pub fn decode_phases(raw: &[f64], uavs: usize, layers: usize, atoms: usize) -> PhaseTensor {
    let thetas: Vec<f64> = raw.chunks_exact(2).map(|p| wrap_phase(p[1].atan2(p[0]))).collect();
    PhaseTensor::from_flat(uavs, layers, atoms, &thetas)
}

fn unit_phasor(c: f64, s: f64) -> (C64, f64) {
    let norm = c.hypot(s).max(1e-12);
    (C64::new(c / norm, s / norm), norm)
}

/// Sum rate of the served links for raw decoder output `raw`, and
/// optionally its gradient with respect to `raw`.
pub fn decoded_capacity(ctx: &SampleContext, transfers: &TransferSet, raw: &[f64], want_grad: bool) -> (f64, Option<Vec<f64>>) {
    let layers = transfers.layers();
    let atoms = transfers.atoms();
    let users = ctx.users();
    let mut grad = want_grad.then(|| vec![0.0; raw.len()]);
    let mut total = 0.0;
    for (m, served) in ctx.served.iter().enumerate() {
        let Some(k) = *served else { continue };
        let base = m * layers * atoms;
        let mut phi = Vec::with_capacity(layers);
        let mut norms = Vec::with_capacity(layers);
        for l in 0..layers {
            let (p, n): (Vec<C64>, Vec<f64>) = (0..atoms)
                .map(|n| {
                    let i = 2 * (base + l * atoms + n);
                    unit_phasor(raw[i], raw[i + 1])
                })
                .unzip();
            phi.push(CVector::from_vec(p));
            norms.push(n);
        }
        let mut forward = Vec::with_capacity(layers);
        forward.push(transfers.output[m].clone());
        for l in 1..layers {
            let next = transfers.w(l + 1) * forward[l - 1].component_mul(&phi[l - 1]);
            forward.push(next);
        }
        let v = forward[layers - 1].component_mul(&phi[layers - 1]);
        let amps: Vec<C64> = ctx.whitened[m].iter().map(|h| hermitian_dot(&v, h)).collect();
        let rx: Vec<f64> = amps.iter().zip(&ctx.received_scale[m]).map(|(a, q)| q * a.norm_sqr()).collect();
        let t = rx.iter().sum::<f64>() + ctx.noise[m];
        let rest = (t - rx[k]).max(ctx.noise[m]);
        total += t.log2() - rest.log2();

        let Some(grad) = grad.as_mut() else { continue };
        let mut g_phi = vec![CVector::zeros(atoms); layers];
        for l in 0..users {
            let d_rate = ctx.received_scale[m][l] / LN2 * (1.0 / t - if l == k { 0.0 } else { 1.0 / rest });
            if d_rate == 0.0 {
                continue;
            }
            let coef = amps[l].conj() * (2.0 * d_rate);
            let mut r = ctx.whitened[m][l].clone();
            for j in (0..layers).rev() {
                for n in 0..atoms {
                    g_phi[j][n] += coef * forward[j][n].conj() * r[n];
                }
                if j > 0 {
                    let shifted = r.zip_map(&phi[j], |x, p| x * p.conj());
                    r = transfers.w(j + 1).ad_mul(&shifted);
                }
            }
        }
        for l in 0..layers {
            for n in 0..atoms {
                let (p, g) = (phi[l][n], g_phi[l][n]);
                let radial = p.re * g.re + p.im * g.im;
                let i = 2 * (base + l * atoms + n);
                grad[i] = (g.re - p.re * radial) / norms[l][n];
                grad[i + 1] = (g.im - p.im * radial) / norms[l][n];
            }
        }
    }
    (total, grad)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dense {
    pub weight: DMatrix<f64>,
    pub bias: DVector<f64>,
}

impl Dense {
    fn init<R: Rng>(out: usize, inp: usize, rng: &mut R) -> Self {
        let std = (2.0 / inp as f64).sqrt();
        Self {
            weight: DMatrix::from_fn(out, inp, |_, _| rng.sample::<f64, _>(StandardNormal) * std),
            bias: DVector::zeros(out),
        }
    }

    fn zeros_like(&self) -> Self {
        Self { weight: DMatrix::zeros(self.weight.nrows(), self.weight.ncols()), bias: DVector::zeros(self.bias.len()) }
    }

    fn forward(&self, x: &DMatrix<f64>) -> DMatrix<f64> {
        let mut y = &self.weight * x;
        for mut col in y.column_iter_mut() {
            col += &self.bias;
        }
        y
    }

    /// Accumulates parameter gradients and returns the input gradient.
    fn backward(&self, x: &DMatrix<f64>, dy: &DMatrix<f64>, grad: &mut Dense) -> DMatrix<f64> {
        grad.weight += dy * x.transpose();
        grad.bias += dy.column_sum();
        self.weight.tr_mul(dy)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Network {
    pub enc1: Dense,
    pub enc2: Dense,
    pub enc_mu: Dense,
    pub enc_logvar: Dense,
    pub dec1: Dense,
    pub dec2: Dense,
    pub dec_out: Dense,
}

impl Network {
    fn layers(&self) -> [&Dense; 7] {
        [&self.enc1, &self.enc2, &self.enc_mu, &self.enc_logvar, &self.dec1, &self.dec2, &self.dec_out]
    }

    fn layers_mut(&mut self) -> [&mut Dense; 7] {
        [
            &mut self.enc1,
            &mut self.enc2,
            &mut self.enc_mu,
            &mut self.enc_logvar,
            &mut self.dec1,
            &mut self.dec2,
            &mut self.dec_out,
        ]
    }

    fn zeros_like(&self) -> Self {
        Self {
            enc1: self.enc1.zeros_like(),
            enc2: self.enc2.zeros_like(),
            enc_mu: self.enc_mu.zeros_like(),
            enc_logvar: self.enc_logvar.zeros_like(),
            dec1: self.dec1.zeros_like(),
            dec2: self.dec2.zeros_like(),
            dec_out: self.dec_out.zeros_like(),
        }
    }

    /// All parameters, layer by layer, weights (column-major) then biases.
    pub fn flat(&self) -> Vec<f64> {
        self.layers().iter().flat_map(|d| d.weight.iter().chain(d.bias.iter()).copied()).collect()
    }

    pub fn set_flat(&mut self, values: &[f64]) {
        let mut it = values.iter();
        for d in self.layers_mut() {
            for w in d.weight.iter_mut().chain(d.bias.iter_mut()) {
                *w = *it.next().expect("parameter count");
            }
        }
    }

    pub fn num_params(&self) -> usize {
        self.layers().iter().map(|d| d.weight.len() + d.bias.len()).sum()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
/// Dimensions of the per-UAV network.
pub struct ModelLayout {
    pub users: usize,
    pub layers: usize,
    pub atoms: usize,
    pub hidden: usize,
    pub latent: usize,
}

impl ModelLayout {
    pub fn phase_dim(&self) -> usize {
        2 * self.layers * self.atoms
    }

    pub fn condition_dim(&self) -> usize {
        condition_dim(1, self.users, self.atoms)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CvaeModel {
    pub schema_version: u32,
    pub layout: ModelLayout,
    pub geometry: SimGeometry,
    pub wavelength: f64,
    pub net: Network,
    /// Weights of the reconstruction, KL and capacity terms.
    pub betas: [f64; 3],
    pub calibrated: bool,
    pub cond_mean: Vec<f64>,
    pub cond_std: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ForwardPass {
    pub mu: DMatrix<f64>,
    pub logvar: DMatrix<f64>,
    pub z: DMatrix<f64>,
    pub x_hat: DMatrix<f64>,
    cache: Cache,
}

#[derive(Debug, Clone, PartialEq)]
struct Cache {
    in_e: DMatrix<f64>,
    pe1: DMatrix<f64>,
    e1: DMatrix<f64>,
    pe2: DMatrix<f64>,
    e2: DMatrix<f64>,
    std: DMatrix<f64>,
    in_d: DMatrix<f64>,
    pd1: DMatrix<f64>,
    d1: DMatrix<f64>,
    pd2: DMatrix<f64>,
    d2: DMatrix<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossTerms {
    pub total: f64,
    pub recon: f64,
    pub kl: f64,
    pub capacity: f64,
}

/// A training batch; `x` and `c` hold one sample per column and `c` is
/// already normalized.
pub struct Batch<'a> {
    pub x: DMatrix<f64>,
    pub c: DMatrix<f64>,
    pub contexts: Vec<&'a SampleContext>,
    pub reference: Vec<f64>,
}

fn relu(m: &DMatrix<f64>) -> DMatrix<f64> {
    m.map(|v| v.max(0.0))
}

fn relu_back(d: &DMatrix<f64>, pre: &DMatrix<f64>) -> DMatrix<f64> {
    d.zip_map(pre, |g, p| if p > 0.0 { g } else { 0.0 })
}

fn vstack(a: &DMatrix<f64>, b: &DMatrix<f64>) -> DMatrix<f64> {
    let r = a.nrows();
    DMatrix::from_fn(r + b.nrows(), a.ncols(), |i, j| if i < r { a[(i, j)] } else { b[(i - r, j)] })
}

impl CvaeModel {
    pub fn new(layout: ModelLayout, geometry: SimGeometry, wavelength: f64, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (d, c, h, z) = (layout.phase_dim(), layout.condition_dim(), layout.hidden, layout.latent);
        let net = Network {
            enc1: Dense::init(h, d + c, &mut rng),
            enc2: Dense::init(h, h, &mut rng),
            enc_mu: Dense::init(z, h, &mut rng),
            enc_logvar: Dense::init(z, h, &mut rng),
            dec1: Dense::init(h, z + c, &mut rng),
            dec2: Dense::init(h, h, &mut rng),
            dec_out: Dense::init(d, h, &mut rng),
        };
        Self {
            schema_version: CHECKPOINT_SCHEMA,
            layout,
            geometry,
            wavelength,
            net,
            betas: [1.0; 3],
            calibrated: false,
            cond_mean: vec![0.0; c],
            cond_std: vec![1.0; c],
        }
    }

    /// True when the model was built for this scenario's dimensions.
    pub fn matches(&self, scenario: &Scenario) -> bool {
        self.layout.users == scenario.num_users()
            && self.layout.layers == scenario.sim.layers
            && self.layout.atoms == scenario.sim.atoms_per_layer
    }

    /// Sets feature standardization from raw condition vectors.
    pub fn fit_normalization<'a>(&mut self, conditions: impl Iterator<Item = &'a [f64]>) {
        let dim = self.layout.condition_dim();
        let (mut sum, mut sq, mut n) = (vec![0.0; dim], vec![0.0; dim], 0.0);
        for c in conditions {
            for i in 0..dim {
                sum[i] += c[i];
                sq[i] += c[i] * c[i];
            }
            n += 1.0;
        }
        if n == 0.0 {
            return;
        }
        for i in 0..dim {
            let mean = sum[i] / n;
            let var = (sq[i] / n - mean * mean).max(0.0);
            self.cond_mean[i] = mean;
            self.cond_std[i] = if var.sqrt() > 1e-8 { var.sqrt() } else { 1.0 };
        }
    }

    pub fn normalize(&self, raw: &[f64]) -> DVector<f64> {
        DVector::from_iterator(raw.len(), raw.iter().zip(&self.cond_mean).zip(&self.cond_std).map(|((v, m), s)| (v - m) / s))
    }

    /// Encoder, reparameterization with the given `eps`, and decoder.
    pub fn forward(&self, x: &DMatrix<f64>, c: &DMatrix<f64>, eps: &DMatrix<f64>) -> ForwardPass {
        let n = &self.net;
        let in_e = vstack(x, c);
        let pe1 = n.enc1.forward(&in_e);
        let e1 = relu(&pe1);
        let pe2 = n.enc2.forward(&e1);
        let e2 = relu(&pe2);
        let mu = n.enc_mu.forward(&e2);
        let logvar = n.enc_logvar.forward(&e2).map(|v| v.clamp(-LOGVAR_CLAMP, LOGVAR_CLAMP));
        let std = logvar.map(|v| (0.5 * v).exp());
        let z = &mu + std.component_mul(eps);
        let (x_hat, in_d, pd1, d1, pd2, d2) = self.decode_cached(&z, c);
        ForwardPass { mu, logvar, z, x_hat, cache: Cache { in_e, pe1, e1, pe2, e2, std, in_d, pd1, d1, pd2, d2 } }
    }

    #[allow(clippy::type_complexity)]
    fn decode_cached(
        &self,
        z: &DMatrix<f64>,
        c: &DMatrix<f64>,
    ) -> (DMatrix<f64>, DMatrix<f64>, DMatrix<f64>, DMatrix<f64>, DMatrix<f64>, DMatrix<f64>) {
        let n = &self.net;
        let in_d = vstack(z, c);
        let pd1 = n.dec1.forward(&in_d);
        let d1 = relu(&pd1);
        let pd2 = n.dec2.forward(&d1);
        let d2 = relu(&pd2);
        let out = n.dec_out.forward(&d2);
        (out, in_d, pd1, d1, pd2, d2)
    }

    /// Decoder only.
    pub fn decode(&self, z: &DMatrix<f64>, c: &DMatrix<f64>) -> DMatrix<f64> {
        self.decode_cached(z, c).0
    }

    /// Loss terms and, when requested, parameter gradients of the total.
    pub fn loss(&self, transfers: &TransferSet, batch: &Batch<'_>, eps: &DMatrix<f64>, want_grad: bool) -> (LossTerms, Option<Network>) {
        let b = batch.x.ncols() as f64;
        let d = batch.x.nrows() as f64;
        let fp = self.forward(&batch.x, &batch.c, eps);
        let diff = &fp.x_hat - &batch.x;
        let recon = reconstruction_loss(&fp.x_hat, &batch.x);
        let kl = kl_divergence(&fp.mu, &fp.logvar);
        let (cap_loss, cap_grad) = capacity_loss(transfers, &batch.contexts, &fp.x_hat, &batch.reference, want_grad);
        let [b1, b2, b3] = self.betas;
        let terms = LossTerms { total: b1 * recon + b2 * kl + b3 * cap_loss, recon, kl, capacity: cap_loss };
        if !want_grad {
            return (terms, None);
        }

        let n = &self.net;
        let cache = &fp.cache;
        let mut grad = n.zeros_like();
        let d_out = diff * (2.0 * b1 / (d * b)) + cap_grad.expect("gradient requested") * b3;
        let d_d2 = n.dec_out.backward(&cache.d2, &d_out, &mut grad.dec_out);
        let d_pd2 = relu_back(&d_d2, &cache.pd2);
        let d_d1 = n.dec2.backward(&cache.d1, &d_pd2, &mut grad.dec2);
        let d_pd1 = relu_back(&d_d1, &cache.pd1);
        let d_in_d = n.dec1.backward(&cache.in_d, &d_pd1, &mut grad.dec1);
        let d_z = d_in_d.rows(0, self.layout.latent).into_owned();

        let d_mu = &d_z + &fp.mu * (b2 / b);
        let d_logvar = DMatrix::from_fn(d_z.nrows(), d_z.ncols(), |r, c| {
            let lv = fp.logvar[(r, c)];
            let through_z = d_z[(r, c)] * eps[(r, c)] * 0.5 * cache.std[(r, c)];
            let clamped = lv <= -LOGVAR_CLAMP || lv >= LOGVAR_CLAMP;
            if clamped {
                0.0
            } else {
                through_z + b2 / b * 0.5 * (lv.exp() - 1.0)
            }
        });
        let mut d_e2 = n.enc_mu.backward(&cache.e2, &d_mu, &mut grad.enc_mu);
        d_e2 += n.enc_logvar.backward(&cache.e2, &d_logvar, &mut grad.enc_logvar);
        let d_pe2 = relu_back(&d_e2, &cache.pe2);
        let d_e1 = n.enc2.backward(&cache.e1, &d_pe2, &mut grad.enc2);
        let d_pe1 = relu_back(&d_e1, &cache.pe1);
        n.enc1.backward(&cache.in_e, &d_pe1, &mut grad.enc1);
        (terms, Some(grad))
    }

    /// Sets the loss weights so each term starts near one. The KL term is
    /// floored at one because it is close to zero for a fresh encoder.
    pub fn calibrate(&mut self, terms: &LossTerms) {
        self.betas = [1.0 / terms.recon.max(1e-12), 1.0 / terms.kl.max(1.0), 1.0 / terms.capacity.max(1e-12)];
        self.calibrated = true;
    }

    /// One decoder pass from a prior sample.
    pub fn generate_phases<R: Rng>(&self, raw_condition: &[f64], rng: &mut R) -> PhaseTensor {
        let z = DMatrix::from_fn(self.layout.latent, 1, |_, _| rng.sample::<f64, _>(StandardNormal));
        let c = DMatrix::from_column_slice(raw_condition.len(), 1, self.normalize(raw_condition).as_slice());
        let out = self.decode(&z, &c);
        decode_phases(out.as_slice(), 1, self.layout.layers, self.layout.atoms)
    }

    /// Phases for the current solver state.
    pub fn generate_for(
        &self,
        scenario: &Scenario,
        s: &AssociationMatrix,
        channels: &ChannelRealization,
        mut rng: ChaCha8Rng,
    ) -> Result<PhaseTensor> {
        if !self.matches(scenario) {
            return Err(Error::Config(format!(
                "model was trained for K={}, L={}, N={}",
                self.layout.users, self.layout.layers, self.layout.atoms
            )));
        }
        let ctx = SampleContext::from_state(scenario, s, channels);
        let mut phases = PhaseTensor::zeros(ctx.uavs(), self.layout.layers, self.layout.atoms);
        for m in (0..ctx.uavs()).filter(|&m| ctx.served[m].is_some()) {
            let one = self.generate_phases(&ctx.single(m).features(), &mut rng);
            phases.set_uav(m, one.uav(0));
        }
        Ok(phases)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let file = std::io::BufWriter::new(std::fs::File::create(path)?);
        serde_json::to_writer(file, self)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let model: Self = serde_json::from_str(&text)?;
        if model.schema_version != CHECKPOINT_SCHEMA {
            return Err(Error::Config(format!(
                "checkpoint schema {} is not supported (expected {CHECKPOINT_SCHEMA})",
                model.schema_version
            )));
        }
        if model.net.dec_out.weight.nrows() != model.layout.phase_dim() {
            return Err(Error::Config("checkpoint shapes do not match its layout".into()));
        }
        Ok(model)
    }
}

/// Mean squared error over all entries.
pub fn reconstruction_loss(x_hat: &DMatrix<f64>, x: &DMatrix<f64>) -> f64 {
    (x_hat - x).norm_squared() / (x.nrows() * x.ncols()) as f64
}

/// KL divergence from `N(μ, e^{logvar})` to the standard normal, summed
/// over latent dimensions and averaged over the batch.
pub fn kl_divergence(mu: &DMatrix<f64>, logvar: &DMatrix<f64>) -> f64 {
    mu.iter().zip(logvar.iter()).map(|(m, lv)| 0.5 * (m * m + lv.exp() - 1.0 - lv)).sum::<f64>() / mu.ncols() as f64
}

/// Mean squared capacity gap to the reference, with the gradient with
/// respect to the decoder output when requested.
pub fn capacity_loss(
    transfers: &TransferSet,
    contexts: &[&SampleContext],
    x_hat: &DMatrix<f64>,
    reference: &[f64],
    want_grad: bool,
) -> (f64, Option<DMatrix<f64>>) {
    let b = x_hat.ncols() as f64;
    let mut grad = want_grad.then(|| DMatrix::zeros(x_hat.nrows(), x_hat.ncols()));
    let mut loss = 0.0;
    for (i, ctx) in contexts.iter().enumerate() {
        let (c, g) = decoded_capacity(ctx, transfers, x_hat.column(i).as_slice(), want_grad);
        let err = c - reference[i];
        loss += err * err / b;
        if let (Some(grad), Some(g)) = (grad.as_mut(), g) {
            let scale = 2.0 * err / b;
            for (r, gv) in g.iter().enumerate() {
                grad[(r, i)] = scale * gv;
            }
        }
    }
    (loss, grad)
}

/// First-order adaptive-moment optimizer over the flattened parameters.
#[derive(Debug, Clone)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl Adam {
    pub fn new(params: usize, lr: f64) -> Self {
        Self { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8, m: vec![0.0; params], v: vec![0.0; params], t: 0 }
    }

    pub fn step(&mut self, net: &mut Network, grad: &Network) {
        self.t += 1;
        let g = grad.flat();
        let mut p = net.flat();
        let c1 = 1.0 - self.beta1.powi(self.t);
        let c2 = 1.0 - self.beta2.powi(self.t);
        for i in 0..p.len() {
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * g[i];
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * g[i] * g[i];
            p[i] -= self.lr * (self.m[i] / c1) / ((self.v[i] / c2).sqrt() + self.eps);
        }
        net.set_flat(&p);
    }
}

/// One supervised example: LBL-IPSO phases under a condition.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainingSample {
    pub phases: Vec<f64>,
    pub condition: Vec<f64>,
    pub context: SampleContext,
    pub reference_capacity: f64,
}

impl TrainingSample {
    pub fn new(context: SampleContext, phases: &PhaseTensor, reference_capacity: f64) -> Self {
        Self { phases: encode_phases(phases), condition: context.features(), context, reference_capacity }
    }

    /// Splits a full solution into one sample per served UAV. `transfers`
    /// is the single-UAV transfer set; each reference is that link's rate.
    pub fn per_uav(context: &SampleContext, phases: &PhaseTensor, transfers: &TransferSet) -> Vec<Self> {
        (0..context.uavs())
            .filter(|&m| context.served[m].is_some())
            .map(|m| {
                let ctx = context.single(m);
                let one = PhaseTensor::from_flat(1, phases.layers, phases.atoms, phases.uav(m));
                let rate = decoded_capacity(&ctx, transfers, &encode_phases(&one), false).0;
                Self::new(ctx, &one, rate)
            })
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainSettings {
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for TrainSettings {
    fn default() -> Self {
        Self { epochs: 300, lr: 1e-4, batch_size: 64, seed: 0 }
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// Lowest-loss model seen; the final one when training finished cleanly.
    pub model: CvaeModel,
    /// Mean loss terms per epoch.
    pub curve: Vec<LossTerms>,
    pub diverged_at: Option<usize>,
}

impl TrainOutcome {
    pub fn into_result(self) -> Result<(CvaeModel, Vec<LossTerms>)> {
        match self.diverged_at {
            Some(epoch) => Err(Error::Divergence { epoch }),
            None => Ok((self.model, self.curve)),
        }
    }
}

fn make_batch<'a>(model: &CvaeModel, samples: &'a [TrainingSample], idx: &[usize]) -> Batch<'a> {
    let d = model.layout.phase_dim();
    let c = model.layout.condition_dim();
    let x = DMatrix::from_fn(d, idx.len(), |r, j| samples[idx[j]].phases[r]);
    let norm: Vec<DVector<f64>> = idx.iter().map(|&i| model.normalize(&samples[i].condition)).collect();
    let cm = DMatrix::from_fn(c, idx.len(), |r, j| norm[j][r]);
    Batch {
        x,
        c: cm,
        contexts: idx.iter().map(|&i| &samples[i].context).collect(),
        reference: idx.iter().map(|&i| samples[i].reference_capacity).collect(),
    }
}

/// Mini-batch training. Fits feature normalization and calibrates the loss
/// weights on the first batch when the model is fresh.
pub fn train_cvae(samples: &[TrainingSample], mut model: CvaeModel, settings: &TrainSettings) -> Result<TrainOutcome> {
    if samples.is_empty() {
        return Err(Error::Dataset("no training samples".into()));
    }
    let expect = (model.layout.phase_dim(), model.layout.condition_dim());
    if samples.iter().any(|s| (s.phases.len(), s.condition.len()) != expect) {
        return Err(Error::Dataset("sample shapes do not match the model layout".into()));
    }
    let transfers = crate::channel::build_transfers_for(&model.geometry, model.wavelength, 1)?;
    let mut rng = ChaCha8Rng::seed_from_u64(settings.seed);
    if !model.calibrated {
        model.fit_normalization(samples.iter().map(|s| s.condition.as_slice()));
    }
    let mut adam = Adam::new(model.net.num_params(), settings.lr);
    let mut order: Vec<usize> = (0..samples.len()).collect();
    let mut curve = Vec::with_capacity(settings.epochs);
    let mut best: Option<(f64, CvaeModel)> = None;
    let bs = settings.batch_size.max(1);
    for epoch in 1..=settings.epochs {
        order.shuffle(&mut rng);
        let mut sum = LossTerms { total: 0.0, recon: 0.0, kl: 0.0, capacity: 0.0 };
        for chunk in order.chunks(bs) {
            let batch = make_batch(&model, samples, chunk);
            let eps = DMatrix::from_fn(model.layout.latent, chunk.len(), |_, _| rng.sample::<f64, _>(StandardNormal));
            if !model.calibrated {
                let (raw, _) = model.loss(&transfers, &batch, &eps, false);
                model.calibrate(&raw);
            }
            let (terms, grad) = model.loss(&transfers, &batch, &eps, true);
            if !terms.total.is_finite() {
                return Ok(diverged(model, best, curve, epoch));
            }
            adam.step(&mut model.net, &grad.expect("gradient requested"));
            let w = chunk.len() as f64 / samples.len() as f64;
            sum.total += terms.total * w;
            sum.recon += terms.recon * w;
            sum.kl += terms.kl * w;
            sum.capacity += terms.capacity * w;
        }
        if !sum.total.is_finite() || model.net.flat().iter().any(|v| !v.is_finite()) {
            return Ok(diverged(model, best, curve, epoch));
        }
        curve.push(sum);
        if best.as_ref().is_none_or(|(l, _)| sum.total < *l) {
            best = Some((sum.total, model.clone()));
        }
    }
    Ok(TrainOutcome { model, curve, diverged_at: None })
}

fn diverged(model: CvaeModel, best: Option<(f64, CvaeModel)>, curve: Vec<LossTerms>, epoch: usize) -> TrainOutcome {
    let model = best.map_or(model, |(_, m)| m);
    TrainOutcome { model, curve, diverged_at: Some(epoch) }
}
