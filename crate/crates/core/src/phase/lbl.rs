//! Layer-by-layer phase alignment.
//!
//! With every layer but `l` fixed, the served amplitude is
//! `a = Σ_n conj(f_n) e^{-jθ_n} r_n`, where `f` is the wave arriving at
//! layer l from the antenna side and `r` is the user channel propagated
//! back to layer l. Choosing `θ_n = ∠r_n − ∠f_n` makes every term
//! co-phased, which is the exact maximizer over that layer.

use rand::Rng;

use crate::channel::{wrap_phase, CVector, PhaseTensor, TransferSet, C64};

#[derive(Debug, Clone, PartialEq)]
pub struct PartialProducts {
    /// Wave at layer l before its phase shift: `W^l Φ^{l-1} ⋯ Φ¹ w¹`.
    pub forward: CVector,
    /// Channel seen from layer l: `W^{(l+1)H} Φ^{(l+1)H} ⋯ W^{LH} Φ^{LH} h`.
    pub backward: CVector,
}

impl PartialProducts {
    /// `fᴴ Φ^{lH} r` for the given layer phases.
    pub fn amplitude(&self, thetas: &[f64]) -> C64 {
        self.forward
            .iter()
            .zip(self.backward.iter())
            .zip(thetas)
            .map(|((f, r), &t)| f.conj() * C64::from_polar(1.0, -t) * r)
            .sum()
    }
}

fn apply_phases(v: &mut CVector, thetas: &[f64], conjugate: bool) {
    let sign = if conjugate { -1.0 } else { 1.0 };
    for (x, &t) in v.iter_mut().zip(thetas) {
        *x *= C64::from_polar(1.0, sign * t);
    }
}

/// Both partial products for 1-based layer `l`, each built from scratch.
pub fn partial_products(m: usize, l: usize, phases: &PhaseTensor, transfers: &TransferSet, h: &CVector) -> PartialProducts {
    let layers = phases.layers;
    let mut forward = transfers.output[m].clone();
    for j in 1..l {
        apply_phases(&mut forward, phases.layer(m, j - 1), false);
        forward = transfers.w(j + 1) * forward;
    }
    let mut backward = h.clone();
    for j in (l + 1..=layers).rev() {
        apply_phases(&mut backward, phases.layer(m, j - 1), true);
        backward = transfers.w(j).ad_mul(&backward);
    }
    PartialProducts { forward, backward }
}

/// Co-phasing shifts for one layer and the resulting gain `Σ|f_n||r_n|`.
pub fn align_layer(pp: &PartialProducts) -> (Vec<f64>, f64) {
    let mut gain = 0.0;
    let thetas = pp
        .forward
        .iter()
        .zip(pp.backward.iter())
        .map(|(f, r)| {
            gain += f.norm() * r.norm();
            wrap_phase(r.arg() - f.arg())
        })
        .collect();
    (thetas, gain)
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct LblTrace {
    /// `|vᴴh|` after every layer update, per UAV, in update order.
    pub updates: Vec<Vec<f64>>,
}

impl LblTrace {
    pub fn final_gain(&self, m: usize) -> Option<f64> {
        self.updates.get(m).and_then(|u| u.last().copied())
    }
}

/// Sweeps layers 1..=L `kappa_max` times for every UAV with a served
/// channel. `channels[m]` is the served user's channel (any positive
/// scaling gives the same phases); UAVs without one get zero phases.
pub fn lbl_ipso(
    channels: &[Option<&CVector>],
    transfers: &TransferSet,
    init: &PhaseTensor,
    kappa_max: usize,
) -> (PhaseTensor, LblTrace) {
    let mut phases = init.clone();
    let mut trace = LblTrace { updates: vec![Vec::new(); init.uavs] };
    for (m, h) in channels.iter().enumerate() {
        let Some(h) = h else {
            phases.clear_uav(m);
            continue;
        };
        let log = &mut trace.updates[m];
        log.reserve(kappa_max * init.layers);
        for _ in 0..kappa_max {
            for l in 1..=init.layers {
                let pp = partial_products(m, l, &phases, transfers, h);
                let (thetas, gain) = align_layer(&pp);
                phases.set_layer(m, l - 1, &thetas);
                log.push(gain);
            }
        }
    }
    (phases, trace)
}

/// Uniform random starting phases.
pub fn random_init<R: Rng + ?Sized>(uavs: usize, layers: usize, atoms: usize, rng: &mut R) -> PhaseTensor {
    PhaseTensor::random(uavs, layers, atoms, rng)
}

/// Operation count the complexity analysis predicts for one run.
pub fn predicted_cost(atoms: usize, uavs: usize, layers: usize, kappa_max: usize) -> f64 {
    4.0 * (atoms * atoms) as f64 * uavs as f64 * (layers * layers) as f64 * kappa_max as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::channel::{build_transfers_for, correlated_draw, hermitian_dot, receive_vector, SimGeometry};
    use nalgebra::DMatrix;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    const LAMBDA: f64 = 0.0107;

    fn fixture(layers: usize, atoms: usize, seed: u64) -> (TransferSet, PhaseTensor, CVector) {
        let g = SimGeometry::new(layers, atoms, 5.0 * LAMBDA, LAMBDA).unwrap();
        let t = build_transfers_for(&g, LAMBDA, 2).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let ph = PhaseTensor::random(2, layers, atoms, &mut rng);
        let h = correlated_draw(&DMatrix::identity(atoms, atoms), &mut rng);
        (t, ph, h)
    }

    fn served_amplitude(m: usize, ph: &PhaseTensor, t: &TransferSet, h: &CVector) -> C64 {
        hermitian_dot(&receive_vector(m, ph, t), h)
    }

    #[test]
    fn single_layer_is_matched_filter() {
        let (t, ph, h) = fixture(1, 9, 1);
        let pp = partial_products(0, 1, &ph, &t, &h);
        assert_eq!(pp.forward, t.output[0]);
        assert_eq!(pp.backward, h);
        let (out, trace) = lbl_ipso(&[Some(&h), None], &t, &ph, 1);
        let want: f64 = t.output[0].iter().zip(h.iter()).map(|(a, b)| a.norm() * b.norm()).sum();
        let got = served_amplitude(0, &out, &t, &h).norm();
        assert!((got - want).abs() <= 1e-12 * want);
        assert!((trace.final_gain(0).unwrap() - want).abs() <= 1e-12 * want);
        assert!(out.uav(1).iter().all(|&x| x == 0.0));
    }

    #[test]
    fn factorization_identity() {
        for seed in 0..20 {
            let (t, ph, h) = fixture(3, 9, seed);
            let full = served_amplitude(1, &ph, &t, &h);
            for l in 1..=3 {
                let pp = partial_products(1, l, &ph, &t, &h);
                let a = pp.amplitude(ph.layer(1, l - 1));
                assert!((a - full).norm() <= 1e-12 * full.norm(), "l={l}");
            }
        }
    }

    #[test]
    fn amplitude_is_affine_in_each_layer_phasor() {
        // Only layer l changes between evaluations: the amplitude is linear
        // in e^{-jθ^l}, so the midpoint phasor combination is exact.
        let (t, ph, h) = fixture(3, 9, 5);
        let pp = partial_products(0, 2, &ph, &t, &h);
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let a: Vec<f64> = (0..9).map(|_| rng.random::<f64>() * 6.0).collect();
        let b: Vec<f64> = (0..9).map(|_| rng.random::<f64>() * 6.0).collect();
        let manual: C64 = (0..9)
            .map(|n| pp.forward[n].conj() * (C64::from_polar(1.0, -a[n]) + C64::from_polar(1.0, -b[n])) * pp.backward[n])
            .sum();
        assert!((pp.amplitude(&a) + pp.amplitude(&b) - manual).norm() <= 1e-12 * manual.norm().max(1e-300));
    }

    #[test]
    fn aligned_real_inputs_need_no_shift() {
        let pp = PartialProducts {
            forward: CVector::from_vec(vec![C64::new(1.0, 0.0), C64::new(2.0, 0.0)]),
            backward: CVector::from_vec(vec![C64::new(3.0, 0.0), C64::new(0.5, 0.0)]),
        };
        let (thetas, gain) = align_layer(&pp);
        assert_eq!(thetas, vec![0.0, 0.0]);
        assert_eq!(gain, 4.0);
    }

    #[test]
    fn alignment_beats_random_diagonals() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for seed in 0..10 {
            let (t, ph, h) = fixture(3, 16, 100 + seed);
            let pp = partial_products(0, 2, &ph, &t, &h);
            let (thetas, gain) = align_layer(&pp);
            assert!((pp.amplitude(&thetas).norm() - gain).abs() <= 1e-12 * gain);
            for _ in 0..1000 {
                let r: Vec<f64> = (0..16).map(|_| rng.random::<f64>() * std::f64::consts::TAU).collect();
                assert!(pp.amplitude(&r).norm() <= gain * (1.0 + 1e-12));
            }
        }
    }

    #[test]
    fn sweeps_are_monotone_and_plateau() {
        let (t, ph, h) = fixture(4, 36, 3);
        let (out, trace) = lbl_ipso(&[Some(&h), Some(&h)], &t, &ph, 200);
        for u in &trace.updates {
            assert_eq!(u.len(), 800);
            assert!(u.windows(2).all(|w| w[1] >= w[0] * (1.0 - 1e-12)));
            // Block ascent keeps creeping; late sweeps must still be far
            // flatter than early ones.
            let early = (u[39] - u[3]) / u[39];
            let late = (u[799] - u[759]) / u[799];
            assert!(late < 1e-2 * early.max(1e-300) || late <= 1e-6, "early {early} late {late}");
        }
        assert!(out.in_range());
        let fin = served_amplitude(0, &out, &t, &h).norm();
        assert!((fin - trace.final_gain(0).unwrap()).abs() <= 1e-10 * fin);
    }

    #[test]
    fn cost_model() {
        assert_eq!(predicted_cost(36, 3, 4, 200), 4.0 * 1296.0 * 3.0 * 16.0 * 200.0);
    }

    proptest! {
        #[test]
        fn identity_holds_for_random_phases(seed in any::<u64>(), layers in 1usize..=4) {
            let (t, ph, h) = fixture(layers, 9, seed);
            let full = served_amplitude(0, &ph, &t, &h);
            for l in 1..=layers {
                let a = partial_products(0, l, &ph, &t, &h).amplitude(ph.layer(0, l - 1));
                prop_assert!((a - full).norm() <= 1e-12 * full.norm().max(1e-300));
            }
        }
    }
}
