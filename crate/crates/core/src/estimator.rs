//! Learned IMU correction and gyro preintegration.
//!
//! The pipeline is: raw IMU sample -> small MLP correction (per sample,
//! strictly causal) -> rotation composed from the corrected rates ->
//! state estimate handed to the controller. The MLP and the
//! preintegration are both generic over the scalar type, so the exact
//! code that runs in the control loop can be replayed on the tape during
//! training.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dynamics::VehicleState;
use crate::math::so3::{self, Mat3, Vec3};
use crate::math::Scalar;
use crate::sensors::ImuSample;

/// Layer widths of a fully connected network with tanh hidden units and a
/// linear output layer.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct MlpSpec {
    pub input: usize,
    pub hidden: Vec<usize>,
    pub output: usize,
}

impl Default for MlpSpec {
    fn default() -> Self {
        MlpSpec {
            input: 6,
            hidden: vec![64, 64, 32],
            output: 6,
        }
    }
}

impl MlpSpec {
    /// (out, in) shape of each weight matrix, head last.
    pub fn layer_dims(&self) -> Vec<(usize, usize)> {
        let mut dims = Vec::new();
        let mut prev = self.input;
        for &h in &self.hidden {
            dims.push((h, prev));
            prev = h;
        }
        dims.push((self.output, prev));
        dims
    }

    pub fn param_count(&self) -> usize {
        self.layer_dims().iter().map(|(o, i)| o * i + o).sum()
    }
}

/// Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) weights and biases for the
/// hidden layers; the output layer starts at exactly zero so an untrained
/// network is the identity correction.
pub fn init_mlp_params(spec: &MlpSpec, seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let dims = spec.layer_dims();
    let mut params = Vec::with_capacity(spec.param_count());
    for (idx, &(out, inp)) in dims.iter().enumerate() {
        let head = idx == dims.len() - 1;
        let bound = 1.0 / (inp as f64).sqrt();
        for _ in 0..out * inp + out {
            if head {
                params.push(0.0);
            } else {
                params.push(rng.gen_range(-bound..bound));
            }
        }
    }
    params
}

/// Evaluate the network on a flat parameter vector. Works on `f64` for
/// the control loop and on tape variables for training.
pub fn mlp_forward<S: Scalar>(spec: &MlpSpec, params: &[S], input: &[S]) -> Vec<S> {
    assert_eq!(params.len(), spec.param_count(), "parameter vector length");
    assert_eq!(input.len(), spec.input, "input width");
    let dims = spec.layer_dims();
    let mut x: Vec<S> = input.to_vec();
    let mut offset = 0;
    for (idx, &(out, inp)) in dims.iter().enumerate() {
        let mut y: Vec<S> = Vec::with_capacity(out);
        for r in 0..out {
            let mut acc = params[offset + out * inp + r].clone(); // bias
            for c in 0..inp {
                acc = acc + params[offset + r * inp + c].clone() * x[c].clone();
            }
            if idx < dims.len() - 1 {
                acc = acc.tanh();
            }
            y.push(acc);
        }
        offset += out * inp + out;
        x = y;
    }
    x
}

/// Feature scaling applied before the network and the raw-units
/// correction added after it.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct FeatureScales {
    pub gyro: f64,
    pub accel: f64,
}

impl Default for FeatureScales {
    fn default() -> Self {
        FeatureScales {
            gyro: 10.0,
            accel: 20.0,
        }
    }
}

/// Per-sample IMU correction: corrected = raw + MLP(raw / scales).
/// Each sample is corrected independently, so the map is causal by
/// construction.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Denoiser {
    pub spec: MlpSpec,
    pub params: Vec<f64>,
    pub scales: FeatureScales,
}

impl Denoiser {
    pub fn new(spec: MlpSpec, seed: u64) -> Self {
        let params = init_mlp_params(&spec, seed);
        Denoiser {
            spec,
            params,
            scales: FeatureScales::default(),
        }
    }

    /// Pass-through network: zero output layer on top of seeded hidden
    /// layers.
    pub fn identity() -> Self {
        Self::new(MlpSpec::default(), 0)
    }

    pub fn correct(&self, s: &ImuSample) -> ImuSample {
        let (gyro, accel) = correct_sample(
            &self.spec,
            &self.params,
            &self.scales,
            &s.gyro,
            &s.accel,
        );
        ImuSample {
            t: s.t,
            gyro,
            accel,
        }
    }
}

/// Generic correction core shared by the `f64` loop and the tape replay.
/// `params` carries the scalar type; raw readings enter as plain numbers
/// because measurements are data, not decision variables.
pub fn correct_sample<S: Scalar>(
    spec: &MlpSpec,
    params: &[S],
    scales: &FeatureScales,
    gyro: &[f64; 3],
    accel: &[f64; 3],
) -> ([S; 3], [S; 3]) {
    let mut input: Vec<S> = Vec::with_capacity(6);
    for k in 0..3 {
        input.push(S::from_f64(gyro[k] / scales.gyro));
    }
    for k in 0..3 {
        input.push(S::from_f64(accel[k] / scales.accel));
    }
    let delta = mlp_forward(spec, params, &input);
    let gyro_out = std::array::from_fn(|k| delta[k].clone().shift(gyro[k]));
    let accel_out = std::array::from_fn(|k| delta[3 + k].clone().shift(accel[k]));
    (gyro_out, accel_out)
}

/// Compose a rotation from rate samples held constant over `dt` each:
/// R_out = R_in * exp(w_0 dt) * ... * exp(w_{n-1} dt).
pub fn preintegrate<S: Scalar>(rot0: &Mat3<S>, rates: &[Vec3<S>], dt: f64) -> Mat3<S> {
    let mut rot = rot0.clone();
    for w in rates {
        let scaled: Vec3<S> = [
            w[0].clone().scale(dt),
            w[1].clone().scale(dt),
            w[2].clone().scale(dt),
        ];
        rot = so3::mat3_mul(&rot, &so3::exp_so3(&scaled));
    }
    rot
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct EstimatorConfig {
    /// Per-axis standard deviation (rad) of each external attitude fix,
    /// applied at episode start and at every periodic re-anchor; stands
    /// in for a motion-capture attitude of roughly 0.06 degree accuracy,
    /// which is what a desk rig under a camera system sees.
    pub anchor_noise_std: f64,
    pub scales: FeatureScales,
}

impl Default for EstimatorConfig {
    fn default() -> Self {
        EstimatorConfig {
            anchor_noise_std: 1e-3,
            scales: FeatureScales::default(),
        }
    }
}

/// Causal attitude estimator: anchored once at episode start, then dead
/// reckoned from corrected gyro samples. Translational states are taken
/// from the reference truth because only attitude is under study here.
#[derive(Clone, Debug)]
pub struct AttitudeEstimator {
    denoiser: Denoiser,
    rot: Mat3<f64>,
    omega: [f64; 3],
}

impl AttitudeEstimator {
    /// Anchor at the true initial attitude perturbed by the configured
    /// anchor noise (a right-multiplied body-frame rotation).
    pub fn new(
        denoiser: Denoiser,
        true_euler0: &[f64; 3],
        anchor_noise_std: f64,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let rot = noisy_fix(true_euler0, anchor_noise_std, rng);
        AttitudeEstimator {
            denoiser,
            rot,
            omega: [0.0; 3],
        }
    }

    /// Replace the dead-reckoned attitude with a fresh external fix. The
    /// rate estimate is untouched; it keeps coming from the gyro.
    pub fn reanchor(&mut self, fix: Mat3<f64>) {
        self.rot = fix;
    }

    /// Feed one raw sample: returns the corrected sample and advances the
    /// attitude by `dt_imu` under the corrected rate.
    pub fn ingest(&mut self, raw: &ImuSample, dt_imu: f64) -> ImuSample {
        let corrected = self.denoiser.correct(raw);
        self.rot = preintegrate(&self.rot, &[corrected.gyro], dt_imu);
        self.omega = corrected.gyro;
        corrected
    }

    pub fn euler(&self) -> [f64; 3] {
        so3::euler_from_rot(&self.rot)
    }

    pub fn rot(&self) -> &Mat3<f64> {
        &self.rot
    }

    pub fn omega(&self) -> [f64; 3] {
        self.omega
    }

    pub fn denoiser(&self) -> &Denoiser {
        &self.denoiser
    }

    /// Full controller state: estimated attitude and rate, translational
    /// components copied from the plant truth.
    pub fn state_estimate(&self, truth: &VehicleState) -> VehicleState {
        VehicleState {
            t: truth.t,
            pos: truth.pos,
            euler: self.euler(),
            vel: truth.vel,
            omega: self.omega,
        }
    }

    /// Angle (rad) of the rotation taking the estimate to the truth.
    pub fn attitude_error(&self, true_euler: &[f64; 3]) -> f64 {
        rotation_angle_between(&self.rot, &so3::rot_from_euler(true_euler))
    }
}

/// A noisy external attitude fix: the true attitude right-multiplied by a
/// small random body-frame rotation.
pub fn noisy_fix(true_euler: &[f64; 3], noise_std: f64, rng: &mut ChaCha8Rng) -> Mat3<f64> {
    let mut rot = so3::rot_from_euler(true_euler);
    if noise_std > 0.0 {
        use rand_distr::{Distribution, Normal};
        let n = Normal::new(0.0, noise_std).unwrap();
        let err: Vec3<f64> = std::array::from_fn(|_| n.sample(rng));
        rot = so3::mat3_mul(&rot, &so3::exp_so3(&err));
    }
    rot
}

/// Geodesic distance on the rotation group: angle of a^T b.
pub fn rotation_angle_between(a: &Mat3<f64>, b: &Mat3<f64>) -> f64 {
    let rel = so3::mat3_mul(&so3::mat3_transpose(a), b);
    let trace = rel[0][0] + rel[1][1] + rel[2][2];
    ((trace - 1.0) / 2.0).clamp(-1.0, 1.0).acos()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dynamics::{step, ControlInput, VehicleParams, VehicleState};
    use crate::sensors::{truth_from_state, ImuConfig, ImuSensor};

    #[test]
    fn zero_head_network_is_identity() {
        let d = Denoiser::identity();
        let s = ImuSample {
            t: 0.5,
            gyro: [0.3, -0.1, 0.02],
            accel: [0.1, 0.2, 9.9],
        };
        let c = d.correct(&s);
        assert_eq!(c.gyro, s.gyro);
        assert_eq!(c.accel, s.accel);
    }

    #[test]
    fn param_count_matches_layout() {
        let spec = MlpSpec::default();
        // 6->64->64->32->6 with biases.
        let expect = (64 * 6 + 64) + (64 * 64 + 64) + (32 * 64 + 32) + (6 * 32 + 6);
        assert_eq!(spec.param_count(), expect);
        assert_eq!(init_mlp_params(&spec, 3).len(), expect);
    }

    #[test]
    fn head_initializes_to_zero_and_hidden_does_not() {
        let spec = MlpSpec::default();
        let p = init_mlp_params(&spec, 9);
        let head_len = 6 * 32 + 6;
        let (hidden, head) = p.split_at(p.len() - head_len);
        assert!(head.iter().all(|v| *v == 0.0));
        assert!(hidden.iter().any(|v| *v != 0.0));
        let bound = 1.0 / 6.0f64.sqrt();
        assert!(hidden[..64 * 6].iter().all(|v| v.abs() < bound));
    }

    #[test]
    fn forward_matches_hand_computed_two_layer_net() {
        let spec = MlpSpec {
            input: 2,
            hidden: vec![2],
            output: 1,
        };
        // W1 = [[1, 2], [0, -1]], b1 = [0.5, 0], W2 = [[1, 1]], b2 = [-0.25]
        let params = vec![1.0, 2.0, 0.0, -1.0, 0.5, 0.0, 1.0, 1.0, -0.25];
        let out = mlp_forward(&spec, &params, &[0.1f64, 0.2]);
        let h1 = (0.1 + 0.4 + 0.5f64).tanh();
        let h2 = (-0.2f64).tanh();
        assert!((out[0] - (h1 + h2 - 0.25)).abs() < 1e-15);
    }

    #[test]
    fn forward_agrees_between_f64_and_tape() {
        use crate::math::{Tape, Var};
        let spec = MlpSpec {
            input: 6,
            hidden: vec![8, 8],
            output: 6,
        };
        let mut params = init_mlp_params(&spec, 4);
        // Give the head nonzero values so the tape has real work.
        for (k, p) in params.iter_mut().enumerate().rev().take(6 * 8 + 6) {
            *p = 0.01 * ((k % 13) as f64 - 6.0);
        }
        let input = [0.03, -0.01, 0.002, 0.005, 0.01, 0.49];
        let plain = mlp_forward(&spec, &params, &input);

        let tape = Tape::new();
        let pv: Vec<Var> = params.iter().map(|p| tape.var(*p)).collect();
        let iv: Vec<Var> = input.iter().map(|x| Var::constant(*x)).collect();
        let taped = mlp_forward(&spec, &pv, &iv);
        for (a, b) in plain.iter().zip(&taped) {
            assert!((a - b.value()).abs() < 1e-14);
        }
    }

    #[test]
    fn correction_is_causal_per_sample() {
        let mut d = Denoiser::new(MlpSpec::default(), 2);
        // Non-identity head so corrections actually depend on the input.
        let n = d.params.len();
        for p in d.params[n - 198..].iter_mut() {
            *p = 0.05;
        }
        let mk = |g0: f64| ImuSample {
            t: 0.0,
            gyro: [g0, 0.1, -0.2],
            accel: [0.0, 0.0, 9.81],
        };
        let stream_a = [mk(0.1), mk(0.2), mk(0.3)];
        let stream_b = [mk(0.1), mk(0.2), mk(9.9)];
        for k in 0..2 {
            let ca = d.correct(&stream_a[k]);
            let cb = d.correct(&stream_b[k]);
            assert_eq!(ca.gyro, cb.gyro, "sample {k} saw the future");
            assert_eq!(ca.accel, cb.accel);
        }
        let last_a = d.correct(&stream_a[2]);
        let last_b = d.correct(&stream_b[2]);
        assert_ne!(last_a.gyro, last_b.gyro);
    }

    #[test]
    fn constant_rate_preintegration_matches_closed_form() {
        let w = [0.3, -0.2, 0.1];
        let dt = 0.005;
        let n = 200; // one second
        let eye: Mat3<f64> = [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]];
        let rates = vec![w; n];
        let got = preintegrate(&eye, &rates, dt);
        let expect = so3::exp_so3(&[w[0] * 1.0, w[1] * 1.0, w[2] * 1.0]);
        for r in 0..3 {
            for c in 0..3 {
                assert!(
                    (got[r][c] - expect[r][c]).abs() < 1e-9,
                    "entry ({r},{c})"
                );
            }
        }
    }

    #[test]
    fn noise_free_round_trip_recovers_attitude() {
        // Fly the true plant for one second under a gentle torque wobble,
        // sample a perfect IMU at the midpoint of every 5 ms interval and
        // preintegrate; the recovered attitude must match the truth to
        // 1e-6 rad.
        let p = VehicleParams::default();
        let mut state = VehicleState::hover();
        state.euler = [0.05, -0.03, 0.1];
        let plant_dt = 5e-4;
        let imu_dt = 5e-3;
        let mut imu = ImuSensor::new(ImuConfig::noiseless(), 0);
        let rot0 = so3::rot_from_euler(&state.euler);
        let mut rates: Vec<Vec3<f64>> = Vec::new();
        let torque = |t: f64| {
            [
                2e-3 * (3.0 * t).sin(),
                -1.5e-3 * (2.0 * t).cos(),
                1e-3 * (1.0 * t).sin(),
            ]
        };
        for k in 0..2000 {
            let t = k as f64 * plant_dt;
            let u = ControlInput {
                thrust: p.mass * p.gravity,
                torque: torque(t),
            };
            // Exact midpoint of each 5 ms window, taken from the fine
            // grid; midpoint sampling keeps the rectangle rule second
            // order so the composition itself is what gets tested.
            if k % 10 == 5 {
                let truth = truth_from_state(&state, &u, &p, [0.0; 3]);
                let s = imu.sample(&truth);
                rates.push(s.gyro);
            }
            state = step(&state, &u, &p, plant_dt).unwrap();
        }
        assert_eq!(rates.len(), 200);
        let recovered = preintegrate(&rot0, &rates, imu_dt);
        let err = rotation_angle_between(&recovered, &so3::rot_from_euler(&state.euler));
        assert!(err < 1e-6, "round-trip attitude error {err:.3e} rad");
    }

    #[test]
    fn estimator_tracks_true_attitude_without_noise() {
        let p = VehicleParams::default();
        let mut state = VehicleState::hover();
        state.euler = [0.1, 0.05, 0.0];
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut est = AttitudeEstimator::new(Denoiser::identity(), &state.euler, 0.0, &mut rng);
        let mut imu = ImuSensor::new(ImuConfig::noiseless(), 0);
        let plant_dt = 1e-3;
        let mut omega_at_last_sample = [0.0; 3];
        for k in 0..2000 {
            let u = ControlInput {
                thrust: p.mass * p.gravity,
                torque: [1e-3, -1e-3, 5e-4],
            };
            if k % 5 == 4 {
                let truth = truth_from_state(&state, &u, &p, [0.0; 3]);
                let raw = imu.sample(&truth);
                est.ingest(&raw, 5e-3);
                omega_at_last_sample = state.omega;
            }
            state = step(&state, &u, &p, plant_dt).unwrap();
        }
        // Causal end-of-interval integration carries a small first-order
        // lag; with these gentle rates it stays under a couple millirad.
        let err = est.attitude_error(&state.euler);
        assert!(err < 2e-3, "tracking error {err:.3e} rad");
        // The noiseless identity pipeline reproduces the sampled rate
        // exactly.
        assert_eq!(est.omega(), omega_at_last_sample);
    }

    #[test]
    fn anchor_noise_is_deterministic_per_seed() {
        let euler = [0.2, -0.1, 0.3];
        let draw = |seed: u64| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let est = AttitudeEstimator::new(Denoiser::identity(), &euler, 6e-3, &mut rng);
            est.euler()
        };
        assert_eq!(draw(5), draw(5));
        assert_ne!(draw(5), draw(6));
        let err = {
            let mut rng = ChaCha8Rng::seed_from_u64(5);
            let est = AttitudeEstimator::new(Denoiser::identity(), &euler, 6e-3, &mut rng);
            est.attitude_error(&euler)
        };
        assert!(err > 1e-4 && err < 0.05, "anchor error {err:.3e}");
    }

    #[test]
    fn denoiser_serde_round_trip_is_exact() {
        let d = Denoiser::new(MlpSpec::default(), 17);
        let json = serde_json::to_string(&d).unwrap();
        let back: Denoiser = serde_json::from_str(&json).unwrap();
        assert_eq!(d.params.len(), back.params.len());
        for (a, b) in d.params.iter().zip(&back.params) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
        assert_eq!(d.spec, back.spec);
    }
}
