//! Self-supervised training of the IMU denoiser and the controller's
//! physical parameters.
//!
//! Each training step takes one recorded control period and builds two
//! views of the next attitude and rate on the tape. The prediction side
//! re-solves the MPC at the recorded state estimate, replays it with
//! tape-variable parameters, and advances the (detached) estimate one
//! control interval through the dynamics. The measurement side corrects
//! the raw IMU window with the network and pre-integrates it from the
//! (detached) previous attitude estimate. Their mismatch is the loss;
//! the network parameters learn through the measurement side, the mass
//! and inertia through the prediction side. No ground truth enters.
//!
//! Two quantities are invisible to that per-window mismatch and get
//! their own terms. Mass: the attitude and rate comparison never touches
//! it, so an accelerometer consistency penalty ties the corrected
//! specific force to thrust over estimated mass, with the executed
//! thrust entering as recorded data. Constant gyro bias: prediction and
//! measurement both inherit it from the estimator state, so it cancels
//! within a window; the innovation accumulated between two external
//! attitude fixes (an anchor span) is compared instead, where both
//! endpoints are bias-free data.

use crate::dynamics::{step_s, VehicleParams, CONTROL_DIM, STATE_DIM};
use crate::estimator::{
    correct_sample, preintegrate, rotation_angle_between, Denoiser, FeatureScales, MlpSpec,
};
use crate::math::so3::{self, Mat3, Vec3};
use crate::math::{Scalar, Tape, Var};
use crate::mpc::{ilqr_solve, record_step_on_tape, MpcProblem, QuadrotorModel};
use crate::sim::{build_closed_loop, AnchorSpan, ControlStepRecord, EpisodeRecord, EpisodeSetup, SimError};
use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use serde::{Deserialize, Serialize};
use std::io::{Read, Write};
use std::path::Path;

/// Squared geodesic distance between two rotations, generic over the
/// scalar type. Computed as the squared rotation angle of a^T b; the
/// explicit small-angle branch keeps the derivative finite when the two
/// rotations coincide (the square root in the angle is not differentiable
/// at zero).
pub fn rotation_gap_sq<S: Scalar>(a: &Mat3<S>, b: &Mat3<S>) -> S {
    let rel = so3::mat3_mul(&so3::mat3_transpose(a), b);
    let wx = (rel[2][1].clone() - rel[1][2].clone()).scale(0.5);
    let wy = (rel[0][2].clone() - rel[2][0].clone()).scale(0.5);
    let wz = (rel[1][0].clone() - rel[0][1].clone()).scale(0.5);
    let s2 = wx.clone() * wx + wy.clone() * wy + wz.clone() * wz;
    // |w| = sin(angle), so s2 already is angle^2 to fourth order.
    if s2.value() < 1e-12 {
        return s2;
    }
    let cos = (rel[0][0].clone() + rel[1][1].clone() + rel[2][2].clone())
        .shift(-1.0)
        .scale(0.5);
    let angle = s2.sqrt().atan2(&cos);
    angle.clone() * angle
}

/// Adam with bias correction; the single optimizer state for the network.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    m: Vec<f64>,
    v: Vec<f64>,
    t: u64,
}

impl Adam {
    pub fn new(lr: f64, dim: usize) -> Self {
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            m: vec![0.0; dim],
            v: vec![0.0; dim],
            t: 0,
        }
    }

    pub fn step(&mut self, params: &mut [f64], grads: &[f64]) {
        assert_eq!(params.len(), grads.len());
        assert_eq!(params.len(), self.m.len());
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for i in 0..params.len() {
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * grads[i];
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * grads[i] * grads[i];
            let mhat = self.m[i] / bc1;
            let vhat = self.v[i] / bc2;
            params[i] -= self.lr * mhat / (vhat.sqrt() + self.eps);
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainerConfig {
    /// Total gradient steps; one recorded control period each.
    pub steps: usize,
    /// Tilt magnitudes the training episodes cycle through, degrees.
    /// Each episode starts at roll = a, pitch = -a, yaw = 1.5 a so every
    /// torque channel sees excitation; an axis that never feels torque
    /// would leave its inertia unidentifiable. Zero belongs to the
    /// evaluation grid but not here: a hover-only episode carries no
    /// torque signal and just dilutes the budget.
    pub initial_angles_deg: Vec<f64>,
    /// Template for training episodes; `seed` is the base, each episode
    /// adds its index.
    pub episode: EpisodeSetup,
    /// The plant the episodes run on.
    pub true_params: VehicleParams,
    /// Mass and inertia start at this multiple of the true values.
    pub initial_param_scale: f64,
    pub mlp_seed: u64,
    pub mlp_lr: f64,
    pub mass_lr: f64,
    /// Inertia sees a much weaker loss signal than mass (only transient
    /// control periods carry torque), so it gets its own, larger rate.
    pub inertia_lr: f64,
    /// Per-step cap on how far any log-parameter may move; keeps a single
    /// saturated-torque period from flinging the estimate.
    pub max_log_step: f64,
    /// Physical-parameter step sizes shrink as 1 / sqrt(1 + step / this).
    /// The per-period gradients are noisy (attitude jitter leaks into the
    /// gyro targets), so a constant rate leaves the estimate rattling in
    /// a noise ball whose radius scales with the rate; annealing lets it
    /// settle. Zero disables the decay.
    pub lr_decay_steps: f64,
    /// Weight on the anchor-span innovation: the mismatch between the
    /// attitude dead-reckoned across a full span of corrected samples and
    /// the external fix that ended the span. The per-window terms cannot
    /// see a constant gyro bias (the detached estimate on the prediction
    /// side carries the same bias, so it cancels), while over a span both
    /// endpoints are external data and the bias integrates into a visible
    /// rotation. The weight is large because each span's per-sample
    /// gradient is tiny (one window contributes only dt worth of angle)
    /// and it must beat the regularizer's pull toward the raw reading.
    pub anchor_weight: f64,
    /// Weight of the accelerometer consistency term.
    pub accel_weight: f64,
    /// Weight on the squared magnitude of the network's corrections.
    /// Anchors the corrected measurements to the raw data; without it the
    /// network can rescale the gyro until the estimate agrees with a
    /// wrong-parameter prediction, which minimizes the loss while ruining
    /// the estimator.
    pub correction_reg: f64,
    pub validation_every: usize,
    pub validation_seeds: Vec<u64>,
    pub validation_angle_deg: f64,
}

impl Default for TrainerConfig {
    fn default() -> Self {
        TrainerConfig {
            steps: 2000,
            initial_angles_deg: vec![10.0, 15.0, 20.0],
            episode: EpisodeSetup {
                seed: 100,
                ..EpisodeSetup::default()
            },
            true_params: VehicleParams::default(),
            initial_param_scale: 1.5,
            mlp_seed: 11,
            mlp_lr: 1e-3,
            mass_lr: 1e-2,
            inertia_lr: 0.15,
            max_log_step: 0.3,
            lr_decay_steps: 600.0,
            anchor_weight: 200.0,
            accel_weight: 0.1,
            correction_reg: 0.1,
            validation_every: 200,
            validation_seeds: vec![9001, 9002, 9003],
            validation_angle_deg: 15.0,
        }
    }
}

/// One line of training telemetry.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainStepRecord {
    pub step: usize,
    pub episode: usize,
    pub angle_deg: f64,
    /// Time of the consumed control period within its episode.
    pub t: f64,
    pub loss: f64,
    /// sqrt of the attitude and rate mismatch, the reported metric.
    pub u_metric: f64,
    pub att_gap_sq: f64,
    pub rate_gap_sq: f64,
    pub accel_loss: f64,
    pub reg_loss: f64,
    /// Mismatch of the fixed-input prediction, the identification term.
    pub id_loss: f64,
    pub mass: f64,
    pub inertia: [f64; 3],
    pub phi_grad_norm: f64,
    pub theta_grad_norm: f64,
    pub solver_ok: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ValidationRecord {
    pub step: usize,
    pub median_u: f64,
    pub imu_rmse_raw: f64,
    pub imu_rmse_corrected: f64,
    pub diverged_runs: usize,
}

pub fn write_history_csv(path: &Path, history: &[TrainStepRecord]) -> std::io::Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(
        f,
        "step,episode,angle_deg,t,loss,u_metric,att_gap_sq,rate_gap_sq,accel_loss,reg_loss,\
         id_loss,mass,jx,jy,jz,phi_grad_norm,theta_grad_norm,solver_ok"
    )?;
    for r in history {
        writeln!(
            f,
            "{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{}",
            r.step,
            r.episode,
            r.angle_deg,
            r.t,
            r.loss,
            r.u_metric,
            r.att_gap_sq,
            r.rate_gap_sq,
            r.accel_loss,
            r.reg_loss,
            r.id_loss,
            r.mass,
            r.inertia[0],
            r.inertia[1],
            r.inertia[2],
            r.phi_grad_norm,
            r.theta_grad_norm,
            r.solver_ok
        )?;
    }
    f.flush()
}

pub fn write_validation_csv(path: &Path, records: &[ValidationRecord]) -> std::io::Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(f, "step,median_u,imu_rmse_raw,imu_rmse_corrected,diverged_runs")?;
    for r in records {
        writeln!(
            f,
            "{},{},{},{},{}",
            r.step, r.median_u, r.imu_rmse_raw, r.imu_rmse_corrected, r.diverged_runs
        )?;
    }
    f.flush()
}

const CHECKPOINT_MAGIC: &[u8; 8] = b"DNCKPT01";

/// Everything needed to rebuild the trained denoiser and the learned
/// vehicle parameters.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Checkpoint {
    pub version: u32,
    pub step: usize,
    /// Validation metric this checkpoint was selected on; NaN if it was
    /// never validated.
    pub metric: f64,
    pub spec: MlpSpec,
    pub scales: FeatureScales,
    pub phi: Vec<f64>,
    pub log_theta: [f64; 4],
    pub gravity: f64,
}

impl Checkpoint {
    pub fn denoiser(&self) -> Denoiser {
        Denoiser {
            spec: self.spec.clone(),
            params: self.phi.clone(),
            scales: self.scales,
        }
    }

    pub fn vehicle_params(&self) -> VehicleParams {
        VehicleParams {
            mass: self.log_theta[0].exp(),
            inertia: [
                self.log_theta[1].exp(),
                self.log_theta[2].exp(),
                self.log_theta[3].exp(),
            ],
            gravity: self.gravity,
        }
    }

    pub fn save_json(&self, path: &Path) -> std::io::Result<()> {
        let text = serde_json::to_string_pretty(self)?;
        std::fs::write(path, text)
    }

    pub fn load_json(path: &Path) -> std::io::Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Ok(serde_json::from_str(&text)?)
    }

    pub fn save_binary(&self, path: &Path) -> std::io::Result<()> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        f.write_all(CHECKPOINT_MAGIC)?;
        f.write_u32::<LittleEndian>(self.version)?;
        f.write_u64::<LittleEndian>(self.step as u64)?;
        f.write_f64::<LittleEndian>(self.metric)?;
        f.write_u32::<LittleEndian>(self.spec.input as u32)?;
        f.write_u32::<LittleEndian>(self.spec.hidden.len() as u32)?;
        for &h in &self.spec.hidden {
            f.write_u32::<LittleEndian>(h as u32)?;
        }
        f.write_u32::<LittleEndian>(self.spec.output as u32)?;
        f.write_f64::<LittleEndian>(self.scales.gyro)?;
        f.write_f64::<LittleEndian>(self.scales.accel)?;
        f.write_u64::<LittleEndian>(self.phi.len() as u64)?;
        for &p in &self.phi {
            f.write_f64::<LittleEndian>(p)?;
        }
        for &l in &self.log_theta {
            f.write_f64::<LittleEndian>(l)?;
        }
        f.write_f64::<LittleEndian>(self.gravity)?;
        f.flush()
    }

    pub fn load_binary(path: &Path) -> std::io::Result<Self> {
        let bad = |what: &str| std::io::Error::new(std::io::ErrorKind::InvalidData, what.to_string());
        let mut f = std::io::BufReader::new(std::fs::File::open(path)?);
        let mut magic = [0u8; 8];
        f.read_exact(&mut magic)?;
        if &magic != CHECKPOINT_MAGIC {
            return Err(bad("not a checkpoint file"));
        }
        let version = f.read_u32::<LittleEndian>()?;
        if version != 1 {
            return Err(bad("unsupported checkpoint version"));
        }
        let step = f.read_u64::<LittleEndian>()? as usize;
        let metric = f.read_f64::<LittleEndian>()?;
        let input = f.read_u32::<LittleEndian>()? as usize;
        let n_hidden = f.read_u32::<LittleEndian>()? as usize;
        if n_hidden > 64 {
            return Err(bad("implausible hidden layer count"));
        }
        let mut hidden = Vec::with_capacity(n_hidden);
        for _ in 0..n_hidden {
            hidden.push(f.read_u32::<LittleEndian>()? as usize);
        }
        let output = f.read_u32::<LittleEndian>()? as usize;
        let spec = MlpSpec {
            input,
            hidden,
            output,
        };
        let gyro = f.read_f64::<LittleEndian>()?;
        let accel = f.read_f64::<LittleEndian>()?;
        let n_phi = f.read_u64::<LittleEndian>()? as usize;
        if n_phi != spec.param_count() {
            return Err(bad("parameter count does not match the layer sizes"));
        }
        let mut phi = Vec::with_capacity(n_phi);
        for _ in 0..n_phi {
            phi.push(f.read_f64::<LittleEndian>()?);
        }
        let mut log_theta = [0.0; 4];
        for l in &mut log_theta {
            *l = f.read_f64::<LittleEndian>()?;
        }
        let gravity = f.read_f64::<LittleEndian>()?;
        Ok(Checkpoint {
            version,
            step,
            metric,
            spec,
            scales: FeatureScales { gyro, accel },
            phi,
            log_theta,
            gravity,
        })
    }
}

pub struct TrainOutcome {
    pub best: Checkpoint,
    pub fin: Checkpoint,
    pub history: Vec<TrainStepRecord>,
    pub validations: Vec<ValidationRecord>,
}

struct StepResult {
    att_gap_sq: f64,
    rate_gap_sq: f64,
    accel_loss: f64,
    reg_loss: f64,
    id_loss: f64,
    phi_grads: Vec<f64>,
    theta_grads: [f64; 4],
}

/// Episode start attitude for a tilt magnitude in degrees; spreads the
/// tilt across all three axes with distinct signs and ratios. Yaw gets
/// the largest offset: it has no gravity component to fight (so a big
/// angle is safe) and its corrective torques are otherwise the smallest,
/// which would starve the yaw inertia of learning signal.
fn tilt_euler(angle_deg: f64) -> [f64; 3] {
    [
        angle_deg.to_radians(),
        (-angle_deg).to_radians(),
        (1.5 * angle_deg).to_radians(),
    ]
}

fn params_from_log(log_theta: &[f64; 4], gravity: f64) -> VehicleParams {
    VehicleParams {
        mass: log_theta[0].exp(),
        inertia: [
            log_theta[1].exp(),
            log_theta[2].exp(),
            log_theta[3].exp(),
        ],
        gravity,
    }
}

/// One bilevel gradient evaluation on a recorded control period. Returns
/// None if the inner solve fails at the recorded estimate, which the
/// caller treats as a skipped update.
fn train_step(
    spec: &MlpSpec,
    scales: &FeatureScales,
    phi: &[f64],
    log_theta: &[f64; 4],
    gravity: f64,
    accel_weight: f64,
    correction_reg: f64,
    rec: &ControlStepRecord,
    control_dt: f64,
    imu_dt: f64,
) -> Option<StepResult> {
    let params_hat = params_from_log(log_theta, gravity);
    let model = QuadrotorModel::new(&params_hat);
    let problem = MpcProblem::attitude_default(&params_hat);
    let warm = vec![rec.u_exec.to_vec(); problem.horizon];
    let sol = ilqr_solve(&model, &problem, &rec.x_est, &warm).ok()?;

    let tape = Tape::new();
    let log_vars: [Var; 4] = std::array::from_fn(|i| tape.var(log_theta[i]));
    let mass_v = log_vars[0].exp();
    let inertia_v: [Var; 3] = std::array::from_fn(|i| log_vars[1 + i].exp());
    let model_v = QuadrotorModel {
        mass: mass_v.clone(),
        inertia: inertia_v.clone(),
        gravity,
    };
    let x_ref_v: Vec<Var> = problem.x_ref.iter().map(|v| Var::constant(*v)).collect();
    let u_ref_v = vec![
        mass_v.clone().scale(gravity),
        Var::constant(0.0),
        Var::constant(0.0),
        Var::constant(0.0),
    ];
    let problem_v = problem.clone().lift(x_ref_v, u_ref_v);
    let (_, us_v) = record_step_on_tape(&model_v, &problem_v, &rec.x_est, &sol).ok()?;
    let u0: [Var; CONTROL_DIM] = us_v[0].clone().try_into().expect("control is 4 long");

    // Prediction side: advance the detached estimate one control interval
    // under the replayed control and the estimated physics.
    let x_det: [Var; STATE_DIM] = std::array::from_fn(|i| Var::constant(rec.x_est[i]));
    let x_pred = step_s(&x_det, &u0, &mass_v, &inertia_v, gravity, control_dt).ok()?;
    let rot_pred = so3::rot_from_euler(&[
        x_pred[3].clone(),
        x_pred[4].clone(),
        x_pred[5].clone(),
    ]);

    // Second prediction with the recorded executed control held as data.
    // The replayed control above scales its torques with the inertia
    // estimate, which cancels the inertia sensitivity of tau/J almost
    // exactly; stepping the same model with the fixed executed input keeps
    // the direct 1/J path alive and makes the inertias identifiable.
    let u_exec_c: [Var; CONTROL_DIM] = std::array::from_fn(|i| Var::constant(rec.u_exec[i]));
    let x_pred_id = step_s(&x_det, &u_exec_c, &mass_v, &inertia_v, gravity, control_dt).ok()?;
    let rot_pred_id = so3::rot_from_euler(&[
        x_pred_id[3].clone(),
        x_pred_id[4].clone(),
        x_pred_id[5].clone(),
    ]);

    // Measurement side: correct the window and pre-integrate from the
    // detached previous attitude estimate.
    let phi_vars: Vec<Var> = phi.iter().map(|p| tape.var(*p)).collect();
    let rot0: Mat3<Var> =
        std::array::from_fn(|i| std::array::from_fn(|j| Var::constant(rec.rot_est[i][j])));
    let mut gyros: Vec<Vec3<Var>> = Vec::with_capacity(rec.imu_window.len());
    let mut accel_terms: Vec<Var> = Vec::new();
    let mut reg_terms: Vec<Var> = Vec::new();
    for s in &rec.imu_window {
        let (g_corr, a_corr) = correct_sample(spec, &phi_vars, scales, &s.gyro, &s.accel);
        // Corrections are deviations from the raw reading; keep them
        // small so the corrected stream stays anchored to the data.
        for k in 0..3 {
            let dg = g_corr[k].clone().shift(-s.gyro[k]);
            reg_terms.push(dg.clone() * dg);
            let da = a_corr[k].clone().shift(-s.accel[k]);
            reg_terms.push(da.clone() * da);
        }
        // The accelerometer should read thrust over mass along body z in
        // these wind-free episodes. The executed thrust is data; the mass
        // estimate is the variable under test.
        let target_z = mass_v.clone().recip().scale(rec.u_exec[0]);
        let [ax, ay, az] = a_corr;
        accel_terms.push(ax.clone() * ax);
        accel_terms.push(ay.clone() * ay);
        let dz = az - target_z;
        accel_terms.push(dz.clone() * dz);
        gyros.push(g_corr);
    }
    let rot_next = preintegrate(&rot0, &gyros, imu_dt);
    let omega_next = gyros.last().expect("window is never empty");

    let att_gap = rotation_gap_sq(&rot_pred, &rot_next);
    let mut rate_gap = Var::constant(0.0);
    for k in 0..3 {
        let d = x_pred[9 + k].clone() - omega_next[k].clone();
        rate_gap = rate_gap + d.clone() * d;
    }
    let mut id_loss = rotation_gap_sq(&rot_pred_id, &rot_next);
    for k in 0..3 {
        let d = x_pred_id[9 + k].clone() - omega_next[k].clone();
        id_loss = id_loss + d.clone() * d;
    }
    let mut accel_loss = Var::constant(0.0);
    for term in accel_terms {
        accel_loss = accel_loss + term;
    }
    let mut reg_loss = Var::constant(0.0);
    for term in reg_terms {
        reg_loss = reg_loss + term;
    }
    let total = att_gap.clone()
        + rate_gap.clone()
        + id_loss.clone()
        + accel_loss.clone().scale(accel_weight)
        + reg_loss.clone().scale(correction_reg);
    if !total.value().is_finite() {
        return None;
    }
    let grads = tape.backward(&total);
    Some(StepResult {
        att_gap_sq: att_gap.value(),
        rate_gap_sq: rate_gap.value(),
        accel_loss: accel_loss.value(),
        reg_loss: reg_loss.value(),
        id_loss: id_loss.value(),
        phi_grads: phi_vars.iter().map(|v| grads.wrt(v)).collect(),
        theta_grads: std::array::from_fn(|i| grads.wrt(&log_vars[i])),
    })
}

/// Innovation of one anchor span: dead-reckon the corrected samples of
/// the whole stretch from the fix that opened it and compare against the
/// fix that closed it. Returns the squared innovation angle and its
/// gradient in the network parameters.
fn anchor_step(
    spec: &MlpSpec,
    scales: &FeatureScales,
    phi: &[f64],
    episode: &EpisodeRecord,
    span: &AnchorSpan,
) -> Option<(f64, Vec<f64>)> {
    let steps = episode.steps.get(span.start..span.end)?;
    if steps.is_empty() || steps.iter().any(|s| s.imu_window.is_empty()) {
        return None;
    }
    let tape = Tape::new();
    let phi_vars: Vec<Var> = phi.iter().map(|p| tape.var(*p)).collect();
    let rot0: Mat3<Var> = std::array::from_fn(|i| {
        std::array::from_fn(|j| Var::constant(steps[0].rot_est[i][j]))
    });
    let mut gyros: Vec<Vec3<Var>> = Vec::new();
    for rec in steps {
        for s in &rec.imu_window {
            let (g, _) = correct_sample(spec, &phi_vars, scales, &s.gyro, &s.accel);
            gyros.push(g);
        }
    }
    let rot_end = preintegrate(&rot0, &gyros, episode.imu_dt);
    let fix: Mat3<Var> =
        std::array::from_fn(|i| std::array::from_fn(|j| Var::constant(span.rot_fix[i][j])));
    let gap = rotation_gap_sq(&rot_end, &fix);
    if !gap.value().is_finite() {
        return None;
    }
    let grads = tape.backward(&gap);
    Some((gap.value(), phi_vars.iter().map(|v| grads.wrt(v)).collect()))
}

/// Closed-loop validation at the current parameters: runs each held-out
/// seed, scores every control period by the prediction-measurement
/// mismatch in plain arithmetic, and reports the median.
fn validate(
    cfg: &TrainerConfig,
    spec: &MlpSpec,
    scales: &FeatureScales,
    phi: &[f64],
    log_theta: &[f64; 4],
) -> ValidationRecord {
    let params_hat = params_from_log(log_theta, cfg.true_params.gravity);
    let denoiser = Denoiser {
        spec: spec.clone(),
        params: phi.to_vec(),
        scales: *scales,
    };
    let mut us: Vec<f64> = Vec::new();
    let mut sq_raw = 0.0;
    let mut sq_corr = 0.0;
    let mut n_samples = 0usize;
    let mut diverged_runs = 0usize;
    for &seed in &cfg.validation_seeds {
        let mut setup = cfg.episode.clone();
        setup.initial_euler = tilt_euler(cfg.validation_angle_deg);
        setup.seed = seed;
        let mut loop_ = match build_closed_loop(
            &setup,
            &cfg.true_params,
            &params_hat,
            denoiser.clone(),
        ) {
            Ok(l) => l,
            Err(_) => {
                diverged_runs += 1;
                continue;
            }
        };
        let (log, episode) = match loop_.run_recorded(setup.duration) {
            Ok(out) => out,
            Err(_) => {
                diverged_runs += 1;
                continue;
            }
        };
        if log.diverged {
            diverged_runs += 1;
        }
        sq_raw += log.imu_sq_raw;
        sq_corr += log.imu_sq_corr;
        n_samples += log.imu_samples;
        for rec in &episode.steps {
            let pred = match step_s(
                &rec.x_est,
                &rec.u_exec,
                &params_hat.mass,
                &params_hat.inertia,
                params_hat.gravity,
                episode.control_dt,
            ) {
                Ok(p) => p,
                Err(_) => continue,
            };
            let rot_pred = so3::rot_from_euler(&[pred[3], pred[4], pred[5]]);
            let mut gyros: Vec<Vec3<f64>> = Vec::with_capacity(rec.imu_window.len());
            for s in &rec.imu_window {
                gyros.push(denoiser.correct(s).gyro);
            }
            let rot_next = preintegrate(&rec.rot_est, &gyros, episode.imu_dt);
            let angle = rotation_angle_between(&rot_pred, &rot_next);
            let w_next = gyros.last().unwrap();
            let mut sq = angle * angle;
            for k in 0..3 {
                sq += (pred[9 + k] - w_next[k]).powi(2);
            }
            if sq.is_finite() {
                us.push(sq.sqrt());
            }
        }
    }
    let median_u = if us.is_empty() {
        f64::INFINITY
    } else {
        us.sort_by(|a, b| a.partial_cmp(b).unwrap());
        us[us.len() / 2]
    };
    let rmse = |sq: f64| {
        if n_samples == 0 {
            f64::INFINITY
        } else {
            (sq / (3.0 * n_samples as f64)).sqrt()
        }
    };
    ValidationRecord {
        step: 0,
        median_u,
        imu_rmse_raw: rmse(sq_raw),
        imu_rmse_corrected: rmse(sq_corr),
        diverged_runs,
    }
}

/// The full loop: simulate an episode at the current parameters, consume
/// its control periods as gradient steps, validate on held-out seeds at
/// the configured cadence, and keep the checkpoint with the best median
/// mismatch.
pub fn run_training(cfg: &TrainerConfig) -> Result<TrainOutcome, SimError> {
    let spec = MlpSpec::default();
    let scales = FeatureScales::default();
    let mut phi = crate::estimator::init_mlp_params(&spec, cfg.mlp_seed);
    let start = cfg.true_params.scaled(cfg.initial_param_scale);
    let mut log_theta = [
        start.mass.ln(),
        start.inertia[0].ln(),
        start.inertia[1].ln(),
        start.inertia[2].ln(),
    ];
    let mut adam = Adam::new(cfg.mlp_lr, phi.len());
    let mut history: Vec<TrainStepRecord> = Vec::with_capacity(cfg.steps);
    let mut validations: Vec<ValidationRecord> = Vec::new();

    let make_checkpoint = |step: usize, metric: f64, phi: &[f64], log_theta: &[f64; 4]| Checkpoint {
        version: 1,
        step,
        metric,
        spec: spec.clone(),
        scales,
        phi: phi.to_vec(),
        log_theta: *log_theta,
        gravity: cfg.true_params.gravity,
    };
    let mut best: Option<Checkpoint> = None;

    // Tail average of the physical parameters. The per-period gradient
    // noise leaves the live estimate orbiting the optimum; the mean over
    // the last quarter of training sits much closer to the center.
    let avg_start = cfg.steps - cfg.steps / 4;
    let mut avg_log_theta = [0.0f64; 4];
    let mut avg_count = 0usize;

    let mut step = 0usize;
    let mut episode_idx = 0usize;
    // A couple of stalled episodes in a row would mean every solve fails;
    // bail out instead of spinning.
    let mut barren_episodes = 0usize;
    while step < cfg.steps {
        let angle = cfg.initial_angles_deg[episode_idx % cfg.initial_angles_deg.len()];
        let mut setup = cfg.episode.clone();
        setup.initial_euler = tilt_euler(angle);
        // Alternate the sign of each axis across episodes. A fixed sign
        // pattern makes the gyroscopic coupling products keep one sign
        // through every transient, which slowly biases the coupled
        // inertia estimates; cycling the eight sign combinations cancels
        // that in the average.
        for (i, e) in setup.initial_euler.iter_mut().enumerate() {
            if (episode_idx >> i) & 1 == 1 {
                *e = -*e;
            }
        }
        setup.seed = cfg.episode.seed.wrapping_add(episode_idx as u64);
        let params_hat = params_from_log(&log_theta, cfg.true_params.gravity);
        let denoiser = Denoiser {
            spec: spec.clone(),
            params: phi.clone(),
            scales,
        };
        let mut loop_ = build_closed_loop(&setup, &cfg.true_params, &params_hat, denoiser)?;
        let (_, episode) = loop_.run_recorded(setup.duration)?;
        if episode.steps.is_empty() {
            barren_episodes += 1;
            if barren_episodes >= 3 {
                return Err(SimError::Schedule(
                    "training stalled: episodes produce no usable control periods".into(),
                ));
            }
            episode_idx += 1;
            continue;
        }
        barren_episodes = 0;

        let mut spans = episode.anchors.iter().peekable();
        for (idx, rec) in episode.steps.iter().enumerate() {
            if step >= cfg.steps {
                break;
            }
            // Anchor fixes landed just before this control period; apply
            // their span innovations to the network first.
            while spans.peek().map(|s| s.end == idx).unwrap_or(false) {
                let span = spans.next().unwrap();
                if let Some((_, g)) = anchor_step(&spec, &scales, &phi, &episode, span) {
                    let scaled: Vec<f64> = g.iter().map(|v| v * cfg.anchor_weight).collect();
                    adam.step(&mut phi, &scaled);
                }
            }
            let result = train_step(
                &spec,
                &scales,
                &phi,
                &log_theta,
                cfg.true_params.gravity,
                cfg.accel_weight,
                cfg.correction_reg,
                rec,
                episode.control_dt,
                episode.imu_dt,
            );
            let mut record = TrainStepRecord {
                step,
                episode: episode_idx,
                angle_deg: angle,
                t: rec.t,
                loss: f64::NAN,
                u_metric: f64::NAN,
                att_gap_sq: f64::NAN,
                rate_gap_sq: f64::NAN,
                accel_loss: f64::NAN,
                reg_loss: f64::NAN,
                id_loss: f64::NAN,
                mass: params_from_log(&log_theta, cfg.true_params.gravity).mass,
                inertia: params_from_log(&log_theta, cfg.true_params.gravity).inertia,
                phi_grad_norm: 0.0,
                theta_grad_norm: 0.0,
                solver_ok: false,
            };
            if let Some(r) = result {
                let phi_norm = r.phi_grads.iter().map(|g| g * g).sum::<f64>().sqrt();
                let theta_norm = r.theta_grads.iter().map(|g| g * g).sum::<f64>().sqrt();
                adam.step(&mut phi, &r.phi_grads);
                let decay = if cfg.lr_decay_steps > 0.0 {
                    1.0 / (1.0 + step as f64 / cfg.lr_decay_steps).sqrt()
                } else {
                    1.0
                };
                let clamp = |d: f64| d.clamp(-cfg.max_log_step, cfg.max_log_step);
                log_theta[0] -= clamp(decay * cfg.mass_lr * r.theta_grads[0]);
                for i in 1..4 {
                    log_theta[i] -= clamp(decay * cfg.inertia_lr * r.theta_grads[i]);
                }
                record.loss = r.att_gap_sq
                    + r.rate_gap_sq
                    + r.id_loss
                    + cfg.accel_weight * r.accel_loss
                    + cfg.correction_reg * r.reg_loss;
                record.u_metric = (r.att_gap_sq + r.rate_gap_sq).sqrt();
                record.att_gap_sq = r.att_gap_sq;
                record.rate_gap_sq = r.rate_gap_sq;
                record.accel_loss = r.accel_loss;
                record.reg_loss = r.reg_loss;
                record.id_loss = r.id_loss;
                record.phi_grad_norm = phi_norm;
                record.theta_grad_norm = theta_norm;
                record.solver_ok = true;
            }
            let after = params_from_log(&log_theta, cfg.true_params.gravity);
            record.mass = after.mass;
            record.inertia = after.inertia;
            history.push(record);
            step += 1;
            if step > avg_start {
                avg_count += 1;
                for i in 0..4 {
                    avg_log_theta[i] += (log_theta[i] - avg_log_theta[i]) / avg_count as f64;
                }
            }

            if cfg.validation_every > 0 && step % cfg.validation_every == 0 {
                let mut v = validate(cfg, &spec, &scales, &phi, &log_theta);
                v.step = step;
                let better = best
                    .as_ref()
                    .map(|b| v.median_u < b.metric || b.metric.is_nan())
                    .unwrap_or(true);
                if better {
                    best = Some(make_checkpoint(step, v.median_u, &phi, &log_theta));
                }
                validations.push(v);
            }
        }
        episode_idx += 1;
    }

    let final_theta = if avg_count > 0 { avg_log_theta } else { log_theta };
    let fin = make_checkpoint(step, f64::NAN, &phi, &final_theta);
    let best = best.unwrap_or_else(|| fin.clone());
    Ok(TrainOutcome {
        best,
        fin,
        history,
        validations,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dynamics::{ControlInput, VehicleState};
    use crate::sensors::{ImuConfig, ImuSample, PlantNoiseConfig};

    fn quiet_episode() -> EpisodeSetup {
        let mut setup = EpisodeSetup::default();
        setup.plant.noise = PlantNoiseConfig::silent();
        setup.imu = ImuConfig::noiseless();
        setup.anchor_noise_std = 0.0;
        setup
    }

    fn hover_record(params: &VehicleParams) -> ControlStepRecord {
        let hover = VehicleState::hover().to_array();
        let thrust = ControlInput::hover(params).thrust;
        let sample = |t: f64| ImuSample {
            t,
            gyro: [0.0; 3],
            accel: [0.0, 0.0, thrust / params.mass],
        };
        ControlStepRecord {
            t: 0.0,
            x_est: hover,
            rot_est: so3::rot_from_euler(&[0.0; 3]),
            omega_est: [0.0; 3],
            x_true: hover,
            u_exec: [thrust, 0.0, 0.0, 0.0],
            imu_window: (1..=4).map(|k| sample(k as f64 * 5e-3)).collect(),
        }
    }

    #[test]
    fn rotation_gap_matches_the_angle() {
        let a = so3::rot_from_euler(&[0.2, -0.1, 0.4]);
        let axis = [0.3, -0.2, 0.1];
        let b = so3::mat3_mul(&a, &so3::exp_so3(&axis));
        let angle = (axis.iter().map(|v| v * v).sum::<f64>()).sqrt();
        let gap = rotation_gap_sq(&a, &b);
        assert!((gap - angle * angle).abs() < 1e-12);
        let zero = rotation_gap_sq(&a, &a);
        assert!(zero.abs() < 1e-15);
    }

    #[test]
    fn hover_with_true_parameters_is_self_consistent() {
        // Clean data, exact parameters, identity network: both sides of
        // the loss see the same world, so every term sits at zero.
        let params = VehicleParams::default();
        let spec = MlpSpec::default();
        let scales = FeatureScales::default();
        let phi = crate::estimator::init_mlp_params(&spec, 3);
        let log_theta = [
            params.mass.ln(),
            params.inertia[0].ln(),
            params.inertia[1].ln(),
            params.inertia[2].ln(),
        ];
        let rec = hover_record(&params);
        let r = train_step(
            &spec, &scales, &phi, &log_theta, params.gravity, 0.1, 0.1, &rec, 0.02, 5e-3,
        )
        .expect("hover solve succeeds");
        assert!(r.att_gap_sq < 1e-12, "attitude gap {}", r.att_gap_sq);
        assert!(r.rate_gap_sq < 1e-12, "rate gap {}", r.rate_gap_sq);
        assert!(r.accel_loss < 1e-12, "accel loss {}", r.accel_loss);
    }

    #[test]
    fn mass_gradient_points_toward_the_true_mass() {
        // Plant heavier in the data than the estimate believes: the
        // recorded accelerometer reads less than thrust over estimated
        // mass, and the gradient on log mass must push the estimate up.
        let params = VehicleParams::default();
        let spec = MlpSpec::default();
        let scales = FeatureScales::default();
        let phi = crate::estimator::init_mlp_params(&spec, 3);
        let heavy = 1.3 * params.mass;
        let mut rec = hover_record(&params);
        // Same executed thrust, but the measured specific force now
        // reflects the heavier true plant.
        for s in &mut rec.imu_window {
            s.accel[2] = rec.u_exec[0] / heavy;
        }
        let log_theta = [
            params.mass.ln(),
            params.inertia[0].ln(),
            params.inertia[1].ln(),
            params.inertia[2].ln(),
        ];
        let r = train_step(
            &spec, &scales, &phi, &log_theta, params.gravity, 0.1, 0.1, &rec, 0.02, 5e-3,
        )
        .unwrap();
        assert!(
            r.theta_grads[0] < -1e-3,
            "log-mass gradient {} should be negative so mass grows",
            r.theta_grads[0]
        );
        // A few descent steps on log mass alone recover the true value.
        let mut lm = log_theta[0];
        for _ in 0..200 {
            let lt = [lm, log_theta[1], log_theta[2], log_theta[3]];
            let r = train_step(
                &spec, &scales, &phi, &lt, params.gravity, 0.1, 0.1, &rec, 0.02, 5e-3,
            )
            .unwrap();
            lm -= 1e-2 * r.theta_grads[0];
        }
        let mass = lm.exp();
        assert!(
            (mass - heavy).abs() / heavy < 0.02,
            "recovered mass {mass} vs true {heavy}"
        );
    }

    #[test]
    fn synthetic_gyro_bias_is_mostly_removed() {
        // A constant gyro bias on otherwise clean hover data: the
        // attitude mismatch is the only signal, and a few hundred Adam
        // steps on the network should cancel most of the bias.
        let params = VehicleParams::default();
        let spec = MlpSpec::default();
        let scales = FeatureScales::default();
        let mut phi = crate::estimator::init_mlp_params(&spec, 5);
        let log_theta = [
            params.mass.ln(),
            params.inertia[0].ln(),
            params.inertia[1].ln(),
            params.inertia[2].ln(),
        ];
        let bias = [0.03, -0.02, 0.015];
        let mut rec = hover_record(&params);
        for s in &mut rec.imu_window {
            s.gyro = bias;
        }
        let mut adam = Adam::new(1e-3, phi.len());
        for _ in 0..500 {
            let r = train_step(
                &spec, &scales, &phi, &log_theta, params.gravity, 0.1, 0.1, &rec, 0.02, 5e-3,
            )
            .unwrap();
            adam.step(&mut phi, &r.phi_grads);
        }
        let denoiser = Denoiser {
            spec,
            params: phi,
            scales,
        };
        let corrected = denoiser.correct(&rec.imu_window[0]);
        let before: f64 = bias.iter().map(|b| b * b).sum::<f64>().sqrt();
        let after: f64 = corrected.gyro.iter().map(|g| g * g).sum::<f64>().sqrt();
        // The correction regularizer deliberately stops short of full
        // removal; the equilibrium leaves bias/(1 + 4*reg) in place.
        assert!(
            after < 0.45 * before,
            "bias {before:.4} only reduced to {after:.4}"
        );
    }

    #[test]
    fn anchor_spans_reveal_a_bias_the_window_terms_cannot_see() {
        // Closed loop with a biased gyro and exact periodic fixes. Within
        // a window the bias cancels between prediction and measurement,
        // so only the span innovations carry it; training on them alone
        // should pull the corrected stream toward the truth.
        let params = VehicleParams::default();
        let mut setup = quiet_episode();
        setup.imu.gyro.init_bias_std = 0.02;
        setup.imu.bias_seed = 5;
        setup.seed = 77;
        setup.duration = 2.0;
        setup.anchor_every_periods = 10;

        let spec = MlpSpec::default();
        let scales = FeatureScales::default();
        let mut phi = crate::estimator::init_mlp_params(&spec, 3);
        let denoiser = Denoiser {
            spec: spec.clone(),
            params: phi.clone(),
            scales,
        };
        let mut loop_ = build_closed_loop(&setup, &params, &params, denoiser).unwrap();
        let (_, episode) = loop_.run_recorded(setup.duration).unwrap();
        assert!(episode.anchors.len() >= 8, "need a healthy set of spans");

        // The persistent offset of the raw stream is the bias estimate;
        // true rates at hover average out across the episode.
        let mean_gyro = |f: &dyn Fn(&[f64; 3]) -> [f64; 3]| -> [f64; 3] {
            let mut acc = [0.0; 3];
            let mut n = 0usize;
            for rec in &episode.steps {
                for s in &rec.imu_window {
                    let g = f(&s.gyro);
                    for k in 0..3 {
                        acc[k] += g[k];
                    }
                    n += 1;
                }
            }
            std::array::from_fn(|k| acc[k] / n as f64)
        };
        let raw_bias = mean_gyro(&|g| *g);
        let raw_norm = raw_bias.iter().map(|b| b * b).sum::<f64>().sqrt();
        assert!(raw_norm > 5e-3, "the drawn bias is too small to test");

        let mut adam = Adam::new(1e-3, phi.len());
        for _ in 0..12 {
            for span in &episode.anchors {
                let (_, g) = anchor_step(&spec, &scales, &phi, &episode, span).unwrap();
                let scaled: Vec<f64> = g.iter().map(|v| v * 200.0).collect();
                adam.step(&mut phi, &scaled);
            }
        }

        let trained = Denoiser {
            spec: spec.clone(),
            params: phi,
            scales,
        };
        let mut corr_acc = [0.0; 3];
        let mut n = 0usize;
        for rec in &episode.steps {
            for s in &rec.imu_window {
                let c = trained.correct(s);
                for k in 0..3 {
                    corr_acc[k] += c.gyro[k];
                }
                n += 1;
            }
        }
        let corr_bias: [f64; 3] = std::array::from_fn(|k| corr_acc[k] / n as f64);
        let corr_norm = corr_bias.iter().map(|b| b * b).sum::<f64>().sqrt();
        assert!(
            corr_norm < 0.3 * raw_norm,
            "offset {raw_norm:.5} only reduced to {corr_norm:.5}"
        );
    }

    #[test]
    fn zero_learning_rates_change_nothing() {
        let cfg = TrainerConfig {
            steps: 6,
            mlp_lr: 0.0,
            mass_lr: 0.0,
            inertia_lr: 0.0,
            episode: EpisodeSetup {
                duration: 0.2,
                ..quiet_episode()
            },
            validation_every: 0,
            ..TrainerConfig::default()
        };
        let before = crate::estimator::init_mlp_params(&MlpSpec::default(), cfg.mlp_seed);
        let start = cfg.true_params.scaled(cfg.initial_param_scale);
        let out = run_training(&cfg).unwrap();
        assert_eq!(out.history.len(), 6);
        assert_eq!(out.fin.phi.len(), before.len());
        for (a, b) in out.fin.phi.iter().zip(before.iter()) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
        assert_eq!(out.fin.log_theta[0].to_bits(), start.mass.ln().to_bits());
    }

    #[test]
    fn zero_budget_returns_the_initial_state() {
        let cfg = TrainerConfig {
            steps: 0,
            episode: EpisodeSetup {
                duration: 0.2,
                ..quiet_episode()
            },
            ..TrainerConfig::default()
        };
        let out = run_training(&cfg).unwrap();
        assert!(out.history.is_empty());
        assert!(out.validations.is_empty());
        let start = cfg.true_params.scaled(cfg.initial_param_scale);
        assert!((out.fin.vehicle_params().mass - start.mass).abs() < 1e-15);
    }

    #[test]
    fn short_training_run_produces_finite_telemetry() {
        let cfg = TrainerConfig {
            steps: 8,
            episode: EpisodeSetup {
                duration: 0.2,
                ..EpisodeSetup::default()
            },
            validation_every: 4,
            validation_seeds: vec![9001],
            ..TrainerConfig::default()
        };
        let out = run_training(&cfg).unwrap();
        assert_eq!(out.history.len(), 8);
        for r in &out.history {
            assert!(r.solver_ok, "step {} solver failed", r.step);
            assert!(r.loss.is_finite());
            assert!(r.mass > 0.0 && r.mass.is_finite());
            for j in r.inertia {
                assert!(j > 0.0 && j.is_finite());
            }
        }
        assert_eq!(out.validations.len(), 2);
        for v in &out.validations {
            assert!(v.median_u.is_finite());
        }
        assert!(out.best.metric.is_finite());

        let dir = tempfile::tempdir().unwrap();
        let h = dir.path().join("history.csv");
        write_history_csv(&h, &out.history).unwrap();
        let text = std::fs::read_to_string(&h).unwrap();
        assert_eq!(text.lines().count(), 9);
        let v = dir.path().join("validation.csv");
        write_validation_csv(&v, &out.validations).unwrap();
        assert_eq!(std::fs::read_to_string(&v).unwrap().lines().count(), 3);
    }

    #[test]
    #[ignore]
    fn full_training_dry_run() {
        let cfg = TrainerConfig::default();
        let t0 = std::time::Instant::now();
        let out = run_training(&cfg).unwrap();
        let dt = t0.elapsed().as_secs_f64();
        let p = out.fin.vehicle_params();
        let tp = cfg.true_params;
        println!("trained in {dt:.1} s, {} steps", out.history.len());
        println!(
            "mass {:.5} (true {:.5}, err {:.2}%)",
            p.mass,
            tp.mass,
            100.0 * (p.mass - tp.mass).abs() / tp.mass
        );
        for k in 0..3 {
            println!(
                "J[{k}] {:.6} (true {:.6}, err {:.2}%)",
                p.inertia[k],
                tp.inertia[k],
                100.0 * (p.inertia[k] - tp.inertia[k]).abs() / tp.inertia[k]
            );
        }
        for v in &out.validations {
            println!(
                "val @ {}: median_u {:.6}, imu_rmse_corr {:.6}, diverged {}",
                v.step, v.median_u, v.imu_rmse_corrected, v.diverged_runs
            );
        }
        let first = &out.history[0];
        let last = &out.history[out.history.len() - 1];
        println!(
            "loss first {:.6} u {:.6} | last {:.6} u {:.6}",
            first.loss, first.u_metric, last.loss, last.u_metric
        );
        println!("best step {} metric {:.6}", out.best.step, out.best.metric);
    }

    #[test]
    fn checkpoints_round_trip_bit_for_bit() {
        let spec = MlpSpec::default();
        let phi: Vec<f64> = (0..spec.param_count())
            .map(|i| ((i as f64) * 0.618).sin() * 0.01 + 1e-17)
            .collect();
        let ck = Checkpoint {
            version: 1,
            step: 1234,
            metric: 0.0375,
            spec,
            scales: FeatureScales::default(),
            phi,
            log_theta: [0.1f64.ln(), -4.6, -4.7, -3.9],
            gravity: 9.81,
        };
        let dir = tempfile::tempdir().unwrap();

        let jp = dir.path().join("ck.json");
        ck.save_json(&jp).unwrap();
        let cj = Checkpoint::load_json(&jp).unwrap();
        assert_eq!(ck.phi.len(), cj.phi.len());
        for (a, b) in ck.phi.iter().zip(cj.phi.iter()) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
        for k in 0..4 {
            assert_eq!(ck.log_theta[k].to_bits(), cj.log_theta[k].to_bits());
        }
        assert_eq!(ck.metric.to_bits(), cj.metric.to_bits());

        let bp = dir.path().join("ck.bin");
        ck.save_binary(&bp).unwrap();
        let cb = Checkpoint::load_binary(&bp).unwrap();
        assert_eq!(ck.spec, cb.spec);
        for (a, b) in ck.phi.iter().zip(cb.phi.iter()) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
        assert_eq!(ck.step, cb.step);

        let garbage = dir.path().join("bad.bin");
        std::fs::write(&garbage, b"definitely not a checkpoint").unwrap();
        assert!(Checkpoint::load_binary(&garbage).is_err());
    }
}
