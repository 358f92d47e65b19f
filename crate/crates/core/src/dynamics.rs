//! Quadrotor rigid-body dynamics.
//!
//! State is 12-dimensional: position `r`, 3-2-1 Euler attitude
//! `(roll, pitch, yaw)`, world velocity, and body rates. Control is
//! collective thrust along body z plus a body torque vector. Newton-Euler
//! with a diagonal inertia:
//!
//! ```text
//! m r''   = -m g e3 + T R(euler) e3
//! J omega' = tau - omega x (J omega)
//! euler'   = E(euler) omega
//! ```
//!
//! Integration is classic RK4. All model code is generic over
//! [`Scalar`] so the identical expressions can be recorded on the autodiff
//! tape; the analytic Jacobian chain at the bottom exists so that the
//! differentiable MPC backward pass can express the linearized dynamics as
//! a function of the physical parameters without second-order autodiff.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::math::{Matrix, Scalar, Tape};

pub const STATE_DIM: usize = 12;
pub const CONTROL_DIM: usize = 4;

/// Pitch magnitudes beyond `pi/2 - GIMBAL_MARGIN` are rejected; the 3-2-1
/// Euler chart degenerates there.
pub const GIMBAL_MARGIN: f64 = 1e-3;

/// State vector layout offsets into the flat 12-vector.
pub mod idx {
    pub const POS: usize = 0;
    pub const ATT: usize = 3;
    pub const VEL: usize = 6;
    pub const RATE: usize = 9;
}

#[derive(Debug, Error)]
pub enum DynamicsError {
    /// Pitch reached the 3-2-1 chart singularity; the offending pitch
    /// value (rad) is reported.
    #[error("gimbal lock: pitch {pitch:.4} rad is within {margin:.0e} of +-pi/2")]
    GimbalLock { pitch: f64, margin: f64 },
    /// Integration produced a non-finite component, i.e. the trajectory
    /// diverged.
    #[error("non-finite state component after integration step at t={t:.4}")]
    NonFinite { t: f64 },
}

/// Vehicle state with timestamp. `to_array` flattens in the order
/// position, attitude, velocity, body rates, matching [`idx`].
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct VehicleState {
    pub t: f64,
    pub pos: [f64; 3],
    /// 3-2-1 Euler attitude: roll, pitch, yaw (rad).
    pub euler: [f64; 3],
    pub vel: [f64; 3],
    /// Body angular rates (rad/s).
    pub omega: [f64; 3],
}

impl VehicleState {
    pub fn hover() -> Self {
        VehicleState {
            t: 0.0,
            pos: [0.0; 3],
            euler: [0.0; 3],
            vel: [0.0; 3],
            omega: [0.0; 3],
        }
    }

    pub fn to_array(&self) -> [f64; STATE_DIM] {
        let mut x = [0.0; STATE_DIM];
        x[idx::POS..idx::POS + 3].copy_from_slice(&self.pos);
        x[idx::ATT..idx::ATT + 3].copy_from_slice(&self.euler);
        x[idx::VEL..idx::VEL + 3].copy_from_slice(&self.vel);
        x[idx::RATE..idx::RATE + 3].copy_from_slice(&self.omega);
        x
    }

    pub fn from_array(t: f64, x: &[f64; STATE_DIM]) -> Self {
        VehicleState {
            t,
            pos: [x[0], x[1], x[2]],
            euler: [x[3], x[4], x[5]],
            vel: [x[6], x[7], x[8]],
            omega: [x[9], x[10], x[11]],
        }
    }

    pub fn is_finite(&self) -> bool {
        self.to_array().iter().all(|v| v.is_finite())
    }
}

/// Collective thrust (N) and body torque (N m).
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ControlInput {
    pub thrust: f64,
    pub torque: [f64; 3],
}

impl ControlInput {
    pub fn zero() -> Self {
        ControlInput {
            thrust: 0.0,
            torque: [0.0; 3],
        }
    }

    /// Thrust that balances gravity for the given parameters.
    pub fn hover(params: &VehicleParams) -> Self {
        ControlInput {
            thrust: params.mass * params.gravity,
            torque: [0.0; 3],
        }
    }

    pub fn to_array(&self) -> [f64; CONTROL_DIM] {
        [self.thrust, self.torque[0], self.torque[1], self.torque[2]]
    }

    pub fn from_array(u: &[f64; CONTROL_DIM]) -> Self {
        ControlInput {
            thrust: u[0],
            torque: [u[1], u[2], u[3]],
        }
    }

    pub fn clamped(&self, bounds: &ControlBounds) -> Self {
        let u = self.to_array();
        let mut c = [0.0; CONTROL_DIM];
        for i in 0..CONTROL_DIM {
            c[i] = u[i].clamp(bounds.lo[i], bounds.hi[i]);
        }
        ControlInput::from_array(&c)
    }
}

/// Box bounds on the control vector `[thrust, tau_x, tau_y, tau_z]`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ControlBounds {
    pub lo: [f64; CONTROL_DIM],
    pub hi: [f64; CONTROL_DIM],
}

impl Default for ControlBounds {
    fn default() -> Self {
        ControlBounds {
            lo: [0.0, -1.0, -1.0, -1.0],
            hi: [20.0, 1.0, 1.0, 1.0],
        }
    }
}

/// Physical parameters. Inertia is the diagonal of the body-frame inertia
/// tensor.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct VehicleParams {
    pub mass: f64,
    pub inertia: [f64; 3],
    pub gravity: f64,
}

impl Default for VehicleParams {
    fn default() -> Self {
        VehicleParams {
            mass: 1.0,
            inertia: [0.01, 0.01, 0.02],
            gravity: 9.81,
        }
    }
}

impl VehicleParams {
    /// Same vehicle with mass and inertia scaled by `factor`, used to set
    /// up deliberately mismatched controller models.
    pub fn scaled(&self, factor: f64) -> Self {
        VehicleParams {
            mass: self.mass * factor,
            inertia: [
                self.inertia[0] * factor,
                self.inertia[1] * factor,
                self.inertia[2] * factor,
            ],
            gravity: self.gravity,
        }
    }
}

fn check_pitch<S: Scalar>(x: &[S; STATE_DIM]) -> Result<(), DynamicsError> {
    let pitch = x[idx::ATT + 1].value();
    // A non-finite pitch means the trajectory already diverged; let the
    // step-level finiteness check report that instead of gimbal lock.
    if pitch.is_finite() && pitch.abs() >= std::f64::consts::FRAC_PI_2 - GIMBAL_MARGIN {
        return Err(DynamicsError::GimbalLock {
            pitch,
            margin: GIMBAL_MARGIN,
        });
    }
    Ok(())
}

/// Continuous-time state derivative, generic over the scalar type.
///
/// `mass` and `inertia` are passed separately from the state so the caller
/// can hand in tape variables for them while the state stays plain.
pub fn derivative_s<S: Scalar>(
    x: &[S; STATE_DIM],
    u: &[S; CONTROL_DIM],
    mass: &S,
    inertia: &[S; 3],
    gravity: f64,
) -> Result<[S; STATE_DIM], DynamicsError> {
    check_pitch(x)?;
    let (sr, cr) = (x[idx::ATT].sin(), x[idx::ATT].cos());
    let (sp, cp) = (x[idx::ATT + 1].sin(), x[idx::ATT + 1].cos());
    let (sy, cy) = (x[idx::ATT + 2].sin(), x[idx::ATT + 2].cos());
    let tp = sp.clone() / cp.clone();
    let (wx, wy, wz) = (
        x[idx::RATE].clone(),
        x[idx::RATE + 1].clone(),
        x[idx::RATE + 2].clone(),
    );

    let mut dx: [S; STATE_DIM] = std::array::from_fn(|_| S::zero());

    // Position integrates world velocity.
    for k in 0..3 {
        dx[idx::POS + k] = x[idx::VEL + k].clone();
    }

    // Euler kinematics: euler' = E(euler) omega.
    dx[idx::ATT] = wx.clone()
        + sr.clone() * tp.clone() * wy.clone()
        + cr.clone() * tp.clone() * wz.clone();
    dx[idx::ATT + 1] = cr.clone() * wy.clone() - sr.clone() * wz.clone();
    dx[idx::ATT + 2] = (sr.clone() * wy.clone() + cr.clone() * wz.clone()) / cp.clone();

    // Translational acceleration: thrust along body z minus gravity.
    let t_over_m = u[0].clone() / mass.clone();
    let zb = [
        cr.clone() * sp.clone() * cy.clone() + sr.clone() * sy.clone(),
        cr.clone() * sp.clone() * sy.clone() - sr.clone() * cy.clone(),
        cr.clone() * cp.clone(),
    ];
    dx[idx::VEL] = t_over_m.clone() * zb[0].clone();
    dx[idx::VEL + 1] = t_over_m.clone() * zb[1].clone();
    dx[idx::VEL + 2] = t_over_m * zb[2].clone() - S::from_f64(gravity);

    // Euler's equation with diagonal inertia:
    // omega x (J omega) = [(Jz-Jy) wy wz, (Jx-Jz) wz wx, (Jy-Jx) wx wy]
    let (jx, jy, jz) = (
        inertia[0].clone(),
        inertia[1].clone(),
        inertia[2].clone(),
    );
    dx[idx::RATE] =
        (u[1].clone() - (jz.clone() - jy.clone()) * wy.clone() * wz.clone()) / jx.clone();
    dx[idx::RATE + 1] =
        (u[2].clone() - (jx.clone() - jz.clone()) * wz.clone() * wx.clone()) / jy.clone();
    dx[idx::RATE + 2] =
        (u[3].clone() - (jy.clone() - jx.clone()) * wx.clone() * wy.clone()) / jz.clone();

    Ok(dx)
}

/// One RK4 step of length `dt`, generic over the scalar type.
pub fn step_s<S: Scalar>(
    x: &[S; STATE_DIM],
    u: &[S; CONTROL_DIM],
    mass: &S,
    inertia: &[S; 3],
    gravity: f64,
    dt: f64,
) -> Result<[S; STATE_DIM], DynamicsError> {
    let shift = |base: &[S; STATE_DIM], k: &[S; STATE_DIM], h: f64| -> [S; STATE_DIM] {
        std::array::from_fn(|i| base[i].clone() + k[i].scale(h))
    };
    let k1 = derivative_s(x, u, mass, inertia, gravity)?;
    let x2 = shift(x, &k1, dt / 2.0);
    let k2 = derivative_s(&x2, u, mass, inertia, gravity)?;
    let x3 = shift(x, &k2, dt / 2.0);
    let k3 = derivative_s(&x3, u, mass, inertia, gravity)?;
    let x4 = shift(x, &k3, dt);
    let k4 = derivative_s(&x4, u, mass, inertia, gravity)?;
    let next: [S; STATE_DIM] = std::array::from_fn(|i| {
        x[i].clone()
            + (k1[i].clone()
                + k2[i].scale(2.0)
                + k3[i].scale(2.0)
                + k4[i].clone())
            .scale(dt / 6.0)
    });
    Ok(next)
}

/// Continuous derivative on plain numbers.
pub fn derivative(
    state: &VehicleState,
    u: &ControlInput,
    params: &VehicleParams,
) -> Result<[f64; STATE_DIM], DynamicsError> {
    derivative_s(
        &state.to_array(),
        &u.to_array(),
        &params.mass,
        &params.inertia,
        params.gravity,
    )
}

/// One RK4 step on plain numbers; advances the timestamp and rejects
/// non-finite results.
pub fn step(
    state: &VehicleState,
    u: &ControlInput,
    params: &VehicleParams,
    dt: f64,
) -> Result<VehicleState, DynamicsError> {
    let next = step_s(
        &state.to_array(),
        &u.to_array(),
        &params.mass,
        &params.inertia,
        params.gravity,
        dt,
    )?;
    let out = VehicleState::from_array(state.t + dt, &next);
    if !out.is_finite() {
        return Err(DynamicsError::NonFinite { t: out.t });
    }
    Ok(out)
}

/// Discrete-time Jacobians `A = d step/d x` (12x12) and `B = d step/d u`
/// (12x4), obtained by recording one RK4 step on a throwaway tape and
/// running one backward sweep per output component.
pub fn linearize(
    state: &VehicleState,
    u: &ControlInput,
    params: &VehicleParams,
    dt: f64,
) -> Result<(Matrix<f64>, Matrix<f64>), DynamicsError> {
    let tape = Tape::new();
    let xv = tape.vars(&state.to_array());
    let uv = tape.vars(&u.to_array());
    let x_arr: [crate::math::Var; STATE_DIM] = std::array::from_fn(|i| xv[i].clone());
    let u_arr: [crate::math::Var; CONTROL_DIM] = std::array::from_fn(|i| uv[i].clone());
    let mass = crate::math::Var::constant(params.mass);
    let inertia: [crate::math::Var; 3] =
        std::array::from_fn(|i| crate::math::Var::constant(params.inertia[i]));
    let next = step_s(&x_arr, &u_arr, &mass, &inertia, params.gravity, dt)?;

    let mut a = Matrix::<f64>::zeros(STATE_DIM, STATE_DIM);
    let mut b = Matrix::<f64>::zeros(STATE_DIM, CONTROL_DIM);
    for i in 0..STATE_DIM {
        let g = tape.backward(&next[i]);
        for j in 0..STATE_DIM {
            a[(i, j)] = g.wrt(&xv[j]);
        }
        for j in 0..CONTROL_DIM {
            b[(i, j)] = g.wrt(&uv[j]);
        }
    }
    Ok((a, b))
}

/// Continuous-time Jacobians of [`derivative_s`] written out analytically,
/// generic over the scalar type. This is what lets the MPC backward pass
/// treat the linearized dynamics as differentiable functions of mass and
/// inertia using only first-order autodiff.
pub fn continuous_jacobians_s<S: Scalar>(
    x: &[S; STATE_DIM],
    u: &[S; CONTROL_DIM],
    mass: &S,
    inertia: &[S; 3],
) -> (Matrix<S>, Matrix<S>) {
    let mut a = Matrix::<S>::zeros(STATE_DIM, STATE_DIM);
    let mut b = Matrix::<S>::zeros(STATE_DIM, CONTROL_DIM);

    let (sr, cr) = (x[idx::ATT].sin(), x[idx::ATT].cos());
    let (sp, cp) = (x[idx::ATT + 1].sin(), x[idx::ATT + 1].cos());
    let (sy, cy) = (x[idx::ATT + 2].sin(), x[idx::ATT + 2].cos());
    let tp = sp.clone() / cp.clone();
    let sec = cp.recip();
    let sec2 = sec.clone() * sec.clone();
    let (wx, wy, wz) = (
        x[idx::RATE].clone(),
        x[idx::RATE + 1].clone(),
        x[idx::RATE + 2].clone(),
    );

    // d r' / d v = I
    for k in 0..3 {
        a[(idx::POS + k, idx::VEL + k)] = S::one();
    }

    // Euler kinematics rows.
    let roll = idx::ATT;
    a[(roll, idx::ATT)] =
        cr.clone() * tp.clone() * wy.clone() - sr.clone() * tp.clone() * wz.clone();
    a[(roll, idx::ATT + 1)] =
        (sr.clone() * wy.clone() + cr.clone() * wz.clone()) * sec2.clone();
    a[(roll, idx::RATE)] = S::one();
    a[(roll, idx::RATE + 1)] = sr.clone() * tp.clone();
    a[(roll, idx::RATE + 2)] = cr.clone() * tp.clone();

    let pitch = idx::ATT + 1;
    a[(pitch, idx::ATT)] = -(sr.clone() * wy.clone()) - cr.clone() * wz.clone();
    a[(pitch, idx::RATE + 1)] = cr.clone();
    a[(pitch, idx::RATE + 2)] = -sr.clone();

    let yaw = idx::ATT + 2;
    a[(yaw, idx::ATT)] = (cr.clone() * wy.clone() - sr.clone() * wz.clone()) * sec.clone();
    a[(yaw, idx::ATT + 1)] =
        (sr.clone() * wy.clone() + cr.clone() * wz.clone()) * tp.clone() * sec.clone();
    a[(yaw, idx::RATE + 1)] = sr.clone() * sec.clone();
    a[(yaw, idx::RATE + 2)] = cr.clone() * sec.clone();

    // Velocity rows: d v' = d[(T/m) z_b].
    let t_over_m = u[0].clone() / mass.clone();
    let zb = [
        cr.clone() * sp.clone() * cy.clone() + sr.clone() * sy.clone(),
        cr.clone() * sp.clone() * sy.clone() - sr.clone() * cy.clone(),
        cr.clone() * cp.clone(),
    ];
    let dzb_droll = [
        -(sr.clone() * sp.clone() * cy.clone()) + cr.clone() * sy.clone(),
        -(sr.clone() * sp.clone() * sy.clone()) - cr.clone() * cy.clone(),
        -(sr.clone() * cp.clone()),
    ];
    let dzb_dpitch = [
        cr.clone() * cp.clone() * cy.clone(),
        cr.clone() * cp.clone() * sy.clone(),
        -(cr.clone() * sp.clone()),
    ];
    let dzb_dyaw = [
        -(cr.clone() * sp.clone() * sy.clone()) + sr.clone() * cy.clone(),
        cr.clone() * sp.clone() * cy.clone() + sr.clone() * sy.clone(),
        S::zero(),
    ];
    for k in 0..3 {
        a[(idx::VEL + k, idx::ATT)] = t_over_m.clone() * dzb_droll[k].clone();
        a[(idx::VEL + k, idx::ATT + 1)] = t_over_m.clone() * dzb_dpitch[k].clone();
        a[(idx::VEL + k, idx::ATT + 2)] = t_over_m.clone() * dzb_dyaw[k].clone();
        b[(idx::VEL + k, 0)] = zb[k].clone() / mass.clone();
    }

    // Body-rate rows.
    let (jx, jy, jz) = (
        inertia[0].clone(),
        inertia[1].clone(),
        inertia[2].clone(),
    );
    let dzy = jz.clone() - jy.clone();
    let dxz = jx.clone() - jz.clone();
    let dyx = jy.clone() - jx.clone();
    a[(idx::RATE, idx::RATE + 1)] = -(dzy.clone() * wz.clone()) / jx.clone();
    a[(idx::RATE, idx::RATE + 2)] = -(dzy * wy.clone()) / jx.clone();
    a[(idx::RATE + 1, idx::RATE)] = -(dxz.clone() * wz.clone()) / jy.clone();
    a[(idx::RATE + 1, idx::RATE + 2)] = -(dxz * wx.clone()) / jy.clone();
    a[(idx::RATE + 2, idx::RATE)] = -(dyx.clone() * wy) / jz.clone();
    a[(idx::RATE + 2, idx::RATE + 1)] = -(dyx * wx) / jz.clone();
    b[(idx::RATE, 1)] = jx.recip();
    b[(idx::RATE + 1, 2)] = jy.recip();
    b[(idx::RATE + 2, 3)] = jz.recip();

    (a, b)
}

/// Discrete Jacobians of the RK4 step assembled by chaining the analytic
/// continuous Jacobians through the four stages. Agrees with [`linearize`]
/// to rounding but is cheaper and, unlike tape extraction, yields entries
/// that are themselves scalar expressions in mass and inertia.
pub fn step_jacobians_s<S: Scalar>(
    x: &[S; STATE_DIM],
    u: &[S; CONTROL_DIM],
    mass: &S,
    inertia: &[S; 3],
    gravity: f64,
    dt: f64,
) -> Result<(Matrix<S>, Matrix<S>), DynamicsError> {
    let shift = |base: &[S; STATE_DIM], k: &[S; STATE_DIM], h: f64| -> [S; STATE_DIM] {
        std::array::from_fn(|i| base[i].clone() + k[i].scale(h))
    };
    let k1 = derivative_s(x, u, mass, inertia, gravity)?;
    let x2 = shift(x, &k1, dt / 2.0);
    let k2 = derivative_s(&x2, u, mass, inertia, gravity)?;
    let x3 = shift(x, &k2, dt / 2.0);
    let k3 = derivative_s(&x3, u, mass, inertia, gravity)?;
    let x4 = shift(x, &k3, dt);

    let eye = Matrix::<S>::identity(STATE_DIM);
    let (a1, b1) = continuous_jacobians_s(x, u, mass, inertia);
    let (a2, b2) = continuous_jacobians_s(&x2, u, mass, inertia);
    let (a3, b3) = continuous_jacobians_s(&x3, u, mass, inertia);
    let (a4, b4) = continuous_jacobians_s(&x4, u, mass, inertia);

    // Stage sensitivities with respect to the initial state.
    let s1 = a1.clone();
    let s2 = a2.matmul(&eye.add(&s1.scale(dt / 2.0)));
    let s3 = a3.matmul(&eye.add(&s2.scale(dt / 2.0)));
    let s4 = a4.matmul(&eye.add(&s3.scale(dt)));
    let a_d = eye.add(
        &s1.add(&s2.scale(2.0))
            .add(&s3.scale(2.0))
            .add(&s4)
            .scale(dt / 6.0),
    );

    // Stage sensitivities with respect to the control.
    let t1 = b1;
    let t2 = a2.matmul(&t1.scale(dt / 2.0)).add(&b2);
    let t3 = a3.matmul(&t2.scale(dt / 2.0)).add(&b3);
    let t4 = a4.matmul(&t3.scale(dt)).add(&b4);
    let b_d = t1
        .add(&t2.scale(2.0))
        .add(&t3.scale(2.0))
        .add(&t4)
        .scale(dt / 6.0);

    Ok((a_d, b_d))
}

/// Plain-number convenience wrapper around [`step_jacobians_s`].
pub fn step_jacobians(
    state: &VehicleState,
    u: &ControlInput,
    params: &VehicleParams,
    dt: f64,
) -> Result<(Matrix<f64>, Matrix<f64>), DynamicsError> {
    step_jacobians_s(
        &state.to_array(),
        &u.to_array(),
        &params.mass,
        &params.inertia,
        params.gravity,
        dt,
    )
}
