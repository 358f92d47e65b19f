//! Receding-horizon control by iterative LQR, and the machinery that makes
//! one solver step differentiable with respect to model parameters.
//!
//! The solver is a standard shooting iLQR: linearize along the current
//! rollout, run a Riccati backward pass with Levenberg regularization on
//! the control Hessian, then a clamped forward line search. Everything on
//! the critical path is generic over the scalar type, so after the plain
//! `f64` solve converges the final iteration can be replayed with tape
//! variables standing in for mass and inertia. At a fixed point that
//! replay leaves the solution numerically unchanged while recording how it
//! would move with the parameters, which is exactly the derivative needed
//! by the trainer. An independent route to the same derivative via the
//! optimality system of the equality-constrained problem lives in [`lq`].
//!
//! Control bounds are handled by clamping inside every rollout and by
//! solving the backward pass on the free components only; components
//! pinned at a bound keep zero gains, so the replayed step treats them as
//! constants.

use std::time::Instant;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dynamics::{self, DynamicsError, VehicleParams, CONTROL_DIM, STATE_DIM};
use crate::math::{cholesky, solve_linear_mat, MathError, Matrix, Scalar, Tape, Var};

pub mod lq;

#[derive(Debug, Error)]
pub enum MpcError {
    #[error("invalid problem: {0}")]
    Invalid(String),
    #[error(transparent)]
    Math(#[from] MathError),
    #[error(transparent)]
    Dynamics(#[from] DynamicsError),
    #[error("initial state contains a non-finite component")]
    NonFiniteInput,
}

/// Discrete-time model interface used by the solver. Implementations are
/// generic over the scalar type so the same code can run on numbers and
/// on tape variables.
pub trait Model<S: Scalar> {
    fn state_dim(&self) -> usize;
    fn control_dim(&self) -> usize;
    /// Advance one control period of length `dt`.
    fn step(&self, x: &[S], u: &[S], dt: f64) -> Result<Vec<S>, DynamicsError>;
    /// Jacobians of [`Model::step`] with respect to state and control.
    fn jacobians(&self, x: &[S], u: &[S], dt: f64)
        -> Result<(Matrix<S>, Matrix<S>), DynamicsError>;
}

/// Rigid-body quadrotor model wrapping the vehicle dynamics. The mass and
/// inertia live in the scalar type, which is how parameter gradients flow
/// through the solver replay.
#[derive(Clone, Debug)]
pub struct QuadrotorModel<S> {
    pub mass: S,
    pub inertia: [S; 3],
    pub gravity: f64,
}

impl QuadrotorModel<f64> {
    pub fn new(params: &VehicleParams) -> Self {
        QuadrotorModel {
            mass: params.mass,
            inertia: params.inertia,
            gravity: params.gravity,
        }
    }

    pub fn params(&self) -> VehicleParams {
        VehicleParams {
            mass: self.mass,
            inertia: self.inertia,
            gravity: self.gravity,
        }
    }
}

impl QuadrotorModel<Var> {
    /// Lift physical parameters onto a tape. Returns the model and the
    /// parameter variables in the order `[mass, Jx, Jy, Jz]`.
    pub fn lift(tape: &Tape, params: &VehicleParams) -> (Self, Vec<Var>) {
        let mass = tape.var(params.mass);
        let inertia: [Var; 3] = std::array::from_fn(|k| tape.var(params.inertia[k]));
        let theta = vec![
            mass.clone(),
            inertia[0].clone(),
            inertia[1].clone(),
            inertia[2].clone(),
        ];
        (
            QuadrotorModel {
                mass,
                inertia,
                gravity: params.gravity,
            },
            theta,
        )
    }
}

impl<S: Scalar> Model<S> for QuadrotorModel<S> {
    fn state_dim(&self) -> usize {
        STATE_DIM
    }

    fn control_dim(&self) -> usize {
        CONTROL_DIM
    }

    fn step(&self, x: &[S], u: &[S], dt: f64) -> Result<Vec<S>, DynamicsError> {
        let xa: [S; STATE_DIM] = std::array::from_fn(|i| x[i].clone());
        let ua: [S; CONTROL_DIM] = std::array::from_fn(|i| u[i].clone());
        let next = dynamics::step_s(&xa, &ua, &self.mass, &self.inertia, self.gravity, dt)?;
        Ok(next.to_vec())
    }

    fn jacobians(
        &self,
        x: &[S],
        u: &[S],
        dt: f64,
    ) -> Result<(Matrix<S>, Matrix<S>), DynamicsError> {
        let xa: [S; STATE_DIM] = std::array::from_fn(|i| x[i].clone());
        let ua: [S; CONTROL_DIM] = std::array::from_fn(|i| u[i].clone());
        dynamics::step_jacobians_s(&xa, &ua, &self.mass, &self.inertia, self.gravity, dt)
    }
}

/// Point masses under direct acceleration control, integrated exactly.
/// The discrete map is linear, which makes this the reference model for
/// checking the solver against the optimality-system route.
#[derive(Clone, Copy, Debug)]
pub struct DoubleIntegrator {
    pub axes: usize,
}

impl<S: Scalar> Model<S> for DoubleIntegrator {
    fn state_dim(&self) -> usize {
        2 * self.axes
    }

    fn control_dim(&self) -> usize {
        self.axes
    }

    fn step(&self, x: &[S], u: &[S], dt: f64) -> Result<Vec<S>, DynamicsError> {
        let mut next = Vec::with_capacity(2 * self.axes);
        for i in 0..self.axes {
            let p = x[i].clone() + x[self.axes + i].scale(dt) + u[i].scale(0.5 * dt * dt);
            next.push(p);
        }
        for i in 0..self.axes {
            next.push(x[self.axes + i].clone() + u[i].scale(dt));
        }
        Ok(next)
    }

    fn jacobians(
        &self,
        _x: &[S],
        _u: &[S],
        dt: f64,
    ) -> Result<(Matrix<S>, Matrix<S>), DynamicsError> {
        let n = self.axes;
        let mut a = Matrix::<S>::identity(2 * n);
        let mut b = Matrix::<S>::zeros(2 * n, n);
        for i in 0..n {
            a[(i, n + i)] = S::from_f64(dt);
            b[(i, i)] = S::from_f64(0.5 * dt * dt);
            b[(n + i, i)] = S::from_f64(dt);
        }
        Ok((a, b))
    }
}

/// Explicit linear dynamics `x' = A x + B u`, with entries in the scalar
/// type so they can depend on tape variables.
#[derive(Clone, Debug)]
pub struct LinearModel<S> {
    pub a: Matrix<S>,
    pub b: Matrix<S>,
}

impl<S: Scalar> Model<S> for LinearModel<S> {
    fn state_dim(&self) -> usize {
        self.a.rows()
    }

    fn control_dim(&self) -> usize {
        self.b.cols()
    }

    fn step(&self, x: &[S], u: &[S], _dt: f64) -> Result<Vec<S>, DynamicsError> {
        let ax = self.a.matvec(x);
        let bu = self.b.matvec(u);
        Ok(ax.into_iter().zip(bu).map(|(p, q)| p + q).collect())
    }

    fn jacobians(
        &self,
        _x: &[S],
        _u: &[S],
        _dt: f64,
    ) -> Result<(Matrix<S>, Matrix<S>), DynamicsError> {
        Ok((self.a.clone(), self.b.clone()))
    }
}

/// Solver knobs. Regularization is additive on the control Hessian,
/// multiplied by 10 on any rejection and halved (down to `reg_min`) on
/// acceptance.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct IlqrOptions {
    pub max_iters: usize,
    /// Convergence threshold on the infinity norm of the control update.
    pub tol: f64,
    pub reg_init: f64,
    pub reg_min: f64,
    pub reg_max: f64,
    /// Sufficient-decrease constant for the backtracking line search.
    pub armijo: f64,
    /// Number of step sizes tried: 1, 1/2, ..., 2^-(n-1).
    pub max_backtrack: usize,
}

impl Default for IlqrOptions {
    fn default() -> Self {
        IlqrOptions {
            max_iters: 50,
            tol: 1e-6,
            reg_init: 1e-6,
            reg_min: 1e-9,
            reg_max: 1e8,
            armijo: 1e-4,
            max_backtrack: 11,
        }
    }
}

/// Finite-horizon tracking problem: quadratic stage and terminal costs
/// around references, box bounds on the control. References carry the
/// scalar type because the hover thrust reference depends on the believed
/// mass. Costs are written without the conventional one-half factor, so
/// gradients carry a factor of two.
#[derive(Clone, Debug)]
pub struct MpcProblem<S> {
    /// Number of control intervals; the rollout holds `horizon + 1` states.
    pub horizon: usize,
    pub dt: f64,
    pub q: Matrix<f64>,
    pub r: Matrix<f64>,
    pub qn: Matrix<f64>,
    pub x_ref: Vec<S>,
    pub u_ref: Vec<S>,
    pub u_lo: Vec<f64>,
    pub u_hi: Vec<f64>,
    pub opts: IlqrOptions,
}

impl MpcProblem<f64> {
    /// Attitude regulation weights for the quadrotor: position and
    /// velocity are left free, attitude is driven to the reference with
    /// rate damping, thrust is held near hover.
    pub fn attitude_default(params: &VehicleParams) -> Self {
        let mut q = vec![0.0; STATE_DIM];
        q[3] = 30.0;
        q[4] = 30.0;
        q[5] = 10.0;
        q[9] = 0.5;
        q[10] = 0.5;
        q[11] = 0.3;
        let qn: Vec<f64> = q.iter().map(|w| 10.0 * w).collect();
        let r = vec![0.05, 1.0, 1.0, 1.0];
        let bounds = crate::dynamics::ControlBounds::default();
        MpcProblem {
            horizon: 25,
            dt: 0.02,
            q: Matrix::diagonal(&q),
            r: Matrix::diagonal(&r),
            qn: Matrix::diagonal(&qn),
            x_ref: vec![0.0; STATE_DIM],
            u_ref: vec![params.mass * params.gravity, 0.0, 0.0, 0.0],
            u_lo: bounds.lo.to_vec(),
            u_hi: bounds.hi.to_vec(),
            opts: IlqrOptions::default(),
        }
    }

    /// Set the attitude reference (roll, pitch, yaw) in radians.
    pub fn with_attitude_ref(mut self, euler: [f64; 3]) -> Self {
        self.x_ref[3] = euler[0];
        self.x_ref[4] = euler[1];
        self.x_ref[5] = euler[2];
        self
    }

    /// Copy of the problem with references replaced by caller-supplied
    /// scalars, typically tape variables.
    pub fn lift(&self, x_ref: Vec<Var>, u_ref: Vec<Var>) -> MpcProblem<Var> {
        MpcProblem {
            horizon: self.horizon,
            dt: self.dt,
            q: self.q.clone(),
            r: self.r.clone(),
            qn: self.qn.clone(),
            x_ref,
            u_ref,
            u_lo: self.u_lo.clone(),
            u_hi: self.u_hi.clone(),
            opts: self.opts,
        }
    }
}

impl<S: Scalar> MpcProblem<S> {
    /// Check internal consistency against a model. Error strings name the
    /// offending field.
    pub fn validate(&self, model: &dyn Model<S>) -> Result<(), MpcError> {
        let (nx, nu) = (model.state_dim(), model.control_dim());
        if self.horizon == 0 {
            return Err(MpcError::Invalid("horizon: must be at least 1".into()));
        }
        if !(self.dt > 0.0 && self.dt.is_finite()) {
            return Err(MpcError::Invalid(format!("dt: {} not positive", self.dt)));
        }
        for (name, m, n) in [("q", &self.q, nx), ("qn", &self.qn, nx), ("r", &self.r, nu)] {
            if m.rows() != n || m.cols() != n {
                return Err(MpcError::Invalid(format!(
                    "{name}: expected {n}x{n}, got {}x{}",
                    m.rows(),
                    m.cols()
                )));
            }
        }
        for (name, m) in [("q", &self.q), ("qn", &self.qn)] {
            if cholesky(m, 1e-9).is_err() {
                return Err(MpcError::Invalid(format!(
                    "{name}: not positive semidefinite"
                )));
            }
        }
        // The control weight must be strictly positive definite or the
        // backward pass has no minimizer.
        let shifted = self.r.add_diag(-1e-12);
        if cholesky(&shifted, 0.0).is_err() {
            return Err(MpcError::Invalid("r: not positive definite".into()));
        }
        if self.x_ref.len() != nx {
            return Err(MpcError::Invalid(format!(
                "x_ref: length {} vs state dim {nx}",
                self.x_ref.len()
            )));
        }
        if self.u_ref.len() != nu {
            return Err(MpcError::Invalid(format!(
                "u_ref: length {} vs control dim {nu}",
                self.u_ref.len()
            )));
        }
        if self.u_lo.len() != nu || self.u_hi.len() != nu {
            return Err(MpcError::Invalid("u_lo/u_hi: wrong length".into()));
        }
        for k in 0..nu {
            if !(self.u_lo[k] < self.u_hi[k]) {
                return Err(MpcError::Invalid(format!(
                    "u_lo[{k}]={} not below u_hi[{k}]={}",
                    self.u_lo[k], self.u_hi[k]
                )));
            }
        }
        if self.opts.max_backtrack == 0 || self.opts.max_iters == 0 {
            return Err(MpcError::Invalid(
                "opts.max_iters/max_backtrack: must be positive".into(),
            ));
        }
        Ok(())
    }
}

/// One accepted or rejected solver iteration, for the trace log.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct IterRecord {
    pub iter: usize,
    pub cost: f64,
    pub du_inf: f64,
    pub reg: f64,
    pub alpha: f64,
    pub accepted: bool,
}

/// Converged (or best-effort) trajectory with solver diagnostics.
#[derive(Clone, Debug)]
pub struct IlqrResult {
    pub xs: Vec<Vec<f64>>,
    pub us: Vec<Vec<f64>>,
    pub cost: f64,
    pub iters: usize,
    pub converged: bool,
    /// Regularization used by the last backward pass; the tape replay
    /// reuses it so both passes solve the same equations.
    pub reg: f64,
    pub trace: Vec<IterRecord>,
}

/// Write a solver trace as CSV with header
/// `iter,cost,du_inf,reg,alpha,accepted`.
pub fn write_trace_csv(path: &std::path::Path, trace: &[IterRecord]) -> std::io::Result<()> {
    use std::io::Write;
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(f, "iter,cost,du_inf,reg,alpha,accepted")?;
    for r in trace {
        writeln!(
            f,
            "{},{:.9e},{:.3e},{:.3e},{:.4},{}",
            r.iter, r.cost, r.du_inf, r.reg, r.alpha, r.accepted as u8
        )?;
    }
    f.flush()
}

fn lift_matrix<S: Scalar>(m: &Matrix<f64>, factor: f64) -> Matrix<S> {
    Matrix::from_fn(m.rows(), m.cols(), |r, c| S::from_f64(factor * m[(r, c)]))
}

/// `factor * W * v` for an `f64` weight matrix and generic vector,
/// skipping structural zeros so diagonal weights stay cheap on tape.
fn weighted<S: Scalar>(w: &Matrix<f64>, v: &[S], factor: f64) -> Vec<S> {
    let mut out: Vec<S> = vec![S::zero(); w.rows()];
    for r in 0..w.rows() {
        for c in 0..w.cols() {
            let coeff = factor * w[(r, c)];
            if coeff != 0.0 {
                out[r] = out[r].clone() + v[c].scale(coeff);
            }
        }
    }
    out
}

fn quad_form<S: Scalar>(w: &Matrix<f64>, v: &[S]) -> S {
    let mut acc = S::zero();
    for r in 0..w.rows() {
        for c in 0..w.cols() {
            let coeff = w[(r, c)];
            if coeff != 0.0 {
                acc = acc + (v[r].clone() * v[c].clone()).scale(coeff);
            }
        }
    }
    acc
}

fn sub_vec<S: Scalar>(a: &[S], b: &[S]) -> Vec<S> {
    a.iter()
        .zip(b)
        .map(|(x, y)| x.clone() - y.clone())
        .collect()
}

/// Total trajectory cost, generic so the replayed step can express it in
/// tape variables.
pub fn trajectory_cost<S: Scalar>(problem: &MpcProblem<S>, xs: &[Vec<S>], us: &[Vec<S>]) -> S {
    let mut cost = S::zero();
    for k in 0..problem.horizon {
        let dx = sub_vec(&xs[k], &problem.x_ref);
        let du = sub_vec(&us[k], &problem.u_ref);
        cost = cost + quad_form(&problem.q, &dx) + quad_form(&problem.r, &du);
    }
    let dxn = sub_vec(&xs[problem.horizon], &problem.x_ref);
    cost + quad_form(&problem.qn, &dxn)
}

fn clamp_control(u: &mut [f64], lo: &[f64], hi: &[f64]) {
    for k in 0..u.len() {
        u[k] = u[k].clamp(lo[k], hi[k]);
    }
}

/// Which bound, if any, each control component currently sits on.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Pin {
    No,
    Lo,
    Hi,
}

fn pin_set(us: &[Vec<f64>], lo: &[f64], hi: &[f64]) -> Vec<Vec<Pin>> {
    const EDGE: f64 = 1e-9;
    us.iter()
        .map(|u| {
            u.iter()
                .enumerate()
                .map(|(k, v)| {
                    if (v - lo[k]).abs() <= EDGE {
                        Pin::Lo
                    } else if (v - hi[k]).abs() <= EDGE {
                        Pin::Hi
                    } else {
                        Pin::No
                    }
                })
                .collect()
        })
        .collect()
}

/// Feedforward and feedback gains from one backward pass.
struct Gains<S> {
    ff: Vec<Vec<S>>,
    fb: Vec<Matrix<S>>,
    /// First-order expected cost decrease at full step (non-positive).
    d1: f64,
    /// Largest feedforward component, the convergence measure.
    ff_inf: f64,
}

fn is_pd(m: &Matrix<f64>) -> bool {
    match cholesky(m, 0.0) {
        Ok(l) => (0..m.rows()).all(|i| l[(i, i)] > 0.0),
        Err(_) => false,
    }
}

/// Riccati sweep along `(xs, us)` with `reg` added to the control Hessian.
/// A component pinned at a bound is held there (zero gains) unless its
/// cost gradient points back into the feasible box, in which case it is
/// released; this is what lets the solver leave a bound it overshot onto.
/// The decision uses only scalar values, so a tape replay at the same
/// trajectory makes identical choices. Returns `None` if a reduced
/// control Hessian is not positive definite at this regularization.
fn backward_pass<S: Scalar>(
    model: &dyn Model<S>,
    problem: &MpcProblem<S>,
    xs: &[Vec<S>],
    us: &[Vec<S>],
    pins: &[Vec<Pin>],
    reg: f64,
) -> Result<Option<Gains<S>>, MpcError> {
    let nx = model.state_dim();
    let nu = model.control_dim();
    let h = problem.horizon;
    let q2: Matrix<S> = lift_matrix(&problem.q, 2.0);
    let r2: Matrix<S> = lift_matrix(&problem.r, 2.0);

    let dxn = sub_vec(&xs[h], &problem.x_ref);
    let mut vx: Vec<S> = weighted(&problem.qn, &dxn, 2.0);
    let mut vxx: Matrix<S> = lift_matrix(&problem.qn, 2.0);

    let mut ff: Vec<Vec<S>> = vec![Vec::new(); h];
    let mut fb: Vec<Matrix<S>> = vec![Matrix::zeros(0, 0); h];
    let mut d1 = 0.0;
    let mut ff_inf: f64 = 0.0;

    for k in (0..h).rev() {
        let (a, b) = model.jacobians(&xs[k], &us[k], problem.dt)?;
        let at = a.transpose();
        let bt = b.transpose();

        let dx = sub_vec(&xs[k], &problem.x_ref);
        let du = sub_vec(&us[k], &problem.u_ref);
        let mut qx = weighted(&problem.q, &dx, 2.0);
        let atvx = at.matvec(&vx);
        for i in 0..nx {
            qx[i] = qx[i].clone() + atvx[i].clone();
        }
        let mut qu = weighted(&problem.r, &du, 2.0);
        let btvx = bt.matvec(&vx);
        for i in 0..nu {
            qu[i] = qu[i].clone() + btvx[i].clone();
        }

        let btvxx = bt.matmul(&vxx);
        let qxx = q2.add(&at.matmul(&vxx).matmul(&a));
        let quu = r2.add(&btvxx.matmul(&b)).add_diag(reg);
        let qux = btvxx.matmul(&a);

        let free: Vec<usize> = (0..nu)
            .filter(|&i| match pins[k][i] {
                Pin::No => true,
                // A descent step moves along -qu; release the component
                // if that direction re-enters the box.
                Pin::Lo => qu[i].value() < 0.0,
                Pin::Hi => qu[i].value() > 0.0,
            })
            .collect();
        let mut kk: Vec<S> = vec![S::zero(); nu];
        let mut bigk: Matrix<S> = Matrix::zeros(nu, nx);
        if !free.is_empty() {
            let nf = free.len();
            let quu_ff = Matrix::from_fn(nf, nf, |r, c| quu[(free[r], free[c])].clone());
            if !is_pd(&quu_ff.values()) {
                return Ok(None);
            }
            // Solve for feedforward and feedback in one factorization:
            // rhs columns are [qu | qux].
            let rhs = Matrix::from_fn(nf, 1 + nx, |r, c| {
                if c == 0 {
                    qu[free[r]].clone()
                } else {
                    qux[(free[r], c - 1)].clone()
                }
            });
            let sol = solve_linear_mat(&quu_ff, &rhs)?;
            for (ri, &i) in free.iter().enumerate() {
                kk[i] = -sol[(ri, 0)].clone();
                for c in 0..nx {
                    bigk[(i, c)] = -sol[(ri, c + 1)].clone();
                }
            }
        }

        for i in 0..nu {
            d1 += kk[i].value() * qu[i].value();
            ff_inf = ff_inf.max(kk[i].value().abs());
        }

        // Value function update with the regularized Hessian and the
        // zeroed clamped rows, consistent with the gains above.
        let kt = Matrix::from_fn(nx, nu, |r, c| bigk[(c, r)].clone());
        let quuk = quu.matvec(&kk);
        let ktquuk = kt.matmul(&quu).matmul(&bigk);
        let ktqux = kt.matmul(&qux);
        let quxt_k = {
            let quxt = qux.transpose();
            let mut out: Vec<S> = quxt.matvec(&kk);
            let ktqu = kt.matvec(&qu);
            let ktquuk_v = kt.matvec(&quuk);
            for i in 0..nx {
                out[i] = out[i].clone() + ktqu[i].clone() + ktquuk_v[i].clone();
            }
            out
        };
        for i in 0..nx {
            vx[i] = qx[i].clone() + quxt_k[i].clone();
        }
        vxx = qxx.add(&ktquuk).add(&ktqux).add(&ktqux.transpose());
        // Symmetrize to stop roundoff drift over long horizons.
        vxx = vxx.add(&vxx.transpose()).scale(0.5);

        ff[k] = kk;
        fb[k] = bigk;
    }

    Ok(Some(Gains {
        ff,
        fb,
        d1,
        ff_inf,
    }))
}

fn rollout_f64(
    model: &dyn Model<f64>,
    problem: &MpcProblem<f64>,
    x0: &[f64],
    us: &[Vec<f64>],
) -> Result<Vec<Vec<f64>>, DynamicsError> {
    let mut xs = Vec::with_capacity(problem.horizon + 1);
    xs.push(x0.to_vec());
    for u in us {
        let next = model.step(xs.last().unwrap(), u, problem.dt)?;
        if next.iter().any(|v| !v.is_finite()) {
            return Err(DynamicsError::NonFinite {
                t: xs.len() as f64 * problem.dt,
            });
        }
        xs.push(next);
    }
    Ok(xs)
}

/// Solve the tracking problem from `x0`, warm started at `us_init`.
pub fn ilqr_solve(
    model: &dyn Model<f64>,
    problem: &MpcProblem<f64>,
    x0: &[f64],
    us_init: &[Vec<f64>],
) -> Result<IlqrResult, MpcError> {
    problem.validate(model)?;
    if x0.iter().any(|v| !v.is_finite()) {
        return Err(MpcError::NonFiniteInput);
    }
    assert_eq!(us_init.len(), problem.horizon, "warm start length");

    let mut us: Vec<Vec<f64>> = us_init.to_vec();
    for u in us.iter_mut() {
        clamp_control(u, &problem.u_lo, &problem.u_hi);
    }
    let mut xs = rollout_f64(model, problem, x0, &us)?;
    let mut cost = trajectory_cost(problem, &xs, &us);
    let mut reg = problem.opts.reg_init.max(problem.opts.reg_min);
    let mut trace = Vec::new();
    let mut converged = false;
    let mut iters = 0;

    'outer: for iter in 0..problem.opts.max_iters {
        iters = iter + 1;
        let pins = pin_set(&us, &problem.u_lo, &problem.u_hi);
        let gains = loop {
            match backward_pass(model, problem, &xs, &us, &pins, reg)? {
                Some(g) => break g,
                None => {
                    reg *= 10.0;
                    if reg > problem.opts.reg_max {
                        break 'outer;
                    }
                }
            }
        };

        if gains.ff_inf < problem.opts.tol {
            converged = true;
            trace.push(IterRecord {
                iter,
                cost,
                du_inf: gains.ff_inf,
                reg,
                alpha: 0.0,
                accepted: true,
            });
            break;
        }

        let mut accepted = false;
        let mut alpha = 1.0;
        for _ in 0..problem.opts.max_backtrack {
            let mut xs_new = Vec::with_capacity(problem.horizon + 1);
            let mut us_new = Vec::with_capacity(problem.horizon);
            xs_new.push(x0.to_vec());
            let mut feasible = true;
            for k in 0..problem.horizon {
                let xk: &Vec<f64> = &xs_new[k];
                let mut u = us[k].clone();
                for i in 0..u.len() {
                    let mut fb = 0.0;
                    for c in 0..xk.len() {
                        fb += gains.fb[k][(i, c)] * (xk[c] - xs[k][c]);
                    }
                    u[i] += alpha * gains.ff[k][i] + fb;
                }
                clamp_control(&mut u, &problem.u_lo, &problem.u_hi);
                match model.step(xk, &u, problem.dt) {
                    Ok(next) if next.iter().all(|v| v.is_finite()) => {
                        xs_new.push(next);
                        us_new.push(u);
                    }
                    _ => {
                        feasible = false;
                        break;
                    }
                }
            }
            if feasible {
                let cost_new = trajectory_cost(problem, &xs_new, &us_new);
                let sufficient = cost_new <= cost + problem.opts.armijo * alpha * gains.d1;
                if cost_new.is_finite() && (sufficient || cost_new < cost) {
                    let mut du_inf: f64 = 0.0;
                    for k in 0..problem.horizon {
                        for i in 0..us[k].len() {
                            du_inf = du_inf.max((us_new[k][i] - us[k][i]).abs());
                        }
                    }
                    xs = xs_new;
                    us = us_new;
                    cost = cost_new;
                    reg = (reg / 2.0).max(problem.opts.reg_min);
                    trace.push(IterRecord {
                        iter,
                        cost,
                        du_inf,
                        reg,
                        alpha,
                        accepted: true,
                    });
                    accepted = true;
                    if du_inf < problem.opts.tol {
                        converged = true;
                        break 'outer;
                    }
                    break;
                }
            }
            alpha *= 0.5;
        }

        if !accepted {
            // A failed line search with negligible predicted improvement
            // means the iterate already sits at the numerical optimum;
            // raising the regularization from here would only shrink the
            // gains until the step-size test fires at a meaningless
            // regularization level.
            if gains.d1.abs() <= 1e-12 * (1.0 + cost.abs()) {
                converged = true;
                break;
            }
            trace.push(IterRecord {
                iter,
                cost,
                du_inf: f64::INFINITY,
                reg,
                alpha: 0.0,
                accepted: false,
            });
            reg *= 10.0;
            if reg > problem.opts.reg_max {
                break;
            }
        }
    }

    Ok(IlqrResult {
        xs,
        us,
        cost,
        iters,
        converged,
        reg,
        trace,
    })
}

/// Output of one receding-horizon step.
#[derive(Clone, Debug)]
pub struct MpcStepOutput {
    /// First control of the solved plan, already clamped.
    pub u: Vec<f64>,
    pub result: IlqrResult,
    pub solve_time: std::time::Duration,
}

/// Receding-horizon wrapper: solves, applies the first control, and warm
/// starts the next call by shifting the previous plan one interval and
/// repeating its last control.
pub struct MpcController {
    pub model: Box<dyn Model<f64>>,
    pub problem: MpcProblem<f64>,
    warm: Option<Vec<Vec<f64>>>,
}

impl MpcController {
    pub fn new(model: Box<dyn Model<f64>>, problem: MpcProblem<f64>) -> Result<Self, MpcError> {
        problem.validate(model.as_ref())?;
        Ok(MpcController {
            model,
            problem,
            warm: None,
        })
    }

    /// Forget the warm start (start of a new episode).
    pub fn reset(&mut self) {
        self.warm = None;
    }

    pub fn mpc_step(&mut self, x: &[f64]) -> Result<MpcStepOutput, MpcError> {
        let start = Instant::now();
        let us_init = match &self.warm {
            Some(prev) => {
                let mut shifted: Vec<Vec<f64>> = prev[1..].to_vec();
                shifted.push(prev.last().unwrap().clone());
                shifted
            }
            None => {
                let u0: Vec<f64> = self.problem.u_ref.clone();
                vec![u0; self.problem.horizon]
            }
        };
        let result = ilqr_solve(self.model.as_ref(), &self.problem, x, &us_init)?;
        self.warm = Some(result.us.clone());
        Ok(MpcStepOutput {
            u: result.us[0].clone(),
            result,
            solve_time: start.elapsed(),
        })
    }
}

/// Replay one solver iteration at the converged point with tape-variable
/// parameters: a backward pass at the recorded regularization, then a
/// full-step nonlinear rollout applying the gains. Values reproduce the
/// `f64` solution; adjoints carry its sensitivity to whatever the model
/// and references were built from. Returns the replayed states and
/// controls, `horizon + 1` and `horizon` long.
pub fn record_step_on_tape(
    model: &dyn Model<Var>,
    problem: &MpcProblem<Var>,
    x0: &[f64],
    sol: &IlqrResult,
) -> Result<(Vec<Vec<Var>>, Vec<Vec<Var>>), MpcError> {
    let pins = pin_set(&sol.us, &problem.u_lo, &problem.u_hi);
    let us_c: Vec<Vec<Var>> = sol
        .us
        .iter()
        .map(|u| u.iter().map(|v| Var::constant(*v)).collect())
        .collect();
    // Re-roll the nominal under the lifted dynamics instead of freezing
    // the solved states as constants. The controls stay detached, but the
    // nominal states must carry parameter sensitivity: a frozen nominal is
    // dynamically inconsistent the moment the parameters move, and the
    // defect terms the backward pass drops would no longer be zero. With
    // the nominal re-rolled those defects vanish identically, so the
    // recorded sweep differentiates the actual solution map. At the
    // solved parameter values this reproduces `sol.xs` exactly.
    let mut xs_c: Vec<Vec<Var>> = Vec::with_capacity(problem.horizon + 1);
    xs_c.push(x0.iter().map(|v| Var::constant(*v)).collect());
    for k in 0..problem.horizon {
        let next = model.step(&xs_c[k], &us_c[k], problem.dt)?;
        xs_c.push(next);
    }
    let gains = backward_pass(model, problem, &xs_c, &us_c, &pins, sol.reg)?
        .ok_or_else(|| MpcError::Invalid("replay: control Hessian lost definiteness".into()))?;

    let mut xs = Vec::with_capacity(problem.horizon + 1);
    let mut us = Vec::with_capacity(problem.horizon);
    xs.push(x0.iter().map(|v| Var::constant(*v)).collect::<Vec<Var>>());
    for k in 0..problem.horizon {
        let xk: &Vec<Var> = &xs[k];
        let dx: Vec<Var> = sub_vec(xk, &xs_c[k]);
        let fb = gains.fb[k].matvec(&dx);
        let mut u: Vec<Var> = Vec::with_capacity(us_c[k].len());
        for i in 0..us_c[k].len() {
            // Clamped components stay pinned at their bound; their gain
            // rows are zero so this adds nothing but keeps the expression
            // shape uniform.
            u.push(us_c[k][i].clone() + gains.ff[k][i].clone() + fb[i].clone());
        }
        let next = model.step(xk, &u, problem.dt)?;
        us.push(u);
        xs.push(next);
    }
    Ok((xs, us))
}

/// Gradient of a scalar function of the solved trajectory with respect to
/// parameters, by the solver-replay route. The builder receives a fresh
/// tape and the parameter values and must return the lifted model,
/// problem, and parameter variables; the loss closure maps the replayed
/// `(xs, us)` to the quantity of interest.
pub fn backward_fixed_point(
    theta: &[f64],
    build: &dyn Fn(&Tape, &[f64]) -> (Box<dyn Model<Var>>, MpcProblem<Var>, Vec<Var>),
    x0: &[f64],
    sol: &IlqrResult,
    loss: &dyn Fn(&[Vec<Var>], &[Vec<Var>]) -> Var,
) -> Result<(f64, Vec<f64>), MpcError> {
    let tape = Tape::new();
    let (model, problem, theta_vars) = build(&tape, theta);
    let (xs, us) = record_step_on_tape(model.as_ref(), &problem, x0, sol)?;
    let l = loss(&xs, &us);
    let value = l.value();
    let grads = tape.backward(&l);
    Ok((value, theta_vars.iter().map(|v| grads.wrt(v)).collect()))
}
