//! Quadrotor attitude control lab.
//!
//! The library stacks up from a small autodiff/linear-algebra core into a
//! differentiable model-predictive attitude controller for a quadrotor,
//! a simulated IMU with a learnable denoiser, a self-supervised training
//! loop that tunes the denoiser and the controller's physical parameters
//! online, and an experiment harness that measures settling time, tracking
//! error and wind-failure thresholds over seeded scenario grids.
//!
//! Layering (each module only reaches downward):
//!
//! ```text
//! harness / trainer
//!     sim            closed loop: plant + sensors + estimator + controller
//!     mpc            iLQR solver, fixed-point differentiation, KKT oracle
//!     estimator      IMU denoiser MLP + attitude pre-integration
//!     sensors        IMU noise model, plant noise, wind events
//!     dynamics       Newton-Euler quadrotor model, RK4, linearization
//!     math           reverse-mode tape, dense matrices, LU solve
//! ```

pub mod config;
pub mod dynamics;
pub mod estimator;
pub mod harness;
pub mod math;
pub mod mpc;
pub mod sensors;
pub mod sim;
pub mod trainer;
