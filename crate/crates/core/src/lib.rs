//! Verification and constructive improvement of controls for Mayer
//! problems with k-th order differential constraints
//! `d^k x / dt^k = f(t, x, ..., x_(k-1), u)`.
//!
//! The pipeline: parse the dynamics and terminal cost symbolically
//! ([`expr`]), prolong them ([`jets`]), integrate the state forward
//! ([`forward`]), integrate the co-state jet backward from the
//! higher-order terminal conditions ([`adjoint`]), maximize the Pontryagin
//! function over the control set ([`pontryagin`]), and — whenever the
//! maximum principle is violated — lower the cost with a width-searched
//! needle modification ([`improve`]). [`oracle`] holds the independent
//! brute-force and finite-difference baselines.
//!
//! Everything is deterministic: fixed-step RK4 aligned to control
//! breakpoints, seeded randomness, order-preserving parallel maps. The
//! `parallel` feature (on by default) runs the sweep loops on rayon;
//! without it the same code paths run sequentially.

pub mod adjoint;
pub mod control;
pub mod dynamics;
pub mod expr;
pub mod forward;
pub mod improve;
pub mod jets;
pub mod oracle;
pub mod par;
pub mod pontryagin;

pub use adjoint::{
    crosscheck, integrate_adjoint, reduced_adjoint, terminal_jet, AdjointTrajectory,
    TerminalConvention,
};
pub use control::{dist, needle, smooth_needle, ControlCurve, NeedleParams, Piece};
pub use dynamics::{pontryagin_lagrangian, validate, ControlSet, Problem, ValidationReport};
pub use expr::{Env, Expr, Schema, Var};
pub use forward::{integrate_forward, terminal_cost, IntegrateOptions, Trajectory};
pub use improve::{improve_step, solve, ImproveOptions, OptimizeResult, Termination};
pub use jets::{adjoint_rhs, build_derived_system, dt_full, dt_partial, DerivedSystem, Jet};
pub use oracle::{brute_force, default_levels, lipschitz_check, needle_gain_estimate};
pub use par::Parallelism;
pub use pontryagin::{
    default_tau_grid, hamiltonian, maximize, pfunction, pmp_report, v_epsilon, PmpReport,
};
