//! Forward state integration: first-order reduction of the k-th order
//! constraint, fixed-step RK4 with breakpoint-aligned steps, and jet
//! population up to order `2k-2` through the derived system.

use thiserror::Error;

use crate::control::{ControlCurve, ControlError};
use crate::dynamics::Problem;
use crate::expr::{Env, ExprError};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum IntegrateError {
    #[error("state became non-finite at t = {0}")]
    NonFiniteState(f64),
    #[error("step too coarse: Richardson estimate {estimate} above tolerance {tol}")]
    StepTooCoarse { estimate: f64, tol: f64 },
    #[error(transparent)]
    Control(#[from] ControlError),
    #[error(transparent)]
    Expr(#[from] ExprError),
}

/// Integration controls. `grid_n` is the number of uniform base intervals;
/// breakpoints of the control are always inserted as grid points.
#[derive(Debug, Clone, Copy)]
pub struct IntegrateOptions {
    pub grid_n: usize,
    /// Relative tolerance on the Richardson terminal estimate.
    pub richardson_tol: f64,
}

impl Default for IntegrateOptions {
    fn default() -> Self {
        IntegrateOptions {
            grid_n: 2048,
            richardson_tol: 1e-8,
        }
    }
}

/// First-order reduction `y = (x, x_(1), ..., x_(k-1))` of the constraint.
/// The bijection between initial jets and reduced initial vectors is the
/// identity on components.
#[derive(Debug, Clone, Copy)]
pub struct ReducedSystem<'a> {
    problem: &'a Problem,
}

impl<'a> ReducedSystem<'a> {
    pub fn dim(&self) -> usize {
        self.problem.state_dim * self.problem.order
    }

    /// Reduced initial vector from the initial jet (identity map).
    pub fn initial_state(&self) -> Vec<f64> {
        self.problem.initial_jet.concat()
    }

    /// `ydot = (y_1, ..., y_{k-1}, f(t, y, u))`; `env` is reusable
    /// evaluation scratch.
    pub fn rhs(
        &self,
        env: &mut Env,
        t: f64,
        y: &[f64],
        u: &[f64],
        out: &mut [f64],
    ) -> Result<(), ExprError> {
        let n = self.problem.state_dim;
        let k = self.problem.order;
        out[..n * (k - 1)].copy_from_slice(&y[n..]);
        env.set_time(t);
        for s in 0..k {
            env.set_state_level(s, &y[s * n..(s + 1) * n]);
        }
        env.set_control_level(0, u);
        for (i, f) in self.problem.dynamics.iter().enumerate() {
            out[n * (k - 1) + i] = f.eval(env)?;
        }
        Ok(())
    }

    pub fn scratch_env(&self) -> Env {
        Env::for_problem(
            self.problem.order,
            self.problem.state_dim,
            self.problem.control_dim,
        )
    }
}

pub fn reduce_first_order(problem: &Problem) -> ReducedSystem<'_> {
    ReducedSystem { problem }
}

/// A forward solution: shared time grid, per-node x-jets of orders
/// `0..2k-2`, the generating control, and the Richardson error estimate.
#[derive(Debug, Clone)]
pub struct Trajectory {
    times: Vec<f64>,
    /// Node-major values: `jets[node][order][i]`.
    jets: Vec<Vec<Vec<f64>>>,
    control: ControlCurve,
    state_dim: usize,
    order: usize,
    richardson: f64,
}

impl Trajectory {
    pub fn times(&self) -> &[f64] {
        &self.times
    }

    pub fn control(&self) -> &ControlCurve {
        &self.control
    }

    pub fn state_dim(&self) -> usize {
        self.state_dim
    }

    /// Highest stored jet order (`2k-2`).
    pub fn max_jet_order(&self) -> usize {
        2 * self.order - 2
    }

    pub fn richardson_estimate(&self) -> f64 {
        self.richardson
    }

    pub fn node_jets(&self, node: usize) -> &[Vec<f64>] {
        &self.jets[node]
    }

    pub fn terminal_jets(&self) -> &[Vec<f64>] {
        self.jets.last().unwrap()
    }

    /// Jet levels at an arbitrary time, linear between nodes (exact at
    /// nodes).
    pub fn sample(&self, t: f64) -> Vec<Vec<f64>> {
        let (i, w) = self.locate(t);
        if w == 0.0 {
            return self.jets[i].clone();
        }
        let (a, b) = (&self.jets[i], &self.jets[i + 1]);
        a.iter()
            .zip(b.iter())
            .map(|(la, lb)| {
                la.iter()
                    .zip(lb.iter())
                    .map(|(&xa, &xb)| xa + w * (xb - xa))
                    .collect()
            })
            .collect()
    }

    fn locate(&self, t: f64) -> (usize, f64) {
        let times = &self.times;
        if t <= times[0] {
            return (0, 0.0);
        }
        if t >= *times.last().unwrap() {
            return (times.len() - 1, 0.0);
        }
        let hi = times.partition_point(|&x| x <= t);
        let i = hi - 1;
        if times[i] == t {
            (i, 0.0)
        } else {
            (i, (t - times[i]) / (times[i + 1] - times[i]))
        }
    }

    /// CSV export: `t, x<i>_<s> (s = 0..2k-2), u<a>`.
    pub fn to_csv(&self) -> String {
        let mut out = String::new();
        out.push('t');
        for s in 0..=self.max_jet_order() {
            for i in 0..self.state_dim {
                out.push_str(&format!(",x{}_{}", i + 1, s));
            }
        }
        for a in 0..self.control.dim() {
            out.push_str(&format!(",u{}", a + 1));
        }
        out.push('\n');
        for (node, &t) in self.times.iter().enumerate() {
            out.push_str(&format!("{t}"));
            for level in &self.jets[node] {
                for x in level {
                    out.push_str(&format!(",{x}"));
                }
            }
            let u = self.control.eval(t).unwrap_or_else(|_| vec![f64::NAN; self.control.dim()]);
            for x in &u {
                out.push_str(&format!(",{x}"));
            }
            out.push('\n');
        }
        out
    }
}

/// The shared time grid: `grid_n` uniform intervals refined with every
/// control breakpoint. Nearly-coincident points collapse (1e-13 of the
/// horizon) so ramp endpoints survive but duplicates do not.
pub fn build_grid(horizon: f64, grid_n: usize, breakpoints: &[f64]) -> Vec<f64> {
    let mut grid: Vec<f64> = (0..=grid_n)
        .map(|i| horizon * i as f64 / grid_n as f64)
        .collect();
    grid.extend(breakpoints.iter().copied().filter(|&b| b > 0.0 && b < horizon));
    grid.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let tol = horizon * 1e-13;
    let mut out: Vec<f64> = Vec::with_capacity(grid.len());
    for t in grid {
        match out.last() {
            Some(&last) if t - last <= tol => {}
            _ => out.push(t),
        }
    }
    // Keep the exact endpoints.
    *out.last_mut().unwrap() = horizon;
    out
}

/// Classic RK4 over `[t0, t1]`; control sampled at the stage times with
/// the exact endpoint, never past it.
fn rk4_step(
    sys: &ReducedSystem<'_>,
    control: &ControlCurve,
    env: &mut Env,
    t0: f64,
    t1: f64,
    y: &mut [f64],
    scratch: &mut [Vec<f64>],
) -> Result<(), IntegrateError> {
    let dim = y.len();
    let h = t1 - t0;
    let tm = t0 + 0.5 * h;
    let (k1, k2, k3, k4, tmp) = {
        let (a, rest) = scratch.split_at_mut(1);
        let (b, rest) = rest.split_at_mut(1);
        let (c, rest) = rest.split_at_mut(1);
        let (d, e) = rest.split_at_mut(1);
        (&mut a[0], &mut b[0], &mut c[0], &mut d[0], &mut e[0])
    };
    let u0 = control.eval_in_piece(tm, t0)?;
    sys.rhs(env, t0, y, &u0, k1)?;
    let um = control.eval_in_piece(tm, tm)?;
    for i in 0..dim {
        tmp[i] = y[i] + 0.5 * h * k1[i];
    }
    sys.rhs(env, tm, tmp, &um, k2)?;
    for i in 0..dim {
        tmp[i] = y[i] + 0.5 * h * k2[i];
    }
    sys.rhs(env, tm, tmp, &um, k3)?;
    let u1 = control.eval_in_piece(tm, t1)?;
    for i in 0..dim {
        tmp[i] = y[i] + h * k3[i];
    }
    sys.rhs(env, t1, tmp, &u1, k4)?;
    for i in 0..dim {
        y[i] += h / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]);
    }
    if y.iter().any(|v| !v.is_finite()) {
        return Err(IntegrateError::NonFiniteState(t1));
    }
    Ok(())
}

fn integrate_on_grid(
    sys: &ReducedSystem<'_>,
    control: &ControlCurve,
    grid: &[f64],
    substeps: usize,
) -> Result<Vec<Vec<f64>>, IntegrateError> {
    let dim = sys.dim();
    let mut scratch = vec![vec![0.0; dim]; 5];
    let mut env = sys.scratch_env();
    let mut y = sys.initial_state();
    let mut states = Vec::with_capacity(grid.len());
    states.push(y.clone());
    for w in grid.windows(2) {
        let h = (w[1] - w[0]) / substeps as f64;
        for j in 0..substeps {
            let t0 = if j == 0 { w[0] } else { w[0] + h * j as f64 };
            let t1 = if j + 1 == substeps {
                w[1]
            } else {
                w[0] + h * (j + 1) as f64
            };
            rk4_step(sys, control, &mut env, t0, t1, &mut y, &mut scratch)?;
        }
        states.push(y.clone());
    }
    Ok(states)
}

/// Integrates the reduced system along the refined grid, populates jets
/// `k..2k-2` from the derived system with exact per-piece control jets,
/// and records a Richardson estimate from one round of step halving.
pub fn integrate_forward(
    problem: &Problem,
    control: &ControlCurve,
    opts: &IntegrateOptions,
) -> Result<Trajectory, IntegrateError> {
    let sys = reduce_first_order(problem);
    let grid = build_grid(problem.horizon, opts.grid_n, control.breakpoints());
    let states = integrate_on_grid(&sys, control, &grid, 1)?;
    let halved = integrate_on_grid(&sys, control, &grid, 2)?;

    let scale = states
        .last()
        .unwrap()
        .iter()
        .fold(1.0f64, |acc, v| acc.max(v.abs()));
    let estimate = states
        .last()
        .unwrap()
        .iter()
        .zip(halved.last().unwrap().iter())
        .fold(0.0f64, |acc, (a, b)| acc.max((a - b).abs()))
        / 15.0
        / scale;
    if estimate > opts.richardson_tol {
        return Err(IntegrateError::StepTooCoarse {
            estimate,
            tol: opts.richardson_tol,
        });
    }

    let n = problem.state_dim;
    let k = problem.order;
    let max_order = 2 * k - 2;
    let mut jets = Vec::with_capacity(grid.len());
    let mut env = Env::for_problem(k, n, problem.control_dim);
    for (node, y) in states.iter().enumerate() {
        let t = grid[node];
        let mut levels: Vec<Vec<f64>> =
            (0..k).map(|s| y[s * n..(s + 1) * n].to_vec()).collect();
        if max_order >= k {
            // Control jets one-sided from the right, matching the open
            // piece convention; at T the final piece applies.
            let u_jets = control.eval_jet(t, k.saturating_sub(2))?;
            env.set_time(t);
            for (s, level) in levels.iter().enumerate() {
                env.set_state_level(s, level);
            }
            for (s, level) in u_jets.iter().enumerate() {
                env.set_control_level(s, level);
            }
            for l in k..=max_order {
                let exprs = problem.derived.level(l);
                let mut level = Vec::with_capacity(n);
                for e in exprs {
                    level.push(e.eval(&env)?);
                }
                env.set_state_level(l, &level);
                levels.push(level);
            }
        }
        jets.push(levels);
    }

    Ok(Trajectory {
        times: grid,
        jets,
        control: control.clone(),
        state_dim: n,
        order: k,
        richardson: estimate,
    })
}

/// Terminal cost of a control: forward solve, then the cost at the final
/// jet.
pub fn terminal_cost(
    problem: &Problem,
    control: &ControlCurve,
    opts: &IntegrateOptions,
) -> Result<f64, IntegrateError> {
    let traj = integrate_forward(problem, control, opts)?;
    Ok(problem.eval_cost(traj.terminal_jets())?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dynamics::{ControlSet, Problem};
    use crate::expr::{parse, Schema};

    fn double_integrator() -> Problem {
        Problem::new(
            2,
            1.0,
            vec![parse("u1", &Schema::dynamics(2, 1, 1)).unwrap()],
            parse("x1_0", &Schema::cost(2, 1)).unwrap(),
            ControlSet::Box(vec![(-1.0, 1.0)]),
            vec![],
            None,
            vec![vec![0.0], vec![0.0]],
        )
        .unwrap()
    }

    fn scalar_k1(f: &str, x0: f64) -> Problem {
        Problem::new(
            1,
            1.0,
            vec![parse(f, &Schema::dynamics(1, 1, 1)).unwrap()],
            parse("x1_0", &Schema::cost(1, 1)).unwrap(),
            ControlSet::Box(vec![(-1.0, 1.0)]),
            vec![],
            None,
            vec![vec![x0]],
        )
        .unwrap()
    }

    #[test]
    fn reduction_dims() {
        let p = double_integrator();
        assert_eq!(reduce_first_order(&p).dim(), 2);
        let p1 = scalar_k1("u1", 0.0);
        assert_eq!(reduce_first_order(&p1).dim(), 1);
    }

    #[test]
    fn double_integrator_terminal_state() {
        let p = double_integrator();
        let u = ControlCurve::constant(vec![-1.0], 1.0);
        let traj = integrate_forward(&p, &u, &IntegrateOptions::default()).unwrap();
        let end = traj.terminal_jets();
        assert!((end[0][0] + 0.5).abs() < 1e-8, "x(1) = {}", end[0][0]);
        assert!((end[1][0] + 1.0).abs() < 1e-8, "xdot(1) = {}", end[1][0]);
        assert_eq!(end[2][0], -1.0); // derived jet equals the control
    }

    #[test]
    fn linear_k1_is_exact() {
        let p = scalar_k1("u1", 0.25);
        let u = ControlCurve::constant(vec![0.5], 1.0);
        let traj = integrate_forward(&p, &u, &IntegrateOptions::default()).unwrap();
        assert_eq!(traj.terminal_jets()[0][0], 0.75);
    }

    #[test]
    fn exponential_decay() {
        let p = scalar_k1("-x1_0", 1.0);
        let u = ControlCurve::constant(vec![0.0], 1.0);
        let traj = integrate_forward(&p, &u, &IntegrateOptions::default()).unwrap();
        assert!((traj.terminal_jets()[0][0] - (-1.0f64).exp()).abs() < 1e-8);
    }

    #[test]
    fn grid_includes_breakpoints() {
        let u = ControlCurve::constant(vec![0.0], 1.0);
        let v = crate::control::needle(
            &u,
            &crate::control::NeedleParams::new(0.5, vec![1.0], 0.0123, 1.0).unwrap(),
        );
        let grid = build_grid(1.0, 64, v.breakpoints());
        assert!(grid.iter().any(|&t| t == 0.5 - 0.0123));
        assert!(grid.iter().any(|&t| t == 0.5));
        assert!(grid.windows(2).all(|w| w[0] < w[1]));
    }

    #[test]
    fn jet_consistency_against_finite_differences() {
        // k=2 damped oscillator with constant control: stored x_(s+1)
        // matches centred differences of x_(s) to O(h^2).
        let p = Problem::new(
            2,
            1.0,
            vec![parse("-x1_0-0.5*x1_1+u1", &Schema::dynamics(2, 1, 1)).unwrap()],
            parse("x1_0", &Schema::cost(2, 1)).unwrap(),
            ControlSet::Box(vec![(-1.0, 1.0)]),
            vec![],
            None,
            vec![vec![1.0], vec![0.0]],
        )
        .unwrap();
        let u = ControlCurve::constant(vec![0.3], 1.0);
        let opts = IntegrateOptions {
            grid_n: 512,
            ..Default::default()
        };
        let traj = integrate_forward(&p, &u, &opts).unwrap();
        let times = traj.times();
        let h = times[1] - times[0];
        let mut worst = 0.0f64;
        for node in 1..times.len() - 1 {
            for s in 0..=2 * 2 - 3 {
                let fd = (traj.node_jets(node + 1)[s][0] - traj.node_jets(node - 1)[s][0])
                    / (2.0 * h);
                let stored = traj.node_jets(node)[s + 1][0];
                worst = worst.max((fd - stored).abs());
            }
        }
        assert!(worst < 5.0 * h * h, "worst deviation {worst} vs h^2 {}", h * h);
    }

    #[test]
    fn richardson_estimate_bounds_halving_change() {
        let p = scalar_k1("sin(x1_0)+u1", 0.5);
        let u = ControlCurve::constant(vec![0.4], 1.0);
        let coarse = IntegrateOptions {
            grid_n: 64,
            richardson_tol: 1.0,
        };
        let t64 = integrate_forward(&p, &u, &coarse).unwrap();
        let t128 = integrate_forward(
            &p,
            &u,
            &IntegrateOptions {
                grid_n: 128,
                richardson_tol: 1.0,
            },
        )
        .unwrap();
        let scale = t64.terminal_jets()[0][0].abs().max(1.0);
        let change = (t64.terminal_jets()[0][0] - t128.terminal_jets()[0][0]).abs() / scale;
        assert!(change <= 16.0 * t64.richardson_estimate().max(f64::EPSILON));
    }

    #[test]
    fn blowup_is_reported() {
        let p = scalar_k1("x1_0^2", 3.0);
        let u = ControlCurve::constant(vec![0.0], 1.0);
        let err = integrate_forward(&p, &u, &IntegrateOptions::default()).unwrap_err();
        assert!(matches!(
            err,
            IntegrateError::NonFiniteState(_) | IntegrateError::Expr(ExprError::NonFiniteResult(_))
        ));
    }
}
