//! Co-state computation: terminal jet from the triangular higher-order
//! conditions, backward integration of the k-th order adjoint equation,
//! and an independent cross-check against the classical adjoint of the
//! first-order reduction.
//!
//! Both integrations run as forward RK4 in reversed time with negated
//! right-hand side, on the exact forward grid, so node interpolation of
//! the state jets is exact.

use thiserror::Error;

use crate::dynamics::Problem;
use crate::expr::{Env, ExprError};
use crate::forward::Trajectory;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AdjointError {
    #[error("trajectory does not carry jets up to order {needed}")]
    MissingJets { needed: usize },
    #[error("co-state became non-finite at t = {0}")]
    NonFiniteState(f64),
    #[error("adjoint and reduced co-state live on different grids")]
    GridMismatch,
    #[error(transparent)]
    Expr(#[from] ExprError),
    #[error(transparent)]
    Control(#[from] crate::control::ControlError),
}

/// Sign convention for the terminal conditions. `DerivedFromCondi` is the
/// expansion of the good-pair identity and agrees with the classical
/// `p(T) = -dC/dx` at `k = 1`; `AsPrinted` flips the overall sign of both
/// terms at every level. The needle-improvement direction adjudicates
/// between them at run time.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum TerminalConvention {
    #[default]
    DerivedFromCondi,
    AsPrinted,
}

/// Co-state solution on the forward grid: per-node p-jets of orders
/// `0..k-1`.
#[derive(Debug, Clone)]
pub struct AdjointTrajectory {
    times: Vec<f64>,
    /// `pjets[node][order][i]`.
    pjets: Vec<Vec<Vec<f64>>>,
    pub convention: TerminalConvention,
    pub crosscheck_deviation: Option<f64>,
}

impl AdjointTrajectory {
    pub fn times(&self) -> &[f64] {
        &self.times
    }

    pub fn node_pjets(&self, node: usize) -> &[Vec<f64>] {
        &self.pjets[node]
    }

    pub fn terminal_pjets(&self) -> &[Vec<f64>] {
        self.pjets.last().unwrap()
    }

    /// p-jet levels at an arbitrary time, linear between nodes.
    pub fn sample(&self, t: f64) -> Vec<Vec<f64>> {
        sample_levels(&self.times, &self.pjets, t)
    }

    /// The multiplier curve `p(t)` itself (order-0 level).
    pub fn costate(&self, t: f64) -> Vec<f64> {
        self.sample(t).swap_remove(0)
    }

    /// CSV export: `t, p<i>_<s>` for `s = 0..k-1`; appends the reduced
    /// blocks when given.
    pub fn to_csv(&self, reduced: Option<&ReducedCostate>) -> String {
        let k = self.pjets[0].len();
        let n = self.pjets[0][0].len();
        let mut out = String::from("t");
        for s in 0..k {
            for i in 0..n {
                out.push_str(&format!(",p{}_{}", i + 1, s));
            }
        }
        if reduced.is_some() {
            for l in 0..k {
                for i in 0..n {
                    out.push_str(&format!(",ptilde{}_{}", i + 1, l));
                }
            }
        }
        out.push('\n');
        for (node, &t) in self.times.iter().enumerate() {
            out.push_str(&format!("{t}"));
            for level in &self.pjets[node] {
                for v in level {
                    out.push_str(&format!(",{v}"));
                }
            }
            if let Some(r) = reduced {
                for level in &r.values[node] {
                    for v in level {
                        out.push_str(&format!(",{v}"));
                    }
                }
            }
            out.push('\n');
        }
        out
    }
}

/// Classical co-state of the nk-dimensional reduced system.
#[derive(Debug, Clone)]
pub struct ReducedCostate {
    times: Vec<f64>,
    /// `values[node][l][i]` = `ptilde_{l,i}`.
    values: Vec<Vec<Vec<f64>>>,
}

impl ReducedCostate {
    pub fn times(&self) -> &[f64] {
        &self.times
    }

    pub fn node_values(&self, node: usize) -> &[Vec<f64>] {
        &self.values[node]
    }

    /// Multiplier of the only u-dependent reduced equation.
    pub fn top_multiplier(&self, node: usize) -> &[f64] {
        self.values[node].last().unwrap()
    }
}

fn sample_levels(times: &[f64], values: &[Vec<Vec<f64>>], t: f64) -> Vec<Vec<f64>> {
    if t <= times[0] {
        return values[0].clone();
    }
    if t >= *times.last().unwrap() {
        return values.last().unwrap().clone();
    }
    let hi = times.partition_point(|&x| x <= t);
    let i = hi - 1;
    if times[i] == t {
        return values[i].clone();
    }
    let w = (t - times[i]) / (times[i + 1] - times[i]);
    values[i]
        .iter()
        .zip(values[i + 1].iter())
        .map(|(a, b)| {
            a.iter()
                .zip(b.iter())
                .map(|(&x, &y)| x + w * (y - x))
                .collect()
        })
        .collect()
}

fn check_jets(problem: &Problem, traj: &Trajectory) -> Result<(), AdjointError> {
    let needed = 2 * problem.order - 2;
    if traj.max_jet_order() < needed {
        return Err(AdjointError::MissingJets { needed });
    }
    Ok(())
}

/// Fills an evaluation environment with the trajectory data at `t`; the
/// control is read from the piece owning `anchor` so that RK stages
/// landing on a breakpoint stay inside the step's own piece.
fn env_at(traj: &Trajectory, anchor: f64, t: f64, env: &mut Env) -> Result<(), AdjointError> {
    env.set_time(t);
    for (s, level) in traj.sample(t).iter().enumerate() {
        env.set_state_level(s, level);
    }
    let u = traj.control().eval_in_piece(anchor, t)?;
    env.set_control_level(0, &u);
    Ok(())
}

/// Terminal p-jet (orders `0..k-1`) from the triangular chain
///
/// ```text
/// p_(l)i(T) = sigma * [ (-1)^l dC/dx^i_(k-1-l)
///                     + sum_{h<l} (-1)^{l+h} D^h(p_m df^m/dx^i_(k-l+h)) ]|_T
/// ```
///
/// with `sigma = -1` for `DerivedFromCondi` and `+1` for `AsPrinted`.
/// Level `l` reads only p-jets of orders below `l`.
pub fn terminal_jet(
    problem: &Problem,
    traj: &Trajectory,
    convention: TerminalConvention,
) -> Result<Vec<Vec<f64>>, AdjointError> {
    check_jets(problem, traj)?;
    let k = problem.order;
    let n = problem.state_dim;
    let horizon = problem.horizon;
    let sigma = match convention {
        TerminalConvention::DerivedFromCondi => -1.0,
        TerminalConvention::AsPrinted => 1.0,
    };
    let mut env = Env::for_problem(k, n, problem.control_dim);
    env_at(traj, horizon, horizon, &mut env)?;

    let mut levels: Vec<Vec<f64>> = Vec::with_capacity(k);
    for l in 0..k {
        let sign_c = if l % 2 == 0 { 1.0 } else { -1.0 };
        let mut level = Vec::with_capacity(n);
        for i in 0..n {
            let mut value = sign_c * problem.dcost_dx[k - 1 - l][i].eval(&env)?;
            for h in 0..l {
                let sign = if (l + h) % 2 == 0 { 1.0 } else { -1.0 };
                value += sign * problem.terminal_terms[l - 1][h][i].eval(&env)?;
            }
            level.push(sigma * value);
        }
        // Lower levels feed the D^h terms of the next one.
        env.set_costate_level(l, &level);
        levels.push(level);
    }
    Ok(levels)
}

/// Shared backward RK4 driver: marches the grid from the last node to the
/// first, reversing time inside each step.
fn integrate_backward<F>(
    times: &[f64],
    terminal: Vec<f64>,
    mut rhs: F,
) -> Result<Vec<Vec<f64>>, AdjointError>
where
    F: FnMut(f64, f64, &[f64], &mut [f64]) -> Result<(), AdjointError>,
{
    let dim = terminal.len();
    let mut z = terminal;
    let mut states = vec![Vec::new(); times.len()];
    states[times.len() - 1] = z.clone();
    let mut k1 = vec![0.0; dim];
    let mut k2 = vec![0.0; dim];
    let mut k3 = vec![0.0; dim];
    let mut k4 = vec![0.0; dim];
    let mut tmp = vec![0.0; dim];
    for node in (0..times.len() - 1).rev() {
        let (t1, t0) = (times[node + 1], times[node]);
        // Reversed time s = -t: ds/dt = -1, dz/ds = -rhs(-s, z).
        let h = t1 - t0;
        let tm = t0 + 0.5 * h;
        rhs(tm, t1, &z, &mut k1)?;
        for i in 0..dim {
            tmp[i] = z[i] - 0.5 * h * k1[i];
        }
        rhs(tm, tm, &tmp, &mut k2)?;
        for i in 0..dim {
            tmp[i] = z[i] - 0.5 * h * k2[i];
        }
        rhs(tm, tm, &tmp, &mut k3)?;
        for i in 0..dim {
            tmp[i] = z[i] - h * k3[i];
        }
        rhs(tm, t0, &tmp, &mut k4)?;
        for i in 0..dim {
            z[i] -= h / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]);
        }
        if z.iter().any(|v| !v.is_finite()) {
            return Err(AdjointError::NonFiniteState(t0));
        }
        states[node] = z.clone();
    }
    Ok(states)
}

/// Backward integration of the k-th order adjoint equation: first-order
/// system in `(p, p_(1), ..., p_(k-1))` with the precomputed symbolic
/// expression for `p_(k)`, state jets interpolated from the trajectory.
pub fn integrate_adjoint(
    problem: &Problem,
    traj: &Trajectory,
    convention: TerminalConvention,
) -> Result<AdjointTrajectory, AdjointError> {
    check_jets(problem, traj)?;
    let k = problem.order;
    let n = problem.state_dim;
    let terminal = terminal_jet(problem, traj, convention)?;
    let mut env = Env::for_problem(k, n, problem.control_dim);
    let states = integrate_backward(traj.times(), terminal.concat(), |anchor, t, z, out| {
        out[..n * (k - 1)].copy_from_slice(&z[n..]);
        env_at(traj, anchor, t, &mut env)?;
        for s in 0..k {
            env.set_costate_level(s, &z[s * n..(s + 1) * n]);
        }
        for (i, rhs_i) in problem.adjoint_rhs.iter().enumerate() {
            out[n * (k - 1) + i] = rhs_i.eval(&env)?;
        }
        Ok(())
    })?;
    let pjets = states
        .into_iter()
        .map(|z| (0..k).map(|s| z[s * n..(s + 1) * n].to_vec()).collect())
        .collect();
    Ok(AdjointTrajectory {
        times: traj.times().to_vec(),
        pjets,
        convention,
        crosscheck_deviation: None,
    })
}

/// Classical adjoint of the nk-dimensional first-order reduction:
///
/// ```text
/// dptilde_l/dt = -ptilde_{l-1} - ptilde_{k-1} * df/dx_(l),   ptilde_{-1} = 0,
/// ptilde_l(T)  = -dC/dx_(l).
/// ```
pub fn reduced_adjoint(problem: &Problem, traj: &Trajectory) -> Result<ReducedCostate, AdjointError> {
    let k = problem.order;
    let n = problem.state_dim;
    let mut env = Env::for_problem(k, n, problem.control_dim);
    env_at(traj, problem.horizon, problem.horizon, &mut env)?;
    let mut terminal = Vec::with_capacity(k * n);
    for l in 0..k {
        for i in 0..n {
            terminal.push(-problem.dcost_dx[l][i].eval(&env)?);
        }
    }
    let states = integrate_backward(traj.times(), terminal, |anchor, t, z, out| {
        env_at(traj, anchor, t, &mut env)?;
        let top = &z[(k - 1) * n..];
        for l in 0..k {
            for i in 0..n {
                let mut sum = 0.0;
                for (j, pj) in top.iter().enumerate() {
                    sum += pj * problem.df_dx[j][l][i].eval(&env)?;
                }
                let prev = if l == 0 { 0.0 } else { z[(l - 1) * n + i] };
                out[l * n + i] = -prev - sum;
            }
        }
        Ok(())
    })?;
    let values = states
        .into_iter()
        .map(|z| (0..k).map(|l| z[l * n..(l + 1) * n].to_vec()).collect())
        .collect();
    Ok(ReducedCostate {
        times: traj.times().to_vec(),
        values,
    })
}

/// Sup-norm deviation between `p(t)` and the reduced multiplier
/// `ptilde_{k-1}(t)`, relative to `max(1, sup |ptilde_{k-1}|)`.
pub fn crosscheck(adj: &AdjointTrajectory, reduced: &ReducedCostate) -> Result<f64, AdjointError> {
    if adj.times != reduced.times {
        return Err(AdjointError::GridMismatch);
    }
    let mut sup_dev = 0.0f64;
    let mut sup_ref = 0.0f64;
    for node in 0..adj.times.len() {
        let p = &adj.pjets[node][0];
        let ptilde = reduced.top_multiplier(node);
        for (a, b) in p.iter().zip(ptilde.iter()) {
            sup_dev = sup_dev.max((a - b).abs());
            sup_ref = sup_ref.max(b.abs());
        }
    }
    Ok(sup_dev / sup_ref.max(1.0))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::control::ControlCurve;
    use crate::dynamics::{ControlSet, Problem};
    use crate::expr::{parse, Schema};
    use crate::forward::{integrate_forward, IntegrateOptions};

    fn problem(k: usize, f: &str, cost: &str, init: Vec<Vec<f64>>) -> Problem {
        Problem::new(
            k,
            1.0,
            vec![parse(f, &Schema::dynamics(k, 1, 1)).unwrap()],
            parse(cost, &Schema::cost(k, 1)).unwrap(),
            ControlSet::Box(vec![(-1.0, 1.0)]),
            vec![],
            None,
            init,
        )
        .unwrap()
    }

    fn solve(p: &Problem, u: &ControlCurve) -> (Trajectory, AdjointTrajectory) {
        let traj = integrate_forward(p, u, &IntegrateOptions::default()).unwrap();
        let adj = integrate_adjoint(p, &traj, TerminalConvention::DerivedFromCondi).unwrap();
        (traj, adj)
    }

    #[test]
    fn k1_terminal_condition_is_classical() {
        let p = problem(1, "u1", "x1_0", vec![vec![0.0]]);
        let u = ControlCurve::constant(vec![0.2], 1.0);
        let traj = integrate_forward(&p, &u, &IntegrateOptions::default()).unwrap();
        let jet = terminal_jet(&p, &traj, TerminalConvention::DerivedFromCondi).unwrap();
        assert_eq!(jet, vec![vec![-1.0]]);
        let printed = terminal_jet(&p, &traj, TerminalConvention::AsPrinted).unwrap();
        assert_eq!(printed, vec![vec![1.0]]);
    }

    #[test]
    fn double_integrator_terminal_jet() {
        let p = problem(2, "u1", "x1_0", vec![vec![0.0], vec![0.0]]);
        let u = ControlCurve::constant(vec![-1.0], 1.0);
        let traj = integrate_forward(&p, &u, &IntegrateOptions::default()).unwrap();
        let jet = terminal_jet(&p, &traj, TerminalConvention::DerivedFromCondi).unwrap();
        assert_eq!(jet, vec![vec![0.0], vec![1.0]]);
    }

    #[test]
    fn constant_cost_gives_zero_jet() {
        let p = problem(2, "u1", "x1_0-x1_0", vec![vec![0.0], vec![0.0]]);
        let u = ControlCurve::constant(vec![0.5], 1.0);
        let traj = integrate_forward(&p, &u, &IntegrateOptions::default()).unwrap();
        for conv in [
            TerminalConvention::DerivedFromCondi,
            TerminalConvention::AsPrinted,
        ] {
            let jet = terminal_jet(&p, &traj, conv).unwrap();
            assert_eq!(jet, vec![vec![0.0], vec![0.0]]);
        }
    }

    #[test]
    fn double_integrator_costate_is_linear() {
        let p = problem(2, "u1", "x1_0", vec![vec![0.0], vec![0.0]]);
        let u = ControlCurve::constant(vec![0.3], 1.0);
        let (traj, adj) = solve(&p, &u);
        for (node, &t) in traj.times().iter().enumerate().step_by(97) {
            let got = adj.node_pjets(node)[0][0];
            assert!((got - (t - 1.0)).abs() < 1e-8, "p({t}) = {got}");
        }
    }

    #[test]
    fn k1_constant_costate() {
        let p = problem(1, "u1", "x1_0", vec![vec![0.0]]);
        let u = ControlCurve::constant(vec![0.7], 1.0);
        let (_, adj) = solve(&p, &u);
        for node in [0, 500, 1000] {
            assert_eq!(adj.node_pjets(node)[0][0], -1.0);
        }
    }

    #[test]
    fn k1_exponential_costate() {
        let p = problem(1, "-x1_0+u1", "x1_0", vec![vec![1.0]]);
        let u = ControlCurve::constant(vec![0.0], 1.0);
        let (traj, adj) = solve(&p, &u);
        for (node, &t) in traj.times().iter().enumerate().step_by(211) {
            let expect = -(t - 1.0).exp();
            let got = adj.node_pjets(node)[0][0];
            assert!((got - expect).abs() < 1e-8, "p({t}) = {got} vs {expect}");
        }
    }

    #[test]
    fn reduced_adjoint_double_integrator() {
        let p = problem(2, "u1", "x1_0", vec![vec![0.0], vec![0.0]]);
        let u = ControlCurve::constant(vec![0.0], 1.0);
        let traj = integrate_forward(&p, &u, &IntegrateOptions::default()).unwrap();
        let reduced = reduced_adjoint(&p, &traj).unwrap();
        for (node, &t) in traj.times().iter().enumerate().step_by(173) {
            let v = reduced.node_values(node);
            assert!((v[0][0] + 1.0).abs() < 1e-10);
            assert!((v[1][0] - (t - 1.0)).abs() < 1e-8);
        }
    }

    #[test]
    fn crosscheck_double_integrator() {
        let p = problem(2, "u1", "x1_0", vec![vec![0.0], vec![0.0]]);
        let u = ControlCurve::constant(vec![0.1], 1.0);
        let (traj, adj) = solve(&p, &u);
        let reduced = reduced_adjoint(&p, &traj).unwrap();
        assert!(crosscheck(&adj, &reduced).unwrap() <= 1e-8);
    }

    #[test]
    fn crosscheck_grid_mismatch() {
        let p = problem(2, "u1", "x1_0", vec![vec![0.0], vec![0.0]]);
        let u = ControlCurve::constant(vec![0.1], 1.0);
        let (_, adj) = solve(&p, &u);
        let coarse = integrate_forward(
            &p,
            &u,
            &IntegrateOptions {
                grid_n: 64,
                ..Default::default()
            },
        )
        .unwrap();
        let reduced = reduced_adjoint(&p, &coarse).unwrap();
        assert!(matches!(
            crosscheck(&adj, &reduced),
            Err(AdjointError::GridMismatch)
        ));
    }

    #[test]
    fn adjoint_scales_linearly_with_cost() {
        let base = problem(2, "-x1_0-0.5*x1_1+u1", "x1_0", vec![vec![1.0], vec![0.0]]);
        let scaled = problem(
            2,
            "-x1_0-0.5*x1_1+u1",
            "3*x1_0",
            vec![vec![1.0], vec![0.0]],
        );
        let u = ControlCurve::constant(vec![0.2], 1.0);
        let (_, adj1) = solve(&base, &u);
        let (_, adj3) = solve(&scaled, &u);
        for node in [0, 777, 2048] {
            for s in 0..2 {
                let a = adj1.node_pjets(node)[s][0];
                let b = adj3.node_pjets(node)[s][0];
                assert!((b - 3.0 * a).abs() <= 1e-12 * b.abs().max(1.0));
            }
        }
    }

    #[test]
    fn terminal_levels_are_triangular() {
        // The D^h blocks of level l reference p-jets of order <= l-1 only.
        let p = problem(3, "-x1_0+u1", "x1_0", vec![vec![0.0]; 3]);
        for (l, per_h) in p.terminal_terms.iter().enumerate() {
            for per_i in per_h {
                for e in per_i {
                    for v in e.variables() {
                        if let crate::expr::Var::Costate { order, .. } = v {
                            assert!(order <= l, "level {} uses p-jet order {order}", l + 1);
                        }
                    }
                }
            }
        }
    }
}
