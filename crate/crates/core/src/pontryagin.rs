//! The Pontryagin function `H`, its variational twin `P`, maximization
//! over the control set, PMP verification reports, and the diagnostic
//! infinitesimal `V(eps)`.

use crate::adjoint::AdjointTrajectory;
use crate::control::ControlCurve;
use crate::dynamics::Problem;
use crate::expr::ExprError;
use crate::forward::Trajectory;
use crate::par::{map_collect, Parallelism};

/// `H(omega) = sum_j p_j(tau) f^j(tau, x-jets(tau), omega)`, jets linearly
/// interpolated off-node.
pub fn hamiltonian(
    problem: &Problem,
    traj: &Trajectory,
    adj: &AdjointTrajectory,
    tau: f64,
    omega: &[f64],
) -> Result<f64, ExprError> {
    let x_jets = traj.sample(tau);
    let p = adj.costate(tau);
    let f = problem.eval_dynamics(tau, &x_jets, omega)?;
    Ok(p.iter().zip(f.iter()).map(|(pi, fi)| pi * fi).sum())
}

/// `P(omega) = -L(j^k_tau, omega) = H(omega) - sum_j p_j x^j_(k)(tau)`.
/// The subtracted term does not depend on `omega`, so `P` and `H` share
/// their maximizers. `x_(k)(tau)` is evaluated through the derived system
/// at the interpolated lower jets, which also covers `k = 1` where the
/// trajectory stores no level `k`.
pub fn pfunction(
    problem: &Problem,
    traj: &Trajectory,
    adj: &AdjointTrajectory,
    tau: f64,
    omega: &[f64],
) -> Result<f64, ExprError> {
    let x_jets = traj.sample(tau);
    let p = adj.costate(tau);
    let u_tau = traj
        .control()
        .eval(tau)
        .unwrap_or_else(|_| vec![f64::NAN; problem.control_dim]);
    let xk = problem.eval_dynamics(tau, &x_jets, &u_tau)?;
    let f = problem.eval_dynamics(tau, &x_jets, omega)?;
    Ok(p.iter()
        .zip(f.iter().zip(xk.iter()))
        .map(|(pi, (fi, xki))| pi * (fi - xki))
        .sum())
}

/// Options for the box maximizer.
#[derive(Debug, Clone, Copy)]
pub struct MaximizeOptions {
    /// Grid points per axis before refinement.
    pub grid_points: usize,
    /// Golden-section interval tolerance per axis.
    pub tol: f64,
}

impl Default for MaximizeOptions {
    fn default() -> Self {
        MaximizeOptions {
            grid_points: 33,
            tol: 1e-10,
        }
    }
}

/// Maximizes `H` over `K` at a fixed `tau`. Finite sets are enumerated
/// exactly; boxes get a per-axis grid followed by golden-section
/// refinement. Ties keep the lexicographically smallest point; refined
/// candidates must improve strictly to replace a grid point.
pub fn maximize(
    problem: &Problem,
    traj: &Trajectory,
    adj: &AdjointTrajectory,
    tau: f64,
    opts: &MaximizeOptions,
) -> Result<(Vec<f64>, f64), ExprError> {
    // The tau-local data is fixed across candidates; only the control
    // slots of the environment change per evaluation.
    let x_jets = traj.sample(tau);
    let p = adj.costate(tau);
    let mut env = crate::expr::Env::for_problem(
        problem.order,
        problem.state_dim,
        problem.control_dim,
    );
    env.set_time(tau);
    for (s, level) in x_jets.iter().enumerate().take(problem.order) {
        env.set_state_level(s, level);
    }
    let env = std::cell::RefCell::new(env);
    let h_of = |omega: &[f64]| -> Result<f64, ExprError> {
        let mut env = env.borrow_mut();
        env.set_control_level(0, omega);
        let mut acc = 0.0;
        for (pi, f) in p.iter().zip(problem.dynamics.iter()) {
            acc += pi * f.eval(&env)?;
        }
        Ok(acc)
    };

    match &problem.control_set {
        crate::dynamics::ControlSet::Finite(points) => {
            let mut order: Vec<&Vec<f64>> = points.iter().collect();
            order.sort_by(|a, b| a.partial_cmp(b).unwrap());
            let mut best = order[0].clone();
            let mut best_h = h_of(&best)?;
            for cand in order.into_iter().skip(1) {
                let h = h_of(cand)?;
                if h > best_h {
                    best_h = h;
                    best = cand.clone();
                }
            }
            Ok((best, best_h))
        }
        crate::dynamics::ControlSet::Box(bounds) => {
            let m = bounds.len();
            let g = opts.grid_points.max(2);
            // Tensor grid scan in lexicographic order.
            let mut idx = vec![0usize; m];
            let point = |idx: &[usize]| -> Vec<f64> {
                idx.iter()
                    .zip(bounds.iter())
                    .map(|(&i, &(lo, hi))| lo + (hi - lo) * i as f64 / (g - 1) as f64)
                    .collect()
            };
            let mut best = point(&idx);
            let mut best_h = h_of(&best)?;
            loop {
                // advance the counter
                let mut axis = m;
                for a in (0..m).rev() {
                    if idx[a] + 1 < g {
                        idx[a] += 1;
                        for slot in idx.iter_mut().skip(a + 1) {
                            *slot = 0;
                        }
                        axis = a;
                        break;
                    }
                }
                if axis == m {
                    break;
                }
                let cand = point(&idx);
                let h = h_of(&cand)?;
                if h > best_h {
                    best_h = h;
                    best = cand;
                }
            }
            // Cyclic golden-section refinement around the grid winner; the
            // refined point replaces it only on strict improvement.
            let gap: Vec<f64> = bounds
                .iter()
                .map(|&(lo, hi)| (hi - lo) / (g - 1) as f64)
                .collect();
            let mut refined = best.clone();
            for a in 0..m {
                let lo = (refined[a] - gap[a]).max(bounds[a].0);
                let hi = (refined[a] + gap[a]).min(bounds[a].1);
                let mut probe = refined.clone();
                let arg = golden_section_max(
                    |x| {
                        probe[a] = x;
                        h_of(&probe).unwrap_or(f64::NEG_INFINITY)
                    },
                    lo,
                    hi,
                    opts.tol,
                );
                refined[a] = arg;
            }
            let refined_h = h_of(&refined)?;
            if refined_h > best_h {
                Ok((refined, refined_h))
            } else {
                Ok((best, best_h))
            }
        }
    }
}

fn golden_section_max(mut f: impl FnMut(f64) -> f64, mut lo: f64, mut hi: f64, tol: f64) -> f64 {
    const INV_PHI: f64 = 0.618_033_988_749_894_8;
    let mut c = hi - INV_PHI * (hi - lo);
    let mut d = lo + INV_PHI * (hi - lo);
    let mut fc = f(c);
    let mut fd = f(d);
    while hi - lo > tol {
        if fc >= fd {
            hi = d;
            d = c;
            fd = fc;
            c = hi - INV_PHI * (hi - lo);
            fc = f(c);
        } else {
            lo = c;
            c = d;
            fc = fd;
            d = lo + INV_PHI * (hi - lo);
            fd = f(d);
        }
    }
    0.5 * (lo + hi)
}

/// One verification row.
#[derive(Debug, Clone)]
pub struct PmpRow {
    pub tau: f64,
    pub h_at_u: f64,
    pub h_max: f64,
    pub omega_star: Vec<f64>,
    /// Residual `kappa(tau) = max H - H(u(tau))`.
    pub kappa: f64,
    pub admissible: bool,
}

/// Verification verdict over the sampled grid.
#[derive(Debug, Clone)]
pub struct PmpReport {
    pub rows: Vec<PmpRow>,
    pub ess_sup: f64,
    pub satisfied: bool,
    /// Worst admissible violation `(tau*, omega*, kappa)` when present.
    pub worst: Option<(f64, Vec<f64>, f64)>,
    pub tolerance: f64,
}

impl PmpReport {
    pub fn to_csv(&self) -> String {
        let m = self
            .rows
            .first()
            .map_or(0, |r| r.omega_star.len());
        let mut out = String::from("tau,H_at_u,H_max");
        for a in 0..m {
            out.push_str(&format!(",omega_star{}", a + 1));
        }
        out.push_str(",kappa,admissible\n");
        for r in &self.rows {
            out.push_str(&format!("{},{},{}", r.tau, r.h_at_u, r.h_max));
            for w in &r.omega_star {
                out.push_str(&format!(",{w}"));
            }
            out.push_str(&format!(",{},{}\n", r.kappa, r.admissible as u8));
        }
        out
    }
}

/// Default verification grid: `points` uniform interior times plus the
/// midpoint of every control piece no shorter than `horizon / 65536`
/// (shorter pieces sit below the grid's own resolution; their midpoints
/// would chase a null set for ever). Sorted, deduplicated.
pub fn default_tau_grid(horizon: f64, control: &ControlCurve, points: usize) -> Vec<f64> {
    let mut grid: Vec<f64> = (1..=points)
        .map(|i| horizon * i as f64 / (points + 1) as f64)
        .collect();
    let floor = horizon / 65536.0;
    let bps = control.breakpoints();
    for w in bps.windows(2) {
        if w[1] - w[0] >= floor {
            let mid = 0.5 * (w[0] + w[1]);
            if mid > 0.0 && mid < horizon {
                grid.push(mid);
            }
        }
    }
    grid.sort_by(|a, b| a.partial_cmp(b).unwrap());
    grid.dedup();
    grid
}

/// Runs the maximization on every grid time. For `k >= 2`, times at
/// control breakpoints are flagged inadmissible (the maximum principle
/// holds at interior points of smooth pieces); for `k = 1` every time
/// counts.
/// Verdict: satisfied iff `kappa <= tol` at every admissible time.
pub fn pmp_report(
    problem: &Problem,
    traj: &Trajectory,
    adj: &AdjointTrajectory,
    tau_grid: &[f64],
    tol: f64,
    par: Parallelism,
) -> Result<PmpReport, ExprError> {
    let opts = MaximizeOptions::default();
    let bps = traj.control().breakpoints();
    let is_breakpoint = |tau: f64| {
        let window = problem.horizon * 1e-12;
        let i = bps.partition_point(|&b| b < tau - window);
        i < bps.len() && (bps[i] - tau).abs() <= window
    };
    let rows: Vec<Result<PmpRow, ExprError>> = map_collect(par, tau_grid, |&tau| {
        let u_tau = traj.control().eval(tau).expect("tau grid inside [0, T]");
        let h_at_u = hamiltonian(problem, traj, adj, tau, &u_tau)?;
        let (omega_star, h_max) = maximize(problem, traj, adj, tau, &opts)?;
        let admissible = problem.order == 1 || !is_breakpoint(tau);
        Ok(PmpRow {
            tau,
            h_at_u,
            h_max,
            omega_star,
            kappa: h_max - h_at_u,
            admissible,
        })
    });
    let rows: Vec<PmpRow> = rows.into_iter().collect::<Result<_, _>>()?;
    let mut ess_sup = 0.0f64;
    let mut worst: Option<(f64, Vec<f64>, f64)> = None;
    for r in rows.iter().filter(|r| r.admissible) {
        if r.kappa > ess_sup {
            ess_sup = r.kappa;
        }
        let beats = worst.as_ref().is_none_or(|w| r.kappa > w.2);
        if beats && r.kappa > tol {
            worst = Some((r.tau, r.omega_star.clone(), r.kappa));
        }
    }
    Ok(PmpReport {
        satisfied: worst.is_none(),
        ess_sup,
        worst,
        rows,
        tolerance: tol,
    })
}

/// The infinitesimal
/// `V(eps) = (1/eps) * integral_{tau-eps}^{tau} (P^t(u(tau)) - P^t(u(t))) dt`,
/// by trapezoid quadrature on the trajectory grid restricted to the window
/// (window endpoints included exactly).
pub fn v_epsilon(
    problem: &Problem,
    traj: &Trajectory,
    adj: &AdjointTrajectory,
    tau: f64,
    eps: f64,
) -> Result<f64, ExprError> {
    assert!(eps > 0.0 && eps < tau, "need 0 < eps < tau");
    let u_tau = traj.control().eval(tau).expect("0 < eps < tau <= T");
    let a = tau - eps;
    let mut knots: Vec<f64> = vec![a];
    for &t in traj.times() {
        if t > a && t < tau {
            knots.push(t);
        }
    }
    knots.push(tau);
    let integrand = |t: f64| -> Result<f64, ExprError> {
        let u_t = traj.control().eval(t).expect("window inside [0, T]");
        Ok(pfunction(problem, traj, adj, t, &u_tau)?
            - pfunction(problem, traj, adj, t, &u_t)?)
    };
    let mut acc = 0.0;
    let mut prev_t = knots[0];
    let mut prev_v = integrand(prev_t)?;
    for &t in &knots[1..] {
        let v = integrand(t)?;
        acc += 0.5 * (v + prev_v) * (t - prev_t);
        prev_t = t;
        prev_v = v;
    }
    Ok(acc / eps)
}
