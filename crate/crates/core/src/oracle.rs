//! Independent baselines: exhaustive piecewise-constant control
//! enumeration, finite-difference needle gains, and an empirical
//! trajectory-Lipschitz probe. Oracles integrate at twice the resolution
//! of whatever they are checking.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::control::{dist, needle, ControlCurve, NeedleParams, Piece};
use crate::dynamics::Problem;
use crate::forward::{integrate_forward, terminal_cost, IntegrateError, IntegrateOptions};

#[derive(Debug, Error, Clone)]
pub enum OracleError {
    #[error("enumeration budget exceeded: {candidates} candidates > {budget}")]
    BudgetExceeded { candidates: u128, budget: u128 },
    #[error(transparent)]
    Integrate(#[from] IntegrateError),
}

const ENUMERATION_BUDGET: u128 = 10_000_000;

fn oracle_opts(opts: &IntegrateOptions) -> IntegrateOptions {
    IntegrateOptions {
        grid_n: opts.grid_n * 2,
        ..*opts
    }
}

#[derive(Debug, Clone)]
pub struct BruteForceResult {
    pub best_control: ControlCurve,
    pub best_cost: f64,
    pub candidates: usize,
    /// `(piece level indices, cost)` per candidate, in enumeration order.
    pub table: Vec<(Vec<usize>, f64)>,
}

impl BruteForceResult {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("candidate,levels,cost\n");
        for (i, (levels, cost)) in self.table.iter().enumerate() {
            let tag: Vec<String> = levels.iter().map(|l| l.to_string()).collect();
            out.push_str(&format!("{i},{},{cost}\n", tag.join("|")));
        }
        out
    }
}

/// Exhaustively integrates every piecewise-constant control with `pieces`
/// equal intervals and values drawn from `levels`; returns the minimizer.
/// Candidates blowing up are skipped.
pub fn brute_force(
    problem: &Problem,
    pieces: usize,
    levels: &[Vec<f64>],
    opts: &IntegrateOptions,
    par: crate::par::Parallelism,
) -> Result<BruteForceResult, OracleError> {
    let count = (levels.len() as u128).pow(pieces as u32);
    if count.saturating_mul(pieces as u128) > ENUMERATION_BUDGET {
        return Err(OracleError::BudgetExceeded {
            candidates: count,
            budget: ENUMERATION_BUDGET,
        });
    }
    let horizon = problem.horizon;
    let oracle_opts = oracle_opts(opts);
    let assignments: Vec<Vec<usize>> = (0..count as usize)
        .map(|mut c| {
            let mut a = vec![0usize; pieces];
            for slot in a.iter_mut().rev() {
                *slot = c % levels.len();
                c /= levels.len();
            }
            a
        })
        .collect();
    let costs: Vec<Option<f64>> = crate::par::map_collect(par, &assignments, |assignment| {
        let bps: Vec<f64> = (0..=pieces).map(|i| horizon * i as f64 / pieces as f64).collect();
        let ps: Vec<Piece> = assignment
            .iter()
            .map(|&l| Piece::Const(levels[l].clone()))
            .collect();
        let control = ControlCurve::from_pieces(bps, ps).expect("uniform breakpoints");
        terminal_cost(problem, &control, &oracle_opts).ok()
    });

    let mut table = Vec::with_capacity(assignments.len());
    let mut best: Option<(usize, f64)> = None;
    for (i, cost) in costs.iter().enumerate() {
        let c = match cost {
            Some(c) => *c,
            None => continue,
        };
        table.push((assignments[i].clone(), c));
        if best.is_none_or(|(_, bc)| c < bc) {
            best = Some((i, c));
        }
    }
    let (best_idx, best_cost) = best.expect("at least one candidate must integrate");
    let bps: Vec<f64> = (0..=pieces).map(|i| horizon * i as f64 / pieces as f64).collect();
    let ps: Vec<Piece> = assignments[best_idx]
        .iter()
        .map(|&l| Piece::Const(levels[l].clone()))
        .collect();
    let best_control = ControlCurve::from_pieces(bps, ps).expect("uniform breakpoints");
    Ok(BruteForceResult {
        best_control,
        best_cost,
        candidates: assignments.len(),
        table,
    })
}

/// Default level set for a control set: the finite points themselves, or
/// `levels_per_axis` equispaced values per box axis (endpoints included).
pub fn default_levels(problem: &Problem, levels_per_axis: usize) -> Vec<Vec<f64>> {
    match &problem.control_set {
        crate::dynamics::ControlSet::Finite(points) => points.clone(),
        crate::dynamics::ControlSet::Box(bounds) => {
            let per_axis: Vec<Vec<f64>> = bounds
                .iter()
                .map(|&(lo, hi)| {
                    (0..levels_per_axis)
                        .map(|i| lo + (hi - lo) * i as f64 / (levels_per_axis - 1).max(1) as f64)
                        .collect()
                })
                .collect();
            let mut out: Vec<Vec<f64>> = vec![vec![]];
            for axis in per_axis {
                let mut next = Vec::with_capacity(out.len() * axis.len());
                for prefix in &out {
                    for &v in &axis {
                        let mut p = prefix.clone();
                        p.push(v);
                        next.push(p);
                    }
                }
                out = next;
            }
            out
        }
    }
}

/// Realized needle gains `(C(u) - C(u_eps)) / eps` for a list of widths.
/// As `eps -> 0` the gains approach the Hamiltonian residual at the peak.
pub fn needle_gain_estimate(
    problem: &Problem,
    control: &ControlCurve,
    tau: f64,
    omega: &[f64],
    eps_list: &[f64],
    opts: &IntegrateOptions,
) -> Result<Vec<(f64, f64)>, OracleError> {
    let oracle_opts = oracle_opts(opts);
    let base_cost = terminal_cost(problem, control, &oracle_opts)?;
    let mut out = Vec::with_capacity(eps_list.len());
    for &eps in eps_list {
        let params = NeedleParams::new(tau, omega.to_vec(), eps, problem.horizon)
            .map_err(IntegrateError::Control)?;
        let c = terminal_cost(problem, &needle(control, &params), &oracle_opts)?;
        out.push((eps, (base_cost - c) / eps));
    }
    Ok(out)
}

#[derive(Debug, Clone)]
pub struct LipschitzReport {
    pub max_ratio: f64,
    pub median_ratio: f64,
    pub samples: usize,
    /// Set when some ratio exceeded 100x the median (a blow-up flag, not
    /// an error).
    pub unbounded_suspect: bool,
    /// Per-sample ratios in draw order.
    pub ratios: Vec<f64>,
}

impl LipschitzReport {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("sample,ratio\n");
        for (i, r) in self.ratios.iter().enumerate() {
            out.push_str(&format!("{i},{r}\n"));
        }
        out
    }
}

/// Empirical trajectory-Lipschitz probe: random needle perturbations with
/// `dist <= 0.1 * T`, ratio of the C0 grid distance of trajectories to the
/// control distance. Zero-distance draws are skipped.
pub fn lipschitz_check(
    problem: &Problem,
    base: &ControlCurve,
    samples: usize,
    seed: u64,
    opts: &IntegrateOptions,
) -> Result<LipschitzReport, OracleError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let horizon = problem.horizon;
    let base_traj = integrate_forward(problem, base, opts)?;
    let kbox = problem.control_set.bounding_box();
    let mut ratios = Vec::with_capacity(samples);
    let mut attempts = 0;
    while ratios.len() < samples && attempts < samples * 20 {
        attempts += 1;
        let tau = rng.gen_range(0.05 * horizon..0.95 * horizon);
        let eps_cap = NeedleParams::max_width(tau, horizon).min(0.1 * horizon);
        if eps_cap <= 1e-9 {
            continue;
        }
        let eps = rng.gen_range(1e-4 * horizon..eps_cap.max(2e-4 * horizon));
        let eps = eps.min(0.999 * eps_cap);
        let omega: Vec<f64> = kbox
            .iter()
            .map(|&(lo, hi)| rng.gen_range(lo..=hi))
            .collect();
        let params = match NeedleParams::new(tau, omega, eps, horizon) {
            Ok(p) => p,
            Err(_) => continue,
        };
        let perturbed = needle(base, &params);
        let d = dist(base, &perturbed);
        if d <= 0.0 {
            continue; // zero-width draw: ratio undefined
        }
        let traj = integrate_forward(problem, &perturbed, opts)?;
        // C0 distance sampled on the base grid.
        let mut sup = 0.0f64;
        for &t in base_traj.times() {
            let a = base_traj.sample(t);
            let b = traj.sample(t);
            for (la, lb) in a.iter().zip(b.iter()).take(problem.order) {
                for (x, y) in la.iter().zip(lb.iter()) {
                    sup = sup.max((x - y).abs());
                }
            }
        }
        ratios.push(sup / d);
    }
    let mut sorted = ratios.clone();
    sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let median = sorted.get(sorted.len() / 2).copied().unwrap_or(0.0);
    let max = sorted.last().copied().unwrap_or(0.0);
    Ok(LipschitzReport {
        max_ratio: max,
        median_ratio: median,
        samples: ratios.len(),
        unbounded_suspect: median > 0.0 && max > 100.0 * median,
        ratios,
    })
}
