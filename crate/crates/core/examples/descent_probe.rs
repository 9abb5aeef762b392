//! Quick convergence probe for the needle descent on the double
//! integrator, printing iteration counts and timings at full resolution.

use std::time::Instant;

use hopmp_core::{
    dist, solve, ControlCurve, ControlSet, ImproveOptions, Parallelism, Problem, Schema,
};

fn main() {
    let f = hopmp_core::expr::parse("u1", &Schema::dynamics(2, 1, 1)).unwrap();
    let c = hopmp_core::expr::parse("x1_0", &Schema::cost(2, 1)).unwrap();
    let problem = Problem::new(
        2,
        1.0,
        vec![f],
        c,
        ControlSet::Box(vec![(-1.0, 1.0)]),
        vec![],
        None,
        vec![vec![0.0], vec![0.0]],
    )
    .unwrap();
    let u0 = ControlCurve::constant(vec![0.0], 1.0);
    let opts = ImproveOptions {
        parallelism: Parallelism::Auto,
        ..Default::default()
    };
    let start = Instant::now();
    let result = solve(&problem, &u0, &opts).unwrap();
    let elapsed = start.elapsed();
    let target = ControlCurve::constant(vec![-1.0], 1.0);
    println!(
        "termination: {:?}  iterations: {}  final cost: {:.6}  elapsed: {:.2?}",
        result.termination,
        result.steps.len(),
        result.final_cost(),
        elapsed
    );
    println!(
        "L1 distance to u = -1 (measure proxy): {:.6}",
        dist(&result.control, &target)
    );
    if let Some(report) = &result.final_report {
        println!("final ess-sup residual: {:.3e}", report.ess_sup);
    }
    for s in result.steps.iter().take(12) {
        println!(
            "  iter {:3}  tau* {:.5}  kappa {:.4}  eps {:.5}  cost {:.6}",
            s.iteration, s.tau_star, s.kappa, s.eps_accepted, s.cost_after
        );
    }
}
