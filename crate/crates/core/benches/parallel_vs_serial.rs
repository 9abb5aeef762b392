//! Serial vs parallel timing of the sweep-style inner loops: PMP
//! verification over the tau grid and brute-force control enumeration.
//! Build with `--no-default-features` to time the pure sequential code
//! path instead of a one-worker pool.

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};

use hopmp_core::{
    brute_force, default_levels, default_tau_grid, integrate_adjoint, integrate_forward,
    pmp_report, ControlCurve, ControlSet, IntegrateOptions, Parallelism, Problem, Schema,
    TerminalConvention,
};

fn double_integrator() -> Problem {
    let f = hopmp_core::expr::parse("u1", &Schema::dynamics(2, 1, 1)).unwrap();
    let c = hopmp_core::expr::parse("x1_0", &Schema::cost(2, 1)).unwrap();
    Problem::new(
        2,
        1.0,
        vec![f],
        c,
        ControlSet::Box(vec![(-1.0, 1.0)]),
        vec![],
        None,
        vec![vec![0.0], vec![0.0]],
    )
    .unwrap()
}

fn bench_pmp_report(c: &mut Criterion) {
    let problem = double_integrator();
    let u = ControlCurve::constant(vec![0.0], 1.0);
    let opts = IntegrateOptions::default();
    let traj = integrate_forward(&problem, &u, &opts).unwrap();
    let adj = integrate_adjoint(&problem, &traj, TerminalConvention::DerivedFromCondi).unwrap();
    let grid = default_tau_grid(1.0, &u, 512);

    let mut group = c.benchmark_group("pmp_report");
    for (name, par) in [
        ("serial", Parallelism::Serial),
        ("parallel", Parallelism::Auto),
    ] {
        group.bench_with_input(BenchmarkId::from_parameter(name), &par, |b, &par| {
            b.iter(|| pmp_report(&problem, &traj, &adj, &grid, 1e-6, par).unwrap());
        });
    }
    group.finish();
}

fn bench_brute_force(c: &mut Criterion) {
    let problem = double_integrator();
    let levels = default_levels(&problem, 3);
    let opts = IntegrateOptions {
        grid_n: 512,
        ..Default::default()
    };

    let mut group = c.benchmark_group("brute_force_81");
    group.sample_size(10);
    for (name, par) in [
        ("serial", Parallelism::Serial),
        ("parallel", Parallelism::Auto),
    ] {
        group.bench_with_input(BenchmarkId::from_parameter(name), &par, |b, &par| {
            b.iter(|| brute_force(&problem, 4, &levels, &opts, par).unwrap());
        });
    }
    group.finish();
}

criterion_group!(benches, bench_pmp_report, bench_brute_force);
criterion_main!(benches);
