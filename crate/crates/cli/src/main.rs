//! `hopmp` — verify and improve controls for Mayer problems with k-th
//! order differential constraints.
//!
//! Exit codes: 0 success, 1 usage error, 2 spec/validation error,
//! 3 numeric failure.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use hopmp_core::adjoint::TerminalConvention;
use hopmp_core::control::ControlCurve;
use hopmp_core::dynamics::Problem;
use hopmp_core::forward::IntegrateOptions;
use hopmp_core::improve::{ImproveOptions, Termination};
use hopmp_core::par::Parallelism;
use hopmp_core::pontryagin::default_tau_grid;

use hopmp::spec_file::{load, parse_control_desc, LoadedSpec, Numerics};

#[derive(Parser)]
#[command(
    name = "hopmp",
    about = "Pontryagin verification and needle-variation descent for higher-order Mayer problems",
    disable_help_subcommand = true
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Problem spec file.
    spec: PathBuf,
    /// Control override: `const:v1[,v2...]`, `expr:e1[;e2...]` or
    /// `file:PATH`; defaults to the spec's [control0].
    #[arg(long)]
    control: Option<String>,
    /// Uniform integration intervals (default from the spec, else 2048).
    #[arg(long)]
    grid: Option<usize>,
    /// Residual / convergence tolerance override.
    #[arg(long)]
    tol: Option<f64>,
    /// Terminal-condition convention: `derived` or `printed`.
    #[arg(long)]
    convention: Option<String>,
    /// Output directory for CSV artifacts.
    #[arg(long, default_value = ".")]
    out: PathBuf,
    /// Worker count (0 = all cores); HOPMP_WORKERS is the fallback.
    #[arg(long)]
    workers: Option<usize>,
    /// Seed for randomized diagnostics.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Subcommand)]
enum Command {
    /// Forward + adjoint solve: trajectory, co-state and PMP report CSVs.
    Solve(Common),
    /// PMP verification report only.
    Verify(Common),
    /// Needle-variation descent from the given control.
    Improve(Common),
    /// Residual heat grid over (tau, omega).
    Sweep(Common),
    /// Brute-force piecewise-constant baseline (and optional Lipschitz probe).
    Oracle {
        #[command(flatten)]
        common: Common,
        /// Number of equal control pieces to enumerate.
        #[arg(long, default_value_t = 4)]
        pieces: usize,
        /// Levels per control axis (box sets only).
        #[arg(long, default_value_t = 3)]
        levels: usize,
        /// Also run the empirical Lipschitz probe with this many samples.
        #[arg(long)]
        lipschitz: Option<usize>,
    },
}

enum CliError {
    Validation(String),
    Numeric(String),
}

impl CliError {
    fn code(&self) -> u8 {
        match self {
            CliError::Validation(_) => 2,
            CliError::Numeric(_) => 3,
        }
    }

    fn message(&self) -> &str {
        match self {
            CliError::Validation(m) | CliError::Numeric(m) => m,
        }
    }
}

fn numeric<E: std::fmt::Display>(e: E) -> CliError {
    CliError::Numeric(e.to_string())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            // clap prints help/version through the error path too
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(1)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", e.message());
            ExitCode::from(e.code())
        }
    }
}

struct Context {
    problem: Problem,
    numerics: Numerics,
    control: ControlCurve,
    convention: TerminalConvention,
    integrate: IntegrateOptions,
    parallelism: Parallelism,
    out: PathBuf,
    seed: u64,
}

fn build_context(common: &Common) -> Result<Context, CliError> {
    let LoadedSpec {
        problem,
        mut numerics,
        initial_control,
    } = load(&common.spec.to_string_lossy()).map_err(|e| CliError::Validation(e.to_string()))?;
    if let Some(grid) = common.grid {
        numerics.grid = grid;
    }
    if let Some(tol) = common.tol {
        numerics.tol = tol;
    }
    if let Some(seed) = common.seed {
        numerics.seed = seed;
    }
    let convention = match common.convention.as_deref() {
        None => numerics.convention,
        Some("derived") => TerminalConvention::DerivedFromCondi,
        Some("printed") => TerminalConvention::AsPrinted,
        Some(other) => {
            return Err(CliError::Validation(format!(
                "unknown convention `{other}` (expected `derived` or `printed`)"
            )))
        }
    };
    let control = match &common.control {
        Some(desc) => parse_control_desc(desc, problem.control_dim, problem.horizon)
            .map_err(CliError::Validation)?,
        None => initial_control,
    };
    let parallelism = match common.workers {
        Some(0) => Parallelism::Auto,
        Some(1) => Parallelism::Serial,
        Some(w) => Parallelism::Workers(w),
        None => Parallelism::from_env(),
    };
    let integrate = IntegrateOptions {
        grid_n: numerics.grid,
        richardson_tol: numerics.richardson_tol,
    };
    // Admissibility warning: values must stay in K-hat and declared
    // derivative ranges must hold inside pieces.
    for v in hopmp_core::control::validate_gamma(
        &control,
        &problem.khat,
        &problem.derivative_boxes,
    )
    .iter()
    .take(3)
    {
        eprintln!("warning: control admissibility: {v}");
    }
    Ok(Context {
        problem,
        control,
        convention,
        integrate,
        parallelism,
        out: common.out.clone(),
        seed: numerics.seed,
        numerics,
    })
}

fn write_artifact(dir: &Path, name: &str, contents: &str) -> Result<(), CliError> {
    std::fs::create_dir_all(dir)
        .map_err(|e| CliError::Validation(format!("cannot create `{}`: {e}", dir.display())))?;
    let path = dir.join(name);
    std::fs::write(&path, contents)
        .map_err(|e| CliError::Validation(format!("cannot write `{}`: {e}", path.display())))?;
    println!("wrote {}", path.display());
    Ok(())
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Solve(common) => {
            let ctx = build_context(&common)?;
            let traj = hopmp_core::integrate_forward(&ctx.problem, &ctx.control, &ctx.integrate)
                .map_err(numeric)?;
            let adj = hopmp_core::integrate_adjoint(&ctx.problem, &traj, ctx.convention)
                .map_err(numeric)?;
            let reduced = hopmp_core::reduced_adjoint(&ctx.problem, &traj).map_err(numeric)?;
            let deviation = hopmp_core::crosscheck(&adj, &reduced).map_err(numeric)?;
            let grid = default_tau_grid(ctx.problem.horizon, &ctx.control, ctx.numerics.tau_points);
            let report = hopmp_core::pmp_report(
                &ctx.problem,
                &traj,
                &adj,
                &grid,
                ctx.numerics.tol,
                ctx.parallelism,
            )
            .map_err(numeric)?;
            let cost = ctx.problem.eval_cost(traj.terminal_jets()).map_err(numeric)?;
            write_artifact(&ctx.out, "trajectory.csv", &traj.to_csv())?;
            write_artifact(&ctx.out, "adjoint.csv", &adj.to_csv(Some(&reduced)))?;
            write_artifact(&ctx.out, "pmp_report.csv", &report.to_csv())?;
            println!("terminal cost: {cost}");
            println!("adjoint crosscheck deviation: {deviation:.3e}");
            print_verdict(&report);
            Ok(())
        }
        Command::Verify(common) => {
            let ctx = build_context(&common)?;
            let traj = hopmp_core::integrate_forward(&ctx.problem, &ctx.control, &ctx.integrate)
                .map_err(numeric)?;
            let adj = hopmp_core::integrate_adjoint(&ctx.problem, &traj, ctx.convention)
                .map_err(numeric)?;
            let grid = default_tau_grid(ctx.problem.horizon, &ctx.control, ctx.numerics.tau_points);
            let report = hopmp_core::pmp_report(
                &ctx.problem,
                &traj,
                &adj,
                &grid,
                ctx.numerics.tol,
                ctx.parallelism,
            )
            .map_err(numeric)?;
            write_artifact(&ctx.out, "pmp_report.csv", &report.to_csv())?;
            print_verdict(&report);
            Ok(())
        }
        Command::Improve(common) => {
            let ctx = build_context(&common)?;
            let opts = ImproveOptions {
                tolerance: ctx.numerics.tol,
                max_iterations: ctx.numerics.max_iterations,
                tau_points: ctx.numerics.tau_points,
                integrate: ctx.integrate,
                parallelism: ctx.parallelism,
                ..Default::default()
            };
            let result =
                hopmp_core::solve(&ctx.problem, &ctx.control, &opts).map_err(numeric)?;
            write_artifact(&ctx.out, "improve_log.csv", &result.to_csv())?;
            write_artifact(&ctx.out, "control_final.txt", &result.control.serialize())?;
            if let Some(report) = &result.final_report {
                write_artifact(&ctx.out, "pmp_report.csv", &report.to_csv())?;
            }
            println!(
                "initial cost: {}   final cost: {}   steps: {}",
                result.cost_history.first().unwrap(),
                result.final_cost(),
                result.steps.len()
            );
            match result.termination {
                Termination::Converged => println!("terminated: converged"),
                Termination::MaxIterations => println!("terminated: iteration limit"),
                Termination::StepFailed => {
                    println!("terminated: no decreasing needle width found");
                    return Err(CliError::Numeric(
                        "descent stalled before reaching the residual tolerance".into(),
                    ));
                }
            }
            Ok(())
        }
        Command::Sweep(common) => {
            let ctx = build_context(&common)?;
            let traj = hopmp_core::integrate_forward(&ctx.problem, &ctx.control, &ctx.integrate)
                .map_err(numeric)?;
            let adj = hopmp_core::integrate_adjoint(&ctx.problem, &traj, ctx.convention)
                .map_err(numeric)?;
            let taus = default_tau_grid(ctx.problem.horizon, &ctx.control, 64);
            let omegas = hopmp_core::default_levels(&ctx.problem, 17);
            let mut csv = String::from("tau");
            for a in 0..ctx.problem.control_dim {
                csv.push_str(&format!(",omega{}", a + 1));
            }
            csv.push_str(",H,H_at_u,delta\n");
            for &tau in &taus {
                let u_tau = ctx.control.eval(tau).map_err(numeric)?;
                let h_at_u = hopmp_core::hamiltonian(&ctx.problem, &traj, &adj, tau, &u_tau)
                    .map_err(numeric)?;
                for omega in &omegas {
                    let h = hopmp_core::hamiltonian(&ctx.problem, &traj, &adj, tau, omega)
                        .map_err(numeric)?;
                    csv.push_str(&format!("{tau}"));
                    for w in omega {
                        csv.push_str(&format!(",{w}"));
                    }
                    csv.push_str(&format!(",{h},{h_at_u},{}\n", h - h_at_u));
                }
            }
            write_artifact(&ctx.out, "sweep.csv", &csv)?;
            Ok(())
        }
        Command::Oracle {
            common,
            pieces,
            levels,
            lipschitz,
        } => {
            let ctx = build_context(&common)?;
            let level_set = hopmp_core::default_levels(&ctx.problem, levels);
            let result = hopmp_core::brute_force(
                &ctx.problem,
                pieces,
                &level_set,
                &ctx.integrate,
                ctx.parallelism,
            )
            .map_err(numeric)?;
            write_artifact(&ctx.out, "oracle.csv", &result.to_csv())?;
            write_artifact(
                &ctx.out,
                "control_bruteforce.txt",
                &result.best_control.serialize(),
            )?;
            println!(
                "brute force: {} candidates, best cost {}",
                result.candidates, result.best_cost
            );
            let reference =
                hopmp_core::terminal_cost(&ctx.problem, &ctx.control, &ctx.integrate)
                    .map_err(numeric)?;
            println!("given control cost: {reference}");
            println!("gap (given - best): {}", reference - result.best_cost);
            if let Some(samples) = lipschitz {
                let probe = hopmp_core::lipschitz_check(
                    &ctx.problem,
                    &ctx.control,
                    samples,
                    ctx.seed,
                    &ctx.integrate,
                )
                .map_err(numeric)?;
                write_artifact(&ctx.out, "lipschitz.csv", &probe.to_csv())?;
                println!(
                    "lipschitz probe: {} samples, max ratio {:.6}, median {:.6}{}",
                    probe.samples,
                    probe.max_ratio,
                    probe.median_ratio,
                    if probe.unbounded_suspect {
                        " (suspect growth)"
                    } else {
                        ""
                    }
                );
            }
            Ok(())
        }
    }
}

fn print_verdict(report: &hopmp_core::PmpReport) {
    if report.satisfied {
        println!(
            "PMP verdict: satisfied (ess-sup residual {:.3e} <= tol {:.3e})",
            report.ess_sup, report.tolerance
        );
    } else {
        let (tau, omega, kappa) = report.worst.clone().unwrap();
        let omega: Vec<String> = omega.iter().map(|v| v.to_string()).collect();
        println!(
            "PMP verdict: violated (worst tau = {tau}, omega* = [{}], kappa = {kappa})",
            omega.join(", ")
        );
    }
}
