//! Problem definition: dynamics, terminal cost, control sets, initial jet,
//! and the symbolic derivatives everything downstream consumes.

use thiserror::Error;

use crate::expr::{self, Expr, ExprError, Schema, Var};
use crate::jets::{self, DerivedSystem, Jet};

/// Admissible control set `K`: a finite list of points or an axis-aligned
/// box. PMP maximization handles both; general polytopes are out of scope.
#[derive(Debug, Clone, PartialEq)]
pub enum ControlSet {
    Finite(Vec<Vec<f64>>),
    Box(Vec<(f64, f64)>),
}

impl ControlSet {
    pub fn dim(&self) -> usize {
        match self {
            ControlSet::Finite(pts) => pts.first().map_or(0, Vec::len),
            ControlSet::Box(b) => b.len(),
        }
    }

    /// Axis-aligned bounding box.
    pub fn bounding_box(&self) -> Vec<(f64, f64)> {
        match self {
            ControlSet::Box(b) => b.clone(),
            ControlSet::Finite(pts) => {
                let m = self.dim();
                let mut out = vec![(f64::INFINITY, f64::NEG_INFINITY); m];
                for p in pts {
                    for (a, &x) in p.iter().enumerate() {
                        out[a].0 = out[a].0.min(x);
                        out[a].1 = out[a].1.max(x);
                    }
                }
                out
            }
        }
    }

    pub fn is_empty(&self) -> bool {
        match self {
            ControlSet::Finite(pts) => pts.is_empty(),
            ControlSet::Box(b) => b.is_empty() || b.iter().any(|&(lo, hi)| lo > hi),
        }
    }
}

/// Default inflated superset: per axis `[-2r, 2r]` with `r` the largest
/// absolute bound of K on that axis (a box analogue of doubling the radius
/// of an origin-centred ball).
pub fn default_khat(set: &ControlSet) -> Vec<(f64, f64)> {
    set.bounding_box()
        .iter()
        .map(|&(lo, hi)| {
            let r = lo.abs().max(hi.abs());
            let r = if r == 0.0 { 1.0 } else { r };
            (-2.0 * r, 2.0 * r)
        })
        .collect()
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ProblemError {
    #[error("expression error: {0}")]
    Expr(#[from] ExprError),
    #[error("problem validation failed:\n{0}")]
    Invalid(ValidationReport),
}

/// Outcome of [`validate`]: hard violations plus advisory warnings
/// (potential singularities of `f` near the initial data).
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ValidationReport {
    pub violations: Vec<String>,
    pub warnings: Vec<String>,
}

impl ValidationReport {
    pub fn is_valid(&self) -> bool {
        self.violations.is_empty()
    }
}

impl std::fmt::Display for ValidationReport {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        for v in &self.violations {
            writeln!(f, "violation: {v}")?;
        }
        for w in &self.warnings {
            writeln!(f, "warning: {w}")?;
        }
        Ok(())
    }
}

/// A k-th order Mayer problem. Immutable once built; the constructor
/// precomputes every symbolic derivative used by the forward, adjoint and
/// verification layers.
#[derive(Debug, Clone)]
pub struct Problem {
    pub order: usize,
    pub state_dim: usize,
    pub control_dim: usize,
    pub horizon: f64,
    pub dynamics: Vec<Expr>,
    pub cost: Expr,
    pub control_set: ControlSet,
    /// Derivative range boxes `K^(l)`, `l = 1..k-1` (may be empty).
    pub derivative_boxes: Vec<Vec<(f64, f64)>>,
    /// Convex admissible superset.
    pub khat: Vec<(f64, f64)>,
    /// Initial jet: x-levels `0..k-1` at `t = 0`.
    pub initial_jet: Vec<Vec<f64>>,

    // Precomputed symbolic data.
    /// `df[j][s][i] = d f^j / d x^i_(s)` for `s <= k-1`.
    pub df_dx: Vec<Vec<Vec<Expr>>>,
    /// `df_du[j][a] = d f^j / d u^a`.
    pub df_du: Vec<Vec<Expr>>,
    /// `dcost[s][i] = d C / d x^i_(s)` for `s <= k-1`.
    pub dcost_dx: Vec<Vec<Expr>>,
    pub derived: DerivedSystem,
    /// Solved top-derivative expressions `p_(k)i`.
    pub adjoint_rhs: Vec<Expr>,
    /// `terminal_terms[l-1][h][i] = D^h( sum_m p_m df^m/dx^i_(k-l+h) )`
    /// for `l = 1..k-1`, `h = 0..l-1`, expanded with the control-frozen
    /// operator.
    pub terminal_terms: Vec<Vec<Vec<Expr>>>,
}

impl Problem {
    #[allow(clippy::too_many_arguments)] // one argument per problem ingredient
    pub fn new(
        order: usize,
        horizon: f64,
        dynamics: Vec<Expr>,
        cost: Expr,
        control_set: ControlSet,
        derivative_boxes: Vec<Vec<(f64, f64)>>,
        khat: Option<Vec<(f64, f64)>>,
        initial_jet: Vec<Vec<f64>>,
    ) -> Result<Self, ProblemError> {
        let n = dynamics.len();
        let m = control_set.dim();
        let k = order;
        assert!(k >= 1, "constraint order must be at least 1");

        let khat = khat.unwrap_or_else(|| default_khat(&control_set));
        let df_dx: Vec<Vec<Vec<Expr>>> = dynamics
            .iter()
            .map(|fj| {
                (0..k)
                    .map(|s| {
                        (0..n)
                            .map(|i| fj.diff(Var::State { idx: i, order: s }).simplify())
                            .collect()
                    })
                    .collect()
            })
            .collect();
        let df_du: Vec<Vec<Expr>> = dynamics
            .iter()
            .map(|fj| {
                (0..m)
                    .map(|a| fj.diff(Var::Control { idx: a, order: 0 }).simplify())
                    .collect()
            })
            .collect();
        let dcost_dx: Vec<Vec<Expr>> = (0..k)
            .map(|s| {
                (0..n)
                    .map(|i| cost.diff(Var::State { idx: i, order: s }).simplify())
                    .collect()
            })
            .collect();
        let derived = jets::build_derived_system(&dynamics, k)?;
        let adjoint_rhs = jets::adjoint_rhs(&dynamics, k)?;

        // Terminal-condition D^h blocks: x-jets reach 2k-3, p-jets reach
        // k-2; higher x-jets are supplied numerically by the derived system.
        let frozen_schema = Schema {
            state_dim: n,
            control_dim: m,
            max_state_order: (2 * k).saturating_sub(2),
            max_control_order: Some(0),
            max_costate_order: Some(k - 1),
        };
        let mut terminal_terms = Vec::new();
        #[allow(clippy::needless_range_loop)] // tensor indices (l, h, i, j)
        for l in 1..k {
            let mut per_h = Vec::new();
            for h in 0..l {
                let mut per_i = Vec::with_capacity(n);
                for i in 0..n {
                    let mut term = Expr::Const(0.0);
                    for j in 0..n {
                        term = expr::add(
                            term,
                            expr::mul(
                                Expr::Var(Var::Costate { idx: j, order: 0 }),
                                df_dx[j][k - l + h][i].clone(),
                            ),
                        );
                    }
                    for _ in 0..h {
                        term = jets::dt_partial(&term, &frozen_schema)?;
                    }
                    per_i.push(term.simplify());
                }
                per_h.push(per_i);
            }
            terminal_terms.push(per_h);
        }

        let problem = Problem {
            order,
            state_dim: n,
            control_dim: m,
            horizon,
            dynamics,
            cost,
            control_set,
            derivative_boxes,
            khat,
            initial_jet,
            df_dx,
            df_du,
            dcost_dx,
            derived,
            adjoint_rhs,
            terminal_terms,
        };
        let report = validate(&problem);
        if !report.is_valid() {
            return Err(ProblemError::Invalid(report));
        }
        Ok(problem)
    }

    pub fn dynamics_schema(&self) -> Schema {
        Schema::dynamics(self.order, self.state_dim, self.control_dim)
    }

    pub fn cost_schema(&self) -> Schema {
        Schema::cost(self.order, self.state_dim)
    }

    /// Evaluates `f` at `(t, x-jets, omega)`.
    pub fn eval_dynamics(
        &self,
        t: f64,
        x_jets: &[Vec<f64>],
        omega: &[f64],
    ) -> Result<Vec<f64>, ExprError> {
        let mut env = expr::Env::for_problem(self.order, self.state_dim, self.control_dim);
        env.set_time(t);
        for (s, level) in x_jets.iter().enumerate().take(self.order) {
            env.set_state_level(s, level);
        }
        env.set_control_level(0, omega);
        self.dynamics.iter().map(|f| f.eval(&env)).collect()
    }

    /// Terminal cost at an x-jet of orders `0..k-1`.
    pub fn eval_cost(&self, x_jets: &[Vec<f64>]) -> Result<f64, ExprError> {
        let mut env = expr::Env::for_problem(self.order, self.state_dim, self.control_dim);
        for (s, level) in x_jets.iter().enumerate().take(self.order) {
            env.set_state_level(s, level);
        }
        self.cost.eval(&env)
    }
}

/// Structural checks (conditions alpha/beta hold by construction for the
/// smooth primitives of the grammar; what remains is what the grammar
/// cannot enforce).
pub fn validate(p: &Problem) -> ValidationReport {
    let mut report = ValidationReport::default();
    let k = p.order;
    let n = p.state_dim;

    if p.horizon <= 0.0 {
        report.violations.push("horizon T must be positive".into());
    }
    if p.dynamics.len() != n {
        report
            .violations
            .push("dynamics must have one component per state dimension".into());
    }
    for (j, f) in p.dynamics.iter().enumerate() {
        for v in f.variables() {
            match v {
                Var::Costate { .. } => report
                    .violations
                    .push(format!("f{}: co-state variable `{v}` in dynamics", j + 1)),
                Var::State { order, .. } if order >= k => report.violations.push(format!(
                    "f{}: jet `{v}` of order >= k in dynamics",
                    j + 1
                )),
                Var::Control { order, .. } if order > 0 => report.violations.push(format!(
                    "f{}: control derivative `{v}` in dynamics",
                    j + 1
                )),
                _ => {}
            }
        }
    }
    for v in p.cost.variables() {
        match v {
            Var::Control { .. } => report
                .violations
                .push(format!("cost depends on control `{v}`")),
            Var::Costate { .. } => report
                .violations
                .push(format!("cost depends on co-state `{v}`")),
            Var::Time => report
                .violations
                .push("cost depends on t; the terminal cost is a function of the final jet".into()),
            Var::State { order, .. } if order >= k => report
                .violations
                .push(format!("cost depends on jet `{v}` of order >= k")),
            _ => {}
        }
    }
    if p.control_set.is_empty() {
        report.violations.push("control set K is empty".into());
    }
    if p.khat.len() != p.control_dim {
        report
            .violations
            .push("K-hat must have one interval per control axis".into());
    } else {
        for (a, &(lo, hi)) in p.control_set.bounding_box().iter().enumerate() {
            let (hlo, hhi) = p.khat[a];
            if lo < hlo || hi > hhi {
                report
                    .violations
                    .push(format!("K is not contained in K-hat on axis {}", a + 1));
            }
        }
    }
    for (l, b) in p.derivative_boxes.iter().enumerate() {
        if b.len() != p.control_dim || b.iter().any(|&(lo, hi)| lo > hi) {
            report
                .violations
                .push(format!("malformed derivative bound box K^({})", l + 1));
        }
    }
    if p.initial_jet.len() != k || p.initial_jet.iter().any(|lvl| lvl.len() != n) {
        report
            .violations
            .push("initial jet must provide x-levels 0..k-1, each of the state dimension".into());
    }

    // Advisory singularity scan: divisions and log/sqrt arguments probed at
    // the initial jet over the corners and centre of K's box.
    let mut probes: Vec<Vec<f64>> = vec![p
        .control_set
        .bounding_box()
        .iter()
        .map(|&(lo, hi)| 0.5 * (lo + hi))
        .collect()];
    for (a, &(lo, hi)) in p.control_set.bounding_box().iter().enumerate() {
        let mut corner = probes[0].clone();
        corner[a] = lo;
        probes.push(corner.clone());
        corner[a] = hi;
        probes.push(corner);
    }
    if p.initial_jet.len() == k && p.initial_jet.iter().all(|lvl| lvl.len() == n) {
        for omega in &probes {
            for (j, f) in p.dynamics.iter().enumerate() {
                let mut env = expr::Env::for_problem(k, n, p.control_dim);
                env.set_time(0.0);
                for (s, level) in p.initial_jet.iter().enumerate() {
                    env.set_state_level(s, level);
                }
                env.set_control_level(0, omega);
                if let Err(ExprError::NonFiniteResult(at)) = f.eval(&env) {
                    report.warnings.push(format!(
                        "f{} is singular near the initial data (at `{at}`)",
                        j + 1
                    ));
                }
            }
        }
        report.warnings.dedup();
    }
    report
}

/// The controlled Lagrangian `sum_j p_j (x^j_(k) - f^j(t, x-jets, omega))`
/// at a combined (x, p) jet. Vanishes identically along a trajectory
/// driven by its own control.
pub fn pontryagin_lagrangian(
    p: &Problem,
    jet: &Jet,
    costate: &[f64],
    omega: &[f64],
) -> Result<f64, ExprError> {
    let f = p.eval_dynamics(jet.time, &jet.levels, omega)?;
    let xk = jet.level(p.order);
    Ok(costate
        .iter()
        .zip(xk.iter().zip(f.iter()))
        .map(|(pj, (xj, fj))| pj * (xj - fj))
        .sum())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::expr::parse;

    pub(crate) fn double_integrator() -> Problem {
        let sd = Schema::dynamics(2, 1, 1);
        let sc = Schema::cost(2, 1);
        Problem::new(
            2,
            1.0,
            vec![parse("u1", &sd).unwrap()],
            parse("x1_0", &sc).unwrap(),
            ControlSet::Box(vec![(-1.0, 1.0)]),
            vec![vec![(-100.0, 100.0)]],
            None,
            vec![vec![0.0], vec![0.0]],
        )
        .unwrap()
    }

    #[test]
    fn double_integrator_is_valid() {
        let p = double_integrator();
        assert!(validate(&p).is_valid());
        assert_eq!(p.khat, vec![(-2.0, 2.0)]);
    }

    #[test]
    fn costate_in_dynamics_is_rejected() {
        let schema = Schema {
            max_costate_order: Some(0),
            ..Schema::dynamics(1, 1, 1)
        };
        let err = Problem::new(
            1,
            1.0,
            vec![parse("p1_0*u1", &schema).unwrap()],
            parse("x1_0", &Schema::cost(1, 1)).unwrap(),
            ControlSet::Box(vec![(-1.0, 1.0)]),
            vec![],
            None,
            vec![vec![0.0]],
        )
        .unwrap_err();
        match err {
            ProblemError::Invalid(report) => {
                assert!(report.violations.iter().any(|v| v.contains("co-state")))
            }
            other => panic!("unexpected error {other:?}"),
        }
    }

    #[test]
    fn control_in_cost_is_rejected() {
        let err = Problem::new(
            1,
            1.0,
            vec![parse("u1", &Schema::dynamics(1, 1, 1)).unwrap()],
            parse("u1", &Schema::dynamics(1, 1, 1)).unwrap(),
            ControlSet::Box(vec![(-1.0, 1.0)]),
            vec![],
            None,
            vec![vec![0.0]],
        )
        .unwrap_err();
        match err {
            ProblemError::Invalid(report) => {
                assert!(report.violations.iter().any(|v| v.contains("control")))
            }
            other => panic!("unexpected error {other:?}"),
        }
    }

    #[test]
    fn singularity_warning_near_initial_data() {
        let sd = Schema::dynamics(1, 1, 1);
        let p = Problem::new(
            1,
            1.0,
            vec![parse("u1/x1_0", &sd).unwrap()],
            parse("x1_0", &Schema::cost(1, 1)).unwrap(),
            ControlSet::Box(vec![(-1.0, 1.0)]),
            vec![],
            None,
            vec![vec![0.0]],
        )
        .unwrap();
        let report = validate(&p);
        assert!(report.is_valid());
        assert!(!report.warnings.is_empty());
    }

    #[test]
    fn lagrangian_direct_substitution() {
        // k=1, f=u1: p=2, xdot=3, omega=1 -> 2*(3-1) = 4
        let p = Problem::new(
            1,
            1.0,
            vec![parse("u1", &Schema::dynamics(1, 1, 1)).unwrap()],
            parse("x1_0", &Schema::cost(1, 1)).unwrap(),
            ControlSet::Box(vec![(-1.0, 1.0)]),
            vec![],
            None,
            vec![vec![0.0]],
        )
        .unwrap();
        let jet = Jet::new(0.5, vec![vec![0.0], vec![3.0]]);
        let value = pontryagin_lagrangian(&p, &jet, &[2.0], &[1.0]).unwrap();
        assert_eq!(value, 4.0);
    }

    #[test]
    fn lagrangian_zero_costate() {
        let p = double_integrator();
        let jet = Jet::new(0.5, vec![vec![0.3], vec![-0.1], vec![0.7]]);
        assert_eq!(
            pontryagin_lagrangian(&p, &jet, &[0.0], &[0.5]).unwrap(),
            0.0
        );
    }

    #[test]
    fn lagrangian_on_trajectory_jet_vanishes() {
        // k=2, f=u1: jet with x_(2) = -1 equal to the applied omega = -1.
        let p = double_integrator();
        let jet = Jet::new(0.5, vec![vec![-0.125], vec![-0.5], vec![-1.0]]);
        let value = pontryagin_lagrangian(&p, &jet, &[-0.5], &[-1.0]).unwrap();
        assert_eq!(value, 0.0);
    }
}
