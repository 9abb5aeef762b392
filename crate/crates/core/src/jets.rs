//! Total-derivative operators on jet expressions and the symbolic
//! constructions built from them: the derived system of order `2k-1` and
//! the right-hand side of the k-th order adjoint equation.
//!
//! Two operators are distinguished. `dt_partial` is the control-frozen
//! total derivative: it sums `q_(l+1) * d/dq_(l)` over state and co-state
//! jet coordinates and contributes no `du/dt` terms. `dt_full` adds the
//! control-jet terms `u_(s+1) * d/du_(s)` on top.

use crate::expr::{add, mul, var, Expr, ExprError, ExprResult, Schema, Var};

/// A jet of a curve at a time: the tuple `(t, q, q_(1), ..., q_(r))`.
/// Each level holds one vector of the component dimension.
#[derive(Debug, Clone, PartialEq)]
pub struct Jet {
    pub time: f64,
    pub levels: Vec<Vec<f64>>,
}

impl Jet {
    pub fn new(time: f64, levels: Vec<Vec<f64>>) -> Self {
        let dim = levels.first().map_or(0, Vec::len);
        assert!(
            levels.iter().all(|l| l.len() == dim),
            "jet levels must share one component dimension"
        );
        Jet { time, levels }
    }

    /// Derivative order `r` of the jet.
    pub fn order(&self) -> usize {
        self.levels.len().saturating_sub(1)
    }

    pub fn dim(&self) -> usize {
        self.levels.first().map_or(0, Vec::len)
    }

    pub fn level(&self, order: usize) -> &[f64] {
        &self.levels[order]
    }
}

fn bump(v: Var) -> Var {
    match v {
        Var::State { idx, order } => Var::State { idx, order: order + 1 },
        Var::Costate { idx, order } => Var::Costate { idx, order: order + 1 },
        Var::Control { idx, order } => Var::Control { idx, order: order + 1 },
        Var::Time => Var::Time,
    }
}

/// Control-frozen total derivative: `de/dt + sum q_(l+1) * de/dq_(l)` over
/// state and co-state jets. Control variables are treated as frozen
/// parameters.
pub fn dt_partial(e: &Expr, schema: &Schema) -> ExprResult<Expr> {
    total_derivative(e, schema, false)
}

/// Full total derivative: `dt_partial(e) + sum u_(s+1) * de/du_(s)`.
pub fn dt_full(e: &Expr, schema: &Schema) -> ExprResult<Expr> {
    total_derivative(e, schema, true)
}

fn total_derivative(e: &Expr, schema: &Schema, with_controls: bool) -> ExprResult<Expr> {
    let mut out = e.diff(Var::Time);
    for v in e.variables() {
        let include = match v {
            Var::Time => false,
            Var::State { .. } | Var::Costate { .. } => true,
            Var::Control { .. } => with_controls,
        };
        if !include {
            continue;
        }
        let raised = bump(v);
        if !schema.allows(raised) {
            return Err(ExprError::DerivativeOrderTooHigh(raised.to_string()));
        }
        out = add(out, mul(e.diff(v), var(raised)));
    }
    Ok(out)
}

/// The prolonged dynamics: expressions `F_(l)` for `x_(l)`, `l = k..2k-1`,
/// over `(t, x-jets <= k-1, u-jets <= l-k)`. `F_(k)` is the dynamics
/// verbatim; every later level is the full total derivative of the
/// previous one with `x_(k)` replaced by the dynamics before each
/// differentiation, so no jet above order `k-1` survives.
#[derive(Debug, Clone)]
pub struct DerivedSystem {
    pub order: usize,
    /// `levels[l - k][i]` is the expression for `x^i_(l)`.
    pub levels: Vec<Vec<Expr>>,
}

impl DerivedSystem {
    /// Expression for `x^i_(l)`; `l` ranges over `k..=2k-1`.
    pub fn level(&self, l: usize) -> &[Expr] {
        &self.levels[l - self.order]
    }

    pub fn max_level(&self) -> usize {
        self.order + self.levels.len() - 1
    }
}

pub fn build_derived_system(f: &[Expr], k: usize) -> ExprResult<DerivedSystem> {
    let n = f.len();
    // Differentiating F_(l) may momentarily raise x-jets to order k and
    // u-jets to order l-k+1; the substitution immediately removes x_(k).
    let schema = Schema {
        state_dim: n,
        control_dim: usize::MAX >> 1,
        max_state_order: k,
        max_control_order: Some(k.max(1)),
        max_costate_order: None,
    };
    let mut levels = vec![f.to_vec()];
    for _ in k..(2 * k - 1) {
        let prev = levels.last().unwrap();
        let mut next = Vec::with_capacity(n);
        for comp in prev {
            let mut d = dt_full(comp, &schema)?;
            for (i, fi) in f.iter().enumerate() {
                d = d.substitute(Var::State { idx: i, order: k }, fi);
            }
            next.push(d);
        }
        levels.push(next);
    }
    Ok(DerivedSystem { order: k, levels })
}

/// Symbolic right-hand side of the k-th order adjoint equation, solved for
/// the top derivative:
///
/// ```text
/// p_(k)i = (-1)^k * sum_{h=0}^{k-1} (-1)^h D^h( p_j * df^j/dx^i_(h) )
/// ```
///
/// with `D` the control-frozen operator, under which co-state jets raise
/// exactly like state jets. The result is linear in the p-jet variables
/// and reaches x-jets up to `2k-2` and p-jets up to `k-1`.
pub fn adjoint_rhs(f: &[Expr], k: usize) -> ExprResult<Vec<Expr>> {
    let n = f.len();
    let schema = Schema {
        state_dim: n,
        control_dim: usize::MAX >> 1,
        max_state_order: 2 * k - 2,
        max_control_order: Some(0),
        max_costate_order: Some(k - 1),
    };
    let overall = if k.is_multiple_of(2) { 1.0 } else { -1.0 };
    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        let mut acc = Expr::Const(0.0);
        for h in 0..k {
            // p_j * df^j/dx^i_(h), then h applications of D.
            let mut term = Expr::Const(0.0);
            for (j, fj) in f.iter().enumerate() {
                term = add(
                    term,
                    mul(
                        var(Var::Costate { idx: j, order: 0 }),
                        fj.diff(Var::State { idx: i, order: h }),
                    ),
                );
            }
            for _ in 0..h {
                term = dt_partial(&term, &schema)?;
            }
            let sign = if h % 2 == 0 { 1.0 } else { -1.0 };
            acc = add(acc, mul(Expr::Const(overall * sign), term));
        }
        out.push(acc.simplify());
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::expr::{parse, Env, Schema};

    fn wide_schema(k: usize, n: usize, m: usize) -> Schema {
        Schema {
            state_dim: n,
            control_dim: m,
            max_state_order: 2 * k - 1,
            max_control_order: Some(k),
            max_costate_order: Some(k),
        }
    }

    #[test]
    fn dt_partial_shifts_state() {
        let s = wide_schema(2, 1, 1);
        let e = parse("x1_0", &s).unwrap();
        assert_eq!(dt_partial(&e, &s).unwrap().to_string(), "x1_1");
    }

    #[test]
    fn dt_partial_drops_control_rate() {
        let s = wide_schema(2, 1, 1);
        let e = parse("t*u1", &s).unwrap();
        assert_eq!(dt_partial(&e, &s).unwrap().to_string(), "u1");
    }

    #[test]
    fn dt_partial_leibniz_over_costates() {
        let s = wide_schema(2, 1, 1);
        let e = parse("p1_0*x1_1", &s).unwrap();
        let d = dt_partial(&e, &s).unwrap();
        // p1_1*x1_1 + p1_0*x1_2 up to term order.
        let mut env = Env::for_problem(2, 1, 1);
        env.set_time(0.3)
            .set_state_level(1, &[2.0])
            .set_state_level(2, &[5.0])
            .set_costate_level(0, &[7.0])
            .set_costate_level(1, &[11.0]);
        assert_eq!(d.eval(&env).unwrap(), 11.0 * 2.0 + 7.0 * 5.0);
    }

    #[test]
    fn dt_full_adds_control_jets() {
        let s = wide_schema(2, 1, 1);
        assert_eq!(
            dt_full(&parse("t*u1", &s).unwrap(), &s).unwrap().to_string(),
            "u1+t*u1_1"
        );
        assert_eq!(
            dt_full(&parse("x1_0", &s).unwrap(), &s).unwrap().to_string(),
            "x1_1"
        );
        assert_eq!(
            dt_full(&parse("u1^2", &s).unwrap(), &s).unwrap().to_string(),
            "2*u1*u1_1"
        );
    }

    #[test]
    fn dt_full_minus_partial_carries_control_jets_only() {
        let s = wide_schema(2, 1, 1);
        let e = parse("t*u1 + x1_0*u1 + sin(t)", &s).unwrap();
        let full = dt_full(&e, &s).unwrap();
        let frozen = dt_partial(&e, &s).unwrap();
        let diff = crate::expr::sub(full, frozen).simplify();
        let vars = diff.variables();
        assert!(vars
            .iter()
            .any(|v| matches!(v, Var::Control { order, .. } if *order >= 1)));
    }

    #[test]
    fn dt_rejects_order_beyond_cap() {
        let s = Schema {
            state_dim: 1,
            control_dim: 1,
            max_state_order: 1,
            max_control_order: Some(0),
            max_costate_order: None,
        };
        let e = parse("x1_1", &s).unwrap();
        assert!(matches!(
            dt_partial(&e, &s),
            Err(ExprError::DerivativeOrderTooHigh(_))
        ));
    }

    #[test]
    fn derived_system_double_integrator() {
        let s = Schema::dynamics(2, 1, 1);
        let f = vec![parse("u1", &s).unwrap()];
        let ds = build_derived_system(&f, 2).unwrap();
        assert_eq!(ds.level(2)[0].to_string(), "u1");
        assert_eq!(ds.level(3)[0].to_string(), "u1_1");
    }

    #[test]
    fn derived_system_substitutes_kth_order() {
        let s = Schema::dynamics(2, 1, 1);
        let f = vec![parse("-x1_0", &s).unwrap()];
        let ds = build_derived_system(&f, 2).unwrap();
        // F_(3) = -x1_1 after the x_(2) -> f substitution.
        let mut env = Env::for_problem(2, 1, 1);
        env.set_time(0.0)
            .set_state_level(0, &[0.4])
            .set_state_level(1, &[3.0])
            .set_control_level(0, &[0.0])
            .set_control_level(1, &[0.0]);
        assert_eq!(ds.level(3)[0].eval(&env).unwrap(), -3.0);
        assert!(!ds.level(3)[0].depends_on(Var::State { idx: 0, order: 2 }));
    }

    #[test]
    fn derived_system_k1_is_single_level() {
        let s = Schema::dynamics(1, 1, 1);
        let f = vec![parse("u1", &s).unwrap()];
        let ds = build_derived_system(&f, 1).unwrap();
        assert_eq!(ds.levels.len(), 1);
        assert_eq!(ds.level(1)[0].to_string(), "u1");
    }

    #[test]
    fn adjoint_rhs_classical_k1() {
        let s = Schema::dynamics(1, 2, 1);
        let f = vec![
            parse("x2_0*u1", &s).unwrap(),
            parse("sin(x1_0)", &s).unwrap(),
        ];
        let rhs = adjoint_rhs(&f, 1).unwrap();
        // p_(1)i = -sum_j p_j df^j/dx^i
        let mut env = Env::for_problem(1, 2, 1);
        env.set_time(0.0)
            .set_state_level(0, &[0.4, 1.5])
            .set_control_level(0, &[2.0])
            .set_costate_level(0, &[3.0, 5.0]);
        let expect0 = -(3.0 * 0.0 + 5.0 * 0.4f64.cos());
        let expect1 = -(3.0 * 2.0 + 5.0 * 0.0);
        assert!((rhs[0].eval(&env).unwrap() - expect0).abs() < 1e-15);
        assert!((rhs[1].eval(&env).unwrap() - expect1).abs() < 1e-15);
    }

    #[test]
    fn adjoint_rhs_vanishes_for_control_only_dynamics() {
        let s = Schema::dynamics(2, 1, 1);
        let f = vec![parse("u1", &s).unwrap()];
        let rhs = adjoint_rhs(&f, 2).unwrap();
        assert_eq!(rhs[0], Expr::Const(0.0));
    }

    #[test]
    fn adjoint_rhs_k2_with_position_feedback() {
        let s = Schema::dynamics(2, 1, 1);
        let f = vec![parse("-x1_0+u1", &s).unwrap()];
        let rhs = adjoint_rhs(&f, 2).unwrap();
        // (-1)^2 (p * (-1) - D(p * 0)) = -p1_0
        let mut env = Env::for_problem(2, 1, 1);
        env.set_time(0.0)
            .set_state_level(0, &[0.0])
            .set_state_level(1, &[0.0])
            .set_state_level(2, &[0.0])
            .set_control_level(0, &[0.0])
            .set_costate_level(0, &[4.0])
            .set_costate_level(1, &[9.0]);
        assert_eq!(rhs[0].eval(&env).unwrap(), -4.0);
    }

    #[test]
    fn adjoint_rhs_is_linear_in_costate_jets() {
        let s = Schema::dynamics(2, 1, 1);
        let f = vec![parse("sin(x1_0)*x1_1+u1", &s).unwrap()];
        let rhs = adjoint_rhs(&f, 2).unwrap();
        let mut env = Env::for_problem(2, 1, 1);
        env.set_time(0.7)
            .set_state_level(0, &[0.3])
            .set_state_level(1, &[-0.2])
            .set_state_level(2, &[0.8])
            .set_control_level(0, &[0.1])
            .set_costate_level(0, &[1.3])
            .set_costate_level(1, &[-0.4]);
        let base = rhs[0].eval(&env).unwrap();
        env.set_costate_level(0, &[2.0 * 1.3]).set_costate_level(1, &[2.0 * -0.4]);
        let scaled = rhs[0].eval(&env).unwrap();
        assert_eq!(scaled, 2.0 * base);
    }
}
