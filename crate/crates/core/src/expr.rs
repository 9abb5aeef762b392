//! Scalar expressions over the jet variables `t`, `x<i>_<s>`, `u<a>` and
//! `p<i>_<s>`: parsing, evaluation and exact symbolic differentiation.
//!
//! The grammar (whitespace insignificant, no implicit multiplication):
//!
//! ```text
//! expr   := term (('+'|'-') term)*
//! term   := factor (('*'|'/') factor)*
//! factor := ['-'] atom ['^' integer]
//! atom   := number | ident | func '(' expr ')' | '(' expr ')'
//! func   := sin | cos | exp | log | sqrt
//! ident  := t | x<digits>_<digits> | u<digits> | p<digits>_<digits>
//! ```
//!
//! Exponents are constant integers, so differentiation is total on the
//! language. The simplifier folds constants and eliminates 0/1 identities;
//! it never factors or reorders.

use std::collections::BTreeSet;
use std::fmt;

use thiserror::Error;

/// Which family of jet variables a symbol belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Var {
    /// Independent time variable `t`.
    Time,
    /// `x<idx+1>_<order>`: state component `idx`, derivative order `order`.
    State { idx: usize, order: usize },
    /// `u<idx+1>` (order 0) or the internal jet `u<idx+1>_<order>`.
    Control { idx: usize, order: usize },
    /// `p<idx+1>_<order>`: co-state component and derivative order.
    Costate { idx: usize, order: usize },
}

impl fmt::Display for Var {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match *self {
            Var::Time => write!(f, "t"),
            Var::State { idx, order } => write!(f, "x{}_{}", idx + 1, order),
            Var::Control { idx, order: 0 } => write!(f, "u{}", idx + 1),
            Var::Control { idx, order } => write!(f, "u{}_{}", idx + 1, order),
            Var::Costate { idx, order } => write!(f, "p{}_{}", idx + 1, order),
        }
    }
}

/// Declares which variables are legal: dimensions plus per-family caps on
/// the derivative order. `max_costate_order = None` forbids `p` entirely.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Schema {
    pub state_dim: usize,
    pub control_dim: usize,
    pub max_state_order: usize,
    pub max_control_order: Option<usize>,
    pub max_costate_order: Option<usize>,
}

impl Schema {
    /// Schema for a dynamics right-hand side: x-jets up to `k-1`, plain
    /// controls, no co-states.
    pub fn dynamics(k: usize, n: usize, m: usize) -> Self {
        Schema {
            state_dim: n,
            control_dim: m,
            max_state_order: k - 1,
            max_control_order: Some(0),
            max_costate_order: None,
        }
    }

    /// Schema for a terminal cost: x-jets up to `k-1` only.
    pub fn cost(k: usize, n: usize) -> Self {
        Schema {
            state_dim: n,
            control_dim: 0,
            max_state_order: k - 1,
            max_control_order: None,
            max_costate_order: None,
        }
    }

    /// Schema for expressions of a single scalar argument `t` (control
    /// pieces).
    pub fn time_only() -> Self {
        Schema {
            state_dim: 0,
            control_dim: 0,
            max_state_order: 0,
            max_control_order: None,
            max_costate_order: None,
        }
    }

    pub fn allows(&self, v: Var) -> bool {
        match v {
            Var::Time => true,
            Var::State { idx, order } => idx < self.state_dim && order <= self.max_state_order,
            Var::Control { idx, order } => {
                idx < self.control_dim && self.max_control_order.is_some_and(|c| order <= c)
            }
            Var::Costate { idx, order } => {
                idx < self.state_dim && self.max_costate_order.is_some_and(|c| order <= c)
            }
        }
    }

    /// Distinguishes "order too high" from "unknown symbol" for
    /// diagnostics: the family must exist in the schema at all.
    fn within_dims(&self, v: Var) -> bool {
        match v {
            Var::Time => true,
            Var::State { idx, .. } => idx < self.state_dim,
            Var::Costate { idx, .. } => self.max_costate_order.is_some() && idx < self.state_dim,
            Var::Control { idx, .. } => {
                self.max_control_order.is_some() && idx < self.control_dim
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum UnaryOp {
    Neg,
    Sin,
    Cos,
    Exp,
    Log,
    Sqrt,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BinOp {
    Add,
    Sub,
    Mul,
    Div,
}

/// Expression tree. `Pow` keeps its constant integer exponent out of the
/// generic binary case so differentiation stays closed over the language.
#[derive(Debug, Clone, PartialEq)]
pub enum Expr {
    Const(f64),
    Var(Var),
    Unary(UnaryOp, Box<Expr>),
    Binary(BinOp, Box<Expr>, Box<Expr>),
    Pow(Box<Expr>, i32),
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ExprError {
    #[error("syntax error at position {pos}: expected {expected}")]
    Syntax { pos: usize, expected: String },
    #[error("unknown symbol `{0}`")]
    UnknownSymbol(String),
    #[error("derivative order too high: `{0}` exceeds the schema cap")]
    DerivativeOrderTooHigh(String),
    #[error("missing binding for `{0}`")]
    MissingBinding(Var),
    #[error("non-finite result while evaluating `{0}`")]
    NonFiniteResult(String),
}

pub type ExprResult<T> = Result<T, ExprError>;

// ---------------------------------------------------------------------------
// Bindings
// ---------------------------------------------------------------------------

/// Dense variable binding keyed by a schema-shaped layout. Slots start
/// unset; evaluation reports `MissingBinding` on an unset slot.
#[derive(Debug, Clone)]
pub struct Env {
    t: Option<f64>,
    state: Vec<Option<f64>>,
    control: Vec<Option<f64>>,
    costate: Vec<Option<f64>>,
    state_dim: usize,
    control_dim: usize,
}

impl Env {
    pub fn new(schema: &Schema) -> Self {
        let x_levels = schema.max_state_order + 1;
        let u_levels = schema.max_control_order.map_or(0, |c| c + 1);
        let p_levels = schema.max_costate_order.map_or(0, |c| c + 1);
        Env {
            t: None,
            state: vec![None; schema.state_dim * x_levels],
            control: vec![None; schema.control_dim * u_levels],
            costate: vec![None; schema.state_dim * p_levels],
            state_dim: schema.state_dim,
            control_dim: schema.control_dim,
        }
    }

    /// A capacious environment for problem-sized evaluations: x-jets to
    /// `2k-1`, u-jets to `k-1`, p-jets to `k-1`.
    pub fn for_problem(k: usize, n: usize, m: usize) -> Self {
        Env::new(&Schema {
            state_dim: n,
            control_dim: m,
            max_state_order: 2 * k - 1,
            max_control_order: Some(k.saturating_sub(1)),
            max_costate_order: Some(k - 1),
        })
    }

    pub fn set(&mut self, v: Var, value: f64) -> &mut Self {
        match v {
            Var::Time => self.t = Some(value),
            Var::State { idx, order } => {
                let slot = order * self.state_dim + idx;
                if slot >= self.state.len() {
                    self.state.resize(slot + 1, None);
                }
                self.state[slot] = Some(value);
            }
            Var::Control { idx, order } => {
                let slot = order * self.control_dim + idx;
                if slot >= self.control.len() {
                    self.control.resize(slot + 1, None);
                }
                self.control[slot] = Some(value);
            }
            Var::Costate { idx, order } => {
                let slot = order * self.state_dim + idx;
                if slot >= self.costate.len() {
                    self.costate.resize(slot + 1, None);
                }
                self.costate[slot] = Some(value);
            }
        }
        self
    }

    pub fn set_time(&mut self, t: f64) -> &mut Self {
        self.t = Some(t);
        self
    }

    /// Binds one whole jet level of a family at once.
    pub fn set_state_level(&mut self, order: usize, values: &[f64]) -> &mut Self {
        for (i, &v) in values.iter().enumerate() {
            self.set(Var::State { idx: i, order }, v);
        }
        self
    }

    pub fn set_control_level(&mut self, order: usize, values: &[f64]) -> &mut Self {
        for (a, &v) in values.iter().enumerate() {
            self.set(Var::Control { idx: a, order }, v);
        }
        self
    }

    pub fn set_costate_level(&mut self, order: usize, values: &[f64]) -> &mut Self {
        for (i, &v) in values.iter().enumerate() {
            self.set(Var::Costate { idx: i, order }, v);
        }
        self
    }

    fn get(&self, v: Var) -> Option<f64> {
        match v {
            Var::Time => self.t,
            Var::State { idx, order } => {
                self.state.get(order * self.state_dim + idx).copied().flatten()
            }
            Var::Control { idx, order } => {
                self.control.get(order * self.control_dim + idx).copied().flatten()
            }
            Var::Costate { idx, order } => {
                self.costate.get(order * self.state_dim + idx).copied().flatten()
            }
        }
    }
}

// ---------------------------------------------------------------------------
// Evaluation
// ---------------------------------------------------------------------------

impl Expr {
    /// IEEE double evaluation. A non-finite intermediate (division by zero,
    /// log of a non-positive argument, ...) is reported, never propagated.
    pub fn eval(&self, env: &Env) -> ExprResult<f64> {
        let v = self.eval_inner(env)?;
        if v.is_finite() {
            Ok(v)
        } else {
            Err(ExprError::NonFiniteResult(self.to_string()))
        }
    }

    fn eval_inner(&self, env: &Env) -> ExprResult<f64> {
        let value = match self {
            Expr::Const(c) => *c,
            Expr::Var(v) => env.get(*v).ok_or(ExprError::MissingBinding(*v))?,
            Expr::Unary(op, e) => {
                let x = e.eval_inner(env)?;
                match op {
                    UnaryOp::Neg => -x,
                    UnaryOp::Sin => x.sin(),
                    UnaryOp::Cos => x.cos(),
                    UnaryOp::Exp => x.exp(),
                    UnaryOp::Log => x.ln(),
                    UnaryOp::Sqrt => x.sqrt(),
                }
            }
            Expr::Binary(op, a, b) => {
                let x = a.eval_inner(env)?;
                let y = b.eval_inner(env)?;
                match op {
                    BinOp::Add => x + y,
                    BinOp::Sub => x - y,
                    BinOp::Mul => x * y,
                    BinOp::Div => x / y,
                }
            }
            Expr::Pow(e, n) => e.eval_inner(env)?.powi(*n),
        };
        if value.is_finite() {
            Ok(value)
        } else {
            Err(ExprError::NonFiniteResult(self.to_string()))
        }
    }

    /// All variables occurring in the tree, deduplicated and ordered.
    pub fn variables(&self) -> BTreeSet<Var> {
        let mut out = BTreeSet::new();
        self.collect_vars(&mut out);
        out
    }

    fn collect_vars(&self, out: &mut BTreeSet<Var>) {
        match self {
            Expr::Const(_) => {}
            Expr::Var(v) => {
                out.insert(*v);
            }
            Expr::Unary(_, e) | Expr::Pow(e, _) => e.collect_vars(out),
            Expr::Binary(_, a, b) => {
                a.collect_vars(out);
                b.collect_vars(out);
            }
        }
    }

    pub fn depends_on(&self, v: Var) -> bool {
        match self {
            Expr::Const(_) => false,
            Expr::Var(w) => *w == v,
            Expr::Unary(_, e) | Expr::Pow(e, _) => e.depends_on(v),
            Expr::Binary(_, a, b) => a.depends_on(v) || b.depends_on(v),
        }
    }
}

// ---------------------------------------------------------------------------
// Smart constructors (constant folding + 0/1 identities, nothing more)
// ---------------------------------------------------------------------------

pub fn konst(c: f64) -> Expr {
    Expr::Const(c)
}

pub fn var(v: Var) -> Expr {
    Expr::Var(v)
}

pub fn add(a: Expr, b: Expr) -> Expr {
    match (&a, &b) {
        (Expr::Const(x), Expr::Const(y)) => Expr::Const(x + y),
        (Expr::Const(x), _) if *x == 0.0 => b,
        (_, Expr::Const(y)) if *y == 0.0 => a,
        _ => Expr::Binary(BinOp::Add, Box::new(a), Box::new(b)),
    }
}

pub fn sub(a: Expr, b: Expr) -> Expr {
    match (&a, &b) {
        (Expr::Const(x), Expr::Const(y)) => Expr::Const(x - y),
        (_, Expr::Const(y)) if *y == 0.0 => a,
        (Expr::Const(x), _) if *x == 0.0 => neg(b),
        _ => Expr::Binary(BinOp::Sub, Box::new(a), Box::new(b)),
    }
}

pub fn mul(a: Expr, b: Expr) -> Expr {
    match (&a, &b) {
        (Expr::Const(x), Expr::Const(y)) => Expr::Const(x * y),
        (Expr::Const(x), _) if *x == 0.0 => Expr::Const(0.0),
        (_, Expr::Const(y)) if *y == 0.0 => Expr::Const(0.0),
        (Expr::Const(x), _) if *x == 1.0 => b,
        (_, Expr::Const(y)) if *y == 1.0 => a,
        _ => Expr::Binary(BinOp::Mul, Box::new(a), Box::new(b)),
    }
}

pub fn div(a: Expr, b: Expr) -> Expr {
    match (&a, &b) {
        (Expr::Const(x), _) if *x == 0.0 => Expr::Const(0.0),
        (_, Expr::Const(y)) if *y == 1.0 => a,
        (Expr::Const(x), Expr::Const(y)) if *y != 0.0 => Expr::Const(x / y),
        _ => Expr::Binary(BinOp::Div, Box::new(a), Box::new(b)),
    }
}

pub fn neg(a: Expr) -> Expr {
    match &a {
        Expr::Const(x) => Expr::Const(-x),
        _ => Expr::Unary(UnaryOp::Neg, Box::new(a)),
    }
}

pub fn unary(op: UnaryOp, a: Expr) -> Expr {
    if op == UnaryOp::Neg {
        return neg(a);
    }
    Expr::Unary(op, Box::new(a))
}

pub fn pow(a: Expr, n: i32) -> Expr {
    match n {
        0 => Expr::Const(1.0),
        1 => a,
        _ => match &a {
            Expr::Const(c) => Expr::Const(c.powi(n)),
            _ => Expr::Pow(Box::new(a), n),
        },
    }
}

impl Expr {
    /// Bottom-up rebuild through the smart constructors: constant folding
    /// and 0/1 identity elimination only.
    pub fn simplify(&self) -> Expr {
        match self {
            Expr::Const(_) | Expr::Var(_) => self.clone(),
            Expr::Unary(op, e) => unary(*op, e.simplify()),
            Expr::Binary(op, a, b) => {
                let (a, b) = (a.simplify(), b.simplify());
                match op {
                    BinOp::Add => add(a, b),
                    BinOp::Sub => sub(a, b),
                    BinOp::Mul => mul(a, b),
                    BinOp::Div => div(a, b),
                }
            }
            Expr::Pow(e, n) => pow(e.simplify(), *n),
        }
    }

    /// Exact symbolic partial derivative with respect to `v`.
    pub fn diff(&self, v: Var) -> Expr {
        match self {
            Expr::Const(_) => Expr::Const(0.0),
            Expr::Var(w) => Expr::Const(if *w == v { 1.0 } else { 0.0 }),
            Expr::Unary(op, e) => {
                let de = e.diff(v);
                match op {
                    UnaryOp::Neg => neg(de),
                    UnaryOp::Sin => mul(unary(UnaryOp::Cos, (**e).clone()), de),
                    UnaryOp::Cos => neg(mul(unary(UnaryOp::Sin, (**e).clone()), de)),
                    UnaryOp::Exp => mul(unary(UnaryOp::Exp, (**e).clone()), de),
                    UnaryOp::Log => div(de, (**e).clone()),
                    UnaryOp::Sqrt => div(de, mul(konst(2.0), unary(UnaryOp::Sqrt, (**e).clone()))),
                }
            }
            Expr::Binary(op, a, b) => {
                let (da, db) = (a.diff(v), b.diff(v));
                match op {
                    BinOp::Add => add(da, db),
                    BinOp::Sub => sub(da, db),
                    BinOp::Mul => add(mul(da, (**b).clone()), mul((**a).clone(), db)),
                    BinOp::Div => div(
                        sub(mul(da, (**b).clone()), mul((**a).clone(), db)),
                        pow((**b).clone(), 2),
                    ),
                }
            }
            Expr::Pow(e, n) => mul(
                mul(konst(f64::from(*n)), pow((**e).clone(), n - 1)),
                e.diff(v),
            ),
        }
    }

    /// Replaces every occurrence of `v` by `replacement`.
    pub fn substitute(&self, v: Var, replacement: &Expr) -> Expr {
        match self {
            Expr::Const(_) => self.clone(),
            Expr::Var(w) => {
                if *w == v {
                    replacement.clone()
                } else {
                    self.clone()
                }
            }
            Expr::Unary(op, e) => unary(*op, e.substitute(v, replacement)),
            Expr::Binary(op, a, b) => {
                let (a, b) = (a.substitute(v, replacement), b.substitute(v, replacement));
                match op {
                    BinOp::Add => add(a, b),
                    BinOp::Sub => sub(a, b),
                    BinOp::Mul => mul(a, b),
                    BinOp::Div => div(a, b),
                }
            }
            Expr::Pow(e, n) => pow(e.substitute(v, replacement), *n),
        }
    }
}

// ---------------------------------------------------------------------------
// Printing (minimal parentheses; re-parses to a structurally equal tree)
// ---------------------------------------------------------------------------

impl fmt::Display for Expr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        self.fmt_prec(f, 0)
    }
}

impl Expr {
    // Precedence levels: 0 add/sub, 1 mul/div, 2 unary neg, 3 pow/atom.
    fn prec(&self) -> u8 {
        match self {
            Expr::Binary(BinOp::Add | BinOp::Sub, ..) => 0,
            Expr::Binary(BinOp::Mul | BinOp::Div, ..) => 1,
            Expr::Unary(UnaryOp::Neg, _) => 2,
            Expr::Const(c) if *c < 0.0 => 2,
            _ => 3,
        }
    }

    fn fmt_prec(&self, f: &mut fmt::Formatter<'_>, min: u8) -> fmt::Result {
        let me = self.prec();
        if me < min {
            write!(f, "(")?;
        }
        match self {
            Expr::Const(c) => {
                if *c < 0.0 || c.is_sign_negative() {
                    write!(f, "-{}", fmt_f64(-c))?;
                } else {
                    write!(f, "{}", fmt_f64(*c))?;
                }
            }
            Expr::Var(v) => write!(f, "{v}")?,
            Expr::Unary(UnaryOp::Neg, e) => {
                write!(f, "-")?;
                e.fmt_prec(f, 3)?;
            }
            Expr::Unary(op, e) => {
                let name = match op {
                    UnaryOp::Sin => "sin",
                    UnaryOp::Cos => "cos",
                    UnaryOp::Exp => "exp",
                    UnaryOp::Log => "log",
                    UnaryOp::Sqrt => "sqrt",
                    UnaryOp::Neg => unreachable!(),
                };
                write!(f, "{name}(")?;
                e.fmt_prec(f, 0)?;
                write!(f, ")")?;
            }
            Expr::Binary(op, a, b) => {
                let (sym, lvl) = match op {
                    BinOp::Add => ("+", 0),
                    BinOp::Sub => ("-", 0),
                    BinOp::Mul => ("*", 1),
                    BinOp::Div => ("/", 1),
                };
                a.fmt_prec(f, lvl)?;
                write!(f, "{sym}")?;
                // Left-associative: the right child needs one level more.
                b.fmt_prec(f, lvl + 1)?;
            }
            Expr::Pow(e, n) => {
                e.fmt_prec(f, 4)?; // atoms only on the left of ^
                write!(f, "^{n}")?;
            }
        }
        if me < min {
            write!(f, ")")?;
        }
        Ok(())
    }
}

fn fmt_f64(v: f64) -> String {
    if v == v.trunc() && v.abs() < 1e15 {
        format!("{}", v)
    } else {
        format!("{v}")
    }
}

// ---------------------------------------------------------------------------
// Parser
// ---------------------------------------------------------------------------

/// Parses `source` against `schema`. Returns the unique AST under standard
/// precedence; no simplification is applied.
pub fn parse(source: &str, schema: &Schema) -> ExprResult<Expr> {
    let mut p = Parser {
        src: source.as_bytes(),
        pos: 0,
        schema,
    };
    p.skip_ws();
    let e = p.expr()?;
    p.skip_ws();
    if p.pos != p.src.len() {
        return Err(ExprError::Syntax {
            pos: p.pos,
            expected: "end of input".into(),
        });
    }
    Ok(e)
}

struct Parser<'a> {
    src: &'a [u8],
    pos: usize,
    schema: &'a Schema,
}

impl<'a> Parser<'a> {
    fn skip_ws(&mut self) {
        while self.pos < self.src.len() && self.src[self.pos].is_ascii_whitespace() {
            self.pos += 1;
        }
    }

    fn peek(&self) -> Option<u8> {
        self.src.get(self.pos).copied()
    }

    fn eat(&mut self, c: u8) -> bool {
        if self.peek() == Some(c) {
            self.pos += 1;
            self.skip_ws();
            true
        } else {
            false
        }
    }

    fn expr(&mut self) -> ExprResult<Expr> {
        let mut acc = self.term()?;
        loop {
            if self.eat(b'+') {
                let rhs = self.term()?;
                acc = Expr::Binary(BinOp::Add, Box::new(acc), Box::new(rhs));
            } else if self.eat(b'-') {
                let rhs = self.term()?;
                acc = Expr::Binary(BinOp::Sub, Box::new(acc), Box::new(rhs));
            } else {
                return Ok(acc);
            }
        }
    }

    fn term(&mut self) -> ExprResult<Expr> {
        let mut acc = self.factor()?;
        loop {
            if self.eat(b'*') {
                let rhs = self.factor()?;
                acc = Expr::Binary(BinOp::Mul, Box::new(acc), Box::new(rhs));
            } else if self.eat(b'/') {
                let rhs = self.factor()?;
                acc = Expr::Binary(BinOp::Div, Box::new(acc), Box::new(rhs));
            } else {
                return Ok(acc);
            }
        }
    }

    // factor := ['-'] atom ['^' integer]; pow binds tighter than the
    // sign, and a sign on a bare literal folds into it.
    fn factor(&mut self) -> ExprResult<Expr> {
        let negated = self.eat(b'-');
        let mut e = self.atom()?;
        if self.eat(b'^') {
            let n = self.integer()?;
            e = Expr::Pow(Box::new(e), n);
        }
        Ok(match (negated, e) {
            (true, Expr::Const(c)) => Expr::Const(-c),
            (true, e) => Expr::Unary(UnaryOp::Neg, Box::new(e)),
            (false, e) => e,
        })
    }

    fn atom(&mut self) -> ExprResult<Expr> {
        self.skip_ws();
        match self.peek() {
            Some(b'(') => {
                self.pos += 1;
                self.skip_ws();
                let e = self.expr()?;
                if !self.eat(b')') {
                    return Err(ExprError::Syntax {
                        pos: self.pos,
                        expected: "`)`".into(),
                    });
                }
                Ok(e)
            }
            Some(c) if c.is_ascii_digit() || c == b'.' => self.number(),
            Some(c) if c.is_ascii_alphabetic() => self.ident_or_func(),
            _ => Err(ExprError::Syntax {
                pos: self.pos,
                expected: "number, identifier, function or `(`".into(),
            }),
        }
    }

    fn number(&mut self) -> ExprResult<Expr> {
        let start = self.pos;
        while self
            .peek()
            .is_some_and(|c| c.is_ascii_digit() || c == b'.')
        {
            self.pos += 1;
        }
        // Optional exponent part, e.g. 1e-3.
        if self.peek() == Some(b'e') || self.peek() == Some(b'E') {
            let save = self.pos;
            self.pos += 1;
            if self.peek() == Some(b'+') || self.peek() == Some(b'-') {
                self.pos += 1;
            }
            if self.peek().is_some_and(|c| c.is_ascii_digit()) {
                while self.peek().is_some_and(|c| c.is_ascii_digit()) {
                    self.pos += 1;
                }
            } else {
                self.pos = save;
            }
        }
        let text = std::str::from_utf8(&self.src[start..self.pos]).unwrap();
        let value: f64 = text.parse().map_err(|_| ExprError::Syntax {
            pos: start,
            expected: "number".into(),
        })?;
        self.skip_ws();
        Ok(Expr::Const(value))
    }

    fn integer(&mut self) -> ExprResult<i32> {
        self.skip_ws();
        let start = self.pos;
        if self.peek() == Some(b'-') {
            self.pos += 1;
        }
        if !self.peek().is_some_and(|c| c.is_ascii_digit()) {
            return Err(ExprError::Syntax {
                pos: self.pos,
                expected: "integer exponent".into(),
            });
        }
        while self.peek().is_some_and(|c| c.is_ascii_digit()) {
            self.pos += 1;
        }
        let text = std::str::from_utf8(&self.src[start..self.pos]).unwrap();
        let n = text.parse().map_err(|_| ExprError::Syntax {
            pos: start,
            expected: "integer exponent".into(),
        })?;
        self.skip_ws();
        Ok(n)
    }

    fn ident_or_func(&mut self) -> ExprResult<Expr> {
        let start = self.pos;
        while self
            .peek()
            .is_some_and(|c| c.is_ascii_alphanumeric() || c == b'_')
        {
            self.pos += 1;
        }
        let name = std::str::from_utf8(&self.src[start..self.pos]).unwrap().to_owned();
        self.skip_ws();
        let func = match name.as_str() {
            "sin" => Some(UnaryOp::Sin),
            "cos" => Some(UnaryOp::Cos),
            "exp" => Some(UnaryOp::Exp),
            "log" => Some(UnaryOp::Log),
            "sqrt" => Some(UnaryOp::Sqrt),
            _ => None,
        };
        if let Some(op) = func {
            if !self.eat(b'(') {
                return Err(ExprError::Syntax {
                    pos: self.pos,
                    expected: "`(` after function name".into(),
                });
            }
            let arg = self.expr()?;
            if !self.eat(b')') {
                return Err(ExprError::Syntax {
                    pos: self.pos,
                    expected: "`)`".into(),
                });
            }
            return Ok(Expr::Unary(op, Box::new(arg)));
        }
        let v = parse_var(&name).ok_or_else(|| ExprError::UnknownSymbol(name.clone()))?;
        if self.schema.allows(v) {
            Ok(Expr::Var(v))
        } else if self.schema.within_dims(v) {
            Err(ExprError::DerivativeOrderTooHigh(name))
        } else {
            Err(ExprError::UnknownSymbol(name))
        }
    }
}

fn parse_var(name: &str) -> Option<Var> {
    if name == "t" {
        return Some(Var::Time);
    }
    let (family, rest) = name.split_at(1);
    match family {
        "x" | "p" => {
            let (idx, order) = rest.split_once('_')?;
            let idx: usize = idx.parse().ok()?;
            let order: usize = order.parse().ok()?;
            if idx == 0 {
                return None;
            }
            Some(if family == "x" {
                Var::State { idx: idx - 1, order }
            } else {
                Var::Costate { idx: idx - 1, order }
            })
        }
        "u" => {
            let (idx, order) = match rest.split_once('_') {
                Some((i, o)) => (i.parse().ok()?, o.parse().ok()?),
                None => (rest.parse().ok()?, 0usize),
            };
            let idx: usize = idx;
            if idx == 0 {
                return None;
            }
            Some(Var::Control { idx: idx - 1, order })
        }
        _ => None,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn schema_k2() -> Schema {
        Schema::dynamics(2, 1, 1)
    }

    fn env1(pairs: &[(Var, f64)]) -> Env {
        let mut env = Env::for_problem(2, 2, 2);
        for &(v, x) in pairs {
            env.set(v, x);
        }
        env
    }

    const T: Var = Var::Time;
    const X0: Var = Var::State { idx: 0, order: 0 };
    const U0: Var = Var::Control { idx: 0, order: 0 };

    #[test]
    fn parse_single_token() {
        let e = parse("u1", &Schema::dynamics(1, 1, 1)).unwrap();
        assert_eq!(e, Expr::Var(U0));
    }

    #[test]
    fn parse_grammar_case() {
        let e = parse("x1_0*sin(t) + u1^2", &schema_k2()).unwrap();
        let expected = Expr::Binary(
            BinOp::Add,
            Box::new(Expr::Binary(
                BinOp::Mul,
                Box::new(Expr::Var(X0)),
                Box::new(Expr::Unary(UnaryOp::Sin, Box::new(Expr::Var(T)))),
            )),
            Box::new(Expr::Pow(Box::new(Expr::Var(U0)), 2)),
        );
        assert_eq!(e, expected);
    }

    #[test]
    fn parse_rejects_high_jet_order_in_dynamics() {
        let err = parse("x1_2", &schema_k2()).unwrap_err();
        assert!(matches!(err, ExprError::DerivativeOrderTooHigh(_)));
    }

    #[test]
    fn parse_rejects_unknown_symbol() {
        let err = parse("y1", &schema_k2()).unwrap_err();
        assert!(matches!(err, ExprError::UnknownSymbol(_)));
        let err = parse("p1_0", &schema_k2()).unwrap_err();
        assert!(matches!(err, ExprError::UnknownSymbol(_)));
    }

    #[test]
    fn parse_reports_position() {
        let err = parse("1 + * 2", &schema_k2()).unwrap_err();
        match err {
            ExprError::Syntax { pos, .. } => assert_eq!(pos, 4),
            other => panic!("expected syntax error, got {other:?}"),
        }
    }

    #[test]
    fn eval_basics() {
        let s = schema_k2();
        let e = parse("2+3*t", &s).unwrap();
        assert_eq!(e.eval(env1(&[(T, 1.0)]).clone().set_time(1.0)).unwrap(), 5.0);
        let e = parse("sin(t)", &s).unwrap();
        assert_eq!(e.eval(&env1(&[(T, 0.0)])).unwrap(), 0.0);
    }

    #[test]
    fn eval_division_by_zero_is_reported() {
        let e = parse("x1_0/u1", &schema_k2()).unwrap();
        let err = e.eval(&env1(&[(X0, 1.0), (U0, 0.0)])).unwrap_err();
        assert!(matches!(err, ExprError::NonFiniteResult(_)));
    }

    #[test]
    fn eval_missing_binding() {
        let e = parse("x1_0 + u1", &schema_k2()).unwrap();
        let err = e.eval(&env1(&[(X0, 1.0)])).unwrap_err();
        assert_eq!(err, ExprError::MissingBinding(U0));
    }

    #[test]
    fn diff_product_rule() {
        let s = schema_k2();
        let e = parse("sin(x1_0)*u1", &s).unwrap();
        let d = e.diff(X0);
        assert_eq!(d, parse("cos(x1_0)*u1", &s).unwrap().simplify());
    }

    #[test]
    fn diff_power() {
        let e = parse("t^2", &schema_k2()).unwrap();
        assert_eq!(e.diff(T).to_string(), "2*t");
    }

    #[test]
    fn diff_wrt_absent_variable_is_zero() {
        let e = parse("x1_0", &schema_k2()).unwrap();
        assert_eq!(e.diff(U0), Expr::Const(0.0));
    }

    #[test]
    fn diff_is_linear_in_structure() {
        let s = schema_k2();
        let e1 = parse("sin(x1_0)", &s).unwrap();
        let e2 = parse("t*u1", &s).unwrap();
        let combined = add(mul(konst(3.0), e1.clone()), e2.clone());
        let lhs = combined.diff(X0).simplify();
        let rhs = add(mul(konst(3.0), e1.diff(X0)), e2.diff(X0)).simplify();
        assert_eq!(lhs, rhs);
    }

    #[test]
    fn print_parse_round_trip() {
        let s = schema_k2();
        for src in [
            "x1_0*sin(t)+u1^2",
            "-(t+1)*x1_1",
            "1/(1+t^2)",
            "sqrt(x1_0^2+1)-exp(-t)",
            "t-x1_0-x1_1",
            "t-(x1_0-x1_1)",
            "2*t^-1",
        ] {
            let e = parse(src, &s).unwrap();
            let printed = e.to_string();
            let reparsed = parse(&printed, &s)
                .unwrap_or_else(|err| panic!("re-parse of `{printed}`: {err}"));
            assert_eq!(e, reparsed, "round trip failed for `{src}` -> `{printed}`");
        }
    }

    #[test]
    fn negative_exponent() {
        let s = schema_k2();
        let e = parse("t^-2", &s).unwrap();
        let mut env = Env::for_problem(2, 1, 1);
        env.set_time(2.0);
        assert_eq!(e.eval(&env).unwrap(), 0.25);
    }
}
