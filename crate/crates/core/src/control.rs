//! Admissible control curves, the measure distance between controls, and
//! needle / smoothed needle modifications.
//!
//! A curve is a strictly increasing breakpoint grid `0 = t_0 < ... < t_P = T`
//! with one descriptor per interval. Every descriptor is smooth inside its
//! piece, so admissibility reduces to value/derivative range checks. The
//! needle window is half-open, `[tau - eps, tau)`.

use std::fmt::Write as _;

use thiserror::Error;

use crate::expr::{self, add, konst, mul, pow, sub, Expr, Schema, Var};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ControlError {
    #[error("time {t} outside the horizon [0, {horizon}]")]
    OutOfDomain { t: f64, horizon: f64 },
    #[error("invalid needle width {eps}: must satisfy 0 < eps < min(1, tau/2, T - tau) = {bound}")]
    InvalidWidth { eps: f64, bound: f64 },
    #[error("invalid smoothing fraction {0}: must lie in (0, 1/2)")]
    InvalidSmoothing(f64),
    #[error("control serialization: {0}")]
    BadFormat(String),
    #[error("breakpoints must be strictly increasing and span [0, T]")]
    BadBreakpoints,
}

pub type ControlResult<T> = Result<T, ControlError>;

/// One per-interval descriptor. `Poly` coefficients are in powers of
/// `(t - t_start)`; `Fn` expressions are over absolute `t` only.
#[derive(Debug, Clone, PartialEq)]
pub enum Piece {
    /// Constant vector value.
    Const(Vec<f64>),
    /// Per-component polynomial coefficients, lowest power first.
    Poly(Vec<Vec<f64>>),
    /// Per-component expression over `t`.
    Fn(Vec<Expr>),
}

impl Piece {
    fn dim(&self) -> usize {
        match self {
            Piece::Const(v) => v.len(),
            Piece::Poly(c) => c.len(),
            Piece::Fn(e) => e.len(),
        }
    }

    /// Value and derivatives up to `max_order` at absolute time `t`,
    /// given the piece's start time.
    fn eval_jet(&self, t: f64, t_start: f64, max_order: usize) -> Vec<Vec<f64>> {
        match self {
            Piece::Const(v) => {
                let mut out = vec![v.clone()];
                out.resize(max_order + 1, vec![0.0; v.len()]);
                out
            }
            Piece::Poly(coeffs) => {
                let s = t - t_start;
                (0..=max_order)
                    .map(|ord| {
                        coeffs
                            .iter()
                            .map(|c| poly_derivative_at(c, s, ord))
                            .collect()
                    })
                    .collect()
            }
            Piece::Fn(exprs) => {
                let schema = Schema::time_only();
                let mut env = expr::Env::new(&schema);
                env.set_time(t);
                (0..=max_order)
                    .map(|ord| {
                        exprs
                            .iter()
                            .map(|e| {
                                let mut d = e.clone();
                                for _ in 0..ord {
                                    d = d.diff(Var::Time);
                                }
                                d.eval(&env).unwrap_or(f64::NAN)
                            })
                            .collect()
                    })
                    .collect()
            }
        }
    }
}

impl Piece {
    /// The same function of absolute time, re-expressed with a new start.
    /// Only `Poly` payloads are start-relative and need the shift.
    fn rebased(&self, old_start: f64, new_start: f64) -> Piece {
        match self {
            Piece::Poly(comps) if old_start != new_start => {
                let delta = new_start - old_start;
                let shifted = comps
                    .iter()
                    .map(|c| shift_poly_basis(c, delta))
                    .collect();
                Piece::Poly(shifted)
            }
            _ => self.clone(),
        }
    }
}

/// Coefficients of `p(s + delta)` in powers of `s`, given those of `p`.
fn shift_poly_basis(coeffs: &[f64], delta: f64) -> Vec<f64> {
    let mut out = vec![0.0; coeffs.len()];
    for (j, &c) in coeffs.iter().enumerate() {
        let mut binom = 1.0;
        let mut delta_pow = 1.0;
        for i in (0..=j).rev() {
            out[i] += c * binom * delta_pow;
            if i > 0 {
                binom = binom * i as f64 / (j - i + 1) as f64;
                delta_pow *= delta;
            }
        }
    }
    out
}

fn poly_derivative_at(coeffs: &[f64], s: f64, order: usize) -> f64 {
    // Horner on the order-th derivative's coefficients.
    let mut acc = 0.0;
    for (j, &c) in coeffs.iter().enumerate().rev() {
        if j < order {
            break;
        }
        let mut factor = 1.0;
        for q in 0..order {
            factor *= (j - q) as f64;
        }
        acc = acc * s + c * factor;
    }
    acc
}

/// Piecewise control curve on `[0, T]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ControlCurve {
    breakpoints: Vec<f64>,
    pieces: Vec<Piece>,
    dim: usize,
}

impl ControlCurve {
    /// Constant control over the whole horizon.
    pub fn constant(values: Vec<f64>, horizon: f64) -> Self {
        let dim = values.len();
        ControlCurve {
            breakpoints: vec![0.0, horizon],
            pieces: vec![Piece::Const(values)],
            dim,
        }
    }

    pub fn from_pieces(breakpoints: Vec<f64>, pieces: Vec<Piece>) -> ControlResult<Self> {
        if breakpoints.len() != pieces.len() + 1
            || breakpoints.windows(2).any(|w| w[0] >= w[1])
            || breakpoints.first() != Some(&0.0)
        {
            return Err(ControlError::BadBreakpoints);
        }
        let dim = pieces[0].dim();
        if pieces.iter().any(|p| p.dim() != dim) {
            return Err(ControlError::BadBreakpoints);
        }
        Ok(ControlCurve {
            breakpoints,
            pieces,
            dim,
        })
    }

    pub fn horizon(&self) -> f64 {
        *self.breakpoints.last().unwrap()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn breakpoints(&self) -> &[f64] {
        &self.breakpoints
    }

    pub fn pieces(&self) -> &[Piece] {
        &self.pieces
    }

    /// Index of the piece owning `t`; intervals are right-open except the
    /// last, which includes `T`.
    fn piece_index(&self, t: f64) -> usize {
        match self
            .breakpoints
            .partition_point(|&b| b <= t)
        {
            0 => 0,
            i if i >= self.breakpoints.len() => self.pieces.len() - 1,
            i => (i - 1).min(self.pieces.len() - 1),
        }
    }

    /// Control jet `(u, u_(1), ..., u_(max_order))` at `t`. At an interior
    /// breakpoint the one-sided value from the right is taken.
    pub fn eval_jet(&self, t: f64, max_order: usize) -> ControlResult<Vec<Vec<f64>>> {
        if t < 0.0 || t > self.horizon() {
            return Err(ControlError::OutOfDomain {
                t,
                horizon: self.horizon(),
            });
        }
        let i = self.piece_index(t);
        Ok(self.pieces[i].eval_jet(t, self.breakpoints[i], max_order))
    }

    /// Value only.
    pub fn eval(&self, t: f64) -> ControlResult<Vec<f64>> {
        Ok(self.eval_jet(t, 0)?.remove(0))
    }

    /// Value at `t` taken from the piece owning `anchor`. Integrator
    /// steps never cross a breakpoint, so evaluating all RK stages in the
    /// piece owning the step midpoint keeps each step inside one smooth
    /// piece even when a stage lands exactly on a boundary.
    pub fn eval_in_piece(&self, anchor: f64, t: f64) -> ControlResult<Vec<f64>> {
        if anchor < 0.0 || anchor > self.horizon() {
            return Err(ControlError::OutOfDomain {
                t: anchor,
                horizon: self.horizon(),
            });
        }
        let i = self.piece_index(anchor);
        Ok(self.pieces[i].eval_jet(t, self.breakpoints[i], 0).remove(0))
    }

    /// The curve restricted/overwritten so that `piece` holds on
    /// `[from, to)`; used by the needle constructions. Truncated pieces
    /// keep their value as a function of absolute time.
    fn splice(&self, from: f64, to: f64, piece: Piece) -> ControlCurve {
        let mut bps = Vec::new();
        let mut pieces = Vec::new();
        // Pieces (possibly truncated at `from`) strictly before the window.
        for (i, p) in self.pieces.iter().enumerate() {
            if self.breakpoints[i] >= from {
                break;
            }
            bps.push(self.breakpoints[i]);
            pieces.push(p.clone());
        }
        bps.push(from);
        pieces.push(piece);
        // The piece owning `to`, cut to start there, then everything later.
        if to < self.horizon() {
            let idx = self.piece_index(to);
            bps.push(to);
            pieces.push(self.pieces[idx].rebased(self.breakpoints[idx], to));
            for j in (idx + 1)..self.pieces.len() {
                bps.push(self.breakpoints[j]);
                pieces.push(self.pieces[j].clone());
            }
        }
        bps.push(self.horizon());
        let mut out = ControlCurve {
            breakpoints: bps,
            pieces,
            dim: self.dim,
        };
        out.merge_equal_const_neighbors();
        out
    }

    fn merge_equal_const_neighbors(&mut self) {
        let mut i = 0;
        while i + 1 < self.pieces.len() {
            let equal = matches!(
                (&self.pieces[i], &self.pieces[i + 1]),
                (Piece::Const(a), Piece::Const(b)) if a == b
            );
            if equal {
                self.pieces.remove(i + 1);
                self.breakpoints.remove(i + 1);
            } else {
                i += 1;
            }
        }
    }

    /// Serializes to the documented text form, one record per piece:
    /// `t_start kind payload`. Round-trip stable.
    pub fn serialize(&self) -> String {
        let mut out = String::new();
        for (i, p) in self.pieces.iter().enumerate() {
            let _ = write!(out, "{:?} ", self.breakpoints[i]);
            match p {
                Piece::Const(v) => {
                    let _ = write!(out, "const");
                    for x in v {
                        let _ = write!(out, " {x:?}");
                    }
                }
                Piece::Poly(comps) => {
                    let _ = write!(out, "poly ");
                    let parts: Vec<String> = comps
                        .iter()
                        .map(|c| {
                            c.iter()
                                .map(|x| format!("{x:?}"))
                                .collect::<Vec<_>>()
                                .join(",")
                        })
                        .collect();
                    let _ = write!(out, "{}", parts.join(" ; "));
                }
                Piece::Fn(exprs) => {
                    let parts: Vec<String> = exprs.iter().map(|e| e.to_string()).collect();
                    let _ = write!(out, "expr {}", parts.join(" ; "));
                }
            }
            out.push('\n');
        }
        let _ = writeln!(out, "{:?} end", self.horizon());
        out
    }

    pub fn deserialize(text: &str) -> ControlResult<ControlCurve> {
        let schema = Schema::time_only();
        let mut bps = Vec::new();
        let mut pieces = Vec::new();
        let mut horizon = None;
        for (lineno, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let bad = |msg: String| ControlError::BadFormat(format!("line {}: {msg}", lineno + 1));
            let (t_str, rest) = line
                .split_once(char::is_whitespace)
                .ok_or_else(|| bad("expected `t kind payload`".into()))?;
            let t: f64 = t_str
                .parse()
                .map_err(|_| bad(format!("bad start time `{t_str}`")))?;
            let rest = rest.trim();
            if rest == "end" {
                horizon = Some(t);
                break;
            }
            let (kind, payload) = match rest.split_once(char::is_whitespace) {
                Some((k, p)) => (k, p.trim()),
                None => (rest, ""),
            };
            let piece = match kind {
                "const" => {
                    let values: Result<Vec<f64>, _> =
                        payload.split_whitespace().map(str::parse).collect();
                    Piece::Const(values.map_err(|_| bad("bad const payload".into()))?)
                }
                "poly" => {
                    let comps: Result<Vec<Vec<f64>>, ControlError> = payload
                        .split(';')
                        .map(|c| {
                            c.trim()
                                .split(',')
                                .map(|x| {
                                    x.trim()
                                        .parse::<f64>()
                                        .map_err(|_| bad("bad poly coefficient".into()))
                                })
                                .collect()
                        })
                        .collect();
                    Piece::Poly(comps?)
                }
                "expr" => {
                    let comps: Result<Vec<Expr>, ControlError> = payload
                        .split(';')
                        .map(|c| {
                            expr::parse(c.trim(), &schema)
                                .map_err(|e| bad(format!("bad expression: {e}")))
                        })
                        .collect();
                    Piece::Fn(comps?)
                }
                other => return Err(bad(format!("unknown piece kind `{other}`"))),
            };
            bps.push(t);
            pieces.push(piece);
        }
        let horizon = horizon.ok_or_else(|| ControlError::BadFormat("missing `end` record".into()))?;
        bps.push(horizon);
        ControlCurve::from_pieces(bps, pieces)
    }
}

/// Parameters of a needle modification: peak time, ceiling value, width and
/// smoothing fraction.
#[derive(Debug, Clone, PartialEq)]
pub struct NeedleParams {
    pub tau: f64,
    pub ceiling: Vec<f64>,
    pub eps: f64,
    pub smoothing: f64,
}

impl NeedleParams {
    pub fn new(tau: f64, ceiling: Vec<f64>, eps: f64, horizon: f64) -> ControlResult<Self> {
        Self::with_smoothing(tau, ceiling, eps, 0.25, horizon)
    }

    pub fn with_smoothing(
        tau: f64,
        ceiling: Vec<f64>,
        eps: f64,
        smoothing: f64,
        horizon: f64,
    ) -> ControlResult<Self> {
        let bound = 1.0_f64.min(tau / 2.0).min(horizon - tau);
        if !(eps > 0.0 && eps < bound) {
            return Err(ControlError::InvalidWidth { eps, bound });
        }
        if !(smoothing > 0.0 && smoothing < 0.5) {
            return Err(ControlError::InvalidSmoothing(smoothing));
        }
        Ok(NeedleParams {
            tau,
            ceiling,
            eps,
            smoothing,
        })
    }

    /// Largest admissible width at a given peak time.
    pub fn max_width(tau: f64, horizon: f64) -> f64 {
        1.0_f64.min(tau / 2.0).min(horizon - tau)
    }
}

/// The needle modification: `ceiling` on `[tau - eps, tau)`, the base curve
/// elsewhere.
pub fn needle(u: &ControlCurve, p: &NeedleParams) -> ControlCurve {
    u.splice(p.tau - p.eps, p.tau, Piece::Const(p.ceiling.clone()))
}

/// The smoothed needle: agrees with the raw needle outside two ramps of
/// length `h*eps^2` placed just left of the window and just right of the
/// peak; on each ramp the base value and the ceiling are blended with a
/// polynomial smoothstep of degree `2k+1`, so the result joins the
/// neighbouring pieces with `k` matching derivatives and stays inside the
/// convex hull of the two sides.
pub fn smooth_needle(u: &ControlCurve, p: &NeedleParams, k: usize) -> ControlCurve {
    let h2 = p.smoothing * p.eps * p.eps;
    let (a1, b1) = (p.tau - p.eps - h2, p.tau - p.eps);
    let (a2, b2) = (p.tau, p.tau + h2);
    let stepped = needle(u, p);

    let ramp_up = ramp_piece(u, a1, b1, &p.ceiling, k, false);
    let ramp_down = ramp_piece(u, a2, b2, &p.ceiling, k, true);
    stepped
        .splice(a1, b1, ramp_up)
        .splice(a2, b2, ramp_down)
}

/// Blend between the base curve's piece and the constant ceiling over
/// `[a, b]`. `descending` ramps from the ceiling back to the base.
fn ramp_piece(
    u: &ControlCurve,
    a: f64,
    b: f64,
    ceiling: &[f64],
    k: usize,
    descending: bool,
) -> Piece {
    let idx = u.piece_index(a);
    let base = base_piece_expr(&u.pieces[idx], u.breakpoints[idx]);
    // theta in [0,1] across the ramp; s(theta) the C^k smoothstep.
    let theta = div_affine(a, b);
    let s = smoothstep_expr(&theta, k);
    let blend = if descending {
        sub(konst(1.0), s)
    } else {
        s
    };
    let comps = base
        .into_iter()
        .zip(ceiling.iter())
        .map(|(bi, &ci)| add(bi.clone(), mul(blend.clone(), sub(konst(ci), bi))))
        .collect();
    Piece::Fn(comps)
}

fn base_piece_expr(p: &Piece, t_start: f64) -> Vec<Expr> {
    match p {
        Piece::Const(v) => v.iter().map(|&c| konst(c)).collect(),
        Piece::Poly(comps) => comps
            .iter()
            .map(|coeffs| {
                // Horner in (t - t_start).
                let s = sub(Expr::Var(Var::Time), konst(t_start));
                let mut acc = konst(0.0);
                for &c in coeffs.iter().rev() {
                    acc = add(mul(acc, s.clone()), konst(c));
                }
                acc
            })
            .collect(),
        Piece::Fn(exprs) => exprs.clone(),
    }
}

fn div_affine(a: f64, b: f64) -> Expr {
    expr::div(sub(Expr::Var(Var::Time), konst(a)), konst(b - a))
}

/// `S_k(theta) = sum_{j=0}^{k} (-1)^j C(k+j, j) C(2k+1, k-j) theta^{k+j+1}`:
/// the degree-(2k+1) smoothstep whose derivatives of orders 1..k vanish at
/// both endpoints.
fn smoothstep_expr(theta: &Expr, k: usize) -> Expr {
    let mut acc = konst(0.0);
    for j in 0..=k {
        let sign = if j % 2 == 0 { 1.0 } else { -1.0 };
        let coeff = sign * binomial(k + j, j) * binomial(2 * k + 1, k - j);
        acc = add(
            acc,
            mul(konst(coeff), pow(theta.clone(), (k + j + 1) as i32)),
        );
    }
    acc
}

fn binomial(n: usize, r: usize) -> f64 {
    let mut acc = 1.0;
    for i in 0..r {
        acc = acc * (n - i) as f64 / (i + 1) as f64;
    }
    acc
}

/// Lower/upper bounds on the Lebesgue measure of `{t : u(t) != v(t)}`.
/// Exact on merged intervals where both descriptors are structurally equal
/// or both constant; sampled elsewhere.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DistBounds {
    pub lower: f64,
    pub upper: f64,
}

impl DistBounds {
    pub fn midpoint(&self) -> f64 {
        0.5 * (self.lower + self.upper)
    }
}

/// Measure distance between two controls over a shared horizon: the
/// midpoint of [`dist_bounds`].
pub fn dist(u: &ControlCurve, v: &ControlCurve) -> f64 {
    dist_bounds(u, v, 10_000).midpoint()
}

pub fn dist_bounds(u: &ControlCurve, v: &ControlCurve, samples: usize) -> DistBounds {
    let horizon = u.horizon();
    let mut cuts: Vec<f64> = u
        .breakpoints
        .iter()
        .chain(v.breakpoints.iter())
        .copied()
        .collect();
    cuts.sort_by(|a, b| a.partial_cmp(b).unwrap());
    cuts.dedup();
    let mut lower = 0.0;
    let mut upper = 0.0;
    for w in cuts.windows(2) {
        let (a, b) = (w[0], w[1]);
        if b <= a {
            continue;
        }
        let len = b - a;
        let pu = &u.pieces[u.piece_index(a)];
        let pv = &v.pieces[v.piece_index(a)];
        let (pu_start, pv_start) = (
            u.breakpoints[u.piece_index(a)],
            v.breakpoints[v.piece_index(a)],
        );
        match (pu, pv) {
            (Piece::Const(x), Piece::Const(y)) => {
                if x != y {
                    lower += len;
                    upper += len;
                }
            }
            _ if pu == pv && pu_start == pv_start => {}
            _ => {
                // Sampled interval: resolution proportional to its share of
                // the horizon, at least 16 points.
                let n = ((samples as f64 * len / horizon).ceil() as usize).max(16);
                let mut differ = 0usize;
                for j in 0..n {
                    let t = a + len * (j as f64 + 0.5) / n as f64;
                    let xu = pu.eval_jet(t, pu_start, 0).remove(0);
                    let xv = pv.eval_jet(t, pv_start, 0).remove(0);
                    if xu != xv {
                        differ += 1;
                    }
                }
                let frac = differ as f64 / n as f64;
                lower += (frac - 1.0 / n as f64).max(0.0) * len;
                upper += ((frac + 1.0 / n as f64) * len).min(len);
            }
        }
    }
    DistBounds { lower, upper }
}

/// Condition-gamma check: values inside `value_box` (inflated superset) at
/// a documented sampling resolution, derivative levels inside the declared
/// boxes when given. Returns human-readable violations.
pub fn validate_gamma(
    u: &ControlCurve,
    value_box: &[(f64, f64)],
    derivative_boxes: &[Vec<(f64, f64)>],
) -> Vec<String> {
    const SAMPLES_PER_PIECE: usize = 64;
    let mut violations = Vec::new();
    let max_order = derivative_boxes.len();
    for (i, piece) in u.pieces.iter().enumerate() {
        let (a, b) = (u.breakpoints[i], u.breakpoints[i + 1]);
        for j in 0..=SAMPLES_PER_PIECE {
            let t = a + (b - a) * j as f64 / SAMPLES_PER_PIECE as f64;
            let t = if j == SAMPLES_PER_PIECE {
                // stay inside the right-open piece
                b - (b - a) * 1e-9
            } else {
                t
            };
            let jet = piece.eval_jet(t, a, max_order);
            for (axis, &(lo, hi)) in value_box.iter().enumerate() {
                let x = jet[0][axis];
                if !x.is_finite() || x < lo - 1e-12 || x > hi + 1e-12 {
                    violations.push(format!(
                        "piece {i}: value u{}={x} at t={t} outside [{lo}, {hi}]",
                        axis + 1
                    ));
                    break;
                }
            }
            for (ord, bx) in derivative_boxes.iter().enumerate() {
                for (axis, &(lo, hi)) in bx.iter().enumerate() {
                    let x = jet[ord + 1][axis];
                    if !x.is_finite() || x < lo - 1e-9 || x > hi + 1e-9 {
                        violations.push(format!(
                            "piece {i}: derivative order {} of u{} = {x} at t={t} outside [{lo}, {hi}]",
                            ord + 1,
                            axis + 1
                        ));
                        break;
                    }
                }
            }
            if violations.len() > 32 {
                return violations;
            }
        }
    }
    violations
}

#[cfg(test)]
mod tests {
    use super::*;

    fn needle_params(tau: f64, omega: f64, eps: f64) -> NeedleParams {
        NeedleParams::new(tau, vec![omega], eps, 1.0).unwrap()
    }

    #[test]
    fn constant_jet() {
        let u = ControlCurve::constant(vec![0.3], 1.0);
        let jet = u.eval_jet(0.5, 1).unwrap();
        assert_eq!(jet, vec![vec![0.3], vec![0.0]]);
    }

    #[test]
    fn poly_piece_jet() {
        let u = ControlCurve::from_pieces(
            vec![0.0, 1.0],
            vec![Piece::Poly(vec![vec![0.0, 0.0, 1.0]])], // t^2
        )
        .unwrap();
        let jet = u.eval_jet(0.5, 1).unwrap();
        assert_eq!(jet[0][0], 0.25);
        assert_eq!(jet[1][0], 1.0);
    }

    #[test]
    fn out_of_domain() {
        let u = ControlCurve::constant(vec![0.0], 1.0);
        assert!(matches!(
            u.eval(1.5),
            Err(ControlError::OutOfDomain { .. })
        ));
    }

    #[test]
    fn needle_shape() {
        let u = ControlCurve::constant(vec![0.0], 1.0);
        let v = needle(&u, &needle_params(0.5, 1.0, 0.1));
        assert_eq!(v.eval(0.39).unwrap(), vec![0.0]);
        assert_eq!(v.eval(0.4).unwrap(), vec![1.0]);
        assert_eq!(v.eval(0.45).unwrap(), vec![1.0]);
        // window is right-open
        assert_eq!(v.eval(0.5).unwrap(), vec![0.0]);
        assert!(v.breakpoints().contains(&0.4));
        assert!(v.breakpoints().contains(&0.5));
    }

    #[test]
    fn needle_rejects_bad_width() {
        assert!(matches!(
            NeedleParams::new(0.5, vec![1.0], 0.0, 1.0),
            Err(ControlError::InvalidWidth { .. })
        ));
        // eps >= tau/2
        assert!(matches!(
            NeedleParams::new(0.1, vec![1.0], 0.06, 1.0),
            Err(ControlError::InvalidWidth { .. })
        ));
        // eps >= T - tau
        assert!(matches!(
            NeedleParams::new(0.95, vec![1.0], 0.1, 1.0),
            Err(ControlError::InvalidWidth { .. })
        ));
    }

    #[test]
    fn needle_is_idempotent() {
        let u = ControlCurve::constant(vec![0.0], 1.0);
        let p = needle_params(0.5, 1.0, 0.1);
        let once = needle(&u, &p);
        let twice = needle(&once, &p);
        assert_eq!(once, twice);
        assert_eq!(dist(&once, &twice), 0.0);
    }

    #[test]
    fn dist_of_identical_curves_is_zero() {
        let u = ControlCurve::constant(vec![0.7], 2.0);
        assert_eq!(dist(&u, &u), 0.0);
    }

    #[test]
    fn dist_of_needle_is_width() {
        let u = ControlCurve::constant(vec![0.0], 1.0);
        let v = needle(&u, &needle_params(0.5, 1.0, 0.1));
        let d = dist(&u, &v);
        assert!((d - 0.1).abs() < 1e-12, "dist = {d}");
    }

    #[test]
    fn dist_of_nested_needles_is_symmetric_difference() {
        let u = ControlCurve::constant(vec![0.0], 1.0);
        let narrow = needle(&u, &needle_params(0.65, 1.0, 0.1));
        let wide = needle(&u, &needle_params(0.65, 1.0, 0.3));
        let d = dist(&narrow, &wide);
        assert!((d - 0.2).abs() < 1e-12, "dist = {d}");
    }

    #[test]
    fn smooth_needle_agrees_off_ramps() {
        let u = ControlCurve::constant(vec![0.0], 1.0);
        let p = needle_params(0.5, 1.0, 0.1);
        let raw = needle(&u, &p);
        let smooth = smooth_needle(&u, &p, 2);
        let h2 = 0.25 * 0.01;
        for &t in &[0.0, 0.39 - h2 - 1e-6, 0.42, 0.499, 0.5 + h2 + 1e-6, 0.9] {
            assert_eq!(
                raw.eval(t).unwrap(),
                smooth.eval(t).unwrap(),
                "mismatch at t={t}"
            );
        }
    }

    #[test]
    fn smooth_needle_junction_derivatives_match() {
        let k = 2;
        let u = ControlCurve::constant(vec![0.0], 1.0);
        let p = needle_params(0.5, 1.0, 0.1);
        let smooth = smooth_needle(&u, &p, k);
        let h2 = p.smoothing * p.eps * p.eps;
        // At each ramp endpoint, value and k-1 derivatives continue across.
        for &t in &[0.4 - h2, 0.4, 0.5, 0.5 + h2] {
            let left = smooth.eval_jet(t - 1e-12, k - 1).unwrap();
            let right = smooth.eval_jet(t + 1e-12, k - 1).unwrap();
            for ord in 0..k {
                let scale = (h2.powi(-(ord as i32))).max(1.0);
                assert!(
                    (left[ord][0] - right[ord][0]).abs() <= 1e-5 * scale,
                    "order {ord} jump at t={t}: {} vs {}",
                    left[ord][0],
                    right[ord][0]
                );
            }
        }
    }

    #[test]
    fn smooth_needle_distance_bound() {
        let u = ControlCurve::constant(vec![0.0], 1.0);
        let p = needle_params(0.5, 1.0, 0.1);
        let raw = needle(&u, &p);
        let smooth = smooth_needle(&u, &p, 2);
        let bounds = dist_bounds(&raw, &smooth, 10_000);
        let cap = 2.0 * p.smoothing * p.eps * p.eps;
        assert!(
            bounds.upper <= cap + 1e-12,
            "upper {} exceeds 2 h eps^2 = {cap}",
            bounds.upper
        );
    }

    #[test]
    fn smooth_needle_stays_in_hull() {
        let u = ControlCurve::constant(vec![0.0], 1.0);
        let p = needle_params(0.5, 1.0, 0.1);
        let smooth = smooth_needle(&u, &p, 3);
        for j in 0..1000 {
            let t = j as f64 / 1000.0;
            let v = smooth.eval(t).unwrap()[0];
            assert!((-1e-12..=1.0 + 1e-12).contains(&v), "v={v} at t={t}");
        }
    }

    #[test]
    fn needle_rebases_polynomial_tail() {
        // [0, 0.4) t^2, [0.4, 1] const; window [0.17, 0.32) cuts the poly
        // piece, whose tail must keep its absolute-time values exactly.
        let u = ControlCurve::from_pieces(
            vec![0.0, 0.4, 1.0],
            vec![
                Piece::Poly(vec![vec![0.0, 0.0, 1.0]]),
                Piece::Const(vec![0.16]),
            ],
        )
        .unwrap();
        let v = needle(&u, &NeedleParams::new(0.32, vec![9.0], 0.15, 1.0).unwrap());
        for &(t, want) in &[
            (0.10, 0.01),
            (0.17, 9.0),
            (0.31, 9.0),
            (0.32, 0.1024),
            (0.35, 0.1225),
            (0.45, 0.16),
        ] {
            let got = v.eval(t).unwrap()[0];
            assert!((got - want).abs() < 1e-12, "t={t}: got {got}, want {want}");
        }
        let jet = v.eval_jet(0.35, 1).unwrap();
        assert!((jet[1][0] - 0.7).abs() < 1e-12, "derivative after re-base");
        // window landing exactly on an existing breakpoint
        let w = needle(&u, &NeedleParams::new(0.4, vec![5.0], 0.1, 1.0).unwrap());
        assert_eq!(w.eval(0.35).unwrap(), vec![5.0]);
        assert_eq!(w.eval(0.4).unwrap(), vec![0.16]);
    }

    #[test]
    fn gamma_validation_flags_out_of_range_values() {
        let u = ControlCurve::constant(vec![3.0], 1.0);
        let violations = validate_gamma(&u, &[(-1.0, 1.0)], &[]);
        assert!(!violations.is_empty());
    }

    #[test]
    fn serialize_round_trip() {
        let u = ControlCurve::from_pieces(
            vec![0.0, 0.25, 0.75, 1.0],
            vec![
                Piece::Const(vec![0.5]),
                Piece::Poly(vec![vec![0.1, -2.0, 3.0]]),
                Piece::Fn(vec![expr::parse("sin(t)", &Schema::time_only()).unwrap()]),
            ],
        )
        .unwrap();
        let text = u.serialize();
        let v = ControlCurve::deserialize(&text).unwrap();
        assert_eq!(u, v);
    }
}
