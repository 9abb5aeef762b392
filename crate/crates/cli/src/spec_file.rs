//! Problem spec files: bracketed sections of `key = value` lines.
//!
//! ```text
//! # double integrator
//! [problem]
//! k = 2
//! n = 1
//! m = 1
//! T = 1.0
//!
//! [dynamics]
//! f1 = u1
//!
//! [cost]
//! C = x1_0
//!
//! [control]
//! kind = box          # box | finite
//! box = -1..1         # comma-separated ranges, one per axis
//! # points = -1; 0; 1 # finite kind: semicolon-separated points
//! # deriv1 = -10..10  # K^(l) ranges, l = 1..k-1
//! # khat = -2..2      # admissible superset (default: 2x inflation)
//!
//! [init]
//! x1_0 = 0.0
//! x1_1 = 0.0
//!
//! [numerics]          # optional, defaults shown
//! grid = 2048
//! richardson_tol = 1e-8
//! tau_points = 512
//! tol = 1e-4
//! max_iterations = 200
//! convention = derived
//!
//! [control0]
//! desc = const:0
//! ```

use std::collections::BTreeMap;

use hopmp_core::adjoint::TerminalConvention;
use hopmp_core::control::{ControlCurve, Piece};
use hopmp_core::dynamics::{ControlSet, Problem, ProblemError};
use hopmp_core::expr::{self, Schema};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum SpecError {
    #[error("{path}:{line}: {message}")]
    Syntax {
        path: String,
        line: usize,
        message: String,
    },
    #[error("spec validation failed: {0}")]
    Validation(#[from] ProblemError),
    #[error("cannot read `{path}`: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
}

#[derive(Debug, Clone)]
pub struct Numerics {
    pub grid: usize,
    pub richardson_tol: f64,
    pub tau_points: usize,
    pub tol: f64,
    pub max_iterations: usize,
    pub convention: TerminalConvention,
    pub seed: u64,
}

impl Default for Numerics {
    fn default() -> Self {
        Numerics {
            grid: 2048,
            richardson_tol: 1e-8,
            tau_points: 512,
            tol: 1e-4,
            max_iterations: 200,
            convention: TerminalConvention::DerivedFromCondi,
            seed: 0,
        }
    }
}

#[derive(Debug)]
pub struct LoadedSpec {
    pub problem: Problem,
    pub numerics: Numerics,
    pub initial_control: ControlCurve,
}

struct Section {
    line: usize,
    entries: BTreeMap<String, (usize, String)>,
}

fn err(path: &str, line: usize, message: impl Into<String>) -> SpecError {
    SpecError::Syntax {
        path: path.to_string(),
        line,
        message: message.into(),
    }
}

fn split_sections(path: &str, text: &str) -> Result<BTreeMap<String, Section>, SpecError> {
    let mut sections: BTreeMap<String, Section> = BTreeMap::new();
    let mut current: Option<String> = None;
    for (lineno, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        if let Some(name) = line.strip_prefix('[') {
            let name = name
                .strip_suffix(']')
                .ok_or_else(|| err(path, lineno + 1, "unterminated section header"))?
                .trim()
                .to_lowercase();
            sections.entry(name.clone()).or_insert(Section {
                line: lineno + 1,
                entries: BTreeMap::new(),
            });
            current = Some(name);
            continue;
        }
        let (key, value) = line
            .split_once('=')
            .ok_or_else(|| err(path, lineno + 1, "expected `key = value`"))?;
        let section = current
            .clone()
            .ok_or_else(|| err(path, lineno + 1, "entry before any [section]"))?;
        sections
            .get_mut(&section)
            .unwrap()
            .entries
            .insert(key.trim().to_lowercase(), (lineno + 1, value.trim().to_string()));
    }
    Ok(sections)
}

impl Section {
    fn get(&self, key: &str) -> Option<&(usize, String)> {
        self.entries.get(key)
    }

    fn require(&self, path: &str, key: &str) -> Result<&(usize, String), SpecError> {
        self.get(key)
            .ok_or_else(|| err(path, self.line, format!("missing key `{key}`")))
    }
}

fn parse_num<T: std::str::FromStr>(path: &str, line: usize, v: &str, what: &str) -> Result<T, SpecError> {
    v.parse()
        .map_err(|_| err(path, line, format!("bad {what}: `{v}`")))
}

/// `lo..hi, lo..hi, ...` — one range per control axis.
fn parse_ranges(path: &str, line: usize, v: &str, m: usize) -> Result<Vec<(f64, f64)>, SpecError> {
    let out: Result<Vec<(f64, f64)>, SpecError> = v
        .split(',')
        .map(|r| {
            let (lo, hi) = r
                .trim()
                .split_once("..")
                .ok_or_else(|| err(path, line, format!("expected `lo..hi`, got `{r}`")))?;
            Ok((
                parse_num(path, line, lo.trim(), "range bound")?,
                parse_num(path, line, hi.trim(), "range bound")?,
            ))
        })
        .collect();
    let out = out?;
    if out.len() != m {
        return Err(err(
            path,
            line,
            format!("expected {m} range(s), got {}", out.len()),
        ));
    }
    Ok(out)
}

/// Control descriptor shared with `--control`:
/// `const:v1[,v2...]` | `expr:e1[;e2...]` | `file:PATH` (serialized form).
pub fn parse_control_desc(
    desc: &str,
    m: usize,
    horizon: f64,
) -> Result<ControlCurve, String> {
    let (kind, payload) = desc
        .split_once(':')
        .ok_or_else(|| format!("control descriptor `{desc}` is missing `kind:`"))?;
    match kind {
        "const" => {
            let values: Result<Vec<f64>, _> =
                payload.split(',').map(|v| v.trim().parse::<f64>()).collect();
            let values = values.map_err(|_| format!("bad constant control `{payload}`"))?;
            if values.len() != m {
                return Err(format!(
                    "constant control has {} component(s), expected {m}",
                    values.len()
                ));
            }
            Ok(ControlCurve::constant(values, horizon))
        }
        "expr" => {
            let schema = Schema::time_only();
            let comps: Result<Vec<_>, String> = payload
                .split(';')
                .map(|e| expr::parse(e.trim(), &schema).map_err(|err| err.to_string()))
                .collect();
            let comps = comps?;
            if comps.len() != m {
                return Err(format!(
                    "expression control has {} component(s), expected {m}",
                    comps.len()
                ));
            }
            ControlCurve::from_pieces(vec![0.0, horizon], vec![Piece::Fn(comps)])
                .map_err(|e| e.to_string())
        }
        "file" => {
            let text = std::fs::read_to_string(payload)
                .map_err(|e| format!("cannot read control file `{payload}`: {e}"))?;
            ControlCurve::deserialize(&text).map_err(|e| e.to_string())
        }
        other => Err(format!("unknown control kind `{other}`")),
    }
}

pub fn load(path: &str) -> Result<LoadedSpec, SpecError> {
    let text = std::fs::read_to_string(path).map_err(|source| SpecError::Io {
        path: path.to_string(),
        source,
    })?;
    parse(path, &text)
}

pub fn parse(path: &str, text: &str) -> Result<LoadedSpec, SpecError> {
    let sections = split_sections(path, text)?;
    let section = |name: &str| -> Result<&Section, SpecError> {
        sections
            .get(name)
            .ok_or_else(|| err(path, 1, format!("missing [{name}] section")))
    };

    let problem_s = section("problem")?;
    let &(kl, ref kv) = problem_s.require(path, "k")?;
    let k: usize = parse_num(path, kl, kv, "order k")?;
    let &(nl, ref nv) = problem_s.require(path, "n")?;
    let n: usize = parse_num(path, nl, nv, "state dimension n")?;
    let &(ml, ref mv) = problem_s.require(path, "m")?;
    let m: usize = parse_num(path, ml, mv, "control dimension m")?;
    let &(tl, ref tv) = problem_s.require(path, "t")?;
    let horizon: f64 = parse_num(path, tl, tv, "horizon T")?;
    if k == 0 || n == 0 || m == 0 {
        return Err(err(path, problem_s.line, "k, n, m must be positive"));
    }

    let dyn_schema = Schema::dynamics(k, n, m);
    let dynamics_s = section("dynamics")?;
    let mut dynamics = Vec::with_capacity(n);
    for i in 1..=n {
        let &(fl, ref fv) = dynamics_s.require(path, &format!("f{i}"))?;
        let e = expr::parse(fv, &dyn_schema).map_err(|e| err(path, fl, e.to_string()))?;
        dynamics.push(e);
    }

    let cost_s = section("cost")?;
    let &(cl, ref cv) = cost_s.require(path, "c")?;
    let cost = expr::parse(cv, &Schema::cost(k, n)).map_err(|e| err(path, cl, e.to_string()))?;

    let control_s = section("control")?;
    let &(kindl, ref kind) = control_s.require(path, "kind")?;
    let control_set = match kind.as_str() {
        "box" => {
            let &(bl, ref bv) = control_s.require(path, "box")?;
            ControlSet::Box(parse_ranges(path, bl, bv, m)?)
        }
        "finite" => {
            let &(pl, ref pv) = control_s.require(path, "points")?;
            let points: Result<Vec<Vec<f64>>, SpecError> = pv
                .split(';')
                .map(|pt| {
                    let comps: Result<Vec<f64>, _> =
                        pt.split_whitespace().map(str::parse).collect();
                    let comps =
                        comps.map_err(|_| err(path, pl, format!("bad point `{pt}`")))?;
                    if comps.len() != m {
                        return Err(err(
                            path,
                            pl,
                            format!("point `{pt}` has {} component(s), expected {m}", comps.len()),
                        ));
                    }
                    Ok(comps)
                })
                .collect();
            ControlSet::Finite(points?)
        }
        other => return Err(err(path, kindl, format!("unknown control kind `{other}`"))),
    };
    let mut derivative_boxes = Vec::new();
    for l in 1..k {
        if let Some(&(dl, ref dv)) = control_s.get(&format!("deriv{l}")) {
            derivative_boxes.push(parse_ranges(path, dl, dv, m)?);
        }
    }
    let khat = match control_s.get("khat") {
        Some(&(hl, ref hv)) => Some(parse_ranges(path, hl, hv, m)?),
        None => None,
    };

    let init_s = section("init")?;
    let mut initial_jet = vec![vec![0.0; n]; k];
    for (s, level) in initial_jet.iter_mut().enumerate() {
        for i in 1..=n {
            let key = format!("x{i}_{s}");
            let &(vl, ref vv) = init_s.require(path, &key)?;
            level[i - 1] = parse_num(path, vl, vv, "initial value")?;
        }
    }

    let mut numerics = Numerics::default();
    if let Some(num_s) = sections.get("numerics") {
        if let Some(&(l, ref v)) = num_s.get("grid") {
            numerics.grid = parse_num(path, l, v, "grid size")?;
        }
        if let Some(&(l, ref v)) = num_s.get("richardson_tol") {
            numerics.richardson_tol = parse_num(path, l, v, "tolerance")?;
        }
        if let Some(&(l, ref v)) = num_s.get("tau_points") {
            numerics.tau_points = parse_num(path, l, v, "tau point count")?;
        }
        if let Some(&(l, ref v)) = num_s.get("tol") {
            numerics.tol = parse_num(path, l, v, "tolerance")?;
        }
        if let Some(&(l, ref v)) = num_s.get("max_iterations") {
            numerics.max_iterations = parse_num(path, l, v, "iteration count")?;
        }
        if let Some(&(l, ref v)) = num_s.get("seed") {
            numerics.seed = parse_num(path, l, v, "seed")?;
        }
        if let Some(&(l, ref v)) = num_s.get("convention") {
            numerics.convention = match v.as_str() {
                "derived" => TerminalConvention::DerivedFromCondi,
                "printed" => TerminalConvention::AsPrinted,
                other => return Err(err(path, l, format!("unknown convention `{other}`"))),
            };
        }
    }

    let initial_control = match sections.get("control0") {
        Some(s) => {
            let &(dl, ref dv) = s.require(path, "desc")?;
            parse_control_desc(dv, m, horizon).map_err(|e| err(path, dl, e))?
        }
        None => ControlCurve::constant(vec![0.0; m], horizon),
    };

    let problem = Problem::new(
        k,
        horizon,
        dynamics,
        cost,
        control_set,
        derivative_boxes,
        khat,
        initial_jet,
    )?;
    Ok(LoadedSpec {
        problem,
        numerics,
        initial_control,
    })
}
