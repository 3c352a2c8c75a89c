//! Line-based run configuration.
//!
//! Grammar, one item per line:
//!
//! ```text
//! # comment (a `#` anywhere starts a comment)
//! seed = 7                 # top-level keys come before the first section
//! [geometry]
//! rho = 0.5
//! ladder = 4, 8, 16        # lists are comma separated and may be empty
//! ```
//!
//! Keys are `section.name`; unknown keys, malformed values and out-of-range
//! values are rejected with the offending line number. Missing keys take
//! their defaults, so the empty file is a valid configuration.

use std::fmt::{self, Write as _};
use std::str::FromStr;

use thiserror::Error;

use crate::cell::HomogenizedTensor;
use crate::drift::{DriftSpec, EffectiveForm, GradientCoefficient};
use crate::effective::MacroInitial;
use crate::experiment::{Coupling, ExperimentPlan};
use crate::expr::{call_syntax, FieldExpr};
use crate::geometry::CellSpec;
use crate::linalg::SolverMethod;
use crate::noise::SpectralNoiseSpec;
use crate::path::{BoundaryInit, Functional, PathSettings, RecordOptions, TimeGrid};

#[derive(Debug, Error, Clone, PartialEq)]
pub struct ConfigError {
    /// 1-based line number, when the problem is tied to one line.
    pub line: Option<usize>,
    pub key: String,
    pub message: String,
}

impl fmt::Display for ConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.line {
            Some(l) => write!(f, "line {l}: {}: {}", self.key, self.message),
            None => write!(f, "{}: {}", self.key, self.message),
        }
    }
}

/// Every accepted key with a one-line description.
pub const KEYS: &[(&str, &str)] = &[
    ("seed", "master seed for all noise streams (unsigned 64-bit)"),
    ("geometry.rho", "hole side as a fraction of the cell side, in [0, 1)"),
    ("geometry.m", "grid intervals per cell side; m(1-rho)/2 must be a positive integer when rho > 0"),
    ("geometry.n_eps", "cells per side (1/epsilon) for single-level runs"),
    ("geometry.ladder", "cells per side for sweeps, strictly increasing list"),
    ("time.T", "final time, a whole number of steps"),
    ("time.dt", "time step"),
    ("time.sample_times", "times at which functionals are recorded (empty: final time only)"),
    ("physics.b", "boundary reaction coefficient b"),
    ("physics.form", "effective state scaling: consistent (f(U/theta), b*lambda/theta) or literal (f(U), b*lambda)"),
    ("drift.kind", "forcing | lipschitz | polynomial | monotone | gradient"),
    ("drift.f", "forcing field: number, const(c), sines(amp,k,l) or linear(c0,cx,cy)"),
    ("drift.c", "lipschitz: coefficient of u"),
    ("drift.d", "lipschitz: coefficient of sin(u)"),
    ("drift.a", "polynomial: coefficient field a(x), bounded below by a positive constant"),
    ("drift.p", "polynomial: exponent p > 0 in -a|u|^p u"),
    ("drift.s", "monotone: s >= 0 in -s*cbrt(u)"),
    ("drift.h1", "gradient: h1(u) as linear(c) or sine(c)"),
    ("drift.h2", "gradient: h2(u) as linear(c) or sine(c)"),
    ("noise.J", "number of retained sine modes"),
    ("noise.gamma", "eigenvalue decay exponent, q_j = q0 * j^-gamma"),
    ("noise.q0", "noise amplitude q0 >= 0"),
    ("noise.g1", "bulk noise multiplier field"),
    ("noise.g2", "boundary noise multiplier field"),
    ("initial.u0", "bulk initial field"),
    ("initial.v0", "boundary initial value: trace or a number"),
    ("macro.n", "macro grid intervals per side"),
    ("macro.ic", "macro initial value: theta (U0 = theta*u0) or inverse-theta (U0 = u0/theta)"),
    ("macro.tensor", "solve | inline(a11,a12,a22,theta,lambda) | file(path to a cell CSV)"),
    ("solver.method", "cholesky | cg"),
    ("solver.tol", "relative residual for cg"),
    ("solver.blowup_cap", "largest admissible state magnitude before a path is marked failed"),
    ("cell.tol", "relative residual for the corrector solves"),
    ("experiment.paths", "Monte Carlo paths per model and ladder point"),
    ("experiment.coupling", "shared | independent noise between micro and macro paths"),
    ("experiment.functionals", "list of k:l sine modes and l2 (path L2 norm)"),
    ("experiment.out_dir", "output directory (empty: $PERFHOM_OUT or ./perfhom-out)"),
    ("experiment.common_n", "comparison grid intervals per side (0: largest common divisor)"),
    ("experiment.reuse_macro", "run the macro sample once for all ladder points (true | false)"),
];

/// Where the macro model's tensor comes from.
#[derive(Debug, Clone, PartialEq, Default)]
pub enum TensorSource {
    #[default]
    Solve,
    Inline {
        a11: f64,
        a12: f64,
        a22: f64,
        theta: f64,
        lambda: f64,
    },
    File(String),
}

impl TensorSource {
    /// Tensor given inline; `None` for the other sources.
    pub fn inline(&self) -> Option<HomogenizedTensor> {
        match *self {
            TensorSource::Inline {
                a11,
                a12,
                a22,
                theta,
                lambda,
            } => Some(HomogenizedTensor::from_entries(
                [[a11, a12], [a12, a22]],
                theta,
                lambda,
            )),
            _ => None,
        }
    }
}

impl fmt::Display for TensorSource {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            TensorSource::Solve => write!(f, "solve"),
            TensorSource::Inline {
                a11,
                a12,
                a22,
                theta,
                lambda,
            } => write!(f, "inline({a11:?},{a12:?},{a22:?},{theta:?},{lambda:?})"),
            TensorSource::File(p) => write!(f, "file({p})"),
        }
    }
}

impl FromStr for TensorSource {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let s = s.trim();
        if s == "solve" {
            return Ok(TensorSource::Solve);
        }
        let err =
            || format!("`{s}`: expected solve, inline(a11,a12,a22,theta,lambda) or file(path)");
        let (name, args) = call_syntax(s).ok_or_else(err)?;
        match name {
            "file" => {
                let inner = s[s.find('(').unwrap() + 1..s.len() - 1].trim();
                if inner.is_empty() {
                    return Err(err());
                }
                Ok(TensorSource::File(inner.to_string()))
            }
            "inline" if args.len() == 5 => {
                let v: Vec<f64> = args
                    .iter()
                    .map(|a| a.parse::<f64>().ok().filter(|x| x.is_finite()))
                    .collect::<Option<_>>()
                    .ok_or_else(err)?;
                Ok(TensorSource::Inline {
                    a11: v[0],
                    a12: v[1],
                    a22: v[2],
                    theta: v[3],
                    lambda: v[4],
                })
            }
            _ => Err(err()),
        }
    }
}

/// Drift parameters for every catalog entry; `kind` selects which are used.
#[derive(Debug, Clone, PartialEq)]
pub struct DriftConfig {
    pub kind: String,
    pub f: FieldExpr,
    pub c: f64,
    pub d: f64,
    pub a: FieldExpr,
    pub p: f64,
    pub s: f64,
    pub h1: GradientCoefficient,
    pub h2: GradientCoefficient,
}

impl Default for DriftConfig {
    fn default() -> Self {
        Self {
            kind: "forcing".into(),
            f: FieldExpr::ZERO,
            c: 0.0,
            d: 0.0,
            a: FieldExpr::ONE,
            p: 2.0,
            s: 1.0,
            h1: GradientCoefficient::ZERO,
            h2: GradientCoefficient::ZERO,
        }
    }
}

impl DriftConfig {
    pub fn spec(&self) -> DriftSpec {
        match self.kind.as_str() {
            "lipschitz" => DriftSpec::Lipschitz {
                c: self.c,
                d: self.d,
            },
            "polynomial" => DriftSpec::Polynomial {
                a: self.a,
                p: self.p,
            },
            "monotone" => DriftSpec::MonotoneSublinear { s: self.s },
            "gradient" => DriftSpec::Gradient {
                h: [self.h1, self.h2],
            },
            _ => DriftSpec::Forcing { f: self.f },
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Config {
    pub seed: u64,
    pub rho: f64,
    pub m: usize,
    pub n_eps: usize,
    pub ladder: Vec<usize>,
    pub final_time: f64,
    pub dt: f64,
    pub sample_times: Vec<f64>,
    pub b: f64,
    pub form: EffectiveForm,
    pub drift: DriftConfig,
    pub noise: SpectralNoiseSpec,
    pub u0: FieldExpr,
    pub v0: BoundaryInit,
    pub macro_n: usize,
    pub macro_ic: MacroInitial,
    pub tensor: TensorSource,
    pub solver: SolverMethod,
    pub solver_tol: f64,
    pub blowup_cap: f64,
    pub cell_tol: f64,
    pub paths: usize,
    pub coupling: Coupling,
    pub functionals: Vec<Functional>,
    pub out_dir: Option<String>,
    pub common_n: usize,
    pub reuse_macro: bool,
}

impl Default for Config {
    fn default() -> Self {
        Self {
            seed: 0,
            rho: 0.5,
            m: 8,
            n_eps: 8,
            ladder: vec![4, 8, 16],
            final_time: 0.25,
            dt: 1e-3,
            sample_times: Vec::new(),
            b: 1.0,
            form: EffectiveForm::Consistent,
            drift: DriftConfig::default(),
            noise: SpectralNoiseSpec::default(),
            u0: FieldExpr::ZERO,
            v0: BoundaryInit::Trace,
            macro_n: 64,
            macro_ic: MacroInitial::ThetaScaled,
            tensor: TensorSource::Solve,
            solver: SolverMethod::Cholesky,
            solver_tol: 1e-12,
            blowup_cap: 1e8,
            cell_tol: crate::cell::DEFAULT_CELL_TOL,
            paths: 500,
            coupling: Coupling::Shared,
            functionals: vec![Functional::Mode { k: 1, l: 1 }, Functional::PathL2],
            out_dir: None,
            common_n: 0,
            reuse_macro: false,
        }
    }
}

fn parse_list<T, E: fmt::Display>(
    v: &str,
    f: impl Fn(&str) -> Result<T, E>,
) -> Result<Vec<T>, String> {
    if v.trim().is_empty() {
        return Ok(Vec::new());
    }
    v.split(',')
        .map(|s| f(s.trim()).map_err(|e| e.to_string()))
        .collect()
}

fn list_to_string<T: fmt::Display>(v: &[T]) -> String {
    v.iter()
        .map(|x| x.to_string())
        .collect::<Vec<_>>()
        .join(", ")
}

fn float_list_to_string(v: &[f64]) -> String {
    v.iter()
        .map(|x| format!("{x:?}"))
        .collect::<Vec<_>>()
        .join(", ")
}

fn real(v: &str) -> Result<f64, String> {
    match v.trim().parse::<f64>() {
        Ok(x) if x.is_finite() => Ok(x),
        _ => Err(format!("expected a finite number, got `{v}`")),
    }
}

fn count(v: &str) -> Result<usize, String> {
    v.trim()
        .parse::<usize>()
        .map_err(|_| format!("expected a non-negative integer, got `{v}`"))
}

fn at_least<T: PartialOrd + fmt::Display + Copy>(x: T, lo: T) -> Result<T, String> {
    if x >= lo {
        Ok(x)
    } else {
        Err(format!("must be at least {lo}, got {x}"))
    }
}

fn positive(x: f64) -> Result<f64, String> {
    if x > 0.0 {
        Ok(x)
    } else {
        Err(format!("must be positive, got {x}"))
    }
}

fn gcd(a: usize, b: usize) -> usize {
    if b == 0 {
        a
    } else {
        gcd(b, a % b)
    }
}

impl Config {
    /// Sets `key` (as listed in [`KEYS`]) from its textual value.
    pub fn set(&mut self, key: &str, value: &str) -> Result<(), String> {
        let v = value.trim();
        let parse_err = |e: String| e;
        match key {
            "seed" => {
                self.seed = v
                    .parse()
                    .map_err(|_| format!("expected an unsigned integer, got `{v}`"))?
            }
            "geometry.rho" => {
                let x = real(v)?;
                if !(0.0..1.0).contains(&x) {
                    return Err(format!("must lie in [0, 1), got {x}"));
                }
                self.rho = x;
            }
            "geometry.m" => self.m = at_least(count(v)?, 1)?,
            "geometry.n_eps" => self.n_eps = at_least(count(v)?, 1)?,
            "geometry.ladder" => {
                let l = parse_list(v, |s| count(s).and_then(|n| at_least(n, 1)))?;
                if l.is_empty() {
                    return Err("ladder must not be empty".into());
                }
                if l.windows(2).any(|w| w[0] >= w[1]) {
                    return Err("ladder must be strictly increasing".into());
                }
                self.ladder = l;
            }
            "time.T" => self.final_time = positive(real(v)?)?,
            "time.dt" => self.dt = positive(real(v)?)?,
            "time.sample_times" => {
                self.sample_times = parse_list(v, |s| real(s).and_then(|x| at_least(x, 0.0)))?
            }
            "physics.b" => self.b = real(v)?,
            "physics.form" => {
                self.form = v
                    .parse()
                    .map_err(|e: crate::drift::DriftError| e.to_string())?
            }
            "drift.kind" => match v {
                "forcing" | "lipschitz" | "polynomial" | "monotone" | "gradient" => {
                    self.drift.kind = v.to_string()
                }
                _ => return Err(format!("unknown drift kind `{v}`")),
            },
            "drift.f" => {
                self.drift.f = v
                    .parse()
                    .map_err(|e: crate::expr::ExprParseError| e.to_string())?
            }
            "drift.c" => self.drift.c = real(v)?,
            "drift.d" => self.drift.d = real(v)?,
            "drift.a" => {
                self.drift.a = v
                    .parse()
                    .map_err(|e: crate::expr::ExprParseError| e.to_string())?
            }
            "drift.p" => self.drift.p = positive(real(v)?)?,
            "drift.s" => self.drift.s = at_least(real(v)?, 0.0)?,
            "drift.h1" => {
                self.drift.h1 = v
                    .parse()
                    .map_err(|e: crate::drift::DriftError| e.to_string())?
            }
            "drift.h2" => {
                self.drift.h2 = v
                    .parse()
                    .map_err(|e: crate::drift::DriftError| e.to_string())?
            }
            "noise.J" => {
                let j = at_least(count(v)?, 1)?;
                if j > 100_000 {
                    return Err(format!("at most 100000 modes, got {j}"));
                }
                self.noise.modes = j;
            }
            "noise.gamma" => self.noise.decay = at_least(real(v)?, 0.0)?,
            "noise.q0" => self.noise.amplitude = at_least(real(v)?, 0.0)?,
            "noise.g1" => {
                self.noise.g1 = v
                    .parse()
                    .map_err(|e: crate::expr::ExprParseError| e.to_string())?
            }
            "noise.g2" => {
                self.noise.g2 = v
                    .parse()
                    .map_err(|e: crate::expr::ExprParseError| e.to_string())?
            }
            "initial.u0" => {
                self.u0 = v
                    .parse()
                    .map_err(|e: crate::expr::ExprParseError| e.to_string())?
            }
            "initial.v0" => self.v0 = v.parse().map_err(parse_err)?,
            "macro.n" => self.macro_n = at_least(count(v)?, 2)?,
            "macro.ic" => self.macro_ic = v.parse().map_err(parse_err)?,
            "macro.tensor" => self.tensor = v.parse().map_err(parse_err)?,
            "solver.method" => self.solver = v.parse().map_err(parse_err)?,
            "solver.tol" => self.solver_tol = positive(real(v)?)?,
            "solver.blowup_cap" => self.blowup_cap = positive(real(v)?)?,
            "cell.tol" => self.cell_tol = positive(real(v)?)?,
            "experiment.paths" => self.paths = at_least(count(v)?, 1)?,
            "experiment.coupling" => self.coupling = v.parse().map_err(parse_err)?,
            "experiment.functionals" => {
                let f = parse_list(v, Functional::from_str)?;
                if f.is_empty() {
                    return Err("at least one functional is needed".into());
                }
                self.functionals = f;
            }
            "experiment.out_dir" => self.out_dir = (!v.is_empty()).then(|| v.to_string()),
            "experiment.common_n" => self.common_n = count(v)?,
            "experiment.reuse_macro" => {
                self.reuse_macro = match v {
                    "true" => true,
                    "false" => false,
                    _ => return Err(format!("expected true or false, got `{v}`")),
                }
            }
            _ => return Err("unknown key".into()),
        }
        Ok(())
    }

    /// Checks constraints that involve more than one key.
    pub fn validate(&self) -> Result<(), ConfigError> {
        let whole = |key: &str, message: String| ConfigError {
            line: None,
            key: key.to_string(),
            message,
        };
        CellSpec::new(self.rho, self.m).map_err(|e| whole("geometry.m", e.to_string()))?;
        TimeGrid::new(self.final_time, self.dt, &self.sample_times)
            .map_err(|e| whole("time.dt", e.to_string()))?;
        self.drift
            .spec()
            .validate()
            .map_err(|e| whole("drift.kind", e.to_string()))?;
        if let Some(t) = self.tensor.inline() {
            if !(t.theta > 0.0 && t.theta <= 1.0) || t.lambda < 0.0 || !(t.eigenvalues()[0] > 0.0) {
                return Err(whole(
                    "macro.tensor",
                    "needs a positive definite tensor, theta in (0, 1] and lambda >= 0".into(),
                ));
            }
        }
        if self.common_n > 0 {
            for &n in self.ladder.iter().chain([self.n_eps].iter()) {
                if !(n * self.m).is_multiple_of(self.common_n) {
                    return Err(whole(
                        "experiment.common_n",
                        format!(
                            "{} does not divide the micro grid {}",
                            self.common_n,
                            n * self.m
                        ),
                    ));
                }
            }
            if !self.macro_n.is_multiple_of(self.common_n) {
                return Err(whole(
                    "experiment.common_n",
                    format!(
                        "{} does not divide macro.n = {}",
                        self.common_n, self.macro_n
                    ),
                ));
            }
        }
        Ok(())
    }

    /// Parses a configuration file.
    pub fn parse(text: &str) -> Result<Config, ConfigError> {
        let mut cfg = Config::default();
        let mut section: Option<String> = None;
        for (idx, raw) in text.lines().enumerate() {
            let line_no = idx + 1;
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let err = |key: &str, message: String| ConfigError {
                line: Some(line_no),
                key: key.to_string(),
                message,
            };
            if let Some(rest) = line.strip_prefix('[') {
                let name = rest
                    .strip_suffix(']')
                    .ok_or_else(|| err(line, "unterminated section header".into()))?
                    .trim();
                if !KEYS
                    .iter()
                    .any(|(k, _)| k.split_once('.').map(|p| p.0) == Some(name))
                {
                    return Err(err(name, "unknown section".into()));
                }
                section = Some(name.to_string());
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| err(line, "expected `key = value`".into()))?;
            let key = key.trim();
            let full = match &section {
                Some(s) => format!("{s}.{key}"),
                None => key.to_string(),
            };
            cfg.set(&full, value).map_err(|m| err(&full, m))?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    /// Applies `key=value` overrides in order, then re-validates.
    pub fn apply_overrides<'a>(
        &mut self,
        pairs: impl IntoIterator<Item = (&'a str, &'a str)>,
    ) -> Result<(), ConfigError> {
        for (key, value) in pairs {
            self.set(key.trim(), value).map_err(|message| ConfigError {
                line: None,
                key: key.trim().to_string(),
                message,
            })?;
        }
        self.validate()
    }

    /// Canonical text form; parsing it yields an identical configuration.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let mut w = |line: String| {
            s.push_str(&line);
            s.push('\n');
        };
        w(format!("seed = {}", self.seed));
        w(String::new());
        w("[geometry]".into());
        w(format!("rho = {:?}", self.rho));
        w(format!("m = {}", self.m));
        w(format!("n_eps = {}", self.n_eps));
        w(format!("ladder = {}", list_to_string(&self.ladder)));
        w(String::new());
        w("[time]".into());
        w(format!("T = {:?}", self.final_time));
        w(format!("dt = {:?}", self.dt));
        w(format!(
            "sample_times = {}",
            float_list_to_string(&self.sample_times)
        ));
        w(String::new());
        w("[physics]".into());
        w(format!("b = {:?}", self.b));
        w(format!("form = {}", self.form.name()));
        w(String::new());
        w("[drift]".into());
        w(format!("kind = {}", self.drift.kind));
        w(format!("f = {}", self.drift.f));
        w(format!("c = {:?}", self.drift.c));
        w(format!("d = {:?}", self.drift.d));
        w(format!("a = {}", self.drift.a));
        w(format!("p = {:?}", self.drift.p));
        w(format!("s = {:?}", self.drift.s));
        w(format!("h1 = {}", self.drift.h1));
        w(format!("h2 = {}", self.drift.h2));
        w(String::new());
        w("[noise]".into());
        w(format!("J = {}", self.noise.modes));
        w(format!("gamma = {:?}", self.noise.decay));
        w(format!("q0 = {:?}", self.noise.amplitude));
        w(format!("g1 = {}", self.noise.g1));
        w(format!("g2 = {}", self.noise.g2));
        w(String::new());
        w("[initial]".into());
        w(format!("u0 = {}", self.u0));
        w(format!("v0 = {}", self.v0));
        w(String::new());
        w("[macro]".into());
        w(format!("n = {}", self.macro_n));
        w(format!("ic = {}", self.macro_ic));
        w(format!("tensor = {}", self.tensor));
        w(String::new());
        w("[solver]".into());
        w(format!("method = {}", self.solver.name()));
        w(format!("tol = {:?}", self.solver_tol));
        w(format!("blowup_cap = {:?}", self.blowup_cap));
        w(String::new());
        w("[cell]".into());
        w(format!("tol = {:?}", self.cell_tol));
        w(String::new());
        w("[experiment]".into());
        w(format!("paths = {}", self.paths));
        w(format!("coupling = {}", self.coupling));
        w(format!(
            "functionals = {}",
            list_to_string(&self.functionals)
        ));
        w(format!(
            "out_dir = {}",
            self.out_dir.as_deref().unwrap_or("")
        ));
        w(format!("common_n = {}", self.common_n));
        w(format!("reuse_macro = {}", self.reuse_macro));
        s
    }

    /// Comparison grid: the configured one, or the largest common divisor of
    /// every micro grid in `cells` and the macro grid.
    pub fn resolved_common_n(&self, cells: &[usize]) -> usize {
        if self.common_n > 0 {
            return self.common_n;
        }
        cells.iter().fold(self.macro_n, |g, &n| gcd(g, n * self.m))
    }

    pub fn path_settings(&self, cells: &[usize]) -> PathSettings {
        PathSettings {
            time: TimeGrid::new(self.final_time, self.dt, &self.sample_times)
                .expect("validated time grid"),
            b: self.b,
            drift: self.drift.spec(),
            noise: self.noise.clone(),
            initial: self.u0,
            boundary_initial: self.v0,
            seed: self.seed,
            functionals: self.functionals.clone(),
            common_n: self.resolved_common_n(cells),
            blowup_cap: self.blowup_cap,
            solver: self.solver,
            solver_tol: self.solver_tol,
            record: RecordOptions::default(),
        }
    }

    /// Sweep plan over `geometry.ladder`; `tensor` overrides the configured source.
    pub fn plan(&self, tensor: Option<HomogenizedTensor>) -> ExperimentPlan {
        ExperimentPlan {
            rho: self.rho,
            m: self.m,
            ladder: self.ladder.clone(),
            paths: self.paths,
            settings: self.path_settings(&self.ladder),
            macro_n: self.macro_n,
            form: self.form,
            macro_initial: self.macro_ic,
            coupling: self.coupling,
            reuse_macro: self.reuse_macro,
            cell_tol: self.cell_tol,
            tensor: tensor.or_else(|| self.tensor.inline()),
        }
    }

    /// Text listing every key, for command-line help.
    pub fn key_help() -> String {
        let defaults = Config::default().to_text();
        let default_of = |key: &str| {
            let (section, name) = key.split_once('.').unwrap_or(("", key));
            let mut current = "";
            for line in defaults.lines() {
                if let Some(s) = line.strip_prefix('[') {
                    current = s.trim_end_matches(']');
                } else if let Some((k, v)) = line.split_once('=') {
                    if current == section && k.trim() == name {
                        return v.trim().to_string();
                    }
                }
            }
            String::new()
        };
        let mut out = String::new();
        for (key, help) in KEYS {
            let _ = writeln!(out, "  {key:<24} {help} [default: {}]", default_of(key));
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn empty_is_default() {
        assert_eq!(Config::parse("").unwrap(), Config::default());
        assert_eq!(Config::parse("# nothing\n\n").unwrap(), Config::default());
    }

    #[test]
    fn range_error_names_line() {
        let e = Config::parse("seed = 1\n[geometry]\nrho = 1.5\n").unwrap_err();
        assert_eq!(e.line, Some(3));
        assert_eq!(e.key, "geometry.rho");
    }

    #[test]
    fn unknown_keys_and_sections() {
        let e = Config::parse("[geometry]\nrhoo = 0.5").unwrap_err();
        assert_eq!(e.line, Some(2));
        assert!(e.message.contains("unknown key"));
        assert_eq!(Config::parse("[geom]").unwrap_err().line, Some(1));
        assert!(Config::parse("[time]\ndt 0.1").is_err());
        assert!(Config::parse("[noise]\nJ = many").is_err());
    }

    #[test]
    fn values_and_comments() {
        let cfg = Config::parse(
            "seed = 42 # master\n[geometry]\nladder = 2, 4,8\n[drift]\nkind = gradient\nh1 = sine(0.5)\n\
             [experiment]\nfunctionals = 1:1, 2:1, l2\nout_dir = runs/a\n[macro]\ntensor = inline(0.6,0,0.6,0.75,2)\n",
        )
        .unwrap();
        assert_eq!(cfg.seed, 42);
        assert_eq!(cfg.ladder, vec![2, 4, 8]);
        assert_eq!(cfg.drift.spec().kind(), "gradient");
        assert_eq!(cfg.functionals.len(), 3);
        assert_eq!(cfg.out_dir.as_deref(), Some("runs/a"));
        assert!(cfg.tensor.inline().is_some());
    }

    #[test]
    fn cross_field_checks() {
        // m(1 − ρ)/2 is not an integer
        assert!(Config::parse("[geometry]\nm = 7").is_err());
        assert!(Config::parse("[time]\nT = 0.1\ndt = 0.03").is_err());
        assert!(Config::parse("[drift]\nkind = polynomial\na = 0").is_err());
    }

    #[test]
    fn common_grid_resolution() {
        let cfg = Config::default();
        assert_eq!(cfg.resolved_common_n(&[4, 8, 16]), 32);
        assert_eq!(cfg.resolved_common_n(&[16]), 64);
    }

    #[test]
    fn help_lists_every_key() {
        let help = Config::key_help();
        for (k, _) in KEYS {
            assert!(help.contains(k));
        }
        assert!(help.contains("[default: 0.5]"));
    }

    fn expr() -> impl Strategy<Value = FieldExpr> {
        prop_oneof![
            (-10.0..10.0f64).prop_map(FieldExpr::Constant),
            (-5.0..5.0f64, 1u32..6, 1u32..6).prop_map(|(amp, k, l)| FieldExpr::SineProduct {
                amp,
                k,
                l
            }),
            (0.5..3.0f64, -0.2..0.2f64, -0.2..0.2f64).prop_map(|(c0, cx, cy)| FieldExpr::Linear {
                c0,
                cx,
                cy
            }),
        ]
    }

    fn coefficient() -> impl Strategy<Value = GradientCoefficient> {
        prop_oneof![
            (-3.0..3.0f64).prop_map(GradientCoefficient::Linear),
            (-3.0..3.0f64).prop_map(GradientCoefficient::Sine),
        ]
    }

    prop_compose! {
        fn config()(
            seed in any::<u64>(),
            geo in prop_oneof![Just((0.0, 5usize)), Just((0.5, 8)), Just((0.25, 8)), Just((0.5, 16))],
            n_eps in 1usize..20,
            ladder in proptest::collection::btree_set(1usize..40, 1..5),
            steps in 1usize..500,
            dt in 1e-4..1e-1f64,
            b in -2.0..5.0f64,
            literal in any::<bool>(),
            kind in 0usize..5,
            f in expr(),
            c in -3.0..3.0f64,
            d in -3.0..3.0f64,
            p in 0.1..4.0f64,
            s in 0.0..4.0f64,
            h1 in coefficient(),
            h2 in coefficient(),
            modes in 1usize..64,
            decay in 0.0..4.0f64,
            amplitude in 0.0..1.0f64,
            g1 in expr(),
            u0 in expr(),
            v0 in prop_oneof![Just(BoundaryInit::Trace), (-2.0..2.0f64).prop_map(BoundaryInit::Constant)],
            macro_n in 2usize..200,
            inverse in any::<bool>(),
            cg in any::<bool>(),
            paths in 1usize..1000,
            independent in any::<bool>(),
            funcs in proptest::collection::vec(prop_oneof![
                Just(Functional::PathL2),
                (1u32..5, 1u32..5).prop_map(|(k, l)| Functional::Mode { k, l }),
            ], 1..4),
            out in proptest::option::of("[a-z][a-z0-9_/.-]{0,12}"),
            reuse in any::<bool>(),
        ) -> Config {
            let kinds = ["forcing", "lipschitz", "polynomial", "monotone", "gradient"];
            Config {
                seed,
                rho: geo.0,
                m: geo.1,
                n_eps,
                ladder: ladder.into_iter().collect(),
                final_time: steps as f64 * dt,
                dt,
                sample_times: vec![dt * (steps / 2) as f64],
                b,
                form: if literal { EffectiveForm::Literal } else { EffectiveForm::Consistent },
                drift: DriftConfig {
                    kind: kinds[kind].to_string(),
                    f, c, d, a: FieldExpr::Constant(1.5), p, s, h1, h2,
                },
                noise: SpectralNoiseSpec { modes, decay, amplitude, g1, g2: FieldExpr::ONE },
                u0,
                v0,
                macro_n,
                macro_ic: if inverse { MacroInitial::InverseTheta } else { MacroInitial::ThetaScaled },
                tensor: TensorSource::Solve,
                solver: if cg { SolverMethod::Cg } else { SolverMethod::Cholesky },
                paths,
                coupling: if independent { Coupling::Independent } else { Coupling::Shared },
                functionals: funcs,
                out_dir: out,
                reuse_macro: reuse,
                ..Config::default()
            }
        }
    }

    proptest! {
        #[test]
        fn text_round_trip(cfg in config()) {
            prop_assume!(cfg.validate().is_ok());
            let text = cfg.to_text();
            let back = Config::parse(&text).unwrap();
            prop_assert_eq!(&back, &cfg);
            prop_assert_eq!(back.to_text(), text);
        }
    }
}
