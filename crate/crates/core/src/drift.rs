//! Drift catalog for the microscopic equation and the matching effective drifts.
//!
//! Every entry is dissipative: the drift pairs non-positively with `u`.
//! For the cube-root entry this means `f(u) = −s·∛u`.

use std::fmt;
use std::str::FromStr;

use thiserror::Error;

use crate::cell::CorrectorField;
use crate::expr::{call_syntax, FieldExpr};
use crate::geometry::CellGrid;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DriftError {
    #[error("gradient drift needs a gradient field")]
    MissingGradient,
    #[error("non-finite input at entry {0}")]
    NonFinite(usize),
    #[error("input lengths disagree: {0}")]
    Shape(String),
    #[error("invalid drift parameters: {0}")]
    Invalid(String),
}

/// `h_c(u)` for one gradient component.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum GradientCoefficient {
    /// `c·u`
    Linear(f64),
    /// `c·sin(u)`
    Sine(f64),
}

impl GradientCoefficient {
    pub const ZERO: GradientCoefficient = GradientCoefficient::Linear(0.0);

    pub fn eval(&self, u: f64) -> f64 {
        match *self {
            GradientCoefficient::Linear(c) => c * u,
            GradientCoefficient::Sine(c) => c * u.sin(),
        }
    }

    /// Lipschitz constant in `u`.
    pub fn lipschitz(&self) -> f64 {
        match *self {
            GradientCoefficient::Linear(c) | GradientCoefficient::Sine(c) => c.abs(),
        }
    }
}

impl fmt::Display for GradientCoefficient {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match *self {
            GradientCoefficient::Linear(c) => write!(f, "linear({c:?})"),
            GradientCoefficient::Sine(c) => write!(f, "sine({c:?})"),
        }
    }
}

impl FromStr for GradientCoefficient {
    type Err = DriftError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let err = || DriftError::Invalid(format!("`{s}`: expected linear(c) or sine(c)"));
        if let Ok(c) = s.trim().parse::<f64>() {
            return Ok(GradientCoefficient::Linear(c));
        }
        let (name, args) = call_syntax(s).ok_or_else(err)?;
        let c = match args.as_slice() {
            [a] => a.parse::<f64>().map_err(|_| err())?,
            _ => return Err(err()),
        };
        if !c.is_finite() {
            return Err(err());
        }
        match name {
            "linear" => Ok(GradientCoefficient::Linear(c)),
            "sine" => Ok(GradientCoefficient::Sine(c)),
            _ => Err(err()),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum DriftSpec {
    /// `f(x)`, independent of the state.
    Forcing { f: FieldExpr },
    /// `c·u + d·sin(u)`
    Lipschitz { c: f64, d: f64 },
    /// `−a(x)·|u|^p·u`
    Polynomial { a: FieldExpr, p: f64 },
    /// `−s·∛u`
    MonotoneSublinear { s: f64 },
    /// `h(u)·∇u`
    Gradient { h: [GradientCoefficient; 2] },
}

impl Default for DriftSpec {
    fn default() -> Self {
        DriftSpec::Forcing { f: FieldExpr::ZERO }
    }
}

impl DriftSpec {
    pub fn kind(&self) -> &'static str {
        match self {
            DriftSpec::Forcing { .. } => "forcing",
            DriftSpec::Lipschitz { .. } => "lipschitz",
            DriftSpec::Polynomial { .. } => "polynomial",
            DriftSpec::MonotoneSublinear { .. } => "monotone",
            DriftSpec::Gradient { .. } => "gradient",
        }
    }

    pub fn needs_gradient(&self) -> bool {
        matches!(self, DriftSpec::Gradient { .. })
    }

    /// True when the drift vanishes identically.
    pub fn is_zero(&self) -> bool {
        match self {
            DriftSpec::Forcing { f } => f.is_zero(),
            DriftSpec::Lipschitz { c, d } => *c == 0.0 && *d == 0.0,
            DriftSpec::Polynomial { a, .. } => a.is_zero(),
            DriftSpec::MonotoneSublinear { s } => *s == 0.0,
            DriftSpec::Gradient { h } => h.iter().all(|c| c.lipschitz() == 0.0),
        }
    }

    pub fn validate(&self) -> Result<(), DriftError> {
        let bad = |m: String| Err(DriftError::Invalid(m));
        match *self {
            DriftSpec::Forcing { f } if !f.is_finite() => bad("forcing is not finite".into()),
            DriftSpec::Lipschitz { c, d } if !(c.is_finite() && d.is_finite()) => {
                bad("lipschitz constants must be finite".into())
            }
            DriftSpec::Polynomial { a, p } => {
                let (lo, hi) = a.bounds();
                if !(p > 0.0 && p.is_finite()) {
                    bad(format!("exponent p must be positive, got {p}"))
                } else if !(lo > 0.0 && hi.is_finite()) {
                    bad(format!("coefficient a must be bounded below by a positive constant, range [{lo}, {hi}]"))
                } else {
                    Ok(())
                }
            }
            DriftSpec::MonotoneSublinear { s } if !(s >= 0.0 && s.is_finite()) => {
                bad(format!("s must be non-negative, got {s}"))
            }
            DriftSpec::Gradient { h } if h.iter().any(|c| !c.lipschitz().is_finite()) => {
                bad("gradient coefficients must be finite".into())
            }
            _ => Ok(()),
        }
    }

    /// Pointwise value at position `(x, y)` with state `u` and gradient `g`.
    pub fn value(&self, x: f64, y: f64, u: f64, g: [f64; 2]) -> f64 {
        match *self {
            DriftSpec::Forcing { f } => f.eval(x, y),
            DriftSpec::Lipschitz { c, d } => c * u + d * u.sin(),
            DriftSpec::Polynomial { a, p } => -a.eval(x, y) * u.abs().powf(p) * u,
            DriftSpec::MonotoneSublinear { s } => -s * u.cbrt(),
            DriftSpec::Gradient { h } => h[0].eval(u) * g[0] + h[1].eval(u) * g[1],
        }
    }
}

/// How the effective drift reads the macroscopic state.
///
/// `U` approximates the zero extension `ϑ·u`, so the limit of `f(u)` is
/// `f(U/ϑ)` and the surface reaction is `bλU/ϑ` ([`EffectiveForm::Consistent`]).
/// [`EffectiveForm::Literal`] evaluates `f(U)` and `bλU` instead.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum EffectiveForm {
    #[default]
    Consistent,
    Literal,
}

impl EffectiveForm {
    pub fn name(&self) -> &'static str {
        match self {
            EffectiveForm::Consistent => "consistent",
            EffectiveForm::Literal => "literal",
        }
    }

    /// Factor applied to `U` before it enters `f` or `h`.
    pub fn state_scale(&self, theta: f64) -> f64 {
        match self {
            EffectiveForm::Consistent => 1.0 / theta,
            EffectiveForm::Literal => 1.0,
        }
    }

    /// Coefficient of `U` in the surface reaction term.
    pub fn reaction(&self, b: f64, theta: f64, lambda: f64) -> f64 {
        match self {
            EffectiveForm::Consistent => b * lambda / theta,
            EffectiveForm::Literal => b * lambda,
        }
    }
}

impl FromStr for EffectiveForm {
    type Err = DriftError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim() {
            "consistent" => Ok(EffectiveForm::Consistent),
            "literal" => Ok(EffectiveForm::Literal),
            other => Err(DriftError::Invalid(format!(
                "form `{other}`: expected consistent or literal"
            ))),
        }
    }
}

fn check_inputs(
    spec: &DriftSpec,
    points: &[(f64, f64)],
    u: &[f64],
    grad: Option<&[[f64; 2]]>,
) -> Result<(), DriftError> {
    if points.len() != u.len() {
        return Err(DriftError::Shape(format!(
            "{} points, {} values",
            points.len(),
            u.len()
        )));
    }
    if spec.needs_gradient() {
        let g = grad.ok_or(DriftError::MissingGradient)?;
        if g.len() != u.len() {
            return Err(DriftError::Shape(format!(
                "{} values, {} gradients",
                u.len(),
                g.len()
            )));
        }
        if let Some(i) = g
            .iter()
            .position(|v| !(v[0].is_finite() && v[1].is_finite()))
        {
            return Err(DriftError::NonFinite(i));
        }
    }
    if let Some(i) = u.iter().position(|v| !v.is_finite()) {
        return Err(DriftError::NonFinite(i));
    }
    Ok(())
}

/// Evaluates the microscopic drift at `points`.
///
/// Catalog entries are time-independent; `t` is accepted for interface symmetry.
pub fn eval_drift(
    spec: &DriftSpec,
    _t: f64,
    points: &[(f64, f64)],
    u: &[f64],
    grad: Option<&[[f64; 2]]>,
) -> Result<Vec<f64>, DriftError> {
    check_inputs(spec, points, u, grad)?;
    Ok(points
        .iter()
        .zip(u)
        .enumerate()
        .map(|(k, (&(x, y), &v))| spec.value(x, y, v, grad.map_or([0.0; 2], |g| g[k])))
        .collect())
}

/// Evaluates the effective drift: `ϑ·f(U)` for state drifts and `h(U)·(M∇U)`
/// for the gradient drift, with `U` rescaled according to `form`.
#[allow(clippy::too_many_arguments)]
pub fn eval_effective_drift(
    spec: &DriftSpec,
    form: EffectiveForm,
    theta: f64,
    m: [[f64; 2]; 2],
    _t: f64,
    points: &[(f64, f64)],
    u: &[f64],
    grad: Option<&[[f64; 2]]>,
) -> Result<Vec<f64>, DriftError> {
    check_inputs(spec, points, u, grad)?;
    let scale = form.state_scale(theta);
    Ok(points
        .iter()
        .zip(u)
        .enumerate()
        .map(|(k, (&(x, y), &v))| match spec {
            DriftSpec::Gradient { h } => {
                let g = grad.map_or([0.0; 2], |g| g[k]);
                let mg = [
                    m[0][0] * g[0] + m[0][1] * g[1],
                    m[1][0] * g[0] + m[1][1] * g[1],
                ];
                let w = v * scale;
                h[0].eval(w) * mg[0] + h[1].eval(w) * mg[1]
            }
            _ => theta * spec.value(x, y, v * scale, [0.0; 2]),
        })
        .collect())
}

/// Cell average `(1/|Y|)∫_{Y*} h·ϑ⁻¹(∇U + Σ_i ∂_iU·∇φ_i)` by edge quadrature.
///
/// `h` holds the already evaluated coefficients `h_c(U)`.
pub fn cell_average_fstar_oracle(
    h: [f64; 2],
    grad_u: [f64; 2],
    correctors: &[CorrectorField; 2],
    grid: &CellGrid,
    theta: f64,
) -> f64 {
    let m = grid.resolution();
    let dh = grid.spacing();
    let value =
        |c: &CorrectorField, i: usize, j: usize| grid.dof(i, j).map_or(0.0, |d| c.values[d]);
    let mut total = 0.0;
    for j in 0..m {
        for i in 0..m {
            for (axis, w, next) in [
                (0, grid.x_edge_weight(i, j), (i + 1, j)),
                (1, grid.y_edge_weight(i, j), (i, j + 1)),
            ] {
                if w == 0.0 {
                    continue;
                }
                // component `axis` of ∇U + Σ_i ∂_iU ∇φ_i on this edge, times its area w·h²
                let mut flux = dh * grad_u[axis];
                for (k, c) in correctors.iter().enumerate() {
                    flux += grad_u[k] * (value(c, next.0, next.1) - value(c, i, j));
                }
                total += h[axis] * w * dh * flux;
            }
        }
    }
    total / theta
}
