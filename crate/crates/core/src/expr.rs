//! Closed-form spatial fields used for forcing, noise multipliers,
//! reaction coefficients and initial data.

use std::f64::consts::PI;
use std::fmt;
use std::str::FromStr;

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
#[error("invalid field expression `{0}`: expected a number, const(c), sines(amp,k,l) or linear(c0,cx,cy)")]
pub struct ExprParseError(pub String);

/// A field on the unit square drawn from a fixed catalog.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum FieldExpr {
    Constant(f64),
    /// `amp · sin(kπx) · sin(lπy)`
    SineProduct {
        amp: f64,
        k: u32,
        l: u32,
    },
    /// `c0 + cx·x + cy·y`
    Linear {
        c0: f64,
        cx: f64,
        cy: f64,
    },
}

impl FieldExpr {
    pub const ZERO: FieldExpr = FieldExpr::Constant(0.0);
    pub const ONE: FieldExpr = FieldExpr::Constant(1.0);

    pub fn eval(&self, x: f64, y: f64) -> f64 {
        match *self {
            FieldExpr::Constant(c) => c,
            FieldExpr::SineProduct { amp, k, l } => {
                amp * (k as f64 * PI * x).sin() * (l as f64 * PI * y).sin()
            }
            FieldExpr::Linear { c0, cx, cy } => c0 + cx * x + cy * y,
        }
    }

    pub fn is_zero(&self) -> bool {
        match *self {
            FieldExpr::Constant(c) => c == 0.0,
            FieldExpr::SineProduct { amp, .. } => amp == 0.0,
            FieldExpr::Linear { c0, cx, cy } => c0 == 0.0 && cx == 0.0 && cy == 0.0,
        }
    }

    /// Bounds `(min, max)` over the closed unit square.
    pub fn bounds(&self) -> (f64, f64) {
        match *self {
            FieldExpr::Constant(c) => (c, c),
            FieldExpr::SineProduct { amp, k, l } => {
                // Both factors vanish on the boundary; the range is [−|amp|, |amp|]
                // unless both factors keep a sign, which only happens for k = l = 1.
                if k == 1 && l == 1 {
                    (amp.min(0.0), amp.max(0.0))
                } else {
                    (-amp.abs(), amp.abs())
                }
            }
            FieldExpr::Linear { c0, cx, cy } => {
                let corners = [c0, c0 + cx, c0 + cy, c0 + cx + cy];
                corners
                    .iter()
                    .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| {
                        (lo.min(v), hi.max(v))
                    })
            }
        }
    }

    pub fn is_finite(&self) -> bool {
        match *self {
            FieldExpr::Constant(c) => c.is_finite(),
            FieldExpr::SineProduct { amp, .. } => amp.is_finite(),
            FieldExpr::Linear { c0, cx, cy } => c0.is_finite() && cx.is_finite() && cy.is_finite(),
        }
    }
}

impl fmt::Display for FieldExpr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match *self {
            FieldExpr::Constant(c) => write!(f, "const({c:?})"),
            FieldExpr::SineProduct { amp, k, l } => write!(f, "sines({amp:?},{k},{l})"),
            FieldExpr::Linear { c0, cx, cy } => write!(f, "linear({c0:?},{cx:?},{cy:?})"),
        }
    }
}

/// Splits `name(a,b,c)` into its name and argument list.
pub(crate) fn call_syntax(s: &str) -> Option<(&str, Vec<&str>)> {
    let s = s.trim();
    let open = s.find('(')?;
    if !s.ends_with(')') {
        return None;
    }
    let name = s[..open].trim();
    let inner = &s[open + 1..s.len() - 1];
    let args = if inner.trim().is_empty() {
        Vec::new()
    } else {
        inner.split(',').map(str::trim).collect()
    };
    Some((name, args))
}

impl FromStr for FieldExpr {
    type Err = ExprParseError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let err = || ExprParseError(s.to_string());
        if let Ok(c) = s.trim().parse::<f64>() {
            return Ok(FieldExpr::Constant(c));
        }
        let (name, args) = call_syntax(s).ok_or_else(err)?;
        let num = |i: usize| {
            args.get(i)
                .and_then(|a| a.parse::<f64>().ok())
                .ok_or_else(err)
        };
        let int = |i: usize| {
            args.get(i)
                .and_then(|a| a.parse::<u32>().ok())
                .filter(|&v| v > 0)
                .ok_or_else(err)
        };
        let expr = match (name, args.len()) {
            ("const", 1) => FieldExpr::Constant(num(0)?),
            ("sines", 3) => FieldExpr::SineProduct {
                amp: num(0)?,
                k: int(1)?,
                l: int(2)?,
            },
            ("linear", 3) => FieldExpr::Linear {
                c0: num(0)?,
                cx: num(1)?,
                cy: num(2)?,
            },
            _ => return Err(err()),
        };
        if expr.is_finite() {
            Ok(expr)
        } else {
            Err(err())
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parse_and_display_round_trip() {
        for text in ["const(1.5)", "sines(2.0,1,3)", "linear(0.0,1.0,-2.5)"] {
            let e: FieldExpr = text.parse().unwrap();
            assert_eq!(e.to_string().parse::<FieldExpr>().unwrap(), e);
        }
        assert_eq!("3".parse::<FieldExpr>().unwrap(), FieldExpr::Constant(3.0));
        assert!("sines(1,0,1)".parse::<FieldExpr>().is_err());
        assert!("cosh(1)".parse::<FieldExpr>().is_err());
    }

    #[test]
    fn bounds_of_catalog() {
        assert_eq!(
            FieldExpr::Linear {
                c0: 1.0,
                cx: -1.0,
                cy: 2.0
            }
            .bounds(),
            (0.0, 3.0)
        );
        assert_eq!(
            FieldExpr::SineProduct {
                amp: 2.0,
                k: 1,
                l: 1
            }
            .bounds(),
            (0.0, 2.0)
        );
        assert_eq!(
            FieldExpr::SineProduct {
                amp: 2.0,
                k: 2,
                l: 1
            }
            .bounds(),
            (-2.0, 2.0)
        );
    }

    #[test]
    fn sine_product_value() {
        let e = FieldExpr::SineProduct {
            amp: 1.0,
            k: 1,
            l: 1,
        };
        assert!((e.eval(0.5, 0.5) - 1.0).abs() < 1e-15);
        assert!(e.eval(0.0, 0.3).abs() < 1e-15);
    }
}
