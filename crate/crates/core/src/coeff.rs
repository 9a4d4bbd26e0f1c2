//! Coefficient functions on `[0, 1]`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Polynomial `Σ c_k (x - start)^k` valid on `[start, end]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PolyPiece {
    pub start: f64,
    pub end: f64,
    pub coeffs: Vec<f64>,
}

impl PolyPiece {
    fn eval(&self, x: f64) -> f64 {
        let s = x - self.start;
        self.coeffs.iter().rev().fold(0.0, |acc, &c| acc * s + c)
    }

    fn deriv(&self, x: f64) -> f64 {
        let s = x - self.start;
        let mut acc = 0.0;
        for (k, &c) in self.coeffs.iter().enumerate().skip(1).rev() {
            acc = acc * s + k as f64 * c;
        }
        acc
    }
}

/// A coefficient: either a named constant or a piecewise polynomial table.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Coefficient {
    Constant(f64),
    Piecewise(Vec<PolyPiece>),
}

impl From<f64> for Coefficient {
    fn from(c: f64) -> Self {
        Coefficient::Constant(c)
    }
}

impl Coefficient {
    /// Single polynomial on the whole interval, coefficients in powers of `x`.
    pub fn polynomial(coeffs: Vec<f64>) -> Self {
        Coefficient::Piecewise(vec![PolyPiece {
            start: 0.0,
            end: 1.0,
            coeffs,
        }])
    }

    pub fn is_constant(&self) -> bool {
        match self {
            Coefficient::Constant(_) => true,
            Coefficient::Piecewise(pieces) => {
                let c0 = pieces.first().and_then(|p| p.coeffs.first()).copied();
                pieces.iter().all(|p| {
                    p.coeffs.first().copied() == c0 && p.coeffs.iter().skip(1).all(|&c| c == 0.0)
                })
            }
        }
    }

    fn piece(pieces: &[PolyPiece], x: f64) -> &PolyPiece {
        pieces
            .iter()
            .find(|p| x <= p.end)
            .unwrap_or_else(|| pieces.last().expect("validated non-empty"))
    }

    pub fn eval(&self, x: f64) -> f64 {
        match self {
            Coefficient::Constant(c) => *c,
            Coefficient::Piecewise(pieces) => Self::piece(pieces, x).eval(x),
        }
    }

    pub fn deriv(&self, x: f64) -> f64 {
        match self {
            Coefficient::Constant(_) => 0.0,
            Coefficient::Piecewise(pieces) => Self::piece(pieces, x).deriv(x),
        }
    }

    /// The coefficient plus a constant.
    pub fn shifted(&self, c: f64) -> Self {
        match self {
            Coefficient::Constant(v) => Coefficient::Constant(v + c),
            Coefficient::Piecewise(pieces) => Coefficient::Piecewise(
                pieces
                    .iter()
                    .map(|p| {
                        let mut coeffs = p.coeffs.clone();
                        if coeffs.is_empty() {
                            coeffs.push(0.0);
                        }
                        coeffs[0] += c;
                        PolyPiece {
                            coeffs,
                            ..p.clone()
                        }
                    })
                    .collect(),
            ),
        }
    }

    /// Check that the table covers `[0, 1]` contiguously with finite data.
    pub fn validate(&self, name: &str) -> Result<()> {
        match self {
            Coefficient::Constant(c) if c.is_finite() => Ok(()),
            Coefficient::Constant(c) => {
                Err(Error::InvalidSpec(format!("{name} = {c} is not finite")))
            }
            Coefficient::Piecewise(pieces) => {
                if pieces.is_empty() {
                    return Err(Error::InvalidSpec(format!("{name}: empty piecewise table")));
                }
                let tol = 1e-12;
                if pieces[0].start.abs() > tol {
                    return Err(Error::InvalidSpec(format!(
                        "{name}: first piece must start at 0"
                    )));
                }
                if (pieces[pieces.len() - 1].end - 1.0).abs() > tol {
                    return Err(Error::InvalidSpec(format!(
                        "{name}: last piece must end at 1"
                    )));
                }
                for (i, p) in pieces.iter().enumerate() {
                    if !(p.end > p.start)
                        || p.coeffs.is_empty()
                        || p.coeffs.iter().any(|c| !c.is_finite())
                    {
                        return Err(Error::InvalidSpec(format!("{name}: malformed piece {i}")));
                    }
                    if i > 0 && (p.start - pieces[i - 1].end).abs() > tol {
                        return Err(Error::InvalidSpec(format!(
                            "{name}: gap between pieces {} and {i}",
                            i - 1
                        )));
                    }
                }
                Ok(())
            }
        }
    }

    /// Minimum and maximum over a dense sample including piece boundaries.
    pub fn range(&self) -> (f64, f64) {
        match self {
            Coefficient::Constant(c) => (*c, *c),
            Coefficient::Piecewise(pieces) => {
                let mut xs: Vec<f64> = (0..=4000).map(|i| i as f64 / 4000.0).collect();
                for p in pieces {
                    xs.push(p.start);
                    xs.push(p.end);
                }
                xs.iter()
                    .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &x| {
                        let v = self.eval(x);
                        (lo.min(v), hi.max(v))
                    })
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn polynomial_eval_and_derivative() {
        let c = Coefficient::polynomial(vec![2.0, 0.0, 3.0]);
        assert_relative_eq!(c.eval(0.5), 2.75);
        assert_relative_eq!(c.deriv(0.5), 3.0);
        assert!(!c.is_constant());
        assert!(Coefficient::polynomial(vec![4.0, 0.0]).is_constant());
    }

    #[test]
    fn piecewise_lookup_uses_local_variable() {
        let c = Coefficient::Piecewise(vec![
            PolyPiece {
                start: 0.0,
                end: 0.5,
                coeffs: vec![1.0, 2.0],
            },
            PolyPiece {
                start: 0.5,
                end: 1.0,
                coeffs: vec![2.0, -2.0],
            },
        ]);
        c.validate("p").unwrap();
        assert_relative_eq!(c.eval(0.25), 1.5);
        assert_relative_eq!(c.eval(0.75), 1.5);
        assert_relative_eq!(c.deriv(0.75), -2.0);
        let (lo, hi) = c.range();
        assert_relative_eq!(lo, 1.0);
        assert_relative_eq!(hi, 2.0);
    }

    #[test]
    fn validation_rejects_gaps() {
        let c = Coefficient::Piecewise(vec![
            PolyPiece {
                start: 0.0,
                end: 0.4,
                coeffs: vec![1.0],
            },
            PolyPiece {
                start: 0.5,
                end: 1.0,
                coeffs: vec![1.0],
            },
        ]);
        assert!(c.validate("q").is_err());
        assert!(Coefficient::Constant(f64::NAN).validate("q").is_err());
    }

    #[test]
    fn shift_adds_constant() {
        let c = Coefficient::polynomial(vec![1.0, 1.0]).shifted(3.0);
        assert_relative_eq!(c.eval(1.0), 5.0);
        assert_eq!(
            Coefficient::Constant(-3.0).shifted(4.0),
            Coefficient::Constant(1.0)
        );
    }
}
