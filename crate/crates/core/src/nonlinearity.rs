//! Odd, C¹, piecewise-cubic sector nonlinearities.
//!
//! On `[0, x_last]` the map is a cubic Hermite spline through the knots;
//! beyond it is affine with slope `tail_slope`, and `φ(−x) = −φ(x)`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::feasibility::SectorSpec;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Knot {
    pub x: f64,
    pub y: f64,
    pub slope: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SectorNonlinearity {
    pub sector: SectorSpec,
    pub knots: Vec<Knot>,
    pub tail_slope: f64,
}

/// Design knots for `k_φ = 1`, `Δk_φ = 1/2`: unit slope at the origin, a
/// flat plateau on `[1.5, 2.3]`, a steep rise to `2.78`, a descending
/// stretch to `4.2`, then a join onto `x/2` at `6`.
const DESIGN: [(f64, f64, f64); 7] = [
    (0.0, 0.0, 1.0),
    (1.0, 1.0, 0.5),
    (1.5, 1.2, 0.0),
    (2.3, 1.2, 0.0),
    (2.78, 4.07, 0.0),
    (4.2, 2.4, 0.0),
    (6.0, 3.0, 0.5),
];
const DESIGN_DK: f64 = 0.5;
/// Stated derivative bound that the design knots respect.
pub const DESIGN_DERIV_BOUND: f64 = 9.02;

/// Local power-basis coefficients `φ(x₀ + s) = c₀ + c₁s + c₂s² + c₃s³`.
fn segment(k0: &Knot, k1: &Knot) -> [f64; 4] {
    let h = k1.x - k0.x;
    let d = (k1.y - k0.y) / h;
    [
        k0.y,
        k0.slope,
        (3.0 * d - 2.0 * k0.slope - k1.slope) / h,
        (k0.slope + k1.slope - 2.0 * d) / (h * h),
    ]
}

/// Critical points in `(0, h)` of `c₁ − c + 2c₂s + 3c₃s²`.
fn critical(c: &[f64; 4], shift: f64, h: f64) -> Vec<f64> {
    let (a, b, cc) = (3.0 * c[3], 2.0 * c[2], c[1] - shift);
    let mut out = Vec::new();
    if a.abs() < 1e-300 {
        if b != 0.0 {
            out.push(-cc / b);
        }
    } else {
        let disc = b * b - 4.0 * a * cc;
        if disc >= 0.0 {
            let r = disc.sqrt();
            out.push((-b - r) / (2.0 * a));
            out.push((-b + r) / (2.0 * a));
        }
    }
    out.retain(|s| *s > 0.0 && *s < h);
    out
}

fn poly(c: &[f64; 4], s: f64) -> f64 {
    c[0] + s * (c[1] + s * (c[2] + s * c[3]))
}

fn dpoly(c: &[f64; 4], s: f64) -> f64 {
    c[1] + s * (2.0 * c[2] + s * 3.0 * c[3])
}

impl SectorNonlinearity {
    pub fn new(sector: SectorSpec, knots: Vec<Knot>, tail_slope: f64) -> Result<Self> {
        if knots.len() < 2 || knots[0].x != 0.0 || knots[0].y != 0.0 {
            return Err(Error::Sector(
                "knots must start at the origin and contain at least two points".into(),
            ));
        }
        if knots.windows(2).any(|w| !(w[1].x > w[0].x)) {
            return Err(Error::Sector(
                "knot abscissae must be strictly increasing".into(),
            ));
        }
        let phi = SectorNonlinearity {
            sector,
            knots,
            tail_slope,
        };
        let report = validate_sector(&phi, &ValidationGrid::default());
        if !report.pass {
            return Err(Error::Sector(format!(
                "knot set violates the sector or derivative bound: lower margin {:.3e}, upper margin {:.3e}, sup|phi'| {:.4} vs bound {:.4}",
                report.worst_lower_margin, report.worst_upper_margin, report.deriv_sup_exact, sector.phi_deriv_bound
            )));
        }
        Ok(phi)
    }

    pub fn x_last(&self) -> f64 {
        self.knots.last().unwrap().x
    }

    fn locate(&self, ax: f64) -> Option<usize> {
        if ax >= self.x_last() {
            return None;
        }
        Some(self.knots.partition_point(|k| k.x <= ax).saturating_sub(1))
    }

    pub fn eval(&self, x: f64) -> f64 {
        if self.is_linear() {
            return self.sector.k_phi * x;
        }
        let ax = x.abs();
        let v = match self.locate(ax) {
            Some(i) => poly(
                &segment(&self.knots[i], &self.knots[i + 1]),
                ax - self.knots[i].x,
            ),
            None => {
                let last = self.knots.last().unwrap();
                last.y + self.tail_slope * (ax - last.x)
            }
        };
        v.copysign(x) * if x == 0.0 { 0.0 } else { 1.0 }
    }

    pub fn deriv(&self, x: f64) -> f64 {
        if self.is_linear() {
            return self.sector.k_phi;
        }
        let ax = x.abs();
        match self.locate(ax) {
            Some(i) => dpoly(
                &segment(&self.knots[i], &self.knots[i + 1]),
                ax - self.knots[i].x,
            ),
            None => self.tail_slope,
        }
    }

    /// `ψ(x) = φ(x) − k_φ x`.
    pub fn psi(&self, x: f64) -> f64 {
        self.eval(x) - self.sector.k_phi * x
    }

    pub fn is_linear(&self) -> bool {
        let k = self.sector.k_phi;
        self.tail_slope == k
            && self
                .knots
                .iter()
                .all(|kn| kn.slope == k && kn.y == k * kn.x)
    }

    /// Exact `sup |φ′|` from the per-segment quadratic derivative.
    pub fn deriv_sup(&self) -> f64 {
        let mut m = self.tail_slope.abs();
        for w in self.knots.windows(2) {
            let c = segment(&w[0], &w[1]);
            let h = w[1].x - w[0].x;
            m = m.max(dpoly(&c, 0.0).abs()).max(dpoly(&c, h).abs());
            if c[3] != 0.0 {
                let s = -c[2] / (3.0 * c[3]);
                if s > 0.0 && s < h {
                    m = m.max(dpoly(&c, s).abs());
                }
            }
        }
        m
    }

    /// Exact extrema over `x > 0` of `φ(x) − c x`: `(min, max)`.
    fn affine_gap_range(&self, c: f64) -> (f64, f64) {
        let mut lo = f64::INFINITY;
        let mut hi = f64::NEG_INFINITY;
        let mut take = |v: f64| {
            lo = lo.min(v);
            hi = hi.max(v);
        };
        for w in self.knots.windows(2) {
            let co = segment(&w[0], &w[1]);
            let h = w[1].x - w[0].x;
            take(w[1].y - c * w[1].x);
            for s in critical(&co, c, h) {
                take(poly(&co, s) - c * (w[0].x + s));
            }
        }
        (lo, hi)
    }

    /// All `x ≥ 0` on the spline part with `φ(x) = y`, by bisection on the
    /// monotone pieces of each segment.
    pub fn preimages(&self, y: f64) -> Vec<f64> {
        let mut out: Vec<f64> = Vec::new();
        for w in self.knots.windows(2) {
            let co = segment(&w[0], &w[1]);
            let h = w[1].x - w[0].x;
            let mut cuts = vec![0.0];
            cuts.extend(critical(&co, 0.0, h));
            cuts.push(h);
            cuts.sort_by(|a, b| a.total_cmp(b));
            for p in cuts.windows(2) {
                let (mut a, mut b) = (p[0], p[1]);
                let (fa, fb) = (poly(&co, a) - y, poly(&co, b) - y);
                if fa == 0.0 && fb == 0.0 {
                    continue;
                }
                if fa * fb > 0.0 {
                    continue;
                }
                let rising = fb > fa;
                for _ in 0..200 {
                    let m = 0.5 * (a + b);
                    if (poly(&co, m) - y > 0.0) == rising {
                        b = m;
                    } else {
                        a = m;
                    }
                }
                let x = w[0].x + 0.5 * (a + b);
                if out.iter().all(|o| (o - x).abs() > 1e-9) {
                    out.push(x);
                }
            }
        }
        out
    }
}

/// The reference sector nonlinearity for centre slope `k_phi` and
/// half-width `dk_phi`: `φ = k_φ x + (Δk_φ / ½) ψ₀` with `ψ₀` the design
/// deviation.
pub fn make_default_phi(k_phi: f64, dk_phi: f64) -> Result<SectorNonlinearity> {
    if !(k_phi > 0.0 && dk_phi > 0.0 && dk_phi < k_phi) {
        return Err(Error::Sector(format!(
            "need 0 < dk_phi < k_phi, got {k_phi}, {dk_phi}"
        )));
    }
    let r = dk_phi / DESIGN_DK;
    let knots: Vec<Knot> = DESIGN
        .iter()
        .map(|&(x, y, m)| Knot {
            x,
            y: k_phi * x + r * (y - x),
            slope: k_phi + r * (m - 1.0),
        })
        .collect();
    let tail_slope = k_phi - dk_phi;
    let draft = SectorNonlinearity {
        sector: SectorSpec {
            k_phi,
            dk_phi,
            phi_deriv_bound: f64::INFINITY,
        },
        knots,
        tail_slope,
    };
    let bound = if k_phi == 1.0 && dk_phi == DESIGN_DK {
        DESIGN_DERIV_BOUND
    } else {
        (draft.deriv_sup() * 100.0).ceil() / 100.0
    };
    let sector = SectorSpec::new(k_phi, dk_phi, bound)?;
    SectorNonlinearity::new(sector, draft.knots, tail_slope)
}

/// `φ(x) = k x`, reported against a nominal half-width `k/2`.
pub fn linear_phi(k: f64) -> Result<SectorNonlinearity> {
    if !(k > 0.0) {
        return Err(Error::Sector(format!("slope must be positive, got {k}")));
    }
    let sector = SectorSpec::new(k, 0.5 * k, k)?;
    SectorNonlinearity::new(
        sector,
        vec![
            Knot {
                x: 0.0,
                y: 0.0,
                slope: k,
            },
            Knot {
                x: 1.0,
                y: k,
                slope: k,
            },
        ],
        k,
    )
}

/// Remap about the centre line so the half-width becomes `new_dk`:
/// `φ_new = k_φ x + (new_dk / Δk_φ)(φ − k_φ x)`. The derivative bound is
/// re-measured.
pub fn rescale_sector(phi: &SectorNonlinearity, new_dk: f64) -> Result<SectorNonlinearity> {
    let k = phi.sector.k_phi;
    if !(new_dk > 0.0 && new_dk < k) {
        return Err(Error::Sector(format!(
            "new half-width {new_dk} outside (0, {k})"
        )));
    }
    if new_dk == phi.sector.dk_phi {
        return Ok(phi.clone());
    }
    let r = new_dk / phi.sector.dk_phi;
    let knots: Vec<Knot> = phi
        .knots
        .iter()
        .map(|kn| Knot {
            x: kn.x,
            y: k * kn.x + r * (kn.y - k * kn.x),
            slope: k + r * (kn.slope - k),
        })
        .collect();
    let tail_slope = k + r * (phi.tail_slope - k);
    let draft = SectorNonlinearity {
        sector: SectorSpec {
            k_phi: k,
            dk_phi: new_dk,
            phi_deriv_bound: f64::INFINITY,
        },
        knots,
        tail_slope,
    };
    let bound = (draft.deriv_sup() * 100.0).ceil() / 100.0;
    SectorNonlinearity::new(SectorSpec::new(k, new_dk, bound)?, draft.knots, tail_slope)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ValidationGrid {
    pub points: usize,
    pub extent: f64,
}

impl Default for ValidationGrid {
    fn default() -> Self {
        ValidationGrid {
            points: 20_001,
            extent: 120.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SectorReport {
    /// `min sign(x)φ(x) − (k−Δk)|x|` over the grid.
    pub worst_lower_margin: f64,
    /// `min (k+Δk)|x| − sign(x)φ(x)` over the grid.
    pub worst_upper_margin: f64,
    /// `min Δk²x² − ψ(x)²` over the grid.
    pub worst_psi_margin: f64,
    pub two_sided_pass: bool,
    pub psi_form_pass: bool,
    /// Exact per-segment check on the spline part.
    pub segments_pass: bool,
    /// Tail slope lies in `[k−Δk, k+Δk]` and the join point is inside.
    pub tail_pass: bool,
    /// Smallest relative margin at the interior knots.
    pub interior_knot_margin: f64,
    pub deriv_sup_sampled: f64,
    pub deriv_sup_exact: f64,
    pub deriv_bound_ok: bool,
    pub pass: bool,
}

pub fn validate_sector(phi: &SectorNonlinearity, grid: &ValidationGrid) -> SectorReport {
    let SectorSpec {
        k_phi: k,
        dk_phi: dk,
        phi_deriv_bound,
    } = phi.sector;
    let (lo_s, hi_s) = (k - dk, k + dk);
    let tol = |x: f64| 1e-12 * (1.0 + x.abs());
    let mut lower = f64::INFINITY;
    let mut upper = f64::INFINITY;
    let mut psi_m = f64::INFINITY;
    let (mut two_ok, mut psi_ok) = (true, true);
    let mut dsup: f64 = 0.0;
    let n = grid.points.max(3);
    for i in 0..n {
        let x = -grid.extent + 2.0 * grid.extent * i as f64 / (n - 1) as f64;
        let v = phi.eval(x);
        let sv = if x < 0.0 { -v } else { v };
        let l = sv - lo_s * x.abs();
        let u = hi_s * x.abs() - sv;
        let ps = psi_of(v, k, x);
        let pm = dk * dk * x * x - ps * ps;
        lower = lower.min(l);
        upper = upper.min(u);
        psi_m = psi_m.min(pm);
        two_ok &= l >= -tol(x) && u >= -tol(x);
        psi_ok &= pm >= -tol(x) * (1.0 + x * x);
        dsup = dsup.max(phi.deriv(x).abs());
    }
    let (seg_lo, _) = phi.affine_gap_range(lo_s);
    let (_, seg_hi) = phi.affine_gap_range(hi_s);
    let segments_pass = seg_lo >= -1e-12 && seg_hi <= 1e-12;
    let last = phi.knots.last().unwrap();
    let tail_pass = phi.tail_slope >= lo_s - 1e-15
        && phi.tail_slope <= hi_s + 1e-15
        && last.y >= lo_s * last.x - 1e-12
        && last.y <= hi_s * last.x + 1e-12;
    let interior_knot_margin = phi.knots[1..phi.knots.len() - 1]
        .iter()
        .map(|kn| ((kn.y - lo_s * kn.x).min(hi_s * kn.x - kn.y)) / kn.x)
        .fold(f64::INFINITY, f64::min);
    let deriv_sup_exact = phi.deriv_sup();
    let deriv_bound_ok = deriv_sup_exact <= phi_deriv_bound * (1.0 + 1e-12);
    SectorReport {
        worst_lower_margin: lower,
        worst_upper_margin: upper,
        worst_psi_margin: psi_m,
        two_sided_pass: two_ok,
        psi_form_pass: psi_ok,
        segments_pass,
        tail_pass,
        interior_knot_margin,
        deriv_sup_sampled: dsup,
        deriv_sup_exact,
        deriv_bound_ok,
        pass: two_ok && psi_ok && segments_pass && tail_pass && deriv_bound_ok,
    }
}

fn psi_of(v: f64, k: f64, x: f64) -> f64 {
    v - k * x
}
