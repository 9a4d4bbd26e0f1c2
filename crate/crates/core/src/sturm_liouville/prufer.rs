//! Shooting with a piecewise-constant coefficient approximation.
//!
//! On every cell `p` and `q` are frozen at the cell midpoint, so the local
//! problem `-(p f')' + q f = λ f` has a closed-form solution. Propagating
//! `(f, g = p f')` cell by cell is exact for constant coefficients and
//! second-order accurate (uniformly in λ) otherwise. The continuous Prüfer
//! angle of `(f, g)` counts zeros of `f` and is monotone in λ.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use super::OperatorSpec;

/// Midpoint-frozen coefficients on `cells` uniform cells of `[0, 1]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CellMesh {
    pub h: f64,
    pub p: Vec<f64>,
    pub q: Vec<f64>,
}

impl CellMesh {
    pub fn new(spec: &OperatorSpec, cells: usize) -> Self {
        let h = 1.0 / cells as f64;
        let (p, q) = (0..cells)
            .map(|i| {
                let x = (i as f64 + 0.5) * h;
                (spec.p.eval(x), spec.q(x))
            })
            .unzip();
        CellMesh { h, p, q }
    }

    pub fn cells(&self) -> usize {
        self.p.len()
    }
}

/// Exact solution of the frozen-coefficient ODE after a distance `s`.
#[inline]
pub fn advance(p: f64, q: f64, lam: f64, s: f64, f: f64, g: f64) -> (f64, f64) {
    let k2 = (lam - q) / p;
    if k2 > 0.0 {
        let k = k2.sqrt();
        let (sn, cs) = (k * s).sin_cos();
        (cs * f + sn * g / (p * k), -p * k * sn * f + cs * g)
    } else if k2 < 0.0 {
        let kap = (-k2).sqrt();
        let (sh, ch) = ((kap * s).sinh(), (kap * s).cosh());
        (ch * f + sh * g / (p * kap), p * kap * sh * f + ch * g)
    } else {
        (f + s * g / p, g)
    }
}

/// Angle of `(f, g)` reduced to `[0, π)`.
#[inline]
fn reduced(f: f64, g: f64) -> f64 {
    let a = f.atan2(g);
    if a < 0.0 {
        a + PI
    } else if a >= PI {
        a - PI
    } else {
        a
    }
}

/// Initial data `(f(0), p(0) f'(0))` satisfying the left boundary condition.
pub fn initial_state(spec: &OperatorSpec) -> (f64, f64) {
    (spec.theta1.sin(), spec.p.eval(0.0) * spec.theta1.cos())
}

/// Reduced target angle encoding the right boundary condition.
pub fn right_angle(spec: &OperatorSpec) -> f64 {
    spec.theta2
        .sin()
        .atan2(-spec.p.eval(1.0) * spec.theta2.cos())
}

/// Continuous Prüfer angle at `x = 1` for the solution started at `(f0, g0)`.
pub fn shoot(mesh: &CellMesh, lam: f64, f0: f64, g0: f64) -> f64 {
    let h = mesh.h;
    let (mut f, mut g) = (f0, g0);
    let mut turns = 0.0_f64;
    let mut r = reduced(f, g);
    for i in 0..mesh.cells() {
        let (p, q) = (mesh.p[i], mesh.q[i]);
        let k2 = (lam - q) / p;
        if k2 > 0.0 {
            // In the scaled variables (p k f, g) the angle advances by exactly k h.
            let k = k2.sqrt();
            let sigma = p * k;
            let rs = (sigma * r.sin()).atan2(r.cos());
            let total = rs + k * h;
            let t = (total / PI).floor();
            let rs_end = total - t * PI;
            turns += t;
            r = rs_end.sin().atan2(sigma * rs_end.cos());
            (f, g) = advance(p, q, lam, h, f, g);
        } else {
            let (f1, g1) = advance(p, q, lam, h, f, g);
            let expected = if (turns as i64) % 2 == 0 { 1.0 } else { -1.0 };
            if f1 * expected <= 0.0 {
                turns += 1.0;
            }
            r = reduced(f1, g1);
            (f, g) = (f1, g1);
        }
        let m = f.abs() + g.abs();
        if !(1e-150..=1e150).contains(&m) {
            f /= m;
            g /= m;
        }
    }
    turns * PI + r
}

/// `∫_0^h f(s)^2 ds` for the local solution started at `(f, g)`.
pub fn cell_f2(p: f64, q: f64, lam: f64, h: f64, f: f64, g: f64) -> f64 {
    let k2 = (lam - q) / p;
    let kh = k2.abs().sqrt() * h;
    if kh <= 0.25 {
        let mut acc = 0.0;
        for (xi, wi) in GL8 {
            let s = 0.5 * h * (1.0 + xi);
            let (fs, _) = advance(p, q, lam, s, f, g);
            acc += wi * fs * fs;
        }
        return 0.5 * h * acc;
    }
    let k = k2.abs().sqrt();
    let a = f;
    let b = g / (p * k);
    if k2 > 0.0 {
        let s2 = (2.0 * kh).sin() / (4.0 * k);
        let sn = kh.sin();
        a * a * (0.5 * h + s2) + b * b * (0.5 * h - s2) + a * b * sn * sn / k
    } else {
        let s2 = (2.0 * kh).sinh() / (4.0 * k);
        let sh = kh.sinh();
        a * a * (0.5 * h + s2) + b * b * (s2 - 0.5 * h) + a * b * sh * sh / k
    }
}

/// Eight-point Gauss–Legendre nodes and weights on `[-1, 1]`.
pub const GL8: [(f64, f64); 8] = [
    (-0.960_289_856_497_536_3, 0.101_228_536_290_376_26),
    (-0.796_666_477_413_626_7, 0.222_381_034_453_374_47),
    (-0.525_532_409_916_329, 0.313_706_645_877_887_3),
    (-0.183_434_642_495_649_8, 0.362_683_783_378_362),
    (0.183_434_642_495_649_8, 0.362_683_783_378_362),
    (0.525_532_409_916_329, 0.313_706_645_877_887_3),
    (0.796_666_477_413_626_7, 0.222_381_034_453_374_47),
    (0.960_289_856_497_536_3, 0.101_228_536_290_376_26),
];

/// Propagate several modes together and visit Gauss nodes of a common panel
/// subdivision. `visit(x, weight, values)` receives one value per mode.
pub fn quadrature_walk<F>(mesh: &CellMesh, modes: &[(f64, f64, f64)], mut visit: F)
where
    F: FnMut(f64, f64, &[f64]),
{
    let h = mesh.h;
    let mut states: Vec<(f64, f64)> = modes.iter().map(|&(_, f, g)| (f, g)).collect();
    let mut values = vec![0.0; modes.len()];
    for i in 0..mesh.cells() {
        let (p, q) = (mesh.p[i], mesh.q[i]);
        let kmax = modes
            .iter()
            .map(|&(lam, _, _)| ((lam - q) / p).abs().sqrt())
            .fold(0.0, f64::max);
        let panels = ((kmax * h / 0.5).ceil() as usize).max(1);
        let ph = h / panels as f64;
        let x0 = i as f64 * h;
        for j in 0..panels {
            for (xi, wi) in GL8 {
                let s = (j as f64 + 0.5 * (1.0 + xi)) * ph;
                for (m, &(lam, _, _)) in modes.iter().enumerate() {
                    let (f, g) = states[m];
                    values[m] = advance(p, q, lam, s, f, g).0;
                }
                visit(x0 + s, 0.5 * ph * wi, &values);
            }
        }
        for (m, &(lam, _, _)) in modes.iter().enumerate() {
            let (f, g) = states[m];
            states[m] = advance(p, q, lam, h, f, g);
        }
    }
}

/// Locate the `n`-th eigenvalue (1-based) of the piecewise-constant problem
/// inside `[lo, hi]`, expanding the bracket if needed.
pub fn find_eigenvalue(
    mesh: &CellMesh,
    n: usize,
    f0: f64,
    g0: f64,
    target_reduced: f64,
    mut lo: f64,
    mut hi: f64,
) -> Result<f64, String> {
    let target = target_reduced + (n as f64 - 1.0) * PI;
    let gfun = |lam: f64| shoot(mesh, lam, f0, g0) - target;
    let mut glo = gfun(lo);
    let mut tries = 0;
    while glo > 0.0 {
        lo -= 1.0 + lo.abs();
        glo = gfun(lo);
        tries += 1;
        if tries > 80 {
            return Err(format!("cannot bracket mode {n} from below"));
        }
    }
    let mut ghi = gfun(hi);
    tries = 0;
    while ghi < 0.0 {
        hi += 1.0 + hi.abs();
        ghi = gfun(hi);
        tries += 1;
        if tries > 80 {
            return Err(format!("cannot bracket mode {n} from above"));
        }
    }
    // Illinois regula falsi with bisection safeguard.
    let mut side = 0i8;
    for _ in 0..300 {
        if glo == 0.0 {
            return Ok(lo);
        }
        if ghi == 0.0 {
            return Ok(hi);
        }
        let width = hi - lo;
        if width <= 4.0 * f64::EPSILON * lo.abs().max(hi.abs()).max(1e-300) {
            break;
        }
        let mut x = (lo * ghi - hi * glo) / (ghi - glo);
        if !(x > lo && x < hi) || !x.is_finite() {
            x = 0.5 * (lo + hi);
        }
        let gx = gfun(x);
        if gx.abs() <= 1e-14 * target.abs().max(1.0) {
            return Ok(x);
        }
        if gx < 0.0 {
            lo = x;
            glo = gx;
            if side == -1 {
                ghi *= 0.5;
            }
            side = -1;
        } else {
            hi = x;
            ghi = gx;
            if side == 1 {
                glo *= 0.5;
            }
            side = 1;
        }
        // Guard against slow one-sided convergence.
        if hi - lo > 0.5 * width {
            let mid = 0.5 * (lo + hi);
            let gm = gfun(mid);
            if gm < 0.0 {
                lo = mid;
                glo = gm;
            } else {
                hi = mid;
                ghi = gm;
            }
            side = 0;
        }
    }
    Ok(if glo.abs() < ghi.abs() { lo } else { hi })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn advance_matches_cosine_solution() {
        // f'' = -k^2 f with f(0)=1, f'(0)=0.
        let (p, q, lam) = (1.0, 1.0, 5.0);
        let k = 2.0_f64;
        let (f, g) = advance(p, q, lam, 0.3, 1.0, 0.0);
        assert!((f - (k * 0.3).cos()).abs() < 1e-15);
        assert!((g + k * (k * 0.3).sin()).abs() < 1e-15);
        let (f, g) = advance(1.0, 5.0, 1.0, 0.3, 1.0, 0.0);
        assert!((f - (2.0 * 0.3_f64).cosh()).abs() < 1e-14);
        assert!((g - 2.0 * (2.0 * 0.3_f64).sinh()).abs() < 1e-14);
    }

    #[test]
    fn cell_integral_agrees_between_branches() {
        for &(lam, h) in &[(3.0, 0.2), (3.0, 0.05), (400.0, 0.5), (-20.0, 0.5)] {
            let exact = cell_f2(1.0, 1.0, lam, h, 0.7, -0.4);
            let mut acc = 0.0;
            let m = 4000;
            for j in 0..m {
                let s = (j as f64 + 0.5) * h / m as f64;
                let f = advance(1.0, 1.0, lam, s, 0.7, -0.4).0;
                acc += f * f * h / m as f64;
            }
            assert!(
                (exact - acc).abs() < 1e-7 * acc.abs().max(1.0),
                "{lam} {h}: {exact} vs {acc}"
            );
        }
    }

    #[test]
    fn gauss_weights_sum_to_two() {
        let s: f64 = GL8.iter().map(|&(_, w)| w).sum();
        assert!((s - 2.0).abs() < 1e-14);
        let m4: f64 = GL8.iter().map(|&(x, w)| w * x.powi(14)).sum();
        assert!((m4 - 2.0 / 15.0).abs() < 1e-14);
    }
}
