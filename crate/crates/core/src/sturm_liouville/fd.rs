//! Second-order finite-volume discretisation of `𝒜` on a uniform grid.
//!
//! Robin ends use half cells, so the discrete operator is `W⁻¹K` with `K`
//! symmetric tridiagonal and `W` the trapezoid weights. With `θ₂ = 0` the
//! node at `x = 1` is eliminated and its value enters through `input`.

use super::OperatorSpec;
use crate::error::{Error, Result};

#[derive(Clone, Debug)]
pub struct FdOperator {
    pub nodes: usize,
    pub h: f64,
    pub x: Vec<f64>,
    /// Number of free unknowns (`nodes`, or `nodes - 1` with a Dirichlet end).
    pub unknowns: usize,
    pub diag: Vec<f64>,
    pub off: Vec<f64>,
    pub weights: Vec<f64>,
    /// Right-hand-side coefficient multiplying the boundary datum.
    pub input: Vec<f64>,
    pub dirichlet_right: bool,
    face_p: Vec<f64>,
    q_nodes: Vec<f64>,
    left_robin: f64,
    right_robin: f64,
}

impl FdOperator {
    pub fn new(spec: &OperatorSpec, nodes: usize) -> Result<Self> {
        if nodes < 5 {
            return Err(Error::InvalidSpec(format!(
                "finite-difference mesh needs at least 5 nodes, got {nodes}"
            )));
        }
        let h = 1.0 / (nodes - 1) as f64;
        let x: Vec<f64> = (0..nodes).map(|i| i as f64 * h).collect();
        let face_p: Vec<f64> = (0..nodes - 1)
            .map(|i| spec.p.eval((i as f64 + 0.5) * h))
            .collect();
        let q_nodes: Vec<f64> = x.iter().map(|&xi| spec.q(xi)).collect();
        let dirichlet_right = spec.theta2 == 0.0;
        let left_robin = spec.p.eval(0.0) * spec.theta1.cos() / spec.theta1.sin();
        let right_robin = if dirichlet_right {
            0.0
        } else {
            spec.p.eval(1.0) * spec.theta2.cos() / spec.theta2.sin()
        };

        let mut weights = vec![h; nodes];
        weights[0] = 0.5 * h;
        weights[nodes - 1] = 0.5 * h;
        let mut diag: Vec<f64> = (0..nodes).map(|i| weights[i] * q_nodes[i]).collect();
        let mut off = vec![0.0; nodes - 1];
        for i in 0..nodes - 1 {
            let c = face_p[i] / h;
            diag[i] += c;
            diag[i + 1] += c;
            off[i] = -c;
        }
        diag[0] += left_robin;
        diag[nodes - 1] += right_robin;

        let mut input = vec![0.0; nodes];
        let unknowns = if dirichlet_right {
            input[nodes - 2] = face_p[nodes - 2] / h;
            diag.truncate(nodes - 1);
            off.truncate(nodes - 2);
            weights.truncate(nodes - 1);
            input.truncate(nodes - 1);
            nodes - 1
        } else {
            input[nodes - 1] = spec.p.eval(1.0) / spec.theta2.sin();
            nodes
        };
        // Trapezoid weights for the full grid are needed by the norms even
        // when the last node is eliminated.
        Ok(FdOperator {
            nodes,
            h,
            x,
            unknowns,
            diag,
            off,
            weights,
            input,
            dirichlet_right,
            face_p,
            q_nodes,
            left_robin,
            right_robin,
        })
    }

    /// `K z` on the free unknowns.
    pub fn apply(&self, z: &[f64]) -> Vec<f64> {
        let n = self.unknowns;
        (0..n)
            .map(|i| {
                let mut v = self.diag[i] * z[i];
                if i > 0 {
                    v += self.off[i - 1] * z[i - 1];
                }
                if i + 1 < n {
                    v += self.off[i] * z[i + 1];
                }
                v
            })
            .collect()
    }

    /// Discrete energy `⟨𝒜w, w⟩` of a full-grid function.
    pub fn energy(&self, w: &[f64]) -> f64 {
        let h = self.h;
        let n = self.nodes;
        let mut e = 0.0;
        for i in 0..n - 1 {
            let d = w[i + 1] - w[i];
            e += self.face_p[i] * d * d / h;
        }
        for i in 0..n {
            let wt = if i == 0 || i == n - 1 { 0.5 * h } else { h };
            e += wt * self.q_nodes[i] * w[i] * w[i];
        }
        e + self.left_robin * w[0] * w[0] + self.right_robin * w[n - 1] * w[n - 1]
    }
}

/// Trapezoid inner product on a uniform full grid.
pub fn trapezoid_dot(h: f64, a: &[f64], b: &[f64]) -> f64 {
    let n = a.len();
    let inner: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    h * (inner - 0.5 * (a[0] * b[0] + a[n - 1] * b[n - 1]))
}

/// Lowest `count` eigenvalues of the discrete operator (Sturm bisection on
/// the symmetrised tridiagonal matrix).
pub fn fd_eigenvalues(spec: &OperatorSpec, nodes: usize, count: usize) -> Result<Vec<f64>> {
    let op = FdOperator::new(spec, nodes)?;
    let n = op.unknowns;
    if count > n {
        return Err(Error::NotEnoughModes(format!(
            "{count} eigenvalues requested from {n} unknowns"
        )));
    }
    let a: Vec<f64> = (0..n).map(|i| op.diag[i] / op.weights[i]).collect();
    let b2: Vec<f64> = (0..n - 1)
        .map(|i| op.off[i] * op.off[i] / (op.weights[i] * op.weights[i + 1]))
        .collect();
    let count_below = |x: f64| -> usize {
        let mut c = 0;
        let mut d = a[0] - x;
        if d < 0.0 {
            c += 1;
        }
        for i in 1..n {
            let prev = if d == 0.0 { f64::EPSILON } else { d };
            d = a[i] - x - b2[i - 1] / prev;
            if d < 0.0 {
                c += 1;
            }
        }
        c
    };
    let mut lo0 = f64::INFINITY;
    let mut hi0 = f64::NEG_INFINITY;
    for i in 0..n {
        let r =
            if i > 0 { b2[i - 1].sqrt() } else { 0.0 } + if i + 1 < n { b2[i].sqrt() } else { 0.0 };
        lo0 = lo0.min(a[i] - r);
        hi0 = hi0.max(a[i] + r);
    }
    Ok((0..count)
        .map(|k| {
            let (mut lo, mut hi) = (lo0, hi0);
            while hi - lo > 1e-14 * hi.abs().max(lo.abs()).max(1.0) {
                let mid = 0.5 * (lo + hi);
                if count_below(mid) > k {
                    hi = mid;
                } else {
                    lo = mid;
                }
            }
            0.5 * (lo + hi)
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::coeff::Coefficient;
    use std::f64::consts::PI;

    fn plant() -> OperatorSpec {
        OperatorSpec::new(
            PI / 2.0,
            0.0,
            Coefficient::Constant(1.0),
            Coefficient::Constant(-3.0),
            4.0,
        )
        .unwrap()
    }

    #[test]
    fn fd_eigenvalues_converge_at_second_order() {
        let spec = plant();
        let exact = |n: usize| ((2 * n - 1) as f64 * PI / 2.0).powi(2) + 1.0;
        let e1 = fd_eigenvalues(&spec, 101, 3).unwrap();
        let e2 = fd_eigenvalues(&spec, 201, 3).unwrap();
        for n in 1..=3 {
            let r = (e1[n - 1] - exact(n)).abs() / (e2[n - 1] - exact(n)).abs();
            assert!((r - 4.0).abs() < 0.2, "mode {n}: ratio {r}");
        }
    }

    #[test]
    fn energy_of_constant_matches_reaction_integral() {
        let spec = OperatorSpec::new(
            PI / 2.0,
            PI / 2.0,
            Coefficient::Constant(1.0),
            Coefficient::Constant(1.0),
            1.0,
        )
        .unwrap();
        let op = FdOperator::new(&spec, 51).unwrap();
        let w = vec![1.0; 51];
        assert!((op.energy(&w) - 2.0).abs() < 1e-12);
        let kz = op.apply(&w);
        let total: f64 = kz.iter().sum();
        assert!((total - 2.0).abs() < 1e-12);
    }

    #[test]
    fn trapezoid_integrates_linear_exactly() {
        let h = 0.01;
        let x: Vec<f64> = (0..=100).map(|i| i as f64 * h).collect();
        let one = vec![1.0; 101];
        assert!((trapezoid_dot(h, &x, &one) - 0.5).abs() < 1e-14);
    }
}
