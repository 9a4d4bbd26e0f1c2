//! The Sturm–Liouville operator `𝒜f = −(pf′)′ + qf` on `(0, 1)` with
//! `cos θ₁ f(0) − sin θ₁ f′(0) = 0` and `cos θ₂ f(1) + sin θ₂ f′(1) = 0`.

pub mod fd;
pub mod prufer;

use std::f64::consts::{FRAC_PI_2, PI};

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::coeff::Coefficient;
use crate::error::{Error, Result};
use crate::par::{self, Execution};
use prufer::CellMesh;

/// Default number of grid nodes for sampled eigenfunctions.
pub const DEFAULT_GRID: usize = 2001;
/// Shooting cells per grid interval when coefficients vary.
pub const VARIABLE_SUBSTEPS: usize = 4;
/// Shooting cells used for high tail modes when coefficients vary.
pub const TAIL_CELLS: usize = 512;

const ANGLE_SLACK: f64 = 1e-12;

/// The plant operator with its reaction split `q̃ = q − q_c`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OperatorSpec {
    pub theta1: f64,
    pub theta2: f64,
    pub p: Coefficient,
    pub q_tilde: Coefficient,
    pub q_c: f64,
    pub grid_resolution: usize,
}

/// Sampled coefficient bounds `p_* ≤ p ≤ p^*`, `q_* ≤ q ≤ q^*`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CoefficientBounds {
    pub p_lower: f64,
    pub p_upper: f64,
    pub q_lower: f64,
    pub q_upper: f64,
}

impl OperatorSpec {
    pub fn new(
        theta1: f64,
        theta2: f64,
        p: impl Into<Coefficient>,
        q_tilde: impl Into<Coefficient>,
        q_c: f64,
    ) -> Result<Self> {
        let spec = OperatorSpec {
            theta1: clamp_angle(theta1),
            theta2: clamp_angle(theta2),
            p: p.into(),
            q_tilde: q_tilde.into(),
            q_c,
            grid_resolution: DEFAULT_GRID,
        };
        spec.validate()?;
        Ok(spec)
    }

    /// Build with `q_c` chosen by [`crate::synthesis::select_qc`].
    pub fn with_auto_split(
        theta1: f64,
        theta2: f64,
        p: impl Into<Coefficient>,
        q_tilde: impl Into<Coefficient>,
    ) -> Result<Self> {
        let q_tilde = q_tilde.into();
        let (_, q_c) = crate::synthesis::select_qc(&q_tilde);
        Self::new(theta1, theta2, p, q_tilde, q_c)
    }

    /// Dirichlet-measured, Dirichlet-actuated unit-diffusion plant with a
    /// constant reaction term (the benchmark used throughout the tests).
    pub fn reference_plant(q_tilde: f64) -> Self {
        Self::with_auto_split(FRAC_PI_2, 0.0, 1.0, q_tilde).expect("reference plant is valid")
    }

    pub fn with_grid(mut self, nodes: usize) -> Result<Self> {
        self.grid_resolution = nodes;
        self.validate()?;
        Ok(self)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.theta1 > 0.0 && self.theta1 <= FRAC_PI_2) {
            return Err(Error::InvalidSpec(format!(
                "theta1 = {} outside the admissible range (0, pi/2]",
                self.theta1
            )));
        }
        if !(self.theta2 >= 0.0 && self.theta2 <= FRAC_PI_2) {
            return Err(Error::InvalidSpec(format!(
                "theta2 = {} outside the admissible range [0, pi/2]",
                self.theta2
            )));
        }
        self.p.validate("p")?;
        self.q_tilde.validate("q_tilde")?;
        if !self.q_c.is_finite() {
            return Err(Error::InvalidSpec("q_c must be finite".into()));
        }
        if self.grid_resolution < 5 {
            return Err(Error::InvalidSpec(format!(
                "grid_resolution = {} must be at least 5",
                self.grid_resolution
            )));
        }
        let b = self.bounds();
        if !(b.p_lower > 0.0) {
            return Err(Error::InvalidSpec(format!(
                "p must be positive, min p = {}",
                b.p_lower
            )));
        }
        if !(b.q_lower > 0.0) {
            return Err(Error::InvalidSpec(format!(
                "q = q_tilde + q_c must be positive, min q = {} (increase q_c)",
                b.q_lower
            )));
        }
        Ok(())
    }

    /// `q(x) = q̃(x) + q_c`.
    pub fn q(&self, x: f64) -> f64 {
        self.q_tilde.eval(x) + self.q_c
    }

    pub fn q_coefficient(&self) -> Coefficient {
        self.q_tilde.shifted(self.q_c)
    }

    pub fn bounds(&self) -> CoefficientBounds {
        let (p_lower, p_upper) = self.p.range();
        let (q_lower, q_upper) = self.q_coefficient().range();
        CoefficientBounds {
            p_lower,
            p_upper,
            q_lower,
            q_upper,
        }
    }

    pub fn has_constant_coefficients(&self) -> bool {
        self.p.is_constant() && self.q_tilde.is_constant()
    }

    pub fn grid(&self) -> Vec<f64> {
        let h = 1.0 / (self.grid_resolution - 1) as f64;
        (0..self.grid_resolution).map(|i| i as f64 * h).collect()
    }

    /// `cos θ₂ + 2 sin θ₂`, the denominator of the boundary lifting.
    pub fn lifting_denominator(&self) -> f64 {
        self.theta2.cos() + 2.0 * self.theta2.sin()
    }

    /// Eigenvalue bracket `[π²(n−1)²p_*, π²n²p^* + q^*]` for 1-based `n`.
    pub fn eigenvalue_bracket(&self, n: usize) -> (f64, f64) {
        let b = self.bounds();
        let m = n as f64;
        (
            PI * PI * (m - 1.0).powi(2) * b.p_lower,
            PI * PI * m * m * b.p_upper + b.q_upper,
        )
    }

    fn substeps(&self) -> usize {
        if self.has_constant_coefficients() {
            1
        } else {
            VARIABLE_SUBSTEPS
        }
    }

    fn sample_mesh(&self) -> CellMesh {
        CellMesh::new(self, (self.grid_resolution - 1) * self.substeps())
    }

    fn root_mesh(&self, variable_cells: usize) -> CellMesh {
        if self.has_constant_coefficients() {
            CellMesh::new(self, 1)
        } else {
            CellMesh::new(self, variable_cells)
        }
    }
}

fn clamp_angle(theta: f64) -> f64 {
    if theta > FRAC_PI_2 && theta <= FRAC_PI_2 + ANGLE_SLACK {
        FRAC_PI_2
    } else {
        theta
    }
}

/// How a basis was produced.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BasisMethod {
    Shooting,
    ClosedForm,
}

/// Eigenpairs of `𝒜` with traces and grid samples (unit `L²` norm).
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SpectralBasis {
    pub n_modes: usize,
    pub lambdas: Vec<f64>,
    pub phi0: Vec<f64>,
    pub phi1: Vec<f64>,
    pub dphi1: Vec<f64>,
    pub grid: Vec<f64>,
    /// `samples[n][i] = φ_{n+1}(x_i)`.
    pub samples: Vec<Vec<f64>>,
    /// `flux[n][i] = p(x_i) φ′_{n+1}(x_i)`.
    pub flux: Vec<Vec<f64>>,
    pub method: BasisMethod,
    mesh: CellMesh,
    substeps: usize,
}

impl SpectralBasis {
    /// `(λ_n, φ_n(0), p(0)φ_n′(0))` for the 0-based mode index.
    pub fn initial_state(&self, n: usize) -> (f64, f64, f64) {
        (self.lambdas[n], self.samples[n][0], self.flux[n][0])
    }

    /// Evaluate `(φ, pφ′)` of the 0-based mode `n` at `x` by local propagation.
    pub fn eval_with_flux(&self, n: usize, x: f64) -> (f64, f64) {
        let cells_per = self.substeps;
        let hg = 1.0 / (self.grid.len() - 1) as f64;
        let x = x.clamp(0.0, 1.0);
        let i = ((x / hg).floor() as usize).min(self.grid.len() - 2);
        let (mut f, mut g) = (self.samples[n][i], self.flux[n][i]);
        let lam = self.lambdas[n];
        let mut pos = self.grid[i];
        let h = self.mesh.h;
        for c in i * cells_per..(i + 1) * cells_per {
            let s = (x - pos).min(h);
            if s <= 0.0 {
                break;
            }
            (f, g) = prufer::advance(self.mesh.p[c], self.mesh.q[c], lam, s, f, g);
            pos += h;
        }
        (f, g)
    }

    pub fn eval(&self, n: usize, x: f64) -> f64 {
        self.eval_with_flux(n, x).0
    }

    /// `⟨fun, φ_n⟩` for each 0-based mode in `modes`, by panel Gauss quadrature.
    pub fn project(&self, modes: &[usize], fun: impl Fn(f64) -> f64) -> Vec<f64> {
        let init: Vec<(f64, f64, f64)> = modes.iter().map(|&n| self.initial_state(n)).collect();
        let mut acc = vec![0.0; modes.len()];
        prufer::quadrature_walk(&self.mesh, &init, |x, w, vals| {
            let fx = fun(x);
            for (a, v) in acc.iter_mut().zip(vals) {
                *a += w * fx * v;
            }
        });
        acc
    }

    /// Accurate `∫_0^1 fun(x)^2 dx` on the basis quadrature panels.
    pub fn integrate_sq(&self, fun: impl Fn(f64) -> f64) -> f64 {
        let mut acc = 0.0;
        prufer::quadrature_walk(&self.mesh, &[(0.0, 0.0, 0.0)], |x, w, _| {
            let v = fun(x);
            acc += w * v * v;
        });
        acc
    }

    /// Gram matrix of the first `m` modes.
    pub fn gram(&self, m: usize) -> DMatrix<f64> {
        let init: Vec<(f64, f64, f64)> = (0..m).map(|n| self.initial_state(n)).collect();
        let mut g = DMatrix::zeros(m, m);
        prufer::quadrature_walk(&self.mesh, &init, |_, w, vals| {
            for i in 0..m {
                let wi = w * vals[i];
                for j in i..m {
                    g[(i, j)] += wi * vals[j];
                }
            }
        });
        for i in 0..m {
            for j in 0..i {
                g[(i, j)] = g[(j, i)];
            }
        }
        g
    }

    /// Replace the eigenvalue list (for constructing deliberately broken
    /// bases in diagnostics tests).
    pub fn with_lambdas(mut self, lambdas: Vec<f64>) -> Self {
        self.lambdas = lambdas;
        self
    }
}

/// Numerical eigenpairs by exact-propagator shooting.
pub fn solve_eigenproblem(spec: &OperatorSpec, n_modes: usize) -> Result<SpectralBasis> {
    solve_eigenproblem_with(spec, n_modes, Execution::default())
}

pub fn solve_eigenproblem_with(
    spec: &OperatorSpec,
    n_modes: usize,
    exec: Execution,
) -> Result<SpectralBasis> {
    spec.validate()?;
    if n_modes == 0 {
        return Err(Error::InvalidSpec("n_modes must be at least 1".into()));
    }
    let sample_mesh = spec.sample_mesh();
    let root_mesh = spec.root_mesh(sample_mesh.cells());
    let (f0, g0) = prufer::initial_state(spec);
    let target = prufer::right_angle(spec);
    let substeps = spec.substeps();
    let p1 = spec.p.eval(1.0);

    let modes = par::map_range(exec, n_modes, |idx| -> Result<ModeData> {
        let n = idx + 1;
        let (lower, upper) = spec.eigenvalue_bracket(n);
        let lam = prufer::find_eigenvalue(&root_mesh, n, f0, g0, target, lower, upper)
            .map_err(|reason| Error::EigenNonConvergence { mode: n, reason })?;
        check_bracket(n, lam, lower, upper)?;
        Ok(sample_mode(&sample_mesh, substeps, lam, f0, g0, p1))
    });
    let modes: Vec<ModeData> = modes.into_iter().collect::<Result<_>>()?;

    for w in modes.windows(2) {
        if !(w[1].lambda > w[0].lambda) {
            return Err(Error::EigenNonConvergence {
                mode: 0,
                reason: "eigenvalues not strictly increasing".into(),
            });
        }
    }
    Ok(assemble_basis(
        spec,
        modes,
        sample_mesh,
        substeps,
        BasisMethod::Shooting,
    ))
}

fn check_bracket(n: usize, lam: f64, lower: f64, upper: f64) -> Result<()> {
    let slack = 1e-10 * upper.abs().max(1.0);
    if lam < lower - slack || lam > upper + slack {
        return Err(Error::BracketViolation {
            mode: n,
            lambda: lam,
            lower,
            upper,
        });
    }
    Ok(())
}

struct ModeData {
    lambda: f64,
    samples: Vec<f64>,
    flux: Vec<f64>,
    phi1: f64,
    dphi1: f64,
}

fn sample_mode(mesh: &CellMesh, substeps: usize, lam: f64, f0: f64, g0: f64, p1: f64) -> ModeData {
    let cells = mesh.cells();
    let nodes = cells / substeps + 1;
    let mut samples = Vec::with_capacity(nodes);
    let mut flux = Vec::with_capacity(nodes);
    let (mut f, mut g) = (f0, g0);
    let mut norm2 = 0.0;
    samples.push(f);
    flux.push(g);
    for c in 0..cells {
        let (p, q) = (mesh.p[c], mesh.q[c]);
        norm2 += prufer::cell_f2(p, q, lam, mesh.h, f, g);
        (f, g) = prufer::advance(p, q, lam, mesh.h, f, g);
        if (c + 1) % substeps == 0 {
            samples.push(f);
            flux.push(g);
        }
    }
    let s = 1.0 / norm2.sqrt();
    samples.iter_mut().for_each(|v| *v *= s);
    flux.iter_mut().for_each(|v| *v *= s);
    ModeData {
        lambda: lam,
        phi1: f * s,
        dphi1: g * s / p1,
        samples,
        flux,
    }
}

fn assemble_basis(
    spec: &OperatorSpec,
    modes: Vec<ModeData>,
    mesh: CellMesh,
    substeps: usize,
    method: BasisMethod,
) -> SpectralBasis {
    let n_modes = modes.len();
    let mut basis = SpectralBasis {
        n_modes,
        lambdas: Vec::with_capacity(n_modes),
        phi0: Vec::with_capacity(n_modes),
        phi1: Vec::with_capacity(n_modes),
        dphi1: Vec::with_capacity(n_modes),
        grid: spec.grid(),
        samples: Vec::with_capacity(n_modes),
        flux: Vec::with_capacity(n_modes),
        method,
        mesh,
        substeps,
    };
    for m in modes {
        basis.lambdas.push(m.lambda);
        basis.phi0.push(m.samples[0]);
        basis.phi1.push(m.phi1);
        basis.dphi1.push(m.dphi1);
        basis.samples.push(m.samples);
        basis.flux.push(m.flux);
    }
    basis
}

/// Analytic eigenpairs for constant `p` and `q`.
///
/// With `k² = (λ − q)/p` the scaled angle of `(k f, f′)` grows by exactly `k`
/// over `[0, 1]`, so mode `n` solves
/// `atan2(k sin θ₁, cos θ₁) + k = atan2(k sin θ₂, −cos θ₂) + (n−1)π`,
/// whose left side minus right side increases in `k`.
pub fn closed_form_basis(spec: &OperatorSpec, n_modes: usize) -> Result<SpectralBasis> {
    spec.validate()?;
    if !spec.has_constant_coefficients() {
        return Err(Error::InvalidSpec(
            "closed-form basis needs constant p and q".into(),
        ));
    }
    let p = spec.p.eval(0.5);
    let q = spec.q(0.5);
    let (s1, c1) = (spec.theta1.sin(), spec.theta1.cos());
    let (s2, c2) = (spec.theta2.sin(), spec.theta2.cos());
    let neumann_both = spec.theta1 == FRAC_PI_2 && spec.theta2 == FRAC_PI_2;
    let grid = spec.grid();

    let modes = (1..=n_modes)
        .map(|n| -> Result<ModeData> {
            let k = if neumann_both {
                (n as f64 - 1.0) * PI
            } else {
                let h =
                    |k: f64| (k * s1).atan2(c1) + k - (k * s2).atan2(-c2) - (n as f64 - 1.0) * PI;
                let (mut lo, mut hi) = ((n as f64 - 1.0) * PI, n as f64 * PI);
                if lo == 0.0 {
                    lo = f64::MIN_POSITIVE;
                }
                if h(lo) > 0.0 || h(hi) < 0.0 {
                    return Err(Error::RootBracket(format!(
                        "characteristic equation, mode {n}"
                    )));
                }
                for _ in 0..200 {
                    let mid = 0.5 * (lo + hi);
                    if mid <= lo || mid >= hi {
                        break;
                    }
                    if h(mid) < 0.0 {
                        lo = mid;
                    } else {
                        hi = mid;
                    }
                }
                0.5 * (lo + hi)
            };
            let lam = p * k * k + q;
            // f = A cos kx + B sin kx with A = sin θ₁, B k = cos θ₁.
            let (a, bk) = (s1, c1);
            let norm2 = if k == 0.0 {
                a * a
            } else if k < 1e-3 {
                let b = bk / k;
                let s2k = 0.5 - (2.0 * k).sin() / (4.0 * k);
                a * a * (1.0 - s2k) + b * b * s2k + a * b * k.sin().powi(2) / k
            } else {
                let b = bk / k;
                let r = (2.0 * k).sin() / (4.0 * k);
                a * a * (0.5 + r) + b * b * (0.5 - r) + a * b * k.sin().powi(2) / k
            };
            let s = 1.0 / norm2.sqrt();
            let eval = |x: f64| -> (f64, f64) {
                if k == 0.0 {
                    (a * s, 0.0)
                } else {
                    let (sn, cs) = (k * x).sin_cos();
                    ((a * cs + bk / k * sn) * s, p * (-a * k * sn + bk * cs) * s)
                }
            };
            let (samples, flux): (Vec<f64>, Vec<f64>) = grid.iter().map(|&x| eval(x)).unzip();
            let (f1, g1) = eval(1.0);
            Ok(ModeData {
                lambda: lam,
                samples,
                flux,
                phi1: f1,
                dphi1: g1 / p,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let mesh = CellMesh::new(spec, spec.grid_resolution - 1);
    Ok(assemble_basis(
        spec,
        modes,
        mesh,
        1,
        BasisMethod::ClosedForm,
    ))
}

/// Per-mode diagnostics of a computed basis.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct BasisReport {
    /// Defect against re-integration on a mesh twice as fine, plus the
    /// right boundary-condition mismatch scaled by `1 + √λ`.
    pub residuals: Vec<f64>,
    pub max_residual: f64,
    pub gram_deviation: f64,
    pub bracket_ok: Vec<bool>,
    pub monotone: bool,
    pub residual_tolerance: f64,
    pub gram_tolerance: f64,
    pub pass: bool,
}

pub fn verify_basis(basis: &SpectralBasis, spec: &OperatorSpec) -> BasisReport {
    let residual_tolerance = 1e-6;
    let gram_tolerance = 1e-8;
    let fine = CellMesh::new(spec, basis.mesh.cells() * 2);
    let sub = basis.substeps * 2;
    let hg = 1.0 / (basis.grid.len() - 1) as f64;
    let (s2, c2) = (spec.theta2.sin(), spec.theta2.cos());
    let p1 = spec.p.eval(1.0);

    let residuals: Vec<f64> = (0..basis.n_modes)
        .map(|n| {
            let (lam, f0, g0) = basis.initial_state(n);
            let (mut f, mut g) = (f0, g0);
            let mut defect2 = 0.0;
            let last = basis.grid.len() - 1;
            for c in 0..fine.cells() {
                (f, g) = prufer::advance(fine.p[c], fine.q[c], lam, fine.h, f, g);
                if (c + 1) % sub == 0 {
                    let i = (c + 1) / sub;
                    let d = f - basis.samples[n][i];
                    let w = if i == last { 0.5 } else { 1.0 };
                    defect2 += w * hg * d * d;
                }
            }
            let bc = (c2 * f + s2 * g / p1).abs() / (1.0 + lam.abs().sqrt());
            defect2.sqrt().max(bc)
        })
        .collect();
    let max_residual = residuals.iter().copied().fold(0.0, f64::max);

    let gram = basis.gram(basis.n_modes);
    let gram_deviation = (&gram - DMatrix::identity(basis.n_modes, basis.n_modes))
        .abs()
        .max();

    let bracket_ok: Vec<bool> = basis
        .lambdas
        .iter()
        .enumerate()
        .map(|(i, &lam)| {
            let (lo, hi) = spec.eigenvalue_bracket(i + 1);
            let slack = 1e-10 * hi.max(1.0);
            lam >= lo - slack && lam <= hi + slack
        })
        .collect();
    let monotone = basis.lambdas.windows(2).all(|w| w[1] > w[0]);
    let pass = monotone
        && bracket_ok.iter().all(|&b| b)
        && max_residual <= residual_tolerance
        && gram_deviation <= gram_tolerance;
    BasisReport {
        residuals,
        max_residual,
        gram_deviation,
        bracket_ok,
        monotone,
        residual_tolerance,
        gram_tolerance,
        pass,
    }
}

/// `(λ_n, φ_n(0))` for 1-based modes `from..=to`, without grid samples.
pub fn boundary_traces(
    spec: &OperatorSpec,
    from: usize,
    to: usize,
    exec: Execution,
) -> Result<Vec<(f64, f64)>> {
    spec.validate()?;
    if from == 0 || to < from {
        return Ok(Vec::new());
    }
    let mesh = spec.root_mesh(TAIL_CELLS);
    let (f0, g0) = prufer::initial_state(spec);
    let target = prufer::right_angle(spec);
    let out = par::map_range(exec, to - from + 1, |i| -> Result<(f64, f64)> {
        let n = from + i;
        let (lower, upper) = spec.eigenvalue_bracket(n);
        let lam = prufer::find_eigenvalue(&mesh, n, f0, g0, target, lower, upper)
            .map_err(|reason| Error::EigenNonConvergence { mode: n, reason })?;
        let (mut f, mut g) = (f0, g0);
        let mut norm2 = 0.0;
        for c in 0..mesh.cells() {
            norm2 += prufer::cell_f2(mesh.p[c], mesh.q[c], lam, mesh.h, f, g);
            (f, g) = prufer::advance(mesh.p[c], mesh.q[c], lam, mesh.h, f, g);
        }
        Ok((lam, f0 / norm2.sqrt()))
    });
    out.into_iter().collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::coeff::PolyPiece;
    use approx::assert_relative_eq;

    fn plant() -> OperatorSpec {
        OperatorSpec::new(FRAC_PI_2, 0.0, 1.0, -3.0, 4.0).unwrap()
    }

    fn exact_lambda(n: usize) -> f64 {
        ((2 * n - 1) as f64 * PI / 2.0).powi(2) + 1.0
    }

    fn variable_spec() -> OperatorSpec {
        OperatorSpec::new(
            1.0,
            0.4,
            Coefficient::polynomial(vec![1.0, 0.5, 0.25]),
            Coefficient::Piecewise(vec![
                PolyPiece {
                    start: 0.0,
                    end: 0.5,
                    coeffs: vec![-2.0, 4.0],
                },
                PolyPiece {
                    start: 0.5,
                    end: 1.0,
                    coeffs: vec![0.0, -1.0],
                },
            ]),
            4.0,
        )
        .unwrap()
    }

    #[test]
    fn first_modes_match_cosine_family() {
        let b = solve_eigenproblem(&plant(), 5).unwrap();
        assert_relative_eq!(b.lambdas[0], 3.467_401_100_272_339_7, max_relative = 1e-12);
        assert_relative_eq!(b.phi0[0], 2f64.sqrt(), max_relative = 1e-12);
        for n in 1..=5 {
            assert_relative_eq!(b.lambdas[n - 1], exact_lambda(n), max_relative = 1e-12);
            let sign = if n % 2 == 1 { 1.0 } else { -1.0 };
            let mu = (2 * n - 1) as f64 * PI / 2.0;
            assert_relative_eq!(
                b.dphi1[n - 1],
                -2f64.sqrt() * sign * mu,
                max_relative = 1e-10
            );
            assert!(b.phi1[n - 1].abs() < 1e-10);
        }
    }

    #[test]
    fn closed_form_matches_formula_and_shift_identity() {
        let spec = plant();
        let cf = closed_form_basis(&spec, 2).unwrap();
        assert_relative_eq!(cf.lambdas[1], 23.206_609_902_451_06, max_relative = 1e-12);
        let mut shifted = spec.clone();
        shifted.q_c += 2.5;
        let cf2 = closed_form_basis(&shifted, 2).unwrap();
        for n in 0..2 {
            assert_relative_eq!(cf2.lambdas[n] - cf.lambdas[n], 2.5, max_relative = 1e-12);
            for i in (0..spec.grid_resolution).step_by(97) {
                assert!((cf2.samples[n][i] - cf.samples[n][i]).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn closed_form_handles_general_angles() {
        for &(t1, t2) in &[
            (0.3, 0.0),
            (1.0, 1.2),
            (FRAC_PI_2, FRAC_PI_2),
            (0.7, FRAC_PI_2),
        ] {
            let spec = OperatorSpec::new(t1, t2, 2.0, 0.5, 1.0).unwrap();
            let cf = closed_form_basis(&spec, 8).unwrap();
            let num = solve_eigenproblem(&spec, 8).unwrap();
            for n in 0..8 {
                assert_relative_eq!(num.lambdas[n], cf.lambdas[n], max_relative = 1e-11);
                assert_relative_eq!(
                    num.phi0[n],
                    cf.phi0[n],
                    max_relative = 1e-9,
                    epsilon = 1e-12
                );
                assert_relative_eq!(
                    num.dphi1[n],
                    cf.dphi1[n],
                    max_relative = 1e-8,
                    epsilon = 1e-10
                );
            }
            assert!(verify_basis(&cf, &spec).max_residual < 1e-12);
        }
    }

    #[test]
    fn verify_flags_reordered_eigenvalues() {
        let spec = plant();
        let b = closed_form_basis(&spec, 4).unwrap();
        assert!(verify_basis(&b, &spec).pass);
        let mut l = b.lambdas.clone();
        l.swap(1, 2);
        let bad = b.with_lambdas(l);
        let r = verify_basis(&bad, &spec);
        assert!(!r.monotone);
        assert!(!r.pass);
    }

    #[test]
    fn variable_coefficients_converge_under_refinement() {
        let spec = variable_spec();
        let coarse = solve_eigenproblem(&spec.clone().with_grid(201).unwrap(), 6).unwrap();
        let mid = solve_eigenproblem(&spec.clone().with_grid(401).unwrap(), 6).unwrap();
        let fine = solve_eigenproblem(&spec.clone().with_grid(1601).unwrap(), 6).unwrap();
        for n in 0..6 {
            let e1 = (coarse.lambdas[n] - fine.lambdas[n]).abs();
            let e2 = (mid.lambdas[n] - fine.lambdas[n]).abs();
            assert!(e1 > 3.0 * e2, "mode {n}: {e1} vs {e2}");
        }
        let r1 = verify_basis(&coarse, &spec.clone().with_grid(201).unwrap());
        let r2 = verify_basis(&mid, &spec.clone().with_grid(401).unwrap());
        assert!(r2.max_residual < r1.max_residual);
        assert!(r2.pass, "{r2:?}");
    }

    #[test]
    fn variable_basis_is_orthonormal_and_bounded() {
        let spec = variable_spec();
        let b = solve_eigenproblem(&spec, 30).unwrap();
        let r = verify_basis(&b, &spec);
        assert!(r.gram_deviation < 1e-8, "{}", r.gram_deviation);
        assert!(r.bracket_ok.iter().all(|&x| x));
        let d1 = b.dphi1[0].abs() / b.lambdas[0].sqrt();
        for n in 0..30 {
            assert!(b.phi0[n].abs() <= 10.0 * b.phi0[0].abs());
            assert!(b.dphi1[n].abs() / b.lambdas[n].sqrt() <= 10.0 * d1);
        }
    }

    #[test]
    fn eval_reproduces_samples_between_nodes() {
        let spec = plant();
        let b = solve_eigenproblem(&spec, 3).unwrap();
        for &x in &[0.0, 0.123_456, 0.5, 0.999, 1.0] {
            for n in 0..3 {
                let mu = (2 * n + 1) as f64 * PI / 2.0;
                assert!((b.eval(n, x) - 2f64.sqrt() * (mu * x).cos()).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn boundary_traces_agree_with_full_solve() {
        let spec = variable_spec();
        let b = solve_eigenproblem(&spec, 5).unwrap();
        let t = boundary_traces(&spec, 1, 5, Execution::Sequential).unwrap();
        for n in 0..5 {
            assert_relative_eq!(t[n].0, b.lambdas[n], max_relative = 1e-5);
            assert_relative_eq!(t[n].1, b.phi0[n], max_relative = 1e-4);
        }
    }

    #[test]
    fn rejects_inadmissible_angles() {
        let e = OperatorSpec::new(0.0, 0.0, 1.0, 1.0, 0.0).unwrap_err();
        assert!(e.to_string().contains("(0, pi/2]"));
        assert!(OperatorSpec::new(1.0, -0.1, 1.0, 1.0, 0.0).is_err());
        assert!(OperatorSpec::new(1.0, 0.0, 1.0, -3.0, 1.0).is_err());
    }
}
