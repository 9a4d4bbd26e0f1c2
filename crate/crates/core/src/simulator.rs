//! Closed-loop simulation: finite-volume plant, modal observer, boundary
//! input through a sector nonlinearity.
//!
//! The plant `W ż = −(K − q_c W) z + g u_φ` and the observer are advanced
//! together by the trapezoid rule. Both updates are affine in the new
//! boundary value `u_φ⁺`, so each step reduces to the scalar equation
//! `u_φ⁺ = φ(u_a + u_φ⁺ u_b)`.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::feasibility::FeasibilityCertificate;
use crate::nonlinearity::SectorNonlinearity;
use crate::par::{map_vec, Execution};
use crate::spectral::{ModeState, ReducedPlant, StabilityModel};
use crate::sturm_liouville::fd::{trapezoid_dot, FdOperator};
use crate::synthesis::GainSet;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum InitialProfile {
    /// `cos(πx/2)` scaled to unit discrete `H¹` norm.
    Default,
    Zero,
    Cosine {
        amplitude: f64,
        wavenumber: f64,
    },
    /// Values on the full mesh, `x = 0..1` inclusive.
    Samples {
        values: Vec<f64>,
    },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SimConfig {
    pub mesh_nodes: usize,
    pub t_final: f64,
    pub dt: f64,
    pub z0: InitialProfile,
    /// Observer initial state, zeros when absent.
    pub zhat0: Option<Vec<f64>>,
    pub record_stride: usize,
    pub profile_stride: usize,
    /// Growth of the state norm over its initial value that counts as divergence.
    pub divergence_factor: f64,
    pub overflow: f64,
    /// Add a boundary-layer correction so `z₀` matches the initial input.
    pub project_compatibility: bool,
    pub bump_width: f64,
}

impl Default for SimConfig {
    fn default() -> Self {
        SimConfig {
            mesh_nodes: 201,
            t_final: 10.0,
            dt: 1e-3,
            z0: InitialProfile::Default,
            zhat0: None,
            record_stride: 10,
            profile_stride: 500,
            divergence_factor: 1e3,
            overflow: 1e12,
            project_compatibility: true,
            bump_width: 0.1,
        }
    }
}

impl SimConfig {
    pub fn validate(&self) -> Result<()> {
        if self.mesh_nodes < 5 {
            return Err(Error::Simulation(format!(
                "mesh_nodes = {} is below 5",
                self.mesh_nodes
            )));
        }
        if !(self.dt > 0.0 && self.t_final > 0.0 && self.dt <= self.t_final) {
            return Err(Error::Simulation(format!(
                "need 0 < dt <= t_final, got dt = {}, t_final = {}",
                self.dt, self.t_final
            )));
        }
        if self.record_stride == 0 || self.profile_stride == 0 {
            return Err(Error::Simulation("strides must be positive".into()));
        }
        if !(self.bump_width > 0.0 && self.bump_width <= 1.0) {
            return Err(Error::Simulation(format!(
                "bump_width = {} outside (0, 1]",
                self.bump_width
            )));
        }
        if let InitialProfile::Samples { values } = &self.z0 {
            if values.len() != self.mesh_nodes {
                return Err(Error::Simulation(format!(
                    "initial profile has {} samples for {} nodes",
                    values.len(),
                    self.mesh_nodes
                )));
            }
        }
        Ok(())
    }
}

/// Boundary mismatches of `z₀` before correction, and the correction used.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Compatibility {
    pub left_defect: f64,
    pub right_defect: f64,
    /// Amplitude of the bump added near `x = 1` (zero if none).
    pub correction: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub n0: usize,
    pub n: usize,
    pub mesh_h: f64,
    pub dt: f64,
    pub lambdas: Vec<f64>,
    pub times: Vec<f64>,
    pub l2: Vec<f64>,
    pub h1: Vec<f64>,
    /// `√(‖z‖²_{H¹} + |ẑ|²)`.
    pub state_norm: Vec<f64>,
    pub u: Vec<f64>,
    pub u_phi: Vec<f64>,
    pub modes: Vec<ModeState>,
    /// `Σ_{n>N} λ_n w_n²` and `Σ_{n>N} w_n²`, from the mesh energy and norm.
    pub tail_h1: Vec<f64>,
    pub tail_l2: Vec<f64>,
    /// `max_n |w_n − z_n − b_n u_φ|` over the observed modes.
    pub link_residual: Vec<f64>,
    pub x: Vec<f64>,
    pub profile_times: Vec<f64>,
    pub profiles: Vec<Vec<f64>>,
    pub compatibility: Compatibility,
    pub diverged: bool,
    pub diverged_at: Option<f64>,
}

impl Trajectory {
    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    pub fn max_link_residual(&self) -> f64 {
        self.link_residual.iter().cloned().fold(0.0, f64::max)
    }
}

/// How the boundary value follows from the command.
enum InputMap<'a> {
    Direct,
    Phi(&'a SectorNonlinearity),
}

/// Tridiagonal system with a stored LU sweep.
struct Tridiagonal {
    lower: Vec<f64>,
    denom: Vec<f64>,
    upper: Vec<f64>,
}

impl Tridiagonal {
    fn new(diag: &[f64], off: &[f64]) -> Self {
        let n = diag.len();
        let mut denom = vec![0.0; n];
        let mut upper = vec![0.0; n.saturating_sub(1)];
        denom[0] = diag[0];
        for i in 1..n {
            upper[i - 1] = off[i - 1] / denom[i - 1];
            denom[i] = diag[i] - off[i - 1] * upper[i - 1];
        }
        Tridiagonal {
            lower: off.to_vec(),
            denom,
            upper,
        }
    }

    fn solve(&self, rhs: &mut [f64]) {
        let n = rhs.len();
        rhs[0] /= self.denom[0];
        for i in 1..n {
            rhs[i] = (rhs[i] - self.lower[i - 1] * rhs[i - 1]) / self.denom[i];
        }
        for i in (0..n - 1).rev() {
            rhs[i] -= self.upper[i] * rhs[i + 1];
        }
    }
}

fn mesh_norms(op: &FdOperator, z: &[f64]) -> (f64, f64) {
    let l2 = trapezoid_dot(op.h, z, z);
    let grad: f64 = z.windows(2).map(|w| (w[1] - w[0]).powi(2)).sum::<f64>() / op.h;
    (l2, l2 + grad)
}

fn initial_profile(cfg: &SimConfig, x: &[f64], op: &FdOperator) -> Vec<f64> {
    match &cfg.z0 {
        InitialProfile::Zero => vec![0.0; x.len()],
        InitialProfile::Samples { values } => values.clone(),
        InitialProfile::Cosine {
            amplitude,
            wavenumber,
        } => x
            .iter()
            .map(|&s| amplitude * (wavenumber * s).cos())
            .collect(),
        InitialProfile::Default => {
            let raw: Vec<f64> = x
                .iter()
                .map(|&s| (std::f64::consts::FRAC_PI_2 * s).cos())
                .collect();
            let (_, h1) = mesh_norms(op, &raw);
            raw.iter().map(|v| v / h1.sqrt()).collect()
        }
    }
}

/// Boundary defects of a mesh profile and the bump correction at `x = 1`.
fn enforce_compatibility(
    plant: &ReducedPlant,
    z: &mut [f64],
    h: f64,
    u_phi0: f64,
    cfg: &SimConfig,
) -> Compatibility {
    let (t1, t2) = (plant.spec.theta1, plant.spec.theta2);
    let n = z.len();
    let dz0 = (-3.0 * z[0] + 4.0 * z[1] - z[2]) / (2.0 * h);
    let dz1 = (3.0 * z[n - 1] - 4.0 * z[n - 2] + z[n - 3]) / (2.0 * h);
    let left_defect = t1.cos() * z[0] - t1.sin() * dz0;
    let right_defect = t2.cos() * z[n - 1] + t2.sin() * dz1 - u_phi0;
    let mut correction = 0.0;
    if cfg.project_compatibility && right_defect != 0.0 {
        // B(x) = ((x − 1 + w)/w)² on [1 − w, 1]: B(1) = 1, B′(1) = 2/w.
        let w = cfg.bump_width;
        correction = -right_defect / (t2.cos() + 2.0 * t2.sin() / w);
        for (i, zi) in z.iter_mut().enumerate() {
            let r = (i as f64 * h - 1.0 + w) / w;
            if r > 0.0 {
                *zi += correction * r * r;
            }
        }
        if t2 == 0.0 {
            z[n - 1] = u_phi0;
        }
    }
    Compatibility {
        left_defect,
        right_defect,
        correction,
    }
}

/// Scalar solve of `s = φ(u_a + s u_b)` by Newton from `guess`.
fn solve_boundary(phi: &SectorNonlinearity, u_a: f64, u_b: f64, guess: f64) -> Result<f64> {
    let tol = |s: f64| 1e-14 * (1.0 + s.abs());
    let mut s = guess;
    for _ in 0..60 {
        let arg = u_a + s * u_b;
        let g = s - phi.eval(arg);
        if g.abs() <= tol(s) {
            return Ok(s);
        }
        let dg = 1.0 - phi.deriv(arg) * u_b;
        if !(dg.abs() > 1e-12) {
            break;
        }
        s -= g / dg;
    }
    // Contraction fallback when the Newton slope degenerates.
    if (phi.deriv_sup() * u_b).abs() < 1.0 {
        let mut s = guess;
        for _ in 0..10_000 {
            let next = phi.eval(u_a + s * u_b);
            if (next - s).abs() <= tol(s) {
                return Ok(next);
            }
            s = next;
        }
    }
    Err(Error::Simulation(format!(
        "boundary equation did not converge (u_a = {u_a:.3e}, u_b = {u_b:.3e}); reduce dt"
    )))
}

/// Closed loop with `u_φ = φ(u)`.
pub fn simulate_closed_loop(
    plant: &ReducedPlant,
    gains: &GainSet,
    phi: &SectorNonlinearity,
    cfg: &SimConfig,
) -> Result<Trajectory> {
    run(plant, gains, InputMap::Phi(phi), cfg)
}

/// Closed loop of the linear design, `u_φ = u`.
pub fn simulate_linear_design(
    plant: &ReducedPlant,
    gains: &GainSet,
    cfg: &SimConfig,
) -> Result<Trajectory> {
    run(plant, gains, InputMap::Direct, cfg)
}

fn run(
    plant: &ReducedPlant,
    gains: &GainSet,
    input: InputMap<'_>,
    cfg: &SimConfig,
) -> Result<Trajectory> {
    cfg.validate()?;
    gains.validate()?;
    let (n0, n) = (gains.n0, gains.n);
    if plant.basis.n_modes < n {
        return Err(Error::NotEnoughModes(format!(
            "basis has {} modes, observer needs {n}",
            plant.basis.n_modes
        )));
    }
    let spec = &plant.spec;
    if (spec.q_c - gains.q_c).abs() > 1e-12 {
        return Err(Error::Dimension(format!(
            "gains built for q_c = {}, plant has {}",
            gains.q_c, spec.q_c
        )));
    }
    let op = FdOperator::new(spec, cfg.mesh_nodes)?;
    let m = op.unknowns;
    let nodes = op.nodes;
    let h = op.h;
    let dt = cfg.dt;
    let q_c = spec.q_c;
    let den = spec.lifting_denominator();
    let right_scale = if op.dirichlet_right {
        1.0 / spec.theta2.cos()
    } else {
        0.0
    };

    // Plant: (W + dt/2 S) z⁺ = (W − dt/2 S) z + dt/2 g (u_φ + u_φ⁺), S = K − q_c W.
    let s_diag: Vec<f64> = (0..m).map(|i| op.diag[i] - q_c * op.weights[i]).collect();
    let implicit_diag: Vec<f64> = (0..m)
        .map(|i| op.weights[i] + 0.5 * dt * s_diag[i])
        .collect();
    let implicit_off: Vec<f64> = op.off.iter().map(|o| 0.5 * dt * o).collect();
    let lhs = Tridiagonal::new(&implicit_diag, &implicit_off);
    let mut z_b: Vec<f64> = op.input.iter().map(|g| 0.5 * dt * g).collect();
    lhs.solve(&mut z_b);

    // Observer: ż̂ = A ẑ + g_o u_φ + l̄ y.
    let lam: Vec<f64> = plant.basis.lambdas[..n].to_vec();
    let beta = &plant.lifting.beta_n;
    let b_n = &plant.lifting.b_n;
    let x = op.x.clone();
    let phi_nodes: Vec<Vec<f64>> = (0..n)
        .map(|k| x.iter().map(|&s| plant.basis.eval(k, s)).collect())
        .collect();
    let c: Vec<f64> = (0..n).map(|k| phi_nodes[k][0]).collect();
    let mut l_bar = DVector::zeros(n);
    for i in 0..n0 {
        l_bar[i] = gains.l[i];
    }
    let cb: f64 = (0..n).map(|k| c[k] * b_n[k]).sum();
    let mut a_obs =
        DMatrix::from_diagonal(&DVector::from_iterator(n, lam.iter().map(|l| -l + q_c)));
    for i in 0..n0 {
        for k in 0..n {
            a_obs[(i, k)] -= l_bar[i] * c[k];
        }
    }
    let g_obs = DVector::from_iterator(n, (0..n).map(|k| beta[k] - l_bar[k] * cb));
    let eye = DMatrix::<f64>::identity(n, n);
    let m_inv = (&eye - &a_obs * (0.5 * dt))
        .try_inverse()
        .ok_or_else(|| Error::Simulation("observer step matrix is singular".into()))?;
    let m_exp = &eye + &a_obs * (0.5 * dt);
    let zb0 = z_b[0];
    let hat_b = &m_inv * ((&g_obs + &l_bar * zb0) * (0.5 * dt));
    let kvec: Vec<f64> = gains.k.clone();
    let command = |zh: &DVector<f64>| -> f64 { (0..n0).map(|i| kvec[i] * zh[i]).sum() };
    let u_b: f64 = command(&hat_b);

    let map_input = |u_a: f64, u_b: f64, guess: f64| -> Result<f64> {
        match &input {
            InputMap::Direct => Ok(u_a / (1.0 - u_b)),
            InputMap::Phi(phi) => solve_boundary(phi, u_a, u_b, guess),
        }
    };
    let eval_input = |u: f64| -> f64 {
        match &input {
            InputMap::Direct => u,
            InputMap::Phi(phi) => phi.eval(u),
        }
    };

    // Initial data.
    let mut zhat = match &cfg.zhat0 {
        Some(v) if v.len() == n => DVector::from_column_slice(v),
        Some(v) => {
            return Err(Error::Simulation(format!(
                "zhat0 has {} entries, observer has {n}",
                v.len()
            )))
        }
        None => DVector::zeros(n),
    };
    let mut u = command(&zhat);
    let mut u_phi = eval_input(u);
    let mut full = initial_profile(cfg, &x, &op);
    let compatibility = enforce_compatibility(plant, &mut full, h, u_phi, cfg);
    let mut z: Vec<f64> = full[..m].to_vec();

    let b_fun: Vec<f64> = x.iter().map(|&s| -s * s / den).collect();
    let energy_scale = |w: &[f64]| op.energy(w);

    let mut traj = Trajectory {
        n0,
        n,
        mesh_h: h,
        dt,
        lambdas: lam.clone(),
        times: Vec::new(),
        l2: Vec::new(),
        h1: Vec::new(),
        state_norm: Vec::new(),
        u: Vec::new(),
        u_phi: Vec::new(),
        modes: Vec::new(),
        tail_h1: Vec::new(),
        tail_l2: Vec::new(),
        link_residual: Vec::new(),
        x: x.clone(),
        profile_times: Vec::new(),
        profiles: Vec::new(),
        compatibility,
        diverged: false,
        diverged_at: None,
    };

    let mut v_phi = 0.0;
    let record = |t: f64,
                  full: &[f64],
                  zhat: &DVector<f64>,
                  u: f64,
                  u_phi: f64,
                  v_phi: f64,
                  traj: &mut Trajectory|
     -> f64 {
        let (l2, h1) = mesh_norms(&op, full);
        let w: Vec<f64> = full
            .iter()
            .zip(&b_fun)
            .map(|(zi, bi)| zi + bi * u_phi)
            .collect();
        let z_n: Vec<f64> = phi_nodes
            .iter()
            .map(|p| trapezoid_dot(h, full, p))
            .collect();
        let w_n: Vec<f64> = phi_nodes.iter().map(|p| trapezoid_dot(h, &w, p)).collect();
        let hat_z_n: Vec<f64> = zhat.iter().cloned().collect();
        let hat_w_n: Vec<f64> = (0..n).map(|k| hat_z_n[k] + b_n[k] * u_phi).collect();
        let e_n: Vec<f64> = (0..n).map(|k| z_n[k] - hat_z_n[k]).collect();
        let zeta = w[0] - (0..n).map(|k| w_n[k] * c[k]).sum::<f64>();
        let head_h1: f64 = (0..n).map(|k| lam[k] * w_n[k] * w_n[k]).sum();
        let head_l2: f64 = w_n.iter().map(|v| v * v).sum();
        let link = (0..n)
            .map(|k| (w_n[k] - z_n[k] - b_n[k] * u_phi).abs())
            .fold(0.0, f64::max);
        let state = (h1 + zhat.norm_squared()).sqrt();
        traj.times.push(t);
        traj.l2.push(l2.sqrt());
        traj.h1.push(h1.sqrt());
        traj.state_norm.push(state);
        traj.u.push(u);
        traj.u_phi.push(u_phi);
        traj.tail_h1.push((energy_scale(&w) - head_h1).max(0.0));
        traj.tail_l2
            .push((trapezoid_dot(h, &w, &w) - head_l2).max(0.0));
        traj.link_residual.push(link);
        traj.modes.push(ModeState {
            z_n,
            w_n,
            hat_z_n,
            hat_w_n,
            e_n,
            zeta,
            u,
            u_phi,
            v_phi,
        });
        state
    };

    let assemble = |z: &[f64], u_phi: f64| -> Vec<f64> {
        let mut full = z.to_vec();
        if op.dirichlet_right {
            full.push(u_phi * right_scale);
        }
        full
    };
    if op.dirichlet_right {
        full[nodes - 1] = u_phi * right_scale;
    }
    let initial = record(0.0, &full, &zhat, u, u_phi, v_phi, &mut traj);
    traj.profile_times.push(0.0);
    traj.profiles.push(full);

    let steps = (cfg.t_final / dt).round() as usize;
    let mut rhs = vec![0.0; m];
    for step in 1..=steps {
        let t = step as f64 * dt;
        // Explicit half of the plant.
        let sz: Vec<f64> = {
            let mut v = vec![0.0; m];
            for i in 0..m {
                let mut acc = s_diag[i] * z[i];
                if i > 0 {
                    acc += op.off[i - 1] * z[i - 1];
                }
                if i + 1 < m {
                    acc += op.off[i] * z[i + 1];
                }
                v[i] = acc;
            }
            v
        };
        for i in 0..m {
            rhs[i] = op.weights[i] * z[i] - 0.5 * dt * sz[i] + 0.5 * dt * op.input[i] * u_phi;
        }
        lhs.solve(&mut rhs);
        let z_a = &rhs;
        let y = z[0];
        let hat_a = &m_inv
            * (&m_exp * &zhat + &g_obs * (0.5 * dt * u_phi) + &l_bar * (0.5 * dt * (y + z_a[0])));
        let u_a = command(&hat_a);
        let next = map_input(u_a, u_b, u_phi)?;
        for i in 0..m {
            z[i] = z_a[i] + next * z_b[i];
        }
        zhat = hat_a + &hat_b * next;
        v_phi = (next - u_phi) / dt;
        u = command(&zhat);
        u_phi = next;

        let last = step == steps;
        if step % cfg.record_stride == 0 || last {
            let full = assemble(&z, u_phi);
            let state = record(t, &full, &zhat, u, u_phi, v_phi, &mut traj);
            if step % cfg.profile_stride == 0 || last {
                traj.profile_times.push(t);
                traj.profiles.push(full);
            }
            let blown = !state.is_finite()
                || state > cfg.overflow
                || (initial > 0.0 && state > cfg.divergence_factor * initial);
            if blown {
                traj.diverged = true;
                traj.diverged_at = Some(t);
                if *traj.profile_times.last().unwrap() != t {
                    traj.profile_times.push(t);
                    traj.profiles.push(assemble(&z, u_phi));
                }
                break;
            }
        }
    }
    Ok(traj)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DecayFit {
    /// `−slope` of `ln √(‖z‖²_{H¹} + |ẑ|²)`; negative means growth.
    pub rate: f64,
    /// RMS residual of the log-linear fit.
    pub residual: f64,
    pub points: usize,
    pub diverged: bool,
}

/// Least-squares exponential rate of the state norm over `[t0, t1]`.
pub fn decay_rate_fit(traj: &Trajectory, window: (f64, f64)) -> Result<DecayFit> {
    let (t0, t1) = window;
    let pts: Vec<(f64, f64)> = traj
        .times
        .iter()
        .zip(&traj.state_norm)
        .filter(|(t, _)| **t >= t0 - 1e-12 && **t <= t1 + 1e-12)
        .map(|(&t, &v)| (t, v))
        .collect();
    if pts.len() < 2 {
        return Err(Error::Simulation(format!(
            "fewer than two samples in [{t0}, {t1}]"
        )));
    }
    if let Some((t, v)) = pts.iter().find(|(_, v)| !(*v > 0.0)) {
        return Err(Error::Simulation(format!(
            "non-positive norm {v} at t = {t}"
        )));
    }
    let k = pts.len() as f64;
    let mt = pts.iter().map(|p| p.0).sum::<f64>() / k;
    let my = pts.iter().map(|p| p.1.ln()).sum::<f64>() / k;
    let sxx: f64 = pts.iter().map(|p| (p.0 - mt).powi(2)).sum();
    let sxy: f64 = pts.iter().map(|p| (p.0 - mt) * (p.1.ln() - my)).sum();
    let slope = sxy / sxx;
    let residual = (pts
        .iter()
        .map(|p| (p.1.ln() - my - slope * (p.0 - mt)).powi(2))
        .sum::<f64>()
        / k)
        .sqrt();
    Ok(DecayFit {
        rate: -slope,
        residual,
        points: pts.len(),
        diverged: traj.diverged,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LyapunovTrace {
    pub times: Vec<f64>,
    pub values: Vec<f64>,
    pub tolerance: f64,
    /// Record indices `k` with `V_{k+1} > V_k e^{−2δΔt}(1 + tol)`.
    pub violations: Vec<usize>,
    /// Largest `V_{k+1} / (V_k e^{−2δΔt}) − 1`.
    pub worst_excess: f64,
}

/// `V = XᵀPX + γ·tail` along the trajectory, with the tail weighted by `λ_n`
/// for the `H¹` statements.
pub fn lyapunov_trace(
    traj: &Trajectory,
    cert: &FeasibilityCertificate,
    model: &StabilityModel,
    tolerance: f64,
) -> Result<LyapunovTrace> {
    if model.n != traj.n || model.n0 != traj.n0 || cert.n != traj.n {
        return Err(Error::Dimension(format!(
            "trajectory has (N0, N) = ({}, {}), model ({}, {}), certificate N = {}",
            traj.n0, traj.n, model.n0, model.n, cert.n
        )));
    }
    let p = cert.params.p_matrix();
    let gamma = cert.params.gamma;
    let (n0, n) = (traj.n0, traj.n);
    let values: Vec<f64> = traj
        .modes
        .iter()
        .enumerate()
        .map(|(r, ms)| {
            let mut xv = DVector::zeros(2 * n);
            for i in 0..n0 {
                xv[i] = ms.hat_z_n[i];
                xv[n0 + i] = ms.e_n[i];
            }
            let n1 = n - n0;
            for j in 0..n1 {
                let k = n0 + j;
                xv[2 * n0 + j] = ms.hat_z_n[k] / traj.lambdas[k];
                xv[2 * n0 + n1 + j] = traj.lambdas[k].sqrt() * ms.e_n[k];
            }
            let tail = if cert.theorem.is_l2() {
                traj.tail_l2[r]
            } else {
                traj.tail_h1[r]
            };
            (xv.transpose() * &p * &xv)[(0, 0)] + gamma * tail
        })
        .collect();
    let mut violations = Vec::new();
    let mut worst = f64::NEG_INFINITY;
    for k in 0..values.len().saturating_sub(1) {
        let dt = traj.times[k + 1] - traj.times[k];
        let bound = values[k] * (-2.0 * cert.delta * dt).exp();
        if values[k] > 0.0 {
            let excess = values[k + 1] / bound - 1.0;
            worst = worst.max(excess);
            if excess > tolerance {
                violations.push(k);
            }
        } else if values[k + 1] > 0.0 {
            violations.push(k);
        }
    }
    Ok(LyapunovTrace {
        times: traj.times.clone(),
        values,
        tolerance,
        violations,
        worst_excess: if worst.is_finite() { worst } else { 0.0 },
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MeshConvergence {
    pub nodes: Vec<usize>,
    /// `max_t |‖z‖_{L²}^{(k)} − ‖z‖_{L²}^{(k+1)}|` between consecutive levels.
    pub differences: Vec<f64>,
    /// `log₂` of consecutive difference ratios.
    pub orders: Vec<f64>,
    pub monotone: bool,
}

/// Refinement study over meshes whose spacing halves level to level.
pub fn mesh_convergence(
    plant: &ReducedPlant,
    gains: &GainSet,
    phi: &SectorNonlinearity,
    cfg: &SimConfig,
    levels: &[usize],
    exec: Execution,
) -> Result<MeshConvergence> {
    if levels.len() < 3 {
        return Err(Error::Simulation(format!(
            "need at least 3 mesh levels, got {}",
            levels.len()
        )));
    }
    if levels.windows(2).any(|w| w[1] - 1 != 2 * (w[0] - 1)) {
        return Err(Error::Simulation(format!(
            "mesh levels {levels:?} do not halve the spacing"
        )));
    }
    if matches!(cfg.z0, InitialProfile::Samples { .. }) {
        return Err(Error::Simulation(
            "mesh study needs a mesh-independent initial profile".into(),
        ));
    }
    let runs = map_vec(exec, levels.to_vec(), |nodes| {
        let c = SimConfig {
            mesh_nodes: nodes,
            ..cfg.clone()
        };
        simulate_closed_loop(plant, gains, phi, &c)
    });
    let runs: Vec<Trajectory> = runs.into_iter().collect::<Result<_>>()?;
    let differences: Vec<f64> = runs
        .windows(2)
        .map(|w| {
            w[0].l2
                .iter()
                .zip(&w[1].l2)
                .map(|(a, b)| (a - b).abs())
                .fold(0.0, f64::max)
        })
        .collect();
    let orders: Vec<f64> = differences
        .windows(2)
        .map(|d| (d[0] / d[1]).log2())
        .collect();
    let monotone = differences.windows(2).all(|d| d[1] < d[0]);
    Ok(MeshConvergence {
        nodes: levels.to_vec(),
        differences,
        orders,
        monotone,
    })
}
