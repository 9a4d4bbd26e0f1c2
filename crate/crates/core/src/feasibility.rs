//! Matrix inequalities certifying exponential stability of the truncated
//! closed loop, their assembly and independent verification, constructive
//! and optimized certificates, and scans over `N` and the sector size.

use std::fmt;
use std::str::FromStr;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg;
use crate::par::{self, Execution};
use crate::sdp::{BarrierOptions, BarrierProblem, BarrierStatus, LmiBlock};
use crate::spectral::{ReducedPlant, StabilityModel};
use crate::sturm_liouville::OperatorSpec;
use crate::synthesis::{self, GainSet, SynthesisOptions};

/// Which set of conditions to check: H¹ or L² estimate, linear or sector input.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum TheoremId {
    #[serde(rename = "T1_H1_linear")]
    T1H1Linear,
    #[serde(rename = "T2_L2_linear")]
    T2L2Linear,
    #[serde(rename = "T3_H1_sector")]
    T3H1Sector,
    #[serde(rename = "C4_L2_sector")]
    C4L2Sector,
}

impl TheoremId {
    pub const ALL: [TheoremId; 4] = [
        TheoremId::T1H1Linear,
        TheoremId::T2L2Linear,
        TheoremId::T3H1Sector,
        TheoremId::C4L2Sector,
    ];

    pub fn includes_psi(self) -> bool {
        matches!(self, TheoremId::T3H1Sector | TheoremId::C4L2Sector)
    }

    pub fn is_l2(self) -> bool {
        matches!(self, TheoremId::T2L2Linear | TheoremId::C4L2Sector)
    }

    /// `α` must exceed this value.
    pub fn alpha_floor(self) -> f64 {
        match self {
            TheoremId::T1H1Linear => 1.0,
            TheoremId::T3H1Sector => 1.5,
            TheoremId::T2L2Linear | TheoremId::C4L2Sector => 0.0,
        }
    }

    pub fn short(self) -> &'static str {
        match self {
            TheoremId::T1H1Linear => "t1",
            TheoremId::T2L2Linear => "t2",
            TheoremId::T3H1Sector => "t3",
            TheoremId::C4L2Sector => "c4",
        }
    }

    /// Off-diagonal factor of the Schur form of `Θ₂` given `λ_{N+1}`.
    fn schur_coupling(self, lambda_next: f64) -> f64 {
        match self {
            TheoremId::T1H1Linear => (2.0 * lambda_next).sqrt(),
            TheoremId::T3H1Sector => (3.0 * lambda_next).sqrt(),
            TheoremId::T2L2Linear => 2f64.sqrt(),
            TheoremId::C4L2Sector => 3f64.sqrt(),
        }
    }

    /// Weight of `β` in `Θ₂`.
    fn theta2_beta_weight(self, model: &StabilityModel) -> f64 {
        if self.is_l2() {
            model.m_tail34 * model.lambda_next.powf(0.75)
        } else {
            model.m_tail
        }
    }
}

impl fmt::Display for TheoremId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.short())
    }
}

impl FromStr for TheoremId {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "t1" | "t1_h1_linear" => Ok(TheoremId::T1H1Linear),
            "t2" | "t2_l2_linear" => Ok(TheoremId::T2L2Linear),
            "t3" | "t3_h1_sector" => Ok(TheoremId::T3H1Sector),
            "c4" | "c4_l2_sector" => Ok(TheoremId::C4L2Sector),
            other => Err(Error::InvalidSpec(format!(
                "unknown theorem '{other}', expected one of t1, t2, t3, c4"
            ))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SectorSpec {
    pub k_phi: f64,
    pub dk_phi: f64,
    /// Upper bound on `‖φ′‖_∞`.
    pub phi_deriv_bound: f64,
}

impl SectorSpec {
    pub fn new(k_phi: f64, dk_phi: f64, phi_deriv_bound: f64) -> Result<Self> {
        let s = SectorSpec {
            k_phi,
            dk_phi,
            phi_deriv_bound,
        };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.k_phi > 0.0 && self.dk_phi > 0.0 && self.dk_phi < self.k_phi) {
            return Err(Error::Sector(format!(
                "need 0 < dk_phi < k_phi, got k_phi = {}, dk_phi = {}",
                self.k_phi, self.dk_phi
            )));
        }
        if !(self.phi_deriv_bound > 0.0) {
            return Err(Error::Sector(format!(
                "derivative bound must be positive, got {}",
                self.phi_deriv_bound
            )));
        }
        Ok(())
    }

    pub fn with_dk(&self, dk_phi: f64) -> Self {
        SectorSpec { dk_phi, ..*self }
    }
}

/// Decision variables of the matrix inequalities.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CertificateParams {
    /// Row-major `P`.
    pub p: Vec<Vec<f64>>,
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
    pub tau: Option<f64>,
}

impl CertificateParams {
    pub fn from_matrix(
        p: &DMatrix<f64>,
        alpha: f64,
        beta: f64,
        gamma: f64,
        tau: Option<f64>,
    ) -> Self {
        CertificateParams {
            p: (0..p.nrows())
                .map(|i| p.row(i).iter().copied().collect())
                .collect(),
            alpha,
            beta,
            gamma,
            tau,
        }
    }

    pub fn p_matrix(&self) -> DMatrix<f64> {
        let n = self.p.len();
        DMatrix::from_fn(n, n, |i, j| self.p[i].get(j).copied().unwrap_or(f64::NAN))
    }

    /// `(sP, α, sβ, sγ, sτ)`; feasibility is invariant under this map.
    pub fn scaled(&self, s: f64) -> Self {
        CertificateParams {
            p: self
                .p
                .iter()
                .map(|r| r.iter().map(|v| v * s).collect())
                .collect(),
            alpha: self.alpha,
            beta: self.beta * s,
            gamma: self.gamma * s,
            tau: self.tau.map(|t| t * s),
        }
    }
}

#[derive(Clone, Debug)]
pub struct ThetaBlocks {
    pub theta1: DMatrix<f64>,
    pub theta2: f64,
    pub theta3: Option<f64>,
}

fn check_model(
    model: &StabilityModel,
    sector: Option<&SectorSpec>,
    theorem: TheoremId,
) -> Result<()> {
    if model.includes_psi != theorem.includes_psi() {
        return Err(Error::Dimension(format!(
            "theorem {theorem} needs a model {} the sector column",
            if theorem.includes_psi() {
                "with"
            } else {
                "without"
            }
        )));
    }
    match (theorem.includes_psi(), sector) {
        (true, None) => Err(Error::Dimension(format!(
            "theorem {theorem} needs sector data"
        ))),
        (false, Some(_)) => Err(Error::Dimension(format!(
            "theorem {theorem} takes no sector data"
        ))),
        (_, Some(s)) => s.validate(),
        _ => Ok(()),
    }
}

/// Dense `Θ₁` and the scalar conditions, straight from their definitions.
pub fn assemble_theta(
    model: &StabilityModel,
    sector: Option<&SectorSpec>,
    params: &CertificateParams,
    theorem: TheoremId,
) -> Result<ThetaBlocks> {
    check_model(model, sector, theorem)?;
    let n = model.dim();
    let p = params.p_matrix();
    if p.shape() != (n, n) {
        return Err(Error::Dimension(format!(
            "P is {:?}, model needs {n}x{n}",
            p.shape()
        )));
    }
    let (alpha, beta, gamma) = (params.alpha, params.beta, params.gamma);
    let ag = alpha * gamma;
    let psi = theorem.includes_psi();
    let d = if psi { n + 2 } else { n + 1 };
    let (k2, dk2, m2, tau) = match sector {
        Some(s) => (
            s.k_phi * s.k_phi,
            s.dk_phi * s.dk_phi,
            s.phi_deriv_bound * s.phi_deriv_bound,
            params
                .tau
                .ok_or_else(|| Error::Dimension(format!("theorem {theorem} needs tau")))?,
        ),
        None => (1.0, 0.0, 1.0, 0.0),
    };
    let kk = &model.k_tilde * model.k_tilde.transpose();
    let mut t1 = DMatrix::zeros(d, d);
    let top = model.f.transpose() * &p
        + &p * &model.f
        + &p * (2.0 * model.delta)
        + kk * (ag * model.r_a * k2 + tau * dk2);
    t1.view_mut((0, 0), (n, n)).copy_from(&top);
    let pl = &p * &model.l_cal;
    t1.view_mut((0, n), (n, 1)).copy_from(&pl);
    t1.view_mut((n, 0), (1, n)).copy_from(&pl.transpose());
    t1[(n, n)] = -beta;
    if psi {
        let pp = &p * &model.l_psi;
        t1.view_mut((0, n + 1), (n, 1)).copy_from(&pp);
        t1.view_mut((n + 1, 0), (1, n)).copy_from(&pp.transpose());
        t1[(n + 1, n + 1)] = ag * model.r_a - tau;
    }
    if model.e.len() != d {
        return Err(Error::Dimension(format!(
            "E has {} entries, expected {d}",
            model.e.len()
        )));
    }
    t1 += &model.e * model.e.transpose() * (ag * model.r_b * m2);

    let lam = model.lambda_next;
    let base = -lam + model.q_c + model.delta;
    let theta2 = match theorem {
        TheoremId::T1H1Linear => {
            2.0 * gamma * (-(1.0 - 1.0 / alpha) * lam + model.q_c + model.delta)
                + beta * model.m_tail
        }
        TheoremId::T3H1Sector => {
            2.0 * gamma * (-(1.0 - 1.5 / alpha) * lam + model.q_c + model.delta)
                + beta * model.m_tail
        }
        TheoremId::T2L2Linear => {
            2.0 * gamma * (base + 1.0 / alpha) + beta * model.m_tail34 * lam.powf(0.75)
        }
        TheoremId::C4L2Sector => {
            2.0 * gamma * (base + 1.5 / alpha) + beta * model.m_tail34 * lam.powf(0.75)
        }
    };
    let theta3 = theorem
        .is_l2()
        .then(|| 2.0 * gamma - beta * model.m_tail34 / lam.powf(0.25));
    Ok(ThetaBlocks {
        theta1: t1,
        theta2,
        theta3,
    })
}

pub const THETA1_SLACK: f64 = 1e-9;
pub const SCALAR_SLACK: f64 = 1e-12;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Margins {
    pub lambda_max_theta1: f64,
    pub theta2: f64,
    pub theta3: Option<f64>,
    pub min_eig_p: f64,
    /// `α` minus its lower limit.
    pub alpha_excess: f64,
}

impl Margins {
    pub fn feasible(&self, params: &CertificateParams) -> bool {
        self.lambda_max_theta1 <= THETA1_SLACK
            && self.theta2 <= SCALAR_SLACK
            && self.theta3.is_none_or(|v| v >= -SCALAR_SLACK)
            && self.min_eig_p > 0.0
            && self.alpha_excess > 0.0
            && params.beta > 0.0
            && params.gamma > 0.0
            && params.tau.is_none_or(|t| t > 0.0)
    }
}

/// Eigenvalue margins of a candidate and whether they have the right signs.
pub fn verify(
    model: &StabilityModel,
    sector: Option<&SectorSpec>,
    params: &CertificateParams,
    theorem: TheoremId,
) -> Result<(Margins, bool)> {
    let th = assemble_theta(model, sector, params, theorem)?;
    let p = params.p_matrix();
    let asym = (&p - p.transpose()).abs().max();
    let margins = Margins {
        lambda_max_theta1: linalg::lambda_max(&th.theta1),
        theta2: th.theta2,
        theta3: th.theta3,
        min_eig_p: if asym <= 1e-12 * p.abs().max() {
            linalg::lambda_min(&p)
        } else {
            f64::NAN
        },
        alpha_excess: params.alpha - theorem.alpha_floor(),
    };
    let ok = margins.feasible(params) && !margins.min_eig_p.is_nan();
    Ok((margins, ok))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CertificateMethod {
    Constructive,
    Search { free_alpha: bool },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeasibilityCertificate {
    pub theorem: TheoremId,
    pub n: usize,
    pub delta: f64,
    pub sector: Option<SectorSpec>,
    pub params: CertificateParams,
    pub margins: Margins,
    pub feasible: bool,
    pub method: CertificateMethod,
}

impl FeasibilityCertificate {
    /// Recompute the margins against `model`.
    pub fn reverify(&self, model: &StabilityModel) -> Result<(Margins, bool)> {
        verify(model, self.sector.as_ref(), &self.params, self.theorem)
    }
}

/// Lyapunov solution plus the scalar choices used in the existence proofs.
/// Feasibility is only guaranteed for large `N`; margins are reported as found.
pub fn constructive_certificate(
    model: &StabilityModel,
    theorem: TheoremId,
    sector: Option<&SectorSpec>,
) -> Result<FeasibilityCertificate> {
    check_model(model, sector, theorem)?;
    let p = synthesis::solve_shifted_lyapunov(&model.f, model.delta)?;
    let nf = model.n as f64;
    let (alpha, beta, gamma) = if theorem.is_l2() {
        (1.0, nf.powf(0.125), nf.powf(-0.25))
    } else {
        (2.0, nf.sqrt(), 1.0 / nf)
    };
    let tau = theorem.includes_psi().then(|| {
        let mp = linalg::spectral_norm(&p);
        let mpsi = model.l_psi.norm();
        1.0 + 4.0 * mp * mp * mpsi * mpsi + model.a_norm_sq
    });
    let params = CertificateParams::from_matrix(&p, alpha, beta, gamma, tau);
    let (margins, feasible) = verify(model, sector, &params, theorem)?;
    Ok(FeasibilityCertificate {
        theorem,
        n: model.n,
        delta: model.delta,
        sector: sector.copied(),
        params,
        margins,
        feasible,
        method: CertificateMethod::Constructive,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AlphaMode {
    /// `α` is a decision variable through `σ = αγ`.
    Free,
    Fixed(f64),
}

#[derive(Clone, Debug)]
pub struct SearchOptions {
    pub alpha: AlphaMode,
    pub barrier: BarrierOptions,
    /// Upper limit on `σ`, `β`, `τ` under the normalization `tr P + γ = 1`.
    pub box_limit: f64,
}

/// Margins below this (with `tr P + γ = 1`) count as infeasible. The
/// homogeneous problem always reaches `t = 0` along a degenerate direction
/// (`P` supported on one tail error mode, all scalars vanishing), so a
/// strictly negative optimum never occurs.
pub const NEGATIVE_MARGIN: f64 = 1e-9;

impl Default for SearchOptions {
    fn default() -> Self {
        SearchOptions {
            alpha: AlphaMode::Free,
            barrier: BarrierOptions {
                negative_threshold: NEGATIVE_MARGIN,
                ..BarrierOptions::default()
            },
            box_limit: 1e6,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SearchStatus {
    Feasible,
    Infeasible,
    Undecided,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SearchReport {
    pub theorem: TheoremId,
    pub n: usize,
    pub status: SearchStatus,
    pub certificate: Option<FeasibilityCertificate>,
    /// Margin `t` at the last iterate (normalized by `tr P + γ = 1`).
    pub best_margin: f64,
    /// Upper bound on the best achievable margin.
    pub upper_bound: f64,
    pub newton_steps: usize,
}

impl SearchReport {
    pub fn feasible(&self) -> bool {
        self.status == SearchStatus::Feasible
    }
}

struct Layout {
    n: usize,
    sigma: Option<usize>,
    beta: usize,
    tau: Option<usize>,
    t: usize,
    /// Number of free variables.
    vars: usize,
    /// Index standing for `γ = 1 − tr P` while blocks are built.
    gamma: usize,
}

impl Layout {
    fn new(n: usize, free_alpha: bool, psi: bool) -> Self {
        let mut next = n * (n + 1) / 2;
        let mut take = || {
            next += 1;
            next - 1
        };
        let sigma = free_alpha.then(&mut take);
        let beta = take();
        let tau = psi.then(&mut take);
        let t = take();
        Layout {
            n,
            sigma,
            beta,
            tau,
            t,
            vars: next,
            gamma: next,
        }
    }

    fn diagonal_vars(&self) -> Vec<usize> {
        self.pairs()
            .filter(|&(_, k, l)| k == l)
            .map(|(i, _, _)| i)
            .collect()
    }

    fn gamma_from(&self, x: &[f64]) -> f64 {
        1.0 - self.diagonal_vars().iter().map(|&i| x[i]).sum::<f64>()
    }

    /// Upper-triangle `(k, l)` pairs in variable order.
    fn pairs(&self) -> impl Iterator<Item = (usize, usize, usize)> + '_ {
        let n = self.n;
        (0..n)
            .flat_map(move |k| (k..n).map(move |l| (k, l)))
            .enumerate()
            .map(|(i, (k, l))| (i, k, l))
    }

    fn p_from(&self, x: &[f64]) -> DMatrix<f64> {
        let mut p = DMatrix::zeros(self.n, self.n);
        for (i, k, l) in self.pairs() {
            p[(k, l)] = x[i];
            p[(l, k)] = x[i];
        }
        p
    }
}

/// Replace every `γ` term by the affine expression `1 − Σ P_kk`.
fn eliminate_gamma(block: &mut LmiBlock, lay: &Layout) {
    let diag = lay.diagonal_vars();
    let (gamma_terms, kept): (Vec<_>, Vec<_>) =
        block.terms.iter().partition(|t| t.var == lay.gamma);
    block.terms = kept;
    for t in gamma_terms {
        let va = block.vectors.column(t.a).clone_owned();
        let vb = block.vectors.column(t.b).clone_owned();
        block.constant.ger(0.5 * t.coef, &va, &vb, 1.0);
        block.constant.ger(0.5 * t.coef, &vb, &va, 1.0);
        for &i in &diag {
            block.push(i, t.a, t.b, -t.coef);
        }
    }
}

fn build_problem(
    model: &StabilityModel,
    sector: Option<&SectorSpec>,
    theorem: TheoremId,
    alpha: AlphaMode,
    box_limit: f64,
) -> (BarrierProblem, Layout) {
    let n = model.dim();
    let psi = theorem.includes_psi();
    let lay = Layout::new(n, matches!(alpha, AlphaMode::Free), psi);
    let (sigma_var, sigma_scale) = match alpha {
        AlphaMode::Free => (lay.sigma.unwrap(), 1.0),
        AlphaMode::Fixed(a) => (lay.gamma, a),
    };
    let (k2, dk2, m2) = match sector {
        Some(s) => (
            s.k_phi * s.k_phi,
            s.dk_phi * s.dk_phi,
            s.phi_deriv_bound * s.phi_deriv_bound,
        ),
        None => (1.0, 0.0, 1.0),
    };

    // −Θ₁ − tI
    let d = if psi { n + 2 } else { n + 1 };
    let mut g = DMatrix::zeros(n, d);
    let fd = &model.f + DMatrix::identity(n, n) * model.delta;
    g.view_mut((0, 0), (n, n)).copy_from(&fd);
    g.view_mut((0, n), (n, 1)).copy_from(&model.l_cal);
    if psi {
        g.view_mut((0, n + 1), (n, 1)).copy_from(&model.l_psi);
    }
    let (i_g, i_k, i_e) = (d, d + n, d + n + 1);
    let mut v = DMatrix::zeros(d, d + n + 2);
    v.view_mut((0, 0), (d, d)).fill_with_identity();
    v.view_mut((0, i_g), (d, n)).copy_from(&g.transpose());
    v.view_mut((0, i_k), (n, 1)).copy_from(&model.k_tilde);
    v.view_mut((0, i_e), (d, 1)).copy_from(&model.e);
    let mut theta1 = LmiBlock::new(DMatrix::zeros(d, d), v);
    for (i, k, l) in lay.pairs() {
        theta1.push(i, k, i_g + l, -2.0);
        if k != l {
            theta1.push(i, l, i_g + k, -2.0);
        }
    }
    theta1.push(sigma_var, i_k, i_k, -sigma_scale * model.r_a * k2);
    theta1.push(sigma_var, i_e, i_e, -sigma_scale * model.r_b * m2);
    theta1.push(lay.beta, n, n, 1.0);
    if psi {
        theta1.push(sigma_var, n + 1, n + 1, -sigma_scale * model.r_a);
        let tau = lay.tau.unwrap();
        theta1.push(tau, i_k, i_k, -dk2);
        theta1.push(tau, n + 1, n + 1, 1.0);
    }
    for k in 0..d {
        theta1.push(lay.t, k, k, -1.0);
    }

    // P − tI
    let mut pblock = LmiBlock::new(DMatrix::zeros(n, n), DMatrix::identity(n, n));
    for (i, k, l) in lay.pairs() {
        pblock.push(i, k, l, if k == l { 1.0 } else { 2.0 });
    }
    for k in 0..n {
        pblock.push(lay.t, k, k, -1.0);
    }

    // Schur form of −Θ₂ − tI
    let c = theorem.schur_coupling(model.lambda_next);
    let base = -model.lambda_next + model.q_c + model.delta;
    let mut theta2 = LmiBlock::new(DMatrix::zeros(2, 2), DMatrix::identity(2, 2));
    theta2.push(lay.gamma, 0, 0, -2.0 * base);
    theta2.push(lay.beta, 0, 0, -theorem.theta2_beta_weight(model));
    theta2.push(lay.gamma, 0, 1, -2.0 * c);
    theta2.push(sigma_var, 1, 1, sigma_scale);
    theta2.push(lay.t, 0, 0, -1.0);
    theta2.push(lay.t, 1, 1, -1.0);

    let mut blocks = vec![theta1, pblock, theta2];
    blocks.push(LmiBlock::scalar(0.0, &[(lay.beta, 1.0), (lay.t, -1.0)]));
    blocks.push(LmiBlock::scalar(0.0, &[(lay.gamma, 1.0), (lay.t, -1.0)]));
    if let Some(tau) = lay.tau {
        blocks.push(LmiBlock::scalar(0.0, &[(tau, 1.0), (lay.t, -1.0)]));
        blocks.push(LmiBlock::scalar(box_limit, &[(tau, -1.0)]));
    }
    if let Some(s) = lay.sigma {
        blocks.push(LmiBlock::scalar(
            0.0,
            &[(s, 1.0), (lay.gamma, -theorem.alpha_floor()), (lay.t, -1.0)],
        ));
        blocks.push(LmiBlock::scalar(box_limit, &[(s, -1.0)]));
    }
    if theorem.is_l2() {
        let w = model.m_tail34 / model.lambda_next.powf(0.25);
        blocks.push(LmiBlock::scalar(
            0.0,
            &[(lay.gamma, 2.0), (lay.beta, -w), (lay.t, -1.0)],
        ));
    }
    blocks.push(LmiBlock::scalar(box_limit, &[(lay.beta, -1.0)]));
    for b in &mut blocks {
        eliminate_gamma(b, &lay);
    }

    (
        BarrierProblem {
            n_vars: lay.vars,
            objective: lay.t,
            blocks,
        },
        lay,
    )
}

fn extract(lay: &Layout, x: &[f64], alpha: AlphaMode, psi: bool) -> CertificateParams {
    let gamma = lay.gamma_from(x);
    let alpha = match alpha {
        AlphaMode::Free => x[lay.sigma.unwrap()] / gamma,
        AlphaMode::Fixed(a) => a,
    };
    let p = lay.p_from(x) / gamma;
    let tau = if psi {
        lay.tau.map(|i| x[i] / gamma)
    } else {
        None
    };
    CertificateParams::from_matrix(&p, alpha, x[lay.beta] / gamma, 1.0, tau)
}

/// Maximize the uniform margin `t` of all conditions at `γ = 1` (after the
/// homogeneous rescaling), stopping as soon as a verified certificate or a
/// proof of infeasibility is available.
pub fn search_certificate(
    model: &StabilityModel,
    theorem: TheoremId,
    sector: Option<&SectorSpec>,
    opts: &SearchOptions,
) -> Result<SearchReport> {
    check_model(model, sector, theorem)?;
    if let AlphaMode::Fixed(a) = opts.alpha {
        if !(a > theorem.alpha_floor()) {
            return Err(Error::InvalidSpec(format!(
                "fixed alpha = {a} violates alpha > {} for {theorem}",
                theorem.alpha_floor()
            )));
        }
    }
    let psi = theorem.includes_psi();
    let (problem, lay) = build_problem(model, sector, theorem, opts.alpha, opts.box_limit);
    let n = model.dim();

    let mut x0 = vec![0.0; lay.vars];
    for (i, k, l) in lay.pairs() {
        if k == l {
            x0[i] = 0.5 / n as f64;
        }
    }
    x0[lay.beta] = 1.0;
    if let Some(s) = lay.sigma {
        x0[s] = 0.5 * theorem.alpha_floor() + 1.0;
    }
    if let Some(tau) = lay.tau {
        x0[tau] = 1.0;
    }
    let worst = problem
        .block_margins(&x0)
        .into_iter()
        .fold(f64::INFINITY, f64::min);
    x0[lay.t] = worst.min(0.0) - 1.0;

    let mut found = None;
    let out = problem.maximize(x0, &opts.barrier, |x| {
        let params = extract(&lay, x, opts.alpha, psi);
        match verify(model, sector, &params, theorem) {
            Ok((margins, true)) => {
                found = Some((params, margins));
                true
            }
            _ => false,
        }
    })?;
    let status = match out.status {
        BarrierStatus::Positive => SearchStatus::Feasible,
        BarrierStatus::Negative => SearchStatus::Infeasible,
        BarrierStatus::Undecided => SearchStatus::Undecided,
    };
    let certificate = found.map(|(params, margins)| FeasibilityCertificate {
        theorem,
        n: model.n,
        delta: model.delta,
        sector: sector.copied(),
        params,
        margins,
        feasible: true,
        method: CertificateMethod::Search {
            free_alpha: matches!(opts.alpha, AlphaMode::Free),
        },
    });
    Ok(SearchReport {
        theorem,
        n: model.n,
        status,
        certificate,
        best_margin: out.t,
        upper_bound: out.upper_bound,
        newton_steps: out.newton_steps,
    })
}

/// Result of an ascending scan over `N`.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct MinFeasible {
    pub n: usize,
    pub report: SearchReport,
    /// For the sector L² conditions, the H¹ sector search at the same `N`,
    /// whose feasibility is a standing assumption.
    pub companion: Option<SearchReport>,
}

/// Smallest `N` in `N₀+1 ..= n_max` with a verified certificate.
pub fn min_feasible_n(
    plant: &ReducedPlant,
    gains: &GainSet,
    theorem: TheoremId,
    sector: Option<&SectorSpec>,
    n_max: usize,
    opts: &SearchOptions,
) -> Result<MinFeasible> {
    let mut last = None;
    for n in gains.n0 + 1..=n_max {
        let g = gains.with_n(n);
        let model = plant.model(&g, theorem.includes_psi())?;
        let report = search_certificate(&model, theorem, sector, opts)?;
        if !report.feasible() {
            last = Some(report.best_margin);
            continue;
        }
        let companion = if theorem == TheoremId::C4L2Sector {
            let r = search_certificate(&model, TheoremId::T3H1Sector, sector, opts)?;
            if !r.feasible() {
                last = Some(r.best_margin);
                continue;
            }
            Some(r)
        } else {
            None
        };
        return Ok(MinFeasible {
            n,
            report,
            companion,
        });
    }
    Err(Error::SearchExhausted(format!(
        "{theorem} not feasible for any N <= {n_max} (last margin {:?})",
        last
    )))
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SectorSizeResult {
    /// Largest certified half-width (within the bisection resolution).
    pub dk_max: f64,
    /// Smallest half-width found infeasible or undecided.
    pub dk_fail: f64,
    pub evaluations: usize,
    pub certificate: FeasibilityCertificate,
}

pub const SECTOR_RESOLUTION: f64 = 1e-3;

/// Bisection on `Δk_φ ∈ (0, k_φ)` with the certificate search as oracle.
pub fn max_sector_size(
    model: &StabilityModel,
    k_phi: f64,
    phi_deriv_bound: f64,
    theorem: TheoremId,
    opts: &SearchOptions,
) -> Result<SectorSizeResult> {
    if !theorem.includes_psi() {
        return Err(Error::InvalidSpec(format!(
            "{theorem} has no sector to size"
        )));
    }
    let probe = |dk: f64| -> Result<Option<FeasibilityCertificate>> {
        let sector = SectorSpec::new(k_phi, dk, phi_deriv_bound)?;
        Ok(search_certificate(model, theorem, Some(&sector), opts)?.certificate)
    };
    let (mut lo, mut hi) = (0.0, k_phi);
    let mut best = None;
    let mut evaluations = 0;
    while hi - lo > SECTOR_RESOLUTION {
        let mid = 0.5 * (lo + hi);
        evaluations += 1;
        match probe(mid)? {
            Some(c) => {
                lo = mid;
                best = Some(c);
            }
            None => hi = mid,
        }
    }
    if best.is_none() {
        let tiny = 1e-6 * k_phi;
        evaluations += 1;
        match probe(tiny)? {
            Some(c) => {
                lo = tiny;
                best = Some(c);
            }
            None => {
                return Err(Error::SearchExhausted(format!(
                    "{theorem} infeasible even for dk_phi = {tiny:e}"
                )))
            }
        }
    }
    Ok(SectorSizeResult {
        dk_max: lo,
        dk_fail: hi,
        evaluations,
        certificate: best.expect("set above"),
    })
}

/// Inputs of a sector-size sweep over constant reaction coefficients.
#[derive(Clone, Debug)]
pub struct SweepConfig {
    pub theta1: f64,
    pub theta2: f64,
    pub p: f64,
    pub q_tildes: Vec<f64>,
    pub n: usize,
    pub synthesis: SynthesisOptions,
    pub phi_deriv_bound: f64,
    pub theorem: TheoremId,
    pub n_modes: usize,
    pub tail_modes: usize,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SweepRow {
    pub q_tilde: f64,
    pub q_c: f64,
    pub n0: usize,
    pub k: Vec<f64>,
    pub l: Vec<f64>,
    pub dk_max: f64,
    pub dk_fail: f64,
    pub evaluations: usize,
}

/// `Δk_φ,max` for each reaction coefficient; rows come back in input order.
pub fn sector_sweep(
    cfg: &SweepConfig,
    opts: &SearchOptions,
    exec: Execution,
) -> Result<Vec<SweepRow>> {
    if cfg.q_tildes.is_empty() {
        return Err(Error::InvalidSpec("sweep axis is empty".into()));
    }
    par::map_vec(exec, cfg.q_tildes.clone(), |qt| -> Result<SweepRow> {
        let spec = OperatorSpec::with_auto_split(cfg.theta1, cfg.theta2, cfg.p, qt)?;
        let plant = ReducedPlant::prepare(
            &spec,
            cfg.n_modes.max(cfg.n + 1),
            cfg.tail_modes,
            Execution::Sequential,
        )?;
        let mut so = cfg.synthesis.clone();
        so.n = cfg.n;
        let gains = synthesis::synthesize(&spec, &plant.basis, &plant.lifting, &so)?;
        let model = plant.model(&gains, true)?;
        let r = max_sector_size(&model, so.k_phi, cfg.phi_deriv_bound, cfg.theorem, opts)?;
        Ok(SweepRow {
            q_tilde: qt,
            q_c: spec.q_c,
            n0: gains.n0,
            k: gains.k,
            l: gains.l,
            dk_max: r.dk_max,
            dk_fail: r.dk_fail,
            evaluations: r.evaluations,
        })
    })
    .into_iter()
    .collect()
}

/// `λ_max` of a symmetric matrix after symmetrizing; exposed for audits.
pub fn theta1_lambda_max(theta1: &DMatrix<f64>) -> f64 {
    linalg::lambda_max(theta1)
}

/// `‖𝓛_ψ‖`, the constant used by the sector recipe.
pub fn l_psi_norm(model: &StabilityModel) -> f64 {
    DVector::norm(&model.l_psi)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::spectral::DEFAULT_TAIL_MODES;

    fn plant() -> ReducedPlant {
        let spec = OperatorSpec::reference_plant(-3.0);
        ReducedPlant::prepare(&spec, 40, DEFAULT_TAIL_MODES, Execution::default()).unwrap()
    }

    fn gains(pl: &ReducedPlant, n: usize) -> GainSet {
        synthesis::synthesize(&pl.spec, &pl.basis, &pl.lifting, &SynthesisOptions::repro())
            .unwrap()
            .with_n(n)
    }

    fn sector() -> SectorSpec {
        SectorSpec::new(1.0, 0.5, 9.02).unwrap()
    }

    #[test]
    fn theorem_names_round_trip() {
        for t in TheoremId::ALL {
            assert_eq!(t.short().parse::<TheoremId>().unwrap(), t);
            let js = serde_json::to_string(&t).unwrap();
            assert_eq!(serde_json::from_str::<TheoremId>(&js).unwrap(), t);
        }
        assert!("t5".parse::<TheoremId>().is_err());
    }

    #[test]
    fn bare_theta_is_bordered_lyapunov() {
        let pl = plant();
        let model = pl.model(&gains(&pl, 3), false).unwrap();
        let n = model.dim();
        let p = DMatrix::from_fn(n, n, |i, j| if i == j { 1.0 + i as f64 } else { 0.1 });
        let params = CertificateParams::from_matrix(&p, 2.0, 0.0, 0.0, None);
        let th = assemble_theta(&model, None, &params, TheoremId::T1H1Linear).unwrap();
        let lyap = model.f.transpose() * &p + &p * &model.f + &p * (2.0 * model.delta);
        assert!((th.theta1.view((0, 0), (n, n)) - &lyap).abs().max() < 1e-12);
        let pl_col = &p * &model.l_cal;
        assert!((th.theta1.view((0, n), (n, 1)) - &pl_col).abs().max() < 1e-12);
        assert_eq!(th.theta1[(n, n)], 0.0);
    }

    #[test]
    fn theta2_decreases_in_gamma_when_tail_is_fast() {
        let pl = plant();
        let model = pl.model(&gains(&pl, 3), false).unwrap();
        let p = DMatrix::identity(6, 6);
        let at = |g: f64| {
            assemble_theta(
                &model,
                None,
                &CertificateParams::from_matrix(&p, 2.0, 1.0, g, None),
                TheoremId::T1H1Linear,
            )
            .unwrap()
            .theta2
        };
        assert!(at(0.0) > 0.0);
        assert!(at(1.0) < 0.0);
        assert!(at(2.0) < at(1.0));
    }

    #[test]
    fn wrong_model_or_sector_is_rejected() {
        let pl = plant();
        let g = gains(&pl, 3);
        let lin = pl.model(&g, false).unwrap();
        let sec = pl.model(&g, true).unwrap();
        let params =
            CertificateParams::from_matrix(&DMatrix::identity(6, 6), 2.0, 1.0, 1.0, Some(1.0));
        assert!(assemble_theta(&lin, Some(&sector()), &params, TheoremId::T3H1Sector).is_err());
        assert!(assemble_theta(&sec, None, &params, TheoremId::T3H1Sector).is_err());
        assert!(assemble_theta(&lin, Some(&sector()), &params, TheoremId::T1H1Linear).is_err());
        let small = CertificateParams::from_matrix(&DMatrix::identity(4, 4), 2.0, 1.0, 1.0, None);
        assert!(assemble_theta(&lin, None, &small, TheoremId::T1H1Linear).is_err());
    }

    #[test]
    fn search_finds_sector_certificate_at_three_modes() {
        let pl = plant();
        let model = pl.model(&gains(&pl, 3), true).unwrap();
        let r = search_certificate(
            &model,
            TheoremId::T3H1Sector,
            Some(&sector()),
            &SearchOptions::default(),
        )
        .unwrap();
        assert!(r.feasible(), "{r:?}");
        let cert = r.certificate.unwrap();
        assert!(cert.params.alpha > 1.5);
        let (m, ok) = cert.reverify(&model).unwrap();
        assert!(ok, "{m:?}");
        for s in [1e-3, 7.0] {
            let (_, ok) = verify(
                &model,
                Some(&sector()),
                &cert.params.scaled(s),
                TheoremId::T3H1Sector,
            )
            .unwrap();
            assert!(ok);
        }
        let mut bad = cert.params.clone();
        bad.p = bad
            .p
            .iter()
            .map(|r| r.iter().map(|v| -v).collect())
            .collect();
        assert!(
            !verify(&model, Some(&sector()), &bad, TheoremId::T3H1Sector)
                .unwrap()
                .1
        );
    }

    #[test]
    fn search_proves_infeasibility_for_wide_sector() {
        let pl = plant();
        let model = pl.model(&gains(&pl, 3), true).unwrap();
        let wide = SectorSpec::new(1.0, 0.95, 9.02).unwrap();
        let r = search_certificate(
            &model,
            TheoremId::T3H1Sector,
            Some(&wide),
            &SearchOptions::default(),
        )
        .unwrap();
        assert_eq!(r.status, SearchStatus::Infeasible);
        assert!(r.upper_bound < NEGATIVE_MARGIN);
    }

    #[test]
    fn fixed_alpha_is_never_better_than_free() {
        let pl = plant();
        let model = pl.model(&gains(&pl, 4), false).unwrap();
        let opts = SearchOptions {
            barrier: BarrierOptions {
                max_outer: 9,
                ..Default::default()
            },
            ..Default::default()
        };
        let mut fixed = opts.clone();
        fixed.alpha = AlphaMode::Fixed(2.0);
        // run to completion: accept nothing
        let run = |o: &SearchOptions| {
            let (problem, lay) =
                build_problem(&model, None, TheoremId::T1H1Linear, o.alpha, o.box_limit);
            let mut x0 = vec![0.0; lay.vars];
            for (i, k, l) in lay.pairs() {
                if k == l {
                    x0[i] = 0.5 / model.dim() as f64;
                }
            }
            x0[lay.beta] = 1.0;
            if let Some(s) = lay.sigma {
                x0[s] = 1.5;
            }
            let w = problem
                .block_margins(&x0)
                .into_iter()
                .fold(f64::INFINITY, f64::min);
            x0[lay.t] = w.min(0.0) - 1.0;
            problem.maximize(x0, &o.barrier, |_| false).unwrap().t
        };
        let (tf, tx) = (run(&opts), run(&fixed));
        assert!(tf >= tx - 1e-6, "{tf} {tx}");
        assert!(search_certificate(
            &model,
            TheoremId::T1H1Linear,
            None,
            &SearchOptions {
                alpha: AlphaMode::Fixed(0.5),
                ..Default::default()
            }
        )
        .is_err());
    }

    #[test]
    fn sector_recipe_tau_exceeds_one() {
        let pl = plant();
        let model = pl.model(&gains(&pl, 5), true).unwrap();
        let c = constructive_certificate(&model, TheoremId::T3H1Sector, Some(&sector())).unwrap();
        assert!(c.params.tau.unwrap() > 1.0);
        assert_eq!(c.params.alpha, 2.0);
        assert_eq!(c.params.gamma, 0.2);
    }
}
