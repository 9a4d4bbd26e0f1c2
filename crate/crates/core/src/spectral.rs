//! Boundary lifting, projection coefficients, tail constants and the
//! finite-dimensional stability model.

use std::f64::consts::PI;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg;
use crate::par::Execution;
use crate::sturm_liouville::{boundary_traces, OperatorSpec, SpectralBasis};
use crate::synthesis::GainSet;

/// Lifting functions `a`, `b` on the grid with their modal coefficients.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct LiftingData {
    pub grid: Vec<f64>,
    pub a_fun: Vec<f64>,
    pub b_fun: Vec<f64>,
    pub a_n: Vec<f64>,
    pub b_n: Vec<f64>,
    /// `β_n` from the boundary traces.
    pub beta_n: Vec<f64>,
    pub a_norm_sq: f64,
    pub b_norm_sq: f64,
    /// `max_n |β_n − a_n − (−λ_n + q_c) b_n| / (1 + λ_n)`.
    pub identity_defect: f64,
}

/// `a(x) = (2p + 2xp′ − x²q̃) / (cos θ₂ + 2 sin θ₂)`.
pub fn lifting_a(spec: &OperatorSpec, x: f64) -> f64 {
    (2.0 * spec.p.eval(x) + 2.0 * x * spec.p.deriv(x) - x * x * spec.q_tilde.eval(x))
        / spec.lifting_denominator()
}

/// `b(x) = −x² / (cos θ₂ + 2 sin θ₂)`.
pub fn lifting_b(spec: &OperatorSpec, x: f64) -> f64 {
    -x * x / spec.lifting_denominator()
}

/// Tolerance of the two-way `β_n` identity, relative to `1 + λ_n`.
pub const BETA_IDENTITY_TOL: f64 = 1e-6;

pub fn lifting_coefficients(spec: &OperatorSpec, basis: &SpectralBasis) -> Result<LiftingData> {
    let modes: Vec<usize> = (0..basis.n_modes).collect();
    let a_n = basis.project(&modes, |x| lifting_a(spec, x));
    let b_n = basis.project(&modes, |x| lifting_b(spec, x));
    let a_norm_sq = basis.integrate_sq(|x| lifting_a(spec, x));
    let b_norm_sq = basis.integrate_sq(|x| lifting_b(spec, x));
    let p1 = spec.p.eval(1.0);
    let (s2, c2) = (spec.theta2.sin(), spec.theta2.cos());
    let beta_n: Vec<f64> = (0..basis.n_modes)
        .map(|n| p1 * (-c2 * basis.dphi1[n] + s2 * basis.phi1[n]))
        .collect();
    let mut identity_defect: f64 = 0.0;
    for n in 0..basis.n_modes {
        let lam = basis.lambdas[n];
        let projection = a_n[n] + (-lam + spec.q_c) * b_n[n];
        let d = (beta_n[n] - projection).abs() / (1.0 + lam);
        identity_defect = identity_defect.max(d);
        if d > BETA_IDENTITY_TOL {
            return Err(Error::BetaIdentity {
                mode: n + 1,
                trace: beta_n[n],
                projection,
            });
        }
    }
    let grid = basis.grid.clone();
    Ok(LiftingData {
        a_fun: grid.iter().map(|&x| lifting_a(spec, x)).collect(),
        b_fun: grid.iter().map(|&x| lifting_b(spec, x)).collect(),
        grid,
        a_n,
        b_n,
        beta_n,
        a_norm_sq,
        b_norm_sq,
        identity_defect,
    })
}

/// Parseval complements `(‖R_N a‖², ‖R_N b‖²)`.
pub fn tail_norms(lifting: &LiftingData, n: usize) -> Result<(f64, f64)> {
    if n > lifting.a_n.len() {
        return Err(Error::NotEnoughModes(format!(
            "tail norms need {n} projection coefficients, have {}",
            lifting.a_n.len()
        )));
    }
    let complement = |total: f64, coeffs: &[f64]| -> Result<f64> {
        let r = total - coeffs[..n].iter().map(|c| c * c).sum::<f64>();
        if r < -(1e-10 * total + 1e-13) {
            return Err(Error::NegativeTail { value: r });
        }
        Ok(r.max(0.0))
    };
    Ok((
        complement(lifting.a_norm_sq, &lifting.a_n)?,
        complement(lifting.b_norm_sq, &lifting.b_n)?,
    ))
}

/// Eigenvalues and left traces far into the spectrum, for tail sums.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TailSpectrum {
    pub lambdas: Vec<f64>,
    pub phi0: Vec<f64>,
    pub p_lower: f64,
    /// `1.5 · max |φ_n(0)|` over the computed modes.
    pub c_sup: f64,
}

/// Default number of modes kept for tail sums.
pub const DEFAULT_TAIL_MODES: usize = 1 << 16;

impl TailSpectrum {
    /// The first modes come from `basis`; the rest are shot without samples.
    pub fn compute(
        spec: &OperatorSpec,
        basis: &SpectralBasis,
        n_max: usize,
        exec: Execution,
    ) -> Result<Self> {
        let k = basis.n_modes.min(n_max);
        let mut lambdas = basis.lambdas[..k].to_vec();
        let mut phi0 = basis.phi0[..k].to_vec();
        for (lam, f0) in boundary_traces(spec, k + 1, n_max, exec)? {
            lambdas.push(lam);
            phi0.push(f0);
        }
        let c_sup = 1.5 * phi0.iter().fold(0.0_f64, |m, v| m.max(v.abs()));
        Ok(TailSpectrum {
            lambdas,
            phi0,
            p_lower: spec.bounds().p_lower,
            c_sup,
        })
    }

    pub fn len(&self) -> usize {
        self.lambdas.len()
    }

    pub fn is_empty(&self) -> bool {
        self.lambdas.is_empty()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum TailExponent {
    One,
    ThreeQuarters,
}

impl TailExponent {
    fn value(self) -> f64 {
        match self {
            TailExponent::One => 1.0,
            TailExponent::ThreeQuarters => 0.75,
        }
    }
}

/// An upper estimate of `Σ_{n>N} φ_n(0)² / λ_n^e`.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct TailSum {
    pub value: f64,
    pub partial: f64,
    pub remainder: f64,
    pub n_tail: usize,
}

/// Partial sum up to an adaptive `n_tail ≥ N + 200` plus a rigorous remainder
/// from `|φ_n(0)| ≤ c_sup` and `λ_n ≥ π²(n−1)²p_*`.
pub fn tail_mphi(tail: &TailSpectrum, n: usize, exponent: TailExponent) -> Result<TailSum> {
    let e = exponent.value();
    let len = tail.len();
    if len < n + 200 {
        return Err(Error::NotEnoughModes(format!(
            "tail sum past N = {n} needs at least {} modes, have {len}",
            n + 200
        )));
    }
    let base = PI * PI * tail.p_lower;
    let c2 = tail.c_sup * tail.c_sup;
    let remainder = |nt: usize| -> f64 {
        let m = (nt - 1) as f64;
        match exponent {
            TailExponent::One => c2 / (base * m),
            TailExponent::ThreeQuarters => c2 * base.powf(-0.75) * 2.0 / m.sqrt(),
        }
    };
    let term = |i: usize| tail.phi0[i] * tail.phi0[i] / tail.lambdas[i].powf(e);
    let mut nt = n + 200;
    let mut partial: f64 = (n..nt).map(term).sum();
    loop {
        let r = remainder(nt);
        if r <= 1e-3 * partial || nt == len {
            if r > 0.1 * partial {
                return Err(Error::TailRemainder {
                    remainder: r,
                    partial,
                    n_tail: nt,
                });
            }
            return Ok(TailSum {
                value: partial + r,
                partial,
                remainder: r,
                n_tail: nt,
            });
        }
        let next = (2 * nt).min(len);
        partial += (nt..next).map(term).sum::<f64>();
        nt = next;
    }
}

/// Closed-loop matrices of the truncated model with the scalings
/// `z̃_n = ẑ_n / λ_n`, `ẽ_n = √λ_n e_n`.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct StabilityModel {
    pub n0: usize,
    pub n: usize,
    pub a0: DMatrix<f64>,
    pub a1: DMatrix<f64>,
    pub b0: DVector<f64>,
    pub b1_tilde: DVector<f64>,
    pub c0: DVector<f64>,
    pub c1_tilde: DVector<f64>,
    pub k: DVector<f64>,
    pub l: DVector<f64>,
    pub f: DMatrix<f64>,
    pub l_cal: DVector<f64>,
    pub l_psi: DVector<f64>,
    pub k_tilde: DVector<f64>,
    /// Row `E` such that `u̇ = E X̃`; length `2N+1` (linear) or `2N+2`.
    pub e: DVector<f64>,
    pub r_a: f64,
    pub r_b: f64,
    pub m_tail: f64,
    pub m_tail34: f64,
    pub lambda_next: f64,
    pub q_c: f64,
    pub delta: f64,
    pub k_phi: f64,
    pub a_norm_sq: f64,
    pub includes_psi: bool,
}

impl StabilityModel {
    /// Dimension of `F`.
    pub fn dim(&self) -> usize {
        2 * self.n
    }
}

pub fn build_stability_model(
    spec: &OperatorSpec,
    basis: &SpectralBasis,
    lifting: &LiftingData,
    tail: &TailSpectrum,
    gains: &GainSet,
    includes_psi: bool,
) -> Result<StabilityModel> {
    let (n0, n) = (gains.n0, gains.n);
    if n0 == 0 || n < n0 + 1 {
        return Err(Error::Dimension(format!(
            "need N >= N0 + 1 >= 2, got N0 = {n0}, N = {n}"
        )));
    }
    if gains.k.len() != n0 || gains.l.len() != n0 {
        return Err(Error::Dimension(format!(
            "K has {} and L has {} entries, expected N0 = {n0}",
            gains.k.len(),
            gains.l.len()
        )));
    }
    if basis.n_modes < n || tail.len() < n + 1 {
        return Err(Error::NotEnoughModes(format!(
            "model with N = {n} needs {} modes",
            n + 1
        )));
    }
    let qc = spec.q_c;
    let delta = gains.delta;
    let kp = if includes_psi { gains.k_phi } else { 1.0 };
    let lam = &basis.lambdas;
    let n1 = n - n0;

    let a0 = DMatrix::from_fn(n0, n0, |i, j| if i == j { -lam[i] + qc } else { 0.0 });
    let a1 = DMatrix::from_fn(n1, n1, |i, j| if i == j { -lam[n0 + i] + qc } else { 0.0 });
    let b0 = DVector::from_fn(n0, |i, _| lifting.beta_n[i]);
    let b1_tilde = DVector::from_fn(n1, |i, _| lifting.beta_n[n0 + i] / lam[n0 + i]);
    let c0 = DVector::from_fn(n0, |i, _| basis.phi0[i]);
    let c1_tilde = DVector::from_fn(n1, |i, _| basis.phi0[n0 + i] / lam[n0 + i].sqrt());
    let k = DVector::from_vec(gains.k.clone());
    let l = DVector::from_vec(gains.l.clone());

    let closed = &a0 + &b0 * k.transpose() * kp;
    let observer = &a0 - &l * c0.transpose();
    for (name, m) in [("A0 + k_phi B0 K", &closed), ("A0 - L C0", &observer)] {
        let abscissa = linalg::spectral_abscissa(m);
        if !(abscissa < -delta) {
            return Err(Error::HurwitzMargin {
                block: name.into(),
                abscissa,
                neg_delta: -delta,
            });
        }
    }
    if !(-lam[n0] + qc < -delta) {
        return Err(Error::HurwitzMargin {
            block: "A1 (mode N0+1)".into(),
            abscissa: -lam[n0] + qc,
            neg_delta: -delta,
        });
    }

    let d = 2 * n;
    let (i_e, i_z, i_t) = (n0, 2 * n0, 2 * n0 + n1);
    let mut f = DMatrix::zeros(d, d);
    f.view_mut((0, 0), (n0, n0)).copy_from(&closed);
    f.view_mut((0, i_e), (n0, n0))
        .copy_from(&(&l * c0.transpose()));
    f.view_mut((0, i_t), (n0, n1))
        .copy_from(&(&l * c1_tilde.transpose()));
    f.view_mut((i_e, i_e), (n0, n0)).copy_from(&observer);
    f.view_mut((i_e, i_t), (n0, n1))
        .copy_from(&(-&l * c1_tilde.transpose()));
    f.view_mut((i_z, 0), (n1, n0))
        .copy_from(&(&b1_tilde * k.transpose() * kp));
    f.view_mut((i_z, i_z), (n1, n1)).copy_from(&a1);
    f.view_mut((i_t, i_t), (n1, n1)).copy_from(&a1);

    let mut l_cal = DVector::zeros(d);
    l_cal.rows_mut(0, n0).copy_from(&l);
    l_cal.rows_mut(i_e, n0).copy_from(&(-&l));
    let mut l_psi = DVector::zeros(d);
    l_psi.rows_mut(0, n0).copy_from(&b0);
    l_psi.rows_mut(i_z, n1).copy_from(&b1_tilde);
    let mut k_tilde = DVector::zeros(d);
    k_tilde.rows_mut(0, n0).copy_from(&k);

    let extra = if includes_psi { 2 } else { 1 };
    let mut top = DMatrix::zeros(n0, d + extra);
    top.view_mut((0, 0), (n0, d)).copy_from(&f.rows(0, n0));
    top.view_mut((0, d), (n0, 1)).copy_from(&l);
    if includes_psi {
        top.view_mut((0, d + 1), (n0, 1)).copy_from(&b0);
    }
    let e = top.transpose() * &k;

    let (r_a, r_b) = tail_norms(lifting, n)?;
    let m_tail = tail_mphi(tail, n, TailExponent::One)?.value;
    let m_tail34 = tail_mphi(tail, n, TailExponent::ThreeQuarters)?.value;
    let lambda_next = if basis.n_modes > n {
        lam[n]
    } else {
        tail.lambdas[n]
    };

    Ok(StabilityModel {
        n0,
        n,
        a0,
        a1,
        b0,
        b1_tilde,
        c0,
        c1_tilde,
        k,
        l,
        f,
        l_cal,
        l_psi,
        k_tilde,
        e,
        r_a,
        r_b,
        m_tail,
        m_tail34,
        lambda_next,
        q_c: qc,
        delta,
        k_phi: kp,
        a_norm_sq: lifting.a_norm_sq,
        includes_psi,
    })
}

/// Everything derived from an [`OperatorSpec`] that the synthesis and
/// certificate code needs.
#[derive(Clone, Debug)]
pub struct ReducedPlant {
    pub spec: OperatorSpec,
    pub basis: SpectralBasis,
    pub lifting: LiftingData,
    pub tail: TailSpectrum,
}

impl ReducedPlant {
    pub fn prepare(
        spec: &OperatorSpec,
        n_modes: usize,
        tail_modes: usize,
        exec: Execution,
    ) -> Result<Self> {
        let basis = crate::sturm_liouville::solve_eigenproblem_with(spec, n_modes, exec)?;
        let lifting = lifting_coefficients(spec, &basis)?;
        let tail = TailSpectrum::compute(spec, &basis, tail_modes.max(n_modes), exec)?;
        Ok(ReducedPlant {
            spec: spec.clone(),
            basis,
            lifting,
            tail,
        })
    }

    pub fn model(&self, gains: &GainSet, includes_psi: bool) -> Result<StabilityModel> {
        build_stability_model(
            &self.spec,
            &self.basis,
            &self.lifting,
            &self.tail,
            gains,
            includes_psi,
        )
    }
}

/// Modal snapshot of the closed loop at one instant.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ModeState {
    pub z_n: Vec<f64>,
    pub w_n: Vec<f64>,
    pub hat_z_n: Vec<f64>,
    pub hat_w_n: Vec<f64>,
    pub e_n: Vec<f64>,
    pub zeta: f64,
    pub u: f64,
    pub u_phi: f64,
    pub v_phi: f64,
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sturm_liouville::{closed_form_basis, solve_eigenproblem};
    use crate::synthesis::{synthesize, SynthesisOptions};
    use approx::assert_relative_eq;
    use std::f64::consts::FRAC_PI_2;

    fn setup() -> (OperatorSpec, SpectralBasis, LiftingData) {
        let spec = OperatorSpec::reference_plant(-3.0);
        let basis = solve_eigenproblem(&spec, 24).unwrap();
        let lift = lifting_coefficients(&spec, &basis).unwrap();
        (spec, basis, lift)
    }

    #[test]
    fn lifting_functions_for_dirichlet_actuation() {
        let (spec, _, lift) = setup();
        for (i, &x) in lift.grid.iter().enumerate().step_by(101) {
            assert_relative_eq!(lift.b_fun[i], -x * x, epsilon = 1e-15);
            assert_relative_eq!(lift.a_fun[i], 2.0 + 3.0 * x * x, epsilon = 1e-14);
        }
        assert_relative_eq!(lift.beta_n[0], 2f64.sqrt() * PI / 2.0, max_relative = 1e-12);
        assert_relative_eq!(lift.b_norm_sq, 0.2, max_relative = 1e-13);
        assert!(lift.identity_defect < 1e-10);
        let _ = spec;
    }

    #[test]
    fn parseval_tails_shrink_and_match_analytic_norm() {
        let (_, _, lift) = setup();
        let mut prev = f64::INFINITY;
        for n in 1..=20 {
            let (ra, rb) = tail_norms(&lift, n).unwrap();
            assert!(ra <= prev + 1e-15);
            prev = ra;
            let rb_direct = 0.2 - lift.b_n[..n].iter().map(|b| b * b).sum::<f64>();
            assert_relative_eq!(rb, rb_direct, epsilon = 1e-15);
        }
        assert!(tail_norms(&lift, 25).is_err());
    }

    #[test]
    fn single_mode_function_has_zero_tail() {
        let spec = OperatorSpec::reference_plant(-3.0);
        let basis = closed_form_basis(&spec, 6).unwrap();
        let a_n = basis.project(&[0, 1, 2], |x| basis.eval(0, x));
        let lift = LiftingData {
            grid: vec![],
            a_fun: vec![],
            b_fun: vec![],
            a_n: a_n.clone(),
            b_n: a_n,
            beta_n: vec![],
            a_norm_sq: 1.0,
            b_norm_sq: 1.0,
            identity_defect: 0.0,
        };
        for n in 1..=3 {
            let (ra, _) = tail_norms(&lift, n).unwrap();
            assert!(ra < 1e-13);
        }
    }

    #[test]
    fn tail_sums_are_upper_estimates_and_ordered() {
        let (spec, basis, _) = setup();
        let tail = TailSpectrum::compute(&spec, &basis, 1 << 14, Execution::default()).unwrap();
        let direct = |n: usize, e: f64| -> f64 {
            (n + 1..=1_000_000)
                .map(|m| {
                    let mu = (2 * m - 1) as f64 * FRAC_PI_2;
                    2.0 / (mu * mu + 1.0).powf(e)
                })
                .sum()
        };
        let t3 = tail_mphi(&tail, 3, TailExponent::One).unwrap();
        let exact = direct(3, 1.0);
        assert!(t3.value >= exact);
        assert!(t3.value <= exact * 1.001, "{} vs {exact}", t3.value);
        let t4 = tail_mphi(&tail, 4, TailExponent::One).unwrap();
        assert!(t4.value < t3.value);
        let t34 = tail_mphi(&tail, 3, TailExponent::ThreeQuarters).unwrap();
        assert!(t34.value >= t3.value);
        assert!(t34.value >= direct(3, 0.75));
    }

    #[test]
    fn model_blocks_and_spectrum() {
        let (spec, basis, lift) = setup();
        let tail = TailSpectrum::compute(&spec, &basis, 4096, Execution::default()).unwrap();
        let gains = synthesize(&spec, &basis, &lift, &SynthesisOptions::repro())
            .unwrap()
            .with_n(4);
        let m = build_stability_model(&spec, &basis, &lift, &tail, &gains, true).unwrap();
        assert_eq!(m.f.shape(), (8, 8));
        assert_eq!(m.e.len(), 10);
        // zero blocks
        assert_eq!(m.f[(1, 0)], 0.0);
        assert_eq!(m.f[(0, 1 + 1)], 0.0);
        assert_eq!(m.f[(5, 2)], 0.0);
        let mut ev: Vec<f64> = linalg::eigenvalues(&m.f).iter().map(|e| e.0).collect();
        ev.sort_by(|a, b| a.total_cmp(b));
        let mut expect = vec![-1.3, -1.3];
        for n in 1..4 {
            expect.push(-basis.lambdas[n] + 4.0);
            expect.push(-basis.lambdas[n] + 4.0);
        }
        expect.sort_by(|a, b| a.total_cmp(b));
        for (a, b) in ev.iter().zip(&expect) {
            assert!(
                (a - b).abs() < 1e-6 * b.abs().max(1.0),
                "{ev:?} vs {expect:?}"
            );
        }
        let lin = build_stability_model(&spec, &basis, &lift, &tail, &gains, false).unwrap();
        assert_eq!(lin.e.len(), 9);
        assert_eq!(lin.f, m.f);
    }
}
