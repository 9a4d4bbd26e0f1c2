//! Reaction split, unstable-mode count, pole placement and the shifted
//! Lyapunov solve.

use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::coeff::Coefficient;
use crate::error::{Error, Result};
use crate::linalg;
use crate::par::{self, Execution};
use crate::spectral::{build_stability_model, LiftingData, TailSpectrum};
use crate::sturm_liouville::{OperatorSpec, SpectralBasis};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Pole {
    pub re: f64,
    #[serde(default)]
    pub im: f64,
}

impl Pole {
    pub const fn real(re: f64) -> Self {
        Pole { re, im: 0.0 }
    }
}

impl From<f64> for Pole {
    fn from(re: f64) -> Self {
        Pole::real(re)
    }
}

/// Feedback and observer gains for the first `n0` modes, used with an
/// observer of dimension `n`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GainSet {
    pub n0: usize,
    pub n: usize,
    pub k: Vec<f64>,
    pub l: Vec<f64>,
    pub delta: f64,
    pub k_phi: f64,
    pub q_c: f64,
    pub target_poles: Vec<Pole>,
    pub observer_poles: Vec<Pole>,
}

impl GainSet {
    /// Same gains, different observer dimension.
    pub fn with_n(&self, n: usize) -> Self {
        GainSet { n, ..self.clone() }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n0 == 0 || self.n < self.n0 + 1 {
            return Err(Error::Dimension(format!(
                "need N >= N0 + 1 >= 2, got N0 = {}, N = {}",
                self.n0, self.n
            )));
        }
        if self.k.len() != self.n0 || self.l.len() != self.n0 {
            return Err(Error::Dimension(format!(
                "K has {} and L has {} entries, expected {}",
                self.k.len(),
                self.l.len(),
                self.n0
            )));
        }
        if !(self.delta > 0.0) || !(self.k_phi > 0.0) {
            return Err(Error::InvalidSpec(
                "delta and k_phi must be positive".into(),
            ));
        }
        Ok(())
    }
}

/// `q_c = ⌈max(0, −min q̃)⌉ + 1` and `q = q̃ + q_c`.
pub fn select_qc(q_tilde: &Coefficient) -> (Coefficient, f64) {
    let (lo, _) = q_tilde.range();
    let q_c = (-lo).max(0.0).ceil() + 1.0;
    (q_tilde.shifted(q_c), q_c)
}

/// Smallest `N₀ ≥ 1` with `−λ_n + q_c < −δ` for every `n > N₀`.
pub fn unstable_mode_count(basis: &SpectralBasis, q_c: f64, delta: f64) -> Result<usize> {
    let slow = basis
        .lambdas
        .iter()
        .take_while(|&&lam| -lam + q_c >= -delta)
        .count();
    if slow == basis.n_modes {
        return Err(Error::NotEnoughModes(format!(
            "all {} computed modes satisfy -lambda_n + q_c >= -delta; compute more modes",
            basis.n_modes
        )));
    }
    Ok(slow.max(1))
}

/// Real coefficients `c_0..c_{n-1}` of the monic polynomial with these roots.
fn characteristic_coefficients(poles: &[Pole]) -> Result<Vec<f64>> {
    let mut c = vec![Complex64::new(1.0, 0.0)];
    for p in poles {
        let root = Complex64::new(p.re, p.im);
        let mut next = vec![Complex64::new(0.0, 0.0); c.len() + 1];
        for (i, &ci) in c.iter().enumerate() {
            next[i + 1] += ci;
            next[i] -= root * ci;
        }
        c = next;
    }
    let scale = c.iter().map(|v| v.norm()).fold(1.0, f64::max);
    if c.iter().any(|v| v.im.abs() > 1e-12 * scale) {
        return Err(Error::PolePlacement(
            "complex poles must come in conjugate pairs".into(),
        ));
    }
    Ok(c[..poles.len()].iter().map(|v| v.re).collect())
}

/// Coefficients of `det(sI − m)` (Faddeev–LeVerrier), lowest first, monic
/// term dropped.
fn matrix_characteristic(m: &DMatrix<f64>) -> Vec<f64> {
    let n = m.nrows();
    let mut c = vec![0.0; n];
    let mut mk = DMatrix::<f64>::zeros(n, n);
    let id = DMatrix::<f64>::identity(n, n);
    let mut prev = 1.0;
    for k in 1..=n {
        mk = m * (&mk + &id * prev);
        let ck = -mk.trace() / k as f64;
        c[n - k] = ck;
        prev = ck;
    }
    c
}

/// `K` with `eig(A₀ + b Kᵀ)` equal to `poles` (Ackermann).
pub fn place_poles_feedback(
    a0: &DMatrix<f64>,
    b: &DVector<f64>,
    poles: &[Pole],
) -> Result<DVector<f64>> {
    let n = a0.nrows();
    if poles.len() != n || b.len() != n {
        return Err(Error::Dimension(format!(
            "{} poles and input of length {} for a {n}-dimensional system",
            poles.len(),
            b.len()
        )));
    }
    if b.iter().any(|v| *v == 0.0) {
        return Err(Error::PolePlacement(
            "zero input coefficient: pair is not controllable".into(),
        ));
    }
    let coeffs = characteristic_coefficients(poles)?;
    let mut ctrb = DMatrix::<f64>::zeros(n, n);
    let mut col = b.clone();
    let mut delta_a = DMatrix::<f64>::zeros(n, n);
    let mut power = DMatrix::<f64>::identity(n, n);
    for j in 0..n {
        ctrb.set_column(j, &col);
        col = a0 * col;
        delta_a += &power * coeffs[j];
        power = a0 * power;
    }
    delta_a += power;
    let mut en = DVector::<f64>::zeros(n);
    en[n - 1] = 1.0;
    let row = ctrb
        .transpose()
        .lu()
        .solve(&en)
        .ok_or_else(|| Error::PolePlacement("controllability matrix is singular".into()))?;
    let k = -(delta_a.transpose() * row);

    let closed = a0 + b * k.transpose();
    let got = matrix_characteristic(&closed);
    let scale = coeffs.iter().fold(1.0_f64, |m, c| m.max(c.abs()));
    let err = got
        .iter()
        .zip(&coeffs)
        .fold(0.0_f64, |m, (g, c)| m.max((g - c).abs()));
    if !(err <= 1e-8 * scale) {
        return Err(Error::PolePlacement(format!(
            "placement is ill-conditioned: characteristic polynomial mismatch {err:.3e}"
        )));
    }
    Ok(k)
}

/// `L` with `eig(A₀ − L c₀ᵀ)` equal to `poles`, by duality.
pub fn place_poles_observer(
    a0: &DMatrix<f64>,
    c0: &DVector<f64>,
    poles: &[Pole],
) -> Result<DVector<f64>> {
    Ok(-place_poles_feedback(&a0.transpose(), c0, poles)?)
}

/// `P` solving `FᵀP + PF + 2δP = −I`.
pub fn solve_shifted_lyapunov(f: &DMatrix<f64>, delta: f64) -> Result<DMatrix<f64>> {
    let abscissa = linalg::spectral_abscissa(f);
    if !(abscissa < -delta) {
        return Err(Error::HurwitzMargin {
            block: "F".into(),
            abscissa,
            neg_delta: -delta,
        });
    }
    let n = f.nrows();
    let shifted = f + DMatrix::<f64>::identity(n, n) * delta;
    let mut p = linalg::solve_lyapunov(&shifted, &(-DMatrix::<f64>::identity(n, n)))?;
    linalg::symmetrize(&mut p);
    Ok(p)
}

/// `‖FᵀP + PF + 2δP + I‖_max`.
pub fn shifted_lyapunov_residual(f: &DMatrix<f64>, delta: f64, p: &DMatrix<f64>) -> f64 {
    let n = f.nrows();
    (f.transpose() * p + p * f + p * (2.0 * delta) + DMatrix::<f64>::identity(n, n))
        .abs()
        .max()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthesisOptions {
    /// Feedback poles; one value is replicated `N₀` times. Defaults to `−(δ+1)`.
    pub poles: Option<Vec<Pole>>,
    /// Observer poles; defaults to the feedback poles.
    pub observer_poles: Option<Vec<Pole>>,
    pub delta: f64,
    pub k_phi: f64,
    pub n0: Option<usize>,
    pub n: usize,
}

impl Default for SynthesisOptions {
    fn default() -> Self {
        SynthesisOptions {
            poles: None,
            observer_poles: None,
            delta: 0.3,
            k_phi: 1.0,
            n0: None,
            n: 3,
        }
    }
}

impl SynthesisOptions {
    /// Both pole sets at `−1.3`, `δ = 0.3`, `k_φ = 1`, `N = 3`.
    pub fn repro() -> Self {
        SynthesisOptions {
            poles: Some(vec![Pole::real(-1.3)]),
            ..Default::default()
        }
    }
}

fn expand_poles(poles: &[Pole], n0: usize) -> Result<Vec<Pole>> {
    match poles.len() {
        1 => Ok(vec![poles[0]; n0]),
        m if m == n0 => Ok(poles.to_vec()),
        m => Err(Error::Dimension(format!("{m} poles given for N0 = {n0}"))),
    }
}

/// Determine `N₀` and place both pole sets.
pub fn synthesize(
    spec: &OperatorSpec,
    basis: &SpectralBasis,
    lifting: &LiftingData,
    opts: &SynthesisOptions,
) -> Result<GainSet> {
    let delta = opts.delta;
    if !(delta > 0.0) {
        return Err(Error::InvalidSpec(format!(
            "delta must be positive, got {delta}"
        )));
    }
    let n0 = match opts.n0 {
        Some(n0) if n0 >= 1 => n0,
        Some(_) => return Err(Error::InvalidSpec("N0 must be at least 1".into())),
        None => unstable_mode_count(basis, spec.q_c, delta)?,
    };
    if basis.n_modes < n0 + 1 {
        return Err(Error::NotEnoughModes(format!(
            "N0 = {n0} needs {} modes",
            n0 + 1
        )));
    }
    let default = [Pole::real(-(delta + 1.0))];
    let poles = expand_poles(opts.poles.as_deref().unwrap_or(&default), n0)?;
    let observer_poles = expand_poles(opts.observer_poles.as_deref().unwrap_or(&poles), n0)?;
    for p in poles.iter().chain(&observer_poles) {
        if !(p.re < -delta) {
            return Err(Error::PolePlacement(format!(
                "requested pole {} + {}i is not left of -delta = {}",
                p.re, p.im, -delta
            )));
        }
    }
    let a0 = DMatrix::from_fn(n0, n0, |i, j| {
        if i == j {
            -basis.lambdas[i] + spec.q_c
        } else {
            0.0
        }
    });
    let b0 = DVector::from_fn(n0, |i, _| opts.k_phi * lifting.beta_n[i]);
    let c0 = DVector::from_fn(n0, |i, _| basis.phi0[i]);
    let k = place_poles_feedback(&a0, &b0, &poles)?;
    let l = place_poles_observer(&a0, &c0, &observer_poles)?;
    let gains = GainSet {
        n0,
        n: opts.n.max(n0 + 1),
        k: k.iter().copied().collect(),
        l: l.iter().copied().collect(),
        delta,
        k_phi: opts.k_phi,
        q_c: spec.q_c,
        target_poles: poles,
        observer_poles,
    };
    gains.validate()?;
    Ok(gains)
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct BoundRow {
    pub n: usize,
    pub norm_p: f64,
    pub residual: f64,
    pub min_eig: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct BoundStudy {
    pub rows: Vec<BoundRow>,
    /// `max ‖P^N‖ / min ‖P^N‖`.
    pub ratio: f64,
}

/// `‖P^N‖` for the linear model over a range of observer dimensions with
/// `K`, `L` held fixed.
pub fn observer_bound_study(
    spec: &OperatorSpec,
    basis: &SpectralBasis,
    lifting: &LiftingData,
    tail: &TailSpectrum,
    gains: &GainSet,
    n_range: impl IntoIterator<Item = usize>,
    exec: Execution,
) -> Result<BoundStudy> {
    let ns: Vec<usize> = n_range.into_iter().collect();
    let rows = par::map_vec(exec, ns, |n| -> Result<BoundRow> {
        let model = build_stability_model(spec, basis, lifting, tail, &gains.with_n(n), false)?;
        let p = solve_shifted_lyapunov(&model.f, gains.delta)?;
        Ok(BoundRow {
            n,
            norm_p: linalg::spectral_norm(&p),
            residual: shifted_lyapunov_residual(&model.f, gains.delta, &p),
            min_eig: linalg::lambda_min(&p),
        })
    })
    .into_iter()
    .collect::<Result<Vec<_>>>()?;
    let max = rows
        .iter()
        .map(|r| r.norm_p)
        .fold(f64::NEG_INFINITY, f64::max);
    let min = rows.iter().map(|r| r.norm_p).fold(f64::INFINITY, f64::min);
    Ok(BoundStudy {
        ratio: if rows.is_empty() { 1.0 } else { max / min },
        rows,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::spectral::lifting_coefficients;
    use crate::sturm_liouville::closed_form_basis;
    use approx::assert_relative_eq;
    use std::f64::consts::PI;

    #[test]
    fn qc_rule() {
        for (qt, qc) in [(-3.0, 4.0), (2.0, 1.0), (0.0, 1.0), (-2.5, 4.0)] {
            let (q, c) = select_qc(&Coefficient::Constant(qt));
            assert_eq!(c, qc);
            assert_eq!(q.eval(0.3), qt + qc);
        }
        let (q, c) = select_qc(&Coefficient::polynomial(vec![-1.0, -2.2]));
        assert_eq!(c, 5.0);
        assert!(q.range().0 > 0.0);
    }

    #[test]
    fn unstable_modes_for_reference_plant() {
        let spec = OperatorSpec::reference_plant(-3.0);
        let basis = closed_form_basis(&spec, 5).unwrap();
        assert_eq!(unstable_mode_count(&basis, 4.0, 0.3).unwrap(), 1);
        assert_eq!(unstable_mode_count(&basis, 4.0, 25.0).unwrap(), 2);
        assert_eq!(unstable_mode_count(&basis, 0.0, 0.3).unwrap(), 1);
        assert!(unstable_mode_count(&basis, 4.0, 1e4).is_err());
    }

    #[test]
    fn reference_gains() {
        let spec = OperatorSpec::reference_plant(-3.0);
        let basis = closed_form_basis(&spec, 8).unwrap();
        let lift = lifting_coefficients(&spec, &basis).unwrap();
        let g = synthesize(&spec, &basis, &lift, &SynthesisOptions::repro()).unwrap();
        assert_eq!(g.n0, 1);
        // scalar oracle: K = (p − a)/b, L = (a − p)/c
        let a = -(PI * PI / 4.0 + 1.0) + 4.0;
        assert_relative_eq!(
            g.k[0],
            (-1.3 - a) / (2f64.sqrt() * PI / 2.0),
            max_relative = 1e-12
        );
        assert_relative_eq!(g.l[0], (a + 1.3) / 2f64.sqrt(), max_relative = 1e-12);
        assert!((g.k[0] + 0.8250).abs() < 5e-4);
        assert!((g.l[0] - 1.2958).abs() < 5e-4);
    }

    #[test]
    fn placement_at_open_loop_pole_is_zero_gain() {
        let a = DMatrix::from_diagonal(&DVector::from_vec(vec![-2.0]));
        let k =
            place_poles_feedback(&a, &DVector::from_vec(vec![3.0]), &[Pole::real(-2.0)]).unwrap();
        assert_eq!(k[0], 0.0);
    }

    #[test]
    fn placement_with_distinct_and_complex_poles() {
        let a = DMatrix::from_diagonal(&DVector::from_vec(vec![1.5, 0.2, -0.7]));
        let b = DVector::from_vec(vec![1.0, -2.0, 0.5]);
        let poles = [
            Pole { re: -1.0, im: 0.5 },
            Pole { re: -1.0, im: -0.5 },
            Pole::real(-3.0),
        ];
        let k = place_poles_feedback(&a, &b, &poles).unwrap();
        let mut ev = linalg::eigenvalues(&(&a + &b * k.transpose()));
        ev.sort_by(|x, y| x.0.total_cmp(&y.0).then(x.1.total_cmp(&y.1)));
        let expect = [(-3.0, 0.0), (-1.0, -0.5), (-1.0, 0.5)];
        for (g, e) in ev.iter().zip(expect) {
            assert!(
                (g.0 - e.0).abs() < 1e-8 && (g.1 - e.1).abs() < 1e-8,
                "{ev:?}"
            );
        }
        let c = DVector::from_vec(vec![0.3, 1.0, -1.0]);
        let l = place_poles_observer(&a, &c, &poles).unwrap();
        let obs = &a - &l * c.transpose();
        assert!((linalg::spectral_abscissa(&obs) + 1.0).abs() < 1e-8);
        assert!(place_poles_feedback(&a, &b, &poles[..1]).is_err());
        let unpaired = [
            Pole { re: -1.0, im: 0.5 },
            Pole::real(-1.0),
            Pole::real(-2.0),
        ];
        assert!(place_poles_feedback(&a, &b, &unpaired).is_err());
    }

    #[test]
    fn shifted_lyapunov_diagonal_cases() {
        let p = solve_shifted_lyapunov(&(-DMatrix::<f64>::identity(2, 2)), 0.0).unwrap();
        assert_relative_eq!(p, DMatrix::identity(2, 2) * 0.5, epsilon = 1e-15);
        let f = DMatrix::from_diagonal(&DVector::from_vec(vec![-2.0, -3.0]));
        let p = solve_shifted_lyapunov(&f, 0.5).unwrap();
        assert_relative_eq!(p[(0, 0)], 1.0 / 3.0, epsilon = 1e-15);
        assert_relative_eq!(p[(1, 1)], 1.0 / 5.0, epsilon = 1e-15);
        assert!(solve_shifted_lyapunov(&f, 2.5).is_err());
    }

    #[test]
    fn bound_study_single_entry_and_tail_block() {
        let spec = OperatorSpec::reference_plant(-3.0);
        let basis = closed_form_basis(&spec, 30).unwrap();
        let lift = lifting_coefficients(&spec, &basis).unwrap();
        let tail = TailSpectrum::compute(&spec, &basis, 4096, Execution::default()).unwrap();
        let g = synthesize(&spec, &basis, &lift, &SynthesisOptions::repro()).unwrap();
        let s = observer_bound_study(&spec, &basis, &lift, &tail, &g, [4], Execution::Sequential)
            .unwrap();
        assert_eq!(s.rows.len(), 1);
        assert_eq!(s.ratio, 1.0);
        assert!(s.rows[0].residual < 1e-10);
        // ‖P‖ dominates the decoupled tail-block value 1/(2(λ₂ − q_c − δ)).
        let tail_block = 1.0 / (2.0 * (basis.lambdas[1] - 4.0 - 0.3));
        assert!(s.rows[0].norm_p >= tail_block);
    }
}
