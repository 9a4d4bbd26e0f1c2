//! A small log-barrier interior-point method for maximizing one variable `t`
//! subject to block linear matrix inequalities `S_j(x) ≻ 0`.
//!
//! Each affine block is `S(x) = C + Σ_i x_i G_i` with every generator written
//! as a sum of symmetric rank-two terms `c (v_a v_bᵀ + v_b v_aᵀ) / 2` over a
//! per-block dictionary of vectors. With `Q = Vᵀ S⁻¹ V` the barrier gradient
//! and Hessian only need entries of `Q`, so a Newton step costs one small
//! factorization per block plus one dense solve in the variables.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Term {
    pub var: usize,
    pub a: usize,
    pub b: usize,
    pub coef: f64,
}

#[derive(Clone, Debug)]
pub struct LmiBlock {
    pub constant: DMatrix<f64>,
    /// Dictionary vectors as columns.
    pub vectors: DMatrix<f64>,
    pub terms: Vec<Term>,
}

impl LmiBlock {
    pub fn new(constant: DMatrix<f64>, vectors: DMatrix<f64>) -> Self {
        LmiBlock {
            constant,
            vectors,
            terms: Vec::new(),
        }
    }

    /// Scalar block `c + Σ coef_i x_i`.
    pub fn scalar(c: f64, coefs: &[(usize, f64)]) -> Self {
        let mut block = LmiBlock::new(
            DMatrix::from_element(1, 1, c),
            DMatrix::from_element(1, 1, 1.0),
        );
        for &(var, coef) in coefs {
            block.push(var, 0, 0, coef);
        }
        block
    }

    pub fn push(&mut self, var: usize, a: usize, b: usize, coef: f64) {
        if coef != 0.0 {
            self.terms.push(Term { var, a, b, coef });
        }
    }

    pub fn dim(&self) -> usize {
        self.constant.nrows()
    }

    pub fn eval(&self, x: &[f64]) -> DMatrix<f64> {
        let mut s = self.constant.clone();
        for t in &self.terms {
            let w = 0.5 * t.coef * x[t.var];
            if w == 0.0 {
                continue;
            }
            let va = self.vectors.column(t.a);
            let vb = self.vectors.column(t.b);
            s.ger(w, &va, &vb, 1.0);
            s.ger(w, &vb, &va, 1.0);
        }
        s
    }
}

#[derive(Clone, Debug)]
pub struct BarrierProblem {
    pub n_vars: usize,
    /// Index of the maximized variable.
    pub objective: usize,
    pub blocks: Vec<LmiBlock>,
}

#[derive(Clone, Debug)]
pub struct BarrierOptions {
    pub mu0: f64,
    pub mu_factor: f64,
    pub max_outer: usize,
    pub max_newton: usize,
    /// Centering stops once half the squared Newton decrement drops below this.
    pub newton_tol: f64,
    /// The run is declared negative once the optimum is bounded by this.
    pub negative_threshold: f64,
}

impl Default for BarrierOptions {
    fn default() -> Self {
        BarrierOptions {
            mu0: 1.0,
            mu_factor: 10.0,
            max_outer: 16,
            max_newton: 80,
            newton_tol: 1e-7,
            negative_threshold: 0.0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BarrierStatus {
    /// `t > 0` reached and accepted by the caller's check.
    Positive,
    /// Duality bound certifies `max t < negative_threshold`.
    Negative,
    /// Iteration budget spent without a decision.
    Undecided,
}

#[derive(Clone, Debug)]
pub struct BarrierOutcome {
    pub x: Vec<f64>,
    pub t: f64,
    /// Upper bound on the optimum from the last completed centering.
    pub upper_bound: f64,
    pub status: BarrierStatus,
    pub newton_steps: usize,
}

struct Factored {
    chol: nalgebra::Cholesky<f64, nalgebra::Dyn>,
}

impl BarrierProblem {
    pub fn degree(&self) -> f64 {
        self.blocks.iter().map(|b| b.dim() as f64).sum()
    }

    fn factor(&self, x: &[f64]) -> Option<(Vec<Factored>, f64)> {
        let mut logdet = 0.0;
        let mut out = Vec::with_capacity(self.blocks.len());
        for b in &self.blocks {
            let chol = b.eval(x).cholesky()?;
            logdet += 2.0
                * chol
                    .l_dirty()
                    .diagonal()
                    .iter()
                    .map(|d| d.ln())
                    .sum::<f64>();
            out.push(Factored { chol });
        }
        Some((out, logdet))
    }

    /// Gradient and Hessian of `−Σ log det S_j`.
    fn derivatives(&self, factors: &[Factored]) -> (DVector<f64>, DMatrix<f64>) {
        let m = self.n_vars;
        let mut g = DVector::zeros(m);
        let mut h = DMatrix::zeros(m, m);
        for (b, f) in self.blocks.iter().zip(factors) {
            let q = b.vectors.transpose() * f.chol.solve(&b.vectors);
            for t in &b.terms {
                g[t.var] -= t.coef * q[(t.a, t.b)];
            }
            let terms = &b.terms;
            for (i, ti) in terms.iter().enumerate() {
                for tk in &terms[i..] {
                    let v = 0.5
                        * ti.coef
                        * tk.coef
                        * (q[(ti.b, tk.a)] * q[(ti.a, tk.b)] + q[(ti.b, tk.b)] * q[(ti.a, tk.a)]);
                    h[(ti.var, tk.var)] += v;
                    if !std::ptr::eq(ti, tk) {
                        h[(tk.var, ti.var)] += v;
                    }
                }
            }
        }
        (g, h)
    }

    /// Maximize `x[objective]` from a strictly feasible `x0`. Whenever the
    /// objective turns positive, `accept` is asked to confirm the point.
    pub fn maximize(
        &self,
        x0: Vec<f64>,
        opts: &BarrierOptions,
        mut accept: impl FnMut(&[f64]) -> bool,
    ) -> Result<BarrierOutcome> {
        let obj = self.objective;
        let nu = self.degree();
        let mut x = x0;
        let (mut factors, mut logdet) = self.factor(&x).ok_or_else(|| {
            Error::SearchExhausted("starting point is not strictly feasible".into())
        })?;
        let mut mu = opts.mu0;
        let mut steps = 0;
        let mut upper = f64::INFINITY;
        for _ in 0..opts.max_outer {
            for _ in 0..opts.max_newton {
                let (mut g, h) = self.derivatives(&factors);
                g[obj] -= mu;
                let dx = match h.clone().cholesky() {
                    Some(c) => -c.solve(&g),
                    None => {
                        let scale = h.diagonal().amax().max(1.0);
                        let reg =
                            &h + DMatrix::identity(self.n_vars, self.n_vars) * (1e-12 * scale);
                        match reg.lu().solve(&g) {
                            Some(s) => -s,
                            None => break,
                        }
                    }
                };
                let slope = g.dot(&dx);
                let decrement = -slope;
                if !(decrement.is_finite()) || decrement < 0.0 {
                    break;
                }
                if 0.5 * decrement < opts.newton_tol {
                    break;
                }
                let f0 = -mu * x[obj] - logdet;
                let mut s = 1.0;
                let mut moved = false;
                while s > 1e-12 {
                    let trial: Vec<f64> = x.iter().zip(dx.iter()).map(|(a, d)| a + s * d).collect();
                    if let Some((tf, tl)) = self.factor(&trial) {
                        let f1 = -mu * trial[obj] - tl;
                        if f1 <= f0 + 0.25 * s * slope {
                            x = trial;
                            factors = tf;
                            logdet = tl;
                            moved = true;
                            break;
                        }
                    }
                    s *= 0.5;
                }
                steps += 1;
                if !moved {
                    break;
                }
                if x[obj] > 0.0 && accept(&x) {
                    return Ok(BarrierOutcome {
                        t: x[obj],
                        x,
                        upper_bound: upper,
                        status: BarrierStatus::Positive,
                        newton_steps: steps,
                    });
                }
            }
            upper = upper.min(x[obj] + nu / mu);
            if upper < opts.negative_threshold {
                return Ok(BarrierOutcome {
                    t: x[obj],
                    x,
                    upper_bound: upper,
                    status: BarrierStatus::Negative,
                    newton_steps: steps,
                });
            }
            mu *= opts.mu_factor;
        }
        Ok(BarrierOutcome {
            t: x[obj],
            x,
            upper_bound: upper,
            status: BarrierStatus::Undecided,
            newton_steps: steps,
        })
    }

    /// Smallest eigenvalue of each block at `x`.
    pub fn block_margins(&self, x: &[f64]) -> Vec<f64> {
        self.blocks
            .iter()
            .map(|b| crate::linalg::lambda_min(&b.eval(x)))
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    /// max t s.t. [[1, x], [x, 1]] − tI ≻ 0 and x − shift − t > 0. With
    /// shift = 0.5: t ≤ 1 − |x| and t ≤ x − 0.5, so t* = 0.25 at x = 0.75.
    fn toy(shift: f64) -> BarrierProblem {
        let (x, t) = (0, 1);
        let mut lmi = LmiBlock::new(DMatrix::identity(2, 2), DMatrix::identity(2, 2));
        lmi.push(x, 0, 1, 2.0);
        lmi.push(t, 0, 0, -1.0);
        lmi.push(t, 1, 1, -1.0);
        BarrierProblem {
            n_vars: 2,
            objective: t,
            blocks: vec![lmi, LmiBlock::scalar(-shift, &[(x, 1.0), (t, -1.0)])],
        }
    }

    #[test]
    fn eval_expands_rank_two_terms() {
        let p = toy(0.5);
        let s = p.blocks[0].eval(&[0.3, 0.1]);
        assert!((s[(0, 1)] - 0.3).abs() < 1e-15 && (s[(1, 0)] - 0.3).abs() < 1e-15);
        assert!((s[(0, 0)] - 0.9).abs() < 1e-15);
    }

    #[test]
    fn converges_to_known_optimum() {
        let p = toy(0.5);
        let out = p
            .maximize(vec![0.0, -1.0], &BarrierOptions::default(), |_| false)
            .unwrap();
        assert_eq!(out.status, BarrierStatus::Undecided);
        assert!((out.t - 0.25).abs() < 1e-9, "{}", out.t);
        assert!((out.x[0] - 0.75).abs() < 1e-6);
        assert!(out.upper_bound >= out.t - 1e-12);
    }

    #[test]
    fn stops_early_on_sign() {
        let p = toy(0.5);
        let out = p
            .maximize(vec![0.0, -1.0], &BarrierOptions::default(), |x| x[1] > 0.0)
            .unwrap();
        assert_eq!(out.status, BarrierStatus::Positive);
        // x ≥ 1.2 + t and |x| ≤ 1 − t cannot both hold with t ≥ 0.
        let p = toy(1.2);
        let out = p
            .maximize(vec![0.0, -2.0], &BarrierOptions::default(), |_| true)
            .unwrap();
        assert_eq!(out.status, BarrierStatus::Negative);
        assert!(out.upper_bound < 0.0 && out.upper_bound >= -0.1 - 1e-9);
    }

    #[test]
    fn hessian_matches_finite_differences() {
        let p = toy(0.5);
        let x = [0.2, -0.5];
        let (f, _) = p.factor(&x).unwrap();
        let (g, h) = p.derivatives(&f);
        let phi = |y: &[f64]| -p.factor(y).unwrap().1;
        let eps = 1e-6;
        for i in 0..2 {
            let mut xp = x;
            let mut xm = x;
            xp[i] += eps;
            xm[i] -= eps;
            let fd = (phi(&xp) - phi(&xm)) / (2.0 * eps);
            assert!((fd - g[i]).abs() < 1e-7);
            let (fp, _) = p.factor(&xp).unwrap();
            let (fm, _) = p.factor(&xm).unwrap();
            let (gp, _) = p.derivatives(&fp);
            let (gm, _) = p.derivatives(&fm);
            for k in 0..2 {
                assert!(((gp[k] - gm[k]) / (2.0 * eps) - h[(k, i)]).abs() < 1e-6);
            }
        }
    }
}
