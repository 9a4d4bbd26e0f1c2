//! Small dense linear-algebra helpers on top of nalgebra.

use nalgebra::{DMatrix, DVector, Schur, SymmetricEigen};

use crate::error::{Error, Result};

/// Eigenvalues of the symmetric part of `m`, ascending.
pub fn sym_eigenvalues(m: &DMatrix<f64>) -> Vec<f64> {
    let s = (m + m.transpose()) * 0.5;
    let mut ev: Vec<f64> = SymmetricEigen::new(s).eigenvalues.iter().copied().collect();
    ev.sort_by(|a, b| a.total_cmp(b));
    ev
}

pub fn lambda_max(m: &DMatrix<f64>) -> f64 {
    *sym_eigenvalues(m).last().expect("non-empty matrix")
}

pub fn lambda_min(m: &DMatrix<f64>) -> f64 {
    sym_eigenvalues(m)[0]
}

/// Largest singular value.
pub fn spectral_norm(m: &DMatrix<f64>) -> f64 {
    if m.is_empty() {
        return 0.0;
    }
    m.clone().singular_values().max()
}

/// Eigenvalues of a general real matrix as `(re, im)` pairs.
pub fn eigenvalues(m: &DMatrix<f64>) -> Vec<(f64, f64)> {
    m.clone()
        .complex_eigenvalues()
        .iter()
        .map(|c| (c.re, c.im))
        .collect()
}

/// Largest real part of the spectrum.
pub fn spectral_abscissa(m: &DMatrix<f64>) -> f64 {
    eigenvalues(m)
        .iter()
        .map(|e| e.0)
        .fold(f64::NEG_INFINITY, f64::max)
}

/// Solve `Aᵀ X + X A = C` by Bartels–Stewart on the real Schur form of `A`,
/// followed by a few steps of iterative refinement.
pub fn solve_lyapunov(a: &DMatrix<f64>, c: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let n = a.nrows();
    if a.ncols() != n || c.shape() != (n, n) {
        return Err(Error::Dimension(format!(
            "Lyapunov data shapes {:?} and {:?}",
            a.shape(),
            c.shape()
        )));
    }
    let (q, t) = Schur::new(a.clone()).unpack();
    let blocks = schur_blocks(&t);
    let solve = |rhs: &DMatrix<f64>| -> Result<DMatrix<f64>> {
        let ct = q.transpose() * rhs * &q;
        let y = quasi_triangular_lyapunov(&t, &blocks, &ct)?;
        Ok(&q * y * q.transpose())
    };
    let mut x = solve(c)?;
    let scale = c.abs().max().max(f64::MIN_POSITIVE);
    for _ in 0..4 {
        let r = c - (a.transpose() * &x + &x * a);
        if r.abs().max() <= 1e-15 * scale {
            break;
        }
        x += solve(&r)?;
    }
    if x.iter().any(|v| !v.is_finite()) {
        return Err(Error::Lyapunov(
            "non-finite solution (singular Sylvester operator)".into(),
        ));
    }
    Ok(x)
}

fn schur_blocks(t: &DMatrix<f64>) -> Vec<(usize, usize)> {
    let n = t.nrows();
    let mut blocks = Vec::new();
    let mut i = 0;
    while i < n {
        if i + 1 < n && t[(i + 1, i)] != 0.0 {
            blocks.push((i, 2));
            i += 2;
        } else {
            blocks.push((i, 1));
            i += 1;
        }
    }
    blocks
}

fn quasi_triangular_lyapunov(
    t: &DMatrix<f64>,
    blocks: &[(usize, usize)],
    c: &DMatrix<f64>,
) -> Result<DMatrix<f64>> {
    let n = t.nrows();
    let mut y = DMatrix::<f64>::zeros(n, n);
    for &(i0, bi) in blocks {
        for &(j0, bj) in blocks {
            let mut r = c.view((i0, j0), (bi, bj)).clone_owned();
            if i0 > 0 {
                r -= t.view((0, i0), (i0, bi)).transpose() * y.view((0, j0), (i0, bj));
            }
            if j0 > 0 {
                r -= y.view((i0, 0), (bi, j0)) * t.view((0, j0), (j0, bj));
            }
            let tii = t.view((i0, i0), (bi, bi));
            let tjj = t.view((j0, j0), (bj, bj));
            // vec(TiiᵀY + Y Tjj) = (I ⊗ Tiiᵀ + Tjjᵀ ⊗ I) vec(Y), column-major.
            let m = bi * bj;
            let mut k = DMatrix::<f64>::zeros(m, m);
            for col in 0..bj {
                for row in 0..bi {
                    let eq = col * bi + row;
                    for l in 0..bi {
                        k[(eq, col * bi + l)] += tii[(l, row)];
                    }
                    for l in 0..bj {
                        k[(eq, l * bi + row)] += tjj[(l, col)];
                    }
                }
            }
            let rhs = DVector::from_iterator(m, r.iter().copied());
            let sol = k.lu().solve(&rhs).ok_or_else(|| {
                Error::Lyapunov("singular block: A and -A share an eigenvalue".into())
            })?;
            for col in 0..bj {
                for row in 0..bi {
                    y[(i0 + row, j0 + col)] = sol[col * bi + row];
                }
            }
        }
    }
    Ok(y)
}

/// Reference solver: the same equation as a dense linear system in the
/// `n(n+1)/2` independent entries of a symmetric `X`. `C` must be symmetric.
pub fn solve_lyapunov_dense(a: &DMatrix<f64>, c: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let n = a.nrows();
    let idx = |i: usize, j: usize| {
        let (i, j) = if i <= j { (i, j) } else { (j, i) };
        i * n - i * (i + 1) / 2 + j
    };
    let m = n * (n + 1) / 2;
    let mut k = DMatrix::<f64>::zeros(m, m);
    let mut rhs = DVector::<f64>::zeros(m);
    for i in 0..n {
        for j in i..n {
            let eq = idx(i, j);
            rhs[eq] = c[(i, j)];
            for l in 0..n {
                k[(eq, idx(l, j))] += a[(l, i)];
                k[(eq, idx(i, l))] += a[(l, j)];
            }
        }
    }
    let sol = k
        .lu()
        .solve(&rhs)
        .ok_or_else(|| Error::Lyapunov("singular vectorised system".into()))?;
    Ok(DMatrix::from_fn(n, n, |i, j| sol[idx(i, j)]))
}

/// Symmetrise in place.
pub fn symmetrize(m: &mut DMatrix<f64>) {
    let n = m.nrows();
    for i in 0..n {
        for j in 0..i {
            let v = 0.5 * (m[(i, j)] + m[(j, i)]);
            m[(i, j)] = v;
            m[(j, i)] = v;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    #[test]
    fn diagonal_lyapunov() {
        let a = DMatrix::from_diagonal(&DVector::from_vec(vec![-1.5, -2.5]));
        let x = solve_lyapunov(&a, &(-DMatrix::identity(2, 2))).unwrap();
        assert_relative_eq!(x[(0, 0)], 1.0 / 3.0, epsilon = 1e-15);
        assert_relative_eq!(x[(1, 1)], 1.0 / 5.0, epsilon = 1e-15);
        assert!(x[(0, 1)].abs() < 1e-15);
    }

    #[test]
    fn rotation_block_is_handled() {
        let a = DMatrix::from_row_slice(3, 3, &[-1.0, 4.0, 0.3, -4.0, -1.0, 0.0, 0.5, 0.0, -2.0]);
        let c = -DMatrix::identity(3, 3);
        let x = solve_lyapunov(&a, &c).unwrap();
        let r = a.transpose() * &x + &x * &a - &c;
        assert!(r.abs().max() < 1e-13);
        let xd = solve_lyapunov_dense(&a, &c).unwrap();
        assert!((x - xd).abs().max() < 1e-12);
    }

    #[test]
    fn abscissa_of_rotation() {
        let a = DMatrix::from_row_slice(2, 2, &[-0.5, 3.0, -3.0, -0.5]);
        assert_relative_eq!(spectral_abscissa(&a), -0.5, epsilon = 1e-12);
        assert_relative_eq!(
            spectral_norm(&DMatrix::from_diagonal(&DVector::from_vec(vec![2.0, -3.0]))),
            3.0,
            epsilon = 1e-12
        );
    }

    proptest! {
        #[test]
        fn schur_and_dense_solvers_agree(vals in proptest::collection::vec(-1.0f64..1.0, 25), shift in 3.0f64..6.0) {
            let n = 5;
            let a = DMatrix::from_row_slice(n, n, &vals) - DMatrix::identity(n, n) * shift;
            let c = -DMatrix::identity(n, n);
            let x = solve_lyapunov(&a, &c).unwrap();
            let xd = solve_lyapunov_dense(&a, &c).unwrap();
            let r = a.transpose() * &x + &x * &a - &c;
            prop_assert!(r.abs().max() < 1e-12);
            prop_assert!((&x - &xd).abs().max() < 1e-10 * xd.abs().max());
            prop_assert!(lambda_min(&x) > 0.0);
        }
    }
}
