//! Numerical kernels shared by the three training pipelines.

use nalgebra::{DMatrix, DVector, Schur};

use crate::error::{Result, ZslError};
use crate::matrix::Matrix;

/// `L W + W R + M = 0` with `L: n x n`, `R: d x d`, `M: n x d`.
#[derive(Debug, Clone, PartialEq)]
pub struct SylvesterProblem {
    pub l: Matrix,
    pub r: Matrix,
    pub m: Matrix,
}

impl SylvesterProblem {
    pub fn new(l: Matrix, r: Matrix, m: Matrix) -> Result<Self> {
        if !l.is_square() || !r.is_square() {
            return Err(ZslError::Shape(format!(
                "Sylvester L ({}x{}) and R ({}x{}) must be square",
                l.nrows(),
                l.ncols(),
                r.nrows(),
                r.ncols()
            )));
        }
        if m.nrows() != l.nrows() || m.ncols() != r.nrows() {
            return Err(ZslError::Shape(format!(
                "Sylvester M is {}x{}, expected {}x{}",
                m.nrows(),
                m.ncols(),
                l.nrows(),
                r.nrows()
            )));
        }
        Ok(SylvesterProblem { l, r, m })
    }

    /// `‖LW + WR + M‖_F / (‖L‖‖W‖ + ‖W‖‖R‖ + ‖M‖)`.
    pub fn relative_residual(&self, w: &Matrix) -> f64 {
        let res = &self.l * w + w * &self.r + &self.m;
        let wn = w.norm();
        let denom = self.l.norm() * wn + wn * self.r.norm() + self.m.norm();
        if denom == 0.0 {
            res.norm()
        } else {
            res.norm() / denom
        }
    }
}

/// Relative eigenvalue gap below which `L` and `-R` count as sharing an eigenvalue.
pub const SYLVESTER_GAP_TOL: f64 = 1e-10;
const SCHUR_MAX_ITER: usize = 10_000;
const KRONECKER_FALLBACK_DIM: usize = 32;

fn fmt_complex(re: f64, im: f64) -> String {
    if im == 0.0 {
        format!("{re:.6e}")
    } else {
        format!("{re:.6e}{im:+.6e}i")
    }
}

fn check_spectra(
    l_eigs: &[nalgebra::Complex<f64>],
    r_eigs: &[nalgebra::Complex<f64>],
) -> Result<()> {
    let radius = l_eigs
        .iter()
        .chain(r_eigs)
        .map(|z| z.norm())
        .fold(0.0_f64, f64::max);
    let tol = SYLVESTER_GAP_TOL * radius.max(f64::MIN_POSITIVE);
    for a in l_eigs {
        for b in r_eigs {
            // singular iff a == -b
            if (a + b).norm() < tol {
                return Err(ZslError::SingularSylvester {
                    left: fmt_complex(a.re, a.im),
                    right: fmt_complex(-b.re, -b.im),
                    tol,
                });
            }
        }
    }
    Ok(())
}

/// Solves `L W + W R + M = 0` by Bartels–Stewart: real Schur forms of both
/// coefficients, a quasi-triangular column sweep, then back-transformation.
pub fn solve_sylvester(p: &SylvesterProblem) -> Result<Matrix> {
    let n = p.l.nrows();
    let d = p.r.nrows();
    let schur_l = Schur::try_new(p.l.clone(), f64::EPSILON, SCHUR_MAX_ITER);
    let schur_r = Schur::try_new(p.r.clone(), f64::EPSILON, SCHUR_MAX_ITER);
    let (schur_l, schur_r) = match (schur_l, schur_r) {
        (Some(a), Some(b)) => (a, b),
        _ if n <= KRONECKER_FALLBACK_DIM && d <= KRONECKER_FALLBACK_DIM => {
            log::warn!("Schur decomposition did not converge; using the Kronecker solve");
            return solve_sylvester_kronecker(p);
        }
        _ => {
            return Err(ZslError::Numerical(
                "Schur decomposition did not converge".into(),
            ))
        }
    };
    let l_eigs: Vec<_> = schur_l.complex_eigenvalues().iter().copied().collect();
    let r_eigs: Vec<_> = schur_r.complex_eigenvalues().iter().copied().collect();
    check_spectra(&l_eigs, &r_eigs)?;

    let (u, tl) = schur_l.unpack();
    let (v, tr) = schur_r.unpack();
    let f = -(u.transpose() * &p.m * &v);
    let y = solve_quasi_triangular(&tl, &tr, &f)?;
    let w = &u * y * v.transpose();
    if w.iter().any(|x| !x.is_finite()) {
        return Err(ZslError::Numerical("non-finite Sylvester solution".into()));
    }
    Ok(w)
}

/// Solves `T_L Y + Y T_R = F` for upper quasi-triangular `T_L`, `T_R`,
/// sweeping the (1x1 or 2x2) diagonal blocks of `T_R` left to right.
fn solve_quasi_triangular(tl: &Matrix, tr: &Matrix, f: &Matrix) -> Result<Matrix> {
    let n = tl.nrows();
    let d = tr.nrows();
    let mut y = DMatrix::<f64>::zeros(n, d);
    let mut j = 0;
    while j < d {
        let two = j + 1 < d && tr[(j + 1, j)] != 0.0;
        if !two {
            let mut rhs: DVector<f64> = f.column(j).into_owned();
            for k in 0..j {
                let t = tr[(k, j)];
                if t != 0.0 {
                    rhs -= y.column(k) * t;
                }
            }
            let mut a = tl.clone();
            for i in 0..n {
                a[(i, i)] += tr[(j, j)];
            }
            let col = a
                .lu()
                .solve(&rhs)
                .ok_or_else(|| ZslError::Numerical(format!("singular block at column {j}")))?;
            y.set_column(j, &col);
            j += 1;
        } else {
            let mut rhs = DVector::<f64>::zeros(2 * n);
            let mut r0: DVector<f64> = f.column(j).into_owned();
            let mut r1: DVector<f64> = f.column(j + 1).into_owned();
            for k in 0..j {
                r0 -= y.column(k) * tr[(k, j)];
                r1 -= y.column(k) * tr[(k, j + 1)];
            }
            rhs.rows_mut(0, n).copy_from(&r0);
            rhs.rows_mut(n, n).copy_from(&r1);
            let mut a = DMatrix::<f64>::zeros(2 * n, 2 * n);
            a.view_mut((0, 0), (n, n)).copy_from(tl);
            a.view_mut((n, n), (n, n)).copy_from(tl);
            for i in 0..n {
                a[(i, i)] += tr[(j, j)];
                a[(i, n + i)] += tr[(j + 1, j)];
                a[(n + i, i)] += tr[(j, j + 1)];
                a[(n + i, n + i)] += tr[(j + 1, j + 1)];
            }
            let sol = a
                .lu()
                .solve(&rhs)
                .ok_or_else(|| ZslError::Numerical(format!("singular 2x2 block at column {j}")))?;
            y.set_column(j, &sol.rows(0, n).into_owned());
            y.set_column(j + 1, &sol.rows(n, n).into_owned());
            j += 2;
        }
    }
    Ok(y)
}

/// Dense solve of `(I ⊗ L + Rᵀ ⊗ I) vec(W) = -vec(M)` (column-stacked vec).
/// Only sensible for small problems.
pub fn solve_sylvester_kronecker(p: &SylvesterProblem) -> Result<Matrix> {
    let n = p.l.nrows();
    let d = p.r.nrows();
    let nd = n * d;
    let mut k = DMatrix::<f64>::zeros(nd, nd);
    for b in 0..d {
        for a in 0..d {
            let rab = p.r[(a, b)];
            for i in 0..n {
                k[(b * n + i, a * n + i)] += rab;
            }
        }
        k.view_mut((b * n, b * n), (n, n)).add_assign_from(&p.l);
    }
    let rhs = DVector::from_iterator(nd, p.m.iter().map(|v| -v));
    let sol = k
        .lu()
        .solve(&rhs)
        .ok_or_else(|| ZslError::Numerical("singular Kronecker system".into()))?;
    Ok(DMatrix::from_column_slice(n, d, sol.as_slice()))
}

trait AddAssignFrom {
    fn add_assign_from(&mut self, other: &Matrix);
}

impl AddAssignFrom for nalgebra::DMatrixViewMut<'_, f64> {
    fn add_assign_from(&mut self, other: &Matrix) {
        for j in 0..other.ncols() {
            for i in 0..other.nrows() {
                self[(i, j)] += other[(i, j)];
            }
        }
    }
}

/// Eigenpairs of a symmetric matrix, eigenvalues descending; column `i` of
/// `eigenvectors` pairs with `eigenvalues[i]`.
#[derive(Debug, Clone, PartialEq)]
pub struct EigResult {
    pub eigenvalues: Vec<f64>,
    pub eigenvectors: Matrix,
}

impl EigResult {
    pub fn reconstruct(&self) -> Matrix {
        let lam = DMatrix::from_diagonal(&DVector::from_column_slice(&self.eigenvalues));
        &self.eigenvectors * lam * self.eigenvectors.transpose()
    }
}

pub const SYMMETRY_TOL: f64 = 1e-9;
const JACOBI_MAX_SWEEPS: usize = 100;

/// Symmetric eigendecomposition by cyclic Jacobi rotations. The input is
/// symmetrized as `(B + Bᵀ)/2`; a symmetry defect above `1e-9` (relative to
/// `max(1, ‖B‖_max)`) is rejected.
pub fn sym_eig(b: &Matrix) -> Result<EigResult> {
    if !b.is_square() {
        return Err(ZslError::Shape(format!(
            "sym_eig needs a square matrix, got {}x{}",
            b.nrows(),
            b.ncols()
        )));
    }
    let n = b.nrows();
    let scale = b.amax().max(1.0);
    let defect = (b - b.transpose()).amax();
    if defect > SYMMETRY_TOL * scale {
        return Err(ZslError::Shape(format!(
            "sym_eig input is not symmetric (defect {defect:e})"
        )));
    }
    let mut a = (b + b.transpose()) * 0.5;
    let mut q = DMatrix::<f64>::identity(n, n);
    let total = a.norm();
    for _ in 0..JACOBI_MAX_SWEEPS {
        let mut off = 0.0;
        for i in 0..n {
            for j in (i + 1)..n {
                off += a[(i, j)] * a[(i, j)];
            }
        }
        if off.sqrt() <= 1e-16 * total || off == 0.0 {
            break;
        }
        for p in 0..n {
            for r in (p + 1)..n {
                let apr = a[(p, r)];
                if apr.abs() < f64::MIN_POSITIVE {
                    continue;
                }
                let theta = (a[(r, r)] - a[(p, p)]) / (2.0 * apr);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                // A <- Jᵀ A J with J the (p, r) rotation
                for k in 0..n {
                    let akp = a[(k, p)];
                    let akr = a[(k, r)];
                    a[(k, p)] = c * akp - s * akr;
                    a[(k, r)] = s * akp + c * akr;
                }
                for k in 0..n {
                    let apk = a[(p, k)];
                    let ark = a[(r, k)];
                    a[(p, k)] = c * apk - s * ark;
                    a[(r, k)] = s * apk + c * ark;
                }
                a[(p, r)] = 0.0;
                a[(r, p)] = 0.0;
                for k in 0..n {
                    let qkp = q[(k, p)];
                    let qkr = q[(k, r)];
                    q[(k, p)] = c * qkp - s * qkr;
                    q[(k, r)] = s * qkp + c * qkr;
                }
            }
        }
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| a[(j, j)].total_cmp(&a[(i, i)]).then(i.cmp(&j)));
    let eigenvalues = order.iter().map(|&i| a[(i, i)]).collect();
    let eigenvectors = DMatrix::from_fn(n, n, |i, j| q[(i, order[j])]);
    Ok(EigResult {
        eigenvalues,
        eigenvectors,
    })
}

/// Minimum-norm least-squares solution of `A x ≈ b` (SVD based, so
/// rank-deficient `A` is fine).
pub fn least_squares(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    if a.nrows() != b.nrows() {
        return Err(ZslError::Shape(format!(
            "least_squares: A has {} rows, b has {}",
            a.nrows(),
            b.nrows()
        )));
    }
    let svd = a.clone().svd(true, true);
    let smax = svd.singular_values.amax();
    let eps = f64::EPSILON * (a.nrows().max(a.ncols()) as f64) * smax;
    svd.solve(b, eps)
        .map_err(|e| ZslError::Numerical(format!("least squares: {e}")))
}

pub fn cosine_similarity(u: &[f64], v: &[f64]) -> Result<f64> {
    if u.len() != v.len() {
        return Err(ZslError::Shape(format!(
            "cosine_similarity: lengths {} and {}",
            u.len(),
            v.len()
        )));
    }
    let nu = u.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nv = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if nu == 0.0 || nv == 0.0 {
        return Err(ZslError::ZeroNorm("cosine_similarity input".into()));
    }
    let dot: f64 = u.iter().zip(v).map(|(a, b)| a * b).sum();
    Ok((dot / (nu * nv)).clamp(-1.0, 1.0))
}

/// Cosine similarity between every row of `a` and every row of `b`.
pub fn cosine_matrix(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    if a.ncols() != b.ncols() {
        return Err(ZslError::Shape(format!(
            "cosine_matrix: widths {} and {}",
            a.ncols(),
            b.ncols()
        )));
    }
    let na = row_norms(a, "query")?;
    let nb = row_norms(b, "prototype")?;
    let mut s = a * b.transpose();
    for i in 0..s.nrows() {
        for j in 0..s.ncols() {
            s[(i, j)] = (s[(i, j)] / (na[i] * nb[j])).clamp(-1.0, 1.0);
        }
    }
    Ok(s)
}

fn row_norms(m: &Matrix, what: &str) -> Result<Vec<f64>> {
    m.row_iter()
        .enumerate()
        .map(|(i, r)| {
            let n = r.norm();
            if n == 0.0 {
                Err(ZslError::ZeroNorm(format!("{what} row {i}")))
            } else {
                Ok(n)
            }
        })
        .collect()
}

/// Euclidean distances between all row pairs.
pub fn pairwise_distances(x: &Matrix) -> Matrix {
    let m = x.nrows();
    let mut d = DMatrix::zeros(m, m);
    for i in 0..m {
        for j in (i + 1)..m {
            let dist = (x.row(i) - x.row(j)).norm();
            d[(i, j)] = dist;
            d[(j, i)] = dist;
        }
    }
    d
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::matrix::from_rows;

    #[test]
    fn sylvester_scalar() {
        let p = SylvesterProblem::new(
            from_rows(&[vec![1.0]]).unwrap(),
            from_rows(&[vec![1.0]]).unwrap(),
            from_rows(&[vec![-4.0]]).unwrap(),
        )
        .unwrap();
        let w = solve_sylvester(&p).unwrap();
        assert!((w[(0, 0)] - 2.0).abs() < 1e-14);
    }

    #[test]
    fn sylvester_identity_reduction() {
        let c = from_rows(&[
            vec![0.3, -1.2, 2.0],
            vec![1.1, 0.0, -0.5],
            vec![-2.2, 0.7, 0.9],
        ])
        .unwrap();
        let p = SylvesterProblem::new(
            DMatrix::identity(3, 3),
            DMatrix::identity(3, 3),
            &c * -2.0,
        )
        .unwrap();
        let w = solve_sylvester(&p).unwrap();
        assert!((w - c).amax() < 1e-12);
    }

    #[test]
    fn sylvester_singular_names_pair() {
        let p = SylvesterProblem::new(
            from_rows(&[vec![2.0]]).unwrap(),
            from_rows(&[vec![-2.0]]).unwrap(),
            from_rows(&[vec![1.0]]).unwrap(),
        )
        .unwrap();
        let e = solve_sylvester(&p).unwrap_err();
        assert!(matches!(e, ZslError::SingularSylvester { .. }));
        assert!(e.to_string().contains("2.000000e0"), "{e}");
    }

    #[test]
    fn sylvester_shape_errors() {
        assert!(SylvesterProblem::new(
            DMatrix::zeros(2, 3),
            DMatrix::identity(2, 2),
            DMatrix::zeros(2, 2)
        )
        .is_err());
        assert!(SylvesterProblem::new(
            DMatrix::identity(2, 2),
            DMatrix::identity(3, 3),
            DMatrix::zeros(3, 2)
        )
        .is_err());
    }

    #[test]
    fn sylvester_complex_spectrum() {
        // rotation-like blocks force 2x2 Schur blocks on both sides
        let l = from_rows(&[vec![1.0, -3.0, 0.0], vec![3.0, 1.0, 0.5], vec![0.0, 0.0, 2.0]]).unwrap();
        let r = from_rows(&[vec![0.5, 2.0], vec![-2.0, 0.5]]).unwrap();
        let m = from_rows(&[vec![1.0, 2.0], vec![-1.0, 0.5], vec![0.3, 0.7]]).unwrap();
        let p = SylvesterProblem::new(l, r, m).unwrap();
        let w = solve_sylvester(&p).unwrap();
        assert!(p.relative_residual(&w) < 1e-12);
        let wk = solve_sylvester_kronecker(&p).unwrap();
        assert!((w - wk).amax() < 1e-10);
    }

    #[test]
    fn eig_identity_and_diagonal() {
        let r = sym_eig(&DMatrix::identity(4, 4)).unwrap();
        assert_eq!(r.eigenvalues, vec![1.0; 4]);
        let r = sym_eig(&from_rows(&[vec![1.0, 0.0], vec![0.0, 2.0]]).unwrap()).unwrap();
        assert_eq!(r.eigenvalues, vec![2.0, 1.0]);
        assert!((r.eigenvectors[(1, 0)].abs() - 1.0).abs() < 1e-15);
        assert!((r.eigenvectors[(0, 1)].abs() - 1.0).abs() < 1e-15);
    }

    #[test]
    fn eig_rejects_nonsquare_and_asymmetric() {
        assert!(sym_eig(&DMatrix::zeros(2, 3)).is_err());
        assert!(sym_eig(&from_rows(&[vec![1.0, 2.0], vec![0.0, 1.0]]).unwrap()).is_err());
    }

    #[test]
    fn least_squares_cases() {
        let b = from_rows(&[vec![1.0, 2.0], vec![3.0, -4.0]]).unwrap();
        let x = least_squares(&DMatrix::identity(2, 2), &b).unwrap();
        assert!((x - &b).amax() < 1e-14);
        let a = from_rows(&[vec![1.0], vec![1.0]]).unwrap();
        let b = from_rows(&[vec![0.0], vec![2.0]]).unwrap();
        let x = least_squares(&a, &b).unwrap();
        assert!((x[(0, 0)] - 1.0).abs() < 1e-14);
    }

    #[test]
    fn least_squares_min_norm_on_rank_deficient() {
        // two identical columns: min-norm splits the weight evenly
        let a = from_rows(&[vec![1.0, 1.0], vec![2.0, 2.0]]).unwrap();
        let b = from_rows(&[vec![2.0], vec![4.0]]).unwrap();
        let x = least_squares(&a, &b).unwrap();
        assert!((x[(0, 0)] - 1.0).abs() < 1e-12 && (x[(1, 0)] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn cosine_cases() {
        assert!((cosine_similarity(&[3.0, 4.0], &[3.0, 4.0]).unwrap() - 1.0).abs() < 1e-15);
        assert_eq!(cosine_similarity(&[1.0, 0.0], &[0.0, 1.0]).unwrap(), 0.0);
        let c = cosine_similarity(&[1.0, 1.0], &[1.0, 0.0]).unwrap();
        assert!((c - std::f64::consts::FRAC_1_SQRT_2).abs() < 1e-15);
        assert!(matches!(
            cosine_similarity(&[0.0, 0.0], &[1.0, 0.0]),
            Err(ZslError::ZeroNorm(_))
        ));
    }

    #[test]
    fn distances_small() {
        let d = pairwise_distances(&from_rows(&[vec![1.0, 2.0]]).unwrap());
        assert_eq!(d, DMatrix::zeros(1, 1));
        let d = pairwise_distances(&from_rows(&[vec![0.0, 0.0], vec![3.0, 4.0]]).unwrap());
        assert_eq!(d[(0, 1)], 5.0);
        assert_eq!(d[(1, 0)], 5.0);
    }
}
