#![allow(dead_code)]

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use zsl_core::Matrix;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn uniform(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Matrix {
    DMatrix::from_fn(rows, cols, |_, _| rng.random_range(-1.0..1.0))
}

/// Gaussian elimination with partial pivoting on a dense row-major system.
pub fn gauss_solve(mut a: Vec<Vec<f64>>, mut b: Vec<f64>) -> Vec<f64> {
    let n = b.len();
    for col in 0..n {
        let piv = (col..n)
            .max_by(|&i, &j| a[i][col].abs().total_cmp(&a[j][col].abs()))
            .unwrap();
        a.swap(col, piv);
        b.swap(col, piv);
        for r in (col + 1)..n {
            let f = a[r][col] / a[col][col];
            if f != 0.0 {
                for c in col..n {
                    a[r][c] -= f * a[col][c];
                }
                b[r] -= f * b[col];
            }
        }
    }
    let mut x = vec![0.0; n];
    for r in (0..n).rev() {
        let s: f64 = ((r + 1)..n).map(|c| a[r][c] * x[c]).sum();
        x[r] = (b[r] - s) / a[r][r];
    }
    x
}

/// `(I ⊗ L + Rᵀ ⊗ I) vec(W) = −vec(M)` assembled entry by entry and solved
/// by elimination.
pub fn kronecker_oracle(l: &Matrix, r: &Matrix, m: &Matrix) -> Matrix {
    let (p, q) = (l.nrows(), r.nrows());
    let n = p * q;
    let mut a = vec![vec![0.0; n]; n];
    // vec index of W[i][j] is j*p + i
    for j in 0..q {
        for i in 0..p {
            let row = j * p + i;
            for k in 0..p {
                a[row][j * p + k] += l[(i, k)];
            }
            for k in 0..q {
                a[row][k * p + i] += r[(k, j)];
            }
        }
    }
    let b: Vec<f64> = (0..n).map(|idx| -m[(idx % p, idx / p)]).collect();
    let x = gauss_solve(a, b);
    DMatrix::from_fn(p, q, |i, j| x[j * p + i])
}

/// Random points in `dim` dimensions, `m` of them.
pub fn points(rng: &mut ChaCha8Rng, m: usize, dim: usize) -> Matrix {
    uniform(rng, m, dim) * 3.0
}
pub mod grads;
