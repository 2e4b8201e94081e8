//! Central finite differences for checking analytic gradients.

use crate::matrix::Matrix;

/// Numeric gradient of `f` with respect to every entry of every parameter,
/// by central differences with step `h`.
pub fn numeric_gradient<F>(f: F, params: &[Matrix], h: f64) -> Vec<Matrix>
where
    F: Fn(&[Matrix]) -> f64,
{
    let mut work: Vec<Matrix> = params.to_vec();
    let mut out = Vec::with_capacity(params.len());
    for t in 0..params.len() {
        let mut g = Matrix::zeros(params[t].nrows(), params[t].ncols());
        for idx in 0..params[t].len() {
            let orig = work[t][idx];
            work[t][idx] = orig + h;
            let up = f(&work);
            work[t][idx] = orig - h;
            let down = f(&work);
            work[t][idx] = orig;
            g[idx] = (up - down) / (2.0 * h);
        }
        out.push(g);
    }
    out
}

/// Largest `|a − n| / max(|a|, |n|, floor)` over all entries.
pub fn max_relative_error(analytic: &[Matrix], numeric: &[Matrix], floor: f64) -> f64 {
    assert_eq!(analytic.len(), numeric.len(), "gradient lists differ in length");
    analytic
        .iter()
        .zip(numeric)
        .flat_map(|(a, n)| {
            assert_eq!(a.shape(), n.shape(), "gradient shapes differ");
            a.iter().zip(n.iter()).map(move |(&x, &y)| {
                (x - y).abs() / x.abs().max(y.abs()).max(floor)
            })
        })
        .fold(0.0, f64::max)
}
