//! Dense solves for the handful of tiny systems the estimators need.

use crate::error::{OovError, Result};

/// Solves `a · x = b` for square `a` (row-major, `n × n`) by Gaussian
/// elimination with partial pivoting.
pub fn solve(mut a: Vec<f64>, mut b: Vec<f64>) -> Result<Vec<f64>> {
    let n = b.len();
    if a.len() != n * n {
        return Err(OovError::ShapeMismatch(format!("{} entries for a {n}x{n} system", a.len())));
    }
    for col in 0..n {
        let pivot = (col..n)
            .max_by(|&i, &j| a[i * n + col].abs().total_cmp(&a[j * n + col].abs()))
            .unwrap();
        if a[pivot * n + col].abs() < 1e-300 {
            return Err(OovError::ZeroDivisor(format!("singular system at column {col}")));
        }
        if pivot != col {
            for k in 0..n {
                a.swap(pivot * n + k, col * n + k);
            }
            b.swap(pivot, col);
        }
        for row in col + 1..n {
            let f = a[row * n + col] / a[col * n + col];
            if f != 0.0 {
                for k in col..n {
                    a[row * n + k] -= f * a[col * n + k];
                }
                b[row] -= f * b[col];
            }
        }
    }
    let mut x = vec![0.0; n];
    for row in (0..n).rev() {
        let tail: f64 = (row + 1..n).map(|k| a[row * n + k] * x[k]).sum();
        x[row] = (b[row] - tail) / a[row * n + row];
    }
    Ok(x)
}

/// Ordinary least squares `argmin ‖X θ − y‖²` via the normal equations.
/// `features` yields one feature row per observation.
pub fn least_squares<I>(features: I, y: &[f64], p: usize) -> Result<Vec<f64>>
where
    I: IntoIterator<Item = Vec<f64>>,
{
    let mut xtx = vec![0.0; p * p];
    let mut xty = vec![0.0; p];
    let mut rows = 0;
    for (row, &t) in features.into_iter().zip(y) {
        for i in 0..p {
            xty[i] += row[i] * t;
            for j in 0..p {
                xtx[i * p + j] += row[i] * row[j];
            }
        }
        rows += 1;
    }
    if rows < p {
        return Err(OovError::InsufficientSamples { needed: p, got: rows });
    }
    solve(xtx, xty)
}

/// Singular values of a 2×2 matrix `[[a, b], [c, d]]`, largest first.
pub fn singular_values_2x2(a: f64, b: f64, c: f64, d: f64) -> (f64, f64) {
    let s1 = a * a + b * b + c * c + d * d;
    let det = a * d - b * c;
    let root = (s1 * s1 - 4.0 * det * det).max(0.0).sqrt();
    let big = ((s1 + root) / 2.0).max(0.0).sqrt();
    let small = ((s1 - root) / 2.0).max(0.0).sqrt();
    (big, small)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn solves_small_system() {
        let x = solve(vec![0.0, 2.0, 1.0, 1.0, 1.0, 0.0, 3.0, 0.0, 1.0], vec![5.0, 3.0, 7.0]).unwrap();
        let expected = [1.6, 1.4, 2.2];
        for (a, b) in x.iter().zip(expected) {
            assert!((a - b).abs() < 1e-12);
        }
        assert!(solve(vec![1.0, 2.0, 2.0, 4.0], vec![1.0, 2.0]).is_err());
    }

    #[test]
    fn exact_least_squares_fit() {
        let pts: Vec<(f64, f64)> = (0..20).map(|i| (i as f64 * 0.1, (i * i) as f64 * 0.01)).collect();
        let y: Vec<f64> = pts.iter().map(|&(a, b)| 1.0 + 2.0 * a - 0.5 * b).collect();
        let theta = least_squares(pts.iter().map(|&(a, b)| vec![1.0, a, b]), &y, 3).unwrap();
        assert!((theta[0] - 1.0).abs() < 1e-9 && (theta[1] - 2.0).abs() < 1e-9 && (theta[2] + 0.5).abs() < 1e-9);
    }

    #[test]
    fn singular_values() {
        let (s1, s2) = singular_values_2x2(3.0, 0.0, 0.0, -2.0);
        assert!((s1 - 3.0).abs() < 1e-12 && (s2 - 2.0).abs() < 1e-12);
        let (s1, s2) = singular_values_2x2(1.0, 1.0, 1.0, 1.0);
        assert!((s1 - 2.0).abs() < 1e-12 && s2.abs() < 1e-7);
    }
}
