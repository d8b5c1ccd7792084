//! Weighted ridge regression with an unpenalized intercept.
//!
//! ```text
//! minimize  Σ w_s (y_s - b - x_sᵀβ)² + λ‖β‖²
//! ```
//!
//! The intercept is eliminated by centering on the weighted means, and the
//! remaining `F×F` normal equations are solved by Cholesky factorization.
//! Feature counts here are small (tens to a few hundred), so the cubic cost
//! of the factorization is negligible next to forming `XᵀWX`.

use super::NumericsError;

/// Dense row-major matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_rows<R: AsRef<[f64]>>(rows: &[R]) -> Result<Self, NumericsError> {
        let cols = rows.first().map_or(0, |r| r.as_ref().len());
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            let r = r.as_ref();
            if r.len() != cols {
                return Err(NumericsError::LengthMismatch {
                    left: cols,
                    right: r.len(),
                });
            }
            data.extend_from_slice(r);
        }
        Ok(Self {
            rows: rows.len(),
            cols,
            data,
        })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j]
    }

    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        self.data[i * self.cols + j] = v;
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RidgeFit {
    pub coefficients: Vec<f64>,
    pub intercept: f64,
}

impl RidgeFit {
    pub fn predict(&self, x: &[f64]) -> f64 {
        self.intercept
            + self
                .coefficients
                .iter()
                .zip(x)
                .map(|(b, v)| b * v)
                .sum::<f64>()
    }
}

/// Fits `targets ≈ intercept + design · coefficients` under sample `weights`.
///
/// Returns [`NumericsError::Singular`] when the centered normal equations are
/// not positive definite; at `lambda > 0` that can only happen through
/// non-finite or zero-weight inputs.
pub fn weighted_ridge(
    design: &Matrix,
    targets: &[f64],
    weights: &[f64],
    lambda: f64,
) -> Result<RidgeFit, NumericsError> {
    let (s, f) = (design.rows(), design.cols());
    if targets.len() != s {
        return Err(NumericsError::LengthMismatch {
            left: s,
            right: targets.len(),
        });
    }
    if weights.len() != s {
        return Err(NumericsError::LengthMismatch {
            left: s,
            right: weights.len(),
        });
    }
    if !(lambda >= 0.0) {
        return Err(NumericsError::InvalidArgument(format!(
            "lambda must be nonnegative, got {lambda}"
        )));
    }
    if weights.iter().any(|w| !(*w >= 0.0)) {
        return Err(NumericsError::InvalidArgument(
            "weights must be nonnegative".into(),
        ));
    }
    let total: f64 = weights.iter().sum();
    if !(total > 0.0) {
        return Err(NumericsError::InvalidArgument(
            "weights are all zero".into(),
        ));
    }

    let mut x_mean = vec![0.0; f];
    let mut y_mean = 0.0;
    for i in 0..s {
        let w = weights[i];
        for (m, x) in x_mean.iter_mut().zip(design.row(i)) {
            *m += w * x;
        }
        y_mean += w * targets[i];
    }
    x_mean.iter_mut().for_each(|m| *m /= total);
    y_mean /= total;

    // Upper triangle of XᶜᵀWXᶜ and XᶜᵀWyᶜ.
    let mut gram = vec![0.0; f * f];
    let mut rhs = vec![0.0; f];
    let mut centered = vec![0.0; f];
    for i in 0..s {
        let w = weights[i];
        if w == 0.0 {
            continue;
        }
        for (c, (x, m)) in centered.iter_mut().zip(design.row(i).iter().zip(&x_mean)) {
            *c = x - m;
        }
        let yc = targets[i] - y_mean;
        for a in 0..f {
            let wa = w * centered[a];
            if wa == 0.0 {
                continue;
            }
            rhs[a] += wa * yc;
            for b in a..f {
                gram[a * f + b] += wa * centered[b];
            }
        }
    }
    for a in 0..f {
        gram[a * f + a] += lambda;
        for b in 0..a {
            gram[a * f + b] = gram[b * f + a];
        }
    }

    let coefficients = cholesky_solve(&mut gram, &rhs, f).ok_or(NumericsError::Singular { lambda })?;
    let intercept = y_mean
        - coefficients
            .iter()
            .zip(&x_mean)
            .map(|(b, m)| b * m)
            .sum::<f64>();
    Ok(RidgeFit {
        coefficients,
        intercept,
    })
}

/// Solves `A x = b` for symmetric positive-definite `A` (overwritten with its factor).
fn cholesky_solve(a: &mut [f64], b: &[f64], n: usize) -> Option<Vec<f64>> {
    let scale = (0..n).map(|i| a[i * n + i].abs()).fold(0.0, f64::max);
    let tiny = scale.max(f64::MIN_POSITIVE) * f64::EPSILON * n as f64;
    for j in 0..n {
        let mut d = a[j * n + j];
        for k in 0..j {
            d -= a[j * n + k] * a[j * n + k];
        }
        if !(d > tiny) {
            return None;
        }
        let d = d.sqrt();
        a[j * n + j] = d;
        for i in j + 1..n {
            let mut v = a[i * n + j];
            for k in 0..j {
                v -= a[i * n + k] * a[j * n + k];
            }
            a[i * n + j] = v / d;
        }
    }
    // Forward then back substitution with L and Lᵀ.
    let mut x = b.to_vec();
    for i in 0..n {
        for k in 0..i {
            x[i] -= a[i * n + k] * x[k];
        }
        x[i] /= a[i * n + i];
    }
    for i in (0..n).rev() {
        for k in i + 1..n {
            x[i] -= a[k * n + i] * x[k];
        }
        x[i] /= a[i * n + i];
    }
    x.iter().all(|v| v.is_finite()).then_some(x)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn norm(v: &[f64]) -> f64 {
        v.iter().map(|x| x * x).sum::<f64>().sqrt()
    }

    #[test]
    fn exactly_determined_system_interpolates() {
        // y = 1 + 2a - 3b through three points.
        let x = Matrix::from_rows(&[[0.0, 0.0], [1.0, 0.0], [0.0, 1.0]]).unwrap();
        let y = [1.0, 3.0, -2.0];
        let fit = weighted_ridge(&x, &y, &[1.0, 1.0, 1.0], 0.0).unwrap();
        assert!((fit.coefficients[0] - 2.0).abs() < 1e-12);
        assert!((fit.coefficients[1] + 3.0).abs() < 1e-12);
        assert!((fit.intercept - 1.0).abs() < 1e-12);
    }

    #[test]
    fn one_feature_hand_evaluated() {
        // x = [0,1,2], y = [1,2,4], unit weights, λ = 1.
        // Centered: xc = [-1,0,1], yc = [-4/3,-1/3,5/3]; Σxc² = 2, Σxc·yc = 3.
        // β = 3 / (2 + 1) = 1, intercept = 7/3 - 1·1 = 4/3.
        let x = Matrix::from_rows(&[[0.0], [1.0], [2.0]]).unwrap();
        let fit = weighted_ridge(&x, &[1.0, 2.0, 4.0], &[1.0; 3], 1.0).unwrap();
        assert!((fit.coefficients[0] - 1.0).abs() < 1e-12);
        assert!((fit.intercept - 4.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn huge_lambda_shrinks_coefficients() {
        let x = Matrix::from_rows(&[[1.0, 0.0], [0.0, 1.0], [1.0, 1.0], [0.0, 0.0], [1.0, 0.0]])
            .unwrap();
        let y = [2.0, -1.0, 1.5, 0.2, 1.8];
        let w = [1.0, 0.5, 0.8, 1.0, 0.3];
        let free = weighted_ridge(&x, &y, &w, 0.0).unwrap();
        let shrunk = weighted_ridge(&x, &y, &w, 1e9).unwrap();
        assert!(norm(&shrunk.coefficients) < 1e-3 * norm(&free.coefficients));
    }

    #[test]
    fn singular_at_zero_lambda() {
        // Duplicate columns.
        let x = Matrix::from_rows(&[[1.0, 1.0], [0.0, 0.0], [1.0, 1.0]]).unwrap();
        let err = weighted_ridge(&x, &[1.0, 0.0, 1.0], &[1.0; 3], 0.0).unwrap_err();
        assert!(matches!(err, NumericsError::Singular { .. }));
        assert!(weighted_ridge(&x, &[1.0, 0.0, 1.0], &[1.0; 3], 1e-3).is_ok());
    }

    #[test]
    fn rejects_bad_weights() {
        let x = Matrix::from_rows(&[[1.0], [0.0]]).unwrap();
        assert!(weighted_ridge(&x, &[1.0, 0.0], &[0.0, 0.0], 1.0).is_err());
        assert!(weighted_ridge(&x, &[1.0, 0.0], &[-1.0, 2.0], 1.0).is_err());
        assert!(weighted_ridge(&x, &[1.0], &[1.0, 1.0], 1.0).is_err());
    }

    proptest! {
        #[test]
        fn consistent_full_rank_system_is_recovered(
            coef in prop::collection::vec(-5.0f64..5.0, 3),
            intercept in -3.0f64..3.0,
            rows in prop::collection::vec(prop::collection::vec(-2.0f64..2.0, 3), 8..30),
            weights in prop::collection::vec(0.1f64..1.0, 30),
        ) {
            let x = Matrix::from_rows(&rows).unwrap();
            let y: Vec<f64> = rows
                .iter()
                .map(|r| intercept + r.iter().zip(&coef).map(|(a, b)| a * b).sum::<f64>())
                .collect();
            let w = &weights[..rows.len()];
            match weighted_ridge(&x, &y, w, 0.0) {
                Ok(fit) => {
                    let err: Vec<f64> = fit.coefficients.iter().zip(&coef).map(|(a, b)| a - b).collect();
                    prop_assert!(norm(&err) <= 1e-10 * norm(&coef).max(1.0));
                    prop_assert!((fit.intercept - intercept).abs() <= 1e-10 * intercept.abs().max(1.0) * 10.0);
                }
                // Random rows can be (numerically) rank deficient.
                Err(NumericsError::Singular { .. }) => {}
                Err(e) => prop_assert!(false, "unexpected error {e}"),
            }
        }

        #[test]
        fn fit_is_linear_in_targets(
            rows in prop::collection::vec(prop::collection::vec(0u8..2, 4), 12..24),
            t1 in prop::collection::vec(-5.0f64..5.0, 24),
            t2 in prop::collection::vec(-5.0f64..5.0, 24),
        ) {
            let rows: Vec<Vec<f64>> = rows.iter().map(|r| r.iter().map(|&b| f64::from(b)).collect()).collect();
            let x = Matrix::from_rows(&rows).unwrap();
            let s = rows.len();
            let w: Vec<f64> = (0..s).map(|i| 0.2 + (i % 5) as f64 * 0.15).collect();
            let sum: Vec<f64> = t1[..s].iter().zip(&t2[..s]).map(|(a, b)| a + b).collect();
            let f1 = weighted_ridge(&x, &t1[..s], &w, 1e-3).unwrap();
            let f2 = weighted_ridge(&x, &t2[..s], &w, 1e-3).unwrap();
            let fs = weighted_ridge(&x, &sum, &w, 1e-3).unwrap();
            for j in 0..4 {
                prop_assert!((fs.coefficients[j] - f1.coefficients[j] - f2.coefficients[j]).abs() < 1e-9);
            }
        }
    }
}
