use super::NumericsError;

fn check_lengths(a: &[f64], b: &[f64]) -> Result<(), NumericsError> {
    if a.len() != b.len() {
        return Err(NumericsError::LengthMismatch {
            left: a.len(),
            right: b.len(),
        });
    }
    Ok(())
}

pub fn mean(values: &[f64]) -> f64 {
    values.iter().sum::<f64>() / values.len() as f64
}

/// Pearson correlation coefficient of two equal-length vectors.
///
/// Fails with [`NumericsError::UndefinedCorrelation`] when either side is
/// constant, which for explanation weights means a degenerate explanation.
pub fn pearson(a: &[f64], b: &[f64]) -> Result<f64, NumericsError> {
    check_lengths(a, b)?;
    if a.len() < 2 {
        return Err(NumericsError::TooShort {
            needed: 2,
            got: a.len(),
        });
    }
    let (ma, mb) = (mean(a), mean(b));
    let mut cov = 0.0;
    let mut va = 0.0;
    let mut vb = 0.0;
    for (x, y) in a.iter().zip(b) {
        let (dx, dy) = (x - ma, y - mb);
        cov += dx * dy;
        va += dx * dx;
        vb += dy * dy;
    }
    if va == 0.0 || vb == 0.0 {
        return Err(NumericsError::UndefinedCorrelation);
    }
    Ok((cov / (va.sqrt() * vb.sqrt())).clamp(-1.0, 1.0))
}

/// `1 - cos(a, b)`, in `[0, 2]`.
pub fn cosine_distance(a: &[f64], b: &[f64]) -> Result<f64, NumericsError> {
    check_lengths(a, b)?;
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return Err(NumericsError::DegenerateVector);
    }
    Ok((1.0 - dot / (na * nb)).clamp(0.0, 2.0))
}

/// Mean of the `k` largest absolute entries of `w`.
pub fn topk_mean_abs(w: &[f64], k: usize) -> Result<f64, NumericsError> {
    if k == 0 || k > w.len() {
        return Err(NumericsError::InvalidArgument(format!(
            "k = {k} must be in 1..={}",
            w.len()
        )));
    }
    let mut abs: Vec<f64> = w.iter().map(|x| x.abs()).collect();
    abs.sort_unstable_by(|x, y| y.total_cmp(x));
    Ok(abs[..k].iter().sum::<f64>() / k as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol
    }

    #[test]
    fn pearson_examples() {
        assert!(close(pearson(&[1., 2., 3.], &[2., 4., 6.]).unwrap(), 1.0, 1e-10));
        assert!(close(pearson(&[1., 2., 3.], &[3., 2., 1.]).unwrap(), -1.0, 1e-10));
        // Σdx·dy = 4, Σdx² = Σdy² = 5
        assert!(close(pearson(&[1., 2., 3., 4.], &[1., 3., 2., 4.]).unwrap(), 0.8, 1e-10));
    }

    #[test]
    fn pearson_constant_input_is_an_error() {
        assert_eq!(
            pearson(&[1., 1., 1.], &[1., 2., 3.]),
            Err(NumericsError::UndefinedCorrelation)
        );
        assert!(matches!(pearson(&[1.], &[1.]), Err(NumericsError::TooShort { .. })));
        assert!(matches!(
            pearson(&[1., 2.], &[1., 2., 3.]),
            Err(NumericsError::LengthMismatch { .. })
        ));
    }

    #[test]
    fn cosine_examples() {
        assert!(close(cosine_distance(&[1., 0.], &[1., 0.]).unwrap(), 0.0, 1e-10));
        assert!(close(cosine_distance(&[1., 0.], &[0., 1.]).unwrap(), 1.0, 1e-10));
        assert!(close(
            cosine_distance(&[1., 1.], &[1., 0.]).unwrap(),
            1.0 - 1.0 / 2f64.sqrt(),
            1e-10
        ));
        assert_eq!(
            cosine_distance(&[0., 0.], &[1., 0.]),
            Err(NumericsError::DegenerateVector)
        );
    }

    #[test]
    fn topk_examples() {
        assert!(close(topk_mean_abs(&[3., -1., 2.], 2).unwrap(), 2.5, 1e-10));
        assert!(close(topk_mean_abs(&[0.1, -4., 2., 2.], 3).unwrap(), 8.0 / 3.0, 1e-10));
        let w = [0.5, -1.5, 2.0, -0.25];
        let full = w.iter().map(|x: &f64| x.abs()).sum::<f64>() / 4.0;
        assert!(close(topk_mean_abs(&w, 4).unwrap(), full, 1e-12));
        assert!(topk_mean_abs(&w, 5).is_err());
        assert!(topk_mean_abs(&w, 0).is_err());
    }

    proptest! {
        #[test]
        fn pearson_symmetric_and_affine_invariant(
            a in prop::collection::vec(-10.0f64..10.0, 3..20),
            c in prop_oneof![-5.0f64..-0.1, 0.1f64..5.0],
            d in -5.0f64..5.0,
        ) {
            let b: Vec<f64> = a.iter().rev().map(|x| x * 0.7 + 1.0).collect();
            if let (Ok(ab), Ok(ba)) = (pearson(&a, &b), pearson(&b, &a)) {
                prop_assert!((ab - ba).abs() < 1e-12);
                prop_assert!((-1.0..=1.0).contains(&ab));
            }
            let spread = a.iter().cloned().fold(f64::MIN, f64::max)
                - a.iter().cloned().fold(f64::MAX, f64::min);
            prop_assume!(spread > 1e-3);
            let scaled: Vec<f64> = a.iter().map(|x| c * x + d).collect();
            let r = pearson(&a, &scaled).unwrap();
            prop_assert!((r - c.signum()).abs() < 1e-9);
        }

        #[test]
        fn cosine_zero_for_positive_multiples(
            a in prop::collection::vec(-10.0f64..10.0, 1..20),
            c in 0.01f64..100.0,
        ) {
            prop_assume!(a.iter().any(|x| x.abs() > 1e-3));
            let b: Vec<f64> = a.iter().map(|x| c * x).collect();
            prop_assert!(cosine_distance(&a, &b).unwrap() < 1e-12);
        }
    }
}
