//! Small dense least-squares solver used by the latency fit.
//!
//! Column-equilibrated Householder QR. The systems here are tall and thin
//! (hundreds of rows, three columns), so nothing fancier is needed.

use crate::scalar::Scalar;

/// Returned when the design matrix does not have full column rank.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RankDeficient {
    /// First column whose pivot vanished.
    pub column: usize,
}

/// Solves `min ||A x - y||_2` for `x`.
///
/// Columns are scaled to unit norm before factorization; a pivot whose
/// magnitude falls below `sqrt(eps)` on the scaled matrix is treated as
/// rank deficiency.
pub fn least_squares<T: Scalar, const N: usize>(
    rows: &[[T; N]],
    rhs: &[T],
) -> Result<[T; N], RankDeficient> {
    assert_eq!(rows.len(), rhs.len(), "row/rhs length mismatch");
    let m = rows.len();
    if m < N {
        return Err(RankDeficient { column: m });
    }

    let mut scale = [T::zero(); N];
    for (j, s) in scale.iter_mut().enumerate() {
        let norm = rows.iter().map(|r| r[j] * r[j]).sum::<T>().sqrt();
        if !(norm > T::zero()) || !norm.is_finite() {
            return Err(RankDeficient { column: j });
        }
        *s = norm;
    }

    let mut a: Vec<[T; N]> = rows
        .iter()
        .map(|r| {
            let mut out = *r;
            for j in 0..N {
                out[j] = out[j] / scale[j];
            }
            out
        })
        .collect();
    let mut b = rhs.to_vec();

    let tol = T::epsilon().sqrt();
    let two = T::one() + T::one();
    let mut v = vec![T::zero(); m];

    for k in 0..N {
        let norm = (k..m).map(|i| a[i][k] * a[i][k]).sum::<T>().sqrt();
        if norm < tol {
            return Err(RankDeficient { column: k });
        }
        let alpha = if a[k][k] > T::zero() { -norm } else { norm };
        for i in k..m {
            v[i] = a[i][k];
        }
        v[k] = v[k] - alpha;
        let vnorm2 = (k..m).map(|i| v[i] * v[i]).sum::<T>();
        if vnorm2 > T::zero() {
            for j in k..N {
                let dot = (k..m).map(|i| v[i] * a[i][j]).sum::<T>();
                let f = two * dot / vnorm2;
                for i in k..m {
                    a[i][j] = a[i][j] - f * v[i];
                }
            }
            let dot = (k..m).map(|i| v[i] * b[i]).sum::<T>();
            let f = two * dot / vnorm2;
            for i in k..m {
                b[i] = b[i] - f * v[i];
            }
        }
        if a[k][k].abs() < tol {
            return Err(RankDeficient { column: k });
        }
    }

    let mut x = [T::zero(); N];
    for k in (0..N).rev() {
        let mut acc = b[k];
        for j in k + 1..N {
            acc = acc - a[k][j] * x[j];
        }
        x[k] = acc / a[k][k];
    }
    for j in 0..N {
        x[j] = x[j] / scale[j];
    }
    Ok(x)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exact_system() {
        // y = 1 + 2t + 3t^2 at t = 0..4
        let rows: Vec<[f64; 3]> = (0..5).map(|t| [1.0, t as f64, (t * t) as f64]).collect();
        let rhs: Vec<f64> = (0..5)
            .map(|t| 1.0 + 2.0 * t as f64 + 3.0 * (t * t) as f64)
            .collect();
        let x = least_squares(&rows, &rhs).unwrap();
        for (got, want) in x.iter().zip([1.0, 2.0, 3.0]) {
            assert!((got - want).abs() < 1e-12, "{got} vs {want}");
        }
    }

    #[test]
    fn overdetermined_matches_normal_equations() {
        let rows: [[f64; 2]; 4] = [[1.0, 0.0], [1.0, 1.0], [1.0, 2.0], [1.0, 3.0]];
        let rhs = [1.0, 2.0, 2.0, 5.0];
        let x = least_squares(&rows, &rhs).unwrap();
        // normal equations: [4 6; 6 14] x = [10; 21]
        let det = 4.0 * 14.0 - 36.0;
        let x0 = (14.0 * 10.0 - 6.0 * 21.0) / det;
        let x1 = (4.0 * 21.0 - 6.0 * 10.0) / det;
        assert!((x[0] - x0).abs() < 1e-12);
        assert!((x[1] - x1).abs() < 1e-12);
    }

    #[test]
    fn collinear_columns_are_rejected() {
        let rows = [[1.0, 2.0], [2.0, 4.0], [3.0, 6.0]];
        let rhs = [1.0, 2.0, 3.0];
        assert!(least_squares(&rows, &rhs).is_err());
    }

    #[test]
    fn too_few_rows() {
        let rows = [[1.0, 2.0, 3.0], [4.0, 5.0, 6.0]];
        assert_eq!(
            least_squares(&rows, &[1.0, 2.0]),
            Err(RankDeficient { column: 2 })
        );
    }
}
