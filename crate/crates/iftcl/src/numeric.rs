//! Dense f64 vector/matrix primitives used by every other module.
//!
//! Vectors are plain `Vec<f64>` slices; the one structured type is
//! [`TokenMatrix`], a row-major L x d matrix with an explicit valid-row count
//! so padded sentences keep a fixed shape. Summations run left to right in
//! index order everywhere so results are bit-identical across runs.

use crate::error::{Error, Result};

/// Row-major L x d matrix of token embeddings. Rows at index >= `valid_len`
/// are padding and must stay all-zero.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenMatrix {
    rows: usize,
    cols: usize,
    valid_len: usize,
    data: Vec<f64>,
}

impl TokenMatrix {
    /// Zero matrix with `valid_len` marked valid rows.
    pub fn zeros(rows: usize, cols: usize, valid_len: usize) -> Result<Self> {
        if valid_len > rows {
            return Err(Error::Domain(format!(
                "TokenMatrix: valid_len {valid_len} exceeds row count {rows}"
            )));
        }
        Ok(TokenMatrix {
            rows,
            cols,
            valid_len,
            data: vec![0.0; rows * cols],
        })
    }

    /// Builds from row-major data. Fails on shape mismatch or a non-zero
    /// padding row.
    pub fn from_rows(rows: Vec<Vec<f64>>, valid_len: usize) -> Result<Self> {
        let n = rows.len();
        let cols = rows.first().map(|r| r.len()).unwrap_or(0);
        if valid_len > n {
            return Err(Error::Domain(format!(
                "TokenMatrix: valid_len {valid_len} exceeds row count {n}"
            )));
        }
        let mut data = Vec::with_capacity(n * cols);
        for (i, r) in rows.iter().enumerate() {
            if r.len() != cols {
                return Err(Error::Domain(format!(
                    "TokenMatrix: row {i} has {} columns, expected {cols}",
                    r.len()
                )));
            }
            if i >= valid_len && r.iter().any(|&x| x != 0.0) {
                return Err(Error::Domain(format!(
                    "TokenMatrix: padding row {i} is not all-zero"
                )));
            }
            data.extend_from_slice(r);
        }
        Ok(TokenMatrix {
            rows: n,
            cols,
            valid_len,
            data,
        })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn valid_len(&self) -> usize {
        self.valid_len
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub(crate) fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub(crate) fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub(crate) fn set_valid_len(&mut self, valid_len: usize) {
        debug_assert!(valid_len <= self.rows);
        self.valid_len = valid_len;
    }
}

/// Dot product, summed left to right.
pub fn dot(u: &[f64], v: &[f64]) -> f64 {
    debug_assert_eq!(u.len(), v.len());
    let mut acc = 0.0;
    for i in 0..u.len() {
        acc += u[i] * v[i];
    }
    acc
}

fn sum_of_squares(u: &[f64]) -> f64 {
    let mut acc = 0.0;
    for &x in u {
        acc += x * x;
    }
    acc
}

/// Cosine similarity dot(u,v) / (|u| |v|).
///
/// The denominator is computed as sqrt(|u|^2 * |v|^2), which makes
/// `cosine_similarity(u, u)` return exactly 1.0 for any nonzero finite u.
/// Zero-norm inputs are a domain error naming the offending argument;
/// overflowing norms or a non-finite result are a numeric error.
pub fn cosine_similarity(u: &[f64], v: &[f64]) -> Result<f64> {
    if u.len() != v.len() {
        return Err(Error::Domain(format!(
            "cosine_similarity: dimension mismatch {} vs {}",
            u.len(),
            v.len()
        )));
    }
    if u.is_empty() {
        return Err(Error::Domain("cosine_similarity: empty input u".into()));
    }
    let nu = sum_of_squares(u);
    let nv = sum_of_squares(v);
    if nu == 0.0 {
        return Err(Error::Domain("cosine_similarity: zero-norm input u".into()));
    }
    if nv == 0.0 {
        return Err(Error::Domain("cosine_similarity: zero-norm input v".into()));
    }
    if !nu.is_finite() || !nv.is_finite() {
        return Err(Error::Numeric(
            "cosine_similarity: squared norm overflowed".into(),
        ));
    }
    let c = dot(u, v) / (nu * nv).sqrt();
    if !c.is_finite() {
        return Err(Error::Numeric("cosine_similarity: non-finite result".into()));
    }
    Ok(c)
}

/// Gradient of cosine_similarity(u, v) with respect to u and v.
///
/// d cos / d u = v / (|u||v|) - cos * u / |u|^2, symmetrically for v.
pub fn cosine_similarity_grad(u: &[f64], v: &[f64]) -> Result<(f64, Vec<f64>, Vec<f64>)> {
    let c = cosine_similarity(u, v)?;
    let nu = sum_of_squares(u);
    let nv = sum_of_squares(v);
    let denom = (nu * nv).sqrt();
    let mut gu = vec![0.0; u.len()];
    let mut gv = vec![0.0; v.len()];
    for i in 0..u.len() {
        gu[i] = v[i] / denom - c * u[i] / nu;
        gv[i] = u[i] / denom - c * v[i] / nv;
    }
    Ok((c, gu, gv))
}

/// Mean of the first `valid_len` rows of `m`. Padding rows never contribute.
pub fn masked_mean_pool(m: &TokenMatrix) -> Result<Vec<f64>> {
    if m.valid_len() == 0 {
        return Err(Error::Domain(
            "masked_mean_pool: valid_len is 0, nothing to pool".into(),
        ));
    }
    let mut out = vec![0.0; m.cols()];
    for t in 0..m.valid_len() {
        let row = m.row(t);
        for j in 0..m.cols() {
            out[j] += row[j];
        }
    }
    let inv = 1.0 / m.valid_len() as f64;
    for x in &mut out {
        *x *= inv;
    }
    Ok(out)
}

/// Default step width for [`finite_diff_gradient`].
pub const FINITE_DIFF_H: f64 = 1e-4;

/// Central-difference gradient of a scalar function at `x`:
/// g_k = (f(x + h e_k) - f(x - h e_k)) / (2h).
pub fn finite_diff_gradient<F>(mut f: F, x: &[f64], h: f64) -> Result<Vec<f64>>
where
    F: FnMut(&[f64]) -> Result<f64>,
{
    if !(h > 0.0) || !h.is_finite() {
        return Err(Error::Domain(format!(
            "finite_diff_gradient: step width must be positive and finite, got {h}"
        )));
    }
    let mut grad = vec![0.0; x.len()];
    let mut probe = x.to_vec();
    for k in 0..x.len() {
        let orig = probe[k];
        probe[k] = orig + h;
        let fp = f(&probe)?;
        probe[k] = orig - h;
        let fm = f(&probe)?;
        probe[k] = orig;
        grad[k] = (fp - fm) / (2.0 * h);
    }
    Ok(grad)
}

/// Relative error |a - b| / max(|a| + |b|, floor), the yardstick every
/// gradient check in this crate uses.
pub fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / (a.abs() + b.abs()).max(1e-8)
}

/// Strict sign: -1, 0 or +1. Unlike `f64::signum` this maps 0.0 to 0.0,
/// which is the subgradient convention the absolute-value loss needs.
pub fn sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// True when every entry is finite.
pub fn all_finite(xs: &[f64]) -> bool {
    xs.iter().all(|x| x.is_finite())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn cosine_of_orthogonal_unit_vectors_is_zero() {
        let c = cosine_similarity(&[1.0, 0.0], &[0.0, 1.0]).unwrap();
        assert_eq!(c, 0.0);
    }

    #[test]
    fn cosine_of_a_vector_with_itself_is_exactly_one() {
        let c = cosine_similarity(&[2.0, 3.0], &[2.0, 3.0]).unwrap();
        assert_eq!(c, 1.0);
        let u = [0.173, -9.41, 3.0e-7, 55.5];
        assert_eq!(cosine_similarity(&u, &u).unwrap(), 1.0);
    }

    #[test]
    fn cosine_rejects_zero_norm_and_names_the_argument() {
        let err = cosine_similarity(&[0.0, 0.0], &[1.0, 0.0]).unwrap_err();
        assert!(err.to_string().contains("input u"), "got: {err}");
        let err = cosine_similarity(&[1.0, 0.0], &[0.0, 0.0]).unwrap_err();
        assert!(err.to_string().contains("input v"), "got: {err}");
    }

    #[test]
    fn cosine_rejects_dimension_mismatch() {
        assert!(cosine_similarity(&[1.0], &[1.0, 2.0]).is_err());
    }

    #[test]
    fn cosine_reports_numeric_error_on_overflowing_norm() {
        let u = [1e300, 1e300];
        let err = cosine_similarity(&u, &[1.0, 2.0]).unwrap_err();
        assert_eq!(err.exit_code(), 3, "overflow must map to the numeric exit code");
    }

    #[test]
    fn cosine_grad_matches_finite_differences() {
        let u = vec![0.9, -0.4, 0.2];
        let v = vec![-0.1, 0.8, 0.5];
        let (_, gu, gv) = cosine_similarity_grad(&u, &v).unwrap();
        let gu_num = finite_diff_gradient(
            |x| cosine_similarity(x, &v),
            &u,
            FINITE_DIFF_H,
        )
        .unwrap();
        let gv_num = finite_diff_gradient(
            |x| cosine_similarity(&u, x),
            &v,
            FINITE_DIFF_H,
        )
        .unwrap();
        for k in 0..3 {
            assert!(relative_error(gu[k], gu_num[k]) < 1e-6);
            assert!(relative_error(gv[k], gv_num[k]) < 1e-6);
        }
    }

    #[test]
    fn pool_averages_only_the_valid_rows() {
        let mut m = TokenMatrix::from_rows(
            vec![vec![1.0, 0.0], vec![0.0, 1.0], vec![0.0, 0.0]],
            2,
        )
        .unwrap();
        assert_eq!(masked_mean_pool(&m).unwrap(), vec![0.5, 0.5]);
        // junk written past valid_len must never reach the pool
        m.data_mut()[4] = 2.0;
        m.data_mut()[5] = 2.0;
        assert_eq!(masked_mean_pool(&m).unwrap(), vec![0.5, 0.5]);
    }

    #[test]
    fn pool_rejects_empty_valid_prefix() {
        let m = TokenMatrix::zeros(3, 2, 0).unwrap();
        assert!(masked_mean_pool(&m).is_err());
    }

    #[test]
    fn token_matrix_rejects_nonzero_padding_row() {
        let r = TokenMatrix::from_rows(vec![vec![1.0], vec![2.0]], 1);
        assert!(r.is_err());
    }

    #[test]
    fn finite_diff_recovers_quadratic_gradient() {
        // f(x) = sum x_k^2 has gradient 2x; central differences are exact for
        // quadratics up to roundoff.
        let x = vec![0.3, -1.2, 2.0];
        let g = finite_diff_gradient(|p| Ok(dot(p, p)), &x, FINITE_DIFF_H).unwrap();
        for k in 0..3 {
            assert!(relative_error(g[k], 2.0 * x[k]) < 1e-9, "k={k}: {}", g[k]);
        }
    }

    #[test]
    fn finite_diff_rejects_bad_step() {
        assert!(finite_diff_gradient(|p| Ok(p[0]), &[1.0], 0.0).is_err());
        assert!(finite_diff_gradient(|p| Ok(p[0]), &[1.0], f64::NAN).is_err());
    }

    proptest! {
        #[test]
        fn cosine_is_bounded(
            u in proptest::collection::vec(-10.0f64..10.0, 2..6),
            v in proptest::collection::vec(-10.0f64..10.0, 2..6),
        ) {
            let n = u.len().min(v.len());
            let (u, v) = (&u[..n], &v[..n]);
            if let Ok(c) = cosine_similarity(u, v) {
                prop_assert!(c.abs() <= 1.0 + 1e-12);
            }
        }

        #[test]
        fn cosine_is_scale_invariant(
            u in proptest::collection::vec(0.1f64..5.0, 3),
            a in 0.01f64..100.0,
            b in 0.01f64..100.0,
        ) {
            let v: Vec<f64> = u.iter().map(|x| x * 1.7 - 0.3).collect();
            let ua: Vec<f64> = u.iter().map(|x| x * a).collect();
            let vb: Vec<f64> = v.iter().map(|x| x * b).collect();
            let c1 = cosine_similarity(&u, &v).unwrap();
            let c2 = cosine_similarity(&ua, &vb).unwrap();
            prop_assert!((c1 - c2).abs() < 1e-12);
        }

        #[test]
        fn pooling_is_invariant_to_valid_row_order(
            rows in proptest::collection::vec(
                proptest::collection::vec(-3.0f64..3.0, 4),
                2..5,
            ),
            swap in (0usize..4, 0usize..4),
        ) {
            let n = rows.len();
            let mut shuffled = rows.clone();
            shuffled.swap(swap.0 % n, swap.1 % n);
            let a = masked_mean_pool(&TokenMatrix::from_rows(rows, n).unwrap()).unwrap();
            let b = masked_mean_pool(&TokenMatrix::from_rows(shuffled, n).unwrap()).unwrap();
            for k in 0..4 {
                prop_assert!((a[k] - b[k]).abs() < 1e-12);
            }
        }
    }
}
