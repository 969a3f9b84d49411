//! Vector kernels shared by the model, compressor and pruning code.

use crate::error::{invalid, ElmmError, Result};
use crate::numerics::Matrix;

/// Numerically stable softmax (max-subtracted).
pub fn softmax(v: &[f64]) -> Result<Vec<f64>> {
    if v.is_empty() {
        return Err(invalid("softmax of an empty vector"));
    }
    if v.iter().any(|x| !x.is_finite()) {
        return Err(ElmmError::NonFinite("softmax input".into()));
    }
    let mut out = v.to_vec();
    softmax_in_place(&mut out);
    Ok(out)
}

/// Unchecked in-place softmax for hot loops; `v` must be non-empty and finite.
pub(crate) fn softmax_in_place(v: &mut [f64]) {
    let max = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for x in v.iter_mut() {
        *x = (*x - max).exp();
        sum += *x;
    }
    let inv = 1.0 / sum;
    for x in v.iter_mut() {
        *x *= inv;
    }
}

/// Column-wise maximum over the rows of `m`.
pub fn max_pool_rows(m: &Matrix) -> Result<Vec<f64>> {
    Ok(max_pool_rows_with_argmax(m)?.0)
}

/// Column-wise maximum plus the winning row per column (first row on ties).
pub fn max_pool_rows_with_argmax(m: &Matrix) -> Result<(Vec<f64>, Vec<usize>)> {
    if m.rows() == 0 {
        return Err(invalid("max_pool_rows over zero rows"));
    }
    let mut vals = m.row(0).to_vec();
    let mut arg = vec![0usize; m.cols()];
    for r in 1..m.rows() {
        for (j, &x) in m.row(r).iter().enumerate() {
            if x > vals[j] {
                vals[j] = x;
                arg[j] = r;
            }
        }
    }
    Ok((vals, arg))
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Cosine {
    pub value: f64,
    /// Set when either argument has zero norm; `value` is then 0.
    pub degenerate: bool,
}

pub fn cosine_similarity(a: &[f64], b: &[f64]) -> Result<Cosine> {
    if a.len() != b.len() {
        return Err(invalid(format!(
            "cosine_similarity of lengths {} and {}",
            a.len(),
            b.len()
        )));
    }
    let (mut ab, mut aa, mut bb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        ab += x * y;
        aa += x * x;
        bb += y * y;
    }
    if !(ab.is_finite() && aa.is_finite() && bb.is_finite()) {
        return Err(ElmmError::NonFinite("cosine_similarity input".into()));
    }
    if aa == 0.0 || bb == 0.0 {
        return Ok(Cosine {
            value: 0.0,
            degenerate: true,
        });
    }
    Ok(Cosine {
        value: (ab / (aa.sqrt() * bb.sqrt())).clamp(-1.0, 1.0),
        degenerate: false,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn softmax_examples() {
        assert_eq!(softmax(&[0.0, 0.0]).unwrap(), vec![0.5, 0.5]);
        let p = softmax(&[2f64.ln(), 0.0]).unwrap();
        assert!((p[0] - 2.0 / 3.0).abs() < 1e-15);
        assert!((p[1] - 1.0 / 3.0).abs() < 1e-15);
        assert!(softmax(&[]).is_err());
        assert!(softmax(&[f64::NAN]).is_err());
    }

    #[test]
    fn softmax_matches_high_precision_reference() {
        // Reference computed with 50-digit arithmetic (mpmath), no max shift.
        let v = [0.37, -1.25, 2.5, 0.0, -0.8, 1.9, -3.1];
        let expected = [
            0.065_517_229_615_045_39,
            0.012_965_774_508_379_956,
            0.551_318_761_065_147_8,
            0.045_254_999_743_362_244,
            0.020_334_382_155_810_085,
            0.302_570_151_269_495_4,
            0.002_038_701_642_759_132_3,
        ];
        let p = softmax(&v).unwrap();
        for (a, b) in p.iter().zip(expected) {
            assert!((a - b).abs() < 1e-15, "{a} vs {b}");
        }
        assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn softmax_survives_large_logits() {
        let p = softmax(&[1000.0, 999.0, -1000.0]).unwrap();
        assert!(p.iter().all(|x| x.is_finite()));
        assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn max_pool_examples() {
        let single = Matrix::row_vector(&[1.0, -2.0, 3.0]);
        assert_eq!(max_pool_rows(&single).unwrap(), vec![1.0, -2.0, 3.0]);
        let m = Matrix::from_rows(&[vec![1.0, 5.0], vec![3.0, 2.0]]).unwrap();
        let (v, arg) = max_pool_rows_with_argmax(&m).unwrap();
        assert_eq!(v, vec![3.0, 5.0]);
        assert_eq!(arg, vec![1, 0]);
        assert!(max_pool_rows(&Matrix::zeros(0, 3)).is_err());
    }

    #[test]
    fn cosine_examples() {
        let v = [0.3, -1.2, 4.0];
        let neg: Vec<f64> = v.iter().map(|x| -x).collect();
        assert!((cosine_similarity(&v, &v).unwrap().value - 1.0).abs() < 1e-15);
        assert!((cosine_similarity(&v, &neg).unwrap().value + 1.0).abs() < 1e-15);
        assert_eq!(cosine_similarity(&[1.0, 0.0], &[0.0, 1.0]).unwrap().value, 0.0);
        let z = cosine_similarity(&[0.0, 0.0], &[1.0, 0.0]).unwrap();
        assert_eq!(z, Cosine { value: 0.0, degenerate: true });
        assert!(cosine_similarity(&[1.0], &[1.0, 2.0]).is_err());
    }
}
