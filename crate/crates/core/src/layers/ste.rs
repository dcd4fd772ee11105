//! Straight-through derivatives of `W_q = round(clamp(w)) * s + b` with
//! `w = (W - b) / s`.
//!
//! Rounding is treated as the identity inside `[q_n, q_p]` (closed) and
//! the clamp as constant outside it, which gives
//!
//! ```text
//! dW_q/ds = q_n        if w < q_n
//!         = code - w   if q_n <= w <= q_p
//!         = q_p        if w > q_p
//! dW_q/db = 0 inside, 1 outside
//! dW_q/dW = 1 inside, 0 outside   (the range mask)
//! ```

use crate::numerics::{Matrix, Real};
use crate::quantizer::{CodeMatrix, QuantSpec};

#[inline]
pub fn in_range<T: Real>(w: T, spec: &QuantSpec) -> bool {
    spec.in_range(w)
}

#[inline]
pub(crate) fn dwq_ds_elem<T: Real>(w: T, code: i8, spec: &QuantSpec) -> f64 {
    let w = w.as_f64();
    if w < spec.q_n() as f64 {
        spec.q_n() as f64
    } else if w > spec.q_p() as f64 {
        spec.q_p() as f64
    } else {
        code as f64 - w
    }
}

#[inline]
pub(crate) fn dwq_db_elem<T: Real>(w: T, spec: &QuantSpec) -> f64 {
    if spec.in_range(w) {
        0.0
    } else {
        1.0
    }
}

/// `true` where the pre-round value lies in `[q_n, q_p]`.
pub fn ste_mask<T: Real>(scaled: &Matrix<T>, spec: &QuantSpec) -> Vec<bool> {
    scaled.as_slice().iter().map(|&w| spec.in_range(w)).collect()
}

/// Elementwise `dW_q/ds`.
pub fn dwq_ds<T: Real>(scaled: &Matrix<T>, codes: &CodeMatrix, spec: &QuantSpec) -> Matrix<T> {
    Matrix::from_fn(scaled.rows(), scaled.cols(), |r, c| {
        T::from_f64(dwq_ds_elem(scaled.get(r, c), codes.get(r, c), spec))
    })
}

/// Elementwise `dW_q/db`.
pub fn dwq_db<T: Real>(scaled: &Matrix<T>, spec: &QuantSpec) -> Matrix<T> {
    scaled.map(|w| T::from_f64(dwq_db_elem(w, spec)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{randn, Rng};

    fn spec() -> QuantSpec {
        QuantSpec::new(4, 1).unwrap()
    }

    fn one(v: f64) -> Matrix {
        Matrix::new(1, 1, vec![v]).unwrap()
    }

    fn code(c: i8) -> CodeMatrix {
        CodeMatrix::new(1, 1, vec![c]).unwrap()
    }

    #[test]
    fn mask_is_closed_interval() {
        let s = spec();
        assert_eq!(ste_mask(&one(0.0), &s), vec![true]);
        assert_eq!(ste_mask(&one(7.0), &s), vec![true]);
        assert_eq!(ste_mask(&one(-8.0), &s), vec![true]);
        assert_eq!(ste_mask(&one(7.01), &s), vec![false]);
        assert_eq!(ste_mask(&one(-8.01), &s), vec![false]);
    }

    #[test]
    fn mask_matches_direct_comparison() {
        let w: Matrix = randn(&mut Rng::new(5), 8, 8, 6.0);
        let mask = ste_mask(&w, &spec());
        for (m, &v) in mask.iter().zip(w.as_slice()) {
            assert_eq!(*m, (-8.0..=7.0).contains(&v));
        }
    }

    #[test]
    fn scale_derivative_cases() {
        let s = spec();
        assert!((dwq_ds(&one(2.4), &code(2), &s).get(0, 0) - (-0.4)).abs() < 1e-12);
        assert_eq!(dwq_ds(&one(9.0), &code(7), &s).get(0, 0), 7.0);
        assert_eq!(dwq_ds(&one(-20.0), &code(-8), &s).get(0, 0), -8.0);
        assert_eq!(dwq_ds(&one(3.0), &code(3), &s).get(0, 0), 0.0);
    }

    #[test]
    fn bias_derivative_cases() {
        let s = spec();
        assert_eq!(dwq_db(&one(0.0), &s).get(0, 0), 0.0);
        assert_eq!(dwq_db(&one(-20.0), &s).get(0, 0), 1.0);
        assert_eq!(dwq_db(&one(7.5), &s).get(0, 0), 1.0);
    }

    #[test]
    fn bias_derivative_is_mask_complement() {
        let w: Matrix = randn(&mut Rng::new(8), 6, 10, 8.0);
        let db = dwq_db(&w, &spec());
        for (m, &d) in ste_mask(&w, &spec()).iter().zip(db.as_slice()) {
            assert_eq!(d, if *m { 0.0 } else { 1.0 });
        }
    }
}
