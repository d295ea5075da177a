//! Rotary position embedding.

use ndarray::ArrayViewMut1;

pub const ROPE_BASE: f64 = 10_000.0;

/// Rotates dimension pairs `(2t, 2t+1)` by `position * base^(-2t/d)`.
pub fn rope_rotate(mut v: ArrayViewMut1<f64>, position: usize) {
    let d = v.len();
    debug_assert!(d.is_multiple_of(2), "head_dim must be even");
    let p = position as f64;
    for t in 0..d / 2 {
        let theta = ROPE_BASE.powf(-2.0 * t as f64 / d as f64);
        let (sin, cos) = (p * theta).sin_cos();
        let (x, y) = (v[2 * t], v[2 * t + 1]);
        v[2 * t] = x * cos - y * sin;
        v[2 * t + 1] = x * sin + y * cos;
    }
}

/// Returns a rotated copy.
pub fn rope_rotated(v: &[f64], position: usize) -> Vec<f64> {
    let mut out = ndarray::Array1::from(v.to_vec());
    rope_rotate(out.view_mut(), position);
    out.to_vec()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn dot(a: &[f64], b: &[f64]) -> f64 {
        a.iter().zip(b).map(|(x, y)| x * y).sum()
    }

    #[test]
    fn position_zero_is_identity() {
        let v = [0.3, -1.2, 2.0, 0.5];
        assert_eq!(rope_rotated(&v, 0), v.to_vec());
    }

    #[test]
    fn first_pair_rotates_by_position() {
        // theta_0 = 1, so position 1 rotates the first pair by one radian
        let r = rope_rotated(&[1.0, 0.0, 0.0, 0.0], 1);
        assert!((r[0] - 1f64.cos()).abs() < 1e-15);
        assert!((r[1] - 1f64.sin()).abs() < 1e-15);
    }

    proptest! {
        #[test]
        fn relative_position_property(
            q in prop::collection::vec(-2.0f64..2.0, 8),
            k in prop::collection::vec(-2.0f64..2.0, 8),
            p in 0usize..2000,
            delta in 0usize..500,
        ) {
            let lhs = dot(&rope_rotated(&q, p), &rope_rotated(&k, p + delta));
            let rhs = dot(&rope_rotated(&q, 0), &rope_rotated(&k, delta));
            prop_assert!((lhs - rhs).abs() < 1e-9, "{lhs} vs {rhs}");
        }

        #[test]
        fn norm_preserved(v in prop::collection::vec(-5.0f64..5.0, 16), p in 0usize..10_000) {
            let r = rope_rotated(&v, p);
            prop_assert!((dot(&r, &r) - dot(&v, &v)).abs() < 1e-9);
        }
    }
}
