//! Scalar and group soft-thresholding, the building blocks of the
//! hierarchical penalty prox.

/// Scalar soft-threshold: prox of thr * |x|.
pub fn soft_threshold(v: f64, thr: f64) -> f64 {
    if v > thr {
        v - thr
    } else if v < -thr {
        v + thr
    } else {
        0.0
    }
}

/// Group soft-threshold in place: prox of thr * ||x||_2 over the slice.
/// Blocks at or below the threshold become exactly zero.
pub fn block_soft_threshold(block: &mut [f64], thr: f64) {
    let norm = block.iter().map(|v| v * v).sum::<f64>().sqrt();
    if norm <= thr {
        block.fill(0.0);
    } else {
        let scale = 1.0 - thr / norm;
        for v in block.iter_mut() {
            *v *= scale;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn soft_threshold_shrinks_toward_zero() {
        assert_eq!(soft_threshold(2.0, 0.5), 1.5);
        assert_eq!(soft_threshold(-2.0, 0.5), -1.5);
        assert_eq!(soft_threshold(-0.3, 0.5), 0.0);
        assert_eq!(soft_threshold(0.3, 0.5), 0.0);
    }

    #[test]
    fn soft_threshold_zero_threshold_is_identity() {
        assert_eq!(soft_threshold(1.25, 0.0), 1.25);
        assert_eq!(soft_threshold(-0.75, 0.0), -0.75);
    }

    #[test]
    fn block_soft_threshold_scales_norm() {
        // Norm 5 vector shrunk by 2.5: scale (1 - 2.5/5) = 0.5.
        let mut v = [3.0, 4.0];
        block_soft_threshold(&mut v, 2.5);
        assert_eq!(v, [1.5, 2.0]);
    }

    #[test]
    fn block_soft_threshold_kills_small_blocks_exactly() {
        let mut v = [0.3, 0.4];
        block_soft_threshold(&mut v, 0.5);
        assert_eq!(v, [0.0, 0.0]);

        // Boundary: norm equal to threshold also zeroes.
        let mut w = [3.0, 4.0];
        block_soft_threshold(&mut w, 5.0);
        assert_eq!(w, [0.0, 0.0]);
    }

    #[test]
    fn block_soft_threshold_singleton_matches_scalar() {
        for &(v, t) in &[(2.0, 0.5), (-2.0, 0.5), (0.2, 0.5), (-1.0, 1.0)] {
            let mut b = [v];
            block_soft_threshold(&mut b, t);
            assert_eq!(b[0], soft_threshold(v, t));
        }
    }
}
