//! Orthogonal and delta-orthogonal weight initialization.

use nalgebra::DMatrix;
use rand::Rng;
use rand_distr::StandardNormal;

/// Row-major `rows x cols` matrix with orthonormal rows (when `rows <= cols`)
/// or orthonormal columns (otherwise), gain 1.
pub fn orthogonal(rows: usize, cols: usize, rng: &mut impl Rng) -> Vec<f64> {
    if rows == 0 || cols == 0 {
        return Vec::new();
    }
    let (tall, short) = (rows.max(cols), rows.min(cols));
    let a = DMatrix::<f64>::from_fn(tall, short, |_, _| rng.sample(StandardNormal));
    let qr = a.qr();
    let mut q = qr.q();
    let r = qr.r();
    // Fix column signs so the distribution is Haar rather than biased by QR.
    for j in 0..short {
        if r[(j, j)] < 0.0 {
            q.column_mut(j).neg_mut();
        }
    }
    let mut out = vec![0.0; rows * cols];
    for i in 0..rows {
        for j in 0..cols {
            out[i * cols + j] = if rows >= cols { q[(i, j)] } else { q[(j, i)] };
        }
    }
    out
}

/// 3x3 kernel bank `[a, b, 3, 3]` that is zero everywhere except the spatial
/// centre, which holds an orthogonal `a x b` matrix.
pub fn delta_orthogonal(a: usize, b: usize, rng: &mut impl Rng) -> Vec<f64> {
    let centre = orthogonal(a, b, rng);
    let mut k = vec![0.0; a * b * 9];
    for i in 0..a {
        for j in 0..b {
            k[(i * b + j) * 9 + 4] = centre[i * b + j];
        }
    }
    k
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn gram_is_identity(m: &[f64], rows: usize, cols: usize) -> bool {
        let small = rows.min(cols);
        for p in 0..small {
            for q in 0..small {
                let dot: f64 = if rows <= cols {
                    (0..cols).map(|j| m[p * cols + j] * m[q * cols + j]).sum()
                } else {
                    (0..rows).map(|i| m[i * cols + p] * m[i * cols + q]).sum()
                };
                let want = if p == q { 1.0 } else { 0.0 };
                if (dot - want).abs() > 1e-8 {
                    return false;
                }
            }
        }
        true
    }

    #[test]
    fn orthogonal_gram_identity_for_all_aspect_ratios() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for (r, c) in [(5, 5), (8, 3), (3, 8), (1, 7), (64, 50)] {
            let m = orthogonal(r, c, &mut rng);
            assert!(gram_is_identity(&m, r, c), "{r}x{c}");
        }
    }

    #[test]
    fn delta_orthogonal_is_zero_off_centre() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let k = delta_orthogonal(6, 4, &mut rng);
        for (i, v) in k.iter().enumerate() {
            if i % 9 != 4 {
                assert_eq!(*v, 0.0);
            }
        }
        let centre: Vec<f64> = k.iter().skip(4).step_by(9).copied().collect();
        assert!(gram_is_identity(&centre, 6, 4));
    }

    #[test]
    fn same_seed_same_weights() {
        let a = orthogonal(7, 5, &mut ChaCha8Rng::seed_from_u64(3));
        let b = orthogonal(7, 5, &mut ChaCha8Rng::seed_from_u64(3));
        assert_eq!(a, b);
    }
}
