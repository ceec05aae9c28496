//! Small dense linear algebra helpers.
//!
//! Matrices are row-major `Vec<f64>` slices; everything here is written so the
//! inner loops run over contiguous memory and autovectorize.

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = [0.0f64; 4];
    let (ac, ar) = a.split_at(a.len() - a.len() % 4);
    let (bc, br) = b.split_at(ac.len());
    for (ca, cb) in ac.chunks_exact(4).zip(bc.chunks_exact(4)) {
        acc[0] += ca[0] * cb[0];
        acc[1] += ca[1] * cb[1];
        acc[2] += ca[2] * cb[2];
        acc[3] += ca[3] * cb[3];
    }
    let mut s = (acc[0] + acc[1]) + (acc[2] + acc[3]);
    for (x, y) in ar.iter().zip(br) {
        s += x * y;
    }
    s
}

pub fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    debug_assert_eq!(x.len(), y.len());
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

pub fn scale(alpha: f64, x: &mut [f64]) {
    for v in x {
        *v *= alpha;
    }
}

pub fn norm2(x: &[f64]) -> f64 {
    dot(x, x).sqrt()
}

/// `out[b*rows + o] = sum_i x[b*cols + i] * w[o*cols + i]` for each row pair:
/// batched matrix product X (batch x cols, row-major) times W^T (rows x cols).
pub fn matmul_xt(x: &[f64], w: &[f64], batch: usize, cols: usize, rows: usize, out: &mut [f64]) {
    debug_assert_eq!(x.len(), batch * cols);
    debug_assert_eq!(w.len(), rows * cols);
    debug_assert_eq!(out.len(), batch * rows);
    for b in 0..batch {
        let xr = &x[b * cols..(b + 1) * cols];
        let or = &mut out[b * rows..(b + 1) * rows];
        for (o, slot) in or.iter_mut().enumerate() {
            *slot = dot(xr, &w[o * cols..(o + 1) * cols]);
        }
    }
}

/// Jacobi eigenvalue iteration for a symmetric matrix (row-major, n x n).
/// Returns all eigenvalues, unordered. Independent of any power-iteration
/// path, so it can serve as an oracle for those.
pub fn symmetric_eigenvalues(a: &[f64], n: usize) -> Vec<f64> {
    assert_eq!(a.len(), n * n);
    let mut m = a.to_vec();
    let max_sweeps = 100;
    for _ in 0..max_sweeps {
        let mut off = 0.0;
        for i in 0..n {
            for j in (i + 1)..n {
                off += m[i * n + j] * m[i * n + j];
            }
        }
        if off.sqrt() <= 1e-14 * frob(&m) + f64::MIN_POSITIVE {
            break;
        }
        for p in 0..n {
            for q in (p + 1)..n {
                let apq = m[p * n + q];
                if apq == 0.0 {
                    continue;
                }
                let app = m[p * n + p];
                let aqq = m[q * n + q];
                let theta = (aqq - app) / (2.0 * apq);
                let t = if theta >= 0.0 {
                    1.0 / (theta + (1.0 + theta * theta).sqrt())
                } else {
                    -1.0 / (-theta + (1.0 + theta * theta).sqrt())
                };
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = t * c;
                for k in 0..n {
                    let akp = m[k * n + p];
                    let akq = m[k * n + q];
                    m[k * n + p] = c * akp - s * akq;
                    m[k * n + q] = s * akp + c * akq;
                }
                for k in 0..n {
                    let apk = m[p * n + k];
                    let aqk = m[q * n + k];
                    m[p * n + k] = c * apk - s * aqk;
                    m[q * n + k] = s * apk + c * aqk;
                }
            }
        }
    }
    (0..n).map(|i| m[i * n + i]).collect()
}

fn frob(m: &[f64]) -> f64 {
    dot(m, m).sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matmul_matches_hand_example() {
        // W = [[1,2],[3,4]], x = (1,1) -> (3, 7)
        let w = [1.0, 2.0, 3.0, 4.0];
        let x = [1.0, 1.0];
        let mut out = [0.0; 2];
        matmul_xt(&x, &w, 1, 2, 2, &mut out);
        assert_eq!(out, [3.0, 7.0]);
    }

    #[test]
    fn jacobi_recovers_diagonal_spectrum() {
        let a = [3.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, -5.0];
        let mut ev = symmetric_eigenvalues(&a, 3);
        ev.sort_by(|a, b| a.partial_cmp(b).unwrap());
        assert_eq!(ev, vec![-5.0, 1.0, 3.0]);
    }

    #[test]
    fn jacobi_handles_rotated_matrix() {
        // eigenvalues 2 and 0.5 under a 45-degree rotation
        let a = [1.25, 0.75, 0.75, 1.25];
        let mut ev = symmetric_eigenvalues(&a, 2);
        ev.sort_by(|a, b| a.partial_cmp(b).unwrap());
        assert!((ev[0] - 0.5).abs() < 1e-12);
        assert!((ev[1] - 2.0).abs() < 1e-12);
    }

    #[test]
    fn eigenvalue_squares_sum_to_frobenius_norm() {
        let mut rng = crate::rng::Rng::from_seed(1);
        let n = 12;
        let mut a = vec![0.0; n * n];
        for i in 0..n {
            for j in 0..=i {
                let v = rng.standard_normal();
                a[i * n + j] = v;
                a[j * n + i] = v;
            }
        }
        let ev = symmetric_eigenvalues(&a, n);
        let sum_sq: f64 = ev.iter().map(|l| l * l).sum();
        let fro_sq = dot(&a, &a);
        assert!((sum_sq - fro_sq).abs() <= 1e-10 * fro_sq);
    }
}
