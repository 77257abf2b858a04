//! Small dense linear algebra for the invertible channel mix.
//! Matrices are row-major `n×n` slices.

use rand::Rng;
use rand_distr::StandardNormal;

pub(crate) fn matmul(a: &[f64], b: &[f64], n: usize) -> Vec<f64> {
    let mut c = vec![0.0; n * n];
    for i in 0..n {
        for k in 0..n {
            let aik = a[i * n + k];
            for j in 0..n {
                c[i * n + j] += aik * b[k * n + j];
            }
        }
    }
    c
}

/// Random orthogonal matrix via modified Gram–Schmidt on a Gaussian draw.
#[allow(clippy::needless_range_loop)]
pub(crate) fn random_rotation(n: usize, rng: &mut impl Rng) -> Vec<f64> {
    loop {
        let mut cols: Vec<Vec<f64>> = (0..n)
            .map(|_| (0..n).map(|_| rng.sample(StandardNormal)).collect())
            .collect();
        let mut ok = true;
        for j in 0..n {
            for k in 0..j {
                let dot: f64 = (0..n).map(|i| cols[j][i] * cols[k][i]).sum();
                for i in 0..n {
                    cols[j][i] -= dot * cols[k][i];
                }
            }
            let norm = cols[j].iter().map(|v| v * v).sum::<f64>().sqrt();
            if norm < 1e-8 {
                ok = false;
                break;
            }
            cols[j].iter_mut().for_each(|v| *v /= norm);
        }
        if ok {
            let mut q = vec![0.0; n * n];
            for (j, col) in cols.iter().enumerate() {
                for i in 0..n {
                    q[i * n + j] = col[i];
                }
            }
            return q;
        }
    }
}

/// `a = P·L·U` with partial pivoting. Returns `(perm, lower, upper)` where
/// `perm[i]` is the row of `a` that lands in row `i` of `L·U`, i.e.
/// `P[perm[i], i] = 1`. `lower` is unit lower triangular.
pub(crate) fn plu(a: &[f64], n: usize) -> (Vec<usize>, Vec<f64>, Vec<f64>) {
    let mut u = a.to_vec();
    let mut l = vec![0.0; n * n];
    let mut perm: Vec<usize> = (0..n).collect();
    for k in 0..n {
        let pivot = (k..n)
            .max_by(|&x, &y| u[x * n + k].abs().total_cmp(&u[y * n + k].abs()))
            .unwrap();
        if pivot != k {
            for j in 0..n {
                u.swap(k * n + j, pivot * n + j);
                l.swap(k * n + j, pivot * n + j);
            }
            perm.swap(k, pivot);
        }
        for i in k + 1..n {
            let f = u[i * n + k] / u[k * n + k];
            l[i * n + k] = f;
            for j in k..n {
                u[i * n + j] -= f * u[k * n + j];
            }
        }
    }
    for i in 0..n {
        l[i * n + i] = 1.0;
        for j in 0..i {
            u[i * n + j] = 0.0;
        }
    }
    (perm, l, u)
}

/// Inverse of a lower triangular matrix by forward substitution.
pub(crate) fn invert_lower(l: &[f64], n: usize) -> Vec<f64> {
    let mut inv = vec![0.0; n * n];
    for col in 0..n {
        for i in 0..n {
            let mut s = if i == col { 1.0 } else { 0.0 };
            for k in 0..i {
                s -= l[i * n + k] * inv[k * n + col];
            }
            inv[i * n + col] = s / l[i * n + i];
        }
    }
    inv
}

/// Inverse of an upper triangular matrix by back substitution.
pub(crate) fn invert_upper(u: &[f64], n: usize) -> Vec<f64> {
    let mut inv = vec![0.0; n * n];
    for col in 0..n {
        for i in (0..n).rev() {
            let mut s = if i == col { 1.0 } else { 0.0 };
            for k in i + 1..n {
                s -= u[i * n + k] * inv[k * n + col];
            }
            inv[i * n + col] = s / u[i * n + i];
        }
    }
    inv
}

/// `log|det a|` by PLU; `-inf` when singular.
pub fn log_abs_det(a: &[f64], n: usize) -> f64 {
    let (_, _, u) = plu(a, n);
    (0..n).map(|i| u[i * n + i].abs().ln()).sum()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn perm_matrix(perm: &[usize]) -> Vec<f64> {
        let n = perm.len();
        let mut p = vec![0.0; n * n];
        for (i, &r) in perm.iter().enumerate() {
            p[r * n + i] = 1.0;
        }
        p
    }

    #[test]
    fn plu_reconstructs_rotation() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let n = 5;
        let q = random_rotation(n, &mut rng);
        let qtq = matmul(
            &(0..n * n).map(|k| q[(k % n) * n + k / n]).collect::<Vec<_>>(),
            &q,
            n,
        );
        for i in 0..n {
            for j in 0..n {
                let want = if i == j { 1.0 } else { 0.0 };
                assert!((qtq[i * n + j] - want).abs() < 1e-12);
            }
        }
        let (perm, l, u) = plu(&q, n);
        let back = matmul(&perm_matrix(&perm), &matmul(&l, &u, n), n);
        for (a, b) in back.iter().zip(&q) {
            assert!((a - b).abs() < 1e-12);
        }
        assert!(log_abs_det(&q, n).abs() < 1e-12);
    }

    #[test]
    fn triangular_inverses() {
        let l = [1.0, 0.0, 0.0, 2.0, 1.0, 0.0, -1.0, 0.5, 1.0];
        let u = [2.0, 1.0, -1.0, 0.0, 3.0, 0.5, 0.0, 0.0, -0.5];
        for (m, inv) in [(l, invert_lower(&l, 3)), (u, invert_upper(&u, 3))] {
            let id = matmul(&m, &inv, 3);
            for i in 0..3 {
                for j in 0..3 {
                    let want = if i == j { 1.0 } else { 0.0 };
                    assert!((id[i * 3 + j] - want).abs() < 1e-14);
                }
            }
        }
    }
}
