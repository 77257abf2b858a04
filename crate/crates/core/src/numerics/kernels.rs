//! Dense kernels behind the differentiable primitives.
//!
//! Matrices are row-major slices. The GEMM wrapper delegates to
//! `matrixmultiply`, which is single-threaded and has a fixed blocking order,
//! so results are reproducible bit-for-bit.

/// `c = a · b + beta · c` where `a` is `m×k`, `b` is `k×n`, and both operands
/// may be transposed views through their strides.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    (rsa, csa): (isize, isize),
    b: &[f64],
    (rsb, csb): (isize, isize),
    beta: f64,
    c: &mut [f64],
) {
    assert!(c.len() >= m * n);
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        for v in c[..m * n].iter_mut() {
            *v *= beta;
        }
        return;
    }
    assert!(a.len() >= m * k && b.len() >= k * n);
    // SAFETY: the asserts above bound every index reachable through the
    // given strides, and `c` does not alias `a` or `b`.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Row-major strides for an `r×c` matrix and its transpose view.
pub(crate) fn rm(cols: usize) -> (isize, isize) {
    (cols as isize, 1)
}

pub(crate) fn tr(cols: usize) -> (isize, isize) {
    (1, cols as isize)
}

/// Geometry of a batched 3×3 same-padding convolution.
#[derive(Clone, Copy, Debug)]
pub(crate) struct ConvGeom {
    pub n: usize,
    pub h: usize,
    pub w: usize,
    pub cin: usize,
    pub cout: usize,
}

impl ConvGeom {
    pub fn rows(&self) -> usize {
        self.n * self.h * self.w
    }

    pub fn patch(&self) -> usize {
        9 * self.cin
    }
}

/// Unfolds `x` (N×H×W×Cin) into rows of 3×3×Cin patches, zero padded.
/// Patch layout is (ky, kx, ci), matching a 3×3×Cin×Cout kernel.
pub(crate) fn im2col(x: &[f64], g: ConvGeom) -> Vec<f64> {
    let patch = g.patch();
    let mut cols = vec![0.0; g.rows() * patch];
    for b in 0..g.n {
        for i in 0..g.h {
            for j in 0..g.w {
                let row = ((b * g.h + i) * g.w + j) * patch;
                for ky in 0..3 {
                    let si = i as isize + ky as isize - 1;
                    if si < 0 || si >= g.h as isize {
                        continue;
                    }
                    for kx in 0..3 {
                        let sj = j as isize + kx as isize - 1;
                        if sj < 0 || sj >= g.w as isize {
                            continue;
                        }
                        let src = ((b * g.h + si as usize) * g.w + sj as usize) * g.cin;
                        let dst = row + (ky * 3 + kx) * g.cin;
                        cols[dst..dst + g.cin].copy_from_slice(&x[src..src + g.cin]);
                    }
                }
            }
        }
    }
    cols
}

/// Adjoint of [`im2col`]: scatters patch gradients back onto the input grid.
pub(crate) fn col2im(dcols: &[f64], g: ConvGeom) -> Vec<f64> {
    let patch = g.patch();
    let mut dx = vec![0.0; g.n * g.h * g.w * g.cin];
    for b in 0..g.n {
        for i in 0..g.h {
            for j in 0..g.w {
                let row = ((b * g.h + i) * g.w + j) * patch;
                for ky in 0..3 {
                    let si = i as isize + ky as isize - 1;
                    if si < 0 || si >= g.h as isize {
                        continue;
                    }
                    for kx in 0..3 {
                        let sj = j as isize + kx as isize - 1;
                        if sj < 0 || sj >= g.w as isize {
                            continue;
                        }
                        let dst = ((b * g.h + si as usize) * g.w + sj as usize) * g.cin;
                        let src = row + (ky * 3 + kx) * g.cin;
                        for c in 0..g.cin {
                            dx[dst + c] += dcols[src + c];
                        }
                    }
                }
            }
        }
    }
    dx
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gemm_matches_naive_including_transposes() {
        let a: Vec<f64> = (0..6).map(|v| v as f64 * 0.5 - 1.0).collect(); // 2x3
        let b: Vec<f64> = (0..12).map(|v| (v as f64).sin()).collect(); // 3x4
        let mut c = vec![0.0; 8];
        gemm(2, 3, 4, &a, rm(3), &b, rm(4), 0.0, &mut c);
        for i in 0..2 {
            for j in 0..4 {
                let want: f64 = (0..3).map(|k| a[i * 3 + k] * b[k * 4 + j]).sum();
                assert!((c[i * 4 + j] - want).abs() < 1e-14);
            }
        }
        // aᵀ·a through a transposed view: 3x2 · 2x3.
        let mut d = vec![0.0; 9];
        gemm(3, 2, 3, &a, tr(3), &a, rm(3), 0.0, &mut d);
        for i in 0..3 {
            for j in 0..3 {
                let want: f64 = (0..2).map(|k| a[k * 3 + i] * a[k * 3 + j]).sum();
                assert!((d[i * 3 + j] - want).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn col2im_is_adjoint_of_im2col() {
        let g = ConvGeom {
            n: 2,
            h: 3,
            w: 4,
            cin: 2,
            cout: 1,
        };
        let x: Vec<f64> = (0..48).map(|v| ((v * 7) % 11) as f64 - 5.0).collect();
        let y: Vec<f64> = (0..g.rows() * g.patch())
            .map(|v| ((v * 5) % 13) as f64 - 6.0)
            .collect();
        let lhs: f64 = im2col(&x, g).iter().zip(&y).map(|(a, b)| a * b).sum();
        let rhs: f64 = x.iter().zip(&col2im(&y, g)).map(|(a, b)| a * b).sum();
        assert_eq!(lhs, rhs);
    }
}
