//! Row-major f64 matrix multiply used by the neural layers.

#[cfg(not(feature = "fast-gemm"))]
use alloc::vec;

/// `c = alpha * a @ b + beta * c` with row-major `a` (m×k), `b` (k×n), `c` (m×n).
pub fn dgemm(m: usize, k: usize, n: usize, alpha: f64, a: &[f64], b: &[f64], beta: f64, c: &mut [f64]) {
    assert_eq!(a.len(), m * k, "gemm: lhs size");
    assert_eq!(b.len(), k * n, "gemm: rhs size");
    assert_eq!(c.len(), m * n, "gemm: out size");
    if m == 0 || n == 0 {
        return;
    }
    #[cfg(feature = "fast-gemm")]
    unsafe {
        // Dimensions are checked above; strides describe contiguous row-major layout.
        matrixmultiply::dgemm(
            m,
            k,
            n,
            alpha,
            a.as_ptr(),
            k as isize,
            1,
            b.as_ptr(),
            n as isize,
            1,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
    #[cfg(not(feature = "fast-gemm"))]
    {
        if beta != 1.0 {
            for v in c.iter_mut() {
                *v *= beta;
            }
        }
        // i-k-j order keeps the inner loop contiguous in both `b` and `c`.
        let mut row_buf = vec![0.0f64; n];
        for i in 0..m {
            row_buf.fill(0.0);
            for l in 0..k {
                let aval = a[i * k + l];
                if aval == 0.0 {
                    continue;
                }
                let brow = &b[l * n..(l + 1) * n];
                for (acc, &bv) in row_buf.iter_mut().zip(brow) {
                    *acc += aval * bv;
                }
            }
            let crow = &mut c[i * n..(i + 1) * n];
            for (cv, &acc) in crow.iter_mut().zip(&row_buf) {
                *cv += alpha * acc;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matches_naive_triple_loop() {
        let (m, k, n) = (3, 4, 5);
        let a: alloc::vec::Vec<f64> = (0..m * k).map(|i| i as f64 * 0.37 - 1.0).collect();
        let b: alloc::vec::Vec<f64> = (0..k * n).map(|i| 0.11 * i as f64 + 0.5).collect();
        let mut c = vec![1.0; m * n];
        dgemm(m, k, n, 2.0, &a, &b, 0.5, &mut c);

        for i in 0..m {
            for j in 0..n {
                let mut acc = 0.0;
                for l in 0..k {
                    acc += a[i * k + l] * b[l * n + j];
                }
                let expect = 2.0 * acc + 0.5;
                assert!((c[i * n + j] - expect).abs() < 1e-12);
            }
        }
    }
}
