//! Row-major matrix multiply kernels. `f32` and `f64` go through the blocked
//! kernels of `matrixmultiply`; any other scalar falls back to plain loops
//! ordered so the innermost loop runs over contiguous memory.

use std::any::TypeId;

use crate::tensor::Scalar;

/// Strided view: element `(r, c)` lives at `r·rs + c·cs`.
#[derive(Clone, Copy)]
struct View {
    rs: isize,
    cs: isize,
}

const ROW_MAJOR: fn(usize) -> View = |cols| View {
    rs: cols as isize,
    cs: 1,
};
const TRANSPOSED: fn(usize) -> View = |cols| View {
    rs: 1,
    cs: cols as isize,
};

/// `out[n×m] += a[n×k] · b[k×m]` with `a` and `b` described by strides.
#[allow(clippy::too_many_arguments)]
fn gemm<T: Scalar>(
    a: &[T],
    av: View,
    b: &[T],
    bv: View,
    out: &mut [T],
    n: usize,
    k: usize,
    m: usize,
) {
    if n == 0 || k == 0 || m == 0 {
        return;
    }
    debug_assert!(out.len() >= n * m);
    let id = TypeId::of::<T>();
    // SAFETY: the TypeId checks make the pointer casts identity casts, and the
    // strides stay within the slices by the callers' shape contracts.
    unsafe {
        if id == TypeId::of::<f32>() {
            matrixmultiply::sgemm(
                n,
                k,
                m,
                1.0,
                a.as_ptr() as *const f32,
                av.rs,
                av.cs,
                b.as_ptr() as *const f32,
                bv.rs,
                bv.cs,
                1.0,
                out.as_mut_ptr() as *mut f32,
                m as isize,
                1,
            );
            return;
        }
        if id == TypeId::of::<f64>() {
            matrixmultiply::dgemm(
                n,
                k,
                m,
                1.0,
                a.as_ptr() as *const f64,
                av.rs,
                av.cs,
                b.as_ptr() as *const f64,
                bv.rs,
                bv.cs,
                1.0,
                out.as_mut_ptr() as *mut f64,
                m as isize,
                1,
            );
            return;
        }
    }
    let at = |r: usize, c: usize| a[(r as isize * av.rs + c as isize * av.cs) as usize];
    let bt = |r: usize, c: usize| b[(r as isize * bv.rs + c as isize * bv.cs) as usize];
    for i in 0..n {
        for p in 0..k {
            let x = at(i, p);
            for j in 0..m {
                out[i * m + j] += x * bt(p, j);
            }
        }
    }
}

/// `out[n×m] += a[n×k] · b[k×m]`
pub(crate) fn gemm_nn<T: Scalar>(a: &[T], b: &[T], out: &mut [T], n: usize, k: usize, m: usize) {
    gemm(a, ROW_MAJOR(k), b, ROW_MAJOR(m), out, n, k, m);
}

/// `out[n×m] += a[n×k] · b[m×k]ᵀ`
pub(crate) fn gemm_nt<T: Scalar>(a: &[T], b: &[T], out: &mut [T], n: usize, k: usize, m: usize) {
    gemm(a, ROW_MAJOR(k), b, TRANSPOSED(k), out, n, k, m);
}

/// `out[k×m] += a[n×k]ᵀ · b[n×m]`
pub(crate) fn gemm_tn<T: Scalar>(a: &[T], b: &[T], out: &mut [T], n: usize, k: usize, m: usize) {
    gemm(a, TRANSPOSED(k), b, ROW_MAJOR(m), out, k, n, m);
}

#[cfg(test)]
mod tests {
    use super::*;

    // [[1,2,3],[4,5,6]] · [[7,8],[9,10],[11,12]] = [[58,64],[139,154]]
    #[test]
    fn hand_computed_product() {
        let a = [1.0, 2.0, 3.0, 4.0, 5.0, 6.0];
        let b = [7.0, 8.0, 9.0, 10.0, 11.0, 12.0];
        let mut out = [0.0f64; 4];
        gemm_nn(&a, &b, &mut out, 2, 3, 2);
        assert_eq!(out, [58.0, 64.0, 139.0, 154.0]);

        let bt = [7.0, 9.0, 11.0, 8.0, 10.0, 12.0];
        let mut out = [0.0f64; 4];
        gemm_nt(&a, &bt, &mut out, 2, 3, 2);
        assert_eq!(out, [58.0, 64.0, 139.0, 154.0]);

        let at = [1.0, 4.0, 2.0, 5.0, 3.0, 6.0];
        let mut out = [0.0f64; 4];
        gemm_tn(&at, &b, &mut out, 3, 2, 2);
        assert_eq!(out, [58.0, 64.0, 139.0, 154.0]);
    }
}
