// Row-major matrix kernels accumulating into f64 buffers.

use super::Real;

/// `out[m,n] += a[m,k] · b[k,n]`
pub(crate) fn mm_nn<A: Real, B: Real>(
    a: &[A],
    b: &[B],
    m: usize,
    k: usize,
    n: usize,
    out: &mut [f64],
) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(out.len(), m * n);
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let aip = a[i * k + p].to_f64();
            if aip == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (o, bv) in row.iter_mut().zip(brow) {
                *o += aip * bv.to_f64();
            }
        }
    }
}

/// `out[m,n] += a[m,k] · b[n,k]ᵀ`
pub(crate) fn mm_nt<A: Real, B: Real>(
    a: &[A],
    b: &[B],
    m: usize,
    k: usize,
    n: usize,
    out: &mut [f64],
) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), n * k);
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let brow = &b[j * k..(j + 1) * k];
            let mut acc = 0.0f64;
            for (x, y) in arow.iter().zip(brow) {
                acc += x.to_f64() * y.to_f64();
            }
            out[i * n + j] += acc;
        }
    }
}

/// `out[k,n] += a[m,k]ᵀ · b[m,n]`
pub(crate) fn mm_tn<A: Real, B: Real>(
    a: &[A],
    b: &[B],
    m: usize,
    k: usize,
    n: usize,
    out: &mut [f64],
) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), m * n);
    debug_assert_eq!(out.len(), k * n);
    for i in 0..m {
        let brow = &b[i * n..(i + 1) * n];
        for p in 0..k {
            let aip = a[i * k + p].to_f64();
            if aip == 0.0 {
                continue;
            }
            let row = &mut out[p * n..(p + 1) * n];
            for (o, bv) in row.iter_mut().zip(brow) {
                *o += aip * bv.to_f64();
            }
        }
    }
}
