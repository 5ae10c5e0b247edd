//! Raw matrix kernels over row-major slices. All of them accumulate into `c`.

use std::cell::RefCell;

// Two inner-loop shapes: an axpy over output rows (vectorizes when q is
// wide) and a dot product over p (4 partial sums; wins when q is narrow).
// Operands are transposed into scratch as needed to feed either one.

const WIDE: usize = 8;

#[inline]
fn dot(x: &[f64], y: &[f64]) -> f64 {
    let mut acc = [0.0; 4];
    let (xc, yc) = (x.chunks_exact(4), y.chunks_exact(4));
    let (xr, yr) = (xc.remainder(), yc.remainder());
    for (a, b) in xc.zip(yc) {
        for l in 0..4 {
            acc[l] += a[l] * b[l];
        }
    }
    let mut tail = 0.0;
    for (a, b) in xr.iter().zip(yr) {
        tail += a * b;
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

fn transpose_into(src: &[f64], rows: usize, cols: usize, out: &mut Vec<f64>) {
    out.clear();
    out.resize(src.len(), 0.0);
    for r in 0..rows {
        for c in 0..cols {
            out[c * rows + r] = src[r * cols + c];
        }
    }
}

#[cfg(test)]
fn transpose(src: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut out = Vec::new();
    transpose_into(src, rows, cols, &mut out);
    out
}

thread_local! {
    // reused transpose buffers; batched matmuls call the kernels many times
    static SCRATCH: RefCell<(Vec<f64>, Vec<f64>)> = const { RefCell::new((Vec::new(), Vec::new())) };
}

/// c[m,q] += a[m,p] · b[p,q], both row-major.
fn axpy_form(a: &[f64], b: &[f64], c: &mut [f64], m: usize, p: usize, q: usize) {
    for i in 0..m {
        let crow = &mut c[i * q..(i + 1) * q];
        let arow = &a[i * p..(i + 1) * p];
        for (k, &aik) in arow.iter().enumerate() {
            let brow = &b[k * q..(k + 1) * q];
            for (cv, &bv) in crow.iter_mut().zip(brow) {
                *cv += aik * bv;
            }
        }
    }
}

/// c[m,q] += a[m,p] · bt[q,p]ᵀ.
fn dot_form(a: &[f64], bt: &[f64], c: &mut [f64], m: usize, p: usize, q: usize) {
    for i in 0..m {
        let arow = &a[i * p..(i + 1) * p];
        for j in 0..q {
            c[i * q + j] += dot(arow, &bt[j * p..(j + 1) * p]);
        }
    }
}

/// c[m,q] += a[m,p] · b[p,q]
pub(crate) fn gemm_nn(a: &[f64], b: &[f64], c: &mut [f64], m: usize, p: usize, q: usize) {
    if q >= WIDE || p < WIDE {
        axpy_form(a, b, c, m, p, q);
    } else {
        SCRATCH.with_borrow_mut(|(bt, _)| {
            transpose_into(b, p, q, bt);
            dot_form(a, bt, c, m, p, q);
        });
    }
}

/// c[m,q] += a[m,p] · b[q,p]ᵀ
pub(crate) fn gemm_nt(a: &[f64], b: &[f64], c: &mut [f64], m: usize, p: usize, q: usize) {
    if p >= WIDE || q < WIDE {
        dot_form(a, b, c, m, p, q);
    } else {
        SCRATCH.with_borrow_mut(|(bt, _)| {
            transpose_into(b, q, p, bt);
            axpy_form(a, bt, c, m, p, q);
        });
    }
}

/// c[m,q] += a[p,m]ᵀ · b[p,q]
pub(crate) fn gemm_tn(a: &[f64], b: &[f64], c: &mut [f64], m: usize, p: usize, q: usize) {
    if q >= WIDE || p < WIDE {
        for k in 0..p {
            let brow = &b[k * q..(k + 1) * q];
            for i in 0..m {
                let aki = a[k * m + i];
                let crow = &mut c[i * q..(i + 1) * q];
                for (cv, &bv) in crow.iter_mut().zip(brow) {
                    *cv += aki * bv;
                }
            }
        }
    } else {
        SCRATCH.with_borrow_mut(|(at, bt)| {
            transpose_into(a, p, m, at);
            transpose_into(b, p, q, bt);
            dot_form(at, bt, c, m, p, q);
        });
    }
}

/// Splits `shape` around `axis` into (outer, len, inner) extents.
pub(crate) fn axis_extents(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gemm_variants_agree() {
        // a: 2x3, b: 3x2
        let a = [1.0, 2.0, 3.0, 4.0, 5.0, 6.0];
        let b = [7.0, 8.0, 9.0, 10.0, 11.0, 12.0];
        let mut c = [0.0; 4];
        gemm_nn(&a, &b, &mut c, 2, 3, 2);
        assert_eq!(c, [58.0, 64.0, 139.0, 154.0]);

        let bt = [7.0, 9.0, 11.0, 8.0, 10.0, 12.0];
        let mut c2 = [0.0; 4];
        gemm_nt(&a, &bt, &mut c2, 2, 3, 2);
        assert_eq!(c, c2);

        let at = [1.0, 4.0, 2.0, 5.0, 3.0, 6.0];
        let mut c3 = [0.0; 4];
        gemm_tn(&at, &b, &mut c3, 2, 3, 2);
        assert_eq!(c, c3);
    }

    #[test]
    fn both_loop_shapes_agree() {
        // exercise the transposing paths with narrow and wide operands
        for &(m, p, q) in &[(3, 9, 2), (3, 2, 9), (5, 12, 3), (4, 3, 12), (2, 16, 16)] {
            let a: Vec<f64> = (0..m * p).map(|i| (i as f64 * 0.37).sin()).collect();
            let b: Vec<f64> = (0..p * q).map(|i| (i as f64 * 0.71).cos()).collect();
            let mut reference = vec![0.0; m * q];
            for i in 0..m {
                for j in 0..q {
                    reference[i * q + j] = (0..p).map(|k| a[i * p + k] * b[k * q + j]).sum();
                }
            }
            let close = |c: &[f64]| c.iter().zip(&reference).all(|(x, y)| (x - y).abs() < 1e-12);
            let mut c = vec![0.0; m * q];
            gemm_nn(&a, &b, &mut c, m, p, q);
            assert!(close(&c));
            let mut c = vec![0.0; m * q];
            gemm_nt(&a, &transpose(&b, p, q), &mut c, m, p, q);
            assert!(close(&c));
            let mut c = vec![0.0; m * q];
            gemm_tn(&transpose(&a, m, p), &b, &mut c, m, p, q);
            assert!(close(&c));
        }
    }
}
