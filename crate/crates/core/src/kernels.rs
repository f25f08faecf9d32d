//! Plain slice kernels shared by the graph ops and the non-differentiable
//! evaluation paths. All matrices are row-major.

use crate::error::{Error, Result};

/// Products with fewer multiply-adds than this use plain loops.
const GEMM_MIN_WORK: usize = 1024;

/// `out += a · b` with `a: [m, k]`, `b: [k, n]`, `out: [m, n]`.
pub fn matmul_acc(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, out: &mut [f64]) {
    assert!(a.len() >= m * k && b.len() >= k * n && out.len() >= m * n);
    if m * k * n < GEMM_MIN_WORK {
        return naive_acc(a, b, m, k, n, out);
    }
    // SAFETY: the bounds above cover every strided access.
    unsafe { gemm(m, k, n, a.as_ptr(), (k, 1), b.as_ptr(), (n, 1), out) }
}

/// `out += a · bᵀ` with `a: [m, k]`, `b: [n, k]`, `out: [m, n]`.
pub fn matmul_nt_acc(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, out: &mut [f64]) {
    assert!(a.len() >= m * k && b.len() >= n * k && out.len() >= m * n);
    if m * k * n < GEMM_MIN_WORK {
        return naive_nt_acc(a, b, m, k, n, out);
    }
    // SAFETY: as above, `b` read column-major.
    unsafe { gemm(m, k, n, a.as_ptr(), (k, 1), b.as_ptr(), (1, k), out) }
}

/// `out += aᵀ · b` with `a: [k, m]`, `b: [k, n]`, `out: [m, n]`.
pub fn matmul_tn_acc(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, out: &mut [f64]) {
    assert!(a.len() >= k * m && b.len() >= k * n && out.len() >= m * n);
    if m * k * n < GEMM_MIN_WORK {
        return naive_tn_acc(a, b, m, k, n, out);
    }
    // SAFETY: as above, `a` read column-major.
    unsafe { gemm(m, k, n, a.as_ptr(), (1, m), b.as_ptr(), (n, 1), out) }
}

/// `out += a · b` for strided `a: [m, k]` and `b: [k, n]`.
unsafe fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: *const f64,
    (rsa, csa): (usize, usize),
    b: *const f64,
    (rsb, csb): (usize, usize),
    out: &mut [f64],
) {
    if m == 0 || n == 0 {
        return;
    }
    matrixmultiply::dgemm(
        m,
        k,
        n,
        1.0,
        a,
        rsa as isize,
        csa as isize,
        b,
        rsb as isize,
        csb as isize,
        1.0,
        out.as_mut_ptr(),
        n as isize,
        1,
    );
}

/// `out += a · b` with `a: [m, k]`, `b: [k, n]`, `out: [m, n]`.
fn naive_acc(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, out: &mut [f64]) {
    for i in 0..m {
        let out_row = &mut out[i * n..(i + 1) * n];
        for (p, &aip) in a[i * k..(i + 1) * k].iter().enumerate() {
            if aip == 0.0 {
                continue;
            }
            let b_row = &b[p * n..(p + 1) * n];
            for (o, &bv) in out_row.iter_mut().zip(b_row) {
                *o += aip * bv;
            }
        }
    }
}

/// `out += a · bᵀ` with `a: [m, k]`, `b: [n, k]`, `out: [m, n]`.
fn naive_nt_acc(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, out: &mut [f64]) {
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let b_row = &b[j * k..(j + 1) * k];
            out[i * n + j] += dot(a_row, b_row);
        }
    }
}

/// `out += aᵀ · b` with `a: [k, m]`, `b: [k, n]`, `out: [m, n]`.
fn naive_tn_acc(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, out: &mut [f64]) {
    for p in 0..k {
        let a_row = &a[p * m..(p + 1) * m];
        let b_row = &b[p * n..(p + 1) * n];
        for (i, &api) in a_row.iter().enumerate() {
            if api == 0.0 {
                continue;
            }
            let out_row = &mut out[i * n..(i + 1) * n];
            for (o, &bv) in out_row.iter_mut().zip(b_row) {
                *o += api * bv;
            }
        }
    }
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Numerically stable softmax of `logits` restricted to entries where
/// `mask` is true; masked entries come out exactly zero.
///
/// Returns `Err(DegenerateSlice)` when no entry survives the mask.
pub fn masked_softmax_slice(logits: &[f64], mask: Option<&[bool]>, out: &mut [f64]) -> Result<()> {
    let keep = |i: usize| mask.map_or(true, |m| m[i]);
    let mut max = f64::NEG_INFINITY;
    for (i, &l) in logits.iter().enumerate() {
        if keep(i) && l > max {
            max = l;
        }
    }
    if max == f64::NEG_INFINITY {
        return Err(Error::DegenerateSlice {
            op: "masked_softmax",
            axis: 0,
        });
    }
    let mut total = 0.0;
    for (i, (&l, o)) in logits.iter().zip(out.iter_mut()).enumerate() {
        *o = if keep(i) { (l - max).exp() } else { 0.0 };
        total += *o;
    }
    for o in out.iter_mut() {
        *o /= total;
    }
    Ok(())
}

/// Softmax over `axis` of a tensor with the given shape, honoring an
/// optional mask of identical shape.
pub fn masked_softmax_axis(
    data: &[f64],
    shape: &[usize],
    mask: Option<&[bool]>,
    axis: usize,
) -> Result<Vec<f64>> {
    let (outer, n, inner) = crate::tensor::axis_split(shape, axis);
    let mut out = vec![0.0; data.len()];
    let mut lane = vec![0.0; n];
    let mut lane_mask = vec![true; n];
    let mut lane_out = vec![0.0; n];
    for o in 0..outer {
        for k in 0..inner {
            for i in 0..n {
                let idx = (o * n + i) * inner + k;
                lane[i] = data[idx];
                if let Some(m) = mask {
                    lane_mask[i] = m[idx];
                }
            }
            masked_softmax_slice(&lane, mask.map(|_| lane_mask.as_slice()), &mut lane_out)
                .map_err(|_| Error::DegenerateSlice {
                    op: "masked_softmax",
                    axis,
                })?;
            for i in 0..n {
                out[(o * n + i) * inner + k] = lane_out[i];
            }
        }
    }
    Ok(out)
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `ln Σ exp(x_i)` computed with max subtraction.
pub fn log_sum_exp(xs: &[f64]) -> f64 {
    let max = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    max + xs.iter().map(|x| (x - max).exp()).sum::<f64>().ln()
}
