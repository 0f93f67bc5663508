//! Raw numeric kernels over row-major slices.

use crate::par::Exec;
use crate::scalar::Real;

/// Below this many multiply-adds the parallel path is not worth the fan-out.
const PAR_THRESHOLD: usize = 1 << 16;

/// `out[m×n] = a[m×k] · b[k×n]`.
pub fn matmul<F: Real>(exec: Exec, a: &[F], b: &[F], out: &mut [F], m: usize, k: usize, n: usize) {
    let exec = if m * k * n < PAR_THRESHOLD {
        Exec::Sequential
    } else {
        exec
    };
    debug_assert_eq!(out.len(), m * n);
    if n == 0 {
        return;
    }
    exec.for_chunks(out, n, |i, row| {
        row.iter_mut().for_each(|v| *v = F::zero());
        let ar = &a[i * k..(i + 1) * k];
        for (p, &av) in ar.iter().enumerate() {
            if av == F::zero() {
                continue;
            }
            let br = &b[p * n..(p + 1) * n];
            for (o, &bv) in row.iter_mut().zip(br) {
                *o = *o + av * bv;
            }
        }
    });
}

/// `out[m×n] += a[m×k] · b[n×k]ᵀ`.
pub fn matmul_bt_acc<F: Real>(a: &[F], b: &[F], out: &mut [F], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let ar = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let br = &b[j * k..(j + 1) * k];
            let s: F = ar.iter().zip(br).map(|(&x, &y)| x * y).sum();
            out[i * n + j] = out[i * n + j] + s;
        }
    }
}

/// `out[k×n] += a[m×k]ᵀ · b[m×n]`.
pub fn matmul_at_acc<F: Real>(a: &[F], b: &[F], out: &mut [F], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let ar = &a[i * k..(i + 1) * k];
        let br = &b[i * n..(i + 1) * n];
        for (p, &av) in ar.iter().enumerate() {
            if av == F::zero() {
                continue;
            }
            let orow = &mut out[p * n..(p + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(br) {
                *o = *o + av * bv;
            }
        }
    }
}

pub fn dot<F: Real>(a: &[F], b: &[F]) -> F {
    a.iter().zip(b).map(|(&x, &y)| x * y).sum()
}

pub fn softmax_row<F: Real>(x: &[F], out: &mut [F]) {
    let mx = x.iter().copied().fold(F::neg_infinity(), F::max);
    let mut s = F::zero();
    for (o, &v) in out.iter_mut().zip(x) {
        *o = (v - mx).exp();
        s = s + *o;
    }
    for o in out.iter_mut() {
        *o = *o / s;
    }
}

pub fn log_softmax_row<F: Real>(x: &[F], out: &mut [F]) {
    let mx = x.iter().copied().fold(F::neg_infinity(), F::max);
    let lse = x.iter().map(|&v| (v - mx).exp()).sum::<F>().ln() + mx;
    for (o, &v) in out.iter_mut().zip(x) {
        *o = v - lse;
    }
}
