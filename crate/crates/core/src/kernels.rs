//! Slice-level numeric kernels shared by forward and backward passes.
//!
//! All matrices are row-major. Row-parallel kernels split work only across
//! output rows, so every output element is reduced in a fixed order and
//! results are bitwise independent of the thread count.

use rayon::prelude::*;

const PAR_THRESHOLD: usize = 1 << 17;

/// `out[m,n] = a[m,k] · b[k,n]`
pub fn matmul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    let mut out = vec![0.0; m * n];
    let row = |(i, out_row): (usize, &mut [f64])| {
        let a_row = &a[i * k..(i + 1) * k];
        for (kk, &av) in a_row.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let b_row = &b[kk * n..(kk + 1) * n];
            for (o, &bv) in out_row.iter_mut().zip(b_row) {
                *o += av * bv;
            }
        }
    };
    if m * k * n >= PAR_THRESHOLD && m > 1 {
        out.par_chunks_mut(n).enumerate().for_each(row);
    } else {
        out.chunks_mut(n).enumerate().for_each(row);
    }
    out
}

/// `out[m,n] = a[m,k] · b[n,k]ᵀ`
pub fn matmul_a_bt(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), n * k);
    let mut out = vec![0.0; m * n];
    let row = |(i, out_row): (usize, &mut [f64])| {
        let a_row = &a[i * k..(i + 1) * k];
        // Four independent accumulators; each still sums over k in order.
        let mut quads = out_row.chunks_exact_mut(4);
        let mut j = 0;
        for o in &mut quads {
            let (b0, b1, b2, b3) = (
                &b[j * k..(j + 1) * k],
                &b[(j + 1) * k..(j + 2) * k],
                &b[(j + 2) * k..(j + 3) * k],
                &b[(j + 3) * k..(j + 4) * k],
            );
            let (mut s0, mut s1, mut s2, mut s3) = (0.0, 0.0, 0.0, 0.0);
            for t in 0..k {
                let x = a_row[t];
                s0 += x * b0[t];
                s1 += x * b1[t];
                s2 += x * b2[t];
                s3 += x * b3[t];
            }
            o.copy_from_slice(&[s0, s1, s2, s3]);
            j += 4;
        }
        for o in quads.into_remainder() {
            let b_row = &b[j * k..(j + 1) * k];
            let mut acc = 0.0;
            for (x, y) in a_row.iter().zip(b_row) {
                acc += x * y;
            }
            *o = acc;
            j += 1;
        }
    };
    if m * k * n >= PAR_THRESHOLD && m > 1 {
        out.par_chunks_mut(n).enumerate().for_each(row);
    } else {
        out.chunks_mut(n).enumerate().for_each(row);
    }
    out
}

/// `out[k,n] = a[m,k]ᵀ · c[m,n]`
///
/// Each output element is summed over `i` in ascending order whatever the
/// blocking, so the result does not depend on the thread count.
pub fn matmul_at_b(a: &[f64], c: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(c.len(), m * n);
    let mut out = vec![0.0; k * n];
    let block = |(bi, out_block): (usize, &mut [f64])| {
        let k0 = bi * AT_B_BLOCK;
        let rows = out_block.len() / n;
        for i in 0..m {
            let a_row = &a[i * k + k0..i * k + k0 + rows];
            let c_row = &c[i * n..(i + 1) * n];
            for (&av, out_row) in a_row.iter().zip(out_block.chunks_mut(n)) {
                if av == 0.0 {
                    continue;
                }
                for (o, &cv) in out_row.iter_mut().zip(c_row) {
                    *o += av * cv;
                }
            }
        }
    };
    if m * k * n >= PAR_THRESHOLD && k > AT_B_BLOCK {
        out.par_chunks_mut(n * AT_B_BLOCK)
            .enumerate()
            .for_each(block);
    } else {
        out.chunks_mut(n * AT_B_BLOCK).enumerate().for_each(block);
    }
    out
}

const AT_B_BLOCK: usize = 64;

pub fn transpose(a: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; rows * cols];
    for i in 0..rows {
        for j in 0..cols {
            out[j * rows + i] = a[i * cols + j];
        }
    }
    out
}

/// Sum of a handful of partial values that does not depend on their order.
pub fn order_free_sum(parts: &mut [f64]) -> f64 {
    parts.sort_by(f64::total_cmp);
    parts.iter().sum()
}

/// Standard normal CDF.
pub fn normal_cdf(x: f64) -> f64 {
    0.5 * (1.0 + libm::erf(x / std::f64::consts::SQRT_2))
}

pub fn normal_pdf(x: f64) -> f64 {
    (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt()
}

/// `(i0, i1, w)` taps for align-corners=false linear resampling of one axis.
pub fn resample_taps(input: usize, output: usize) -> Vec<(usize, usize, f64)> {
    let scale = input as f64 / output as f64;
    (0..output)
        .map(|d| {
            let src = ((d as f64 + 0.5) * scale - 0.5).clamp(0.0, (input - 1) as f64);
            let i0 = src.floor() as usize;
            let i1 = (i0 + 1).min(input - 1);
            (i0, i1, src - i0 as f64)
        })
        .collect()
}

/// Gathers same-padded `k×k` patches: `[B·H·W, k·k·C]`.
pub fn im2col(x: &[f64], b: usize, h: usize, w: usize, c: usize, k: usize) -> Vec<f64> {
    let r = (k / 2) as isize;
    let cols = k * k * c;
    let mut out = vec![0.0; b * h * w * cols];
    for bi in 0..b {
        for y in 0..h {
            for xp in 0..w {
                let row = ((bi * h + y) * w + xp) * cols;
                for ky in 0..k {
                    let sy = y as isize + ky as isize - r;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    for kx in 0..k {
                        let sx = xp as isize + kx as isize - r;
                        if sx < 0 || sx >= w as isize {
                            continue;
                        }
                        let src = ((bi * h + sy as usize) * w + sx as usize) * c;
                        let dst = row + (ky * k + kx) * c;
                        out[dst..dst + c].copy_from_slice(&x[src..src + c]);
                    }
                }
            }
        }
    }
    out
}

/// Adjoint of [`im2col`]: scatter-adds patch gradients back onto the image.
pub fn col2im(
    cols_grad: &[f64],
    b: usize,
    h: usize,
    w: usize,
    c: usize,
    k: usize,
    out: &mut [f64],
) {
    let r = (k / 2) as isize;
    let cols = k * k * c;
    for bi in 0..b {
        for y in 0..h {
            for xp in 0..w {
                let row = ((bi * h + y) * w + xp) * cols;
                for ky in 0..k {
                    let sy = y as isize + ky as isize - r;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    for kx in 0..k {
                        let sx = xp as isize + kx as isize - r;
                        if sx < 0 || sx >= w as isize {
                            continue;
                        }
                        let dst = ((bi * h + sy as usize) * w + sx as usize) * c;
                        let src = row + (ky * k + kx) * c;
                        for ci in 0..c {
                            out[dst + ci] += cols_grad[src + ci];
                        }
                    }
                }
            }
        }
    }
}
