//! Primitive ops against straightforward loop implementations.

mod common;

use common::random_tensor;
use demt_core::mixer::{base_grid, spatial_deform};
use demt_core::{Tape, Tensor};
use proptest::prelude::*;

/// Same-padded cross-correlation, one output element at a time.
fn conv_loops(x: &Tensor, w: &Tensor, bias: &[f64]) -> Vec<f64> {
    let [b, h, wd, cin] = x.shape()[..] else {
        unreachable!()
    };
    let [cout, k, _, _] = w.shape()[..] else {
        unreachable!()
    };
    let r = (k / 2) as isize;
    let mut out = vec![0.0; b * h * wd * cout];
    for bi in 0..b {
        for y in 0..h {
            for xx in 0..wd {
                for co in 0..cout {
                    let mut acc = bias[co];
                    for ky in 0..k {
                        for kx in 0..k {
                            let sy = y as isize + ky as isize - r;
                            let sx = xx as isize + kx as isize - r;
                            if sy < 0 || sx < 0 || sy >= h as isize || sx >= wd as isize {
                                continue;
                            }
                            for ci in 0..cin {
                                acc += x.at(&[bi, sy as usize, sx as usize, ci])
                                    * w.at(&[co, ky, kx, ci]);
                            }
                        }
                    }
                    out[((bi * h + y) * wd + xx) * cout + co] = acc;
                }
            }
        }
    }
    out
}

fn attention_loops(q: &Tensor, k: &Tensor, v: &Tensor) -> (Vec<f64>, Vec<f64>) {
    let [nq, d] = q.shape()[..] else {
        unreachable!()
    };
    let nk = k.shape()[0];
    let dv = v.shape()[1];
    let mut probs = vec![0.0; nq * nk];
    let mut out = vec![0.0; nq * dv];
    for i in 0..nq {
        let scores: Vec<f64> = (0..nk)
            .map(|j| (0..d).map(|c| q.at(&[i, c]) * k.at(&[j, c])).sum::<f64>() / (d as f64).sqrt())
            .collect();
        let m = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = scores.iter().map(|s| (s - m).exp()).sum();
        for j in 0..nk {
            probs[i * nk + j] = (scores[j] - m).exp() / z;
            for c in 0..dv {
                out[i * dv + c] += probs[i * nk + j] * v.at(&[j, c]);
            }
        }
    }
    (out, probs)
}

fn max_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn conv_matches_loops(
        b in 1usize..3, h in 1usize..6, w in 1usize..6,
        cin in 1usize..4, cout in 1usize..4, half in 0usize..3, seed in any::<u64>(),
    ) {
        let k = 2 * half + 1;
        let x = random_tensor(&[b, h, w, cin], seed);
        let wt = random_tensor(&[cout, k, k, cin], seed ^ 1);
        let bias = random_tensor(&[cout], seed ^ 2);
        let mut tape = Tape::new();
        let (xv, wv, bv) = (tape.constant(&x), tape.constant(&wt), tape.constant(&bias));
        let y = tape.conv2d(xv, wv, Some(bv)).unwrap();
        prop_assert!(max_diff(tape.value(y), &conv_loops(&x, &wt, bias.data())) < 1e-12);
    }

    #[test]
    fn attention_matches_loops(
        nq in 1usize..6, groups in 1usize..4, segment in 1usize..4,
        d in 1usize..5, dv in 1usize..4, seed in any::<u64>(),
    ) {
        let nk = groups * segment;
        let q = random_tensor(&[nq, d], seed).map(|v| 3.0 * v);
        let k = random_tensor(&[nk, d], seed ^ 1).map(|v| 3.0 * v);
        let v = random_tensor(&[nk, dv], seed ^ 2);
        let mut tape = Tape::new();
        let (qv, kv, vv) = (tape.constant(&q), tape.constant(&k), tape.constant(&v));
        let y = tape.attention(qv, kv, vv, segment).unwrap();
        let (out, probs) = attention_loops(&q, &k, &v);
        prop_assert!(max_diff(tape.value(y), &out) < 1e-12);
        let recorded = tape.attention_probs(y).unwrap();
        prop_assert!(max_diff(recorded, &probs) < 1e-12);
        for row in recorded.chunks(nk) {
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }
}

/// With zero offsets the deformable sampler is a bias-free 3×3 convolution
/// whose taps are the `K = 9` rows of the mixing weight.
#[test]
fn zero_offset_deform_is_a_conv() {
    for instance in 0..20u64 {
        let (h, w, c) = (
            3 + instance as usize % 4,
            2 + instance as usize % 5,
            1 + instance as usize % 3,
        );
        let x = random_tensor(&[1, h, w, c], 100 + instance);
        let w2 = random_tensor(&[9, c, c], 200 + instance);
        let mut conv_w = vec![0.0; c * 9 * c];
        for tap in 0..9 {
            for ci in 0..c {
                for co in 0..c {
                    conv_w[((co * 3 + tap / 3) * 3 + tap % 3) * c + ci] = w2.at(&[tap, ci, co]);
                }
            }
        }
        let conv_w = Tensor::new(&[c, 3, 3, c], conv_w).unwrap();
        let mut tape = Tape::new();
        let xv = tape.constant(&x);
        let offsets = tape.constant(&Tensor::zeros(&[1, h, w, 9, 2]).unwrap());
        let wv = tape.constant(&w2);
        let deformed = spatial_deform(&mut tape, xv, offsets, wv).unwrap();
        let cw = tape.constant(&conv_w);
        let conv = tape.conv2d(xv, cw, None).unwrap();
        let diff = max_diff(tape.value(deformed), tape.value(conv));
        assert!(diff < 1e-10, "instance {instance}: {diff:e}");
    }
}

#[test]
fn base_grid_taps_are_row_major_neighbourhoods() {
    let g = base_grid(1, 2, 2, 9).unwrap();
    // Pixel (1, 0): taps from (0, -1) to (2, 1).
    let taps: Vec<(f64, f64)> = (0..9)
        .map(|k| (g.at(&[0, 1, 0, k, 0]), g.at(&[0, 1, 0, k, 1])))
        .collect();
    assert_eq!(taps[0], (0.0, -1.0));
    assert_eq!(taps[4], (1.0, 0.0));
    assert_eq!(taps[8], (2.0, 1.0));
    assert_eq!(taps[1], (0.0, 0.0));
}

#[test]
fn bilinear_matches_hand_interpolation() {
    let x = random_tensor(&[1, 3, 4, 2], 9);
    let pts = [(0.25, 0.5), (1.7, 2.2), (-0.5, 1.0), (2.5, 3.5)];
    let coords: Vec<f64> = pts.iter().flat_map(|&(y, x)| [y, x]).collect();
    let mut tape = Tape::new();
    let xv = tape.constant(&x);
    let cv = tape.constant(&Tensor::new(&[1, 4, 2], coords).unwrap());
    let y = tape.bilinear_sample(xv, cv).unwrap();
    let read = |yy: isize, xx: isize, c: usize| {
        if yy < 0 || xx < 0 || yy >= 3 || xx >= 4 {
            0.0
        } else {
            x.at(&[0, yy as usize, xx as usize, c])
        }
    };
    for (p, &(py, px)) in pts.iter().enumerate() {
        let (y0, x0) = (py.floor(), px.floor());
        let (fy, fx) = (py - y0, px - x0);
        let (y0, x0) = (y0 as isize, x0 as isize);
        for c in 0..2 {
            let want = (1.0 - fy) * (1.0 - fx) * read(y0, x0, c)
                + (1.0 - fy) * fx * read(y0, x0 + 1, c)
                + fy * (1.0 - fx) * read(y0 + 1, x0, c)
                + fy * fx * read(y0 + 1, x0 + 1, c);
            assert!((tape.value(y)[p * 2 + c] - want).abs() < 1e-14);
        }
    }
}
