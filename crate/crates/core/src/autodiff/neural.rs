//! Fused neural-network operations with hand-written backward rules.

use super::{BackCtx, Fault, NormKind, Op, Tape, Var};
use crate::error::{DemtError, Result};
use crate::kernels::{self, normal_cdf, normal_pdf};

fn dims4(op: &'static str, shape: &[usize]) -> Result<(usize, usize, usize, usize)> {
    match *shape {
        [b, h, w, c] => Ok((b, h, w, c)),
        _ => Err(DemtError::shape(
            op,
            format!("expected [B,H,W,C], got {shape:?}"),
        )),
    }
}

impl Tape {
    /// Exact GELU, `x·Φ(x)`.
    pub fn gelu(&mut self, a: Var) -> Var {
        let value = self.value(a).iter().map(|&x| x * normal_cdf(x)).collect();
        let shape = self.shape(a).to_vec();
        self.push(shape, value, Op::Gelu(a))
    }

    /// Affine map over the trailing axis: `x·Wᵀ + b` with `W: [out, in]`.
    pub fn linear(&mut self, x: Var, weight: Var, bias: Option<Var>) -> Result<Var> {
        self.check_var(x)?;
        self.check_var(weight)?;
        let &[out, inp] = self.shape(weight) else {
            return Err(DemtError::shape(
                "linear",
                format!("weight must be [out,in], got {:?}", self.shape(weight)),
            ));
        };
        let xs = self.shape(x).to_vec();
        if *xs.last().unwrap() != inp {
            return Err(DemtError::shape(
                "linear",
                format!("input {xs:?} has last extent != {inp}"),
            ));
        }
        if let Some(b) = bias {
            self.check_var(b)?;
            if self.shape(b) != [out] {
                return Err(DemtError::shape(
                    "linear",
                    format!("bias {:?} for {out} outputs", self.shape(b)),
                ));
            }
        }
        let rows = self.value(x).len() / inp;
        let mut value = kernels::matmul_a_bt(self.value(x), self.value(weight), rows, inp, out);
        if let Some(b) = bias {
            let bv = self.value(b);
            for row in value.chunks_mut(out) {
                for (o, bb) in row.iter_mut().zip(bv) {
                    *o += bb;
                }
            }
        }
        let mut shape = xs;
        *shape.last_mut().unwrap() = out;
        Ok(self.push(
            shape,
            value,
            Op::Linear {
                input: x,
                weight,
                bias,
            },
        ))
    }

    fn check_norm_affine(&self, op: &'static str, x: Var, gamma: Var, beta: Var) -> Result<usize> {
        self.check_var(x)?;
        self.check_var(gamma)?;
        self.check_var(beta)?;
        let c = *self.shape(x).last().unwrap();
        if self.shape(gamma) != [c] || self.shape(beta) != [c] {
            return Err(DemtError::shape(
                op,
                format!(
                    "channel extent {c} vs gamma {:?} / beta {:?}",
                    self.shape(gamma),
                    self.shape(beta)
                ),
            ));
        }
        Ok(c)
    }

    fn push_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
        kind: NormKind,
    ) -> Var {
        let c = *self.shape(x).last().unwrap();
        let (g, b) = (self.value(gamma), self.value(beta));
        let value = xhat
            .iter()
            .enumerate()
            .map(|(i, &v)| v * g[i % c] + b[i % c])
            .collect();
        let shape = self.shape(x).to_vec();
        self.push(
            shape,
            value,
            Op::Norm {
                input: x,
                gamma,
                beta,
                xhat,
                inv_std,
                channels: c,
                kind,
            },
        )
    }

    /// Per-position normalisation over the trailing channel axis.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let c = self.check_norm_affine("layer_norm", x, gamma, beta)?;
        let src = self.value(x);
        let mut xhat = vec![0.0; src.len()];
        let mut inv_std = Vec::with_capacity(src.len() / c);
        for (row, out) in src.chunks(c).zip(xhat.chunks_mut(c)) {
            let mean = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
            let is = 1.0 / (var + eps).sqrt();
            for (o, v) in out.iter_mut().zip(row) {
                *o = (v - mean) * is;
            }
            inv_std.push(is);
        }
        Ok(self.push_norm(x, gamma, beta, xhat, inv_std, NormKind::Layer))
    }

    /// Batch normalisation with batch statistics over every non-channel
    /// position. Returns the output together with the batch mean and the
    /// biased batch variance per channel.
    pub fn batch_norm_train(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        eps: f64,
    ) -> Result<(Var, Vec<f64>, Vec<f64>)> {
        let c = self.check_norm_affine("batch_norm", x, gamma, beta)?;
        let src = self.value(x);
        let count = src.len() / c;
        if count < 2 {
            return Err(DemtError::InvalidArgument(format!(
                "batch_norm in train mode needs at least 2 positions per channel, got {count}"
            )));
        }
        let mut mean = vec![0.0; c];
        for row in src.chunks(c) {
            for (m, v) in mean.iter_mut().zip(row) {
                *m += v;
            }
        }
        mean.iter_mut().for_each(|m| *m /= count as f64);
        let mut var = vec![0.0; c];
        for row in src.chunks(c) {
            for ((s, v), m) in var.iter_mut().zip(row).zip(&mean) {
                *s += (v - m) * (v - m);
            }
        }
        var.iter_mut().for_each(|s| *s /= count as f64);
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let mut xhat = vec![0.0; src.len()];
        for (row, out) in src.chunks(c).zip(xhat.chunks_mut(c)) {
            for ch in 0..c {
                out[ch] = (row[ch] - mean[ch]) * inv_std[ch];
            }
        }
        let y = self.push_norm(x, gamma, beta, xhat, inv_std, NormKind::BatchTrain);
        Ok((y, mean, var))
    }

    /// Batch normalisation with supplied running statistics.
    pub fn batch_norm_eval(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        mean: &[f64],
        var: &[f64],
        eps: f64,
    ) -> Result<Var> {
        let c = self.check_norm_affine("batch_norm", x, gamma, beta)?;
        if mean.len() != c || var.len() != c {
            return Err(DemtError::shape("batch_norm", "running statistics length"));
        }
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let src = self.value(x);
        let mut xhat = vec![0.0; src.len()];
        for (row, out) in src.chunks(c).zip(xhat.chunks_mut(c)) {
            for ch in 0..c {
                out[ch] = (row[ch] - mean[ch]) * inv_std[ch];
            }
        }
        Ok(self.push_norm(x, gamma, beta, xhat, inv_std, NormKind::BatchEval))
    }

    /// Same-padded, stride-1 cross-correlation with `W: [Cout, k, k, Cin]`.
    pub fn conv2d(&mut self, x: Var, weight: Var, bias: Option<Var>) -> Result<Var> {
        self.check_var(x)?;
        self.check_var(weight)?;
        let (b, h, w, cin) = dims4("conv2d", self.shape(x))?;
        let &[cout, k, k2, wcin] = self.shape(weight) else {
            return Err(DemtError::shape(
                "conv2d",
                format!(
                    "weight must be [Cout,k,k,Cin], got {:?}",
                    self.shape(weight)
                ),
            ));
        };
        if k != k2 || k % 2 == 0 {
            return Err(DemtError::InvalidArgument(format!(
                "conv2d kernel must be square with odd size, got {k}x{k2}"
            )));
        }
        if wcin != cin {
            return Err(DemtError::shape(
                "conv2d",
                format!("input has {cin} channels, weight expects {wcin}"),
            ));
        }
        if let Some(bv) = bias {
            self.check_var(bv)?;
            if self.shape(bv) != [cout] {
                return Err(DemtError::shape("conv2d", "bias length != Cout"));
            }
        }
        let patches;
        let cols: &[f64] = if k == 1 {
            self.value(x)
        } else {
            patches = kernels::im2col(self.value(x), b, h, w, cin, k);
            &patches
        };
        let rows = b * h * w;
        let mut value = kernels::matmul_a_bt(cols, self.value(weight), rows, k * k * cin, cout);
        if let Some(bv) = bias {
            let bv = self.value(bv);
            for row in value.chunks_mut(cout) {
                for (o, bb) in row.iter_mut().zip(bv) {
                    *o += bb;
                }
            }
        }
        Ok(self.push(
            vec![b, h, w, cout],
            value,
            Op::Conv2d {
                input: x,
                weight,
                bias,
                k,
            },
        ))
    }

    /// Bilinear reads of `x: [B,H,W,C]` at absolute `(y, x)` pixel positions
    /// `coords: [B, ..., 2]`. Neighbour taps outside the image read zero.
    pub fn bilinear_sample(&mut self, x: Var, coords: Var) -> Result<Var> {
        self.check_var(x)?;
        self.check_var(coords)?;
        let (b, h, w, c) = dims4("bilinear_sample", self.shape(x))?;
        let cs = self.shape(coords).to_vec();
        if cs.len() < 2 || cs[0] != b || *cs.last().unwrap() != 2 {
            return Err(DemtError::shape(
                "bilinear_sample",
                format!("coords {cs:?} must be [B={b}, ..., 2]"),
            ));
        }
        let points = self.value(coords).len() / 2;
        let per_batch = points / b;
        let (xv, cv) = (self.value(x), self.value(coords));
        let mut value = vec![0.0; points * c];
        for p in 0..points {
            let bi = p / per_batch;
            let taps = bilinear_taps(cv[2 * p], cv[2 * p + 1], h, w);
            let out = &mut value[p * c..(p + 1) * c];
            for (idx, wt) in taps.iter() {
                if let Some(pix) = idx {
                    let base = ((bi * h * w) + pix) * c;
                    for (o, v) in out.iter_mut().zip(&xv[base..base + c]) {
                        *o += wt * v;
                    }
                }
            }
        }
        let mut shape = cs;
        *shape.last_mut().unwrap() = c;
        Ok(self.push(shape, value, Op::BilinearSample { input: x, coords }))
    }

    /// Align-corners=false bilinear upsampling of `[B,h,w,C]` to `[B,out_h,out_w,C]`.
    pub fn upsample_bilinear(&mut self, x: Var, out_h: usize, out_w: usize) -> Result<Var> {
        self.check_var(x)?;
        let (b, h, w, c) = dims4("upsample_bilinear", self.shape(x))?;
        if out_h < h || out_w < w {
            return Err(DemtError::InvalidArgument(format!(
                "upsample_bilinear cannot downscale {h}x{w} to {out_h}x{out_w}"
            )));
        }
        let ty = kernels::resample_taps(h, out_h);
        let tx = kernels::resample_taps(w, out_w);
        let src = self.value(x);
        let mut value = vec![0.0; b * out_h * out_w * c];
        for bi in 0..b {
            for (oy, &(y0, y1, wy)) in ty.iter().enumerate() {
                for (ox, &(x0, x1, wx)) in tx.iter().enumerate() {
                    let at = |yy: usize, xx: usize| ((bi * h + yy) * w + xx) * c;
                    let (a00, a01, a10, a11) = (at(y0, x0), at(y0, x1), at(y1, x0), at(y1, x1));
                    let dst = ((bi * out_h + oy) * out_w + ox) * c;
                    for ch in 0..c {
                        let top = src[a00 + ch] + wx * (src[a01 + ch] - src[a00 + ch]);
                        let bot = src[a10 + ch] + wx * (src[a11 + ch] - src[a10 + ch]);
                        value[dst + ch] = top + wy * (bot - top);
                    }
                }
            }
        }
        Ok(self.push(vec![b, out_h, out_w, c], value, Op::Upsample(x)))
    }

    /// Non-overlapping `k×k` mean pooling.
    pub fn avg_pool(&mut self, x: Var, k: usize) -> Result<Var> {
        self.check_var(x)?;
        let (b, h, w, c) = dims4("avg_pool", self.shape(x))?;
        if k == 0 || h % k != 0 || w % k != 0 {
            return Err(DemtError::InvalidArgument(format!(
                "avg_pool window {k} does not tile {h}x{w}"
            )));
        }
        let (oh, ow) = (h / k, w / k);
        let src = self.value(x);
        let norm = 1.0 / (k * k) as f64;
        let mut value = vec![0.0; b * oh * ow * c];
        for bi in 0..b {
            for y in 0..h {
                for xx in 0..w {
                    let s = ((bi * h + y) * w + xx) * c;
                    let d = ((bi * oh + y / k) * ow + xx / k) * c;
                    for ch in 0..c {
                        value[d + ch] += src[s + ch];
                    }
                }
            }
        }
        value.iter_mut().for_each(|v| *v *= norm);
        Ok(self.push(vec![b, oh, ow, c], value, Op::AvgPool { input: x, k }))
    }

    /// Scales every trailing-axis vector to unit Euclidean length.
    pub fn l2_normalize(&mut self, x: Var) -> Result<Var> {
        self.check_var(x)?;
        let c = *self.shape(x).last().unwrap();
        let src = self.value(x);
        let mut value = vec![0.0; src.len()];
        let mut norms = Vec::with_capacity(src.len() / c);
        for (row, out) in src.chunks(c).zip(value.chunks_mut(c)) {
            let n = row.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-12);
            for (o, v) in out.iter_mut().zip(row) {
                *o = v / n;
            }
            norms.push(n);
        }
        let shape = self.shape(x).to_vec();
        Ok(self.push(shape, value, Op::L2Normalize { input: x, norms }))
    }

    /// Single-head scaled dot-product attention, `softmax(QKᵀ/√d)·V`.
    ///
    /// Keys are split into consecutive groups of `segment` rows. Reductions
    /// over keys are accumulated per group and the group partials are then
    /// combined independently of group order, so permuting whole groups of
    /// keys (with their values) leaves every output bitwise unchanged.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, segment: usize) -> Result<Var> {
        for var in [q, k, v] {
            self.check_var(var)?;
        }
        let (&[nq, d], &[nk, dk], &[nv, dv]) = (self.shape(q), self.shape(k), self.shape(v)) else {
            return Err(DemtError::shape("attention", "q, k, v must be matrices"));
        };
        if d != dk || nk != nv {
            return Err(DemtError::shape(
                "attention",
                format!("q [{nq},{d}], k [{nk},{dk}], v [{nv},{dv}]"),
            ));
        }
        if segment == 0 || nk % segment != 0 {
            return Err(DemtError::InvalidArgument(format!(
                "key segment {segment} does not divide {nk} keys"
            )));
        }
        let scale = 1.0 / (d as f64).sqrt();
        let mut probs = kernels::matmul_a_bt(self.value(q), self.value(k), nq, d, nk);
        let groups = nk / segment;
        let vv = self.value(v);
        let mut value = vec![0.0; nq * dv];
        let mut partial = vec![0.0; groups];
        let mut channel_partials = vec![0.0; groups * dv];
        for (row, out) in probs.chunks_mut(nk).zip(value.chunks_mut(dv)) {
            row.iter_mut().for_each(|s| *s *= scale);
            let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            row.iter_mut().for_each(|s| *s = (*s - m).exp());
            for (gi, chunk) in row.chunks(segment).enumerate() {
                partial[gi] = chunk.iter().sum();
            }
            let denom = kernels::order_free_sum(&mut partial);
            row.iter_mut().for_each(|p| *p /= denom);
            channel_partials.iter_mut().for_each(|x| *x = 0.0);
            let groups_iter = row.chunks(segment).zip(vv.chunks(segment * dv));
            for ((pseg, vseg), acc) in groups_iter.zip(channel_partials.chunks_mut(dv)) {
                for (&p, vrow) in pseg.iter().zip(vseg.chunks_exact(dv)) {
                    for (a, &x) in acc.iter_mut().zip(vrow) {
                        *a += p * x;
                    }
                }
            }
            for (ch, o) in out.iter_mut().enumerate() {
                for gi in 0..groups {
                    partial[gi] = channel_partials[gi * dv + ch];
                }
                *o = kernels::order_free_sum(&mut partial);
            }
        }
        Ok(self.push(
            vec![nq, dv],
            value,
            Op::Attention {
                q,
                k,
                v,
                scale,
                probs,
            },
        ))
    }
}

/// The four neighbour taps for a fractional position, `None` when outside.
fn bilinear_taps(y: f64, x: f64, h: usize, w: usize) -> [(Option<usize>, f64); 4] {
    let (y0, x0) = (y.floor(), x.floor());
    let (wy, wx) = (y - y0, x - x0);
    let idx = |yy: f64, xx: f64| {
        if yy >= 0.0 && xx >= 0.0 && yy < h as f64 && xx < w as f64 {
            Some(yy as usize * w + xx as usize)
        } else {
            None
        }
    };
    [
        (idx(y0, x0), (1.0 - wy) * (1.0 - wx)),
        (idx(y0, x0 + 1.0), (1.0 - wy) * wx),
        (idx(y0 + 1.0, x0), wy * (1.0 - wx)),
        (idx(y0 + 1.0, x0 + 1.0), wy * wx),
    ]
}

pub(super) fn gelu_backward(ctx: &mut BackCtx<'_>, a: Var, g: &[f64]) {
    if !ctx.wants(a) {
        return;
    }
    let delta: Vec<f64> = ctx
        .value(a)
        .iter()
        .zip(g)
        .map(|(&x, &gy)| gy * (normal_cdf(x) + x * normal_pdf(x)))
        .collect();
    ctx.add_into(a, &delta);
}

pub(super) fn linear_backward(
    ctx: &mut BackCtx<'_>,
    x: Var,
    weight: Var,
    bias: Option<Var>,
    g: &[f64],
) {
    let (out, inp) = (ctx.shape(weight)[0], ctx.shape(weight)[1]);
    let rows = g.len() / out;
    if ctx.wants(x) {
        let delta = kernels::matmul(g, ctx.value(weight), rows, out, inp);
        ctx.add_into(x, &delta);
    }
    if ctx.wants(weight) {
        let delta = kernels::matmul_at_b(g, ctx.value(x), rows, out, inp);
        ctx.add_into(weight, &delta);
    }
    if let Some(b) = bias {
        if let Some(gb) = ctx.grad_mut(b) {
            for row in g.chunks(out) {
                for (a, v) in gb.iter_mut().zip(row) {
                    *a += v;
                }
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
pub(super) fn norm_backward(
    ctx: &mut BackCtx<'_>,
    x: Var,
    gamma: Var,
    beta: Var,
    xhat: &[f64],
    inv_std: &[f64],
    c: usize,
    kind: NormKind,
    g: &[f64],
) {
    if let Some(gg) = ctx.grad_mut(gamma) {
        for (i, (gy, xh)) in g.iter().zip(xhat).enumerate() {
            gg[i % c] += gy * xh;
        }
    }
    if let Some(gb) = ctx.grad_mut(beta) {
        for (i, gy) in g.iter().enumerate() {
            gb[i % c] += gy;
        }
    }
    if !ctx.wants(x) {
        return;
    }
    let gam = ctx.value(gamma).to_vec();
    let mut delta = vec![0.0; g.len()];
    match kind {
        NormKind::Layer => {
            for (r, ((gr, xr), dr)) in g
                .chunks(c)
                .zip(xhat.chunks(c))
                .zip(delta.chunks_mut(c))
                .enumerate()
            {
                let mut mean_d = 0.0;
                let mut mean_dx = 0.0;
                for ch in 0..c {
                    let d = gr[ch] * gam[ch];
                    mean_d += d;
                    mean_dx += d * xr[ch];
                }
                mean_d /= c as f64;
                mean_dx /= c as f64;
                for ch in 0..c {
                    let d = gr[ch] * gam[ch];
                    dr[ch] = inv_std[r] * (d - mean_d - xr[ch] * mean_dx);
                }
            }
        }
        NormKind::BatchTrain => {
            let count = (g.len() / c) as f64;
            let mut mean_d = vec![0.0; c];
            let mut mean_dx = vec![0.0; c];
            for (gr, xr) in g.chunks(c).zip(xhat.chunks(c)) {
                for ch in 0..c {
                    let d = gr[ch] * gam[ch];
                    mean_d[ch] += d;
                    mean_dx[ch] += d * xr[ch];
                }
            }
            mean_d.iter_mut().for_each(|v| *v /= count);
            mean_dx.iter_mut().for_each(|v| *v /= count);
            for ((gr, xr), dr) in g.chunks(c).zip(xhat.chunks(c)).zip(delta.chunks_mut(c)) {
                for ch in 0..c {
                    let d = gr[ch] * gam[ch];
                    dr[ch] = inv_std[ch] * (d - mean_d[ch] - xr[ch] * mean_dx[ch]);
                }
            }
        }
        NormKind::BatchEval => {
            for (i, gy) in g.iter().enumerate() {
                let ch = i % c;
                delta[i] = gy * gam[ch] * inv_std[ch];
            }
        }
    }
    ctx.add_into(x, &delta);
}

pub(super) fn conv2d_backward(
    ctx: &mut BackCtx<'_>,
    x: Var,
    weight: Var,
    bias: Option<Var>,
    k: usize,
    g: &[f64],
) {
    let xs = ctx.shape(x).to_vec();
    let (b, h, w, cin) = (xs[0], xs[1], xs[2], xs[3]);
    let cout = ctx.shape(weight)[0];
    let rows = b * h * w;
    let cols_n = k * k * cin;
    if let Some(gb) = bias.and_then(|bv| ctx.grad_mut(bv)) {
        for row in g.chunks(cout) {
            for (a, v) in gb.iter_mut().zip(row) {
                *a += v;
            }
        }
    }
    if ctx.wants(weight) {
        let delta = if k == 1 {
            kernels::matmul_at_b(g, ctx.value(x), rows, cout, cols_n)
        } else {
            let patches = kernels::im2col(ctx.value(x), b, h, w, cin, k);
            kernels::matmul_at_b(g, &patches, rows, cout, cols_n)
        };
        ctx.add_into(weight, &delta);
    }
    if ctx.wants(x) {
        let dcols = kernels::matmul(g, ctx.value(weight), rows, cout, cols_n);
        if k == 1 {
            ctx.add_into(x, &dcols);
        } else {
            let gx = ctx.grad_mut(x).unwrap();
            kernels::col2im(&dcols, b, h, w, cin, k, gx);
        }
    }
}

pub(super) fn bilinear_backward(ctx: &mut BackCtx<'_>, x: Var, coords: Var, g: &[f64]) {
    let xs = ctx.shape(x).to_vec();
    let (b, h, w, c) = (xs[0], xs[1], xs[2], xs[3]);
    let points = g.len() / c;
    let per_batch = points / b;
    let cv = ctx.value(coords).to_vec();
    if ctx.wants(coords) {
        let xv = ctx.value(x);
        let sign = if ctx.fault == Some(Fault::BilinearCoordSign) {
            -1.0
        } else {
            1.0
        };
        let mut delta = vec![0.0; cv.len()];
        let zero = vec![0.0; c];
        for p in 0..points {
            let bi = p / per_batch;
            let (y, xx) = (cv[2 * p], cv[2 * p + 1]);
            let (wy, wx) = (y - y.floor(), xx - xx.floor());
            let taps = bilinear_taps(y, xx, h, w);
            let val = |t: usize| match taps[t].0 {
                Some(pix) => &xv[(bi * h * w + pix) * c..(bi * h * w + pix + 1) * c],
                None => &zero[..],
            };
            let (v00, v01, v10, v11) = (val(0), val(1), val(2), val(3));
            let gp = &g[p * c..(p + 1) * c];
            let mut dy = 0.0;
            let mut dx = 0.0;
            for ch in 0..c {
                dy += gp[ch] * ((1.0 - wx) * (v10[ch] - v00[ch]) + wx * (v11[ch] - v01[ch]));
                dx += gp[ch] * ((1.0 - wy) * (v01[ch] - v00[ch]) + wy * (v11[ch] - v10[ch]));
            }
            delta[2 * p] = sign * dy;
            delta[2 * p + 1] = sign * dx;
        }
        ctx.add_into(coords, &delta);
    }
    if let Some(gx) = ctx.grad_mut(x) {
        for p in 0..points {
            let bi = p / per_batch;
            let taps = bilinear_taps(cv[2 * p], cv[2 * p + 1], h, w);
            let gp = &g[p * c..(p + 1) * c];
            for (idx, wt) in taps {
                if let Some(pix) = idx {
                    let base = (bi * h * w + pix) * c;
                    for (a, v) in gx[base..base + c].iter_mut().zip(gp) {
                        *a += wt * v;
                    }
                }
            }
        }
    }
}

pub(super) fn upsample_backward(ctx: &mut BackCtx<'_>, x: Var, out_shape: &[usize], g: &[f64]) {
    let xs = ctx.shape(x).to_vec();
    let Some(gx) = ctx.grad_mut(x) else { return };
    let (b, h, w, c) = (xs[0], xs[1], xs[2], xs[3]);
    let (out_h, out_w) = (out_shape[1], out_shape[2]);
    let ty = kernels::resample_taps(h, out_h);
    let tx = kernels::resample_taps(w, out_w);
    for bi in 0..b {
        for (oy, &(y0, y1, wy)) in ty.iter().enumerate() {
            for (ox, &(x0, x1, wx)) in tx.iter().enumerate() {
                let at = |yy: usize, xx: usize| ((bi * h + yy) * w + xx) * c;
                let src = ((bi * out_h + oy) * out_w + ox) * c;
                let weights = [
                    (at(y0, x0), (1.0 - wy) * (1.0 - wx)),
                    (at(y0, x1), (1.0 - wy) * wx),
                    (at(y1, x0), wy * (1.0 - wx)),
                    (at(y1, x1), wy * wx),
                ];
                for (base, wt) in weights {
                    for ch in 0..c {
                        gx[base + ch] += wt * g[src + ch];
                    }
                }
            }
        }
    }
}

pub(super) fn avg_pool_backward(
    ctx: &mut BackCtx<'_>,
    x: Var,
    k: usize,
    out_shape: &[usize],
    g: &[f64],
) {
    let xs = ctx.shape(x).to_vec();
    let Some(gx) = ctx.grad_mut(x) else { return };
    let (b, h, w, c) = (xs[0], xs[1], xs[2], xs[3]);
    let (oh, ow) = (out_shape[1], out_shape[2]);
    let norm = 1.0 / (k * k) as f64;
    for bi in 0..b {
        for y in 0..h {
            for xx in 0..w {
                let s = ((bi * h + y) * w + xx) * c;
                let d = ((bi * oh + y / k) * ow + xx / k) * c;
                for ch in 0..c {
                    gx[s + ch] += norm * g[d + ch];
                }
            }
        }
    }
}

pub(super) fn l2_normalize_backward(
    ctx: &mut BackCtx<'_>,
    x: Var,
    norms: &[f64],
    y: &[f64],
    g: &[f64],
) {
    let Some(gx) = ctx.grad_mut(x) else { return };
    let c = y.len() / norms.len();
    for (r, n) in norms.iter().enumerate() {
        let yr = &y[r * c..(r + 1) * c];
        let gr = &g[r * c..(r + 1) * c];
        let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
        for ch in 0..c {
            gx[r * c + ch] += (gr[ch] - yr[ch] * dot) / n;
        }
    }
}

pub(super) fn attention_backward(
    ctx: &mut BackCtx<'_>,
    q: Var,
    k: Var,
    v: Var,
    scale: f64,
    probs: &[f64],
    g: &[f64],
) {
    let (nq, d) = (ctx.shape(q)[0], ctx.shape(q)[1]);
    let (nk, dv) = (ctx.shape(v)[0], ctx.shape(v)[1]);
    if ctx.wants(v) {
        let delta = kernels::matmul_at_b(probs, g, nq, nk, dv);
        ctx.add_into(v, &delta);
    }
    if !ctx.wants(q) && !ctx.wants(k) {
        return;
    }
    let mut ds = kernels::matmul_a_bt(g, ctx.value(v), nq, dv, nk);
    for (drow, prow) in ds.chunks_mut(nk).zip(probs.chunks(nk)) {
        let dot: f64 = drow.iter().zip(prow).map(|(a, b)| a * b).sum();
        for (dd, p) in drow.iter_mut().zip(prow) {
            *dd = scale * p * (*dd - dot);
        }
    }
    if ctx.wants(q) {
        let delta = kernels::matmul(&ds, ctx.value(k), nq, nk, d);
        ctx.add_into(q, &delta);
    }
    if ctx.wants(k) {
        let delta = kernels::matmul_at_b(&ds, ctx.value(q), nq, nk, d);
        ctx.add_into(k, &delta);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    fn leaf(tape: &mut Tape, shape: &[usize], data: Vec<f64>) -> Var {
        tape.leaf(&Tensor::new(shape, data).unwrap().with_requires_grad(true))
    }

    #[test]
    fn gelu_landmarks() {
        let mut tape = Tape::new();
        let x = leaf(&mut tape, &[3], vec![0.0, 10.0, -10.0]);
        let y = tape.gelu(x);
        let v = tape.value(y);
        assert_eq!(v[0], 0.0);
        assert!((v[1] - 10.0).abs() < 1e-6);
        assert!(v[2].abs() < 1e-6);
    }

    #[test]
    fn linear_sum_weight() {
        let mut tape = Tape::new();
        let x = leaf(&mut tape, &[3], vec![1.0, 2.0, 3.0]);
        let w = leaf(&mut tape, &[1, 3], vec![1.0, 1.0, 1.0]);
        let y = tape.linear(x, w, None).unwrap();
        assert_eq!(tape.value(y), &[6.0]);
        let bad = leaf(&mut tape, &[1, 2], vec![1.0, 1.0]);
        assert!(tape.linear(x, bad, None).is_err());
    }

    #[test]
    fn bilinear_midpoint_average() {
        let mut tape = Tape::new();
        let x = leaf(&mut tape, &[1, 2, 2, 1], vec![1.0, 2.0, 3.0, 4.0]);
        let c = leaf(&mut tape, &[1, 1, 1, 1, 2], vec![0.5, 0.5]);
        let y = tape.bilinear_sample(x, c).unwrap();
        assert_eq!(tape.shape(y), &[1, 1, 1, 1, 1]);
        assert!((tape.value(y)[0] - 2.5).abs() < 1e-15);
    }

    #[test]
    fn bilinear_out_of_range_reads_zero() {
        let mut tape = Tape::new();
        let x = leaf(&mut tape, &[1, 2, 2, 1], vec![1.0, 2.0, 3.0, 4.0]);
        let c = leaf(&mut tape, &[1, 2, 2], vec![-0.5, 0.0, 5.0, 5.0]);
        let y = tape.bilinear_sample(x, c).unwrap();
        assert!((tape.value(y)[0] - 0.5).abs() < 1e-15);
        assert_eq!(tape.value(y)[1], 0.0);
    }

    #[test]
    fn conv_rejects_even_kernel() {
        let mut tape = Tape::new();
        let x = leaf(&mut tape, &[1, 4, 4, 1], vec![0.0; 16]);
        let w = leaf(&mut tape, &[1, 2, 2, 1], vec![0.0; 4]);
        assert!(tape.conv2d(x, w, None).is_err());
    }

    #[test]
    fn upsample_rejects_downscale() {
        let mut tape = Tape::new();
        let x = leaf(&mut tape, &[1, 4, 4, 1], vec![0.0; 16]);
        assert!(tape.upsample_bilinear(x, 2, 4).is_err());
    }

    #[test]
    fn batch_norm_train_needs_two_positions() {
        let mut tape = Tape::new();
        let x = leaf(&mut tape, &[1, 1, 1, 2], vec![1.0, 2.0]);
        let g = leaf(&mut tape, &[2], vec![1.0, 1.0]);
        let b = leaf(&mut tape, &[2], vec![0.0, 0.0]);
        assert!(tape.batch_norm_train(x, g, b, 1e-5).is_err());
    }
}
