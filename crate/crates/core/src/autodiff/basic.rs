//! Shape-level and elementwise operations.

use super::{BackCtx, Op, Tape, Var};
use crate::error::{DemtError, Result};
use crate::kernels;
use crate::tensor::{check_shape, numel, strides};

/// `(outer, extent, inner)` decomposition of `shape` around `axis`.
fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

impl Tape {
    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        self.check_var(a)?;
        self.check_var(b)?;
        if self.shape(a) != self.shape(b) {
            return Err(DemtError::shape(
                op,
                format!("{:?} vs {:?}", self.shape(a), self.shape(b)),
            ));
        }
        Ok(())
    }

    fn zip_with(&mut self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64, op: Op) -> Var {
        let value = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(&x, &y)| f(x, y))
            .collect();
        let shape = self.shape(a).to_vec();
        self.push(shape, value, op)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        Ok(self.zip_with(a, b, |x, y| x + y, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        Ok(self.zip_with(a, b, |x, y| x - y, Op::Sub(a, b)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        Ok(self.zip_with(a, b, |x, y| x * y, Op::Mul(a, b)))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let value = self.value(a).iter().map(|&x| x * s).collect();
        let shape = self.shape(a).to_vec();
        self.push(shape, value, Op::Scale(a, s))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        self.check_var(a)?;
        check_shape(shape)?;
        if numel(shape) != self.value(a).len() {
            return Err(DemtError::shape(
                "reshape",
                format!("{:?} cannot become {:?}", self.shape(a), shape),
            ));
        }
        let value = self.value(a).to_vec();
        Ok(self.push(shape.to_vec(), value, Op::Reshape(a)))
    }

    /// Explicit broadcast: every axis of `a` must be 1 or equal the target.
    pub fn expand(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        self.check_var(a)?;
        check_shape(shape)?;
        let src = self.shape(a).to_vec();
        if src.len() != shape.len() || src.iter().zip(shape).any(|(&s, &t)| s != 1 && s != t) {
            return Err(DemtError::shape(
                "expand",
                format!("{src:?} cannot expand to {shape:?}"),
            ));
        }
        let src_strides = strides(&src);
        let dst_strides = strides(shape);
        let a_val = self.value(a);
        let value = (0..numel(shape))
            .map(|flat| a_val[expand_source(flat, shape, &dst_strides, &src, &src_strides)])
            .collect();
        Ok(self.push(shape.to_vec(), value, Op::Expand(a)))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        self.check_var(a)?;
        let &[r, c] = self.shape(a) else {
            return Err(DemtError::shape(
                "transpose",
                format!("expected a matrix, got {:?}", self.shape(a)),
            ));
        };
        let value = kernels::transpose(self.value(a), r, c);
        Ok(self.push(vec![c, r], value, Op::Transpose(a)))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check_var(a)?;
        self.check_var(b)?;
        let (&[m, k], &[k2, n]) = (self.shape(a), self.shape(b)) else {
            return Err(DemtError::shape(
                "matmul",
                format!(
                    "expected matrices, got {:?} and {:?}",
                    self.shape(a),
                    self.shape(b)
                ),
            ));
        };
        if k != k2 {
            return Err(DemtError::shape(
                "matmul",
                format!("inner extents differ: [{m},{k}] x [{k2},{n}]"),
            ));
        }
        let value = kernels::matmul(self.value(a), self.value(b), m, k, n);
        Ok(self.push(vec![m, n], value, Op::MatMul(a, b)))
    }

    /// Slice `len` entries along `axis` starting at `start`.
    pub fn narrow(&mut self, a: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        self.check_var(a)?;
        let shape = self.shape(a).to_vec();
        if axis >= shape.len() || len == 0 || start + len > shape[axis] {
            return Err(DemtError::shape(
                "narrow",
                format!(
                    "cannot take [{start}, {}) on axis {axis} of {shape:?}",
                    start + len
                ),
            ));
        }
        let (outer, extent, inner) = split_axis(&shape, axis);
        let src = self.value(a);
        let mut value = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * extent + start) * inner;
            value.extend_from_slice(&src[base..base + len * inner]);
        }
        let mut out_shape = shape;
        out_shape[axis] = len;
        Ok(self.push(
            out_shape,
            value,
            Op::Narrow {
                input: a,
                axis,
                start,
            },
        ))
    }

    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Result<Var> {
        let Some(&first) = inputs.first() else {
            return Err(DemtError::InvalidArgument("concat of zero tensors".into()));
        };
        self.check_var(first)?;
        let base = self.shape(first).to_vec();
        if axis >= base.len() {
            return Err(DemtError::shape(
                "concat",
                format!("axis {axis} of {base:?}"),
            ));
        }
        let mut total = 0;
        for &v in inputs {
            self.check_var(v)?;
            let s = self.shape(v);
            let compatible = s.len() == base.len()
                && s.iter()
                    .zip(&base)
                    .enumerate()
                    .all(|(i, (x, y))| i == axis || x == y);
            if !compatible {
                return Err(DemtError::shape(
                    "concat",
                    format!("{s:?} does not match {base:?} off axis {axis}"),
                ));
            }
            total += s[axis];
        }
        let mut out_shape = base;
        out_shape[axis] = total;
        let (outer, _, inner) = split_axis(&out_shape, axis);
        let mut value = Vec::with_capacity(numel(&out_shape));
        for o in 0..outer {
            for &v in inputs {
                let ext = self.shape(v)[axis];
                let src = self.value(v);
                value.extend_from_slice(&src[o * ext * inner..(o + 1) * ext * inner]);
            }
        }
        Ok(self.push(
            out_shape,
            value,
            Op::Concat {
                inputs: inputs.to_vec(),
                axis,
            },
        ))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).iter().sum();
        self.push(vec![1], vec![s], Op::Sum(a))
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let v = self.value(a);
        let s = v.iter().sum::<f64>() / v.len() as f64;
        self.push(vec![1], vec![s], Op::Mean(a))
    }

    /// Max-subtracted softmax along `axis`.
    pub fn softmax(&mut self, a: Var, axis: usize) -> Result<Var> {
        self.check_var(a)?;
        let shape = self.shape(a).to_vec();
        if axis >= shape.len() {
            return Err(DemtError::InvalidArgument(format!(
                "softmax axis {axis} out of range for {shape:?}"
            )));
        }
        let (outer, extent, inner) = split_axis(&shape, axis);
        let src = self.value(a);
        let mut value = vec![0.0; src.len()];
        for o in 0..outer {
            for i in 0..inner {
                let idx = |j: usize| (o * extent + j) * inner + i;
                let m = (0..extent)
                    .map(|j| src[idx(j)])
                    .fold(f64::NEG_INFINITY, f64::max);
                let mut total = 0.0;
                for j in 0..extent {
                    let e = (src[idx(j)] - m).exp();
                    value[idx(j)] = e;
                    total += e;
                }
                for j in 0..extent {
                    value[idx(j)] /= total;
                }
            }
        }
        Ok(self.push(shape, value, Op::Softmax { input: a, axis }))
    }
}

fn expand_source(
    flat: usize,
    dst: &[usize],
    dst_strides: &[usize],
    src: &[usize],
    src_strides: &[usize],
) -> usize {
    let mut rem = flat;
    let mut off = 0;
    for axis in 0..dst.len() {
        let idx = rem / dst_strides[axis];
        rem %= dst_strides[axis];
        if src[axis] != 1 {
            off += idx * src_strides[axis];
        }
    }
    off
}

pub(super) fn mul_backward(ctx: &mut BackCtx<'_>, a: Var, b: Var, g: &[f64]) {
    if ctx.wants(a) {
        let delta: Vec<f64> = ctx.value(b).iter().zip(g).map(|(x, y)| x * y).collect();
        ctx.add_into(a, &delta);
    }
    if ctx.wants(b) {
        let delta: Vec<f64> = ctx.value(a).iter().zip(g).map(|(x, y)| x * y).collect();
        ctx.add_into(b, &delta);
    }
}

pub(super) fn expand_backward(ctx: &mut BackCtx<'_>, a: Var, out_shape: &[usize], g: &[f64]) {
    if !ctx.wants(a) {
        return;
    }
    let src = ctx.shape(a).to_vec();
    let src_strides = strides(&src);
    let dst_strides = strides(out_shape);
    let mut delta = vec![0.0; numel(&src)];
    for (flat, gv) in g.iter().enumerate() {
        delta[expand_source(flat, out_shape, &dst_strides, &src, &src_strides)] += gv;
    }
    ctx.add_into(a, &delta);
}

pub(super) fn transpose_backward(ctx: &mut BackCtx<'_>, a: Var, g: &[f64]) {
    if !ctx.wants(a) {
        return;
    }
    let (r, c) = (ctx.shape(a)[0], ctx.shape(a)[1]);
    let delta = kernels::transpose(g, c, r);
    ctx.add_into(a, &delta);
}

pub(super) fn matmul_backward(ctx: &mut BackCtx<'_>, a: Var, b: Var, g: &[f64]) {
    let (m, k) = (ctx.shape(a)[0], ctx.shape(a)[1]);
    let n = ctx.shape(b)[1];
    if ctx.wants(a) {
        let delta = kernels::matmul_a_bt(g, ctx.value(b), m, n, k);
        ctx.add_into(a, &delta);
    }
    if ctx.wants(b) {
        let delta = kernels::matmul_at_b(ctx.value(a), g, m, k, n);
        ctx.add_into(b, &delta);
    }
}

pub(super) fn narrow_backward(
    ctx: &mut BackCtx<'_>,
    a: Var,
    axis: usize,
    start: usize,
    out_shape: &[usize],
    g: &[f64],
) {
    let shape = ctx.shape(a).to_vec();
    let Some(ga) = ctx.grad_mut(a) else { return };
    let (outer, extent, inner) = split_axis(&shape, axis);
    let len = out_shape[axis];
    for o in 0..outer {
        let dst = (o * extent + start) * inner;
        let src = o * len * inner;
        for (x, y) in ga[dst..dst + len * inner]
            .iter_mut()
            .zip(&g[src..src + len * inner])
        {
            *x += y;
        }
    }
}

pub(super) fn concat_backward(
    ctx: &mut BackCtx<'_>,
    inputs: &[Var],
    axis: usize,
    out_shape: &[usize],
    g: &[f64],
) {
    let (outer, total, inner) = split_axis(out_shape, axis);
    let mut offset = 0;
    for &v in inputs {
        let ext = ctx.shape(v)[axis];
        if let Some(gv) = ctx.grad_mut(v) {
            for o in 0..outer {
                let src = (o * total + offset) * inner;
                let dst = o * ext * inner;
                for (x, y) in gv[dst..dst + ext * inner]
                    .iter_mut()
                    .zip(&g[src..src + ext * inner])
                {
                    *x += y;
                }
            }
        }
        offset += ext;
    }
}

pub(super) fn softmax_backward(
    ctx: &mut BackCtx<'_>,
    a: Var,
    axis: usize,
    shape: &[usize],
    y: &[f64],
    g: &[f64],
) {
    let Some(ga) = ctx.grad_mut(a) else { return };
    let (outer, extent, inner) = split_axis(shape, axis);
    for o in 0..outer {
        for i in 0..inner {
            let idx = |j: usize| (o * extent + j) * inner + i;
            let dot: f64 = (0..extent).map(|j| g[idx(j)] * y[idx(j)]).sum();
            for j in 0..extent {
                ga[idx(j)] += y[idx(j)] * (g[idx(j)] - dot);
            }
        }
    }
}
