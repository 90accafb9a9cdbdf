//! Fused per-pixel loss reductions. Each returns a scalar mean over valid pixels.

use super::{BackCtx, Op, Tape, Var};
use crate::error::{DemtError, Result};

/// Semantic-segmentation label that is excluded from losses and metrics.
pub const IGNORE_LABEL: u16 = 255;

impl Tape {
    /// Mean softmax cross-entropy over the trailing class axis. Pixels labelled
    /// [`IGNORE_LABEL`] are skipped.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[u16]) -> Result<Var> {
        self.check_var(logits)?;
        let classes = *self.shape(logits).last().unwrap();
        let src = self.value(logits);
        if src.len() / classes != labels.len() {
            return Err(DemtError::shape(
                "cross_entropy",
                format!(
                    "{} pixels of logits vs {} labels",
                    src.len() / classes,
                    labels.len()
                ),
            ));
        }
        let mut probs = vec![0.0; src.len()];
        let mut targets = Vec::with_capacity(labels.len());
        let mut total = 0.0;
        let mut count = 0;
        for ((row, prow), &label) in src
            .chunks(classes)
            .zip(probs.chunks_mut(classes))
            .zip(labels)
        {
            let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for (p, &v) in prow.iter_mut().zip(row) {
                *p = (v - m).exp();
                z += *p;
            }
            prow.iter_mut().for_each(|p| *p /= z);
            if label == IGNORE_LABEL {
                targets.push(None);
                continue;
            }
            let t = label as usize;
            if t >= classes {
                return Err(DemtError::InvalidArgument(format!(
                    "label {t} out of range for {classes} classes"
                )));
            }
            total += m + z.ln() - row[t];
            count += 1;
            targets.push(Some(t));
        }
        if count == 0 {
            return Err(DemtError::InvalidArgument(
                "cross_entropy: every pixel is ignored".into(),
            ));
        }
        Ok(self.push(
            vec![1],
            vec![total / count as f64],
            Op::CrossEntropy {
                logits,
                probs,
                targets,
                count,
            },
        ))
    }

    /// Mean absolute error over pixels whose target is strictly positive.
    pub fn masked_l1(&mut self, pred: Var, target: &[f64]) -> Result<Var> {
        self.check_var(pred)?;
        let p = self.value(pred);
        if p.len() != target.len() {
            return Err(DemtError::shape(
                "masked_l1",
                format!("{} predictions vs {} targets", p.len(), target.len()),
            ));
        }
        let mut total = 0.0;
        let mut count = 0;
        for (a, &t) in p.iter().zip(target) {
            if t > 0.0 {
                total += (a - t).abs();
                count += 1;
            }
        }
        if count == 0 {
            return Err(DemtError::InvalidArgument(
                "masked_l1: no valid target pixels".into(),
            ));
        }
        Ok(self.push(
            vec![1],
            vec![total / count as f64],
            Op::MaskedL1 {
                pred,
                target: target.to_vec(),
                count,
            },
        ))
    }

    /// Mean `1 − cos(pred, target)` over pixels whose target vector is nonzero.
    pub fn cosine_loss(&mut self, pred: Var, target: &[f64]) -> Result<Var> {
        self.check_var(pred)?;
        let c = *self.shape(pred).last().unwrap();
        let p = self.value(pred);
        if p.len() != target.len() {
            return Err(DemtError::shape(
                "cosine_loss",
                format!("{} predictions vs {} targets", p.len(), target.len()),
            ));
        }
        let mut total = 0.0;
        let mut count = 0;
        for (pr, tr) in p.chunks(c).zip(target.chunks(c)) {
            let tn = norm(tr);
            if tn == 0.0 {
                continue;
            }
            let pn = norm(pr).max(1e-12);
            let dot: f64 = pr.iter().zip(tr).map(|(a, b)| a * b).sum();
            total += 1.0 - dot / (pn * tn);
            count += 1;
        }
        if count == 0 {
            return Err(DemtError::InvalidArgument(
                "cosine_loss: every target vector is zero".into(),
            ));
        }
        Ok(self.push(
            vec![1],
            vec![total / count as f64],
            Op::Cosine {
                pred,
                target: target.to_vec(),
                count,
            },
        ))
    }
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

pub(super) fn cross_entropy_backward(
    ctx: &mut BackCtx<'_>,
    logits: Var,
    probs: &[f64],
    targets: &[Option<usize>],
    count: usize,
    g: f64,
) {
    let Some(gl) = ctx.grad_mut(logits) else {
        return;
    };
    let classes = probs.len() / targets.len();
    let s = g / count as f64;
    for (i, t) in targets.iter().enumerate() {
        let Some(t) = *t else { continue };
        let row = &mut gl[i * classes..(i + 1) * classes];
        for (j, r) in row.iter_mut().enumerate() {
            let onehot = if j == t { 1.0 } else { 0.0 };
            *r += s * (probs[i * classes + j] - onehot);
        }
    }
}

pub(super) fn masked_l1_backward(
    ctx: &mut BackCtx<'_>,
    pred: Var,
    target: &[f64],
    count: usize,
    g: f64,
) {
    if !ctx.wants(pred) {
        return;
    }
    let s = g / count as f64;
    let delta: Vec<f64> = ctx
        .value(pred)
        .iter()
        .zip(target)
        .map(|(&p, &t)| if t > 0.0 { s * sign(p - t) } else { 0.0 })
        .collect();
    ctx.add_into(pred, &delta);
}

fn sign(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

pub(super) fn cosine_backward(
    ctx: &mut BackCtx<'_>,
    pred: Var,
    target: &[f64],
    count: usize,
    g: f64,
) {
    if !ctx.wants(pred) {
        return;
    }
    let c = *ctx.shape(pred).last().unwrap();
    let s = g / count as f64;
    let p = ctx.value(pred);
    let mut delta = vec![0.0; p.len()];
    for ((pr, tr), dr) in p.chunks(c).zip(target.chunks(c)).zip(delta.chunks_mut(c)) {
        let tn = norm(tr);
        if tn == 0.0 {
            continue;
        }
        let pn = norm(pr).max(1e-12);
        let dot: f64 = pr.iter().zip(tr).map(|(a, b)| a * b).sum();
        let cos = dot / (pn * tn);
        for ch in 0..c {
            // d(1 - cos)/dp = -(t̂/|p| - cos·p/|p|²)
            dr[ch] = -s * (tr[ch] / (tn * pn) - cos * pr[ch] / (pn * pn));
        }
    }
    ctx.add_into(pred, &delta);
}
