//! Per-task losses and their weighted total.

use crate::autodiff::{Tape, Var};
use crate::error::{DemtError, Result};
use crate::model::{TaskKind, TaskSpec};

/// Dense ground truth for one batch, flattened in `[B,H,W,(C)]` order.
#[derive(Clone, Copy, Debug)]
pub struct Targets<'a> {
    pub semseg: &'a [u16],
    /// Non-positive values mark invalid pixels.
    pub depth: &'a [f64],
    /// Zero vectors mark invalid pixels.
    pub normal: &'a [f64],
}

/// Cross-entropy for semseg, masked L1 for depth, `1 − cos` for normals.
pub fn task_loss(tape: &mut Tape, pred: Var, kind: TaskKind, targets: &Targets<'_>) -> Result<Var> {
    match kind {
        TaskKind::Semseg => tape.cross_entropy(pred, targets.semseg),
        TaskKind::Depth => tape.masked_l1(pred, targets.depth),
        TaskKind::Normal => tape.cosine_loss(pred, targets.normal),
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LossReport {
    /// Unweighted loss per task, in task order.
    pub per_task: Vec<(String, f64)>,
    pub total: f64,
}

impl LossReport {
    pub fn get(&self, task: &str) -> Option<f64> {
        self.per_task
            .iter()
            .find(|(n, _)| n == task)
            .map(|(_, v)| *v)
    }
}

/// `Σ α_t·L_t`. Both lists must name the same tasks.
pub fn total_loss(
    tape: &mut Tape,
    per_task: &[(&str, Var)],
    alphas: &[(&str, f64)],
) -> Result<(Var, LossReport)> {
    if per_task.is_empty() {
        return Err(DemtError::InvalidArgument("no task losses".into()));
    }
    let mut a_names: Vec<&str> = alphas.iter().map(|(n, _)| *n).collect();
    let mut l_names: Vec<&str> = per_task.iter().map(|(n, _)| *n).collect();
    a_names.sort_unstable();
    l_names.sort_unstable();
    if a_names != l_names {
        return Err(DemtError::InvalidArgument(format!(
            "loss tasks {l_names:?} do not match weight tasks {a_names:?}"
        )));
    }
    let mut total: Option<Var> = None;
    let mut report = Vec::with_capacity(per_task.len());
    for &(name, loss) in per_task {
        if tape.shape(loss) != [1] {
            return Err(DemtError::shape(
                "total_loss",
                format!("{name} loss is not a scalar"),
            ));
        }
        let alpha = alphas.iter().find(|(n, _)| *n == name).unwrap().1;
        if alpha < 0.0 || !alpha.is_finite() {
            return Err(DemtError::InvalidArgument(format!(
                "loss weight {alpha} for {name}"
            )));
        }
        report.push((name.to_string(), tape.value(loss)[0]));
        let weighted = tape.scale(loss, alpha);
        total = Some(match total {
            None => weighted,
            Some(t) => tape.add(t, weighted)?,
        });
    }
    let total = total.unwrap();
    let value = tape.value(total)[0];
    Ok((
        total,
        LossReport {
            per_task: report,
            total: value,
        },
    ))
}

/// Task losses for every prediction, weighted by each spec's `loss_weight`.
pub fn model_loss(
    tape: &mut Tape,
    specs: &[TaskSpec],
    predictions: &[Var],
    targets: &Targets<'_>,
) -> Result<(Var, LossReport)> {
    let mut per_task = Vec::with_capacity(specs.len());
    for (spec, &pred) in specs.iter().zip(predictions) {
        per_task.push((
            spec.name.as_str(),
            task_loss(tape, pred, spec.kind, targets)?,
        ));
    }
    let alphas: Vec<(&str, f64)> = specs
        .iter()
        .map(|s| (s.name.as_str(), s.loss_weight))
        .collect();
    total_loss(tape, &per_task, &alphas)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    fn scalar(tape: &mut Tape, v: f64) -> Var {
        tape.leaf(&Tensor::scalar(v).with_requires_grad(true))
    }

    #[test]
    fn weighted_sum() {
        let mut tape = Tape::new();
        let a = scalar(&mut tape, 0.5);
        let b = scalar(&mut tape, 0.25);
        let (_, r) =
            total_loss(&mut tape, &[("a", a), ("b", b)], &[("b", 1.0), ("a", 1.0)]).unwrap();
        assert_eq!(r.total, 0.75);
        let (_, r) =
            total_loss(&mut tape, &[("a", a), ("b", b)], &[("a", 2.0), ("b", 4.0)]).unwrap();
        assert!((r.total - (2.0 * 0.5 + 4.0 * 0.25)).abs() < 1e-10);
    }

    #[test]
    fn key_mismatch() {
        let mut tape = Tape::new();
        let a = scalar(&mut tape, 0.5);
        assert!(total_loss(&mut tape, &[("a", a)], &[("b", 1.0)]).is_err());
    }

    #[test]
    fn confident_semseg_is_near_zero() {
        let mut tape = Tape::new();
        let logits =
            tape.leaf(&Tensor::new(&[1, 1, 2, 3], vec![20.0, 0.0, 0.0, 0.0, 0.0, 20.0]).unwrap());
        let t = Targets {
            semseg: &[0, 2],
            depth: &[],
            normal: &[],
        };
        let l = task_loss(&mut tape, logits, TaskKind::Semseg, &t).unwrap();
        assert!(tape.value(l)[0] < 1e-3);
        let all_ignored = Targets {
            semseg: &[255, 255],
            ..t
        };
        assert!(task_loss(&mut tape, logits, TaskKind::Semseg, &all_ignored).is_err());
    }

    #[test]
    fn depth_and_normal_analytic() {
        let mut tape = Tape::new();
        let d = tape.leaf(&Tensor::new(&[1, 1, 2, 1], vec![1.5, 2.0]).unwrap());
        let n = tape.leaf(&Tensor::new(&[1, 1, 2, 3], vec![0.0, 0.0, 1.0, 1.0, 0.0, 0.0]).unwrap());
        let same = Targets {
            semseg: &[],
            depth: &[1.5, 2.0],
            normal: &[0.0, 0.0, 1.0, 1.0, 0.0, 0.0],
        };
        let ld = task_loss(&mut tape, d, TaskKind::Depth, &same).unwrap();
        assert_eq!(tape.value(ld)[0], 0.0);
        let ln = task_loss(&mut tape, n, TaskKind::Normal, &same).unwrap();
        assert!(tape.value(ln)[0].abs() < 1e-15);
        let ortho = Targets {
            normal: &[1.0, 0.0, 0.0, 0.0, 1.0, 0.0],
            ..same
        };
        let l = task_loss(&mut tape, n, TaskKind::Normal, &ortho).unwrap();
        assert!((tape.value(l)[0] - 1.0).abs() < 1e-15);
    }
}
