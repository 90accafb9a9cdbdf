//! Model configuration knobs and how the loss weights reach the gradients.

mod common;

use std::collections::BTreeMap;

use common::{scene_batch, small_config, ALL_TASKS};
use demt_core::loss::{task_loss, total_loss};
use demt_core::model::{Demt, TaskKind, Variant};
use demt_core::{Gradients, Mode, Tape};

#[test]
fn plain_branches_are_independent_per_task() {
    let cfg = small_config(Variant::Dm, &ALL_TASKS);
    let batch = scene_batch(1, 32, 32, 1);
    let mut model = Demt::new(cfg).unwrap();
    let predict = |m: &mut Demt| -> Vec<Vec<f64>> {
        let mut tape = Tape::new();
        let x = tape.constant(&batch.image);
        let out = m.forward(&mut tape, x, Mode::Eval).unwrap();
        out.predictions
            .iter()
            .map(|&p| tape.value(p).to_vec())
            .collect()
    };
    let before = predict(&mut model);
    let ids: Vec<_> = model
        .store
        .iter()
        .filter(|(_, p)| p.name.starts_with("branch.1.") && p.is_trainable())
        .map(|(id, _)| id)
        .collect();
    assert!(!ids.is_empty());
    for id in ids {
        model
            .store
            .get_mut(id)
            .value
            .data_mut()
            .iter_mut()
            .for_each(|v| *v += 0.1);
    }
    let after = predict(&mut model);
    assert_eq!(before[0], after[0]);
    assert_ne!(before[1], after[1]);
    assert_eq!(before[2], after[2]);
}

#[test]
fn depth_doubles_block_parameters_and_calls() {
    let mut counts = Vec::new();
    for depth in [1, 2] {
        let mut cfg = small_config(Variant::Full, &[TaskKind::Semseg, TaskKind::Depth]);
        cfg.depth = depth;
        let mut model = Demt::new(cfg).unwrap();
        let mut tape = Tape::new();
        let x = tape.constant(&scene_batch(1, 32, 32, 2).image);
        model.forward(&mut tape, x, Mode::Train).unwrap();
        assert_eq!(tape.count("mixer.block"), 2 * depth);
        counts.push((
            model.store.count_values("branch.0.block"),
            model.store.count_values("branch.1.block"),
        ));
    }
    assert_eq!(counts[1].0, 2 * counts[0].0);
    assert_eq!(counts[1].1, 2 * counts[0].1);
}

#[test]
fn scales_set_the_aggregated_width() {
    for (scales, width) in [(vec![4], 4), (vec![4, 8], 9), (vec![4, 8, 16, 32], 26)] {
        let mut cfg = small_config(Variant::Dm, &[TaskKind::Depth]);
        cfg.trunk_widths = [4, 5, 8, 9];
        cfg.scales = scales.clone();
        let mut model = Demt::new(cfg).unwrap();
        assert_eq!(model.config.aggregated_channels(), width);
        let mut tape = Tape::new();
        let x = tape.constant(&scene_batch(1, 32, 32, 3).image);
        let out = model.forward(&mut tape, x, Mode::Eval).unwrap();
        assert_eq!(tape.shape(out.aggregated), &[1, 8, 8, width], "{scales:?}");
        let reduce = model.store.id("branch.0.reduce.weight").unwrap();
        assert_eq!(model.store.get(reduce).value.shape(), &[4, width]);
        assert_eq!(tape.shape(out.predictions[0]), &[1, 32, 32, 1]);
    }
    let mut bad = small_config(Variant::Dm, &[TaskKind::Depth]);
    bad.scales = vec![8, 16];
    assert!(Demt::new(bad).is_err());
}

/// Parameter gradients of `Σ α_t·L_t` keyed by name.
fn weighted_grads(variant: Variant, alphas: &[f64]) -> (f64, BTreeMap<String, Vec<f64>>) {
    let cfg = small_config(variant, &ALL_TASKS);
    let batch = scene_batch(2, 32, 32, 4);
    let mut model = Demt::new(cfg).unwrap();
    let mut tape = Tape::new();
    let x = tape.constant(&batch.image);
    let out = model.forward(&mut tape, x, Mode::Train).unwrap();
    let targets = batch.targets();
    let names: Vec<String> = model.config.tasks.iter().map(|t| t.name.clone()).collect();
    let mut per_task = Vec::new();
    for (spec, &pred) in model.config.tasks.iter().zip(&out.predictions) {
        per_task.push(task_loss(&mut tape, pred, spec.kind, &targets).unwrap());
    }
    let named: Vec<(&str, _)> = names.iter().map(String::as_str).zip(per_task).collect();
    let weights: Vec<(&str, f64)> = names
        .iter()
        .map(String::as_str)
        .zip(alphas.iter().copied())
        .collect();
    let (loss, report) = total_loss(&mut tape, &named, &weights).unwrap();
    let grads: Gradients = tape.backward(loss).unwrap();
    model.store.accumulate_grads(&tape, &grads).unwrap();
    let map = model
        .store
        .iter()
        .filter(|(_, p)| p.is_trainable())
        .map(|(_, p)| {
            (
                p.name.clone(),
                p.value.grad().map(<[f64]>::to_vec).unwrap_or_default(),
            )
        })
        .collect();
    (report.total, map)
}

#[test]
fn doubling_every_weight_doubles_loss_and_gradients() {
    let (l1, g1) = weighted_grads(Variant::Full, &[1.0, 1.0, 10.0]);
    let (l2, g2) = weighted_grads(Variant::Full, &[2.0, 2.0, 20.0]);
    assert!((l2 - 2.0 * l1).abs() <= 1e-10 * l1.abs());
    for (name, a) in &g1 {
        let b = &g2[name];
        assert_eq!(a.len(), b.len(), "{name}");
        let scale = a.iter().fold(1e-300f64, |m, v| m.max(v.abs()));
        for (x, y) in a.iter().zip(b) {
            assert!((y - 2.0 * x).abs() <= 1e-10 * scale, "{name}: {y} vs 2·{x}");
        }
    }
}

#[test]
fn zero_weight_removes_the_task_from_its_exclusive_parameters() {
    // In the plain variant a task's branch and head are exclusive to it.
    let (_, g) = weighted_grads(Variant::Dm, &[1.0, 0.0, 1.0]);
    for (name, grad) in &g {
        let exclusive = name.starts_with("branch.1.") || name.starts_with("head.1.");
        let zero = grad.iter().all(|&v| v == 0.0);
        if exclusive {
            assert!(zero, "{name} still receives gradient");
        } else if name.starts_with("head.") || name.starts_with("branch.") {
            assert!(!zero, "{name} lost its gradient");
        }
    }
    // With the full decoder only the head is exclusive.
    let (_, g) = weighted_grads(Variant::Full, &[1.0, 0.0, 1.0]);
    for (name, grad) in &g {
        if name.starts_with("head.1.") {
            assert!(grad.iter().all(|&v| v == 0.0), "{name}");
        }
    }
}
