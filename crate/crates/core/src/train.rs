//! Training loop, evaluation and checkpoint conversion.
//!
//! The batch used at every step is a pure function of `(shuffle seed, step)`,
//! so a run resumed from a checkpoint replays exactly the batches the
//! uninterrupted run would have seen.

use crate::autodiff::Tape;
use crate::checkpoint::{Checkpoint, Record};
use crate::config::Config;
use crate::data::{epoch_order, Batch, Dataset, Sample};
use crate::error::{DemtError, Result};
use crate::loss::{model_loss, LossReport};
use crate::metrics::{
    argmax_classes, AngularAccumulator, MetricRecord, RmseAccumulator, SegConfusion,
};
use crate::model::{Demt, TaskKind};
use crate::nn::Mode;
use crate::optim::Sgd;

const VELOCITY_PREFIX: &str = "opt.velocity.";

/// Train and validation parts of a dataset: the last `val_count` samples are held out.
pub fn split(data: &Dataset, val_count: usize) -> Result<(Dataset, Dataset)> {
    if val_count >= data.len() {
        return Err(DemtError::Config(format!(
            "validation count {val_count} leaves no training samples out of {}",
            data.len()
        )));
    }
    let cut = data.len() - val_count;
    let train: Vec<usize> = (0..cut).collect();
    let val: Vec<usize> = (cut..data.len()).collect();
    Ok((data.subset(&train, "train"), data.subset(&val, "val")))
}

pub struct Session {
    pub config: Config,
    pub model: Demt,
    pub opt: Sgd,
    /// Completed optimiser steps.
    pub step: u64,
}

impl Session {
    pub fn new(config: Config) -> Result<Self> {
        let model = Demt::new(config.model_config()?)?;
        let t = &config.train;
        let opt = Sgd::new(t.lr, t.weight_decay, t.momentum)?;
        if t.batch_size == 0 {
            return Err(DemtError::Config(
                "train.batch_size must be at least 1".into(),
            ));
        }
        Ok(Self {
            config,
            model,
            opt,
            step: 0,
        })
    }

    fn check_dataset(&self, data: &Dataset) -> Result<()> {
        let m = &data.manifest;
        if (m.height, m.width) != self.model.config.input_hw {
            return Err(DemtError::Config(format!(
                "dataset is {}x{} but the model expects {:?}",
                m.height, m.width, self.model.config.input_hw
            )));
        }
        if m.classes != self.config.data.classes {
            return Err(DemtError::Config(format!(
                "dataset has {} classes, config says {}",
                m.classes, self.config.data.classes
            )));
        }
        if data.is_empty() {
            return Err(DemtError::Config("empty training set".into()));
        }
        Ok(())
    }

    /// Batch consumed by the step following `step` completed steps.
    pub fn batch_for_step(&self, data: &Dataset, step: u64) -> Result<Batch> {
        let bs = self.config.train.batch_size.min(data.len());
        let indices: Vec<usize> = if self.config.train.fixed_batch {
            (0..bs).collect()
        } else {
            let per_epoch = data.len().div_ceil(bs) as u64;
            let order = epoch_order(data.len(), self.config.shuffle_seed(), step / per_epoch);
            let start = (step % per_epoch) as usize * bs;
            order[start..(start + bs).min(order.len())].to_vec()
        };
        let samples: Vec<&Sample> = indices.iter().map(|&i| &data.samples[i]).collect();
        Batch::from_samples(&samples, indices)
    }

    /// One SGD step on `batch`; returns the loss measured before the update.
    pub fn train_step(&mut self, batch: &Batch) -> Result<LossReport> {
        let mut tape = Tape::new();
        let image = tape.constant(&batch.image);
        let out = self.model.forward(&mut tape, image, Mode::Train)?;
        let (loss, report) = model_loss(
            &mut tape,
            &self.model.config.tasks,
            &out.predictions,
            &batch.targets(),
        )?;
        if !report.total.is_finite() {
            return Err(DemtError::InvalidArgument(format!(
                "non-finite loss at step {}",
                self.step + 1
            )));
        }
        let grads = tape.backward(loss)?;
        self.model.store.accumulate_grads(&tape, &grads)?;
        self.opt.step(&mut self.model.store)?;
        self.step += 1;
        Ok(report)
    }

    /// Trains until `until` steps are complete, calling `on_step` after each.
    pub fn run<F>(&mut self, data: &Dataset, until: u64, mut on_step: F) -> Result<()>
    where
        F: FnMut(&Session, &LossReport) -> Result<()>,
    {
        self.check_dataset(data)?;
        while self.step < until {
            let batch = self.batch_for_step(data, self.step)?;
            let report = self.train_step(&batch)?;
            on_step(self, &report)?;
        }
        Ok(())
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut header = format!(
            "state.step = {}\nstate.shuffle_seed = {}\n",
            self.step,
            self.config.shuffle_seed()
        );
        header.push_str(&self.config.to_text());
        let mut records: Vec<Record> = self
            .model
            .store
            .iter()
            .map(|(_, p)| Record {
                name: p.name.clone(),
                tensor: p.value.clone().with_requires_grad(false),
            })
            .collect();
        for (name, v) in &self.opt.velocity {
            let shape = self
                .model
                .store
                .id(name)
                .map(|id| self.model.store.get(id).value.shape().to_vec())
                .unwrap_or_else(|| vec![v.len()]);
            records.push(Record {
                name: format!("{VELOCITY_PREFIX}{name}"),
                tensor: crate::tensor::Tensor::new(&shape, v.clone()).expect("velocity shape"),
            });
        }
        Checkpoint::new(header, records)
    }

    /// Restores model, optimiser and step counter. `overrides` are applied to
    /// the stored configuration and may only touch keys that do not change
    /// the model's structure.
    pub fn from_checkpoint(ckpt: &Checkpoint, overrides: &[String]) -> Result<Self> {
        let config_text: String = ckpt
            .header
            .lines()
            .filter(|l| !l.trim_start().starts_with("state."))
            .map(|l| format!("{l}\n"))
            .collect();
        let stored = Config::from_text(&config_text)?;
        let mut config = stored.clone();
        for o in overrides {
            config.apply_override(o)?;
        }
        if config.model_config()? != stored.model_config()? {
            return Err(DemtError::Config(
                "overrides change the model stored in the checkpoint".into(),
            ));
        }
        let mut s = Session::new(config)?;
        s.step = ckpt
            .header_value("state.step")
            .ok_or_else(|| DemtError::Format("checkpoint lacks state.step".into()))?
            .parse()
            .map_err(|_| DemtError::Format("bad state.step".into()))?;
        let ids: Vec<_> = s.model.store.ids().collect();
        for id in ids {
            let p = s.model.store.get_mut(id);
            let t = ckpt.get(&p.name).ok_or_else(|| {
                DemtError::Format(format!("checkpoint lacks parameter {}", p.name))
            })?;
            if t.shape() != p.value.shape() {
                return Err(DemtError::Format(format!(
                    "parameter {} has shape {:?} in the checkpoint, model expects {:?}",
                    p.name,
                    t.shape(),
                    p.value.shape()
                )));
            }
            p.value.data_mut().copy_from_slice(t.data());
        }
        for r in &ckpt.records {
            if let Some(name) = r.name.strip_prefix(VELOCITY_PREFIX) {
                if s.model.store.id(name).is_none() {
                    return Err(DemtError::Format(format!(
                        "velocity for unknown parameter {name}"
                    )));
                }
                s.opt
                    .velocity
                    .insert(name.to_string(), r.tensor.data().to_vec());
            } else if s.model.store.id(&r.name).is_none() {
                return Err(DemtError::Format(format!("unknown record {}", r.name)));
            }
        }
        Ok(s)
    }
}

/// `step=<k> total=<loss> <task>=<loss> ...`
pub fn format_step_line(step: u64, report: &LossReport) -> String {
    let mut s = format!("step={step} total={:.10}", report.total);
    for (name, v) in &report.per_task {
        s.push_str(&format!(" {name}={v:.10}"));
    }
    s
}

/// Mean eval-mode loss over the dataset, one sample at a time. Running
/// statistics are read, never updated.
pub fn evaluate_loss(model: &mut Demt, data: &Dataset) -> Result<LossReport> {
    if data.is_empty() {
        return Err(DemtError::InvalidArgument(
            "cannot evaluate an empty dataset".into(),
        ));
    }
    let mut total = 0.0;
    let mut per_task: Vec<(String, f64)> = model
        .config
        .tasks
        .iter()
        .map(|t| (t.name.clone(), 0.0))
        .collect();
    for (i, s) in data.samples.iter().enumerate() {
        let batch = Batch::from_samples(&[s], vec![i])?;
        let mut tape = Tape::new();
        let image = tape.constant(&batch.image);
        let out = model.forward(&mut tape, image, Mode::Eval)?;
        let (_, r) = model_loss(
            &mut tape,
            &model.config.tasks,
            &out.predictions,
            &batch.targets(),
        )?;
        total += r.total;
        for ((_, acc), (_, v)) in per_task.iter_mut().zip(&r.per_task) {
            *acc += v;
        }
    }
    let n = data.len() as f64;
    per_task.iter_mut().for_each(|(_, v)| *v /= n);
    Ok(LossReport {
        per_task,
        total: total / n,
    })
}

/// Dataset-level mIoU, depth rmse and mean angular error in eval mode.
pub fn evaluate_metrics(model: &mut Demt, data: &Dataset) -> Result<MetricRecord> {
    let classes = data.manifest.classes;
    let mut seg = SegConfusion::new(classes.max(1))?;
    let mut depth = RmseAccumulator::default();
    let mut normal = AngularAccumulator::default();
    for (i, s) in data.samples.iter().enumerate() {
        let batch = Batch::from_samples(&[s], vec![i])?;
        let mut tape = Tape::new();
        let image = tape.constant(&batch.image);
        let out = model.forward(&mut tape, image, Mode::Eval)?;
        for (spec, &p) in model.config.tasks.iter().zip(&out.predictions) {
            let v = tape.value(p);
            match spec.kind {
                TaskKind::Semseg => {
                    seg.add(&argmax_classes(v, spec.out_channels), &batch.semseg)?
                }
                TaskKind::Depth => depth.add(v, &batch.depth)?,
                TaskKind::Normal => normal.add(v, &batch.normal)?,
            }
        }
    }
    let mut record = MetricRecord::default();
    for spec in &model.config.tasks {
        let value = match spec.kind {
            TaskKind::Semseg => seg.miou(),
            TaskKind::Depth => depth.value()?,
            TaskKind::Normal => normal.value()?,
        };
        record.push(&spec.name, spec.kind.metric_name(), value, spec.direction());
    }
    Ok(record)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::generate_dataset;

    fn small_config() -> Config {
        let mut c = Config::default();
        for kv in [
            "data.height=32",
            "data.width=32",
            "data.classes=3",
            "model.trunk_widths=4,4,4,4",
            "model.scales=4,8",
            "model.reduced_channels=4",
            "train.batch_size=2",
            "seed=3",
        ] {
            c.apply_override(kv).unwrap();
        }
        c
    }

    #[test]
    fn resume_matches_uninterrupted() {
        let cfg = small_config();
        let data = generate_dataset(1, 5, 32, 32, 3, "train").unwrap();
        let mut full = Session::new(cfg.clone()).unwrap();
        let mut log_full = Vec::new();
        full.run(&data, 6, |s, r| {
            log_full.push(format_step_line(s.step, r));
            Ok(())
        })
        .unwrap();
        let mut first = Session::new(cfg).unwrap();
        first.run(&data, 3, |_, _| Ok(())).unwrap();
        let bytes = first.to_checkpoint().encode();
        let mut resumed =
            Session::from_checkpoint(&Checkpoint::decode(&bytes).unwrap(), &[]).unwrap();
        assert_eq!(resumed.step, 3);
        let mut log_resumed = Vec::new();
        resumed
            .run(&data, 6, |s, r| {
                log_resumed.push(format_step_line(s.step, r));
                Ok(())
            })
            .unwrap();
        assert_eq!(log_resumed, log_full[3..]);
        assert_eq!(
            resumed.to_checkpoint().encode(),
            full.to_checkpoint().encode()
        );
    }

    #[test]
    fn structural_overrides_rejected_on_resume() {
        let s = Session::new(small_config()).unwrap();
        let ck = s.to_checkpoint();
        assert!(Session::from_checkpoint(&ck, &["model.depth_d=2".into()]).is_err());
        assert!(Session::from_checkpoint(&ck, &["train.steps=50".into()]).is_ok());
    }

    #[test]
    fn metrics_cover_every_task() {
        let data = generate_dataset(2, 2, 32, 32, 3, "train").unwrap();
        let mut s = Session::new(small_config()).unwrap();
        let m = evaluate_metrics(&mut s.model, &data).unwrap();
        assert_eq!(m.entries.len(), 3);
        let l = evaluate_loss(&mut s.model, &data).unwrap();
        assert!(l.total.is_finite() && l.total > 0.0);
    }
}
