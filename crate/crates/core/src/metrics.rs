//! Dense-prediction metrics, the multi-task performance change `Δm`, and the
//! line-oriented report format.
//!
//! A report is a sequence of lines
//!
//! ```text
//! task=semseg metric=miou value=0.412345
//! task=depth metric=rmse value=0.601000
//! delta_m=-1.23
//! ```

use std::fmt::Write as _;

use crate::autodiff::IGNORE_LABEL;
use crate::error::{DemtError, Result};
use crate::model::Direction;

/// Confusion counts for semantic segmentation, accumulated over any number
/// of label maps.
#[derive(Clone, Debug, PartialEq)]
pub struct SegConfusion {
    classes: usize,
    /// Row-major `[gt, pred]`.
    counts: Vec<u64>,
}

impl SegConfusion {
    pub fn new(classes: usize) -> Result<Self> {
        if classes < 1 {
            return Err(DemtError::InvalidArgument(
                "mIoU needs at least one class".into(),
            ));
        }
        Ok(Self {
            classes,
            counts: vec![0; classes * classes],
        })
    }

    pub fn add(&mut self, pred: &[u16], gt: &[u16]) -> Result<()> {
        if pred.len() != gt.len() {
            return Err(DemtError::shape(
                "miou",
                format!("{} vs {} pixels", pred.len(), gt.len()),
            ));
        }
        for (&p, &g) in pred.iter().zip(gt) {
            if g == IGNORE_LABEL || p == IGNORE_LABEL {
                continue;
            }
            let (p, g) = (p as usize, g as usize);
            if p >= self.classes || g >= self.classes {
                return Err(DemtError::InvalidArgument(format!(
                    "label {} out of range for {} classes",
                    p.max(g),
                    self.classes
                )));
            }
            self.counts[g * self.classes + p] += 1;
        }
        Ok(())
    }

    /// Mean IoU over classes that occur in the ground truth or the prediction.
    /// Returns 1 when no pixel was counted.
    pub fn miou(&self) -> f64 {
        let k = self.classes;
        let mut sum = 0.0;
        let mut present = 0usize;
        for c in 0..k {
            let tp = self.counts[c * k + c];
            let gt: u64 = self.counts[c * k..(c + 1) * k].iter().sum();
            let pred: u64 = (0..k).map(|g| self.counts[g * k + c]).sum();
            let union = gt + pred - tp;
            if union > 0 {
                sum += tp as f64 / union as f64;
                present += 1;
            }
        }
        if present == 0 {
            1.0
        } else {
            sum / present as f64
        }
    }
}

pub fn miou(pred: &[u16], gt: &[u16], classes: usize) -> Result<f64> {
    let mut c = SegConfusion::new(classes)?;
    c.add(pred, gt)?;
    Ok(c.miou())
}

/// Index of the largest logit along the trailing axis of `logits`.
pub fn argmax_classes(logits: &[f64], classes: usize) -> Vec<u16> {
    logits
        .chunks(classes)
        .map(|row| {
            let mut best = 0;
            for (i, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = i;
                }
            }
            best as u16
        })
        .collect()
}

/// Running sum for root-mean-square depth error over pixels with `gt > 0`.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct RmseAccumulator {
    sum_sq: f64,
    count: usize,
}

impl RmseAccumulator {
    pub fn add(&mut self, pred: &[f64], gt: &[f64]) -> Result<()> {
        if pred.len() != gt.len() {
            return Err(DemtError::shape(
                "rmse",
                format!("{} vs {} pixels", pred.len(), gt.len()),
            ));
        }
        for (p, &g) in pred.iter().zip(gt) {
            if g > 0.0 {
                self.sum_sq += (p - g) * (p - g);
                self.count += 1;
            }
        }
        Ok(())
    }

    pub fn value(&self) -> Result<f64> {
        if self.count == 0 {
            return Err(DemtError::InvalidArgument(
                "rmse: no valid depth pixels".into(),
            ));
        }
        Ok((self.sum_sq / self.count as f64).sqrt())
    }
}

pub fn rmse_depth(pred: &[f64], gt: &[f64]) -> Result<f64> {
    let mut acc = RmseAccumulator::default();
    acc.add(pred, gt)?;
    acc.value()
}

/// Running mean of angular error in degrees over pixels with a nonzero
/// ground-truth normal.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct AngularAccumulator {
    sum_deg: f64,
    count: usize,
}

impl AngularAccumulator {
    pub fn add(&mut self, pred: &[f64], gt: &[f64]) -> Result<()> {
        if pred.len() != gt.len() || !pred.len().is_multiple_of(3) {
            return Err(DemtError::shape(
                "mean_angular_error",
                format!("{} vs {} values", pred.len(), gt.len()),
            ));
        }
        for (p, g) in pred.chunks(3).zip(gt.chunks(3)) {
            let gn = norm3(g);
            if gn == 0.0 {
                continue;
            }
            let pn = norm3(p);
            let cos = if pn == 0.0 {
                0.0
            } else {
                (p[0] * g[0] + p[1] * g[1] + p[2] * g[2]) / (pn * gn)
            };
            self.sum_deg += cos.clamp(-1.0, 1.0).acos().to_degrees();
            self.count += 1;
        }
        Ok(())
    }

    pub fn value(&self) -> Result<f64> {
        if self.count == 0 {
            return Err(DemtError::InvalidArgument(
                "mean_angular_error: no valid normal pixels".into(),
            ));
        }
        Ok(self.sum_deg / self.count as f64)
    }
}

fn norm3(v: &[f64]) -> f64 {
    (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt()
}

pub fn mean_angular_error(pred: &[f64], gt: &[f64]) -> Result<f64> {
    let mut acc = AngularAccumulator::default();
    acc.add(pred, gt)?;
    acc.value()
}

#[derive(Clone, Debug, PartialEq)]
pub struct MetricEntry {
    pub task: String,
    pub metric: String,
    pub value: f64,
    pub direction: Direction,
}

/// Direction of a metric known by name.
pub fn metric_direction(metric: &str) -> Option<Direction> {
    match metric {
        "miou" | "odsf" | "maxf" => Some(Direction::HigherBetter),
        "rmse" | "mean_angular_error" | "merr" => Some(Direction::LowerBetter),
        _ => None,
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct MetricRecord {
    pub entries: Vec<MetricEntry>,
    pub delta_m: Option<f64>,
}

impl MetricRecord {
    pub fn push(&mut self, task: &str, metric: &str, value: f64, direction: Direction) {
        self.entries.push(MetricEntry {
            task: task.to_string(),
            metric: metric.to_string(),
            value,
            direction,
        });
    }

    /// Builds a record from `(task, metric, value)` triples with known metric names.
    pub fn from_values(values: &[(&str, &str, f64)]) -> Result<Self> {
        let mut r = Self::default();
        for &(task, metric, value) in values {
            let dir = metric_direction(metric)
                .ok_or_else(|| DemtError::Format(format!("unknown metric {metric:?}")))?;
            r.push(task, metric, value, dir);
        }
        Ok(r)
    }

    pub fn get(&self, task: &str, metric: &str) -> Option<&MetricEntry> {
        self.entries
            .iter()
            .find(|e| e.task == task && e.metric == metric)
    }

    pub fn to_report(&self) -> String {
        let mut s = String::new();
        for e in &self.entries {
            let _ = writeln!(
                s,
                "task={} metric={} value={:.6}",
                e.task, e.metric, e.value
            );
        }
        if let Some(d) = self.delta_m {
            let _ = writeln!(s, "delta_m={d:.2}");
        }
        s
    }

    /// Parses a report. Lines may carry an extra `direction=higher|lower`
    /// token for metrics not known by name; blank lines and `#` comments are
    /// skipped.
    pub fn parse_report(text: &str) -> Result<Self> {
        let mut r = Self::default();
        for (i, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let bad =
                |what: &str| DemtError::Format(format!("report line {}: {what}: {line:?}", i + 1));
            if let Some(v) = line.strip_prefix("delta_m=") {
                r.delta_m = Some(v.parse().map_err(|_| bad("bad delta_m"))?);
                continue;
            }
            let (mut task, mut metric, mut value, mut direction) = (None, None, None, None);
            for token in line.split_whitespace() {
                let (k, v) = token
                    .split_once('=')
                    .ok_or_else(|| bad("expected key=value"))?;
                match k {
                    "task" => task = Some(v),
                    "metric" => metric = Some(v),
                    "value" => value = Some(v.parse::<f64>().map_err(|_| bad("bad value"))?),
                    "direction" => {
                        direction = Some(match v {
                            "higher" => Direction::HigherBetter,
                            "lower" => Direction::LowerBetter,
                            _ => return Err(bad("bad direction")),
                        })
                    }
                    _ => return Err(bad("unknown key")),
                }
            }
            let (Some(task), Some(metric), Some(value)) = (task, metric, value) else {
                return Err(bad("missing task, metric or value"));
            };
            let direction = direction
                .or_else(|| metric_direction(metric))
                .ok_or_else(|| bad("unknown metric direction"))?;
            r.push(task, metric, value, direction);
        }
        Ok(r)
    }
}

/// Mean signed relative change of `multi` against `single`, in percent.
/// Lower-is-better metrics contribute with flipped sign.
pub fn delta_m(multi: &MetricRecord, single: &MetricRecord) -> Result<f64> {
    if multi.entries.is_empty() || multi.entries.len() != single.entries.len() {
        return Err(DemtError::InvalidArgument(format!(
            "{} multi-task metrics vs {} single-task metrics",
            multi.entries.len(),
            single.entries.len()
        )));
    }
    let mut sum = 0.0;
    for m in &multi.entries {
        let s = single.get(&m.task, &m.metric).ok_or_else(|| {
            DemtError::InvalidArgument(format!("no reference for {} {}", m.task, m.metric))
        })?;
        if s.direction != m.direction {
            return Err(DemtError::InvalidArgument(format!(
                "direction mismatch for {} {}",
                m.task, m.metric
            )));
        }
        if s.value == 0.0 {
            return Err(DemtError::InvalidArgument(format!(
                "reference value for {} {} is zero",
                m.task, m.metric
            )));
        }
        let rel = (m.value - s.value) / s.value;
        sum += match m.direction {
            Direction::HigherBetter => rel,
            Direction::LowerBetter => -rel,
        };
    }
    Ok(sum / multi.entries.len() as f64 * 100.0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn table_row(v: [f64; 4]) -> MetricRecord {
        MetricRecord::from_values(&[
            ("semseg", "miou", v[0]),
            ("depth", "rmse", v[1]),
            ("normal", "mean_angular_error", v[2]),
            ("boundary", "odsf", v[3]),
        ])
        .unwrap()
    }

    #[test]
    fn four_task_rows() {
        let single = table_row([38.02, 0.6104, 20.94, 76.22]);
        let baseline = table_row([36.35, 0.6284, 21.02, 76.36]);
        let demt = table_row([39.18, 0.5922, 20.21, 76.40]);
        let d = delta_m(&baseline, &single).unwrap();
        assert!((d - (-1.89)).abs() <= 0.01, "{d}");
        // (3.0510 + 2.9817 + 3.4862 + 0.2362) / 4, evaluated by hand.
        let d = delta_m(&demt, &single).unwrap();
        assert!((d - 2.4387).abs() <= 1e-4, "{d}");
        assert_eq!(delta_m(&single, &single).unwrap(), 0.0);
    }

    #[test]
    fn zero_reference_rejected() {
        let a = MetricRecord::from_values(&[("depth", "rmse", 0.0)]).unwrap();
        assert!(delta_m(&a, &a).is_err());
    }

    #[test]
    fn miou_cases() {
        assert_eq!(miou(&[0, 1, 2, 1], &[0, 1, 2, 1], 3).unwrap(), 1.0);
        assert_eq!(miou(&[1, 1], &[0, 0], 2).unwrap(), 0.0);
        // gt: 0 0 1 1, pred: 0 1 1 1 -> class 0 IoU 1/2, class 1 IoU 2/3.
        let v = miou(&[0, 1, 1, 1], &[0, 0, 1, 1], 2).unwrap();
        assert!((v - (0.5 + 2.0 / 3.0) / 2.0).abs() < 1e-15);
        assert_eq!(miou(&[0, 1], &[0, IGNORE_LABEL], 2).unwrap(), 1.0);
        assert!(SegConfusion::new(0).is_err());
    }

    #[test]
    fn rmse_and_angles() {
        assert_eq!(rmse_depth(&[1.0, 2.0], &[1.0, 2.0]).unwrap(), 0.0);
        assert!((rmse_depth(&[1.5, 2.5, 9.0], &[1.0, 2.0, 0.0]).unwrap() - 0.5).abs() < 1e-15);
        assert!(rmse_depth(&[1.0], &[0.0]).is_err());
        assert!(
            mean_angular_error(&[0.0, 0.0, 1.0], &[0.0, 0.0, 2.0])
                .unwrap()
                .abs()
                < 1e-12
        );
        let e = mean_angular_error(
            &[1.0, 0.0, 0.0, 0.0, 1.0, 0.0],
            &[0.0, 1.0, 0.0, 0.0, 0.0, 0.0],
        )
        .unwrap();
        assert!((e - 90.0).abs() < 1e-12);
    }

    #[test]
    fn report_round_trip() {
        let mut r = table_row([38.02, 0.6104, 20.94, 76.22]);
        r.delta_m = Some(-1.885);
        let text = r.to_report();
        assert!(text.contains("task=depth metric=rmse value=0.610400\n"));
        let parsed = MetricRecord::parse_report(&text).unwrap();
        assert_eq!(parsed.entries, r.entries);
        assert!(MetricRecord::parse_report("task=a metric=zzz value=1").is_err());
        let custom =
            MetricRecord::parse_report("task=a metric=zzz value=1 direction=lower").unwrap();
        assert_eq!(custom.entries[0].direction, Direction::LowerBetter);
    }

    fn brute_rmse(p: &[f64], g: &[f64]) -> f64 {
        let mut s = 0.0;
        let mut n = 0.0;
        for i in 0..p.len() {
            if g[i] > 0.0 {
                s += (p[i] - g[i]).powi(2);
                n += 1.0;
            }
        }
        (s / n).sqrt()
    }

    proptest! {
        #[test]
        fn metric_bounds(labels in proptest::collection::vec((0u16..4, 0u16..4), 1..64)) {
            let (p, g): (Vec<u16>, Vec<u16>) = labels.into_iter().unzip();
            let v = miou(&p, &g, 4).unwrap();
            prop_assert!((0.0..=1.0).contains(&v));
        }

        #[test]
        fn rmse_matches_loop(pairs in proptest::collection::vec((-3.0f64..3.0, 0.1f64..5.0), 1..50)) {
            let (p, g): (Vec<f64>, Vec<f64>) = pairs.into_iter().unzip();
            prop_assert!((rmse_depth(&p, &g).unwrap() - brute_rmse(&p, &g)).abs() < 1e-12);
        }

        #[test]
        fn angles_in_range(v in proptest::collection::vec(-1.0f64..1.0, 6..60)) {
            let n = v.len() / 3 * 3;
            let (a, b) = v[..n].split_at(n / 3 / 2 * 3);
            let m = a.len().min(b.len());
            if m > 0 && b[..m].chunks(3).any(|c| norm3(c) > 0.0) {
                let e = mean_angular_error(&a[..m], &b[..m]).unwrap();
                prop_assert!((0.0..=180.0).contains(&e));
            }
        }

        #[test]
        fn improving_lower_better_raises_delta(base in 0.5f64..2.0, gain in 0.01f64..0.4) {
            let single = MetricRecord::from_values(&[("depth", "rmse", base), ("semseg", "miou", 0.5)]).unwrap();
            let worse = MetricRecord::from_values(&[("depth", "rmse", base), ("semseg", "miou", 0.5)]).unwrap();
            let better = MetricRecord::from_values(&[("depth", "rmse", base - gain), ("semseg", "miou", 0.5)]).unwrap();
            prop_assert!(delta_m(&better, &single).unwrap() > delta_m(&worse, &single).unwrap());
        }
    }
}
