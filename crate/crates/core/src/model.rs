//! End-to-end model: toy multi-scale trunk, feature aggregation, one
//! deformable mixer branch per task, the task-aware decoder and per-task
//! prediction heads.
//!
//! Parameter names start with `trunk.`, `branch.<t>.`, `decoder.` or
//! `head.<t>.`, which is the partition ablations operate on.

use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Tape, Var};
use crate::decoder::{self, DecoderParams, InteractionParams, TaskInteracted};
use crate::error::{DemtError, Result};
use crate::mixer::{self, DeformableMixerParams, DeformedFeature, MixerShape, NormSettings};
use crate::nn::{self, ConvParams, Ctx, LinearParams, Mode, NormParams};
use crate::params::{Init, ParamStore};

/// Feature strides the trunk produces, finest first.
pub const STRIDES: [usize; 4] = [4, 8, 16, 32];

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TaskKind {
    Semseg,
    Depth,
    Normal,
}

impl TaskKind {
    pub fn as_str(self) -> &'static str {
        match self {
            TaskKind::Semseg => "semseg",
            TaskKind::Depth => "depth",
            TaskKind::Normal => "normal",
        }
    }

    pub fn metric_name(self) -> &'static str {
        match self {
            TaskKind::Semseg => "miou",
            TaskKind::Depth => "rmse",
            TaskKind::Normal => "mean_angular_error",
        }
    }

    pub fn direction(self) -> Direction {
        match self {
            TaskKind::Semseg => Direction::HigherBetter,
            TaskKind::Depth | TaskKind::Normal => Direction::LowerBetter,
        }
    }
}

impl FromStr for TaskKind {
    type Err = DemtError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "semseg" => Ok(TaskKind::Semseg),
            "depth" => Ok(TaskKind::Depth),
            "normal" => Ok(TaskKind::Normal),
            _ => Err(DemtError::Config(format!("unknown task kind {s:?}"))),
        }
    }
}

impl fmt::Display for TaskKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Direction {
    HigherBetter,
    LowerBetter,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TaskSpec {
    pub name: String,
    pub kind: TaskKind,
    pub out_channels: usize,
    pub loss_weight: f64,
}

impl TaskSpec {
    pub fn new(kind: TaskKind, num_classes: usize, loss_weight: f64) -> Result<Self> {
        let out_channels = match kind {
            TaskKind::Semseg => num_classes,
            TaskKind::Depth => 1,
            TaskKind::Normal => 3,
        };
        if out_channels == 0 {
            return Err(DemtError::Config("semseg needs at least one class".into()));
        }
        if !(loss_weight > 0.0 && loss_weight.is_finite()) {
            return Err(DemtError::Config(format!(
                "loss weight for {kind} must be positive, got {loss_weight}"
            )));
        }
        Ok(Self {
            name: kind.as_str().to_string(),
            kind,
            out_channels,
            loss_weight,
        })
    }

    pub fn direction(&self) -> Direction {
        self.kind.direction()
    }
}

/// Which decoder components feed the heads.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Variant {
    /// Heads directly on each task's deformed feature; no decoder.
    Dm,
    /// Heads on the task's own encoder output plus its slice of the interacted feature.
    DmTi,
    /// Interaction then task query (the full model).
    Full,
    /// One encoder branch shared by every task, heads on its output.
    Baseline,
}

impl Variant {
    pub fn as_str(self) -> &'static str {
        match self {
            Variant::Dm => "dm",
            Variant::DmTi => "dm+ti",
            Variant::Full => "dm+ti+tq",
            Variant::Baseline => "baseline",
        }
    }
}

impl FromStr for Variant {
    type Err = DemtError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "dm" => Ok(Variant::Dm),
            "dm+ti" => Ok(Variant::DmTi),
            "dm+ti+tq" | "full" => Ok(Variant::Full),
            "baseline" => Ok(Variant::Baseline),
            _ => Err(DemtError::Config(format!(
                "unknown model mode {s:?} (dm, dm+ti, dm+ti+tq, baseline)"
            ))),
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub tasks: Vec<TaskSpec>,
    /// `C′`, the width every branch reduces to.
    pub reduced_channels: usize,
    pub depth: usize,
    /// Sampling points per location in the deformable step.
    pub points: usize,
    pub heads: usize,
    /// Subset of [`STRIDES`]; must contain 4.
    pub scales: Vec<usize>,
    pub input_hw: (usize, usize),
    pub trunk_widths: [usize; 4],
    pub variant: Variant,
    pub seed: u64,
    pub ln_eps: f64,
    pub bn_eps: f64,
    pub bn_momentum: f64,
}

impl ModelConfig {
    /// `C`: channels of the aggregated multi-scale feature.
    pub fn aggregated_channels(&self) -> usize {
        aggregated_channels(&self.trunk_widths, &self.scales).unwrap_or(0)
    }

    pub fn norms(&self) -> NormSettings {
        NormSettings {
            ln_eps: self.ln_eps,
            bn_eps: self.bn_eps,
            bn_momentum: self.bn_momentum,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let (h, w) = self.input_hw;
        if h == 0 || w == 0 || h % 32 != 0 || w % 32 != 0 {
            return Err(DemtError::Config(format!(
                "input size {h}x{w} must be a positive multiple of 32"
            )));
        }
        if self.tasks.is_empty() {
            return Err(DemtError::Config("at least one task is required".into()));
        }
        for (i, t) in self.tasks.iter().enumerate() {
            if self.tasks[..i].iter().any(|o| o.name == t.name) {
                return Err(DemtError::Config(format!("task {} listed twice", t.name)));
            }
        }
        if self.trunk_widths.contains(&0) {
            return Err(DemtError::Config("trunk widths must be positive".into()));
        }
        aggregated_channels(&self.trunk_widths, &self.scales)?;
        if self.reduced_channels == 0 || self.depth == 0 {
            return Err(DemtError::Config(
                "reduced channels and depth must be positive".into(),
            ));
        }
        if self.heads == 0 || !self.reduced_channels.is_multiple_of(self.heads) {
            return Err(DemtError::Config(format!(
                "{} heads do not divide {} reduced channels",
                self.heads, self.reduced_channels
            )));
        }
        mixer::tap_side(self.points)?;
        Ok(())
    }
}

/// Sum of the widths of the selected strides.
pub fn aggregated_channels(widths: &[usize; 4], scales: &[usize]) -> Result<usize> {
    check_scales(scales)?;
    Ok(STRIDES
        .iter()
        .zip(widths)
        .filter(|(s, _)| scales.contains(s))
        .map(|(_, w)| w)
        .sum())
}

fn check_scales(scales: &[usize]) -> Result<()> {
    if scales.is_empty() {
        return Err(DemtError::Config("no feature scales selected".into()));
    }
    for s in scales {
        if !STRIDES.contains(s) {
            return Err(DemtError::Config(format!("unsupported feature stride {s}")));
        }
    }
    if !scales.contains(&4) {
        return Err(DemtError::Config(
            "the stride-4 scale must be selected".into(),
        ));
    }
    Ok(())
}

#[derive(Clone, Debug)]
pub struct TrunkStage {
    pub conv: ConvParams,
    pub bn: NormParams,
}

#[derive(Clone, Debug)]
pub struct TrunkParams {
    pub stem: [ConvParams; 2],
    /// Only the stages up to the coarsest selected stride are built.
    pub stages: Vec<TrunkStage>,
}

impl TrunkParams {
    pub fn new(
        store: &mut ParamStore,
        init: &mut Init<'_>,
        widths: &[usize; 4],
        stages: usize,
        norms: NormSettings,
    ) -> Result<Self> {
        let w0 = widths[0];
        let stem = [
            ConvParams::new(store, init, "trunk.stem0", 3, w0, 3, true, false)?,
            ConvParams::new(store, init, "trunk.stem1", w0, w0, 3, true, false)?,
        ];
        let mut out = Vec::with_capacity(stages);
        for s in 0..stages {
            let cin = if s == 0 { w0 } else { widths[s - 1] };
            let name = format!("trunk.stage{}", s + 1);
            out.push(TrunkStage {
                conv: ConvParams::new(
                    store,
                    init,
                    &format!("{name}.conv"),
                    cin,
                    widths[s],
                    3,
                    true,
                    false,
                )?,
                bn: NormParams::batch(
                    store,
                    &format!("{name}.bn"),
                    widths[s],
                    norms.bn_eps,
                    norms.bn_momentum,
                )?,
            });
        }
        Ok(Self { stem, stages: out })
    }
}

/// Image `[B,H,W,3]` to feature maps at strides 4, 8, ... (as many as built).
pub fn trunk_forward(cx: &mut Ctx<'_>, p: &TrunkParams, image: Var) -> Result<Vec<Var>> {
    let s = cx.tape.shape(image).to_vec();
    if s.len() != 4 || s[3] != 3 {
        return Err(DemtError::shape(
            "trunk",
            format!("image is {s:?}, expected [B,H,W,3]"),
        ));
    }
    if !s[1].is_multiple_of(32) || !s[2].is_multiple_of(32) {
        return Err(DemtError::InvalidArgument(format!(
            "input {}x{} must be divisible by 32",
            s[1], s[2]
        )));
    }
    let mut x = image;
    for conv in &p.stem {
        let y = nn::conv2d(cx, conv, x)?;
        x = cx.tape.gelu(y);
    }
    x = cx.tape.avg_pool(x, 4)?;
    let mut maps = Vec::with_capacity(p.stages.len());
    for (i, stage) in p.stages.iter().enumerate() {
        let y = nn::conv2d(cx, &stage.conv, x)?;
        let y = cx.tape.gelu(y);
        let y = nn::batch_norm(cx, &stage.bn, y)?;
        x = if i == 0 { y } else { cx.tape.avg_pool(y, 2)? };
        maps.push(x);
    }
    Ok(maps)
}

/// Upsamples each selected stage to the stride-4 grid and concatenates the
/// channels in stride order.
pub fn aggregate_features(tape: &mut Tape, stages: &[Var], scales: &[usize]) -> Result<Var> {
    check_scales(scales)?;
    let Some(&finest) = stages.first() else {
        return Err(DemtError::InvalidArgument("no trunk stages".into()));
    };
    let (h, w) = (tape.shape(finest)[1], tape.shape(finest)[2]);
    let mut parts = Vec::new();
    for (i, stride) in STRIDES.iter().enumerate() {
        if !scales.contains(stride) {
            continue;
        }
        let map = *stages.get(i).ok_or_else(|| {
            DemtError::InvalidArgument(format!("stride {stride} requested but not computed"))
        })?;
        parts.push(if i == 0 {
            map
        } else {
            tape.upsample_bilinear(map, h, w)?
        });
    }
    if parts.len() == 1 {
        Ok(parts[0])
    } else {
        tape.concat(&parts, 3)
    }
}

#[derive(Clone, Debug)]
pub struct HeadParams {
    pub proj: LinearParams,
    pub kind: TaskKind,
}

impl HeadParams {
    pub fn new(
        store: &mut ParamStore,
        init: &mut Init<'_>,
        index: usize,
        spec: &TaskSpec,
        channels: usize,
    ) -> Result<Self> {
        Ok(Self {
            proj: LinearParams::new(
                store,
                init,
                &format!("head.{index}.proj"),
                channels,
                spec.out_channels,
                true,
            )?,
            kind: spec.kind,
        })
    }
}

/// Pointwise projection, ×4 bilinear upsampling, unit normals for the normal task.
pub fn head_forward(cx: &mut Ctx<'_>, p: &HeadParams, feat: Var) -> Result<Var> {
    let s = cx.tape.shape(feat).to_vec();
    if s.len() != 4 {
        return Err(DemtError::shape(
            "head",
            format!("feature is {s:?}, expected [B,h,w,C′]"),
        ));
    }
    let y = nn::linear(cx, &p.proj, feat)?;
    let y = cx.tape.upsample_bilinear(y, s[1] * 4, s[2] * 4)?;
    if p.kind == TaskKind::Normal {
        cx.tape.l2_normalize(y)
    } else {
        Ok(y)
    }
}

#[derive(Clone, Debug)]
pub enum DecoderPart {
    None,
    Interaction(Box<InteractionParams>),
    Full(Box<DecoderParams>),
}

/// Intermediate results of one forward pass.
pub struct ForwardOutput {
    /// Full-resolution prediction per task, in task order.
    pub predictions: Vec<Var>,
    pub aggregated: Var,
    pub deformed: Vec<DeformedFeature>,
    pub interacted: Option<TaskInteracted>,
    /// Maps fed to the heads.
    pub head_inputs: Vec<Var>,
}

#[derive(Clone, Debug)]
pub struct Demt {
    pub config: ModelConfig,
    pub store: ParamStore,
    pub trunk: TrunkParams,
    pub branches: Vec<DeformableMixerParams>,
    pub decoder: DecoderPart,
    pub heads: Vec<HeadParams>,
}

impl Demt {
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut init = Init { rng: &mut rng };
        let mut store = ParamStore::new();
        let norms = config.norms();
        let stages = STRIDES
            .iter()
            .rposition(|s| config.scales.contains(s))
            .expect("validated scales")
            + 1;
        let trunk = TrunkParams::new(&mut store, &mut init, &config.trunk_widths, stages, norms)?;
        let shape = MixerShape {
            in_channels: config.aggregated_channels(),
            channels: config.reduced_channels,
            depth: config.depth,
            points: config.points,
        };
        let branch_count = if config.variant == Variant::Baseline {
            1
        } else {
            config.tasks.len()
        };
        let mut branches = Vec::with_capacity(branch_count);
        for t in 0..branch_count {
            branches.push(DeformableMixerParams::new(
                &mut store,
                &mut init,
                &format!("branch.{t}"),
                shape,
                norms,
            )?);
        }
        let (c, h) = (config.reduced_channels, config.heads);
        let decoder = match config.variant {
            Variant::Dm | Variant::Baseline => DecoderPart::None,
            Variant::DmTi => DecoderPart::Interaction(Box::new(InteractionParams::new(
                &mut store, &mut init, "decoder", c, h, norms,
            )?)),
            Variant::Full => DecoderPart::Full(Box::new(DecoderParams::new(
                &mut store, &mut init, "decoder", c, h, norms,
            )?)),
        };
        let mut heads = Vec::with_capacity(config.tasks.len());
        for (t, spec) in config.tasks.iter().enumerate() {
            heads.push(HeadParams::new(&mut store, &mut init, t, spec, c)?);
        }
        Ok(Self {
            config,
            store,
            trunk,
            branches,
            decoder,
            heads,
        })
    }

    /// Records a full forward pass on `tape`. In [`Mode::Train`] batch-norm
    /// running statistics are updated.
    pub fn forward(&mut self, tape: &mut Tape, image: Var, mode: Mode) -> Result<ForwardOutput> {
        let mut store = std::mem::take(&mut self.store);
        let out = {
            let mut cx = Ctx::new(tape, &mut store, mode);
            self.forward_with(&mut cx, image)
        };
        self.store = store;
        out
    }

    /// Forward pass reading parameters from `cx`'s store, which must share
    /// this model's layout (a clone of `self.store`, say).
    pub fn forward_with(&self, cx: &mut Ctx<'_>, image: Var) -> Result<ForwardOutput> {
        let s = cx.tape.shape(image).to_vec();
        if s.len() != 4 || (s[1], s[2]) != self.config.input_hw {
            return Err(DemtError::shape(
                "model",
                format!(
                    "image {s:?} for configured input {:?}",
                    self.config.input_hw
                ),
            ));
        }
        let Self {
            config,
            trunk,
            branches,
            decoder,
            heads,
            ..
        } = self;
        let stages = trunk_forward(cx, trunk, image)?;
        let aggregated = aggregate_features(cx.tape, &stages, &config.scales)?;
        let mut deformed = Vec::with_capacity(branches.len());
        for branch in branches.iter() {
            deformed.push(mixer::deformable_mixer_forward(cx, branch, aggregated)?);
        }
        let to_map = |tape: &mut Tape, f: &DeformedFeature| -> Result<Var> {
            let s = tape.shape(f.tokens).to_vec();
            tape.reshape(f.tokens, &[s[0], f.spatial.0, f.spatial.1, s[2]])
        };
        let (interacted, head_inputs) = match decoder {
            DecoderPart::None => {
                let mut maps = Vec::with_capacity(heads.len());
                for t in 0..heads.len() {
                    let f = &deformed[t.min(deformed.len() - 1)];
                    maps.push(to_map(cx.tape, f)?);
                }
                (None, maps)
            }
            DecoderPart::Interaction(p) => {
                let inter = decoder::task_interaction(cx, p, &deformed)?;
                let mut maps = Vec::with_capacity(heads.len());
                for (t, f) in deformed.iter().enumerate().take(heads.len()) {
                    // Without the query block the encoder output still reaches
                    // the head through the same residual path.
                    let slice = decoder::interacted_slice(cx.tape, &inter, t, f.spatial)?;
                    let own = to_map(cx.tape, f)?;
                    maps.push(cx.tape.add(own, slice)?);
                }
                (Some(inter), maps)
            }
            DecoderPart::Full(p) => {
                let (inter, aware) = decoder::decoder_forward(cx, p, &deformed)?;
                (Some(inter), aware.into_iter().map(|a| a.map).collect())
            }
        };
        let mut predictions = Vec::with_capacity(heads.len());
        for (head, &feat) in heads.iter().zip(&head_inputs) {
            predictions.push(head_forward(cx, head, feat)?);
        }
        Ok(ForwardOutput {
            predictions,
            aggregated,
            deformed,
            interacted,
            head_inputs,
        })
    }

    pub fn task_index(&self, name: &str) -> Option<usize> {
        self.config.tasks.iter().position(|t| t.name == name)
    }
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use crate::tensor::Tensor;
    use rand::Rng;

    pub(crate) fn tiny_config(variant: Variant, tasks: &[TaskKind]) -> ModelConfig {
        ModelConfig {
            tasks: tasks
                .iter()
                .map(|&k| TaskSpec::new(k, 4, 1.0).unwrap())
                .collect(),
            reduced_channels: 4,
            depth: 1,
            points: 9,
            heads: 2,
            scales: vec![4, 8],
            input_hw: (32, 32),
            trunk_widths: [3, 4, 5, 6],
            variant,
            seed: 11,
            ln_eps: 1e-5,
            bn_eps: 1e-5,
            bn_momentum: 0.1,
        }
    }

    pub(crate) fn random_image(b: usize, h: usize, w: usize, seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::new(
            &[b, h, w, 3],
            (0..b * h * w * 3).map(|_| rng.gen::<f64>()).collect(),
        )
        .unwrap()
    }

    #[test]
    fn trunk_shapes() {
        let mut cfg = tiny_config(Variant::Dm, &[TaskKind::Depth]);
        cfg.input_hw = (64, 64);
        cfg.trunk_widths = [8, 16, 24, 32];
        cfg.scales = vec![4, 8, 16, 32];
        let mut m = Demt::new(cfg).unwrap();
        let mut tape = Tape::new();
        let x = tape.constant(&random_image(1, 64, 64, 1));
        let mut cx = Ctx::new(&mut tape, &mut m.store, Mode::Train);
        let maps = trunk_forward(&mut cx, &m.trunk, x).unwrap();
        let shapes: Vec<_> = maps.iter().map(|&v| tape.shape(v).to_vec()).collect();
        assert_eq!(
            shapes,
            vec![
                vec![1, 16, 16, 8],
                vec![1, 8, 8, 16],
                vec![1, 4, 4, 24],
                vec![1, 2, 2, 32]
            ]
        );
        let agg = aggregate_features(&mut tape, &maps, &[4, 8, 16, 32]).unwrap();
        assert_eq!(tape.shape(agg), &[1, 16, 16, 80]);
        let fine = aggregate_features(&mut tape, &maps, &[4]).unwrap();
        assert_eq!(fine, maps[0]);
        let pair = aggregate_features(&mut tape, &maps, &[4, 8]).unwrap();
        assert_eq!(tape.shape(pair), &[1, 16, 16, 24]);
        assert!(aggregate_features(&mut tape, &maps, &[]).is_err());
        assert!(aggregate_features(&mut tape, &maps, &[8]).is_err());
    }

    #[test]
    fn input_must_be_divisible_by_32() {
        let mut cfg = tiny_config(Variant::Dm, &[TaskKind::Depth]);
        cfg.input_hw = (48, 32);
        assert!(Demt::new(cfg).is_err());
    }

    #[test]
    fn predictions_per_task() {
        let kinds = [TaskKind::Semseg, TaskKind::Depth, TaskKind::Normal];
        for variant in [Variant::Dm, Variant::DmTi, Variant::Full, Variant::Baseline] {
            let mut m = Demt::new(tiny_config(variant, &kinds)).unwrap();
            let mut tape = Tape::new();
            let x = tape.constant(&random_image(2, 32, 32, 5));
            let out = m.forward(&mut tape, x, Mode::Train).unwrap();
            assert_eq!(out.predictions.len(), 3);
            assert_eq!(tape.shape(out.predictions[0]), &[2, 32, 32, 4]);
            assert_eq!(tape.shape(out.predictions[1]), &[2, 32, 32, 1]);
            assert_eq!(tape.shape(out.predictions[2]), &[2, 32, 32, 3]);
            for px in tape.value(out.predictions[2]).chunks(3) {
                let n: f64 = px.iter().map(|v| v * v).sum::<f64>().sqrt();
                assert!((n - 1.0).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn parameter_partition() {
        let m = Demt::new(tiny_config(
            Variant::Full,
            &[TaskKind::Semseg, TaskKind::Depth],
        ))
        .unwrap();
        let groups = m.store.groups();
        assert_eq!(
            groups,
            vec!["branch.0", "branch.1", "decoder", "head.0", "head.1", "trunk"]
        );
        let dm = Demt::new(tiny_config(
            Variant::Dm,
            &[TaskKind::Semseg, TaskKind::Depth],
        ))
        .unwrap();
        assert!(!dm.store.groups().contains(&"decoder".to_string()));
    }

    #[test]
    fn eval_forward_is_deterministic() {
        let mut m = Demt::new(tiny_config(
            Variant::Full,
            &[TaskKind::Semseg, TaskKind::Normal],
        ))
        .unwrap();
        let img = random_image(1, 32, 32, 9);
        let run = |m: &mut Demt| {
            let mut tape = Tape::new();
            let x = tape.constant(&img);
            let out = m.forward(&mut tape, x, Mode::Eval).unwrap();
            out.predictions
                .iter()
                .map(|&p| tape.value(p).to_vec())
                .collect::<Vec<_>>()
        };
        assert_eq!(run(&mut m), run(&mut m));
    }
}
