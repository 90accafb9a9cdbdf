//! Catalogue of gradient checks: every primitive op on random instances,
//! then the composite modules and the end-to-end model.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{check_function, check_module, ModuleCheckOptions};
use crate::autodiff::{Fault, Tape, Var, IGNORE_LABEL};
use crate::decoder::{self, AttentionParams, DecoderParams, SmlpParams};
use crate::error::Result;
use crate::loss::{model_loss, Targets};
use crate::mixer::{self, DeformableMixerParams, DeformedFeature, MixerShape, NormSettings};
use crate::model::{self, Demt, HeadParams, ModelConfig, TaskKind, TaskSpec, Variant};
use crate::nn::{self, Ctx, Mode};
use crate::params::{Init, ParamStore};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug)]
pub struct SuiteOptions {
    pub seed: u64,
    pub eps: f64,
    pub fault: Option<Fault>,
    /// Random instances per primitive op.
    pub instances: usize,
}

impl Default for SuiteOptions {
    fn default() -> Self {
        Self {
            seed: 0,
            eps: 1e-5,
            fault: None,
            instances: 20,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CheckResult {
    pub name: &'static str,
    pub instances: usize,
    /// Worst error over all instances.
    pub worst: f64,
}

impl CheckResult {
    pub fn passed(&self, tolerance: f64) -> bool {
        self.worst.is_finite() && self.worst <= tolerance
    }
}

type Instance = fn(&mut ChaCha8Rng, &SuiteOptions, u64) -> Result<f64>;

struct Case {
    name: &'static str,
    /// `None` uses [`SuiteOptions::instances`].
    instances: Option<usize>,
    run: Instance,
}

const fn op(name: &'static str, run: Instance) -> Case {
    Case {
        name,
        instances: None,
        run,
    }
}

const fn composite(name: &'static str, instances: usize, run: Instance) -> Case {
    Case {
        name,
        instances: Some(instances),
        run,
    }
}

fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.gen_range(lo..hi)).collect()).expect("shape")
}

/// Keeps sampling positions off integer pixel coordinates, where bilinear
/// interpolation has kinks that finite differences cannot resolve.
fn off_grid(v: f64) -> f64 {
    let f = v - v.floor();
    if f < 0.02 {
        v + 0.05
    } else if f > 0.98 {
        v - 0.05
    } else {
        v
    }
}

fn unary(
    inputs: &[Tensor],
    o: &SuiteOptions,
    seed: u64,
    f: fn(&mut Tape, Var) -> Result<Var>,
) -> Result<f64> {
    check_function(inputs, |t, v| f(t, v[0]), o.eps, seed, o.fault)
}

fn binary(
    inputs: &[Tensor],
    o: &SuiteOptions,
    seed: u64,
    f: fn(&mut Tape, Var, Var) -> Result<Var>,
) -> Result<f64> {
    check_function(inputs, |t, v| f(t, v[0], v[1]), o.eps, seed, o.fault)
}

fn module_opts(o: &SuiteOptions, seed: u64, per_tensor: Option<usize>) -> ModuleCheckOptions {
    ModuleCheckOptions {
        eps: o.eps,
        seed,
        fault: o.fault,
        mode: Mode::Train,
        per_tensor,
        check_inputs: true,
    }
}

/// Randomises every offset-predicting conv so sampling leaves the regular grid.
fn scramble_offsets(store: &mut ParamStore, rng: &mut ChaCha8Rng, bound: f64) {
    let ids: Vec<_> = store
        .iter()
        .filter(|(_, p)| p.name.contains(".offset."))
        .map(|(id, _)| id)
        .collect();
    for id in ids {
        for v in store.get_mut(id).value.data_mut() {
            *v = rng.gen_range(-bound..bound);
        }
    }
}

fn case_matmul(r: &mut ChaCha8Rng, o: &SuiteOptions, s: u64) -> Result<f64> {
    let ins = [
        rand_tensor(r, &[3, 4], -1.0, 1.0),
        rand_tensor(r, &[4, 2], -1.0, 1.0),
    ];
    binary(&ins, o, s, |t, a, b| t.matmul(a, b))
}

fn case_add(r: &mut ChaCha8Rng, o: &SuiteOptions, s: u64) -> Result<f64> {
    let ins = [
        rand_tensor(r, &[2, 3], -1.0, 1.0),
        rand_tensor(r, &[2, 3], -1.0, 1.0),
    ];
    binary(&ins, o, s, |t, a, b| t.add(a, b))
}

fn case_sub(r: &mut ChaCha8Rng, o: &SuiteOptions, s: u64) -> Result<f64> {
    let ins = [
        rand_tensor(r, &[2, 3], -1.0, 1.0),
        rand_tensor(r, &[2, 3], -1.0, 1.0),
    ];
    binary(&ins, o, s, |t, a, b| t.sub(a, b))
}

fn case_mul(r: &mut ChaCha8Rng, o: &SuiteOptions, s: u64) -> Result<f64> {
    let ins = [
        rand_tensor(r, &[2, 3], -1.0, 1.0),
        rand_tensor(r, &[2, 3], -1.0, 1.0),
    ];
    binary(&ins, o, s, |t, a, b| t.mul(a, b))
}

fn case_scale(r: &mut ChaCha8Rng, o: &SuiteOptions, s: u64) -> Result<f64> {
    let ins = [rand_tensor(r, &[2, 3], -1.0, 1.0)];
    unary(&ins, o, s, |t, a| Ok(t.scale(a, -2.5)))
}

fn case_reshape(r: &mut ChaCha8Rng, o: &SuiteOptions, s: u64) -> Result<f64> {
    let ins = [rand_tensor(r, &[2, 6], -1.0, 1.0)];
    unary(&ins, o, s, |t, a| t.reshape(a, &[3, 4]))
}

fn case_expand(r: &mut ChaCha8Rng, o: &SuiteOptions, s: u64) -> Result<f64> {
    let ins = [rand_tensor(r, &[1, 3], -1.0, 1.0)];
    unary(&ins, o, s, |t, a| t.expand(a, &[4, 3]))
}

fn case_transpose(r: &mut ChaCha8Rng, o: &SuiteOptions, s: u64) -> Result<f64> {
    let ins = [rand_tensor(r, &[3, 4], -1.0, 1.0)];
    unary(&ins, o, s, |t, a| t.transpose(a))
}

fn case_narrow(r: &mut ChaCha8Rng, o: &SuiteOptions, s: u64) -> Result<f64> {
    let ins = [rand_tensor(r, &[4, 5], -1.0, 1.0)];
    unary(&ins, o, s, |t, a| t.narrow(a, 1, 1, 3))
}

fn case_concat(r: &mut ChaCha8Rng, o: &SuiteOptions, s: u64) -> Result<f64> {
    let ins = [
        rand_tensor(r, &[2, 3], -1.0, 1.0),
        rand_tensor(r, &[2, 2], -1.0, 1.0),
    ];
    binary(&ins, o, s, |t, a, b| t.concat(&[a, b], 1))
}

fn case_sum(r: &mut ChaCha8Rng, o: &SuiteOptions, s: u64) -> Result<f64> {
    let ins = [rand_tensor(r, &[3, 4], -1.0, 1.0)];
    unary(&ins, o, s, |t, a| Ok(t.sum(a)))
}

fn case_mean(r: &mut ChaCha8Rng, o: &SuiteOptions, s: u64) -> Result<f64> {
    let ins = [rand_tensor(r, &[3, 4], -1.0, 1.0)];
    unary(&ins, o, s, |t, a| Ok(t.mean(a)))
}

fn case_softmax(r: &mut ChaCha8Rng, o: &SuiteOptions, s: u64) -> Result<f64> {
    let ins = [rand_tensor(r, &[3, 5], -2.0, 2.0)];
    let last = unary(&ins, o, s, |t, a| t.softmax(a, 1))?;
    let first = unary(&ins, o, s, |t, a| t.softmax(a, 0))?;
    Ok(last.max(first))
}

fn case_gelu(r: &mut ChaCha8Rng, o: &SuiteOptions, s: u64) -> Result<f64> {
    let ins = [rand_tensor(r, &[3, 4], -3.0, 3.0)];
    unary(&ins, o, s, |t, a| Ok(t.gelu(a)))
}

fn case_linear(r: &mut ChaCha8Rng, o: &SuiteOptions, s: u64) -> Result<f64> {
    let ins = [
        rand_tensor(r, &[2, 3, 4], -1.0, 1.0),
        rand_tensor(r, &[5, 4], -1.0, 1.0),
        rand_tensor(r, &[5], -1.0, 1.0),
    ];
    check_function(
        &ins,
        |t, v| t.linear(v[0], v[1], Some(v[2])),
        o.eps,
        s,
        o.fault,
    )
}

fn case_layer_norm(r: &mut ChaCha8Rng, o: &SuiteOptions, s: u64) -> Result<f64> {
    let ins = [
        rand_tensor(r, &[3, 6], -2.0, 2.0),
        rand_tensor(r, &[6], 0.5, 1.5),
        rand_tensor(r, &[6], -0.5, 0.5),
    ];
    check_function(
        &ins,
        |t, v| t.layer_norm(v[0], v[1], v[2], 1e-5),
        o.eps,
        s,
        o.fault,
    )
}

fn case_batch_norm_train(r: &mut ChaCha8Rng, o: &SuiteOptions, s: u64) -> Result<f64> {
    let ins = [
        rand_tensor(r, &[2, 3, 3, 4], -2.0, 2.0),
        rand_tensor(r, &[4], 0.5, 1.5),
        rand_tensor(r, &[4], -0.5, 0.5),
    ];
    check_function(
        &ins,
        |t, v| Ok(t.batch_norm_train(v[0], v[1], v[2], 1e-5)?.0),
        o.eps,
        s,
        o.fault,
    )
}

fn case_batch_norm_eval(r: &mut ChaCha8Rng, o: &SuiteOptions, s: u64) -> Result<f64> {
    let ins = [
        rand_tensor(r, &[2, 3, 3, 4], -2.0, 2.0),
        rand_tensor(r, &[4], 0.5, 1.5),
        rand_tensor(r, &[4], -0.5, 0.5),
    ];
    let mean: Vec<f64> = (0..4).map(|_| r.gen_range(-0.5..0.5)).collect();
    let var: Vec<f64> = (0..4).map(|_| r.gen_range(0.5..2.0)).collect();
    check_function(
        &ins,
        |t, v| t.batch_norm_eval(v[0], v[1], v[2], &mean, &var, 1e-5),
        o.eps,
        s,
        o.fault,
    )
}

fn case_conv(r: &mut ChaCha8Rng, o: &SuiteOptions, s: u64, k: usize) -> Result<f64> {
    let ins = [
        rand_tensor(r, &[1, 5, 4, 2], -1.0, 1.0),
        rand_tensor(r, &[3, k, k, 2], -1.0, 1.0),
        rand_tensor(r, &[3], -1.0, 1.0),
    ];
    check_function(
        &ins,
        |t, v| t.conv2d(v[0], v[1], Some(v[2])),
        o.eps,
        s,
        o.fault,
    )
}

fn case_conv1(r: &mut ChaCha8Rng, o: &SuiteOptions, s: u64) -> Result<f64> {
    case_conv(r, o, s, 1)
}

fn case_conv3(r: &mut ChaCha8Rng, o: &SuiteOptions, s: u64) -> Result<f64> {
    case_conv(r, o, s, 3)
}

fn case_pointwise(r: &mut ChaCha8Rng, o: &SuiteOptions, s: u64) -> Result<f64> {
    let ins = [
        rand_tensor(r, &[1, 3, 3, 4], -1.0, 1.0),
        rand_tensor(r, &[4, 4], -1.0, 1.0),
        rand_tensor(r, &[4], -1.0, 1.0),
    ];
    check_function(
        &ins,
        |t, v| nn::pointwise_conv(t, v[0], v[1], v[2]),
        o.eps,
        s,
        o.fault,
    )
}

fn case_bilinear(r: &mut ChaCha8Rng, o: &SuiteOptions, s: u64) -> Result<f64> {
    let x = rand_tensor(r, &[1, 4, 4, 2], -1.0, 1.0);
    let coords = rand_tensor(r, &[1, 3, 3, 2, 2], -1.3, 4.3).map(off_grid);
    check_function(
        &[x, coords],
        |t, v| t.bilinear_sample(v[0], v[1]),
        o.eps,
        s,
        o.fault,
    )
}

fn case_upsample(r: &mut ChaCha8Rng, o: &SuiteOptions, s: u64) -> Result<f64> {
    let ins = [rand_tensor(r, &[1, 3, 3, 2], -1.0, 1.0)];
    unary(&ins, o, s, |t, a| t.upsample_bilinear(a, 6, 7))
}

fn case_avg_pool(r: &mut ChaCha8Rng, o: &SuiteOptions, s: u64) -> Result<f64> {
    let ins = [rand_tensor(r, &[1, 4, 4, 2], -1.0, 1.0)];
    unary(&ins, o, s, |t, a| t.avg_pool(a, 2))
}

fn case_l2_normalize(r: &mut ChaCha8Rng, o: &SuiteOptions, s: u64) -> Result<f64> {
    let ins = [rand_tensor(r, &[3, 4], -1.0, 1.0)];
    unary(&ins, o, s, |t, a| t.l2_normalize(a))
}

fn case_attention(r: &mut ChaCha8Rng, o: &SuiteOptions, s: u64) -> Result<f64> {
    let ins = [
        rand_tensor(r, &[4, 4], -1.0, 1.0),
        rand_tensor(r, &[6, 4], -1.0, 1.0),
        rand_tensor(r, &[6, 3], -1.0, 1.0),
    ];
    check_function(
        &ins,
        |t, v| t.attention(v[0], v[1], v[2], 3),
        o.eps,
        s,
        o.fault,
    )
}

fn case_cross_entropy(r: &mut ChaCha8Rng, o: &SuiteOptions, s: u64) -> Result<f64> {
    let ins = [rand_tensor(r, &[1, 2, 3, 4], -2.0, 2.0)];
    let labels: Vec<u16> = (0..6)
        .map(|i| {
            if i == 2 {
                IGNORE_LABEL
            } else {
                r.gen_range(0..4)
            }
        })
        .collect();
    check_function(
        &ins,
        |t, v| t.cross_entropy(v[0], &labels),
        o.eps,
        s,
        o.fault,
    )
}

fn case_masked_l1(r: &mut ChaCha8Rng, o: &SuiteOptions, s: u64) -> Result<f64> {
    let ins = [rand_tensor(r, &[1, 2, 3, 1], 0.0, 2.0)];
    // Targets sit at least 0.05 from the predictions so no residual crosses zero.
    let target: Vec<f64> = ins[0]
        .data()
        .iter()
        .enumerate()
        .map(|(i, p)| {
            if i == 4 {
                0.0
            } else {
                let d = r.gen_range(0.05..1.0);
                if r.gen_bool(0.5) {
                    p + d
                } else {
                    p - d
                }
            }
        })
        .collect();
    check_function(&ins, |t, v| t.masked_l1(v[0], &target), o.eps, s, o.fault)
}

fn case_cosine(r: &mut ChaCha8Rng, o: &SuiteOptions, s: u64) -> Result<f64> {
    let ins = [rand_tensor(r, &[1, 2, 2, 3], -1.0, 1.0)];
    let mut target = rand_tensor(r, &[1, 2, 2, 3], -1.0, 1.0).into_data();
    target[3..6].iter_mut().for_each(|v| *v = 0.0);
    check_function(&ins, |t, v| t.cosine_loss(v[0], &target), o.eps, s, o.fault)
}

fn case_mhsa(r: &mut ChaCha8Rng, o: &SuiteOptions, s: u64) -> Result<f64> {
    let mut store = ParamStore::new();
    let p = AttentionParams::new(&mut store, &mut Init { rng: r }, "attn", 4, 2)?;
    let ins = [
        rand_tensor(r, &[3, 4], -1.0, 1.0),
        rand_tensor(r, &[6, 4], -1.0, 1.0),
        rand_tensor(r, &[6, 4], -1.0, 1.0),
    ];
    let build = |cx: &mut Ctx<'_>, v: &[Var]| Ok(decoder::mhsa(cx, &p, v[0], v[1], v[2], 3)?.out);
    Ok(check_module(&store, &ins, build, module_opts(o, s, None))?.worst)
}

fn case_smlp(r: &mut ChaCha8Rng, o: &SuiteOptions, s: u64) -> Result<f64> {
    let mut store = ParamStore::new();
    let p = SmlpParams::new(&mut store, &mut Init { rng: r }, "smlp", 4, 1e-5)?;
    let ins = [rand_tensor(r, &[5, 4], -1.0, 1.0)];
    let build = |cx: &mut Ctx<'_>, v: &[Var]| decoder::smlp(cx, &p, v[0]);
    Ok(check_module(&store, &ins, build, module_opts(o, s, None))?.worst)
}

fn case_mixer(r: &mut ChaCha8Rng, o: &SuiteOptions, s: u64) -> Result<f64> {
    let mut store = ParamStore::new();
    let shape = MixerShape {
        in_channels: 12,
        channels: 6,
        depth: 1,
        points: 9,
    };
    let p = DeformableMixerParams::new(
        &mut store,
        &mut Init { rng: r },
        "branch.0",
        shape,
        NormSettings::default(),
    )?;
    scramble_offsets(&mut store, r, 0.3);
    let ins = [rand_tensor(r, &[1, 8, 8, 12], -1.0, 1.0)];
    let build =
        |cx: &mut Ctx<'_>, v: &[Var]| Ok(mixer::deformable_mixer_forward(cx, &p, v[0])?.tokens);
    Ok(check_module(&store, &ins, build, module_opts(o, s, Some(12)))?.worst)
}

fn case_decoder(r: &mut ChaCha8Rng, o: &SuiteOptions, s: u64) -> Result<f64> {
    let mut store = ParamStore::new();
    let p = DecoderParams::new(
        &mut store,
        &mut Init { rng: r },
        "decoder",
        4,
        2,
        NormSettings::default(),
    )?;
    let ins = [
        rand_tensor(r, &[1, 9, 4], -1.0, 1.0),
        rand_tensor(r, &[1, 9, 4], -1.0, 1.0),
    ];
    let build = |cx: &mut Ctx<'_>, v: &[Var]| {
        let features: Vec<DeformedFeature> = v
            .iter()
            .map(|&tokens| DeformedFeature {
                tokens,
                spatial: (3, 3),
            })
            .collect();
        let (_, aware) = decoder::decoder_forward(cx, &p, &features)?;
        cx.tape.concat(&[aware[0].map, aware[1].map], 3)
    };
    Ok(check_module(&store, &ins, build, module_opts(o, s, None))?.worst)
}

fn case_head(r: &mut ChaCha8Rng, o: &SuiteOptions, s: u64) -> Result<f64> {
    let mut worst = 0.0f64;
    for kind in [TaskKind::Semseg, TaskKind::Depth, TaskKind::Normal] {
        let mut store = ParamStore::new();
        let spec = TaskSpec::new(kind, 3, 1.0)?;
        let p = HeadParams::new(&mut store, &mut Init { rng: r }, 0, &spec, 4)?;
        let ins = [rand_tensor(r, &[1, 2, 2, 4], -1.0, 1.0)];
        let build = |cx: &mut Ctx<'_>, v: &[Var]| model::head_forward(cx, &p, v[0]);
        worst = worst.max(check_module(&store, &ins, build, module_opts(o, s, None))?.worst);
    }
    Ok(worst)
}

/// Smallest configuration exercising every model stage: two tasks, the full
/// decoder and two trunk scales.
pub fn check_model_config(seed: u64) -> Result<ModelConfig> {
    Ok(ModelConfig {
        tasks: vec![
            TaskSpec::new(TaskKind::Semseg, 3, 1.0)?,
            TaskSpec::new(TaskKind::Normal, 3, 1.0)?,
        ],
        reduced_channels: 4,
        depth: 1,
        points: 9,
        heads: 2,
        scales: vec![4, 8],
        input_hw: (32, 32),
        trunk_widths: [4, 4, 4, 4],
        variant: Variant::Full,
        seed,
        ln_eps: 1e-5,
        bn_eps: 1e-5,
        bn_momentum: 0.1,
    })
}

fn case_model(r: &mut ChaCha8Rng, o: &SuiteOptions, s: u64) -> Result<f64> {
    model_check(r, o, s, check_model_config(s)?, 2)
}

fn model_check(
    r: &mut ChaCha8Rng,
    o: &SuiteOptions,
    s: u64,
    cfg: ModelConfig,
    b: usize,
) -> Result<f64> {
    let mut m = Demt::new(cfg)?;
    scramble_offsets(&mut m.store, r, 0.3);
    let (h, w) = m.config.input_hw;
    let image = rand_tensor(r, &[b, h, w, 3], 0.0, 1.0);
    let n = b * h * w;
    let semseg: Vec<u16> = (0..n).map(|_| r.gen_range(0..3)).collect();
    let normal = rand_tensor(r, &[n, 3], -1.0, 1.0).into_data();
    let depth = vec![0.0; n];
    let targets = Targets {
        semseg: &semseg,
        depth: &depth,
        normal: &normal,
    };
    let specs = m.config.tasks.clone();
    let build = |cx: &mut Ctx<'_>, v: &[Var]| {
        let out = m.forward_with(cx, v[0])?;
        Ok(model_loss(cx.tape, &specs, &out.predictions, &targets)?.0)
    };
    let mut opts = module_opts(o, s, Some(4));
    opts.check_inputs = false;
    Ok(check_module(&m.store, &[image], build, opts)?.worst)
}

fn catalogue() -> Vec<Case> {
    vec![
        op("matmul", case_matmul),
        op("add", case_add),
        op("sub", case_sub),
        op("mul", case_mul),
        op("scale", case_scale),
        op("reshape", case_reshape),
        op("expand", case_expand),
        op("transpose", case_transpose),
        op("narrow", case_narrow),
        op("concat", case_concat),
        op("sum", case_sum),
        op("mean", case_mean),
        op("softmax", case_softmax),
        op("gelu", case_gelu),
        op("linear", case_linear),
        op("layer_norm", case_layer_norm),
        op("batch_norm_train", case_batch_norm_train),
        op("batch_norm_eval", case_batch_norm_eval),
        op("conv2d_1x1", case_conv1),
        op("conv2d_3x3", case_conv3),
        op("pointwise_conv", case_pointwise),
        op("bilinear_sample", case_bilinear),
        op("upsample_bilinear", case_upsample),
        op("avg_pool", case_avg_pool),
        op("l2_normalize", case_l2_normalize),
        op("attention", case_attention),
        op("cross_entropy", case_cross_entropy),
        op("masked_l1", case_masked_l1),
        op("cosine_loss", case_cosine),
        composite("mhsa", 5, case_mhsa),
        composite("smlp", 5, case_smlp),
        composite("deformable_mixer", 2, case_mixer),
        composite("decoder", 2, case_decoder),
        composite("heads", 2, case_head),
        composite("model", 3, case_model),
    ]
}

/// Runs every check; `only` restricts the run to names containing it.
pub fn run_suite(opts: &SuiteOptions, only: Option<&str>) -> Result<Vec<CheckResult>> {
    let mut results = Vec::new();
    for (ci, case) in catalogue().into_iter().enumerate() {
        if only.is_some_and(|f| !case.name.contains(f)) {
            continue;
        }
        let instances = case.instances.unwrap_or(opts.instances);
        let mut rng = ChaCha8Rng::seed_from_u64(opts.seed ^ ((ci as u64 + 1) << 32));
        let mut worst = 0.0f64;
        for i in 0..instances {
            let e = (case.run)(&mut rng, opts, opts.seed.wrapping_add(i as u64))?;
            worst = if e.is_nan() { f64::NAN } else { worst.max(e) };
        }
        results.push(CheckResult {
            name: case.name,
            instances,
            worst,
        });
    }
    Ok(results)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn whole_catalogue_passes() {
        let opts = SuiteOptions::default();
        let results = run_suite(&opts, None).unwrap();
        assert!(results.len() >= 30);
        for r in &results {
            println!("{} {} {:e}", r.name, r.instances, r.worst);
        }
        for r in &results {
            assert!(r.passed(1e-4), "{} worst {:e}", r.name, r.worst);
        }
    }

    #[test]
    fn sign_fault_is_caught() {
        let opts = SuiteOptions {
            fault: Some(Fault::BilinearCoordSign),
            instances: 5,
            ..SuiteOptions::default()
        };
        for name in ["bilinear_sample", "deformable_mixer"] {
            let results = run_suite(&opts, Some(name)).unwrap();
            assert!(results[0].worst > 1e-2, "{results:?}");
        }
        let clean = run_suite(&opts, Some("matmul")).unwrap();
        assert!(clean[0].passed(1e-4));
    }
}
