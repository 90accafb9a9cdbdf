//! Deformable mixer encoder.
//!
//! One independent parameter set per task turns the aggregated feature map
//! into that task's deformed feature. Each branch reduces channels once
//! (LayerNorm then a bias-free linear map) and then applies `depth` blocks of
//!
//! ```text
//! x_c = BN(GELU(pointwise(x)))               channel-aware mixing
//! off = conv3x3(x_c)                         K (dy, dx) pairs per pixel
//! d   = Σ_k bilinear(x_c, base_k + off_k)·W2[k]
//! x   = x_c + BN(GELU(d))                    spatial-aware deformable
//! ```
//!
//! before flattening the map into `N = h·w` tokens.

use crate::autodiff::{Tape, Var};
use crate::error::{DemtError, Result};
use crate::nn::{self, ConvParams, Ctx, LinearParams, NormParams};
use crate::params::{Init, ParamId, ParamKind, ParamStore};
use crate::tensor::Tensor;

#[derive(Clone, Debug)]
pub struct MixerBlockParams {
    /// `W1: [C′, C′]`
    pub mix_weight: ParamId,
    /// `b: [C′]`
    pub mix_bias: ParamId,
    pub mix_bn: NormParams,
    /// 3×3 conv with `2K` outputs, zero-initialised so sampling starts on the regular grid.
    pub offset_conv: ConvParams,
    /// `W2: [K, C′in, C′out]`
    pub deform_weight: ParamId,
    pub deform_bn: NormParams,
}

#[derive(Clone, Debug)]
pub struct DeformableMixerParams {
    pub reduce: LinearParams,
    pub reduce_norm: NormParams,
    pub blocks: Vec<MixerBlockParams>,
    pub points: usize,
    pub in_channels: usize,
    pub channels: usize,
}

#[derive(Clone, Copy, Debug)]
pub struct MixerShape {
    pub in_channels: usize,
    pub channels: usize,
    pub depth: usize,
    pub points: usize,
}

#[derive(Clone, Copy, Debug)]
pub struct NormSettings {
    pub ln_eps: f64,
    pub bn_eps: f64,
    pub bn_momentum: f64,
}

impl Default for NormSettings {
    fn default() -> Self {
        Self {
            ln_eps: nn::LAYER_NORM_EPS,
            bn_eps: nn::BATCH_NORM_EPS,
            bn_momentum: nn::BATCH_NORM_MOMENTUM,
        }
    }
}

/// Side length of the base-tap square for `points` sampling points.
pub fn tap_side(points: usize) -> Result<usize> {
    let side = (points as f64).sqrt().round() as usize;
    if points == 0 || side * side != points || side.is_multiple_of(2) {
        return Err(DemtError::InvalidArgument(format!(
            "sampling point count {points} must be an odd square (1, 9, 25, ...)"
        )));
    }
    Ok(side)
}

impl DeformableMixerParams {
    pub fn new(
        store: &mut ParamStore,
        init: &mut Init<'_>,
        prefix: &str,
        shape: MixerShape,
        norms: NormSettings,
    ) -> Result<Self> {
        let MixerShape {
            in_channels,
            channels,
            depth,
            points,
        } = shape;
        if depth == 0 {
            return Err(DemtError::InvalidArgument(
                "mixer depth must be at least 1".into(),
            ));
        }
        tap_side(points)?;
        let reduce_norm = NormParams::layer(
            store,
            &format!("{prefix}.reduce_norm"),
            in_channels,
            norms.ln_eps,
        )?;
        let reduce = LinearParams::new(
            store,
            init,
            &format!("{prefix}.reduce"),
            in_channels,
            channels,
            false,
        )?;
        let mut blocks = Vec::with_capacity(depth);
        for d in 0..depth {
            let name = format!("{prefix}.block.{d}");
            let w1 = init.fan_in_uniform(&[channels, channels], channels)?;
            let mix_weight = store.add(format!("{name}.mix.weight"), w1, ParamKind::Trainable)?;
            let b = init.fan_in_uniform(&[channels], channels)?;
            let mix_bias = store.add(format!("{name}.mix.bias"), b, ParamKind::Trainable)?;
            let mix_bn = NormParams::batch(
                store,
                &format!("{name}.mix.bn"),
                channels,
                norms.bn_eps,
                norms.bn_momentum,
            )?;
            let offset_conv = ConvParams::new(
                store,
                init,
                &format!("{name}.offset"),
                channels,
                2 * points,
                3,
                true,
                true,
            )?;
            let w2 = init.fan_in_uniform(&[points, channels, channels], points * channels)?;
            let deform_weight =
                store.add(format!("{name}.deform_weight"), w2, ParamKind::Trainable)?;
            let deform_bn = NormParams::batch(
                store,
                &format!("{name}.deform.bn"),
                channels,
                norms.bn_eps,
                norms.bn_momentum,
            )?;
            blocks.push(MixerBlockParams {
                mix_weight,
                mix_bias,
                mix_bn,
                offset_conv,
                deform_weight,
                deform_bn,
            });
        }
        Ok(Self {
            reduce,
            reduce_norm,
            blocks,
            points,
            in_channels,
            channels,
        })
    }
}

/// Per-task token sequence `[B, N, C′]` plus the grid it came from.
#[derive(Clone, Copy, Debug)]
pub struct DeformedFeature {
    pub tokens: Var,
    pub spatial: (usize, usize),
}

fn channels_of(tape: &Tape, x: Var) -> usize {
    *tape.shape(x).last().unwrap()
}

/// LayerNorm followed by the `C → C′` linear map at every position.
pub fn reduce_channels(cx: &mut Ctx<'_>, p: &DeformableMixerParams, x: Var) -> Result<Var> {
    if channels_of(cx.tape, x) != p.in_channels {
        return Err(DemtError::shape(
            "reduce_channels",
            format!(
                "expected {} channels, got {:?}",
                p.in_channels,
                cx.tape.shape(x)
            ),
        ));
    }
    let normed = nn::layer_norm(cx, &p.reduce_norm, x)?;
    nn::linear(cx, &p.reduce, normed)
}

/// `BN(GELU(pointwise_conv(x, W1, b)))`.
pub fn channel_mix(cx: &mut Ctx<'_>, p: &MixerBlockParams, x: Var) -> Result<Var> {
    let w = cx.param(p.mix_weight);
    let b = cx.param(p.mix_bias);
    let mixed = nn::pointwise_conv(cx.tape, x, w, b)?;
    let act = cx.tape.gelu(mixed);
    nn::batch_norm(cx, &p.mix_bn, act)
}

/// Offsets `[B, h, w, K, 2]` in feature-grid pixels, `(dy, dx)` order.
pub fn predict_offsets(cx: &mut Ctx<'_>, conv: &ConvParams, x: Var) -> Result<Var> {
    if !conv.out_channels.is_multiple_of(2) {
        return Err(DemtError::shape(
            "predict_offsets",
            format!("offset conv has {} outputs, need 2K", conv.out_channels),
        ));
    }
    let raw = nn::conv2d(cx, conv, x)?;
    let s = cx.tape.shape(raw).to_vec();
    cx.tape
        .reshape(raw, &[s[0], s[1], s[2], conv.out_channels / 2, 2])
}

/// Absolute base positions `[B, h, w, K, 2]`: for `K = k²` the `k×k`
/// neighbourhood of every pixel in row-major tap order.
pub fn base_grid(b: usize, h: usize, w: usize, points: usize) -> Result<Tensor> {
    let side = tap_side(points)? as isize;
    let r = side / 2;
    let mut data = Vec::with_capacity(b * h * w * points * 2);
    for _ in 0..b {
        for y in 0..h {
            for x in 0..w {
                for dy in -r..=r {
                    for dx in -r..=r {
                        data.push((y as isize + dy) as f64);
                        data.push((x as isize + dx) as f64);
                    }
                }
            }
        }
    }
    Tensor::new(&[b, h, w, points, 2], data)
}

/// Samples `K` points per pixel at base grid plus offsets and mixes them:
/// `out[p] = Σ_k sample(x, base_k(p) + off_k(p)) · W2[k]`.
pub fn spatial_deform(tape: &mut Tape, x: Var, offsets: Var, deform_weight: Var) -> Result<Var> {
    let xs = tape.shape(x).to_vec();
    let os = tape.shape(offsets).to_vec();
    let ws = tape.shape(deform_weight).to_vec();
    let [b, h, w, c] = xs[..] else {
        return Err(DemtError::shape("spatial_deform", format!("input {xs:?}")));
    };
    if os.len() != 5 || os[..3] != [b, h, w] || os[4] != 2 {
        return Err(DemtError::shape(
            "spatial_deform",
            format!("offsets {os:?} do not match input {xs:?}"),
        ));
    }
    let k = os[3];
    if ws != [k, c, c] {
        return Err(DemtError::shape(
            "spatial_deform",
            format!("deform weight {ws:?} for K={k}, C={c}"),
        ));
    }
    let base = tape.constant(&base_grid(b, h, w, k)?);
    let coords = tape.add(base, offsets)?;
    let sampled = tape.bilinear_sample(x, coords)?;
    let flat = tape.reshape(sampled, &[b * h * w, k * c])?;
    let wflat = tape.reshape(deform_weight, &[k * c, c])?;
    let mixed = tape.matmul(flat, wflat)?;
    tape.reshape(mixed, &[b, h, w, c])
}

/// One repetition: channel mixing, deformable sampling, `x_c + BN(GELU(·))`.
pub fn mixer_block(cx: &mut Ctx<'_>, p: &MixerBlockParams, x: Var) -> Result<Var> {
    cx.tape.note("mixer.block");
    let xc = channel_mix(cx, p, x)?;
    let offsets = predict_offsets(cx, &p.offset_conv, xc)?;
    let w2 = cx.param(p.deform_weight);
    let deformed = spatial_deform(cx.tape, xc, offsets, w2)?;
    let act = cx.tape.gelu(deformed);
    let normed = nn::batch_norm(cx, &p.deform_bn, act)?;
    cx.tape.add(xc, normed)
}

pub fn deformable_mixer_forward(
    cx: &mut Ctx<'_>,
    p: &DeformableMixerParams,
    x: Var,
) -> Result<DeformedFeature> {
    let mut h = reduce_channels(cx, p, x)?;
    for block in &p.blocks {
        h = mixer_block(cx, block, h)?;
    }
    let s = cx.tape.shape(h).to_vec();
    let tokens = cx.tape.reshape(h, &[s[0], s[1] * s[2], s[3]])?;
    Ok(DeformedFeature {
        tokens,
        spatial: (s[1], s[2]),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::Mode;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn build(
        depth: usize,
        points: usize,
        c: usize,
        cr: usize,
    ) -> (ParamStore, DeformableMixerParams) {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut init = Init { rng: &mut rng };
        let shape = MixerShape {
            in_channels: c,
            channels: cr,
            depth,
            points,
        };
        let p = DeformableMixerParams::new(
            &mut store,
            &mut init,
            "branch.0",
            shape,
            NormSettings::default(),
        )
        .unwrap();
        (store, p)
    }

    #[test]
    fn tap_side_accepts_odd_squares_only() {
        assert_eq!(tap_side(1).unwrap(), 1);
        assert_eq!(tap_side(9).unwrap(), 3);
        assert!(tap_side(4).is_err());
        assert!(tap_side(8).is_err());
    }

    #[test]
    fn reduce_output_width() {
        let (mut store, p) = build(1, 9, 64, 16);
        let mut tape = Tape::new();
        let mut cx = Ctx::new(&mut tape, &mut store, Mode::Train);
        let x = cx
            .tape
            .constant(&Tensor::full(&[1, 4, 4, 64], 0.5).unwrap());
        let y = reduce_channels(&mut cx, &p, x).unwrap();
        assert_eq!(tape.shape(y), &[1, 4, 4, 16]);
    }

    #[test]
    fn zero_init_offsets_and_shape() {
        let (mut store, p) = build(1, 9, 8, 4);
        let mut tape = Tape::new();
        let mut cx = Ctx::new(&mut tape, &mut store, Mode::Train);
        let x = cx
            .tape
            .constant(&Tensor::full(&[1, 8, 8, 4], 0.25).unwrap());
        let off = predict_offsets(&mut cx, &p.blocks[0].offset_conv, x).unwrap();
        assert_eq!(tape.shape(off), &[1, 8, 8, 9, 2]);
        assert!(tape.value(off).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn depth_repeats_the_block() {
        let (mut store, p) = build(2, 9, 8, 4);
        let mut tape = Tape::new();
        let mut cx = Ctx::new(&mut tape, &mut store, Mode::Train);
        let data = (0..2 * 4 * 4 * 8)
            .map(|i| ((i * 7) % 11) as f64 * 0.1)
            .collect();
        let x = cx.tape.constant(&Tensor::new(&[2, 4, 4, 8], data).unwrap());
        let f = deformable_mixer_forward(&mut cx, &p, x).unwrap();
        assert_eq!(tape.count("mixer.block"), 2);
        assert_eq!(tape.shape(f.tokens), &[2, 16, 4]);
        assert_eq!(f.spatial, (4, 4));
    }

    #[test]
    fn single_point_zero_offset_identity() {
        let mut tape = Tape::new();
        let data: Vec<f64> = (0..2 * 3 * 3).map(|i| i as f64 - 4.0).collect();
        let x = tape.constant(&Tensor::new(&[1, 3, 3, 2], data.clone()).unwrap());
        let off = tape.constant(&Tensor::zeros(&[1, 3, 3, 1, 2]).unwrap());
        let w = tape.constant(&Tensor::new(&[1, 2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap());
        let y = spatial_deform(&mut tape, x, off, w).unwrap();
        assert_eq!(tape.value(y), data.as_slice());
        let w9 = tape.constant(&Tensor::zeros(&[9, 2, 2]).unwrap());
        assert!(spatial_deform(&mut tape, x, off, w9).is_err());
    }

    #[test]
    fn rejects_wrong_input_width() {
        let (mut store, p) = build(1, 9, 8, 4);
        let mut tape = Tape::new();
        let mut cx = Ctx::new(&mut tape, &mut store, Mode::Train);
        let x = cx.tape.constant(&Tensor::zeros(&[1, 4, 4, 6]).unwrap());
        assert!(reduce_channels(&mut cx, &p, x).is_err());
    }
}
