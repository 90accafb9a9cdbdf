//! Parameterised building blocks on top of the tape.
//!
//! Feature maps are channel-last `[B, H, W, C]` throughout.

use crate::autodiff::{Tape, Var};
use crate::error::{DemtError, Result};
use crate::params::{Init, ParamId, ParamKind, ParamStore};
use crate::tensor::Tensor;

pub const LAYER_NORM_EPS: f64 = 1e-5;
pub const BATCH_NORM_EPS: f64 = 1e-5;
pub const BATCH_NORM_MOMENTUM: f64 = 0.1;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    /// Batch statistics; running statistics are updated.
    Train,
    /// Running statistics; nothing is mutated.
    Eval,
}

/// Everything a forward pass needs: the tape being recorded, the parameter
/// store and the normalisation mode.
pub struct Ctx<'a> {
    pub tape: &'a mut Tape,
    pub store: &'a mut ParamStore,
    pub mode: Mode,
}

impl<'a> Ctx<'a> {
    pub fn new(tape: &'a mut Tape, store: &'a mut ParamStore, mode: Mode) -> Self {
        Self { tape, store, mode }
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        self.store.bind(self.tape, id)
    }
}

#[derive(Clone, Debug)]
pub struct LinearParams {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub in_features: usize,
    pub out_features: usize,
}

impl LinearParams {
    pub fn new(
        store: &mut ParamStore,
        init: &mut Init<'_>,
        name: &str,
        in_features: usize,
        out_features: usize,
        bias: bool,
    ) -> Result<Self> {
        let w = init.fan_in_uniform(&[out_features, in_features], in_features)?;
        let weight = store.add(format!("{name}.weight"), w, ParamKind::Trainable)?;
        let bias = if bias {
            let b = init.fan_in_uniform(&[out_features], in_features)?;
            Some(store.add(format!("{name}.bias"), b, ParamKind::Trainable)?)
        } else {
            None
        };
        Ok(Self {
            weight,
            bias,
            in_features,
            out_features,
        })
    }
}

#[derive(Clone, Debug)]
pub struct NormParams {
    pub gamma: ParamId,
    pub beta: ParamId,
    /// `(running_mean, running_var)` for batch normalisation.
    pub running: Option<(ParamId, ParamId)>,
    pub eps: f64,
    pub momentum: f64,
    pub channels: usize,
}

impl NormParams {
    fn affine(store: &mut ParamStore, name: &str, channels: usize) -> Result<(ParamId, ParamId)> {
        let gamma = store.add(
            format!("{name}.gamma"),
            Tensor::ones(&[channels])?,
            ParamKind::Trainable,
        )?;
        let beta = store.add(
            format!("{name}.beta"),
            Tensor::zeros(&[channels])?,
            ParamKind::Trainable,
        )?;
        Ok((gamma, beta))
    }

    pub fn layer(store: &mut ParamStore, name: &str, channels: usize, eps: f64) -> Result<Self> {
        if eps <= 0.0 {
            return Err(DemtError::InvalidArgument(
                "norm eps must be positive".into(),
            ));
        }
        let (gamma, beta) = Self::affine(store, name, channels)?;
        Ok(Self {
            gamma,
            beta,
            running: None,
            eps,
            momentum: 0.0,
            channels,
        })
    }

    pub fn batch(
        store: &mut ParamStore,
        name: &str,
        channels: usize,
        eps: f64,
        momentum: f64,
    ) -> Result<Self> {
        if eps <= 0.0 || !(momentum > 0.0 && momentum < 1.0) {
            return Err(DemtError::InvalidArgument(format!(
                "batch norm needs eps > 0 and momentum in (0,1), got {eps}, {momentum}"
            )));
        }
        let (gamma, beta) = Self::affine(store, name, channels)?;
        let rm = store.add(
            format!("{name}.running_mean"),
            Tensor::zeros(&[channels])?,
            ParamKind::Buffer,
        )?;
        let rv = store.add(
            format!("{name}.running_var"),
            Tensor::ones(&[channels])?,
            ParamKind::Buffer,
        )?;
        Ok(Self {
            gamma,
            beta,
            running: Some((rm, rv)),
            eps,
            momentum,
            channels,
        })
    }
}

#[derive(Clone, Debug)]
pub struct ConvParams {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub kernel: usize,
    pub in_channels: usize,
    pub out_channels: usize,
}

impl ConvParams {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        init: &mut Init<'_>,
        name: &str,
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        bias: bool,
        zero_init: bool,
    ) -> Result<Self> {
        let shape = [out_channels, kernel, kernel, in_channels];
        let fan_in = kernel * kernel * in_channels;
        let w = if zero_init {
            Tensor::zeros(&shape)?
        } else {
            init.fan_in_uniform(&shape, fan_in)?
        };
        let weight = store.add(format!("{name}.weight"), w, ParamKind::Trainable)?;
        let bias = if bias {
            let b = if zero_init {
                Tensor::zeros(&[out_channels])?
            } else {
                init.fan_in_uniform(&[out_channels], fan_in)?
            };
            Some(store.add(format!("{name}.bias"), b, ParamKind::Trainable)?)
        } else {
            None
        };
        Ok(Self {
            weight,
            bias,
            kernel,
            in_channels,
            out_channels,
        })
    }
}

pub fn linear(cx: &mut Ctx<'_>, p: &LinearParams, x: Var) -> Result<Var> {
    let w = cx.param(p.weight);
    let b = p.bias.map(|b| cx.param(b));
    cx.tape.linear(x, w, b)
}

pub fn layer_norm(cx: &mut Ctx<'_>, p: &NormParams, x: Var) -> Result<Var> {
    let g = cx.param(p.gamma);
    let b = cx.param(p.beta);
    cx.tape.layer_norm(x, g, b, p.eps)
}

/// Batch normalisation over every non-channel position. In train mode the
/// running statistics move toward the batch statistics (unbiased variance).
pub fn batch_norm(cx: &mut Ctx<'_>, p: &NormParams, x: Var) -> Result<Var> {
    let Some((rm, rv)) = p.running else {
        return Err(DemtError::InvalidArgument(
            "batch_norm called with layer-norm parameters".into(),
        ));
    };
    let g = cx.param(p.gamma);
    let b = cx.param(p.beta);
    match cx.mode {
        Mode::Train => {
            let (y, mean, var) = cx.tape.batch_norm_train(x, g, b, p.eps)?;
            let n = (cx.tape.value(x).len() / p.channels) as f64;
            let m = p.momentum;
            for (r, v) in cx.store.get_mut(rm).value.data_mut().iter_mut().zip(&mean) {
                *r = (1.0 - m) * *r + m * v;
            }
            for (r, v) in cx.store.get_mut(rv).value.data_mut().iter_mut().zip(&var) {
                *r = (1.0 - m) * *r + m * v * n / (n - 1.0);
            }
            Ok(y)
        }
        Mode::Eval => {
            let mean = cx.store.get(rm).value.data().to_vec();
            let var = cx.store.get(rv).value.data().to_vec();
            cx.tape.batch_norm_eval(x, g, b, &mean, &var, p.eps)
        }
    }
}

/// 1×1 convolution: the same affine channel map at every pixel.
pub fn pointwise_conv(tape: &mut Tape, x: Var, weight: Var, bias: Var) -> Result<Var> {
    if tape.shape(x).len() != 4 {
        return Err(DemtError::shape(
            "pointwise_conv",
            format!("expected [B,H,W,C], got {:?}", tape.shape(x)),
        ));
    }
    tape.linear(x, weight, Some(bias))
}

pub fn conv2d(cx: &mut Ctx<'_>, p: &ConvParams, x: Var) -> Result<Var> {
    let w = cx.param(p.weight);
    let b = p.bias.map(|b| cx.param(b));
    cx.tape.conv2d(x, w, b)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn layer_norm_two_values() {
        let mut store = ParamStore::new();
        let p = NormParams::layer(&mut store, "ln", 2, LAYER_NORM_EPS).unwrap();
        let mut tape = Tape::new();
        let mut cx = Ctx::new(&mut tape, &mut store, Mode::Train);
        let x = cx
            .tape
            .constant(&Tensor::new(&[1, 2], vec![1.0, 3.0]).unwrap());
        let y = layer_norm(&mut cx, &p, x).unwrap();
        let v = tape.value(y);
        let expect = 1.0 / (1.0f64 + LAYER_NORM_EPS).sqrt();
        assert!((v[0] + expect).abs() < 1e-15 && (v[1] - expect).abs() < 1e-15);
    }

    #[test]
    fn layer_norm_constant_is_zero() {
        let mut store = ParamStore::new();
        let p = NormParams::layer(&mut store, "ln", 4, LAYER_NORM_EPS).unwrap();
        let mut tape = Tape::new();
        let mut cx = Ctx::new(&mut tape, &mut store, Mode::Train);
        let x = cx.tape.constant(&Tensor::full(&[3, 4], 2.5).unwrap());
        let y = layer_norm(&mut cx, &p, x).unwrap();
        assert!(tape.value(y).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn layer_norm_channel_mismatch() {
        let mut store = ParamStore::new();
        let p = NormParams::layer(&mut store, "ln", 4, LAYER_NORM_EPS).unwrap();
        let mut tape = Tape::new();
        let mut cx = Ctx::new(&mut tape, &mut store, Mode::Train);
        let x = cx.tape.constant(&Tensor::full(&[3, 5], 2.5).unwrap());
        assert!(layer_norm(&mut cx, &p, x).is_err());
    }

    #[test]
    fn batch_norm_eval_with_unit_stats() {
        let mut store = ParamStore::new();
        let p =
            NormParams::batch(&mut store, "bn", 2, BATCH_NORM_EPS, BATCH_NORM_MOMENTUM).unwrap();
        let mut tape = Tape::new();
        let mut cx = Ctx::new(&mut tape, &mut store, Mode::Eval);
        let data = vec![1.0, -2.0, 0.5, 4.0];
        let x = cx
            .tape
            .constant(&Tensor::new(&[1, 1, 2, 2], data.clone()).unwrap());
        let y = batch_norm(&mut cx, &p, x).unwrap();
        let s = (1.0 + BATCH_NORM_EPS).sqrt();
        for (a, b) in tape.value(y).iter().zip(&data) {
            assert!((a - b / s).abs() < 1e-15);
        }
    }

    #[test]
    fn batch_norm_train_constant_is_zero_and_updates_stats() {
        let mut store = ParamStore::new();
        let p =
            NormParams::batch(&mut store, "bn", 1, BATCH_NORM_EPS, BATCH_NORM_MOMENTUM).unwrap();
        let mut tape = Tape::new();
        let mut cx = Ctx::new(&mut tape, &mut store, Mode::Train);
        let x = cx.tape.constant(&Tensor::full(&[2, 2, 2, 1], 3.0).unwrap());
        let y = batch_norm(&mut cx, &p, x).unwrap();
        assert!(tape.value(y).iter().all(|&v| v == 0.0));
        let (rm, rv) = p.running.unwrap();
        assert!((store.get(rm).value.data()[0] - 0.3).abs() < 1e-15);
        assert!((store.get(rv).value.data()[0] - 0.9).abs() < 1e-15);
    }

    #[test]
    fn batch_norm_rejects_bad_hyperparameters() {
        let mut store = ParamStore::new();
        assert!(NormParams::batch(&mut store, "a", 2, 0.0, 0.1).is_err());
        assert!(NormParams::batch(&mut store, "b", 2, 1e-5, 1.0).is_err());
    }

    #[test]
    fn pointwise_identity() {
        let mut tape = Tape::new();
        let data: Vec<f64> = (0..12).map(|i| i as f64 * 0.5 - 2.0).collect();
        let x = tape.constant(&Tensor::new(&[1, 2, 2, 3], data.clone()).unwrap());
        let mut eye = vec![0.0; 9];
        (0..3).for_each(|i| eye[i * 3 + i] = 1.0);
        let w = tape.constant(&Tensor::new(&[3, 3], eye).unwrap());
        let b = tape.constant(&Tensor::zeros(&[3]).unwrap());
        let y = pointwise_conv(&mut tape, x, w, b).unwrap();
        assert_eq!(tape.value(y), data.as_slice());
        let bad = tape.constant(&Tensor::zeros(&[3, 2]).unwrap());
        assert!(pointwise_conv(&mut tape, x, bad, b).is_err());
    }

    #[test]
    fn zero_init_conv_is_zero() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut init = Init { rng: &mut rng };
        let p = ConvParams::new(&mut store, &mut init, "off", 3, 18, 3, true, true).unwrap();
        assert!(store.get(p.weight).value.data().iter().all(|&v| v == 0.0));
        assert!(store
            .get(p.bias.unwrap())
            .value
            .data()
            .iter()
            .all(|&v| v == 0.0));
    }
}
