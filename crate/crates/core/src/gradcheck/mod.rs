//! Central finite differences, the independent oracle for every backward rule.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Fault, Tape, Var};
use crate::error::Result;
use crate::nn::{Ctx, Mode};
use crate::params::{ParamId, ParamStore};
use crate::tensor::Tensor;

pub mod suite;

/// `(f(x + eps·eᵢ) − f(x − eps·eᵢ)) / 2eps` for every element of `x`.
pub fn finite_diff_grad<F>(mut f: F, x: &Tensor, eps: f64) -> Result<Tensor>
where
    F: FnMut(&Tensor) -> Result<f64>,
{
    let mut probe = x.clone();
    let mut out = vec![0.0; x.len()];
    for (i, o) in out.iter_mut().enumerate() {
        let orig = x.data()[i];
        probe.data_mut()[i] = orig + eps;
        let plus = f(&probe)?;
        probe.data_mut()[i] = orig - eps;
        let minus = f(&probe)?;
        probe.data_mut()[i] = orig;
        *o = (plus - minus) / (2.0 * eps);
    }
    Tensor::new(x.shape(), out)
}

/// Largest elementwise disagreement relative to the larger of the two
/// gradients' magnitudes.
///
/// Normalising by the tensor-wide scale, not per element, keeps entries whose
/// true gradient is near zero from dominating through rounding noise.
pub fn relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    let scale = analytic
        .iter()
        .chain(numeric)
        .fold(0.0f64, |m, v| m.max(v.abs()))
        .max(1e-10);
    analytic
        .iter()
        .zip(numeric)
        .map(|(a, n)| (a - n).abs())
        .fold(0.0, f64::max)
        / scale
}

/// Worst error over several gradient tensors of one check.
///
/// Each tensor is scored with [`relative_error`], except that its scale is
/// floored at `1e-3` of the largest gradient magnitude in the whole check.
/// Tensors whose exact gradient vanishes (a key-projection bias under
/// softmax, say) then compare rounding noise against the check's real
/// gradient scale instead of against itself.
pub fn combined_error(pairs: &[(Vec<f64>, Vec<f64>)]) -> f64 {
    let floor = check_floor(pairs);
    pairs
        .iter()
        .map(|p| floored_error(p, floor))
        .fold(0.0, f64::max)
}

fn check_floor(pairs: &[(Vec<f64>, Vec<f64>)]) -> f64 {
    let global = pairs
        .iter()
        .flat_map(|(a, n)| a.iter().chain(n))
        .fold(0.0f64, |m, v| m.max(v.abs()));
    (1e-3 * global).max(1e-10)
}

fn floored_error((a, n): &(Vec<f64>, Vec<f64>), floor: f64) -> f64 {
    let scale = a.iter().chain(n).fold(floor, |m, v| m.max(v.abs()));
    a.iter()
        .zip(n)
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
        / scale
}

fn contraction(rng: &mut ChaCha8Rng, shape: &[usize], len: usize) -> Tensor {
    let data = (0..len)
        .map(|_| rng.gen_range(0.5..1.5) * if rng.gen_bool(0.5) { 1.0 } else { -1.0 })
        .collect();
    Tensor::new(shape, data).expect("weight shape")
}

/// Checks an arbitrary tape-built function of several input tensors.
///
/// The function's output is contracted with a fixed random tensor to obtain a
/// scalar, so every output element contributes a distinct weight. Returns the
/// [`combined_error`] over all inputs.
pub fn check_function<F>(
    inputs: &[Tensor],
    build: F,
    eps: f64,
    seed: u64,
    fault: Option<Fault>,
) -> Result<f64>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9_7f4a_7c15);
    let mut weights: Option<Tensor> = None;
    let mut eval = |values: &[Tensor], want_grad: bool| -> Result<(f64, Vec<Option<Tensor>>)> {
        let mut tape = Tape::new();
        tape.inject_fault(fault);
        let vars: Vec<Var> = values
            .iter()
            .map(|t| tape.leaf(&t.clone().with_requires_grad(want_grad)))
            .collect();
        let out = build(&mut tape, &vars)?;
        let w = weights
            .get_or_insert_with(|| contraction(&mut rng, tape.shape(out), tape.value(out).len()));
        let wv = tape.constant(w);
        let prod = tape.mul(out, wv)?;
        let loss = tape.sum(prod);
        let value = tape.value(loss)[0];
        if !want_grad {
            return Ok((value, Vec::new()));
        }
        let grads = tape.backward(loss)?;
        Ok((value, vars.iter().map(|&v| grads.tensor(v)).collect()))
    };
    let (_, analytic) = eval(inputs, true)?;
    let mut pairs = Vec::with_capacity(inputs.len());
    for (i, input) in inputs.iter().enumerate() {
        let mut others = inputs.to_vec();
        let numeric = finite_diff_grad(
            |probe| {
                others[i] = probe.clone();
                Ok(eval(&others, false)?.0)
            },
            input,
            eps,
        )?;
        let a = analytic[i]
            .as_ref()
            .map(|t| t.data().to_vec())
            .unwrap_or_else(|| vec![0.0; input.len()]);
        pairs.push((a, numeric.into_data()));
    }
    Ok(combined_error(&pairs))
}

#[derive(Clone, Copy, Debug)]
pub struct ModuleCheckOptions {
    pub eps: f64,
    pub seed: u64,
    pub fault: Option<Fault>,
    pub mode: Mode,
    /// Entries checked per parameter tensor, chosen at random; `None` checks all.
    pub per_tensor: Option<usize>,
    /// Also check gradients with respect to the inputs.
    pub check_inputs: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModuleCheck {
    pub worst: f64,
    /// Parameter (or `input.<i>`) with the worst error.
    pub worst_name: String,
    pub entries: usize,
}

/// Finite-difference check of every trainable parameter of `store` (and
/// optionally the inputs) through a module built by `build`.
///
/// Each evaluation runs on a fresh copy of `store`, so running statistics
/// updated in train mode do not leak between evaluations.
pub fn check_module<F>(
    store: &ParamStore,
    inputs: &[Tensor],
    build: F,
    opts: ModuleCheckOptions,
) -> Result<ModuleCheck>
where
    F: Fn(&mut Ctx<'_>, &[Var]) -> Result<Var>,
{
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed ^ 0x2545_f491_4f6c_dd1d);
    let mut weights: Option<Tensor> = None;
    let mut forward =
        |params: &ParamStore, values: &[Tensor], want_grad: bool| -> Result<Forward> {
            let mut local = params.clone();
            let mut tape = Tape::new();
            tape.inject_fault(opts.fault);
            let vars: Vec<Var> = values
                .iter()
                .map(|t| tape.leaf(&t.clone().with_requires_grad(want_grad && opts.check_inputs)))
                .collect();
            let out = {
                let mut cx = Ctx::new(&mut tape, &mut local, opts.mode);
                build(&mut cx, &vars)?
            };
            let w = weights.get_or_insert_with(|| {
                contraction(&mut rng, tape.shape(out), tape.value(out).len())
            });
            let wv = tape.constant(w);
            let prod = tape.mul(out, wv)?;
            let loss = tape.sum(prod);
            let value = tape.value(loss)[0];
            if !want_grad {
                return Ok(Forward {
                    value,
                    params: Vec::new(),
                    inputs: Vec::new(),
                });
            }
            let grads = tape.backward(loss)?;
            let mut bound: Vec<(ParamId, Var)> = tape.param_bindings().collect();
            bound.sort();
            Ok(Forward {
                value,
                params: bound
                    .into_iter()
                    .map(|(id, v)| (id, grads.tensor(v)))
                    .collect(),
                inputs: vars.iter().map(|&v| grads.tensor(v)).collect(),
            })
        };
    let base = forward(store, inputs, true)?;
    let mut pick_rng = ChaCha8Rng::seed_from_u64(opts.seed.wrapping_add(17));
    let mut pairs = Vec::new();
    let mut names = Vec::new();
    let mut entries = 0;
    let mut params = store.clone();
    for id in store.ids() {
        let p = store.get(id);
        if !p.is_trainable() {
            continue;
        }
        let analytic = base
            .params
            .iter()
            .find(|(pid, _)| *pid == id)
            .and_then(|(_, g)| g.clone());
        let picks = pick_entries(&mut pick_rng, p.value.len(), opts.per_tensor);
        let mut a = Vec::with_capacity(picks.len());
        let mut n = Vec::with_capacity(picks.len());
        for &i in &picks {
            let orig = p.value.data()[i];
            let exact = analytic.as_ref().map_or(0.0, |t| t.data()[i]);
            let mut at = |x: f64| {
                params.get_mut(id).value.data_mut()[i] = x;
                let v = forward(&params, inputs, false).map(|f| f.value);
                params.get_mut(id).value.data_mut()[i] = orig;
                v
            };
            n.push(refined_diff(&mut at, orig, opts.eps, exact)?);
            a.push(exact);
        }
        entries += picks.len();
        pairs.push((a, n));
        names.push(p.name.clone());
    }
    if opts.check_inputs {
        for (k, input) in inputs.iter().enumerate() {
            let picks = pick_entries(&mut pick_rng, input.len(), opts.per_tensor);
            let mut probe = inputs.to_vec();
            let mut a = Vec::with_capacity(picks.len());
            let mut n = Vec::with_capacity(picks.len());
            for &i in &picks {
                let orig = input.data()[i];
                let exact = base.inputs[k].as_ref().map_or(0.0, |t| t.data()[i]);
                let mut at = |x: f64| {
                    probe[k].data_mut()[i] = x;
                    let v = forward(store, &probe, false).map(|f| f.value);
                    probe[k].data_mut()[i] = orig;
                    v
                };
                n.push(refined_diff(&mut at, orig, opts.eps, exact)?);
                a.push(exact);
            }
            entries += picks.len();
            pairs.push((a, n));
            names.push(format!("input.{k}"));
        }
    }
    let floor = check_floor(&pairs);
    let mut worst = 0.0;
    let mut worst_name = String::new();
    for (pair, name) in pairs.iter().zip(names) {
        let e = floored_error(pair, floor);
        if e > worst || worst_name.is_empty() {
            worst = e;
            worst_name = name;
        }
    }
    Ok(ModuleCheck {
        worst,
        worst_name,
        entries,
    })
}

struct Forward {
    value: f64,
    params: Vec<(ParamId, Option<Tensor>)>,
    inputs: Vec<Option<Tensor>>,
}

/// Central difference of `f` at `x`, shrinking the step while it straddles a
/// kink.
///
/// Sampling positions that cross an integer pixel coordinate inside the
/// `±eps` window bend the function there, and the plain estimate then mixes
/// two one-sided slopes. When the estimate disagrees with `exact` beyond
/// truncation and rounding error, the step is cut tenfold (at most twice) for
/// as long as successive estimates also disagree with each other. Estimates
/// at different steps agree on smooth stretches whatever `exact` says, so a
/// wrong backward rule is still exposed.
fn refined_diff<F>(f: &mut F, x: f64, eps: f64, exact: f64) -> Result<f64>
where
    F: FnMut(f64) -> Result<f64>,
{
    let mut h = eps;
    let mut est = (f(x + h)? - f(x - h)?) / (2.0 * h);
    let mut level = None;
    for _ in 0..2 {
        let f0 = match level {
            Some(v) => v,
            None => *level.insert(f(x)?.abs()),
        };
        let close = |p: f64, q: f64, h: f64| {
            (p - q).abs() <= 1e-5 * (p.abs() + q.abs()) + 4.0 * f64::EPSILON * (f0 + 1.0) / h
        };
        if close(est, exact, h) {
            break;
        }
        let finer = (f(x + h / 10.0)? - f(x - h / 10.0)?) / (0.2 * h);
        if close(est, finer, h / 10.0) {
            break;
        }
        h /= 10.0;
        est = finer;
    }
    Ok(est)
}

fn pick_entries(rng: &mut ChaCha8Rng, len: usize, per_tensor: Option<usize>) -> Vec<usize> {
    match per_tensor {
        Some(k) if k < len => rand::seq::index::sample(rng, len, k).into_vec(),
        _ => (0..len).collect(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fd_of_sum_is_ones() {
        let x = Tensor::new(&[4], vec![0.1, -3.0, 2.0, 7.5]).unwrap();
        let g = finite_diff_grad(|t| Ok(t.data().iter().sum()), &x, 1e-5).unwrap();
        for v in g.data() {
            assert!((v - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn fd_of_square_at_three() {
        let x = Tensor::scalar(3.0);
        let g = finite_diff_grad(|t| Ok(t.data()[0] * t.data()[0]), &x, 1e-5).unwrap();
        assert!((g.data()[0] - 6.0).abs() < 1e-8);
    }

    #[test]
    fn relative_error_scale() {
        assert_eq!(relative_error(&[1.0, 2.0], &[1.0, 2.0]), 0.0);
        assert!((relative_error(&[2.0, 0.0], &[1.0, 0.0]) - 0.5).abs() < 1e-15);
    }
}
