//! Task-aware transformer decoder: a task interaction block over the fused
//! features of all tasks and a task query block that decodes each task with
//! its own deformed feature as the query.
//!
//! No positional or task-identity encoding is used anywhere, and key
//! reductions are combined per task block in an order-free way. Reordering
//! the tasks therefore reorders the outputs and changes nothing else, bit
//! for bit.

use crate::autodiff::{Tape, Var};
use crate::error::{DemtError, Result};
use crate::mixer::{DeformedFeature, NormSettings};
use crate::nn::{self, Ctx, LinearParams, NormParams};
use crate::params::{Init, ParamStore};

#[derive(Clone, Debug)]
pub struct AttentionParams {
    pub heads: usize,
    pub channels: usize,
    pub q: LinearParams,
    pub k: LinearParams,
    pub v: LinearParams,
    pub out: LinearParams,
}

impl AttentionParams {
    pub fn new(
        store: &mut ParamStore,
        init: &mut Init<'_>,
        prefix: &str,
        channels: usize,
        heads: usize,
    ) -> Result<Self> {
        if heads == 0 || !channels.is_multiple_of(heads) {
            return Err(DemtError::InvalidArgument(format!(
                "{heads} heads do not divide {channels} channels"
            )));
        }
        let mut proj = |name: &str| {
            LinearParams::new(
                store,
                init,
                &format!("{prefix}.{name}"),
                channels,
                channels,
                true,
            )
        };
        Ok(Self {
            heads,
            channels,
            q: proj("q")?,
            k: proj("k")?,
            v: proj("v")?,
            out: proj("out")?,
        })
    }

    pub fn head_dim(&self) -> usize {
        self.channels / self.heads
    }
}

#[derive(Clone, Debug)]
pub struct SmlpParams {
    pub linear: LinearParams,
    pub norm: NormParams,
}

impl SmlpParams {
    pub fn new(
        store: &mut ParamStore,
        init: &mut Init<'_>,
        prefix: &str,
        channels: usize,
        ln_eps: f64,
    ) -> Result<Self> {
        Ok(Self {
            linear: LinearParams::new(
                store,
                init,
                &format!("{prefix}.linear"),
                channels,
                channels,
                true,
            )?,
            norm: NormParams::layer(store, &format!("{prefix}.norm"), channels, ln_eps)?,
        })
    }
}

/// Task interaction block weights, shared by all tasks.
#[derive(Clone, Debug)]
pub struct InteractionParams {
    pub norm: NormParams,
    pub attn: AttentionParams,
    pub smlp: SmlpParams,
}

impl InteractionParams {
    pub fn new(
        store: &mut ParamStore,
        init: &mut Init<'_>,
        prefix: &str,
        channels: usize,
        heads: usize,
        norms: NormSettings,
    ) -> Result<Self> {
        let eps = norms.ln_eps;
        Ok(Self {
            norm: NormParams::layer(store, &format!("{prefix}.ti.norm"), channels, eps)?,
            attn: AttentionParams::new(store, init, &format!("{prefix}.ti.attn"), channels, heads)?,
            smlp: SmlpParams::new(store, init, &format!("{prefix}.ti.smlp"), channels, eps)?,
        })
    }
}

/// Task query block weights, shared by all tasks.
#[derive(Clone, Debug)]
pub struct QueryParams {
    pub query_norm: NormParams,
    pub key_value_norm: NormParams,
    pub attn: AttentionParams,
    pub smlp: SmlpParams,
}

impl QueryParams {
    pub fn new(
        store: &mut ParamStore,
        init: &mut Init<'_>,
        prefix: &str,
        channels: usize,
        heads: usize,
        norms: NormSettings,
    ) -> Result<Self> {
        let eps = norms.ln_eps;
        Ok(Self {
            query_norm: NormParams::layer(store, &format!("{prefix}.tq.q_norm"), channels, eps)?,
            key_value_norm: NormParams::layer(
                store,
                &format!("{prefix}.tq.kv_norm"),
                channels,
                eps,
            )?,
            attn: AttentionParams::new(store, init, &format!("{prefix}.tq.attn"), channels, heads)?,
            smlp: SmlpParams::new(store, init, &format!("{prefix}.tq.smlp"), channels, eps)?,
        })
    }
}

#[derive(Clone, Debug)]
pub struct DecoderParams {
    pub interaction: InteractionParams,
    pub query: QueryParams,
}

impl DecoderParams {
    pub fn new(
        store: &mut ParamStore,
        init: &mut Init<'_>,
        prefix: &str,
        channels: usize,
        heads: usize,
        norms: NormSettings,
    ) -> Result<Self> {
        Ok(Self {
            interaction: InteractionParams::new(store, init, prefix, channels, heads, norms)?,
            query: QueryParams::new(store, init, prefix, channels, heads, norms)?,
        })
    }
}

/// Output of [`mhsa`] with the per-head attention nodes kept for inspection.
pub struct AttentionOutput {
    pub out: Var,
    pub heads: Vec<Var>,
}

/// Multi-head scaled dot-product attention on `[Nq, C′]` queries and
/// `[Nk, C′]` keys/values. `key_segment` groups keys for order-free
/// reductions, see [`Tape::attention`].
pub fn mhsa(
    cx: &mut Ctx<'_>,
    p: &AttentionParams,
    q: Var,
    k: Var,
    v: Var,
    key_segment: usize,
) -> Result<AttentionOutput> {
    for (name, x) in [("q", q), ("k", k), ("v", v)] {
        let s = cx.tape.shape(x);
        if s.len() != 2 || s[1] != p.channels {
            return Err(DemtError::shape(
                "mhsa",
                format!("{name} is {s:?}, expected [N, {}]", p.channels),
            ));
        }
    }
    let qp = nn::linear(cx, &p.q, q)?;
    let kp = nn::linear(cx, &p.k, k)?;
    let vp = nn::linear(cx, &p.v, v)?;
    let dk = p.head_dim();
    let mut outs = Vec::with_capacity(p.heads);
    for h in 0..p.heads {
        let qh = cx.tape.narrow(qp, 1, h * dk, dk)?;
        let kh = cx.tape.narrow(kp, 1, h * dk, dk)?;
        let vh = cx.tape.narrow(vp, 1, h * dk, dk)?;
        outs.push(cx.tape.attention(qh, kh, vh, key_segment)?);
    }
    let joined = if outs.len() == 1 {
        outs[0]
    } else {
        cx.tape.concat(&outs, 1)?
    };
    let out = nn::linear(cx, &p.out, joined)?;
    Ok(AttentionOutput { out, heads: outs })
}

/// `LayerNorm(Linear(x))`.
pub fn smlp(cx: &mut Ctx<'_>, p: &SmlpParams, x: Var) -> Result<Var> {
    if *cx.tape.shape(x).last().unwrap() != p.linear.in_features {
        return Err(DemtError::shape(
            "smlp",
            format!(
                "input {:?} for width {}",
                cx.tape.shape(x),
                p.linear.in_features
            ),
        ));
    }
    let y = nn::linear(cx, &p.linear, x)?;
    nn::layer_norm(cx, &p.norm, y)
}

fn check_features(tape: &Tape, features: &[DeformedFeature]) -> Result<(usize, usize, usize)> {
    let Some(first) = features.first() else {
        return Err(DemtError::InvalidArgument(
            "decoder needs at least one task".into(),
        ));
    };
    let s = tape.shape(first.tokens).to_vec();
    for f in features {
        if tape.shape(f.tokens) != s.as_slice() || f.spatial != first.spatial {
            return Err(DemtError::shape(
                "decoder",
                format!("task features {:?} vs {:?}", tape.shape(f.tokens), s),
            ));
        }
    }
    Ok((s[0], s[1], s[2]))
}

fn batch_item(tape: &mut Tape, tokens: Var, b: usize) -> Result<Var> {
    let s = tape.shape(tokens).to_vec();
    let item = tape.narrow(tokens, 0, b, 1)?;
    tape.reshape(item, &[s[1], s[2]])
}

/// Task-major concatenation `[B, T·N, C′]` of all deformed features.
pub fn fuse_features(tape: &mut Tape, features: &[DeformedFeature]) -> Result<Var> {
    check_features(tape, features)?;
    let parts: Vec<Var> = features.iter().map(|f| f.tokens).collect();
    if parts.len() == 1 {
        return Ok(parts[0]);
    }
    tape.concat(&parts, 1)
}

/// Task-interacted feature `[B, T·N, C′]`, task-major rows.
#[derive(Clone, Debug)]
pub struct TaskInteracted {
    pub tokens: Var,
    pub tokens_per_task: usize,
    /// Attention nodes per batch item and head.
    pub attention: Vec<Var>,
}

/// `X̂_f = sMLP(MHSA(LN(X_f), LN(X_f), LN(X_f)))`, no residual.
pub fn task_interaction(
    cx: &mut Ctx<'_>,
    p: &InteractionParams,
    features: &[DeformedFeature],
) -> Result<TaskInteracted> {
    let (batch, n, c) = check_features(cx.tape, features)?;
    let fused = fuse_features(cx.tape, features)?;
    let t = features.len();
    let mut items = Vec::with_capacity(batch);
    let mut attention = Vec::new();
    for b in 0..batch {
        let xf = batch_item(cx.tape, fused, b)?;
        let normed = nn::layer_norm(cx, &p.norm, xf)?;
        let att = mhsa(cx, &p.attn, normed, normed, normed, n)?;
        attention.extend(att.heads);
        let y = smlp(cx, &p.smlp, att.out)?;
        items.push(cx.tape.reshape(y, &[1, t * n, c])?);
    }
    let tokens = if batch == 1 {
        items[0]
    } else {
        cx.tape.concat(&items, 0)?
    };
    Ok(TaskInteracted {
        tokens,
        tokens_per_task: n,
        attention,
    })
}

/// Rows of the interacted feature belonging to task `t`, as a `[B, h, w, C′]` map.
pub fn interacted_slice(
    tape: &mut Tape,
    interacted: &TaskInteracted,
    t: usize,
    spatial: (usize, usize),
) -> Result<Var> {
    let s = tape.shape(interacted.tokens).to_vec();
    let n = interacted.tokens_per_task;
    let rows = tape.narrow(interacted.tokens, 1, t * n, n)?;
    tape.reshape(rows, &[s[0], spatial.0, spatial.1, s[2]])
}

/// Task-aware feature map `[B, h, w, C′]` with the attention nodes used.
pub struct TaskAware {
    pub map: Var,
    pub attention: Vec<Var>,
}

/// `X̂ = reshape(X_q + sMLP(MHSA(LN(X_q), LN(X̂_f), LN(X̂_f))))`.
pub fn task_query(
    cx: &mut Ctx<'_>,
    p: &QueryParams,
    deformed: &DeformedFeature,
    interacted: &TaskInteracted,
) -> Result<TaskAware> {
    let qs = cx.tape.shape(deformed.tokens).to_vec();
    let ks = cx.tape.shape(interacted.tokens).to_vec();
    if qs[0] != ks[0] || qs[2] != ks[2] {
        return Err(DemtError::shape(
            "task_query",
            format!("query {qs:?} vs interacted {ks:?}"),
        ));
    }
    let (batch, n, c) = (qs[0], qs[1], qs[2]);
    let mut items = Vec::with_capacity(batch);
    let mut attention = Vec::new();
    for b in 0..batch {
        let xq = batch_item(cx.tape, deformed.tokens, b)?;
        let xf = batch_item(cx.tape, interacted.tokens, b)?;
        let q = nn::layer_norm(cx, &p.query_norm, xq)?;
        let kv = nn::layer_norm(cx, &p.key_value_norm, xf)?;
        let att = mhsa(cx, &p.attn, q, kv, kv, interacted.tokens_per_task)?;
        attention.extend(att.heads);
        let refined = smlp(cx, &p.smlp, att.out)?;
        let y = cx.tape.add(xq, refined)?;
        items.push(
            cx.tape
                .reshape(y, &[1, deformed.spatial.0, deformed.spatial.1, c])?,
        );
    }
    debug_assert_eq!(n, deformed.spatial.0 * deformed.spatial.1);
    let map = if batch == 1 {
        items[0]
    } else {
        cx.tape.concat(&items, 0)?
    };
    Ok(TaskAware { map, attention })
}

/// Runs both blocks for every task.
pub fn decoder_forward(
    cx: &mut Ctx<'_>,
    p: &DecoderParams,
    features: &[DeformedFeature],
) -> Result<(TaskInteracted, Vec<TaskAware>)> {
    let interacted = task_interaction(cx, &p.interaction, features)?;
    let mut aware = Vec::with_capacity(features.len());
    for f in features {
        aware.push(task_query(cx, &p.query, f, &interacted)?);
    }
    Ok((interacted, aware))
}
