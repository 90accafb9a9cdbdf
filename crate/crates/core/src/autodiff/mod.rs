//! Define-by-run reverse-mode differentiation.
//!
//! A [`Tape`] is rebuilt for every forward pass. Each operation appends one
//! node holding its output value and the rule needed to push gradients back
//! to its inputs. Because inputs are always recorded before the operations
//! that consume them, the node list is already in topological order and
//! [`Tape::backward`] simply walks it in reverse.

mod basic;
mod loss_ops;

pub use loss_ops::IGNORE_LABEL;
mod neural;

use std::collections::{BTreeMap, HashMap};

use crate::error::{DemtError, Result};
use crate::params::ParamId;
use crate::tensor::{check_shape, numel, Tensor};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(pub(crate) usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Deliberate backward-rule defects used to prove that the gradient checker
/// catches real bugs.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Fault {
    /// Negates the coordinate gradient of bilinear sampling.
    BilinearCoordSign,
}

pub(crate) struct Node {
    pub(crate) shape: Vec<usize>,
    pub(crate) value: Vec<f64>,
    pub(crate) op: Op,
    pub(crate) requires_grad: bool,
}

/// Recorded operation together with everything its backward rule needs.
pub(crate) enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Reshape(Var),
    Expand(Var),
    Transpose(Var),
    MatMul(Var, Var),
    Narrow {
        input: Var,
        axis: usize,
        start: usize,
    },
    Concat {
        inputs: Vec<Var>,
        axis: usize,
    },
    Sum(Var),
    Mean(Var),
    Softmax {
        input: Var,
        axis: usize,
    },
    Gelu(Var),
    Linear {
        input: Var,
        weight: Var,
        bias: Option<Var>,
    },
    Norm {
        input: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
        channels: usize,
        kind: NormKind,
    },
    Conv2d {
        input: Var,
        weight: Var,
        bias: Option<Var>,
        k: usize,
    },
    BilinearSample {
        input: Var,
        coords: Var,
    },
    Upsample(Var),
    AvgPool {
        input: Var,
        k: usize,
    },
    L2Normalize {
        input: Var,
        norms: Vec<f64>,
    },
    Attention {
        q: Var,
        k: Var,
        v: Var,
        scale: f64,
        probs: Vec<f64>,
    },
    CrossEntropy {
        logits: Var,
        probs: Vec<f64>,
        targets: Vec<Option<usize>>,
        count: usize,
    },
    MaskedL1 {
        pred: Var,
        target: Vec<f64>,
        count: usize,
    },
    Cosine {
        pred: Var,
        target: Vec<f64>,
        count: usize,
    },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) enum NormKind {
    /// Normalised over the trailing channel axis per position.
    Layer,
    /// Normalised per channel over every leading position using batch statistics.
    BatchTrain,
    /// Fixed statistics supplied by the caller; `xhat` is an affine function of the input.
    BatchEval,
}

/// Gradients produced by one backward pass.
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
    shapes: Vec<Vec<usize>>,
    visit_order: Vec<usize>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    pub fn tensor(&self, v: Var) -> Option<Tensor> {
        self.get(v)
            .map(|g| Tensor::new(&self.shapes[v.0], g.to_vec()).expect("gradient shape"))
    }

    /// Node indices in the order their backward rules ran.
    pub fn visit_order(&self) -> &[usize] {
        &self.visit_order
    }
}

pub(crate) struct BackCtx<'a> {
    pub(crate) nodes: &'a [Node],
    grads: &'a mut [Option<Vec<f64>>],
    pub(crate) fault: Option<Fault>,
}

impl BackCtx<'_> {
    /// Gradient accumulator for `v`, or `None` when `v` needs no gradient.
    pub(crate) fn grad_mut(&mut self, v: Var) -> Option<&mut [f64]> {
        let node = &self.nodes[v.0];
        if !node.requires_grad {
            return None;
        }
        let len = node.value.len();
        Some(self.grads[v.0].get_or_insert_with(|| vec![0.0; len]))
    }

    pub(crate) fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub(crate) fn value(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].value
    }

    pub(crate) fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub(crate) fn add_into(&mut self, v: Var, delta: &[f64]) {
        if let Some(g) = self.grad_mut(v) {
            for (a, b) in g.iter_mut().zip(delta) {
                *a += b;
            }
        }
    }
}

/// Operation recorder for one forward pass.
#[derive(Default)]
pub struct Tape {
    pub(crate) nodes: Vec<Node>,
    param_vars: HashMap<ParamId, Var>,
    counters: BTreeMap<String, usize>,
    fault: Option<Fault>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn inject_fault(&mut self, fault: Option<Fault>) {
        self.fault = fault;
    }

    /// Records a leaf. The tensor's `requires_grad` flag decides whether a
    /// gradient is produced for it.
    pub fn leaf(&mut self, t: &Tensor) -> Var {
        self.push_node(
            t.shape().to_vec(),
            t.data().to_vec(),
            Op::Leaf,
            t.requires_grad(),
        )
    }

    /// Records a leaf that never receives a gradient.
    pub fn constant(&mut self, t: &Tensor) -> Var {
        self.push_node(t.shape().to_vec(), t.data().to_vec(), Op::Leaf, false)
    }

    pub(crate) fn bind_param(&mut self, id: ParamId, t: &Tensor, trainable: bool) -> Var {
        if let Some(&v) = self.param_vars.get(&id) {
            return v;
        }
        let v = self.push_node(t.shape().to_vec(), t.data().to_vec(), Op::Leaf, trainable);
        self.param_vars.insert(id, v);
        v
    }

    pub(crate) fn param_bindings(&self) -> impl Iterator<Item = (ParamId, Var)> + '_ {
        self.param_vars.iter().map(|(&id, &v)| (id, v))
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn tensor(&self, v: Var) -> Tensor {
        Tensor::new(&self.nodes[v.0].shape, self.nodes[v.0].value.clone()).expect("node shape")
    }

    /// Increments a named counter; model code uses this to make block
    /// repetition observable.
    pub fn note(&mut self, label: &str) {
        *self.counters.entry(label.to_string()).or_default() += 1;
    }

    pub fn count(&self, label: &str) -> usize {
        self.counters.get(label).copied().unwrap_or(0)
    }

    /// Attention probabilities saved by an attention node, `[Nq, Nk]`.
    pub fn attention_probs(&self, v: Var) -> Option<&[f64]> {
        match &self.nodes[v.0].op {
            Op::Attention { probs, .. } => Some(probs),
            _ => None,
        }
    }

    pub(crate) fn push(&mut self, shape: Vec<usize>, value: Vec<f64>, op: Op) -> Var {
        let requires_grad = self.op_requires_grad(&op);
        self.push_node(shape, value, op, requires_grad)
    }

    fn push_node(
        &mut self,
        shape: Vec<usize>,
        value: Vec<f64>,
        op: Op,
        requires_grad: bool,
    ) -> Var {
        debug_assert_eq!(numel(&shape), value.len());
        debug_assert!(check_shape(&shape).is_ok());
        self.nodes.push(Node {
            shape,
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn op_requires_grad(&self, op: &Op) -> bool {
        let rg = |v: &Var| self.nodes[v.0].requires_grad;
        match op {
            Op::Leaf => false,
            Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) | Op::MatMul(a, b) => rg(a) || rg(b),
            Op::Scale(a, _)
            | Op::Reshape(a)
            | Op::Expand(a)
            | Op::Transpose(a)
            | Op::Sum(a)
            | Op::Mean(a)
            | Op::Gelu(a)
            | Op::Upsample(a) => rg(a),
            Op::Narrow { input, .. }
            | Op::Softmax { input, .. }
            | Op::AvgPool { input, .. }
            | Op::L2Normalize { input, .. } => rg(input),
            Op::Concat { inputs, .. } => inputs.iter().any(rg),
            Op::Linear {
                input,
                weight,
                bias,
            }
            | Op::Conv2d {
                input,
                weight,
                bias,
                ..
            } => rg(input) || rg(weight) || bias.as_ref().is_some_and(rg),
            Op::Norm {
                input, gamma, beta, ..
            } => rg(input) || rg(gamma) || rg(beta),
            Op::BilinearSample { input, coords } => rg(input) || rg(coords),
            Op::Attention { q, k, v, .. } => rg(q) || rg(k) || rg(v),
            Op::CrossEntropy { logits, .. } => rg(logits),
            Op::MaskedL1 { pred, .. } | Op::Cosine { pred, .. } => rg(pred),
        }
    }

    pub(crate) fn check_var(&self, v: Var) -> Result<()> {
        if v.0 >= self.nodes.len() {
            return Err(DemtError::InvalidArgument(format!(
                "variable {} is not on this tape",
                v.0
            )));
        }
        Ok(())
    }

    /// Propagates gradients from a scalar `loss` back through every recorded
    /// operation, visiting nodes in exact reverse recording order.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        self.check_var(loss)?;
        let node = &self.nodes[loss.0];
        if node.value.len() != 1 {
            return Err(DemtError::shape(
                "backward",
                format!("loss must be a scalar, got shape {:?}", node.shape),
            ));
        }
        let mut grads: Vec<Option<Vec<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        let mut visit_order = Vec::new();
        if node.requires_grad {
            grads[loss.0] = Some(vec![1.0]);
        }
        for i in (0..=loss.0).rev() {
            let (lower, upper) = grads.split_at_mut(i);
            let Some(g) = upper[0].as_deref() else {
                continue;
            };
            visit_order.push(i);
            let mut ctx = BackCtx {
                nodes: &self.nodes,
                grads: lower,
                fault: self.fault,
            };
            backward_node(&mut ctx, i, g);
        }
        Ok(Gradients {
            grads,
            shapes: self.nodes.iter().map(|n| n.shape.clone()).collect(),
            visit_order,
        })
    }
}

fn backward_node(ctx: &mut BackCtx<'_>, index: usize, g: &[f64]) {
    let node = &ctx.nodes[index];
    match &node.op {
        Op::Leaf => {}
        Op::Add(a, b) => {
            ctx.add_into(*a, g);
            ctx.add_into(*b, g);
        }
        Op::Sub(a, b) => {
            ctx.add_into(*a, g);
            if let Some(gb) = ctx.grad_mut(*b) {
                for (x, y) in gb.iter_mut().zip(g) {
                    *x -= y;
                }
            }
        }
        Op::Mul(a, b) => basic::mul_backward(ctx, *a, *b, g),
        Op::Scale(a, s) => {
            let s = *s;
            if let Some(ga) = ctx.grad_mut(*a) {
                for (x, y) in ga.iter_mut().zip(g) {
                    *x += s * y;
                }
            }
        }
        Op::Reshape(a) => ctx.add_into(*a, g),
        Op::Expand(a) => basic::expand_backward(ctx, *a, &node.shape, g),
        Op::Transpose(a) => basic::transpose_backward(ctx, *a, g),
        Op::MatMul(a, b) => basic::matmul_backward(ctx, *a, *b, g),
        Op::Narrow { input, axis, start } => {
            basic::narrow_backward(ctx, *input, *axis, *start, &node.shape, g)
        }
        Op::Concat { inputs, axis } => basic::concat_backward(ctx, inputs, *axis, &node.shape, g),
        Op::Sum(a) => {
            let gv = g[0];
            if let Some(ga) = ctx.grad_mut(*a) {
                ga.iter_mut().for_each(|x| *x += gv);
            }
        }
        Op::Mean(a) => {
            let n = ctx.value(*a).len() as f64;
            let gv = g[0] / n;
            if let Some(ga) = ctx.grad_mut(*a) {
                ga.iter_mut().for_each(|x| *x += gv);
            }
        }
        Op::Softmax { input, axis } => {
            basic::softmax_backward(ctx, *input, *axis, &node.shape, &node.value, g)
        }
        Op::Gelu(a) => neural::gelu_backward(ctx, *a, g),
        Op::Linear {
            input,
            weight,
            bias,
        } => neural::linear_backward(ctx, *input, *weight, *bias, g),
        Op::Norm {
            input,
            gamma,
            beta,
            xhat,
            inv_std,
            channels,
            kind,
        } => neural::norm_backward(
            ctx, *input, *gamma, *beta, xhat, inv_std, *channels, *kind, g,
        ),
        Op::Conv2d {
            input,
            weight,
            bias,
            k,
        } => neural::conv2d_backward(ctx, *input, *weight, *bias, *k, g),
        Op::BilinearSample { input, coords } => neural::bilinear_backward(ctx, *input, *coords, g),
        Op::Upsample(a) => neural::upsample_backward(ctx, *a, &node.shape, g),
        Op::AvgPool { input, k } => neural::avg_pool_backward(ctx, *input, *k, &node.shape, g),
        Op::L2Normalize { input, norms } => {
            neural::l2_normalize_backward(ctx, *input, norms, &node.value, g)
        }
        Op::Attention {
            q,
            k,
            v,
            scale,
            probs,
        } => neural::attention_backward(ctx, *q, *k, *v, *scale, probs, g),
        Op::CrossEntropy {
            logits,
            probs,
            targets,
            count,
        } => loss_ops::cross_entropy_backward(ctx, *logits, probs, targets, *count, g[0]),
        Op::MaskedL1 {
            pred,
            target,
            count,
        } => loss_ops::masked_l1_backward(ctx, *pred, target, *count, g[0]),
        Op::Cosine {
            pred,
            target,
            count,
        } => loss_ops::cosine_backward(ctx, *pred, target, *count, g[0]),
    }
}
