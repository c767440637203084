//! A small reverse-mode tape over [`Tensor`] values.
//!
//! Nodes are appended in evaluation order, so a reverse sweep over the node
//! list is a valid topological order for backpropagation. A node carries
//! gradient only if one of its inputs does; constants and detached values
//! never receive gradient, which is how every stop-gradient rule of the
//! model is expressed.

use alloc::boxed::Box;
use alloc::vec;
use alloc::vec::Vec;

use crate::conjugation::{flow_regularizer_backward, flow_regularizer_value};
use crate::contrastive::ContrastiveTerm;
use crate::error::Result;
use crate::kernels;
use crate::tensor::{ensure_same_hw, ensure_same_shape, Tensor};
use crate::warp;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    Conv2d { input: Var, weight: Var, bias: Var },
    InstanceNorm { input: Var, inv_std: Vec<f64> },
    LeakyRelu { input: Var, slope: f64 },
    AvgPool2 { input: Var },
    Upsample2 { input: Var },
    Concat { inputs: Vec<Var> },
    Add { a: Var, b: Var },
    Sub { a: Var, b: Var },
    Warp { field: Var, flow: Var },
    CharbonnierMean { input: Var },
    FlowRegularizer { flow: Var, smooth: f64, magnitude: f64 },
    Contrastive { g: Var, h: Var, term: Box<ContrastiveTerm> },
    WeightedSum { terms: Vec<(Var, f64)> },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Gradients of one backward sweep, indexed by [`Var`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// `None` means no gradient path reached `v`, i.e. an exactly zero gradient.
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// A trainable leaf.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// A leaf that never receives gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// Copy of `v` that blocks gradient flow.
    pub fn detach(&mut self, v: Var) -> Var {
        let value = self.nodes[v.0].value.clone();
        self.constant(value)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.rg(v)
    }

    pub fn conv2d(&mut self, input: Var, weight: Var, bias: Var) -> Result<Var> {
        let (x, wt, b) = (self.value(input), self.value(weight), self.value(bias));
        let (cin, _, _) = x.chw();
        if wt.shape().len() != 4 || wt.shape()[1] != cin || b.len() != wt.shape()[0] {
            return Err(crate::error::Error::Shape {
                op: "conv2d",
                expected: vec![wt.shape()[0], cin],
                found: wt.shape().to_vec(),
            });
        }
        let out = kernels::conv2d(x, wt, b);
        let rg = self.rg(input) || self.rg(weight) || self.rg(bias);
        Ok(self.push(out, Op::Conv2d { input, weight, bias }, rg))
    }

    pub fn instance_norm(&mut self, input: Var, eps: f64) -> Var {
        let (out, inv_std) = kernels::instance_norm(self.value(input), eps);
        let rg = self.rg(input);
        self.push(out, Op::InstanceNorm { input, inv_std }, rg)
    }

    pub fn leaky_relu(&mut self, input: Var, slope: f64) -> Var {
        let out = kernels::leaky_relu(self.value(input), slope);
        let rg = self.rg(input);
        self.push(out, Op::LeakyRelu { input, slope }, rg)
    }

    pub fn avg_pool2(&mut self, input: Var) -> Var {
        let out = kernels::avg_pool2(self.value(input));
        let rg = self.rg(input);
        self.push(out, Op::AvgPool2 { input }, rg)
    }

    pub fn upsample2(&mut self, input: Var) -> Var {
        let out = kernels::upsample2(self.value(input));
        let rg = self.rg(input);
        self.push(out, Op::Upsample2 { input }, rg)
    }

    pub fn concat(&mut self, inputs: &[Var]) -> Result<Var> {
        let parts: Vec<&Tensor> = inputs.iter().map(|v| self.value(*v)).collect();
        let out = Tensor::concat_channels(&parts)?;
        let rg = inputs.iter().any(|v| self.rg(*v));
        Ok(self.push(
            out,
            Op::Concat {
                inputs: inputs.to_vec(),
            },
            rg,
        ))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        ensure_same_shape("add", self.value(a), self.value(b))?;
        let mut out = self.value(a).clone();
        out.add_assign(self.value(b));
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::Add { a, b }, rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        ensure_same_shape("sub", self.value(a), self.value(b))?;
        let mut out = self.value(a).clone();
        out.axpy(-1.0, self.value(b));
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::Sub { a, b }, rg))
    }

    pub fn warp(&mut self, field: Var, flow: Var) -> Result<Var> {
        let out = warp::warp(self.value(field), self.value(flow))?;
        let rg = self.rg(field) || self.rg(flow);
        Ok(self.push(out, Op::Warp { field, flow }, rg))
    }

    pub fn charbonnier_mean(&mut self, input: Var) -> Var {
        let out = Tensor::scalar(warp::charbonnier_mean(self.value(input)));
        let rg = self.rg(input);
        self.push(out, Op::CharbonnierMean { input }, rg)
    }

    /// Mean Charbonnier consistency between `prev` and `cur` warped by `flow`.
    pub fn consistency(&mut self, flow: Var, prev: Var, cur: Var) -> Result<Var> {
        ensure_same_shape("consistency", self.value(prev), self.value(cur))?;
        ensure_same_hw("consistency", self.value(prev), self.value(flow))?;
        let warped = self.warp(cur, flow)?;
        let residual = self.sub(prev, warped)?;
        Ok(self.charbonnier_mean(residual))
    }

    pub fn flow_regularizer(&mut self, flow: Var, smooth: f64, magnitude: f64) -> Var {
        let out = Tensor::scalar(flow_regularizer_value(self.value(flow), smooth, magnitude));
        let rg = self.rg(flow);
        self.push(
            out,
            Op::FlowRegularizer {
                flow,
                smooth,
                magnitude,
            },
            rg,
        )
    }

    /// Contrastive loss node over anchor map `g` and partner map `h`.
    pub fn contrastive(&mut self, g: Var, h: Var, mut term: ContrastiveTerm) -> Var {
        let value = term.forward(self.value(g), self.value(h));
        let rg = self.rg(g) || self.rg(h);
        self.push(
            Tensor::scalar(value),
            Op::Contrastive {
                g,
                h,
                term: Box::new(term),
            },
            rg,
        )
    }

    /// `Σ k · v` over scalar nodes.
    pub fn weighted_sum(&mut self, terms: &[(Var, f64)]) -> Var {
        let value: f64 = terms.iter().map(|(v, k)| k * self.value(*v).item()).sum();
        let rg = terms.iter().any(|(v, _)| self.rg(*v));
        self.push(
            Tensor::scalar(value),
            Op::WeightedSum {
                terms: terms.to_vec(),
            },
            rg,
        )
    }

    /// Backpropagates from the scalar `root`.
    pub fn backward(&self, root: Var) -> Gradients {
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        if self.rg(root) {
            grads[root.0] = Some(Tensor::full(self.value(root).shape(), 1.0));
        }
        for idx in (0..=root.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            let mut acc = |v: Var, t: Tensor| {
                if !self.rg(v) {
                    return;
                }
                match &mut grads[v.0] {
                    Some(existing) => existing.add_assign(&t),
                    slot @ None => *slot = Some(t),
                }
            };
            match &node.op {
                Op::Leaf => {}
                Op::Conv2d {
                    input,
                    weight,
                    bias,
                } => {
                    let (gi, gw, gb) = kernels::conv2d_backward(
                        self.value(*input),
                        self.value(*weight),
                        &g,
                        self.rg(*input),
                    );
                    if let Some(gi) = gi {
                        acc(*input, gi);
                    }
                    acc(*weight, gw);
                    acc(*bias, gb);
                }
                Op::InstanceNorm { input, inv_std } => {
                    acc(*input, kernels::instance_norm_backward(&node.value, inv_std, &g));
                }
                Op::LeakyRelu { input, slope } => {
                    acc(*input, kernels::leaky_relu_backward(self.value(*input), *slope, &g));
                }
                Op::AvgPool2 { input } => acc(*input, kernels::avg_pool2_backward(&g)),
                Op::Upsample2 { input } => acc(*input, kernels::upsample2_backward(&g)),
                Op::Concat { inputs } => {
                    let mut start = 0;
                    for v in inputs {
                        let c = self.value(*v).shape()[0];
                        acc(*v, g.channel_range(start, start + c));
                        start += c;
                    }
                }
                Op::Add { a, b } => {
                    acc(*a, g.clone());
                    acc(*b, g);
                }
                Op::Sub { a, b } => {
                    acc(*b, g.scale(-1.0));
                    acc(*a, g);
                }
                Op::Warp { field, flow } => {
                    let (gf, gd) = warp::warp_backward(self.value(*field), self.value(*flow), &g);
                    acc(*field, gf);
                    acc(*flow, gd);
                }
                Op::CharbonnierMean { input } => {
                    acc(*input, warp::charbonnier_mean_backward(self.value(*input), g.item()));
                }
                Op::FlowRegularizer {
                    flow,
                    smooth,
                    magnitude,
                } => {
                    acc(
                        *flow,
                        flow_regularizer_backward(self.value(*flow), *smooth, *magnitude, g.item()),
                    );
                }
                Op::Contrastive { g: ga, h, term } => {
                    let (dg, dh) = term.backward(self.value(*ga), self.value(*h), g.item());
                    acc(*ga, dg);
                    acc(*h, dh);
                }
                Op::WeightedSum { terms } => {
                    for (v, k) in terms {
                        acc(*v, Tensor::scalar(k * g.item()));
                    }
                }
            }
        }
        Gradients { grads }
    }
}
