//! A small tape over the fixed operator set.
//!
//! Models build a fresh tape per forward pass; backward walks it in reverse
//! insertion order and accumulates gradients into parameter leaves. There is
//! no graph surgery and no op outside the fixed set.

use super::ops::{self, Activation, BnCache, EdgeMode, GnCache, PadMode};
use super::Tensor4;
use crate::error::{PylonError, Result};

pub type NodeId = usize;

enum Op {
    Leaf,
    Conv2d {
        input: NodeId,
        weight: NodeId,
        bias: Option<NodeId>,
        stride: usize,
        padding: usize,
        pad_mode: PadMode,
    },
    BatchNormTrain {
        input: NodeId,
        gamma: NodeId,
        beta: NodeId,
        cache: BnCache,
        eps: f64,
    },
    BatchNormEval {
        input: NodeId,
        gamma: NodeId,
        beta: NodeId,
        running_mean: Vec<f64>,
        running_var: Vec<f64>,
        eps: f64,
    },
    GroupNorm {
        input: NodeId,
        gamma: NodeId,
        beta: NodeId,
        n_groups: usize,
        cache: GnCache,
        eps: f64,
    },
    Activation {
        input: NodeId,
        kind: Activation,
    },
    MaxPool {
        input: NodeId,
        argmax: Vec<u32>,
    },
    GlobalMaxPool {
        input: NodeId,
        argmax: Vec<u32>,
    },
    GlobalAvgPool {
        input: NodeId,
    },
    Upsample {
        input: NodeId,
        edge: EdgeMode,
    },
    Add {
        a: NodeId,
        b: NodeId,
    },
    MulChannel {
        x: NodeId,
        s: NodeId,
    },
    AddChannel {
        x: NodeId,
        s: NodeId,
    },
    Mul {
        a: NodeId,
        b: NodeId,
    },
    BceLoss {
        logits: NodeId,
        targets: Tensor4,
    },
}

impl Op {
    fn kind(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Conv2d { .. } => "conv2d",
            Op::BatchNormTrain { .. } | Op::BatchNormEval { .. } => "batch_norm",
            Op::GroupNorm { .. } => "group_norm",
            Op::Activation { .. } => "activation",
            Op::MaxPool { .. } => "max_pool2d",
            Op::GlobalMaxPool { .. } => "global_max_pool",
            Op::GlobalAvgPool { .. } => "global_avg_pool",
            Op::Upsample { .. } => "bilinear_upsample",
            Op::Add { .. } | Op::AddChannel { .. } => "add",
            Op::Mul { .. } | Op::MulChannel { .. } => "mul",
            Op::BceLoss { .. } => "bce_with_logits",
        }
    }
}

struct Node {
    value: Tensor4,
    op: Op,
    /// Index into the owning model's parameter store, for grad writeback.
    param: Option<usize>,
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

impl Graph {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    fn push(&mut self, value: Tensor4, op: Op) -> NodeId {
        self.nodes.push(Node {
            value,
            op,
            param: None,
        });
        self.nodes.len() - 1
    }

    pub fn value(&self, id: NodeId) -> &Tensor4 {
        &self.nodes[id].value
    }

    pub fn leaf(&mut self, value: Tensor4) -> NodeId {
        self.push(value, Op::Leaf)
    }

    /// Leaf tied to a parameter-store slot; backward accumulates its grad there.
    pub fn param_leaf(&mut self, value: Tensor4, store_index: usize) -> NodeId {
        let id = self.push(value, Op::Leaf);
        self.nodes[id].param = Some(store_index);
        id
    }

    /// Number of nodes of a given op kind, e.g. "global_avg_pool".
    pub fn count_kind(&self, kind: &str) -> usize {
        self.nodes.iter().filter(|n| n.op.kind() == kind).count()
    }

    pub fn conv2d(
        &mut self,
        input: NodeId,
        weight: NodeId,
        bias: Option<NodeId>,
        stride: usize,
        padding: usize,
        pad_mode: PadMode,
    ) -> Result<NodeId> {
        let b_vec = bias.map(|b| self.nodes[b].value.data.clone());
        let out = ops::conv2d(
            &self.nodes[input].value,
            &self.nodes[weight].value,
            b_vec.as_deref(),
            stride,
            padding,
            pad_mode,
        )?;
        Ok(self.push(
            out,
            Op::Conv2d {
                input,
                weight,
                bias,
                stride,
                padding,
                pad_mode,
            },
        ))
    }

    /// Train-mode batch norm; the caller folds the returned batch stats into
    /// its running statistics.
    pub fn batch_norm_train(
        &mut self,
        input: NodeId,
        gamma: NodeId,
        beta: NodeId,
        eps: f64,
    ) -> Result<(NodeId, BnCache)> {
        let (out, cache) = ops::batch_norm_train(
            &self.nodes[input].value,
            &self.nodes[gamma].value.data,
            &self.nodes[beta].value.data,
            eps,
        )?;
        let ret = cache.clone();
        let id = self.push(
            out,
            Op::BatchNormTrain {
                input,
                gamma,
                beta,
                cache,
                eps,
            },
        );
        Ok((id, ret))
    }

    pub fn batch_norm_eval(
        &mut self,
        input: NodeId,
        gamma: NodeId,
        beta: NodeId,
        running_mean: &[f64],
        running_var: &[f64],
        eps: f64,
    ) -> Result<NodeId> {
        let out = ops::batch_norm_eval(
            &self.nodes[input].value,
            &self.nodes[gamma].value.data,
            &self.nodes[beta].value.data,
            running_mean,
            running_var,
            eps,
        )?;
        Ok(self.push(
            out,
            Op::BatchNormEval {
                input,
                gamma,
                beta,
                running_mean: running_mean.to_vec(),
                running_var: running_var.to_vec(),
                eps,
            },
        ))
    }

    pub fn group_norm(
        &mut self,
        input: NodeId,
        n_groups: usize,
        gamma: NodeId,
        beta: NodeId,
        eps: f64,
    ) -> Result<NodeId> {
        let (out, cache) = ops::group_norm(
            &self.nodes[input].value,
            n_groups,
            &self.nodes[gamma].value.data,
            &self.nodes[beta].value.data,
            eps,
        )?;
        Ok(self.push(
            out,
            Op::GroupNorm {
                input,
                gamma,
                beta,
                n_groups,
                cache,
                eps,
            },
        ))
    }

    pub fn activation(&mut self, input: NodeId, kind: Activation) -> NodeId {
        let out = ops::pointwise_activation(&self.nodes[input].value, kind);
        self.push(out, Op::Activation { input, kind })
    }

    pub fn max_pool2d(&mut self, input: NodeId) -> Result<NodeId> {
        let (out, argmax) = ops::max_pool2d(&self.nodes[input].value)?;
        Ok(self.push(out, Op::MaxPool { input, argmax }))
    }

    pub fn global_max_pool(&mut self, input: NodeId) -> NodeId {
        let (out, argmax) = ops::global_max_pool(&self.nodes[input].value);
        self.push(out, Op::GlobalMaxPool { input, argmax })
    }

    pub fn global_avg_pool(&mut self, input: NodeId) -> NodeId {
        let out = ops::global_avg_pool(&self.nodes[input].value);
        self.push(out, Op::GlobalAvgPool { input })
    }

    pub fn bilinear_upsample(
        &mut self,
        input: NodeId,
        th: usize,
        tw: usize,
        edge: EdgeMode,
    ) -> Result<NodeId> {
        let out = ops::bilinear_upsample(&self.nodes[input].value, th, tw, edge)?;
        Ok(self.push(out, Op::Upsample { input, edge }))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let out = ops::add(&self.nodes[a].value, &self.nodes[b].value)?;
        Ok(self.push(out, Op::Add { a, b }))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let out = ops::mul(&self.nodes[a].value, &self.nodes[b].value)?;
        Ok(self.push(out, Op::Mul { a, b }))
    }

    pub fn mul_channel(&mut self, x: NodeId, s: NodeId) -> Result<NodeId> {
        let out = ops::mul_channel(&self.nodes[x].value, &self.nodes[s].value)?;
        Ok(self.push(out, Op::MulChannel { x, s }))
    }

    pub fn add_channel(&mut self, x: NodeId, s: NodeId) -> Result<NodeId> {
        let out = ops::add_channel(&self.nodes[x].value, &self.nodes[s].value)?;
        Ok(self.push(out, Op::AddChannel { x, s }))
    }

    pub fn bce_loss(&mut self, logits: NodeId, targets: Tensor4) -> Result<NodeId> {
        let loss = ops::bce_with_logits(&self.nodes[logits].value, &targets)?;
        let out = Tensor4::from_vec(1, 1, 1, 1, vec![loss])?;
        Ok(self.push(out, Op::BceLoss { logits, targets }))
    }

    /// Reverse sweep from a scalar output node. Returns per-node gradients;
    /// use [`Graph::param_grads`] to collect the parameter slice.
    pub fn backward(&self, output: NodeId) -> Result<Vec<Option<Tensor4>>> {
        let out_val = &self.nodes[output].value;
        if out_val.len() != 1 {
            return Err(PylonError::Config(
                "backward: output must be a scalar node".into(),
            ));
        }
        let mut grads: Vec<Option<Tensor4>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[output] = Some(Tensor4::filled(1, 1, 1, 1, 1.0));

        fn accum(slot: &mut Option<Tensor4>, g: Tensor4) {
            match slot {
                Some(existing) => existing.add_assign(&g),
                None => *slot = Some(g),
            }
        }

        for id in (0..=output).rev() {
            let Some(g) = grads[id].take() else { continue };
            match &self.nodes[id].op {
                Op::Leaf => {
                    grads[id] = Some(g);
                    continue;
                }
                Op::Conv2d {
                    input,
                    weight,
                    bias,
                    stride,
                    padding,
                    pad_mode,
                } => {
                    let (gi, gw, gb) = ops::conv2d_backward(
                        &self.nodes[*input].value,
                        &self.nodes[*weight].value,
                        *stride,
                        *padding,
                        *pad_mode,
                        &g,
                    )?;
                    accum(&mut grads[*input], gi);
                    accum(&mut grads[*weight], gw);
                    if let Some(b) = bias {
                        accum(&mut grads[*b], Tensor4::channel_vec(gb));
                    }
                }
                Op::BatchNormTrain {
                    input,
                    gamma,
                    beta,
                    cache,
                    eps,
                } => {
                    let (gi, dgamma, dbeta) = ops::batch_norm_train_backward(
                        &self.nodes[*input].value,
                        &self.nodes[*gamma].value.data,
                        cache,
                        *eps,
                        &g,
                    );
                    accum(&mut grads[*input], gi);
                    accum(&mut grads[*gamma], Tensor4::channel_vec(dgamma));
                    accum(&mut grads[*beta], Tensor4::channel_vec(dbeta));
                }
                Op::BatchNormEval {
                    input,
                    gamma,
                    beta,
                    running_mean,
                    running_var,
                    eps,
                } => {
                    let gi = ops::batch_norm_eval_backward(
                        &self.nodes[*gamma].value.data,
                        running_var,
                        *eps,
                        &g,
                    );
                    accum(&mut grads[*input], gi);
                    // affine grads still flow in eval mode
                    let x = &self.nodes[*input].value;
                    let c = x.c;
                    let mut dgamma = vec![0.0; c];
                    let mut dbeta = vec![0.0; c];
                    for ni in 0..x.n {
                        for ci in 0..c {
                            let istd = 1.0 / (running_var[ci] + eps).sqrt();
                            let mu = running_mean[ci];
                            for (xv, gv) in x.plane(ni, ci).iter().zip(g.plane(ni, ci)) {
                                dbeta[ci] += gv;
                                dgamma[ci] += gv * ((xv - mu) * istd);
                            }
                        }
                    }
                    accum(&mut grads[*gamma], Tensor4::channel_vec(dgamma));
                    accum(&mut grads[*beta], Tensor4::channel_vec(dbeta));
                }
                Op::GroupNorm {
                    input,
                    gamma,
                    beta,
                    n_groups,
                    cache,
                    eps,
                } => {
                    let (gi, dgamma, dbeta) = ops::group_norm_backward(
                        &self.nodes[*input].value,
                        *n_groups,
                        &self.nodes[*gamma].value.data,
                        cache,
                        *eps,
                        &g,
                    );
                    accum(&mut grads[*input], gi);
                    accum(&mut grads[*gamma], Tensor4::channel_vec(dgamma));
                    accum(&mut grads[*beta], Tensor4::channel_vec(dbeta));
                }
                Op::Activation { input, kind } => {
                    let gi =
                        ops::pointwise_activation_backward(&self.nodes[*input].value, *kind, &g);
                    accum(&mut grads[*input], gi);
                }
                Op::MaxPool { input, argmax } => {
                    let gi = ops::max_pool2d_backward(self.nodes[*input].value.shape(), argmax, &g);
                    accum(&mut grads[*input], gi);
                }
                Op::GlobalMaxPool { input, argmax } => {
                    let gi =
                        ops::global_max_pool_backward(self.nodes[*input].value.shape(), argmax, &g);
                    accum(&mut grads[*input], gi);
                }
                Op::GlobalAvgPool { input } => {
                    let gi = ops::global_avg_pool_backward(self.nodes[*input].value.shape(), &g);
                    accum(&mut grads[*input], gi);
                }
                Op::Upsample { input, edge } => {
                    let gi =
                        ops::bilinear_upsample_backward(self.nodes[*input].value.shape(), *edge, &g);
                    accum(&mut grads[*input], gi);
                }
                Op::Add { a, b } => {
                    accum(&mut grads[*a], g.clone());
                    accum(&mut grads[*b], g);
                }
                Op::Mul { a, b } => {
                    let ga = ops::mul(&g, &self.nodes[*b].value)?;
                    let gb = ops::mul(&g, &self.nodes[*a].value)?;
                    accum(&mut grads[*a], ga);
                    accum(&mut grads[*b], gb);
                }
                Op::MulChannel { x, s } => {
                    let gx = ops::mul_channel(&g, &self.nodes[*s].value)?;
                    let gs_full = ops::mul(&g, &self.nodes[*x].value)?;
                    accum(&mut grads[*x], gx);
                    accum(&mut grads[*s], ops::reduce_channel_grad(&gs_full));
                }
                Op::AddChannel { x, s } => {
                    accum(&mut grads[*x], g.clone());
                    accum(&mut grads[*s], ops::reduce_channel_grad(&g));
                }
                Op::BceLoss { logits, targets } => {
                    let scale = g.data[0];
                    let mut gl = ops::bce_with_logits_backward(&self.nodes[*logits].value, targets);
                    if scale != 1.0 {
                        gl.data.iter_mut().for_each(|v| *v *= scale);
                    }
                    accum(&mut grads[*logits], gl);
                }
            }
        }
        Ok(grads)
    }

    /// Collect (store_index, gradient) pairs for all parameter leaves.
    pub fn param_grads(&self, grads: &mut Vec<Option<Tensor4>>) -> Vec<(usize, Tensor4)> {
        let mut out = Vec::new();
        for (id, node) in self.nodes.iter().enumerate() {
            if let Some(store_index) = node.param {
                if let Some(g) = grads[id].take() {
                    out.push((store_index, g));
                }
            }
        }
        out
    }
}
