use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use rand_distr::{Distribution, Normal};

use super::{EncoderConfig, GapInjection, ModelOutput, NormKind, PylonConfig, VariantKind};
use crate::error::{PylonError, Result};
use crate::tensor::graph::{Graph, NodeId};
use crate::tensor::ops::{global_max_pool, Activation, BnCache, EdgeMode, PadMode};
use crate::tensor::{Param, Tensor4};

pub const BN_MOMENTUM: f64 = 0.1;
pub const NORM_EPS: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Running mean/variance for one batch-norm layer.
#[derive(Debug, Clone)]
pub struct BnRunning {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

#[derive(Debug, Clone)]
struct ConvSpec {
    weight: usize,
    bias: Option<usize>,
    stride: usize,
    padding: usize,
}

#[derive(Debug, Clone)]
struct NormSpec {
    kind: NormKind,
    gamma: usize,
    beta: usize,
    /// Index into the running-stat store for batch norm.
    stats: Option<usize>,
}

#[derive(Debug, Clone)]
struct ConvBlock {
    conv: ConvSpec,
    norm: Option<NormSpec>,
    relu: bool,
}

#[derive(Debug, Clone)]
struct UpArch {
    lateral: ConvBlock,
    att: Option<ConvSpec>,
}

#[derive(Debug, Clone)]
enum PaArch {
    /// 1x1 main path modulated by the pooled conv pyramid.
    Full {
        main: ConvBlock,
        pyr: Vec<ConvBlock>,
        gap: Option<ConvSpec>,
    },
    /// The No-PA ablation: plain 1x1 conv + norm + ReLU.
    Plain(ConvBlock),
}

#[derive(Debug, Clone)]
struct DecoderArch {
    pa: PaArch,
    ups: Vec<UpArch>,
}

#[derive(Debug, Clone)]
struct Arch {
    stem: ConvBlock,
    stages: Vec<(ConvBlock, ConvBlock)>,
    decoder: Option<DecoderArch>,
    head: ConvSpec,
}

/// A named spatial node captured during a traced forward.
#[derive(Debug, Clone)]
pub struct TracedNode {
    pub name: String,
    pub id: NodeId,
    /// Output stride relative to the input image.
    pub stride: usize,
}

/// One forward pass: the tape plus handles into it.
pub struct ForwardPass {
    pub graph: Graph,
    pub input: NodeId,
    pub logits: NodeId,
    pub heatmap: NodeId,
    pub traced: Vec<TracedNode>,
    /// Batch statistics gathered in train mode, to fold into running stats.
    pub bn_updates: Vec<(usize, BnCache)>,
}

impl ForwardPass {
    pub fn output(&self) -> ModelOutput {
        ModelOutput {
            logits: self.graph.value(self.logits).clone(),
            heatmap: self.graph.value(self.heatmap).clone(),
        }
    }
}

pub struct Model {
    pub kind: VariantKind,
    pub enc_cfg: EncoderConfig,
    pub pylon_cfg: PylonConfig,
    pub pad_mode: PadMode,
    pub seed: u64,
    params: Vec<Param>,
    bn_stats: Vec<BnRunning>,
    arch: Arch,
}

struct Builder {
    params: Vec<Param>,
    stats: Vec<BnRunning>,
    rng: ChaCha20Rng,
}

impl Builder {
    fn conv(
        &mut self,
        name: &str,
        c_in: usize,
        c_out: usize,
        k: usize,
        stride: usize,
        with_bias: bool,
        std_override: Option<f64>,
    ) -> ConvSpec {
        let std = std_override.unwrap_or_else(|| (2.0 / (c_in * k * k) as f64).sqrt());
        let dist = Normal::new(0.0, std).expect("valid init std");
        let data = (0..c_out * c_in * k * k)
            .map(|_| dist.sample(&mut self.rng))
            .collect();
        let weight = Tensor4::from_vec(c_out, c_in, k, k, data).expect("weight shape");
        self.params.push(Param::new(format!("{name}.weight"), weight));
        let w_idx = self.params.len() - 1;
        let b_idx = with_bias.then(|| {
            self.params
                .push(Param::new(format!("{name}.bias"), Tensor4::channel_vec(vec![0.0; c_out])));
            self.params.len() - 1
        });
        ConvSpec {
            weight: w_idx,
            bias: b_idx,
            stride,
            padding: k / 2,
        }
    }

    fn norm(&mut self, name: &str, kind: NormKind, c: usize) -> NormSpec {
        self.params
            .push(Param::new(format!("{name}.gamma"), Tensor4::channel_vec(vec![1.0; c])));
        let gamma = self.params.len() - 1;
        self.params
            .push(Param::new(format!("{name}.beta"), Tensor4::channel_vec(vec![0.0; c])));
        let beta = self.params.len() - 1;
        let stats = matches!(kind, NormKind::Batch).then(|| {
            self.stats.push(BnRunning {
                mean: vec![0.0; c],
                var: vec![1.0; c],
            });
            self.stats.len() - 1
        });
        NormSpec {
            kind,
            gamma,
            beta,
            stats,
        }
    }

    fn block(
        &mut self,
        name: &str,
        c_in: usize,
        c_out: usize,
        k: usize,
        stride: usize,
        norm: NormKind,
    ) -> ConvBlock {
        ConvBlock {
            conv: self.conv(name, c_in, c_out, k, stride, false, None),
            norm: Some(self.norm(&format!("{name}.norm"), norm, c_out)),
            relu: true,
        }
    }
}

impl Model {
    /// Build a variant with zero-padded convs (the standard configuration).
    pub fn build(
        kind: VariantKind,
        enc_cfg: EncoderConfig,
        pylon_cfg: PylonConfig,
        seed: u64,
    ) -> Result<Model> {
        Model::build_with_pad(kind, enc_cfg, pylon_cfg, seed, PadMode::Zeros)
    }

    /// Build with an explicit conv padding mode. Circular padding exists so
    /// equivariance audits are exact instead of boundary-polluted; it also
    /// switches bilinear upsampling to wraparound sampling.
    pub fn build_with_pad(
        kind: VariantKind,
        enc_cfg: EncoderConfig,
        mut pylon_cfg: PylonConfig,
        seed: u64,
        pad_mode: PadMode,
    ) -> Result<Model> {
        enc_cfg.validate()?;

        // The variant kind resolves the ablation toggles.
        match kind {
            VariantKind::Backbone | VariantKind::Pylon => {}
            VariantKind::PylonNoPa => pylon_cfg.use_pa = false,
            VariantKind::PylonAtt => pylon_cfg.inject_gap = GapInjection::UpAttention,
            VariantKind::Pylon1Up => pylon_cfg.n_up = 1,
            VariantKind::Pylon2Up => pylon_cfg.n_up = 2,
            VariantKind::DecoderGap => pylon_cfg.inject_gap = GapInjection::PaBranch,
            VariantKind::DecoderGroupNorm => {
                if pylon_cfg.norm == NormKind::Batch {
                    let mut g = 32;
                    while g > 1 && pylon_cfg.decoder_channels % g != 0 {
                        g /= 2;
                    }
                    pylon_cfg.norm = NormKind::Group(g);
                }
            }
        }
        pylon_cfg.validate()?;

        let mut b = Builder {
            params: Vec::new(),
            stats: Vec::new(),
            rng: ChaCha20Rng::seed_from_u64(seed),
        };

        let ch = enc_cfg.stage_channels;
        let stem = b.block("encoder.stem", enc_cfg.in_channels, ch[0], 7, 2, NormKind::Batch);
        let mut stages = Vec::new();
        for s in 0..3 {
            let (c_in, c_out) = (ch[s], ch[s + 1]);
            let b1 = b.block(&format!("encoder.stage{}.0", s + 1), c_in, c_out, 3, 2, NormKind::Batch);
            let b2 = b.block(&format!("encoder.stage{}.1", s + 1), c_out, c_out, 3, 1, NormKind::Batch);
            stages.push((b1, b2));
        }

        let deepest = enc_cfg.input_size / 32;
        let dc = pylon_cfg.decoder_channels;
        let dnorm = pylon_cfg.norm;

        let decoder = if kind == VariantKind::Backbone {
            None
        } else {
            let pa = if pylon_cfg.use_pa {
                let main = b.block("decoder.pa.main", ch[3], dc, 1, 1, dnorm);
                // Pyramid depth auto-reduces on tiny maps (desk scale).
                let levels = (deepest as f64).log2().floor() as usize;
                let levels = levels.min(3);
                let kernels = [7usize, 5, 3];
                let pyr = (0..levels)
                    .map(|l| {
                        let c_in = if l == 0 { ch[3] } else { dc };
                        b.block(&format!("decoder.pa.pyr{l}"), c_in, dc, kernels[l], 1, dnorm)
                    })
                    .collect();
                let gap = (pylon_cfg.inject_gap == GapInjection::PaBranch)
                    .then(|| b.conv("decoder.pa.gap", ch[3], dc, 1, 1, true, None));
                PaArch::Full { main, pyr, gap }
            } else {
                PaArch::Plain(b.block("decoder.pa_replacement", ch[3], dc, 1, 1, dnorm))
            };

            let up_k = pylon_cfg.up_conv.kernel();
            let ups = (0..pylon_cfg.n_up)
                .map(|i| {
                    // UP module i fuses the encoder map at stride 32 / 2^(i+1).
                    let skip_ch = ch[2 - i];
                    let lateral =
                        b.block(&format!("decoder.up{}.lateral", i + 1), skip_ch, dc, up_k, 1, dnorm);
                    let att = (pylon_cfg.inject_gap == GapInjection::UpAttention)
                        .then(|| b.conv(&format!("decoder.up{}.att", i + 1), dc, dc, 1, 1, true, None));
                    UpArch { lateral, att }
                })
                .collect();
            Some(DecoderArch { pa, ups })
        };

        let head_in = if decoder.is_some() { dc } else { ch[3] };
        // Small-variance init keeps early heatmaps near zero, which stabilizes
        // the global-max-pool gradient at the start of training.
        let head = b.conv("head", head_in, pylon_cfg.n_classes, 1, 1, true, Some(0.01));

        Ok(Model {
            kind,
            enc_cfg,
            pylon_cfg,
            pad_mode,
            seed,
            params: b.params,
            bn_stats: b.stats,
            arch: Arch {
                stem,
                stages,
                decoder,
                head,
            },
        })
    }

    pub fn params(&self) -> &[Param] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Param] {
        &mut self.params
    }

    pub fn bn_stats(&self) -> &[BnRunning] {
        &self.bn_stats
    }

    pub fn bn_stats_mut(&mut self) -> &mut [BnRunning] {
        &mut self.bn_stats
    }

    pub fn zero_grads(&mut self) {
        for p in &mut self.params {
            p.zero_grad();
        }
    }

    /// Stride of the heatmap relative to the input image.
    pub fn output_stride(&self) -> usize {
        match &self.arch.decoder {
            None => 32,
            Some(d) => 32 >> d.ups.len(),
        }
    }

    pub fn heatmap_size(&self) -> usize {
        self.enc_cfg.input_size / self.output_stride()
    }

    pub fn param_count(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    /// Parameter count of the decoder + head (everything after the encoder).
    pub fn decoder_param_count(&self) -> usize {
        self.params
            .iter()
            .filter(|p| p.name.starts_with("decoder") || p.name.starts_with("head"))
            .map(|p| p.value.len())
            .sum()
    }

    fn edge_mode(&self) -> EdgeMode {
        match self.pad_mode {
            PadMode::Zeros => EdgeMode::Clamp,
            PadMode::Circular => EdgeMode::Wrap,
        }
    }

    fn run_conv(
        &self,
        g: &mut Graph,
        x: NodeId,
        spec: &ConvSpec,
    ) -> Result<NodeId> {
        let w = g.param_leaf(self.params[spec.weight].value.clone(), spec.weight);
        let bias = spec
            .bias
            .map(|bi| g.param_leaf(self.params[bi].value.clone(), bi));
        g.conv2d(x, w, bias, spec.stride, spec.padding, self.pad_mode)
    }

    fn run_block(
        &self,
        g: &mut Graph,
        x: NodeId,
        block: &ConvBlock,
        mode: Mode,
        bn_updates: &mut Vec<(usize, BnCache)>,
    ) -> Result<NodeId> {
        let mut cur = self.run_conv(g, x, &block.conv)?;
        if let Some(norm) = &block.norm {
            let gamma = g.param_leaf(self.params[norm.gamma].value.clone(), norm.gamma);
            let beta = g.param_leaf(self.params[norm.beta].value.clone(), norm.beta);
            cur = match norm.kind {
                NormKind::Batch => {
                    let si = norm.stats.expect("batch norm has running stats");
                    match mode {
                        Mode::Train => {
                            let (id, cache) = g.batch_norm_train(cur, gamma, beta, NORM_EPS)?;
                            bn_updates.push((si, cache));
                            id
                        }
                        Mode::Eval => {
                            let st = &self.bn_stats[si];
                            g.batch_norm_eval(cur, gamma, beta, &st.mean, &st.var, NORM_EPS)?
                        }
                    }
                }
                NormKind::Group(n_groups) => g.group_norm(cur, n_groups, gamma, beta, NORM_EPS)?,
            };
        }
        if block.relu {
            cur = g.activation(cur, Activation::Relu);
        }
        Ok(cur)
    }

    /// Full forward pass on the tape. Train mode collects batch-norm updates
    /// which the caller folds in via [`Model::apply_bn_updates`]; eval mode
    /// reads running stats and leaves the model untouched.
    pub fn forward_pass(&self, images: &Tensor4, mode: Mode) -> Result<ForwardPass> {
        let size = self.enc_cfg.input_size;
        if images.h != size || images.w != size || images.c != self.enc_cfg.in_channels {
            return Err(PylonError::Dimension(format!(
                "forward: expected input (n, {}, {size}, {size}), got {:?}",
                self.enc_cfg.in_channels,
                images.shape()
            )));
        }
        let mut g = Graph::new();
        let mut traced = Vec::new();
        let mut bn_updates = Vec::new();
        let input = g.leaf(images.clone());

        // Encoder: stride 4/8/16/32 pyramid.
        let mut cur = self.run_block(&mut g, input, &self.arch.stem, mode, &mut bn_updates)?;
        cur = g.max_pool2d(cur)?;
        traced.push(TracedNode {
            name: "enc.s4".into(),
            id: cur,
            stride: 4,
        });
        let mut feats = vec![cur];
        for (i, (b1, b2)) in self.arch.stages.iter().enumerate() {
            cur = self.run_block(&mut g, cur, b1, mode, &mut bn_updates)?;
            cur = self.run_block(&mut g, cur, b2, mode, &mut bn_updates)?;
            traced.push(TracedNode {
                name: format!("enc.s{}", 8 << i),
                id: cur,
                stride: 8 << i,
            });
            feats.push(cur);
        }
        let deepest = feats[3];

        let pre_head = match &self.arch.decoder {
            None => deepest,
            Some(dec) => {
                let mut d = match &dec.pa {
                    PaArch::Plain(block) => {
                        let id = self.run_block(&mut g, deepest, block, mode, &mut bn_updates)?;
                        traced.push(TracedNode {
                            name: "pa".into(),
                            id,
                            stride: 32,
                        });
                        id
                    }
                    PaArch::Full { main, pyr, gap } => {
                        let main_id = self.run_block(&mut g, deepest, main, mode, &mut bn_updates)?;
                        let id = if pyr.is_empty() {
                            main_id
                        } else {
                            // Pooled conv chain, then upsample-and-add back up.
                            let mut pooled = deepest;
                            let mut convs = Vec::new();
                            let mut sizes = Vec::new();
                            for block in pyr {
                                pooled = g.max_pool2d(pooled)?;
                                let (_, _, ph, pw) = g.value(pooled).shape();
                                sizes.push((ph, pw));
                                convs.push(self.run_block(&mut g, pooled, block, mode, &mut bn_updates)?);
                            }
                            let edge = self.edge_mode();
                            let mut u = convs[convs.len() - 1];
                            for l in (0..convs.len() - 1).rev() {
                                let (th, tw) = sizes[l];
                                let up = g.bilinear_upsample(u, th, tw, edge)?;
                                u = g.add(up, convs[l])?;
                            }
                            let (_, _, mh, mw) = g.value(main_id).shape();
                            let mult = g.bilinear_upsample(u, mh, mw, edge)?;
                            g.mul(main_id, mult)?
                        };
                        let id = if let Some(gap_conv) = gap {
                            let pooled = g.global_avg_pool(deepest);
                            let a = self.run_conv(&mut g, pooled, gap_conv)?;
                            // Broadcast the GAP branch to a spatial node so the
                            // auditor sees it by name.
                            let (bn, bc, bh, bw) = g.value(id).shape();
                            let zeros = g.leaf(Tensor4::zeros(bn, bc, bh, bw));
                            let branch = g.add_channel(zeros, a)?;
                            traced.push(TracedNode {
                                name: "pa.gap_branch".into(),
                                id: branch,
                                stride: 32,
                            });
                            g.add(id, branch)?
                        } else {
                            id
                        };
                        traced.push(TracedNode {
                            name: "pa".into(),
                            id,
                            stride: 32,
                        });
                        id
                    }
                };

                for (i, up) in dec.ups.iter().enumerate() {
                    let skip = feats[2 - i];
                    let mut lateral = self.run_block(&mut g, skip, &up.lateral, mode, &mut bn_updates)?;
                    if let Some(att_conv) = &up.att {
                        let pooled = g.global_avg_pool(d);
                        let a = self.run_conv(&mut g, pooled, att_conv)?;
                        let s = g.activation(a, Activation::Sigmoid);
                        lateral = g.mul_channel(lateral, s)?;
                    }
                    let (_, _, lh, lw) = g.value(lateral).shape();
                    let upsampled = g.bilinear_upsample(d, lh, lw, self.edge_mode())?;
                    d = g.add(lateral, upsampled)?;
                    traced.push(TracedNode {
                        name: format!("up{}", i + 1),
                        id: d,
                        stride: 32 >> (i + 1),
                    });
                }
                d
            }
        };

        // Final 1x1 conv with no norm or activation, then global max pool.
        let heatmap = self.run_conv(&mut g, pre_head, &self.arch.head)?;
        traced.push(TracedNode {
            name: "heatmap".into(),
            id: heatmap,
            stride: self.output_stride(),
        });
        let logits = g.global_max_pool(heatmap);

        Ok(ForwardPass {
            graph: g,
            input,
            logits,
            heatmap,
            traced,
            bn_updates,
        })
    }

    /// Fold train-mode batch statistics into the running estimates.
    pub fn apply_bn_updates(&mut self, updates: &[(usize, BnCache)]) {
        for (si, cache) in updates {
            let st = &mut self.bn_stats[*si];
            for ci in 0..st.mean.len() {
                st.mean[ci] = (1.0 - BN_MOMENTUM) * st.mean[ci] + BN_MOMENTUM * cache.mean[ci];
                st.var[ci] = (1.0 - BN_MOMENTUM) * st.var[ci] + BN_MOMENTUM * cache.var[ci];
            }
        }
    }

    /// Eval-mode forward returning just the output pair.
    pub fn infer(&self, images: &Tensor4) -> Result<ModelOutput> {
        let pass = self.forward_pass(images, Mode::Eval)?;
        Ok(pass.output())
    }

    /// Accumulate parameter gradients from a completed pass.
    pub fn backward_from(&mut self, pass: &ForwardPass, loss: NodeId) -> Result<()> {
        let mut grads = pass.graph.backward(loss)?;
        for (idx, g) in pass.graph.param_grads(&mut grads) {
            self.params[idx].grad.add_assign(&g);
        }
        Ok(())
    }

    pub(crate) fn set_param_by_name(&mut self, name: &str, value: Tensor4) -> Result<()> {
        let p = self
            .params
            .iter_mut()
            .find(|p| p.name == name)
            .ok_or_else(|| PylonError::Checkpoint(format!("unknown parameter `{name}`")))?;
        if !p.value.same_shape(&value) {
            return Err(PylonError::Checkpoint(format!(
                "parameter `{name}` shape mismatch: {:?} vs {:?}",
                p.value.shape(),
                value.shape()
            )));
        }
        p.value = value;
        Ok(())
    }

    /// Zero every pyramid-path conv weight (test hook for the multiplicative
    /// wiring of the PA module).
    pub fn zero_pa_pyramid(&mut self) {
        let indices: Vec<usize> = match &self.arch.decoder {
            Some(DecoderArch {
                pa: PaArch::Full { pyr, .. },
                ..
            }) => pyr.iter().map(|b| b.conv.weight).collect(),
            _ => Vec::new(),
        };
        for i in indices {
            self.params[i].value.fill(0.0);
        }
    }
}

/// Per-class spatial max of a heatmap, as (n, c, 1, 1) logits.
pub fn heatmap_logits(heatmap: &Tensor4) -> Tensor4 {
    global_max_pool(heatmap).0
}
