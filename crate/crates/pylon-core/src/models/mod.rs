//! Network variants: mini-encoder backbone, the PYLON decoder (PA + UP),
//! and the ablation toggles that reproduce the GAP / group-norm pathologies.

mod checkpoint;
mod model;

pub use model::{heatmap_logits, ForwardPass, Mode, Model, TracedNode};

use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{PylonError, Result};
use crate::tensor::ops::{bilinear_upsample, EdgeMode};
use crate::tensor::Tensor4;

/// Mini-encoder layout: a stem (7x7 stride-2 conv + 2x2 max pool) followed by
/// three stages of two 3x3 conv blocks, giving a stride 4/8/16/32 pyramid.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct EncoderConfig {
    pub in_channels: usize,
    pub stage_channels: [usize; 4],
    pub input_size: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            in_channels: 1,
            stage_channels: [16, 32, 64, 128],
            input_size: 64,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.input_size == 0 || self.input_size % 32 != 0 {
            return Err(PylonError::Config(format!(
                "input_size {} must be a positive multiple of 32",
                self.input_size
            )));
        }
        if self.stage_channels.windows(2).any(|p| p[1] < p[0]) {
            return Err(PylonError::Config(
                "stage_channels must be non-decreasing".into(),
            ));
        }
        if self.in_channels == 0 {
            return Err(PylonError::Config("in_channels must be >= 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum NormKind {
    Batch,
    Group(usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum GapInjection {
    None,
    PaBranch,
    UpAttention,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum UpConvKind {
    OneByOne,
    ThreeByThree,
}

impl UpConvKind {
    pub fn kernel(self) -> usize {
        match self {
            UpConvKind::OneByOne => 1,
            UpConvKind::ThreeByThree => 3,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct PylonConfig {
    pub n_classes: usize,
    pub decoder_channels: usize,
    pub n_up: usize,
    pub up_conv: UpConvKind,
    pub norm: NormKind,
    pub inject_gap: GapInjection,
    pub use_pa: bool,
}

impl Default for PylonConfig {
    fn default() -> Self {
        PylonConfig {
            n_classes: 2,
            decoder_channels: 128,
            n_up: 3,
            up_conv: UpConvKind::OneByOne,
            norm: NormKind::Batch,
            inject_gap: GapInjection::None,
            use_pa: true,
        }
    }
}

impl PylonConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_classes == 0 {
            return Err(PylonError::Config("n_classes must be >= 1".into()));
        }
        if !(1..=3).contains(&self.n_up) {
            return Err(PylonError::Config(format!("n_up {} must be 1..=3", self.n_up)));
        }
        if let NormKind::Group(g) = self.norm {
            if g == 0 || self.decoder_channels % g != 0 {
                return Err(PylonError::Config(format!(
                    "group count {g} must divide decoder_channels {}",
                    self.decoder_channels
                )));
            }
        }
        Ok(())
    }
}

/// Table-2 model rows plus the two decoder pathology toggles.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VariantKind {
    Backbone,
    Pylon,
    PylonNoPa,
    PylonAtt,
    Pylon1Up,
    Pylon2Up,
    DecoderGap,
    DecoderGroupNorm,
}

pub const ALL_VARIANTS: [VariantKind; 8] = [
    VariantKind::Backbone,
    VariantKind::Pylon,
    VariantKind::PylonNoPa,
    VariantKind::PylonAtt,
    VariantKind::Pylon1Up,
    VariantKind::Pylon2Up,
    VariantKind::DecoderGap,
    VariantKind::DecoderGroupNorm,
];

impl VariantKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            VariantKind::Backbone => "backbone",
            VariantKind::Pylon => "pylon",
            VariantKind::PylonNoPa => "pylon_no_pa",
            VariantKind::PylonAtt => "pylon_att",
            VariantKind::Pylon1Up => "pylon_1up",
            VariantKind::Pylon2Up => "pylon_2up",
            VariantKind::DecoderGap => "decoder_gap",
            VariantKind::DecoderGroupNorm => "decoder_groupnorm",
        }
    }
}

impl FromStr for VariantKind {
    type Err = PylonError;

    fn from_str(s: &str) -> Result<Self> {
        ALL_VARIANTS
            .iter()
            .find(|v| v.as_str() == s)
            .copied()
            .ok_or_else(|| {
                let names: Vec<_> = ALL_VARIANTS.iter().map(|v| v.as_str()).collect();
                PylonError::Config(format!("unknown variant `{s}`; expected one of {names:?}"))
            })
    }
}

/// Paired classification logits and pre-pool heatmap. The logits are the
/// spatial max of the heatmap, exactly.
#[derive(Debug, Clone)]
pub struct ModelOutput {
    /// (n, n_classes, 1, 1)
    pub logits: Tensor4,
    /// (n, n_classes, h_map, w_map)
    pub heatmap: Tensor4,
}

/// One class channel of the heatmap bilinearly upsampled to `target`.
pub fn cam_extract(
    output: &ModelOutput,
    class_idx: usize,
    target: (usize, usize),
) -> Result<Tensor4> {
    let hm = &output.heatmap;
    if class_idx >= hm.c {
        return Err(PylonError::Input(format!(
            "class index {class_idx} out of range for {} classes",
            hm.c
        )));
    }
    let mut chan = Tensor4::zeros(hm.n, 1, hm.h, hm.w);
    for ni in 0..hm.n {
        let start = chan.idx(ni, 0, 0, 0);
        chan.data[start..start + hm.h * hm.w].copy_from_slice(hm.plane(ni, class_idx));
    }
    bilinear_upsample(&chan, target.0, target.1, EdgeMode::Clamp)
}
