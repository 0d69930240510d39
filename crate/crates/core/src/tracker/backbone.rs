use candle_core::{Device, Tensor};

use crate::config::TrackerConfig;
use crate::error::{Error, Result};
use crate::frame::Patch;
use crate::nn::{conv2d, group_norm, Init, ParamStore};

pub const NUM_STAGES: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PatchKind {
    Template,
    Search,
}

/// Per-stage feature maps, each `(batch, C_m, H_m, W_m)` with sides halving
/// from stage to stage.
#[derive(Debug, Clone)]
pub struct FeaturePyramid {
    pub stages: Vec<Tensor>,
    pub kind: PatchKind,
}

impl FeaturePyramid {
    /// Stage `m` in 1..=4.
    pub fn stage(&self, m: usize) -> &Tensor {
        &self.stages[m - 1]
    }

    pub fn detach(&self) -> FeaturePyramid {
        FeaturePyramid {
            stages: self.stages.iter().map(|t| t.detach()).collect(),
            kind: self.kind,
        }
    }
}

/// Four stages of `conv3x3/2 -> GN -> ReLU -> conv3x3 -> GN -> ReLU`.
#[derive(Debug, Clone)]
pub struct Backbone {
    pub params: ParamStore,
    pub widths: Vec<usize>,
    pub in_channels: usize,
    pub groups: usize,
}

impl Backbone {
    pub fn new(cfg: &TrackerConfig, init: &mut Init) -> Result<Self> {
        if cfg.widths.len() != NUM_STAGES {
            return Err(Error::Config(format!("backbone needs {NUM_STAGES} widths")));
        }
        let mut params = ParamStore::new();
        let mut cin = cfg.in_channels;
        for (m, &w) in cfg.widths.iter().enumerate() {
            let s = m + 1;
            params.insert(format!("s{s}.conv1.w"), init.conv(w, cin, 3)?)?;
            params.insert(format!("s{s}.conv1.b"), init.zeros(&[w])?)?;
            params.insert(format!("s{s}.gn1.g"), init.full(&[w], 1.0)?)?;
            params.insert(format!("s{s}.gn1.b"), init.zeros(&[w])?)?;
            params.insert(format!("s{s}.conv2.w"), init.conv(w, w, 3)?)?;
            params.insert(format!("s{s}.conv2.b"), init.zeros(&[w])?)?;
            params.insert(format!("s{s}.gn2.g"), init.full(&[w], 1.0)?)?;
            params.insert(format!("s{s}.gn2.b"), init.zeros(&[w])?)?;
            cin = w;
        }
        Ok(Self {
            params,
            widths: cfg.widths.clone(),
            in_channels: cfg.in_channels,
            groups: cfg.norm_groups,
        })
    }

    /// Runs the backbone on a `(batch, in_channels, side, side)` tensor.
    pub fn forward(&self, x: &Tensor, kind: PatchKind) -> Result<FeaturePyramid> {
        let (_, c, h, w) = x.dims4()?;
        if c != self.in_channels {
            return Err(Error::Shape(format!(
                "backbone expects {} input channels, got {c}",
                self.in_channels
            )));
        }
        if h % 16 != 0 || w % 16 != 0 {
            return Err(Error::Shape(format!(
                "patch side {h}x{w} is not divisible by 16"
            )));
        }
        let p = &self.params;
        let mut cur = x.clone();
        let mut stages = Vec::with_capacity(NUM_STAGES);
        for s in 1..=NUM_STAGES {
            let y = conv2d(&cur, p.t(&format!("s{s}.conv1.w"))?, Some(p.t(&format!("s{s}.conv1.b"))?), 2, 1)?;
            let y = group_norm(&y, self.groups, p.t(&format!("s{s}.gn1.g"))?, p.t(&format!("s{s}.gn1.b"))?)?.relu()?;
            let y = conv2d(&y, p.t(&format!("s{s}.conv2.w"))?, Some(p.t(&format!("s{s}.conv2.b"))?), 1, 1)?;
            let y = group_norm(&y, self.groups, p.t(&format!("s{s}.gn2.g"))?, p.t(&format!("s{s}.gn2.b"))?)?.relu()?;
            stages.push(y.clone());
            cur = y;
        }
        Ok(FeaturePyramid { stages, kind })
    }
}

/// Stacks patches into a `(batch, channels, side, side)` tensor on [0, 1].
pub fn patches_to_tensor(patches: &[&Patch], channels: usize) -> Result<Tensor> {
    let side = patches
        .first()
        .map(|p| p.side)
        .ok_or_else(|| Error::Shape("empty patch batch".into()))?;
    let mut data = Vec::with_capacity(patches.len() * channels * side * side);
    for p in patches {
        if p.side != side {
            return Err(Error::Shape("patch sides differ within a batch".into()));
        }
        data.extend(p.to_chw(channels));
    }
    Ok(Tensor::from_vec(data, (patches.len(), channels, side, side), &Device::Cpu)?)
}

/// Single-patch convenience wrapper around [`Backbone::forward`].
pub fn extract_pyramid(patch: &Patch, backbone: &Backbone, kind: PatchKind) -> Result<FeaturePyramid> {
    let x = patches_to_tensor(&[patch], backbone.in_channels)?;
    backbone.forward(&x, kind)
}
