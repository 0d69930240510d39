use candle_core::Tensor;

use crate::config::TrackerConfig;
use crate::error::{Error, Result};
use crate::nn::{conv2d, group_norm, Init, ParamStore};

/// Raw head maps, all `(B, ·, n, n)` over the response grid.
#[derive(Debug, Clone)]
pub struct HeadOutput {
    /// Foreground logits, one channel.
    pub cls: Tensor,
    /// Distances `(l, t, r, b)` to the box sides in search pixels, strictly positive.
    pub reg: Tensor,
    /// Centerness logits, one channel.
    pub cen: Tensor,
}

impl HeadOutput {
    pub fn grid(&self) -> Result<usize> {
        Ok(self.cls.dim(2)?)
    }
}

/// Classification/centerness tower and regression tower over the response.
#[derive(Debug, Clone)]
pub struct Heads {
    pub params: ParamStore,
    pub in_channels: usize,
    pub width: usize,
    pub convs: usize,
    pub groups: usize,
    /// Search pixels per response cell.
    pub stride: f32,
}

impl Heads {
    pub fn new(cfg: &TrackerConfig, init: &mut Init) -> Result<Self> {
        let cin = cfg.widths[cfg.head_stage - 1];
        let w = cfg.head_width;
        let mut params = ParamStore::new();
        for tower in ["cls", "reg"] {
            let mut c = cin;
            for i in 0..cfg.head_convs {
                params.insert(format!("{tower}.{i}.w"), init.conv(w, c, 3)?)?;
                params.insert(format!("{tower}.{i}.b"), init.zeros(&[w])?)?;
                params.insert(format!("{tower}.{i}.gn.g"), init.full(&[w], 1.0)?)?;
                params.insert(format!("{tower}.{i}.gn.b"), init.zeros(&[w])?)?;
                c = w;
            }
        }
        let c = if cfg.head_convs == 0 { cin } else { w };
        params.insert("out.cls.w", init.conv_small(1, c, 3, 0.01)?)?;
        params.insert("out.cls.b", init.full(&[1], -2.0)?)?;
        params.insert("out.cen.w", init.conv_small(1, c, 3, 0.01)?)?;
        params.insert("out.cen.b", init.zeros(&[1])?)?;
        params.insert("out.reg.w", init.conv_small(4, c, 3, 0.01)?)?;
        params.insert("out.reg.b", init.zeros(&[4])?)?;
        Ok(Self {
            params,
            in_channels: cin,
            width: w,
            convs: cfg.head_convs,
            groups: cfg.norm_groups,
            stride: (1usize << cfg.head_stage) as f32,
        })
    }

    fn tower(&self, name: &str, x: &Tensor) -> Result<Tensor> {
        let p = &self.params;
        let mut y = x.clone();
        for i in 0..self.convs {
            y = conv2d(&y, p.t(&format!("{name}.{i}.w"))?, Some(p.t(&format!("{name}.{i}.b"))?), 1, 1)?;
            y = group_norm(&y, self.groups, p.t(&format!("{name}.{i}.gn.g"))?, p.t(&format!("{name}.{i}.gn.b"))?)?
                .relu()?;
        }
        Ok(y)
    }

    pub fn forward(&self, response: &Tensor) -> Result<HeadOutput> {
        let (_, c, h, w) = response.dims4()?;
        if h == 0 || w == 0 {
            return Err(Error::Shape("empty response map".into()));
        }
        if c != self.in_channels {
            return Err(Error::Shape(format!(
                "heads expect {} channels, got {c}",
                self.in_channels
            )));
        }
        let p = &self.params;
        let ct = self.tower("cls", response)?;
        let rt = self.tower("reg", response)?;
        let cls = conv2d(&ct, p.t("out.cls.w")?, Some(p.t("out.cls.b")?), 1, 1)?;
        let cen = conv2d(&ct, p.t("out.cen.w")?, Some(p.t("out.cen.b")?), 1, 1)?;
        let raw = conv2d(&rt, p.t("out.reg.w")?, Some(p.t("out.reg.b")?), 1, 1)?;
        // exp keeps distances positive; the clamp bounds it away from overflow
        let reg = (raw.clamp(-8f32, 8f32)?.exp()? * self.stride as f64)?;
        Ok(HeadOutput { cls, reg, cen })
    }
}

/// Search-patch coordinate of response cell `i` along one axis, for a
/// template feature map of side `template_side` at the head stage.
pub fn cell_location(i: usize, template_side: usize, stride: f32) -> f32 {
    (i as f32 + template_side as f32 / 2.0) * stride
}
