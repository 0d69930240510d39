//! Adversarial global alignment: gradient reversal, per-stage transformer
//! style discriminators and least-squares adversarial losses.
//!
//! Scores near 0 mean "source", near 1 mean "target".

use std::collections::BTreeMap;

use candle_core::{Tensor, D};

use crate::config::AgdaConfig;
use crate::data::Domain;
use crate::error::{Error, Result};
use crate::nn::{grad_scale, layer_norm, linear, softmax_last, Init, ParamStore};

/// Identity forward, gradient multiplied by `-coefficient` backward.
pub fn grl(x: &Tensor, coefficient: f64) -> Result<Tensor> {
    if !(coefficient >= 0.0) {
        return Err(Error::Config(format!("GRL coefficient {coefficient} must be >= 0")));
    }
    grad_scale(x, -coefficient)
}

/// Shape of one stage discriminator.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DiscriminatorShape {
    pub channels: usize,
    pub d_model: usize,
    pub heads: usize,
    pub ff: usize,
    pub layers: usize,
    pub max_token_side: usize,
}

/// One discriminator per participating backbone stage, sharing a single
/// parameter store under `d{stage}.` prefixes.
#[derive(Debug, Clone)]
pub struct StyleDiscriminator {
    pub params: ParamStore,
    pub shapes: BTreeMap<usize, DiscriminatorShape>,
}

impl StyleDiscriminator {
    pub fn new(cfg: &AgdaConfig, widths: &[usize], init: &mut Init) -> Result<Self> {
        if cfg.d_model % cfg.n_heads != 0 {
            return Err(Error::Config(format!(
                "agda.d_model {} not divisible by agda.n_heads {}",
                cfg.d_model, cfg.n_heads
            )));
        }
        let mut params = ParamStore::new();
        let mut shapes = BTreeMap::new();
        for &m in &cfg.stages {
            let c = *widths
                .get(m.wrapping_sub(1))
                .ok_or_else(|| Error::Config(format!("agda stage {m} outside 1..={}", widths.len())))?;
            let shape = DiscriminatorShape {
                channels: c,
                d_model: cfg.d_model,
                heads: cfg.n_heads,
                ff: cfg.ff_width,
                layers: cfg.layers,
                max_token_side: cfg.max_token_side.max(1),
            };
            let p = |n: &str| format!("d{m}.{n}");
            let d = cfg.d_model;
            params.insert(p("proj.w"), init.linear(d, c)?)?;
            params.insert(p("proj.b"), init.zeros(&[d])?)?;
            for l in 0..cfg.layers {
                for w in ["q", "k", "v", "o"] {
                    params.insert(p(&format!("l{l}.{w}.w")), init.linear(d, d)?)?;
                    params.insert(p(&format!("l{l}.{w}.b")), init.zeros(&[d])?)?;
                }
                params.insert(p(&format!("l{l}.ff1.w")), init.linear(cfg.ff_width, d)?)?;
                params.insert(p(&format!("l{l}.ff1.b")), init.zeros(&[cfg.ff_width])?)?;
                params.insert(p(&format!("l{l}.ff2.w")), init.linear(d, cfg.ff_width)?)?;
                params.insert(p(&format!("l{l}.ff2.b")), init.zeros(&[d])?)?;
                for n in ["ln1", "ln2"] {
                    params.insert(p(&format!("l{l}.{n}.g")), init.full(&[d], 1.0)?)?;
                    params.insert(p(&format!("l{l}.{n}.b")), init.zeros(&[d])?)?;
                }
            }
            params.insert(p("out.w"), init.linear(1, d)?)?;
            params.insert(p("out.b"), init.full(&[1], 0.5)?)?;
            shapes.insert(m, shape);
        }
        Ok(Self { params, shapes })
    }

    pub fn stages(&self) -> impl Iterator<Item = usize> + '_ {
        self.shapes.keys().copied()
    }

    /// Score per sample for a `(B, C, H, W)` stage feature map. No gradient
    /// reversal is applied here; callers wrap the input with [`grl`] when the
    /// reversed path is wanted.
    pub fn discriminate(&self, feat: &Tensor, stage: usize) -> Result<Tensor> {
        let shape = self
            .shapes
            .get(&stage)
            .ok_or_else(|| Error::Config(format!("no discriminator for stage {stage}")))?;
        let (b, c, h, w) = feat.dims4()?;
        if c != shape.channels {
            return Err(Error::Shape(format!(
                "stage {stage} discriminator expects {} channels, got {c}",
                shape.channels
            )));
        }
        if h * w == 0 {
            return Err(Error::Shape("discriminator got zero tokens".into()));
        }
        let feat = pool_tokens(feat, shape.max_token_side)?;
        let (_, _, h, w) = feat.dims4()?;
        let n = h * w;
        let p = |k: &str| self.params.t(&format!("d{stage}.{k}"));
        let tokens = feat.reshape((b, c, n))?.transpose(1, 2)?.contiguous()?;
        let mut x = linear(&tokens, p("proj.w")?, p("proj.b")?)?;
        let (d, nh) = (shape.d_model, shape.heads);
        let dh = d / nh;
        for l in 0..shape.layers {
            let lp = |k: &str| p(&format!("l{l}.{k}"));
            let heads = |t: Tensor| -> Result<Tensor> {
                Ok(t.reshape((b, n, nh, dh))?.transpose(1, 2)?.contiguous()?)
            };
            let q = heads(linear(&x, lp("q.w")?, lp("q.b")?)?)?;
            let k = heads(linear(&x, lp("k.w")?, lp("k.b")?)?)?;
            let v = heads(linear(&x, lp("v.w")?, lp("v.b")?)?)?;
            let att = (q.matmul(&k.transpose(2, 3)?.contiguous()?)? / (dh as f64).sqrt())?;
            let att = softmax_last(&att)?;
            let ctx = att.matmul(&v)?.transpose(1, 2)?.contiguous()?.reshape((b, n, d))?;
            let ctx = linear(&ctx, lp("o.w")?, lp("o.b")?)?;
            x = layer_norm(&(x + ctx)?, lp("ln1.g")?, lp("ln1.b")?)?;
            let ff = linear(&linear(&x, lp("ff1.w")?, lp("ff1.b")?)?.relu()?, lp("ff2.w")?, lp("ff2.b")?)?;
            x = layer_norm(&(x + ff)?, lp("ln2.g")?, lp("ln2.b")?)?;
        }
        let pooled = x.mean(1)?;
        Ok(linear(&pooled, p("out.w")?, p("out.b")?)?.squeeze(D::Minus1)?)
    }
}

/// Block-average pooling so attention stays within `max_side`² tokens. The
/// block is the smallest divisor of each side that brings it under the cap.
fn pool_tokens(feat: &Tensor, max_side: usize) -> Result<Tensor> {
    let (_, _, h, w) = feat.dims4()?;
    let block = |s: usize| (1..=s).find(|k| s % k == 0 && s / k <= max_side).unwrap_or(s);
    let (kh, kw) = (block(h), block(w));
    if kh == 1 && kw == 1 {
        return Ok(feat.clone());
    }
    Ok(feat.avg_pool2d_with_stride((kh, kw), (kh, kw))?)
}

/// Generator loss: target-domain scores pushed toward the source label 0.
pub fn adv_loss_g(d_xt: &Tensor, d_zt: &Tensor) -> Result<Tensor> {
    Ok((d_xt.sqr()?.mean_all()? + d_zt.sqr()?.mean_all()?)?)
}

/// Discriminator loss over both domains, each scored on search and template.
pub fn adv_loss_d(scores: &BTreeMap<Domain, (Tensor, Tensor)>) -> Result<Tensor> {
    let mut total: Option<Tensor> = None;
    for dom in [Domain::Source, Domain::Target] {
        let (dx, dz) = scores
            .get(&dom)
            .ok_or_else(|| Error::Data(format!("discriminator loss needs {} scores", dom.as_str())))?;
        let l = dom.label();
        let term = ((dx - l)?.sqr()?.mean_all()? + (dz - l)?.sqr()?.mean_all()?)?;
        total = Some(match total {
            Some(t) => (t + term)?,
            None => term,
        });
    }
    Ok(total.expect("two domains"))
}

/// Mean of per-stage losses.
pub fn mean_over_stages(losses: &[Tensor]) -> Result<Tensor> {
    let first = losses
        .first()
        .ok_or_else(|| Error::Config("no adversarial stages".into()))?;
    let mut acc = first.clone();
    for l in &losses[1..] {
        acc = (acc + l)?;
    }
    Ok((acc / losses.len() as f64)?)
}
