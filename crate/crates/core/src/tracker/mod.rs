//! Siamese anchor-free tracker: backbone, depthwise correlation, heads,
//! training loss and single-object inference.

mod backbone;
mod correlate;
mod heads;
mod inference;
mod loss;

use std::collections::HashMap;

use candle_core::Tensor;

pub use backbone::{extract_pyramid, patches_to_tensor, Backbone, FeaturePyramid, PatchKind, NUM_STAGES};
pub use correlate::{correlate, correlate_pooled};
pub use heads::{cell_location, HeadOutput, Heads};
pub use inference::{decode_box, hann_window, select_peak, track_sequence, TrackResult};
pub use loss::{cell_targets, tracking_loss, CellTargets, Grid, LossBundle, TrackLoss};

use crate::config::TrackerConfig;
use crate::error::{Error, Result};
use crate::nn::{Init, ParamStore};

/// Backbone plus heads. Parameters live in two stores so the trainer can
/// address them separately.
#[derive(Debug, Clone)]
pub struct TrackerModel {
    pub backbone: Backbone,
    pub heads: Heads,
    pub head_stage: usize,
}

impl TrackerModel {
    pub fn new(cfg: &TrackerConfig, seed: u64) -> Result<Self> {
        if !(1..=NUM_STAGES).contains(&cfg.head_stage) {
            return Err(Error::Config(format!("tracker.head_stage {} outside 1..=4", cfg.head_stage)));
        }
        let mut init = Init::new(seed);
        let backbone = Backbone::new(cfg, &mut init)?;
        let heads = Heads::new(cfg, &mut init)?;
        Ok(Self { backbone, heads, head_stage: cfg.head_stage })
    }

    pub fn stride(&self) -> f32 {
        self.heads.stride
    }

    /// Response-grid geometry for the given patch sides.
    pub fn grid(&self, template_side: usize, search_side: usize) -> Grid {
        let s = 1usize << self.head_stage;
        let zt = template_side / s;
        Grid {
            side: search_side / s - zt + 1,
            template_side: zt,
            stride: s as f32,
        }
    }

    /// Head outputs from already extracted pyramids.
    pub fn heads_from(&self, z: &FeaturePyramid, x: &FeaturePyramid) -> Result<HeadOutput> {
        let r = correlate(z.stage(self.head_stage), x.stage(self.head_stage))?;
        self.heads.forward(&r)
    }

    /// Full forward on `(B, C, T, T)` templates and `(B, C, S, S)` searches.
    pub fn forward(&self, z: &Tensor, x: &Tensor) -> Result<(FeaturePyramid, FeaturePyramid, HeadOutput)> {
        let zp = self.backbone.forward(z, PatchKind::Template)?;
        let xp = self.backbone.forward(x, PatchKind::Search)?;
        let out = self.heads_from(&zp, &xp)?;
        Ok((zp, xp, out))
    }

    pub fn to_map(&self) -> HashMap<String, Tensor> {
        let mut m = self.backbone.params.to_map("backbone.");
        m.extend(self.heads.params.to_map("heads."));
        m
    }

    pub fn load_map(&self, map: &HashMap<String, Tensor>) -> Result<()> {
        self.backbone.params.load_map(map, "backbone.")?;
        self.heads.params.load_map(map, "heads.")
    }

    pub fn content_hash(&self) -> Result<u64> {
        Ok(self.backbone.params.content_hash()? ^ self.heads.params.content_hash()?.rotate_left(1))
    }

    /// Backbone and head parameters in one store. The variables are shared,
    /// so updates through the returned store reach the model.
    pub fn param_store(&self) -> Result<ParamStore> {
        let mut ps = ParamStore::new();
        for (prefix, store) in [("backbone.", &self.backbone.params), ("heads.", &self.heads.params)] {
            for (k, v) in store.iter() {
                ps.insert_var(format!("{prefix}{k}"), v.clone());
            }
        }
        Ok(ps)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::{DType, Device, Var};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn small_cfg() -> TrackerConfig {
        TrackerConfig { widths: vec![4, 4, 8, 8], norm_groups: 2, head_width: 8, ..TrackerConfig::default() }
    }

    #[test]
    fn pyramid_shapes_halve() {
        let cfg = TrackerConfig::default();
        let m = TrackerModel::new(&cfg, 1).unwrap();
        let x = Tensor::zeros((1, 1, 192, 192), DType::F32, &Device::Cpu).unwrap();
        let p = m.backbone.forward(&x, PatchKind::Search).unwrap();
        let shapes: Vec<_> = p.stages.iter().map(|t| t.dims().to_vec()).collect();
        assert_eq!(
            shapes,
            vec![vec![1, 16, 96, 96], vec![1, 32, 48, 48], vec![1, 64, 24, 24], vec![1, 128, 12, 12]]
        );
    }

    #[test]
    fn rejects_side_not_divisible_by_16() {
        let m = TrackerModel::new(&small_cfg(), 1).unwrap();
        let x = Tensor::zeros((1, 1, 100, 100), DType::F32, &Device::Cpu).unwrap();
        assert!(m.backbone.forward(&x, PatchKind::Search).is_err());
    }

    #[test]
    fn forward_is_deterministic_and_shapes_agree() {
        let m = TrackerModel::new(&small_cfg(), 3).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let zv: Vec<f32> = (0..2 * 64 * 64).map(|_| rng.random()).collect();
        let xv: Vec<f32> = (0..2 * 128 * 128).map(|_| rng.random()).collect();
        let z = Tensor::from_vec(zv, (2, 1, 64, 64), &Device::Cpu).unwrap();
        let x = Tensor::from_vec(xv, (2, 1, 128, 128), &Device::Cpu).unwrap();
        let (_, _, a) = m.forward(&z, &x).unwrap();
        let (_, _, b) = m.forward(&z, &x).unwrap();
        let g = m.grid(64, 128);
        assert_eq!(a.cls.dims(), &[2, 1, g.side, g.side]);
        assert_eq!(a.reg.dims(), &[2, 4, g.side, g.side]);
        assert_eq!(a.cen.dims(), &[2, 1, g.side, g.side]);
        let flat = |t: &Tensor| t.flatten_all().unwrap().to_vec1::<f32>().unwrap();
        assert_eq!(flat(&a.cls), flat(&b.cls));
        assert!(flat(&a.reg).iter().all(|&v| v > 0.0));
    }

    #[test]
    fn map_round_trip() {
        let a = TrackerModel::new(&small_cfg(), 1).unwrap();
        let b = TrackerModel::new(&small_cfg(), 2).unwrap();
        assert_ne!(a.content_hash().unwrap(), b.content_hash().unwrap());
        b.load_map(&a.to_map()).unwrap();
        assert_eq!(a.content_hash().unwrap(), b.content_hash().unwrap());
    }

    #[test]
    fn backbone_gradient_matches_finite_differences() {
        let cfg = small_cfg();
        let m = TrackerModel::new(&cfg, 5).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut data: Vec<f64> = (0..32 * 32).map(|_| rng.random::<f64>()).collect();
        // probe weights fixed per stage
        let probes: Vec<Tensor> = m
            .backbone
            .forward(&Tensor::zeros((1, 1, 32, 32), DType::F32, &Device::Cpu).unwrap(), PatchKind::Search)
            .unwrap()
            .stages
            .iter()
            .map(|s| {
                let n = s.elem_count();
                let w: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
                Tensor::from_vec(w, s.dims(), &Device::Cpu).unwrap()
            })
            .collect();
        // f64 copy of the backbone so finite differences are meaningful
        let mut params = ParamStore::new();
        for (k, v) in m.backbone.params.iter() {
            params.insert(k.clone(), v.as_tensor().to_dtype(DType::F64).unwrap()).unwrap();
        }
        let bb = Backbone { params, ..m.backbone.clone() };
        let probe = |x: &Tensor| -> Tensor {
            let p = bb.forward(x, PatchKind::Search).unwrap();
            let mut acc = Tensor::zeros((), DType::F64, &Device::Cpu).unwrap();
            for (s, w) in p.stages.iter().zip(&probes) {
                acc = (acc + (s * w).unwrap().sum_all().unwrap()).unwrap();
            }
            acc
        };
        let x = Var::from_vec(data.clone(), (1, 1, 32, 32), &Device::Cpu).unwrap();
        let grads = probe(x.as_tensor()).backward().unwrap();
        let g = grads.get(x.as_tensor()).unwrap().flatten_all().unwrap().to_vec1::<f64>().unwrap();
        let h = 1e-5;
        let mut good = 0;
        let coords: Vec<usize> = (0..40).map(|_| rng.random_range(0..data.len())).collect();
        for &k in &coords {
            let orig = data[k];
            let mut eval = |v: f64| {
                data[k] = v;
                let t = Tensor::from_vec(data.clone(), (1, 1, 32, 32), &Device::Cpu).unwrap();
                probe(&t).to_scalar::<f64>().unwrap()
            };
            let fd = (eval(orig + h) - eval(orig - h)) / (2.0 * h);
            data[k] = orig;
            if (fd - g[k]).abs() <= 1e-3 * fd.abs().max(g[k].abs()).max(1e-6) {
                good += 1;
            }
        }
        assert!(good as f64 >= 0.95 * coords.len() as f64, "{good}/{}", coords.len());
    }
}
