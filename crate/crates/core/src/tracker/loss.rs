use candle_core::{Device, Tensor};
use serde::{Deserialize, Serialize};

use super::heads::{cell_location, HeadOutput};
use crate::error::{Error, Result};
use crate::geometry::BBox;
use crate::nn::{bce_with_logits, scalar_f64};

/// Geometry of the response grid in search-patch pixels.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Grid {
    pub side: usize,
    /// Template feature side at the head stage.
    pub template_side: usize,
    pub stride: f32,
}

impl Grid {
    pub fn location(&self, i: usize) -> f32 {
        cell_location(i, self.template_side, self.stride)
    }
}

/// Scalar loss terms of one iteration, as logged.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBundle {
    pub cls: f64,
    pub reg: f64,
    pub cen: f64,
    pub adv_g: f64,
    pub adv_d: f64,
    pub sub: f64,
    pub lambda: [f64; 3],
    pub no_positive: bool,
}

impl LossBundle {
    pub fn track_total(&self) -> f64 {
        self.lambda[0] * self.cls + self.lambda[1] * self.reg + self.lambda[2] * self.cen
    }
}

/// Differentiable tracking loss and its parts.
#[derive(Debug, Clone)]
pub struct TrackLoss {
    pub total: Tensor,
    pub cls: Tensor,
    pub reg: Tensor,
    pub cen: Tensor,
    pub positives: usize,
}

impl TrackLoss {
    pub fn bundle(&self, lambda: [f64; 3]) -> Result<LossBundle> {
        Ok(LossBundle {
            cls: scalar_f64(&self.cls)?,
            reg: scalar_f64(&self.reg)?,
            cen: scalar_f64(&self.cen)?,
            lambda,
            no_positive: self.positives == 0,
            ..Default::default()
        })
    }
}

/// Per-cell regression and centerness targets for one box.
pub struct CellTargets {
    pub label: Vec<f32>,
    /// `(l, t, r, b)` per cell; only meaningful where `label` is 1.
    pub ltrb: [Vec<f32>; 4],
    pub centerness: Vec<f32>,
}

/// A cell is positive when its location lies strictly inside the box.
pub fn cell_targets(grid: &Grid, gt: &BBox) -> CellTargets {
    let n = grid.side;
    let mut label = vec![0f32; n * n];
    let mut ltrb = [vec![1f32; n * n], vec![1f32; n * n], vec![1f32; n * n], vec![1f32; n * n]];
    let mut centerness = vec![0f32; n * n];
    for i in 0..n {
        let py = grid.location(i);
        for j in 0..n {
            let px = grid.location(j);
            if !gt.contains(px, py) {
                continue;
            }
            let k = i * n + j;
            let (l, t, r, b) = (px - gt.x, py - gt.y, gt.right() - px, gt.bottom() - py);
            label[k] = 1.0;
            ltrb[0][k] = l;
            ltrb[1][k] = t;
            ltrb[2][k] = r;
            ltrb[3][k] = b;
            centerness[k] = ((l.min(r) / l.max(r)) * (t.min(b) / t.max(b))).sqrt();
        }
    }
    CellTargets { label, ltrb, centerness }
}

fn binary_entropy(p: f64) -> f64 {
    let h = |q: f64| if q > 0.0 { -q * q.ln() } else { 0.0 };
    h(p) + h(1.0 - p)
}

/// Tracking loss over a batch. `cls` is class-balanced cross-entropy
/// (positive and negative cells weighted half each), `reg` is `-ln IoU` over
/// positive cells and `cen` is the centerness cross-entropy over positive
/// cells minus the target entropy, so every term bottoms out at zero.
pub fn tracking_loss(pred: &HeadOutput, gt: &[BBox], grid: &Grid, lambda: [f64; 3]) -> Result<TrackLoss> {
    let (b, _, n, n2) = pred.cls.dims4()?;
    if n != grid.side || n2 != grid.side {
        return Err(Error::Shape(format!("head grid {n}x{n2} does not match {}", grid.side)));
    }
    if gt.len() != b {
        return Err(Error::Shape(format!("{} boxes for a batch of {b}", gt.len())));
    }
    let dtype = pred.cls.dtype();
    let dev = Device::Cpu;
    let cells = n * n;
    let mut label = Vec::with_capacity(b * cells);
    let mut ltrb = Vec::with_capacity(b * 4 * cells);
    let mut cen_t = Vec::with_capacity(b * cells);
    let mut entropy = 0f64;
    for g in gt {
        let t = cell_targets(grid, g);
        for ch in &t.ltrb {
            ltrb.extend_from_slice(ch);
        }
        for (k, &c) in t.centerness.iter().enumerate() {
            if t.label[k] > 0.0 {
                entropy += binary_entropy(c as f64);
            }
        }
        label.extend(t.label);
        cen_t.extend(t.centerness);
    }
    let npos = label.iter().filter(|&&v| v > 0.0).count();
    let nneg = label.len() - npos;
    let to_t = |v: Vec<f32>, c: usize| -> Result<Tensor> {
        Ok(Tensor::from_vec(v, (b, c, n, n), &dev)?.to_dtype(dtype)?)
    };
    let (wp, wn) = match (npos, nneg) {
        (0, _) => (0.0, 1.0 / nneg as f32),
        (_, 0) => (1.0 / npos as f32, 0.0),
        _ => (0.5 / npos as f32, 0.5 / nneg as f32),
    };
    let weights: Vec<f32> = label.iter().map(|&l| if l > 0.0 { wp } else { wn }).collect();
    let pos: Vec<f32> = label.clone();
    let pos_mask = to_t(pos, 1)?;
    let label_t = to_t(label, 1)?;
    let cls = (bce_with_logits(&pred.cls, &label_t)? * to_t(weights, 1)?)?.sum_all()?;

    let (reg, cen) = if npos == 0 {
        let z = Tensor::zeros((), dtype, &dev)?;
        (z.clone(), z)
    } else {
        let g = to_t(ltrb, 4)?;
        let p = &pred.reg;
        let side = |t: &Tensor, k: usize| t.narrow(1, k, 1);
        let (pl, pt, pr, pb) = (side(p, 0)?, side(p, 1)?, side(p, 2)?, side(p, 3)?);
        let (gl, gt_, gr, gb) = (side(&g, 0)?, side(&g, 1)?, side(&g, 2)?, side(&g, 3)?);
        let area_p = ((&pl + &pr)? * (&pt + &pb)?)?;
        let area_g = ((&gl + &gr)? * (&gt_ + &gb)?)?;
        let wi = (pl.minimum(&gl)? + pr.minimum(&gr)?)?;
        let hi = (pt.minimum(&gt_)? + pb.minimum(&gb)?)?;
        let inter = (wi * hi)?;
        let union = ((area_p + area_g)? - &inter)?;
        let neg_log_iou = (union.log()? - inter.log()?)?;
        let reg = ((neg_log_iou * &pos_mask)?.sum_all()? / npos as f64)?;
        let bce = bce_with_logits(&pred.cen, &to_t(cen_t, 1)?)?;
        let cen = (((bce * &pos_mask)?.sum_all()? - entropy)? / npos as f64)?;
        (reg, cen)
    };
    let total = (((&cls * lambda[0])? + (&reg * lambda[1])?)? + (&cen * lambda[2])?)?;
    Ok(TrackLoss {
        total: total.to_dtype(dtype)?,
        cls,
        reg,
        cen,
        positives: npos,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    const GRID: Grid = Grid { side: 7, template_side: 6, stride: 16.0 };

    fn head(cls: Vec<f64>, reg: Vec<f64>, cen: Vec<f64>, b: usize, n: usize) -> HeadOutput {
        let d = Device::Cpu;
        HeadOutput {
            cls: Tensor::from_vec(cls, (b, 1, n, n), &d).unwrap(),
            reg: Tensor::from_vec(reg, (b, 4, n, n), &d).unwrap(),
            cen: Tensor::from_vec(cen, (b, 1, n, n), &d).unwrap(),
        }
    }

    /// Straight-line version of the three terms over plain slices.
    fn oracle(cls: &[f64], reg: &[f64], cen: &[f64], gt: &[BBox], grid: &Grid, lam: [f64; 3]) -> f64 {
        let n = grid.side;
        let sig = |x: f64| 1.0 / (1.0 + (-x).exp());
        let bce = |x: f64, y: f64| -(y * sig(x).ln() + (1.0 - y) * (1.0 - sig(x)).ln());
        let (mut sp, mut sn, mut np, mut nn) = (0.0, 0.0, 0usize, 0usize);
        let (mut sr, mut sc) = (0.0, 0.0);
        for (bi, g) in gt.iter().enumerate() {
            for i in 0..n {
                for j in 0..n {
                    let (px, py) = ((j as f64 + 3.0) * 16.0, (i as f64 + 3.0) * 16.0);
                    let k = bi * n * n + i * n + j;
                    let inside = px > g.x as f64
                        && px < (g.x + g.w) as f64
                        && py > g.y as f64
                        && py < (g.y + g.h) as f64;
                    if !inside {
                        sn += bce(cls[k], 0.0);
                        nn += 1;
                        continue;
                    }
                    sp += bce(cls[k], 1.0);
                    np += 1;
                    let l = px - g.x as f64;
                    let t = py - g.y as f64;
                    let r = (g.x + g.w) as f64 - px;
                    let b = (g.y + g.h) as f64 - py;
                    let at = |c: usize| reg[(bi * 4 + c) * n * n + i * n + j];
                    let (ql, qt, qr, qb) = (at(0), at(1), at(2), at(3));
                    let inter = (ql.min(l) + qr.min(r)) * (qt.min(t) + qb.min(b));
                    let union = (ql + qr) * (qt + qb) + (l + r) * (t + b) - inter;
                    sr += -(inter / union).ln();
                    let c = ((l.min(r) / l.max(r)) * (t.min(b) / t.max(b))).sqrt();
                    let ent = if c > 0.0 && c < 1.0 { -(c * c.ln() + (1.0 - c) * (1.0 - c).ln()) } else { 0.0 };
                    sc += bce(cen[k], c) - ent;
                }
            }
        }
        let lc = 0.5 * sp / np as f64 + 0.5 * sn / nn as f64;
        lam[0] * lc + lam[1] * sr / np as f64 + lam[2] * sc / np as f64
    }

    fn random_fixture(seed: u64) -> (HeadOutput, Vec<f64>, Vec<f64>, Vec<f64>, Vec<BBox>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (b, n) = (3, 7);
        let cls: Vec<f64> = (0..b * n * n).map(|_| rng.random_range(-3.0..3.0)).collect();
        let reg: Vec<f64> = (0..b * 4 * n * n).map(|_| rng.random_range(2.0..60.0)).collect();
        let cen: Vec<f64> = (0..b * n * n).map(|_| rng.random_range(-3.0..3.0)).collect();
        let gt: Vec<BBox> = (0..b)
            .map(|_| {
                let w = rng.random_range(30.0..90.0f32);
                let h = rng.random_range(30.0..90.0f32);
                let cx = rng.random_range(70.0..120.0f32);
                let cy = rng.random_range(70.0..120.0f32);
                BBox::from_center(cx, cy, w, h)
            })
            .collect();
        (head(cls.clone(), reg.clone(), cen.clone(), b, n), cls, reg, cen, gt)
    }

    #[test]
    fn matches_straight_line_oracle() {
        for seed in 0..5 {
            let (pred, cls, reg, cen, gt) = random_fixture(seed);
            let lam = [1.0, 3.0, 1.0];
            let got = scalar_f64(&tracking_loss(&pred, &gt, &GRID, lam).unwrap().total).unwrap();
            let want = oracle(&cls, &reg, &cen, &gt, &GRID, lam);
            assert!((got - want).abs() < 1e-6, "{got} vs {want}");
        }
    }

    #[test]
    fn zero_weights_give_zero() {
        let (pred, _, _, _, gt) = random_fixture(11);
        let l = tracking_loss(&pred, &gt, &GRID, [0.0; 3]).unwrap();
        assert_eq!(scalar_f64(&l.total).unwrap(), 0.0);
    }

    #[test]
    fn weights_scale_terms_linearly() {
        let (pred, _, _, _, gt) = random_fixture(12);
        let a = tracking_loss(&pred, &gt, &GRID, [1.0, 0.0, 0.0]).unwrap();
        let b = tracking_loss(&pred, &gt, &GRID, [2.5, 0.0, 0.0]).unwrap();
        let (ta, tb) = (scalar_f64(&a.total).unwrap(), scalar_f64(&b.total).unwrap());
        assert!((tb - 2.5 * ta).abs() < 1e-12);
        let bundle = a.bundle([1.0, 3.0, 1.0]).unwrap();
        assert!(bundle.cls >= 0.0 && bundle.reg >= 0.0 && bundle.cen >= -1e-9);
    }

    #[test]
    fn exact_predictions_reach_the_floor() {
        let gt = vec![BBox::from_center(96.0, 96.0, 70.0, 50.0)];
        let t = cell_targets(&GRID, &gt[0]);
        let cls: Vec<f64> = t.label.iter().map(|&l| if l > 0.0 { 30.0 } else { -30.0 }).collect();
        let reg: Vec<f64> = t.ltrb.iter().flat_map(|c| c.iter().map(|&v| v as f64)).collect();
        let cen: Vec<f64> = t
            .centerness
            .iter()
            .map(|&c| {
                let c = (c as f64).clamp(1e-12, 1.0 - 1e-12);
                (c / (1.0 - c)).ln()
            })
            .collect();
        let pred = head(cls, reg, cen, 1, 7);
        let l = tracking_loss(&pred, &gt, &GRID, [1.0, 3.0, 1.0]).unwrap();
        assert!(l.positives > 0);
        assert!(scalar_f64(&l.total).unwrap() <= 1e-3);
    }

    #[test]
    fn tiny_box_has_no_positive_cells() {
        let gt = vec![BBox::new(100.0, 100.0, 3.0, 3.0)];
        let (pred, ..) = random_fixture(2);
        let pred = HeadOutput {
            cls: pred.cls.narrow(0, 0, 1).unwrap(),
            reg: pred.reg.narrow(0, 0, 1).unwrap(),
            cen: pred.cen.narrow(0, 0, 1).unwrap(),
        };
        let l = tracking_loss(&pred, &gt, &GRID, [1.0, 3.0, 1.0]).unwrap();
        assert_eq!(l.positives, 0);
        assert_eq!(scalar_f64(&l.reg).unwrap(), 0.0);
        assert_eq!(scalar_f64(&l.cen).unwrap(), 0.0);
        assert!(l.bundle([1.0, 3.0, 1.0]).unwrap().no_positive);
    }

    #[test]
    fn center_cell_maps_to_patch_center() {
        assert_eq!(GRID.location(3), 96.0);
    }
}
