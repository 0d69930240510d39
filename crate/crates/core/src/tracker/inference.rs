use serde::{Deserialize, Serialize};

use super::backbone::{extract_pyramid, PatchKind};
use super::loss::Grid;
use super::TrackerModel;
use crate::data::{AugmentConfig, Sequence};
use crate::error::{Error, Result};
use crate::frame::crop_resize;
use crate::geometry::BBox;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrackResult {
    pub frame_index: usize,
    pub bbox: BBox,
    pub score: f32,
    /// The decoded box was degenerate and the previous box was kept.
    pub held: bool,
}

/// Outer product of two Hann windows, flattened row-major.
pub fn hann_window(n: usize) -> Vec<f32> {
    let w: Vec<f32> = if n == 1 {
        vec![1.0]
    } else {
        (0..n)
            .map(|i| 0.5 - 0.5 * (2.0 * std::f32::consts::PI * i as f32 / (n - 1) as f32).cos())
            .collect()
    };
    let mut out = Vec::with_capacity(n * n);
    for a in &w {
        for b in &w {
            out.push(a * b);
        }
    }
    out
}

/// Argmax cell `(row, col)` of `score · ((1 − w) + w · hann)`; the first
/// maximum wins ties.
pub fn select_peak(score: &[f32], n: usize, window_influence: f32) -> (usize, usize, f32) {
    let hann = hann_window(n);
    let mut best = (0, f32::NEG_INFINITY);
    for (k, (&s, &h)) in score.iter().zip(&hann).enumerate() {
        let v = s * ((1.0 - window_influence) + window_influence * h);
        if v > best.1 {
            best = (k, v);
        }
    }
    (best.0 / n, best.0 % n, best.1)
}

/// Box in search-patch pixels for cell `(row, col)` and distances `ltrb`.
pub fn decode_box(grid: &Grid, row: usize, col: usize, ltrb: [f32; 4]) -> BBox {
    let (px, py) = (grid.location(col), grid.location(row));
    BBox::new(px - ltrb[0], py - ltrb[1], ltrb[0] + ltrb[2], ltrb[1] + ltrb[3])
}

/// Tracks one object through `seq` starting from `init_box` on frame 0.
pub fn track_sequence(
    seq: &Sequence,
    init_box: BBox,
    model: &TrackerModel,
    aug: &AugmentConfig,
    window_influence: f32,
) -> Result<Vec<TrackResult>> {
    let first = seq
        .frames
        .first()
        .ok_or_else(|| Error::Data(format!("sequence `{}` has no frames", seq.id)))?;
    if !init_box.inside(first.width, first.height) {
        return Err(Error::Data(format!(
            "initial box {init_box:?} lies outside frame 0 of `{}`",
            seq.id
        )));
    }
    let (t, s) = (aug.template_side, aug.search_side);
    let (cx, cy) = init_box.center();
    let zpatch = crop_resize(first, cx, cy, aug.template_crop_side(&init_box), t);
    let zp = extract_pyramid(&zpatch, &model.backbone, PatchKind::Template)?.detach();
    let grid = model.grid(t, s);
    let n = grid.side;

    let mut out = vec![TrackResult { frame_index: 0, bbox: init_box, score: 1.0, held: false }];
    let mut prev = init_box;
    for (fi, frame) in seq.frames.iter().enumerate().skip(1) {
        let (cx, cy) = prev.center();
        let crop = aug.search_crop_side(&prev);
        let xpatch = crop_resize(frame, cx, cy, crop, s);
        let xp = extract_pyramid(&xpatch, &model.backbone, PatchKind::Search)?;
        let h = model.heads_from(&zp, &xp)?;
        let sig = |v: f32| 1.0 / (1.0 + (-v).exp());
        let cls = h.cls.flatten_all()?.to_vec1::<f32>()?;
        let cen = h.cen.flatten_all()?.to_vec1::<f32>()?;
        let reg = h.reg.squeeze(0)?.flatten_all()?.to_vec1::<f32>()?;
        let score: Vec<f32> = cls.iter().zip(&cen).map(|(&a, &b)| sig(a) * sig(b)).collect();
        let (row, col, _) = select_peak(&score, n, window_influence);
        let k = row * n + col;
        let ltrb = [reg[k], reg[n * n + k], reg[2 * n * n + k], reg[3 * n * n + k]];
        let b = decode_box(&grid, row, col, ltrb);
        let scale = crop / s as f32;
        let half = s as f32 / 2.0;
        let framed = BBox::new(cx + (b.x - half) * scale, cy + (b.y - half) * scale, b.w * scale, b.h * scale)
            .clip(frame.width, frame.height);
        let result = if framed.is_finite() && framed.w >= 1.0 && framed.h >= 1.0 {
            prev = framed;
            TrackResult { frame_index: fi, bbox: framed, score: score[k], held: false }
        } else {
            log::debug!("{}: degenerate box at frame {fi}, holding previous", seq.id);
            TrackResult { frame_index: fi, bbox: prev, score: score[k], held: true }
        };
        out.push(result);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::TrackerConfig;
    use crate::data::Domain;
    use crate::frame::Frame;

    #[test]
    fn peak_without_window_is_the_hot_cell() {
        let n = 7;
        let mut score = vec![0f32; n * n];
        score[5 * n + 1] = 0.8;
        assert_eq!(select_peak(&score, n, 0.0), (5, 1, 0.8));
        let g = Grid { side: n, template_side: 6, stride: 16.0 };
        let b = decode_box(&g, 5, 1, [10.0, 10.0, 10.0, 10.0]);
        assert_eq!(b.center(), (g.location(1), g.location(5)));
    }

    #[test]
    fn hann_peaks_in_the_middle() {
        let w = hann_window(5);
        assert_eq!(w[2 * 5 + 2], 1.0);
        assert_eq!(w[0], 0.0);
    }

    #[test]
    fn first_frame_is_init_box_and_boxes_stay_inside() {
        let cfg = TrackerConfig { widths: vec![4, 4, 8, 8], norm_groups: 2, head_width: 8, ..Default::default() };
        let model = TrackerModel::new(&cfg, 0).unwrap();
        let frames: Vec<Frame> = (0..4)
            .map(|i| {
                let mut f = Frame::filled(80, 60, 1, 20);
                for y in 20..35 {
                    for x in (10 + 5 * i)..(25 + 5 * i) {
                        f.set(x, y, 0, 220);
                    }
                }
                f
            })
            .collect();
        let seq = Sequence::new("toy", frames, None, Domain::Target).unwrap();
        let init = BBox::new(10.0, 20.0, 15.0, 15.0);
        let aug = AugmentConfig {
            template_side: 64,
            search_side: 128,
            context: 2.0,
            jitter_px: 0.0,
            scale_jitter: 0.0,
        };
        let res = track_sequence(&seq, init, &model, &aug, 0.3).unwrap();
        assert_eq!(res.len(), 4);
        assert_eq!(res[0].bbox, init);
        for r in &res {
            assert!(r.bbox.inside(80, 60), "{:?}", r.bbox);
        }
        assert!(track_sequence(&seq, BBox::new(70.0, 50.0, 30.0, 30.0), &model, &aug, 0.3).is_err());
    }
}
