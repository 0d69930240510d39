//! Region proposals for unlabeled frames.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::frame::Frame;
use crate::geometry::BBox;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SegmentCandidate {
    pub frame_index: usize,
    pub bbox: BBox,
    pub confidence: f32,
}

/// Anything that proposes object regions on a frame.
pub trait Segmenter {
    fn segment(&self, frame: &Frame, frame_index: usize) -> Result<Vec<SegmentCandidate>>;
}

/// Threshold + connected components segmenter.
///
/// Foreground is every pixel whose luminance deviates from the frame median
/// by at least `delta`, so both bright-on-dark and dark-on-bright objects are
/// found. Confidence is the isoperimetric compactness `4*pi*A / P^2` of the
/// component, with `P` counted in pixel edges; on a pixel lattice it never
/// exceeds `pi/4`.
#[derive(Debug, Clone)]
pub struct StubSegmenter {
    pub delta: f32,
}

impl StubSegmenter {
    pub fn new(delta: f32) -> Self {
        Self { delta }
    }
}

impl Segmenter for StubSegmenter {
    fn segment(&self, frame: &Frame, frame_index: usize) -> Result<Vec<SegmentCandidate>> {
        let (w, h) = (frame.width, frame.height);
        let mut luma: Vec<f32> = Vec::with_capacity(w * h);
        for y in 0..h {
            for x in 0..w {
                luma.push(frame.luma(x, y));
            }
        }
        let mut sorted = luma.clone();
        sorted.sort_by(f32::total_cmp);
        let median = sorted[sorted.len() / 2];
        let fg: Vec<bool> = luma.iter().map(|&v| (v - median).abs() >= self.delta).collect();

        let mut seen = vec![false; w * h];
        let mut out = Vec::new();
        let mut stack = Vec::new();
        for start in 0..w * h {
            if !fg[start] || seen[start] {
                continue;
            }
            seen[start] = true;
            stack.push(start);
            let (mut x0, mut y0, mut x1, mut y1) = (w, h, 0, 0);
            let (mut area, mut perim) = (0usize, 0usize);
            while let Some(i) = stack.pop() {
                let (x, y) = (i % w, i / w);
                area += 1;
                x0 = x0.min(x);
                y0 = y0.min(y);
                x1 = x1.max(x);
                y1 = y1.max(y);
                let neighbours = [
                    (x > 0).then(|| i - 1),
                    (x + 1 < w).then(|| i + 1),
                    (y > 0).then(|| i - w),
                    (y + 1 < h).then(|| i + w),
                ];
                for n in neighbours {
                    match n {
                        Some(j) if fg[j] => {
                            if !seen[j] {
                                seen[j] = true;
                                stack.push(j);
                            }
                        }
                        _ => perim += 1,
                    }
                }
            }
            let compactness =
                (4.0 * std::f64::consts::PI * area as f64 / (perim * perim) as f64).min(1.0);
            out.push(SegmentCandidate {
                frame_index,
                bbox: BBox::new(
                    x0 as f32,
                    y0 as f32,
                    (x1 - x0 + 1) as f32,
                    (y1 - y0 + 1) as f32,
                ),
                confidence: compactness as f32,
            });
        }
        Ok(out)
    }
}

/// Reads precomputed regions from `<seq_dir>/masks/<frame_index>.csv`, one
/// `x,y,w,h,confidence` row per region. A missing file means no regions.
#[derive(Debug, Clone)]
pub struct OfflineMaskSegmenter {
    pub mask_dir: PathBuf,
}

impl OfflineMaskSegmenter {
    pub fn for_sequence(seq_dir: &Path) -> Self {
        Self {
            mask_dir: seq_dir.join("masks"),
        }
    }
}

impl Segmenter for OfflineMaskSegmenter {
    fn segment(&self, _frame: &Frame, frame_index: usize) -> Result<Vec<SegmentCandidate>> {
        let path = self.mask_dir.join(format!("{frame_index}.csv"));
        if !path.is_file() {
            return Ok(Vec::new());
        }
        let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let mut out = Vec::new();
        for (n, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') || line.starts_with('x') {
                continue;
            }
            let vals: Vec<f32> = line
                .split(',')
                .map(|s| s.trim().parse::<f32>())
                .collect::<std::result::Result<_, _>>()
                .map_err(|e| Error::Data(format!("{}:{}: {e}", path.display(), n + 1)))?;
            if vals.len() != 5 {
                return Err(Error::Data(format!(
                    "{}:{}: expected x,y,w,h,confidence",
                    path.display(),
                    n + 1
                )));
            }
            out.push(SegmentCandidate {
                frame_index,
                bbox: BBox::new(vals[0], vals[1], vals[2], vals[3]),
                confidence: vals[4].clamp(0.0, 1.0),
            });
        }
        Ok(out)
    }
}

#[derive(Debug, Clone, Copy)]
pub struct CandidateFilter {
    pub conf_threshold: f32,
    pub min_area: f32,
    pub max_area_frac: f32,
}

/// Runs the segmenter and keeps confident, reasonably sized regions. A
/// failing segmenter yields no candidates.
pub fn segment_frame(
    frame: &Frame,
    frame_index: usize,
    segmenter: &dyn Segmenter,
    filter: &CandidateFilter,
) -> Vec<SegmentCandidate> {
    let raw = match segmenter.segment(frame, frame_index) {
        Ok(c) => c,
        Err(e) => {
            log::warn!("segmenter failed on frame {frame_index}: {e}");
            return Vec::new();
        }
    };
    let max_area = filter.max_area_frac * frame.area() as f32;
    raw.into_iter()
        .filter_map(|mut c| {
            c.bbox = c.bbox.clip(frame.width, frame.height);
            let area = c.bbox.area();
            (c.confidence >= filter.conf_threshold
                && c.bbox.w > 0.0
                && c.bbox.h > 0.0
                && area >= filter.min_area
                && area <= max_area)
                .then_some(c)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn disc_frame(w: usize, h: usize, discs: &[(f32, f32, f32)]) -> Frame {
        let mut f = Frame::filled(w, h, 1, 20);
        for y in 0..h {
            for x in 0..w {
                for &(cx, cy, r) in discs {
                    let (dx, dy) = (x as f32 + 0.5 - cx, y as f32 + 0.5 - cy);
                    if dx * dx + dy * dy <= r * r {
                        f.set(x, y, 0, 230);
                    }
                }
            }
        }
        f
    }

    const DISCS: [(f32, f32, f32); 3] = [(12.0, 12.0, 5.0), (40.0, 15.0, 6.0), (25.0, 40.0, 4.5)];

    fn filter(t: f32) -> CandidateFilter {
        CandidateFilter {
            conf_threshold: t,
            min_area: 16.0,
            max_area_frac: 0.5,
        }
    }

    /// Independent flood fill that labels blob membership per centroid.
    fn oracle_centroids(f: &Frame) -> Vec<(f32, f32)> {
        let mut labels = vec![usize::MAX; f.area()];
        let mut cents = Vec::new();
        for s in 0..f.area() {
            if f.data[s] < 128 || labels[s] != usize::MAX {
                continue;
            }
            let id = cents.len();
            let mut q = std::collections::VecDeque::from([s]);
            labels[s] = id;
            let (mut sx, mut sy, mut n) = (0f32, 0f32, 0f32);
            while let Some(i) = q.pop_front() {
                let (x, y) = ((i % f.width) as i64, (i / f.width) as i64);
                sx += x as f32 + 0.5;
                sy += y as f32 + 0.5;
                n += 1.0;
                for (dx, dy) in [(-1, 0), (1, 0), (0, -1), (0, 1)] {
                    let (nx, ny) = (x + dx, y + dy);
                    if nx < 0 || ny < 0 || nx >= f.width as i64 || ny >= f.height as i64 {
                        continue;
                    }
                    let j = ny as usize * f.width + nx as usize;
                    if f.data[j] >= 128 && labels[j] == usize::MAX {
                        labels[j] = id;
                        q.push_back(j);
                    }
                }
            }
            cents.push((sx / n, sy / n));
        }
        cents
    }

    #[test]
    fn stub_finds_each_blob_once() {
        let f = disc_frame(56, 56, &DISCS);
        let cands = segment_frame(&f, 0, &StubSegmenter::new(48.0), &filter(0.0));
        assert_eq!(cands.len(), 3);
        let cents = oracle_centroids(&f);
        assert_eq!(cents.len(), 3);
        for c in &cands {
            let inside = cents.iter().filter(|&&(x, y)| c.bbox.contains(x, y)).count();
            assert_eq!(inside, 1, "{c:?}");
            assert!(c.confidence > 0.0 && c.confidence < 1.0);
        }
    }

    #[test]
    fn dark_blobs_on_bright_background() {
        let mut f = disc_frame(56, 56, &DISCS);
        for v in f.data.iter_mut() {
            *v = 255 - *v;
        }
        assert_eq!(
            segment_frame(&f, 0, &StubSegmenter::new(48.0), &filter(0.0)).len(),
            3
        );
    }

    #[test]
    fn full_threshold_drops_everything() {
        let f = disc_frame(56, 56, &DISCS);
        assert!(segment_frame(&f, 0, &StubSegmenter::new(48.0), &filter(1.0)).is_empty());
    }

    struct Fixed(Vec<SegmentCandidate>);
    impl Segmenter for Fixed {
        fn segment(&self, _: &Frame, _: usize) -> Result<Vec<SegmentCandidate>> {
            Ok(self.0.clone())
        }
    }

    #[test]
    fn oversized_blob_is_excluded() {
        let f = Frame::filled(50, 50, 1, 10);
        let cand = |w, h| SegmentCandidate {
            frame_index: 0,
            bbox: BBox::new(0.0, 0.0, w, h),
            confidence: 0.9,
        };
        // 60% of the frame, then 40%, then below min_area
        let seg = Fixed(vec![cand(50.0, 30.0), cand(50.0, 20.0), cand(3.0, 5.0)]);
        let kept = segment_frame(&f, 0, &seg, &filter(0.0));
        assert_eq!(kept.len(), 1);
        assert_eq!(kept[0].bbox.h, 20.0);
    }

    #[test]
    fn raising_threshold_is_monotone() {
        let f = disc_frame(56, 56, &[(12.0, 12.0, 5.0), (40.0, 15.0, 3.0), (30.0, 40.0, 8.0)]);
        let seg = StubSegmenter::new(48.0);
        let mut prev = usize::MAX;
        for t in [0.0, 0.3, 0.5, 0.6, 0.65, 0.7, 0.8, 1.0] {
            let n = segment_frame(&f, 0, &seg, &filter(t)).len();
            assert!(n <= prev);
            prev = n;
        }
    }

    #[test]
    fn offline_masks_parse() {
        let tmp = tempfile::tempdir().unwrap();
        std::fs::create_dir_all(tmp.path().join("masks")).unwrap();
        std::fs::write(
            tmp.path().join("masks/10.csv"),
            "x,y,w,h,confidence\n1,2,8,8,0.9\n3,3,2,2,0.1\n",
        )
        .unwrap();
        let seg = OfflineMaskSegmenter::for_sequence(tmp.path());
        let f = Frame::filled(32, 32, 1, 0);
        let c = seg.segment(&f, 10).unwrap();
        assert_eq!(c.len(), 2);
        assert_eq!(c[0].bbox, BBox::new(1.0, 2.0, 8.0, 8.0));
        assert!(seg.segment(&f, 11).unwrap().is_empty());
        let kept = segment_frame(&f, 10, &seg, &filter(0.5));
        assert_eq!(kept.len(), 1);
    }

    struct Failing;
    impl Segmenter for Failing {
        fn segment(&self, _: &Frame, _: usize) -> Result<Vec<SegmentCandidate>> {
            Err(Error::Data("boom".into()))
        }
    }

    #[test]
    fn failure_yields_empty() {
        let f = Frame::filled(8, 8, 1, 0);
        assert!(segment_frame(&f, 0, &Failing, &filter(0.0)).is_empty());
    }
}
