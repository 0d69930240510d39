//! Template/search pair generation.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{sample_keyframes, segment_frame, CandidateFilter, Domain, SegmentCandidate, Segmenter, Sequence};
use crate::error::{Error, Result};
use crate::frame::{crop_resize, Frame, Patch};
use crate::geometry::BBox;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AugmentConfig {
    pub template_side: usize,
    pub search_side: usize,
    /// Template crop side is `context * sqrt(w * h)` of the object box.
    pub context: f32,
    /// Maximum object displacement from the search centre, in search-patch pixels.
    pub jitter_px: f32,
    /// Search crop scale is drawn from `[1/(1+s), 1+s]`.
    pub scale_jitter: f32,
}

impl AugmentConfig {
    pub fn from_config(cfg: &crate::config::DataConfig) -> Self {
        Self {
            template_side: cfg.template_side,
            search_side: cfg.search_side,
            context: cfg.context,
            jitter_px: cfg.jitter_px,
            scale_jitter: cfg.scale_jitter,
        }
    }

    pub fn without_jitter(mut self) -> Self {
        self.jitter_px = 0.0;
        self.scale_jitter = 0.0;
        self
    }

    /// Frame-pixel side of the template crop for an object box.
    pub fn template_crop_side(&self, b: &BBox) -> f32 {
        self.context * (b.w.max(1.0) * b.h.max(1.0)).sqrt()
    }

    /// Frame-pixel side of the search crop (before scale jitter).
    pub fn search_crop_side(&self, b: &BBox) -> f32 {
        self.template_crop_side(b) * self.search_side as f32 / self.template_side as f32
    }
}

/// A training unit: template and search crops of one object instance.
#[derive(Debug, Clone, PartialEq)]
pub struct DomainSample {
    pub id: String,
    pub template: Patch,
    pub search: Patch,
    /// Object box in search-patch coordinates. For target samples this is a
    /// pseudo box that served only the crop geometry.
    pub crop_box: BBox,
    pub domain: Domain,
}

impl DomainSample {
    /// The supervised box; present only for source samples.
    pub fn label(&self) -> Option<BBox> {
        (self.domain == Domain::Source).then_some(self.crop_box)
    }
}

/// Pair from a single frame and region, with search-side jitter.
pub fn make_pair(
    frame: &Frame,
    candidate: &SegmentCandidate,
    aug: &AugmentConfig,
    seed: u64,
    domain: Domain,
    id: String,
) -> DomainSample {
    make_pair_across(frame, &candidate.bbox, frame, &candidate.bbox, aug, seed, domain, id)
}

/// Pair whose template and search come from (possibly) different frames.
#[allow(clippy::too_many_arguments)]
pub fn make_pair_across(
    template_frame: &Frame,
    template_box: &BBox,
    search_frame: &Frame,
    search_box: &BBox,
    aug: &AugmentConfig,
    seed: u64,
    domain: Domain,
    id: String,
) -> DomainSample {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (tcx, tcy) = template_box.center();
    let template = crop_resize(
        template_frame,
        tcx,
        tcy,
        aug.template_crop_side(template_box),
        aug.template_side,
    );

    let s = aug.scale_jitter.max(0.0);
    let scale = if s > 0.0 {
        rng.random_range(1.0 / (1.0 + s)..=1.0 + s)
    } else {
        1.0
    };
    let j = aug.jitter_px.max(0.0);
    let (dx, dy) = if j > 0.0 {
        (rng.random_range(-j..=j), rng.random_range(-j..=j))
    } else {
        (0.0, 0.0)
    };
    let side = aug.search_side as f32;
    let crop = aug.search_crop_side(search_box) * scale;
    let px = crop / side;
    let (scx, scy) = search_box.center();
    // the object lands at (side/2 + dx, side/2 + dy) in the patch
    let search = crop_resize(search_frame, scx - dx * px, scy - dy * px, crop, aug.search_side);
    let crop_box = BBox::from_center(
        side / 2.0 + dx,
        side / 2.0 + dy,
        search_box.w / px,
        search_box.h / px,
    )
    .clip(aug.search_side, aug.search_side);
    DomainSample {
        id,
        template,
        search,
        crop_box,
        domain,
    }
}

/// Derives an independent seed for a named purpose.
pub fn mix_seed(seed: u64, tag: &str) -> u64 {
    // FNV-1a over the tag, then a splitmix64 finalizer
    let mut h = 0xcbf29ce484222325u64 ^ seed;
    for b in tag.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    h = h.wrapping_add(0x9e3779b97f4a7c15);
    h = (h ^ (h >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    h = (h ^ (h >> 27)).wrapping_mul(0x94d049bb133111eb);
    h ^ (h >> 31)
}

/// Labeled pairs from source sequences: template from frame `i`, search from
/// a frame at most `gap` frames away, for every `stride`-th frame.
pub fn build_source_pairs(
    seqs: &[Sequence],
    aug: &AugmentConfig,
    stride: usize,
    gap: usize,
    seed: u64,
) -> Result<Vec<DomainSample>> {
    let mut out = Vec::new();
    for seq in seqs {
        let boxes = seq.boxes.as_ref().ok_or_else(|| {
            Error::Data(format!("source sequence {} has no boxes", seq.id))
        })?;
        let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(seed, &seq.id));
        let n = seq.len();
        for i in sample_keyframes(n, stride) {
            let lo = i.saturating_sub(gap);
            let hi = (i + gap).min(n - 1);
            let j = rng.random_range(lo..=hi);
            let id = format!("{}/{i}-{j}", seq.id);
            let pair_seed = mix_seed(seed, &id);
            out.push(make_pair_across(
                &seq.frames[i],
                &boxes[i],
                &seq.frames[j],
                &boxes[j],
                aug,
                pair_seed,
                Domain::Source,
                id,
            ));
        }
    }
    Ok(out)
}

/// One generated target pair plus where it came from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairRecord {
    pub id: String,
    pub sequence: String,
    pub frame_index: usize,
    pub candidate: BBox,
    pub confidence: f32,
    pub crop_box: BBox,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairStoreManifest {
    pub pairs: usize,
    pub frames_scanned: usize,
    pub candidates_kept: usize,
    pub threshold: f32,
}

/// Pseudo-labeled pairs from unlabeled sequences: segment every
/// `stride`-th frame and crop a pair around each kept region.
pub fn build_target_pairs(
    seqs: &[Sequence],
    segmenter_for: &dyn Fn(&Sequence) -> Box<dyn Segmenter>,
    filter: &CandidateFilter,
    aug: &AugmentConfig,
    stride: usize,
    seed: u64,
) -> (Vec<DomainSample>, Vec<PairRecord>, PairStoreManifest) {
    let mut samples = Vec::new();
    let mut records = Vec::new();
    let mut frames_scanned = 0;
    for seq in seqs {
        let segmenter = segmenter_for(seq);
        for fi in sample_keyframes(seq.len(), stride) {
            frames_scanned += 1;
            let frame = &seq.frames[fi];
            let cands = segment_frame(frame, fi, segmenter.as_ref(), filter);
            for (k, c) in cands.iter().enumerate() {
                let id = format!("{}/{fi}#{k}", seq.id);
                let pair_seed = mix_seed(seed, &id);
                let s = make_pair(frame, c, aug, pair_seed, Domain::Target, id.clone());
                records.push(PairRecord {
                    id,
                    sequence: seq.id.clone(),
                    frame_index: fi,
                    candidate: c.bbox,
                    confidence: c.confidence,
                    crop_box: s.crop_box,
                    seed: pair_seed,
                });
                samples.push(s);
            }
        }
    }
    let manifest = PairStoreManifest {
        pairs: samples.len(),
        frames_scanned,
        candidates_kept: samples.len(),
        threshold: filter.conf_threshold,
    };
    (samples, records, manifest)
}

fn patch_to_frame(p: &Patch) -> Frame {
    let data = p.data.iter().map(|v| v.round().clamp(0.0, 255.0) as u8).collect();
    Frame {
        width: p.side,
        height: p.side,
        channels: p.channels,
        data,
    }
}

fn frame_to_patch(f: &Frame) -> Patch {
    Patch {
        side: f.width,
        channels: f.channels,
        data: f.data.iter().map(|&v| v as f32).collect(),
    }
}

/// Writes crops as `crops/<n>_z.png` / `crops/<n>_x.png`, the records as
/// `pairs.json` and the summary as `manifest.json`.
pub fn write_pair_store(
    dir: &Path,
    samples: &[DomainSample],
    records: &[PairRecord],
    manifest: &PairStoreManifest,
) -> Result<()> {
    let crops = dir.join("crops");
    std::fs::create_dir_all(&crops).map_err(|e| Error::io(&crops, e))?;
    for (n, s) in samples.iter().enumerate() {
        patch_to_frame(&s.template).save(&crops.join(format!("{n:06}_z.png")))?;
        patch_to_frame(&s.search).save(&crops.join(format!("{n:06}_x.png")))?;
    }
    let p = dir.join("pairs.json");
    std::fs::write(&p, serde_json::to_string_pretty(records)?).map_err(|e| Error::io(&p, e))?;
    let p = dir.join("manifest.json");
    std::fs::write(&p, serde_json::to_string_pretty(manifest)?).map_err(|e| Error::io(&p, e))?;
    Ok(())
}

/// Reads a pair store written by [`write_pair_store`] as target samples.
pub fn load_pair_store(dir: &Path) -> Result<Vec<DomainSample>> {
    let p = dir.join("pairs.json");
    let text = std::fs::read_to_string(&p).map_err(|e| Error::io(&p, e))?;
    let records: Vec<PairRecord> = serde_json::from_str(&text)?;
    records
        .into_iter()
        .enumerate()
        .map(|(n, r)| {
            let z = Frame::load(&dir.join(format!("crops/{n:06}_z.png")))?;
            let x = Frame::load(&dir.join(format!("crops/{n:06}_x.png")))?;
            Ok(DomainSample {
                id: r.id,
                template: frame_to_patch(&z),
                search: frame_to_patch(&x),
                crop_box: r.crop_box,
                domain: Domain::Target,
            })
        })
        .collect()
}
