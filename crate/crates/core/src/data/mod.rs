//! Sequence loading, pseudo-label pair generation and mixed-domain batching.
//!
//! Dataset layout on disk:
//!
//! ```text
//! <root>/<seq_id>/img/000001.png        frames, loaded in filename order
//! <root>/<seq_id>/groundtruth_rect.txt  one `x,y,w,h` per frame, 1-based origin
//! <root>/<seq_id>/masks/<frame>.csv     optional offline segmenter output
//! ```
//!
//! Source sequences must carry `groundtruth_rect.txt`. Target sequences may
//! carry one for evaluation; training never reads it.

mod batch;
mod pairs;
mod segment;

pub use batch::{BatchIterator, EpochBatches};
pub use pairs::mix_seed;
pub use pairs::{
    build_source_pairs, build_target_pairs, load_pair_store, make_pair, make_pair_across,
    write_pair_store, AugmentConfig, DomainSample, PairRecord, PairStoreManifest,
};
pub use segment::{
    segment_frame, CandidateFilter, OfflineMaskSegmenter, SegmentCandidate, Segmenter,
    StubSegmenter,
};

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::frame::Frame;
use crate::geometry::BBox;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Domain {
    Source,
    Target,
}

impl Domain {
    /// Discriminator label: 0 for source, 1 for target.
    pub fn label(self) -> f64 {
        match self {
            Domain::Source => 0.0,
            Domain::Target => 1.0,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Domain::Source => "source",
            Domain::Target => "target",
        }
    }
}

impl std::str::FromStr for Domain {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "source" | "s" => Ok(Domain::Source),
            "target" | "t" => Ok(Domain::Target),
            other => Err(Error::Config(format!("unknown domain `{other}`"))),
        }
    }
}

#[derive(Debug, Clone)]
pub struct Sequence {
    pub id: String,
    pub frames: Vec<Frame>,
    pub boxes: Option<Vec<BBox>>,
    pub domain: Domain,
    /// Directory the sequence was loaded from, if any.
    pub dir: Option<PathBuf>,
}

impl Sequence {
    pub fn new(
        id: impl Into<String>,
        frames: Vec<Frame>,
        boxes: Option<Vec<BBox>>,
        domain: Domain,
    ) -> Result<Self> {
        let seq = Self {
            id: id.into(),
            frames,
            boxes,
            domain,
            dir: None,
        };
        seq.validate()?;
        Ok(seq)
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn validate(&self) -> Result<()> {
        let Some(first) = self.frames.first() else {
            return Err(Error::Data(format!("sequence {} has no frames", self.id)));
        };
        if self
            .frames
            .iter()
            .any(|f| f.width != first.width || f.height != first.height)
        {
            return Err(Error::Data(format!(
                "sequence {} mixes frame sizes",
                self.id
            )));
        }
        if let Some(boxes) = &self.boxes {
            if boxes.len() != self.frames.len() {
                return Err(Error::AnnotationMismatch {
                    path: self.dir.clone().unwrap_or_else(|| PathBuf::from(&self.id)),
                    frames: self.frames.len(),
                    boxes: boxes.len(),
                });
            }
            for (i, b) in boxes.iter().enumerate() {
                if !b.inside(first.width, first.height) {
                    return Err(Error::Data(format!(
                        "sequence {} frame {i}: box {b:?} outside {}x{}",
                        self.id, first.width, first.height
                    )));
                }
            }
        }
        Ok(())
    }
}

/// Indices `0, stride, 2*stride, ...` below `frame_count`.
pub fn sample_keyframes(frame_count: usize, stride: usize) -> Vec<usize> {
    (0..frame_count).step_by(stride.max(1)).collect()
}

const GT_FILE: &str = "groundtruth_rect.txt";

/// Loads every sequence under `root`, sorted by directory name.
pub fn load_dataset(root: &Path, domain: Domain) -> Result<Vec<Sequence>> {
    let mut dirs: Vec<PathBuf> = std::fs::read_dir(root)
        .map_err(|e| Error::io(root, e))?
        .filter_map(|e| e.ok())
        .map(|e| e.path())
        .filter(|p| p.join("img").is_dir())
        .collect();
    dirs.sort();
    if dirs.is_empty() {
        return Err(Error::Data(format!("no sequences under {}", root.display())));
    }
    let mut out = Vec::with_capacity(dirs.len());
    for dir in dirs {
        out.push(load_sequence(&dir, domain)?);
    }
    Ok(out)
}

pub fn load_sequence(dir: &Path, domain: Domain) -> Result<Sequence> {
    let id = dir
        .file_name()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    let img_dir = dir.join("img");
    let mut paths: Vec<PathBuf> = std::fs::read_dir(&img_dir)
        .map_err(|e| Error::io(&img_dir, e))?
        .filter_map(|e| e.ok())
        .map(|e| e.path())
        .filter(|p| {
            matches!(
                p.extension().and_then(|e| e.to_str()).map(|e| e.to_ascii_lowercase()),
                Some(ref e) if e == "png" || e == "jpg" || e == "jpeg"
            )
        })
        .collect();
    paths.sort();

    let gt_path = dir.join(GT_FILE);
    let boxes = if gt_path.is_file() {
        Some(parse_groundtruth(&gt_path)?)
    } else if domain == Domain::Source {
        return Err(Error::Data(format!(
            "missing annotation file {}",
            gt_path.display()
        )));
    } else {
        None
    };
    if let Some(b) = &boxes {
        if b.len() != paths.len() {
            return Err(Error::AnnotationMismatch {
                path: gt_path,
                frames: paths.len(),
                boxes: b.len(),
            });
        }
    }

    let mut frames = Vec::with_capacity(paths.len());
    let mut kept_boxes = boxes.as_ref().map(|_| Vec::new());
    for (i, p) in paths.iter().enumerate() {
        match Frame::load(p) {
            Ok(f) => {
                frames.push(f);
                if let (Some(k), Some(b)) = (kept_boxes.as_mut(), boxes.as_ref()) {
                    k.push(b[i]);
                }
            }
            Err(e) => log::warn!("skipping unreadable frame {}: {e}", p.display()),
        }
    }
    if frames.is_empty() {
        return Err(Error::Data(format!("sequence {id} has no readable frames")));
    }
    let (w, h) = (frames[0].width, frames[0].height);
    let kept_boxes = kept_boxes.map(|bs| {
        bs.into_iter()
            .map(|b| {
                let c = b.clip(w, h);
                let moved = [c.x - b.x, c.y - b.y, c.w - b.w, c.h - b.h];
                if moved.iter().any(|d| d.abs() > 1e-3) {
                    log::warn!("sequence {id}: clipped annotation {b:?} to frame");
                }
                c
            })
            .collect()
    });
    let seq = Sequence {
        id,
        frames,
        boxes: kept_boxes,
        domain,
        dir: Some(dir.to_path_buf()),
    };
    seq.validate()?;
    Ok(seq)
}

/// Parses `x,y,w,h` lines (comma, tab or space separated, 1-based origin).
pub fn parse_groundtruth(path: &Path) -> Result<Vec<BBox>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut boxes = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let vals: Vec<f32> = line
            .split(|c: char| c == ',' || c == '\t' || c.is_whitespace())
            .filter(|s| !s.is_empty())
            .map(|s| s.parse::<f32>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| Error::Data(format!("{}:{}: {e}", path.display(), n + 1)))?;
        if vals.len() != 4 {
            return Err(Error::Data(format!(
                "{}:{}: expected 4 values, got {}",
                path.display(),
                n + 1,
                vals.len()
            )));
        }
        boxes.push(BBox::new(vals[0] - 1.0, vals[1] - 1.0, vals[2], vals[3]));
    }
    Ok(boxes)
}

/// Writes a sequence in the on-disk layout. Boxes are written 1-based.
pub fn write_sequence(root: &Path, seq: &Sequence) -> Result<PathBuf> {
    let dir = root.join(&seq.id);
    let img = dir.join("img");
    std::fs::create_dir_all(&img).map_err(|e| Error::io(&img, e))?;
    for (i, f) in seq.frames.iter().enumerate() {
        f.save(&img.join(format!("{:06}.png", i + 1)))?;
    }
    if let Some(boxes) = &seq.boxes {
        let text: String = boxes
            .iter()
            .map(|b| format!("{},{},{},{}\n", b.x + 1.0, b.y + 1.0, b.w, b.h))
            .collect();
        let p = dir.join(GT_FILE);
        std::fs::write(&p, text).map_err(|e| Error::io(&p, e))?;
    }
    Ok(dir)
}
