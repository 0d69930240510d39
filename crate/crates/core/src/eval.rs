//! One-pass evaluation: precision, normalized precision and success curves
//! per sequence, their per-sequence mean, and a domain-gap probe on
//! correlation descriptors.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::csda::{descriptor_from_buffers, mmd2, KernelConfig};
use crate::data::{mix_seed, AugmentConfig, DomainSample, Sequence};
use crate::error::{Error, Result};
use crate::geometry::{iou, BBox};
use crate::tracker::{patches_to_tensor, track_sequence, PatchKind, TrackResult, TrackerModel};

pub const PRECISION_THRESHOLDS: usize = 51;
pub const CURVE_SAMPLES: usize = 51;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Curve {
    pub thresholds: Vec<f64>,
    pub values: Vec<f64>,
}

impl Curve {
    /// Plain mean of the curve samples.
    pub fn auc(&self) -> f64 {
        if self.values.is_empty() {
            return 0.0;
        }
        self.values.iter().sum::<f64>() / self.values.len() as f64
    }

    fn mean_of(curves: &[&Curve]) -> Option<Curve> {
        let first = curves.first()?;
        let n = curves.len() as f64;
        let values = (0..first.values.len())
            .map(|i| curves.iter().map(|c| c.values[i]).sum::<f64>() / n)
            .collect();
        Some(Curve { thresholds: first.thresholds.clone(), values })
    }
}

fn center_errors(pred: &[(f32, f32)], gt: &[(f32, f32)]) -> Vec<f64> {
    pred.iter()
        .zip(gt)
        .map(|(p, g)| (((p.0 - g.0) as f64).powi(2) + ((p.1 - g.1) as f64).powi(2)).sqrt())
        .collect()
}

fn fraction(values: &[f64], pass: impl Fn(f64) -> bool) -> f64 {
    if values.is_empty() {
        return 0.0;
    }
    values.iter().filter(|&&v| pass(v)).count() as f64 / values.len() as f64
}

/// Fraction of frames with center error `<= t` for `t = 0..=50` pixels.
pub fn precision_curve(pred: &[(f32, f32)], gt: &[(f32, f32)]) -> Result<Curve> {
    if pred.len() != gt.len() {
        return Err(Error::Shape(format!("{} predictions for {} ground-truth frames", pred.len(), gt.len())));
    }
    let err = center_errors(pred, gt);
    let thresholds: Vec<f64> = (0..PRECISION_THRESHOLDS).map(|t| t as f64).collect();
    let values = thresholds.iter().map(|&t| fraction(&err, |e| e <= t)).collect();
    Ok(Curve { thresholds, values })
}

/// Precision with each error component divided by the gt box extent, over
/// thresholds `0..=0.5` in steps of 0.01. Frames with a degenerate gt box are
/// excluded; the second value counts them.
pub fn normalized_precision_curve(pred: &[(f32, f32)], gt: &[BBox]) -> Result<(Curve, usize)> {
    if pred.len() != gt.len() {
        return Err(Error::Shape(format!("{} predictions for {} ground-truth boxes", pred.len(), gt.len())));
    }
    let mut err = Vec::with_capacity(pred.len());
    let mut excluded = 0;
    for (p, g) in pred.iter().zip(gt) {
        if !(g.w > 0.0 && g.h > 0.0) {
            excluded += 1;
            continue;
        }
        let (cx, cy) = g.center();
        let dx = (p.0 - cx) as f64 / g.w as f64;
        let dy = (p.1 - cy) as f64 / g.h as f64;
        err.push((dx * dx + dy * dy).sqrt());
    }
    let thresholds: Vec<f64> = (0..CURVE_SAMPLES).map(|i| i as f64 / 100.0).collect();
    let values = thresholds.iter().map(|&t| fraction(&err, |e| e <= t + 1e-12)).collect();
    Ok((Curve { thresholds, values }, excluded))
}

/// Fraction of frames with IoU strictly above each of 51 thresholds on [0, 1].
pub fn success_curve(pred: &[BBox], gt: &[BBox]) -> Result<Curve> {
    if pred.len() != gt.len() {
        return Err(Error::Shape(format!("{} predictions for {} ground-truth boxes", pred.len(), gt.len())));
    }
    let ious: Vec<f64> = pred.iter().zip(gt).map(|(a, b)| iou(a, b)).collect();
    let thresholds: Vec<f64> = (0..CURVE_SAMPLES).map(|i| i as f64 / 50.0).collect();
    let values = thresholds.iter().map(|&t| fraction(&ious, |v| v > t)).collect();
    Ok(Curve { thresholds, values })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SequenceMetrics {
    pub id: String,
    pub frames: usize,
    pub precision_20: f64,
    pub norm_precision_auc: f64,
    pub success_auc: f64,
    pub excluded_frames: usize,
    /// False when no frame survived exclusion.
    pub valid: bool,
    pub precision: Curve,
    pub norm_precision: Curve,
    pub success: Curve,
}

pub fn evaluate_boxes(id: &str, pred: &[BBox], gt: &[BBox]) -> Result<SequenceMetrics> {
    let pc: Vec<_> = pred.iter().map(|b| b.center()).collect();
    let gc: Vec<_> = gt.iter().map(|b| b.center()).collect();
    let precision = precision_curve(&pc, &gc)?;
    let (norm_precision, excluded) = normalized_precision_curve(&pc, gt)?;
    let success = success_curve(pred, gt)?;
    Ok(SequenceMetrics {
        id: id.to_string(),
        frames: gt.len(),
        precision_20: precision.values[20],
        norm_precision_auc: norm_precision.auc(),
        success_auc: success.auc(),
        excluded_frames: excluded,
        valid: excluded < gt.len(),
        precision,
        norm_precision,
        success,
    })
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub sequences: usize,
    pub precision_20: f64,
    pub norm_precision_auc: f64,
    pub success_auc: f64,
}

/// Unweighted mean over valid sequences.
pub fn aggregate(per_sequence: &[SequenceMetrics]) -> Aggregate {
    let valid: Vec<_> = per_sequence.iter().filter(|s| s.valid).collect();
    let n = valid.len() as f64;
    if valid.is_empty() {
        return Aggregate::default();
    }
    Aggregate {
        sequences: valid.len(),
        precision_20: valid.iter().map(|s| s.precision_20).sum::<f64>() / n,
        norm_precision_auc: valid.iter().map(|s| s.norm_precision_auc).sum::<f64>() / n,
        success_auc: valid.iter().map(|s| s.success_auc).sum::<f64>() / n,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DomainGap {
    pub mmd2: f64,
    pub linear_probe_acc: f64,
    pub samples_per_domain: usize,
}

/// Logistic regression trained by full-batch gradient descent on
/// standardized features.
fn logistic_probe(train: &[(Vec<f64>, f64)], test: &[(Vec<f64>, f64)]) -> f64 {
    let dim = train[0].0.len();
    let mut mean = vec![0f64; dim];
    let mut std = vec![0f64; dim];
    for (x, _) in train {
        for (m, v) in mean.iter_mut().zip(x) {
            *m += v / train.len() as f64;
        }
    }
    for (x, _) in train {
        for ((s, v), m) in std.iter_mut().zip(x).zip(&mean) {
            *s += (v - m).powi(2) / train.len() as f64;
        }
    }
    let std: Vec<f64> = std.iter().map(|s| s.sqrt().max(1e-9)).collect();
    let norm = |x: &[f64]| -> Vec<f64> { x.iter().zip(&mean).zip(&std).map(|((v, m), s)| (v - m) / s).collect() };
    let xs: Vec<(Vec<f64>, f64)> = train.iter().map(|(x, y)| (norm(x), *y)).collect();
    let mut w = vec![0f64; dim];
    let mut b = 0f64;
    let (lr, l2) = (0.5, 1e-3);
    for _ in 0..500 {
        let mut gw = vec![0f64; dim];
        let mut gb = 0.0;
        for (x, y) in &xs {
            let z: f64 = b + w.iter().zip(x).map(|(a, c)| a * c).sum::<f64>();
            let p = 1.0 / (1.0 + (-z).exp());
            for (g, v) in gw.iter_mut().zip(x) {
                *g += (p - y) * v;
            }
            gb += p - y;
        }
        let n = xs.len() as f64;
        for (wi, g) in w.iter_mut().zip(&gw) {
            *wi -= lr * (g / n + l2 * *wi);
        }
        b -= lr * gb / n;
    }
    let correct = test
        .iter()
        .filter(|(x, y)| {
            let x = norm(x);
            let z: f64 = b + w.iter().zip(&x).map(|(a, c)| a * c).sum::<f64>();
            (z > 0.0) == (*y > 0.5)
        })
        .count();
    correct as f64 / test.len() as f64
}

/// Squared MMD between the two descriptor sets and the held-out accuracy of
/// a logistic domain classifier trained on an 80/20 split of each domain.
pub fn domain_gap_probe(ds: &[Vec<f64>], dt: &[Vec<f64>], kernel: &KernelConfig, seed: u64) -> Result<DomainGap> {
    const MIN: usize = 32;
    if ds.len() < MIN || dt.len() < MIN {
        return Err(Error::Data(format!(
            "domain-gap probe needs {MIN} descriptors per domain, got {} and {}",
            ds.len(),
            dt.len()
        )));
    }
    let m = mmd2(ds, dt, kernel)?;
    let mut train = Vec::new();
    let mut test = Vec::new();
    for (set, y) in [(ds, 0.0), (dt, 1.0)] {
        let mut idx: Vec<usize> = (0..set.len()).collect();
        idx.shuffle(&mut ChaCha8Rng::seed_from_u64(mix_seed(seed, &format!("probe/{}", set.len()))));
        let cut = (set.len() * 4) / 5;
        for (k, &i) in idx.iter().enumerate() {
            let item = (set[i].clone(), y);
            if k < cut {
                train.push(item);
            } else {
                test.push(item);
            }
        }
    }
    Ok(DomainGap {
        mmd2: m,
        linear_probe_acc: logistic_probe(&train, &test),
        samples_per_domain: ds.len().min(dt.len()),
    })
}

/// Detached descriptors of `stage` for each sample.
pub fn collect_descriptors(model: &TrackerModel, samples: &[DomainSample], stage: usize) -> Result<Vec<Vec<f64>>> {
    let ch = model.backbone.in_channels;
    let mut out = Vec::with_capacity(samples.len());
    for chunk in samples.chunks(16) {
        let z: Vec<_> = chunk.iter().map(|s| &s.template).collect();
        let x: Vec<_> = chunk.iter().map(|s| &s.search).collect();
        let zp = model.backbone.forward(&patches_to_tensor(&z, ch)?, PatchKind::Template)?;
        let xp = model.backbone.forward(&patches_to_tensor(&x, ch)?, PatchKind::Search)?;
        let (_, c, hz, wz) = zp.stage(stage).dims4()?;
        let (_, _, hx, wx) = xp.stage(stage).dims4()?;
        let zf = zp.stage(stage).flatten_all()?.to_vec1::<f32>()?;
        let xf = xp.stage(stage).flatten_all()?.to_vec1::<f32>()?;
        let (nz, nx) = (c * hz * wz, c * hx * wx);
        for i in 0..chunk.len() {
            let (d, _) = descriptor_from_buffers(&zf[i * nz..(i + 1) * nz], &xf[i * nx..(i + 1) * nx], c, (hz, wz), (hx, wx));
            out.push(d.into_iter().map(|v| v as f64).collect());
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub per_sequence: Vec<SequenceMetrics>,
    pub aggregate: Aggregate,
    pub domain_gap: Option<DomainGap>,
    pub config_hash: String,
}

/// Tracks every sequence from its first ground-truth box and scores it.
pub fn evaluate_sequences(
    model: &TrackerModel,
    seqs: &[Sequence],
    aug: &AugmentConfig,
    window_influence: f32,
) -> Result<(Vec<SequenceMetrics>, BTreeMap<String, Vec<TrackResult>>)> {
    if seqs.is_empty() {
        return Err(Error::Data("no sequences to evaluate".into()));
    }
    let mut metrics = Vec::new();
    let mut tracks = BTreeMap::new();
    for seq in seqs {
        let gt = seq
            .boxes
            .as_ref()
            .ok_or_else(|| Error::Data(format!("sequence `{}` has no ground truth", seq.id)))?;
        let res = track_sequence(seq, gt[0], model, aug, window_influence)?;
        let pred: Vec<BBox> = res.iter().map(|r| r.bbox).collect();
        metrics.push(evaluate_boxes(&seq.id, &pred, gt)?);
        tracks.insert(seq.id.clone(), res);
    }
    Ok((metrics, tracks))
}

pub fn build_report(per_sequence: Vec<SequenceMetrics>, domain_gap: Option<DomainGap>, config_hash: &str) -> MetricReport {
    MetricReport {
        aggregate: aggregate(&per_sequence),
        per_sequence,
        domain_gap,
        config_hash: config_hash.to_string(),
    }
}

fn curve_csv(report: &MetricReport, pick: fn(&SequenceMetrics) -> &Curve) -> String {
    let mut s = String::from("threshold");
    for m in &report.per_sequence {
        let _ = write!(s, ",{}", m.id);
    }
    s.push_str(",mean\n");
    let curves: Vec<&Curve> = report.per_sequence.iter().filter(|m| m.valid).map(pick).collect();
    let mean = Curve::mean_of(&curves);
    let Some(first) = report.per_sequence.first().map(pick) else {
        return s;
    };
    for (i, t) in first.thresholds.iter().enumerate() {
        let _ = write!(s, "{t}");
        for m in &report.per_sequence {
            let _ = write!(s, ",{}", pick(m).values[i]);
        }
        let _ = writeln!(s, ",{}", mean.as_ref().map_or(0.0, |c| c.values[i]));
    }
    s
}

/// Writes `report.json` and one CSV per curve kind into `dir`.
pub fn write_report(dir: &Path, report: &MetricReport) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let json = dir.join("report.json");
    fs::write(&json, serde_json::to_string_pretty(report)?).map_err(|e| Error::io(&json, e))?;
    let files: [(&str, fn(&SequenceMetrics) -> &Curve); 3] = [
        ("precision.csv", |m| &m.precision),
        ("norm_precision.csv", |m| &m.norm_precision),
        ("success.csv", |m| &m.success),
    ];
    for (name, pick) in files {
        let p = dir.join(name);
        fs::write(&p, curve_csv(report, pick)).map_err(|e| Error::io(&p, e))?;
    }
    Ok(())
}

pub fn read_report(path: &Path) -> Result<MetricReport> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(serde_json::from_str(&text)?)
}
