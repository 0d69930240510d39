//! Glue between datasets, pair generation, training and evaluation, shared by
//! the command-line runner and the end-to-end tests.

use std::path::Path;

use crate::config::RunConfig;
use crate::csda::KernelConfig;
use crate::data::{
    build_source_pairs, build_target_pairs, mix_seed, AugmentConfig, CandidateFilter, DomainSample,
    OfflineMaskSegmenter, PairRecord, PairStoreManifest, Segmenter, Sequence, StubSegmenter,
};
use crate::error::{Error, Result};
use crate::eval::{build_report, collect_descriptors, domain_gap_probe, evaluate_sequences, DomainGap, MetricReport};
use crate::tracker::TrackerModel;

pub fn augment(cfg: &RunConfig) -> AugmentConfig {
    AugmentConfig::from_config(&cfg.data)
}

pub fn candidate_filter(cfg: &RunConfig) -> CandidateFilter {
    CandidateFilter {
        conf_threshold: cfg.data.conf_threshold,
        min_area: cfg.data.min_area,
        max_area_frac: cfg.data.max_area_frac,
    }
}

pub fn source_pairs(cfg: &RunConfig, seqs: &[Sequence]) -> Result<Vec<DomainSample>> {
    build_source_pairs(
        seqs,
        &augment(cfg),
        cfg.data.source_stride,
        cfg.data.source_frame_gap,
        mix_seed(cfg.seed, "source-pairs"),
    )
}

/// Pseudo pairs from unlabeled sequences. The offline segmenter reads masks
/// from `<root>/<seq_id>/masks`, so it needs the dataset root.
pub fn target_pairs(
    cfg: &RunConfig,
    seqs: &[Sequence],
    root: Option<&Path>,
) -> Result<(Vec<DomainSample>, Vec<PairRecord>, PairStoreManifest)> {
    let segmenter_for: Box<dyn Fn(&Sequence) -> Box<dyn Segmenter>> = match cfg.data.segmenter.as_str() {
        "offline" => {
            let root = root
                .ok_or_else(|| Error::Config("the offline segmenter needs a dataset root".into()))?
                .to_path_buf();
            Box::new(move |s: &Sequence| Box::new(OfflineMaskSegmenter::for_sequence(&root.join(&s.id))) as Box<dyn Segmenter>)
        }
        _ => {
            let delta = cfg.data.stub_delta;
            Box::new(move |_: &Sequence| Box::new(StubSegmenter::new(delta)) as Box<dyn Segmenter>)
        }
    };
    let out = build_target_pairs(
        seqs,
        segmenter_for.as_ref(),
        &candidate_filter(cfg),
        &augment(cfg),
        cfg.data.keyframe_stride,
        mix_seed(cfg.seed, "target-pairs"),
    );
    if out.0.is_empty() {
        return Err(Error::Data("no candidates: segmentation produced no target pairs".into()));
    }
    Ok(out)
}

/// Evenly strided subset of at most `n` samples.
pub fn spread(samples: &[DomainSample], n: usize) -> Vec<DomainSample> {
    if samples.len() <= n || n == 0 {
        return samples.to_vec();
    }
    (0..n).map(|i| samples[i * samples.len() / n].clone()).collect()
}

/// Domain gap of the alignment-stage descriptors on `eval.probe_samples`
/// pairs per domain.
pub fn domain_gap(
    cfg: &RunConfig,
    model: &TrackerModel,
    source: &[DomainSample],
    target: &[DomainSample],
) -> Result<DomainGap> {
    let n = cfg.eval.probe_samples;
    let ds = collect_descriptors(model, &spread(source, n), cfg.csda.stage)?;
    let dt = collect_descriptors(model, &spread(target, n), cfg.csda.stage)?;
    let kernel = KernelConfig { multipliers: cfg.csda.kernel_multipliers.clone() };
    domain_gap_probe(&ds, &dt, &kernel, mix_seed(cfg.seed, "probe"))
}

/// Tracks the sequences and, when probe pairs are given, measures the
/// domain gap.
pub fn evaluate(
    cfg: &RunConfig,
    model: &TrackerModel,
    seqs: &[Sequence],
    probe: Option<(&[DomainSample], &[DomainSample])>,
) -> Result<MetricReport> {
    let aug = augment(cfg);
    let (per_seq, _) = evaluate_sequences(model, seqs, &aug, cfg.tracker.window_influence)?;
    let gap = match probe {
        Some((s, t)) => Some(domain_gap(cfg, model, s, t)?),
        None => None,
    };
    Ok(build_report(per_seq, gap, &cfg.hash()))
}
