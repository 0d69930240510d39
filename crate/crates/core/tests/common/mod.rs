#![allow(dead_code)]

use pdat::config::RunConfig;
use pdat::data::{Domain, DomainSample};
use pdat::pipeline;
use pdat::synthetic::{synth_corpus, SynthConfig};

/// Small network and patch sizes so a training iteration takes milliseconds.
pub fn tiny_config() -> RunConfig {
    let sets: Vec<String> = [
        "seed=7",
        "data.template_side=32",
        "data.search_side=64",
        "data.jitter_px=4.0",
        "data.source_stride=1",
        "tracker.widths=[4, 8, 8, 16]",
        "tracker.norm_groups=2",
        "tracker.head_width=8",
        "tracker.head_convs=1",
        "agda.d_model=16",
        "agda.n_heads=2",
        "agda.ff_width=32",
        "agda.layers=1",
        "agda.max_token_side=4",
        "csda.memory_size=64",
        "csda.refit_interval=3",
        "csda.cluster_max=4",
        "csda.kmeans_iters=20",
        "csda.kmeans_restarts=2",
        "train.batch_size=4",
        "train.epochs=2",
    ]
    .iter()
    .map(|s| s.to_string())
    .collect();
    RunConfig::resolve(None, &sets).unwrap()
}

pub fn tiny_synth() -> SynthConfig {
    SynthConfig { sequences: 2, frames: 6, width: 80, height: 60, min_size: 10.0, max_size: 16.0, ..Default::default() }
}

/// `n` source and `n` target pairs. Target pairs are cropped around the
/// object box and carry no label.
pub fn fixture(cfg: &RunConfig, n: usize) -> (Vec<DomainSample>, Vec<DomainSample>) {
    let sc = tiny_synth();
    let src = synth_corpus(&sc, Domain::Source, 11).unwrap();
    let tgt = synth_corpus(&sc, Domain::Target, 12).unwrap();
    let s = pipeline::source_pairs(cfg, &src).unwrap();
    let mut t = pipeline::source_pairs(cfg, &tgt).unwrap();
    for p in &mut t {
        p.domain = Domain::Target;
    }
    assert!(s.len() >= n && t.len() >= n, "fixture too small: {} / {}", s.len(), t.len());
    (s[..n].to_vec(), t[..n].to_vec())
}

pub fn refs(v: &[DomainSample]) -> Vec<&DomainSample> {
    v.iter().collect()
}

/// Source and target pairs at the configured patch sizes from the default
/// synthetic corpus.
pub fn desk_fixture(cfg: &RunConfig, sequences: usize) -> (Vec<DomainSample>, Vec<DomainSample>) {
    let sc = SynthConfig { sequences, ..Default::default() };
    let src = synth_corpus(&sc, Domain::Source, 1).unwrap();
    let tgt = synth_corpus(&sc, Domain::Target, 2).unwrap();
    let s = pipeline::source_pairs(cfg, &src).unwrap();
    let (t, _, _) = pipeline::target_pairs(cfg, &tgt, None).unwrap();
    (s, t)
}
