use std::collections::{BTreeMap, VecDeque};

use serde::{Deserialize, Serialize};

use super::cluster::{assign_labels, fit_clusters, fit_k, ClusterModel, ClusterSearch};
use super::vote::{align_permutation, vote};
use crate::data::Domain;
use crate::tracker::NUM_STAGES;

/// Detached descriptors of one sample at every stage.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BankEntry {
    pub stages: Vec<Vec<f32>>,
}

/// Rolling memory of recent descriptors per domain plus the cluster models
/// fitted on it. Entries keep all stages together so per-stage clusterings of
/// the same samples can be aligned.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct OnlineClusterer {
    pub capacity: usize,
    pub reference_stage: usize,
    pub banks: BTreeMap<Domain, VecDeque<BankEntry>>,
    /// Per-stage models, all with the reference stage's cluster count.
    pub models: BTreeMap<usize, ClusterModel>,
    /// `perm[stage][label]` maps a stage label into the reference index space.
    pub perms: BTreeMap<usize, Vec<usize>>,
    pub refits: usize,
}

/// Summary of one refit, for logging.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RefitReport {
    pub num_clusters: usize,
    pub silhouette: BTreeMap<usize, f64>,
    pub scores: Vec<(usize, f64)>,
    pub histogram: BTreeMap<String, Vec<usize>>,
    pub fallback: bool,
}

fn to_f64(v: &[f32]) -> Vec<f64> {
    v.iter().map(|&x| x as f64).collect()
}

impl OnlineClusterer {
    pub fn new(capacity: usize, reference_stage: usize) -> Self {
        Self {
            capacity,
            reference_stage,
            ..Default::default()
        }
    }

    pub fn push(&mut self, domain: Domain, entry: BankEntry) {
        let bank = self.banks.entry(domain).or_default();
        bank.push_back(entry);
        while bank.len() > self.capacity {
            bank.pop_front();
        }
    }

    pub fn len(&self, domain: Domain) -> usize {
        self.banks.get(&domain).map_or(0, |b| b.len())
    }

    pub fn is_fitted(&self) -> bool {
        !self.models.is_empty()
    }

    pub fn num_clusters(&self) -> Option<usize> {
        self.models.get(&self.reference_stage).map(|m| m.num_clusters)
    }

    /// Refits every stage on both banks jointly.
    pub fn refit(&mut self, search: &ClusterSearch, seed: u64) -> Option<RefitReport> {
        let entries: Vec<(Domain, &BankEntry)> = self
            .banks
            .iter()
            .flat_map(|(d, b)| b.iter().map(move |e| (*d, e)))
            .collect();
        if entries.is_empty() {
            return None;
        }
        let stage_points = |m: usize| -> Vec<Vec<f64>> { entries.iter().map(|(_, e)| to_f64(&e.stages[m - 1])).collect() };
        let r = self.reference_stage;
        let ref_pts = stage_points(r);
        let ref_model = fit_clusters(&ref_pts, r, search, seed ^ r as u64);
        let c = ref_model.num_clusters;
        let ref_labels = assign_labels(&ref_model, &ref_pts);
        let mut models = BTreeMap::new();
        let mut perms = BTreeMap::new();
        let mut silhouette = BTreeMap::new();
        for m in 1..=NUM_STAGES {
            if m == r {
                continue;
            }
            let pts = stage_points(m);
            let model = fit_k(&pts, m, c, search, seed ^ m as u64);
            let labels = assign_labels(&model, &pts);
            let perm = align_permutation(&ref_labels, &labels, c).unwrap_or_else(|_| (0..c).collect());
            silhouette.insert(m, model.silhouette);
            perms.insert(m, perm);
            models.insert(m, model);
        }
        silhouette.insert(r, ref_model.silhouette);
        perms.insert(r, (0..c).collect());
        let report_scores = ref_model.scores.clone();
        let fallback = ref_model.fallback;
        models.insert(r, ref_model);
        self.models = models;
        self.perms = perms;
        self.refits += 1;

        let mut histogram = BTreeMap::new();
        for dom in [Domain::Source, Domain::Target] {
            let mut h = vec![0usize; c];
            for (d, e) in &entries {
                if *d == dom {
                    h[self.label(e, &[1.0; NUM_STAGES]).unwrap_or(0)] += 1;
                }
            }
            histogram.insert(dom.as_str().to_string(), h);
        }
        Some(RefitReport { num_clusters: c, silhouette, scores: report_scores, histogram, fallback })
    }

    /// Aligned per-stage labels of one sample.
    pub fn stage_labels(&self, entry: &BankEntry) -> Option<Vec<usize>> {
        (1..=NUM_STAGES)
            .map(|m| {
                let model = self.models.get(&m)?;
                let l = assign_labels(model, &[to_f64(&entry.stages[m - 1])])[0];
                Some(self.perms.get(&m)?[l])
            })
            .collect()
    }

    /// Voted pseudo-label of one sample.
    pub fn label(&self, entry: &BankEntry, weights: &[f64]) -> Option<usize> {
        let labels = self.stage_labels(entry)?;
        let c = self.num_clusters()?;
        // the reference stage casts the tie-breaking vote, so put it last
        let r = self.reference_stage;
        let mut order: Vec<usize> = (1..=NUM_STAGES).filter(|&m| m != r).collect();
        order.push(r);
        let l: Vec<usize> = order.iter().map(|&m| labels[m - 1]).collect();
        let w: Vec<f64> = order.iter().map(|&m| weights[m - 1]).collect();
        Some(vote(&l, &w, c))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn entry(rng: &mut ChaCha8Rng, class: usize) -> BankEntry {
        let stages = (0..NUM_STAGES)
            .map(|m| {
                // the class index maps to a different axis per stage
                let axis = (class + m) % 3;
                (0..3).map(|k| if k == axis { 5.0 } else { 0.0 } + rng.random_range(-0.3..0.3f32)).collect()
            })
            .collect();
        BankEntry { stages }
    }

    #[test]
    fn bank_is_bounded() {
        let mut oc = OnlineClusterer::new(5, 4);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for _ in 0..12 {
            oc.push(Domain::Source, entry(&mut rng, 0));
        }
        assert_eq!(oc.len(Domain::Source), 5);
        assert_eq!(oc.len(Domain::Target), 0);
    }

    #[test]
    fn stages_agree_after_alignment() {
        let mut oc = OnlineClusterer::new(200, 4);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut truth = Vec::new();
        for i in 0..90 {
            let c = i % 3;
            let e = entry(&mut rng, c);
            truth.push((e.clone(), c));
            oc.push(if i % 2 == 0 { Domain::Source } else { Domain::Target }, e);
        }
        let rep = oc.refit(&ClusterSearch { max: 6, ..Default::default() }, 7).unwrap();
        assert_eq!(rep.num_clusters, 3);
        let mut map = BTreeMap::new();
        for (e, c) in &truth {
            let labels = oc.stage_labels(e).unwrap();
            assert!(labels.iter().all(|&l| l == labels[0]), "{labels:?}");
            let voted = oc.label(e, &[1.0, 2.0, 3.0, 4.0]).unwrap();
            assert_eq!(*map.entry(*c).or_insert(voted), voted);
        }
        assert_eq!(map.len(), 3);
    }
}
