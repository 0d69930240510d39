//! Progressive training loop. Every iteration first updates the tracker on
//! the tracking loss plus the adversarial generator loss and then the
//! discriminators on their own loss (step 1), and finally updates the
//! backbone on the subdomain alignment loss (step 2).

use std::collections::{BTreeMap, HashMap};
use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use candle_core::Tensor;
use serde::{Deserialize, Serialize};

use crate::agda::{adv_loss_d, adv_loss_g, grl, mean_over_stages, StyleDiscriminator};
use crate::config::RunConfig;
use crate::csda::{
    correlation_descriptor, descriptor_from_buffers, lmmd_loss, BankEntry, ClusterSearch, KernelConfig,
    OnlineClusterer, RefitReport,
};
use crate::data::{mix_seed, BatchIterator, Domain, DomainSample};
use crate::error::{Error, Result};
use crate::nn::{grad_scale, load_tensors, save_tensors, scalar_f64, Adam, Init, ParamStore};
use crate::tracker::{patches_to_tensor, tracking_loss, FeaturePyramid, LossBundle, PatchKind, TrackerModel, NUM_STAGES};

/// `base · (1 − iter/max_iter)^power`, reaching 0 at and beyond `max_iter`.
pub fn poly_lr(base: f64, iter: usize, max_iter: usize, power: f64) -> f64 {
    if max_iter == 0 {
        return 0.0;
    }
    let frac = iter.min(max_iter) as f64 / max_iter as f64;
    base * (1.0 - frac).powf(power)
}

/// One line of the metrics stream.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterRecord {
    pub iter: usize,
    pub epoch: usize,
    #[serde(rename = "lr_G")]
    pub lr_g: f64,
    #[serde(rename = "lr_D")]
    pub lr_d: f64,
    pub cls: f64,
    pub reg: f64,
    pub cen: f64,
    #[serde(rename = "adv_G")]
    pub adv_g: f64,
    #[serde(rename = "adv_D")]
    pub adv_d: f64,
    pub sub: f64,
    #[serde(rename = "C_selected")]
    pub c_selected: Option<usize>,
    pub skipped_step2: bool,
    #[serde(default, rename = "adv_G_stages")]
    pub adv_g_stages: Vec<f64>,
    #[serde(default, rename = "adv_D_stages")]
    pub adv_d_stages: Vec<f64>,
}

/// Result of step 1.
#[derive(Debug, Clone)]
pub struct StepOne {
    pub bundle: LossBundle,
    pub adv_g_stages: Vec<f64>,
    pub adv_d_stages: Vec<f64>,
}

/// Result of step 2.
#[derive(Debug, Clone, Default)]
pub struct StepTwo {
    pub sub: f64,
    pub skipped: bool,
    pub refit: Option<RefitReport>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct TrainerState {
    iter: usize,
    epoch: usize,
    max_iter: usize,
    opt_g_step: u64,
    opt_d_step: u64,
    clusterer: OnlineClusterer,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CheckpointManifest {
    pub step: usize,
    pub epoch: usize,
    pub metric_summary: BTreeMap<String, f64>,
}

/// Detached feature pyramids of a source and a target batch.
#[derive(Debug, Clone)]
pub struct DomainFeatures {
    pub zs: FeaturePyramid,
    pub xs: FeaturePyramid,
    pub zt: FeaturePyramid,
    pub xt: FeaturePyramid,
}

struct Batch {
    z: Tensor,
    x: Tensor,
    ids: Vec<String>,
}

fn stack(samples: &[&DomainSample], channels: usize) -> Result<Batch> {
    let z: Vec<_> = samples.iter().map(|s| &s.template).collect();
    let x: Vec<_> = samples.iter().map(|s| &s.search).collect();
    Ok(Batch {
        z: patches_to_tensor(&z, channels)?,
        x: patches_to_tensor(&x, channels)?,
        ids: samples.iter().map(|s| s.id.clone()).collect(),
    })
}

fn ensure_finite(name: &str, v: f64, iter: usize, ids: &[String]) -> Result<()> {
    if v.is_finite() {
        return Ok(());
    }
    Err(Error::Numerical(format!(
        "non-finite {name} loss ({v}) at iteration {iter}; batch: {}",
        ids.join(", ")
    )))
}

/// Detached per-sample descriptors of every stage.
fn bank_entries(z: &FeaturePyramid, x: &FeaturePyramid) -> Result<Vec<BankEntry>> {
    let b = z.stage(1).dim(0)?;
    let mut out: Vec<BankEntry> = (0..b).map(|_| BankEntry { stages: Vec::with_capacity(NUM_STAGES) }).collect();
    for m in 1..=NUM_STAGES {
        let (_, c, hz, wz) = z.stage(m).dims4()?;
        let (_, _, hx, wx) = x.stage(m).dims4()?;
        let zf = z.stage(m).flatten_all()?.to_vec1::<f32>()?;
        let xf = x.stage(m).flatten_all()?.to_vec1::<f32>()?;
        let (nz, nx) = (c * hz * wz, c * hx * wx);
        for (i, e) in out.iter_mut().enumerate() {
            let (d, _) = descriptor_from_buffers(&zf[i * nz..(i + 1) * nz], &xf[i * nx..(i + 1) * nx], c, (hz, wz), (hx, wx));
            e.stages.push(d);
        }
    }
    Ok(out)
}

pub struct Trainer {
    pub cfg: RunConfig,
    pub model: TrackerModel,
    pub disc: Option<StyleDiscriminator>,
    gen_params: ParamStore,
    pub opt_g: Adam,
    pub opt_d: Adam,
    pub clusterer: OnlineClusterer,
    pub iter: usize,
    /// Completed epochs.
    pub epoch: usize,
    pub max_iter: usize,
    pub log: Vec<IterRecord>,
    pub refits: Vec<(usize, RefitReport)>,
    metrics: Option<BufWriter<File>>,
}

impl Trainer {
    pub fn new(cfg: RunConfig) -> Result<Self> {
        cfg.validate()?;
        let model = TrackerModel::new(&cfg.tracker, mix_seed(cfg.seed, "model"))?;
        if !cfg.train.init_checkpoint.is_empty() {
            let path = Path::new(&cfg.train.init_checkpoint).join("params.bin");
            let map = load_tensors(&path)?;
            model.load_map(&map)?;
            log::info!("initialized tracker from {}", path.display());
        }
        let disc = if cfg.agda.enabled {
            let mut init = Init::new(mix_seed(cfg.seed, "discriminator"));
            Some(StyleDiscriminator::new(&cfg.agda, &cfg.tracker.widths, &mut init)?)
        } else {
            None
        };
        let gen_params = model.param_store()?;
        let clusterer = OnlineClusterer::new(cfg.csda.memory_size, cfg.csda.stage);
        Ok(Self {
            cfg,
            model,
            disc,
            gen_params,
            opt_g: Adam::default(),
            opt_d: Adam::default(),
            clusterer,
            iter: 0,
            epoch: 0,
            max_iter: 0,
            log: Vec::new(),
            refits: Vec::new(),
            metrics: None,
        })
    }

    fn lambda(&self) -> [f64; 3] {
        let t = &self.cfg.tracker;
        [t.lambda_cls, t.lambda_reg, t.lambda_cen]
    }

    pub fn lr_g(&self) -> f64 {
        poly_lr(self.cfg.train.lr_backbone, self.iter, self.max_iter, self.cfg.train.poly_power)
    }

    pub fn lr_d(&self) -> f64 {
        if self.disc.is_none() {
            return 0.0;
        }
        poly_lr(self.cfg.train.lr_discriminator, self.iter, self.max_iter, self.cfg.train.poly_power)
    }

    fn grl_coefficient(&self) -> f64 {
        let a = &self.cfg.agda;
        if a.grl_warmup <= 0.0 || self.max_iter == 0 {
            return a.grl_coefficient;
        }
        let ramp = a.grl_warmup * self.max_iter as f64;
        a.grl_coefficient * (self.iter as f64 / ramp).min(1.0)
    }

    /// Sets the iteration budget the learning-rate schedule decays over.
    pub fn set_max_iter(&mut self, max_iter: usize) {
        self.max_iter = max_iter;
    }

    /// Tracking and adversarial update followed by the discriminator update.
    pub fn train_step1(&mut self, bs: &[&DomainSample], bt: &[&DomainSample]) -> Result<StepOne> {
        if bs.is_empty() || bt.is_empty() {
            return Err(Error::Data(format!(
                "step 1 needs both domains (source {}, target {})",
                bs.len(),
                bt.len()
            )));
        }
        let ch = self.cfg.tracker.in_channels;
        let src = stack(bs, ch)?;
        let lambda = self.lambda();
        let (zs, xs, heads) = self.model.forward(&src.z, &src.x)?;
        let grid = self.model.grid(src.z.dim(2)?, src.x.dim(2)?);
        let gt: Vec<_> = bs.iter().map(|s| s.crop_box).collect();
        let track = tracking_loss(&heads, &gt, &grid, lambda)?;
        let mut bundle = track.bundle(lambda)?;
        let mut total = track.total.clone();
        let mut adv_g_stages = Vec::new();
        let mut adv_d_stages = Vec::new();
        let (lr_g, lr_d, coef) = (self.lr_g(), self.lr_d(), self.grl_coefficient());

        let mut feats = None;
        let mut target_ids = Vec::new();
        if let Some(disc) = &self.disc {
            let tgt = stack(bt, ch)?;
            let zt = self.model.backbone.forward(&tgt.z, PatchKind::Template)?;
            let xt = self.model.backbone.forward(&tgt.x, PatchKind::Search)?;
            let mut losses = Vec::new();
            for m in disc.stages().collect::<Vec<_>>() {
                let l = if self.cfg.agda.generator_mode == "grl" {
                    let dx = disc.discriminate(&grl(xt.stage(m), coef)?, m)?;
                    let dz = disc.discriminate(&grl(zt.stage(m), coef)?, m)?;
                    ((dx - 1.0)?.sqr()?.mean_all()? + (dz - 1.0)?.sqr()?.mean_all()?)?
                } else {
                    let dx = disc.discriminate(&grad_scale(xt.stage(m), coef)?, m)?;
                    let dz = disc.discriminate(&grad_scale(zt.stage(m), coef)?, m)?;
                    adv_loss_g(&dx, &dz)?
                };
                adv_g_stages.push(scalar_f64(&l)?);
                losses.push(l);
            }
            let adv = mean_over_stages(&losses)?;
            bundle.adv_g = scalar_f64(&adv)?;
            total = (total + adv)?;
            feats = Some(DomainFeatures { zs: zs.detach(), xs: xs.detach(), zt: zt.detach(), xt: xt.detach() });
            target_ids = tgt.ids;
        }
        let ids: Vec<String> = src.ids.iter().chain(&target_ids).cloned().collect();
        ensure_finite("step-1 generator", scalar_f64(&total)?, self.iter, &ids)?;
        let grads = total.backward()?;
        self.opt_g.step(&self.gen_params, &grads, lr_g)?;

        if let Some(f) = feats {
            let (loss, stages) = self.discriminator_update(&f, lr_d)?;
            ensure_finite("discriminator", loss, self.iter, &ids)?;
            bundle.adv_d = loss;
            adv_d_stages = stages;
        }
        Ok(StepOne { bundle, adv_g_stages, adv_d_stages })
    }

    /// Detached backbone features of both batches.
    pub fn features(&self, bs: &[&DomainSample], bt: &[&DomainSample]) -> Result<DomainFeatures> {
        let ch = self.cfg.tracker.in_channels;
        let (src, tgt) = (stack(bs, ch)?, stack(bt, ch)?);
        let bb = &self.model.backbone;
        Ok(DomainFeatures {
            zs: bb.forward(&src.z, PatchKind::Template)?.detach(),
            xs: bb.forward(&src.x, PatchKind::Search)?.detach(),
            zt: bb.forward(&tgt.z, PatchKind::Template)?.detach(),
            xt: bb.forward(&tgt.x, PatchKind::Search)?.detach(),
        })
    }

    /// One discriminator update on fixed features. Returns the stage-mean
    /// loss and the per-stage losses before the update.
    pub fn discriminator_update(&mut self, f: &DomainFeatures, lr: f64) -> Result<(f64, Vec<f64>)> {
        let disc = self.disc.as_ref().ok_or_else(|| Error::Config("global adaptation is disabled".into()))?;
        let mut losses = Vec::new();
        let mut stages = Vec::new();
        for m in disc.stages().collect::<Vec<_>>() {
            let mut scores = BTreeMap::new();
            scores.insert(Domain::Source, (disc.discriminate(f.xs.stage(m), m)?, disc.discriminate(f.zs.stage(m), m)?));
            scores.insert(Domain::Target, (disc.discriminate(f.xt.stage(m), m)?, disc.discriminate(f.zt.stage(m), m)?));
            let l = adv_loss_d(&scores)?;
            stages.push(scalar_f64(&l)?);
            losses.push(l);
        }
        let loss = mean_over_stages(&losses)?;
        let v = scalar_f64(&loss)?;
        if v.is_finite() {
            let grads = loss.backward()?;
            self.opt_d.step(&disc.params, &grads, lr)?;
        }
        Ok((v, stages))
    }

    fn search(&self) -> ClusterSearch {
        let c = &self.cfg.csda;
        ClusterSearch { min: c.cluster_min, max: c.cluster_max, iters: c.kmeans_iters, restarts: c.kmeans_restarts }
    }

    /// Subdomain alignment update of the backbone. The batch descriptors are
    /// pushed to the memory banks first and the clusters refit when due.
    pub fn train_step2(&mut self, bs: &[&DomainSample], bt: &[&DomainSample]) -> Result<StepTwo> {
        if bs.is_empty() || bt.is_empty() {
            return Err(Error::Data("step 2 needs both domains".into()));
        }
        let ch = self.cfg.tracker.in_channels;
        let (src, tgt) = (stack(bs, ch)?, stack(bt, ch)?);
        let bb = &self.model.backbone;
        let zs = bb.forward(&src.z, PatchKind::Template)?;
        let xs = bb.forward(&src.x, PatchKind::Search)?;
        let zt = bb.forward(&tgt.z, PatchKind::Template)?;
        let xt = bb.forward(&tgt.x, PatchKind::Search)?;
        let es = bank_entries(&zs, &xs)?;
        let et = bank_entries(&zt, &xt)?;
        for e in &es {
            self.clusterer.push(Domain::Source, e.clone());
        }
        for e in &et {
            self.clusterer.push(Domain::Target, e.clone());
        }
        let interval = self.cfg.csda.refit_interval.max(1);
        let mut out = StepTwo::default();
        if !self.clusterer.is_fitted() || self.iter % interval == 0 {
            let seed = mix_seed(self.cfg.seed, &format!("refit/{}", self.iter));
            if let Some(rep) = self.clusterer.refit(&self.search(), seed) {
                log::debug!("refit at iteration {}: C = {}", self.iter, rep.num_clusters);
                self.refits.push((self.iter, rep.clone()));
                out.refit = Some(rep);
            }
        }
        let w = &self.cfg.csda.vote_weights;
        let label = |e: &BankEntry| self.clusterer.label(e, w).unwrap_or(0);
        let ls: Vec<usize> = es.iter().map(label).collect();
        let lt: Vec<usize> = et.iter().map(label).collect();
        let c = self.clusterer.num_clusters().unwrap_or(2);
        let r = self.cfg.csda.stage;
        let (ds, _) = correlation_descriptor(zs.stage(r), xs.stage(r))?;
        let (dt, _) = correlation_descriptor(zt.stage(r), xt.stage(r))?;
        let kernel = KernelConfig { multipliers: self.cfg.csda.kernel_multipliers.clone() };
        let l = lmmd_loss(&ds, &dt, &ls, &lt, c, &kernel)?;
        out.sub = scalar_f64(&l.loss)?;
        if l.present == 0 {
            log::debug!("iteration {}: no class shared by both domains, step 2 skipped", self.iter);
            out.skipped = true;
            return Ok(out);
        }
        let ids: Vec<String> = src.ids.into_iter().chain(tgt.ids).collect();
        ensure_finite("subdomain", out.sub, self.iter, &ids)?;
        let loss = (l.loss * self.cfg.csda.weight)?;
        let grads = loss.backward()?;
        self.opt_g.step(&self.gen_params, &grads, self.lr_g())?;
        Ok(out)
    }

    /// One full iteration; appends to the log and the metrics stream.
    pub fn iteration(&mut self, bs: &[&DomainSample], bt: &[&DomainSample]) -> Result<IterRecord> {
        let (lr_g, lr_d) = (self.lr_g(), self.lr_d());
        let one = self.train_step1(bs, bt)?;
        let two = if self.cfg.csda.enabled {
            self.train_step2(bs, bt)?
        } else {
            StepTwo::default()
        };
        let b = one.bundle;
        let rec = IterRecord {
            iter: self.iter,
            epoch: self.epoch,
            lr_g,
            lr_d,
            cls: b.cls,
            reg: b.reg,
            cen: b.cen,
            adv_g: b.adv_g,
            adv_d: b.adv_d,
            sub: two.sub,
            c_selected: if self.cfg.csda.enabled { self.clusterer.num_clusters() } else { None },
            skipped_step2: two.skipped,
            adv_g_stages: one.adv_g_stages,
            adv_d_stages: one.adv_d_stages,
        };
        if let Some(w) = &mut self.metrics {
            let line = serde_json::to_string(&rec)?;
            writeln!(w, "{line}").and_then(|_| w.flush()).map_err(|e| Error::io("metrics.jsonl", e))?;
        }
        self.log.push(rec.clone());
        self.iter += 1;
        Ok(rec)
    }

    fn batches<'a>(&self, source: &'a [DomainSample], target: &'a [DomainSample]) -> Result<BatchIterator<'a>> {
        Ok(BatchIterator::new(source, target, self.cfg.train.batch_size, mix_seed(self.cfg.seed, "batches"))?
            .with_max_steps(self.cfg.train.max_steps_per_epoch))
    }

    /// Runs one epoch and returns its records.
    pub fn train_epoch(&mut self, source: &[DomainSample], target: &[DomainSample]) -> Result<Vec<IterRecord>> {
        let it = self.batches(source, target)?;
        if self.max_iter == 0 {
            self.max_iter = it.steps_per_epoch() * self.cfg.train.epochs;
        }
        let mut recs = Vec::new();
        for (bs, bt) in it.epoch(self.epoch) {
            recs.push(self.iteration(&bs, &bt)?);
        }
        self.epoch += 1;
        Ok(recs)
    }

    /// Appends the metrics stream to `dir/metrics.jsonl`.
    pub fn open_metrics(&mut self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let path = dir.join("metrics.jsonl");
        let f = fs::OpenOptions::new()
            .create(true)
            .append(true)
            .open(&path)
            .map_err(|e| Error::io(&path, e))?;
        self.metrics = Some(BufWriter::new(f));
        Ok(())
    }

    /// Trains the remaining epochs, checkpointing after each under
    /// `out_dir/checkpoints/epoch_NNN` when an output directory is given.
    pub fn run(&mut self, source: &[DomainSample], target: &[DomainSample], out_dir: Option<&Path>) -> Result<()> {
        if let Some(dir) = out_dir {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
            let snap = dir.join("config.snapshot");
            fs::write(&snap, self.cfg.snapshot()).map_err(|e| Error::io(&snap, e))?;
            self.open_metrics(dir)?;
        }
        while self.epoch < self.cfg.train.epochs {
            let recs = self.train_epoch(source, target)?;
            log::info!(
                "epoch {}/{}: cls {:.4} reg {:.4} cen {:.4} adv_G {:.4} adv_D {:.4} sub {:.5}",
                self.epoch,
                self.cfg.train.epochs,
                mean(&recs, |r| r.cls),
                mean(&recs, |r| r.reg),
                mean(&recs, |r| r.cen),
                mean(&recs, |r| r.adv_g),
                mean(&recs, |r| r.adv_d),
                mean(&recs, |r| r.sub)
            );
            if let Some(dir) = out_dir {
                self.save_checkpoint(&checkpoint_dir(dir, self.epoch), &recs)?;
            }
        }
        Ok(())
    }

    pub fn save_checkpoint(&self, dir: &Path, epoch_records: &[IterRecord]) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let mut map = self.model.to_map();
        if let Some(d) = &self.disc {
            map.extend(d.params.to_map("disc."));
            map.extend(self.opt_d.state_map("opt_d."));
        }
        map.extend(self.opt_g.state_map("opt_g."));
        save_tensors(&map, &dir.join("params.bin"))?;
        let snap = dir.join("config.snapshot");
        fs::write(&snap, self.cfg.snapshot()).map_err(|e| Error::io(&snap, e))?;
        let state = TrainerState {
            iter: self.iter,
            epoch: self.epoch,
            max_iter: self.max_iter,
            opt_g_step: self.opt_g.step,
            opt_d_step: self.opt_d.step,
            clusterer: self.clusterer.clone(),
        };
        write_json(&dir.join("trainer_state.json"), &state)?;
        let mut summary = BTreeMap::new();
        if !epoch_records.is_empty() {
            for (k, f) in METRIC_FIELDS {
                summary.insert(k.to_string(), mean(epoch_records, f));
            }
        }
        let manifest = CheckpointManifest { step: self.iter, epoch: self.epoch, metric_summary: summary };
        write_json(&dir.join("manifest.json"), &manifest)
    }

    /// Restores a trainer from a checkpoint written by [`Trainer::save_checkpoint`].
    pub fn resume(cfg: RunConfig, dir: &Path) -> Result<Self> {
        let snap = fs::read_to_string(dir.join("config.snapshot")).map_err(|e| Error::io(dir.join("config.snapshot"), e))?;
        if RunConfig::from_toml_str(&snap).map(|c| c.hash()).ok() != Some(cfg.hash()) {
            log::warn!("resuming {} with a config that differs from its snapshot", dir.display());
        }
        let mut t = Self::new(RunConfig { train: crate::config::TrainConfig { init_checkpoint: String::new(), ..cfg.train.clone() }, ..cfg })?;
        let map = load_tensors(&dir.join("params.bin"))?;
        t.model.load_map(&map)?;
        if let Some(d) = &t.disc {
            d.params.load_map(&map, "disc.")?;
        }
        let state: TrainerState = read_json(&dir.join("trainer_state.json"))?;
        t.opt_g.load_state(&map, "opt_g.", state.opt_g_step);
        t.opt_d.load_state(&map, "opt_d.", state.opt_d_step);
        t.iter = state.iter;
        t.epoch = state.epoch;
        t.max_iter = state.max_iter;
        t.clusterer = state.clusterer;
        Ok(t)
    }
}

type Field = fn(&IterRecord) -> f64;

const METRIC_FIELDS: [(&str, Field); 6] = [
    ("cls", |r| r.cls),
    ("reg", |r| r.reg),
    ("cen", |r| r.cen),
    ("adv_G", |r| r.adv_g),
    ("adv_D", |r| r.adv_d),
    ("sub", |r| r.sub),
];

fn mean(recs: &[IterRecord], f: impl Fn(&IterRecord) -> f64) -> f64 {
    if recs.is_empty() {
        return 0.0;
    }
    recs.iter().map(f).sum::<f64>() / recs.len() as f64
}

pub fn checkpoint_dir(out_dir: &Path, epoch: usize) -> PathBuf {
    out_dir.join("checkpoints").join(format!("epoch_{epoch:03}"))
}

/// Latest `epoch_NNN` checkpoint under `out_dir`, if any.
pub fn latest_checkpoint(out_dir: &Path) -> Option<PathBuf> {
    let mut dirs: Vec<PathBuf> = fs::read_dir(out_dir.join("checkpoints"))
        .ok()?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.join("params.bin").is_file())
        .collect();
    dirs.sort();
    dirs.pop()
}

/// Loads only the tracker weights of a checkpoint.
pub fn load_tracker(cfg: &RunConfig, dir: &Path) -> Result<TrackerModel> {
    let model = TrackerModel::new(&cfg.tracker, mix_seed(cfg.seed, "model"))?;
    if let Ok(saved) = fs::read_to_string(dir.join("config.snapshot")) {
        if saved != cfg.snapshot() {
            log::warn!("{}: checkpoint config differs from the current config", dir.display());
        }
    }
    let map: HashMap<String, Tensor> = load_tensors(&dir.join("params.bin"))?;
    model.load_map(&map)?;
    Ok(model)
}

/// Per-sample descriptors of every stage, as stored in the memory banks.
pub fn sample_entries(model: &TrackerModel, samples: &[DomainSample]) -> Result<Vec<BankEntry>> {
    let mut out = Vec::with_capacity(samples.len());
    for chunk in samples.chunks(16) {
        let b = stack(&chunk.iter().collect::<Vec<_>>(), model.backbone.in_channels)?;
        let z = model.backbone.forward(&b.z, PatchKind::Template)?;
        let x = model.backbone.forward(&b.x, PatchKind::Search)?;
        out.extend(bank_entries(&z, &x)?);
    }
    Ok(out)
}

/// The cluster models saved with a checkpoint.
pub fn load_clusterer(dir: &Path) -> Result<OnlineClusterer> {
    let state: TrainerState = read_json(&dir.join("trainer_state.json"))?;
    Ok(state.clusterer)
}

pub fn read_manifest(dir: &Path) -> Result<CheckpointManifest> {
    read_json(&dir.join("manifest.json"))
}

fn write_json<T: Serialize>(path: &Path, v: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(v)?;
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(serde_json::from_str(&text)?)
}

/// Plain supervised loop on source pairs, following the same batch schedule.
/// Kept separate from [`Trainer`] as the reference for the disabled-modules case.
pub fn train_baseline(cfg: &RunConfig, source: &[DomainSample], target: &[DomainSample]) -> Result<Vec<IterRecord>> {
    cfg.validate()?;
    let model = TrackerModel::new(&cfg.tracker, mix_seed(cfg.seed, "model"))?;
    let params = model.param_store()?;
    let mut opt = Adam::default();
    let it = BatchIterator::new(source, target, cfg.train.batch_size, mix_seed(cfg.seed, "batches"))?
        .with_max_steps(cfg.train.max_steps_per_epoch);
    let max_iter = it.steps_per_epoch() * cfg.train.epochs;
    let lambda = [cfg.tracker.lambda_cls, cfg.tracker.lambda_reg, cfg.tracker.lambda_cen];
    let mut log = Vec::new();
    let mut iter = 0;
    for epoch in 0..cfg.train.epochs {
        for (bs, _) in it.epoch(epoch) {
            let lr = poly_lr(cfg.train.lr_backbone, iter, max_iter, cfg.train.poly_power);
            let b = stack(&bs, cfg.tracker.in_channels)?;
            let (_, _, heads) = model.forward(&b.z, &b.x)?;
            let grid = model.grid(b.z.dim(2)?, b.x.dim(2)?);
            let gt: Vec<_> = bs.iter().map(|s| s.crop_box).collect();
            let loss = tracking_loss(&heads, &gt, &grid, lambda)?;
            let bundle = loss.bundle(lambda)?;
            ensure_finite("tracking", scalar_f64(&loss.total)?, iter, &b.ids)?;
            opt.step(&params, &loss.total.backward()?, lr)?;
            log.push(IterRecord {
                iter,
                epoch,
                lr_g: lr,
                lr_d: 0.0,
                cls: bundle.cls,
                reg: bundle.reg,
                cen: bundle.cen,
                adv_g: 0.0,
                adv_d: 0.0,
                sub: 0.0,
                c_selected: None,
                skipped_step2: false,
                adv_g_stages: Vec::new(),
                adv_d_stages: Vec::new(),
            });
            iter += 1;
        }
    }
    Ok(log)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn poly_fixtures() {
        assert_eq!(poly_lr(0.005, 0, 100, 0.8), 0.005);
        assert_eq!(poly_lr(0.005, 100, 100, 0.8), 0.0);
        assert_eq!(poly_lr(0.005, 150, 100, 0.8), 0.0);
        assert!((poly_lr(0.005, 50, 100, 0.8) - 0.005 * 0.5f64.powf(0.8)).abs() < 1e-15);
        assert!((poly_lr(0.005, 50, 100, 0.8) - 0.002872).abs() < 1e-6);
        let v: Vec<f64> = (0..=100).map(|i| poly_lr(1.0, i, 100, 0.8)).collect();
        assert!(v.windows(2).all(|w| w[1] < w[0]));
    }
}
