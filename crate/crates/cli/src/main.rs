//! `pdat`: preprocess, train, evaluate and inspect progressive domain
//! adaptation runs.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use pdat::config::RunConfig;
use pdat::csda::ClusterSearch;
use pdat::data::{load_dataset, load_pair_store, mix_seed, write_pair_store, write_sequence, Domain, DomainSample};
use pdat::eval::{read_report, write_report, MetricReport};
use pdat::synthetic::{synth_corpus, SynthConfig};
use pdat::trainer::{latest_checkpoint, load_clusterer, load_tracker, sample_entries, Trainer};
use pdat::{pipeline, Error};

#[derive(Parser)]
#[command(name = "pdat", version, about = "Progressive domain adaptation for TIR tracking")]
struct Cli {
    #[command(flatten)]
    global: Global,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Global {
    /// Config file of dotted `key = value` lines.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override a config key, e.g. `--set train.epochs=2`.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    overrides: Vec<String>,
    /// Turn off adaptation modules.
    #[arg(long, value_delimiter = ',', global = true)]
    disable: Vec<Module>,
    /// Single-threaded, reproducible execution.
    #[arg(long, global = true)]
    deterministic: bool,
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    verbose: u8,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Module {
    Agda,
    Csda,
}

#[derive(Subcommand)]
enum Command {
    /// Generate pseudo-labeled target pairs from unlabeled sequences.
    Preprocess {
        /// Unlabeled sequences; defaults to `data.target_root`.
        #[arg(long)]
        target_root: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train, checkpointing every epoch.
    Train {
        /// Run directory; defaults to `train.out_dir`.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Continue from the latest checkpoint in the run directory.
        #[arg(long)]
        resume: bool,
    },
    /// One-pass evaluation of a checkpoint.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Sequences with ground truth; defaults to `eval.dataset_root`.
        #[arg(long)]
        dataset: Option<PathBuf>,
        /// Report directory; defaults to `eval.out_dir`.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Skip the domain-gap probe.
        #[arg(long)]
        no_probe: bool,
    },
    /// Write per-sample descriptors and voted labels as CSV.
    ExportEmbeddings {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Merge report files into one comparison table.
    Report {
        /// `report.json` files or directories holding one.
        #[arg(required = true)]
        reports: Vec<PathBuf>,
        /// Also write the table here.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Render the synthetic two-domain corpus as datasets.
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 6)]
        sequences: usize,
        #[arg(long, default_value_t = 30)]
        frames: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if cli.global.deterministic {
        std::env::set_var("RAYON_NUM_THREADS", "1");
    }
    let level = match cli.global.verbose {
        0 => "info",
        1 => "debug",
        _ => "trace",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

fn resolve(g: &Global) -> pdat::Result<RunConfig> {
    let mut cfg = RunConfig::resolve(g.config.as_deref(), &g.overrides)?;
    if g.disable.contains(&Module::Agda) {
        cfg.agda.enabled = false;
    }
    if g.disable.contains(&Module::Csda) {
        cfg.csda.enabled = false;
    }
    cfg.deterministic |= g.deterministic;
    Ok(cfg)
}

fn required(path: &str, key: &str) -> pdat::Result<PathBuf> {
    if path.is_empty() {
        return Err(Error::Config(format!("`{key}` is not set")));
    }
    Ok(PathBuf::from(path))
}

fn run(cli: Cli) -> pdat::Result<()> {
    let cfg = resolve(&cli.global)?;
    match cli.command {
        Command::Preprocess { target_root, out } => preprocess(&cfg, target_root, &out),
        Command::Train { out, resume } => train(&cfg, out, resume),
        Command::Eval { checkpoint, dataset, out, no_probe } => eval(&cfg, &checkpoint, dataset, out, no_probe),
        Command::ExportEmbeddings { checkpoint, out } => export(&cfg, &checkpoint, &out),
        Command::Report { reports, out } => report(&reports, out.as_deref()),
        Command::Synth { out, sequences, frames, seed } => synth(&out, sequences, frames, seed),
    }
}

fn preprocess(cfg: &RunConfig, root: Option<PathBuf>, out: &Path) -> pdat::Result<()> {
    let root = match root {
        Some(r) => r,
        None => required(&cfg.data.target_root, "data.target_root")?,
    };
    let seqs = load_dataset(&root, Domain::Target)?;
    let (samples, records, manifest) = pipeline::target_pairs(cfg, &seqs, Some(&root))?;
    write_pair_store(out, &samples, &records, &manifest)?;
    log::info!(
        "{} pairs from {} frames of {} sequences -> {}",
        manifest.pairs,
        manifest.frames_scanned,
        seqs.len(),
        out.display()
    );
    Ok(())
}

fn target_samples(cfg: &RunConfig) -> pdat::Result<Vec<DomainSample>> {
    if !cfg.data.target_pairs.is_empty() {
        return load_pair_store(Path::new(&cfg.data.target_pairs));
    }
    let root = required(&cfg.data.target_root, "data.target_root")?;
    let seqs = load_dataset(&root, Domain::Target)?;
    Ok(pipeline::target_pairs(cfg, &seqs, Some(&root))?.0)
}

fn source_samples(cfg: &RunConfig) -> pdat::Result<Vec<DomainSample>> {
    let root = required(&cfg.data.source_root, "data.source_root")?;
    pipeline::source_pairs(cfg, &load_dataset(&root, Domain::Source)?)
}

fn train(cfg: &RunConfig, out: Option<PathBuf>, resume: bool) -> pdat::Result<()> {
    let out = out.unwrap_or_else(|| PathBuf::from(&cfg.train.out_dir));
    let source = source_samples(cfg)?;
    let target = target_samples(cfg)?;
    log::info!("{} source pairs, {} target pairs", source.len(), target.len());
    let mut trainer = match latest_checkpoint(&out).filter(|_| resume) {
        Some(ck) => {
            log::info!("resuming from {}", ck.display());
            Trainer::resume(cfg.clone(), &ck)?
        }
        None => Trainer::new(cfg.clone())?,
    };
    trainer.run(&source, &target, Some(&out))?;
    log::info!("finished after {} iterations; checkpoints in {}", trainer.iter, out.join("checkpoints").display());
    Ok(())
}

fn eval(cfg: &RunConfig, ck: &Path, dataset: Option<PathBuf>, out: Option<PathBuf>, no_probe: bool) -> pdat::Result<()> {
    let model = load_tracker(cfg, ck)?;
    let root = match dataset {
        Some(d) => d,
        None => required(&cfg.eval.dataset_root, "eval.dataset_root")?,
    };
    let seqs = load_dataset(&root, Domain::Target)?;
    let probe = if no_probe { None } else { Some((source_samples(cfg)?, target_samples(cfg)?)) };
    let rep = pipeline::evaluate(cfg, &model, &seqs, probe.as_ref().map(|(s, t)| (s.as_slice(), t.as_slice())))?;
    let out = out.unwrap_or_else(|| PathBuf::from(&cfg.eval.out_dir));
    write_report(&out, &rep)?;
    let a = &rep.aggregate;
    println!(
        "sequences {}  success {:.4}  precision@20 {:.4}  norm-precision {:.4}",
        a.sequences, a.success_auc, a.precision_20, a.norm_precision_auc
    );
    if let Some(g) = rep.domain_gap {
        println!("domain gap: mmd2 {:.5}  probe accuracy {:.3}", g.mmd2, g.linear_probe_acc);
    }
    Ok(())
}

#[derive(serde::Serialize, serde::Deserialize)]
struct CachedRows {
    rows: Vec<(String, String, usize, Vec<f32>)>,
}

fn export(cfg: &RunConfig, ck: &Path, out: &Path) -> pdat::Result<()> {
    let model = load_tracker(cfg, ck)?;
    let key = format!("{:016x}-{}", model.content_hash()?, cfg.hash());
    let cache = std::env::var_os("PDAT_CACHE").map(|d| PathBuf::from(d).join(format!("embeddings-{key}.json")));
    let rows = match cache.as_ref().filter(|p| p.is_file()) {
        Some(p) => {
            log::info!("descriptor cache hit: {}", p.display());
            let text = fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
            serde_json::from_str::<CachedRows>(&text)?.rows
        }
        None => {
            let rows = embedding_rows(cfg, &model, ck)?;
            if let Some(p) = &cache {
                if let Some(dir) = p.parent() {
                    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
                }
                let text = serde_json::to_string(&CachedRows { rows: rows.clone() })?;
                fs::write(p, text).map_err(|e| Error::io(p, e))?;
            }
            rows
        }
    };
    let dim = rows.first().map_or(0, |r| r.3.len());
    let mut csv = String::from("sample_id,domain,voted_label");
    for i in 0..dim {
        let _ = write!(csv, ",d{i}");
    }
    csv.push('\n');
    for (id, domain, label, d) in &rows {
        let _ = write!(csv, "{id},{domain},{label}");
        for v in d {
            let _ = write!(csv, ",{v}");
        }
        csv.push('\n');
    }
    if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(out, csv).map_err(|e| Error::io(out, e))?;
    log::info!("{} rows of {dim} values -> {}", rows.len(), out.display());
    Ok(())
}

fn embedding_rows(
    cfg: &RunConfig,
    model: &pdat::tracker::TrackerModel,
    ck: &Path,
) -> pdat::Result<Vec<(String, String, usize, Vec<f32>)>> {
    let source = source_samples(cfg)?;
    let target = target_samples(cfg)?;
    let es = sample_entries(model, &source)?;
    let et = sample_entries(model, &target)?;
    // checkpoints of runs without subdomain adaptation carry no cluster models
    let mut clusterer = load_clusterer(ck).ok().filter(|c| c.is_fitted()).unwrap_or_else(|| {
        pdat::csda::OnlineClusterer::new(es.len() + et.len(), cfg.csda.stage)
    });
    if !clusterer.is_fitted() {
        for e in &es {
            clusterer.push(Domain::Source, e.clone());
        }
        for e in &et {
            clusterer.push(Domain::Target, e.clone());
        }
        let c = &cfg.csda;
        let search = ClusterSearch { min: c.cluster_min, max: c.cluster_max, iters: c.kmeans_iters, restarts: c.kmeans_restarts };
        clusterer.refit(&search, mix_seed(cfg.seed, "export"));
    }
    let stage = cfg.csda.stage - 1;
    let mut rows = Vec::new();
    for (samples, entries) in [(&source, &es), (&target, &et)] {
        for (s, e) in samples.iter().zip(entries.iter()) {
            let label = clusterer.label(e, &cfg.csda.vote_weights).unwrap_or(0);
            rows.push((s.id.clone(), s.domain.as_str().to_string(), label, e.stages[stage].clone()));
        }
    }
    Ok(rows)
}

fn report(paths: &[PathBuf], out: Option<&Path>) -> pdat::Result<()> {
    let mut reports: BTreeMap<String, MetricReport> = BTreeMap::new();
    for p in paths {
        let file = if p.is_dir() { p.join("report.json") } else { p.clone() };
        let name = file
            .parent()
            .and_then(|d| d.file_name())
            .map_or_else(|| file.display().to_string(), |n| n.to_string_lossy().into_owned());
        let mut key = name.clone();
        let mut n = 1;
        while reports.contains_key(&key) {
            n += 1;
            key = format!("{name}#{n}");
        }
        reports.insert(key, read_report(&file)?);
    }
    let mut table = String::from("| run | sequences | success AUC | precision@20 | norm. precision | MMD² | probe acc. |\n");
    table.push_str("|---|---|---|---|---|---|---|\n");
    for (name, r) in &reports {
        let a = &r.aggregate;
        let (m, p) = r
            .domain_gap
            .map_or(("-".to_string(), "-".to_string()), |g| (format!("{:.5}", g.mmd2), format!("{:.3}", g.linear_probe_acc)));
        let _ = writeln!(
            table,
            "| {name} | {} | {:.4} | {:.4} | {:.4} | {m} | {p} |",
            a.sequences, a.success_auc, a.precision_20, a.norm_precision_auc
        );
    }
    print!("{table}");
    if let Some(o) = out {
        fs::write(o, &table).map_err(|e| Error::io(o, e))?;
    }
    Ok(())
}

fn synth(out: &Path, sequences: usize, frames: usize, seed: u64) -> pdat::Result<()> {
    let sc = SynthConfig { sequences, frames, ..Default::default() };
    for domain in [Domain::Source, Domain::Target] {
        let root = out.join(domain.as_str());
        for seq in synth_corpus(&sc, domain, mix_seed(seed, domain.as_str()))? {
            write_sequence(&root, &seq)?;
        }
        log::info!("{} {} sequences -> {}", sequences, domain.as_str(), root.display());
    }
    Ok(())
}
