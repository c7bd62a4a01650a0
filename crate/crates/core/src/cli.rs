//! The `kws` command-line tool.
//!
//! Every subcommand writes its artifacts to explicit paths and a short
//! summary to stdout. Failures print one line to stderr,
//! `kws-error: <kind>: <message>`, and exit non-zero.

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use rayon::prelude::*;
use serde_json::json;
use sha2::{Digest, Sha256};

use crate::batching::ClassPool;
use crate::dataset::{
    build_inventory, filter_manifest_counted, read_manifest, split_of, write_jsonl, FilterConfig,
    ManifestEntry, SplitLists, Split, UNKNOWN_LABEL, USER_DEFINED,
};
use crate::embedder::{
    load_checkpoint, save_checkpoint, train_stage, Activation, Embedder, EmbedderConfig,
    LossChoice, Stage, Start, TrainSchedule,
};
use crate::enrollment::{enroll, load_store, save_store, EnrollMode, Prototype};
use crate::error::{Error, Result};
use crate::evaluation::{det_csv, evaluate, F1Mode};
use crate::features::{fix_length, MfccConfig, MfccExtractor, CLIP_SECONDS, PIPELINE_SAMPLE_RATE};
use crate::numcore::Matrix;
use crate::synthetic::synth_corpus;
use crate::wav::read_wav;

/// Diagnostic prefix for every error line.
pub const ERROR_PREFIX: &str = "kws-error";

#[derive(Debug, Parser)]
#[command(name = "kws", version, about = "User-defined keyword spotting toolkit")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Filter a manifest by CER and keyword rules, optionally sampling an inventory.
    BuildDataset(BuildDatasetArgs),
    /// Train or fine-tune an embedder and write a checkpoint.
    Train(TrainArgs),
    /// Enroll keywords from k samples each into a prototype store.
    Enroll(EnrollArgs),
    /// Score queries against a prototype store and write a report.
    Evaluate(EvaluateArgs),
    /// Write only the DET curve CSV for a query set.
    Det(DetArgs),
    /// Generate a synthetic tone corpus with a manifest.
    Synth(SynthArgs),
}

#[derive(Debug, Args)]
pub struct Common {
    /// Seed for every random choice.
    #[arg(long, env = "KWS_SEED", default_value_t = 0)]
    pub seed: u64,
    /// Worker threads for feature extraction.
    #[arg(long, default_value_t = 1)]
    pub threads: usize,
}

#[derive(Debug, Args)]
pub struct BuildDatasetArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    /// Filtered manifest (JSON Lines).
    #[arg(long)]
    pub out: PathBuf,
    /// Sampled inventory rows with CER and keyword rank.
    #[arg(long)]
    pub inventory_out: Option<PathBuf>,
    #[arg(long, default_value_t = 0.0)]
    pub cer_threshold: f64,
    #[arg(long, default_value_t = 13)]
    pub drop_top_frequent: usize,
    #[arg(long)]
    pub keep_single_letters: bool,
    /// Comma-separated keywords to exclude; defaults to the user-defined set.
    #[arg(long, value_delimiter = ',')]
    pub exclude: Option<Vec<String>>,
    #[arg(long, default_value_t = 1000)]
    pub inventory_size: usize,
    #[arg(long, default_value_t = 1000)]
    pub samples_per_keyword: usize,
    #[command(flatten)]
    pub common: Common,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum StageArg {
    Pretrain,
    Finetune,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum LossArg {
    Softmax,
    NormalizedSoftmax,
    AmSoftmax,
    Ap,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long, value_enum)]
    pub stage: StageArg,
    #[arg(long, value_enum)]
    pub loss: LossArg,
    /// Training manifest; audio paths resolve against `--audio-root`.
    #[arg(long)]
    pub manifest: PathBuf,
    /// Defaults to the manifest's directory.
    #[arg(long)]
    pub audio_root: Option<PathBuf>,
    /// Checkpoint to start from; required for fine-tuning.
    #[arg(long)]
    pub init: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    /// Per-epoch metrics (JSON Lines).
    #[arg(long)]
    pub log: Option<PathBuf>,
    #[arg(long, default_value_t = 10)]
    pub epochs: usize,
    /// Defaults to 256 for pre-training and 16 for fine-tuning.
    #[arg(long)]
    pub batch_size: Option<usize>,
    /// Defaults to 1e-3 for pre-training and 1e-5 for fine-tuning.
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long, default_value_t = 0.95)]
    pub decay: f64,
    #[arg(long, default_value_t = 0.2)]
    pub margin: f64,
    #[arg(long, default_value_t = 30.0)]
    pub scale: f64,
    /// Items per class in each prototypical episode.
    #[arg(long, default_value_t = 4)]
    pub per_class: usize,
    /// Hidden layer sizes for a fresh embedder.
    #[arg(long, value_delimiter = ',')]
    pub hidden: Option<Vec<usize>>,
    #[arg(long)]
    pub embedding_dim: Option<usize>,
    /// Train on every frame instead of the frame average.
    #[arg(long)]
    pub no_pool: bool,
    /// Map the unknown-split keywords onto one `unknown` class.
    #[arg(long)]
    pub merge_unknown: bool,
    #[command(flatten)]
    pub common: Common,
}

#[derive(Debug, Args)]
pub struct EnrollArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long)]
    pub audio_root: Option<PathBuf>,
    /// Samples per keyword, taken in manifest order.
    #[arg(long)]
    pub shots: usize,
    /// Keywords that must be enrolled; defaults to all in the manifest.
    #[arg(long, value_delimiter = ',')]
    pub keywords: Option<Vec<String>>,
    /// Average unit-normalized embeddings instead of raw ones.
    #[arg(long)]
    pub normalize: bool,
    #[arg(long)]
    pub out: PathBuf,
    /// Also write the store as JSON.
    #[arg(long)]
    pub json_out: Option<PathBuf>,
    #[command(flatten)]
    pub common: Common,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum F1Arg {
    Macro,
    BinaryAtEer,
}

#[derive(Debug, Args)]
pub struct QueryArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub store: PathBuf,
    /// Query manifest; every keyword needs a prototype.
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long)]
    pub audio_root: Option<PathBuf>,
    /// Skip this many entries per keyword (e.g. the enrollment samples).
    #[arg(long, default_value_t = 0)]
    pub skip_first: usize,
    /// Out-of-vocabulary queries added as non-target trials.
    #[arg(long)]
    pub impostors: Option<PathBuf>,
    #[command(flatten)]
    pub common: Common,
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    #[command(flatten)]
    pub query: QueryArgs,
    #[arg(long, value_enum, default_value = "macro")]
    pub f1: F1Arg,
    #[arg(long)]
    pub report: PathBuf,
    #[arg(long)]
    pub det: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct DetArgs {
    #[command(flatten)]
    pub query: QueryArgs,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, value_delimiter = ',', required = true)]
    pub keywords: Vec<String>,
    #[arg(long, default_value_t = 10)]
    pub per_keyword: usize,
    /// Corrupt the hypothesis of every n-th entry; 0 disables.
    #[arg(long, default_value_t = 0)]
    pub corrupt_every: usize,
    #[command(flatten)]
    pub common: Common,
}

/// Parses `args` (including the program name), runs the command and
/// returns the process exit code.
pub fn run_from<I, T>(args: I, stdout: &mut dyn Write, stderr: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                let _ = write!(stdout, "{e}");
                return 0;
            }
            let text = e.to_string();
            let first = text.lines().next().unwrap_or("").trim_start_matches("error: ");
            let _ = writeln!(stderr, "{ERROR_PREFIX}: usage: {first}");
            return 2;
        }
    };
    match run(cli, stdout) {
        Ok(()) => 0,
        Err(e) => {
            let msg = e.to_string().replace('\n', " ");
            let _ = writeln!(stderr, "{ERROR_PREFIX}: {}: {msg}", e.kind());
            if matches!(e, Error::Usage(_)) {
                2
            } else {
                1
            }
        }
    }
}

pub fn run(cli: Cli, out: &mut dyn Write) -> Result<()> {
    match cli.command {
        Command::BuildDataset(a) => cmd_build_dataset(&a, out),
        Command::Train(a) => cmd_train(&a, out),
        Command::Enroll(a) => cmd_enroll(&a, out),
        Command::Evaluate(a) => cmd_evaluate(&a, out),
        Command::Det(a) => cmd_det(&a, out),
        Command::Synth(a) => cmd_synth(&a, out),
    }
}

fn say(out: &mut dyn Write, line: impl AsRef<str>) -> Result<()> {
    writeln!(out, "{}", line.as_ref()).map_err(|e| Error::io("<stdout>", e))
}

fn write_file(path: &Path, bytes: impl AsRef<[u8]>) -> Result<()> {
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

fn require_file(path: &Path) -> Result<()> {
    if !path.is_file() {
        return Err(Error::io(
            path,
            std::io::Error::new(std::io::ErrorKind::NotFound, "no such file"),
        ));
    }
    Ok(())
}

pub fn cmd_build_dataset(a: &BuildDatasetArgs, out: &mut dyn Write) -> Result<()> {
    require_file(&a.manifest)?;
    let cfg = FilterConfig {
        cer_threshold: a.cer_threshold,
        drop_top_frequent: a.drop_top_frequent,
        drop_single_letter: !a.keep_single_letters,
        excluded_keywords: match &a.exclude {
            Some(list) => list.iter().filter(|k| !k.is_empty()).cloned().collect(),
            None => USER_DEFINED.iter().map(|s| s.to_string()).collect(),
        },
        inventory_size: a.inventory_size,
        samples_per_keyword: a.samples_per_keyword,
        seed: a.common.seed,
    };
    cfg.validate()?;
    let entries = read_manifest(&a.manifest)?;
    let (kept, stats) = filter_manifest_counted(&entries, &cfg);
    write_jsonl(&a.out, &kept)?;
    say(out, format!("input {}", stats.input))?;
    say(out, format!("dropped cer {}", stats.cer))?;
    say(out, format!("dropped top-frequent {}", stats.top_frequent))?;
    say(out, format!("dropped single-letter {}", stats.single_letter))?;
    say(out, format!("dropped excluded {}", stats.excluded))?;
    say(out, format!("retained {}", stats.retained))?;
    if let Some(path) = &a.inventory_out {
        let inventory = build_inventory(&kept, &cfg)?;
        write_jsonl(path, &inventory.rows())?;
        say(
            out,
            format!("inventory {} keywords {} entries", inventory.classes.len(), inventory.len()),
        )?;
    }
    Ok(())
}

fn audio_root(manifest: &Path, root: &Option<PathBuf>) -> PathBuf {
    root.clone().unwrap_or_else(|| {
        manifest
            .parent()
            .map(Path::to_path_buf)
            .unwrap_or_else(|| PathBuf::from("."))
    })
}

/// MFCC matrices for `entries`, in order.
fn load_features(entries: &[ManifestEntry], root: &Path, threads: usize) -> Result<Vec<Matrix<f64>>> {
    let extractor = MfccExtractor::new(MfccConfig::default(), PIPELINE_SAMPLE_RATE)?;
    let one = |e: &ManifestEntry| -> Result<Matrix<f64>> {
        let p = Path::new(&e.audio_path);
        let path = if p.is_absolute() { p.to_path_buf() } else { root.join(p) };
        let clip = read_wav(&path)?;
        extractor.extract(&fix_length(&clip, CLIP_SECONDS))
    };
    if threads <= 1 {
        return entries.iter().map(one).collect();
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .map_err(|e| Error::InvalidArgument(format!("thread pool: {e}")))?;
    pool.install(|| entries.par_iter().map(one).collect())
}

fn input_shape() -> Result<(usize, usize)> {
    let cfg = MfccConfig::default();
    let frames = cfg
        .frame_count((CLIP_SECONDS * PIPELINE_SAMPLE_RATE as f64).round() as usize, PIPELINE_SAMPLE_RATE)
        .ok_or(Error::InvalidArgument("clip shorter than one window".into()))?;
    Ok((frames, cfg.n_coeffs))
}

pub fn cmd_train(a: &TrainArgs, out: &mut dyn Write) -> Result<()> {
    if a.stage == StageArg::Finetune && a.init.is_none() {
        return Err(Error::Usage("--stage finetune requires --init <checkpoint>".into()));
    }
    require_file(&a.manifest)?;
    let stage = match a.stage {
        StageArg::Pretrain => Stage::Pretrain,
        StageArg::Finetune => Stage::Finetune,
    };
    let mut schedule = match stage {
        Stage::Pretrain => TrainSchedule::pretrain(a.epochs, a.common.seed),
        Stage::Finetune => TrainSchedule::finetune(a.epochs, a.common.seed),
    };
    if let Some(b) = a.batch_size {
        schedule.batch_size = b;
    }
    if let Some(lr) = a.lr {
        schedule.initial_lr = lr;
    }
    schedule.decay = a.decay;
    schedule.validate()?;
    let loss = match a.loss {
        LossArg::Softmax => LossChoice::Softmax,
        LossArg::NormalizedSoftmax => LossChoice::NormalizedSoftmax,
        LossArg::AmSoftmax => LossChoice::AmSoftmax {
            margin: a.margin,
            scale: a.scale,
        },
        LossArg::Ap => LossChoice::AngularPrototypical {
            per_class: a.per_class,
        },
    };

    let start = match &a.init {
        Some(path) => {
            let e: Embedder<f64> = load_checkpoint(path)?;
            let c = e.config();
            let clash = a.hidden.as_ref().is_some_and(|h| *h != c.hidden_sizes)
                || a.embedding_dim.is_some_and(|d| d != c.embedding_dim)
                || (a.no_pool && c.mean_pool);
            if clash {
                return Err(Error::IncompatibleCheckpoint(format!(
                    "{} was trained with hidden {:?}, embedding_dim {}, mean_pool {}",
                    path.display(),
                    c.hidden_sizes,
                    c.embedding_dim,
                    c.mean_pool
                )));
            }
            Start::From(e)
        }
        None => {
            let (frames, coeffs) = input_shape()?;
            let d = EmbedderConfig::default();
            Start::Fresh(EmbedderConfig {
                frames,
                coeffs,
                mean_pool: !a.no_pool,
                hidden_sizes: a.hidden.clone().unwrap_or(d.hidden_sizes),
                embedding_dim: a.embedding_dim.unwrap_or(d.embedding_dim),
                activation: Activation::Relu,
                seed: a.common.seed,
            })
        }
    };

    let entries = read_manifest(&a.manifest)?;
    let features = load_features(&entries, &audio_root(&a.manifest, &a.audio_root), a.common.threads)?;
    let lists = SplitLists::default();
    let mut pool: ClassPool<Matrix<f64>> = BTreeMap::new();
    for (e, x) in entries.iter().zip(features) {
        let label = if a.merge_unknown && split_of(&e.keyword, &lists) == Some(Split::Unknown) {
            UNKNOWN_LABEL.to_string()
        } else {
            e.keyword.clone()
        };
        pool.entry(label).or_default().push(x);
    }

    let outcome = train_stage(&pool, &loss, &schedule, start)?;
    save_checkpoint(&a.out, &outcome.embedder)?;
    if let Some(path) = &a.log {
        write_jsonl(path, &outcome.log)?;
    }
    for l in &outcome.log {
        say(
            out,
            format!(
                "epoch {} lr {} loss {} batches {}",
                l.epoch, l.learning_rate, l.mean_loss, l.batches
            ),
        )?;
    }
    say(out, format!("classes {} items {}", pool.len(), entries.len()))?;
    say(out, format!("checkpoint {}", outcome.embedder.checksum()))
}

/// First `take` entries per keyword after skipping `skip`, in manifest order.
fn per_keyword(entries: &[ManifestEntry], skip: usize, take: Option<usize>) -> Vec<ManifestEntry> {
    let mut seen: BTreeMap<&str, usize> = BTreeMap::new();
    entries
        .iter()
        .filter(|e| {
            let n = seen.entry(e.keyword.as_str()).or_default();
            *n += 1;
            *n > skip && take.is_none_or(|t| *n <= skip + t)
        })
        .cloned()
        .collect()
}

pub fn cmd_enroll(a: &EnrollArgs, out: &mut dyn Write) -> Result<()> {
    require_file(&a.checkpoint)?;
    require_file(&a.manifest)?;
    if a.shots == 0 {
        return Err(Error::InvalidArgument("--shots must be at least 1".into()));
    }
    let embedder: Embedder<f64> = load_checkpoint(&a.checkpoint)?;
    let before = embedder.checksum();

    let entries = read_manifest(&a.manifest)?;
    let chosen = per_keyword(&entries, 0, Some(a.shots));
    let mut counts: BTreeMap<&str, usize> = BTreeMap::new();
    for e in &chosen {
        *counts.entry(e.keyword.as_str()).or_default() += 1;
    }
    let wanted: Vec<String> = match &a.keywords {
        Some(k) => k.clone(),
        None => counts.keys().map(|s| s.to_string()).collect(),
    };
    for k in &wanted {
        let have = counts.get(k.as_str()).copied().unwrap_or(0);
        if have < a.shots {
            return Err(Error::InsufficientData(format!(
                "keyword {k:?} has {have} enrollment samples, needs {}",
                a.shots
            )));
        }
    }
    let chosen: Vec<ManifestEntry> =
        chosen.into_iter().filter(|e| wanted.contains(&e.keyword)).collect();
    let features = load_features(&chosen, &audio_root(&a.manifest, &a.audio_root), a.common.threads)?;
    let mut samples: BTreeMap<String, Vec<Vec<f64>>> = BTreeMap::new();
    for (e, x) in chosen.iter().zip(&features) {
        samples.entry(e.keyword.clone()).or_default().push(embedder.embed(x)?);
    }
    let mode = if a.normalize {
        EnrollMode::NormalizeThenAverage
    } else {
        EnrollMode::Mean
    };
    let prototypes = enroll(&samples, mode)?;
    save_store(&a.out, &prototypes)?;
    if let Some(path) = &a.json_out {
        write_file(path, crate::enrollment::store_to_json(&prototypes)? + "\n")?;
    }

    let after = embedder.checksum();
    if after != before {
        return Err(Error::InvalidArgument("enrollment modified model parameters".into()));
    }
    say(out, format!("enrolled {} keywords with {} shots", prototypes.len(), a.shots))?;
    say(out, format!("parameters before {before}"))?;
    say(out, format!("parameters after {after}"))
}

struct Scored {
    queries: Vec<(String, Vec<f64>)>,
    impostors: Option<Vec<Vec<f64>>>,
    prototypes: Vec<Prototype<f64>>,
    checkpoint_sha256: String,
    store_sha256: String,
}

fn embed_queries(q: &QueryArgs) -> Result<Scored> {
    require_file(&q.checkpoint)?;
    require_file(&q.store)?;
    require_file(&q.manifest)?;
    let ckpt_bytes = fs::read(&q.checkpoint).map_err(|e| Error::io(&q.checkpoint, e))?;
    let store_bytes = fs::read(&q.store).map_err(|e| Error::io(&q.store, e))?;
    let embedder: Embedder<f64> = crate::embedder::read_checkpoint(&ckpt_bytes)?;
    let prototypes: Vec<Prototype<f64>> = load_store(&q.store)?;
    if let Some(p) = prototypes.first() {
        if p.vector.len() != embedder.embedding_dim() {
            return Err(Error::DimensionMismatch {
                expected: embedder.embedding_dim(),
                actual: p.vector.len(),
            });
        }
    }

    let entries = per_keyword(&read_manifest(&q.manifest)?, q.skip_first, None);
    let root = audio_root(&q.manifest, &q.audio_root);
    let feats = load_features(&entries, &root, q.common.threads)?;
    let queries = entries
        .iter()
        .zip(&feats)
        .map(|(e, x)| Ok((e.keyword.clone(), embedder.embed(x)?)))
        .collect::<Result<Vec<_>>>()?;
    let impostors = match &q.impostors {
        Some(path) => {
            require_file(path)?;
            let entries = read_manifest(path)?;
            let feats = load_features(&entries, &audio_root(path, &q.audio_root), q.common.threads)?;
            Some(feats.iter().map(|x| embedder.embed(x)).collect::<Result<Vec<_>>>()?)
        }
        None => None,
    };
    Ok(Scored {
        queries,
        impostors,
        prototypes,
        checkpoint_sha256: sha256_hex(&ckpt_bytes),
        store_sha256: sha256_hex(&store_bytes),
    })
}

pub fn cmd_evaluate(a: &EvaluateArgs, out: &mut dyn Write) -> Result<()> {
    let s = embed_queries(&a.query)?;
    let f1_mode = match a.f1 {
        F1Arg::Macro => F1Mode::Macro,
        F1Arg::BinaryAtEer => F1Mode::BinaryAtEer,
    };
    let (report, curve) = evaluate(&s.queries, &s.prototypes, s.impostors.as_deref(), f1_mode)?;
    let doc = json!({
        "metrics": report,
        "config": {
            "checkpoint_sha256": s.checkpoint_sha256,
            "store_sha256": s.store_sha256,
            "keywords": s.prototypes.iter().map(|p| p.keyword.as_str()).collect::<Vec<_>>(),
            "shots": s.prototypes.iter().map(|p| p.shots).collect::<Vec<_>>(),
            "skip_first": a.query.skip_first,
            "impostors": s.impostors.as_ref().map_or(0, Vec::len),
            "f1_mode": f1_mode,
        },
        "seed": a.query.common.seed,
    });
    write_file(&a.report, serde_json::to_string_pretty(&doc)? + "\n")?;
    if let Some(path) = &a.det {
        write_file(path, det_csv(&curve))?;
    }
    say(out, format!("eer {}", report.eer))?;
    for (level, frr) in &report.frr_at_far {
        say(out, format!("frr@far={level} {frr}"))?;
    }
    say(out, format!("f1 {}", report.f1))?;
    say(out, format!("accuracy {}", report.accuracy))?;
    say(
        out,
        format!(
            "trials target {} non-target {}",
            report.n_target_trials, report.n_nontarget_trials
        ),
    )
}

pub fn cmd_det(a: &DetArgs, out: &mut dyn Write) -> Result<()> {
    let s = embed_queries(&a.query)?;
    let (_, curve) = evaluate(&s.queries, &s.prototypes, s.impostors.as_deref(), F1Mode::Macro)?;
    write_file(&a.out, det_csv(&curve))?;
    say(out, format!("det points {}", curve.points.len()))
}

pub fn cmd_synth(a: &SynthArgs, out: &mut dyn Write) -> Result<()> {
    let entries = synth_corpus(&a.out, &a.keywords, a.per_keyword, a.corrupt_every, a.common.seed)?;
    say(out, format!("wrote {} clips", entries.len()))
}
