//! `mmexpr` subcommands.

use std::collections::BTreeMap;
use std::ops::ControlFlow;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};
use mmexpr_tensor::ParamStore;
use serde::{Deserialize, Serialize};

use crate::data::{
    feature_layout, load_split, load_tracks, load_video_labels, FeatureBlock, LabelTrack, Manifest, VideoEntry,
};
use crate::ensemble::{load_prediction_dir, vote_dirs, EnsembleSpec, PredictionTrack};
use crate::evaluation::{confusion_valid, macro_f1, ConfusionMatrix, MetricReport};
use crate::io::{create_dir, read_json, write_atomic, write_json};
use crate::models::{EncoderKind, Model, ModelConfig};
use crate::training::{synth_dataset, train, SynthConfig, TrainConfig};
use crate::Error;

pub const CONFIG_FILE: &str = "config.json";
pub const RUN_FILE: &str = "run.json";
pub const REPORT_FILE: &str = "report.json";
pub const COVERAGE_FILE: &str = "coverage.json";
pub const MANIFEST_FILE: &str = "manifest.json";

/// How logits of frames covered by several segments are combined.
pub const OVERLAP_MERGE: &str = "mean_logits_before_softmax";

#[derive(Debug, Parser)]
#[command(name = "mmexpr", version, about = "Multimodal per-frame expression classification")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Validate a dataset, impute missing feature frames and write a repaired copy.
    Prepare(PrepareArgs),
    /// Generate the seeded class-conditional Gaussian dataset.
    Synth(SynthArgs),
    /// Train a model and keep the best checkpoint by validation macro F1.
    Train(TrainArgs),
    /// Write one prediction CSV per video of a split.
    Predict(PredictArgs),
    /// Score prediction CSVs against labels.
    Evaluate(EvaluateArgs),
    /// Fuse prediction directories by vote.
    Ensemble(EnsembleArgs),
}

#[derive(Debug, Args)]
pub struct PrepareArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long)]
    pub out: PathBuf,
    /// JSON synth parameters; flags below override it.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub sigma: Option<f64>,
    #[arg(long)]
    pub videos: Option<usize>,
    #[arg(long)]
    pub frames: Option<usize>,
    #[arg(long)]
    pub val_videos: Option<usize>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub manifest: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long, value_parser = parse_encoder)]
    pub encoder: Option<EncoderKind>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub alpha: Option<f64>,
}

#[derive(Debug, Args)]
pub struct PredictArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Resolved training config; defaults to `config.json` beside the checkpoint.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long, default_value = "val")]
    pub split: String,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    #[arg(long)]
    pub predictions: PathBuf,
    /// Labels come from this manifest's split ...
    #[arg(long, conflicts_with = "labels")]
    pub manifest: Option<PathBuf>,
    #[arg(long, default_value = "val")]
    pub split: String,
    /// ... or from `<video>.csv` label files in this directory.
    #[arg(long)]
    pub labels: Option<PathBuf>,
    /// Report path; defaults to `report.json` in the predictions directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct EnsembleArgs {
    /// Ensemble spec JSON; member paths are relative to its directory.
    #[arg(long)]
    pub config: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Also score members and the fused tracks on this manifest's split.
    #[arg(long)]
    pub manifest: Option<PathBuf>,
    #[arg(long, default_value = "val")]
    pub split: String,
}

fn parse_encoder(s: &str) -> std::result::Result<EncoderKind, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

/// Everything `train` needs; written back resolved into the output directory.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub manifest: Option<PathBuf>,
    pub model: ModelConfig,
    pub visual: Vec<String>,
    pub audio: Vec<String>,
    pub train: TrainConfig,
    pub out: Option<PathBuf>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            manifest: None,
            model: ModelConfig::default(),
            visual: vec!["densenet".into(), "mae".into(), "ires100".into()],
            audio: vec!["ecapatdnn".into(), "hubert".into()],
            train: TrainConfig::default(),
            out: None,
        }
    }
}

/// Provenance record of a training run.
#[derive(Clone, Debug, Serialize)]
pub struct RunRecord {
    pub input_dim: usize,
    pub feature_layout: Vec<FeatureBlock>,
    pub overlap_merge: &'static str,
    pub parameters: usize,
    pub train_videos: usize,
    pub scored_split: &'static str,
    pub best_epoch: usize,
    pub best_val_macro_f1: f64,
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Prepare(a) => prepare(&a),
        Command::Synth(a) => synth(&a),
        Command::Train(a) => train_cmd(&a),
        Command::Predict(a) => predict(&a),
        Command::Evaluate(a) => evaluate(&a),
        Command::Ensemble(a) => ensemble(&a),
    }
}

/// Process exit code for an error: 1 usage, 2 data validation, 3 numeric.
pub fn exit_code(err: &anyhow::Error) -> i32 {
    err.chain()
        .find_map(|e| e.downcast_ref::<Error>())
        .map_or(2, Error::exit_code)
}

#[derive(Serialize)]
struct FillRecord<'a> {
    feature_set: &'a str,
    frame: usize,
    donor: usize,
}

#[derive(Serialize)]
struct VideoCoverage<'a> {
    video_id: &'a str,
    n_frames: usize,
    frames_imputed: usize,
    fills: Vec<FillRecord<'a>>,
}

fn prepare(a: &PrepareArgs) -> Result<()> {
    let manifest = Manifest::load(&a.manifest).context("loading manifest")?;
    let registry = manifest.registry()?;
    create_dir(&a.out)?;
    let mut problems = Vec::new();
    let mut repaired_entries = Vec::new();
    let mut repairs_all = Vec::new();
    for entry in &manifest.videos {
        let names: Vec<String> = entry.features.keys().cloned().collect();
        let tracks = load_tracks(&manifest, entry, &names, &registry);
        let labels = load_video_labels(&manifest, entry);
        match (tracks, labels) {
            (Ok((tracks, repairs)), Ok(labels)) => {
                let mut features = BTreeMap::new();
                for track in &tracks {
                    let rel = format!("features/{}.{}.mmft", entry.id, track.feature_set);
                    track.save(&a.out.join(&rel))?;
                    features.insert(track.feature_set.clone(), rel);
                }
                let label_file = format!("labels/{}.csv", entry.id);
                let mut csv = Vec::new();
                labels.write_csv(&mut csv)?;
                write_atomic(&a.out.join(&label_file), &csv)?;
                repaired_entries.push(VideoEntry {
                    id: entry.id.clone(),
                    n_frames: entry.n_frames,
                    label_file,
                    features,
                });
                repairs_all.push(repairs);
            }
            (tracks, labels) => {
                for e in [tracks.err(), labels.err()].into_iter().flatten() {
                    eprintln!("error: video {}: {e}", entry.id);
                    problems.push(format!("video {}: {e}", entry.id));
                }
            }
        }
    }
    if !problems.is_empty() {
        return Err(Error::validation(format!(
            "{} problem(s) found:\n{}",
            problems.len(),
            problems.join("\n")
        ))
        .into());
    }

    let mut repaired = Manifest::new(repaired_entries, manifest.splits.clone(), &a.out);
    repaired.feature_sets = manifest.feature_sets.clone();
    repaired.save(&a.out.join(MANIFEST_FILE))?;

    let total: usize = repairs_all.iter().map(|r| r.frames_imputed()).sum();
    let videos: Vec<VideoCoverage> = repairs_all
        .iter()
        .zip(&manifest.videos)
        .map(|(r, e)| VideoCoverage {
            video_id: &r.video_id,
            n_frames: e.n_frames,
            frames_imputed: r.frames_imputed(),
            fills: r
                .fills
                .iter()
                .map(|(set, f)| FillRecord {
                    feature_set: set,
                    frame: f.frame,
                    donor: f.donor,
                })
                .collect(),
        })
        .collect();
    write_json(
        &a.out.join(COVERAGE_FILE),
        &serde_json::json!({ "frames_imputed": total, "videos": videos }),
    )?;
    for v in &videos {
        for f in &v.fills {
            println!(
                "{}: {} frame {} imputed from frame {}",
                v.video_id, f.feature_set, f.frame, f.donor
            );
        }
    }
    println!("{total} frames imputed");
    Ok(())
}

fn synth(a: &SynthArgs) -> Result<()> {
    let mut cfg: SynthConfig = match &a.config {
        Some(p) => read_json(p)?,
        None => SynthConfig::default(),
    };
    if let Some(v) = a.seed {
        cfg.seed = v;
    }
    if let Some(v) = a.sigma {
        cfg.sigma = v;
    }
    if let Some(v) = a.videos {
        cfg.videos = v;
    }
    if let Some(v) = a.frames {
        cfg.frames = v;
    }
    if let Some(v) = a.val_videos {
        cfg.val_videos = v;
    }
    let manifest = synth_dataset(&cfg, &a.out)?;
    println!(
        "wrote {} videos to {}",
        manifest.videos.len(),
        a.out.join(MANIFEST_FILE).display()
    );
    Ok(())
}

fn resolve_experiment(a: &TrainArgs) -> Result<ExperimentConfig> {
    let mut cfg: ExperimentConfig = match &a.config {
        Some(p) => read_json(p).context("reading experiment config")?,
        None => ExperimentConfig::default(),
    };
    if let Some(m) = &a.manifest {
        cfg.manifest = Some(m.clone());
    }
    if let Some(o) = &a.out {
        cfg.out = Some(o.clone());
    }
    if let Some(s) = a.seed {
        cfg.train.seed = s;
    }
    if let Some(e) = a.encoder {
        cfg.model.encoder = e;
    }
    if let Some(e) = a.epochs {
        cfg.train.epochs = e;
    }
    if let Some(lr) = a.lr {
        cfg.train.lr = lr;
    }
    if let Some(alpha) = a.alpha {
        cfg.train.alpha = alpha;
    }
    cfg.model.validate()?;
    cfg.train.validate()?;
    Ok(cfg)
}

fn train_cmd(a: &TrainArgs) -> Result<()> {
    let cfg = resolve_experiment(a)?;
    let manifest_path = cfg
        .manifest
        .clone()
        .ok_or_else(|| Error::config("no manifest given (--manifest or `manifest` in the config)"))?;
    let out = cfg
        .out
        .clone()
        .ok_or_else(|| Error::config("no output directory given (--out or `out` in the config)"))?;
    let manifest = Manifest::load(&manifest_path).context("loading manifest")?;
    let layout = feature_layout(&manifest.registry()?, &cfg.visual, &cfg.audio)?;
    let train_videos = load_split(&manifest, "train", &cfg.visual, &cfg.audio).context("loading train split")?;
    let val_videos = load_split(&manifest, "val", &cfg.visual, &cfg.audio).context("loading val split")?;
    let input_dim = layout.iter().map(|b| b.dim).sum();

    create_dir(&out)?;
    write_json(&out.join(CONFIG_FILE), &cfg)?;
    let (model, mut params) = Model::new(&cfg.model, input_dim, cfg.train.seed)?;
    eprintln!(
        "training {:?} ({} parameters) on {} videos",
        cfg.model.encoder,
        params.numel(),
        train_videos.len()
    );
    let outcome = train(
        &model,
        &mut params,
        &train_videos,
        &val_videos,
        &cfg.train,
        Some(&out),
        |r| {
            eprintln!(
                "epoch {:>3}  loss {:.5}  val macro-F1 {:.5}  ({} ms)",
                r.epoch, r.train_loss, r.val_macro_f1, r.wall_ms
            );
            ControlFlow::Continue(())
        },
    )?;
    let record = RunRecord {
        input_dim,
        feature_layout: layout,
        overlap_merge: OVERLAP_MERGE,
        parameters: params.numel(),
        train_videos: train_videos.len(),
        scored_split: if val_videos.is_empty() { "train" } else { "val" },
        best_epoch: outcome.best_epoch,
        best_val_macro_f1: outcome.best_val_macro_f1,
    };
    write_json(&out.join(RUN_FILE), &record)?;
    println!(
        "best epoch {} with macro-F1 {:.5}; checkpoints in {}",
        outcome.best_epoch,
        outcome.best_val_macro_f1,
        out.display()
    );
    Ok(())
}

fn predict(a: &PredictArgs) -> Result<()> {
    let config_path = match &a.config {
        Some(p) => p.clone(),
        None => a
            .checkpoint
            .parent()
            .unwrap_or(Path::new("."))
            .join(CONFIG_FILE),
    };
    let cfg: ExperimentConfig = read_json(&config_path).context("reading training config")?;
    cfg.model.validate()?;
    let manifest = Manifest::load(&a.manifest).context("loading manifest")?;
    let layout = feature_layout(&manifest.registry()?, &cfg.visual, &cfg.audio)?;
    let input_dim = layout.iter().map(|b| b.dim).sum();
    let stored = ParamStore::<f32>::load(&a.checkpoint)
        .map_err(Error::from)
        .with_context(|| format!("loading {}", a.checkpoint.display()))?;
    let (model, params) = Model::with_params(&cfg.model, input_dim, &stored)?;
    let videos = load_split(&manifest, &a.split, &cfg.visual, &cfg.audio)?;
    create_dir(&a.out)?;
    for v in &videos {
        let logits = model.predict_logits(&params, v)?;
        PredictionTrack::from_logits(v.id.clone(), &logits)?.save(&a.out.join(format!("{}.csv", v.id)))?;
    }
    write_json(
        &a.out.join(RUN_FILE),
        &serde_json::json!({
            "checkpoint": a.checkpoint,
            "split": a.split,
            "videos": videos.len(),
            "overlap_merge": OVERLAP_MERGE,
        }),
    )?;
    println!("wrote {} prediction files to {}", videos.len(), a.out.display());
    Ok(())
}

/// Labels keyed by video id, from a manifest split or a label directory.
fn gather_labels(manifest: Option<&Path>, split: &str, labels: Option<&Path>) -> Result<BTreeMap<String, LabelTrack>> {
    let mut out = BTreeMap::new();
    match (manifest, labels) {
        (Some(m), _) => {
            let manifest = Manifest::load(m).context("loading manifest")?;
            for id in manifest.split(split)? {
                let track = load_video_labels(&manifest, manifest.video(&id)?)?;
                out.insert(id, track);
            }
        }
        (None, Some(dir)) => {
            let entries = std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
            for entry in entries {
                let path = entry.map_err(|e| Error::io(dir, e))?.path();
                if path.extension().is_some_and(|e| e == "csv") {
                    let track = crate::data::load_labels(&path)?;
                    out.insert(track.video_id.clone(), track);
                }
            }
        }
        (None, None) => return Err(Error::config("give --manifest or --labels").into()),
    }
    Ok(out)
}

fn score(preds: &BTreeMap<String, PredictionTrack>, labels: &BTreeMap<String, LabelTrack>) -> Result<MetricReport> {
    let mut cm = ConfusionMatrix::new();
    for (id, track) in labels {
        let p = preds
            .get(id)
            .ok_or_else(|| Error::validation(format!("no predictions for video `{id}`")))?;
        let mut y = track.clone();
        if y.len() < p.len() {
            y.pad_to(p.len())?;
        }
        if y.len() != p.len() {
            return Err(Error::validation(format!(
                "video {id}: {} labelled frames but {} predictions",
                y.len(),
                p.len()
            ))
            .into());
        }
        cm.merge(&confusion_valid(y.labels(), &p.preds)?);
    }
    Ok(macro_f1(&cm))
}

fn evaluate(a: &EvaluateArgs) -> Result<()> {
    let preds = load_prediction_dir(&a.predictions)?;
    let labels = gather_labels(a.manifest.as_deref(), &a.split, a.labels.as_deref())?;
    let report = score(&preds, &labels)?;
    let out = a.out.clone().unwrap_or_else(|| a.predictions.join(REPORT_FILE));
    write_json(&out, &report)?;
    println!("macro-F1 {:.5} over {} videos", report.macro_f1, labels.len());
    Ok(())
}

fn ensemble(a: &EnsembleArgs) -> Result<()> {
    let spec: EnsembleSpec = read_json(&a.config).context("reading ensemble spec")?;
    spec.validate()?;
    let base = a.config.parent().unwrap_or(Path::new("."));
    let dirs: Vec<PathBuf> = spec.members.iter().map(|m| base.join(m)).collect();
    let members = dirs
        .iter()
        .map(|d| load_prediction_dir(d).with_context(|| format!("loading member {}", d.display())))
        .collect::<Result<Vec<_>>>()?;
    let fused = vote_dirs(&members)?;
    create_dir(&a.out)?;
    for t in &fused {
        t.save(&a.out.join(format!("{}.csv", t.video_id)))?;
    }
    println!("fused {} videos from {} members", fused.len(), members.len());
    if let Some(m) = &a.manifest {
        let labels = gather_labels(Some(m), &a.split, None)?;
        let fused_map: BTreeMap<String, PredictionTrack> =
            fused.into_iter().map(|t| (t.video_id.clone(), t)).collect();
        let report = score(&fused_map, &labels)?;
        let mut member_scores = Vec::new();
        for (dir, preds) in spec.members.iter().zip(&members) {
            let r = score(preds, &labels)?;
            println!("member {}: macro-F1 {:.5}", dir.display(), r.macro_f1);
            member_scores.push(serde_json::json!({ "member": dir, "macro_f1": r.macro_f1 }));
        }
        println!("ensemble: macro-F1 {:.5}", report.macro_f1);
        write_json(
            &a.out.join(REPORT_FILE),
            &serde_json::json!({
                "strategy": spec.strategy,
                "tie_break": spec.tie_break,
                "ensemble": report,
                "members": member_scores,
            }),
        )?;
    }
    Ok(())
}
