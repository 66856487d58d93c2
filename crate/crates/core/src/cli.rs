//! The `acmil` command line: `synth`, `train`, `eval`, `explain`.
//!
//! Relative output paths are resolved against `$ACMIL_OUTPUT_ROOT` when it
//! is set.

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::checkpoint::{self, SaveRequest};
use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::metrics::MetricReport;
use crate::model::{prepare_corpus, Model, ModelKind, PreparedRoom};
use crate::room::{read_jsonl, PreprocessConfig, Vocabulary};
use crate::synth::{write_dataset, SynthManifest};
use crate::train::{evaluate, evaluate_scores, AdamW, EpochLog, Trainer};

pub const OUTPUT_ROOT_ENV: &str = "ACMIL_OUTPUT_ROOT";

#[derive(Debug, Parser)]
#[command(
    name = "acmil",
    version,
    about = "Capsule MIL risk assessment for live-streaming rooms"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic labeled corpus (train/val/test JSONL + manifest).
    Synth(SynthArgs),
    /// Train a model and write checkpoint, manifest and per-epoch log.
    Train(TrainArgs),
    /// Score a corpus with a checkpoint and print a metric report as JSON.
    Eval(EvalArgs),
    /// Export per-capsule attribution and a user x slot heat-map per room.
    Explain(ExplainArgs),
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub rooms: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub positive_rate: Option<f64>,
    #[arg(long)]
    pub motif_strength: Option<f64>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Directory holding `train.jsonl` and `val.jsonl`.
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long)]
    pub train: Option<PathBuf>,
    #[arg(long)]
    pub val: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value = "acmil", value_parser = ["acmil", "meanpool", "atmil"])]
    pub model: String,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub threads: Option<usize>,
    /// Continue from a checkpoint written by an earlier run.
    #[arg(long)]
    pub resume: Option<PathBuf>,
    #[arg(long)]
    pub quiet: bool,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// JSONL corpus to score.
    #[arg(long)]
    pub data: PathBuf,
    /// Optional config; must describe the same architecture as the checkpoint.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Also write the report to this file.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ExplainArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    /// Only explain this room.
    #[arg(long)]
    pub room: Option<String>,
    /// Explain at most this many rooms.
    #[arg(long)]
    pub limit: Option<usize>,
}

/// Parses `args` (including the program name) and runs the command.
/// Returns the process exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = e.exit_code();
            let _ = e.print();
            return code;
        }
    };
    match run(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            1
        }
    }
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Synth(a) => cmd_synth(a),
        Command::Train(a) => cmd_train(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Explain(a) => cmd_explain(a),
    }
}

pub fn output_path(p: &Path) -> PathBuf {
    match std::env::var_os(OUTPUT_ROOT_ENV) {
        Some(root) if p.is_relative() => PathBuf::from(root).join(p),
        _ => p.to_path_buf(),
    }
}

fn load_config(path: Option<&Path>) -> Result<RunConfig> {
    match path {
        Some(p) => RunConfig::load(p),
        None => Ok(RunConfig::default()),
    }
}

pub fn cmd_synth(a: SynthArgs) -> Result<()> {
    let mut cfg = load_config(a.config.as_deref())?.scenario;
    if let Some(n) = a.rooms {
        cfg.num_rooms = n;
    }
    if let Some(s) = a.seed {
        cfg.seed = s;
    }
    if let Some(p) = a.positive_rate {
        cfg.positive_rate = p;
    }
    if let Some(m) = a.motif_strength {
        cfg.motif_strength = m;
    }
    let out = output_path(&a.out);
    let manifest: SynthManifest = write_dataset(&cfg, &out)?;
    for s in &manifest.splits {
        eprintln!("{}: {} rooms, {} positive", s.file, s.rooms, s.positives);
    }
    Ok(())
}

/// SHA-256 over `"blob <len>\0" + content`, as git's SHA-256 object format.
pub fn git_style_hash(content: &[u8]) -> String {
    let mut h = Sha256::new();
    h.update(format!("blob {}\0", content.len()).as_bytes());
    h.update(content);
    hex::encode(h.finalize())
}

fn hash_file(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(git_style_hash(&bytes))
}

fn load_prepared(
    path: &Path,
    pre: &PreprocessConfig,
    d_text: usize,
) -> Result<(Vec<PreparedRoom>, Vec<String>)> {
    let rooms = read_jsonl(path, &Vocabulary::standard()).map_err(|e| match e {
        Error::Schema {
            path: field,
            message,
        } => Error::Schema {
            path: format!("{}: {field}", path.display()),
            message,
        },
        other => other,
    })?;
    prepare_corpus(&rooms, pre, d_text)
}

#[derive(Debug, Serialize)]
pub struct RunManifest {
    pub command: String,
    pub model: String,
    pub seed: u64,
    pub config: BTreeMap<String, serde_json::Value>,
    pub datasets: BTreeMap<String, PathBuf>,
    /// Git-style SHA-256 of every input file.
    pub input_hashes: BTreeMap<String, String>,
    pub checkpoint: PathBuf,
    pub log: PathBuf,
    pub resumed_from: Option<PathBuf>,
    /// Validation PR-AUC of the resumed parameters before any update.
    pub resume_val_pr_auc: Option<f64>,
    pub skipped_rooms: Vec<String>,
    pub epochs_run: usize,
    pub best_epoch: usize,
    pub best_val_pr_auc: f64,
    pub threshold: f64,
    pub stopped_early: bool,
    pub timings_s: BTreeMap<String, f64>,
}

fn config_snapshot(
    pre: &PreprocessConfig,
    model: &crate::model::ModelConfig,
) -> BTreeMap<String, serde_json::Value> {
    let mut m = BTreeMap::new();
    m.insert(
        "preprocess".into(),
        serde_json::to_value(pre).expect("serializable"),
    );
    m.insert(
        "model".into(),
        serde_json::to_value(model).expect("serializable"),
    );
    m
}

pub fn cmd_train(a: TrainArgs) -> Result<()> {
    let started = Instant::now();
    let run_cfg = load_config(a.config.as_deref())?;
    let mut model_cfg = run_cfg.model.clone();
    if let Some(s) = a.seed {
        model_cfg.seed = s;
    }
    if let Some(e) = a.epochs {
        model_cfg.max_epochs = e;
    }
    if let Some(t) = a.threads {
        model_cfg.threads = t;
    }
    let kind: ModelKind = a.model.parse()?;

    let (train_path, val_path) = match (&a.data, &a.train, &a.val) {
        (_, Some(t), Some(v)) => (t.clone(), v.clone()),
        (Some(d), None, None) => (d.join("train.jsonl"), d.join("val.jsonl")),
        _ => {
            return Err(Error::Config(
                "give either --data <dir> or both --train and --val".into(),
            ))
        }
    };

    let (trainer, pre) = match &a.resume {
        Some(path) => {
            let ckpt = checkpoint::load(path)?;
            if a.config.is_some() {
                ckpt.check_compatible(&model_cfg)?;
            }
            // Flags and an explicit config override the stored schedule.
            let mut model = ckpt.model;
            if a.epochs.is_some() || a.config.is_some() {
                model.config.max_epochs = model_cfg.max_epochs;
            }
            if a.threads.is_some() || a.config.is_some() {
                model.config.threads = model_cfg.threads;
            }
            let optimizer = ckpt.optimizer.unwrap_or_else(|| {
                AdamW::new(
                    &model.params,
                    model.config.learning_rate,
                    model.config.weight_decay,
                )
            });
            let t = Trainer::resume(
                model,
                optimizer,
                ckpt.header.epochs_done,
                ckpt.header.best_val_pr_auc,
                ckpt.header.threshold,
            );
            (t, ckpt.header.preprocess)
        }
        None => {
            run_cfg.preprocess.validate()?;
            (
                Trainer::new(Model::new(kind, model_cfg)?),
                run_cfg.preprocess.clone(),
            )
        }
    };
    let mut trainer = trainer;
    let d_text = trainer.model.config.d_text;

    let load_start = Instant::now();
    let (train, mut skipped) = load_prepared(&train_path, &pre, d_text)?;
    let (val, skipped_val) = load_prepared(&val_path, &pre, d_text)?;
    skipped.extend(skipped_val);
    let load_s = load_start.elapsed().as_secs_f64();

    let resume_val_pr_auc = match &a.resume {
        Some(_) => {
            let scores = evaluate_scores(&trainer.model, &val)?.scores;
            let labels: Vec<u8> = val.iter().map(|r| r.label).collect();
            let auc = crate::metrics::pr_auc(&scores, &labels)?;
            if !a.quiet {
                eprintln!(
                    "resumed at epoch {}: val PR-AUC {auc:.6}",
                    trainer.epochs_done
                );
            }
            Some(auc)
        }
        None => None,
    };

    let out = output_path(&a.out);
    std::fs::create_dir_all(&out).map_err(|e| Error::io(&out, e))?;
    let log_path = out.join("train_log.csv");
    let mut log = csv::Writer::from_path(&log_path)
        .map_err(|e| Error::Config(format!("{}: {e}", log_path.display())))?;
    let mut log_err = None;
    let quiet = a.quiet;
    let train_start = Instant::now();
    let summary = trainer.fit(&train, &val, |entry: &EpochLog| {
        if !quiet {
            eprintln!(
                "epoch {:>3}  train_loss {:.4}  val_loss {:.4}  val_pr_auc {:.4}  {:.1}s{}",
                entry.epoch,
                entry.train_loss,
                entry.val_loss,
                entry.val_pr_auc,
                entry.seconds,
                if entry.improved { "  *" } else { "" }
            );
        }
        if let Err(e) = log
            .serialize(entry)
            .and_then(|_| log.flush().map_err(Into::into))
        {
            log_err.get_or_insert(e);
        }
    })?;
    if let Some(e) = log_err {
        return Err(Error::Config(format!("{}: {e}", log_path.display())));
    }
    let train_s = train_start.elapsed().as_secs_f64();

    let best = trainer.best.as_ref().expect("fit ran at least one epoch");
    let ckpt_path = out.join("model.ckpt");
    checkpoint::save(
        &ckpt_path,
        &SaveRequest {
            model: &trainer.model,
            preprocess: &pre,
            best_val_pr_auc: best.val_pr_auc,
            threshold: best.threshold,
            epochs_done: best.epoch,
            optimizer: Some(&best.optimizer),
        },
    )?;

    let mut input_hashes = BTreeMap::new();
    let mut datasets = BTreeMap::new();
    for (name, p) in [("train", &train_path), ("val", &val_path)] {
        input_hashes.insert(name.to_string(), hash_file(p)?);
        datasets.insert(name.to_string(), p.clone());
    }
    if let Some(c) = &a.config {
        input_hashes.insert("config".into(), hash_file(c)?);
    }
    if let Some(r) = &a.resume {
        input_hashes.insert("resume".into(), hash_file(r)?);
    }
    let mut timings = BTreeMap::new();
    timings.insert("load".to_string(), load_s);
    timings.insert("train".to_string(), train_s);
    timings.insert("total".to_string(), started.elapsed().as_secs_f64());
    let manifest = RunManifest {
        command: "train".into(),
        model: trainer.model.kind.name().into(),
        seed: trainer.model.config.seed,
        config: config_snapshot(&pre, &trainer.model.config),
        datasets,
        input_hashes,
        checkpoint: ckpt_path,
        log: log_path,
        resumed_from: a.resume.clone(),
        resume_val_pr_auc,
        skipped_rooms: skipped,
        epochs_run: summary.epochs_run,
        best_epoch: summary.best_epoch,
        best_val_pr_auc: summary.best_val_pr_auc,
        threshold: summary.threshold,
        stopped_early: summary.stopped_early,
        timings_s: timings,
    };
    let manifest_path = out.join("manifest.json");
    std::fs::write(
        &manifest_path,
        serde_json::to_string_pretty(&manifest)? + "\n",
    )
    .map_err(|e| Error::io(&manifest_path, e))?;
    if !a.quiet {
        eprintln!(
            "best epoch {} val PR-AUC {:.4}; wrote {}",
            summary.best_epoch,
            summary.best_val_pr_auc,
            out.display()
        );
    }
    Ok(())
}

fn open_checkpoint(path: &Path, config: Option<&Path>) -> Result<checkpoint::Checkpoint> {
    let ckpt = checkpoint::load(path)?;
    if let Some(c) = config {
        ckpt.check_compatible(&RunConfig::load(c)?.model)?;
    }
    Ok(ckpt)
}

pub fn cmd_eval(a: EvalArgs) -> Result<()> {
    let ckpt = open_checkpoint(&a.checkpoint, a.config.as_deref())?;
    let (rooms, skipped) =
        load_prepared(&a.data, &ckpt.header.preprocess, ckpt.model.config.d_text)?;
    if !skipped.is_empty() {
        eprintln!(
            "skipped {} rooms left empty by preprocessing",
            skipped.len()
        );
    }
    let report: MetricReport = evaluate(&ckpt.model, &rooms, Some(ckpt.header.threshold))?;
    let json = serde_json::to_string_pretty(&report)?;
    println!("{json}");
    if let Some(out) = &a.out {
        let out = output_path(out);
        std::fs::write(&out, json + "\n").map_err(|e| Error::io(&out, e))?;
    }
    Ok(())
}

#[derive(Debug, Serialize)]
pub struct CapsuleScore {
    pub user_id: String,
    pub slot: usize,
    pub score: f64,
}

#[derive(Debug, Serialize)]
pub struct UserWeight {
    pub user_id: String,
    pub weight: f64,
}

#[derive(Debug, Serialize)]
pub struct Explanation {
    pub room_id: String,
    pub risk_score: f64,
    pub capsules: Vec<CapsuleScore>,
    /// User-view attention; empty for the baselines.
    pub users: Vec<UserWeight>,
    /// Gate values `[action, capsule, user, slot]`; AC-MIL only.
    pub gates: Option<[f64; 4]>,
}

/// Attribution of one room, plus its dense `users x slots` grid (0 for
/// empty cells).
pub fn explain_room(model: &Model, room: &PreparedRoom) -> (Explanation, Vec<Vec<f64>>) {
    let out = model.predict(room);
    let grid = &room.grid;
    let mut heat = vec![vec![0.0; grid.num_slots]; grid.num_users()];
    let capsules = (0..room.num_capsules())
        .map(|i| {
            let (user, slot) = grid.key(i);
            heat[grid.capsules[i].user_index][slot] = out.attribution[i];
            CapsuleScore {
                user_id: user.to_string(),
                slot,
                score: out.attribution[i],
            }
        })
        .collect();
    let users = out
        .decoded
        .as_ref()
        .map(|d| {
            grid.users
                .iter()
                .zip(&d.user_weights)
                .map(|(u, &w)| UserWeight {
                    user_id: u.clone(),
                    weight: w,
                })
                .collect()
        })
        .unwrap_or_default();
    let explanation = Explanation {
        room_id: room.room_id.clone(),
        risk_score: out.score,
        capsules,
        users,
        gates: out.decoded.as_ref().map(|d| d.gates),
    };
    (explanation, heat)
}

fn safe_file_name(id: &str) -> String {
    id.chars()
        .map(|c| {
            if c.is_ascii_alphanumeric() || "-_.".contains(c) {
                c
            } else {
                '_'
            }
        })
        .collect()
}

pub fn cmd_explain(a: ExplainArgs) -> Result<()> {
    let ckpt = open_checkpoint(&a.checkpoint, a.config.as_deref())?;
    let (rooms, _) = load_prepared(&a.data, &ckpt.header.preprocess, ckpt.model.config.d_text)?;
    let selected: Vec<&PreparedRoom> = rooms
        .iter()
        .filter(|r| a.room.as_ref().is_none_or(|id| &r.room_id == id))
        .take(a.limit.unwrap_or(usize::MAX))
        .collect();
    if let Some(id) = &a.room {
        if selected.is_empty() {
            return Err(Error::Config(format!(
                "room `{id}` not found (or empty after preprocessing)"
            )));
        }
    }
    let out = output_path(&a.out);
    std::fs::create_dir_all(&out).map_err(|e| Error::io(&out, e))?;
    for room in &selected {
        ckpt.model.check_room(room)?;
        let (explanation, heat) = explain_room(&ckpt.model, room);
        let stem = safe_file_name(&room.room_id);
        let json_path = out.join(format!("{stem}.json"));
        std::fs::write(
            &json_path,
            serde_json::to_string_pretty(&explanation)? + "\n",
        )
        .map_err(|e| Error::io(&json_path, e))?;

        let csv_path = out.join(format!("{stem}.csv"));
        let csv_err = |e: csv::Error| Error::Config(format!("{}: {e}", csv_path.display()));
        let mut w = csv::Writer::from_path(&csv_path).map_err(csv_err)?;
        let mut header = vec!["user_id".to_string()];
        header.extend((0..room.grid.num_slots).map(|k| format!("slot_{k}")));
        w.write_record(&header).map_err(csv_err)?;
        for (user, row) in room.grid.users.iter().zip(&heat) {
            let mut record = vec![user.clone()];
            record.extend(row.iter().map(|v| v.to_string()));
            w.write_record(&record).map_err(csv_err)?;
        }
        w.flush().map_err(|e| Error::io(&csv_path, e))?;
    }
    eprintln!("explained {} rooms into {}", selected.len(), out.display());
    Ok(())
}
