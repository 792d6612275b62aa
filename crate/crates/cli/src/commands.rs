//! The `gen`, `train`, `is` and `eval` subcommands as library calls.

use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{bail, Context, Result};
use curvedn_core::decoder::checkpoint;
use curvedn_core::decoder::train::{StepOutcome, Trainer};
use curvedn_core::decoder::Decoder;
use curvedn_core::losses::LossTerms;
use curvedn_core::synth::{Dataset, Scene};
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::evaluate::{evaluate, EvalReport};
use crate::snapshot::{is_trace, list_snapshots, IsRow, Snapshot};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenSummary {
    pub records: usize,
    pub instances: usize,
    pub eval_records: usize,
    pub path: PathBuf,
}

fn write_dataset(data: &Dataset, path: &Path) -> Result<()> {
    let file = File::create(path).with_context(|| format!("creating {}", path.display()))?;
    let mut out = BufWriter::new(file);
    data.write(&mut out)?;
    out.flush()?;
    Ok(())
}

pub fn read_dataset(path: &Path) -> Result<Dataset> {
    let file = File::open(path).with_context(|| format!("dataset not found at {}", path.display()))?;
    Dataset::read(BufReader::new(file)).with_context(|| format!("reading {}", path.display()))
}

/// Writes the training set and, when requested, a held-out set that
/// continues the image index sequence.
pub fn cmd_gen(cfg: &RunConfig) -> Result<GenSummary> {
    std::fs::create_dir_all(&cfg.output_dir).with_context(|| format!("creating {}", cfg.output_dir.display()))?;
    let train = Dataset::generate_range(&cfg.scene, 0, cfg.images, cfg.jobs)?;
    write_dataset(&train, &cfg.dataset_path())?;
    if cfg.eval_images > 0 {
        let held_out = Dataset::generate_range(&cfg.scene, cfg.images as u64, cfg.eval_images, cfg.jobs)?;
        write_dataset(&held_out, &cfg.eval_path())?;
    }
    Ok(GenSummary {
        records: train.scenes.len(),
        instances: train.instance_count(),
        eval_records: cfg.eval_images,
        path: cfg.dataset_path(),
    })
}

/// One line of the metrics log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub step: usize,
    pub wall_time: f64,
    pub part: String,
    pub loss_total: f64,
    pub loss_cls: f64,
    pub loss_text_pos: f64,
    pub loss_text_neg: f64,
    pub loss_coord: f64,
    pub loss_bd: f64,
}

impl MetricRow {
    fn new(step: usize, wall_time: f64, part: &str, t: &LossTerms) -> Self {
        Self {
            step,
            wall_time,
            part: part.into(),
            loss_total: t.total(),
            loss_cls: t.cls,
            loss_text_pos: t.text_pos,
            loss_text_neg: t.text_neg,
            loss_coord: t.coord,
            loss_bd: t.bd,
        }
    }
}

/// Scores at a snapshot step, on the training images and on the held-out
/// set when there is one.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceRow {
    pub step: usize,
    pub train: EvalReport,
    pub held_out: Option<EvalReport>,
}

#[derive(Debug, Clone)]
pub struct TrainSummary {
    pub steps: usize,
    pub last: Option<StepOutcome>,
    pub trace: Vec<TraceRow>,
    pub checkpoint: PathBuf,
}

fn jsonl<T: Serialize>(out: &mut impl Write, row: &T) -> Result<()> {
    serde_json::to_writer(&mut *out, row)?;
    out.write_all(b"\n")?;
    Ok(())
}

/// Trains for `cfg.steps` steps, logging losses every step and writing a
/// snapshot and a score trace row every `snapshot_interval` steps,
/// including step 0. `progress` sees every
/// finished step.
pub fn cmd_train(cfg: &RunConfig, mut progress: impl FnMut(usize, &StepOutcome)) -> Result<TrainSummary> {
    let data = read_dataset(&cfg.dataset_path())?;
    if data.scenes.is_empty() {
        bail!("dataset {} has no images", cfg.dataset_path().display());
    }
    if data.spec.alphabet_size != cfg.decoder.alphabet_size || data.spec.channels() != cfg.decoder.feature_channels {
        bail!("dataset alphabet or feature layout does not match the decoder configuration");
    }
    let held_out = if cfg.eval_path().exists() {
        Some(read_dataset(&cfg.eval_path())?)
    } else {
        None
    };
    let snap_dir = cfg.snapshot_dir();
    if snap_dir.exists() {
        for old in list_snapshots(&snap_dir)? {
            std::fs::remove_file(old)?;
        }
    }
    std::fs::create_dir_all(&snap_dir)?;
    let tracked: &[Scene] = match cfg.snapshot_images {
        0 => &data.scenes,
        n => &data.scenes[..n.min(data.scenes.len())],
    };

    let model = Decoder::new(cfg.decoder.clone())?;
    let mut trainer = Trainer::new(model, cfg.train.clone(), cfg.seed)?;
    let mut metrics = BufWriter::new(File::create(cfg.metrics_path())?);
    let mut trace_file = BufWriter::new(File::create(cfg.trace_path())?);
    let mut trace = Vec::new();
    let start = Instant::now();

    let mut checkpoint_at = |trainer: &Trainer, step: usize, trace: &mut Vec<TraceRow>| -> Result<()> {
        Snapshot::capture(&trainer.model, tracked, step, &cfg.train.cost)?.write(&snap_dir)?;
        let score = |scenes: &[Scene]| evaluate(&trainer.model, scenes, cfg.score_threshold, cfg.match_threshold);
        let row = TraceRow {
            step,
            train: score(&data.scenes)?,
            held_out: held_out.as_ref().map(|h| score(&h.scenes)).transpose()?,
        };
        jsonl(&mut trace_file, &row)?;
        trace_file.flush()?;
        trace.push(row);
        Ok(())
    };
    checkpoint_at(&trainer, 0, &mut trace)?;

    let mut last = None;
    for step in 1..=cfg.steps {
        let lr = cfg.train.optim.lr_at(step - 1, cfg.steps);
        let idx = trainer.next_batch(data.scenes.len());
        let batch: Vec<&Scene> = idx.iter().map(|&i| &data.scenes[i]).collect();
        let outcome = trainer.step(&batch, lr).with_context(|| format!("training step {step}"))?;
        let wall = if cfg.deterministic { 0.0 } else { start.elapsed().as_secs_f64() };
        if let Some(dn) = &outcome.dn {
            jsonl(&mut metrics, &MetricRow::new(step, wall, "dn", dn))?;
        }
        jsonl(&mut metrics, &MetricRow::new(step, wall, "match", &outcome.matching))?;
        progress(step, &outcome);
        if step % cfg.snapshot_interval == 0 || step == cfg.steps {
            metrics.flush()?;
            checkpoint_at(&trainer, step, &mut trace)?;
        }
        last = Some(outcome);
    }
    metrics.flush()?;
    checkpoint::save(&trainer.model, &cfg.checkpoint_path())?;
    Ok(TrainSummary {
        steps: cfg.steps,
        last,
        trace,
        checkpoint: cfg.checkpoint_path(),
    })
}

/// Reads every snapshot in `dir` and writes the instability trace to `out`.
pub fn cmd_is(dir: &Path, out: &Path) -> Result<Vec<IsRow>> {
    let snapshots = list_snapshots(dir)?
        .iter()
        .map(|p| Snapshot::read(p))
        .collect::<Result<Vec<_>>>()?;
    let rows = is_trace(&snapshots)?;
    let mut file = BufWriter::new(File::create(out).with_context(|| format!("creating {}", out.display()))?);
    for r in &rows {
        jsonl(&mut file, r)?;
    }
    file.flush()?;
    Ok(rows)
}

pub fn cmd_eval(checkpoint_path: &Path, dataset: &Path, score_threshold: f64, match_threshold: f64) -> Result<EvalReport> {
    let model = checkpoint::load(checkpoint_path).with_context(|| format!("loading checkpoint {}", checkpoint_path.display()))?;
    let data = read_dataset(dataset)?;
    evaluate(&model, &data.scenes, score_threshold, match_threshold)
}
