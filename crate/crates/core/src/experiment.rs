//! Runs described by a [`RunConfig`]: data preparation, training or
//! distillation, and the files left in the run directory.

use std::path::Path;

use crate::config::RunConfig;
use crate::dataio::{apply_split, halve_subset, load_dataset, load_split, remap_classes, split_partial, ClassMap, Dataset, PartialSplit, SplitTarget, Task};
use crate::distill::{load_teachers, train_student, TeacherCall};
use crate::error::{Error, Result};
use crate::dethead::{write_predictions, Prediction};
use crate::evalmetrics::EvalReport;
use crate::trainer::{self, evaluate, finetune_params, Checkpoint, Evaluation, Start, TrainData, TrainMode, TrainOptions, TrainOutcome};

/// Training and validation data after splitting and relabeling.
pub struct PreparedData {
    pub train: Dataset,
    pub split: Option<PartialSplit>,
    pub val: Option<Dataset>,
}

fn load(path: &Path, merge: bool) -> Result<(Dataset, Option<PartialSplit>)> {
    let loaded = load_dataset(path)?;
    let ds = if merge {
        remap_classes(&loaded.dataset, &ClassMap::voc_abstract())?
    } else {
        loaded.dataset
    };
    Ok((ds, loaded.split))
}

pub fn prepare_data(cfg: &RunConfig) -> Result<PreparedData> {
    let d = &cfg.data;
    let (full, own_split) = load(&d.train, d.merge_abstract)?;
    let val = d.val.as_deref().map(|p| load(p, d.merge_abstract).map(|x| x.0)).transpose()?;
    let mode = cfg.train.mode;
    let needs_split = matches!(mode, TrainMode::MtEpoch | TrainMode::MtIteration);
    let split = match (&d.split, own_split) {
        (Some(p), _) => Some(load_split(p)?),
        (None, Some(s)) => Some(s),
        (None, None) if needs_split => {
            let target = d.seg_count.map_or(SplitTarget::SegFraction(0.5), SplitTarget::SegCount);
            Some(split_partial(&full, d.split_seed, target)?)
        }
        (None, None) => None,
    };
    let split = match (split, d.halve) {
        (Some(s), Some(t)) => Some(halve_subset(&s, t, d.split_seed)?),
        (s, _) => s,
    };
    let train = match (&split, mode) {
        (_, TrainMode::MtFull) => full,
        (Some(s), TrainMode::MtEpoch | TrainMode::MtIteration) => apply_split(&full, s)?,
        (Some(s), _) => {
            let task = cfg.train.tasks()[0];
            apply_split(&full, s)?.subset(s.ids(task))?
        }
        (None, _) => full,
    };
    Ok(PreparedData { train, split, val })
}

pub struct RunResult {
    pub outcome: TrainOutcome,
    pub teacher_calls: Vec<TeacherCall>,
}

/// Trains (or distills) as configured, writing `config.resolved`,
/// `checkpoints/`, `metrics.jsonl`, and `eval.json` into the run directory.
pub fn run(cfg: &RunConfig, verbose: bool) -> Result<RunResult> {
    if cfg.run_dir.as_os_str().is_empty() {
        return Err(Error::Config("run_dir is required".into()));
    }
    let data = prepare_data(cfg)?;
    cfg.write_resolved(&cfg.run_dir)?;
    let mut metadata = std::collections::BTreeMap::new();
    metadata.insert("run_config".to_string(), cfg.to_toml()?);
    let opts = TrainOptions {
        out_dir: Some(cfg.run_dir.clone()),
        verbose,
        metadata,
        ..Default::default()
    };
    let td = TrainData {
        samples: &data.train,
        split: data.split.as_ref(),
        val: data.val.as_ref(),
    };
    let last = cfg.run_dir.join("checkpoints/last.safetensors");
    let result = if let Some(kd) = &cfg.distill {
        if cfg.resume {
            return Err(Error::Config("distillation runs cannot resume".into()));
        }
        let teachers = load_teachers(kd, &cfg.train.tasks())?;
        let out = train_student(&cfg.model, &cfg.train, kd, teachers, &td, opts)?;
        RunResult {
            outcome: out.train,
            teacher_calls: out.calls,
        }
    } else {
        let start = if cfg.resume && last.exists() {
            Start::from_checkpoint(Checkpoint::load(&last)?)?
        } else if matches!(cfg.train.mode, TrainMode::FinetuneHead | TrainMode::FinetuneFull) {
            let ft = cfg
                .finetune
                .as_ref()
                .ok_or_else(|| Error::Config("fine-tuning needs [finetune] checkpoint".into()))?;
            let source = Checkpoint::load(&ft.checkpoint)?;
            let task = cfg.train.tasks()[0];
            if source.model.has_head(task) && !source.model.has_head(task.other()) {
                return Err(Error::Config(format!("fine-tuning for {task} needs a checkpoint trained on {}", task.other())));
            }
            Start::Params(finetune_params(&cfg.model.with_heads(&[task]), &source, task, cfg.train.seed)?)
        } else {
            Start::Fresh
        };
        RunResult {
            outcome: trainer::train(&cfg.model, &cfg.train, &td, start, opts)?,
            teacher_calls: Vec::new(),
        }
    };
    if let Some(ev) = &result.outcome.last_eval {
        ev.report.write(&cfg.run_dir.join("eval.json"))?;
    }
    Ok(result)
}

/// Evaluates a checkpoint on `data`; with `out`, writes `eval.json` and,
/// for detection models, `predictions.json`.
pub fn evaluate_checkpoint(path: &Path, data: &Dataset, batch_size: usize, out: Option<&Path>) -> Result<Evaluation> {
    let ck = Checkpoint::load(path)?;
    let ev = evaluate(&ck.model, &ck.params, data, batch_size)?;
    if let Some(dir) = out {
        std::fs::create_dir_all(dir).map_err(crate::error::io_err(dir))?;
        ev.report.write(&dir.join("eval.json"))?;
        if let Some(dets) = &ev.predictions.detections {
            let preds: Vec<Prediction> = ev
                .predictions
                .ids
                .iter()
                .zip(dets)
                .flat_map(|(id, ds)| ds.iter().map(move |d| Prediction::new(id, d)))
                .collect();
            write_predictions(&dir.join("predictions.json"), &preds)?;
        }
    }
    Ok(ev)
}

/// Reads an `eval.json`.
pub fn read_eval(path: &Path) -> Result<EvalReport> {
    let text = std::fs::read_to_string(path).map_err(crate::error::io_err(path))?;
    Ok(serde_json::from_str(&text)?)
}

/// Task trained by a single-task run, if any.
pub fn single_task(mode: TrainMode) -> Option<Task> {
    match mode {
        TrainMode::SingleDet => Some(Task::Det),
        TrainMode::SingleSeg => Some(Task::Seg),
        _ => None,
    }
}
