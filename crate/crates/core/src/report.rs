//! Aggregates finished runs into comparison tables: one row per training
//! recipe, one column pair (detection mAP, segmentation mIoU) per encoder,
//! values averaged over seeds.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::config::{self, RunConfig};
use crate::dataio::Task;
use crate::distill::KdMode;
use crate::error::{io_err, Result};
use crate::experiment::read_eval;
use crate::trainer::TrainMode;

/// Which comparison a run belongs to.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TableKind {
    /// Single task, fine-tuning, and the multi-task variants.
    Training,
    /// One task subset halved.
    HalfData,
    /// Segmentation classes merged into abstract groups.
    MergedClasses,
    /// Distillation variants and their baselines.
    Distillation,
}

impl TableKind {
    pub fn title(self) -> &'static str {
        match self {
            TableKind::Training => "Single-task, fine-tuning, and multi-task training",
            TableKind::HalfData => "Half of one task subset removed",
            TableKind::MergedClasses => "Segmentation classes merged into abstract groups",
            TableKind::Distillation => "Knowledge distillation",
        }
    }

    /// Row labels in display order.
    pub fn rows(self) -> &'static [&'static str] {
        match self {
            TableKind::Training => &[
                "Single task",
                "Finetuning head",
                "Finetuning full",
                "Multi-task (epoch)",
                "Multi-task (iteration)",
                "Multi-task (full)",
            ],
            TableKind::HalfData => &[
                "Single task",
                "Single task (half)",
                "Multi-task",
                "Multi-task (half DET)",
                "Multi-task (half SEG)",
            ],
            TableKind::MergedClasses => &["Single task", "Multi-task"],
            TableKind::Distillation => &[
                "Single task",
                "Single task + KD",
                "Multi-task",
                "Multi-task + 1mse",
                "Multi-task + 0mse",
                "Multi-task + 2mse",
            ],
        }
    }
}

/// One finished run as seen by the report.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub dir: PathBuf,
    pub tables: Vec<TableKind>,
    pub row: String,
    pub encoder: String,
    pub seed: u64,
    pub map: Option<f64>,
    pub miou: Option<f64>,
}

fn mode_row(mode: TrainMode) -> &'static str {
    match mode {
        TrainMode::SingleDet | TrainMode::SingleSeg => "Single task",
        TrainMode::FinetuneHead => "Finetuning head",
        TrainMode::FinetuneFull => "Finetuning full",
        TrainMode::MtEpoch => "Multi-task (epoch)",
        TrainMode::MtIteration => "Multi-task (iteration)",
        TrainMode::MtFull => "Multi-task (full)",
    }
}

/// Row label and tables of a run configuration.
pub fn classify(cfg: &RunConfig) -> (String, Vec<TableKind>) {
    let mode = cfg.train.mode;
    let multi = matches!(mode, TrainMode::MtEpoch | TrainMode::MtIteration);
    if let Some(kd) = &cfg.distill {
        let row = match kd.mode {
            KdMode::StlKd => "Single task + KD",
            KdMode::Mse1 => "Multi-task + 1mse",
            KdMode::Mse0 => "Multi-task + 0mse",
            KdMode::Mse2 => "Multi-task + 2mse",
        };
        return (row.into(), vec![TableKind::Distillation]);
    }
    if cfg.data.merge_abstract {
        let row = if multi { "Multi-task" } else { "Single task" };
        return (row.into(), vec![TableKind::MergedClasses]);
    }
    if let Some(t) = cfg.data.halve {
        let row = match (multi, t) {
            (false, _) => "Single task (half)".to_string(),
            (true, Task::Det) => "Multi-task (half DET)".into(),
            (true, Task::Seg) => "Multi-task (half SEG)".into(),
        };
        return (row, vec![TableKind::HalfData]);
    }
    let mut tables = vec![TableKind::Training];
    let row = mode_row(mode).to_string();
    if row == "Single task" {
        tables.extend([TableKind::HalfData, TableKind::Distillation]);
    }
    if mode == TrainMode::MtIteration {
        tables.extend([TableKind::HalfData, TableKind::Distillation]);
    }
    (row, tables)
}

fn secondary_row(table: TableKind, row: &str) -> String {
    match (table, row) {
        (TableKind::HalfData | TableKind::Distillation, "Multi-task (iteration)") => "Multi-task".into(),
        _ => row.into(),
    }
}

fn serde_name<T: Serialize>(v: &T) -> String {
    serde_json::to_value(v)
        .ok()
        .and_then(|v| v.as_str().map(str::to_string))
        .unwrap_or_default()
}

fn encoder_label(cfg: &RunConfig) -> String {
    let e = &cfg.model.encoder;
    format!("{}+{}", serde_name(&e.backbone), serde_name(&e.neck))
}

/// Finds every directory below `root` holding `config.resolved` and
/// `eval.json`.
pub fn collect(root: &Path) -> Result<Vec<RunRecord>> {
    let mut out = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        let cfg_path = dir.join("config.resolved");
        let eval_path = dir.join("eval.json");
        if cfg_path.is_file() && eval_path.is_file() {
            let cfg = config::load(&cfg_path)?;
            let ev = read_eval(&eval_path)?;
            let (row, tables) = classify(&cfg);
            out.push(RunRecord {
                dir: dir.clone(),
                tables,
                row,
                encoder: encoder_label(&cfg),
                seed: cfg.train.seed,
                map: ev.map,
                miou: ev.miou,
            });
        }
        let mut children: Vec<PathBuf> = fs::read_dir(&dir)
            .map_err(io_err(&dir))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.is_dir())
            .collect();
        children.sort();
        stack.extend(children.into_iter().rev());
    }
    out.sort_by(|a, b| a.dir.cmp(&b.dir));
    Ok(out)
}

/// Mean, sample standard deviation, and count.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Stat {
    pub mean: f64,
    pub std: f64,
    pub n: usize,
}

pub fn stat(values: &[f64]) -> Option<Stat> {
    if values.is_empty() {
        return None;
    }
    let n = values.len();
    let mean = values.iter().sum::<f64>() / n as f64;
    let var = if n > 1 {
        values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64
    } else {
        0.0
    };
    Some(Stat { mean, std: var.sqrt(), n })
}

/// Cell values keyed by (table, row, encoder).
#[derive(Clone, Debug, Default, Serialize, Deserialize)]
pub struct Tables {
    pub cells: BTreeMap<TableKind, BTreeMap<String, BTreeMap<String, (Option<Stat>, Option<Stat>)>>>,
}

pub fn aggregate(records: &[RunRecord]) -> Tables {
    let mut raw: BTreeMap<(TableKind, String, String), (Vec<f64>, Vec<f64>)> = BTreeMap::new();
    for r in records {
        for &t in &r.tables {
            let e = raw.entry((t, secondary_row(t, &r.row), r.encoder.clone())).or_default();
            e.0.extend(r.map);
            e.1.extend(r.miou);
        }
    }
    let mut tables = Tables::default();
    for ((t, row, enc), (d, s)) in raw {
        tables
            .cells
            .entry(t)
            .or_default()
            .entry(row)
            .or_default()
            .insert(enc, (stat(&d), stat(&s)));
    }
    tables
}

fn fmt_stat(s: &Option<Stat>) -> String {
    match s {
        Some(s) if s.n > 1 => format!("{:.2} ± {:.2} (n={})", s.mean, s.std, s.n),
        Some(s) => format!("{:.2}", s.mean),
        None => "-".into(),
    }
}

/// Markdown tables, rows in the fixed order of each table kind.
pub fn render(tables: &Tables) -> String {
    let mut out = String::new();
    for (&kind, rows) in &tables.cells {
        let mut encoders: Vec<&String> = rows.values().flat_map(|m| m.keys()).collect();
        encoders.sort();
        encoders.dedup();
        let _ = writeln!(out, "## {}\n", kind.title());
        let mut header = String::from("| Training |");
        let mut rule = String::from("|---|");
        for e in &encoders {
            let _ = write!(header, " Det mAP ({e}) | Seg mIoU ({e}) |");
            rule.push_str("---|---|");
        }
        let _ = writeln!(out, "{header}\n{rule}");
        for &label in kind.rows() {
            let Some(cells) = rows.get(label) else { continue };
            let mut line = format!("| {label} |");
            for e in &encoders {
                let (d, s) = cells.get(*e).cloned().unwrap_or((None, None));
                let _ = write!(line, " {} | {} |", fmt_stat(&d), fmt_stat(&s));
            }
            let _ = writeln!(out, "{line}");
        }
        out.push('\n');
    }
    out
}
