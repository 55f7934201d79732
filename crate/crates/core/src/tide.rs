//! Six-way detection error attribution at AP50: each false positive is a
//! Cls, Loc, Both, Dupe, or Bkg error and unexplained missed ground truths
//! are Miss errors. Each type is scored by the AP50 gained when only that
//! type is fixed.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::dataio::GtBox;
use crate::dethead::{rank, Detection};
use crate::error::{invalid, io_err, Error, Result};
use crate::evalmetrics::{best_unmatched, compute_ap_at};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TideConfig {
    /// Foreground IoU: matches and Cls/Dupe decisions.
    pub fg: f64,
    /// Background IoU: below it a detection overlaps nothing.
    pub bg: f64,
}

impl Default for TideConfig {
    fn default() -> Self {
        Self { fg: 0.5, bg: 0.1 }
    }
}

impl TideConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0 < self.bg && self.bg < self.fg && self.fg <= 1.0) {
            return Err(invalid(format!("need 0 < bg < fg <= 1, got bg {} fg {}", self.bg, self.fg)));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum ErrorLabel {
    Cls,
    Loc,
    Both,
    Dupe,
    Bkg,
    Miss,
}

impl ErrorLabel {
    pub const ALL: [ErrorLabel; 6] = [
        ErrorLabel::Cls,
        ErrorLabel::Loc,
        ErrorLabel::Both,
        ErrorLabel::Dupe,
        ErrorLabel::Bkg,
        ErrorLabel::Miss,
    ];
}

/// Per-detection outcome: `None` for a true positive.
#[derive(Clone, Debug, PartialEq)]
pub struct Classification {
    pub labels: Vec<Vec<Option<ErrorLabel>>>,
    /// Matched gt of a true positive, or the gt a Cls/Loc fix would claim.
    pub target: Vec<Vec<Option<usize>>>,
    /// Ground truths left unmatched by the base matching.
    pub unmatched: Vec<Vec<bool>>,
    /// Unmatched ground truths not explained by any Cls or Loc error.
    pub missed: Vec<Vec<bool>>,
}

impl Classification {
    pub fn count(&self, label: ErrorLabel) -> usize {
        if label == ErrorLabel::Miss {
            return self.missed.iter().flatten().filter(|m| **m).count();
        }
        self.labels.iter().flatten().filter(|l| **l == Some(label)).count()
    }

    pub fn false_positives(&self) -> usize {
        self.labels.iter().flatten().filter(|l| l.is_some()).count()
    }

    pub fn true_positives(&self) -> usize {
        self.labels.iter().flatten().filter(|l| l.is_none()).count()
    }
}

fn check(dets: &[Vec<Detection>], gts: &[Vec<GtBox>], config: &TideConfig) -> Result<()> {
    config.validate()?;
    if dets.len() != gts.len() {
        return Err(invalid(format!("{} detection lists for {} images", dets.len(), gts.len())));
    }
    Ok(())
}

/// Greedy matching at the foreground threshold, then the error rules in
/// order Loc, Cls, Dupe, Bkg, with Both as the remaining case.
pub fn classify_errors(dets: &[Vec<Detection>], gts: &[Vec<GtBox>], config: &TideConfig) -> Result<Classification> {
    check(dets, gts, config)?;
    let mut used: Vec<Vec<bool>> = gts.iter().map(|g| vec![false; g.len()]).collect();
    let mut target: Vec<Vec<Option<usize>>> = dets.iter().map(|d| vec![None; d.len()]).collect();
    let mut is_tp: Vec<Vec<bool>> = dets.iter().map(|d| vec![false; d.len()]).collect();
    for (img, ds) in dets.iter().enumerate() {
        let mut order: Vec<usize> = (0..ds.len()).collect();
        order.sort_by(|&a, &b| rank(&ds[a], &ds[b]).then(a.cmp(&b)));
        for j in order {
            if let Some(g) = best_unmatched(&ds[j], &gts[img], &used[img], config.fg) {
                used[img][g] = true;
                target[img][j] = Some(g);
                is_tp[img][j] = true;
            }
        }
    }
    let mut labels: Vec<Vec<Option<ErrorLabel>>> = dets.iter().map(|d| vec![None; d.len()]).collect();
    let mut explained: Vec<Vec<bool>> = gts.iter().map(|g| vec![false; g.len()]).collect();
    for (img, ds) in dets.iter().enumerate() {
        for (j, d) in ds.iter().enumerate() {
            if is_tp[img][j] {
                continue;
            }
            let mut same = (0.0, None);
            let mut diff = (0.0, None);
            for (g, gt) in gts[img].iter().enumerate() {
                let v = d.bbox.iou(&gt.bbox);
                let slot = if gt.class_id == d.class_id { &mut same } else { &mut diff };
                if slot.1.is_none() || v > slot.0 {
                    *slot = (v, Some(g));
                }
            }
            let label = if same.1.is_some() && same.0 >= config.bg && same.0 < config.fg {
                target[img][j] = same.1;
                ErrorLabel::Loc
            } else if diff.1.is_some() && diff.0 >= config.fg {
                target[img][j] = diff.1;
                ErrorLabel::Cls
            } else if same.1.is_some() && same.0 >= config.fg {
                ErrorLabel::Dupe
            } else if same.0.max(diff.0) < config.bg {
                ErrorLabel::Bkg
            } else {
                ErrorLabel::Both
            };
            if matches!(label, ErrorLabel::Loc | ErrorLabel::Cls) {
                if let Some(g) = target[img][j] {
                    explained[img][g] = true;
                }
            }
            labels[img][j] = Some(label);
        }
    }
    let unmatched: Vec<Vec<bool>> = used.iter().map(|u| u.iter().map(|x| !x).collect()).collect();
    let missed = unmatched
        .iter()
        .zip(&explained)
        .map(|(u, e)| u.iter().zip(e).map(|(u, e)| *u && !e).collect())
        .collect();
    Ok(Classification {
        labels,
        target,
        unmatched,
        missed,
    })
}

/// Oracle fixes: the corrected detections and ground truths.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Fix {
    Error(ErrorLabel),
    /// Delete every false positive.
    AllFalsePositives,
    /// Drop every unmatched ground truth.
    AllFalseNegatives,
}

/// Applies one oracle fix. Cls and Loc fixes claim their gt in rank order;
/// a fix whose gt is already claimed deletes the detection instead.
pub fn apply_fix(
    dets: &[Vec<Detection>],
    gts: &[Vec<GtBox>],
    cls: &Classification,
    fix: Fix,
) -> (Vec<Vec<Detection>>, Vec<Vec<GtBox>>) {
    let mut out_dets = Vec::with_capacity(dets.len());
    let mut out_gts = Vec::with_capacity(gts.len());
    for (img, ds) in dets.iter().enumerate() {
        let labels = &cls.labels[img];
        let gt = &gts[img];
        let drop_gt: Vec<bool> = match fix {
            Fix::Error(ErrorLabel::Miss) => cls.missed[img].clone(),
            Fix::AllFalseNegatives => cls.unmatched[img].clone(),
            _ => vec![false; gt.len()],
        };
        out_gts.push(gt.iter().zip(&drop_gt).filter(|(_, d)| !**d).map(|(g, _)| *g).collect());
        let mut claimed: Vec<bool> = cls.unmatched[img].iter().map(|u| !u).collect();
        let mut order: Vec<usize> = (0..ds.len()).collect();
        order.sort_by(|&a, &b| rank(&ds[a], &ds[b]).then(a.cmp(&b)));
        let mut keep: Vec<Option<Detection>> = ds.iter().copied().map(Some).collect();
        for j in order {
            let label = labels[j];
            match (fix, label) {
                (_, None) => {}
                (Fix::AllFalsePositives, Some(_)) => keep[j] = None,
                (Fix::Error(f @ (ErrorLabel::Cls | ErrorLabel::Loc)), Some(l)) if f == l => {
                    let g = cls.target[img][j].expect("Cls and Loc errors carry a target");
                    if claimed[g] {
                        keep[j] = None;
                    } else {
                        claimed[g] = true;
                        let d = keep[j].as_mut().expect("not yet removed");
                        if f == ErrorLabel::Cls {
                            d.class_id = gt[g].class_id;
                        } else {
                            d.bbox = gt[g].bbox;
                        }
                    }
                }
                (Fix::Error(f @ (ErrorLabel::Both | ErrorLabel::Dupe | ErrorLabel::Bkg)), Some(l)) if f == l => {
                    keep[j] = None
                }
                _ => {}
            }
        }
        out_dets.push(keep.into_iter().flatten().collect());
    }
    (out_dets, out_gts)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TideRow {
    #[serde(rename = "AP50")]
    pub ap50: f64,
    #[serde(rename = "Cls")]
    pub cls: f64,
    #[serde(rename = "Loc")]
    pub loc: f64,
    #[serde(rename = "Both")]
    pub both: f64,
    #[serde(rename = "Dupe")]
    pub dupe: f64,
    #[serde(rename = "Bkg")]
    pub bkg: f64,
    #[serde(rename = "Miss")]
    pub miss: f64,
    #[serde(rename = "FP")]
    pub fp: f64,
    #[serde(rename = "FN")]
    pub fn_: f64,
}

pub const TIDE_COLUMNS: [&str; 9] = ["AP50", "Cls", "Loc", "Both", "Dupe", "Bkg", "Miss", "FP", "FN"];

impl TideRow {
    pub fn values(&self) -> [f64; 9] {
        [
            self.ap50, self.cls, self.loc, self.both, self.dupe, self.bkg, self.miss, self.fp, self.fn_,
        ]
    }

    pub fn from_values(v: [f64; 9]) -> Self {
        Self {
            ap50: v[0],
            cls: v[1],
            loc: v[2],
            both: v[3],
            dupe: v[4],
            bkg: v[5],
            miss: v[6],
            fp: v[7],
            fn_: v[8],
        }
    }

    pub fn delta(&self, label: ErrorLabel) -> f64 {
        match label {
            ErrorLabel::Cls => self.cls,
            ErrorLabel::Loc => self.loc,
            ErrorLabel::Both => self.both,
            ErrorLabel::Dupe => self.dupe,
            ErrorLabel::Bkg => self.bkg,
            ErrorLabel::Miss => self.miss,
        }
    }
}

/// Raw error counts, logged for debugging next to the AP deltas.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct TideCounts {
    pub tp: usize,
    pub cls: usize,
    pub loc: usize,
    pub both: usize,
    pub dupe: usize,
    pub bkg: usize,
    pub miss: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TideReport {
    pub config: TideConfig,
    /// Base AP50 followed by the AP50 gained by each fix.
    pub deltas: TideRow,
    pub counts: TideCounts,
    /// Digest of the ground-truth set; reports are comparable only when equal.
    pub gt_digest: String,
}

pub fn gt_digest(gts: &[Vec<GtBox>]) -> String {
    let mut h = Sha256::new();
    for (img, gs) in gts.iter().enumerate() {
        h.update((img as u64).to_le_bytes());
        h.update((gs.len() as u64).to_le_bytes());
        for g in gs {
            h.update((g.class_id as u64).to_le_bytes());
            for v in [g.bbox.x1, g.bbox.y1, g.bbox.x2, g.bbox.y2] {
                h.update(v.to_le_bytes());
            }
        }
    }
    format!("{:x}", h.finalize())
}

/// Base AP50 and the isolated AP50 gain of each oracle fix.
pub fn tide_deltas(
    dets: &[Vec<Detection>],
    gts: &[Vec<GtBox>],
    num_classes: usize,
    config: &TideConfig,
) -> Result<TideReport> {
    let cls = classify_errors(dets, gts, config)?;
    let base = compute_ap_at(dets, gts, num_classes, config.fg)?;
    let gain = |fix: Fix| -> Result<f64> {
        let (d, g) = apply_fix(dets, gts, &cls, fix);
        Ok(compute_ap_at(&d, &g, num_classes, config.fg)? - base)
    };
    let mut v = [0.0; 9];
    v[0] = base;
    for (i, label) in ErrorLabel::ALL.into_iter().enumerate() {
        v[i + 1] = gain(Fix::Error(label))?;
    }
    v[7] = gain(Fix::AllFalsePositives)?;
    v[8] = gain(Fix::AllFalseNegatives)?;
    Ok(TideReport {
        config: *config,
        deltas: TideRow::from_values(v),
        counts: TideCounts {
            tp: cls.true_positives(),
            cls: cls.count(ErrorLabel::Cls),
            loc: cls.count(ErrorLabel::Loc),
            both: cls.count(ErrorLabel::Both),
            dupe: cls.count(ErrorLabel::Dupe),
            bkg: cls.count(ErrorLabel::Bkg),
            miss: cls.count(ErrorLabel::Miss),
            fp: cls.false_positives(),
            fn_: cls.unmatched.iter().flatten().filter(|u| **u).count(),
        },
        gt_digest: gt_digest(gts),
    })
}

/// Rows `A`, `B`, and `Δ = B - A` over the TIDE columns.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TideComparison {
    pub a: TideRow,
    pub b: TideRow,
    pub delta: TideRow,
}

pub fn compare_reports(a: &TideReport, b: &TideReport) -> Result<TideComparison> {
    if a.gt_digest != b.gt_digest {
        return Err(invalid("TIDE reports were computed on different ground-truth sets"));
    }
    let (va, vb) = (a.deltas.values(), b.deltas.values());
    Ok(TideComparison {
        a: a.deltas,
        b: b.deltas,
        delta: TideRow::from_values(std::array::from_fn(|i| vb[i] - va[i])),
    })
}

/// Plain-text table with one labeled row per entry.
pub fn format_table(rows: &[(&str, &TideRow)]) -> String {
    let width = rows.iter().map(|(n, _)| n.chars().count()).max().unwrap_or(0).max(6);
    let mut out = format!("{:width$}", "");
    for c in TIDE_COLUMNS {
        let _ = write!(out, " {c:>7}");
    }
    out.push('\n');
    for (name, row) in rows {
        let _ = write!(out, "{name:width$}");
        for v in row.values() {
            let _ = write!(out, " {v:>7.2}");
        }
        out.push('\n');
    }
    out
}

impl TideReport {
    pub fn write(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self)?;
        std::fs::write(path, text + "\n").map_err(io_err(path))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(io_err(path))?;
        serde_json::from_str(&text).map_err(|e| Error::Format {
            path: path.to_path_buf(),
            detail: e.to_string(),
        })
    }
}
