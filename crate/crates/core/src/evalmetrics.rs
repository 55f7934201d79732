//! Detection AP over IoU thresholds 0.50:0.05:0.95 and segmentation mIoU
//! from a global confusion matrix. All APs are on a 0-100 scale.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::dataio::{GtBox, Mask};
use crate::dethead::{rank, Detection};
use crate::error::{invalid, io_err, Result};

/// The ten IoU thresholds averaged by mAP.
pub const MAP_THRESHOLDS: [f64; 10] = [0.50, 0.55, 0.60, 0.65, 0.70, 0.75, 0.80, 0.85, 0.90, 0.95];

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Interpolation {
    /// Area under the monotone precision envelope at every recall change.
    #[default]
    AllPoints,
    /// Mean of the envelope at recall 0, 0.1, ..., 1.
    ElevenPoint,
}

/// AP from true/false-positive flags in rank order and the gt count.
/// `None` when there are no ground truths.
pub fn average_precision(tp: &[bool], num_gt: usize, interp: Interpolation) -> Option<f64> {
    if num_gt == 0 {
        return None;
    }
    let mut recall = Vec::with_capacity(tp.len());
    let mut precision = Vec::with_capacity(tp.len());
    let mut hits = 0usize;
    for (i, &t) in tp.iter().enumerate() {
        hits += usize::from(t);
        recall.push(hits as f64 / num_gt as f64);
        precision.push(hits as f64 / (i + 1) as f64);
    }
    let ap = match interp {
        Interpolation::AllPoints => {
            let mut mrec = vec![0.0];
            mrec.extend(&recall);
            mrec.push(1.0);
            let mut mpre = vec![0.0];
            mpre.extend(&precision);
            mpre.push(0.0);
            for i in (0..mpre.len() - 1).rev() {
                mpre[i] = mpre[i].max(mpre[i + 1]);
            }
            (1..mrec.len())
                .filter(|&i| mrec[i] != mrec[i - 1])
                .map(|i| (mrec[i] - mrec[i - 1]) * mpre[i])
                .sum()
        }
        Interpolation::ElevenPoint => {
            (0..=10)
                .map(|t| {
                    let r = t as f64 / 10.0;
                    recall
                        .iter()
                        .zip(&precision)
                        .filter(|(rc, _)| **rc >= r)
                        .map(|(_, p)| *p)
                        .fold(0.0, f64::max)
                })
                .sum::<f64>()
                / 11.0
        }
    };
    Some(100.0 * ap)
}

/// Detections of one class across images in evaluation order: by rank,
/// then image index.
pub(crate) fn ranked_class_detections(dets: &[Vec<Detection>], class: usize) -> Vec<(usize, Detection)> {
    let mut out: Vec<(usize, Detection)> = dets
        .iter()
        .enumerate()
        .flat_map(|(i, ds)| ds.iter().filter(|d| d.class_id == class).map(move |d| (i, *d)))
        .collect();
    out.sort_by(|a, b| rank(&a.1, &b.1).then(a.0.cmp(&b.0)));
    out
}

/// Index of the unmatched same-class gt with the highest IoU at or above
/// `threshold`; ties go to the lower gt index.
pub(crate) fn best_unmatched(det: &Detection, gts: &[GtBox], used: &[bool], threshold: f64) -> Option<usize> {
    let mut best: Option<(f64, usize)> = None;
    for (g, gt) in gts.iter().enumerate() {
        if gt.class_id != det.class_id || used[g] {
            continue;
        }
        let v = det.bbox.iou(&gt.bbox);
        if v >= threshold && best.is_none_or(|(bv, _)| v > bv) {
            best = Some((v, g));
        }
    }
    best.map(|(_, g)| g)
}

fn check_inputs(dets: &[Vec<Detection>], gts: &[Vec<GtBox>]) -> Result<()> {
    if dets.len() != gts.len() {
        return Err(invalid(format!(
            "{} detection lists for {} ground-truth images",
            dets.len(),
            gts.len()
        )));
    }
    Ok(())
}

/// AP of `class` at `iou_threshold`. `dets[i]` and `gts[i]` belong to image
/// `i`. `None` when the class has no ground truth.
pub fn compute_ap(
    dets: &[Vec<Detection>],
    gts: &[Vec<GtBox>],
    class: usize,
    iou_threshold: f64,
    interp: Interpolation,
) -> Result<Option<f64>> {
    if !(iou_threshold > 0.0 && iou_threshold <= 1.0) {
        return Err(invalid(format!("IoU threshold {iou_threshold} outside (0, 1]")));
    }
    check_inputs(dets, gts)?;
    let num_gt = gts.iter().flatten().filter(|g| g.class_id == class).count();
    let mut used: Vec<Vec<bool>> = gts.iter().map(|g| vec![false; g.len()]).collect();
    let tp: Vec<bool> = ranked_class_detections(dets, class)
        .into_iter()
        .map(|(img, d)| match best_unmatched(&d, &gts[img], &used[img], iou_threshold) {
            Some(g) => {
                used[img][g] = true;
                true
            }
            None => false,
        })
        .collect();
    Ok(average_precision(&tp, num_gt, interp))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ApResult {
    pub thresholds: Vec<f64>,
    /// `per_class[c][t]`; `None` for classes without ground truth.
    pub per_class: Vec<Vec<Option<f64>>>,
    /// Class-mean AP per threshold.
    pub per_threshold: Vec<f64>,
    pub ap50: f64,
    pub ap75: f64,
    pub map: f64,
}

fn mean_defined(values: impl Iterator<Item = Option<f64>>) -> f64 {
    let v: Vec<f64> = values.flatten().collect();
    if v.is_empty() {
        0.0
    } else {
        v.iter().sum::<f64>() / v.len() as f64
    }
}

/// AP at every threshold, class means per threshold, and their mean.
/// Classes without ground truth are excluded from the class mean.
pub fn compute_map(
    dets: &[Vec<Detection>],
    gts: &[Vec<GtBox>],
    num_classes: usize,
    interp: Interpolation,
) -> Result<ApResult> {
    let per_class = (0..num_classes)
        .map(|c| {
            MAP_THRESHOLDS
                .iter()
                .map(|&t| compute_ap(dets, gts, c, t, interp))
                .collect::<Result<Vec<_>>>()
        })
        .collect::<Result<Vec<_>>>()?;
    let per_threshold: Vec<f64> = (0..MAP_THRESHOLDS.len())
        .map(|t| mean_defined(per_class.iter().map(|row| row[t])))
        .collect();
    Ok(ApResult {
        thresholds: MAP_THRESHOLDS.to_vec(),
        ap50: per_threshold[0],
        ap75: per_threshold[5],
        map: per_threshold.iter().sum::<f64>() / per_threshold.len() as f64,
        per_class,
        per_threshold,
    })
}

/// Class-mean AP at a single threshold.
pub fn compute_ap_at(
    dets: &[Vec<Detection>],
    gts: &[Vec<GtBox>],
    num_classes: usize,
    iou_threshold: f64,
) -> Result<f64> {
    let aps = (0..num_classes)
        .map(|c| compute_ap(dets, gts, c, iou_threshold, Interpolation::AllPoints))
        .collect::<Result<Vec<_>>>()?;
    Ok(mean_defined(aps.into_iter()))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IouResult {
    pub intersection: Vec<u64>,
    pub union: Vec<u64>,
    /// Percent; `None` where the union is empty.
    pub per_class: Vec<Option<f64>>,
    pub miou: f64,
}

/// Global intersection and union counts over all pixel pairs, skipping
/// pixels whose ground truth is `ignore_label`.
pub fn compute_miou(preds: &[&Mask], gts: &[&Mask], num_classes: usize, ignore_label: u8) -> Result<IouResult> {
    if preds.len() != gts.len() {
        return Err(invalid(format!("{} predicted masks for {} ground truths", preds.len(), gts.len())));
    }
    let mut conf = vec![0u64; num_classes * num_classes];
    for (i, (p, g)) in preds.iter().zip(gts).enumerate() {
        if (p.width, p.height) != (g.width, g.height) {
            return Err(invalid(format!(
                "mask pair {i}: prediction {}x{} vs ground truth {}x{}",
                p.width, p.height, g.width, g.height
            )));
        }
        for (&pv, &gv) in p.data.iter().zip(&g.data) {
            if gv == ignore_label {
                continue;
            }
            let (pv, gv) = (usize::from(pv), usize::from(gv));
            if pv >= num_classes || gv >= num_classes {
                return Err(invalid(format!("mask pair {i}: label outside {num_classes} classes")));
            }
            conf[gv * num_classes + pv] += 1;
        }
    }
    let mut intersection = vec![0u64; num_classes];
    let mut union = vec![0u64; num_classes];
    for c in 0..num_classes {
        let tp = conf[c * num_classes + c];
        let gt_total: u64 = (0..num_classes).map(|p| conf[c * num_classes + p]).sum();
        let pred_total: u64 = (0..num_classes).map(|g| conf[g * num_classes + c]).sum();
        intersection[c] = tp;
        union[c] = gt_total + pred_total - tp;
    }
    let per_class: Vec<Option<f64>> = intersection
        .iter()
        .zip(&union)
        .map(|(&i, &u)| (u > 0).then(|| 100.0 * i as f64 / u as f64))
        .collect();
    Ok(IouResult {
        miou: mean_defined(per_class.iter().copied()),
        intersection,
        union,
        per_class,
    })
}

/// Contents of `eval.json`.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub map: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ap50: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ap75: Option<f64>,
    /// Class name -> threshold label -> AP.
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub ap_per_class: BTreeMap<String, BTreeMap<String, f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub miou: Option<f64>,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub iou_per_class: BTreeMap<String, f64>,
}

impl EvalReport {
    pub fn with_detection(mut self, r: &ApResult, class_names: &[String]) -> Self {
        self.map = Some(r.map);
        self.ap50 = Some(r.ap50);
        self.ap75 = Some(r.ap75);
        for (c, row) in r.per_class.iter().enumerate() {
            let name = class_names.get(c).cloned().unwrap_or_else(|| format!("class{c}"));
            let entry: BTreeMap<String, f64> = r
                .thresholds
                .iter()
                .zip(row)
                .filter_map(|(t, v)| v.map(|v| (format!("{t:.2}"), v)))
                .collect();
            if !entry.is_empty() {
                self.ap_per_class.insert(name, entry);
            }
        }
        self
    }

    pub fn with_segmentation(mut self, r: &IouResult, class_names: &[String]) -> Self {
        self.miou = Some(r.miou);
        for (c, v) in r.per_class.iter().enumerate() {
            if let Some(v) = v {
                let name = class_names.get(c).cloned().unwrap_or_else(|| format!("class{c}"));
                self.iou_per_class.insert(name, *v);
            }
        }
        self
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self)?;
        std::fs::write(path, text + "\n").map_err(io_err(path))
    }
}
