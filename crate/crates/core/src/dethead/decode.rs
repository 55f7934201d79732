use std::cmp::Ordering;
use std::fs;
use std::path::Path;

use mtlab_autograd::Tensor;
use serde::{Deserialize, Serialize};

use super::anchors::AnchorSet;
use super::DetHeadConfig;
use crate::error::{invalid, io_err, Error, Result};
use crate::geometry::BBox;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    #[serde(flatten)]
    pub bbox: BBox,
    #[serde(rename = "class")]
    pub class_id: usize,
    pub score: f64,
}

/// Total order used everywhere detections are ranked: higher score first,
/// then lower class, then box coordinates. Independent of input order.
pub fn rank(a: &Detection, b: &Detection) -> Ordering {
    b.score
        .total_cmp(&a.score)
        .then(a.class_id.cmp(&b.class_id))
        .then(a.bbox.x1.total_cmp(&b.bbox.x1))
        .then(a.bbox.y1.total_cmp(&b.bbox.y1))
        .then(a.bbox.x2.total_cmp(&b.bbox.x2))
        .then(a.bbox.y2.total_cmp(&b.bbox.y2))
}

/// Greedy per-class non-maximum suppression. The output is ranked.
pub fn nms(dets: &[Detection], iou_threshold: f64) -> Vec<Detection> {
    let mut sorted = dets.to_vec();
    sorted.sort_by(rank);
    let mut kept: Vec<Detection> = Vec::new();
    for d in sorted {
        if kept
            .iter()
            .all(|k| k.class_id != d.class_id || k.bbox.iou(&d.bbox) <= iou_threshold)
        {
            kept.push(d);
        }
    }
    kept
}

fn apply_deltas(anchor: &BBox, d: [f64; 4], stds: &[f64; 4]) -> BBox {
    let max_log = (1000.0f64 / 16.0).ln();
    let (ax, ay) = anchor.center();
    let (aw, ah) = (anchor.width(), anchor.height());
    let cx = ax + d[0] * stds[0] * aw;
    let cy = ay + d[1] * stds[1] * ah;
    let w = aw * (d[2] * stds[2]).min(max_log).exp();
    let h = ah * (d[3] * stds[3]).min(max_log).exp();
    BBox::from_center(cx, cy, w, h)
}

/// Decodes image `b` of a batch: applies deltas to anchors, clips to the
/// image, drops scores below the threshold, keeps the top candidates per
/// level, runs class-wise NMS, and returns at most `max_detections`.
pub fn decode_detections(
    logits: &[&Tensor],
    deltas: &[&Tensor],
    b: usize,
    anchors: &AnchorSet,
    image_size: (usize, usize),
    config: &DetHeadConfig,
) -> Result<Vec<Detection>> {
    let (img_w, img_h) = (image_size.0 as f64, image_size.1 as f64);
    let k = config.num_classes;
    let a = anchors.per_location;
    let mut candidates = Vec::new();
    for (l, sh) in anchors.shapes.iter().enumerate() {
        let hw = sh.h * sh.w;
        let (lt, dt) = (logits[l], deltas[l]);
        if lt.shape()[1..] != [a * k, sh.h, sh.w] || dt.shape()[1..] != [a * 4, sh.h, sh.w] {
            return Err(invalid(format!("level {l} outputs do not match the anchor layout")));
        }
        let mut level = Vec::new();
        for pos in 0..hw {
            for ai in 0..a {
                let anchor = &anchors.boxes[anchors.offsets[l] + pos * a + ai];
                let mut decoded = None;
                for c in 0..k {
                    let x = lt.data()[((b * a * k) + ai * k + c) * hw + pos];
                    let score = 1.0 / (1.0 + (-x).exp());
                    if !(score >= config.score_threshold) {
                        continue;
                    }
                    let bbox = *decoded.get_or_insert_with(|| {
                        let d: [f64; 4] =
                            std::array::from_fn(|j| dt.data()[((b * a * 4) + ai * 4 + j) * hw + pos]);
                        apply_deltas(anchor, d, &config.delta_stds).clip(img_w, img_h)
                    });
                    if bbox.is_valid() {
                        level.push(Detection {
                            bbox,
                            class_id: c,
                            score,
                        });
                    }
                }
            }
        }
        level.sort_by(rank);
        level.truncate(config.pre_nms_top_k);
        candidates.extend(level);
    }
    let mut kept = nms(&candidates, config.nms_iou);
    kept.truncate(config.max_detections);
    Ok(kept)
}

/// One row of the prediction dump.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Prediction {
    pub image_id: String,
    pub x1: f64,
    pub y1: f64,
    pub x2: f64,
    pub y2: f64,
    #[serde(rename = "class")]
    pub class_id: usize,
    pub score: f64,
}

impl Prediction {
    pub fn new(image_id: &str, d: &Detection) -> Self {
        Self {
            image_id: image_id.to_string(),
            x1: d.bbox.x1,
            y1: d.bbox.y1,
            x2: d.bbox.x2,
            y2: d.bbox.y2,
            class_id: d.class_id,
            score: d.score,
        }
    }

    pub fn detection(&self) -> Detection {
        Detection {
            bbox: BBox::new(self.x1, self.y1, self.x2, self.y2),
            class_id: self.class_id,
            score: self.score,
        }
    }
}

/// Writes predictions sorted by `(image_id, -score)`.
pub fn write_predictions(path: &Path, preds: &[Prediction]) -> Result<()> {
    let mut rows = preds.to_vec();
    rows.sort_by(|a, b| {
        a.image_id
            .cmp(&b.image_id)
            .then_with(|| rank(&a.detection(), &b.detection()))
    });
    let text = serde_json::to_string_pretty(&rows)?;
    fs::write(path, text + "\n").map_err(io_err(path))
}

pub fn read_predictions(path: &Path) -> Result<Vec<Prediction>> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    let rows: Vec<Prediction> = serde_json::from_str(&text).map_err(|e| Error::Format {
        path: path.to_path_buf(),
        detail: e.to_string(),
    })?;
    if let Some((i, p)) = rows
        .iter()
        .enumerate()
        .find(|(_, p)| !(p.x1 < p.x2 && p.y1 < p.y2) || !p.score.is_finite())
    {
        return Err(Error::Format {
            path: path.to_path_buf(),
            detail: format!("record {i} (image {}) has an invalid box or score", p.image_id),
        });
    }
    Ok(rows)
}
