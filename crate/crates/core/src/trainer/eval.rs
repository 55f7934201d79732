//! Validation: decoded detections, predicted masks, and the metric report.

use serde::{Deserialize, Serialize};

use crate::dataio::{Dataset, GtBox, Mask};
use crate::dethead::{decode_detections, Detection};
use crate::error::{invalid, Result};
use crate::evalmetrics::{compute_map, compute_miou, ApResult, EvalReport, Interpolation, IouResult};
use crate::model::{pad_batch, ModelConfig};
use crate::params::{ParamSet, Session};
use crate::seghead::predict_mask;

/// Predictions for every sample of a dataset, in dataset order.
#[derive(Clone, Debug, Default)]
pub struct Predictions {
    pub ids: Vec<String>,
    pub detections: Option<Vec<Vec<Detection>>>,
    pub masks: Option<Vec<Mask>>,
}

/// Runs the model without gradients over `data` in batches.
pub fn predict(model: &ModelConfig, params: &ParamSet, data: &Dataset, batch_size: usize) -> Result<Predictions> {
    if batch_size == 0 {
        return Err(invalid("batch size must be positive"));
    }
    let det = model.det_head.is_some();
    let seg = model.seg_head.is_some();
    let mut out = Predictions {
        ids: data.ids(),
        detections: det.then(Vec::new),
        masks: seg.then(Vec::new),
    };
    for chunk in data.samples.chunks(batch_size) {
        let refs: Vec<_> = chunk.iter().collect();
        let batch = pad_batch(&refs)?;
        let mut s = Session::inference(params);
        let images = s.input(batch.images);
        let o = model.forward(&mut s, images, det, seg)?;
        if let (Some(levels), Some(anchors), Some(cfg), Some(dets)) =
            (&o.det, &o.anchors, &model.det_head, out.detections.as_mut())
        {
            let logits: Vec<_> = levels.iter().map(|l| s.graph.value(l.logits)).collect();
            let deltas: Vec<_> = levels.iter().map(|l| s.graph.value(l.deltas)).collect();
            for (b, &size) in batch.sizes.iter().enumerate() {
                dets.push(decode_detections(&logits, &deltas, b, anchors, size, cfg)?);
            }
        }
        if let (Some(v), Some(masks)) = (o.seg, out.masks.as_mut()) {
            let logits = s.graph.value(v);
            for (b, &(w, h)) in batch.sizes.iter().enumerate() {
                let full = predict_mask(logits, b)?;
                let mut m = Mask::new(w, h);
                for y in 0..h {
                    m.data[y * w..(y + 1) * w].copy_from_slice(&full.data[y * full.width..y * full.width + w]);
                }
                masks.push(m);
            }
        }
    }
    Ok(out)
}

/// Headline validation numbers.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EvalSummary {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub map: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ap50: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub miou: Option<f64>,
}

impl EvalSummary {
    /// Mean of the available mAP and mIoU, used to pick the best epoch.
    pub fn score(&self) -> Option<f64> {
        let v: Vec<f64> = [self.map, self.miou].into_iter().flatten().collect();
        (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
    }
}

#[derive(Clone, Debug)]
pub struct Evaluation {
    pub summary: EvalSummary,
    pub report: EvalReport,
    pub detection: Option<ApResult>,
    pub segmentation: Option<IouResult>,
    pub predictions: Predictions,
}

/// Detection metrics over samples carrying boxes, segmentation metrics over
/// samples carrying masks.
pub fn evaluate(model: &ModelConfig, params: &ParamSet, data: &Dataset, batch_size: usize) -> Result<Evaluation> {
    let predictions = predict(model, params, data, batch_size)?;
    let mut report = EvalReport::default();
    let mut summary = EvalSummary::default();
    let mut detection = None;
    let mut segmentation = None;
    if let (Some(dets), Some(cfg)) = (&predictions.detections, &model.det_head) {
        let (d, g): (Vec<Vec<Detection>>, Vec<Vec<GtBox>>) = data
            .samples
            .iter()
            .zip(dets)
            .filter_map(|(s, d)| s.boxes.as_ref().map(|b| (d.clone(), b.clone())))
            .unzip();
        if !g.is_empty() {
            let r = compute_map(&d, &g, cfg.num_classes, Interpolation::AllPoints)?;
            summary.map = Some(r.map);
            summary.ap50 = Some(r.ap50);
            report = report.with_detection(&r, &data.classes.det);
            detection = Some(r);
        }
    }
    if let (Some(masks), Some(cfg)) = (&predictions.masks, &model.seg_head) {
        let (p, g): (Vec<&Mask>, Vec<&Mask>) = data
            .samples
            .iter()
            .zip(masks)
            .filter_map(|(s, m)| s.mask.as_ref().map(|gt| (m, gt)))
            .unzip();
        if !g.is_empty() {
            let r = compute_miou(&p, &g, cfg.num_classes, cfg.ignore_label)?;
            summary.miou = Some(r.miou);
            report = report.with_segmentation(&r, &data.classes.seg);
            segmentation = Some(r);
        }
    }
    Ok(Evaluation {
        summary,
        report,
        detection,
        segmentation,
        predictions,
    })
}
