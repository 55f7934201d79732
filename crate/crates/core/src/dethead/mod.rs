//! One-stage anchor-based detection head: shared per-level classification
//! and box branches, anchor assignment, focal and balanced L1 losses, and
//! decoding with class-wise NMS.

mod anchors;
mod decode;
mod loss;

pub use anchors::{encode_deltas, generate_anchors, match_anchors, AnchorLabel, AnchorSet, DetTargets, LevelShape};
pub use decode::{decode_detections, nms, rank, read_predictions, write_predictions, Detection, Prediction};
pub use loss::{balanced_l1, balanced_l1_loss, det_loss, focal_loss, BalancedL1, DetLoss};

use mtlab_autograd::Var;
use serde::{Deserialize, Serialize};

use crate::encoder::Pyramid;
use crate::error::{Error, Result};
use crate::nn::{self, Decls, Init};
use crate::params::Session;

pub use crate::geometry::BBox;

/// Intersection over union of two boxes.
pub fn iou(a: &BBox, b: &BBox) -> f64 {
    a.iou(b)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DetHeadConfig {
    pub num_classes: usize,
    pub conv_blocks: usize,
    /// Group norm after each tower convolution.
    pub norm: bool,
    /// Base anchor side as a multiple of the level stride.
    pub anchor_size: f64,
    pub anchor_scales: Vec<f64>,
    /// Height / width ratios.
    pub anchor_ratios: Vec<f64>,
    pub focal_alpha: f64,
    pub focal_gamma: f64,
    pub balanced_l1_alpha: f64,
    pub balanced_l1_gamma: f64,
    pub pos_iou: f64,
    pub neg_iou: f64,
    pub nms_iou: f64,
    pub score_threshold: f64,
    pub max_detections: usize,
    /// Candidates kept per level before NMS.
    pub pre_nms_top_k: usize,
    pub prior_prob: f64,
    pub delta_stds: [f64; 4],
    pub cls_weight: f64,
    pub loc_weight: f64,
}

impl Default for DetHeadConfig {
    fn default() -> Self {
        Self {
            num_classes: 20,
            conv_blocks: 2,
            norm: true,
            anchor_size: 2.0,
            anchor_scales: vec![1.0],
            anchor_ratios: vec![1.0, 0.5, 2.0],
            focal_alpha: 0.25,
            focal_gamma: 2.0,
            balanced_l1_alpha: 0.5,
            balanced_l1_gamma: 1.5,
            pos_iou: 0.5,
            neg_iou: 0.4,
            nms_iou: 0.5,
            score_threshold: 0.05,
            max_detections: 100,
            pre_nms_top_k: 1000,
            prior_prob: 0.01,
            delta_stds: [0.1, 0.1, 0.2, 0.2],
            cls_weight: 1.0,
            loc_weight: 1.0,
        }
    }
}

/// Raw head outputs for one level: `[n, A*K, h, w]` logits and `[n, A*4, h, w]` deltas.
#[derive(Clone, Copy, Debug)]
pub struct LevelOutput {
    pub logits: Var,
    pub deltas: Var,
}

impl DetHeadConfig {
    pub fn anchors_per_location(&self) -> usize {
        self.anchor_scales.len() * self.anchor_ratios.len()
    }

    pub fn balanced_l1(&self) -> BalancedL1 {
        BalancedL1::new(self.balanced_l1_alpha, self.balanced_l1_gamma)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(format!("det_head: {m}")));
        if self.num_classes == 0 {
            return bad("num_classes must be positive");
        }
        if !(0.0 < self.neg_iou && self.neg_iou <= self.pos_iou && self.pos_iou <= 1.0) {
            return bad("need 0 < neg_iou <= pos_iou <= 1");
        }
        if self.anchor_scales.is_empty() || self.anchor_ratios.is_empty() {
            return bad("anchor scales and ratios must be non-empty");
        }
        if self.anchor_scales.iter().chain(&self.anchor_ratios).any(|v| !(*v > 0.0)) || !(self.anchor_size > 0.0) {
            return bad("anchor sizes must be positive");
        }
        if !(0.0 < self.prior_prob && self.prior_prob < 1.0) {
            return bad("prior_prob must lie in (0, 1)");
        }
        if !(self.balanced_l1_alpha > 0.0 && self.balanced_l1_gamma > 0.0) {
            return bad("balanced L1 alpha and gamma must be positive");
        }
        if self.max_detections == 0 {
            return bad("max_detections must be positive");
        }
        Ok(())
    }

    pub fn declare(&self, d: &mut Decls, channels: usize) -> Result<()> {
        self.validate()?;
        let a = self.anchors_per_location();
        let prior = -((1.0 - self.prior_prob) / self.prior_prob).ln();
        for branch in ["cls", "reg"] {
            for i in 0..self.conv_blocks {
                let name = format!("det_head.{branch}.tower{i}");
                if self.norm {
                    d.conv_gn(&name, channels, channels, 3);
                } else {
                    d.conv(&format!("{name}.conv"), channels, channels, 3, true, Init::Normal(0.01));
                }
            }
        }
        d.conv_bias("det_head.cls.out", channels, a * self.num_classes, 3, Init::Normal(0.01), prior);
        d.conv_bias("det_head.reg.out", channels, a * 4, 3, Init::Normal(0.01), 0.0);
        Ok(())
    }

    /// Applies the shared head to every pyramid level.
    pub fn forward(&self, s: &mut Session, pyramid: &Pyramid) -> Result<Vec<LevelOutput>> {
        pyramid
            .levels
            .iter()
            .map(|&x| {
                let logits = self.branch(s, x, "cls")?;
                let deltas = self.branch(s, x, "reg")?;
                Ok(LevelOutput { logits, deltas })
            })
            .collect()
    }

    fn branch(&self, s: &mut Session, x: Var, branch: &str) -> Result<Var> {
        let mut y = x;
        for i in 0..self.conv_blocks {
            let name = format!("det_head.{branch}.tower{i}");
            y = if self.norm {
                nn::conv_gn(s, y, &name, 1, true)?
            } else {
                let c = nn::conv(s, y, &format!("{name}.conv"), 1)?;
                s.graph.relu(c)
            };
        }
        nn::conv(s, y, &format!("det_head.{branch}.out"), 1)
    }
}

/// Shapes of the emitted levels, used to lay out anchors.
pub fn level_shapes(s: &Session, pyramid: &Pyramid) -> Result<Vec<LevelShape>> {
    pyramid
        .levels
        .iter()
        .zip(&pyramid.strides)
        .map(|(&v, &stride)| {
            let (_, _, h, w) = s.graph.value(v).dims4()?;
            Ok(LevelShape { h, w, stride })
        })
        .collect()
}
