use crate::geometry::BBox;

use super::DetHeadConfig;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct LevelShape {
    pub h: usize,
    pub w: usize,
    pub stride: usize,
}

/// Anchors of all levels, flattened level by level in `(y, x, a)` order,
/// which is the channel layout of the head outputs.
#[derive(Clone, Debug, PartialEq)]
pub struct AnchorSet {
    pub boxes: Vec<BBox>,
    /// Start index of each level in `boxes`.
    pub offsets: Vec<usize>,
    pub shapes: Vec<LevelShape>,
    pub per_location: usize,
}

impl AnchorSet {
    pub fn len(&self) -> usize {
        self.boxes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.boxes.is_empty()
    }

    /// Anchors of level `l`.
    pub fn level(&self, l: usize) -> &[BBox] {
        let end = self.offsets.get(l + 1).copied().unwrap_or(self.boxes.len());
        &self.boxes[self.offsets[l]..end]
    }
}

/// Centers at `(stride/2 + stride*x, stride/2 + stride*y)`; for each scale
/// and ratio the anchor has area `(anchor_size * stride * scale)^2` and
/// height/width equal to the ratio.
pub fn generate_anchors(shapes: &[LevelShape], config: &DetHeadConfig) -> AnchorSet {
    let mut boxes = Vec::new();
    let mut offsets = Vec::with_capacity(shapes.len());
    for sh in shapes {
        offsets.push(boxes.len());
        let s = sh.stride as f64;
        let mut templates = Vec::with_capacity(config.anchors_per_location());
        for &scale in &config.anchor_scales {
            for &ratio in &config.anchor_ratios {
                let side = config.anchor_size * s * scale;
                let w = side / ratio.sqrt();
                let h = side * ratio.sqrt();
                templates.push((w, h));
            }
        }
        for y in 0..sh.h {
            for x in 0..sh.w {
                let (cx, cy) = (s / 2.0 + s * x as f64, s / 2.0 + s * y as f64);
                for &(w, h) in &templates {
                    boxes.push(BBox::from_center(cx, cy, w, h));
                }
            }
        }
    }
    AnchorSet {
        boxes,
        offsets,
        shapes: shapes.to_vec(),
        per_location: config.anchors_per_location(),
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AnchorLabel {
    Positive(usize),
    Negative,
    Ignore,
}

/// Per-anchor assignment. `deltas[i]` and `matched[i]` are meaningful only
/// for positive anchors.
#[derive(Clone, Debug, PartialEq)]
pub struct DetTargets {
    pub labels: Vec<AnchorLabel>,
    pub deltas: Vec<[f64; 4]>,
    pub matched: Vec<Option<usize>>,
}

impl DetTargets {
    pub fn num_positive(&self) -> usize {
        self.labels.iter().filter(|l| matches!(l, AnchorLabel::Positive(_))).count()
    }
}

/// Normalized center/size offsets taking `anchor` to `gt`.
pub fn encode_deltas(anchor: &BBox, gt: &BBox, stds: &[f64; 4]) -> [f64; 4] {
    let (ax, ay) = anchor.center();
    let (gx, gy) = gt.center();
    let (aw, ah) = (anchor.width(), anchor.height());
    [
        (gx - ax) / aw / stds[0],
        (gy - ay) / ah / stds[1],
        (gt.width() / aw).ln() / stds[2],
        (gt.height() / ah).ln() / stds[3],
    ]
}

/// Max-IoU assignment with a force-match so each gt claims its best anchor.
pub fn match_anchors(anchors: &AnchorSet, gts: &[(BBox, usize)], config: &DetHeadConfig) -> DetTargets {
    let n = anchors.len();
    let mut labels = vec![AnchorLabel::Negative; n];
    let mut matched: Vec<Option<usize>> = vec![None; n];
    if !gts.is_empty() {
        // best[g] = (iou, anchor) with ties to the lowest anchor index.
        let mut best: Vec<(f64, usize)> = vec![(f64::NEG_INFINITY, 0); gts.len()];
        for (i, a) in anchors.boxes.iter().enumerate() {
            let mut top = (f64::NEG_INFINITY, 0usize);
            for (g, (gt, _)) in gts.iter().enumerate() {
                let v = a.iou(gt);
                if v > top.0 {
                    top = (v, g);
                }
                if v > best[g].0 {
                    best[g] = (v, i);
                }
            }
            let (v, g) = top;
            if v >= config.pos_iou {
                labels[i] = AnchorLabel::Positive(gts[g].1);
                matched[i] = Some(g);
            } else if v >= config.neg_iou {
                labels[i] = AnchorLabel::Ignore;
            }
        }
        if n > 0 {
            let mut claim: Vec<Option<(f64, usize)>> = vec![None; n];
            for (g, &(v, i)) in best.iter().enumerate() {
                if claim[i].is_none_or(|(cv, _)| v > cv) {
                    claim[i] = Some((v, g));
                }
            }
            for (i, c) in claim.iter().enumerate() {
                if let Some((_, g)) = *c {
                    labels[i] = AnchorLabel::Positive(gts[g].1);
                    matched[i] = Some(g);
                }
            }
        }
    }
    let deltas = matched
        .iter()
        .zip(&anchors.boxes)
        .map(|(m, a)| match m {
            Some(g) => encode_deltas(a, &gts[*g].0, &config.delta_stds),
            None => [0.0; 4],
        })
        .collect();
    DetTargets {
        labels,
        deltas,
        matched,
    }
}
