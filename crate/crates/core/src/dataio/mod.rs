//! Samples, datasets, partial-annotation splits, schedules, and on-disk I/O.

mod classmap;
mod io;
mod schedule;
mod split;
mod synth;
pub mod voc;

use mtlab_autograd::Tensor;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::geometry::BBox;

pub use classmap::{remap_classes, ClassMap};
pub use io::{load_dataset, load_split, read_image, save_dataset, save_split, LoadedDataset};
pub use schedule::{
    epoch_task_order, make_epoch_schedule, single_task_batches, Batch, EpochSchedule, ScheduleMode,
};
pub use split::{apply_split, halve_subset, split_id_pool, split_partial, PartialSplit, SplitTarget};
pub use synth::{generate_synthetic, render_scene, ShapeInstance, ShapeKind, SynthSpec};

/// Mask value excluded from losses and metrics.
pub const IGNORE_LABEL: u8 = 255;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Task {
    #[serde(rename = "DET")]
    Det,
    #[serde(rename = "SEG")]
    Seg,
}

impl Task {
    pub fn other(self) -> Task {
        match self {
            Task::Det => Task::Seg,
            Task::Seg => Task::Det,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Task::Det => "det",
            Task::Seg => "seg",
        }
    }
}

impl std::fmt::Display for Task {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Task::Det => "DET",
            Task::Seg => "SEG",
        })
    }
}

impl std::str::FromStr for Task {
    type Err = crate::Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "det" | "detection" => Ok(Task::Det),
            "seg" | "segmentation" => Ok(Task::Seg),
            _ => Err(invalid(format!("unknown task {s:?} (expected det or seg)"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GtBox {
    #[serde(flatten)]
    pub bbox: BBox,
    #[serde(rename = "class")]
    pub class_id: usize,
}

/// 8-bit RGB image, row-major HWC.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RgbImage {
    pub width: usize,
    pub height: usize,
    pub data: Vec<u8>,
}

impl RgbImage {
    pub fn new(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            data: vec![0; width * height * 3],
        }
    }

    pub fn pixel(&self, x: usize, y: usize) -> [u8; 3] {
        let o = (y * self.width + x) * 3;
        [self.data[o], self.data[o + 1], self.data[o + 2]]
    }

    pub fn put(&mut self, x: usize, y: usize, rgb: [u8; 3]) {
        let o = (y * self.width + x) * 3;
        self.data[o..o + 3].copy_from_slice(&rgb);
    }

    /// CHW tensor with values in [0, 1].
    pub fn to_chw(&self) -> Vec<f64> {
        let hw = self.width * self.height;
        let mut out = vec![0.0; 3 * hw];
        for (i, px) in self.data.chunks_exact(3).enumerate() {
            for c in 0..3 {
                out[c * hw + i] = f64::from(px[c]) / 255.0;
            }
        }
        out
    }
}

/// Per-pixel class ids, row-major.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Mask {
    pub width: usize,
    pub height: usize,
    pub data: Vec<u8>,
}

impl Mask {
    pub fn new(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            data: vec![0; width * height],
        }
    }

    pub fn get(&self, x: usize, y: usize) -> u8 {
        self.data[y * self.width + x]
    }

    pub fn set(&mut self, x: usize, y: usize, v: u8) {
        self.data[y * self.width + x] = v;
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub id: String,
    pub image: RgbImage,
    pub boxes: Option<Vec<GtBox>>,
    pub mask: Option<Mask>,
    pub task: Option<Task>,
}

impl Sample {
    pub fn width(&self) -> usize {
        self.image.width
    }

    pub fn height(&self) -> usize {
        self.image.height
    }

    /// Checks box geometry, mask shape and labels, and the single-task rule.
    pub fn validate(&self, num_seg_classes: usize) -> Result<()> {
        let (w, h) = (self.width() as f64, self.height() as f64);
        if let Some(boxes) = &self.boxes {
            for b in boxes {
                let bb = b.bbox;
                if !(bb.is_valid() && bb.x1 >= 0.0 && bb.y1 >= 0.0 && bb.x2 <= w && bb.y2 <= h) {
                    return Err(invalid(format!(
                        "sample {}: box ({}, {}, {}, {}) violates 0 <= x1 < x2 <= {w}, 0 <= y1 < y2 <= {h}",
                        self.id, bb.x1, bb.y1, bb.x2, bb.y2
                    )));
                }
            }
        }
        if let Some(mask) = &self.mask {
            if (mask.width, mask.height) != (self.width(), self.height()) {
                return Err(invalid(format!(
                    "sample {}: mask {}x{} does not match image {}x{}",
                    self.id,
                    mask.width,
                    mask.height,
                    self.width(),
                    self.height()
                )));
            }
            if let Some(bad) = mask
                .data
                .iter()
                .find(|&&v| v != IGNORE_LABEL && usize::from(v) >= num_seg_classes)
            {
                return Err(invalid(format!(
                    "sample {}: mask label {bad} outside {num_seg_classes} segmentation classes",
                    self.id
                )));
            }
        }
        match self.task {
            Some(Task::Det) if self.boxes.is_none() || self.mask.is_some() => Err(invalid(format!(
                "sample {}: DET-tagged sample must carry boxes only",
                self.id
            ))),
            Some(Task::Seg) if self.mask.is_none() || self.boxes.is_some() => Err(invalid(format!(
                "sample {}: SEG-tagged sample must carry a mask only",
                self.id
            ))),
            _ => Ok(()),
        }
    }

    /// Horizontal mirror of image, mask, and boxes.
    pub fn hflip(&self) -> Sample {
        let (w, h) = (self.width(), self.height());
        let mut image = self.image.clone();
        for y in 0..h {
            for x in 0..w {
                image.put(x, y, self.image.pixel(w - 1 - x, y));
            }
        }
        let mask = self.mask.as_ref().map(|m| {
            let mut out = m.clone();
            for y in 0..h {
                for x in 0..w {
                    out.set(x, y, m.get(w - 1 - x, y));
                }
            }
            out
        });
        let boxes = self.boxes.as_ref().map(|bs| {
            bs.iter()
                .map(|b| GtBox {
                    bbox: BBox::new(w as f64 - b.bbox.x2, b.bbox.y1, w as f64 - b.bbox.x1, b.bbox.y2),
                    class_id: b.class_id,
                })
                .collect()
        });
        Sample {
            id: self.id.clone(),
            image,
            boxes,
            mask,
            task: self.task,
        }
    }
}

/// Class vocabularies. Detection ids index `det`; segmentation ids index
/// `seg`, where 0 is background.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassInfo {
    pub det: Vec<String>,
    pub seg: Vec<String>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub samples: Vec<Sample>,
    pub classes: ClassInfo,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn num_det_classes(&self) -> usize {
        self.classes.det.len()
    }

    pub fn num_seg_classes(&self) -> usize {
        self.classes.seg.len()
    }

    pub fn ids(&self) -> Vec<String> {
        self.samples.iter().map(|s| s.id.clone()).collect()
    }

    pub fn get(&self, id: &str) -> Option<&Sample> {
        self.samples.iter().find(|s| s.id == id)
    }

    pub fn validate(&self) -> Result<()> {
        let mut seen = std::collections::BTreeSet::new();
        for s in &self.samples {
            if !seen.insert(s.id.as_str()) {
                return Err(invalid(format!("duplicate sample id {}", s.id)));
            }
            s.validate(self.num_seg_classes())?;
            if let Some(b) = s
                .boxes
                .iter()
                .flatten()
                .find(|b| b.class_id >= self.num_det_classes())
            {
                return Err(invalid(format!(
                    "sample {}: box class {} outside {} detection classes",
                    s.id,
                    b.class_id,
                    self.num_det_classes()
                )));
            }
        }
        Ok(())
    }

    /// Samples with the given ids, in the order given.
    pub fn select(&self, ids: &[String]) -> Result<Vec<&Sample>> {
        let index: std::collections::HashMap<&str, &Sample> =
            self.samples.iter().map(|s| (s.id.as_str(), s)).collect();
        ids.iter()
            .map(|id| {
                index
                    .get(id.as_str())
                    .copied()
                    .ok_or_else(|| invalid(format!("unknown sample id {id}")))
            })
            .collect()
    }

    pub fn subset(&self, ids: &[String]) -> Result<Dataset> {
        Ok(Dataset {
            samples: self.select(ids)?.into_iter().cloned().collect(),
            classes: self.classes.clone(),
        })
    }
}

/// Stacks same-sized samples into an `[n, 3, h, w]` tensor.
pub fn images_to_tensor(samples: &[&Sample]) -> Result<Tensor> {
    let first = samples
        .first()
        .ok_or_else(|| invalid("cannot batch zero samples"))?;
    let (w, h) = (first.width(), first.height());
    let mut data = Vec::with_capacity(samples.len() * 3 * w * h);
    for s in samples {
        if (s.width(), s.height()) != (w, h) {
            return Err(invalid(format!(
                "sample {} is {}x{}, batch expects {w}x{h}",
                s.id,
                s.width(),
                s.height()
            )));
        }
        data.extend(s.image.to_chw());
    }
    Ok(Tensor::from_vec(&[samples.len(), 3, h, w], data)?)
}
