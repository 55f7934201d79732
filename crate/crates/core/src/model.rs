//! Encoder plus optional detection and segmentation heads.

use mtlab_autograd::{Tensor, Var};
use serde::{Deserialize, Serialize};

use crate::dataio::{Mask, Sample, Task, IGNORE_LABEL};
use crate::dethead::{self, AnchorSet, DetHeadConfig, LevelOutput};
use crate::encoder::{EncoderConfig, Pyramid};
use crate::error::{invalid, Error, Result};
use crate::nn::Decls;
use crate::params::{ParamSet, Part, Session};
use crate::seghead::SegHeadConfig;

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    #[serde(default)]
    pub encoder: EncoderConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub det_head: Option<DetHeadConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seg_head: Option<SegHeadConfig>,
}

impl ModelConfig {
    pub fn has_head(&self, task: Task) -> bool {
        match task {
            Task::Det => self.det_head.is_some(),
            Task::Seg => self.seg_head.is_some(),
        }
    }

    /// Same architecture restricted to the encoder and the heads in `tasks`.
    pub fn with_heads(&self, tasks: &[Task]) -> ModelConfig {
        ModelConfig {
            encoder: self.encoder.clone(),
            det_head: self.det_head.clone().filter(|_| tasks.contains(&Task::Det)),
            seg_head: self.seg_head.clone().filter(|_| tasks.contains(&Task::Seg)),
        }
    }

    pub fn declare(&self) -> Result<Decls> {
        let mut d = Decls::default();
        self.encoder.declare(&mut d)?;
        if let Some(det) = &self.det_head {
            det.declare(&mut d, self.encoder.det_channels)?;
        }
        if let Some(seg) = &self.seg_head {
            seg.declare(&mut d, self.encoder.det_channels, &self.encoder.strides)?;
        }
        Ok(d)
    }

    pub fn init(&self, seed: u64) -> Result<ParamSet> {
        self.declare()?.materialize(seed)
    }

    pub fn count_parameters(&self) -> Result<usize> {
        Ok(self.declare()?.count())
    }

    /// Checks that `params` carries exactly the tensors this architecture
    /// declares for the given parts, with matching shapes.
    pub fn check_params(&self, params: &ParamSet, parts: &[Part]) -> Result<()> {
        let decls = self.declare()?;
        for d in decls.0.iter().filter(|d| Part::of(&d.name).is_some_and(|p| parts.contains(&p))) {
            match params.get(&d.name) {
                None => return Err(Error::Config(format!("parameter {} is missing", d.name))),
                Some(t) if t.shape() != d.shape.as_slice() => {
                    return Err(Error::Config(format!(
                        "parameter {} has shape {:?}, architecture expects {:?}",
                        d.name,
                        t.shape(),
                        d.shape
                    )))
                }
                _ => {}
            }
        }
        let declared: std::collections::BTreeSet<&str> = decls.0.iter().map(|d| d.name.as_str()).collect();
        if let Some(extra) = params
            .names()
            .find(|n| Part::of(n).is_some_and(|p| parts.contains(&p)) && !declared.contains(n.as_str()))
        {
            return Err(Error::Config(format!("parameter {extra} is not part of the architecture")));
        }
        Ok(())
    }

    /// Encoder and the requested heads on one batch.
    pub fn forward(&self, s: &mut Session, images: Var, det: bool, seg: bool) -> Result<Outputs> {
        let (_, _, h, w) = s.graph.value(images).dims4()?;
        let pyramid = self.encoder.encode(s, images)?;
        self.heads(s, pyramid, (h, w), det, seg)
    }

    /// Heads on an already computed pyramid.
    pub fn heads(&self, s: &mut Session, pyramid: Pyramid, image_size: (usize, usize), det: bool, seg: bool) -> Result<Outputs> {
        let det_out = if det {
            let cfg = self
                .det_head
                .as_ref()
                .ok_or_else(|| Error::Config("model has no detection head".into()))?;
            Some(cfg.forward(s, &pyramid)?)
        } else {
            None
        };
        let seg_out = if seg {
            let cfg = self
                .seg_head
                .as_ref()
                .ok_or_else(|| Error::Config("model has no segmentation head".into()))?;
            Some(cfg.forward(s, &pyramid, image_size)?)
        } else {
            None
        };
        let anchors = match (&det_out, &self.det_head) {
            (Some(_), Some(cfg)) => Some(dethead::generate_anchors(&dethead::level_shapes(s, &pyramid)?, cfg)),
            _ => None,
        };
        Ok(Outputs {
            pyramid,
            image_size,
            det: det_out,
            anchors,
            seg: seg_out,
        })
    }
}

pub struct Outputs {
    pub pyramid: Pyramid,
    /// Padded batch size `(H, W)`.
    pub image_size: (usize, usize),
    pub det: Option<Vec<LevelOutput>>,
    pub anchors: Option<AnchorSet>,
    pub seg: Option<Var>,
}

/// A padded batch: images share the largest height and width, padding is
/// zero in the image and ignore in masks.
pub struct PaddedBatch {
    pub images: Tensor,
    pub sizes: Vec<(usize, usize)>,
    pub masks: Vec<Option<Mask>>,
}

pub fn pad_batch(samples: &[&Sample]) -> Result<PaddedBatch> {
    if samples.is_empty() {
        return Err(invalid("cannot batch zero samples"));
    }
    let h = samples.iter().map(|s| s.height()).max().unwrap_or(0);
    let w = samples.iter().map(|s| s.width()).max().unwrap_or(0);
    let mut data = vec![0.0; samples.len() * 3 * h * w];
    let mut masks = Vec::with_capacity(samples.len());
    for (b, s) in samples.iter().enumerate() {
        let chw = s.image.to_chw();
        let (sw, sh) = (s.width(), s.height());
        for c in 0..3 {
            for y in 0..sh {
                let dst = ((b * 3 + c) * h + y) * w;
                let src = (c * sh + y) * sw;
                data[dst..dst + sw].copy_from_slice(&chw[src..src + sw]);
            }
        }
        masks.push(s.mask.as_ref().map(|m| {
            let mut out = Mask {
                width: w,
                height: h,
                data: vec![IGNORE_LABEL; w * h],
            };
            for y in 0..m.height {
                out.data[y * w..y * w + m.width].copy_from_slice(&m.data[y * m.width..(y + 1) * m.width]);
            }
            out
        }));
    }
    Ok(PaddedBatch {
        images: Tensor::from_vec(&[samples.len(), 3, h, w], data)?,
        sizes: samples.iter().map(|s| (s.width(), s.height())).collect(),
        masks,
    })
}
