//! Pyramid-aggregation segmentation head: every level is brought to stride
//! 4 by alternating (conv, group norm, ReLU) and 2x upsampling, the levels
//! are summed, classified by a 1x1 convolution, and resized to the input.

use std::path::Path;

use mtlab_autograd::{Tensor, Var};
use serde::{Deserialize, Serialize};

use crate::dataio::{Mask, IGNORE_LABEL};
use crate::encoder::Pyramid;
use crate::error::{invalid, Error, Result};
use crate::nn::{self, Decls, Init};
use crate::params::Session;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SegHeadConfig {
    /// Including background.
    pub num_classes: usize,
    pub seg_channels: usize,
    pub ignore_label: u8,
    pub loss_weight: f64,
}

impl Default for SegHeadConfig {
    fn default() -> Self {
        Self {
            num_classes: 21,
            seg_channels: 128,
            ignore_label: IGNORE_LABEL,
            loss_weight: 1.0,
        }
    }
}

/// Number of conv/upsample steps that bring stride `s` to stride 4.
fn upsample_steps(stride: usize) -> usize {
    (stride / 4).trailing_zeros() as usize
}

impl SegHeadConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_classes < 2 {
            return Err(Error::Config("seg_head: num_classes must be at least 2".into()));
        }
        if self.seg_channels == 0 {
            return Err(Error::Config("seg_head: seg_channels must be positive".into()));
        }
        Ok(())
    }

    pub fn declare(&self, d: &mut Decls, in_channels: usize, strides: &[usize]) -> Result<()> {
        self.validate()?;
        for (l, &s) in strides.iter().enumerate() {
            let mut cin = in_channels;
            for step in 0..upsample_steps(s).max(1) {
                d.conv_gn(&format!("seg_head.level{l}.{step}"), cin, self.seg_channels, 3);
                cin = self.seg_channels;
            }
        }
        d.conv("seg_head.classifier", self.seg_channels, self.num_classes, 1, true, Init::Normal(0.01));
        Ok(())
    }

    /// `[n, K, H, W]` logits for an input of `image_size = (H, W)`.
    pub fn forward(&self, s: &mut Session, pyramid: &Pyramid, image_size: (usize, usize)) -> Result<Var> {
        let (h, w) = image_size;
        let mut parts = Vec::with_capacity(pyramid.levels.len());
        for (l, (&x, &stride)) in pyramid.levels.iter().zip(&pyramid.strides).enumerate() {
            let steps = upsample_steps(stride);
            let mut y = x;
            let mut cur = stride;
            for step in 0..steps.max(1) {
                y = nn::conv_gn(s, y, &format!("seg_head.level{l}.{step}"), 1, true)?;
                if steps > 0 {
                    cur /= 2;
                    y = s.graph.resize(y, h.div_ceil(cur), w.div_ceil(cur))?;
                }
            }
            parts.push(y);
        }
        let fused = s.graph.add_all(&parts)?;
        let logits = nn::conv(s, fused, "seg_head.classifier", 1)?;
        Ok(s.graph.resize(logits, h, w)?)
    }
}

/// Value and gradient of the mean softmax cross-entropy over non-ignored
/// pixels. `masks[b]` labels image `b` of `logits` (`[n, K, H, W]`).
pub fn seg_loss(logits: &Tensor, masks: &[&Mask], ignore_label: u8) -> Result<(f64, Tensor)> {
    let (n, k, h, w) = logits.dims4()?;
    if masks.len() != n {
        return Err(invalid(format!("{} masks for {n} images", masks.len())));
    }
    let hw = h * w;
    let mut grad = Tensor::zeros(logits.shape());
    let mut total = 0.0;
    let mut count = 0usize;
    let x = logits.data();
    let mut probs = vec![0.0; k];
    for (b, m) in masks.iter().enumerate() {
        if (m.width, m.height) != (w, h) {
            return Err(invalid(format!("mask {}x{} does not match logits {w}x{h}", m.width, m.height)));
        }
        for p in 0..hw {
            let label = m.data[p];
            if label == ignore_label {
                continue;
            }
            let label = usize::from(label);
            if label >= k {
                return Err(invalid(format!("mask label {label} outside {k} classes")));
            }
            let base = b * k * hw + p;
            let max = (0..k).map(|c| x[base + c * hw]).fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for (c, pr) in probs.iter_mut().enumerate() {
                *pr = (x[base + c * hw] - max).exp();
                z += *pr;
            }
            total += z.ln() + max - x[base + label * hw];
            let g = grad.data_mut();
            for (c, pr) in probs.iter().enumerate() {
                g[base + c * hw] = pr / z;
            }
            g[base + label * hw] -= 1.0;
            count += 1;
        }
    }
    if count == 0 {
        return Err(invalid("every pixel carries the ignore label"));
    }
    grad.scale(1.0 / count as f64);
    let loss = total / count as f64;
    if !loss.is_finite() {
        return Err(invalid("non-finite segmentation loss"));
    }
    Ok((loss, grad))
}

/// Per-pixel softmax of image `b`, `[K][H*W]`.
pub fn softmax(logits: &Tensor, b: usize) -> Result<Vec<Vec<f64>>> {
    let (_, k, h, w) = logits.dims4()?;
    let hw = h * w;
    let x = &logits.data()[b * k * hw..(b + 1) * k * hw];
    let mut out = vec![vec![0.0; hw]; k];
    for p in 0..hw {
        let max = (0..k).map(|c| x[c * hw + p]).fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = (0..k).map(|c| (x[c * hw + p] - max).exp()).sum();
        for (c, row) in out.iter_mut().enumerate() {
            row[p] = (x[c * hw + p] - max).exp() / z;
        }
    }
    Ok(out)
}

/// Per-pixel argmax of image `b`; ties go to the lowest class id.
pub fn predict_mask(logits: &Tensor, b: usize) -> Result<Mask> {
    let (n, k, h, w) = logits.dims4()?;
    if b >= n {
        return Err(invalid(format!("image {b} outside a batch of {n}")));
    }
    if k > 256 {
        return Err(invalid("more than 256 classes cannot be stored in a mask"));
    }
    let hw = h * w;
    let x = &logits.data()[b * k * hw..(b + 1) * k * hw];
    let data = (0..hw)
        .map(|p| {
            let mut best = 0;
            for c in 1..k {
                if x[c * hw + p] > x[best * hw + p] {
                    best = c;
                }
            }
            best as u8
        })
        .collect();
    Ok(Mask {
        width: w,
        height: h,
        data,
    })
}

/// Writes a mask as an 8-bit gray PNG, pixel = class id.
pub fn write_mask_png(mask: &Mask, path: &Path) -> Result<()> {
    let img = image::GrayImage::from_raw(mask.width as u32, mask.height as u32, mask.data.clone())
        .ok_or_else(|| invalid("mask buffer size mismatch"))?;
    img.save(path).map_err(|source| Error::Image {
        path: path.to_path_buf(),
        source,
    })
}
