//! Grad-CAM heatmaps over pyramid features.

use std::path::Path;

use mtlab_autograd::{Graph, Tensor};
use serde::{Deserialize, Serialize};

use crate::dataio::{RgbImage, Sample};
use crate::encoder::Pyramid;
use crate::error::{invalid, Error, Result};
use crate::model::{pad_batch, ModelConfig};
use crate::params::{ParamSet, Session};

/// Score whose gradient drives the map.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum CamTarget {
    /// Largest classification logit over all levels, anchors, and classes,
    /// i.e. the top-scoring detection before suppression.
    DetTop,
    /// Classification logit of one anchor.
    Det {
        level: usize,
        y: usize,
        x: usize,
        anchor: usize,
        class: usize,
    },
    /// Class logit summed over all pixels.
    Seg { class: usize },
}

impl std::str::FromStr for CamTarget {
    type Err = Error;

    /// `det`, `det:<level>:<y>:<x>:<anchor>:<class>`, or `seg:<class>`.
    fn from_str(s: &str) -> Result<Self> {
        let parts: Vec<&str> = s.split(':').collect();
        let num = |p: &str| p.parse::<usize>().map_err(|_| invalid(format!("bad number {p:?} in target {s:?}")));
        match parts.as_slice() {
            ["det"] => Ok(CamTarget::DetTop),
            ["det", l, y, x, a, c] => Ok(CamTarget::Det {
                level: num(l)?,
                y: num(y)?,
                x: num(x)?,
                anchor: num(a)?,
                class: num(c)?,
            }),
            ["seg", c] => Ok(CamTarget::Seg { class: num(c)? }),
            _ => Err(invalid(format!("unknown target {s:?} (det, det:l:y:x:a:c, or seg:c)"))),
        }
    }
}

/// Row-major map with values in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Heatmap {
    pub width: usize,
    pub height: usize,
    pub data: Vec<f64>,
}

impl Heatmap {
    pub fn max(&self) -> f64 {
        self.data.iter().copied().fold(0.0, f64::max)
    }
}

fn bilinear(map: &[f64], h: usize, w: usize, out_h: usize, out_w: usize) -> Result<Vec<f64>> {
    let mut g = Graph::new();
    let v = g.constant(Tensor::from_vec(&[1, 1, h, w], map.to_vec())?);
    let r = g.resize(v, out_h, out_w)?;
    Ok(g.value(r).data().to_vec())
}

/// Rectified gradient-weighted channel sum of one `[1, C, h, w]` feature
/// map, upsampled to `(height, width)`; not normalized.
pub fn cam_level(features: &Tensor, grads: &Tensor, size: (usize, usize)) -> Result<Vec<f64>> {
    let (n, c, h, w) = features.dims4()?;
    if n != 1 || grads.shape() != features.shape() {
        return Err(invalid("Grad-CAM needs one image and gradients of the feature shape"));
    }
    let hw = h * w;
    let mut map = vec![0.0; hw];
    for ch in 0..c {
        let g = &grads.data()[ch * hw..(ch + 1) * hw];
        let alpha = g.iter().sum::<f64>() / hw as f64;
        if alpha == 0.0 {
            continue;
        }
        for (m, a) in map.iter_mut().zip(&features.data()[ch * hw..(ch + 1) * hw]) {
            *m += alpha * a;
        }
    }
    for m in &mut map {
        *m = m.max(0.0);
    }
    bilinear(&map, h, w, size.0, size.1)
}

/// Averages per-level maps and divides by the maximum; an all-zero map
/// stays zero.
pub fn combine_levels(maps: &[Vec<f64>], size: (usize, usize)) -> Heatmap {
    let mut data = vec![0.0; size.0 * size.1];
    for m in maps {
        for (d, v) in data.iter_mut().zip(m) {
            *d += v / maps.len() as f64;
        }
    }
    let max = data.iter().copied().fold(0.0, f64::max);
    if max > 0.0 {
        for d in &mut data {
            *d = (*d / max).clamp(0.0, 1.0);
        }
    }
    Heatmap {
        width: size.1,
        height: size.0,
        data,
    }
}

/// Grad-CAM of `target` for one sample over the pyramid levels in `levels`
/// (finest level when empty).
pub fn grad_cam(model: &ModelConfig, params: &ParamSet, sample: &Sample, target: &CamTarget, levels: &[usize]) -> Result<Heatmap> {
    let levels: Vec<usize> = if levels.is_empty() { vec![0] } else { levels.to_vec() };
    let batch = pad_batch(&[sample])?;
    let size = (sample.height(), sample.width());
    let mut s = Session::inference(params);
    let x = s.input(batch.images);
    let pyr = model.encoder.encode(&mut s, x)?;
    if let Some(&l) = levels.iter().find(|&&l| l >= pyr.levels.len()) {
        return Err(invalid(format!("level {l} outside {} pyramid levels", pyr.levels.len())));
    }
    // Fresh leaves so gradients stop at the pyramid.
    let leaves: Vec<_> = pyr
        .levels
        .iter()
        .map(|&v| {
            let t = s.graph.value(v).clone();
            s.graph.param(t)
        })
        .collect();
    let pyramid = Pyramid {
        strides: pyr.strides.clone(),
        levels: leaves.clone(),
    };
    let is_det = !matches!(target, CamTarget::Seg { .. });
    let out = model.heads(&mut s, pyramid, size, is_det, !is_det)?;
    let root = match *target {
        CamTarget::Seg { class } => {
            let cfg = model.seg_head.as_ref().expect("seg head checked by heads()");
            if class >= cfg.num_classes {
                return Err(invalid(format!("class {class} outside {} segmentation classes", cfg.num_classes)));
            }
            let v = out.seg.expect("requested");
            let t = s.graph.value(v);
            let (_, _, ph, pw) = t.dims4()?;
            let hw = ph * pw;
            let mut g = Tensor::zeros(t.shape());
            g.data_mut()[class * hw..(class + 1) * hw].fill(1.0);
            let value = t.data()[class * hw..(class + 1) * hw].iter().sum();
            s.graph.custom_scalar(value, vec![(v, g)])?
        }
        CamTarget::DetTop | CamTarget::Det { .. } => {
            let cfg = model.det_head.as_ref().expect("det head checked by heads()");
            let outs = out.det.expect("requested");
            let k = cfg.num_classes;
            let a = cfg.anchors_per_location();
            let (lvl, idx) = match *target {
                CamTarget::Det {
                    level,
                    y,
                    x,
                    anchor,
                    class,
                } => {
                    if class >= k {
                        return Err(invalid(format!("class {class} outside {k} detection classes")));
                    }
                    if anchor >= a || level >= outs.len() {
                        return Err(invalid("anchor or level out of range"));
                    }
                    let (_, _, lh, lw) = s.graph.value(outs[level].logits).dims4()?;
                    if y >= lh || x >= lw {
                        return Err(invalid(format!("location ({y}, {x}) outside a {lh}x{lw} level")));
                    }
                    (level, (anchor * k + class) * lh * lw + y * lw + x)
                }
                _ => {
                    let mut best = (0, 0, f64::NEG_INFINITY);
                    for (l, o) in outs.iter().enumerate() {
                        for (i, &v) in s.graph.value(o.logits).data().iter().enumerate() {
                            if v > best.2 {
                                best = (l, i, v);
                            }
                        }
                    }
                    (best.0, best.1)
                }
            };
            let v = outs[lvl].logits;
            let mut g = Tensor::zeros(s.graph.value(v).shape());
            g.data_mut()[idx] = 1.0;
            let value = s.graph.value(v).data()[idx];
            s.graph.custom_scalar(value, vec![(v, g)])?
        }
    };
    let grads = s.graph.backward(root)?;
    let maps = levels
        .iter()
        .map(|&l| {
            let f = s.graph.value(leaves[l]);
            let g = grads.get(leaves[l]).cloned().unwrap_or_else(|| Tensor::zeros(f.shape()));
            cam_level(f, &g, size)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(combine_levels(&maps, size))
}

/// Blue-to-red color ramp.
fn colormap(v: f64) -> [u8; 3] {
    let v = v.clamp(0.0, 1.0);
    let r = (1.5 - (4.0 * v - 3.0).abs()).clamp(0.0, 1.0);
    let g = (1.5 - (4.0 * v - 2.0).abs()).clamp(0.0, 1.0);
    let b = (1.5 - (4.0 * v - 1.0).abs()).clamp(0.0, 1.0);
    [(r * 255.0) as u8, (g * 255.0) as u8, (b * 255.0) as u8]
}

fn save_rgb(path: &Path, width: usize, height: usize, data: Vec<u8>) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(crate::error::io_err(dir))?;
    }
    let img = image::RgbImage::from_raw(width as u32, height as u32, data).ok_or_else(|| invalid("image buffer size mismatch"))?;
    img.save(path).map_err(|source| Error::Image {
        path: path.to_path_buf(),
        source,
    })
}

/// Color-mapped heatmap as PNG.
pub fn write_heatmap_png(map: &Heatmap, path: &Path) -> Result<()> {
    let data = map.data.iter().flat_map(|&v| colormap(v)).collect();
    save_rgb(path, map.width, map.height, data)
}

/// Side-by-side figure: the input, then one overlay per heatmap.
pub fn write_composite(image: &RgbImage, maps: &[&Heatmap], path: &Path) -> Result<()> {
    let (w, h) = (image.width, image.height);
    if let Some(m) = maps.iter().find(|m| (m.width, m.height) != (w, h)) {
        return Err(invalid(format!("heatmap {}x{} does not match image {w}x{h}", m.width, m.height)));
    }
    let panels = maps.len() + 1;
    let total_w = w * panels;
    let mut data = vec![0u8; total_w * h * 3];
    for y in 0..h {
        for x in 0..w {
            let px = image.pixel(x, y);
            let base = (y * total_w + x) * 3;
            data[base..base + 3].copy_from_slice(&px);
            for (p, m) in maps.iter().enumerate() {
                let c = colormap(m.data[y * w + x]);
                let o = (y * total_w + (p + 1) * w + x) * 3;
                for k in 0..3 {
                    data[o + k] = (0.5 * f64::from(px[k]) + 0.5 * f64::from(c[k])).round() as u8;
                }
            }
        }
    }
    save_rgb(path, total_w, h, data)
}
