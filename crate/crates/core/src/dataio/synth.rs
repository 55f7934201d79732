//! Procedural shapes dataset: colored rectangles, ellipses, and triangles on
//! a textured background, with class masks and tight boxes.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{ClassInfo, Dataset, GtBox, Mask, RgbImage, Sample};
use crate::error::{invalid, Result};
use crate::geometry::BBox;
use crate::rng;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ShapeKind {
    Rectangle,
    Ellipse,
    Triangle,
}

impl ShapeKind {
    pub fn name(self) -> &'static str {
        match self {
            ShapeKind::Rectangle => "rectangle",
            ShapeKind::Ellipse => "ellipse",
            ShapeKind::Triangle => "triangle",
        }
    }

    /// Whether the pixel at column `x`, row `y` is covered by this shape
    /// inscribed in the integer box `[x1, x2) x [y1, y2)`.
    fn covers(self, b: &[i64; 4], x: i64, y: i64) -> bool {
        let [x1, y1, x2, y2] = *b;
        if x < x1 || x >= x2 || y < y1 || y >= y2 {
            return false;
        }
        let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
        match self {
            ShapeKind::Rectangle => true,
            ShapeKind::Ellipse => {
                let (cx, cy) = ((x1 + x2) as f64 / 2.0, (y1 + y2) as f64 / 2.0);
                let (rx, ry) = ((x2 - x1) as f64 / 2.0, (y2 - y1) as f64 / 2.0);
                let d = ((px - cx) / rx).powi(2) + ((py - cy) / ry).powi(2);
                d <= 1.0
            }
            ShapeKind::Triangle => {
                // Apex on the top row, base along the bottom row; vertices sit
                // on pixel centers so the extreme rows and columns are drawn.
                let apex_x = x1 as f64 + 0.5 + ((x2 - x1 - 1) / 2) as f64;
                let top = y1 as f64 + 0.5;
                let bottom = y2 as f64 - 0.5;
                let (left, right) = (x1 as f64 + 0.5, x2 as f64 - 0.5);
                if bottom <= top {
                    return true;
                }
                let t = (py - top) / (bottom - top);
                let lo = apex_x + (left - apex_x) * t;
                let hi = apex_x + (right - apex_x) * t;
                px >= lo - 1e-9 && px <= hi + 1e-9
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthSpec {
    pub width: usize,
    pub height: usize,
    /// Shape classes; detection class `i` is `kinds[i]`, segmentation class `i + 1`.
    pub kinds: Vec<ShapeKind>,
    pub min_shapes: usize,
    pub max_shapes: usize,
    /// Side length range of a shape's box, in pixels.
    pub min_size: usize,
    pub max_size: usize,
    pub id_prefix: String,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            width: 64,
            height: 64,
            kinds: vec![ShapeKind::Rectangle, ShapeKind::Ellipse, ShapeKind::Triangle],
            min_shapes: 1,
            max_shapes: 4,
            min_size: 12,
            max_size: 30,
            id_prefix: "syn".into(),
        }
    }
}

impl SynthSpec {
    pub fn classes(&self) -> ClassInfo {
        let det: Vec<String> = self.kinds.iter().map(|k| k.name().to_string()).collect();
        let seg = std::iter::once("background".to_string())
            .chain(det.iter().cloned())
            .collect();
        ClassInfo { det, seg }
    }

    fn check(&self) -> Result<()> {
        if self.kinds.is_empty() || self.kinds.len() > 254 {
            return Err(invalid("synthetic spec needs 1..=254 shape kinds"));
        }
        if self.min_shapes < 1 || self.min_shapes > self.max_shapes {
            return Err(invalid("synthetic spec needs 1 <= min_shapes <= max_shapes"));
        }
        if self.min_size < 3 || self.min_size > self.max_size {
            return Err(invalid("synthetic spec needs 3 <= min_size <= max_size"));
        }
        if self.max_size + 2 > self.width.min(self.height) {
            return Err(invalid(format!(
                "max_size {} does not fit a {}x{} image",
                self.max_size, self.width, self.height
            )));
        }
        Ok(())
    }
}

/// One shape to draw: class index into `SynthSpec::kinds`, placement box
/// `[x1, y1, x2, y2)`, and fill color.
#[derive(Clone, Debug, PartialEq)]
pub struct ShapeInstance {
    pub class_id: usize,
    pub bounds: [i64; 4],
    pub color: [u8; 3],
}

fn clamp_u8(v: f64) -> u8 {
    v.round().clamp(0.0, 255.0) as u8
}

/// Renders a scene with a seeded textured background. Boxes are the tight
/// extent of each rendered instance, so mask and boxes agree exactly.
pub fn render_scene(spec: &SynthSpec, id: &str, shapes: &[ShapeInstance], texture_seed: u64) -> Result<Sample> {
    let (w, h) = (spec.width, spec.height);
    let mut r = rng::stream(texture_seed, "synth-texture", 0);
    let base: [f64; 3] = [r.random_range(40.0..200.0), r.random_range(40.0..200.0), r.random_range(40.0..200.0)];
    let grad: [f64; 2] = [r.random_range(-0.8..0.8), r.random_range(-0.8..0.8)];
    let mut image = RgbImage::new(w, h);
    for y in 0..h {
        for x in 0..w {
            let shade = grad[0] * (x as f64 - w as f64 / 2.0) + grad[1] * (y as f64 - h as f64 / 2.0);
            let mut px = [0u8; 3];
            for c in 0..3 {
                px[c] = clamp_u8(base[c] + shade + r.random_range(-12.0..12.0));
            }
            image.put(x, y, px);
        }
    }
    let mut mask = Mask::new(w, h);
    let mut boxes = Vec::with_capacity(shapes.len());
    for shape in shapes {
        let kind = *spec
            .kinds
            .get(shape.class_id)
            .ok_or_else(|| invalid(format!("shape class {} outside spec kinds", shape.class_id)))?;
        let [x1, y1, x2, y2] = shape.bounds;
        if x1 < 0 || y1 < 0 || x2 > w as i64 || y2 > h as i64 || x1 >= x2 || y1 >= y2 {
            return Err(invalid(format!("shape bounds {:?} outside {w}x{h}", shape.bounds)));
        }
        let (mut mx1, mut my1, mut mx2, mut my2) = (i64::MAX, i64::MAX, i64::MIN, i64::MIN);
        for y in y1..y2 {
            for x in x1..x2 {
                if kind.covers(&shape.bounds, x, y) {
                    let mut px = [0u8; 3];
                    for c in 0..3 {
                        px[c] = clamp_u8(f64::from(shape.color[c]) + r.random_range(-6.0..6.0));
                    }
                    image.put(x as usize, y as usize, px);
                    mask.set(x as usize, y as usize, shape.class_id as u8 + 1);
                    mx1 = mx1.min(x);
                    my1 = my1.min(y);
                    mx2 = mx2.max(x + 1);
                    my2 = my2.max(y + 1);
                }
            }
        }
        if mx1 == i64::MAX {
            return Err(invalid(format!("shape at {:?} rendered no pixels", shape.bounds)));
        }
        boxes.push(GtBox {
            bbox: BBox::new(mx1 as f64, my1 as f64, mx2 as f64, my2 as f64),
            class_id: shape.class_id,
        });
    }
    Ok(Sample {
        id: id.to_string(),
        image,
        boxes: Some(boxes),
        mask: Some(mask),
        task: None,
    })
}

fn overlaps_with_margin(a: &[i64; 4], b: &[i64; 4]) -> bool {
    a[0] < b[2] + 1 && b[0] < a[2] + 1 && a[1] < b[3] + 1 && b[1] < a[3] + 1
}

fn random_scene(spec: &SynthSpec, seed: u64, index: usize) -> Vec<ShapeInstance> {
    let mut r = rng::stream(seed, "synth-layout", index as u64);
    let count = r.random_range(spec.min_shapes..=spec.max_shapes);
    let mut shapes: Vec<ShapeInstance> = Vec::with_capacity(count);
    let mut attempts = 0;
    while shapes.len() < count && attempts < 200 {
        attempts += 1;
        let bw = r.random_range(spec.min_size..=spec.max_size) as i64;
        let lo = (bw / 2).max(spec.min_size as i64);
        let hi = (bw * 2).min(spec.max_size as i64);
        let bh = r.random_range(lo.min(hi)..=hi);
        let x1 = r.random_range(0..=(spec.width as i64 - bw));
        let y1 = r.random_range(0..=(spec.height as i64 - bh));
        let bounds = [x1, y1, x1 + bw, y1 + bh];
        if shapes.iter().any(|s| overlaps_with_margin(&s.bounds, &bounds)) {
            continue;
        }
        let color = [
            r.random_range(0..=255u8),
            r.random_range(0..=255u8),
            r.random_range(0..=255u8),
        ];
        shapes.push(ShapeInstance {
            class_id: r.random_range(0..spec.kinds.len()),
            bounds,
            color,
        });
    }
    shapes
}

/// `n` fully annotated scenes. Scene `i` depends only on `(spec, seed, i)`.
pub fn generate_synthetic(n: usize, spec: &SynthSpec, seed: u64) -> Result<Dataset> {
    if n < 1 {
        return Err(invalid("synthetic dataset size must be at least 1"));
    }
    spec.check()?;
    let digits = n.to_string().len().max(5);
    let samples = (0..n)
        .map(|i| {
            let id = format!("{}{:0digits$}", spec.id_prefix, i);
            let shapes = random_scene(spec, seed, i);
            render_scene(spec, &id, &shapes, rng::derive_seed(seed, "synth-scene", i as u64))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Dataset {
        samples,
        classes: spec.classes(),
    })
}
