#![allow(dead_code)]

use mtlab::dataio::{generate_synthetic, Dataset, GtBox, SynthSpec};
use mtlab::dethead::{DetHeadConfig, Detection};
use mtlab::encoder::{BackboneKind, EncoderConfig};
use mtlab::geometry::BBox;
use mtlab::model::ModelConfig;
use mtlab::seghead::SegHeadConfig;
use mtlab::tide::ErrorLabel;
use rand::Rng;

pub fn det(x1: f64, y1: f64, x2: f64, y2: f64, class_id: usize, score: f64) -> Detection {
    Detection {
        bbox: BBox::new(x1, y1, x2, y2),
        class_id,
        score,
    }
}

pub fn gt(x1: f64, y1: f64, x2: f64, y2: f64, class_id: usize) -> GtBox {
    GtBox {
        bbox: BBox::new(x1, y1, x2, y2),
        class_id,
    }
}

/// AP of one class from first principles: for every score cutoff, greedy
/// matching of the kept detections from scratch, then the area under the
/// interpolated precision envelope. Scores must be distinct.
pub fn oracle_ap(dets: &[Vec<Detection>], gts: &[Vec<GtBox>], class: usize, thr: f64) -> Option<f64> {
    let num_gt = gts.iter().flatten().filter(|g| g.class_id == class).count();
    if num_gt == 0 {
        return None;
    }
    let mut scores: Vec<f64> = dets.iter().flatten().filter(|d| d.class_id == class).map(|d| d.score).collect();
    scores.sort_by(|a, b| b.total_cmp(a));
    let mut points = Vec::new();
    for &cut in &scores {
        let mut kept: Vec<(usize, Detection)> = dets
            .iter()
            .enumerate()
            .flat_map(|(i, ds)| ds.iter().filter(|d| d.class_id == class && d.score >= cut).map(move |d| (i, *d)))
            .collect();
        kept.sort_by(|a, b| b.1.score.total_cmp(&a.1.score));
        let mut used: Vec<Vec<bool>> = gts.iter().map(|g| vec![false; g.len()]).collect();
        let mut tp = 0;
        for (img, d) in &kept {
            let mut best: Option<(f64, usize)> = None;
            for (j, g) in gts[*img].iter().enumerate() {
                if g.class_id != class || used[*img][j] {
                    continue;
                }
                let v = d.bbox.iou(&g.bbox);
                if v >= thr && best.map_or(true, |(bv, _)| v > bv) {
                    best = Some((v, j));
                }
            }
            if let Some((_, j)) = best {
                used[*img][j] = true;
                tp += 1;
            }
        }
        points.push((tp as f64 / num_gt as f64, tp as f64 / kept.len() as f64));
    }
    let mut levels: Vec<f64> = points.iter().map(|p| p.0).filter(|&r| r > 0.0).collect();
    levels.sort_by(f64::total_cmp);
    levels.dedup();
    let mut ap = 0.0;
    let mut prev = 0.0;
    for r in levels {
        let p = points.iter().filter(|q| q.0 >= r).map(|q| q.1).fold(0.0, f64::max);
        ap += (r - prev) * p;
        prev = r;
    }
    Some(100.0 * ap)
}

fn rand_box(r: &mut impl Rng, size: f64) -> BBox {
    let x1 = r.random_range(0..(size as i64 - 2)) as f64;
    let y1 = r.random_range(0..(size as i64 - 2)) as f64;
    let x2 = r.random_range(x1 as i64 + 1..size as i64) as f64;
    let y2 = r.random_range(y1 as i64 + 1..size as i64) as f64;
    BBox::new(x1, y1, x2, y2)
}

/// Tiny random detection instance: at most 5 images, 10 detections, and 5
/// ground truths in total, 2 classes, on a 12x12 canvas so overlaps are
/// common. Detections near a gt are jittered copies of it.
pub fn random_instance(r: &mut impl Rng) -> (Vec<Vec<Detection>>, Vec<Vec<GtBox>>) {
    let images = r.random_range(1..=5);
    let mut gts: Vec<Vec<GtBox>> = vec![Vec::new(); images];
    for _ in 0..r.random_range(0..=5) {
        let i = r.random_range(0..images);
        gts[i].push(GtBox {
            bbox: rand_box(r, 12.0),
            class_id: r.random_range(0..2),
        });
    }
    let mut dets: Vec<Vec<Detection>> = vec![Vec::new(); images];
    for _ in 0..r.random_range(0..=10) {
        let i = r.random_range(0..images);
        let bbox = match gts[i].get(r.random_range(0..gts[i].len().max(1))) {
            Some(g) if r.random_bool(0.7) => {
                let mut j = || r.random_range(-1i64..=1) as f64;
                let b = BBox::new(g.bbox.x1 + j(), g.bbox.y1 + j(), g.bbox.x2 + j(), g.bbox.y2 + j());
                if b.is_valid() {
                    b
                } else {
                    g.bbox
                }
            }
            _ => rand_box(r, 12.0),
        };
        dets[i].push(Detection {
            bbox,
            class_id: r.random_range(0..2),
            score: r.random::<f64>(),
        });
    }
    (dets, gts)
}

/// Synthetic shapes at 32x32 with small objects.
pub fn tiny_spec() -> SynthSpec {
    SynthSpec {
        width: 32,
        height: 32,
        min_size: 6,
        max_size: 16,
        max_shapes: 2,
        ..Default::default()
    }
}

pub fn tiny_data(n: usize, seed: u64) -> Dataset {
    generate_synthetic(n, &tiny_spec(), seed).unwrap()
}

/// Roughly 14k-parameter model with both heads.
pub fn tiny_model() -> ModelConfig {
    ModelConfig {
        encoder: EncoderConfig {
            backbone: BackboneKind::Tiny,
            det_channels: 8,
            widths: Some([4, 8, 8, 8]),
            ..Default::default()
        },
        det_head: Some(DetHeadConfig {
            num_classes: 3,
            conv_blocks: 1,
            anchor_scales: vec![0.75, 1.5],
            ..Default::default()
        }),
        seg_head: Some(SegHeadConfig {
            num_classes: 4,
            seg_channels: 8,
            ..Default::default()
        }),
    }
}

/// Largest relative error between `analytic` and central differences of
/// `f` at `x`, over the listed coordinates.
pub fn fd_error(f: impl Fn(&[f64]) -> f64, x: &[f64], analytic: &[f64], coords: &[usize], h: f64) -> f64 {
    let mut worst: f64 = 0.0;
    for &i in coords {
        let mut p = x.to_vec();
        p[i] += h;
        let up = f(&p);
        p[i] -= 2.0 * h;
        let down = f(&p);
        let numeric = (up - down) / (2.0 * h);
        let err = (analytic[i] - numeric).abs() / analytic[i].abs().max(numeric.abs()).max(1e-6);
        worst = worst.max(err);
    }
    worst
}

pub fn random_vec(r: &mut impl Rng, n: usize, scale: f64) -> Vec<f64> {
    (0..n).map(|_| r.random_range(-scale..scale)).collect()
}

pub type Scene = (Vec<Vec<Detection>>, Vec<Vec<GtBox>>, usize);

/// One scene per error type. Each holds exactly one injected error that
/// costs AP50, next to correct detections.
pub fn scene(label: ErrorLabel) -> Scene {
    let a = gt(0.0, 0.0, 10.0, 10.0, 0);
    let b = gt(20.0, 20.0, 30.0, 30.0, 0);
    let on = |g: &GtBox, s: f64| det(g.bbox.x1, g.bbox.y1, g.bbox.x2, g.bbox.y2, g.class_id, s);
    match label {
        ErrorLabel::Cls => {
            let b1 = gt(20.0, 20.0, 30.0, 30.0, 1);
            let wrong = det(20.0, 20.0, 30.0, 30.0, 0, 0.95);
            (vec![vec![wrong, on(&a, 0.9)]], vec![vec![a, b1]], 2)
        }
        // IoU 0.3 with its own-class gt.
        ErrorLabel::Loc => (vec![vec![det(20.0, 20.0, 23.0, 30.0, 0, 0.95), on(&a, 0.9)]], vec![vec![a, b]], 1),
        ErrorLabel::Both => {
            let c = gt(30.0, 30.0, 40.0, 40.0, 1);
            let both = det(0.0, 0.0, 3.0, 10.0, 1, 0.95);
            (vec![vec![both, on(&a, 0.9), on(&c, 0.8)]], vec![vec![a, c]], 2)
        }
        ErrorLabel::Dupe => {
            let dupe = det(0.0, 0.0, 10.0, 9.0, 0, 0.85);
            (vec![vec![on(&a, 0.9), dupe, on(&b, 0.8)]], vec![vec![a, b]], 1)
        }
        ErrorLabel::Bkg => {
            let bkg = det(50.0, 50.0, 60.0, 60.0, 0, 0.95);
            (vec![vec![bkg, on(&a, 0.9), on(&b, 0.8)]], vec![vec![a, b]], 1)
        }
        ErrorLabel::Miss => (vec![vec![on(&a, 0.9)]], vec![vec![a, b]], 1),
    }
}
