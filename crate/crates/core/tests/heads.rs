mod common;

use common::{fd_error, random_vec, tiny_model};
use mtlab::dataio::Mask;
use mtlab::dethead::{
    balanced_l1, balanced_l1_loss, decode_detections, det_loss, encode_deltas, focal_loss, generate_anchors,
    match_anchors, nms, AnchorLabel, BalancedL1, DetHeadConfig, Detection, LevelShape,
};
use mtlab::encoder::{BackboneKind, EncoderConfig};
use mtlab::geometry::BBox;
use mtlab::model::ModelConfig;
use mtlab::nn::{Decls, Init};
use mtlab::params::{Part, Session};
use mtlab::seghead::{predict_mask, seg_loss, softmax, SegHeadConfig};
use mtlab_autograd::Tensor;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn one_anchor_cfg() -> DetHeadConfig {
    DetHeadConfig {
        num_classes: 2,
        anchor_ratios: vec![1.0],
        ..Default::default()
    }
}

fn d(x1: f64, y1: f64, x2: f64, y2: f64, c: usize, s: f64) -> Detection {
    Detection {
        bbox: BBox::new(x1, y1, x2, y2),
        class_id: c,
        score: s,
    }
}

#[test]
fn iou_examples() {
    let a = BBox::new(0.0, 0.0, 10.0, 10.0);
    assert_eq!(a.iou(&a), 1.0);
    assert_eq!(a.iou(&BBox::new(20.0, 20.0, 30.0, 30.0)), 0.0);
    assert!((a.iou(&BBox::new(5.0, 0.0, 15.0, 10.0)) - 1.0 / 3.0).abs() < 1e-12);
}

#[test]
fn anchor_grid() {
    let cfg = one_anchor_cfg();
    let a = generate_anchors(&[LevelShape { h: 2, w: 2, stride: 8 }], &cfg);
    assert_eq!(a.len(), 4);
    let centers: Vec<(f64, f64)> = a.boxes.iter().map(|b| b.center()).collect();
    assert_eq!(centers, [(4.0, 4.0), (12.0, 4.0), (4.0, 12.0), (12.0, 12.0)]);
    let many = DetHeadConfig {
        anchor_scales: vec![0.5, 1.0, 2.0],
        anchor_ratios: vec![0.5, 2.0],
        ..Default::default()
    };
    assert_eq!(generate_anchors(&[LevelShape { h: 4, w: 4, stride: 16 }], &many).len(), 96);
}

#[test]
fn matching_rules() {
    let cfg = one_anchor_cfg();
    let anchors = generate_anchors(&[LevelShape { h: 2, w: 2, stride: 8 }], &cfg);
    let none = match_anchors(&anchors, &[], &cfg);
    assert!(none.labels.iter().all(|l| *l == AnchorLabel::Negative));
    let exact = anchors.boxes[3];
    let t = match_anchors(&anchors, &[(exact, 1)], &cfg);
    assert_eq!(t.labels[3], AnchorLabel::Positive(1));
    assert!(t.deltas[3].iter().all(|v| v.abs() < 1e-12));
    // A small gt overlapping its best anchor at IoU 0.3 is still claimed.
    let a0 = anchors.boxes[0];
    let side = a0.width() * 0.3f64.sqrt();
    let small = BBox::new(a0.x1, a0.y1, a0.x1 + side, a0.y1 + side);
    assert!((a0.iou(&small) - 0.3).abs() < 1e-9);
    let t = match_anchors(&anchors, &[(small, 0)], &cfg);
    assert_eq!(t.labels[0], AnchorLabel::Positive(0));
    assert_eq!(t.num_positive(), 1);
}

#[test]
fn nms_examples() {
    let kept = nms(&[d(0.0, 0.0, 10.0, 10.0, 0, 0.8), d(0.0, 0.0, 10.0, 10.0, 0, 0.9)], 0.5);
    assert_eq!(kept.len(), 1);
    assert_eq!(kept[0].score, 0.9);
    // Boxes along a line: neighbors overlap at 0.6, the ends at 0.2.
    let w = 10.0;
    let shift = w * (1.0 - 0.6) / 1.6;
    let b = d(shift, 0.0, w + shift, 10.0, 0, 0.8);
    let c_shift = w * (1.0 - 0.2) / 1.2;
    let a = d(0.0, 0.0, w, 10.0, 0, 0.9);
    let c = d(c_shift, 0.0, w + c_shift, 10.0, 0, 0.7);
    assert!((a.bbox.iou(&b.bbox) - 0.6).abs() < 1e-9 && (a.bbox.iou(&c.bbox) - 0.2).abs() < 1e-9);
    let mut input = vec![a, b, c];
    let kept = nms(&input, 0.5);
    let scores: Vec<f64> = kept.iter().map(|x| x.score).collect();
    assert_eq!(scores, [0.9, 0.7]);
    input.reverse();
    assert_eq!(nms(&input, 0.5), kept);
}

#[test]
fn decode_zero_deltas_returns_anchors() {
    let cfg = DetHeadConfig {
        score_threshold: 0.0,
        max_detections: 1000,
        nms_iou: 1.0,
        ..one_anchor_cfg()
    };
    let shapes = [LevelShape { h: 2, w: 2, stride: 16 }];
    let anchors = generate_anchors(&shapes, &cfg);
    let mut logits = Tensor::zeros(&[1, 2, 2, 2]);
    logits.data_mut()[0] = 5.0;
    let deltas = Tensor::zeros(&[1, 4, 2, 2]);
    let dets = decode_detections(&[&logits], &[&deltas], 0, &anchors, (64, 64), &cfg).unwrap();
    assert_eq!(dets[0].bbox, anchors.boxes[0].clip(64.0, 64.0));
    assert!(dets.len() <= 8);
    assert!(dets.iter().all(|x| anchors.boxes.iter().any(|a| a.clip(64.0, 64.0) == x.bbox)));
}

#[test]
fn decode_respects_threshold_and_cap() {
    let cfg = DetHeadConfig {
        max_detections: 5,
        ..one_anchor_cfg()
    };
    let shapes = [LevelShape { h: 4, w: 4, stride: 8 }];
    let anchors = generate_anchors(&shapes, &cfg);
    let mut r = ChaCha8Rng::seed_from_u64(0);
    let logits = Tensor::from_vec(&[1, 2, 4, 4], random_vec(&mut r, 32, 4.0)).unwrap();
    let deltas = Tensor::from_vec(&[1, 4, 4, 4], random_vec(&mut r, 64, 0.5)).unwrap();
    let dets = decode_detections(&[&logits], &[&deltas], 0, &anchors, (32, 32), &cfg).unwrap();
    assert!(dets.len() <= 5);
    assert!(dets.iter().all(|x| x.score >= cfg.score_threshold));
}

#[test]
fn focal_loss_examples() {
    let pos = [AnchorLabel::Positive(0)];
    let (v, _) = focal_loss(&[0.0], &pos, 1, Some(0.25), 2.0).unwrap();
    assert!((v - 0.25 * 0.25 * 2f64.ln()).abs() < 1e-12);
    let (v, _) = focal_loss(&[20.0, -20.0], &[AnchorLabel::Positive(0)], 2, Some(0.25), 2.0).unwrap();
    assert!(v < 1e-6);
    // gamma 0 without alpha: summed binary cross-entropy over one positive.
    let logits = [0.3, -1.2, 2.0, 0.1];
    let labels = [AnchorLabel::Positive(1), AnchorLabel::Negative];
    let (v, _) = focal_loss(&logits, &labels, 2, None, 0.0).unwrap();
    let bce = |x: f64, t: f64| -(t * (1.0 / (1.0 + (-x).exp())).ln() + (1.0 - t) * (1.0 - 1.0 / (1.0 + (-x).exp())).ln());
    let want = bce(0.3, 0.0) + bce(-1.2, 1.0) + bce(2.0, 0.0) + bce(0.1, 0.0);
    assert!((v - want).abs() < 1e-12);
    assert!(focal_loss(&[f64::NAN], &pos, 1, Some(0.25), 2.0).is_err());
}

#[test]
fn focal_loss_gradient() {
    let mut r = ChaCha8Rng::seed_from_u64(1);
    let x = random_vec(&mut r, 12, 3.0);
    let labels = [AnchorLabel::Positive(2), AnchorLabel::Negative, AnchorLabel::Ignore, AnchorLabel::Positive(0)];
    let (_, g) = focal_loss(&x, &labels, 3, Some(0.25), 2.0).unwrap();
    let f = |p: &[f64]| focal_loss(p, &labels, 3, Some(0.25), 2.0).unwrap().0;
    assert!(fd_error(f, &x, &g, &(0..12).collect::<Vec<_>>(), 1e-6) < 1e-3);
}

#[test]
fn balanced_l1_shape() {
    let p = BalancedL1::new(0.5, 1.5);
    let (l, r) = (balanced_l1(1.0 - 1e-12, &p), balanced_l1(1.0, &p));
    assert!((l.0 - r.0).abs() < 1e-9 && (l.1 - r.1).abs() < 1e-9);
    assert!((balanced_l1(100.0, &p).1 - 1.5).abs() < 1e-12);
    assert!((balanced_l1(100.0, &p).0 - balanced_l1(99.0, &p).0 - 1.5).abs() < 1e-9);
    let t = [[0.1, -0.2, 0.3, 2.0]];
    assert_eq!(balanced_l1_loss(&t, &t, &p).unwrap().0, 0.0);
    let mut r = ChaCha8Rng::seed_from_u64(2);
    let x = random_vec(&mut r, 8, 2.5);
    let rows = |v: &[f64]| vec![[v[0], v[1], v[2], v[3]], [v[4], v[5], v[6], v[7]]];
    let target = [[0.0; 4]; 2];
    let (_, g) = balanced_l1_loss(&rows(&x), &target, &p).unwrap();
    let flat: Vec<f64> = g.iter().flatten().copied().collect();
    let f = |v: &[f64]| balanced_l1_loss(&rows(v), &target, &p).unwrap().0;
    assert!(fd_error(f, &x, &flat, &(0..8).collect::<Vec<_>>(), 1e-6) < 1e-3);
}

#[test]
fn det_loss_gradients_match_finite_differences() {
    let cfg = DetHeadConfig {
        num_classes: 2,
        ..Default::default()
    };
    let shapes = [LevelShape { h: 2, w: 2, stride: 8 }, LevelShape { h: 1, w: 1, stride: 16 }];
    let anchors = generate_anchors(&shapes, &cfg);
    let gts = [(BBox::new(2.0, 3.0, 14.0, 13.0), 1), (BBox::new(0.0, 0.0, 30.0, 28.0), 0)];
    let targets = vec![match_anchors(&anchors, &gts, &cfg)];
    assert!(targets[0].num_positive() > 0);
    let a = cfg.anchors_per_location();
    let mut r = ChaCha8Rng::seed_from_u64(3);
    let lshape = |sh: &LevelShape| [1, a * 2, sh.h, sh.w];
    let dshape = |sh: &LevelShape| [1, a * 4, sh.h, sh.w];
    let sizes: Vec<usize> = shapes.iter().flat_map(|s| [a * 2 * s.h * s.w, a * 4 * s.h * s.w]).collect();
    let x = random_vec(&mut r, sizes.iter().sum(), 1.5);
    let split = |v: &[f64]| {
        let mut off = 0;
        let mut ts = Vec::new();
        for (i, sh) in shapes.iter().enumerate() {
            for (j, shape) in [lshape(sh), dshape(sh)].into_iter().enumerate() {
                let n = sizes[2 * i + j];
                ts.push(Tensor::from_vec(&shape, v[off..off + n].to_vec()).unwrap());
                off += n;
            }
        }
        ts
    };
    let eval = |v: &[f64]| {
        let ts = split(v);
        det_loss(&cfg, &anchors, &[&ts[0], &ts[2]], &[&ts[1], &ts[3]], &targets).unwrap()
    };
    let out = eval(&x);
    let mut g = Vec::new();
    for l in 0..2 {
        g.extend_from_slice(out.grad_logits[l].data());
        g.extend_from_slice(out.grad_deltas[l].data());
    }
    let f = |v: &[f64]| eval(v).total;
    assert!(fd_error(f, &x, &g, &(0..x.len()).collect::<Vec<_>>(), 1e-6) < 1e-3);
}

#[test]
fn seg_loss_examples() {
    let mask = Mask {
        width: 2,
        height: 2,
        data: vec![0, 1, 2, 255],
    };
    let mut perfect = Tensor::zeros(&[1, 3, 2, 2]);
    for p in 0..3 {
        perfect.data_mut()[usize::from(mask.data[p]) * 4 + p] = 20.0;
        for c in 0..3 {
            if c != usize::from(mask.data[p]) {
                perfect.data_mut()[c * 4 + p] = -20.0;
            }
        }
    }
    assert!(seg_loss(&perfect, &[&mask], 255).unwrap().0 < 1e-6);
    let uniform = Tensor::zeros(&[1, 3, 2, 2]);
    assert!((seg_loss(&uniform, &[&mask], 255).unwrap().0 - 3f64.ln()).abs() < 1e-12);
    let all_ignored = Mask {
        data: vec![255; 4],
        ..mask.clone()
    };
    assert!(seg_loss(&uniform, &[&all_ignored], 255).is_err());
}

#[test]
fn seg_loss_ignores_marked_pixels_and_matches_fd() {
    let mut r = ChaCha8Rng::seed_from_u64(4);
    let x = random_vec(&mut r, 3 * 8, 2.0);
    let full = Mask {
        width: 4,
        height: 2,
        data: vec![0, 1, 2, 1, 0, 0, 2, 1],
    };
    let mut half = full.clone();
    half.data[4..].fill(255);
    let t = |v: &[f64]| Tensor::from_vec(&[1, 3, 2, 4], v.to_vec()).unwrap();
    let per_pixel = |p: usize| {
        let v: Vec<f64> = (0..3).map(|c| x[c * 8 + p]).collect();
        let z: f64 = v.iter().map(|a| a.exp()).sum();
        z.ln() - v[usize::from(full.data[p])]
    };
    let want = (0..4).map(per_pixel).sum::<f64>() / 4.0;
    let (got, g) = seg_loss(&t(&x), &[&half], 255).unwrap();
    assert!((got - want).abs() < 1e-12);
    let f = |v: &[f64]| seg_loss(&t(v), &[&full], 255).unwrap().0;
    let (_, gf) = seg_loss(&t(&x), &[&full], 255).unwrap();
    assert!(fd_error(f, &x, gf.data(), &(0..24).collect::<Vec<_>>(), 1e-6) < 1e-3);
    assert!(g.data()[4..8].iter().all(|v| *v == 0.0));
}

#[test]
fn mask_prediction_rules() {
    let mut onehot = Tensor::zeros(&[1, 3, 1, 3]);
    for (p, c) in [2usize, 0, 1].into_iter().enumerate() {
        onehot.data_mut()[c * 3 + p] = 1.0;
    }
    assert_eq!(predict_mask(&onehot, 0).unwrap().data, [2, 0, 1]);
    assert_eq!(predict_mask(&Tensor::full(&[1, 3, 1, 3], 0.7), 0).unwrap().data, [0, 0, 0]);
    let mut shifted = onehot.clone();
    for p in 0..3 {
        for c in 0..3 {
            shifted.data_mut()[c * 3 + p] += 10.0 * p as f64;
        }
    }
    assert_eq!(predict_mask(&shifted, 0).unwrap(), predict_mask(&onehot, 0).unwrap());
    let mut r = ChaCha8Rng::seed_from_u64(5);
    let x = Tensor::from_vec(&[1, 4, 2, 2], random_vec(&mut r, 16, 5.0)).unwrap();
    for p in 0..4 {
        let s: f64 = softmax(&x, 0).unwrap().iter().map(|row| row[p]).sum();
        assert!((s - 1.0).abs() < 1e-9);
    }
}

fn encoder_only(backbone: BackboneKind, channels: usize) -> ModelConfig {
    ModelConfig {
        encoder: EncoderConfig {
            backbone,
            det_channels: channels,
            ..Default::default()
        },
        det_head: None,
        seg_head: None,
    }
}

#[test]
fn pyramid_shapes() {
    let m = encoder_only(BackboneKind::Tiny, 256);
    let p = m.init(0).unwrap();
    for (h, w) in [(64, 64), (37, 50), (33, 17)] {
        let mut s = Session::inference(&p);
        let x = s.input(Tensor::full(&[1, 3, h, w], 0.1));
        let pyr = m.encoder.encode(&mut s, x).unwrap();
        for (v, &st) in pyr.levels.iter().zip(&[8, 16, 32]) {
            assert_eq!(s.graph.value(*v).shape(), [1, 256, h.div_ceil(st), w.div_ceil(st)]);
        }
    }
}

#[test]
fn zero_weights_give_zero_features_and_neutral_heads() {
    let m = tiny_model();
    let mut p = m.init(0).unwrap();
    for (_, t) in p.iter_mut() {
        t.data_mut().fill(0.0);
    }
    let mut s = Session::inference(&p);
    let x = s.input(Tensor::full(&[1, 3, 32, 32], 0.5));
    let out = m.forward(&mut s, x, true, true).unwrap();
    for v in &out.pyramid.levels {
        assert!(s.graph.value(*v).data().iter().all(|a| *a == 0.0));
    }
    let det = out.det.unwrap();
    assert!(s.graph.value(det[0].logits).data().iter().all(|a| *a == 0.0));
    let seg = s.graph.value(out.seg.unwrap());
    assert_eq!(seg.shape(), [1, 4, 32, 32]);
    let probs = softmax(seg, 0).unwrap();
    assert!(probs.iter().flatten().all(|v| (v - 0.25).abs() < 1e-12));
}

#[test]
fn outputs_are_deterministic_and_shaped() {
    let m = tiny_model();
    let p = m.init(3).unwrap();
    let run = || {
        let mut s = Session::inference(&p);
        let x = s.input(Tensor::full(&[2, 3, 32, 32], 0.3));
        let out = m.forward(&mut s, x, true, true).unwrap();
        let det = out.det.unwrap();
        let a = m.det_head.as_ref().unwrap().anchors_per_location();
        assert_eq!(s.graph.value(det[0].logits).shape(), [2, a * 3, 4, 4]);
        assert_eq!(s.graph.value(det[0].deltas).shape(), [2, a * 4, 4, 4]);
        (s.graph.value(det[2].logits).clone(), s.graph.value(out.seg.unwrap()).clone())
    };
    assert_eq!(run(), run());
}

#[test]
fn parameter_counting() {
    let mut d = Decls::default();
    d.conv("x", 256, 128, 1, true, Init::He);
    assert_eq!(d.count(), 32_896);
    let m = tiny_model();
    let n = m.count_parameters().unwrap();
    assert_eq!(m.init(0).unwrap().count(), n);
    let p = m.init(0).unwrap();
    let parts = [Part::Backbone, Part::Neck, Part::DetHead, Part::SegHead];
    assert_eq!(parts.iter().map(|&x| p.count_part(x)).sum::<usize>(), n);
}

#[test]
fn every_encoder_parameter_gets_a_finite_gradient() {
    let m = tiny_model();
    let p = m.init(1).unwrap();
    let data = common::tiny_data(2, 1);
    let samples: Vec<_> = data.samples.iter().collect();
    let batch = mtlab::model::pad_batch(&samples).unwrap();
    let mut s = Session::new(&p, |_| true);
    let x = s.input(batch.images);
    let out = m.forward(&mut s, x, true, true).unwrap();
    let mut terms = Vec::new();
    let mut r = ChaCha8Rng::seed_from_u64(6);
    for v in out.det.unwrap().iter().flat_map(|l| [l.logits, l.deltas]).chain([out.seg.unwrap()]) {
        let t = s.graph.value(v);
        let c = Tensor::from_vec(t.shape(), random_vec(&mut r, t.numel(), 1.0)).unwrap();
        let value: f64 = t.data().iter().zip(c.data()).map(|(a, b)| a * b).sum();
        terms.push((s.graph.custom_scalar(value, vec![(v, c)]).unwrap(), 1.0));
    }
    let root = s.graph.weighted_sum(&terms).unwrap();
    let grads = s.graph.backward(root).unwrap();
    let g = s.param_grads(&grads);
    for name in p.names().filter(|n| Part::of(n).is_some_and(|x| x.is_encoder())) {
        let t = g.get(name).unwrap_or_else(|| panic!("{name} has no gradient"));
        assert!(t.is_finite() && t.sq_norm() > 0.0, "{name}");
    }
}

#[test]
fn encoder_gradient_matches_finite_differences() {
    let m = tiny_model().with_heads(&[]);
    let p = m.init(2).unwrap();
    let mut r = ChaCha8Rng::seed_from_u64(7);
    let img = Tensor::from_vec(&[1, 3, 32, 32], random_vec(&mut r, 3 * 32 * 32, 1.0)).unwrap();
    let probe = |params: &mtlab::params::ParamSet, grads: bool| {
        let mut s = Session::new(params, |_| grads);
        let x = s.input(img.clone());
        let pyr = m.encoder.encode(&mut s, x).unwrap();
        let mut total = 0.0;
        let mut terms = Vec::new();
        for (i, v) in pyr.levels.iter().enumerate() {
            let t = s.graph.value(*v);
            let w = 1.0 + i as f64;
            total += w * t.data().iter().map(|a| a * a.sin()).sum::<f64>();
            let g: Vec<f64> = t.data().iter().map(|a| w * (a.sin() + a * a.cos())).collect();
            let g = Tensor::from_vec(t.shape(), g).unwrap();
            terms.push((s.graph.custom_scalar(0.0, vec![(*v, g)]).unwrap(), 1.0));
        }
        let grads = if grads {
            let root = s.graph.weighted_sum(&terms).unwrap();
            Some(s.param_grads(&s.graph.backward(root).unwrap()))
        } else {
            None
        };
        (total, grads)
    };
    let (_, g) = probe(&p, true);
    let g = g.unwrap();
    let mut names: Vec<&String> = p.names().collect();
    names.shuffle(&mut r);
    for name in names.into_iter().take(12) {
        let t = p.get(name).unwrap();
        let idx: Vec<usize> = (0..3).map(|_| rand::Rng::random_range(&mut r, 0..t.numel())).collect();
        let f = |v: &[f64]| {
            let mut q = p.clone();
            q.get_mut(name).unwrap().data_mut().copy_from_slice(v);
            probe(&q, false).0
        };
        let err = fd_error(f, t.data(), g[name].data(), &idx, 1e-5);
        assert!(err < 1e-3, "{name}: {err}");
    }
}

#[test]
fn seg_head_output_matches_input_size() {
    let m = ModelConfig {
        seg_head: Some(SegHeadConfig {
            num_classes: 3,
            seg_channels: 8,
            ..Default::default()
        }),
        ..encoder_only(BackboneKind::Tiny, 8)
    };
    let p = m.init(0).unwrap();
    for (h, w) in [(64, 64), (32, 96)] {
        let mut s = Session::inference(&p);
        let x = s.input(Tensor::full(&[1, 3, h, w], 0.2));
        let out = m.forward(&mut s, x, false, true).unwrap();
        assert_eq!(s.graph.value(out.seg.unwrap()).shape(), [1, 3, h, w]);
    }
    let _ = encode_deltas(&BBox::new(0.0, 0.0, 4.0, 4.0), &BBox::new(0.0, 0.0, 4.0, 4.0), &[1.0; 4]);
}
