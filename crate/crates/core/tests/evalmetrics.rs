mod common;

use common::{det, gt, oracle_ap, random_instance};
use mtlab::dataio::Mask;
use mtlab::evalmetrics::{compute_ap, compute_map, compute_miou, Interpolation, MAP_THRESHOLDS};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

const ALL: Interpolation = Interpolation::AllPoints;

#[test]
fn exact_match_scores_full_ap() {
    let d = vec![vec![det(0.0, 0.0, 10.0, 10.0, 0, 0.9)]];
    let g = vec![vec![gt(0.0, 0.0, 10.0, 10.0, 0)]];
    assert_eq!(compute_ap(&d, &g, 0, 0.5, ALL).unwrap(), Some(100.0));
}

#[test]
fn iou_point_six_passes_half_fails_three_quarters() {
    // Intersection 6x10 over union 10x10: IoU 0.6.
    let d = vec![vec![det(4.0, 0.0, 10.0, 10.0, 0, 0.9)]];
    let g = vec![vec![gt(0.0, 0.0, 10.0, 10.0, 0)]];
    assert_eq!(compute_ap(&d, &g, 0, 0.5, ALL).unwrap(), Some(100.0));
    assert_eq!(compute_ap(&d, &g, 0, 0.75, ALL).unwrap(), Some(0.0));
}

#[test]
fn tp_fp_tp_matches_hand_value_and_oracle() {
    let d = vec![vec![
        det(0.0, 0.0, 10.0, 10.0, 0, 0.9),
        det(50.0, 50.0, 60.0, 60.0, 0, 0.8),
        det(20.0, 20.0, 30.0, 30.0, 0, 0.7),
    ]];
    let g = vec![vec![gt(0.0, 0.0, 10.0, 10.0, 0), gt(20.0, 20.0, 30.0, 30.0, 0)]];
    let ap = compute_ap(&d, &g, 0, 0.5, ALL).unwrap().unwrap();
    assert!((ap - 100.0 * (0.5 + 0.5 * 2.0 / 3.0)).abs() < 1e-9);
    assert!((ap - oracle_ap(&d, &g, 0, 0.5).unwrap()).abs() < 1e-9);
}

#[test]
fn map_thresholds_and_extremes() {
    assert_eq!(MAP_THRESHOLDS.len(), 10);
    assert!((MAP_THRESHOLDS[0] - 0.5).abs() < 1e-12 && (MAP_THRESHOLDS[9] - 0.95).abs() < 1e-12);
    let g = vec![vec![gt(0.0, 0.0, 10.0, 10.0, 0), gt(5.0, 5.0, 20.0, 25.0, 1)], vec![gt(1.0, 2.0, 3.0, 4.0, 1)]];
    let perfect: Vec<Vec<_>> = g
        .iter()
        .map(|gs| gs.iter().map(|b| det(b.bbox.x1, b.bbox.y1, b.bbox.x2, b.bbox.y2, b.class_id, 1.0)).collect())
        .collect();
    let r = compute_map(&perfect, &g, 2, ALL).unwrap();
    assert_eq!((r.map, r.ap50, r.ap75), (100.0, 100.0, 100.0));
    assert_eq!(r.thresholds.len(), 10);
    let empty = vec![Vec::new(), Vec::new()];
    assert_eq!(compute_map(&empty, &g, 2, ALL).unwrap().map, 0.0);
}

#[test]
fn ap_matches_oracle_on_random_instances() {
    let mut r = ChaCha8Rng::seed_from_u64(1);
    for _ in 0..300 {
        let (d, g) = random_instance(&mut r);
        for class in 0..2 {
            for thr in [0.3, 0.5, 0.75] {
                let got = compute_ap(&d, &g, class, thr, ALL).unwrap();
                let want = oracle_ap(&d, &g, class, thr);
                match (got, want) {
                    (Some(a), Some(b)) => assert!((a - b).abs() < 1e-9, "{a} vs {b}: {d:?} {g:?}"),
                    (a, b) => assert_eq!(a, b),
                }
            }
        }
    }
}

#[test]
fn ap_ignores_input_order() {
    let mut r = ChaCha8Rng::seed_from_u64(2);
    for _ in 0..100 {
        let (d, g) = random_instance(&mut r);
        let mut shuffled = d.clone();
        for ds in &mut shuffled {
            ds.shuffle(&mut r);
        }
        for c in 0..2 {
            assert_eq!(compute_ap(&d, &g, c, 0.5, ALL).unwrap(), compute_ap(&shuffled, &g, c, 0.5, ALL).unwrap());
        }
    }
}

#[test]
fn removing_a_false_positive_never_lowers_ap() {
    let mut r = ChaCha8Rng::seed_from_u64(3);
    for _ in 0..200 {
        let (d, g) = random_instance(&mut r);
        for c in 0..2 {
            let Some(base) = compute_ap(&d, &g, c, 0.5, ALL).unwrap() else { continue };
            // A detection of class c with no same-class gt overlap is a false
            // positive under every matching.
            for (img, ds) in d.iter().enumerate() {
                for (k, x) in ds.iter().enumerate() {
                    let isolated = x.class_id == c
                        && g[img].iter().filter(|b| b.class_id == c).all(|b| x.bbox.iou(&b.bbox) < 0.5);
                    if isolated {
                        let mut fewer = d.clone();
                        fewer[img].remove(k);
                        assert!(compute_ap(&fewer, &g, c, 0.5, ALL).unwrap().unwrap() >= base - 1e-12);
                    }
                }
            }
        }
    }
}

fn mask(w: usize, data: &[u8]) -> Mask {
    Mask {
        width: w,
        height: data.len() / w,
        data: data.to_vec(),
    }
}

#[test]
fn miou_identity_and_complement() {
    let g = mask(4, &[0, 0, 1, 1, 0, 0, 1, 1, 0, 1, 1, 1, 255, 0, 0, 1]);
    assert_eq!(compute_miou(&[&g], &[&g], 2, 255).unwrap().miou, 100.0);
    let comp = mask(4, &g.data.iter().map(|&v| if v == 255 { 0 } else { 1 - v }).collect::<Vec<_>>());
    let r = compute_miou(&[&comp], &[&g], 2, 255).unwrap();
    assert_eq!(r.per_class, vec![Some(0.0), Some(0.0)]);
}

#[test]
fn miou_matches_pixel_counting() {
    let g = mask(4, &[0, 0, 1, 1, 0, 2, 2, 1, 0, 2, 2, 1, 255, 255, 0, 0]);
    let p = mask(4, &[0, 1, 1, 1, 0, 2, 0, 1, 2, 2, 2, 1, 1, 1, 0, 2]);
    let r = compute_miou(&[&p], &[&g], 3, 255).unwrap();
    let mut expect = Vec::new();
    for c in 0..3u8 {
        let (mut i, mut u) = (0, 0);
        for (&pv, &gv) in p.data.iter().zip(&g.data) {
            if gv == 255 {
                continue;
            }
            i += usize::from(pv == c && gv == c);
            u += usize::from(pv == c || gv == c);
        }
        expect.push(100.0 * i as f64 / u as f64);
    }
    for (got, want) in r.per_class.iter().zip(&expect) {
        assert!((got.unwrap() - want).abs() < 1e-12);
    }
    assert!((r.miou - expect.iter().sum::<f64>() / 3.0).abs() < 1e-12);
    assert!(compute_miou(&[&mask(2, &[0, 0])], &[&g], 3, 255).is_err());
}
