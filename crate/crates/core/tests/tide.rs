mod common;

use common::{det, gt, random_instance, scene};
use mtlab::dethead::Detection;
use mtlab::evalmetrics::compute_ap_at;
use mtlab::tide::{
    apply_fix, classify_errors, compare_reports, format_table, tide_deltas, ErrorLabel, Fix, TideConfig,
    TideReport, TIDE_COLUMNS,
};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[test]
fn threshold_rules() {
    let cfg = TideConfig::default();
    let g = vec![vec![gt(0.0, 0.0, 10.0, 10.0, 0)]];
    let label = |d: Detection| classify_errors(&[vec![d]], &g, &cfg).unwrap().labels[0][0];
    assert_eq!(label(det(0.0, 0.0, 3.0, 10.0, 0, 0.5)), Some(ErrorLabel::Loc));
    assert_eq!(label(det(9.5, 9.5, 20.0, 20.0, 0, 0.5)), Some(ErrorLabel::Bkg));
    assert_eq!(label(det(0.0, 0.0, 10.0, 10.0, 0, 0.5)), None);
    let two = vec![det(0.0, 0.0, 10.0, 10.0, 0, 0.9), det(0.0, 0.0, 10.0, 9.0, 0, 0.8)];
    assert_eq!(classify_errors(&[two], &g, &cfg).unwrap().labels[0], [None, Some(ErrorLabel::Dupe)]);
}

#[test]
fn each_scene_is_classified_as_its_injected_error() {
    let cfg = TideConfig::default();
    for label in ErrorLabel::ALL {
        let (d, g, _) = scene(label);
        let c = classify_errors(&d, &g, &cfg).unwrap();
        for other in ErrorLabel::ALL {
            assert_eq!(c.count(other), usize::from(other == label), "{label:?} scene, {other:?} count");
        }
    }
}

#[test]
fn each_scene_gains_only_on_its_own_column() {
    let cfg = TideConfig::default();
    for label in ErrorLabel::ALL {
        let (d, g, k) = scene(label);
        let r = tide_deltas(&d, &g, k, &cfg).unwrap();
        assert!(r.deltas.ap50 < 100.0);
        for other in ErrorLabel::ALL {
            let v = r.deltas.delta(other);
            if other == label {
                assert!(v > 0.0, "{label:?} scene: own delta {v}");
            } else {
                assert_eq!(v, 0.0, "{label:?} scene: {other:?} delta {v}");
            }
        }
    }
}

#[test]
fn deltas_equal_a_recompute_after_the_fix() {
    let cfg = TideConfig::default();
    for label in ErrorLabel::ALL {
        let (d, g, k) = scene(label);
        let c = classify_errors(&d, &g, &cfg).unwrap();
        let (fd, fg) = apply_fix(&d, &g, &c, Fix::Error(label));
        let base = compute_ap_at(&d, &g, k, 0.5).unwrap();
        let fixed = compute_ap_at(&fd, &fg, k, 0.5).unwrap();
        let r = tide_deltas(&d, &g, k, &cfg).unwrap();
        assert!((r.deltas.delta(label) - (fixed - base)).abs() < 1e-9);
    }
    // Bkg scene by hand: precision 1/2 at recall 1/2 and 2/3 at recall 1,
    // so the envelope is 2/3 throughout.
    let (d, g, k) = scene(ErrorLabel::Bkg);
    let r = tide_deltas(&d, &g, k, &cfg).unwrap();
    assert!((r.deltas.ap50 - 200.0 / 3.0).abs() < 1e-9);
    assert!((r.deltas.bkg - 100.0 / 3.0).abs() < 1e-9);
    // A background detection scored below the only true positive costs nothing.
    let g = vec![vec![gt(0.0, 0.0, 10.0, 10.0, 0)]];
    let d = vec![vec![det(0.0, 0.0, 10.0, 10.0, 0, 0.9), det(40.0, 40.0, 50.0, 50.0, 0, 0.5)]];
    let r = tide_deltas(&d, &g, 1, &cfg).unwrap();
    assert_eq!((r.deltas.ap50, r.deltas.bkg), (100.0, 0.0));
}

#[test]
fn error_free_predictions_have_zero_deltas() {
    let g = vec![vec![gt(0.0, 0.0, 10.0, 10.0, 0), gt(5.0, 5.0, 20.0, 20.0, 1)], vec![gt(1.0, 1.0, 4.0, 6.0, 1)]];
    let d: Vec<Vec<_>> = g
        .iter()
        .map(|gs| gs.iter().map(|b| det(b.bbox.x1, b.bbox.y1, b.bbox.x2, b.bbox.y2, b.class_id, 0.9)).collect())
        .collect();
    let r = tide_deltas(&d, &g, 2, &TideConfig::default()).unwrap();
    assert_eq!(r.deltas.ap50, 100.0);
    assert!(r.deltas.values()[1..].iter().all(|v| *v == 0.0));
}

#[test]
fn random_instances_keep_the_invariants() {
    let cfg = TideConfig::default();
    let mut r = ChaCha8Rng::seed_from_u64(11);
    for _ in 0..500 {
        let (d, g) = random_instance(&mut r);
        let c = classify_errors(&d, &g, &cfg).unwrap();
        let typed: usize = ErrorLabel::ALL[..5].iter().map(|l| c.count(*l)).sum();
        assert_eq!(c.false_positives(), typed);
        assert_eq!(c.false_positives() + c.true_positives(), d.iter().map(Vec::len).sum::<usize>());
        let report = tide_deltas(&d, &g, 2, &cfg).unwrap();
        for (name, v) in TIDE_COLUMNS.iter().zip(report.deltas.values()).skip(1) {
            assert!(v >= -1e-9, "{name} delta {v} on {d:?} {g:?}");
        }
        for label in [ErrorLabel::Both, ErrorLabel::Dupe, ErrorLabel::Bkg, ErrorLabel::Miss] {
            let (fd, fg) = apply_fix(&d, &g, &c, Fix::Error(label));
            assert_eq!(classify_errors(&fd, &fg, &cfg).unwrap().count(label), 0, "{label:?}");
        }
    }
}

#[test]
fn fixed_scenes_are_clean() {
    let cfg = TideConfig::default();
    for label in ErrorLabel::ALL {
        let (d, g, _) = scene(label);
        let c = classify_errors(&d, &g, &cfg).unwrap();
        let (fd, fg) = apply_fix(&d, &g, &c, Fix::Error(label));
        assert_eq!(classify_errors(&fd, &fg, &cfg).unwrap().count(label), 0);
    }
}

#[test]
fn comparison_table() {
    let cfg = TideConfig::default();
    let (d, g, k) = scene(ErrorLabel::Bkg);
    let a = tide_deltas(&d, &g, k, &cfg).unwrap();
    let same = compare_reports(&a, &a).unwrap();
    assert!(same.delta.values().iter().all(|v| *v == 0.0));
    let better: Vec<Vec<_>> = vec![d[0][1..].to_vec()];
    let b = tide_deltas(&better, &g, k, &cfg).unwrap();
    let c = compare_reports(&a, &b).unwrap();
    assert!((c.delta.ap50 - (b.deltas.ap50 - a.deltas.ap50)).abs() < 1e-12);
    assert!(c.delta.bkg < 0.0);
    assert_eq!(TIDE_COLUMNS, ["AP50", "Cls", "Loc", "Both", "Dupe", "Bkg", "Miss", "FP", "FN"]);
    let table = format_table(&[("A", &c.a), ("B", &c.b), ("B - A", &c.delta)]);
    let header: Vec<&str> = table.lines().next().unwrap().split_whitespace().collect();
    assert_eq!(header[header.len() - 9..], TIDE_COLUMNS);
    assert_eq!(table.lines().count(), 4);
    let mut g3 = g.clone();
    g3[0].pop();
    let shifted = tide_deltas(&d, &g3, k, &cfg).unwrap();
    assert!(compare_reports(&a, &shifted).is_err());
}

#[test]
fn report_file_round_trip() {
    let (d, g, k) = scene(ErrorLabel::Loc);
    let r = tide_deltas(&d, &g, k, &TideConfig::default()).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("tide.json");
    r.write(&p).unwrap();
    assert_eq!(TideReport::read(&p).unwrap(), r);
    let bad = TideConfig { fg: 0.1, bg: 0.5 };
    assert!(tide_deltas(&d, &g, k, &bad).is_err());
}
