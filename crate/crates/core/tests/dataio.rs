use std::collections::BTreeSet;
use std::fs;

use mtlab::dataio::voc::{bundled_id_lists, read_id_pool, voc_split_target};
use mtlab::dataio::{
    apply_split, generate_synthetic, halve_subset, load_dataset, make_epoch_schedule, remap_classes, render_scene,
    save_dataset, save_split, split_id_pool, split_partial, ClassMap, Dataset, PartialSplit, ScheduleMode,
    ShapeInstance, SplitTarget, SynthSpec, Task,
};

fn small_spec() -> SynthSpec {
    SynthSpec {
        width: 16,
        height: 16,
        min_size: 3,
        max_size: 8,
        ..Default::default()
    }
}

fn ids(prefix: &str, n: usize) -> Vec<String> {
    (0..n).map(|i| format!("{prefix}{i:03}")).collect()
}

fn split_of(det: usize, seg: usize) -> PartialSplit {
    PartialSplit {
        seed: 0,
        det_ids: ids("d", det),
        seg_ids: ids("s", seg),
    }
}

#[test]
fn voc_pool_split_sizes() {
    let (with_mask, boxes_only) = read_id_pool(&bundled_id_lists()).unwrap();
    assert_eq!((with_mask.len(), boxes_only.len()), (10_582, 4_632));
    let s = split_id_pool(with_mask.clone(), boxes_only.clone(), 0, voc_split_target()).unwrap();
    assert_eq!((s.det_ids.len(), s.seg_ids.len()), (7_558, 7_656));
    let boxes: BTreeSet<&String> = boxes_only.iter().collect();
    assert!(s.seg_ids.iter().all(|id| !boxes.contains(id)));
    let h = halve_subset(&s, Task::Det, 0).unwrap();
    assert_eq!((h.det_ids.len(), h.seg_ids.len()), (3_779, 7_656));
    assert_eq!(h.seg_ids, s.seg_ids);
}

#[test]
fn two_fully_annotated_samples_split_one_each() {
    let ds = generate_synthetic(2, &small_spec(), 5).unwrap();
    let a = split_partial(&ds, 9, SplitTarget::SegFraction(0.5)).unwrap();
    assert_eq!((a.det_ids.len(), a.seg_ids.len()), (1, 1));
    assert_eq!(a, split_partial(&ds, 9, SplitTarget::SegFraction(0.5)).unwrap());
}

#[test]
fn maskless_samples_go_to_detection() {
    let mut ds = generate_synthetic(10, &small_spec(), 1).unwrap();
    let maskless: Vec<String> = ds.samples[..3].iter().map(|s| s.id.clone()).collect();
    for s in &mut ds.samples[..3] {
        s.mask = None;
    }
    for seed in 0..20 {
        let sp = split_partial(&ds, seed, SplitTarget::SegFraction(0.5)).unwrap();
        assert_eq!(sp.seg_ids.len(), 5);
        for id in &maskless {
            assert!(sp.det_ids.contains(id));
        }
    }
}

#[test]
fn halving_rules() {
    let s = split_of(4, 2);
    let h = halve_subset(&s, Task::Seg, 3).unwrap();
    assert_eq!(h.seg_ids.len(), 1);
    assert_eq!(h.det_ids, s.det_ids);
    assert_eq!(h, halve_subset(&s, Task::Seg, 3).unwrap());
    assert!(halve_subset(&split_of(3, 0), Task::Seg, 0).is_err());
}

#[test]
fn iteration_schedule_pads_smaller_subset() {
    let s = make_epoch_schedule(&split_of(4, 2), 2, ScheduleMode::Iteration, 0, 0).unwrap();
    let tasks: Vec<Task> = s.batches.iter().map(|b| b.task).collect();
    assert_eq!(tasks, [Task::Det, Task::Seg, Task::Det, Task::Seg]);
    let seg: Vec<&String> = s.batches.iter().filter(|b| b.task == Task::Seg).flat_map(|b| &b.ids).collect();
    for id in ids("s", 2) {
        assert_eq!(seg.iter().filter(|x| ***x == id).count(), 2);
    }
}

#[test]
fn epoch_schedule_one_batch_per_task() {
    let s = make_epoch_schedule(&split_of(2, 2), 2, ScheduleMode::Epoch, 0, 0).unwrap();
    assert_eq!(s.batches.len(), 2);
    assert_eq!((s.count(Task::Det), s.count(Task::Seg)), (1, 1));
    let odd = make_epoch_schedule(&split_of(2, 2), 2, ScheduleMode::Epoch, 0, 1).unwrap();
    assert_eq!(odd.batches[0].task, Task::Seg);
}

#[test]
fn equal_subsets_need_no_padding() {
    let s = make_epoch_schedule(&split_of(6, 6), 2, ScheduleMode::Iteration, 4, 2).unwrap();
    assert_eq!(s.batches.len(), 6);
    for (i, b) in s.batches.iter().enumerate() {
        assert_eq!(b.task, if i % 2 == 0 { Task::Det } else { Task::Seg });
    }
    let all: Vec<&String> = s.batches.iter().flat_map(|b| &b.ids).collect();
    assert_eq!(all.iter().collect::<BTreeSet<_>>().len(), 12);
    assert!(make_epoch_schedule(&split_of(6, 6), 0, ScheduleMode::Iteration, 0, 0).is_err());
}

#[test]
fn schedule_balance_over_sizes() {
    for (d, s) in [(1, 7), (9, 2), (5, 5), (13, 4)] {
        for b in 1..5 {
            let sch = make_epoch_schedule(&split_of(d, s), b, ScheduleMode::Iteration, 7, 1).unwrap();
            assert_eq!(sch.count(Task::Det), sch.count(Task::Seg));
            assert!(sch.batches.windows(2).all(|w| w[0].task != w[1].task));
        }
    }
}

#[test]
fn rectangle_mask_matches_box() {
    let spec = SynthSpec {
        width: 48,
        height: 48,
        ..Default::default()
    };
    let shape = ShapeInstance {
        class_id: 0,
        bounds: [10, 10, 30, 40],
        color: [200, 30, 30],
    };
    let s = render_scene(&spec, "r", &[shape], 0).unwrap();
    let b = &s.boxes.as_ref().unwrap()[0];
    assert_eq!([b.bbox.x1, b.bbox.y1, b.bbox.x2, b.bbox.y2], [10.0, 10.0, 30.0, 40.0]);
    assert_eq!(s.mask.as_ref().unwrap().data.iter().filter(|&&v| v == 1).count(), 600);
}

#[test]
fn synthetic_boxes_are_tight_mask_extents() {
    let spec = SynthSpec {
        max_shapes: 1,
        ..Default::default()
    };
    let ds = generate_synthetic(20, &spec, 3).unwrap();
    for s in &ds.samples {
        let m = s.mask.as_ref().unwrap();
        let b = &s.boxes.as_ref().unwrap()[0];
        let (mut x1, mut y1, mut x2, mut y2) = (usize::MAX, usize::MAX, 0, 0);
        for y in 0..m.height {
            for x in 0..m.width {
                if m.get(x, y) == b.class_id as u8 + 1 {
                    x1 = x1.min(x);
                    y1 = y1.min(y);
                    x2 = x2.max(x + 1);
                    y2 = y2.max(y + 1);
                }
            }
        }
        assert_eq!([x1, y1, x2, y2].map(|v| v as f64), [b.bbox.x1, b.bbox.y1, b.bbox.x2, b.bbox.y2], "{}", s.id);
    }
}

#[test]
fn synthetic_generation_is_deterministic() {
    assert!(generate_synthetic(0, &small_spec(), 0).is_err());
    assert_eq!(generate_synthetic(6, &small_spec(), 4).unwrap(), generate_synthetic(6, &small_spec(), 4).unwrap());
    assert_ne!(generate_synthetic(6, &small_spec(), 4).unwrap(), generate_synthetic(6, &small_spec(), 5).unwrap());
}

#[test]
fn save_load_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let ds = generate_synthetic(5, &small_spec(), 2).unwrap();
    save_dataset(&ds, dir.path()).unwrap();
    let back = load_dataset(dir.path()).unwrap();
    assert_eq!(back.dataset, ds);
    assert!(back.split.is_none());
}

#[test]
fn seg_assigned_sample_without_mask_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let ds = generate_synthetic(4, &small_spec(), 2).unwrap();
    save_dataset(&ds, dir.path()).unwrap();
    let split = split_partial(&ds, 0, SplitTarget::SegFraction(0.5)).unwrap();
    save_split(&split, &dir.path().join("split.json")).unwrap();
    assert!(load_dataset(dir.path()).is_ok());
    fs::remove_file(dir.path().join(format!("masks/{}.png", split.seg_ids[0]))).unwrap();
    let err = load_dataset(dir.path()).err().unwrap().to_string();
    assert!(err.contains(&split.seg_ids[0]), "{err}");
}

#[test]
fn inverted_box_names_the_sample() {
    let dir = tempfile::tempdir().unwrap();
    let ds = generate_synthetic(3, &small_spec(), 2).unwrap();
    save_dataset(&ds, dir.path()).unwrap();
    let path = dir.path().join("annotations.json");
    let mut v: serde_json::Value = serde_json::from_str(&fs::read_to_string(&path).unwrap()).unwrap();
    let bx = &mut v[1]["boxes"][0];
    let x1 = bx["x1"].clone();
    bx["x2"] = x1;
    fs::write(&path, v.to_string()).unwrap();
    let err = load_dataset(dir.path()).err().unwrap().to_string();
    assert!(err.contains(&ds.samples[1].id), "{err}");
}

#[test]
fn apply_split_keeps_one_annotation_per_sample() {
    let ds = generate_synthetic(8, &small_spec(), 1).unwrap();
    let sp = split_partial(&ds, 2, SplitTarget::SegCount(3)).unwrap();
    let view = apply_split(&ds, &sp).unwrap();
    for s in &view.samples {
        match s.task.unwrap() {
            Task::Det => assert!(s.boxes.is_some() && s.mask.is_none()),
            Task::Seg => assert!(s.boxes.is_none() && s.mask.is_some()),
        }
    }
    assert_eq!(view.samples.iter().filter(|s| s.task == Some(Task::Seg)).count(), 3);
}

#[test]
fn class_remapping() {
    let ds = generate_synthetic(4, &small_spec(), 1).unwrap();
    assert_eq!(remap_classes(&ds, &ClassMap::identity(&ds.classes.seg)).unwrap(), ds);
    let mut merge = ClassMap::identity(&ds.classes.seg);
    merge.mapping = [(0, 0), (1, 1), (2, 1), (3, 1)].into_iter().collect();
    merge.groups = vec!["background".into(), "shape".into()];
    let m = remap_classes(&ds, &merge).unwrap();
    for s in &m.samples {
        assert!(s.mask.as_ref().unwrap().data.iter().all(|&v| v <= 1 || v == 255));
        assert_eq!(s.boxes, ds.get(&s.id).unwrap().boxes);
    }
    merge.mapping.remove(&3);
    let has_three = ds.samples.iter().any(|s| s.mask.as_ref().unwrap().data.contains(&3));
    if has_three {
        assert!(remap_classes(&ds, &merge).err().unwrap().to_string().contains('3'));
    }
}

#[test]
fn voc_abstract_map_has_four_groups() {
    let m = ClassMap::voc_abstract();
    let groups: BTreeSet<u8> = (1..=20).map(|c| m.map(c).unwrap()).collect();
    assert_eq!(groups.len(), 4);
}

fn fuzz_dataset(r: &mut impl rand::Rng, seed: u64) -> Dataset {
    let n = r.random_range(2..30);
    let mut ds = generate_synthetic(n, &small_spec(), seed).unwrap();
    for s in &mut ds.samples {
        if r.random_bool(0.3) {
            s.mask = None;
        }
    }
    ds
}

#[test]
fn split_invariants_hold_on_fuzzed_inputs() {
    use rand::{Rng, SeedableRng};
    let mut r = rand_chacha::ChaCha8Rng::seed_from_u64(11);
    for case in 0..100u64 {
        let ds = fuzz_dataset(&mut r, case);
        let with_mask = ds.samples.iter().filter(|s| s.mask.is_some()).count();
        let seg = r.random_range(0..=with_mask);
        let seed = r.random::<u64>();
        let sp = split_partial(&ds, seed, SplitTarget::SegCount(seg)).unwrap();
        let d: BTreeSet<&String> = sp.det_ids.iter().collect();
        let s: BTreeSet<&String> = sp.seg_ids.iter().collect();
        assert!(d.is_disjoint(&s));
        let all: BTreeSet<String> = ds.ids().into_iter().collect();
        assert_eq!(d.union(&s).map(|x| (*x).clone()).collect::<BTreeSet<_>>(), all);
        assert!(sp.seg_ids.iter().all(|id| ds.get(id).unwrap().mask.is_some()));
        assert_eq!(sp.seg_ids.len(), seg);
        assert_eq!(sp, split_partial(&ds, seed, SplitTarget::SegCount(seg)).unwrap());
    }
}
