mod common;

use std::collections::BTreeSet;

use common::{fd_error, random_vec, tiny_data, tiny_model};
use mtlab::dataio::{apply_split, split_partial, SplitTarget, Task};
use mtlab::distill::{
    flatten_concat, kd_loss, project_student, route_kd, student_params, train_student, unflatten, DistillConfig,
    KdHook, KdMode, Teacher,
};
use mtlab::model::ModelConfig;
use mtlab::nn::{Decls, Init};
use mtlab::params::Part;
use mtlab::trainer::{step_gradients, train, Checkpoint, Chunk, Start, TrainConfig, TrainData, TrainMode, TrainOptions};
use mtlab_autograd::Tensor;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

fn rand_tensor(r: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    Tensor::from_vec(shape, random_vec(r, shape.iter().product(), 1.0)).unwrap()
}

fn pyramid(r: &mut ChaCha8Rng, n: usize, c: usize) -> Vec<Tensor> {
    [8, 4, 2].iter().map(|&s| rand_tensor(r, &[n, c, s, s])).collect()
}

#[test]
fn flatten_layout_and_round_trip() {
    let mut r = ChaCha8Rng::seed_from_u64(0);
    let levels = pyramid(&mut r, 2, 3);
    let refs: Vec<&Tensor> = levels.iter().collect();
    let f = flatten_concat(&refs).unwrap();
    assert_eq!(f.columns(), 84);
    assert_eq!(f.offsets, [0, 64, 80]);
    assert_eq!(unflatten(&f).unwrap(), levels);
    // Column 64 of channel 1 in image 1 is the first pixel of the 4x4 level.
    assert_eq!(f.data[(3 + 1) * 84 + 64], levels[1].data()[(3 + 1) * 16]);
    let swapped = flatten_concat(&[refs[1], refs[0], refs[2]]).unwrap();
    assert_ne!(swapped.data, f.data);
    let odd = rand_tensor(&mut r, &[2, 4, 2, 2]);
    assert!(flatten_concat(&[refs[0], &odd]).is_err());
}

#[test]
fn projection_rules() {
    let mut d = Decls::default();
    d.conv("p", 256, 256, 1, true, Init::Identity);
    assert_eq!(d.count(), 65_792);
    let mut r = ChaCha8Rng::seed_from_u64(1);
    let levels = pyramid(&mut r, 1, 4);
    let f = flatten_concat(&levels.iter().collect::<Vec<_>>()).unwrap();
    let mut small = Decls::default();
    small.conv("p", 4, 4, 1, true, Init::Identity);
    let p = small.materialize(0).unwrap();
    let (w, b) = (p.get("p.weight").unwrap(), p.get("p.bias").unwrap());
    assert_eq!(project_student(&f, w, Some(b)).unwrap(), f);
    let zero = Tensor::zeros(&[6, 4, 1, 1]);
    let out = project_student(&f, &zero, None).unwrap();
    assert_eq!(out.channels, 6);
    assert!(out.data.iter().all(|v| *v == 0.0));
    assert!(project_student(&f, &Tensor::zeros(&[6, 5, 1, 1]), None).is_err());
}

#[test]
fn kd_loss_values() {
    let mut r = ChaCha8Rng::seed_from_u64(2);
    let a = flatten_concat(&pyramid(&mut r, 2, 3).iter().collect::<Vec<_>>()).unwrap();
    assert_eq!(kd_loss(&a, &a).unwrap().0, 0.0);
    let mut shifted = a.clone();
    shifted.data.iter_mut().for_each(|v| *v += 2.0);
    assert!((kd_loss(&a, &shifted).unwrap().0 - 4.0).abs() < 1e-12);
    let b = flatten_concat(&pyramid(&mut r, 2, 3).iter().collect::<Vec<_>>()).unwrap();
    let mut brute = 0.0;
    for i in 0..a.data.len() {
        brute += (a.data[i] - b.data[i]).powi(2);
    }
    let (v, g) = kd_loss(&a, &b).unwrap();
    assert!((v - brute / (2.0 * 3.0 * 84.0)).abs() < 1e-12);
    // Same permutation of columns on both sides.
    let perm = |f: &mtlab::distill::FlatFeatures| {
        let mut out = f.clone();
        for row in 0..f.batch * f.channels {
            for col in 0..84 {
                out.data[row * 84 + col] = f.data[row * 84 + (col * 37) % 84];
            }
        }
        out
    };
    assert!((kd_loss(&perm(&a), &perm(&b)).unwrap().0 - v).abs() < 1e-12);
    let f = |x: &[f64]| {
        let mut s = a.clone();
        s.data.copy_from_slice(x);
        kd_loss(&s, &b).unwrap().0
    };
    let coords: Vec<usize> = (0..a.data.len()).step_by(7).collect();
    assert!(fd_error(f, &a.data, &g.data, &coords, 1e-6) < 1e-3);
    let other = flatten_concat(&pyramid(&mut r, 1, 3).iter().collect::<Vec<_>>()).unwrap();
    assert!(kd_loss(&a, &other).is_err());
}

#[test]
fn routing_table() {
    use Task::{Det, Seg};
    assert_eq!(route_kd(Det, KdMode::Mse1), [Det]);
    assert_eq!(route_kd(Seg, KdMode::Mse1), [Seg]);
    assert_eq!(route_kd(Det, KdMode::Mse0), [Seg]);
    assert_eq!(route_kd(Seg, KdMode::Mse0), [Det]);
    assert_eq!(route_kd(Det, KdMode::Mse2), [Det, Seg]);
    assert_eq!(route_kd(Seg, KdMode::Mse2), [Det, Seg]);
    assert_eq!(route_kd(Seg, KdMode::StlKd), [Seg]);
    for (s, m) in [("0mse", KdMode::Mse0), ("1mse", KdMode::Mse1), ("2mse", KdMode::Mse2)] {
        assert_eq!(s.parse::<KdMode>().unwrap(), m);
    }
}

fn teacher_model(task: Task) -> ModelConfig {
    let mut m = tiny_model().with_heads(&[task]);
    m.encoder.det_channels = 12;
    m
}

struct Fixture {
    _dir: tempfile::TempDir,
    paths: [std::path::PathBuf; 2],
}

fn save_teachers() -> Fixture {
    let dir = tempfile::tempdir().unwrap();
    let paths = [Task::Det, Task::Seg].map(|t| {
        let m = teacher_model(t);
        let p = dir.path().join(format!("{}.safetensors", t.name()));
        Checkpoint::new(m.clone(), m.init(40).unwrap()).save(&p).unwrap();
        p
    });
    Fixture { _dir: dir, paths }
}

fn kd_cfg(mode: KdMode, f: &Fixture, weight: f64) -> DistillConfig {
    DistillConfig {
        mode,
        kd_weight: weight,
        det_teacher: Some(f.paths[0].clone()),
        seg_teacher: Some(f.paths[1].clone()),
    }
}

fn teachers(f: &Fixture) -> Vec<Teacher> {
    vec![Teacher::load(Task::Det, &f.paths[0]).unwrap(), Teacher::load(Task::Seg, &f.paths[1]).unwrap()]
}

fn hash(p: &std::path::Path) -> Vec<u8> {
    Sha256::digest(std::fs::read(p).unwrap()).to_vec()
}

#[test]
fn four_batch_runs_follow_the_routing_table_and_leave_teachers_untouched() {
    let fx = save_teachers();
    let before: Vec<_> = fx.paths.iter().map(|p| hash(p)).collect();
    let full = tiny_data(16, 3);
    let split = split_partial(&full, 3, SplitTarget::SegFraction(0.5)).unwrap();
    let ds = apply_split(&full, &split).unwrap();
    let data = TrainData {
        samples: &ds,
        split: Some(&split),
        val: None,
    };
    let cfg = TrainConfig {
        mode: TrainMode::MtIteration,
        epochs: 1,
        batch_size: 4,
        lr: 0.01,
        eval_every: 0,
        ..Default::default()
    };
    for mode in [KdMode::Mse0, KdMode::Mse1, KdMode::Mse2] {
        let out = train_student(&tiny_model(), &cfg, &kd_cfg(mode, &fx, 1.0), teachers(&fx), &data, TrainOptions::default())
            .unwrap();
        assert_eq!(out.train.loss_trace.len(), 2);
        let tags: BTreeSet<Task> = out.calls.iter().map(|c| c.batch_task).collect();
        assert_eq!(tags.len(), 2);
        for tag in [Task::Det, Task::Seg] {
            let got: Vec<Task> = out.calls.iter().filter(|c| c.batch_task == tag).map(|c| c.teacher).collect();
            let want: Vec<Task> = (0..2).flat_map(|_| route_kd(tag, mode)).collect();
            assert_eq!(got, want, "{mode:?} {tag:?}");
        }
        let keys: BTreeSet<String> = out.train.history[0].losses.keys().cloned().collect();
        for t in [Task::Det, Task::Seg] {
            let name = format!("kd_{}", t.name());
            let routed = [Task::Det, Task::Seg].iter().any(|&tag| route_kd(tag, mode).contains(&t));
            assert_eq!(keys.contains(&name), routed, "{mode:?} {name}");
        }
    }
    let after: Vec<_> = fx.paths.iter().map(|p| hash(p)).collect();
    assert_eq!(before, after);
    let missing = DistillConfig {
        seg_teacher: None,
        ..kd_cfg(KdMode::Mse0, &fx, 1.0)
    };
    assert!(mtlab::distill::load_teachers(&missing, &[Task::Det, Task::Seg]).is_err());
}

#[test]
fn zero_kd_weight_reduces_to_plain_training() {
    let fx = save_teachers();
    let full = tiny_data(12, 4);
    let split = split_partial(&full, 4, SplitTarget::SegFraction(0.5)).unwrap();
    let ds = apply_split(&full, &split).unwrap();
    let data = TrainData {
        samples: &ds,
        split: Some(&split),
        val: None,
    };
    let cfg = TrainConfig {
        mode: TrainMode::MtIteration,
        epochs: 2,
        batch_size: 3,
        lr: 0.02,
        hflip: true,
        eval_every: 0,
        ..Default::default()
    };
    let kd = train_student(&tiny_model(), &cfg, &kd_cfg(KdMode::Mse2, &fx, 0.0), teachers(&fx), &data, TrainOptions::default())
        .unwrap();
    let plain = train(&tiny_model(), &cfg, &data, Start::Fresh, TrainOptions::default()).unwrap();
    assert_eq!(kd.train.loss_trace, plain.loss_trace);
    for part in [Part::Backbone, Part::Neck, Part::DetHead, Part::SegHead] {
        assert_eq!(kd.train.params.digest_part(part), plain.params.digest_part(part));
    }
}

#[test]
fn identity_projection_onto_own_weights_gives_zero_kd() {
    let fx = save_teachers();
    let t = teachers(&fx);
    let mut student = teacher_model(Task::Det);
    student.seg_head = tiny_model().seg_head;
    let mut p = student_params(&student, &t, 0).unwrap();
    for teacher in &t {
        for part in [Part::Backbone, Part::Neck] {
            p.merge(&teacher.params.part(part));
        }
    }
    let ds = tiny_data(4, 5);
    let cfg = TrainConfig {
        mode: TrainMode::MtIteration,
        ..Default::default()
    };
    let mut hook = KdHook::new(KdMode::Mse2, 1.0, t);
    let ids = ds.ids();
    let step = [Chunk::single(Task::Det, ids[..2].to_vec()), Chunk::single(Task::Seg, ids[2..].to_vec())];
    let r = step_gradients(&student, &cfg, &p, &ds, &step, 0, 0, Some(&mut hook)).unwrap();
    assert!(r.losses["kd_det"] < 1e-10 && r.losses["kd_seg"] < 1e-10, "{:?}", r.losses);
    assert!(r.grads.keys().any(|n| n.starts_with("kd_proj")));
    let served: Vec<bool> = hook.calls.iter().map(|c| c.cached).collect();
    assert_eq!(served, [false; 4]);
}

#[test]
fn mismatched_grids_and_modes_are_rejected() {
    let fx = save_teachers();
    let mut odd = tiny_model();
    odd.encoder.strides = vec![4, 8, 16];
    assert!(student_params(&odd, &teachers(&fx), 0).is_err());
    let ds = tiny_data(4, 6);
    let data = TrainData {
        samples: &ds,
        split: None,
        val: None,
    };
    let epoch = TrainConfig {
        mode: TrainMode::MtEpoch,
        ..Default::default()
    };
    assert!(train_student(&tiny_model(), &epoch, &kd_cfg(KdMode::Mse1, &fx, 1.0), teachers(&fx), &data, TrainOptions::default()).is_err());
}
