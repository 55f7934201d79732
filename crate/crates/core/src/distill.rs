//! Feature-imitation distillation from frozen single-task teachers into a
//! student: the student's pyramid is projected by a learnable 1x1
//! convolution per teacher and pulled towards the teacher's pyramid with a
//! mean squared error over all levels.

use std::collections::{BTreeMap, HashMap};
use std::path::{Path, PathBuf};

use mtlab_autograd::{Tensor, Var};
use serde::{Deserialize, Serialize};

use crate::dataio::{Sample, Task};
use crate::error::{invalid, Error, Result};
use crate::model::{pad_batch, ModelConfig, Outputs};
use crate::nn::{self, Decls, Init};
use crate::params::{ParamSet, Session};
use crate::trainer::{self, Checkpoint, ChunkContext, LossTerm, Start, StepHook, TrainConfig, TrainData, TrainMode, TrainOptions, TrainOutcome};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum KdMode {
    /// Imitate the teacher of the annotated task.
    Mse1,
    /// Imitate the teacher of the task without annotations.
    Mse0,
    /// Imitate both teachers.
    Mse2,
    /// Single-task student imitating its own task's teacher.
    StlKd,
}

impl std::str::FromStr for KdMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "mse1" | "1mse" => Ok(KdMode::Mse1),
            "mse0" | "0mse" => Ok(KdMode::Mse0),
            "mse2" | "2mse" => Ok(KdMode::Mse2),
            "stl_kd" | "stlkd" | "stl" => Ok(KdMode::StlKd),
            _ => Err(invalid(format!("unknown distillation mode {s:?}"))),
        }
    }
}

/// Teachers imitated on a batch annotated for `tag`.
pub fn route_kd(tag: Task, mode: KdMode) -> Vec<Task> {
    match mode {
        KdMode::Mse1 | KdMode::StlKd => vec![tag],
        KdMode::Mse0 => vec![tag.other()],
        KdMode::Mse2 => vec![Task::Det, Task::Seg],
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DistillConfig {
    pub mode: KdMode,
    #[serde(default = "one")]
    pub kd_weight: f64,
    #[serde(default)]
    pub det_teacher: Option<PathBuf>,
    #[serde(default)]
    pub seg_teacher: Option<PathBuf>,
}

fn one() -> f64 {
    1.0
}

impl DistillConfig {
    pub fn teacher_path(&self, task: Task) -> Option<&Path> {
        match task {
            Task::Det => self.det_teacher.as_deref(),
            Task::Seg => self.seg_teacher.as_deref(),
        }
    }

    /// Teachers the mode can request when students train on `tasks`.
    pub fn required_teachers(&self, tasks: &[Task]) -> Vec<Task> {
        let mut out: Vec<Task> = tasks.iter().flat_map(|&t| route_kd(t, self.mode)).collect();
        out.sort();
        out.dedup();
        out
    }
}

/// Pyramid levels of a batch flattened to `[n][C][N]` with `N = sum h_l*w_l`,
/// column blocks in level (increasing stride) order.
#[derive(Clone, Debug, PartialEq)]
pub struct FlatFeatures {
    pub batch: usize,
    pub channels: usize,
    pub shapes: Vec<(usize, usize)>,
    /// First column of each level.
    pub offsets: Vec<usize>,
    pub data: Vec<f64>,
}

impl FlatFeatures {
    pub fn columns(&self) -> usize {
        self.shapes.iter().map(|(h, w)| h * w).sum()
    }

    fn index(&self, b: usize, c: usize, col: usize) -> usize {
        (b * self.channels + c) * self.columns() + col
    }
}

pub fn flatten_concat(levels: &[&Tensor]) -> Result<FlatFeatures> {
    let first = levels.first().ok_or_else(|| invalid("no pyramid levels"))?;
    let (n, c, _, _) = first.dims4()?;
    let mut shapes = Vec::with_capacity(levels.len());
    for t in levels {
        let (tn, tc, h, w) = t.dims4()?;
        if tc != c || tn != n {
            return Err(invalid(format!("level of shape {:?} does not share {n} images of {c} channels", t.shape())));
        }
        shapes.push((h, w));
    }
    let mut offsets = Vec::with_capacity(levels.len());
    let mut acc = 0;
    for (h, w) in &shapes {
        offsets.push(acc);
        acc += h * w;
    }
    let mut data = vec![0.0; n * c * acc];
    for (t, (&off, &(h, w))) in levels.iter().zip(offsets.iter().zip(&shapes)) {
        let hw = h * w;
        for bc in 0..n * c {
            data[bc * acc + off..bc * acc + off + hw].copy_from_slice(&t.data()[bc * hw..(bc + 1) * hw]);
        }
    }
    Ok(FlatFeatures {
        batch: n,
        channels: c,
        shapes,
        offsets,
        data,
    })
}

/// Inverse of [`flatten_concat`].
pub fn unflatten(f: &FlatFeatures) -> Result<Vec<Tensor>> {
    let total = f.columns();
    f.shapes
        .iter()
        .zip(&f.offsets)
        .map(|(&(h, w), &off)| {
            let hw = h * w;
            let mut data = Vec::with_capacity(f.batch * f.channels * hw);
            for bc in 0..f.batch * f.channels {
                data.extend_from_slice(&f.data[bc * total + off..bc * total + off + hw]);
            }
            Ok(Tensor::from_vec(&[f.batch, f.channels, h, w], data)?)
        })
        .collect()
}

/// Per-column affine map `W x + b`; `weight` is `[C_t, C_s, 1, 1]`.
pub fn project_student(f: &FlatFeatures, weight: &Tensor, bias: Option<&Tensor>) -> Result<FlatFeatures> {
    let s = weight.shape();
    if s.len() != 4 || s[1] != f.channels || s[2] != 1 || s[3] != 1 {
        return Err(invalid(format!("projection {:?} does not take {} channels", s, f.channels)));
    }
    let ct = s[0];
    let cols = f.columns();
    let mut out = FlatFeatures {
        batch: f.batch,
        channels: ct,
        shapes: f.shapes.clone(),
        offsets: f.offsets.clone(),
        data: vec![0.0; f.batch * ct * cols],
    };
    let w = weight.data();
    for b in 0..f.batch {
        for o in 0..ct {
            let bo = bias.map_or(0.0, |t| t.data()[o]);
            for col in 0..cols {
                let mut v = bo;
                for i in 0..f.channels {
                    v += w[o * f.channels + i] * f.data[f.index(b, i, col)];
                }
                let idx = out.index(b, o, col);
                out.data[idx] = v;
            }
        }
    }
    Ok(out)
}

/// Mean squared difference over every element and its gradient with
/// respect to `student`.
pub fn kd_loss(student: &FlatFeatures, teacher: &FlatFeatures) -> Result<(f64, FlatFeatures)> {
    if student.batch != teacher.batch || student.channels != teacher.channels || student.shapes != teacher.shapes {
        return Err(invalid(format!(
            "student features {}x{}x{:?} do not match teacher {}x{}x{:?}",
            student.batch, student.channels, student.shapes, teacher.batch, teacher.channels, teacher.shapes
        )));
    }
    let m = student.data.len().max(1) as f64;
    let mut grad = student.clone();
    let mut total = 0.0;
    for ((g, &a), &b) in grad.data.iter_mut().zip(&student.data).zip(&teacher.data) {
        let d = a - b;
        total += d * d;
        *g = 2.0 * d / m;
    }
    Ok((total / m, grad))
}

/// Declares the projection from `student_channels` to the teacher of `task`.
pub fn declare_projection(d: &mut Decls, task: Task, student_channels: usize, teacher_channels: usize) {
    d.conv(&projection_name(task), student_channels, teacher_channels, 1, true, Init::Identity);
}

pub fn projection_name(task: Task) -> String {
    format!("kd_proj.{}", task.name())
}

/// A frozen single-task network whose post-neck features are imitated.
#[derive(Clone, Debug)]
pub struct Teacher {
    pub task: Task,
    pub model: ModelConfig,
    pub params: ParamSet,
}

impl Teacher {
    pub fn load(task: Task, path: &Path) -> Result<Teacher> {
        let ck = Checkpoint::load(path)?;
        if !ck.model.has_head(task) {
            return Err(Error::Config(format!("{} holds no {task} model", path.display())));
        }
        Ok(Teacher {
            task,
            model: ck.model,
            params: ck.params,
        })
    }

    /// Post-neck features of `samples` padded to a common size.
    pub fn features(&self, samples: &[&Sample]) -> Result<Vec<Tensor>> {
        let batch = pad_batch(samples)?;
        let mut s = Session::inference(&self.params);
        let x = s.input(batch.images);
        let p = self.model.encoder.encode(&mut s, x)?;
        Ok(p.levels.iter().map(|&v| s.graph.value(v).clone()).collect())
    }
}

/// One teacher request, recorded whether or not it was served from cache.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TeacherCall {
    pub iteration: usize,
    pub batch_task: Task,
    pub teacher: Task,
    pub ids: Vec<String>,
    pub cached: bool,
}

type CacheKey = (Task, String, bool, usize, usize);

/// Step hook adding the routed distillation losses. Teacher features depend
/// only on the sample, its flip, and the padded size, so they are cached.
pub struct KdHook {
    pub mode: KdMode,
    pub kd_weight: f64,
    teachers: BTreeMap<Task, Teacher>,
    cache: HashMap<CacheKey, Vec<Tensor>>,
    pub use_cache: bool,
    pub calls: Vec<TeacherCall>,
}

impl KdHook {
    pub fn new(mode: KdMode, kd_weight: f64, teachers: Vec<Teacher>) -> Self {
        Self {
            mode,
            kd_weight,
            teachers: teachers.into_iter().map(|t| (t.task, t)).collect(),
            cache: HashMap::new(),
            use_cache: true,
            calls: Vec::new(),
        }
    }

    fn teacher_features(&mut self, task: Task, ctx: &ChunkContext) -> Result<Vec<Tensor>> {
        let teacher = self
            .teachers
            .get(&task)
            .ok_or_else(|| Error::Config(format!("no {task} teacher loaded")))?;
        let (h, w) = (ctx.batch.images.shape()[2], ctx.batch.images.shape()[3]);
        let keys: Vec<CacheKey> = ctx
            .samples
            .iter()
            .zip(ctx.flipped)
            .map(|(s, &f)| (task, s.id.clone(), f, h, w))
            .collect();
        let cached = self.use_cache && keys.iter().all(|k| self.cache.contains_key(k));
        self.calls.push(TeacherCall {
            iteration: ctx.iteration,
            batch_task: ctx.chunk.task().unwrap_or(Task::Det),
            teacher: task,
            ids: ctx.chunk.ids.clone(),
            cached,
        });
        let per_sample: Vec<Vec<Tensor>> = if cached {
            keys.iter().map(|k| self.cache[k].clone()).collect()
        } else {
            let refs: Vec<&Sample> = ctx.samples.iter().collect();
            let levels = teacher.features(&refs)?;
            let split = (0..refs.len())
                .map(|b| levels.iter().map(|t| t.select_batch(b)).collect::<std::result::Result<Vec<_>, _>>())
                .collect::<std::result::Result<Vec<_>, _>>()?;
            if self.use_cache {
                for (k, v) in keys.iter().zip(&split) {
                    self.cache.insert(k.clone(), v.clone());
                }
            }
            split
        };
        let nlev = per_sample[0].len();
        (0..nlev)
            .map(|l| {
                let parts: Vec<Tensor> = per_sample.iter().map(|s| s[l].clone()).collect();
                Ok(Tensor::stack_batch(&parts)?)
            })
            .collect()
    }
}

impl StepHook for KdHook {
    fn extra_losses(&mut self, s: &mut Session, out: &Outputs, ctx: &ChunkContext) -> Result<Vec<LossTerm>> {
        if self.kd_weight == 0.0 {
            return Ok(Vec::new());
        }
        let tag = ctx
            .chunk
            .task()
            .ok_or_else(|| Error::Config("distillation needs batches annotated for one task".into()))?;
        let mut terms = Vec::new();
        for teacher in route_kd(tag, self.mode) {
            let target = self.teacher_features(teacher, ctx)?;
            let name = projection_name(teacher);
            let projected: Vec<Var> = out
                .pyramid
                .levels
                .iter()
                .map(|&v| nn::conv(s, v, &name, 1))
                .collect::<Result<_>>()?;
            let values: Vec<&Tensor> = projected.iter().map(|&v| s.graph.value(v)).collect();
            let student = flatten_concat(&values)?;
            let target = flatten_concat(&target.iter().collect::<Vec<_>>())?;
            let (loss, grad) = kd_loss(&student, &target)?;
            let local = projected.into_iter().zip(unflatten(&grad)?).collect();
            let v = s.graph.custom_scalar(loss, local)?;
            terms.push(LossTerm {
                name: format!("kd_{}", teacher.name()),
                value: v,
                weight: self.kd_weight,
            });
        }
        Ok(terms)
    }
}

/// Checks that a teacher's grid and the student's grid coincide.
fn check_teacher(student: &ModelConfig, t: &Teacher) -> Result<()> {
    if t.model.encoder.strides != student.encoder.strides {
        return Err(Error::Config(format!(
            "{} teacher strides {:?} differ from student strides {:?}",
            t.task, t.model.encoder.strides, student.encoder.strides
        )));
    }
    Ok(())
}

/// Fresh student parameters plus one projection per teacher.
pub fn student_params(student: &ModelConfig, teachers: &[Teacher], seed: u64) -> Result<ParamSet> {
    let mut d = student.declare()?;
    for t in teachers {
        check_teacher(student, t)?;
        declare_projection(&mut d, t.task, student.encoder.det_channels, t.model.encoder.det_channels);
    }
    d.materialize(seed)
}

pub struct DistillOutcome {
    pub train: TrainOutcome,
    pub calls: Vec<TeacherCall>,
}

/// Trains a student with ground-truth losses plus `kd_weight` times the
/// routed imitation losses. The MSE modes need MT_ITERATION, STL_KD a
/// single-task mode. Teachers are only read.
pub fn train_student(
    student: &ModelConfig,
    cfg: &TrainConfig,
    kd: &DistillConfig,
    teachers: Vec<Teacher>,
    data: &TrainData,
    opts: TrainOptions,
) -> Result<DistillOutcome> {
    match (kd.mode, cfg.mode) {
        (KdMode::StlKd, TrainMode::SingleDet | TrainMode::SingleSeg) => {}
        (KdMode::StlKd, m) => return Err(Error::Config(format!("STL_KD needs a single-task mode, not {m:?}"))),
        (_, TrainMode::MtIteration) => {}
        (_, m) => return Err(Error::Config(format!("{:?} distillation needs MT_ITERATION, not {m:?}", kd.mode))),
    }
    if !(kd.kd_weight >= 0.0 && kd.kd_weight.is_finite()) {
        return Err(Error::Config("kd_weight must be a non-negative number".into()));
    }
    let needed = kd.required_teachers(&cfg.tasks());
    for t in &needed {
        if !teachers.iter().any(|x| x.task == *t) {
            return Err(Error::Config(format!("{:?} needs a {t} teacher", kd.mode)));
        }
    }
    let teachers: Vec<Teacher> = teachers.into_iter().filter(|t| needed.contains(&t.task)).collect();
    let params = student_params(student, &teachers, cfg.seed)?;
    let mut hook = KdHook::new(kd.mode, kd.kd_weight, teachers);
    let train = trainer::train(
        student,
        cfg,
        data,
        Start::Params(params),
        TrainOptions {
            hook: Some(&mut hook),
            ..opts
        },
    )?;
    Ok(DistillOutcome {
        train,
        calls: hook.calls,
    })
}

/// Loads the teachers named in `kd` for the given student tasks.
pub fn load_teachers(kd: &DistillConfig, tasks: &[Task]) -> Result<Vec<Teacher>> {
    kd.required_teachers(tasks)
        .into_iter()
        .map(|t| {
            let path = kd
                .teacher_path(t)
                .ok_or_else(|| Error::Config(format!("{:?} needs a {t} teacher checkpoint", kd.mode)))?;
            Teacher::load(t, path)
        })
        .collect()
}
