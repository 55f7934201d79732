//! Training loop for single-task, multi-task, and fine-tuning runs.

mod checkpoint;
mod eval;
mod optim;

pub use checkpoint::{Checkpoint, Progress};
pub use eval::{evaluate, predict, EvalSummary, Evaluation, Predictions};
pub use optim::{clip_grads, global_norm, learning_rate, LrSchedule, Sgd};

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::io::Write;
use std::path::PathBuf;

use mtlab_autograd::{Tensor, Var};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::dataio::{make_epoch_schedule, single_task_batches, Dataset, PartialSplit, Sample, ScheduleMode, Task};
use crate::dethead::{det_loss, match_anchors, DetTargets};
use crate::error::{invalid, io_err, Error, Result};
use crate::model::{pad_batch, ModelConfig, Outputs, PaddedBatch};
use crate::params::{ParamSet, Part, Session};
use crate::rng;
use crate::seghead::seg_loss;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum TrainMode {
    SingleDet,
    SingleSeg,
    /// Alternating whole-epoch task blocks over a partial split.
    MtEpoch,
    /// Alternating DET and SEG batches, one update per pair.
    MtIteration,
    /// Every sample carries both annotations; losses are summed.
    MtFull,
    /// Frozen encoder, fresh head for `finetune_task`.
    FinetuneHead,
    /// Whole network, fresh head for `finetune_task`.
    FinetuneFull,
}

impl std::str::FromStr for TrainMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        serde_json::from_value(serde_json::Value::String(s.to_ascii_uppercase()))
            .map_err(|_| invalid(format!("unknown training mode {s:?}")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub mode: TrainMode,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub lr_schedule: LrSchedule,
    pub warmup_iters: usize,
    pub momentum: f64,
    pub weight_decay: f64,
    /// Global gradient-norm cap; 0 disables clipping.
    pub clip_norm: f64,
    pub det_weight: f64,
    pub seg_weight: f64,
    /// Random horizontal flips of training samples.
    pub hflip: bool,
    pub seed: u64,
    /// Parameter groups that never receive updates.
    pub freeze: Vec<Part>,
    /// Task of the new head in the fine-tuning modes.
    pub finetune_task: Option<Task>,
    /// Validate every this many epochs (and after the last); 0 validates
    /// only after the last epoch.
    pub eval_every: usize,
    pub eval_batch_size: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            mode: TrainMode::SingleDet,
            epochs: 30,
            batch_size: 8,
            lr: 5e-3,
            lr_schedule: LrSchedule::Cosine,
            warmup_iters: 0,
            momentum: 0.9,
            weight_decay: 5e-4,
            clip_norm: 10.0,
            det_weight: 1.0,
            seg_weight: 1.0,
            hflip: false,
            seed: 0,
            freeze: Vec::new(),
            finetune_task: None,
            eval_every: 1,
            eval_batch_size: 8,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(format!("train: {m}")));
        if self.epochs == 0 {
            return bad("epochs must be positive");
        }
        if self.batch_size == 0 || self.eval_batch_size == 0 {
            return bad("batch sizes must be positive");
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return bad("lr must be a non-negative number");
        }
        if !(0.0..1.0).contains(&self.momentum) || self.weight_decay < 0.0 || self.clip_norm < 0.0 {
            return bad("need 0 <= momentum < 1, weight_decay >= 0, clip_norm >= 0");
        }
        if self.det_weight < 0.0 || self.seg_weight < 0.0 {
            return bad("loss weights must be non-negative");
        }
        if matches!(self.mode, TrainMode::FinetuneHead | TrainMode::FinetuneFull) && self.finetune_task.is_none() {
            return bad("fine-tuning needs finetune_task");
        }
        Ok(())
    }

    /// Tasks whose heads receive gradients.
    pub fn tasks(&self) -> Vec<Task> {
        match self.mode {
            TrainMode::SingleDet => vec![Task::Det],
            TrainMode::SingleSeg => vec![Task::Seg],
            TrainMode::MtEpoch | TrainMode::MtIteration | TrainMode::MtFull => vec![Task::Det, Task::Seg],
            TrainMode::FinetuneHead | TrainMode::FinetuneFull => self.finetune_task.into_iter().collect(),
        }
    }

    /// Explicitly frozen groups plus the encoder when fine-tuning the head.
    pub fn frozen_parts(&self) -> Vec<Part> {
        let mut parts = self.freeze.clone();
        if self.mode == TrainMode::FinetuneHead {
            parts.extend([Part::Backbone, Part::Neck]);
        }
        parts.sort();
        parts.dedup();
        parts
    }
}

/// Training samples plus, for the partial-label modes, the task split.
#[derive(Clone, Copy)]
pub struct TrainData<'a> {
    pub samples: &'a Dataset,
    pub split: Option<&'a PartialSplit>,
    pub val: Option<&'a Dataset>,
}

/// Samples forwarded together. `det`/`seg` select the supervised heads.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Chunk {
    pub ids: Vec<String>,
    pub det: bool,
    pub seg: bool,
}

impl Chunk {
    pub fn single(task: Task, ids: Vec<String>) -> Self {
        Self {
            ids,
            det: task == Task::Det,
            seg: task == Task::Seg,
        }
    }

    /// The only supervised task, if exactly one.
    pub fn task(&self) -> Option<Task> {
        match (self.det, self.seg) {
            (true, false) => Some(Task::Det),
            (false, true) => Some(Task::Seg),
            _ => None,
        }
    }
}

/// One parameter update: gradients of all chunks are accumulated first.
pub type Step = Vec<Chunk>;

fn annotated(s: &Sample, task: Task) -> bool {
    match task {
        Task::Det => s.boxes.is_some(),
        Task::Seg => s.mask.is_some(),
    }
}

fn check_sample(s: &Sample, task: Task) -> Result<()> {
    if s.task.is_some_and(|t| t != task) || !annotated(s, task) {
        return Err(invalid(format!("sample {} has no {task} annotation", s.id)));
    }
    Ok(())
}

/// Checks that the model and data fit the mode before any work is done.
pub fn check_data(model: &ModelConfig, cfg: &TrainConfig, data: &TrainData) -> Result<()> {
    cfg.validate()?;
    for t in cfg.tasks() {
        if !model.has_head(t) {
            return Err(Error::Config(format!("{:?} needs a {t} head", cfg.mode)));
        }
    }
    match cfg.mode {
        TrainMode::MtEpoch | TrainMode::MtIteration => {
            let split = data
                .split
                .ok_or_else(|| Error::Config(format!("{:?} needs a partial split", cfg.mode)))?;
            for task in [Task::Det, Task::Seg] {
                for s in data.samples.select(split.ids(task))? {
                    check_sample(s, task)?;
                }
            }
        }
        TrainMode::MtFull => {
            for s in &data.samples.samples {
                if s.boxes.is_none() || s.mask.is_none() {
                    return Err(invalid(format!("sample {} lacks one of the two annotations", s.id)));
                }
            }
        }
        _ => {
            let task = cfg.tasks()[0];
            for s in &data.samples.samples {
                check_sample(s, task)?;
            }
        }
    }
    if data.samples.is_empty() {
        return Err(invalid("no training samples"));
    }
    Ok(())
}

/// Parameter updates of trainer epoch `epoch`. In MT_EPOCH each trainer
/// epoch is one task block of the two-block schedule, so consecutive
/// epochs alternate tasks and both tasks lead equally often.
pub fn plan_epoch(cfg: &TrainConfig, data: &TrainData, epoch: usize) -> Result<Vec<Step>> {
    let bs = cfg.batch_size;
    let steps = match cfg.mode {
        TrainMode::MtEpoch => {
            let split = data.split.ok_or_else(|| Error::Config("MT_EPOCH needs a partial split".into()))?;
            let round = epoch / 2;
            let task = crate::dataio::epoch_task_order(round)[epoch % 2];
            make_epoch_schedule(split, bs, ScheduleMode::Epoch, cfg.seed, round)?
                .batches
                .into_iter()
                .filter(|b| b.task == task)
                .map(|b| vec![Chunk::single(b.task, b.ids)])
                .collect()
        }
        TrainMode::MtIteration => {
            let split = data.split.ok_or_else(|| Error::Config("MT_ITERATION needs a partial split".into()))?;
            let batches = make_epoch_schedule(split, bs, ScheduleMode::Iteration, cfg.seed, epoch)?.batches;
            batches
                .chunks(2)
                .map(|p| p.iter().map(|b| Chunk::single(b.task, b.ids.clone())).collect())
                .collect()
        }
        TrainMode::MtFull => single_task_batches(&data.samples.ids(), Task::Det, bs, cfg.seed, epoch)?
            .into_iter()
            .map(|b| {
                vec![Chunk {
                    ids: b.ids,
                    det: true,
                    seg: true,
                }]
            })
            .collect(),
        _ => {
            let task = cfg.tasks()[0];
            single_task_batches(&data.samples.ids(), task, bs, cfg.seed, epoch)?
                .into_iter()
                .map(|b| vec![Chunk::single(task, b.ids)])
                .collect()
        }
    };
    Ok(steps)
}

/// What a [`StepHook`] sees of the chunk being processed.
pub struct ChunkContext<'a> {
    pub epoch: usize,
    pub iteration: usize,
    pub chunk: &'a Chunk,
    /// Samples as fed to the model, after any flip.
    pub samples: &'a [Sample],
    pub flipped: &'a [bool],
    pub batch: &'a PaddedBatch,
}

pub struct LossTerm {
    pub name: String,
    pub value: Var,
    pub weight: f64,
}

/// Adds loss terms to a chunk's graph (distillation).
pub trait StepHook {
    fn extra_losses(&mut self, s: &mut Session, out: &Outputs, ctx: &ChunkContext) -> Result<Vec<LossTerm>>;
}

/// Accumulated gradients and logged loss values of one step.
#[derive(Clone, Debug, Default)]
pub struct StepResult {
    pub grads: BTreeMap<String, Tensor>,
    pub losses: BTreeMap<String, f64>,
    /// Weighted total over all chunks.
    pub total: f64,
}

/// Flip decisions for every sample of a step, fixed by seed and iteration.
fn flips(cfg: &TrainConfig, step: &[Chunk], iteration: usize) -> Vec<Vec<bool>> {
    let mut r = rng::stream(cfg.seed, "hflip", iteration as u64);
    step.iter()
        .map(|c| c.ids.iter().map(|_| cfg.hflip && r.random::<bool>()).collect())
        .collect()
}

fn det_targets(model: &ModelConfig, out: &Outputs, samples: &[Sample]) -> Result<Vec<DetTargets>> {
    let cfg = model.det_head.as_ref().expect("checked by caller");
    let anchors = out.anchors.as_ref().expect("anchors accompany detection outputs");
    samples
        .iter()
        .map(|s| {
            let boxes = s
                .boxes
                .as_ref()
                .ok_or_else(|| invalid(format!("sample {} has no boxes", s.id)))?;
            let gts: Vec<_> = boxes.iter().map(|b| (b.bbox, b.class_id)).collect();
            Ok(match_anchors(anchors, &gts, cfg))
        })
        .collect()
}

/// Forward and backward of one chunk. Returns gradients of the trainable
/// parameters it touched, its logged losses, and its weighted total.
#[allow(clippy::too_many_arguments)]
fn run_chunk(
    model: &ModelConfig,
    cfg: &TrainConfig,
    params: &ParamSet,
    chunk: &Chunk,
    samples: Vec<Sample>,
    flipped: &[bool],
    epoch: usize,
    iteration: usize,
    hook: Option<&mut (dyn StepHook + '_)>,
) -> Result<StepResult> {
    let frozen = cfg.frozen_parts();
    let (det, seg) = (chunk.det, chunk.seg);
    let trainable = move |name: &str| match Part::of(name) {
        None => false,
        Some(p) if frozen.contains(&p) => false,
        Some(Part::DetHead) => det,
        Some(Part::SegHead) => seg,
        Some(_) => true,
    };
    let mut s = Session::new(params, trainable);
    let refs: Vec<&Sample> = samples.iter().collect();
    let batch = pad_batch(&refs)?;
    let images = s.input(batch.images.clone());
    let out = model.forward(&mut s, images, det, seg)?;
    let mut terms = Vec::new();
    let mut losses = BTreeMap::new();
    if let (Some(levels), Some(anchors), Some(dcfg)) = (&out.det, &out.anchors, &model.det_head) {
        let targets = det_targets(model, &out, &samples)?;
        let logits: Vec<&Tensor> = levels.iter().map(|l| s.graph.value(l.logits)).collect();
        let deltas: Vec<&Tensor> = levels.iter().map(|l| s.graph.value(l.deltas)).collect();
        let dl = det_loss(dcfg, anchors, &logits, &deltas, &targets)?;
        let mut local = Vec::with_capacity(2 * levels.len());
        for (l, (gl, gd)) in levels.iter().zip(dl.grad_logits.into_iter().zip(dl.grad_deltas)) {
            local.push((l.logits, gl));
            local.push((l.deltas, gd));
        }
        let v = s.graph.custom_scalar(dl.total, local)?;
        terms.push((v, cfg.det_weight));
        losses.insert("det".to_string(), dl.total);
        losses.insert("det_cls".to_string(), dl.cls);
        losses.insert("det_loc".to_string(), dl.loc);
    }
    if let (Some(v), Some(scfg)) = (out.seg, &model.seg_head) {
        let masks = batch
            .masks
            .iter()
            .zip(&samples)
            .map(|(m, smp)| m.as_ref().ok_or_else(|| invalid(format!("sample {} has no mask", smp.id))))
            .collect::<Result<Vec<_>>>()?;
        let (value, grad) = seg_loss(s.graph.value(v), &masks, scfg.ignore_label)?;
        let node = s.graph.custom_scalar(value, vec![(v, grad)])?;
        terms.push((node, cfg.seg_weight * scfg.loss_weight));
        losses.insert("seg".to_string(), value);
    }
    if let Some(h) = hook {
        let ctx = ChunkContext {
            epoch,
            iteration,
            chunk,
            samples: &samples,
            flipped,
            batch: &batch,
        };
        for t in h.extra_losses(&mut s, &out, &ctx)? {
            let value = s.graph.value(t.value);
            if value.numel() != 1 || !value.is_finite() {
                return Err(invalid(format!("loss term {} is not a finite scalar", t.name)));
            }
            losses.insert(t.name, value.data()[0]);
            terms.push((t.value, t.weight));
        }
    }
    let root = s.graph.weighted_sum(&terms)?;
    let total = s.graph.value(root).data()[0];
    let grads = s.graph.backward(root)?;
    Ok(StepResult {
        grads: s.param_grads(&grads),
        losses,
        total,
    })
}

/// Gradients of one step: each chunk is forwarded and back-propagated on
/// its own and the results are summed, so a DET+SEG step yields exactly the
/// sum of the two isolated task gradients.
pub fn step_gradients(
    model: &ModelConfig,
    cfg: &TrainConfig,
    params: &ParamSet,
    samples: &Dataset,
    step: &[Chunk],
    epoch: usize,
    iteration: usize,
    mut hook: Option<&mut (dyn StepHook + '_)>,
) -> Result<StepResult> {
    let index: HashMap<&str, &Sample> = samples.samples.iter().map(|s| (s.id.as_str(), s)).collect();
    let mut out = StepResult::default();
    for (chunk, flipped) in step.iter().zip(flips(cfg, step, iteration)) {
        let batch = chunk
            .ids
            .iter()
            .zip(&flipped)
            .map(|(id, &f)| {
                let s = index
                    .get(id.as_str())
                    .ok_or_else(|| invalid(format!("unknown sample id {id}")))?;
                Ok(if f { s.hflip() } else { (*s).clone() })
            })
            .collect::<Result<Vec<_>>>()?;
        let r = run_chunk(model, cfg, params, chunk, batch, &flipped, epoch, iteration, hook.as_deref_mut())?;
        for (n, g) in r.grads {
            match out.grads.get_mut(&n) {
                Some(acc) => acc.add_assign(&g),
                None => {
                    out.grads.insert(n, g);
                }
            }
        }
        for (k, v) in r.losses {
            *out.losses.entry(k).or_insert(0.0) += v;
        }
        out.total += r.total;
    }
    Ok(out)
}

/// One line of `metrics.jsonl`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub tasks: Vec<Task>,
    pub updates: usize,
    pub iteration: usize,
    pub lr: f64,
    /// Mean over the steps that logged each loss.
    pub losses: BTreeMap<String, f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub val: Option<EvalSummary>,
}

/// Initial weights of a run.
pub enum Start {
    /// Seeded initialization of every declared parameter.
    Fresh,
    Params(ParamSet),
    /// Continue a checkpointed run where it stopped.
    Resume {
        params: ParamSet,
        momentum: ParamSet,
        progress: Progress,
    },
}

impl Start {
    pub fn from_checkpoint(ck: Checkpoint) -> Result<Start> {
        let progress = ck
            .progress
            .ok_or_else(|| Error::Config("checkpoint carries no training progress".into()))?;
        Ok(Start::Resume {
            params: ck.params,
            momentum: ck.momentum,
            progress,
        })
    }
}

#[derive(Default)]
pub struct TrainOptions<'h> {
    /// Run directory for checkpoints and `metrics.jsonl`; nothing is written
    /// when absent.
    pub out_dir: Option<PathBuf>,
    /// Keep a checkpoint per epoch in addition to `last` and `best`.
    pub keep_epoch_checkpoints: bool,
    /// Stop once this many epochs are complete.
    pub stop_after: Option<usize>,
    pub verbose: bool,
    pub hook: Option<&'h mut dyn StepHook>,
    /// Extra metadata stored in every checkpoint.
    pub metadata: BTreeMap<String, String>,
}

pub struct TrainOutcome {
    pub params: ParamSet,
    pub momentum: ParamSet,
    pub progress: Progress,
    pub history: Vec<EpochRecord>,
    /// Weighted total loss of every update, in order.
    pub loss_trace: Vec<f64>,
    /// Parameters of the best validated epoch.
    pub best: Option<ParamSet>,
    pub last_eval: Option<Evaluation>,
}

/// Initial parameters for fine-tuning: the encoder of `source` and a fresh
/// head for `task`.
pub fn finetune_params(model: &ModelConfig, source: &Checkpoint, task: Task, seed: u64) -> Result<ParamSet> {
    if source.model.encoder != model.encoder {
        return Err(Error::Config("checkpoint encoder differs from the configured encoder".into()));
    }
    if !model.has_head(task) {
        return Err(Error::Config(format!("model has no {task} head to fine-tune")));
    }
    let mut params = source.params.part(Part::Backbone);
    params.merge(&source.params.part(Part::Neck));
    let head = match task {
        Task::Det => Part::DetHead,
        Task::Seg => Part::SegHead,
    };
    params.merge(&model.init(seed)?.part(head));
    Ok(params)
}

fn mean_losses(sums: &BTreeMap<String, (f64, usize)>) -> BTreeMap<String, f64> {
    sums.iter().map(|(k, (s, n))| (k.clone(), s / *n as f64)).collect()
}

/// Trains `model` under `cfg`. All randomness derives from the seed and the
/// epoch/update counters, so resuming from a checkpoint reproduces an
/// uninterrupted run bit for bit.
pub fn train(model: &ModelConfig, cfg: &TrainConfig, data: &TrainData, start: Start, mut opts: TrainOptions) -> Result<TrainOutcome> {
    check_data(model, cfg, data)?;
    let heads = cfg.tasks();
    let model = model.with_heads(&heads);
    let (mut params, mut momentum, mut progress) = match start {
        Start::Fresh => (model.init(cfg.seed)?, ParamSet::new(), Progress::default()),
        Start::Params(p) => (p, ParamSet::new(), Progress::default()),
        Start::Resume {
            params,
            momentum,
            progress,
        } => (params, momentum, progress),
    };
    progress.seed = cfg.seed;
    let mut parts = vec![Part::Backbone, Part::Neck];
    parts.extend(heads.iter().map(|t| match t {
        Task::Det => Part::DetHead,
        Task::Seg => Part::SegHead,
    }));
    model.check_params(&params, &parts)?;

    let plans = (0..cfg.epochs).map(|e| plan_epoch(cfg, data, e)).collect::<Result<Vec<_>>>()?;
    let total_updates: usize = plans.iter().map(Vec::len).sum();
    let sgd = Sgd {
        momentum: cfg.momentum,
        weight_decay: cfg.weight_decay,
    };
    let metrics_path = opts.out_dir.as_ref().map(|d| d.join("metrics.jsonl"));
    if let (Some(dir), Some(path)) = (&opts.out_dir, &metrics_path) {
        fs::create_dir_all(dir).map_err(io_err(dir))?;
        if progress.epoch == 0 {
            fs::write(path, "").map_err(io_err(path))?;
        }
    }
    let mut metadata = opts.metadata.clone();
    metadata.insert("train_config".into(), serde_json::to_string(cfg)?);

    let mut history = Vec::new();
    let mut loss_trace = Vec::new();
    let mut best = None;
    let mut last_eval = None;
    let stop = opts.stop_after.unwrap_or(cfg.epochs).min(cfg.epochs);
    for epoch in progress.epoch..stop {
        let mut sums: BTreeMap<String, (f64, usize)> = BTreeMap::new();
        let mut tasks = Vec::new();
        let mut lr = cfg.lr;
        for step in &plans[epoch] {
            lr = learning_rate(cfg.lr, cfg.lr_schedule, cfg.warmup_iters, progress.iteration, total_updates);
            let mut r = step_gradients(
                &model,
                cfg,
                &params,
                data.samples,
                step,
                epoch,
                progress.iteration,
                opts.hook.as_deref_mut(),
            )?;
            if !r.total.is_finite() {
                return Err(invalid(format!("non-finite loss at update {}", progress.iteration)));
            }
            clip_grads(&mut r.grads, cfg.clip_norm);
            sgd.step(&mut params, &mut momentum, &r.grads, lr)?;
            progress.iteration += 1;
            loss_trace.push(r.total);
            for (k, v) in r.losses {
                let e = sums.entry(k).or_insert((0.0, 0));
                e.0 += v;
                e.1 += 1;
            }
            for c in step {
                for t in [(c.det, Task::Det), (c.seg, Task::Seg)].into_iter().filter(|x| x.0).map(|x| x.1) {
                    if !tasks.contains(&t) {
                        tasks.push(t);
                    }
                }
            }
        }
        progress.epoch = epoch + 1;
        let due = progress.epoch == cfg.epochs || (cfg.eval_every > 0 && progress.epoch % cfg.eval_every == 0);
        let mut val = None;
        if let (true, Some(vd)) = (due, data.val) {
            let ev = evaluate(&model, &params, vd, cfg.eval_batch_size)?;
            val = Some(ev.summary);
            if let Some(score) = ev.summary.score() {
                if progress.best_score.is_none_or(|b| score > b) {
                    progress.best_score = Some(score);
                    best = Some(params.clone());
                    if let Some(dir) = &opts.out_dir {
                        checkpoint_of(&model, &params, &momentum, &progress, &metadata).save(&dir.join("checkpoints/best.safetensors"))?;
                    }
                }
            }
            last_eval = Some(ev);
        }
        tasks.sort();
        let record = EpochRecord {
            epoch: progress.epoch,
            tasks,
            updates: plans[epoch].len(),
            iteration: progress.iteration,
            lr,
            losses: mean_losses(&sums),
            val,
        };
        if opts.verbose {
            eprintln!("{}", serde_json::to_string(&record)?);
        }
        if let (Some(dir), Some(path)) = (&opts.out_dir, &metrics_path) {
            let mut f = fs::OpenOptions::new().append(true).create(true).open(path).map_err(io_err(path))?;
            writeln!(f, "{}", serde_json::to_string(&record)?).map_err(io_err(path))?;
            let ck = checkpoint_of(&model, &params, &momentum, &progress, &metadata);
            ck.save(&dir.join("checkpoints/last.safetensors"))?;
            if opts.keep_epoch_checkpoints {
                ck.save(&dir.join(format!("checkpoints/epoch_{:03}.safetensors", progress.epoch)))?;
            }
        }
        history.push(record);
    }
    Ok(TrainOutcome {
        params,
        momentum,
        progress,
        history,
        loss_trace,
        best,
        last_eval,
    })
}

fn checkpoint_of(
    model: &ModelConfig,
    params: &ParamSet,
    momentum: &ParamSet,
    progress: &Progress,
    metadata: &BTreeMap<String, String>,
) -> Checkpoint {
    Checkpoint {
        model: model.clone(),
        params: params.clone(),
        momentum: momentum.clone(),
        progress: Some(progress.clone()),
        extra: metadata.clone(),
    }
}
