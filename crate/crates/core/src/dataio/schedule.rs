use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::{PartialSplit, Task};
use crate::error::{invalid, Result};
use crate::rng;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum ScheduleMode {
    /// All batches of one task, then all batches of the other.
    Epoch,
    /// One DET batch, then one SEG batch, repeated.
    Iteration,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Batch {
    pub task: Task,
    pub ids: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct EpochSchedule {
    pub mode: ScheduleMode,
    pub batches: Vec<Batch>,
}

impl EpochSchedule {
    pub fn count(&self, task: Task) -> usize {
        self.batches.iter().filter(|b| b.task == task).count()
    }
}

/// Task order within an epoch-mode round: DET leads on even epochs.
pub fn epoch_task_order(epoch: usize) -> [Task; 2] {
    if epoch % 2 == 0 {
        [Task::Det, Task::Seg]
    } else {
        [Task::Seg, Task::Det]
    }
}

fn shuffled(ids: &[String], seed: u64, purpose: &str, index: u64) -> Vec<String> {
    let mut out = ids.to_vec();
    out.shuffle(&mut rng::stream(seed, purpose, index));
    out
}

/// Extends `order` to `len` ids by drawing further reshuffled passes over
/// `ids`, so every id repeats at most once more than any other.
fn pad_by_passes(mut order: Vec<String>, ids: &[String], len: usize, seed: u64, epoch: u64) -> Vec<String> {
    let mut pass = 0u64;
    while order.len() < len {
        let extra = shuffled(ids, seed, "schedule-pad", epoch * 1_000_003 + pass);
        let need = len - order.len();
        order.extend(extra.into_iter().take(need));
        pass += 1;
    }
    order
}

fn chunk(task: Task, ids: &[String], batch_size: usize) -> Vec<Batch> {
    ids.chunks(batch_size)
        .map(|c| Batch {
            task,
            ids: c.to_vec(),
        })
        .collect()
}

/// Batch plan for one epoch. `epoch` drives the task order in EPOCH mode and
/// reseeds shuffling and padding.
pub fn make_epoch_schedule(
    split: &PartialSplit,
    batch_size: usize,
    mode: ScheduleMode,
    seed: u64,
    epoch: usize,
) -> Result<EpochSchedule> {
    if batch_size < 1 {
        return Err(invalid("batch size must be at least 1"));
    }
    if split.det_ids.is_empty() || split.seg_ids.is_empty() {
        return Err(invalid(format!(
            "both subsets must be non-empty (det {}, seg {})",
            split.det_ids.len(),
            split.seg_ids.len()
        )));
    }
    let e = epoch as u64;
    let det = shuffled(&split.det_ids, seed, "schedule-det", e);
    let seg = shuffled(&split.seg_ids, seed, "schedule-seg", e);
    let batches = match mode {
        ScheduleMode::Epoch => {
            let mut out = Vec::new();
            for task in epoch_task_order(epoch) {
                let ids = if task == Task::Det { &det } else { &seg };
                out.extend(chunk(task, ids, batch_size));
            }
            out
        }
        ScheduleMode::Iteration => {
            let len = det.len().max(seg.len());
            let det = pad_by_passes(det, &split.det_ids, len, seed ^ 0xD, e);
            let seg = pad_by_passes(seg, &split.seg_ids, len, seed ^ 0x5, e);
            chunk(Task::Det, &det, batch_size)
                .into_iter()
                .zip(chunk(Task::Seg, &seg, batch_size))
                .flat_map(|(d, s)| [d, s])
                .collect()
        }
    };
    Ok(EpochSchedule { mode, batches })
}

/// Shuffled single-task batches over a plain id list.
pub fn single_task_batches(ids: &[String], task: Task, batch_size: usize, seed: u64, epoch: usize) -> Result<Vec<Batch>> {
    if batch_size < 1 {
        return Err(invalid("batch size must be at least 1"));
    }
    if ids.is_empty() {
        return Err(invalid(format!("no {task} samples to train on")));
    }
    let order = shuffled(ids, seed, "schedule-single", epoch as u64);
    Ok(chunk(task, &order, batch_size))
}
