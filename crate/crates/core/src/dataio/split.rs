use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::{Dataset, Task};
use crate::error::{invalid, Result};
use crate::rng;

/// Disjoint detection/segmentation id sets. Both lists are kept sorted.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PartialSplit {
    pub seed: u64,
    pub det_ids: Vec<String>,
    pub seg_ids: Vec<String>,
}

impl PartialSplit {
    pub fn ids(&self, task: Task) -> &[String] {
        match task {
            Task::Det => &self.det_ids,
            Task::Seg => &self.seg_ids,
        }
    }

    pub fn task_of(&self, id: &str) -> Option<Task> {
        if self.det_ids.binary_search_by(|p| p.as_str().cmp(id)).is_ok() {
            Some(Task::Det)
        } else if self.seg_ids.binary_search_by(|p| p.as_str().cmp(id)).is_ok() {
            Some(Task::Seg)
        } else {
            None
        }
    }

    pub fn len(&self) -> usize {
        self.det_ids.len() + self.seg_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// How many images the segmentation side should receive.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SplitTarget {
    /// Share of the whole dataset, rounded down.
    SegFraction(f64),
    /// Exact segmentation subset size.
    SegCount(usize),
}

impl Default for SplitTarget {
    fn default() -> Self {
        SplitTarget::SegFraction(0.5)
    }
}

impl SplitTarget {
    fn seg_size(&self, total: usize) -> Result<usize> {
        match *self {
            SplitTarget::SegFraction(f) if (0.0..=1.0).contains(&f) => {
                Ok((total as f64 * f).floor() as usize)
            }
            SplitTarget::SegFraction(f) => Err(invalid(format!("seg fraction {f} outside [0, 1]"))),
            SplitTarget::SegCount(c) => Ok(c),
        }
    }
}

/// Uniformly random disjoint bipartition of a dataset's ids. Samples without
/// a mask always go to the detection side; the segmentation side is drawn
/// from the mask-bearing samples only.
pub fn split_partial(dataset: &Dataset, seed: u64, target: SplitTarget) -> Result<PartialSplit> {
    if dataset.is_empty() {
        return Err(invalid("cannot split an empty dataset"));
    }
    if let Some(s) = dataset.samples.iter().find(|s| s.boxes.is_none()) {
        return Err(invalid(format!(
            "sample {} has no box annotation; every sample must carry boxes before splitting",
            s.id
        )));
    }
    let mut with_mask: Vec<String> = Vec::new();
    let mut without_mask: Vec<String> = Vec::new();
    for s in &dataset.samples {
        if s.mask.is_some() {
            with_mask.push(s.id.clone());
        } else {
            without_mask.push(s.id.clone());
        }
    }
    split_id_pool(with_mask, without_mask, seed, target)
}

/// The split rule on bare id lists: `with_mask` may go to either side,
/// `without_mask` only to detection. Used directly for id manifests whose
/// images are not loaded.
pub fn split_id_pool(
    mut with_mask: Vec<String>,
    without_mask: Vec<String>,
    seed: u64,
    target: SplitTarget,
) -> Result<PartialSplit> {
    let total = with_mask.len() + without_mask.len();
    if total == 0 {
        return Err(invalid("cannot split an empty id pool"));
    }
    let seg_size = target.seg_size(total)?;
    if seg_size > with_mask.len() {
        return Err(invalid(format!(
            "segmentation subset needs {seg_size} mask-bearing samples but only {} of {total} carry masks",
            with_mask.len()
        )));
    }
    // Shuffle from a canonical order so the result depends only on the id set.
    with_mask.sort();
    with_mask.shuffle(&mut rng::stream(seed, "split", 0));
    let mut seg_ids = with_mask.split_off(with_mask.len() - seg_size);
    let mut det_ids = without_mask;
    det_ids.extend(with_mask);
    det_ids.sort();
    seg_ids.sort();
    if let Some(w) = det_ids.windows(2).find(|w| w[0] == w[1]) {
        return Err(invalid(format!("duplicate id {} in the pool", w[0])));
    }
    if let Some(id) = det_ids.iter().find(|id| seg_ids.binary_search(id).is_ok()) {
        return Err(invalid(format!("id {id} listed both with and without a mask")));
    }
    Ok(PartialSplit {
        seed,
        det_ids,
        seg_ids,
    })
}

/// Randomly drops `floor(n/2)` ids from one side of the split.
pub fn halve_subset(split: &PartialSplit, which: Task, seed: u64) -> Result<PartialSplit> {
    let ids = split.ids(which);
    if ids.is_empty() {
        return Err(invalid(format!("cannot halve the empty {which} subset")));
    }
    let mut shuffled = ids.to_vec();
    shuffled.shuffle(&mut rng::stream(seed, "halve", which as u64));
    shuffled.truncate(ids.len() - ids.len() / 2);
    shuffled.sort();
    let mut out = split.clone();
    match which {
        Task::Det => out.det_ids = shuffled,
        Task::Seg => out.seg_ids = shuffled,
    }
    Ok(out)
}

/// Materializes the partial-annotation view: each sample keeps only the
/// annotation of its assigned task and carries the task tag. Samples outside
/// the split are dropped.
pub fn apply_split(dataset: &Dataset, split: &PartialSplit) -> Result<Dataset> {
    let mut samples = Vec::with_capacity(split.len());
    for (task, ids) in [(Task::Det, &split.det_ids), (Task::Seg, &split.seg_ids)] {
        for s in dataset.select(ids)? {
            let mut s = s.clone();
            match task {
                Task::Det => {
                    if s.boxes.is_none() {
                        return Err(invalid(format!("sample {} assigned to DET has no boxes", s.id)));
                    }
                    s.mask = None;
                }
                Task::Seg => {
                    if s.mask.is_none() {
                        return Err(invalid(format!("sample {} assigned to SEG has no mask", s.id)));
                    }
                    s.boxes = None;
                }
            }
            s.task = Some(task);
            samples.push(s);
        }
    }
    samples.sort_by(|a, b| a.id.cmp(&b.id));
    Ok(Dataset {
        samples,
        classes: dataset.classes.clone(),
    })
}
