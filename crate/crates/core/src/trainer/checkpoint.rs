//! Checkpoints: model parameters, optimizer momentum, and the training
//! counters needed to resume bit-for-bit.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::params::{read_tensor_file, write_tensor_file, ParamSet, Part};

const MOMENTUM_PREFIX: &str = "opt.momentum.";

/// Counters that, together with the seed, determine every remaining random
/// draw of a run.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Progress {
    /// Completed epochs.
    pub epoch: usize,
    /// Completed parameter updates.
    pub iteration: usize,
    pub seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub best_score: Option<f64>,
}

#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub model: ModelConfig,
    pub params: ParamSet,
    pub momentum: ParamSet,
    pub progress: Option<Progress>,
    /// Free-form string metadata such as the resolved run configuration.
    pub extra: BTreeMap<String, String>,
}

impl Checkpoint {
    pub fn new(model: ModelConfig, params: ParamSet) -> Self {
        Self {
            model,
            params,
            momentum: ParamSet::new(),
            progress: None,
            extra: BTreeMap::new(),
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut tensors: BTreeMap<String, _> = self.params.iter().map(|(n, t)| (n.clone(), t.clone())).collect();
        for (n, t) in self.momentum.iter() {
            tensors.insert(format!("{MOMENTUM_PREFIX}{n}"), t.clone());
        }
        let mut meta = self.extra.clone();
        meta.insert("model".into(), serde_json::to_string(&self.model)?);
        if let Some(p) = &self.progress {
            meta.insert("progress".into(), serde_json::to_string(p)?);
        }
        write_tensor_file(path, &tensors, &meta)
    }

    pub fn load(path: &Path) -> Result<Checkpoint> {
        let (tensors, mut meta) = read_tensor_file(path)?;
        let bad = |detail: String| Error::Checkpoint {
            path: path.to_path_buf(),
            detail,
        };
        let model: ModelConfig = serde_json::from_str(
            &meta
                .remove("model")
                .ok_or_else(|| bad("missing model configuration".into()))?,
        )
        .map_err(|e| bad(format!("model configuration: {e}")))?;
        let progress = meta
            .remove("progress")
            .map(|s| serde_json::from_str(&s).map_err(|e| bad(format!("progress: {e}"))))
            .transpose()?;
        meta.remove("format");
        let mut params = ParamSet::new();
        let mut momentum = ParamSet::new();
        for (n, t) in tensors {
            match n.strip_prefix(MOMENTUM_PREFIX) {
                Some(rest) => momentum.insert(rest, t),
                None => params.insert(n, t),
            }
        }
        if let Some(n) = params.names().find(|n| Part::of(n).is_none()) {
            return Err(bad(format!("tensor {n} has an unknown name prefix")));
        }
        let mut parts = vec![Part::Backbone, Part::Neck];
        if model.det_head.is_some() {
            parts.push(Part::DetHead);
        }
        if model.seg_head.is_some() {
            parts.push(Part::SegHead);
        }
        model.check_params(&params, &parts).map_err(|e| bad(e.to_string()))?;
        Ok(Checkpoint {
            model,
            params,
            momentum,
            progress,
            extra: meta,
        })
    }
}
