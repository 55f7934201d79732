//! Run configuration files: TOML with an optional `extends` chain,
//! rejection of unknown keys, and a fully resolved copy written next to
//! every run.

use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::dataio::Task;
use crate::distill::{DistillConfig, KdMode};
use crate::error::{io_err, Error, Result};
use crate::model::ModelConfig;
use crate::trainer::TrainConfig;

/// Environment variable that relocates relative data paths.
pub const DATA_ROOT_ENV: &str = "MTLAB_DATA_ROOT";

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DataConfig {
    /// Dataset directory for training samples.
    pub train: PathBuf,
    /// Dataset directory for validation samples.
    pub val: Option<PathBuf>,
    /// Split file; when absent the split is drawn with `split_seed`.
    pub split: Option<PathBuf>,
    pub split_seed: u64,
    /// Size of the segmentation side when the split is drawn; half the
    /// dataset when absent.
    pub seg_count: Option<usize>,
    /// Drop half of this task's subset.
    pub halve: Option<Task>,
    /// Merge segmentation classes into the VOC abstract groups.
    pub merge_abstract: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FinetuneConfig {
    /// Checkpoint trained on the other task.
    pub checkpoint: PathBuf,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    /// Output directory; `config.resolved`, checkpoints, and metrics go here.
    pub run_dir: PathBuf,
    /// Continue from `run_dir/checkpoints/last.safetensors` when present.
    pub resume: bool,
    pub data: DataConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub distill: Option<DistillConfig>,
    pub finetune: Option<FinetuneConfig>,
}

fn merge(base: &mut toml::Table, over: toml::Table) {
    for (k, v) in over {
        match (base.get_mut(&k), v) {
            (Some(toml::Value::Table(b)), toml::Value::Table(o)) => merge(b, o),
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}

fn read_table(path: &Path, chain: &mut Vec<PathBuf>) -> Result<toml::Table> {
    let canon = fs::canonicalize(path).map_err(io_err(path))?;
    if chain.contains(&canon) {
        return Err(Error::Config(format!("{}: extends cycle", path.display())));
    }
    chain.push(canon);
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    let mut table: toml::Table = text
        .parse()
        .map_err(|e: toml::de::Error| Error::Config(format!("{}: {}", path.display(), e.message())))?;
    let Some(parent) = table.remove("extends") else {
        return Ok(table);
    };
    let parent = parent
        .as_str()
        .ok_or_else(|| Error::Config(format!("{}: extends must be a path", path.display())))?;
    let parent_path = path.parent().unwrap_or(Path::new(".")).join(parent);
    let mut base = read_table(&parent_path, chain)?;
    merge(&mut base, table);
    Ok(base)
}

/// Parses a merged table, listing every key that no field consumes.
pub fn from_table(table: toml::Table) -> Result<RunConfig> {
    let mut unknown = BTreeSet::new();
    let cfg: RunConfig = serde_ignored::deserialize(toml::Value::Table(table), |p| {
        // Optional sections show up as `?` segments.
        let key: Vec<String> = p.to_string().split('.').filter(|s| *s != "?").map(str::to_string).collect();
        unknown.insert(key.join("."));
    })
    .map_err(|e| Error::Config(e.to_string()))?;
    if !unknown.is_empty() {
        return Err(Error::Config(format!(
            "unknown configuration keys: {}",
            unknown.into_iter().collect::<Vec<_>>().join(", ")
        )));
    }
    Ok(cfg)
}

pub fn parse_str(text: &str) -> Result<RunConfig> {
    let table: toml::Table = text
        .parse()
        .map_err(|e: toml::de::Error| Error::Config(e.message().to_string()))?;
    if table.contains_key("extends") {
        return Err(Error::Config("extends needs a config file on disk".into()));
    }
    from_table(table)
}

/// Loads a config file, following `extends` relative to each file.
pub fn load(path: &Path) -> Result<RunConfig> {
    from_table(read_table(path, &mut Vec::new())?)
}

/// Command-line replacements for the `[distill]` section.
#[derive(Clone, Debug, Default)]
pub struct DistillOverride {
    pub mode: Option<KdMode>,
    pub det_teacher: Option<PathBuf>,
    pub seg_teacher: Option<PathBuf>,
}

impl RunConfig {
    /// Merges `o` into the `[distill]` section, creating it when `o` names
    /// a mode.
    pub fn apply_distill(&mut self, o: DistillOverride) -> Result<()> {
        let d = match (&mut self.distill, o.mode) {
            (Some(d), _) => d,
            (None, Some(mode)) => self.distill.insert(DistillConfig {
                mode,
                kd_weight: 1.0,
                det_teacher: None,
                seg_teacher: None,
            }),
            (None, None) => return Err(Error::Config("no [distill] section and no --mode given".into())),
        };
        if let Some(m) = o.mode {
            d.mode = m;
        }
        if o.det_teacher.is_some() {
            d.det_teacher = o.det_teacher;
        }
        if o.seg_teacher.is_some() {
            d.seg_teacher = o.seg_teacher;
        }
        Ok(())
    }

    /// Resolved configuration as TOML; loading it yields an equal config.
    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn write_resolved(&self, dir: &Path) -> Result<PathBuf> {
        fs::create_dir_all(dir).map_err(io_err(dir))?;
        let path = dir.join("config.resolved");
        fs::write(&path, self.to_toml()?).map_err(io_err(&path))?;
        Ok(path)
    }

    /// Applies the data-root override to the relative data paths.
    pub fn with_data_root(mut self, root: Option<&Path>) -> Self {
        if let Some(root) = root {
            let fix = |p: &mut PathBuf| {
                if p.is_relative() && !p.as_os_str().is_empty() {
                    *p = root.join(&*p);
                }
            };
            fix(&mut self.data.train);
            for p in [&mut self.data.val, &mut self.data.split].into_iter().flatten() {
                fix(p);
            }
        }
        self
    }

    /// [`Self::with_data_root`] driven by the environment.
    pub fn with_env_data_root(self) -> Self {
        let root = std::env::var_os(DATA_ROOT_ENV).map(PathBuf::from);
        self.with_data_root(root.as_deref())
    }
}
