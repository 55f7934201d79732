//! Named parameter tensors, graph binding, and the single-file checkpoint
//! container (safetensors with a JSON metadata header).

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::path::Path;

use mtlab_autograd::{Grads, Graph, Tensor, Var};
use safetensors::tensor::{Dtype, SafeTensors, TensorView};
use sha2::{Digest, Sha256};

use crate::error::{invalid, io_err, Error, Result};

/// Top-level parameter groups, identified by name prefix.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Part {
    Backbone,
    Neck,
    DetHead,
    SegHead,
    Projection,
}

impl Part {
    pub const ALL: [Part; 5] = [Part::Backbone, Part::Neck, Part::DetHead, Part::SegHead, Part::Projection];

    pub fn prefix(self) -> &'static str {
        match self {
            Part::Backbone => "backbone.",
            Part::Neck => "neck.",
            Part::DetHead => "det_head.",
            Part::SegHead => "seg_head.",
            Part::Projection => "kd_proj.",
        }
    }

    pub fn of(name: &str) -> Option<Part> {
        Part::ALL.into_iter().find(|p| name.starts_with(p.prefix()))
    }

    pub fn is_encoder(self) -> bool {
        matches!(self, Part::Backbone | Part::Neck)
    }
}

impl std::str::FromStr for Part {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "backbone" => Ok(Part::Backbone),
            "neck" => Ok(Part::Neck),
            "det_head" => Ok(Part::DetHead),
            "seg_head" => Ok(Part::SegHead),
            "kd_proj" | "projection" => Ok(Part::Projection),
            other => Err(invalid(format!(
                "unknown part {other:?} (expected backbone, neck, det_head, seg_head)"
            ))),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamSet {
    tensors: BTreeMap<String, Tensor>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor) {
        self.tensors.insert(name.into(), value);
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.tensors.get_mut(name)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.tensors.contains_key(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.tensors.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Tensor)> {
        self.tensors.iter_mut()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.tensors.keys()
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn remove(&mut self, name: &str) -> Option<Tensor> {
        self.tensors.remove(name)
    }

    /// Exact number of learnable scalars.
    pub fn count(&self) -> usize {
        self.tensors.values().map(Tensor::numel).sum()
    }

    pub fn count_part(&self, part: Part) -> usize {
        self.tensors
            .iter()
            .filter(|(n, _)| Part::of(n) == Some(part))
            .map(|(_, t)| t.numel())
            .sum()
    }

    /// Parameters whose names belong to `part`.
    pub fn part(&self, part: Part) -> ParamSet {
        ParamSet {
            tensors: self
                .tensors
                .iter()
                .filter(|(n, _)| Part::of(n) == Some(part))
                .map(|(n, t)| (n.clone(), t.clone()))
                .collect(),
        }
    }

    /// Copies every tensor of `other` in, replacing same-named entries.
    pub fn merge(&mut self, other: &ParamSet) {
        for (n, t) in &other.tensors {
            self.tensors.insert(n.clone(), t.clone());
        }
    }

    /// SHA-256 over names, shapes, and little-endian values.
    pub fn digest(&self) -> String {
        self.digest_filtered(|_| true)
    }

    pub fn digest_part(&self, part: Part) -> String {
        self.digest_filtered(|n| Part::of(n) == Some(part))
    }

    fn digest_filtered(&self, keep: impl Fn(&str) -> bool) -> String {
        let mut h = Sha256::new();
        for (n, t) in self.tensors.iter().filter(|(n, _)| keep(n)) {
            h.update(n.as_bytes());
            for d in t.shape() {
                h.update((*d as u64).to_le_bytes());
            }
            for v in t.data() {
                h.update(v.to_le_bytes());
            }
        }
        format!("{:x}", h.finalize())
    }

    pub fn zeroed(&self) -> ParamSet {
        ParamSet {
            tensors: self
                .tensors
                .iter()
                .map(|(n, t)| (n.clone(), Tensor::zeros(t.shape())))
                .collect(),
        }
    }
}

/// Graph under construction plus lazily bound parameters. Parameters for
/// which `trainable` is false enter the graph as constants, so no gradient
/// work is done for them.
pub struct Session<'p> {
    pub graph: Graph,
    params: &'p ParamSet,
    bound: HashMap<String, Var>,
    trainable: Box<dyn Fn(&str) -> bool + 'p>,
}

impl<'p> Session<'p> {
    pub fn new(params: &'p ParamSet, trainable: impl Fn(&str) -> bool + 'p) -> Self {
        Self {
            graph: Graph::new(),
            params,
            bound: HashMap::new(),
            trainable: Box::new(trainable),
        }
    }

    /// Everything constant: inference only.
    pub fn inference(params: &'p ParamSet) -> Self {
        Self::new(params, |_| false)
    }

    pub fn param(&mut self, name: &str) -> Result<Var> {
        if let Some(v) = self.bound.get(name) {
            return Ok(*v);
        }
        let t = self
            .params
            .get(name)
            .ok_or_else(|| Error::Config(format!("missing parameter {name}")))?
            .clone();
        let v = if (self.trainable)(name) {
            self.graph.param(t)
        } else {
            self.graph.constant(t)
        };
        self.bound.insert(name.to_string(), v);
        Ok(v)
    }

    pub fn has_param(&self, name: &str) -> bool {
        self.params.contains(name)
    }

    pub fn input(&mut self, t: Tensor) -> Var {
        self.graph.constant(t)
    }

    /// Gradients of every bound trainable parameter. Parameters that took no
    /// part in the loss get zeros.
    pub fn param_grads(&self, grads: &Grads) -> BTreeMap<String, Tensor> {
        self.bound
            .iter()
            .filter(|(_, v)| self.graph.requires_grad(**v))
            .map(|(n, v)| {
                let g = grads
                    .get(*v)
                    .cloned()
                    .unwrap_or_else(|| Tensor::zeros(self.graph.value(*v).shape()));
                (n.clone(), g)
            })
            .collect()
    }
}

pub const CHECKPOINT_FORMAT: &str = "mtlab-checkpoint-v1";

fn ckpt_err(path: &Path, detail: impl Into<String>) -> Error {
    Error::Checkpoint {
        path: path.to_path_buf(),
        detail: detail.into(),
    }
}

/// Writes named tensors and string metadata into one safetensors file.
pub fn write_tensor_file(
    path: &Path,
    tensors: &BTreeMap<String, Tensor>,
    metadata: &BTreeMap<String, String>,
) -> Result<()> {
    let bytes: Vec<(String, Vec<u8>, Vec<usize>)> = tensors
        .iter()
        .map(|(n, t)| {
            let raw: Vec<u8> = t.data().iter().flat_map(|v| v.to_le_bytes()).collect();
            (n.clone(), raw, t.shape().to_vec())
        })
        .collect();
    let views = bytes
        .iter()
        .map(|(n, raw, shape)| {
            TensorView::new(Dtype::F64, shape.clone(), raw)
                .map(|v| (n.clone(), v))
                .map_err(|e| ckpt_err(path, e.to_string()))
        })
        .collect::<Result<Vec<_>>>()?;
    let mut meta: HashMap<String, String> = metadata.clone().into_iter().collect();
    meta.insert("format".into(), CHECKPOINT_FORMAT.into());
    let buf = safetensors::serialize(views, &Some(meta)).map_err(|e| ckpt_err(path, e.to_string()))?;
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(io_err(dir))?;
    }
    fs::write(path, buf).map_err(io_err(path))
}

pub fn read_tensor_file(path: &Path) -> Result<(BTreeMap<String, Tensor>, BTreeMap<String, String>)> {
    let buf = fs::read(path).map_err(io_err(path))?;
    let st = SafeTensors::deserialize(&buf).map_err(|e| ckpt_err(path, e.to_string()))?;
    let (_, header) = SafeTensors::read_metadata(&buf).map_err(|e| ckpt_err(path, e.to_string()))?;
    let metadata: BTreeMap<String, String> = header
        .metadata()
        .clone()
        .unwrap_or_default()
        .into_iter()
        .collect();
    if metadata.get("format").map(String::as_str) != Some(CHECKPOINT_FORMAT) {
        return Err(ckpt_err(path, "not an mtlab checkpoint"));
    }
    let mut tensors = BTreeMap::new();
    for (name, view) in st.tensors() {
        if view.dtype() != Dtype::F64 {
            return Err(ckpt_err(path, format!("tensor {name} is {:?}, expected F64", view.dtype())));
        }
        let data: Vec<f64> = view
            .data()
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
            .collect();
        tensors.insert(name.clone(), Tensor::from_vec(view.shape(), data)?);
    }
    Ok((tensors, metadata))
}

impl From<BTreeMap<String, Tensor>> for ParamSet {
    fn from(tensors: BTreeMap<String, Tensor>) -> Self {
        Self { tensors }
    }
}

impl From<ParamSet> for BTreeMap<String, Tensor> {
    fn from(p: ParamSet) -> Self {
        p.tensors
    }
}
