use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::{Dataset, IGNORE_LABEL};
use crate::error::{invalid, Result};

/// Many-to-one relabeling of segmentation classes into groups.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassMap {
    pub mapping: BTreeMap<u8, u8>,
    /// Group names indexed by group id (0 is background).
    pub groups: Vec<String>,
}

const VOC_GROUPS: [(&str, &[&str]); 4] = [
    (
        "vehicle",
        &["aeroplane", "bicycle", "boat", "bus", "car", "motorbike", "train"],
    ),
    ("animal", &["bird", "cat", "cow", "dog", "horse", "sheep"]),
    (
        "furniture",
        &["bottle", "chair", "diningtable", "pottedplant", "sofa", "tvmonitor"],
    ),
    ("person", &["person"]),
];

impl ClassMap {
    pub fn identity(names: &[String]) -> Self {
        Self {
            mapping: (0..names.len() as u8).map(|i| (i, i)).collect(),
            groups: names.to_vec(),
        }
    }

    /// The VOC grouping into vehicle / animal / furniture / person.
    pub fn voc_abstract() -> Self {
        let mut mapping = BTreeMap::from([(0u8, 0u8)]);
        for (gi, (_, members)) in VOC_GROUPS.iter().enumerate() {
            for m in *members {
                let cls = super::voc::VOC_CLASSES
                    .iter()
                    .position(|c| c == m)
                    .expect("grouped name is a VOC class") as u8
                    + 1;
                mapping.insert(cls, gi as u8 + 1);
            }
        }
        let groups = std::iter::once("background")
            .chain(VOC_GROUPS.iter().map(|(g, _)| *g))
            .map(String::from)
            .collect();
        Self { mapping, groups }
    }

    pub fn map(&self, class_id: u8) -> Option<u8> {
        if class_id == IGNORE_LABEL {
            return Some(IGNORE_LABEL);
        }
        self.mapping.get(&class_id).copied()
    }
}

/// Rewrites every mask pixel to its group id. Boxes are left alone.
pub fn remap_classes(dataset: &Dataset, map: &ClassMap) -> Result<Dataset> {
    if let Some((&c, &g)) = map
        .mapping
        .iter()
        .find(|(_, &g)| usize::from(g) >= map.groups.len())
    {
        return Err(invalid(format!(
            "class {c} maps to group {g} but only {} groups are named",
            map.groups.len()
        )));
    }
    let mut out = dataset.clone();
    for s in &mut out.samples {
        if let Some(mask) = &mut s.mask {
            for v in &mut mask.data {
                *v = map.map(*v).ok_or_else(|| {
                    invalid(format!("class id {v} in sample {} has no group in the class map", s.id))
                })?;
            }
        }
    }
    out.classes.seg = map.groups.clone();
    Ok(out)
}
