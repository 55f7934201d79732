//! Dataset directory layout:
//!
//! ```text
//! root/images/<id>.png      8-bit RGB
//! root/masks/<id>.png       8-bit gray, pixel = class id, 255 = ignore
//! root/annotations.json     [{id, width, height, boxes: [{x1, y1, x2, y2, class}]}]
//! root/split.json           {seed, det_ids, seg_ids}   (optional)
//! root/classes.json         {det: [...], seg: [...]}   (optional)
//! ```

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{ClassInfo, Dataset, GtBox, Mask, PartialSplit, RgbImage, Sample, Task};
use crate::error::{io_err, Error, Result};

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct AnnotationRecord {
    id: String,
    width: usize,
    height: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    boxes: Option<Vec<GtBox>>,
}

pub struct LoadedDataset {
    pub dataset: Dataset,
    pub split: Option<PartialSplit>,
}

fn format_err(path: &Path, detail: impl Into<String>) -> Error {
    Error::Format {
        path: path.to_path_buf(),
        detail: detail.into(),
    }
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    fs::write(path, text + "\n").map_err(io_err(path))
}

pub fn save_split(split: &PartialSplit, path: &Path) -> Result<()> {
    write_json(path, split)
}

pub fn load_split(path: &Path) -> Result<PartialSplit> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    let mut split: PartialSplit =
        serde_json::from_str(&text).map_err(|e| format_err(path, e.to_string()))?;
    split.det_ids.sort();
    split.seg_ids.sort();
    if let Some(id) = split
        .det_ids
        .iter()
        .find(|id| split.seg_ids.binary_search(id).is_ok())
    {
        return Err(format_err(path, format!("id {id} appears in both det_ids and seg_ids")));
    }
    Ok(split)
}

pub fn save_dataset(dataset: &Dataset, root: &Path) -> Result<()> {
    dataset.validate()?;
    let images = root.join("images");
    let masks = root.join("masks");
    fs::create_dir_all(&images).map_err(io_err(&images))?;
    fs::create_dir_all(&masks).map_err(io_err(&masks))?;
    let mut samples: Vec<&Sample> = dataset.samples.iter().collect();
    samples.sort_by(|a, b| a.id.cmp(&b.id));
    let mut records = Vec::with_capacity(samples.len());
    for s in samples {
        let path = images.join(format!("{}.png", s.id));
        let img = image::RgbImage::from_raw(s.width() as u32, s.height() as u32, s.image.data.clone())
            .ok_or_else(|| format_err(&path, "image buffer size mismatch"))?;
        img.save(&path).map_err(|source| Error::Image { path: path.clone(), source })?;
        if let Some(m) = &s.mask {
            let path = masks.join(format!("{}.png", s.id));
            let gray = image::GrayImage::from_raw(m.width as u32, m.height as u32, m.data.clone())
                .ok_or_else(|| format_err(&path, "mask buffer size mismatch"))?;
            gray.save(&path).map_err(|source| Error::Image { path: path.clone(), source })?;
        }
        records.push(AnnotationRecord {
            id: s.id.clone(),
            width: s.width(),
            height: s.height(),
            boxes: s.boxes.clone(),
        });
    }
    write_json(&root.join("annotations.json"), &records)?;
    write_json(&root.join("classes.json"), &dataset.classes)?;
    Ok(())
}

fn read_records(path: &Path) -> Result<Vec<AnnotationRecord>> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    let value: serde_json::Value =
        serde_json::from_str(&text).map_err(|e| format_err(path, e.to_string()))?;
    let items = value
        .as_array()
        .ok_or_else(|| format_err(path, "expected a JSON array of annotation records"))?;
    items
        .iter()
        .enumerate()
        .map(|(i, item)| {
            serde_json::from_value(item.clone()).map_err(|e| {
                let id = item.get("id").and_then(|v| v.as_str()).unwrap_or("<no id>");
                format_err(path, format!("record {i} (id {id}): {e}"))
            })
        })
        .collect()
}

pub fn read_image(path: &Path) -> Result<RgbImage> {
    let img = image::open(path)
        .map_err(|source| Error::Image {
            path: path.to_path_buf(),
            source,
        })?
        .to_rgb8();
    Ok(RgbImage {
        width: img.width() as usize,
        height: img.height() as usize,
        data: img.into_raw(),
    })
}

pub(crate) fn read_mask(path: &Path) -> Result<Mask> {
    let img = image::open(path)
        .map_err(|source| Error::Image {
            path: path.to_path_buf(),
            source,
        })?
        .to_luma8();
    Ok(Mask {
        width: img.width() as usize,
        height: img.height() as usize,
        data: img.into_raw(),
    })
}

fn infer_classes(samples: &[Sample]) -> ClassInfo {
    let det = samples
        .iter()
        .flat_map(|s| s.boxes.iter().flatten())
        .map(|b| b.class_id + 1)
        .max()
        .unwrap_or(0);
    let seg = samples
        .iter()
        .flat_map(|s| s.mask.iter())
        .flat_map(|m| m.data.iter().copied().filter(|&v| v != super::IGNORE_LABEL))
        .map(|v| usize::from(v) + 1)
        .max()
        .unwrap_or(1)
        .max(det + 1);
    ClassInfo {
        det: (0..det).map(|i| format!("class{i}")).collect(),
        seg: (0..seg).map(|i| if i == 0 { "background".into() } else { format!("class{}", i - 1) }).collect(),
    }
}

/// Loads a dataset directory. When `split.json` is present its ids must all
/// exist, SEG ids must have a mask file, and DET ids must have boxes; the
/// returned samples are *not* partially masked (see `apply_split`).
pub fn load_dataset(root: &Path) -> Result<LoadedDataset> {
    let ann_path = root.join("annotations.json");
    let records = read_records(&ann_path)?;
    let split_path = root.join("split.json");
    let split = if split_path.exists() {
        Some(load_split(&split_path)?)
    } else {
        None
    };
    let mut samples = Vec::with_capacity(records.len());
    for rec in records {
        let img_path = root.join("images").join(format!("{}.png", rec.id));
        let image = read_image(&img_path)?;
        if (image.width, image.height) != (rec.width, rec.height) {
            return Err(format_err(
                &img_path,
                format!(
                    "image is {}x{} but annotation for {} says {}x{}",
                    image.width, image.height, rec.id, rec.width, rec.height
                ),
            ));
        }
        let mask_path: PathBuf = root.join("masks").join(format!("{}.png", rec.id));
        let task = split.as_ref().and_then(|s| s.task_of(&rec.id));
        let mask = if mask_path.exists() {
            Some(read_mask(&mask_path)?)
        } else if task == Some(Task::Seg) {
            return Err(format_err(
                &mask_path,
                format!("sample {} is assigned to SEG but has no mask file", rec.id),
            ));
        } else {
            None
        };
        if task == Some(Task::Det) && rec.boxes.is_none() {
            return Err(format_err(
                &ann_path,
                format!("sample {} is assigned to DET but has no boxes", rec.id),
            ));
        }
        samples.push(Sample {
            id: rec.id,
            image,
            boxes: rec.boxes,
            mask,
            task: None,
        });
    }
    let classes_path = root.join("classes.json");
    let classes = if classes_path.exists() {
        let text = fs::read_to_string(&classes_path).map_err(io_err(&classes_path))?;
        serde_json::from_str(&text).map_err(|e| format_err(&classes_path, e.to_string()))?
    } else {
        infer_classes(&samples)
    };
    let dataset = Dataset { samples, classes };
    dataset.validate().map_err(|e| format_err(&ann_path, e.to_string()))?;
    if let Some(split) = &split {
        let known: std::collections::BTreeSet<&str> =
            dataset.samples.iter().map(|s| s.id.as_str()).collect();
        if let Some(id) = split
            .det_ids
            .iter()
            .chain(&split.seg_ids)
            .find(|id| !known.contains(id.as_str()))
        {
            return Err(format_err(&split_path, format!("split refers to unknown id {id}")));
        }
    }
    Ok(LoadedDataset { dataset, split })
}
