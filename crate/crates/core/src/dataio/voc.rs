//! Pascal VOC on-disk layout: `JPEGImages/`, `Annotations/*.xml`,
//! `SegmentationClass/` (palette PNG) or `SegmentationClassAug/` (gray PNG),
//! and `ImageSets/**/*.txt` id lists.

use std::fs;
use std::path::Path;

use super::{ClassInfo, Dataset, GtBox, Mask, RgbImage, Sample, SplitTarget, IGNORE_LABEL};
use crate::error::{io_err, Error, Result};
use crate::geometry::BBox;

pub const VOC_CLASSES: [&str; 20] = [
    "aeroplane",
    "bicycle",
    "bird",
    "boat",
    "bottle",
    "bus",
    "car",
    "cat",
    "chair",
    "cow",
    "diningtable",
    "dog",
    "horse",
    "motorbike",
    "person",
    "pottedplant",
    "sheep",
    "sofa",
    "train",
    "tvmonitor",
];

/// Partial-annotation pool sizes of the VOC trainval + SBD setup: images
/// with boxes only, and images with boxes and a segmentation mask.
pub const VOC_BOX_ONLY: usize = 4_632;
pub const VOC_WITH_MASK: usize = 10_582;
/// Segmentation subset size of the reference VOC partition.
pub const VOC_SEG_SIZE: usize = 7_656;

pub fn voc_split_target() -> SplitTarget {
    SplitTarget::SegCount(VOC_SEG_SIZE)
}

pub fn voc_class_info() -> ClassInfo {
    ClassInfo {
        det: VOC_CLASSES.iter().map(|s| s.to_string()).collect(),
        seg: std::iter::once("background")
            .chain(VOC_CLASSES)
            .map(String::from)
            .collect(),
    }
}

/// The standard VOC segmentation palette; index 255 is the boundary color.
pub fn voc_palette() -> Vec<[u8; 3]> {
    (0..256u32)
        .map(|i| {
            let (mut r, mut g, mut b) = (0u8, 0u8, 0u8);
            let mut c = i;
            for j in 0..8 {
                r |= (((c >> 0) & 1) as u8) << (7 - j);
                g |= (((c >> 1) & 1) as u8) << (7 - j);
                b |= (((c >> 2) & 1) as u8) << (7 - j);
                c >>= 3;
            }
            [r, g, b]
        })
        .collect()
}

pub fn read_id_list(path: &Path) -> Result<Vec<String>> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    Ok(text
        .lines()
        .filter_map(|l| l.split_whitespace().next())
        .map(String::from)
        .collect())
}

/// Parses one VOC annotation file; difficult objects are skipped. VOC
/// coordinates are 1-based inclusive and become 0-based half-open here.
pub fn parse_annotation(xml: &str, path: &Path) -> Result<(usize, usize, Vec<GtBox>)> {
    let fail = |detail: String| Error::Format {
        path: path.to_path_buf(),
        detail,
    };
    let doc = roxmltree::Document::parse(xml).map_err(|e| fail(e.to_string()))?;
    let root = doc.root_element();
    let child_text = |node: roxmltree::Node<'_, '_>, name: &str| -> Option<String> {
        node.children()
            .find(|c| c.has_tag_name(name))
            .and_then(|c| c.text())
            .map(|t| t.trim().to_string())
    };
    let size = root
        .children()
        .find(|c| c.has_tag_name("size"))
        .ok_or_else(|| fail("missing <size>".into()))?;
    let dim = |name: &str| -> Result<usize> {
        child_text(size, name)
            .and_then(|t| t.parse::<f64>().ok())
            .map(|v| v as usize)
            .ok_or_else(|| fail(format!("missing or invalid <{name}>")))
    };
    let (width, height) = (dim("width")?, dim("height")?);
    let mut boxes = Vec::new();
    for (i, obj) in root.children().filter(|c| c.has_tag_name("object")).enumerate() {
        if child_text(obj, "difficult").as_deref() == Some("1") {
            continue;
        }
        let name = child_text(obj, "name").ok_or_else(|| fail(format!("object {i}: missing <name>")))?;
        let class_id = VOC_CLASSES
            .iter()
            .position(|c| *c == name)
            .ok_or_else(|| fail(format!("object {i}: unknown class {name}")))?;
        let bnd = obj
            .children()
            .find(|c| c.has_tag_name("bndbox"))
            .ok_or_else(|| fail(format!("object {i}: missing <bndbox>")))?;
        let coord = |n: &str| -> Result<f64> {
            child_text(bnd, n)
                .and_then(|t| t.parse::<f64>().ok())
                .ok_or_else(|| fail(format!("object {i}: invalid <{n}>")))
        };
        let bbox = BBox::new(coord("xmin")? - 1.0, coord("ymin")? - 1.0, coord("xmax")?, coord("ymax")?);
        if !bbox.is_valid() {
            return Err(fail(format!("object {i}: degenerate box {bbox:?}")));
        }
        boxes.push(GtBox { bbox, class_id });
    }
    Ok((width, height, boxes))
}

fn read_voc_mask(path: &Path) -> Result<Mask> {
    let img = image::open(path).map_err(|source| Error::Image {
        path: path.to_path_buf(),
        source,
    })?;
    if matches!(img.color(), image::ColorType::L8) {
        return super::io::read_mask(path);
    }
    let rgb = img.to_rgb8();
    let palette = voc_palette();
    let lookup: std::collections::HashMap<[u8; 3], u8> = palette
        .iter()
        .enumerate()
        .take(21)
        .map(|(i, c)| (*c, i as u8))
        .collect();
    Ok(Mask {
        width: rgb.width() as usize,
        height: rgb.height() as usize,
        data: rgb
            .pixels()
            .map(|p| lookup.get(&p.0).copied().unwrap_or(IGNORE_LABEL))
            .collect(),
    })
}

/// Loads the listed ids from a VOC root. Masks are taken from
/// `SegmentationClassAug/` when present, else `SegmentationClass/`.
pub fn load_voc(root: &Path, ids: &[String]) -> Result<Dataset> {
    let mask_dir = ["SegmentationClassAug", "SegmentationClass"]
        .iter()
        .map(|d| root.join(d))
        .find(|p| p.is_dir());
    let mut samples = Vec::with_capacity(ids.len());
    for id in ids {
        let xml_path = root.join("Annotations").join(format!("{id}.xml"));
        let xml = fs::read_to_string(&xml_path).map_err(io_err(&xml_path))?;
        let (width, height, boxes) = parse_annotation(&xml, &xml_path)?;
        let img_path = root.join("JPEGImages").join(format!("{id}.jpg"));
        let img = image::open(&img_path)
            .map_err(|source| Error::Image {
                path: img_path.clone(),
                source,
            })?
            .to_rgb8();
        if (img.width() as usize, img.height() as usize) != (width, height) {
            return Err(Error::Format {
                path: xml_path,
                detail: format!("size {width}x{height} disagrees with the image"),
            });
        }
        let mask = match &mask_dir {
            Some(dir) if dir.join(format!("{id}.png")).exists() => {
                Some(read_voc_mask(&dir.join(format!("{id}.png")))?)
            }
            _ => None,
        };
        samples.push(Sample {
            id: id.clone(),
            image: RgbImage {
                width,
                height,
                data: img.into_raw(),
            },
            boxes: Some(boxes),
            mask,
            task: None,
        });
    }
    samples.sort_by(|a, b| a.id.cmp(&b.id));
    let ds = Dataset {
        samples,
        classes: voc_class_info(),
    };
    ds.validate()?;
    Ok(ds)
}

/// Id pool of a directory holding `with_mask.txt` and `boxes_only.txt`:
/// `(with_mask, boxes_only)`.
pub fn read_id_pool(dir: &Path) -> Result<(Vec<String>, Vec<String>)> {
    Ok((read_id_list(&dir.join("with_mask.txt"))?, read_id_list(&dir.join("boxes_only.txt"))?))
}

/// Directory of the bundled count-faithful VOC id lists.
pub fn bundled_id_lists() -> std::path::PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("data/voc")
}
