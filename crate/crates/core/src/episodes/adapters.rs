//! Manifests for the standard label-map layouts of PASCAL VOC and COCO.

use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};

use super::{DatasetManifest, ManifestEntry, MaskKind};
use crate::error::{ensure, Error, Result};
use crate::imaging::read_label_map;

pub const VOC_CLASSES: [&str; 20] = [
    "aeroplane", "bicycle", "bird", "boat", "bottle", "bus", "car", "cat", "chair", "cow",
    "diningtable", "dog", "horse", "motorbike", "person", "pottedplant", "sheep", "sofa", "train", "tvmonitor",
];

pub const COCO_CLASSES: [&str; 80] = [
    "person", "bicycle", "car", "motorcycle", "airplane", "bus", "train", "truck", "boat", "traffic light",
    "fire hydrant", "stop sign", "parking meter", "bench", "bird", "cat", "dog", "horse", "sheep", "cow",
    "elephant", "bear", "zebra", "giraffe", "backpack", "umbrella", "handbag", "tie", "suitcase", "frisbee",
    "skis", "snowboard", "sports ball", "kite", "baseball bat", "baseball glove", "skateboard", "surfboard",
    "tennis racket", "bottle", "wine glass", "cup", "fork", "knife", "spoon", "bowl", "banana", "apple",
    "sandwich", "orange", "broccoli", "carrot", "hot dog", "pizza", "donut", "cake", "chair", "couch",
    "potted plant", "bed", "dining table", "toilet", "tv", "laptop", "mouse", "remote", "keyboard",
    "cell phone", "microwave", "oven", "toaster", "sink", "refrigerator", "book", "clock", "vase",
    "scissors", "teddy bear", "hair drier", "toothbrush",
];

fn names(list: &[&str]) -> BTreeMap<u32, String> {
    list.iter().enumerate().map(|(i, n)| (i as u32 + 1, n.to_string())).collect()
}

fn sorted_pngs(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    for e in std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let p = e.map_err(|e| Error::io(dir, e))?.path();
        if p.extension().is_some_and(|x| x.eq_ignore_ascii_case("png")) {
            out.push(p);
        }
    }
    out.sort();
    Ok(out)
}

/// Builds entries for every label map in `mask_dir` whose image exists in
/// `image_dir` with extension `jpg`.
fn label_manifest(root: &Path, image_dir: &Path, mask_dir: &Path, classes: &[&str]) -> Result<DatasetManifest> {
    let max = classes.len() as u32;
    let mut entries = Vec::new();
    for mask in sorted_pngs(&root.join(mask_dir))? {
        let stem = mask.file_stem().and_then(|s| s.to_str()).unwrap_or_default().to_string();
        let image = image_dir.join(format!("{stem}.jpg"));
        if !root.join(&image).is_file() {
            continue;
        }
        let (_, _, data) = read_label_map(&mask)?;
        let present: BTreeSet<u32> = data.iter().map(|&v| v as u32).filter(|&v| (1..=max).contains(&v)).collect();
        if present.is_empty() {
            continue;
        }
        entries.push(ManifestEntry {
            image,
            mask: mask_dir.join(format!("{stem}.png")),
            classes: present.into_iter().collect(),
            mask_kind: MaskKind::Label,
        });
    }
    ensure!(!entries.is_empty(), Config, "no labelled images under {}", root.display());
    Ok(DatasetManifest { entries, class_names: names(classes), root: root.to_path_buf() })
}

/// `JPEGImages/*.jpg` with `SegmentationClassAug/*.png` (or
/// `SegmentationClass/*.png`) label maps.
pub fn pascal_voc_manifest(root: &Path) -> Result<DatasetManifest> {
    let aug = PathBuf::from("SegmentationClassAug");
    let mask_dir = if root.join(&aug).is_dir() { aug } else { PathBuf::from("SegmentationClass") };
    label_manifest(root, Path::new("JPEGImages"), &mask_dir, &VOC_CLASSES)
}

/// `<split>2014/*.jpg` with `annotations/<split>2014/*.png` label maps
/// holding class ids 1..=80.
pub fn coco_manifest(root: &Path, split: &str) -> Result<DatasetManifest> {
    let images = PathBuf::from(format!("{split}2014"));
    let masks = PathBuf::from("annotations").join(format!("{split}2014"));
    label_manifest(root, &images, &masks, &COCO_CLASSES)
}
