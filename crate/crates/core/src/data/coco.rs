//! Annotation ingest in a small subset of the COCO detection schema, plus the
//! flat binary feature-file format.
//!
//! Feature files are little-endian: three `u32` (H, W, d_in) followed by
//! `H·W·d_in` `f32` values in row-major cell order.

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use log::warn;
use serde::{Deserialize, Serialize};

use super::{Annotation, BoxXyxy, Dataset, FeatureGrid, Split};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Serialize, Deserialize)]
struct CocoFile {
    images: Vec<CocoImage>,
    annotations: Vec<CocoAnnotation>,
    categories: Vec<CocoCategory>,
}

#[derive(Debug, Serialize, Deserialize)]
struct CocoImage {
    id: u64,
    height: f64,
    width: f64,
    feature_file: String,
}

#[derive(Debug, Serialize, Deserialize)]
struct CocoAnnotation {
    id: u64,
    image_id: u64,
    category_id: u32,
    bbox: [f64; 4],
}

#[derive(Debug, Serialize, Deserialize)]
struct CocoCategory {
    id: u32,
    name: String,
}

/// A loaded dataset plus the number of annotation records that were dropped.
#[derive(Debug, Clone)]
pub struct Loaded {
    pub dataset: Dataset,
    pub skipped_annotations: usize,
}

/// Reads an annotation file. Feature paths are resolved relative to the
/// annotation file's directory. Boxes are converted from `[x, y, w, h]` to
/// corner form and clipped to the image; records with non-positive width or
/// height are skipped and counted.
pub fn load_coco_annotations(path: impl AsRef<Path>, split: Split) -> Result<Loaded> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let file: CocoFile = serde_json::from_str(&text).map_err(|e| Error::Schema {
        path: path.to_path_buf(),
        msg: format!("line {} column {}: {e}", e.line(), e.column()),
    })?;
    let root = path.parent().map(Path::to_path_buf).unwrap_or_default();
    let schema = |msg: String| Error::Schema {
        path: path.to_path_buf(),
        msg,
    };

    let mut classes = BTreeMap::new();
    for c in &file.categories {
        if classes.insert(c.id, c.name.clone()).is_some() {
            return Err(schema(format!("duplicate category id {}", c.id)));
        }
    }

    let mut index: HashMap<u64, usize> = HashMap::new();
    let mut images = Vec::with_capacity(file.images.len());
    for (i, img) in file.images.iter().enumerate() {
        if index.insert(img.id, i).is_some() {
            return Err(schema(format!("duplicate image id {}", img.id)));
        }
        let fpath = root.join(&img.feature_file);
        let grid = read_feature_file(&fpath)?;
        images.push(FeatureGrid::new(img.id, grid, img.width, img.height, fpath.display().to_string())?);
    }

    let mut annotations = vec![Vec::new(); images.len()];
    let mut skipped = 0;
    for a in &file.annotations {
        if !classes.contains_key(&a.category_id) {
            return Err(schema(format!(
                "annotation {} references missing category id {}",
                a.id, a.category_id
            )));
        }
        let &i = index
            .get(&a.image_id)
            .ok_or_else(|| schema(format!("annotation {} references missing image id {}", a.id, a.image_id)))?;
        let img = &images[i];
        let [x, y, w, h] = a.bbox;
        let b = BoxXyxy::from_xywh(x, y, w, h);
        let clipped = BoxXyxy::new(b.x1.max(0.0), b.y1.max(0.0), b.x2.min(img.width), b.y2.min(img.height));
        if !(w > 0.0 && h > 0.0 && clipped.width() > 0.0 && clipped.height() > 0.0) {
            warn!("skipping annotation {}: degenerate box {:?}", a.id, a.bbox);
            skipped += 1;
            continue;
        }
        annotations[i].push(Annotation {
            class_id: a.category_id,
            bbox: clipped,
        });
    }

    let dataset = Dataset {
        images,
        annotations,
        classes,
        split,
    };
    dataset.validate()?;
    Ok(Loaded {
        dataset,
        skipped_annotations: skipped,
    })
}

pub fn read_feature_file(path: impl AsRef<Path>) -> Result<Tensor> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let (dims, data) = decode_f32_block(&bytes).map_err(|msg| Error::Data(format!("{}: {msg}", path.display())))?;
    Tensor::new(dims.to_vec(), data)
}

pub fn write_feature_file(path: impl AsRef<Path>, grid: &Tensor) -> Result<()> {
    let path = path.as_ref();
    let dims: [usize; 3] = match grid.shape() {
        [h, w, d] => [*h, *w, *d],
        [h, d] => [*h, 1, *d],
        s => return Err(Error::Data(format!("cannot write tensor of shape {s:?} as feature file"))),
    };
    fs::write(path, encode_f32_block(dims, grid.data())).map_err(|e| Error::io(path, e))
}

pub(crate) fn encode_f32_block(dims: [usize; 3], data: &[f64]) -> Vec<u8> {
    let mut out = Vec::with_capacity(12 + data.len() * 4);
    for d in dims {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for v in data {
        out.extend_from_slice(&(*v as f32).to_le_bytes());
    }
    out
}

pub(crate) fn decode_f32_block(bytes: &[u8]) -> std::result::Result<([usize; 3], Vec<f64>), String> {
    if bytes.len() < 12 {
        return Err("truncated header".into());
    }
    let u = |i: usize| u32::from_le_bytes(bytes[i * 4..i * 4 + 4].try_into().unwrap()) as usize;
    let dims = [u(0), u(1), u(2)];
    let n: usize = dims.iter().product();
    if n == 0 {
        return Err(format!("zero extent in header {dims:?}"));
    }
    if bytes.len() != 12 + n * 4 {
        return Err(format!("expected {} data bytes for {dims:?}, found {}", n * 4, bytes.len() - 12));
    }
    let data = bytes[12..]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
        .collect();
    Ok((dims, data))
}

/// Writes `<dir>/<stem>.json` and one feature file per image under
/// `<dir>/features/`. Returns the annotation file path.
pub fn write_dataset(dataset: &Dataset, dir: impl AsRef<Path>, stem: &str) -> Result<PathBuf> {
    let dir = dir.as_ref();
    let feat_dir = dir.join("features");
    fs::create_dir_all(&feat_dir).map_err(|e| Error::io(&feat_dir, e))?;
    let mut images = Vec::new();
    let mut annotations = Vec::new();
    let mut next_ann = 1;
    for (img, anns) in dataset.images.iter().zip(&dataset.annotations) {
        let rel = format!("features/{stem}_{}.bin", img.image_id);
        write_feature_file(dir.join(&rel), &img.grid)?;
        images.push(CocoImage {
            id: img.image_id,
            height: img.height,
            width: img.width,
            feature_file: rel,
        });
        for a in anns {
            annotations.push(CocoAnnotation {
                id: next_ann,
                image_id: img.image_id,
                category_id: a.class_id,
                bbox: [a.bbox.x1, a.bbox.y1, a.bbox.width(), a.bbox.height()],
            });
            next_ann += 1;
        }
    }
    let categories = dataset
        .classes
        .iter()
        .map(|(id, name)| CocoCategory {
            id: *id,
            name: name.clone(),
        })
        .collect();
    let file = CocoFile {
        images,
        annotations,
        categories,
    };
    let path = dir.join(format!("{stem}.json"));
    let mut f = fs::File::create(&path).map_err(|e| Error::io(&path, e))?;
    let json = serde_json::to_string_pretty(&file).map_err(|e| Error::Data(e.to_string()))?;
    f.write_all(json.as_bytes()).map_err(|e| Error::io(&path, e))?;
    Ok(path)
}
