//! Datasets, rich-text registries and episodic sampling.

pub mod coco;
pub mod episode;
pub mod synth;
pub mod text;

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub use coco::{load_coco_annotations, read_feature_file, write_dataset, write_feature_file, Loaded};
pub use episode::{evaluation_episode, few_shot_split, sample_episode, Episode, QueryImage, SupportInstance};
pub use synth::{generate_synthetic_domains, SynthConfig, SyntheticDomains, TextVariant};
pub use text::{build_vocab, tokenize, Provenance, TextRegistry, TokenSeq, Vocab};

/// Axis-aligned box `[x1, y1, x2, y2]` in image coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoxXyxy {
    pub x1: f64,
    pub y1: f64,
    pub x2: f64,
    pub y2: f64,
}

impl BoxXyxy {
    pub fn new(x1: f64, y1: f64, x2: f64, y2: f64) -> Self {
        BoxXyxy { x1, y1, x2, y2 }
    }

    pub fn from_xywh(x: f64, y: f64, w: f64, h: f64) -> Self {
        BoxXyxy::new(x, y, x + w, y + h)
    }

    pub fn width(&self) -> f64 {
        self.x2 - self.x1
    }

    pub fn height(&self) -> f64 {
        self.y2 - self.y1
    }

    pub fn area(&self) -> f64 {
        self.width().max(0.0) * self.height().max(0.0)
    }

    pub fn iou(&self, other: &BoxXyxy) -> f64 {
        let iw = (self.x2.min(other.x2) - self.x1.max(other.x1)).max(0.0);
        let ih = (self.y2.min(other.y2) - self.y1.max(other.y1)).max(0.0);
        let inter = iw * ih;
        let union = self.area() + other.area() - inter;
        if union <= 0.0 {
            0.0
        } else {
            inter / union
        }
    }

    /// Normalized `[cx, cy, w, h]` relative to an image extent.
    pub fn to_cxcywh_norm(&self, width: f64, height: f64) -> [f64; 4] {
        [
            (self.x1 + self.x2) / 2.0 / width,
            (self.y1 + self.y2) / 2.0 / height,
            self.width() / width,
            self.height() / height,
        ]
    }

    pub fn from_cxcywh_norm(b: [f64; 4], width: f64, height: f64) -> Self {
        let [cx, cy, w, h] = b;
        BoxXyxy::new(
            (cx - w / 2.0) * width,
            (cy - h / 2.0) * height,
            (cx + w / 2.0) * width,
            (cy + h / 2.0) * height,
        )
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Annotation {
    pub class_id: u32,
    pub bbox: BoxXyxy,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Base,
    Novel,
}

/// Precomputed feature map for one image, `H×W×d_in`.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureGrid {
    pub image_id: u64,
    pub grid: Tensor,
    /// Image extent in pixels; boxes are expressed in this frame.
    pub width: f64,
    pub height: f64,
    pub source: String,
}

impl FeatureGrid {
    pub fn new(image_id: u64, grid: Tensor, width: f64, height: f64, source: impl Into<String>) -> Result<Self> {
        if grid.rank() != 3 {
            return Err(Error::Data(format!("feature grid must be H×W×d, got {:?}", grid.shape())));
        }
        if !grid.is_finite() {
            return Err(Error::Data(format!("image {image_id}: non-finite features")));
        }
        if width <= 0.0 || height <= 0.0 {
            return Err(Error::Data(format!("image {image_id}: empty extent {width}×{height}")));
        }
        Ok(FeatureGrid {
            image_id,
            grid,
            width,
            height,
            source: source.into(),
        })
    }

    pub fn rows(&self) -> usize {
        self.grid.shape()[0]
    }

    pub fn cols(&self) -> usize {
        self.grid.shape()[1]
    }

    pub fn depth(&self) -> usize {
        self.grid.shape()[2]
    }

    pub fn cell(&self, r: usize, c: usize) -> &[f64] {
        let d = self.depth();
        let off = (r * self.cols() + c) * d;
        &self.grid.data()[off..off + d]
    }

    /// Cells flattened row-major into an `HW×d_in` matrix.
    pub fn flattened(&self) -> Tensor {
        let (h, w, d) = (self.rows(), self.cols(), self.depth());
        self.grid.clone().reshape(vec![h * w, d]).expect("same element count")
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub images: Vec<FeatureGrid>,
    /// Parallel to `images`.
    pub annotations: Vec<Vec<Annotation>>,
    pub classes: BTreeMap<u32, String>,
    pub split: Split,
}

impl Dataset {
    /// Checks the class-reference and box-extent invariants.
    pub fn validate(&self) -> Result<()> {
        if self.images.len() != self.annotations.len() {
            return Err(Error::Data("annotation lists do not match image count".into()));
        }
        let mut ids = BTreeSet::new();
        for (img, anns) in self.images.iter().zip(&self.annotations) {
            if !ids.insert(img.image_id) {
                return Err(Error::Data(format!("duplicate image id {}", img.image_id)));
            }
            for a in anns {
                if !self.classes.contains_key(&a.class_id) {
                    return Err(Error::Data(format!("unknown class id {}", a.class_id)));
                }
                let b = a.bbox;
                if b.width() <= 0.0 || b.height() <= 0.0 {
                    return Err(Error::Data(format!("degenerate box in image {}", img.image_id)));
                }
                if b.x1 < 0.0 || b.y1 < 0.0 || b.x2 > img.width || b.y2 > img.height {
                    return Err(Error::Data(format!("box outside image {}", img.image_id)));
                }
            }
        }
        Ok(())
    }

    pub fn class_ids(&self) -> Vec<u32> {
        self.classes.keys().copied().collect()
    }

    pub fn class_name(&self, id: u32) -> Option<&str> {
        self.classes.get(&id).map(String::as_str)
    }

    /// Number of annotated instances per class.
    pub fn instance_counts(&self) -> BTreeMap<u32, usize> {
        let mut counts: BTreeMap<u32, usize> = self.classes.keys().map(|k| (*k, 0)).collect();
        for a in self.annotations.iter().flatten() {
            *counts.entry(a.class_id).or_default() += 1;
        }
        counts
    }

    pub fn image_index(&self, image_id: u64) -> Option<usize> {
        self.images.iter().position(|g| g.image_id == image_id)
    }

    pub fn feature_depth(&self) -> Option<usize> {
        self.images.first().map(FeatureGrid::depth)
    }

    /// A new dataset holding only the listed images (in the given order).
    pub fn subset(&self, indices: &[usize]) -> Dataset {
        Dataset {
            images: indices.iter().map(|&i| self.images[i].clone()).collect(),
            annotations: indices.iter().map(|&i| self.annotations[i].clone()).collect(),
            classes: self.classes.clone(),
            split: self.split,
        }
    }

    /// Errors if the two datasets share a class id.
    pub fn check_disjoint(&self, other: &Dataset) -> Result<()> {
        if let Some(id) = self.classes.keys().find(|k| other.classes.contains_key(k)) {
            return Err(Error::Data(format!("class id {id} appears in both base and novel splits")));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn iou_cases() {
        let a = BoxXyxy::new(0.0, 0.0, 2.0, 2.0);
        assert_eq!(a.iou(&a), 1.0);
        let b = BoxXyxy::new(1.0, 0.0, 3.0, 2.0);
        assert!((a.iou(&b) - 1.0 / 3.0).abs() < 1e-12);
        let c = BoxXyxy::new(5.0, 5.0, 6.0, 6.0);
        assert_eq!(a.iou(&c), 0.0);
    }

    #[test]
    fn cxcywh_round_trip() {
        let b = BoxXyxy::new(16.0, 32.0, 48.0, 40.0);
        let n = b.to_cxcywh_norm(128.0, 64.0);
        let back = BoxXyxy::from_cxcywh_norm(n, 128.0, 64.0);
        assert!((back.x1 - b.x1).abs() < 1e-12 && (back.y2 - b.y2).abs() < 1e-12);
    }
}
