//! Mean average precision over detections.

use std::cmp::Ordering;
use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::data::{BoxXyxy, Dataset};
use crate::detr::Detection;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GroundTruth {
    pub image_id: u64,
    pub class_id: u32,
    pub bbox: BoxXyxy,
}

/// Ground-truth boxes plus the set of evaluated images, which may include
/// images without objects.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct GroundTruthSet {
    pub images: BTreeSet<u64>,
    pub boxes: Vec<GroundTruth>,
}

impl GroundTruthSet {
    pub fn from_dataset(ds: &Dataset) -> Self {
        let mut out = GroundTruthSet::default();
        for (img, anns) in ds.images.iter().zip(&ds.annotations) {
            out.images.insert(img.image_id);
            out.boxes.extend(anns.iter().map(|a| GroundTruth {
                image_id: img.image_id,
                class_id: a.class_id,
                bbox: a.bbox,
            }));
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MapReport {
    pub thresholds: Vec<f64>,
    /// mAP at each threshold, same order as `thresholds`.
    pub per_threshold: Vec<f64>,
    /// AP per class at each threshold. Classes with neither ground truth nor
    /// predictions are absent.
    pub per_class: BTreeMap<u32, Vec<f64>>,
    /// Mean over classes, then over thresholds.
    pub map: f64,
    /// Fraction of ground-truth boxes whose best-overlapping prediction has
    /// the right class.
    pub accuracy: f64,
}

impl MapReport {
    pub fn at(&self, threshold: f64) -> Option<f64> {
        self.thresholds
            .iter()
            .position(|t| (t - threshold).abs() < 1e-12)
            .map(|i| self.per_threshold[i])
    }
}

fn box_area(d: &Detection) -> f64 {
    (d.bbox[2] - d.bbox[0]).max(0.0) * (d.bbox[3] - d.bbox[1]).max(0.0)
}

/// Ranking used for AP: score descending, then smaller box first, then image
/// id, box coordinates and finally input position.
fn rank_order(preds: &[&Detection]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..preds.len()).collect();
    order.sort_by(|&a, &b| {
        let (p, q) = (preds[a], preds[b]);
        q.score
            .total_cmp(&p.score)
            .then(box_area(p).total_cmp(&box_area(q)))
            .then(p.image_id.cmp(&q.image_id))
            .then_with(|| {
                p.bbox
                    .iter()
                    .zip(&q.bbox)
                    .map(|(x, y)| x.total_cmp(y))
                    .find(|o| *o != Ordering::Equal)
                    .unwrap_or(Ordering::Equal)
            })
            .then(a.cmp(&b))
    });
    order
}

/// All-point interpolated AP for one class. `preds` and `gts` must already
/// be filtered to that class.
pub fn average_precision(preds: &[&Detection], gts: &[GroundTruth], threshold: f64) -> f64 {
    if gts.is_empty() {
        return 0.0;
    }
    let mut matched = vec![false; gts.len()];
    let mut tp = 0usize;
    let mut curve = Vec::with_capacity(preds.len());
    for (rank, &i) in rank_order(preds).iter().enumerate() {
        let d = preds[i];
        let pb = d.xyxy();
        let mut best: Option<(usize, f64)> = None;
        for (g, gt) in gts.iter().enumerate() {
            if matched[g] || gt.image_id != d.image_id {
                continue;
            }
            let iou = pb.iou(&gt.bbox);
            if iou >= threshold && best.is_none_or(|(_, b)| iou > b) {
                best = Some((g, iou));
            }
        }
        if let Some((g, _)) = best {
            matched[g] = true;
            tp += 1;
        }
        curve.push((tp as f64 / gts.len() as f64, tp as f64 / (rank + 1) as f64));
    }
    // Precision envelope from the right, then area under the staircase.
    let mut ap = 0.0;
    let mut best_p: f64 = 0.0;
    let mut envelope = vec![0.0; curve.len()];
    for i in (0..curve.len()).rev() {
        best_p = best_p.max(curve[i].1);
        envelope[i] = best_p;
    }
    let mut prev_r = 0.0;
    for (i, &(r, _)) in curve.iter().enumerate() {
        ap += (r - prev_r) * envelope[i];
        prev_r = r;
    }
    ap
}

fn classification_accuracy(preds: &[Detection], gts: &GroundTruthSet) -> f64 {
    if gts.boxes.is_empty() {
        return 0.0;
    }
    let correct = gts
        .boxes
        .iter()
        .filter(|gt| {
            preds
                .iter()
                .filter(|d| d.image_id == gt.image_id)
                .map(|d| (d.xyxy().iou(&gt.bbox), d))
                .max_by(|a, b| a.0.total_cmp(&b.0))
                .is_some_and(|(iou, d)| iou > 0.0 && d.class_id == gt.class_id)
        })
        .count();
    correct as f64 / gts.boxes.len() as f64
}

pub fn evaluate_map(preds: &[Detection], gts: &GroundTruthSet, thresholds: &[f64]) -> Result<MapReport> {
    if thresholds.is_empty() {
        return Err(Error::invalid("evaluate_map", "no IoU thresholds"));
    }
    if let Some(d) = preds.iter().find(|d| !gts.images.contains(&d.image_id)) {
        return Err(Error::Data(format!("prediction for unknown image id {}", d.image_id)));
    }
    let mut classes: BTreeSet<u32> = gts.boxes.iter().map(|g| g.class_id).collect();
    classes.extend(preds.iter().map(|d| d.class_id));
    let mut per_class = BTreeMap::new();
    for &c in &classes {
        let p: Vec<&Detection> = preds.iter().filter(|d| d.class_id == c).collect();
        let g: Vec<GroundTruth> = gts.boxes.iter().filter(|g| g.class_id == c).copied().collect();
        per_class.insert(c, thresholds.iter().map(|&t| average_precision(&p, &g, t)).collect::<Vec<_>>());
    }
    let per_threshold: Vec<f64> = (0..thresholds.len())
        .map(|i| {
            if per_class.is_empty() {
                0.0
            } else {
                per_class.values().map(|v| v[i]).sum::<f64>() / per_class.len() as f64
            }
        })
        .collect();
    let map = per_threshold.iter().sum::<f64>() / per_threshold.len() as f64;
    Ok(MapReport {
        thresholds: thresholds.to_vec(),
        per_threshold,
        per_class,
        map,
        accuracy: classification_accuracy(preds, gts),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn det(image_id: u64, class_id: u32, score: f64, b: [f64; 4]) -> Detection {
        Detection {
            image_id,
            class_id,
            class_name: format!("c{class_id}"),
            score,
            bbox: b,
        }
    }

    fn gt(image_id: u64, class_id: u32, b: [f64; 4]) -> GroundTruth {
        GroundTruth {
            image_id,
            class_id,
            bbox: BoxXyxy::new(b[0], b[1], b[2], b[3]),
        }
    }

    fn set(boxes: Vec<GroundTruth>) -> GroundTruthSet {
        GroundTruthSet {
            images: boxes.iter().map(|g| g.image_id).collect(),
            boxes,
        }
    }

    #[test]
    fn single_prediction_cases() {
        let g = set(vec![gt(1, 1, [0.0, 0.0, 10.0, 10.0])]);
        // IoU 0.9: shrink the box to 90% area.
        let hit = det(1, 1, 0.8, [0.0, 0.0, 10.0, 9.0]);
        assert_eq!(evaluate_map(&[hit], &g, &[0.5]).unwrap().map, 1.0);
        let miss = det(1, 1, 0.8, [0.0, 0.0, 10.0, 3.0]);
        assert_eq!(evaluate_map(&[miss], &g, &[0.5]).unwrap().map, 0.0);
        assert_eq!(evaluate_map(&[], &g, &[0.5]).unwrap().map, 0.0);
        assert!(evaluate_map(&[det(9, 1, 0.5, [0.0; 4])], &g, &[0.5]).is_err());
        let empty = evaluate_map(&[], &GroundTruthSet::default(), &[0.5]).unwrap();
        assert!(empty.per_class.is_empty());
    }

    #[test]
    fn duplicate_predictions_count_once() {
        let g = set(vec![gt(1, 1, [0.0, 0.0, 10.0, 10.0])]);
        let p = det(1, 1, 0.9, [0.0, 0.0, 10.0, 10.0]);
        let q = det(1, 1, 0.8, [0.0, 0.0, 10.0, 10.0]);
        // Second copy is a false positive after full recall, so AP stays 1.
        assert_eq!(evaluate_map(&[p.clone(), q], &g, &[0.5]).unwrap().map, 1.0);
        let r = det(1, 1, 0.95, [50.0, 50.0, 60.0, 60.0]);
        assert!((evaluate_map(&[p, r], &g, &[0.5]).unwrap().map - 0.5).abs() < 1e-12);
    }

    #[test]
    fn class_without_ground_truth_scores_zero() {
        let g = set(vec![gt(1, 1, [0.0, 0.0, 10.0, 10.0])]);
        let preds = [det(1, 1, 0.9, [0.0, 0.0, 10.0, 10.0]), det(1, 2, 0.9, [0.0, 0.0, 10.0, 10.0])];
        let r = evaluate_map(&preds, &g, &[0.5, 0.75]).unwrap();
        assert_eq!(r.per_class[&2], vec![0.0, 0.0]);
        assert_eq!(r.map, 0.5);
        assert_eq!(r.at(0.75), Some(0.5));
    }

    #[test]
    fn accuracy_uses_best_overlap() {
        let g = set(vec![gt(1, 1, [0.0, 0.0, 10.0, 10.0]), gt(1, 2, [20.0, 20.0, 30.0, 30.0])]);
        let preds = [det(1, 1, 0.2, [0.0, 0.0, 10.0, 10.0]), det(1, 1, 0.9, [21.0, 21.0, 30.0, 30.0])];
        assert_eq!(evaluate_map(&preds, &g, &[0.5]).unwrap().accuracy, 0.5);
    }
}
