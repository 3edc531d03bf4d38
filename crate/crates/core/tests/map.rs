use cdmm_core::data::BoxXyxy;
use cdmm_core::detr::Detection;
use cdmm_core::harness::{evaluate_map, GroundTruth, GroundTruthSet};
use proptest::prelude::*;

fn det(image_id: u64, class_id: u32, score: f64, b: [f64; 4]) -> Detection {
    Detection {
        image_id,
        class_id,
        class_name: String::new(),
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

/// Straight-line AP: rank, greedy match, then for every true positive add
/// 1/G times the best precision at this rank or later.
fn oracle_ap(preds: &[Detection], gts: &[GroundTruth], class: u32, t: f64) -> f64 {
    let gts: Vec<&GroundTruth> = gts.iter().filter(|g| g.class_id == class).collect();
    if gts.is_empty() {
        return 0.0;
    }
    let mut idx: Vec<usize> = (0..preds.len()).filter(|&i| preds[i].class_id == class).collect();
    idx.sort_by(|&a, &b| {
        let area = |d: &Detection| d.xyxy().area();
        preds[b]
            .score
            .partial_cmp(&preds[a].score)
            .unwrap()
            .then(area(&preds[a]).partial_cmp(&area(&preds[b])).unwrap())
            .then(preds[a].image_id.cmp(&preds[b].image_id))
            .then(preds[a].bbox.partial_cmp(&preds[b].bbox).unwrap())
    });
    let mut used = vec![false; gts.len()];
    let mut hits = Vec::new();
    let mut tp = 0.0;
    let mut precision = Vec::new();
    for (rank, &i) in idx.iter().enumerate() {
        let mut best: Option<(usize, f64)> = None;
        for (g, gt) in gts.iter().enumerate() {
            if used[g] || gt.image_id != preds[i].image_id {
                continue;
            }
            let iou = preds[i].xyxy().iou(&gt.bbox);
            let better = match best {
                None => true,
                Some((_, b)) => iou > b,
            };
            if iou >= t && better {
                best = Some((g, iou));
            }
        }
        let hit = best.is_some();
        if let Some((g, _)) = best {
            used[g] = true;
            tp += 1.0;
        }
        hits.push(hit);
        precision.push(tp / (rank + 1) as f64);
    }
    let mut ap = 0.0;
    for k in 0..hits.len() {
        if hits[k] {
            let p = precision[k..].iter().cloned().fold(0.0, f64::max);
            ap += p / gts.len() as f64;
        }
    }
    ap
}

fn oracle_map(preds: &[Detection], gts: &[GroundTruth], t: f64) -> f64 {
    let mut classes: Vec<u32> = gts.iter().map(|g| g.class_id).chain(preds.iter().map(|d| d.class_id)).collect();
    classes.sort_unstable();
    classes.dedup();
    if classes.is_empty() {
        return 0.0;
    }
    classes.iter().map(|&c| oracle_ap(preds, gts, c, t)).sum::<f64>() / classes.len() as f64
}

fn set(boxes: Vec<GroundTruth>, images: &[u64]) -> GroundTruthSet {
    GroundTruthSet {
        images: images.iter().copied().collect(),
        boxes,
    }
}

#[test]
fn hit_miss_hit_ranking() {
    let gts = vec![gt(1, 1, [0.0, 0.0, 10.0, 10.0]), gt(1, 1, [20.0, 20.0, 30.0, 30.0])];
    let preds = [
        det(1, 1, 0.9, [0.0, 0.0, 10.0, 10.0]),
        det(1, 1, 0.8, [50.0, 50.0, 60.0, 60.0]),
        det(1, 1, 0.7, [20.0, 20.0, 30.0, 30.0]),
    ];
    let expected = 1.0 * (0.5 - 0.0) + (2.0 / 3.0) * (1.0 - 0.5);
    let r = evaluate_map(&preds, &set(gts.clone(), &[1]), &[0.5]).unwrap();
    assert!((r.map - 0.8333).abs() < 1e-4);
    assert!((r.map - expected).abs() < 1e-12);
    assert!((oracle_map(&preds, &gts, 0.5) - expected).abs() < 1e-12);
}

#[test]
fn score_ties_prefer_smaller_boxes() {
    let gts = vec![gt(1, 1, [0.0, 0.0, 4.0, 4.0])];
    // Same score; the small box is the true positive and must rank first.
    let big = det(1, 1, 0.5, [0.0, 0.0, 40.0, 40.0]);
    let small = det(1, 1, 0.5, [0.0, 0.0, 4.0, 4.0]);
    let g = set(gts, &[1]);
    assert_eq!(evaluate_map(&[big.clone(), small.clone()], &g, &[0.5]).unwrap().map, 1.0);
    assert_eq!(evaluate_map(&[small, big], &g, &[0.5]).unwrap().map, 1.0);
}

#[test]
fn empty_cases() {
    let g = set(vec![gt(1, 1, [0.0, 0.0, 4.0, 4.0])], &[1, 2]);
    assert_eq!(evaluate_map(&[], &g, &[0.5]).unwrap().map, 0.0);
    let nothing = evaluate_map(&[], &set(vec![], &[1]), &[0.5, 0.75]).unwrap();
    assert_eq!(nothing.map, 0.0);
    assert!(nothing.per_class.is_empty());
    // Class 2 has neither ground truth nor predictions and stays out of the mean.
    let hit = det(2, 1, 0.4, [0.0, 0.0, 4.0, 4.0]);
    let r = evaluate_map(&[hit], &set(vec![gt(2, 1, [0.0, 0.0, 4.0, 4.0])], &[2]), &[0.5]).unwrap();
    assert_eq!(r.per_class.keys().copied().collect::<Vec<_>>(), [1]);
}

fn arb_box() -> impl Strategy<Value = [f64; 4]> {
    (0u32..12, 0u32..12, 1u32..8, 1u32..8).prop_map(|(x, y, w, h)| [x as f64, y as f64, (x + w) as f64, (y + h) as f64])
}

fn arb_case() -> impl Strategy<Value = (Vec<Detection>, Vec<GroundTruth>)> {
    let gts = prop::collection::vec((0u64..3, 0u32..3, arb_box()), 0..8)
        .prop_map(|v| v.into_iter().map(|(i, c, b)| gt(i, c, b)).collect::<Vec<_>>());
    // Scores on a coarse grid so ties are common.
    let preds = prop::collection::vec((0u64..3, 0u32..3, 0u32..5, arb_box()), 0..12).prop_map(|v| {
        v.into_iter()
            .map(|(i, c, s, b)| det(i, c, s as f64 / 4.0, b))
            .collect::<Vec<_>>()
    });
    (preds, gts)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(50))]

    #[test]
    fn matches_oracle_in_unit_range((preds, gts) in arb_case()) {
        let g = set(gts.clone(), &[0, 1, 2]);
        for t in [0.3, 0.5, 0.75] {
            let r = evaluate_map(&preds, &g, &[t]).unwrap();
            prop_assert!((0.0..=1.0).contains(&r.map));
            prop_assert!((r.map - oracle_map(&preds, &gts, t)).abs() < 1e-12);
        }
    }

    #[test]
    fn permutation_invariant((preds, gts) in arb_case(), key in any::<u64>()) {
        let g = set(gts, &[0, 1, 2]);
        let base = evaluate_map(&preds, &g, &[0.5, 0.75]).unwrap();
        let mut shuffled = preds.clone();
        // Deterministic shuffle keyed on the generated value.
        shuffled.sort_by_key(|d| (d.bbox[0] as u64 * 31 + d.bbox[3] as u64 + d.image_id * 7).wrapping_mul(key | 1).rotate_left(17));
        let again = evaluate_map(&shuffled, &g, &[0.5, 0.75]).unwrap();
        prop_assert_eq!(base.per_threshold, again.per_threshold);
        shuffled.reverse();
        let rev = evaluate_map(&shuffled, &g, &[0.5, 0.75]).unwrap();
        prop_assert_eq!(base.per_class, rev.per_class);
    }

    #[test]
    fn stricter_threshold_never_raises_map((preds, gts) in arb_case()) {
        let g = set(gts, &[0, 1, 2]);
        let r = evaluate_map(&preds, &g, &[0.5, 0.75]).unwrap();
        prop_assert!(r.per_threshold[1] <= r.per_threshold[0] + 1e-12);
    }
}
