//! Detection evaluation: suppression, matching and average precision.
//!
//! Everything here is deterministic given its inputs. Rankings sort by
//! fused score descending with ties broken by scene id and then input
//! order, so shuffling equal-scored detections is the only way to change
//! a result.

use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::geometry::{iou, BBox};
use crate::scenario::{GtObject, Scene, AREA_LARGE_MIN, AREA_SMALL_MAX};
use crate::scoring::ScoreTriple;

/// One scored detection, tied to its scene.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct Detection {
    pub bbox: BBox,
    pub scores: ScoreTriple,
    pub fused: f64,
    pub class: u32,
    pub scene_id: u64,
}

/// Indices of `scores` ranked descending, ties to the lower index.
/// `cap = usize::MAX` ranks everything; smaller caps keep the head.
pub fn cap_by_score(scores: &[f64], cap: usize) -> Vec<usize> {
    assert!(
        scores.iter().all(|s| s.is_finite()),
        "ranking scores must be finite"
    );
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].partial_cmp(&scores[a]).unwrap().then(a.cmp(&b)));
    order.truncate(cap);
    order
}

/// Greedy non-maximum suppression. Boxes are visited in score order (ties
/// to the lower index); a box is dropped when it overlaps an already-kept
/// box strictly above the threshold. Returns kept indices in visit order.
pub fn nms(boxes: &[BBox], scores: &[f64], iou_threshold: f64) -> Vec<usize> {
    assert_eq!(boxes.len(), scores.len(), "boxes and scores must align");
    let order = cap_by_score(scores, usize::MAX);
    let mut kept: Vec<usize> = Vec::new();
    for i in order {
        if kept
            .iter()
            .all(|&k| iou(&boxes[i], &boxes[k]) <= iou_threshold)
        {
            kept.push(i);
        }
    }
    kept
}

/// Per-class NMS over detections of one scene.
pub fn nms_detections(dets: &[Detection], iou_threshold: f64) -> Vec<usize> {
    let mut classes: Vec<u32> = dets.iter().map(|d| d.class).collect();
    classes.sort_unstable();
    classes.dedup();
    let mut kept = Vec::new();
    for class in classes {
        let idx: Vec<usize> = (0..dets.len())
            .filter(|&i| dets[i].class == class)
            .collect();
        let boxes: Vec<BBox> = idx.iter().map(|&i| dets[i].bbox).collect();
        let scores: Vec<f64> = idx.iter().map(|&i| dets[i].fused).collect();
        kept.extend(
            nms(&boxes, &scores, iou_threshold)
                .into_iter()
                .map(|k| idx[k]),
        );
    }
    kept.sort_by(|&a, &b| {
        dets[b]
            .fused
            .partial_cmp(&dets[a].fused)
            .unwrap()
            .then(a.cmp(&b))
    });
    kept
}

/// Assignment of ranked detections to ground truths.
#[derive(Debug, Clone, PartialEq)]
pub struct MatchOutcome {
    /// Per detection (input order): matched gt index, if any.
    pub det_to_gt: Vec<Option<usize>>,
    pub gt_matched: Vec<bool>,
}

/// Greedy matching: detections in `order` each take the unmatched gt of
/// their class with the highest overlap, if it reaches the threshold.
/// Overlap ties go to the lower gt index.
pub fn match_detections(
    boxes: &[BBox],
    classes: &[u32],
    order: &[usize],
    gts: &[GtObject],
    iou_threshold: f64,
) -> MatchOutcome {
    assert_eq!(boxes.len(), classes.len(), "boxes and classes must align");
    let mut det_to_gt = vec![None; boxes.len()];
    let mut gt_matched = vec![false; gts.len()];
    for &d in order {
        let mut best: Option<(usize, f64)> = None;
        for (g, gt) in gts.iter().enumerate() {
            if gt_matched[g] || gt.class != classes[d] {
                continue;
            }
            let v = iou(&boxes[d], &gt.bbox);
            if v >= iou_threshold && best.is_none_or(|(_, bv)| v > bv) {
                best = Some((g, v));
            }
        }
        if let Some((g, _)) = best {
            det_to_gt[d] = Some(g);
            gt_matched[g] = true;
        }
    }
    MatchOutcome {
        det_to_gt,
        gt_matched,
    }
}

/// 101-point interpolated average precision. `tp_flags` follows rank
/// order. For each recall level the interpolated precision is the
/// precision at the first rank whose recall reaches that level, zero if
/// recall never gets there. Zero ground truths give zero by convention.
pub fn average_precision(tp_flags: &[bool], n_gt: usize) -> f64 {
    if n_gt == 0 {
        return 0.0;
    }
    let n = tp_flags.len();
    let mut tp_prefix = Vec::with_capacity(n);
    let mut tp = 0usize;
    for &f in tp_flags {
        tp += f as usize;
        tp_prefix.push(tp);
    }
    let mut sum = 0.0;
    for level in 0..=100 {
        let r = level as f64 / 100.0;
        // recall is non-decreasing in rank; find the first rank at or
        // above the level
        let hit = (0..n).find(|&k| tp_prefix[k] as f64 / n_gt as f64 >= r);
        if let Some(k) = hit {
            sum += tp_prefix[k] as f64 / (k + 1) as f64;
        }
    }
    sum / 101.0
}

/// Evaluator knobs: the overlap sweep and the size bin edges.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub iou_thresholds: Vec<f64>,
    /// Exclusive upper area bound of the small bin.
    pub small_max: f64,
    /// Exclusive lower area bound of the large bin.
    pub large_min: f64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            iou_thresholds: (0..10).map(|i| 0.5 + 0.05 * i as f64).collect(),
            small_max: AREA_SMALL_MAX,
            large_min: AREA_LARGE_MIN,
        }
    }
}

impl EvalConfig {
    pub fn validate(&self) -> Result<()> {
        if self.iou_thresholds.is_empty() {
            return Err(Error::Config("iou_thresholds must not be empty".into()));
        }
        for t in &self.iou_thresholds {
            if !t.is_finite() || !(0.0..=1.0).contains(t) {
                return Err(Error::Config(format!("iou threshold {t} outside [0, 1]")));
            }
        }
        if !(self.small_max > 0.0 && self.large_min >= self.small_max) {
            return Err(Error::Config(format!(
                "size bins need 0 < small_max ({}) <= large_min ({})",
                self.small_max, self.large_min
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum SizeBin {
    Small,
    Medium,
    Large,
}

/// AP overall and per size bin.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize)]
pub struct ScaleAp {
    pub all: f64,
    pub small: f64,
    pub medium: f64,
    pub large: f64,
}

/// Results at one overlap threshold.
#[derive(Debug, Clone, PartialEq, serde::Serialize)]
pub struct ThresholdReport {
    pub iou_threshold: f64,
    pub ap: ScaleAp,
    /// (recall, precision) after each rank, over all detections.
    pub pr_curve: Vec<(f64, f64)>,
}

/// Full evaluation: one report per threshold plus the threshold means.
#[derive(Debug, Clone, PartialEq, serde::Serialize)]
pub struct EvalReport {
    pub thresholds: Vec<ThresholdReport>,
    pub mean: ScaleAp,
    pub n_detections: usize,
    pub n_gts: usize,
}

fn bin_of(area: f64, config: &EvalConfig) -> SizeBin {
    if area < config.small_max {
        SizeBin::Small
    } else if area <= config.large_min {
        SizeBin::Medium
    } else {
        SizeBin::Large
    }
}

/// Scores a set of final detections against scene ground truth.
///
/// Matching runs per scene; ranking pools every scene. In a size bin the
/// ranked list keeps detections matched to a gt of that bin (true
/// positives) and all unmatched detections (false positives everywhere);
/// detections matched to a gt of another bin drop out of that bin's
/// ranking.
pub fn evaluate(dets: &[Detection], scenes: &[Scene], config: &EvalConfig) -> Result<EvalReport> {
    config.validate()?;
    let mut by_id: HashMap<u64, &Scene> = HashMap::new();
    for s in scenes {
        if by_id.insert(s.id, s).is_some() {
            return Err(Error::InvalidScenario(format!(
                "duplicate scene id {}",
                s.id
            )));
        }
    }
    for d in dets {
        if !by_id.contains_key(&d.scene_id) {
            return Err(Error::UnknownScene(d.scene_id));
        }
        if !d.fused.is_finite() {
            return Err(Error::ScoreOutOfRange {
                name: "fused",
                value: d.fused,
            });
        }
    }

    // Global rank: fused descending, scene id, then input order.
    let mut order: Vec<usize> = (0..dets.len()).collect();
    order.sort_by(|&a, &b| {
        dets[b]
            .fused
            .partial_cmp(&dets[a].fused)
            .unwrap()
            .then(dets[a].scene_id.cmp(&dets[b].scene_id))
            .then(a.cmp(&b))
    });

    // Scene-local views of the global ranking.
    let mut per_scene: HashMap<u64, Vec<usize>> = HashMap::new();
    for &i in &order {
        per_scene.entry(dets[i].scene_id).or_default().push(i);
    }

    let n_gts: usize = scenes.iter().map(|s| s.gts.len()).sum();
    let gt_count_in = |bin: SizeBin| -> usize {
        scenes
            .iter()
            .flat_map(|s| &s.gts)
            .filter(|g| bin_of(g.bbox.area(), config) == bin)
            .count()
    };
    let bin_gts = [
        gt_count_in(SizeBin::Small),
        gt_count_in(SizeBin::Medium),
        gt_count_in(SizeBin::Large),
    ];

    let mut thresholds = Vec::with_capacity(config.iou_thresholds.len());
    for &t in &config.iou_thresholds {
        // det index -> matched gt bin, if matched
        let mut matched_bin: Vec<Option<SizeBin>> = vec![None; dets.len()];
        for (scene_id, local) in &per_scene {
            let scene = by_id[scene_id];
            let boxes: Vec<BBox> = local.iter().map(|&i| dets[i].bbox).collect();
            let classes: Vec<u32> = local.iter().map(|&i| dets[i].class).collect();
            let local_order: Vec<usize> = (0..local.len()).collect();
            let outcome = match_detections(&boxes, &classes, &local_order, &scene.gts, t);
            for (pos, assignment) in outcome.det_to_gt.iter().enumerate() {
                if let Some(g) = assignment {
                    matched_bin[local[pos]] = Some(bin_of(scene.gts[*g].bbox.area(), config));
                }
            }
        }

        let tp_all: Vec<bool> = order.iter().map(|&i| matched_bin[i].is_some()).collect();
        let ap_all = average_precision(&tp_all, n_gts);

        let ap_bin = |bin: SizeBin, n_gt: usize| -> f64 {
            let flags: Vec<bool> = order
                .iter()
                .filter_map(|&i| match matched_bin[i] {
                    Some(b) if b == bin => Some(true),
                    Some(_) => None,
                    None => Some(false),
                })
                .collect();
            average_precision(&flags, n_gt)
        };

        let mut pr_curve = Vec::with_capacity(order.len());
        let mut tp = 0usize;
        for (k, &flag) in tp_all.iter().enumerate() {
            tp += flag as usize;
            let recall = if n_gts == 0 {
                0.0
            } else {
                tp as f64 / n_gts as f64
            };
            pr_curve.push((recall, tp as f64 / (k + 1) as f64));
        }

        thresholds.push(ThresholdReport {
            iou_threshold: t,
            ap: ScaleAp {
                all: ap_all,
                small: ap_bin(SizeBin::Small, bin_gts[0]),
                medium: ap_bin(SizeBin::Medium, bin_gts[1]),
                large: ap_bin(SizeBin::Large, bin_gts[2]),
            },
            pr_curve,
        });
    }

    let n = thresholds.len() as f64;
    let mean = ScaleAp {
        all: thresholds.iter().map(|t| t.ap.all).sum::<f64>() / n,
        small: thresholds.iter().map(|t| t.ap.small).sum::<f64>() / n,
        medium: thresholds.iter().map(|t| t.ap.medium).sum::<f64>() / n,
        large: thresholds.iter().map(|t| t.ap.large).sum::<f64>() / n,
    };
    Ok(EvalReport {
        thresholds,
        mean,
        n_detections: dets.len(),
        n_gts,
    })
}
