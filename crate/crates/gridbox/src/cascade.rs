//! Cascaded box refinement.
//!
//! Each stage maps the current box to an extended region, asks the
//! predictor for fresh point heatmaps there, decodes them and replaces
//! the box. Regions shrink stage over stage: early stages buy visibility
//! (a wide region keeps the object's points representable even for badly
//! sized proposals), later stages buy precision (finer cells over an
//! already-good box). Boxes whose maps cannot be decoded pass through a
//! stage unchanged and are flagged.

use crate::error::{Error, Result};
use crate::geometry::{clip, iou, BBox, ImageBounds};
use crate::gridcodec::{decode_points, points_to_box, GridLayout, HeatmapSet};
use crate::par::map_ordered;
use crate::predictor::HeatmapPredictor;
use crate::scenario::{GtObject, Scene};

/// One refinement stage.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StageConfig {
    /// Region size relative to the incoming box.
    pub ratio: f64,
    /// Training-side selection threshold: boxes above it count as
    /// positives for this stage.
    pub iou_threshold: f64,
    /// Loss weight of this stage.
    pub beta: f64,
}

/// Full cascade schedule.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CascadeConfig {
    pub stages: Vec<StageConfig>,
    /// Global scale on the grid loss.
    pub omega: f64,
    pub layout: GridLayout,
}

impl Default for CascadeConfig {
    fn default() -> Self {
        let stages = [(2.0, 0.5, 1.0), (1.5, 0.6, 0.5), (1.25, 0.7, 0.25)]
            .into_iter()
            .map(|(ratio, iou_threshold, beta)| StageConfig {
                ratio,
                iou_threshold,
                beta,
            })
            .collect();
        Self {
            stages,
            omega: 1.0,
            layout: GridLayout::default(),
        }
    }
}

impl CascadeConfig {
    pub fn validate(&self) -> Result<()> {
        self.layout.validate()?;
        if self.stages.is_empty() || self.stages.len() > 5 {
            return Err(Error::InvalidCascade(format!(
                "stage count {} outside 1..=5",
                self.stages.len()
            )));
        }
        if !self.omega.is_finite() || self.omega <= 0.0 {
            return Err(Error::InvalidCascade(format!(
                "omega {} must be positive and finite",
                self.omega
            )));
        }
        for (j, s) in self.stages.iter().enumerate() {
            if !s.ratio.is_finite() || s.ratio < 1.0 {
                return Err(Error::InvalidCascade(format!(
                    "stage {j} ratio {} must be finite and >= 1",
                    s.ratio
                )));
            }
            if !(0.0..=1.0).contains(&s.iou_threshold) {
                return Err(Error::InvalidCascade(format!(
                    "stage {j} iou_threshold {} outside [0, 1]",
                    s.iou_threshold
                )));
            }
            if !s.beta.is_finite() || s.beta <= 0.0 {
                return Err(Error::InvalidCascade(format!(
                    "stage {j} beta {} must be positive and finite",
                    s.beta
                )));
            }
            if j > 0 && s.ratio > self.stages[j - 1].ratio {
                return Err(Error::InvalidCascade(format!(
                    "stage {j} ratio {} exceeds previous stage's {}; regions must not grow",
                    s.ratio,
                    self.stages[j - 1].ratio
                )));
            }
        }
        Ok(())
    }
}

/// What one stage did to every box, in input order.
#[derive(Debug, Clone)]
pub struct StageTrace {
    pub ratio: f64,
    pub inputs: Vec<BBox>,
    pub outputs: Vec<BBox>,
    pub maps: Vec<HeatmapSet>,
    pub passed_through: Vec<bool>,
    /// Best overlap of each output against any gt; diagnostic only.
    pub ious: Vec<f64>,
}

/// Cascade outcome for one scene's proposals.
#[derive(Debug, Clone)]
pub struct CascadeResult {
    pub stages: Vec<StageTrace>,
    pub final_boxes: Vec<BBox>,
    /// True for boxes that passed through at least one stage unchanged.
    pub passed_through: Vec<bool>,
}

impl CascadeResult {
    /// Heatmaps of the last stage, aligned with `final_boxes`.
    pub fn final_maps(&self) -> &[HeatmapSet] {
        &self
            .stages
            .last()
            .expect("cascade has at least one stage")
            .maps
    }
}

fn best_iou(b: &BBox, gts: &[GtObject]) -> f64 {
    gts.iter().map(|gt| iou(b, &gt.bbox)).fold(0.0f64, f64::max)
}

/// Boxes counting as positives at a stage threshold.
pub fn select_positives(boxes: &[BBox], gts: &[GtObject], iou_threshold: f64) -> Vec<bool> {
    boxes
        .iter()
        .map(|b| best_iou(b, gts) >= iou_threshold)
        .collect()
}

fn refine_one(
    predictor: &dyn HeatmapPredictor,
    scene: &Scene,
    input: &BBox,
    ratio: f64,
    layout: &GridLayout,
    bounds: &ImageBounds,
) -> (BBox, HeatmapSet, bool) {
    let maps = match predictor.predict(scene, input, ratio, layout) {
        Ok(m) => m,
        Err(_) => {
            // The input box is known non-degenerate, so an empty map set
            // always exists as the pass-through placeholder.
            let empty = HeatmapSet::new_zeroed(input, ratio, layout)
                .expect("placeholder maps for a valid box");
            return (*input, empty, true);
        }
    };
    let refined = points_to_box(&decode_points(&maps))
        .map(|b| clip(&b, bounds))
        .ok()
        .filter(|b| !b.is_degenerate());
    match refined {
        Some(b) => (b, maps, false),
        None => (*input, maps, true),
    }
}

/// Runs one stage over all boxes. Order is preserved and results do not
/// depend on the degree of parallelism.
pub fn run_stage(
    predictor: &dyn HeatmapPredictor,
    scene: &Scene,
    inputs: &[BBox],
    stage: &StageConfig,
    layout: &GridLayout,
) -> StageTrace {
    let refined = map_ordered(inputs, |b| {
        refine_one(predictor, scene, b, stage.ratio, layout, &scene.bounds)
    });
    let mut outputs = Vec::with_capacity(inputs.len());
    let mut maps = Vec::with_capacity(inputs.len());
    let mut passed_through = Vec::with_capacity(inputs.len());
    let mut ious = Vec::with_capacity(inputs.len());
    for (b, m, p) in refined {
        ious.push(best_iou(&b, &scene.gts));
        outputs.push(b);
        maps.push(m);
        passed_through.push(p);
    }
    StageTrace {
        ratio: stage.ratio,
        inputs: inputs.to_vec(),
        outputs,
        maps,
        passed_through,
        ious,
    }
}

/// Runs every stage in sequence, re-predicting heatmaps for each stage's
/// own region.
pub fn run_cascade(
    predictor: &dyn HeatmapPredictor,
    scene: &Scene,
    proposals: &[BBox],
    config: &CascadeConfig,
) -> Result<CascadeResult> {
    config.validate()?;
    if let Some(i) = proposals.iter().position(|b| b.is_degenerate()) {
        return Err(Error::InvalidCascade(format!(
            "proposal {i} has zero area; cascade inputs must be real boxes"
        )));
    }
    let mut current: Vec<BBox> = proposals.to_vec();
    let mut stages = Vec::with_capacity(config.stages.len());
    for stage in &config.stages {
        let trace = run_stage(predictor, scene, &current, stage, &config.layout);
        current = trace.outputs.clone();
        stages.push(trace);
    }
    let n = proposals.len();
    let passed_through = (0..n)
        .map(|i| stages.iter().any(|t| t.passed_through[i]))
        .collect();
    Ok(CascadeResult {
        stages,
        final_boxes: current,
        passed_through,
    })
}

// --- grid loss ---------------------------------------------------------------

/// Multi-stage grid loss for one box: the stage-weighted mean binary
/// cross-entropy over all cells whose target channel is representable.
/// Channels flagged out_of_region in the target are masked out entirely;
/// a stage with nothing representable contributes zero.
///
/// `preds` and `targets` are per-stage map sets for the same box and must
/// agree with the config in count, channel count and resolution; mismatch
/// is a programming error and panics.
pub fn cmm_loss(
    preds: &[HeatmapSet],
    targets: &[HeatmapSet],
    config: &CascadeConfig,
) -> Result<f64> {
    config.validate()?;
    assert_eq!(preds.len(), config.stages.len(), "stage count mismatch");
    assert_eq!(targets.len(), config.stages.len(), "stage count mismatch");
    let mut total = 0.0;
    for ((pred, target), stage) in preds.iter().zip(targets).zip(&config.stages) {
        pred.validate_values()?;
        target.validate_values()?;
        assert_eq!(
            pred.resolution(),
            target.resolution(),
            "resolution mismatch"
        );
        assert_eq!(
            pred.channels().len(),
            target.channels().len(),
            "channel count mismatch"
        );
        let mut sum = 0.0;
        let mut n = 0usize;
        for (pc, tc) in pred.channels().iter().zip(target.channels()) {
            if tc.out_of_region {
                continue;
            }
            for (&p, &t) in pc.values.iter().zip(&tc.values) {
                let p = p.clamp(1e-6, 1.0 - 1e-6);
                sum -= t * p.ln() + (1.0 - t) * (1.0 - p).ln();
                n += 1;
            }
        }
        if n > 0 {
            total += stage.beta * config.omega * sum / n as f64;
        }
    }
    Ok(total)
}

/// Gradient of one stage's contribution to [`cmm_loss`] w.r.t. the
/// pre-sigmoid logits of the predicted maps, flattened channel-major.
/// Masked channels get zero gradient.
pub fn cmm_stage_logit_grad(
    pred: &HeatmapSet,
    target: &HeatmapSet,
    beta: f64,
    omega: f64,
) -> Vec<f64> {
    assert_eq!(
        pred.resolution(),
        target.resolution(),
        "resolution mismatch"
    );
    assert_eq!(
        pred.channels().len(),
        target.channels().len(),
        "channel count mismatch"
    );
    let cells = pred.resolution() * pred.resolution();
    let n: usize = target
        .channels()
        .iter()
        .filter(|c| !c.out_of_region)
        .count()
        * cells;
    let mut grad = vec![0.0; pred.channels().len() * cells];
    if n == 0 {
        return grad;
    }
    for (k, (pc, tc)) in pred.channels().iter().zip(target.channels()).enumerate() {
        if tc.out_of_region {
            continue;
        }
        for i in 0..cells {
            grad[k * cells + i] = beta * omega * (pc.values[i] - tc.values[i]) / n as f64;
        }
    }
    grad
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::ImageBounds;
    use crate::gridcodec::encode_target;
    use crate::mlp::{gradcheck, sigmoid};
    use crate::predictor::{OracleHeatmapPredictor, OracleParams};
    use crate::scenario::GtObject;

    fn scene_with(gt_boxes: &[[f64; 4]]) -> Scene {
        let bounds = ImageBounds::new(400.0, 400.0).unwrap();
        let gts = gt_boxes
            .iter()
            .map(|b| {
                GtObject::from_full_extent(BBox::new(b[0], b[1], b[2], b[3]).unwrap(), 0, &bounds)
                    .unwrap()
            })
            .collect();
        Scene::new(0, bounds, gts).unwrap()
    }

    fn shrunk(b: &BBox, s: f64) -> BBox {
        let (cx, cy) = b.center();
        let hw = b.width() / 2.0 * s;
        let hh = b.height() / 2.0 * s;
        BBox::new(cx - hw, cy - hh, cx + hw, cy + hh).unwrap()
    }

    #[test]
    fn config_validation_catches_bad_schedules() {
        let ok = CascadeConfig::default();
        ok.validate().unwrap();

        let mut c = ok.clone();
        c.stages.clear();
        assert!(c.validate().is_err());

        let mut c = ok.clone();
        c.stages = vec![ok.stages[0]; 6];
        assert!(c.validate().is_err());

        let mut c = ok.clone();
        c.stages[1].ratio = 3.0; // grows after stage 0
        assert!(c.validate().is_err());

        let mut c = ok.clone();
        c.stages[0].ratio = 0.9;
        assert!(c.validate().is_err());

        let mut c = ok.clone();
        c.stages[2].beta = 0.0;
        assert!(c.validate().is_err());

        let mut c = ok.clone();
        c.omega = -1.0;
        assert!(c.validate().is_err());

        let defaults: Vec<(f64, f64, f64)> = ok
            .stages
            .iter()
            .map(|s| (s.ratio, s.iou_threshold, s.beta))
            .collect();
        assert_eq!(
            defaults,
            vec![(2.0, 0.5, 1.0), (1.5, 0.6, 0.5), (1.25, 0.7, 0.25)]
        );
    }

    #[test]
    fn exact_oracle_cascade_converges_to_gt() {
        let scene = scene_with(&[[100.0, 120.0, 180.0, 200.0], [240.0, 40.0, 320.0, 150.0]]);
        let oracle = OracleHeatmapPredictor::new(OracleParams::default(), 1).unwrap();
        let config = CascadeConfig::default();
        let proposals: Vec<BBox> = scene.gts.iter().map(|g| shrunk(&g.bbox, 0.8)).collect();
        let result = run_cascade(&oracle, &scene, &proposals, &config).unwrap();
        assert!(result.passed_through.iter().all(|&p| !p));
        for (out, gt) in result.final_boxes.iter().zip(&scene.gts) {
            // Residual error is the final stage's decode quantization.
            assert!(iou(out, &gt.bbox) > 0.9, "got {}", iou(out, &gt.bbox));
        }
    }

    #[test]
    fn mean_iou_never_degrades_across_stages() {
        let scene = scene_with(&[[100.0, 120.0, 180.0, 200.0], [240.0, 40.0, 320.0, 150.0]]);
        let oracle = OracleHeatmapPredictor::new(OracleParams::default(), 2).unwrap();
        let config = CascadeConfig::default();
        let proposals: Vec<BBox> = scene
            .gts
            .iter()
            .flat_map(|g| [shrunk(&g.bbox, 0.7), shrunk(&g.bbox, 0.9)])
            .collect();
        let result = run_cascade(&oracle, &scene, &proposals, &config).unwrap();
        let mut prev = proposals
            .iter()
            .map(|b| best_iou(b, &scene.gts))
            .sum::<f64>()
            / proposals.len() as f64;
        for trace in &result.stages {
            let mean = trace.ious.iter().sum::<f64>() / trace.ious.len() as f64;
            assert!(mean >= prev - 1e-9, "stage mean {mean} fell below {prev}");
            prev = mean;
        }
    }

    #[test]
    fn wide_first_region_beats_narrow_on_undersized_proposals() {
        let scene = scene_with(&[[100.0, 120.0, 180.0, 200.0]]);
        let oracle = OracleHeatmapPredictor::new(OracleParams::default(), 3).unwrap();
        let proposals = vec![shrunk(&scene.gts[0].bbox, 0.6)];

        let stage = |ratio: f64| StageConfig {
            ratio,
            iou_threshold: 0.5,
            beta: 1.0,
        };
        let wide = CascadeConfig {
            stages: vec![stage(2.0)],
            ..Default::default()
        };
        let narrow = CascadeConfig {
            stages: vec![stage(1.25)],
            ..Default::default()
        };
        let iou_after = |config: &CascadeConfig| {
            let r = run_cascade(&oracle, &scene, &proposals, config).unwrap();
            iou(&r.final_boxes[0], &scene.gts[0].bbox)
        };
        // The 0.6-scale proposal's wide region covers the whole object;
        // the narrow region truncates it and the clamped peaks keep the
        // refined box undersized.
        assert!(iou_after(&wide) > 0.85);
        assert!(iou_after(&narrow) < 0.7);
    }

    #[test]
    fn unmatched_boxes_pass_through_unchanged() {
        let scene = scene_with(&[]);
        let oracle = OracleHeatmapPredictor::new(OracleParams::default(), 4).unwrap();
        let proposals = vec![
            BBox::new(10.0, 10.0, 60.0, 60.0).unwrap(),
            BBox::new(200.0, 200.0, 280.0, 260.0).unwrap(),
        ];
        let result = run_cascade(&oracle, &scene, &proposals, &CascadeConfig::default()).unwrap();
        assert_eq!(result.final_boxes, proposals);
        assert!(result.passed_through.iter().all(|&p| p));
        for trace in &result.stages {
            assert_eq!(trace.inputs, trace.outputs);
        }
    }

    #[test]
    fn cascade_rejects_degenerate_proposals() {
        let scene = scene_with(&[[100.0, 120.0, 180.0, 200.0]]);
        let oracle = OracleHeatmapPredictor::new(OracleParams::default(), 5).unwrap();
        let degenerate = BBox::new(50.0, 50.0, 50.0, 90.0).unwrap();
        assert!(matches!(
            run_cascade(&oracle, &scene, &[degenerate], &CascadeConfig::default()),
            Err(Error::InvalidCascade(_))
        ));
    }

    #[test]
    fn cascade_is_deterministic() {
        let scene = scene_with(&[[100.0, 120.0, 180.0, 200.0], [240.0, 40.0, 320.0, 150.0]]);
        let oracle = OracleHeatmapPredictor::new(
            OracleParams {
                noise_sigma: 1.0,
                ..Default::default()
            },
            6,
        )
        .unwrap();
        let proposals: Vec<BBox> = scene.gts.iter().map(|g| shrunk(&g.bbox, 0.85)).collect();
        let config = CascadeConfig::default();
        let a = run_cascade(&oracle, &scene, &proposals, &config).unwrap();
        let b = run_cascade(&oracle, &scene, &proposals, &config).unwrap();
        assert_eq!(a.final_boxes, b.final_boxes);
        assert_eq!(a.passed_through, b.passed_through);
    }

    #[test]
    fn select_positives_applies_threshold() {
        let scene = scene_with(&[[100.0, 100.0, 200.0, 200.0]]);
        let boxes = vec![
            scene.gts[0].bbox,
            shrunk(&scene.gts[0].bbox, 0.8), // IoU 0.64
            BBox::new(0.0, 0.0, 50.0, 50.0).unwrap(),
        ];
        assert_eq!(
            select_positives(&boxes, &scene.gts, 0.5),
            vec![true, true, false]
        );
        assert_eq!(
            select_positives(&boxes, &scene.gts, 0.7),
            vec![true, false, false]
        );
    }

    fn uniform_maps(proposal: &BBox, ratio: f64, layout: &GridLayout, v: f64) -> HeatmapSet {
        let mut maps = HeatmapSet::new_zeroed(proposal, ratio, layout).unwrap();
        for ch in maps.channels_mut() {
            ch.values.fill(v);
        }
        maps
    }

    #[test]
    fn uniform_half_prediction_hits_closed_form_loss() {
        let layout = GridLayout::new(9, 8).unwrap();
        let config = CascadeConfig {
            layout,
            ..Default::default()
        };
        let gt = BBox::new(12.0, 12.0, 52.0, 52.0).unwrap();
        let mut preds = Vec::new();
        let mut targets = Vec::new();
        for stage in &config.stages {
            preds.push(uniform_maps(&gt, stage.ratio, &layout, 0.5));
            targets.push(encode_target(&gt, &gt, stage.ratio, &layout).unwrap());
        }
        let loss = cmm_loss(&preds, &targets, &config).unwrap();
        // BCE against 0.5 is ln 2 for any binary target, so the loss is
        // omega * sum(beta) * ln 2.
        let expected = 1.75 * std::f64::consts::LN_2;
        assert!((loss - expected).abs() < 1e-12, "loss {loss}");
    }

    #[test]
    fn fully_masked_stage_contributes_zero() {
        let layout = GridLayout::new(9, 8).unwrap();
        let config = CascadeConfig {
            stages: vec![StageConfig {
                ratio: 1.0,
                iou_threshold: 0.5,
                beta: 1.0,
            }],
            omega: 1.0,
            layout,
        };
        let proposal = BBox::new(0.0, 0.0, 10.0, 10.0).unwrap();
        // Target object entirely outside the represented region.
        let gt = BBox::new(200.0, 200.0, 240.0, 240.0).unwrap();
        let target = encode_target(&gt, &proposal, 1.0, &layout).unwrap();
        assert!(target.channels().iter().all(|c| c.out_of_region));
        let pred = uniform_maps(&proposal, 1.0, &layout, 0.9);
        assert_eq!(
            cmm_loss(
                std::slice::from_ref(&pred),
                std::slice::from_ref(&target),
                &config
            )
            .unwrap(),
            0.0
        );
        assert!(cmm_stage_logit_grad(&pred, &target, 1.0, 1.0)
            .iter()
            .all(|&g| g == 0.0));
    }

    #[test]
    #[should_panic(expected = "resolution mismatch")]
    fn mismatched_resolutions_panic() {
        let gt = BBox::new(12.0, 12.0, 52.0, 52.0).unwrap();
        let small = GridLayout::new(9, 8).unwrap();
        let big = GridLayout::new(9, 16).unwrap();
        let config = CascadeConfig {
            stages: vec![StageConfig {
                ratio: 2.0,
                iou_threshold: 0.5,
                beta: 1.0,
            }],
            omega: 1.0,
            layout: small,
        };
        let pred = uniform_maps(&gt, 2.0, &small, 0.5);
        let target = encode_target(&gt, &gt, 2.0, &big).unwrap();
        let _ = cmm_loss(&[pred], &[target], &config);
    }

    #[test]
    fn stage_logit_gradient_matches_central_differences() {
        let layout = GridLayout::new(9, 4).unwrap();
        let gt = BBox::new(10.0, 10.0, 40.0, 40.0).unwrap();
        let proposal = BBox::new(12.0, 8.0, 38.0, 42.0).unwrap();
        let target = encode_target(&gt, &proposal, 1.5, &layout).unwrap();
        let config = CascadeConfig {
            stages: vec![StageConfig {
                ratio: 1.5,
                iou_threshold: 0.5,
                beta: 0.5,
            }],
            omega: 2.0,
            layout,
        };

        let cells = 4 * 4;
        let n_logits = 9 * cells;
        let logits: Vec<f64> = (0..n_logits)
            .map(|i| ((i as f64) * 0.37).sin() * 1.5)
            .collect();
        let loss_of = |l: &[f64]| -> f64 {
            let mut pred = HeatmapSet::new_zeroed(&proposal, 1.5, &layout).unwrap();
            for (k, ch) in pred.channels_mut().iter_mut().enumerate() {
                for i in 0..cells {
                    ch.values[i] = sigmoid(l[k * cells + i]);
                }
            }
            cmm_loss(&[pred], std::slice::from_ref(&target), &config).unwrap()
        };

        let mut pred = HeatmapSet::new_zeroed(&proposal, 1.5, &layout).unwrap();
        for (k, ch) in pred.channels_mut().iter_mut().enumerate() {
            for i in 0..cells {
                ch.values[i] = sigmoid(logits[k * cells + i]);
            }
        }
        let analytic = cmm_stage_logit_grad(&pred, &target, 0.5, 2.0);
        let coords: Vec<usize> = (0..n_logits).step_by(7).collect();
        let report = gradcheck(loss_of, &logits, &analytic, &coords, 1e-5);
        assert!(report.passes(1e-4), "max rel err {}", report.max_rel_err);
    }
}
