//! Detection scoring.
//!
//! Classification confidence is computed on the proposal, before
//! refinement moves the box, so it systematically lags the quality of the
//! final localization. Two auxiliary scores close that gap: an IoU-aware
//! score from the last refinement's heatmaps (ism) and a direct quality
//! score of the refined box (rsm). The fused score blends them with a
//! geometric mean so a detection is only ranked high when classification
//! and localization agree.

use crate::error::{Error, Result};
use crate::geometry::{iou, BBox, ImageBounds};
use crate::gridcodec::HeatmapSet;
use crate::mlp::{sigmoid, Mlp};
use crate::scenario::Scene;

/// The three raw scores of one detection.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct ScoreTriple {
    pub cls: f64,
    pub ism: f64,
    pub rsm: f64,
}

impl ScoreTriple {
    pub fn validate(&self) -> Result<()> {
        for (name, value) in [("cls", self.cls), ("ism", self.ism), ("rsm", self.rsm)] {
            if !value.is_finite() || !(0.0..=1.0).contains(&value) {
                return Err(Error::ScoreOutOfRange { name, value });
            }
        }
        Ok(())
    }
}

/// Scoring knobs: the fusion exponent and the loss weights.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScoringConfig {
    /// Weight of the classification-times-ism factor; the refined-box
    /// quality factor gets the complement.
    pub gamma: f64,
    /// Weight of the ism loss in the total.
    pub alpha1: f64,
    /// Weight of the rsm loss in the total.
    pub alpha2: f64,
    /// Weights of (cls, grid, ism, rsm) losses in [`total_loss`].
    pub lambda: [f64; 4],
}

impl Default for ScoringConfig {
    fn default() -> Self {
        Self {
            gamma: 0.8,
            alpha1: 1.0,
            alpha2: 1.0,
            lambda: [1.0; 4],
        }
    }
}

impl ScoringConfig {
    pub fn validate(&self) -> Result<()> {
        if !self.gamma.is_finite() || !(0.0..=1.0).contains(&self.gamma) {
            return Err(Error::InvalidGamma(self.gamma));
        }
        for (name, v) in [("alpha1", self.alpha1), ("alpha2", self.alpha2)] {
            if !v.is_finite() || v < 0.0 {
                return Err(Error::Config(format!("{name} {v} must be >= 0 and finite")));
            }
        }
        for (i, l) in self.lambda.iter().enumerate() {
            if !l.is_finite() || *l < 0.0 {
                return Err(Error::Config(format!(
                    "lambda[{i}] {l} must be >= 0 and finite"
                )));
            }
        }
        Ok(())
    }
}

/// Geometric blend `(cls * ism)^gamma * rsm^(1 - gamma)`, with the 0^0 = 1
/// convention so a zeroed-out factor drops away entirely at the exponent
/// extremes.
pub fn fused_score(scores: &ScoreTriple, gamma: f64) -> Result<f64> {
    scores.validate()?;
    if !gamma.is_finite() || !(0.0..=1.0).contains(&gamma) {
        return Err(Error::InvalidGamma(gamma));
    }
    let pow = |base: f64, e: f64| if e == 0.0 { 1.0 } else { base.powf(e) };
    Ok(pow(scores.cls * scores.ism, gamma) * pow(scores.rsm, 1.0 - gamma))
}

// --- heatmap features --------------------------------------------------------

/// Feature count of [`ism_features`]: four summary statistics per point
/// channel plus the normalized geometry of the box the maps were
/// predicted from.
pub const ISM_FEATURES: usize = 40;

/// Summarizes one map set for the learned scorers: per channel the peak
/// value, the normalized peak position and the normalized total mass;
/// then the box geometry relative to the image. Peaks use the same
/// first-index tie rule as decoding.
pub fn ism_features(maps: &HeatmapSet, bounds: &ImageBounds) -> Vec<f64> {
    let s = maps.resolution();
    let cells = (s * s) as f64;
    let mut out = Vec::with_capacity(ISM_FEATURES);
    for ch in maps.channels() {
        let mut best = f64::NEG_INFINITY;
        let mut best_idx = 0usize;
        let mut mass = 0.0;
        for (i, &v) in ch.values.iter().enumerate() {
            mass += v;
            if v > best {
                best = v;
                best_idx = i;
            }
        }
        let (cx, cy) = (best_idx % s, best_idx / s);
        out.push(best);
        out.push((cx as f64 + 0.5) / s as f64);
        out.push((cy as f64 + 0.5) / s as f64);
        out.push(mass / cells);
    }
    let b = maps.proposal();
    let (cx, cy) = b.center();
    out.push(cx / bounds.width);
    out.push(cy / bounds.height);
    out.push(b.width() / bounds.width);
    out.push(b.height() / bounds.height);
    debug_assert_eq!(out.len(), ISM_FEATURES);
    out
}

// --- scorers -----------------------------------------------------------------

pub const ISM_MODEL_KIND: &str = "ism";
pub const RSM_MODEL_KIND: &str = "rsm";

/// Layer sizes of the learned ism head: two output channels, object vs
/// background, like a tiny segmentation readout.
pub fn new_ism_net(seed: u64) -> Mlp {
    Mlp::new(&[ISM_FEATURES, 32, 16, 2], seed).expect("static dims")
}

/// Layer sizes of the learned rsm head: a single quality output.
pub fn new_rsm_net(seed: u64) -> Mlp {
    Mlp::new(&[ISM_FEATURES, 16, 1], seed).expect("static dims")
}

fn best_iou_vs<F>(b: &BBox, scene: &Scene, f: F) -> f64
where
    F: Fn(&crate::scenario::GtObject) -> BBox,
{
    scene
        .gts
        .iter()
        .map(|gt| iou(b, &f(gt)))
        .fold(0.0f64, f64::max)
}

/// Scores how object-like the refined box's heatmap evidence is.
#[derive(Debug, Clone)]
pub enum IsmScorer {
    /// Ground-truth overlap of the refined box against the visible gt.
    Oracle,
    /// Ground-truth overlap against the object's full extent. Emulates a
    /// scorer whose notion of "the object" was fit on untruncated
    /// statistics: it under-rates detections of border-truncated objects
    /// even when they cover everything that is visible.
    OracleFullExtent,
    Model(Mlp),
}

impl IsmScorer {
    /// (object, background) channel pair in [0, 1] each.
    pub fn channels(
        &self,
        scene: &Scene,
        final_box: &BBox,
        maps: &HeatmapSet,
    ) -> Result<(f64, f64)> {
        match self {
            IsmScorer::Oracle => {
                let v = best_iou_vs(final_box, scene, |gt| gt.bbox);
                Ok((v, 1.0 - v))
            }
            IsmScorer::OracleFullExtent => {
                let v = best_iou_vs(final_box, scene, |gt| gt.full_extent);
                Ok((v, 1.0 - v))
            }
            IsmScorer::Model(net) => {
                let out = net.forward(&ism_features(maps, &scene.bounds));
                Ok((out[0], out[1]))
            }
        }
    }

    /// Normalized object score: the object channel against both.
    pub fn score(&self, scene: &Scene, final_box: &BBox, maps: &HeatmapSet) -> Result<f64> {
        let (fg, bg) = self.channels(scene, final_box, maps)?;
        let denom = fg + bg;
        if denom <= 0.0 {
            return Ok(0.5);
        }
        Ok(fg / denom)
    }
}

/// Scores the refined box's localization quality directly.
#[derive(Debug, Clone)]
pub enum RsmScorer {
    /// Sharp logistic in the refined box's true best IoU.
    Oracle,
    Model(Mlp),
}

impl RsmScorer {
    pub fn score(&self, scene: &Scene, final_box: &BBox, maps: &HeatmapSet) -> Result<f64> {
        match self {
            RsmScorer::Oracle => {
                let v = best_iou_vs(final_box, scene, |gt| gt.bbox);
                Ok(sigmoid(8.0 * (v - 0.5)))
            }
            RsmScorer::Model(net) => Ok(net.forward(&ism_features(maps, &scene.bounds))[0]),
        }
    }
}

// --- losses ------------------------------------------------------------------

/// Squared-error loss of the two-channel ism output against the true
/// overlap `t`: the object channel should read t, the background channel
/// its complement.
pub fn ism_loss(fg: f64, bg: f64, t: f64) -> Result<f64> {
    for (name, value) in [("fg", fg), ("bg", bg), ("iou", t)] {
        if !value.is_finite() || !(0.0..=1.0).contains(&value) {
            return Err(Error::ScoreOutOfRange {
                name: match name {
                    "fg" => "ism fg",
                    "bg" => "ism bg",
                    _ => "ism target iou",
                },
                value,
            });
        }
    }
    Ok((fg - t) * (fg - t) + (bg - (1.0 - t)) * (bg - (1.0 - t)))
}

/// Squared-error loss of the rsm output against the true overlap.
pub fn rsm_loss(pred: f64, t: f64) -> Result<f64> {
    for (name, value) in [("rsm", pred), ("rsm target iou", t)] {
        if !value.is_finite() || !(0.0..=1.0).contains(&value) {
            return Err(Error::ScoreOutOfRange { name, value });
        }
    }
    Ok((pred - t) * (pred - t))
}

/// Weighted sum of the four loss components: classification, grid, ism
/// scaled by alpha1 and rsm scaled by alpha2. Components must be
/// non-negative and finite.
pub fn total_loss(cls: f64, grid: f64, ism: f64, rsm: f64, config: &ScoringConfig) -> Result<f64> {
    config.validate()?;
    for (name, value) in [
        ("cls loss", cls),
        ("grid loss", grid),
        ("ism loss", ism),
        ("rsm loss", rsm),
    ] {
        if !value.is_finite() || value < 0.0 {
            return Err(Error::InvalidLossComponent { name, value });
        }
    }
    let [l_cls, l_grid, l_ism, l_rsm] = config.lambda;
    Ok(l_cls * cls + l_grid * grid + l_ism * (config.alpha1 * ism) + l_rsm * (config.alpha2 * rsm))
}
