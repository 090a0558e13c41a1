//! Heatmap predictors: where the per-point grids come from.
//!
//! Two implementations share one trait. The oracle renders peaks at the
//! matched ground truth's grid points under controllable imperfections
//! (cell noise, truncation behaviour) and is what the simulation pipeline
//! runs on. The toy model is a real learned network over coarse box
//! features; it exists so the loss and gradient plumbing is exercised by
//! something that actually trains, not to localize well.

use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::geometry::{iou, BBox};
use crate::gridcodec::{
    grid_points, image_to_cell, integer_cell, GridLayout, HeatmapSet, N_POINTS,
};
use crate::mlp::{load_model, model_from_json, model_to_json, save_model, Mlp};
use crate::rng::{bits, stream, tag};
use crate::scenario::Scene;

/// Anything that can produce per-point heatmaps for a proposal.
pub trait HeatmapPredictor: Send + Sync {
    fn predict(
        &self,
        scene: &Scene,
        proposal: &BBox,
        ratio: f64,
        layout: &GridLayout,
    ) -> Result<HeatmapSet>;
}

/// Knobs of the oracle predictor.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OracleParams {
    /// Std-dev of Gaussian noise added to the peak position, in cells.
    pub noise_sigma: f64,
    /// What happens to grid points falling outside the represented region:
    /// `true` renders the peak clamped to the nearest border cell, the way
    /// a network trained on truncated supervision behaves; `false` leaves
    /// the channel empty.
    pub truncate: bool,
    /// Per-ring falloff of the rendered peak, in (0, 1).
    pub peak_decay: f64,
    /// Floor value of every cell; must stay below `peak_decay` so the peak
    /// neighbourhood remains distinguishable from the floor.
    pub background_level: f64,
}

impl Default for OracleParams {
    fn default() -> Self {
        Self {
            noise_sigma: 0.0,
            truncate: true,
            peak_decay: 0.5,
            background_level: 0.0,
        }
    }
}

impl OracleParams {
    pub fn validate(&self) -> Result<()> {
        if !self.noise_sigma.is_finite() || self.noise_sigma < 0.0 {
            return Err(Error::InvalidOracleParams(format!(
                "noise_sigma {} must be finite and >= 0",
                self.noise_sigma
            )));
        }
        if !(self.peak_decay > 0.0 && self.peak_decay < 1.0) {
            return Err(Error::InvalidOracleParams(format!(
                "peak_decay {} must lie in (0, 1)",
                self.peak_decay
            )));
        }
        if !(0.0..0.5).contains(&self.background_level) || self.background_level >= self.peak_decay
        {
            return Err(Error::InvalidOracleParams(format!(
                "background_level {} must lie in [0, 0.5) and below peak_decay {}",
                self.background_level, self.peak_decay
            )));
        }
        Ok(())
    }
}

/// Minimum proposal-to-gt IoU for the oracle to consider a proposal as
/// belonging to that object at all.
pub const ORACLE_MATCH_IOU: f64 = 0.3;

/// Renders ideal-but-imperfect heatmaps from ground truth.
#[derive(Debug, Clone)]
pub struct OracleHeatmapPredictor {
    params: OracleParams,
    seed: u64,
}

impl OracleHeatmapPredictor {
    pub fn new(params: OracleParams, seed: u64) -> Result<Self> {
        params.validate()?;
        Ok(Self { params, seed })
    }

    pub fn params(&self) -> &OracleParams {
        &self.params
    }

    /// Best-overlap gt index, ties to the lowest index; None below the
    /// match threshold.
    fn match_gt(&self, scene: &Scene, proposal: &BBox) -> Option<usize> {
        let mut best: Option<(usize, f64)> = None;
        for (i, gt) in scene.gts.iter().enumerate() {
            let v = iou(proposal, &gt.bbox);
            if best.is_none_or(|(_, b)| v > b) {
                best = Some((i, v));
            }
        }
        best.filter(|&(_, v)| v >= ORACLE_MATCH_IOU).map(|(i, _)| i)
    }
}

fn clamp_cell(cc: (f64, f64), resolution: usize) -> (usize, usize) {
    let fold = |c: f64| (c.floor() as i64).clamp(0, resolution as i64 - 1) as usize;
    (fold(cc.0), fold(cc.1))
}

fn render_peak(
    values: &mut [f64],
    resolution: usize,
    peak: (usize, usize),
    decay_pow: &[f64],
    bg: f64,
) {
    for cy in 0..resolution {
        for cx in 0..resolution {
            let d = cx.abs_diff(peak.0).max(cy.abs_diff(peak.1));
            values[cy * resolution + cx] = bg.max(decay_pow[d]);
        }
    }
}

impl HeatmapPredictor for OracleHeatmapPredictor {
    fn predict(
        &self,
        scene: &Scene,
        proposal: &BBox,
        ratio: f64,
        layout: &GridLayout,
    ) -> Result<HeatmapSet> {
        let mut maps = HeatmapSet::new_zeroed(proposal, ratio, layout)?;
        let Some(gt_idx) = self.match_gt(scene, proposal) else {
            // No object: flat background everywhere. With the default
            // zero level the maps are undecodable and the box passes
            // through the refinement stage untouched.
            for ch in maps.channels_mut() {
                ch.values.fill(self.params.background_level);
            }
            return Ok(maps);
        };
        let gt = &scene.gts[gt_idx];
        let resolution = layout.resolution;
        let mut decay_pow = vec![1.0; resolution];
        for d in 1..resolution {
            decay_pow[d] = decay_pow[d - 1] * self.params.peak_decay;
        }
        // One private stream per (seed, scene, box, ratio): predictions
        // never depend on evaluation order or thread count.
        let mut rng = stream(&[
            tag("oracle"),
            self.seed,
            scene.id,
            bits(proposal.x1()),
            bits(proposal.y1()),
            bits(proposal.x2()),
            bits(proposal.y2()),
            bits(ratio),
        ]);
        let points = grid_points(&gt.bbox);
        for (k, point) in points.iter().enumerate() {
            let cc = image_to_cell(*point, proposal, ratio, layout)?;
            // Fixed draw count per point keeps the stream layout stable
            // across truncation settings.
            let nx: f64 = rng.sample(StandardNormal);
            let ny: f64 = rng.sample(StandardNormal);
            let in_region = integer_cell(cc, resolution).is_some();
            let ch = &mut maps.channels_mut()[k];
            ch.out_of_region = !in_region;
            if !in_region && !self.params.truncate {
                // The point is invisible to this region and the oracle is
                // honest about it: nothing to decode.
                continue;
            }
            let noisy = (
                cc.0 + self.params.noise_sigma * nx,
                cc.1 + self.params.noise_sigma * ny,
            );
            let peak = clamp_cell(noisy, resolution);
            render_peak(
                &mut ch.values,
                resolution,
                peak,
                &decay_pow,
                self.params.background_level,
            );
        }
        Ok(maps)
    }
}

// --- learned grid predictor --------------------------------------------------

pub const TOY_MODEL_KIND: &str = "grid";
const TOY_FEATURES: usize = 8;

/// Coarse proposal descriptor the toy net sees. Nothing here encodes gt,
/// so the model can only learn corpus-wide placement priors.
pub fn toy_features(scene: &Scene, proposal: &BBox, ratio: f64) -> [f64; TOY_FEATURES] {
    let (cx, cy) = proposal.center();
    [
        cx / scene.bounds.width,
        cy / scene.bounds.height,
        proposal.width() / scene.bounds.width,
        proposal.height() / scene.bounds.height,
        ratio,
        scene.bounds.width / 1000.0,
        scene.bounds.height / 1000.0,
        1.0,
    ]
}

/// Learned heatmap head: one dense net emitting all point channels at
/// once. Kept deliberately tiny; the parameter count stays under 20k at
/// the default resolution.
#[derive(Debug, Clone, PartialEq)]
pub struct ToyGridModel {
    net: Mlp,
    layout: GridLayout,
}

impl ToyGridModel {
    pub fn new(layout: GridLayout, hidden: usize, seed: u64) -> Result<Self> {
        layout.validate()?;
        let out = N_POINTS * layout.resolution * layout.resolution;
        let net = Mlp::new(&[TOY_FEATURES, hidden, out], seed)?;
        Ok(Self { net, layout })
    }

    pub fn net(&self) -> &Mlp {
        &self.net
    }

    pub fn net_mut(&mut self) -> &mut Mlp {
        &mut self.net
    }

    pub fn layout(&self) -> &GridLayout {
        &self.layout
    }

    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        save_model(path, TOY_MODEL_KIND, &self.net)
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        Self::from_net(load_model(path, TOY_MODEL_KIND)?)
    }

    pub fn to_json(&self) -> Result<String> {
        model_to_json(TOY_MODEL_KIND, &self.net)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Self::from_net(model_from_json(text, TOY_MODEL_KIND)?)
    }

    fn from_net(net: Mlp) -> Result<Self> {
        let out = net.n_outputs();
        if !out.is_multiple_of(N_POINTS) {
            return Err(Error::Config(format!(
                "grid model output size {out} is not a multiple of {N_POINTS}"
            )));
        }
        let cells = out / N_POINTS;
        let resolution = (cells as f64).sqrt().round() as usize;
        if resolution * resolution != cells {
            return Err(Error::Config(format!(
                "grid model channel size {cells} is not square"
            )));
        }
        let layout = GridLayout::new(N_POINTS, resolution)?;
        Ok(Self { net, layout })
    }
}

impl HeatmapPredictor for ToyGridModel {
    fn predict(
        &self,
        scene: &Scene,
        proposal: &BBox,
        ratio: f64,
        layout: &GridLayout,
    ) -> Result<HeatmapSet> {
        if *layout != self.layout {
            return Err(Error::InvalidLayout(format!(
                "grid model was built for resolution {}, asked for {}",
                self.layout.resolution, layout.resolution
            )));
        }
        let out = self.net.forward(&toy_features(scene, proposal, ratio));
        let mut maps = HeatmapSet::new_zeroed(proposal, ratio, layout)?;
        let cells = layout.resolution * layout.resolution;
        for (k, ch) in maps.channels_mut().iter_mut().enumerate() {
            ch.values.copy_from_slice(&out[k * cells..(k + 1) * cells]);
        }
        Ok(maps)
    }
}
