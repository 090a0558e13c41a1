//! Synthetic detection scenes and proposal simulation.
//!
//! Scenes hold ground-truth objects in COCO-like size classes; objects can
//! be truncated by the image border, in which case the stored box is the
//! visible (clipped) part and `full_extent` keeps the whole object. The
//! proposal generator emulates a first-stage detector: jittered copies of
//! every gt plus low-overlap background boxes, with an optional anchor-like
//! size snap. Classification confidence is simulated from the *proposal's*
//! IoU, deliberately ignoring where refinement later moves the box.

use serde::{Deserialize, Serialize};

use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::geometry::{clip, iou, BBox, ImageBounds};
use crate::mlp::sigmoid;
use crate::rng::{bits, stream, tag};

/// COCO-style area bin edges, shared with the evaluator defaults.
pub const AREA_SMALL_MAX: f64 = 1024.0; // 32^2
pub const AREA_LARGE_MIN: f64 = 9216.0; // 96^2

/// Smallest generated object area; keeps IoU numerics well away from
/// degenerate boxes.
const AREA_MIN: f64 = 64.0;
/// Largest generated object area, capped further by the image size.
const AREA_MAX: f64 = 36864.0; // 192^2

const SAMPLING_ATTEMPTS: u32 = 100;

/// One ground-truth object. `bbox` is the visible box (always inside the
/// image); `full_extent` equals `bbox` unless the object is truncated by
/// the border.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GtObject {
    #[serde(rename = "box")]
    pub bbox: BBox,
    pub class: u32,
    pub truncated: bool,
    pub full_extent: BBox,
}

impl GtObject {
    /// Builds the object from its full extent; the visible box and the
    /// truncated flag are derived by clipping.
    pub fn from_full_extent(full_extent: BBox, class: u32, bounds: &ImageBounds) -> Result<Self> {
        let bbox = clip(&full_extent, bounds);
        if bbox.is_degenerate() {
            return Err(Error::InvalidScenario(format!(
                "object {full_extent:?} has no visible area inside {bounds:?}"
            )));
        }
        Ok(Self {
            bbox,
            class,
            truncated: bbox != full_extent,
            full_extent,
        })
    }

    fn validate(&self, bounds: &ImageBounds) -> Result<()> {
        if self.bbox.is_degenerate() {
            return Err(Error::InvalidScenario(format!(
                "gt box {:?} has zero area",
                self.bbox
            )));
        }
        if clip(&self.full_extent, bounds) != self.bbox {
            return Err(Error::InvalidScenario(format!(
                "gt box {:?} is not the clipped full extent {:?}",
                self.bbox, self.full_extent
            )));
        }
        if self.truncated != (self.bbox != self.full_extent) {
            return Err(Error::InvalidScenario(format!(
                "truncated flag {} inconsistent with box {:?} vs full extent {:?}",
                self.truncated, self.bbox, self.full_extent
            )));
        }
        Ok(())
    }
}

/// A synthetic image: bounds plus ground-truth objects.
#[derive(Debug, Clone, PartialEq)]
pub struct Scene {
    pub id: u64,
    pub bounds: ImageBounds,
    pub gts: Vec<GtObject>,
}

impl Scene {
    pub fn new(id: u64, bounds: ImageBounds, gts: Vec<GtObject>) -> Result<Self> {
        for gt in &gts {
            gt.validate(&bounds)?;
        }
        Ok(Self { id, bounds, gts })
    }
}

/// Object size class proportions; weights need not sum to 1.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SizeMix {
    pub small: f64,
    pub medium: f64,
    pub large: f64,
}

impl Default for SizeMix {
    fn default() -> Self {
        Self {
            small: 0.3,
            medium: 0.4,
            large: 0.3,
        }
    }
}

#[derive(Clone, Copy, PartialEq, Eq)]
enum SizeClass {
    Small,
    Medium,
    Large,
}

/// Scene shape: everything needed to sample one scene except its seed.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SceneSpec {
    pub bounds: ImageBounds,
    pub n_objects: usize,
    /// Fraction of objects truncated by the image border; the count is
    /// rounded to the nearest integer.
    pub truncated_fraction: f64,
    pub size_mix: SizeMix,
}

impl SceneSpec {
    fn validate(&self) -> Result<()> {
        ImageBounds::new(self.bounds.width, self.bounds.height)?;
        if !(0.0..=1.0).contains(&self.truncated_fraction) {
            return Err(Error::InvalidScenario(format!(
                "truncated_fraction {} outside [0, 1]",
                self.truncated_fraction
            )));
        }
        let m = &self.size_mix;
        if m.small < 0.0 || m.medium < 0.0 || m.large < 0.0 {
            return Err(Error::InvalidScenario(
                "size_mix weights must be non-negative".into(),
            ));
        }
        if m.small + m.medium + m.large <= 0.0 {
            return Err(Error::InvalidScenario(
                "size_mix weights must not all be zero".into(),
            ));
        }
        Ok(())
    }
}

/// Area range of a class within these bounds, or an error when no object
/// of the class fits.
fn class_area_range(class: SizeClass, bounds: &ImageBounds) -> Result<(f64, f64)> {
    let cap = (0.9 * bounds.width) * (0.9 * bounds.height);
    let (lo, hi, name) = match class {
        SizeClass::Small => (AREA_MIN, AREA_SMALL_MAX, "small"),
        SizeClass::Medium => (AREA_SMALL_MAX, AREA_LARGE_MIN, "medium"),
        SizeClass::Large => (AREA_LARGE_MIN, AREA_MAX.min(cap), "large"),
    };
    if hi <= lo || lo > cap {
        return Err(Error::InvalidScenario(format!(
            "size class {name} does not fit in {}x{} bounds",
            bounds.width, bounds.height
        )));
    }
    Ok((lo, hi))
}

fn pick_class(mix: &SizeMix, u: f64) -> SizeClass {
    let total = mix.small + mix.medium + mix.large;
    let x = u * total;
    if x < mix.small {
        SizeClass::Small
    } else if x < mix.small + mix.medium {
        SizeClass::Medium
    } else {
        SizeClass::Large
    }
}

/// Samples one scene. All randomness comes from `seed`; equal ids, seeds
/// and specs give bitwise-equal scenes.
pub fn generate_scene(id: u64, seed: u64, spec: &SceneSpec) -> Result<Scene> {
    spec.validate()?;
    let bounds = spec.bounds;
    // Fail fast when a requested class can never fit.
    for (class, weight) in [
        (SizeClass::Small, spec.size_mix.small),
        (SizeClass::Medium, spec.size_mix.medium),
        (SizeClass::Large, spec.size_mix.large),
    ] {
        if weight > 0.0 {
            class_area_range(class, &bounds)?;
        }
    }

    let mut rng = stream(&[tag("scene"), seed, id]);
    let n_truncated = ((spec.n_objects as f64) * spec.truncated_fraction).round() as usize;
    let n_truncated = n_truncated.min(spec.n_objects);

    let mut gts = Vec::with_capacity(spec.n_objects);
    for obj_idx in 0..spec.n_objects {
        let class = pick_class(&spec.size_mix, rng.gen::<f64>());
        let (lo, hi) = class_area_range(class, &bounds)?;
        let truncated = obj_idx < n_truncated;

        let mut placed = None;
        for _ in 0..SAMPLING_ATTEMPTS {
            let area = lo + rng.gen::<f64>() * (hi - lo);
            let aspect = (rng.gen::<f64>() * (1.5f64.ln() - (1.0 / 1.5f64).ln())
                + (1.0 / 1.5f64).ln())
            .exp();
            let w = (area * aspect).sqrt();
            let h = (area / aspect).sqrt();
            if w > 0.95 * bounds.width || h > 0.95 * bounds.height {
                continue;
            }
            let full = if truncated {
                // Push a sampled fraction of one dimension past a border.
                let side = rng.gen_range(0..4u32);
                let f = 0.15 + rng.gen::<f64>() * 0.45;
                match side {
                    0 => {
                        let y1 = rng.gen::<f64>() * (bounds.height - h);
                        BBox::new(-f * w, y1, (1.0 - f) * w, y1 + h)
                    }
                    1 => {
                        let y1 = rng.gen::<f64>() * (bounds.height - h);
                        BBox::new(
                            bounds.width - (1.0 - f) * w,
                            y1,
                            bounds.width + f * w,
                            y1 + h,
                        )
                    }
                    2 => {
                        let x1 = rng.gen::<f64>() * (bounds.width - w);
                        BBox::new(x1, -f * h, x1 + w, (1.0 - f) * h)
                    }
                    _ => {
                        let x1 = rng.gen::<f64>() * (bounds.width - w);
                        BBox::new(
                            x1,
                            bounds.height - (1.0 - f) * h,
                            x1 + w,
                            bounds.height + f * h,
                        )
                    }
                }
            } else {
                let x1 = rng.gen::<f64>() * (bounds.width - w);
                let y1 = rng.gen::<f64>() * (bounds.height - h);
                BBox::new(x1, y1, x1 + w, y1 + h)
            }?;
            placed = Some(GtObject::from_full_extent(full, 0, &bounds)?);
            break;
        }
        match placed {
            Some(gt) => gts.push(gt),
            None => {
                return Err(Error::SamplingExhausted {
                    what: "gt object",
                    attempts: SAMPLING_ATTEMPTS,
                    scene_id: id,
                })
            }
        }
    }
    Scene::new(id, bounds, gts)
}

/// Proposal generator knobs.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ProposalParams {
    /// Center and size jitter as a fraction of the gt's own size.
    pub jitter_sigma: f64,
    /// Snap factor for the anchor-scale ladder; 0 or 1 disables snapping.
    pub scale_quantization: f64,
    /// Jittered copies per gt.
    pub per_gt: usize,
    /// Background boxes per scene, each with IoU < 0.3 vs every gt.
    pub n_background: usize,
    pub seed: u64,
}

impl Default for ProposalParams {
    fn default() -> Self {
        Self {
            jitter_sigma: 0.15,
            scale_quantization: 0.0,
            per_gt: 10,
            n_background: 20,
            seed: 0,
        }
    }
}

fn snap_scale(len: f64, q: f64) -> f64 {
    if q > 1.0 && len > 0.0 {
        let k = (len.ln() / q.ln()).round();
        q.powf(k)
    } else {
        len
    }
}

/// Jittered gt copies plus background boxes. Proposals are clipped to the
/// bounds and never degenerate. With zero jitter and snapping off the
/// jittered copies equal the gt boxes bitwise.
pub fn generate_proposals(scene: &Scene, params: &ProposalParams) -> Result<Vec<BBox>> {
    if params.jitter_sigma < 0.0 || !params.jitter_sigma.is_finite() {
        return Err(Error::InvalidScenario(format!(
            "jitter_sigma {} must be finite and >= 0",
            params.jitter_sigma
        )));
    }
    let mut proposals = Vec::with_capacity(scene.gts.len() * params.per_gt + params.n_background);
    for (gt_idx, gt) in scene.gts.iter().enumerate() {
        let mut rng = stream(&[tag("jitter"), params.seed, scene.id, gt_idx as u64]);
        let (w, h) = (gt.bbox.width(), gt.bbox.height());
        for _ in 0..params.per_gt {
            let mut accepted = None;
            for _ in 0..SAMPLING_ATTEMPTS {
                let nx: f64 = rng.sample(StandardNormal);
                let ny: f64 = rng.sample(StandardNormal);
                let nw: f64 = rng.sample(StandardNormal);
                let nh: f64 = rng.sample(StandardNormal);
                let jx = params.jitter_sigma * w * nx;
                let jy = params.jitter_sigma * h * ny;
                let sw = snap_scale(
                    w * (1.0 + params.jitter_sigma * nw).max(0.25),
                    params.scale_quantization,
                );
                let sh = snap_scale(
                    h * (1.0 + params.jitter_sigma * nh).max(0.25),
                    params.scale_quantization,
                );
                // Corner displacement keeps the zero-jitter case bit-exact.
                let gw = (sw - w) / 2.0;
                let gh = (sh - h) / 2.0;
                let raw = BBox::new(
                    gt.bbox.x1() + jx - gw,
                    gt.bbox.y1() + jy - gh,
                    gt.bbox.x2() + jx + gw,
                    gt.bbox.y2() + jy + gh,
                )?;
                let clipped = clip(&raw, &scene.bounds);
                if !clipped.is_degenerate() {
                    accepted = Some(clipped);
                    break;
                }
            }
            match accepted {
                Some(b) => proposals.push(b),
                None => {
                    return Err(Error::SamplingExhausted {
                        what: "jittered proposal",
                        attempts: SAMPLING_ATTEMPTS,
                        scene_id: scene.id,
                    })
                }
            }
        }
    }

    let mut rng = stream(&[tag("bg"), params.seed, scene.id]);
    let max_side = (0.5 * scene.bounds.width.min(scene.bounds.height)).max(9.0);
    for _ in 0..params.n_background {
        let mut accepted = None;
        for _ in 0..SAMPLING_ATTEMPTS {
            let w = 8.0 + rng.gen::<f64>() * (max_side - 8.0);
            let h = 8.0 + rng.gen::<f64>() * (max_side - 8.0);
            let x1 = rng.gen::<f64>() * (scene.bounds.width - w).max(0.0);
            let y1 = rng.gen::<f64>() * (scene.bounds.height - h).max(0.0);
            let b = BBox::new(
                x1,
                y1,
                (x1 + w).min(scene.bounds.width),
                (y1 + h).min(scene.bounds.height),
            )?;
            if scene.gts.iter().all(|gt| iou(&b, &gt.bbox) < 0.3) {
                accepted = Some(b);
                break;
            }
        }
        match accepted {
            Some(b) => proposals.push(b),
            None => {
                return Err(Error::SamplingExhausted {
                    what: "background proposal",
                    attempts: SAMPLING_ATTEMPTS,
                    scene_id: scene.id,
                })
            }
        }
    }
    Ok(proposals)
}

/// Simulated classifier confidence for a proposal: a sharp logistic in the
/// proposal's best gt IoU, blended with seeded uniform noise. This is the
/// hysteresis under study: the score is computed *before* refinement moves
/// the box, so it lags the final localization quality.
pub fn simulate_cls_confidence(
    proposal: &BBox,
    scene: &Scene,
    decorrelation: f64,
    seed: u64,
) -> Result<f64> {
    if !(0.0..=1.0).contains(&decorrelation) {
        return Err(Error::InvalidScenario(format!(
            "decorrelation {decorrelation} outside [0, 1]"
        )));
    }
    let best = scene
        .gts
        .iter()
        .map(|gt| iou(proposal, &gt.bbox))
        .fold(0.0f64, f64::max);
    let base = sigmoid(8.0 * (best - 0.5));
    let mut rng = stream(&[
        tag("clsconf"),
        seed,
        scene.id,
        bits(proposal.x1()),
        bits(proposal.y1()),
        bits(proposal.x2()),
        bits(proposal.y2()),
    ]);
    let u = rng.gen::<f64>();
    Ok((1.0 - decorrelation) * base + decorrelation * u)
}

// --- corpus files ---------------------------------------------------------

const CORPUS_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct SceneDoc {
    id: u64,
    width: f64,
    height: f64,
    gts: Vec<GtObject>,
}

#[derive(Serialize, Deserialize)]
struct CorpusDoc {
    version: u32,
    scenes: Vec<SceneDoc>,
}

/// Serializes scenes to the versioned corpus JSON document.
pub fn scenes_to_json(scenes: &[Scene]) -> Result<String> {
    let doc = CorpusDoc {
        version: CORPUS_VERSION,
        scenes: scenes
            .iter()
            .map(|s| SceneDoc {
                id: s.id,
                width: s.bounds.width,
                height: s.bounds.height,
                gts: s.gts.clone(),
            })
            .collect(),
    };
    Ok(serde_json::to_string_pretty(&doc)?)
}

/// Parses and validates a corpus document, rejecting version mismatches
/// and inconsistent truncation flags.
pub fn scenes_from_json(text: &str) -> Result<Vec<Scene>> {
    let doc: CorpusDoc = serde_json::from_str(text)?;
    if doc.version != CORPUS_VERSION {
        return Err(Error::SchemaVersion {
            what: "scene corpus",
            expected: CORPUS_VERSION,
            found: doc.version,
        });
    }
    doc.scenes
        .into_iter()
        .map(|s| {
            let bounds = ImageBounds::new(s.width, s.height)?;
            Scene::new(s.id, bounds, s.gts)
        })
        .collect()
}

pub fn save_scenes(path: &std::path::Path, scenes: &[Scene]) -> Result<()> {
    std::fs::write(path, scenes_to_json(scenes)?)?;
    Ok(())
}

pub fn load_scenes(path: &std::path::Path) -> Result<Vec<Scene>> {
    scenes_from_json(&std::fs::read_to_string(path)?)
}
