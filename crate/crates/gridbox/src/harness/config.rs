//! Experiment configuration: one TOML document drives a whole run.
//!
//! Parsing is fail-closed: unknown keys anywhere in the document are
//! rejected rather than silently ignored. Command-line overrides edit the
//! raw TOML value tree before typed deserialization, so they go through
//! exactly the same validation as the file itself. The resolved document
//! (defaults filled in, overrides applied) is what gets hashed and
//! emitted next to the outputs.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::cascade::CascadeConfig;
use crate::error::{Error, Result};
use crate::evaluate::EvalConfig;
use crate::geometry::ImageBounds;
use crate::mlp::load_model;
use crate::predictor::{HeatmapPredictor, OracleHeatmapPredictor, OracleParams, ToyGridModel};
use crate::rng::{mix, tag};
use crate::scenario::{ProposalParams, SceneSpec, SizeMix};
use crate::scoring::{IsmScorer, RsmScorer, ScoringConfig, ISM_MODEL_KIND, RSM_MODEL_KIND};

/// Synthetic corpus shape, or a path to a saved corpus.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CorpusConfig {
    pub n_scenes: usize,
    pub width: f64,
    pub height: f64,
    pub n_objects: usize,
    pub truncated_fraction: f64,
    pub size_mix: SizeMix,
    /// When set, scenes come from this corpus file and the shape fields
    /// above are ignored.
    pub path: Option<String>,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        Self {
            n_scenes: 40,
            width: 640.0,
            height: 640.0,
            n_objects: 6,
            truncated_fraction: 0.0,
            size_mix: SizeMix::default(),
            path: None,
        }
    }
}

impl CorpusConfig {
    pub fn scene_spec(&self) -> Result<SceneSpec> {
        Ok(SceneSpec {
            bounds: ImageBounds::new(self.width, self.height)?,
            n_objects: self.n_objects,
            truncated_fraction: self.truncated_fraction,
            size_mix: self.size_mix,
        })
    }
}

/// Proposal generator knobs; the stream seed is derived from the
/// experiment seed, so it is not configurable here.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ProposalSettings {
    pub jitter_sigma: f64,
    pub scale_quantization: f64,
    pub per_gt: usize,
    pub n_background: usize,
}

impl Default for ProposalSettings {
    fn default() -> Self {
        let d = ProposalParams::default();
        Self {
            jitter_sigma: d.jitter_sigma,
            scale_quantization: d.scale_quantization,
            per_gt: d.per_gt,
            n_background: d.n_background,
        }
    }
}

impl ProposalSettings {
    pub fn with_seed(&self, seed: u64) -> ProposalParams {
        ProposalParams {
            jitter_sigma: self.jitter_sigma,
            scale_quantization: self.scale_quantization,
            per_gt: self.per_gt,
            n_background: self.n_background,
            seed,
        }
    }
}

/// Simulated classification head.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ClsConfig {
    /// Fraction of the confidence that is seeded noise instead of the
    /// proposal's overlap signal.
    pub decorrelation: f64,
}

impl Default for ClsConfig {
    fn default() -> Self {
        Self {
            decorrelation: 0.25,
        }
    }
}

/// Which heatmap predictor drives the cascade.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PredictorConfig {
    /// "oracle" or "model".
    pub kind: String,
    /// Model file for the "model" kind.
    pub model: Option<String>,
    pub oracle: OracleParams,
}

impl Default for PredictorConfig {
    fn default() -> Self {
        Self {
            kind: "oracle".into(),
            model: None,
            oracle: OracleParams::default(),
        }
    }
}

impl PredictorConfig {
    pub fn resolve(&self, seed: u64) -> Result<Box<dyn HeatmapPredictor>> {
        match self.kind.as_str() {
            "oracle" => Ok(Box::new(OracleHeatmapPredictor::new(
                self.oracle,
                mix(&[tag("oracle"), seed]),
            )?)),
            "model" => {
                let path = self.model.as_deref().ok_or(Error::UntrainedModel("grid"))?;
                Ok(Box::new(ToyGridModel::load(std::path::Path::new(path))?))
            }
            other => Err(Error::Config(format!(
                "predictor kind \"{other}\" is not one of: oracle, model"
            ))),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !matches!(self.kind.as_str(), "oracle" | "model") {
            return Err(Error::Config(format!(
                "predictor kind \"{}\" is not one of: oracle, model",
                self.kind
            )));
        }
        self.oracle.validate()
    }
}

/// Which scorers feed the fused score.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScorerConfig {
    /// "oracle", "oracle_full_extent" or "model".
    pub ism: String,
    pub ism_model: Option<String>,
    /// "oracle" or "model".
    pub rsm: String,
    pub rsm_model: Option<String>,
}

impl Default for ScorerConfig {
    fn default() -> Self {
        Self {
            ism: "oracle".into(),
            ism_model: None,
            rsm: "oracle".into(),
            rsm_model: None,
        }
    }
}

impl ScorerConfig {
    pub fn resolve_ism(&self) -> Result<IsmScorer> {
        match self.ism.as_str() {
            "oracle" => Ok(IsmScorer::Oracle),
            "oracle_full_extent" => Ok(IsmScorer::OracleFullExtent),
            "model" => {
                let path = self
                    .ism_model
                    .as_deref()
                    .ok_or(Error::UntrainedModel("ism"))?;
                Ok(IsmScorer::Model(load_model(
                    std::path::Path::new(path),
                    ISM_MODEL_KIND,
                )?))
            }
            other => Err(Error::Config(format!(
                "ism scorer \"{other}\" is not one of: oracle, oracle_full_extent, model"
            ))),
        }
    }

    pub fn resolve_rsm(&self) -> Result<RsmScorer> {
        match self.rsm.as_str() {
            "oracle" => Ok(RsmScorer::Oracle),
            "model" => {
                let path = self
                    .rsm_model
                    .as_deref()
                    .ok_or(Error::UntrainedModel("rsm"))?;
                Ok(RsmScorer::Model(load_model(
                    std::path::Path::new(path),
                    RSM_MODEL_KIND,
                )?))
            }
            other => Err(Error::Config(format!(
                "rsm scorer \"{other}\" is not one of: oracle, model"
            ))),
        }
    }

    pub fn resolve(&self) -> Result<(IsmScorer, RsmScorer)> {
        Ok((self.resolve_ism()?, self.resolve_rsm()?))
    }

    pub fn validate(&self) -> Result<()> {
        if !matches!(self.ism.as_str(), "oracle" | "oracle_full_extent" | "model") {
            return Err(Error::Config(format!(
                "ism scorer \"{}\" is not one of: oracle, oracle_full_extent, model",
                self.ism
            )));
        }
        if !matches!(self.rsm.as_str(), "oracle" | "model") {
            return Err(Error::Config(format!(
                "rsm scorer \"{}\" is not one of: oracle, model",
                self.rsm
            )));
        }
        Ok(())
    }
}

/// Proposal pruning before the cascade and suppression after scoring.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SelectionConfig {
    /// Overlap threshold of the pre-cascade suppression pass, ranked by
    /// classification confidence.
    pub pre_nms_iou: f64,
    /// Survivor cap after that pass.
    pub max_rois: usize,
    /// Overlap threshold of the final per-class suppression, ranked by
    /// fused score.
    pub final_nms_iou: f64,
}

impl Default for SelectionConfig {
    fn default() -> Self {
        Self {
            pre_nms_iou: 0.3,
            max_rois: 96,
            final_nms_iou: 0.5,
        }
    }
}

impl SelectionConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("pre_nms_iou", self.pre_nms_iou),
            ("final_nms_iou", self.final_nms_iou),
        ] {
            if !v.is_finite() || !(0.0..=1.0).contains(&v) {
                return Err(Error::Config(format!("{name} {v} outside [0, 1]")));
            }
        }
        if self.max_rois == 0 {
            return Err(Error::Config("max_rois must be at least 1".into()));
        }
        Ok(())
    }
}

/// The whole experiment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub corpus: CorpusConfig,
    pub proposals: ProposalSettings,
    pub cls: ClsConfig,
    pub predictor: PredictorConfig,
    pub cascade: CascadeConfig,
    pub scoring: ScoringConfig,
    pub scorers: ScorerConfig,
    pub selection: SelectionConfig,
    pub eval: EvalConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seed: 42,
            corpus: CorpusConfig::default(),
            proposals: ProposalSettings::default(),
            cls: ClsConfig::default(),
            predictor: PredictorConfig::default(),
            cascade: CascadeConfig::default(),
            scoring: ScoringConfig::default(),
            scorers: ScorerConfig::default(),
            selection: SelectionConfig::default(),
            eval: EvalConfig::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        self.corpus.scene_spec()?;
        if self.corpus.n_scenes == 0 && self.corpus.path.is_none() {
            return Err(Error::Config("corpus.n_scenes must be at least 1".into()));
        }
        if !(0.0..=1.0).contains(&self.cls.decorrelation) {
            return Err(Error::Config(format!(
                "cls.decorrelation {} outside [0, 1]",
                self.cls.decorrelation
            )));
        }
        self.predictor.validate()?;
        self.cascade.validate()?;
        self.scoring.validate()?;
        self.scorers.validate()?;
        self.selection.validate()?;
        self.eval.validate()?;
        Ok(())
    }

    /// Canonical TOML rendering of the fully resolved config.
    pub fn resolved_toml(&self) -> Result<String> {
        Ok(toml::to_string_pretty(self)?)
    }

    /// Hex digest of the resolved document; stamped into every output so
    /// results can always be traced back to their exact settings.
    pub fn hash(&self) -> Result<String> {
        let mut hasher = Sha256::new();
        hasher.update(self.resolved_toml()?.as_bytes());
        Ok(format!("{:x}", hasher.finalize()))
    }
}

fn parse_override(raw: &str) -> Result<(Vec<String>, toml::Value)> {
    let (path, value) = raw.split_once('=').ok_or_else(|| {
        Error::Config(format!(
            "override \"{raw}\" must look like section.key=value"
        ))
    })?;
    let path: Vec<String> = path
        .trim()
        .split('.')
        .map(|s| s.trim().to_string())
        .collect();
    if path.iter().any(|p| p.is_empty()) {
        return Err(Error::Config(format!(
            "override \"{raw}\" has an empty path segment"
        )));
    }
    // Try the value as literal TOML first, then fall back to a string so
    // bare words like "model" work without quoting.
    let parsed: std::result::Result<toml::Value, _> = format!("v = {}", value.trim()).parse();
    let value = match parsed {
        Ok(toml::Value::Table(t)) => t
            .get("v")
            .cloned()
            .ok_or_else(|| Error::Config(format!("override \"{raw}\" has no parseable value")))?,
        _ => toml::Value::String(value.trim().to_string()),
    };
    Ok((path, value))
}

fn apply_override(root: &mut toml::Value, path: &[String], value: toml::Value) -> Result<()> {
    let mut node = root;
    for key in &path[..path.len() - 1] {
        let table = node.as_table_mut().ok_or_else(|| {
            Error::Config(format!("override path segment \"{key}\" is not a table"))
        })?;
        node = table
            .entry(key.clone())
            .or_insert_with(|| toml::Value::Table(Default::default()));
    }
    let table = node.as_table_mut().ok_or_else(|| {
        Error::Config(format!(
            "override path \"{}\" does not point into a table",
            path.join(".")
        ))
    })?;
    table.insert(path.last().unwrap().clone(), value);
    Ok(())
}

/// Builds the typed config from an optional TOML document plus overrides.
/// `seed` beats both the file and the default when given.
pub fn load_config(
    text: Option<&str>,
    overrides: &[String],
    seed: Option<u64>,
) -> Result<ExperimentConfig> {
    let mut value: toml::Value = match text {
        Some(t) => t.parse()?,
        None => toml::Value::try_from(ExperimentConfig::default())
            .map_err(|e| Error::Config(format!("default config did not serialize: {e}")))?,
    };
    for raw in overrides {
        let (path, v) = parse_override(raw)?;
        apply_override(&mut value, &path, v)?;
    }
    if let Some(s) = seed {
        apply_override(&mut value, &["seed".into()], toml::Value::Integer(s as i64))?;
    }
    let config: ExperimentConfig = value
        .try_into()
        .map_err(|e| Error::Config(format!("config does not match the schema: {e}")))?;
    config.validate()?;
    Ok(config)
}

pub fn load_config_file(
    path: Option<&std::path::Path>,
    overrides: &[String],
    seed: Option<u64>,
) -> Result<ExperimentConfig> {
    match path {
        Some(p) => load_config(Some(&std::fs::read_to_string(p)?), overrides, seed),
        None => load_config(None, overrides, seed),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_config_is_valid_and_stable() {
        let c = load_config(None, &[], None).unwrap();
        c.validate().unwrap();
        assert_eq!(c, ExperimentConfig::default());
        // hash is a pure function of contents
        assert_eq!(
            c.hash().unwrap(),
            ExperimentConfig::default().hash().unwrap()
        );
        assert_eq!(c.hash().unwrap().len(), 64);
    }

    #[test]
    fn unknown_keys_are_rejected_everywhere() {
        assert!(load_config(Some("nonsense = 1"), &[], None).is_err());
        assert!(load_config(Some("[corpus]\nn_scenez = 3"), &[], None).is_err());
        assert!(load_config(Some("[cascade]\nspeed = 9"), &[], None).is_err());
    }

    #[test]
    fn partial_files_fill_in_defaults() {
        let c = load_config(Some("seed = 7\n[corpus]\nn_scenes = 3"), &[], None).unwrap();
        assert_eq!(c.seed, 7);
        assert_eq!(c.corpus.n_scenes, 3);
        assert_eq!(c.corpus.n_objects, CorpusConfig::default().n_objects);
        assert_eq!(c.scoring.gamma, 0.8);
    }

    #[test]
    fn overrides_edit_the_value_tree() {
        let overrides = vec![
            "scoring.gamma=0.9".to_string(),
            "corpus.n_scenes=5".to_string(),
            "scorers.ism=oracle_full_extent".to_string(),
            "predictor.oracle.noise_sigma=0.5".to_string(),
        ];
        let c = load_config(None, &overrides, Some(99)).unwrap();
        assert_eq!(c.scoring.gamma, 0.9);
        assert_eq!(c.corpus.n_scenes, 5);
        assert_eq!(c.scorers.ism, "oracle_full_extent");
        assert_eq!(c.predictor.oracle.noise_sigma, 0.5);
        assert_eq!(c.seed, 99);
    }

    #[test]
    fn overrides_go_through_the_same_validation() {
        assert!(load_config(None, &["scoring.gamma=1.5".into()], None).is_err());
        assert!(load_config(None, &["scoring.typo=1".into()], None).is_err());
        assert!(load_config(None, &["bare".into()], None).is_err());
        assert!(load_config(None, &["cls.decorrelation=-0.5".into()], None).is_err());
    }

    #[test]
    fn hash_tracks_content_changes() {
        let base = load_config(None, &[], None).unwrap();
        let tweaked = load_config(None, &["scoring.gamma=0.7".into()], None).unwrap();
        assert_ne!(base.hash().unwrap(), tweaked.hash().unwrap());
    }

    #[test]
    fn resolved_toml_round_trips() {
        let c = load_config(None, &["corpus.truncated_fraction=0.3".into()], None).unwrap();
        let text = c.resolved_toml().unwrap();
        let back = load_config(Some(&text), &[], None).unwrap();
        assert_eq!(c, back);
    }

    #[test]
    fn scorer_and_predictor_kinds_are_checked() {
        assert!(load_config(None, &["scorers.ism=magic".into()], None).is_err());
        assert!(load_config(None, &["scorers.rsm=oracle_full_extent".into()], None).is_err());
        assert!(load_config(None, &["predictor.kind=nn".into()], None).is_err());

        // model kinds without a path are resolvable errors, not config
        // errors, so harnesses can report them precisely
        let c = load_config(None, &["scorers.ism=model".into()], None).unwrap();
        assert!(matches!(
            c.scorers.resolve(),
            Err(Error::UntrainedModel("ism"))
        ));
        let c = load_config(None, &["predictor.kind=model".into()], None).unwrap();
        assert!(matches!(
            c.predictor.resolve(1),
            Err(Error::UntrainedModel("grid"))
        ));
    }
}
