//! End-to-end experiment: corpus, proposals, refinement, scoring,
//! suppression, evaluation, and the output files.
//!
//! Scenes are processed in parallel but every random draw comes from a
//! stream derived from the experiment seed and stable identifiers, so
//! results are bitwise identical whatever the thread count.

use std::path::Path;

use serde::Serialize;

use crate::cascade::run_cascade;
use crate::error::Result;
use crate::evaluate::{evaluate, nms, nms_detections, Detection, EvalReport};
use crate::geometry::{iou, BBox};
use crate::harness::config::ExperimentConfig;
use crate::par::{map_indices, map_ordered};
use crate::predictor::HeatmapPredictor;
use crate::rng::{mix, tag};
use crate::scenario::{
    generate_proposals, generate_scene, load_scenes, simulate_cls_confidence, Scene,
};
use crate::scoring::{fused_score, IsmScorer, RsmScorer, ScoreTriple};

/// Pipeline pieces an ablation can turn off. With `cascade` off only the
/// first refinement stage runs; with a scorer off its factor is pinned to
/// one, which leaves the fused ranking to the remaining signals.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct Toggles {
    pub cascade: bool,
    pub ism: bool,
    pub rsm: bool,
}

impl Default for Toggles {
    fn default() -> Self {
        Self {
            cascade: true,
            ism: true,
            rsm: true,
        }
    }
}

/// Per-stage aggregate over every processed box.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct StageStat {
    pub stage: usize,
    pub ratio: f64,
    pub n_boxes: usize,
    pub n_passed_through: usize,
    pub mean_iou_in: f64,
    pub mean_iou_out: f64,
}

/// Everything a run produces, kept in memory for callers and tests;
/// [`write_outputs`] serializes the useful parts.
#[derive(Debug)]
pub struct ExperimentOutput {
    pub config: ExperimentConfig,
    pub config_hash: String,
    pub scenes: Vec<Scene>,
    pub detections: Vec<Detection>,
    pub report: EvalReport,
    pub stage_stats: Vec<StageStat>,
    pub n_proposals: usize,
}

/// Scenes for the run: loaded from the corpus file when one is named,
/// generated from the corpus shape otherwise.
pub fn build_corpus(config: &ExperimentConfig) -> Result<Vec<Scene>> {
    if let Some(path) = &config.corpus.path {
        return load_scenes(Path::new(path));
    }
    let spec = config.corpus.scene_spec()?;
    let seed = mix(&[tag("corpus"), config.seed]);
    map_indices(config.corpus.n_scenes, |i| {
        generate_scene(i as u64, seed, &spec)
    })
    .into_iter()
    .collect()
}

struct SceneRun {
    detections: Vec<Detection>,
    stage_in_iou: Vec<f64>,
    stage_out_iou: Vec<f64>,
    stage_passes: Vec<usize>,
    n_boxes: usize,
    n_proposals: usize,
}

fn best_iou(b: &BBox, scene: &Scene) -> f64 {
    scene
        .gts
        .iter()
        .map(|gt| iou(b, &gt.bbox))
        .fold(0.0f64, f64::max)
}

fn process_scene(
    scene: &Scene,
    config: &ExperimentConfig,
    toggles: Toggles,
    predictor: &dyn HeatmapPredictor,
    ism: &IsmScorer,
    rsm: &RsmScorer,
) -> Result<SceneRun> {
    let params = config.proposals.with_seed(mix(&[tag("prop"), config.seed]));
    let proposals = generate_proposals(scene, &params)?;
    let cls_seed = mix(&[tag("cls"), config.seed]);
    let cls: Vec<f64> = proposals
        .iter()
        .map(|p| simulate_cls_confidence(p, scene, config.cls.decorrelation, cls_seed))
        .collect::<Result<_>>()?;

    // First-stage style pruning: suppress by classification confidence,
    // then cap the survivors.
    let mut kept = nms(&proposals, &cls, config.selection.pre_nms_iou);
    kept.truncate(config.selection.max_rois);
    let boxes: Vec<BBox> = kept.iter().map(|&i| proposals[i]).collect();
    let confs: Vec<f64> = kept.iter().map(|&i| cls[i]).collect();

    let mut cascade_cfg = config.cascade.clone();
    if !toggles.cascade {
        cascade_cfg.stages.truncate(1);
    }
    let result = run_cascade(predictor, scene, &boxes, &cascade_cfg)?;

    let maps = result.final_maps();
    let mut dets = Vec::with_capacity(boxes.len());
    for (k, final_box) in result.final_boxes.iter().enumerate() {
        // cls deliberately stays the proposal's confidence: the score was
        // assigned before refinement moved the box.
        let scores = ScoreTriple {
            cls: confs[k],
            ism: if toggles.ism {
                ism.score(scene, final_box, &maps[k])?
            } else {
                1.0
            },
            rsm: if toggles.rsm {
                rsm.score(scene, final_box, &maps[k])?
            } else {
                1.0
            },
        };
        let fused = fused_score(&scores, config.scoring.gamma)?;
        dets.push(Detection {
            bbox: *final_box,
            scores,
            fused,
            class: 0,
            scene_id: scene.id,
        });
    }
    let detections: Vec<Detection> = nms_detections(&dets, config.selection.final_nms_iou)
        .into_iter()
        .map(|i| dets[i].clone())
        .collect();

    let mean = |xs: &[f64]| {
        if xs.is_empty() {
            0.0
        } else {
            xs.iter().sum::<f64>() / xs.len() as f64
        }
    };
    let mut stage_in_iou = Vec::with_capacity(result.stages.len());
    let mut stage_out_iou = Vec::with_capacity(result.stages.len());
    let mut stage_passes = Vec::with_capacity(result.stages.len());
    for trace in &result.stages {
        let ins: Vec<f64> = trace.inputs.iter().map(|b| best_iou(b, scene)).collect();
        stage_in_iou.push(mean(&ins));
        stage_out_iou.push(mean(&trace.ious));
        stage_passes.push(trace.passed_through.iter().filter(|&&p| p).count());
    }
    Ok(SceneRun {
        detections,
        stage_in_iou,
        stage_out_iou,
        stage_passes,
        n_boxes: boxes.len(),
        n_proposals: proposals.len(),
    })
}

/// Full pipeline with every component enabled.
pub fn run_experiment(config: &ExperimentConfig) -> Result<ExperimentOutput> {
    run_with_toggles(config, Toggles::default())
}

/// Full pipeline under explicit ablation toggles.
pub fn run_with_toggles(config: &ExperimentConfig, toggles: Toggles) -> Result<ExperimentOutput> {
    config.validate()?;
    let config_hash = config.hash()?;
    let scenes = build_corpus(config)?;
    let predictor = config.predictor.resolve(config.seed)?;
    // A toggled-off scorer is never invoked, so it need not resolve; this
    // lets ablation rows fail independently when a model file is missing.
    let ism = if toggles.ism {
        config.scorers.resolve_ism()?
    } else {
        IsmScorer::Oracle
    };
    let rsm = if toggles.rsm {
        config.scorers.resolve_rsm()?
    } else {
        RsmScorer::Oracle
    };

    let runs: Vec<Result<SceneRun>> = map_ordered(&scenes, |scene| {
        process_scene(scene, config, toggles, predictor.as_ref(), &ism, &rsm)
    });

    let n_stages = if toggles.cascade {
        config.cascade.stages.len()
    } else {
        1
    };
    let mut detections = Vec::new();
    let mut n_proposals = 0;
    let mut in_sum = vec![0.0; n_stages];
    let mut out_sum = vec![0.0; n_stages];
    let mut passes = vec![0usize; n_stages];
    let mut boxes_total = 0usize;
    let mut n_scenes_done = 0usize;
    for run in runs {
        let run = run?;
        detections.extend(run.detections);
        n_proposals += run.n_proposals;
        boxes_total += run.n_boxes;
        n_scenes_done += 1;
        for j in 0..n_stages {
            in_sum[j] += run.stage_in_iou[j];
            out_sum[j] += run.stage_out_iou[j];
            passes[j] += run.stage_passes[j];
        }
    }

    let stage_stats = (0..n_stages)
        .map(|j| StageStat {
            stage: j,
            ratio: config.cascade.stages[j].ratio,
            n_boxes: boxes_total,
            n_passed_through: passes[j],
            mean_iou_in: in_sum[j] / n_scenes_done.max(1) as f64,
            mean_iou_out: out_sum[j] / n_scenes_done.max(1) as f64,
        })
        .collect();

    let report = evaluate(&detections, &scenes, &config.eval)?;
    Ok(ExperimentOutput {
        config: config.clone(),
        config_hash,
        scenes,
        detections,
        report,
        stage_stats,
        n_proposals,
    })
}

// --- output files --------------------------------------------------------------

#[derive(Serialize)]
struct ThresholdRow<'a> {
    iou_threshold: f64,
    ap: &'a crate::evaluate::ScaleAp,
}

#[derive(Serialize)]
struct MetricsDoc<'a> {
    config_hash: &'a str,
    seed: u64,
    mean: &'a crate::evaluate::ScaleAp,
    thresholds: Vec<ThresholdRow<'a>>,
    n_scenes: usize,
    n_proposals: usize,
    n_detections: usize,
    n_gts: usize,
    stage_stats: &'a [StageStat],
}

fn preamble(output: &ExperimentOutput) -> String {
    format!(
        "# config_hash={}\n# seed={}\n",
        output.config_hash, output.config.seed
    )
}

/// Writes the resolved config and the metric files into `out_dir`. Every
/// CSV starts with the config hash and seed so files stay traceable when
/// copied around.
pub fn write_outputs(out_dir: &Path, output: &ExperimentOutput) -> Result<()> {
    std::fs::create_dir_all(out_dir)?;
    std::fs::write(
        out_dir.join("resolved_config.toml"),
        output.config.resolved_toml()?,
    )?;

    let doc = MetricsDoc {
        config_hash: &output.config_hash,
        seed: output.config.seed,
        mean: &output.report.mean,
        thresholds: output
            .report
            .thresholds
            .iter()
            .map(|t| ThresholdRow {
                iou_threshold: t.iou_threshold,
                ap: &t.ap,
            })
            .collect(),
        n_scenes: output.scenes.len(),
        n_proposals: output.n_proposals,
        n_detections: output.report.n_detections,
        n_gts: output.report.n_gts,
        stage_stats: &output.stage_stats,
    };
    std::fs::write(
        out_dir.join("metrics.json"),
        serde_json::to_string_pretty(&doc)?,
    )?;

    let mut metrics = preamble(output);
    metrics.push_str("iou_threshold,ap,ap_small,ap_medium,ap_large\n");
    for t in &output.report.thresholds {
        metrics.push_str(&format!(
            "{},{},{},{},{}\n",
            t.iou_threshold, t.ap.all, t.ap.small, t.ap.medium, t.ap.large
        ));
    }
    metrics.push_str(&format!(
        "mean,{},{},{},{}\n",
        output.report.mean.all,
        output.report.mean.small,
        output.report.mean.medium,
        output.report.mean.large
    ));
    std::fs::write(out_dir.join("metrics.csv"), metrics)?;

    let mut pr = preamble(output);
    pr.push_str("iou_threshold,rank,recall,precision\n");
    for t in &output.report.thresholds {
        for (rank, (recall, precision)) in t.pr_curve.iter().enumerate() {
            pr.push_str(&format!(
                "{},{},{},{}\n",
                t.iou_threshold,
                rank + 1,
                recall,
                precision
            ));
        }
    }
    std::fs::write(out_dir.join("pr_curves.csv"), pr)?;

    let mut stages = preamble(output);
    stages.push_str("stage,ratio,n_boxes,n_passed_through,mean_iou_in,mean_iou_out\n");
    for s in &output.stage_stats {
        stages.push_str(&format!(
            "{},{},{},{},{},{}\n",
            s.stage, s.ratio, s.n_boxes, s.n_passed_through, s.mean_iou_in, s.mean_iou_out
        ));
    }
    std::fs::write(out_dir.join("stage_trace.csv"), stages)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::harness::config::load_config;

    fn small_config(seed: u64) -> ExperimentConfig {
        let overrides = vec![
            "corpus.n_scenes=4".to_string(),
            "corpus.n_objects=3".to_string(),
            "proposals.per_gt=4".to_string(),
            "proposals.n_background=5".to_string(),
            "selection.max_rois=32".to_string(),
        ];
        load_config(None, &overrides, Some(seed)).unwrap()
    }

    #[test]
    fn pipeline_runs_end_to_end() {
        let output = run_experiment(&small_config(11)).unwrap();
        assert_eq!(output.scenes.len(), 4);
        assert!(!output.detections.is_empty());
        assert!(output.n_proposals >= output.detections.len());
        assert!((0.0..=1.0).contains(&output.report.mean.all));
        assert!(
            output.report.mean.all > 0.0,
            "oracle pipeline should find objects"
        );
        assert_eq!(output.stage_stats.len(), 3);
        // Refinement helps on average, stage over stage.
        for s in &output.stage_stats {
            assert!(
                s.mean_iou_out >= s.mean_iou_in - 1e-9,
                "stage {} regressed: {} -> {}",
                s.stage,
                s.mean_iou_in,
                s.mean_iou_out
            );
        }
    }

    #[test]
    fn pipeline_is_bitwise_deterministic() {
        let a = run_experiment(&small_config(7)).unwrap();
        let b = run_experiment(&small_config(7)).unwrap();
        assert_eq!(a.detections, b.detections);
        assert_eq!(a.report, b.report);
        assert_eq!(a.config_hash, b.config_hash);
        let c = run_experiment(&small_config(8)).unwrap();
        assert_ne!(a.detections, c.detections);
    }

    #[test]
    fn toggles_pin_scores_and_shorten_cascade() {
        let config = small_config(5);
        let no_scores = run_with_toggles(
            &config,
            Toggles {
                cascade: true,
                ism: false,
                rsm: false,
            },
        )
        .unwrap();
        for d in &no_scores.detections {
            assert_eq!(d.scores.ism, 1.0);
            assert_eq!(d.scores.rsm, 1.0);
        }
        let single = run_with_toggles(
            &config,
            Toggles {
                cascade: false,
                ism: true,
                rsm: true,
            },
        )
        .unwrap();
        assert_eq!(single.stage_stats.len(), 1);
    }

    #[test]
    fn outputs_land_on_disk_with_preamble() {
        let output = run_experiment(&small_config(3)).unwrap();
        let dir = tempfile::tempdir().unwrap();
        write_outputs(dir.path(), &output).unwrap();
        for name in [
            "resolved_config.toml",
            "metrics.json",
            "metrics.csv",
            "pr_curves.csv",
            "stage_trace.csv",
        ] {
            assert!(dir.path().join(name).exists(), "{name} missing");
        }
        let metrics = std::fs::read_to_string(dir.path().join("metrics.csv")).unwrap();
        assert!(metrics.starts_with(&format!("# config_hash={}\n", output.config_hash)));
        assert!(metrics.contains("# seed=3\n"));
        let json = std::fs::read_to_string(dir.path().join("metrics.json")).unwrap();
        assert!(json.contains(&output.config_hash));
    }

    #[test]
    fn saved_corpus_reproduces_generated_run() {
        let config = small_config(13);
        let direct = run_experiment(&config).unwrap();

        let dir = tempfile::tempdir().unwrap();
        let corpus_path = dir.path().join("corpus.json");
        crate::scenario::save_scenes(&corpus_path, &direct.scenes).unwrap();
        let mut from_file = config.clone();
        from_file.corpus.path = Some(corpus_path.to_string_lossy().into_owned());
        let replay = run_experiment(&from_file).unwrap();
        assert_eq!(direct.detections, replay.detections);
    }
}
