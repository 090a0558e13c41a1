//! Trains the learned heads on oracle-generated supervision.
//!
//! The oracle pipeline supplies trajectories: refined boxes with their
//! heatmaps and true overlaps. The grid head learns to paint point maps
//! from coarse box features; the two scorer heads learn overlap from map
//! summaries. Everything is full-batch Adam on tiny nets; the point is
//! exercising the losses and gradients end to end, not raw accuracy.

use std::path::Path;

use crate::cascade::{run_cascade, select_positives};
use crate::error::Result;
use crate::geometry::iou;
use crate::gridcodec::encode_target;
use crate::harness::config::ExperimentConfig;
use crate::harness::experiment::build_corpus;
use crate::predictor::{toy_features, OracleHeatmapPredictor, ToyGridModel, TOY_MODEL_KIND};
use crate::rng::{mix, tag};
use crate::scenario::generate_proposals;
use crate::scoring::{
    ism_features, ism_loss, new_ism_net, new_rsm_net, rsm_loss, ISM_MODEL_KIND, RSM_MODEL_KIND,
};

/// Training knobs, separate from the experiment config so training can
/// use its own corpus size and budget.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainSettings {
    pub n_scenes: usize,
    pub grid_steps: usize,
    pub scorer_steps: usize,
    pub lr: f64,
    /// Hidden width of the grid head.
    pub hidden: usize,
    /// Every n-th sample is held out for the success metrics.
    pub holdout_every: usize,
    pub seed: u64,
}

impl Default for TrainSettings {
    fn default() -> Self {
        Self {
            n_scenes: 16,
            grid_steps: 200,
            scorer_steps: 600,
            lr: 0.02,
            hidden: 1,
            holdout_every: 5,
            seed: 7,
        }
    }
}

#[derive(Debug, Clone, Copy, serde::Serialize)]
pub struct TrainSummary {
    pub n_grid_samples: usize,
    pub n_scorer_samples: usize,
    pub grid_initial_loss: f64,
    pub grid_final_loss: f64,
    pub ism_holdout_mae: f64,
    pub rsm_holdout_auc: f64,
}

struct Adam {
    lr: f64,
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl Adam {
    fn new(n: usize, lr: f64) -> Self {
        Self {
            lr,
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
        }
    }

    fn step(&mut self, params: &mut [f64], grads: &[f64]) {
        const B1: f64 = 0.9;
        const B2: f64 = 0.999;
        const EPS: f64 = 1e-8;
        self.t += 1;
        let c1 = 1.0 - B1.powi(self.t);
        let c2 = 1.0 - B2.powi(self.t);
        for i in 0..params.len() {
            self.m[i] = B1 * self.m[i] + (1.0 - B1) * grads[i];
            self.v[i] = B2 * self.v[i] + (1.0 - B2) * grads[i] * grads[i];
            params[i] -= self.lr * (self.m[i] / c1) / ((self.v[i] / c2).sqrt() + EPS);
        }
    }
}

/// One grid-head training sample: stage features against the flattened
/// target maps, with out-of-region channels masked.
struct GridSample {
    features: [f64; 8],
    target: Vec<f64>,
    mask: Vec<bool>,
    beta: f64,
}

struct ScorerSample {
    features: Vec<f64>,
    t: f64,
}

fn gather_samples(
    config: &ExperimentConfig,
    settings: &TrainSettings,
) -> Result<(Vec<GridSample>, Vec<ScorerSample>)> {
    let mut corpus_config = config.clone();
    corpus_config.corpus.n_scenes = settings.n_scenes;
    corpus_config.corpus.path = None;
    corpus_config.seed = mix(&[tag("traincrp"), settings.seed]);
    let scenes = build_corpus(&corpus_config)?;

    let oracle = OracleHeatmapPredictor::new(
        config.predictor.oracle,
        mix(&[tag("trainorc"), settings.seed]),
    )?;
    let layout = config.cascade.layout;
    let cells = layout.resolution * layout.resolution;

    let mut grid = Vec::new();
    let mut scorer = Vec::new();
    for scene in &scenes {
        let params = config
            .proposals
            .with_seed(mix(&[tag("trainprp"), settings.seed]));
        let proposals = generate_proposals(scene, &params)?;
        let result = run_cascade(&oracle, scene, &proposals, &config.cascade)?;

        for (j, trace) in result.stages.iter().enumerate() {
            let stage = &config.cascade.stages[j];
            let positives = select_positives(&trace.inputs, &scene.gts, stage.iou_threshold);
            for (i, b) in trace.inputs.iter().enumerate() {
                if !positives[i] {
                    continue;
                }
                // Supervision comes from the box's best-overlap object,
                // the same object the oracle peaks on (ties keep the
                // lowest index).
                let mut best = 0usize;
                let mut best_v = -1.0;
                for (gi, gt) in scene.gts.iter().enumerate() {
                    let v = iou(b, &gt.bbox);
                    if v > best_v {
                        best_v = v;
                        best = gi;
                    }
                }
                let gt = &scene.gts[best];
                let target = encode_target(&gt.bbox, b, stage.ratio, &layout)?;
                let mut values = Vec::with_capacity(9 * cells);
                let mut mask = Vec::with_capacity(9);
                for ch in target.channels() {
                    values.extend_from_slice(&ch.values);
                    mask.push(!ch.out_of_region);
                }
                grid.push(GridSample {
                    features: toy_features(scene, b, stage.ratio),
                    target: values,
                    mask,
                    beta: stage.beta,
                });
            }
        }

        let maps = result.final_maps();
        for (k, final_box) in result.final_boxes.iter().enumerate() {
            let t = scene
                .gts
                .iter()
                .map(|gt| iou(final_box, &gt.bbox))
                .fold(0.0f64, f64::max);
            scorer.push(ScorerSample {
                features: ism_features(&maps[k], &scene.bounds),
                t,
            });
        }
    }
    Ok((grid, scorer))
}

fn grid_loss_and_grad(model: &ToyGridModel, samples: &[GridSample], omega: f64) -> (f64, Vec<f64>) {
    let cells = model.layout().resolution * model.layout().resolution;
    let mut loss = 0.0;
    let mut grads = vec![0.0; model.net().params().len()];
    for s in samples {
        let pred = model.net().forward(&s.features);
        let n_open: usize = s.mask.iter().filter(|&&m| m).count() * cells;
        if n_open == 0 {
            continue;
        }
        let mut dl_dlogit = vec![0.0; pred.len()];
        for k in 0..9 {
            if !s.mask[k] {
                continue;
            }
            for i in 0..cells {
                let p = pred[k * cells + i];
                let t = s.target[k * cells + i];
                let pc = p.clamp(1e-6, 1.0 - 1e-6);
                loss -= s.beta * omega * (t * pc.ln() + (1.0 - t) * (1.0 - pc).ln())
                    / (n_open * samples.len()) as f64;
                dl_dlogit[k * cells + i] =
                    s.beta * omega * (p - t) / (n_open * samples.len()) as f64;
            }
        }
        let g = model.net().grad_from_logit(&s.features, &dl_dlogit);
        for (a, b) in grads.iter_mut().zip(&g) {
            *a += b;
        }
    }
    (loss, grads)
}

fn write_curve(path: &Path, header: &str, curve: &[f64]) -> Result<()> {
    let mut text = format!("step,{header}\n");
    for (i, v) in curve.iter().enumerate() {
        text.push_str(&format!("{},{}\n", i, v));
    }
    std::fs::write(path, text)?;
    Ok(())
}

/// Area under the ROC curve by pair counting; ties count half.
pub fn auc(scores: &[f64], labels: &[bool]) -> f64 {
    let pos: Vec<f64> = scores
        .iter()
        .zip(labels)
        .filter(|(_, &l)| l)
        .map(|(s, _)| *s)
        .collect();
    let neg: Vec<f64> = scores
        .iter()
        .zip(labels)
        .filter(|(_, &l)| !l)
        .map(|(s, _)| *s)
        .collect();
    if pos.is_empty() || neg.is_empty() {
        return 0.5;
    }
    let mut won = 0.0;
    for p in &pos {
        for n in &neg {
            if p > n {
                won += 1.0;
            } else if p == n {
                won += 0.5;
            }
        }
    }
    won / (pos.len() * neg.len()) as f64
}

/// Trains all three heads and writes model files plus loss curves into
/// `out_dir`. Returns the held-out quality metrics.
pub fn train_all(
    config: &ExperimentConfig,
    settings: &TrainSettings,
    out_dir: &Path,
) -> Result<TrainSummary> {
    config.validate()?;
    std::fs::create_dir_all(out_dir)?;
    let (grid_samples, scorer_samples) = gather_samples(config, settings)?;

    // grid head
    let mut model = ToyGridModel::new(
        config.cascade.layout,
        settings.hidden,
        mix(&[tag("gridinit"), settings.seed]),
    )?;
    let mut adam = Adam::new(model.net().params().len(), settings.lr);
    let mut grid_curve = Vec::with_capacity(settings.grid_steps + 1);
    let (initial, _) = grid_loss_and_grad(&model, &grid_samples, config.cascade.omega);
    grid_curve.push(initial);
    for _ in 0..settings.grid_steps {
        let (loss, grads) = grid_loss_and_grad(&model, &grid_samples, config.cascade.omega);
        adam.step(model.net_mut().params_mut(), &grads);
        grid_curve.push(loss);
    }
    let (grid_final, _) = grid_loss_and_grad(&model, &grid_samples, config.cascade.omega);
    model.save(&out_dir.join(format!("{TOY_MODEL_KIND}.json")))?;
    write_curve(&out_dir.join("grid_loss.csv"), "loss", &grid_curve)?;

    // scorer heads share the sample split
    let is_holdout = |i: usize| i.is_multiple_of(settings.holdout_every);
    let train_idx: Vec<usize> = (0..scorer_samples.len())
        .filter(|&i| !is_holdout(i))
        .collect();
    let hold_idx: Vec<usize> = (0..scorer_samples.len())
        .filter(|&i| is_holdout(i))
        .collect();

    let mut ism = new_ism_net(mix(&[tag("isminit"), settings.seed]));
    let mut adam = Adam::new(ism.params().len(), settings.lr);
    let mut ism_curve = Vec::with_capacity(settings.scorer_steps);
    for _ in 0..settings.scorer_steps {
        let mut grads = vec![0.0; ism.params().len()];
        let mut loss = 0.0;
        for &i in &train_idx {
            let s = &scorer_samples[i];
            let out = ism.forward(&s.features);
            loss += ism_loss(out[0], out[1], s.t)? / train_idx.len() as f64;
            let dl = [
                2.0 * (out[0] - s.t) / train_idx.len() as f64,
                2.0 * (out[1] - (1.0 - s.t)) / train_idx.len() as f64,
            ];
            let g = ism.grad_from_output(&s.features, &dl);
            for (a, b) in grads.iter_mut().zip(&g) {
                *a += b;
            }
        }
        adam.step(ism.params_mut(), &grads);
        ism_curve.push(loss);
    }
    crate::mlp::save_model(
        &out_dir.join(format!("{ISM_MODEL_KIND}.json")),
        ISM_MODEL_KIND,
        &ism,
    )?;
    write_curve(&out_dir.join("ism_loss.csv"), "loss", &ism_curve)?;

    let mut rsm = new_rsm_net(mix(&[tag("rsminit"), settings.seed]));
    let mut adam = Adam::new(rsm.params().len(), settings.lr);
    let mut rsm_curve = Vec::with_capacity(settings.scorer_steps);
    for _ in 0..settings.scorer_steps {
        let mut grads = vec![0.0; rsm.params().len()];
        let mut loss = 0.0;
        for &i in &train_idx {
            let s = &scorer_samples[i];
            let out = rsm.forward(&s.features)[0];
            loss += rsm_loss(out, s.t)? / train_idx.len() as f64;
            let dl = [2.0 * (out - s.t) / train_idx.len() as f64];
            let g = rsm.grad_from_output(&s.features, &dl);
            for (a, b) in grads.iter_mut().zip(&g) {
                *a += b;
            }
        }
        adam.step(rsm.params_mut(), &grads);
        rsm_curve.push(loss);
    }
    crate::mlp::save_model(
        &out_dir.join(format!("{RSM_MODEL_KIND}.json")),
        RSM_MODEL_KIND,
        &rsm,
    )?;
    write_curve(&out_dir.join("rsm_loss.csv"), "loss", &rsm_curve)?;

    // held-out metrics
    let mut mae = 0.0;
    for &i in &hold_idx {
        let s = &scorer_samples[i];
        mae += (ism.forward(&s.features)[0] - s.t).abs() / hold_idx.len().max(1) as f64;
    }
    let hold_scores: Vec<f64> = hold_idx
        .iter()
        .map(|&i| rsm.forward(&scorer_samples[i].features)[0])
        .collect();
    let hold_labels: Vec<bool> = hold_idx
        .iter()
        .map(|&i| scorer_samples[i].t >= 0.5)
        .collect();
    let rsm_auc = auc(&hold_scores, &hold_labels);

    Ok(TrainSummary {
        n_grid_samples: grid_samples.len(),
        n_scorer_samples: scorer_samples.len(),
        grid_initial_loss: initial,
        grid_final_loss: grid_final,
        ism_holdout_mae: mae,
        rsm_holdout_auc: rsm_auc,
    })
}

impl TrainSummary {
    /// Loose sanity bound used by the smoke test; the strict bounds live
    /// in the integration suite where budgets are bigger.
    pub fn rsm_auc_is_reasonable(&self) -> bool {
        self.rsm_holdout_auc > 0.6
    }
}
