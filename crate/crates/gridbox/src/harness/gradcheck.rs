//! End-to-end gradient checks for every trained loss path.
//!
//! Each check builds a small but real fixture (scene, proposal, oracle
//! maps), computes the analytic gradient exactly the way training does,
//! and compares it against central differences on a spread of
//! coordinates. A deliberate fault injection mode corrupts one analytic
//! coordinate so the harness can prove the checker actually catches
//! broken gradients.

use crate::cascade::{cmm_loss, cmm_stage_logit_grad, CascadeConfig};
use crate::error::Result;
use crate::geometry::{BBox, ImageBounds};
use crate::gridcodec::{encode_target, GridLayout, HeatmapSet};
use crate::mlp::{gradcheck, spread_coords, GradcheckReport, Mlp};
use crate::predictor::{toy_features, HeatmapPredictor, OracleHeatmapPredictor, OracleParams};
use crate::rng::{mix, tag};
use crate::scenario::{GtObject, Scene};
use crate::scoring::{ism_features, ism_loss, new_ism_net, new_rsm_net, rsm_loss};

pub const GRADCHECK_TOLERANCE: f64 = 1e-4;
pub const GRADCHECK_COORDS: usize = 120;
pub const GRADCHECK_STEP: f64 = 1e-5;

#[derive(Debug, Clone)]
pub struct CheckOutcome {
    pub name: &'static str,
    pub report: GradcheckReport,
    pub tolerance: f64,
}

impl CheckOutcome {
    pub fn passed(&self) -> bool {
        self.report.passes(self.tolerance)
    }
}

/// Doubles-and-shifts one analytic coordinate; the shift guards against
/// a zero gradient slipping past the relative-error test.
fn corrupt(analytic: &mut [f64], coord: usize) {
    analytic[coord] = analytic[coord] * 2.0 + 1.0;
}

fn fixture_scene() -> Result<Scene> {
    let bounds = ImageBounds::new(240.0, 200.0)?;
    Scene::new(
        7,
        bounds,
        vec![GtObject::from_full_extent(
            BBox::new(40.0, 50.0, 150.0, 160.0)?,
            1,
            &bounds,
        )?],
    )
}

/// Forward the grid net for one stage and wrap the output as maps on the
/// stage's region, mirroring the model predictor.
fn net_maps(
    net: &Mlp,
    features: &[f64],
    proposal: &BBox,
    ratio: f64,
    layout: &GridLayout,
) -> Result<HeatmapSet> {
    let out = net.forward(features);
    let mut maps = HeatmapSet::new_zeroed(proposal, ratio, layout)?;
    let cells = layout.resolution * layout.resolution;
    for (k, ch) in maps.channels_mut().iter_mut().enumerate() {
        ch.values.copy_from_slice(&out[k * cells..(k + 1) * cells]);
    }
    Ok(maps)
}

fn check_cmm(seed: u64, fault: bool) -> Result<CheckOutcome> {
    let scene = fixture_scene()?;
    let gt = scene.gts[0].bbox;
    let proposal = BBox::new(50.0, 60.0, 140.0, 148.0)?;
    let config = CascadeConfig::default();

    // One target per stage, all supervising the same object from the
    // same box; the differing ratios give each stage distinct inputs.
    let mut features = Vec::new();
    let mut targets = Vec::new();
    for stage in &config.stages {
        features.push(toy_features(&scene, &proposal, stage.ratio));
        targets.push(encode_target(&gt, &proposal, stage.ratio, &config.layout)?);
    }

    let dims = vec![
        8,
        2,
        config.layout.n_points * config.layout.resolution * config.layout.resolution,
    ];
    let net = Mlp::new(&dims, mix(&[tag("gcgrid"), seed]))?;

    let mut analytic = vec![0.0; net.params().len()];
    for (j, stage) in config.stages.iter().enumerate() {
        let pred = net_maps(&net, &features[j], &proposal, stage.ratio, &config.layout)?;
        let dl = cmm_stage_logit_grad(&pred, &targets[j], stage.beta, config.omega);
        let g = net.grad_from_logit(&features[j], &dl);
        for (a, b) in analytic.iter_mut().zip(&g) {
            *a += b;
        }
    }

    let coords = spread_coords(net.params().len(), GRADCHECK_COORDS);
    if fault {
        corrupt(&mut analytic, coords[0]);
    }

    let cfg = config.clone();
    let loss = move |params: &[f64]| -> f64 {
        let net = Mlp::from_params(&dims, params.to_vec()).expect("finite params");
        let preds: Vec<HeatmapSet> = cfg
            .stages
            .iter()
            .enumerate()
            .map(|(j, stage)| {
                net_maps(&net, &features[j], &proposal, stage.ratio, &cfg.layout).unwrap()
            })
            .collect();
        cmm_loss(&preds, &targets, &cfg).unwrap()
    };
    let report = gradcheck(loss, net.params(), &analytic, &coords, GRADCHECK_STEP);
    Ok(CheckOutcome {
        name: "cmm",
        report,
        tolerance: GRADCHECK_TOLERANCE,
    })
}

fn scorer_fixture_features(seed: u64) -> Result<Vec<f64>> {
    let scene = fixture_scene()?;
    let proposal = BBox::new(50.0, 60.0, 140.0, 148.0)?;
    let oracle = OracleHeatmapPredictor::new(
        OracleParams {
            noise_sigma: 0.5,
            ..OracleParams::default()
        },
        mix(&[tag("gcmaps"), seed]),
    )?;
    let maps = oracle.predict(&scene, &proposal, 1.5, &GridLayout::default())?;
    Ok(ism_features(&maps, &scene.bounds))
}

fn check_ism(seed: u64, fault: bool) -> Result<CheckOutcome> {
    let features = scorer_fixture_features(seed)?;
    let net = new_ism_net(mix(&[tag("gcism"), seed]));
    let t = 0.7;

    let out = net.forward(&features);
    let dl = [2.0 * (out[0] - t), 2.0 * (out[1] - (1.0 - t))];
    let mut analytic = net.grad_from_output(&features, &dl);

    let coords = spread_coords(net.params().len(), GRADCHECK_COORDS);
    if fault {
        corrupt(&mut analytic, coords[0]);
    }

    let dims = net.dims().to_vec();
    let loss = move |params: &[f64]| -> f64 {
        let net = Mlp::from_params(&dims, params.to_vec()).expect("finite params");
        let out = net.forward(&features);
        ism_loss(out[0], out[1], t).unwrap()
    };
    let report = gradcheck(loss, net.params(), &analytic, &coords, GRADCHECK_STEP);
    Ok(CheckOutcome {
        name: "ism",
        report,
        tolerance: GRADCHECK_TOLERANCE,
    })
}

fn check_rsm(seed: u64, fault: bool) -> Result<CheckOutcome> {
    let features = scorer_fixture_features(seed)?;
    let net = new_rsm_net(mix(&[tag("gcrsm"), seed]));
    let t = 0.4;

    let out = net.forward(&features)[0];
    let dl = [2.0 * (out - t)];
    let mut analytic = net.grad_from_output(&features, &dl);

    let coords = spread_coords(net.params().len(), GRADCHECK_COORDS);
    if fault {
        corrupt(&mut analytic, coords[0]);
    }

    let dims = net.dims().to_vec();
    let loss = move |params: &[f64]| -> f64 {
        let net = Mlp::from_params(&dims, params.to_vec()).expect("finite params");
        rsm_loss(net.forward(&features)[0], t).unwrap()
    };
    let report = gradcheck(loss, net.params(), &analytic, &coords, GRADCHECK_STEP);
    Ok(CheckOutcome {
        name: "rsm",
        report,
        tolerance: GRADCHECK_TOLERANCE,
    })
}

/// Runs every gradient check. With `inject_fault` the first check's
/// analytic gradient is corrupted at its first probed coordinate, which
/// must surface as a failure naming that coordinate.
pub fn run_gradchecks(seed: u64, inject_fault: bool) -> Result<Vec<CheckOutcome>> {
    Ok(vec![
        check_cmm(seed, inject_fault)?,
        check_ism(seed, false)?,
        check_rsm(seed, false)?,
    ])
}
