//! End-to-end runs of the full pipeline: determinism across reruns and
//! thread pools, corpus file round-trips, the ablation table, and the
//! stage-by-stage refinement record.

use gridbox::harness::{run_ablation, run_experiment, ExperimentConfig};
use gridbox::scenario::save_scenes;

/// Small but non-trivial corpus: enough clutter that every component has
/// work to do, small enough that the whole file stays fast.
fn small_config(seed: u64) -> ExperimentConfig {
    let mut c = ExperimentConfig {
        seed,
        ..ExperimentConfig::default()
    };
    c.corpus.n_scenes = 6;
    c.corpus.n_objects = 5;
    c.corpus.truncated_fraction = 0.2;
    c.proposals.jitter_sigma = 0.2;
    c.predictor.oracle.noise_sigma = 0.3;
    c
}

#[test]
fn reruns_are_identical_in_memory() {
    let config = small_config(41);
    let a = run_experiment(&config).unwrap();
    let b = run_experiment(&config).unwrap();
    assert_eq!(a.config_hash, b.config_hash);
    assert_eq!(a.scenes, b.scenes);
    assert_eq!(a.detections, b.detections);
    assert_eq!(a.report, b.report);
}

/// The rayon feature promises identical bytes regardless of how the work
/// is scheduled; pin the pipeline to a single-thread pool and compare
/// against the default pool.
#[cfg(feature = "rayon")]
#[test]
fn thread_count_does_not_change_output() {
    let config = small_config(42);
    let wide = run_experiment(&config).unwrap();
    let narrow = rayon::ThreadPoolBuilder::new()
        .num_threads(1)
        .build()
        .unwrap()
        .install(|| run_experiment(&config).unwrap());
    assert_eq!(wide.detections, narrow.detections);
    assert_eq!(wide.report, narrow.report);
    assert_eq!(wide.stage_stats, narrow.stage_stats);
}

#[test]
fn seed_changes_output() {
    let a = run_experiment(&small_config(43)).unwrap();
    let b = run_experiment(&small_config(44)).unwrap();
    assert_ne!(a.config_hash, b.config_hash);
    assert_ne!(a.detections, b.detections);
}

/// Saving the generated corpus and re-running against the file must hit
/// the exact same pipeline state as generating it in place.
#[test]
fn corpus_roundtrips_through_file() {
    let config = small_config(45);
    let generated = run_experiment(&config).unwrap();

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("corpus.json");
    save_scenes(&path, &generated.scenes).unwrap();

    let mut from_file = config.clone();
    from_file.corpus.path = Some(path.to_string_lossy().into_owned());
    let loaded = run_experiment(&from_file).unwrap();

    assert_eq!(generated.scenes, loaded.scenes);
    assert_eq!(generated.detections, loaded.detections);
    assert_eq!(generated.report, loaded.report);
}

#[test]
fn ablation_covers_every_toggle_combination() {
    let rows = run_ablation(&small_config(46)).unwrap();
    assert_eq!(rows.len(), 8);

    let mut seen = std::collections::HashSet::new();
    for row in &rows {
        seen.insert((row.toggles.cascade, row.toggles.ism, row.toggles.rsm));
        assert!(
            row.error.is_none(),
            "row {:?} failed: {:?}",
            row.toggles,
            row.error
        );
        for ap in [row.mean_ap, row.ap50, row.ap90] {
            let ap = ap.unwrap();
            assert!((0.0..=1.0).contains(&ap), "ap {ap} out of range");
        }
    }
    assert_eq!(seen.len(), 8, "toggle combinations must be distinct");

    let full = rows[0].clone();
    assert!(full.toggles.cascade && full.toggles.ism && full.toggles.rsm);
    let bare = rows
        .iter()
        .find(|r| !r.toggles.cascade && !r.toggles.ism && !r.toggles.rsm)
        .unwrap();
    assert!(
        full.ap90 >= bare.ap90 && full.mean_ap >= bare.mean_ap,
        "full method {:?} must not lose to all-off {:?}",
        (full.mean_ap, full.ap90),
        (bare.mean_ap, bare.ap90)
    );
}

/// On a jittered corpus the cascade should tighten boxes stage by stage:
/// each stage at least holds the line and the schedule as a whole
/// strictly improves mean IoU.
#[test]
fn stages_refine_monotonically() {
    let output = run_experiment(&small_config(47)).unwrap();
    let stats = &output.stage_stats;
    assert_eq!(stats.len(), 3);
    assert_eq!(
        stats.iter().map(|s| s.ratio).collect::<Vec<_>>(),
        vec![2.0, 1.5, 1.25]
    );
    for s in stats {
        assert!(s.n_boxes > 0);
        assert!(
            s.mean_iou_out >= s.mean_iou_in - 1e-9,
            "stage {} regressed: {} -> {}",
            s.stage,
            s.mean_iou_in,
            s.mean_iou_out
        );
    }
    assert!(
        stats[2].mean_iou_out > stats[0].mean_iou_in,
        "cascade must improve overall: {} -> {}",
        stats[0].mean_iou_in,
        stats[2].mean_iou_out
    );
}
