//! Command line driver: run experiments, sweep ablations, train the
//! learned heads, verify gradients, and bake corpora to disk.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand};

use gridbox::harness::config::{load_config_file, ExperimentConfig};
use gridbox::harness::experiment::{run_experiment, write_outputs};
use gridbox::harness::gradcheck::run_gradchecks;
use gridbox::harness::train::{train_all, TrainSettings};
use gridbox::harness::{run_ablation, write_ablation_csv};
use gridbox::scenario::save_scenes;

#[derive(Parser)]
#[command(name = "gridbox", version, about = "Box refinement simulator")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

/// Config options shared by every experiment-shaped subcommand.
#[derive(Args)]
struct ConfigArgs {
    /// Experiment config file (TOML); defaults apply when omitted
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override one config key, e.g. --override scoring.gamma=0.7
    #[arg(long = "override", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Replace the config's seed
    #[arg(long)]
    seed: Option<u64>,
}

impl ConfigArgs {
    fn load(&self) -> anyhow::Result<ExperimentConfig> {
        let config = load_config_file(self.config.as_deref(), &self.overrides, self.seed)
            .with_context(|| match &self.config {
                Some(path) => format!("loading config {}", path.display()),
                None => "loading default config".to_string(),
            })?;
        Ok(config)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Run the full pipeline and write metrics under --out
    Run {
        #[command(flatten)]
        config: ConfigArgs,
        /// Output directory
        #[arg(long, default_value = "out/run")]
        out: PathBuf,
    },
    /// Toggle cascade/ism/rsm over all eight combinations
    Ablate {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long, default_value = "out/ablation")]
        out: PathBuf,
    },
    /// Train the grid, ism and rsm heads on oracle supervision
    Train {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long, default_value = "out/models")]
        out: PathBuf,
        /// Training corpus size
        #[arg(long)]
        scenes: Option<usize>,
        #[arg(long)]
        grid_steps: Option<usize>,
        #[arg(long)]
        scorer_steps: Option<usize>,
        /// Seed for the training corpus and initializations
        #[arg(long, default_value_t = 7)]
        train_seed: u64,
    },
    /// Compare analytic gradients against central differences
    Gradcheck {
        #[arg(long, default_value_t = 11)]
        seed: u64,
        /// Corrupt one analytic coordinate to prove the check catches it
        #[arg(long)]
        inject_fault: bool,
    },
    /// Generate a scene corpus and save it as JSON
    GenCorpus {
        #[command(flatten)]
        config: ConfigArgs,
        /// Corpus file to write
        #[arg(long, default_value = "out/corpus.json")]
        out: PathBuf,
    },
}

fn cmd_run(config: &ExperimentConfig, out: &Path) -> anyhow::Result<()> {
    let output = run_experiment(config)?;
    write_outputs(out, &output)?;
    println!("config_hash {}", output.config_hash);
    println!("seed        {}", config.seed);
    println!(
        "scenes {}  proposals {}  detections {}  gts {}",
        output.scenes.len(),
        output.n_proposals,
        output.report.n_detections,
        output.report.n_gts
    );
    for stat in &output.stage_stats {
        println!(
            "stage {} ratio {:.2}: iou {:.4} -> {:.4} ({} boxes, {} passed through)",
            stat.stage,
            stat.ratio,
            stat.mean_iou_in,
            stat.mean_iou_out,
            stat.n_boxes,
            stat.n_passed_through
        );
    }
    for t in &output.report.thresholds {
        println!(
            "ap@{:.2} {:.4} (small {:.4} medium {:.4} large {:.4})",
            t.iou_threshold, t.ap.all, t.ap.small, t.ap.medium, t.ap.large
        );
    }
    println!("mean ap {:.4}", output.report.mean.all);
    println!("wrote {}", out.display());
    Ok(())
}

fn cmd_ablate(config: &ExperimentConfig, out: &PathBuf) -> anyhow::Result<()> {
    let rows = run_ablation(config)?;
    std::fs::create_dir_all(out)?;
    let path = out.join("ablation.csv");
    write_ablation_csv(&path, config, &rows)?;
    let fmt = |v: Option<f64>| v.map(|x| format!("{x:.4}")).unwrap_or_else(|| "-".into());
    println!("cascade ism   rsm    mean_ap  ap50     ap90");
    let mut failed = false;
    for r in &rows {
        println!(
            "{:<7} {:<5} {:<5}  {:7}  {:7}  {:7}{}",
            r.toggles.cascade,
            r.toggles.ism,
            r.toggles.rsm,
            fmt(r.mean_ap),
            fmt(r.ap50),
            fmt(r.ap90),
            r.error
                .as_deref()
                .map(|e| format!("  error: {e}"))
                .unwrap_or_default()
        );
        failed |= r.error.is_some();
    }
    println!("wrote {}", path.display());
    if failed {
        bail!("one or more ablation rows failed");
    }
    Ok(())
}

fn cmd_train(config: &ExperimentConfig, out: &Path, settings: TrainSettings) -> anyhow::Result<()> {
    let summary = train_all(config, &settings, out)?;
    println!(
        "grid: {} samples, loss {:.4} -> {:.4}",
        summary.n_grid_samples, summary.grid_initial_loss, summary.grid_final_loss
    );
    println!(
        "scorers: {} samples, ism holdout mae {:.4}, rsm holdout auc {:.4}",
        summary.n_scorer_samples, summary.ism_holdout_mae, summary.rsm_holdout_auc
    );
    println!("wrote {}", out.display());
    if summary.grid_final_loss >= summary.grid_initial_loss {
        bail!("grid training failed to reduce the loss");
    }
    Ok(())
}

fn cmd_gradcheck(seed: u64, inject_fault: bool) -> anyhow::Result<()> {
    let outcomes = run_gradchecks(seed, inject_fault)?;
    let mut first_failure = None;
    for o in &outcomes {
        println!(
            "{:4} max rel err {:.3e} over {} coords (tolerance {:.0e}) ... {}",
            o.name,
            o.report.max_rel_err,
            o.report.n_checked,
            o.tolerance,
            if o.passed() { "ok" } else { "FAILED" }
        );
        if !o.passed() && first_failure.is_none() {
            first_failure = Some(o.report.to_result(o.tolerance).unwrap_err());
        }
    }
    if let Some(err) = first_failure {
        bail!("{err}");
    }
    Ok(())
}

fn cmd_gen_corpus(config: &ExperimentConfig, out: &Path) -> anyhow::Result<()> {
    let scenes = gridbox::harness::experiment::build_corpus(config)?;
    if let Some(dir) = out.parent() {
        std::fs::create_dir_all(dir)?;
    }
    save_scenes(out, &scenes)?;
    let n_gts: usize = scenes.iter().map(|s| s.gts.len()).sum();
    println!(
        "wrote {} scenes ({} objects) to {}",
        scenes.len(),
        n_gts,
        out.display()
    );
    Ok(())
}

fn main() -> anyhow::Result<()> {
    let cli = Cli::parse();
    match cli.command {
        Command::Run { config, out } => cmd_run(&config.load()?, &out),
        Command::Ablate { config, out } => cmd_ablate(&config.load()?, &out),
        Command::Train {
            config,
            out,
            scenes,
            grid_steps,
            scorer_steps,
            train_seed,
        } => {
            let mut settings = TrainSettings {
                seed: train_seed,
                ..TrainSettings::default()
            };
            if let Some(n) = scenes {
                settings.n_scenes = n;
            }
            if let Some(n) = grid_steps {
                settings.grid_steps = n;
            }
            if let Some(n) = scorer_steps {
                settings.scorer_steps = n;
            }
            cmd_train(&config.load()?, &out, settings)
        }
        Command::Gradcheck { seed, inject_fault } => cmd_gradcheck(seed, inject_fault),
        Command::GenCorpus { config, out } => cmd_gen_corpus(&config.load()?, &out),
    }
}
