//! Component ablation: the pipeline under every on/off combination of
//! multi-stage refinement, the ism factor and the rsm factor, on one
//! corpus and seed. Rows fail independently; one broken configuration
//! does not bring the table down.

use std::path::Path;

use serde::Serialize;

use crate::error::Result;
use crate::harness::config::ExperimentConfig;
use crate::harness::experiment::{run_with_toggles, Toggles};

#[derive(Debug, Clone, Serialize)]
pub struct AblationRow {
    pub toggles: Toggles,
    pub mean_ap: Option<f64>,
    pub ap50: Option<f64>,
    pub ap90: Option<f64>,
    pub error: Option<String>,
}

fn ap_at(report: &crate::evaluate::EvalReport, threshold: f64) -> Option<f64> {
    report
        .thresholds
        .iter()
        .find(|t| (t.iou_threshold - threshold).abs() < 1e-9)
        .map(|t| t.ap.all)
}

/// All eight rows, full method first, each under the same config.
pub fn run_ablation(config: &ExperimentConfig) -> Result<Vec<AblationRow>> {
    config.validate()?;
    let mut rows = Vec::with_capacity(8);
    for cascade in [true, false] {
        for ism in [true, false] {
            for rsm in [true, false] {
                let toggles = Toggles { cascade, ism, rsm };
                let row = match run_with_toggles(config, toggles) {
                    Ok(output) => AblationRow {
                        toggles,
                        mean_ap: Some(output.report.mean.all),
                        ap50: ap_at(&output.report, 0.5),
                        ap90: ap_at(&output.report, 0.9),
                        error: None,
                    },
                    Err(e) => AblationRow {
                        toggles,
                        mean_ap: None,
                        ap50: None,
                        ap90: None,
                        error: Some(e.to_string()),
                    },
                };
                rows.push(row);
            }
        }
    }
    Ok(rows)
}

/// Writes the table with the usual traceability preamble.
pub fn write_ablation_csv(
    path: &Path,
    config: &ExperimentConfig,
    rows: &[AblationRow],
) -> Result<()> {
    let opt = |v: &Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
    let mut text = format!("# config_hash={}\n# seed={}\n", config.hash()?, config.seed);
    text.push_str("cascade,ism,rsm,mean_ap,ap50,ap90,error\n");
    for r in rows {
        text.push_str(&format!(
            "{},{},{},{},{},{},{}\n",
            r.toggles.cascade,
            r.toggles.ism,
            r.toggles.rsm,
            opt(&r.mean_ap),
            opt(&r.ap50),
            opt(&r.ap90),
            r.error.as_deref().unwrap_or_default().replace(',', ";"),
        ));
    }
    std::fs::write(path, text)?;
    Ok(())
}
