//! `ncd cv`: the balanced K-fold experiment, optionally repeated with
//! re-randomized splits.

use super::*;
use ncd_core::cross_validation::{balanced_kfold, run_cv, CvReport};
use serde::Serialize;

#[derive(Debug, Serialize)]
pub struct CvRepeatSummary {
    pub repeat: usize,
    pub plan_seed: u64,
    pub fold_accuracies: Vec<f64>,
    pub overall_accuracy: f64,
}

#[derive(Debug, Serialize)]
pub struct CvSummary {
    pub arch: String,
    pub k: usize,
    pub seed: u64,
    pub repeats: Vec<CvRepeatSummary>,
    pub mean_overall_accuracy: f64,
}

#[derive(Debug)]
pub struct CvOutcome {
    pub reports: Vec<CvReport>,
    pub summary: CvSummary,
}

pub fn cmd_cv(cfg: &ExperimentConfig) -> Result<CvOutcome> {
    let dataset = load_train_dataset(cfg)?;
    let spec = build_spec(cfg, dataset.num_classes(), &dataset)?;
    let out = ensure_out_dir(cfg)?;

    let mut outputs = Vec::new();
    let mut reports = Vec::new();
    let mut repeats = Vec::new();
    for repeat in 0..cfg.repeats {
        let plan_seed = derive_seed(cfg.seed, 100 + repeat as u64);
        let plan = balanced_kfold(&dataset.class_indices(), cfg.k, plan_seed)?;
        let tcfg = train_config(cfg, 200 + repeat as u64);
        let report = run_cv(&spec, &dataset, &plan, &tcfg)?;
        let dir = if cfg.repeats == 1 {
            out.clone()
        } else {
            out.join(format!("repeat{repeat}"))
        };
        report.write_csv(&dir)?;
        outputs.push(dir.join("cv_folds.csv"));
        outputs.push(dir.join("cv_confusion.csv"));
        repeats.push(CvRepeatSummary {
            repeat,
            plan_seed,
            fold_accuracies: report.fold_accuracies.clone(),
            overall_accuracy: report.overall_accuracy,
        });
        reports.push(report);
    }
    let mean = repeats.iter().map(|r| r.overall_accuracy).sum::<f64>() / repeats.len() as f64;
    let summary = CvSummary {
        arch: spec.name.clone(),
        k: cfg.k,
        seed: cfg.seed,
        repeats,
        mean_overall_accuracy: mean,
    };
    let summary_path = out.join("summary.json");
    write_json(&summary_path, &summary)?;
    outputs.push(summary_path);
    outputs.push(out.join("manifest.json"));
    write_manifest(&out, "cv", cfg.seed, &outputs)?;
    Ok(CvOutcome { reports, summary })
}
