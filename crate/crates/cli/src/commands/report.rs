//! `ncd report`: merge the summaries of several runs into comparison
//! tables.

use ncd_core::{Error, Result};
use std::path::{Path, PathBuf};

use super::cv::CvRepeatSummary;
use super::ood::OodSummary;

#[derive(serde::Deserialize)]
struct CvSummaryIn {
    arch: String,
    k: usize,
    seed: u64,
    repeats: Vec<CvRepeatSummaryIn>,
    mean_overall_accuracy: f64,
}

#[derive(serde::Deserialize)]
struct CvRepeatSummaryIn {
    repeat: usize,
    overall_accuracy: f64,
}

impl From<CvRepeatSummaryIn> for CvRepeatSummary {
    fn from(v: CvRepeatSummaryIn) -> Self {
        CvRepeatSummary {
            repeat: v.repeat,
            plan_seed: 0,
            fold_accuracies: Vec::new(),
            overall_accuracy: v.overall_accuracy,
        }
    }
}

enum RunSummary {
    Ood(String, OodSummary),
    Cv(String, CvSummaryIn),
}

/// Reads each run directory's `summary.json` and writes `ood_runs.csv`
/// and/or `cv_runs.csv` plus `report.txt` under `out`. Re-running on the
/// same inputs reproduces identical files.
pub fn cmd_report(runs: &[PathBuf], out: &Path) -> Result<Vec<PathBuf>> {
    if runs.is_empty() {
        return Err(Error::Config("no run directories given".into()));
    }
    let mut summaries = Vec::new();
    for run in runs {
        let path = run.join("summary.json");
        let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let name = run
            .file_name()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| run.display().to_string());
        if let Ok(ood) = serde_json::from_str::<OodSummary>(&text) {
            summaries.push(RunSummary::Ood(name, ood));
        } else if let Ok(cv) = serde_json::from_str::<CvSummaryIn>(&text) {
            summaries.push(RunSummary::Cv(name, cv));
        } else {
            return Err(Error::Data(format!(
                "{} is neither an ood nor a cv summary",
                path.display()
            )));
        }
    }

    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let mut written = Vec::new();
    let mut text = String::new();

    let ood: Vec<(&String, &OodSummary)> = summaries
        .iter()
        .filter_map(|s| match s {
            RunSummary::Ood(n, v) => Some((n, v)),
            _ => None,
        })
        .collect();
    if !ood.is_empty() {
        let path = out.join("ood_runs.csv");
        let mut w = csv::Writer::from_path(&path).map_err(|e| Error::csv(&path, e))?;
        w.write_record([
            "run",
            "arch",
            "holdout",
            "mode",
            "cnn_accuracy",
            "auc_raw",
            "auc_fit",
            "auc_pred",
            "tpr",
            "tnr",
            "threshold",
        ])
        .map_err(|e| Error::csv(&path, e))?;
        use std::fmt::Write as _;
        let _ = writeln!(
            text,
            "{:<18} {:<6} {:<10} {:<4} {:>8} {:>8} {:>8} {:>8} {:>8}",
            "run", "arch", "holdout", "mode", "cnn_acc", "auc_raw", "auc_pred", "tpr", "tnr"
        );
        for (name, s) in &ood {
            for m in &s.modes {
                let auc_raw = m
                    .auc_full
                    .iter()
                    .map(|(l, a)| format!("{l}:{a:.4}"))
                    .collect::<Vec<_>>()
                    .join(";");
                w.write_record([
                    name.as_str(),
                    s.arch.as_str(),
                    &s.holdout.join(";"),
                    &m.mode,
                    &format!("{:.4}", s.cnn_accuracy),
                    &auc_raw,
                    &format!("{:.4}", m.auc_fit),
                    &format!("{:.4}", m.auc_pred),
                    &format!("{:.4}", m.tpr),
                    &format!("{:.4}", m.tnr),
                    &format!("{:.4}", m.threshold),
                ])
                .map_err(|e| Error::csv(&path, e))?;
                let best_auc = m.auc_full.values().cloned().fold(0.0f64, f64::max);
                let _ = writeln!(
                    text,
                    "{:<18} {:<6} {:<10} {:<4} {:>8.4} {:>8.4} {:>8.4} {:>8.4} {:>8.4}",
                    name,
                    s.arch,
                    s.holdout.join(";"),
                    m.mode,
                    s.cnn_accuracy,
                    best_auc,
                    m.auc_pred,
                    m.tpr,
                    m.tnr
                );
            }
        }
        w.flush().map_err(|e| Error::io(&path, e))?;
        written.push(path);
    }

    let cv: Vec<(&String, &CvSummaryIn)> = summaries
        .iter()
        .filter_map(|s| match s {
            RunSummary::Cv(n, v) => Some((n, v)),
            _ => None,
        })
        .collect();
    if !cv.is_empty() {
        let path = out.join("cv_runs.csv");
        let mut w = csv::Writer::from_path(&path).map_err(|e| Error::csv(&path, e))?;
        w.write_record(["run", "arch", "k", "seed", "repeats", "mean_overall_accuracy"])
            .map_err(|e| Error::csv(&path, e))?;
        use std::fmt::Write as _;
        let _ = writeln!(text, "\n{:<18} {:<6} {:>3} {:>10}", "run", "arch", "k", "accuracy");
        for (name, s) in &cv {
            w.write_record([
                name.as_str(),
                s.arch.as_str(),
                &s.k.to_string(),
                &s.seed.to_string(),
                &s.repeats.len().to_string(),
                &format!("{:.4}", s.mean_overall_accuracy),
            ])
            .map_err(|e| Error::csv(&path, e))?;
            let _ = writeln!(
                text,
                "{:<18} {:<6} {:>3} {:>10.4}",
                name, s.arch, s.k, s.mean_overall_accuracy
            );
        }
        w.flush().map_err(|e| Error::io(&path, e))?;
        written.push(path);
    }

    let txt_path = out.join("report.txt");
    std::fs::write(&txt_path, text).map_err(|e| Error::io(&txt_path, e))?;
    written.push(txt_path);
    Ok(written)
}
