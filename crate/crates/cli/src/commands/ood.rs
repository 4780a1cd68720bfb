//! `ncd ood`: the end-to-end leave-classes-out pipeline. Train on the
//! in-distribution classes, extract intermediate features, fit the
//! Gaussian class models, score the in-distribution test set against the
//! held-out samples, calibrate the logistic detector and report
//! AUC/TPR/TNR with CDF plots.

use super::*;
use crate::config::ThresholdPolicy;
use ncd_core::architectures::{save_checkpoint, FeatureRecord};
use ncd_core::cross_validation::balanced_kfold;
use ncd_core::data::hold_out_classes;
use ncd_core::metrics::{emit_cdf, roc_auc};
use ncd_core::ncd::{
    detect, fit_class_gaussians, fit_logistic, score_sets, DaMode, GaussianClassModel,
    LogisticModel,
};
use ncd_core::train::{evaluate, extract_features, train_model};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;

#[derive(Debug, Serialize, Deserialize)]
pub struct OodModeSummary {
    pub mode: String,
    /// Raw-score AUC per layer over the full scored set.
    pub auc_full: BTreeMap<String, f64>,
    /// Calibrated-probability AUC on the calibration part.
    pub auc_fit: f64,
    /// Calibrated-probability AUC on the held-back evaluation part.
    pub auc_pred: f64,
    pub threshold: f64,
    pub youden_threshold: f64,
    /// Detection rates on the evaluation part at `threshold`.
    pub tpr: f64,
    pub tnr: f64,
    /// Rows: true in-distribution, true OOD; columns: kept, flagged.
    pub confusion: [[usize; 2]; 2],
    pub logistic: LogisticModel,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct OodSummary {
    pub arch: String,
    pub holdout: Vec<String>,
    pub seed: u64,
    pub layers: Vec<String>,
    pub id_classes: usize,
    pub train_samples: usize,
    pub id_test_samples: usize,
    pub ood_samples: usize,
    pub cnn_accuracy: f64,
    pub modes: Vec<OodModeSummary>,
}

pub fn cmd_ood(cfg: &ExperimentConfig) -> Result<OodSummary> {
    if cfg.holdout.is_empty() {
        return Err(Error::Config(
            "the ood command needs a non-empty holdout class list".into(),
        ));
    }
    let out = ensure_out_dir(cfg)?;
    let mut outputs = Vec::new();

    // Partition: S (train), T (in-distribution test), O (held-out).
    let train_all = load_train_dataset(cfg)?;
    let holdout = holdout_labels(&train_all, &cfg.holdout)?;
    let train_part = hold_out_classes(train_all, &holdout)?;
    let (train_ds, s_indices, t_source) = match load_test_dataset(cfg)? {
        Some(test_all) => {
            // A dedicated test split provides T and O; the held-out
            // training images are unused, as the model never sees them.
            let labels = holdout_labels(&test_all, &cfg.holdout)?;
            let test_part = hold_out_classes(test_all, &labels)?;
            let id_names = train_part.id.class_names();
            if test_part.id.class_names() != id_names {
                return Err(Error::Data(
                    "train and test splits disagree on the in-distribution classes".into(),
                ));
            }
            let s = subsample_indices(train_part.id.len(), cfg.subsample, cfg.seed);
            (train_part.id, s, (test_part.id, test_part.ood))
        }
        None => {
            // Single dataset: the fold machinery supplies S and T, and
            // every held-out sample forms O.
            let plan = balanced_kfold(
                &train_part.id.class_indices(),
                cfg.k,
                derive_seed(cfg.seed, 50),
            )?;
            let t_idx = plan.test_indices(0);
            let s_idx = plan.train_indices(0);
            let t_ds = subset_dataset(&train_part.id, &t_idx)?;
            (train_part.id, s_idx, (t_ds, train_part.ood))
        }
    };
    let (t_dataset, o_dataset) = t_source;

    // Train the classifier on S.
    let spec = build_spec(cfg, train_ds.num_classes(), &train_ds)?;
    let mut model = spec.build::<f32>(derive_seed(cfg.seed, 1))?;
    let tcfg = train_config(cfg, 2);
    let log = train_model(&mut model, &train_ds, &s_indices, &tcfg)?;
    let log_path = out.join("training_log.csv");
    super::train::write_training_log(&log, &log_path)?;
    outputs.push(log_path);

    let t_indices: Vec<usize> = (0..t_dataset.len()).collect();
    let o_indices: Vec<usize> = (0..o_dataset.len()).collect();
    let cnn_accuracy = evaluate(&model, &t_dataset, &t_indices, 256)?.accuracy;

    let meta = serde_json::json!({
        "arch": spec.name,
        "holdout": cfg.holdout,
        "cnn_accuracy": cnn_accuracy,
    });
    let ckpt_path = out.join("checkpoint.ncd");
    save_checkpoint(&model, None, cfg.seed, &meta.to_string(), &ckpt_path)?;
    outputs.push(ckpt_path);

    // Features at the configured layers.
    let hooks: Vec<&str> = cfg.ncd.layers.iter().map(|s| s.as_str()).collect();
    let s_feats = extract_features(&model, &train_ds, &s_indices, &hooks, 256, Some(false))?;
    let t_feats = extract_features(&model, &t_dataset, &t_indices, &hooks, 256, Some(false))?;
    let o_feats = extract_features(&model, &o_dataset, &o_indices, &hooks, 256, Some(true))?;

    let mut modes = Vec::new();
    for mode in cfg.ncd.mode.modes() {
        let (summary, mode_outputs) = run_mode(
            cfg,
            &out,
            mode,
            &cfg.ncd.layers,
            &s_feats,
            &t_feats,
            &o_feats,
        )?;
        outputs.extend(mode_outputs);
        modes.push(summary);
    }

    let summary = OodSummary {
        arch: spec.name.clone(),
        holdout: cfg.holdout.clone(),
        seed: cfg.seed,
        layers: cfg.ncd.layers.clone(),
        id_classes: train_ds.num_classes(),
        train_samples: s_indices.len(),
        id_test_samples: t_dataset.len(),
        ood_samples: o_dataset.len(),
        cnn_accuracy,
        modes,
    };
    let summary_path = out.join("summary.json");
    write_json(&summary_path, &summary)?;
    outputs.push(summary_path);
    let report_path = out.join("report.txt");
    std::fs::write(&report_path, text_report(&summary)).map_err(|e| Error::io(&report_path, e))?;
    outputs.push(report_path);
    outputs.push(out.join("manifest.json"));
    write_manifest(&out, "ood", cfg.seed, &outputs)?;
    Ok(summary)
}

fn run_mode(
    cfg: &ExperimentConfig,
    out: &Path,
    mode: DaMode,
    layers: &[String],
    s_feats: &[FeatureRecord],
    t_feats: &[FeatureRecord],
    o_feats: &[FeatureRecord],
) -> Result<(OodModeSummary, Vec<PathBuf>)> {
    let mut outputs = Vec::new();
    let mut models: Vec<GaussianClassModel> = Vec::new();
    for layer in layers {
        let feats: Vec<FeatureRecord> = s_feats
            .iter()
            .filter(|r| &r.layer == layer)
            .cloned()
            .collect();
        let gm = fit_class_gaussians(&feats, mode, cfg.ncd.shrinkage)?;
        let path = out.join(format!("gaussian_{mode}_{layer}.json"));
        gm.save_json(&path)?;
        outputs.push(path);
        models.push(gm);
    }

    let scores = score_sets(&models, t_feats, o_feats)?;
    let scores_path = out.join(format!("scores_{mode}.csv"));
    scores.write_csv(&scores_path)?;
    outputs.push(scores_path);

    let mut auc_full = BTreeMap::new();
    for layer in layers {
        let (w, u) = scores.column(layer)?;
        auc_full.insert(layer.clone(), roc_auc(&w, &u)?.auc);
        let base = out.join(format!("cdf_{mode}_{layer}"));
        let (csv_path, svg_path) = emit_cdf(&scores, layer, &base)?;
        outputs.push(csv_path);
        outputs.push(svg_path);
    }

    // Calibrate on one half, evaluate on the other.
    let (cal, eval) = scores.split_calibration(cfg.ncd.calibration, derive_seed(cfg.seed, 3));
    let logistic = fit_logistic(&cal, cfg.ncd.lambda)?;
    let logistic_path = out.join(format!("logistic_{mode}.json"));
    logistic.save_json(&logistic_path)?;
    outputs.push(logistic_path);

    let xi_cal = logistic.predict_set(&cal)?;
    let xi_eval = logistic.predict_set(&eval)?;
    let cal_curve = roc_auc(&xi_cal, &cal.labels())?;
    let eval_curve = roc_auc(&xi_eval, &eval.labels())?;
    let roc_path = out.join(format!("roc_{mode}.csv"));
    write_roc_csv(&eval_curve, &roc_path)?;
    outputs.push(roc_path);

    let youden_threshold = cal_curve.youden().threshold;
    let threshold = match cfg.ncd.threshold {
        ThresholdPolicy::Fixed(t) => t,
        ThresholdPolicy::Youden => youden_threshold,
    };
    let flags: Vec<bool> = xi_eval.iter().map(|&x| detect(x, threshold)).collect();
    let labels = eval.labels();
    let (tpr, tnr) = ncd_core::metrics::tpr_tnr(&flags, &labels)?;
    let mut confusion = [[0usize; 2]; 2];
    for (&f, &u) in flags.iter().zip(&labels) {
        confusion[usize::from(u)][usize::from(f)] += 1;
    }

    Ok((
        OodModeSummary {
            mode: mode.to_string(),
            auc_full,
            auc_fit: cal_curve.auc,
            auc_pred: eval_curve.auc,
            threshold,
            youden_threshold,
            tpr,
            tnr,
            confusion,
            logistic,
        },
        outputs,
    ))
}

fn write_roc_csv(curve: &ncd_core::metrics::RocCurve, path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::csv(path, e))?;
    w.write_record(["threshold", "fpr", "tpr"])
        .map_err(|e| Error::csv(path, e))?;
    for (i, &(fpr, tpr)) in curve.points.iter().enumerate().skip(1) {
        w.write_record([
            format!("{}", curve.thresholds[i - 1]),
            format!("{fpr}"),
            format!("{tpr}"),
        ])
        .map_err(|e| Error::csv(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Builds a standalone dataset from a subset of sample indices.
fn subset_dataset(
    dataset: &ncd_core::data::Dataset,
    indices: &[usize],
) -> Result<ncd_core::data::Dataset> {
    let samples: Vec<_> = indices
        .iter()
        .map(|&i| dataset.samples()[i].clone())
        .collect();
    ncd_core::data::Dataset::new(samples, dataset.label_map().clone())
}

fn text_report(s: &OodSummary) -> String {
    use std::fmt::Write;
    let mut out = String::new();
    let _ = writeln!(out, "new-class detection run ({} architecture)", s.arch);
    let _ = writeln!(out, "held-out classes: {}", s.holdout.join(", "));
    let _ = writeln!(
        out,
        "samples: {} train / {} in-distribution test / {} held-out",
        s.train_samples, s.id_test_samples, s.ood_samples
    );
    let _ = writeln!(out, "classifier accuracy on T: {:.4}", s.cnn_accuracy);
    for m in &s.modes {
        let _ = writeln!(out, "\n[{}]", m.mode);
        for (layer, auc) in &m.auc_full {
            let _ = writeln!(out, "  AUC ({layer}, raw scores): {auc:.4}");
        }
        let _ = writeln!(
            out,
            "  calibrated AUC: fitting {:.4} / prediction {:.4}",
            m.auc_fit, m.auc_pred
        );
        let _ = writeln!(
            out,
            "  threshold {:.4} (youden {:.4}): TPR {:.4}, TNR {:.4}",
            m.threshold, m.youden_threshold, m.tpr, m.tnr
        );
        let _ = writeln!(
            out,
            "  confusion [[ID kept, ID flagged], [OOD missed, OOD flagged]]: {:?}",
            m.confusion
        );
    }
    out
}
