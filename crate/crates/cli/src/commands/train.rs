//! `ncd train`: fit the configured architecture on the training split and
//! write a checkpoint plus a per-epoch log.

use super::*;
use ncd_core::architectures::save_checkpoint;
use ncd_core::train::{train_model, TrainLog};

pub struct TrainOutcome {
    pub checkpoint: PathBuf,
    pub log: TrainLog,
}

pub fn cmd_train(cfg: &ExperimentConfig) -> Result<TrainOutcome> {
    let dataset = load_train_dataset(cfg)?;
    let spec = build_spec(cfg, dataset.num_classes(), &dataset)?;
    let out = ensure_out_dir(cfg)?;

    let indices = subsample_indices(dataset.len(), cfg.subsample, cfg.seed);
    let mut model = spec.build::<f32>(derive_seed(cfg.seed, 1))?;
    let tcfg = train_config(cfg, 2);
    let log = train_model(&mut model, &dataset, &indices, &tcfg)?;

    let log_path = out.join("training_log.csv");
    write_training_log(&log, &log_path)?;

    let meta = serde_json::json!({
        "arch": spec.name,
        "classes": spec.classes,
        "epochs": cfg.epochs,
        "batch": cfg.batch,
        "samples": indices.len(),
        "final_loss": log.epochs.last().map(|e| e.mean_loss),
        "final_train_accuracy": log.epochs.last().map(|e| e.accuracy),
    });
    let ckpt_path = out.join("checkpoint.ncd");
    save_checkpoint(&model, None, cfg.seed, &meta.to_string(), &ckpt_path)?;

    let manifest_path = out.join("manifest.json");
    let dataset_manifest = out.join("dataset_manifest.csv");
    dataset.write_manifest(&dataset_manifest)?;
    write_manifest(
        &out,
        "train",
        cfg.seed,
        &[ckpt_path.clone(), log_path, dataset_manifest, manifest_path],
    )?;
    Ok(TrainOutcome {
        checkpoint: ckpt_path,
        log,
    })
}

pub fn write_training_log(log: &TrainLog, path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::csv(path, e))?;
    w.write_record(["epoch", "loss", "train_accuracy"])
        .map_err(|e| Error::csv(path, e))?;
    for e in &log.epochs {
        w.write_record([
            e.epoch.to_string(),
            format!("{}", e.mean_loss),
            format!("{}", e.accuracy),
        ])
        .map_err(|e| Error::csv(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}
