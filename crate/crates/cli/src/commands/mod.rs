//! Experiment commands. Each writes all of its outputs under the
//! configured run directory together with a `manifest.json` listing them,
//! and is a pure function of (configuration, input files).

pub mod cv;
pub mod feature_maps;
pub mod ood;
pub mod report;
pub mod train;

use crate::config::{Arch, DatasetSource, ExperimentConfig};
use ncd_core::architectures::{build_frog_cnn, build_mnist_cnn, ModelSpec};
use ncd_core::data::{label_map_from_dirs, load_idx, load_image_dir_channels, Dataset};
use ncd_core::train::TrainConfig;
use ncd_core::{derive_seed, Error, Result};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use std::path::{Path, PathBuf};

pub fn load_train_dataset(cfg: &ExperimentConfig) -> Result<Dataset> {
    match &cfg.dataset {
        DatasetSource::Idx {
            train_images,
            train_labels,
            ..
        } => load_idx(train_images, train_labels),
        DatasetSource::ImageDir {
            root,
            size,
            channels,
        } => {
            let map = label_map_from_dirs(root)?;
            load_image_dir_channels(root, &map, (*size, *size), *channels)
        }
    }
}

pub fn load_test_dataset(cfg: &ExperimentConfig) -> Result<Option<Dataset>> {
    match &cfg.dataset {
        DatasetSource::Idx {
            test: Some((images, labels)),
            ..
        } => Ok(Some(load_idx(images, labels)?)),
        _ => Ok(None),
    }
}

/// Architecture spec for `classes` classes, with the dropout override
/// applied and the dataset shape checked against the model input.
pub fn build_spec(cfg: &ExperimentConfig, classes: usize, dataset: &Dataset) -> Result<ModelSpec> {
    let mut spec = match cfg.arch {
        Arch::Frog => build_frog_cnn(classes)?,
        Arch::Mnist => build_mnist_cnn(classes)?,
    };
    if let Some(rate) = cfg.dropout {
        spec.set_dropout(rate)?;
    }
    if dataset.image_shape() != spec.input_shape.as_slice() {
        return Err(Error::Config(format!(
            "dataset images have shape {:?} but the {} architecture expects {:?}",
            dataset.image_shape(),
            spec.name,
            spec.input_shape
        )));
    }
    Ok(spec)
}

/// Deterministic training subsample: a seeded shuffle of 0..n, truncated
/// to the configured cap (0 keeps everything).
pub fn subsample_indices(n: usize, cap: usize, seed: u64) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..n).collect();
    if cap > 0 && cap < n {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, 0x5b5a3));
        idx.shuffle(&mut rng);
        idx.truncate(cap);
        idx.sort_unstable();
    }
    idx
}

pub fn train_config(cfg: &ExperimentConfig, stream: u64) -> TrainConfig {
    TrainConfig {
        epochs: cfg.epochs,
        batch_size: cfg.batch,
        optimizer: cfg.optimizer_kind(),
        seed: derive_seed(cfg.seed, stream),
    }
}

/// Resolves the labels of the configured holdout class names.
pub fn holdout_labels(dataset: &Dataset, names: &[String]) -> Result<Vec<usize>> {
    names
        .iter()
        .map(|name| {
            dataset.label_of(name).ok_or_else(|| {
                Error::Config(format!(
                    "holdout class '{name}' is not a class of the dataset (classes: {})",
                    dataset.class_names().join(", ")
                ))
            })
        })
        .collect()
}

pub fn ensure_out_dir(cfg: &ExperimentConfig) -> Result<PathBuf> {
    std::fs::create_dir_all(&cfg.out).map_err(|e| Error::io(&cfg.out, e))?;
    Ok(cfg.out.clone())
}

#[derive(Serialize)]
struct Manifest<'a> {
    command: &'a str,
    seed: u64,
    outputs: Vec<String>,
}

/// Writes `manifest.json` listing the run's outputs (paths relative to the
/// run directory).
pub fn write_manifest(dir: &Path, command: &str, seed: u64, outputs: &[PathBuf]) -> Result<()> {
    let rel: Vec<String> = outputs
        .iter()
        .map(|p| {
            p.strip_prefix(dir)
                .unwrap_or(p)
                .display()
                .to_string()
        })
        .collect();
    let manifest = Manifest {
        command,
        seed,
        outputs: rel,
    };
    let path = dir.join("manifest.json");
    let json = serde_json::to_string_pretty(&manifest).expect("manifest serialization");
    std::fs::write(&path, json).map_err(|e| Error::io(&path, e))
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let json = serde_json::to_string_pretty(value).expect("json serialization");
    std::fs::write(path, json).map_err(|e| Error::io(path, e))
}
