//! Experiment configuration: a flat `key = value` text file plus
//! command-line overrides.
//!
//! Recognized keys (see the repository README for the full schema):
//!
//! ```text
//! dataset          idx | image-dir
//! idx.train_images, idx.train_labels        IDX file paths
//! idx.test_images, idx.test_labels          optional test split
//! imagedir.root                             class-per-directory image tree
//! imagedir.size                             square resize target (default 512)
//! arch             mnist | frog
//! holdout          comma-separated class names (ood command)
//! k                fold count (default 5)
//! seed             RNG seed; mandatory, no wall-clock default
//! repeats          re-randomized CV repetitions (default 1)
//! epochs, batch, lr, optimizer (adam|sgd)   training hyperparameters
//! dropout          optional dropout-rate override
//! subsample        cap on training samples (0 = all)
//! ncd.mode         lda | qda | both (default both)
//! ncd.layers       comma-separated hook/layer names (default FC3)
//! ncd.shrinkage    auto | always | off (default auto)
//! ncd.lambda       logistic L2 strength (default 1e-4)
//! ncd.threshold    probability threshold, or `youden` (default 0.5)
//! ncd.calibration  calibration fraction of scored samples (default 0.5)
//! out              run directory (all outputs land here)
//! ```

use ncd_core::ncd::{DaMode, ShrinkagePolicy};
use ncd_core::{Error, Result};
use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

#[derive(Debug, Clone, PartialEq)]
pub enum DatasetSource {
    Idx {
        train_images: PathBuf,
        train_labels: PathBuf,
        test: Option<(PathBuf, PathBuf)>,
    },
    ImageDir {
        root: PathBuf,
        size: usize,
        channels: usize,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Arch {
    Frog,
    Mnist,
}

impl Arch {
    pub fn name(&self) -> &'static str {
        match self {
            Arch::Frog => "frog",
            Arch::Mnist => "mnist",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ThresholdPolicy {
    Fixed(f64),
    Youden,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ModeChoice {
    Lda,
    Qda,
    Both,
}

impl ModeChoice {
    pub fn modes(&self) -> Vec<DaMode> {
        match self {
            ModeChoice::Lda => vec![DaMode::Lda],
            ModeChoice::Qda => vec![DaMode::Qda],
            ModeChoice::Both => vec![DaMode::Lda, DaMode::Qda],
        }
    }
}

#[derive(Debug, Clone)]
pub struct NcdConfig {
    pub mode: ModeChoice,
    pub layers: Vec<String>,
    pub shrinkage: ShrinkagePolicy,
    pub lambda: f64,
    pub threshold: ThresholdPolicy,
    pub calibration: f64,
}

#[derive(Debug, Clone)]
pub struct ExperimentConfig {
    pub dataset: DatasetSource,
    pub arch: Arch,
    pub holdout: Vec<String>,
    pub k: usize,
    pub seed: u64,
    pub repeats: usize,
    pub epochs: usize,
    pub batch: usize,
    pub lr: f64,
    pub sgd: bool,
    pub dropout: Option<f64>,
    pub subsample: usize,
    pub ncd: NcdConfig,
    pub out: PathBuf,
}

const KNOWN_KEYS: &[&str] = &[
    "dataset",
    "idx.train_images",
    "idx.train_labels",
    "idx.test_images",
    "idx.test_labels",
    "imagedir.root",
    "imagedir.size",
    "imagedir.channels",
    "arch",
    "holdout",
    "k",
    "seed",
    "repeats",
    "epochs",
    "batch",
    "lr",
    "optimizer",
    "dropout",
    "subsample",
    "ncd.mode",
    "ncd.layers",
    "ncd.shrinkage",
    "ncd.lambda",
    "ncd.threshold",
    "ncd.calibration",
    "out",
];

/// Parses the `key = value` file into a map, rejecting malformed lines.
pub fn parse_kv(text: &str) -> Result<BTreeMap<String, String>> {
    let mut map = BTreeMap::new();
    for (lineno, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (key, value) = line.split_once('=').ok_or_else(|| {
            Error::Config(format!("line {}: expected `key = value`", lineno + 1))
        })?;
        let key = key.trim().to_string();
        let value = value.trim().to_string();
        if map.insert(key.clone(), value).is_some() {
            return Err(Error::Config(format!("duplicate key '{key}'")));
        }
    }
    Ok(map)
}

pub struct ConfigBuilder {
    map: BTreeMap<String, String>,
}

impl ConfigBuilder {
    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(ConfigBuilder {
            map: parse_kv(&text)?,
        })
    }

    pub fn from_map(map: BTreeMap<String, String>) -> Self {
        ConfigBuilder { map }
    }

    /// Applies `key=value` overrides from the command line.
    pub fn apply_overrides(&mut self, sets: &[String]) -> Result<()> {
        for s in sets {
            let (key, value) = s
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("--set expects key=value, got '{s}'")))?;
            self.map
                .insert(key.trim().to_string(), value.trim().to_string());
        }
        Ok(())
    }

    pub fn set(&mut self, key: &str, value: String) {
        self.map.insert(key.to_string(), value);
    }

    fn get(&self, key: &str) -> Option<&str> {
        self.map.get(key).map(|s| s.as_str())
    }

    fn parse<T: std::str::FromStr>(&self, key: &str, default: T) -> Result<T> {
        match self.get(key) {
            None => Ok(default),
            Some(v) => v
                .parse()
                .map_err(|_| Error::Config(format!("key '{key}': cannot parse '{v}'"))),
        }
    }

    /// Validates keys and paths and produces the typed configuration.
    pub fn build(&self) -> Result<ExperimentConfig> {
        for key in self.map.keys() {
            if !KNOWN_KEYS.contains(&key.as_str()) {
                return Err(Error::Config(format!("unknown configuration key '{key}'")));
            }
        }

        let dataset = match self.get("dataset") {
            Some("idx") => {
                let train_images = self.required_path("idx.train_images")?;
                let train_labels = self.required_path("idx.train_labels")?;
                let test = match (self.get("idx.test_images"), self.get("idx.test_labels")) {
                    (Some(_), Some(_)) => Some((
                        self.required_path("idx.test_images")?,
                        self.required_path("idx.test_labels")?,
                    )),
                    (None, None) => None,
                    _ => {
                        return Err(Error::Config(
                            "idx.test_images and idx.test_labels must be set together".into(),
                        ))
                    }
                };
                DatasetSource::Idx {
                    train_images,
                    train_labels,
                    test,
                }
            }
            Some("image-dir") => {
                let channels = self.parse("imagedir.channels", 3usize)?;
                if channels != 1 && channels != 3 {
                    return Err(Error::Config(format!(
                        "imagedir.channels must be 1 or 3, got {channels}"
                    )));
                }
                DatasetSource::ImageDir {
                    root: self.required_path("imagedir.root")?,
                    size: self.parse("imagedir.size", 512usize)?,
                    channels,
                }
            }
            Some(other) => {
                return Err(Error::Config(format!(
                    "dataset must be 'idx' or 'image-dir', got '{other}'"
                )))
            }
            None => return Err(Error::Config("missing required key 'dataset'".into())),
        };

        let arch = match self.get("arch") {
            Some("frog") => Arch::Frog,
            Some("mnist") => Arch::Mnist,
            Some(other) => {
                return Err(Error::Config(format!(
                    "arch must be 'frog' or 'mnist', got '{other}'"
                )))
            }
            None => return Err(Error::Config("missing required key 'arch'".into())),
        };

        let seed = match self.get("seed") {
            Some(v) => v
                .parse()
                .map_err(|_| Error::Config(format!("seed: cannot parse '{v}'")))?,
            None => {
                return Err(Error::Config(
                    "a seed is mandatory (set `seed = ...` or pass --seed)".into(),
                ))
            }
        };

        let holdout: Vec<String> = self
            .get("holdout")
            .map(|v| {
                v.split(',')
                    .map(|s| s.trim().to_string())
                    .filter(|s| !s.is_empty())
                    .collect()
            })
            .unwrap_or_default();

        let optimizer = self.get("optimizer").unwrap_or("adam");
        let sgd = match optimizer {
            "adam" => false,
            "sgd" => true,
            other => {
                return Err(Error::Config(format!(
                    "optimizer must be 'adam' or 'sgd', got '{other}'"
                )))
            }
        };

        let dropout = match self.get("dropout") {
            None => None,
            Some(v) => Some(v.parse().map_err(|_| {
                Error::Config(format!("dropout: cannot parse '{v}'"))
            })?),
        };

        let threshold = match self.get("ncd.threshold") {
            None => ThresholdPolicy::Fixed(0.5),
            Some("youden") => ThresholdPolicy::Youden,
            Some(v) => {
                let t: f64 = v
                    .parse()
                    .map_err(|_| Error::Config(format!("ncd.threshold: cannot parse '{v}'")))?;
                if !(0.0..=1.0).contains(&t) {
                    return Err(Error::Config(format!(
                        "ncd.threshold must lie in [0, 1], got {t}"
                    )));
                }
                ThresholdPolicy::Fixed(t)
            }
        };

        let mode = match self.get("ncd.mode").unwrap_or("both") {
            "lda" => ModeChoice::Lda,
            "qda" => ModeChoice::Qda,
            "both" => ModeChoice::Both,
            other => {
                return Err(Error::Config(format!(
                    "ncd.mode must be lda, qda or both, got '{other}'"
                )))
            }
        };

        let layers: Vec<String> = self
            .get("ncd.layers")
            .unwrap_or("FC3")
            .split(',')
            .map(|s| s.trim().to_string())
            .filter(|s| !s.is_empty())
            .collect();
        if layers.is_empty() {
            return Err(Error::Config("ncd.layers must name at least one layer".into()));
        }

        let shrinkage: ShrinkagePolicy = self.get("ncd.shrinkage").unwrap_or("auto").parse()?;
        let calibration: f64 = self.parse("ncd.calibration", 0.5)?;
        if !(0.0 < calibration && calibration < 1.0) {
            return Err(Error::Config(format!(
                "ncd.calibration must lie in (0, 1), got {calibration}"
            )));
        }

        let k = self.parse("k", 5usize)?;
        if k < 2 {
            return Err(Error::Config(format!("k must be at least 2, got {k}")));
        }
        let lr: f64 = self.parse("lr", 1e-3)?;
        if lr <= 0.0 {
            return Err(Error::Config(format!("lr must be positive, got {lr}")));
        }
        let batch = self.parse("batch", 32usize)?;
        if batch == 0 {
            return Err(Error::Config("batch must be positive".into()));
        }
        let repeats = self.parse("repeats", 1usize)?;
        if repeats == 0 {
            return Err(Error::Config("repeats must be positive".into()));
        }

        let out = PathBuf::from(
            self.get("out")
                .ok_or_else(|| Error::Config("missing required key 'out'".into()))?,
        );

        Ok(ExperimentConfig {
            dataset,
            arch,
            holdout,
            k,
            seed,
            repeats,
            epochs: self.parse("epochs", 3usize)?,
            batch,
            lr,
            sgd,
            dropout,
            subsample: self.parse("subsample", 0usize)?,
            ncd: NcdConfig {
                mode,
                layers,
                shrinkage,
                lambda: self.parse("ncd.lambda", 1e-4)?,
                threshold,
                calibration,
            },
            out,
        })
    }

    fn required_path(&self, key: &str) -> Result<PathBuf> {
        let v = self
            .get(key)
            .ok_or_else(|| Error::Config(format!("missing required key '{key}'")))?;
        let path = PathBuf::from(v);
        if !path.exists() {
            return Err(Error::Data(format!(
                "{key} = {} does not exist",
                path.display()
            )));
        }
        Ok(path)
    }
}

impl ExperimentConfig {
    pub fn optimizer_kind(&self) -> ncd_core::engine::OptimizerKind {
        if self.sgd {
            ncd_core::engine::OptimizerKind::sgd(self.lr)
        } else {
            ncd_core::engine::OptimizerKind::adam(self.lr)
        }
    }
}
