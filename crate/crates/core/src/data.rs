//! Dataset ingestion and partitioning: IDX files, labeled image
//! directories, and splitting classes into in-distribution vs held-out
//! (out-of-distribution) sets.

use crate::error::{Error, Result};
use crate::tensor::Tensor;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

/// One labeled image.
#[derive(Debug, Clone)]
pub struct Sample {
    pub id: String,
    /// Provenance: file path, or `<idx file>#<index>` for IDX records.
    pub source: String,
    pub image: Tensor<f32>,
    /// 1-based class label.
    pub label: usize,
}

/// A labeled sample collection. Labels form a dense 1..=m range, every
/// class is non-empty, and all images share one shape.
#[derive(Debug, Clone)]
pub struct Dataset {
    samples: Vec<Sample>,
    label_map: BTreeMap<String, usize>,
}

impl Dataset {
    pub fn new(samples: Vec<Sample>, label_map: BTreeMap<String, usize>) -> Result<Self> {
        let m = label_map.len();
        if m == 0 {
            return Err(Error::Data("empty label map".into()));
        }
        let mut seen = vec![false; m];
        for (name, &label) in &label_map {
            if label < 1 || label > m {
                return Err(Error::Data(format!(
                    "class '{name}' has label {label}, outside 1..={m}"
                )));
            }
            if std::mem::replace(&mut seen[label - 1], true) {
                return Err(Error::Data(format!("duplicate label {label}")));
            }
        }
        let mut counts = vec![0usize; m];
        let shape = samples
            .first()
            .map(|s| s.image.shape().to_vec())
            .unwrap_or_default();
        for s in &samples {
            if s.label < 1 || s.label > m {
                return Err(Error::Data(format!(
                    "sample '{}' has label {} outside 1..={m}",
                    s.id, s.label
                )));
            }
            if s.image.shape() != shape.as_slice() {
                return Err(Error::Data(format!(
                    "sample '{}' has shape {:?}, expected {:?}",
                    s.id,
                    s.image.shape(),
                    shape
                )));
            }
            counts[s.label - 1] += 1;
        }
        if let Some(j) = counts.iter().position(|&c| c == 0) {
            return Err(Error::Data(format!("class {} has no samples", j + 1)));
        }
        Ok(Dataset { samples, label_map })
    }

    pub fn samples(&self) -> &[Sample] {
        &self.samples
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn num_classes(&self) -> usize {
        self.label_map.len()
    }

    pub fn label_map(&self) -> &BTreeMap<String, usize> {
        &self.label_map
    }

    pub fn label_of(&self, class_name: &str) -> Option<usize> {
        self.label_map.get(class_name).copied()
    }

    pub fn class_name(&self, label: usize) -> Option<&str> {
        self.label_map
            .iter()
            .find(|(_, &l)| l == label)
            .map(|(n, _)| n.as_str())
    }

    /// Class names ordered by label.
    pub fn class_names(&self) -> Vec<String> {
        let mut names = vec![String::new(); self.num_classes()];
        for (name, &label) in &self.label_map {
            names[label - 1] = name.clone();
        }
        names
    }

    /// Sample indices per class: entry `j` holds the indices of label
    /// `j + 1`.
    pub fn class_indices(&self) -> Vec<Vec<usize>> {
        let mut sets = vec![Vec::new(); self.num_classes()];
        for (i, s) in self.samples.iter().enumerate() {
            sets[s.label - 1].push(i);
        }
        sets
    }

    pub fn class_counts(&self) -> Vec<usize> {
        self.class_indices().iter().map(|s| s.len()).collect()
    }

    pub fn image_shape(&self) -> &[usize] {
        self.samples
            .first()
            .map(|s| s.image.shape())
            .unwrap_or(&[])
    }

    /// Writes the manifest CSV with columns `id,path,class,label`.
    pub fn write_manifest(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path).map_err(|e| Error::csv(path, e))?;
        w.write_record(["id", "path", "class", "label"])
            .map_err(|e| Error::csv(path, e))?;
        for s in &self.samples {
            w.write_record([
                s.id.as_str(),
                s.source.as_str(),
                self.class_name(s.label).unwrap_or(""),
                &s.label.to_string(),
            ])
            .map_err(|e| Error::csv(path, e))?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }
}

const IDX_IMAGE_MAGIC: u32 = 0x0000_0803;
const IDX_LABEL_MAGIC: u32 = 0x0000_0801;

fn be_u32(bytes: &[u8], at: usize, path: &Path) -> Result<u32> {
    bytes
        .get(at..at + 4)
        .map(|b| u32::from_be_bytes(b.try_into().unwrap()))
        .ok_or_else(|| Error::Data(format!("truncated IDX header in {}", path.display())))
}

/// Loads an IDX image/label file pair (big-endian headers, image magic
/// 0x00000803, label magic 0x00000801). Pixels are scaled to [0, 1] as
/// `1 x rows x cols` tensors; digit `d` becomes label `d + 1`.
pub fn load_idx(images_path: &Path, labels_path: &Path) -> Result<Dataset> {
    let images = fs::read(images_path).map_err(|e| Error::io(images_path, e))?;
    let magic = be_u32(&images, 0, images_path)?;
    if magic != IDX_IMAGE_MAGIC {
        return Err(Error::Data(format!(
            "bad image magic {magic:#010x} in {} (expected {IDX_IMAGE_MAGIC:#010x})",
            images_path.display()
        )));
    }
    let n = be_u32(&images, 4, images_path)? as usize;
    let rows = be_u32(&images, 8, images_path)? as usize;
    let cols = be_u32(&images, 12, images_path)? as usize;
    let expected = 16 + n * rows * cols;
    if images.len() < expected {
        return Err(Error::Data(format!(
            "truncated IDX image payload in {}: {} bytes, expected {expected}",
            images_path.display(),
            images.len()
        )));
    }
    if images.len() > expected {
        return Err(Error::Data(format!(
            "unexpected trailing bytes in {}",
            images_path.display()
        )));
    }

    let labels = fs::read(labels_path).map_err(|e| Error::io(labels_path, e))?;
    let magic = be_u32(&labels, 0, labels_path)?;
    if magic != IDX_LABEL_MAGIC {
        return Err(Error::Data(format!(
            "bad label magic {magic:#010x} in {} (expected {IDX_LABEL_MAGIC:#010x})",
            labels_path.display()
        )));
    }
    let n_labels = be_u32(&labels, 4, labels_path)? as usize;
    if labels.len() != 8 + n_labels {
        return Err(Error::Data(format!(
            "truncated IDX label payload in {}: {} bytes, expected {}",
            labels_path.display(),
            labels.len(),
            8 + n_labels
        )));
    }
    if n != n_labels {
        return Err(Error::Data(format!(
            "{} images but {} labels ({} / {})",
            n,
            n_labels,
            images_path.display(),
            labels_path.display()
        )));
    }

    let stem = images_path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "idx".into());
    let mut present = [false; 10];
    for &d in &labels[8..] {
        if d > 9 {
            return Err(Error::Data(format!(
                "label byte {d} outside digit range in {}",
                labels_path.display()
            )));
        }
        present[d as usize] = true;
    }
    // Digits map onto dense labels; with all ten present this is the
    // standard d -> d + 1 shift.
    let mut label_map = BTreeMap::new();
    let mut digit_to_label = [0usize; 10];
    let mut next = 1;
    for d in 0..10 {
        if present[d] {
            label_map.insert(d.to_string(), next);
            digit_to_label[d] = next;
            next += 1;
        }
    }

    let mut samples = Vec::with_capacity(n);
    let px = rows * cols;
    for i in 0..n {
        let bytes = &images[16 + i * px..16 + (i + 1) * px];
        let data: Vec<f32> = bytes.iter().map(|&b| b as f32 / 255.0).collect();
        samples.push(Sample {
            id: format!("{stem}-{i:05}"),
            source: format!("{}#{i}", images_path.display()),
            image: Tensor::from_vec(vec![1, rows, cols], data)?,
            label: digit_to_label[labels[8 + i] as usize],
        });
    }
    Dataset::new(samples, label_map)
}

/// Builds a label map from the subdirectories of `root`, sorted by name.
pub fn label_map_from_dirs(root: &Path) -> Result<BTreeMap<String, usize>> {
    let mut names = Vec::new();
    let entries = fs::read_dir(root).map_err(|e| Error::io(root, e))?;
    for entry in entries {
        let entry = entry.map_err(|e| Error::io(root, e))?;
        if entry.path().is_dir() {
            let name = entry.file_name().to_string_lossy().into_owned();
            if !name.starts_with('.') {
                names.push(name);
            }
        }
    }
    names.sort();
    if names.is_empty() {
        return Err(Error::Data(format!(
            "no class directories under {}",
            root.display()
        )));
    }
    Ok(names
        .into_iter()
        .enumerate()
        .map(|(i, n)| (n, i + 1))
        .collect())
}

fn is_image_file(path: &Path) -> bool {
    matches!(
        path.extension()
            .and_then(|e| e.to_str())
            .map(|e| e.to_ascii_lowercase())
            .as_deref(),
        Some("png" | "jpg" | "jpeg")
    )
}

/// Loads a `root/<class-name>/*.{png,jpg}` tree. Every image is decoded,
/// bilinearly resized to `target` (width, height), converted to RGB
/// channels-first and scaled to [0, 1].
pub fn load_image_dir(
    root: &Path,
    label_map: &BTreeMap<String, usize>,
    target: (usize, usize),
) -> Result<Dataset> {
    load_image_dir_channels(root, label_map, target, 3)
}

/// [`load_image_dir`] with an explicit channel count (3 for RGB, 1 for
/// grayscale).
pub fn load_image_dir_channels(
    root: &Path,
    label_map: &BTreeMap<String, usize>,
    target: (usize, usize),
    channels: usize,
) -> Result<Dataset> {
    let entries = fs::read_dir(root).map_err(|e| Error::io(root, e))?;
    let mut class_dirs = Vec::new();
    for entry in entries {
        let entry = entry.map_err(|e| Error::io(root, e))?;
        let path = entry.path();
        if !path.is_dir() {
            continue;
        }
        let name = entry.file_name().to_string_lossy().into_owned();
        if name.starts_with('.') {
            continue;
        }
        let label = *label_map.get(&name).ok_or_else(|| {
            Error::Data(format!(
                "class directory '{name}' is not in the label map"
            ))
        })?;
        class_dirs.push((name, label, path));
    }
    class_dirs.sort();

    let mut samples = Vec::new();
    for (name, label, dir) in class_dirs {
        let mut files: Vec<_> = fs::read_dir(&dir)
            .map_err(|e| Error::io(&dir, e))?
            .collect::<std::io::Result<Vec<_>>>()
            .map_err(|e| Error::io(&dir, e))?
            .into_iter()
            .map(|e| e.path())
            .filter(|p| p.is_file() && is_image_file(p))
            .collect();
        files.sort();
        for file in files {
            let tensor = load_single_image(&file, channels, target)?;
            let stem = file
                .file_stem()
                .map(|s| s.to_string_lossy().into_owned())
                .unwrap_or_default();
            samples.push(Sample {
                id: format!("{name}/{stem}"),
                source: file.display().to_string(),
                image: tensor,
                label,
            });
        }
    }
    Dataset::new(samples, label_map.clone())
}

/// Decodes one image file to a channels-first `[C,H,W]` tensor in [0, 1],
/// bilinearly resized to `target`. `channels` must be 1 (grayscale) or 3.
pub fn load_single_image(path: &Path, channels: usize, target: (usize, usize)) -> Result<Tensor<f32>> {
    let img = image::open(path)
        .map_err(|e| Error::Data(format!("cannot decode {}: {e}", path.display())))?;
    let (tw, th) = (target.0 as u32, target.1 as u32);
    let (w, h) = (target.0, target.1);
    match channels {
        1 => {
            let resized = image::imageops::resize(
                &img.to_luma8(),
                tw,
                th,
                image::imageops::FilterType::Triangle,
            );
            let mut data = vec![0.0f32; w * h];
            for (x, y, pixel) in resized.enumerate_pixels() {
                data[y as usize * w + x as usize] = pixel[0] as f32 / 255.0;
            }
            Tensor::from_vec(vec![1, h, w], data)
        }
        3 => {
            let resized = image::imageops::resize(
                &img.to_rgb8(),
                tw,
                th,
                image::imageops::FilterType::Triangle,
            );
            let mut data = vec![0.0f32; 3 * w * h];
            for (x, y, pixel) in resized.enumerate_pixels() {
                for c in 0..3 {
                    data[c * h * w + y as usize * w + x as usize] = pixel[c] as f32 / 255.0;
                }
            }
            Tensor::from_vec(vec![3, h, w], data)
        }
        other => Err(Error::Config(format!(
            "unsupported channel count {other}; expected 1 or 3"
        ))),
    }
}

/// How a class was renumbered by [`hold_out_classes`].
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassMapEntry {
    pub name: String,
    pub original: usize,
    pub renumbered: usize,
}

/// The in-distribution dataset (classes kept, labels renumbered densely
/// from 1) and the held-out dataset, with the label bijections recorded.
#[derive(Debug, Clone)]
pub struct OodPartition {
    pub id: Dataset,
    pub ood: Dataset,
    pub id_classes: Vec<ClassMapEntry>,
    pub ood_classes: Vec<ClassMapEntry>,
}

impl OodPartition {
    /// Original label of a renumbered in-distribution label.
    pub fn original_id_label(&self, renumbered: usize) -> Option<usize> {
        self.id_classes
            .iter()
            .find(|e| e.renumbered == renumbered)
            .map(|e| e.original)
    }
}

/// Splits the dataset into in-distribution classes (renumbered densely)
/// and held-out classes. The held-out label set must be a non-empty proper
/// subset of the classes.
pub fn hold_out_classes(dataset: Dataset, ood_labels: &[usize]) -> Result<OodPartition> {
    let m = dataset.num_classes();
    let mut hold = vec![false; m];
    for &l in ood_labels {
        if l < 1 || l > m {
            return Err(Error::Config(format!(
                "held-out label {l} outside 1..={m}"
            )));
        }
        hold[l - 1] = true;
    }
    let held = hold.iter().filter(|&&h| h).count();
    if held == 0 {
        return Err(Error::Config("no classes to hold out".into()));
    }
    if held == m {
        return Err(Error::Config(
            "cannot hold out every class: nothing left to train on".into(),
        ));
    }

    let names = dataset.class_names();
    let mut id_classes = Vec::new();
    let mut ood_classes = Vec::new();
    let mut id_new = vec![0usize; m];
    let mut ood_new = vec![0usize; m];
    for (j, held) in hold.iter().enumerate() {
        let entry = |renumbered: usize| ClassMapEntry {
            name: names[j].clone(),
            original: j + 1,
            renumbered,
        };
        if *held {
            ood_new[j] = ood_classes.len() + 1;
            ood_classes.push(entry(ood_new[j]));
        } else {
            id_new[j] = id_classes.len() + 1;
            id_classes.push(entry(id_new[j]));
        }
    }

    let mut id_samples = Vec::new();
    let mut ood_samples = Vec::new();
    for mut s in dataset.samples {
        if hold[s.label - 1] {
            s.label = ood_new[s.label - 1];
            ood_samples.push(s);
        } else {
            s.label = id_new[s.label - 1];
            id_samples.push(s);
        }
    }
    let id_map: BTreeMap<String, usize> = id_classes
        .iter()
        .map(|e| (e.name.clone(), e.renumbered))
        .collect();
    let ood_map: BTreeMap<String, usize> = ood_classes
        .iter()
        .map(|e| (e.name.clone(), e.renumbered))
        .collect();
    Ok(OodPartition {
        id: Dataset::new(id_samples, id_map)?,
        ood: Dataset::new(ood_samples, ood_map)?,
        id_classes,
        ood_classes,
    })
}
