//! Checkpoint persistence.
//!
//! Byte layout (all integers little-endian):
//!
//! ```text
//! magic            4 bytes, b"NCD1"
//! version          u32 (currently 1)
//! fingerprint      32 bytes, SHA-256 of the embedded spec JSON
//! spec_len         u32, followed by spec JSON (UTF-8)
//! seed             u64
//! meta_len         u32, followed by metadata JSON (UTF-8)
//! tensor_count     u32
//!   per tensor:    name_len u32, name UTF-8,
//!                  ndim u32, dims u32 x ndim,
//!                  values f32 x prod(dims)
//! optimizer_flag   u8 (0 or 1)
//!   if 1:          step_count u64, slot_count u32,
//!                  per slot: name_len u32, name, len u32,
//!                            m f64 x len, v f64 x len
//! ```
//!
//! Tensors are the trainable parameters followed by the batch-norm
//! buffers, in layer order. A round trip reproduces forward outputs
//! bit-for-bit.

use super::{Model, ModelSpec};
use crate::engine::{MomentSlot, Optimizer, OptimizerKind};
use crate::error::{CheckpointError, Error, Result};
use crate::tensor::Tensor;
use std::collections::HashMap;
use std::fs;
use std::path::Path;

const MAGIC: &[u8; 4] = b"NCD1";
const VERSION: u32 = 1;

#[derive(Debug)]
pub struct LoadedCheckpoint {
    pub spec: ModelSpec,
    pub model: Model<f32>,
    pub seed: u64,
    pub meta: String,
    pub optimizer_state: Option<(u64, HashMap<String, MomentSlot>)>,
}

impl LoadedCheckpoint {
    /// Rebuilds an optimizer continuing from the stored moments.
    pub fn resume_optimizer(&self, kind: OptimizerKind) -> Option<Optimizer> {
        self.optimizer_state.as_ref().map(|(steps, slots)| {
            let mut opt = Optimizer::new(kind);
            opt.step_count = *steps;
            opt.slots = slots.clone();
            opt
        })
    }
}

pub fn save_checkpoint(
    model: &Model<f32>,
    optimizer: Option<&Optimizer>,
    seed: u64,
    meta: &str,
    path: &Path,
) -> Result<()> {
    let spec_json = serde_json::to_vec(model.spec()).expect("spec serialization");
    let mut buf = Vec::with_capacity(64 + spec_json.len() + 4 * model.param_count());
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    buf.extend_from_slice(&model.spec().fingerprint());
    buf.extend_from_slice(&(spec_json.len() as u32).to_le_bytes());
    buf.extend_from_slice(&spec_json);
    buf.extend_from_slice(&seed.to_le_bytes());
    buf.extend_from_slice(&(meta.len() as u32).to_le_bytes());
    buf.extend_from_slice(meta.as_bytes());

    let mut tensors: Vec<(String, &Tensor<f32>)> = model.named_params();
    tensors.extend(model.named_buffers());
    buf.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
    for (name, tensor) in &tensors {
        buf.extend_from_slice(&(name.len() as u32).to_le_bytes());
        buf.extend_from_slice(name.as_bytes());
        buf.extend_from_slice(&(tensor.ndim() as u32).to_le_bytes());
        for &d in tensor.shape() {
            buf.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for &v in tensor.data() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }

    match optimizer {
        Some(opt) => {
            buf.push(1);
            buf.extend_from_slice(&opt.step_count.to_le_bytes());
            let mut names: Vec<&String> = opt.slots.keys().collect();
            names.sort();
            buf.extend_from_slice(&(names.len() as u32).to_le_bytes());
            for name in names {
                let slot = &opt.slots[name];
                buf.extend_from_slice(&(name.len() as u32).to_le_bytes());
                buf.extend_from_slice(name.as_bytes());
                buf.extend_from_slice(&(slot.m.len() as u32).to_le_bytes());
                for &v in &slot.m {
                    buf.extend_from_slice(&v.to_le_bytes());
                }
                for &v in &slot.v {
                    buf.extend_from_slice(&v.to_le_bytes());
                }
            }
        }
        None => buf.push(0),
    }

    fs::write(path, &buf).map_err(|e| Error::io(path, e))
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> std::result::Result<&'a [u8], CheckpointError> {
        if self.pos + n > self.buf.len() {
            return Err(CheckpointError::Truncated);
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> std::result::Result<u32, CheckpointError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> std::result::Result<u64, CheckpointError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn string(&mut self) -> std::result::Result<String, CheckpointError> {
        let len = self.u32()? as usize;
        let bytes = self.take(len)?;
        String::from_utf8(bytes.to_vec())
            .map_err(|_| CheckpointError::Corrupt("non-UTF-8 string".into()))
    }
}

pub fn load_checkpoint(path: &Path) -> Result<LoadedCheckpoint> {
    let buf = fs::read(path).map_err(|e| Error::io(path, e))?;
    let mut r = Reader { buf: &buf, pos: 0 };

    let magic = r.take(4).map_err(Error::Checkpoint)?;
    if magic != MAGIC {
        return Err(Error::Checkpoint(CheckpointError::BadMagic));
    }
    let version = r.u32().map_err(Error::Checkpoint)?;
    if version != VERSION {
        return Err(Error::Checkpoint(CheckpointError::Version(version)));
    }
    let mut fingerprint = [0u8; 32];
    fingerprint.copy_from_slice(r.take(32).map_err(Error::Checkpoint)?);
    let spec_json = r.string().map_err(Error::Checkpoint)?;
    let spec: ModelSpec = serde_json::from_str(&spec_json)
        .map_err(|e| Error::Checkpoint(CheckpointError::Corrupt(format!("spec JSON: {e}"))))?;
    if spec.fingerprint() != fingerprint {
        return Err(Error::Checkpoint(CheckpointError::Corrupt(
            "stored fingerprint does not match embedded spec".into(),
        )));
    }
    let seed = r.u64().map_err(Error::Checkpoint)?;
    let meta = r.string().map_err(Error::Checkpoint)?;

    let mut model: Model<f32> = spec.build(seed)?;
    let tensor_count = r.u32().map_err(Error::Checkpoint)? as usize;
    let mut stored: Vec<(String, Vec<usize>, Vec<f32>)> = Vec::with_capacity(tensor_count);
    for _ in 0..tensor_count {
        let name = r.string().map_err(Error::Checkpoint)?;
        let ndim = r.u32().map_err(Error::Checkpoint)? as usize;
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            shape.push(r.u32().map_err(Error::Checkpoint)? as usize);
        }
        let n: usize = shape.iter().product();
        let bytes = r.take(4 * n).map_err(Error::Checkpoint)?;
        let values: Vec<f32> = bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        stored.push((name, shape, values));
    }
    fn apply(
        stored: &[(String, Vec<usize>, Vec<f32>)],
        targets: Vec<(String, &mut Tensor<f32>)>,
    ) -> Result<()> {
        for ((name, shape, values), (tname, tensor)) in stored.iter().zip(targets) {
            if *name != tname || shape != tensor.shape() {
                return Err(Error::Checkpoint(CheckpointError::Corrupt(format!(
                    "tensor '{name}' {shape:?} does not match model tensor '{tname}' {:?}",
                    tensor.shape()
                ))));
            }
            tensor.data_mut().copy_from_slice(values);
        }
        Ok(())
    }
    let n_params = model.named_params().len();
    let n_buffers = model.named_buffers().len();
    if stored.len() != n_params + n_buffers {
        return Err(Error::Checkpoint(CheckpointError::Corrupt(format!(
            "checkpoint holds {} tensors, model has {}",
            stored.len(),
            n_params + n_buffers
        ))));
    }
    apply(&stored[..n_params], model.named_params_mut())?;
    apply(&stored[n_params..], model.named_buffers_mut())?;

    let flag = r.take(1).map_err(Error::Checkpoint)?[0];
    let optimizer_state = if flag == 1 {
        let steps = r.u64().map_err(Error::Checkpoint)?;
        let slot_count = r.u32().map_err(Error::Checkpoint)? as usize;
        let mut slots = HashMap::with_capacity(slot_count);
        for _ in 0..slot_count {
            let name = r.string().map_err(Error::Checkpoint)?;
            let len = r.u32().map_err(Error::Checkpoint)? as usize;
            let read_f64s = |r: &mut Reader, len: usize| {
                r.take(8 * len).map(|bytes| {
                    bytes
                        .chunks_exact(8)
                        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                        .collect::<Vec<f64>>()
                })
            };
            let m = read_f64s(&mut r, len).map_err(Error::Checkpoint)?;
            let v = read_f64s(&mut r, len).map_err(Error::Checkpoint)?;
            slots.insert(name, MomentSlot { m, v });
        }
        Some((steps, slots))
    } else {
        None
    };

    if r.pos != buf.len() {
        return Err(Error::Checkpoint(CheckpointError::Corrupt(format!(
            "{} trailing bytes",
            buf.len() - r.pos
        ))));
    }

    Ok(LoadedCheckpoint {
        spec,
        model,
        seed,
        meta,
        optimizer_state,
    })
}

/// Loads a checkpoint and verifies it holds exactly the expected
/// architecture.
pub fn load_checkpoint_for(path: &Path, expected: &ModelSpec) -> Result<LoadedCheckpoint> {
    let loaded = load_checkpoint(path)?;
    if loaded.spec.fingerprint() != expected.fingerprint() {
        return Err(Error::Checkpoint(CheckpointError::FingerprintMismatch {
            found: hex(&loaded.spec.fingerprint()),
            expected: hex(&expected.fingerprint()),
        }));
    }
    Ok(loaded)
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::architectures::{build_frog_cnn, build_mnist_cnn};
    use crate::tensor::Tensor;

    fn probe_input() -> Tensor<f32> {
        let mut t = Tensor::zeros(&[2, 1, 28, 28]);
        for (i, v) in t.data_mut().iter_mut().enumerate() {
            *v = ((i * 31 % 101) as f32) / 101.0;
        }
        t
    }

    #[test]
    fn round_trip_reproduces_forward_bit_for_bit() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ncd");
        let spec = build_mnist_cnn(9).unwrap();
        let model: Model<f32> = spec.build(123).unwrap();
        let input = probe_input();
        let before = model.forward_eval(&input).unwrap();
        save_checkpoint(&model, None, 123, "{}", &path).unwrap();
        let loaded = load_checkpoint(&path).unwrap();
        assert_eq!(loaded.seed, 123);
        let after = loaded.model.forward_eval(&input).unwrap();
        assert_eq!(before.data(), after.data());
    }

    #[test]
    fn optimizer_state_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ncd");
        let spec = build_mnist_cnn(3).unwrap();
        let model: Model<f32> = spec.build(5).unwrap();
        let mut opt = Optimizer::new(OptimizerKind::adam(1e-3));
        opt.step_count = 17;
        opt.slots.insert(
            "fc1.weight".into(),
            MomentSlot {
                m: vec![0.25; 4],
                v: vec![0.5; 4],
            },
        );
        save_checkpoint(&model, Some(&opt), 5, "{}", &path).unwrap();
        let loaded = load_checkpoint(&path).unwrap();
        let (steps, slots) = loaded.optimizer_state.unwrap();
        assert_eq!(steps, 17);
        assert_eq!(slots["fc1.weight"].m, vec![0.25; 4]);
        assert_eq!(slots["fc1.weight"].v, vec![0.5; 4]);
    }

    #[test]
    fn corrupted_magic_is_not_a_checkpoint() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ncd");
        let spec = build_mnist_cnn(3).unwrap();
        let model: Model<f32> = spec.build(5).unwrap();
        save_checkpoint(&model, None, 5, "{}", &path).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        bytes[0] = b'X';
        std::fs::write(&path, &bytes).unwrap();
        match load_checkpoint(&path) {
            Err(Error::Checkpoint(CheckpointError::BadMagic)) => {}
            other => panic!("expected BadMagic, got {other:?}"),
        }
    }

    #[test]
    fn version_mismatch_is_distinct() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ncd");
        let spec = build_mnist_cnn(3).unwrap();
        let model: Model<f32> = spec.build(5).unwrap();
        save_checkpoint(&model, None, 5, "{}", &path).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        bytes[4] = 99;
        std::fs::write(&path, &bytes).unwrap();
        match load_checkpoint(&path) {
            Err(Error::Checkpoint(CheckpointError::Version(99))) => {}
            other => panic!("expected Version, got {other:?}"),
        }
    }

    #[test]
    fn truncated_file_is_distinct() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ncd");
        let spec = build_mnist_cnn(3).unwrap();
        let model: Model<f32> = spec.build(5).unwrap();
        save_checkpoint(&model, None, 5, "{}", &path).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() / 2]).unwrap();
        match load_checkpoint(&path) {
            Err(Error::Checkpoint(CheckpointError::Truncated)) => {}
            other => panic!("expected Truncated, got {other:?}"),
        }
        std::fs::write(&path, b"").unwrap();
        match load_checkpoint(&path) {
            Err(Error::Checkpoint(CheckpointError::Truncated)) => {}
            other => panic!("expected Truncated on empty file, got {other:?}"),
        }
    }

    #[test]
    fn wrong_architecture_is_a_fingerprint_mismatch() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ncd");
        let frog = build_frog_cnn(4).unwrap();
        let model: Model<f32> = frog.build(5).unwrap();
        save_checkpoint(&model, None, 5, "{}", &path).unwrap();
        let mnist = build_mnist_cnn(9).unwrap();
        match load_checkpoint_for(&path, &mnist) {
            Err(Error::Checkpoint(CheckpointError::FingerprintMismatch { .. })) => {}
            other => panic!("expected FingerprintMismatch, got {other:?}"),
        }
        assert!(load_checkpoint_for(&path, &frog).is_ok());
    }
}
