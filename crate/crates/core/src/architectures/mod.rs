//! Declarative model descriptions, the two built-in networks, forward
//! passes with intermediate-feature hooks, and checkpoint persistence.

mod checkpoint;

pub use checkpoint::{load_checkpoint, load_checkpoint_for, save_checkpoint, LoadedCheckpoint};

use crate::engine::{
    BatchNorm, Conv2d, Dense, Dropout, Flatten, Layer, MaxPool2, Relu, Softmax,
};
use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

/// Default drop probability for the fully connected stack of the large
/// network.
pub const DEFAULT_DROPOUT: f64 = 0.8;

/// One layer of a model description.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LayerKind {
    Conv2d {
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
    },
    MaxPool,
    BatchNorm {
        channels: usize,
    },
    Dense {
        in_dim: usize,
        out_dim: usize,
    },
    Dropout {
        rate: f64,
    },
    Activation,
    Flatten,
    Softmax,
}

impl LayerKind {
    /// Per-sample output shape (no batch axis), validating the input shape.
    fn output_shape(&self, input: &[usize]) -> Result<Vec<usize>> {
        match self {
            LayerKind::Conv2d {
                in_channels,
                out_channels,
                kernel,
            } => match *input {
                [c, h, w] if c == *in_channels && h >= *kernel && w >= *kernel => {
                    Ok(vec![*out_channels, h - kernel + 1, w - kernel + 1])
                }
                _ => Err(Error::Shape(format!(
                    "conv2d({in_channels}->{out_channels}, {kernel}x{kernel}) cannot consume {input:?}"
                ))),
            },
            LayerKind::MaxPool => match *input {
                [c, h, w] if h >= 2 && w >= 2 => Ok(vec![c, h / 2, w / 2]),
                _ => Err(Error::Shape(format!("max_pool cannot consume {input:?}"))),
            },
            LayerKind::BatchNorm { channels } => {
                if input.first() == Some(channels) {
                    Ok(input.to_vec())
                } else {
                    Err(Error::Shape(format!(
                        "batch_norm({channels}) cannot consume {input:?}"
                    )))
                }
            }
            LayerKind::Dense { in_dim, out_dim } => match *input {
                [d] if d == *in_dim => Ok(vec![*out_dim]),
                _ => Err(Error::Shape(format!(
                    "dense({in_dim}->{out_dim}) cannot consume {input:?}"
                ))),
            },
            LayerKind::Dropout { .. } | LayerKind::Activation => Ok(input.to_vec()),
            LayerKind::Flatten => Ok(vec![input.iter().product()]),
            LayerKind::Softmax => match *input {
                [d] => Ok(vec![d]),
                _ => Err(Error::Shape(format!("softmax cannot consume {input:?}"))),
            },
        }
    }

    fn param_count(&self) -> usize {
        match self {
            LayerKind::Conv2d {
                in_channels,
                out_channels,
                kernel,
            } => out_channels * in_channels * kernel * kernel + out_channels,
            LayerKind::Dense { in_dim, out_dim } => out_dim * in_dim + out_dim,
            LayerKind::BatchNorm { channels } => 2 * channels,
            _ => 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerDesc {
    pub name: String,
    #[serde(flatten)]
    pub kind: LayerKind,
}

/// Named feature-extraction point: the output of the referenced layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HookDesc {
    pub hook: String,
    pub layer: String,
}

/// Declarative model description. Building it validates that the layer
/// shapes compose end to end and that the output width equals the class
/// count.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub name: String,
    pub input_shape: Vec<usize>,
    pub classes: usize,
    pub layers: Vec<LayerDesc>,
    pub hooks: Vec<HookDesc>,
}

impl ModelSpec {
    /// Output shape after every layer; errors if the chain is inconsistent.
    pub fn shape_chain(&self) -> Result<Vec<Vec<usize>>> {
        let mut shapes = Vec::with_capacity(self.layers.len());
        let mut cur = self.input_shape.clone();
        for desc in &self.layers {
            cur = desc.kind.output_shape(&cur).map_err(|e| {
                Error::Shape(format!("layer '{}': {e}", desc.name))
            })?;
            shapes.push(cur.clone());
        }
        Ok(shapes)
    }

    pub fn validate(&self) -> Result<()> {
        if self.classes < 2 {
            return Err(Error::Config(format!(
                "a classifier needs at least 2 classes, got {}",
                self.classes
            )));
        }
        let mut seen = std::collections::BTreeSet::new();
        for desc in &self.layers {
            if !seen.insert(desc.name.as_str()) {
                return Err(Error::Config(format!(
                    "duplicate layer name '{}'",
                    desc.name
                )));
            }
        }
        let shapes = self.shape_chain()?;
        let out = shapes
            .last()
            .ok_or_else(|| Error::Config("model has no layers".into()))?;
        if out.as_slice() != [self.classes] {
            return Err(Error::Shape(format!(
                "model output shape {out:?} does not match {} classes",
                self.classes
            )));
        }
        for hook in &self.hooks {
            if !self.layers.iter().any(|l| l.name == hook.layer) {
                return Err(Error::Config(format!(
                    "hook '{}' references unknown layer '{}'",
                    hook.hook, hook.layer
                )));
            }
        }
        Ok(())
    }

    /// Width of a hook's feature vector.
    pub fn hook_width(&self, hook: &str) -> Result<usize> {
        let layer = self.hook_layer(hook)?;
        let shapes = self.shape_chain()?;
        let idx = self
            .layers
            .iter()
            .position(|l| l.name == layer)
            .expect("validated hook");
        Ok(shapes[idx].iter().product())
    }

    pub fn hook_layer(&self, hook: &str) -> Result<&str> {
        self.hooks
            .iter()
            .find(|h| h.hook == hook)
            .map(|h| h.layer.as_str())
            .ok_or_else(|| Error::Config(format!("unknown hook name '{hook}'")))
    }

    pub fn hook_names(&self) -> Vec<&str> {
        self.hooks.iter().map(|h| h.hook.as_str()).collect()
    }

    /// Total trainable parameter count implied by the descriptors.
    pub fn param_count(&self) -> usize {
        self.layers.iter().map(|l| l.kind.param_count()).sum()
    }

    /// SHA-256 of the canonical JSON serialization; identifies the
    /// architecture in checkpoints.
    pub fn fingerprint(&self) -> [u8; 32] {
        let json = serde_json::to_vec(self).expect("spec serialization");
        let mut out = [0u8; 32];
        out.copy_from_slice(&Sha256::digest(&json));
        out
    }

    /// Overrides the rate of every dropout layer.
    pub fn set_dropout(&mut self, rate: f64) -> Result<()> {
        if !(0.0..1.0).contains(&rate) {
            return Err(Error::Config(format!(
                "dropout rate must be in [0, 1), got {rate}"
            )));
        }
        for desc in &mut self.layers {
            if let LayerKind::Dropout { rate: r } = &mut desc.kind {
                *r = rate;
            }
        }
        Ok(())
    }

    /// Instantiates the model with seeded He-normal initialization.
    pub fn build<F: Scalar>(&self, seed: u64) -> Result<Model<F>> {
        self.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut layers = Vec::with_capacity(self.layers.len());
        for desc in &self.layers {
            let layer = match &desc.kind {
                LayerKind::Conv2d {
                    in_channels,
                    out_channels,
                    kernel,
                } => {
                    let mut l = Conv2d::new(*in_channels, *out_channels, *kernel);
                    l.init(&mut rng);
                    Layer::Conv2d(l)
                }
                LayerKind::MaxPool => Layer::MaxPool2(MaxPool2::new()),
                LayerKind::BatchNorm { channels } => Layer::BatchNorm(BatchNorm::new(*channels)),
                LayerKind::Dense { in_dim, out_dim } => {
                    let mut l = Dense::new(*in_dim, *out_dim);
                    l.init(&mut rng);
                    Layer::Dense(l)
                }
                LayerKind::Dropout { rate } => Layer::Dropout(Dropout::new(*rate)?),
                LayerKind::Activation => Layer::Relu(Relu::new()),
                LayerKind::Flatten => Layer::Flatten(Flatten::new()),
                LayerKind::Softmax => Layer::Softmax(Softmax::new()),
            };
            layers.push((desc.name.clone(), layer));
        }
        Ok(Model {
            spec: self.clone(),
            layers,
        })
    }
}

/// The large network: three 3x3 conv blocks (32, 16, 4 filters, each with
/// batch norm, rectifier and 2x2 pooling) on a 3x512x512 input, flattened
/// to 15,376 features, then dense layers of widths 256/128/64/m with
/// dropout, and a softmax output.
pub fn build_frog_cnn(m: usize) -> Result<ModelSpec> {
    if m < 2 {
        return Err(Error::Config(format!(
            "frog_cnn needs at least 2 classes, got {m}"
        )));
    }
    let mut layers = Vec::new();
    let mut push = |name: &str, kind: LayerKind| {
        layers.push(LayerDesc {
            name: name.to_string(),
            kind,
        })
    };
    let conv_channels = [(3usize, 32usize), (32, 16), (16, 4)];
    for (i, (ic, oc)) in conv_channels.iter().enumerate() {
        let n = i + 1;
        push(
            &format!("conv{n}"),
            LayerKind::Conv2d {
                in_channels: *ic,
                out_channels: *oc,
                kernel: 3,
            },
        );
        push(&format!("bn{n}"), LayerKind::BatchNorm { channels: *oc });
        push(&format!("act{n}"), LayerKind::Activation);
        push(&format!("mp{n}"), LayerKind::MaxPool);
    }
    push("fl", LayerKind::Flatten);
    let widths = [(15_376usize, 256usize), (256, 128), (128, 64)];
    for (i, (in_dim, out_dim)) in widths.iter().enumerate() {
        let n = i + 1;
        push(
            &format!("fc{n}"),
            LayerKind::Dense {
                in_dim: *in_dim,
                out_dim: *out_dim,
            },
        );
        push(&format!("fcact{n}"), LayerKind::Activation);
        push(
            &format!("drop{n}"),
            LayerKind::Dropout {
                rate: DEFAULT_DROPOUT,
            },
        );
    }
    push(
        "fc4",
        LayerKind::Dense {
            in_dim: 64,
            out_dim: m,
        },
    );
    push("op", LayerKind::Softmax);
    let spec = ModelSpec {
        name: "frog_cnn".into(),
        input_shape: vec![3, 512, 512],
        classes: m,
        layers,
        hooks: standard_hooks(),
        };
    spec.validate()?;
    Ok(spec)
}

/// The small network: two 5x5 conv blocks (10, 20 filters, rectifier and
/// 2x2 pooling) on a 1x28x28 input, flattened to 320 features, then dense
/// layers of widths 50/40/30/m and a softmax output.
pub fn build_mnist_cnn(m: usize) -> Result<ModelSpec> {
    if m < 2 {
        return Err(Error::Config(format!(
            "mnist_cnn needs at least 2 classes, got {m}"
        )));
    }
    let mut layers = Vec::new();
    let mut push = |name: &str, kind: LayerKind| {
        layers.push(LayerDesc {
            name: name.to_string(),
            kind,
        })
    };
    push(
        "conv1",
        LayerKind::Conv2d {
            in_channels: 1,
            out_channels: 10,
            kernel: 5,
        },
    );
    push("act1", LayerKind::Activation);
    push("mp1", LayerKind::MaxPool);
    push(
        "conv2",
        LayerKind::Conv2d {
            in_channels: 10,
            out_channels: 20,
            kernel: 5,
        },
    );
    push("act2", LayerKind::Activation);
    push("mp2", LayerKind::MaxPool);
    push("fl", LayerKind::Flatten);
    let widths = [(320usize, 50usize), (50, 40), (40, 30)];
    for (i, (in_dim, out_dim)) in widths.iter().enumerate() {
        let n = i + 1;
        push(
            &format!("fc{n}"),
            LayerKind::Dense {
                in_dim: *in_dim,
                out_dim: *out_dim,
            },
        );
        push(&format!("fcact{n}"), LayerKind::Activation);
    }
    push(
        "fc4",
        LayerKind::Dense {
            in_dim: 30,
            out_dim: m,
        },
    );
    push("op", LayerKind::Softmax);
    let spec = ModelSpec {
        name: "mnist_cnn".into(),
        input_shape: vec![1, 28, 28],
        classes: m,
        layers,
        hooks: standard_hooks(),
    };
    spec.validate()?;
    Ok(spec)
}

/// Hook names shared by both architectures: `FL` and `FC1`..`FC4`.
fn standard_hooks() -> Vec<HookDesc> {
    let mut hooks = vec![HookDesc {
        hook: "FL".into(),
        layer: "fl".into(),
    }];
    for i in 1..=4 {
        hooks.push(HookDesc {
            hook: format!("FC{i}"),
            layer: format!("fc{i}"),
        });
    }
    hooks
}

/// A built network: the spec plus instantiated layers.
#[derive(Debug, Clone)]
pub struct Model<F: Scalar> {
    spec: ModelSpec,
    layers: Vec<(String, Layer<F>)>,
}

impl<F: Scalar> Model<F> {
    pub fn spec(&self) -> &ModelSpec {
        &self.spec
    }

    /// Training forward pass (dropout active, batch-norm batch statistics).
    pub fn forward_train(&mut self, input: &Tensor<F>, rng: &mut ChaCha8Rng) -> Result<Tensor<F>> {
        let mut x = input.clone();
        for (_, layer) in &mut self.layers {
            x = layer.forward_train(&x, rng)?;
        }
        Ok(x)
    }

    /// Eval forward pass: a pure function of parameters and input.
    pub fn forward_eval(&self, input: &Tensor<F>) -> Result<Tensor<F>> {
        let mut x = input.clone();
        for (_, layer) in &self.layers {
            x = layer.forward_eval(&x)?;
        }
        Ok(x)
    }

    /// Eval forward pass capturing the outputs of the named layers.
    pub fn forward_eval_captures(
        &self,
        input: &Tensor<F>,
        layer_names: &[&str],
    ) -> Result<(Tensor<F>, Vec<(String, Tensor<F>)>)> {
        for name in layer_names {
            if !self.layers.iter().any(|(n, _)| n == name) {
                return Err(Error::Config(format!("unknown layer name '{name}'")));
            }
        }
        let mut captures = Vec::with_capacity(layer_names.len());
        let mut x = input.clone();
        for (name, layer) in &self.layers {
            x = layer.forward_eval(&x)?;
            if layer_names.contains(&name.as_str()) {
                captures.push((name.clone(), x.clone()));
            }
        }
        // Preserve the caller's requested order.
        captures.sort_by_key(|(name, _)| {
            layer_names.iter().position(|n| n == name).unwrap_or(usize::MAX)
        });
        Ok((x, captures))
    }

    /// Eval forward pass returning probabilities and the feature tensors at
    /// the requested hook points (one `[N, width]` tensor per hook). A
    /// plain layer name is accepted wherever it is not shadowed by a hook.
    pub fn forward_hooks(
        &self,
        input: &Tensor<F>,
        hook_names: &[&str],
    ) -> Result<(Tensor<F>, Vec<(String, Tensor<F>)>)> {
        let mut layer_names = Vec::with_capacity(hook_names.len());
        for hook in hook_names {
            match self.spec.hook_layer(hook) {
                Ok(layer) => layer_names.push(layer),
                Err(e) => {
                    if self.layers.iter().any(|(n, _)| n == hook) {
                        layer_names.push(hook);
                    } else {
                        return Err(e);
                    }
                }
            }
        }
        let (probs, captures) = self.forward_eval_captures(input, &layer_names)?;
        let features = hook_names
            .iter()
            .zip(captures)
            .map(|(hook, (_, tensor))| (hook.to_string(), tensor))
            .collect();
        Ok((probs, features))
    }

    /// Backpropagates through the whole stack, accumulating parameter
    /// gradients. `grad` is the gradient w.r.t. the model output.
    pub fn backward(&mut self, grad: &Tensor<F>) -> Result<Tensor<F>> {
        let mut g = grad.clone();
        for (_, layer) in self.layers.iter_mut().rev() {
            g = layer.backward(&g)?;
        }
        Ok(g)
    }

    /// Trainable parameters with `layer.param` names, in layer order.
    pub fn named_params_mut(&mut self) -> Vec<(String, &mut Tensor<F>)> {
        self.layers
            .iter_mut()
            .flat_map(|(name, layer)| {
                layer
                    .named_params_mut()
                    .into_iter()
                    .map(move |(pname, t)| (format!("{name}.{pname}"), t))
            })
            .collect()
    }

    pub fn named_params(&self) -> Vec<(String, &Tensor<F>)> {
        self.layers
            .iter()
            .flat_map(|(name, layer)| {
                layer
                    .named_params()
                    .into_iter()
                    .map(move |(pname, t)| (format!("{name}.{pname}"), t))
            })
            .collect()
    }

    pub fn named_buffers(&self) -> Vec<(String, &Tensor<F>)> {
        self.layers
            .iter()
            .flat_map(|(name, layer)| {
                layer
                    .named_buffers()
                    .into_iter()
                    .map(move |(bname, t)| (format!("{name}.{bname}"), t))
            })
            .collect()
    }

    pub fn named_buffers_mut(&mut self) -> Vec<(String, &mut Tensor<F>)> {
        self.layers
            .iter_mut()
            .flat_map(|(name, layer)| {
                layer
                    .named_buffers_mut()
                    .into_iter()
                    .map(move |(bname, t)| (format!("{name}.{bname}"), t))
            })
            .collect()
    }

    pub fn param_count(&self) -> usize {
        self.named_params().iter().map(|(_, t)| t.len()).sum()
    }

    pub fn zero_grads(&mut self) {
        for (_, t) in self.named_params_mut() {
            t.zero_grad();
        }
    }

    /// Drops training caches (useful before sharing an eval-mode model).
    pub fn clear_caches(&mut self) {
        for (_, layer) in &mut self.layers {
            layer.clear_cache();
        }
    }

    pub fn layer(&self, name: &str) -> Option<&Layer<F>> {
        self.layers
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, l)| l)
    }
}

/// A feature vector captured at a hook point for one sample.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureRecord {
    pub id: String,
    pub layer: String,
    pub values: Vec<f32>,
    pub label: Option<usize>,
    pub ood: Option<bool>,
}
