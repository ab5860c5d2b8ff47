//! Dual-head embedding network and parameter accounting.

mod checkpoint;
pub mod descriptor;

pub use checkpoint::{load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint, CHECKPOINT_MAGIC};
pub use descriptor::{
    paper_scale_descriptor, param_count, toy_descriptor, Architecture, LayerDescriptor, LayerKind,
    ModuleDescriptor, ModuleRole,
};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::autodiff::{NodeId, ParamKey, Tape};
use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum Frozen {
    #[default]
    None,
    Backbone,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvStage {
    pub out_channels: usize,
    pub stride: usize,
}

/// Shape of the trainable toy network. Every stage is a 3×3 convolution with
/// zero padding 1 followed by a scalar-slope PReLU.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ToyBackboneConfig {
    pub input_size: usize,
    pub input_channels: usize,
    pub stages: Vec<ConvStage>,
    pub recognition_dim: usize,
    pub mask_dim: usize,
}

impl Default for ToyBackboneConfig {
    fn default() -> Self {
        ToyBackboneConfig {
            input_size: 32,
            input_channels: 1,
            stages: [(8, 2), (16, 2), (32, 2)]
                .iter()
                .map(|&(out_channels, stride)| ConvStage {
                    out_channels,
                    stride,
                })
                .collect(),
            recognition_dim: 64,
            mask_dim: 8,
        }
    }
}

pub const KERNEL: usize = 3;
const PADDING: usize = 1;
const PRELU_INIT: f64 = 0.25;

impl ToyBackboneConfig {
    /// Side length of the final feature map, or 0 if a stage collapses it.
    pub fn final_size(&self) -> usize {
        let mut size = self.input_size;
        for s in &self.stages {
            if s.stride == 0 || size + 2 * PADDING < KERNEL {
                return 0;
            }
            size = (size + 2 * PADDING - KERNEL) / s.stride + 1;
        }
        size
    }

    pub fn final_channels(&self) -> usize {
        self.stages.last().map_or(self.input_channels, |s| s.out_channels)
    }

    pub fn flat_features(&self) -> usize {
        let s = self.final_size();
        self.final_channels() * s * s
    }

    pub fn validate(&self) -> Result<()> {
        if self.recognition_dim < 8 {
            return Err(Error::config("recognition_dim", "must be at least 8"));
        }
        if self.mask_dim < 2 {
            return Err(Error::config("mask_dim", "must be at least 2"));
        }
        if self.input_channels == 0 || self.stages.iter().any(|s| s.out_channels == 0) {
            return Err(Error::config("stages", "channel counts must be positive"));
        }
        if self.flat_features() == 0 {
            return Err(Error::config(
                "stages",
                "final feature map flattens to zero length",
            ));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParamGroup {
    Backbone,
    Head,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Param<T> {
    pub name: String,
    pub group: ParamGroup,
    pub value: Tensor<T>,
}

/// Named parameters in checkpoint order. A parameter's index is its tape key.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamStore<T> {
    params: Vec<Param<T>>,
}

impl<T: Real> ParamStore<T> {
    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &Param<T>> {
        self.params.iter()
    }

    pub fn get(&self, key: ParamKey) -> &Param<T> {
        &self.params[key]
    }

    pub fn value_mut(&mut self, key: ParamKey) -> &mut Tensor<T> {
        &mut self.params[key].value
    }

    pub fn key(&self, name: &str) -> Option<ParamKey> {
        self.params.iter().position(|p| p.name == name)
    }

    fn push(&mut self, name: impl Into<String>, group: ParamGroup, value: Tensor<T>) -> ParamKey {
        self.params.push(Param {
            name: name.into(),
            group,
            value,
        });
        self.params.len() - 1
    }
}

/// Node ids of one forward pass.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct DualHeadNodes {
    pub recognition: NodeId,
    pub mask_embedding: NodeId,
    pub mask_logits: NodeId,
}

/// Tape nodes of every parameter, indexed by key.
#[derive(Clone, Debug)]
pub struct Registered {
    pub nodes: Vec<NodeId>,
}

impl Registered {
    pub fn node(&self, key: ParamKey) -> NodeId {
        self.nodes[key]
    }
}

/// Output of one image.
#[derive(Clone, Debug, PartialEq)]
pub struct DualHeadOutput<T> {
    pub recognition_embedding: Vec<T>,
    pub mask_embedding: Vec<T>,
    pub mask_logits: [T; 2],
}

/// Batched outputs, row `i` belonging to image `i`.
#[derive(Clone, Debug, PartialEq)]
pub struct DualHeadBatch<T> {
    pub recognition: Tensor<T>,
    pub mask_embedding: Tensor<T>,
    pub mask_logits: Tensor<T>,
}

impl<T: Real> DualHeadBatch<T> {
    pub fn len(&self) -> usize {
        self.recognition.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn get(&self, i: usize) -> DualHeadOutput<T> {
        let l = self.mask_logits.row(i);
        DualHeadOutput {
            recognition_embedding: self.recognition.row(i).to_vec(),
            mask_embedding: self.mask_embedding.row(i).to_vec(),
            mask_logits: [l[0], l[1]],
        }
    }
}

/// Keys of the fixed head parameters.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct HeadKeys {
    pub recognition: ParamKey,
    pub mask: ParamKey,
    pub mask_fc_weight: ParamKey,
    pub mask_fc_bias: ParamKey,
    pub arcface: ParamKey,
}

/// The toy dual-head network: conv/PReLU backbone, two parallel bias-free
/// embedding layers, a 2-way mask classifier, and the ArcFace class weights.
#[derive(Clone, Debug, PartialEq)]
pub struct DualHeadNet<T> {
    config: ToyBackboneConfig,
    num_classes: usize,
    seed: u64,
    frozen: Frozen,
    store: ParamStore<T>,
    /// `(conv weight, prelu slope)` per stage.
    stages: Vec<(ParamKey, ParamKey)>,
    heads: HeadKeys,
}

impl<T: Real> DualHeadNet<T> {
    pub fn new(config: ToyBackboneConfig, num_classes: usize, seed: u64) -> Result<Self> {
        config.validate()?;
        if num_classes < 2 {
            return Err(Error::config("num_classes", "must be at least 2"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut normal = |shape: Vec<usize>, std: f64| -> Tensor<T> {
            let n: usize = shape.iter().product();
            let dist = Normal::new(0.0, std).expect("positive std");
            let data = (0..n).map(|_| T::of(dist.sample(&mut rng))).collect();
            Tensor::new(shape, data).expect("shape matches data")
        };

        let mut store = ParamStore { params: Vec::new() };
        let mut stages = Vec::new();
        let mut cin = config.input_channels;
        for (i, s) in config.stages.iter().enumerate() {
            let fan_in = (cin * KERNEL * KERNEL) as f64;
            let std = (2.0 / ((1.0 + PRELU_INIT * PRELU_INIT) * fan_in)).sqrt();
            let w = store.push(
                format!("conv{}.weight", i + 1),
                ParamGroup::Backbone,
                normal(vec![s.out_channels, cin, KERNEL, KERNEL], std),
            );
            let a = store.push(
                format!("prelu{}.slope", i + 1),
                ParamGroup::Backbone,
                Tensor::full(vec![1], T::of(PRELU_INIT)),
            );
            stages.push((w, a));
            cin = s.out_channels;
        }
        let flat = config.flat_features();
        let (r, m) = (config.recognition_dim, config.mask_dim);
        let fc_std = (1.0 / flat as f64).sqrt();
        let heads = HeadKeys {
            recognition: store.push("recognition.weight", ParamGroup::Head, normal(vec![flat, r], fc_std)),
            mask: store.push("mask.weight", ParamGroup::Head, normal(vec![flat, m], fc_std)),
            mask_fc_weight: store.push(
                "mask_fc.weight",
                ParamGroup::Head,
                normal(vec![m, 2], (1.0 / m as f64).sqrt()),
            ),
            mask_fc_bias: store.push("mask_fc.bias", ParamGroup::Head, Tensor::zeros(vec![2])),
            arcface: store.push(
                "arcface.weight",
                ParamGroup::Head,
                normal(vec![r, num_classes], (1.0 / r as f64).sqrt()),
            ),
        };
        Ok(DualHeadNet {
            config,
            num_classes,
            seed,
            frozen: Frozen::None,
            store,
            stages,
            heads,
        })
    }

    pub fn config(&self) -> &ToyBackboneConfig {
        &self.config
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn params(&self) -> &ParamStore<T> {
        &self.store
    }

    pub fn params_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.store
    }

    pub fn heads(&self) -> HeadKeys {
        self.heads
    }

    pub fn frozen(&self) -> Frozen {
        self.frozen
    }

    pub fn freeze(mut self, frozen: Frozen) -> Self {
        self.frozen = frozen;
        self
    }

    pub fn set_frozen(&mut self, frozen: Frozen) {
        self.frozen = frozen;
    }

    pub fn is_trainable(&self, key: ParamKey) -> bool {
        !(self.frozen == Frozen::Backbone && self.store.get(key).group == ParamGroup::Backbone)
    }

    pub fn trainable_keys(&self) -> Vec<ParamKey> {
        (0..self.store.len()).filter(|&k| self.is_trainable(k)).collect()
    }

    pub fn param_count(&self) -> u64 {
        self.store.iter().map(|p| p.value.numel() as u64).sum()
    }

    pub fn trainable_param_count(&self) -> u64 {
        self.trainable_keys()
            .iter()
            .map(|&k| self.store.get(k).value.numel() as u64)
            .sum()
    }

    pub fn descriptor(&self) -> Architecture {
        toy_descriptor(&self.config, self.num_classes)
    }

    /// Puts every parameter on the tape; frozen ones become constants.
    pub fn register(&self, tape: &mut Tape<T>) -> Registered {
        let nodes = self
            .store
            .iter()
            .enumerate()
            .map(|(k, p)| {
                if self.is_trainable(k) {
                    tape.param(k, p.value.clone())
                } else {
                    tape.input(p.value.clone())
                }
            })
            .collect();
        Registered { nodes }
    }

    pub fn check_images(&self, images: &Tensor<T>) -> Result<()> {
        let c = &self.config;
        let s = images.shape();
        if s.len() != 4 || s[1] != c.input_channels || s[2] != c.input_size || s[3] != c.input_size {
            return Err(Error::invalid(
                "forward",
                format!(
                    "expected images [N, {}, {}, {}], got {:?}",
                    c.input_channels, c.input_size, c.input_size, s
                ),
            ));
        }
        if let Some(v) = images.data().iter().find(|v| !(v.f64().abs() <= 1.0)) {
            return Err(Error::invalid(
                "forward",
                format!("pixel value {v} outside [-1, 1]"),
            ));
        }
        Ok(())
    }

    /// Records one forward pass over `images` ([N, C, H, W]) on `tape`.
    pub fn forward_nodes(&self, tape: &mut Tape<T>, reg: &Registered, images: NodeId) -> Result<DualHeadNodes> {
        let mut h = images;
        for (s, &(w, a)) in self.config.stages.iter().zip(&self.stages) {
            h = tape.conv2d(h, reg.node(w), s.stride, PADDING)?;
            h = tape.prelu(h, reg.node(a))?;
        }
        let flat = tape.flatten(h)?;
        let recognition = tape.matmul(flat, reg.node(self.heads.recognition))?;
        let mask_embedding = tape.matmul(flat, reg.node(self.heads.mask))?;
        let logits = tape.matmul(mask_embedding, reg.node(self.heads.mask_fc_weight))?;
        let mask_logits = tape.add(logits, reg.node(self.heads.mask_fc_bias))?;
        Ok(DualHeadNodes {
            recognition,
            mask_embedding,
            mask_logits,
        })
    }

    /// Inference forward pass, chunked to bound tape memory.
    pub fn forward(&self, images: &Tensor<T>) -> Result<DualHeadBatch<T>> {
        self.check_images(images)?;
        const CHUNK: usize = 128;
        let n = images.shape()[0];
        if n == 0 {
            return Err(Error::invalid("forward", "empty image batch"));
        }
        let per = images.numel() / n.max(1);
        let mut rec = Vec::new();
        let mut emb = Vec::new();
        let mut logits = Vec::new();
        for start in (0..n).step_by(CHUNK) {
            let end = (start + CHUNK).min(n);
            let mut shape = images.shape().to_vec();
            shape[0] = end - start;
            let chunk = Tensor::new(shape, images.data()[start * per..end * per].to_vec())?;
            let mut tape = Tape::new();
            let reg = self.register_constants(&mut tape);
            let x = tape.input(chunk);
            let out = self.forward_nodes(&mut tape, &reg, x)?;
            rec.push(tape.value(out.recognition).clone());
            emb.push(tape.value(out.mask_embedding).clone());
            logits.push(tape.value(out.mask_logits).clone());
        }
        Ok(DualHeadBatch {
            recognition: Tensor::stack_rows(&rec)?,
            mask_embedding: Tensor::stack_rows(&emb)?,
            mask_logits: Tensor::stack_rows(&logits)?,
        })
    }

    /// Registers every parameter as a constant, for inference tapes.
    pub fn register_constants(&self, tape: &mut Tape<T>) -> Registered {
        Registered {
            nodes: self.store.iter().map(|p| tape.input(p.value.clone())).collect(),
        }
    }

    /// Replaces every parameter value, keeping names and shapes.
    pub fn load_values(&mut self, values: Vec<Tensor<T>>) -> Result<()> {
        if values.len() != self.store.len() {
            return Err(Error::Checkpoint(format!(
                "expected {} parameters, got {}",
                self.store.len(),
                values.len()
            )));
        }
        for (p, v) in self.store.params.iter_mut().zip(values) {
            if p.value.shape() != v.shape() {
                return Err(Error::Checkpoint(format!(
                    "{}: expected shape {:?}, got {:?}",
                    p.name,
                    p.value.shape(),
                    v.shape()
                )));
            }
            p.value = v;
        }
        Ok(())
    }

    pub fn cast<U: Real>(&self) -> DualHeadNet<U> {
        DualHeadNet {
            config: self.config.clone(),
            num_classes: self.num_classes,
            seed: self.seed,
            frozen: self.frozen,
            store: ParamStore {
                params: self
                    .store
                    .iter()
                    .map(|p| Param {
                        name: p.name.clone(),
                        group: p.group,
                        value: p.value.cast(),
                    })
                    .collect(),
            },
            stages: self.stages.clone(),
            heads: self.heads,
        }
    }
}

#[cfg(test)]
mod tests;
