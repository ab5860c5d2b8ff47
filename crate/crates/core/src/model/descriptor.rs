//! Shape-only architecture descriptors for exact parameter accounting.

use super::{Frozen, ToyBackboneConfig};

/// Parameter-bearing layer shapes. Running statistics of batch-norm layers are
/// buffers, not parameters, and are not counted.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum LayerKind {
    Conv2d {
        in_channels: u64,
        out_channels: u64,
        kernel_h: u64,
        kernel_w: u64,
        bias: bool,
    },
    FullyConnected {
        in_features: u64,
        out_features: u64,
        bias: bool,
    },
    BatchNorm {
        channels: u64,
        affine: bool,
    },
    PreluPerChannel {
        channels: u64,
    },
    ArcFaceWeight {
        embed_dim: u64,
        num_classes: u64,
    },
    Bias {
        out: u64,
    },
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LayerDescriptor {
    pub name: String,
    pub kind: LayerKind,
}

impl LayerDescriptor {
    pub fn new(name: impl Into<String>, kind: LayerKind) -> Self {
        LayerDescriptor {
            name: name.into(),
            kind,
        }
    }

    pub fn param_count(&self) -> u64 {
        match self.kind {
            LayerKind::Conv2d {
                in_channels,
                out_channels,
                kernel_h,
                kernel_w,
                bias,
            } => out_channels * in_channels * kernel_h * kernel_w + if bias { out_channels } else { 0 },
            LayerKind::FullyConnected {
                in_features,
                out_features,
                bias,
            } => out_features * in_features + if bias { out_features } else { 0 },
            LayerKind::BatchNorm { channels, affine } => {
                if affine {
                    2 * channels
                } else {
                    0
                }
            }
            LayerKind::PreluPerChannel { channels } => channels,
            LayerKind::ArcFaceWeight {
                embed_dim,
                num_classes,
            } => embed_dim * num_classes,
            LayerKind::Bias { out } => out,
        }
    }
}

/// Sum of per-layer parameter counts.
pub fn param_count(layers: &[LayerDescriptor]) -> u64 {
    layers.iter().map(LayerDescriptor::param_count).sum()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ModuleRole {
    Backbone,
    RecognitionEmbedding,
    MaskEmbedding,
    ArcFace,
    MaskClassifier,
}

impl ModuleRole {
    pub fn label(self) -> &'static str {
        match self {
            ModuleRole::Backbone => "Backbone w/o embedding layer",
            ModuleRole::RecognitionEmbedding => "Face recognition embedding layer",
            ModuleRole::MaskEmbedding => "Mask detection embedding layer",
            ModuleRole::ArcFace => "ArcFace layer",
            ModuleRole::MaskClassifier => "Mask detection fully-connected layer",
        }
    }

    /// Whether the module is evaluated when computing verification embeddings.
    pub fn used_at_inference(self) -> bool {
        matches!(self, ModuleRole::Backbone | ModuleRole::RecognitionEmbedding)
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ModuleDescriptor {
    pub role: ModuleRole,
    pub layers: Vec<LayerDescriptor>,
}

impl ModuleDescriptor {
    pub fn param_count(&self) -> u64 {
        param_count(&self.layers)
    }
}

/// A whole network as an ordered list of modules.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Architecture {
    pub name: String,
    pub modules: Vec<ModuleDescriptor>,
}

impl Architecture {
    pub fn module(&self, role: ModuleRole) -> Option<&ModuleDescriptor> {
        self.modules.iter().find(|m| m.role == role)
    }

    pub fn count(&self, role: ModuleRole) -> u64 {
        self.module(role).map_or(0, ModuleDescriptor::param_count)
    }

    pub fn layers(&self) -> Vec<LayerDescriptor> {
        self.modules.iter().flat_map(|m| m.layers.clone()).collect()
    }

    /// Parameters updated during training.
    pub fn trainable(&self, frozen: Frozen) -> u64 {
        self.modules
            .iter()
            .filter(|m| !(frozen == Frozen::Backbone && m.role == ModuleRole::Backbone))
            .map(ModuleDescriptor::param_count)
            .sum()
    }

    pub fn inference(&self) -> u64 {
        self.modules
            .iter()
            .filter(|m| m.role.used_at_inference())
            .map(ModuleDescriptor::param_count)
            .sum()
    }
}

fn conv(name: String, cin: u64, cout: u64, k: u64) -> LayerDescriptor {
    LayerDescriptor::new(
        name,
        LayerKind::Conv2d {
            in_channels: cin,
            out_channels: cout,
            kernel_h: k,
            kernel_w: k,
            bias: false,
        },
    )
}

fn bn(name: String, channels: u64) -> LayerDescriptor {
    LayerDescriptor::new(
        name,
        LayerKind::BatchNorm {
            channels,
            affine: true,
        },
    )
}

/// Number of identities in the large-scale training set, as implied by the
/// 512 × 85,742 ArcFace weight matrix.
pub const PAPER_NUM_CLASSES: u64 = 85_742;
pub const PAPER_RECOGNITION_DIM: u64 = 512;
pub const PAPER_MASK_DIM: u64 = 32;

/// The 100-layer improved-residual backbone at 112×112 input, followed by the
/// two embedding heads, the ArcFace weights and the 2-way mask classifier.
///
/// Backbone layout: 3×3 stem (64 channels) + BN + per-channel PReLU; four
/// stages of `[3, 13, 30, 3]` units with widths `[64, 128, 256, 512]`, each
/// unit `BN → conv3×3 → BN → PReLU → conv3×3(stride) → BN` with a 1×1 strided
/// projection + BN on the first unit of every stage; a final BN over the
/// 512×7×7 map. Embedding heads are bias-free FC layers over the flattened
/// 25,088 features followed by an affine BN.
pub fn paper_scale_descriptor() -> Architecture {
    let mut backbone = vec![
        conv("stem.conv".into(), 3, 64, 3),
        bn("stem.bn".into(), 64),
        LayerDescriptor::new("stem.prelu", LayerKind::PreluPerChannel { channels: 64 }),
    ];
    let mut inplanes = 64;
    for (stage, (&planes, &units)) in [64u64, 128, 256, 512].iter().zip(&[3, 13, 30, 3]).enumerate() {
        for unit in 0..units {
            let p = format!("layer{}.{}", stage + 1, unit);
            let cin = if unit == 0 { inplanes } else { planes };
            backbone.push(bn(format!("{p}.bn1"), cin));
            backbone.push(conv(format!("{p}.conv1"), cin, planes, 3));
            backbone.push(bn(format!("{p}.bn2"), planes));
            backbone.push(LayerDescriptor::new(
                format!("{p}.prelu"),
                LayerKind::PreluPerChannel { channels: planes },
            ));
            backbone.push(conv(format!("{p}.conv2"), planes, planes, 3));
            backbone.push(bn(format!("{p}.bn3"), planes));
            if unit == 0 {
                backbone.push(conv(format!("{p}.downsample.conv"), cin, planes, 1));
                backbone.push(bn(format!("{p}.downsample.bn"), planes));
            }
        }
        inplanes = planes;
    }
    backbone.push(bn("final.bn".into(), 512));

    let flat = 512 * 7 * 7;
    let head = |name: &str, out: u64| {
        vec![
            LayerDescriptor::new(
                format!("{name}.fc"),
                LayerKind::FullyConnected {
                    in_features: flat,
                    out_features: out,
                    bias: false,
                },
            ),
            bn(format!("{name}.bn"), out),
        ]
    };

    Architecture {
        name: "paper-scale ResNet-100".into(),
        modules: vec![
            ModuleDescriptor {
                role: ModuleRole::Backbone,
                layers: backbone,
            },
            ModuleDescriptor {
                role: ModuleRole::RecognitionEmbedding,
                layers: head("recognition", PAPER_RECOGNITION_DIM),
            },
            ModuleDescriptor {
                role: ModuleRole::MaskEmbedding,
                layers: head("mask", PAPER_MASK_DIM),
            },
            ModuleDescriptor {
                role: ModuleRole::ArcFace,
                layers: vec![LayerDescriptor::new(
                    "arcface.weight",
                    LayerKind::ArcFaceWeight {
                        embed_dim: PAPER_RECOGNITION_DIM,
                        num_classes: PAPER_NUM_CLASSES,
                    },
                )],
            },
            ModuleDescriptor {
                role: ModuleRole::MaskClassifier,
                // Two outputs with bias: 32·2 + 2 = 66.
                layers: vec![LayerDescriptor::new(
                    "mask_fc",
                    LayerKind::FullyConnected {
                        in_features: PAPER_MASK_DIM,
                        out_features: 2,
                        bias: true,
                    },
                )],
            },
        ],
    }
}

/// Descriptor of the trainable toy network, layer for layer.
pub fn toy_descriptor(cfg: &ToyBackboneConfig, num_classes: usize) -> Architecture {
    let mut backbone = Vec::new();
    let mut cin = cfg.input_channels as u64;
    for (i, stage) in cfg.stages.iter().enumerate() {
        backbone.push(conv(format!("conv{}", i + 1), cin, stage.out_channels as u64, 3));
        // One shared slope per layer.
        backbone.push(LayerDescriptor::new(
            format!("prelu{}", i + 1),
            LayerKind::PreluPerChannel { channels: 1 },
        ));
        cin = stage.out_channels as u64;
    }
    let flat = cfg.flat_features() as u64;
    let fc = |name: &str, i: u64, o: u64, bias: bool| {
        LayerDescriptor::new(
            name,
            LayerKind::FullyConnected {
                in_features: i,
                out_features: o,
                bias,
            },
        )
    };
    Architecture {
        name: "toy".into(),
        modules: vec![
            ModuleDescriptor {
                role: ModuleRole::Backbone,
                layers: backbone,
            },
            ModuleDescriptor {
                role: ModuleRole::RecognitionEmbedding,
                layers: vec![fc("recognition", flat, cfg.recognition_dim as u64, false)],
            },
            ModuleDescriptor {
                role: ModuleRole::MaskEmbedding,
                layers: vec![fc("mask", flat, cfg.mask_dim as u64, false)],
            },
            ModuleDescriptor {
                role: ModuleRole::ArcFace,
                layers: vec![LayerDescriptor::new(
                    "arcface",
                    LayerKind::ArcFaceWeight {
                        embed_dim: cfg.recognition_dim as u64,
                        num_classes: num_classes as u64,
                    },
                )],
            },
            ModuleDescriptor {
                role: ModuleRole::MaskClassifier,
                layers: vec![fc("mask_fc", cfg.mask_dim as u64, 2, true)],
            },
        ],
    }
}
