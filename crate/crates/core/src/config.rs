//! Architectural hyperparameters and their validation.

use alloc::vec;
use alloc::vec::Vec;

use crate::error::{config_err, Result};

/// Frozen transformer and tokenizer shape.
#[derive(Clone, Debug, PartialEq)]
pub struct BackboneConfig {
    /// Token width `D`.
    pub dim: usize,
    /// Encoder depth `F`.
    pub depth: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
    /// Number of patches `L` selected by farthest point sampling.
    pub num_patches: usize,
    /// Points per patch (`k_group`).
    pub group_size: usize,
    /// Width of the tokenizer's first pointwise layer.
    pub tokenizer_hidden: usize,
    /// Std of the seeded normal init used for frozen weights.
    pub init_std: f64,
    pub norm_eps: f64,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        BackboneConfig {
            dim: 384,
            depth: 12,
            heads: 6,
            mlp_ratio: 4,
            num_patches: 128,
            group_size: 32,
            tokenizer_hidden: 128,
            init_std: 0.02,
            norm_eps: 1e-5,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EdgeConvConfig {
    /// Neighbours per token in the feature-space KNN graph.
    pub k_graph: usize,
    /// Output width of each EdgeConv layer in the pyramid.
    pub dims: Vec<usize>,
    /// Hidden width of the fusion FFN.
    pub ffn_dim: usize,
    /// Width `d` of the fused pyramid features.
    pub out_dim: usize,
    /// Recompute the KNN graph in each layer's input space (otherwise reuse
    /// the graph built on the initial tokens).
    pub dynamic_graph: bool,
    pub negative_slope: f64,
}

impl Default for EdgeConvConfig {
    fn default() -> Self {
        EdgeConvConfig {
            k_graph: 20,
            dims: vec![64; 4],
            ffn_dim: 256,
            out_dim: 256,
            dynamic_graph: true,
            negative_slope: 0.2,
        }
    }
}

/// The trainable adapter set.
#[derive(Clone, Debug, PartialEq)]
pub struct GftConfig {
    /// Number of learnable prompt tokens `s`.
    pub prompt_len: usize,
    /// `None` disables the graph-feature branch (and therefore interactions).
    pub edgeconv: Option<EdgeConvConfig>,
    pub xattn_dim: usize,
    pub xattn_heads: usize,
    /// 1-based encoder layers that receive a cross-attention interaction
    /// before they run.
    pub interaction_layers: Vec<usize>,
    pub unlock_tokenizer: bool,
    pub train_cls_token: bool,
}

impl Default for GftConfig {
    fn default() -> Self {
        GftConfig {
            prompt_len: 50,
            edgeconv: Some(EdgeConvConfig::default()),
            xattn_dim: 32,
            xattn_heads: 2,
            interaction_layers: vec![1, 4, 7, 10],
            unlock_tokenizer: true,
            train_cls_token: true,
        }
    }
}

impl GftConfig {
    /// Everything off: only the task head trains.
    pub fn disabled() -> Self {
        GftConfig {
            prompt_len: 0,
            edgeconv: None,
            interaction_layers: Vec::new(),
            unlock_tokenizer: false,
            train_cls_token: false,
            ..Self::default()
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Pooling {
    pub cls: bool,
    pub patches: bool,
    pub prompts: bool,
}

impl Default for Pooling {
    fn default() -> Self {
        Pooling {
            cls: true,
            patches: true,
            prompts: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ClassifierConfig {
    pub num_classes: usize,
    pub hidden: Vec<usize>,
    pub dropout: f64,
    pub pooling: Pooling,
}

impl ClassifierConfig {
    pub fn new(num_classes: usize) -> Self {
        ClassifierConfig {
            num_classes,
            hidden: vec![256, 256],
            dropout: 0.5,
            pooling: Pooling::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SegmentationConfig {
    pub num_parts: usize,
    /// 1-based encoder layers whose outputs feed the decoder.
    pub taps: Vec<usize>,
    pub dec_dim: usize,
    pub dec_blocks: usize,
    pub dec_heads: usize,
    pub dec_mlp_ratio: usize,
    pub point_hidden: usize,
    /// Token centres used when interpolating features back to points.
    pub interp_k: usize,
}

impl SegmentationConfig {
    pub fn new(num_parts: usize) -> Self {
        SegmentationConfig {
            num_parts,
            taps: vec![3, 6, 9, 11],
            dec_dim: 384,
            dec_blocks: 2,
            dec_heads: 6,
            dec_mlp_ratio: 2,
            point_hidden: 128,
            interp_k: 3,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum TaskConfig {
    Classification(ClassifierConfig),
    Segmentation(SegmentationConfig),
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub backbone: BackboneConfig,
    pub gft: GftConfig,
    pub task: TaskConfig,
}

impl ModelConfig {
    /// The classification setup used for the reported parameter budget:
    /// D=384, F=12, L=128, 32-point patches, 50 prompts, EdgeConv
    /// [64;4]+FFN 256, cross-attention 32/2 at layers {1,4,7,10}.
    pub fn classification(num_classes: usize) -> Self {
        ModelConfig {
            backbone: BackboneConfig::default(),
            gft: GftConfig::default(),
            task: TaskConfig::Classification(ClassifierConfig::new(num_classes)),
        }
    }

    pub fn segmentation(num_parts: usize) -> Self {
        ModelConfig {
            backbone: BackboneConfig::default(),
            gft: GftConfig::default(),
            task: TaskConfig::Segmentation(SegmentationConfig::new(num_parts)),
        }
    }

    /// Small configuration for finite-difference checks:
    /// D=16, F=4, L=8, 4-point patches, 4 prompts, k_graph=3.
    pub fn tiny(num_classes: usize) -> Self {
        ModelConfig {
            backbone: BackboneConfig {
                dim: 16,
                depth: 4,
                heads: 2,
                mlp_ratio: 2,
                num_patches: 8,
                group_size: 4,
                tokenizer_hidden: 8,
                ..BackboneConfig::default()
            },
            gft: GftConfig {
                prompt_len: 4,
                edgeconv: Some(EdgeConvConfig {
                    k_graph: 3,
                    dims: vec![6, 5],
                    ffn_dim: 8,
                    out_dim: 8,
                    ..EdgeConvConfig::default()
                }),
                xattn_dim: 8,
                xattn_heads: 2,
                interaction_layers: vec![1, 3],
                ..GftConfig::default()
            },
            task: TaskConfig::Classification(ClassifierConfig {
                num_classes,
                hidden: vec![12, 10],
                dropout: 0.5,
                pooling: Pooling::default(),
            }),
        }
    }

    /// Desk-scale classification setup that trains in minutes on one core.
    pub fn desk(num_classes: usize) -> Self {
        ModelConfig {
            backbone: BackboneConfig {
                dim: 96,
                depth: 6,
                heads: 4,
                mlp_ratio: 4,
                num_patches: 32,
                group_size: 16,
                tokenizer_hidden: 64,
                ..BackboneConfig::default()
            },
            gft: GftConfig {
                prompt_len: 8,
                edgeconv: Some(EdgeConvConfig {
                    k_graph: 8,
                    dims: vec![32, 32],
                    ffn_dim: 64,
                    out_dim: 64,
                    ..EdgeConvConfig::default()
                }),
                xattn_dim: 32,
                xattn_heads: 2,
                interaction_layers: vec![1, 4],
                ..GftConfig::default()
            },
            task: TaskConfig::Classification(ClassifierConfig {
                num_classes,
                hidden: vec![64, 64],
                dropout: 0.0,
                pooling: Pooling::default(),
            }),
        }
    }

    /// Same backbone and head with every adapter disabled.
    pub fn linear_probe(&self) -> Self {
        ModelConfig {
            gft: GftConfig {
                xattn_dim: self.gft.xattn_dim,
                xattn_heads: self.gft.xattn_heads,
                ..GftConfig::disabled()
            },
            ..self.clone()
        }
    }

    pub fn num_classes(&self) -> usize {
        match &self.task {
            TaskConfig::Classification(c) => c.num_classes,
            TaskConfig::Segmentation(s) => s.num_parts,
        }
    }

    /// Rows of the embedding matrix: CLS + prompts + patches.
    pub fn num_tokens(&self) -> usize {
        1 + self.gft.prompt_len + self.backbone.num_patches
    }

    pub fn validate(&self) -> Result<()> {
        let b = &self.backbone;
        let g = &self.gft;
        for (name, v) in [
            ("dim", b.dim),
            ("depth", b.depth),
            ("heads", b.heads),
            ("mlp_ratio", b.mlp_ratio),
            ("num_patches", b.num_patches),
            ("group_size", b.group_size),
            ("tokenizer_hidden", b.tokenizer_hidden),
        ] {
            if v == 0 {
                return Err(config_err!("{name} must be positive"));
            }
        }
        if b.dim % b.heads != 0 {
            return Err(config_err!("heads {} must divide dim {}", b.heads, b.dim));
        }
        if let Some(&bad) = g.interaction_layers.iter().find(|&&l| l == 0 || l > b.depth) {
            return Err(config_err!("interaction layer {bad} outside 1..={}", b.depth));
        }
        if !g.interaction_layers.is_empty() {
            let Some(_) = &g.edgeconv else {
                return Err(config_err!("interactions need the EdgeConv branch"));
            };
            if g.xattn_heads == 0 || g.xattn_dim % g.xattn_heads != 0 {
                return Err(config_err!(
                    "xattn heads {} must divide xattn dim {}",
                    g.xattn_heads,
                    g.xattn_dim
                ));
            }
        }
        if let Some(e) = &g.edgeconv {
            if e.dims.is_empty() || e.dims.contains(&0) || e.ffn_dim == 0 || e.out_dim == 0 {
                return Err(config_err!("EdgeConv widths must be positive and non-empty"));
            }
            let nodes = g.prompt_len + b.num_patches;
            if e.k_graph == 0 || e.k_graph >= nodes {
                return Err(config_err!(
                    "EdgeConv k {} must lie in 1..{} (prompts + patches)",
                    e.k_graph,
                    nodes
                ));
            }
        }
        match &self.task {
            TaskConfig::Classification(c) => {
                if c.num_classes == 0 {
                    return Err(config_err!("num_classes must be positive"));
                }
                if !(c.pooling.cls || c.pooling.patches || c.pooling.prompts) {
                    return Err(config_err!("at least one pooling source is required"));
                }
                if c.pooling.prompts && g.prompt_len == 0 && !(c.pooling.cls || c.pooling.patches) {
                    return Err(config_err!("prompt pooling alone needs prompts"));
                }
                if !(0.0..1.0).contains(&c.dropout) {
                    return Err(config_err!("dropout {} outside [0, 1)", c.dropout));
                }
            }
            TaskConfig::Segmentation(s) => {
                if s.num_parts == 0 || s.dec_dim == 0 || s.dec_heads == 0 || s.dec_dim % s.dec_heads != 0 {
                    return Err(config_err!("segmentation decoder widths invalid"));
                }
                if s.taps.is_empty() {
                    return Err(config_err!("segmentation needs at least one tap"));
                }
                if let Some(&bad) = s.taps.iter().find(|&&l| l == 0 || l > b.depth) {
                    return Err(config_err!("tap layer {bad} outside 1..={}", b.depth));
                }
                if s.interp_k == 0 {
                    return Err(config_err!("interp_k must be positive"));
                }
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_validate() {
        for cfg in [
            ModelConfig::classification(15),
            ModelConfig::segmentation(50),
            ModelConfig::tiny(3),
            ModelConfig::desk(4),
            ModelConfig::desk(4).linear_probe(),
        ] {
            cfg.validate().unwrap();
        }
    }

    #[test]
    fn rejects_out_of_range_interaction() {
        let mut cfg = ModelConfig::classification(15);
        cfg.gft.interaction_layers = vec![0];
        assert!(cfg.validate().is_err());
        cfg.gft.interaction_layers = vec![13];
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn interactions_require_edgeconv() {
        let mut cfg = ModelConfig::classification(15);
        cfg.gft.edgeconv = None;
        assert!(cfg.validate().is_err());
        cfg.gft.interaction_layers.clear();
        cfg.validate().unwrap();
    }

    #[test]
    fn default_token_count() {
        assert_eq!(ModelConfig::classification(15).num_tokens(), 179);
    }
}
