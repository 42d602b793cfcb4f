//! The full fine-tunable model: frozen tokenizer and encoder, GFT adapters
//! and a task head sharing one parameter store.

use alloc::vec;
use alloc::vec::Vec;

use crate::backbone::{encode, Backbone, EmbeddingMatrix, Hooks, Layout};
use crate::config::{ModelConfig, TaskConfig};
use crate::error::{argument, contract, Result};
use crate::gft::{edgeconv_pyramid, graph_nodes, inject_prompts, GftWeights, InteractionHook, PyramidFeatures};
use crate::heads::{argmax_rows, pool_tokens, ClassifierHead, Mode, SegmentationHead};
use crate::layers::{Builder, Init};
use crate::numcore::{Graph, ParamId, ParamStore, Real, Tensor, Var};
use crate::pointops::{tokenize, PointCloud, TokenizedCloud, TokenizerWeights};

#[derive(Clone, Debug, PartialEq)]
pub enum Head {
    Classifier(ClassifierHead),
    Segmentation(SegmentationHead),
}

#[derive(Clone, Debug, PartialEq)]
pub struct GftModel<T: Real> {
    pub config: ModelConfig,
    pub store: ParamStore<T>,
    pub tokenizer: TokenizerWeights,
    pub cls_token: ParamId,
    pub backbone: Backbone,
    pub gft: GftWeights,
    pub head: Head,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ForwardOptions {
    pub mode: Mode,
    /// Apply the interaction blocks (off reproduces prompt-only tuning).
    pub interactions: bool,
    /// 1-based encoder layers whose attention weights are returned.
    pub attention_layers: Vec<usize>,
}

impl Default for ForwardOptions {
    fn default() -> Self {
        ForwardOptions {
            mode: Mode::Eval,
            interactions: true,
            attention_layers: Vec::new(),
        }
    }
}

impl ForwardOptions {
    pub fn train(seed: u64) -> Self {
        ForwardOptions {
            mode: Mode::Train { seed },
            ..Self::default()
        }
    }
}

pub struct ForwardOutput<T> {
    /// Raw `E_F`.
    pub embedding: EmbeddingMatrix,
    /// `1×C` logits for classification, `N×C` for segmentation.
    pub logits: Var,
    pub tokens: TokenizedCloud,
    pub pyramid: Option<PyramidFeatures>,
    pub attention: Vec<(usize, Tensor<T>)>,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Prediction {
    Class(usize),
    Parts(Vec<usize>),
}

impl<T: Real> GftModel<T> {
    /// Seeded construction. The encoder, tokenizer and CLS token draw from
    /// `seed`, the adapters from `seed + 1` and the head from `seed + 2`, so
    /// two configs differing only in their adapters share backbone and head
    /// initialization.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let bc = &config.backbone;
        let mut store = ParamStore::new();
        let mut b = Builder::new(&mut store, seed);
        let tokenizer = TokenizerWeights::build(&mut b, bc, config.gft.unlock_tokenizer)?;
        let cls_token = b.param("cls_token", &[1, bc.dim], Init::Normal(bc.init_std), bc.dim, !config.gft.train_cls_token)?;
        let backbone = Backbone::build(&mut b, bc)?;
        let mut b = Builder::new(&mut store, seed.wrapping_add(1));
        let gft = GftWeights::build(&mut b, &config.gft, bc.dim, bc.init_std)?;
        let mut b = Builder::new(&mut store, seed.wrapping_add(2));
        let head = match &config.task {
            TaskConfig::Classification(c) => Head::Classifier(ClassifierHead::build(&mut b, c, bc.dim, config.gft.prompt_len > 0)?),
            TaskConfig::Segmentation(s) => Head::Segmentation(SegmentationHead::build(&mut b, s, bc.dim)?),
        };
        Ok(GftModel {
            config,
            store,
            tokenizer,
            cls_token,
            backbone,
            gft,
            head,
        })
    }

    /// Swaps in parameters from another store with the same names, shapes
    /// and order (e.g. one read from a checkpoint). Frozen flags are taken
    /// from `other`.
    pub fn load_store(&mut self, other: ParamStore<T>) -> Result<()> {
        if other.len() != self.store.len() {
            return Err(contract!("checkpoint has {} tensors, model has {}", other.len(), self.store.len()));
        }
        for ((_, a), (_, b)) in self.store.iter().zip(other.iter()) {
            if a.name != b.name || a.tensor.shape() != b.tensor.shape() {
                return Err(contract!(
                    "checkpoint tensor {} {:?} does not match model tensor {} {:?}",
                    b.name,
                    b.tensor.shape(),
                    a.name,
                    a.tensor.shape()
                ));
            }
        }
        self.store = other;
        Ok(())
    }

    pub fn graph(&self) -> Graph<'_, T> {
        Graph::new(&self.store)
    }

    /// Tokenize, inject prompts, build the pyramid and run the encoder with
    /// interaction hooks. Returns the tape nodes for every stage.
    pub fn forward<'p>(&'p self, g: &mut Graph<'p, T>, cloud: &PointCloud, opts: &ForwardOptions) -> Result<ForwardOutput<T>> {
        let bc = &self.config.backbone;
        let (e0, tokens) = tokenize(g, cloud, bc, &self.tokenizer, self.cls_token)?;
        let e0 = inject_prompts(g, e0, &self.gft.prompts)?;
        let pyramid = match &self.gft.edgeconv {
            Some(w) => {
                let nodes = graph_nodes(g, e0)?;
                Some(edgeconv_pyramid(g, nodes, w)?)
            }
            None => None,
        };
        let before = if opts.interactions && pyramid.is_some() {
            self.gft.interaction_layers()
        } else {
            Vec::new()
        };
        let taps = match &self.head {
            Head::Segmentation(s) => s.cfg.taps.clone(),
            Head::Classifier(_) => Vec::new(),
        };
        let mut hook = pyramid.as_ref().map(|p| InteractionHook {
            pyramid: p.fused,
            blocks: &self.gft.interactions,
            eps: bc.norm_eps,
        });
        let hooks = Hooks {
            before: &before,
            taps: &taps,
            attention: &opts.attention_layers,
            hook: hook.as_mut().map(|h| h as &mut dyn crate::backbone::LayerHook<'p, T>),
        };
        let out = encode(g, e0, &self.backbone, hooks)?;
        let logits = match &self.head {
            Head::Classifier(h) => {
                let normed = self.backbone.norm.forward(g, out.output.data, bc.norm_eps)?;
                let pooled = pool_tokens(g, normed, &out.output.layout, h.pooling)?;
                h.classify(g, pooled, opts.mode)?
            }
            Head::Segmentation(h) => {
                let mut tap_vars = Vec::with_capacity(taps.len());
                for t in &taps {
                    let v = out.taps.iter().find(|(i, _)| i == t).map(|(_, v)| *v);
                    tap_vars.push(v.ok_or_else(|| contract!("tap {t} missing from encoder output"))?);
                }
                h.segment(g, &tap_vars, &out.output, &cloud.points, &tokens.centers, bc.norm_eps)?
            }
        };
        Ok(ForwardOutput {
            embedding: out.output,
            logits,
            tokens,
            pyramid,
            attention: out.attention,
        })
    }

    /// Cross-entropy against the object label, or mean point-wise NLL
    /// against the part labels.
    pub fn loss(&self, g: &mut Graph<'_, T>, out: &ForwardOutput<T>, cloud: &PointCloud) -> Result<Var> {
        match &self.head {
            Head::Classifier(_) => {
                let label = cloud.object_label.ok_or_else(|| argument!("cloud has no object label"))?;
                g.cross_entropy(out.logits, &[label])
            }
            Head::Segmentation(_) => {
                let labels = cloud.point_labels.as_ref().ok_or_else(|| argument!("cloud has no point labels"))?;
                let logp = g.log_softmax(out.logits);
                g.nll(logp, labels)
            }
        }
    }

    pub fn predict(&self, cloud: &PointCloud) -> Result<Prediction> {
        let mut g = self.graph();
        let out = self.forward(&mut g, cloud, &ForwardOptions::default())?;
        let arg = argmax_rows(g.value(out.logits));
        Ok(match self.head {
            Head::Classifier(_) => Prediction::Class(arg[0]),
            Head::Segmentation(_) => Prediction::Parts(arg),
        })
    }
}

/// Per-patch attention between CLS and the patch tokens.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionMap {
    pub weights: Vec<f64>,
    /// Mass of the CLS row that went to CLS and prompt keys; `None` in
    /// reverse mode where rows are per patch.
    pub excluded: Option<f64>,
}

/// Head-averaged attention from an `H×R×R` tensor. By default CLS is the
/// query and patch tokens are the keys; `reverse` instead reads, for each
/// patch query, its weight on the CLS key.
pub fn cls_attention_map<T: Real>(attn: &Tensor<T>, layout: &Layout, reverse: bool) -> Result<AttentionMap> {
    let shape = attn.shape();
    let r = layout.rows();
    if shape.len() != 3 || shape[1] != r || shape[2] != r {
        return Err(contract!("attention shape {shape:?} does not match {r} tokens"));
    }
    let heads = shape[0];
    let data = attn.data();
    let at = |h: usize, q: usize, k: usize| data[(h * r + q) * r + k].as_f64();
    let mut weights = vec![0.0; layout.patches];
    for (i, w) in weights.iter_mut().enumerate() {
        let p = layout.patch_start() + i;
        let s: f64 = (0..heads).map(|h| if reverse { at(h, p, 0) } else { at(h, 0, p) }).sum();
        *w = s / heads as f64;
    }
    let excluded = (!reverse).then(|| {
        (0..heads)
            .map(|h| (0..layout.patch_start()).map(|k| at(h, 0, k)).sum::<f64>())
            .sum::<f64>()
            / heads as f64
    });
    Ok(AttentionMap { weights, excluded })
}
