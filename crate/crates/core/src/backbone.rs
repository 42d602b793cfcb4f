//! The frozen pre-norm transformer encoder.

use alloc::format;
use alloc::vec::Vec;

use crate::config::BackboneConfig;
use crate::error::{argument, Result};
use crate::layers::{multi_head_attention, Builder, Init, LayerNorm, Linear};
use crate::numcore::{Graph, Real, Tensor, Var};

/// Row layout `[CLS | prompts | patches]` of an embedding matrix.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Layout {
    pub prompts: usize,
    pub patches: usize,
    pub prompts_injected: bool,
}

impl Layout {
    pub fn rows(&self) -> usize {
        1 + self.prompts + self.patches
    }

    pub fn prompt_start(&self) -> usize {
        1
    }

    pub fn patch_start(&self) -> usize {
        1 + self.prompts
    }
}

/// Token sequence on the tape together with its layout.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct EmbeddingMatrix {
    pub data: Var,
    pub layout: Layout,
}

/// One pre-norm block: `x + Attn(LN(x))`, then `+ MLP(LN(·))`.
#[derive(Clone, Debug, PartialEq)]
pub struct EncoderLayerWeights {
    pub norm1: LayerNorm,
    pub qkv: Linear,
    pub proj: Linear,
    pub norm2: LayerNorm,
    pub fc1: Linear,
    pub fc2: Linear,
}

impl EncoderLayerWeights {
    pub fn build<T: Real>(
        b: &mut Builder<'_, T>,
        prefix: &str,
        dim: usize,
        mlp_ratio: usize,
        init: Init,
        frozen: bool,
    ) -> Result<Self> {
        let hidden = dim * mlp_ratio;
        Ok(EncoderLayerWeights {
            norm1: b.layer_norm(&format!("{prefix}.norm1"), dim, frozen)?,
            qkv: b.linear(&format!("{prefix}.attn.qkv"), dim, 3 * dim, false, init, frozen)?,
            proj: b.linear(&format!("{prefix}.attn.proj"), dim, dim, true, init, frozen)?,
            norm2: b.layer_norm(&format!("{prefix}.norm2"), dim, frozen)?,
            fc1: b.linear(&format!("{prefix}.mlp.fc1"), dim, hidden, true, init, frozen)?,
            fc2: b.linear(&format!("{prefix}.mlp.fc2"), hidden, dim, true, init, frozen)?,
        })
    }
}

/// Applies one encoder block. With `want_attention` also returns the
/// `H×R×R` attention weights (detached copy).
pub fn self_attention_layer<T: Real>(
    g: &mut Graph<'_, T>,
    x: Var,
    w: &EncoderLayerWeights,
    heads: usize,
    eps: f64,
    want_attention: bool,
) -> Result<(Var, Option<Tensor<T>>)> {
    let dim = g.shape(x)[1];
    let h = w.norm1.forward(g, x, eps)?;
    let qkv = w.qkv.forward(g, h)?;
    let q = g.slice_cols(qkv, 0, dim)?;
    let k = g.slice_cols(qkv, dim, dim)?;
    let v = g.slice_cols(qkv, 2 * dim, dim)?;
    let (att, weights) = multi_head_attention(g, q, k, v, heads)?;
    let att = w.proj.forward(g, att)?;
    let x = g.add(x, att)?;
    let h = w.norm2.forward(g, x, eps)?;
    let h = w.fc1.forward(g, h)?;
    let h = g.gelu(h);
    let h = w.fc2.forward(g, h)?;
    let out = g.add(x, h)?;
    let maps = if want_attention {
        let rows = g.shape(x)[0];
        let mut data = Vec::with_capacity(heads * rows * rows);
        for &wv in &weights {
            data.extend_from_slice(g.value(wv).data());
        }
        Some(Tensor::new(alloc::vec![heads, rows, rows], data)?)
    } else {
        None
    };
    Ok((out, maps))
}

/// Encoder weights: `F` frozen blocks plus the frozen output norm that the
/// task heads read through.
#[derive(Clone, Debug, PartialEq)]
pub struct Backbone {
    pub layers: Vec<EncoderLayerWeights>,
    pub norm: LayerNorm,
    pub heads: usize,
    pub eps: f64,
}

impl Backbone {
    pub fn build<T: Real>(b: &mut Builder<'_, T>, cfg: &BackboneConfig) -> Result<Self> {
        let layers = (0..cfg.depth)
            .map(|i| {
                EncoderLayerWeights::build(
                    b,
                    &format!("encoder.blocks.{i}"),
                    cfg.dim,
                    cfg.mlp_ratio,
                    Init::Normal(cfg.init_std),
                    true,
                )
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Backbone {
            layers,
            norm: b.layer_norm("encoder.norm", cfg.dim, true)?,
            heads: cfg.heads,
            eps: cfg.norm_eps,
        })
    }

    pub fn depth(&self) -> usize {
        self.layers.len()
    }
}

/// Rewrites `E_{i-1}` before layer `i` runs.
pub trait LayerHook<'p, T: Real> {
    fn before_layer(&mut self, g: &mut Graph<'p, T>, layer: usize, e: Var) -> Result<Var>;
}

/// Which layers get a hook call, an output tap, or an attention map.
/// All indices are 1-based layer numbers.
pub struct Hooks<'a, 'p, T: Real> {
    pub before: &'a [usize],
    pub taps: &'a [usize],
    pub attention: &'a [usize],
    pub hook: Option<&'a mut dyn LayerHook<'p, T>>,
}

impl<'p, T: Real> Default for Hooks<'_, 'p, T> {
    fn default() -> Self {
        Hooks {
            before: &[],
            taps: &[],
            attention: &[],
            hook: None,
        }
    }
}

pub struct EncodeOutput<T> {
    pub output: EmbeddingMatrix,
    /// `(i, E_i)` for every requested tap, in layer order.
    pub taps: Vec<(usize, Var)>,
    /// `(i, H×R×R weights)` for every requested attention layer.
    pub attention: Vec<(usize, Tensor<T>)>,
}

/// Runs the block stack, calling the hook before each listed layer.
pub fn encode<'p, T: Real>(
    g: &mut Graph<'p, T>,
    e0: EmbeddingMatrix,
    backbone: &Backbone,
    hooks: Hooks<'_, 'p, T>,
) -> Result<EncodeOutput<T>> {
    let depth = backbone.depth();
    for (what, list) in [("hook", hooks.before), ("tap", hooks.taps), ("attention", hooks.attention)] {
        if let Some(&bad) = list.iter().find(|&&i| i == 0 || i > depth) {
            return Err(argument!("{what} layer {bad} outside 1..={depth}"));
        }
    }
    let Hooks {
        before,
        taps,
        attention,
        mut hook,
    } = hooks;
    let mut x = e0.data;
    let mut out_taps = Vec::new();
    let mut maps = Vec::new();
    for (i, layer) in backbone.layers.iter().enumerate() {
        let idx = i + 1;
        if before.contains(&idx) {
            if let Some(h) = hook.as_deref_mut() {
                x = h.before_layer(g, idx, x)?;
            }
        }
        let (y, map) = self_attention_layer(g, x, layer, backbone.heads, backbone.eps, attention.contains(&idx))?;
        x = y;
        if let Some(m) = map {
            maps.push((idx, m));
        }
        if taps.contains(&idx) {
            out_taps.push((idx, x));
        }
    }
    Ok(EncodeOutput {
        output: EmbeddingMatrix {
            data: x,
            layout: e0.layout,
        },
        taps: out_taps,
        attention: maps,
    })
}
