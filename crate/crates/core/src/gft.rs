//! Trainable adapters: prompts, the EdgeConv pyramid and the cross-attention
//! interactions that feed graph features into the frozen encoder.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;
use core::fmt;

use crate::backbone::{EmbeddingMatrix, LayerHook, Layout};
use crate::config::{EdgeConvConfig, GftConfig, ModelConfig, TaskConfig};
use crate::error::{argument, contract, Result};
use crate::layers::{multi_head_attention, Builder, Init, LayerNorm, Linear};
use crate::numcore::{Graph, ParamId, ParamStore, Real, Var};
use crate::pointops::knn_rows;

/// Learnable prompt tokens `P ∈ R^{s×D}`. `tokens` is `None` when `s = 0`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PromptSet {
    pub tokens: Option<ParamId>,
    pub len: usize,
}

impl PromptSet {
    pub fn build<T: Real>(b: &mut Builder<'_, T>, len: usize, dim: usize, std: f64) -> Result<Self> {
        let tokens = if len == 0 {
            None
        } else {
            Some(b.param("gft.prompts", &[len, dim], Init::Normal(std), dim, false)?)
        };
        Ok(PromptSet { tokens, len })
    }
}

/// `[cls | patches]` → `[cls | prompts | patches]`.
pub fn inject_prompts<T: Real>(g: &mut Graph<'_, T>, e0: EmbeddingMatrix, p: &PromptSet) -> Result<EmbeddingMatrix> {
    if e0.layout.prompts_injected || e0.layout.prompts != 0 {
        return Err(contract!("prompts already injected"));
    }
    let layout = Layout {
        prompts: p.len,
        patches: e0.layout.patches,
        prompts_injected: true,
    };
    let Some(tokens) = p.tokens else {
        return Ok(EmbeddingMatrix { data: e0.data, layout });
    };
    let cls = g.slice_rows(e0.data, 0, 1)?;
    let patches = g.slice_rows(e0.data, 1, e0.layout.patches)?;
    let prompts = g.param(tokens);
    let data = g.concat_rows(&[cls, prompts, patches])?;
    Ok(EmbeddingMatrix { data, layout })
}

/// Rows of `e` minus CLS: the `(s+L)×D` node set of the token graph.
pub fn graph_nodes<T: Real>(g: &mut Graph<'_, T>, e: EmbeddingMatrix) -> Result<Var> {
    let n = e.layout.prompts + e.layout.patches;
    g.slice_rows(e.data, 1, n)
}

/// Neighbour lists (`n·k`, self excluded) in the feature space of `x`.
pub fn token_graph<T: Real>(g: &Graph<'_, T>, x: Var, k: usize) -> Result<Vec<usize>> {
    let v = g.value(x);
    knn_rows(v.data(), v.cols(), k)
}

/// Explicit `(n·k)×2D` edge features `concat(T_i, T_j − T_i)`, row `i·k + m`
/// holding the `m`-th neighbour of token `i`.
pub fn token_edge_features<T: Real>(g: &mut Graph<'_, T>, x: Var, nbrs: &[usize], k: usize) -> Result<Var> {
    let n = g.shape(x)[0];
    if nbrs.len() != n * k {
        return Err(argument!("{} neighbour indices for {n} tokens with k = {k}", nbrs.len()));
    }
    let centre = g.gather_rows(x, (0..n * k).map(|r| r / k).collect())?;
    let nbr = g.gather_rows(x, nbrs.to_vec())?;
    let diff = g.sub(nbr, centre)?;
    g.concat_cols(&[centre, diff])
}

/// One EdgeConv layer: shared linear on every edge feature, LeakyReLU, max
/// over the `k` neighbours.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct EdgeConvLayer {
    /// `2·d_in × d_out`; the first `d_in` rows act on `T_i`, the rest on
    /// `T_j − T_i`.
    pub linear: Linear,
}

impl EdgeConvLayer {
    /// Materializes every edge feature. Kept as the reference route.
    pub fn forward_explicit<T: Real>(&self, g: &mut Graph<'_, T>, x: Var, nbrs: &[usize], k: usize, slope: f64) -> Result<Var> {
        let edges = token_edge_features(g, x, nbrs, k)?;
        let h = self.linear.forward(g, edges)?;
        let h = g.leaky_relu(h, T::of(slope));
        g.group_max(h, k)
    }

    /// Same value as [`forward_explicit`](Self::forward_explicit) without the
    /// `n·k` edge matrix. With `W = [Wa; Wb]` the pre-activation of edge
    /// `(i, j)` is `T_i(Wa − Wb) + T_j Wb + b`, and since LeakyReLU is
    /// increasing the max over `j` only needs `max_j T_j Wb`.
    pub fn forward<T: Real>(&self, g: &mut Graph<'_, T>, x: Var, nbrs: &[usize], k: usize, slope: f64) -> Result<Var> {
        let n = g.shape(x)[0];
        let d_in = g.shape(x)[1];
        if nbrs.len() != n * k {
            return Err(argument!("{} neighbour indices for {n} tokens with k = {k}", nbrs.len()));
        }
        let w = g.param(self.linear.weight);
        if g.shape(w)[0] != 2 * d_in {
            return Err(crate::error::Error::shape("edgeconv", g.shape(x), g.shape(w)));
        }
        let wa = g.slice_rows(w, 0, d_in)?;
        let wb = g.slice_rows(w, d_in, d_in)?;
        let wd = g.sub(wa, wb)?;
        let own = g.matmul(x, wd)?;
        let proj = g.matmul(x, wb)?;
        let gathered = g.gather_rows(proj, nbrs.to_vec())?;
        let pooled = g.group_max(gathered, k)?;
        let mut h = g.add(own, pooled)?;
        if let Some(b) = self.linear.bias {
            let b = g.param(b);
            h = g.add_row_bias(h, b)?;
        }
        Ok(g.leaky_relu(h, T::of(slope)))
    }
}

/// `r` EdgeConv layers and the fusion FFN `Σd_k → ffn → d`.
#[derive(Clone, Debug, PartialEq)]
pub struct EdgeConvWeights {
    pub layers: Vec<EdgeConvLayer>,
    pub ffn1: Linear,
    pub ffn2: Linear,
    pub cfg: EdgeConvConfig,
}

impl EdgeConvWeights {
    pub fn build<T: Real>(b: &mut Builder<'_, T>, cfg: &EdgeConvConfig, in_dim: usize) -> Result<Self> {
        let mut layers = Vec::with_capacity(cfg.dims.len());
        let mut d = in_dim;
        for (i, &out) in cfg.dims.iter().enumerate() {
            let linear = b.linear(&format!("gft.edgeconv.{i}"), 2 * d, out, true, Init::FanIn, false)?;
            layers.push(EdgeConvLayer { linear });
            d = out;
        }
        let total: usize = cfg.dims.iter().sum();
        Ok(EdgeConvWeights {
            layers,
            ffn1: b.linear("gft.edgeconv.ffn1", total, cfg.ffn_dim, true, Init::FanIn, false)?,
            ffn2: b.linear("gft.edgeconv.ffn2", cfg.ffn_dim, cfg.out_dim, true, Init::FanIn, false)?,
            cfg: cfg.clone(),
        })
    }
}

/// Per-layer outputs `M_k` and the fused `M`, all with `s+L` rows.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PyramidFeatures {
    pub layers: Vec<Var>,
    pub fused: Var,
}

/// Runs the pyramid on the CLS-free token rows.
pub fn edgeconv_pyramid<T: Real>(g: &mut Graph<'_, T>, tokens: Var, w: &EdgeConvWeights) -> Result<PyramidFeatures> {
    let k = w.cfg.k_graph;
    let fixed = if w.cfg.dynamic_graph {
        None
    } else {
        Some(token_graph(g, tokens, k)?)
    };
    let mut x = tokens;
    let mut outs = Vec::with_capacity(w.layers.len());
    for layer in &w.layers {
        let nbrs = match &fixed {
            Some(n) => n.clone(),
            None => token_graph(g, x, k)?,
        };
        x = layer.forward(g, x, &nbrs, k, w.cfg.negative_slope)?;
        outs.push(x);
    }
    let cat = if outs.len() == 1 { outs[0] } else { g.concat_cols(&outs)? };
    let h = w.ffn1.forward(g, cat)?;
    let h = g.gelu(h);
    let fused = w.ffn2.forward(g, h)?;
    Ok(PyramidFeatures { layers: outs, fused })
}

/// `E' = E + Out(MHA(LN(E)Wq, LN(M)Wk, LN(M)Wv))`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct InteractionBlock {
    pub norm_e: LayerNorm,
    pub norm_m: LayerNorm,
    pub query: Linear,
    pub key: Linear,
    pub value: Linear,
    /// Zero-initialized so a fresh block is the identity.
    pub out: Linear,
    pub heads: usize,
}

impl InteractionBlock {
    pub fn build<T: Real>(b: &mut Builder<'_, T>, prefix: &str, dim: usize, m_dim: usize, x_dim: usize, heads: usize) -> Result<Self> {
        Ok(InteractionBlock {
            norm_e: b.layer_norm(&format!("{prefix}.norm_e"), dim, false)?,
            norm_m: b.layer_norm(&format!("{prefix}.norm_m"), m_dim, false)?,
            query: b.linear(&format!("{prefix}.query"), dim, x_dim, true, Init::FanIn, false)?,
            key: b.linear(&format!("{prefix}.key"), m_dim, x_dim, true, Init::FanIn, false)?,
            value: b.linear(&format!("{prefix}.value"), m_dim, x_dim, true, Init::FanIn, false)?,
            out: b.linear(&format!("{prefix}.out"), x_dim, dim, true, Init::Zeros, false)?,
            heads,
        })
    }
}

pub fn cross_attention_interaction<T: Real>(
    g: &mut Graph<'_, T>,
    e: Var,
    m: Var,
    blk: &InteractionBlock,
    eps: f64,
) -> Result<Var> {
    let (rows, m_rows) = (g.shape(e)[0], g.shape(m)[0]);
    if m_rows + 1 != rows {
        return Err(contract!("pyramid has {m_rows} rows but the embedding has {rows} (expected one more for CLS)"));
    }
    let ne = blk.norm_e.forward(g, e, eps)?;
    let nm = blk.norm_m.forward(g, m, eps)?;
    let q = blk.query.forward(g, ne)?;
    let k = blk.key.forward(g, nm)?;
    let v = blk.value.forward(g, nm)?;
    let (att, _) = multi_head_attention(g, q, k, v, blk.heads)?;
    let upd = blk.out.forward(g, att)?;
    g.add(e, upd)
}

/// All GFT-owned weights.
#[derive(Clone, Debug, PartialEq)]
pub struct GftWeights {
    pub prompts: PromptSet,
    pub edgeconv: Option<EdgeConvWeights>,
    /// `(layer, block)` sorted by layer.
    pub interactions: Vec<(usize, InteractionBlock)>,
}

impl GftWeights {
    pub fn build<T: Real>(b: &mut Builder<'_, T>, cfg: &GftConfig, dim: usize, init_std: f64) -> Result<Self> {
        let prompts = PromptSet::build(b, cfg.prompt_len, dim, init_std)?;
        let edgeconv = cfg.edgeconv.as_ref().map(|e| EdgeConvWeights::build(b, e, dim)).transpose()?;
        let mut layers = cfg.interaction_layers.clone();
        layers.sort_unstable();
        layers.dedup();
        let mut interactions = Vec::with_capacity(layers.len());
        if let Some(e) = &cfg.edgeconv {
            for l in layers {
                let blk = InteractionBlock::build(b, &format!("gft.interaction.{l}"), dim, e.out_dim, cfg.xattn_dim, cfg.xattn_heads)?;
                interactions.push((l, blk));
            }
        }
        Ok(GftWeights {
            prompts,
            edgeconv,
            interactions,
        })
    }

    pub fn interaction_layers(&self) -> Vec<usize> {
        self.interactions.iter().map(|(l, _)| *l).collect()
    }
}

/// Encoder hook applying the interaction block registered for each layer.
pub struct InteractionHook<'a> {
    pub pyramid: Var,
    pub blocks: &'a [(usize, InteractionBlock)],
    pub eps: f64,
}

impl<'p, T: Real> LayerHook<'p, T> for InteractionHook<'_> {
    fn before_layer(&mut self, g: &mut Graph<'p, T>, layer: usize, e: Var) -> Result<Var> {
        let Some((_, blk)) = self.blocks.iter().find(|(l, _)| *l == layer) else {
            return Ok(e);
        };
        let before = [g.shape(e)[0], g.shape(e)[1]];
        let out = cross_attention_interaction(g, e, self.pyramid, blk, self.eps)?;
        if g.shape(out) != before {
            return Err(contract!("interaction at layer {layer} changed the embedding shape"));
        }
        Ok(out)
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LedgerEntry {
    pub name: String,
    pub count: usize,
    pub frozen: bool,
}

/// Per-tensor parameter counts in registration order.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ParamLedger {
    pub entries: Vec<LedgerEntry>,
    pub trainable: usize,
    pub total: usize,
}

impl ParamLedger {
    pub fn percentage(&self) -> f64 {
        if self.total == 0 {
            0.0
        } else {
            100.0 * self.trainable as f64 / self.total as f64
        }
    }

    /// `0.76M / 22.14M (3.44%)`.
    pub fn summary(&self) -> String {
        format!(
            "{:.2}M / {:.2}M ({:.2}%)",
            self.trainable as f64 / 1e6,
            self.total as f64 / 1e6,
            self.percentage()
        )
    }
}

impl fmt::Display for ParamLedger {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for e in &self.entries {
            let state = if e.frozen { "frozen" } else { "trainable" };
            writeln!(f, "{:<40} {:>10} {state}", e.name, e.count)?;
        }
        writeln!(f, "trainable {} / total {}", self.trainable, self.total)?;
        write!(f, "{}", self.summary())
    }
}

pub fn count_trainable_params<T: Real>(store: &ParamStore<T>) -> ParamLedger {
    let entries: Vec<LedgerEntry> = store
        .iter()
        .map(|(_, p)| LedgerEntry {
            name: p.name.clone(),
            count: p.tensor.numel(),
            frozen: p.frozen,
        })
        .collect();
    let trainable = entries.iter().filter(|e| !e.frozen).map(|e| e.count).sum();
    let total = entries.iter().map(|e| e.count).sum();
    ParamLedger {
        entries,
        trainable,
        total,
    }
}

/// Inference FLOPs (2 per multiply-add) by component.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct FlopReport {
    pub parts: Vec<(&'static str, u64)>,
}

impl FlopReport {
    pub fn total(&self) -> u64 {
        self.parts.iter().map(|(_, v)| v).sum()
    }
}

fn lin(n: usize, i: usize, o: usize) -> u64 {
    (n * i * o) as u64
}

/// Multiply-add count of one pre-norm self-attention block over `r` rows.
fn block_macs(r: usize, d: usize, mlp: usize) -> u64 {
    lin(r, d, 3 * d) + 2 * (r * r * d) as u64 + lin(r, d, d) + 2 * lin(r, d, mlp * d)
}

/// Counts matmuls, attention products, the EdgeConv pyramid as executed
/// (factorized, two `n×d_in×d_out` products per layer) and squared-distance
/// evaluations for FPS and all KNN searches. Norms, activations and
/// softmax are ignored.
pub fn estimate_flops(cfg: &ModelConfig, n_points: usize) -> FlopReport {
    let b = &cfg.backbone;
    let g = &cfg.gft;
    let (d, l, kg) = (b.dim, b.num_patches, b.group_size);
    let s = g.prompt_len;
    let r = 1 + s + l;
    let nodes = s + l;
    let mut parts = Vec::new();

    let geometry = 3 * (n_points * l) as u64 * 2;
    let h = b.tokenizer_hidden;
    let tokenizer = lin(l * kg, 3, h) + lin(l * kg, 2 * h, d);
    parts.push(("grouping", geometry));
    parts.push(("tokenizer", tokenizer));

    let mut edge = 0u64;
    if let Some(e) = &g.edgeconv {
        let mut din = d;
        for (i, &out) in e.dims.iter().enumerate() {
            if e.dynamic_graph || i == 0 {
                edge += (nodes * nodes * din) as u64;
            }
            edge += 2 * lin(nodes, din, out);
            din = out;
        }
        let total: usize = e.dims.iter().sum();
        edge += lin(nodes, total, e.ffn_dim) + lin(nodes, e.ffn_dim, e.out_dim);
    }
    parts.push(("edgeconv", edge));

    parts.push(("encoder", b.depth as u64 * block_macs(r, d, b.mlp_ratio)));

    let mut inter = 0u64;
    if let Some(e) = &g.edgeconv {
        let x = g.xattn_dim;
        let one = lin(r, d, x) + 2 * lin(nodes, e.out_dim, x) + 2 * (r * nodes * x) as u64 + lin(r, x, d);
        let mut layers = g.interaction_layers.clone();
        layers.sort_unstable();
        layers.dedup();
        inter = layers.len() as u64 * one;
    }
    parts.push(("interactions", inter));

    let head = match &cfg.task {
        TaskConfig::Classification(c) => {
            let mut macs = 0;
            let mut w = 3 * d;
            for &hdim in &c.hidden {
                macs += lin(1, w, hdim);
                w = hdim;
            }
            macs + lin(1, w, c.num_classes)
        }
        TaskConfig::Segmentation(sg) => {
            let dd = sg.dec_dim;
            let taps = sg.taps.len();
            taps as u64 * lin(r, d, dd)
                + lin(r, taps * dd, dd)
                + sg.dec_blocks as u64 * block_macs(r, dd, sg.dec_mlp_ratio)
                + 3 * (n_points * l) as u64
                + lin(n_points, sg.interp_k, dd)
                + lin(n_points, 2 * dd, sg.point_hidden)
                + lin(n_points, sg.point_hidden, sg.num_parts)
        }
    };
    parts.push(("head", head));
    for p in &mut parts {
        p.1 *= 2;
    }
    FlopReport { parts }
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;
    use crate::numcore::Tensor;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_matrix(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Tensor<f64> {
        Tensor::matrix(r, c, (0..r * c).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
    }

    fn edge_weights(store: &mut ParamStore<f64>, dims: &[usize], in_dim: usize, dynamic: bool) -> EdgeConvWeights {
        let cfg = EdgeConvConfig {
            k_graph: 3,
            dims: dims.to_vec(),
            ffn_dim: 7,
            out_dim: 5,
            dynamic_graph: dynamic,
            negative_slope: 0.2,
        };
        EdgeConvWeights::build(&mut Builder::new(store, 9), &cfg, in_dim).unwrap()
    }

    #[test]
    fn edge_features_toy() {
        let store = ParamStore::<f64>::new();
        let mut g = Graph::new(&store);
        let x = g.input(Tensor::from_rows(&[&[0.0, 0.0], &[1.0, 0.0], &[0.0, 2.0]]).unwrap());
        let nbrs = token_graph(&g, x, 1).unwrap();
        assert_eq!(nbrs, vec![1, 0, 0]);
        let e = token_edge_features(&mut g, x, &nbrs, 1).unwrap();
        assert_eq!(g.value(e).row(0), &[0.0, 0.0, 1.0, 0.0]);
        assert_eq!(g.value(e).row(2), &[0.0, 2.0, 0.0, -2.0]);
    }

    #[test]
    fn identical_tokens_give_zero_edges() {
        let store = ParamStore::<f64>::new();
        let mut g = Graph::new(&store);
        let x = g.input(Tensor::filled(&[5, 3], 0.7));
        let nbrs = token_graph(&g, x, 2).unwrap();
        let e = token_edge_features(&mut g, x, &nbrs, 2).unwrap();
        for r in 0..10 {
            assert_eq!(g.value(e).row(r), &[0.7, 0.7, 0.7, 0.0, 0.0, 0.0]);
        }
    }

    #[test]
    fn k_too_large_is_argument_error() {
        let store = ParamStore::<f64>::new();
        let mut g = Graph::new(&store);
        let x = g.input(Tensor::zeros(&[4, 2]));
        assert!(matches!(token_graph(&g, x, 4), Err(crate::Error::Argument(_))));
    }

    #[test]
    fn factorized_layer_matches_explicit() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut store = ParamStore::new();
        let w = edge_weights(&mut store, &[6], 4, true);
        let mut g = Graph::new(&store);
        let x = g.input(rand_matrix(&mut rng, 9, 4));
        let nbrs = token_graph(&g, x, 3).unwrap();
        let a = w.layers[0].forward(&mut g, x, &nbrs, 3, 0.2).unwrap();
        let b = w.layers[0].forward_explicit(&mut g, x, &nbrs, 3, 0.2).unwrap();
        assert_eq!(g.shape(a), &[9, 6]);
        assert!(g.value(a).max_abs_diff(g.value(b)) <= 1e-12);
    }

    #[test]
    fn identical_tokens_layer_output() {
        let mut store = ParamStore::new();
        let w = edge_weights(&mut store, &[3], 2, true);
        let bias = w.layers[0].linear.bias.unwrap();
        store.get_mut(bias).tensor.data_mut().iter_mut().for_each(|v| *v = 0.0);
        let mut g = Graph::new(&store);
        let x = g.input(Tensor::from_rows(&[&[0.5, -1.0][..]; 4]).unwrap());
        let nbrs = token_graph(&g, x, 2).unwrap();
        let y = w.layers[0].forward(&mut g, x, &nbrs, 2, 0.2).unwrap();
        let wt = store.tensor(w.layers[0].linear.weight);
        for r in 0..4 {
            for c in 0..3 {
                let pre = 0.5 * wt.get(0, c) - 1.0 * wt.get(1, c);
                let want = if pre > 0.0 { pre } else { 0.2 * pre };
                assert!((g.value(y).get(r, c) - want).abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn max_pool_is_dominated_by_largest_neighbour() {
        let mut store = ParamStore::<f64>::new();
        let w = edge_weights(&mut store, &[2], 1, true);
        let lw = store.get_mut(w.layers[0].linear.weight);
        lw.tensor.data_mut().copy_from_slice(&[0.0, 0.0, 1.0, 1.0]);
        let mut g = Graph::new(&store);
        // token 0 sees tokens 1 and 3, and token 3 dominates
        let x = g.input(Tensor::from_rows(&[&[0.0], &[1.0], &[-0.5], &[50.0]]).unwrap());
        let nbrs = vec![1, 3, 0, 2, 0, 1, 1, 2];
        let y = w.layers[0].forward(&mut g, x, &nbrs, 2, 0.2).unwrap();
        let b = store.tensor(w.layers[0].linear.bias.unwrap()).data()[0];
        assert!((g.value(y).get(0, 0) - (50.0 + b)).abs() <= 1e-12);
    }

    #[test]
    fn pyramid_shapes_and_static_graph() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for dynamic in [true, false] {
            let mut store = ParamStore::new();
            let w = edge_weights(&mut store, &[6, 4, 3], 8, dynamic);
            let mut g = Graph::new(&store);
            let x = g.input(rand_matrix(&mut rng, 11, 8));
            let p = edgeconv_pyramid(&mut g, x, &w).unwrap();
            assert_eq!(p.layers.len(), 3);
            assert_eq!(g.shape(p.layers[1]), &[11, 4]);
            assert_eq!(g.shape(p.fused), &[11, 5]);
        }
    }

    #[test]
    fn pyramid_is_permutation_equivariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut store = ParamStore::new();
        let w = edge_weights(&mut store, &[6, 4], 5, true);
        let mut g = Graph::new(&store);
        let t = rand_matrix(&mut rng, 10, 5);
        let mut perm: Vec<usize> = (0..10).collect();
        perm.reverse();
        perm.swap(2, 7);
        let x = g.input(t.clone());
        let px = g.gather_rows(x, perm.clone()).unwrap();
        let a = edgeconv_pyramid(&mut g, x, &w).unwrap().fused;
        let b = edgeconv_pyramid(&mut g, px, &w).unwrap().fused;
        let pa = g.gather_rows(a, perm).unwrap();
        assert_eq!(g.value(pa), g.value(b));
    }

    #[test]
    fn zero_out_projection_is_identity_and_single_key_is_value() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let mut store = ParamStore::new();
        let blk = InteractionBlock::build(&mut Builder::new(&mut store, 1), "x", 6, 4, 4, 2).unwrap();
        {
            let mut g = Graph::new(&store);
            let e = g.input(rand_matrix(&mut rng, 5, 6));
            let m = g.input(rand_matrix(&mut rng, 4, 4));
            let y = cross_attention_interaction(&mut g, e, m, &blk, 1e-5).unwrap();
            assert_eq!(g.value(y), g.value(e));
            let bad = g.input(rand_matrix(&mut rng, 5, 4));
            assert!(matches!(
                cross_attention_interaction(&mut g, e, bad, &blk, 1e-5),
                Err(crate::Error::Contract(_))
            ));
        }
        let ow = store.get_mut(blk.out.weight);
        ow.tensor = rand_matrix(&mut rng, 4, 6);
        let mut g = Graph::new(&store);
        let e = g.input(rand_matrix(&mut rng, 2, 6));
        let m = g.input(rand_matrix(&mut rng, 1, 4));
        let y = cross_attention_interaction(&mut g, e, m, &blk, 1e-5).unwrap();
        let nm = blk.norm_m.forward(&mut g, m, 1e-5).unwrap();
        let v = blk.value.forward(&mut g, nm).unwrap();
        let vv = g.concat_rows(&[v, v]).unwrap();
        let o = blk.out.forward(&mut g, vv).unwrap();
        let want = g.add(e, o).unwrap();
        assert!(g.value(y).max_abs_diff(g.value(want)) <= 1e-12);
    }

    #[test]
    fn double_injection_is_contract_error() {
        let mut store = ParamStore::<f64>::new();
        let p = PromptSet::build(&mut Builder::new(&mut store, 1), 3, 4, 0.02).unwrap();
        let mut g = Graph::new(&store);
        let data = g.input(Tensor::zeros(&[6, 4]));
        let e0 = EmbeddingMatrix {
            data,
            layout: Layout {
                prompts: 0,
                patches: 5,
                prompts_injected: false,
            },
        };
        let e1 = inject_prompts(&mut g, e0, &p).unwrap();
        assert_eq!(g.shape(e1.data), &[9, 4]);
        assert_eq!(e1.layout.rows(), 9);
        assert!(matches!(inject_prompts(&mut g, e1, &p), Err(crate::Error::Contract(_))));
    }

    #[test]
    fn flops_grow_with_patches() {
        let mut cfg = ModelConfig::classification(15);
        let a = estimate_flops(&cfg, 2048).total();
        cfg.backbone.num_patches *= 2;
        assert!(estimate_flops(&cfg, 2048).total() > a);
    }
}
