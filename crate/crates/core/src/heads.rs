//! Task heads, losses and evaluation metrics.

use alloc::format;
use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::backbone::{self_attention_layer, EmbeddingMatrix, EncoderLayerWeights};
use crate::config::{ClassifierConfig, Pooling, SegmentationConfig};
use crate::error::{argument, contract, Result};
use crate::layers::{Builder, Init, LayerNorm, Linear};
use crate::numcore::{Graph, Real, Tensor, Var};
use crate::pointops::{dist2, knn, Point};

/// Dropout behaviour for one forward call.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Eval,
    /// Training with a per-call dropout seed.
    Train { seed: u64 },
}

/// `concat(CLS, max(patches), max(prompts))`, each part optional.
pub fn pool_tokens<T: Real>(g: &mut Graph<'_, T>, e: Var, layout: &crate::backbone::Layout, pooling: Pooling) -> Result<Var> {
    let mut parts = Vec::with_capacity(3);
    if pooling.cls {
        parts.push(g.slice_rows(e, 0, 1)?);
    }
    if pooling.patches {
        let p = g.slice_rows(e, layout.patch_start(), layout.patches)?;
        parts.push(g.group_max(p, layout.patches)?);
    }
    if pooling.prompts && layout.prompts > 0 {
        let p = g.slice_rows(e, layout.prompt_start(), layout.prompts)?;
        parts.push(g.group_max(p, layout.prompts)?);
    }
    match parts.len() {
        0 => Err(contract!("nothing to pool")),
        1 => Ok(parts[0]),
        _ => g.concat_cols(&parts),
    }
}

/// Pooled features → hidden ReLU layers with dropout → logits.
#[derive(Clone, Debug, PartialEq)]
pub struct ClassifierHead {
    pub layers: Vec<Linear>,
    pub dropout: f64,
    pub pooling: Pooling,
}

impl ClassifierHead {
    /// Input width is `D` times the number of pooled sources. A prompt
    /// source with `s = 0` is filled with nothing, so it counts only when
    /// prompts exist.
    pub fn build<T: Real>(b: &mut Builder<'_, T>, cfg: &ClassifierConfig, dim: usize, has_prompts: bool) -> Result<Self> {
        let p = cfg.pooling;
        let sources = p.cls as usize + p.patches as usize + (p.prompts && has_prompts) as usize;
        let mut w = sources * dim;
        let mut layers = Vec::with_capacity(cfg.hidden.len() + 1);
        for (i, &h) in cfg.hidden.iter().enumerate() {
            layers.push(b.linear(&format!("head.fc{i}"), w, h, true, Init::FanIn, false)?);
            w = h;
        }
        layers.push(b.linear("head.out", w, cfg.num_classes, true, Init::FanIn, false)?);
        Ok(ClassifierHead {
            layers,
            dropout: cfg.dropout,
            pooling: cfg.pooling,
        })
    }

    pub fn classify<T: Real>(&self, g: &mut Graph<'_, T>, features: Var, mode: Mode) -> Result<Var> {
        let mut rng = match mode {
            Mode::Train { seed } if self.dropout > 0.0 => Some(ChaCha8Rng::seed_from_u64(seed)),
            _ => None,
        };
        let last = self.layers.len() - 1;
        let mut x = features;
        for (i, layer) in self.layers.iter().enumerate() {
            x = layer.forward(g, x)?;
            if i == last {
                break;
            }
            x = g.relu(x);
            if let Some(rng) = rng.as_mut() {
                x = dropout(g, x, self.dropout, rng)?;
            }
        }
        Ok(x)
    }
}

/// Inverted dropout: kept units are scaled by `1/(1-p)`.
fn dropout<T: Real>(g: &mut Graph<'_, T>, x: Var, p: f64, rng: &mut ChaCha8Rng) -> Result<Var> {
    let shape = g.shape(x).to_vec();
    let keep = T::of(1.0 / (1.0 - p));
    let n: usize = shape.iter().product();
    let mask = (0..n).map(|_| if rng.gen::<f64>() < p { T::zero() } else { keep }).collect();
    let mask = g.input(Tensor::new(shape, mask)?);
    g.mul(x, mask)
}

/// Inverse-distance weights mapping token features to points.
///
/// Each point takes inverse-distance weights over its `k` nearest centres,
/// normalized to sum to one. A point sitting exactly on a centre copies
/// that centre. Returned row-major as `N·k` `(centre, weight)` pairs.
pub fn propagation_weights(points: &[Point], centers: &[Point], k: usize) -> Result<Vec<(usize, f64)>> {
    let k = k.min(centers.len());
    let nbrs = knn(points, centers, k, true)?;
    let mut out = Vec::with_capacity(points.len() * k);
    for (p, row) in points.iter().zip(nbrs.chunks(k)) {
        let d: Vec<f64> = row.iter().map(|&c| num_traits::Float::sqrt(dist2(p, &centers[c]))).collect();
        if let Some(hit) = d.iter().position(|&v| v == 0.0) {
            for (j, &c) in row.iter().enumerate() {
                out.push((c, if j == hit { 1.0 } else { 0.0 }));
            }
            continue;
        }
        let inv: Vec<f64> = d.iter().map(|&v| 1.0 / (v + 1e-8)).collect();
        let total: f64 = inv.iter().sum();
        for (&c, w) in row.iter().zip(inv) {
            out.push((c, w / total));
        }
    }
    Ok(out)
}

/// Multi-tap decoder producing per-point part logits.
#[derive(Clone, Debug, PartialEq)]
pub struct SegmentationHead {
    pub down: Vec<Linear>,
    pub fuse: Linear,
    pub blocks: Vec<EncoderLayerWeights>,
    pub norm: LayerNorm,
    pub point_hidden: Linear,
    pub point_out: Linear,
    pub cfg: SegmentationConfig,
}

impl SegmentationHead {
    pub fn build<T: Real>(b: &mut Builder<'_, T>, cfg: &SegmentationConfig, dim: usize) -> Result<Self> {
        let dd = cfg.dec_dim;
        let down = cfg
            .taps
            .iter()
            .map(|t| b.linear(&format!("head.down.{t}"), dim, dd, true, Init::FanIn, false))
            .collect::<Result<Vec<_>>>()?;
        let fuse = b.linear("head.fuse", cfg.taps.len() * dd, dd, true, Init::FanIn, false)?;
        let blocks = (0..cfg.dec_blocks)
            .map(|i| EncoderLayerWeights::build(b, &format!("head.blocks.{i}"), dd, cfg.dec_mlp_ratio, Init::Normal(0.02), false))
            .collect::<Result<Vec<_>>>()?;
        Ok(SegmentationHead {
            down,
            fuse,
            blocks,
            norm: b.layer_norm("head.norm", dd, false)?,
            point_hidden: b.linear("head.point.0", 2 * dd, cfg.point_hidden, true, Init::FanIn, false)?,
            point_out: b.linear("head.point.1", cfg.point_hidden, cfg.num_parts, true, Init::FanIn, false)?,
            cfg: cfg.clone(),
        })
    }

    /// `taps` are the encoder outputs listed in `cfg.taps`, in that order.
    pub fn segment<T: Real>(
        &self,
        g: &mut Graph<'_, T>,
        taps: &[Var],
        e: &EmbeddingMatrix,
        points: &[Point],
        centers: &[Point],
        eps: f64,
    ) -> Result<Var> {
        if taps.len() != self.down.len() {
            return Err(contract!("{} taps for {} down-projections", taps.len(), self.down.len()));
        }
        let layout = e.layout;
        if centers.len() != layout.patches {
            return Err(contract!("{} centres for {} patch tokens", centers.len(), layout.patches));
        }
        let mut proj = Vec::with_capacity(taps.len());
        for (&t, d) in taps.iter().zip(&self.down) {
            proj.push(d.forward(g, t)?);
        }
        let cat = if proj.len() == 1 { proj[0] } else { g.concat_cols(&proj)? };
        let mut x = self.fuse.forward(g, cat)?;
        for blk in &self.blocks {
            x = self_attention_layer(g, x, blk, self.cfg.dec_heads, eps, false)?.0;
        }
        let x = self.norm.forward(g, x, eps)?;
        let patches = g.slice_rows(x, layout.patch_start(), layout.patches)?;

        let n = points.len();
        let l = layout.patches;
        let mut interp = alloc::vec![T::zero(); n * l];
        let weights = propagation_weights(points, centers, self.cfg.interp_k)?;
        let k = self.cfg.interp_k.min(l);
        for (i, row) in weights.chunks(k).enumerate() {
            for &(c, w) in row {
                interp[i * l + c] += T::of(w);
            }
        }
        let interp = g.input(Tensor::matrix(n, l, interp)?);
        let per_point = g.matmul(interp, patches)?;
        let global = g.group_max(patches, l)?;
        let global = g.gather_rows(global, alloc::vec![0; n])?;
        let h = g.concat_cols(&[per_point, global])?;
        let h = self.point_hidden.forward(g, h)?;
        let h = g.gelu(h);
        self.point_out.forward(g, h)
    }
}

/// Mean `−log p[label]` over rows of `log_softmax` output.
pub fn nll_loss<T: Real>(g: &mut Graph<'_, T>, logp: Var, labels: &[usize]) -> Result<Var> {
    g.nll(logp, labels)
}

pub fn argmax_rows<T: Real>(t: &Tensor<T>) -> Vec<usize> {
    (0..t.rows())
        .map(|r| {
            let row = t.row(r);
            let mut best = 0;
            for (i, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = i;
                }
            }
            best
        })
        .collect()
}

pub fn overall_accuracy(pred: &[usize], labels: &[usize]) -> Result<f64> {
    if pred.is_empty() || pred.len() != labels.len() {
        return Err(argument!("accuracy needs equal non-empty inputs, got {} and {}", pred.len(), labels.len()));
    }
    let hits = pred.iter().zip(labels).filter(|(a, b)| a == b).count();
    Ok(hits as f64 / pred.len() as f64)
}

/// Mean IoU over `parts`; a part absent from both counts as 1.
pub fn shape_iou(pred: &[usize], labels: &[usize], parts: &[usize]) -> Result<f64> {
    if pred.len() != labels.len() || parts.is_empty() {
        return Err(argument!("shape IoU needs aligned labels and at least one part"));
    }
    let mut total = 0.0;
    for &p in parts {
        let mut inter = 0usize;
        let mut union = 0usize;
        for (&a, &b) in pred.iter().zip(labels) {
            let (ia, ib) = (a == p, b == p);
            inter += (ia && ib) as usize;
            union += (ia || ib) as usize;
        }
        total += if union == 0 { 1.0 } else { inter as f64 / union as f64 };
    }
    Ok(total / parts.len() as f64)
}

/// One evaluated shape.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SegSample<'a> {
    pub category: usize,
    pub parts: &'a [usize],
    pub pred: &'a [usize],
    pub labels: &'a [usize],
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SegMetrics {
    pub class_miou: f64,
    pub instance_miou: f64,
}

/// Instance mIoU averages shapes; class mIoU averages the per-category
/// means over the categories present.
pub fn segmentation_miou(samples: &[SegSample<'_>]) -> Result<SegMetrics> {
    if samples.is_empty() {
        return Err(argument!("no shapes to evaluate"));
    }
    let mut per_cat: Vec<(usize, f64, usize)> = Vec::new();
    let mut sum = 0.0;
    for s in samples {
        let iou = shape_iou(s.pred, s.labels, s.parts)?;
        sum += iou;
        match per_cat.iter_mut().find(|c| c.0 == s.category) {
            Some(c) => {
                c.1 += iou;
                c.2 += 1;
            }
            None => per_cat.push((s.category, iou, 1)),
        }
    }
    let class = per_cat.iter().map(|c| c.1 / c.2 as f64).sum::<f64>() / per_cat.len() as f64;
    Ok(SegMetrics {
        class_miou: class,
        instance_miou: sum / samples.len() as f64,
    })
}
