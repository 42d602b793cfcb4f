//! CLS/patch attention export.

use std::fmt::Write as _;

use gft_core::model::{cls_attention_map, AttentionMap, ForwardOptions};
use gft_core::pointops::{Point, PointCloud};
use gft_core::GftModel;

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct PatchAttention {
    pub centers: Vec<Point>,
    pub map: AttentionMap,
}

/// Head-averaged attention of encoder layer `layer` (1-based) for one cloud.
pub fn patch_attention(model: &GftModel<f32>, cloud: &PointCloud, layer: usize, reverse: bool) -> Result<PatchAttention> {
    let depth = model.config.backbone.depth;
    if layer == 0 || layer > depth {
        return Err(Error::Argument(format!("layer {layer} outside 1..={depth}")));
    }
    let opts = ForwardOptions {
        attention_layers: vec![layer],
        ..ForwardOptions::default()
    };
    let mut g = model.graph();
    let out = model.forward(&mut g, cloud, &opts)?;
    let (_, attn) = &out.attention[0];
    let map = cls_attention_map(attn, &out.embedding.layout, reverse)?;
    Ok(PatchAttention {
        centers: out.tokens.centers,
        map,
    })
}

/// `center_x,center_y,center_z,weight` rows, one per patch. The default
/// direction adds a `# excluded=<mass>` footer with the CLS row's weight on
/// CLS and prompt keys.
pub fn render_attention_csv(a: &PatchAttention) -> String {
    let mut out = String::from("center_x,center_y,center_z,weight\n");
    for (c, w) in a.centers.iter().zip(&a.map.weights) {
        let _ = writeln!(out, "{},{},{},{}", c[0], c[1], c[2], w);
    }
    if let Some(x) = a.map.excluded {
        let _ = writeln!(out, "# excluded={x}");
    }
    out
}
