//! Farthest point sampling, nearest-neighbour search, grouping, and the
//! mini-PointNet tokenizer that turns a cloud into patch tokens.

use alloc::vec;
use alloc::vec::Vec;
use core::cmp::Ordering;

use crate::backbone::{EmbeddingMatrix, Layout};
use crate::config::BackboneConfig;
use crate::error::{argument, Result};
use crate::layers::{Builder, Init, Linear};
use crate::numcore::{Graph, ParamId, Real, Tensor, Var};

pub type Point = [f64; 3];

/// Raw coordinates with optional labels.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct PointCloud {
    pub points: Vec<Point>,
    /// Per-point part labels (segmentation).
    pub point_labels: Option<Vec<usize>>,
    /// Object class (classification).
    pub object_label: Option<usize>,
}

impl PointCloud {
    pub fn new(points: Vec<Point>) -> Self {
        PointCloud {
            points,
            point_labels: None,
            object_label: None,
        }
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn validate(&self, num_classes: Option<usize>) -> Result<()> {
        if self.points.is_empty() {
            return Err(argument!("point cloud is empty"));
        }
        if self.points.iter().flatten().any(|c| !c.is_finite()) {
            return Err(argument!("point cloud has non-finite coordinates"));
        }
        if let Some(labels) = &self.point_labels {
            if labels.len() != self.points.len() {
                return Err(argument!("{} labels for {} points", labels.len(), self.points.len()));
            }
        }
        if let Some(c) = num_classes {
            let bad = self
                .point_labels
                .iter()
                .flatten()
                .chain(self.object_label.iter())
                .find(|&&l| l >= c);
            if let Some(l) = bad {
                return Err(argument!("label {l} outside [0, {c})"));
            }
        }
        Ok(())
    }
}

#[inline]
pub fn dist2(a: &Point, b: &Point) -> f64 {
    let (dx, dy, dz) = (a[0] - b[0], a[1] - b[1], a[2] - b[2]);
    dx * dx + dy * dy + dz * dz
}

/// Greedy maximin selection of `m` points, starting at index 0.
///
/// Each step picks the unselected point farthest from the selected set;
/// ties go to the lower index. Indices are returned in selection order.
pub fn fps(points: &[Point], m: usize) -> Result<Vec<usize>> {
    let n = points.len();
    if m == 0 || m > n {
        return Err(argument!("cannot sample {m} of {n} points"));
    }
    let mut selected = vec![false; n];
    let mut min_d = vec![f64::INFINITY; n];
    let mut out = Vec::with_capacity(m);
    let mut current = 0;
    loop {
        selected[current] = true;
        out.push(current);
        if out.len() == m {
            return Ok(out);
        }
        let c = points[current];
        let mut best = usize::MAX;
        let mut best_d = f64::NEG_INFINITY;
        for i in 0..n {
            let d = dist2(&points[i], &c);
            if d < min_d[i] {
                min_d[i] = d;
            }
            if !selected[i] && min_d[i] > best_d {
                best_d = min_d[i];
                best = i;
            }
        }
        current = best;
    }
}

fn by_distance(a: &(f64, usize), b: &(f64, usize)) -> Ordering {
    a.0.partial_cmp(&b.0).unwrap_or(Ordering::Equal).then(a.1.cmp(&b.1))
}

/// The `k` smallest `(distance, index)` pairs, ascending with index tie-break.
fn k_smallest(cands: &mut Vec<(f64, usize)>, k: usize) -> impl Iterator<Item = usize> + '_ {
    if k < cands.len() {
        cands.select_nth_unstable_by(k, by_distance);
        cands.truncate(k);
    }
    cands.sort_unstable_by(by_distance);
    cands.iter().map(|c| c.1)
}

/// `k` nearest points (Euclidean) for each query, flattened `Q×k`.
///
/// With `include_self == false` the queries must be the point set itself
/// and query `i` never returns index `i`.
pub fn knn(queries: &[Point], points: &[Point], k: usize, include_self: bool) -> Result<Vec<usize>> {
    let n = points.len();
    if !include_self && queries.len() != n {
        return Err(argument!("excluding self requires the queries to be the point set"));
    }
    let available = if include_self { n } else { n.saturating_sub(1) };
    if k == 0 || k > available {
        return Err(argument!("k = {k} exceeds the {available} available neighbours"));
    }
    let mut out = Vec::with_capacity(queries.len() * k);
    let mut cands = Vec::with_capacity(n);
    for (qi, q) in queries.iter().enumerate() {
        cands.clear();
        cands.extend(
            points
                .iter()
                .enumerate()
                .filter(|&(i, _)| include_self || i != qi)
                .map(|(i, p)| (dist2(q, p), i)),
        );
        out.extend(k_smallest(&mut cands, k));
    }
    Ok(out)
}

/// Feature-space KNN among the rows of an `n×dim` matrix, excluding self.
pub fn knn_rows<T: Real>(rows: &[T], dim: usize, k: usize) -> Result<Vec<usize>> {
    let n = if dim == 0 { 0 } else { rows.len() / dim };
    if k == 0 || k >= n {
        return Err(argument!("k = {k} exceeds the {} available neighbours", n.saturating_sub(1)));
    }
    let mut out = Vec::with_capacity(n * k);
    let mut cands = Vec::with_capacity(n);
    for i in 0..n {
        let ri = &rows[i * dim..(i + 1) * dim];
        cands.clear();
        for j in (0..n).filter(|&j| j != i) {
            let rj = &rows[j * dim..(j + 1) * dim];
            let d: f64 = ri
                .iter()
                .zip(rj)
                .map(|(&a, &b)| {
                    let t = (a - b).as_f64();
                    t * t
                })
                .sum();
            cands.push((d, j));
        }
        out.extend(k_smallest(&mut cands, k));
    }
    Ok(out)
}

/// Patch structure of a cloud.
#[derive(Clone, Debug, PartialEq)]
pub struct TokenizedCloud {
    pub center_indices: Vec<usize>,
    pub centers: Vec<Point>,
    /// `L×k` neighbour indices; each group starts with its own centre.
    pub groups: Vec<usize>,
    pub group_size: usize,
    /// `L·k` offsets `neighbour − centre`, row-aligned with `groups`.
    pub group_coords: Vec<Point>,
}

impl TokenizedCloud {
    pub fn num_groups(&self) -> usize {
        self.center_indices.len()
    }
}

/// FPS centres plus KNN groups re-centred on each centre.
pub fn group_points(points: &[Point], num_groups: usize, group_size: usize) -> Result<TokenizedCloud> {
    let center_indices = fps(points, num_groups)?;
    let centers: Vec<Point> = center_indices.iter().map(|&i| points[i]).collect();
    let groups = knn(&centers, points, group_size, true)?;
    let mut group_coords = Vec::with_capacity(groups.len());
    for (gi, chunk) in groups.chunks(group_size).enumerate() {
        let c = centers[gi];
        for &p in chunk {
            let q = points[p];
            group_coords.push([q[0] - c[0], q[1] - c[1], q[2] - c[2]]);
        }
    }
    Ok(TokenizedCloud {
        center_indices,
        centers,
        groups,
        group_size,
        group_coords,
    })
}

/// Pointwise `3→hidden` (trainable when unlocked), activation, concat with
/// the group max, pointwise `2·hidden→D` (frozen), max over the group.
#[derive(Clone, Debug, PartialEq)]
pub struct TokenizerWeights {
    pub first: Linear,
    pub second: Linear,
}

impl TokenizerWeights {
    pub fn build<T: Real>(b: &mut Builder<'_, T>, cfg: &BackboneConfig, unlock_first: bool) -> Result<Self> {
        let h = cfg.tokenizer_hidden;
        Ok(TokenizerWeights {
            first: b.linear("tokenizer.first", 3, h, true, Init::FanIn, !unlock_first)?,
            second: b.linear("tokenizer.second", 2 * h, cfg.dim, true, Init::Normal(cfg.init_std), true)?,
        })
    }

    /// `L·k×3` offsets → `L×D` patch tokens.
    pub fn embed<T: Real>(&self, g: &mut Graph<'_, T>, coords: &[Point], group_size: usize) -> Result<Var> {
        let rows = coords.len();
        let data = coords.iter().flatten().map(|&c| T::of(c)).collect();
        let x = g.input(Tensor::matrix(rows, 3, data)?);
        let h = self.first.forward(g, x)?;
        let h = g.relu(h);
        let pooled = g.group_max(h, group_size)?;
        let spread: Vec<usize> = (0..rows).map(|r| r / group_size).collect();
        let pooled = g.gather_rows(pooled, spread)?;
        let h = g.concat_cols(&[pooled, h])?;
        let h = self.second.forward(g, h)?;
        g.group_max(h, group_size)
    }
}

/// Builds `E₀ = [T_cls; T_1..T_L]` for a cloud.
///
/// Degenerate clouds (all points identical) are accepted: every group then
/// collapses onto the same point.
pub fn tokenize<T: Real>(
    g: &mut Graph<'_, T>,
    cloud: &PointCloud,
    cfg: &BackboneConfig,
    weights: &TokenizerWeights,
    cls_token: ParamId,
) -> Result<(EmbeddingMatrix, TokenizedCloud)> {
    cloud.validate(None)?;
    if cloud.len() < cfg.num_patches {
        return Err(argument!(
            "{} points cannot form {} patches",
            cloud.len(),
            cfg.num_patches
        ));
    }
    let tokens = group_points(&cloud.points, cfg.num_patches, cfg.group_size)?;
    let patches = weights.embed(g, &tokens.group_coords, cfg.group_size)?;
    let cls = g.param(cls_token);
    let data = g.concat_rows(&[cls, patches])?;
    let layout = Layout {
        prompts: 0,
        patches: cfg.num_patches,
        prompts_injected: false,
    };
    Ok((EmbeddingMatrix { data, layout }, tokens))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numcore::ParamStore;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn line(xs: &[f64]) -> Vec<Point> {
        xs.iter().map(|&x| [x, 0.0, 0.0]).collect()
    }

    fn random_cloud(rng: &mut ChaCha8Rng, n: usize) -> Vec<Point> {
        (0..n)
            .map(|_| [rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)])
            .collect()
    }

    #[test]
    fn fps_all_points() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let pts = random_cloud(&mut rng, 20);
        let mut idx = fps(&pts, 20).unwrap();
        idx.sort_unstable();
        assert_eq!(idx, (0..20).collect::<Vec<_>>());
    }

    #[test]
    fn fps_single_starts_at_zero() {
        let pts = line(&[5.0, 1.0, 2.0]);
        assert_eq!(fps(&pts, 1).unwrap(), vec![0]);
    }

    #[test]
    fn fps_collinear() {
        // Brute force: the pair containing index 0 with the largest gap is {0, 3}.
        let pts = line(&[0.0, 1.0, 2.0, 10.0]);
        assert_eq!(fps(&pts, 2).unwrap(), vec![0, 3]);
    }

    #[test]
    fn fps_too_many_is_error() {
        assert!(fps(&line(&[0.0, 1.0]), 3).is_err());
        assert!(fps(&line(&[0.0, 1.0]), 0).is_err());
    }

    #[test]
    fn fps_duplicates_still_cover_all() {
        let pts = vec![[1.0, 1.0, 1.0]; 5];
        let mut idx = fps(&pts, 5).unwrap();
        idx.sort_unstable();
        assert_eq!(idx, vec![0, 1, 2, 3, 4]);
    }

    #[test]
    fn knn_examples() {
        let pts = line(&[0.0, 1.0, 3.0]);
        assert_eq!(knn(&[[1.0, 0.0, 0.0]], &pts, 1, true).unwrap(), vec![1]);
        assert_eq!(knn(&[[1.0, 0.0, 0.0]], &pts, 2, true).unwrap(), vec![1, 0]);
        // 0 and 2 are equidistant from 1.
        let pts = line(&[0.0, 1.0, 2.0]);
        assert_eq!(knn(&[[1.0, 0.0, 0.0]], &pts, 2, true).unwrap(), vec![1, 0]);
        assert_eq!(knn(&pts, &pts, 1, false).unwrap(), vec![1, 0, 1]);
    }

    #[test]
    fn knn_too_large_is_error() {
        let pts = line(&[0.0, 1.0, 3.0]);
        assert!(knn(&pts, &pts, 3, false).is_err());
        assert!(knn(&pts, &pts, 4, true).is_err());
        assert!(knn(&pts, &pts, 3, true).is_ok());
    }

    #[test]
    fn knn_rows_excludes_self() {
        let rows = [0.0f64, 0.0, 1.0, 0.0, 0.0, 2.0];
        assert_eq!(knn_rows(&rows, 2, 1).unwrap(), vec![1, 0, 0]);
        assert!(knn_rows(&rows, 2, 3).is_err());
    }

    #[test]
    fn groups_contain_their_centre() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let pts = random_cloud(&mut rng, 64);
        let t = group_points(&pts, 8, 5).unwrap();
        for (gi, chunk) in t.groups.chunks(5).enumerate() {
            assert_eq!(chunk[0], t.center_indices[gi]);
            assert_eq!(t.group_coords[gi * 5], [0.0; 3]);
        }
    }

    fn tiny_tokenizer(store: &mut ParamStore<f64>) -> (BackboneConfig, TokenizerWeights, ParamId) {
        let cfg = BackboneConfig {
            dim: 8,
            num_patches: 6,
            group_size: 4,
            tokenizer_hidden: 5,
            ..BackboneConfig::default()
        };
        let mut b = Builder::new(store, 3);
        let w = TokenizerWeights::build(&mut b, &cfg, true).unwrap();
        let cls = b.param("cls", &[1, 8], Init::Normal(0.02), 8, false).unwrap();
        (cfg, w, cls)
    }

    #[test]
    fn tokenize_shape_and_determinism() {
        let mut store = ParamStore::new();
        let (cfg, w, cls) = tiny_tokenizer(&mut store);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let cloud = PointCloud::new(random_cloud(&mut rng, 40));
        let mut g1 = Graph::new(&store);
        let (e1, _) = tokenize(&mut g1, &cloud, &cfg, &w, cls).unwrap();
        let mut g2 = Graph::new(&store);
        let (e2, _) = tokenize(&mut g2, &cloud, &cfg, &w, cls).unwrap();
        assert_eq!(g1.shape(e1.data), &[7, 8]);
        assert_eq!(g1.value(e1.data), g2.value(e2.data));
    }

    #[test]
    fn tokenize_translation_moves_only_centres() {
        let mut store = ParamStore::new();
        let (cfg, w, cls) = tiny_tokenizer(&mut store);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let pts = random_cloud(&mut rng, 50);
        let shifted: Vec<Point> = pts.iter().map(|p| [p[0] + 0.75, p[1] - 2.0, p[2] + 0.125]).collect();
        let mut g = Graph::new(&store);
        let (a, ta) = tokenize(&mut g, &PointCloud::new(pts), &cfg, &w, cls).unwrap();
        let (b, tb) = tokenize(&mut g, &PointCloud::new(shifted), &cfg, &w, cls).unwrap();
        assert_eq!(ta.center_indices, tb.center_indices);
        assert!(g.value(a.data).max_abs_diff(g.value(b.data)) < 1e-12);
        assert!((tb.centers[0][0] - ta.centers[0][0] - 0.75).abs() < 1e-12);
    }

    #[test]
    fn degenerate_cloud_tokenizes() {
        let mut store = ParamStore::new();
        let (cfg, w, cls) = tiny_tokenizer(&mut store);
        let cloud = PointCloud::new(vec![[0.3, 0.3, 0.3]; 10]);
        let mut g = Graph::new(&store);
        let (e, t) = tokenize(&mut g, &cloud, &cfg, &w, cls).unwrap();
        assert_eq!(g.shape(e.data), &[7, 8]);
        assert!(t.group_coords.iter().all(|c| *c == [0.0; 3]));
    }

    #[test]
    fn too_few_points_is_error() {
        let mut store = ParamStore::new();
        let (cfg, w, cls) = tiny_tokenizer(&mut store);
        let mut g = Graph::new(&store);
        assert!(tokenize(&mut g, &PointCloud::new(vec![[0.0; 3]; 5]), &cfg, &w, cls).is_err());
    }
}
