//! N-way K-shot episodes drawn from a labelled pool.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use gft_core::pointops::PointCloud;

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct Episode {
    /// Original label of each episode class, indexed by the remapped label.
    pub classes: Vec<usize>,
    pub support: Vec<PointCloud>,
    /// Every remaining instance of the sampled classes.
    pub query: Vec<PointCloud>,
}

/// Samples `n_way` classes and `k_shot` instances per class, both without
/// replacement, and remaps labels to `0..n_way` in sampling order.
pub fn sample_episode(pool: &[PointCloud], n_way: usize, k_shot: usize, seed: u64) -> Result<Episode> {
    if n_way == 0 || k_shot == 0 {
        return Err(Error::Argument("n_way and k_shot must be positive".into()));
    }
    let mut by_class: Vec<Vec<usize>> = Vec::new();
    for (i, c) in pool.iter().enumerate() {
        let l = c
            .object_label
            .ok_or_else(|| Error::Argument(format!("instance {i} has no class label")))?;
        if by_class.len() <= l {
            by_class.resize(l + 1, Vec::new());
        }
        by_class[l].push(i);
    }
    let present: Vec<usize> = (0..by_class.len()).filter(|&c| !by_class[c].is_empty()).collect();
    if present.len() < n_way {
        return Err(Error::Argument(format!("{n_way}-way episode needs {n_way} classes, pool has {}", present.len())));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let classes: Vec<usize> = present.choose_multiple(&mut rng, n_way).copied().collect();
    let mut support = Vec::with_capacity(n_way * k_shot);
    let mut query = Vec::new();
    for (new, &c) in classes.iter().enumerate() {
        let mut idx = by_class[c].clone();
        if idx.len() < k_shot {
            return Err(Error::Argument(format!("class {c} has {} instances, {k_shot}-shot needs {k_shot}", idx.len())));
        }
        idx.shuffle(&mut rng);
        for (j, &i) in idx.iter().enumerate() {
            let mut cloud = pool[i].clone();
            cloud.object_label = Some(new);
            if j < k_shot {
                support.push(cloud);
            } else {
                query.push(cloud);
            }
        }
    }
    Ok(Episode { classes, support, query })
}
