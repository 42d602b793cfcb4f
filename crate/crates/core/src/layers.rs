//! Seeded initialization and the small weight bundles shared by all modules.

use alloc::format;
use alloc::string::String;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::Result;
use crate::numcore::{Graph, ParamId, ParamStore, Real, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Init {
    Zeros,
    Ones,
    Normal(f64),
    /// `U(-1/sqrt(fan_in), 1/sqrt(fan_in))`.
    FanIn,
}

/// Registers named parameters with deterministic initial values.
pub struct Builder<'a, T: Real> {
    store: &'a mut ParamStore<T>,
    rng: ChaCha8Rng,
}

impl<'a, T: Real> Builder<'a, T> {
    pub fn new(store: &'a mut ParamStore<T>, seed: u64) -> Self {
        Builder {
            store,
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn tensor(&mut self, shape: &[usize], init: Init, fan_in: usize) -> Tensor<T> {
        let mut t = Tensor::zeros(shape);
        match init {
            Init::Zeros => {}
            Init::Ones => t.data_mut().iter_mut().for_each(|v| *v = T::one()),
            Init::Normal(std) => {
                let dist = Normal::new(0.0, std).expect("finite std");
                for v in t.data_mut() {
                    *v = T::of(dist.sample(&mut self.rng));
                }
            }
            Init::FanIn => {
                let bound = 1.0 / num_traits::Float::sqrt(fan_in.max(1) as f64);
                for v in t.data_mut() {
                    *v = T::of(self.rng.gen_range(-bound..bound));
                }
            }
        }
        t
    }

    pub fn param(&mut self, name: impl Into<String>, shape: &[usize], init: Init, fan_in: usize, frozen: bool) -> Result<ParamId> {
        let t = self.tensor(shape, init, fan_in);
        self.store.insert(name, t, frozen)
    }

    /// `in_dim → out_dim` projection. Weight and bias share `init`
    /// except that normal-initialized layers start with a zero bias.
    pub fn linear(&mut self, name: &str, in_dim: usize, out_dim: usize, bias: bool, init: Init, frozen: bool) -> Result<Linear> {
        let weight = self.param(format!("{name}.weight"), &[in_dim, out_dim], init, in_dim, frozen)?;
        // zero biases for every init; a FanIn bias on the 3-wide tokenizer
        // input swamps the sub-unit patch offsets
        let bias = if bias {
            Some(self.param(format!("{name}.bias"), &[out_dim], Init::Zeros, in_dim, frozen)?)
        } else {
            None
        };
        Ok(Linear { weight, bias })
    }

    pub fn layer_norm(&mut self, name: &str, dim: usize, frozen: bool) -> Result<LayerNorm> {
        Ok(LayerNorm {
            gain: self.param(format!("{name}.weight"), &[dim], Init::Ones, dim, frozen)?,
            bias: self.param(format!("{name}.bias"), &[dim], Init::Zeros, dim, frozen)?,
        })
    }
}

/// Weight stored `in×out`, optional bias of length `out`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
}

impl Linear {
    pub fn forward<T: Real>(&self, g: &mut Graph<'_, T>, x: Var) -> Result<Var> {
        let w = g.param(self.weight);
        let b = self.bias.map(|b| g.param(b));
        g.linear(x, w, b)
    }

    pub fn in_dim<T: Real>(&self, store: &ParamStore<T>) -> usize {
        store.tensor(self.weight).shape()[0]
    }

    pub fn out_dim<T: Real>(&self, store: &ParamStore<T>) -> usize {
        store.tensor(self.weight).shape()[1]
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct LayerNorm {
    pub gain: ParamId,
    pub bias: ParamId,
}

impl LayerNorm {
    pub fn forward<T: Real>(&self, g: &mut Graph<'_, T>, x: Var, eps: f64) -> Result<Var> {
        let gain = g.param(self.gain);
        let bias = g.param(self.bias);
        g.layer_norm(x, gain, bias, T::of(eps))
    }
}

/// Multi-head scaled dot-product attention over already-projected
/// `q` (`n×d`), `k` and `v` (`m×d`). Returns the `n×d` head-concatenated
/// output and, per head, the `n×m` weight node.
pub fn multi_head_attention<T: Real>(
    g: &mut Graph<'_, T>,
    q: Var,
    k: Var,
    v: Var,
    heads: usize,
) -> Result<(Var, alloc::vec::Vec<Var>)> {
    let d = g.shape(q)[1];
    let dh = d / heads;
    let scale = T::of(1.0 / num_traits::Float::sqrt(dh as f64));
    let mut outs = alloc::vec::Vec::with_capacity(heads);
    let mut weights = alloc::vec::Vec::with_capacity(heads);
    for h in 0..heads {
        let (qh, kh, vh) = if heads == 1 {
            (q, k, v)
        } else {
            (
                g.slice_cols(q, h * dh, dh)?,
                g.slice_cols(k, h * dh, dh)?,
                g.slice_cols(v, h * dh, dh)?,
            )
        };
        let scores = g.matmul_t(qh, false, kh, true)?;
        let scores = g.scale(scores, scale);
        let attn = g.softmax(scores);
        outs.push(g.matmul(attn, vh)?);
        weights.push(attn);
    }
    let out = if heads == 1 { outs[0] } else { g.concat_cols(&outs)? };
    Ok((out, weights))
}
