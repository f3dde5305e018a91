//! Small parameterized layers shared by the encoders and MoE blocks.
//!
//! Layers only hold parameter names; values live in a [`ParameterStore`]
//! and are bound into a [`Graph`] per forward pass.

use rand::Rng;

use crate::diff::{Graph, ParameterStore, Var};
use crate::error::Result;

/// Std for biases, routing matrices, task and positional embeddings.
pub const SMALL_INIT_STD: f64 = 0.02;

pub fn fan_in_std(fan_in: usize) -> f64 {
    1.0 / (fan_in as f64).sqrt()
}

#[derive(Debug, Clone)]
pub struct Linear {
    pub w: String,
    pub b: String,
    pub fan_in: usize,
    pub fan_out: usize,
}

impl Linear {
    pub fn init<R: Rng>(store: &mut ParameterStore, prefix: &str, fan_in: usize, fan_out: usize, rng: &mut R) -> Result<Self> {
        let l = Self {
            w: format!("{prefix}.w"),
            b: format!("{prefix}.b"),
            fan_in,
            fan_out,
        };
        store.normal(&l.w, &[fan_in, fan_out], fan_in_std(fan_in), rng)?;
        store.normal(&l.b, &[fan_out], SMALL_INIT_STD, rng)?;
        Ok(l)
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let w = g.param(&self.w)?;
        let b = g.param(&self.b)?;
        g.linear(x, w, b)
    }
}

/// Layer normalization over the last axis with a learned affine map.
#[derive(Debug, Clone)]
pub struct LayerNorm {
    pub gamma: String,
    pub beta: String,
}

impl LayerNorm {
    pub fn init(store: &mut ParameterStore, prefix: &str, d: usize) -> Result<Self> {
        let l = Self {
            gamma: format!("{prefix}.gamma"),
            beta: format!("{prefix}.beta"),
        };
        store.ones(&l.gamma, &[d])?;
        store.zeros(&l.beta, &[d])?;
        Ok(l)
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let gamma = g.param(&self.gamma)?;
        let beta = g.param(&self.beta)?;
        g.layer_norm_affine(x, gamma, beta)
    }
}

/// `n` independent two-layer GELU MLPs `d -> hidden -> d`, applied row-wise
/// to an `[B, n, d]` input (row `k` goes to expert `k`).
#[derive(Debug, Clone)]
pub struct ExpertBank {
    pub w1: String,
    pub b1: String,
    pub w2: String,
    pub b2: String,
    pub experts: usize,
}

impl ExpertBank {
    pub fn init<R: Rng>(store: &mut ParameterStore, prefix: &str, experts: usize, d: usize, hidden: usize, rng: &mut R) -> Result<Self> {
        let e = Self {
            w1: format!("{prefix}.w1"),
            b1: format!("{prefix}.b1"),
            w2: format!("{prefix}.w2"),
            b2: format!("{prefix}.b2"),
            experts,
        };
        store.normal(&e.w1, &[experts, d, hidden], fan_in_std(d), rng)?;
        store.normal(&e.b1, &[experts, hidden], SMALL_INIT_STD, rng)?;
        store.normal(&e.w2, &[experts, hidden, d], fan_in_std(hidden), rng)?;
        store.normal(&e.b2, &[experts, d], SMALL_INIT_STD, rng)?;
        Ok(e)
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let (w1, b1, w2, b2) = (g.param(&self.w1)?, g.param(&self.b1)?, g.param(&self.w2)?, g.param(&self.b2)?);
        // [B, n, d] -> [n, B, d] so each expert multiplies its own rows
        let xt = g.permute(x, &[1, 0, 2])?;
        let h = g.bmm(xt, w1)?;
        let h = g.permute(h, &[1, 0, 2])?;
        let h = g.add(h, b1)?;
        let h = g.gelu(h);
        let ht = g.permute(h, &[1, 0, 2])?;
        let y = g.bmm(ht, w2)?;
        let y = g.permute(y, &[1, 0, 2])?;
        g.add(y, b2)
    }
}
