//! Tokenizers for the CFR and numeric branches.
//!
//! Both produce `[B, l, d]` token streams of the same length `l` so the
//! fusion stack sees `M = 2 l` tokens.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::diff::{Graph, ParameterStore, Var};
use crate::error::{Error, Result};
use crate::nn::{fan_in_std, Linear, SMALL_INIT_STD};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Modality {
    Cfr,
    Num,
}

/// Token stream produced by one encoder.
#[derive(Debug, Clone, Copy)]
pub struct TokenStream {
    pub tokens: Var,
    pub modality: Modality,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EncoderDims {
    pub s: usize,
    pub subcarriers: usize,
    pub d: usize,
    pub patch: usize,
    pub kernel: usize,
}

impl EncoderDims {
    pub fn validate(&self) -> Result<()> {
        if self.patch == 0 || self.subcarriers % self.patch != 0 {
            return Err(Error::Config(format!(
                "subcarrier count {} is not divisible by patch length {}",
                self.subcarriers, self.patch
            )));
        }
        if self.kernel % 2 == 0 {
            return Err(Error::Config(format!("conv kernel {} must be odd", self.kernel)));
        }
        if self.s == 0 || self.d == 0 {
            return Err(Error::Config("s and d must be positive".into()));
        }
        Ok(())
    }

    /// Tokens per modality: `s N_c / P`.
    pub fn tokens(&self) -> usize {
        self.s * self.subcarriers / self.patch
    }

    pub fn tokens_per_vertex(&self) -> usize {
        self.subcarriers / self.patch
    }
}

/// Depth-wise conv over frequency, pointwise `3 -> d` projection, GELU,
/// then average pooling of each length-`P` patch into one token.
#[derive(Debug, Clone)]
pub struct CfrEncoder {
    dims: EncoderDims,
    dw: String,
    dw_b: String,
    pw: Linear,
    pos: String,
}

impl CfrEncoder {
    pub fn init<R: Rng>(store: &mut ParameterStore, prefix: &str, dims: EncoderDims, rng: &mut R) -> Result<Self> {
        dims.validate()?;
        let e = Self {
            dims,
            dw: format!("{prefix}.dw"),
            dw_b: format!("{prefix}.dw_b"),
            pw: Linear::init(store, &format!("{prefix}.pw"), 3, dims.d, rng)?,
            pos: format!("{prefix}.pos"),
        };
        store.normal(&e.dw, &[3, dims.kernel], fan_in_std(dims.kernel), rng)?;
        store.normal(&e.dw_b, &[3], SMALL_INIT_STD, rng)?;
        store.normal(&e.pos, &[dims.tokens(), dims.d], SMALL_INIT_STD, rng)?;
        Ok(e)
    }

    /// `v_cfr: [B, s, 3, N_c] -> [B, s N_c / P, d]`.
    pub fn forward(&self, g: &mut Graph, v_cfr: Var) -> Result<TokenStream> {
        let EncoderDims { s, subcarriers: nc, d, patch, .. } = self.dims;
        let shape = g.shape(v_cfr).to_vec();
        if shape.len() != 4 || shape[1..] != [s, 3, nc] {
            return Err(Error::Shape(format!("CFR input {shape:?}, expected [B, {s}, 3, {nc}]")));
        }
        let b = shape[0];
        let x = g.permute(v_cfr, &[0, 1, 3, 2])?; // [B, s, N_c, 3]
        let dw = g.param(&self.dw)?;
        let dw_b = g.param(&self.dw_b)?;
        let x = g.depthwise_conv1d(x, dw)?;
        let x = g.add(x, dw_b)?;
        let x = self.pw.forward(g, x)?; // [B, s, N_c, d]
        let x = g.gelu(x);
        let x = g.reshape(x, &[b, s, nc / patch, patch, d])?;
        let x = g.mean(x, 3)?;
        let x = g.reshape(x, &[b, self.dims.tokens(), d])?;
        let pos = g.param(&self.pos)?;
        let tokens = g.add(x, pos)?;
        Ok(TokenStream {
            tokens,
            modality: Modality::Cfr,
        })
    }
}

/// Per-vertex linear embedding of the four scalars, a residual two-layer
/// MLP, then `l / s` separate projection heads per vertex so the numeric
/// stream matches the CFR stream's length.
#[derive(Debug, Clone)]
pub struct NumEncoder {
    dims: EncoderDims,
    embed: Linear,
    mlp1: Linear,
    mlp2: Linear,
    heads: Linear,
    pos: String,
}

impl NumEncoder {
    pub fn init<R: Rng>(store: &mut ParameterStore, prefix: &str, dims: EncoderDims, rng: &mut R) -> Result<Self> {
        dims.validate()?;
        let d = dims.d;
        let q = dims.tokens_per_vertex();
        let e = Self {
            dims,
            embed: Linear::init(store, &format!("{prefix}.embed"), 4, d, rng)?,
            mlp1: Linear::init(store, &format!("{prefix}.mlp1"), d, d, rng)?,
            mlp2: Linear::init(store, &format!("{prefix}.mlp2"), d, d, rng)?,
            heads: Linear::init(store, &format!("{prefix}.heads"), d, q * d, rng)?,
            pos: format!("{prefix}.pos"),
        };
        store.normal(&e.pos, &[dims.tokens(), d], SMALL_INIT_STD, rng)?;
        Ok(e)
    }

    /// `v_num: [B, 4 s] -> [B, l, d]`.
    pub fn forward(&self, g: &mut Graph, v_num: Var) -> Result<TokenStream> {
        let EncoderDims { s, d, .. } = self.dims;
        let shape = g.shape(v_num).to_vec();
        if shape.len() != 2 || shape[1] != 4 * s {
            return Err(Error::Shape(format!("numeric input {shape:?}, expected [B, {}]", 4 * s)));
        }
        let b = shape[0];
        let x = g.reshape(v_num, &[b, s, 4])?;
        let e = self.embed.forward(g, x)?;
        let h = self.mlp1.forward(g, e)?;
        let h = g.gelu(h);
        let h = self.mlp2.forward(g, h)?;
        let e = g.add(e, h)?;
        let t = self.heads.forward(g, e)?; // [B, s, q d]
        let t = g.reshape(t, &[b, self.dims.tokens(), d])?;
        let pos = g.param(&self.pos)?;
        let tokens = g.add(t, pos)?;
        Ok(TokenStream {
            tokens,
            modality: Modality::Num,
        })
    }
}
