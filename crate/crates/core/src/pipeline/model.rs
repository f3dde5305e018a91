//! Full localization network and the fusion baselines.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::config::{Baseline, ModelConfig};
use super::normalize::Batch;
use crate::diff::{Graph, ParameterStore, Var};
use crate::encoders::{CfrEncoder, NumEncoder};
use crate::error::{Error, Result};
use crate::nn::Linear;
use crate::soft_moe::{BlockDims, RoutingState, SoftMoeStack};
use crate::task_moe::{pool_tokens, task_count, TaskMoe};

/// Everything needed to rebuild a model's parameter layout.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub config: ModelConfig,
    pub baseline: Option<Baseline>,
    pub s: usize,
    pub subcarriers: usize,
}

impl ModelSpec {
    pub fn tasks(&self) -> usize {
        task_count(self.s)
    }
}

#[derive(Debug, Clone)]
enum Fusion {
    Scadf { stack: SoftMoeStack, task: TaskMoe },
    SoftMoe { stack: SoftMoeStack, head: Linear },
    Pooled { dense: Option<Linear>, hidden: Linear, head: Linear },
}

#[derive(Debug, Clone)]
pub struct Model {
    pub spec: ModelSpec,
    cfr: CfrEncoder,
    num: NumEncoder,
    fusion: Fusion,
}

/// Forward results for one batch.
#[derive(Debug, Clone)]
pub struct ModelOutput {
    /// `[B, K, 2]`, normalized target units.
    pub predictions: Var,
    /// Routing of each fusion block.
    pub fusion_states: Vec<RoutingState>,
    /// Routing of each task router (empty for baselines).
    pub task_states: Vec<RoutingState>,
}

impl Model {
    /// Registers freshly initialized parameters for `spec` in `store`.
    pub fn init(spec: ModelSpec, store: &mut ParameterStore, seed: u64) -> Result<Self> {
        spec.config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let c = &spec.config;
        let enc = c.encoder_dims(spec.s, spec.subcarriers);
        enc.validate()?;
        let cfr = CfrEncoder::init(store, "enc.cfr", enc, &mut rng)?;
        let num = NumEncoder::init(store, "enc.num", enc, &mut rng)?;
        let dims = c.block_dims();
        let k = spec.tasks();
        let fusion = match spec.baseline {
            None => Fusion::Scadf {
                stack: SoftMoeStack::init(store, "fusion", c.depth, dims, &mut rng)?,
                task: TaskMoe::init(store, "task", k, dims, &mut rng)?,
            },
            // one extra block stands in for the task block's attention and experts
            Some(Baseline::Softmoe) => Fusion::SoftMoe {
                stack: SoftMoeStack::init(store, "fusion", c.depth + 1, dims, &mut rng)?,
                head: Linear::init(store, "head", c.d, 2 * k, &mut rng)?,
            },
            Some(b) => {
                let w = 2 * c.d;
                let dense = match b {
                    Baseline::Fullcon => Some(Linear::init(store, "dense", w, w, &mut rng)?),
                    _ => None,
                };
                Fusion::Pooled {
                    dense,
                    hidden: Linear::init(store, "head.hidden", w, c.d, &mut rng)?,
                    head: Linear::init(store, "head.out", c.d, 2 * k, &mut rng)?,
                }
            }
        };
        Ok(Self { spec, cfr, num, fusion })
    }

    /// Rebuilds the layout for `spec` and checks that `store` matches it.
    pub fn for_store(spec: ModelSpec, store: &ParameterStore) -> Result<Self> {
        let mut fresh = ParameterStore::new();
        let model = Self::init(spec, &mut fresh, 0)?;
        if fresh.len() != store.len() {
            return Err(Error::Checkpoint(format!(
                "checkpoint has {} tensors, model expects {}",
                store.len(),
                fresh.len()
            )));
        }
        for (name, t) in fresh.iter() {
            let got = store.get(name).map_err(|_| Error::Checkpoint(format!("missing tensor `{name}`")))?;
            if got.shape() != t.shape() {
                return Err(Error::Checkpoint(format!(
                    "tensor `{name}` has shape {:?}, expected {:?}",
                    got.shape(),
                    t.shape()
                )));
            }
        }
        Ok(model)
    }

    /// Names of all router matrices (fusion `phi` and task `phi_task`).
    pub fn router_names(&self, store: &ParameterStore) -> Vec<String> {
        store
            .names()
            .filter(|n| n.ends_with(".phi") || n.ends_with(".phi_task"))
            .cloned()
            .collect()
    }

    pub fn forward(&self, g: &mut Graph, batch: &Batch) -> Result<ModelOutput> {
        let b = batch.size();
        let k = self.spec.tasks();
        if batch.targets.shape()[1] != k {
            return Err(Error::Config(format!(
                "batch has {} targets per sample, model predicts {k}",
                batch.targets.shape()[1]
            )));
        }
        let v_cfr = g.input(batch.v_cfr.clone());
        let v_num = g.input(batch.v_num.clone());
        let tc = self.cfr.forward(g, v_cfr)?.tokens;
        let tn = self.num.forward(g, v_num)?.tokens;
        match &self.fusion {
            Fusion::Scadf { stack, task } => {
                let x = g.concat(&[tc, tn], 1)?;
                let (z, fusion_states) = stack.forward(g, x)?;
                let out = task.forward(g, z)?;
                Ok(ModelOutput {
                    predictions: out.predictions,
                    fusion_states,
                    task_states: out.states,
                })
            }
            Fusion::SoftMoe { stack, head } => {
                let x = g.concat(&[tc, tn], 1)?;
                let (z, fusion_states) = stack.forward(g, x)?;
                let pooled = pool_tokens(g, z)?;
                let p = head.forward(g, pooled)?;
                Ok(ModelOutput {
                    predictions: g.reshape(p, &[b, k, 2])?,
                    fusion_states,
                    task_states: Vec::new(),
                })
            }
            Fusion::Pooled { dense, hidden, head } => {
                let pc = g.mean(tc, 1)?;
                let pn = g.mean(tn, 1)?;
                let mut f = g.concat(&[pc, pn], 1)?;
                if let Some(dense) = dense {
                    let y = dense.forward(g, f)?;
                    f = g.gelu(y);
                }
                let h = hidden.forward(g, f)?;
                let h = g.gelu(h);
                let p = head.forward(g, h)?;
                Ok(ModelOutput {
                    predictions: g.reshape(p, &[b, k, 2])?,
                    fusion_states: Vec::new(),
                    task_states: Vec::new(),
                })
            }
        }
    }

    pub fn block_dims(&self) -> BlockDims {
        self.spec.config.block_dims()
    }
}
