//! Task-routed multi-task head: one router and task embedding per predicted
//! coordinate, shared experts, and independent linear heads.
//!
//! Task `k < s` predicts vertex `k`; task `s` predicts the centroid.

use rand::Rng;

use crate::diff::{Graph, ParameterStore, Var};
use crate::error::{Error, Result};
use crate::nn::{fan_in_std, ExpertBank, SMALL_INIT_STD};
use crate::soft_moe::{expert_layer, route, BlockDims, Msa, RoutingState, EXPERT_EXPANSION};

/// Number of tasks for trajectories of `s` vertices.
pub fn task_count(s: usize) -> usize {
    s + 1
}

#[derive(Debug, Clone)]
pub struct TaskMoe {
    pub tasks: usize,
    pub msa: Msa,
    /// `[K, d, n]`.
    pub phi_task: String,
    /// `[K, d]`.
    pub embeddings: String,
    pub experts: ExpertBank,
    /// `[K, d, 2]`.
    pub head_w: String,
    /// `[K, 2]`.
    pub head_b: String,
}

#[derive(Debug, Clone)]
pub struct TaskOutputs {
    /// `[B, K, 2]` in the model's target units.
    pub predictions: Var,
    /// Per-task `H^k = U + Y^k`, `[B, M, d]`.
    pub hidden: Vec<Var>,
    /// Per-task pooled embeddings, `[B, d]`.
    pub pooled: Vec<Var>,
    pub states: Vec<RoutingState>,
}

impl TaskMoe {
    pub fn init<R: Rng>(store: &mut ParameterStore, prefix: &str, tasks: usize, dims: BlockDims, rng: &mut R) -> Result<Self> {
        if tasks == 0 {
            return Err(Error::Config("task head needs at least one task".into()));
        }
        let (d, n) = (dims.d, dims.experts);
        let msa = Msa::init(store, &format!("{prefix}.msa"), dims, rng)?;
        let t = Self {
            tasks,
            msa,
            phi_task: format!("{prefix}.phi_task"),
            embeddings: format!("{prefix}.te"),
            experts: ExpertBank::init(store, &format!("{prefix}.experts"), n, d, EXPERT_EXPANSION * d, rng)?,
            head_w: format!("{prefix}.head_w"),
            head_b: format!("{prefix}.head_b"),
        };
        store.normal(&t.phi_task, &[tasks, d, n], SMALL_INIT_STD, rng)?;
        store.normal(&t.embeddings, &[tasks, d], SMALL_INIT_STD, rng)?;
        store.normal(&t.head_w, &[tasks, d, 2], fan_in_std(d), rng)?;
        store.normal(&t.head_b, &[tasks, 2], SMALL_INIT_STD, rng)?;
        Ok(t)
    }

    /// Fails with a configuration error unless `K = s + 1`.
    pub fn check_trajectory_length(&self, s: usize) -> Result<()> {
        if self.tasks != task_count(s) {
            return Err(Error::Config(format!(
                "task head has K = {} but trajectories have s = {s} (need K = s + 1)",
                self.tasks
            )));
        }
        Ok(())
    }

    /// `z: [B, M, d]` from the fusion stack.
    pub fn forward(&self, g: &mut Graph, z: Var) -> Result<TaskOutputs> {
        let b = g.shape(z)[0];
        let u = self.msa.forward(g, z)?;
        let phi_all = g.param(&self.phi_task)?;
        let te_all = g.param(&self.embeddings)?;
        let w_all = g.param(&self.head_w)?;
        let b_all = g.param(&self.head_b)?;
        let mut out = TaskOutputs {
            predictions: u,
            hidden: Vec::with_capacity(self.tasks),
            pooled: Vec::with_capacity(self.tasks),
            states: Vec::with_capacity(self.tasks),
        };
        let mut preds = Vec::with_capacity(self.tasks);
        for k in 0..self.tasks {
            let phi = g.select(phi_all, 0, k)?;
            let te = g.select(te_all, 0, k)?;
            let state = route(g, u, phi)?;
            let h = expert_layer(g, u, &state, &self.experts, Some(te))?;
            let pooled = pool_tokens(g, h)?;
            let w = g.select(w_all, 0, k)?;
            let bias = g.select(b_all, 0, k)?;
            let p = g.linear(pooled, w, bias)?;
            preds.push(g.reshape(p, &[b, 1, 2])?);
            out.hidden.push(h);
            out.pooled.push(pooled);
            out.states.push(state);
        }
        out.predictions = g.concat(&preds, 1)?;
        Ok(out)
    }
}

/// Layer normalization over features followed by the token mean:
/// `[B, M, d] -> [B, d]`.
pub fn pool_tokens(g: &mut Graph, h: Var) -> Result<Var> {
    let n = g.layer_norm(h);
    g.mean(n, 1)
}

/// Mean over tasks of squared Euclidean errors, averaged over the batch:
/// `sum ||p_k - t_k||^2 / (B K)` for `[B, K, 2]` inputs.
pub fn coord_loss(g: &mut Graph, predictions: Var, targets: Var) -> Result<Var> {
    let (sp, st) = (g.shape(predictions).to_vec(), g.shape(targets).to_vec());
    if sp != st || sp.len() != 3 || sp[2] != 2 {
        return Err(Error::shape_pair("coord_loss", &sp, &st));
    }
    let r = g.sub(predictions, targets)?;
    let sq = g.mul(r, r)?;
    let total = g.sum(sq);
    Ok(g.scale(total, 1.0 / (sp[0] * sp[1]) as f64))
}
