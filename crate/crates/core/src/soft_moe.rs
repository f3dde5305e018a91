//! Soft mixture-of-experts fusion blocks.
//!
//! All tensors carry a leading batch axis: tokens are `[B, M, d]`, routing
//! matrices are `[B, M, n]`.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::diff::{Graph, ParameterStore, Var};
use crate::error::{Error, Result};
use crate::nn::{ExpertBank, LayerNorm, Linear, SMALL_INIT_STD};

/// Expert hidden width is `EXPERT_EXPANSION * d`.
pub const EXPERT_EXPANSION: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BlockDims {
    pub d: usize,
    pub heads: usize,
    pub experts: usize,
    pub pre_norm: bool,
}

impl BlockDims {
    pub fn validate(&self) -> Result<()> {
        if self.d == 0 || self.heads == 0 || self.d % self.heads != 0 {
            return Err(Error::Config(format!("heads {} must divide width {}", self.heads, self.d)));
        }
        if self.experts == 0 {
            return Err(Error::Config("need at least one expert".into()));
        }
        Ok(())
    }
}

/// Multi-head self-attention with a residual add: `U = X + MSA(LN(X))`, the
/// norm being present only when `pre_norm` is set.
#[derive(Debug, Clone)]
pub struct Msa {
    pub heads: usize,
    pub norm: Option<LayerNorm>,
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub out: Linear,
}

impl Msa {
    pub fn init<R: Rng>(store: &mut ParameterStore, prefix: &str, dims: BlockDims, rng: &mut R) -> Result<Self> {
        dims.validate()?;
        let d = dims.d;
        let norm = if dims.pre_norm {
            Some(LayerNorm::init(store, &format!("{prefix}.ln"), d)?)
        } else {
            None
        };
        Ok(Self {
            heads: dims.heads,
            norm,
            q: Linear::init(store, &format!("{prefix}.q"), d, d, rng)?,
            k: Linear::init(store, &format!("{prefix}.k"), d, d, rng)?,
            v: Linear::init(store, &format!("{prefix}.v"), d, d, rng)?,
            out: Linear::init(store, &format!("{prefix}.out"), d, d, rng)?,
        })
    }

    /// `x: [B, M, d] -> [B, M, d]`.
    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let shape = g.shape(x).to_vec();
        if shape.len() != 3 || shape[1] == 0 {
            return Err(Error::Shape(format!("attention input {shape:?}, expected [B, M, d]")));
        }
        let (b, m, d) = (shape[0], shape[1], shape[2]);
        let h = self.heads;
        let dh = d / h;
        let xn = match &self.norm {
            Some(ln) => ln.forward(g, x)?,
            None => x,
        };
        let split = |g: &mut Graph, t: Var| -> Result<Var> {
            let t = g.reshape(t, &[b, m, h, dh])?;
            g.permute(t, &[0, 2, 1, 3])
        };
        let q = self.q.forward(g, xn)?;
        let q = split(g, q)?;
        let k = self.k.forward(g, xn)?;
        let k = split(g, k)?;
        let v = self.v.forward(g, xn)?;
        let v = split(g, v)?;
        let kt = g.transpose(k)?;
        let scores = g.bmm(q, kt)?;
        let scores = g.scale(scores, 1.0 / (dh as f64).sqrt());
        let attn = g.softmax(scores, 3)?;
        let ctx = g.bmm(attn, v)?; // [B, h, M, dh]
        let ctx = g.permute(ctx, &[0, 2, 1, 3])?;
        let ctx = g.reshape(ctx, &[b, m, d])?;
        let y = self.out.forward(g, ctx)?;
        g.add(x, y)
    }
}

/// Dispatch and combine weights derived from one logit matrix.
#[derive(Debug, Clone, Copy)]
pub struct RoutingState {
    /// `U Phi`, `[B, M, n]`.
    pub logits: Var,
    /// Softmax over tokens: every column sums to one.
    pub dispatch: Var,
    /// Softmax over experts: every row sums to one.
    pub combine: Var,
}

pub fn route(g: &mut Graph, u: Var, phi: Var) -> Result<RoutingState> {
    let logits = g.matmul(u, phi)?;
    route_logits(g, logits)
}

pub fn route_logits(g: &mut Graph, logits: Var) -> Result<RoutingState> {
    if g.shape(logits).len() != 3 {
        return Err(Error::Shape(format!("routing logits {:?}, expected [B, M, n]", g.shape(logits))));
    }
    let dispatch = g.softmax(logits, 1)?;
    let combine = g.softmax(logits, 2)?;
    Ok(RoutingState {
        logits,
        dispatch,
        combine,
    })
}

/// `Z = U + C f(D^T U + te)`, with `te: [d]` added to every expert input.
pub fn expert_layer(g: &mut Graph, u: Var, state: &RoutingState, experts: &ExpertBank, te: Option<Var>) -> Result<Var> {
    let dt = g.transpose(state.dispatch)?;
    let mut slots = g.bmm(dt, u)?; // [B, n, d]
    if let Some(te) = te {
        slots = g.add(slots, te)?;
    }
    let y_slots = experts.forward(g, slots)?;
    let y = g.bmm(state.combine, y_slots)?;
    g.add(u, y)
}

#[derive(Debug, Clone)]
pub struct SoftMoeBlock {
    pub msa: Msa,
    pub phi: String,
    pub experts: ExpertBank,
}

impl SoftMoeBlock {
    pub fn init<R: Rng>(store: &mut ParameterStore, prefix: &str, dims: BlockDims, rng: &mut R) -> Result<Self> {
        let msa = Msa::init(store, &format!("{prefix}.msa"), dims, rng)?;
        let phi = format!("{prefix}.phi");
        store.normal(&phi, &[dims.d, dims.experts], SMALL_INIT_STD, rng)?;
        let experts = ExpertBank::init(
            store,
            &format!("{prefix}.experts"),
            dims.experts,
            dims.d,
            EXPERT_EXPANSION * dims.d,
            rng,
        )?;
        Ok(Self { msa, phi, experts })
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<(Var, RoutingState)> {
        let u = self.msa.forward(g, x)?;
        let phi = g.param(&self.phi)?;
        let state = route(g, u, phi)?;
        let z = expert_layer(g, u, &state, &self.experts, None)?;
        Ok((z, state))
    }
}

#[derive(Debug, Clone)]
pub struct SoftMoeStack {
    pub blocks: Vec<SoftMoeBlock>,
}

impl SoftMoeStack {
    pub fn init<R: Rng>(store: &mut ParameterStore, prefix: &str, depth: usize, dims: BlockDims, rng: &mut R) -> Result<Self> {
        if depth == 0 {
            return Err(Error::Config("fusion depth must be at least 1".into()));
        }
        let blocks = (0..depth)
            .map(|l| SoftMoeBlock::init(store, &format!("{prefix}.{l}"), dims, rng))
            .collect::<Result<_>>()?;
        Ok(Self { blocks })
    }

    /// Returns the final tokens and each block's routing state.
    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<(Var, Vec<RoutingState>)> {
        let mut z = x;
        let mut states = Vec::with_capacity(self.blocks.len());
        for b in &self.blocks {
            let (next, s) = b.forward(g, z)?;
            z = next;
            states.push(s);
        }
        Ok((z, states))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diff::Tensor;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, Normal};

    fn randn(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
        let n: usize = shape.iter().product();
        let dist = Normal::new(0.0, 1.0).unwrap();
        Tensor::new(shape, (0..n).map(|_| dist.sample(rng)).collect()).unwrap()
    }

    fn dims(d: usize, heads: usize, experts: usize, pre_norm: bool) -> BlockDims {
        BlockDims {
            d,
            heads,
            experts,
            pre_norm,
        }
    }

    fn zero(store: &mut ParameterStore, prefix: &str) {
        let names: Vec<String> = store.names().filter(|n| n.starts_with(prefix)).cloned().collect();
        for n in names {
            store.get_mut(&n).unwrap().data_mut().fill(0.0);
        }
    }

    #[test]
    fn single_token_attention_is_value_projection() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut store = ParameterStore::new();
        let msa = Msa::init(&mut store, "a", dims(4, 2, 1, false), &mut rng).unwrap();
        let x = randn(&[1, 1, 4], &mut rng);
        let mut g = Graph::new(&store);
        let xv = g.input(x.clone());
        let u = msa.forward(&mut g, xv).unwrap();
        let v = msa.v.forward(&mut g, xv).unwrap();
        let o = msa.out.forward(&mut g, v).unwrap();
        let want = g.add(xv, o).unwrap();
        for (a, b) in g.value(u).data().iter().zip(g.value(want).data()) {
            assert!((a - b).abs() < 1e-14);
        }
    }

    #[test]
    fn zero_projections_give_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut store = ParameterStore::new();
        let msa = Msa::init(&mut store, "a", dims(8, 2, 1, true), &mut rng).unwrap();
        zero(&mut store, "a.out");
        let x = randn(&[2, 5, 8], &mut rng);
        let mut g = Graph::new(&store);
        let xv = g.input(x.clone());
        let u = msa.forward(&mut g, xv).unwrap();
        assert_eq!(g.value(u).data(), x.data());
    }

    #[test]
    fn attention_matches_naive_oracle() {
        let (m, d) = (3, 4);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut store = ParameterStore::new();
        let msa = Msa::init(&mut store, "a", dims(d, 1, 1, false), &mut rng).unwrap();
        let x = randn(&[1, m, d], &mut rng);
        let mut g = Graph::new(&store);
        let xv = g.input(x.clone());
        let u = msa.forward(&mut g, xv).unwrap();

        let lin = |l: &Linear, row: &[f64]| -> Vec<f64> {
            let w = store.get(&l.w).unwrap().data();
            let b = store.get(&l.b).unwrap().data();
            (0..d).map(|j| b[j] + (0..d).map(|i| row[i] * w[i * d + j]).sum::<f64>()).collect()
        };
        let rows: Vec<&[f64]> = x.data().chunks(d).collect();
        let q: Vec<Vec<f64>> = rows.iter().map(|r| lin(&msa.q, r)).collect();
        let k: Vec<Vec<f64>> = rows.iter().map(|r| lin(&msa.k, r)).collect();
        let v: Vec<Vec<f64>> = rows.iter().map(|r| lin(&msa.v, r)).collect();
        for i in 0..m {
            let s: Vec<f64> = (0..m)
                .map(|j| (0..d).map(|c| q[i][c] * k[j][c]).sum::<f64>() / (d as f64).sqrt())
                .collect();
            let z: f64 = s.iter().map(|x| x.exp()).sum();
            let ctx: Vec<f64> = (0..d).map(|c| (0..m).map(|j| s[j].exp() / z * v[j][c]).sum()).collect();
            let o = lin(&msa.out, &ctx);
            for c in 0..d {
                let want = rows[i][c] + o[c];
                assert!((g.value(u).data()[i * d + c] - want).abs() < 1e-12);
            }
        }
    }

    fn route_values(logits: Vec<f64>, m: usize, n: usize) -> (Vec<f64>, Vec<f64>) {
        let mut g = Graph::detached();
        let l = g.input(Tensor::new(&[1, m, n], logits).unwrap());
        let s = route_logits(&mut g, l).unwrap();
        (g.value(s.dispatch).data().to_vec(), g.value(s.combine).data().to_vec())
    }

    #[test]
    fn uniform_logits_route_uniformly() {
        let (dd, cc) = route_values(vec![0.0; 6], 3, 2);
        assert!(dd.iter().all(|v| (v - 1.0 / 3.0).abs() < 1e-15));
        assert!(cc.iter().all(|v| (v - 0.5).abs() < 1e-15));
    }

    #[test]
    fn ln3_routing_example() {
        let (dd, cc) = route_values(vec![3f64.ln(), 0.0, 0.0, 0.0], 2, 2);
        assert!((dd[0] - 0.75).abs() < 1e-15 && (dd[2] - 0.25).abs() < 1e-15);
        assert!((cc[0] - 0.75).abs() < 1e-15 && (cc[1] - 0.25).abs() < 1e-15);
    }

    #[test]
    fn routing_is_shift_invariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let l = randn(&[1, 4, 3], &mut rng).into_data();
        let shifted: Vec<f64> = l.iter().map(|v| v + 7.5).collect();
        let (d1, c1) = route_values(l, 4, 3);
        let (d2, c2) = route_values(shifted, 4, 3);
        for (a, b) in d1.iter().chain(&c1).zip(d2.iter().chain(&c2)) {
            assert!((a - b).abs() < 1e-14);
        }
    }

    fn random_bank(store: &mut ParameterStore, n: usize, d: usize, rng: &mut ChaCha8Rng) -> ExpertBank {
        ExpertBank::init(store, "e", n, d, 4 * d, rng).unwrap()
    }

    #[test]
    fn identity_experts_with_uniform_routing_add_the_mean() {
        // identity experts: combine the dispatched slots unchanged
        let (b, m, d, n) = (1, 4, 3, 2);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let u = randn(&[b, m, d], &mut rng);
        let mut g = Graph::detached();
        let uv = g.input(u.clone());
        let l = g.input(Tensor::zeros(&[b, m, n]));
        let s = route_logits(&mut g, l).unwrap();
        let dt = g.transpose(s.dispatch).unwrap();
        let slots = g.bmm(dt, uv).unwrap();
        let y = g.bmm(s.combine, slots).unwrap();
        let z = g.add(uv, y).unwrap();
        for c in 0..d {
            let mean = (0..m).map(|i| u.data()[i * d + c]).sum::<f64>() / m as f64;
            for i in 0..m {
                assert!((g.value(z).data()[i * d + c] - (u.data()[i * d + c] + mean)).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn zero_experts_leave_tokens_unchanged() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let mut store = ParameterStore::new();
        let bank = random_bank(&mut store, 3, 4, &mut rng);
        zero(&mut store, "e.w2");
        zero(&mut store, "e.b2");
        store.normal("phi", &[4, 3], 1.0, &mut rng).unwrap();
        let u = randn(&[2, 5, 4], &mut rng);
        let mut g = Graph::new(&store);
        let uv = g.input(u.clone());
        let phi = g.param("phi").unwrap();
        let s = route(&mut g, uv, phi).unwrap();
        let z = expert_layer(&mut g, uv, &s, &bank, None).unwrap();
        assert_eq!(g.value(z).data(), u.data());
    }

    #[test]
    fn single_expert_closed_form() {
        let (m, d) = (5, 3);
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut store = ParameterStore::new();
        let bank = random_bank(&mut store, 1, d, &mut rng);
        store.normal("phi", &[d, 1], 1.0, &mut rng).unwrap();
        let u = randn(&[1, m, d], &mut rng);
        let mut g = Graph::new(&store);
        let uv = g.input(u.clone());
        let phi = g.param("phi").unwrap();
        let s = route(&mut g, uv, phi).unwrap();
        assert!(g.value(s.combine).data().iter().all(|&c| c == 1.0));
        let z = expert_layer(&mut g, uv, &s, &bank, None).unwrap();

        let p = store.get("phi").unwrap().data();
        let logit: Vec<f64> = (0..m).map(|i| (0..d).map(|c| u.data()[i * d + c] * p[c]).sum()).collect();
        let mx = logit.iter().cloned().fold(f64::MIN, f64::max);
        let w: Vec<f64> = logit.iter().map(|l| (l - mx).exp()).collect();
        let tot: f64 = w.iter().sum();
        let slot: Vec<f64> = (0..d)
            .map(|c| (0..m).map(|i| w[i] / tot * u.data()[i * d + c]).sum())
            .collect();
        let mut g2 = Graph::new(&store);
        let sv = g2.input(Tensor::new(&[1, 1, d], slot).unwrap());
        let y = bank.forward(&mut g2, sv).unwrap();
        let y = g2.value(y).data().to_vec();
        for i in 0..m {
            for c in 0..d {
                assert!((g.value(z).data()[i * d + c] - (u.data()[i * d + c] + y[c])).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn block_is_permutation_equivariant() {
        let (m, d) = (6, 8);
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let mut store = ParameterStore::new();
        let stack = SoftMoeStack::init(&mut store, "f", 2, dims(d, 2, 3, true), &mut rng).unwrap();
        let x = randn(&[1, m, d], &mut rng);
        let perm = [3, 0, 5, 1, 4, 2];
        let mut xp = Vec::new();
        for &p in &perm {
            xp.extend_from_slice(&x.data()[p * d..(p + 1) * d]);
        }
        let mut g = Graph::new(&store);
        let a = g.input(x);
        let b = g.input(Tensor::new(&[1, m, d], xp).unwrap());
        let (za, _) = stack.forward(&mut g, a).unwrap();
        let (zb, _) = stack.forward(&mut g, b).unwrap();
        for (i, &p) in perm.iter().enumerate() {
            for c in 0..d {
                let (va, vb) = (g.value(za).data()[p * d + c], g.value(zb).data()[i * d + c]);
                assert!((va - vb).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn stack_composes_blocks_and_keeps_shape() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut store = ParameterStore::new();
        let stack = SoftMoeStack::init(&mut store, "f", 2, dims(8, 4, 2, true), &mut rng).unwrap();
        let x = randn(&[3, 7, 8], &mut rng);
        let mut g = Graph::new(&store);
        let xv = g.input(x);
        let (z, states) = stack.forward(&mut g, xv).unwrap();
        let (z0, _) = stack.blocks[0].forward(&mut g, xv).unwrap();
        let (z1, _) = stack.blocks[1].forward(&mut g, z0).unwrap();
        assert_eq!(g.shape(z), &[3, 7, 8]);
        assert_eq!(states.len(), 2);
        assert_eq!(g.value(z).data(), g.value(z1).data());
        assert!(SoftMoeStack::init(&mut ParameterStore::new(), "f", 0, dims(8, 4, 2, true), &mut rng).is_err());
    }

    #[test]
    fn router_receives_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let mut store = ParameterStore::new();
        let block = SoftMoeBlock::init(&mut store, "f", dims(8, 2, 3, true), &mut rng).unwrap();
        let x = randn(&[2, 5, 8], &mut rng);
        let probe = randn(&[2, 5, 8], &mut rng);
        let mut g = Graph::new(&store);
        let xv = g.input(x);
        let pv = g.input(probe);
        let (z, _) = block.forward(&mut g, xv).unwrap();
        let p = g.mul(z, pv).unwrap();
        let loss = g.sum(p);
        let grads = g.backward(loss).unwrap();
        assert!(grads["f.phi"].iter().any(|v| v.abs() > 1e-8));
    }

    #[test]
    fn heads_must_divide_width() {
        assert!(matches!(dims(6, 4, 2, true).validate(), Err(Error::Config(_))));
    }
}
