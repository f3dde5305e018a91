//! Router diversity regularizer based on squared maximum mean discrepancy
//! with a Gaussian kernel.

use serde::{Deserialize, Serialize};

use crate::diff::{Graph, Tensor, Var};
use crate::error::{Error, Result};
use crate::soft_moe::RoutingState;

pub const DEFAULT_ALPHA: f64 = 0.1;

/// How the diversity term enters the objective.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MmdSign {
    /// `L_coord - alpha L_MMD`: descent pushes routers apart.
    #[default]
    PenalizeSimilarity,
    /// `L_coord + alpha L_MMD`.
    PaperLiteral,
}

impl MmdSign {
    pub fn factor(self) -> f64 {
        match self {
            MmdSign::PenalizeSimilarity => -1.0,
            MmdSign::PaperLiteral => 1.0,
        }
    }
}

impl std::str::FromStr for MmdSign {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "penalize_similarity" => Ok(Self::PenalizeSimilarity),
            "paper_literal" => Ok(Self::PaperLiteral),
            _ => Err(Error::Config(format!("unknown mmd_sign `{s}`"))),
        }
    }
}

/// Kernel bandwidth `sqrt(d / 2)` for model width `d`.
pub fn bandwidth(d: usize) -> f64 {
    (d as f64 / 2.0).sqrt()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MmdConfig {
    pub sigma: f64,
    pub alpha: f64,
    pub sign: MmdSign,
}

impl MmdConfig {
    pub fn new(d: usize, alpha: f64, sign: MmdSign) -> Result<Self> {
        let c = Self {
            sigma: bandwidth(d),
            alpha,
            sign,
        };
        c.validate()?;
        Ok(c)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.sigma > 0.0) || !(self.alpha >= 0.0) {
            return Err(Error::Config(format!(
                "need sigma > 0 and alpha >= 0, got sigma = {}, alpha = {}",
                self.sigma, self.alpha
            )));
        }
        Ok(())
    }
}

fn gamma(sigma: f64) -> f64 {
    1.0 / (2.0 * sigma * sigma)
}

/// Orders two operands by their values so that the cross term is summed
/// identically whichever way round the caller passes them.
fn canonical(g: &Graph, a: Var, b: Var) -> (Var, Var) {
    let (da, db) = (g.value(a).data(), g.value(b).data());
    for (x, y) in da.iter().zip(db) {
        match x.total_cmp(y) {
            std::cmp::Ordering::Less => return (a, b),
            std::cmp::Ordering::Greater => return (b, a),
            std::cmp::Ordering::Equal => {}
        }
    }
    (a, b)
}

fn combine(g: &mut Graph, kaa: Var, kbb: Var, a: Var, b: Var, sigma: f64) -> Result<Var> {
    let (x, y) = canonical(g, a, b);
    let kab = g.kernel_mean(x, y, gamma(sigma))?;
    let s = g.add(kaa, kbb)?;
    let c = g.scale(kab, 2.0);
    g.sub(s, c)
}

/// Biased squared MMD between the row sets of `a` and `b`, both
/// `[..., M, w]`; returns one value per leading index (`[1]` for 2-D input).
pub fn mmd_sq(g: &mut Graph, a: Var, b: Var, sigma: f64) -> Result<Var> {
    if g.shape(a) != g.shape(b) {
        return Err(Error::shape_pair("mmd_sq", g.shape(a), g.shape(b)));
    }
    let kaa = g.kernel_mean(a, a, gamma(sigma))?;
    let kbb = g.kernel_mean(b, b, gamma(sigma))?;
    combine(g, kaa, kbb, a, b, sigma)
}

/// `2 / (K (K - 1)) sum_{p<q} [MMD^2(D^p, D^q) + MMD^2(C^p, C^q)]`, averaged
/// over the batch. Zero (with a log notice) when fewer than two routers.
pub fn diversity_loss(g: &mut Graph, states: &[RoutingState], sigma: f64) -> Result<Var> {
    let k = states.len();
    if k < 2 {
        log::info!("diversity loss needs at least two routers, got {k}; using 0");
        return Ok(g.input(Tensor::scalar(0.0)));
    }
    // each router's self-similarity term is shared by all of its pairs
    let mut own = Vec::with_capacity(k);
    for s in states {
        let kd = g.kernel_mean(s.dispatch, s.dispatch, gamma(sigma))?;
        let kc = g.kernel_mean(s.combine, s.combine, gamma(sigma))?;
        own.push((kd, kc));
    }
    let mut total = None;
    for p in 0..k {
        for q in p + 1..k {
            let md = combine(g, own[p].0, own[q].0, states[p].dispatch, states[q].dispatch, sigma)?;
            let mc = combine(g, own[p].1, own[q].1, states[p].combine, states[q].combine, sigma)?;
            let pair = g.add(md, mc)?;
            total = Some(match total {
                None => pair,
                Some(t) => g.add(t, pair)?,
            });
        }
    }
    let batch_mean = g.mean_all(total.expect("k >= 2"));
    Ok(g.scale(batch_mean, 2.0 / (k * (k - 1)) as f64))
}

/// `l_coord + sign * alpha * l_mmd`.
pub fn total_loss(g: &mut Graph, l_coord: Var, l_mmd: Var, alpha: f64, sign: MmdSign) -> Result<Var> {
    if alpha == 0.0 {
        return Ok(l_coord);
    }
    let reg = g.scale(l_mmd, sign.factor() * alpha);
    g.add(l_coord, reg)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn oracle(a: &[f64], b: &[f64], m: usize, w: usize, sigma: f64) -> f64 {
        let k = |x: &[f64], y: &[f64]| {
            let d: f64 = x.iter().zip(y).map(|(p, q)| (p - q) * (p - q)).sum();
            (-d / (2.0 * sigma * sigma)).exp()
        };
        let (mut aa, mut bb, mut ab) = (0.0, 0.0, 0.0);
        for i in 0..m {
            for j in 0..m {
                aa += k(&a[i * w..(i + 1) * w], &a[j * w..(j + 1) * w]);
                bb += k(&b[i * w..(i + 1) * w], &b[j * w..(j + 1) * w]);
                ab += k(&a[i * w..(i + 1) * w], &b[j * w..(j + 1) * w]);
            }
        }
        let mm = (m * m) as f64;
        aa / mm + bb / mm - 2.0 * ab / mm
    }

    fn eval(a: &[f64], b: &[f64], m: usize, w: usize, sigma: f64) -> f64 {
        let mut g = Graph::detached();
        let av = g.input(Tensor::new(&[m, w], a.to_vec()).unwrap());
        let bv = g.input(Tensor::new(&[m, w], b.to_vec()).unwrap());
        let r = mmd_sq(&mut g, av, bv, sigma).unwrap();
        g.value(r).item().unwrap()
    }

    fn random(n: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
        (0..n).map(|_| rng.random_range(-2.0..2.0)).collect()
    }

    #[test]
    fn matches_double_loop_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let (a, b) = (random(15, &mut rng), random(15, &mut rng));
        assert!((eval(&a, &b, 5, 3, 1.3) - oracle(&a, &b, 5, 3, 1.3)).abs() < 1e-12);
    }

    #[test]
    fn single_row_closed_form() {
        let (x, y) = ([0.3, -1.0], [1.1, 0.4]);
        let d2: f64 = (0.8f64).powi(2) + (1.4f64).powi(2);
        let want = 2.0 * (1.0 - (-d2 / 2.0).exp());
        assert!((eval(&x, &y, 1, 2, 1.0) - want).abs() < 1e-15);
    }

    #[test]
    fn translation_grid_is_monotone() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let a = random(12, &mut rng);
        let mut prev = -1.0;
        for step in 0..20 {
            let off = step as f64 * 0.25;
            let b: Vec<f64> = a.iter().map(|v| v + off).collect();
            let v = eval(&a, &b, 4, 3, 2.0);
            assert!(v >= prev - 1e-15, "offset {off}: {v} < {prev}");
            prev = v;
        }
    }

    proptest! {
        #[test]
        fn nonnegative_symmetric_and_zero_on_self(
            a in prop::collection::vec(-3.0f64..3.0, 12),
            b in prop::collection::vec(-3.0f64..3.0, 12),
            sigma in 0.2f64..4.0,
        ) {
            let ab = eval(&a, &b, 4, 3, sigma);
            prop_assert!(ab >= -1e-12);
            prop_assert_eq!(ab, eval(&b, &a, 4, 3, sigma));
            prop_assert_eq!(eval(&a, &a, 4, 3, sigma), 0.0);
        }
    }

    fn state(g: &mut Graph, logits: &[f64], m: usize, n: usize) -> RoutingState {
        let l = g.input(Tensor::new(&[1, m, n], logits.to_vec()).unwrap());
        crate::soft_moe::route_logits(g, l).unwrap()
    }

    #[test]
    fn diversity_coefficients() {
        let (m, n, sigma) = (4, 3, 2.0);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let (l1, l2) = (random(m * n, &mut rng), random(m * n, &mut rng));
        let mut g = Graph::detached();
        let s1 = state(&mut g, &l1, m, n);
        let s2 = state(&mut g, &l2, m, n);
        let s1b = state(&mut g, &l1, m, n);
        let pair = |g: &Graph, a: &RoutingState, b: &RoutingState| {
            let f = |v: Var| g.value(v).data().to_vec();
            oracle(&f(a.dispatch), &f(b.dispatch), m, n, sigma) + oracle(&f(a.combine), &f(b.combine), m, n, sigma)
        };
        let two = diversity_loss(&mut g, &[s1, s2], sigma).unwrap();
        assert!((g.value(two).item().unwrap() - pair(&g, &s1, &s2)).abs() < 1e-12);

        let three = diversity_loss(&mut g, &[s1, s1b, s2], sigma).unwrap();
        let want = 2.0 / 6.0 * (pair(&g, &s1, &s2) + pair(&g, &s1b, &s2));
        assert!((g.value(three).item().unwrap() - want).abs() < 1e-12);

        let same = diversity_loss(&mut g, &[s1, s1b], sigma).unwrap();
        assert_eq!(g.value(same).item().unwrap(), 0.0);
        let single = diversity_loss(&mut g, &[s1], sigma).unwrap();
        assert_eq!(g.value(single).item().unwrap(), 0.0);
    }

    #[test]
    fn total_loss_sign_contract() {
        let mut g = Graph::detached();
        let c = g.input(Tensor::scalar(2.0));
        let r = g.input(Tensor::scalar(0.5));
        let z = g.input(Tensor::scalar(0.0));
        let cases = [
            (r, 0.1, MmdSign::PenalizeSimilarity, 1.95),
            (r, 0.1, MmdSign::PaperLiteral, 2.05),
            (r, 0.0, MmdSign::PenalizeSimilarity, 2.0),
            (z, 0.1, MmdSign::PenalizeSimilarity, 2.0),
        ];
        for (reg, alpha, sign, want) in cases {
            let l = total_loss(&mut g, c, reg, alpha, sign).unwrap();
            assert!((g.value(l).item().unwrap() - want).abs() < 1e-15);
        }
    }

    #[test]
    fn sign_names_parse() {
        assert_eq!("paper_literal".parse::<MmdSign>().unwrap(), MmdSign::PaperLiteral);
        assert!("plus".parse::<MmdSign>().is_err());
        assert_eq!(serde_json::to_string(&MmdSign::default()).unwrap(), "\"penalize_similarity\"");
        assert!((bandwidth(32) - 4.0).abs() < 1e-15);
    }
}
