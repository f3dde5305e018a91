//! Finite-difference checks of every differentiable graph op.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use scadf::diff::{grad_check, GradCheckConfig, Graph, ParameterStore, Tensor, Var};
use scadf::Result;

fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

fn store(params: &[(&str, &[usize])], seed: u64) -> ParameterStore {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut s = ParameterStore::new();
    for (name, shape) in params {
        s.insert(*name, random(shape, &mut rng)).unwrap();
    }
    s
}

/// Reduces `v` to a scalar through fixed random weights so no gradient
/// vanishes by symmetry.
fn project(g: &mut Graph, v: Var, seed: u64) -> Result<Var> {
    let shape = g.shape(v).to_vec();
    let w = g.input(random(&shape, &mut ChaCha8Rng::seed_from_u64(seed)));
    let p = g.mul(v, w)?;
    Ok(g.sum(p))
}

fn check<F>(label: &str, params: &[(&str, &[usize])], f: F)
where
    F: Fn(&mut Graph) -> Result<Var>,
{
    let s = store(params, 3);
    let cfg = GradCheckConfig {
        samples: 400,
        ..GradCheckConfig::default()
    };
    let report = grad_check(&s, |g| f(g), &cfg).unwrap();
    assert!(report.passed(), "{label}: {:?}", report.worst.first());
    assert!(report.checked > 0, "{label}: nothing checked");
}

#[test]
fn softmax_norm_at_zero() {
    let mut s = ParameterStore::new();
    s.insert("z", Tensor::zeros(&[5])).unwrap();
    let loss = |g: &mut Graph| {
        let z = g.param("z")?;
        let p = g.softmax(z, 0)?;
        let sq = g.mul(p, p)?;
        Ok(g.sum(sq))
    };
    let cfg = GradCheckConfig::default();
    assert_eq!(cfg.step, 1e-5);
    let report = grad_check(&s, loss, &cfg).unwrap();
    assert!(report.passed(), "{:?}", report.worst.first());
    assert_eq!(report.checked, 5);
    for e in &report.worst {
        assert!(e.analytic.abs() < 1e-15);
    }
}

#[test]
fn linear_mse_is_tight() {
    let s = store(&[("w", &[4, 3]), ("b", &[3])], 1);
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let x = random(&[6, 4], &mut rng);
    let y = random(&[6, 3], &mut rng);
    let report = grad_check(
        &s,
        |g| {
            let x = g.input(x.clone());
            let y = g.input(y.clone());
            let w = g.param("w")?;
            let b = g.param("b")?;
            let p = g.linear(x, w, b)?;
            let r = g.sub(p, y)?;
            let sq = g.mul(r, r)?;
            Ok(g.mean_all(sq))
        },
        &GradCheckConfig::default(),
    )
    .unwrap();
    assert!(report.max_rel_error < 1e-8, "{}", report.max_rel_error);
}

#[test]
fn matmul_and_bmm() {
    check("matmul", &[("a", &[2, 3, 4]), ("b", &[4, 5])], |g| {
        let (a, b) = (g.param("a")?, g.param("b")?);
        let y = g.matmul(a, b)?;
        project(g, y, 10)
    });
    check("bmm", &[("a", &[2, 3, 4]), ("b", &[2, 4, 2])], |g| {
        let (a, b) = (g.param("a")?, g.param("b")?);
        let y = g.bmm(a, b)?;
        project(g, y, 11)
    });
}

#[test]
fn elementwise_with_broadcast() {
    check("add", &[("a", &[3, 4]), ("b", &[4])], |g| {
        let (a, b) = (g.param("a")?, g.param("b")?);
        let y = g.add(a, b)?;
        let y = g.mul(y, y)?;
        project(g, y, 12)
    });
    check("sub", &[("a", &[2, 3]), ("b", &[1])], |g| {
        let (a, b) = (g.param("a")?, g.param("b")?);
        let y = g.sub(a, b)?;
        let y = g.mul(y, y)?;
        project(g, y, 13)
    });
    check("mul", &[("a", &[2, 3, 4]), ("b", &[3, 4])], |g| {
        let (a, b) = (g.param("a")?, g.param("b")?);
        let y = g.mul(a, b)?;
        project(g, y, 14)
    });
    check("scale", &[("a", &[7])], |g| {
        let a = g.param("a")?;
        let y = g.scale(a, -2.5);
        let y = g.mul(y, a)?;
        project(g, y, 15)
    });
}

#[test]
fn activations() {
    check("gelu", &[("a", &[3, 5])], |g| {
        let a = g.param("a")?;
        let y = g.gelu(a);
        project(g, y, 16)
    });
    check("exp", &[("a", &[3, 5])], |g| {
        let a = g.param("a")?;
        let y = g.exp(a);
        project(g, y, 17)
    });
    // Shifted away from the kink so differences do not straddle zero.
    let s = {
        let mut s = ParameterStore::new();
        s.insert("a", Tensor::new(&[4], vec![-0.7, -0.2, 0.3, 0.9]).unwrap()).unwrap();
        s
    };
    let report = grad_check(
        &s,
        |g| {
            let a = g.param("a")?;
            let y = g.relu(a);
            project(g, y, 18)
        },
        &GradCheckConfig::default(),
    )
    .unwrap();
    assert!(report.passed());
}

#[test]
fn softmax_every_axis() {
    for axis in 0..3 {
        check("softmax", &[("a", &[2, 3, 4])], |g| {
            let a = g.param("a")?;
            let y = g.softmax(a, axis)?;
            project(g, y, 19 + axis as u64)
        });
    }
}

#[test]
fn normalization() {
    check("layer_norm", &[("a", &[3, 6])], |g| {
        let a = g.param("a")?;
        let y = g.layer_norm(a);
        project(g, y, 22)
    });
    check("layer_norm_affine", &[("x", &[2, 3, 5]), ("gamma", &[5]), ("beta", &[5])], |g| {
        let (x, ga, be) = (g.param("x")?, g.param("gamma")?, g.param("beta")?);
        let y = g.layer_norm_affine(x, ga, be)?;
        project(g, y, 23)
    });
}

#[test]
fn reductions() {
    for axis in 0..3 {
        check("mean", &[("a", &[2, 3, 4])], |g| {
            let a = g.param("a")?;
            let y = g.mean(a, axis)?;
            let y = g.mul(y, y)?;
            project(g, y, 24 + axis as u64)
        });
    }
    check("mean_all", &[("a", &[3, 4])], |g| {
        let a = g.param("a")?;
        let y = g.mul(a, a)?;
        Ok(g.mean_all(y))
    });
}

#[test]
fn layout_ops() {
    check("concat", &[("a", &[2, 3]), ("b", &[2, 2])], |g| {
        let (a, b) = (g.param("a")?, g.param("b")?);
        let y = g.concat(&[a, b, a], 1)?;
        let y = g.mul(y, y)?;
        project(g, y, 30)
    });
    check("permute", &[("a", &[2, 3, 4])], |g| {
        let a = g.param("a")?;
        let y = g.permute(a, &[2, 0, 1])?;
        let y = g.mul(y, y)?;
        project(g, y, 31)
    });
    check("transpose", &[("a", &[2, 3, 4])], |g| {
        let a = g.param("a")?;
        let t = g.transpose(a)?;
        let y = g.bmm(a, t)?;
        project(g, y, 32)
    });
    check("reshape", &[("a", &[2, 6])], |g| {
        let a = g.param("a")?;
        let y = g.reshape(a, &[3, 4])?;
        let y = g.mul(y, y)?;
        project(g, y, 33)
    });
    check("select", &[("a", &[2, 3, 4])], |g| {
        let a = g.param("a")?;
        let y = g.select(a, 1, 2)?;
        let y = g.mul(y, y)?;
        project(g, y, 34)
    });
    check("narrow", &[("a", &[2, 5, 3])], |g| {
        let a = g.param("a")?;
        let y = g.narrow(a, 1, 1, 3)?;
        let y = g.mul(y, y)?;
        project(g, y, 35)
    });
}

#[test]
fn distances_and_convolution() {
    check("pairwise_sq_dist", &[("a", &[2, 3, 4]), ("b", &[2, 5, 4])], |g| {
        let (a, b) = (g.param("a")?, g.param("b")?);
        let y = g.pairwise_sq_dist(a, b)?;
        project(g, y, 36)
    });
    check("depthwise_conv1d", &[("x", &[2, 7, 3]), ("w", &[3, 3])], |g| {
        let (x, w) = (g.param("x")?, g.param("w")?);
        let y = g.depthwise_conv1d(x, w)?;
        let y = g.mul(y, y)?;
        project(g, y, 37)
    });
}

#[test]
fn kernel_mean_operands() {
    check("kernel_mean distinct", &[("a", &[4, 3]), ("b", &[6, 3])], |g| {
        let (a, b) = (g.param("a")?, g.param("b")?);
        let y = g.kernel_mean(a, b, 0.4)?;
        project(g, y, 38)
    });
    check("kernel_mean batched", &[("a", &[2, 4, 3]), ("b", &[2, 4, 3])], |g| {
        let (a, b) = (g.param("a")?, g.param("b")?);
        let y = g.kernel_mean(a, b, 0.7)?;
        project(g, y, 39)
    });
    check("kernel_mean same operand", &[("a", &[5, 3])], |g| {
        let a = g.param("a")?;
        let y = g.kernel_mean(a, a, 0.5)?;
        project(g, y, 40)
    });
    // Numerically equal but distinct nodes take the symmetric path too.
    check("kernel_mean equal copies", &[("a", &[5, 3])], |g| {
        let a = g.param("a")?;
        let b = g.scale(a, 1.0);
        let y = g.kernel_mean(a, b, 0.5)?;
        project(g, y, 41)
    });
}

#[test]
fn composite_attention_block() {
    check("attention", &[("x", &[2, 4, 6]), ("wq", &[6, 6]), ("wk", &[6, 6]), ("wv", &[6, 6])], |g| {
        let x = g.param("x")?;
        let (wq, wk, wv) = (g.param("wq")?, g.param("wk")?, g.param("wv")?);
        let q = g.matmul(x, wq)?;
        let k = g.matmul(x, wk)?;
        let v = g.matmul(x, wv)?;
        let kt = g.transpose(k)?;
        let s = g.bmm(q, kt)?;
        let s = g.scale(s, 1.0 / 6f64.sqrt());
        let a = g.softmax(s, 2)?;
        let y = g.bmm(a, v)?;
        let y = g.add(y, x)?;
        let y = g.layer_norm(y);
        project(g, y, 42)
    });
}
