//! Train-set feature standardization and target scaling, plus minibatch
//! tensor assembly.

use serde::{Deserialize, Serialize};

use crate::diff::Tensor;
use crate::error::{Error, Result};
use crate::spatial::TrajectorySample;

const STD_FLOOR: f64 = 1e-12;

fn mean_std(sum: f64, sum_sq: f64, n: f64) -> (f64, f64) {
    let mean = sum / n;
    let var = (sum_sq / n - mean * mean).max(0.0);
    let std = var.sqrt();
    (mean, if std > STD_FLOOR { std } else { 1.0 })
}

/// Per-feature z-score statistics and the target frame. Targets are mapped
/// to `(p - center) / scale` with one isotropic scale, so squared errors in
/// metres are `scale^2` times the normalized ones.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Normalizer {
    pub num_mean: [f64; 4],
    pub num_std: [f64; 4],
    pub cfr_mean: [f64; 3],
    pub cfr_std: [f64; 3],
    pub target_center: [f64; 2],
    pub target_scale: f64,
}

impl Normalizer {
    pub fn fit(samples: &[&TrajectorySample]) -> Result<Self> {
        if samples.is_empty() {
            return Err(Error::Config("cannot fit normalization on an empty training set".into()));
        }
        let mut num = [[0.0; 2]; 4];
        let mut cfr = [[0.0; 2]; 3];
        let mut tgt = [0.0; 2];
        let (mut n_num, mut n_cfr, mut n_tgt) = (0.0, 0.0, 0.0);
        for s in samples {
            for vertex in s.v_num.chunks(4) {
                for (f, &v) in vertex.iter().enumerate() {
                    num[f][0] += v;
                    num[f][1] += v * v;
                }
                n_num += 1.0;
            }
            for vertex in &s.v_cfr {
                for (c, row) in vertex.iter().enumerate() {
                    for &v in row {
                        cfr[c][0] += v;
                        cfr[c][1] += v * v;
                    }
                }
                n_cfr += vertex[0].len() as f64;
            }
            for t in &s.targets[..s.s()] {
                tgt[0] += t[0];
                tgt[1] += t[1];
                n_tgt += 1.0;
            }
        }
        let mut out = Self {
            num_mean: [0.0; 4],
            num_std: [1.0; 4],
            cfr_mean: [0.0; 3],
            cfr_std: [1.0; 3],
            target_center: [tgt[0] / n_tgt, tgt[1] / n_tgt],
            target_scale: 1.0,
        };
        for f in 0..4 {
            (out.num_mean[f], out.num_std[f]) = mean_std(num[f][0], num[f][1], n_num);
        }
        for c in 0..3 {
            (out.cfr_mean[c], out.cfr_std[c]) = mean_std(cfr[c][0], cfr[c][1], n_cfr);
        }
        let mut sq = 0.0;
        for s in samples {
            for t in &s.targets[..s.s()] {
                sq += (t[0] - out.target_center[0]).powi(2) + (t[1] - out.target_center[1]).powi(2);
            }
        }
        let scale = (sq / (2.0 * n_tgt)).sqrt();
        out.target_scale = if scale > STD_FLOOR { scale } else { 1.0 };
        Ok(out)
    }

    pub fn num(&self, f: usize, v: f64) -> f64 {
        (v - self.num_mean[f]) / self.num_std[f]
    }

    pub fn cfr(&self, c: usize, v: f64) -> f64 {
        (v - self.cfr_mean[c]) / self.cfr_std[c]
    }

    pub fn target(&self, t: [f64; 2]) -> [f64; 2] {
        [
            (t[0] - self.target_center[0]) / self.target_scale,
            (t[1] - self.target_center[1]) / self.target_scale,
        ]
    }

    /// Maps a normalized prediction back to metres.
    pub fn position(&self, p: [f64; 2]) -> [f64; 2] {
        [
            p[0] * self.target_scale + self.target_center[0],
            p[1] * self.target_scale + self.target_center[1],
        ]
    }
}

/// Normalized model inputs for a minibatch.
#[derive(Debug, Clone)]
pub struct Batch {
    /// `[B, 4 s]`.
    pub v_num: Tensor,
    /// `[B, s, 3, N_c]`.
    pub v_cfr: Tensor,
    /// `[B, s + 1, 2]`, normalized.
    pub targets: Tensor,
}

impl Batch {
    pub fn size(&self) -> usize {
        self.v_num.shape()[0]
    }

    pub fn build(samples: &[&TrajectorySample], norm: &Normalizer) -> Result<Self> {
        let first = samples
            .first()
            .ok_or_else(|| Error::Contract("empty minibatch".into()))?;
        let (s, nc) = (first.s(), first.subcarriers());
        let b = samples.len();
        let mut num = Vec::with_capacity(b * 4 * s);
        let mut cfr = Vec::with_capacity(b * s * 3 * nc);
        let mut tgt = Vec::with_capacity(b * (s + 1) * 2);
        for smp in samples {
            if smp.s() != s || smp.subcarriers() != nc || smp.targets.len() != s + 1 {
                return Err(Error::Config(format!(
                    "mixed sample shapes in one batch: s = {} / {s}, N_c = {} / {nc}",
                    smp.s(),
                    smp.subcarriers()
                )));
            }
            for (i, &v) in smp.v_num.iter().enumerate() {
                num.push(norm.num(i % 4, v));
            }
            for vertex in &smp.v_cfr {
                for (c, row) in vertex.iter().enumerate() {
                    cfr.extend(row.iter().map(|&v| norm.cfr(c, v)));
                }
            }
            for &t in &smp.targets {
                tgt.extend(norm.target(t));
            }
        }
        Ok(Self {
            v_num: Tensor::new(&[b, 4 * s], num)?,
            v_cfr: Tensor::new(&[b, s, 3, nc], cfr)?,
            targets: Tensor::new(&[b, s + 1, 2], tgt)?,
        })
    }
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use crate::spatial::Split;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    pub(crate) fn synthetic(n: usize, s: usize, nc: usize, seed: u64) -> Vec<TrajectorySample> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|i| {
                let pts: Vec<[f64; 2]> = (0..s)
                    .map(|_| [rng.random_range(0.0..60.0), rng.random_range(0.0..60.0)])
                    .collect();
                let c = [
                    pts.iter().map(|p| p[0]).sum::<f64>() / s as f64,
                    pts.iter().map(|p| p[1]).sum::<f64>() / s as f64,
                ];
                let mut targets = pts.clone();
                targets.push(c);
                TrajectorySample {
                    v_num: (0..4 * s).map(|_| rng.random_range(-5.0..20.0)).collect(),
                    v_cfr: (0..s)
                        .map(|_| (0..3).map(|ch| (0..nc).map(|_| rng.random_range(-1.0..1.0) * (ch + 1) as f64).collect()).collect())
                        .collect(),
                    targets,
                    band_id: i % 2,
                    split: Split::Train,
                    los_flags: (0..s).map(|_| rng.random_bool(0.6)).collect(),
                    unseen_flags: vec![false; s],
                    contains_unseen: false,
                    cluster_id: 0,
                    trajectory_id: i,
                }
            })
            .collect()
    }

    #[test]
    fn standardized_train_set_has_unit_moments() {
        let samples = synthetic(40, 3, 16, 1);
        let refs: Vec<&TrajectorySample> = samples.iter().collect();
        let norm = Normalizer::fit(&refs).unwrap();
        let batch = Batch::build(&refs, &norm).unwrap();
        let check = |vals: Vec<f64>| {
            let n = vals.len() as f64;
            let m = vals.iter().sum::<f64>() / n;
            let sd = (vals.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / n).sqrt();
            assert!(m.abs() < 1e-6 && (sd - 1.0).abs() < 1e-6, "mean {m}, std {sd}");
        };
        for f in 0..4 {
            check(batch.v_num.data().iter().skip(f).step_by(4).cloned().collect());
        }
        let nc = 16;
        for c in 0..3 {
            let vals = batch
                .v_cfr
                .data()
                .chunks(nc)
                .enumerate()
                .filter(|(i, _)| i % 3 == c)
                .flat_map(|(_, r)| r.to_vec())
                .collect();
            check(vals);
        }
    }

    #[test]
    fn target_mapping_round_trips() {
        let samples = synthetic(10, 2, 8, 2);
        let refs: Vec<&TrajectorySample> = samples.iter().collect();
        let norm = Normalizer::fit(&refs).unwrap();
        let p = [12.5, 40.25];
        let back = norm.position(norm.target(p));
        assert!((back[0] - p[0]).abs() < 1e-12 && (back[1] - p[1]).abs() < 1e-12);
    }
}
