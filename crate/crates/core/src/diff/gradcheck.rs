//! Central finite-difference verification of analytic gradients.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::graph::{Graph, Var};
use super::params::ParameterStore;
use crate::error::Result;

#[derive(Debug, Clone, Copy)]
pub struct GradCheckConfig {
    pub step: f64,
    pub rel_tol: f64,
    pub abs_floor: f64,
    /// Minimum number of scalar entries to probe (all of them if fewer exist).
    pub samples: usize,
    pub seed: u64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        Self {
            step: 1e-5,
            rel_tol: 1e-4,
            abs_floor: 1e-7,
            samples: 200,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckEntry {
    pub name: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub abs_error: f64,
    pub rel_error: f64,
    pub passed: bool,
}

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub checked: usize,
    pub failures: usize,
    /// Over entries whose gradient magnitude exceeds the absolute floor.
    pub max_rel_error: f64,
    /// Largest relative errors first.
    pub worst: Vec<GradCheckEntry>,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.failures == 0
    }
}

/// Compares `loss_fn`'s analytic gradients with central differences on a
/// random subsample of scalar parameters. Every tensor contributes at least
/// one probed entry.
pub fn grad_check<F>(store: &ParameterStore, loss_fn: F, cfg: &GradCheckConfig) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph) -> Result<Var>,
{
    let analytic = {
        let mut g = Graph::new(store);
        let loss = loss_fn(&mut g)?;
        g.backward(loss)?
    };

    let tensors: Vec<(String, usize)> = store.iter().map(|(n, t)| (n.clone(), t.len())).collect();
    let total: usize = tensors.iter().map(|(_, n)| n).sum();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut probes: Vec<(usize, usize)> = Vec::new();
    if total <= cfg.samples {
        for (ti, (_, n)) in tensors.iter().enumerate() {
            probes.extend((0..*n).map(|i| (ti, i)));
        }
    } else {
        let mut flat: Vec<usize> = Vec::new();
        let mut offset = 0;
        for (_, n) in &tensors {
            flat.push(offset + sample(&mut rng, *n, 1).index(0));
            offset += n;
        }
        for i in sample(&mut rng, total, cfg.samples.min(total)).into_iter() {
            if !flat.contains(&i) {
                flat.push(i);
            }
        }
        flat.sort_unstable();
        let mut starts = Vec::with_capacity(tensors.len());
        let mut acc = 0;
        for (_, n) in &tensors {
            starts.push(acc);
            acc += n;
        }
        for f in flat {
            let ti = starts.partition_point(|&s| s <= f) - 1;
            probes.push((ti, f - starts[ti]));
        }
    }

    let eval = |s: &ParameterStore| -> Result<f64> {
        let mut g = Graph::new(s);
        let loss = loss_fn(&mut g)?;
        g.value(loss).item()
    };

    let mut work = store.clone();
    let mut entries = Vec::with_capacity(probes.len());
    for (ti, idx) in probes {
        let name = &tensors[ti].0;
        let orig = work.get(name)?.data()[idx];
        work.get_mut(name)?.data_mut()[idx] = orig + cfg.step;
        let plus = eval(&work)?;
        work.get_mut(name)?.data_mut()[idx] = orig - cfg.step;
        let minus = eval(&work)?;
        work.get_mut(name)?.data_mut()[idx] = orig;

        let numeric = (plus - minus) / (2.0 * cfg.step);
        let a = analytic.get(name).map_or(0.0, |g| g[idx]);
        let abs_error = (a - numeric).abs();
        let scale = a.abs().max(numeric.abs());
        let rel_error = if scale > 0.0 { abs_error / scale } else { 0.0 };
        let passed = abs_error <= cfg.abs_floor || rel_error <= cfg.rel_tol;
        entries.push(GradCheckEntry {
            name: name.clone(),
            index: idx,
            analytic: a,
            numeric,
            abs_error,
            rel_error,
            passed,
        });
    }

    let checked = entries.len();
    let failures = entries.iter().filter(|e| !e.passed).count();
    let max_rel_error = entries
        .iter()
        .filter(|e| e.analytic.abs().max(e.numeric.abs()) > cfg.abs_floor)
        .map(|e| e.rel_error)
        .fold(0.0, f64::max);
    entries.sort_by(|a, b| {
        (!a.passed)
            .cmp(&!b.passed)
            .reverse()
            .then(b.rel_error.total_cmp(&a.rel_error))
    });
    entries.truncate(10);
    Ok(GradCheckReport {
        checked,
        failures,
        max_rel_error,
        worst: entries,
    })
}
