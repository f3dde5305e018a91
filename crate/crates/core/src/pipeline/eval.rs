//! Inference, localization metrics and routing diagnostics.

use std::io::Write;

use serde::{Deserialize, Serialize};

use super::model::Model;
use super::normalize::{Batch, Normalizer};
use crate::diff::{Graph, ParameterStore};
use crate::error::Result;
use crate::mmd::diversity_loss;
use crate::soft_moe::RoutingState;
use crate::spatial::TrajectorySample;
use crate::task_moe::coord_loss;

/// Model output for one sample, in metres.
#[derive(Debug, Clone, PartialEq)]
pub struct SamplePrediction {
    /// `s` vertices then the centroid.
    pub points: Vec<[f64; 2]>,
    /// Mean column entropy (nats) of each task router's dispatch matrix.
    pub dispatch_entropy: Vec<f64>,
}

/// Entropy summary of one router on one batch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoutingSummary {
    pub batch: usize,
    pub router: String,
    /// Per expert: entropy of its dispatch column over tokens, batch mean.
    pub dispatch_entropy: Vec<f64>,
    /// Mean entropy of the combine rows over experts.
    pub combine_entropy: f64,
}

#[derive(Debug, Clone)]
pub struct Inference {
    pub predictions: Vec<SamplePrediction>,
    /// Mean normalized coordinate loss.
    pub coord_loss: f64,
    /// Mean task-router diversity, `None` without task routers.
    pub router_mmd: Option<f64>,
    pub routing: Vec<RoutingSummary>,
}

/// `values: [B, M, n]`; returns per-sample per-column entropies over `M`
/// and per-sample mean row entropy over `n`.
fn entropies(g: &Graph, state: &RoutingState) -> (Vec<Vec<f64>>, Vec<f64>) {
    let shape = g.shape(state.dispatch);
    let (b, m, n) = (shape[0], shape[1], shape[2]);
    let h = |p: f64| if p > 0.0 { -p * p.ln() } else { 0.0 };
    let dd = g.value(state.dispatch).data();
    let cc = g.value(state.combine).data();
    let mut cols = vec![vec![0.0; n]; b];
    let mut rows = vec![0.0; b];
    for s in 0..b {
        for i in 0..m {
            for j in 0..n {
                let idx = (s * m + i) * n + j;
                cols[s][j] += h(dd[idx]);
                rows[s] += h(cc[idx]) / m as f64;
            }
        }
    }
    (cols, rows)
}

fn summarize_router(g: &Graph, state: &RoutingState, batch: usize, router: String) -> RoutingSummary {
    let (cols, rows) = entropies(g, state);
    let b = rows.len() as f64;
    let n = cols[0].len();
    RoutingSummary {
        batch,
        router,
        dispatch_entropy: (0..n).map(|j| cols.iter().map(|c| c[j]).sum::<f64>() / b).collect(),
        combine_entropy: rows.iter().sum::<f64>() / b,
    }
}

/// Runs the model over `samples` in fixed-order batches. Task-router
/// diversity is measured only when a kernel bandwidth `sigma` is given.
pub fn infer(
    model: &Model,
    store: &ParameterStore,
    samples: &[&TrajectorySample],
    norm: &Normalizer,
    batch_size: usize,
    sigma: Option<f64>,
) -> Result<Inference> {
    let mut out = Inference {
        predictions: Vec::with_capacity(samples.len()),
        coord_loss: 0.0,
        router_mmd: None,
        routing: Vec::new(),
    };
    let mut mmd_sum = 0.0;
    let mut has_mmd = false;
    for (bi, chunk) in samples.chunks(batch_size.max(1)).enumerate() {
        let batch = Batch::build(chunk, norm)?;
        let mut g = Graph::new(store);
        let o = model.forward(&mut g, &batch)?;
        let targets = g.input(batch.targets.clone());
        let l = coord_loss(&mut g, o.predictions, targets)?;
        out.coord_loss += g.value(l).item()? * chunk.len() as f64;
        if let (Some(sigma), true) = (sigma, o.task_states.len() >= 2) {
            let d = diversity_loss(&mut g, &o.task_states, sigma)?;
            mmd_sum += g.value(d).item()? * chunk.len() as f64;
            has_mmd = true;
        }
        let task_h: Vec<Vec<f64>> = o
            .task_states
            .iter()
            .map(|s| entropies(&g, s).0.iter().map(|c| c.iter().sum::<f64>() / c.len() as f64).collect())
            .collect();
        let p = g.value(o.predictions).data();
        let k = model.spec.tasks();
        for (si, _) in chunk.iter().enumerate() {
            let points = (0..k)
                .map(|t| {
                    let base = (si * k + t) * 2;
                    norm.position([p[base], p[base + 1]])
                })
                .collect();
            out.predictions.push(SamplePrediction {
                points,
                dispatch_entropy: task_h.iter().map(|h| h[si]).collect(),
            });
        }
        for (l, s) in o.fusion_states.iter().enumerate() {
            out.routing.push(summarize_router(&g, s, bi, format!("fusion.{l}")));
        }
        for (t, s) in o.task_states.iter().enumerate() {
            out.routing.push(summarize_router(&g, s, bi, format!("task.{t}")));
        }
    }
    let n = samples.len().max(1) as f64;
    out.coord_loss /= n;
    if has_mmd {
        out.router_mmd = Some(mmd_sum / n);
    }
    Ok(out)
}

/// One row of the metrics CSV.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub epoch: Option<usize>,
    pub split: String,
    /// Band index, or `all`.
    pub band: String,
    pub trajectories: usize,
    pub vertices: usize,
    pub mse: Option<f64>,
    pub los_mse: Option<f64>,
    pub nlos_mse: Option<f64>,
    pub nlos_u_mse: Option<f64>,
    pub centroid_mse: Option<f64>,
    pub los_vertices: usize,
    pub nlos_vertices: usize,
    pub nlos_u_vertices: usize,
    pub loss: Option<f64>,
    pub coord_loss: Option<f64>,
    pub mmd_loss: Option<f64>,
    pub router_mmd: Option<f64>,
    pub lr: Option<f64>,
    pub task_mse: Vec<Option<f64>>,
    pub task_dispatch_entropy: Vec<Option<f64>>,
}

fn ratio(sum: f64, n: usize) -> Option<f64> {
    (n > 0).then(|| sum / n as f64)
}

fn cell(v: Option<f64>) -> String {
    v.map(|x| format!("{x}")).unwrap_or_default()
}

impl MetricsRecord {
    pub fn empty(epoch: Option<usize>, split: &str, band: &str, tasks: usize) -> Self {
        Self {
            epoch,
            split: split.into(),
            band: band.into(),
            trajectories: 0,
            vertices: 0,
            mse: None,
            los_mse: None,
            nlos_mse: None,
            nlos_u_mse: None,
            centroid_mse: None,
            los_vertices: 0,
            nlos_vertices: 0,
            nlos_u_vertices: 0,
            loss: None,
            coord_loss: None,
            mmd_loss: None,
            router_mmd: None,
            lr: None,
            task_mse: vec![None; tasks],
            task_dispatch_entropy: vec![None; tasks],
        }
    }

    /// Error statistics of `preds` against `samples` (paired by index).
    pub fn from_predictions(
        epoch: Option<usize>,
        split: &str,
        band: &str,
        samples: &[&TrajectorySample],
        preds: &[&SamplePrediction],
        tasks: usize,
    ) -> Self {
        let mut r = Self::empty(epoch, split, band, tasks);
        let (mut all, mut los, mut nlos, mut nlos_u, mut cen) = (0.0, 0.0, 0.0, 0.0, 0.0);
        let mut task = vec![0.0; tasks];
        let mut ent = vec![0.0; tasks];
        for (s, p) in samples.iter().zip(preds) {
            let sv = s.s();
            for v in 0..sv {
                let (t, q) = (s.targets[v], p.points[v]);
                let e = (q[0] - t[0]).powi(2) + (q[1] - t[1]).powi(2);
                all += e;
                r.vertices += 1;
                task[v] += e;
                if s.los_flags[v] {
                    los += e;
                    r.los_vertices += 1;
                } else {
                    nlos += e;
                    r.nlos_vertices += 1;
                    if s.unseen_flags[v] {
                        nlos_u += e;
                        r.nlos_u_vertices += 1;
                    }
                }
            }
            let (t, q) = (s.targets[sv], p.points[sv]);
            let e = (q[0] - t[0]).powi(2) + (q[1] - t[1]).powi(2);
            cen += e;
            task[sv] += e;
            for (k, h) in p.dispatch_entropy.iter().enumerate() {
                ent[k] += h;
            }
            r.trajectories += 1;
        }
        r.mse = ratio(all, r.vertices);
        r.los_mse = ratio(los, r.los_vertices);
        r.nlos_mse = ratio(nlos, r.nlos_vertices);
        r.nlos_u_mse = ratio(nlos_u, r.nlos_u_vertices);
        r.centroid_mse = ratio(cen, r.trajectories);
        r.task_mse = task.iter().map(|&t| ratio(t, r.trajectories)).collect();
        let has_entropy = preds.first().is_some_and(|p| !p.dispatch_entropy.is_empty());
        if has_entropy {
            r.task_dispatch_entropy = ent.iter().map(|&h| ratio(h, r.trajectories)).collect();
        }
        r
    }

    pub fn csv_header(tasks: usize) -> String {
        let mut cols: Vec<String> = [
            "epoch",
            "split",
            "band",
            "trajectories",
            "vertices",
            "mse",
            "los_mse",
            "nlos_mse",
            "nlos_u_mse",
            "centroid_mse",
            "los_vertices",
            "nlos_vertices",
            "nlos_u_vertices",
            "loss",
            "coord_loss",
            "mmd_loss",
            "router_mmd",
            "lr",
        ]
        .iter()
        .map(|s| s.to_string())
        .collect();
        cols.extend((0..tasks).map(|k| format!("task_{k}_mse")));
        cols.extend((0..tasks).map(|k| format!("task_{k}_dispatch_entropy")));
        cols.join(",")
    }

    pub fn csv_row(&self) -> String {
        let mut cols = vec![
            self.epoch.map(|e| e.to_string()).unwrap_or_default(),
            self.split.clone(),
            self.band.clone(),
            self.trajectories.to_string(),
            self.vertices.to_string(),
            cell(self.mse),
            cell(self.los_mse),
            cell(self.nlos_mse),
            cell(self.nlos_u_mse),
            cell(self.centroid_mse),
            self.los_vertices.to_string(),
            self.nlos_vertices.to_string(),
            self.nlos_u_vertices.to_string(),
            cell(self.loss),
            cell(self.coord_loss),
            cell(self.mmd_loss),
            cell(self.router_mmd),
            cell(self.lr),
        ];
        cols.extend(self.task_mse.iter().map(|&v| cell(v)));
        cols.extend(self.task_dispatch_entropy.iter().map(|&v| cell(v)));
        cols.join(",")
    }
}

pub fn write_csv<W: Write>(mut w: W, tasks: usize, records: &[MetricsRecord]) -> Result<()> {
    writeln!(w, "{}", MetricsRecord::csv_header(tasks))?;
    for r in records {
        writeln!(w, "{}", r.csv_row())?;
    }
    Ok(())
}

/// Records for all samples plus one per band present, in band order.
pub fn evaluate_records(
    epoch: Option<usize>,
    split: &str,
    samples: &[&TrajectorySample],
    inference: &Inference,
    tasks: usize,
) -> Vec<MetricsRecord> {
    let preds: Vec<&SamplePrediction> = inference.predictions.iter().collect();
    let mut all = MetricsRecord::from_predictions(epoch, split, "all", samples, &preds, tasks);
    all.coord_loss = Some(inference.coord_loss);
    all.router_mmd = inference.router_mmd;
    let mut out = vec![all];
    let mut bands: Vec<usize> = samples.iter().map(|s| s.band_id).collect();
    bands.sort_unstable();
    bands.dedup();
    for b in bands {
        let (ss, pp): (Vec<&TrajectorySample>, Vec<&SamplePrediction>) = samples
            .iter()
            .zip(&preds)
            .filter(|(s, _)| s.band_id == b)
            .map(|(s, p)| (*s, *p))
            .unzip();
        out.push(MetricsRecord::from_predictions(epoch, split, &b.to_string(), &ss, &pp, tasks));
    }
    if samples.is_empty() {
        log::info!("evaluation slice `{split}` is empty");
    }
    out
}
