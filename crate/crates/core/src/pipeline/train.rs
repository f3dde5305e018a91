//! Minibatch training with AdamW, cosine decay and best-validation
//! checkpoint selection.

use std::io::Write;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::eval::{evaluate_records, infer, MetricsRecord};
use super::model::Model;
use super::normalize::{Batch, Normalizer};
use crate::channel::derive_seed;
use crate::diff::{AdamW, Graph, ParameterStore, Tensor};
use crate::error::{Error, Result};
use crate::mmd::{diversity_loss, total_loss, MmdSign};
use crate::spatial::{Split, TrajectorySample};
use crate::task_moe::coord_loss;

#[derive(Debug, Clone)]
pub struct TrainSettings {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub alpha: f64,
    pub mmd_sign: MmdSign,
    pub sigma: f64,
    pub seed: u64,
    /// Parameters excluded from updates.
    pub frozen: Vec<String>,
}

/// Loss components of one optimizer step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepLog {
    pub epoch: usize,
    pub step: usize,
    pub lr: f64,
    pub loss: f64,
    pub coord_loss: f64,
    pub mmd_loss: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// Parameters at the best validation MSE (the final ones without a
    /// validation set).
    pub best: ParameterStore,
    pub best_epoch: Option<usize>,
    pub best_val_mse: Option<f64>,
    pub last: ParameterStore,
    pub history: Vec<MetricsRecord>,
    pub steps: Vec<StepLog>,
}

fn grad_norm(g: &crate::diff::Gradients) -> f64 {
    g.values().flat_map(|v| v.iter()).map(|x| x * x).sum::<f64>().sqrt()
}

/// Runs `settings.epochs` epochs over `train`. Every train sample must have
/// split `train`; test samples are rejected before the first step.
pub fn train<W: Write>(
    model: &Model,
    init: ParameterStore,
    train: &[&TrajectorySample],
    val: &[&TrajectorySample],
    norm: &Normalizer,
    settings: &TrainSettings,
    mut csv: Option<W>,
) -> Result<TrainOutcome> {
    if let Some(s) = train.iter().chain(val).find(|s| s.split != Split::Train) {
        return Err(Error::Contract(format!(
            "trajectory {} from the test split reached the training loop",
            s.trajectory_id
        )));
    }
    let k = model.spec.tasks();
    if let Some(s) = train.iter().chain(val).find(|s| s.s() + 1 != k || s.subcarriers() != model.spec.subcarriers) {
        return Err(Error::Config(format!(
            "sample with s = {}, N_c = {} does not fit a model with K = {k}, N_c = {}",
            s.s(),
            s.subcarriers(),
            model.spec.subcarriers
        )));
    }
    if settings.batch_size == 0 {
        return Err(Error::Config("batch_size must be positive".into()));
    }
    if let Some(w) = csv.as_mut() {
        writeln!(w, "{}", MetricsRecord::csv_header(k))?;
    }

    let steps_per_epoch = train.len().div_ceil(settings.batch_size);
    let mut opt = AdamW::new(settings.lr, settings.weight_decay, settings.epochs * steps_per_epoch);
    opt.freeze(settings.frozen.iter().cloned());
    let mut store = init;
    let mut out = TrainOutcome {
        best: store.clone(),
        best_epoch: None,
        best_val_mse: None,
        last: ParameterStore::new(),
        history: Vec::new(),
        steps: Vec::new(),
    };
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut last_grad_norm = 0.0;

    for epoch in 0..settings.epochs {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(settings.seed, epoch as u64));
        order.shuffle(&mut rng);
        let mut rec = MetricsRecord::empty(Some(epoch), "train", "all", k);
        let (mut loss_sum, mut coord_sum, mut mmd_sum, mut err_sum) = (0.0, 0.0, 0.0, 0.0);
        let mut vertices = 0;
        for idx in order.chunks(settings.batch_size) {
            let chunk: Vec<&TrajectorySample> = idx.iter().map(|&i| train[i]).collect();
            let batch = Batch::build(&chunk, norm)?;
            let lr = opt.current_lr();
            let grads;
            let (l, c, m);
            {
                let mut g = Graph::new(&store);
                let o = model.forward(&mut g, &batch)?;
                let targets = g.input(batch.targets.clone());
                let lc = coord_loss(&mut g, o.predictions, targets)?;
                // the diversity term is only built when it enters the objective
                let lm = if settings.alpha > 0.0 && o.task_states.len() >= 2 {
                    diversity_loss(&mut g, &o.task_states, settings.sigma)?
                } else {
                    g.input(Tensor::scalar(0.0))
                };
                let total = total_loss(&mut g, lc, lm, settings.alpha, settings.mmd_sign)?;
                (l, c, m) = (g.value(total).item()?, g.value(lc).item()?, g.value(lm).item()?);
                if !l.is_finite() {
                    return Err(Error::Numerical(format!(
                        "non-finite loss {l} at epoch {epoch}, step {} (lr {lr:.3e}, last grad norm {last_grad_norm:.3e})",
                        opt.step_count()
                    )));
                }
                let p = g.value(o.predictions).data();
                let t = batch.targets.data();
                let scale2 = norm.target_scale * norm.target_scale;
                for (si, smp) in chunk.iter().enumerate() {
                    for v in 0..smp.s() {
                        let i = (si * k + v) * 2;
                        err_sum += ((p[i] - t[i]).powi(2) + (p[i + 1] - t[i + 1]).powi(2)) * scale2;
                        vertices += 1;
                    }
                }
                grads = g.backward(total)?;
            }
            last_grad_norm = grad_norm(&grads);
            if !last_grad_norm.is_finite() {
                return Err(Error::Numerical(format!(
                    "non-finite gradient at epoch {epoch}, step {} (lr {lr:.3e})",
                    opt.step_count()
                )));
            }
            store.set_grads(&grads)?;
            opt.step(&mut store)?;
            store.clear_grads();
            let w = chunk.len() as f64;
            loss_sum += l * w;
            coord_sum += c * w;
            mmd_sum += m * w;
            out.steps.push(StepLog {
                epoch,
                step: out.steps.len(),
                lr,
                loss: l,
                coord_loss: c,
                mmd_loss: m,
            });
        }
        let n = train.len().max(1) as f64;
        rec.trajectories = train.len();
        rec.vertices = vertices;
        rec.mse = (vertices > 0).then(|| err_sum / vertices as f64);
        rec.loss = Some(loss_sum / n);
        rec.coord_loss = Some(coord_sum / n);
        rec.mmd_loss = Some(mmd_sum / n);
        rec.lr = Some(opt.current_lr());
        let mut records = vec![rec];

        if val.is_empty() {
            out.best_epoch = Some(epoch);
        } else {
            let inf = infer(model, &store, val, norm, settings.batch_size, None)?;
            let v = evaluate_records(Some(epoch), "val", val, &inf, k).swap_remove(0);
            let mse = v.mse.unwrap_or(f64::INFINITY);
            if out.best_val_mse.is_none_or(|b| mse < b) {
                out.best_val_mse = Some(mse);
                out.best_epoch = Some(epoch);
                out.best = store.clone();
            }
            records.push(v);
        }
        if let Some(w) = csv.as_mut() {
            for r in &records {
                writeln!(w, "{}", r.csv_row())?;
            }
        }
        log::info!(
            "epoch {epoch}: loss {:.5}, train mse {:.4} m^2{}",
            loss_sum / n,
            records[0].mse.unwrap_or(f64::NAN),
            records.get(1).and_then(|r| r.mse).map(|m| format!(", val mse {m:.4} m^2")).unwrap_or_default()
        );
        out.history.extend(records);
    }
    if val.is_empty() {
        out.best = store.clone();
    }
    out.last = store;
    Ok(out)
}
