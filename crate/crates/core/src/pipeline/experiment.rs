//! End-to-end experiment runs: data preparation, train/validation/test
//! partition, training, evaluation and persistence.

use std::collections::BTreeSet;
use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::config::{Ablation, ExperimentConfig, SplitMode};
use super::eval::{evaluate_records, infer, Inference, MetricsRecord};
use super::model::{Model, ModelSpec};
use super::normalize::{Batch, Normalizer};
use super::train::{train, TrainOutcome, TrainSettings};
use crate::channel::derive_seed;
use crate::diff::{checkpoint, grad_check, GradCheckConfig, GradCheckReport, Graph, ParameterStore};
use crate::error::{Error, Result};
use crate::mmd::{bandwidth, diversity_loss, total_loss};
use crate::spatial::{build_dataset, read_jsonl, Split, TrajectorySample};
use crate::task_moe::coord_loss;

const VALIDATION_SEED: u64 = 7;
const SUBSAMPLE_SEED: u64 = 8;
const MODEL_SEED: u64 = 11;
const SHUFFLE_SEED: u64 = 12;

/// Samples for `cfg` (after its ablation), built from the scene or read
/// from `dataset_file`.
pub fn prepare_samples(cfg: &ExperimentConfig) -> Result<Vec<TrajectorySample>> {
    let eff = cfg.effective();
    match &eff.dataset_file {
        Some(p) => read_jsonl(p),
        None => {
            let scene = eff.scene.load()?;
            Ok(build_dataset(&scene, &eff.dataset)?.samples)
        }
    }
}

/// Train, validation, in-band test and held-out-band test samples.
#[derive(Debug, Clone)]
pub struct Partition<'a> {
    pub train: Vec<&'a TrajectorySample>,
    pub val: Vec<&'a TrajectorySample>,
    pub test: Vec<&'a TrajectorySample>,
    pub ood: Vec<&'a TrajectorySample>,
}

/// Validation takes whole trajectories (all their band renderings), so no
/// trajectory contributes to both fitting and checkpoint selection.
pub fn partition<'a>(cfg: &ExperimentConfig, samples: &'a [TrajectorySample]) -> Partition<'a> {
    let bands = cfg.training_bands();
    let in_band = |s: &TrajectorySample| bands.contains(&s.band_id);
    let pool: Vec<&TrajectorySample> = samples.iter().filter(|s| s.split == Split::Train && in_band(s)).collect();
    let ids: BTreeSet<usize> = pool.iter().map(|s| s.trajectory_id).collect();
    let mut ids: Vec<usize> = ids.into_iter().collect();
    ids.shuffle(&mut ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, VALIDATION_SEED)));
    let mut n_val = (cfg.validation_fraction * ids.len() as f64).round() as usize;
    if cfg.validation_fraction > 0.0 && ids.len() >= 2 {
        n_val = n_val.clamp(1, ids.len() - 1);
    }
    let val_ids: BTreeSet<usize> = ids[..n_val].iter().copied().collect();
    let (val, mut fit): (Vec<_>, Vec<_>) = pool.into_iter().partition(|s| val_ids.contains(&s.trajectory_id));
    if cfg.max_train_samples > 0 && fit.len() > cfg.max_train_samples {
        fit.shuffle(&mut ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, SUBSAMPLE_SEED)));
        fit.truncate(cfg.max_train_samples);
        fit.sort_by_key(|s| (s.band_id, s.trajectory_id));
    }
    let test = samples.iter().filter(|s| s.split == Split::Test && in_band(s)).collect();
    let ood = match cfg.split_mode {
        SplitMode::Mix => Vec::new(),
        SplitMode::Ood => samples.iter().filter(|s| s.split == Split::Test && !in_band(s)).collect(),
    };
    Partition {
        train: fit,
        val,
        test,
        ood,
    }
}

fn shape_of(samples: &[&TrajectorySample]) -> Result<(usize, usize)> {
    let first = samples
        .first()
        .ok_or_else(|| Error::Config("no training samples after filtering".into()))?;
    let (s, nc) = (first.s(), first.subcarriers());
    if samples.iter().any(|x| x.s() != s || x.subcarriers() != nc) {
        return Err(Error::Config("training samples mix trajectory lengths or subcarrier counts".into()));
    }
    Ok((s, nc))
}

#[derive(Debug, Clone)]
pub struct ExperimentResult {
    pub spec: ModelSpec,
    pub normalizer: Normalizer,
    pub outcome: TrainOutcome,
    /// Evaluation of the selected parameters on the in-band test set, then
    /// on held-out bands (`ood` mode only).
    pub test_records: Vec<MetricsRecord>,
    pub test_inference: Inference,
}

impl ExperimentResult {
    pub fn overall(&self, split: &str) -> Option<&MetricsRecord> {
        self.test_records.iter().find(|r| r.split == split && r.band == "all")
    }
}

/// Trains and evaluates one configuration on prepared samples; the training
/// CSV goes to `csv` when given.
pub fn run_experiment<W: Write>(cfg: &ExperimentConfig, samples: &[TrajectorySample], csv: Option<W>) -> Result<ExperimentResult> {
    cfg.validate()?;
    let eff = cfg.effective();
    let parts = partition(&eff, samples);
    let (s, nc) = shape_of(&parts.train)?;
    if s != eff.dataset.s {
        return Err(Error::Config(format!(
            "samples have s = {s} but the configuration asks for s = {}",
            eff.dataset.s
        )));
    }
    let normalizer = Normalizer::fit(&parts.train)?;
    let spec = ModelSpec {
        config: eff.model.clone(),
        baseline: eff.baseline,
        s,
        subcarriers: nc,
    };
    let mut store = ParameterStore::new();
    let model = Model::init(spec.clone(), &mut store, derive_seed(eff.seed, MODEL_SEED))?;
    let frozen = match eff.ablation {
        Some(Ablation::StaticFusion) => model.router_names(&store),
        _ => Vec::new(),
    };
    let settings = TrainSettings {
        epochs: eff.epochs,
        batch_size: eff.batch_size,
        lr: eff.lr,
        weight_decay: eff.weight_decay,
        alpha: eff.alpha,
        mmd_sign: eff.mmd_sign,
        sigma: bandwidth(eff.model.d),
        seed: derive_seed(eff.seed, SHUFFLE_SEED),
        frozen,
    };
    let outcome = train(&model, store, &parts.train, &parts.val, &normalizer, &settings, csv)?;

    let k = spec.tasks();
    let inf = infer(&model, &outcome.best, &parts.test, &normalizer, eff.batch_size, Some(settings.sigma))?;
    let mut test_records = evaluate_records(None, "test", &parts.test, &inf, k);
    if !parts.ood.is_empty() {
        let ood = infer(&model, &outcome.best, &parts.ood, &normalizer, eff.batch_size, Some(settings.sigma))?;
        test_records.extend(evaluate_records(None, "ood", &parts.ood, &ood, k));
    }
    Ok(ExperimentResult {
        spec,
        normalizer,
        outcome,
        test_records,
        test_inference: inf,
    })
}

/// Checkpoint header metadata.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub spec: ModelSpec,
    pub normalizer: Normalizer,
    pub epoch: Option<usize>,
}

pub fn save_checkpoint(path: &Path, meta: &CheckpointMeta, store: &ParameterStore) -> Result<()> {
    checkpoint::save(path, store, &serde_json::to_value(meta)?)
}

pub fn load_checkpoint(path: &Path) -> Result<(Model, CheckpointMeta, ParameterStore)> {
    let (store, meta) = checkpoint::load(path)?;
    let meta: CheckpointMeta =
        serde_json::from_value(meta).map_err(|e| Error::Checkpoint(format!("bad checkpoint metadata: {e}")))?;
    let model = Model::for_store(meta.spec.clone(), &store)?;
    Ok((model, meta, store))
}

/// Evaluates a checkpoint on `samples` (all splits given), reporting each
/// split separately.
pub fn evaluate_checkpoint(
    model: &Model,
    meta: &CheckpointMeta,
    store: &ParameterStore,
    samples: &[TrajectorySample],
    batch_size: usize,
) -> Result<(Vec<MetricsRecord>, Vec<Inference>)> {
    let sigma = bandwidth(meta.spec.config.d);
    let mut records = Vec::new();
    let mut infs = Vec::new();
    for (label, split) in [("train", Split::Train), ("test", Split::Test)] {
        let subset: Vec<&TrajectorySample> = samples.iter().filter(|s| s.split == split).collect();
        if subset.is_empty() {
            continue;
        }
        let inf = infer(model, store, &subset, &meta.normalizer, batch_size, Some(sigma))?;
        records.extend(evaluate_records(None, label, &subset, &inf, meta.spec.tasks()));
        infs.push(inf);
    }
    Ok((records, infs))
}

/// Finite-difference check of the full training objective (coordinate loss
/// plus the signed diversity term) on the first `batch` training samples.
pub fn grad_check_experiment(
    cfg: &ExperimentConfig,
    samples: &[TrajectorySample],
    batch: usize,
    gc: &GradCheckConfig,
) -> Result<GradCheckReport> {
    let eff = cfg.effective();
    let parts = partition(&eff, samples);
    let chosen: Vec<&TrajectorySample> = parts.train.iter().take(batch.max(1)).copied().collect();
    let (s, nc) = shape_of(&chosen)?;
    let norm = Normalizer::fit(&chosen)?;
    let spec = ModelSpec {
        config: eff.model.clone(),
        baseline: eff.baseline,
        s,
        subcarriers: nc,
    };
    let mut store = ParameterStore::new();
    let model = Model::init(spec, &mut store, derive_seed(eff.seed, MODEL_SEED))?;
    let b = Batch::build(&chosen, &norm)?;
    let sigma = bandwidth(eff.model.d);
    grad_check(
        &store,
        |g: &mut Graph| {
            let o = model.forward(g, &b)?;
            let t = g.input(b.targets.clone());
            let lc = coord_loss(g, o.predictions, t)?;
            if o.task_states.len() < 2 {
                return Ok(lc);
            }
            let lm = diversity_loss(g, &o.task_states, sigma)?;
            total_loss(g, lc, lm, eff.alpha, eff.mmd_sign)
        },
        gc,
    )
}
