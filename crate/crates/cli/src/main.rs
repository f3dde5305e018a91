use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::Context;
use clap::{Parser, Subcommand};
use log::info;

use scadf::channel::{BandConfig, Preset, Scene};
use scadf::diff::GradCheckConfig;
use scadf::pipeline::{
    evaluate_checkpoint, grad_check_experiment, load_checkpoint, prepare_samples, run_experiment, save_checkpoint, write_csv,
    Ablation, CheckpointMeta, ExperimentConfig, ExperimentResult, RoutingSummary,
};
use scadf::spatial::{build_dataset, read_jsonl, write_jsonl, DatasetConfig};
use scadf::Error;

#[derive(Parser)]
#[command(name = "scadf", version, about = "Multimodal fingerprint localization with soft mixture-of-experts fusion")]
struct Cli {
    /// Write per-batch routing entropy summaries as JSON lines.
    #[arg(long, global = true, value_name = "FILE")]
    dump_routing: Option<PathBuf>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a scene description.
    GenScene {
        #[arg(long, default_value = "dense")]
        preset: Preset,
        #[arg(long, default_value_t = 1)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Render fingerprints, cluster and sample trajectories into a JSON-lines file.
    BuildDataset {
        #[arg(long)]
        scene: PathBuf,
        /// Carrier frequencies in Hz.
        #[arg(long, value_delimiter = ',', default_values_t = [2.6e9, 6e9, 28e9])]
        bands: Vec<f64>,
        #[arg(long, default_value_t = 5)]
        s: usize,
        /// Candidate clustering radii in metres, ascending.
        #[arg(long, value_delimiter = ',')]
        radius_grid: Option<Vec<f64>>,
        #[arg(long, default_value_t = 8)]
        n_min: usize,
        #[arg(long)]
        locations: Option<usize>,
        #[arg(long)]
        hotspots: Option<usize>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train one configuration and evaluate it on the test split.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Receives metrics.csv, test.csv, model.bin and config.json.
        #[arg(long, default_value = "run")]
        out_dir: PathBuf,
    },
    /// Evaluate a checkpoint on a dataset file.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        report: PathBuf,
        #[arg(long, default_value_t = 64)]
        batch_size: usize,
    },
    /// Finite-difference check of the training objective.
    GradCheck {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, default_value_t = 2)]
        batch: usize,
        #[arg(long, default_value_t = 200)]
        samples: usize,
    },
    /// Train a configuration with one ablation applied.
    Ablate {
        #[arg(long)]
        knob: Ablation,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value = "run")]
        out_dir: PathBuf,
    },
}

fn load_config(path: &Path) -> scadf::Result<ExperimentConfig> {
    if !path.exists() {
        return Err(Error::Config(format!("config file {} does not exist", path.display())));
    }
    ExperimentConfig::load(path)
}

fn dump_routing(path: &Path, routing: &[RoutingSummary]) -> anyhow::Result<()> {
    let mut w = BufWriter::new(File::create(path).with_context(|| format!("creating {}", path.display()))?);
    for r in routing {
        serde_json::to_writer(&mut w, r)?;
        writeln!(w)?;
    }
    w.flush()?;
    info!("wrote {} routing summaries to {}", routing.len(), path.display());
    Ok(())
}

fn print_summary(result: &ExperimentResult) {
    for r in result.test_records.iter().filter(|r| r.band == "all") {
        println!(
            "{}: mse {} los {} nlos {} nlos_u {} centroid {}",
            r.split,
            fmt(r.mse),
            fmt(r.los_mse),
            fmt(r.nlos_mse),
            fmt(r.nlos_u_mse),
            fmt(r.centroid_mse)
        );
    }
}

fn fmt(v: Option<f64>) -> String {
    v.map_or_else(|| "-".into(), |x| format!("{x:.4}"))
}

fn train_to(cfg: &ExperimentConfig, out_dir: &Path, dump: Option<&Path>) -> anyhow::Result<()> {
    fs::create_dir_all(out_dir).with_context(|| format!("creating {}", out_dir.display()))?;
    cfg.save(&out_dir.join("config.json"))?;
    let samples = prepare_samples(cfg)?;
    info!("{} samples", samples.len());
    let csv = BufWriter::new(File::create(out_dir.join("metrics.csv"))?);
    let result = run_experiment(cfg, &samples, Some(csv))?;
    let meta = CheckpointMeta {
        spec: result.spec.clone(),
        normalizer: result.normalizer.clone(),
        epoch: result.outcome.best_epoch,
    };
    save_checkpoint(&out_dir.join("model.bin"), &meta, &result.outcome.best)?;
    write_csv(File::create(out_dir.join("test.csv"))?, result.spec.tasks(), &result.test_records)?;
    if let Some(p) = dump {
        dump_routing(p, &result.test_inference.routing)?;
    }
    print_summary(&result);
    Ok(())
}

fn run(cli: Cli) -> anyhow::Result<()> {
    let dump = cli.dump_routing.as_deref();
    match cli.command {
        Command::GenScene { preset, seed, out } => {
            Scene::preset(preset, seed).save(&out)?;
            info!("wrote {}", out.display());
        }
        Command::BuildDataset {
            scene,
            bands,
            s,
            radius_grid,
            n_min,
            locations,
            hotspots,
            seed,
            out,
        } => {
            if !scene.exists() {
                return Err(Error::Config(format!("scene file {} does not exist", scene.display())).into());
            }
            let scene = Scene::load(&scene)?;
            let mut cfg = DatasetConfig {
                bands: bands.into_iter().map(BandConfig::standard).collect(),
                s,
                n_min,
                seed,
                ..DatasetConfig::default()
            };
            if s == 0 {
                return Err(Error::Config("s must be at least 1".into()).into());
            }
            if let Some(r) = radius_grid {
                cfg.radius_grid = r;
            }
            if let Some(n) = locations {
                cfg.locations = n;
            }
            if let Some(n) = hotspots {
                cfg.hotspots = n;
            }
            let ds = build_dataset(&scene, &cfg)?;
            write_jsonl(&out, &ds.samples)?;
            println!(
                "{} samples, radius {} m, {} clusters -> {}",
                ds.samples.len(),
                ds.radius,
                ds.clusters.len(),
                out.display()
            );
        }
        Command::Train { config, out_dir } => {
            let cfg = load_config(&config)?;
            train_to(&cfg, &out_dir, dump)?;
        }
        Command::Ablate { knob, config, out_dir } => {
            let mut cfg = match config {
                Some(p) => load_config(&p)?,
                None => ExperimentConfig::default(),
            };
            cfg.ablation = Some(knob);
            train_to(&cfg, &out_dir, dump)?;
        }
        Command::Eval {
            ckpt,
            data,
            report,
            batch_size,
        } => {
            for p in [&ckpt, &data] {
                if !p.exists() {
                    return Err(Error::Config(format!("{} does not exist", p.display())).into());
                }
            }
            if batch_size == 0 {
                return Err(Error::Config("batch size must be positive".into()).into());
            }
            let (model, meta, store) = load_checkpoint(&ckpt)?;
            let samples = read_jsonl(&data)?;
            let (records, infs) = evaluate_checkpoint(&model, &meta, &store, &samples, batch_size)?;
            write_csv(BufWriter::new(File::create(&report)?), meta.spec.tasks(), &records)?;
            for r in records.iter().filter(|r| r.band == "all") {
                println!("{}: mse {} nlos {} nlos_u {}", r.split, fmt(r.mse), fmt(r.nlos_mse), fmt(r.nlos_u_mse));
            }
            if let Some(p) = dump {
                let all: Vec<RoutingSummary> = infs.into_iter().flat_map(|i| i.routing).collect();
                dump_routing(p, &all)?;
            }
        }
        Command::GradCheck { config, batch, samples } => {
            let cfg = load_config(&config)?;
            let data = prepare_samples(&cfg)?;
            let gc = GradCheckConfig {
                samples,
                ..GradCheckConfig::default()
            };
            let report = grad_check_experiment(&cfg, &data, batch, &gc)?;
            println!(
                "checked {} entries, {} failures, max relative error {:.3e}",
                report.checked, report.failures, report.max_rel_error
            );
            for e in report.worst.iter().filter(|e| !e.passed).take(5) {
                println!(
                    "  {}[{}] analytic {:.6e} numeric {:.6e} rel {:.3e}",
                    e.name, e.index, e.analytic, e.numeric, e.rel_error
                );
            }
            if !report.passed() {
                return Err(Error::Numerical(format!("{} gradient entries out of tolerance", report.failures)).into());
            }
        }
    }
    Ok(())
}

fn exit_code(err: &anyhow::Error) -> u8 {
    match err.downcast_ref::<Error>() {
        Some(Error::Config(_) | Error::RadiusSearch { .. }) => 2,
        Some(Error::Numerical(_)) => 3,
        _ => 1,
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
