use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use trajattn::baselines::kalman_forecasts;
use trajattn::config::RunConfig;
use trajattn::data::{build_scenes, load_archive, parse_highd, save_archive, synth_generate, SceneArchive, SynthConfig};
use trajattn::evaluation::{
    calibration, comparison_table, latency_benchmark, read_predictions, render_attention_dump, rmse, rmse_of_forecasts,
    write_predictions, SceneTrajectories, target_mask, REFERENCE_LATENCY_MS,
};
use trajattn::training::{history_to_csv, load_checkpoint, save_checkpoint, split_by_id, Trainer};
use trajattn::{Error, Result};

#[derive(Parser)]
#[command(name = "trajattn", version, about = "Attention-based multi-vehicle trajectory forecasting")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Flat `key = value` configuration file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the `seed` key.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker thread cap for parallel evaluation.
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Output directory.
    #[arg(long, global = true, default_value = ".")]
    out: PathBuf,
    /// Configuration override, repeatable: `--set epochs=5`.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic scene archive.
    GenData,
    /// Build a scene archive from a highD tracks/metadata CSV pair.
    Ingest {
        #[arg(long)]
        tracks: PathBuf,
        #[arg(long)]
        meta: PathBuf,
    },
    /// Train a model on a scene archive.
    Train {
        #[arg(long)]
        archive: PathBuf,
        /// Continue from this checkpoint.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Score a checkpoint or a prediction file against an archive.
    Eval {
        #[arg(long)]
        archive: PathBuf,
        #[arg(long, conflicts_with = "predictions", required_unless_present = "predictions")]
        checkpoint: Option<PathBuf>,
        /// CSV with columns scene_id, vehicle_id, t_index, mu_x, mu_y.
        #[arg(long)]
        predictions: Option<PathBuf>,
    },
    /// Dump attention matrices of one scene.
    Attn {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        archive: PathBuf,
        #[arg(long)]
        scene: u64,
        /// Vehicle ids whose rows are reported; defaults to the ego.
        #[arg(long, value_delimiter = ',')]
        vehicles: Vec<u64>,
    },
    /// Time eval-mode forward passes.
    Bench {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Vehicles in the benchmark scene (overrides `bench_vehicles`).
        #[arg(long)]
        vehicles: Option<usize>,
        /// Timed repetitions (overrides `bench_repeats`).
        #[arg(long)]
        repeats: Option<usize>,
    },
}

fn load_config(common: &Common) -> Result<RunConfig> {
    let mut cfg = match &common.config {
        Some(path) => {
            let text = fs::read_to_string(path).map_err(|e| match e.kind() {
                std::io::ErrorKind::NotFound => Error::NotFound(format!("config {}", path.display())),
                _ => Error::Io(e),
            })?;
            RunConfig::from_text(&text)?
        }
        None => RunConfig::default(),
    };
    cfg.apply_overrides(&common.overrides)?;
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    cfg.validate()?;
    Ok(cfg)
}

/// `# key = value` lines identifying the run that produced a file.
fn provenance_header(cfg: &RunConfig) -> String {
    format!("# config_hash = {}\n# seed = {}\n", cfg.hash(), cfg.seed)
}

fn provenance_block(cfg: &RunConfig) -> String {
    format!("{}{}", provenance_header(cfg), cfg.to_text())
}

fn write(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    fs::write(path, contents)?;
    println!("wrote {}", path.display());
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    let cfg = load_config(&cli.common)?;
    if let Some(n) = cli.common.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| Error::Config(format!("cannot size the thread pool: {e}")))?;
    }
    let out = &cli.common.out;
    fs::create_dir_all(out)?;
    match cli.command {
        Command::GenData => {
            let scenes = synth_generate(&cfg.synth_config(), cfg.seed)?.into_iter().map(|s| s.scene).collect();
            let archive = SceneArchive { scenes, provenance: provenance_block(&cfg) };
            let path = out.join("scenes.atrs");
            save_archive(&archive, &path)?;
            println!("wrote {} ({} scenes)", path.display(), archive.scenes.len());
        }
        Command::Ingest { tracks, meta } => {
            let table = parse_highd(&tracks, &meta)?;
            let (scenes, report) = build_scenes(&table, &cfg.build_config())?;
            println!(
                "{} windows, {} skipped without fully observed vehicles, {} scenes",
                report.windows, report.skipped_windows, report.scenes
            );
            let archive = SceneArchive { scenes, provenance: provenance_block(&cfg) };
            let path = out.join("scenes.atrs");
            save_archive(&archive, &path)?;
            println!("wrote {} ({} scenes)", path.display(), archive.scenes.len());
        }
        Command::Train { archive, resume } => {
            let scenes = load_archive(&archive)?.scenes;
            if scenes.is_empty() {
                return Err(Error::Parameter("archive holds no scenes".into()));
            }
            let (train, val) = split_by_id(&scenes, cfg.val_fraction);
            let mut trainer = match resume {
                Some(path) => {
                    let ckpt = load_checkpoint(&path)?;
                    if ckpt.hyper != cfg.hyper {
                        return Err(Error::Config("checkpoint hyperparameters differ from the configuration".into()));
                    }
                    Trainer::resume(&ckpt, cfg.train_config())?
                }
                None => Trainer::new(cfg.hyper.clone(), cfg.train_config())?,
            };
            println!("training on {} scenes, validating on {}", train.len(), val.len());
            for _ in 0..cfg.epochs {
                let r = trainer.run_epoch(&train, &val)?;
                println!(
                    "epoch {:>3}  loss {:>10.4}  val 3s RMSE long {:.3} m  lat {:.3} m",
                    r.epoch, r.train_loss, r.val_rmse_long_3s, r.val_rmse_lat_3s
                );
            }
            let mut ckpt = trainer.checkpoint();
            ckpt.provenance = provenance_block(&cfg);
            save_checkpoint(&ckpt, &out.join("model.ckpt"))?;
            println!("wrote {}", out.join("model.ckpt").display());
            write(&out.join("loss_history.csv"), provenance_header(&cfg) + &history_to_csv(&ckpt.history))?;
        }
        Command::Eval { archive, checkpoint, predictions } => {
            let scenes = load_archive(&archive)?.scenes;
            let first = scenes.first().ok_or_else(|| Error::Parameter("archive holds no scenes".into()))?;
            let (t_pred, dt) = (first.t_pred, first.dt);
            let horizons = &cfg.horizons;
            let mut methods = Vec::new();
            let kalman = kalman_forecasts(&scenes, &cfg.kalman())?;
            methods.push(("Linear (Kalman CV)".to_string(), rmse_of_forecasts(&kalman, &scenes, cfg.predict_ego, horizons)?));
            let report = match (checkpoint, predictions) {
                (Some(path), _) => {
                    let model = load_checkpoint(&path)?.model();
                    let forecasts = model.predict(&scenes)?;
                    let report = rmse_of_forecasts(&forecasts, &scenes, cfg.predict_ego, horizons)?;
                    let cal = calibration(&forecasts, &scenes, cfg.predict_ego, horizons)?;
                    write(&out.join("calibration.csv"), provenance_header(&cfg) + &cal.to_csv())?;
                    let mut buf = provenance_header(&cfg).into_bytes();
                    write_predictions(&mut buf, &forecasts, &scenes, cfg.predict_ego)?;
                    write(&out.join("predictions.csv"), buf)?;
                    methods.push((format!("Proposed (h={})", model.hyper.heads), report.clone()));
                    report
                }
                (None, Some(path)) => {
                    let text = fs::read_to_string(&path).map_err(|e| match e.kind() {
                        std::io::ErrorKind::NotFound => Error::NotFound(format!("prediction file {}", path.display())),
                        _ => Error::Io(e),
                    })?;
                    let body: String = text.lines().filter(|l| !l.starts_with('#')).map(|l| format!("{l}\n")).collect();
                    let means = read_predictions(body.as_bytes(), &scenes, cfg.predict_ego, &path.display().to_string())?;
                    let masks: Vec<Vec<bool>> = scenes.iter().map(|s| target_mask(s, cfg.predict_ego)).collect();
                    let items: Vec<SceneTrajectories<'_>> = scenes
                        .iter()
                        .zip(&means)
                        .zip(&masks)
                        .map(|((s, m), k)| SceneTrajectories { predicted: m, truth: &s.future, mask: k })
                        .collect();
                    let report = rmse(&items, t_pred, dt, horizons)?;
                    methods.push(("Predictions file".to_string(), report.clone()));
                    report
                }
                (None, None) => unreachable!("clap requires one source"),
            };
            write(&out.join("rmse.csv"), provenance_header(&cfg) + &report.to_csv())?;
            let table = comparison_table(&methods);
            print!("{table}");
            write(&out.join("table.txt"), provenance_header(&cfg) + &table)?;
        }
        Command::Attn { checkpoint, archive, scene, vehicles } => {
            let model = load_checkpoint(&checkpoint)?.model();
            let scenes = load_archive(&archive)?.scenes;
            let s = scenes
                .iter()
                .find(|s| s.id == scene)
                .ok_or_else(|| Error::NotFound(format!("scene {scene} in {}", archive.display())))?;
            let vehicles = if vehicles.is_empty() { vec![s.ego_id()] } else { vehicles };
            let (_, records) = model.forward(s)?;
            let dump = render_attention_dump(&records, s, &vehicles)?;
            write(&out.join(format!("attention_scene{scene}.txt")), provenance_header(&cfg) + &dump)?;
        }
        Command::Bench { checkpoint, vehicles, repeats } => {
            let model = load_checkpoint(&checkpoint)?.model();
            let n = vehicles.unwrap_or(cfg.bench_vehicles);
            let repeats = repeats.unwrap_or(cfg.bench_repeats);
            let synth = SynthConfig { n_scenes: 1, n_vehicles_min: n, n_vehicles_max: n, ..cfg.synth_config() };
            let scene = synth_generate(&synth, cfg.seed)?.remove(0).scene;
            let r = latency_benchmark(&model, &scene, repeats)?;
            println!(
                "N = {}: mean {:.3} ms, median {:.3} ms, p95 {:.3} ms over {} runs (reference mean {REFERENCE_LATENCY_MS} ms)",
                r.n_vehicles,
                r.mean_ms,
                r.median_ms,
                r.p95_ms,
                r.samples_ms.len()
            );
            let mut csv = provenance_header(&cfg);
            csv.push_str("run,ms\n");
            for (i, ms) in r.samples_ms.iter().enumerate() {
                csv.push_str(&format!("{i},{ms:?}\n"));
            }
            write(&out.join("latency.csv"), csv)?;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error[{}]: {}", e.category(), e.to_string().replace('\n', " "));
            ExitCode::FAILURE
        }
    }
}
