use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use thiserror::Error;

use diffcom_core::diffusion::NoiseSchedule;
use diffcom_core::eval::{
    evaluate, format_report, trajectory, trajectory_entities, write_trajectory, Generator, ScoreSource,
    TRAJECTORY_HEADER,
};
use diffcom_core::kg::{generate_synthetic, KgError};
use diffcom_core::train::{
    load_checkpoint, read_checkpoint, save_checkpoint, stage1_train, stage2_train, CheckpointError, EpochLog,
};
use diffcom_core::{ConfigError, Denoiser, Encoder, KnowledgeGraph, RunConfig, Split};

#[derive(Parser)]
#[command(name = "diffcom", version, about = "Generative knowledge-graph completion by score diffusion")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a rule-generated graph to <out>/data.
    GenSynthetic(Common),
    /// Stage 1: train the structure-aware encoder.
    TrainEncoder(Common),
    /// Stage 2: train the conditional denoiser against a frozen encoder.
    TrainDenoiser(Common),
    /// Rank held-out tails and write <out>/metrics.tsv.
    Evaluate(Common),
    /// Export per-step x̂₀ estimates for every query of the eval split.
    DumpTrajectory(Common),
    /// Print a checkpoint's header and array shapes.
    InspectCheckpoint {
        path: PathBuf,
    },
}

#[derive(Args)]
struct Common {
    /// TOML run config; presets and defaults fill unset keys.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Dotted override, e.g. `--set stage1.epochs=50`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    #[arg(long)]
    seed: Option<u64>,
    /// Run directory for artifacts.
    #[arg(long, default_value = "run")]
    out: PathBuf,
}

#[derive(Debug, Error)]
enum CliError {
    #[error("{0}")]
    Config(#[from] ConfigError),
    #[error("missing {what}: {path} (run `diffcom {producer}` first or set {key})")]
    Missing {
        what: &'static str,
        path: PathBuf,
        producer: &'static str,
        key: &'static str,
    },
    #[error("{0}")]
    Data(#[from] KgError),
    #[error("{0}")]
    Checkpoint(#[from] CheckpointError),
    #[error("{0}")]
    Train(#[from] diffcom_core::train::TrainError),
    #[error("{0}")]
    Eval(#[from] diffcom_core::eval::EvaluateError),
    #[error("{0}")]
    Model(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl CliError {
    fn category(&self) -> &'static str {
        match self {
            CliError::Config(_) => "config",
            CliError::Missing { .. } => "missing-artifact",
            CliError::Data(_) => "data",
            CliError::Checkpoint(_) => "checkpoint",
            CliError::Train(_) => "train",
            CliError::Eval(_) => "eval",
            CliError::Model(_) => "model",
            CliError::Io { .. } => "io",
        }
    }

    fn exit_code(&self) -> u8 {
        match self {
            CliError::Config(_) | CliError::Missing { .. } => 2,
            _ => 1,
        }
    }
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> CliError + '_ {
    move |source| CliError::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn model_err(e: impl std::fmt::Display) -> CliError {
    CliError::Model(e.to_string())
}

/// A resolved invocation: config plus the run directory.
struct Run {
    cfg: RunConfig,
    out: PathBuf,
}

impl Run {
    fn new(common: &Common, command: &str) -> Result<Self, CliError> {
        let mut overrides = common.overrides.clone();
        if let Some(seed) = common.seed {
            overrides.push(format!("seed={seed}"));
        }
        let cfg = RunConfig::from_file(common.config.as_deref(), &overrides)?;
        let out = common.out.clone();
        fs::create_dir_all(&out).map_err(io_err(&out))?;
        let path = out.join(format!("{command}.effective.toml"));
        fs::write(&path, cfg.to_toml()).map_err(io_err(&path))?;
        Ok(Self { cfg, out })
    }

    fn data_dir(&self) -> PathBuf {
        self.cfg.paths.data.clone().unwrap_or_else(|| self.out.join("data"))
    }

    fn encoder_path(&self) -> PathBuf {
        self.cfg.paths.encoder.clone().unwrap_or_else(|| self.out.join("encoder.ckpt"))
    }

    fn denoiser_path(&self) -> PathBuf {
        self.cfg.paths.denoiser.clone().unwrap_or_else(|| self.out.join("denoiser.ckpt"))
    }

    fn load_graph(&self) -> Result<KnowledgeGraph, CliError> {
        let dir = self.data_dir();
        let train = dir.join("train.tsv");
        if !train.exists() {
            return Err(CliError::Missing {
                what: "dataset",
                path: train,
                producer: "gen-synthetic",
                key: "paths.data",
            });
        }
        let features = dir.join("features.txt");
        let kg = KnowledgeGraph::load(
            &train,
            &dir.join("dev.tsv"),
            &dir.join("test.tsv"),
            features.exists().then_some(features.as_path()),
        )?;
        for w in kg.warnings() {
            log::warn!("{w}");
        }
        Ok(kg)
    }

    fn load_encoder(&self, kg: &KnowledgeGraph) -> Result<Encoder, CliError> {
        let path = self.encoder_path();
        if !path.exists() {
            return Err(CliError::Missing {
                what: "encoder checkpoint",
                path,
                producer: "train-encoder",
                key: "paths.encoder",
            });
        }
        let mut encoder = Encoder::for_graph(self.cfg.encoder.clone(), kg, self.cfg.seed).map_err(model_err)?;
        let report = load_checkpoint(encoder.store_mut(), &path, &self.cfg.encoder_hash(), self.cfg.checkpoint.force)?;
        if !report.skipped.is_empty() {
            log::warn!("encoder arrays left at initialization: {}", report.skipped.join(", "));
        }
        Ok(encoder)
    }

    fn fresh_denoiser(&self, kg: &KnowledgeGraph, encoder: &Encoder) -> Result<Denoiser, CliError> {
        Denoiser::new(
            self.cfg.denoiser.clone(),
            kg.num_entities(),
            encoder.dim(),
            self.cfg.diffusion.steps,
            self.cfg.seed,
        )
        .map_err(model_err)
    }

    fn load_denoiser(&self, kg: &KnowledgeGraph, encoder: &Encoder) -> Result<Denoiser, CliError> {
        let path = self.denoiser_path();
        if !path.exists() {
            return Err(CliError::Missing {
                what: "denoiser checkpoint",
                path,
                producer: "train-denoiser",
                key: "paths.denoiser",
            });
        }
        let mut denoiser = self.fresh_denoiser(kg, encoder)?;
        let report = load_checkpoint(denoiser.store_mut(), &path, &self.cfg.denoiser_hash(), self.cfg.checkpoint.force)?;
        if !report.skipped.is_empty() {
            log::warn!("denoiser arrays left at initialization: {}", report.skipped.join(", "));
        }
        Ok(denoiser)
    }

    fn schedule(&self) -> Result<NoiseSchedule, CliError> {
        self.cfg.diffusion.schedule().map_err(model_err)
    }

    fn create(&self, name: &str) -> Result<(PathBuf, BufWriter<fs::File>), CliError> {
        let path = self.out.join(name);
        let f = fs::File::create(&path).map_err(io_err(&path))?;
        Ok((path, BufWriter::new(f)))
    }
}

/// Training-log sink: the TSV file and stderr.
fn epoch_logger(path: PathBuf, mut w: BufWriter<fs::File>) -> Result<impl FnMut(&EpochLog), CliError> {
    writeln!(w, "{}", EpochLog::HEADER).map_err(io_err(&path))?;
    Ok(move |l: &EpochLog| {
        if let Err(e) = writeln!(w, "{l}").and_then(|_| w.flush()) {
            log::error!("{}: {e}", path.display());
        }
        eprintln!("{l}");
    })
}

fn gen_synthetic(common: &Common) -> Result<(), CliError> {
    let run = Run::new(common, "gen-synthetic")?;
    let kg = generate_synthetic(&run.cfg.synthetic)?;
    let dir = run.data_dir();
    fs::create_dir_all(&dir).map_err(io_err(&dir))?;
    for (split, file) in [(Split::Train, "train.tsv"), (Split::Dev, "dev.tsv"), (Split::Test, "test.tsv")] {
        kg.write_triples(split, &dir.join(file))?;
    }
    kg.write_features(&dir.join("features.txt"))?;
    let s = kg.stats();
    println!(
        "wrote {}: {} entities, {} relations, {}/{}/{} triples",
        dir.display(),
        s.entities,
        s.relations,
        s.train,
        s.dev,
        s.test
    );
    Ok(())
}

fn train_encoder(common: &Common) -> Result<(), CliError> {
    let run = Run::new(common, "train-encoder")?;
    let kg = run.load_graph()?;
    let encoder = Encoder::for_graph(run.cfg.encoder.clone(), &kg, run.cfg.seed).map_err(model_err)?;
    let (log_path, w) = run.create("encoder.log.tsv")?;
    let outcome = stage1_train(&kg, encoder, &run.cfg.stage1, run.cfg.seed, epoch_logger(log_path, w)?)?;
    let path = run.out.join("encoder.ckpt");
    save_checkpoint(outcome.encoder.store(), &run.cfg.encoder_hash(), run.cfg.checkpoint.precision, &path)?;
    match outcome.best_dev {
        Some(m) => println!("best dev epoch {}: {m}", outcome.best_epoch),
        None => println!("no dev split; kept epoch {}", outcome.best_epoch),
    }
    println!("wrote {}", path.display());
    Ok(())
}

fn train_denoiser(common: &Common) -> Result<(), CliError> {
    let run = Run::new(common, "train-denoiser")?;
    let kg = run.load_graph()?;
    let encoder = run.load_encoder(&kg)?;
    let denoiser = run.fresh_denoiser(&kg, &encoder)?;
    let schedule = run.schedule()?;
    let (log_path, w) = run.create("denoiser.log.tsv")?;
    let outcome = stage2_train(
        &kg,
        &encoder,
        denoiser,
        &schedule,
        run.cfg.diffusion.chains,
        &run.cfg.stage2,
        run.cfg.seed,
        epoch_logger(log_path, w)?,
    )?;
    let path = run.out.join("denoiser.ckpt");
    save_checkpoint(outcome.denoiser.store(), &run.cfg.denoiser_hash(), run.cfg.checkpoint.precision, &path)?;
    println!("wrote {}", path.display());
    Ok(())
}

fn run_evaluate(common: &Common) -> Result<(), CliError> {
    let run = Run::new(common, "evaluate")?;
    let kg = run.load_graph()?;
    let encoder = run.load_encoder(&kg)?;
    let needs_generator = run.cfg.eval.sources.contains(&ScoreSource::Generated);
    let denoiser = needs_generator.then(|| run.load_denoiser(&kg, &encoder)).transpose()?;
    let schedule = run.schedule()?;
    let generator = denoiser.as_ref().map(|denoiser| Generator {
        denoiser,
        schedule: &schedule,
        chains: run.cfg.diffusion.chains,
    });
    let rows = evaluate(&kg, &encoder, generator, &run.cfg.eval)?;
    let report = format_report(&rows);
    let path = run.out.join("metrics.tsv");
    fs::write(&path, &report).map_err(io_err(&path))?;
    print!("{report}");
    Ok(())
}

fn dump_trajectory(common: &Common) -> Result<(), CliError> {
    let run = Run::new(common, "dump-trajectory")?;
    let kg = run.load_graph()?;
    let encoder = run.load_encoder(&kg)?;
    let denoiser = run.load_denoiser(&kg, &encoder)?;
    let schedule = run.schedule()?;
    let generator = Generator {
        denoiser: &denoiser,
        schedule: &schedule,
        chains: run.cfg.diffusion.chains,
    };
    let (path, mut w) = run.create("trajectory.csv")?;
    writeln!(w, "{TRAJECTORY_HEADER}").map_err(io_err(&path))?;
    let names = kg.entities().names();
    for (i, t) in kg.split(run.cfg.eval.split).iter().enumerate() {
        let snaps = trajectory(&kg, &encoder, generator, t.head, t.relation, run.cfg.eval.seed)?;
        let last = &snaps.last().expect("a trajectory always ends at step 0").1;
        let entities = trajectory_entities(last, t.tail, run.cfg.eval.trajectory_top);
        write_trajectory(&mut w, &i.to_string(), &snaps, &entities, names, t.tail).map_err(io_err(&path))?;
    }
    w.flush().map_err(io_err(&path))?;
    println!("wrote {}", path.display());
    Ok(())
}

fn inspect(path: &Path) -> Result<(), CliError> {
    if !path.exists() {
        return Err(CliError::Missing {
            what: "checkpoint",
            path: path.to_path_buf(),
            producer: "train-encoder",
            key: "the path argument",
        });
    }
    print!("{}", read_checkpoint(path)?);
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::GenSynthetic(c) => gen_synthetic(c),
        Command::TrainEncoder(c) => train_encoder(c),
        Command::TrainDenoiser(c) => train_denoiser(c),
        Command::Evaluate(c) => run_evaluate(c),
        Command::DumpTrajectory(c) => dump_trajectory(c),
        Command::InspectCheckpoint { path } => inspect(path),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error[{}]: {e}", e.category());
            ExitCode::from(e.exit_code())
        }
    }
}
