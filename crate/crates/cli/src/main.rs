use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use ndarray::Array2;
use serde_json::json;
use stampgen::evaluation::subset_protocol;
use stampgen::features::{sha256_file, Embedder, ExtractorSpec};
use stampgen::imageio::load_image;
use stampgen::trainer::{train, Stage, TrainConfig};
use stampgen::{Dataset, StampError};
use stampgen_service::{serve, ServiceConfig, ServiceError};

#[derive(Debug, thiserror::Error)]
enum CliError {
    #[error(transparent)]
    Core(#[from] StampError),
    #[error(transparent)]
    Service(#[from] ServiceError),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
    #[error("{0}")]
    Usage(String),
}

#[derive(Parser)]
#[command(name = "stampgen", version, about = "Object stamp generation: data, training, evaluation, serving")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Build an instance dataset.
    Dataset {
        #[command(subcommand)]
        action: DatasetCommand,
    },
    /// Train one stage from a flat key-value config file.
    Train(TrainArgs),
    /// Evaluation metrics.
    Eval {
        #[command(subcommand)]
        action: EvalCommand,
    },
    /// Run the inference service (configured through MODEL_DIR, PORT, DEVICE).
    Serve,
}

#[derive(Subcommand)]
enum DatasetCommand {
    Build(BuildArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum Source {
    Coco,
    Synth,
}

#[derive(Args)]
struct BuildArgs {
    #[arg(long, value_enum)]
    source: Source,
    #[arg(long)]
    class: String,
    #[arg(long)]
    size: usize,
    #[arg(long)]
    out: PathBuf,
    /// COCO-style instance annotation file.
    #[arg(long, required_if_eq("source", "coco"))]
    annotations: Option<PathBuf>,
    /// Directory holding the annotated images.
    #[arg(long, required_if_eq("source", "coco"))]
    images: Option<PathBuf>,
    /// Number of synthetic instances.
    #[arg(long, default_value_t = 1000)]
    count: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    stage: Stage,
    /// Dataset directory written by `dataset build`.
    #[arg(long)]
    data: PathBuf,
    /// Overrides `out_dir` from the config.
    #[arg(long)]
    out_dir: Option<PathBuf>,
}

#[derive(Subcommand)]
enum EvalCommand {
    Kid(KidArgs),
}

#[derive(Args)]
struct KidArgs {
    /// Directory of real images.
    #[arg(long)]
    real: PathBuf,
    /// One or more directories of generated images, comma separated.
    #[arg(long, value_delimiter = ',', required = true)]
    fake: Vec<PathBuf>,
    #[arg(long, default_value_t = 50)]
    subsets: usize,
    #[arg(long, default_value_t = 50)]
    subset_size: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
    /// Images are resized to this square size before embedding.
    #[arg(long, default_value_t = 64)]
    size: usize,
    /// Embedding weights (safetensors); a seeded random network is used otherwise.
    #[arg(long, requires = "embedder_sha256")]
    embedder_weights: Option<PathBuf>,
    #[arg(long)]
    embedder_sha256: Option<String>,
    #[arg(long, default_value_t = 0)]
    embedder_seed: u64,
}

fn build(args: BuildArgs) -> Result<(), CliError> {
    let dataset = match args.source {
        Source::Synth => Dataset::synthetic(&args.class, args.size, args.count, args.seed)?,
        Source::Coco => {
            let (Some(ann), Some(images)) = (&args.annotations, &args.images) else {
                return Err(CliError::Usage("--annotations and --images are required for coco".into()));
            };
            let (dataset, stats) = Dataset::from_coco(ann, images, &args.class, args.size)?;
            log::info!("{stats:?}");
            dataset
        }
    };
    dataset.save(&args.out)?;
    println!("{}", json!({"instances": dataset.len(), "out": args.out, "hash": dataset.content_hash()}));
    Ok(())
}

fn run_train(args: TrainArgs) -> Result<(), CliError> {
    let mut config = TrainConfig::load(&args.config)?;
    config.stage = args.stage;
    if let Some(dir) = args.out_dir {
        config.out_dir = dir;
    }
    let dataset = Dataset::load(&args.data)?;
    let outcome = train(&config, &dataset)?;
    println!("{}", json!({"steps": outcome.steps, "checkpoints": outcome.checkpoints}));
    Ok(())
}

fn image_files(dir: &Path) -> Result<Vec<PathBuf>, CliError> {
    let mut files: Vec<PathBuf> = std::fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.extension()
                .and_then(|e| e.to_str())
                .is_some_and(|e| matches!(e.to_ascii_lowercase().as_str(), "png" | "jpg" | "jpeg"))
        })
        .collect();
    files.sort();
    if files.is_empty() {
        return Err(CliError::Usage(format!("no images in {}", dir.display())));
    }
    Ok(files)
}

fn embed_dir(embedder: &Embedder, dir: &Path, size: usize) -> Result<Array2<f64>, CliError> {
    let images = image_files(dir)?.iter().map(|p| load_image(p, Some(size))).collect::<Result<Vec<_>, _>>()?;
    Ok(embedder.extract(&images)?)
}

fn run_kid(args: KidArgs) -> Result<(), CliError> {
    let spec = match (&args.embedder_weights, &args.embedder_sha256) {
        (Some(path), Some(sha)) => {
            let actual = sha256_file(path)?;
            if &actual != sha {
                return Err(CliError::Usage(format!("embedder weights hash {actual} does not match {sha}")));
            }
            ExtractorSpec::File { path: path.display().to_string(), sha256: sha.clone() }
        }
        _ => ExtractorSpec::Random { seed: args.embedder_seed },
    };
    let embedder = Embedder::new(&spec)?;
    let real = embed_dir(&embedder, &args.real, args.size)?;
    let fakes = args.fake.iter().map(|d| embed_dir(&embedder, d, args.size)).collect::<Result<Vec<_>, _>>()?;
    let views: Vec<_> = fakes.iter().map(|f| f.view()).collect();
    let report = subset_protocol(real.view(), &views, args.subsets, args.subset_size, args.seed)?;
    let out = json!({
        "embedder": spec.content_id(),
        "real": args.real,
        "fake": args.fake,
        "report": report,
    });
    std::fs::write(&args.out, serde_json::to_string_pretty(&out)?)?;
    for (dir, s) in args.fake.iter().zip(&report.systems) {
        println!("{}: kid {:.6} +- {:.6}, best on {:.0}% of subsets", dir.display(), s.mean, s.std, 100.0 * s.count_best);
    }
    Ok(())
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Dataset { action: DatasetCommand::Build(args) } => build(args),
        Command::Train(args) => run_train(args),
        Command::Eval { action: EvalCommand::Kid(args) } => run_kid(args),
        Command::Serve => {
            let config = ServiceConfig::from_env()?;
            let runtime = tokio::runtime::Runtime::new()?;
            runtime.block_on(serve(config))?;
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
