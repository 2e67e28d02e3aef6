mod commands;
mod config;
mod plot;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::error::ErrorKind;
use clap::{Args, Parser, Subcommand};

use config::Failure;

#[derive(Debug, Parser)]
#[command(
    name = "pme",
    version,
    about = "Object-level shape variations of generated images"
)]
struct Cli {
    /// TOML file with defaults for every subcommand.
    #[arg(long, global = true, env = "PME_CONFIG")]
    config: Option<PathBuf>,
    /// Log filter written to stderr, e.g. `info` or `pme_core=debug`.
    #[arg(long, global = true, env = "PME_LOG", default_value = "warn")]
    log: String,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a reference image and a gallery of object variations.
    Generate(GenerateArgs),
    /// Segment the image of a saved trace.
    Segment(SegmentArgs),
    /// Rank proxy words for the object of a prompt.
    Proxies(ProxiesArgs),
    /// Render how each denoising interval shapes the object.
    Stages(StagesArgs),
    /// Score galleries and write a CSV report.
    Metrics(MetricsArgs),
    /// Plot metric reports as an SVG scatter.
    Plot(PlotArgs),
    /// Run the HTTP service.
    Serve(ServeArgs),
    /// Serve the synthetic backend over the worker protocol on stdin/stdout.
    Worker,
    /// Serve an embedding model over the worker protocol on stdin/stdout.
    EmbedderWorker(EmbedderWorkerArgs),
}

#[derive(Debug, Args)]
pub struct BackendArgs {
    /// `synthetic` or `real`.
    #[arg(long, env = "PME_BACKEND")]
    pub backend: Option<String>,
    /// Shell command starting the worker of the real backend.
    #[arg(long, env = "PME_WORKER")]
    pub worker: Option<String>,
}

#[derive(Debug, Args)]
pub struct EmbedderArgs {
    /// `fake:SEED:DIM:SIZE[:WORDS]` or `cmd:COMMAND`.
    #[arg(long, env = "PME_EMBEDDER")]
    pub embedder: Option<String>,
    /// Phrase with a `{t}` slot the vocabulary is embedded through.
    #[arg(long, env = "PME_TEMPLATE")]
    pub template: Option<String>,
    /// Directory caching the embedded vocabulary.
    #[arg(long, env = "PME_INDEX_CACHE")]
    pub index_cache: Option<PathBuf>,
    /// Candidates taken before re-ranking in context.
    #[arg(short = 'k', long)]
    pub candidates: Option<usize>,
}

#[derive(Debug, Args)]
pub struct GenerateArgs {
    /// Prompt of the reference image.
    #[arg(long)]
    pub prompt: String,
    /// Word of the prompt to vary.
    #[arg(long)]
    pub object: String,
    /// Nouns of the prompt; guessed when omitted.
    #[arg(long, value_delimiter = ',')]
    pub nouns: Option<Vec<String>>,
    /// Nouns whose shape is kept.
    #[arg(long, value_delimiter = ',')]
    pub preserve: Vec<String>,
    /// Comma-separated words that take the object's place, one variation each.
    #[arg(
        long,
        value_delimiter = ',',
        required_unless_present = "auto",
        conflicts_with = "auto"
    )]
    pub proxies: Vec<String>,
    /// Pick this many proxy words with the embedding model.
    #[arg(long)]
    pub auto: Option<usize>,
    /// Random when omitted; the manifest records the one used.
    #[arg(long, env = "PME_SEED")]
    pub seed: Option<u64>,
    /// Denoising steps.
    #[arg(long, env = "PME_STEPS")]
    pub steps: Option<u32>,
    /// Classifier-free guidance scale.
    #[arg(long, env = "PME_GUIDANCE")]
    pub guidance: Option<f32>,
    /// Step at which the object mask is blended in and injection stops.
    #[arg(long)]
    pub t1: Option<u32>,
    /// Lower end of the interval that conditions on the proxy word.
    #[arg(long)]
    pub t2: Option<u32>,
    /// Upper end of the interval that conditions on the proxy word.
    #[arg(long)]
    pub t3: Option<u32>,
    /// Inject the whole self-attention map instead of the object's rows.
    #[arg(long)]
    pub no_localize: bool,
    /// Skip background blending.
    #[arg(long)]
    pub no_blend: bool,
    /// Variations generated at once; 0 uses every CPU.
    #[arg(long, env = "PME_JOBS")]
    pub jobs: Option<usize>,
    /// Output directory.
    #[arg(long, default_value = "gallery")]
    pub out: PathBuf,
    #[command(flatten)]
    pub backend: BackendArgs,
    #[command(flatten)]
    pub embedding: EmbedderArgs,
}

#[derive(Debug, Args)]
pub struct SegmentArgs {
    /// Trace container written by `generate`.
    #[arg(long)]
    pub trace: PathBuf,
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
    /// Number of K-Means clusters.
    #[arg(long)]
    pub clusters: Option<usize>,
    /// Cross-attention threshold below which a segment is background.
    #[arg(long)]
    pub sigma: Option<f64>,
    /// Use only the steps above this one.
    #[arg(long, default_value_t = 0)]
    pub after: u32,
}

#[derive(Debug, Args)]
pub struct ProxiesArgs {
    /// Word of the prompt to find proxies for.
    #[arg(long)]
    pub word: String,
    #[arg(long)]
    pub prompt: String,
    /// Proxy words kept after re-ranking.
    #[arg(short = 'm', long)]
    pub count: Option<usize>,
    /// Show only candidates made of letters.
    #[arg(long)]
    pub words_only: bool,
    #[arg(long)]
    pub json: bool,
    #[command(flatten)]
    pub embedding: EmbedderArgs,
}

#[derive(Debug, Args)]
pub struct StagesArgs {
    /// Prompt with a `{t}` slot for the object word.
    #[arg(long)]
    pub template: String,
    #[arg(long, value_delimiter = ',', num_args = 1..)]
    pub words: Vec<String>,
    #[arg(long, env = "PME_SEED")]
    pub seed: Option<u64>,
    #[arg(long, env = "PME_STEPS")]
    pub steps: Option<u32>,
    #[arg(long)]
    pub t3: Option<u32>,
    #[arg(long)]
    pub t2: Option<u32>,
    #[arg(long, default_value = "stages.png")]
    pub out: PathBuf,
    #[command(flatten)]
    pub backend: BackendArgs,
}

#[derive(Debug, Args)]
pub struct MetricsArgs {
    /// Gallery directory holding a manifest.json; repeat for several.
    #[arg(long, required = true)]
    pub gallery: Vec<PathBuf>,
    /// Image the variations are compared to; defaults to each gallery's reference.
    #[arg(long)]
    pub original: Option<PathBuf>,
    /// Method name per gallery, in order; defaults to the directory name.
    #[arg(long, value_delimiter = ',')]
    pub method: Vec<String>,
    /// Directory of images of the object class used for faithfulness.
    #[arg(long)]
    pub class_refs: Option<PathBuf>,
    /// Report path; stdout when omitted.
    #[arg(long)]
    pub csv: Option<PathBuf>,
    /// Also write the trade-off scatter here.
    #[arg(long)]
    pub plot: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct PlotArgs {
    #[arg(required = true)]
    pub reports: Vec<PathBuf>,
    #[arg(long, default_value = "tradeoff.svg")]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct ServeArgs {
    #[arg(long, env = "PME_BIND")]
    pub bind: Option<String>,
    #[arg(long, env = "PME_ROOT")]
    pub root: Option<PathBuf>,
    #[arg(long, env = "PME_WORKER")]
    pub worker: Option<String>,
    #[arg(long, env = "PME_EMBEDDER")]
    pub embedder: Option<String>,
}

#[derive(Debug, Args)]
pub struct EmbedderWorkerArgs {
    /// Embedding model to serve, `fake:SEED:DIM:SIZE[:WORDS]`.
    #[arg(long, env = "PME_EMBEDDER")]
    pub embedder: String,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => return fail(&Failure::usage(e.to_string().trim_end())),
    };
    tracing_subscriber::fmt()
        .with_writer(std::io::stderr)
        .with_env_filter(
            tracing_subscriber::EnvFilter::try_new(&cli.log).unwrap_or_else(|_| "warn".into()),
        )
        .init();
    let result =
        config::FileConfig::load(cli.config.as_deref()).and_then(|file| match cli.command {
            Command::Generate(a) => commands::generate(a, &file),
            Command::Segment(a) => commands::segment(a, &file),
            Command::Proxies(a) => commands::proxies(a, &file),
            Command::Stages(a) => commands::stages(a, &file),
            Command::Metrics(a) => commands::metrics(a),
            Command::Plot(a) => commands::plot(a),
            Command::Serve(a) => commands::serve(a, file),
            Command::Worker => commands::worker(),
            Command::EmbedderWorker(a) => commands::embedder_worker(a),
        });
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => fail(&f),
    }
}

fn fail(f: &Failure) -> ExitCode {
    eprintln!("{}", f.to_json());
    ExitCode::from(f.exit_code.clamp(1, 255) as u8)
}
