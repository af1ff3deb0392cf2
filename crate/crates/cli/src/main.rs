use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use toonshade::metrics::{load_flows, pixel_mse};
use toonshade::models::adapter::PluginManifest;
use toonshade::pipeline::{run_full, save_render, RenderJob};
use toonshade::video::load_frames;
use toonshade::{Error, ModelBundle, PipelineConfig};

#[derive(Parser)]
#[command(
    name = "toonshade",
    version,
    about = "Windowed diffusion toon shading for frame sequences"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Render a frame directory through the editing and main stages.
    Render(RenderArgs),
    /// Flow-warped pixel MSE of a frame directory.
    Metrics {
        #[arg(long)]
        video: PathBuf,
        #[arg(long)]
        flows: PathBuf,
    },
    /// Print the resolved configuration with defaults filled in.
    InspectConfig {
        #[arg(long)]
        config: PathBuf,
    },
}

#[derive(Args)]
struct RenderArgs {
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    output: PathBuf,
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Enables the editing branch with this prompt.
    #[arg(long)]
    edit_prompt: Option<String>,
    #[arg(long)]
    keep_intermediate: bool,
    #[arg(long, conflicts_with = "plugin")]
    toy_models: bool,
    /// Plugin manifest binding external model adapters.
    #[arg(long)]
    plugin: Option<PathBuf>,
}

fn exit_code(err: &Error) -> u8 {
    if err.is_plugin() {
        3
    } else {
        2
    }
}

fn load_config(path: Option<&PathBuf>) -> toonshade::Result<PipelineConfig> {
    let config = match path {
        Some(p) => PipelineConfig::load(p)?,
        None => PipelineConfig::default(),
    };
    config.validate()?;
    Ok(config)
}

fn render(args: &RenderArgs) -> toonshade::Result<()> {
    let config = load_config(args.config.as_ref())?.with_seed(args.seed);
    let models = match &args.plugin {
        Some(path) => PluginManifest::load(path)?.bundle(),
        None => ModelBundle::toy(),
    };
    let input = load_frames(&args.input)?;
    let mut job = RenderJob::new(input, config, models);
    job.edit_prompt = args.edit_prompt.clone();
    let output = run_full(&job)?;
    save_render(&output, &args.output, args.keep_intermediate)?;
    print!("{}", output.summary);
    Ok(())
}

fn metrics(video: &Path, flows: &Path) -> toonshade::Result<()> {
    let video = load_frames(video)?;
    if video.len() < 2 {
        return Err(Error::InsufficientFrames(video.len()));
    }
    let flows = load_flows(flows, video.len())?;
    println!("pixel_mse = {:.6}", pixel_mse(&video, &flows)?);
    Ok(())
}

fn inspect(config: &Path) -> toonshade::Result<()> {
    let config = PipelineConfig::load(config)?;
    config.validate()?;
    print!("{}", config.to_canonical_string());
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Render(args) => render(args),
        Command::Metrics { video, flows } => metrics(video, flows),
        Command::InspectConfig { config } => inspect(config),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            if let Error::Config { key: Some(key), .. } = &e {
                eprintln!("  key: {key}");
            }
            ExitCode::from(exit_code(&e))
        }
    }
}
