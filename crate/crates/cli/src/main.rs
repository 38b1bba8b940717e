//! `vgan` command line: phantom generation, offline augmentation, unpaired
//! translation training, inference, segmentation, reconstruction,
//! validation, and the full pipeline.

use anyhow::{anyhow, Result};
use clap::{Parser, Subcommand, ValueEnum};
use std::fs;
use std::path::PathBuf;
use vgan::commands::{self, Ctx, PhantomArgs};
use vgan::config::PipelineConfig;
use vgan_core::gan::Direction;

#[derive(Parser)]
#[command(name = "vgan", version, about = "Unpaired MR-to-CT volume translation, bone segmentation, and 3D reconstruction")]
struct Cli {
    /// INI config file (required by every subcommand except `phantom`)
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override the root seed from the config
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Override the output directory from the config
    #[arg(long, global = true)]
    output: Option<PathBuf>,
    /// Worker threads (reserved; stages currently run single-threaded)
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum DirectionArg {
    Mr2ct,
    Ct2mr,
}

impl From<DirectionArg> for Direction {
    fn from(d: DirectionArg) -> Self {
        match d {
            DirectionArg::Mr2ct => Direction::MrToCt,
            DirectionArg::Ct2mr => Direction::CtToMr,
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Generate augmented copies of the training corpora
    Augment,
    /// Train the translation model
    Train,
    /// Translate a volume (or every volume in a directory)
    Translate {
        input: PathBuf,
        #[arg(long, value_enum)]
        direction: DirectionArg,
    },
    /// Segment bone from a volume by per-slice thresholding
    Segment { input: PathBuf },
    /// Extract a triangle mesh from a binary mask volume
    Reconstruct { input: PathBuf },
    /// Register landmarks to meshes and report point-to-surface distances
    Validate {
        /// Mesh files (.ply), one per patient
        #[arg(required = true)]
        meshes: Vec<PathBuf>,
        #[arg(long)]
        landmarks: Option<PathBuf>,
    },
    /// Run the full chain: augment, train, translate, segment, reconstruct,
    /// validate
    Pipeline,
    /// Generate synthetic two-modality phantom corpora with ground truth
    Phantom {
        /// Phantoms per modality
        #[arg(long, default_value_t = 1)]
        count: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Volume dims as "nx ny nz"
        #[arg(long, default_value = "32 16 16")]
        dims: String,
        #[arg(long, default_value_t = 0.02)]
        noise_sd: f32,
    },
}

fn load_ctx(cli: &Cli) -> Result<(Ctx, String)> {
    let path = cli
        .config
        .as_ref()
        .ok_or_else(|| anyhow!("--config is required for this subcommand"))?;
    let text = fs::read_to_string(path)
        .map_err(|e| anyhow!("cannot read config {}: {e}", path.display()))?;
    let mut cfg = PipelineConfig::from_file(path)?;
    if let Some(seed) = cli.seed {
        cfg.set_seed(seed);
    }
    let ctx = Ctx::new(cfg, &text, cli.output.clone())?;
    Ok((ctx, text))
}

fn run(cli: Cli) -> Result<()> {
    if let Some(t) = cli.threads {
        if t == 0 {
            return Err(anyhow!("--threads must be >= 1"));
        }
    }
    match &cli.command {
        Command::Phantom {
            count,
            seed,
            dims,
            noise_sd,
        } => {
            let parts: Vec<usize> = dims
                .split_whitespace()
                .map(|p| p.parse())
                .collect::<Result<_, _>>()
                .map_err(|_| anyhow!("--dims expects three integers, e.g. \"32 16 16\""))?;
            let [nx, ny, nz]: [usize; 3] = parts
                .try_into()
                .map_err(|_| anyhow!("--dims expects three integers"))?;
            let out = cli
                .output
                .clone()
                .ok_or_else(|| anyhow!("--output is required for phantom"))?;
            let args = PhantomArgs {
                count: *count,
                seed: cli.seed.unwrap_or(*seed),
                dims: (nx, ny, nz),
                noise_sd: *noise_sd,
            };
            let artifacts = commands::cmd_phantom(&out, &args)?;
            let ctx = Ctx::new(PipelineConfig::default(), "", Some(out))?;
            ctx.write_manifest("phantom", &artifacts, "manifest_phantom.json")?;
            Ok(())
        }
        command => {
            let (ctx, _text) = load_ctx(&cli)?;
            let (name, artifacts) = match command {
                Command::Augment => ("augment", commands::cmd_augment(&ctx)?),
                Command::Train => ("train", commands::cmd_train(&ctx)?),
                Command::Translate { input, direction } => (
                    "translate",
                    commands::cmd_translate(&ctx, input, (*direction).into())?,
                ),
                Command::Segment { input } => ("segment", commands::cmd_segment(&ctx, input)?),
                Command::Reconstruct { input } => {
                    ("reconstruct", commands::cmd_reconstruct(&ctx, input)?)
                }
                Command::Validate { meshes, landmarks } => {
                    let lm = landmarks
                        .clone()
                        .or_else(|| ctx.cfg.validate.landmarks.clone())
                        .ok_or_else(|| {
                            anyhow!("no landmarks (set [validate] landmarks or --landmarks)")
                        })?;
                    ("validate", commands::cmd_validate(&ctx, meshes, &lm)?)
                }
                Command::Pipeline => ("pipeline", commands::cmd_pipeline(&ctx)?),
                Command::Phantom { .. } => unreachable!(),
            };
            let manifest_name = if name == "pipeline" {
                "manifest.json".to_string()
            } else {
                format!("manifest_{name}.json")
            };
            ctx.write_manifest(name, &artifacts, &manifest_name)?;
            Ok(())
        }
    }
}

fn main() {
    let cli = Cli::parse();
    if let Err(e) = run(cli) {
        eprintln!("error: {e:#}");
        std::process::exit(1);
    }
}
