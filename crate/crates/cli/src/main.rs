use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand};
use octattn_cli::config::{Preset, RunConfig, RunMode};
use octattn_cli::report::{Body, Report};
use octattn_cli::run::{self, Input};
use octattn_cli::synth::SynthSpec;

#[derive(Parser, Debug)]
#[command(name = "octattn", version, about = "Octree attention verification harness")]
struct Cli {
    /// JSON run configuration; unknown keys are rejected.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Overrides the configured seed.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Overrides the configured selection mode.
    #[arg(long, global = true, value_enum)]
    mode: Option<RunMode>,

    /// Voxel size and range preset, applied before the config file.
    #[arg(long, global = true, value_enum)]
    preset: Option<Preset>,

    /// Write the JSON report here instead of stdout.
    #[arg(long, global = true)]
    out: Option<PathBuf>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Run the backbone on a point file or a generated scene.
    Forward {
        /// `.bin` (f32 x,y,z,intensity) or `.csv` point file.
        #[arg(long)]
        input: Option<PathBuf>,
    },
    /// Compare the octree block with exhaustive selection against the dense
    /// per-level oracle.
    Oracle {
        #[arg(long)]
        input: Option<PathBuf>,
        /// Generated scenes with seeds `0..scenes` when no input is given.
        #[arg(long, default_value_t = 20)]
        scenes: u64,
    },
    /// Attention MAC scaling of dense MHSA versus octree attention.
    Bench {
        /// Target voxel counts, ascending.
        #[arg(long, value_delimiter = ',')]
        sizes: Option<Vec<usize>>,
    },
    /// Gradient descent on the segmentation branch of a two-box scene.
    TrainSeg {
        #[arg(long, default_value_t = run::DEFAULT_TRAIN_STEPS)]
        steps: usize,
        #[arg(long, default_value_t = run::DEFAULT_LEARNING_RATE)]
        lr: f64,
    },
    /// Generate a scene and optionally write its points and boxes.
    Synth {
        #[arg(long, default_value_t = 4)]
        objects: usize,
        #[arg(long, default_value_t = 400)]
        points_per_object: usize,
        #[arg(long, default_value_t = 2000)]
        background: usize,
        /// `.bin` or `.csv` destination for the points.
        #[arg(long)]
        points_out: Option<PathBuf>,
        /// CSV destination for the boxes.
        #[arg(long)]
        boxes_out: Option<PathBuf>,
    },
}

fn load_config(cli: &Cli) -> Result<RunConfig> {
    let mut cfg = match &cli.config {
        Some(path) => {
            let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
            let mut value: serde_json::Value =
                serde_json::from_str(&text).with_context(|| format!("parsing config {}", path.display()))?;
            if let (Some(p), Some(obj)) = (cli.preset, value.as_object_mut()) {
                // preset first, explicit keys win
                let base = serde_json::to_value(RunConfig::default().with_preset(p))?;
                for (k, v) in base.as_object().into_iter().flatten() {
                    if matches!(k.as_str(), "voxel_size" | "range_min" | "range_max") {
                        obj.entry(k.clone()).or_insert_with(|| v.clone());
                    }
                }
            }
            RunConfig::from_json(&value.to_string()).with_context(|| format!("in config {}", path.display()))?
        }
        None => cli.preset.map_or_else(RunConfig::default, |p| RunConfig::default().with_preset(p)),
    };
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    if let Some(mode) = cli.mode {
        cfg.mode = mode;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn execute(cli: &Cli) -> Result<Report> {
    let cfg = load_config(cli)?;
    match &cli.command {
        Command::Forward { input } => {
            let input = match input {
                Some(p) => Input::File(p),
                None => Input::Synthetic(run::forward_scene_spec(&cfg)),
            };
            run::forward(&cfg, &input)
        }
        Command::Oracle { input, scenes } => {
            let seeds: Vec<u64> = (0..*scenes).collect();
            run::oracle(&cfg, input.as_deref(), &seeds)
        }
        Command::Bench { sizes } => {
            let sizes = sizes.clone().unwrap_or_else(|| run::DEFAULT_BENCH_SIZES.to_vec());
            run::bench(&cfg, &sizes)
        }
        Command::TrainSeg { steps, lr } => run::train_seg(&cfg, *steps, *lr),
        Command::Synth {
            objects,
            points_per_object,
            background,
            points_out,
            boxes_out,
        } => {
            let spec = SynthSpec::cluttered(*objects, *points_per_object, *background, (&cfg.range_min, &cfg.range_max));
            run::synth(&cfg, &spec, points_out.as_deref(), boxes_out.as_deref())
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = execute(&cli).and_then(|report| {
        let json = serde_json::to_string_pretty(&report)?;
        match &cli.out {
            Some(path) => std::fs::write(path, json + "\n").with_context(|| format!("writing {}", path.display()))?,
            None => {
                use std::io::Write;
                writeln!(std::io::stdout().lock(), "{json}").context("writing report to stdout")?
            }
        }
        Ok(report)
    });
    match result {
        Ok(report) => {
            let failed = match &report.body {
                Body::Oracle(o) => !o.pass,
                _ => false,
            };
            if failed {
                ExitCode::from(1)
            } else {
                ExitCode::SUCCESS
            }
        }
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
