//! `vidae`: train, run, and measure the 1D video autoencoder from the
//! command line. Every subcommand reads one TOML run configuration; flags
//! override per-invocation details like paths and iteration counts.

use std::path::PathBuf;

use clap::{Parser, Subcommand};

use vidae_core::error::CoreError;

mod bundles;
mod cmd_codec;
mod cmd_data;
mod cmd_eval;
mod cmd_ldm;
mod cmd_plot;
mod cmd_train;
mod config;
mod svg;
mod util;

use config::RunConfig;

#[derive(Debug)]
pub enum CliError {
    /// Bad flags or an inconsistent request; exit 2.
    Usage(String),
    /// Filesystem trouble; exit 3.
    Io(String),
    /// A file exists but its contents are not what the schema says; exit 4.
    Format(String),
    Core(CoreError),
}

#[derive(Parser)]
#[command(name = "vidae", version, about = "variable-length 1D video autoencoder")]
struct Cli {
    /// Run configuration (TOML). Optional unless passed explicitly; every
    /// field has a default, so a missing default file means "all defaults".
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate a synthetic moving-shapes corpus (clips + index.csv).
    GenData {
        /// Output directory (default: data.dir, or data.eval_dir with --eval).
        #[arg(long)]
        out: Option<PathBuf>,
        /// Number of clips (default: data.n_clips / data.n_eval_clips).
        #[arg(long)]
        n: Option<usize>,
        /// Corpus seed (default: data.seed / data.eval_seed).
        #[arg(long)]
        seed: Option<u64>,
        /// Generate the held-out evaluation split.
        #[arg(long)]
        eval: bool,
    },
    /// Run one training phase of the autoencoder.
    Train {
        /// stage1 | stage2 | align | dec-ft
        #[arg(long)]
        phase: String,
        /// Iteration budget override (default: the schedule section).
        #[arg(long)]
        iters: Option<u64>,
        /// Continue from this phase's own checkpoint, appending to its log.
        #[arg(long)]
        resume: bool,
        /// Checkpoint to initialize parameters from (default: the previous
        /// phase's checkpoint under train.ckpt_dir).
        #[arg(long, conflicts_with = "from_scratch")]
        init_from: Option<PathBuf>,
        /// Start from random parameters even for later phases.
        #[arg(long)]
        from_scratch: bool,
        /// Where to write this phase's checkpoint.
        #[arg(long)]
        ckpt: Option<PathBuf>,
        /// Latent generator checkpoint (dec-ft only).
        #[arg(long)]
        ldm: Option<PathBuf>,
        /// Training corpus directory (default: data.dir).
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Encode a corpus to hybrid latent files (.1dva).
    Encode {
        /// Autoencoder checkpoint (default: newest phase under train.ckpt_dir).
        #[arg(long)]
        ckpt: Option<PathBuf>,
        /// Corpus directory containing index.csv.
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Keep only this fraction of 1D tokens in the stored latents.
        #[arg(long)]
        frac: Option<f64>,
        #[arg(long, default_value_t = 1)]
        jobs: usize,
    },
    /// Decode latent files (.1dva) back to clips (.vid).
    Decode {
        #[arg(long)]
        ckpt: Option<PathBuf>,
        /// Directory of .1dva files.
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Denoising steps (default: sample.steps).
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long, default_value_t = 1)]
        jobs: usize,
    },
    /// Encode then decode a corpus and score the round trip.
    Reconstruct {
        #[arg(long)]
        ckpt: Option<PathBuf>,
        /// Corpus directory (default: data.eval_dir).
        #[arg(long)]
        input: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// full | con | avg: how 1D token budgets are assigned.
        #[arg(long, default_value = "full")]
        len_mode: String,
        /// Target kept fraction of 1D tokens (con: per clip; avg: set mean).
        #[arg(long, default_value_t = 1.0)]
        frac: f64,
        /// Denoising steps (default: sample.steps).
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long, default_value_t = 1)]
        jobs: usize,
        /// Also report the toy-FVD between inputs and reconstructions.
        #[arg(long)]
        fvd: bool,
        /// Write reconstructed clips next to metrics.csv.
        #[arg(long)]
        write_clips: bool,
    },
    /// Train the class-conditional latent generator on encoded latents.
    TrainLdm {
        /// Autoencoder checkpoint to encode with.
        #[arg(long)]
        vae: Option<PathBuf>,
        /// Where to write the generator checkpoint (default: ldm.1dvk).
        #[arg(long)]
        ckpt: Option<PathBuf>,
        /// Iteration override (default: ldm.max_iters).
        #[arg(long)]
        iters: Option<u64>,
        /// Training corpus directory (default: data.dir).
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long, default_value_t = 1)]
        jobs: usize,
    },
    /// Sample new clips from the latent generator.
    Sample {
        #[arg(long)]
        vae: Option<PathBuf>,
        #[arg(long)]
        ldm: Option<PathBuf>,
        /// Motion-class label to condition on.
        #[arg(long)]
        class: usize,
        /// 1D tokens to generate (0 = structural latent only).
        #[arg(long)]
        len_budget: usize,
        /// Pixel-decoder denoising steps (default: sample.steps).
        #[arg(long)]
        steps: Option<usize>,
        /// Latent-generator denoising steps (default: sample.latent_steps).
        #[arg(long)]
        latent_steps: Option<usize>,
        #[arg(long, default_value_t = 8)]
        n_clips: usize,
        #[arg(long)]
        out: PathBuf,
        /// Also write the sampled latents as .1dva files.
        #[arg(long)]
        save_latents: bool,
        #[arg(long, default_value_t = 1)]
        jobs: usize,
    },
    /// Score two directories of clips pairwise (sorted by file name).
    Metrics {
        #[arg(long)]
        real: PathBuf,
        #[arg(long = "gen")]
        generated: PathBuf,
        /// Write metrics.csv + summary.txt here instead of stdout only.
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        fvd: bool,
        #[arg(long, default_value_t = 1)]
        jobs: usize,
    },
    /// Per-channel moments and the struct/1D std correlation of stored latents.
    LatentStats {
        /// Directory of .1dva files.
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Render loss and sweep curves from run CSVs to SVG.
    Plot {
        #[arg(long)]
        train_csv: Option<PathBuf>,
        #[arg(long)]
        sweep_csv: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Reconstruction quality across kept-length fractions (and step counts).
    SweepLength {
        #[arg(long)]
        ckpt: Option<PathBuf>,
        /// Corpus directory (default: data.eval_dir).
        #[arg(long)]
        input: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Also sweep denoising steps {1, 4, 8, 25}.
        #[arg(long)]
        steps_sweep: bool,
        /// Evaluate only the first N clips of the corpus.
        #[arg(long)]
        n_clips: Option<usize>,
        #[arg(long, default_value_t = 1)]
        jobs: usize,
    },
}

/// Instantiate `$fn` at the configured float width.
macro_rules! dispatch {
    ($cfg:expr, $m:ident :: $f:ident, $args:expr) => {
        match $cfg.precision.as_str() {
            "f64" => $m::$f::<f64>(&$cfg, $args),
            _ => $m::$f::<f32>(&$cfg, $args),
        }
    };
}

fn run(cli: Cli) -> Result<(), CliError> {
    let explicit = cli.config.is_some();
    let path = cli
        .config
        .clone()
        .unwrap_or_else(|| PathBuf::from("vidae.toml"));
    let cfg = RunConfig::load(&path, explicit)?;
    cfg.validate()?;

    match cli.cmd {
        Cmd::GenData { out, n, seed, eval } => {
            cmd_data::run(&cfg, &cmd_data::GenDataArgs { out, n, seed, eval })
        }
        Cmd::Train {
            phase,
            iters,
            resume,
            init_from,
            from_scratch,
            ckpt,
            ldm,
            data,
        } => {
            let phase = phase.parse().map_err(CliError::Core)?;
            let args = cmd_train::TrainArgs {
                phase,
                iters,
                resume,
                init_from,
                from_scratch,
                ckpt,
                ldm,
                data,
            };
            dispatch!(cfg, cmd_train::run, &args)
        }
        Cmd::Encode {
            ckpt,
            input,
            out,
            frac,
            jobs,
        } => {
            let args = cmd_codec::EncodeArgs {
                ckpt,
                input,
                out,
                frac,
                jobs,
            };
            dispatch!(cfg, cmd_codec::encode, &args)
        }
        Cmd::Decode {
            ckpt,
            input,
            out,
            steps,
            jobs,
        } => {
            let args = cmd_codec::DecodeArgs {
                ckpt,
                input,
                out,
                steps,
                jobs,
            };
            dispatch!(cfg, cmd_codec::decode, &args)
        }
        Cmd::Reconstruct {
            ckpt,
            input,
            out,
            len_mode,
            frac,
            steps,
            jobs,
            fvd,
            write_clips,
        } => {
            let args = cmd_eval::ReconstructArgs {
                ckpt,
                input: input.unwrap_or_else(|| cfg.data.eval_dir.clone()),
                out,
                len_mode: len_mode.parse()?,
                frac,
                steps,
                jobs,
                fvd,
                write_clips,
            };
            dispatch!(cfg, cmd_eval::reconstruct, &args)
        }
        Cmd::TrainLdm {
            vae,
            ckpt,
            iters,
            data,
            jobs,
        } => {
            let args = cmd_ldm::TrainLdmArgs {
                vae,
                ckpt,
                iters,
                data,
                jobs,
            };
            dispatch!(cfg, cmd_ldm::train_ldm, &args)
        }
        Cmd::Sample {
            vae,
            ldm,
            class,
            len_budget,
            steps,
            latent_steps,
            n_clips,
            out,
            save_latents,
            jobs,
        } => {
            let args = cmd_ldm::SampleArgs {
                vae,
                ldm,
                class,
                len_budget,
                steps,
                latent_steps,
                n_clips,
                out,
                save_latents,
                jobs,
            };
            dispatch!(cfg, cmd_ldm::sample, &args)
        }
        Cmd::Metrics {
            real,
            generated,
            out,
            fvd,
            jobs,
        } => cmd_eval::metrics(
            &cfg,
            &cmd_eval::MetricsArgs {
                real,
                generated,
                out,
                fvd,
                jobs,
            },
        ),
        Cmd::LatentStats { input, out } => {
            cmd_codec::latent_stats(&cfg, &cmd_codec::LatentStatsArgs { input, out })
        }
        Cmd::Plot {
            train_csv,
            sweep_csv,
            out,
        } => cmd_plot::run(
            &cfg,
            &cmd_plot::PlotArgs {
                train_csv,
                sweep_csv,
                out,
            },
        ),
        Cmd::SweepLength {
            ckpt,
            input,
            out,
            steps_sweep,
            n_clips,
            jobs,
        } => {
            let args = cmd_eval::SweepArgs {
                ckpt,
                input: input.unwrap_or_else(|| cfg.data.eval_dir.clone()),
                out,
                steps_sweep,
                n_clips,
                jobs,
            };
            dispatch!(cfg, cmd_eval::sweep_length, &args)
        }
    }
}

fn main() {
    let cli = Cli::parse();
    if let Err(e) = run(cli) {
        eprintln!("error: {e}");
        std::process::exit(e.exit_code());
    }
}
