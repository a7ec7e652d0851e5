//! Run configuration: TOML file with one section per subsystem. Every field
//! defaults to the desk preset, so an empty file (or a missing default path)
//! is a complete, valid configuration. Unknown keys are rejected.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use vidae_core::decoder::DecoderConfig;
use vidae_core::encoder::EncoderConfig;
use vidae_core::latentgen::LdmConfig;
use vidae_core::trainer::{config_digest, OptimConfig, TrainPhase};

use crate::CliError;

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    /// Arithmetic width for model math: "f32" (fast) or "f64" (reference).
    pub precision: String,
    pub data: DataConfig,
    pub model: ModelConfig,
    pub schedule: ScheduleConfig,
    pub train: TrainConfig,
    pub ldm: LdmSection,
    pub sample: SampleConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            precision: "f32".into(),
            data: DataConfig::default(),
            model: ModelConfig::default(),
            schedule: ScheduleConfig::default(),
            train: TrainConfig::default(),
            ldm: LdmSection::default(),
            sample: SampleConfig::default(),
        }
    }
}

/// Corpus generation and location.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub dir: PathBuf,
    pub eval_dir: PathBuf,
    pub t: usize,
    pub h: usize,
    pub w: usize,
    pub n_shapes: usize,
    pub n_clips: usize,
    pub n_eval_clips: usize,
    /// Distinct motion levels cycled across the corpus.
    pub n_levels: usize,
    pub seed: u64,
    pub eval_seed: u64,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            dir: "data/train".into(),
            eval_dir: "data/eval".into(),
            t: 9,
            h: 64,
            w: 64,
            n_shapes: 3,
            n_clips: 2048,
            n_eval_clips: 64,
            n_levels: 8,
            seed: 17,
            eval_seed: 9917,
        }
    }
}

/// Autoencoder geometry; defaults are the desk preset.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub hidden_dim: usize,
    pub enc_blocks: usize,
    pub dec_blocks: usize,
    pub n_heads: usize,
    pub patch_s_enc: usize,
    pub patch_t_enc: usize,
    pub p_s: usize,
    pub p_t: usize,
    pub latent_dim: usize,
    pub n_max: usize,
    pub patch_s_dec: usize,
    pub patch_t_dec: usize,
    /// Perceptual/alignment teacher: "random" or "identity".
    pub teacher: String,
    pub teacher_seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        let e = EncoderConfig::desk();
        let d = DecoderConfig::desk();
        ModelConfig {
            hidden_dim: e.hidden_dim,
            enc_blocks: e.n_blocks,
            dec_blocks: d.n_blocks,
            n_heads: e.n_heads,
            patch_s_enc: e.patch_s_enc,
            patch_t_enc: e.patch_t_enc,
            p_s: e.p_s,
            p_t: e.p_t,
            latent_dim: e.latent_dim,
            n_max: e.n_max_queries,
            patch_s_dec: d.patch_s_dec,
            patch_t_dec: d.patch_t_dec,
            teacher: "random".into(),
            teacher_seed: 7,
        }
    }
}

/// Default iteration budget per phase.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScheduleConfig {
    pub stage1: u64,
    pub stage2: u64,
    pub align: u64,
    pub dec_ft: u64,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        ScheduleConfig {
            stage1: 5000,
            stage2: 5000,
            align: 1000,
            dec_ft: 1000,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub seed: u64,
    pub lr_stage1: f64,
    pub lr_stage2: f64,
    pub lr_align: f64,
    pub lr_dec_ft: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub weight_decay: f64,
    /// Self-alignment weight used by the align phase.
    pub l_align: f64,
    /// KL weight used by the align phase (stage 2 uses the composite default).
    pub kl_weight_align: f64,
    pub log_every: u64,
    pub save_every: u64,
    pub ckpt_dir: PathBuf,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 4,
            seed: 42,
            lr_stage1: 5e-5,
            lr_stage2: 1e-5,
            lr_align: 1e-5,
            lr_dec_ft: 1e-5,
            beta1: 0.9,
            beta2: 0.999,
            weight_decay: 1e-4,
            l_align: 0.01,
            kl_weight_align: 1e-3,
            log_every: 25,
            save_every: 500,
            ckpt_dir: "runs/desk".into(),
        }
    }
}

/// Latent generator: architecture + its own optimization settings.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LdmSection {
    pub hidden_dim: usize,
    pub n_blocks: usize,
    pub n_heads: usize,
    pub n_classes: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub max_iters: u64,
    pub seed: u64,
}

impl Default for LdmSection {
    fn default() -> Self {
        let c = LdmConfig::desk();
        LdmSection {
            hidden_dim: c.hidden_dim,
            n_blocks: c.n_blocks,
            n_heads: c.n_heads,
            n_classes: c.n_classes,
            lr: 1e-4,
            batch_size: 8,
            max_iters: 2000,
            seed: 51,
        }
    }
}

/// Seeds and step counts for inference-side randomness.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SampleConfig {
    /// Euler steps for pixel decoding.
    pub steps: usize,
    /// Euler steps for latent generation.
    pub latent_steps: usize,
    /// Base seed for generator sampling; clip i uses derive(seed, i).
    pub seed: u64,
    /// Base seed for encoding; clip id k uses derive(encode_seed, k).
    pub encode_seed: u64,
    /// Base seed for decoding; clip id k uses derive(decode_seed, k).
    pub decode_seed: u64,
}

impl Default for SampleConfig {
    fn default() -> Self {
        SampleConfig {
            steps: 25,
            latent_steps: 25,
            seed: 1234,
            encode_seed: 2024,
            decode_seed: 4048,
        }
    }
}

impl RunConfig {
    /// Load from `path`. A missing file is only acceptable when the caller
    /// did not name one explicitly (the built-in desk preset applies).
    pub fn load(path: &Path, explicit: bool) -> Result<Self, CliError> {
        if !path.exists() {
            if explicit {
                return Err(CliError::Usage(format!(
                    "config file {} does not exist",
                    path.display()
                )));
            }
            return Ok(RunConfig::default());
        }
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Io(format!("reading {}: {e}", path.display())))?;
        let cfg: RunConfig = toml::from_str(&text)
            .map_err(|e| CliError::Usage(format!("config {}: {e}", path.display())))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), CliError> {
        if self.precision != "f32" && self.precision != "f64" {
            return Err(CliError::Usage(format!(
                "precision must be f32 or f64, got {:?}",
                self.precision
            )));
        }
        if self.model.teacher != "random" && self.model.teacher != "identity" {
            return Err(CliError::Usage(format!(
                "teacher must be random or identity, got {:?}",
                self.model.teacher
            )));
        }
        self.encoder_config()
            .validate()
            .and_then(|_| self.decoder_config().validate())
            .and_then(|_| self.ldm_config().validate())
            .map_err(CliError::from)?;
        Ok(())
    }

    pub fn encoder_config(&self) -> EncoderConfig {
        let m = &self.model;
        EncoderConfig {
            hidden_dim: m.hidden_dim,
            n_blocks: m.enc_blocks,
            n_heads: m.n_heads,
            patch_s_enc: m.patch_s_enc,
            patch_t_enc: m.patch_t_enc,
            p_s: m.p_s,
            p_t: m.p_t,
            latent_dim: m.latent_dim,
            n_max_queries: m.n_max,
        }
    }

    pub fn decoder_config(&self) -> DecoderConfig {
        let m = &self.model;
        DecoderConfig {
            hidden_dim: m.hidden_dim,
            n_blocks: m.dec_blocks,
            n_heads: m.n_heads,
            patch_s_dec: m.patch_s_dec,
            patch_t_dec: m.patch_t_dec,
            latent_dim: m.latent_dim,
            n_max_cond: m.n_max,
        }
    }

    /// Generator geometry implied by the data dims and the latent grid.
    pub fn ldm_config(&self) -> LdmConfig {
        let gh = self.data.h.div_ceil(self.model.p_s);
        let gw = self.data.w.div_ceil(self.model.p_s);
        let l_full = self.data.t.saturating_sub(1).div_ceil(self.model.p_t) * gh * gw;
        LdmConfig {
            hidden_dim: self.ldm.hidden_dim,
            n_blocks: self.ldm.n_blocks,
            n_heads: self.ldm.n_heads,
            n_classes: self.ldm.n_classes,
            latent_dim: self.model.latent_dim,
            grid_h: gh,
            grid_w: gw,
            l_full,
            video_t: self.data.t as u32,
            video_h: self.data.h as u32,
            video_w: self.data.w as u32,
            structural_only: false,
        }
    }

    pub fn optim_config(&self, phase: TrainPhase, iters: u64) -> OptimConfig {
        let lr = match phase {
            TrainPhase::Stage1 => self.train.lr_stage1,
            TrainPhase::Stage2 => self.train.lr_stage2,
            TrainPhase::AlignFinetune => self.train.lr_align,
            TrainPhase::DecoderFinetune => self.train.lr_dec_ft,
        };
        OptimConfig {
            lr,
            batch_size: self.train.batch_size,
            max_iters: iters,
            seed: self.train.seed,
            beta1: self.train.beta1,
            beta2: self.train.beta2,
            weight_decay: self.train.weight_decay,
        }
    }

    pub fn phase_iters(&self, phase: TrainPhase) -> u64 {
        match phase {
            TrainPhase::Stage1 => self.schedule.stage1,
            TrainPhase::Stage2 => self.schedule.stage2,
            TrainPhase::AlignFinetune => self.schedule.align,
            TrainPhase::DecoderFinetune => self.schedule.dec_ft,
        }
    }

    /// Default checkpoint path for a phase.
    pub fn phase_ckpt(&self, phase: TrainPhase) -> PathBuf {
        self.train.ckpt_dir.join(format!("vae_{phase}.1dvk"))
    }

    pub fn ldm_ckpt(&self) -> PathBuf {
        self.train.ckpt_dir.join("ldm.1dvk")
    }

    /// Content hash of the full resolved configuration (canonical TOML).
    pub fn digest(&self) -> [u8; 32] {
        config_digest(&toml::to_string(self).expect("config serializes"))
    }
}

pub fn hex32(d: &[u8; 32]) -> String {
    d.iter().map(|b| format!("{b:02x}")).collect()
}

/// Reproduction record written next to every command's outputs.
#[derive(Serialize)]
struct Manifest<'a> {
    run: ManifestRun<'a>,
    config: &'a RunConfig,
}

#[derive(Serialize)]
struct ManifestRun<'a> {
    command: &'a str,
    argv: Vec<String>,
    version: &'a str,
    config_digest: String,
    model_digest: String,
    formats: ManifestFormats,
}

#[derive(Serialize)]
struct ManifestFormats {
    clip: u32,
    latent: u32,
    checkpoint: u32,
}

pub fn write_manifest(dir: &Path, command: &str, cfg: &RunConfig) -> Result<(), CliError> {
    std::fs::create_dir_all(dir).map_err(|e| CliError::Io(format!("{}: {e}", dir.display())))?;
    let model_digest = vidae_core::trainer::vae_config_digest(
        &cfg.encoder_config(),
        &cfg.decoder_config(),
    );
    let m = Manifest {
        run: ManifestRun {
            command,
            argv: std::env::args().collect(),
            version: env!("CARGO_PKG_VERSION"),
            config_digest: hex32(&cfg.digest()),
            model_digest: hex32(&model_digest),
            formats: ManifestFormats {
                clip: vidae_core::synthdata::CLIP_VERSION,
                latent: vidae_core::latentfile::LATENT_VERSION,
                checkpoint: vidae_core::trainer::CHECKPOINT_VERSION,
            },
        },
        config: cfg,
    };
    let text = toml::to_string(&m).expect("manifest serializes");
    let path = dir.join(format!("manifest_{command}.toml"));
    std::fs::write(&path, text).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))?;
    Ok(())
}
