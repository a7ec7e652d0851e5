//! Checkpoint loading shared by inference commands, plus the derived-seed
//! labels that make per-clip randomness independent of `--jobs`.

use std::path::{Path, PathBuf};

use vidae_core::latentgen::{LatentFlowModel, LatentNormStats};
use vidae_core::losses::FrozenTeacher;
use vidae_core::motion::MotionStats;
use vidae_core::nn::{AdamConfig, AdamW, Params};
use vidae_core::rng::SeedRng;
use vidae_core::tensor::Real;
use vidae_core::trainer::{
    ldm_config_digest, load_checkpoint, vae_config_digest, CheckpointMeta, TrainPhase, VaeModel,
};

use crate::config::RunConfig;
use crate::util::{read_norm_sidecar, io_err};
use crate::CliError;

/// Label for parameter-initialization streams (values are then overwritten
/// by checkpoint loads; shapes and names must match).
pub const INIT_RNG_LABEL: u64 = 1000;
/// Seed for the frozen feature net used by toy-FVD metrics.
pub const FVD_NET_SEED: u64 = 2077;
/// Seed for the checkpoint-independent perceptual-metric teacher.
pub const METRIC_TEACHER_SEED: u64 = 1007;

pub fn make_teacher<T: Real>(cfg: &RunConfig) -> FrozenTeacher<T> {
    match cfg.model.teacher.as_str() {
        "identity" => FrozenTeacher::identity(),
        _ => FrozenTeacher::random_conv_stack(cfg.model.teacher_seed),
    }
}

/// Freshly initialized model + parameter store (template for loads, or the
/// starting point of a stage-1 run).
pub fn init_vae<T: Real>(cfg: &RunConfig) -> Result<(VaeModel<T>, Params<T>), CliError> {
    let mut params = Params::new();
    let mut rng = SeedRng::derive(cfg.train.seed, INIT_RNG_LABEL);
    let model = VaeModel::init(
        &mut params,
        cfg.encoder_config(),
        cfg.decoder_config(),
        (cfg.data.h, cfg.data.w),
        make_teacher(cfg),
        &mut rng,
    )?;
    Ok((model, params))
}

pub struct VaeBundle<T: Real> {
    pub model: VaeModel<T>,
    pub params: Params<T>,
    pub motion: MotionStats,
    pub meta: CheckpointMeta,
}

pub fn load_vae<T: Real>(cfg: &RunConfig, path: &Path) -> Result<VaeBundle<T>, CliError> {
    let (model, mut params) = init_vae::<T>(cfg)?;
    let digest = vae_config_digest(&cfg.encoder_config(), &cfg.decoder_config());
    let mut opt = AdamW::new(AdamConfig::default(), params.len());
    let (meta, _) = load_checkpoint(path, &digest, &mut params, &mut opt)?;
    Ok(VaeBundle {
        model,
        params,
        motion: meta.motion,
        meta,
    })
}

pub struct LdmLoaded<T: Real> {
    pub model: LatentFlowModel,
    pub params: Params<T>,
    pub norm: LatentNormStats,
}

pub fn init_ldm<T: Real>(cfg: &RunConfig) -> Result<(LatentFlowModel, Params<T>), CliError> {
    let mut params = Params::new();
    let mut rng = SeedRng::derive(cfg.ldm.seed, INIT_RNG_LABEL);
    let model = LatentFlowModel::init(&mut params, cfg.ldm_config(), &mut rng)?;
    Ok((model, params))
}

pub fn load_ldm<T: Real>(cfg: &RunConfig, path: &Path) -> Result<LdmLoaded<T>, CliError> {
    let (model, mut params) = init_ldm::<T>(cfg)?;
    let digest = ldm_config_digest(&cfg.ldm_config());
    let mut opt = AdamW::new(AdamConfig::default(), params.len());
    load_checkpoint(path, &digest, &mut params, &mut opt)?;
    let norm_path = sidecar_path(path);
    let norm = read_norm_sidecar(&norm_path)?;
    Ok(LdmLoaded {
        model,
        params,
        norm,
    })
}

pub fn sidecar_path(ckpt: &Path) -> PathBuf {
    let mut s = ckpt.as_os_str().to_os_string();
    s.push(".norm");
    PathBuf::from(s)
}

/// Newest trained autoencoder checkpoint under the configured directory.
pub fn default_vae_ckpt(cfg: &RunConfig, include_dec_ft: bool) -> Result<PathBuf, CliError> {
    let mut phases = vec![];
    if include_dec_ft {
        phases.push(TrainPhase::DecoderFinetune);
    }
    phases.extend([
        TrainPhase::AlignFinetune,
        TrainPhase::Stage2,
        TrainPhase::Stage1,
    ]);
    for p in phases {
        let path = cfg.phase_ckpt(p);
        if path.exists() {
            return Ok(path);
        }
    }
    Err(CliError::Usage(format!(
        "no autoencoder checkpoint under {} (run `vidae train` or pass --ckpt)",
        cfg.train.ckpt_dir.display()
    )))
}

pub fn resolve_ckpt(
    explicit: &Option<PathBuf>,
    cfg: &RunConfig,
    include_dec_ft: bool,
) -> Result<PathBuf, CliError> {
    match explicit {
        Some(p) => Ok(p.clone()),
        None => default_vae_ckpt(cfg, include_dec_ft),
    }
}

pub fn ensure_parent(path: &Path) -> Result<(), CliError> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent).map_err(|e| io_err(parent, e))?;
        }
    }
    Ok(())
}
