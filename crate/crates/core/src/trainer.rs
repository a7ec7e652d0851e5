//! Two-stage training driver: the phase gating table, the four optimization
//! steps, loss-spike skipping, checkpointing, and per-step log records.
//!
//! Every stochastic decision of a step is drawn from the state's generator in
//! a fixed order (timestep, condition mode, reparameterization noise, pixel
//! noise, then any latent-generator draws), so a fixed seed reproduces the
//! loss trajectory bit-exactly in 64-bit mode.

use std::collections::VecDeque;
use std::fmt;
use std::fs;
use std::io::Write as _;
use std::path::Path;
use std::str::FromStr;
use std::time::Instant;

use sha2::{Digest, Sha256};

use crate::decoder::{Decoder, DecoderConfig};
use crate::encoder::{
    latent_geometry, reparameterize_in_graph, Encoder, EncoderConfig, HybridLatent, LatentMeta,
};
use crate::error::{CoreError, Result};
use crate::flow::{interpolate, sample_loop, sample_timestep, uniform_schedule, TimestepSampler};
use crate::graph::Graph;
use crate::latent_policy::{sample_condition_mode, tail_dropout, ConditionMode};
use crate::latentgen::{denoised_latent_estimate, LatentFlowModel, LatentNormStats, LdmConfig};
use crate::losses::{
    clean_estimate, composite_loss, diffusion_loss, kl_loss_all, perceptual_loss, repa_loss,
    repa_target_dim, repa_teacher_targets, self_align_loss, FrozenTeacher, LossParts, LossWeights,
};
use crate::motion::{ema_update, normalize_score, raw_motion_score, MotionStats};
use crate::nn::{AdamConfig, AdamW, GradStore, Init, Linear, Params};
use crate::rng::{RngState, SeedRng};
use crate::synthdata::{crop_to_record, PadRecord, VideoClip};
use crate::tensor::{Real, Tensor};

pub const GRAD_CLIP: f64 = 1.0;
/// A step whose batch loss exceeds this multiple of the trailing median is
/// skipped without touching the optimizer.
pub const SPIKE_FACTOR: f64 = 10.0;
/// Number of accepted step losses the spike rule looks back over.
pub const SPIKE_WINDOW: usize = 100;

pub const CHECKPOINT_MAGIC: [u8; 4] = *b"1DVK";
pub const CHECKPOINT_VERSION: u32 = 1;

// ---- phases ----

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TrainPhase {
    Stage1,
    Stage2,
    AlignFinetune,
    DecoderFinetune,
}

impl TrainPhase {
    pub fn as_u32(self) -> u32 {
        match self {
            TrainPhase::Stage1 => 0,
            TrainPhase::Stage2 => 1,
            TrainPhase::AlignFinetune => 2,
            TrainPhase::DecoderFinetune => 3,
        }
    }

    pub fn from_u32(x: u32) -> Result<Self> {
        Ok(match x {
            0 => TrainPhase::Stage1,
            1 => TrainPhase::Stage2,
            2 => TrainPhase::AlignFinetune,
            3 => TrainPhase::DecoderFinetune,
            _ => {
                return Err(CoreError::CheckpointFormat(format!(
                    "unknown phase tag {x}"
                )))
            }
        })
    }
}

impl fmt::Display for TrainPhase {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            TrainPhase::Stage1 => "stage1",
            TrainPhase::Stage2 => "stage2",
            TrainPhase::AlignFinetune => "align",
            TrainPhase::DecoderFinetune => "dec-ft",
        })
    }
}

impl FromStr for TrainPhase {
    type Err = CoreError;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "stage1" => TrainPhase::Stage1,
            "stage2" => TrainPhase::Stage2,
            "align" => TrainPhase::AlignFinetune,
            "dec-ft" => TrainPhase::DecoderFinetune,
            _ => {
                return Err(CoreError::InvalidArgument(format!(
                    "unknown phase {s:?} (expected stage1|stage2|align|dec-ft)"
                )))
            }
        })
    }
}

/// Everything a phase decides about one optimization step. The table below is
/// total: no phase leaves a sampler, dropout rule, trainable set, or loss
/// weight unspecified.
#[derive(Clone, Debug)]
pub struct PhasePolicy {
    pub phase: TrainPhase,
    pub sampler: TimestepSampler,
    /// Condition is always the full 1D sequence (no dropout draws).
    pub always_full_condition: bool,
    pub train_encoder: bool,
    /// Raw motion scores feed the running statistics during this phase.
    pub update_motion: bool,
    /// Condition content is the generator's estimated clean latent.
    pub condition_from_generator: bool,
    pub weights: LossWeights,
    pub default_lr: f64,
}

pub fn phase_policy(phase: TrainPhase) -> PhasePolicy {
    let base = LossWeights::default();
    match phase {
        TrainPhase::Stage1 => PhasePolicy {
            phase,
            sampler: TimestepSampler::Stage1Constant,
            always_full_condition: true,
            train_encoder: true,
            update_motion: false,
            condition_from_generator: false,
            weights: LossWeights {
                l_align: 0.0,
                ..base
            },
            default_lr: 5e-5,
        },
        TrainPhase::Stage2 => PhasePolicy {
            phase,
            sampler: TimestepSampler::thick_tailed_default(),
            always_full_condition: false,
            train_encoder: true,
            update_motion: true,
            condition_from_generator: false,
            weights: LossWeights {
                l_align: 0.0,
                ..base
            },
            default_lr: 1e-5,
        },
        TrainPhase::AlignFinetune => PhasePolicy {
            phase,
            sampler: TimestepSampler::thick_tailed_default(),
            always_full_condition: false,
            train_encoder: true,
            update_motion: true,
            condition_from_generator: false,
            weights: LossWeights {
                l3: AlignOptions::default().kl_weight,
                l_align: AlignOptions::default().l_align,
                ..base
            },
            default_lr: 1e-5,
        },
        TrainPhase::DecoderFinetune => PhasePolicy {
            phase,
            sampler: TimestepSampler::thick_tailed_default(),
            always_full_condition: false,
            train_encoder: false,
            update_motion: true,
            condition_from_generator: true,
            weights: LossWeights {
                l3: 0.0,
                l_align: 0.0,
                ..base
            },
            default_lr: 1e-5,
        },
    }
}

/// Alignment fine-tune knobs. Setting `l_align = 0` and `kl_weight` back to
/// the stage-2 value makes the step identical to [`stage2_step`].
#[derive(Clone, Copy, Debug)]
pub struct AlignOptions {
    pub l_align: f64,
    pub kl_weight: f64,
}

impl Default for AlignOptions {
    fn default() -> Self {
        AlignOptions {
            l_align: 0.01,
            kl_weight: 1e-3,
        }
    }
}

/// Optimization settings for one phase run.
#[derive(Clone, Copy, Debug)]
pub struct OptimConfig {
    pub lr: f64,
    pub batch_size: usize,
    pub max_iters: u64,
    pub seed: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub weight_decay: f64,
}

impl OptimConfig {
    pub fn for_phase(phase: TrainPhase) -> Self {
        OptimConfig {
            lr: phase_policy(phase).default_lr,
            batch_size: 4,
            max_iters: 1000,
            seed: 0,
            beta1: 0.9,
            beta2: 0.999,
            weight_decay: 1e-4,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0) {
            return Err(CoreError::InvalidArgument(format!(
                "lr must be > 0, got {}",
                self.lr
            )));
        }
        if self.batch_size == 0 {
            return Err(CoreError::InvalidArgument("batch_size must be >= 1".into()));
        }
        Ok(())
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            lr: self.lr,
            beta1: self.beta1,
            beta2: self.beta2,
            eps: 1e-8,
            weight_decay: self.weight_decay,
        }
    }
}

// ---- model bundle ----

/// Encoder, decoder, alignment projector, and the frozen perceptual teacher,
/// sharing one parameter store. The projector is sized for the spatial
/// resolution given at init; training clips must share it (any temporal
/// length works).
pub struct VaeModel<T: Real> {
    pub encoder: Encoder,
    pub decoder: Decoder,
    pub repa_proj: Linear,
    pub teacher: FrozenTeacher<T>,
    pub ref_hw: (usize, usize),
}

impl<T: Real> VaeModel<T> {
    pub fn init(
        params: &mut Params<T>,
        enc_cfg: EncoderConfig,
        dec_cfg: DecoderConfig,
        ref_hw: (usize, usize),
        teacher: FrozenTeacher<T>,
        rng: &mut SeedRng,
    ) -> Result<Self> {
        if enc_cfg.latent_dim != dec_cfg.latent_dim {
            return Err(CoreError::InvalidArgument(format!(
                "latent dim mismatch: encoder {} vs decoder {}",
                enc_cfg.latent_dim, dec_cfg.latent_dim
            )));
        }
        if enc_cfg.patch_t_enc % dec_cfg.patch_t_dec != 0 || enc_cfg.p_s % dec_cfg.patch_s_dec != 0
        {
            return Err(CoreError::InvalidArgument(
                "decoder patches must divide the encoder padding grid".into(),
            ));
        }
        let encoder = Encoder::init(params, enc_cfg, rng)?;
        let decoder = Decoder::init(params, dec_cfg, rng)?;
        let (hp, wp) = (
            ref_hw.0.div_ceil(enc_cfg.p_s) * enc_cfg.p_s,
            ref_hw.1.div_ceil(enc_cfg.p_s) * enc_cfg.p_s,
        );
        let (nh, nw) = (hp / dec_cfg.patch_s_dec, wp / dec_cfg.patch_s_dec);
        let tap_dim = repa_target_dim(&teacher, hp, wp, nh, nw)?;
        let repa_proj = Linear::init(
            params,
            "vae.repa",
            dec_cfg.hidden_dim,
            tap_dim,
            true,
            Init::Lecun,
            rng,
        );
        Ok(VaeModel {
            encoder,
            decoder,
            repa_proj,
            teacher,
            ref_hw,
        })
    }

    /// Encode with the trained motion statistics; the stored motion score is
    /// the normalized one that drives token budgets.
    pub fn encode_clip(
        &self,
        params: &Params<T>,
        clip: &VideoClip,
        motion: &MotionStats,
        rng: &mut SeedRng,
    ) -> Result<HybridLatent<T>> {
        let s_hat = normalize_score(motion, raw_motion_score(clip));
        let (latent, _) = self.encoder.encode(params, clip, s_hat, rng)?;
        Ok(latent)
    }

    /// Flow-matching decode: Euler from pure noise down to t=0 conditioned on
    /// the latent, then crop the padding away.
    pub fn decode_latent(
        &self,
        params: &Params<T>,
        latent: &HybridLatent<T>,
        steps: usize,
        rng: &mut SeedRng,
    ) -> Result<VideoClip> {
        let enc = &self.encoder.cfg;
        latent.validate(enc.p_t, enc.p_s)?;
        let (t, h, w) = (
            latent.meta.t as usize,
            latent.meta.h as usize,
            latent.meta.w as usize,
        );
        let (tp, hp, wp) = (
            t.div_ceil(enc.patch_t_enc) * enc.patch_t_enc,
            h.div_ceil(enc.p_s) * enc.p_s,
            w.div_ceil(enc.p_s) * enc.p_s,
        );
        let geo = latent.geometry(enc.p_t, enc.p_s);
        let structural = latent.structural_rows();
        let n_px = tp * hp * wp;
        let init: Vec<T> = (0..n_px * 3).map(|_| T::from_f64(rng.normal())).collect();
        let x_init = Tensor::new(vec![n_px, 3], init);
        let schedule = uniform_schedule(steps);
        let x0 = sample_loop(
            |x, t_now| {
                let mut g = Graph::<T>::new();
                let sv = g.constant(structural.clone());
                let qv = g.constant(latent.oned.clone());
                let cond = self.decoder.assemble_condition(
                    &mut g,
                    params,
                    sv,
                    qv,
                    latent.valid_len,
                    (geo.h, geo.w),
                    true,
                )?;
                let xv = g.constant(x.clone());
                let out = self
                    .decoder
                    .predict_velocity(&mut g, params, xv, (tp, hp, wp), t_now, &cond, true)?;
                Ok(g.value(out.velocity).clone())
            },
            x_init,
            &schedule,
        )?;
        let padded = VideoClip::from_real(&x0, tp, hp, wp, 8, 0)?;
        crop_to_record(
            &padded,
            &PadRecord {
                orig_t: t,
                orig_h: h,
                orig_w: w,
            },
        )
    }

    /// encode → truncate the 1D sequence to `keep` rows → decode.
    pub fn reconstruct(
        &self,
        params: &Params<T>,
        clip: &VideoClip,
        motion: &MotionStats,
        keep: usize,
        steps: usize,
        rng: &mut SeedRng,
    ) -> Result<(VideoClip, HybridLatent<T>)> {
        let latent = self.encode_clip(params, clip, motion, rng)?;
        let latent = tail_dropout(&latent, keep)?;
        let decoded = self.decode_latent(params, &latent, steps, rng)?;
        Ok((decoded, latent))
    }
}

// ---- config digests ----

pub fn config_digest(desc: &str) -> [u8; 32] {
    let mut h = Sha256::new();
    h.update(desc.as_bytes());
    h.finalize().into()
}

pub fn vae_config_digest(enc: &EncoderConfig, dec: &DecoderConfig) -> [u8; 32] {
    config_digest(&format!(
        "vae|enc:hd={},nb={},nh={},pse={},pte={},ps={},pt={},c={},nq={}\
         |dec:hd={},nb={},nh={},psd={},ptd={},c={},nc={}",
        enc.hidden_dim,
        enc.n_blocks,
        enc.n_heads,
        enc.patch_s_enc,
        enc.patch_t_enc,
        enc.p_s,
        enc.p_t,
        enc.latent_dim,
        enc.n_max_queries,
        dec.hidden_dim,
        dec.n_blocks,
        dec.n_heads,
        dec.patch_s_dec,
        dec.patch_t_dec,
        dec.latent_dim,
        dec.n_max_cond,
    ))
}

pub fn ldm_config_digest(cfg: &LdmConfig) -> [u8; 32] {
    config_digest(&format!(
        "ldm|hd={},nb={},nh={},k={},c={},gh={},gw={},l={},vt={},vh={},vw={},so={}",
        cfg.hidden_dim,
        cfg.n_blocks,
        cfg.n_heads,
        cfg.n_classes,
        cfg.latent_dim,
        cfg.grid_h,
        cfg.grid_w,
        cfg.l_full,
        cfg.video_t,
        cfg.video_h,
        cfg.video_w,
        cfg.structural_only,
    ))
}

// ---- training state ----

pub struct TrainState<T: Real> {
    pub params: Params<T>,
    pub opt: AdamW<T>,
    pub phase: TrainPhase,
    pub iter: u64,
    pub motion: MotionStats,
    pub rng: SeedRng,
    /// Losses of accepted steps, newest last, capped at [`SPIKE_WINDOW`].
    pub loss_hist: VecDeque<f64>,
    pub skipped: u64,
}

impl<T: Real> TrainState<T> {
    pub fn new(params: Params<T>, adam: AdamConfig, phase: TrainPhase, seed: u64) -> Self {
        let n = params.len();
        TrainState {
            params,
            opt: AdamW::new(adam, n),
            phase,
            iter: 0,
            motion: MotionStats::default(),
            rng: SeedRng::from_seed(seed),
            loss_hist: VecDeque::new(),
            skipped: 0,
        }
    }

    pub fn save(&self, path: &Path, digest: &[u8; 32]) -> Result<()> {
        let meta = CheckpointMeta {
            phase: self.phase,
            iter: self.iter,
            adam_step: self.opt.step_count(),
            skipped: self.skipped,
            motion: self.motion,
            rng: self.rng.state(),
        };
        let hist: Vec<f64> = self.loss_hist.iter().copied().collect();
        save_checkpoint(path, digest, &self.params, &self.opt, &meta, &hist)
    }

    /// Restore into a freshly initialized parameter store (same configs and
    /// init seed as the saved run so names and shapes line up).
    pub fn load(path: &Path, digest: &[u8; 32], mut params: Params<T>, adam: AdamConfig) -> Result<Self> {
        let mut opt = AdamW::new(adam, params.len());
        let (meta, hist) = load_checkpoint(path, digest, &mut params, &mut opt)?;
        Ok(TrainState {
            params,
            opt,
            phase: meta.phase,
            iter: meta.iter,
            motion: meta.motion,
            rng: SeedRng::restore(&meta.rng),
            loss_hist: hist.into(),
            skipped: meta.skipped,
        })
    }
}

// ---- step records ----

#[derive(Clone, Debug)]
pub struct StepRecord {
    pub iter: u64,
    pub phase: TrainPhase,
    /// Mean composite loss over the batch.
    pub loss: f64,
    pub diffusion: f64,
    pub perceptual: f64,
    pub kl: f64,
    pub repa: f64,
    pub align: f64,
    /// Pixel timestep of every sample, in batch order.
    pub t_values: Vec<f64>,
    /// 1D rows kept for every sample, in batch order.
    pub keep_values: Vec<usize>,
    pub l_full: usize,
    pub grad_norm: f64,
    pub skipped: bool,
    pub wall_ms: f64,
}

impl StepRecord {
    pub fn t_mean(&self) -> f64 {
        self.t_values.iter().sum::<f64>() / self.t_values.len() as f64
    }

    pub fn t_full_frac(&self) -> f64 {
        self.t_values.iter().filter(|&&t| t == 1.0).count() as f64 / self.t_values.len() as f64
    }

    pub fn keep_mean(&self) -> f64 {
        self.keep_values.iter().sum::<usize>() as f64 / self.keep_values.len() as f64
    }

    pub fn keep_full_frac(&self) -> f64 {
        if self.l_full == 0 {
            return 1.0;
        }
        self.keep_values.iter().filter(|&&k| k == self.l_full).count() as f64
            / self.keep_values.len() as f64
    }

    pub fn csv_header() -> &'static str {
        "iter,phase,loss,diffusion,perceptual,kl,repa,align,\
         t_mean,t_full_frac,keep_mean,keep_full_frac,grad_norm,skipped,wall_ms"
    }

    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{:.9},{:.9},{:.9},{:.9},{:.9},{:.9},{:.6},{:.4},{:.2},{:.4},{:.6},{},{:.3}",
            self.iter,
            self.phase,
            self.loss,
            self.diffusion,
            self.perceptual,
            self.kl,
            self.repa,
            self.align,
            self.t_mean(),
            self.t_full_frac(),
            self.keep_mean(),
            self.keep_full_frac(),
            self.grad_norm,
            self.skipped as u8,
            self.wall_ms,
        )
    }
}

// ---- the step engine ----

/// Frozen latent generator used by decoder fine-tuning.
pub struct LdmBundle<'a, T: Real> {
    pub model: &'a LatentFlowModel,
    pub params: &'a Params<T>,
    pub norm: &'a LatentNormStats,
}

/// The stochastic decisions of one sample, in draw order.
pub fn sample_step_draws(
    policy: &PhasePolicy,
    s_hat: f64,
    l_full: usize,
    rng: &mut SeedRng,
) -> (f64, ConditionMode) {
    let t = sample_timestep(&policy.sampler, rng);
    let mode = if policy.always_full_condition {
        ConditionMode::Full
    } else {
        sample_condition_mode(s_hat, l_full, rng)
    };
    (t, mode)
}

struct SampleStats {
    loss: f64,
    diffusion: f64,
    perceptual: f64,
    kl: f64,
    repa: f64,
    align: f64,
    t_pixel: f64,
    keep: usize,
    l_full: usize,
}

fn normal_tensor<T: Real>(rng: &mut SeedRng, shape: Vec<usize>) -> Tensor<T> {
    let n: usize = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| T::from_f64(rng.normal())).collect())
}

#[allow(clippy::too_many_arguments)]
fn run_sample<T: Real>(
    model: &VaeModel<T>,
    ldm: Option<(&LdmBundle<'_, T>, usize)>,
    policy: &PhasePolicy,
    params: &Params<T>,
    clip: &VideoClip,
    motion: &mut MotionStats,
    rng: &mut SeedRng,
    inv_batch: f64,
    grads: Option<&mut GradStore<T>>,
    iter: u64,
) -> Result<SampleStats> {
    let enc_cfg = &model.encoder.cfg;
    let (padded, _) = model.encoder.pad_clip(clip)?;
    let dims = (padded.t(), padded.h(), padded.w());
    let orig = (clip.t(), clip.h(), clip.w());
    let geo = latent_geometry(orig.0, orig.1, orig.2, enc_cfg.p_t, enc_cfg.p_s);

    let s_raw = raw_motion_score(clip);
    if policy.update_motion {
        *motion = ema_update(motion, s_raw)?;
    }
    let s_hat = normalize_score(motion, s_raw);
    let (t_pixel, mode) = sample_step_draws(policy, s_hat, geo.l_full, rng);
    let keep = mode.keep_len(geo.l_full);

    let mut g = Graph::<T>::new();
    let px0 = padded.to_real::<T>();
    let px0_c = g.constant(px0.clone());
    let m = model.encoder.encode_moments(
        &mut g,
        params,
        px0_c,
        dims,
        orig,
        !policy.train_encoder,
    )?;

    let eps_s = {
        let sh = g.value(m.struct_mean).shape().to_vec();
        let e = normal_tensor::<T>(rng, sh);
        g.constant(e)
    };
    let z_s = reparameterize_in_graph(&mut g, m.struct_mean, m.struct_logvar, eps_s);
    let eps_q = {
        let sh = g.value(m.oned_mean).shape().to_vec();
        let e = normal_tensor::<T>(rng, sh);
        g.constant(e)
    };
    let z_q = reparameterize_in_graph(&mut g, m.oned_mean, m.oned_logvar, eps_q);

    let x1 = normal_tensor::<T>(rng, vec![dims.0 * dims.1 * dims.2, 3]);
    let x_t = interpolate(&px0, &x1, t_pixel)?;
    let x1_c = g.constant(x1);
    let xt_c = g.constant(x_t);

    // Condition content: encoder posterior sample, or the generator's
    // estimated clean latent in decoder fine-tuning.
    let (cond_s, cond_q) = if let Some((bundle, class)) = ldm {
        let c = enc_cfg.latent_dim;
        let z0 = HybridLatent {
            structural: g.value(z_s).clone().reshape(vec![1, geo.h, geo.w, c]),
            oned: g.value(z_q).clone(),
            valid_len: geo.l_full,
            meta: LatentMeta {
                t: orig.0 as u32,
                h: orig.1 as u32,
                w: orig.2 as u32,
                motion_score: s_hat as f32,
            },
        };
        let t_latent = rng.uniform();
        let noise = normal_tensor::<T>(rng, vec![bundle.model.cfg.n_struct() + keep, c]);
        let zhat = denoised_latent_estimate(
            bundle.model,
            bundle.params,
            bundle.norm,
            &z0,
            class,
            keep,
            t_latent,
            &noise,
        )?;
        (
            g.constant(zhat.structural_rows()),
            g.constant(zhat.oned.clone()),
        )
    } else {
        (z_s, z_q)
    };

    let cond = model
        .decoder
        .assemble_condition(&mut g, params, cond_s, cond_q, keep, (geo.h, geo.w), false)?;
    let out = model
        .decoder
        .predict_velocity(&mut g, params, xt_c, dims, t_pixel, &cond, false)?;

    let diff = diffusion_loss(&mut g, out.velocity, px0_c, x1_c)?;
    let x0_hat = clean_estimate(&mut g, xt_c, out.velocity, t_pixel);
    let perc = perceptual_loss(&mut g, x0_hat, px0_c, dims, &model.teacher)?;
    let kl = kl_loss_all(
        &mut g,
        &[
            (m.struct_mean, m.struct_logvar),
            (m.oned_mean, m.oned_logvar),
        ],
    );
    let targets = repa_teacher_targets(&mut g, &model.teacher, px0_c, dims, out.noisy_grid)?;
    let repa = repa_loss(
        &mut g,
        params,
        out.repa_features,
        targets,
        &model.repa_proj,
        false,
    )?;
    let align = if policy.weights.l_align != 0.0 {
        Some(self_align_loss(&mut g, z_q, z_s)?)
    } else {
        None
    };

    let parts = LossParts {
        diffusion: diff,
        perceptual: perc,
        kl,
        repa,
        align,
    };
    let composite = composite_loss(&mut g, &parts, &policy.weights);
    let loss = g.value(composite).item().to_f64();
    if !loss.is_finite() {
        return Err(CoreError::NonFiniteLoss {
            iter,
            detail: format!("batch sample loss = {loss}"),
        });
    }
    if let Some(gs) = grads {
        let scaled = g.scale(composite, T::from_f64(inv_batch));
        let grd = g.backward(scaled);
        gs.add_from_graph(&g, &grd);
    }
    Ok(SampleStats {
        loss,
        diffusion: g.value(diff).item().to_f64(),
        perceptual: g.value(perc).item().to_f64(),
        kl: g.value(kl).item().to_f64(),
        repa: g.value(repa).item().to_f64(),
        align: align.map_or(0.0, |a| g.value(a).item().to_f64()),
        t_pixel,
        keep,
        l_full: geo.l_full,
    })
}

fn trailing_median(hist: &VecDeque<f64>) -> Option<f64> {
    if hist.is_empty() {
        return None;
    }
    let mut v: Vec<f64> = hist.iter().copied().collect();
    v.sort_by(|a, b| a.partial_cmp(b).expect("finite history"));
    let n = v.len();
    Some(if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    })
}

fn trainable_mask<T: Real>(params: &Params<T>, policy: &PhasePolicy) -> Vec<bool> {
    (0..params.len())
        .map(|i| {
            let name = params.name(crate::nn::ParamId(i));
            if name.starts_with("enc.") {
                policy.train_encoder
            } else {
                true
            }
        })
        .collect()
}

/// One optimization step under an explicit policy. `ldm` must be `Some` with
/// one class label per batch clip when the policy conditions on the
/// generator, and is ignored otherwise.
pub fn train_step_with_policy<T: Real>(
    model: &VaeModel<T>,
    ldm: Option<(&LdmBundle<'_, T>, &[usize])>,
    policy: &PhasePolicy,
    state: &mut TrainState<T>,
    batch: &[VideoClip],
) -> Result<StepRecord> {
    if batch.is_empty() {
        return Err(CoreError::InvalidArgument("empty batch".into()));
    }
    if policy.condition_from_generator {
        match ldm {
            None => {
                return Err(CoreError::InvalidArgument(
                    "decoder fine-tuning requires a latent generator".into(),
                ))
            }
            Some((_, classes)) if classes.len() != batch.len() => {
                return Err(CoreError::InvalidArgument(format!(
                    "{} class labels for {} clips",
                    classes.len(),
                    batch.len()
                )));
            }
            _ => {}
        }
    }
    let start = Instant::now();
    state.iter += 1;
    let iter = state.iter;
    let inv_batch = 1.0 / batch.len() as f64;
    let mut grads = GradStore::new(state.params.len());
    let mut sums = [0.0f64; 6];
    let mut t_values = Vec::with_capacity(batch.len());
    let mut keep_values = Vec::with_capacity(batch.len());
    let mut l_full = 0;
    {
        let params = &state.params;
        let motion = &mut state.motion;
        let rng = &mut state.rng;
        for (i, clip) in batch.iter().enumerate() {
            let per_clip = if policy.condition_from_generator {
                ldm.map(|(b, classes)| (b, classes[i]))
            } else {
                None
            };
            let s = run_sample(
                model,
                per_clip,
                policy,
                params,
                clip,
                motion,
                rng,
                inv_batch,
                Some(&mut grads),
                iter,
            )?;
            sums[0] += s.loss;
            sums[1] += s.diffusion;
            sums[2] += s.perceptual;
            sums[3] += s.kl;
            sums[4] += s.repa;
            sums[5] += s.align;
            t_values.push(s.t_pixel);
            keep_values.push(s.keep);
            l_full = l_full.max(s.l_full);
        }
    }
    if !grads.all_finite() {
        return Err(CoreError::NonFiniteLoss {
            iter,
            detail: "non-finite gradient".into(),
        });
    }
    let n = batch.len() as f64;
    let loss = sums[0] / n;
    let spike = trailing_median(&state.loss_hist).is_some_and(|med| loss > SPIKE_FACTOR * med);
    let grad_norm;
    if spike {
        grad_norm = grads.global_norm();
        state.skipped += 1;
    } else {
        grad_norm = grads.clip_global_norm(GRAD_CLIP);
        let mask = trainable_mask(&state.params, policy);
        state.opt.step(&mut state.params, &grads, Some(&mask));
        state.loss_hist.push_back(loss);
        while state.loss_hist.len() > SPIKE_WINDOW {
            state.loss_hist.pop_front();
        }
    }
    Ok(StepRecord {
        iter,
        phase: policy.phase,
        loss,
        diffusion: sums[1] / n,
        perceptual: sums[2] / n,
        kl: sums[3] / n,
        repa: sums[4] / n,
        align: sums[5] / n,
        t_values,
        keep_values,
        l_full,
        grad_norm,
        skipped: spike,
        wall_ms: start.elapsed().as_secs_f64() * 1e3,
    })
}

fn expect_phase<T: Real>(state: &TrainState<T>, want: TrainPhase) -> Result<()> {
    if state.phase != want {
        return Err(CoreError::InvalidArgument(format!(
            "state is in phase {}, expected {want}",
            state.phase
        )));
    }
    Ok(())
}

/// Deterministic pretraining: t ≡ 1 (pure noise in), full condition, all
/// parameters trained.
pub fn stage1_step<T: Real>(
    model: &VaeModel<T>,
    state: &mut TrainState<T>,
    batch: &[VideoClip],
) -> Result<StepRecord> {
    expect_phase(state, TrainPhase::Stage1)?;
    train_step_with_policy(model, None, &phase_policy(TrainPhase::Stage1), state, batch)
}

/// Stochastic post-training: thick-tailed timesteps and variable-length
/// condition dropout; motion statistics track each clip's raw score.
pub fn stage2_step<T: Real>(
    model: &VaeModel<T>,
    state: &mut TrainState<T>,
    batch: &[VideoClip],
) -> Result<StepRecord> {
    expect_phase(state, TrainPhase::Stage2)?;
    train_step_with_policy(model, None, &phase_policy(TrainPhase::Stage2), state, batch)
}

/// Stage-2 behavior plus the latent self-alignment term and a raised KL
/// weight.
pub fn align_finetune_step<T: Real>(
    model: &VaeModel<T>,
    state: &mut TrainState<T>,
    batch: &[VideoClip],
    opts: AlignOptions,
) -> Result<StepRecord> {
    expect_phase(state, TrainPhase::AlignFinetune)?;
    let mut policy = phase_policy(TrainPhase::AlignFinetune);
    policy.weights.l_align = opts.l_align;
    policy.weights.l3 = opts.kl_weight;
    train_step_with_policy(model, None, &policy, state, batch)
}

/// Frozen-encoder decoder training on the generator's estimated clean
/// latents; `classes` carries one generator label per clip.
pub fn decoder_finetune_step<T: Real>(
    model: &VaeModel<T>,
    ldm: &LdmBundle<'_, T>,
    classes: &[usize],
    state: &mut TrainState<T>,
    batch: &[VideoClip],
) -> Result<StepRecord> {
    expect_phase(state, TrainPhase::DecoderFinetune)?;
    train_step_with_policy(
        model,
        Some((ldm, classes)),
        &phase_policy(TrainPhase::DecoderFinetune),
        state,
        batch,
    )
}

/// Forward-only composite loss over a batch, consuming the generator in the
/// same draw order as a training step. Motion statistics are advanced on a
/// local copy.
pub fn eval_batch<T: Real>(
    model: &VaeModel<T>,
    policy: &PhasePolicy,
    params: &Params<T>,
    batch: &[VideoClip],
    motion: &MotionStats,
    rng: &mut SeedRng,
) -> Result<f64> {
    if batch.is_empty() {
        return Err(CoreError::InvalidArgument("empty batch".into()));
    }
    let mut m = *motion;
    let mut total = 0.0;
    for clip in batch {
        let s = run_sample(
            model,
            None,
            policy,
            params,
            clip,
            &mut m,
            rng,
            1.0 / batch.len() as f64,
            None,
            0,
        )?;
        total += s.loss;
    }
    Ok(total / batch.len() as f64)
}

// ---- checkpointing ----

#[derive(Clone, Copy, Debug)]
pub struct CheckpointMeta {
    pub phase: TrainPhase,
    pub iter: u64,
    pub adam_step: u64,
    pub skipped: u64,
    pub motion: MotionStats,
    pub rng: RngState,
}

fn push_u32(out: &mut Vec<u8>, x: u32) {
    out.extend_from_slice(&x.to_le_bytes());
}

fn push_u64(out: &mut Vec<u8>, x: u64) {
    out.extend_from_slice(&x.to_le_bytes());
}

fn push_f64(out: &mut Vec<u8>, x: f64) {
    out.extend_from_slice(&x.to_le_bytes());
}

fn push_blob<T: Real>(out: &mut Vec<u8>, name: &str, value: &Tensor<T>) {
    push_u32(out, name.len() as u32);
    out.extend_from_slice(name.as_bytes());
    out.push(std::mem::size_of::<T>() as u8);
    push_u32(out, value.shape().len() as u32);
    for &d in value.shape() {
        push_u32(out, d as u32);
    }
    if std::mem::size_of::<T>() == 4 {
        for v in value.data() {
            out.extend_from_slice(&(v.to_f64() as f32).to_le_bytes());
        }
    } else {
        for v in value.data() {
            out.extend_from_slice(&v.to_f64().to_le_bytes());
        }
    }
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(CoreError::CheckpointFormat(format!(
                "truncated at byte {} (wanted {n} more)",
                self.pos
            )));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

pub fn save_checkpoint<T: Real>(
    path: &Path,
    digest: &[u8; 32],
    params: &Params<T>,
    opt: &AdamW<T>,
    meta: &CheckpointMeta,
    loss_hist: &[f64],
) -> Result<()> {
    let mut out = Vec::new();
    out.extend_from_slice(&CHECKPOINT_MAGIC);
    push_u32(&mut out, CHECKPOINT_VERSION);
    out.extend_from_slice(digest);
    push_u32(&mut out, meta.phase.as_u32());
    push_u64(&mut out, meta.iter);
    push_u64(&mut out, meta.adam_step);
    push_u64(&mut out, meta.skipped);
    push_f64(&mut out, meta.motion.mu);
    push_f64(&mut out, meta.motion.m2);
    push_f64(&mut out, meta.motion.decay);
    push_u64(&mut out, meta.motion.count);
    out.extend_from_slice(&meta.rng.seed);
    push_u64(&mut out, meta.rng.stream);
    out.extend_from_slice(&meta.rng.word_pos.to_le_bytes());
    push_u32(&mut out, loss_hist.len() as u32);
    for &v in loss_hist {
        push_f64(&mut out, v);
    }

    let moments = opt.moment_blobs(params);
    push_u32(&mut out, (params.len() + moments.len()) as u32);
    for (_, entry) in params.iter() {
        push_blob(&mut out, &entry.name, &entry.value);
    }
    for (name, value) in &moments {
        push_blob(&mut out, name, value);
    }

    let tmp = path.with_extension("tmp");
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(&out)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

fn read_blob<T: Real>(cur: &mut Cursor<'_>) -> Result<(String, Tensor<T>)> {
    let name_len = cur.u32()? as usize;
    if name_len > 4096 {
        return Err(CoreError::CheckpointFormat(format!(
            "blob name length {name_len} out of range"
        )));
    }
    let name = String::from_utf8(cur.take(name_len)?.to_vec())
        .map_err(|_| CoreError::CheckpointFormat("blob name is not UTF-8".into()))?;
    let dtype = cur.take(1)?[0] as usize;
    if dtype != std::mem::size_of::<T>() {
        return Err(CoreError::CheckpointFormat(format!(
            "blob {name}: dtype width {dtype} vs runtime {}",
            std::mem::size_of::<T>()
        )));
    }
    let ndim = cur.u32()? as usize;
    if ndim > 8 {
        return Err(CoreError::CheckpointFormat(format!(
            "blob {name}: {ndim} dimensions"
        )));
    }
    let mut shape = Vec::with_capacity(ndim);
    let mut numel = 1usize;
    for _ in 0..ndim {
        let d = cur.u32()? as usize;
        numel = numel.saturating_mul(d);
        shape.push(d);
    }
    if numel > (1 << 31) {
        return Err(CoreError::CheckpointFormat(format!(
            "blob {name}: implausible element count {numel}"
        )));
    }
    let raw = cur.take(numel * dtype)?;
    let data: Vec<T> = if dtype == 4 {
        raw.chunks_exact(4)
            .map(|c| T::from_f64(f32::from_le_bytes(c.try_into().unwrap()) as f64))
            .collect()
    } else {
        raw.chunks_exact(8)
            .map(|c| T::from_f64(f64::from_le_bytes(c.try_into().unwrap())))
            .collect()
    };
    Ok((name, Tensor::new(shape, data)))
}

pub fn load_checkpoint<T: Real>(
    path: &Path,
    digest: &[u8; 32],
    params: &mut Params<T>,
    opt: &mut AdamW<T>,
) -> Result<(CheckpointMeta, Vec<f64>)> {
    let buf = fs::read(path)?;
    let mut cur = Cursor { buf: &buf, pos: 0 };
    let magic = cur.take(4)?;
    if magic != CHECKPOINT_MAGIC {
        return Err(CoreError::BadMagic {
            expected: CHECKPOINT_MAGIC,
            found: magic.try_into().unwrap(),
        });
    }
    let version = cur.u32()?;
    if version != CHECKPOINT_VERSION {
        return Err(CoreError::VersionMismatch {
            expected: CHECKPOINT_VERSION,
            found: version,
        });
    }
    let stored_digest = cur.take(32)?;
    if stored_digest != digest {
        return Err(CoreError::ConfigDigestMismatch);
    }
    let phase = TrainPhase::from_u32(cur.u32()?)?;
    let iter = cur.u64()?;
    let adam_step = cur.u64()?;
    let skipped = cur.u64()?;
    let motion = MotionStats {
        mu: cur.f64()?,
        m2: cur.f64()?,
        decay: cur.f64()?,
        count: cur.u64()?,
    };
    let rng = RngState {
        seed: cur.take(32)?.try_into().unwrap(),
        stream: cur.u64()?,
        word_pos: u128::from_le_bytes(cur.take(16)?.try_into().unwrap()),
    };
    let hist_len = cur.u32()? as usize;
    if hist_len > 1_000_000 {
        return Err(CoreError::CheckpointFormat(format!(
            "implausible loss history length {hist_len}"
        )));
    }
    let mut hist = Vec::with_capacity(hist_len);
    for _ in 0..hist_len {
        hist.push(cur.f64()?);
    }

    let n_blobs = cur.u32()? as usize;
    let mut seen = vec![false; params.len()];
    for _ in 0..n_blobs {
        let (name, value) = read_blob::<T>(&mut cur)?;
        if name.starts_with("adam.") {
            if !opt.restore_moment(params, &name, value) {
                return Err(CoreError::CheckpointFormat(format!(
                    "optimizer blob {name} matches no parameter"
                )));
            }
        } else if let Some(id) = params.id_of(&name) {
            if params.get(id).shape() != value.shape() {
                return Err(CoreError::CheckpointFormat(format!(
                    "blob {name}: shape {:?} vs initialized {:?}",
                    value.shape(),
                    params.get(id).shape()
                )));
            }
            seen[id.0] = true;
            params.set(id, value);
        } else {
            return Err(CoreError::CheckpointFormat(format!(
                "unknown parameter blob {name}"
            )));
        }
    }
    if cur.pos != buf.len() {
        return Err(CoreError::CheckpointFormat(format!(
            "{} trailing bytes",
            buf.len() - cur.pos
        )));
    }
    if let Some(missing) = seen.iter().position(|&s| !s) {
        return Err(CoreError::CheckpointFormat(format!(
            "parameter {} missing from checkpoint",
            params.name(crate::nn::ParamId(missing))
        )));
    }
    opt.restore_step_count(adam_step);
    Ok((
        CheckpointMeta {
            phase,
            iter,
            adam_step,
            skipped,
            motion,
            rng,
        },
        hist,
    ))
}
