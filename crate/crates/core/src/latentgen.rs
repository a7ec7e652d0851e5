//! Class-conditional flow-matching transformer over hybrid-latent space.
//! Supplies sampled latents for generation metrics and for decoder
//! fine-tuning on predicted rather than encoded latents.

use crate::encoder::{HybridLatent, LatentMeta};
use crate::error::{CoreError, Result};
use crate::flow::{interpolate, sample_loop, uniform_schedule};
use crate::graph::{Graph, Var};
use crate::metrics::latent_channel_stats;
use crate::nn::{
    self, AdamW, GradStore, Init, LayerNorm, Linear, ModulatedBlock, ParamId, Params,
};
use crate::rng::SeedRng;
use crate::tensor::{Real, Tensor};

/// Floor applied to per-channel std so normalization never divides by zero.
pub const NORM_STD_FLOOR: f64 = 1e-6;
/// Gradient clipping threshold shared with the autoencoder trainer.
const GRAD_CLIP: f64 = 1.0;

/// Per-channel normalization statistics, fitted separately for structural
/// and 1D latent populations (valid rows only).
#[derive(Clone, Debug, PartialEq)]
pub struct LatentNormStats {
    pub struct_mean: Vec<f64>,
    pub struct_std: Vec<f64>,
    pub oned_mean: Vec<f64>,
    pub oned_std: Vec<f64>,
}

pub fn compute_latent_norm<T: Real>(latents: &[HybridLatent<T>]) -> Result<LatentNormStats> {
    let st = latent_channel_stats(latents)?;
    let floor = |v: Vec<f64>| -> Vec<f64> { v.into_iter().map(|s| s.max(NORM_STD_FLOOR)).collect() };
    Ok(LatentNormStats {
        struct_mean: st.struct_mean,
        struct_std: floor(st.struct_std),
        oned_mean: st.oned_mean,
        oned_std: floor(st.oned_std),
    })
}

impl LatentNormStats {
    pub fn channels(&self) -> usize {
        self.struct_mean.len()
    }

    /// (x − μ)/σ per channel on the structural grid and the valid 1D rows;
    /// invalid rows are zeroed.
    pub fn normalize<T: Real>(&self, latent: &HybridLatent<T>) -> HybridLatent<T> {
        let c = latent.channels();
        assert_eq!(c, self.channels(), "channel count mismatch");
        let mut out = latent.clone();
        {
            let buf = out.structural.make_mut();
            for (i, v) in buf.iter_mut().enumerate() {
                let ch = i % c;
                *v = T::from_f64((v.to_f64() - self.struct_mean[ch]) / self.struct_std[ch]);
            }
        }
        {
            let valid = out.valid_len * c;
            let buf = out.oned.make_mut();
            for (i, v) in buf.iter_mut().enumerate() {
                if i < valid {
                    let ch = i % c;
                    *v = T::from_f64((v.to_f64() - self.oned_mean[ch]) / self.oned_std[ch]);
                } else {
                    *v = T::ZERO;
                }
            }
        }
        out
    }

    /// Exact inverse of `normalize` on the valid region.
    pub fn denormalize<T: Real>(&self, latent: &HybridLatent<T>) -> HybridLatent<T> {
        let c = latent.channels();
        assert_eq!(c, self.channels(), "channel count mismatch");
        let mut out = latent.clone();
        {
            let buf = out.structural.make_mut();
            for (i, v) in buf.iter_mut().enumerate() {
                let ch = i % c;
                *v = T::from_f64(v.to_f64() * self.struct_std[ch] + self.struct_mean[ch]);
            }
        }
        {
            let valid = out.valid_len * c;
            let buf = out.oned.make_mut();
            for (i, v) in buf.iter_mut().enumerate().take(valid) {
                let ch = i % c;
                *v = T::from_f64(v.to_f64() * self.oned_std[ch] + self.oned_mean[ch]);
            }
        }
        out
    }
}

/// Appendix-style clean-latent estimate ẑ0 = z_t − t·v̄.
pub fn predict_clean_latent<T: Real>(z_t: &Tensor<T>, t: f64, v_bar: &Tensor<T>) -> Tensor<T> {
    assert_eq!(z_t.shape(), v_bar.shape(), "clean-latent shapes");
    let tt = T::from_f64(t);
    z_t.zip_map(v_bar, |z, v| z - tt * v)
}

/// Bucket a motion level in [0,1] into one of `n_classes` labels.
pub fn class_for_motion_level(motion_level: f64, n_classes: usize) -> usize {
    assert!(n_classes >= 1);
    ((motion_level.clamp(0.0, 1.0) * n_classes as f64) as usize).min(n_classes - 1)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct LdmConfig {
    pub hidden_dim: usize,
    pub n_blocks: usize,
    pub n_heads: usize,
    pub n_classes: usize,
    pub latent_dim: usize,
    /// Structural grid of the latents this model is trained on.
    pub grid_h: usize,
    pub grid_w: usize,
    pub l_full: usize,
    /// Original video dims the latents decode to (stored in sampled metas).
    pub video_t: u32,
    pub video_h: u32,
    pub video_w: u32,
    /// Restrict training and sampling to structural slots only.
    pub structural_only: bool,
}

impl LdmConfig {
    pub fn desk() -> Self {
        LdmConfig {
            hidden_dim: 128,
            n_blocks: 4,
            n_heads: 4,
            n_classes: 4,
            latent_dim: 16,
            grid_h: 8,
            grid_w: 8,
            l_full: 128,
            video_t: 9,
            video_h: 64,
            video_w: 64,
            structural_only: false,
        }
    }

    pub fn tiny() -> Self {
        LdmConfig {
            hidden_dim: 24,
            n_blocks: 2,
            n_heads: 2,
            n_classes: 2,
            latent_dim: 4,
            grid_h: 2,
            grid_w: 2,
            l_full: 4,
            video_t: 4,
            video_h: 8,
            video_w: 8,
            structural_only: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.hidden_dim == 0
            || self.n_blocks == 0
            || self.n_heads == 0
            || self.n_classes == 0
            || self.latent_dim == 0
            || self.grid_h == 0
            || self.grid_w == 0
        {
            return Err(CoreError::InvalidArgument(
                "latent flow config fields must be positive".into(),
            ));
        }
        if self.hidden_dim % self.n_heads != 0 {
            return Err(CoreError::InvalidArgument(
                "hidden_dim must divide by n_heads".into(),
            ));
        }
        Ok(())
    }

    pub fn n_struct(&self) -> usize {
        self.grid_h * self.grid_w
    }

    pub fn n_slots(&self) -> usize {
        self.n_struct() + self.l_full
    }
}

/// Velocity transformer over latent slots with a class token and timestep
/// modulation.
pub struct LatentFlowModel {
    pub cfg: LdmConfig,
    class_embed: ParamId,
    struct_lift: Linear,
    oned_lift: Linear,
    pos: ParamId,
    t_mlp1: Linear,
    t_mlp2: Linear,
    blocks: Vec<ModulatedBlock>,
    final_norm: LayerNorm,
    final_mod: Linear,
    head: Linear,
}

impl LatentFlowModel {
    pub fn init<T: Real>(params: &mut Params<T>, cfg: LdmConfig, rng: &mut SeedRng) -> Result<Self> {
        cfg.validate()?;
        let d = cfg.hidden_dim;
        let c = cfg.latent_dim;
        let class_embed = params.add(
            "ldm.class",
            nn::normal_init::<T>(vec![cfg.n_classes, d], 0.02, rng),
        );
        let struct_lift = Linear::init(params, "ldm.lift_s", c, d, true, Init::Lecun, rng);
        let oned_lift = Linear::init(params, "ldm.lift_q", c, d, true, Init::Lecun, rng);
        let pos = params.add(
            "ldm.pos",
            nn::normal_init::<T>(vec![1 + cfg.n_slots(), d], 0.02, rng),
        );
        let t_mlp1 = Linear::init(params, "ldm.t1", d, d, true, Init::Lecun, rng);
        let t_mlp2 = Linear::init(params, "ldm.t2", d, d, true, Init::Lecun, rng);
        let blocks = (0..cfg.n_blocks)
            .map(|i| ModulatedBlock::init(params, &format!("ldm.b{i}"), d, cfg.n_heads, rng))
            .collect();
        let final_norm = LayerNorm::init(params, "ldm.fnorm", d);
        let final_mod = Linear::init(params, "ldm.fmod", d, 2 * d, true, Init::Zero, rng);
        let head = Linear::init(params, "ldm.head", d, c, true, Init::Zero, rng);
        Ok(LatentFlowModel {
            cfg,
            class_embed,
            struct_lift,
            oned_lift,
            pos,
            t_mlp1,
            t_mlp2,
            blocks,
            final_norm,
            final_mod,
            head,
        })
    }

    /// Velocity for a (possibly truncated) latent state. `z_t` holds the
    /// structural slots followed by the first `keep` 1D slots.
    pub fn predict_velocity<T: Real>(
        &self,
        g: &mut Graph<T>,
        params: &Params<T>,
        z_t: Var,
        t: f64,
        class: usize,
        frozen: bool,
    ) -> Result<Var> {
        let cfg = &self.cfg;
        if class >= cfg.n_classes {
            return Err(CoreError::InvalidArgument(format!(
                "class {class} out of range 0..{}",
                cfg.n_classes
            )));
        }
        let n_z = g.value(z_t).rows();
        let s = cfg.n_struct();
        if n_z < s || n_z > cfg.n_slots() || g.value(z_t).cols() != cfg.latent_dim {
            return Err(CoreError::ShapeMismatch(format!(
                "latent state [{n_z}, {}] incompatible with {s}+0..{} slots of width {}",
                g.value(z_t).cols(),
                cfg.l_full,
                cfg.latent_dim
            )));
        }
        if !(0.0..=1.0).contains(&t) {
            return Err(CoreError::InvalidArgument(format!("t={t} outside [0,1]")));
        }
        let d = cfg.hidden_dim;
        let bind = |g: &mut Graph<T>, id: ParamId| {
            if frozen {
                params.bind_frozen(g, id)
            } else {
                params.bind(g, id)
            }
        };

        let ce = bind(g, self.class_embed);
        let cls = g.index_rows(ce, std::sync::Arc::new(vec![class]));
        let s_rows = g.slice_rows(z_t, 0, s);
        let s_tok = self.struct_lift.apply(g, params, s_rows, frozen);
        let toks = if n_z > s {
            let q_rows = g.slice_rows(z_t, s, n_z);
            let q_tok = self.oned_lift.apply(g, params, q_rows, frozen);
            let st = g.concat_rows(s_tok, q_tok);
            g.concat_rows(cls, st)
        } else {
            g.concat_rows(cls, s_tok)
        };
        let pos_all = bind(g, self.pos);
        let pos = g.slice_rows(pos_all, 0, 1 + n_z);
        let mut x = g.add(toks, pos);

        let temb0 = g.constant(nn::timestep_embedding::<T>(t, d));
        let temb = self.t_mlp1.apply(g, params, temb0, frozen);
        let temb = g.silu(temb);
        let temb = self.t_mlp2.apply(g, params, temb, frozen);

        for b in &self.blocks {
            x = b.apply(g, params, x, temb, 1, frozen);
        }
        let out = g.slice_rows(x, 1, 1 + n_z);
        let normed = self.final_norm.apply(g, params, out, frozen);
        let mact = g.silu(temb);
        let mods = self.final_mod.apply(g, params, mact, frozen);
        let mods = mods.reshaped(g, vec![2, d]);
        let shift = g.slice_rows(mods, 0, 1);
        let scale = g.slice_rows(mods, 1, 2);
        let scale1 = g.add_const(scale, T::ONE);
        let modded = g.mul_row(normed, scale1);
        let modded = g.add_row(modded, shift);
        Ok(self.head.apply(g, params, modded, frozen))
    }
}

/// Stack a normalized latent into the [S + valid, C] training state plus the
/// row mask covering structural and valid 1D slots of the *full* state.
fn flatten_normalized<T: Real>(latent: &HybridLatent<T>, cfg: &LdmConfig) -> (Tensor<T>, Vec<T>) {
    let c = cfg.latent_dim;
    let s = cfg.n_struct();
    let n = cfg.n_slots();
    let mut data = Vec::with_capacity(n * c);
    data.extend_from_slice(latent.structural_rows().data());
    data.extend_from_slice(latent.oned.data());
    let mut mask = vec![T::ZERO; n];
    let keep = if cfg.structural_only { 0 } else { latent.valid_len };
    for (i, m) in mask.iter_mut().enumerate() {
        if i < s || i < s + keep {
            *m = T::ONE;
        }
    }
    (Tensor::new(vec![n, c], data), mask)
}

/// Masked flow-matching MSE over latent slots: rows outside the mask
/// contribute nothing.
pub fn masked_latent_mse<T: Real>(
    g: &mut Graph<T>,
    pred_v: Var,
    target_v: Var,
    mask: &[T],
) -> Var {
    let rows = g.value(pred_v).rows();
    let cols = g.value(pred_v).cols();
    assert_eq!(rows, mask.len(), "mask length");
    let diff = g.sub(pred_v, target_v);
    let sq = g.square(diff);
    let mv = g.constant(Tensor::new(vec![rows, 1], mask.to_vec()));
    let masked = g.mul_col(sq, mv);
    let total = g.sum_all(masked);
    let n_kept: f64 = mask.iter().map(|m| m.to_f64()).sum::<f64>() * cols as f64;
    g.scale(total, T::from_f64(1.0 / n_kept.max(1.0)))
}

/// One optimizer step of latent flow matching on a batch of (latent, class)
/// pairs. Latents are normalized inside; timesteps are uniform. Returns the
/// mean loss.
pub fn ldm_train_step<T: Real>(
    model: &LatentFlowModel,
    params: &mut Params<T>,
    opt: &mut AdamW<T>,
    norm: &LatentNormStats,
    batch: &[(HybridLatent<T>, usize)],
    rng: &mut SeedRng,
) -> Result<f64> {
    if batch.is_empty() {
        return Err(CoreError::InvalidArgument("empty LDM batch".into()));
    }
    let cfg = &model.cfg;
    let mut store = GradStore::new(params.len());
    let mut loss_sum = 0.0;
    let inv_b = 1.0 / batch.len() as f64;
    for (latent, class) in batch {
        if *class >= cfg.n_classes {
            return Err(CoreError::InvalidArgument(format!(
                "class {class} out of range 0..{}",
                cfg.n_classes
            )));
        }
        let normed = norm.normalize(latent);
        let (z0, mask) = flatten_normalized(&normed, cfg);
        let n = cfg.n_slots();
        let c = cfg.latent_dim;
        let noise: Vec<T> = (0..n * c).map(|_| T::from_f64(rng.normal())).collect();
        let z1 = Tensor::new(vec![n, c], noise);
        let t = rng.uniform();

        let mut g = Graph::<T>::new();
        let z0v = g.constant(z0);
        let z1v = g.constant(z1);
        let tt = T::from_f64(t);
        let a = g.scale(z0v, T::ONE - tt);
        let b = g.scale(z1v, tt);
        let z_t = g.add(a, b);
        let target = g.sub(z1v, z0v);
        let pred = model.predict_velocity(&mut g, params, z_t, t, *class, false)?;
        let loss = masked_latent_mse(&mut g, pred, target, &mask);
        let scaled = g.scale(loss, T::from_f64(inv_b));
        let lv = g.value(loss).item().to_f64();
        if !lv.is_finite() {
            return Err(CoreError::NonFiniteLoss {
                iter: opt.step_count(),
                detail: format!("latent flow loss {lv}"),
            });
        }
        loss_sum += lv * inv_b;
        let grads = g.backward(scaled);
        store.add_from_graph(&g, &grads);
    }
    store.clip_global_norm(GRAD_CLIP);
    opt.step(params, &store, None);
    Ok(loss_sum)
}

/// Euler-sample a latent of `length_budget` 1D slots for a class, then
/// denormalize. Slots beyond the budget are zero and marked invalid.
pub fn ldm_sample<T: Real>(
    model: &LatentFlowModel,
    params: &Params<T>,
    norm: &LatentNormStats,
    class: usize,
    length_budget: usize,
    steps: usize,
    rng: &mut SeedRng,
) -> Result<HybridLatent<T>> {
    let cfg = &model.cfg;
    if length_budget > cfg.l_full {
        return Err(CoreError::InvalidArgument(format!(
            "length budget {length_budget} exceeds L_full {}",
            cfg.l_full
        )));
    }
    let budget = if cfg.structural_only { 0 } else { length_budget };
    let s = cfg.n_struct();
    let c = cfg.latent_dim;
    let n = s + budget;
    let init: Vec<T> = (0..n * c).map(|_| T::from_f64(rng.normal())).collect();
    let x_init = Tensor::new(vec![n, c], init);
    let schedule = uniform_schedule(steps);
    let z0 = sample_loop(
        |x, t| {
            let mut g = Graph::<T>::new();
            let xv = g.constant(x.clone());
            let v = model.predict_velocity(&mut g, params, xv, t, class, true)?;
            Ok(g.value(v).clone())
        },
        x_init,
        &schedule,
    )?;

    let mut oned = vec![T::ZERO; cfg.l_full * c];
    oned[..budget * c].copy_from_slice(&z0.data()[s * c..]);
    let normalized = HybridLatent {
        structural: Tensor::new(
            vec![1, cfg.grid_h, cfg.grid_w, c],
            z0.data()[..s * c].to_vec(),
        ),
        oned: Tensor::new(vec![cfg.l_full, c], oned),
        valid_len: budget,
        meta: LatentMeta {
            t: cfg.video_t,
            h: cfg.video_h,
            w: cfg.video_w,
            motion_score: if cfg.l_full == 0 {
                0.0
            } else {
                budget as f32 / cfg.l_full as f32
            },
        },
    };
    Ok(norm.denormalize(&normalized))
}

/// Decoder-fine-tuning latent path: normalize `z0`, keep the first `keep` 1D
/// slots, diffuse them to time `t` with the caller-drawn standard-normal
/// `noise` ([n_struct + keep, C]), run the frozen generator once, and return
/// the denormalized estimated clean latent with valid_len = keep.
#[allow(clippy::too_many_arguments)]
pub fn denoised_latent_estimate<T: Real>(
    model: &LatentFlowModel,
    params: &Params<T>,
    norm: &LatentNormStats,
    z0: &HybridLatent<T>,
    class: usize,
    keep: usize,
    t: f64,
    noise: &Tensor<T>,
) -> Result<HybridLatent<T>> {
    let cfg = &model.cfg;
    if keep > cfg.l_full {
        return Err(CoreError::InvalidArgument(format!(
            "keep {keep} exceeds L_full {}",
            cfg.l_full
        )));
    }
    if !(0.0..=1.0).contains(&t) {
        return Err(CoreError::InvalidArgument(format!(
            "latent timestep {t} outside [0, 1]"
        )));
    }
    let s = cfg.n_struct();
    let c = cfg.latent_dim;
    if z0.grid_h() != cfg.grid_h
        || z0.grid_w() != cfg.grid_w
        || z0.l_full() != cfg.l_full
        || z0.channels() != c
    {
        return Err(CoreError::GeometryInconsistency(format!(
            "latent {}x{} L={} C={} vs generator config {}x{} L={} C={}",
            z0.grid_h(),
            z0.grid_w(),
            z0.l_full(),
            z0.channels(),
            cfg.grid_h,
            cfg.grid_w,
            cfg.l_full,
            c
        )));
    }
    let n = s + keep;
    if noise.shape() != [n, c] {
        return Err(CoreError::ShapeMismatch(format!(
            "noise shape {:?}, expected [{n}, {c}]",
            noise.shape()
        )));
    }
    let zn = norm.normalize(z0);
    let mut rows = Vec::with_capacity(n * c);
    rows.extend_from_slice(zn.structural.data());
    rows.extend_from_slice(&zn.oned.data()[..keep * c]);
    let z_rows = Tensor::new(vec![n, c], rows);
    let z_t = interpolate(&z_rows, noise, t)?;

    let mut g = Graph::<T>::new();
    let zv = g.constant(z_t.clone());
    let v = model.predict_velocity(&mut g, params, zv, t, class, true)?;
    let zhat = predict_clean_latent(&z_t, t, g.value(v));

    let mut oned = vec![T::ZERO; cfg.l_full * c];
    oned[..keep * c].copy_from_slice(&zhat.data()[s * c..]);
    let est = HybridLatent {
        structural: Tensor::new(
            vec![1, cfg.grid_h, cfg.grid_w, c],
            zhat.data()[..s * c].to_vec(),
        ),
        oned: Tensor::new(vec![cfg.l_full, c], oned),
        valid_len: keep,
        meta: z0.meta,
    };
    Ok(norm.denormalize(&est))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::AdamConfig;

    fn toy_latent(seed: u64, valid_len: usize, cfg: &LdmConfig) -> HybridLatent<f64> {
        let mut rng = SeedRng::from_seed(seed);
        let c = cfg.latent_dim;
        let s = cfg.n_struct();
        HybridLatent {
            structural: Tensor::new(
                vec![1, cfg.grid_h, cfg.grid_w, c],
                (0..s * c).map(|_| rng.normal()).collect(),
            ),
            oned: Tensor::new(
                vec![cfg.l_full, c],
                (0..cfg.l_full * c).map(|_| rng.normal()).collect(),
            ),
            valid_len,
            meta: LatentMeta {
                t: cfg.video_t,
                h: cfg.video_h,
                w: cfg.video_w,
                motion_score: 0.5,
            },
        }
    }

    fn toy_norm(c: usize) -> LatentNormStats {
        LatentNormStats {
            struct_mean: vec![0.0; c],
            struct_std: vec![1.0; c],
            oned_mean: vec![0.0; c],
            oned_std: vec![1.0; c],
        }
    }

    #[test]
    fn norm_stats_floor_and_round_trip() {
        let cfg = LdmConfig::tiny();
        // Constant-channel corpus → std floored, normalized values zero.
        let mut lat = toy_latent(1, cfg.l_full, &cfg);
        for v in lat.structural.make_mut() {
            *v = 3.0;
        }
        for v in lat.oned.make_mut() {
            *v = -2.0;
        }
        let norm = compute_latent_norm(std::slice::from_ref(&lat)).unwrap();
        assert!(norm.struct_std.iter().all(|&s| s == NORM_STD_FLOOR));
        let z = norm.normalize(&lat);
        assert!(z.structural.data().iter().all(|v| v.abs() < 1e-9));
        assert!(z.oned.data().iter().all(|v| v.abs() < 1e-9));

        // Round trip on a generic corpus.
        let lats: Vec<_> = (0..4).map(|i| toy_latent(10 + i, cfg.l_full, &cfg)).collect();
        let norm = compute_latent_norm(&lats).unwrap();
        let back = norm.denormalize(&norm.normalize(&lats[0]));
        for (a, b) in back.structural.data().iter().zip(lats[0].structural.data()) {
            assert!((a - b).abs() < 1e-6);
        }
        for (a, b) in back.oned.data().iter().zip(lats[0].oned.data()) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn norm_stats_match_hand_computation() {
        let cfg = LdmConfig {
            latent_dim: 2,
            grid_h: 1,
            grid_w: 1,
            l_full: 1,
            ..LdmConfig::tiny()
        };
        // Two latents, structural rows (1,5) and (3,7): mean (2,6), std (1,1).
        let mk = |sv: Vec<f64>, ov: Vec<f64>| HybridLatent {
            structural: Tensor::new(vec![1, 1, 1, 2], sv),
            oned: Tensor::new(vec![1, 2], ov),
            valid_len: 1,
            meta: LatentMeta {
                t: 4,
                h: 8,
                w: 8,
                motion_score: 0.0,
            },
        };
        let lats = [
            mk(vec![1.0, 5.0], vec![0.0, 2.0]),
            mk(vec![3.0, 7.0], vec![4.0, 2.0]),
        ];
        let _ = cfg;
        let norm = compute_latent_norm(&lats).unwrap();
        assert_eq!(norm.struct_mean, vec![2.0, 6.0]);
        assert_eq!(norm.struct_std, vec![1.0, 1.0]);
        assert_eq!(norm.oned_mean, vec![2.0, 2.0]);
        assert_eq!(norm.oned_std[0], 2.0);
        assert_eq!(norm.oned_std[1], NORM_STD_FLOOR);
    }

    #[test]
    fn clean_latent_identities() {
        let mut rng = SeedRng::from_seed(2);
        let z0 = Tensor::new(vec![3, 2], (0..6).map(|_| rng.normal()).collect::<Vec<f64>>());
        let z1 = Tensor::new(vec![3, 2], (0..6).map(|_| rng.normal()).collect::<Vec<f64>>());
        let t = 0.63;
        let z_t = z0.zip_map(&z1, |a, b| (1.0 - t) * a + t * b);
        let v_true = z1.zip_map(&z0, |b, a| b - a);
        // Perfect velocity recovers z0 at any t.
        let zhat = predict_clean_latent(&z_t, t, &v_true);
        for (a, b) in zhat.data().iter().zip(z0.data()) {
            assert!((a - b).abs() < 1e-12);
        }
        // t = 0 returns z_t itself.
        let zhat0 = predict_clean_latent(&z0, 0.0, &v_true);
        assert_eq!(zhat0.data(), z0.data());
        // Scalar arithmetic case: 1 − 0.5·2 = 0.
        let z = Tensor::new(vec![1, 1], vec![1.0]);
        let v = Tensor::new(vec![1, 1], vec![2.0]);
        assert_eq!(predict_clean_latent(&z, 0.5, &v).data(), &[0.0]);
        // Disturbance identity ẑ0 − z0 = t((z1−z0) − v̄) element-wise.
        let v_bar = Tensor::new(vec![3, 2], (0..6).map(|_| rng.normal()).collect::<Vec<f64>>());
        let zhat = predict_clean_latent(&z_t, t, &v_bar);
        for i in 0..6 {
            let lhs = zhat.data()[i] - z0.data()[i];
            let rhs = t * ((z1.data()[i] - z0.data()[i]) - v_bar.data()[i]);
            assert!((lhs - rhs).abs() < 1e-12);
        }
    }

    #[test]
    fn motion_buckets_partition_the_unit_interval() {
        assert_eq!(class_for_motion_level(0.0, 4), 0);
        assert_eq!(class_for_motion_level(0.24, 4), 0);
        assert_eq!(class_for_motion_level(0.25, 4), 1);
        assert_eq!(class_for_motion_level(0.99, 4), 3);
        assert_eq!(class_for_motion_level(1.0, 4), 3);
        assert_eq!(class_for_motion_level(0.7, 1), 0);
    }

    #[test]
    fn masked_rows_cannot_move_the_loss() {
        let cfg = LdmConfig::tiny();
        let mut rng = SeedRng::from_seed(14);
        let mut params = Params::<f64>::new();
        let model = LatentFlowModel::init(&mut params, cfg, &mut rng).unwrap();
        let norm = toy_norm(cfg.latent_dim);
        let run = |latent: &HybridLatent<f64>| {
            let mut opt = AdamW::new(AdamConfig::default(), params.len());
            let mut p2 = Params::<f64>::new();
            for (_, e) in params.iter() {
                p2.add(e.name.clone(), e.value.clone());
            }
            let mut step_rng = SeedRng::from_seed(55);
            ldm_train_step(
                &model,
                &mut p2,
                &mut opt,
                &norm,
                &[(latent.clone(), 1)],
                &mut step_rng,
            )
            .unwrap()
        };
        let lat = toy_latent(3, 2, &cfg);
        let mut perturbed = lat.clone();
        {
            let c = cfg.latent_dim;
            let buf = perturbed.oned.make_mut();
            for v in &mut buf[2 * c..] {
                *v += 123.0;
            }
        }
        assert_eq!(run(&lat).to_bits(), run(&perturbed).to_bits());
    }

    #[test]
    fn perfect_prediction_gives_zero_masked_loss() {
        let mut g = Graph::<f64>::new();
        let mut rng = SeedRng::from_seed(15);
        let v = Tensor::new(vec![4, 3], (0..12).map(|_| rng.normal()).collect::<Vec<f64>>());
        let a = g.constant(v.clone());
        let b = g.constant(v);
        let mask = vec![1.0, 1.0, 0.0, 0.0];
        let l = masked_latent_mse(&mut g, a, b, &mask);
        assert_eq!(g.value(l).item(), 0.0);
    }

    #[test]
    fn label_out_of_range_errors() {
        let cfg = LdmConfig::tiny();
        let mut rng = SeedRng::from_seed(16);
        let mut params = Params::<f64>::new();
        let model = LatentFlowModel::init(&mut params, cfg, &mut rng).unwrap();
        let mut opt = AdamW::new(AdamConfig::default(), params.len());
        let norm = toy_norm(cfg.latent_dim);
        let lat = toy_latent(4, 2, &cfg);
        let err = ldm_train_step(
            &model,
            &mut params,
            &mut opt,
            &norm,
            &[(lat, cfg.n_classes)],
            &mut rng,
        );
        assert!(err.is_err());
    }

    #[test]
    fn sample_respects_budget_and_seed() {
        let cfg = LdmConfig::tiny();
        let mut rng = SeedRng::from_seed(17);
        let mut params = Params::<f64>::new();
        let model = LatentFlowModel::init(&mut params, cfg, &mut rng).unwrap();
        let norm = toy_norm(cfg.latent_dim);
        for budget in [0usize, 2, cfg.l_full] {
            let mut r1 = SeedRng::from_seed(88);
            let lat = ldm_sample(&model, &params, &norm, 1, budget, 4, &mut r1).unwrap();
            assert_eq!(lat.valid_len, budget);
            assert_eq!(lat.l_full(), cfg.l_full);
            assert_eq!(lat.grid_h(), cfg.grid_h);
            // Slots beyond the budget stay zero.
            let c = cfg.latent_dim;
            assert!(lat.oned.data()[budget * c..].iter().all(|&v| v == 0.0));
            // Same seed → identical sample.
            let mut r2 = SeedRng::from_seed(88);
            let lat2 = ldm_sample(&model, &params, &norm, 1, budget, 4, &mut r2).unwrap();
            assert_eq!(lat.structural.data(), lat2.structural.data());
            assert_eq!(lat.oned.data(), lat2.oned.data());
        }
        assert!(ldm_sample(&model, &params, &norm, 1, cfg.l_full + 1, 4, &mut rng).is_err());
    }

    #[test]
    fn training_descends_on_a_tiny_two_class_problem() {
        let cfg = LdmConfig::tiny();
        let mut rng = SeedRng::from_seed(18);
        let mut params = Params::<f64>::new();
        let model = LatentFlowModel::init(&mut params, cfg, &mut rng).unwrap();
        let mut opt = AdamW::new(
            AdamConfig {
                lr: 5e-3,
                ..AdamConfig::default()
            },
            params.len(),
        );
        // Fixed two-class corpus: class = high/low motion analogue.
        let corpus: Vec<(HybridLatent<f64>, usize)> = (0..4)
            .map(|i| (toy_latent(100 + i as u64, cfg.l_full, &cfg), (i % 2) as usize))
            .collect();
        let norm = compute_latent_norm(
            &corpus.iter().map(|(l, _)| l.clone()).collect::<Vec<_>>(),
        )
        .unwrap();
        let mut first_window = 0.0;
        let mut last_window = 0.0;
        let n_steps = 500;
        for step in 0..n_steps {
            let loss = ldm_train_step(&model, &mut params, &mut opt, &norm, &corpus, &mut rng)
                .unwrap();
            if step < 20 {
                first_window += loss / 20.0;
            }
            if step >= n_steps - 20 {
                last_window += loss / 20.0;
            }
        }
        assert!(
            last_window < 0.7 * first_window,
            "no descent: first {first_window:.4} last {last_window:.4}"
        );
    }
}
