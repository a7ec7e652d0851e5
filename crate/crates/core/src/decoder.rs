//! Pixel-space diffusion transformer: predicts the flow velocity for a noisy
//! video conditioned on the hybrid latent. Dropped 1D slots are carried as a
//! learned pad token so the condition length is fixed per resolution.

use crate::encoder::{patchify_map, unpatchify_map};
use crate::error::{CoreError, Result};
use crate::graph::{Graph, Var, REINDEX_ZERO};
use crate::nn::{self, Init, LayerNorm, Linear, ModulatedBlock, ParamId, Params};
use crate::rng::SeedRng;
use crate::tensor::{Real, Tensor};
use std::sync::Arc;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct DecoderConfig {
    pub hidden_dim: usize,
    pub n_blocks: usize,
    pub n_heads: usize,
    pub patch_s_dec: usize,
    pub patch_t_dec: usize,
    pub latent_dim: usize,
    /// Capacity of the learned 1D condition-slot positional table.
    pub n_max_cond: usize,
}

impl DecoderConfig {
    pub fn desk() -> Self {
        DecoderConfig {
            hidden_dim: 192,
            n_blocks: 6,
            n_heads: 6,
            patch_s_dec: 4,
            patch_t_dec: 2,
            latent_dim: 16,
            n_max_cond: 128,
        }
    }

    pub fn paper_preset() -> Self {
        DecoderConfig {
            hidden_dim: 1152,
            n_blocks: 24,
            n_heads: 16,
            patch_s_dec: 8,
            patch_t_dec: 2,
            latent_dim: 64,
            n_max_cond: 1938,
        }
    }

    pub fn tiny() -> Self {
        DecoderConfig {
            hidden_dim: 24,
            n_blocks: 2,
            n_heads: 2,
            patch_s_dec: 2,
            patch_t_dec: 2,
            latent_dim: 4,
            n_max_cond: 16,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.hidden_dim == 0
            || self.n_blocks == 0
            || self.n_heads == 0
            || self.patch_s_dec == 0
            || self.patch_t_dec == 0
            || self.latent_dim == 0
            || self.n_max_cond == 0
        {
            return Err(CoreError::InvalidArgument(
                "decoder config fields must be positive".into(),
            ));
        }
        if self.hidden_dim % self.n_heads != 0 {
            return Err(CoreError::InvalidArgument(
                "hidden_dim must divide by n_heads".into(),
            ));
        }
        Ok(())
    }

    fn pvol(&self) -> usize {
        self.patch_t_dec * self.patch_s_dec * self.patch_s_dec * 3
    }
}

/// Assembled condition tokens plus bookkeeping for slicing.
pub struct CondSeq {
    pub seq: Var,
    pub n_cond: usize,
    pub n_struct: usize,
    pub l_full: usize,
}

/// Velocity prediction plus the feature tap used for alignment losses.
pub struct PredictOut {
    /// [T*H*W, 3] velocity over the padded pixel grid.
    pub velocity: Var,
    /// Noisy-position features after the midpoint block, [N_noisy, hidden].
    pub repa_features: Var,
    /// ViT token grid of the noisy input (nt, nh, nw).
    pub noisy_grid: (usize, usize, usize),
}

pub struct Decoder {
    pub cfg: DecoderConfig,
    patch_proj: Linear,
    struct_lift: Linear,
    oned_lift: Linear,
    pad_token: ParamId,
    struct_type: ParamId,
    oned_type: ParamId,
    oned_pos: ParamId,
    t_mlp1: Linear,
    t_mlp2: Linear,
    blocks: Vec<ModulatedBlock>,
    final_norm: LayerNorm,
    final_mod: Linear,
    head: Linear,
    skip_proj: Linear,
    conv_w: ParamId,
    conv_b: ParamId,
}

impl Decoder {
    pub fn init<T: Real>(params: &mut Params<T>, cfg: DecoderConfig, rng: &mut SeedRng) -> Result<Self> {
        cfg.validate()?;
        let d = cfg.hidden_dim;
        let c = cfg.latent_dim;
        let pvol = cfg.pvol();
        let patch_proj = Linear::init(params, "dec.patch", pvol, d, true, Init::Lecun, rng);
        let struct_lift = Linear::init(params, "dec.lift_s", c, d, true, Init::Lecun, rng);
        let oned_lift = Linear::init(params, "dec.lift_q", c, d, true, Init::Lecun, rng);
        let pad_token = params.add("dec.pad_token", nn::normal_init::<T>(vec![1, c], 0.02, rng));
        let struct_type = params.add("dec.type_s", nn::normal_init::<T>(vec![1, d], 0.02, rng));
        let oned_type = params.add("dec.type_q", nn::normal_init::<T>(vec![1, d], 0.02, rng));
        let oned_pos = params.add(
            "dec.cond_pos",
            nn::normal_init::<T>(vec![cfg.n_max_cond, d], 0.02, rng),
        );
        let t_mlp1 = Linear::init(params, "dec.t1", d, d, true, Init::Lecun, rng);
        let t_mlp2 = Linear::init(params, "dec.t2", d, d, true, Init::Lecun, rng);
        let blocks = (0..cfg.n_blocks)
            .map(|i| ModulatedBlock::init(params, &format!("dec.b{i}"), d, cfg.n_heads, rng))
            .collect();
        let final_norm = LayerNorm::init(params, "dec.fnorm", d);
        let final_mod = Linear::init(params, "dec.fmod", d, 2 * d, true, Init::Zero, rng);
        let head = Linear::init(params, "dec.head", d, pvol, true, Init::Zero, rng);
        let skip_proj = Linear::init(params, "dec.skip", d, d, true, Init::Lecun, rng);
        let conv_w = params.add("dec.conv.w", Tensor::<T>::zeros(vec![81, 3]));
        let conv_b = params.add("dec.conv.b", Tensor::<T>::zeros(vec![3]));
        Ok(Decoder {
            cfg,
            patch_proj,
            struct_lift,
            oned_lift,
            pad_token,
            struct_type,
            oned_type,
            oned_pos,
            t_mlp1,
            t_mlp2,
            blocks,
            final_norm,
            final_mod,
            head,
            skip_proj,
            conv_w,
            conv_b,
        })
    }

    fn bind<T: Real>(params: &Params<T>, g: &mut Graph<T>, id: ParamId, frozen: bool) -> Var {
        if frozen {
            params.bind_frozen(g, id)
        } else {
            params.bind(g, id)
        }
    }

    /// Lift the hybrid latent into hidden-dim condition tokens. `structural`
    /// is [h*w, C]; `oned` is [L_full, C] of which the first `valid_len` rows
    /// are content and the rest are replaced by the lifted pad vector.
    /// Slots receive type vectors and positional encodings.
    #[allow(clippy::too_many_arguments)]
    pub fn assemble_condition<T: Real>(
        &self,
        g: &mut Graph<T>,
        params: &Params<T>,
        structural: Var,
        oned: Var,
        valid_len: usize,
        grid: (usize, usize),
        frozen: bool,
    ) -> Result<CondSeq> {
        let (gh, gw) = grid;
        let n_struct = g.value(structural).rows();
        let l_full = g.value(oned).rows();
        if n_struct != gh * gw {
            return Err(CoreError::ShapeMismatch(format!(
                "structural rows {n_struct} vs grid {gh}x{gw}"
            )));
        }
        if valid_len > l_full {
            return Err(CoreError::InvalidArgument(format!(
                "valid_len {valid_len} > L_full {l_full}"
            )));
        }
        if l_full > self.cfg.n_max_cond {
            return Err(CoreError::QueryBudget {
                needed: l_full,
                available: self.cfg.n_max_cond,
            });
        }
        let d = self.cfg.hidden_dim;

        // Structural slots: lift + grid positional encoding + type vector.
        let s_tok = self.struct_lift.apply(g, params, structural, frozen);
        let s_pos = g.constant(nn::pos_embedding_3d::<T>(d, 1, gh, gw));
        let s_tok = g.add(s_tok, s_pos);
        let s_type = Self::bind(params, g, self.struct_type, frozen);
        let s_tok = g.add_row(s_tok, s_type);

        // 1D slots: valid rows lifted, tail slots all carry the pad vector.
        let q_tok = if l_full > 0 {
            let content = if valid_len == 0 {
                let pad = Self::bind(params, g, self.pad_token, frozen);
                g.broadcast_row(pad, l_full)
            } else if valid_len == l_full {
                oned
            } else {
                let valid = g.slice_rows(oned, 0, valid_len);
                let pad = Self::bind(params, g, self.pad_token, frozen);
                let pads = g.broadcast_row(pad, l_full - valid_len);
                g.concat_rows(valid, pads)
            };
            let lifted = self.oned_lift.apply(g, params, content, frozen);
            let pos_all = Self::bind(params, g, self.oned_pos, frozen);
            let pos = g.slice_rows(pos_all, 0, l_full);
            let lifted = g.add(lifted, pos);
            let q_type = Self::bind(params, g, self.oned_type, frozen);
            Some(g.add_row(lifted, q_type))
        } else {
            None
        };

        let seq = match q_tok {
            Some(q) => g.concat_rows(s_tok, q),
            None => s_tok,
        };
        Ok(CondSeq {
            seq,
            n_cond: n_struct + l_full,
            n_struct,
            l_full,
        })
    }

    /// Velocity prediction D(x_t, t, z). `x_t` is a [T*H*W, 3] pixel tensor on
    /// the padded grid given by `dims`.
    pub fn predict_velocity<T: Real>(
        &self,
        g: &mut Graph<T>,
        params: &Params<T>,
        x_t: Var,
        dims: (usize, usize, usize),
        t: f64,
        cond: &CondSeq,
        frozen: bool,
    ) -> Result<PredictOut> {
        let cfg = &self.cfg;
        let (tp, hp, wp) = dims;
        if tp % cfg.patch_t_dec != 0 || hp % cfg.patch_s_dec != 0 || wp % cfg.patch_s_dec != 0 {
            return Err(CoreError::ShapeMismatch(format!(
                "dims {tp}x{hp}x{wp} not divisible by decoder patches"
            )));
        }
        if g.value(x_t).numel() != tp * hp * wp * 3 {
            return Err(CoreError::ShapeMismatch(format!(
                "x_t numel {} vs dims {tp}x{hp}x{wp}x3",
                g.value(x_t).numel()
            )));
        }
        if !(0.0..=1.0).contains(&t) {
            return Err(CoreError::InvalidArgument(format!("t={t} outside [0,1]")));
        }
        let d = cfg.hidden_dim;
        let (nt, nh, nw) = (tp / cfg.patch_t_dec, hp / cfg.patch_s_dec, wp / cfg.patch_s_dec);
        let n_noisy = nt * nh * nw;

        // Patchify the noisy input and embed.
        let pmap = patchify_map(tp, hp, wp, cfg.patch_t_dec, cfg.patch_s_dec);
        let patches = g.reindex(x_t, pmap, vec![n_noisy, cfg.pvol()]);
        let tokens = self.patch_proj.apply(g, params, patches, frozen);
        let pos = g.constant(nn::pos_embedding_3d::<T>(d, nt, nh, nw));
        let noisy0 = g.add(tokens, pos);

        // Timestep embedding through a small MLP.
        let temb0 = g.constant(nn::timestep_embedding::<T>(t, d));
        let temb = self.t_mlp1.apply(g, params, temb0, frozen);
        let temb = g.silu(temb);
        let temb = self.t_mlp2.apply(g, params, temb, frozen);

        let mut x = g.concat_rows(cond.seq, noisy0);
        let n_total = cond.n_cond + n_noisy;
        let tap_after = cfg.n_blocks / 2;
        let mut repa_features = None;
        for (i, b) in self.blocks.iter().enumerate() {
            x = b.apply(g, params, x, temb, cond.n_cond, frozen);
            if i + 1 == tap_after {
                repa_features = Some(g.slice_rows(x, cond.n_cond, n_total));
            }
        }
        let repa_features = repa_features.unwrap_or(x);

        // Final head over noisy positions only.
        let noisy_out = g.slice_rows(x, cond.n_cond, n_total);
        let normed = self.final_norm.apply(g, params, noisy_out, frozen);
        let mact = g.silu(temb);
        let mods = self.final_mod.apply(g, params, mact, frozen);
        let mods = mods.reshaped(g, vec![2, d]);
        let shift = g.slice_rows(mods, 0, 1);
        let scale = g.slice_rows(mods, 1, 2);
        let scale1 = g.add_const(scale, T::ONE);
        let modded = g.mul_row(normed, scale1);
        let modded = g.add_row(modded, shift);

        let velocity = self.unpatchify(g, params, modded, noisy0, (tp, hp, wp), frozen)?;
        Ok(PredictOut {
            velocity,
            repa_features,
            noisy_grid: (nt, nh, nw),
        })
    }

    /// tokens += affine(skip); project to patch pixels; pixel-shuffle into the
    /// video layout; refine with a zero-initialized 3x3x3 convolution.
    pub fn unpatchify<T: Real>(
        &self,
        g: &mut Graph<T>,
        params: &Params<T>,
        tokens: Var,
        skip: Var,
        dims: (usize, usize, usize),
        frozen: bool,
    ) -> Result<Var> {
        let cfg = &self.cfg;
        let (tp, hp, wp) = dims;
        let n_noisy = (tp / cfg.patch_t_dec) * (hp / cfg.patch_s_dec) * (wp / cfg.patch_s_dec);
        if g.value(tokens).rows() != n_noisy || g.value(skip).rows() != n_noisy {
            return Err(CoreError::ShapeMismatch(format!(
                "unpatchify expects {n_noisy} token rows"
            )));
        }
        let s = self.skip_proj.apply(g, params, skip, frozen);
        let tokens = g.add(tokens, s);
        let patch_px = self.head.apply(g, params, tokens, frozen);
        // Pixel shuffle: pure permutation from token-major to pixel-major.
        let shuf = unpatchify_map(tp, hp, wp, cfg.patch_t_dec, cfg.patch_s_dec);
        let n_px = tp * hp * wp;
        let pixels = g.reindex(patch_px, shuf, vec![n_px, 3]);
        // Residual 3x3x3 convolution.
        let im2col = conv3_im2col_map(tp, hp, wp);
        let cols = g.reindex(pixels, im2col, vec![n_px, 81]);
        let w = Self::bind(params, g, self.conv_w, frozen);
        let b = Self::bind(params, g, self.conv_b, frozen);
        let conv = g.matmul(cols, w);
        let conv = g.add_row(conv, b);
        Ok(g.add(pixels, conv))
    }
}

/// im2col gather map for a 3x3x3 neighborhood over a [T*H*W, 3] video with
/// zero padding; out-of-range taps emit zero via the reindex sentinel.
pub fn conv3_im2col_map(t: usize, h: usize, w: usize) -> Arc<Vec<usize>> {
    let mut map = Vec::with_capacity(t * h * w * 81);
    for tt in 0..t as isize {
        for yy in 0..h as isize {
            for xx in 0..w as isize {
                for dt in -1..=1isize {
                    for dy in -1..=1isize {
                        for dx in -1..=1isize {
                            let (st, sy, sx) = (tt + dt, yy + dy, xx + dx);
                            let inside = st >= 0
                                && st < t as isize
                                && sy >= 0
                                && sy < h as isize
                                && sx >= 0
                                && sx < w as isize;
                            for c in 0..3usize {
                                if inside {
                                    let base =
                                        ((st as usize * h + sy as usize) * w + sx as usize) * 3;
                                    map.push(base + c);
                                } else {
                                    map.push(REINDEX_ZERO);
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    Arc::new(map)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::fdcheck::central_diff;
    use crate::nn::GradStore;

    fn setup(cfg: DecoderConfig) -> (Params<f64>, Decoder, SeedRng) {
        let mut rng = SeedRng::from_seed(17);
        let mut params = Params::<f64>::new();
        let dec = Decoder::init(&mut params, cfg, &mut rng).unwrap();
        (params, dec, rng)
    }

    fn rand_t(shape: Vec<usize>, rng: &mut SeedRng) -> Tensor<f64> {
        let n = shape.iter().product();
        Tensor::new(shape, (0..n).map(|_| rng.normal() * 0.5).collect())
    }

    struct Setup {
        dims: (usize, usize, usize),
        grid: (usize, usize),
        structural: Tensor<f64>,
        oned: Tensor<f64>,
        x_t: Tensor<f64>,
    }

    fn tiny_inputs(rng: &mut SeedRng) -> Setup {
        // Padded dims 4x8x8 with decoder patches (2,2); latent grid 2x2, L=4.
        let dims = (4usize, 8usize, 8usize);
        Setup {
            dims,
            grid: (2, 2),
            structural: rand_t(vec![4, 4], rng),
            oned: rand_t(vec![4, 4], rng),
            x_t: rand_t(vec![dims.0 * dims.1 * dims.2, 3], rng),
        }
    }

    fn forward_loss(
        dec: &Decoder,
        params: &Params<f64>,
        s: &Setup,
        valid_len: usize,
        t: f64,
    ) -> (f64, Graph<f64>, Var) {
        let mut g = Graph::new();
        let st = g.constant(s.structural.clone());
        let on = g.constant(s.oned.clone());
        let xt = g.constant(s.x_t.clone());
        let cond = dec
            .assemble_condition(&mut g, params, st, on, valid_len, s.grid, false)
            .unwrap();
        let out = dec
            .predict_velocity(&mut g, params, xt, s.dims, t, &cond, false)
            .unwrap();
        let sq = g.square(out.velocity);
        let loss = g.mean_all(sq);
        let v = g.value(loss).item();
        (v, g, loss)
    }

    #[test]
    fn output_shape_matches_input_and_is_deterministic() {
        let (params, dec, mut rng) = setup(DecoderConfig::tiny());
        let s = tiny_inputs(&mut rng);
        let mut g = Graph::new();
        let st = g.constant(s.structural.clone());
        let on = g.constant(s.oned.clone());
        let xt = g.constant(s.x_t.clone());
        let cond = dec
            .assemble_condition(&mut g, &params, st, on, 4, s.grid, true)
            .unwrap();
        assert_eq!(cond.n_cond, 4 + 4);
        let out = dec
            .predict_velocity(&mut g, &params, xt, s.dims, 0.7, &cond, true)
            .unwrap();
        assert_eq!(g.value(out.velocity).shape(), s.x_t.shape());
        assert_eq!(g.value(out.repa_features).rows(), 2 * 4 * 4);
        // Determinism: rebuild and compare bits.
        let mut g2 = Graph::new();
        let st2 = g2.constant(s.structural.clone());
        let on2 = g2.constant(s.oned.clone());
        let xt2 = g2.constant(s.x_t.clone());
        let cond2 = dec
            .assemble_condition(&mut g2, &params, st2, on2, 4, s.grid, true)
            .unwrap();
        let out2 = dec
            .predict_velocity(&mut g2, &params, xt2, s.dims, 0.7, &cond2, true)
            .unwrap();
        assert_eq!(g.value(out.velocity).data(), g2.value(out2.velocity).data());
    }

    #[test]
    fn invalid_tail_content_is_ignored() {
        // With valid_len=0 every 1D slot is the pad vector, so the stored
        // oned content must not influence the velocity.
        let (params, dec, mut rng) = setup(DecoderConfig::tiny());
        let s = tiny_inputs(&mut rng);
        let (a, _, _) = forward_loss(&dec, &params, &s, 0, 0.5);
        let s2 = Setup {
            oned: rand_t(vec![4, 4], &mut rng),
            structural: s.structural.clone(),
            x_t: s.x_t.clone(),
            ..s
        };
        let (b, _, _) = forward_loss(&dec, &params, &s2, 0, 0.5);
        assert_eq!(a, b);
        // Same for a partial tail: only rows >= valid_len may change.
        let mut oned3 = s.oned.clone();
        {
            let buf = oned3.make_mut();
            for j in 2 * 4..4 * 4 {
                buf[j] = -buf[j] + 0.123;
            }
        }
        let s3 = Setup {
            oned: oned3,
            structural: s.structural.clone(),
            x_t: s.x_t.clone(),
            ..s
        };
        let (c1, _, _) = forward_loss(&dec, &params, &s, 2, 0.5);
        let (c2, _, _) = forward_loss(&dec, &params, &s3, 2, 0.5);
        assert_eq!(c1, c2);
    }

    #[test]
    fn condition_length_is_fixed_across_valid_lens() {
        let (params, dec, mut rng) = setup(DecoderConfig::tiny());
        let s = tiny_inputs(&mut rng);
        for vl in [0usize, 1, 3, 4] {
            let mut g = Graph::new();
            let st = g.constant(s.structural.clone());
            let on = g.constant(s.oned.clone());
            let cond = dec
                .assemble_condition(&mut g, &params, st, on, vl, s.grid, true)
                .unwrap();
            assert_eq!(cond.n_cond, 8);
            assert_eq!(g.value(cond.seq).rows(), 8);
        }
    }

    #[test]
    fn zero_head_makes_initial_velocity_conv_only_zero() {
        // head and conv are zero-initialized, so the initial velocity is 0.
        let (params, dec, mut rng) = setup(DecoderConfig::tiny());
        let s = tiny_inputs(&mut rng);
        let mut g = Graph::new();
        let st = g.constant(s.structural.clone());
        let on = g.constant(s.oned.clone());
        let xt = g.constant(s.x_t.clone());
        let cond = dec
            .assemble_condition(&mut g, &params, st, on, 4, s.grid, true)
            .unwrap();
        let out = dec
            .predict_velocity(&mut g, &params, xt, s.dims, 1.0, &cond, true)
            .unwrap();
        for v in g.value(out.velocity).data() {
            assert_eq!(*v, 0.0);
        }
    }

    #[test]
    fn pixel_shuffle_is_a_permutation() {
        let map = unpatchify_map(4, 8, 8, 2, 2);
        let mut seen = vec![false; map.len()];
        for &i in map.iter() {
            assert!(!seen[i]);
            seen[i] = true;
        }
        assert!(seen.iter().all(|&b| b));
    }

    #[test]
    fn conv_map_zero_pads_the_border() {
        let map = conv3_im2col_map(2, 3, 3);
        // Corner voxel (0,0,0): taps with any negative offset are sentinels.
        let first = &map[..81];
        let n_zero = first.iter().filter(|&&i| i == REINDEX_ZERO).count();
        // Valid taps: dt in {0,1}, dy in {0,1}, dx in {0,1} -> 8 of 27, x3 ch.
        assert_eq!(81 - n_zero, 8 * 3);
        // Voxel (1,1,1) of a 3x3x3 volume: all 27 taps in bounds.
        let map3 = conv3_im2col_map(3, 3, 3);
        let center_pos = 13 * 81;
        let center = &map3[center_pos..center_pos + 81];
        assert!(center.iter().all(|&i| i != REINDEX_ZERO));
    }

    #[test]
    fn gradients_match_finite_differences_end_to_end() {
        let (mut params, dec, mut rng) = setup(DecoderConfig::tiny());
        // Nudge zero-initialized layers so their gradients are generic; with
        // the block gates at zero the residual branches carry no gradient.
        for name in [
            "dec.head.w",
            "dec.conv.w",
            "dec.fmod.w",
            "dec.b0.mod.w",
            "dec.b1.mod.w",
        ] {
            let id = params.id_of(name).unwrap();
            let mut w = params.get(id).clone();
            for x in w.make_mut() {
                *x = rng.normal() * 0.05;
            }
            params.set(id, w);
        }
        let s = tiny_inputs(&mut rng);
        let (_, mut g, loss) = forward_loss(&dec, &params, &s, 2, 0.6);
        let grads = g.backward(loss);
        let mut store = GradStore::new(params.len());
        store.add_from_graph(&g, &grads);
        for (name, idx) in [
            ("dec.patch.w", 5usize),
            ("dec.lift_s.w", 3),
            ("dec.lift_q.w", 7),
            ("dec.pad_token", 1),
            ("dec.cond_pos", 9),
            ("dec.b0.attn.q.w", 11),
            ("dec.b1.mod.w", 20),
            ("dec.head.w", 13),
            ("dec.skip.w", 2),
            ("dec.conv.w", 40),
            ("dec.t1.w", 6),
        ] {
            let id = params.id_of(name).unwrap();
            let analytic = store
                .get(id)
                .unwrap_or_else(|| panic!("no grad for {name}"))
                .data()[idx];
            let base = params.get(id).clone();
            let numeric = central_diff(&base, idx, 1e-6, |tt| {
                let mut pm = Params::<f64>::new();
                for (_, e) in params.iter() {
                    pm.add(e.name.clone(), e.value.clone());
                }
                pm.set(id, tt.clone());
                forward_loss(&dec, &pm, &s, 2, 0.6).0
            });
            let denom = analytic.abs().max(numeric.abs()).max(1e-8);
            assert!(
                (analytic - numeric).abs() / denom < 1e-4,
                "{name}[{idx}]: analytic {analytic} vs numeric {numeric}"
            );
        }
    }
}
