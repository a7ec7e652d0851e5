//! Training objectives: flow-matching MSE, Gaussian KL, a frozen-feature
//! perceptual proxy, representation alignment on decoder features, the 1D/
//! structural self-alignment regularizer, and their weighted composite.

use crate::error::{CoreError, Result};
use crate::graph::{Graph, Var, REINDEX_ZERO};
use crate::nn::Linear;
use crate::nn::Params;
use crate::rng::SeedRng;
use crate::tensor::{Real, Tensor};
use std::sync::Arc;

pub const COSINE_EPS: f64 = 1e-8;

#[derive(Clone, Copy, Debug)]
pub struct LossWeights {
    pub l1: f64,
    pub l2: f64,
    pub l3: f64,
    pub l4: f64,
    pub l_align: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            l1: 10.0,
            l2: 0.1,
            l3: 1e-4,
            l4: 0.1,
            l_align: 0.01,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let all = [self.l1, self.l2, self.l3, self.l4, self.l_align];
        if all.iter().any(|w| !w.is_finite() || *w < 0.0) {
            return Err(CoreError::InvalidArgument(
                "loss weights must be finite and non-negative".into(),
            ));
        }
        Ok(())
    }
}

/// Scalar loss terms assembled by a training step. `align` participates only
/// in the alignment fine-tune phase.
pub struct LossParts {
    pub diffusion: Var,
    pub perceptual: Var,
    pub kl: Var,
    pub repa: Var,
    pub align: Option<Var>,
}

// ---- diffusion ----

/// ‖pred_v − (x1 − x0)‖² as a mean over elements.
pub fn diffusion_loss<T: Real>(g: &mut Graph<T>, pred_v: Var, x0: Var, x1: Var) -> Result<Var> {
    let (sp, s0, s1) = (
        g.value(pred_v).shape().to_vec(),
        g.value(x0).shape().to_vec(),
        g.value(x1).shape().to_vec(),
    );
    if sp != s0 || sp != s1 {
        return Err(CoreError::ShapeMismatch(format!(
            "diffusion_loss shapes {sp:?} / {s0:?} / {s1:?}"
        )));
    }
    let target = g.sub(x1, x0);
    Ok(g.mse(pred_v, target))
}

/// One-step clean estimate x̂0 = x_t − t·v̂.
pub fn clean_estimate<T: Real>(g: &mut Graph<T>, x_t: Var, pred_v: Var, t: f64) -> Var {
    let vt = g.scale(pred_v, T::from_f64(-t));
    g.add(x_t, vt)
}

// ---- KL ----

/// Mean over elements of ½(μ² + e^{logvar} − 1 − logvar).
pub fn kl_loss<T: Real>(g: &mut Graph<T>, mean: Var, logvar: Var) -> Var {
    let sq = g.square(mean);
    let ev = g.exp(logvar);
    let s = g.add(sq, ev);
    let s = g.add_const(s, -T::ONE);
    let s = g.sub(s, logvar);
    let m = g.mean_all(s);
    g.scale(m, T::from_f64(0.5))
}

/// Element-weighted mean of `kl_loss` over several (mean, logvar) pairs, so
/// structural and 1D moments count per element rather than per group.
pub fn kl_loss_all<T: Real>(g: &mut Graph<T>, pairs: &[(Var, Var)]) -> Var {
    assert!(!pairs.is_empty());
    let total: usize = pairs.iter().map(|(m, _)| g.value(*m).numel()).sum();
    let mut acc = None;
    for &(m, lv) in pairs {
        let n = g.value(m).numel();
        let k = kl_loss(g, m, lv);
        let k = g.scale(k, T::from_f64(n as f64 / total as f64));
        acc = Some(match acc {
            None => k,
            Some(a) => g.add(a, k),
        });
    }
    acc.unwrap()
}

// ---- frozen perceptual teacher ----

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TeacherKind {
    RandomConvStack,
    Identity,
    External,
}

/// One strided 3x3 convolution of the teacher stack.
pub struct TeacherConv<T: Real> {
    pub w: Tensor<T>,
    pub b: Tensor<T>,
    pub c_in: usize,
    pub c_out: usize,
    pub stride: usize,
}

/// Feature extractor with immutable weights. `RandomConvStack` draws three
/// strided convolutions from the seed; `Identity` passes pixels through;
/// `External` wraps caller-provided convolutions.
pub struct FrozenTeacher<T: Real> {
    pub kind: TeacherKind,
    pub seed: u64,
    convs: Vec<TeacherConv<T>>,
}

const TEACHER_CHANNELS: [usize; 4] = [3, 8, 16, 32];

impl<T: Real> FrozenTeacher<T> {
    pub fn random_conv_stack(seed: u64) -> Self {
        let mut convs = Vec::new();
        for i in 0..3 {
            let (c_in, c_out) = (TEACHER_CHANNELS[i], TEACHER_CHANNELS[i + 1]);
            let mut rng = SeedRng::derive(seed, 0x7463_6f6e_7600 + i as u64);
            let fan_in = 9 * c_in;
            let sd = (1.0 / fan_in as f64).sqrt();
            let w = Tensor::new(
                vec![fan_in, c_out],
                (0..fan_in * c_out)
                    .map(|_| T::from_f64(rng.normal() * sd))
                    .collect(),
            );
            let b = Tensor::zeros(vec![c_out]);
            convs.push(TeacherConv {
                w,
                b,
                c_in,
                c_out,
                stride: 2,
            });
        }
        FrozenTeacher {
            kind: TeacherKind::RandomConvStack,
            seed,
            convs,
        }
    }

    pub fn identity() -> Self {
        FrozenTeacher {
            kind: TeacherKind::Identity,
            seed: 0,
            convs: Vec::new(),
        }
    }

    pub fn external(convs: Vec<TeacherConv<T>>) -> Self {
        FrozenTeacher {
            kind: TeacherKind::External,
            seed: 0,
            convs,
        }
    }

    pub fn n_taps(&self) -> usize {
        match self.kind {
            TeacherKind::Identity => 1,
            _ => self.convs.len(),
        }
    }

    /// Precompute the im2col gather maps and tap grids for an h×w frame.
    pub fn plan(&self, h: usize, w: usize) -> TeacherPlan {
        let mut maps = Vec::new();
        let mut grids = Vec::new();
        let (mut ch, mut cw) = (h, w);
        for c in &self.convs {
            maps.push(conv2_im2col_map(ch, cw, c.c_in, c.stride));
            ch = (ch - 1) / c.stride + 1;
            cw = (cw - 1) / c.stride + 1;
            grids.push((ch, cw, c.c_out));
        }
        TeacherPlan { maps, grids }
    }

    /// Feature maps for one frame given as [h*w, 3] rows. Returns one tap per
    /// convolution (after the nonlinearity), or the frame itself for
    /// `Identity`.
    pub fn frame_features(
        &self,
        g: &mut Graph<T>,
        frame: Var,
        plan: &TeacherPlan,
    ) -> Vec<(Var, (usize, usize, usize))> {
        if self.kind == TeacherKind::Identity {
            let n = g.value(frame).rows();
            return vec![(frame, (n, 1, 3))];
        }
        let mut taps = Vec::new();
        let mut x = frame;
        for (i, c) in self.convs.iter().enumerate() {
            let (gh, gw, gc) = plan.grids[i];
            let cols = g.reindex(x, plan.maps[i].clone(), vec![gh * gw, 9 * c.c_in]);
            let w = g.constant(c.w.clone());
            let b = g.constant(c.b.clone());
            let y = g.matmul(cols, w);
            let y = g.add_row(y, b);
            let y = g.gelu(y);
            taps.push((y, (gh, gw, gc)));
            x = y;
        }
        taps
    }
}

/// Cached gather maps and tap shapes of a teacher at one frame size.
pub struct TeacherPlan {
    maps: Vec<Arc<Vec<usize>>>,
    pub grids: Vec<(usize, usize, usize)>,
}

/// im2col map for a 3x3 stride-`s` convolution with zero padding 1 over an
/// h×w frame stored as [h*w, c_in] rows.
fn conv2_im2col_map(h: usize, w: usize, c_in: usize, s: usize) -> Arc<Vec<usize>> {
    let (ho, wo) = ((h - 1) / s + 1, (w - 1) / s + 1);
    let mut map = Vec::with_capacity(ho * wo * 9 * c_in);
    for oy in 0..ho {
        for ox in 0..wo {
            for ky in 0..3isize {
                for kx in 0..3isize {
                    let sy = (oy * s) as isize + ky - 1;
                    let sx = (ox * s) as isize + kx - 1;
                    let inside = sy >= 0 && sy < h as isize && sx >= 0 && sx < w as isize;
                    for c in 0..c_in {
                        if inside {
                            map.push((sy as usize * w + sx as usize) * c_in + c);
                        } else {
                            map.push(REINDEX_ZERO);
                        }
                    }
                }
            }
        }
    }
    Arc::new(map)
}

/// Mean over frames of the teacher-feature MSE summed over taps. `x_pred`
/// carries gradients; the true side is detached.
pub fn perceptual_loss<T: Real>(
    g: &mut Graph<T>,
    x_pred: Var,
    x_true: Var,
    dims: (usize, usize, usize),
    teacher: &FrozenTeacher<T>,
) -> Result<Var> {
    let (t, h, w) = dims;
    let n = t * h * w;
    if g.value(x_pred).rows() != n || g.value(x_true).rows() != n {
        return Err(CoreError::ShapeMismatch(format!(
            "perceptual_loss expects {n} pixel rows"
        )));
    }
    let plan = teacher.plan(h, w);
    let mut acc: Option<Var> = None;
    for f in 0..t {
        let fp = g.slice_rows(x_pred, f * h * w, (f + 1) * h * w);
        let ft = g.slice_rows(x_true, f * h * w, (f + 1) * h * w);
        let ft = g.detach(ft);
        let taps_p = teacher.frame_features(g, fp, &plan);
        let taps_t = teacher.frame_features(g, ft, &plan);
        for ((p, _), (q, _)) in taps_p.iter().zip(taps_t.iter()) {
            let d = g.mse(*p, *q);
            acc = Some(match acc {
                None => d,
                Some(a) => g.add(a, d),
            });
        }
    }
    let total = acc.expect("at least one frame");
    Ok(g.scale(total, T::from_f64(1.0 / t as f64)))
}

// ---- representation alignment ----

/// Row-wise ‖x‖ with an ε inside the square root so zero rows stay
/// differentiable.
fn row_norm_eps<T: Real>(g: &mut Graph<T>, x: Var) -> Var {
    let sq = g.square(x);
    let s = g.row_sum(sq);
    let s = g.add_const(s, T::from_f64(COSINE_EPS));
    g.sqrt(s)
}

/// Tap shapes considered for alignment targets (the identity teacher exposes
/// raw pixels as its single tap).
fn tap_candidates<T: Real>(
    teacher: &FrozenTeacher<T>,
    plan: &TeacherPlan,
    h: usize,
    w: usize,
) -> Vec<(usize, usize, usize)> {
    if teacher.kind == TeacherKind::Identity {
        vec![(h, w, 3usize)]
    } else {
        plan.grids.clone()
    }
}

/// Deepest tap whose grid divides evenly onto the token grid.
fn pick_alignment_tap(
    grids: &[(usize, usize, usize)],
    nh: usize,
    nw: usize,
) -> Result<usize> {
    grids
        .iter()
        .rposition(|&(gh, gw, _)| gh >= nh && gw >= nw && gh % nh == 0 && gw % nw == 0)
        .ok_or_else(|| {
            CoreError::ShapeMismatch(format!(
                "no teacher tap divides onto token grid {nh}x{nw}"
            ))
        })
}

/// Feature width of the tap [`repa_teacher_targets`] would select for h×w
/// frames pooled onto an (nh, nw) token grid — the alignment projector's
/// output dimension.
pub fn repa_target_dim<T: Real>(
    teacher: &FrozenTeacher<T>,
    h: usize,
    w: usize,
    nh: usize,
    nw: usize,
) -> Result<usize> {
    let plan = teacher.plan(h, w);
    let probe = tap_candidates(teacher, &plan, h, w);
    let tap_idx = pick_alignment_tap(&probe, nh, nw)?;
    Ok(probe[tap_idx].2)
}

/// Teacher targets for representation alignment: per-frame features are
/// spatially average-pooled onto the decoder's (nh, nw) token grid using the
/// deepest compatible tap, then linearly interpolated across time onto the nt
/// token steps. Output is a constant [nt*nh*nw, d_t] sequence.
pub fn repa_teacher_targets<T: Real>(
    g: &mut Graph<T>,
    teacher: &FrozenTeacher<T>,
    x_true: Var,
    dims: (usize, usize, usize),
    token_grid: (usize, usize, usize),
) -> Result<Var> {
    let (t, h, w) = dims;
    let (nt, nh, nw) = token_grid;
    if g.value(x_true).rows() != t * h * w {
        return Err(CoreError::ShapeMismatch(format!(
            "repa targets expect {} pixel rows",
            t * h * w
        )));
    }
    let plan = teacher.plan(h, w);
    let probe = tap_candidates(teacher, &plan, h, w);
    let tap_idx = pick_alignment_tap(&probe, nh, nw)?;
    let (gh, gw, _gc) = probe[tap_idx];
    let (fh, fw) = (gh / nh, gw / nw);
    // Pooling matrix [nh*nw, gh*gw], each row averaging an fh×fw block.
    let mut pool = vec![T::ZERO; nh * nw * gh * gw];
    let inv = T::from_f64(1.0 / (fh * fw) as f64);
    for oy in 0..nh {
        for ox in 0..nw {
            let row = oy * nw + ox;
            for dy in 0..fh {
                for dx in 0..fw {
                    let src = (oy * fh + dy) * gw + (ox * fw + dx);
                    pool[row * gh * gw + src] = inv;
                }
            }
        }
    }
    let pool = g.constant(Tensor::new(vec![nh * nw, gh * gw], pool));

    let mut frame_feats = Vec::with_capacity(t);
    for f in 0..t {
        let fr = g.slice_rows(x_true, f * h * w, (f + 1) * h * w);
        let fr = g.detach(fr);
        let taps = teacher.frame_features(g, fr, &plan);
        let (feat, _) = taps[tap_idx];
        frame_feats.push(g.matmul(pool, feat));
    }
    // Linear interpolation from t frames onto nt token steps.
    let mut steps = Vec::with_capacity(nt);
    for i in 0..nt {
        let p = ((i as f64 + 0.5) * t as f64 / nt as f64 - 0.5).clamp(0.0, (t - 1) as f64);
        let k = p.floor() as usize;
        let a = p - k as f64;
        if a == 0.0 {
            steps.push(frame_feats[k]);
        } else {
            let k1 = (k + 1).min(t - 1);
            let lo = g.scale(frame_feats[k], T::from_f64(1.0 - a));
            let hi = g.scale(frame_feats[k1], T::from_f64(a));
            steps.push(g.add(lo, hi));
        }
    }
    let refs: Vec<Var> = steps;
    Ok(g.concat_rows_all(&refs))
}

/// Mean over positions of (1 − cos) between affinely projected decoder
/// features and teacher targets.
pub fn repa_loss<T: Real>(
    g: &mut Graph<T>,
    params: &Params<T>,
    decoder_features: Var,
    teacher_features: Var,
    projector: &Linear,
    frozen_projector: bool,
) -> Result<Var> {
    let proj = projector.apply(g, params, decoder_features, frozen_projector);
    let (ps, ts) = (
        g.value(proj).shape().to_vec(),
        g.value(teacher_features).shape().to_vec(),
    );
    if ps != ts {
        return Err(CoreError::ShapeMismatch(format!(
            "projected features {ps:?} vs teacher {ts:?}"
        )));
    }
    let tgt = g.detach(teacher_features);
    let prod = g.mul(proj, tgt);
    let dots = g.row_sum(prod);
    let np = row_norm_eps(g, proj);
    let ntg = row_norm_eps(g, tgt);
    let denom = g.mul(np, ntg);
    let cos = g.div(dots, denom);
    let mc = g.mean_all(cos);
    let neg = g.neg(mc);
    Ok(g.add_const(neg, T::ONE))
}

// ---- self alignment ----

/// A: mean over 1D rows of the best (1 − cos) against any structural row.
/// B: mean over 1D rows of (1 − cos) against the nearest *other* 1D row.
/// Gradients flow to the 1D side only for A; the structural side is detached.
pub fn self_align_loss<T: Real>(g: &mut Graph<T>, oned: Var, structural: Var) -> Result<Var> {
    let l = g.value(oned).rows();
    let s = g.value(structural).rows();
    if l == 0 || s == 0 {
        return Err(CoreError::InvalidArgument(
            "self_align_loss needs at least one row on each side".into(),
        ));
    }
    if g.value(oned).cols() != g.value(structural).cols() {
        return Err(CoreError::ShapeMismatch(format!(
            "latent channel mismatch {} vs {}",
            g.value(oned).cols(),
            g.value(structural).cols()
        )));
    }
    let sd = g.detach(structural);
    let n_o = row_norm_eps(g, oned);
    let n_s = row_norm_eps(g, sd);
    let dots = g.matmul_nt(oned, sd);
    let outer = g.matmul_nt(n_o, n_s);
    let cos_os = g.div(dots, outer);
    let best = g.row_max(cos_os);
    let best = g.neg(best);
    let best = g.add_const(best, T::ONE);
    let a = g.mean_all(best);
    if l < 2 {
        return Ok(a);
    }
    let dots_oo = g.matmul_nt(oned, oned);
    let outer_oo = g.matmul_nt(n_o, n_o);
    let cos_oo = g.div(dots_oo, outer_oo);
    // Push the diagonal below any reachable cosine so row_max skips self.
    let mut diag = vec![T::ZERO; l * l];
    for i in 0..l {
        diag[i * l + i] = T::from_f64(-4.0);
    }
    let mask = g.constant(Tensor::new(vec![l, l], diag));
    let masked = g.add(cos_oo, mask);
    let nn_best = g.row_max(masked);
    let nn_best = g.neg(nn_best);
    let nn_best = g.add_const(nn_best, T::ONE);
    let b = g.mean_all(nn_best);
    Ok(g.add(a, b))
}

// ---- composite ----

/// λ1·diffusion + λ2·perceptual + λ3·kl + λ4·repa (+ l_align·align when the
/// alignment term is active).
pub fn composite_loss<T: Real>(g: &mut Graph<T>, parts: &LossParts, w: &LossWeights) -> Var {
    let d = g.scale(parts.diffusion, T::from_f64(w.l1));
    let p = g.scale(parts.perceptual, T::from_f64(w.l2));
    let k = g.scale(parts.kl, T::from_f64(w.l3));
    let r = g.scale(parts.repa, T::from_f64(w.l4));
    let mut total = g.add(d, p);
    total = g.add(total, k);
    total = g.add(total, r);
    if let Some(al) = parts.align {
        let al = g.scale(al, T::from_f64(w.l_align));
        total = g.add(total, al);
    }
    total
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::fdcheck::central_diff;
    use crate::nn::Init;

    fn rand_t(shape: Vec<usize>, rng: &mut SeedRng) -> Tensor<f64> {
        let n = shape.iter().product();
        Tensor::new(shape, (0..n).map(|_| rng.normal()).collect())
    }

    #[test]
    fn diffusion_loss_examples() {
        let mut rng = SeedRng::from_seed(3);
        let x0 = rand_t(vec![6, 3], &mut rng);
        let x1 = rand_t(vec![6, 3], &mut rng);
        let mut g = Graph::<f64>::new();
        let v0 = g.constant(x0.clone());
        let v1 = g.constant(x1.clone());
        // Exact prediction.
        let exact = g.sub(v1, v0);
        let l = diffusion_loss(&mut g, exact, v0, v1).unwrap();
        assert!(g.value(l).item() < 1e-30);
        // Constant offset c adds c².
        let c = 0.37;
        let off = g.add_const(exact, c);
        let l = diffusion_loss(&mut g, off, v0, v1).unwrap();
        assert!((g.value(l).item() - c * c).abs() < 1e-12);
        // Zero prediction from zero x0: mean square of x1.
        let z = g.constant(Tensor::zeros(vec![6, 3]));
        let l = diffusion_loss(&mut g, z, z, v1).unwrap();
        let m: f64 = x1.data().iter().map(|v| v * v).sum::<f64>() / 18.0;
        assert!((g.value(l).item() - m).abs() < 1e-12);
        // Shape mismatch errors.
        let bad = g.constant(Tensor::zeros(vec![2, 3]));
        assert!(diffusion_loss(&mut g, bad, v0, v1).is_err());
    }

    #[test]
    fn kl_closed_forms() {
        let mut g = Graph::<f64>::new();
        let cases = [
            (0.0, 0.0, 0.0),
            (1.0, 0.0, 0.5),
            (0.0, 1.0, 0.5 * (std::f64::consts::E - 2.0)),
        ];
        for (mu, lv, want) in cases {
            let m = g.constant(Tensor::full(vec![4, 2], mu));
            let v = g.constant(Tensor::full(vec![4, 2], lv));
            let k = kl_loss(&mut g, m, v);
            assert!(
                (g.value(k).item() - want).abs() < 1e-12,
                "mu={mu} lv={lv}: {} vs {want}",
                g.value(k).item()
            );
        }
    }

    #[test]
    fn kl_is_convex_in_mean_and_variance() {
        let mut rng = SeedRng::from_seed(11);
        let eval = |mu: f64, var: f64| {
            let mut g = Graph::<f64>::new();
            let m = g.constant(Tensor::full(vec![1, 1], mu));
            let v = g.constant(Tensor::full(vec![1, 1], var.ln()));
            let k = kl_loss(&mut g, m, v);
            g.value(k).item()
        };
        for _ in 0..50 {
            let (m1, v1) = (rng.normal() * 2.0, rng.uniform_range(0.05, 4.0));
            let (m2, v2) = (rng.normal() * 2.0, rng.uniform_range(0.05, 4.0));
            let mid = eval(0.5 * (m1 + m2), 0.5 * (v1 + v2));
            let avg = 0.5 * (eval(m1, v1) + eval(m2, v2));
            assert!(mid <= avg + 1e-12, "midpoint {mid} > average {avg}");
        }
    }

    #[test]
    fn kl_all_weights_by_element_count() {
        let mut g = Graph::<f64>::new();
        let m1 = g.constant(Tensor::full(vec![1, 3], 1.0));
        let v1 = g.constant(Tensor::zeros(vec![1, 3]));
        let m2 = g.constant(Tensor::zeros(vec![9, 1]));
        let v2 = g.constant(Tensor::zeros(vec![9, 1]));
        let k = kl_loss_all(&mut g, &[(m1, v1), (m2, v2)]);
        // 3 elements at 0.5 plus 9 at 0 → 3·0.5/12.
        assert!((g.value(k).item() - 0.125).abs() < 1e-12);
    }

    #[test]
    fn perceptual_zero_at_exact_match_and_deterministic() {
        let mut rng = SeedRng::from_seed(5);
        let dims = (2usize, 8usize, 8usize);
        let x = rand_t(vec![dims.0 * dims.1 * dims.2, 3], &mut rng);
        for teacher in [
            FrozenTeacher::<f64>::random_conv_stack(42),
            FrozenTeacher::<f64>::identity(),
        ] {
            let mut g = Graph::<f64>::new();
            let a = g.constant(x.clone());
            let l = perceptual_loss(&mut g, a, a, dims, &teacher).unwrap();
            assert_eq!(g.value(l).item(), 0.0);
        }
        // Frozen determinism: same seed, same loss bits.
        let y = rand_t(vec![dims.0 * dims.1 * dims.2, 3], &mut rng);
        let run = |seed: u64| {
            let teacher = FrozenTeacher::<f64>::random_conv_stack(seed);
            let mut g = Graph::<f64>::new();
            let a = g.constant(x.clone());
            let b = g.constant(y.clone());
            let l = perceptual_loss(&mut g, a, b, dims, &teacher).unwrap();
            g.value(l).item()
        };
        assert_eq!(run(42).to_bits(), run(42).to_bits());
        assert_ne!(run(42).to_bits(), run(43).to_bits());
    }

    #[test]
    fn identity_teacher_reduces_to_pixel_mse() {
        let mut rng = SeedRng::from_seed(6);
        let dims = (3usize, 4usize, 4usize);
        let x = rand_t(vec![48, 3], &mut rng);
        let y = rand_t(vec![48, 3], &mut rng);
        let teacher = FrozenTeacher::<f64>::identity();
        let mut g = Graph::<f64>::new();
        let a = g.constant(x);
        let b = g.constant(y);
        let l = perceptual_loss(&mut g, a, b, dims, &teacher).unwrap();
        let m = g.mse(a, b);
        assert!((g.value(l).item() - g.value(m).item()).abs() < 1e-12);
    }

    #[test]
    fn perceptual_gradient_matches_finite_differences() {
        let mut rng = SeedRng::from_seed(7);
        let dims = (1usize, 6usize, 6usize);
        let xp = rand_t(vec![36, 3], &mut rng);
        let xt = rand_t(vec![36, 3], &mut rng);
        let teacher = FrozenTeacher::<f64>::random_conv_stack(9);
        let run = |xpt: &Tensor<f64>| {
            let mut g = Graph::<f64>::new();
            let a = g.leaf(xpt.clone());
            let b = g.constant(xt.clone());
            let l = perceptual_loss(&mut g, a, b, dims, &teacher).unwrap();
            (g, a, l)
        };
        let (mut g, a, l) = run(&xp);
        let grads = g.backward(l);
        let ga = grads.get(a).unwrap().clone();
        for idx in [0usize, 17, 50, 107] {
            let numeric = central_diff(&xp, idx, 1e-6, |t| {
                let (g2, _, l2) = run(t);
                g2.value(l2).item()
            });
            let analytic = ga.data()[idx];
            let denom = analytic.abs().max(numeric.abs()).max(1e-10);
            assert!(
                (analytic - numeric).abs() / denom < 1e-6,
                "idx {idx}: {analytic} vs {numeric}"
            );
        }
    }

    #[test]
    fn repa_loss_extreme_cosines() {
        let mut params = Params::<f64>::new();
        let mut rng = SeedRng::from_seed(8);
        // Identity projector: weights = I, bias 0.
        let proj = Linear::init(&mut params, "proj", 3, 3, true, Init::Zero, &mut rng);
        let id_w = Tensor::new(
            vec![3, 3],
            vec![1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0],
        );
        params.set(params.id_of("proj.w").unwrap(), id_w);
        let df = Tensor::new(vec![2, 3], vec![1.0, 0.0, 0.0, 0.0, 2.0, 0.0]);
        let cases: [(Vec<f64>, f64); 3] = [
            (vec![3.0, 0.0, 0.0, 0.0, 0.5, 0.0], 0.0),
            (vec![0.0, 0.0, 1.0, 1.0, 0.0, 0.0], 1.0),
            (vec![-1.0, 0.0, 0.0, 0.0, -2.0, 0.0], 2.0),
        ];
        for (tf, want) in cases {
            let mut g = Graph::<f64>::new();
            let d = g.constant(df.clone());
            let t = g.constant(Tensor::new(vec![2, 3], tf));
            let l = repa_loss(&mut g, &params, d, t, &proj, true).unwrap();
            assert!(
                (g.value(l).item() - want).abs() < 1e-6,
                "{} vs {want}",
                g.value(l).item()
            );
        }
    }

    #[test]
    fn repa_targets_match_pooled_frames_when_grids_align() {
        // 4 frames of 8x8; token grid (4, 2, 2) → tap with 2x2 grid, α = 0.
        let mut rng = SeedRng::from_seed(9);
        let dims = (4usize, 8usize, 8usize);
        let x = rand_t(vec![dims.0 * 64, 3], &mut rng);
        let teacher = FrozenTeacher::<f64>::random_conv_stack(12);
        let mut g = Graph::<f64>::new();
        let xv = g.constant(x.clone());
        let tgt = repa_teacher_targets(&mut g, &teacher, xv, dims, (4, 2, 2)).unwrap();
        // Taps on 8x8 frames sit at 4x4, 2x2, 1x1; the deepest one matching
        // the 2x2 token grid is tap 1 with 16 channels.
        assert_eq!(g.value(tgt).shape(), &[4 * 2 * 2, 16]);
        // Frame 2's block: equals its own pooled tap (no temporal blending).
        let plan = teacher.plan(8, 8);
        let fr = g.slice_rows(xv, 2 * 64, 3 * 64);
        let taps = teacher.frame_features(&mut g, fr, &plan);
        let (deep, (gh, gw, _)) = taps[1];
        assert_eq!((gh, gw), (2, 2));
        let got = &g.value(tgt).data()[2 * 4 * 16..3 * 4 * 16];
        assert_eq!(got, g.value(deep).data());
    }

    #[test]
    fn self_align_examples() {
        // Copies with duplicate pairs → exactly 0.
        let s = Tensor::new(vec![2, 3], vec![1.0, 2.0, 0.5, -1.0, 0.0, 2.0]);
        let mut o_data = Vec::new();
        for r in [0usize, 0, 1, 1] {
            o_data.extend_from_slice(&s.data()[r * 3..(r + 1) * 3]);
        }
        let o = Tensor::new(vec![4, 3], o_data);
        let mut g = Graph::<f64>::new();
        let sv = g.constant(s);
        let ov = g.constant(o);
        // The ε norm guard keeps perfect cosines a hair under 1.
        let l = self_align_loss(&mut g, ov, sv).unwrap();
        assert!(g.value(l).item().abs() < 1e-7, "{}", g.value(l).item());

        // Mutually orthogonal rows, orthogonal to structural → A = B = 1.
        let mut e = vec![0.0; 3 * 8];
        e[0] = 1.0;
        e[8 + 1] = 1.0;
        e[16 + 2] = 1.0;
        let o = Tensor::new(vec![3, 8], e);
        let mut st = vec![0.0; 2 * 8];
        st[3] = 1.0;
        st[8 + 4] = 1.0;
        let s = Tensor::new(vec![2, 8], st);
        let mut g = Graph::<f64>::new();
        let sv = g.constant(s);
        let ov = g.constant(o);
        let l = self_align_loss(&mut g, ov, sv).unwrap();
        assert!((g.value(l).item() - 2.0).abs() < 1e-6, "{}", g.value(l).item());
    }

    #[test]
    fn self_align_matches_brute_force_oracle() {
        let mut rng = SeedRng::from_seed(10);
        let o = rand_t(vec![5, 4], &mut rng);
        let s = rand_t(vec![3, 4], &mut rng);
        let cos = |a: &[f64], b: &[f64]| {
            let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
            let na: f64 = (a.iter().map(|x| x * x).sum::<f64>() + COSINE_EPS).sqrt();
            let nb: f64 = (b.iter().map(|x| x * x).sum::<f64>() + COSINE_EPS).sqrt();
            dot / (na * nb)
        };
        fn row(t: &Tensor<f64>, i: usize) -> &[f64] {
            &t.data()[i * 4..(i + 1) * 4]
        }
        let mut a_sum = 0.0;
        let mut b_sum = 0.0;
        for i in 0..5 {
            let mut best = f64::NEG_INFINITY;
            for j in 0..3 {
                best = best.max(cos(row(&o, i), row(&s, j)));
            }
            a_sum += 1.0 - best;
            let mut nn = f64::NEG_INFINITY;
            for k in 0..5 {
                if k != i {
                    nn = nn.max(cos(row(&o, i), row(&o, k)));
                }
            }
            b_sum += 1.0 - nn;
        }
        let want = a_sum / 5.0 + b_sum / 5.0;
        let mut g = Graph::<f64>::new();
        let sv = g.constant(s);
        let ov = g.constant(o);
        let l = self_align_loss(&mut g, ov, sv).unwrap();
        assert!(
            (g.value(l).item() - want).abs() < 1e-12,
            "{} vs {want}",
            g.value(l).item()
        );
    }

    #[test]
    fn self_align_grads_reach_only_the_oned_side() {
        let mut rng = SeedRng::from_seed(12);
        let o = rand_t(vec![4, 3], &mut rng);
        let s = rand_t(vec![2, 3], &mut rng);
        let mut g = Graph::<f64>::new();
        let ov = g.leaf(o.clone());
        let sv = g.leaf(s.clone());
        let l = self_align_loss(&mut g, ov, sv).unwrap();
        let grads = g.backward(l);
        assert!(grads.get(sv).is_none(), "structural side must be detached");
        let go = grads.get(ov).unwrap().clone();
        assert!(go.data().iter().any(|v| v.abs() > 1e-12));
        // Finite differences against the subgradient.
        for idx in [0usize, 5, 11] {
            let numeric = central_diff(&o, idx, 1e-7, |t| {
                let mut g2 = Graph::<f64>::new();
                let ov2 = g2.constant(t.clone());
                let sv2 = g2.constant(s.clone());
                let l2 = self_align_loss(&mut g2, ov2, sv2).unwrap();
                g2.value(l2).item()
            });
            let analytic = go.data()[idx];
            let denom = analytic.abs().max(numeric.abs()).max(1e-10);
            assert!(
                (analytic - numeric).abs() / denom < 1e-5,
                "idx {idx}: {analytic} vs {numeric}"
            );
        }
    }

    #[test]
    fn composite_weighting() {
        let w = LossWeights::default();
        w.validate().unwrap();
        let mut g = Graph::<f64>::new();
        let zero = g.constant(Tensor::scalar(0.0));
        let parts = LossParts {
            diffusion: zero,
            perceptual: zero,
            kl: zero,
            repa: zero,
            align: None,
        };
        let total = composite_loss(&mut g, &parts, &w);
        assert_eq!(g.value(total).item(), 0.0);

        let one = g.constant(Tensor::scalar(1.0));
        let parts = LossParts {
            diffusion: one,
            perceptual: one,
            kl: one,
            repa: one,
            align: None,
        };
        let total = composite_loss(&mut g, &parts, &w);
        assert!((g.value(total).item() - 10.2001).abs() < 1e-12);

        let two = g.constant(Tensor::scalar(2.0));
        let parts = LossParts {
            diffusion: one,
            perceptual: one,
            kl: one,
            repa: one,
            align: Some(two),
        };
        let total = composite_loss(&mut g, &parts, &w);
        assert!((g.value(total).item() - 10.2201).abs() < 1e-12);
    }

    #[test]
    fn clean_estimate_inverts_interpolation() {
        let mut rng = SeedRng::from_seed(13);
        let x0 = rand_t(vec![5, 3], &mut rng);
        let x1 = rand_t(vec![5, 3], &mut rng);
        let t = 0.73;
        let mut g = Graph::<f64>::new();
        let v0 = g.constant(x0.clone());
        let v1 = g.constant(x1.clone());
        // x_t = (1−t)x0 + t·x1 and v = x1−x0 → x̂0 = x_t − t·v = x0.
        let a = g.scale(v0, 1.0 - t);
        let b = g.scale(v1, t);
        let xt = g.add(a, b);
        let v = g.sub(v1, v0);
        let x0_hat = clean_estimate(&mut g, xt, v, t);
        for (got, want) in g.value(x0_hat).data().iter().zip(x0.data()) {
            assert!((got - want).abs() < 1e-12);
        }
    }
}
