//! Reconstruction and generation metrics: PSNR, SSIM, Fréchet distance over
//! fitted Gaussians, a set-level video distance on frozen random 3D conv
//! features, and latent channel statistics.
//!
//! The video distance keeps the Fréchet machinery of the usual benchmark but
//! embeds clips with a seeded random network, so absolute values are only
//! comparable within this codebase.

use crate::encoder::HybridLatent;
use crate::error::{CoreError, Result};
use crate::rng::SeedRng;
use crate::synthdata::VideoClip;
use crate::tensor::{Real, Tensor};

/// Peak-to-peak signal range of normalized [-1, 1] video.
pub const PSNR_PEAK: f64 = 2.0;
/// Reported PSNR when the inputs are identical (MSE = 0).
pub const PSNR_CAP: f64 = 99.0;
/// Side of the uniform SSIM window.
pub const SSIM_WINDOW: usize = 7;
/// Unconditional diagonal shrinkage applied to fitted covariances.
pub const COV_SHRINKAGE: f64 = 1e-4;
/// Eigenvalues of a nominally-PSD matrix below this are an error.
pub const PSD_TOLERANCE: f64 = -1e-6;

// ---- PSNR ----

pub fn psnr(a: &Tensor<f64>, b: &Tensor<f64>) -> Result<f64> {
    if a.shape() != b.shape() {
        return Err(CoreError::ShapeMismatch(format!(
            "psnr shapes {:?} vs {:?}",
            a.shape(),
            b.shape()
        )));
    }
    let n = a.numel() as f64;
    let mse: f64 = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        / n;
    if mse == 0.0 {
        return Ok(PSNR_CAP);
    }
    Ok((10.0 * (PSNR_PEAK * PSNR_PEAK / mse).log10()).min(PSNR_CAP))
}

// ---- SSIM ----

/// Mean SSIM over all valid 7×7 windows, channels, and frames of a pair of
/// [T*H*W, 3] videos on the [-1, 1] range.
pub fn ssim(a: &Tensor<f64>, b: &Tensor<f64>, dims: (usize, usize, usize)) -> Result<f64> {
    let (t, h, w) = dims;
    if a.shape() != b.shape() || a.numel() != t * h * w * 3 {
        return Err(CoreError::ShapeMismatch(format!(
            "ssim expects matching [{t}*{h}*{w}, 3] videos"
        )));
    }
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(CoreError::InvalidArgument(format!(
            "ssim needs frames of at least {SSIM_WINDOW}x{SSIM_WINDOW}"
        )));
    }
    let c1 = (0.01 * PSNR_PEAK) * (0.01 * PSNR_PEAK);
    let c2 = (0.03 * PSNR_PEAK) * (0.03 * PSNR_PEAK);
    let mut total = 0.0;
    for f in 0..t {
        let mut frame_sum = 0.0;
        let mut frame_cnt = 0usize;
        for ch in 0..3 {
            // Integral images over x, y, x², y², xy for O(1) window sums.
            let at = |yy: usize, xx: usize, buf: &Tensor<f64>| {
                buf.data()[((f * h + yy) * w + xx) * 3 + ch]
            };
            let iw = w + 1;
            let mut ix = vec![0.0; (h + 1) * iw];
            let mut iy = vec![0.0; (h + 1) * iw];
            let mut ixx = vec![0.0; (h + 1) * iw];
            let mut iyy = vec![0.0; (h + 1) * iw];
            let mut ixy = vec![0.0; (h + 1) * iw];
            for yy in 0..h {
                for xx in 0..w {
                    let (va, vb) = (at(yy, xx, a), at(yy, xx, b));
                    let i = (yy + 1) * iw + (xx + 1);
                    let up = yy * iw + (xx + 1);
                    let left = (yy + 1) * iw + xx;
                    let diag = yy * iw + xx;
                    ix[i] = va + ix[up] + ix[left] - ix[diag];
                    iy[i] = vb + iy[up] + iy[left] - iy[diag];
                    ixx[i] = va * va + ixx[up] + ixx[left] - ixx[diag];
                    iyy[i] = vb * vb + iyy[up] + iyy[left] - iyy[diag];
                    ixy[i] = va * vb + ixy[up] + ixy[left] - ixy[diag];
                }
            }
            let win = |tab: &[f64], y0: usize, x0: usize| {
                let (y1, x1) = (y0 + SSIM_WINDOW, x0 + SSIM_WINDOW);
                tab[y1 * iw + x1] - tab[y0 * iw + x1] - tab[y1 * iw + x0] + tab[y0 * iw + x0]
            };
            let npix = (SSIM_WINDOW * SSIM_WINDOW) as f64;
            for y0 in 0..=h - SSIM_WINDOW {
                for x0 in 0..=w - SSIM_WINDOW {
                    let sx = win(&ix, y0, x0);
                    let sy = win(&iy, y0, x0);
                    let sxx = win(&ixx, y0, x0);
                    let syy = win(&iyy, y0, x0);
                    let sxy = win(&ixy, y0, x0);
                    let mx = sx / npix;
                    let my = sy / npix;
                    let vx = (sxx / npix - mx * mx).max(0.0);
                    let vy = (syy / npix - my * my).max(0.0);
                    let cov = sxy / npix - mx * my;
                    let s = ((2.0 * mx * my + c1) * (2.0 * cov + c2))
                        / ((mx * mx + my * my + c1) * (vx + vy + c2));
                    frame_sum += s;
                    frame_cnt += 1;
                }
            }
        }
        total += frame_sum / frame_cnt as f64;
    }
    Ok(total / t as f64)
}

// ---- Fréchet distance ----

/// Mean and covariance of a feature set.
#[derive(Clone, Debug)]
pub struct GaussianMoments {
    pub mean: Vec<f64>,
    pub cov: Tensor<f64>,
}

impl GaussianMoments {
    /// Fit from [n, d] feature rows with the unbiased covariance estimate.
    /// A single row yields a zero covariance.
    pub fn fit(features: &Tensor<f64>) -> Result<Self> {
        let (n, d) = (features.rows(), features.cols());
        if n == 0 {
            return Err(CoreError::InvalidArgument("empty feature set".into()));
        }
        let mut mean = vec![0.0; d];
        for r in 0..n {
            for c in 0..d {
                mean[c] += features.data()[r * d + c];
            }
        }
        for m in &mut mean {
            *m /= n as f64;
        }
        let mut cov = vec![0.0; d * d];
        if n > 1 {
            for r in 0..n {
                let row = &features.data()[r * d..(r + 1) * d];
                for i in 0..d {
                    let di = row[i] - mean[i];
                    for j in i..d {
                        cov[i * d + j] += di * (row[j] - mean[j]);
                    }
                }
            }
            for i in 0..d {
                for j in i..d {
                    let v = cov[i * d + j] / (n - 1) as f64;
                    cov[i * d + j] = v;
                    cov[j * d + i] = v;
                }
            }
        }
        Ok(GaussianMoments {
            mean,
            cov: Tensor::new(vec![d, d], cov),
        })
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    /// Add `lam` to the diagonal.
    pub fn shrink(&mut self, lam: f64) {
        let d = self.dim();
        let buf = self.cov.make_mut();
        for i in 0..d {
            buf[i * d + i] += lam;
        }
    }

    fn check_symmetric(&self) -> Result<()> {
        let d = self.dim();
        for i in 0..d {
            for j in i + 1..d {
                if (self.cov.data()[i * d + j] - self.cov.data()[j * d + i]).abs() > 1e-8 {
                    return Err(CoreError::InvalidArgument(
                        "covariance not symmetric within 1e-8".into(),
                    ));
                }
            }
        }
        Ok(())
    }
}

/// Eigendecomposition of a symmetric matrix by cyclic Jacobi rotations.
/// Returns eigenvalues and the orthonormal eigenvector columns.
pub fn jacobi_eigh(a: &Tensor<f64>) -> (Vec<f64>, Tensor<f64>) {
    let d = a.rows();
    assert_eq!(a.cols(), d, "jacobi_eigh needs a square matrix");
    let mut m = a.data().to_vec();
    let mut v = vec![0.0; d * d];
    for i in 0..d {
        v[i * d + i] = 1.0;
    }
    let scale: f64 = m
        .iter()
        .fold(0.0f64, |s, &x| s.max(x.abs()))
        .max(f64::MIN_POSITIVE);
    for _sweep in 0..64 {
        let mut off = 0.0f64;
        for p in 0..d {
            for q in p + 1..d {
                off = off.max(m[p * d + q].abs());
            }
        }
        if off <= 1e-14 * scale {
            break;
        }
        for p in 0..d {
            for q in p + 1..d {
                let apq = m[p * d + q];
                if apq.abs() <= 1e-300 {
                    continue;
                }
                let app = m[p * d + p];
                let aqq = m[q * d + q];
                let theta = (aqq - app) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..d {
                    let mkp = m[k * d + p];
                    let mkq = m[k * d + q];
                    m[k * d + p] = c * mkp - s * mkq;
                    m[k * d + q] = s * mkp + c * mkq;
                }
                for k in 0..d {
                    let mpk = m[p * d + k];
                    let mqk = m[q * d + k];
                    m[p * d + k] = c * mpk - s * mqk;
                    m[q * d + k] = s * mpk + c * mqk;
                }
                for k in 0..d {
                    let vkp = v[k * d + p];
                    let vkq = v[k * d + q];
                    v[k * d + p] = c * vkp - s * vkq;
                    v[k * d + q] = s * vkp + c * vkq;
                }
            }
        }
    }
    let eig = (0..d).map(|i| m[i * d + i]).collect();
    (eig, Tensor::new(vec![d, d], v))
}

/// Symmetric PSD square root via eigendecomposition; eigenvalues below the
/// PSD tolerance are an error, small negatives are clamped to zero.
fn sqrtm_psd(a: &Tensor<f64>) -> Result<Tensor<f64>> {
    let d = a.rows();
    let (eig, v) = jacobi_eigh(a);
    for &l in &eig {
        if l < PSD_TOLERANCE {
            return Err(CoreError::NotPsd(l));
        }
    }
    // V · diag(√λ) · Vᵀ
    let mut out = vec![0.0; d * d];
    for k in 0..d {
        let sl = eig[k].max(0.0).sqrt();
        if sl == 0.0 {
            continue;
        }
        for i in 0..d {
            let vik = v.data()[i * d + k] * sl;
            for j in 0..d {
                out[i * d + j] += vik * v.data()[j * d + k];
            }
        }
    }
    Ok(Tensor::new(vec![d, d], out))
}

/// ‖μ1−μ2‖² + Tr(Σ1 + Σ2 − 2·(Σ1Σ2)^{1/2}), the square root evaluated on the
/// symmetrized product √Σ1·Σ2·√Σ1.
pub fn frechet_distance(m1: &GaussianMoments, m2: &GaussianMoments) -> Result<f64> {
    if m1.dim() != m2.dim() {
        return Err(CoreError::ShapeMismatch(format!(
            "moment dims {} vs {}",
            m1.dim(),
            m2.dim()
        )));
    }
    m1.check_symmetric()?;
    m2.check_symmetric()?;
    let d = m1.dim();
    let mean_term: f64 = m1
        .mean
        .iter()
        .zip(&m2.mean)
        .map(|(a, b)| (a - b) * (a - b))
        .sum();
    let s1 = sqrtm_psd(&m1.cov)?;
    let inner = s1.matmul(&m2.cov).matmul(&s1);
    // Symmetrize away round-off before the eigen solve.
    let mut sym = inner.data().to_vec();
    for i in 0..d {
        for j in i + 1..d {
            let v = 0.5 * (sym[i * d + j] + sym[j * d + i]);
            sym[i * d + j] = v;
            sym[j * d + i] = v;
        }
    }
    let (eig, _) = jacobi_eigh(&Tensor::new(vec![d, d], sym));
    let mut tr_sqrt = 0.0;
    for l in eig {
        if l < PSD_TOLERANCE {
            return Err(CoreError::NotPsd(l));
        }
        tr_sqrt += l.max(0.0).sqrt();
    }
    let tr1: f64 = (0..d).map(|i| m1.cov.data()[i * d + i]).sum();
    let tr2: f64 = (0..d).map(|i| m2.cov.data()[i * d + i]).sum();
    Ok((mean_term + tr1 + tr2 - 2.0 * tr_sqrt).max(0.0))
}

// ---- frozen video embedding + set distance ----

struct Conv3d {
    w: Vec<f64>,
    b: Vec<f64>,
    c_in: usize,
    c_out: usize,
}

/// Frozen random 3D conv network embedding a clip into a fixed-length
/// feature vector by strided convolutions and global average pooling.
pub struct VideoEmbedNet {
    pub seed: u64,
    convs: Vec<Conv3d>,
}

pub const EMBED_DIM: usize = 64;
const EMBED_CHANNELS: [usize; 4] = [3, 16, 32, EMBED_DIM];

impl VideoEmbedNet {
    pub fn frozen(seed: u64) -> Self {
        let mut convs = Vec::new();
        for i in 0..3 {
            let (c_in, c_out) = (EMBED_CHANNELS[i], EMBED_CHANNELS[i + 1]);
            let mut rng = SeedRng::derive(seed, 0x766e_6574_0000 + i as u64);
            let fan_in = 27 * c_in;
            let sd = (1.0 / fan_in as f64).sqrt();
            let w = (0..fan_in * c_out).map(|_| rng.normal() * sd).collect();
            convs.push(Conv3d {
                w,
                b: vec![0.0; c_out],
                c_in,
                c_out,
            });
        }
        VideoEmbedNet { seed, convs }
    }

    pub fn out_dim(&self) -> usize {
        self.convs.last().map(|c| c.c_out).unwrap_or(3)
    }

    /// Embed a clip ([0,1] frames) into an `out_dim` feature vector.
    pub fn embed(&self, clip: &VideoClip) -> Vec<f64> {
        let (mut t, mut h, mut w) = (clip.t(), clip.h(), clip.w());
        // Channel-major rows [t*h*w, c] on the [-1, 1] range.
        let mut x: Vec<f64> = clip
            .frames
            .data()
            .iter()
            .map(|&v| v as f64 * 2.0 - 1.0)
            .collect();
        let mut c_in = 3usize;
        for conv in &self.convs {
            debug_assert_eq!(c_in, conv.c_in);
            let (to, ho, wo) = ((t - 1) / 2 + 1, (h - 1) / 2 + 1, (w - 1) / 2 + 1);
            let mut y = vec![0.0; to * ho * wo * conv.c_out];
            for ot in 0..to {
                for oy in 0..ho {
                    for ox in 0..wo {
                        let out_base = ((ot * ho + oy) * wo + ox) * conv.c_out;
                        let mut kidx = 0usize;
                        for dt in -1..=1isize {
                            for dy in -1..=1isize {
                                for dx in -1..=1isize {
                                    let st = (ot * 2) as isize + dt;
                                    let sy = (oy * 2) as isize + dy;
                                    let sx = (ox * 2) as isize + dx;
                                    if st >= 0
                                        && st < t as isize
                                        && sy >= 0
                                        && sy < h as isize
                                        && sx >= 0
                                        && sx < w as isize
                                    {
                                        let src = ((st as usize * h + sy as usize) * w
                                            + sx as usize)
                                            * c_in;
                                        for ci in 0..c_in {
                                            let xv = x[src + ci];
                                            if xv != 0.0 {
                                                let wrow =
                                                    &conv.w[(kidx + ci) * conv.c_out..][..conv.c_out];
                                                for (o, wv) in wrow.iter().enumerate() {
                                                    y[out_base + o] += xv * wv;
                                                }
                                            }
                                        }
                                    }
                                    kidx += c_in;
                                }
                            }
                        }
                        for (o, bv) in conv.b.iter().enumerate() {
                            let z = y[out_base + o] + bv;
                            // GELU (tanh form) keeps parity with the graph op.
                            let z3 = z * z * z;
                            y[out_base + o] = 0.5
                                * z
                                * (1.0 + (0.797_884_560_802_865_4 * (z + 0.044715 * z3)).tanh());
                        }
                    }
                }
            }
            x = y;
            t = to;
            h = ho;
            w = wo;
            c_in = conv.c_out;
        }
        // Global average pool over remaining voxels.
        let n = t * h * w;
        let mut out = vec![0.0; c_in];
        for v in 0..n {
            for c in 0..c_in {
                out[c] += x[v * c_in + c];
            }
        }
        for o in &mut out {
            *o /= n as f64;
        }
        out
    }
}

/// Fréchet distance between two clip sets embedded by the frozen network,
/// with unconditional covariance shrinkage.
pub fn toy_fvd(real: &[VideoClip], generated: &[VideoClip], net: &VideoEmbedNet) -> Result<f64> {
    if real.is_empty() || generated.is_empty() {
        return Err(CoreError::InvalidArgument(
            "toy_fvd needs non-empty clip sets".into(),
        ));
    }
    let embed_set = |clips: &[VideoClip]| -> Result<GaussianMoments> {
        let d = net.out_dim();
        let mut rows = Vec::with_capacity(clips.len() * d);
        for c in clips {
            rows.extend(net.embed(c));
        }
        let mut m = GaussianMoments::fit(&Tensor::new(vec![clips.len(), d], rows))?;
        m.shrink(COV_SHRINKAGE);
        Ok(m)
    };
    let m1 = embed_set(real)?;
    let m2 = embed_set(generated)?;
    frechet_distance(&m1, &m2)
}

// ---- latent channel statistics ----

/// Per-channel moments of the structural and 1D latent populations plus the
/// Pearson correlation between their per-channel std vectors.
#[derive(Clone, Debug)]
pub struct LatentChannelStats {
    pub struct_mean: Vec<f64>,
    pub struct_std: Vec<f64>,
    pub oned_mean: Vec<f64>,
    pub oned_std: Vec<f64>,
    pub std_correlation: f64,
}

/// Pearson correlation of two equal-length vectors.
pub fn pearson(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let mut num = 0.0;
    let mut va = 0.0;
    let mut vb = 0.0;
    for (x, y) in a.iter().zip(b) {
        num += (x - ma) * (y - mb);
        va += (x - ma) * (x - ma);
        vb += (y - mb) * (y - mb);
    }
    num / (va.sqrt() * vb.sqrt() + 1e-12)
}

/// Only valid 1D rows enter the statistics; dropped tail rows carry no
/// trained content.
pub fn latent_channel_stats<T: Real>(latents: &[HybridLatent<T>]) -> Result<LatentChannelStats> {
    if latents.is_empty() {
        return Err(CoreError::InvalidArgument("no latents given".into()));
    }
    let c = latents[0].channels();
    let mut s_acc = ChannelAcc::new(c);
    let mut q_acc = ChannelAcc::new(c);
    for l in latents {
        if l.channels() != c {
            return Err(CoreError::ShapeMismatch(format!(
                "latent channels {} vs {c}",
                l.channels()
            )));
        }
        let s_rows = l.structural_rows();
        for r in 0..s_rows.rows() {
            s_acc.push(&s_rows.data()[r * c..(r + 1) * c]);
        }
        for r in 0..l.valid_len {
            let row: Vec<f64> = l.oned.data()[r * c..(r + 1) * c]
                .iter()
                .map(|v| v.to_f64())
                .collect();
            q_acc.push_f64(&row);
        }
    }
    let (struct_mean, struct_std) = s_acc.finish()?;
    let (oned_mean, oned_std) = q_acc.finish()?;
    let std_correlation = pearson(&struct_std, &oned_std);
    Ok(LatentChannelStats {
        struct_mean,
        struct_std,
        oned_mean,
        oned_std,
        std_correlation,
    })
}

struct ChannelAcc {
    n: usize,
    sum: Vec<f64>,
    sum2: Vec<f64>,
}

impl ChannelAcc {
    fn new(c: usize) -> Self {
        ChannelAcc {
            n: 0,
            sum: vec![0.0; c],
            sum2: vec![0.0; c],
        }
    }

    fn push<T: Real>(&mut self, row: &[T]) {
        self.n += 1;
        for (i, v) in row.iter().enumerate() {
            let x = v.to_f64();
            self.sum[i] += x;
            self.sum2[i] += x * x;
        }
    }

    fn push_f64(&mut self, row: &[f64]) {
        self.n += 1;
        for (i, &x) in row.iter().enumerate() {
            self.sum[i] += x;
            self.sum2[i] += x * x;
        }
    }

    fn finish(self) -> Result<(Vec<f64>, Vec<f64>)> {
        if self.n == 0 {
            return Err(CoreError::InvalidArgument(
                "no rows accumulated for channel stats".into(),
            ));
        }
        let n = self.n as f64;
        let mean: Vec<f64> = self.sum.iter().map(|s| s / n).collect();
        let std = self
            .sum2
            .iter()
            .zip(&mean)
            .map(|(s2, m)| (s2 / n - m * m).max(0.0).sqrt())
            .collect();
        Ok((mean, std))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoder::LatentMeta;
    use crate::synthdata::ClipSpec;

    fn rand_t(shape: Vec<usize>, rng: &mut SeedRng) -> Tensor<f64> {
        let n = shape.iter().product();
        Tensor::new(shape, (0..n).map(|_| rng.normal()).collect())
    }

    #[test]
    fn psnr_closed_forms() {
        let a = Tensor::full(vec![8, 3], -0.4);
        assert_eq!(psnr(&a, &a).unwrap(), PSNR_CAP);
        // MSE = peak² → 0 dB.
        let lo = Tensor::full(vec![8, 3], -1.0);
        let hi = Tensor::full(vec![8, 3], 1.0);
        assert!((psnr(&lo, &hi).unwrap() - 0.0).abs() < 1e-12);
        // Constant offset 0.2 → 20 dB.
        let b = Tensor::full(vec![8, 3], -0.2);
        assert!((psnr(&a, &b).unwrap() - 20.0).abs() < 1e-12);
    }

    #[test]
    fn psnr_decreases_with_noise_level() {
        let mut rng = SeedRng::from_seed(21);
        let x = rand_t(vec![300, 3], &mut rng);
        let mut prev = f64::INFINITY;
        for sigma in [0.01, 0.05, 0.1, 0.2] {
            let noisy = Tensor::new(
                vec![300, 3],
                x.data().iter().map(|v| v + rng.normal() * sigma).collect(),
            );
            let p = psnr(&x, &noisy).unwrap();
            assert!(p < prev, "psnr {p} not below {prev} at sigma {sigma}");
            prev = p;
        }
    }

    #[test]
    fn ssim_identity_and_sign() {
        let mut rng = SeedRng::from_seed(22);
        let dims = (2usize, 10usize, 10usize);
        let x = rand_t(vec![200, 3], &mut rng);
        assert!((ssim(&x, &x, dims).unwrap() - 1.0).abs() < 1e-12);
        let a = Tensor::full(vec![200, 3], 0.5);
        let b = Tensor::full(vec![200, 3], -0.5);
        assert!(ssim(&a, &b, dims).unwrap() < 0.0);
    }

    #[test]
    fn ssim_matches_naive_sliding_window() {
        let mut rng = SeedRng::from_seed(23);
        let (t, h, w) = (2usize, 12usize, 9usize);
        let a = rand_t(vec![t * h * w, 3], &mut rng);
        let b = rand_t(vec![t * h * w, 3], &mut rng);
        let got = ssim(&a, &b, (t, h, w)).unwrap();

        // Naive reference: direct double loop per window.
        let c1 = (0.01f64 * PSNR_PEAK).powi(2);
        let c2 = (0.03f64 * PSNR_PEAK).powi(2);
        let mut total = 0.0;
        for f in 0..t {
            let mut fsum = 0.0;
            let mut fcnt = 0usize;
            for ch in 0..3 {
                for y0 in 0..=h - 7 {
                    for x0 in 0..=w - 7 {
                        let mut xs = Vec::new();
                        let mut ys = Vec::new();
                        for yy in y0..y0 + 7 {
                            for xx in x0..x0 + 7 {
                                let i = ((f * h + yy) * w + xx) * 3 + ch;
                                xs.push(a.data()[i]);
                                ys.push(b.data()[i]);
                            }
                        }
                        let n = 49.0;
                        let mx = xs.iter().sum::<f64>() / n;
                        let my = ys.iter().sum::<f64>() / n;
                        let vx = xs.iter().map(|v| (v - mx) * (v - mx)).sum::<f64>() / n;
                        let vy = ys.iter().map(|v| (v - my) * (v - my)).sum::<f64>() / n;
                        let cov = xs
                            .iter()
                            .zip(&ys)
                            .map(|(p, q)| (p - mx) * (q - my))
                            .sum::<f64>()
                            / n;
                        fsum += ((2.0 * mx * my + c1) * (2.0 * cov + c2))
                            / ((mx * mx + my * my + c1) * (vx + vy + c2));
                        fcnt += 1;
                    }
                }
            }
            total += fsum / fcnt as f64;
        }
        let want = total / t as f64;
        assert!((got - want).abs() < 1e-10, "{got} vs {want}");
    }

    #[test]
    fn frechet_closed_forms() {
        let d = 4usize;
        let eye = {
            let mut m = vec![0.0; d * d];
            for i in 0..d {
                m[i * d + i] = 1.0;
            }
            Tensor::new(vec![d, d], m)
        };
        let m0 = GaussianMoments {
            mean: vec![0.0; d],
            cov: eye.clone(),
        };
        assert!(frechet_distance(&m0, &m0).unwrap() < 1e-6);
        // Equal identity covariances → squared mean distance.
        let m1 = GaussianMoments {
            mean: vec![1.0, -2.0, 0.5, 3.0],
            cov: eye.clone(),
        };
        let want: f64 = 1.0 + 4.0 + 0.25 + 9.0;
        assert!((frechet_distance(&m0, &m1).unwrap() - want).abs() < 1e-8);
        // Commuting diagonal case.
        let da = [0.5, 1.0, 2.0, 4.0];
        let db = [1.5, 0.25, 3.0, 0.9];
        let diag = |v: &[f64]| {
            let mut m = vec![0.0; d * d];
            for i in 0..d {
                m[i * d + i] = v[i];
            }
            Tensor::new(vec![d, d], m)
        };
        let ma = GaussianMoments {
            mean: vec![0.0; d],
            cov: diag(&da),
        };
        let mb = GaussianMoments {
            mean: vec![1.0, 1.0, 1.0, 1.0],
            cov: diag(&db),
        };
        let want: f64 = 4.0
            + da.iter()
                .zip(&db)
                .map(|(a, b)| a + b - 2.0 * (a * b).sqrt())
                .sum::<f64>();
        assert!((frechet_distance(&ma, &mb).unwrap() - want).abs() < 1e-8);
    }

    #[test]
    fn frechet_is_symmetric_and_rejects_non_psd() {
        let mut rng = SeedRng::from_seed(24);
        let d = 5usize;
        // Random PSD: AᵀA + εI.
        let make = |rng: &mut SeedRng| {
            let a = rand_t(vec![d, d], rng);
            let mut c = a.matmul_tn(&a);
            let buf = c.make_mut();
            for i in 0..d {
                buf[i * d + i] += 0.1;
            }
            GaussianMoments {
                mean: (0..d).map(|_| rng.normal()).collect(),
                cov: c,
            }
        };
        let m1 = make(&mut rng);
        let m2 = make(&mut rng);
        let f12 = frechet_distance(&m1, &m2).unwrap();
        let f21 = frechet_distance(&m2, &m1).unwrap();
        assert!((f12 - f21).abs() < 1e-8, "{f12} vs {f21}");
        assert!(f12 > 0.0);

        let mut bad = m1.clone();
        bad.shrink(-2.0);
        assert!(frechet_distance(&bad, &m2).is_err());
    }

    #[test]
    fn jacobi_recovers_known_spectrum() {
        // Symmetric 2x2 with eigenvalues 3 and 1.
        let m = Tensor::new(vec![2, 2], vec![2.0, 1.0, 1.0, 2.0]);
        let (mut eig, v) = jacobi_eigh(&m);
        eig.sort_by(|a, b| a.partial_cmp(b).unwrap());
        assert!((eig[0] - 1.0).abs() < 1e-12);
        assert!((eig[1] - 3.0).abs() < 1e-12);
        // Columns orthonormal.
        let dot = v.data()[0] * v.data()[1] + v.data()[2] * v.data()[3];
        assert!(dot.abs() < 1e-12);
    }

    fn make_clip(seed: u64, motion: f64, fill: Option<f32>) -> VideoClip {
        let spec = ClipSpec {
            seed,
            motion_level: motion,
            n_shapes: 2,
            t: 5,
            h: 16,
            w: 16,
        };
        let mut c = crate::synthdata::make_clip(spec).unwrap();
        if let Some(v) = fill {
            for x in c.frames.make_mut() {
                *x = v;
            }
        }
        c
    }

    #[test]
    fn toy_fvd_zero_on_self_and_separates_constant_sets() {
        let net = VideoEmbedNet::frozen(77);
        let set_a: Vec<VideoClip> = (0..6).map(|i| make_clip(i, 0.5, None)).collect();
        let d_self = toy_fvd(&set_a, &set_a, &net).unwrap();
        assert!(d_self < 1e-5, "{d_self}");

        let lo: Vec<VideoClip> = (0..4).map(|i| make_clip(i, 0.2, Some(0.25))).collect();
        let hi: Vec<VideoClip> = (0..4).map(|i| make_clip(i, 0.2, Some(0.75))).collect();
        let d = toy_fvd(&lo, &hi, &net).unwrap();
        assert!(d > 0.0, "{d}");

        // Frozen determinism.
        let d2 = toy_fvd(&lo, &hi, &VideoEmbedNet::frozen(77)).unwrap();
        assert_eq!(d.to_bits(), d2.to_bits());
    }

    fn toy_latent(
        struct_vals: Vec<f32>,
        oned_vals: Vec<f32>,
        valid_len: usize,
        c: usize,
    ) -> HybridLatent<f32> {
        let s_rows = struct_vals.len() / c;
        let l = oned_vals.len() / c;
        HybridLatent {
            structural: Tensor::new(vec![1, 1, s_rows, c], struct_vals),
            oned: Tensor::new(vec![l, c], oned_vals),
            valid_len,
            meta: LatentMeta {
                t: 1,
                h: 4,
                w: 4,
                motion_score: 0.0,
            },
        }
    }

    #[test]
    fn channel_stats_partition_and_hand_oracle() {
        // 3 channels; structural rows (1,2,3) and (3,2,1); 1D rows (0,0,0)
        // and an invalid row of garbage.
        let lat = toy_latent(
            vec![1.0, 2.0, 3.0, 3.0, 2.0, 1.0],
            vec![0.0, 0.0, 0.0, 99.0, -99.0, 99.0],
            1,
            3,
        );
        let st = latent_channel_stats(&[lat]).unwrap();
        assert_eq!(st.struct_mean, vec![2.0, 2.0, 2.0]);
        assert_eq!(st.struct_std, vec![1.0, 0.0, 1.0]);
        assert_eq!(st.oned_mean, vec![0.0, 0.0, 0.0]);
        assert_eq!(st.oned_std, vec![0.0, 0.0, 0.0]);

        // Garbage in the invalid tail must not move structural stats.
        let lat2 = toy_latent(
            vec![1.0, 2.0, 3.0, 3.0, 2.0, 1.0],
            vec![0.0, 0.0, 0.0, -5.0, 5.0, -5.0],
            1,
            3,
        );
        let st2 = latent_channel_stats(&[lat2]).unwrap();
        assert_eq!(st.struct_mean, st2.struct_mean);
        assert_eq!(st.oned_mean, st2.oned_mean);
    }

    #[test]
    fn matched_distributions_correlate_near_one() {
        let mut rng = SeedRng::from_seed(25);
        let c = 6usize;
        let scales: Vec<f64> = (0..c).map(|i| 0.2 + i as f64 * 0.5).collect();
        let mut lats = Vec::new();
        for _ in 0..64 {
            let sv: Vec<f32> = (0..4 * c)
                .map(|j| (rng.normal() * scales[j % c]) as f32)
                .collect();
            let ov: Vec<f32> = (0..8 * c)
                .map(|j| (rng.normal() * scales[j % c]) as f32)
                .collect();
            lats.push(toy_latent(sv, ov, 8, c));
        }
        let st = latent_channel_stats(&lats).unwrap();
        assert!(st.std_correlation > 0.95, "{}", st.std_correlation);
    }
}
