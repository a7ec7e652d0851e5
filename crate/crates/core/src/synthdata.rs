//! Deterministic synthetic video corpora and pixel-space preprocessing.
//!
//! Clips are rendered from a [`ClipSpec`] using only arithmetic and `sqrt`
//! (both exactly rounded under IEEE 754), so the same spec produces the same
//! bytes on every platform. Shapes translate with per-frame displacement
//! proportional to `motion_level`; frame 0 never depends on it.

use crate::error::{CoreError, Result};
use crate::rng::SeedRng;
use crate::tensor::{Real, Tensor};
use std::io::{Read as _, Write as _};
use std::path::Path;

pub const CLIP_MAGIC: [u8; 4] = *b"1DVC";
pub const CLIP_VERSION: u32 = 1;
pub const DEFAULT_FPS: u32 = 8;

/// A video clip in `[-1, 1]` pixel space, frames shaped `[T, H, W, 3]`.
#[derive(Clone, Debug)]
pub struct VideoClip {
    pub frames: Tensor<f32>,
    pub fps: u32,
    pub id: u64,
}

impl VideoClip {
    pub fn new(frames: Tensor<f32>, fps: u32, id: u64) -> Result<Self> {
        if frames.shape().len() != 4 || frames.shape()[3] != 3 {
            return Err(CoreError::ShapeMismatch(format!(
                "clip frames must be [T, H, W, 3], got {:?}",
                frames.shape()
            )));
        }
        if frames.numel() == 0 {
            return Err(CoreError::InvalidArgument("empty clip".into()));
        }
        if !frames.data().iter().all(|x| x.is_finite() && (-1.0..=1.0).contains(x)) {
            return Err(CoreError::InvalidArgument(
                "clip pixels must lie in [-1, 1]".into(),
            ));
        }
        Ok(VideoClip { frames, fps, id })
    }

    pub fn t(&self) -> usize {
        self.frames.shape()[0]
    }
    pub fn h(&self) -> usize {
        self.frames.shape()[1]
    }
    pub fn w(&self) -> usize {
        self.frames.shape()[2]
    }

    /// Pixels as a graph-ready `[T*H*W, 3]` tensor in the requested precision.
    pub fn to_real<T: Real>(&self) -> Tensor<T> {
        let n = self.t() * self.h() * self.w();
        Tensor::new(
            vec![n, 3],
            self.frames.data().iter().map(|&x| T::from_f64(x as f64)).collect(),
        )
    }

    /// Inverse of [`to_real`]: wrap `[T*H*W, 3]` values (clamped) as a clip.
    pub fn from_real<T: Real>(pixels: &Tensor<T>, t: usize, h: usize, w: usize, fps: u32, id: u64) -> Result<Self> {
        if pixels.numel() != t * h * w * 3 {
            return Err(CoreError::ShapeMismatch(format!(
                "pixel count {} does not match {t}x{h}x{w}x3",
                pixels.numel()
            )));
        }
        let data: Vec<f32> = pixels
            .data()
            .iter()
            .map(|x| (x.to_f64().clamp(-1.0, 1.0)) as f32)
            .collect();
        VideoClip::new(Tensor::new(vec![t, h, w, 3], data), fps, id)
    }
}

/// Fully determines one synthetic clip.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ClipSpec {
    pub seed: u64,
    /// In [0, 1]; scales per-frame shape displacement.
    pub motion_level: f64,
    pub n_shapes: usize,
    pub t: usize,
    pub h: usize,
    pub w: usize,
}

/// Original dimensions kept so padding can be undone after decoding.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PadRecord {
    pub orig_t: usize,
    pub orig_h: usize,
    pub orig_w: usize,
}

impl PadRecord {
    pub fn is_empty(&self, clip: &VideoClip) -> bool {
        self.orig_t == clip.t() && self.orig_h == clip.h() && self.orig_w == clip.w()
    }
}

// ---- rendering ----

/// Cubic smoothstep on [0, 1].
fn smooth01(u: f64) -> f64 {
    let u = u.clamp(0.0, 1.0);
    u * u * (3.0 - 2.0 * u)
}

/// Smooth periodic wave in [-1, 1] with period 1, built from a triangle wave
/// so rendering never calls transcendental functions.
fn wave(p: f64) -> f64 {
    let f = p - p.floor();
    let tri = 2.0 * (f - 0.5).abs(); // 1 at integers, 0 at half-integers
    2.0 * smooth01(1.0 - tri) - 1.0
}

/// Minimum-image signed offset on a ring of length `len`.
fn torus_delta(a: f64, b: f64, len: f64) -> f64 {
    let mut d = a - b;
    d -= len * (d / len).round();
    d
}

const EDGE_WIDTH: f64 = 1.5;
const MAX_SPEED: f64 = 3.0;

struct Shape {
    disc: bool,
    color: [f64; 3],
    half_x: f64,
    half_y: f64,
    cx: f64,
    cy: f64,
    dir_x: f64,
    dir_y: f64,
    speed: f64,
}

/// Deterministically render a clip: `n_shapes` soft-edged rectangles/discs
/// drifting over a smooth striped background on a torus.
pub fn make_clip(spec: ClipSpec) -> Result<VideoClip> {
    if spec.t * spec.h * spec.w == 0 {
        return Err(CoreError::InvalidArgument(
            "clip dimensions must be positive".into(),
        ));
    }
    if !(0.0..=1.0).contains(&spec.motion_level) {
        return Err(CoreError::InvalidArgument(format!(
            "motion_level {} outside [0, 1]",
            spec.motion_level
        )));
    }
    if spec.n_shapes == 0 {
        return Err(CoreError::InvalidArgument("n_shapes must be positive".into()));
    }
    let (t_len, h, w) = (spec.t, spec.h, spec.w);
    let (hf, wf) = (h as f64, w as f64);
    let mut rng = SeedRng::from_seed(spec.seed);

    // All randomness is drawn before motion_level is consulted, so two specs
    // differing only in motion_level render the same scene at frame 0.
    let mut bg = [[0.0f64; 4]; 3]; // per channel: base, amp, fx, fy
    let mut bg_phase = [0.0f64; 3];
    for c in 0..3 {
        bg[c][0] = rng.uniform_range(-0.3, 0.3);
        bg[c][1] = rng.uniform_range(0.2, 0.5);
        bg[c][2] = rng.uniform_range(0.5, 3.0);
        bg[c][3] = rng.uniform_range(0.5, 3.0);
        bg_phase[c] = rng.uniform();
    }
    let min_dim = hf.min(wf);
    let mut shapes = Vec::with_capacity(spec.n_shapes);
    for _ in 0..spec.n_shapes {
        let disc = rng.uniform() < 0.5;
        let color = [
            rng.uniform_range(-1.0, 1.0),
            rng.uniform_range(-1.0, 1.0),
            rng.uniform_range(-1.0, 1.0),
        ];
        let half_x = rng.uniform_range(min_dim / 10.0, min_dim / 4.0);
        let half_y = if disc {
            half_x
        } else {
            rng.uniform_range(min_dim / 10.0, min_dim / 4.0)
        };
        let cx = rng.uniform_range(0.0, wf);
        let cy = rng.uniform_range(0.0, hf);
        let (mut dx, mut dy) = (rng.normal(), rng.normal());
        let norm = (dx * dx + dy * dy).sqrt();
        if norm < 1e-9 {
            dx = 1.0;
            dy = 0.0;
        } else {
            dx /= norm;
            dy /= norm;
        }
        let speed = rng.uniform_range(0.5, 1.0) * MAX_SPEED * spec.motion_level;
        shapes.push(Shape {
            disc,
            color,
            half_x,
            half_y,
            cx,
            cy,
            dir_x: dx,
            dir_y: dy,
            speed,
        });
    }

    let mut data = vec![0.0f32; t_len * h * w * 3];
    for ti in 0..t_len {
        let tf = ti as f64;
        for y in 0..h {
            let yf = y as f64;
            for x in 0..w {
                let xf = x as f64;
                let mut px = [0.0f64; 3];
                for c in 0..3 {
                    let p = bg[c][2] * (xf / wf) + bg[c][3] * (yf / hf) + bg_phase[c];
                    px[c] = bg[c][0] + bg[c][1] * wave(p);
                }
                for s in &shapes {
                    let scx = s.cx + s.speed * tf * s.dir_x;
                    let scy = s.cy + s.speed * tf * s.dir_y;
                    let ddx = torus_delta(xf, scx.rem_euclid(wf), wf);
                    let ddy = torus_delta(yf, scy.rem_euclid(hf), hf);
                    let inside = if s.disc {
                        s.half_x - (ddx * ddx + ddy * ddy).sqrt()
                    } else {
                        (s.half_x - ddx.abs()).min(s.half_y - ddy.abs())
                    };
                    let m = smooth01(inside / EDGE_WIDTH + 0.5);
                    if m > 0.0 {
                        for c in 0..3 {
                            px[c] = (1.0 - m) * px[c] + m * s.color[c];
                        }
                    }
                }
                let base = ((ti * h + y) * w + x) * 3;
                for c in 0..3 {
                    data[base + c] = px[c].clamp(-1.0, 1.0) as f32;
                }
            }
        }
    }
    VideoClip::new(Tensor::new(vec![t_len, h, w, 3], data), DEFAULT_FPS, spec.seed)
}

// ---- normalization ----

/// u8 pixels to `[-1, 1]`: x/127.5 - 1.
pub fn normalize(pixels_u8: &[u8], t: usize, h: usize, w: usize, fps: u32, id: u64) -> Result<VideoClip> {
    if pixels_u8.len() != t * h * w * 3 {
        return Err(CoreError::ShapeMismatch(format!(
            "u8 buffer {} vs {t}x{h}x{w}x3",
            pixels_u8.len()
        )));
    }
    let data: Vec<f32> = pixels_u8
        .iter()
        .map(|&b| ((b as f64 / 127.5 - 1.0).clamp(-1.0, 1.0)) as f32)
        .collect();
    VideoClip::new(Tensor::new(vec![t, h, w, 3], data), fps, id)
}

/// Inverse of [`normalize`]: round((x+1)*127.5) clamped to [0, 255].
pub fn denormalize(clip: &VideoClip) -> Vec<u8> {
    clip.frames
        .data()
        .iter()
        .map(|&x| ((x as f64 + 1.0) * 127.5).round().clamp(0.0, 255.0) as u8)
        .collect()
}

// ---- padding ----

fn next_multiple(x: usize, m: usize) -> usize {
    x.div_ceil(m) * m
}

/// Pad to the smallest (patch_t, patch_s, patch_s) grid that covers the clip:
/// zero padding on the spatial axes, replicate padding (last frame) on time.
pub fn pad_to_patch_grid(clip: &VideoClip, patch_t: usize, patch_s: usize) -> Result<(VideoClip, PadRecord)> {
    if patch_t == 0 || patch_s == 0 {
        return Err(CoreError::InvalidArgument("patch dims must be >= 1".into()));
    }
    let (t, h, w) = (clip.t(), clip.h(), clip.w());
    let (tp, hp, wp) = (
        next_multiple(t, patch_t),
        next_multiple(h, patch_s),
        next_multiple(w, patch_s),
    );
    let record = PadRecord {
        orig_t: t,
        orig_h: h,
        orig_w: w,
    };
    if (tp, hp, wp) == (t, h, w) {
        return Ok((clip.clone(), record));
    }
    let src = clip.frames.data();
    let mut data = vec![0.0f32; tp * hp * wp * 3];
    for ti in 0..tp {
        let ts = ti.min(t - 1);
        for y in 0..hp {
            if y >= h {
                continue; // rows stay zero
            }
            let dst = ((ti * hp + y) * wp) * 3;
            let so = ((ts * h + y) * w) * 3;
            data[dst..dst + w * 3].copy_from_slice(&src[so..so + w * 3]);
        }
    }
    let padded = VideoClip::new(Tensor::new(vec![tp, hp, wp, 3], data), clip.fps, clip.id)?;
    Ok((padded, record))
}

/// Undo [`pad_to_patch_grid`].
pub fn crop_to_record(clip: &VideoClip, record: &PadRecord) -> Result<VideoClip> {
    let (t, h, w) = (record.orig_t, record.orig_h, record.orig_w);
    if t > clip.t() || h > clip.h() || w > clip.w() {
        return Err(CoreError::InvalidArgument(
            "pad record larger than clip".into(),
        ));
    }
    if (t, h, w) == (clip.t(), clip.h(), clip.w()) {
        return Ok(clip.clone());
    }
    let src = clip.frames.data();
    let (hp, wp) = (clip.h(), clip.w());
    let mut data = Vec::with_capacity(t * h * w * 3);
    for ti in 0..t {
        for y in 0..h {
            let so = ((ti * hp + y) * wp) * 3;
            data.extend_from_slice(&src[so..so + w * 3]);
        }
    }
    VideoClip::new(Tensor::new(vec![t, h, w, 3], data), clip.fps, clip.id)
}

// ---- corpus files ----

/// Serialize a clip through u8 quantization into the on-disk layout.
pub fn clip_file_bytes(clip: &VideoClip) -> Vec<u8> {
    let mut out = Vec::with_capacity(24 + clip.frames.numel());
    out.extend_from_slice(&CLIP_MAGIC);
    out.extend_from_slice(&CLIP_VERSION.to_le_bytes());
    out.extend_from_slice(&(clip.t() as u32).to_le_bytes());
    out.extend_from_slice(&(clip.h() as u32).to_le_bytes());
    out.extend_from_slice(&(clip.w() as u32).to_le_bytes());
    out.extend_from_slice(&clip.fps.to_le_bytes());
    out.extend_from_slice(&denormalize(clip));
    out
}

pub fn write_clip_file(path: &Path, clip: &VideoClip) -> Result<()> {
    let mut f = std::fs::File::create(path)?;
    f.write_all(&clip_file_bytes(clip))?;
    Ok(())
}

pub fn read_clip_file(path: &Path, id: u64) -> Result<VideoClip> {
    let mut buf = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut buf)?;
    parse_clip_bytes(&buf, id)
}

pub fn parse_clip_bytes(buf: &[u8], id: u64) -> Result<VideoClip> {
    if buf.len() < 24 {
        return Err(CoreError::SizeMismatch {
            declared: 24,
            actual: buf.len() as u64,
        });
    }
    if buf[0..4] != CLIP_MAGIC {
        return Err(CoreError::BadMagic {
            expected: CLIP_MAGIC,
            found: [buf[0], buf[1], buf[2], buf[3]],
        });
    }
    let u32le = |o: usize| u32::from_le_bytes(buf[o..o + 4].try_into().unwrap());
    let version = u32le(4);
    if version != CLIP_VERSION {
        return Err(CoreError::VersionMismatch {
            expected: CLIP_VERSION,
            found: version,
        });
    }
    let (t, h, w, fps) = (u32le(8) as usize, u32le(12) as usize, u32le(16) as usize, u32le(20));
    let expected = 24 + t * h * w * 3;
    if buf.len() != expected {
        return Err(CoreError::SizeMismatch {
            declared: expected as u64,
            actual: buf.len() as u64,
        });
    }
    normalize(&buf[24..], t, h, w, fps, id)
}

/// One corpus row: where a clip lives and how it was generated.
#[derive(Clone, Debug, PartialEq)]
pub struct IndexEntry {
    pub id: u64,
    pub path: String,
    pub motion_level: f64,
    pub seed: u64,
}

#[derive(Clone, Debug, Default)]
pub struct CorpusIndex {
    pub entries: Vec<IndexEntry>,
}

impl CorpusIndex {
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut s = String::from("id,path,motion_level,seed\n");
        for e in &self.entries {
            s.push_str(&format!("{},{},{},{}\n", e.id, e.path, e.motion_level, e.seed));
        }
        let mut f = std::fs::File::create(path)?;
        f.write_all(s.as_bytes())?;
        Ok(())
    }

    pub fn read_csv(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let mut entries = Vec::new();
        for (i, line) in text.lines().enumerate() {
            if i == 0 {
                if line.trim() != "id,path,motion_level,seed" {
                    return Err(CoreError::InvalidArgument(format!(
                        "bad corpus index header: {line}"
                    )));
                }
                continue;
            }
            if line.trim().is_empty() {
                continue;
            }
            let parts: Vec<&str> = line.split(',').collect();
            if parts.len() != 4 {
                return Err(CoreError::InvalidArgument(format!(
                    "bad corpus index row {i}: {line}"
                )));
            }
            let bad = |what: &str| CoreError::InvalidArgument(format!("bad {what} in corpus index row {i}"));
            entries.push(IndexEntry {
                id: parts[0].trim().parse::<u64>().map_err(|_| bad("id"))?,
                path: parts[1].trim().to_string(),
                motion_level: parts[2].trim().parse::<f64>().map_err(|_| bad("motion_level"))?,
                seed: parts[3].trim().parse::<u64>().map_err(|_| bad("seed"))?,
            });
        }
        Ok(CorpusIndex { entries })
    }

    /// Load a clip by row, resolving its path relative to the index file.
    pub fn load_clip(&self, index_path: &Path, row: usize) -> Result<VideoClip> {
        let e = &self.entries[row];
        let base = index_path.parent().unwrap_or(Path::new("."));
        read_clip_file(&base.join(&e.path), e.id)
    }
}

/// Evenly spaced motion levels covering [0, 1]; a single level sits at 0.5.
pub fn corpus_motion_levels(n_levels: usize) -> Vec<f64> {
    assert!(n_levels >= 1);
    if n_levels == 1 {
        return vec![0.5];
    }
    (0..n_levels)
        .map(|i| i as f64 / (n_levels - 1) as f64)
        .collect()
}

/// Generate `n_clips` clips cycling through `corpus_motion_levels(n_levels)`,
/// write them plus `index.csv` under `dir`, and return the index.
pub fn generate_corpus(
    dir: &Path,
    n_clips: usize,
    n_levels: usize,
    t: usize,
    h: usize,
    w: usize,
    n_shapes: usize,
    base_seed: u64,
) -> Result<CorpusIndex> {
    std::fs::create_dir_all(dir)?;
    let levels = corpus_motion_levels(n_levels);
    let mut index = CorpusIndex::default();
    for i in 0..n_clips {
        let seed = crate::rng::splitmix64(base_seed ^ 0x636c_6970 ^ (i as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15));
        let motion_level = levels[i % levels.len()];
        let spec = ClipSpec {
            seed,
            motion_level,
            n_shapes,
            t,
            h,
            w,
        };
        let mut clip = make_clip(spec)?;
        clip.id = i as u64;
        let fname = format!("clip_{i:05}.vid");
        write_clip_file(&dir.join(&fname), &clip)?;
        index.entries.push(IndexEntry {
            id: i as u64,
            path: fname,
            motion_level,
            seed,
        });
    }
    index.write_csv(&dir.join("index.csv"))?;
    Ok(index)
}
