//! On-disk container for variable-length hybrid latents. Only the structural
//! grid and the valid 1D rows are stored, so the byte size of a file tracks
//! the per-video token budget.
//!
//! Layout (all integers little-endian):
//!   bytes 0..4    magic "1DVA"
//!   bytes 4..56   13 u32 fields: version, T, H, W, p_t, p_s, C, h, w,
//!                 L_full, valid_len, motion_score (f32 bits), flags
//!   bytes 56..    f32 payload: structural h·w·C values, then valid_len·C
//!                 1D values

use crate::encoder::{latent_geometry, HybridLatent, LatentMeta};
use crate::error::{CoreError, Result};
use crate::tensor::Tensor;
use std::fs;
use std::io::Write as _;
use std::path::Path;

pub const LATENT_MAGIC: [u8; 4] = *b"1DVA";
pub const LATENT_VERSION: u32 = 1;
pub const HEADER_BYTES: usize = 56;

/// Parsed header of a latent container.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LatentHeader {
    pub version: u32,
    pub t: u32,
    pub h: u32,
    pub w: u32,
    pub p_t: u32,
    pub p_s: u32,
    pub c: u32,
    pub grid_h: u32,
    pub grid_w: u32,
    pub l_full: u32,
    pub valid_len: u32,
    pub motion_score: f32,
    pub flags: u32,
}

impl LatentHeader {
    pub fn payload_bytes(&self) -> u64 {
        4 * self.c as u64 * (self.grid_h as u64 * self.grid_w as u64 + self.valid_len as u64)
    }

    /// Grid fields must reproduce `latent_geometry` of the video dims.
    pub fn validate_geometry(&self) -> Result<()> {
        if self.t == 0 || self.h == 0 || self.w == 0 || self.p_t == 0 || self.p_s == 0 || self.c == 0
        {
            return Err(CoreError::GeometryInconsistency(
                "zero dimension in header".into(),
            ));
        }
        let geo = latent_geometry(
            self.t as usize,
            self.h as usize,
            self.w as usize,
            self.p_t as usize,
            self.p_s as usize,
        );
        if geo.h != self.grid_h as usize
            || geo.w != self.grid_w as usize
            || geo.l_full != self.l_full as usize
        {
            return Err(CoreError::GeometryInconsistency(format!(
                "header grid {}x{} L={} vs derived {}x{} L={}",
                self.grid_h, self.grid_w, self.l_full, geo.h, geo.w, geo.l_full
            )));
        }
        if self.valid_len > self.l_full {
            return Err(CoreError::GeometryInconsistency(format!(
                "valid_len {} exceeds L_full {}",
                self.valid_len, self.l_full
            )));
        }
        Ok(())
    }
}

/// Exact file size for a given channel count, structural grid, and kept rows.
pub fn expected_file_size(c: usize, grid_h: usize, grid_w: usize, valid_len: usize) -> usize {
    HEADER_BYTES + 4 * c * (grid_h * grid_w + valid_len)
}

/// Serialize a latent. `p_t`/`p_s` are the latent patch sizes the geometry
/// was derived under; they are stored so readers can re-validate.
pub fn latent_file_bytes(latent: &HybridLatent<f32>, p_t: usize, p_s: usize) -> Result<Vec<u8>> {
    let c = latent.channels();
    let (gh, gw) = (latent.grid_h(), latent.grid_w());
    let header = LatentHeader {
        version: LATENT_VERSION,
        t: latent.meta.t,
        h: latent.meta.h,
        w: latent.meta.w,
        p_t: p_t as u32,
        p_s: p_s as u32,
        c: c as u32,
        grid_h: gh as u32,
        grid_w: gw as u32,
        l_full: latent.l_full() as u32,
        valid_len: latent.valid_len as u32,
        motion_score: latent.meta.motion_score,
        flags: 0,
    };
    header.validate_geometry()?;
    let mut out = Vec::with_capacity(expected_file_size(c, gh, gw, latent.valid_len));
    out.extend_from_slice(&LATENT_MAGIC);
    for v in [
        header.version,
        header.t,
        header.h,
        header.w,
        header.p_t,
        header.p_s,
        header.c,
        header.grid_h,
        header.grid_w,
        header.l_full,
        header.valid_len,
        header.motion_score.to_bits(),
        header.flags,
    ] {
        out.extend_from_slice(&v.to_le_bytes());
    }
    for v in latent.structural.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    for v in &latent.oned.data()[..latent.valid_len * c] {
        out.extend_from_slice(&v.to_le_bytes());
    }
    Ok(out)
}

fn read_u32(bytes: &[u8], field: usize) -> u32 {
    let off = 4 + field * 4;
    u32::from_le_bytes([bytes[off], bytes[off + 1], bytes[off + 2], bytes[off + 3]])
}

pub fn parse_latent_header(bytes: &[u8]) -> Result<LatentHeader> {
    if bytes.len() < HEADER_BYTES {
        return Err(CoreError::SizeMismatch {
            declared: HEADER_BYTES as u64,
            actual: bytes.len() as u64,
        });
    }
    let found = [bytes[0], bytes[1], bytes[2], bytes[3]];
    if found != LATENT_MAGIC {
        return Err(CoreError::BadMagic {
            expected: LATENT_MAGIC,
            found,
        });
    }
    let version = read_u32(bytes, 0);
    if version != LATENT_VERSION {
        return Err(CoreError::VersionMismatch {
            expected: LATENT_VERSION,
            found: version,
        });
    }
    Ok(LatentHeader {
        version,
        t: read_u32(bytes, 1),
        h: read_u32(bytes, 2),
        w: read_u32(bytes, 3),
        p_t: read_u32(bytes, 4),
        p_s: read_u32(bytes, 5),
        c: read_u32(bytes, 6),
        grid_h: read_u32(bytes, 7),
        grid_w: read_u32(bytes, 8),
        l_full: read_u32(bytes, 9),
        valid_len: read_u32(bytes, 10),
        motion_score: f32::from_bits(read_u32(bytes, 11)),
        flags: read_u32(bytes, 12),
    })
}

/// Parse a full container. Rows at and beyond `valid_len` are zero-filled —
/// they were never stored.
pub fn parse_latent_bytes(bytes: &[u8]) -> Result<(HybridLatent<f32>, LatentHeader)> {
    let header = parse_latent_header(bytes)?;
    header.validate_geometry()?;
    let declared = header.payload_bytes();
    let actual = (bytes.len() - HEADER_BYTES) as u64;
    if declared != actual {
        return Err(CoreError::SizeMismatch { declared, actual });
    }
    let c = header.c as usize;
    let (gh, gw) = (header.grid_h as usize, header.grid_w as usize);
    let l_full = header.l_full as usize;
    let valid = header.valid_len as usize;
    let mut payload = bytes[HEADER_BYTES..].chunks_exact(4);
    let mut next = || {
        let b = payload.next().expect("length checked above");
        f32::from_le_bytes([b[0], b[1], b[2], b[3]])
    };
    let structural: Vec<f32> = (0..gh * gw * c).map(|_| next()).collect();
    let mut oned = vec![0.0f32; l_full * c];
    for slot in oned.iter_mut().take(valid * c) {
        *slot = next();
    }
    let latent = HybridLatent {
        structural: Tensor::new(vec![1, gh, gw, c], structural),
        oned: Tensor::new(vec![l_full, c], oned),
        valid_len: valid,
        meta: LatentMeta {
            t: header.t,
            h: header.h,
            w: header.w,
            motion_score: header.motion_score,
        },
    };
    Ok((latent, header))
}

/// Atomic write: serialize to a sibling temp file, then rename into place.
pub fn write_latent_file(
    path: &Path,
    latent: &HybridLatent<f32>,
    p_t: usize,
    p_s: usize,
) -> Result<()> {
    let bytes = latent_file_bytes(latent, p_t, p_s)?;
    let tmp = path.with_extension("tmp");
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(&bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

pub fn read_latent_file(path: &Path) -> Result<(HybridLatent<f32>, LatentHeader)> {
    let bytes = fs::read(path)?;
    parse_latent_bytes(&bytes)
}

/// Human-readable header summary, including the kept-fraction percentage.
pub fn inspect_latent_bytes(bytes: &[u8]) -> Result<String> {
    let h = parse_latent_header(bytes)?;
    let frac = if h.l_full == 0 {
        0.0
    } else {
        100.0 * h.valid_len as f64 / h.l_full as f64
    };
    Ok(format!(
        "latent container v{}\n\
         video: {}x{}x{} (T×H×W), latent patches p_t={} p_s={}\n\
         channels: {}, structural grid: {}x{}\n\
         1D tokens: {} of {} kept ({:.1}% 1D)\n\
         motion score: {:.4}\n\
         flags: 0x{:08x}\n\
         payload: {} bytes",
        h.version,
        h.t,
        h.h,
        h.w,
        h.p_t,
        h.p_s,
        h.c,
        h.grid_h,
        h.grid_w,
        h.valid_len,
        h.l_full,
        frac,
        h.motion_score,
        h.flags,
        h.payload_bytes(),
    ))
}

pub fn inspect_latent_file(path: &Path) -> Result<String> {
    let bytes = fs::read(path)?;
    inspect_latent_bytes(&bytes)
}
