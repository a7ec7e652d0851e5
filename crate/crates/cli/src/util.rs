//! Shared plumbing: error-to-exit-code mapping, the `--jobs` worker pool,
//! precision conversion for stored latents, and the generator-normalization
//! sidecar file.

use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use vidae_core::encoder::HybridLatent;
use vidae_core::error::CoreError;
use vidae_core::latentgen::LatentNormStats;
use vidae_core::tensor::{Real, Tensor};

use crate::CliError;

/// Exit codes, one per failure class (0 = success).
pub const EXIT_USAGE: i32 = 2;
pub const EXIT_IO: i32 = 3;
pub const EXIT_FORMAT: i32 = 4;
pub const EXIT_SHAPE: i32 = 5;
pub const EXIT_NUMERIC: i32 = 6;
pub const EXIT_DIGEST: i32 = 7;

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => EXIT_USAGE,
            CliError::Io(_) => EXIT_IO,
            CliError::Format(_) => EXIT_FORMAT,
            CliError::Core(e) => match e {
                CoreError::InvalidArgument(_) | CoreError::QueryBudget { .. } => EXIT_USAGE,
                CoreError::Io(_) => EXIT_IO,
                CoreError::BadMagic { .. }
                | CoreError::VersionMismatch { .. }
                | CoreError::SizeMismatch { .. }
                | CoreError::CheckpointFormat(_) => EXIT_FORMAT,
                CoreError::ShapeMismatch(_) | CoreError::GeometryInconsistency(_) => EXIT_SHAPE,
                CoreError::NonFiniteLoss { .. } | CoreError::NotPsd(_) => EXIT_NUMERIC,
                CoreError::ConfigDigestMismatch => EXIT_DIGEST,
            },
        }
    }
}

impl From<CoreError> for CliError {
    fn from(e: CoreError) -> Self {
        CliError::Core(e)
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Usage(m) => write!(f, "usage: {m}"),
            CliError::Io(m) => write!(f, "io: {m}"),
            CliError::Format(m) => write!(f, "format: {m}"),
            CliError::Core(e) => write!(f, "{e}"),
        }
    }
}

pub fn io_err(path: &Path, e: std::io::Error) -> CliError {
    CliError::Io(format!("{}: {e}", path.display()))
}

/// Apply `f` to every item on up to `jobs` threads. Results land in input
/// order and each item's work must seed its own randomness, so the thread
/// count never changes the output.
pub fn parallel_map<I, R, F>(items: &[I], jobs: usize, f: F) -> Result<Vec<R>, CliError>
where
    I: Sync,
    R: Send,
    F: Fn(usize, &I) -> Result<R, CliError> + Sync,
{
    let jobs = jobs.max(1).min(items.len().max(1));
    if jobs <= 1 {
        return items.iter().enumerate().map(|(i, it)| f(i, it)).collect();
    }
    let next = AtomicUsize::new(0);
    let slots: Vec<Mutex<Option<Result<R, CliError>>>> =
        (0..items.len()).map(|_| Mutex::new(None)).collect();
    std::thread::scope(|s| {
        for _ in 0..jobs {
            s.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                if i >= items.len() {
                    break;
                }
                let r = f(i, &items[i]);
                *slots[i].lock().expect("result slot") = Some(r);
            });
        }
    });
    slots
        .into_iter()
        .map(|m| m.into_inner().expect("slot lock").expect("worker wrote slot"))
        .collect()
}

fn convert_tensor<A: Real, B: Real>(t: &Tensor<A>) -> Tensor<B> {
    Tensor::new(
        t.shape().to_vec(),
        t.data().iter().map(|v| B::from_f64(v.to_f64())).collect(),
    )
}

/// Stored latents are f32; widen/narrow at the container boundary.
pub fn latent_to_f32<T: Real>(l: &HybridLatent<T>) -> HybridLatent<f32> {
    HybridLatent {
        structural: convert_tensor(&l.structural),
        oned: convert_tensor(&l.oned),
        valid_len: l.valid_len,
        meta: l.meta,
    }
}

pub fn latent_from_f32<T: Real>(l: &HybridLatent<f32>) -> HybridLatent<T> {
    HybridLatent {
        structural: convert_tensor(&l.structural),
        oned: convert_tensor(&l.oned),
        valid_len: l.valid_len,
        meta: l.meta,
    }
}

/// Normalization sidecar (`<ldm ckpt>.norm`): CSV of per-channel moments.
/// f64 values print in shortest round-trip form, so read(write(x)) == x.
pub fn write_norm_sidecar(path: &Path, norm: &LatentNormStats) -> Result<(), CliError> {
    let mut s = String::from("section,channel,mean,std\n");
    for (i, (m, sd)) in norm.struct_mean.iter().zip(&norm.struct_std).enumerate() {
        s.push_str(&format!("struct,{i},{m},{sd}\n"));
    }
    for (i, (m, sd)) in norm.oned_mean.iter().zip(&norm.oned_std).enumerate() {
        s.push_str(&format!("oned,{i},{m},{sd}\n"));
    }
    std::fs::write(path, s).map_err(|e| io_err(path, e))
}

pub fn read_norm_sidecar(path: &Path) -> Result<LatentNormStats, CliError> {
    let text = std::fs::read_to_string(path).map_err(|e| io_err(path, e))?;
    let mut norm = LatentNormStats {
        struct_mean: Vec::new(),
        struct_std: Vec::new(),
        oned_mean: Vec::new(),
        oned_std: Vec::new(),
    };
    for (i, line) in text.lines().enumerate() {
        if i == 0 {
            if line.trim() != "section,channel,mean,std" {
                return Err(CliError::Io(format!(
                    "{}: bad norm sidecar header",
                    path.display()
                )));
            }
            continue;
        }
        if line.trim().is_empty() {
            continue;
        }
        let p: Vec<&str> = line.split(',').collect();
        let bad = || CliError::Io(format!("{}: bad norm sidecar row {i}", path.display()));
        if p.len() != 4 {
            return Err(bad());
        }
        let mean: f64 = p[2].trim().parse().map_err(|_| bad())?;
        let std: f64 = p[3].trim().parse().map_err(|_| bad())?;
        match p[0].trim() {
            "struct" => {
                norm.struct_mean.push(mean);
                norm.struct_std.push(std);
            }
            "oned" => {
                norm.oned_mean.push(mean);
                norm.oned_std.push(std);
            }
            _ => return Err(bad()),
        }
    }
    if norm.struct_mean.is_empty() || norm.struct_mean.len() != norm.oned_mean.len() {
        return Err(CliError::Io(format!(
            "{}: incomplete norm sidecar",
            path.display()
        )));
    }
    Ok(norm)
}

/// Numbered `.1dva` files under a directory, sorted by clip id.
pub fn list_latent_files(dir: &Path) -> Result<Vec<(u64, std::path::PathBuf)>, CliError> {
    let mut out = Vec::new();
    for entry in std::fs::read_dir(dir).map_err(|e| io_err(dir, e))? {
        let entry = entry.map_err(|e| io_err(dir, e))?;
        let path = entry.path();
        let name = entry.file_name().to_string_lossy().into_owned();
        if let Some(stem) = name.strip_suffix(".1dva") {
            let digits: String = stem.chars().filter(|c| c.is_ascii_digit()).collect();
            if let Ok(id) = digits.parse::<u64>() {
                out.push((id, path));
            }
        }
    }
    if out.is_empty() {
        return Err(CliError::Usage(format!(
            "no .1dva files under {}",
            dir.display()
        )));
    }
    out.sort_by_key(|(id, _)| *id);
    Ok(out)
}

pub fn mean(xs: &[f64]) -> f64 {
    if xs.is_empty() {
        return f64::NAN;
    }
    xs.iter().sum::<f64>() / xs.len() as f64
}
