//! `vidae reconstruct`, `vidae metrics`, `vidae sweep-length`: reconstruction
//! quality measurement.

use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use vidae_core::encoder::latent_geometry;
use vidae_core::graph::Graph;
use vidae_core::losses::{perceptual_loss, FrozenTeacher};
use vidae_core::metrics::{psnr, ssim, toy_fvd, VideoEmbedNet};
use vidae_core::motion::{normalize_score, raw_motion_score, MotionStats};
use vidae_core::nn::Params;
use vidae_core::rng::SeedRng;
use vidae_core::synthdata::{read_clip_file, write_clip_file, CorpusIndex, VideoClip};
use vidae_core::tensor::Real;
use vidae_core::trainer::VaeModel;

use crate::bundles::{load_vae, resolve_ckpt, FVD_NET_SEED, METRIC_TEACHER_SEED};
use crate::config::{write_manifest, RunConfig};
use crate::util::{io_err, mean, parallel_map};
use crate::CliError;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LenMode {
    /// Keep the full 1D sequence.
    Full,
    /// Constant fraction: every video keeps round(frac * L_full) rows.
    Con,
    /// Per-video budgets proportional to normalized motion, rescaled so the
    /// mean kept fraction over the set equals frac.
    Avg,
}

impl FromStr for LenMode {
    type Err = CliError;

    fn from_str(s: &str) -> Result<Self, CliError> {
        Ok(match s {
            "full" => LenMode::Full,
            "con" => LenMode::Con,
            "avg" => LenMode::Avg,
            _ => {
                return Err(CliError::Usage(format!(
                    "unknown len-mode {s:?} (expected full|con|avg)"
                )))
            }
        })
    }
}

/// PSNR / SSIM / frozen-feature distance between two same-shape clips.
pub fn clip_metrics(
    a: &VideoClip,
    b: &VideoClip,
    teacher: &FrozenTeacher<f64>,
) -> Result<(f64, f64, f64), CliError> {
    let dims = (a.t(), a.h(), a.w());
    let ta = a.to_real::<f64>();
    let tb = b.to_real::<f64>();
    let p = psnr(&ta, &tb)?;
    let s = ssim(&ta, &tb, dims)?;
    let mut g = Graph::<f64>::new();
    let pred = g.constant(tb);
    let truth = g.constant(ta);
    let d = perceptual_loss(&mut g, pred, truth, dims, teacher)?;
    Ok((p, s, g.value(d).item().to_f64()))
}

/// Load every clip of a corpus index, in index order.
pub fn load_corpus(dir: &Path) -> Result<(CorpusIndex, Vec<VideoClip>), CliError> {
    let index_path = dir.join("index.csv");
    let index = CorpusIndex::read_csv(&index_path)?;
    if index.entries.is_empty() {
        return Err(CliError::Usage(format!("empty corpus at {}", dir.display())));
    }
    let mut clips = Vec::with_capacity(index.entries.len());
    for row in 0..index.entries.len() {
        clips.push(index.load_clip(&index_path, row)?);
    }
    Ok((index, clips))
}

/// Per-clip 1D budgets for one length mode over a clip set.
pub fn plan_budgets<T: Real>(
    mode: LenMode,
    frac: f64,
    clips: &[VideoClip],
    motion: &MotionStats,
    p_t: usize,
    p_s: usize,
) -> Vec<usize> {
    let l_fulls: Vec<usize> = clips
        .iter()
        .map(|c| latent_geometry(c.t(), c.h(), c.w(), p_t, p_s).l_full)
        .collect();
    match mode {
        LenMode::Full => l_fulls,
        LenMode::Con => l_fulls
            .iter()
            .map(|&l| ((frac * l as f64).round() as usize).min(l))
            .collect(),
        LenMode::Avg => {
            let s_hats: Vec<f64> = clips
                .iter()
                .map(|c| normalize_score(motion, raw_motion_score(c)))
                .collect();
            let sum: f64 = s_hats.iter().sum();
            if sum <= 0.0 {
                return l_fulls
                    .iter()
                    .map(|&l| ((frac * l as f64).round() as usize).min(l))
                    .collect();
            }
            let scale = frac * s_hats.len() as f64 / sum;
            s_hats
                .iter()
                .zip(&l_fulls)
                .map(|(&s, &l)| ((s * scale * l as f64).round() as usize).min(l))
                .collect()
        }
    }
}

struct ReconRow {
    clip: VideoClip,
    l_full: usize,
    keep: usize,
    psnr: f64,
    ssim: f64,
    perceptual: f64,
}

/// Encode -> truncate -> decode -> score, one clip per entry, `--jobs` wide.
#[allow(clippy::too_many_arguments)]
fn recon_set<T: Real>(
    cfg: &RunConfig,
    model: &VaeModel<T>,
    params: &Params<T>,
    motion: &MotionStats,
    clips: &[VideoClip],
    keeps: &[usize],
    steps: usize,
    jobs: usize,
    teacher: &FrozenTeacher<f64>,
) -> Result<Vec<ReconRow>, CliError> {
    let items: Vec<(usize, &VideoClip)> = clips.iter().enumerate().collect();
    parallel_map(&items, jobs, |_, &(i, clip)| {
        let keep = keeps[i];
        let mut enc_rng = SeedRng::derive(cfg.sample.encode_seed, clip.id);
        let latent = model.encode_clip(params, clip, motion, &mut enc_rng)?;
        let l_full = latent.l_full();
        let latent = vidae_core::latent_policy::tail_dropout(&latent, keep)?;
        let mut dec_rng = SeedRng::derive(cfg.sample.decode_seed, clip.id);
        let mut decoded = model.decode_latent(params, &latent, steps, &mut dec_rng)?;
        decoded.id = clip.id;
        let (p, s, d) = clip_metrics(clip, &decoded, teacher)?;
        Ok(ReconRow {
            clip: decoded,
            l_full,
            keep,
            psnr: p,
            ssim: s,
            perceptual: d,
        })
    })
}

pub struct ReconstructArgs {
    pub ckpt: Option<PathBuf>,
    pub input: PathBuf,
    pub out: PathBuf,
    pub len_mode: LenMode,
    pub frac: f64,
    pub steps: Option<usize>,
    pub jobs: usize,
    pub fvd: bool,
    pub write_clips: bool,
}

pub fn reconstruct<T: Real>(cfg: &RunConfig, args: &ReconstructArgs) -> Result<(), CliError> {
    if !(0.0..=1.0).contains(&args.frac) {
        return Err(CliError::Usage(format!("--frac {} outside [0, 1]", args.frac)));
    }
    let vae = load_vae::<T>(cfg, &resolve_ckpt(&args.ckpt, cfg, true)?)?;
    let (index, clips) = load_corpus(&args.input)?;
    let keeps = plan_budgets::<T>(
        args.len_mode,
        args.frac,
        &clips,
        &vae.motion,
        cfg.model.p_t,
        cfg.model.p_s,
    );
    let steps = args.steps.unwrap_or(cfg.sample.steps);
    let teacher = FrozenTeacher::<f64>::random_conv_stack(METRIC_TEACHER_SEED);
    let rows = recon_set(
        cfg,
        &vae.model,
        &vae.params,
        &vae.motion,
        &clips,
        &keeps,
        steps,
        args.jobs,
        &teacher,
    )?;

    std::fs::create_dir_all(&args.out).map_err(|e| io_err(&args.out, e))?;
    let csv_path = args.out.join("metrics.csv");
    let mut csv = String::from("id,motion_level,l_full,keep,frac,psnr,ssim,perceptual\n");
    for (row, entry) in rows.iter().zip(&index.entries) {
        csv.push_str(&format!(
            "{},{},{},{},{:.6},{:.4},{:.6},{:.6}\n",
            entry.id,
            entry.motion_level,
            row.l_full,
            row.keep,
            row.keep as f64 / row.l_full.max(1) as f64,
            row.psnr,
            row.ssim,
            row.perceptual
        ));
        if args.write_clips {
            let p = args.out.join(format!("clip_{:05}.vid", entry.id));
            write_clip_file(&p, &row.clip)?;
        }
    }
    std::fs::write(&csv_path, &csv).map_err(|e| io_err(&csv_path, e))?;

    let mean_psnr = mean(&rows.iter().map(|r| r.psnr).collect::<Vec<_>>());
    let mean_ssim = mean(&rows.iter().map(|r| r.ssim).collect::<Vec<_>>());
    let mean_perc = mean(&rows.iter().map(|r| r.perceptual).collect::<Vec<_>>());
    let mean_frac = mean(
        &rows
            .iter()
            .map(|r| r.keep as f64 / r.l_full.max(1) as f64)
            .collect::<Vec<_>>(),
    );
    let fvd = if args.fvd {
        let net = VideoEmbedNet::frozen(FVD_NET_SEED);
        let recons: Vec<VideoClip> = rows.iter().map(|r| r.clip.clone()).collect();
        Some(toy_fvd(&clips, &recons, &net)?)
    } else {
        None
    };

    let sum_path = args.out.join("summary.txt");
    let mut f = std::fs::File::create(&sum_path).map_err(|e| io_err(&sum_path, e))?;
    writeln!(f, "ckpt_phase = {} (iter {})", vae.meta.phase, vae.meta.iter)
        .map_err(|e| io_err(&sum_path, e))?;
    writeln!(f, "n_clips = {}", rows.len()).map_err(|e| io_err(&sum_path, e))?;
    writeln!(f, "len_mode = {:?}", args.len_mode).map_err(|e| io_err(&sum_path, e))?;
    writeln!(f, "requested_frac = {}", args.frac).map_err(|e| io_err(&sum_path, e))?;
    writeln!(f, "achieved_frac = {mean_frac:.6}").map_err(|e| io_err(&sum_path, e))?;
    writeln!(f, "steps = {steps}").map_err(|e| io_err(&sum_path, e))?;
    writeln!(f, "psnr = {mean_psnr:.4}").map_err(|e| io_err(&sum_path, e))?;
    writeln!(f, "ssim = {mean_ssim:.6}").map_err(|e| io_err(&sum_path, e))?;
    writeln!(f, "perceptual = {mean_perc:.6}").map_err(|e| io_err(&sum_path, e))?;
    if let Some(v) = fvd {
        writeln!(f, "toy_fvd = {v:.4}").map_err(|e| io_err(&sum_path, e))?;
    }
    write_manifest(&args.out, "reconstruct", cfg)?;
    println!(
        "reconstructed {} clips ({:?}, frac {:.3} -> achieved {:.3}): psnr {:.3} dB, ssim {:.4}, perceptual {:.5}{}",
        rows.len(),
        args.len_mode,
        args.frac,
        mean_frac,
        mean_psnr,
        mean_ssim,
        mean_perc,
        fvd.map_or(String::new(), |v| format!(", toy-fvd {v:.3}"))
    );
    Ok(())
}

/// `.vid` files under a directory, sorted by name.
fn list_vid_files(dir: &Path) -> Result<Vec<PathBuf>, CliError> {
    let mut out = Vec::new();
    for entry in std::fs::read_dir(dir).map_err(|e| io_err(dir, e))? {
        let entry = entry.map_err(|e| io_err(dir, e))?;
        let path = entry.path();
        if path.extension().is_some_and(|e| e == "vid") {
            out.push(path);
        }
    }
    if out.is_empty() {
        return Err(CliError::Usage(format!(
            "no .vid files under {}",
            dir.display()
        )));
    }
    out.sort();
    Ok(out)
}

pub struct MetricsArgs {
    pub real: PathBuf,
    pub generated: PathBuf,
    pub out: Option<PathBuf>,
    pub fvd: bool,
    pub jobs: usize,
}

pub fn metrics(cfg: &RunConfig, args: &MetricsArgs) -> Result<(), CliError> {
    let real_files = list_vid_files(&args.real)?;
    let gen_files = list_vid_files(&args.generated)?;
    if real_files.len() != gen_files.len() {
        return Err(CliError::Usage(format!(
            "{} real clips vs {} generated clips",
            real_files.len(),
            gen_files.len()
        )));
    }
    let pairs: Vec<(PathBuf, PathBuf)> = real_files.into_iter().zip(gen_files).collect();
    let teacher = FrozenTeacher::<f64>::random_conv_stack(METRIC_TEACHER_SEED);
    let scored = parallel_map(&pairs, args.jobs, |i, (ra, ga)| {
        let a = read_clip_file(ra, i as u64)?;
        let b = read_clip_file(ga, i as u64)?;
        if (a.t(), a.h(), a.w()) != (b.t(), b.h(), b.w()) {
            return Err(CliError::Usage(format!(
                "clip shape mismatch: {} vs {}",
                ra.display(),
                ga.display()
            )));
        }
        let m = clip_metrics(&a, &b, &teacher)?;
        Ok((a, b, m))
    })?;

    let mut csv = String::from("i,real,generated,psnr,ssim,perceptual\n");
    for (i, ((ra, ga), (_, _, (p, s, d)))) in pairs.iter().zip(&scored).enumerate() {
        csv.push_str(&format!(
            "{i},{},{},{p:.4},{s:.6},{d:.6}\n",
            ra.file_name().unwrap().to_string_lossy(),
            ga.file_name().unwrap().to_string_lossy()
        ));
    }
    let mean_psnr = mean(&scored.iter().map(|x| x.2 .0).collect::<Vec<_>>());
    let mean_ssim = mean(&scored.iter().map(|x| x.2 .1).collect::<Vec<_>>());
    let mean_perc = mean(&scored.iter().map(|x| x.2 .2).collect::<Vec<_>>());
    let fvd = if args.fvd {
        let net = VideoEmbedNet::frozen(FVD_NET_SEED);
        let real: Vec<VideoClip> = scored.iter().map(|x| x.0.clone()).collect();
        let generated: Vec<VideoClip> = scored.iter().map(|x| x.1.clone()).collect();
        Some(toy_fvd(&real, &generated, &net)?)
    } else {
        None
    };
    println!(
        "{} pairs: psnr {mean_psnr:.3} dB, ssim {mean_ssim:.4}, perceptual {mean_perc:.5}{}",
        scored.len(),
        fvd.map_or(String::new(), |v| format!(", toy-fvd {v:.3}"))
    );
    if let Some(out) = &args.out {
        std::fs::create_dir_all(out).map_err(|e| io_err(out, e))?;
        let p = out.join("metrics.csv");
        std::fs::write(&p, &csv).map_err(|e| io_err(&p, e))?;
        let sp = out.join("summary.txt");
        let mut f = std::fs::File::create(&sp).map_err(|e| io_err(&sp, e))?;
        writeln!(f, "n_pairs = {}", scored.len()).map_err(|e| io_err(&sp, e))?;
        writeln!(f, "psnr = {mean_psnr:.4}").map_err(|e| io_err(&sp, e))?;
        writeln!(f, "ssim = {mean_ssim:.6}").map_err(|e| io_err(&sp, e))?;
        writeln!(f, "perceptual = {mean_perc:.6}").map_err(|e| io_err(&sp, e))?;
        if let Some(v) = fvd {
            writeln!(f, "toy_fvd = {v:.4}").map_err(|e| io_err(&sp, e))?;
        }
        write_manifest(out, "metrics", cfg)?;
    }
    Ok(())
}

pub const SWEEP_FRACTIONS: [f64; 5] = [0.0, 0.25, 0.5, 0.75, 1.0];
pub const SWEEP_STEPS: [usize; 4] = [1, 4, 8, 25];
pub const SWEEP_CSV_HEADER: &str = "steps,frac,n_clips,psnr,ssim,perceptual,toy_fvd";
/// PSNR drop between adjacent keep fractions that counts as an inversion.
pub const INVERSION_DB: f64 = 0.3;

pub struct SweepArgs {
    pub ckpt: Option<PathBuf>,
    pub input: PathBuf,
    pub out: PathBuf,
    pub steps_sweep: bool,
    pub n_clips: Option<usize>,
    pub jobs: usize,
}

pub fn sweep_length<T: Real>(cfg: &RunConfig, args: &SweepArgs) -> Result<(), CliError> {
    let vae = load_vae::<T>(cfg, &resolve_ckpt(&args.ckpt, cfg, true)?)?;
    let (_, mut clips) = load_corpus(&args.input)?;
    if let Some(n) = args.n_clips {
        clips.truncate(n.max(1));
    }
    let steps_list: Vec<usize> = if args.steps_sweep {
        SWEEP_STEPS.to_vec()
    } else {
        vec![cfg.sample.steps]
    };
    let teacher = FrozenTeacher::<f64>::random_conv_stack(METRIC_TEACHER_SEED);
    let net = VideoEmbedNet::frozen(FVD_NET_SEED);

    std::fs::create_dir_all(&args.out).map_err(|e| io_err(&args.out, e))?;
    let mut csv = format!("{SWEEP_CSV_HEADER}\n");
    // (steps, frac, psnr, toy_fvd) in sweep order.
    let mut results: Vec<(usize, f64, f64, f64)> = Vec::new();
    for &steps in &steps_list {
        for &frac in &SWEEP_FRACTIONS {
            let keeps = plan_budgets::<T>(
                LenMode::Con,
                frac,
                &clips,
                &vae.motion,
                cfg.model.p_t,
                cfg.model.p_s,
            );
            let rows = recon_set(
                cfg,
                &vae.model,
                &vae.params,
                &vae.motion,
                &clips,
                &keeps,
                steps,
                args.jobs,
                &teacher,
            )?;
            let recons: Vec<VideoClip> = rows.iter().map(|r| r.clip.clone()).collect();
            let m_psnr = mean(&rows.iter().map(|r| r.psnr).collect::<Vec<_>>());
            let m_ssim = mean(&rows.iter().map(|r| r.ssim).collect::<Vec<_>>());
            let m_perc = mean(&rows.iter().map(|r| r.perceptual).collect::<Vec<_>>());
            let fvd = toy_fvd(&clips, &recons, &net)?;
            csv.push_str(&format!(
                "{steps},{frac},{},{m_psnr:.4},{m_ssim:.6},{m_perc:.6},{fvd:.4}\n",
                rows.len()
            ));
            results.push((steps, frac, m_psnr, fvd));
            println!(
                "[sweep] steps {steps:>2} frac {frac:.2}: psnr {m_psnr:.3} dB, ssim {m_ssim:.4}, toy-fvd {fvd:.3}"
            );
        }
    }
    let csv_path = args.out.join("sweep.csv");
    std::fs::write(&csv_path, &csv).map_err(|e| io_err(&csv_path, e))?;

    // Monotonicity report: PSNR should not drop as more 1D tokens are kept.
    let mut report = String::new();
    for &steps in &steps_list {
        let curve: Vec<(f64, f64)> = results
            .iter()
            .filter(|(s, _, _, _)| *s == steps)
            .map(|&(_, f, p, _)| (f, p))
            .collect();
        for pair in curve.windows(2) {
            let drop = pair[0].1 - pair[1].1;
            if drop > INVERSION_DB {
                report.push_str(&format!(
                    "INVERSION steps={steps}: psnr drops {drop:.2} dB from frac {} to {}\n",
                    pair[0].0, pair[1].0
                ));
            }
        }
    }
    if report.is_empty() {
        report = format!("no PSNR inversions > {INVERSION_DB} dB\n");
    }
    let rep_path = args.out.join("summary.txt");
    std::fs::write(&rep_path, &report).map_err(|e| io_err(&rep_path, e))?;
    print!("{report}");

    let rows: Vec<crate::cmd_plot::SweepRow> = results
        .iter()
        .map(|&(steps, frac, psnr, toy_fvd)| crate::cmd_plot::SweepRow {
            steps,
            frac,
            psnr,
            toy_fvd,
        })
        .collect();
    let written = crate::cmd_plot::render_sweep_plots(&rows, &args.out)?;
    write_manifest(&args.out, "sweep-length", cfg)?;
    println!("wrote {} and {}", csv_path.display(), written.join(", "));
    Ok(())
}
