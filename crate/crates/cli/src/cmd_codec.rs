//! `vidae encode`, `vidae decode`, `vidae latent-stats`: latent container
//! round trips.

use std::io::Write as _;
use std::path::PathBuf;

use vidae_core::latentfile::{read_latent_file, write_latent_file};
use vidae_core::metrics::latent_channel_stats;
use vidae_core::rng::SeedRng;
use vidae_core::synthdata::{write_clip_file, CorpusIndex};
use vidae_core::tensor::Real;

use crate::bundles::{load_vae, resolve_ckpt};
use crate::config::{write_manifest, RunConfig};
use crate::util::{io_err, latent_from_f32, latent_to_f32, list_latent_files, parallel_map};
use crate::CliError;

pub struct EncodeArgs {
    pub ckpt: Option<PathBuf>,
    pub input: PathBuf,
    pub out: PathBuf,
    /// Optional 1D truncation: keep round(frac * L_full) rows.
    pub frac: Option<f64>,
    pub jobs: usize,
}

pub fn encode<T: Real>(cfg: &RunConfig, args: &EncodeArgs) -> Result<(), CliError> {
    let vae = load_vae::<T>(cfg, &resolve_ckpt(&args.ckpt, cfg, false)?)?;
    let index_path = args.input.join("index.csv");
    let index = CorpusIndex::read_csv(&index_path)?;
    std::fs::create_dir_all(&args.out).map_err(|e| io_err(&args.out, e))?;
    if let Some(f) = args.frac {
        if !(0.0..=1.0).contains(&f) {
            return Err(CliError::Usage(format!("--frac {f} outside [0, 1]")));
        }
    }
    parallel_map(&index.entries, args.jobs, |row, entry| {
        let clip = index.load_clip(&index_path, row)?;
        let mut rng = SeedRng::derive(cfg.sample.encode_seed, entry.id);
        let mut latent = vae.model.encode_clip(&vae.params, &clip, &vae.motion, &mut rng)?;
        if let Some(f) = args.frac {
            let keep = ((f * latent.l_full() as f64).round() as usize).min(latent.l_full());
            latent = vidae_core::latent_policy::tail_dropout(&latent, keep)?;
        }
        write_latent_file(
            &args.out.join(format!("lat_{:05}.1dva", entry.id)),
            &latent_to_f32(&latent),
            cfg.model.p_t,
            cfg.model.p_s,
        )?;
        Ok(())
    })?;
    write_manifest(&args.out, "encode", cfg)?;
    println!(
        "encoded {} clips -> {}",
        index.entries.len(),
        args.out.display()
    );
    Ok(())
}

pub struct DecodeArgs {
    pub ckpt: Option<PathBuf>,
    pub input: PathBuf,
    pub out: PathBuf,
    pub steps: Option<usize>,
    pub jobs: usize,
}

pub fn decode<T: Real>(cfg: &RunConfig, args: &DecodeArgs) -> Result<(), CliError> {
    let vae = load_vae::<T>(cfg, &resolve_ckpt(&args.ckpt, cfg, true)?)?;
    let files = list_latent_files(&args.input)?;
    let steps = args.steps.unwrap_or(cfg.sample.steps);
    std::fs::create_dir_all(&args.out).map_err(|e| io_err(&args.out, e))?;
    parallel_map(&files, args.jobs, |_, (id, path)| {
        let (latent32, _) = read_latent_file(path)?;
        let latent = latent_from_f32::<T>(&latent32);
        let mut rng = SeedRng::derive(cfg.sample.decode_seed, *id);
        let mut clip = vae.model.decode_latent(&vae.params, &latent, steps, &mut rng)?;
        clip.id = *id;
        write_clip_file(&args.out.join(format!("clip_{id:05}.vid")), &clip)?;
        Ok(())
    })?;
    write_manifest(&args.out, "decode", cfg)?;
    println!("decoded {} latents -> {}", files.len(), args.out.display());
    Ok(())
}

pub struct LatentStatsArgs {
    pub input: PathBuf,
    pub out: Option<PathBuf>,
}

pub fn latent_stats(cfg: &RunConfig, args: &LatentStatsArgs) -> Result<(), CliError> {
    let files = list_latent_files(&args.input)?;
    let mut latents = Vec::with_capacity(files.len());
    for (_, path) in &files {
        latents.push(read_latent_file(path)?.0);
    }
    let stats = latent_channel_stats(&latents)?;
    let mut csv = String::from("section,channel,mean,std\n");
    for (i, (m, s)) in stats.struct_mean.iter().zip(&stats.struct_std).enumerate() {
        csv.push_str(&format!("struct,{i},{m},{s}\n"));
    }
    for (i, (m, s)) in stats.oned_mean.iter().zip(&stats.oned_std).enumerate() {
        csv.push_str(&format!("oned,{i},{m},{s}\n"));
    }
    println!(
        "{} latents, {} channels",
        latents.len(),
        stats.struct_mean.len()
    );
    println!("std_correlation = {:.6}", stats.std_correlation);
    if let Some(out) = &args.out {
        std::fs::create_dir_all(out).map_err(|e| io_err(out, e))?;
        let path = out.join("latent_stats.csv");
        std::fs::write(&path, &csv).map_err(|e| io_err(&path, e))?;
        let sum = out.join("latent_stats_summary.txt");
        let mut f = std::fs::File::create(&sum).map_err(|e| io_err(&sum, e))?;
        writeln!(f, "n_latents = {}", latents.len()).map_err(|e| io_err(&sum, e))?;
        writeln!(f, "std_correlation = {}", stats.std_correlation)
            .map_err(|e| io_err(&sum, e))?;
        write_manifest(out, "latent-stats", cfg)?;
        println!("wrote {}", path.display());
    } else {
        print!("{csv}");
    }
    Ok(())
}
