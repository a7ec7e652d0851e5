//! `vidae train-ldm` and `vidae sample`: the latent generator side.

use std::io::Write as _;
use std::path::PathBuf;

use vidae_core::encoder::HybridLatent;
use vidae_core::latentfile::write_latent_file;
use vidae_core::latentgen::{class_for_motion_level, compute_latent_norm, ldm_sample, ldm_train_step};
use vidae_core::nn::{AdamConfig, AdamW};
use vidae_core::rng::SeedRng;
use vidae_core::synthdata::{write_clip_file, CorpusIndex};
use vidae_core::tensor::Real;
use vidae_core::trainer::{ldm_config_digest, save_checkpoint, CheckpointMeta, TrainPhase};

use crate::bundles::{ensure_parent, init_ldm, load_ldm, load_vae, resolve_ckpt, sidecar_path};
use crate::config::{write_manifest, RunConfig};
use crate::util::{io_err, latent_to_f32, parallel_map, write_norm_sidecar};
use crate::CliError;

pub struct TrainLdmArgs {
    pub vae: Option<PathBuf>,
    pub ckpt: Option<PathBuf>,
    pub iters: Option<u64>,
    pub data: Option<PathBuf>,
    pub jobs: usize,
}

pub fn train_ldm<T: Real>(cfg: &RunConfig, args: &TrainLdmArgs) -> Result<(), CliError> {
    let vae_path = resolve_ckpt(&args.vae, cfg, false)?;
    let vae = load_vae::<T>(cfg, &vae_path)?;
    let data_dir = args.data.clone().unwrap_or_else(|| cfg.data.dir.clone());
    let index_path = data_dir.join("index.csv");
    let index = CorpusIndex::read_csv(&index_path)?;
    if index.entries.is_empty() {
        return Err(CliError::Usage(format!(
            "empty corpus at {}",
            index_path.display()
        )));
    }
    let ldm_cfg = cfg.ldm_config();
    println!(
        "encoding {} clips with {} ...",
        index.entries.len(),
        vae_path.display()
    );
    let latents: Vec<HybridLatent<T>> = parallel_map(&index.entries, args.jobs, |_, entry| {
        let clip = vidae_core::synthdata::read_clip_file(
            &index_path.parent().unwrap().join(&entry.path),
            entry.id,
        )?;
        let mut rng = SeedRng::derive(cfg.sample.encode_seed, entry.id);
        Ok(vae.model.encode_clip(&vae.params, &clip, &vae.motion, &mut rng)?)
    })?;
    let norm = compute_latent_norm(&latents)?;
    let corpus: Vec<(HybridLatent<T>, usize)> = latents
        .into_iter()
        .zip(&index.entries)
        .map(|(l, e)| (l, class_for_motion_level(e.motion_level, ldm_cfg.n_classes)))
        .collect();

    let (model, mut params) = init_ldm::<T>(cfg)?;
    let adam = AdamConfig {
        lr: cfg.ldm.lr,
        ..AdamConfig::default()
    };
    let mut opt = AdamW::new(adam, params.len());
    let mut rng = SeedRng::derive(cfg.ldm.seed, 0);
    let iters = args.iters.unwrap_or(cfg.ldm.max_iters);

    let ckpt = args.ckpt.clone().unwrap_or_else(|| cfg.ldm_ckpt());
    ensure_parent(&ckpt)?;
    let log_path = ckpt.with_extension("csv");
    ensure_parent(&log_path)?;
    let mut log = std::fs::File::create(&log_path).map_err(|e| io_err(&log_path, e))?;
    writeln!(log, "iter,loss").map_err(|e| io_err(&log_path, e))?;

    let n = corpus.len();
    for iter in 1..=iters {
        let batch: Vec<(HybridLatent<T>, usize)> = (0..cfg.ldm.batch_size)
            .map(|_| corpus[rng.below(n)].clone())
            .collect();
        let loss = ldm_train_step(&model, &mut params, &mut opt, &norm, &batch, &mut rng)?;
        writeln!(log, "{iter},{loss}").map_err(|e| io_err(&log_path, e))?;
        if iter % cfg.train.log_every == 0 || iter == iters {
            println!("[ldm] iter {iter:>6}/{iters}  loss {loss:.5}");
        }
    }

    let meta = CheckpointMeta {
        phase: TrainPhase::Stage1,
        iter: iters,
        adam_step: opt.step_count(),
        skipped: 0,
        motion: vae.motion,
        rng: rng.state(),
    };
    save_checkpoint(&ckpt, &ldm_config_digest(&ldm_cfg), &params, &opt, &meta, &[])?;
    write_norm_sidecar(&sidecar_path(&ckpt), &norm)?;
    write_manifest(&cfg.train.ckpt_dir, "train-ldm", cfg)?;
    println!("done: generator -> {}", ckpt.display());
    Ok(())
}

pub struct SampleArgs {
    pub vae: Option<PathBuf>,
    pub ldm: Option<PathBuf>,
    pub class: usize,
    pub len_budget: usize,
    pub steps: Option<usize>,
    pub latent_steps: Option<usize>,
    pub n_clips: usize,
    pub out: PathBuf,
    pub save_latents: bool,
    pub jobs: usize,
}

pub fn sample<T: Real>(cfg: &RunConfig, args: &SampleArgs) -> Result<(), CliError> {
    let vae_path = resolve_ckpt(&args.vae, cfg, true)?;
    let vae = load_vae::<T>(cfg, &vae_path)?;
    let ldm_path = args.ldm.clone().unwrap_or_else(|| cfg.ldm_ckpt());
    let ldm = load_ldm::<T>(cfg, &ldm_path)?;
    let ldm_cfg = cfg.ldm_config();
    if args.class >= ldm_cfg.n_classes {
        return Err(CliError::Usage(format!(
            "class {} out of range (n_classes = {})",
            args.class, ldm_cfg.n_classes
        )));
    }
    if args.len_budget > ldm_cfg.l_full {
        return Err(CliError::Usage(format!(
            "len-budget {} exceeds L_full {}",
            args.len_budget, ldm_cfg.l_full
        )));
    }
    let steps = args.steps.unwrap_or(cfg.sample.steps);
    let latent_steps = args.latent_steps.unwrap_or(cfg.sample.latent_steps);
    std::fs::create_dir_all(&args.out).map_err(|e| io_err(&args.out, e))?;

    let ids: Vec<u64> = (0..args.n_clips as u64).collect();
    parallel_map(&ids, args.jobs, |_, &i| {
        let mut lat_rng = SeedRng::derive(cfg.sample.seed, i);
        let latent = ldm_sample(
            &ldm.model,
            &ldm.params,
            &ldm.norm,
            args.class,
            args.len_budget,
            latent_steps,
            &mut lat_rng,
        )?;
        let mut dec_rng = SeedRng::derive(cfg.sample.decode_seed, i);
        let mut clip = vae.model.decode_latent(&vae.params, &latent, steps, &mut dec_rng)?;
        clip.id = i;
        write_clip_file(&args.out.join(format!("sample_{i:05}.vid")), &clip)?;
        if args.save_latents {
            write_latent_file(
                &args.out.join(format!("sample_{i:05}.1dva")),
                &latent_to_f32(&latent),
                cfg.model.p_t,
                cfg.model.p_s,
            )?;
        }
        Ok(())
    })?;
    write_manifest(&args.out, "sample", cfg)?;
    println!(
        "wrote {} samples (class {}, 1D budget {}, latent steps {latent_steps}, pixel steps {steps}) to {}",
        args.n_clips,
        args.class,
        args.len_budget,
        args.out.display()
    );
    Ok(())
}
