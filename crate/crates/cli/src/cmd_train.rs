//! `vidae train --phase {stage1|stage2|align|dec-ft}`: one optimization phase
//! with CSV logging, periodic checkpoints, and bit-exact resume.

use std::io::Write as _;
use std::path::PathBuf;
use std::time::Instant;

use vidae_core::latentgen::class_for_motion_level;
use vidae_core::rng::SeedRng;
use vidae_core::synthdata::{CorpusIndex, VideoClip};
use vidae_core::tensor::Real;
use vidae_core::trainer::{
    align_finetune_step, decoder_finetune_step, load_checkpoint, stage1_step, stage2_step,
    vae_config_digest, AlignOptions, LdmBundle, StepRecord, TrainPhase, TrainState,
};
use vidae_core::nn::AdamW;

use crate::bundles::{ensure_parent, init_ldm, init_vae, sidecar_path};
use crate::config::RunConfig;
use crate::util::{io_err, read_norm_sidecar};
use crate::CliError;

pub struct TrainArgs {
    pub phase: TrainPhase,
    pub iters: Option<u64>,
    pub resume: bool,
    pub init_from: Option<PathBuf>,
    pub from_scratch: bool,
    pub ckpt: Option<PathBuf>,
    pub ldm: Option<PathBuf>,
    pub data: Option<PathBuf>,
}

/// Checkpoint the previous phase feeds from when `--init-from` is absent.
fn default_init_from(cfg: &RunConfig, phase: TrainPhase) -> Option<PathBuf> {
    let prev = match phase {
        TrainPhase::Stage1 => return None,
        TrainPhase::Stage2 => TrainPhase::Stage1,
        TrainPhase::AlignFinetune => TrainPhase::Stage2,
        TrainPhase::DecoderFinetune => TrainPhase::AlignFinetune,
    };
    Some(cfg.phase_ckpt(prev))
}

pub fn run<T: Real>(cfg: &RunConfig, args: &TrainArgs) -> Result<(), CliError> {
    let phase = args.phase;
    let iters = args.iters.unwrap_or_else(|| cfg.phase_iters(phase));
    let optim = cfg.optim_config(phase, iters);
    optim.validate()?;
    let digest = vae_config_digest(&cfg.encoder_config(), &cfg.decoder_config());
    let ckpt = args.ckpt.clone().unwrap_or_else(|| cfg.phase_ckpt(phase));
    ensure_parent(&ckpt)?;

    let data_dir = args.data.clone().unwrap_or_else(|| cfg.data.dir.clone());
    let index_path = data_dir.join("index.csv");
    let index = CorpusIndex::read_csv(&index_path)?;
    let n_clips = index.entries.len();
    if n_clips == 0 {
        return Err(CliError::Usage(format!(
            "empty corpus at {}",
            index_path.display()
        )));
    }

    let (model, template) = init_vae::<T>(cfg)?;
    let mut state = if args.resume {
        let st = TrainState::load(&ckpt, &digest, template, optim.adam())?;
        if st.phase != phase {
            return Err(CliError::Usage(format!(
                "checkpoint {} holds phase {}, not {phase}",
                ckpt.display(),
                st.phase
            )));
        }
        println!("resumed {} at iteration {}", ckpt.display(), st.iter);
        st
    } else {
        let mut params = template;
        let mut motion = Default::default();
        let init_from = if args.from_scratch {
            None
        } else {
            args.init_from.clone().or_else(|| default_init_from(cfg, phase))
        };
        match init_from {
            Some(from) => {
                if !from.exists() {
                    return Err(CliError::Usage(format!(
                        "initialization checkpoint {} missing (train the earlier phase first or pass --init-from)",
                        from.display()
                    )));
                }
                let mut opt = AdamW::new(optim.adam(), params.len());
                let (meta, _) = load_checkpoint(&from, &digest, &mut params, &mut opt)?;
                motion = meta.motion;
                println!(
                    "initialized from {} ({} @ iteration {})",
                    from.display(),
                    meta.phase,
                    meta.iter
                );
            }
            None => println!("fresh {phase} initialization"),
        }
        let mut st = TrainState::new(params, optim.adam(), phase, cfg.train.seed);
        st.motion = motion;
        st.rng = SeedRng::derive(cfg.train.seed, phase.as_u32() as u64);
        st
    };

    // Latent generator, only for decoder fine-tuning.
    let ldm_loaded = if phase == TrainPhase::DecoderFinetune {
        let path = args.ldm.clone().unwrap_or_else(|| cfg.ldm_ckpt());
        let ldm_cfg = cfg.ldm_config();
        let (ldm_model, mut ldm_params) = init_ldm::<T>(cfg)?;
        let mut opt = AdamW::new(optim.adam(), ldm_params.len());
        load_checkpoint(
            &path,
            &vidae_core::trainer::ldm_config_digest(&ldm_cfg),
            &mut ldm_params,
            &mut opt,
        )?;
        let norm = read_norm_sidecar(&sidecar_path(&path))?;
        Some((ldm_model, ldm_params, norm))
    } else {
        None
    };

    let log_path = ckpt.with_extension("csv");
    ensure_parent(&log_path)?;
    let fresh_log = !(args.resume && log_path.exists());
    let mut log = std::fs::OpenOptions::new()
        .create(true)
        .append(!fresh_log)
        .write(true)
        .truncate(fresh_log)
        .open(&log_path)
        .map_err(|e| io_err(&log_path, e))?;
    if fresh_log {
        writeln!(log, "{}", StepRecord::csv_header()).map_err(|e| io_err(&log_path, e))?;
    }

    let align_opts = AlignOptions {
        l_align: cfg.train.l_align,
        kl_weight: cfg.train.kl_weight_align,
    };
    let n_classes = cfg.ldm_config().n_classes;
    let started = Instant::now();
    let mut last: Option<StepRecord> = None;
    while state.iter < iters {
        let rows: Vec<usize> = (0..optim.batch_size)
            .map(|_| state.rng.below(n_clips))
            .collect();
        let mut batch: Vec<VideoClip> = Vec::with_capacity(rows.len());
        for &r in &rows {
            batch.push(index.load_clip(&index_path, r)?);
        }
        let rec = match phase {
            TrainPhase::Stage1 => stage1_step(&model, &mut state, &batch)?,
            TrainPhase::Stage2 => stage2_step(&model, &mut state, &batch)?,
            TrainPhase::AlignFinetune => {
                align_finetune_step(&model, &mut state, &batch, align_opts)?
            }
            TrainPhase::DecoderFinetune => {
                let (ldm_model, ldm_params, norm) =
                    ldm_loaded.as_ref().expect("generator loaded for dec-ft");
                let bundle = LdmBundle {
                    model: ldm_model,
                    params: ldm_params,
                    norm,
                };
                let classes: Vec<usize> = rows
                    .iter()
                    .map(|&r| class_for_motion_level(index.entries[r].motion_level, n_classes))
                    .collect();
                decoder_finetune_step(&model, &bundle, &classes, &mut state, &batch)?
            }
        };
        writeln!(log, "{}", rec.csv_row()).map_err(|e| io_err(&log_path, e))?;
        if rec.iter % cfg.train.log_every == 0 || rec.iter == iters {
            println!(
                "[{phase}] iter {:>6}/{iters}  loss {:>10.5}  diff {:.5}  grad {:.4}{}",
                rec.iter,
                rec.loss,
                rec.diffusion,
                rec.grad_norm,
                if rec.skipped { "  SKIPPED (spike)" } else { "" }
            );
        }
        if rec.iter % cfg.train.save_every == 0 {
            state.save(&ckpt, &digest)?;
        }
        last = Some(rec);
    }
    state.save(&ckpt, &digest)?;
    crate::config::write_manifest(&cfg.train.ckpt_dir, "train", cfg)?;
    let mins = started.elapsed().as_secs_f64() / 60.0;
    if let Some(rec) = last {
        println!(
            "done: {phase} -> {} (iteration {}, loss {:.5}, {} spike-skipped, {mins:.1} min)",
            ckpt.display(),
            state.iter,
            rec.loss,
            state.skipped
        );
    } else {
        println!("nothing to do: checkpoint already at iteration {}", state.iter);
    }
    Ok(())
}
