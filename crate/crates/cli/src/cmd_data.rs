//! `vidae gen-data`: deterministic synthetic corpus generation.

use std::path::PathBuf;

use vidae_core::synthdata::generate_corpus;

use crate::config::{write_manifest, RunConfig};
use crate::CliError;

pub struct GenDataArgs {
    pub out: Option<PathBuf>,
    pub n: Option<usize>,
    pub seed: Option<u64>,
    /// Generate the held-out evaluation split (its own dir, count, and seed).
    pub eval: bool,
}

pub fn run(cfg: &RunConfig, args: &GenDataArgs) -> Result<(), CliError> {
    let d = &cfg.data;
    let (dir, n, seed) = if args.eval {
        (d.eval_dir.clone(), d.n_eval_clips, d.eval_seed)
    } else {
        (d.dir.clone(), d.n_clips, d.seed)
    };
    let dir = args.out.clone().unwrap_or(dir);
    let n = args.n.unwrap_or(n);
    let seed = args.seed.unwrap_or(seed);
    let index = generate_corpus(&dir, n, d.n_levels, d.t, d.h, d.w, d.n_shapes, seed)?;
    write_manifest(&dir, "gen-data", cfg)?;
    println!(
        "wrote {} clips ({}x{}x{}, {} motion levels, seed {seed}) to {}",
        index.entries.len(),
        d.t,
        d.h,
        d.w,
        d.n_levels,
        dir.display()
    );
    Ok(())
}
