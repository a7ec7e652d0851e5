//! `vidae plot`: render training-loss and length-sweep curves from run CSVs
//! to standalone SVG files, plus a CSV of exactly the plotted points.

use std::path::{Path, PathBuf};

use crate::config::{write_manifest, RunConfig};
use crate::svg::{line_plot, Series};
use crate::util::io_err;
use crate::CliError;

pub struct PlotArgs {
    pub train_csv: Option<PathBuf>,
    pub sweep_csv: Option<PathBuf>,
    pub out: PathBuf,
}

#[derive(Clone, Copy)]
pub struct SweepRow {
    pub steps: usize,
    pub frac: f64,
    pub psnr: f64,
    pub toy_fvd: f64,
}

struct Table {
    header: Vec<String>,
    rows: Vec<Vec<String>>,
}

impl Table {
    fn read(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path).map_err(|e| io_err(path, e))?;
        let mut lines = text.lines();
        let header: Vec<String> = lines
            .next()
            .ok_or_else(|| CliError::Format(format!("{}: empty csv", path.display())))?
            .split(',')
            .map(|s| s.trim().to_string())
            .collect();
        let mut rows = Vec::new();
        for (i, line) in lines.enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let row: Vec<String> = line.split(',').map(|s| s.trim().to_string()).collect();
            if row.len() != header.len() {
                return Err(CliError::Format(format!(
                    "{}: row {} has {} fields, expected {}",
                    path.display(),
                    i + 2,
                    row.len(),
                    header.len()
                )));
            }
            rows.push(row);
        }
        if rows.is_empty() {
            return Err(CliError::Format(format!("{}: no data rows", path.display())));
        }
        Ok(Table { header, rows })
    }

    fn col(&self, name: &str, path: &Path) -> Result<usize, CliError> {
        self.header.iter().position(|h| h == name).ok_or_else(|| {
            CliError::Format(format!("{}: missing column {name:?}", path.display()))
        })
    }

    fn numbers(&self, name: &str, path: &Path) -> Result<Vec<f64>, CliError> {
        let c = self.col(name, path)?;
        self.rows
            .iter()
            .enumerate()
            .map(|(i, r)| {
                r[c].parse::<f64>().map_err(|_| {
                    CliError::Format(format!(
                        "{}: row {} column {name:?}: not a number ({:?})",
                        path.display(),
                        i + 2,
                        r[c]
                    ))
                })
            })
            .collect()
    }
}

fn moving_average(xs: &[f64], window: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(xs.len());
    let mut sum = 0.0;
    for i in 0..xs.len() {
        sum += xs[i];
        if i >= window {
            sum -= xs[i - window];
        }
        out.push(sum / (i.min(window - 1) + 1) as f64);
    }
    out
}

fn write_file(dir: &Path, name: &str, body: &str) -> Result<PathBuf, CliError> {
    let path = dir.join(name);
    std::fs::write(&path, body).map_err(|e| io_err(&path, e))?;
    Ok(path)
}

fn plot_train(csv: &Path, out: &Path) -> Result<Vec<String>, CliError> {
    let table = Table::read(csv)?;
    let iters = table.numbers("iter", csv)?;
    let loss = table.numbers("loss", csv)?;
    let ma = moving_average(&loss, 25);
    let mut written = Vec::new();

    let total = line_plot(
        "Training loss",
        "iteration",
        "loss",
        &[
            Series {
                label: "loss".into(),
                points: iters.iter().copied().zip(loss.iter().copied()).collect(),
            },
            Series {
                label: "loss (ma25)".into(),
                points: iters.iter().copied().zip(ma.iter().copied()).collect(),
            },
        ],
    );
    written.push(write_file(out, "loss_total.svg", &total)?.display().to_string());

    let mut comp_series = Vec::new();
    let mut plotted = String::from("iter,loss,loss_ma25");
    let mut comp_cols: Vec<(String, Vec<f64>)> = Vec::new();
    for name in ["diffusion", "perceptual", "kl", "repa", "align"] {
        let vals = table.numbers(name, csv)?;
        if vals.iter().all(|v| *v == 0.0) {
            continue;
        }
        plotted.push_str(&format!(",{name}"));
        comp_series.push(Series {
            label: name.into(),
            points: iters.iter().copied().zip(vals.iter().copied()).collect(),
        });
        comp_cols.push((name.to_string(), vals));
    }
    plotted.push('\n');
    for i in 0..iters.len() {
        plotted.push_str(&format!("{},{:.9},{:.9}", iters[i], loss[i], ma[i]));
        for (_, vals) in &comp_cols {
            plotted.push_str(&format!(",{:.9}", vals[i]));
        }
        plotted.push('\n');
    }
    let comps = line_plot("Loss components", "iteration", "loss term", &comp_series);
    written.push(write_file(out, "loss_components.svg", &comps)?.display().to_string());
    written.push(write_file(out, "loss_curves.csv", &plotted)?.display().to_string());
    Ok(written)
}

/// The length-sweep charts: PSNR and toy-FVD vs kept fraction (one curve per
/// step count), plus PSNR vs step count (one curve per fraction) when the
/// rows cover more than one step count.
pub fn render_sweep_plots(rows: &[SweepRow], out: &Path) -> Result<Vec<String>, CliError> {
    let mut steps_list: Vec<usize> = rows.iter().map(|r| r.steps).collect();
    steps_list.sort_unstable();
    steps_list.dedup();
    let mut fracs: Vec<f64> = rows.iter().map(|r| r.frac).collect();
    fracs.sort_by(f64::total_cmp);
    fracs.dedup();
    let mut written = Vec::new();

    let by_steps = |metric: fn(&SweepRow) -> f64| -> Vec<Series> {
        steps_list
            .iter()
            .map(|&s| Series {
                label: format!("{s} steps"),
                points: rows
                    .iter()
                    .filter(|r| r.steps == s)
                    .map(|r| (r.frac, metric(r)))
                    .collect(),
            })
            .collect()
    };
    let psnr_svg = line_plot(
        "Reconstruction PSNR vs kept 1D fraction",
        "kept fraction of 1D tokens",
        "PSNR (dB)",
        &by_steps(|r| r.psnr),
    );
    written.push(write_file(out, "psnr_vs_length.svg", &psnr_svg)?.display().to_string());
    let fvd_svg = line_plot(
        "Toy-FVD vs kept 1D fraction",
        "kept fraction of 1D tokens",
        "toy-FVD",
        &by_steps(|r| r.toy_fvd),
    );
    written.push(write_file(out, "fvd_vs_length.svg", &fvd_svg)?.display().to_string());

    if steps_list.len() > 1 {
        let series: Vec<Series> = fracs
            .iter()
            .map(|&f| Series {
                label: format!("frac {f}"),
                points: rows
                    .iter()
                    .filter(|r| r.frac == f)
                    .map(|r| (r.steps as f64, r.psnr))
                    .collect(),
            })
            .collect();
        let svg = line_plot(
            "Reconstruction PSNR vs sampling steps",
            "denoising steps",
            "PSNR (dB)",
            &series,
        );
        written.push(write_file(out, "psnr_vs_steps.svg", &svg)?.display().to_string());
    }
    Ok(written)
}

fn plot_sweep(csv: &Path, out: &Path) -> Result<Vec<String>, CliError> {
    let table = Table::read(csv)?;
    let steps = table.numbers("steps", csv)?;
    let frac = table.numbers("frac", csv)?;
    let psnr = table.numbers("psnr", csv)?;
    let fvd = table.numbers("toy_fvd", csv)?;
    let rows: Vec<SweepRow> = (0..steps.len())
        .map(|i| SweepRow {
            steps: steps[i] as usize,
            frac: frac[i],
            psnr: psnr[i],
            toy_fvd: fvd[i],
        })
        .collect();
    let mut written = render_sweep_plots(&rows, out)?;
    let mut plotted = String::from("steps,frac,psnr,toy_fvd\n");
    for r in &rows {
        plotted.push_str(&format!("{},{},{:.4},{:.4}\n", r.steps, r.frac, r.psnr, r.toy_fvd));
    }
    written.push(write_file(out, "sweep_curves.csv", &plotted)?.display().to_string());
    Ok(written)
}

pub fn run(cfg: &RunConfig, args: &PlotArgs) -> Result<(), CliError> {
    if args.train_csv.is_none() && args.sweep_csv.is_none() {
        return Err(CliError::Usage(
            "plot needs --train-csv and/or --sweep-csv".into(),
        ));
    }
    std::fs::create_dir_all(&args.out).map_err(|e| io_err(&args.out, e))?;
    let mut written = Vec::new();
    if let Some(csv) = &args.train_csv {
        written.extend(plot_train(csv, &args.out)?);
    }
    if let Some(csv) = &args.sweep_csv {
        written.extend(plot_sweep(csv, &args.out)?);
    }
    write_manifest(&args.out, "plot", cfg)?;
    println!("wrote {}", written.join(", "));
    Ok(())
}
