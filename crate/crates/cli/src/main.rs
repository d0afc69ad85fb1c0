use std::fs::{self, File};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use adafisher::diagnostics::{
    factor_snapshot, fft2, fim_hist_stats, gershgorin, perturb_offdiag, snr, write_discs_csv, write_fim_stats_csv,
    write_snr_csv, write_spectra_csv, FimStatsRow, Snapshot, DEFAULT_SIGMA,
};
use adafisher::fisher::{approximation_mae, exact_fisher_diag, kf_product_diag, mc_fisher_diag, FisherDiag};
use adafisher::train::{build_model, prepare_data, run_training, RunConfig, RunReport};
use adafisher::Error;
use clap::{Parser, Subcommand, ValueEnum};

#[derive(Parser)]
#[command(name = "adafisher", version, about = "AdaFisher training, Fisher oracles and curvature diagnostics")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model described by a JSON run config.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Also save dense Kronecker factors of the trained model.
        #[arg(long)]
        snapshot: bool,
    },
    /// Analyze matrices saved by `train --snapshot`.
    Diagnose {
        #[arg(long)]
        snapshot: PathBuf,
        #[arg(long, value_enum)]
        analysis: Analysis,
        #[arg(long, default_value = ".")]
        out: PathBuf,
        /// Noise scale for the spectral perturbation.
        #[arg(long, default_value_t = DEFAULT_SIGMA)]
        sigma: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Compare the Kronecker-factored diagonal with the Fisher at initialization.
    Oracle {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, value_enum, default_value_t = OracleMode::Exact)]
        mode: OracleMode,
        /// Eval samples to average over.
        #[arg(long, default_value_t = 32)]
        probe: usize,
        /// Label draws per input in Monte-Carlo mode.
        #[arg(long, default_value_t = 1000)]
        samples: usize,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train with the batch split across simulated workers.
    Distributed {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        workers: usize,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum Analysis {
    Gershgorin,
    Fft,
    Snr,
    Fim,
}

#[derive(Clone, Copy, PartialEq, ValueEnum)]
enum OracleMode {
    Exact,
    Mc,
}

/// Process exit status for an error.
fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) | Error::Json(_) | Error::Unsupported(_) | Error::Dimension(_) | Error::Size(_) => 2,
        Error::Io(_)
        | Error::Format(_)
        | Error::Length(_)
        | Error::Parse { .. }
        | Error::Csv(_)
        | Error::Input(_) => 3,
        Error::Numeric(_) => 4,
        Error::State(_) => 1,
    }
}

fn load_config(path: &Path) -> Result<RunConfig, Error> {
    let text = fs::read_to_string(path).map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
    RunConfig::from_json(&text)
}

fn summarize(report: &RunReport) -> Result<(), Error> {
    let last = report.last();
    let summary = serde_json::json!({
        "metrics": report.metrics_path,
        "epochs": last.epoch,
        "train_loss": last.train_loss,
        "eval_loss": last.eval_loss,
        "accuracy": last.accuracy,
        "mean_step_ms": report.mean_step_ms,
    });
    println!("{summary}");
    Ok(())
}

fn train(config: &Path, seed: Option<u64>, out: Option<PathBuf>, snapshot: bool, workers: Option<usize>) -> Result<(), Error> {
    let mut cfg = load_config(config)?;
    if let Some(s) = seed {
        cfg.seed = s;
    }
    if out.is_some() {
        cfg.output_dir = out;
    }
    if let Some(k) = workers {
        cfg.workers = k;
    }
    let report = run_training(&cfg)?;
    if snapshot {
        let (_, eval) = prepare_data(&cfg)?;
        let mut model = build_model(&cfg, &eval)?;
        model.set_flat_params(&report.final_params)?;
        let n = eval.len().min(256);
        let probe = eval.select(&(0..n).collect::<Vec<_>>())?;
        let path = report.output_dir.join("snapshot.json");
        factor_snapshot(&model, &probe.inputs, &probe.targets)?.save(&path)?;
        log::info!("snapshot written to {}", path.display());
    }
    summarize(&report)
}

fn diagnose(snapshot: &Path, analysis: Analysis, out: &Path, sigma: f64, seed: u64) -> Result<(), Error> {
    let snap = Snapshot::load(snapshot)?;
    fs::create_dir_all(out)?;
    let mats = snap
        .matrices
        .iter()
        .map(|m| Ok((m.layer, m.name.clone(), m.to_tensor()?)))
        .collect::<Result<Vec<_>, Error>>()?;
    match analysis {
        Analysis::Gershgorin => {
            let mut discs = Vec::new();
            let mut spectra = Vec::new();
            for (layer, name, m) in &mats {
                let d = gershgorin(m)?;
                let p = perturb_offdiag(m, sigma, seed)?;
                let dominant = d.dominance.iter().filter(|&&r| r > 1.0).count();
                println!(
                    "{}",
                    serde_json::json!({
                        "layer": layer, "factor": name, "rows": d.centers.len(),
                        "dominant_rows": dominant, "contained": d.contained,
                        "kaiser_before": p.kaiser_before, "kaiser_after": p.kaiser_after,
                        "max_shift": p.max_shift(),
                    })
                );
                discs.push((*layer, d));
                spectra.push((*layer, p));
            }
            write_discs_csv(File::create(out.join("discs.csv"))?, &discs.iter().map(|(l, d)| (*l, d)).collect::<Vec<_>>())?;
            write_spectra_csv(File::create(out.join("spectra.csv"))?, &spectra.iter().map(|(l, p)| (*l, p)).collect::<Vec<_>>())?;
        }
        Analysis::Fft | Analysis::Snr => {
            let mut rows = Vec::new();
            for (layer, name, m) in &mats {
                let s = if matches!(analysis, Analysis::Fft) {
                    let mag = fft2(m)?.magnitude()?;
                    snr(&mag, &mag)?
                } else {
                    snr(m, m)?
                };
                println!("{}", serde_json::json!({"layer": layer, "factor": name, "snr_db": s.db, "infinite": s.infinite}));
                rows.push((*layer, s));
            }
            write_snr_csv(File::create(out.join("snr.csv"))?, &rows)?;
        }
        Analysis::Fim => {
            let mut rows = Vec::new();
            for (layer, name, m) in &mats {
                let diag: Vec<f64> = (0..m.rows().min(m.cols())).map(|i| m.at(i, i)).collect();
                rows.push(FimStatsRow {
                    step: 0,
                    layer: *layer,
                    source: name.clone(),
                    stats: fim_hist_stats(&diag)?,
                });
            }
            for r in &rows {
                println!("{}", serde_json::to_string(r)?);
            }
            write_fim_stats_csv(File::create(out.join("fim_stats.csv"))?, &rows)?;
        }
    }
    Ok(())
}

fn write_fisher_csv(path: &Path, f: &FisherDiag, kf: &FisherDiag) -> Result<(), Error> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["layer", "index", "fisher", "kf_product"])?;
    for (a, b) in f.blocks.iter().zip(&kf.blocks) {
        let xs = a.diag.iter().flatten();
        let ys = b.diag.iter().flatten();
        for (i, (x, y)) in xs.zip(ys).enumerate() {
            w.write_record(&[a.layer.to_string(), i.to_string(), format!("{x:e}"), format!("{y:e}")])?;
        }
    }
    w.flush()?;
    Ok(())
}

fn oracle(config: &Path, mode: OracleMode, probe: usize, samples: usize, out: Option<PathBuf>) -> Result<(), Error> {
    let cfg = load_config(config)?;
    cfg.validate()?;
    if probe == 0 {
        return Err(Error::Config("probe must be at least 1".into()));
    }
    let (_, eval) = prepare_data(&cfg)?;
    let model = build_model(&cfg, &eval)?;
    let idx: Vec<usize> = (0..probe.min(eval.len())).collect();
    let batch = eval.inputs.select_rows(&idx)?;
    let fisher = match mode {
        OracleMode::Exact => exact_fisher_diag(&model, &batch)?,
        OracleMode::Mc => mc_fisher_diag(&model, &batch, samples, cfg.seed)?,
    };
    let kf = kf_product_diag(&model, &batch, None)?;
    let mae = approximation_mae(&fisher, &kf.flatten())?;
    let dir = out.unwrap_or_else(|| cfg.resolve_output_dir());
    fs::create_dir_all(&dir)?;
    let path = dir.join("fisher.csv");
    write_fisher_csv(&path, &fisher, &kf)?;
    println!(
        "{}",
        serde_json::json!({"mode": if mode == OracleMode::Exact { "exact" } else { "mc" },
            "entries": fisher.len(), "mae": mae, "csv": path})
    );
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Train {
            config,
            seed,
            out,
            snapshot,
        } => train(&config, seed, out, snapshot, None),
        Command::Diagnose {
            snapshot,
            analysis,
            out,
            sigma,
            seed,
        } => diagnose(&snapshot, analysis, &out, sigma, seed),
        Command::Oracle {
            config,
            mode,
            probe,
            samples,
            out,
        } => oracle(&config, mode, probe, samples, out),
        Command::Distributed { config, workers, out } => train(&config, None, out, false, Some(workers)),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
