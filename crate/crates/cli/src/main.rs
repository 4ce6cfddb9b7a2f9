//! `wrf`: train, sweep, probe landscapes and self-check.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use wrf_core::diffcore::OpKind;
use wrf_core::evalkit;
use wrf_core::experiment::ExperimentConfig;
use wrf_core::model::{self, checkpoint, Model};
use wrf_core::objective::{ordered_batches, ContrastiveObjective, MeanOverBatches};
use wrf_core::selfcheck::{self, SelfcheckOptions};
use wrf_core::trainer::{self, RunRecord};
use wrf_core::{Error, Params64};

const EXIT_SELFCHECK: u8 = 1;
const EXIT_CONFIG: u8 = 2;
const EXIT_NUMERIC: u8 = 3;
const EXIT_PARTIAL: u8 = 4;

#[derive(Parser)]
#[command(name = "wrf", version, about = "Weight-perturbed fine-tuning experiments on synthetic composed retrieval")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(clap::Args)]
struct ConfigArgs {
    /// `key=value` config file; defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override a setting, e.g. `--set gamma=0`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

#[derive(Clone, Copy, ValueEnum)]
enum SweepParam {
    Gamma,
    Rho,
    Fraction,
    LoraRank,
}

impl SweepParam {
    fn key(self) -> &'static str {
        match self {
            SweepParam::Gamma => "gamma",
            SweepParam::Rho => "rho",
            SweepParam::Fraction => "fraction",
            SweepParam::LoraRank => "lora_rank",
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Train one run; writes metrics.csv, checkpoints and config.echo.
    Train(ConfigArgs),
    /// One run per value and seed; writes sweep_summary.csv.
    Sweep {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long, value_enum)]
        param: SweepParam,
        /// Comma-separated values.
        #[arg(long, value_delimiter = ',', required = true)]
        values: Vec<String>,
        /// Comma-separated seeds; defaults to the config seed.
        #[arg(long, value_delimiter = ',')]
        seeds: Vec<u64>,
    },
    /// Training-set loss along normalized random directions around a checkpoint.
    Landscape {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value_t = 10)]
        directions: usize,
        /// Comma-separated alphas; defaults to 21 points from -0.1 to 0.1.
        #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
        alphas: Vec<f64>,
        #[arg(long, default_value_t = 0)]
        direction_seed: u64,
        /// Output CSV; defaults to landscape.csv next to the checkpoint.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Gradient oracle, perturbation budget and update-equivalence checks.
    Selfcheck {
        #[arg(long, default_value_t = 100)]
        seeds: u64,
    },
    /// Export the configured dataset in the binary dataset format.
    Dataset {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long)]
        out: PathBuf,
    },
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Numeric(_) | Error::NonFinite { .. } => EXIT_NUMERIC,
        _ => EXIT_CONFIG,
    }
}

fn threads() -> usize {
    std::env::var("WRF_THREADS")
        .ok()
        .and_then(|v| v.parse().ok())
        .filter(|&n| n >= 1)
        .unwrap_or(1)
}

fn load_config(args: &ConfigArgs) -> wrf_core::Result<ExperimentConfig> {
    let mut cfg = match &args.config {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::default(),
    };
    for o in &args.overrides {
        cfg.set_pair(o)?;
    }
    cfg.train.threads = threads();
    cfg.resolve()?;
    Ok(cfg)
}

fn run_one(cfg: &ExperimentConfig, dir: &Path) -> wrf_core::Result<RunRecord> {
    let (_, model_cfg, train_cfg) = cfg.resolve()?;
    let data = cfg.dataset()?;
    fs::create_dir_all(dir)?;
    fs::write(dir.join("config.echo"), cfg.echo())?;
    let run = trainer::train::<f64>(&train_cfg, &model_cfg, &data, Some(dir))?;
    Ok(run.record)
}

fn cmd_train(args: &ConfigArgs) -> wrf_core::Result<()> {
    let cfg = load_config(args)?;
    let dir = cfg.run_dir();
    let rec = run_one(&cfg, &dir)?;
    println!(
        "run {}: best epoch {} val rmean {:.2} gap {:.2} ({})",
        dir.display(),
        rec.best_epoch.unwrap_or(0),
        rec.best_val_rmean().unwrap_or(f64::NAN),
        rec.gap_at_best().unwrap_or(f64::NAN),
        rec.config_hash
    );
    Ok(())
}

struct SummaryRow {
    value: String,
    sort_key: f64,
    seed: u64,
    rec: RunRecord,
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

fn cmd_sweep(args: &ConfigArgs, param: SweepParam, values: &[String], seeds: &[u64]) -> Result<(), u8> {
    let base = load_config(args).map_err(|e| report(&e))?;
    let seeds = if seeds.is_empty() { vec![base.seed] } else { seeds.to_vec() };
    let key = param.key();
    let mut rows = Vec::new();
    let mut failures = 0;
    for value in values {
        let sort_key: f64 = value.parse().map_err(|_| {
            eprintln!("error: sweep value `{value}` is not a number");
            EXIT_CONFIG
        })?;
        for &seed in &seeds {
            let mut cfg = base.clone();
            let name = format!("{key}={value}/seed={seed}");
            let outcome = cfg
                .set(key, value)
                .and_then(|_| cfg.set("seed", &seed.to_string()))
                .and_then(|_| run_one(&cfg, &base.output_dir.join(&name)));
            match outcome {
                Ok(rec) => {
                    eprintln!(
                        "{name}: best val rmean {:.2} at epoch {}",
                        rec.best_val_rmean().unwrap_or(f64::NAN),
                        rec.best_epoch.unwrap_or(0)
                    );
                    rows.push(SummaryRow {
                        value: value.clone(),
                        sort_key,
                        seed,
                        rec,
                    });
                }
                Err(e) => {
                    eprintln!("{name}: failed: {e}");
                    failures += 1;
                }
            }
        }
    }
    rows.sort_by(|a, b| a.sort_key.total_cmp(&b.sort_key).then(a.seed.cmp(&b.seed)));
    let write = || -> std::io::Result<()> {
        fs::create_dir_all(&base.output_dir)?;
        let mut w = BufWriter::new(File::create(base.output_dir.join("sweep_summary.csv"))?);
        writeln!(
            w,
            "param,value,seed,best_val_rmean,final_val_rmean,gap_at_best,epoch_of_best,seconds_per_epoch"
        )?;
        for r in &rows {
            writeln!(
                w,
                "{key},{},{},{},{},{},{},{}",
                r.value,
                r.seed,
                opt(r.rec.best_val_rmean()),
                opt(r.rec.final_val_rmean()),
                opt(r.rec.gap_at_best()),
                r.rec.best_epoch.map(|e| e.to_string()).unwrap_or_default(),
                r.rec.seconds_per_epoch()
            )?;
        }
        w.flush()
    };
    if let Err(e) = write() {
        eprintln!("error: writing sweep summary: {e}");
        return Err(EXIT_CONFIG);
    }
    if failures > 0 {
        eprintln!("{failures} run(s) failed; summary holds the remaining {}", rows.len());
        return Err(EXIT_PARTIAL);
    }
    Ok(())
}

fn default_alphas() -> Vec<f64> {
    (0..21).map(|i| (i as f64 - 10.0) / 100.0).collect()
}

fn cmd_landscape(
    args: &ConfigArgs,
    ckpt: &Path,
    directions: usize,
    alphas: &[f64],
    seed: u64,
    out: Option<&Path>,
) -> wrf_core::Result<()> {
    let cfg = load_config(args)?;
    let (_, model_cfg, train_cfg) = cfg.resolve()?;
    let params: Params64 = checkpoint::load(ckpt)?;
    let mode = model::detect_mode(&params);
    let objective = ContrastiveObjective::new(Model::new(model_cfg, mode)?, train_cfg.tau)?;
    let data = cfg.dataset()?;
    let batches = ordered_batches(&data, &data.train, train_cfg.batch_size)?;
    let alphas = if alphas.is_empty() { default_alphas() } else { alphas.to_vec() };
    let curves = evalkit::landscape_probe(
        &MeanOverBatches(objective),
        &params,
        &batches,
        directions,
        &alphas,
        seed,
        threads(),
    )?;
    let path = out
        .map(Path::to_path_buf)
        .unwrap_or_else(|| ckpt.with_file_name("landscape.csv"));
    evalkit::write_landscape_csv(BufWriter::new(File::create(&path)?), &curves)?;
    if let (Some(i0), Some(i5)) = (
        alphas.iter().position(|&a| a == 0.0),
        alphas.iter().position(|&a| (a - 0.05).abs() < 1e-12),
    ) {
        let f = curves.iter().map(|c| c.losses[i5] - c.losses[i0]).sum::<f64>() / curves.len() as f64;
        println!("flatness at alpha=0.05: {f:.6}");
    }
    println!("wrote {} rows to {}", curves.len() * alphas.len(), path.display());
    Ok(())
}

fn cmd_selfcheck(seeds: u64) -> Result<(), u8> {
    let fault = match std::env::var("WRF_SELFCHECK_FAULT") {
        Ok(name) if !name.is_empty() => match OpKind::parse(&name) {
            Some(k) => Some(k),
            None => {
                eprintln!("error: unknown op `{name}` in WRF_SELFCHECK_FAULT");
                return Err(EXIT_CONFIG);
            }
        },
        _ => None,
    };
    let results = selfcheck::run(&SelfcheckOptions { seeds, fault });
    let width = results.iter().map(|r| r.name.len()).max().unwrap_or(0);
    let mut ok = true;
    for r in &results {
        println!(
            "{:<width$}  {}  {:>6.2}s  {}",
            r.name,
            if r.passed { "PASS" } else { "FAIL" },
            r.seconds,
            r.detail
        );
        ok &= r.passed;
    }
    if ok {
        Ok(())
    } else {
        for r in results.iter().filter(|r| !r.passed) {
            eprintln!("selfcheck failed: {}", r.name);
        }
        Err(EXIT_SELFCHECK)
    }
}

fn cmd_dataset(args: &ConfigArgs, out: &Path) -> wrf_core::Result<()> {
    let cfg = load_config(args)?;
    let data = cfg.dataset()?;
    let mut w = BufWriter::new(File::create(out)?);
    data.export(&mut w)?;
    w.flush()?;
    Ok(())
}

fn report(e: &Error) -> u8 {
    eprintln!("error: {e}");
    exit_code(e)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Train(args) => cmd_train(args).map_err(|e| report(&e)),
        Command::Sweep {
            config,
            param,
            values,
            seeds,
        } => cmd_sweep(config, *param, values, seeds),
        Command::Landscape {
            config,
            checkpoint,
            directions,
            alphas,
            direction_seed,
            out,
        } => cmd_landscape(config, checkpoint, *directions, alphas, *direction_seed, out.as_deref())
            .map_err(|e| report(&e)),
        Command::Selfcheck { seeds } => cmd_selfcheck(*seeds),
        Command::Dataset { config, out } => cmd_dataset(config, out).map_err(|e| report(&e)),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(code) => ExitCode::from(code),
    }
}
