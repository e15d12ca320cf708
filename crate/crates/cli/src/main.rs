//! `dscl` command-line front end.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;

use dscl::checkpoint::{Checkpoint, SavedModel};
use dscl::config::RunConfig;
use dscl::data::{load_tabular, read_header, LABEL_RATES};
use dscl::eval::{angular_error, metric_suite, AngularMode, MetricReport};
use dscl::experiment::{
    ablation_variants, format_reports, load_task, run_on, sub_dir, write_json, write_sweep_csv, SweepRow,
    METRICS_FILE,
};
use dscl::ranking::rank_ambiguity;
use dscl::{DsclError, Result};

#[derive(Parser)]
#[command(name = "dscl", version, about = "Semi-supervised multi-target regression with disentangled subspaces")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    /// Only print errors.
    #[arg(long, global = true)]
    quiet: bool,
    /// Worker threads for `ablate` and `sweep` (default: all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
}

#[derive(Subcommand)]
enum Command {
    /// Train and evaluate one configuration.
    Train {
        config: PathBuf,
        /// Overrides DSCL_SEED and the config seed.
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out_dir: Option<PathBuf>,
    },
    /// Evaluate a saved model on a CSV file.
    Eval {
        checkpoint: PathBuf,
        data: PathBuf,
        /// Input columns (default: the first columns of the file).
        #[arg(long, value_delimiter = ',')]
        inputs: Vec<String>,
        /// Target columns (default: the columns after the inputs).
        #[arg(long, value_delimiter = ',')]
        targets: Vec<String>,
        #[arg(long, value_enum)]
        angular: Option<AngularArg>,
        #[arg(long)]
        out_dir: Option<PathBuf>,
    },
    /// Run the ablation grid: full objective, each term removed, no init.
    Ablate {
        config: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        /// Repeat every variant for each of these seeds.
        #[arg(long, value_delimiter = ',')]
        seeds: Vec<u64>,
        #[arg(long)]
        out_dir: Option<PathBuf>,
    },
    /// Train at several label rates.
    Sweep {
        config: PathBuf,
        #[arg(long, value_delimiter = ',', default_values_t = vec![0.20, 0.10, 0.05])]
        rates: Vec<f64>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, value_delimiter = ',')]
        seeds: Vec<u64>,
        #[arg(long)]
        out_dir: Option<PathBuf>,
    },
    /// Exhaustive demonstration that one scalar ranking cannot agree with two
    /// anti-correlated targets.
    DemoAmbiguity {
        #[arg(long, default_value_t = 6)]
        batch: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out_dir: Option<PathBuf>,
    },
}

#[derive(Clone, Copy, clap::ValueEnum)]
enum AngularArg {
    Euler2,
    Vec3,
}

impl From<AngularArg> for AngularMode {
    fn from(a: AngularArg) -> Self {
        match a {
            AngularArg::Euler2 => AngularMode::Euler2,
            AngularArg::Vec3 => AngularMode::Vec3,
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(if cli.quiet {
        "error"
    } else {
        "warn"
    }))
    .init();
    if let Some(n) = cli.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            eprintln!("error: cannot configure {n} threads: {e}");
            return ExitCode::from(2);
        }
    }
    match dispatch(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn exit_code(e: &DsclError) -> u8 {
    match e {
        DsclError::Config(_) => 2,
        _ => 1,
    }
}

fn dispatch(cli: &Cli) -> Result<()> {
    let say = |s: &str| {
        if !cli.quiet {
            print!("{s}");
        }
    };
    match &cli.command {
        Command::Train { config, seed, out_dir } => {
            let cfg = load_config(config, *seed)?;
            let dir = output_root(&cfg, out_dir.as_deref());
            let data = load_task(&cfg.task)?;
            let out = run_on(&cfg, &data, Some(&dir))?;
            say(&format_reports(&[("test".into(), out.report)]));
            say(&format!("outputs written to {}\n", dir.display()));
        }
        Command::Eval {
            checkpoint,
            data,
            inputs,
            targets,
            angular,
            out_dir,
        } => {
            let report = eval(checkpoint, data, inputs, targets, angular.map(Into::into))?;
            if let Some(dir) = out_dir {
                fs::create_dir_all(dir)?;
                write_json(&dir.join(METRICS_FILE), &report)?;
            }
            println!("{}", serde_json::to_string_pretty(&report)?);
        }
        Command::Ablate {
            config,
            seed,
            seeds,
            out_dir,
        } => {
            let base = load_config(config, *seed)?;
            let dir = output_root(&base, out_dir.as_deref());
            let seeds = seed_list(&base, seeds);
            let data = load_task(&base.task)?;
            let jobs: Vec<(String, RunConfig)> = ablation_variants(&base)
                .into_iter()
                .flat_map(|(name, cfg)| {
                    seeds.iter().map(move |&s| {
                        let mut c = cfg.clone();
                        c.seed = s;
                        (name.to_string(), c)
                    })
                })
                .collect();
            let results = run_jobs(&jobs, &data, &dir, |name, cfg| format!("{name}/seed-{}", cfg.seed))?;
            let rows: Vec<AblationRow> = jobs
                .iter()
                .zip(&results)
                .map(|((name, cfg), r)| AblationRow {
                    variant: name.clone(),
                    seed: cfg.seed,
                    report: r.clone(),
                })
                .collect();
            let summary = summarize(&rows);
            fs::create_dir_all(&dir)?;
            write_json(&dir.join("ablation.json"), &AblationFile { runs: &rows, summary: &summary })?;
            let mut csv = String::from("variant,seed,mae,rmse,pearson,spearman\n");
            for r in &rows {
                csv.push_str(&format!(
                    "{},{},{},{},{},{}\n",
                    r.variant,
                    r.seed,
                    r.report.mae,
                    r.report.rmse,
                    opt(r.report.pearson),
                    opt(r.report.spearman)
                ));
            }
            fs::write(dir.join("ablation.csv"), csv)?;
            let table: Vec<(String, MetricReport)> =
                summary.iter().map(|s| (s.variant.clone(), s.mean.clone())).collect();
            fs::write(dir.join("ablation.txt"), format_reports(&table))?;
            say(&format_reports(&table));
        }
        Command::Sweep {
            config,
            rates,
            seed,
            seeds,
            out_dir,
        } => {
            let base = load_config(config, *seed)?;
            for &r in rates {
                if !LABEL_RATES.iter().any(|&x| (x - r).abs() < 1e-12) {
                    return Err(DsclError::Config(format!("label rate {r} is not one of {LABEL_RATES:?}")));
                }
            }
            let dir = output_root(&base, out_dir.as_deref());
            let seeds = seed_list(&base, seeds);
            let data = load_task(&base.task)?;
            let jobs: Vec<(String, RunConfig)> = rates
                .iter()
                .flat_map(|&rate| {
                    let base = &base;
                    seeds.iter().map(move |&s| {
                        let mut c = base.clone();
                        c.split.label_rate = rate;
                        c.seed = s;
                        (format!("rate-{rate}"), c)
                    })
                })
                .collect();
            for (_, c) in &jobs {
                c.validate()?;
            }
            let results = run_jobs(&jobs, &data, &dir, |name, cfg| format!("{name}/seed-{}", cfg.seed))?;
            let rows: Vec<SweepRow> = jobs
                .iter()
                .zip(&results)
                .map(|((_, c), r)| SweepRow::new(c.split.label_rate, c.seed, r))
                .collect();
            fs::create_dir_all(&dir)?;
            write_sweep_csv(&rows, fs::File::create(dir.join("sweep.csv"))?)?;
            let named: Vec<(String, MetricReport)> = jobs
                .iter()
                .zip(results)
                .map(|((n, c), r)| (format!("{n} seed {}", c.seed), r))
                .collect();
            write_json(&dir.join("sweep.json"), &named)?;
            say(&format_reports(&named));
        }
        Command::DemoAmbiguity { batch, seed, out_dir } => {
            let mut rng = ChaCha8Rng::seed_from_u64(*seed);
            let y1: Vec<f64> = (0..*batch).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let y2: Vec<f64> = y1.iter().map(|v| -v).collect();
            let rep = rank_ambiguity(&y1, &y2)?;
            if let Some(dir) = out_dir {
                fs::create_dir_all(dir)?;
                write_json(&dir.join("ambiguity.json"), &rep)?;
            }
            println!(
                "anti-correlated labels (y2 = -y1), B = {}, {} scalar rankings searched",
                rep.batch_size, rep.rankings_searched
            );
            println!("{:<34}{:>10}", "ranking", "Spearman");
            println!(
                "{:<34}{:>10.4}",
                "best scalar, min over (y1, y2)", rep.best_scalar_min
            );
            for (m, s) in rep.per_subspace.iter().enumerate() {
                println!("{:<34}{:>10.4}", format!("per-subspace, y{}", m + 1), s);
            }
        }
    }
    Ok(())
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

fn load_config(path: &Path, seed: Option<u64>) -> Result<RunConfig> {
    let mut cfg = RunConfig::load(path)?;
    cfg.resolve_seed(seed)?;
    Ok(cfg)
}

fn output_root(cfg: &RunConfig, flag: Option<&Path>) -> PathBuf {
    flag.map(Path::to_path_buf)
        .or_else(|| cfg.output_dir.clone())
        .unwrap_or_else(|| PathBuf::from("runs").join(&cfg.digest()[..12]))
}

fn seed_list(cfg: &RunConfig, seeds: &[u64]) -> Vec<u64> {
    if seeds.is_empty() {
        vec![cfg.seed]
    } else {
        seeds.to_vec()
    }
}

/// Runs independent jobs, possibly in parallel; results keep job order.
fn run_jobs(
    jobs: &[(String, RunConfig)],
    data: &dscl::data::Dataset,
    root: &Path,
    name: impl Fn(&str, &RunConfig) -> String + Sync,
) -> Result<Vec<MetricReport>> {
    jobs.par_iter()
        .map(|(n, cfg)| {
            let dir = sub_dir(Some(root), &name(n, cfg)).expect("root given");
            log::info!("running {}", dir.display());
            run_on(cfg, data, Some(&dir)).map(|o| o.report)
        })
        .collect()
}

#[derive(Serialize)]
struct AblationRow {
    variant: String,
    seed: u64,
    report: MetricReport,
}

#[derive(Serialize)]
struct VariantSummary {
    variant: String,
    runs: usize,
    mean: MetricReport,
}

#[derive(Serialize)]
struct AblationFile<'a> {
    runs: &'a [AblationRow],
    summary: &'a [VariantSummary],
}

/// Seed-averaged metrics per variant, in grid order.
fn summarize(rows: &[AblationRow]) -> Vec<VariantSummary> {
    let mut out: Vec<VariantSummary> = Vec::new();
    for r in rows {
        if out.last().map_or(true, |s| s.variant != r.variant) {
            out.push(VariantSummary {
                variant: r.variant.clone(),
                runs: 0,
                mean: MetricReport {
                    per_target: Vec::new(),
                    mae: 0.0,
                    rmse: 0.0,
                    pearson: Some(0.0),
                    spearman: Some(0.0),
                    angular_error_deg: None,
                    seed: None,
                    config_digest: None,
                    diagnostics: Vec::new(),
                },
            });
        }
        let s = out.last_mut().expect("pushed");
        s.runs += 1;
        s.mean.mae += r.report.mae;
        s.mean.rmse += r.report.rmse;
        s.mean.pearson = s.mean.pearson.zip(r.report.pearson).map(|(a, b)| a + b);
        s.mean.spearman = s.mean.spearman.zip(r.report.spearman).map(|(a, b)| a + b);
    }
    for s in &mut out {
        let n = s.runs as f64;
        s.mean.mae /= n;
        s.mean.rmse /= n;
        s.mean.pearson = s.mean.pearson.map(|v| v / n);
        s.mean.spearman = s.mean.spearman.map(|v| v / n);
    }
    out
}

fn eval(
    checkpoint: &Path,
    data: &Path,
    inputs: &[String],
    targets: &[String],
    angular: Option<AngularMode>,
) -> Result<MetricReport> {
    let saved = SavedModel::from_checkpoint(&Checkpoint::load(checkpoint)?)?;
    let (d, m) = (saved.model.encoder.input_dim, saved.model.num_targets());
    let header = read_header(data)?;
    let inputs = if inputs.is_empty() {
        header.iter().take(d).cloned().collect()
    } else {
        inputs.to_vec()
    };
    let targets = if targets.is_empty() {
        header.iter().skip(inputs.len()).take(m).cloned().collect()
    } else {
        targets.to_vec()
    };
    if inputs.len() != d || targets.len() != m {
        return Err(DsclError::Config(format!(
            "model expects {d} inputs and {m} targets; got {} and {}",
            inputs.len(),
            targets.len()
        )));
    }
    let raw = load_tabular(data, &inputs, &targets, false)?;
    let x = match &saved.inputs {
        Some(s) => s.transform(&raw.features),
        None => raw.features.clone(),
    };
    let pred = saved.model.predict(&x)?;
    let pred = match &saved.labels {
        Some(s) => s.inverse(&pred),
        None => pred,
    };
    let mut report = metric_suite(&pred, &raw.labels)?;
    if let Some(mode) = angular {
        report.angular_error_deg = Some(angular_error(&pred, &raw.labels, mode)?);
    }
    Ok(report)
}
