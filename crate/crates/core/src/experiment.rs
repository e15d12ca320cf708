//! End-to-end runs driven by a [`RunConfig`]: data, split, model, training,
//! evaluation and the files a run leaves behind.

use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::Serialize;

use crate::checkpoint::SavedModel;
use crate::config::{RunConfig, TaskConfig};
use crate::data::{generate_synthetic, load_tabular, split, Dataset, DataSplit};
use crate::disentangle::write_matrix_csv;
use crate::error::Result;
use crate::eval::{angular_error, MetricReport};
use crate::losses::LossWeights;
use crate::model::Model;
use crate::pipeline::{evaluate, init_rng, train, MaskPolicy, RunLog, TrainOutputs, TrainedModel};

pub const LOG_FILE: &str = "log.jsonl";
pub const CHECKPOINT_FILE: &str = "checkpoint.bin";
pub const MODEL_FILE: &str = "model.bin";
pub const METRICS_FILE: &str = "metrics.json";
pub const MASK_FILE: &str = "mask.csv";
pub const REPORT_FILE: &str = "report.txt";

pub fn load_task(task: &TaskConfig) -> Result<Dataset> {
    match task {
        TaskConfig::Synthetic(s) => {
            let d = generate_synthetic(&s.generator_config())?;
            Ok(if s.normalize { d.standardize() } else { d })
        }
        TaskConfig::Tabular(t) => load_tabular(&t.path, &t.inputs, &t.targets, t.normalize),
    }
}

#[derive(Debug)]
pub struct RunOutcome {
    pub report: MetricReport,
    pub trained: TrainedModel,
    pub log: RunLog,
}

/// Trains and evaluates one configuration on an already loaded dataset.
pub fn run_on(cfg: &RunConfig, data: &Dataset, out_dir: Option<&Path>) -> Result<RunOutcome> {
    cfg.validate()?;
    let sets: DataSplit = split(data, &cfg.split_spec()?, cfg.schedule.batch_size)?;
    let model = Model::new(
        cfg.model.encoder(data.features.cols()),
        cfg.model.regressor_config(data.labels.cols()),
        &mut init_rng(cfg.seed),
    )?;
    let mut log_file = match out_dir {
        Some(dir) => {
            fs::create_dir_all(dir)?;
            Some(BufWriter::new(fs::File::create(dir.join(LOG_FILE))?))
        }
        None => None,
    };
    let outputs = TrainOutputs {
        log: log_file.as_mut().map(|w| w as &mut dyn Write),
        checkpoint: out_dir.map(|d| d.join(CHECKPOINT_FILE)),
        input_norm: data.input_norm.clone(),
        label_norm: data.label_norm.clone(),
    };
    let (trained, log) = train(model, &sets, &cfg.train_config(), outputs)?;
    if let Some(mut w) = log_file {
        w.flush()?;
    }

    let mut report = evaluate(&trained.model, &sets.test, data.label_norm.as_ref())?;
    if let Some(mode) = cfg.angular {
        let pred = data.raw_labels(&trained.model.predict(&sets.test.features)?);
        report.angular_error_deg = Some(angular_error(&pred, &data.raw_labels(&sets.test.labels), mode)?);
    }
    report.seed = Some(cfg.seed);
    report.config_digest = Some(cfg.digest());
    if log.seriation_failures > 0 {
        report
            .diagnostics
            .push(format!("{} unlabeled batches skipped after seriation failed", log.seriation_failures));
    }

    if let Some(dir) = out_dir {
        let saved = SavedModel {
            model: trained.model.clone(),
            inputs: data.input_norm.clone(),
            labels: data.label_norm.clone(),
        };
        saved.to_checkpoint().save(&dir.join(MODEL_FILE))?;
        write_json(&dir.join(METRICS_FILE), &report)?;
        trained.mask.write_csv(fs::File::create(dir.join(MASK_FILE))?)?;
        write_matrix_csv(&trained.jacobian, fs::File::create(dir.join("jacobian.csv"))?)?;
        fs::write(dir.join(REPORT_FILE), format_reports(&[("test".to_string(), report.clone())]))?;
    }
    Ok(RunOutcome { report, trained, log })
}

/// Loads the task and runs it, writing outputs under `out_dir` if given.
pub fn run(cfg: &RunConfig, out_dir: Option<&Path>) -> Result<RunOutcome> {
    let data = load_task(&cfg.task)?;
    run_on(cfg, &data, out_dir)
}

pub fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text)?;
    Ok(())
}

/// The ablation grid in its fixed output order: the full objective, each
/// term removed, both unsupervised terms removed, no init phase, and plain
/// regression.
pub fn ablation_variants(base: &RunConfig) -> Vec<(&'static str, RunConfig)> {
    let with = |f: &dyn Fn(&mut RunConfig)| {
        let mut c = base.clone();
        f(&mut c);
        c
    };
    vec![
        ("full", base.clone()),
        ("no_l_j", with(&|c| c.weights.gamma = 0.0)),
        ("no_l_sc", with(&|c| c.weights.w_sc = 0.0)),
        ("no_l_uc", with(&|c| c.weights.w_uc = 0.0)),
        ("no_l_ur", with(&|c| c.weights.w_ur = 0.0)),
        (
            "no_l_uc_l_ur",
            with(&|c| {
                c.weights.w_uc = 0.0;
                c.weights.w_ur = 0.0;
            }),
        ),
        (
            "no_init",
            with(&|c| {
                c.schedule.init_epochs = 0;
                c.mask_policy = MaskPolicy::Online;
            }),
        ),
        ("l_reg_only", with(&|c| c.weights = LossWeights::ZERO)),
    ]
}

/// One row of the label-rate sweep table.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SweepRow {
    pub rate: f64,
    pub seed: u64,
    pub mae: f64,
    pub rmse: f64,
    pub pearson: Option<f64>,
    pub spearman: Option<f64>,
}

impl SweepRow {
    pub fn new(rate: f64, seed: u64, r: &MetricReport) -> Self {
        Self {
            rate,
            seed,
            mae: r.mae,
            rmse: r.rmse,
            pearson: r.pearson,
            spearman: r.spearman,
        }
    }
}

pub fn write_sweep_csv(rows: &[SweepRow], w: impl Write) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    for r in rows {
        out.serialize(r)?;
    }
    out.flush()?;
    Ok(())
}

/// Aligned plain-text table, one labeled line per report.
pub fn format_reports(rows: &[(String, MetricReport)]) -> String {
    let width = rows.iter().map(|(n, _)| n.len()).max().unwrap_or(0).max(7);
    let opt = |v: Option<f64>| v.map_or_else(|| "n/a".to_string(), |x| format!("{x:.4}"));
    let mut s = format!(
        "{:<width$}  {:>9}  {:>9}  {:>8}  {:>8}\n",
        "variant", "MAE", "RMSE", "Pearson", "Spearman"
    );
    for (name, r) in rows {
        s.push_str(&format!(
            "{:<width$}  {:>9.4}  {:>9.4}  {:>8}  {:>8}",
            name,
            r.mae,
            r.rmse,
            opt(r.pearson),
            opt(r.spearman)
        ));
        if let Some(a) = r.angular_error_deg {
            s.push_str(&format!("  angular {a:.2}°"));
        }
        s.push('\n');
    }
    s
}

/// Output directory for a named sub-run of a batch command.
pub fn sub_dir(root: Option<&Path>, name: &str) -> Option<PathBuf> {
    root.map(|r| r.join(name))
}
