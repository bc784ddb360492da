use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, ValueEnum};
use serde::{Deserialize, Serialize};
use xd_core::em::{fit_em, EmConfig, EmMode};
use xd_core::init::{kmeans_init_dataset, KMeansConfig};
use xd_core::report::EpochLog;
use xd_core::sgd::{fit_sgd, SgdConfig};
use xd_core::{likelihood, FitReport, GmmParams, Method, Schedule};

use crate::load_dataset;

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MethodArg {
    BatchEm,
    MinibatchEm,
    Sgd,
}

impl From<MethodArg> for Method {
    fn from(m: MethodArg) -> Self {
        match m {
            MethodArg::BatchEm => Method::BatchEm,
            MethodArg::MinibatchEm => Method::MinibatchEm,
            MethodArg::Sgd => Method::Sgd,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum InitArg {
    Kmeans,
    Checkpoint,
}

/// Fit options. Every field can also come from `--config`; flags win.
#[derive(Args, Debug, Default, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FitSettings {
    #[arg(long, value_enum)]
    pub method: Option<MethodArg>,
    /// Number of mixture components.
    #[arg(long)]
    pub k: Option<usize>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    /// Online EM step size before the drop.
    #[arg(long)]
    pub step_size: Option<f64>,
    /// SGD learning rate before the drop.
    #[arg(long)]
    pub lr: Option<f64>,
    /// Added to covariance diagonals (EM) or the trace-penalty weight (SGD).
    #[arg(long)]
    pub reg_w: Option<f64>,
    #[arg(long, value_enum)]
    pub init: Option<InitArg>,
    /// Initial model for `--init checkpoint`.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// Epoch from which the online EM step size is halved; 0 keeps it constant.
    #[arg(long)]
    pub halve_step_at: Option<usize>,
    /// Epoch from which the SGD learning rate is divided by ten; 0 keeps it constant.
    #[arg(long)]
    pub lr_drop_at: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
}

impl FitSettings {
    fn overlay(self, base: FitSettings) -> FitSettings {
        FitSettings {
            method: self.method.or(base.method),
            k: self.k.or(base.k),
            epochs: self.epochs.or(base.epochs),
            batch_size: self.batch_size.or(base.batch_size),
            step_size: self.step_size.or(base.step_size),
            lr: self.lr.or(base.lr),
            reg_w: self.reg_w.or(base.reg_w),
            init: self.init.or(base.init),
            checkpoint: self.checkpoint.or(base.checkpoint),
            halve_step_at: self.halve_step_at.or(base.halve_step_at),
            lr_drop_at: self.lr_drop_at.or(base.lr_drop_at),
            seed: self.seed.or(base.seed),
        }
    }
}

#[derive(Args, Debug)]
pub struct FitArgs {
    /// Training CSV.
    #[arg(long)]
    data: PathBuf,
    /// Defaults to schema.json next to the data file.
    #[arg(long)]
    schema: Option<PathBuf>,
    /// Optional validation CSV (same schema).
    #[arg(long)]
    val: Option<PathBuf>,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
    /// JSON file with any of the fit options.
    #[arg(long)]
    config: Option<PathBuf>,
    #[command(flatten)]
    settings: FitSettings,
}

/// Fully resolved options, echoed into the report.
#[derive(Debug, Clone, Serialize)]
struct Resolved {
    method: MethodArg,
    k: usize,
    epochs: usize,
    batch_size: usize,
    step_size: f64,
    lr: f64,
    reg_w: f64,
    init: InitArg,
    checkpoint: Option<PathBuf>,
    halve_step_at: usize,
    lr_drop_at: usize,
    seed: u64,
    data: PathBuf,
    val: Option<PathBuf>,
}

fn schedule(value: f64, at: usize, factor: f64) -> Schedule {
    if at == 0 {
        Schedule::constant(value)
    } else {
        Schedule::drop_at(value, at, factor)
    }
}

fn resolve(args: &FitArgs) -> Result<Resolved> {
    let base = match &args.config {
        Some(path) => {
            let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
            serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))?
        }
        None => FitSettings::default(),
    };
    let s = args.settings.clone().overlay(base);
    let method = s.method.unwrap_or(MethodArg::MinibatchEm);
    let init = s.init.unwrap_or(if s.checkpoint.is_some() { InitArg::Checkpoint } else { InitArg::Kmeans });
    let k = match (init, s.k, &s.checkpoint) {
        (InitArg::Kmeans, Some(k), _) => k,
        (InitArg::Kmeans, None, _) => bail!("--k is required with k-means initialisation"),
        (InitArg::Checkpoint, _, None) => bail!("--init checkpoint needs --checkpoint"),
        (InitArg::Checkpoint, k, Some(path)) => {
            let found = GmmParams::load(path)?.k();
            if k.is_some_and(|k| k != found) {
                bail!("--k {} disagrees with the checkpoint's {found} components", k.unwrap_or(0));
            }
            found
        }
    };
    Ok(Resolved {
        method,
        k,
        epochs: s.epochs.unwrap_or(20),
        batch_size: s.batch_size.unwrap_or(500),
        step_size: s.step_size.unwrap_or(1e-2),
        lr: s.lr.unwrap_or(1e-2),
        reg_w: s.reg_w.unwrap_or(1e-3),
        init,
        checkpoint: s.checkpoint,
        halve_step_at: s.halve_step_at.unwrap_or(10),
        lr_drop_at: s.lr_drop_at.unwrap_or(10),
        seed: s.seed.unwrap_or(0),
        data: args.data.clone(),
        val: args.val.clone(),
    })
}

fn write_report(report: &FitReport, path: &Path) -> Result<()> {
    let text = serde_json::to_string_pretty(report)?;
    std::fs::write(path, text + "\n").with_context(|| format!("writing {}", path.display()))
}

pub fn cmd_fit(args: FitArgs) -> Result<()> {
    let cfg = resolve(&args)?;
    let train = load_dataset(&args.data, args.schema.as_deref())?;
    let val = match &args.val {
        Some(path) => Some(load_dataset(path, args.schema.as_deref())?),
        None => None,
    };
    std::fs::create_dir_all(&args.out).with_context(|| format!("creating {}", args.out.display()))?;

    let init = match cfg.init {
        InitArg::Kmeans => kmeans_init_dataset(&train, &KMeansConfig::new(cfg.k, cfg.seed))?,
        InitArg::Checkpoint => GmmParams::load(cfg.checkpoint.as_deref().unwrap_or(Path::new("")))?,
    };

    let (fitter_config, outcome, mut log) = {
        let mut log = EpochLog::default();
        match cfg.method {
            MethodArg::BatchEm | MethodArg::MinibatchEm => {
                let em = EmConfig {
                    mode: if cfg.method == MethodArg::BatchEm { EmMode::Batch } else { EmMode::Minibatch },
                    minibatch_size: cfg.batch_size,
                    step_size: schedule(cfg.step_size, cfg.halve_step_at, 2.0),
                    epochs: cfg.epochs,
                    reg_w: cfg.reg_w,
                    seed: cfg.seed,
                };
                let out = fit_em(&train.points, &init, &em, &mut log);
                (serde_json::to_value(&em)?, out, log)
            }
            MethodArg::Sgd => {
                let sgd = SgdConfig {
                    minibatch_size: cfg.batch_size,
                    epochs: cfg.epochs,
                    lr: schedule(cfg.lr, cfg.lr_drop_at, 10.0),
                    reg_w: cfg.reg_w,
                    seed: cfg.seed,
                    ..SgdConfig::default()
                };
                let out = fit_sgd(&train.points, &init, &sgd, &mut log);
                (serde_json::to_value(&sgd)?, out, log)
            }
        }
    };
    let mut config = serde_json::to_value(&cfg)?;
    config["fitter"] = fitter_config;
    let report_path = args.out.join("report.json");

    let fit = match outcome {
        Ok(fit) => fit,
        Err(err) if err.is_numerical() => {
            let initial = likelihood::mean_log_likelihood(&init, &train.points)?;
            let mut report = FitReport::new(cfg.method.into(), config, initial);
            report.epochs = std::mem::take(&mut log.records);
            report.final_train_ll = report.epochs.last().map(|e| e.train_ll);
            report.error = Some(err.to_string());
            write_report(&report, &report_path)?;
            return Err(err.into());
        }
        Err(err) => return Err(err.into()),
    };

    let model_path = args.out.join("model.json");
    fit.params.save(&model_path)?;
    let mut report = fit.report;
    report.config = config;
    report.checkpoint = Some(model_path.display().to_string());
    if let Some(val) = &val {
        report.final_val_ll = Some(likelihood::mean_log_likelihood(&fit.params, &val.points)?);
    }
    write_report(&report, &report_path)?;
    let train_ll = report.final_train_ll.unwrap_or(report.initial_train_ll);
    match report.final_val_ll {
        Some(v) => println!("train {train_ll:.6} val {v:.6}"),
        None => println!("train {train_ll:.6}"),
    }
    Ok(())
}
