//! `apnea-kit`: sleep-apnea event detection and AHI estimation from
//! wearable respiratory effort and SpO2 signals.
//!
//! Exit codes: 0 success, 1 user/config error, 2 data error, 3 internal
//! invariant violation.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use apnea_kit::autolabel::AutolabelConfig;
use apnea_kit::commands;
use apnea_kit::config::{Flavor, LabelSource, RunConfig};
use apnea_kit::error::Error;
use apnea_kit::pipeline::WakeRule;
use apnea_kit::synth::{AhiTarget, SynthSpec};

#[derive(Parser)]
#[command(name = "apnea-kit", version, about)]
struct Cli {
    /// Seed override for any seeded command.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Worker threads (default: all cores).
    #[arg(long, global = true)]
    jobs: Option<usize>,

    /// Print machine-readable JSON to stdout.
    #[arg(long, global = true)]
    json: bool,

    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum FlavorArg {
    RespOnly,
    RespSpo2,
    RespSpo2Robust,
    Spo2Only,
}

impl From<FlavorArg> for Flavor {
    fn from(f: FlavorArg) -> Flavor {
        match f {
            FlavorArg::RespOnly => Flavor::RespOnly,
            FlavorArg::RespSpo2 => Flavor::RespSpo2,
            FlavorArg::RespSpo2Robust => Flavor::RespSpo2Robust,
            FlavorArg::Spo2Only => Flavor::Spo2Only,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum LabelArg {
    Expert4,
    Auto4,
    Auto3,
}

impl From<LabelArg> for LabelSource {
    fn from(l: LabelArg) -> LabelSource {
        match l {
            LabelArg::Expert4 => LabelSource::Expert4,
            LabelArg::Auto4 => LabelSource::Auto4,
            LabelArg::Auto3 => LabelSource::Auto3,
        }
    }
}

#[derive(Args)]
struct RunArgs {
    /// JSON run configuration; flags below override its fields.
    #[arg(long)]
    config: Option<PathBuf>,

    #[arg(long, env = "APNEA_KIT_DATA")]
    data_dir: Option<PathBuf>,

    #[arg(long)]
    out: Option<PathBuf>,

    /// Flavors to run when no config file is given.
    #[arg(long, value_enum, value_delimiter = ',')]
    flavors: Vec<FlavorArg>,

    #[arg(long, value_enum)]
    labels: Option<LabelArg>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic cohort of recording bundles.
    Synth {
        out_dir: PathBuf,
        /// JSON generator spec; flags below override its fields.
        #[arg(long)]
        spec: Option<PathBuf>,
        #[arg(long)]
        subjects: Option<usize>,
        #[arg(long)]
        nights: Option<usize>,
        #[arg(long)]
        hours: Option<f64>,
        /// Fixed injected events per hour.
        #[arg(long, conflicts_with_all = ["ahi_lo", "ahi_hi"])]
        events_per_hour: Option<f64>,
        /// Uniform injected-AHI range.
        #[arg(long, requires = "ahi_hi")]
        ahi_lo: Option<f64>,
        #[arg(long, requires = "ahi_lo")]
        ahi_hi: Option<f64>,
        #[arg(long)]
        wake_fraction: Option<f64>,
    },
    /// Score hypopneas automatically (3% and 4% rules) from airflow + SpO2.
    Autolabel {
        #[arg(env = "APNEA_KIT_DATA")]
        data_dir: PathBuf,
        /// Skip bundles missing a required signal instead of failing.
        #[arg(long)]
        skip_bad: bool,
        #[arg(long, default_value_t = 0.5)]
        drop_fraction: f64,
        #[arg(long, default_value_t = 10.0)]
        min_duration_s: f64,
        #[arg(long, default_value_t = 5.0)]
        arousal_grace_s: f64,
    },
    /// Write per-bundle feature matrices to disk.
    Extract {
        #[arg(env = "APNEA_KIT_DATA")]
        data_dir: PathBuf,
        #[arg(long, value_enum, default_value = "resp-only")]
        flavor: FlavorArg,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_enum, default_value = "expert4")]
        labels: LabelArg,
    },
    /// Run iterative feature selection standalone.
    Select {
        #[command(flatten)]
        run: RunArgs,
    },
    /// Full cross-validated run: folds, search, train, predict, evaluate.
    Run {
        #[command(flatten)]
        run: RunArgs,
    },
    /// Predict events and AHI for one bundle with a saved model.
    Predict {
        model: PathBuf,
        bundle_dir: PathBuf,
        #[arg(long, default_value = "predict_out")]
        out: PathBuf,
    },
    /// Rebuild aggregated reports from an existing run directory.
    Report {
        #[command(flatten)]
        run: RunArgs,
    },
}

fn load_run_config(args: &RunArgs, seed: Option<u64>) -> Result<RunConfig, Error> {
    let mut config: RunConfig = match &args.config {
        Some(path) => {
            let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
            serde_json::from_str(&text)
                .map_err(|e| Error::InvalidConfig(format!("{}: {e}", path.display())))?
        }
        None => {
            let data_dir = args.data_dir.clone().ok_or_else(|| {
                Error::InvalidConfig("--data-dir (or APNEA_KIT_DATA) required without --config".into())
            })?;
            let out = args
                .out
                .clone()
                .ok_or_else(|| Error::InvalidConfig("--out required without --config".into()))?;
            let flavors: Vec<Flavor> = if args.flavors.is_empty() {
                vec![Flavor::RespOnly, Flavor::RespSpo2]
            } else {
                args.flavors.iter().map(|&f| f.into()).collect()
            };
            RunConfig {
                data_dir,
                output_dir: out,
                flavors,
                label_source: args.labels.map_or(LabelSource::Expert4, |l| l.into()),
                grid: Default::default(),
                seed: 0,
                k_folds: 10,
                feature_cap: 51,
                n_trees: 300,
                train_step_s: 1,
                selection: Default::default(),
                wake_rule: WakeRule::MajorityDuration,
                keep_top_configs: 3,
                min_events_eval: 5,
                spo2_only_threshold_pct: 3.0,
            }
        }
    };
    if let Some(dir) = &args.data_dir {
        config.data_dir = dir.clone();
    }
    if let Some(out) = &args.out {
        config.output_dir = out.clone();
    }
    if let Some(labels) = args.labels {
        config.label_source = labels.into();
    }
    if !args.flavors.is_empty() {
        config.flavors = args.flavors.iter().map(|&f| f.into()).collect();
    }
    if let Some(seed) = seed {
        config.seed = seed;
    }
    config.validate()?;
    Ok(config)
}

fn emit<T: serde::Serialize>(json: bool, value: &T, human: impl Fn(&T) -> String) {
    if json {
        println!("{}", serde_json::to_string_pretty(value).expect("serializable result"));
    } else {
        println!("{}", human(value));
    }
}

fn dispatch(cli: Cli) -> Result<(), Error> {
    if let Some(jobs) = cli.jobs {
        rayon::ThreadPoolBuilder::new()
            .num_threads(jobs)
            .build_global()
            .map_err(|e| Error::InvalidConfig(format!("--jobs: {e}")))?;
    }
    match cli.command {
        Command::Synth {
            out_dir,
            spec,
            subjects,
            nights,
            hours,
            events_per_hour,
            ahi_lo,
            ahi_hi,
            wake_fraction,
        } => {
            let mut s: SynthSpec = match spec {
                Some(path) => {
                    let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
                    serde_json::from_str(&text)
                        .map_err(|e| Error::InvalidConfig(format!("{}: {e}", path.display())))?
                }
                None => SynthSpec::default(),
            };
            if let Some(v) = subjects {
                s.n_subjects = v;
            }
            if let Some(v) = nights {
                s.nights_per_subject = v;
            }
            if let Some(v) = hours {
                s.hours = v;
            }
            if let Some(v) = events_per_hour {
                s.ahi = AhiTarget::Fixed(v);
            }
            if let (Some(lo), Some(hi)) = (ahi_lo, ahi_hi) {
                s.ahi = AhiTarget::Uniform { lo, hi };
            }
            if let Some(v) = wake_fraction {
                s.wake_fraction = v;
            }
            let manifest = commands::cmd_synth(&s, &out_dir, cli.seed.unwrap_or(0))?;
            emit(cli.json, &manifest, |m| {
                format!(
                    "generated {} recordings under {}",
                    m.recordings.len(),
                    out_dir.display()
                )
            });
        }
        Command::Autolabel {
            data_dir,
            skip_bad,
            drop_fraction,
            min_duration_s,
            arousal_grace_s,
        } => {
            let config = AutolabelConfig {
                drop_fraction,
                min_duration_s,
                arousal_grace_s,
            };
            let report = commands::cmd_autolabel(&data_dir, &config, skip_bad)?;
            for line in &report.skipped {
                eprintln!("skipped: {line}");
            }
            emit(cli.json, &report, |r| {
                format!(
                    "auto-labeled {} bundles ({} skipped); mean HI expert {:.2}, auto4 {:.2}, auto3 {:.2}; r(expert,auto4) = {}",
                    r.bundles.len(),
                    r.skipped.len(),
                    r.mean_hi_expert,
                    r.mean_hi_auto4,
                    r.mean_hi_auto3,
                    r.r_expert_auto4.map_or("n/a".into(), |v| format!("{v:.3}")),
                )
            });
        }
        Command::Extract {
            data_dir,
            flavor,
            out,
            labels,
        } => {
            let manifest = commands::cmd_extract(&data_dir, flavor.into(), &out, labels.into())?;
            emit(cli.json, &manifest, |m| {
                format!(
                    "extracted {} features for {} bundles (registry {})",
                    m.n_features,
                    m.rows_per_bundle.len(),
                    m.registry_hash
                )
            });
        }
        Command::Select { run } => {
            let config = load_run_config(&run, cli.seed)?;
            let report = commands::cmd_select(&config)?;
            emit(cli.json, &report, |r| {
                format!(
                    "selection kept {} features (per-fold sizes {:?})",
                    r.chosen_count, r.per_fold_sizes
                )
            });
        }
        Command::Run { run } => {
            let config = load_run_config(&run, cli.seed)?;
            let summary = commands::cmd_run(&config)?;
            emit(cli.json, &summary, |s| {
                let mut out = String::new();
                for (name, fl) in &s.flavors {
                    let auc = fl
                        .mean_metrics
                        .get("roc_auc")
                        .map_or("n/a".to_string(), |m| format!("{:.3}", m.mean));
                    out.push_str(&format!(
                        "{name}: mean ROC AUC {auc}, AHI r {:.3}, category accuracy {:.2}\n",
                        fl.ahi.r, fl.ahi.category_accuracy
                    ));
                }
                out.push_str(&format!("artifacts under {}", config.output_dir.display()));
                out
            });
        }
        Command::Predict {
            model,
            bundle_dir,
            out,
        } => {
            let report = commands::cmd_predict(&model, &bundle_dir, &out, WakeRule::MajorityDuration)?;
            emit(cli.json, &report, |r| {
                let warn = if r.hypnogram_missing {
                    " (no hypnogram: AHI uses total recording hours)"
                } else {
                    ""
                };
                format!(
                    "{}: AHI {:.1} ({:?}), {} events -> {}{warn}",
                    r.recording_id,
                    r.ahi,
                    r.category,
                    r.n_events,
                    r.events_path.display()
                )
            });
        }
        Command::Report { run } => {
            let config = load_run_config(&run, cli.seed)?;
            let summary = commands::cmd_report(&config)?;
            emit(cli.json, &summary, |s| {
                format!("re-aggregated {} flavors", s.flavors.len())
            });
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            // Help/version requests are success; anything else is a usage error.
            if e.use_stderr() {
                eprintln!("{e}");
                return ExitCode::from(1);
            }
            print!("{e}");
            return ExitCode::SUCCESS;
        }
    };
    match dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
