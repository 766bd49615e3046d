//! `mimoloc` command-line driver.
//!
//! `run` executes the whole pipeline. The stage verbs (`generate` or
//! `ingest`, then `calibrate`, `extract`, `train`, `evaluate`) do the same
//! work step by step through files in the output directory.

use clap::{Args, Parser, Subcommand};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use mimoloc::calib::CalibrationSolution;
use mimoloc::config::ExperimentConfig;
use mimoloc::fingerprint::{self, TrainingContext};
use mimoloc::pipeline::{self, Extraction, OutputDir, SweepAxis};
use mimoloc::{Error, Result};

#[derive(Parser)]
#[command(name = "mimoloc", version, about = "Massive-MIMO CSI positioning experiments")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Experiment config (TOML); defaults apply when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the config seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
    /// More log output (repeatable).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
}

#[derive(Subcommand)]
enum Command {
    /// Run every stage and write reports.
    Run,
    /// Simulate reference, training and test datasets.
    Generate,
    /// Split a recorded dataset into training and test sets.
    Ingest {
        /// Dataset file in the `mimoloc-csi/1` format.
        dataset: PathBuf,
        /// Noise variance used to normalize the CSI.
        #[arg(long)]
        noise_variance: Option<f64>,
    },
    /// Fit the phase calibration on the reference set.
    Calibrate,
    /// Extract multipath components on every sub-array.
    Extract,
    /// Train one fingerprint model per metric scheme.
    Train,
    /// Evaluate models and geometric baselines on the test set.
    Evaluate,
    /// Run the pipeline over a list of values on one axis.
    Sweep {
        /// antennas, grid_size, snr, scheme or topology.
        #[arg(long)]
        axis: SweepAxis,
        /// Comma-separated values.
        #[arg(long, value_delimiter = ',', required = true)]
        values: Vec<String>,
    },
}

fn load_config(c: &Common) -> Result<ExperimentConfig> {
    let mut cfg = match &c.config {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::default(),
    };
    if let Some(s) = c.seed {
        cfg.seed = s;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn calibration(out: &Path) -> Result<Option<CalibrationSolution>> {
    let p = out.join("calibration.json");
    if p.exists() {
        Ok(Some(CalibrationSolution::from_json(&std::fs::read_to_string(p)?)?))
    } else {
        Ok(None)
    }
}

fn read_extraction(out: &Path, split: &str) -> Result<Extraction> {
    let text = std::fs::read_to_string(out.join(format!("los_{split}.json")))?;
    Ok(serde_json::from_str(&text)?)
}

fn write_json(dir: &mut OutputDir, name: &str, value: &impl serde::Serialize) -> Result<()> {
    dir.write(name, serde_json::to_string_pretty(value)?.as_bytes())?;
    Ok(())
}

fn execute(cli: Cli) -> Result<()> {
    let cfg = load_config(&cli.common)?;
    let out = cli.common.out.as_path();
    match cli.command {
        Command::Run => {
            let bundle = pipeline::run_pipeline(&cfg, out)?;
            print!("{}", pipeline::errors_csv(&bundle.results));
        }
        Command::Generate => {
            let ds = pipeline::generate(&cfg).map_err(|e| stage("generate", e))?;
            let mut dir = OutputDir::create(out)?;
            pipeline::save_datasets(&mut dir, &ds)?;
            println!(
                "wrote {} training and {} test samples to {}",
                ds.train.len(),
                ds.test.len(),
                out.display()
            );
        }
        Command::Ingest { dataset, noise_variance } => {
            let mut cfg = cfg;
            cfg.ingest.dataset = Some(dataset);
            cfg.ingest.noise_variance = noise_variance.or(cfg.ingest.noise_variance);
            let ds = pipeline::ingest(&cfg).map_err(|e| stage("ingest", e))?;
            let mut dir = OutputDir::create(out)?;
            pipeline::save_datasets(&mut dir, &ds)?;
            println!("split into {} grid and {} test samples", ds.train.len(), ds.test.len());
        }
        Command::Calibrate => {
            let ds = pipeline::load_datasets(out)?;
            let sol = pipeline::calibrate_stage(&cfg, &ds)
                .map_err(|e| stage("calibrate", e))?
                .ok_or_else(|| Error::Config("calibration is disabled in the config".into()))?;
            let mut dir = OutputDir::create(out)?;
            dir.write("calibration.json", sol.to_json()?.as_bytes())?;
            println!("{}", sol.to_json()?);
        }
        Command::Extract => {
            let mut ds = pipeline::load_datasets(out)?;
            if let Some(sol) = calibration(out)? {
                pipeline::apply_calibration_to(&mut ds.train, &sol)?;
                pipeline::apply_calibration_to(&mut ds.test, &sol)?;
            }
            let subs = pipeline::partition(&cfg, &ds.train.topology).map_err(|e| stage("partition", e))?;
            let mut dir = OutputDir::create(out)?;
            for (split, data) in [("train", &ds.train), ("test", &ds.test)] {
                let ext = pipeline::extract_stage(data, &subs, &cfg.sage, cfg.fingerprint.los_window_db)?;
                let mut csv = Vec::new();
                mimoloc::sage::write_mpc_csv(&mut csv, &ext.records)?;
                dir.write(&format!("mpc_{split}.csv"), &csv)?;
                write_json(&mut dir, &format!("los_{split}.json"), &ext)?;
                println!("{split}: {} samples, {} components", ext.los.len(), ext.records.len());
            }
        }
        Command::Train => {
            let ds = pipeline::load_datasets(out)?;
            let subs = pipeline::partition(&cfg, &ds.train.topology).map_err(|e| stage("partition", e))?;
            let train = read_extraction(out, "train")?;
            let positions = ds.train.positions();
            let context = TrainingContext {
                grid_size: Some(cfg.fingerprint.grid),
                topology: Some(mimoloc::array::TopologyDescriptor::from_topology(&ds.train.topology)),
            };
            let mut search = cfg.fingerprint.search.clone();
            search.seed = mimoloc::channel::mix_seed(cfg.seed, pipeline::streams::SEARCH, search.seed);
            let mut dir = OutputDir::create(out)?;
            let mut dropped = Vec::new();
            for scheme in &cfg.fingerprint.schemes {
                let (feats, kept) = pipeline::assemble_features(&train, &subs, *scheme, "train", &mut dropped);
                let targets: Vec<_> = kept.iter().map(|&i| positions[i]).collect();
                let model = fingerprint::train_svr(&feats, &targets, &search, &context).map_err(|e| stage("train", e))?;
                let mut buf = Vec::new();
                fingerprint::write_model(&mut buf, &model)?;
                dir.write(&pipeline::model_file(*scheme), &buf)?;
                let cv = model.metadata.cv_mae;
                println!("{scheme}: {} samples, cv mae x {:.2} cm, y {:.2} cm", kept.len(), cv[0] * 100.0, cv[1] * 100.0);
            }
        }
        Command::Evaluate => {
            let mut ds = pipeline::load_datasets(out)?;
            if let Some(sol) = calibration(out)? {
                pipeline::apply_calibration_to(&mut ds.test, &sol)?;
            }
            let subs = pipeline::partition(&cfg, &ds.train.topology).map_err(|e| stage("partition", e))?;
            let train = read_extraction(out, "train")?;
            let test = read_extraction(out, "test")?;
            let truth = ds.test.positions();
            let mut dropped = Vec::new();
            let mut results = Vec::new();
            for scheme in &cfg.fingerprint.schemes {
                let model = fingerprint::load_model(&out.join(pipeline::model_file(*scheme)))?;
                let (feats, kept) = pipeline::assemble_features(&test, &subs, *scheme, "test", &mut dropped);
                let preds = feats
                    .iter()
                    .zip(&kept)
                    .map(|(f, &i)| fingerprint::predict(&model, f).map_err(|e| stage_at("evaluate", i, e)))
                    .collect::<Result<Vec<_>>>()?;
                let sel: Vec<_> = kept.iter().map(|&i| truth[i]).collect();
                results.push(pipeline::MethodResult {
                    method: pipeline::METHOD_FINGERPRINT.into(),
                    scheme: scheme.to_string(),
                    grid: cfg.fingerprint.grid,
                    report: fingerprint::ErrorReport::from_predictions(&preds, &sel)?,
                    sample_ids: kept,
                    predictions: preds,
                });
            }
            if cfg.geo.enabled {
                results.extend(pipeline::geo_stage(
                    &train,
                    &ds.train.positions(),
                    &test,
                    &truth,
                    ds.train.ue_height,
                    &subs,
                    cfg.geo.path_loss_exponent,
                    cfg.fingerprint.grid,
                    &mut dropped,
                )?);
            }
            let gain = ds.noise_gain();
            let snr = ds
                .test
                .samples
                .iter()
                .map(|s| pipeline::sample_snr(&s.csi, &subs, gain))
                .collect::<Result<Vec<_>>>()?;
            let mut dir = OutputDir::create(out)?;
            let table = pipeline::errors_csv(&results);
            dir.write("errors.csv", table.as_bytes())?;
            for r in &results {
                let mut buf = Vec::new();
                r.report.write_cdf_csv(&mut buf)?;
                dir.write(&format!("cdf_{}.csv", r.label()), &buf)?;
            }
            dir.write("predictions.csv", pipeline::predictions_csv(&results, &truth, &snr).as_bytes())?;
            dir.write("snr.csv", pipeline::snr_csv(&snr, &truth).as_bytes())?;
            write_json(&mut dir, "dropped.json", &dropped)?;
            print!("{table}");
        }
        Command::Sweep { axis, values } => {
            let report = pipeline::sweep(&cfg, axis, &values, out)?;
            for (v, reason) in &report.skipped {
                eprintln!("skipped {v}: {reason}");
            }
            for w in &report.warnings {
                eprintln!("warning: {w}");
            }
            print!("{}", std::fs::read_to_string(out.join("summary.csv"))?);
        }
    }
    Ok(())
}

fn stage(name: &'static str, e: Error) -> Error {
    match e {
        Error::Stage { .. } => e,
        e => Error::Stage {
            stage: name,
            sample: None,
            source: Box::new(e),
        },
    }
}

fn stage_at(name: &'static str, sample: usize, e: Error) -> Error {
    Error::Stage {
        stage: name,
        sample: Some(sample),
        source: Box::new(e),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.common.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match execute(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            match e {
                Error::Config(_) => ExitCode::from(2),
                _ => ExitCode::FAILURE,
            }
        }
    }
}
