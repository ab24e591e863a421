//! Command-line front end: generate synthetic data, train, evaluate a
//! checkpoint, or sweep the curriculum admission bound.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use dckt::config::{DataSource, ExperimentConfig, Mode};
use dckt::data::{load_dataset, normalize, save_dataset};
use dckt::error::{Error, Result};
use dckt::model::{Checkpoint, Domain};
use dckt::retrieval::evaluate;
use dckt::runner::{run_experiment, write_artifacts};

#[derive(Parser)]
#[command(name = "dckt", about = "Cross-media knowledge transfer experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic source/target dataset pair as TSV files.
    Generate {
        /// Experiment config file (key = value).
        #[arg(long)]
        config: Option<PathBuf>,
        /// Output directory for source.tsv and target.tsv.
        #[arg(long)]
        out: PathBuf,
        /// Overrides the generator seed from the config.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Run one training experiment and write its artifacts.
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        /// Output directory for checkpoint, log, report, resolved config.
        #[arg(long)]
        out: PathBuf,
        /// Overrides the experiment seed from the config.
        #[arg(long)]
        seed: Option<u64>,
        /// Overrides the training mode from the config.
        #[arg(long)]
        mode: Option<String>,
    },
    /// Evaluate a saved checkpoint on a dataset file.
    Eval {
        /// Checkpoint written by `train`.
        #[arg(long)]
        checkpoint: PathBuf,
        /// Dataset TSV to evaluate on.
        #[arg(long)]
        data: PathBuf,
        /// Which domain network to use: source or target.
        #[arg(long, default_value = "target")]
        domain: String,
        /// Retrieval direction to report: i2t, t2i, or both.
        #[arg(long, default_value = "both")]
        direction: String,
    },
    /// Train once per admission bound and tabulate the resulting MAPs.
    SweepAlpha {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        /// Comma-separated admission bounds, each in (0, 1].
        #[arg(long)]
        alphas: String,
    },
}

/// Verbosity from the XMT_LOG environment variable.
#[derive(Clone, Copy, PartialEq, PartialOrd)]
enum LogLevel {
    Quiet,
    Info,
    Debug,
}

fn log_level() -> Result<LogLevel> {
    match std::env::var("XMT_LOG").as_deref() {
        Err(_) | Ok("info") => Ok(LogLevel::Info),
        Ok("quiet") => Ok(LogLevel::Quiet),
        Ok("debug") => Ok(LogLevel::Debug),
        Ok(other) => Err(Error::Config(format!(
            "XMT_LOG must be quiet, info or debug, got `{other}`"
        ))),
    }
}

fn load_config(path: &Option<PathBuf>) -> Result<ExperimentConfig> {
    match path {
        Some(p) => ExperimentConfig::load(p),
        None => Ok(ExperimentConfig::default()),
    }
}

fn apply_overrides(
    cfg: &mut ExperimentConfig,
    seed: Option<u64>,
    mode: Option<&str>,
) -> Result<()> {
    if let Some(seed) = seed {
        cfg.seed = seed;
        if let DataSource::Synthetic(spec) = &mut cfg.data {
            spec.seed = seed;
        }
    }
    if let Some(mode) = mode {
        cfg.mode = Mode::parse(mode)?;
    }
    Ok(())
}

fn cmd_generate(config: Option<PathBuf>, out: PathBuf, seed: Option<u64>) -> Result<()> {
    let level = log_level()?;
    let mut cfg = load_config(&config)?;
    apply_overrides(&mut cfg, seed, None)?;
    let spec = match &cfg.data {
        DataSource::Synthetic(spec) => spec,
        DataSource::Files { .. } => {
            return Err(Error::Config(
                "generate needs a synthetic data source in the config".into(),
            ))
        }
    };
    let (src, tgt) = dckt::data::generate_synthetic(spec)?;
    save_dataset(&src, &out.join("source.tsv"))?;
    save_dataset(&tgt, &out.join("target.tsv"))?;
    if level >= LogLevel::Info {
        println!(
            "wrote {} source and {} target pairs to {}",
            src.len(),
            tgt.len(),
            out.display()
        );
    }
    Ok(())
}

fn cmd_train(
    config: Option<PathBuf>,
    out: PathBuf,
    seed: Option<u64>,
    mode: Option<String>,
) -> Result<()> {
    let level = log_level()?;
    let mut cfg = load_config(&config)?;
    apply_overrides(&mut cfg, seed, mode.as_deref())?;
    if level >= LogLevel::Info {
        println!("training mode={} seed={}", cfg.mode.name(), cfg.seed);
    }
    let artifacts = run_experiment(&cfg)?;
    if level >= LogLevel::Debug {
        print!("{}", artifacts.log.to_tsv());
    }
    write_artifacts(&artifacts, &out)?;
    if level >= LogLevel::Info {
        print!("{}", artifacts.report.to_text());
        println!("artifacts written to {}", out.display());
    }
    Ok(())
}

fn cmd_eval(checkpoint: PathBuf, data: PathBuf, domain: String, direction: String) -> Result<()> {
    let level = log_level()?;
    let domain = match domain.as_str() {
        "source" => Domain::Source,
        "target" => Domain::Target,
        other => {
            return Err(Error::Config(format!(
                "domain must be source or target, got `{other}`"
            )))
        }
    };
    let cp = Checkpoint::load(&checkpoint)?;
    let raw = load_dataset(&data)?;
    let stats = match domain {
        Domain::Source => &cp.src_stats,
        Domain::Target => &cp.tgt_stats,
    };
    let (ds, _) = normalize(&raw, Some(stats))?;
    let report = evaluate(&cp.model, &ds, domain)?;
    match direction.as_str() {
        "i2t" => println!("map_img_to_txt = {}", report.map_img_to_txt),
        "t2i" => println!("map_txt_to_img = {}", report.map_txt_to_img),
        "both" => print!("{}", report.to_text()),
        other => {
            return Err(Error::Config(format!(
                "direction must be i2t, t2i or both, got `{other}`"
            )))
        }
    }
    if level >= LogLevel::Debug {
        for (i, (a, b)) in report
            .ap_img_to_txt
            .iter()
            .zip(&report.ap_txt_to_img)
            .enumerate()
        {
            println!("query {i}: ap_i2t = {a}, ap_t2i = {b}");
        }
    }
    Ok(())
}

fn cmd_sweep_alpha(
    config: Option<PathBuf>,
    out: PathBuf,
    seed: Option<u64>,
    alphas: String,
) -> Result<()> {
    let level = log_level()?;
    let base = {
        let mut cfg = load_config(&config)?;
        apply_overrides(&mut cfg, seed, None)?;
        cfg
    };
    let alphas: Vec<f64> = alphas
        .split(',')
        .map(|t| {
            t.trim()
                .parse::<f64>()
                .map_err(|_| Error::Config(format!("bad alpha `{t}`")))
        })
        .collect::<Result<_>>()?;
    if alphas.is_empty() {
        return Err(Error::Config("no alphas given".into()));
    }
    let mut table = String::from("alpha\tmap_img_to_txt\tmap_txt_to_img\tmap_average\n");
    for alpha in alphas {
        let mut cfg = base.clone();
        cfg.alpha = alpha;
        cfg.validate()?;
        let artifacts = run_experiment(&cfg)?;
        let r = &artifacts.report;
        if level >= LogLevel::Info {
            println!("alpha = {alpha}: map_average = {}", r.map_average);
        }
        table.push_str(&format!(
            "{alpha}\t{}\t{}\t{}\n",
            r.map_img_to_txt, r.map_txt_to_img, r.map_average
        ));
    }
    dckt::atomic_write(&out.join("alpha_sweep.tsv"), table.as_bytes())?;
    if level >= LogLevel::Info {
        println!("sweep written to {}", out.join("alpha_sweep.tsv").display());
    }
    Ok(())
}

fn run() -> Result<()> {
    let cli = Cli::parse();
    match cli.command {
        Command::Generate { config, out, seed } => cmd_generate(config, out, seed),
        Command::Train {
            config,
            out,
            seed,
            mode,
        } => cmd_train(config, out, seed, mode),
        Command::Eval {
            checkpoint,
            data,
            domain,
            direction,
        } => cmd_eval(checkpoint, data, domain, direction),
        Command::SweepAlpha {
            config,
            out,
            seed,
            alphas,
        } => cmd_sweep_alpha(config, out, seed, alphas),
    }
}

fn main() -> ExitCode {
    match run() {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
