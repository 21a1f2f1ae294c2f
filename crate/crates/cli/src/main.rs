use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use log::error;

use qpi_core::coherence::{nm_to_um, CoherenceReport, SourceSpec};
use qpi_core::config::{validate_config, PipelineConfig};
use qpi_core::dataset::Task;
use qpi_core::metrics::{read_roc_csv, read_scores, roc_svg, MetricsReport};
use qpi_core::pipeline::{run_pipeline, run_stage, verify_stage, Layout, RunOptions, Stage};
use qpi_core::{QpiError, Result};

#[derive(Parser)]
#[command(name = "qpi", version, about = "Multi-wavelength QPI malaria staging pipeline")]
struct Cli {
    /// Sequential loops and fixed reduction order everywhere.
    #[arg(long, global = true)]
    deterministic: bool,

    /// More log output (repeat for debug).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,

    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct StageArgs {
    /// Pipeline configuration. Defaults to `<out>/config.toml` when present,
    /// else the built-in defaults.
    #[arg(long)]
    config: Option<PathBuf>,

    /// Artifact directory.
    #[arg(long, default_value = "qpi-run")]
    out: PathBuf,
}

#[derive(Subcommand)]
enum DatasetCommand {
    /// Balance, split and augment the extracted patches into a manifest.
    Build(StageArgs),
}

#[derive(Subcommand)]
enum Command {
    /// Coherence length and lateral resolution for a source and objective.
    Coherence {
        /// Central wavelengths in nm; defaults to the three lasers.
        #[arg(long = "wavelength-nm", num_args = 1.., default_values_t = [632.0, 532.0, 460.0])]
        wavelengths_nm: Vec<f64>,
        /// Temporal bandwidth in nm.
        #[arg(long = "bandwidth-nm", default_value_t = 0.0)]
        bandwidth_nm: f64,
        #[arg(long, default_value_t = 0.4)]
        na: f64,
    },
    /// Synthesise interferograms and ground truth.
    Synth(StageArgs),
    /// Retrieve unwrapped phase maps from the interferograms.
    Retrieve(StageArgs),
    /// Segment cells and crop 60×60 patches.
    Extract(StageArgs),
    #[command(subcommand)]
    Dataset(DatasetCommand),
    /// Train one classifier per task.
    Train(StageArgs),
    /// Score the Test split.
    Predict(StageArgs),
    /// Metrics, ROC and report from the Test scores.
    Eval(StageArgs),
    /// Every stage in order.
    Run(StageArgs),
    /// Re-run one stage and compare its outputs with its record.
    Verify {
        #[command(flatten)]
        args: StageArgs,
        #[arg(long)]
        stage: Stage,
    },
    /// Check a configuration file and list every violation.
    CheckConfig {
        config: Option<PathBuf>,
    },
    /// Metrics for an external score file (`sample_id,score,truth`).
    Score {
        scores: PathBuf,
        #[arg(long, default_value_t = qpi_core::metrics::DEFAULT_THRESHOLD)]
        threshold: f64,
    },
    /// Render a ROC CSV as SVG.
    PlotRoc {
        roc: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        title: Option<String>,
    },
}

fn load_config(args: &StageArgs) -> Result<PipelineConfig> {
    let path = match &args.config {
        Some(p) => p.clone(),
        None => {
            let saved = Layout::new(&args.out).config();
            if !saved.exists() {
                return Ok(PipelineConfig::default());
            }
            saved
        }
    };
    let config = PipelineConfig::load(&path)?;
    let violations = validate_config(&config);
    if !violations.is_empty() {
        return Err(QpiError::Config(format!(
            "{} is invalid: {}",
            path.display(),
            violations.join("; ")
        )));
    }
    Ok(config)
}

fn stage(args: &StageArgs, stage: Stage, opts: RunOptions) -> Result<()> {
    let config = load_config(args)?;
    fs::create_dir_all(&args.out).map_err(|e| QpiError::Io {
        path: args.out.clone(),
        source: e,
    })?;
    let layout = Layout::new(&args.out);
    if !layout.config().exists() {
        fs::write(layout.config(), config.to_toml()?).map_err(|e| QpiError::Io {
            path: layout.config(),
            source: e,
        })?;
    }
    run_stage(&config, &args.out, stage, opts)
        .map(|_| ())
        .map_err(|e| QpiError::Stage {
            stage: stage.name().into(),
            source: Box::new(e),
        })
}

fn write_or_print(out: Option<&Path>, text: &str) -> Result<()> {
    match out {
        Some(p) => fs::write(p, text).map_err(|e| QpiError::Io {
            path: p.to_path_buf(),
            source: e,
        }),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    let opts = RunOptions {
        deterministic: cli.deterministic,
    };
    match cli.command {
        Command::Coherence {
            wavelengths_nm,
            bandwidth_nm,
            na,
        } => {
            println!("{:>8} {:>14} {:>14}", "λ (nm)", "Lc (µm)", "lateral (µm)");
            for nm in wavelengths_nm {
                let source = SourceSpec::from_na(nm_to_um(nm), nm_to_um(bandwidth_nm), na)?;
                let r = CoherenceReport::evaluate(&source, na)?;
                println!(
                    "{nm:>8.1} {:>14.6} {:>14.6}",
                    r.coherence_length_um, r.lateral_resolution_um
                );
            }
            Ok(())
        }
        Command::Synth(a) => stage(&a, Stage::Synth, opts),
        Command::Retrieve(a) => stage(&a, Stage::Retrieve, opts),
        Command::Extract(a) => stage(&a, Stage::Extract, opts),
        Command::Dataset(DatasetCommand::Build(a)) => stage(&a, Stage::Dataset, opts),
        Command::Train(a) => stage(&a, Stage::Train, opts),
        Command::Predict(a) => stage(&a, Stage::Predict, opts),
        Command::Eval(a) => {
            stage(&a, Stage::Eval, opts)?;
            let report = Layout::new(&a.out).report();
            let text = fs::read_to_string(&report).map_err(|e| QpiError::Io { path: report, source: e })?;
            print!("{text}");
            Ok(())
        }
        Command::Run(a) => {
            let config = load_config(&a)?;
            run_pipeline(&config, &a.out, opts)?;
            let report = Layout::new(&a.out).report();
            let text = fs::read_to_string(&report).map_err(|e| QpiError::Io { path: report, source: e })?;
            print!("{text}");
            Ok(())
        }
        Command::Verify { args, stage } => {
            let config = load_config(&args)?;
            let diffs = verify_stage(&config, &args.out, stage, opts)?;
            if diffs.is_empty() {
                println!("{stage}: outputs reproduced");
                Ok(())
            } else {
                Err(QpiError::Contract(format!("{stage} outputs differ: {}", diffs.join(", "))))
            }
        }
        Command::CheckConfig { config } => {
            let config = match config {
                Some(p) => PipelineConfig::load(&p)?,
                None => PipelineConfig::default(),
            };
            let violations = validate_config(&config);
            if violations.is_empty() {
                println!("ok");
                Ok(())
            } else {
                for v in &violations {
                    println!("{v}");
                }
                Err(QpiError::Config(format!("{} violations", violations.len())))
            }
        }
        Command::Score { scores, threshold } => {
            let s = read_scores(&scores)?;
            let (report, _) = MetricsReport::compute(&s, threshold)?;
            print!("{}", report.table());
            Ok(())
        }
        Command::PlotRoc { roc, out, title } => {
            let points = read_roc_csv(&roc)?;
            let title = title.unwrap_or_else(|| {
                let stem = roc.file_stem().unwrap_or_default().to_string_lossy();
                let task = stem.split('.').next().unwrap_or_default();
                match task.parse::<Task>() {
                    Ok(t) => format!("ROC: {}", t.title()),
                    Err(_) => format!("ROC: {stem}"),
                }
            });
            write_or_print(out.as_deref(), &roc_svg(&points, &title))
        }
    }
}

fn init_threads() -> Result<()> {
    let Ok(value) = std::env::var("QPI_THREADS") else {
        return Ok(());
    };
    let n: usize = value
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| QpiError::Config(format!("QPI_THREADS={value:?} is not a positive integer")))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| QpiError::Config(format!("cannot size the worker pool: {e}")))
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "info",
        1 => "debug",
        _ => "trace",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level))
        .format_timestamp(None)
        .init();
    let result = init_threads().and_then(|_| run(cli));
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let mut msg = e.to_string();
            let mut source = std::error::Error::source(&e);
            while let Some(s) = source {
                if !msg.contains(&s.to_string()) {
                    msg.push_str(&format!(": {s}"));
                }
                source = s.source();
            }
            error!("{msg}");
            ExitCode::FAILURE
        }
    }
}
