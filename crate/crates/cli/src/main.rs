//! `ddat`: dataset preparation, training runs, fusion, reports and plots.

use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use ddat_core::data::{generate_synthetic, write_dataset, SyntheticConfig, DEFAULT_DELAY};
use ddat_core::experiment::{
    emit_plots, emit_report, prepare_data, run_experiment, ExperimentConfig, ExperimentRecord, FusionReport,
    FusionScenario, NetworkSpec, PlotRun, RECORD_FILE,
};
use ddat_core::{Dimension, SumConvention, System};

#[derive(Parser)]
#[command(name = "ddat", version, about = "Difficulty-aware training for continuous emotion prediction")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Derive gold standards, uncertainty labels and feature statistics from a manifest.
    PrepareData {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Annotation delay in seconds (defaults to the manifest's value).
        #[arg(long)]
        delay: Option<f64>,
    },
    /// Generate a synthetic dataset with a manifest.
    SynthData(SynthArgs),
    /// Run one system end to end.
    Train(TrainArgs),
    /// Run a fusion scenario.
    Fuse {
        #[arg(long)]
        scenario: PathBuf,
    },
    /// Tabulate experiment records.
    Report {
        /// Experiment output directories.
        #[arg(long = "run", required = true)]
        runs: Vec<PathBuf>,
        /// System whose cells the others are tested against.
        #[arg(long)]
        reference: Option<System>,
        /// Directory for report.txt and report.json.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Draw prediction traces and contribution charts as SVG.
    Plot {
        #[arg(long = "run")]
        runs: Vec<PathBuf>,
        /// Fusion report JSON files.
        #[arg(long = "fusion")]
        fusion: Vec<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Subjects per partition as train,dev,test.
    #[arg(long, value_delimiter = ',', default_values_t = [9, 9, 9])]
    subjects: Vec<usize>,
    #[arg(long, default_value_t = 1500)]
    frames: usize,
    #[arg(long, default_value_t = 20)]
    features: usize,
    #[arg(long, default_value_t = 6)]
    raters: usize,
    /// Annotation delay recorded in the manifest, seconds.
    #[arg(long, default_value_t = DEFAULT_DELAY)]
    delay: f64,
}

/// Flags override the matching fields of `--config`; without a config file
/// `--manifest`, `--system`, `--dimension` and `--out` are required.
#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    manifest: Option<PathBuf>,
    #[arg(long)]
    system: Option<System>,
    #[arg(long)]
    dimension: Option<Dimension>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Layer counts to search, comma separated.
    #[arg(long, value_delimiter = ',')]
    layers: Option<Vec<usize>>,
    /// Units per layer to search, comma separated.
    #[arg(long, value_delimiter = ',')]
    units: Option<Vec<usize>>,
    #[arg(long)]
    stage1_epochs: Option<usize>,
    #[arg(long)]
    stage2_epochs: Option<usize>,
    #[arg(long)]
    learning_rate: Option<f64>,
    #[arg(long)]
    chunk_len: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    delay: Option<f64>,
    /// Use |Σ e| instead of Σ e for the scalar reconstruction indicator.
    #[arg(long)]
    absolute_sum: bool,
    #[arg(long)]
    no_postprocess: bool,
    /// Print the resolved config as TOML and exit.
    #[arg(long)]
    print_config: bool,
}

fn resolve_train_config(a: TrainArgs) -> Result<(ExperimentConfig, bool)> {
    let mut cfg = match &a.config {
        Some(path) => ExperimentConfig::read(path).with_context(|| format!("config: reading {}", path.display()))?,
        None => {
            let (Some(m), Some(s), Some(d), Some(o)) = (&a.manifest, a.system, a.dimension, &a.out) else {
                bail!("config: without --config, --manifest, --system, --dimension and --out are required");
            };
            ExperimentConfig::new(m, s, d, o)
        }
    };
    if let Some(m) = a.manifest {
        cfg.manifest = m;
    }
    if let Some(s) = a.system {
        cfg.system = s;
    }
    if let Some(d) = a.dimension {
        cfg.dimension = d;
    }
    if let Some(o) = a.out {
        cfg.out_dir = o;
    }
    if let Some(s) = a.seed {
        cfg.seed = s;
    }
    let NetworkSpec { layers, units } = cfg.network.clone();
    cfg.network = NetworkSpec {
        layers: a.layers.unwrap_or(layers),
        units: a.units.unwrap_or(units),
    };
    let t = &mut cfg.training;
    t.stage1_epochs = a.stage1_epochs.unwrap_or(t.stage1_epochs);
    t.stage2_epochs = a.stage2_epochs.unwrap_or(t.stage2_epochs);
    t.learning_rate = a.learning_rate.unwrap_or(t.learning_rate);
    t.chunk_len = a.chunk_len.unwrap_or(t.chunk_len);
    t.batch_size = a.batch_size.unwrap_or(t.batch_size);
    if a.delay.is_some() {
        cfg.delay = a.delay;
    }
    if a.absolute_sum {
        cfg.sum_convention = SumConvention::Absolute;
    }
    if a.no_postprocess {
        cfg.postprocess = false;
    }
    Ok((cfg, a.print_config))
}

fn print_record(r: &ExperimentRecord) {
    for s in &r.stages {
        println!(
            "stage {}: {}x{} input {} best epoch {} dev CCC {}",
            s.stage,
            s.layers,
            s.units,
            s.input_dim,
            s.best_epoch.map_or("-".into(), |e| e.to_string()),
            s.best_dev_ccc.map_or("-".into(), |c| format!("{c:.4}")),
        );
    }
    let fmt = |v: Option<f64>| v.map_or("-".to_owned(), |c| format!("{c:.4}"));
    println!(
        "{} {}: dev CCC {:.4} (post-processed {})",
        r.system,
        r.dimension,
        r.dev.raw_ccc,
        fmt(r.dev.postprocessed_ccc)
    );
    if let Some(t) = &r.test {
        println!("test CCC {:.4} (post-processed {})", t.raw_ccc, fmt(t.postprocessed_ccc));
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::PrepareData { manifest, out, delay } => {
            let s = prepare_data(&manifest, &out, delay)?;
            println!(
                "prepared {} subjects ({} frames, {} features) into {}",
                s.subjects.iter().sum::<usize>(),
                s.frames,
                s.feature_dim,
                out.display()
            );
        }
        Command::SynthData(a) => {
            if a.subjects.len() != 3 {
                bail!("synthetic data: --subjects needs three counts (train,dev,test)");
            }
            let cfg = SyntheticConfig {
                subjects_per_partition: [a.subjects[0], a.subjects[1], a.subjects[2]],
                frames: a.frames,
                feature_dim: a.features,
                raters: a.raters,
                ..SyntheticConfig::default()
            };
            let ds = generate_synthetic(&cfg, a.seed).context("synthetic data")?;
            let manifest = write_dataset(&a.out, &ds, a.delay).context("synthetic data")?;
            println!("{}", manifest.display());
        }
        Command::Train(a) => {
            let (cfg, print_only) = resolve_train_config(a)?;
            if print_only {
                print!("{}", cfg.to_toml());
                return Ok(());
            }
            let record = run_experiment(&cfg)?;
            print_record(&record);
            println!("outputs in {}", cfg.out_dir.display());
        }
        Command::Fuse { scenario } => {
            let s = FusionScenario::read(&scenario).context("fusion config")?;
            let report = ddat_core::experiment::run_fusion(&s)?;
            print!("{}", report.to_text());
        }
        Command::Report { runs, reference, out } => {
            let records = runs
                .iter()
                .map(|d| ExperimentRecord::read(d.join(RECORD_FILE)))
                .collect::<Result<Vec<_>, _>>()
                .context("report")?;
            let report = emit_report(&records, reference);
            let text = report.to_text();
            if let Some(out) = out {
                std::fs::create_dir_all(&out).with_context(|| format!("report: creating {}", out.display()))?;
                std::fs::write(out.join("report.txt"), &text).context("report")?;
                std::fs::write(out.join("report.json"), report.to_json()).context("report")?;
            }
            print!("{text}");
        }
        Command::Plot { runs, fusion, out } => {
            let runs = runs
                .into_iter()
                .map(PlotRun::load)
                .collect::<Result<Vec<_>, _>>()
                .context("plot")?;
            let fusion = fusion
                .iter()
                .map(FusionReport::read)
                .collect::<Result<Vec<_>, _>>()
                .context("plot")?;
            for path in emit_plots(&runs, &fusion, &out)? {
                println!("{}", path.display());
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
