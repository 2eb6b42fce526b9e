use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use conceptcf::config::RunConfig;
use conceptcf::pipeline::{self, Layout};
use conceptcf::{Error, ErrorCategory};

/// Concept-restricted diffusion counterfactuals for image classifiers.
#[derive(Parser, Debug)]
#[command(name = "conceptcf", version)]
struct Cli {
    /// TOML run configuration; defaults apply to everything it leaves out.
    #[arg(short, long, global = true)]
    config: Option<PathBuf>,

    /// Override a setting, e.g. `--set counterfactual.k=5`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    overrides: Vec<String>,

    /// Output directory of this run.
    #[arg(short, long, global = true)]
    output: Option<PathBuf>,

    /// Checkpoint directory shared by runs.
    #[arg(long, global = true)]
    checkpoints: Option<PathBuf>,

    /// More log output (repeat for debug).
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    verbose: u8,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train the classifier, latent codec and denoiser.
    Train {
        /// Reuse existing checkpoints and continue denoiser training.
        #[arg(long)]
        resume: bool,
    },
    /// Build the reference index and concept reference patches.
    Index,
    /// Generate counterfactuals for the evaluation samples.
    Generate {
        /// Number of concepts, or `all`.
        #[arg(short, long)]
        k: Option<String>,
        #[arg(long)]
        workers: Option<usize>,
        #[arg(long)]
        limit: Option<usize>,
    },
    /// Compute metric reports, plus a comparison table over several runs.
    Evaluate {
        /// Further run output directories to include in the comparison.
        #[arg(long = "run")]
        runs: Vec<PathBuf>,
        /// Aggregate despite config hash mismatches or modified results.
        #[arg(long)]
        force: bool,
    },
    /// Write explanation panels and an index page.
    Report {
        /// Report directory; `<output>/report` by default.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Print the effective configuration and its hash.
    Config,
}

fn exit_code(e: &Error) -> u8 {
    match e.category() {
        ErrorCategory::Validation => 2,
        ErrorCategory::Data => 3,
        ErrorCategory::Runtime => 4,
        ErrorCategory::Io => 5,
    }
}

fn load_config(cli: &Cli) -> conceptcf::Result<RunConfig> {
    let mut overrides = cli.overrides.clone();
    let quote = |p: &PathBuf| format!("{:?}", p.to_string_lossy());
    if let Some(o) = &cli.output {
        overrides.push(format!("paths.output={}", quote(o)));
    }
    if let Some(c) = &cli.checkpoints {
        overrides.push(format!("paths.checkpoints={}", quote(c)));
    }
    if let Command::Generate { k, workers, limit } = &cli.command {
        if let Some(k) = k {
            let v = if k == "all" { "\"all\"".to_string() } else { k.clone() };
            overrides.push(format!("counterfactual.k={v}"));
        }
        if let Some(w) = workers {
            overrides.push(format!("generate.workers={w}"));
        }
        if let Some(l) = limit {
            overrides.push(format!("generate.limit={l}"));
        }
    }
    RunConfig::load(cli.config.as_deref(), &overrides)
}

fn run(cli: &Cli) -> conceptcf::Result<u8> {
    let config = load_config(cli)?;
    let layout = Layout::new(&config);
    match &cli.command {
        Command::Train { resume } => {
            let log = pipeline::cmd_train(&config, *resume)?;
            println!(
                "classifier: held-out accuracy {:.4} on {} samples (chance {:.4})",
                log.classifier.heldout_accuracy, log.classifier.heldout_samples, log.classifier.chance_accuracy
            );
            if let Some(c) = &log.codec {
                println!("codec: reconstruction loss {:.5}", c.final_loss);
            }
            println!("denoiser: loss {:.5} after {} steps", log.denoiser.final_loss, log.denoiser.steps);
            println!("checkpoints in {}", layout.checkpoints.display());
        }
        Command::Index => {
            let s = pipeline::cmd_index(&config)?;
            println!(
                "index: {} reference rows, {} evaluation samples, patches for {} channels",
                s.manifest.rows,
                s.split.evaluation.len(),
                s.patches.channels.len()
            );
            if s.split.evaluation.is_empty() {
                eprintln!("warning: no evaluation samples at index ratio {}", s.split.ratio);
            }
        }
        Command::Generate { .. } => {
            let s = pipeline::cmd_generate(&config)?;
            println!(
                "generate: {} samples, {} new, {} already complete, {} failed (config {})",
                s.total,
                s.generated,
                s.skipped,
                s.failed.len(),
                config.hash()
            );
            for (id, e) in &s.failed {
                eprintln!("failed {id}: {e}");
            }
            if !s.failed.is_empty() {
                return Ok(4);
            }
        }
        Command::Evaluate { runs, force } => {
            let s = pipeline::cmd_evaluate(&config, runs, *force)?;
            for t in &s.tampered {
                eprintln!("warning: metrics recomputed for modified sample {t}");
            }
            let r = &s.reports[0];
            println!(
                "k = {} of {}: flip ratio {:.4}, L1 {:.3}, L2 {:.3}, FID {:.5} over {} samples",
                r.k, r.total_channels, r.flip_ratio, r.l1, r.l2, r.fid, r.samples
            );
            if let Some(v) = &r.validity {
                println!(
                    "validity: selected {:?}, random {:?}, sign test p = {:.3e}",
                    v.mean_selected, v.mean_random, v.sign_test_p
                );
            }
            println!("report: {}", layout.metrics_file().display());
            if let Some(t) = &s.table {
                print!("{t}");
            }
        }
        Command::Report { out } => {
            let names = conceptcf::classifier::ClassifierModel::load(&layout.classifier())?
                .class_names()
                .to_vec();
            let out = out.clone().unwrap_or_else(|| layout.report_dir());
            let s = conceptcf::report::emit_report(&layout.results_dir(), &layout.patches_dir(), &names, &out)?;
            println!("{} panels in {}", s.panels.len(), out.display());
            for m in &s.missing {
                eprintln!("missing: {m}");
            }
        }
        Command::Config => {
            print!("{}", config.to_toml());
            println!("# hash {}", config.hash());
        }
    }
    Ok(0)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match run(&cli) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
