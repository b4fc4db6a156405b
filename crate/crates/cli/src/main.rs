use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use gradshield::attacks::mia_all;
use gradshield::compressors::{Compressor, CompressorKind};
use gradshield::distsim::{capture_many, train, GradientTap, TapSource};
use gradshield::harness::plan::{
    attack_tap, gradinv_sim_config, mia_sim_config, mia_split, sample_attack_config,
};
use gradshield::harness::{render, run_plan, Config, ExperimentPlan, HarnessError, ReportBundle};
use gradshield::metrics::Image;
use gradshield::model::ParamSet;
use log::info;
use thiserror::Error;

const DEFAULT_CONFIG: &str = "gradshield.toml";
const DEFAULT_OUT: &str = "gradshield-out";

#[derive(Parser, Debug)]
#[command(
    name = "gradshield",
    version,
    about = "Gradient compression privacy workbench"
)]
struct Cli {
    /// Experiment config (TOML). Defaults to ./gradshield.toml.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the config's top-level seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory; falls back to $GRADSHIELD_OUT, then the config.
    #[arg(long, global = true)]
    out_dir: Option<PathBuf>,
    /// Log progress to stderr (repeat for more detail).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone)]
struct CompressorArg {
    /// identity, powersgd:RANK or topk:RATIO.
    #[arg(long, default_value = "identity")]
    compressor: String,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train with the [training] settings and write the log and final parameters.
    Train {
        #[command(flatten)]
        compressor: CompressorArg,
        #[arg(long)]
        steps: Option<usize>,
    },
    /// Capture worker (or aggregate) gradient taps at one step.
    Capture {
        #[command(flatten)]
        compressor: CompressorArg,
        #[arg(long, default_value_t = 0)]
        step: usize,
        /// Workers to tap; defaults to worker 0.
        #[arg(long, value_delimiter = ',')]
        workers: Vec<usize>,
        /// Also tap the aggregated update.
        #[arg(long)]
        aggregate: bool,
    },
    /// Gradient inversion against a tap dump.
    AttackGradinv {
        #[arg(long)]
        tap: PathBuf,
        #[arg(long)]
        iterations: Option<usize>,
        #[arg(long)]
        restarts: Option<usize>,
    },
    /// Membership inference against a trained model.
    AttackMia {
        #[command(flatten)]
        compressor: CompressorArg,
        /// Attack these parameters instead of training per [mia].
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Run the full sweep and write a report bundle.
    Sweep,
    /// Re-render the CSV tables of an existing bundle.
    Report {
        #[arg(long)]
        from: PathBuf,
        /// Destination; defaults to the bundle directory.
        #[arg(long)]
        to: Option<PathBuf>,
    },
}

#[derive(Debug, Error)]
enum CliError {
    #[error(transparent)]
    Harness(#[from] HarnessError),
    #[error("{0}")]
    Usage(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
}

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            CliError::Harness(HarnessError::MissingConfig { .. }) | CliError::Usage(_) => 2,
            _ => 1,
        }
    }
}

type Result<T> = std::result::Result<T, CliError>;

fn write(path: &Path, bytes: &[u8]) -> Result<()> {
    let io = |source| CliError::Io {
        path: path.to_path_buf(),
        source,
    };
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(io)?;
    }
    fs::write(path, bytes).map_err(io)
}

fn parse_compressor(spec: &str, cfg: &Config) -> Result<Compressor> {
    let bad = || {
        CliError::Usage(format!(
            "bad --compressor `{spec}`: expected identity, powersgd:RANK or topk:RATIO"
        ))
    };
    let kind = match spec.split_once(':') {
        None if spec == "identity" => CompressorKind::Identity,
        Some(("powersgd", r)) => CompressorKind::PowerSgd {
            rank: r.parse().map_err(|_| bad())?,
            power_iterations: cfg.training.power_iterations,
        },
        Some(("topk", r)) => CompressorKind::TopK {
            ratio: r.parse().map_err(|_| bad())?,
        },
        _ => return Err(bad()),
    };
    kind.validate()
        .map_err(|e| CliError::Usage(e.to_string()))?;
    Ok(Compressor::new(kind).with_scope(cfg.training.topk_scope))
}

fn slug(c: &Compressor) -> String {
    match c.kind {
        CompressorKind::Identity => "identity".into(),
        CompressorKind::PowerSgd { rank, .. } => format!("powersgd_r{rank}"),
        CompressorKind::TopK { ratio } => format!("topk_{ratio}"),
    }
}

struct Ctx {
    config: Config,
    out: PathBuf,
}

fn context(cli: &Cli) -> Result<Ctx> {
    let path = cli
        .config
        .clone()
        .unwrap_or_else(|| PathBuf::from(DEFAULT_CONFIG));
    let mut config = Config::load(&path)?;
    if let Some(seed) = cli.seed {
        config.seed = seed;
    }
    let out = cli
        .out_dir
        .clone()
        .or_else(|| std::env::var_os("GRADSHIELD_OUT").map(PathBuf::from))
        .or_else(|| config.out_dir.clone())
        .unwrap_or_else(|| PathBuf::from(DEFAULT_OUT));
    Ok(Ctx { config, out })
}

fn run(cli: Cli) -> Result<()> {
    if let Command::Report { from, to } = &cli.command {
        let bundle = ReportBundle::load(from)?;
        render(&bundle, to.as_deref().unwrap_or(from))?;
        print_ssim(&bundle);
        return Ok(());
    }
    let ctx = context(&cli)?;
    let cfg = &ctx.config;
    match cli.command {
        Command::Train { compressor, steps } => {
            let plan = ExperimentPlan::from_config(cfg.clone())?;
            let c = parse_compressor(&compressor.compressor, cfg)?;
            let mut sim = gradinv_sim_config(cfg, &plan.network, c);
            if let Some(s) = steps {
                sim.steps = s;
            }
            let log = train(&sim, &plan.dataset).map_err(HarnessError::from)?;
            let dir = ctx.out.join("train").join(slug(&c));
            let mut csv = Vec::new();
            log.write_csv(&mut csv).map_err(HarnessError::from)?;
            write(&dir.join("log.csv"), &csv)?;
            write(
                &dir.join("params.gshd"),
                &log.final_params.to_checkpoint_bytes(),
            )?;
            println!(
                "trained {} steps, final loss {:.6}; wrote {}",
                sim.steps,
                log.final_loss().unwrap_or(f64::NAN),
                dir.display()
            );
        }
        Command::Capture {
            compressor,
            step,
            workers,
            aggregate,
        } => {
            let plan = ExperimentPlan::from_config(cfg.clone())?;
            let c = parse_compressor(&compressor.compressor, cfg)?;
            let mut sim = gradinv_sim_config(cfg, &plan.network, c);
            sim.steps = sim.steps.max(step + 1);
            let mut sources: Vec<TapSource> = if workers.is_empty() && !aggregate {
                vec![TapSource::Worker(0)]
            } else {
                workers.into_iter().map(TapSource::Worker).collect()
            };
            if aggregate {
                sources.push(TapSource::Aggregate);
            }
            let taps =
                capture_many(&sim, &plan.dataset, step, &sources).map_err(HarnessError::from)?;
            for tap in taps {
                let name = match tap.source {
                    TapSource::Worker(w) => format!("step{step}_w{w}.gtap"),
                    TapSource::Aggregate => format!("step{step}_aggregate.gtap"),
                };
                let path = ctx.out.join("taps").join(slug(&c)).join(name);
                write(&path, &tap.to_dump_bytes())?;
                println!(
                    "{}: ratio {:.6}, discarded energy {:.3e}",
                    path.display(),
                    tap.observed.ratio(),
                    tap.discarded_energy()
                );
            }
        }
        Command::AttackGradinv {
            tap,
            iterations,
            restarts,
        } => {
            let plan = ExperimentPlan::from_config(cfg.clone())?;
            let bytes = fs::read(&tap).map_err(|source| CliError::Io {
                path: tap.clone(),
                source,
            })?;
            let t = GradientTap::read_dump(&bytes).map_err(HarnessError::from)?;
            let mut attack = sample_attack_config(cfg, 0);
            if let Some(i) = iterations {
                attack.iterations = i;
            }
            if let Some(r) = restarts {
                attack.restarts = r;
            }
            let r = attack_tap(&plan.network, &t, &attack)?;
            let stem = tap.file_stem().and_then(|s| s.to_str()).unwrap_or("tap");
            let dir = ctx.out.join("gradinv");
            let mut img = Vec::new();
            Image::from_flat(plan.network.input, r.x.clone())
                .and_then(|i| i.write_netpbm(&mut img))
                .map_err(HarnessError::from)?;
            write(&dir.join(format!("{stem}_recon.pgm")), &img)?;
            let mut trace = Vec::new();
            r.write_trace_csv(&mut trace).map_err(HarnessError::from)?;
            write(&dir.join(format!("{stem}_trace.csv")), &trace)?;
            println!(
                "label {} restart {} loss {:.6} ssim {:.4}",
                r.label,
                r.restart,
                r.loss,
                r.ssim.unwrap_or(f64::NAN)
            );
        }
        Command::AttackMia {
            compressor,
            checkpoint,
        } => {
            let plan = ExperimentPlan::from_config(cfg.clone())?;
            let (mi, ni) = mia_split(cfg, &plan.dataset)?;
            let members = plan.dataset.select(&mi);
            let nonmembers = plan.dataset.select(&ni);
            let params = match checkpoint {
                Some(p) => {
                    let f = fs::File::open(&p).map_err(|source| CliError::Io {
                        path: p.clone(),
                        source,
                    })?;
                    ParamSet::read_checkpoint(std::io::BufReader::new(f))
                        .map_err(HarnessError::from)?
                }
                None => {
                    let c = parse_compressor(&compressor.compressor, cfg)?;
                    let sim = mia_sim_config(cfg, &plan.network, c);
                    train(&sim, &members)
                        .map_err(HarnessError::from)?
                        .final_params
                }
            };
            let results = mia_all(
                &plan.network,
                &params,
                &members.examples,
                &nonmembers.examples,
            )
            .map_err(HarnessError::from)?;
            println!("attack,balanced_accuracy,auc,threshold");
            for r in results {
                println!(
                    "{},{:.4},{:.4},{:.6}",
                    r.kind.name(),
                    r.balanced_accuracy,
                    r.auc,
                    r.threshold
                );
            }
        }
        Command::Sweep => {
            let plan = ExperimentPlan::from_config(cfg.clone())?;
            info!("{} settings on {}", plan.settings.len(), plan.dataset_name);
            let bundle = run_plan(&plan, Some(&ctx.out))?;
            render(&bundle, &ctx.out)?;
            print_ssim(&bundle);
            if bundle.partial {
                eprintln!(
                    "warning: {} sub-run(s) failed; bundle is partial",
                    bundle.failures.len()
                );
            }
            println!("bundle written to {}", ctx.out.display());
        }
        Command::Report { .. } => unreachable!("handled above"),
    }
    Ok(())
}

fn print_ssim(bundle: &ReportBundle) {
    println!(
        "{:<14} {:<28} {:>8} {:>8} {:>8}",
        "algorithm", "rank/ratio", "mean", "std", "%"
    );
    for r in &bundle.ssim_rows {
        let pct = r
            .percent_of_baseline
            .map_or("-".to_string(), |p| format!("{p:.2}"));
        println!(
            "{:<14} {:<28} {:>8.4} {:>8.4} {:>8}",
            r.algorithm, r.rank_or_ratio, r.mean_ssim, r.std_ssim, pct
        );
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
