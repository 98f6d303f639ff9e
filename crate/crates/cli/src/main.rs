use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use paratool::adapter::AdapterStore;
use paratool::flops::{flops_table, load_profiles};
use paratool::pipeline::config::RunConfig;
use paratool::pipeline::eval::Strategy;
use paratool::pipeline::run::{summary_table, Experiment, SummaryRow};
use paratool::Error;

const DEFAULT_CONFIG: &str = include_str!("../../../configs/default.toml");
const SMOKE_CONFIG: &str = include_str!("../../../configs/smoke.toml");

#[derive(Parser)]
#[command(name = "paratool", version, about = "Tools as composable low-rank adapters on a small transformer")]
struct Cli {
    /// Preset name (`default`, `smoke`) or path to a TOML config.
    #[arg(long, global = true, default_value = "default")]
    config: String,
    /// Run a single seed instead of the configured list.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Artifact root; runs land in `<root>/<name>`.
    #[arg(long, global = true, env = "PARATOOL_ROOT", default_value = "runs")]
    root: PathBuf,
    /// Worker threads for stage 1 and evaluation.
    #[arg(long, global = true, default_value_t = 1, value_parser = clap::value_parser!(u16).range(1..))]
    threads: u16,
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum StrategyArg {
    Paratool,
    Average,
    Top1,
    Oracle,
    NoFinetune,
}

impl From<StrategyArg> for Strategy {
    fn from(s: StrategyArg) -> Self {
        match s {
            StrategyArg::Paratool => Strategy::Paratool,
            StrategyArg::Average => Strategy::Average,
            StrategyArg::Top1 => Strategy::Top1,
            StrategyArg::Oracle => Strategy::Oracle,
            StrategyArg::NoFinetune => Strategy::NoFinetune,
        }
    }
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum StageArg {
    Pretrained,
    Tuned,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the toolset and trace corpus.
    Synth,
    /// Warm up the backbone if needed, then train one adapter per tool.
    Pretrain,
    /// Train the gating network on frozen encodings.
    TrainGate,
    /// Jointly fine-tune adapters under gate weights.
    Finetune,
    /// Evaluate on the test split.
    Eval {
        #[arg(long, value_enum)]
        strategy: Vec<StrategyArg>,
    },
    /// Evaluate every strategy and print one row per strategy.
    Ablate,
    /// Gradient-bound and radius analysis.
    Theory,
    /// Inference cost table.
    Flops {
        /// Extra workload profiles (JSON array).
        #[arg(long)]
        profiles: Option<PathBuf>,
    },
    /// Render summary tables from evaluation records.
    Report,
    /// Every stage for every seed.
    RunAll,
    /// Inspect stored adapters.
    Adapters {
        #[command(subcommand)]
        action: AdapterAction,
    },
    /// Print the resolved configuration.
    Config,
}

#[derive(Subcommand)]
enum AdapterAction {
    /// List tool ids in a seed's adapter store.
    Ls {
        #[arg(long, value_enum, default_value = "tuned")]
        stage: StageArg,
    },
    /// Write selected adapters to a new store file.
    Export {
        #[arg(long, value_enum, default_value = "tuned")]
        stage: StageArg,
        #[arg(long = "tool", required = true)]
        tools: Vec<u32>,
        #[arg(long)]
        out: PathBuf,
    },
}

fn resolve_config(choice: &str, seed: Option<u64>) -> paratool::Result<RunConfig> {
    let path = Path::new(choice);
    let mut config = if path.exists() {
        RunConfig::load(path)?
    } else {
        match choice {
            "default" => RunConfig::from_toml(DEFAULT_CONFIG)?,
            "smoke" => RunConfig::from_toml(SMOKE_CONFIG)?,
            _ => return Err(Error::Config(format!("no config file or preset named `{choice}`"))),
        }
    };
    if let Some(s) = seed {
        config.seeds = vec![s];
    }
    config.validate()?;
    Ok(config)
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) | Error::UnknownStrategy(_) => 2,
        Error::MissingArtifact { .. } => 3,
        Error::Format { .. }
        | Error::Version { .. }
        | Error::Json(_)
        | Error::Io(_)
        | Error::OutOfVocabulary(_)
        | Error::Overlong { .. }
        | Error::UnknownTool(_)
        | Error::TargetNotCandidate(_)
        | Error::Empty(_) => 4,
        _ => 5,
    }
}

fn store_path(exp: &Experiment, seed: u64, stage: StageArg) -> paratool::Result<PathBuf> {
    let (path, verb) = match stage {
        StageArg::Pretrained => (exp.layout.pretrained(seed), "pretrain"),
        StageArg::Tuned => (exp.layout.tuned(seed), "finetune"),
    };
    if !path.exists() {
        return Err(Error::MissingArtifact { artifact: path, stage: verb });
    }
    Ok(path)
}

fn run(cli: Cli) -> paratool::Result<()> {
    let config = resolve_config(&cli.config, cli.seed)?;
    let mut exp = Experiment::new(config, &cli.root)?;
    exp.threads = cli.threads as usize;
    let seeds = exp.config.seeds.clone();
    match cli.command {
        Command::Synth => {
            for s in seeds {
                let d = exp.synth(s)?;
                println!("seed {s}: {} tools, {} train, {} validation, {} test", d.tools.len(), d.train.len(), d.validation.len(), d.test.len());
            }
        }
        Command::Pretrain => {
            for s in seeds {
                let store = exp.pretrain(s)?;
                println!("seed {s}: {} adapters -> {}", store.len(), exp.layout.pretrained(s).display());
            }
        }
        Command::TrainGate => {
            for s in seeds {
                exp.train_gate(s)?;
                println!("seed {s}: gate -> {}", exp.layout.gate(s).display());
            }
        }
        Command::Finetune => {
            for s in seeds {
                exp.finetune(s)?;
                println!("seed {s}: adapters -> {}", exp.layout.tuned(s).display());
            }
        }
        Command::Eval { strategy } => {
            let strategies: Vec<Strategy> =
                if strategy.is_empty() { Strategy::ALL.to_vec() } else { strategy.into_iter().map(Strategy::from).collect() };
            let mut rows = Vec::new();
            for s in seeds {
                rows.extend(exp.eval(s, &strategies)?.iter().map(|r| SummaryRow::of(s, r)));
            }
            print!("{}", summary_table(&rows));
        }
        Command::Ablate => {
            let mut rows = Vec::new();
            for s in seeds {
                rows.extend(exp.eval(s, &Strategy::ALL)?.iter().map(|r| SummaryRow::of(s, r)));
            }
            print!("{}", summary_table(&rows));
        }
        Command::Theory => {
            for s in seeds {
                let r = exp.theory(s)?;
                println!("seed {s}: G={:.6} rho={:.6} delta={:.6} manifest violations {}/{} held-out violation rate {:.3}",
                    r.estimates.g_max, r.estimates.rho, r.estimates.delta, r.manifest_violations, r.manifest_samples, r.heldout.violation_rate);
                print!("{}", paratool::pipeline::run::theory_table(&r));
            }
        }
        Command::Flops { profiles } => {
            if let Some(p) = profiles {
                exp.config.flops.profiles.extend(load_profiles(&p)?);
            }
            let report = if exp.layout.dataset(exp.config.seeds[0]).exists() {
                exp.flops()?
            } else if exp.config.flops.profiles.is_empty() {
                return Err(Error::MissingArtifact { artifact: exp.layout.dataset(exp.config.seeds[0]), stage: "synth" });
            } else {
                flops_table(&exp.config.flops.profiles)?
            };
            print!("{}", report.to_table());
        }
        Command::Report => print!("{}", exp.report()?),
        Command::RunAll => {
            exp.run_all()?;
            print!("{}", std::fs::read_to_string(exp.layout.reports().join("summary_mean.tsv"))?);
        }
        Command::Adapters { action } => match action {
            AdapterAction::Ls { stage } => {
                for s in seeds {
                    let (cfg, ids) = AdapterStore::list(&store_path(&exp, s, stage)?)?;
                    println!("seed {s}: rank {} scale {} tools {:?}", cfg.rank, cfg.scale, ids);
                }
            }
            AdapterAction::Export { stage, tools, out } => {
                let s = seeds[0];
                let store = AdapterStore::load_selected(&store_path(&exp, s, stage)?, &tools)?;
                store.save(&out)?;
                println!("{} adapters -> {}", store.len(), out.display());
            }
        },
        Command::Config => print!("{}", exp.config.to_toml()?),
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    let level = match cli.verbose {
        0 => log::LevelFilter::Warn,
        1 => log::LevelFilter::Info,
        _ => log::LevelFilter::Debug,
    };
    env_logger::Builder::new().filter_level(level).parse_env("PARATOOL_LOG").init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
