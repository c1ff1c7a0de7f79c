use std::io::Write as _;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use icrl_cli::accept::{self, Sources};
use icrl_cli::config::ExperimentConfig;
use icrl_cli::pipeline::{self, Ctx};
use icrl_core::envcore::Suite;

#[derive(Parser)]
#[command(name = "icrl", version, about = "In-context RL transformer: data, training, evaluation and analysis")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// Experiment config (JSON).
    #[arg(long, env = "ICRL_CONFIG")]
    config: PathBuf,
    /// Root seed; overrides the config.
    #[arg(long, env = "ICRL_SEED")]
    seed: Option<u64>,
    /// Output directory; overrides the config.
    #[arg(long, env = "ICRL_OUT")]
    out: Option<PathBuf>,
    /// Overwrite artifacts produced under a different config.
    #[arg(long, env = "ICRL_FORCE")]
    force: bool,
    /// Worker threads (default: all cores).
    #[arg(long, env = "ICRL_JOBS")]
    jobs: Option<usize>,
}

#[derive(Clone, Copy, ValueEnum)]
enum SuiteArg {
    Gridworld,
    Tree,
}

#[derive(Subcommand)]
enum Command {
    /// Build and persist the task set.
    Generate(Common),
    /// Meta-train every (seed, dropout) run and select a model.
    Train(Common),
    /// Tabular Q and DQN return curves.
    Baseline(Common),
    /// Transformer return curves, query types and shortcut tests.
    Eval(Common),
    /// Kernel alignment, cross-context correlation and linear decoders.
    Probe(Common),
    /// Integrated gradients and attention interventions.
    Attrib(Common),
    /// Every stage in order.
    All(Common),
    /// Run the acceptance suite over one config per suite.
    Accept {
        /// Experiment configs whose reports are checked.
        #[arg(long = "config", env = "ICRL_CONFIG", value_delimiter = ',')]
        configs: Vec<PathBuf>,
        /// Where to write the JSON summary.
        #[arg(long, env = "ICRL_SUMMARY", default_value = "acceptance.json")]
        summary: PathBuf,
        #[arg(long, env = "ICRL_JOBS")]
        jobs: Option<usize>,
    },
    /// Print the default config of a suite.
    Preset { suite: SuiteArg },
}

fn set_jobs(jobs: Option<usize>) -> anyhow::Result<()> {
    if let Some(n) = jobs {
        anyhow::ensure!(n > 0, "--jobs must be positive");
        rayon::ThreadPoolBuilder::new().num_threads(n).build_global()?;
    }
    Ok(())
}

fn context(c: &Common) -> anyhow::Result<Ctx> {
    set_jobs(c.jobs)?;
    let mut cfg = ExperimentConfig::load(&c.config)?;
    if let Some(s) = c.seed {
        cfg.seed = s;
    }
    Ok(Ctx::new(cfg, c.out.clone(), c.force))
}

fn run(cli: Cli) -> anyhow::Result<ExitCode> {
    match cli.command {
        Command::Generate(c) => pipeline::cmd_generate(&context(&c)?)?,
        Command::Train(c) => pipeline::cmd_train(&context(&c)?)?,
        Command::Baseline(c) => pipeline::cmd_baseline(&context(&c)?)?,
        Command::Eval(c) => pipeline::cmd_eval(&context(&c)?)?,
        Command::Probe(c) => pipeline::cmd_probe(&context(&c)?)?,
        Command::Attrib(c) => pipeline::cmd_attrib(&context(&c)?)?,
        Command::All(c) => {
            let ctx = context(&c)?;
            if !ctx.out.join("taskset").exists() {
                pipeline::cmd_generate(&ctx)?;
            }
            pipeline::cmd_train(&ctx)?;
            pipeline::cmd_baseline(&ctx)?;
            pipeline::cmd_eval(&ctx)?;
            pipeline::cmd_probe(&ctx)?;
            pipeline::cmd_attrib(&ctx)?;
        }
        Command::Accept { configs, summary, jobs } => {
            set_jobs(jobs)?;
            let mut src = Sources::default();
            for p in &configs {
                let cfg = ExperimentConfig::load(p)?;
                let dir = Some(cfg.out.join("reports"));
                match cfg.suite {
                    Suite::Gridworld => src.gridworld = dir,
                    Suite::Tree => src.tree = dir,
                }
            }
            let s = accept::run_all(&src);
            for o in &s.criteria {
                println!("{}", o.line());
            }
            accept::write_summary(&summary, &s)?;
            return Ok(if s.all_pass() { ExitCode::SUCCESS } else { ExitCode::from(1) });
        }
        Command::Preset { suite } => {
            let s = match suite {
                SuiteArg::Gridworld => Suite::Gridworld,
                SuiteArg::Tree => Suite::Tree,
            };
            let _ = writeln!(std::io::stdout(), "{}", serde_json::to_string_pretty(&ExperimentConfig::preset(s))?);
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
