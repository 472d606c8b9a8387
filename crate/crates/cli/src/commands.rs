use std::fs;
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex};

use anyhow::{bail, Context};
use apa_core::apa::{apa_train, distill};
use apa_core::environment::{gen_environment, Cluster, EnvConfig, UserModel};
use apa_core::evaluation::TableReport;
use apa_core::harness::{
    evaluate, load_environment, load_model, load_transcript, run_experiment, save_environment, save_model,
    save_transcript, ExperimentConfig, Manifest, SessionStore, CONFIG_FILE, DISTILLED_MODEL_FILE, ENVIRONMENT_FILE,
    REPORT_CSV_FILE,
};
use apa_core::urn::{time_average, urn_run};
use clap::{Args, Parser, Subcommand, ValueEnum};

/// Marks errors caused by how the tool was invoked; they exit with status 1.
#[derive(Debug)]
pub struct UsageError(pub String);

impl std::fmt::Display for UsageError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

#[derive(Debug, Parser)]
#[command(name = "apa", version, about = "Adaptive preference aggregation with neural urns")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct ConfigArg {
    /// Experiment config (JSON). Defaults apply when omitted.
    #[arg(long, short)]
    pub config: Option<PathBuf>,
}

impl ConfigArg {
    /// Loads and validates the config, with stage seeds derived from the master seed.
    pub fn load(&self) -> anyhow::Result<ExperimentConfig> {
        let cfg = match &self.config {
            Some(path) => ExperimentConfig::load(path)
                .map_err(|e| UsageError(format!("invalid config {}: {e}", path.display())))?,
            None => ExperimentConfig::default(),
        };
        Ok(cfg.seeded())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Profile {
    /// Three-cycle electorate with no Condorcet winner.
    Rps,
    /// One alternative beats every other for every voter.
    Unanimous,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate an environment and write it as JSON.
    GenEnv {
        #[command(flatten)]
        config: ConfigArg,
        /// Overrides the master seed.
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, short)]
        out: PathBuf,
    },
    /// Run the tabular urn on a fixed profile and write its trajectory CSV.
    RunUrn {
        #[command(flatten)]
        config: ConfigArg,
        #[arg(long, value_enum, default_value = "rps")]
        profile: Profile,
        #[arg(long, short)]
        out: PathBuf,
    },
    /// Train the neural urn on an environment.
    RunApa {
        #[command(flatten)]
        config: ConfigArg,
        #[arg(long)]
        env: PathBuf,
        #[arg(long)]
        model_out: PathBuf,
        #[arg(long)]
        transcript_out: PathBuf,
    },
    /// Distill a transcript into a softmax policy.
    Distill {
        #[command(flatten)]
        config: ConfigArg,
        #[arg(long)]
        env: PathBuf,
        #[arg(long)]
        transcript: PathBuf,
        #[arg(long, short)]
        out: PathBuf,
    },
    /// Win rates of a model against the configured opponents.
    Eval {
        #[command(flatten)]
        config: ConfigArg,
        #[arg(long)]
        env: PathBuf,
        #[arg(long)]
        model: PathBuf,
        /// Report CSV; the text table always goes to stdout.
        #[arg(long, short)]
        out: Option<PathBuf>,
    },
    /// Check a run directory's manifest and replay its evaluation.
    Report {
        #[arg(long)]
        run_dir: PathBuf,
    },
    /// Every stage end to end, into one output directory.
    Run {
        #[command(flatten)]
        config: ConfigArg,
        /// Overrides the config's output directory.
        #[arg(long, short)]
        out: Option<PathBuf>,
    },
    /// Serve live annotation sessions over HTTP.
    Serve {
        #[command(flatten)]
        config: ConfigArg,
        #[arg(long)]
        env: PathBuf,
        #[arg(long, default_value = "127.0.0.1:8080")]
        addr: String,
        /// Where session transcripts are written on delete and shutdown.
        #[arg(long)]
        transcripts: Option<PathBuf>,
        /// Mutation rate for new sessions unless a request overrides it.
        #[arg(long, default_value_t = 0.0)]
        mutation_rate: f64,
    },
}

fn read_report(path: &Path) -> anyhow::Result<TableReport> {
    let file = fs::File::open(path).with_context(|| format!("opening {}", path.display()))?;
    Ok(TableReport::read_csv(file)?)
}

fn write_report(report: &TableReport, out: Option<&Path>) -> anyhow::Result<()> {
    if let Some(path) = out {
        report.write_csv(fs::File::create(path).with_context(|| format!("creating {}", path.display()))?)?;
    }
    print!("{}", report.to_text());
    Ok(())
}

/// Electorate for `run-urn`.
pub fn profile_config(profile: Profile) -> EnvConfig {
    let rps = EnvConfig::rock_paper_scissors(100);
    match profile {
        Profile::Rps => rps,
        Profile::Unanimous => {
            let a0 = match &rps.alternatives {
                apa_core::environment::AlternativePlacement::Fixed { positions } => positions[0],
                apa_core::environment::AlternativePlacement::Uniform => unreachable!("fixed fixture"),
            };
            EnvConfig {
                users: UserModel::Mixture {
                    clusters: vec![Cluster {
                        center: a0,
                        weight: 1.0,
                        sigma: 0.02,
                    }],
                    balanced: true,
                },
                ..rps
            }
        }
    }
}

pub fn run(cli: Cli) -> anyhow::Result<()> {
    match cli.command {
        Command::GenEnv { config, seed, out } => {
            let mut cfg = config.load()?;
            if let Some(seed) = seed {
                cfg.master_seed = seed;
                cfg = cfg.seeded();
            }
            let env = gen_environment(&cfg.environment)?;
            save_environment(&env, &out)?;
            log::info!("wrote {} ({} alternatives, {} train users)", out.display(), env.n_alternatives(), env.train.len());
        }
        Command::RunUrn { config, profile, out } => {
            let cfg = config.load()?;
            let env = gen_environment(&profile_config(profile))?;
            let traj = urn_run(&cfg.urn, env.n_alternatives(), &env.train, &env, cfg.urn.steps)?;
            traj.write_csv(fs::File::create(&out).with_context(|| format!("creating {}", out.display()))?)?;
            let avg = time_average(&traj, cfg.urn.burn_in)?;
            println!("time average after burn-in {}: {:?}", cfg.urn.burn_in, avg.probs());
        }
        Command::RunApa {
            config,
            env,
            model_out,
            transcript_out,
        } => {
            let cfg = config.load()?;
            let env = load_environment(&env)?;
            let (net, transcript) = apa_train(&cfg.apa, &env)?;
            save_model(&net, &model_out)?;
            save_transcript(&transcript, &transcript_out)?;
            log::info!("{} steps", transcript.len());
        }
        Command::Distill {
            config,
            env,
            transcript,
            out,
        } => {
            let cfg = config.load()?;
            let env = load_environment(&env)?;
            let transcript = load_transcript(&transcript, &env, &cfg.apa)?;
            save_model(&distill(&transcript, &cfg.distill)?, &out)?;
        }
        Command::Eval { config, env, model, out } => {
            let cfg = config.load()?;
            let env = load_environment(&env)?;
            let model = load_model(&model)?;
            let report = evaluate(&env, &model, &cfg)?;
            write_report(&report, out.as_deref())?;
        }
        Command::Report { run_dir } => {
            let manifest = Manifest::load(&run_dir)?;
            let bad = manifest.mismatches(&run_dir)?;
            if !bad.is_empty() {
                bail!("manifest mismatch in {}: {}", run_dir.display(), bad.join(", "));
            }
            let cfg = ExperimentConfig::load(&run_dir.join(CONFIG_FILE))?;
            let env = load_environment(&run_dir.join(ENVIRONMENT_FILE))?;
            let model = load_model(&run_dir.join(DISTILLED_MODEL_FILE))?;
            let replay = evaluate(&env, &model, &cfg)?;
            let stored = read_report(&run_dir.join(REPORT_CSV_FILE))?;
            if replay != stored {
                bail!("replayed evaluation differs from the stored report");
            }
            write_report(&replay, None)?;
        }
        Command::Run { config, out } => {
            let mut cfg = config.load()?;
            if let Some(out) = out {
                cfg.output_dir = out;
            }
            let summary = run_experiment(&cfg)?;
            print!("{}", summary.report.to_text());
            log::info!("artifacts in {}", summary.dir.display());
        }
        Command::Serve {
            config,
            env,
            addr,
            transcripts,
            mutation_rate,
        } => {
            let cfg = config.load()?;
            let env = load_environment(&env)?;
            let defaults = apa_core::apa::ApaConfig {
                mutation_rate,
                ..SessionStore::human_defaults()
            };
            let store = SessionStore::new(env, defaults, cfg.master_seed, transcripts)
                .map_err(|e| UsageError(e.to_string()))?;
            let runtime = tokio::runtime::Runtime::new()?;
            runtime.block_on(crate::server::serve(Arc::new(Mutex::new(store)), &addr))?;
        }
    }
    Ok(())
}
