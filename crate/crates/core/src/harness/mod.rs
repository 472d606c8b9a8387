//! Experiment configuration, deterministic seeding, the end-to-end pipeline
//! and live annotation sessions.

mod session;

pub use session::{
    AlternativeView, AnswerRequest, AnswerView, CreateSession, CreatedSession, DeletedView, QueryView, SessionError,
    SessionMode, SessionStore, StateView,
};

use std::collections::BTreeMap;
use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::apa::{apa_train, distill, policy_of, ApaConfig, DistillConfig, Transcript};
use crate::environment::{gen_environment, EnvConfig, Environment};
use crate::error::{Error, Result};
use crate::evaluation::{
    adaptive_maximal_lottery_policy, online_win_rate_curve, table_report, write_curve_csv, CurvePoint, EvalConfig,
    TableReport, ADAPTIVE_BORDA, ADAPTIVE_MAXIMAL_LOTTERY, GLOBAL_BORDA,
};
use crate::neural::Mlp;
use crate::urn::UrnConfig;

pub const SCHEMA_VERSION: u32 = 1;
pub const MANIFEST_FORMAT: &str = "apa-manifest";

pub const ENVIRONMENT_FILE: &str = "environment.json";
pub const CONFIG_FILE: &str = "config.json";
pub const URN_MODEL_FILE: &str = "urn_model.txt";
pub const DISTILLED_MODEL_FILE: &str = "distilled_model.txt";
pub const TRANSCRIPT_FILE: &str = "transcript.csv";
pub const CURVE_FILE: &str = "curve.csv";
pub const REPORT_CSV_FILE: &str = "report.csv";
pub const REPORT_TEXT_FILE: &str = "report.txt";
pub const MANIFEST_FILE: &str = "MANIFEST.json";

/// Pipeline stages, each with its own derived seed.
pub const STAGES: [&str; 6] = ["environment", "urn", "apa", "distill", "eval", "curve"];

/// Per-stage seed: the first eight bytes of `sha256(master_le ‖ stage)`.
pub fn derive_seed(master: u64, stage: &str) -> u64 {
    let mut h = Sha256::new();
    h.update(master.to_le_bytes());
    h.update(stage.as_bytes());
    let digest = h.finalize();
    u64::from_le_bytes(digest[..8].try_into().expect("8 bytes"))
}

fn default_opponents() -> Vec<String> {
    [ADAPTIVE_MAXIMAL_LOTTERY, ADAPTIVE_BORDA, GLOBAL_BORDA]
        .iter()
        .map(|s| s.to_string())
        .collect()
}

fn default_output_dir() -> PathBuf {
    PathBuf::from("runs/default")
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub schema_version: u32,
    #[serde(default)]
    pub master_seed: u64,
    #[serde(default = "default_output_dir")]
    pub output_dir: PathBuf,
    #[serde(default)]
    pub environment: EnvConfig,
    #[serde(default)]
    pub urn: UrnConfig,
    #[serde(default)]
    pub apa: ApaConfig,
    #[serde(default)]
    pub distill: DistillConfig,
    #[serde(default)]
    pub eval: EvalConfig,
    #[serde(default = "default_opponents")]
    pub opponents: Vec<String>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            schema_version: SCHEMA_VERSION,
            master_seed: 0,
            output_dir: default_output_dir(),
            environment: EnvConfig::default(),
            urn: UrnConfig::default(),
            apa: ApaConfig::default(),
            distill: DistillConfig::default(),
            eval: EvalConfig::default(),
            opponents: default_opponents(),
        }
    }
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig = serde_json::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&fs::read_to_string(path)?)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn validate(&self) -> Result<()> {
        if self.schema_version != SCHEMA_VERSION {
            return Err(Error::Format(format!(
                "unsupported schema version {} (expected {SCHEMA_VERSION})",
                self.schema_version
            )));
        }
        self.environment.validate()?;
        self.urn.validate()?;
        self.apa.validate()?;
        self.distill.validate()?;
        self.eval.validate()?;
        if self.opponents.is_empty() {
            return Err(Error::invalid("need at least one opponent"));
        }
        Ok(())
    }

    /// Copy with every stage seed replaced by its derivation from `master_seed`.
    pub fn seeded(&self) -> ExperimentConfig {
        let mut cfg = self.clone();
        let m = self.master_seed;
        cfg.environment.seed = derive_seed(m, "environment");
        cfg.urn.seed = derive_seed(m, "urn");
        cfg.apa.seed = derive_seed(m, "apa");
        cfg.distill.seed = derive_seed(m, "distill");
        cfg.eval.seed = derive_seed(m, "eval");
        cfg
    }

    pub fn seeds(&self) -> BTreeMap<String, u64> {
        STAGES
            .iter()
            .map(|s| (s.to_string(), derive_seed(self.master_seed, s)))
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub format: String,
    pub version: u32,
    pub package_version: String,
    pub schema_version: u32,
    pub master_seed: u64,
    pub seeds: BTreeMap<String, u64>,
    /// File name to lowercase hex SHA-256.
    pub files: BTreeMap<String, String>,
}

pub fn sha256_file(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path)?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

impl Manifest {
    pub fn build(dir: &Path, cfg: &ExperimentConfig, files: &[&str]) -> Result<Manifest> {
        let files = files
            .iter()
            .map(|f| Ok((f.to_string(), sha256_file(&dir.join(f))?)))
            .collect::<Result<BTreeMap<_, _>>>()?;
        Ok(Manifest {
            format: MANIFEST_FORMAT.to_string(),
            version: 1,
            package_version: env!("CARGO_PKG_VERSION").to_string(),
            schema_version: cfg.schema_version,
            master_seed: cfg.master_seed,
            seeds: cfg.seeds(),
            files,
        })
    }

    pub fn load(dir: &Path) -> Result<Manifest> {
        let m: Manifest = serde_json::from_str(&fs::read_to_string(dir.join(MANIFEST_FILE))?)?;
        if m.format != MANIFEST_FORMAT {
            return Err(Error::Format(format!("not a manifest: {:?}", m.format)));
        }
        Ok(m)
    }

    /// Files whose current hash differs from the recorded one.
    pub fn mismatches(&self, dir: &Path) -> Result<Vec<String>> {
        let mut bad = Vec::new();
        for (name, hash) in &self.files {
            let path = dir.join(name);
            if !path.exists() || &sha256_file(&path)? != hash {
                bad.push(name.clone());
            }
        }
        Ok(bad)
    }
}

fn create<P: AsRef<Path>>(path: P) -> Result<BufWriter<File>> {
    Ok(BufWriter::new(File::create(path)?))
}

pub fn save_model(net: &Mlp, path: &Path) -> Result<()> {
    let mut w = create(path)?;
    net.save(&mut w)?;
    w.flush()?;
    Ok(())
}

pub fn load_model(path: &Path) -> Result<Mlp> {
    Mlp::load(BufReader::new(File::open(path)?))
}

pub fn save_environment(env: &Environment, path: &Path) -> Result<()> {
    let mut w = create(path)?;
    env.save(&mut w)?;
    w.flush()?;
    Ok(())
}

pub fn load_environment(path: &Path) -> Result<Environment> {
    Environment::load(BufReader::new(File::open(path)?))
}

pub fn save_transcript(tr: &Transcript, path: &Path) -> Result<()> {
    let mut w = create(path)?;
    tr.write_csv(&mut w)?;
    w.flush()?;
    Ok(())
}

pub fn load_transcript(path: &Path, env: &Environment, cfg: &ApaConfig) -> Result<Transcript> {
    Transcript::read_csv(BufReader::new(File::open(path)?), env.grid.clone(), cfg.embedding)
}

/// What a finished run produced.
#[derive(Clone, Debug)]
pub struct RunSummary {
    pub dir: PathBuf,
    pub report: TableReport,
    pub curve: Vec<CurvePoint>,
    pub manifest: Manifest,
}

/// Label used for an environment in reports.
pub fn environment_label(env: &Environment) -> String {
    format!("env-{:016x}", env.seed)
}

/// Evaluates a distilled model against the configured opponents.
pub fn evaluate(env: &Environment, distilled: &Mlp, cfg: &ExperimentConfig) -> Result<TableReport> {
    let policy = policy_of(distilled.clone(), cfg.apa.embedding);
    let names: Vec<&str> = cfg.opponents.iter().map(String::as_str).collect();
    table_report(&environment_label(env), env, &policy, &names, cfg.eval.rounds, cfg.eval.seed)
}

/// Online curve of a transcript against the adaptive maximal lottery.
pub fn curve(env: &Environment, transcript: &Transcript, cfg: &ExperimentConfig) -> Result<Vec<CurvePoint>> {
    use rand::SeedableRng;
    let skyline = adaptive_maximal_lottery_policy(env)?;
    let window = cfg.eval.curve_window.min(transcript.len().max(1));
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(derive_seed(cfg.master_seed, "curve"));
    online_win_rate_curve(transcript, &skyline, env, window, &mut rng)
}

/// Environment, APA, distillation, evaluation and the online curve, written to
/// `cfg.output_dir` with a manifest of hashes. Stage seeds are derived from
/// the master seed; reruns give byte-identical artifacts.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<RunSummary> {
    cfg.validate().map_err(|e| e.in_stage("config"))?;
    let cfg = cfg.seeded();
    let dir = cfg.output_dir.clone();
    fs::create_dir_all(&dir).map_err(|e| Error::from(e).in_stage("output"))?;
    fs::write(dir.join(CONFIG_FILE), cfg.to_json()?).map_err(|e| Error::from(e).in_stage("output"))?;

    let env = gen_environment(&cfg.environment).map_err(|e| e.in_stage("environment"))?;
    save_environment(&env, &dir.join(ENVIRONMENT_FILE)).map_err(|e| e.in_stage("environment"))?;
    log::info!("environment: {} train / {} validation users", env.train.len(), env.validation.len());

    let (urn_net, transcript) = apa_train(&cfg.apa, &env).map_err(|e| e.in_stage("apa"))?;
    save_model(&urn_net, &dir.join(URN_MODEL_FILE)).map_err(|e| e.in_stage("apa"))?;
    save_transcript(&transcript, &dir.join(TRANSCRIPT_FILE)).map_err(|e| e.in_stage("apa"))?;
    log::info!("apa: {} steps", transcript.len());

    let distilled = distill(&transcript, &cfg.distill).map_err(|e| e.in_stage("distill"))?;
    save_model(&distilled, &dir.join(DISTILLED_MODEL_FILE)).map_err(|e| e.in_stage("distill"))?;

    let report = evaluate(&env, &distilled, &cfg).map_err(|e| e.in_stage("eval"))?;
    report
        .write_csv(create(dir.join(REPORT_CSV_FILE))?)
        .map_err(|e| e.in_stage("eval"))?;
    fs::write(dir.join(REPORT_TEXT_FILE), report.to_text()).map_err(|e| Error::from(e).in_stage("eval"))?;

    let curve = if transcript.is_empty() {
        Vec::new()
    } else {
        curve(&env, &transcript, &cfg).map_err(|e| e.in_stage("curve"))?
    };
    write_curve_csv(&curve, create(dir.join(CURVE_FILE))?).map_err(|e| e.in_stage("curve"))?;

    let files = [
        CONFIG_FILE,
        ENVIRONMENT_FILE,
        URN_MODEL_FILE,
        TRANSCRIPT_FILE,
        DISTILLED_MODEL_FILE,
        REPORT_CSV_FILE,
        REPORT_TEXT_FILE,
        CURVE_FILE,
    ];
    let manifest = Manifest::build(&dir, &cfg, &files).map_err(|e| e.in_stage("manifest"))?;
    fs::write(dir.join(MANIFEST_FILE), serde_json::to_string_pretty(&manifest)?)
        .map_err(|e| Error::from(e).in_stage("manifest"))?;
    Ok(RunSummary {
        dir,
        report,
        curve,
        manifest,
    })
}
