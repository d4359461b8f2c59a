//! Configuration and subcommands of the `perfed` binary.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, Context};
use perfed_core::access::{Phase, StudentStore};
use perfed_core::data::{Variable, DEFAULT_MAX_SEQ_LEN, N_KINDS};
use perfed_core::eval::{
    cross_validate, export_embeddings, CrossValidation, EvalReport, Experiment,
};
use perfed_core::federation::{write_metrics_csv, FederationConfig, Strategy};
use perfed_core::ingest::{read_cohort, write_events, write_split, write_students};
use perfed_core::neural::io::{load_model, save_model};
use perfed_core::pretrain::PretrainConfig;
use perfed_core::synthgen::{generate_cohort, CohortSpec};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub const CONFIG_VERSION: u32 = 1;

/// Failure classes with distinct exit codes.
#[derive(Debug)]
pub enum CliError {
    /// Bad or missing configuration; exit code 2.
    Config(anyhow::Error),
    /// Anything that fails while running; exit code 1.
    Runtime(anyhow::Error),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::Runtime(_) => 1,
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Config(e) => write!(f, "configuration error: {e:#}"),
            CliError::Runtime(e) => write!(f, "{e:#}"),
        }
    }
}

pub type CliResult<T> = Result<T, CliError>;

fn config_err(e: impl Into<anyhow::Error>) -> CliError {
    CliError::Config(e.into())
}

fn runtime_err(e: impl Into<anyhow::Error>) -> CliError {
    CliError::Runtime(e.into())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum DataSource {
    /// Cohort sampled from a generator spec.
    Generated { spec: PathBuf, seed: u64 },
    /// Events and students CSV files.
    Csv {
        events: PathBuf,
        students: PathBuf,
        n_videos: usize,
        #[serde(default = "default_max_len")]
        max_seq_len: usize,
    },
}

fn default_max_len() -> usize {
    DEFAULT_MAX_SEQ_LEN
}

fn default_folds() -> usize {
    5
}

fn default_seeds() -> Vec<u64> {
    vec![1, 2, 3, 4, 5]
}

fn default_strategies() -> Vec<Strategy> {
    Strategy::ALL.to_vec()
}

fn default_output() -> PathBuf {
    PathBuf::from("out")
}

/// Versioned experiment description. Relative paths resolve against the
/// directory of the config file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub version: u32,
    pub data: DataSource,
    pub variable: Variable,
    #[serde(default)]
    pub include_unspecified: bool,
    #[serde(default = "default_strategies")]
    pub strategies: Vec<Strategy>,
    #[serde(default)]
    pub federation: FederationConfig,
    #[serde(default)]
    pub pretrain: PretrainConfig,
    #[serde(default = "default_folds")]
    pub folds: usize,
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
    #[serde(default)]
    pub split_seed: u64,
    #[serde(default = "default_output")]
    pub output_dir: PathBuf,
}

impl ExperimentConfig {
    /// Parses and validates `path`, resolving relative paths against its
    /// directory.
    pub fn load(path: &Path) -> CliResult<Self> {
        let text = fs::read_to_string(path)
            .with_context(|| format!("cannot read config {}", path.display()))
            .map_err(config_err)?;
        let mut cfg: ExperimentConfig = serde_json::from_str(&text)
            .with_context(|| format!("cannot parse config {}", path.display()))
            .map_err(config_err)?;
        let base = path.parent().unwrap_or(Path::new("."));
        cfg.resolve_paths(base);
        cfg.validate()?;
        Ok(cfg)
    }

    fn resolve_paths(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        match &mut self.data {
            DataSource::Generated { spec, .. } => fix(spec),
            DataSource::Csv {
                events, students, ..
            } => {
                fix(events);
                fix(students);
            }
        }
        fix(&mut self.output_dir);
    }

    pub fn validate(&self) -> CliResult<()> {
        let mut issues = Vec::new();
        if self.version != CONFIG_VERSION {
            issues.push(format!(
                "version {} is not supported (expected {CONFIG_VERSION})",
                self.version
            ));
        }
        match &self.data {
            DataSource::Generated { spec, .. } => {
                if !spec.is_file() {
                    issues.push(format!(
                        "data.generated.spec: {} does not exist",
                        spec.display()
                    ));
                }
            }
            DataSource::Csv {
                events,
                students,
                n_videos,
                max_seq_len,
            } => {
                for (name, p) in [("events", events), ("students", students)] {
                    if !p.is_file() {
                        issues.push(format!("data.csv.{name}: {} does not exist", p.display()));
                    }
                }
                if *n_videos == 0 {
                    issues.push("data.csv.n_videos must be positive".into());
                }
                if *max_seq_len == 0 {
                    issues.push("data.csv.max_seq_len must be positive".into());
                }
            }
        }
        if self.strategies.is_empty() {
            issues.push("strategies must not be empty".into());
        }
        if self.seeds.is_empty() {
            issues.push("seeds must not be empty".into());
        }
        if self.folds == 0 {
            issues.push("folds must be at least 1".into());
        }
        if let Err(e) = self.federation.validate() {
            issues.push(e.to_string());
        }
        if issues.is_empty() {
            Ok(())
        } else {
            Err(config_err(anyhow!("{}", issues.join("; "))))
        }
    }
}

/// Per-run overrides from the command line.
#[derive(Clone, Debug, Default)]
pub struct RunOptions {
    pub seed: Option<u64>,
    pub jobs: Option<usize>,
    pub out: Option<PathBuf>,
}

/// Written files and the evaluation result of `cmd_run`.
pub struct RunArtifacts {
    pub output_dir: PathBuf,
    pub result: CrossValidation,
    /// Relative path -> SHA-256 hex digest.
    pub hashes: BTreeMap<String, String>,
}

#[derive(Serialize)]
struct Manifest<'a> {
    config: &'a ExperimentConfig,
    seeds: &'a [u64],
    artifacts: &'a BTreeMap<String, String>,
}

/// Builds the student store for a config. `instrumented` turns on the
/// access log.
pub fn load_store(cfg: &ExperimentConfig, instrumented: bool) -> CliResult<(StudentStore, usize)> {
    let (records, n_videos) = match &cfg.data {
        DataSource::Generated { spec, seed } => {
            let spec = CohortSpec::load(spec).map_err(config_err)?;
            let cohort = generate_cohort(&spec, *seed).map_err(runtime_err)?;
            (cohort.records, spec.n_videos)
        }
        DataSource::Csv {
            events,
            students,
            n_videos,
            max_seq_len,
        } => (
            read_cohort(events, students, *n_videos, *max_seq_len).map_err(runtime_err)?,
            *n_videos,
        ),
    };
    let store = if instrumented {
        StudentStore::instrumented(records)
    } else {
        StudentStore::new(records)
    };
    Ok((store.map_err(runtime_err)?, n_videos + N_KINDS))
}

pub fn experiment(cfg: &ExperimentConfig, input_width: usize) -> Experiment {
    Experiment {
        variable: cfg.variable,
        include_unspecified: cfg.include_unspecified,
        strategies: cfg.strategies.clone(),
        federation: cfg.federation.clone(),
        pretrain: cfg.pretrain.clone(),
        folds: cfg.folds,
        seeds: cfg.seeds.clone(),
        split_seed: cfg.split_seed,
        input_width,
    }
}

fn sanitize(name: &str) -> String {
    name.chars()
        .map(|c| {
            if c.is_ascii_alphanumeric() || "-_~".contains(c) {
                c
            } else {
                '-'
            }
        })
        .collect()
}

fn sha256_hex(path: &Path) -> CliResult<String> {
    let bytes = fs::read(path)
        .with_context(|| format!("cannot read {}", path.display()))
        .map_err(runtime_err)?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

/// Runs the configured cross-validation and writes `report.csv`,
/// per-run metrics, splits, final models and `manifest.json`.
pub fn cmd_run(config: &Path, opts: &RunOptions) -> CliResult<RunArtifacts> {
    let mut cfg = ExperimentConfig::load(config)?;
    if let Some(seed) = opts.seed {
        cfg.seeds = vec![seed];
    }
    if let Some(out) = &opts.out {
        cfg.output_dir = out.clone();
    }
    let (store, width) = load_store(&cfg, false)?;
    let exp = experiment(&cfg, width);
    let jobs = opts
        .jobs
        .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()));
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs.max(1))
        .build()
        .map_err(runtime_err)?;
    let result = pool
        .install(|| cross_validate(&store, &exp))
        .map_err(|e| match e {
            perfed_core::Error::InvalidSpec(_) => config_err(e),
            other => runtime_err(other),
        })?;

    let out = cfg.output_dir.clone();
    let mut written: Vec<PathBuf> = Vec::new();
    let mkdir = |p: &Path| {
        fs::create_dir_all(p)
            .with_context(|| format!("cannot create {}", p.display()))
            .map_err(runtime_err)
    };
    mkdir(&out)?;
    mkdir(&out.join("metrics"))?;
    mkdir(&out.join("models"))?;
    mkdir(&out.join("splits"))?;

    let report_path = out.join("report.csv");
    let file = fs::File::create(&report_path)
        .with_context(|| format!("cannot create {}", report_path.display()))
        .map_err(runtime_err)?;
    result.report.write_csv(file).map_err(runtime_err)?;
    written.push(report_path);

    for (f, split) in result.splits.iter().enumerate() {
        let p = out.join("splits").join(format!("fold{f}.csv"));
        write_split(&p, split).map_err(runtime_err)?;
        written.push(p);
    }

    let mut per_run: BTreeMap<(usize, u64), Vec<_>> = BTreeMap::new();
    for run in &result.runs {
        per_run
            .entry((run.fold, run.seed))
            .or_default()
            .extend(run.metrics.iter().cloned());
        for (name, model) in &run.final_models {
            let p = out.join("models").join(format!(
                "{}_fold{}_seed{}_{}.model",
                run.strategy,
                run.fold,
                run.seed,
                sanitize(name)
            ));
            save_model(&p, model).map_err(runtime_err)?;
            written.push(p);
        }
    }
    for ((fold, seed), metrics) in &per_run {
        let p = out
            .join("metrics")
            .join(format!("fold{fold}_seed{seed}.csv"));
        let file = fs::File::create(&p)
            .with_context(|| format!("cannot create {}", p.display()))
            .map_err(runtime_err)?;
        write_metrics_csv(file, metrics).map_err(runtime_err)?;
        written.push(p);
    }

    let mut hashes = BTreeMap::new();
    for p in &written {
        let rel = p
            .strip_prefix(&out)
            .unwrap_or(p)
            .to_string_lossy()
            .into_owned();
        hashes.insert(rel, sha256_hex(p)?);
    }
    let manifest = Manifest {
        config: &cfg,
        seeds: &cfg.seeds,
        artifacts: &hashes,
    };
    let manifest_path = out.join("manifest.json");
    let mut text = serde_json::to_string_pretty(&manifest).map_err(runtime_err)?;
    text.push('\n');
    fs::write(&manifest_path, text)
        .with_context(|| format!("cannot write {}", manifest_path.display()))
        .map_err(runtime_err)?;
    log::info!("wrote {} artifacts to {}", hashes.len() + 1, out.display());
    Ok(RunArtifacts {
        output_dir: out,
        result,
        hashes,
    })
}

/// Samples a cohort and writes `events.csv` and `students.csv` into `out`.
pub fn cmd_generate(spec_path: &Path, seed: u64, out: &Path) -> CliResult<()> {
    if !spec_path.is_file() {
        return Err(config_err(anyhow!(
            "cohort spec {} does not exist",
            spec_path.display()
        )));
    }
    let spec = CohortSpec::load(spec_path)
        .with_context(|| format!("invalid cohort spec {}", spec_path.display()))
        .map_err(config_err)?;
    let cohort = generate_cohort(&spec, seed).map_err(runtime_err)?;
    fs::create_dir_all(out)
        .with_context(|| format!("cannot create {}", out.display()))
        .map_err(runtime_err)?;
    write_events(&out.join("events.csv"), &cohort.events).map_err(runtime_err)?;
    write_students(&out.join("students.csv"), &cohort.records).map_err(runtime_err)?;
    Ok(())
}

/// Writes pooled hidden vectors of every student in the CSV cohort. The
/// video count is taken from the model's input width.
pub fn cmd_dump_embeddings(
    model_path: &Path,
    events: &Path,
    students: &Path,
    variable: Variable,
    out: &Path,
) -> CliResult<()> {
    let model = load_model(model_path)
        .with_context(|| format!("cannot load model {}", model_path.display()))
        .map_err(runtime_err)?;
    let n_videos = model
        .dims()
        .input
        .checked_sub(N_KINDS)
        .filter(|n| *n > 0)
        .ok_or_else(|| {
            runtime_err(anyhow!(
                "model input width {} is too small",
                model.dims().input
            ))
        })?;
    let records = read_cohort(events, students, n_videos, usize::MAX).map_err(runtime_err)?;
    let store = StudentStore::new(records).map_err(runtime_err)?;
    let all = store.all(0, Phase::Evaluation);
    let dump = export_embeddings(&model, &all, variable).map_err(runtime_err)?;
    let mut file = fs::File::create(out)
        .with_context(|| format!("cannot create {}", out.display()))
        .map_err(runtime_err)?;
    dump.write_csv(&mut file).map_err(runtime_err)?;
    file.flush().map_err(runtime_err)?;
    Ok(())
}

/// Fixed-width rendering of an existing report.
pub fn cmd_report(path: &Path) -> CliResult<String> {
    let file = fs::File::open(path)
        .with_context(|| format!("cannot open report {}", path.display()))
        .map_err(runtime_err)?;
    let report = EvalReport::read_csv(file).map_err(runtime_err)?;
    Ok(report.pretty())
}
