//! Command-line front end: generate, train, predict, evaluate, experiment.
//!
//! Settings come from an optional flat `key = value` file, overridden by
//! flags. The seed falls back to `DJGP_SEED` and then to 0.

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use crate::datagen::{generate, ExpansionKind, GeneratorKind, GeneratorSpec};
use crate::dataset::Dataset;
use crate::elbo::train::{initialize, train, InitConfig};
use crate::elbo::{Optimizer, TrainConfig, TrainReport, VariationalState};
use crate::error::{Error, Result};
use crate::metrics::{roughness, score, RoughnessReport, ScoreReport, DEFAULT_KNN};
use crate::predict::{djgp_predict_all, PredictConfig};
use crate::{io, par};

pub const MODEL_FORMAT: &str = "djgp-model";
pub const RESULTS_FORMAT: &str = "djgp-results";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Parser, Debug)]
#[command(name = "djgp", version, about = "Deep jump Gaussian process surrogates")]
struct Cli {
    /// Worker threads for region-parallel work (default: available parallelism).
    #[arg(long, global = true)]
    workers: Option<usize>,
    /// Log progress (-v info, -vv debug).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write train.csv, test.csv and meta.json for a synthetic benchmark.
    Generate(Common),
    /// Fit the variational model and write a model file.
    Train(Common),
    /// Predict at test inputs with a trained model.
    Predict(Common),
    /// Score a predictions file against targets.
    Evaluate(Common),
    /// Generate or load data, train, predict and score in one run.
    Experiment(Common),
}

/// Every setting is accepted by every subcommand; each uses what it needs.
#[derive(Args, Debug, Default, Clone)]
struct Common {
    /// Flat `key = value` settings file; flags override it.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory (generate, experiment) or file (train, predict, evaluate).
    #[arg(long)]
    out: Option<String>,
    #[arg(long)]
    seed: Option<String>,
    /// Synthetic generator: l2 or lh.
    #[arg(long)]
    kind: Option<String>,
    /// Latent dimension of the synthetic generator.
    #[arg(long)]
    latent_dim: Option<String>,
    #[arg(long)]
    n_train: Option<String>,
    #[arg(long)]
    n_test: Option<String>,
    /// Expansion to observed inputs: rp, rf, pe or none.
    #[arg(long)]
    expansion: Option<String>,
    /// Observed input dimension after expansion.
    #[arg(long)]
    dim: Option<String>,
    #[arg(long)]
    train: Option<String>,
    #[arg(long)]
    test: Option<String>,
    #[arg(long)]
    model: Option<String>,
    #[arg(long)]
    predictions: Option<String>,
    /// Model latent dimension Q.
    #[arg(long)]
    q: Option<String>,
    /// Neighborhood size n.
    #[arg(long)]
    neighbors: Option<String>,
    #[arg(long)]
    l1: Option<String>,
    #[arg(long)]
    l2: Option<String>,
    /// Monte Carlo samples Mc.
    #[arg(long)]
    samples: Option<String>,
    #[arg(long)]
    steps: Option<String>,
    #[arg(long)]
    rate: Option<String>,
    /// adam or gradient_ascent.
    #[arg(long)]
    optimizer: Option<String>,
    #[arg(long)]
    quad_nodes: Option<String>,
    /// k of the k-NN graph for roughness statistics.
    #[arg(long)]
    knn: Option<String>,
}

const KEYS: &[&str] = &[
    "out", "seed", "kind", "latent_dim", "n_train", "n_test", "expansion", "dim", "train", "test", "model", "predictions",
    "q", "neighbors", "l1", "l2", "samples", "steps", "rate", "optimizer", "quad_nodes", "knn",
];

/// Parses `key = value` lines; `#` starts a comment.
pub fn parse_config(text: &str, name: &str) -> Result<BTreeMap<String, String>> {
    let mut out = BTreeMap::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::input(format!("{name}, line {}: expected key = value", i + 1)))?;
        let k = k.trim().replace('-', "_");
        if !KEYS.contains(&k.as_str()) {
            return Err(Error::input(format!("{name}, line {}: unknown key '{k}'", i + 1)));
        }
        out.insert(k, v.trim().to_string());
    }
    Ok(out)
}

/// Resolved settings: flags over file.
struct Settings(BTreeMap<String, String>);

impl Settings {
    fn new(c: &Common) -> Result<Self> {
        let mut map = match &c.config {
            Some(p) => {
                let text = fs::read_to_string(p)
                    .map_err(|e| Error::Io(std::io::Error::new(e.kind(), format!("{}: {e}", p.display()))))?;
                parse_config(&text, &p.display().to_string())?
            }
            None => BTreeMap::new(),
        };
        let flags = [
            ("out", &c.out),
            ("seed", &c.seed),
            ("kind", &c.kind),
            ("latent_dim", &c.latent_dim),
            ("n_train", &c.n_train),
            ("n_test", &c.n_test),
            ("expansion", &c.expansion),
            ("dim", &c.dim),
            ("train", &c.train),
            ("test", &c.test),
            ("model", &c.model),
            ("predictions", &c.predictions),
            ("q", &c.q),
            ("neighbors", &c.neighbors),
            ("l1", &c.l1),
            ("l2", &c.l2),
            ("samples", &c.samples),
            ("steps", &c.steps),
            ("rate", &c.rate),
            ("optimizer", &c.optimizer),
            ("quad_nodes", &c.quad_nodes),
            ("knn", &c.knn),
        ];
        for (k, v) in flags {
            if let Some(v) = v {
                map.insert(k.to_string(), v.clone());
            }
        }
        Ok(Settings(map))
    }

    fn str(&self, key: &str) -> Option<&str> {
        self.0.get(key).map(String::as_str)
    }

    fn parse<T: std::str::FromStr>(&self, key: &str) -> Result<Option<T>> {
        match self.str(key) {
            None => Ok(None),
            Some(v) => v.parse().map(Some).map_err(|_| Error::input(format!("invalid value '{v}' for {key}"))),
        }
    }

    fn path(&self, key: &str) -> Result<PathBuf> {
        self.str(key).map(PathBuf::from).ok_or_else(|| Error::input(format!("missing required setting '{key}'")))
    }

    fn seed(&self) -> Result<u64> {
        self.seed_or(0)
    }

    fn seed_or(&self, fallback: u64) -> Result<u64> {
        if let Some(s) = self.parse("seed")? {
            return Ok(s);
        }
        match std::env::var("DJGP_SEED") {
            Ok(v) => v.parse().map_err(|_| Error::input(format!("DJGP_SEED='{v}' is not an unsigned integer"))),
            Err(_) => Ok(fallback),
        }
    }

    fn generator(&self) -> Result<GeneratorSpec> {
        let kind: GeneratorKind = self.parse("kind")?.unwrap_or(GeneratorKind::L2);
        let latent_dim = self.parse("latent_dim")?.unwrap_or(2);
        let (n_train, n_test) = (1000, 100);
        let expansion = match self.str("expansion") {
            None | Some("none") => None,
            Some(e) => {
                let kind: ExpansionKind = e.parse()?;
                let dim = self.parse("dim")?.ok_or_else(|| Error::input("an expansion needs 'dim'"))?;
                Some((kind, dim))
            }
        };
        Ok(GeneratorSpec {
            kind,
            latent_dim,
            n_train: self.parse("n_train")?.unwrap_or(n_train),
            n_test: self.parse("n_test")?.unwrap_or(n_test),
            expansion,
        })
    }

    fn model(&self, dim: usize) -> Result<ModelConfig> {
        let d = InitConfig::defaults_for(dim);
        let t = TrainConfig::default();
        let m = ModelConfig {
            latent_dim: self.parse("q")?.unwrap_or(d.latent_dim),
            neighbors: self.parse("neighbors")?.unwrap_or(d.neighbors),
            l1: self.parse("l1")?.unwrap_or(d.l1),
            l2: self.parse("l2")?.unwrap_or(d.l2),
            samples: self.parse("samples")?.unwrap_or(PredictConfig::default().samples),
            quadrature_nodes: self.parse("quad_nodes")?.unwrap_or(t.quadrature_nodes),
            steps: self.parse("steps")?.unwrap_or(t.steps),
            rate: self.parse("rate")?.unwrap_or(t.rate),
            optimizer: self.parse("optimizer")?.unwrap_or(t.optimizer),
        };
        m.validate()?;
        Ok(m)
    }
}

/// Model hyperparameters of one run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub latent_dim: usize,
    pub neighbors: usize,
    pub l1: usize,
    pub l2: usize,
    pub samples: usize,
    pub quadrature_nodes: usize,
    pub steps: usize,
    pub rate: f64,
    pub optimizer: Optimizer,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.latent_dim < 1 || self.neighbors < 2 || self.l1 < 1 || self.l2 < 1 || self.samples < 1 {
            return Err(Error::input("require Q >= 1, n >= 2, L1 >= 1, L2 >= 1 and Mc >= 1"));
        }
        if self.quadrature_nodes < 1 || !(self.rate >= 0.0) || !self.rate.is_finite() {
            return Err(Error::input("require at least one quadrature node and a finite nonnegative rate"));
        }
        Ok(())
    }

    pub fn init(&self) -> InitConfig {
        InitConfig { latent_dim: self.latent_dim, neighbors: self.neighbors, l1: self.l1, l2: self.l2 }
    }

    pub fn train(&self) -> TrainConfig {
        TrainConfig {
            steps: self.steps,
            rate: self.rate,
            optimizer: self.optimizer,
            quadrature_nodes: self.quadrature_nodes,
            ..TrainConfig::default()
        }
    }

    pub fn predict(&self) -> PredictConfig {
        PredictConfig { samples: self.samples, ..PredictConfig::default() }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DatasetSource {
    Generated(GeneratorSpec),
    Files { train: PathBuf, test: PathBuf },
}

/// Everything that determines an experiment's results.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub dataset: DatasetSource,
    pub model: ModelConfig,
    pub seed: u64,
}

/// Serialized model: the trained state plus the settings that produced it.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ModelFile {
    pub format: String,
    pub version: u32,
    pub model: ModelConfig,
    pub seed: u64,
    pub report: TrainReport,
    pub state: VariationalState,
}

impl ModelFile {
    pub fn load(path: &Path) -> Result<ModelFile> {
        let text = fs::read_to_string(path)
            .map_err(|e| Error::Io(std::io::Error::new(e.kind(), format!("{}: {e}", path.display()))))?;
        let m: ModelFile = serde_json::from_str(&text)
            .map_err(|e| Error::input(format!("{}: not a model file ({e})", path.display())))?;
        if m.format != MODEL_FORMAT || m.version != FORMAT_VERSION {
            return Err(Error::input(format!(
                "{}: unsupported model format {} v{} (expected {MODEL_FORMAT} v{FORMAT_VERSION})",
                path.display(),
                m.format,
                m.version
            )));
        }
        m.state.validate()?;
        Ok(m)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvaluationResult {
    pub format: String,
    pub version: u32,
    pub scores: ScoreReport,
    pub roughness: Option<RoughnessReport>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentResult {
    pub format: String,
    pub version: u32,
    pub config: ExperimentConfig,
    /// `(step, best ELBO so far)`.
    pub trace: Vec<(usize, f64)>,
    pub initial_elbo: f64,
    pub final_elbo: f64,
    pub steps_run: usize,
    pub scores: ScoreReport,
    pub roughness: RoughnessReport,
}

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
pub struct Timing {
    pub data_seconds: f64,
    pub train_seconds: f64,
    pub predict_seconds: f64,
    pub total_seconds: f64,
    pub workers: usize,
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value).map_err(|e| Error::numerical(format!("serialization failed: {e}")))?;
    fs::write(path, text + "\n")
        .map_err(|e| Error::Io(std::io::Error::new(e.kind(), format!("{}: {e}", path.display()))))
}

fn create_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(|e| Error::Io(std::io::Error::new(e.kind(), format!("{}: {e}", path.display()))))
}

fn targets(d: &Dataset) -> Vec<f64> {
    d.targets.iter().copied().collect()
}

/// Writes a generated benchmark into `dir`.
pub fn cmd_generate(spec: &GeneratorSpec, seed: u64, dir: &Path) -> Result<(Dataset, Dataset)> {
    let g = generate(spec, seed)?;
    create_dir(dir)?;
    io::write_dataset(&dir.join("train.csv"), &g.train)?;
    io::write_dataset(&dir.join("test.csv"), &g.test)?;
    write_json(&dir.join("meta.json"), &g.meta)?;
    Ok((g.train, g.test))
}

/// Builds regions at the test inputs, trains, and returns the model file contents.
pub fn cmd_train(train_data: &Dataset, test_data: &Dataset, model: &ModelConfig, seed: u64) -> Result<ModelFile> {
    let init = initialize(train_data, &test_data.inputs, &model.init(), &model.train(), seed)?;
    let (state, report) = train(&init)?;
    Ok(ModelFile { format: MODEL_FORMAT.into(), version: FORMAT_VERSION, model: model.clone(), seed, report, state })
}

pub fn cmd_predict(model: &ModelFile, test_inputs: &Dataset, samples: usize, seed: u64) -> Result<Vec<(f64, f64)>> {
    let cfg = PredictConfig { samples, ..PredictConfig::default() };
    let preds = djgp_predict_all(&model.state, &test_inputs.inputs, &cfg, seed)?;
    Ok(preds.into_iter().map(|p| (p.mean, p.variance)).collect())
}

pub fn cmd_evaluate(preds: &[(f64, f64)], truth: &Dataset, train: Option<&Dataset>, knn: usize) -> Result<EvaluationResult> {
    if preds.len() != truth.len() {
        return Err(Error::input(format!("{} predictions for {} targets", preds.len(), truth.len())));
    }
    Ok(EvaluationResult {
        format: RESULTS_FORMAT.into(),
        version: FORMAT_VERSION,
        scores: score(preds, &targets(truth))?,
        roughness: train.map(|t| roughness(t, knn)).transpose()?,
    })
}

/// Runs the full pipeline and writes its artifacts into `dir`.
pub fn cmd_experiment(config: &ExperimentConfig, dir: &Path, knn: usize) -> Result<(ExperimentResult, Timing)> {
    let t0 = Instant::now();
    create_dir(dir)?;
    let (train_data, test_data) = match &config.dataset {
        DatasetSource::Generated(spec) => cmd_generate(spec, config.seed, dir)?,
        DatasetSource::Files { train, test } => (io::read_dataset(train)?, io::read_dataset(test)?),
    };
    let t1 = Instant::now();
    let model = cmd_train(&train_data, &test_data, &config.model, config.seed)?;
    write_json(&dir.join("model.json"), &model)?;
    let t2 = Instant::now();
    let preds = cmd_predict(&model, &test_data, config.model.samples, config.seed)?;
    io::write_predictions(&dir.join("predictions.csv"), &preds)?;
    let t3 = Instant::now();
    let result = ExperimentResult {
        format: RESULTS_FORMAT.into(),
        version: FORMAT_VERSION,
        config: config.clone(),
        trace: model.report.trace.clone(),
        initial_elbo: model.report.initial_elbo,
        final_elbo: model.report.final_elbo,
        steps_run: model.report.steps_run,
        scores: score(&preds, &targets(&test_data))?,
        roughness: roughness(&train_data, knn)?,
    };
    write_json(&dir.join("results.json"), &result)?;
    let timing = Timing {
        data_seconds: (t1 - t0).as_secs_f64(),
        train_seconds: (t2 - t1).as_secs_f64(),
        predict_seconds: (t3 - t2).as_secs_f64(),
        total_seconds: t0.elapsed().as_secs_f64(),
        workers: workers_in_use(),
    };
    write_json(&dir.join("timing.json"), &timing)?;
    Ok((result, timing))
}

fn workers_in_use() -> usize {
    #[cfg(feature = "parallel")]
    {
        rayon::current_num_threads()
    }
    #[cfg(not(feature = "parallel"))]
    {
        1
    }
}

fn dispatch(command: Command) -> Result<()> {
    match command {
        Command::Generate(c) => {
            let s = Settings::new(&c)?;
            let (train, test) = cmd_generate(&s.generator()?, s.seed()?, &s.path("out")?)?;
            println!("wrote {} training and {} test rows", train.len(), test.len());
        }
        Command::Train(c) => {
            let s = Settings::new(&c)?;
            let train_data = io::read_dataset(&s.path("train")?)?;
            let test_data = io::read_dataset(&s.path("test")?)?;
            let model = s.model(train_data.dim())?;
            let out = s.path("out")?;
            let m = cmd_train(&train_data, &test_data, &model, s.seed()?)?;
            write_json(&out, &m)?;
            println!("ELBO {:.6} -> {:.6} in {} steps", m.report.initial_elbo, m.report.final_elbo, m.report.steps_run);
        }
        Command::Predict(c) => {
            let s = Settings::new(&c)?;
            let m = ModelFile::load(&s.path("model")?)?;
            let test_data = io::read_dataset(&s.path("test")?)?;
            let samples = s.parse("samples")?.unwrap_or(m.model.samples);
            // without an explicit seed, reuse the one the model was trained with
            let preds = cmd_predict(&m, &test_data, samples, s.seed_or(m.seed)?)?;
            io::write_predictions(&s.path("out")?, &preds)?;
            println!("wrote {} predictions", preds.len());
        }
        Command::Evaluate(c) => {
            let s = Settings::new(&c)?;
            let preds = io::read_predictions(&s.path("predictions")?)?;
            let truth = io::read_dataset(&s.path("test")?)?;
            let train_data = s.str("train").map(|p| io::read_dataset(Path::new(p))).transpose()?;
            let knn = s.parse("knn")?.unwrap_or(DEFAULT_KNN);
            let r = cmd_evaluate(&preds, &truth, train_data.as_ref(), knn)?;
            write_json(&s.path("out")?, &r)?;
            println!("RMSE {:.6} CRPS {:.6}", r.scores.rmse, r.scores.mean_crps);
        }
        Command::Experiment(c) => {
            let s = Settings::new(&c)?;
            let dataset = match (s.str("train"), s.str("test")) {
                (Some(tr), Some(te)) => DatasetSource::Files { train: tr.into(), test: te.into() },
                (None, None) => DatasetSource::Generated(s.generator()?),
                _ => return Err(Error::input("give both 'train' and 'test', or neither to generate data")),
            };
            let dim = match &dataset {
                DatasetSource::Generated(g) => g.expansion.map_or(g.latent_dim, |e| e.1),
                DatasetSource::Files { train, .. } => io::read_dataset(train)?.dim(),
            };
            let config = ExperimentConfig { dataset, model: s.model(dim)?, seed: s.seed()? };
            let knn = s.parse("knn")?.unwrap_or(DEFAULT_KNN);
            let (r, t) = cmd_experiment(&config, &s.path("out")?, knn)?;
            println!("RMSE {:.6} CRPS {:.6} ({:.1} s)", r.scores.rmse, r.scores.mean_crps, t.total_seconds);
        }
    }
    Ok(())
}

/// Runs the tool and returns the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    let _ = env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).try_init();
    if let Some(w) = cli.workers {
        if w == 0 {
            eprintln!("input error: --workers must be at least 1");
            return 2;
        }
        par::set_workers(w);
    }
    match dispatch(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("{e}");
            e.exit_code()
        }
    }
}
