//! The `ckf` command line: `generate`, `fit`, `predict`, `evaluate`, `baseline`.
//!
//! Every command reads an optional TOML config (`--config`); flags override
//! config values. The effective config, seed included, is written next to the
//! outputs as `<command>.config.toml`.
//!
//! Exit codes: 0 success, 1 usage or config error, 2 data error, 3 numerical
//! failure, 4 `fit` stopped at `max_iters` without converging (outputs are
//! still written).

use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::datagen::{self, GenConfig, GenError, GroundTruth};
use crate::em::{self, EmConfig, EmError, InitPolicy, UpdateSet};
use crate::eval::{self, BaselineConfig, EvalError};
use crate::io::{self as files, IoError};
use crate::kalman::SmoothedPosterior;
use crate::model::{self, Dims, FormatError, ModelParams, ObservationSet, ValidationError};

pub const OBSERVATIONS_FILE: &str = "observations.csv";
pub const TRUTH_MODEL_FILE: &str = "truth_model.json";
pub const TRUTH_STATES_FILE: &str = "truth_states.csv";
pub const TRUTH_TENSOR_FILE: &str = "truth_tensor.bin";
pub const MODEL_FILE: &str = "model.json";
pub const STATES_FILE: &str = "states.csv";
pub const TRACE_FILE: &str = "trace.csv";
pub const PREDICTIONS_FILE: &str = "predictions.csv";
pub const METRICS_FILE: &str = "metrics.json";
pub const CURVE_FILE: &str = "rmse_by_time.csv";
pub const BASELINE_FACTORS_FILE: &str = "baseline_factors.json";
pub const BASELINE_OBJECTIVE_FILE: &str = "baseline_objective.csv";
pub const BASELINE_METRICS_FILE: &str = "baseline_metrics.json";
pub const BASELINE_CURVE_FILE: &str = "baseline_rmse_by_time.csv";

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Config(String),
    #[error("{0}")]
    Data(String),
    #[error("{0}")]
    Numerical(String),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Config(_) => 1,
            CliError::Data(_) => 2,
            CliError::Numerical(_) => 3,
        }
    }
}

impl From<IoError> for CliError {
    fn from(e: IoError) -> Self {
        CliError::Data(e.to_string())
    }
}

impl From<FormatError> for CliError {
    fn from(e: FormatError) -> Self {
        CliError::Data(e.to_string())
    }
}

impl From<ValidationError> for CliError {
    fn from(e: ValidationError) -> Self {
        CliError::Data(e.to_string())
    }
}

impl From<GenError> for CliError {
    fn from(e: GenError) -> Self {
        CliError::Config(e.to_string())
    }
}

impl From<EmError> for CliError {
    fn from(e: EmError) -> Self {
        match e {
            EmError::Config(_) => CliError::Config(e.to_string()),
            EmError::EmptyObservations | EmError::Invalid(_) => CliError::Data(e.to_string()),
            EmError::Kalman(_) | EmError::Divergence { .. } => CliError::Numerical(e.to_string()),
        }
    }
}

impl From<EvalError> for CliError {
    fn from(e: EvalError) -> Self {
        match e {
            EvalError::Config(_) => CliError::Config(e.to_string()),
            EvalError::Divergence { .. } => CliError::Numerical(e.to_string()),
            _ => CliError::Data(e.to_string()),
        }
    }
}

/// How a successful command ended.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Outcome {
    Success,
    NotConverged,
}

impl Outcome {
    pub fn exit_code(self) -> u8 {
        match self {
            Outcome::Success => 0,
            Outcome::NotConverged => 4,
        }
    }
}

#[derive(Debug, Parser)]
#[command(
    name = "ckf",
    version,
    about = "Collaborative Kalman filtering for dynamic matrix factorization"
)]
pub struct Cli {
    /// TOML run config.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Master seed; overrides the config file.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Worker threads; results do not depend on this.
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    /// Directory for inputs and outputs (default: current directory).
    #[arg(long, global = true)]
    pub out_dir: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate synthetic observations and ground truth.
    Generate(GenerateArgs),
    /// Learn parameters with EM and write the smoothed states.
    Fit(FitArgs),
    /// Predict ratings for `user,item,time` queries.
    Predict(PredictArgs),
    /// Score a fitted model against ground truth.
    Evaluate(EvaluateArgs),
    /// Fit the static regularized factorization baseline.
    Baseline(BaselineArgs),
}

#[derive(Debug, Args)]
pub struct GenerateArgs {
    /// Also write the dense noiseless preference tensor.
    #[arg(long)]
    pub tensor: bool,
}

#[derive(Debug, Args)]
pub struct FitArgs {
    /// Observations file (default: <out-dir>/observations.csv).
    #[arg(long)]
    pub observations: Option<PathBuf>,
    /// Latent dimension.
    #[arg(long)]
    pub k: Option<usize>,
    #[arg(long)]
    pub max_iters: Option<usize>,
    /// Relative log-likelihood improvement below which EM stops.
    #[arg(long)]
    pub tol: Option<f64>,
    /// `all` or a comma-separated subset of sigma_u2,sigma_q2,sigma_r2,A,V.
    #[arg(long)]
    pub update_set: Option<String>,
    /// Start from this model instead of the crude initialization.
    #[arg(long)]
    pub init_model: Option<PathBuf>,
    /// Learn full initial and process covariances.
    #[arg(long)]
    pub full_covariance: bool,
    /// Trace file (default: <out-dir>/trace.csv).
    #[arg(long)]
    pub trace: Option<PathBuf>,
    /// Directory with truth files; adds RMSE columns to the trace.
    #[arg(long)]
    pub truth_dir: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct PredictArgs {
    /// CSV with a `user,item,time` header.
    #[arg(long)]
    pub queries: PathBuf,
    /// Default: <out-dir>/model.json.
    #[arg(long)]
    pub model: Option<PathBuf>,
    /// Smoothed states from `fit` (default: <out-dir>/states.csv).
    #[arg(long)]
    pub states: Option<PathBuf>,
    /// Default: <out-dir>/predictions.csv.
    #[arg(long)]
    pub output: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    #[arg(long)]
    pub model: Option<PathBuf>,
    #[arg(long)]
    pub states: Option<PathBuf>,
    /// Default: <out-dir>.
    #[arg(long)]
    pub truth_dir: Option<PathBuf>,
    /// Default: <out-dir>/metrics.json.
    #[arg(long)]
    pub output: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct BaselineArgs {
    #[arg(long)]
    pub observations: Option<PathBuf>,
    #[arg(long)]
    pub k: Option<usize>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub learning_rate: Option<f64>,
    /// Directory with truth files (default: <out-dir>); metrics are written when present.
    #[arg(long)]
    pub truth_dir: Option<PathBuf>,
}

/// Generator section of the run config.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataSection {
    pub num_users: usize,
    pub num_items: usize,
    pub num_steps: usize,
    pub num_factors: usize,
    pub sigma_u2: f64,
    pub sigma_v2: f64,
    pub sigma_q2: f64,
    pub sigma_r2: f64,
    pub identity_weight: f64,
    pub sampling_factor: f64,
    pub write_tensor: bool,
}

impl Default for DataSection {
    fn default() -> Self {
        let g = GenConfig::benchmark(0);
        DataSection {
            num_users: g.dims.num_users,
            num_items: g.dims.num_items,
            num_steps: g.dims.num_steps,
            num_factors: g.dims.num_factors,
            sigma_u2: g.sigma_u2,
            sigma_v2: g.sigma_v2,
            sigma_q2: g.sigma_q2,
            sigma_r2: g.sigma_r2,
            identity_weight: g.identity_weight,
            sampling_factor: g.sampling_factor,
            write_tensor: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FitSection {
    pub num_factors: Option<usize>,
    pub max_iters: usize,
    pub tol: f64,
    pub update_set: String,
    pub full_covariance: bool,
}

impl Default for FitSection {
    fn default() -> Self {
        let d = EmConfig::default();
        FitSection {
            num_factors: None,
            max_iters: d.max_iters,
            tol: d.rel_tol,
            update_set: "all".into(),
            full_covariance: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BaselineSection {
    pub num_factors: Option<usize>,
    pub lambda1: f64,
    pub lambda2: f64,
    pub learning_rate: f64,
    pub epochs: usize,
    pub init_scale: f64,
}

impl Default for BaselineSection {
    fn default() -> Self {
        let d = BaselineConfig::default();
        BaselineSection {
            num_factors: None,
            lambda1: d.lambda1,
            lambda2: d.lambda2,
            learning_rate: d.learning_rate,
            epochs: d.epochs,
            init_scale: d.init_scale,
        }
    }
}

/// Merged run configuration: file values, then command-line overrides.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub out_dir: PathBuf,
    pub threads: Option<usize>,
    /// Absent means dims are inferred from the observations where needed.
    pub data: Option<DataSection>,
    pub fit: FitSection,
    pub baseline: BaselineSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            out_dir: PathBuf::from("."),
            threads: None,
            data: None,
            fit: FitSection::default(),
            baseline: BaselineSection::default(),
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("cannot read config {}: {e}", path.display())))?;
        toml::from_str(&text)
            .map_err(|e| CliError::Config(format!("invalid config {}: {e}", path.display())))
    }

    pub fn resolve(cli: &Cli) -> Result<Self, CliError> {
        let mut config = match &cli.config {
            Some(p) => Self::load(p)?,
            None => RunConfig::default(),
        };
        if let Some(seed) = cli.seed {
            config.seed = seed;
        }
        if let Some(t) = cli.threads {
            config.threads = Some(t);
        }
        if let Some(dir) = &cli.out_dir {
            config.out_dir = dir.clone();
        }
        if config.threads == Some(0) {
            return Err(CliError::Config("threads must be at least 1".into()));
        }
        Ok(config)
    }

    pub fn gen_config(&self) -> GenConfig {
        let d = self.data.clone().unwrap_or_default();
        GenConfig {
            dims: Dims {
                num_users: d.num_users,
                num_items: d.num_items,
                num_steps: d.num_steps,
                num_factors: d.num_factors,
            },
            sigma_u2: d.sigma_u2,
            sigma_v2: d.sigma_v2,
            sigma_q2: d.sigma_q2,
            sigma_r2: d.sigma_r2,
            identity_weight: d.identity_weight,
            sampling_factor: d.sampling_factor,
            seed: self.seed,
        }
    }

    fn out_path(&self, name: &str) -> PathBuf {
        self.out_dir.join(name)
    }

    fn record(&self, command: &str) -> Result<(), CliError> {
        let text = toml::to_string(self)
            .map_err(|e| CliError::Config(format!("cannot render config: {e}")))?;
        write_file(
            &self.out_path(&format!("{command}.config.toml")),
            text.as_bytes(),
        )
    }
}

fn data_err(path: &Path, e: impl std::fmt::Display) -> CliError {
    CliError::Data(format!("{}: {e}", path.display()))
}

fn open(path: &Path) -> Result<BufReader<File>, CliError> {
    File::open(path)
        .map(BufReader::new)
        .map_err(|e| data_err(path, e))
}

fn create(path: &Path) -> Result<BufWriter<File>, CliError> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent).map_err(|e| data_err(parent, e))?;
        }
    }
    File::create(path)
        .map(BufWriter::new)
        .map_err(|e| data_err(path, e))
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<(), CliError> {
    let mut w = create(path)?;
    w.write_all(bytes).map_err(|e| data_err(path, e))?;
    w.flush().map_err(|e| data_err(path, e))
}

fn finish(path: &Path, w: BufWriter<File>) -> Result<(), CliError> {
    w.into_inner()
        .map_err(|e| data_err(path, e.error()))?
        .sync_all()
        .map_err(|e| data_err(path, e))
}

pub fn read_stored_model(path: &Path) -> Result<model::StoredModel, CliError> {
    let bytes = fs::read(path).map_err(|e| data_err(path, e))?;
    model::deserialize_model(&bytes).map_err(|e| data_err(path, e))
}

pub fn read_model(path: &Path) -> Result<ModelParams, CliError> {
    Ok(read_stored_model(path)?.params)
}

pub fn read_trajectories(path: &Path) -> Result<Vec<Vec<DVector<f64>>>, CliError> {
    files::read_states(open(path)?).map_err(|e| data_err(path, e))
}

fn write_trajectories(path: &Path, trajectories: &[&[DVector<f64>]]) -> Result<(), CliError> {
    let mut w = create(path)?;
    files::write_states(&mut w, trajectories).map_err(|e| data_err(path, e))?;
    finish(path, w)
}

/// Ground truth from `truth_model.json` and `truth_states.csv` in `dir`.
pub fn read_truth(dir: &Path) -> Result<GroundTruth, CliError> {
    let params = read_model(&dir.join(TRUTH_MODEL_FILE))?;
    let states = read_trajectories(&dir.join(TRUTH_STATES_FILE))?;
    check_trajectories(&params.dims, &states, &dir.join(TRUTH_STATES_FILE))?;
    Ok(GroundTruth { params, states })
}

fn check_trajectories(
    dims: &Dims,
    states: &[Vec<DVector<f64>>],
    path: &Path,
) -> Result<(), CliError> {
    let ok = states.len() == dims.num_users
        && states.iter().all(|t| {
            t.len() == dims.num_steps + 1 && t.iter().all(|x| x.len() == dims.num_factors)
        });
    if ok {
        Ok(())
    } else {
        Err(data_err(
            path,
            format!(
                "states do not match model dims ({dims}); expected {} users x {} steps",
                dims.num_users,
                dims.num_steps + 1
            ),
        ))
    }
}

fn load_observations(
    path: &Path,
    dims: Option<Dims>,
    k: usize,
) -> Result<ObservationSet, CliError> {
    let records = files::read_observations(open(path)?).map_err(|e| data_err(path, e))?;
    let dims = match dims {
        Some(d) => Dims {
            num_factors: k,
            ..d
        },
        None => files::infer_dims(&records, k).ok_or_else(|| {
            data_err(
                path,
                "no observations and no [data] dims to size the problem",
            )
        })?,
    };
    Dims::new(
        dims.num_users,
        dims.num_items,
        dims.num_steps,
        dims.num_factors,
    )
    .map_err(|e| CliError::Config(e.to_string()))?;
    ObservationSet::new(dims, records).map_err(|e| data_err(path, e))
}

fn data_dims(config: &RunConfig) -> Option<Dims> {
    config.data.as_ref().map(|d| Dims {
        num_users: d.num_users,
        num_items: d.num_items,
        num_steps: d.num_steps,
        num_factors: d.num_factors,
    })
}

fn default_factors(config: &RunConfig) -> usize {
    config
        .data
        .as_ref()
        .map_or(DataSection::default().num_factors, |d| d.num_factors)
}

/// Run one command on a thread pool sized by `--threads`.
pub fn run(cli: &Cli) -> Result<Outcome, CliError> {
    let config = RunConfig::resolve(cli)?;
    let mut pool = rayon::ThreadPoolBuilder::new();
    if let Some(n) = config.threads {
        pool = pool.num_threads(n);
    }
    let pool = pool
        .build()
        .map_err(|e| CliError::Config(format!("cannot start thread pool: {e}")))?;
    pool.install(|| match &cli.command {
        Command::Generate(args) => cmd_generate(&config, args),
        Command::Fit(args) => cmd_fit(&config, args),
        Command::Predict(args) => cmd_predict(&config, args),
        Command::Evaluate(args) => cmd_evaluate(&config, args),
        Command::Baseline(args) => cmd_baseline(&config, args),
    })
}

pub fn cmd_generate(config: &RunConfig, args: &GenerateArgs) -> Result<Outcome, CliError> {
    let mut config = config.clone();
    let mut data = config.data.clone().unwrap_or_default();
    data.write_tensor |= args.tensor;
    config.data = Some(data.clone());
    let gen = config.gen_config();
    if !(gen.sigma_r2 > 0.0) {
        return Err(CliError::Config(
            "data.sigma_r2 must be positive so the truth model file is a valid model".into(),
        ));
    }
    let (truth, obs) = datagen::generate(&gen)?;

    let obs_path = config.out_path(OBSERVATIONS_FILE);
    let mut w = create(&obs_path)?;
    files::write_observations(&mut w, obs.observations()).map_err(|e| data_err(&obs_path, e))?;
    finish(&obs_path, w)?;
    write_file(
        &config.out_path(TRUTH_MODEL_FILE),
        &model::serialize_model(&truth.params, Some(config.seed)),
    )?;
    let refs: Vec<&[DVector<f64>]> = truth.states.iter().map(|s| s.as_slice()).collect();
    write_trajectories(&config.out_path(TRUTH_STATES_FILE), &refs)?;
    if data.write_tensor {
        let path = config.out_path(TRUTH_TENSOR_FILE);
        let mut w = create(&path)?;
        files::write_tensor(&mut w, gen.dims, &truth.preferences())
            .map_err(|e| data_err(&path, e))?;
        finish(&path, w)?;
    }
    config.record("generate")?;
    println!(
        "generated {}: {} observations (seed {}) -> {}",
        gen.dims,
        obs.len(),
        config.seed,
        config.out_dir.display()
    );
    Ok(Outcome::Success)
}

pub fn cmd_fit(config: &RunConfig, args: &FitArgs) -> Result<Outcome, CliError> {
    let mut config = config.clone();
    if let Some(k) = args.k {
        config.fit.num_factors = Some(k);
    }
    if let Some(m) = args.max_iters {
        config.fit.max_iters = m;
    }
    if let Some(t) = args.tol {
        config.fit.tol = t;
    }
    if let Some(u) = &args.update_set {
        config.fit.update_set = u.clone();
    }
    config.fit.full_covariance |= args.full_covariance;
    let k = config
        .fit
        .num_factors
        .unwrap_or_else(|| default_factors(&config));

    let obs_path = args
        .observations
        .clone()
        .unwrap_or_else(|| config.out_path(OBSERVATIONS_FILE));
    let obs = load_observations(&obs_path, data_dims(&config), k)?;
    let dims = obs.dims();

    let update_set: UpdateSet = config.fit.update_set.parse().map_err(CliError::Config)?;
    let init = match &args.init_model {
        Some(p) => {
            let params = read_model(p)?;
            if params.dims != dims {
                return Err(data_err(
                    p,
                    format!("model dims {} do not match {dims}", params.dims),
                ));
            }
            InitPolicy::From(params)
        }
        None => InitPolicy::Crude,
    };
    let em_config = EmConfig {
        max_iters: config.fit.max_iters,
        rel_tol: config.fit.tol,
        update_set,
        init,
        seed: config.seed,
        full_covariance: config.fit.full_covariance,
    };

    let truth = args.truth_dir.as_deref().map(read_truth).transpose()?;
    let fit = em::run_em_monitored(&obs, dims, &em_config, |params, posteriors| {
        let truth = truth.as_ref()?;
        let m = eval::score(params, posteriors, truth).ok()?;
        Some(em::Diagnostics {
            rmse_state: m.rmse_state,
            rmse_tensor: m.rmse_tensor,
        })
    })?;

    write_file(
        &config.out_path(MODEL_FILE),
        &model::serialize_model(&fit.params, Some(config.seed)),
    )?;
    let refs: Vec<&[DVector<f64>]> = fit.posteriors.iter().map(|p| p.means.as_slice()).collect();
    write_trajectories(&config.out_path(STATES_FILE), &refs)?;
    let trace_path = args
        .trace
        .clone()
        .unwrap_or_else(|| config.out_path(TRACE_FILE));
    let mut w = create(&trace_path)?;
    fit.trace
        .write_csv(&mut w)
        .map_err(|e| data_err(&trace_path, e))?;
    finish(&trace_path, w)?;
    config.record("fit")?;

    println!(
        "fit {dims}: {} iterations, loglik {:.6}, {}",
        fit.trace.rows.len(),
        fit.loglik,
        if fit.converged {
            "converged"
        } else {
            "max iterations reached"
        }
    );
    Ok(if fit.converged {
        Outcome::Success
    } else {
        Outcome::NotConverged
    })
}

pub fn cmd_predict(config: &RunConfig, args: &PredictArgs) -> Result<Outcome, CliError> {
    let model_path = args
        .model
        .clone()
        .unwrap_or_else(|| config.out_path(MODEL_FILE));
    let states_path = args
        .states
        .clone()
        .unwrap_or_else(|| config.out_path(STATES_FILE));
    let params = read_model(&model_path)?;
    let states = read_trajectories(&states_path)?;
    check_trajectories(&params.dims, &states, &states_path)?;
    let posteriors: Vec<SmoothedPosterior> = states
        .into_iter()
        .map(SmoothedPosterior::from_states)
        .collect();
    let queries =
        files::read_queries(open(&args.queries)?).map_err(|e| data_err(&args.queries, e))?;

    let mut rows = Vec::with_capacity(queries.len());
    let mut bad = Vec::new();
    for (n, q) in queries.iter().enumerate() {
        match eval::predict(&params, &posteriors, q.user, q.item, q.time) {
            Ok(p) => rows.push((*q, p)),
            // +2: one-based line numbers after the header
            Err(e) => bad.push(format!("line {}: {e}", n + 2)),
        }
    }
    if !bad.is_empty() {
        return Err(CliError::Data(format!(
            "{} query row(s) out of range:\n{}",
            bad.len(),
            bad.join("\n")
        )));
    }
    let out = args
        .output
        .clone()
        .unwrap_or_else(|| config.out_path(PREDICTIONS_FILE));
    let mut w = create(&out)?;
    files::write_predictions(&mut w, &rows).map_err(|e| data_err(&out, e))?;
    finish(&out, w)?;
    Ok(Outcome::Success)
}

pub fn cmd_evaluate(config: &RunConfig, args: &EvaluateArgs) -> Result<Outcome, CliError> {
    let model_path = args
        .model
        .clone()
        .unwrap_or_else(|| config.out_path(MODEL_FILE));
    let states_path = args
        .states
        .clone()
        .unwrap_or_else(|| config.out_path(STATES_FILE));
    let truth_dir = args
        .truth_dir
        .clone()
        .unwrap_or_else(|| config.out_dir.clone());
    let stored = read_stored_model(&model_path)?;
    // the seed that produced the estimate, unless none was recorded
    let seed = stored.seed.unwrap_or(config.seed);
    let params = stored.params;
    let states = read_trajectories(&states_path)?;
    check_trajectories(&params.dims, &states, &states_path)?;
    let truth = read_truth(&truth_dir)?;
    let posteriors: Vec<SmoothedPosterior> = states
        .into_iter()
        .map(SmoothedPosterior::from_states)
        .collect();
    let metrics = eval::score(&params, &posteriors, &truth)?;

    let out = args
        .output
        .clone()
        .unwrap_or_else(|| config.out_path(METRICS_FILE));
    write_file(&out, metrics.to_json(Some(seed)).as_bytes())?;
    let curve = config.out_path(CURVE_FILE);
    let mut w = create(&curve)?;
    metrics
        .write_curve_csv(&mut w)
        .map_err(|e| data_err(&curve, e))?;
    finish(&curve, w)?;
    config.record("evaluate")?;
    println!(
        "rmse_tensor {:.6} rmse_state {:.6} rmse_v {:.6}",
        metrics.rmse_tensor, metrics.rmse_state, metrics.rmse_v
    );
    Ok(Outcome::Success)
}

#[derive(Serialize)]
struct BaselineDocument {
    seed: u64,
    dims: Dims,
    #[serde(rename = "U")]
    user_factors: Vec<f64>,
    #[serde(rename = "V")]
    item_factors: Vec<f64>,
}

fn row_major(m: &DMatrix<f64>) -> Vec<f64> {
    m.transpose().iter().copied().collect()
}

pub fn cmd_baseline(config: &RunConfig, args: &BaselineArgs) -> Result<Outcome, CliError> {
    let mut config = config.clone();
    if let Some(k) = args.k {
        config.baseline.num_factors = Some(k);
    }
    if let Some(e) = args.epochs {
        config.baseline.epochs = e;
    }
    if let Some(lr) = args.learning_rate {
        config.baseline.learning_rate = lr;
    }
    let k = config
        .baseline
        .num_factors
        .unwrap_or_else(|| default_factors(&config));
    let obs_path = args
        .observations
        .clone()
        .unwrap_or_else(|| config.out_path(OBSERVATIONS_FILE));
    let obs = load_observations(&obs_path, data_dims(&config), k)?;
    let dims = obs.dims();
    let b = &config.baseline;
    let baseline_config = BaselineConfig {
        lambda1: b.lambda1,
        lambda2: b.lambda2,
        learning_rate: b.learning_rate,
        epochs: b.epochs,
        init_scale: b.init_scale,
        seed: config.seed,
    };
    let fitted = eval::fit_baseline(&obs, dims, &baseline_config)?;

    let doc = BaselineDocument {
        seed: config.seed,
        dims,
        user_factors: row_major(&fitted.user_factors),
        item_factors: row_major(&fitted.item_factors),
    };
    let mut text = serde_json::to_string_pretty(&doc).map_err(|e| CliError::Data(e.to_string()))?;
    text.push('\n');
    write_file(&config.out_path(BASELINE_FACTORS_FILE), text.as_bytes())?;

    let obj_path = config.out_path(BASELINE_OBJECTIVE_FILE);
    let mut w = create(&obj_path)?;
    let mut body = String::from("epoch,objective\n");
    for (epoch, v) in fitted.objective_history.iter().enumerate() {
        body.push_str(&format!("{epoch},{v}\n"));
    }
    w.write_all(body.as_bytes())
        .map_err(|e| data_err(&obj_path, e))?;
    finish(&obj_path, w)?;

    let truth_dir = args
        .truth_dir
        .clone()
        .unwrap_or_else(|| config.out_dir.clone());
    if truth_dir.join(TRUTH_MODEL_FILE).exists() {
        let truth = read_truth(&truth_dir)?;
        let metrics = fitted.score(&truth)?;
        write_file(
            &config.out_path(BASELINE_METRICS_FILE),
            metrics.to_json(Some(config.seed)).as_bytes(),
        )?;
        let curve = config.out_path(BASELINE_CURVE_FILE);
        let mut w = create(&curve)?;
        metrics
            .write_curve_csv(&mut w)
            .map_err(|e| data_err(&curve, e))?;
        finish(&curve, w)?;
        println!(
            "baseline rmse_tensor {:.6} rmse_state {:.6}",
            metrics.rmse_tensor, metrics.rmse_state
        );
    } else {
        println!(
            "baseline objective {:.6}",
            fitted.objective_history.last().copied().unwrap_or(f64::NAN)
        );
    }
    config.record("baseline")?;
    Ok(Outcome::Success)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn flags_override_config_file() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = dir.path().join("run.toml");
        fs::write(&cfg, "seed = 3\nout_dir = \"a\"\n[fit]\nmax_iters = 7\n").unwrap();
        let cli = Cli::try_parse_from([
            "ckf",
            "--config",
            cfg.to_str().unwrap(),
            "--seed",
            "9",
            "fit",
        ])
        .unwrap();
        let c = RunConfig::resolve(&cli).unwrap();
        assert_eq!(c.seed, 9);
        assert_eq!(c.out_dir, PathBuf::from("a"));
        assert_eq!(c.fit.max_iters, 7);
    }

    #[test]
    fn unknown_config_keys_are_config_errors() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = dir.path().join("run.toml");
        fs::write(&cfg, "sed = 3\n").unwrap();
        let err = RunConfig::load(&cfg).unwrap_err();
        assert_eq!(err.exit_code(), 1);
    }

    #[test]
    fn error_exit_codes() {
        assert_eq!(CliError::from(EmError::EmptyObservations).exit_code(), 2);
        assert_eq!(
            CliError::from(EmError::Divergence {
                iter: 1,
                trace: Default::default()
            })
            .exit_code(),
            3
        );
        assert_eq!(CliError::from(EmError::Config("x".into())).exit_code(), 1);
        assert_eq!(Outcome::NotConverged.exit_code(), 4);
    }
}
