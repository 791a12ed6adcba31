//! Command-line front end: configuration, orchestration and exports.
//!
//! Every subcommand resolves a [`RunConfig`] (defaults, then an optional JSON
//! config file, then flags), validates all inputs before touching the output
//! directory, runs one pipeline and writes CSV/JSON results together with a
//! `metadata.json` that records the resolved config, its hash, the model hash
//! and the tool version. Output contains no timestamps, so identical runs give
//! byte-identical directories.
//!
//! Exit codes: 0 success, 1 output I/O failure, 2 configuration error,
//! 3 numerical divergence, 4 failed contract.

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use crate::adjoint::{path_reward, reward_estimate, AdjointOptions, DEFAULT_LAMBDA_CLIP};
use crate::error::{invalid, Error, Result};
use crate::guarantees::{all_asserted_pass, run_suite, Check, SuiteConfig};
use crate::hjb::{policy_rollout, Advection, slice_stats, solve_hjb, HjbConfig, SliceStats, ValueGrid, DEFAULT_TOL_G, FIGURE_TIMES};
use crate::io::{create_file, sha256_hex, write_json};
use crate::model::{ClassLabel, MixtureModel};
use crate::schedule::{GuidanceSchedule, NoGuidance};
use crate::sde::{simulate_batch, write_trajectories_csv, BatchSpec, Method, TimeGrid, DEFAULT_CUTOFF};
use crate::stats::Estimate;
use crate::train::{train, write_training_log, Optimizer, TrainOptions, DEFAULT_CLIP_NORM};

pub const EXIT_OK: i32 = 0;
pub const EXIT_IO: i32 = 1;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_DIVERGENCE: i32 = 3;
pub const EXIT_CONTRACT: i32 = 4;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct HjbSection {
    pub half_width: f64,
    pub h: f64,
    pub dt_max: Option<f64>,
    /// Exported slices, backward clock.
    pub slice_times: Vec<f64>,
    /// Stored slices used by the policy lookup, evenly spaced.
    pub stored_slices: usize,
    pub tol_g: f64,
    /// Paths of the policy rollout; zero skips it.
    pub rollout_paths: usize,
    pub rollout_nodes: usize,
    /// Density fraction that defines the high-density region of a slice.
    pub density_fraction: f64,
    pub advection: Advection,
}

impl Default for HjbSection {
    fn default() -> Self {
        Self {
            half_width: 4.0,
            h: 0.05,
            dt_max: None,
            slice_times: FIGURE_TIMES.to_vec(),
            stored_slices: 100,
            tol_g: DEFAULT_TOL_G,
            rollout_paths: 10_000,
            rollout_nodes: 257,
            density_fraction: 0.01,
            advection: Advection::Upwind,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSection {
    pub iterations: usize,
    pub learning_rate: f64,
    pub optimizer: Optimizer,
    pub clip_norm: f64,
    /// Classes averaged per iteration; all classes when absent.
    pub classes: Option<Vec<ClassLabel>>,
    /// Initial table value; `1/alpha` when absent.
    pub init_w: Option<f64>,
    pub lambda_clip: f64,
    pub drop_guidance_hessian: bool,
    pub quantile_clip: Option<f64>,
}

impl Default for TrainSection {
    fn default() -> Self {
        Self {
            iterations: 25,
            learning_rate: 0.1,
            optimizer: Optimizer::Adam,
            clip_norm: DEFAULT_CLIP_NORM,
            classes: None,
            init_w: None,
            lambda_clip: DEFAULT_LAMBDA_CLIP,
            drop_guidance_hessian: false,
            quantile_clip: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct VerifySection {
    pub deltas: Vec<f64>,
    pub ito_paths: usize,
    pub ito_base_nodes: usize,
    pub ito_levels: usize,
    pub c_min: f64,
    pub support_weights: Vec<f64>,
}

impl Default for VerifySection {
    fn default() -> Self {
        let s = SuiteConfig::default();
        Self {
            deltas: s.deltas,
            ito_paths: s.ito_paths,
            ito_base_nodes: s.ito_base_nodes,
            ito_levels: s.ito_levels,
            c_min: s.c_min,
            support_weights: s.support_weights,
        }
    }
}

/// Fully resolved run configuration. Unknown keys in a config file are
/// rejected.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    /// Model file; the built-in four-Gaussian reference mixture when absent.
    pub model: Option<PathBuf>,
    pub alpha: f64,
    pub seed: u64,
    /// Time-grid node count; per-command default when absent.
    pub steps: Option<usize>,
    /// Paths (per class for training); per-command default when absent.
    pub paths: Option<usize>,
    pub out: PathBuf,
    pub workers: Option<usize>,
    pub method: Method,
    pub antithetic: bool,
    pub class: ClassLabel,
    pub cutoff: f64,
    /// Constant guidance weight for `verify` and `simulate`.
    pub guidance: f64,
    pub hjb: HjbSection,
    pub train: TrainSection,
    pub verify: VerifySection,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            model: None,
            alpha: 5.0,
            seed: 0,
            steps: None,
            paths: None,
            out: PathBuf::from("out"),
            workers: None,
            method: Method::Heun,
            antithetic: false,
            class: 0,
            cutoff: DEFAULT_CUTOFF,
            guidance: 0.5,
            hjb: HjbSection::default(),
            train: TrainSection::default(),
            verify: VerifySection::default(),
        }
    }
}

impl RunConfig {
    pub fn from_json_str(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    fn nodes(&self, default: usize) -> usize {
        self.steps.unwrap_or(default)
    }

    fn paths(&self, default: usize) -> usize {
        self.paths.unwrap_or(default)
    }

    /// Hash of the result-determining fields; `out` and `workers` are excluded.
    pub fn hash(&self) -> Result<String> {
        let mut c = self.clone();
        c.out = PathBuf::new();
        c.workers = None;
        Ok(sha256_hex(serde_json::to_string(&c)?.as_bytes()))
    }
}

#[derive(Debug, Parser)]
#[command(name = "adaptive-guidance", version, about = "Adaptive guidance schedules on analytic mixture targets")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
    #[command(flatten)]
    pub common: CommonArgs,
}

#[derive(Debug, Default, Args)]
pub struct CommonArgs {
    /// JSON config file; flags override its values
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Model JSON file (default: built-in reference mixture)
    #[arg(long, global = true)]
    pub model: Option<PathBuf>,
    #[arg(long, global = true)]
    pub alpha: Option<f64>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Time-grid node count
    #[arg(long, global = true)]
    pub steps: Option<usize>,
    #[arg(long, global = true)]
    pub paths: Option<usize>,
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    #[arg(long, global = true)]
    pub workers: Option<usize>,
    #[arg(long, global = true, value_enum)]
    pub method: Option<Method>,
    #[arg(long, global = true)]
    pub antithetic: bool,
    #[arg(long, global = true)]
    pub class: Option<ClassLabel>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Run the guarantee checks and write report.json
    Verify {
        /// Constant guidance weight of the checked batch
        #[arg(long)]
        guidance: Option<f64>,
    },
    /// Solve the HJB equation, export slices and roll out the optimal policy
    Hjb {
        #[arg(long)]
        h: Option<f64>,
        #[arg(long)]
        half_width: Option<f64>,
        /// Exported slice times (backward clock), comma separated
        #[arg(long, value_delimiter = ',')]
        slices: Option<Vec<f64>>,
    },
    /// Train a per-node guidance table with the adjoint gradient
    Train {
        #[arg(long)]
        iterations: Option<usize>,
        #[arg(long)]
        learning_rate: Option<f64>,
        #[arg(long, value_enum)]
        optimizer: Option<Optimizer>,
    },
    /// Simulate guided paths and dump them as CSV
    Simulate {
        #[arg(long)]
        guidance: Option<f64>,
    },
    /// HJB slices at the six reference panel times, no rollout
    ExportFigure1 {
        #[arg(long)]
        h: Option<f64>,
    },
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Command::Verify { .. } => "verify",
            Command::Hjb { .. } => "hjb",
            Command::Train { .. } => "train",
            Command::Simulate { .. } => "simulate",
            Command::ExportFigure1 { .. } => "export-figure1",
        }
    }
}

/// Defaults, then the config file, then flags.
pub fn resolve_config(cli: &Cli) -> Result<RunConfig> {
    let mut cfg = match &cli.common.config {
        Some(path) => RunConfig::from_json_str(&fs::read_to_string(path)?)?,
        None => RunConfig::default(),
    };
    let c = &cli.common;
    if c.model.is_some() {
        cfg.model = c.model.clone();
    }
    if let Some(v) = c.alpha {
        cfg.alpha = v;
    }
    if let Some(v) = c.seed {
        cfg.seed = v;
    }
    if c.steps.is_some() {
        cfg.steps = c.steps;
    }
    if c.paths.is_some() {
        cfg.paths = c.paths;
    }
    if let Some(v) = &c.out {
        cfg.out = v.clone();
    }
    if c.workers.is_some() {
        cfg.workers = c.workers;
    }
    if let Some(v) = c.method {
        cfg.method = v;
    }
    if c.antithetic {
        cfg.antithetic = true;
    }
    if let Some(v) = c.class {
        cfg.class = v;
    }
    match &cli.command {
        Command::Verify { guidance } | Command::Simulate { guidance } => {
            if let Some(v) = guidance {
                cfg.guidance = *v;
            }
        }
        Command::Hjb { h, half_width, slices } => {
            if let Some(v) = h {
                cfg.hjb.h = *v;
            }
            if let Some(v) = half_width {
                cfg.hjb.half_width = *v;
            }
            if let Some(v) = slices {
                cfg.hjb.slice_times = v.clone();
            }
        }
        Command::Train { iterations, learning_rate, optimizer } => {
            if let Some(v) = iterations {
                cfg.train.iterations = *v;
            }
            if let Some(v) = learning_rate {
                cfg.train.learning_rate = *v;
            }
            if let Some(v) = optimizer {
                cfg.train.optimizer = *v;
            }
        }
        Command::ExportFigure1 { h } => {
            if let Some(v) = h {
                cfg.hjb.h = *v;
            }
            cfg.hjb.slice_times = FIGURE_TIMES.to_vec();
            cfg.hjb.rollout_paths = 0;
        }
    }
    if !(cfg.alpha > 0.0) {
        return invalid("alpha must be positive");
    }
    if cfg.workers == Some(0) {
        return invalid("workers must be positive");
    }
    Ok(cfg)
}

/// Model plus the hash of its source bytes.
pub fn load_model(cfg: &RunConfig) -> Result<(MixtureModel, String)> {
    match &cfg.model {
        Some(path) => {
            let bytes = fs::read(path)?;
            let text = String::from_utf8(bytes.clone()).map_err(|e| Error::InvalidInput(format!("model file is not UTF-8: {e}")))?;
            Ok((MixtureModel::from_json_str(&text)?, sha256_hex(&bytes)))
        }
        None => {
            let m = MixtureModel::reference_mixture();
            let text = serde_json::to_string(&m.to_model_file())?;
            Ok((m, sha256_hex(text.as_bytes())))
        }
    }
}

#[derive(Serialize)]
struct Metadata<'a> {
    tool: &'static str,
    version: &'static str,
    command: &'a str,
    config_hash: String,
    model_sha256: &'a str,
    config: &'a RunConfig,
}

fn prepare_out(cfg: &RunConfig, command: &str, model_hash: &str) -> Result<()> {
    fs::create_dir_all(&cfg.out)?;
    write_json(
        &cfg.out.join("metadata.json"),
        &Metadata {
            tool: env!("CARGO_PKG_NAME"),
            version: env!("CARGO_PKG_VERSION"),
            command,
            config_hash: cfg.hash()?,
            model_sha256: model_hash,
            config: cfg,
        },
    )
}

#[derive(Serialize)]
struct VerifyReport {
    all_pass: bool,
    checks: Vec<Check>,
}

pub fn suite_config(cfg: &RunConfig) -> SuiteConfig {
    SuiteConfig {
        class: cfg.class,
        w: cfg.guidance,
        n_paths: cfg.paths(10_000),
        nodes: cfg.nodes(257),
        cutoff: cfg.cutoff,
        seed: cfg.seed,
        method: cfg.method,
        antithetic: cfg.antithetic,
        deltas: cfg.verify.deltas.clone(),
        ito_paths: cfg.verify.ito_paths,
        ito_base_nodes: cfg.verify.ito_base_nodes,
        ito_levels: cfg.verify.ito_levels,
        c_min: cfg.verify.c_min,
        support_weights: cfg.verify.support_weights.clone(),
    }
}

pub fn cmd_verify(cfg: &RunConfig) -> Result<i32> {
    let (model, hash) = load_model(cfg)?;
    let suite = suite_config(cfg);
    let checks = run_suite(&model, &suite)?;
    let all_pass = all_asserted_pass(&checks);
    prepare_out(cfg, "verify", &hash)?;
    write_json(&cfg.out.join("report.json"), &VerifyReport { all_pass, checks })?;
    Ok(if all_pass { EXIT_OK } else { EXIT_CONTRACT })
}

#[derive(Serialize)]
struct SliceEntry {
    t_backward: f64,
    t_forward: f64,
    file: String,
    w_star: SliceStats,
}

#[derive(Serialize)]
struct HjbMetadata {
    bounds: [f64; 2],
    h: f64,
    points_per_axis: usize,
    alpha: f64,
    class: ClassLabel,
    horizon: f64,
    time_steps: usize,
    dt_min: f64,
    dt_max: f64,
    max_courant: f64,
    tol_g: f64,
    advection: Advection,
    model_sha256: String,
    clock_note: &'static str,
    slices: Vec<SliceEntry>,
}

#[derive(Serialize)]
struct Rollout {
    paths: usize,
    nodes: usize,
    optimal: Estimate,
    constant_inverse_alpha: Estimate,
    unguided: Estimate,
    optimal_minus_constant: Estimate,
    optimal_minus_unguided: Estimate,
}

/// Reward of `w*`, of `w = 1/alpha` and of `w = 0` on common noise.
pub fn rollout_comparison(model: &MixtureModel, grid: &ValueGrid, nodes: usize, spec: &BatchSpec) -> Result<[Estimate; 5]> {
    let time = TimeGrid::uniform(model.horizon(), nodes, DEFAULT_CUTOFF)?;
    let (optimal, star) = policy_rollout(model, grid, &time, spec)?;
    let constant = simulate_batch(model, &GuidanceSchedule::constant(1.0 / grid.alpha)?, grid.class, &time, spec)?;
    let zero = simulate_batch(model, &NoGuidance, grid.class, &time, spec)?;
    let paired = |other: &[crate::sde::Trajectory]| {
        let d: Vec<f64> = star
            .iter()
            .zip(other)
            .map(|(a, b)| path_reward(a, grid.alpha) - path_reward(b, grid.alpha))
            .collect();
        Estimate::from_samples_paired(&d, spec.antithetic)
    };
    Ok([
        optimal,
        reward_estimate(&constant, grid.alpha, spec.antithetic),
        reward_estimate(&zero, grid.alpha, spec.antithetic),
        paired(&constant),
        paired(&zero),
    ])
}

pub fn slice_file_name(t_back: f64, tau: f64) -> String {
    format!("slice_t{t_back:.4}_tau{tau:.4}.csv")
}

pub fn cmd_hjb(cfg: &RunConfig) -> Result<i32> {
    let (model, hash) = load_model(cfg)?;
    let mut hcfg = HjbConfig::new(cfg.class, cfg.alpha, cfg.hjb.half_width, cfg.hjb.h)
        .with_uniform_slices(model.horizon(), cfg.hjb.stored_slices.max(1));
    hcfg.slice_times.extend(cfg.hjb.slice_times.iter().copied());
    hcfg.dt_max = cfg.hjb.dt_max;
    hcfg.tol_g = cfg.hjb.tol_g;
    hcfg.advection = cfg.hjb.advection;
    if let Some(t) = cfg.hjb.slice_times.iter().find(|t| !(0.0..=model.horizon()).contains(*t)) {
        return invalid(format!("slice time {t} outside [0, T]"));
    }
    let grid = solve_hjb(&model, &hcfg)?;
    prepare_out(cfg, "hjb", &hash)?;
    let mut slices = Vec::new();
    for &t in &cfg.hjb.slice_times {
        let s = grid.slice_at(t).expect("requested slices are stored");
        let file = slice_file_name(s.t_back, s.tau);
        grid.write_slice_csv(s, create_file(&cfg.out.join(&file))?)?;
        slices.push(SliceEntry {
            t_backward: s.t_back,
            t_forward: s.tau,
            file,
            w_star: slice_stats(&model, &grid, s, cfg.hjb.density_fraction)?,
        });
    }
    write_json(
        &cfg.out.join("hjb_metadata.json"),
        &HjbMetadata {
            bounds: [-grid.space.half_width, grid.space.half_width],
            h: grid.space.h,
            points_per_axis: grid.space.n,
            alpha: grid.alpha,
            class: grid.class,
            horizon: grid.horizon,
            time_steps: grid.steps,
            dt_min: grid.min_dt,
            dt_max: grid.max_dt,
            max_courant: grid.max_courant,
            tol_g: grid.tol_g,
            advection: cfg.hjb.advection,
            model_sha256: hash.clone(),
            clock_note: "t_backward runs with the sampler (0 = noise); t_forward = T - t_backward runs with the noising process",
            slices,
        },
    )?;
    if cfg.hjb.rollout_paths > 0 {
        let spec = BatchSpec::new(cfg.hjb.rollout_paths, cfg.seed)
            .antithetic(cfg.antithetic)
            .method(cfg.method);
        let [optimal, constant, zero, d_const, d_zero] = rollout_comparison(&model, &grid, cfg.hjb.rollout_nodes, &spec)?;
        write_json(
            &cfg.out.join("rollout.json"),
            &Rollout {
                paths: spec.n_paths,
                nodes: cfg.hjb.rollout_nodes,
                optimal,
                constant_inverse_alpha: constant,
                unguided: zero,
                optimal_minus_constant: d_const,
                optimal_minus_unguided: d_zero,
            },
        )?;
    }
    Ok(EXIT_OK)
}

pub fn train_options(cfg: &RunConfig) -> TrainOptions {
    TrainOptions {
        iterations: cfg.train.iterations,
        paths_per_class: cfg.paths(256),
        learning_rate: cfg.train.learning_rate,
        optimizer: cfg.train.optimizer,
        clip_norm: cfg.train.clip_norm,
        seed: cfg.seed,
        method: cfg.method,
        antithetic: cfg.antithetic,
        adjoint: AdjointOptions {
            lambda_clip: cfg.train.lambda_clip,
            drop_guidance_hessian: cfg.train.drop_guidance_hessian,
        },
        quantile_clip: cfg.train.quantile_clip,
    }
}

pub fn cmd_train(cfg: &RunConfig) -> Result<i32> {
    let (model, hash) = load_model(cfg)?;
    let grid = TimeGrid::uniform(model.horizon(), cfg.nodes(64), cfg.cutoff)?;
    let classes = cfg.train.classes.clone().unwrap_or_else(|| model.classes());
    let init = GuidanceSchedule::table(grid.nodes(), cfg.train.init_w.unwrap_or(1.0 / cfg.alpha))?;
    let outcome = train(&model, &init, &classes, &grid, cfg.alpha, &train_options(cfg))?;
    prepare_out(cfg, "train", &hash)?;
    write_training_log(create_file(&cfg.out.join("training_log.csv"))?, &outcome.history)?;
    fs::write(cfg.out.join("schedule.json"), outcome.schedule.to_json()? + "\n")?;
    outcome.schedule.write_csv(create_file(&cfg.out.join("schedule.csv"))?, &classes)?;
    write_json(&cfg.out.join("history.json"), &outcome.history)?;
    match outcome.failure {
        Some(e) => {
            log::error!("training stopped early: {e}");
            Ok(EXIT_DIVERGENCE)
        }
        None => Ok(EXIT_OK),
    }
}

pub fn cmd_simulate(cfg: &RunConfig) -> Result<i32> {
    let (model, hash) = load_model(cfg)?;
    let grid = TimeGrid::uniform(model.horizon(), cfg.nodes(64), cfg.cutoff)?;
    let spec = BatchSpec::new(cfg.paths(16), cfg.seed)
        .antithetic(cfg.antithetic)
        .method(cfg.method);
    let batch = if cfg.guidance == 0.0 {
        simulate_batch(&model, &NoGuidance, cfg.class, &grid, &spec)?
    } else {
        simulate_batch(&model, &GuidanceSchedule::constant(cfg.guidance)?, cfg.class, &grid, &spec)?
    };
    prepare_out(cfg, "simulate", &hash)?;
    write_trajectories_csv(create_file(&cfg.out.join("trajectories.csv"))?, &batch)?;
    Ok(EXIT_OK)
}

pub fn cmd_export_figure1(cfg: &RunConfig) -> Result<i32> {
    cmd_hjb(cfg)
}

pub fn exit_code(err: &Error) -> i32 {
    match err {
        Error::InvalidInput(_) | Error::Json(_) => EXIT_CONFIG,
        Error::Divergence { .. } => EXIT_DIVERGENCE,
        Error::Io(_) => EXIT_IO,
    }
}

fn dispatch(command: &Command, cfg: &RunConfig) -> Result<i32> {
    match command {
        Command::Verify { .. } => cmd_verify(cfg),
        Command::Hjb { .. } => cmd_hjb(cfg),
        Command::Train { .. } => cmd_train(cfg),
        Command::Simulate { .. } => cmd_simulate(cfg),
        Command::ExportFigure1 { .. } => cmd_export_figure1(cfg),
    }
}

/// Parses, runs and maps the outcome to an exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_CONFIG } else { EXIT_OK };
        }
    };
    let cfg = match resolve_config(&cli) {
        Ok(cfg) => cfg,
        Err(e) => {
            eprintln!("error: {e}");
            return match e {
                Error::Io(_) => EXIT_CONFIG,
                other => exit_code(&other),
            };
        }
    };
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cfg.workers.unwrap_or(0))
        .build()
        .expect("thread pool");
    let result = pool.install(|| dispatch(&cli.command, &cfg));
    match result {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            // an unreadable model is a configuration problem, not an output failure
            if matches!(e, Error::Io(_)) && !cfg.out.exists() {
                EXIT_CONFIG
            } else {
                exit_code(&e)
            }
        }
    }
}

pub fn out_dir_listing(dir: &Path) -> Result<Vec<String>> {
    let mut names: Vec<String> = fs::read_dir(dir)?
        .map(|e| e.map(|e| e.file_name().to_string_lossy().into_owned()))
        .collect::<std::io::Result<_>>()?;
    names.sort();
    Ok(names)
}
