//! Command-line front end.
//!
//! Configuration is a flat `key = value` text file (`#` starts a comment),
//! overridden by `--set key=value` flags in order, then by `--out` and
//! `--seed`. Every command writes its CSV files plus `manifest.json` into the
//! output directory. Numbers are written in Rust's shortest round-trip
//! decimal form.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use clap::{Parser, Subcommand};
use serde_json::{json, Value};
use thiserror::Error;

use crate::fixed_point::{FixedPointError, FixedPointSolver};
use crate::fluid::{integrate_on_grid, FluidError};
use crate::harness::{
    equilibrium_study, scaling_study, HarnessError, Init, StudyConfig,
    DEFAULT_BURN_IN_PER_SCALE,
};
use crate::markov::{sample_on_grid, time_grid, Chain, RngStream};
use crate::model::{
    distance, rescale_params, validate_params, FluidState, LatticeState, ModelError, ModelParams,
    ScalingConfig,
};

pub const EXIT_OK: i32 = 0;
pub const EXIT_IO: i32 = 1;
pub const EXIT_INVALID_CONFIG: i32 = 2;
pub const EXIT_NUMERICAL: i32 = 3;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("numerical failure: {0}")]
    Numerical(String),
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => EXIT_INVALID_CONFIG,
            CliError::Numerical(_) => EXIT_NUMERICAL,
            CliError::Io { .. } => EXIT_IO,
        }
    }
}

impl From<ModelError> for CliError {
    fn from(e: ModelError) -> Self {
        CliError::Config(e.to_string())
    }
}

impl From<FixedPointError> for CliError {
    fn from(e: FixedPointError) -> Self {
        match e {
            FixedPointError::Model(m) => m.into(),
            other => CliError::Numerical(other.to_string()),
        }
    }
}

impl From<FluidError> for CliError {
    fn from(e: FluidError) -> Self {
        match e {
            FluidError::Model(m) => m.into(),
            FluidError::InvalidArgument(msg) => CliError::Config(msg),
            other => CliError::Numerical(other.to_string()),
        }
    }
}

impl From<HarnessError> for CliError {
    fn from(e: HarnessError) -> Self {
        match e {
            HarnessError::Model(m) => m.into(),
            HarnessError::Fluid(f) => f.into(),
            HarnessError::FixedPoint(f) => f.into(),
            HarnessError::InvalidConfig(msg) => CliError::Config(msg),
        }
    }
}

#[derive(Debug, Parser)]
#[command(name = "lob-fluid", version, about = "Order book chain, fluid limit and scaling studies")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
    /// Flat `key = value` config file.
    #[arg(long, global = true, value_name = "PATH")]
    pub config: Option<PathBuf>,
    /// Override one config key; repeatable, later wins.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    pub set: Vec<String>,
    /// Output directory (overrides `out_dir`).
    #[arg(long, global = true, value_name = "DIR")]
    pub out: Option<PathBuf>,
    /// Master seed (overrides `seed`).
    #[arg(long, global = true)]
    pub seed: Option<u64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Subcommand)]
pub enum Command {
    /// Solve the stationary balance equations.
    FixedPoint,
    /// Integrate the fluid ODEs from the configured initial state.
    Integrate,
    /// Simulate one rescaled chain trajectory.
    Simulate,
    /// Sup-distance study over `l_list`.
    ScalingStudy,
    /// Time-averaged chain state after burn-in.
    Equilibrium,
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Command::FixedPoint => "fixed-point",
            Command::Integrate => "integrate",
            Command::Simulate => "simulate",
            Command::ScalingStudy => "scaling-study",
            Command::Equilibrium => "equilibrium",
        }
    }
}

const KNOWN_KEYS: &[&str] = &[
    "n",
    "gamma",
    "alpha_q",
    "alpha_m",
    "lambda_b",
    "lambda_s",
    "scale_l",
    "delta",
    "horizon_t",
    "dtau",
    "sample_dtau",
    "tol",
    "max_iter",
    "replicas",
    "l_list",
    "init",
    "seed",
    "out_dir",
    "burn_in",
    "n_samples",
    "sample_gap",
];

const DEFAULTS: &[(&str, &str)] = &[
    ("scale_l", "1000"),
    ("delta", "1"),
    ("horizon_t", "10"),
    ("dtau", "0.001"),
    ("sample_dtau", "0.01"),
    ("tol", "1e-12"),
    ("max_iter", "1000000"),
    ("replicas", "50"),
    ("l_list", "100,1000,10000"),
    ("init", "fixed_point"),
    ("seed", "0"),
    ("out_dir", "out"),
    ("n_samples", "1000"),
    ("sample_gap", "100"),
];

/// Parses `key = value` lines; blank lines and `#` comments are skipped.
pub fn parse_config_text(text: &str) -> Result<Vec<(String, String)>, CliError> {
    let mut out = Vec::new();
    for (lineno, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = split_pair(line)
            .ok_or_else(|| CliError::Config(format!("line {}: expected `key = value`", lineno + 1)))?;
        out.push((k, v));
    }
    Ok(out)
}

fn split_pair(s: &str) -> Option<(String, String)> {
    let (k, v) = s.split_once('=')?;
    let k = k.trim();
    if k.is_empty() {
        return None;
    }
    Some((k.to_string(), v.trim().to_string()))
}

/// Fully resolved run configuration.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub command: Command,
    /// Every key with its effective value, defaults included.
    pub values: BTreeMap<String, String>,
    pub params: ModelParams,
    pub scaling: ScalingConfig,
    pub horizon: f64,
    pub dtau: f64,
    pub sample_dtau: f64,
    pub tol: f64,
    pub max_iter: usize,
    pub replicas: usize,
    pub scales: Vec<f64>,
    pub init: InitSetting,
    pub seed: u64,
    pub out_dir: PathBuf,
    pub burn_in: Option<u64>,
    pub n_samples: usize,
    pub sample_gap: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub enum InitSetting {
    FixedPoint,
    Equilibrium,
    Explicit(FluidState),
}

impl RunConfig {
    /// Merges the sources in precedence order (later wins) and validates.
    pub fn resolve(
        command: Command,
        pairs: impl IntoIterator<Item = (String, String)>,
    ) -> Result<Self, CliError> {
        let mut values: BTreeMap<String, String> = DEFAULTS
            .iter()
            .map(|(k, v)| (k.to_string(), v.to_string()))
            .collect();
        for (k, v) in pairs {
            if !KNOWN_KEYS.contains(&k.as_str()) {
                return Err(CliError::Config(format!("unknown key `{k}`")));
            }
            values.insert(k, v);
        }

        let get = |k: &str| -> Result<&str, CliError> {
            values
                .get(k)
                .map(String::as_str)
                .ok_or_else(|| CliError::Config(format!("missing required key `{k}`")))
        };
        fn num<T: std::str::FromStr>(key: &str, v: &str) -> Result<T, CliError> {
            v.parse()
                .map_err(|_| CliError::Config(format!("key `{key}`: cannot parse `{v}`")))
        }
        let real = |k: &str| -> Result<f64, CliError> { num::<f64>(k, get(k)?) };

        let params = ModelParams {
            n: num("n", get("n")?)?,
            gamma: real("gamma")?,
            alpha_q: real("alpha_q")?,
            alpha_m: real("alpha_m")?,
            lambda_b: real("lambda_b")?,
            lambda_s: real("lambda_s")?,
        };
        params.validate()?;
        let scaling = ScalingConfig::with_delta(real("scale_l")?, real("delta")?);

        let scales = get("l_list")?
            .split(',')
            .map(|s| num::<f64>("l_list", s.trim()))
            .collect::<Result<Vec<_>, _>>()?;

        let init = match get("init")? {
            "fixed_point" => InitSetting::FixedPoint,
            "equilibrium" => InitSetting::Equilibrium,
            other => {
                let nums = other
                    .split([',', ';'])
                    .map(|s| num::<f64>("init", s.trim()))
                    .collect::<Result<Vec<_>, _>>()?;
                if nums.len() != 2 * params.n {
                    return Err(CliError::Config(format!(
                        "key `init`: expected fixed_point, equilibrium or {} numbers, got {}",
                        2 * params.n,
                        nums.len()
                    )));
                }
                let (x, y) = nums.split_at(params.n);
                InitSetting::Explicit(FluidState::new(x.to_vec(), y.to_vec())?)
            }
        };

        let cfg = RunConfig {
            command,
            params,
            scaling,
            horizon: real("horizon_t")?,
            dtau: real("dtau")?,
            sample_dtau: real("sample_dtau")?,
            tol: real("tol")?,
            max_iter: num("max_iter", get("max_iter")?)?,
            replicas: num("replicas", get("replicas")?)?,
            scales,
            init,
            seed: num("seed", get("seed")?)?,
            out_dir: PathBuf::from(get("out_dir")?),
            burn_in: values
                .get("burn_in")
                .map(|v| num::<u64>("burn_in", v))
                .transpose()?,
            n_samples: num("n_samples", get("n_samples")?)?,
            sample_gap: num("sample_gap", get("sample_gap")?)?,
            values,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    fn validate(&self) -> Result<(), CliError> {
        let positive = [
            ("horizon_t", self.horizon),
            ("dtau", self.dtau),
            ("sample_dtau", self.sample_dtau),
            ("tol", self.tol),
        ];
        for (k, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return Err(CliError::Config(format!("key `{k}` must be positive")));
            }
        }
        if self.max_iter == 0 {
            return Err(CliError::Config("key `max_iter` must be positive".into()));
        }
        match self.command {
            Command::FixedPoint => {}
            Command::Integrate => {
                if self.init == InitSetting::Equilibrium {
                    return Err(CliError::Config(
                        "integrate needs init = fixed_point or an explicit vector".into(),
                    ));
                }
            }
            Command::Simulate | Command::Equilibrium => {
                validate_params(&self.params, &self.scaling)?;
                if self.command == Command::Equilibrium && (self.n_samples == 0 || self.sample_gap == 0) {
                    return Err(CliError::Config(
                        "keys `n_samples` and `sample_gap` must be positive".into(),
                    ));
                }
            }
            Command::ScalingStudy => {
                self.study_config().validate()?;
            }
        }
        Ok(())
    }

    fn harness_init(&self) -> Init {
        match &self.init {
            InitSetting::FixedPoint => Init::FixedPoint,
            InitSetting::Equilibrium => Init::Equilibrium {
                burn_in_steps: self.burn_in,
            },
            InitSetting::Explicit(v) => Init::Explicit(v.clone()),
        }
    }

    pub fn study_config(&self) -> StudyConfig {
        StudyConfig {
            params: self.params,
            scales: self.scales.clone(),
            replicas: self.replicas,
            horizon: self.horizon,
            sample_dtau: self.sample_dtau,
            init: self.harness_init(),
            master_seed: self.seed,
            delta: self.scaling.delta,
            ode_dtau: self.dtau,
        }
    }

    fn solver(&self) -> FixedPointSolver {
        FixedPointSolver::new(self.tol, self.max_iter)
    }

    fn burn_in_steps(&self) -> u64 {
        self.burn_in
            .unwrap_or((DEFAULT_BURN_IN_PER_SCALE * self.scaling.scale).ceil() as u64)
    }
}

/// Collects config file, `--set` and flag overrides in precedence order.
pub fn load_config(cli: &Cli) -> Result<RunConfig, CliError> {
    let mut pairs = Vec::new();
    if let Some(path) = &cli.config {
        let text = fs::read_to_string(path).map_err(|source| CliError::Io {
            path: path.clone(),
            source,
        })?;
        pairs.extend(parse_config_text(&text)?);
    }
    for s in &cli.set {
        pairs.push(
            split_pair(s).ok_or_else(|| CliError::Config(format!("--set `{s}`: expected KEY=VALUE")))?,
        );
    }
    if let Some(out) = &cli.out {
        pairs.push(("out_dir".into(), out.display().to_string()));
    }
    if let Some(seed) = cli.seed {
        pairs.push(("seed".into(), seed.to_string()));
    }
    RunConfig::resolve(cli.command, pairs)
}

/// Outcome of a command: the files written and the command-specific results
/// recorded in the manifest.
#[derive(Debug, Clone)]
pub struct RunReport {
    pub outputs: Vec<PathBuf>,
    pub results: Value,
}

pub fn run(cli: &Cli) -> Result<RunReport, CliError> {
    let cfg = load_config(cli)?;
    execute(&cfg)
}

/// Runs the configured command and writes its outputs and manifest.
pub fn execute(cfg: &RunConfig) -> Result<RunReport, CliError> {
    let started = SystemTime::now();
    let clock = Instant::now();
    fs::create_dir_all(&cfg.out_dir).map_err(|source| CliError::Io {
        path: cfg.out_dir.clone(),
        source,
    })?;
    let mut report = match cfg.command {
        Command::FixedPoint => cmd_fixed_point(cfg)?,
        Command::Integrate => cmd_integrate(cfg)?,
        Command::Simulate => cmd_simulate(cfg)?,
        Command::ScalingStudy => cmd_scaling_study(cfg)?,
        Command::Equilibrium => cmd_equilibrium(cfg)?,
    };

    let manifest_path = cfg.out_dir.join("manifest.json");
    let manifest = json!({
        "command": cfg.command.name(),
        "code_version": concat!(env!("CARGO_PKG_NAME"), " ", env!("CARGO_PKG_VERSION")),
        "rng": "ChaCha8 (rand_chacha), seeded with seed_from_u64(master_seed), stream id = stream index",
        "master_seed": cfg.seed,
        "config": cfg.values,
        "started_unix_secs": started.duration_since(UNIX_EPOCH).map(|d| d.as_secs_f64()).unwrap_or(0.0),
        "wall_clock_secs": clock.elapsed().as_secs_f64(),
        "outputs": report.outputs.iter().map(|p| p.file_name().unwrap().to_string_lossy().into_owned()).collect::<Vec<_>>(),
        "results": report.results,
    });
    let text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    write_file(&manifest_path, &(text + "\n"))?;
    report.outputs.push(manifest_path);
    Ok(report)
}

fn write_file(path: &Path, contents: &str) -> Result<(), CliError> {
    fs::write(path, contents).map_err(|source| CliError::Io {
        path: path.to_path_buf(),
        source,
    })
}

fn state_header(n: usize) -> String {
    let mut h = String::from("tau");
    for i in 1..=n {
        let _ = write!(h, ",x_{i}");
    }
    for i in 1..=n {
        let _ = write!(h, ",y_{i}");
    }
    h
}

fn state_rows(times: &[f64], states: &[FluidState]) -> String {
    let mut out = state_header(states[0].levels());
    out.push('\n');
    for (t, s) in times.iter().zip(states) {
        let _ = write!(out, "{t}");
        for v in s.x.iter().chain(&s.y) {
            let _ = write!(out, ",{v}");
        }
        out.push('\n');
    }
    out
}

fn start_state(cfg: &RunConfig) -> Result<FluidState, CliError> {
    match &cfg.init {
        InitSetting::Explicit(v) => Ok(v.clone()),
        InitSetting::FixedPoint | InitSetting::Equilibrium => {
            Ok(cfg.solver().solve(&cfg.params)?.state())
        }
    }
}

pub fn cmd_fixed_point(cfg: &RunConfig) -> Result<RunReport, CliError> {
    let fp = cfg.solver().solve(&cfg.params)?;
    let mut csv = String::from("level,x_star,y_star\n");
    for i in 0..cfg.params.n {
        let _ = writeln!(csv, "{},{},{}", i + 1, fp.x_star[i], fp.y_star[i]);
    }
    let path = cfg.out_dir.join("fixed_point.csv");
    write_file(&path, &csv)?;
    Ok(RunReport {
        outputs: vec![path],
        results: json!({
            "regime": fp.regime.to_string(),
            "residual": fp.residual,
            "iterations": fp.iterations,
        }),
    })
}

pub fn cmd_integrate(cfg: &RunConfig) -> Result<RunReport, CliError> {
    let v0 = start_state(cfg)?;
    if !v0.is_strictly_positive() {
        return Err(CliError::Config(
            "integrate needs a strictly positive initial state".into(),
        ));
    }
    let grid = time_grid(cfg.horizon, cfg.sample_dtau);
    let states = integrate_on_grid(&v0, &cfg.params, &grid, cfg.dtau)?;
    let path = cfg.out_dir.join("trajectory.csv");
    write_file(&path, &state_rows(&grid, &states))?;

    let fp = cfg.solver().solve(&cfg.params)?.state();
    let last = states.last().expect("grid is non-empty");
    Ok(RunReport {
        outputs: vec![path],
        results: json!({
            "rows": states.len(),
            "final_distance_to_fixed_point": distance(last, &fp)?,
        }),
    })
}

pub fn cmd_simulate(cfg: &RunConfig) -> Result<RunReport, CliError> {
    let v0 = start_state(cfg)?;
    let dp = rescale_params(&cfg.params, &cfg.scaling)?;
    let burn_in = match cfg.init {
        InitSetting::Equilibrium => cfg.burn_in_steps(),
        _ => 0,
    };
    let mut chain = Chain::new(
        LatticeState::from_fluid(&v0, cfg.scaling.scale),
        dp,
        RngStream::new(cfg.seed, 0),
    );
    chain.advance_by(burn_in);
    let grid = time_grid(cfg.horizon, cfg.sample_dtau);
    let traj = sample_on_grid(&mut chain, &cfg.scaling, &grid);

    let path = cfg.out_dir.join("sim_trajectory.csv");
    write_file(&path, &state_rows(&traj.times, &traj.states))?;

    let totals = chain.totals();
    let mut csv = String::from("event,count\n");
    let table = serde_json::to_value(totals).expect("totals serialize");
    for (k, v) in table.as_object().expect("struct serializes to an object") {
        let _ = writeln!(csv, "{k},{v}");
    }
    let breakdown_path = cfg.out_dir.join("breakdown.csv");
    write_file(&breakdown_path, &csv)?;

    Ok(RunReport {
        outputs: vec![path, breakdown_path],
        results: json!({
            "burn_in_steps": burn_in,
            "stream_index": 0,
            "breakdown_totals": table,
        }),
    })
}

pub fn cmd_scaling_study(cfg: &RunConfig) -> Result<RunReport, CliError> {
    let out = scaling_study(&cfg.study_config())?;

    let mut study = String::from("L,replica,seed_used,sup_dist\n");
    for r in &out.records {
        let _ = writeln!(study, "{},{},{},{}", r.scale, r.replica, r.seed_used, r.sup_dist);
    }
    let mut summary = String::from("L,median,p90\n");
    for s in &out.summary {
        let _ = writeln!(summary, "{},{},{}", s.scale, s.median, s.p90);
    }
    let study_path = cfg.out_dir.join("study.csv");
    let summary_path = cfg.out_dir.join("summary.csv");
    write_file(&study_path, &study)?;
    write_file(&summary_path, &summary)?;
    Ok(RunReport {
        outputs: vec![study_path, summary_path],
        results: json!({
            "runs": out.records.len(),
            "log_log_slope": out.log_log_slope,
        }),
    })
}

pub fn cmd_equilibrium(cfg: &RunConfig) -> Result<RunReport, CliError> {
    let burn_in = cfg.burn_in_steps();
    let stats = equilibrium_study(
        &cfg.params,
        &cfg.scaling,
        burn_in,
        cfg.n_samples,
        cfg.sample_gap,
        RngStream::new(cfg.seed, 0),
    )?;
    let mut csv = String::from("level,mean_x,se_x,mean_y,se_y,x_star,y_star\n");
    for i in 0..cfg.params.n {
        let _ = writeln!(
            csv,
            "{},{},{},{},{},{},{}",
            i + 1,
            stats.mean.x[i],
            stats.std_err.x[i],
            stats.mean.y[i],
            stats.std_err.y[i],
            stats.fixed_point.x[i],
            stats.fixed_point.y[i]
        );
    }
    let path = cfg.out_dir.join("equilibrium.csv");
    write_file(&path, &csv)?;
    Ok(RunReport {
        outputs: vec![path],
        results: json!({
            "burn_in_steps": burn_in,
            "samples": stats.samples,
            "distance_to_fixed_point": stats.distance_to_fixed_point,
        }),
    })
}
