//! Ensemble runs that measure how far rescaled chains stray from the fluid
//! solution as `L` grows.
//!
//! A run samples one rescaled chain on a time grid and records the largest
//! Euclidean distance to the reference path: the ODE solution from the
//! initial densities, or the constant fixed point when the chain starts at
//! (or is burnt in around) the fixed point. Runs inside a study are
//! independent and execute on the rayon pool; each owns an [`RngStream`]
//! keyed by `(scale index, replica)`, so the output does not depend on
//! scheduling.

use rayon::prelude::*;
use serde::Serialize;
use thiserror::Error;

use crate::fixed_point::{FixedPointError, FixedPointSolver};
use crate::fluid::{integrate_on_grid, FluidError, DEFAULT_DTAU};
use crate::markov::{sample_on_grid, time_grid, Chain, RngStream, Sampler};
use crate::model::{
    distance_unchecked, rescale_params, rescale_state, validate_params, FluidState, LatticeState,
    ModelError, ModelParams, ScalingConfig,
};

pub const DEFAULT_SAMPLE_DTAU: f64 = 0.01;
/// Burn-in length in chain steps per unit of `L`.
pub const DEFAULT_BURN_IN_PER_SCALE: f64 = 50.0;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum HarnessError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Fluid(#[from] FluidError),
    #[error(transparent)]
    FixedPoint(#[from] FixedPointError),
    #[error("invalid study configuration: {0}")]
    InvalidConfig(String),
}

/// How the chain is started.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub enum Init {
    /// `round(L * v0)`; compared against the ODE solution from `v0`.
    Explicit(FluidState),
    /// `round(L * fixed point)`; compared against the constant fixed point.
    FixedPoint,
    /// Fixed-point start followed by a burn-in of the given number of steps
    /// (`50 L` when `None`); compared against the constant fixed point.
    Equilibrium { burn_in_steps: Option<u64> },
}

impl Init {
    fn burn_in(&self, scale: f64) -> u64 {
        match self {
            Init::Equilibrium {
                burn_in_steps: Some(steps),
            } => *steps,
            Init::Equilibrium {
                burn_in_steps: None,
            } => (DEFAULT_BURN_IN_PER_SCALE * scale).ceil() as u64,
            _ => 0,
        }
    }
}

/// The deterministic path a chain is measured against, sampled on a grid.
#[derive(Debug, Clone, PartialEq)]
pub enum Reference {
    Constant(FluidState),
    Path(Vec<FluidState>),
}

impl Reference {
    pub fn at(&self, k: usize) -> &FluidState {
        match self {
            Reference::Constant(s) => s,
            Reference::Path(p) => &p[k],
        }
    }
}

/// Starting densities and the reference path for `init` on `grid`.
pub fn build_reference(
    params: &ModelParams,
    init: &Init,
    grid: &[f64],
    ode_dtau: f64,
) -> Result<(FluidState, Reference), HarnessError> {
    match init {
        Init::Explicit(v0) => {
            v0.check_levels(params.n)?;
            let path = integrate_on_grid(v0, params, grid, ode_dtau)?;
            Ok((v0.clone(), Reference::Path(path)))
        }
        Init::FixedPoint | Init::Equilibrium { .. } => {
            let fp = FixedPointSolver::default().solve(params)?.state();
            Ok((fp.clone(), Reference::Constant(fp)))
        }
    }
}

/// Largest distance between `samples[k]` and the reference at grid index `k`.
pub fn sup_distance(samples: &[FluidState], reference: &Reference) -> f64 {
    samples
        .iter()
        .enumerate()
        .map(|(k, s)| distance_unchecked(s, reference.at(k)))
        .fold(0.0, f64::max)
}

fn run_against<S: Sampler>(
    params: &ModelParams,
    scaling: &ScalingConfig,
    init: &Init,
    start: &FluidState,
    reference: &Reference,
    grid: &[f64],
    sampler: S,
) -> Result<f64, HarnessError> {
    let dp = rescale_params(params, scaling)?;
    let mut chain = Chain::new(LatticeState::from_fluid(start, scaling.scale), dp, sampler);
    chain.advance_by(init.burn_in(scaling.scale));
    let traj = sample_on_grid(&mut chain, scaling, grid);
    Ok(sup_distance(&traj.states, reference))
}

/// One run: the sup over the grid `0, sample_dtau, ..., horizon` of the
/// distance between the rescaled chain and the reference path for `init`.
pub fn sup_distance_run<S: Sampler>(
    params: &ModelParams,
    scaling: &ScalingConfig,
    init: &Init,
    horizon: f64,
    sample_dtau: f64,
    sampler: S,
) -> Result<f64, HarnessError> {
    validate_params(params, scaling)?;
    check_horizon(horizon, sample_dtau)?;
    let grid = time_grid(horizon, sample_dtau);
    let (start, reference) = build_reference(params, init, &grid, DEFAULT_DTAU)?;
    run_against(params, scaling, init, &start, &reference, &grid, sampler)
}

fn check_horizon(horizon: f64, sample_dtau: f64) -> Result<(), HarnessError> {
    if !(horizon > 0.0 && horizon.is_finite()) || !(sample_dtau > 0.0 && sample_dtau.is_finite())
    {
        return Err(HarnessError::InvalidConfig(format!(
            "horizon ({horizon}) and sample_dtau ({sample_dtau}) must be positive"
        )));
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StudyConfig {
    pub params: ModelParams,
    /// Increasing scale parameters `L`.
    pub scales: Vec<f64>,
    pub replicas: usize,
    pub horizon: f64,
    pub sample_dtau: f64,
    pub init: Init,
    pub master_seed: u64,
    pub delta: f64,
    /// RK4 step for the reference path.
    pub ode_dtau: f64,
}

impl StudyConfig {
    pub fn new(params: ModelParams, scales: Vec<f64>, replicas: usize, horizon: f64, init: Init, master_seed: u64) -> Self {
        Self {
            params,
            scales,
            replicas,
            horizon,
            sample_dtau: DEFAULT_SAMPLE_DTAU,
            init,
            master_seed,
            delta: 1.0,
            ode_dtau: DEFAULT_DTAU,
        }
    }

    pub fn validate(&self) -> Result<(), HarnessError> {
        if self.scales.is_empty() {
            return Err(HarnessError::InvalidConfig("no scale values given".into()));
        }
        if self.scales.windows(2).any(|w| !(w[0] < w[1])) {
            return Err(HarnessError::InvalidConfig(
                "scale values must be strictly increasing".into(),
            ));
        }
        if self.replicas == 0 {
            return Err(HarnessError::InvalidConfig("replicas must be positive".into()));
        }
        if self.scales.len() as u64 > u32::MAX as u64 || self.replicas as u64 > u32::MAX as u64 {
            return Err(HarnessError::InvalidConfig("too many runs".into()));
        }
        check_horizon(self.horizon, self.sample_dtau)?;
        for &scale in &self.scales {
            validate_params(&self.params, &ScalingConfig::with_delta(scale, self.delta))?;
        }
        if let Init::Explicit(v0) = &self.init {
            v0.check_levels(self.params.n)?;
        }
        Ok(())
    }
}

/// Stream index of replica `replica` at scale index `scale_index`.
pub fn stream_index(scale_index: usize, replica: usize) -> u64 {
    ((scale_index as u64) << 32) | replica as u64
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ScalingStudyRecord {
    pub scale: f64,
    pub replica: usize,
    pub sup_dist: f64,
    /// Stream index used under the study's master seed.
    pub seed_used: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ScaleSummary {
    pub scale: f64,
    pub median: f64,
    pub p90: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StudyOutput {
    pub records: Vec<ScalingStudyRecord>,
    pub summary: Vec<ScaleSummary>,
    /// Least-squares slope of `ln(median)` against `ln(L)`; absent with fewer
    /// than two scales or a zero median.
    pub log_log_slope: Option<f64>,
}

/// Runs `replicas` chains at every scale and summarizes the sup-distances.
pub fn scaling_study(config: &StudyConfig) -> Result<StudyOutput, HarnessError> {
    config.validate()?;
    let params = &config.params;
    let grid = time_grid(config.horizon, config.sample_dtau);
    let (start, reference) = build_reference(params, &config.init, &grid, config.ode_dtau)?;

    let jobs: Vec<(usize, usize)> = (0..config.scales.len())
        .flat_map(|li| (0..config.replicas).map(move |r| (li, r)))
        .collect();
    let records = jobs
        .into_par_iter()
        .map(|(li, replica)| {
            let scale = config.scales[li];
            let scaling = ScalingConfig::with_delta(scale, config.delta);
            let stream = stream_index(li, replica);
            let sampler = RngStream::new(config.master_seed, stream);
            let sup_dist =
                run_against(params, &scaling, &config.init, &start, &reference, &grid, sampler)?;
            Ok(ScalingStudyRecord {
                scale,
                replica,
                sup_dist,
                seed_used: stream,
            })
        })
        .collect::<Result<Vec<_>, HarnessError>>()?;

    let summary: Vec<ScaleSummary> = config
        .scales
        .iter()
        .map(|&scale| {
            let mut values: Vec<f64> = records
                .iter()
                .filter(|r| r.scale == scale)
                .map(|r| r.sup_dist)
                .collect();
            values.sort_by(f64::total_cmp);
            ScaleSummary {
                scale,
                median: quantile_sorted(&values, 0.5),
                p90: quantile_sorted(&values, 0.9),
            }
        })
        .collect();
    let log_log_slope = log_log_slope(&summary);
    Ok(StudyOutput {
        records,
        summary,
        log_log_slope,
    })
}

/// Linear-interpolation quantile of an ascending, non-empty slice.
pub fn quantile_sorted(values: &[f64], q: f64) -> f64 {
    assert!(!values.is_empty());
    let pos = q * (values.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    values[lo] + (pos - lo as f64) * (values[hi] - values[lo])
}

fn log_log_slope(summary: &[ScaleSummary]) -> Option<f64> {
    if summary.len() < 2 || summary.iter().any(|s| !(s.median > 0.0)) {
        return None;
    }
    let pts: Vec<(f64, f64)> = summary
        .iter()
        .map(|s| (s.scale.ln(), s.median.ln()))
        .collect();
    let n = pts.len() as f64;
    let mx = pts.iter().map(|p| p.0).sum::<f64>() / n;
    let my = pts.iter().map(|p| p.1).sum::<f64>() / n;
    let sxy: f64 = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    let sxx: f64 = pts.iter().map(|p| (p.0 - mx) * (p.0 - mx)).sum();
    Some(sxy / sxx)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EquilibriumStats {
    pub mean: FluidState,
    /// Naive standard error of each component's time average.
    pub std_err: FluidState,
    pub fixed_point: FluidState,
    pub distance_to_fixed_point: f64,
    pub samples: usize,
}

/// Starts the chain at `round(L * fixed point)`, discards `burn_in_steps`
/// steps, then averages `n_samples` rescaled states taken `sample_gap` steps
/// apart (the first one right after burn-in).
pub fn equilibrium_study<S: Sampler>(
    params: &ModelParams,
    scaling: &ScalingConfig,
    burn_in_steps: u64,
    n_samples: usize,
    sample_gap: u64,
    sampler: S,
) -> Result<EquilibriumStats, HarnessError> {
    let dp = rescale_params(params, scaling)?;
    if n_samples == 0 || sample_gap == 0 {
        return Err(HarnessError::InvalidConfig(
            "n_samples and sample_gap must be positive".into(),
        ));
    }
    let fp = FixedPointSolver::default().solve(params)?.state();
    let mut chain = Chain::new(LatticeState::from_fluid(&fp, scaling.scale), dp, sampler);
    chain.advance_by(burn_in_steps);

    let dim = 2 * params.n;
    let mut sum = vec![0.0; dim];
    let mut sum_sq = vec![0.0; dim];
    for k in 0..n_samples {
        if k > 0 {
            chain.advance_by(sample_gap);
        }
        let v = rescale_state(chain.state(), scaling.scale).to_flat();
        for i in 0..dim {
            sum[i] += v[i];
            sum_sq[i] += v[i] * v[i];
        }
    }
    let n = n_samples as f64;
    let mean: Vec<f64> = sum.iter().map(|s| s / n).collect();
    let std_err: Vec<f64> = if n_samples > 1 {
        (0..dim)
            .map(|i| {
                let var = ((sum_sq[i] - n * mean[i] * mean[i]) / (n - 1.0)).max(0.0);
                (var / n).sqrt()
            })
            .collect()
    } else {
        vec![0.0; dim]
    };
    let mean = FluidState::from_flat(&mean);
    Ok(EquilibriumStats {
        distance_to_fixed_point: distance_unchecked(&mean, &fp),
        std_err: FluidState::from_flat(&std_err),
        mean,
        fixed_point: fp,
        samples: n_samples,
    })
}
