//! Parameter and state containers for the order book model.
//!
//! [`ModelParams`] carries the fluid-scale rates, [`ScalingConfig`] the
//! scale parameter `L` and step length `delta`. [`rescale_params`] turns the
//! pair into per-step probabilities for the discrete chain, and
//! [`rescale_state`] maps integer trader counts onto densities.
//!
//! Event probabilities scale like `1/L` while arrival means stay at
//! `lambda_b`, `lambda_s` per step: over the `L` steps of one rescaled time
//! unit a level then gains `lambda * L` traders, i.e. density `lambda`, which
//! is the inflow the fluid equations carry. Arrival means of `lambda / L`
//! would contribute only `lambda / L` density per time unit and vanish in the
//! limit.

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ModelError {
    #[error("parameter `{0}` must be strictly positive")]
    NonPositiveParameter(&'static str),
    #[error(
        "scale L = {scale} too small: need L > gamma ({gamma}) and L > alpha_q + alpha_m ({quit_plus_move})"
    )]
    ScaleTooSmall {
        scale: f64,
        gamma: f64,
        quit_plus_move: f64,
    },
    #[error("dimension mismatch: expected {expected} levels, found {found}")]
    DimensionMismatch { expected: usize, found: usize },
    #[error("invalid state: {0}")]
    InvalidState(String),
}

/// Fluid-scale rates of the model plus the number of price levels.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ModelParams {
    pub n: usize,
    pub gamma: f64,
    pub alpha_q: f64,
    pub alpha_m: f64,
    pub lambda_b: f64,
    pub lambda_s: f64,
}

impl ModelParams {
    /// Builds and validates a parameter set.
    pub fn new(
        n: usize,
        gamma: f64,
        alpha_q: f64,
        alpha_m: f64,
        lambda_b: f64,
        lambda_s: f64,
    ) -> Result<Self, ModelError> {
        let params = Self {
            n,
            gamma,
            alpha_q,
            alpha_m,
            lambda_b,
            lambda_s,
        };
        params.validate()?;
        Ok(params)
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        if self.n < 1 {
            return Err(ModelError::NonPositiveParameter("n"));
        }
        let fields = [
            ("gamma", self.gamma),
            ("alpha_q", self.alpha_q),
            ("alpha_m", self.alpha_m),
            ("lambda_b", self.lambda_b),
            ("lambda_s", self.lambda_s),
        ];
        for (name, value) in fields {
            // `!(v > 0)` also rejects NaN.
            if !(value > 0.0) || !value.is_finite() {
                return Err(ModelError::NonPositiveParameter(name));
            }
        }
        Ok(())
    }

    /// Total drain rate `alpha_q + alpha_m` shared by every level.
    #[inline]
    pub fn drain(&self) -> f64 {
        self.alpha_q + self.alpha_m
    }

    /// The same model with buyers and sellers exchanged and the level order
    /// reversed.
    pub fn mirrored(&self) -> Self {
        Self {
            lambda_b: self.lambda_s,
            lambda_s: self.lambda_b,
            ..*self
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScalingConfig {
    /// Scale parameter `L`.
    pub scale: f64,
    /// Length `delta` of one chain step in original time units.
    pub delta: f64,
}

impl ScalingConfig {
    pub fn new(scale: f64) -> Self {
        Self { scale, delta: 1.0 }
    }

    pub fn with_delta(scale: f64, delta: f64) -> Self {
        Self { scale, delta }
    }

    /// Number of chain steps elapsed by rescaled time `tau`, i.e. the integer
    /// part of `tau * L / delta`.
    ///
    /// Grid times such as `k * 0.01` are not exact in binary, so a quotient
    /// within 1e-9 (relative) of an integer snaps to that integer before the
    /// floor is taken.
    pub fn steps_until(&self, tau: f64) -> u64 {
        let q = tau * self.scale / self.delta;
        let nearest = q.round();
        if (q - nearest).abs() <= 1e-9 * nearest.abs().max(1.0) {
            nearest.max(0.0) as u64
        } else {
            q.floor().max(0.0) as u64
        }
    }

    /// Rescaled time of chain step `t`.
    pub fn tau_of_step(&self, t: u64) -> f64 {
        t as f64 * self.delta / self.scale
    }
}

/// Per-step probabilities and Poisson arrival means of the discrete chain.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DiscreteParams {
    pub p_t: f64,
    pub p_q: f64,
    pub p_m: f64,
    pub lam_b: f64,
    pub lam_s: f64,
}

impl DiscreteParams {
    pub fn validate(&self) -> Result<(), ModelError> {
        let probs = [("p_t", self.p_t), ("p_q", self.p_q), ("p_m", self.p_m)];
        for (name, p) in probs {
            if !(p > 0.0 && p < 1.0) {
                return Err(ModelError::InvalidState(format!(
                    "{name} = {p} is not in (0, 1)"
                )));
            }
        }
        if !(self.p_q + self.p_m < 1.0) {
            return Err(ModelError::InvalidState(format!(
                "p_q + p_m = {} must be < 1",
                self.p_q + self.p_m
            )));
        }
        if !(self.lam_b > 0.0) || !self.lam_b.is_finite() {
            return Err(ModelError::NonPositiveParameter("lam_b"));
        }
        if !(self.lam_s > 0.0) || !self.lam_s.is_finite() {
            return Err(ModelError::NonPositiveParameter("lam_s"));
        }
        Ok(())
    }
}

/// Checks the rates and that `L` strictly dominates `gamma` and
/// `alpha_q + alpha_m`.
pub fn validate_params(params: &ModelParams, scaling: &ScalingConfig) -> Result<(), ModelError> {
    params.validate()?;
    if !(scaling.delta > 0.0) || !scaling.delta.is_finite() {
        return Err(ModelError::NonPositiveParameter("delta"));
    }
    if !(scaling.scale > 0.0) || !scaling.scale.is_finite() {
        return Err(ModelError::NonPositiveParameter("scale_l"));
    }
    if !(scaling.scale > params.gamma && scaling.scale > params.drain()) {
        return Err(ModelError::ScaleTooSmall {
            scale: scaling.scale,
            gamma: params.gamma,
            quit_plus_move: params.drain(),
        });
    }
    Ok(())
}

pub fn rescale_params(
    params: &ModelParams,
    scaling: &ScalingConfig,
) -> Result<DiscreteParams, ModelError> {
    validate_params(params, scaling)?;
    let l = scaling.scale;
    Ok(DiscreteParams {
        p_t: params.gamma / l,
        p_q: params.alpha_q / l,
        p_m: params.alpha_m / l,
        lam_b: params.lambda_b,
        lam_s: params.lambda_s,
    })
}

/// Integer buyer and seller counts per price level; level `i` is index `i - 1`.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct LatticeState {
    pub b: Vec<u64>,
    pub s: Vec<u64>,
}

impl LatticeState {
    pub fn new(b: Vec<u64>, s: Vec<u64>) -> Result<Self, ModelError> {
        if b.len() != s.len() {
            return Err(ModelError::DimensionMismatch {
                expected: b.len(),
                found: s.len(),
            });
        }
        if b.is_empty() {
            return Err(ModelError::InvalidState("state has no levels".into()));
        }
        Ok(Self { b, s })
    }

    pub fn zeros(n: usize) -> Self {
        Self {
            b: vec![0; n],
            s: vec![0; n],
        }
    }

    pub fn levels(&self) -> usize {
        self.b.len()
    }

    pub fn total_buyers(&self) -> u64 {
        self.b.iter().sum()
    }

    pub fn total_sellers(&self) -> u64 {
        self.s.iter().sum()
    }

    /// `round(L * v)` componentwise, halves rounded up.
    pub fn from_fluid(v: &FluidState, scale: f64) -> Self {
        let round = |z: &f64| (z * scale + 0.5).floor().max(0.0) as u64;
        Self {
            b: v.x.iter().map(round).collect(),
            s: v.y.iter().map(round).collect(),
        }
    }
}

/// Real buyer and seller densities per price level.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FluidState {
    pub x: Vec<f64>,
    pub y: Vec<f64>,
}

impl FluidState {
    pub fn new(x: Vec<f64>, y: Vec<f64>) -> Result<Self, ModelError> {
        if x.len() != y.len() {
            return Err(ModelError::DimensionMismatch {
                expected: x.len(),
                found: y.len(),
            });
        }
        if x.is_empty() {
            return Err(ModelError::InvalidState("state has no levels".into()));
        }
        if let Some(v) = x.iter().chain(&y).find(|v| !(**v >= 0.0) || !v.is_finite()) {
            return Err(ModelError::InvalidState(format!(
                "component {v} is not a finite non-negative real"
            )));
        }
        Ok(Self { x, y })
    }

    pub fn zeros(n: usize) -> Self {
        Self {
            x: vec![0.0; n],
            y: vec![0.0; n],
        }
    }

    pub fn levels(&self) -> usize {
        self.x.len()
    }

    /// `x` followed by `y` as one vector of length `2N`.
    pub fn to_flat(&self) -> Vec<f64> {
        self.x.iter().chain(&self.y).copied().collect()
    }

    /// Inverse of [`FluidState::to_flat`]; performs no sign check.
    pub fn from_flat(flat: &[f64]) -> Self {
        let n = flat.len() / 2;
        Self {
            x: flat[..n].to_vec(),
            y: flat[n..2 * n].to_vec(),
        }
    }

    pub fn is_strictly_positive(&self) -> bool {
        self.x.iter().chain(&self.y).all(|v| *v > 0.0)
    }

    pub fn check_levels(&self, n: usize) -> Result<(), ModelError> {
        if self.x.len() != n || self.y.len() != n {
            return Err(ModelError::DimensionMismatch {
                expected: n,
                found: self.x.len().max(self.y.len()),
            });
        }
        Ok(())
    }
}

pub fn rescale_state(state: &LatticeState, scale: f64) -> FluidState {
    debug_assert!(scale > 0.0);
    FluidState {
        x: state.b.iter().map(|&b| b as f64 / scale).collect(),
        y: state.s.iter().map(|&s| s as f64 / scale).collect(),
    }
}

/// Euclidean distance between two states viewed as points of `R^N x R^N`.
pub fn distance(a: &FluidState, b: &FluidState) -> Result<f64, ModelError> {
    b.check_levels(a.levels())?;
    a.check_levels(a.x.len())?;
    Ok(distance_unchecked(a, b))
}

pub(crate) fn distance_unchecked(a: &FluidState, b: &FluidState) -> f64 {
    a.x.iter()
        .zip(&b.x)
        .chain(a.y.iter().zip(&b.y))
        .map(|(u, v)| (u - v) * (u - v))
        .sum::<f64>()
        .sqrt()
}
