//! The fluid-limit ODE system and a fixed-step RK4 integrator for it.
//!
//! Buyers enter at level 1 at rate `lambda_b` and drift upwards, sellers
//! enter at level `N` at rate `lambda_s` and drift downwards. Every level
//! drains at rate `alpha_q + alpha_m` and trades away `gamma * min(x_i, y_i)`
//! from both sides.

use thiserror::Error;

use crate::fixed_point::FixedPointSolver;
use crate::model::{distance_unchecked, FluidState, ModelError, ModelParams};

pub const DEFAULT_DTAU: f64 = 1e-3;
pub const DEFAULT_TOL: f64 = 1e-9;
pub const DEFAULT_MAX_TIME: f64 = 1e4;
/// Final distance to the fixed point below which [`OdeSolution::converged`]
/// is set.
pub const CONVERGED_DISTANCE: f64 = 1e-6;
/// Negative components no larger than this multiple of the largest component
/// are treated as round-off and clamped to zero.
const CLAMP_RELATIVE: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum FluidError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error(
        "component {component} became {value:e} at tau = {tau}; the step size is too large"
    )]
    PositivityViolation {
        tau: f64,
        component: String,
        value: f64,
    },
    #[error("no fixed point reached by tau = {time}: states one time unit apart differ by {distance:e}")]
    NoConvergence { time: f64, distance: f64 },
}

#[derive(Debug, Clone, PartialEq)]
pub struct OdeSolution {
    pub times: Vec<f64>,
    pub states: Vec<FluidState>,
    pub converged: bool,
    pub final_distance_to_fp: Option<f64>,
}

impl OdeSolution {
    pub fn final_state(&self) -> &FluidState {
        self.states.last().expect("solution holds the initial state")
    }
}

/// Time derivative `(dx/dtau, dy/dtau)` at `state`.
pub fn rhs(state: &FluidState, params: &ModelParams) -> Result<(Vec<f64>, Vec<f64>), ModelError> {
    state.check_levels(params.n)?;
    let z = state.to_flat();
    let mut dz = vec![0.0; z.len()];
    rhs_flat(params, &z, &mut dz);
    let n = params.n;
    Ok((dz[..n].to_vec(), dz[n..].to_vec()))
}

/// Right-hand side on the flat layout `[x_1..x_N, y_1..y_N]`.
pub(crate) fn rhs_flat(params: &ModelParams, z: &[f64], dz: &mut [f64]) {
    let n = params.n;
    let (x, y) = z.split_at(n);
    let (dx, dy) = dz.split_at_mut(n);
    let drain = params.drain();
    let am = params.alpha_m;
    let g = params.gamma;
    for i in 0..n {
        let trade = g * x[i].min(y[i]);
        let inflow_x = if i == 0 { params.lambda_b } else { am * x[i - 1] };
        let inflow_y = if i + 1 == n { params.lambda_s } else { am * y[i + 1] };
        dx[i] = inflow_x - drain * x[i] - trade;
        dy[i] = inflow_y - drain * y[i] - trade;
    }
}

/// Classical fourth-order Runge-Kutta on the flat state, with scratch space
/// reused between steps.
struct Rk4<'a> {
    params: &'a ModelParams,
    k1: Vec<f64>,
    k2: Vec<f64>,
    k3: Vec<f64>,
    k4: Vec<f64>,
    tmp: Vec<f64>,
}

impl<'a> Rk4<'a> {
    fn new(params: &'a ModelParams) -> Self {
        let len = 2 * params.n;
        Self {
            params,
            k1: vec![0.0; len],
            k2: vec![0.0; len],
            k3: vec![0.0; len],
            k4: vec![0.0; len],
            tmp: vec![0.0; len],
        }
    }

    fn step(&mut self, z: &mut [f64], h: f64) {
        let p = self.params;
        rhs_flat(p, z, &mut self.k1);
        for (t, (zi, k)) in self.tmp.iter_mut().zip(z.iter().zip(&self.k1)) {
            *t = zi + 0.5 * h * k;
        }
        rhs_flat(p, &self.tmp, &mut self.k2);
        for (t, (zi, k)) in self.tmp.iter_mut().zip(z.iter().zip(&self.k2)) {
            *t = zi + 0.5 * h * k;
        }
        rhs_flat(p, &self.tmp, &mut self.k3);
        for (t, (zi, k)) in self.tmp.iter_mut().zip(z.iter().zip(&self.k3)) {
            *t = zi + h * k;
        }
        rhs_flat(p, &self.tmp, &mut self.k4);
        let ks = self.k1.iter().zip(&self.k2).zip(self.k3.iter().zip(&self.k4));
        for (zi, ((k1, k2), (k3, k4))) in z.iter_mut().zip(ks) {
            *zi += h / 6.0 * (k1 + 2.0 * k2 + 2.0 * k3 + k4);
        }
    }
}

fn enforce_positivity(z: &mut [f64], n: usize, tau: f64) -> Result<(), FluidError> {
    let scale = z.iter().fold(0.0f64, |m, v| m.max(*v));
    for (idx, v) in z.iter_mut().enumerate() {
        if *v < 0.0 {
            if -*v <= CLAMP_RELATIVE * scale {
                *v = 0.0;
            } else {
                let component = if idx < n {
                    format!("x_{}", idx + 1)
                } else {
                    format!("y_{}", idx - n + 1)
                };
                return Err(FluidError::PositivityViolation {
                    tau,
                    component,
                    value: *v,
                });
            }
        }
    }
    Ok(())
}

fn check_step(t_end: f64, dtau: f64) -> Result<(), FluidError> {
    if !(t_end > 0.0) || !t_end.is_finite() {
        return Err(FluidError::InvalidArgument(format!(
            "horizon must be positive, got {t_end}"
        )));
    }
    if !(dtau > 0.0) || !dtau.is_finite() {
        return Err(FluidError::InvalidArgument(format!(
            "step must be positive, got {dtau}"
        )));
    }
    Ok(())
}

/// Integrates from `v0` to `horizon` with step `dtau`, recording every step.
/// The last step is shortened to land exactly on `horizon`.
pub fn integrate(
    v0: &FluidState,
    params: &ModelParams,
    horizon: f64,
    dtau: f64,
) -> Result<OdeSolution, FluidError> {
    params.validate()?;
    v0.check_levels(params.n)?;
    check_step(horizon, dtau)?;
    if dtau >= horizon {
        return Err(FluidError::InvalidArgument(format!(
            "step {dtau} must be smaller than the horizon {horizon}"
        )));
    }
    if !v0.is_strictly_positive() {
        return Err(FluidError::InvalidArgument(
            "initial state must be strictly positive".into(),
        ));
    }

    let n = params.n;
    // Number of full steps; a remainder below 1e-9 of a step is absorbed.
    let full = ((horizon / dtau) * (1.0 - 1e-12)).floor() as usize;
    let mut times = Vec::with_capacity(full + 2);
    let mut states = Vec::with_capacity(full + 2);
    let mut z = v0.to_flat();
    let mut rk = Rk4::new(params);
    times.push(0.0);
    states.push(v0.clone());

    let mut tau = 0.0;
    for k in 1..=full + 1 {
        let next = if k <= full { k as f64 * dtau } else { horizon };
        let h = next - tau;
        if h <= 1e-9 * dtau {
            // Remainder too small to step; snap the last time onto the horizon.
            if let Some(t) = times.last_mut() {
                *t = horizon;
            }
            break;
        }
        rk.step(&mut z, h);
        enforce_positivity(&mut z, n, next)?;
        tau = next;
        times.push(tau);
        states.push(FluidState::from_flat(&z));
    }

    let final_distance_to_fp = FixedPointSolver::default()
        .solve(params)
        .ok()
        .map(|fp| distance_unchecked(states.last().unwrap(), &fp.state()));
    Ok(OdeSolution {
        times,
        states,
        converged: final_distance_to_fp.is_some_and(|d| d <= CONVERGED_DISTANCE),
        final_distance_to_fp,
    })
}

/// Solution sampled exactly on `grid` (non-decreasing, starting at 0). Each
/// grid interval is split into equal RK4 steps no longer than `max_dtau`.
/// Zero components are allowed in `v0`.
pub fn integrate_on_grid(
    v0: &FluidState,
    params: &ModelParams,
    grid: &[f64],
    max_dtau: f64,
) -> Result<Vec<FluidState>, FluidError> {
    params.validate()?;
    v0.check_levels(params.n)?;
    check_step(1.0, max_dtau)?;
    if grid.first() != Some(&0.0) {
        return Err(FluidError::InvalidArgument("grid must start at 0".into()));
    }
    let mut z = v0.to_flat();
    let mut rk = Rk4::new(params);
    let mut out = Vec::with_capacity(grid.len());
    out.push(v0.clone());
    for w in grid.windows(2) {
        let span = w[1] - w[0];
        if span < 0.0 {
            return Err(FluidError::InvalidArgument("grid must be non-decreasing".into()));
        }
        if span > 0.0 {
            let substeps = (span / max_dtau * (1.0 - 1e-12)).ceil().max(1.0) as usize;
            let h = span / substeps as f64;
            for _ in 0..substeps {
                rk.step(&mut z, h);
            }
            enforce_positivity(&mut z, params.n, w[1])?;
        }
        out.push(FluidState::from_flat(&z));
    }
    Ok(out)
}

/// Integrates in unit time blocks until two states one unit apart are within
/// `tol` of each other, and returns the later one.
pub fn find_fixed_point_by_integration(
    params: &ModelParams,
    v0: &FluidState,
    tol: f64,
    dtau: f64,
    max_time: f64,
) -> Result<FluidState, FluidError> {
    params.validate()?;
    v0.check_levels(params.n)?;
    check_step(max_time, dtau)?;
    if !v0.is_strictly_positive() {
        return Err(FluidError::InvalidArgument(
            "initial state must be strictly positive".into(),
        ));
    }
    if dtau > 1.0 {
        return Err(FluidError::InvalidArgument(format!(
            "step {dtau} exceeds the unit comparison interval"
        )));
    }

    let n = params.n;
    let substeps = (1.0 / dtau * (1.0 - 1e-12)).ceil() as usize;
    let h = 1.0 / substeps as f64;
    let mut rk = Rk4::new(params);
    let mut z = v0.to_flat();
    let mut prev = z.clone();
    let mut scratch = vec![0.0; z.len()];

    // Every mode decays at least at rate alpha_q + alpha_m, so a start whose
    // drift is below tol times that rate is already within tol of equilibrium.
    rhs_flat(params, &z, &mut scratch);
    if scratch.iter().all(|d| d.abs() < tol * params.drain()) {
        return Ok(v0.clone());
    }

    let mut time = 0.0;
    let mut gap = f64::INFINITY;
    while time + 1.0 <= max_time {
        for _ in 0..substeps {
            rk.step(&mut z, h);
        }
        time += 1.0;
        enforce_positivity(&mut z, n, time)?;
        gap = z
            .iter()
            .zip(&prev)
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt();
        if gap < tol {
            return Ok(FluidState::from_flat(&z));
        }
        prev.copy_from_slice(&z);
    }
    Err(FluidError::NoConvergence {
        time,
        distance: gap,
    })
}
