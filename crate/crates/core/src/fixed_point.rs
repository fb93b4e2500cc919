//! Stationary points of the fluid system.
//!
//! The balance equations are piecewise linear in each unknown. Fixing the
//! seller densities, the buyer equations can be solved level by level from
//! the bottom of the book up; fixing the buyers, the seller equations solve
//! from the top down. Alternating the two sweeps, starting from an empty buyer
//! side, produces buyer iterates that increase and seller iterates that
//! decrease monotonically towards the unique fixed point.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{FluidState, ModelError, ModelParams};

pub const DEFAULT_TOL: f64 = 1e-12;
pub const DEFAULT_MAX_ITER: usize = 1_000_000;
pub const DEFAULT_TIE_TOL: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum FixedPointError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(
        "fixed-point recursion did not converge in {iterations} iterations (last change {last_change:e}, residual {residual:e})"
    )]
    NoConvergence {
        iterations: usize,
        last_change: f64,
        residual: f64,
        best: FluidState,
    },
    #[error("ordering violated at level {level}: {detail}")]
    OrderingViolation { level: usize, detail: String },
}

/// Which side dominates at each level of the fixed point. Levels are 1-based.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum Regime {
    AllBuyDominant,
    AllSellDominant,
    /// Buyers dominate on levels `1..=ell`, sellers above.
    Crossing(usize),
    /// Levels where buyer and seller densities tie within tolerance.
    Degenerate(Vec<usize>),
}

impl std::fmt::Display for Regime {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Regime::AllBuyDominant => write!(f, "AllBuyDominant"),
            Regime::AllSellDominant => write!(f, "AllSellDominant"),
            Regime::Crossing(ell) => write!(f, "Crossing({ell})"),
            Regime::Degenerate(levels) => {
                let list: Vec<String> = levels.iter().map(|l| l.to_string()).collect();
                write!(f, "Degenerate({})", list.join(","))
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FixedPointResult {
    pub x_star: Vec<f64>,
    pub y_star: Vec<f64>,
    pub residual: f64,
    pub iterations: usize,
    pub regime: Regime,
    /// `(x^(k), y^(k))` for `k = 0, 1, ...` when requested.
    pub iterate_history: Option<Vec<(Vec<f64>, Vec<f64>)>>,
}

impl FixedPointResult {
    pub fn state(&self) -> FluidState {
        FluidState {
            x: self.x_star.clone(),
            y: self.y_star.clone(),
        }
    }
}

/// Unique `z >= 0` with `a*z + g*min(z, c) = r`.
///
/// The left side equals `min((a+g)*z, a*z + g*c)`, so the root is the larger
/// of the two branch roots. Taking the `max` keeps the result monotone in `c`
/// and `r` under floating-point rounding.
#[inline]
pub fn solve_piecewise_scalar(a: f64, g: f64, c: f64, r: f64) -> f64 {
    debug_assert!(a > 0.0 && g > 0.0 && c >= 0.0 && r >= 0.0);
    let below = r / (a + g);
    let above = (r - g * c) / a;
    below.max(above)
}

/// `x^(0) = 0` and the seller densities that balance against an empty buyer
/// side.
pub fn initial_iterate(params: &ModelParams) -> (Vec<f64>, Vec<f64>) {
    let n = params.n;
    let drain = params.drain();
    let x0 = vec![0.0; n];
    let mut y0 = vec![0.0; n];
    y0[n - 1] = params.lambda_s / drain;
    for i in (0..n - 1).rev() {
        y0[i] = params.alpha_m * y0[i + 1] / drain;
    }
    (x0, y0)
}

/// One forward buyer sweep against `y_prev`, then one backward seller sweep
/// against the fresh buyer values.
pub fn recursion_step(params: &ModelParams, y_prev: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let mut x = vec![0.0; params.n];
    let mut y = vec![0.0; params.n];
    recursion_step_into(params, y_prev, &mut x, &mut y);
    (x, y)
}

fn recursion_step_into(params: &ModelParams, y_prev: &[f64], x: &mut [f64], y: &mut [f64]) {
    let n = params.n;
    let a = params.drain();
    let g = params.gamma;
    x[0] = solve_piecewise_scalar(a, g, y_prev[0], params.lambda_b);
    for i in 1..n {
        x[i] = solve_piecewise_scalar(a, g, y_prev[i], params.alpha_m * x[i - 1]);
    }
    y[n - 1] = solve_piecewise_scalar(a, g, x[n - 1], params.lambda_s);
    for i in (0..n - 1).rev() {
        y[i] = solve_piecewise_scalar(a, g, x[i], params.alpha_m * y[i + 1]);
    }
}

/// Max-norm defect of the balance equations at `(x, y)`.
pub fn residual(x: &[f64], y: &[f64], params: &ModelParams) -> Result<f64, ModelError> {
    let n = params.n;
    for len in [x.len(), y.len()] {
        if len != n {
            return Err(ModelError::DimensionMismatch {
                expected: n,
                found: len,
            });
        }
    }
    Ok(residual_unchecked(x, y, params))
}

fn residual_unchecked(x: &[f64], y: &[f64], params: &ModelParams) -> f64 {
    let n = params.n;
    let a = params.drain();
    let g = params.gamma;
    let mut worst: f64 = 0.0;
    for i in 0..n {
        let trade = g * x[i].min(y[i]);
        let inflow_x = if i == 0 {
            params.lambda_b
        } else {
            params.alpha_m * x[i - 1]
        };
        let inflow_y = if i == n - 1 {
            params.lambda_s
        } else {
            params.alpha_m * y[i + 1]
        };
        worst = worst
            .max((inflow_x - a * x[i] - trade).abs())
            .max((inflow_y - a * y[i] - trade).abs());
    }
    worst
}

/// Labels the dominance pattern of a fixed point, after checking that the
/// buyer densities decrease and the seller densities increase with the level.
pub fn classify_regime(x: &[f64], y: &[f64], tie_tol: f64) -> Result<Regime, FixedPointError> {
    if x.len() != y.len() {
        return Err(ModelError::DimensionMismatch {
            expected: x.len(),
            found: y.len(),
        }
        .into());
    }
    for i in 1..x.len() {
        if x[i] > x[i - 1] + tie_tol {
            return Err(FixedPointError::OrderingViolation {
                level: i + 1,
                detail: format!("buyer density rises from {} to {}", x[i - 1], x[i]),
            });
        }
        if y[i] < y[i - 1] - tie_tol {
            return Err(FixedPointError::OrderingViolation {
                level: i + 1,
                detail: format!("seller density falls from {} to {}", y[i - 1], y[i]),
            });
        }
    }

    let ties: Vec<usize> = (0..x.len())
        .filter(|&i| (x[i] - y[i]).abs() <= tie_tol)
        .map(|i| i + 1)
        .collect();
    if !ties.is_empty() {
        return Ok(Regime::Degenerate(ties));
    }
    let ell = x.iter().zip(y).take_while(|(xi, yi)| xi > yi).count();
    // x - y is non-increasing when the ordering holds, so once sellers
    // dominate they dominate on every higher level.
    if let Some(i) = (ell..x.len()).find(|&i| x[i] >= y[i]) {
        return Err(FixedPointError::OrderingViolation {
            level: i + 1,
            detail: "buyers dominate again above a seller-dominant level".into(),
        });
    }
    if ell == x.len() {
        return Ok(Regime::AllBuyDominant);
    }
    if ell == 0 {
        return Ok(Regime::AllSellDominant);
    }
    Ok(Regime::Crossing(ell))
}

/// Configurable driver for the monotone recursion.
#[derive(Debug, Clone, Copy)]
pub struct FixedPointSolver {
    /// Stop once the max-norm change between iterates drops below this.
    pub tol: f64,
    pub max_iter: usize,
    pub tie_tol: f64,
    pub record_history: bool,
}

impl Default for FixedPointSolver {
    fn default() -> Self {
        Self {
            tol: DEFAULT_TOL,
            max_iter: DEFAULT_MAX_ITER,
            tie_tol: DEFAULT_TIE_TOL,
            record_history: false,
        }
    }
}

impl FixedPointSolver {
    pub fn new(tol: f64, max_iter: usize) -> Self {
        Self {
            tol,
            max_iter,
            ..Self::default()
        }
    }

    pub fn with_history(mut self) -> Self {
        self.record_history = true;
        self
    }

    pub fn solve(&self, params: &ModelParams) -> Result<FixedPointResult, FixedPointError> {
        params.validate()?;
        let (mut x, mut y) = initial_iterate(params);
        let mut history = self.record_history.then(|| vec![(x.clone(), y.clone())]);
        let mut next_x = vec![0.0; params.n];
        let mut next_y = vec![0.0; params.n];
        let mut last_change = f64::INFINITY;

        for k in 1..=self.max_iter {
            recursion_step_into(params, &y, &mut next_x, &mut next_y);
            debug_assert!(within_uniform_bound(params, &next_x));
            last_change = max_abs_diff(&x, &next_x).max(max_abs_diff(&y, &next_y));
            std::mem::swap(&mut x, &mut next_x);
            std::mem::swap(&mut y, &mut next_y);
            if let Some(h) = history.as_mut() {
                h.push((x.clone(), y.clone()));
            }

            if last_change < self.tol {
                let res = residual_unchecked(&x, &y, params);
                if res < 10.0 * self.tol {
                    let regime = classify_regime(&x, &y, self.tie_tol)?;
                    return Ok(FixedPointResult {
                        x_star: x,
                        y_star: y,
                        residual: res,
                        iterations: k,
                        regime,
                        iterate_history: history,
                    });
                }
                // An exactly repeating iterate cannot improve any further.
                if last_change == 0.0 {
                    break;
                }
            }
        }

        Err(FixedPointError::NoConvergence {
            iterations: self.max_iter,
            last_change,
            residual: residual_unchecked(&x, &y, params),
            best: FluidState { x, y },
        })
    }
}

pub fn solve_fixed_point(
    params: &ModelParams,
    tol: f64,
    max_iter: usize,
) -> Result<FixedPointResult, FixedPointError> {
    FixedPointSolver::new(tol, max_iter).solve(params)
}

/// `x_1 <= lambda_b / (alpha_q + alpha_m)` and
/// `x_i <= alpha_m / (alpha_q + alpha_m) * x_{i-1}`.
pub fn within_uniform_bound(params: &ModelParams, x: &[f64]) -> bool {
    let a = params.drain();
    if x[0] > params.lambda_b / a {
        return false;
    }
    x.windows(2)
        .all(|w| w[1] <= params.alpha_m * w[0] / a)
}

fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(u, v)| (u - v).abs())
        .fold(0.0, f64::max)
}
