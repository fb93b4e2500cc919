//! Exact simulation of the discrete-time order book chain.
//!
//! One step, for every level in ascending order:
//!
//! 1. `n ~ Binomial(min(b_i, s_i), p_t)` pairs trade and leave the book.
//! 2. Each remaining seller quits (`p_q`), moves one level down (`p_m`) or
//!    stays, drawn as a multinomial via two conditional binomials.
//! 3. Each remaining buyer quits (`p_q`), moves one level up (`p_m`) or stays.
//!
//! After all levels, `Poisson(lam_b)` buyers join level 1 and
//! `Poisson(lam_s)` sellers join level `N`. A buyer moving up from level `N`
//! or a seller moving down from level 1 leaves the market.
//!
//! The draw order above is fixed: trade, seller quits, seller moves, buyer
//! quits, buyer moves for level 1, then level 2, and so on, then buyer
//! arrivals, then seller arrivals. Every step makes exactly `5N + 2` sampler
//! calls, including calls with `n = 0`.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Binomial, Distribution, Poisson};
use serde::Serialize;

use crate::model::{
    rescale_params, rescale_state, DiscreteParams, FluidState, LatticeState, ModelError,
    ModelParams, ScalingConfig,
};

/// Source of the binomial and Poisson variates a step consumes.
pub trait Sampler {
    fn binomial(&mut self, n: u64, p: f64) -> u64;
    fn poisson(&mut self, mean: f64) -> u64;
}

/// Deterministic random stream: ChaCha8 keyed by `master_seed`, with the
/// 64-bit ChaCha stream id set to `stream_index`.
#[derive(Debug, Clone)]
pub struct RngStream {
    rng: ChaCha8Rng,
    master_seed: u64,
    stream_index: u64,
}

impl RngStream {
    pub fn new(master_seed: u64, stream_index: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(master_seed);
        rng.set_stream(stream_index);
        Self {
            rng,
            master_seed,
            stream_index,
        }
    }

    pub fn master_seed(&self) -> u64 {
        self.master_seed
    }

    pub fn stream_index(&self) -> u64 {
        self.stream_index
    }
}

impl Sampler for RngStream {
    fn binomial(&mut self, n: u64, p: f64) -> u64 {
        if n == 0 || p <= 0.0 {
            return 0;
        }
        if p >= 1.0 {
            return n;
        }
        Binomial::new(n, p)
            .expect("p checked to lie in (0, 1)")
            .sample(&mut self.rng)
    }

    fn poisson(&mut self, mean: f64) -> u64 {
        if mean <= 0.0 {
            return 0;
        }
        Poisson::new(mean)
            .expect("positive finite mean")
            .sample(&mut self.rng) as u64
    }
}

/// Zero-variance stand-in for [`RngStream`]: every draw returns its mean,
/// rounded, with the rounding error carried over to the same draw slot of
/// the next step. Under it the chain follows an explicit Euler scheme of the
/// fluid equations with step `delta / L`, up to `O(1)` count errors.
#[derive(Debug, Clone)]
pub struct MeanFieldSampler {
    carry: Vec<f64>,
    slot: usize,
}

impl MeanFieldSampler {
    pub fn new(levels: usize) -> Self {
        Self {
            carry: vec![0.0; 5 * levels + 2],
            slot: 0,
        }
    }

    fn round(&mut self, mean: f64, cap: Option<u64>) -> u64 {
        let target = mean + self.carry[self.slot];
        let mut out = (target + 0.5).floor().max(0.0);
        if let Some(cap) = cap {
            out = out.min(cap as f64);
        }
        self.carry[self.slot] = target - out;
        self.slot = (self.slot + 1) % self.carry.len();
        out as u64
    }
}

impl Sampler for MeanFieldSampler {
    fn binomial(&mut self, n: u64, p: f64) -> u64 {
        self.round(n as f64 * p, Some(n))
    }

    fn poisson(&mut self, mean: f64) -> u64 {
        self.round(mean, None)
    }
}

/// Event counts of one step. Level `i` is index `i - 1`.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize)]
pub struct StepBreakdown {
    pub trades: Vec<u64>,
    pub buyer_quits: Vec<u64>,
    /// Buyers leaving level `i` upwards; at level `N` they exit.
    pub buyer_moves: Vec<u64>,
    pub seller_quits: Vec<u64>,
    /// Sellers leaving level `i` downwards; at level 1 they exit.
    pub seller_moves: Vec<u64>,
    pub buyer_arrivals: u64,
    pub seller_arrivals: u64,
}

impl StepBreakdown {
    pub fn zeros(n: usize) -> Self {
        Self {
            trades: vec![0; n],
            buyer_quits: vec![0; n],
            buyer_moves: vec![0; n],
            seller_quits: vec![0; n],
            seller_moves: vec![0; n],
            buyer_arrivals: 0,
            seller_arrivals: 0,
        }
    }
}

/// Event counts summed over a run.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize)]
pub struct BreakdownTotals {
    pub steps: u64,
    pub trades: u64,
    pub buyer_quits: u64,
    pub buyer_moves: u64,
    pub seller_quits: u64,
    pub seller_moves: u64,
    /// Buyers that moved up from level `N` and left.
    pub buyer_boundary_exits: u64,
    /// Sellers that moved down from level 1 and left.
    pub seller_boundary_exits: u64,
    pub buyer_arrivals: u64,
    pub seller_arrivals: u64,
}

impl BreakdownTotals {
    fn add(&mut self, b: &StepBreakdown) {
        let n = b.trades.len();
        self.steps += 1;
        self.trades += b.trades.iter().sum::<u64>();
        self.buyer_quits += b.buyer_quits.iter().sum::<u64>();
        self.buyer_moves += b.buyer_moves.iter().sum::<u64>();
        self.seller_quits += b.seller_quits.iter().sum::<u64>();
        self.seller_moves += b.seller_moves.iter().sum::<u64>();
        self.buyer_boundary_exits += b.buyer_moves[n - 1];
        self.seller_boundary_exits += b.seller_moves[0];
        self.buyer_arrivals += b.buyer_arrivals;
        self.seller_arrivals += b.seller_arrivals;
    }
}

/// Splits `pool` traders into (quit, move, stay) with probabilities
/// `(p_q, p_m, 1 - p_q - p_m)`.
#[inline]
fn thin<S: Sampler>(sampler: &mut S, pool: u64, dp: &DiscreteParams) -> (u64, u64) {
    let quits = sampler.binomial(pool, dp.p_q);
    let moves = sampler.binomial(pool - quits, dp.p_m / (1.0 - dp.p_q));
    (quits, moves)
}

/// Advances `state` by one step in place, writing the event counts into
/// `breakdown`.
pub fn step_in_place<S: Sampler>(
    state: &mut LatticeState,
    dp: &DiscreteParams,
    sampler: &mut S,
    breakdown: &mut StepBreakdown,
) {
    let n = state.levels();
    if breakdown.trades.len() != n {
        *breakdown = StepBreakdown::zeros(n);
    }

    for i in 0..n {
        let t = sampler.binomial(state.b[i].min(state.s[i]), dp.p_t);
        let (sq, sm) = thin(sampler, state.s[i] - t, dp);
        let (bq, bm) = thin(sampler, state.b[i] - t, dp);
        breakdown.trades[i] = t;
        breakdown.seller_quits[i] = sq;
        breakdown.seller_moves[i] = sm;
        breakdown.buyer_quits[i] = bq;
        breakdown.buyer_moves[i] = bm;
    }
    breakdown.buyer_arrivals = sampler.poisson(dp.lam_b);
    breakdown.seller_arrivals = sampler.poisson(dp.lam_s);

    for i in 0..n {
        let t = breakdown.trades[i];
        state.b[i] -= t + breakdown.buyer_quits[i] + breakdown.buyer_moves[i];
        state.s[i] -= t + breakdown.seller_quits[i] + breakdown.seller_moves[i];
    }
    for i in 1..n {
        state.b[i] += breakdown.buyer_moves[i - 1];
        state.s[i - 1] += breakdown.seller_moves[i];
    }
    state.b[0] += breakdown.buyer_arrivals;
    state.s[n - 1] += breakdown.seller_arrivals;
}

pub fn step<S: Sampler>(
    state: &LatticeState,
    dp: &DiscreteParams,
    sampler: &mut S,
) -> (LatticeState, StepBreakdown) {
    let mut next = state.clone();
    let mut breakdown = StepBreakdown::zeros(state.levels());
    step_in_place(&mut next, dp, sampler, &mut breakdown);
    (next, breakdown)
}

/// A running chain that owns its state, sampler and accumulated totals.
#[derive(Debug, Clone)]
pub struct Chain<S> {
    state: LatticeState,
    dp: DiscreteParams,
    sampler: S,
    last: StepBreakdown,
    totals: BreakdownTotals,
}

impl<S: Sampler> Chain<S> {
    pub fn new(state0: LatticeState, dp: DiscreteParams, sampler: S) -> Self {
        let n = state0.levels();
        Self {
            state: state0,
            dp,
            sampler,
            last: StepBreakdown::zeros(n),
            totals: BreakdownTotals::default(),
        }
    }

    pub fn advance(&mut self) -> &StepBreakdown {
        step_in_place(&mut self.state, &self.dp, &mut self.sampler, &mut self.last);
        self.totals.add(&self.last);
        &self.last
    }

    pub fn advance_by(&mut self, steps: u64) {
        for _ in 0..steps {
            self.advance();
        }
    }

    pub fn state(&self) -> &LatticeState {
        &self.state
    }

    pub fn steps_taken(&self) -> u64 {
        self.totals.steps
    }

    pub fn totals(&self) -> &BreakdownTotals {
        &self.totals
    }

    pub fn into_state(self) -> LatticeState {
        self.state
    }
}

/// Recorded states with their times. Times are strictly increasing.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory<T> {
    pub times: Vec<f64>,
    pub states: Vec<T>,
}

impl<T> Trajectory<T> {
    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }
}

/// Runs `steps` steps from `state0`, recording the raw state at step 0, every
/// `sample_every` steps, and at the final step.
pub fn simulate<S: Sampler>(
    state0: &LatticeState,
    dp: &DiscreteParams,
    steps: u64,
    sampler: &mut S,
    sample_every: u64,
) -> Trajectory<LatticeState> {
    assert!(sample_every > 0, "sample_every must be positive");
    let mut state = state0.clone();
    let mut breakdown = StepBreakdown::zeros(state0.levels());
    let mut traj = Trajectory {
        times: vec![0.0],
        states: vec![state0.clone()],
    };
    for t in 1..=steps {
        step_in_place(&mut state, dp, sampler, &mut breakdown);
        if t % sample_every == 0 || t == steps {
            traj.times.push(t as f64);
            traj.states.push(state.clone());
        }
    }
    traj
}

/// `0, dt, 2 dt, ...` up to and including `horizon`. The last point is
/// `horizon` itself even when it is not a multiple of `dt`.
pub fn time_grid(horizon: f64, dt: f64) -> Vec<f64> {
    assert!(dt > 0.0 && horizon >= 0.0);
    let mut grid = vec![0.0];
    let mut k = 1u64;
    loop {
        let t = k as f64 * dt;
        if t >= horizon * (1.0 - 1e-12) {
            break;
        }
        grid.push(t);
        k += 1;
    }
    if horizon > 0.0 {
        grid.push(horizon);
    }
    grid
}

/// A rescaled run: the sampled trajectory plus the event totals.
#[derive(Debug, Clone)]
pub struct RescaledRun {
    pub trajectory: Trajectory<FluidState>,
    pub totals: BreakdownTotals,
}

/// Starts the chain at `round(L * v0)` and samples `U(floor(tau L / delta)) / L`
/// on the grid `0, sample_dtau, ..., horizon`.
pub fn rescaled_run<S: Sampler>(
    params: &ModelParams,
    scaling: &ScalingConfig,
    v0: &FluidState,
    horizon: f64,
    sample_dtau: f64,
    sampler: S,
) -> Result<RescaledRun, ModelError> {
    let dp = rescale_params(params, scaling)?;
    v0.check_levels(params.n)?;
    if !(horizon > 0.0) || !(sample_dtau > 0.0) {
        return Err(ModelError::InvalidState(
            "horizon and sample_dtau must be positive".into(),
        ));
    }
    let u0 = LatticeState::from_fluid(v0, scaling.scale);
    let mut chain = Chain::new(u0, dp, sampler);
    let trajectory = sample_on_grid(&mut chain, scaling, &time_grid(horizon, sample_dtau));
    Ok(RescaledRun {
        trajectory,
        totals: *chain.totals(),
    })
}

/// Advances `chain` along `grid` (rescaled times, non-decreasing, measured
/// from the chain's current step) and records `U / L` at each grid time.
pub fn sample_on_grid<S: Sampler>(
    chain: &mut Chain<S>,
    scaling: &ScalingConfig,
    grid: &[f64],
) -> Trajectory<FluidState> {
    let origin = chain.steps_taken();
    let mut trajectory = Trajectory {
        times: Vec::with_capacity(grid.len()),
        states: Vec::with_capacity(grid.len()),
    };
    for &tau in grid {
        let target = origin + scaling.steps_until(tau);
        chain.advance_by(target.saturating_sub(chain.steps_taken()));
        trajectory.times.push(tau);
        trajectory.states.push(rescale_state(chain.state(), scaling.scale));
    }
    trajectory
}

pub fn rescaled_trajectory<S: Sampler>(
    params: &ModelParams,
    scaling: &ScalingConfig,
    v0: &FluidState,
    horizon: f64,
    sample_dtau: f64,
    sampler: S,
) -> Result<Trajectory<FluidState>, ModelError> {
    rescaled_run(params, scaling, v0, horizon, sample_dtau, sampler).map(|r| r.trajectory)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn dp() -> DiscreteParams {
        DiscreteParams {
            p_t: 0.3,
            p_q: 0.1,
            p_m: 0.2,
            lam_b: 2.5,
            lam_s: 1.5,
        }
    }

    /// Replays the flow identity level by level.
    fn check_flow(before: &LatticeState, after: &LatticeState, bd: &StepBreakdown) {
        let n = before.levels();
        for i in 0..n {
            assert!(bd.trades[i] <= before.b[i].min(before.s[i]));
            assert!(bd.buyer_quits[i] + bd.buyer_moves[i] <= before.b[i] - bd.trades[i]);
            assert!(bd.seller_quits[i] + bd.seller_moves[i] <= before.s[i] - bd.trades[i]);
            let b_in = if i == 0 { bd.buyer_arrivals } else { bd.buyer_moves[i - 1] };
            let s_in = if i == n - 1 { bd.seller_arrivals } else { bd.seller_moves[i + 1] };
            assert_eq!(
                after.b[i] as i128,
                before.b[i] as i128 - (bd.trades[i] + bd.buyer_quits[i] + bd.buyer_moves[i]) as i128
                    + b_in as i128
            );
            assert_eq!(
                after.s[i] as i128,
                before.s[i] as i128 - (bd.trades[i] + bd.seller_quits[i] + bd.seller_moves[i]) as i128
                    + s_in as i128
            );
        }
    }

    #[test]
    fn empty_side_never_trades() {
        let mut rng = RngStream::new(1, 0);
        let u = LatticeState::new(vec![10, 0, 7], vec![0, 5, 0]).unwrap();
        for _ in 0..200 {
            let (next, bd) = step(&u, &dp(), &mut rng);
            assert_eq!(bd.trades, vec![0, 0, 0]);
            check_flow(&u, &next, &bd);
        }
    }

    #[test]
    fn flow_identity_on_random_steps() {
        let mut rng = RngStream::new(7, 3);
        let mut u = LatticeState::new(vec![50, 3, 0, 120], vec![0, 40, 9, 8]).unwrap();
        for _ in 0..1000 {
            let (next, bd) = step(&u, &dp(), &mut rng);
            check_flow(&u, &next, &bd);
            u = next;
        }
    }

    #[test]
    fn boundary_movers_leave() {
        let mut rng = RngStream::new(11, 0);
        let u = LatticeState::new(vec![0, 1000], vec![1000, 0]).unwrap();
        let (next, bd) = step(&u, &dp(), &mut rng);
        // No buyer can reach level 1 from above, no seller can reach level 2.
        assert_eq!(next.b[0], bd.buyer_arrivals);
        assert_eq!(next.s[1], bd.seller_arrivals);
        assert!(bd.buyer_moves[1] > 0 && bd.seller_moves[0] > 0);
        assert_eq!(
            next.total_buyers(),
            1000 - bd.buyer_quits[1] - bd.buyer_moves[1] + bd.buyer_arrivals
        );
    }

    #[test]
    fn simulate_zero_steps() {
        let u = LatticeState::new(vec![1, 2], vec![3, 4]).unwrap();
        let traj = simulate(&u, &dp(), 0, &mut RngStream::new(0, 0), 5);
        assert_eq!(traj.times, vec![0.0]);
        assert_eq!(traj.states, vec![u]);
    }

    #[test]
    fn simulate_records_final_state() {
        let u = LatticeState::new(vec![1, 2], vec![3, 4]).unwrap();
        let traj = simulate(&u, &dp(), 12, &mut RngStream::new(0, 0), 5);
        assert_eq!(traj.times, vec![0.0, 5.0, 10.0, 12.0]);
    }

    #[test]
    fn simulate_is_deterministic() {
        let u = LatticeState::new(vec![30, 2, 9], vec![3, 4, 50]).unwrap();
        let a = simulate(&u, &dp(), 500, &mut RngStream::new(42, 9), 1);
        let b = simulate(&u, &dp(), 500, &mut RngStream::new(42, 9), 1);
        let c = simulate(&u, &dp(), 500, &mut RngStream::new(42, 10), 1);
        assert_eq!(a, b);
        assert_ne!(a, c);
    }

    #[test]
    fn seller_total_bookkeeping() {
        let mut rng = RngStream::new(5, 5);
        let mut u = LatticeState::new(vec![20, 20, 20], vec![20, 20, 20]).unwrap();
        for _ in 0..500 {
            let (next, bd) = step(&u, &dp(), &mut rng);
            let expected = u.total_sellers() - bd.trades.iter().sum::<u64>()
                - bd.seller_quits.iter().sum::<u64>()
                - bd.seller_moves[0]
                + bd.seller_arrivals;
            assert_eq!(next.total_sellers(), expected);
            u = next;
        }
    }

    #[test]
    fn trade_mean_matches_binomial() {
        let d = dp();
        let u = LatticeState::new(vec![5], vec![3]).unwrap();
        let mut rng = RngStream::new(2024, 0);
        let reps = 100_000;
        let mut sum = 0.0;
        for _ in 0..reps {
            let (_, bd) = step(&u, &d, &mut rng);
            sum += bd.trades[0] as f64;
        }
        let mean = sum / reps as f64;
        let se = (3.0 * d.p_t * (1.0 - d.p_t) / reps as f64).sqrt();
        assert!((mean - 3.0 * d.p_t).abs() < 4.0 * se, "mean {mean}");
    }

    #[test]
    fn arrival_mean_matches_poisson() {
        let d = dp();
        let u = LatticeState::zeros(2);
        let mut rng = RngStream::new(2025, 1);
        let reps = 100_000;
        let mut sum = 0.0;
        for _ in 0..reps {
            let (_, bd) = step(&u, &d, &mut rng);
            sum += bd.buyer_arrivals as f64;
        }
        let mean = sum / reps as f64;
        let se = (d.lam_b / reps as f64).sqrt();
        assert!((mean - d.lam_b).abs() < 4.0 * se, "mean {mean}");
    }

    #[test]
    fn thinning_frequencies() {
        let d = dp();
        let u = LatticeState::new(vec![0, 200], vec![0, 0]).unwrap();
        let mut rng = RngStream::new(99, 0);
        let reps = 20_000;
        let (mut q, mut m) = (0.0, 0.0);
        for _ in 0..reps {
            let (_, bd) = step(&u, &d, &mut rng);
            q += bd.buyer_quits[1] as f64;
            m += bd.buyer_moves[1] as f64;
        }
        let total = 200.0 * reps as f64;
        let se_q = (d.p_q * (1.0 - d.p_q) / total).sqrt();
        let se_m = (d.p_m * (1.0 - d.p_m) / total).sqrt();
        assert!((q / total - d.p_q).abs() < 4.0 * se_q);
        assert!((m / total - d.p_m).abs() < 4.0 * se_m);
    }

    #[test]
    fn mean_field_sampler_carries_rounding() {
        let mut s = MeanFieldSampler::new(0);
        // Two slots alternate; each accumulates its own remainder.
        let draws: Vec<u64> = (0..8).map(|_| s.poisson(0.25)).collect();
        assert_eq!(draws.iter().sum::<u64>(), 2);
        assert_eq!(s.binomial(0, 0.5), 0);
    }

    #[test]
    fn time_grid_includes_horizon() {
        assert_eq!(time_grid(1.0, 0.25), vec![0.0, 0.25, 0.5, 0.75, 1.0]);
        assert_eq!(time_grid(1.0, 0.4), vec![0.0, 0.4, 0.8, 1.0]);
        assert_eq!(time_grid(10.0, 0.01).len(), 1001);
    }

    #[test]
    fn rescaled_trajectory_short_horizon() {
        let p = ModelParams::new(2, 1.0, 1.0, 1.0, 2.0, 1.0).unwrap();
        let sc = ScalingConfig::new(100.0);
        let v0 = FluidState::new(vec![0.123, 0.456], vec![0.789, 0.001]).unwrap();
        let traj = rescaled_trajectory(&p, &sc, &v0, 0.005, 0.001, RngStream::new(1, 1)).unwrap();
        // floor(0.005 * 100) = 0 steps: every sample is the rounded start.
        let start = rescale_state(&LatticeState::from_fluid(&v0, 100.0), 100.0);
        assert!(traj.states.iter().all(|s| *s == start));
        for (a, b) in start.x.iter().chain(&start.y).zip(v0.x.iter().chain(&v0.y)) {
            assert!((a - b).abs() <= 0.5 / 100.0 + 1e-15);
        }
    }

    #[test]
    fn rescaled_trajectory_steps_match_grid() {
        let p = ModelParams::new(1, 1.0, 0.5, 0.5, 2.0, 1.0).unwrap();
        let sc = ScalingConfig::new(50.0);
        let v0 = FluidState::new(vec![1.5], vec![0.5]).unwrap();
        let run = rescaled_run(&p, &sc, &v0, 2.0, 0.1, RngStream::new(3, 0)).unwrap();
        assert_eq!(run.trajectory.len(), 21);
        assert_eq!(run.totals.steps, 100);
    }
}
