//! Slotted stochastic simulation.
//!
//! Each slot: every present user draws a fresh channel state, the policy
//! picks one user, that user leaves with probability `mu_{k,n}`, then the
//! slot's arrivals join. Users within a class are exchangeable, so only
//! per-class counts are tracked.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Binomial, Distribution, Poisson};
use rayon::prelude::*;

use crate::model::{ArrivalKind, SystemConfig};
use crate::policy::{Policy, ServeDecision};

/// Default divergence cap on the total number of users.
pub const DEFAULT_DIVERGENCE_CAP: u64 = 10_000_000;
/// Default sampling step of fluid-scaled trajectories.
pub const DEFAULT_SAMPLE_DT: f64 = 0.01;

/// Independent RNG stream `stream` under the master `seed`.
pub fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Users present in each channel state during one slot.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Occupancy {
    counts: Vec<Vec<u64>>,
}

impl Occupancy {
    pub fn empty(cfg: &SystemConfig) -> Self {
        Self {
            counts: cfg
                .classes
                .iter()
                .map(|c| vec![0; c.num_states()])
                .collect(),
        }
    }

    pub fn counts(&self, k: usize) -> &[u64] {
        &self.counts[k]
    }

    pub fn add(&mut self, k: usize, n: usize, users: u64) {
        self.counts[k][n] += users;
    }

    pub fn total(&self, k: usize) -> u64 {
        self.counts[k].iter().sum()
    }

    pub fn totals(&self) -> Vec<u64> {
        (0..self.counts.len()).map(|k| self.total(k)).collect()
    }
}

/// Draws the channel state of every present user (one multinomial per class).
pub fn sample_occupancy<R: Rng + ?Sized>(cfg: &SystemConfig, x: &[u64], rng: &mut R) -> Occupancy {
    let mut occ = Occupancy::empty(cfg);
    for (k, c) in cfg.classes.iter().enumerate() {
        let mut left = x[k];
        let mut mass = 1.0;
        for n in c.support() {
            if left == 0 {
                break;
            }
            let p = (c.q[n] / mass).min(1.0);
            let m = if p >= 1.0 {
                left
            } else {
                Binomial::new(left, p).expect("valid binomial").sample(rng)
            };
            occ.counts[k][n] = m;
            left -= m;
            mass -= c.q[n];
        }
        // float leftovers land in the last support state
        if left > 0 {
            let last = c.support().last().expect("nonempty support");
            occ.counts[k][last] += left;
        }
    }
    occ
}

/// What happened in one slot.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SlotEvent {
    pub served: ServeDecision,
    pub departed: bool,
    pub arrivals: Vec<u64>,
}

#[derive(Debug, Clone)]
enum ArrivalLaw {
    None,
    Bernoulli(f64),
    Poisson(Poisson<f64>),
}

impl ArrivalLaw {
    fn new(kind: ArrivalKind, lambda: f64) -> Self {
        if lambda <= 0.0 {
            return ArrivalLaw::None;
        }
        match kind {
            ArrivalKind::Bernoulli => ArrivalLaw::Bernoulli(lambda),
            ArrivalKind::PoissonCounts => {
                ArrivalLaw::Poisson(Poisson::new(lambda).expect("positive rate"))
            }
        }
    }

    fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> u64 {
        match self {
            ArrivalLaw::None => 0,
            ArrivalLaw::Bernoulli(p) => u64::from(rng.random::<f64>() < *p),
            ArrivalLaw::Poisson(d) => d.sample(rng) as u64,
        }
    }
}

/// Per-class sampling tables in serving-preference order.
#[derive(Debug, Clone)]
struct ClassTable {
    /// (level, state, q mass of the states after this one)
    order: Vec<(usize, usize, f64)>,
}

/// Slot-by-slot engine. Saturated classes always have one user in every
/// reachable state and their counts are never touched.
#[derive(Debug, Clone)]
pub struct Simulator<'a> {
    cfg: &'a SystemConfig,
    policy: &'a Policy,
    tables: Vec<ClassTable>,
    arrivals: Vec<ArrivalLaw>,
    saturated: Vec<bool>,
    rng: ChaCha8Rng,
    tops: Vec<Option<(usize, usize)>>,
    tied: Vec<usize>,
}

/// Outcome of one slot in the allocation-free path.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SlotOutcome {
    pub served: ServeDecision,
    pub departed: bool,
}

impl<'a> Simulator<'a> {
    pub fn new(cfg: &'a SystemConfig, policy: &'a Policy, rng: ChaCha8Rng) -> Self {
        let tables = (0..cfg.num_classes())
            .map(|k| {
                let c = &cfg.classes[k];
                let flat: Vec<(usize, usize)> = policy
                    .groups(k)
                    .iter()
                    .flat_map(|g| g.states.iter().map(move |&n| (g.level, n)))
                    .collect();
                let mut order = Vec::with_capacity(flat.len());
                let mut rest: f64 = flat.iter().map(|&(_, n)| c.q[n]).sum();
                for (i, &(lv, n)) in flat.iter().enumerate() {
                    rest -= c.q[n];
                    let after = if i + 1 == flat.len() {
                        0.0
                    } else {
                        rest.max(0.0)
                    };
                    order.push((lv, n, after));
                }
                ClassTable { order }
            })
            .collect();
        let arrivals = cfg
            .classes
            .iter()
            .map(|c| ArrivalLaw::new(cfg.arrival_kind, c.lambda))
            .collect();
        Self {
            cfg,
            policy,
            tables,
            arrivals,
            saturated: vec![false; cfg.num_classes()],
            rng,
            tops: vec![None; cfg.num_classes()],
            tied: Vec::with_capacity(cfg.num_classes()),
        }
    }

    pub fn with_saturated(mut self, saturated: &[bool]) -> Self {
        self.saturated = saturated.to_vec();
        self
    }

    /// Highest-preference occupied state of a class holding `x` users.
    ///
    /// The top falls within the first i states with probability
    /// `1 - R_i^x`, `R_i` being the mass after them, so one uniform `V`
    /// picks the first i with `R_i < V^(1/x)`.
    fn draw_top(&mut self, k: usize, x: u64) -> Option<(usize, usize)> {
        if self.saturated[k] {
            return Some(self.policy.saturated_top(k));
        }
        if x == 0 {
            return None;
        }
        let v = 1.0 - self.rng.random::<f64>();
        let t = if x == 1 { v } else { v.powf(1.0 / x as f64) };
        let order = &self.tables[k].order;
        order
            .iter()
            .find(|&&(_, _, after)| after < t)
            .or(order.last())
            .map(|&(lv, n, _)| (lv, n))
    }

    /// Advances `x` by one slot and returns the service outcome. Arrivals
    /// per class are written to `arrived`.
    pub fn step_in_place(&mut self, x: &mut [u64], arrived: &mut [u64]) -> SlotOutcome {
        let mut best = usize::MAX;
        self.tied.clear();
        for k in 0..x.len() {
            let top = self.draw_top(k, x[k]);
            self.tops[k] = top;
            if let Some((lv, _)) = top {
                if lv < best {
                    best = lv;
                    self.tied.clear();
                    self.tied.push(k);
                } else if lv == best {
                    self.tied.push(k);
                }
            }
        }
        let outcome = if self.tied.is_empty() {
            SlotOutcome {
                served: ServeDecision::Idle,
                departed: false,
            }
        } else {
            let tied = std::mem::take(&mut self.tied);
            let class = self.policy.break_tie(&tied, &mut self.rng);
            self.tied = tied;
            let state = self.tops[class].expect("tied class has a top").1;
            let departed = self.rng.random::<f64>() < self.cfg.classes[class].mu[state];
            if departed && !self.saturated[class] {
                x[class] -= 1;
            }
            SlotOutcome {
                served: ServeDecision::Serve { class, state },
                departed,
            }
        };
        for k in 0..x.len() {
            let a = self.arrivals[k].sample(&mut self.rng);
            arrived[k] = a;
            if !self.saturated[k] {
                x[k] += a;
            }
        }
        outcome
    }

    /// One slot with a full event record.
    pub fn step(&mut self, x: &mut [u64]) -> SlotEvent {
        let mut arrivals = vec![0; x.len()];
        let o = self.step_in_place(x, &mut arrivals);
        SlotEvent {
            served: o.served,
            departed: o.departed,
            arrivals,
        }
    }

    pub fn rng_mut(&mut self) -> &mut ChaCha8Rng {
        &mut self.rng
    }
}

/// Fluid-scaled sample path `Y(t) = X(floor(r t)) / r` with cumulative
/// scaled service times per (class, state).
#[derive(Debug, Clone)]
pub struct SimTrajectory {
    pub r: f64,
    pub times: Vec<f64>,
    /// `y[i][k]`
    pub y: Vec<Vec<f64>>,
    /// `tau[i][k][n]`
    pub tau: Vec<Vec<Vec<f64>>>,
    /// `best_state[k]`, to split tau into best / non-best.
    pub best_state: Vec<usize>,
}

impl SimTrajectory {
    pub fn tau_best(&self, i: usize, k: usize) -> f64 {
        self.tau[i][k][self.best_state[k]]
    }

    pub fn tau_nonbest(&self, i: usize, k: usize) -> f64 {
        self.tau[i][k].iter().sum::<f64>() - self.tau_best(i, k)
    }

    pub fn total(&self, i: usize) -> f64 {
        self.y[i].iter().sum()
    }
}

pub fn run_trajectory(
    cfg: &SystemConfig,
    policy: &Policy,
    r: f64,
    x0: &[f64],
    horizon: f64,
    sample_dt: f64,
    rng: ChaCha8Rng,
) -> SimTrajectory {
    assert!(r >= 1.0, "scale r must be at least 1");
    assert!(sample_dt > 0.0);
    let kc = cfg.num_classes();
    let mut x: Vec<u64> = x0.iter().map(|v| (r * v).floor() as u64).collect();
    let mut arrived = vec![0; kc];
    let mut served: Vec<Vec<u64>> = cfg
        .classes
        .iter()
        .map(|c| vec![0; c.num_states()])
        .collect();
    let mut sim = Simulator::new(cfg, policy, rng);

    let samples = (horizon / sample_dt + 1e-9).floor() as usize;
    let mut out = SimTrajectory {
        r,
        times: Vec::with_capacity(samples + 1),
        y: Vec::with_capacity(samples + 1),
        tau: Vec::with_capacity(samples + 1),
        best_state: cfg.classes.iter().map(|c| c.best_state()).collect(),
    };
    let mut slot: u64 = 0;
    for i in 0..=samples {
        let t = i as f64 * sample_dt;
        let target = (r * t + 1e-9).floor() as u64;
        while slot < target {
            if let ServeDecision::Serve { class, state } =
                sim.step_in_place(&mut x, &mut arrived).served
            {
                served[class][state] += 1;
            }
            slot += 1;
        }
        out.times.push(t);
        out.y.push(x.iter().map(|&v| v as f64 / r).collect());
        out.tau.push(
            served
                .iter()
                .map(|row| row.iter().map(|&v| v as f64 / r).collect())
                .collect(),
        );
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CostOptions {
    pub horizon: u64,
    pub warmup: u64,
    pub replications: usize,
    pub divergence_cap: u64,
}

impl Default for CostOptions {
    fn default() -> Self {
        Self {
            horizon: 5_000_000,
            warmup: 1_000_000,
            replications: 10,
            divergence_cap: DEFAULT_DIVERGENCE_CAP,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CostEstimate {
    /// Time-average of `sum_k c_k X_k(t)` over the measurement window.
    pub mean_cost: f64,
    pub per_class_mean: Vec<f64>,
    /// Normal-approximation 95% half-width across replications.
    pub ci_half: f64,
    pub replication_means: Vec<f64>,
    pub horizon: u64,
    pub warmup: u64,
    /// Replications that hit the cap or showed a sustained upward trend.
    pub unstable_replications: usize,
}

impl CostEstimate {
    pub fn apparently_unstable(&self) -> bool {
        self.unstable_replications > 0
    }
}

/// Least-squares slope of `ys` against 0, 1, 2, ...
pub(crate) fn ols_slope(ys: &[f64]) -> f64 {
    let n = ys.len() as f64;
    if ys.len() < 2 {
        return 0.0;
    }
    let mx = (n - 1.0) / 2.0;
    let my = ys.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx) = (0.0, 0.0);
    for (i, y) in ys.iter().enumerate() {
        let dx = i as f64 - mx;
        sxy += dx * (y - my);
        sxx += dx * dx;
    }
    sxy / sxx
}

/// Growth over the window judged from batch means: flagged when the fitted
/// rise exceeds both the window mean and 20 users.
pub(crate) fn trending_upward(batch_means: &[f64]) -> bool {
    if batch_means.len() < 4 {
        return false;
    }
    let rise = ols_slope(batch_means) * (batch_means.len() - 1) as f64;
    let mean = batch_means.iter().sum::<f64>() / batch_means.len() as f64;
    rise > mean.max(20.0)
}

const TREND_BATCHES: u64 = 100;

struct RepResult {
    mean_cost: f64,
    class_means: Vec<f64>,
    unstable: bool,
}

fn cost_replication(
    cfg: &SystemConfig,
    policy: &Policy,
    opts: &CostOptions,
    rep: usize,
) -> RepResult {
    let kc = cfg.num_classes();
    let mut sim = Simulator::new(cfg, policy, stream_rng(cfg.seed, rep as u64));
    let mut x = vec![0u64; kc];
    let mut arrived = vec![0; kc];
    let window = opts.horizon - opts.warmup;
    let batch = (window / TREND_BATCHES).max(1);
    let mut sums = vec![0.0f64; kc];
    let mut batch_sum = 0.0;
    let mut batch_means = Vec::with_capacity(TREND_BATCHES as usize + 1);
    let costs: Vec<f64> = cfg.classes.iter().map(|c| c.cost).collect();
    let mut unstable = false;
    let mut measured = 0u64;
    for t in 0..opts.horizon {
        if t >= opts.warmup {
            let mut c = 0.0;
            for k in 0..kc {
                let v = x[k] as f64;
                sums[k] += v;
                c += costs[k] * v;
            }
            batch_sum += c;
            measured += 1;
            if measured.is_multiple_of(batch) {
                batch_means.push(batch_sum / batch as f64);
                batch_sum = 0.0;
            }
        }
        sim.step_in_place(&mut x, &mut arrived);
        if x.iter().sum::<u64>() > opts.divergence_cap {
            unstable = true;
            break;
        }
    }
    let n = measured.max(1) as f64;
    let class_means: Vec<f64> = sums.iter().map(|s| s / n).collect();
    let mean_cost = class_means.iter().zip(&costs).map(|(m, c)| m * c).sum();
    RepResult {
        mean_cost,
        class_means,
        unstable: unstable || trending_upward(&batch_means),
    }
}

/// Long-run average holding cost from independent replications started empty.
pub fn estimate_mean_cost(cfg: &SystemConfig, policy: &Policy, opts: &CostOptions) -> CostEstimate {
    assert!(opts.horizon > opts.warmup, "horizon must exceed warm-up");
    assert!(opts.replications >= 1);
    let reps: Vec<RepResult> = (0..opts.replications)
        .into_par_iter()
        .map(|rep| cost_replication(cfg, policy, opts, rep))
        .collect();
    let r = reps.len() as f64;
    let means: Vec<f64> = reps.iter().map(|x| x.mean_cost).collect();
    let mean = means.iter().sum::<f64>() / r;
    let ci_half = if reps.len() > 1 {
        let var = means.iter().map(|m| (m - mean).powi(2)).sum::<f64>() / (r - 1.0);
        1.96 * (var / r).sqrt()
    } else {
        0.0
    };
    let kc = cfg.num_classes();
    let per_class_mean = (0..kc)
        .map(|k| reps.iter().map(|x| x.class_means[k]).sum::<f64>() / r)
        .collect();
    CostEstimate {
        mean_cost: mean,
        per_class_mean,
        ci_half,
        replication_means: means,
        horizon: opts.horizon,
        warmup: opts.warmup,
        unstable_replications: reps.iter().filter(|x| x.unstable).count(),
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SaturatedEstimate {
    /// Per-class `lambda_k - (service given to k) * mu`, averaged over slots.
    pub drift: Vec<f64>,
    /// Time-average counts of the non-saturated classes (0 for saturated ones).
    pub mean_counts: Vec<f64>,
    pub non_ergodic: bool,
}

/// Monte Carlo estimate of the averaged drift with the classes flagged in
/// `saturated` held at infinity. Uses the departure probability of the
/// served user rather than the Bernoulli outcome (same mean, less noise).
pub fn run_saturated(
    cfg: &SystemConfig,
    policy: &Policy,
    saturated: &[bool],
    horizon: u64,
    rng: ChaCha8Rng,
) -> SaturatedEstimate {
    let kc = cfg.num_classes();
    let mut sim = Simulator::new(cfg, policy, rng).with_saturated(saturated);
    let mut x = vec![0u64; kc];
    let mut arrived = vec![0; kc];
    let mut service = vec![0.0f64; kc];
    let mut count_sums = vec![0.0f64; kc];
    let batch = (horizon / TREND_BATCHES).max(1);
    let mut batch_sum = 0.0;
    let mut batch_means = Vec::new();
    for t in 0..horizon {
        let mut tot = 0.0;
        for k in 0..kc {
            if !saturated[k] {
                count_sums[k] += x[k] as f64;
                tot += x[k] as f64;
            }
        }
        batch_sum += tot;
        if (t + 1) % batch == 0 {
            batch_means.push(batch_sum / batch as f64);
            batch_sum = 0.0;
        }
        if let ServeDecision::Serve { class, state } =
            sim.step_in_place(&mut x, &mut arrived).served
        {
            service[class] += cfg.classes[class].mu[state];
        }
    }
    let h = horizon as f64;
    SaturatedEstimate {
        drift: (0..kc)
            .map(|k| cfg.classes[k].lambda - service[k] / h)
            .collect(),
        mean_counts: count_sums.iter().map(|s| s / h).collect(),
        non_ergodic: trending_upward(&batch_means),
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RateCheck {
    pub departure_rate: f64,
    pub arrival_rate: f64,
    pub lambda: f64,
    /// Standard error of a per-slot arrival-rate estimate over the horizon.
    pub sigma: f64,
    pub final_count: u64,
}

/// Empirical per-class departure rates from an empty start.
pub fn rate_conservation_check(
    cfg: &SystemConfig,
    policy: &Policy,
    horizon: u64,
    rng: ChaCha8Rng,
) -> Vec<RateCheck> {
    let kc = cfg.num_classes();
    let mut sim = Simulator::new(cfg, policy, rng);
    let mut x = vec![0u64; kc];
    let mut arrived = vec![0; kc];
    let mut deps = vec![0u64; kc];
    let mut arrs = vec![0u64; kc];
    for _ in 0..horizon {
        let o = sim.step_in_place(&mut x, &mut arrived);
        if let (ServeDecision::Serve { class, .. }, true) = (o.served, o.departed) {
            deps[class] += 1;
        }
        for k in 0..kc {
            arrs[k] += arrived[k];
        }
    }
    let h = horizon as f64;
    (0..kc)
        .map(|k| {
            let l = cfg.classes[k].lambda;
            let var = match cfg.arrival_kind {
                ArrivalKind::Bernoulli => l * (1.0 - l),
                ArrivalKind::PoissonCounts => l,
            };
            RateCheck {
                departure_rate: deps[k] as f64 / h,
                arrival_rate: arrs[k] as f64 / h,
                lambda: l,
                sigma: (var / h).sqrt(),
                final_count: x[k],
            }
        })
        .collect()
}
