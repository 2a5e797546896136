//! Exact one-step drifts, stationary laws of the non-saturated classes, and
//! averaged drifts.

use std::fmt;

use serde::Serialize;
use thiserror::Error;

use crate::model::{ArrivalKind, SystemConfig};
use crate::policy::{Policy, TieBreak};
use crate::simulator::{run_saturated, stream_rng};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SolverError {
    #[error("not ergodic: {0}")]
    NotErgodic(String),
    #[error("truncation insufficient: boundary mass {boundary_mass:.3e} at M = {m}")]
    TruncationInsufficient { m: usize, boundary_mass: f64 },
    #[error("requires Bernoulli arrivals")]
    RequiresBernoulli,
    #[error("power iteration did not converge after {0} sweeps")]
    NotConverged(usize),
}

/// Occupancy of one class as seen by the drift computations.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ClassLoad {
    Users(u64),
    /// Every state with q > 0 is occupied.
    Saturated,
}

/// `probs[k][n]` = P(serve class k in state n).
#[derive(Debug, Clone, PartialEq)]
pub struct ServeDistribution {
    pub probs: Vec<Vec<f64>>,
    pub idle: f64,
}

impl ServeDistribution {
    /// Expected departures of class `k` in one slot.
    pub fn service_rate(&self, cfg: &SystemConfig, k: usize) -> f64 {
        self.probs[k]
            .iter()
            .zip(&cfg.classes[k].mu)
            .map(|(p, m)| p * m)
            .sum()
    }

    pub fn total(&self) -> f64 {
        self.idle + self.probs.iter().flatten().sum::<f64>()
    }
}

/// Per-class view of the class-maximum level.
struct ClassMax {
    /// P(class max is exactly at level v)
    at: Vec<f64>,
    /// P(class max is strictly worse than level v, or the class is empty)
    below: Vec<f64>,
}

fn class_max(policy: &Policy, k: usize, load: ClassLoad, levels: usize) -> ClassMax {
    let mut at = vec![0.0; levels];
    let mut below = vec![1.0; levels];
    match load {
        ClassLoad::Saturated => {
            let (top, _) = policy.saturated_top(k);
            at[top] = 1.0;
            below.iter_mut().skip(top).for_each(|b| *b = 0.0);
        }
        ClassLoad::Users(0) => {}
        ClassLoad::Users(x) => {
            let groups = policy.groups(k);
            let pw = |b: f64| b.powf(x as f64);
            for v in 0..levels {
                let worse: f64 = groups.iter().filter(|g| g.level > v).map(|g| g.mass).sum();
                let here: f64 = groups.iter().filter(|g| g.level == v).map(|g| g.mass).sum();
                below[v] = pw(worse);
                at[v] = pw(worse + here) - below[v];
            }
        }
    }
    ClassMax { at, below }
}

/// Exact P(serve (k,n)) for the given per-class loads.
pub fn serve_distribution(
    policy: &Policy,
    cfg: &SystemConfig,
    loads: &[ClassLoad],
) -> ServeDistribution {
    let kc = cfg.num_classes();
    assert_eq!(loads.len(), kc);
    let levels = policy.num_levels();
    let maxes: Vec<ClassMax> = (0..kc)
        .map(|k| class_max(policy, k, loads[k], levels))
        .collect();
    let mut probs: Vec<Vec<f64>> = cfg
        .classes
        .iter()
        .map(|c| vec![0.0; c.num_states()])
        .collect();
    let mut cand: Vec<usize> = Vec::with_capacity(kc);
    let mut winners: Vec<usize> = Vec::with_capacity(kc);
    for v in 0..levels {
        cand.clear();
        cand.extend((0..kc).filter(|&k| maxes[k].at[v] > 0.0));
        if cand.is_empty() {
            continue;
        }
        let rest: f64 = (0..kc)
            .filter(|k| !cand.contains(k))
            .map(|k| maxes[k].below[v])
            .product();
        if rest == 0.0 {
            continue;
        }
        for mask in 1u64..(1u64 << cand.len()) {
            winners.clear();
            let mut p = rest;
            for (i, &k) in cand.iter().enumerate() {
                if mask >> i & 1 == 1 {
                    winners.push(k);
                    p *= maxes[k].at[v];
                } else {
                    p *= maxes[k].below[v];
                }
            }
            if p == 0.0 {
                continue;
            }
            let tie = policy.tie_probabilities(&winners);
            for (&k, &t) in winners.iter().zip(&tie) {
                if t == 0.0 {
                    continue;
                }
                let share = p * t / maxes[k].at[v];
                split_within_class(policy, cfg, k, loads[k], v, share, &mut probs[k]);
            }
        }
    }
    let idle = if loads.iter().all(|l| *l == ClassLoad::Users(0)) {
        1.0
    } else {
        0.0
    };
    ServeDistribution { probs, idle }
}

/// Distributes `share * P(class max = v)` over the states of level `v` in
/// preference order: state i is served iff it is present and every earlier
/// state of the group is absent.
fn split_within_class(
    policy: &Policy,
    cfg: &SystemConfig,
    k: usize,
    load: ClassLoad,
    v: usize,
    share: f64,
    out: &mut [f64],
) {
    let groups = policy.groups(k);
    let gi = groups
        .iter()
        .position(|g| g.level == v)
        .expect("level present");
    let g = &groups[gi];
    match load {
        ClassLoad::Saturated => out[g.states[0]] += share,
        ClassLoad::Users(x) => {
            let worse: f64 = groups[gi + 1..].iter().map(|g| g.mass).sum();
            let q = &cfg.classes[k].q;
            let pw = |b: f64| b.powf(x as f64);
            let mut tail: f64 = g.mass;
            let mut g_i = pw(worse + tail);
            for &n in &g.states {
                tail -= q[n];
                let g_next = pw(worse + tail.max(0.0));
                out[n] += share * (g_i - g_next);
                g_i = g_next;
            }
        }
    }
}

/// `delta_j = lambda_j - sum_n mu_{j,n} P(serve j in n)` for every class.
pub fn drift(policy: &Policy, cfg: &SystemConfig, loads: &[ClassLoad]) -> Vec<f64> {
    let sd = serve_distribution(policy, cfg, loads);
    (0..cfg.num_classes())
        .map(|k| cfg.classes[k].lambda - sd.service_rate(cfg, k))
        .collect()
}

/// Loads with the classes in `u` holding `x` users and all others saturated.
fn loads_for(kc: usize, u: &[usize], x: &[u64]) -> Vec<ClassLoad> {
    let mut l = vec![ClassLoad::Saturated; kc];
    for (i, &k) in u.iter().enumerate() {
        l[k] = ClassLoad::Users(x[i]);
    }
    l
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SolverOptions {
    pub tol: f64,
    pub initial_m: usize,
    pub max_m: usize,
    pub tail_tol: f64,
    pub max_sweeps: usize,
}

impl Default for SolverOptions {
    fn default() -> Self {
        Self {
            tol: 1e-10,
            initial_m: 200,
            max_m: 3200,
            tail_tol: 1e-8,
            max_sweeps: 1_000_000,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Support {
    /// Product form accumulated until the tail bound fell below tolerance.
    Unbounded1d,
    /// Grid `{0..=m}^d` with clipped boundary.
    Truncated { m: usize },
}

#[derive(Debug, Clone, PartialEq)]
pub struct StationaryDistribution {
    /// Classes the coordinates refer to, in order.
    pub classes: Vec<usize>,
    pub support: Support,
    /// Extent per coordinate (values 0..extent).
    pub extent: Vec<usize>,
    /// Row-major, last coordinate fastest.
    pub masses: Vec<f64>,
    /// Tail bound (1-d) or mass on the outer boundary face (grid).
    pub tail_mass: f64,
}

impl StationaryDistribution {
    pub fn mass(&self, x: &[usize]) -> f64 {
        if x.iter().zip(&self.extent).any(|(v, e)| v >= e) {
            return 0.0;
        }
        self.masses[flat_index(x, &self.extent)]
    }

    pub fn mean(&self) -> Vec<f64> {
        let d = self.extent.len();
        let mut m = vec![0.0; d];
        let mut x = vec![0usize; d];
        for &p in &self.masses {
            for i in 0..d {
                m[i] += p * x[i] as f64;
            }
            next_point(&mut x, &self.extent);
        }
        m
    }

    /// Marginal law of coordinate `i`.
    pub fn marginal(&self, i: usize) -> Vec<f64> {
        let mut out = vec![0.0; self.extent[i]];
        let mut x = vec![0usize; self.extent.len()];
        for &p in &self.masses {
            out[x[i]] += p;
            next_point(&mut x, &self.extent);
        }
        out
    }
}

fn flat_index(x: &[usize], extent: &[usize]) -> usize {
    x.iter().zip(extent).fold(0, |acc, (v, e)| acc * e + v)
}

fn next_point(x: &mut [usize], extent: &[usize]) {
    for i in (0..x.len()).rev() {
        x[i] += 1;
        if x[i] < extent[i] {
            return;
        }
        x[i] = 0;
    }
}

const MAX_1D_STATES: usize = 50_000_000;

/// Stationary law of class `j` with every other class saturated.
pub fn stationary_1d(
    policy: &Policy,
    cfg: &SystemConfig,
    j: usize,
    opts: &SolverOptions,
) -> Result<StationaryDistribution, SolverError> {
    if cfg.arrival_kind != ArrivalKind::Bernoulli {
        return Err(SolverError::RequiresBernoulli);
    }
    let kc = cfg.num_classes();
    let lambda = cfg.classes[j].lambda;
    let s =
        |x: u64| serve_distribution(policy, cfg, &loads_for(kc, &[j], &[x])).service_rate(cfg, j);
    let done = |masses: Vec<f64>, tail: f64| {
        let z: f64 = masses.iter().sum();
        StationaryDistribution {
            classes: vec![j],
            support: Support::Unbounded1d,
            extent: vec![masses.len()],
            masses: masses.iter().map(|m| m / z).collect(),
            tail_mass: tail / z,
        }
    };
    if lambda == 0.0 {
        return Ok(done(vec![1.0], 0.0));
    }
    if lambda >= 1.0 {
        return Err(SolverError::NotErgodic(format!(
            "class {} receives an arrival every slot",
            j + 1
        )));
    }
    let mut sat = loads_for(kc, &[], &[]);
    sat[j] = ClassLoad::Saturated;
    let s_inf = serve_distribution(policy, cfg, &sat).service_rate(cfg, j);
    let ratio = |a: f64, b: f64| lambda * (1.0 - a) / ((1.0 - lambda) * b);
    let r_inf = if s_inf > 0.0 {
        ratio(s_inf, s_inf)
    } else {
        f64::INFINITY
    };
    if r_inf >= 1.0 {
        return Err(SolverError::NotErgodic(format!(
            "class {}: asymptotic birth/death ratio {r_inf:.6} >= 1",
            j + 1
        )));
    }
    let mut masses = vec![1.0];
    let mut z = 1.0;
    let mut s_prev = 0.0;
    for x in 1..MAX_1D_STATES as u64 {
        let s_x = s(x);
        if s_x <= 0.0 {
            return Err(SolverError::NotErgodic(format!(
                "class {} is never served with {x} users",
                j + 1
            )));
        }
        let r = ratio(s_prev, s_x);
        let p = masses.last().unwrap() * r;
        masses.push(p);
        z += p;
        // service rates approach s_inf, so later ratios are at most this bound
        let bound = ratio(s_x, s_x).max(r_inf);
        if bound < 1.0 && p * bound / (1.0 - bound) < opts.tail_tol * z {
            return Ok(done(masses, p * bound / (1.0 - bound)));
        }
        s_prev = s_x;
    }
    Err(SolverError::TruncationInsufficient {
        m: MAX_1D_STATES,
        boundary_mass: f64::NAN,
    })
}

/// Stationary law of the classes in `u` (others saturated) on a truncated
/// grid, by power iteration. The grid is doubled until the mass on its
/// outer face is below `tail_tol`.
pub fn stationary_multid(
    policy: &Policy,
    cfg: &SystemConfig,
    u: &[usize],
    opts: &SolverOptions,
) -> Result<StationaryDistribution, SolverError> {
    if cfg.arrival_kind != ArrivalKind::Bernoulli {
        return Err(SolverError::RequiresBernoulli);
    }
    assert!(!u.is_empty());
    let mut m = opts.initial_m.max(1);
    let mut last_boundary = f64::INFINITY;
    let mut warm: Option<StationaryDistribution> = None;
    loop {
        let dist = solve_grid(policy, cfg, u, m, opts, warm.as_ref())?;
        if dist.tail_mass < opts.tail_tol {
            return Ok(dist);
        }
        if dist.tail_mass >= last_boundary {
            return Err(SolverError::NotErgodic(format!(
                "boundary mass {:.3e} does not shrink as the grid grows",
                dist.tail_mass
            )));
        }
        if m * 2 > opts.max_m {
            return Err(SolverError::TruncationInsufficient {
                m,
                boundary_mass: dist.tail_mass,
            });
        }
        last_boundary = dist.tail_mass;
        warm = Some(dist);
        m *= 2;
    }
}

fn solve_grid(
    policy: &Policy,
    cfg: &SystemConfig,
    u: &[usize],
    m: usize,
    opts: &SolverOptions,
    warm: Option<&StationaryDistribution>,
) -> Result<StationaryDistribution, SolverError> {
    let d = u.len();
    let kc = cfg.num_classes();
    let extent = vec![m + 1; d];
    let size = (m + 1).pow(d as u32);
    let lambdas: Vec<f64> = u.iter().map(|&k| cfg.classes[k].lambda).collect();

    // departure probability of each U class at every grid point
    let mut dep = vec![0.0; size * d];
    let mut x = vec![0usize; d];
    for i in 0..size {
        let xs: Vec<u64> = x.iter().map(|&v| v as u64).collect();
        let sd = serve_distribution(policy, cfg, &loads_for(kc, u, &xs));
        for (c, &k) in u.iter().enumerate() {
            dep[i * d + c] = sd.service_rate(cfg, k);
        }
        next_point(&mut x, &extent);
    }

    // arrival patterns: subsets of U with their probabilities
    let patterns: Vec<(Vec<bool>, f64)> = (0u64..1 << d)
        .map(|mask| {
            let a: Vec<bool> = (0..d).map(|c| mask >> c & 1 == 1).collect();
            let p = a
                .iter()
                .zip(&lambdas)
                .map(|(&hit, &l)| if hit { l } else { 1.0 - l })
                .product();
            (a, p)
        })
        .filter(|(_, p)| *p > 0.0)
        .collect();

    let mut pi = vec![0.0; size];
    match warm {
        Some(w) => {
            let mut x = vec![0usize; d];
            for p in pi.iter_mut() {
                *p = w.mass(&x);
                next_point(&mut x, &extent);
            }
            let z: f64 = pi.iter().sum();
            pi.iter_mut().for_each(|p| *p /= z);
        }
        None => pi[0] = 1.0,
    }
    let mut next = vec![0.0; size];
    let mut y = vec![0usize; d];
    let mut converged = false;
    for _ in 0..opts.max_sweeps {
        next.iter_mut().for_each(|v| *v = 0.0);
        let mut x = vec![0usize; d];
        for i in 0..size {
            let p = pi[i];
            if p != 0.0 {
                let dsum: f64 = dep[i * d..(i + 1) * d].iter().sum();
                // service outcome: none, or one departure from class c
                for out in 0..=d {
                    let po = if out == d {
                        1.0 - dsum
                    } else {
                        dep[i * d + out]
                    };
                    if po <= 0.0 {
                        continue;
                    }
                    for (a, pa) in &patterns {
                        for c in 0..d {
                            let mut v = x[c] as i64;
                            if out == c {
                                v -= 1;
                            }
                            if a[c] {
                                v += 1;
                            }
                            y[c] = v.clamp(0, m as i64) as usize;
                        }
                        next[flat_index(&y, &extent)] += p * po * pa;
                    }
                }
            }
            next_point(&mut x, &extent);
        }
        let change: f64 = pi.iter().zip(&next).map(|(a, b)| (a - b).abs()).sum();
        std::mem::swap(&mut pi, &mut next);
        if change < opts.tol {
            converged = true;
            break;
        }
    }
    if !converged {
        return Err(SolverError::NotConverged(opts.max_sweeps));
    }
    let z: f64 = pi.iter().sum();
    pi.iter_mut().for_each(|p| *p /= z);
    let mut boundary = 0.0;
    let mut x = vec![0usize; d];
    for &p in &pi {
        if x.contains(&m) {
            boundary += p;
        }
        next_point(&mut x, &extent);
    }
    Ok(StationaryDistribution {
        classes: u.to_vec(),
        support: Support::Truncated { m },
        extent,
        masses: pi,
        tail_mass: boundary,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum DriftMethod {
    ClosedForm,
    ProductForm,
    TruncatedSolve,
    MonteCarlo,
}

impl fmt::Display for DriftMethod {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            DriftMethod::ClosedForm => "closed_form",
            DriftMethod::ProductForm => "product_form",
            DriftMethod::TruncatedSolve => "truncated_solve",
            DriftMethod::MonteCarlo => "monte_carlo",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AveragedDrift {
    pub drift: Vec<f64>,
    /// Sorted class indices of the non-saturated set.
    pub set: Vec<usize>,
    pub method: DriftMethod,
    /// Numerical tolerance of the method (0 for closed forms).
    pub tolerance: f64,
}

fn normalize_set(u: &[usize]) -> Vec<usize> {
    let mut s = u.to_vec();
    s.sort_unstable();
    s.dedup();
    s
}

/// Order in which saturated best-state users preempt each other under a BR
/// policy with a deterministic tie-break: best level first, then the
/// tie-break order.
fn best_state_order(policy: &Policy, cfg: &SystemConfig) -> Option<Vec<usize>> {
    let prio = policy.priority_order()?;
    let mut order = prio.clone();
    let best_level = |k: usize| policy.level(k, cfg.classes[k].best_state()).unwrap();
    order.sort_by_key(|&k| best_level(k));
    Some(order)
}

/// BR policy, deterministic tie-break. Capacity flows down the order: each
/// emptied class takes `lambda/mu_N`, the first saturated class takes the
/// rest, classes after it get nothing.
fn closed_form_priority(
    cfg: &SystemConfig,
    order: &[usize],
    u: &[usize],
) -> Result<Vec<f64>, SolverError> {
    let mut out: Vec<f64> = cfg.classes.iter().map(|c| c.lambda).collect();
    let mut capacity = 1.0;
    for &k in order {
        let c = &cfg.classes[k];
        if u.contains(&k) {
            let need = c.lambda / c.best_mu();
            if need > 0.0 && need >= capacity {
                return Err(SolverError::NotErgodic(format!(
                    "class {} needs {need:.6} of the slots, {capacity:.6} left",
                    k + 1
                )));
            }
            capacity -= need;
            out[k] = 0.0;
        } else {
            out[k] = c.lambda - c.best_mu() * capacity;
            capacity = 0.0;
            break;
        }
    }
    // emptied classes behind a saturated one are never served
    if capacity == 0.0 {
        if let Some(&k) = order
            .iter()
            .skip_while(|k| u.contains(k))
            .skip(1)
            .find(|&&k| u.contains(&k) && cfg.classes[k].lambda > 0.0)
        {
            return Err(SolverError::NotErgodic(format!(
                "class {} is preempted by a saturated class",
                k + 1
            )));
        }
    }
    Ok(out)
}

/// BR policy with random ties, two classes, at most one emptied.
fn closed_form_random(
    policy: &Policy,
    cfg: &SystemConfig,
    u: &[usize],
) -> Option<Result<Vec<f64>, SolverError>> {
    let kc = cfg.num_classes();
    if u.is_empty() {
        let sd = serve_distribution(policy, cfg, &vec![ClassLoad::Saturated; kc]);
        return Some(Ok((0..kc)
            .map(|k| cfg.classes[k].lambda - sd.service_rate(cfg, k))
            .collect()));
    }
    if kc != 2 || u.len() != 1 {
        return None;
    }
    if let TieBreak::RandomWeights(w) = &policy.spec().tie_break {
        if w.iter().any(|&x| x <= 0.0) {
            return None;
        }
    }
    // the emptied class competes with a saturated one; it is ergodic iff it
    // would drain with both saturated
    let j = u[0];
    let all_sat = serve_distribution(policy, cfg, &vec![ClassLoad::Saturated; kc]);
    let (l, s) = (cfg.classes[j].lambda, all_sat.service_rate(cfg, j));
    if l > 0.0 && (s == 0.0 || l * (1.0 - s) >= (1.0 - l) * s) {
        return Some(Err(SolverError::NotErgodic(format!(
            "class {} cannot drain next to a saturated class",
            j + 1
        ))));
    }
    let used = l / cfg.classes[j].best_mu();
    let sat = 1 - j;
    let mut out = vec![0.0; kc];
    out[sat] = cfg.classes[sat].lambda - cfg.classes[sat].best_mu() * (1.0 - used);
    Some(Ok(out))
}

/// Exact drift averaged over the stationary law of `u` with the remaining
/// classes saturated, computed numerically regardless of policy type.
pub fn averaged_drift_numeric(
    policy: &Policy,
    cfg: &SystemConfig,
    u: &[usize],
    opts: &SolverOptions,
) -> Result<AveragedDrift, SolverError> {
    let u = normalize_set(u);
    let kc = cfg.num_classes();
    if u.is_empty() {
        return Ok(AveragedDrift {
            drift: drift(policy, cfg, &vec![ClassLoad::Saturated; kc]),
            set: u,
            method: DriftMethod::ClosedForm,
            tolerance: 0.0,
        });
    }
    let (dist, method) = if u.len() == 1 {
        (
            stationary_1d(policy, cfg, u[0], opts)?,
            DriftMethod::ProductForm,
        )
    } else {
        (
            stationary_multid(policy, cfg, &u, opts)?,
            DriftMethod::TruncatedSolve,
        )
    };
    let mut acc = vec![0.0; kc];
    let mut x = vec![0usize; u.len()];
    for &p in &dist.masses {
        if p > 0.0 {
            let xs: Vec<u64> = x.iter().map(|&v| v as u64).collect();
            let dl = drift(policy, cfg, &loads_for(kc, &u, &xs));
            for k in 0..kc {
                acc[k] += p * dl[k];
            }
        }
        next_point(&mut x, &dist.extent);
    }
    let tolerance = match method {
        DriftMethod::ProductForm => opts.tail_tol,
        _ => opts.tol.max(dist.tail_mass),
    };
    Ok(AveragedDrift {
        drift: acc,
        set: u,
        method,
        tolerance,
    })
}

/// Averaged drift with every class outside `u` saturated. Closed forms are
/// used where they exist, the stationary solvers otherwise.
pub fn averaged_drift(
    policy: &Policy,
    cfg: &SystemConfig,
    u: &[usize],
    opts: &SolverOptions,
) -> Result<AveragedDrift, SolverError> {
    let u = normalize_set(u);
    if policy.is_best_rate(cfg) {
        let closed = match best_state_order(policy, cfg) {
            Some(order) => Some(closed_form_priority(cfg, &order, &u)),
            None => closed_form_random(policy, cfg, &u),
        };
        if let Some(r) = closed {
            return Ok(AveragedDrift {
                drift: r?,
                set: u,
                method: DriftMethod::ClosedForm,
                tolerance: 0.0,
            });
        }
    }
    averaged_drift_numeric(policy, cfg, &u, opts)
}

/// Monte Carlo counterpart of [`averaged_drift`].
pub fn averaged_drift_monte_carlo(
    policy: &Policy,
    cfg: &SystemConfig,
    u: &[usize],
    horizon: u64,
) -> AveragedDrift {
    let u = normalize_set(u);
    let sat: Vec<bool> = (0..cfg.num_classes()).map(|k| !u.contains(&k)).collect();
    let est = run_saturated(cfg, policy, &sat, horizon, stream_rng(cfg.seed, 0));
    AveragedDrift {
        drift: est.drift,
        set: u,
        method: DriftMethod::MonteCarlo,
        tolerance: 1.0 / (horizon as f64).sqrt(),
    }
}
