//! Optimal fluid control: serve classes in decreasing `c_k mu_{k,N_k}`,
//! keeping already drained classes at zero.

use rayon::prelude::*;

use crate::drift::SolverOptions;
use crate::fluid::{fluid_trajectory, FluidError, Terminal};
use crate::model::SystemConfig;
use crate::policy::Policy;
use crate::simulator::{run_trajectory, stream_rng};

/// Breakpoints and values are compared to this absolute tolerance.
pub const OPTIMALITY_TOL: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq)]
pub struct ControlSegment {
    pub t_start: f64,
    pub t_end: f64,
    /// Fraction of slots given to each class's best state.
    pub u_star: Vec<f64>,
    pub x_start: Vec<f64>,
    pub drift: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct OptimalControl {
    /// Classes by decreasing `c_k mu_{k,N_k}`, ties in input order.
    pub order: Vec<usize>,
    pub segments: Vec<ControlSegment>,
    pub terminal: Terminal,
}

impl OptimalControl {
    pub fn value_at(&self, t: f64) -> Vec<f64> {
        let s = self
            .segments
            .iter()
            .find(|s| t < s.t_end)
            .unwrap_or_else(|| self.segments.last().unwrap());
        let dt = (t - s.t_start).max(0.0);
        s.x_start
            .iter()
            .zip(&s.drift)
            .map(|(x, d)| (x + d * dt).max(0.0))
            .collect()
    }

    pub fn control_at(&self, t: f64) -> &[f64] {
        &self
            .segments
            .iter()
            .find(|s| t < s.t_end)
            .unwrap_or_else(|| self.segments.last().unwrap())
            .u_star
    }

    pub fn breakpoints(&self) -> Vec<f64> {
        self.segments
            .iter()
            .map(|s| s.t_end)
            .filter(|t| t.is_finite())
            .collect()
    }

    pub fn cost_at(&self, cfg: &SystemConfig, t: f64) -> f64 {
        weighted(cfg, &self.value_at(t))
    }
}

fn weighted(cfg: &SystemConfig, x: &[f64]) -> f64 {
    x.iter().zip(&cfg.classes).map(|(v, c)| v * c.cost).sum()
}

pub fn priority_by_cmu(cfg: &SystemConfig) -> Vec<usize> {
    let key: Vec<f64> = cfg.classes.iter().map(|c| c.cost * c.best_mu()).collect();
    let mut order: Vec<usize> = (0..cfg.num_classes()).collect();
    order.sort_by(|&a, &b| key[b].partial_cmp(&key[a]).expect("finite"));
    order
}

/// Allocation for state `x`: empty classes ahead in the order get their
/// maintenance share `lambda/mu_N` (truncated at what is left), the first
/// class that is nonempty or cannot be maintained gets the remainder.
fn allocation(cfg: &SystemConfig, order: &[usize], x: &[f64]) -> Vec<f64> {
    let mut u = vec![0.0; x.len()];
    let mut cap: f64 = 1.0;
    for &k in order {
        let c = &cfg.classes[k];
        let keep = c.lambda / c.best_mu();
        if x[k] == 0.0 && keep <= cap {
            u[k] = keep;
            cap -= keep;
        } else {
            u[k] = cap.max(0.0);
            break;
        }
    }
    u
}

pub fn optimal_control(cfg: &SystemConfig, x0: &[f64]) -> Result<OptimalControl, FluidError> {
    let kc = cfg.num_classes();
    if x0.len() != kc || x0.iter().any(|v| !v.is_finite() || *v < 0.0) {
        return Err(FluidError::BadInitial { expected: kc });
    }
    let order = priority_by_cmu(cfg);
    let mut x = x0.to_vec();
    let mut t = 0.0;
    let mut segments = Vec::new();
    loop {
        let u = allocation(cfg, &order, &x);
        let drift: Vec<f64> = (0..kc)
            .map(|k| cfg.classes[k].lambda - cfg.classes[k].best_mu() * u[k])
            .collect();
        if x.iter().all(|&v| v == 0.0) && drift.iter().all(|&d| d == 0.0 || d.abs() < 1e-15) {
            segments.push(ControlSegment {
                t_start: t,
                t_end: f64::INFINITY,
                u_star: u,
                x_start: x,
                drift: vec![0.0; kc],
            });
            return Ok(OptimalControl {
                order,
                segments,
                terminal: Terminal::EmptiedAt(t),
            });
        }
        // the class receiving the remainder is the only one that can drain
        let next = (0..kc)
            .filter(|&k| x[k] > 0.0 && drift[k] < 0.0)
            .map(|k| (k, x[k] / -drift[k]))
            .min_by(|a, b| a.1.partial_cmp(&b.1).unwrap());
        let Some((hit, dt)) = next else {
            segments.push(ControlSegment {
                t_start: t,
                t_end: f64::INFINITY,
                u_star: u,
                x_start: x,
                drift,
            });
            return Ok(OptimalControl {
                order,
                segments,
                terminal: Terminal::GrowsForever,
            });
        };
        let x_next: Vec<f64> = (0..kc)
            .map(|k| {
                if k == hit {
                    0.0
                } else {
                    (x[k] + drift[k] * dt).max(0.0)
                }
            })
            .collect();
        segments.push(ControlSegment {
            t_start: t,
            t_end: t + dt,
            u_star: u,
            x_start: std::mem::replace(&mut x, x_next),
            drift,
        });
        t += dt;
    }
}

/// Whether the policy's fluid limit from `x0` coincides with the optimal
/// trajectory: same breakpoints, same values there, same final slope.
pub fn check_fluid_optimality(
    policy: &Policy,
    cfg: &SystemConfig,
    x0: &[f64],
    opts: &SolverOptions,
) -> Result<bool, FluidError> {
    let fl = fluid_trajectory(policy, cfg, x0, opts)?;
    let oc = optimal_control(cfg, x0)?;
    let (bf, bo) = (fl.breakpoints(), oc.breakpoints());
    // a zero-length leading segment is not a kink
    let strip =
        |b: Vec<f64>| -> Vec<f64> { b.into_iter().filter(|t| *t > OPTIMALITY_TOL).collect() };
    let (bf, bo) = (strip(bf), strip(bo));
    if bf.len() != bo.len()
        || bf
            .iter()
            .zip(&bo)
            .any(|(a, b)| (a - b).abs() > OPTIMALITY_TOL)
    {
        return Ok(false);
    }
    let last = bf.last().copied().unwrap_or(0.0);
    let probes = std::iter::once(0.0)
        .chain(bf.iter().copied())
        .chain([last + 1.0, last + 10.0]);
    for t in probes {
        let (a, b) = (fl.value_at(t), oc.value_at(t));
        if a.iter()
            .zip(&b)
            .any(|(p, q)| (p - q).abs() > OPTIMALITY_TOL)
        {
            return Ok(false);
        }
    }
    Ok(matches!(
        (fl.terminal, oc.terminal),
        (Terminal::EmptiedAt(_), Terminal::EmptiedAt(_))
            | (Terminal::GrowsForever, Terminal::GrowsForever)
    ))
}

#[derive(Debug, Clone, PartialEq)]
pub struct GapSeries {
    pub times: Vec<f64>,
    /// `gaps[seed][i]` = simulated scaled cost minus optimal fluid cost.
    pub gaps: Vec<Vec<f64>>,
}

impl GapSeries {
    pub fn min(&self) -> f64 {
        self.gaps
            .iter()
            .flatten()
            .copied()
            .fold(f64::INFINITY, f64::min)
    }

    pub fn max(&self) -> f64 {
        self.gaps
            .iter()
            .flatten()
            .copied()
            .fold(f64::NEG_INFINITY, f64::max)
    }
}

/// Scaled simulated cost minus the optimal fluid cost along sample times,
/// one series per seed.
#[allow(clippy::too_many_arguments)]
pub fn lower_bound_gap(
    policy: &Policy,
    cfg: &SystemConfig,
    x0: &[f64],
    r: f64,
    horizon: f64,
    sample_dt: f64,
    seeds: &[u64],
) -> Result<GapSeries, FluidError> {
    let oc = optimal_control(cfg, x0)?;
    let runs: Vec<(Vec<f64>, Vec<f64>)> = seeds
        .par_iter()
        .map(|&s| {
            let tr = run_trajectory(cfg, policy, r, x0, horizon, sample_dt, stream_rng(s, 0));
            let gap = tr
                .times
                .iter()
                .zip(&tr.y)
                .map(|(&t, y)| weighted(cfg, y) - oc.cost_at(cfg, t))
                .collect();
            (tr.times, gap)
        })
        .collect();
    let times = runs.first().map(|r| r.0.clone()).unwrap_or_default();
    Ok(GapSeries {
        times,
        gaps: runs.into_iter().map(|r| r.1).collect(),
    })
}
