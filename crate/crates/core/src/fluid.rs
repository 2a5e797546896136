//! Piecewise-linear fluid limits, stability verdicts, thresholds and
//! overload growth rates.

use thiserror::Error;

use crate::drift::{averaged_drift, AveragedDrift, DriftMethod, SolverError, SolverOptions};
use crate::model::SystemConfig;
use crate::policy::{Policy, PolicyError, PolicySpec};

/// Drifts within this distance of zero count as zero.
pub const DRIFT_ZERO_TOL: f64 = 1e-12;
/// Relative slack when several classes empty at the same breakpoint.
const SIMULTANEOUS_RTOL: f64 = 1e-9;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum FluidError {
    #[error(transparent)]
    Solver(#[from] SolverError),
    #[error(transparent)]
    Policy(#[from] PolicyError),
    #[error("initial state must have {expected} finite nonnegative entries")]
    BadInitial { expected: usize },
    #[error(
        "no sign change in sweep range: stable at lo = {lo_stable}, stable at hi = {hi_stable}"
    )]
    NoSignChange { lo_stable: bool, hi_stable: bool },
    #[error("invalid sweep: {0}")]
    BadSweep(String),
}

#[derive(Debug, Clone, PartialEq)]
pub struct FluidSegment {
    pub t_start: f64,
    /// `f64::INFINITY` on a final growing segment.
    pub t_end: f64,
    /// Emptied classes on this segment, sorted.
    pub set: Vec<usize>,
    pub drift: Vec<f64>,
    pub y_start: Vec<f64>,
    pub method: DriftMethod,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Terminal {
    EmptiedAt(f64),
    GrowsForever,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FluidTrajectory {
    pub segments: Vec<FluidSegment>,
    pub terminal: Terminal,
    pub warnings: Vec<String>,
}

impl FluidTrajectory {
    /// Breakpoints `T_1, T_2, ...` (segment ends), finite ones only.
    pub fn breakpoints(&self) -> Vec<f64> {
        self.segments
            .iter()
            .map(|s| s.t_end)
            .filter(|t| t.is_finite())
            .collect()
    }

    pub fn value_at(&self, t: f64) -> Vec<f64> {
        let seg = self
            .segments
            .iter()
            .find(|s| t < s.t_end)
            .or(self.segments.last())
            .expect("at least one segment");
        if let Terminal::EmptiedAt(te) = self.terminal {
            if t >= te {
                return vec![0.0; seg.y_start.len()];
            }
        }
        let dt = (t - seg.t_start).max(0.0);
        seg.y_start
            .iter()
            .zip(&seg.drift)
            .enumerate()
            .map(|(k, (y, d))| {
                if seg.set.contains(&k) {
                    0.0
                } else {
                    (y + d * dt).max(0.0)
                }
            })
            .collect()
    }

    pub fn emptying_time(&self) -> Option<f64> {
        match self.terminal {
            Terminal::EmptiedAt(t) => Some(t),
            Terminal::GrowsForever => None,
        }
    }

    /// Drift of the last segment.
    pub fn final_drift(&self) -> &[f64] {
        &self.segments.last().expect("at least one segment").drift
    }
}

fn stage(
    policy: &Policy,
    cfg: &SystemConfig,
    u: &[usize],
    opts: &SolverOptions,
) -> Result<AveragedDrift, FluidError> {
    let mut a = averaged_drift(policy, cfg, u, opts)?;
    for &k in u {
        a.drift[k] = 0.0;
    }
    Ok(a)
}

/// Fluid limit from `x0`: on each segment the non-emptied classes move with
/// the averaged drift of the emptied set; the next breakpoint is the first
/// time a class with negative drift reaches zero.
pub fn fluid_trajectory(
    policy: &Policy,
    cfg: &SystemConfig,
    x0: &[f64],
    opts: &SolverOptions,
) -> Result<FluidTrajectory, FluidError> {
    let kc = cfg.num_classes();
    if x0.len() != kc || x0.iter().any(|v| !v.is_finite() || *v < 0.0) {
        return Err(FluidError::BadInitial { expected: kc });
    }
    let mut warnings = Vec::new();
    let mut u: Vec<usize> = Vec::new();
    let mut y = x0.to_vec();

    // Classes starting at zero that cannot grow are treated as emptied.
    if y.contains(&0.0) {
        warnings.push(
            "some classes start at zero; those with nonpositive drift are placed in the initial \
             emptied set"
                .to_string(),
        );
        loop {
            let d = stage(policy, cfg, &u, opts)?;
            let pick = (0..kc)
                .filter(|k| !u.contains(k) && y[*k] == 0.0 && d.drift[*k] <= DRIFT_ZERO_TOL)
                .min_by(|&a, &b| d.drift[a].partial_cmp(&d.drift[b]).unwrap());
            match pick {
                Some(k) => {
                    u.push(k);
                    u.sort_unstable();
                }
                None => break,
            }
        }
    }

    let mut segments = Vec::new();
    let mut t = 0.0;
    loop {
        if u.len() == kc {
            if segments.is_empty() {
                segments.push(FluidSegment {
                    t_start: 0.0,
                    t_end: 0.0,
                    set: u.clone(),
                    drift: vec![0.0; kc],
                    y_start: y.clone(),
                    method: DriftMethod::ClosedForm,
                });
            }
            return Ok(FluidTrajectory {
                segments,
                terminal: Terminal::EmptiedAt(t),
                warnings,
            });
        }
        let d = stage(policy, cfg, &u, opts)?;
        let hits: Vec<(usize, f64)> = (0..kc)
            .filter(|k| !u.contains(k) && d.drift[*k] < -DRIFT_ZERO_TOL)
            .map(|k| (k, y[k] / -d.drift[k]))
            .collect();
        let Some(dt) = hits
            .iter()
            .map(|h| h.1)
            .min_by(|a, b| a.partial_cmp(b).unwrap())
        else {
            segments.push(FluidSegment {
                t_start: t,
                t_end: f64::INFINITY,
                set: u.clone(),
                drift: d.drift,
                y_start: y,
                method: d.method,
            });
            return Ok(FluidTrajectory {
                segments,
                terminal: Terminal::GrowsForever,
                warnings,
            });
        };
        let emptied: Vec<usize> = hits
            .iter()
            .filter(|h| h.1 <= dt * (1.0 + SIMULTANEOUS_RTOL))
            .map(|h| h.0)
            .collect();
        let y_next: Vec<f64> = (0..kc)
            .map(|k| {
                if u.contains(&k) || emptied.contains(&k) {
                    0.0
                } else {
                    (y[k] + d.drift[k] * dt).max(0.0)
                }
            })
            .collect();
        segments.push(FluidSegment {
            t_start: t,
            t_end: t + dt,
            set: u.clone(),
            drift: d.drift,
            y_start: std::mem::replace(&mut y, y_next),
            method: d.method,
        });
        t += dt;
        u.extend(emptied);
        u.sort_unstable();
    }
}

/// `(rho < 1, rho)` with `rho = sum_k lambda_k / mu_{k,N_k}`.
pub fn is_max_stable(cfg: &SystemConfig) -> (bool, f64) {
    let rho = cfg.rho();
    (rho < 1.0, rho)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StabilityMethod {
    /// Best Rate policies are stable exactly when the system is.
    BestRate,
    FluidPath,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StabilityReport {
    pub rho: f64,
    pub max_stable: bool,
    pub policy_stable: bool,
    pub breakpoints: Vec<f64>,
    /// Index of the first infinite breakpoint, if the fluid path grows.
    pub first_infinite: Option<usize>,
    pub method: StabilityMethod,
}

/// Fluid-path verdict from a positive start, ignoring the Best Rate shortcut.
pub fn is_stable_fluid(
    policy: &Policy,
    cfg: &SystemConfig,
    opts: &SolverOptions,
) -> Result<StabilityReport, FluidError> {
    let (max_stable, rho) = is_max_stable(cfg);
    let tr = fluid_trajectory(policy, cfg, &vec![1.0; cfg.num_classes()], opts)?;
    let breakpoints = tr.breakpoints();
    let emptied = tr.emptying_time().is_some();
    Ok(StabilityReport {
        rho,
        max_stable,
        policy_stable: emptied && max_stable,
        first_infinite: (!emptied).then_some(breakpoints.len() + 1),
        breakpoints,
        method: StabilityMethod::FluidPath,
    })
}

pub fn is_stable(
    policy: &Policy,
    cfg: &SystemConfig,
    opts: &SolverOptions,
) -> Result<StabilityReport, FluidError> {
    if policy.is_best_rate(cfg) {
        let (max_stable, rho) = is_max_stable(cfg);
        return Ok(StabilityReport {
            rho,
            max_stable,
            policy_stable: max_stable,
            breakpoints: Vec::new(),
            first_infinite: None,
            method: StabilityMethod::BestRate,
        });
    }
    is_stable_fluid(policy, cfg, opts)
}

/// Arrival rate of one class varied over `[lo, hi]`, others fixed.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Sweep {
    pub class: usize,
    pub lo: f64,
    pub hi: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Threshold {
    pub rho_star: f64,
    /// Arrival rate of the swept class at the threshold (NaN for the shortcut).
    pub lambda_star: f64,
    pub method: StabilityMethod,
}

/// Bisection stops once the bracket is this narrow in rho.
pub const THRESHOLD_RHO_TOL: f64 = 1e-4;

/// Load at which the policy stops being stable along `sweep`.
pub fn stability_threshold(
    spec: &PolicySpec,
    cfg: &SystemConfig,
    sweep: Sweep,
    opts: &SolverOptions,
) -> Result<Threshold, FluidError> {
    if sweep.class >= cfg.num_classes() || !(sweep.lo < sweep.hi) || sweep.lo < 0.0 {
        return Err(FluidError::BadSweep(format!(
            "need class < {} and 0 <= lo < hi",
            cfg.num_classes()
        )));
    }
    let policy = Policy::new(spec.clone(), cfg)?;
    if policy.is_best_rate(cfg) {
        return Ok(Threshold {
            rho_star: 1.0,
            lambda_star: f64::NAN,
            method: StabilityMethod::BestRate,
        });
    }
    let verdict = |l: f64| -> Result<bool, FluidError> {
        let c = cfg.clone().with_lambda(sweep.class, l);
        let p = Policy::new(spec.clone(), &c)?;
        Ok(is_stable_fluid(&p, &c, opts)?.policy_stable)
    };
    let (lo_stable, hi_stable) = (verdict(sweep.lo)?, verdict(sweep.hi)?);
    if !lo_stable || hi_stable {
        return Err(FluidError::NoSignChange {
            lo_stable,
            hi_stable,
        });
    }
    let mu_n = cfg.classes[sweep.class].best_mu();
    let (mut lo, mut hi) = (sweep.lo, sweep.hi);
    while (hi - lo) / mu_n > THRESHOLD_RHO_TOL {
        let mid = 0.5 * (lo + hi);
        if verdict(mid)? {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    let lambda_star = 0.5 * (lo + hi);
    Ok(Threshold {
        rho_star: cfg.clone().with_lambda(sweep.class, lambda_star).rho(),
        lambda_star,
        method: StabilityMethod::FluidPath,
    })
}

/// Drift of the final segment from an all-ones start; zero when the fluid
/// path empties.
pub fn growth_rates(
    policy: &Policy,
    cfg: &SystemConfig,
    opts: &SolverOptions,
) -> Result<Vec<f64>, FluidError> {
    let tr = fluid_trajectory(policy, cfg, &vec![1.0; cfg.num_classes()], opts)?;
    Ok(match tr.terminal {
        Terminal::GrowsForever => tr.final_drift().to_vec(),
        Terminal::EmptiedAt(_) => vec![0.0; cfg.num_classes()],
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::policy::TieBreak;

    fn o() -> SolverOptions {
        SolverOptions::default()
    }

    #[test]
    fn pi_breakpoints() {
        let cfg = SystemConfig::cdma_table1(0.14);
        let p = Policy::new(PolicySpec::pi(2), &cfg).unwrap();
        let tr = fluid_trajectory(&p, &cfg, &[1.0, 1.0], &o()).unwrap();
        let b = tr.breakpoints();
        assert_eq!(b.len(), 2);
        assert!((b[0] - 1.0 / 0.26).abs() < 1e-9);
        assert!((b[1] - 12.5 / 0.15).abs() < 1e-9);
        assert_eq!(tr.segments[1].set, vec![0]);
        assert_eq!(tr.terminal, Terminal::EmptiedAt(b[1]));
    }

    #[test]
    fn sb_random_keeps_class2_flat_then_drains() {
        let cfg = SystemConfig::cdma_table1(0.14);
        let p = Policy::new(PolicySpec::sb(2), &cfg).unwrap();
        let tr = fluid_trajectory(&p, &cfg, &[1.0, 1.0], &o()).unwrap();
        let b = tr.breakpoints();
        assert!((b[0] - 1.0 / 0.06).abs() < 1e-9);
        assert!((b[1] - 12.5 / 0.15).abs() < 1e-9);
        assert!((tr.value_at(10.0)[1] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn zero_start_is_empty() {
        let cfg = SystemConfig::cdma_table1(0.14);
        let p = Policy::new(PolicySpec::pi(2), &cfg).unwrap();
        let tr = fluid_trajectory(&p, &cfg, &[0.0, 0.0], &o()).unwrap();
        assert_eq!(tr.terminal, Terminal::EmptiedAt(0.0));
        assert_eq!(tr.value_at(5.0), vec![0.0, 0.0]);
        assert!(!tr.warnings.is_empty());
    }

    #[test]
    fn zero_start_class_with_positive_drift_grows() {
        // PI saturated serves class 1 only, so class 2 grows from zero
        let cfg = SystemConfig::cdma_table1(0.14);
        let p = Policy::new(PolicySpec::pi(2), &cfg).unwrap();
        let tr = fluid_trajectory(&p, &cfg, &[1.0, 0.0], &o()).unwrap();
        assert!((tr.value_at(1.0)[1] - 0.05).abs() < 1e-12);
        assert!(tr.emptying_time().is_some());
    }

    #[test]
    fn max_stability() {
        assert!(is_max_stable(&SystemConfig::cdma_table1(0.14)).0);
        let (s, rho) = is_max_stable(&SystemConfig::cdma_table1(0.24));
        assert!(!s && (rho - 1.1).abs() < 1e-12);
        let (s, rho) = is_max_stable(&SystemConfig::cdma_table1(0.0).with_lambda(1, 0.0));
        assert!(s && rho == 0.0);
    }

    #[test]
    fn cmu_verdicts() {
        let cfg = SystemConfig::cdma_table1(0.14);
        let p = Policy::new(PolicySpec::cmu(2), &cfg).unwrap();
        assert!(!is_stable(&p, &cfg, &o()).unwrap().policy_stable);
        // rho = 0.6
        let cfg = SystemConfig::cdma_table1(0.04);
        let p = Policy::new(PolicySpec::cmu(2), &cfg).unwrap();
        assert!(is_stable(&p, &cfg, &o()).unwrap().policy_stable);
    }

    #[test]
    fn br_shortcut_agrees_with_fluid_path() {
        for l1 in [0.04, 0.14, 0.19] {
            let cfg = SystemConfig::cdma_table1(l1);
            for spec in [
                PolicySpec::pi(2),
                PolicySpec::sb(2),
                PolicySpec::pb(2),
                PolicySpec::sb(2).with_tie(TieBreak::Myopic),
            ] {
                let p = Policy::new(spec, &cfg).unwrap();
                let a = is_stable(&p, &cfg, &o()).unwrap();
                let b = is_stable_fluid(&p, &cfg, &o()).unwrap();
                assert_eq!(a.method, StabilityMethod::BestRate);
                assert_eq!(a.policy_stable, b.policy_stable);
            }
        }
    }

    #[test]
    fn br_threshold_is_one() {
        let cfg = SystemConfig::cdma_table1(0.14);
        let sw = Sweep {
            class: 0,
            lo: 0.004,
            hi: 0.196,
        };
        let t = stability_threshold(&PolicySpec::sb(2), &cfg, sw, &o()).unwrap();
        assert_eq!(t.rho_star, 1.0);
    }

    #[test]
    fn threshold_needs_sign_change() {
        let cfg = SystemConfig::cdma_table1(0.14);
        let sw = Sweep {
            class: 0,
            lo: 0.004,
            hi: 0.02,
        };
        assert!(matches!(
            stability_threshold(&PolicySpec::cmu(2), &cfg, sw, &o()),
            Err(FluidError::NoSignChange { .. })
        ));
    }

    #[test]
    fn overload_growth() {
        let cfg = SystemConfig::cdma_table1(0.24);
        let sb = Policy::new(PolicySpec::sb(2), &cfg).unwrap();
        let g = growth_rates(&sb, &cfg, &o()).unwrap();
        assert!((g[0] - 0.04).abs() < 1e-12 && g[1].abs() < 1e-12);
        let pi = Policy::new(PolicySpec::pi(2), &cfg).unwrap();
        let g = growth_rates(&pi, &cfg, &o()).unwrap();
        assert!(g[0].abs() < 1e-12 && (g[1] - 0.01).abs() < 1e-12);
        let stable = SystemConfig::cdma_table1(0.14);
        let p = Policy::new(PolicySpec::pi(2), &stable).unwrap();
        assert_eq!(growth_rates(&p, &stable, &o()).unwrap(), vec![0.0, 0.0]);
    }
}
