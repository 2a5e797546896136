//! Helpers shared by the integration tests.
#![allow(dead_code)]

use oppsched::model::SystemConfig;
use oppsched::policy::{Policy, PolicySpec, TieBreak};

/// Serve probabilities by enumerating every joint channel configuration of
/// the present users. Written straight from the scheduling rule: find the
/// best index among present users, break the cross-class tie, then serve the
/// highest-mu state (highest state id on equal mu) of the winning class.
pub fn brute_force_serve(policy: &Policy, cfg: &SystemConfig, x: &[u64]) -> (Vec<Vec<f64>>, f64) {
    let kc = cfg.num_classes();
    let mut acc: Vec<Vec<Neumaier>> = cfg
        .classes
        .iter()
        .map(|c| vec![Neumaier::default(); c.num_states()])
        .collect();
    let probs = |acc: &[Vec<Neumaier>]| -> Vec<Vec<f64>> {
        acc.iter().map(|r| r.iter().map(|a| a.sum + a.comp).collect()).collect()
    };
    let users: Vec<usize> = (0..kc).flat_map(|k| std::iter::repeat_n(k, x[k] as usize)).collect();
    if users.is_empty() {
        return (probs(&acc), 1.0);
    }
    let supports: Vec<Vec<usize>> = cfg.classes.iter().map(|c| c.support().collect()).collect();
    let mut digit = vec![0usize; users.len()];
    loop {
        let mut p = 1.0;
        let mut best = usize::MAX;
        for (u, &k) in users.iter().enumerate() {
            let n = supports[k][digit[u]];
            p *= cfg.classes[k].q[n];
            best = best.min(policy.level(k, n).expect("support state"));
        }
        // per class: top state at the best level
        let mut top: Vec<Option<usize>> = vec![None; kc];
        for (u, &k) in users.iter().enumerate() {
            let n = supports[k][digit[u]];
            if policy.level(k, n) != Some(best) {
                continue;
            }
            let mu = &cfg.classes[k].mu;
            top[k] = match top[k] {
                Some(m) if (mu[m], m) >= (mu[n], n) => Some(m),
                _ => Some(n),
            };
        }
        let tied: Vec<usize> = (0..kc).filter(|&k| top[k].is_some()).collect();
        for (k, t) in tie_oracle(&policy.spec().tie_break, cfg, &tied) {
            acc[k][top[k].unwrap()].add(p * t);
        }
        // odometer
        let mut i = 0;
        loop {
            if i == users.len() {
                return (probs(&acc), 0.0);
            }
            digit[i] += 1;
            if digit[i] < supports[users[i]].len() {
                break;
            }
            digit[i] = 0;
            i += 1;
        }
    }
}

/// Compensated sum; the oracle adds up to a million tiny terms.
#[derive(Debug, Clone, Copy, Default)]
struct Neumaier {
    sum: f64,
    comp: f64,
}

impl Neumaier {
    fn add(&mut self, x: f64) {
        let t = self.sum + x;
        if self.sum.abs() >= x.abs() {
            self.comp += (self.sum - t) + x;
        } else {
            self.comp += (x - t) + self.sum;
        }
        self.sum = t;
    }
}

fn tie_oracle(tie: &TieBreak, cfg: &SystemConfig, tied: &[usize]) -> Vec<(usize, f64)> {
    match tie {
        TieBreak::Myopic => {
            let key = |k: usize| cfg.classes[k].cost * cfg.classes[k].best_mu();
            let mut w = tied[0];
            for &k in &tied[1..] {
                if key(k) > key(w) {
                    w = k;
                }
            }
            vec![(w, 1.0)]
        }
        TieBreak::RandomWeights(wt) => {
            let s: f64 = tied.iter().map(|&k| wt[k]).sum();
            tied.iter()
                .map(|&k| {
                    let t = if s > 0.0 { wt[k] / s } else { 1.0 / tied.len() as f64 };
                    (k, t)
                })
                .collect()
        }
        TieBreak::PriorityOrder(order) => {
            vec![(*order.iter().find(|k| tied.contains(k)).unwrap(), 1.0)]
        }
    }
}

/// Number of joint channel configurations for occupancy `x`.
pub fn config_count(cfg: &SystemConfig, x: &[u64]) -> f64 {
    cfg.classes
        .iter()
        .zip(x)
        .map(|(c, &n)| (c.support().count() as f64).powi(n as i32))
        .product()
}

/// Every occupancy whose configuration count stays within `cap`.
pub fn occupancies_within(cfg: &SystemConfig, cap: f64) -> Vec<Vec<u64>> {
    let mut out = Vec::new();
    let mut x = vec![0u64; cfg.num_classes()];
    loop {
        if config_count(cfg, &x) <= cap {
            out.push(x.clone());
            x[0] += 1;
            continue;
        }
        // overflowed in the first coordinate: carry
        let mut i = 0;
        loop {
            x[i] = 0;
            i += 1;
            if i == x.len() {
                return out;
            }
            x[i] += 1;
            if config_count(cfg, &x) <= cap {
                break;
            }
        }
    }
}

/// Named rules paired with each tie-break kind.
pub fn all_policy_variants(k: usize) -> Vec<PolicySpec> {
    let ties = [
        TieBreak::Myopic,
        TieBreak::RandomWeights((0..k).map(|i| 0.3 + i as f64).collect()),
        TieBreak::PriorityOrder((0..k).rev().collect()),
    ];
    let mut out = Vec::new();
    for base in [
        PolicySpec::pi(k),
        PolicySpec::sb(k),
        PolicySpec::pb(k),
        PolicySpec::rb(k),
        PolicySpec::cmu(k),
    ] {
        for t in &ties {
            out.push(base.clone().with_tie(t.clone()));
        }
    }
    out
}

/// A small three-class system with cross-class index ties.
pub fn three_class() -> SystemConfig {
    use oppsched::model::ClassParams;
    SystemConfig::new(vec![
        ClassParams::new(0.1, vec![0.5, 0.5], vec![0.2, 0.4]),
        ClassParams::new(0.1, vec![0.3, 0.0, 0.7], vec![0.1, 0.2, 0.4]),
        ClassParams::new(0.05, vec![0.2, 0.3, 0.5], vec![0.1, 0.2, 0.3]),
    ])
}
