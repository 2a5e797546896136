//! System parameters: per-class arrival rates, channel-state laws,
//! departure probabilities and holding costs.
//!
//! Classes and channel states are 0-based inside the library. Everything
//! that faces a user (CSV columns, CLI class lists, error messages) is
//! 1-based.

use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Absolute tolerance on `sum(q) == 1`.
pub const PROB_SUM_TOL: f64 = 1e-12;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("slot can exceed remaining work; geometric approximation invalid (state {state}: mu = {value})")]
    RateTooHigh { state: usize, value: f64 },
    #[error("invalid rate parameters: {0}")]
    BadRates(String),
    #[error("invalid configuration:\n{}", format_violations(.0))]
    Invalid(Vec<Violation>),
    #[error("parse error: {0}")]
    Parse(String),
    #[error("cannot read {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

fn format_violations(v: &[Violation]) -> String {
    v.iter()
        .map(|v| format!("  {v}"))
        .collect::<Vec<_>>()
        .join("\n")
}

/// One violated invariant. `class` is 1-based; 0 means system-level.
#[derive(Debug, Clone, PartialEq)]
pub struct Violation {
    pub class: usize,
    pub field: &'static str,
    pub message: String,
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.class == 0 {
            write!(f, "{}: {}", self.field, self.message)
        } else {
            write!(f, "class {}, {}: {}", self.class, self.field, self.message)
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ArrivalKind {
    /// At most one arrival per slot, with probability lambda.
    #[default]
    Bernoulli,
    /// Poisson(lambda) arrivals per slot.
    PoissonCounts,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassParams {
    pub lambda: f64,
    pub q: Vec<f64>,
    pub mu: Vec<f64>,
    #[serde(default = "default_cost")]
    pub cost: f64,
}

fn default_cost() -> f64 {
    1.0
}

impl ClassParams {
    pub fn new(lambda: f64, q: Vec<f64>, mu: Vec<f64>) -> Self {
        Self {
            lambda,
            q,
            mu,
            cost: 1.0,
        }
    }

    pub fn num_states(&self) -> usize {
        self.q.len()
    }

    /// Index of the best channel state (the highest one).
    pub fn best_state(&self) -> usize {
        self.q.len() - 1
    }

    pub fn best_mu(&self) -> f64 {
        self.mu[self.best_state()]
    }

    /// States that can actually occur (q > 0).
    pub fn support(&self) -> impl Iterator<Item = usize> + '_ {
        self.q
            .iter()
            .enumerate()
            .filter(|(_, &q)| q > 0.0)
            .map(|(n, _)| n)
    }

    /// Mean departure probability of a served user in a random state.
    pub fn mean_mu(&self) -> f64 {
        self.q.iter().zip(&self.mu).map(|(q, m)| q * m).sum()
    }

    fn violations(&self, class: usize, out: &mut Vec<Violation>) {
        let mut push = |field: &'static str, message: String| {
            out.push(Violation {
                class,
                field,
                message,
            })
        };
        if self.q.is_empty() {
            push("q", "no channel states".into());
            return;
        }
        if self.q.len() != self.mu.len() {
            push(
                "mu",
                format!(
                    "length {} does not match q length {}",
                    self.mu.len(),
                    self.q.len()
                ),
            );
            return;
        }
        if self.q.iter().any(|q| !(0.0..=1.0).contains(q)) {
            push("q", "entries must lie in [0,1]".into());
        }
        let sum: f64 = self.q.iter().sum();
        if (sum - 1.0).abs() > PROB_SUM_TOL {
            push("q", format!("q does not sum to 1 (sum = {sum})"));
        }
        if self.mu.iter().any(|m| !(0.0..=1.0).contains(m)) {
            push("mu", "entries must lie in [0,1]".into());
        }
        if self.mu.windows(2).any(|w| w[1] < w[0]) {
            push("mu", "mu not nondecreasing".into());
        }
        let n = self.best_state();
        if !(self.q[n] * self.mu[n] > 0.0) {
            push("q", "best state must have q > 0 and mu > 0".into());
        }
        if !(self.lambda >= 0.0) || !self.lambda.is_finite() {
            push("lambda", "must be finite and nonnegative".into());
        }
        if !(self.cost > 0.0) || !self.cost.is_finite() {
            push("cost", "must be finite and positive".into());
        }
    }
}

/// Transmission rates turned into departure probabilities.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RateParams {
    /// Per-state transmission rate (kb/s).
    pub rates: Vec<f64>,
    /// Slot length t_c (seconds).
    pub slot_length: f64,
    /// Mean service requirement E(B) (kb).
    pub mean_size: f64,
}

/// `mu[n] = rates[n] * slot_length / mean_size`.
pub fn mu_from_rates(rp: &RateParams) -> Result<Vec<f64>, ConfigError> {
    if !(rp.slot_length > 0.0) {
        return Err(ConfigError::BadRates("slot_length must be positive".into()));
    }
    if !(rp.mean_size > 0.0) {
        return Err(ConfigError::BadRates("mean_size must be positive".into()));
    }
    if rp.rates.iter().any(|r| !(*r >= 0.0)) {
        return Err(ConfigError::BadRates("rates must be nonnegative".into()));
    }
    if rp.rates.windows(2).any(|w| w[1] < w[0]) {
        return Err(ConfigError::BadRates("rates must be nondecreasing".into()));
    }
    rp.rates
        .iter()
        .enumerate()
        .map(|(n, r)| {
            let mu = r * rp.slot_length / rp.mean_size;
            if mu > 1.0 {
                Err(ConfigError::RateTooHigh {
                    state: n + 1,
                    value: mu,
                })
            } else {
                Ok(mu)
            }
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SystemConfig {
    pub classes: Vec<ClassParams>,
    #[serde(default)]
    pub arrival_kind: ArrivalKind,
    #[serde(default)]
    pub seed: u64,
}

impl SystemConfig {
    pub fn new(classes: Vec<ClassParams>) -> Self {
        Self {
            classes,
            arrival_kind: ArrivalKind::Bernoulli,
            seed: 0,
        }
    }

    pub fn num_classes(&self) -> usize {
        self.classes.len()
    }

    /// Load of the system at full best-state service: `sum lambda_k / mu_{k,N_k}`.
    pub fn rho(&self) -> f64 {
        self.classes.iter().map(|c| c.lambda / c.best_mu()).sum()
    }

    pub fn with_lambda(mut self, class: usize, lambda: f64) -> Self {
        self.classes[class].lambda = lambda;
        self
    }

    /// Checks every invariant and reports all violations at once.
    pub fn validate(self) -> Result<Self, ConfigError> {
        let v = self.violations();
        if v.is_empty() {
            Ok(self)
        } else {
            Err(ConfigError::Invalid(v))
        }
    }

    pub fn violations(&self) -> Vec<Violation> {
        let mut out = Vec::new();
        if self.classes.is_empty() {
            out.push(Violation {
                class: 0,
                field: "classes",
                message: "at least one class required".into(),
            });
        }
        for (k, c) in self.classes.iter().enumerate() {
            c.violations(k + 1, &mut out);
            if self.arrival_kind == ArrivalKind::Bernoulli && c.lambda > 1.0 {
                out.push(Violation {
                    class: k + 1,
                    field: "lambda",
                    message: "Bernoulli arrivals need lambda <= 1".into(),
                });
            }
        }
        out
    }

    pub fn from_json_str(s: &str) -> Result<Self, ConfigError> {
        let raw: RawConfig =
            serde_json::from_str(s).map_err(|e| ConfigError::Parse(e.to_string()))?;
        raw.resolve()?.validate()
    }

    pub fn to_json_string(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    /// Two-class CDMA 1xEV-DO system: 11 rate levels, class 1 on five of
    /// them, class 2 on three, `lambda_2 = 0.05`, unit holding costs.
    pub fn cdma_table1(lambda1: f64) -> Self {
        let q1 = vec![0.0, 0.0, 0.05, 0.0, 0.23, 0.0, 0.42, 0.0, 0.21, 0.0, 0.09];
        let q2 = vec![0.0, 0.0, 0.15, 0.0, 0.33, 0.0, 0.52];
        // Unused states carry rate-derived values so that mu stays monotone.
        let mu1 = vec![
            0.006, 0.012, 0.017, 0.025, 0.033, 0.05, 0.1, 0.15, 0.2, 0.3, 0.4,
        ];
        let mu2 = mu1[..7].to_vec();
        Self::new(vec![
            ClassParams::new(lambda1, q1, mu1),
            ClassParams::new(0.05, q2, mu2),
        ])
    }
}

/// CDMA 1xEV-DO transmission rates (kb/s), slot length and mean size.
pub const CDMA_RATES: [f64; 11] = [
    38.4, 76.8, 102.6, 153.6, 204.8, 307.2, 614.4, 921.6, 1228.8, 1843.2, 2457.6,
];
pub const CDMA_SLOT_LENGTH: f64 = 1.67e-3;
pub const CDMA_MEAN_SIZE: f64 = 10.257;

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawConfig {
    classes: Vec<RawClass>,
    #[serde(default)]
    arrival_kind: ArrivalKind,
    #[serde(default)]
    seed: u64,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawClass {
    lambda: f64,
    q: Vec<f64>,
    mu: Option<Vec<f64>>,
    rate_params: Option<RateParams>,
    #[serde(default = "default_cost")]
    cost: f64,
}

impl RawConfig {
    fn resolve(self) -> Result<SystemConfig, ConfigError> {
        let classes = self
            .classes
            .into_iter()
            .enumerate()
            .map(|(k, c)| {
                let mu = match (c.mu, c.rate_params) {
                    (Some(mu), None) => mu,
                    (None, Some(rp)) => mu_from_rates(&rp)?,
                    (Some(_), Some(_)) => {
                        return Err(ConfigError::Parse(format!(
                            "class {}: give either mu or rate_params, not both",
                            k + 1
                        )))
                    }
                    (None, None) => {
                        return Err(ConfigError::Parse(format!(
                            "class {}: missing mu or rate_params",
                            k + 1
                        )))
                    }
                };
                Ok(ClassParams {
                    lambda: c.lambda,
                    q: c.q,
                    mu,
                    cost: c.cost,
                })
            })
            .collect::<Result<Vec<_>, _>>()?;
        Ok(SystemConfig {
            classes,
            arrival_kind: self.arrival_kind,
            seed: self.seed,
        })
    }
}

pub fn load_config(path: impl AsRef<Path>) -> Result<SystemConfig, ConfigError> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
        path: path.display().to_string(),
        source,
    })?;
    SystemConfig::from_json_str(&text)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rp(rate: f64) -> RateParams {
        RateParams {
            rates: vec![rate],
            slot_length: CDMA_SLOT_LENGTH,
            mean_size: CDMA_MEAN_SIZE,
        }
    }

    #[test]
    fn mu_from_rates_cdma_values() {
        assert!((mu_from_rates(&rp(2457.6)).unwrap()[0] - 0.400).abs() <= 1e-3);
        assert!((mu_from_rates(&rp(1228.8)).unwrap()[0] - 0.200).abs() <= 1e-3);
        assert_eq!(mu_from_rates(&rp(0.0)).unwrap()[0], 0.0);
    }

    #[test]
    fn mu_from_rates_rejects_values_above_one() {
        let err = mu_from_rates(&RateParams {
            rates: vec![1.0, 20.0],
            slot_length: 1.0,
            mean_size: 10.0,
        })
        .unwrap_err();
        assert!(err.to_string().contains("geometric approximation invalid"));
    }

    #[test]
    fn table1_mu_reproduced_from_rates() {
        let mu = mu_from_rates(&RateParams {
            rates: CDMA_RATES.to_vec(),
            slot_length: CDMA_SLOT_LENGTH,
            mean_size: CDMA_MEAN_SIZE,
        })
        .unwrap();
        let cfg = SystemConfig::cdma_table1(0.14);
        for class in &cfg.classes {
            for n in class.support() {
                assert!((mu[n] - class.mu[n]).abs() <= 1e-3, "state {}", n + 1);
            }
        }
    }

    #[test]
    fn table1_is_valid() {
        let cfg = SystemConfig::cdma_table1(0.14).validate().unwrap();
        assert!((cfg.rho() - 0.85).abs() < 1e-12);
        assert!((cfg.classes[0].mean_mu() - 0.12844).abs() < 1e-12);
    }

    #[test]
    fn validate_reports_every_violation() {
        let cfg = SystemConfig::new(vec![
            ClassParams::new(0.1, vec![0.5, 0.6], vec![0.1, 0.2]),
            ClassParams::new(0.1, vec![0.5, 0.5], vec![0.2, 0.1]),
        ]);
        let ConfigError::Invalid(v) = cfg.validate().unwrap_err() else {
            panic!("expected violations")
        };
        assert!(v
            .iter()
            .any(|v| v.class == 1 && v.message.contains("q does not sum to 1")));
        assert!(v
            .iter()
            .any(|v| v.class == 2 && v.message.contains("mu not nondecreasing")));
    }

    #[test]
    fn bernoulli_lambda_above_one_rejected() {
        let cfg = SystemConfig::new(vec![ClassParams::new(1.5, vec![1.0], vec![0.5])]);
        assert!(cfg.clone().validate().is_err());
        let mut poisson = cfg;
        poisson.arrival_kind = ArrivalKind::PoissonCounts;
        assert!(poisson.validate().is_ok());
    }

    #[test]
    fn minimal_config_parses() {
        let cfg =
            SystemConfig::from_json_str(r#"{"classes":[{"lambda":0.1,"q":[1.0],"mu":[0.5]}]}"#)
                .unwrap();
        assert_eq!(cfg.num_classes(), 1);
        assert_eq!(cfg.classes[0].cost, 1.0);
        assert_eq!(cfg.arrival_kind, ArrivalKind::Bernoulli);
    }

    #[test]
    fn empty_input_is_parse_error() {
        assert!(matches!(
            SystemConfig::from_json_str(""),
            Err(ConfigError::Parse(_))
        ));
    }

    #[test]
    fn rate_params_derive_mu_at_load() {
        let cfg = SystemConfig::from_json_str(
            r#"{"classes":[{"lambda":0.1,"q":[0.5,0.5],
                "rate_params":{"rates":[1228.8,2457.6],"slot_length":0.00167,"mean_size":10.257}}]}"#,
        )
        .unwrap();
        assert!((cfg.classes[0].mu[1] - 0.4).abs() < 1e-3);
    }
}
