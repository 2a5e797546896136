//! Priority-index scheduling policies and tie-breaking rules.
//!
//! A [`Policy`] is a [`PolicySpec`] compiled against a [`SystemConfig`]: the
//! index of every reachable (class, state) pair is computed once and the
//! distinct index values are ranked into *levels* (level 0 is the highest
//! index). Everything downstream compares levels, so floating-point ties are
//! decided in exactly one place.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use thiserror::Error;

use crate::model::SystemConfig;
use crate::simulator::Occupancy;

/// Relative tolerance under which two finite indices count as equal.
pub const INDEX_TIE_RTOL: f64 = 1e-12;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PolicyError {
    #[error("unknown policy `{0}` (expected sb, pi, pb, rb, cmu, weight:<w1,..>, custom:<file>)")]
    UnknownPolicy(String),
    #[error("unknown tie-break rule `{0}` (expected myopic, random:<w1,..>, priority:<perm>)")]
    UnknownTie(String),
    #[error("bad number list `{0}`")]
    BadList(String),
    #[error("expected {expected} per-class values, got {got}")]
    WrongLength { expected: usize, got: usize },
    #[error("random tie weights must be nonnegative and not all zero")]
    BadWeights,
    #[error("priority order must be a permutation of 1..{0}")]
    BadPermutation(usize),
    #[error("custom index table: {0}")]
    BadCustom(String),
}

#[derive(Debug, Clone, PartialEq)]
pub enum IndexRule {
    ScoreBased,
    PotentialImprovement,
    WeightBased(Vec<f64>),
    CMu,
    RelativeBest,
    ProportionallyBest,
    /// Index table per class and state; entries for q = 0 states are ignored.
    Custom(Vec<Vec<f64>>),
}

#[derive(Debug, Clone, PartialEq)]
pub enum TieBreak {
    /// Prefer the largest `c_k * mu_{k,N_k}`; remaining ties go to the lowest class.
    Myopic,
    /// Pick class k with probability proportional to its weight among the tied set.
    RandomWeights(Vec<f64>),
    /// Fixed class ranking, highest priority first (0-based class ids).
    PriorityOrder(Vec<usize>),
}

#[derive(Debug, Clone, PartialEq)]
pub struct PolicySpec {
    pub index_rule: IndexRule,
    pub tie_break: TieBreak,
}

impl PolicySpec {
    pub fn new(index_rule: IndexRule, tie_break: TieBreak) -> Self {
        Self {
            index_rule,
            tie_break,
        }
    }

    /// The rule with the tie-break it is usually paired with: myopic for
    /// PI, uniform random otherwise.
    pub fn with_default_tie(index_rule: IndexRule, num_classes: usize) -> Self {
        let tie_break = match index_rule {
            IndexRule::PotentialImprovement => TieBreak::Myopic,
            _ => TieBreak::RandomWeights(vec![1.0; num_classes]),
        };
        Self::new(index_rule, tie_break)
    }

    pub fn sb(k: usize) -> Self {
        Self::with_default_tie(IndexRule::ScoreBased, k)
    }
    pub fn pi(k: usize) -> Self {
        Self::with_default_tie(IndexRule::PotentialImprovement, k)
    }
    pub fn pb(k: usize) -> Self {
        Self::with_default_tie(IndexRule::ProportionallyBest, k)
    }
    pub fn rb(k: usize) -> Self {
        Self::with_default_tie(IndexRule::RelativeBest, k)
    }
    pub fn cmu(k: usize) -> Self {
        Self::with_default_tie(IndexRule::CMu, k)
    }

    pub fn with_tie(mut self, tie: TieBreak) -> Self {
        self.tie_break = tie;
        self
    }
}

impl fmt::Display for IndexRule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            IndexRule::ScoreBased => write!(f, "sb"),
            IndexRule::PotentialImprovement => write!(f, "pi"),
            IndexRule::ProportionallyBest => write!(f, "pb"),
            IndexRule::RelativeBest => write!(f, "rb"),
            IndexRule::CMu => write!(f, "cmu"),
            IndexRule::WeightBased(w) => write!(f, "weight:{}", join(w)),
            IndexRule::Custom(_) => write!(f, "custom"),
        }
    }
}

impl fmt::Display for TieBreak {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            TieBreak::Myopic => write!(f, "myopic"),
            TieBreak::RandomWeights(w) => write!(f, "random:{}", join(w)),
            TieBreak::PriorityOrder(p) => {
                let p: Vec<String> = p.iter().map(|k| (k + 1).to_string()).collect();
                write!(f, "priority:{}", p.join(","))
            }
        }
    }
}

fn join(v: &[f64]) -> String {
    v.iter()
        .map(|x| x.to_string())
        .collect::<Vec<_>>()
        .join(",")
}

fn parse_list(s: &str) -> Result<Vec<f64>, PolicyError> {
    s.split(',')
        .map(|t| t.trim().parse::<f64>())
        .collect::<Result<Vec<_>, _>>()
        .map_err(|_| PolicyError::BadList(s.to_string()))
}

impl FromStr for TieBreak {
    type Err = PolicyError;

    /// `myopic`, `random:<w1,w2,..>` or `priority:<1-based permutation>`.
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let s = s.trim();
        if s.eq_ignore_ascii_case("myopic") {
            return Ok(TieBreak::Myopic);
        }
        if let Some(rest) = s.strip_prefix("random:") {
            return Ok(TieBreak::RandomWeights(parse_list(rest)?));
        }
        if let Some(rest) = s.strip_prefix("priority:") {
            let perm = parse_list(rest)?
                .into_iter()
                .map(|x| {
                    if x >= 1.0 && x.fract() == 0.0 {
                        Ok(x as usize - 1)
                    } else {
                        Err(PolicyError::BadList(rest.to_string()))
                    }
                })
                .collect::<Result<Vec<_>, _>>()?;
            return Ok(TieBreak::PriorityOrder(perm));
        }
        Err(PolicyError::UnknownTie(s.to_string()))
    }
}

/// Parses the index-rule part of a policy string. `custom:<file>` is
/// resolved by the caller (it needs file access); here it is an error.
impl FromStr for IndexRule {
    type Err = PolicyError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let s = s.trim();
        match s.to_ascii_lowercase().as_str() {
            "sb" => return Ok(IndexRule::ScoreBased),
            "pi" => return Ok(IndexRule::PotentialImprovement),
            "pb" => return Ok(IndexRule::ProportionallyBest),
            "rb" => return Ok(IndexRule::RelativeBest),
            "cmu" => return Ok(IndexRule::CMu),
            _ => {}
        }
        if let Some(rest) = s.strip_prefix("weight:") {
            return Ok(IndexRule::WeightBased(parse_list(rest)?));
        }
        Err(PolicyError::UnknownPolicy(s.to_string()))
    }
}

/// Parses a custom index table: a JSON array (one entry per class) of
/// arrays (one entry per state). `null` marks unused states.
pub fn parse_custom_table(json: &str) -> Result<IndexRule, PolicyError> {
    let raw: Vec<Vec<Option<f64>>> =
        serde_json::from_str(json).map_err(|e| PolicyError::BadCustom(e.to_string()))?;
    Ok(IndexRule::Custom(
        raw.into_iter()
            .map(|row| row.into_iter().map(|v| v.unwrap_or(f64::NAN)).collect())
            .collect(),
    ))
}

/// Index of class `k` in state `n` (0-based). PI returns `+inf` at the best state.
pub fn index_value(rule: &IndexRule, cfg: &SystemConfig, k: usize, n: usize) -> f64 {
    let c = &cfg.classes[k];
    match rule {
        IndexRule::ScoreBased => c.q[..=n].iter().sum(),
        IndexRule::PotentialImprovement => {
            let gain: f64 = (n + 1..c.num_states())
                .map(|m| c.q[m] * (c.mu[m] - c.mu[n]))
                .sum();
            if gain > 0.0 {
                c.cost * c.mu[n] / gain
            } else {
                f64::INFINITY
            }
        }
        IndexRule::WeightBased(w) => w[k] * c.mu[n],
        IndexRule::CMu => c.cost * c.mu[n],
        IndexRule::RelativeBest => c.mu[n] / c.mean_mu(),
        IndexRule::ProportionallyBest => c.mu[n] / c.best_mu(),
        IndexRule::Custom(t) => t[k][n],
    }
}

fn same_index(a: f64, b: f64) -> bool {
    a == b
        || (a.is_finite()
            && b.is_finite()
            && (a - b).abs() <= INDEX_TIE_RTOL * a.abs().max(b.abs()))
}

/// Serve decision for one slot. Class and state are 0-based.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ServeDecision {
    Serve { class: usize, state: usize },
    Idle,
}

/// States of one class sharing an index level, in serving preference
/// (highest mu first, then highest state).
#[derive(Debug, Clone)]
pub struct LevelGroup {
    pub level: usize,
    pub states: Vec<usize>,
    /// Total q over `states`.
    pub mass: f64,
}

#[derive(Debug, Clone)]
pub struct Policy {
    spec: PolicySpec,
    indices: Vec<Vec<f64>>,
    levels: Vec<Vec<Option<usize>>>,
    /// Per class, level groups ordered best level first.
    groups: Vec<Vec<LevelGroup>>,
    level_values: Vec<f64>,
    myopic_key: Vec<f64>,
}

impl Policy {
    pub fn new(spec: PolicySpec, cfg: &SystemConfig) -> Result<Self, PolicyError> {
        let k_count = cfg.num_classes();
        match &spec.index_rule {
            IndexRule::WeightBased(w) if w.len() != k_count => {
                return Err(PolicyError::WrongLength {
                    expected: k_count,
                    got: w.len(),
                })
            }
            IndexRule::WeightBased(w) if w.iter().any(|x| !(*x > 0.0) || !x.is_finite()) => {
                return Err(PolicyError::BadCustom(
                    "weights must be positive and finite".into(),
                ))
            }
            IndexRule::Custom(t) => {
                if t.len() != k_count {
                    return Err(PolicyError::WrongLength {
                        expected: k_count,
                        got: t.len(),
                    });
                }
                for (k, row) in t.iter().enumerate() {
                    let c = &cfg.classes[k];
                    if row.len() != c.num_states() {
                        return Err(PolicyError::BadCustom(format!(
                            "class {} has {} entries, expected {}",
                            k + 1,
                            row.len(),
                            c.num_states()
                        )));
                    }
                    if c.support().any(|n| !row[n].is_finite()) {
                        return Err(PolicyError::BadCustom(format!(
                            "class {}: every state with q > 0 needs a finite index",
                            k + 1
                        )));
                    }
                }
            }
            _ => {}
        }
        match &spec.tie_break {
            TieBreak::RandomWeights(w) => {
                if w.len() != k_count {
                    return Err(PolicyError::WrongLength {
                        expected: k_count,
                        got: w.len(),
                    });
                }
                if w.iter().any(|x| !(*x >= 0.0) || !x.is_finite()) || w.iter().all(|x| *x == 0.0) {
                    return Err(PolicyError::BadWeights);
                }
            }
            TieBreak::PriorityOrder(p) => {
                let mut seen = vec![false; k_count];
                if p.len() != k_count {
                    return Err(PolicyError::BadPermutation(k_count));
                }
                for &k in p {
                    if k >= k_count || seen[k] {
                        return Err(PolicyError::BadPermutation(k_count));
                    }
                    seen[k] = true;
                }
            }
            TieBreak::Myopic => {}
        }

        let indices: Vec<Vec<f64>> = cfg
            .classes
            .iter()
            .enumerate()
            .map(|(k, c)| {
                (0..c.num_states())
                    .map(|n| {
                        if c.q[n] > 0.0 {
                            index_value(&spec.index_rule, cfg, k, n)
                        } else {
                            f64::NAN
                        }
                    })
                    .collect()
            })
            .collect();

        // Rank distinct values, descending, merging near-equal ones.
        let mut all: Vec<f64> = indices
            .iter()
            .flatten()
            .copied()
            .filter(|v| !v.is_nan())
            .collect();
        all.sort_by(|a, b| b.partial_cmp(a).expect("no NaN"));
        let mut level_values: Vec<f64> = Vec::new();
        for v in all {
            match level_values.last() {
                Some(&last) if same_index(last, v) => {}
                _ => level_values.push(v),
            }
        }
        let level_of = |v: f64| {
            level_values
                .iter()
                .position(|&l| same_index(l, v))
                .expect("value was ranked")
        };
        let levels: Vec<Vec<Option<usize>>> = indices
            .iter()
            .map(|row| {
                row.iter()
                    .map(|&v| (!v.is_nan()).then(|| level_of(v)))
                    .collect()
            })
            .collect();

        let groups = cfg
            .classes
            .iter()
            .enumerate()
            .map(|(k, c)| {
                let mut g: Vec<LevelGroup> = Vec::new();
                let mut present: Vec<usize> = c.support().collect();
                present.sort_by(|&a, &b| {
                    levels[k][a]
                        .cmp(&levels[k][b])
                        .then(c.mu[b].partial_cmp(&c.mu[a]).expect("finite mu"))
                        .then(b.cmp(&a))
                });
                for n in present {
                    let lv = levels[k][n].expect("support state has a level");
                    match g.last_mut() {
                        Some(last) if last.level == lv => {
                            last.states.push(n);
                            last.mass += c.q[n];
                        }
                        _ => g.push(LevelGroup {
                            level: lv,
                            states: vec![n],
                            mass: c.q[n],
                        }),
                    }
                }
                g
            })
            .collect();

        let myopic_key = cfg.classes.iter().map(|c| c.cost * c.best_mu()).collect();

        Ok(Self {
            spec,
            indices,
            levels,
            groups,
            level_values,
            myopic_key,
        })
    }

    pub fn spec(&self) -> &PolicySpec {
        &self.spec
    }

    pub fn num_classes(&self) -> usize {
        self.groups.len()
    }

    /// Cached index; NaN for states with q = 0.
    pub fn index(&self, k: usize, n: usize) -> f64 {
        self.indices[k][n]
    }

    pub fn level(&self, k: usize, n: usize) -> Option<usize> {
        self.levels[k][n]
    }

    pub fn num_levels(&self) -> usize {
        self.level_values.len()
    }

    pub fn level_value(&self, level: usize) -> f64 {
        self.level_values[level]
    }

    pub fn groups(&self, k: usize) -> &[LevelGroup] {
        &self.groups[k]
    }

    /// The state a saturated class is served in (every q > 0 state present).
    pub fn saturated_top(&self, k: usize) -> (usize, usize) {
        let g = &self.groups[k][0];
        (g.level, g.states[0])
    }

    /// Probability that each class in `tied` wins the cross-class tie.
    /// Returned in the same order as `tied`.
    pub fn tie_probabilities(&self, tied: &[usize]) -> Vec<f64> {
        let mut p = vec![0.0; tied.len()];
        if tied.len() == 1 {
            p[0] = 1.0;
            return p;
        }
        match &self.spec.tie_break {
            TieBreak::Myopic => {
                let mut best = 0;
                for i in 1..tied.len() {
                    if self.myopic_key[tied[i]] > self.myopic_key[tied[best]] {
                        best = i;
                    }
                }
                p[best] = 1.0;
            }
            TieBreak::RandomWeights(w) => {
                let total: f64 = tied.iter().map(|&k| w[k]).sum();
                if total > 0.0 {
                    for (i, &k) in tied.iter().enumerate() {
                        p[i] = w[k] / total;
                    }
                } else {
                    p.fill(1.0 / tied.len() as f64);
                }
            }
            TieBreak::PriorityOrder(order) => {
                let winner = order
                    .iter()
                    .find(|k| tied.contains(k))
                    .expect("permutation covers every class");
                let i = tied.iter().position(|k| k == winner).unwrap();
                p[i] = 1.0;
            }
        }
        p
    }

    /// Resolves a cross-class tie by sampling from [`Self::tie_probabilities`].
    pub fn break_tie<R: Rng + ?Sized>(&self, tied: &[usize], rng: &mut R) -> usize {
        if tied.len() == 1 {
            return tied[0];
        }
        match &self.spec.tie_break {
            TieBreak::RandomWeights(_) => {
                let p = self.tie_probabilities(tied);
                let u: f64 = rng.random();
                let mut acc = 0.0;
                for (i, &pi) in p.iter().enumerate() {
                    acc += pi;
                    if u < acc {
                        return tied[i];
                    }
                }
                // rounding: fall back to the last class with positive weight
                tied[p.iter().rposition(|&x| x > 0.0).unwrap_or(tied.len() - 1)]
            }
            _ => {
                let p = self.tie_probabilities(tied);
                tied[p.iter().position(|&x| x == 1.0).unwrap()]
            }
        }
    }

    /// Serves the present user with the highest index.
    pub fn select_user<R: Rng + ?Sized>(&self, occ: &Occupancy, rng: &mut R) -> ServeDecision {
        let mut best_level = usize::MAX;
        let mut tied: Vec<usize> = Vec::new();
        let mut chosen_state = vec![0usize; self.num_classes()];
        for k in 0..self.num_classes() {
            let counts = occ.counts(k);
            let top = self.groups[k].iter().find_map(|g| {
                g.states
                    .iter()
                    .find(|&&n| counts[n] > 0)
                    .map(|&n| (g.level, n))
            });
            if let Some((lv, n)) = top {
                chosen_state[k] = n;
                if lv < best_level {
                    best_level = lv;
                    tied.clear();
                    tied.push(k);
                } else if lv == best_level {
                    tied.push(k);
                }
            }
        }
        if tied.is_empty() {
            return ServeDecision::Idle;
        }
        let class = self.break_tie(&tied, rng);
        ServeDecision::Serve {
            class,
            state: chosen_state[class],
        }
    }

    /// Best Rate: a best-state user is served whenever one is present.
    pub fn is_best_rate(&self, cfg: &SystemConfig) -> bool {
        for (k, ck) in cfg.classes.iter().enumerate() {
            let best = self.levels[k][ck.best_state()].expect("best state has q > 0");
            for (j, cj) in cfg.classes.iter().enumerate() {
                for n in cj.support().filter(|&n| n != cj.best_state()) {
                    let lv = self.levels[j][n].expect("support state");
                    if lv < best {
                        return false;
                    }
                    // A cross-class tie can hand the slot to a non-best user.
                    if lv == best && j != k {
                        return false;
                    }
                    // Within a class, equal levels are served highest-mu first.
                    if lv == best && j == k && cj.mu[n] > cj.best_mu() {
                        return false;
                    }
                }
            }
        }
        true
    }

    pub fn is_brp(&self, cfg: &SystemConfig) -> bool {
        self.is_best_rate(cfg) && self.spec.tie_break == TieBreak::Myopic
    }

    /// Classes ordered by `c_k mu_{k,N_k}` (myopic) or the explicit priority.
    pub fn priority_order(&self) -> Option<Vec<usize>> {
        match &self.spec.tie_break {
            TieBreak::Myopic => {
                let mut order: Vec<usize> = (0..self.num_classes()).collect();
                order.sort_by(|&a, &b| {
                    self.myopic_key[b]
                        .partial_cmp(&self.myopic_key[a])
                        .expect("finite")
                });
                Some(order)
            }
            TieBreak::PriorityOrder(p) => Some(p.clone()),
            TieBreak::RandomWeights(_) => None,
        }
    }
}
