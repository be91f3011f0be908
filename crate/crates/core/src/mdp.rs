//! Finite episodic MDPs with exact dynamic programming.
//!
//! Stages are zero-based in code: stage `0` is the first decision step and
//! stage `H - 1` the last. Every episode starts from the fixed initial state.
//! Ties in `max`/`argmax` over actions resolve to the lowest action index.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Tolerance on row sums of probability tables.
pub const STOCHASTIC_TOL: f64 = 1e-12;

/// One task's finite episodic MDP with stage-indexed dynamics and rewards.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TabularMDP {
    num_states: usize,
    num_actions: usize,
    horizon: usize,
    gamma: f64,
    initial_state: usize,
    /// `P_h(s'|s,a)`, laid out `[h][s][a][s']`.
    transitions: Vec<f64>,
    /// `r_h(s,a)`, laid out `[h][s][a]`.
    rewards: Vec<f64>,
}

impl TabularMDP {
    pub fn new(
        num_states: usize,
        num_actions: usize,
        horizon: usize,
        gamma: f64,
        transitions: Vec<f64>,
        rewards: Vec<f64>,
    ) -> Result<Self> {
        let mdp = Self {
            num_states,
            num_actions,
            horizon,
            gamma,
            initial_state: 0,
            transitions,
            rewards,
        };
        mdp.validate()?;
        Ok(mdp)
    }

    /// Checks every structural invariant; used after deserialization too.
    pub fn validate(&self) -> Result<()> {
        let (s, k, h) = (self.num_states, self.num_actions, self.horizon);
        if s == 0 || k == 0 || h == 0 {
            return Err(Error::invalid("S, K and H must be positive"));
        }
        if !(self.gamma > 0.0 && self.gamma <= 1.0) {
            return Err(Error::invalid(format!("γ must lie in (0,1], got {}", self.gamma)));
        }
        if self.initial_state >= s {
            return Err(Error::invalid("initial state out of range"));
        }
        if self.transitions.len() != h * s * k * s {
            return Err(Error::DimensionMismatch(format!(
                "transition table has {} entries, expected {}",
                self.transitions.len(),
                h * s * k * s
            )));
        }
        if self.rewards.len() != h * s * k {
            return Err(Error::DimensionMismatch(format!(
                "reward table has {} entries, expected {}",
                self.rewards.len(),
                h * s * k
            )));
        }
        for (row_idx, row) in self.transitions.chunks(s).enumerate() {
            if row.iter().any(|&p| !(p >= 0.0) || !p.is_finite()) {
                return Err(Error::invalid(format!("negative or non-finite probability in row {row_idx}")));
            }
            let total: f64 = row.iter().sum();
            if (total - 1.0).abs() > STOCHASTIC_TOL {
                return Err(Error::invalid(format!(
                    "transition row {row_idx} sums to {total}, not 1"
                )));
            }
        }
        if let Some(r) = self.rewards.iter().find(|&&r| !(0.0..=1.0).contains(&r)) {
            return Err(Error::invalid(format!("reward {r} outside [0,1]")));
        }
        Ok(())
    }

    pub fn num_states(&self) -> usize {
        self.num_states
    }

    pub fn num_actions(&self) -> usize {
        self.num_actions
    }

    pub fn horizon(&self) -> usize {
        self.horizon
    }

    pub fn gamma(&self) -> f64 {
        self.gamma
    }

    pub fn initial_state(&self) -> usize {
        self.initial_state
    }

    /// Next-state distribution `P_h(·|s,a)`.
    pub fn next_state_probs(&self, h: usize, s: usize, a: usize) -> &[f64] {
        let n = self.num_states;
        let start = ((h * n + s) * self.num_actions + a) * n;
        &self.transitions[start..start + n]
    }

    pub fn reward(&self, h: usize, s: usize, a: usize) -> f64 {
        self.rewards[(h * self.num_states + s) * self.num_actions + a]
    }

    /// Same dynamics with a different discount.
    pub fn with_gamma(&self, gamma: f64) -> Result<Self> {
        let mut out = self.clone();
        out.gamma = gamma;
        out.validate()?;
        Ok(out)
    }

    /// Largest possible return from any stage: `(1-γ^H)/(1-γ)`, or `H` at γ = 1.
    pub fn q_max(&self) -> f64 {
        q_max(self.gamma, self.horizon)
    }

    /// Number of deterministic stage-indexed policies, `(K^S)^H`, as a float.
    pub fn num_deterministic_policies(&self) -> f64 {
        (self.num_actions as f64).powf((self.num_states * self.horizon) as f64)
    }

    /// Backup `r_h(s,a) + γ Σ P_h(s'|s,a) v(s')` for every (s,a) into `out`.
    fn backup(&self, h: usize, next_values: Option<&[f64]>, out: &mut [f64]) {
        let (ns, na) = (self.num_states, self.num_actions);
        for s in 0..ns {
            for a in 0..na {
                let mut q = self.reward(h, s, a);
                if let Some(v) = next_values {
                    let p = self.next_state_probs(h, s, a);
                    let ev: f64 = p.iter().zip(v).map(|(p, v)| p * v).sum();
                    q += self.gamma * ev;
                }
                out[s * na + a] = q;
            }
        }
    }

    fn check_compatible(&self, s: usize, k: usize, h: usize, what: &str) -> Result<()> {
        if (s, k, h) != (self.num_states, self.num_actions, self.horizon) {
            return Err(Error::DimensionMismatch(format!(
                "{what} has shape (S={s}, K={k}, H={h}) but the MDP has (S={}, K={}, H={})",
                self.num_states, self.num_actions, self.horizon
            )));
        }
        Ok(())
    }
}

pub fn q_max(gamma: f64, horizon: usize) -> f64 {
    if gamma == 1.0 {
        horizon as f64
    } else {
        (1.0 - gamma.powi(horizon as i32)) / (1.0 - gamma)
    }
}

/// Per-stage action-value table `q_h(s,a)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QTable {
    num_states: usize,
    num_actions: usize,
    horizon: usize,
    values: Vec<f64>,
}

impl QTable {
    pub fn zeros(num_states: usize, num_actions: usize, horizon: usize) -> Self {
        Self {
            num_states,
            num_actions,
            horizon,
            values: vec![0.0; num_states * num_actions * horizon],
        }
    }

    pub fn from_values(num_states: usize, num_actions: usize, horizon: usize, values: Vec<f64>) -> Result<Self> {
        if values.len() != num_states * num_actions * horizon {
            return Err(Error::DimensionMismatch(format!(
                "Q table has {} entries, expected {}",
                values.len(),
                num_states * num_actions * horizon
            )));
        }
        Ok(Self {
            num_states,
            num_actions,
            horizon,
            values,
        })
    }

    pub fn num_states(&self) -> usize {
        self.num_states
    }

    pub fn num_actions(&self) -> usize {
        self.num_actions
    }

    pub fn horizon(&self) -> usize {
        self.horizon
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        (self.num_states, self.num_actions, self.horizon)
    }

    pub fn get(&self, h: usize, s: usize, a: usize) -> f64 {
        self.values[(h * self.num_states + s) * self.num_actions + a]
    }

    pub fn set(&mut self, h: usize, s: usize, a: usize, value: f64) {
        self.values[(h * self.num_states + s) * self.num_actions + a] = value;
    }

    /// Stage slice laid out `[s][a]`.
    pub fn stage(&self, h: usize) -> &[f64] {
        let len = self.num_states * self.num_actions;
        &self.values[h * len..(h + 1) * len]
    }

    pub fn stage_mut(&mut self, h: usize) -> &mut [f64] {
        let len = self.num_states * self.num_actions;
        &mut self.values[h * len..(h + 1) * len]
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    /// Lowest-index maximizing action at `(h, s)`.
    pub fn argmax(&self, h: usize, s: usize) -> usize {
        argmax(&self.stage(h)[s * self.num_actions..(s + 1) * self.num_actions])
    }

    pub fn max(&self, h: usize, s: usize) -> f64 {
        let row = &self.stage(h)[s * self.num_actions..(s + 1) * self.num_actions];
        row[argmax(row)]
    }

    /// Greedy deterministic policy with lowest-index tie-breaking.
    pub fn greedy_policy(&self) -> Policy {
        let mut actions = Vec::with_capacity(self.horizon * self.num_states);
        for h in 0..self.horizon {
            for s in 0..self.num_states {
                actions.push(self.argmax(h, s));
            }
        }
        Policy {
            num_states: self.num_states,
            num_actions: self.num_actions,
            horizon: self.horizon,
            actions,
        }
    }

    /// Largest absolute entry-wise difference over all stages.
    pub fn max_abs_diff(&self, other: &QTable) -> f64 {
        self.values
            .iter()
            .zip(&other.values)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }
}

pub(crate) fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate().skip(1) {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Deterministic stage-indexed policy `π_h(s)`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Policy {
    num_states: usize,
    num_actions: usize,
    horizon: usize,
    actions: Vec<usize>,
}

impl Policy {
    pub fn new(num_states: usize, num_actions: usize, horizon: usize, actions: Vec<usize>) -> Result<Self> {
        if actions.len() != num_states * horizon {
            return Err(Error::DimensionMismatch(format!(
                "policy has {} entries, expected {}",
                actions.len(),
                num_states * horizon
            )));
        }
        if let Some(&a) = actions.iter().find(|&&a| a >= num_actions) {
            return Err(Error::IndexOutOfRange(format!("action {a} ≥ K = {num_actions}")));
        }
        Ok(Self {
            num_states,
            num_actions,
            horizon,
            actions,
        })
    }

    /// Decodes policy number `index` in `[0, (K^S)^H)` as mixed-radix digits.
    pub fn from_index(num_states: usize, num_actions: usize, horizon: usize, mut index: u64) -> Self {
        let mut actions = Vec::with_capacity(num_states * horizon);
        for _ in 0..num_states * horizon {
            actions.push((index % num_actions as u64) as usize);
            index /= num_actions as u64;
        }
        Self {
            num_states,
            num_actions,
            horizon,
            actions,
        }
    }

    pub fn action(&self, h: usize, s: usize) -> usize {
        self.actions[h * self.num_states + s]
    }

    pub fn set_action(&mut self, h: usize, s: usize, a: usize) {
        self.actions[h * self.num_states + s] = a;
    }

    pub fn to_stochastic(&self) -> StochasticPolicy {
        let (ns, na) = (self.num_states, self.num_actions);
        let mut probs = vec![0.0; self.horizon * ns * na];
        for h in 0..self.horizon {
            for s in 0..ns {
                probs[(h * ns + s) * na + self.action(h, s)] = 1.0;
            }
        }
        StochasticPolicy {
            num_states: ns,
            num_actions: na,
            horizon: self.horizon,
            probs,
        }
    }
}

/// Stage-indexed stochastic policy table `π_h(a|s)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StochasticPolicy {
    num_states: usize,
    num_actions: usize,
    horizon: usize,
    probs: Vec<f64>,
}

impl StochasticPolicy {
    pub fn new(num_states: usize, num_actions: usize, horizon: usize, probs: Vec<f64>) -> Result<Self> {
        if probs.len() != num_states * num_actions * horizon {
            return Err(Error::DimensionMismatch(format!(
                "policy table has {} entries, expected {}",
                probs.len(),
                num_states * num_actions * horizon
            )));
        }
        let out = Self {
            num_states,
            num_actions,
            horizon,
            probs,
        };
        out.validate()?;
        Ok(out)
    }

    pub fn uniform(num_states: usize, num_actions: usize, horizon: usize) -> Self {
        Self {
            num_states,
            num_actions,
            horizon,
            probs: vec![1.0 / num_actions as f64; num_states * num_actions * horizon],
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (i, row) in self.probs.chunks(self.num_actions).enumerate() {
            let total: f64 = row.iter().sum();
            if row.iter().any(|&p| !(p >= 0.0)) || (total - 1.0).abs() > STOCHASTIC_TOL {
                return Err(Error::invalid(format!(
                    "policy row {i} (stage {}, state {}) is not a distribution (sum {total})",
                    i / self.num_states,
                    i % self.num_states
                )));
            }
        }
        Ok(())
    }

    pub fn prob(&self, h: usize, s: usize, a: usize) -> f64 {
        self.probs[(h * self.num_states + s) * self.num_actions + a]
    }

    /// Action distribution at `(h, s)`.
    pub fn row(&self, h: usize, s: usize) -> &[f64] {
        let start = (h * self.num_states + s) * self.num_actions;
        &self.probs[start..start + self.num_actions]
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        (self.num_states, self.num_actions, self.horizon)
    }
}

/// Per-stage state–action distribution `μ_h(s,a)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OccupancyMeasure {
    num_states: usize,
    num_actions: usize,
    horizon: usize,
    weights: Vec<f64>,
}

impl OccupancyMeasure {
    pub fn from_weights(num_states: usize, num_actions: usize, horizon: usize, weights: Vec<f64>) -> Result<Self> {
        if weights.len() != num_states * num_actions * horizon {
            return Err(Error::DimensionMismatch(format!(
                "occupancy has {} entries, expected {}",
                weights.len(),
                num_states * num_actions * horizon
            )));
        }
        Ok(Self {
            num_states,
            num_actions,
            horizon,
            weights,
        })
    }

    pub fn weight(&self, h: usize, s: usize, a: usize) -> f64 {
        self.weights[(h * self.num_states + s) * self.num_actions + a]
    }

    /// Stage slice laid out `[s][a]`.
    pub fn stage(&self, h: usize) -> &[f64] {
        let len = self.num_states * self.num_actions;
        &self.weights[h * len..(h + 1) * len]
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        (self.num_states, self.num_actions, self.horizon)
    }

    /// Probability of being in `s` at stage `h`.
    pub fn state_mass(&self, h: usize, s: usize) -> f64 {
        let na = self.num_actions;
        self.stage(h)[s * na..(s + 1) * na].iter().sum()
    }
}

/// Exact optimal Q-function by backward induction with `q_{H} ≡ 0` beyond
/// the last stage.
pub fn optimal_q(mdp: &TabularMDP) -> QTable {
    let (ns, na, nh) = (mdp.num_states, mdp.num_actions, mdp.horizon);
    let mut q = QTable::zeros(ns, na, nh);
    let mut next_v: Option<Vec<f64>> = None;
    for h in (0..nh).rev() {
        let stage = q.stage_mut(h);
        mdp.backup(h, next_v.as_deref(), stage);
        next_v = Some(
            (0..ns)
                .map(|s| {
                    let row = &stage[s * na..(s + 1) * na];
                    row[argmax(row)]
                })
                .collect(),
        );
    }
    q
}

/// Exact Q-function of a deterministic policy.
pub fn policy_q(mdp: &TabularMDP, policy: &Policy) -> Result<QTable> {
    mdp.check_compatible(policy.num_states, policy.num_actions, policy.horizon, "policy")?;
    let (ns, na, nh) = (mdp.num_states, mdp.num_actions, mdp.horizon);
    let mut q = QTable::zeros(ns, na, nh);
    let mut next_v: Option<Vec<f64>> = None;
    for h in (0..nh).rev() {
        let stage = q.stage_mut(h);
        mdp.backup(h, next_v.as_deref(), stage);
        next_v = Some((0..ns).map(|s| stage[s * na + policy.action(h, s)]).collect());
    }
    Ok(q)
}

/// Exact Q-function of a stochastic policy.
pub fn stochastic_policy_q(mdp: &TabularMDP, policy: &StochasticPolicy) -> Result<QTable> {
    let (s, k, h) = policy.shape();
    mdp.check_compatible(s, k, h, "policy")?;
    let (ns, na, nh) = (mdp.num_states, mdp.num_actions, mdp.horizon);
    let mut q = QTable::zeros(ns, na, nh);
    let mut next_v: Option<Vec<f64>> = None;
    for h in (0..nh).rev() {
        let stage = q.stage_mut(h);
        mdp.backup(h, next_v.as_deref(), stage);
        next_v = Some(
            (0..ns)
                .map(|s| {
                    policy
                        .row(h, s)
                        .iter()
                        .zip(&stage[s * na..(s + 1) * na])
                        .map(|(p, q)| p * q)
                        .sum()
                })
                .collect(),
        );
    }
    Ok(q)
}

/// Forward state–action distribution of `policy` from the fixed initial state.
pub fn occupancy(mdp: &TabularMDP, policy: &StochasticPolicy) -> Result<OccupancyMeasure> {
    let (s, k, h) = policy.shape();
    mdp.check_compatible(s, k, h, "policy")?;
    policy.validate()?;
    let (ns, na, nh) = (mdp.num_states, mdp.num_actions, mdp.horizon);
    let mut weights = vec![0.0; nh * ns * na];
    let mut state_dist = vec![0.0; ns];
    state_dist[mdp.initial_state] = 1.0;
    for h in 0..nh {
        let base = h * ns * na;
        for s in 0..ns {
            let row = policy.row(h, s);
            for a in 0..na {
                weights[base + s * na + a] = state_dist[s] * row[a];
            }
        }
        if h + 1 < nh {
            let mut next = vec![0.0; ns];
            for s in 0..ns {
                for a in 0..na {
                    let w = weights[base + s * na + a];
                    if w == 0.0 {
                        continue;
                    }
                    for (n, p) in next.iter_mut().zip(mdp.next_state_probs(h, s, a)) {
                        *n += w * p;
                    }
                }
            }
            state_dist = next;
        }
    }
    OccupancyMeasure::from_weights(ns, na, nh, weights)
}
