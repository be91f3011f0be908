//! Feature maps, finite encoder classes and linear Q evaluation.

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg;
use crate::rng::{derive_seed, seeded, simplex, stream};

/// Slack allowed on the unit row-norm bound.
const NORM_TOL: f64 = 1e-12;

/// Label given to the true encoder inside generated classes.
pub const TRUTH_LABEL: &str = "phi_star";

/// A table of d-dimensional embeddings, one row per (s,a) pair, with rows
/// of ℓ₂ norm at most one.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureMap {
    label: String,
    num_states: usize,
    num_actions: usize,
    dim: usize,
    /// Row-major `(S·K) × d`, row index `s·K + a`.
    table: Vec<f64>,
}

impl FeatureMap {
    pub fn new(
        label: impl Into<String>,
        num_states: usize,
        num_actions: usize,
        dim: usize,
        table: Vec<f64>,
    ) -> Result<Self> {
        let out = Self {
            label: label.into(),
            num_states,
            num_actions,
            dim,
            table,
        };
        out.validate()?;
        Ok(out)
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_states == 0 || self.num_actions == 0 || self.dim == 0 {
            return Err(Error::invalid("feature map needs S, K, d ≥ 1"));
        }
        if self.table.len() != self.num_states * self.num_actions * self.dim {
            return Err(Error::DimensionMismatch(format!(
                "feature table `{}` has {} entries, expected {}",
                self.label,
                self.table.len(),
                self.num_states * self.num_actions * self.dim
            )));
        }
        for (i, row) in self.table.chunks(self.dim).enumerate() {
            if row.iter().any(|x| !x.is_finite()) {
                return Err(Error::invalid(format!("non-finite feature in row {i} of `{}`", self.label)));
            }
            let n = linalg::norm(row);
            if n > 1.0 + NORM_TOL {
                return Err(Error::invalid(format!(
                    "row {i} of `{}` has norm {n} > 1",
                    self.label
                )));
            }
        }
        Ok(())
    }

    pub fn label(&self) -> &str {
        &self.label
    }

    pub fn num_states(&self) -> usize {
        self.num_states
    }

    pub fn num_actions(&self) -> usize {
        self.num_actions
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn num_pairs(&self) -> usize {
        self.num_states * self.num_actions
    }

    pub fn table(&self) -> &[f64] {
        &self.table
    }

    /// Embedding `φ(s,a)`. Panics on out-of-range indices; see [`linear_q`]
    /// for the checked evaluation.
    pub fn row(&self, s: usize, a: usize) -> &[f64] {
        self.pair_row(s * self.num_actions + a)
    }

    pub(crate) fn pair_row(&self, pair: usize) -> &[f64] {
        &self.table[pair * self.dim..(pair + 1) * self.dim]
    }

    /// `⟨φ(s,a), w⟩` for every pair, laid out `[s][a]`.
    pub fn evaluate_all(&self, w: &[f64]) -> Vec<f64> {
        self.table.chunks(self.dim).map(|row| linalg::dot(row, w)).collect()
    }

    pub fn with_label(mut self, label: impl Into<String>) -> Self {
        self.label = label.into();
        self
    }
}

/// Linear decoder `w` with ‖w‖₂ bounded by the decoder-norm budget.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Decoder(Vec<f64>);

impl Decoder {
    pub fn new(w: Vec<f64>, w_max: f64) -> Result<Self> {
        let n = linalg::norm(&w);
        if !n.is_finite() || n > w_max * (1.0 + 1e-9) {
            return Err(Error::invalid(format!("decoder norm {n} exceeds W_max = {w_max}")));
        }
        Ok(Self(w))
    }

    pub fn zeros(dim: usize) -> Self {
        Self(vec![0.0; dim])
    }

    pub fn weights(&self) -> &[f64] {
        &self.0
    }

    pub fn norm(&self) -> f64 {
        linalg::norm(&self.0)
    }
}

/// Evaluates `⟨φ(s,a), w⟩` with bounds and dimension checks.
pub fn linear_q(phi: &FeatureMap, w: &Decoder, s: usize, a: usize) -> Result<f64> {
    if s >= phi.num_states || a >= phi.num_actions {
        return Err(Error::IndexOutOfRange(format!(
            "(s={s}, a={a}) outside S={} K={}",
            phi.num_states, phi.num_actions
        )));
    }
    if w.0.len() != phi.dim {
        return Err(Error::DimensionMismatch(format!(
            "decoder has dimension {}, feature map has {}",
            w.0.len(),
            phi.dim
        )));
    }
    Ok(linalg::dot(phi.row(s, a), &w.0))
}

/// A finite, ordered set of candidate encoders sharing (S, K, d).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncoderClass {
    members: Vec<FeatureMap>,
    contains_truth: bool,
}

impl EncoderClass {
    pub fn new(members: Vec<FeatureMap>, contains_truth: bool) -> Result<Self> {
        let out = Self {
            members,
            contains_truth,
        };
        out.validate()?;
        Ok(out)
    }

    pub fn validate(&self) -> Result<()> {
        let first = self
            .members
            .first()
            .ok_or_else(|| Error::invalid("encoder class must have at least one member"))?;
        let shape = (first.num_states, first.num_actions, first.dim);
        let mut labels = std::collections::BTreeSet::new();
        for m in &self.members {
            m.validate()?;
            if (m.num_states, m.num_actions, m.dim) != shape {
                return Err(Error::DimensionMismatch(format!(
                    "encoder `{}` does not share (S, K, d) with `{}`",
                    m.label, first.label
                )));
            }
            if !labels.insert(m.label.as_str()) {
                return Err(Error::invalid(format!("duplicate encoder label `{}`", m.label)));
            }
        }
        Ok(())
    }

    pub fn members(&self) -> &[FeatureMap] {
        &self.members
    }

    pub fn len(&self) -> usize {
        self.members.len()
    }

    pub fn is_empty(&self) -> bool {
        self.members.is_empty()
    }

    pub fn contains_truth(&self) -> bool {
        self.contains_truth
    }

    pub fn index_of(&self, label: &str) -> Option<usize> {
        self.members.iter().position(|m| m.label == label)
    }

    pub fn get(&self, label: &str) -> Option<&FeatureMap> {
        self.members.iter().find(|m| m.label == label)
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        let m = &self.members[0];
        (m.num_states, m.num_actions, m.dim)
    }
}

/// Builds `{truth} ∪ distractors`. Each distractor blends the truth with an
/// independent simplex table: `(1-c)·φ* + c·ρ`, row-renormalized to norm ≤ 1.
/// The member order is shuffled deterministically by `seed`.
pub fn build_encoder_class(
    truth: &FeatureMap,
    num_distractors: usize,
    corruption: f64,
    seed: u64,
) -> Result<EncoderClass> {
    if !(0.0..=1.0).contains(&corruption) {
        return Err(Error::invalid(format!("corruption must lie in [0,1], got {corruption}")));
    }
    let mut members = Vec::with_capacity(num_distractors + 1);
    members.push(truth.clone().with_label(TRUTH_LABEL));
    for k in 0..num_distractors {
        let mut rng = seeded(derive_seed(derive_seed(seed, stream::ENCODERS), k as u64));
        let mut table = Vec::with_capacity(truth.table.len());
        for pair in 0..truth.num_pairs() {
            let noise = simplex(&mut rng, truth.dim);
            let mut row: Vec<f64> = truth
                .pair_row(pair)
                .iter()
                .zip(&noise)
                .map(|(t, r)| (1.0 - corruption) * t + corruption * r)
                .collect();
            let n = linalg::norm(&row);
            if n > 1.0 {
                row.iter_mut().for_each(|x| *x /= n);
            }
            table.extend(row);
        }
        members.push(FeatureMap {
            label: format!("distractor_{k}"),
            num_states: truth.num_states,
            num_actions: truth.num_actions,
            dim: truth.dim,
            table,
        });
    }
    let mut rng = seeded(derive_seed(seed, stream::ENCODERS ^ 0xFFFF));
    members.shuffle(&mut rng);
    EncoderClass::new(members, true)
}
