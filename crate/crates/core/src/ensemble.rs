//! Low-rank task ensembles built as linear MDPs.
//!
//! Every task draws its transitions as `P(s'|s,a) = Σ_j φ*_j(s,a) ν_j(s')`
//! and its rewards as `r_h(s,a) = ⟨φ*(s,a), θ_h⟩`, with simplex features
//! shared by all tasks. Any Bellman backup of any value function is then
//! linear in φ*, so each task's optimal Q-function is realized exactly by
//! per-stage decoders.

use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::features::{EncoderClass, FeatureMap};
use crate::json;
use crate::linalg;
use crate::mdp::{optimal_q, QTable, TabularMDP};
use crate::rng::{derive_seed, seeded, simplex, stream};

pub const ENSEMBLE_SCHEMA_VERSION: u32 = 1;

/// Largest tolerated `|Q* − ⟨φ*, w*⟩|`.
pub const REALIZABILITY_TOL: f64 = 1e-8;

const MAX_FEATURE_DRAWS: u64 = 64;

/// Size and scale parameters of a generated ensemble.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EnsembleSpec {
    #[serde(rename = "S")]
    pub num_states: usize,
    #[serde(rename = "K")]
    pub num_actions: usize,
    #[serde(rename = "H")]
    pub horizon: usize,
    #[serde(rename = "T")]
    pub num_tasks: usize,
    pub d: usize,
    pub gamma: f64,
    pub w_max: f64,
}

impl EnsembleSpec {
    pub fn new(num_states: usize, num_actions: usize, horizon: usize, num_tasks: usize, d: usize) -> Self {
        Self {
            num_states,
            num_actions,
            horizon,
            num_tasks,
            d,
            gamma: 1.0,
            w_max: 1.0,
        }
    }

    pub fn with_gamma(mut self, gamma: f64) -> Self {
        self.gamma = gamma;
        self
    }

    pub fn with_w_max(mut self, w_max: f64) -> Self {
        self.w_max = w_max;
        self
    }

    fn validate(&self) -> Result<()> {
        if self.num_states == 0 || self.num_actions == 0 || self.horizon == 0 || self.num_tasks == 0 || self.d == 0 {
            return Err(Error::invalid("S, K, H, T and d must all be ≥ 1"));
        }
        if self.d > self.num_states * self.num_actions {
            return Err(Error::invalid(format!(
                "latent dimension d = {} exceeds S·K = {}",
                self.d,
                self.num_states * self.num_actions
            )));
        }
        if !(self.gamma > 0.0 && self.gamma <= 1.0) {
            return Err(Error::invalid(format!("γ must lie in (0,1], got {}", self.gamma)));
        }
        if !(self.w_max > 0.0) || !self.w_max.is_finite() {
            return Err(Error::invalid(format!("W_max must be positive, got {}", self.w_max)));
        }
        Ok(())
    }
}

/// T tabular tasks sharing a true feature map and per-task decoders.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskEnsemble {
    spec: EnsembleSpec,
    seed: u64,
    features: FeatureMap,
    tasks: Vec<TabularMDP>,
    /// `w_h^{(*,t)}`, indexed `[t][h]`.
    true_decoders: Vec<Vec<Vec<f64>>>,
    /// Factor applied to each task's rewards to respect `W_max`.
    reward_scales: Vec<f64>,
}

impl TaskEnsemble {
    /// Assembles an ensemble from explicit parts, recovering the decoders.
    pub fn from_parts(spec: EnsembleSpec, seed: u64, features: FeatureMap, tasks: Vec<TabularMDP>) -> Result<Self> {
        let mut out = Self {
            reward_scales: vec![1.0; tasks.len()],
            spec: EnsembleSpec {
                num_tasks: tasks.len(),
                ..spec
            },
            seed,
            features,
            tasks,
            true_decoders: Vec::new(),
        };
        out.check_shapes()?;
        out.true_decoders = recover_true_decoders(&out)?;
        Ok(out)
    }

    fn check_shapes(&self) -> Result<()> {
        let s = &self.spec;
        if (self.features.num_states(), self.features.num_actions(), self.features.dim())
            != (s.num_states, s.num_actions, s.d)
        {
            return Err(Error::DimensionMismatch("feature table does not match the ensemble shape".into()));
        }
        for (t, mdp) in self.tasks.iter().enumerate() {
            mdp.validate()?;
            if (mdp.num_states(), mdp.num_actions(), mdp.horizon()) != (s.num_states, s.num_actions, s.horizon)
                || mdp.gamma() != s.gamma
            {
                return Err(Error::DimensionMismatch(format!("task {t} does not share (S, K, H, γ)")));
            }
        }
        Ok(())
    }

    pub fn spec(&self) -> &EnsembleSpec {
        &self.spec
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn features(&self) -> &FeatureMap {
        &self.features
    }

    pub fn tasks(&self) -> &[TabularMDP] {
        &self.tasks
    }

    pub fn task(&self, t: usize) -> &TabularMDP {
        &self.tasks[t]
    }

    pub fn num_tasks(&self) -> usize {
        self.tasks.len()
    }

    pub fn true_decoders(&self) -> &[Vec<Vec<f64>>] {
        &self.true_decoders
    }

    pub fn reward_scales(&self) -> &[f64] {
        &self.reward_scales
    }

    /// Exact optimal Q-function of every task.
    pub fn optimal_qs(&self) -> Vec<QTable> {
        self.tasks.iter().map(optimal_q).collect()
    }

    /// Sub-ensemble with the listed tasks, in the given order.
    pub fn select_tasks(&self, indices: &[usize]) -> Result<Self> {
        if let Some(&bad) = indices.iter().find(|&&t| t >= self.tasks.len()) {
            return Err(Error::IndexOutOfRange(format!("task {bad} ≥ T = {}", self.tasks.len())));
        }
        Ok(Self {
            spec: EnsembleSpec {
                num_tasks: indices.len(),
                ..self.spec
            },
            seed: self.seed,
            features: self.features.clone(),
            tasks: indices.iter().map(|&t| self.tasks[t].clone()).collect(),
            true_decoders: indices.iter().map(|&t| self.true_decoders[t].clone()).collect(),
            reward_scales: indices.iter().map(|&t| self.reward_scales[t]).collect(),
        })
    }

    /// Largest `|Q_h^{*,t}(s,a) − ⟨φ*(s,a), w_h^{(*,t)}⟩|` over all tasks, stages and pairs.
    pub fn realizability_residual(&self) -> f64 {
        let mut worst = 0.0_f64;
        for (t, mdp) in self.tasks.iter().enumerate() {
            let q = optimal_q(mdp);
            for h in 0..mdp.horizon() {
                let fitted = self.features.evaluate_all(&self.true_decoders[t][h]);
                for (a, b) in q.stage(h).iter().zip(&fitted) {
                    worst = worst.max((a - b).abs());
                }
            }
        }
        worst
    }

    /// SHA-256 of the canonical JSON encoding, hex encoded.
    pub fn content_hash(&self) -> String {
        let bytes = serde_json::to_vec(self).expect("ensemble serializes");
        hex::encode(Sha256::digest(&bytes))
    }
}

/// Draws a low-rank ensemble. Features are redrawn (deterministically) in the
/// unlikely event that a draw is rank deficient.
pub fn generate_ensemble(spec: EnsembleSpec, seed: u64) -> Result<TaskEnsemble> {
    spec.validate()?;
    let (ns, na, nh, d) = (spec.num_states, spec.num_actions, spec.horizon, spec.d);
    let features = draw_features(&spec, seed)?;

    let mut tasks = Vec::with_capacity(spec.num_tasks);
    let mut decoders = Vec::with_capacity(spec.num_tasks);
    let mut scales = Vec::with_capacity(spec.num_tasks);
    for t in 0..spec.num_tasks {
        let mut rng = seeded(derive_seed(derive_seed(seed, stream::TASKS), t as u64));
        let nu: Vec<Vec<f64>> = (0..d).map(|_| simplex(&mut rng, ns)).collect();
        let theta: Vec<Vec<f64>> = (0..nh).map(|_| (0..d).map(|_| rng.random::<f64>()).collect()).collect();

        let mut row_p = Vec::with_capacity(ns * na * ns);
        for pair in 0..ns * na {
            let phi = features.pair_row(pair);
            for sn in 0..ns {
                row_p.push(phi.iter().zip(&nu).map(|(f, nu_j)| f * nu_j[sn]).sum::<f64>());
            }
        }
        let transitions = row_p.repeat(nh);
        let base_rewards: Vec<f64> = (0..nh)
            .flat_map(|h| features.evaluate_all(&theta[h]))
            .map(|r| r.clamp(0.0, 1.0))
            .collect();

        let mdp = TabularMDP::new(ns, na, nh, spec.gamma, transitions.clone(), base_rewards.clone())?;
        let w = task_decoders(&features, &mdp, t)?;
        let largest = w.iter().map(|wh| linalg::norm(wh)).fold(0.0_f64, f64::max);
        let scale = if largest > spec.w_max { spec.w_max / largest } else { 1.0 };
        if scale < 1.0 {
            let rewards = base_rewards.iter().map(|r| r * scale).collect();
            let mdp = TabularMDP::new(ns, na, nh, spec.gamma, transitions, rewards)?;
            decoders.push(task_decoders(&features, &mdp, t)?);
            tasks.push(mdp);
        } else {
            decoders.push(w);
            tasks.push(mdp);
        }
        scales.push(scale);
    }
    Ok(TaskEnsemble {
        spec,
        seed,
        features,
        tasks,
        true_decoders: decoders,
        reward_scales: scales,
    })
}

fn draw_features(spec: &EnsembleSpec, seed: u64) -> Result<FeatureMap> {
    let pairs = spec.num_states * spec.num_actions;
    let mut rank = 0;
    for attempt in 0..MAX_FEATURE_DRAWS {
        let mut rng = seeded(derive_seed(derive_seed(seed, stream::FEATURES), attempt));
        let table: Vec<f64> = (0..pairs).flat_map(|_| simplex(&mut rng, spec.d)).collect();
        let (_, r) = linalg::least_squares(&table, pairs, spec.d, &vec![0.0; pairs])?;
        rank = r;
        if r == spec.d {
            return FeatureMap::new("phi_star", spec.num_states, spec.num_actions, spec.d, table);
        }
    }
    Err(Error::DegenerateFeatures { rank, dim: spec.d })
}

fn task_decoders(features: &FeatureMap, mdp: &TabularMDP, task: usize) -> Result<Vec<Vec<f64>>> {
    let q = optimal_q(mdp);
    let pairs = features.num_pairs();
    (0..mdp.horizon())
        .map(|h| {
            let (w, rank) = linalg::least_squares(features.table(), pairs, features.dim(), q.stage(h))?;
            if rank < features.dim() {
                return Err(Error::DegenerateFeatures {
                    rank,
                    dim: features.dim(),
                });
            }
            let fitted = features.evaluate_all(&w);
            let residual = fitted
                .iter()
                .zip(q.stage(h))
                .map(|(a, b)| (a - b).abs())
                .fold(0.0, f64::max);
            if residual > REALIZABILITY_TOL {
                return Err(Error::NotRealizable {
                    task,
                    stage: h,
                    residual,
                    tolerance: REALIZABILITY_TOL,
                });
            }
            Ok(w)
        })
        .collect()
}

/// Least-squares decoders `w_h^{(*,t)}` solving `φ* w = Q_h^{*,t}` over all pairs.
pub fn recover_true_decoders(ensemble: &TaskEnsemble) -> Result<Vec<Vec<Vec<f64>>>> {
    ensemble
        .tasks
        .iter()
        .enumerate()
        .map(|(t, mdp)| task_decoders(&ensemble.features, mdp, t))
        .collect()
}

#[derive(Serialize, Deserialize)]
struct EnsembleHeader {
    #[serde(rename = "S")]
    num_states: usize,
    #[serde(rename = "K")]
    num_actions: usize,
    #[serde(rename = "H")]
    horizon: usize,
    #[serde(rename = "T")]
    num_tasks: usize,
    d: usize,
    gamma: f64,
    w_max: f64,
    seed: u64,
}

#[derive(Serialize, Deserialize)]
struct TaskRecord {
    transitions: Vec<f64>,
    rewards: Vec<f64>,
    reward_scale: f64,
}

#[derive(Serialize, Deserialize)]
struct EnsembleDocument {
    schema_version: u32,
    kind: String,
    header: EnsembleHeader,
    features: Vec<f64>,
    tasks: Vec<TaskRecord>,
    true_decoders: Vec<Vec<Vec<f64>>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    encoder_class: Option<EncoderClass>,
}

/// Ensemble file contents: the ensemble plus an optional embedded encoder class.
#[derive(Debug, Clone, PartialEq)]
pub struct EnsembleFile {
    pub ensemble: TaskEnsemble,
    pub encoder_class: Option<EncoderClass>,
}

impl EnsembleFile {
    pub fn to_json(&self) -> Result<String> {
        let e = &self.ensemble;
        let mut tasks = Vec::with_capacity(e.tasks.len());
        for (mdp, &scale) in e.tasks.iter().zip(&e.reward_scales) {
            let (ns, na, nh) = (mdp.num_states(), mdp.num_actions(), mdp.horizon());
            let mut transitions = Vec::with_capacity(nh * ns * na * ns);
            let mut rewards = Vec::with_capacity(nh * ns * na);
            for h in 0..nh {
                for s in 0..ns {
                    for a in 0..na {
                        transitions.extend_from_slice(mdp.next_state_probs(h, s, a));
                        rewards.push(mdp.reward(h, s, a));
                    }
                }
            }
            tasks.push(TaskRecord {
                transitions,
                rewards,
                reward_scale: scale,
            });
        }
        let doc = EnsembleDocument {
            schema_version: ENSEMBLE_SCHEMA_VERSION,
            kind: "ensemble".into(),
            header: EnsembleHeader {
                num_states: e.spec.num_states,
                num_actions: e.spec.num_actions,
                horizon: e.spec.horizon,
                num_tasks: e.tasks.len(),
                d: e.spec.d,
                gamma: e.spec.gamma,
                w_max: e.spec.w_max,
                seed: e.seed,
            },
            features: e.features.table().to_vec(),
            tasks,
            true_decoders: e.true_decoders.clone(),
            encoder_class: self.encoder_class.clone(),
        };
        Ok(serde_json::to_string(&doc)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let doc: EnsembleDocument = json::from_versioned_str(text, "ensemble", ENSEMBLE_SCHEMA_VERSION)?;
        let h = &doc.header;
        let spec = EnsembleSpec {
            num_states: h.num_states,
            num_actions: h.num_actions,
            horizon: h.horizon,
            num_tasks: h.num_tasks,
            d: h.d,
            gamma: h.gamma,
            w_max: h.w_max,
        };
        if doc.tasks.len() != h.num_tasks || doc.true_decoders.len() != h.num_tasks {
            return Err(Error::Schema(format!(
                "header declares T = {} but the document has {} tasks and {} decoder sets",
                h.num_tasks,
                doc.tasks.len(),
                doc.true_decoders.len()
            )));
        }
        let features = FeatureMap::new("phi_star", h.num_states, h.num_actions, h.d, doc.features)?;
        let tasks = doc
            .tasks
            .iter()
            .map(|r| TabularMDP::new(h.num_states, h.num_actions, h.horizon, h.gamma, r.transitions.clone(), r.rewards.clone()))
            .collect::<Result<Vec<_>>>()?;
        let ensemble = TaskEnsemble {
            spec,
            seed: h.seed,
            features,
            tasks,
            true_decoders: doc.true_decoders,
            reward_scales: doc.tasks.iter().map(|r| r.reward_scale).collect(),
        };
        ensemble.check_shapes()?;
        Ok(Self {
            ensemble,
            encoder_class: doc.encoder_class,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()? + "\n").map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&json::read_to_string(path)?)
    }
}
