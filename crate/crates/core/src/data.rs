//! Behavior policies, offline dataset collection, and the JSON-lines bundle
//! format.
//!
//! Collection simulates whole episodes under the behavior policy and slices
//! them per stage, so stage-h tuples are i.i.d. draws from the stage-h
//! behavior occupancy across episodes.

use std::fmt;
use std::fs;
use std::io::Write;
use std::path::Path;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::ensemble::TaskEnsemble;
use crate::error::{Error, Result};
use crate::json;
use crate::mdp::{optimal_q, QTable, StochasticPolicy, TabularMDP};
use crate::rng::{categorical, derive_seed, seeded, stream};

pub const DATASET_SCHEMA_VERSION: u32 = 1;

/// How the behavior policy is formed from a task.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub enum BehaviorKind {
    #[default]
    Uniform,
    /// ε-soft greedy policy around the task's optimal Q-function.
    EpsilonGreedy { epsilon: f64 },
}

impl fmt::Display for BehaviorKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            BehaviorKind::Uniform => f.write_str("uniform"),
            BehaviorKind::EpsilonGreedy { epsilon } => write!(f, "eps:{epsilon}"),
        }
    }
}

impl FromStr for BehaviorKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        if s == "uniform" {
            return Ok(BehaviorKind::Uniform);
        }
        if let Some(rest) = s.strip_prefix("eps:") {
            let epsilon: f64 = rest
                .parse()
                .map_err(|_| Error::invalid(format!("bad ε in behavior `{s}`")))?;
            if !(epsilon > 0.0 && epsilon <= 1.0) {
                return Err(Error::invalid(format!("ε must lie in (0,1], got {epsilon}")));
            }
            return Ok(BehaviorKind::EpsilonGreedy { epsilon });
        }
        Err(Error::invalid(format!("unknown behavior `{s}` (expected `uniform` or `eps:<float>`)")))
    }
}

impl Serialize for BehaviorKind {
    fn serialize<S: serde::Serializer>(&self, serializer: S) -> std::result::Result<S::Ok, S::Error> {
        serializer.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for BehaviorKind {
    fn deserialize<D: serde::Deserializer<'de>>(deserializer: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(deserializer)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// A behavior policy with its per-stage action table.
#[derive(Debug, Clone, PartialEq)]
pub struct BehaviorPolicy {
    kind: BehaviorKind,
    table: StochasticPolicy,
}

impl BehaviorPolicy {
    pub fn uniform(num_states: usize, num_actions: usize, horizon: usize) -> Self {
        Self {
            kind: BehaviorKind::Uniform,
            table: StochasticPolicy::uniform(num_states, num_actions, horizon),
        }
    }

    /// `π(a|s) = ε/K + (1-ε)·1{a = argmax_a' q_h(s,a')}`.
    pub fn epsilon_greedy(epsilon: f64, reference: &QTable) -> Result<Self> {
        if !(epsilon > 0.0 && epsilon <= 1.0) {
            return Err(Error::invalid(format!("ε must lie in (0,1], got {epsilon}")));
        }
        let (ns, na, nh) = reference.shape();
        let mut probs = vec![epsilon / na as f64; nh * ns * na];
        for h in 0..nh {
            for s in 0..ns {
                probs[(h * ns + s) * na + reference.argmax(h, s)] += 1.0 - epsilon;
            }
        }
        Ok(Self {
            kind: BehaviorKind::EpsilonGreedy { epsilon },
            table: StochasticPolicy::new(ns, na, nh, probs)?,
        })
    }

    pub fn for_task(kind: BehaviorKind, mdp: &TabularMDP) -> Result<Self> {
        match kind {
            BehaviorKind::Uniform => Ok(Self::uniform(mdp.num_states(), mdp.num_actions(), mdp.horizon())),
            BehaviorKind::EpsilonGreedy { epsilon } => Self::epsilon_greedy(epsilon, &optimal_q(mdp)),
        }
    }

    pub fn kind(&self) -> BehaviorKind {
        self.kind
    }

    pub fn table(&self) -> &StochasticPolicy {
        &self.table
    }
}

/// One logged step `(h, s, a, r, s')`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Transition {
    pub h: usize,
    pub s: usize,
    pub a: usize,
    pub r: f64,
    pub s_next: usize,
}

/// Offline data for one task: exactly `n` transitions at every stage.
#[derive(Debug, Clone, PartialEq)]
pub struct TaskDataset {
    pub task: usize,
    pub behavior: BehaviorKind,
    pub seed: u64,
    stages: Vec<Vec<Transition>>,
}

impl TaskDataset {
    pub fn new(task: usize, behavior: BehaviorKind, seed: u64, stages: Vec<Vec<Transition>>) -> Result<Self> {
        let n = stages.first().map_or(0, Vec::len);
        if stages.iter().any(|st| st.len() != n) {
            return Err(Error::invalid(format!("task {task}: stages hold different sample counts")));
        }
        for (h, st) in stages.iter().enumerate() {
            if st.iter().any(|tr| tr.h != h) {
                return Err(Error::invalid(format!("task {task}: transition filed under the wrong stage {h}")));
            }
        }
        Ok(Self {
            task,
            behavior,
            seed,
            stages,
        })
    }

    pub fn stage(&self, h: usize) -> &[Transition] {
        &self.stages[h]
    }

    pub fn stages(&self) -> &[Vec<Transition>] {
        &self.stages
    }

    pub fn horizon(&self) -> usize {
        self.stages.len()
    }

    /// Samples per stage.
    pub fn n(&self) -> usize {
        self.stages.first().map_or(0, Vec::len)
    }
}

/// Datasets for several tasks of one ensemble.
#[derive(Debug, Clone, PartialEq)]
pub struct DatasetBundle {
    pub ensemble_hash: String,
    pub n: usize,
    pub horizon: usize,
    pub seed: u64,
    pub behavior: BehaviorKind,
    pub datasets: Vec<TaskDataset>,
}

impl DatasetBundle {
    pub fn num_tasks(&self) -> usize {
        self.datasets.len()
    }

    /// Stage-h slice of every task, in task order.
    pub fn stage_slices(&self, h: usize) -> Vec<&[Transition]> {
        self.datasets.iter().map(|d| d.stage(h)).collect()
    }
}

/// Simulates `n` episodes of task `t` under the behavior policy and slices
/// them per stage.
pub fn collect(ensemble: &TaskEnsemble, t: usize, behavior: BehaviorKind, n: usize, seed: u64) -> Result<TaskDataset> {
    if n == 0 {
        return Err(Error::invalid("n must be ≥ 1"));
    }
    if t >= ensemble.num_tasks() {
        return Err(Error::IndexOutOfRange(format!("task {t} ≥ T = {}", ensemble.num_tasks())));
    }
    let mdp = ensemble.task(t);
    let policy = BehaviorPolicy::for_task(behavior, mdp)?;
    collect_from_mdp(mdp, t, &policy, n, seed)
}

pub fn collect_from_mdp(
    mdp: &TabularMDP,
    task: usize,
    policy: &BehaviorPolicy,
    n: usize,
    seed: u64,
) -> Result<TaskDataset> {
    let nh = mdp.horizon();
    let mut rng = seeded(seed);
    let mut stages: Vec<Vec<Transition>> = (0..nh).map(|_| Vec::with_capacity(n)).collect();
    for _ in 0..n {
        let mut s = mdp.initial_state();
        for (h, stage) in stages.iter_mut().enumerate() {
            let a = categorical(&mut rng, policy.table.row(h, s));
            let s_next = categorical(&mut rng, mdp.next_state_probs(h, s, a));
            stage.push(Transition {
                h,
                s,
                a,
                r: mdp.reward(h, s, a),
                s_next,
            });
            s = s_next;
        }
    }
    TaskDataset::new(task, policy.kind, seed, stages)
}

/// Collects every task of the ensemble; task `t` uses seed `derive(seed, t)`.
pub fn collect_bundle(ensemble: &TaskEnsemble, behavior: BehaviorKind, n: usize, seed: u64) -> Result<DatasetBundle> {
    let datasets = (0..ensemble.num_tasks())
        .into_par_iter()
        .map(|t| collect(ensemble, t, behavior, n, task_seed(seed, t)))
        .collect::<Result<Vec<_>>>()?;
    Ok(DatasetBundle {
        ensemble_hash: ensemble.content_hash(),
        n,
        horizon: ensemble.spec().horizon,
        seed,
        behavior,
        datasets,
    })
}

pub fn task_seed(master: u64, task: usize) -> u64 {
    derive_seed(derive_seed(master, stream::DATA), task as u64)
}

#[derive(Serialize, Deserialize)]
struct BundleHeader {
    schema_version: u32,
    kind: String,
    ensemble_hash: String,
    #[serde(rename = "T")]
    num_tasks: usize,
    n: usize,
    #[serde(rename = "H")]
    horizon: usize,
    seed: u64,
    behavior: BehaviorKind,
    /// Task ids in file order, with their collection seeds.
    tasks: Vec<(usize, u64)>,
}

#[derive(Serialize, Deserialize)]
struct TransitionLine {
    t: usize,
    h: usize,
    s: usize,
    a: usize,
    r: f64,
    s_next: usize,
}

pub fn bundle_to_jsonl(bundle: &DatasetBundle) -> Result<String> {
    let header = BundleHeader {
        schema_version: DATASET_SCHEMA_VERSION,
        kind: "dataset".into(),
        ensemble_hash: bundle.ensemble_hash.clone(),
        num_tasks: bundle.datasets.len(),
        n: bundle.n,
        horizon: bundle.horizon,
        seed: bundle.seed,
        behavior: bundle.behavior,
        tasks: bundle.datasets.iter().map(|d| (d.task, d.seed)).collect(),
    };
    let mut out = serde_json::to_string(&header)?;
    out.push('\n');
    for d in &bundle.datasets {
        for stage in &d.stages {
            for tr in stage {
                let line = TransitionLine {
                    t: d.task,
                    h: tr.h,
                    s: tr.s,
                    a: tr.a,
                    r: tr.r,
                    s_next: tr.s_next,
                };
                out.push_str(&serde_json::to_string(&line)?);
                out.push('\n');
            }
        }
    }
    Ok(out)
}

pub fn bundle_from_jsonl(text: &str) -> Result<DatasetBundle> {
    let mut offset = 0u64;
    let mut lines = text.split_inclusive('\n');
    let first = lines.next().ok_or_else(|| Error::Parse {
        offset: 0,
        message: "empty file".into(),
    })?;
    let value: serde_json::Value = serde_json::from_str(first.trim_end()).map_err(|e| Error::Parse {
        offset: json::byte_offset(first, e.line(), e.column()),
        message: format!("header: {e}"),
    })?;
    json::check_header(&value, "dataset", DATASET_SCHEMA_VERSION)?;
    let header: BundleHeader = serde_json::from_value(value).map_err(|e| Error::Schema(format!("dataset header: {e}")))?;
    offset += first.len() as u64;

    let mut stages: Vec<Vec<Vec<Transition>>> = (0..header.tasks.len())
        .map(|_| (0..header.horizon).map(|_| Vec::with_capacity(header.n)).collect())
        .collect();
    let position: std::collections::HashMap<usize, usize> =
        header.tasks.iter().enumerate().map(|(i, (t, _))| (*t, i)).collect();
    for line in lines {
        let trimmed = line.trim_end();
        if trimmed.is_empty() {
            offset += line.len() as u64;
            continue;
        }
        let rec: TransitionLine = serde_json::from_str(trimmed).map_err(|e| Error::Parse {
            offset: offset + json::byte_offset(trimmed, e.line(), e.column()),
            message: e.to_string(),
        })?;
        let slot = *position.get(&rec.t).ok_or_else(|| Error::Parse {
            offset,
            message: format!("transition for task {} not listed in the header", rec.t),
        })?;
        if rec.h >= header.horizon {
            return Err(Error::Parse {
                offset,
                message: format!("stage {} ≥ H = {}", rec.h, header.horizon),
            });
        }
        stages[slot][rec.h].push(Transition {
            h: rec.h,
            s: rec.s,
            a: rec.a,
            r: rec.r,
            s_next: rec.s_next,
        });
        offset += line.len() as u64;
    }
    let mut datasets = Vec::with_capacity(header.tasks.len());
    for ((task, seed), st) in header.tasks.iter().zip(stages) {
        if st.iter().any(|s| s.len() != header.n) {
            return Err(Error::Parse {
                offset,
                message: format!("task {task}: expected {} transitions per stage (file truncated?)", header.n),
            });
        }
        datasets.push(TaskDataset::new(*task, header.behavior, *seed, st)?);
    }
    Ok(DatasetBundle {
        ensemble_hash: header.ensemble_hash,
        n: header.n,
        horizon: header.horizon,
        seed: header.seed,
        behavior: header.behavior,
        datasets,
    })
}

pub fn save_bundle(bundle: &DatasetBundle, path: &Path) -> Result<()> {
    let text = bundle_to_jsonl(bundle)?;
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(text.as_bytes()).map_err(|e| Error::io(path, e))
}

pub fn load_bundle(path: &Path) -> Result<DatasetBundle> {
    bundle_from_jsonl(&json::read_to_string(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ensemble::{generate_ensemble, EnsembleSpec};

    fn small() -> TaskEnsemble {
        generate_ensemble(EnsembleSpec::new(3, 2, 2, 2, 2), 1).unwrap()
    }

    #[test]
    fn behavior_descriptor_round_trip() {
        assert_eq!("uniform".parse::<BehaviorKind>().unwrap(), BehaviorKind::Uniform);
        let k: BehaviorKind = "eps:0.25".parse().unwrap();
        assert_eq!(k, BehaviorKind::EpsilonGreedy { epsilon: 0.25 });
        assert_eq!(k.to_string(), "eps:0.25");
        assert!("eps:0".parse::<BehaviorKind>().is_err());
        assert!("greedy".parse::<BehaviorKind>().is_err());
    }

    #[test]
    fn epsilon_greedy_keeps_every_action_covered() {
        let e = small();
        let pi = BehaviorPolicy::for_task(BehaviorKind::EpsilonGreedy { epsilon: 0.2 }, e.task(0)).unwrap();
        for h in 0..2 {
            for s in 0..3 {
                let row = pi.table().row(h, s);
                assert!(row.iter().all(|&p| p >= 0.1 - 1e-15));
                assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn collection_is_deterministic_and_sized() {
        let e = small();
        let a = collect(&e, 1, BehaviorKind::Uniform, 25, 9).unwrap();
        let b = collect(&e, 1, BehaviorKind::Uniform, 25, 9).unwrap();
        assert_eq!(a, b);
        assert!(a.stages().iter().all(|s| s.len() == 25));
        for tr in a.stage(0) {
            assert_eq!(tr.s, 0);
            assert_eq!(tr.r, e.task(1).reward(0, tr.s, tr.a));
        }
        // consecutive stages chain within an episode
        for (x, y) in a.stage(0).iter().zip(a.stage(1)) {
            assert_eq!(x.s_next, y.s);
        }
    }

    #[test]
    fn bundle_round_trip() {
        let e = small();
        let bundle = collect_bundle(&e, BehaviorKind::EpsilonGreedy { epsilon: 0.3 }, 7, 3).unwrap();
        let back = bundle_from_jsonl(&bundle_to_jsonl(&bundle).unwrap()).unwrap();
        assert_eq!(back, bundle);
    }

    #[test]
    fn empty_bundle_round_trip() {
        let bundle = DatasetBundle {
            ensemble_hash: "none".into(),
            n: 10,
            horizon: 3,
            seed: 0,
            behavior: BehaviorKind::Uniform,
            datasets: vec![],
        };
        let back = bundle_from_jsonl(&bundle_to_jsonl(&bundle).unwrap()).unwrap();
        assert_eq!(back, bundle);
    }

    #[test]
    fn corrupt_header_is_a_schema_error() {
        let err = bundle_from_jsonl("{\"schema_version\":1,\"kind\":\"dataset\"}\n").unwrap_err();
        assert!(matches!(err, Error::Schema(_)), "{err}");
        let err = bundle_from_jsonl("{\"schema_version\":2,\"kind\":\"dataset\"}\n").unwrap_err();
        assert!(matches!(err, Error::SchemaVersion { found: 2, expected: 1 }), "{err}");
        let err = bundle_from_jsonl("{not json\n").unwrap_err();
        assert!(matches!(err, Error::Parse { .. }), "{err}");
    }

    #[test]
    fn truncated_file_reports_offset() {
        let e = small();
        let text = bundle_to_jsonl(&collect_bundle(&e, BehaviorKind::Uniform, 4, 3).unwrap()).unwrap();
        let cut = &text[..text.len() - 10];
        match bundle_from_jsonl(cut).unwrap_err() {
            Error::Parse { offset, .. } => {
                assert!(offset > 0 && offset <= cut.len() as u64);
            }
            other => panic!("unexpected {other}"),
        }
    }
}
