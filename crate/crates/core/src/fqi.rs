//! Multi-task fitted Q-iteration.
//!
//! The ERM oracle is exact: for a fixed encoder the pooled squared loss
//! separates across tasks, so every candidate gets closed-form ridge decoders
//! and the outer minimization enumerates the finite class.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{DatasetBundle, TaskDataset, Transition};
use crate::ensemble::TaskEnsemble;
use crate::error::{Error, Result};
use crate::features::{EncoderClass, FeatureMap};
use crate::json;
use crate::linalg::{self, add_outer, dot};
use crate::mdp::{q_max, OccupancyMeasure, QTable};

pub const MODEL_SCHEMA_VERSION: u32 = 1;

/// How the encoder is chosen across stages.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EncoderMode {
    /// A fresh argmin over the class at every stage.
    #[default]
    PerStage,
    /// One encoder for all stages, minimizing the summed stage losses.
    Global,
}

impl fmt::Display for EncoderMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            EncoderMode::PerStage => "per-stage",
            EncoderMode::Global => "global",
        })
    }
}

impl FromStr for EncoderMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "per-stage" => Ok(EncoderMode::PerStage),
            "global" => Ok(EncoderMode::Global),
            other => Err(Error::invalid(format!("unknown mode `{other}` (expected per-stage or global)"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SolverConfig {
    pub ridge: f64,
    pub max_iter: usize,
    /// Inner-loop stopping threshold on ‖Θ_k − Θ_{k−1}‖.
    pub epsilon: f64,
    pub gamma: f64,
    pub mode: EncoderMode,
    /// `ln |Ψ_eff|`, carried through for bound reporting only.
    pub log_psi_eff: Option<f64>,
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self {
            ridge: 1e-8,
            max_iter: 10,
            epsilon: 1e-10,
            gamma: 1.0,
            mode: EncoderMode::PerStage,
            log_psi_eff: None,
        }
    }
}

impl SolverConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.ridge >= 0.0 && self.ridge.is_finite()) {
            return Err(Error::invalid(format!("ridge must be finite and ≥ 0, got {}", self.ridge)));
        }
        if !(self.epsilon > 0.0) {
            return Err(Error::invalid(format!("ε_Θ must be > 0, got {}", self.epsilon)));
        }
        if self.max_iter == 0 {
            return Err(Error::invalid("max_iter must be ≥ 1"));
        }
        if !(self.gamma > 0.0 && self.gamma <= 1.0) {
            return Err(Error::invalid(format!("γ must lie in (0,1], got {}", self.gamma)));
        }
        Ok(())
    }

    pub fn with_ridge(mut self, ridge: f64) -> Self {
        self.ridge = ridge;
        self
    }

    pub fn with_gamma(mut self, gamma: f64) -> Self {
        self.gamma = gamma;
        self
    }

    pub fn with_mode(mut self, mode: EncoderMode) -> Self {
        self.mode = mode;
        self
    }
}

/// Decoders and loss of one encoder at one stage.
#[derive(Debug, Clone, PartialEq)]
pub struct StageFit {
    /// One d-vector per task.
    pub decoders: Vec<Vec<f64>>,
    /// Loss averaged over all `T·n` samples (or the population loss).
    pub pooled_loss: f64,
    pub task_losses: Vec<f64>,
    /// Variance of the per-sample squared residuals.
    pub residual_sq_variance: f64,
    /// Population fits only: the part of the loss that is not transition noise.
    pub(crate) approximation_loss: f64,
}

/// Per-stage training diagnostics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitReport {
    pub ridge: f64,
    pub mode: EncoderMode,
    pub stage_losses: Vec<f64>,
    /// Inner-loop iterations used at each stage.
    pub iterations: Vec<usize>,
    /// ‖Θ_k − Θ_{k−1}‖ at every inner iteration of every stage.
    pub d_theta: Vec<Vec<f64>>,
    pub residual_sq_variance: Vec<f64>,
    pub log_psi_eff: Option<f64>,
}

/// Chosen encoders and decoders.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LearnedModel {
    pub mode: EncoderMode,
    pub gamma: f64,
    pub q_max: f64,
    /// Encoder used at each stage; all equal in global mode.
    pub stage_encoders: Vec<FeatureMap>,
    /// Indexed `[t][h]`.
    pub decoders: Vec<Vec<Vec<f64>>>,
    pub stage_losses: Vec<f64>,
    /// Labels of the candidate class, in class order.
    pub candidate_labels: Vec<String>,
    /// Pooled loss of every candidate at every stage, `[h][candidate]`.
    pub selection_trace: Vec<Vec<f64>>,
}

impl LearnedModel {
    pub fn horizon(&self) -> usize {
        self.stage_encoders.len()
    }

    pub fn num_tasks(&self) -> usize {
        self.decoders.len()
    }

    pub fn encoder(&self, h: usize) -> &FeatureMap {
        &self.stage_encoders[h]
    }

    pub fn encoder_labels(&self) -> Vec<&str> {
        self.stage_encoders.iter().map(|e| e.label()).collect()
    }

    pub fn decoder(&self, t: usize, h: usize) -> &[f64] {
        &self.decoders[t][h]
    }

    /// `Q̂_h^t(s,a)` clamped to `[0, Q_max]`.
    pub fn q_value(&self, t: usize, h: usize, s: usize, a: usize) -> f64 {
        dot(self.stage_encoders[h].row(s, a), &self.decoders[t][h]).clamp(0.0, self.q_max)
    }

    /// The clamped `Q̂^t` as a table.
    pub fn q_table(&self, t: usize) -> QTable {
        let phi = &self.stage_encoders[0];
        let (ns, na, nh) = (phi.num_states(), phi.num_actions(), self.horizon());
        let mut q = QTable::zeros(ns, na, nh);
        for h in 0..nh {
            let vals = stage_q(&self.stage_encoders[h], &self.decoders[t][h], self.q_max);
            q.stage_mut(h).copy_from_slice(&vals);
        }
        q
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(&ModelDoc {
            schema_version: MODEL_SCHEMA_VERSION,
            kind: "model".into(),
            model: self.clone(),
        })?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let doc: ModelDoc = json::from_versioned_str(text, "model", MODEL_SCHEMA_VERSION)?;
        for e in &doc.model.stage_encoders {
            e.validate()?;
        }
        Ok(doc.model)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()? + "\n").map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&json::read_to_string(path)?)
    }
}

#[derive(Serialize, Deserialize)]
struct ModelDoc {
    schema_version: u32,
    kind: String,
    #[serde(flatten)]
    model: LearnedModel,
}

/// Clamped stage values `[s][a]`.
fn stage_q(phi: &FeatureMap, w: &[f64], q_max: f64) -> Vec<f64> {
    phi.evaluate_all(w).into_iter().map(|q| q.clamp(0.0, q_max)).collect()
}

/// Next-stage model used to form targets.
#[derive(Clone, Copy)]
struct NextStage<'a> {
    phi: &'a FeatureMap,
    decoders: &'a [Vec<f64>],
}

impl NextStage<'_> {
    /// `max_a' clamp(Q̂_{h+1}^t(s', a'))` for every state.
    fn values(&self, t: usize, q_max: f64) -> Vec<f64> {
        let na = self.phi.num_actions();
        stage_q(self.phi, &self.decoders[t], q_max)
            .chunks(na)
            .map(|row| row.iter().cloned().fold(f64::NEG_INFINITY, f64::max))
            .collect()
    }
}

/// The empirical Q-Bellman loss of `(φ, w_h)` against bootstrapped targets
/// from `(φ, w_{h+1})`, averaged over all samples of all tasks. Pass `None`
/// for the last stage.
pub fn empirical_bellman_loss(
    phi: &FeatureMap,
    w_h: &[Vec<f64>],
    w_next: Option<&[Vec<f64>]>,
    slices: &[&[Transition]],
    gamma: f64,
) -> Result<f64> {
    if slices.is_empty() || slices.iter().any(|s| s.is_empty()) {
        return Err(Error::EmptyData("Bellman loss needs at least one sample per task".into()));
    }
    if w_h.len() != slices.len() || w_next.is_some_and(|w| w.len() != slices.len()) {
        return Err(Error::DimensionMismatch("one decoder per task is required".into()));
    }
    let d = phi.dim();
    let bad_dim = |w: &[Vec<f64>]| w.iter().any(|v| v.len() != d);
    if bad_dim(w_h) || w_next.is_some_and(bad_dim) {
        return Err(Error::DimensionMismatch(format!("decoders must have dimension d = {d}")));
    }
    check_transitions(phi, slices)?;
    let na = phi.num_actions();
    let mut total = 0.0;
    let mut count = 0usize;
    for (t, slice) in slices.iter().enumerate() {
        let next_max: Option<Vec<f64>> = w_next.map(|w| {
            phi.evaluate_all(&w[t])
                .chunks(na)
                .map(|row| row.iter().cloned().fold(f64::NEG_INFINITY, f64::max))
                .collect()
        });
        for tr in slice.iter() {
            let boot = next_max.as_ref().map_or(0.0, |v| v[tr.s_next]);
            let res = dot(phi.row(tr.s, tr.a), &w_h[t]) - tr.r - gamma * boot;
            total += res * res;
            count += 1;
        }
    }
    Ok(total / count as f64)
}

/// Per-task ridge regression of `targets` on `φ(s,a)`.
pub fn fit_stage(phi: &FeatureMap, slices: &[&[Transition]], targets: &[Vec<f64>], ridge: f64) -> Result<StageFit> {
    if slices.len() != targets.len() {
        return Err(Error::DimensionMismatch(format!(
            "{} task slices but {} target vectors",
            slices.len(),
            targets.len()
        )));
    }
    if slices.is_empty() {
        return Err(Error::EmptyData("no tasks to fit".into()));
    }
    for (t, (s, y)) in slices.iter().zip(targets).enumerate() {
        if s.is_empty() {
            return Err(Error::EmptyData(format!("task {t} has no samples")));
        }
        if s.len() != y.len() {
            return Err(Error::DimensionMismatch(format!(
                "task {t}: {} samples but {} targets",
                s.len(),
                y.len()
            )));
        }
    }
    check_transitions(phi, slices)?;
    let d = phi.dim();
    let mut decoders = Vec::with_capacity(slices.len());
    let mut task_losses = Vec::with_capacity(slices.len());
    let mut sq = Vec::new();
    for (slice, y) in slices.iter().zip(targets) {
        let mut gram = vec![0.0; d * d];
        let mut rhs = vec![0.0; d];
        for (tr, &yi) in slice.iter().zip(y) {
            let x = phi.row(tr.s, tr.a);
            add_outer(&mut gram, x, 1.0);
            for (r, xi) in rhs.iter_mut().zip(x) {
                *r += yi * xi;
            }
        }
        let w = linalg::solve_ridge(&gram, &rhs, ridge)?;
        let mut loss = 0.0;
        for (tr, &yi) in slice.iter().zip(y) {
            let res = dot(phi.row(tr.s, tr.a), &w) - yi;
            loss += res * res;
            sq.push(res * res);
        }
        task_losses.push(loss / slice.len() as f64);
        decoders.push(w);
    }
    let total: usize = slices.iter().map(|s| s.len()).sum();
    let pooled_loss = sq.iter().sum::<f64>() / total as f64;
    Ok(StageFit {
        decoders,
        pooled_loss,
        task_losses,
        residual_sq_variance: variance(&sq),
        approximation_loss: pooled_loss,
    })
}

fn variance(xs: &[f64]) -> f64 {
    if xs.len() < 2 {
        return 0.0;
    }
    let mean = xs.iter().sum::<f64>() / xs.len() as f64;
    xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (xs.len() - 1) as f64
}

fn check_transitions(phi: &FeatureMap, slices: &[&[Transition]]) -> Result<()> {
    let (ns, na) = (phi.num_states(), phi.num_actions());
    for slice in slices {
        if let Some(tr) = slice.iter().find(|tr| tr.s >= ns || tr.a >= na || tr.s_next >= ns) {
            return Err(Error::IndexOutOfRange(format!(
                "transition (s={}, a={}, s'={}) outside S={ns}, K={na}",
                tr.s, tr.a, tr.s_next
            )));
        }
    }
    Ok(())
}

/// Result of the stage ERM: chosen candidate, its fit and every candidate's loss.
struct StageOutcome {
    chosen: usize,
    fit: StageFit,
    losses: Vec<f64>,
    d_theta: Vec<f64>,
}

/// The inner repeat loop at a fixed stage: re-solve the ERM until the
/// decoder change drops below ε or `max_iter` is hit.
fn erm_stage<F>(h: usize, candidates: &[&FeatureMap], cfg: &SolverConfig, fit: &F) -> Result<StageOutcome>
where
    F: Fn(&FeatureMap) -> Result<StageFit> + Sync,
{
    let mut prev: Option<Vec<f64>> = None;
    let mut d_theta = Vec::new();
    loop {
        let fits = candidates
            .par_iter()
            .map(|phi| {
                fit(phi).map_err(|e| Error::Fit {
                    stage: h,
                    encoder: phi.label().to_string(),
                    source: Box::new(e),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let losses: Vec<f64> = fits.iter().map(|f| f.pooled_loss).collect();
        let chosen = argmin(&losses);
        let fit = fits.into_iter().nth(chosen).expect("non-empty class");
        let theta: Vec<f64> = fit.decoders.concat();
        let change = match &prev {
            Some(p) => linalg::norm(&theta.iter().zip(p).map(|(a, b)| a - b).collect::<Vec<_>>()),
            None => linalg::norm(&theta),
        };
        d_theta.push(change);
        prev = Some(theta);
        if change < cfg.epsilon || d_theta.len() >= cfg.max_iter {
            return Ok(StageOutcome {
                chosen,
                fit,
                losses,
                d_theta,
            });
        }
    }
}

/// Lowest index among the minimal values; NaN never wins.
fn argmin(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate().skip(1) {
        if x < xs[best] || xs[best].is_nan() {
            best = i;
        }
    }
    best
}

struct Chain {
    chosen: Vec<usize>,
    fits: Vec<StageFit>,
    losses: Vec<Vec<f64>>,
    d_theta: Vec<Vec<f64>>,
}

/// Backward pass `h = H-1, …, 0`, each stage fit against the already-fixed
/// next stage.
fn run_chain<F>(horizon: usize, candidates: &[&FeatureMap], cfg: &SolverConfig, fit: F) -> Result<Chain>
where
    F: Fn(usize, &FeatureMap, Option<NextStage<'_>>) -> Result<StageFit> + Sync,
{
    let mut chosen = vec![0; horizon];
    let mut fits: Vec<Option<StageFit>> = vec![None; horizon];
    let mut losses = vec![Vec::new(); horizon];
    let mut d_theta = vec![Vec::new(); horizon];
    for h in (0..horizon).rev() {
        let next = if h + 1 < horizon {
            Some(NextStage {
                phi: candidates[chosen[h + 1]],
                decoders: &fits[h + 1].as_ref().expect("fitted").decoders,
            })
        } else {
            None
        };
        let out = erm_stage(h, candidates, cfg, &|phi: &FeatureMap| fit(h, phi, next))?;
        chosen[h] = out.chosen;
        fits[h] = Some(out.fit);
        losses[h] = out.losses;
        d_theta[h] = out.d_theta;
    }
    Ok(Chain {
        chosen,
        fits: fits.into_iter().map(|f| f.expect("fitted")).collect(),
        losses,
        d_theta,
    })
}

/// Runs the chain in the configured mode over the whole class.
fn solve<F>(horizon: usize, class: &EncoderClass, cfg: &SolverConfig, fit: F) -> Result<(LearnedModel, FitReport, Chain)>
where
    F: Fn(usize, &FeatureMap, Option<NextStage<'_>>) -> Result<StageFit> + Sync,
{
    cfg.validate()?;
    if horizon == 0 {
        return Err(Error::invalid("horizon must be ≥ 1"));
    }
    let members: Vec<&FeatureMap> = class.members().iter().collect();
    let (chain, trace) = match cfg.mode {
        EncoderMode::PerStage => {
            let chain = run_chain(horizon, &members, cfg, &fit)?;
            let trace = chain.losses.clone();
            (chain, trace)
        }
        EncoderMode::Global => {
            let chains = members
                .par_iter()
                .enumerate()
                .map(|(i, phi)| {
                    run_chain(horizon, &[*phi], cfg, &fit).map(|mut c| {
                        c.chosen.iter_mut().for_each(|k| *k = i);
                        c
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            let totals: Vec<f64> = chains
                .iter()
                .map(|c| c.fits.iter().map(|f| f.pooled_loss).sum())
                .collect();
            let trace = (0..horizon)
                .map(|h| chains.iter().map(|c| c.fits[h].pooled_loss).collect())
                .collect();
            let best = argmin(&totals);
            (chains.into_iter().nth(best).expect("non-empty class"), trace)
        }
    };
    let num_tasks = chain.fits[0].decoders.len();
    let decoders = (0..num_tasks)
        .map(|t| chain.fits.iter().map(|f| f.decoders[t].clone()).collect())
        .collect();
    let stage_losses: Vec<f64> = chain.fits.iter().map(|f| f.pooled_loss).collect();
    let model = LearnedModel {
        mode: cfg.mode,
        gamma: cfg.gamma,
        q_max: q_max(cfg.gamma, horizon),
        stage_encoders: chain.chosen.iter().map(|&i| members[i].clone()).collect(),
        decoders,
        stage_losses: stage_losses.clone(),
        candidate_labels: members.iter().map(|m| m.label().to_string()).collect(),
        selection_trace: trace,
    };
    let report = FitReport {
        ridge: cfg.ridge,
        mode: cfg.mode,
        stage_losses,
        iterations: chain.d_theta.iter().map(Vec::len).collect(),
        d_theta: chain.d_theta.clone(),
        residual_sq_variance: chain.fits.iter().map(|f| f.residual_sq_variance).collect(),
        log_psi_eff: cfg.log_psi_eff,
    };
    Ok((model, report, chain))
}

/// Sample-based fit of one stage against the next stage's clamped values.
fn sample_stage_fit(
    slices: &[&[Transition]],
    phi: &FeatureMap,
    next: Option<NextStage<'_>>,
    cfg: &SolverConfig,
    q_max: f64,
) -> Result<StageFit> {
    let targets: Vec<Vec<f64>> = slices
        .iter()
        .enumerate()
        .map(|(t, slice)| {
            let v = next.map(|n| n.values(t, q_max));
            slice
                .iter()
                .map(|tr| tr.r + v.as_ref().map_or(0.0, |v| cfg.gamma * v[tr.s_next]))
                .collect()
        })
        .collect();
    fit_stage(phi, slices, &targets, cfg.ridge)
}

fn bundle_slices(bundle: &DatasetBundle) -> Result<Vec<Vec<&[Transition]>>> {
    if bundle.datasets.is_empty() {
        return Err(Error::EmptyData("dataset bundle has no tasks".into()));
    }
    if bundle.datasets.iter().any(|d| d.horizon() != bundle.horizon) {
        return Err(Error::DimensionMismatch("task datasets disagree on H".into()));
    }
    Ok((0..bundle.horizon).map(|h| bundle.stage_slices(h)).collect())
}

/// Multi-task fitted Q-iteration on offline data.
pub fn run_mtfqi(bundle: &DatasetBundle, class: &EncoderClass, cfg: &SolverConfig) -> Result<(LearnedModel, FitReport)> {
    let slices = bundle_slices(bundle)?;
    let qm = q_max(cfg.gamma, bundle.horizon);
    let (model, report, _) = solve(bundle.horizon, class, cfg, |h, phi, next| {
        sample_stage_fit(&slices[h], phi, next, cfg, qm)
    })?;
    Ok((model, report))
}

/// Population-loss fit with per-stage irreducible error.
#[derive(Debug, Clone, PartialEq)]
pub struct ExactFit {
    pub model: LearnedModel,
    pub report: FitReport,
    /// Task-averaged `E_μ[(f̂ − T f̂_{h+1})²]` at the chosen fit, per stage.
    pub irreducible_error: Vec<f64>,
}

/// Fitted Q-iteration with sample averages replaced by exact expectations
/// under the behavior occupancies `mu[t]` and the true transitions.
///
/// With `ridge == 0` the weighted normal equations are solved by the
/// minimum-norm pseudo-inverse, since early stages may cover fewer than d
/// pairs.
pub fn run_exact_mtfqi(
    ensemble: &TaskEnsemble,
    class: &EncoderClass,
    mu: &[OccupancyMeasure],
    cfg: &SolverConfig,
) -> Result<ExactFit> {
    let spec = ensemble.spec();
    if mu.len() != ensemble.num_tasks() {
        return Err(Error::DimensionMismatch(format!(
            "{} occupancy measures for {} tasks",
            mu.len(),
            ensemble.num_tasks()
        )));
    }
    for m in mu {
        if m.shape() != (spec.num_states, spec.num_actions, spec.horizon) {
            return Err(Error::DimensionMismatch("occupancy shape differs from the ensemble".into()));
        }
    }
    if class.shape().0 != spec.num_states || class.shape().1 != spec.num_actions {
        return Err(Error::DimensionMismatch("encoder class and ensemble disagree on (S, K)".into()));
    }
    let qm = q_max(cfg.gamma, spec.horizon);
    let (model, report, chain) = solve(spec.horizon, class, cfg, |h, phi, next| {
        exact_stage_fit(ensemble, mu, h, phi, next, cfg, qm)
    })?;
    Ok(ExactFit {
        model,
        report,
        irreducible_error: chain.fits.iter().map(|f| f.approximation_loss).collect(),
    })
}

fn exact_stage_fit(
    ensemble: &TaskEnsemble,
    mu: &[OccupancyMeasure],
    h: usize,
    phi: &FeatureMap,
    next: Option<NextStage<'_>>,
    cfg: &SolverConfig,
    q_max: f64,
) -> Result<StageFit> {
    let d = phi.dim();
    let (ns, na) = (phi.num_states(), phi.num_actions());
    let mut decoders = Vec::with_capacity(mu.len());
    let mut task_losses = Vec::with_capacity(mu.len());
    let mut approx_total = 0.0;
    for (t, m) in mu.iter().enumerate() {
        let mdp = ensemble.task(t);
        let v = next.map(|n| n.values(t, q_max));
        // mean target and conditional variance per pair
        let mut ybar = vec![0.0; ns * na];
        let mut var = vec![0.0; ns * na];
        for s in 0..ns {
            for a in 0..na {
                let r = mdp.reward(h, s, a);
                let (mean, second) = match &v {
                    Some(v) => {
                        let p = mdp.next_state_probs(h, s, a);
                        let mean: f64 = p.iter().zip(v).map(|(p, v)| p * v).sum();
                        let second: f64 = p.iter().zip(v).map(|(p, v)| p * v * v).sum();
                        (mean, second)
                    }
                    None => (0.0, 0.0),
                };
                ybar[s * na + a] = r + cfg.gamma * mean;
                var[s * na + a] = (cfg.gamma * cfg.gamma * (second - mean * mean)).max(0.0);
            }
        }
        let weights = m.stage(h);
        let mut gram = vec![0.0; d * d];
        let mut rhs = vec![0.0; d];
        for pair in 0..ns * na {
            let w = weights[pair];
            if w == 0.0 {
                continue;
            }
            let x = phi.pair_row(pair);
            add_outer(&mut gram, x, w);
            for (r, xi) in rhs.iter_mut().zip(x) {
                *r += w * ybar[pair] * xi;
            }
        }
        let w = if cfg.ridge == 0.0 {
            linalg::solve_min_norm(&gram, &rhs)?
        } else {
            linalg::solve_ridge(&gram, &rhs, cfg.ridge)?
        };
        let mut approx = 0.0;
        let mut noise = 0.0;
        for pair in 0..ns * na {
            let wt = weights[pair];
            if wt == 0.0 {
                continue;
            }
            let res = dot(phi.pair_row(pair), &w) - ybar[pair];
            approx += wt * res * res;
            noise += wt * var[pair];
        }
        approx_total += approx;
        task_losses.push(approx + noise);
        decoders.push(w);
    }
    let tasks = mu.len() as f64;
    Ok(StageFit {
        decoders,
        pooled_loss: task_losses.iter().sum::<f64>() / tasks,
        task_losses,
        residual_sq_variance: 0.0,
        approximation_loss: approx_total / tasks,
    })
}

/// Downstream fit on a new task with the encoder frozen.
#[derive(Debug, Clone, PartialEq)]
pub struct DownstreamFit {
    pub model: LearnedModel,
    pub report: FitReport,
}

impl DownstreamFit {
    pub fn decoders(&self) -> &[Vec<f64>] {
        &self.model.decoders[0]
    }
}

/// Backward fitted Q-iteration on a single task using only `phi`.
pub fn fit_downstream(phi: &FeatureMap, dataset: &TaskDataset, cfg: &SolverConfig) -> Result<DownstreamFit> {
    let class = EncoderClass::new(vec![phi.clone()], false)?;
    let slices: Vec<Vec<&[Transition]>> = (0..dataset.horizon()).map(|h| vec![dataset.stage(h)]).collect();
    let qm = q_max(cfg.gamma, dataset.horizon());
    let cfg = cfg.clone().with_mode(EncoderMode::PerStage);
    let (model, report, _) = solve(dataset.horizon(), &class, &cfg, |h, phi, next| {
        sample_stage_fit(&slices[h], phi, next, &cfg, qm)
    })?;
    Ok(DownstreamFit { model, report })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{collect_bundle, BehaviorKind};
    use crate::ensemble::{generate_ensemble, EnsembleSpec};
    use crate::features::build_encoder_class;

    fn tr(s: usize, a: usize, r: f64, s_next: usize) -> Transition {
        Transition { h: 0, s, a, r, s_next }
    }

    #[test]
    fn mode_parsing() {
        assert_eq!("global".parse::<EncoderMode>().unwrap(), EncoderMode::Global);
        assert_eq!(EncoderMode::PerStage.to_string(), "per-stage");
        assert!("both".parse::<EncoderMode>().is_err());
    }

    #[test]
    fn zero_decoders_give_mean_squared_reward() {
        let phi = FeatureMap::new("e", 2, 1, 1, vec![1.0, 0.5]).unwrap();
        let data = [tr(0, 0, 0.5, 1), tr(1, 0, 1.0, 0)];
        let zero = vec![vec![0.0]];
        let loss = empirical_bellman_loss(&phi, &zero, Some(&zero), &[&data], 1.0).unwrap();
        assert!((loss - (0.25 + 1.0) / 2.0).abs() < 1e-15);
    }

    #[test]
    fn noiseless_targets_are_recovered() {
        let phi = FeatureMap::new("e", 3, 1, 2, vec![1.0, 0.0, 0.0, 1.0, 0.6, 0.8]).unwrap();
        let w0 = [0.3, -0.7];
        let data: Vec<Transition> = (0..3).map(|s| tr(s, 0, 0.0, 0)).collect();
        let y: Vec<f64> = data.iter().map(|t| dot(phi.row(t.s, 0), &w0)).collect();
        let fit = fit_stage(&phi, &[&data], &[y], 0.0).unwrap();
        assert!((fit.decoders[0][0] - w0[0]).abs() < 1e-10);
        assert!((fit.decoders[0][1] - w0[1]).abs() < 1e-10);
        assert!(fit.pooled_loss < 1e-20);
    }

    #[test]
    fn singular_design_without_ridge_fails() {
        let phi = FeatureMap::new("e", 1, 1, 2, vec![0.6, 0.8]).unwrap();
        let data = [tr(0, 0, 1.0, 0)];
        let err = fit_stage(&phi, &[&data], &[vec![1.0]], 0.0).unwrap_err();
        assert!(matches!(err, Error::RankDeficient));
        assert!(err.to_string().contains("increase n or λ_reg"));
    }

    #[test]
    fn huge_ridge_shrinks_to_zero() {
        let phi = FeatureMap::new("e", 2, 1, 1, vec![1.0, 0.5]).unwrap();
        let data = [tr(0, 0, 1.0, 0), tr(1, 0, 1.0, 0)];
        let fit = fit_stage(&phi, &[&data], &[vec![1.0, 1.0]], 1e12).unwrap();
        assert!(fit.decoders[0][0].abs() < 1e-11);
    }

    #[test]
    fn inner_loop_reports_converged_trace() {
        let e = generate_ensemble(EnsembleSpec::new(4, 2, 3, 2, 3), 5).unwrap();
        let bundle = collect_bundle(&e, BehaviorKind::Uniform, 40, 1).unwrap();
        let class = build_encoder_class(e.features(), 3, 1.0, 2).unwrap();
        let (model, report) = run_mtfqi(&bundle, &class, &SolverConfig::default()).unwrap();
        for trace in &report.d_theta {
            assert_eq!(trace.len(), 2);
            assert!(trace[0] > 0.0);
            assert_eq!(trace[1], 0.0);
        }
        for (h, losses) in model.selection_trace.iter().enumerate() {
            let chosen = model.stage_losses[h];
            assert!(losses.iter().all(|&l| chosen <= l));
        }
    }

    #[test]
    fn model_json_round_trip() {
        let e = generate_ensemble(EnsembleSpec::new(3, 2, 2, 2, 2), 8).unwrap();
        let bundle = collect_bundle(&e, BehaviorKind::Uniform, 20, 1).unwrap();
        let class = build_encoder_class(e.features(), 2, 0.5, 2).unwrap();
        let cfg = SolverConfig::default().with_mode(EncoderMode::Global);
        let (model, _) = run_mtfqi(&bundle, &class, &cfg).unwrap();
        let back = LearnedModel::from_json(&model.to_json().unwrap()).unwrap();
        assert_eq!(back, model);
        let labels = model.encoder_labels();
        assert!(labels.iter().all(|l| *l == labels[0]));
    }

    #[test]
    fn argmin_prefers_lowest_index() {
        assert_eq!(argmin(&[2.0, 1.0, 1.0]), 1);
        assert_eq!(argmin(&[f64::NAN, 3.0]), 1);
    }
}
