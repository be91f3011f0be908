//! Error metrics, concentrability, bound calculators and Rademacher
//! estimates.
//!
//! Bounds written with `≲` are evaluated with every constant set to one;
//! only Theorem 1(a) carries explicit constants.

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{BehaviorPolicy, DatasetBundle};
use crate::ensemble::TaskEnsemble;
use crate::error::{Error, Result};
use crate::features::EncoderClass;
use crate::fqi::{run_exact_mtfqi, LearnedModel, SolverConfig};
use crate::json;
use crate::linalg::{dot, norm};
use crate::mdp::{occupancy, optimal_q, stochastic_policy_q, OccupancyMeasure, Policy, QTable, TabularMDP};
use crate::rng::{derive_seed, seeded, stream};

pub const REPORT_SCHEMA_VERSION: u32 = 1;

/// Policy-enumeration limit for [`lambda_max_bruteforce`].
pub const BRUTEFORCE_LIMIT: f64 = 1e4;

/// `sqrt(Σ_{s,a} μ_h(s,a)·(q̂_h − q_ref,h)²)`.
pub fn weighted_q_error(q_hat: &QTable, q_ref: &QTable, mu: &OccupancyMeasure, h: usize) -> Result<f64> {
    Ok(weighted_sq_error(q_hat, q_ref, mu, h)?.sqrt())
}

/// Squared version of [`weighted_q_error`].
pub fn weighted_sq_error(q_hat: &QTable, q_ref: &QTable, mu: &OccupancyMeasure, h: usize) -> Result<f64> {
    if q_hat.shape() != q_ref.shape() || q_hat.shape() != mu.shape() {
        return Err(Error::DimensionMismatch(format!(
            "Q̂ {:?}, reference {:?} and μ {:?} must share (S, K, H)",
            q_hat.shape(),
            q_ref.shape(),
            mu.shape()
        )));
    }
    if h >= q_hat.horizon() {
        return Err(Error::IndexOutOfRange(format!("stage {h} ≥ H = {}", q_hat.horizon())));
    }
    Ok(q_hat
        .stage(h)
        .iter()
        .zip(q_ref.stage(h))
        .zip(mu.stage(h))
        .map(|((a, b), w)| w * (a - b) * (a - b))
        .sum())
}

/// Reference Q-function used by an [`ErrorReport`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Comparator {
    Optimal,
    Behavior,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErrorReport {
    pub comparator: Comparator,
    /// `‖Q̂_h^t − Q_h^{ref,t}‖_{L2(μ_b)}`, indexed `[t][h]`.
    pub per_task: Vec<Vec<f64>>,
    /// Task average of `per_task`, per stage.
    pub delta: Vec<f64>,
    /// Task average of the squared errors, per stage.
    pub mse: Vec<f64>,
}

impl ErrorReport {
    pub fn new(comparator: Comparator, q_hats: &[QTable], refs: &[QTable], mus: &[OccupancyMeasure]) -> Result<Self> {
        if q_hats.len() != refs.len() || q_hats.len() != mus.len() {
            return Err(Error::DimensionMismatch("one Q̂, reference and occupancy per task".into()));
        }
        if q_hats.is_empty() {
            return Err(Error::EmptyData("no tasks to evaluate".into()));
        }
        let nh = q_hats[0].horizon();
        let mut sq = Vec::with_capacity(q_hats.len());
        for ((q, r), m) in q_hats.iter().zip(refs).zip(mus) {
            sq.push((0..nh).map(|h| weighted_sq_error(q, r, m, h)).collect::<Result<Vec<_>>>()?);
        }
        let tasks = q_hats.len() as f64;
        let per_task: Vec<Vec<f64>> = sq.iter().map(|v| v.iter().map(|x| x.sqrt()).collect()).collect();
        let delta = (0..nh).map(|h| per_task.iter().map(|v| v[h]).sum::<f64>() / tasks).collect();
        let mse = (0..nh).map(|h| sq.iter().map(|v| v[h]).sum::<f64>() / tasks).collect();
        Ok(Self {
            comparator,
            per_task,
            delta,
            mse,
        })
    }
}

/// For a target `(h, s*)`, a deterministic policy maximizing the probability
/// of being in `s*` at stage `h`, found by backward DP on reach probability.
fn max_reach_policy(mdp: &TabularMDP, h: usize, target: usize) -> Policy {
    let (ns, na, nh) = (mdp.num_states(), mdp.num_actions(), mdp.horizon());
    let mut policy = Policy::from_index(ns, na, nh, 0);
    let mut v = vec![0.0; ns];
    v[target] = 1.0;
    for k in (0..h).rev() {
        let mut next = vec![0.0; ns];
        for (s, out) in next.iter_mut().enumerate() {
            let mut best = (0, f64::NEG_INFINITY);
            for a in 0..na {
                let val = dot(mdp.next_state_probs(k, s, a), &v);
                if val > best.1 {
                    best = (a, val);
                }
            }
            policy.set_action(k, s, best.0);
            *out = best.1;
        }
        v = next;
    }
    policy
}

fn check_shapes(mdp: &TabularMDP, mu_b: &OccupancyMeasure) -> Result<()> {
    if mu_b.shape() != (mdp.num_states(), mdp.num_actions(), mdp.horizon()) {
        return Err(Error::DimensionMismatch(format!(
            "behavior occupancy {:?} does not match the MDP",
            mu_b.shape()
        )));
    }
    Ok(())
}

/// `sup_h sup_π max_{s,a} μ_h^π(s,a) / μ_b,h(s,a)` over pairs some policy
/// can reach, computed with one max-reach DP per `(h, s)`.
pub fn lambda_max(mdp: &TabularMDP, mu_b: &OccupancyMeasure) -> Result<f64> {
    check_shapes(mdp, mu_b)?;
    let (ns, na, nh) = (mdp.num_states(), mdp.num_actions(), mdp.horizon());
    let mut best = 0.0_f64;
    for h in 0..nh {
        for s in 0..ns {
            let pi = max_reach_policy(mdp, h, s);
            let reach = occupancy(mdp, &pi.to_stochastic())?.state_mass(h, s);
            if reach == 0.0 {
                continue;
            }
            for a in 0..na {
                let b = mu_b.weight(h, s, a);
                if b == 0.0 {
                    return Err(Error::UnboundedConcentrability {
                        stage: h,
                        state: s,
                        action: a,
                        reach,
                    });
                }
                best = best.max(reach / b);
            }
        }
    }
    Ok(best)
}

/// The same supremum by enumerating every deterministic policy.
pub fn lambda_max_bruteforce(mdp: &TabularMDP, mu_b: &OccupancyMeasure) -> Result<f64> {
    check_shapes(mdp, mu_b)?;
    let count = mdp.num_deterministic_policies();
    if count > BRUTEFORCE_LIMIT {
        return Err(Error::InstanceTooLarge {
            policies: count,
            limit: BRUTEFORCE_LIMIT,
        });
    }
    let (ns, na, nh) = (mdp.num_states(), mdp.num_actions(), mdp.horizon());
    let mut best = 0.0_f64;
    for index in 0..count as u64 {
        let pi = Policy::from_index(ns, na, nh, index);
        let mu = occupancy(mdp, &pi.to_stochastic())?;
        for h in 0..nh {
            for s in 0..ns {
                for a in 0..na {
                    let w = mu.weight(h, s, a);
                    if w == 0.0 {
                        continue;
                    }
                    let b = mu_b.weight(h, s, a);
                    if b == 0.0 {
                        return Err(Error::UnboundedConcentrability {
                            stage: h,
                            state: s,
                            action: a,
                            reach: w,
                        });
                    }
                    best = best.max(w / b);
                }
            }
        }
    }
    Ok(best)
}

/// Ingredients of the finite-sample bounds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoundInputs {
    /// `Q_max²`.
    pub b: f64,
    /// `|Φ|`.
    pub num_encoders: usize,
    /// `ln |Ψ_eff|`.
    pub log_psi_eff: f64,
    pub num_tasks: usize,
    pub n: usize,
    pub horizon: usize,
    pub delta: f64,
    pub lambda_max: f64,
    pub sigma_sq: f64,
    pub eps_irred: f64,
    /// Rademacher complexity of the downstream decoder class.
    pub rademacher: f64,
}

impl BoundInputs {
    fn check(&self) -> Result<()> {
        if !(self.delta > 0.0 && self.delta < 1.0) {
            return Err(Error::invalid(format!("δ must lie in (0,1), got {}", self.delta)));
        }
        if self.num_encoders == 0 || self.num_tasks == 0 || self.n == 0 || self.horizon == 0 {
            return Err(Error::invalid("|Φ|, T, n and H must all be ≥ 1"));
        }
        Ok(())
    }

    /// `ln 2 + ln|Φ| + T·ln|Ψ_eff| − ln δ`.
    fn log_class(&self) -> f64 {
        2f64.ln() + (self.num_encoders as f64).ln() + self.num_tasks as f64 * self.log_psi_eff - self.delta.ln()
    }

    fn nt(&self) -> f64 {
        (self.n * self.num_tasks) as f64
    }
}

/// `ln |Ψ_eff| = d·ln(1 + ⌈2·W_max·√n⌉)`, the covering count of a
/// `1/(2√n)`-grid on the decoder ball.
pub fn log_psi_eff(d: usize, w_max: f64, n: usize) -> f64 {
    d as f64 * (1.0 + (2.0 * w_max * (n as f64).sqrt()).ceil()).ln()
}

/// `B·sqrt(2·ln(2|Φ||Ψ|^T H/δ) / (nT))`.
pub fn theorem1a_bound(inputs: &BoundInputs) -> Result<f64> {
    inputs.check()?;
    let log_term = inputs.log_class() + (inputs.horizon as f64).ln();
    Ok(inputs.b * (2.0 * log_term / inputs.nt()).sqrt())
}

/// Bernstein deviation `(2B/3)·L + sqrt((4B²/9)·L² + 8σ²·L)`.
pub fn bernstein(b: f64, sigma_sq: f64, log_term: f64) -> f64 {
    2.0 * b / 3.0 * log_term + (4.0 * b * b / 9.0 * log_term * log_term + 8.0 * sigma_sq * log_term).sqrt()
}

/// One step of the error recursion:
/// `sqrt(2λ)·err_next + sqrt(ε_irred) + sqrt(bernstein)`.
pub fn theorem1b_recursion_step(err_next: f64, inputs: &BoundInputs) -> Result<f64> {
    inputs.check()?;
    if !(err_next >= 0.0) {
        return Err(Error::invalid(format!("err_next must be ≥ 0, got {err_next}")));
    }
    let bern = bernstein(inputs.b, inputs.sigma_sq, inputs.log_class());
    Ok((2.0 * inputs.lambda_max).sqrt() * err_next + inputs.eps_irred.sqrt() + bern.sqrt())
}

/// The recursion iterated `H` times from a zero terminal error.
pub fn theorem1b_unrolled(inputs: &BoundInputs) -> Result<f64> {
    let mut err = 0.0;
    for _ in 0..inputs.horizon {
        err = theorem1b_recursion_step(err, inputs)?;
    }
    Ok(err)
}

/// `Hλε + H²λ·sqrt(L/(nT)) + H³λ·L/(nT)` with `L = ln|Φ| + T·ln|Ψ_eff|`.
pub fn theorem1c_bound(inputs: &BoundInputs) -> Result<f64> {
    inputs.check()?;
    let h = inputs.horizon as f64;
    let lam = inputs.lambda_max;
    let l = (inputs.num_encoders as f64).ln() + inputs.num_tasks as f64 * inputs.log_psi_eff;
    let ratio = l / inputs.nt();
    Ok(h * lam * inputs.eps_irred + h * h * lam * ratio.sqrt() + h * h * h * lam * ratio)
}

/// `Hλε_eff + H²λ·R(G) + H³λ·ln(1/δ)/n`.
pub fn theorem2_bound(inputs: &BoundInputs) -> Result<f64> {
    inputs.check()?;
    let h = inputs.horizon as f64;
    let lam = inputs.lambda_max;
    Ok(h * lam * inputs.eps_irred + h * h * lam * inputs.rademacher + h * h * h * lam * (1.0 / inputs.delta).ln() / inputs.n as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RademacherEstimate {
    pub estimate: f64,
    pub std_error: f64,
    pub analytic_bound: f64,
}

/// Monte Carlo Rademacher complexity of `{z ↦ ⟨w, z⟩ : ‖w‖ ≤ W_max}` on the
/// given embeddings, using the closed-form supremum `(W/n)‖Σ σ_i z_i‖`.
pub fn rademacher_estimate(z: &[Vec<f64>], w_max: f64, draws: usize, seed: u64) -> Result<RademacherEstimate> {
    if z.is_empty() {
        return Err(Error::EmptyData("no embeddings".into()));
    }
    if draws == 0 {
        return Err(Error::invalid("need at least one Rademacher draw"));
    }
    let d = z[0].len();
    if z.iter().any(|v| v.len() != d) {
        return Err(Error::DimensionMismatch("embeddings differ in dimension".into()));
    }
    let n = z.len() as f64;
    let base = derive_seed(seed, stream::RADEMACHER);
    let values: Vec<f64> = (0..draws)
        .into_par_iter()
        .map(|m| {
            let mut rng = seeded(derive_seed(base, m as u64));
            let mut sum = vec![0.0; d];
            for v in z {
                let sign = if rng.random::<bool>() { 1.0 } else { -1.0 };
                for (acc, x) in sum.iter_mut().zip(v) {
                    *acc += sign * x;
                }
            }
            w_max / n * norm(&sum)
        })
        .collect();
    let mean = values.iter().sum::<f64>() / draws as f64;
    let sd = if draws > 1 {
        (values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (draws - 1) as f64).sqrt()
    } else {
        0.0
    };
    let analytic = w_max / n * z.iter().map(|v| dot(v, v)).sum::<f64>().sqrt();
    Ok(RademacherEstimate {
        estimate: mean,
        std_error: sd / (draws as f64).sqrt(),
        analytic_bound: analytic,
    })
}

/// Bound values reported by [`evaluate`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoundValues {
    pub theorem1a: f64,
    pub theorem1b_unrolled: f64,
    /// The unrolled recursion with the worst-case variance `B²/4`.
    pub theorem1b_unrolled_worst_case: f64,
    pub theorem1c: f64,
    pub theorem2: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvaluationReport {
    pub schema_version: u32,
    pub kind: String,
    pub note: String,
    pub error_optimal: ErrorReport,
    pub error_behavior: ErrorReport,
    /// Concentrability per task; the inputs use the maximum.
    pub lambda_per_task: Vec<f64>,
    /// Per-stage irreducible error of the class.
    pub eps_irred_per_stage: Vec<f64>,
    /// Empirical variance of squared Bellman residuals, per stage.
    pub sigma_sq_per_stage: Vec<f64>,
    pub sigma_sq_worst_case: f64,
    pub rademacher: RademacherEstimate,
    pub inputs: BoundInputs,
    pub bounds: BoundValues,
}

impl EvaluationReport {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        json::from_versioned_str(text, "evaluation", REPORT_SCHEMA_VERSION)
    }
}

/// Options for [`evaluate`].
#[derive(Debug, Clone, PartialEq)]
pub struct EvaluateOptions {
    pub delta: f64,
    pub w_max: f64,
    pub rademacher_draws: usize,
    pub seed: u64,
}

impl Default for EvaluateOptions {
    fn default() -> Self {
        Self {
            delta: 0.05,
            w_max: 1.0,
            rademacher_draws: 200,
            seed: 0,
        }
    }
}

/// Behavior policies and occupancies for each dataset in the bundle.
pub fn behavior_occupancies(
    ensemble: &TaskEnsemble,
    bundle: &DatasetBundle,
) -> Result<(Vec<BehaviorPolicy>, Vec<OccupancyMeasure>)> {
    let mut policies = Vec::with_capacity(bundle.num_tasks());
    let mut mus = Vec::with_capacity(bundle.num_tasks());
    for d in &bundle.datasets {
        if d.task >= ensemble.num_tasks() {
            return Err(Error::IndexOutOfRange(format!("dataset task {} not in the ensemble", d.task)));
        }
        let mdp = ensemble.task(d.task);
        let pi = BehaviorPolicy::for_task(d.behavior, mdp)?;
        mus.push(occupancy(mdp, pi.table())?);
        policies.push(pi);
    }
    Ok((policies, mus))
}

/// Per-stage variance of squared Bellman residuals of `model` on the bundle,
/// against the model's own clamped bootstrap targets.
pub fn residual_sq_variance(model: &LearnedModel, bundle: &DatasetBundle) -> Result<Vec<f64>> {
    if model.num_tasks() != bundle.num_tasks() || model.horizon() != bundle.horizon {
        return Err(Error::DimensionMismatch("model and bundle disagree on T or H".into()));
    }
    let nh = model.horizon();
    let mut out = Vec::with_capacity(nh);
    for h in 0..nh {
        let mut sq = Vec::new();
        for (t, d) in bundle.datasets.iter().enumerate() {
            for tr in d.stage(h) {
                let boot = if h + 1 < nh {
                    (0..model.encoder(h + 1).num_actions())
                        .map(|a| model.q_value(t, h + 1, tr.s_next, a))
                        .fold(f64::NEG_INFINITY, f64::max)
                } else {
                    0.0
                };
                let res = dot(model.encoder(h).row(tr.s, tr.a), model.decoder(t, h)) - tr.r - model.gamma * boot;
                sq.push(res * res);
            }
        }
        let mean = sq.iter().sum::<f64>() / sq.len().max(1) as f64;
        let var = if sq.len() > 1 {
            sq.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (sq.len() - 1) as f64
        } else {
            0.0
        };
        out.push(var);
    }
    Ok(out)
}

/// Errors against both comparators, concentrability, irreducible error and
/// every bound for a trained model.
pub fn evaluate(
    model: &LearnedModel,
    ensemble: &TaskEnsemble,
    bundle: &DatasetBundle,
    class: &EncoderClass,
    opts: &EvaluateOptions,
) -> Result<EvaluationReport> {
    if model.num_tasks() != bundle.num_tasks() {
        return Err(Error::DimensionMismatch(format!(
            "model has {} tasks, bundle has {}",
            model.num_tasks(),
            bundle.num_tasks()
        )));
    }
    let (policies, mus) = behavior_occupancies(ensemble, bundle)?;
    let mdps: Vec<TabularMDP> = bundle
        .datasets
        .iter()
        .map(|d| ensemble.task(d.task).with_gamma(model.gamma))
        .collect::<Result<_>>()?;
    let q_hats: Vec<QTable> = (0..model.num_tasks()).map(|t| model.q_table(t)).collect();
    let q_opt: Vec<QTable> = mdps.iter().map(optimal_q).collect();
    let q_beh: Vec<QTable> = mdps
        .iter()
        .zip(&policies)
        .map(|(m, p)| stochastic_policy_q(m, p.table()))
        .collect::<Result<_>>()?;
    let error_optimal = ErrorReport::new(Comparator::Optimal, &q_hats, &q_opt, &mus)?;
    let error_behavior = ErrorReport::new(Comparator::Behavior, &q_hats, &q_beh, &mus)?;
    let lambda_per_task = mdps
        .iter()
        .zip(&mus)
        .map(|(m, mu)| lambda_max(m, mu))
        .collect::<Result<Vec<_>>>()?;
    let lam = lambda_per_task.iter().cloned().fold(0.0, f64::max);

    let sub = ensemble.select_tasks(&bundle.datasets.iter().map(|d| d.task).collect::<Vec<_>>())?;
    let exact_cfg = SolverConfig {
        ridge: 0.0,
        gamma: model.gamma,
        mode: model.mode,
        ..SolverConfig::default()
    };
    let eps = run_exact_mtfqi(&sub, class, &mus, &exact_cfg)?.irreducible_error;
    let sigma = residual_sq_variance(model, bundle)?;

    let d = model.encoder(0).dim();
    let z: Vec<Vec<f64>> = bundle
        .datasets
        .iter()
        .flat_map(|ds| ds.stage(0).iter().map(|tr| model.encoder(0).row(tr.s, tr.a).to_vec()))
        .collect();
    let rademacher = if z.is_empty() {
        RademacherEstimate {
            estimate: 0.0,
            std_error: 0.0,
            analytic_bound: 0.0,
        }
    } else {
        rademacher_estimate(&z, opts.w_max, opts.rademacher_draws, opts.seed)?
    };

    let b = model.q_max * model.q_max;
    let inputs = BoundInputs {
        b,
        num_encoders: class.len(),
        log_psi_eff: log_psi_eff(d, opts.w_max, bundle.n),
        num_tasks: bundle.num_tasks(),
        n: bundle.n,
        horizon: model.horizon(),
        delta: opts.delta,
        lambda_max: lam,
        sigma_sq: sigma.iter().cloned().fold(0.0, f64::max),
        eps_irred: eps.iter().cloned().fold(0.0, f64::max),
        rademacher: rademacher.estimate,
    };
    let worst = BoundInputs {
        sigma_sq: b * b / 4.0,
        ..inputs.clone()
    };
    let bounds = BoundValues {
        theorem1a: theorem1a_bound(&inputs)?,
        theorem1b_unrolled: theorem1b_unrolled(&inputs)?,
        theorem1b_unrolled_worst_case: theorem1b_unrolled(&worst)?,
        theorem1c: theorem1c_bound(&inputs)?,
        theorem2: theorem2_bound(&inputs)?,
    };
    Ok(EvaluationReport {
        schema_version: REPORT_SCHEMA_VERSION,
        kind: "evaluation".into(),
        note: "bounds use unit constants except theorem1a; values hold up to constants".into(),
        error_optimal,
        error_behavior,
        lambda_per_task,
        eps_irred_per_stage: eps,
        sigma_sq_per_stage: sigma,
        sigma_sq_worst_case: b * b / 4.0,
        rademacher,
        inputs,
        bounds,
    })
}
