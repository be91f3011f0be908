//! Helpers shared by the integration test targets. Every routine here is
//! written independently of the library so it can serve as an oracle.

#![allow(dead_code)]

use mtfqi::mdp::{Policy, TabularMDP};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn prob_row(rng: &mut ChaCha8Rng, len: usize) -> Vec<f64> {
    let raw: Vec<f64> = (0..len).map(|_| rng.random::<f64>() + 1e-3).collect();
    let sum: f64 = raw.iter().sum();
    raw.into_iter().map(|x| x / sum).collect()
}

/// Random episodic MDP with dense transitions and rewards in `[0, 1]`.
pub fn random_mdp(seed: u64, ns: usize, na: usize, nh: usize, gamma: f64) -> TabularMDP {
    let mut r = rng(seed);
    let transitions: Vec<f64> = (0..nh * ns * na).flat_map(|_| prob_row(&mut r, ns)).collect();
    let rewards: Vec<f64> = (0..nh * ns * na).map(|_| r.random::<f64>()).collect();
    TabularMDP::new(ns, na, nh, gamma, transitions, rewards).unwrap()
}

/// Like [`random_mdp`] but some transitions are sparse, so that parts of
/// the state space can be unreachable under some actions.
pub fn sparse_mdp(seed: u64, ns: usize, na: usize, nh: usize) -> TabularMDP {
    let mut r = rng(seed);
    let mut transitions = Vec::with_capacity(nh * ns * na * ns);
    for _ in 0..nh * ns * na {
        let mut row = prob_row(&mut r, ns);
        if r.random::<f64>() < 0.5 {
            let keep = r.random_range(0..ns);
            row.iter_mut().enumerate().for_each(|(i, p)| *p = if i == keep { 1.0 } else { 0.0 });
        }
        transitions.extend(row);
    }
    let rewards: Vec<f64> = (0..nh * ns * na).map(|_| r.random::<f64>()).collect();
    TabularMDP::new(ns, na, nh, 1.0, transitions, rewards).unwrap()
}

/// `Q^π` by plain backward recursion, indexed `[h][s*K + a]`.
pub fn evaluate_policy(mdp: &TabularMDP, policy: &Policy) -> Vec<Vec<f64>> {
    let (ns, na, nh) = (mdp.num_states(), mdp.num_actions(), mdp.horizon());
    let mut q = vec![vec![0.0; ns * na]; nh];
    for h in (0..nh).rev() {
        for s in 0..ns {
            for a in 0..na {
                let mut v = mdp.reward(h, s, a);
                if h + 1 < nh {
                    let p = mdp.next_state_probs(h, s, a);
                    let mut ev = 0.0;
                    for (sn, &pn) in p.iter().enumerate() {
                        ev += pn * q[h + 1][sn * na + policy.action(h + 1, sn)];
                    }
                    v += mdp.gamma() * ev;
                }
                q[h][s * na + a] = v;
            }
        }
    }
    q
}

/// State-action occupancy of a deterministic policy by forward recursion,
/// indexed `[h][s*K + a]`.
pub fn policy_occupancy(mdp: &TabularMDP, policy: &Policy) -> Vec<Vec<f64>> {
    let (ns, na, nh) = (mdp.num_states(), mdp.num_actions(), mdp.horizon());
    let mut states = vec![0.0; ns];
    states[mdp.initial_state()] = 1.0;
    let mut out = Vec::with_capacity(nh);
    for h in 0..nh {
        let mut mu = vec![0.0; ns * na];
        let mut next = vec![0.0; ns];
        for s in 0..ns {
            let a = policy.action(h, s);
            mu[s * na + a] = states[s];
            for (sn, p) in mdp.next_state_probs(h, s, a).iter().enumerate() {
                next[sn] += states[s] * p;
            }
        }
        out.push(mu);
        states = next;
    }
    out
}

pub fn mean_and_se(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1.0).max(1.0);
    (mean, (var / n).sqrt())
}
