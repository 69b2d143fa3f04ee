//! Rewards, advantage estimation and the clipped PPO objectives.

use crate::numerics::{Tape, Var};

use super::{MarlError, Result};

/// `(R_P, R_F, R_G)` from the episode scores: every agent receives the
/// shared score, planner and filter add their weighted counterfactual gap.
pub fn compute_rewards(
    score_full: f64,
    score_label: f64,
    score_rank: f64,
    lambda_p: f64,
    lambda_f: f64,
) -> [f64; 3] {
    let shared = score_full;
    [
        shared + lambda_p * (score_full - score_label),
        shared + lambda_f * (score_full - score_rank),
        shared,
    ]
}

/// Sparse per-step rewards of an agent acting `steps` times: zero until the
/// last step, which carries `R - β (log π_old - log π_sft)`.
pub fn terminal_reward_with_kl(reward: f64, lp_old: f64, lp_sft: f64, beta: f64, steps: usize) -> Vec<f64> {
    let mut r = vec![0.0; steps.max(1)];
    *r.last_mut().expect("non-empty") = reward - beta * (lp_old - lp_sft);
    r
}

/// Generalised advantage estimation. Returns advantages and value targets
/// `A_t + V_t`.
pub fn gae(
    rewards: &[f64],
    values: &[f64],
    bootstrap: f64,
    gamma: f64,
    lambda: f64,
) -> Result<(Vec<f64>, Vec<f64>)> {
    if rewards.len() != values.len() {
        return Err(MarlError::Length {
            what: "gae values",
            expected: rewards.len(),
            found: values.len(),
        });
    }
    let n = rewards.len();
    let mut adv = vec![0.0; n];
    let mut next_adv = 0.0;
    for t in (0..n).rev() {
        let next_v = if t + 1 < n { values[t + 1] } else { bootstrap };
        let delta = rewards[t] + gamma * next_v - values[t];
        next_adv = delta + gamma * lambda * next_adv;
        adv[t] = next_adv;
    }
    let targets = adv.iter().zip(values).map(|(a, v)| a + v).collect();
    Ok((adv, targets))
}

/// Zero-mean, unit-variance rescaling. Constant inputs map to zero.
pub fn normalize(values: &mut [f64]) {
    if values.is_empty() {
        return;
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    let sd = var.sqrt();
    for v in values.iter_mut() {
        *v = if sd > 1e-8 { (*v - mean) / sd } else { 0.0 };
    }
}

/// `min(r Â, clip(r, 1-ε, 1+ε) Â)` for ratio `r = exp(lp_new - lp_old)`.
pub fn clipped_surrogate(tape: &mut Tape, lp_new: Var, lp_old: f64, adv: f64, eps: f64) -> Var {
    let log_ratio = tape.offset(lp_new, -lp_old);
    let ratio = tape.exp(log_ratio);
    clipped_surrogate_of_ratio(tape, ratio, adv, eps)
}

pub fn clipped_surrogate_of_ratio(tape: &mut Tape, ratio: Var, adv: f64, eps: f64) -> Var {
    let unclipped = tape.scale(ratio, adv);
    let clipped = tape.clamp(ratio, vec![1.0 - eps], vec![1.0 + eps]);
    let clipped = tape.scale(clipped, adv);
    tape.min(unclipped, clipped)
}

/// `max((V - V_t)², (clip(V, V_old ± ε) - V_t)²)`.
pub fn clipped_value_loss(tape: &mut Tape, v: Var, v_old: f64, target: f64, eps: f64) -> Var {
    let t = tape.constant(vec![target]);
    let d1 = tape.sub(v, t);
    let l1 = tape.square(d1);
    let vc = tape.clamp(v, vec![v_old - eps], vec![v_old + eps]);
    let d2 = tape.sub(vc, t);
    let l2 = tape.square(d2);
    tape.max(l1, l2)
}

/// Scalar loss values on plain numbers, for reporting and tests.
pub fn surrogate_value(ratio: f64, adv: f64, eps: f64) -> f64 {
    (ratio * adv).min(ratio.clamp(1.0 - eps, 1.0 + eps) * adv)
}

pub fn value_loss_value(v: f64, v_old: f64, target: f64, eps: f64) -> f64 {
    let vc = v.clamp(v_old - eps, v_old + eps);
    (v - target).powi(2).max((vc - target).powi(2))
}
