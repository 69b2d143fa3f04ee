use std::time::Instant;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::agents::{Mode, PolicyBundle};
use crate::envsynth::{apply_missing, score_f1, F1Mode, ModalSample, Modality};
use crate::numerics::{all_finite, Momentum, OptimConfig, Tape};
use crate::retrieval::EvidenceIndex;
use crate::seeding;

use super::pipeline::{AblationFlags, Pipeline, PipelineConfig, Trajectory};
use super::ppo::{
    clipped_surrogate, clipped_value_loss, compute_rewards, gae, normalize, terminal_reward_with_kl,
};
use super::{MarlError, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub gamma: f64,
    pub lambda_gae: f64,
    pub clip_eps: f64,
    /// Value clip range; `None` reuses `clip_eps`.
    pub value_clip_eps: Option<f64>,
    pub beta: f64,
    pub alpha_critic: f64,
    pub lambda_p: f64,
    pub lambda_f: f64,
    pub ppo_epochs: usize,
    pub batch_size: usize,
    pub iterations: usize,
    pub normalize_advantages: bool,
    pub optim: OptimConfig,
    /// Probability of dropping one random modality from a training episode.
    pub drop_prob: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            gamma: 0.99,
            lambda_gae: 0.95,
            clip_eps: 0.2,
            value_clip_eps: None,
            beta: 0.05,
            alpha_critic: 0.5,
            lambda_p: 1.0,
            lambda_f: 1.0,
            ppo_epochs: 4,
            batch_size: 64,
            iterations: 20,
            normalize_advantages: true,
            optim: OptimConfig {
                lr: 1e-3,
                momentum: 0.9,
                clip_norm: Some(1.0),
                weight_decay: 0.0,
            },
            drop_prob: 0.0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let unit = |x: f64| x > 0.0 && x <= 1.0;
        let ok = unit(self.gamma)
            && unit(self.lambda_gae)
            && self.clip_eps > 0.0
            && self.value_clip_eps.is_none_or(|e| e > 0.0)
            && [self.beta, self.alpha_critic, self.lambda_p, self.lambda_f]
                .iter()
                .all(|&x| x >= 0.0)
            && (0.0..=1.0).contains(&self.drop_prob)
            && self.batch_size > 0;
        if ok {
            Ok(())
        } else {
            Err(MarlError::Config(format!("{self:?}")))
        }
    }
}

/// Per-iteration training log entry.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationMetrics {
    pub iter: usize,
    pub mean_score_full: f64,
    pub mean_score_label: f64,
    pub mean_score_rank: f64,
    #[serde(rename = "R_P_mean")]
    pub r_p_mean: f64,
    #[serde(rename = "R_F_mean")]
    pub r_f_mean: f64,
    pub actor_loss: f64,
    pub critic_loss: f64,
    pub kl_mean: f64,
    pub routing_entropy: f64,
    pub wall_ms: u64,
}

pub struct TrainState {
    pub bundle: PolicyBundle,
    pub optimizer: Momentum,
    pub iter: usize,
}

impl TrainState {
    pub fn new(bundle: PolicyBundle, optim: OptimConfig) -> Self {
        let n = bundle.params.len();
        Self {
            bundle,
            optimizer: Momentum::new(optim, n),
            iter: 0,
        }
    }
}

/// Advantage and value target of every agent record, indexed
/// `[episode][agent]`.
pub struct Targets {
    pub adv: Vec<[f64; 3]>,
    pub target: Vec<[f64; 3]>,
    pub kl: Vec<[f64; 3]>,
}

/// Rewards, KL-shaped terminal rewards and single-step GAE for a batch.
pub fn batch_targets(batch: &mut [Trajectory], cfg: &TrainConfig) -> Result<Targets> {
    let mut adv = Vec::with_capacity(batch.len());
    let mut target = Vec::with_capacity(batch.len());
    let mut kl = Vec::with_capacity(batch.len());
    for tr in batch.iter_mut() {
        tr.rewards = compute_rewards(
            tr.score_full,
            tr.score_label,
            tr.score_rank,
            cfg.lambda_p,
            cfg.lambda_f,
        );
        let mut a = [0.0; 3];
        let mut t = [0.0; 3];
        let mut k = [0.0; 3];
        for (i, rec) in tr.agents.iter().enumerate() {
            let r = terminal_reward_with_kl(tr.rewards[i], rec.lp_old, rec.lp_sft, cfg.beta, 1);
            let (av, tv) = gae(&r, &[rec.value], 0.0, cfg.gamma, cfg.lambda_gae)?;
            a[i] = av[0];
            t[i] = tv[0];
            k[i] = rec.lp_old - rec.lp_sft;
        }
        adv.push(a);
        target.push(t);
        kl.push(k);
    }
    if cfg.normalize_advantages {
        for i in 0..3 {
            let mut col: Vec<f64> = adv.iter().map(|a| a[i]).collect();
            normalize(&mut col);
            for (a, v) in adv.iter_mut().zip(col) {
                a[i] = v;
            }
        }
    }
    Ok(Targets { adv, target, kl })
}

/// Joint loss `L_actor + α L_critic` on one batch and its gradient. Both
/// terms are summed over agents and averaged over episodes.
pub fn batch_loss_and_grad(
    bundle: &PolicyBundle,
    batch: &[Trajectory],
    targets: &Targets,
    cfg: &TrainConfig,
) -> Result<(f64, f64, Vec<f64>)> {
    let net = &bundle.net;
    let eps_v = cfg.value_clip_eps.unwrap_or(cfg.clip_eps);
    let b = batch.len() as f64;
    let mut grad = vec![0.0; bundle.params.len()];
    let mut actor = 0.0;
    let mut critic = 0.0;
    for (e, tr) in batch.iter().enumerate() {
        let mut tape = Tape::new(&bundle.params);
        let mut a_terms = Vec::with_capacity(3);
        let mut c_terms = Vec::with_capacity(3);
        for (i, rec) in tr.agents.iter().enumerate() {
            let lp = net.logprob_on_tape(&mut tape, &rec.obs, &rec.action)?;
            a_terms.push(clipped_surrogate(
                &mut tape,
                lp,
                rec.lp_old,
                targets.adv[e][i],
                cfg.clip_eps,
            ));
            let v = net.value_on_tape(&mut tape, rec.role, &rec.critic_features)?;
            c_terms.push(clipped_value_loss(
                &mut tape,
                v,
                rec.value,
                targets.target[e][i],
                eps_v,
            ));
        }
        let a = tape.concat(&a_terms);
        let a = tape.sum(a);
        let a = tape.scale(a, -1.0 / b);
        let c = tape.concat(&c_terms);
        let c = tape.sum(c);
        let c = tape.scale(c, 1.0 / b);
        actor += tape.scalar(a);
        critic += tape.scalar(c);
        let cw = tape.scale(c, cfg.alpha_critic);
        let loss = tape.add(a, cw);
        let g = tape.backward(loss).params;
        for (x, y) in grad.iter_mut().zip(&g) {
            *x += y;
        }
    }
    Ok((actor, critic, grad))
}

fn entropy(p: &[f64]) -> f64 {
    p.iter().filter(|&&x| x > 0.0).map(|&x| -x * x.ln()).sum()
}

fn maybe_drop<R: Rng>(sample: &ModalSample, p: f64, rng: &mut R) -> Result<ModalSample> {
    if p > 0.0 && rng.random::<f64>() < p {
        let m = Modality::ALL[rng.random_range(0..3)];
        Ok(apply_missing(sample, m)?)
    } else {
        Ok(sample.clone())
    }
}

/// Episode batch under the current (frozen) policy.
pub fn collect_batch(
    bundle: &PolicyBundle,
    index: &EvidenceIndex,
    pipe: &PipelineConfig,
    train: &[ModalSample],
    cfg: &TrainConfig,
    seed: u64,
    iter: usize,
) -> Result<Vec<Trajectory>> {
    let pipeline = Pipeline::new(index, pipe, bundle);
    let mut pick = seeding::stream(seed, &[0xba7c, iter as u64]);
    let flags = AblationFlags::default();
    (0..cfg.batch_size)
        .map(|ep| {
            let sample = &train[pick.random_range(0..train.len())];
            let mut rng = seeding::stream(seed, &[iter as u64, ep as u64]);
            let sample = maybe_drop(sample, cfg.drop_prob, &mut rng)?;
            pipeline.rollout_episode(&sample, &flags, Mode::Sample, &mut rng)
        })
        .collect()
}

/// Collect a batch, shape rewards, run the PPO epochs on the joint loss
/// and advance `θ_old`.
pub fn mappo_iteration(
    state: &mut TrainState,
    index: &EvidenceIndex,
    pipe: &PipelineConfig,
    train: &[ModalSample],
    cfg: &TrainConfig,
    seed: u64,
) -> Result<IterationMetrics> {
    let t0 = Instant::now();
    let iter = state.iter;
    let mut batch = collect_batch(&state.bundle, index, pipe, train, cfg, seed, iter)?;
    let targets = batch_targets(&mut batch, cfg)?;
    let mut actor_sum = 0.0;
    let mut critic_sum = 0.0;
    for epoch in 0..cfg.ppo_epochs {
        let (a, c, grad) = batch_loss_and_grad(&state.bundle, &batch, &targets, cfg)?;
        if !(a.is_finite() && c.is_finite() && all_finite(&grad)) {
            return Err(MarlError::NonFinite {
                iter,
                detail: format!("epoch {epoch}: actor {a}, critic {c}"),
            });
        }
        actor_sum += a;
        critic_sum += c;
        state.optimizer.step(&mut state.bundle.params, &grad);
    }
    state.iter += 1;
    let n = batch.len() as f64;
    let mean = |f: &dyn Fn(&Trajectory) -> f64| batch.iter().map(f).sum::<f64>() / n;
    let experts = batch.first().map_or(0, |t| t.routing.len());
    let mut routing = vec![0.0; experts];
    for t in &batch {
        for (r, w) in routing.iter_mut().zip(&t.routing) {
            *r += w / n;
        }
    }
    let epochs = cfg.ppo_epochs.max(1) as f64;
    Ok(IterationMetrics {
        iter,
        mean_score_full: mean(&|t| t.score_full),
        mean_score_label: mean(&|t| t.score_label),
        mean_score_rank: mean(&|t| t.score_rank),
        r_p_mean: mean(&|t| t.rewards[0]),
        r_f_mean: mean(&|t| t.rewards[1]),
        actor_loss: if cfg.ppo_epochs == 0 {
            0.0
        } else {
            actor_sum / epochs
        },
        critic_loss: if cfg.ppo_epochs == 0 {
            0.0
        } else {
            critic_sum / epochs
        },
        kl_mean: targets.kl.iter().map(|k| k.iter().sum::<f64>()).sum::<f64>() / n,
        routing_entropy: entropy(&routing),
        wall_ms: t0.elapsed().as_millis() as u64,
    })
}

/// Greedy predictions and macro/weighted F1 on `samples` under `flags`.
pub fn evaluate(
    bundle: &PolicyBundle,
    index: &EvidenceIndex,
    pipe: &PipelineConfig,
    samples: &[ModalSample],
    flags: &AblationFlags,
    seed: u64,
) -> Result<EvalScores> {
    let pipeline = Pipeline::new(index, pipe, bundle);
    let preds = samples
        .iter()
        .map(|s| pipeline.predict(s, flags, seed))
        .collect::<Result<Vec<_>>>()?;
    let gold: Vec<usize> = samples.iter().map(|s| s.label).collect();
    Ok(EvalScores {
        macro_f1: score_f1(&preds, &gold, F1Mode::Macro)?,
        weighted_f1: score_f1(&preds, &gold, F1Mode::Weighted)?,
        preds,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalScores {
    pub macro_f1: f64,
    pub weighted_f1: f64,
    pub preds: Vec<usize>,
}
