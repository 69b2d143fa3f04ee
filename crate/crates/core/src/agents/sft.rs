//! Behaviour cloning toward the heuristic teachers.

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::numerics::{Momentum, OptimConfig, Tape, Var};
use crate::seeding;

use super::{AgentAction, GeneratorTeacher, Mode, Observation, PolicyBundle, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SftConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub optim: OptimConfig,
    /// Also update the fusion modules through the generator loss.
    pub train_fusion: bool,
    /// The filter teacher keeps candidates whose label is among this many
    /// top perceptual votes.
    pub filter_top_votes: usize,
    pub generator_teacher: GeneratorTeacher,
    /// Probability of dropping one random modality from an SFT example.
    pub drop_prob: f64,
    /// Probability of zeroing the raw input features in the filter and
    /// generator observations of an example, leaving only evidence-derived
    /// features.
    pub raw_dropout: f64,
    /// Weight of the per-item filter loss relative to the generator loss.
    pub filter_weight: f64,
    /// Probability that an example's generator observation is built from the
    /// filter-bypass evidence set instead of the teacher's kept set, so the
    /// generator also learns to read unfiltered evidence.
    pub bypass_mix: f64,
}

impl Default for SftConfig {
    fn default() -> Self {
        Self {
            epochs: 12,
            batch_size: 32,
            optim: OptimConfig {
                lr: 0.05,
                momentum: 0.9,
                clip_norm: Some(5.0),
                weight_decay: 1e-2,
            },
            train_fusion: true,
            filter_top_votes: 1,
            generator_teacher: GeneratorTeacher::Gold,
            drop_prob: 0.0,
            raw_dropout: 0.3,
            filter_weight: 1.0,
            bypass_mix: 0.0,
        }
    }
}

/// Teacher-forced observations and target actions for one sample.
#[derive(Debug, Clone, PartialEq)]
pub struct SftExample {
    pub planner: (Observation, AgentAction),
    pub filter: (Observation, AgentAction),
    pub generator: (Observation, AgentAction),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SftReport {
    /// Mean per-role loss of each epoch: (planner, filter, generator).
    pub epoch_losses: Vec<[f64; 3]>,
    /// Greedy generator agreement with its targets after training.
    pub generator_accuracy: f64,
    pub filter_accuracy: f64,
}

/// Per-role losses of one example on the tape. The planner term is the
/// Gaussian NLL times σ² per dimension (half the squared error), the filter
/// term the mean Bernoulli NLL per candidate and the generator term the
/// cross-entropy.
fn example_loss(
    bundle: &PolicyBundle,
    tape: &mut Tape,
    ex: &SftExample,
    filter_weight: f64,
) -> Result<[Option<Var>; 3]> {
    let net = &bundle.net;
    let sigma2 = net.planner_sigma * net.planner_sigma;
    let mut out = [None, None, None];
    let lp = net.logprob_on_tape(tape, &ex.planner.0, &ex.planner.1)?;
    let d3 = 3.0 * net.layout.dim as f64;
    out[0] = Some(tape.scale(lp, -sigma2 / d3));
    if let Observation::Filter { items } = &ex.filter.0 {
        if !items.is_empty() {
            let lp = net.logprob_on_tape(tape, &ex.filter.0, &ex.filter.1)?;
            out[1] = Some(tape.scale(lp, -filter_weight / items.len() as f64));
        }
    }
    let lp = net.logprob_on_tape(tape, &ex.generator.0, &ex.generator.1)?;
    out[2] = Some(tape.scale(lp, -1.0));
    Ok(out)
}

/// Trains trunk and heads (and optionally fusion) toward the teacher
/// actions, then freezes the result as the reference policy. The critic is
/// untouched.
pub fn sft_warm_start(
    bundle: &mut PolicyBundle,
    examples: &[SftExample],
    cfg: &SftConfig,
    seed: u64,
) -> Result<SftReport> {
    let mut opt = Momentum::new(cfg.optim, bundle.params.len());
    let mut order: Vec<usize> = (0..examples.len()).collect();
    let mut rng = seeding::stream(seed, &[0x5f7]);
    let frozen: Vec<std::ops::Range<usize>> = bundle
        .sections
        .iter()
        .filter(|s| s.name == "critic" || (!cfg.train_fusion && (s.name == "raaf" || s.name == "moe")))
        .map(|s| s.range())
        .collect();
    let mut epoch_losses = Vec::with_capacity(cfg.epochs);
    for _ in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut totals = [0.0; 3];
        for batch in order.chunks(cfg.batch_size.max(1)) {
            let mut grad = vec![0.0; bundle.params.len()];
            for &i in batch {
                let mut tape = Tape::new(&bundle.params);
                let parts = example_loss(bundle, &mut tape, &examples[i], cfg.filter_weight)?;
                let mut terms = Vec::new();
                for (t, p) in totals.iter_mut().zip(&parts) {
                    if let Some(v) = p {
                        *t += tape.scalar(*v);
                        terms.push(*v);
                    }
                }
                let all = tape.concat(&terms);
                let loss = tape.sum(all);
                let loss = tape.scale(loss, 1.0 / batch.len() as f64);
                let g = tape.backward(loss).params;
                for (a, b) in grad.iter_mut().zip(&g) {
                    *a += b;
                }
            }
            opt.step_except(&mut bundle.params, &grad, &frozen);
        }
        let n = examples.len().max(1) as f64;
        epoch_losses.push(totals.map(|t| t / n));
    }
    bundle.freeze_sft();
    let mut rng = seeding::stream(seed, &[0x5f8]);
    let mut gen_ok = 0usize;
    let mut filt_ok = 0usize;
    let mut filt_n = 0usize;
    for ex in examples {
        let (a, _) = bundle
            .net
            .act(&bundle.params, &ex.generator.0, Mode::Greedy, &mut rng)?;
        gen_ok += usize::from(a == ex.generator.1);
        let (a, _) = bundle
            .net
            .act(&bundle.params, &ex.filter.0, Mode::Greedy, &mut rng)?;
        if let (AgentAction::Filter(p), AgentAction::Filter(t)) = (&a, &ex.filter.1) {
            filt_ok += p.iter().zip(t).filter(|(x, y)| x == y).count();
            filt_n += t.len();
        }
    }
    Ok(SftReport {
        epoch_losses,
        generator_accuracy: gen_ok as f64 / examples.len().max(1) as f64,
        filter_accuracy: filt_ok as f64 / filt_n.max(1) as f64,
    })
}
