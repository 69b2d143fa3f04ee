//! Oracles and checks shared by the integration tests and the acceptance
//! report. Each check returns the measured quantity so callers can assert
//! on it or print it.
#![allow(dead_code)]

use affectagent::agents::{Mode, PolicyBundle};
use affectagent::cli::RunConfig;
use affectagent::envsynth::{generate_dataset, Dataset, EvidenceItem, Modality};
use affectagent::fusion::{mbmoe_fuse, raaf_fuse, FusionConfig, FusionModel};
use affectagent::marl::AblationFlags;
use affectagent::marl::{
    batch_loss_and_grad, batch_targets, clipped_surrogate, clipped_surrogate_of_ratio, collect_batch,
    compute_rewards, gae, surrogate_value, terminal_reward_with_kl, Pipeline, Targets, TrainConfig,
    Trajectory,
};
use affectagent::numerics::{
    finite_diff_check, finite_diff_check_at, mlp_forward, tape_attention, Activation, ParamBuilder, ParamRef,
    Tape,
};
use affectagent::retrieval::EvidenceIndex;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

pub const FD_STEP: f64 = 1e-5;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn randn(rng: &mut ChaCha8Rng, n: usize, std: f64) -> Vec<f64> {
    (0..n)
        .map(|_| std * rng.sample::<f64, _>(StandardNormal))
        .collect()
}

/// Small environment for tests that need a whole pipeline.
pub fn tiny_config(seed: u64) -> RunConfig {
    let mut c = RunConfig::default().with_seed(seed);
    c.synth.dim = 4;
    c.synth.num_labels = 4;
    c.synth.confusion_pairs = vec![(0, 1), (2, 3)];
    c.synth.train_per_label = 12;
    c.synth.test_per_label = 6;
    c.synth.corpus_size = 96;
    c.synth.scenes_per_label = 3;
    c.pipeline.k_cog = 3;
    c.pipeline.k_perc = 2;
    c.policy.trunk_hidden = 8;
    c.policy.critic_hidden = 8;
    c.policy.fusion = FusionConfig {
        expert_hidden: vec![4],
        ..FusionConfig::default()
    };
    c.sft.epochs = 2;
    c.train.batch_size = 4;
    c.train.ppo_epochs = 1;
    c.train.iterations = 2;
    c
}

pub struct Tiny {
    pub cfg: RunConfig,
    pub ds: Dataset,
    pub index: EvidenceIndex,
}

pub fn tiny(seed: u64) -> Tiny {
    let cfg = tiny_config(seed);
    let ds = generate_dataset(&cfg.synth).unwrap();
    let index = EvidenceIndex::build(ds.corpus.clone()).unwrap();
    Tiny { cfg, ds, index }
}

impl Tiny {
    pub fn bundle(&self, seed: u64) -> PolicyBundle {
        PolicyBundle::new(self.cfg.layout(), &self.cfg.policy, seed).unwrap()
    }
}

// ---------------------------------------------------------------- gradients

/// Worst relative error over `points` random MLPs and inputs.
pub fn grad_mlp(points: usize) -> f64 {
    let mut r = rng(11);
    (0..points).fold(0.0, |worst, _| {
        let mut b = ParamBuilder::new(&mut r);
        let mlp = b.mlp(&[3, 5, 4, 2], Activation::Tanh, false);
        let n = b.finish().0.len();
        let params = randn(&mut r, n, 0.8);
        let x = randn(&mut r, 3, 1.0);
        let w = randn(&mut r, 2, 1.0);
        let f = |p: &[f64]| {
            let mut t = Tape::new(p);
            let xv = t.constant(x.clone());
            let y = mlp_forward(&mlp, xv, &mut t).unwrap();
            let wv = t.constant(w.clone());
            let l = t.dot(y, wv);
            (t.scalar(l), t.backward(l).params)
        };
        worst.max(finite_diff_check(f, &params, FD_STEP).unwrap())
    })
}

/// Cross-entropy of a linear classifier, `-log softmax(Wx + b)[y]`.
pub fn grad_softmax_ce(points: usize) -> f64 {
    let mut r = rng(12);
    (0..points).fold(0.0, |worst, _| {
        let n_in = r.random_range(2..6);
        let n_out = r.random_range(2..7);
        let mut b = ParamBuilder::new(&mut r);
        let lin = b.linear(n_in, n_out, 1.0);
        let (params, _) = b.finish();
        let params: Vec<f64> = params.iter().map(|p| p * 2.0).collect();
        let x = randn(&mut r, n_in, 1.0);
        let y = r.random_range(0..n_out);
        let f = |p: &[f64]| {
            let mut t = Tape::new(p);
            let xv = t.constant(x.clone());
            let z = lin.forward(&mut t, xv);
            let lsm = t.log_softmax(z);
            let ly = t.slice(lsm, y, 1);
            let l = t.scale(ly, -1.0);
            (t.scalar(l), t.backward(l).params)
        };
        worst.max(finite_diff_check(f, &params, FD_STEP).unwrap())
    })
}

fn param_vec(offset: &mut usize, len: usize) -> ParamRef {
    let p = ParamRef {
        offset: *offset,
        rows: 1,
        cols: len,
    };
    *offset += len;
    p
}

/// Attention with query, keys and values all treated as parameters.
pub fn grad_attention(points: usize) -> f64 {
    let mut r = rng(13);
    (0..points).fold(0.0, |worst, _| {
        let d = r.random_range(2..6);
        let dv = r.random_range(1..5);
        let n = r.random_range(1..5);
        let mut off = 0;
        let q = param_vec(&mut off, d);
        let ks: Vec<ParamRef> = (0..n).map(|_| param_vec(&mut off, d)).collect();
        let vs: Vec<ParamRef> = (0..n).map(|_| param_vec(&mut off, dv)).collect();
        let params = randn(&mut r, off, 1.0);
        let w = randn(&mut r, dv, 1.0);
        let f = |p: &[f64]| {
            let mut t = Tape::new(p);
            let qv = t.param(q);
            let kv: Vec<_> = ks.iter().map(|&k| t.param(k)).collect();
            let vv: Vec<_> = vs.iter().map(|&v| t.param(v)).collect();
            let out = tape_attention(&mut t, qv, &kv, &vv).unwrap();
            let wv = t.constant(w.clone());
            let l = t.dot(out, wv);
            (t.scalar(l), t.backward(l).params)
        };
        worst.max(finite_diff_check(f, &params, FD_STEP).unwrap())
    })
}

fn fusion_model(r: &mut ChaCha8Rng, dim: usize, cfg: &FusionConfig) -> (FusionModel, Vec<f64>) {
    let mut b = ParamBuilder::new(r);
    let m = FusionModel::build(&mut b, dim, cfg).unwrap();
    (m, b.finish().0)
}

/// Gated residual attention: gate weights, input and evidence all vary.
pub fn grad_raaf(points: usize) -> f64 {
    let mut r = rng(14);
    (0..points).fold(0.0, |worst, i| {
        let d = r.random_range(2..6);
        let cfg = FusionConfig {
            learned_projections: i % 2 == 1,
            ..FusionConfig::default()
        };
        let (model, mut params) = fusion_model(&mut r, d, &cfg);
        let n = r.random_range(1..5);
        let mut off = params.len();
        let x = param_vec(&mut off, d);
        let ev: Vec<ParamRef> = (0..n).map(|_| param_vec(&mut off, d)).collect();
        params.extend(randn(&mut r, off - params.len(), 1.0));
        let w = randn(&mut r, d, 1.0);
        let slot = i % 2;
        let f = |p: &[f64]| {
            let mut t = Tape::new(p);
            let xv = t.param(x);
            let e: Vec<_> = ev.iter().map(|&e| t.param(e)).collect();
            let (out, _) = raaf_fuse(&mut t, &model.raaf[slot], xv, &e).unwrap();
            let wv = t.constant(w.clone());
            let l = t.dot(out, wv);
            (t.scalar(l), t.backward(l).params)
        };
        worst.max(finite_diff_check(f, &params, FD_STEP).unwrap())
    })
}

/// Gap between the K-th and (K+1)-th router score; under `FD_STEP` the
/// hard selection could flip inside a central difference.
fn selection_margin(scores: &[f64], k: usize) -> f64 {
    if k >= scores.len() {
        return f64::INFINITY;
    }
    let mut s = scores.to_vec();
    s.sort_by(|a, b| b.total_cmp(a));
    s[k - 1] - s[k]
}

/// Differentiable path of the expert mixture: router, selected experts
/// and both modality inputs (selection held fixed by the forward pass).
pub fn grad_moe(points: usize) -> f64 {
    let mut r = rng(15);
    let mut worst = 0.0f64;
    let mut done = 0;
    while done < points {
        let d = [2, 4, 6][r.random_range(0..3)];
        let e = r.random_range(1..6);
        let cfg = FusionConfig {
            num_experts: e,
            top_k: r.random_range(1..=e),
            expert_hidden: vec![r.random_range(2..6)],
            pool: Some([1, 2, d][r.random_range(0..3)]),
            learned_projections: false,
        };
        let (model, mut params) = fusion_model(&mut r, d, &cfg);
        let mut off = params.len();
        let xv = param_vec(&mut off, d);
        let xa = param_vec(&mut off, d);
        params.extend(randn(&mut r, 2 * d, 1.0));
        let wv = randn(&mut r, d, 1.0);
        let wa = randn(&mut r, d, 1.0);
        let f = |p: &[f64]| {
            let mut t = Tape::new(p);
            let a = t.param(xv);
            let b = t.param(xa);
            let fv = mbmoe_fuse(&mut t, &model.moe, a, b).unwrap();
            let c1 = t.constant(wv.clone());
            let c2 = t.constant(wa.clone());
            let l1 = t.dot(fv.x_v, c1);
            let l2 = t.dot(fv.x_a, c2);
            let l = t.add(l1, l2);
            let margin = selection_margin(t.value(fv.router_logits), cfg.top_k);
            ((t.scalar(l), margin), t.backward(l).params)
        };
        let ((_, margin), _) = f(&params);
        if margin < 1e-4 {
            continue;
        }
        let err = finite_diff_check(
            |p| {
                let ((v, _), g) = f(p);
                (v, g)
            },
            &params,
            FD_STEP,
        )
        .unwrap();
        worst = worst.max(err);
        done += 1;
    }
    worst
}

fn perturbed_bundle(t: &Tiny, point: usize, std: f64) -> PolicyBundle {
    let mut b = t.bundle(point as u64);
    let mut r = rng(1000 + point as u64);
    b.params
        .iter_mut()
        .for_each(|p| *p += std * r.sample::<f64, _>(StandardNormal));
    b
}

fn sample_coords(r: &mut ChaCha8Rng, range: std::ops::Range<usize>, n: usize) -> Vec<usize> {
    let mut all: Vec<usize> = range.collect();
    all.shuffle(r);
    all.truncate(n);
    all
}

/// Episode under a perturbed policy, with counterfactuals.
fn episode(t: &Tiny, bundle: &PolicyBundle, point: usize) -> Trajectory {
    let pipe = Pipeline::new(&t.index, &t.cfg.pipeline, bundle);
    let sample = &t.ds.train[point % t.ds.train.len()];
    let mut r = rng(2000 + point as u64);
    pipe.rollout_episode(sample, &AblationFlags::default(), Mode::Sample, &mut r)
        .unwrap()
}

/// Log-probability of each role's sampled action, checked over the trunk
/// and heads and (for the generator, whose observation passes through the
/// fusion modules) a sample of fusion coordinates.
pub fn grad_head_logprobs(points: usize) -> [f64; 3] {
    let t = tiny(3);
    let mut worst = [0.0f64; 3];
    for point in 0..points {
        let bundle = perturbed_bundle(&t, point, 0.3);
        let tr = episode(&t, &bundle, point);
        let actor = bundle.actor_range();
        let fusion = bundle.section("raaf").unwrap().start..bundle.section("moe").unwrap().end;
        let mut r = rng(3000 + point as u64);
        for (i, rec) in tr.agents.iter().enumerate() {
            let mut coords: Vec<usize> = actor.clone().collect();
            if i == 2 {
                coords.extend(sample_coords(&mut r, fusion.clone(), 96));
            }
            let f = |p: &[f64]| {
                let mut tape = Tape::new(p);
                let lp = bundle
                    .net
                    .logprob_on_tape(&mut tape, &rec.obs, &rec.action)
                    .unwrap();
                (tape.scalar(lp), tape.backward(lp).params)
            };
            let err = finite_diff_check_at(f, &bundle.params, FD_STEP, &coords).unwrap();
            worst[i] = worst[i].max(err);
        }
    }
    worst
}

/// A small batch collected under `bundle`, then evaluated at parameters a
/// little away from it so ratios and value clipping are exercised.
pub fn loss_fixture(t: &Tiny, point: usize) -> (PolicyBundle, Vec<Trajectory>, Targets, TrainConfig) {
    let mut cfg = t.cfg.train.clone();
    cfg.batch_size = 2;
    let bundle = perturbed_bundle(t, point, 0.2);
    let mut batch = collect_batch(
        &bundle,
        &t.index,
        &t.cfg.pipeline,
        &t.ds.train,
        &cfg,
        point as u64,
        0,
    )
    .unwrap();
    let targets = batch_targets(&mut batch, &cfg).unwrap();
    let mut moved = bundle.clone();
    let mut r = rng(4000 + point as u64);
    let std = if point.is_multiple_of(2) { 0.02 } else { 0.3 };
    moved
        .params
        .iter_mut()
        .for_each(|p| *p += std * r.sample::<f64, _>(StandardNormal));
    (moved, batch, targets, cfg)
}

/// Clipped surrogate actor loss, critic weight zero.
pub fn grad_actor_loss(points: usize) -> f64 {
    let t = tiny(4);
    (0..points).fold(0.0, |worst, point| {
        let (bundle, batch, targets, mut cfg) = loss_fixture(&t, point);
        cfg.alpha_critic = 0.0;
        let fusion = bundle.section("raaf").unwrap().start..bundle.section("moe").unwrap().end;
        let mut coords: Vec<usize> = bundle.actor_range().collect();
        coords.extend(sample_coords(&mut rng(point as u64), fusion, 64));
        let f = |p: &[f64]| {
            let mut b = bundle.clone();
            b.params.copy_from_slice(p);
            let (a, _, g) = batch_loss_and_grad(&b, &batch, &targets, &cfg).unwrap();
            (a, g)
        };
        worst.max(finite_diff_check_at(f, &bundle.params, FD_STEP, &coords).unwrap())
    })
}

/// Clipped value loss alone: advantages zeroed, critic weight one.
pub fn grad_critic_loss(points: usize) -> f64 {
    let t = tiny(5);
    (0..points).fold(0.0, |worst, point| {
        let (bundle, batch, targets, mut cfg) = loss_fixture(&t, point);
        cfg.alpha_critic = 1.0;
        let targets = Targets {
            adv: vec![[0.0; 3]; targets.adv.len()],
            ..targets
        };
        let coords: Vec<usize> = bundle.section("critic").unwrap().range().collect();
        let f = |p: &[f64]| {
            let mut b = bundle.clone();
            b.params.copy_from_slice(p);
            let (a, c, g) = batch_loss_and_grad(&b, &batch, &targets, &cfg).unwrap();
            assert_eq!(a, 0.0);
            (c, g)
        };
        worst.max(finite_diff_check_at(f, &bundle.params, FD_STEP, &coords).unwrap())
    })
}

// ---------------------------------------------------------------- GAE

/// `A_t = Σ_l (γλ)^l δ_{t+l}` written out directly.
pub fn gae_direct(rewards: &[f64], values: &[f64], bootstrap: f64, gamma: f64, lambda: f64) -> Vec<f64> {
    let n = rewards.len();
    let v = |t: usize| if t < n { values[t] } else { bootstrap };
    let delta: Vec<f64> = (0..n).map(|t| rewards[t] + gamma * v(t + 1) - v(t)).collect();
    (0..n)
        .map(|t| {
            (t..n)
                .map(|s| (gamma * lambda).powi((s - t) as i32) * delta[s])
                .sum()
        })
        .collect()
}

/// Worst absolute deviation of `gae` from the direct sum, advantages and
/// value targets both.
pub fn gae_oracle(trajectories: usize) -> f64 {
    let mut r = rng(21);
    let mut worst = 0.0f64;
    for _ in 0..trajectories {
        let n = r.random_range(1..=50);
        let rewards = randn(&mut r, n, 1.0);
        let values = randn(&mut r, n, 1.0);
        let boot = r.sample::<f64, _>(StandardNormal);
        let gamma = r.random_range(0.5..=1.0);
        let lambda = r.random_range(0.0..=1.0);
        let (adv, tgt) = gae(&rewards, &values, boot, gamma, lambda).unwrap();
        let want = gae_direct(&rewards, &values, boot, gamma, lambda);
        for t in 0..n {
            worst = worst.max((adv[t] - want[t]).abs());
            worst = worst.max((tgt[t] - (want[t] + values[t])).abs());
        }
    }
    worst
}

// ---------------------------------------------------------------- rewards

/// Number of score triples where a reward differs in any bit from the
/// written-out identities, plus the λ = 0 collapse.
pub fn reward_identity_failures(triples: usize) -> usize {
    let mut r = rng(31);
    let mut bad = 0;
    for i in 0..triples {
        let s: [f64; 3] = if i % 2 == 0 {
            std::array::from_fn(|_| f64::from(r.random_range(0..2u8)))
        } else {
            std::array::from_fn(|_| r.random::<f64>())
        };
        let lp = r.random_range(0.0..3.0);
        let lf = r.random_range(0.0..3.0);
        let got = compute_rewards(s[0], s[1], s[2], lp, lf);
        let shared = s[0];
        let want = [shared + lp * (s[0] - s[1]), shared + lf * (s[0] - s[2]), shared];
        if got.iter().zip(&want).any(|(a, b)| a.to_bits() != b.to_bits()) {
            bad += 1;
        }
        let zero = compute_rewards(s[0], s[1], s[2], 0.0, 0.0);
        if zero.iter().any(|x| x.to_bits() != shared.to_bits()) {
            bad += 1;
        }
    }
    bad
}

// ---------------------------------------------------------------- PPO clip

/// Violations of the clip contract on a constructed batch of ratios,
/// evaluated on one tape with every ratio its own parameter. Also checks
/// the log-ratio form, whose gradient wrt `lp_new` must vanish in the same
/// saturated region.
pub fn ppo_clip_violations(terms: usize) -> usize {
    let mut r = rng(41);
    let eps = 0.2;
    let ratios: Vec<f64> = (0..terms).map(|_| r.random_range(0.3..1.7)).collect();
    let advs: Vec<f64> = (0..terms)
        .map(|_| {
            let a: f64 = r.random_range(0.05..3.0);
            if r.random::<bool>() {
                a
            } else {
                -a
            }
        })
        .collect();
    let lp_old: Vec<f64> = (0..terms).map(|_| r.random_range(-4.0..0.0)).collect();
    let lp_new: Vec<f64> = ratios.iter().zip(&lp_old).map(|(q, o)| o + q.ln()).collect();

    let run = |params: &[f64], log_form: bool| {
        let mut t = Tape::new(params);
        let terms_v: Vec<_> = (0..terms)
            .map(|i| {
                let p = t.param(ParamRef {
                    offset: i,
                    rows: 1,
                    cols: 1,
                });
                if log_form {
                    clipped_surrogate(&mut t, p, lp_old[i], advs[i], eps)
                } else {
                    clipped_surrogate_of_ratio(&mut t, p, advs[i], eps)
                }
            })
            .collect();
        let values: Vec<f64> = terms_v.iter().map(|&v| t.scalar(v)).collect();
        let all = t.concat(&terms_v);
        let s = t.sum(all);
        (values, t.backward(s).params)
    };
    let (vals, grad) = run(&ratios, false);
    let (_, grad_log) = run(&lp_new, true);

    let mut bad = 0;
    for i in 0..terms {
        let (q, a) = (ratios[i], advs[i]);
        let inside = (q - 1.0).abs() <= eps;
        let saturated = (q > 1.0 + eps && a > 0.0) || (q < 1.0 - eps && a < 0.0);
        if vals[i].to_bits() != surrogate_value(q, a, eps).to_bits() {
            bad += 1;
        }
        if inside && (vals[i] != q * a || grad[i] != a) {
            bad += 1;
        }
        if saturated && (grad[i] != 0.0 || grad_log[i] != 0.0 || vals[i] != q.clamp(1.0 - eps, 1.0 + eps) * a)
        {
            bad += 1;
        }
        if !inside && !saturated && grad[i] != a {
            bad += 1;
        }
    }
    bad
}

// ---------------------------------------------------------------- KL anchor

/// Episodes, out of `episodes`, where some agent's KL-shaped terminal
/// reward differs from its plain reward although actor == reference.
pub fn kl_anchor_failures(episodes: usize) -> usize {
    let t = tiny(6);
    let mut bundle = t.bundle(6);
    bundle.freeze_sft();
    let mut cfg = t.cfg.train.clone();
    cfg.batch_size = episodes;
    cfg.beta = 0.1;
    let batch = collect_batch(&bundle, &t.index, &t.cfg.pipeline, &t.ds.train, &cfg, 6, 0).unwrap();
    batch
        .iter()
        .filter(|tr| {
            let rewards = compute_rewards(
                tr.score_full,
                tr.score_label,
                tr.score_rank,
                cfg.lambda_p,
                cfg.lambda_f,
            );
            tr.agents.iter().zip(rewards).any(|(rec, reward)| {
                let shaped = terminal_reward_with_kl(reward, rec.lp_old, rec.lp_sft, cfg.beta, 1);
                rec.lp_old.to_bits() != rec.lp_sft.to_bits() || shaped != [reward]
            })
        })
        .count()
}

// ---------------------------------------------------------------- retrieval

/// Every item id ranked by plain cosine similarity, ties by ascending id.
pub fn brute_force_ranking(corpus: &[EvidenceItem], query: &[f64], m: Modality) -> Vec<(u64, f64)> {
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let qn = norm(query);
    let mut all: Vec<(u64, f64)> = corpus
        .iter()
        .map(|it| {
            let e = it.get(m);
            let d: f64 = e.iter().zip(query).map(|(a, b)| a * b).sum();
            (it.id, if qn > 0.0 { d / (norm(e) * qn) } else { 0.0 })
        })
        .collect();
    all.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    all
}

/// Random corpus with shuffled ids and exact duplicates, so ties occur and
/// id order differs from storage order.
pub fn random_corpus(r: &mut ChaCha8Rng, max_items: usize) -> Vec<EvidenceItem> {
    let n = r.random_range(1..=max_items);
    let dim = r.random_range(2..=8);
    let mut ids: Vec<u64> = (0..n as u64).map(|i| i * 3 + 7).collect();
    ids.shuffle(r);
    let mut items: Vec<EvidenceItem> = Vec::with_capacity(n);
    for id in ids {
        let e = if !items.is_empty() && r.random::<f64>() < 0.2 {
            items[r.random_range(0..items.len())].e.clone()
        } else {
            std::array::from_fn(|_| randn(r, dim, 1.0))
        };
        items.push(EvidenceItem {
            id,
            label: r.random_range(0..4),
            e,
        });
    }
    items
}

/// Queries whose top-k ids differ from the brute-force ranking, and the
/// worst similarity deviation seen.
pub fn retrieval_oracle(corpora: usize) -> (usize, f64) {
    let mut r = rng(51);
    let mut mismatches = 0;
    let mut worst = 0.0f64;
    for _ in 0..corpora {
        let corpus = random_corpus(&mut r, 500);
        let index = EvidenceIndex::build(corpus.clone()).unwrap();
        let dim = index.dim();
        for q in 0..6 {
            let m = Modality::ALL[q % 3];
            let query = if q == 5 {
                corpus[r.random_range(0..corpus.len())].get(m).to_vec()
            } else {
                randn(&mut r, dim, 1.0)
            };
            let k = r.random_range(1..=corpus.len() + 2);
            let hits = index.knn(&query, m, k).unwrap();
            let want = brute_force_ranking(&corpus, &query, m);
            let want = &want[..k.min(want.len())];
            let ids_ok = hits.len() == want.len() && hits.iter().zip(want).all(|(h, w)| h.id == w.0);
            if !ids_ok {
                mismatches += 1;
            }
            for (h, w) in hits.iter().zip(want) {
                worst = worst.max((h.sim - w.1).abs());
                if corpus[h.index].id != h.id || corpus[h.index].label != h.label {
                    mismatches += 1;
                }
            }
        }
    }
    (mismatches, worst)
}

// ---------------------------------------------------------------- fusion

#[derive(Debug, Default, Clone, Copy)]
pub struct FusionInvariants {
    /// Worst `|x̂ - x|` with gate logits driven to -40.
    pub closed_gate: f64,
    /// Calls where the empty-evidence fallback was not an exact identity.
    pub fallback_failures: usize,
    /// Calls where α was not over exactly `top_k` entries summing to one.
    pub alpha_failures: usize,
    /// Calls where the selected set was not the true top-K by a full sort.
    pub selection_failures: usize,
    /// Worst deviation of either modality from the mixture rebuilt with one
    /// shared selection and α.
    pub shared_routing: f64,
    /// Calls where repeating the forward pass changed any bit.
    pub nondeterministic: usize,
}

pub fn fusion_invariants(calls: usize) -> FusionInvariants {
    let mut r = rng(61);
    let mut out = FusionInvariants::default();
    for _ in 0..calls {
        let d = [2, 4, 8][r.random_range(0..3)];
        let e = r.random_range(1..=6);
        let cfg = FusionConfig {
            num_experts: e,
            top_k: r.random_range(1..=e),
            expert_hidden: vec![r.random_range(1..6)],
            pool: Some([1, 2, d][r.random_range(0..3)]),
            learned_projections: false,
        };
        let (model, mut params) = fusion_model(&mut r, d, &cfg);
        params.iter_mut().for_each(|p| *p *= 3.0);
        let x = randn(&mut r, d, 1.5);
        let ev: Vec<Vec<f64>> = (0..r.random_range(1..6)).map(|_| randn(&mut r, d, 1.5)).collect();

        // Close the video gate: each row of W is -40 [x, h] / |[x, h]|².
        let h = affectagent::numerics::attention(&x, &ev, &ev).unwrap();
        let u: Vec<f64> = x.iter().chain(&h).copied().collect();
        let uu: f64 = u.iter().map(|v| v * v).sum();
        let gate = model.raaf[0].gate;
        for row in 0..d {
            for (c, uc) in u.iter().enumerate() {
                params[gate.offset + row * 2 * d + c] = -40.0 * uc / uu;
            }
        }
        let mut t = Tape::new(&params);
        let xv = t.constant(x.clone());
        let evv: Vec<_> = ev.iter().map(|v| t.constant(v.clone())).collect();
        let (xh, fb) = raaf_fuse(&mut t, &model.raaf[0], xv, &evv).unwrap();
        assert!(!fb);
        for (a, b) in t.value(xh).iter().zip(&x) {
            out.closed_gate = out.closed_gate.max((a - b).abs());
        }
        let (same, fb) = raaf_fuse(&mut t, &model.raaf[1], xv, &[]).unwrap();
        if !fb || t.value(same) != &x[..] {
            out.fallback_failures += 1;
        }

        // Mixture with independent inputs per modality.
        let a_in = randn(&mut r, d, 1.5);
        let b_in = randn(&mut r, d, 1.5);
        let forward = |params: &[f64]| {
            let mut t = Tape::new(params);
            let a = t.constant(a_in.clone());
            let b = t.constant(b_in.clone());
            let fv = mbmoe_fuse(&mut t, &model.moe, a, b).unwrap();
            (
                t.value(fv.x_v).to_vec(),
                t.value(fv.x_a).to_vec(),
                t.value(fv.alpha).to_vec(),
                t.value(fv.router_logits).to_vec(),
                fv.selected,
            )
        };
        let (yv, ya, alpha, logits, selected) = forward(&params);
        if forward(&params)
            != (
                yv.clone(),
                ya.clone(),
                alpha.clone(),
                logits.clone(),
                selected.clone(),
            )
        {
            out.nondeterministic += 1;
        }
        let sum: f64 = alpha.iter().sum();
        if alpha.len() != cfg.top_k || selected.len() != cfg.top_k || (sum - 1.0).abs() > 1e-12 {
            out.alpha_failures += 1;
        }
        let mut order: Vec<usize> = (0..e).collect();
        order.sort_by(|&i, &j| logits[j].total_cmp(&logits[i]).then(i.cmp(&j)));
        if selected != order[..cfg.top_k] {
            out.selection_failures += 1;
        }
        let picked: Vec<f64> = selected.iter().map(|&j| logits[j]).collect();
        let want_alpha = affectagent::numerics::softmax(&picked).unwrap();
        if alpha.iter().zip(&want_alpha).any(|(a, b)| (a - b).abs() > 1e-12) {
            out.alpha_failures += 1;
        }
        let rebuild = |inp: &[f64]| -> Vec<f64> {
            let mut acc = vec![0.0; d];
            for (w, &j) in alpha.iter().zip(&selected) {
                let mut t = Tape::new(&params);
                let v = t.constant(inp.to_vec());
                let y = mlp_forward(&model.moe.experts[j], v, &mut t).unwrap();
                for (o, yi) in acc.iter_mut().zip(t.value(y)) {
                    *o += w * yi;
                }
            }
            acc
        };
        for (got, inp) in [(&yv, &a_in), (&ya, &b_in)] {
            for (g, w) in got.iter().zip(rebuild(inp)) {
                out.shared_routing = out.shared_routing.max((g - w).abs());
            }
        }
    }
    out
}

// ---------------------------------------------------------------- determinism

#[derive(Debug, Clone, Copy)]
pub struct Determinism {
    pub checkpoint_identical: bool,
    pub eval_checkpoint_identical: bool,
    pub eval_report_identical: bool,
}

/// Synthesises `cfg`'s data, trains twice into separate directories and
/// evaluates each run twice, comparing bytes.
pub fn determinism(cfg: &RunConfig) -> Determinism {
    use affectagent::cli::{cmd_eval, cmd_synth, cmd_train, EVAL_CKPT, FINAL_CKPT};
    let root = tempfile::tempdir().unwrap();
    let data = root.path().join("data");
    let mut c = cfg.clone();
    c.out_dir = data.clone();
    cmd_synth(&c).unwrap();
    let read = |p: std::path::PathBuf| std::fs::read(p).unwrap();
    let mut runs = Vec::new();
    for run in ["a", "b"] {
        let dir = root.path().join(run);
        c.out_dir = dir.clone();
        cmd_train(&c, &data).unwrap();
        let mut reports = Vec::new();
        for e in ["e1", "e2"] {
            c.out_dir = dir.join(e);
            cmd_eval(&c, &dir.join(FINAL_CKPT), &data).unwrap();
            reports.push(read(c.out_dir.join("eval_report.json")));
        }
        runs.push((read(dir.join(FINAL_CKPT)), read(dir.join(EVAL_CKPT)), reports));
    }
    Determinism {
        checkpoint_identical: runs[0].0 == runs[1].0,
        eval_checkpoint_identical: runs[0].1 == runs[1].1,
        eval_report_identical: runs.iter().all(|r| r.2[0] == r.2[1]) && runs[0].2[0] == runs[1].2[0],
    }
}
