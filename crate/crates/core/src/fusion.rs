//! Retrieval-augmented gated fusion and the modality-balancing mixture of
//! experts.
//!
//! For video and audio, `x̂ = x + σ(W [x; h]) ⊙ h` with `h` the scaled
//! dot-product attention of `x` over that modality's perceptual evidence.
//! A single router reads a pooled summary of both enhanced vectors, picks
//! the top-K experts and their softmax weights, and the same experts and
//! weights transform both modalities.
//!
//! Top-K selection is straight-through: the forward pass uses the hard
//! selection, the backward pass differentiates only the softmax over the
//! selected router logits.

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::envsynth::{ModalSample, Modality};
use crate::numerics::{
    mlp_forward, tape_attention, Activation, Linear, Mlp, NumericsError, ParamBuilder, ParamRef, Tape, Var,
};
use crate::retrieval::{EvidenceIndex, RetrievalResult};

#[derive(Debug, Error, PartialEq)]
pub enum FusionError {
    #[error("invalid fusion config: {0}")]
    Config(String),
    #[error("sample {0}: video and audio both missing and no perceptual evidence to substitute")]
    NothingToFuse(u64),
    #[error(transparent)]
    Numerics(#[from] NumericsError),
}

pub type Result<T> = std::result::Result<T, FusionError>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FusionConfig {
    pub num_experts: usize,
    pub top_k: usize,
    /// Hidden widths of each expert; `[d]` gives one hidden layer of width d.
    pub expert_hidden: Vec<usize>,
    /// Number of chunks each modality is mean-pooled into for the router.
    /// Must divide the embedding dim; equal to it means no pooling.
    pub pool: Option<usize>,
    /// Learned query/key/value projections inside the gated attention.
    pub learned_projections: bool,
}

impl Default for FusionConfig {
    fn default() -> Self {
        Self {
            num_experts: 4,
            top_k: 2,
            expert_hidden: vec![16],
            pool: None,
            learned_projections: false,
        }
    }
}

impl FusionConfig {
    pub fn validate(&self, dim: usize) -> Result<()> {
        if self.num_experts == 0 || self.top_k == 0 || self.top_k > self.num_experts {
            return Err(FusionError::Config(format!(
                "need 1 <= top_k ({}) <= num_experts ({})",
                self.top_k, self.num_experts
            )));
        }
        let pool = self.pool.unwrap_or(dim);
        if pool == 0 || !dim.is_multiple_of(pool) {
            return Err(FusionError::Config(format!("pool {pool} must divide dim {dim}")));
        }
        if self.expert_hidden.contains(&0) {
            return Err(FusionError::Config("expert hidden width 0".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Projections {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
}

/// Gate matrix `W_m` (d × 2d, no bias) and optional attention projections.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RaafParams {
    pub gate: ParamRef,
    pub proj: Option<Projections>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MoeParams {
    pub router: Mlp,
    pub experts: Vec<Mlp>,
    pub top_k: usize,
    pub pool: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FusionModel {
    pub dim: usize,
    /// Video then audio.
    pub raaf: [RaafParams; 2],
    pub moe: MoeParams,
}

impl FusionModel {
    /// Allocates the `raaf` and `moe` sections.
    pub fn build<R: Rng>(b: &mut ParamBuilder<'_, R>, dim: usize, cfg: &FusionConfig) -> Result<Self> {
        cfg.validate(dim)?;
        b.section("raaf");
        let gate_std = 1.0 / (2.0 * dim as f64).sqrt();
        let raaf_one = |b: &mut ParamBuilder<'_, R>| {
            let gate = b.normal(dim, 2 * dim, gate_std);
            let proj = cfg.learned_projections.then(|| Projections {
                q: b.linear(dim, dim, 1.0),
                k: b.linear(dim, dim, 1.0),
                v: b.linear(dim, dim, 1.0),
            });
            RaafParams { gate, proj }
        };
        let raaf = [raaf_one(b), raaf_one(b)];
        b.section("moe");
        let pool = cfg.pool.unwrap_or(dim);
        let router = b.mlp(&[2 * pool, cfg.num_experts], Activation::Tanh, false);
        let mut dims = vec![dim];
        dims.extend(&cfg.expert_hidden);
        dims.push(dim);
        let experts = (0..cfg.num_experts)
            .map(|_| b.mlp(&dims, Activation::Tanh, false))
            .collect();
        Ok(Self {
            dim,
            raaf,
            moe: MoeParams {
                router,
                experts,
                top_k: cfg.top_k,
                pool,
            },
        })
    }
}

/// Gated cross-attention for one modality. Returns the enhanced vector and
/// whether the identity fallback fired because `evidence` was empty.
pub fn raaf_fuse(tape: &mut Tape, p: &RaafParams, x: Var, evidence: &[Var]) -> Result<(Var, bool)> {
    let d = tape.dim(x);
    if p.gate.rows != d || p.gate.cols != 2 * d {
        return Err(NumericsError::DimMismatch {
            op: "raaf gate",
            expected: 2 * d,
            found: p.gate.cols,
        }
        .into());
    }
    if evidence.is_empty() {
        return Ok((x, true));
    }
    let h = match &p.proj {
        None => tape_attention(tape, x, evidence, evidence)?,
        Some(pr) => {
            let q = pr.q.forward(tape, x);
            let keys: Vec<Var> = evidence.iter().map(|&e| pr.k.forward(tape, e)).collect();
            let vals: Vec<Var> = evidence.iter().map(|&e| pr.v.forward(tape, e)).collect();
            tape_attention(tape, q, &keys, &vals)?
        }
    };
    let xh = tape.concat(&[x, h]);
    let logits = tape.linear(p.gate, None, xh);
    let gate = tape.sigmoid(logits);
    let gated = tape.mul(gate, h);
    Ok((tape.add(x, gated), false))
}

/// Top-`k` indices by descending score, ties by ascending index.
pub fn top_k_indices(scores: &[f64], k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    idx.truncate(k);
    idx
}

fn pool_chunks(tape: &mut Tape, x: Var, pool: usize) -> Var {
    let d = tape.dim(x);
    if pool == d {
        return x;
    }
    let w = d / pool;
    let parts: Vec<Var> = (0..pool)
        .map(|c| {
            let s = tape.slice(x, c * w, w);
            let s = tape.sum(s);
            tape.scale(s, 1.0 / w as f64)
        })
        .collect();
    tape.concat(&parts)
}

/// Tape handles of a fused state.
#[derive(Debug, Clone, PartialEq)]
pub struct FusedVars {
    pub x_v: Var,
    pub x_a: Var,
    pub alpha: Var,
    pub router_logits: Var,
    pub selected: Vec<usize>,
}

pub fn mbmoe_fuse(tape: &mut Tape, p: &MoeParams, xh_v: Var, xh_a: Var) -> Result<FusedVars> {
    let d = tape.dim(xh_v);
    if tape.dim(xh_a) != d {
        return Err(NumericsError::DimMismatch {
            op: "mbmoe_fuse",
            expected: d,
            found: tape.dim(xh_a),
        }
        .into());
    }
    let gv = pool_chunks(tape, xh_v, p.pool);
    let ga = pool_chunks(tape, xh_a, p.pool);
    let g = tape.concat(&[gv, ga]);
    let router_logits = mlp_forward(&p.router, g, tape)?;
    let selected = top_k_indices(tape.value(router_logits), p.top_k);
    let picked: Vec<Var> = selected
        .iter()
        .map(|&j| tape.slice(router_logits, j, 1))
        .collect();
    let picked = tape.concat(&picked);
    let alpha = tape.softmax(picked);
    let mix = |tape: &mut Tape, x: Var| -> Result<Var> {
        let outs = selected
            .iter()
            .map(|&j| mlp_forward(&p.experts[j], x, tape))
            .collect::<std::result::Result<Vec<_>, _>>()?;
        Ok(tape.weighted_sum(alpha, &outs))
    };
    let x_v = mix(tape, xh_v)?;
    let x_a = mix(tape, xh_a)?;
    Ok(FusedVars {
        x_v,
        x_a,
        alpha,
        router_logits,
        selected,
    })
}

/// Output of the fusion stage in plain values.
#[derive(Debug, Clone, PartialEq)]
pub struct FusedState {
    pub x_v: Vec<f64>,
    pub x_a: Vec<f64>,
    pub alpha: Vec<f64>,
    pub selected: Vec<usize>,
    /// Identity fallback fired for (video, audio).
    pub no_evidence: [bool; 2],
}

impl FusedState {
    /// Routing weights scattered over all experts.
    pub fn expert_weights(&self, num_experts: usize) -> Vec<f64> {
        let mut w = vec![0.0; num_experts];
        for (&j, &a) in self.selected.iter().zip(&self.alpha) {
            w[j] = a;
        }
        w
    }
}

/// Fills every missing modality with the corresponding embedding of the
/// top-1 perceptual hit for that modality. Modalities without evidence stay
/// as they are (zeroed).
pub fn complete_modalities(
    sample: &ModalSample,
    perc: &RetrievalResult,
    index: &EvidenceIndex,
) -> [Vec<f64>; 3] {
    std::array::from_fn(|mi| {
        let m = Modality::ALL[mi];
        match perc.perceptual(m).first() {
            Some(hit) if !sample.is_present(m) => index.item(hit).get(m).to_vec(),
            _ => sample.get(m).to_vec(),
        }
    })
}

/// Everything the fusion stage reads for one sample, in plain values.
#[derive(Debug, Clone, PartialEq)]
pub struct FusionInput {
    /// Completed video and audio vectors.
    pub x: [Vec<f64>; 2],
    /// Raw corpus embeddings of the perceptual evidence, per modality.
    pub evidence: [Vec<Vec<f64>>; 2],
}

impl FusionInput {
    /// `completed` comes from [`complete_modalities`].
    pub fn new(
        sample: &ModalSample,
        completed: &[Vec<f64>; 3],
        perc: &RetrievalResult,
        index: &EvidenceIndex,
    ) -> Result<Self> {
        let has_sub = |m: Modality| sample.is_present(m) || !perc.perceptual(m).is_empty();
        if !has_sub(Modality::Video) && !has_sub(Modality::Audio) {
            return Err(FusionError::NothingToFuse(sample.id));
        }
        let mv = [Modality::Video, Modality::Audio];
        Ok(Self {
            x: mv.map(|m| completed[m.index()].clone()),
            evidence: mv.map(|m| {
                perc.perceptual(m)
                    .iter()
                    .map(|h| index.item(h).get(m).to_vec())
                    .collect()
            }),
        })
    }
}

/// RAAF on video and audio followed by MB-MoE, on the tape. Also returns
/// which modalities hit the empty-evidence fallback.
pub fn fuse_on_tape(
    tape: &mut Tape,
    model: &FusionModel,
    input: &FusionInput,
) -> Result<(FusedVars, [bool; 2])> {
    let mut enhanced = [None, None];
    let mut no_evidence = [false; 2];
    for slot in 0..2 {
        let x = tape.constant(input.x[slot].clone());
        let ev: Vec<Var> = input.evidence[slot]
            .iter()
            .map(|e| tape.constant(e.clone()))
            .collect();
        let (xh, fallback) = raaf_fuse(tape, &model.raaf[slot], x, &ev)?;
        enhanced[slot] = Some(xh);
        no_evidence[slot] = fallback;
    }
    let [Some(v), Some(a)] = enhanced else {
        unreachable!("both slots filled")
    };
    let fused = mbmoe_fuse(tape, &model.moe, v, a)?;
    Ok((fused, no_evidence))
}

pub fn fuse_values(params: &[f64], model: &FusionModel, input: &FusionInput) -> Result<FusedState> {
    let mut tape = Tape::new(params);
    let (v, no_evidence) = fuse_on_tape(&mut tape, model, input)?;
    Ok(FusedState {
        x_v: tape.value(v.x_v).to_vec(),
        x_a: tape.value(v.x_a).to_vec(),
        alpha: tape.value(v.alpha).to_vec(),
        selected: v.selected,
        no_evidence,
    })
}

/// Modality completion, RAAF and MB-MoE for one sample.
pub fn fuse_pipeline(
    params: &[f64],
    model: &FusionModel,
    sample: &ModalSample,
    perc: &RetrievalResult,
    index: &EvidenceIndex,
) -> Result<FusedState> {
    let completed = complete_modalities(sample, perc, index);
    fuse_values(params, model, &FusionInput::new(sample, &completed, perc, index)?)
}
