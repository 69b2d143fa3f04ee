//! Query planner, evidence filter and emotion generator as heads over one
//! shared trunk, plus the critic and the SFT warm start.
//!
//! The planner emits three query vectors from a fixed-variance Gaussian,
//! the filter an independent keep/drop Bernoulli per candidate and the
//! generator a categorical label. Every role feeds
//! `[role one-hot; zero-padded observation]` through the same trunk.

mod obs;
mod sft;
mod teacher;

pub use obs::{
    build_observation, evidence_histogram, filter_item_features, filter_observation, generator_observation,
    perceptual_support, planner_observation, ObsInputs, ObsLayout, Observation,
};
pub use sft::{sft_warm_start, SftConfig, SftExample, SftReport};
pub use teacher::{filter_teacher, generator_teacher, perceptual_votes, planner_teacher, GeneratorTeacher};

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::fusion::{fuse_on_tape, FusionConfig, FusionError, FusionModel};
use crate::numerics::{
    mlp_forward, sigmoid, softmax, Activation, Linear, Mlp, NumericsError, ParamBuilder, Section, Tape, Var,
};
use crate::seeding;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    Planner,
    Filter,
    Generator,
}

impl Role {
    pub const ALL: [Role; 3] = [Role::Planner, Role::Filter, Role::Generator];

    pub fn index(self) -> usize {
        self as usize
    }
}

#[derive(Debug, Error, PartialEq)]
pub enum AgentError {
    #[error("{0:?} observation needs {1}")]
    MissingInput(Role, &'static str),
    #[error("action for {action:?} given a {obs:?} observation")]
    RoleMismatch { obs: Role, action: Role },
    #[error("{role:?} action has {found} entries, expected {expected}")]
    ActionShape {
        role: Role,
        expected: usize,
        found: usize,
    },
    #[error("invalid policy config: {0}")]
    Config(String),
    #[error(transparent)]
    Fusion(#[from] FusionError),
    #[error(transparent)]
    Numerics(#[from] NumericsError),
}

pub type Result<T> = std::result::Result<T, AgentError>;

#[derive(Debug, Clone, PartialEq)]
pub enum AgentAction {
    /// Supportive, confusing and countering queries, concatenated.
    Planner(Vec<f64>),
    /// Keep decision per candidate.
    Filter(Vec<bool>),
    Generator(usize),
}

impl AgentAction {
    pub fn role(&self) -> Role {
        match self {
            AgentAction::Planner(_) => Role::Planner,
            AgentAction::Filter(_) => Role::Filter,
            AgentAction::Generator(_) => Role::Generator,
        }
    }

    /// The three query vectors of a planner action.
    pub fn queries(&self, dim: usize) -> Option<[Vec<f64>; 3]> {
        match self {
            AgentAction::Planner(q) => Some(std::array::from_fn(|i| q[i * dim..(i + 1) * dim].to_vec())),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Sample,
    Greedy,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PolicyConfig {
    pub trunk_hidden: usize,
    pub critic_hidden: usize,
    /// Standard deviation of the planner's Gaussian, per dimension.
    pub planner_sigma: f64,
    /// Init gain of the trunk layer.
    pub trunk_gain: f64,
    /// Multiplier applied to the observation before the trunk.
    pub input_scale: f64,
    pub fusion: FusionConfig,
}

impl Default for PolicyConfig {
    fn default() -> Self {
        Self {
            trunk_hidden: 64,
            critic_hidden: 64,
            planner_sigma: 0.3,
            trunk_gain: 1.0,
            input_scale: 0.5,
            fusion: FusionConfig::default(),
        }
    }
}

/// Parameter layout of the trunk, heads, critic and fusion modules.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolicyNet {
    pub layout: ObsLayout,
    pub trunk: Linear,
    pub planner_head: Linear,
    pub filter_head: Linear,
    pub generator_head: Linear,
    pub critic: Mlp,
    pub fusion: FusionModel,
    pub planner_sigma: f64,
    pub input_scale: f64,
}

/// Network layout, current parameters and the frozen SFT reference.
#[derive(Debug, Clone, PartialEq)]
pub struct PolicyBundle {
    pub net: PolicyNet,
    pub params: Vec<f64>,
    pub sections: Vec<Section>,
    /// Full-length copy taken at the end of the warm start. Only the trunk
    /// and head ranges are ever read.
    pub sft: Option<Vec<f64>>,
}

pub const SECTION_NAMES: [&str; 5] = ["trunk", "heads", "critic", "raaf", "moe"];

impl PolicyBundle {
    pub fn new(layout: ObsLayout, cfg: &PolicyConfig, seed: u64) -> Result<Self> {
        if cfg.planner_sigma.is_nan()
            || cfg.planner_sigma <= 0.0
            || cfg.trunk_hidden == 0
            || cfg.critic_hidden == 0
        {
            return Err(AgentError::Config(
                "planner_sigma and hidden widths must be positive".into(),
            ));
        }
        let mut rng = seeding::stream(seed, &[0x9a7a]);
        let mut b = ParamBuilder::new(&mut rng);
        let d = layout.dim;
        let h = cfg.trunk_hidden;
        b.section("trunk");
        let trunk = b.linear(layout.trunk_input_dim(), h, cfg.trunk_gain);
        b.section("heads");
        let planner_head = b.linear(h, 3 * d, 1.0);
        let filter_head = b.linear(h, 1, 1.0);
        let generator_head = b.linear(h, layout.num_labels, 0.1);
        b.section("critic");
        let critic = b.mlp(
            &[layout.trunk_input_dim(), cfg.critic_hidden, 1],
            Activation::Tanh,
            false,
        );
        let fusion = FusionModel::build(&mut b, d, &cfg.fusion)?;
        let (params, sections) = b.finish();
        Ok(Self {
            net: PolicyNet {
                layout,
                trunk,
                planner_head,
                filter_head,
                generator_head,
                critic,
                fusion,
                planner_sigma: cfg.planner_sigma,
                input_scale: cfg.input_scale,
            },
            params,
            sections,
            sft: None,
        })
    }

    pub fn section(&self, name: &str) -> Option<&Section> {
        self.sections.iter().find(|s| s.name == name)
    }

    /// Contiguous range covering the trunk and all heads.
    pub fn actor_range(&self) -> std::ops::Range<usize> {
        let t = self.section("trunk").expect("trunk section");
        let h = self.section("heads").expect("heads section");
        t.start..h.end
    }

    /// Freezes the current trunk and heads as the reference policy.
    pub fn freeze_sft(&mut self) {
        self.sft = Some(self.params.clone());
    }

    /// Current parameters with the actor range replaced by the SFT copy,
    /// so the reference policy sees the same fused observation. Without a
    /// frozen copy this is the current parameters.
    pub fn sft_view(&self) -> Vec<f64> {
        let mut v = self.params.clone();
        if let Some(sft) = &self.sft {
            let r = self.actor_range();
            v[r.clone()].copy_from_slice(&sft[r]);
        }
        v
    }
}

fn role_onehot(role: Role) -> Vec<f64> {
    let mut v = vec![0.0; 3];
    v[role.index()] = 1.0;
    v
}

/// Tape handles for a role's distribution parameters.
pub enum HeadOut {
    PlannerMean(Var),
    FilterLogits(Option<Var>),
    GeneratorLogits(Var),
}

impl PolicyNet {
    fn padded_input(&self, tape: &mut Tape, role: Role, features: Var) -> Var {
        let pad = self.layout.max_obs_dim() - tape.dim(features);
        let scaled = tape.scale(features, self.input_scale);
        let head = tape.constant(role_onehot(role));
        if pad == 0 {
            return tape.concat(&[head, scaled]);
        }
        let zeros = tape.constant(vec![0.0; pad]);
        tape.concat(&[head, scaled, zeros])
    }

    fn trunk_forward(&self, tape: &mut Tape, role: Role, features: Var) -> Var {
        let input = self.padded_input(tape, role, features);
        let h = self.trunk.forward(tape, input);
        tape.tanh(h)
    }

    /// Builds the role's distribution parameters on the tape.
    pub fn head_forward(&self, tape: &mut Tape, obs: &Observation) -> Result<HeadOut> {
        match obs {
            Observation::Planner { features } => {
                let f = tape.constant(features.clone());
                let h = self.trunk_forward(tape, Role::Planner, f);
                Ok(HeadOut::PlannerMean(self.planner_head.forward(tape, h)))
            }
            Observation::Filter { items } => {
                if items.is_empty() {
                    return Ok(HeadOut::FilterLogits(None));
                }
                let logits: Vec<Var> = items
                    .iter()
                    .map(|it| {
                        let f = tape.constant(it.clone());
                        let h = self.trunk_forward(tape, Role::Filter, f);
                        self.filter_head.forward(tape, h)
                    })
                    .collect();
                Ok(HeadOut::FilterLogits(Some(tape.concat(&logits))))
            }
            Observation::Generator { base, fusion } => {
                let (fused, _) = fuse_on_tape(tape, &self.fusion, fusion)?;
                let b = tape.constant(base.clone());
                let f = tape.concat(&[b, fused.x_v, fused.x_a]);
                let h = self.trunk_forward(tape, Role::Generator, f);
                Ok(HeadOut::GeneratorLogits(self.generator_head.forward(tape, h)))
            }
        }
    }

    /// Log-probability of `action` given head outputs, on the tape.
    pub fn logprob_from_head(&self, tape: &mut Tape, head: &HeadOut, action: &AgentAction) -> Result<Var> {
        match (head, action) {
            (HeadOut::PlannerMean(mu), AgentAction::Planner(a)) => {
                let n = tape.dim(*mu);
                if a.len() != n {
                    return Err(AgentError::ActionShape {
                        role: Role::Planner,
                        expected: n,
                        found: a.len(),
                    });
                }
                let s = self.planner_sigma;
                let av = tape.constant(a.clone());
                let diff = tape.sub(av, *mu);
                let sq = tape.square(diff);
                let ss = tape.sum(sq);
                let scaled = tape.scale(ss, -0.5 / (s * s));
                let norm = n as f64 * (s * (2.0 * std::f64::consts::PI).sqrt()).ln();
                Ok(tape.offset(scaled, -norm))
            }
            (HeadOut::FilterLogits(logits), AgentAction::Filter(keep)) => {
                let n = logits.map_or(0, |l| tape.dim(l));
                if keep.len() != n {
                    return Err(AgentError::ActionShape {
                        role: Role::Filter,
                        expected: n,
                        found: keep.len(),
                    });
                }
                let Some(l) = *logits else {
                    return Ok(tape.constant_scalar(0.0));
                };
                let signs = tape.constant(keep.iter().map(|&k| if k { 1.0 } else { -1.0 }).collect());
                let signed = tape.mul(l, signs);
                let ls = tape.log_sigmoid(signed);
                Ok(tape.sum(ls))
            }
            (HeadOut::GeneratorLogits(l), AgentAction::Generator(y)) => {
                let n = tape.dim(*l);
                if *y >= n {
                    return Err(AgentError::ActionShape {
                        role: Role::Generator,
                        expected: n,
                        found: *y,
                    });
                }
                let lsm = tape.log_softmax(*l);
                Ok(tape.slice(lsm, *y, 1))
            }
            (h, a) => Err(AgentError::RoleMismatch {
                obs: match h {
                    HeadOut::PlannerMean(_) => Role::Planner,
                    HeadOut::FilterLogits(_) => Role::Filter,
                    HeadOut::GeneratorLogits(_) => Role::Generator,
                },
                action: a.role(),
            }),
        }
    }

    pub fn logprob_on_tape(&self, tape: &mut Tape, obs: &Observation, action: &AgentAction) -> Result<Var> {
        if obs.role() != action.role() {
            return Err(AgentError::RoleMismatch {
                obs: obs.role(),
                action: action.role(),
            });
        }
        let head = self.head_forward(tape, obs)?;
        self.logprob_from_head(tape, &head, action)
    }

    pub fn logprob_of(&self, params: &[f64], obs: &Observation, action: &AgentAction) -> Result<f64> {
        let mut tape = Tape::new(params);
        let lp = self.logprob_on_tape(&mut tape, obs, action)?;
        Ok(tape.scalar(lp))
    }

    /// Draws (or takes the mode of) the role's action and returns it with
    /// its exact log-probability.
    pub fn act<R: Rng>(
        &self,
        params: &[f64],
        obs: &Observation,
        mode: Mode,
        rng: &mut R,
    ) -> Result<(AgentAction, f64)> {
        let mut tape = Tape::new(params);
        let head = self.head_forward(&mut tape, obs)?;
        let action = match &head {
            HeadOut::PlannerMean(mu) => {
                let mu = tape.value(*mu);
                AgentAction::Planner(match mode {
                    Mode::Greedy => mu.to_vec(),
                    Mode::Sample => mu
                        .iter()
                        .map(|m| {
                            let z: f64 = rng.sample(StandardNormal);
                            m + self.planner_sigma * z
                        })
                        .collect(),
                })
            }
            HeadOut::FilterLogits(l) => {
                let logits = l.map_or(&[][..], |l| tape.value(l));
                AgentAction::Filter(
                    logits
                        .iter()
                        .map(|&x| {
                            let p = sigmoid(x);
                            match mode {
                                Mode::Greedy => p >= 0.5,
                                Mode::Sample => rng.random::<f64>() < p,
                            }
                        })
                        .collect(),
                )
            }
            HeadOut::GeneratorLogits(l) => {
                let logits = tape.value(*l);
                AgentAction::Generator(match mode {
                    Mode::Greedy => argmax(logits),
                    Mode::Sample => sample_categorical(&softmax(logits)?, rng),
                })
            }
        };
        let lp = self.logprob_from_head(&mut tape, &head, &action)?;
        Ok((action, tape.scalar(lp)))
    }

    /// Critic input for an observation: filter items are averaged, the
    /// generator uses the fused values. Result is detached from the actor.
    pub fn critic_features(&self, params: &[f64], obs: &Observation) -> Result<Vec<f64>> {
        Ok(match obs {
            Observation::Planner { features } => features.clone(),
            Observation::Filter { items } => {
                let refs = items.iter().map(Vec::as_slice);
                crate::numerics::mean_of(refs).unwrap_or_else(|| vec![0.0; self.layout.filter_item_dim()])
            }
            Observation::Generator { base, fusion } => {
                let f = crate::fusion::fuse_values(params, &self.fusion, fusion)?;
                let mut v = base.clone();
                v.extend(f.x_v);
                v.extend(f.x_a);
                v
            }
        })
    }

    pub fn value_on_tape(&self, tape: &mut Tape, role: Role, critic_features: &[f64]) -> Result<Var> {
        let f = tape.constant(critic_features.to_vec());
        let input = self.padded_input(tape, role, f);
        let v = mlp_forward(&self.critic, input, tape)?;
        Ok(v)
    }

    pub fn value(&self, params: &[f64], role: Role, critic_features: &[f64]) -> Result<f64> {
        let mut tape = Tape::new(params);
        let v = self.value_on_tape(&mut tape, role, critic_features)?;
        Ok(tape.scalar(v))
    }
}

/// First index of the maximum.
pub fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

fn sample_categorical<R: Rng>(p: &[f64], rng: &mut R) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (i, &pi) in p.iter().enumerate() {
        acc += pi;
        if u < acc {
            return i;
        }
    }
    p.len() - 1
}
