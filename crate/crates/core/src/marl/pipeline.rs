//! One pass of planner → retriever → filter → fusion → generator, with the
//! ablation switches and the two counterfactual variants.

use std::collections::HashSet;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::agents::{
    filter_observation, filter_teacher, generator_observation, generator_teacher, perceptual_support,
    planner_observation, planner_teacher, AgentAction, Mode, Observation, PolicyBundle, Role, SftConfig,
    SftExample,
};
use crate::envsynth::{apply_missing, ModalSample, Modality};
use crate::fusion::{complete_modalities, fuse_values, FusionInput};
use crate::retrieval::{EvidenceIndex, Hit, QueryKind, QuerySet, RetrievalResult};
use crate::seeding;

use super::Result;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PipelineConfig {
    /// Results per cognitive query.
    pub k_cog: usize,
    /// Results per perceptual modality.
    pub k_perc: usize,
    /// Items per cognitive list passed on by the filter bypass. `None`
    /// uses ⌈K/3⌉ for K deduplicated candidates.
    pub bypass_top_k: Option<usize>,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            k_cog: 8,
            k_perc: 4,
            bypass_top_k: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct AblationFlags {
    /// Replace planner queries by a degenerate label query.
    pub no_planner: bool,
    /// Pass the top items of each cognitive list straight to the generator.
    pub no_filter: bool,
    pub no_confuse_evidence: bool,
    pub no_counter_evidence: bool,
    pub drop_modality: Option<Modality>,
    /// No retrieval at all: empty evidence everywhere.
    pub no_retrieval: bool,
    /// Perceptual text neighbours as the only evidence, no planner or
    /// filter.
    pub naive_rag: bool,
    /// Empty perceptual lists, which also disables missing-modality
    /// substitution.
    pub no_perceptual_evidence: bool,
}

impl AblationFlags {
    pub fn is_full(&self) -> bool {
        *self == Self::default()
    }
}

/// A cognitive candidate: corpus row, the list it first appeared in and
/// its rank there.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Candidate {
    pub row: usize,
    pub group: QueryKind,
    pub rank: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AgentRecord {
    pub role: Role,
    pub obs: Observation,
    pub action: AgentAction,
    pub lp_old: f64,
    pub lp_sft: f64,
    pub value: f64,
    pub critic_features: Vec<f64>,
}

/// Everything downstream of the queries for one pass.
#[derive(Debug, Clone, PartialEq)]
pub struct EvidencePass {
    pub lists: [Vec<Hit>; 3],
    pub candidates: Vec<Candidate>,
    pub keep: Vec<bool>,
    pub filter_obs: Observation,
    pub generator_obs: Observation,
    pub label: usize,
}

impl EvidencePass {
    /// Kept corpus rows, sorted.
    pub fn kept_rows(&self) -> Vec<usize> {
        let mut rows: Vec<usize> = self
            .candidates
            .iter()
            .zip(&self.keep)
            .filter(|(_, &k)| k)
            .map(|(c, _)| c.row)
            .collect();
        rows.sort_unstable();
        rows
    }
}

/// Shared context of every episode: corpus, retrieval sizes, policies.
pub struct Pipeline<'a> {
    pub index: &'a EvidenceIndex,
    pub cfg: &'a PipelineConfig,
    pub bundle: &'a PolicyBundle,
    /// Parameters of the reference policy as seen by this pipeline.
    pub sft_params: Vec<f64>,
}

/// Planner observation, action and its log-probability.
type PlannerStep = (Observation, AgentAction, f64);

struct Perceived {
    sample: ModalSample,
    perc: RetrievalResult,
    completed: [Vec<f64>; 3],
    fusion: FusionInput,
}

/// Zeroes the sample's own features: the input text in every filter item
/// and in the generator base, and the fusion inputs.
fn zero_raw(filter: &mut Observation, generator: &mut Observation, d: usize) {
    if let Observation::Filter { items } = filter {
        for it in items.iter_mut() {
            it[..d].iter_mut().for_each(|x| *x = 0.0);
        }
    }
    if let Observation::Generator { base, fusion } = generator {
        base[..d].iter_mut().for_each(|x| *x = 0.0);
        for x in fusion.x.iter_mut() {
            x.iter_mut().for_each(|v| *v = 0.0);
        }
    }
}

/// Degenerate query: every probe is the corpus text centroid of `label`.
pub fn degenerate_queries(index: &EvidenceIndex, label: usize) -> QuerySet {
    QuerySet::uniform(index.label_text_centroid(label).to_vec())
}

/// Merges the active cognitive lists rank by rank, keeping the first
/// occurrence of each row.
pub fn merge_candidates(lists: &[Vec<Hit>; 3], active: [bool; 3]) -> Vec<Candidate> {
    let depth = lists.iter().map(Vec::len).max().unwrap_or(0);
    let mut seen = HashSet::new();
    let mut out = Vec::new();
    for rank in 0..depth {
        for kind in QueryKind::ALL {
            if !active[kind.index()] {
                continue;
            }
            if let Some(h) = lists[kind.index()].get(rank) {
                if seen.insert(h.index) {
                    out.push(Candidate {
                        row: h.index,
                        group: kind,
                        rank,
                    });
                }
            }
        }
    }
    out
}

/// Keep mask of the filter bypass: the top `t` items of every active list.
pub fn bypass_mask(
    lists: &[Vec<Hit>; 3],
    active: [bool; 3],
    candidates: &[Candidate],
    top: Option<usize>,
) -> Vec<bool> {
    let t = top.unwrap_or(candidates.len().div_ceil(3));
    let rows: HashSet<usize> = QueryKind::ALL
        .iter()
        .filter(|k| active[k.index()])
        .flat_map(|k| lists[k.index()].iter().take(t).map(|h| h.index))
        .collect();
    candidates.iter().map(|c| rows.contains(&c.row)).collect()
}

impl<'a> Pipeline<'a> {
    pub fn new(index: &'a EvidenceIndex, cfg: &'a PipelineConfig, bundle: &'a PolicyBundle) -> Self {
        Self {
            index,
            cfg,
            bundle,
            sft_params: bundle.sft_view(),
        }
    }

    fn params(&self) -> &[f64] {
        &self.bundle.params
    }

    fn perceive(&self, sample: &ModalSample, flags: &AblationFlags) -> Result<Perceived> {
        let sample = match flags.drop_modality {
            Some(m) if sample.is_present(m) => apply_missing(sample, m)?,
            _ => sample.clone(),
        };
        let mut perc = RetrievalResult::default();
        if !(flags.no_retrieval || flags.no_perceptual_evidence) {
            let (lists, proxied) = self.index.retrieve_perceptual(&sample, self.cfg.k_perc)?;
            perc.perceptual = lists;
            perc.proxied = proxied;
        }
        let completed = complete_modalities(&sample, &perc, self.index);
        let fusion = FusionInput::new(&sample, &completed, &perc, self.index)?;
        Ok(Perceived {
            sample,
            perc,
            completed,
            fusion,
        })
    }

    fn active_lists(flags: &AblationFlags) -> [bool; 3] {
        [true, !flags.no_confuse_evidence, !flags.no_counter_evidence]
    }

    fn cognitive_lists(
        &self,
        p: &Perceived,
        queries: &QuerySet,
        flags: &AblationFlags,
    ) -> Result<[Vec<Hit>; 3]> {
        if flags.no_retrieval {
            return Ok(Default::default());
        }
        if flags.naive_rag {
            let mut lists: [Vec<Hit>; 3] = Default::default();
            lists[0] = p.perc.perceptual(Modality::Text).to_vec();
            return Ok(lists);
        }
        Ok(self.index.retrieve_cognitive(queries, self.cfg.k_cog)?)
    }

    fn record(&self, role: Role, obs: Observation, action: AgentAction, lp_old: f64) -> Result<AgentRecord> {
        let net = &self.bundle.net;
        let lp_sft = net.logprob_of(&self.sft_params, &obs, &action)?;
        let critic_features = net.critic_features(self.params(), &obs)?;
        let value = net.value(self.params(), role, &critic_features)?;
        Ok(AgentRecord {
            role,
            obs,
            action,
            lp_old,
            lp_sft,
            value,
            critic_features,
        })
    }

    /// Filter and generator stages for a fixed set of cognitive lists.
    ///
    /// `reuse` carries the main pass: where a candidate or the kept set
    /// coincides with it, its sampled decisions are reused; everything else
    /// is decided greedily. Without `reuse` the stages act in `mode`.
    #[allow(clippy::too_many_arguments)]
    fn evidence_pass<R: Rng>(
        &self,
        p: &Perceived,
        lists: [Vec<Hit>; 3],
        flags: &AblationFlags,
        bypass: bool,
        mode: Mode,
        reuse: Option<&EvidencePass>,
        rng: &mut R,
        lps: &mut [f64; 2],
    ) -> Result<EvidencePass> {
        let net = &self.bundle.net;
        let layout = &net.layout;
        let active = if flags.naive_rag {
            [true, false, false]
        } else {
            Self::active_lists(flags)
        };
        let candidates = merge_candidates(&lists, active);
        let items: Vec<_> = candidates.iter().map(|c| &self.index.items()[c.row]).collect();
        let filter_obs = filter_observation(
            layout,
            &p.completed,
            &items,
            &perceptual_support(&p.perc, layout.num_labels),
        );
        let keep = if flags.naive_rag {
            vec![true; candidates.len()]
        } else if bypass || flags.no_filter {
            bypass_mask(&lists, active, &candidates, self.cfg.bypass_top_k)
        } else {
            let do_mode = if reuse.is_some() { Mode::Greedy } else { mode };
            let (a, lp) = net.act(self.params(), &filter_obs, do_mode, rng)?;
            lps[0] = lp;
            let AgentAction::Filter(mut keep) = a else {
                unreachable!("filter head returns filter actions")
            };
            if let Some(main) = reuse {
                for (k, c) in keep.iter_mut().zip(&candidates) {
                    if let Some(j) = main.candidates.iter().position(|m| m.row == c.row) {
                        *k = main.keep[j];
                    }
                }
            }
            keep
        };
        let kept: Vec<_> = items
            .iter()
            .zip(&keep)
            .filter(|(_, &k)| k)
            .map(|(it, _)| *it)
            .collect();
        let generator_obs = generator_observation(
            layout,
            &p.completed,
            &kept,
            p.fusion.clone(),
            self.cfg.k_cog as f64,
        );
        let mut pass = EvidencePass {
            lists,
            candidates,
            keep,
            filter_obs,
            generator_obs,
            label: 0,
        };
        let same_kept = reuse.filter(|m| m.kept_rows() == pass.kept_rows());
        pass.label = match same_kept {
            Some(main) => main.label,
            None => {
                let do_mode = if reuse.is_some() { Mode::Greedy } else { mode };
                let (a, lp) = net.act(self.params(), &pass.generator_obs, do_mode, rng)?;
                lps[1] = lp;
                match a {
                    AgentAction::Generator(y) => y,
                    _ => unreachable!("generator head returns labels"),
                }
            }
        };
        Ok(pass)
    }

    /// Greedy prediction for one sample under `flags`. A degenerate planner
    /// label comes from a stream keyed by `(seed, sample id)`.
    pub fn predict(&self, sample: &ModalSample, flags: &AblationFlags, seed: u64) -> Result<usize> {
        let mut rng = seeding::stream(seed, &[0xe7a1, sample.id]);
        let p = self.perceive(sample, flags)?;
        let queries = self.queries(&p, flags, Mode::Greedy, &mut rng)?.0;
        let lists = self.cognitive_lists(&p, &queries, flags)?;
        let pass = self.evidence_pass(
            &p,
            lists,
            flags,
            false,
            Mode::Greedy,
            None,
            &mut rng,
            &mut [0.0; 2],
        )?;
        Ok(pass.label)
    }

    fn queries<R: Rng>(
        &self,
        p: &Perceived,
        flags: &AblationFlags,
        mode: Mode,
        rng: &mut R,
    ) -> Result<(QuerySet, Option<PlannerStep>)> {
        let net = &self.bundle.net;
        if flags.no_planner || flags.naive_rag {
            let label = rng.random_range(0..self.index.num_labels());
            return Ok((degenerate_queries(self.index, label), None));
        }
        let obs = planner_observation(&net.layout, &p.completed);
        let (a, lp) = net.act(self.params(), &obs, mode, rng)?;
        let [s, c, k] = a.queries(net.layout.dim).expect("planner action");
        Ok((QuerySet::new(s, c, k), Some((obs, a, lp))))
    }

    /// Teacher-forced example: teacher queries feed retrieval, teacher keep
    /// decisions feed the generator.
    pub fn sft_example(&self, sample: &ModalSample, cfg: &SftConfig, seed: u64) -> Result<SftExample> {
        let mut rng = seeding::stream(seed, &[0x5f7e, sample.id]);
        let mut flags = AblationFlags::default();
        if cfg.drop_prob > 0.0 && rng.random::<f64>() < cfg.drop_prob {
            flags.drop_modality = Some(Modality::ALL[rng.random_range(0..3)]);
        }
        let layout = &self.bundle.net.layout;
        let c = layout.num_labels;
        let p = self.perceive(sample, &flags)?;
        let planner_obs = planner_observation(layout, &p.completed);
        let q = planner_teacher(&p.completed[0], self.index, &mut rng);
        let d = layout.dim;
        let queries = QuerySet::new(q[..d].to_vec(), q[d..2 * d].to_vec(), q[2 * d..].to_vec());
        let lists = self.cognitive_lists(&p, &queries, &flags)?;
        let candidates = merge_candidates(&lists, [true; 3]);
        let items: Vec<_> = candidates.iter().map(|c| &self.index.items()[c.row]).collect();
        let mut filter_obs = filter_observation(
            layout,
            &p.completed,
            &items,
            &perceptual_support(&p.perc, layout.num_labels),
        );
        let keep = filter_teacher(&p.perc, &items, c, cfg.filter_top_votes);
        let gen_keep = if cfg.bypass_mix > 0.0 && rng.random::<f64>() < cfg.bypass_mix {
            bypass_mask(&lists, [true; 3], &candidates, self.cfg.bypass_top_k)
        } else {
            keep.clone()
        };
        let kept: Vec<_> = items
            .iter()
            .zip(&gen_keep)
            .filter(|(_, &k)| k)
            .map(|(i, _)| *i)
            .collect();
        let target = generator_teacher(cfg.generator_teacher, p.sample.label, &kept, &p.perc, c);
        let mut generator_obs = generator_observation(
            layout,
            &p.completed,
            &kept,
            p.fusion.clone(),
            self.cfg.k_cog as f64,
        );
        if cfg.raw_dropout > 0.0 && rng.random::<f64>() < cfg.raw_dropout {
            zero_raw(&mut filter_obs, &mut generator_obs, d);
        }
        Ok(SftExample {
            planner: (planner_obs, AgentAction::Planner(q)),
            filter: (filter_obs, AgentAction::Filter(keep)),
            generator: (generator_obs, AgentAction::Generator(target)),
        })
    }

    /// Full episode with sampled actions plus the label-replacement and
    /// filter-bypass counterfactuals.
    pub fn rollout_episode<R: Rng>(
        &self,
        sample: &ModalSample,
        flags: &AblationFlags,
        mode: Mode,
        rng: &mut R,
    ) -> Result<Trajectory> {
        let p = self.perceive(sample, flags)?;
        let (queries, planner) = self.queries(&p, flags, mode, rng)?;
        let Some((p_obs, p_act, p_lp)) = planner else {
            return Err(super::MarlError::Episode {
                sample: sample.id,
                msg: "training episodes need an active planner".into(),
            });
        };
        let lists = self.cognitive_lists(&p, &queries, flags)?;
        let mut lps = [0.0; 2];
        let main = self.evidence_pass(&p, lists, flags, false, mode, None, rng, &mut lps)?;

        let label = rng.random_range(0..self.index.num_labels());
        let deg = degenerate_queries(self.index, label);
        let lists = self.cognitive_lists(&p, &deg, flags)?;
        let cf_label = self.evidence_pass(&p, lists, flags, false, mode, Some(&main), rng, &mut [0.0; 2])?;
        let cf_rank = self.evidence_pass(
            &p,
            main.lists.clone(),
            flags,
            true,
            mode,
            Some(&main),
            rng,
            &mut [0.0; 2],
        )?;

        let gold = p.sample.label;
        let score = |y: usize| f64::from(u8::from(y == gold));
        let fused = fuse_values(self.params(), &self.bundle.net.fusion, &p.fusion)?;
        let agents = [
            self.record(Role::Planner, p_obs, p_act, p_lp)?,
            self.record(
                Role::Filter,
                main.filter_obs.clone(),
                AgentAction::Filter(main.keep.clone()),
                lps[0],
            )?,
            self.record(
                Role::Generator,
                main.generator_obs.clone(),
                AgentAction::Generator(main.label),
                lps[1],
            )?,
        ];
        Ok(Trajectory {
            sample_id: sample.id,
            gold,
            agents,
            pred_full: main.label,
            pred_label: cf_label.label,
            pred_rank: cf_rank.label,
            score_full: score(main.label),
            score_label: score(cf_label.label),
            score_rank: score(cf_rank.label),
            routing: fused.expert_weights(self.bundle.net.fusion.moe.experts.len()),
            rewards: [0.0; 3],
        })
    }
}

/// One training episode.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub sample_id: u64,
    pub gold: usize,
    /// Planner, filter, generator.
    pub agents: [AgentRecord; 3],
    pub pred_full: usize,
    pub pred_label: usize,
    pub pred_rank: usize,
    pub score_full: f64,
    pub score_label: f64,
    pub score_rank: f64,
    /// Routing weights scattered over all experts.
    pub routing: Vec<f64>,
    /// Planner, filter, generator; filled by [`super::compute_rewards`].
    pub rewards: [f64; 3],
}
