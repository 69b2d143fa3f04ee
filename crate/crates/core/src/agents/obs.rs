use crate::envsynth::{EvidenceItem, Modality};
use crate::fusion::FusionInput;
use crate::numerics::cosine;
use crate::retrieval::RetrievalResult;

use super::{AgentError, Result, Role};

/// Input widths of the three roles for embedding dim `d` and `c` labels.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct ObsLayout {
    pub dim: usize,
    pub num_labels: usize,
}

impl ObsLayout {
    pub fn planner_dim(&self) -> usize {
        3 * self.dim + self.num_labels
    }

    pub fn filter_item_dim(&self) -> usize {
        2 * self.dim + 4 + self.num_labels
    }

    /// Text, evidence mean, label histogram, fused video, fused audio.
    pub fn generator_dim(&self) -> usize {
        4 * self.dim + self.num_labels
    }

    pub fn max_obs_dim(&self) -> usize {
        self.planner_dim()
            .max(self.filter_item_dim())
            .max(self.generator_dim())
    }

    /// Role one-hot followed by the zero-padded observation.
    pub fn trunk_input_dim(&self) -> usize {
        3 + self.max_obs_dim()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Observation {
    Planner {
        features: Vec<f64>,
    },
    /// One feature vector per candidate item.
    Filter {
        items: Vec<Vec<f64>>,
    },
    /// `base` holds text, evidence mean and label histogram; the fused
    /// video/audio part is recomputed from `fusion` so gradients reach the
    /// fusion parameters.
    Generator {
        base: Vec<f64>,
        fusion: FusionInput,
    },
}

impl Observation {
    pub fn role(&self) -> Role {
        match self {
            Observation::Planner { .. } => Role::Planner,
            Observation::Filter { .. } => Role::Filter,
            Observation::Generator { .. } => Role::Generator,
        }
    }
}

/// Inputs an observation may draw on. Which ones are required depends on
/// the role.
#[derive(Debug, Clone, Copy)]
pub struct ObsInputs<'a> {
    /// Completed text, video and audio vectors.
    pub x: &'a [Vec<f64>; 3],
    pub candidates: Option<&'a [&'a EvidenceItem]>,
    pub kept: Option<&'a [&'a EvidenceItem]>,
    pub fusion: Option<&'a FusionInput>,
    /// Per-label share of the perceptual neighbours, see `perceptual_support`.
    pub support: Option<&'a [f64]>,
    /// Divisor of the evidence histogram, normally the per-query k.
    pub hist_norm: f64,
}

pub fn build_observation(role: Role, layout: &ObsLayout, inp: ObsInputs<'_>) -> Result<Observation> {
    match role {
        Role::Planner => Ok(planner_observation(layout, inp.x)),
        Role::Filter => {
            let c = inp
                .candidates
                .ok_or(AgentError::MissingInput(role, "candidates"))?;
            let zeros = vec![0.0; layout.num_labels];
            Ok(filter_observation(
                layout,
                inp.x,
                c,
                inp.support.unwrap_or(&zeros),
            ))
        }
        Role::Generator => {
            let kept = inp.kept.ok_or(AgentError::MissingInput(role, "kept evidence"))?;
            let fusion = inp.fusion.ok_or(AgentError::MissingInput(role, "fused state"))?;
            Ok(generator_observation(
                layout,
                inp.x,
                kept,
                fusion.clone(),
                inp.hist_norm,
            ))
        }
    }
}

/// Raw features plus the candidate label set (every label).
pub fn planner_observation(layout: &ObsLayout, x: &[Vec<f64>; 3]) -> Observation {
    let mut f = Vec::with_capacity(layout.planner_dim());
    for v in x {
        f.extend_from_slice(v);
    }
    f.extend(std::iter::repeat_n(1.0, layout.num_labels));
    Observation::Planner { features: f }
}

/// Fraction of the perceptual neighbours (all modalities pooled) carrying
/// each label. All zeros when there is no perceptual evidence.
pub fn perceptual_support(perc: &RetrievalResult, num_labels: usize) -> Vec<f64> {
    let mut s = vec![0.0; num_labels];
    let n = perc.perceptual.iter().map(Vec::len).sum::<usize>();
    for h in perc.perceptual.iter().flatten() {
        s[h.label] += 1.0 / n as f64;
    }
    s
}

/// Text of input and item, per-modality cosines, the share of perceptual
/// neighbours agreeing with the item's label, and the item label.
pub fn filter_item_features(
    layout: &ObsLayout,
    x: &[Vec<f64>; 3],
    item: &EvidenceItem,
    support: &[f64],
) -> Vec<f64> {
    let mut f = Vec::with_capacity(layout.filter_item_dim());
    f.extend_from_slice(&x[0]);
    f.extend_from_slice(item.get(Modality::Text));
    for m in Modality::ALL {
        f.push(cosine(&x[m.index()], item.get(m)));
    }
    f.push(support[item.label]);
    let mut onehot = vec![0.0; layout.num_labels];
    onehot[item.label] = 1.0;
    f.extend(onehot);
    f
}

pub fn filter_observation(
    layout: &ObsLayout,
    x: &[Vec<f64>; 3],
    candidates: &[&EvidenceItem],
    support: &[f64],
) -> Observation {
    Observation::Filter {
        items: candidates
            .iter()
            .map(|it| filter_item_features(layout, x, it, support))
            .collect(),
    }
}

/// Label histogram of kept evidence. Each item adds its positive text
/// cosine to the input, so off-topic evidence carries little mass. The
/// histogram is divided by `norm` but not renormalised: more agreeing
/// evidence reads as stronger support.
pub fn evidence_histogram(x_t: &[f64], kept: &[&EvidenceItem], num_labels: usize, norm: f64) -> Vec<f64> {
    let mut h = vec![0.0; num_labels];
    for it in kept {
        h[it.label] += cosine(x_t, it.get(Modality::Text)).max(0.0) / norm;
    }
    h
}

pub(crate) fn generator_base(layout: &ObsLayout, x_t: &[f64], kept: &[&EvidenceItem], norm: f64) -> Vec<f64> {
    let d = layout.dim;
    let mut f = Vec::with_capacity(2 * d + layout.num_labels);
    f.extend_from_slice(x_t);
    let mut mean = vec![0.0; d];
    for it in kept {
        for (m, v) in mean.iter_mut().zip(it.get(Modality::Text)) {
            *m += v / kept.len() as f64;
        }
    }
    f.extend(mean);
    f.extend(evidence_histogram(x_t, kept, layout.num_labels, norm));
    f
}

pub fn generator_observation(
    layout: &ObsLayout,
    x: &[Vec<f64>; 3],
    kept: &[&EvidenceItem],
    fusion: FusionInput,
    hist_norm: f64,
) -> Observation {
    Observation::Generator {
        base: generator_base(layout, &x[0], kept, hist_norm),
        fusion,
    }
}
