//! Synthetic multimodal emotion environment.
//!
//! Each label owns a centroid per modality. On top of the label centroid
//! every observation belongs to a *scene*: an idiosyncratic per-modality
//! offset shared by all observations of that scene. Train and test samples
//! come from disjoint scene sets while corpus items are drawn from all
//! scenes, so the labelled corpus carries instance-level information the
//! train split never shows. For every confusion pair `(a, b)` the text
//! centroids are near-identical and scene `j` of `a` shares its text offset
//! with scene `j` of `b`: text alone cannot separate the pair, video and
//! audio can.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::seeding;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Modality {
    Text,
    Video,
    Audio,
}

impl Modality {
    pub const ALL: [Modality; 3] = [Modality::Text, Modality::Video, Modality::Audio];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn short(self) -> &'static str {
        match self {
            Modality::Text => "t",
            Modality::Video => "v",
            Modality::Audio => "a",
        }
    }

    pub fn from_short(s: &str) -> Option<Self> {
        match s {
            "t" | "text" => Some(Modality::Text),
            "v" | "video" => Some(Modality::Video),
            "a" | "audio" => Some(Modality::Audio),
            _ => None,
        }
    }
}

#[derive(Debug, Error)]
pub enum EnvError {
    #[error("invalid synth spec: {0}")]
    InvalidSpec(String),
    #[error("cannot drop {0:?}: it is the only present modality")]
    LastModality(Modality),
    #[error("score_f1: {0}")]
    Score(String),
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("malformed record at {path}:{line}: {msg}")]
    Parse { path: String, line: usize, msg: String },
}

pub type Result<T> = std::result::Result<T, EnvError>;

/// One multimodal instance.
#[derive(Debug, Clone, PartialEq)]
pub struct ModalSample {
    pub id: u64,
    pub label: usize,
    pub present: [bool; 3],
    pub x: [Vec<f64>; 3],
}

impl ModalSample {
    pub fn get(&self, m: Modality) -> &[f64] {
        &self.x[m.index()]
    }

    pub fn is_present(&self, m: Modality) -> bool {
        self.present[m.index()]
    }

    pub fn present_modalities(&self) -> impl Iterator<Item = Modality> + '_ {
        Modality::ALL.into_iter().filter(|&m| self.is_present(m))
    }
}

/// One corpus entry.
#[derive(Debug, Clone, PartialEq)]
pub struct EvidenceItem {
    pub id: u64,
    pub label: usize,
    pub e: [Vec<f64>; 3],
}

impl EvidenceItem {
    pub fn get(&self, m: Modality) -> &[f64] {
        &self.e[m.index()]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthSpec {
    pub num_labels: usize,
    pub dim: usize,
    pub train_per_label: usize,
    pub test_per_label: usize,
    pub corpus_size: usize,
    /// Norm of each label centroid.
    pub separation: f64,
    /// Per-modality noise standard deviation, ordered (text, video, audio).
    pub noise: [f64; 3],
    pub confusion_pairs: Vec<(usize, usize)>,
    /// Norm of the text-centroid perturbation inside a confusion pair,
    /// relative to `separation`.
    pub pair_text_gap: f64,
    pub scenes_per_label: usize,
    /// Norm of each scene offset.
    pub scene_spread: f64,
    /// Fraction of each label's scenes reserved for the train split.
    pub train_scene_fraction: f64,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            num_labels: 6,
            dim: 16,
            train_per_label: 200,
            test_per_label: 100,
            corpus_size: 1200,
            separation: 3.0,
            noise: [1.0; 3],
            confusion_pairs: vec![(0, 1), (2, 3), (4, 5)],
            pair_text_gap: 0.05,
            scenes_per_label: 30,
            scene_spread: 6.0,
            train_scene_fraction: 2.0 / 3.0,
            seed: 0,
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(EnvError::InvalidSpec(msg));
        if self.num_labels < 2 {
            return bad(format!("num_labels {} < 2", self.num_labels));
        }
        if self.dim < 2 {
            return bad(format!("dim {} < 2", self.dim));
        }
        if self.train_per_label == 0 || self.test_per_label == 0 || self.corpus_size == 0 {
            return bad("split sizes must be positive".into());
        }
        let nonneg = [self.separation, self.pair_text_gap, self.scene_spread]
            .into_iter()
            .chain(self.noise);
        if nonneg.into_iter().any(|v| !(v >= 0.0 && v.is_finite())) {
            return bad("separation, noise, gaps and spread must be finite and >= 0".into());
        }
        if self.scenes_per_label == 0 {
            return bad("scenes_per_label must be >= 1".into());
        }
        if !(self.train_scene_fraction > 0.0 && self.train_scene_fraction <= 1.0) {
            return bad(format!(
                "train_scene_fraction {} not in (0, 1]",
                self.train_scene_fraction
            ));
        }
        let mut seen = vec![false; self.num_labels];
        for &(a, b) in &self.confusion_pairs {
            if a >= self.num_labels || b >= self.num_labels || a == b {
                return bad(format!("confusion pair ({a}, {b}) invalid"));
            }
            for l in [a, b] {
                if std::mem::replace(&mut seen[l], true) {
                    return bad(format!("label {l} appears in more than one confusion pair"));
                }
            }
        }
        Ok(())
    }

    /// The confusion partner of a label, if it has one.
    pub fn partner(&self, label: usize) -> Option<usize> {
        self.confusion_pairs.iter().find_map(|&(a, b)| {
            if a == label {
                Some(b)
            } else if b == label {
                Some(a)
            } else {
                None
            }
        })
    }

    fn scene_split(&self) -> (std::ops::Range<usize>, std::ops::Range<usize>) {
        let s = self.scenes_per_label;
        let n_train = ((s as f64 * self.train_scene_fraction).round() as usize).clamp(1, s);
        let test = if n_train < s { n_train..s } else { 0..s };
        (0..n_train, test)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub train: Vec<ModalSample>,
    pub test: Vec<ModalSample>,
    pub corpus: Vec<EvidenceItem>,
}

fn random_direction(rng: &mut ChaCha8Rng, dim: usize, norm: f64) -> Vec<f64> {
    let mut v: Vec<f64> = (0..dim).map(|_| rng.sample(StandardNormal)).collect();
    let n = crate::numerics::l2_norm(&v);
    v.iter_mut().for_each(|x| *x *= norm / n);
    v
}

type PerModality = [Vec<f64>; 3];

struct Generator {
    centroids: Vec<PerModality>,
    scenes: Vec<Vec<PerModality>>,
}

impl Generator {
    fn new(spec: &SynthSpec) -> Self {
        let d = spec.dim;
        let mut rng = seeding::stream(spec.seed, &[0xce17]);
        let mut centroids: Vec<PerModality> = (0..spec.num_labels)
            .map(|_| std::array::from_fn(|_| random_direction(&mut rng, d, spec.separation)))
            .collect();
        let mut scenes: Vec<Vec<PerModality>> = (0..spec.num_labels)
            .map(|_| {
                (0..spec.scenes_per_label)
                    .map(|_| std::array::from_fn(|_| random_direction(&mut rng, d, spec.scene_spread)))
                    .collect()
            })
            .collect();
        for &(a, b) in &spec.confusion_pairs {
            let gap = random_direction(&mut rng, d, spec.pair_text_gap * spec.separation);
            let t = Modality::Text.index();
            centroids[b][t] = centroids[a][t].iter().zip(&gap).map(|(x, g)| x + g).collect();
            let shared: Vec<Vec<f64>> = scenes[a].iter().map(|s| s[t].clone()).collect();
            for (s, v) in scenes[b].iter_mut().zip(shared) {
                s[t] = v;
            }
        }
        Self { centroids, scenes }
    }

    fn draw(
        &self,
        spec: &SynthSpec,
        rng: &mut ChaCha8Rng,
        label: usize,
        scenes: &std::ops::Range<usize>,
    ) -> PerModality {
        let scene = rng.random_range(scenes.clone());
        std::array::from_fn(|m| {
            let c = &self.centroids[label][m];
            let o = &self.scenes[label][scene][m];
            c.iter()
                .zip(o)
                .map(|(c, o)| {
                    let z: f64 = rng.sample(StandardNormal);
                    c + o + spec.noise[m] * z
                })
                .collect()
        })
    }
}

/// Draws train/test samples and the evidence corpus. Pure in `spec`.
pub fn generate_dataset(spec: &SynthSpec) -> Result<Dataset> {
    spec.validate()?;
    let gen = Generator::new(spec);
    let (train_scenes, test_scenes) = spec.scene_split();
    let all_scenes = 0..spec.scenes_per_label;
    let mut rng = seeding::stream(spec.seed, &[0xda7a]);
    let mut next_id = 0u64;
    let mut split = |rng: &mut ChaCha8Rng, per_label: usize, scenes: &std::ops::Range<usize>| {
        let mut out = Vec::with_capacity(per_label * spec.num_labels);
        for label in 0..spec.num_labels {
            for _ in 0..per_label {
                out.push(ModalSample {
                    id: next_id,
                    label,
                    present: [true; 3],
                    x: gen.draw(spec, rng, label, scenes),
                });
                next_id += 1;
            }
        }
        out
    };
    let train = split(&mut rng, spec.train_per_label, &train_scenes);
    let test = split(&mut rng, spec.test_per_label, &test_scenes);
    let corpus = (0..spec.corpus_size)
        .map(|i| {
            let label = i % spec.num_labels;
            EvidenceItem {
                id: i as u64,
                label,
                e: gen.draw(spec, &mut rng, label, &all_scenes),
            }
        })
        .collect();
    Ok(Dataset { train, test, corpus })
}

/// Marks a modality missing and zeroes its vector.
pub fn apply_missing(sample: &ModalSample, drop: Modality) -> Result<ModalSample> {
    let others_present = sample.present_modalities().any(|m| m != drop);
    if !others_present {
        return Err(EnvError::LastModality(drop));
    }
    let mut out = sample.clone();
    out.present[drop.index()] = false;
    out.x[drop.index()].iter_mut().for_each(|x| *x = 0.0);
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum F1Mode {
    Macro,
    Weighted,
}

/// Per-class F1 aggregated over the classes that have gold instances.
///
/// Macro mode averages those classes uniformly, weighted mode by gold
/// support. A class with gold instances but no correct predictions
/// contributes 0.
pub fn score_f1(pred: &[usize], gold: &[usize], mode: F1Mode) -> Result<f64> {
    if pred.len() != gold.len() {
        return Err(EnvError::Score(format!(
            "length mismatch: {} predictions vs {} gold labels",
            pred.len(),
            gold.len()
        )));
    }
    if gold.is_empty() {
        return Err(EnvError::Score("empty input".into()));
    }
    let n_classes = pred.iter().chain(gold).copied().max().unwrap_or(0) + 1;
    let mut tp = vec![0usize; n_classes];
    let mut fp = vec![0usize; n_classes];
    let mut support = vec![0usize; n_classes];
    for (&p, &g) in pred.iter().zip(gold) {
        support[g] += 1;
        if p == g {
            tp[p] += 1;
        } else {
            fp[p] += 1;
        }
    }
    let mut total = 0.0;
    let mut weight = 0.0;
    for c in 0..n_classes {
        if support[c] == 0 {
            continue;
        }
        let fn_ = support[c] - tp[c];
        let f1 = 2.0 * tp[c] as f64 / (2 * tp[c] + fp[c] + fn_) as f64;
        let w = match mode {
            F1Mode::Macro => 1.0,
            F1Mode::Weighted => support[c] as f64,
        };
        total += w * f1;
        weight += w;
    }
    Ok(total / weight)
}

#[derive(Serialize, Deserialize)]
struct SampleRecord {
    id: u64,
    label: usize,
    present: [bool; 3],
    x_t: Vec<f64>,
    x_v: Vec<f64>,
    x_a: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct CorpusRecord {
    id: u64,
    label: usize,
    x_t: Vec<f64>,
    x_v: Vec<f64>,
    x_a: Vec<f64>,
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> EnvError + '_ {
    move |source| EnvError::Io {
        path: path.display().to_string(),
        source,
    }
}

fn write_lines<T: Serialize>(path: &Path, records: impl Iterator<Item = T>) -> Result<()> {
    let file = File::create(path).map_err(io_err(path))?;
    let mut w = BufWriter::new(file);
    for r in records {
        let line = serde_json::to_string(&r).expect("records serialize");
        writeln!(w, "{line}").map_err(io_err(path))?;
    }
    w.flush().map_err(io_err(path))
}

fn read_lines<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>> {
    let file = File::open(path).map_err(io_err(path))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(io_err(path))?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| EnvError::Parse {
            path: path.display().to_string(),
            line: i + 1,
            msg: e.to_string(),
        })?);
    }
    Ok(out)
}

pub fn write_samples(path: &Path, samples: &[ModalSample]) -> Result<()> {
    write_lines(
        path,
        samples.iter().map(|s| SampleRecord {
            id: s.id,
            label: s.label,
            present: s.present,
            x_t: s.x[0].clone(),
            x_v: s.x[1].clone(),
            x_a: s.x[2].clone(),
        }),
    )
}

pub fn read_samples(path: &Path) -> Result<Vec<ModalSample>> {
    Ok(read_lines::<SampleRecord>(path)?
        .into_iter()
        .map(|r| ModalSample {
            id: r.id,
            label: r.label,
            present: r.present,
            x: [r.x_t, r.x_v, r.x_a],
        })
        .collect())
}

pub fn write_corpus(path: &Path, corpus: &[EvidenceItem]) -> Result<()> {
    write_lines(
        path,
        corpus.iter().map(|e| CorpusRecord {
            id: e.id,
            label: e.label,
            x_t: e.e[0].clone(),
            x_v: e.e[1].clone(),
            x_a: e.e[2].clone(),
        }),
    )
}

pub fn read_corpus(path: &Path) -> Result<Vec<EvidenceItem>> {
    Ok(read_lines::<CorpusRecord>(path)?
        .into_iter()
        .map(|r| EvidenceItem {
            id: r.id,
            label: r.label,
            e: [r.x_t, r.x_v, r.x_a],
        })
        .collect())
}
