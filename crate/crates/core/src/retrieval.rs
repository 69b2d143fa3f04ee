//! Exact cosine nearest-neighbour search over the evidence corpus.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::envsynth::{EvidenceItem, ModalSample, Modality};
use crate::numerics::{all_finite, dot, l2_norm};

#[derive(Debug, Error, PartialEq)]
pub enum RetrievalError {
    #[error("evidence corpus is empty")]
    EmptyCorpus,
    #[error("item {id} has a zero-norm {modality:?} embedding")]
    ZeroNorm { id: u64, modality: Modality },
    #[error("item {id} has {found} dims in {modality:?}, expected {expected}")]
    RaggedCorpus {
        id: u64,
        modality: Modality,
        expected: usize,
        found: usize,
    },
    #[error("query has {found} dims, index expects {expected}")]
    DimMismatch { expected: usize, found: usize },
    #[error("k must be >= 1")]
    ZeroK,
    #[error("{0} query is not finite")]
    NonFiniteQuery(QueryKind),
    #[error("sample {0} has no present modality")]
    NoModality(u64),
}

pub type Result<T> = std::result::Result<T, RetrievalError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum QueryKind {
    Sup,
    Conf,
    Count,
}

impl QueryKind {
    pub const ALL: [QueryKind; 3] = [QueryKind::Sup, QueryKind::Conf, QueryKind::Count];

    pub fn index(self) -> usize {
        self as usize
    }
}

impl std::fmt::Display for QueryKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            QueryKind::Sup => "supportive",
            QueryKind::Conf => "confusing",
            QueryKind::Count => "countering",
        })
    }
}

/// One ranked retrieval result. `index` points into [`EvidenceIndex::items`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Hit {
    pub index: usize,
    pub id: u64,
    pub label: usize,
    pub sim: f64,
}

/// Supportive, confusing and countering probes in corpus text space.
#[derive(Debug, Clone, PartialEq)]
pub struct QuerySet {
    pub q: [Vec<f64>; 3],
}

impl QuerySet {
    pub fn new(q_sup: Vec<f64>, q_conf: Vec<f64>, q_count: Vec<f64>) -> Self {
        Self {
            q: [q_sup, q_conf, q_count],
        }
    }

    /// All three probes equal to `q`.
    pub fn uniform(q: Vec<f64>) -> Self {
        Self {
            q: [q.clone(), q.clone(), q],
        }
    }

    pub fn get(&self, kind: QueryKind) -> &[f64] {
        &self.q[kind.index()]
    }

    pub fn validate(&self, dim: usize) -> Result<()> {
        for kind in QueryKind::ALL {
            let q = self.get(kind);
            if q.len() != dim {
                return Err(RetrievalError::DimMismatch {
                    expected: dim,
                    found: q.len(),
                });
            }
            if !all_finite(q) {
                return Err(RetrievalError::NonFiniteQuery(kind));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct RetrievalResult {
    /// Indexed by [`QueryKind::index`].
    pub cognitive: [Vec<Hit>; 3],
    /// Indexed by [`Modality::index`].
    pub perceptual: [Vec<Hit>; 3],
    /// Modalities whose perceptual list came from a cross-modal proxy query.
    pub proxied: [bool; 3],
}

impl RetrievalResult {
    pub fn cognitive(&self, kind: QueryKind) -> &[Hit] {
        &self.cognitive[kind.index()]
    }

    pub fn perceptual(&self, m: Modality) -> &[Hit] {
        &self.perceptual[m.index()]
    }
}

#[derive(Debug, Clone)]
pub struct EvidenceIndex {
    items: Vec<EvidenceItem>,
    /// Row-major unit-norm tables, one per modality.
    tables: [Vec<f64>; 3],
    dim: usize,
    num_labels: usize,
    text_centroids: Vec<Vec<f64>>,
}

impl EvidenceIndex {
    pub fn build(corpus: Vec<EvidenceItem>) -> Result<Self> {
        let first = corpus.first().ok_or(RetrievalError::EmptyCorpus)?;
        let dim = first.e[0].len();
        let mut tables: [Vec<f64>; 3] = Default::default();
        for item in &corpus {
            for m in Modality::ALL {
                let v = item.get(m);
                if v.len() != dim {
                    return Err(RetrievalError::RaggedCorpus {
                        id: item.id,
                        modality: m,
                        expected: dim,
                        found: v.len(),
                    });
                }
                let n = l2_norm(v);
                if !(n > 0.0 && n.is_finite()) {
                    return Err(RetrievalError::ZeroNorm {
                        id: item.id,
                        modality: m,
                    });
                }
                tables[m.index()].extend(v.iter().map(|x| x / n));
            }
        }
        let num_labels = corpus.iter().map(|i| i.label).max().unwrap_or(0) + 1;
        let mut sums = vec![vec![0.0; dim]; num_labels];
        let mut counts = vec![0usize; num_labels];
        for item in &corpus {
            counts[item.label] += 1;
            for (s, x) in sums[item.label].iter_mut().zip(item.get(Modality::Text)) {
                *s += x;
            }
        }
        let text_centroids = sums
            .into_iter()
            .zip(&counts)
            .map(|(s, &c)| s.into_iter().map(|x| x / c.max(1) as f64).collect())
            .collect();
        Ok(Self {
            items: corpus,
            tables,
            dim,
            num_labels,
            text_centroids,
        })
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn num_labels(&self) -> usize {
        self.num_labels
    }

    pub fn items(&self) -> &[EvidenceItem] {
        &self.items
    }

    pub fn item(&self, hit: &Hit) -> &EvidenceItem {
        &self.items[hit.index]
    }

    /// Unit-norm stored embedding of row `i`.
    pub fn row(&self, i: usize, m: Modality) -> &[f64] {
        &self.tables[m.index()][i * self.dim..(i + 1) * self.dim]
    }

    /// Mean raw text embedding of the corpus items carrying `label`.
    pub fn label_text_centroid(&self, label: usize) -> &[f64] {
        &self.text_centroids[label]
    }

    /// Cosine similarity of `query` against every row, in row order. A
    /// zero query scores 0 everywhere.
    pub fn similarities(&self, query: &[f64], m: Modality) -> Result<Vec<f64>> {
        if query.len() != self.dim {
            return Err(RetrievalError::DimMismatch {
                expected: self.dim,
                found: query.len(),
            });
        }
        let n = l2_norm(query);
        let inv = if n > 0.0 { 1.0 / n } else { 0.0 };
        Ok((0..self.len())
            .map(|i| dot(self.row(i, m), query) * inv)
            .collect())
    }

    /// Top `k` rows by cosine similarity, ties broken by ascending item id.
    pub fn knn(&self, query: &[f64], m: Modality, k: usize) -> Result<Vec<Hit>> {
        if k == 0 {
            return Err(RetrievalError::ZeroK);
        }
        let sims = self.similarities(query, m)?;
        let mut hits: Vec<Hit> = sims
            .into_iter()
            .enumerate()
            .map(|(index, sim)| Hit {
                index,
                id: self.items[index].id,
                label: self.items[index].label,
                sim,
            })
            .collect();
        let order = |a: &Hit, b: &Hit| b.sim.total_cmp(&a.sim).then(a.id.cmp(&b.id));
        let k = k.min(hits.len());
        if k < hits.len() {
            hits.select_nth_unstable_by(k - 1, order);
            hits.truncate(k);
        }
        hits.sort_by(order);
        Ok(hits)
    }

    /// Perceptual lists for every modality. Present modalities query with
    /// the sample's own vector. A missing modality queries its table with
    /// the mean of that modality's embeddings over the top-1 hits of the
    /// present modalities.
    pub fn retrieve_perceptual(
        &self,
        sample: &ModalSample,
        k_perc: usize,
    ) -> Result<([Vec<Hit>; 3], [bool; 3])> {
        let mut lists: [Vec<Hit>; 3] = Default::default();
        let mut proxied = [false; 3];
        for m in sample.present_modalities() {
            lists[m.index()] = self.knn(sample.get(m), m, k_perc)?;
        }
        let anchors: Vec<usize> = sample
            .present_modalities()
            .filter_map(|m| lists[m.index()].first().map(|h| h.index))
            .collect();
        if anchors.is_empty() {
            return Err(RetrievalError::NoModality(sample.id));
        }
        for m in Modality::ALL {
            if sample.is_present(m) {
                continue;
            }
            let mut q = vec![0.0; self.dim];
            for &a in &anchors {
                for (qi, x) in q.iter_mut().zip(self.items[a].get(m)) {
                    *qi += x / anchors.len() as f64;
                }
            }
            lists[m.index()] = self.knn(&q, m, k_perc)?;
            proxied[m.index()] = true;
        }
        Ok((lists, proxied))
    }

    /// Cognitive retrieval in text space plus per-modality perceptual
    /// retrieval from the raw input.
    pub fn retrieve_dual(
        &self,
        sample: &ModalSample,
        queries: &QuerySet,
        k_cog: usize,
        k_perc: usize,
    ) -> Result<RetrievalResult> {
        queries.validate(self.dim)?;
        let (perceptual, proxied) = self.retrieve_perceptual(sample, k_perc)?;
        let cognitive = self.retrieve_cognitive(queries, k_cog)?;
        Ok(RetrievalResult {
            cognitive,
            perceptual,
            proxied,
        })
    }

    pub fn retrieve_cognitive(&self, queries: &QuerySet, k_cog: usize) -> Result<[Vec<Hit>; 3]> {
        queries.validate(self.dim)?;
        let mut out: [Vec<Hit>; 3] = Default::default();
        for kind in QueryKind::ALL {
            out[kind.index()] = self.knn(queries.get(kind), Modality::Text, k_cog)?;
        }
        Ok(out)
    }
}

/// Index construction as a free function.
pub fn build_index(corpus: Vec<EvidenceItem>) -> Result<EvidenceIndex> {
    EvidenceIndex::build(corpus)
}
