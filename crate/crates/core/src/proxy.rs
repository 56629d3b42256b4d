//! Proxy benefit scores and positive/negative assignment.
//!
//! The benefit of example `i` as a demonstration for anchor `x` is
//! approximated by the similarity of their target states (the pooled states
//! of `[x_i; y_i]` and `[x; y]`, or of the queries alone). For each anchor the
//! `n_pos` best-scoring examples become positives and `n_neg` of the rest
//! become negatives.

use std::cmp::Ordering;
use std::collections::HashSet;
use std::path::Path;

use rand::seq::index;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::container::{ContainerHeader, ExampleRecord, HiddenStateContainer, Pooling, TargetMode};
use crate::error::{Error, Result};
use crate::nn::{self, Similarity};
use crate::seed;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NegativeSampling {
    /// Uniform without replacement from everything below the positives.
    #[default]
    Uniform,
    /// Ranks `n_pos + 1 ..= n_pos + n_neg`.
    Hard,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProxyConfig {
    pub target_mode: TargetMode,
    pub target_pooling: Pooling,
    /// Kept-layer id of the target states; `None` picks the middle kept layer.
    pub target_layer: Option<u16>,
    pub similarity: Similarity,
    pub n_pos: usize,
    pub n_neg: usize,
    pub negative_sampling: NegativeSampling,
    pub seed: u64,
    /// Permit corpora smaller than `n_pos + n_neg + 1`; the label set is then
    /// flagged as corpus-limited.
    pub allow_corpus_limited: bool,
}

impl Default for ProxyConfig {
    fn default() -> Self {
        Self {
            target_mode: TargetMode::ProblemPlusQuery,
            target_pooling: Pooling::Eos,
            target_layer: None,
            similarity: Similarity::Dot,
            n_pos: 40,
            n_neg: 100,
            negative_sampling: NegativeSampling::Uniform,
            seed: 0,
            allow_corpus_limited: false,
        }
    }
}

impl ProxyConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_pos == 0 {
            return Err(Error::Config("n_pos must be at least 1".into()));
        }
        if self.n_neg == 0 {
            return Err(Error::Config("n_neg must be at least 1".into()));
        }
        Ok(())
    }

    /// Row index of the target layer within `header`'s kept layers.
    pub fn layer_index(&self, header: &ContainerHeader) -> Result<usize> {
        match self.target_layer {
            None => Ok((header.n_layers - 1) / 2),
            Some(id) => header.layer_index(id).ok_or_else(|| {
                Error::Config(format!(
                    "target layer {id} is not among kept layers {:?}",
                    header.layer_ids
                ))
            }),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScoredId {
    pub id: String,
    pub score: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AnchorLabels {
    pub id: String,
    /// Descending proxy score, ties by ascending id.
    pub positives: Vec<ScoredId>,
    pub negatives: Vec<ScoredId>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LabelSet {
    pub config: ProxyConfig,
    pub seed: u64,
    /// Some anchors received fewer than `n_pos`/`n_neg` examples.
    pub corpus_limited: bool,
    pub anchors: Vec<AnchorLabels>,
}

impl LabelSet {
    /// Checks the structural invariants every label file must satisfy.
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Parse(msg));
        if self.anchors.is_empty() {
            return bad("label set has no anchors".into());
        }
        if self.seed != self.config.seed {
            return bad("top-level seed differs from config seed".into());
        }
        let mut anchors = HashSet::new();
        for a in &self.anchors {
            if !anchors.insert(a.id.as_str()) {
                return bad(format!("anchor {:?} listed twice", a.id));
            }
            let pos: HashSet<&str> = a.positives.iter().map(|s| s.id.as_str()).collect();
            let neg: HashSet<&str> = a.negatives.iter().map(|s| s.id.as_str()).collect();
            if pos.len() != a.positives.len() || neg.len() != a.negatives.len() {
                return bad(format!("anchor {:?} repeats an example", a.id));
            }
            if pos.contains(a.id.as_str()) || neg.contains(a.id.as_str()) {
                return bad(format!("anchor {:?} labels itself", a.id));
            }
            if !pos.is_disjoint(&neg) {
                return bad(format!("anchor {:?} has overlapping positives and negatives", a.id));
            }
            if a.positives.is_empty() {
                return bad(format!("anchor {:?} has no positives", a.id));
            }
            let full = a.positives.len() == self.config.n_pos && a.negatives.len() == self.config.n_neg;
            let within = a.positives.len() <= self.config.n_pos && a.negatives.len() <= self.config.n_neg;
            if !(full || (self.corpus_limited && within)) {
                return bad(format!(
                    "anchor {:?} has {} positives and {} negatives, config asks for {} and {}",
                    a.id,
                    a.positives.len(),
                    a.negatives.len(),
                    self.config.n_pos,
                    self.config.n_neg
                ));
            }
            if a.positives.iter().chain(&a.negatives).any(|s| !s.score.is_finite()) {
                return bad(format!("anchor {:?} has a non-finite score", a.id));
            }
        }
        Ok(())
    }

    pub fn anchor(&self, id: &str) -> Option<&AnchorLabels> {
        self.anchors.iter().find(|a| a.id == id)
    }
}

/// Target vectors of one container at the configured layer/pooling/mode.
pub(crate) struct ProxyTargets<'a> {
    pub ids: Vec<&'a str>,
    rows: Vec<&'a [f32]>,
    norms: Vec<f64>,
    similarity: Similarity,
}

impl<'a> ProxyTargets<'a> {
    pub fn new(container: &'a HiddenStateContainer, config: &ProxyConfig) -> Result<Self> {
        let layer = config.layer_index(container.header())?;
        Self::from_records(container.records(), layer, config)
    }

    pub fn from_records(records: &'a [ExampleRecord], layer: usize, config: &ProxyConfig) -> Result<Self> {
        let rows = records
            .iter()
            .map(|r| Ok(r.target(config.target_mode, config.target_pooling)?.row(layer)))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            ids: records.iter().map(|r| r.id.as_str()).collect(),
            norms: rows.iter().map(|r| nn::norm(r)).collect(),
            rows,
            similarity: config.similarity,
        })
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    /// Proxy score between row `i` of `self` and row `j` of `other`.
    #[inline]
    pub fn score(&self, i: usize, other: &ProxyTargets<'_>, j: usize) -> f64 {
        let d = nn::dot(self.rows[i], other.rows[j]);
        self.similarity.from_dot(d, self.norms[i], other.norms[j])
    }
}

/// Descending score, then ascending id.
pub(crate) fn rank_order(a: (&str, f64), b: (&str, f64)) -> Ordering {
    b.1.partial_cmp(&a.1)
        .unwrap_or(Ordering::Equal)
        .then_with(|| a.0.cmp(b.0))
}

/// Scores every candidate against `anchor`, best first.
pub fn compute_proxy_scores(
    anchor: &ExampleRecord,
    candidates: &[ExampleRecord],
    header: &ContainerHeader,
    config: &ProxyConfig,
) -> Result<Vec<ScoredId>> {
    let layer = config.layer_index(header)?;
    let anchor_t = ProxyTargets::from_records(std::slice::from_ref(anchor), layer, config)?;
    let cands = ProxyTargets::from_records(candidates, layer, config)?;
    let mut scored: Vec<ScoredId> = (0..cands.len())
        .map(|j| ScoredId {
            id: cands.ids[j].to_string(),
            score: anchor_t.score(0, &cands, j),
        })
        .collect();
    scored.sort_by(|a, b| rank_order((&a.id, a.score), (&b.id, b.score)));
    Ok(scored)
}

/// Assigns positives and negatives to every record of `corpus`.
pub fn build_label_set(corpus: &HiddenStateContainer, config: &ProxyConfig) -> Result<LabelSet> {
    config.validate()?;
    if !corpus.header().has_target(config.target_mode) {
        return Err(Error::Validation(format!(
            "container has no {} target states",
            config.target_mode
        )));
    }
    let n = corpus.len();
    let needed = config.n_pos + config.n_neg;
    let limited = n - 1 < needed;
    if limited && !(config.allow_corpus_limited && n >= 2) {
        return Err(Error::Validation(format!(
            "corpus of {n} records is too small for n_pos={} and n_neg={}",
            config.n_pos, config.n_neg
        )));
    }
    let targets = ProxyTargets::new(corpus, config)?;

    let anchors = (0..n)
        .into_par_iter()
        .map(|a| {
            let mut ranked: Vec<(usize, f64)> = (0..n)
                .filter(|&j| j != a)
                .map(|j| (j, targets.score(a, &targets, j)))
                .collect();
            ranked.sort_by(|x, y| rank_order((targets.ids[x.0], x.1), (targets.ids[y.0], y.1)));
            let n_pos = config.n_pos.min(ranked.len());
            let rest = &ranked[n_pos..];
            let n_neg = config.n_neg.min(rest.len());
            let negatives: Vec<(usize, f64)> = match config.negative_sampling {
                NegativeSampling::Hard => rest[..n_neg].to_vec(),
                NegativeSampling::Uniform => {
                    let mut rng = seed::rng(config.seed, &[seed::LABEL, targets.ids[a]]);
                    let mut picks = index::sample(&mut rng, rest.len(), n_neg).into_vec();
                    picks.sort_unstable();
                    picks.into_iter().map(|i| rest[i]).collect()
                }
            };
            let to_scored = |(j, score): (usize, f64)| ScoredId {
                id: targets.ids[j].to_string(),
                score,
            };
            AnchorLabels {
                id: targets.ids[a].to_string(),
                positives: ranked[..n_pos].iter().copied().map(to_scored).collect(),
                negatives: negatives.into_iter().map(to_scored).collect(),
            }
        })
        .collect();

    Ok(LabelSet {
        config: config.clone(),
        seed: config.seed,
        corpus_limited: limited,
        anchors,
    })
}

pub fn label_set_to_string(labels: &LabelSet) -> Result<String> {
    let mut s = serde_json::to_string_pretty(labels)
        .map_err(|e| Error::Format(format!("cannot serialize label set: {e}")))?;
    s.push('\n');
    Ok(s)
}

pub fn label_set_from_str(text: &str) -> Result<LabelSet> {
    let labels: LabelSet =
        serde_json::from_str(text).map_err(|e| Error::Parse(format!("label file: {e}")))?;
    labels.validate()?;
    Ok(labels)
}

pub fn write_label_set(labels: &LabelSet, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, label_set_to_string(labels)?).map_err(|e| Error::io(path, e))
}

pub fn read_label_set(path: impl AsRef<Path>) -> Result<LabelSet> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    label_set_from_str(&text)
}
