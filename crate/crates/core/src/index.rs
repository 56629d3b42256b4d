//! Exact top-k demonstration retrieval.
//!
//! File layout (`"DTRI"`, version 1, little-endian):
//!
//! ```text
//! magic u8*4 | version u32 | similarity u8 | rows u64 | dim u32 | model digest u8*32
//! rows * (id: u32 len + UTF-8, schema_id: u32 len + UTF-8)
//! rows * dim f32 embeddings, row-major
//! ```

use std::collections::HashSet;
use std::fmt;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::codec::{read_file, ByteReader, ByteWriter};
use crate::container::HiddenStateContainer;
use crate::error::{Error, Result};
use crate::model::RetrieverModel;
use crate::nn::{self, Similarity};
use crate::proxy::rank_order;

pub const INDEX_MAGIC: [u8; 4] = *b"DTRI";
pub const INDEX_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct RetrievalIndex {
    dim: usize,
    /// `[rows][dim]`, row-major.
    embeddings: Vec<f32>,
    /// Row norms, recomputed on load.
    norms: Vec<f64>,
    ids: Vec<String>,
    schema_ids: Vec<String>,
    similarity: Similarity,
    model_digest: [u8; 32],
}

/// Candidate restrictions applied before ranking. All parts must hold.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Filter {
    pub exclude_schemas: Vec<String>,
    /// When set, only these schemas are eligible.
    pub only_schemas: Option<Vec<String>>,
    pub exclude_ids: Vec<String>,
}

impl Filter {
    pub fn none() -> Self {
        Self::default()
    }

    /// Out-of-domain: never return a demonstration from the query's schema.
    pub fn out_of_domain(schema_id: &str) -> Self {
        Self {
            exclude_schemas: vec![schema_id.to_string()],
            ..Self::default()
        }
    }

    /// In-domain: only the query's schema, minus the query itself.
    pub fn in_domain(schema_id: &str, query_id: &str) -> Self {
        Self {
            only_schemas: Some(vec![schema_id.to_string()]),
            exclude_ids: vec![query_id.to_string()],
            ..Self::default()
        }
    }

    pub fn exclude_id(id: &str) -> Self {
        Self {
            exclude_ids: vec![id.to_string()],
            ..Self::default()
        }
    }

    pub fn admits(&self, id: &str, schema: &str) -> bool {
        !self.exclude_ids.iter().any(|x| x == id)
            && !self.exclude_schemas.iter().any(|s| s == schema)
            && self
                .only_schemas
                .as_ref()
                .is_none_or(|only| only.iter().any(|s| s == schema))
    }

    fn describe(&self) -> String {
        let mut parts = Vec::new();
        if !self.exclude_schemas.is_empty() {
            parts.push(format!("exclude_schema({})", self.exclude_schemas.join(",")));
        }
        if let Some(only) = &self.only_schemas {
            parts.push(format!("only_schema({})", only.join(",")));
        }
        if !self.exclude_ids.is_empty() {
            parts.push(format!("exclude_id({})", self.exclude_ids.join(",")));
        }
        if parts.is_empty() {
            "none".into()
        } else {
            parts.join("+")
        }
    }
}

/// How to derive a per-query [`Filter`] from the query's own id and schema.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FilterMode {
    None,
    #[default]
    Ood,
    InDomain,
    ExcludeSelf,
}

impl FilterMode {
    pub fn for_query(self, query_id: &str, schema_id: &str) -> Filter {
        match self {
            FilterMode::None => Filter::none(),
            FilterMode::Ood => Filter::out_of_domain(schema_id),
            FilterMode::InDomain => Filter::in_domain(schema_id, query_id),
            FilterMode::ExcludeSelf => Filter::exclude_id(query_id),
        }
    }
}

impl fmt::Display for FilterMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            FilterMode::None => "none",
            FilterMode::Ood => "ood",
            FilterMode::InDomain => "in_domain",
            FilterMode::ExcludeSelf => "exclude_self",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Hit {
    pub id: String,
    pub score: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct RetrievalResult {
    pub query_id: Option<String>,
    /// Non-increasing score, ties by ascending id.
    pub hits: Vec<Hit>,
    pub filter: String,
}

/// Embeds every record of `container` with `model`.
pub fn build_index(
    model: &RetrieverModel<f32>,
    container: &HiddenStateContainer,
    similarity: Similarity,
) -> Result<RetrievalIndex> {
    model.config().check_container(container.header())?;
    let rows = model.embed_batch(container.records())?;
    RetrievalIndex::from_rows(
        rows,
        container.records().iter().map(|r| r.id.clone()).collect(),
        container.records().iter().map(|r| r.schema_id.clone()).collect(),
        similarity,
        model.config().digest(),
    )
}

impl RetrievalIndex {
    /// Builds an index over precomputed embeddings.
    pub fn from_rows(
        rows: Vec<Vec<f32>>,
        ids: Vec<String>,
        schema_ids: Vec<String>,
        similarity: Similarity,
        model_digest: [u8; 32],
    ) -> Result<Self> {
        if rows.is_empty() {
            return Err(Error::Validation("an index needs at least one row".into()));
        }
        if rows.len() != ids.len() || rows.len() != schema_ids.len() {
            return Err(Error::Shape("rows, ids and schema ids differ in length".into()));
        }
        let dim = rows[0].len();
        if dim == 0 || rows.iter().any(|r| r.len() != dim) {
            return Err(Error::Shape("index rows must share one positive length".into()));
        }
        if rows.iter().any(|r| !nn::all_finite(r)) {
            return Err(Error::Validation("index rows contain non-finite values".into()));
        }
        let mut seen = HashSet::new();
        if let Some(dup) = ids.iter().find(|id| !seen.insert(id.as_str())) {
            return Err(Error::Validation(format!("duplicate index id {dup:?}")));
        }
        let norms = rows.iter().map(|r| nn::norm(r)).collect();
        Ok(Self {
            dim,
            embeddings: rows.concat(),
            norms,
            ids,
            schema_ids,
            similarity,
            model_digest,
        })
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn similarity(&self) -> Similarity {
        self.similarity
    }

    pub fn model_digest(&self) -> &[u8; 32] {
        &self.model_digest
    }

    pub fn ids(&self) -> &[String] {
        &self.ids
    }

    pub fn schema_ids(&self) -> &[String] {
        &self.schema_ids
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.embeddings[i * self.dim..(i + 1) * self.dim]
    }

    /// Exhaustive top-k under `filter`. Fewer than `k` hits are returned when
    /// fewer candidates pass.
    pub fn retrieve(&self, query: &[f32], k: usize, filter: &Filter) -> Result<RetrievalResult> {
        if k == 0 {
            return Err(Error::Validation("k must be at least 1".into()));
        }
        if query.len() != self.dim {
            return Err(Error::Shape(format!(
                "query has {} entries, index rows have {}",
                query.len(),
                self.dim
            )));
        }
        if !nn::all_finite(query) {
            return Err(Error::Validation("query embedding is not finite".into()));
        }
        // Same arithmetic as `Similarity::score`, so scores are reproducible
        // outside the index.
        let q_norm = nn::norm(query);
        let mut scored: Vec<(usize, f64)> = (0..self.len())
            .filter(|&i| filter.admits(&self.ids[i], &self.schema_ids[i]))
            .map(|i| {
                let d = nn::dot(query, self.row(i));
                (i, self.similarity.from_dot(d, q_norm, self.norms[i]))
            })
            .collect();
        if scored.is_empty() {
            return Err(Error::NoCandidates(filter.describe()));
        }
        let cmp = |a: &(usize, f64), b: &(usize, f64)| {
            rank_order((&self.ids[a.0], a.1), (&self.ids[b.0], b.1))
        };
        if k < scored.len() {
            scored.select_nth_unstable_by(k - 1, cmp);
            scored.truncate(k);
        }
        scored.sort_by(cmp);
        Ok(RetrievalResult {
            query_id: None,
            hits: scored
                .into_iter()
                .map(|(i, score)| Hit {
                    id: self.ids[i].clone(),
                    score,
                })
                .collect(),
            filter: filter.describe(),
        })
    }

    /// [`retrieve`](Self::retrieve) per query, in input order.
    pub fn retrieve_batch(
        &self,
        queries: &[Vec<f32>],
        k: usize,
        filters: &[Filter],
    ) -> Result<Vec<RetrievalResult>> {
        if queries.len() != filters.len() {
            return Err(Error::Shape("one filter per query is required".into()));
        }
        queries
            .par_iter()
            .zip(filters.par_iter())
            .map(|(q, f)| self.retrieve(q, k, f))
            .collect()
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut w = ByteWriter::new();
        w.bytes(&INDEX_MAGIC);
        w.u32(INDEX_VERSION);
        w.u8(self.similarity.tag());
        w.u64(self.len() as u64);
        w.u32(u32::try_from(self.dim).map_err(|_| Error::Format("dimension exceeds u32".into()))?);
        w.bytes(&self.model_digest);
        for (id, schema) in self.ids.iter().zip(&self.schema_ids) {
            w.str(id)?;
            w.str(schema)?;
        }
        w.f32s(&self.embeddings);
        Ok(w.into_inner())
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = ByteReader::new(bytes, "index");
        r.expect_magic(&INDEX_MAGIC)?;
        r.expect_version(INDEX_VERSION)?;
        let similarity = Similarity::from_tag(r.u8()?)?;
        let rows = r.u64()?;
        let dim = r.u32()? as usize;
        let model_digest: [u8; 32] = r.take(32)?.try_into().unwrap();
        // each row needs at least 8 bytes of string prefixes
        let cap = (bytes.len() as u64 / 8).min(rows) as usize;
        let mut ids = Vec::with_capacity(cap);
        let mut schema_ids = Vec::with_capacity(cap);
        for _ in 0..rows {
            ids.push(r.str()?);
            schema_ids.push(r.str()?);
        }
        let count = (rows as usize)
            .checked_mul(dim)
            .ok_or_else(|| Error::Corruption("index shape overflows".into()))?;
        let embeddings = r.f32s(count)?;
        r.finish()?;
        if rows == 0 || dim == 0 {
            return Err(Error::Corruption("index declares an empty shape".into()));
        }
        if !nn::all_finite(&embeddings) {
            return Err(Error::Validation("index contains non-finite values".into()));
        }
        let mut seen = HashSet::new();
        if let Some(dup) = ids.iter().find(|id| !seen.insert(id.as_str())) {
            return Err(Error::Validation(format!("duplicate index id {dup:?}")));
        }
        Ok(Self {
            dim,
            norms: embeddings.chunks(dim).map(nn::norm).collect(),
            embeddings,
            ids,
            schema_ids,
            similarity,
            model_digest,
        })
    }
}

pub fn save_index(index: &RetrievalIndex, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, index.to_bytes()?).map_err(|e| Error::io(path, e))
}

pub fn load_index(path: impl AsRef<Path>) -> Result<RetrievalIndex> {
    RetrievalIndex::from_bytes(&read_file(path.as_ref())?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn index(rows: Vec<Vec<f32>>, schemas: &[&str], sim: Similarity) -> RetrievalIndex {
        let ids = (0..rows.len()).map(|i| format!("c{i}")).collect();
        RetrievalIndex::from_rows(rows, ids, schemas.iter().map(|s| s.to_string()).collect(), sim, [0; 32])
            .unwrap()
    }

    #[test]
    fn orthogonal_pair_dot() {
        let idx = index(vec![vec![1.0, 0.0], vec![0.0, 1.0]], &["a", "b"], Similarity::Dot);
        let r = idx.retrieve(&[1.0, 0.0], 1, &Filter::none()).unwrap();
        assert_eq!(r.hits, vec![Hit { id: "c0".into(), score: 1.0 }]);
    }

    #[test]
    fn cosine_is_scale_invariant() {
        let idx = index(vec![vec![1.0, 0.0], vec![1.0, 1.0]], &["a", "b"], Similarity::Cosine);
        let r = idx.retrieve(&[2.0, 0.0], 1, &Filter::none()).unwrap();
        assert_eq!(r.hits[0].id, "c0");
        assert!((r.hits[0].score - 1.0).abs() < 1e-12);
    }

    #[test]
    fn filters_and_errors() {
        let idx = index(
            vec![vec![1.0, 0.0], vec![0.9, 0.1], vec![0.0, 1.0]],
            &["db1", "db2", "db1"],
            Similarity::Dot,
        );
        let q = [1.0, 0.0];
        let ood = idx.retrieve(&q, 3, &Filter::out_of_domain("db1")).unwrap();
        assert_eq!(ood.hits.iter().map(|h| h.id.as_str()).collect::<Vec<_>>(), ["c1"]);
        let id = idx.retrieve(&q, 3, &Filter::in_domain("db1", "c0")).unwrap();
        assert_eq!(id.hits.iter().map(|h| h.id.as_str()).collect::<Vec<_>>(), ["c2"]);
        assert!(matches!(
            idx.retrieve(&q, 1, &Filter::in_domain("db2", "c1")),
            Err(Error::NoCandidates(_))
        ));
        assert!(matches!(idx.retrieve(&q, 0, &Filter::none()), Err(Error::Validation(_))));
        assert!(matches!(idx.retrieve(&[1.0], 1, &Filter::none()), Err(Error::Shape(_))));
    }

    #[test]
    fn ties_break_by_id() {
        let idx = index(vec![vec![1.0], vec![1.0], vec![1.0]], &["a", "a", "a"], Similarity::Dot);
        let r = idx.retrieve(&[1.0], 2, &Filter::none()).unwrap();
        assert_eq!(r.hits.iter().map(|h| h.id.as_str()).collect::<Vec<_>>(), ["c0", "c1"]);
    }

    #[test]
    fn batch_edge_cases() {
        let idx = index(vec![vec![1.0, 0.0], vec![0.0, 1.0]], &["a", "b"], Similarity::Cosine);
        assert!(idx.retrieve_batch(&[], 1, &[]).unwrap().is_empty());
        let q = vec![0.3, 0.7];
        let single = idx.retrieve(&q, 2, &Filter::none()).unwrap();
        assert_eq!(idx.retrieve_batch(&[q], 2, &[Filter::none()]).unwrap(), vec![single]);
    }

    #[test]
    fn bytes_round_trip_and_errors() {
        let idx = index(vec![vec![1.0, 0.5], vec![-0.25, 2.0]], &["a", "b"], Similarity::Dot);
        let bytes = idx.to_bytes().unwrap();
        assert_eq!(RetrievalIndex::from_bytes(&bytes).unwrap(), idx);
        let mut bad = bytes.clone();
        bad[..4].copy_from_slice(b"DTRV");
        assert!(matches!(RetrievalIndex::from_bytes(&bad), Err(Error::UnsupportedFormat(_))));
        assert!(matches!(
            RetrievalIndex::from_bytes(&bytes[..bytes.len() - 1]),
            Err(Error::Corruption(_))
        ));
    }
}
