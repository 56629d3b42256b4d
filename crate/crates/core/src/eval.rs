//! Desk-scale evaluation: per-layer retrieval sweeps, proxy-alignment metrics
//! for trained retrievers, a planted-cluster synthetic generator and
//! hyperparameter sweeps.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;
use std::time::Instant;

use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::container::{
    ExampleRecord, HiddenStateContainer, LayerStates, Pooling, PooledStates, Split, TargetMode,
    TargetStates,
};
use crate::error::{Error, Result};
use crate::index::{build_index, FilterMode, RetrievalIndex};
use crate::model::{init_model, ModelConfig, RetrieverModel};
use crate::nn::{Activation, Similarity};
use crate::proxy::{build_label_set, rank_order, ProxyConfig, ProxyTargets};
use crate::seed;
use crate::train::{train_loop, TrainConfig};

/// Planted cluster of every synthetic example, by id.
pub type ClusterMap = BTreeMap<String, usize>;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SyntheticSpec {
    pub clusters: usize,
    pub train_per_cluster: usize,
    pub dev_queries: usize,
    pub dim: usize,
    pub n_layers: usize,
    /// Kept-layer ids are `0, stride, 2*stride, ...`.
    pub layer_stride: u16,
    /// Row index (not layer id) of the layer carrying cluster signal.
    pub informative_layer: usize,
    /// Norm ratio of cluster center to noise in the informative layer.
    pub snr: f64,
    /// Typical norm of the pure-noise layers (centers have norm about 1).
    pub distractor_scale: f64,
    /// Schema ids are drawn uniformly from this many databases.
    pub schemas: usize,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            clusters: 5,
            train_per_cluster: 40,
            dev_queries: 200,
            dim: 32,
            n_layers: 5,
            layer_stride: 5,
            informative_layer: 2,
            snr: 10.0,
            distractor_scale: 3.0,
            schemas: 8,
            seed: 0,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: &str| Err(Error::Config(format!("synthetic spec: {m}")));
        if self.clusters < 2 {
            return fail("need at least 2 clusters");
        }
        if !(self.snr > 0.0) {
            return fail("snr must be positive");
        }
        if self.train_per_cluster == 0 || self.dev_queries == 0 || self.dim == 0 || self.n_layers == 0 {
            return fail("sizes must be positive");
        }
        if self.informative_layer >= self.n_layers {
            return fail("informative layer index out of range");
        }
        if self.schemas == 0 {
            return fail("need at least one schema");
        }
        if !(self.distractor_scale >= 0.0) {
            return fail("distractor scale must be non-negative");
        }
        if self.layer_stride == 0 || (self.n_layers - 1) * self.layer_stride as usize > u16::MAX as usize {
            return fail("layer ids do not fit in u16");
        }
        Ok(())
    }

    pub fn layer_ids(&self) -> Vec<u16> {
        (0..self.n_layers).map(|i| i as u16 * self.layer_stride).collect()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticData {
    pub train: HiddenStateContainer,
    pub dev: HiddenStateContainer,
    pub clusters: ClusterMap,
}

/// Builds train/dev containers with cluster signal planted in one layer.
///
/// The informative layer holds `center + noise / snr` (both of norm about 1);
/// every other layer is isotropic noise of norm `distractor_scale`. Target
/// states hold a per-cluster target center plus noise, so proxy labels follow
/// the clusters. Examples are assigned to clusters round-robin.
pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<SyntheticData> {
    spec.validate()?;
    let mut rng = seed::rng(spec.seed, &[seed::SYNTH]);
    let d = spec.dim;
    let unit = 1.0 / (d as f64).sqrt();
    let gaussian = |rng: &mut rand_chacha::ChaCha8Rng, scale: f64| -> Vec<f64> {
        (0..d).map(|_| rng.sample::<f64, _>(StandardNormal) * unit * scale).collect()
    };
    let centers: Vec<Vec<f64>> = (0..spec.clusters).map(|_| gaussian(&mut rng, 1.0)).collect();
    let target_centers: Vec<Vec<f64>> = (0..spec.clusters).map(|_| gaussian(&mut rng, 1.0)).collect();
    let noise_scale = if spec.snr.is_infinite() { 0.0 } else { 1.0 / spec.snr };

    let mut clusters = ClusterMap::new();
    let mut make = |prefix: &str, split: Split, count: usize, rng: &mut rand_chacha::ChaCha8Rng| {
        let width = count.to_string().len().max(4);
        (0..count)
            .map(|i| {
                let cluster = i % spec.clusters;
                let id = format!("{prefix}-{i:0width$}");
                clusters.insert(id.clone(), cluster);
                let schema_id = format!("db{:02}", rng.random_range(0..spec.schemas));
                let layer_states = |center: Option<&[f64]>, rng: &mut rand_chacha::ChaCha8Rng| {
                    let mut states = LayerStates::zeros(spec.n_layers, d);
                    for l in 0..spec.n_layers {
                        let row: Vec<f64> = match center {
                            Some(c) => c.iter().zip(gaussian(rng, noise_scale)).map(|(c, n)| c + n).collect(),
                            None if l == spec.informative_layer => centers[cluster]
                                .iter()
                                .zip(gaussian(rng, noise_scale))
                                .map(|(c, n)| c + n)
                                .collect(),
                            None => gaussian(rng, spec.distractor_scale),
                        };
                        for (dst, v) in states.row_mut(l).iter_mut().zip(row) {
                            *dst = v as f32;
                        }
                    }
                    states
                };
                let pooled = |center: Option<&[f64]>, rng: &mut rand_chacha::ChaCha8Rng| PooledStates {
                    mean: Some(layer_states(center, rng)),
                    eos: Some(layer_states(center, rng)),
                };
                let problem_states = pooled(None, rng);
                let target = Some(target_centers[cluster].as_slice());
                let target_states = TargetStates {
                    problem_plus_query: Some(pooled(target, rng)),
                    query_only: Some(pooled(target, rng)),
                };
                ExampleRecord {
                    id,
                    schema_id,
                    split,
                    problem_states,
                    target_states: Some(target_states),
                }
            })
            .collect::<Vec<_>>()
    };
    let train = make("train", Split::Train, spec.clusters * spec.train_per_cluster, &mut rng);
    let dev = make("dev", Split::Dev, spec.dev_queries, &mut rng);
    Ok(SyntheticData {
        train: HiddenStateContainer::new(spec.layer_ids(), train)?,
        dev: HiddenStateContainer::new(spec.layer_ids(), dev)?,
        clusters,
    })
}

pub fn clusters_to_tsv(clusters: &ClusterMap) -> String {
    let mut out = String::from("id\tcluster\n");
    for (id, c) in clusters {
        let _ = writeln!(out, "{id}\t{c}");
    }
    out
}

pub fn clusters_from_tsv(text: &str) -> Result<ClusterMap> {
    let mut lines = text.lines();
    if lines.next() != Some("id\tcluster") {
        return Err(Error::Parse("cluster file must start with an `id\\tcluster` header".into()));
    }
    lines
        .filter(|l| !l.is_empty())
        .map(|line| {
            let (id, c) = line
                .split_once('\t')
                .ok_or_else(|| Error::Parse(format!("bad cluster line {line:?}")))?;
            let c = c
                .parse()
                .map_err(|_| Error::Parse(format!("bad cluster number in {line:?}")))?;
            Ok((id.to_string(), c))
        })
        .collect()
}

pub fn read_clusters(path: impl AsRef<Path>) -> Result<ClusterMap> {
    let path = path.as_ref();
    clusters_from_tsv(&std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalOptions {
    pub k: usize,
    pub filter: FilterMode,
    /// Scoring used to retrieve demonstrations.
    pub similarity: Similarity,
    /// Defines the proxy oracle the retrievals are scored against.
    pub proxy: ProxyConfig,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self {
            k: 1,
            filter: FilterMode::Ood,
            similarity: Similarity::Cosine,
            proxy: ProxyConfig::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalMetrics {
    pub queries: usize,
    pub k: usize,
    /// Mean proxy score between each query and its retrieved top-1.
    pub mean_proxy_top1: f64,
    /// Fraction of queries whose proxy-best candidate is in the retrieved top-k.
    pub recall_at_k: f64,
    /// Fraction of queries whose top-1 shares the query's planted cluster.
    pub cluster_recall_at_1: Option<f64>,
}

impl EvalMetrics {
    pub const TSV_HEADER: &'static str = "queries\tk\tmean_proxy_top1\trecall_at_k\tcluster_recall_at_1";

    pub fn tsv_fields(&self) -> String {
        format!(
            "{}\t{}\t{}\t{}\t{}",
            self.queries,
            self.k,
            self.mean_proxy_top1,
            self.recall_at_k,
            self.cluster_recall_at_1.map_or("NA".to_string(), |v| v.to_string())
        )
    }

    pub fn to_tsv(&self) -> String {
        format!("{}\n{}\n", Self::TSV_HEADER, self.tsv_fields())
    }
}

fn check_pair(train: &HiddenStateContainer, dev: &HiddenStateContainer) -> Result<()> {
    let (a, b) = (train.header(), dev.header());
    if a.layer_ids != b.layer_ids || a.dim != b.dim {
        return Err(Error::Compatibility(format!(
            "train has layers {:?} dim {}, dev has layers {:?} dim {}",
            a.layer_ids, a.dim, b.layer_ids, b.dim
        )));
    }
    Ok(())
}

/// Scores retrievals from `index` for every dev query against the proxy oracle.
fn score_retrievals(
    index: &RetrievalIndex,
    queries: &[Vec<f32>],
    train: &HiddenStateContainer,
    dev: &HiddenStateContainer,
    options: &EvalOptions,
    clusters: Option<&ClusterMap>,
) -> Result<EvalMetrics> {
    let layer = options.proxy.layer_index(train.header())?;
    let train_t = ProxyTargets::from_records(train.records(), layer, &options.proxy)?;
    let dev_t = ProxyTargets::from_records(dev.records(), layer, &options.proxy)?;

    let per_query = dev
        .records()
        .par_iter()
        .zip(queries.par_iter())
        .enumerate()
        .map(|(qi, (q, emb))| -> Result<(f64, bool, Option<bool>)> {
            let filter = options.filter.for_query(&q.id, &q.schema_id);
            let result = index.retrieve(emb, options.k, &filter)?;
            let best = (0..train_t.len())
                .filter(|&j| filter.admits(&train.records()[j].id, &train.records()[j].schema_id))
                .map(|j| (j, dev_t.score(qi, &train_t, j)))
                .min_by(|a, b| rank_order((train_t.ids[a.0], a.1), (train_t.ids[b.0], b.1)))
                .expect("retrieve succeeded, so a candidate passed the filter");
            let top = &result.hits[0].id;
            let top_idx = index_of(&train_t.ids, top);
            let proxy_top1 = dev_t.score(qi, &train_t, top_idx);
            let hit = result.hits.iter().any(|h| h.id == train_t.ids[best.0]);
            let cluster_hit = clusters
                .map(|m| -> Result<bool> {
                    let get = |id: &str| {
                        m.get(id)
                            .copied()
                            .ok_or_else(|| Error::Data(format!("no cluster recorded for {id:?}")))
                    };
                    Ok(get(&q.id)? == get(top)?)
                })
                .transpose()?;
            Ok((proxy_top1, hit, cluster_hit))
        })
        .collect::<Result<Vec<_>>>()?;

    let n = per_query.len() as f64;
    Ok(EvalMetrics {
        queries: per_query.len(),
        k: options.k,
        mean_proxy_top1: per_query.iter().map(|r| r.0).sum::<f64>() / n,
        recall_at_k: per_query.iter().filter(|r| r.1).count() as f64 / n,
        cluster_recall_at_1: clusters
            .map(|_| per_query.iter().filter(|r| r.2 == Some(true)).count() as f64 / n),
    })
}

fn index_of(ids: &[&str], id: &str) -> usize {
    ids.iter().position(|x| *x == id).expect("hit ids come from the train container")
}

/// Retrieves with the trained model and scores against the proxy oracle.
pub fn evaluate_retriever(
    model: &RetrieverModel<f32>,
    train: &HiddenStateContainer,
    dev: &HiddenStateContainer,
    options: &EvalOptions,
    clusters: Option<&ClusterMap>,
) -> Result<EvalMetrics> {
    check_pair(train, dev)?;
    if !dev.header().has_target(options.proxy.target_mode) {
        return Err(Error::Validation(format!(
            "dev container has no {} target states",
            options.proxy.target_mode
        )));
    }
    model.config().check_container(dev.header())?;
    let index = build_index(model, train, options.similarity)?;
    let queries = model.embed_batch(dev.records())?;
    score_retrievals(&index, &queries, train, dev, options, clusters)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct LayerRow {
    pub layer_id: u16,
    pub metrics: EvalMetrics,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct LayerSweep {
    pub pooling: Pooling,
    pub similarity: Similarity,
    pub rows: Vec<LayerRow>,
}

impl LayerSweep {
    /// Layer with the highest cluster recall (or proxy recall without
    /// clusters); the lowest layer id wins ties.
    pub fn best_layer(&self) -> Option<u16> {
        let key = |m: &EvalMetrics| m.cluster_recall_at_1.unwrap_or(m.recall_at_k);
        self.rows
            .iter()
            .fold(None::<&LayerRow>, |best, row| match best {
                Some(b) if key(&b.metrics) >= key(&row.metrics) => Some(b),
                _ => Some(row),
            })
            .map(|r| r.layer_id)
    }

    pub fn row(&self, layer_id: u16) -> Option<&LayerRow> {
        self.rows.iter().find(|r| r.layer_id == layer_id)
    }

    pub fn to_tsv(&self) -> String {
        let mut out = format!("layer\t{}\n", EvalMetrics::TSV_HEADER);
        for r in &self.rows {
            let _ = writeln!(out, "{}\t{}", r.layer_id, r.metrics.tsv_fields());
        }
        out
    }
}

/// Retrieval with the raw pooled states of each kept layer, no MLP.
pub fn layer_sweep(
    train: &HiddenStateContainer,
    dev: &HiddenStateContainer,
    pooling: Pooling,
    options: &EvalOptions,
    clusters: Option<&ClusterMap>,
) -> Result<LayerSweep> {
    check_pair(train, dev)?;
    let rows = train
        .header()
        .layer_ids
        .iter()
        .enumerate()
        .map(|(l, &layer_id)| {
            let layer_rows = |c: &HiddenStateContainer| {
                c.records()
                    .iter()
                    .map(|r| Ok(r.problem(pooling)?.row(l).to_vec()))
                    .collect::<Result<Vec<_>>>()
            };
            let index = RetrievalIndex::from_rows(
                layer_rows(train)?,
                train.records().iter().map(|r| r.id.clone()).collect(),
                train.records().iter().map(|r| r.schema_id.clone()).collect(),
                options.similarity,
                [0; 32],
            )?;
            let metrics = score_retrievals(&index, &layer_rows(dev)?, train, dev, options, clusters)?;
            Ok(LayerRow { layer_id, metrics })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(LayerSweep {
        pooling,
        similarity: options.similarity,
        rows,
    })
}

/// Model hyperparameters that do not depend on the data layout.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelSettings {
    pub hidden_dim: usize,
    pub embed_dim: usize,
    pub pooling: Pooling,
    pub activation: Activation,
}

impl Default for ModelSettings {
    fn default() -> Self {
        Self {
            hidden_dim: 1024,
            embed_dim: 512,
            pooling: Pooling::Eos,
            activation: Activation::Relu,
        }
    }
}

impl ModelSettings {
    pub fn for_container(&self, container: &HiddenStateContainer) -> ModelConfig {
        ModelConfig {
            input_dim: container.header().dim,
            hidden_dim: self.hidden_dim,
            embed_dim: self.embed_dim,
            layer_ids: container.header().layer_ids.clone(),
            pooling: self.pooling,
            activation: self.activation,
        }
    }
}

/// One full label + train + evaluate run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub model: ModelSettings,
    pub proxy: ProxyConfig,
    pub train: TrainConfig,
    pub eval: EvalOptions,
}

impl ExperimentConfig {
    /// Propagates the top-level seed into every component.
    pub fn seeded(mut self, seed: u64) -> Self {
        self.seed = seed;
        self.proxy.seed = seed;
        self.train.seed = seed;
        self
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ExperimentResult {
    pub metrics: EvalMetrics,
    pub first_loss: f64,
    pub final_loss: f64,
    pub runtime_secs: f64,
}

pub fn run_experiment(
    train: &HiddenStateContainer,
    dev: &HiddenStateContainer,
    clusters: Option<&ClusterMap>,
    config: &ExperimentConfig,
) -> Result<(RetrieverModel<f32>, ExperimentResult)> {
    let start = Instant::now();
    let labels = build_label_set(train, &config.proxy)?;
    let model = init_model(&config.model.for_container(train), config.seed)?;
    let (model, report) = train_loop(model, train, &labels, &config.train, None)?;
    let metrics = evaluate_retriever(&model, train, dev, &config.eval, clusters)?;
    Ok((
        model,
        ExperimentResult {
            metrics,
            first_loss: report.losses[0],
            final_loss: *report.losses.last().expect("at least one step"),
            runtime_secs: start.elapsed().as_secs_f64(),
        },
    ))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepParam {
    NPos,
    BatchSize,
    TargetMode,
}

impl SweepParam {
    pub fn name(self) -> &'static str {
        match self {
            SweepParam::NPos => "n_pos",
            SweepParam::BatchSize => "batch_size",
            SweepParam::TargetMode => "target_mode",
        }
    }

    pub fn parse(name: &str) -> Result<Self> {
        match name {
            "n_pos" => Ok(SweepParam::NPos),
            "batch_size" => Ok(SweepParam::BatchSize),
            "target_mode" => Ok(SweepParam::TargetMode),
            other => Err(Error::Config(format!(
                "unknown sweep parameter {other:?} (n_pos, batch_size, target_mode)"
            ))),
        }
    }

    /// Applies `value` to a copy of `base`. Target modes are written as
    /// `<mode>[:<pooling>]`, e.g. `query_only:mean`.
    pub fn apply(self, base: &ExperimentConfig, value: &str) -> Result<ExperimentConfig> {
        let mut cfg = base.clone();
        let count = || {
            value
                .parse::<usize>()
                .map_err(|_| Error::Config(format!("{}: {value:?} is not a count", self.name())))
        };
        match self {
            SweepParam::NPos => cfg.proxy.n_pos = count()?,
            SweepParam::BatchSize => cfg.train.batch_size = count()?,
            SweepParam::TargetMode => {
                let (mode, pooling) = value.split_once(':').unwrap_or((value, ""));
                cfg.proxy.target_mode = match mode {
                    "query_only" => TargetMode::QueryOnly,
                    "problem_plus_query" => TargetMode::ProblemPlusQuery,
                    other => return Err(Error::Config(format!("unknown target mode {other:?}"))),
                };
                match pooling {
                    "" => {}
                    "mean" => cfg.proxy.target_pooling = Pooling::Mean,
                    "eos" => cfg.proxy.target_pooling = Pooling::Eos,
                    other => return Err(Error::Config(format!("unknown pooling {other:?}"))),
                }
                cfg.eval.proxy = cfg.proxy.clone();
            }
        }
        Ok(cfg)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SweepRow {
    pub value: String,
    pub result: ExperimentResult,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SweepTable {
    pub param: SweepParam,
    pub rows: Vec<SweepRow>,
}

impl SweepTable {
    /// Metrics only; byte-stable across identical runs.
    pub fn to_tsv(&self) -> String {
        let mut out = format!(
            "{}\t{}\tfirst_loss\tfinal_loss\n",
            self.param.name(),
            EvalMetrics::TSV_HEADER
        );
        for r in &self.rows {
            let _ = writeln!(
                out,
                "{}\t{}\t{}\t{}",
                r.value,
                r.result.metrics.tsv_fields(),
                r.result.first_loss,
                r.result.final_loss
            );
        }
        out
    }

    pub fn timing_tsv(&self) -> String {
        let mut out = format!("{}\truntime_secs\n", self.param.name());
        for r in &self.rows {
            let _ = writeln!(out, "{}\t{:.3}", r.value, r.result.runtime_secs);
        }
        out
    }
}

/// One experiment per value, otherwise identically configured and seeded.
pub fn sweep_driver(
    param: SweepParam,
    values: &[String],
    base: &ExperimentConfig,
    train: &HiddenStateContainer,
    dev: &HiddenStateContainer,
    clusters: Option<&ClusterMap>,
) -> Result<SweepTable> {
    if values.is_empty() {
        return Err(Error::Config("sweep needs at least one value".into()));
    }
    let rows = values
        .iter()
        .map(|v| {
            let cfg = param.apply(base, v)?;
            let (_, result) = run_experiment(train, dev, clusters, &cfg)?;
            Ok(SweepRow {
                value: v.clone(),
                result,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(SweepTable { param, rows })
}
