//! Multi-positive contrastive training of the retriever.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use log::{info, warn};
use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::container::HiddenStateContainer;
use crate::error::{Error, Result};
use crate::model::{save_checkpoint, EmbedCache, Parameters, RetrieverModel};
use crate::nn::{self, AdamW, AdamWConfig, Scalar};
use crate::proxy::{AnchorLabels, LabelSet};
use crate::seed;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub temperature: f64,
    pub batch_size: usize,
    pub total_steps: u64,
    pub checkpoint_every: u64,
    /// L2-normalize embeddings before the similarity inside the loss.
    pub normalize_embeddings: bool,
    pub optimizer: AdamWConfig,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            temperature: 0.07,
            batch_size: 64,
            total_steps: 10_000,
            checkpoint_every: 1_000,
            normalize_embeddings: true,
            optimizer: AdamWConfig::default(),
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return Err(Error::Config(format!(
                "temperature must be positive, got {}",
                self.temperature
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        if self.total_steps == 0 {
            return Err(Error::Config("total_steps must be at least 1".into()));
        }
        if self.checkpoint_every == 0 {
            return Err(Error::Config("checkpoint_every must be at least 1".into()));
        }
        self.optimizer.validate()
    }
}

/// Loss value and gradients w.r.t. every input embedding.
#[derive(Clone, Debug, PartialEq)]
pub struct ContrastiveLoss {
    pub loss: f64,
    pub grad_anchor: Vec<f64>,
    pub grad_positives: Vec<Vec<f64>>,
    pub grad_negatives: Vec<Vec<f64>>,
}

/// `−Σ_{i∈pos} log softmax_P(s(a, ·)/τ)_i` with `P = pos ∪ neg`.
///
/// `s` is the dot product, taken between L2-normalized vectors when
/// `normalize` is set.
pub fn contrastive_loss<S: Scalar, V: AsRef<[S]>>(
    anchor: &[S],
    positives: &[V],
    negatives: &[V],
    temperature: f64,
    normalize: bool,
) -> Result<ContrastiveLoss> {
    if !(temperature > 0.0 && temperature.is_finite()) {
        return Err(Error::Config(format!("temperature must be positive, got {temperature}")));
    }
    if positives.is_empty() {
        return Err(Error::Validation("contrastive loss needs at least one positive".into()));
    }
    let dim = anchor.len();
    let pool: Vec<&[S]> = positives
        .iter()
        .chain(negatives)
        .map(AsRef::as_ref)
        .collect();
    if pool.iter().any(|v| v.len() != dim) {
        return Err(Error::Shape("embeddings of differing lengths".into()));
    }

    let prep = |v: &[S]| {
        if normalize {
            let n = nn::l2_normalize(v);
            (nn::to_f64_vec(&n.values), n.norm, n.degenerate)
        } else {
            (nn::to_f64_vec(v), 1.0, false)
        }
    };
    let (a, a_norm, a_degen) = prep(anchor);
    let cands: Vec<_> = pool.iter().map(|v| prep(v)).collect();

    let logits: Vec<f64> = cands.iter().map(|(c, _, _)| nn::dot(&a, c) / temperature).collect();
    let lse = nn::log_sum_exp(&logits);
    let n_pos = positives.len();
    let loss: f64 = logits[..n_pos].iter().map(|s| lse - s).sum();

    let coeffs: Vec<f64> = logits
        .iter()
        .enumerate()
        .map(|(j, s)| {
            let p = (s - lse).exp();
            (n_pos as f64 * p - if j < n_pos { 1.0 } else { 0.0 }) / temperature
        })
        .collect();

    let mut grad_a = vec![0.0; dim];
    for ((c, _, _), k) in cands.iter().zip(&coeffs) {
        for (g, x) in grad_a.iter_mut().zip(c) {
            *g += k * x;
        }
    }
    let mut grads: Vec<Vec<f64>> = cands
        .iter()
        .zip(&coeffs)
        .map(|((c, norm, degen), k)| {
            let g: Vec<f64> = a.iter().map(|x| k * x).collect();
            if normalize {
                nn::normalize_backward(c, *norm, *degen, &g)
            } else {
                g
            }
        })
        .collect();
    if normalize {
        grad_a = nn::normalize_backward(&a, a_norm, a_degen, &grad_a);
    }
    let grad_negatives = grads.split_off(n_pos);
    Ok(ContrastiveLoss {
        loss,
        grad_anchor: grad_a,
        grad_positives: grads,
        grad_negatives,
    })
}

/// Id lookup over the training container.
pub struct TrainingSet<'a> {
    container: &'a HiddenStateContainer,
    index: HashMap<&'a str, usize>,
}

struct ResolvedAnchor {
    anchor: usize,
    positives: Vec<usize>,
    negatives: Vec<usize>,
}

impl<'a> TrainingSet<'a> {
    pub fn new(container: &'a HiddenStateContainer) -> Self {
        Self {
            container,
            index: container.id_index(),
        }
    }

    pub fn container(&self) -> &'a HiddenStateContainer {
        self.container
    }

    fn lookup(&self, id: &str) -> Result<usize> {
        self.index
            .get(id)
            .copied()
            .ok_or_else(|| Error::Data(format!("label id {id:?} is not in the training container")))
    }

    fn resolve(&self, labels: &AnchorLabels) -> Result<ResolvedAnchor> {
        let ids = |v: &[crate::proxy::ScoredId]| v.iter().map(|s| self.lookup(&s.id)).collect::<Result<Vec<_>>>();
        Ok(ResolvedAnchor {
            anchor: self.lookup(&labels.id)?,
            positives: ids(&labels.positives)?,
            negatives: ids(&labels.negatives)?,
        })
    }

    /// Fails with a data error on the first id the container lacks.
    pub fn check_labels(&self, labels: &LabelSet) -> Result<()> {
        labels.anchors.iter().try_for_each(|a| self.resolve(a).map(|_| ()))
    }
}

/// One optimizer step on `batch`; returns the batch loss (mean over anchors)
/// measured before the update.
pub fn train_step<S: Scalar>(
    model: &mut RetrieverModel<S>,
    optimizer: &mut AdamW<S>,
    batch: &[&AnchorLabels],
    data: &TrainingSet<'_>,
    config: &TrainConfig,
) -> Result<f64> {
    if batch.is_empty() {
        return Err(Error::Validation("empty training batch".into()));
    }
    let resolved = batch.iter().map(|a| data.resolve(a)).collect::<Result<Vec<_>>>()?;

    // Each record is embedded once per step, in order of first appearance.
    let mut slots: HashMap<usize, usize> = HashMap::new();
    let mut unique = Vec::new();
    for r in &resolved {
        for &i in std::iter::once(&r.anchor).chain(&r.positives).chain(&r.negatives) {
            slots.entry(i).or_insert_with(|| {
                unique.push(i);
                unique.len() - 1
            });
        }
    }
    let pooling = model.config().pooling;
    let records = data.container.records();
    let model_ref: &RetrieverModel<S> = model;
    let forward: Vec<(Vec<S>, EmbedCache<S>)> = unique
        .par_iter()
        .map(|&i| model_ref.embed_cached(records[i].problem(pooling)?))
        .collect::<Result<_>>()?;

    let scale = 1.0 / resolved.len() as f64;
    let mut grad_embs = vec![vec![0.0f64; model.config().embed_dim]; unique.len()];
    let mut total = 0.0;
    for r in &resolved {
        let emb = |i: usize| forward[slots[&i]].0.as_slice();
        let pos: Vec<&[S]> = r.positives.iter().map(|&i| emb(i)).collect();
        let neg: Vec<&[S]> = r.negatives.iter().map(|&i| emb(i)).collect();
        let out = contrastive_loss(
            emb(r.anchor),
            &pos,
            &neg,
            config.temperature,
            config.normalize_embeddings,
        )?;
        total += out.loss * scale;
        let targets = std::iter::once((r.anchor, &out.grad_anchor))
            .chain(r.positives.iter().copied().zip(&out.grad_positives))
            .chain(r.negatives.iter().copied().zip(&out.grad_negatives));
        for (i, g) in targets {
            for (acc, x) in grad_embs[slots[&i]].iter_mut().zip(g) {
                *acc += scale * x;
            }
        }
    }
    if !total.is_finite() {
        let anchors: Vec<&str> = batch.iter().map(|a| a.id.as_str()).collect();
        return Err(Error::Numeric(format!(
            "non-finite batch loss {total} (anchors {anchors:?}, temperature {})",
            config.temperature
        )));
    }

    let caches: Vec<&EmbedCache<S>> = forward.iter().map(|(_, c)| c).collect();
    let mut grads = Parameters::zeros(model.config());
    model.backward_batch(&caches, &grad_embs, &mut grads)?;
    let grad_segments = grads.segments();
    optimizer.step_segments(model.params.segments_mut().into_iter().zip(grad_segments))?;
    Ok(total)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct TrainReport {
    /// Loss of step `i + 1` at index `i`.
    pub losses: Vec<f64>,
    pub checkpoints: Vec<(u64, PathBuf)>,
    pub wall_clock_secs: f64,
    /// Seconds since start when each step finished.
    pub step_times: Vec<f64>,
    pub final_step: u64,
}

impl TrainReport {
    /// Tab-separated `step, loss, elapsed_secs` lines with a header.
    pub fn log_text(&self) -> String {
        let mut out = String::from("step\tloss\telapsed_secs\n");
        for (i, (loss, t)) in self.losses.iter().zip(&self.step_times).enumerate() {
            let _ = writeln!(out, "{}\t{loss}\t{t:.3}", i + 1);
        }
        out
    }
}

pub fn checkpoint_name(step: u64) -> String {
    format!("step-{step:06}.dtrm")
}

pub const FINAL_CHECKPOINT: &str = "final.dtrm";
pub const TRAIN_LOG: &str = "train_log.tsv";

/// Trains `model` for `config.total_steps` steps.
///
/// Anchors are shuffled into batches with a seeded permutation that is
/// redrawn on every pass. With a `checkpoint_dir`, a checkpoint is written
/// every `checkpoint_every` steps plus `final.dtrm`, and the step log goes to
/// `train_log.tsv`.
pub fn train_loop(
    mut model: RetrieverModel<f32>,
    container: &HiddenStateContainer,
    labels: &LabelSet,
    config: &TrainConfig,
    checkpoint_dir: Option<&Path>,
) -> Result<(RetrieverModel<f32>, TrainReport)> {
    config.validate()?;
    model.config().check_container(container.header())?;
    let data = TrainingSet::new(container);
    data.check_labels(labels)?;
    let n = labels.anchors.len();
    if n == 0 {
        return Err(Error::Validation("label set has no anchors".into()));
    }
    let batch_size = if config.batch_size > n {
        warn!(
            "batch size {} exceeds the {n} anchors; using batches of {n}",
            config.batch_size
        );
        n
    } else {
        config.batch_size
    };
    if let Some(dir) = checkpoint_dir {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }

    let mut optimizer = AdamW::new(config.optimizer);
    let mut rng = seed::rng(config.seed, &[seed::SHUFFLE]);
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng);
    let mut cursor = 0;

    let start = Instant::now();
    let mut report = TrainReport {
        losses: Vec::with_capacity(config.total_steps as usize),
        checkpoints: Vec::new(),
        wall_clock_secs: 0.0,
        step_times: Vec::with_capacity(config.total_steps as usize),
        final_step: 0,
    };
    let finish = |report: &mut TrainReport| -> Result<()> {
        report.wall_clock_secs = start.elapsed().as_secs_f64();
        if let Some(dir) = checkpoint_dir {
            let path = dir.join(TRAIN_LOG);
            std::fs::write(&path, report.log_text()).map_err(|e| Error::io(&path, e))?;
        }
        Ok(())
    };

    for step in 1..=config.total_steps {
        if cursor + batch_size > n {
            order.shuffle(&mut rng);
            cursor = 0;
        }
        let batch: Vec<&AnchorLabels> = order[cursor..cursor + batch_size]
            .iter()
            .map(|&i| &labels.anchors[i])
            .collect();
        cursor += batch_size;

        let loss = match train_step(&mut model, &mut optimizer, &batch, &data, config) {
            Ok(loss) => loss,
            Err(e) => {
                finish(&mut report)?;
                return Err(e);
            }
        };
        let elapsed = start.elapsed().as_secs_f64();
        report.losses.push(loss);
        report.step_times.push(elapsed);
        report.final_step = step;
        info!("step {step} loss {loss:.6} elapsed {elapsed:.3}s");

        if let Some(dir) = checkpoint_dir {
            let mut targets = Vec::new();
            if step % config.checkpoint_every == 0 {
                targets.push(dir.join(checkpoint_name(step)));
            }
            if step == config.total_steps {
                targets.push(dir.join(FINAL_CHECKPOINT));
            }
            for path in targets {
                if let Err(e) = save_checkpoint(&model, step, &path) {
                    finish(&mut report)?;
                    return Err(e);
                }
                report.checkpoints.push((step, path));
            }
        }
    }
    finish(&mut report)?;
    Ok((model, report))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn uniform_similarities() {
        let v = vec![0.3f64, -0.2, 0.9];
        let pos = vec![v.clone(); 2];
        let neg = vec![v.clone(); 3];
        for normalize in [false, true] {
            let out = contrastive_loss(&v, &pos, &neg, 0.07, normalize).unwrap();
            assert!((out.loss - 2.0 * 5f64.ln()).abs() < 1e-9);
        }
    }

    #[test]
    fn singleton_pool_has_zero_loss() {
        let a = vec![1.0f32, 2.0];
        let out = contrastive_loss(&a, &[vec![-3.0f32, 0.5]], &[] as &[Vec<f32>], 0.07, true).unwrap();
        assert_eq!(out.loss, 0.0);
        assert!(out.grad_anchor.iter().all(|g| g.abs() < 1e-12));
    }

    #[test]
    fn argument_errors() {
        let a = vec![1.0f64];
        let p = vec![vec![1.0f64]];
        assert!(matches!(contrastive_loss(&a, &p, &p, 0.0, true), Err(Error::Config(_))));
        assert!(matches!(contrastive_loss(&a, &p, &p, -1.0, true), Err(Error::Config(_))));
        let none: Vec<Vec<f64>> = Vec::new();
        assert!(matches!(contrastive_loss(&a, &none, &p, 0.1, true), Err(Error::Validation(_))));
        assert!(matches!(
            contrastive_loss(&a, &[vec![1.0, 2.0]], &p, 0.1, true),
            Err(Error::Shape(_))
        ));
    }

    #[test]
    fn config_validation() {
        TrainConfig::default().validate().unwrap();
        let bad = TrainConfig {
            temperature: 0.0,
            ..TrainConfig::default()
        };
        assert!(matches!(bad.validate(), Err(Error::Config(_))));
        let bad = TrainConfig {
            batch_size: 0,
            ..TrainConfig::default()
        };
        assert!(matches!(bad.validate(), Err(Error::Config(_))));
    }

    #[test]
    fn log_text_format() {
        let r = TrainReport {
            losses: vec![1.5, 0.25],
            checkpoints: vec![],
            wall_clock_secs: 0.0,
            step_times: vec![0.1, 0.2],
            final_step: 2,
        };
        assert_eq!(r.log_text(), "step\tloss\telapsed_secs\n1\t1.5\t0.100\n2\t0.25\t0.200\n");
    }
}
