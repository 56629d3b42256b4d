//! The retrieval model: one MLP per kept layer, mixed by softmax layer weights.
//!
//! `R(x) = Σ_ℓ softmax(z)_ℓ · MLP_ℓ(h_ℓ(x))`

use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::codec::{read_file, ByteReader, ByteWriter};
use crate::container::{ContainerHeader, ExampleRecord, LayerStates, Pooling};
use crate::error::{Error, Result};
use crate::nn::{self, Activation, MlpCache, MlpDims, MlpParams, Scalar};
use crate::seed;

pub const CHECKPOINT_MAGIC: [u8; 4] = *b"DTRM";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    /// Hidden size of the source LLM.
    pub input_dim: usize,
    pub hidden_dim: usize,
    pub embed_dim: usize,
    pub layer_ids: Vec<u16>,
    pub pooling: Pooling,
    pub activation: Activation,
}

impl ModelConfig {
    /// Defaults (`hidden = 1024`, `embed = 512`, EOS pooling, ReLU) for a given input layout.
    pub fn new(input_dim: usize, layer_ids: Vec<u16>) -> Self {
        Self {
            input_dim,
            hidden_dim: 1024,
            embed_dim: 512,
            layer_ids,
            pooling: Pooling::Eos,
            activation: Activation::Relu,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.layer_ids.is_empty() {
            return Err(Error::Config("model needs at least one kept layer".into()));
        }
        if self.layer_ids.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Config(format!(
                "kept-layer ids must be strictly increasing: {:?}",
                self.layer_ids
            )));
        }
        if self.input_dim == 0 || self.hidden_dim == 0 || self.embed_dim == 0 {
            return Err(Error::Config("model dimensions must be positive".into()));
        }
        Ok(())
    }

    pub fn mlp_dims(&self) -> MlpDims {
        MlpDims {
            input: self.input_dim,
            hidden: self.hidden_dim,
            output: self.embed_dim,
        }
    }

    pub fn param_count(&self) -> usize {
        self.layer_ids.len() * (self.mlp_dims().param_count() + 1)
    }

    /// SHA-256 over a canonical encoding of every field.
    pub fn digest(&self) -> [u8; 32] {
        let mut h = Sha256::new();
        h.update(b"model-config/1");
        for v in [self.input_dim, self.hidden_dim, self.embed_dim, self.layer_ids.len()] {
            h.update((v as u64).to_le_bytes());
        }
        for l in &self.layer_ids {
            h.update(l.to_le_bytes());
        }
        h.update([self.pooling.tag(), self.activation.tag()]);
        h.finalize().into()
    }

    /// Checks that a container carries the inputs this model consumes.
    pub fn check_container(&self, header: &ContainerHeader) -> Result<()> {
        if header.layer_ids != self.layer_ids || header.dim != self.input_dim {
            return Err(Error::Compatibility(format!(
                "model expects layers {:?} with dim {}, container has layers {:?} with dim {}",
                self.layer_ids, self.input_dim, header.layer_ids, header.dim
            )));
        }
        if !header.has_pooling(self.pooling) {
            return Err(Error::Validation(format!(
                "container has no {}-pooled states",
                self.pooling
            )));
        }
        Ok(())
    }
}

/// All trainable tensors; also used as the gradient buffer.
#[derive(Clone, Debug, PartialEq)]
pub struct Parameters<S = f32> {
    pub mlps: Vec<MlpParams<S>>,
    /// Layer-weight logits `z`; effective weights are `softmax(z)`.
    pub logits: Vec<S>,
}

impl<S: Scalar> Parameters<S> {
    pub fn zeros(config: &ModelConfig) -> Self {
        let n = config.layer_ids.len();
        Self {
            mlps: (0..n).map(|_| MlpParams::zeros(config.mlp_dims())).collect(),
            logits: vec![S::default(); n],
        }
    }

    /// Tensors in canonical order: each layer's `w1..b3`, then the logits.
    pub fn segments(&self) -> Vec<&[S]> {
        let mut out: Vec<&[S]> = self.mlps.iter().flat_map(|m| m.segments()).collect();
        out.push(&self.logits);
        out
    }

    pub fn segments_mut(&mut self) -> Vec<&mut [S]> {
        let mut out: Vec<&mut [S]> = self
            .mlps
            .iter_mut()
            .flat_map(|m| m.segments_mut())
            .collect();
        out.push(&mut self.logits);
        out
    }

    pub fn count(&self) -> usize {
        self.segments().iter().map(|s| s.len()).sum()
    }

    pub fn flatten(&self) -> Vec<S> {
        self.segments().concat()
    }

    pub fn is_finite(&self) -> bool {
        self.segments().iter().all(|s| nn::all_finite(s))
    }

    pub fn scale(&mut self, factor: f64) {
        for seg in self.segments_mut() {
            for x in seg {
                *x = S::from_f64(x.to_f64() * factor);
            }
        }
    }
}

/// Forward intermediates of one embedding, for the backward pass.
#[derive(Clone, Debug)]
pub struct EmbedCache<S = f32> {
    pub weights: Vec<f64>,
    pub layer_outputs: Vec<Vec<S>>,
    pub mlp_caches: Vec<MlpCache<S>>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RetrieverModel<S = f32> {
    config: ModelConfig,
    pub params: Parameters<S>,
}

/// Seeded Kaiming-uniform MLPs (one per kept layer) and zero layer logits.
pub fn init_model<S: Scalar>(config: &ModelConfig, seed: u64) -> Result<RetrieverModel<S>> {
    config.validate()?;
    let mut rng = seed::rng(seed, &[seed::INIT]);
    let mlps = config
        .layer_ids
        .iter()
        .map(|_| MlpParams::kaiming(config.mlp_dims(), &mut rng))
        .collect();
    Ok(RetrieverModel {
        config: config.clone(),
        params: Parameters {
            mlps,
            logits: vec![S::default(); config.layer_ids.len()],
        },
    })
}

impl<S: Scalar> RetrieverModel<S> {
    pub fn from_parts(config: ModelConfig, params: Parameters<S>) -> Result<Self> {
        config.validate()?;
        let n = config.layer_ids.len();
        if params.mlps.len() != n || params.logits.len() != n {
            return Err(Error::Shape(format!(
                "{} MLPs and {} logits for {n} kept layers",
                params.mlps.len(),
                params.logits.len()
            )));
        }
        if params.mlps.iter().any(|m| m.dims() != config.mlp_dims()) {
            return Err(Error::Shape("MLP dimensions differ from the model config".into()));
        }
        Ok(Self { config, params })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    /// Effective layer weights `softmax(z)`.
    pub fn layer_weights(&self) -> Vec<f64> {
        let logits = nn::to_f64_vec(&self.params.logits);
        nn::softmax(&logits).expect("model logits are finite and nonempty")
    }

    fn check_states(&self, states: &LayerStates) -> Result<()> {
        if states.n_layers() != self.config.layer_ids.len() || states.dim() != self.config.input_dim {
            return Err(Error::Compatibility(format!(
                "states shaped [{}][{}], model expects [{}][{}]",
                states.n_layers(),
                states.dim(),
                self.config.layer_ids.len(),
                self.config.input_dim
            )));
        }
        Ok(())
    }

    fn input_row(states: &LayerStates, layer: usize) -> Vec<S> {
        states.row(layer).iter().map(|&x| S::from_f64(x as f64)).collect()
    }

    pub fn embed_states(&self, states: &LayerStates) -> Result<Vec<S>> {
        self.check_states(states)?;
        let weights = self.layer_weights();
        let mut acc = vec![0.0f64; self.config.embed_dim];
        for (l, (mlp, w)) in self.params.mlps.iter().zip(&weights).enumerate() {
            let (out, _) = mlp.forward(self.config.activation, &Self::input_row(states, l))?;
            for (a, o) in acc.iter_mut().zip(&out) {
                *a += w * o.to_f64();
            }
        }
        Ok(nn::from_f64_vec(&acc))
    }

    /// Embedding of a record's problem states under the model's pooling.
    pub fn embed(&self, record: &ExampleRecord) -> Result<Vec<S>> {
        self.embed_states(record.problem(self.config.pooling)?)
    }

    /// Row-wise [`embed`](Self::embed), in input order.
    pub fn embed_batch(&self, records: &[ExampleRecord]) -> Result<Vec<Vec<S>>> {
        records.par_iter().map(|r| self.embed(r)).collect()
    }

    pub fn embed_cached(&self, states: &LayerStates) -> Result<(Vec<S>, EmbedCache<S>)> {
        self.check_states(states)?;
        let weights = self.layer_weights();
        let mut acc = vec![0.0f64; self.config.embed_dim];
        let mut layer_outputs = Vec::with_capacity(weights.len());
        let mut mlp_caches = Vec::with_capacity(weights.len());
        for (l, (mlp, w)) in self.params.mlps.iter().zip(&weights).enumerate() {
            let (out, cache) = mlp.forward(self.config.activation, &Self::input_row(states, l))?;
            for (a, o) in acc.iter_mut().zip(&out) {
                *a += w * o.to_f64();
            }
            layer_outputs.push(out);
            mlp_caches.push(cache);
        }
        Ok((
            nn::from_f64_vec(&acc),
            EmbedCache {
                weights,
                layer_outputs,
                mlp_caches,
            },
        ))
    }

    /// Accumulates `∂(g·R)/∂θ` for each `(cache, g)` pair into `grads`.
    ///
    /// Layers are processed in parallel; within a layer, contributions are
    /// summed in input order, so the result does not depend on scheduling.
    pub fn backward_batch(
        &self,
        caches: &[&EmbedCache<S>],
        grad_embeddings: &[Vec<f64>],
        grads: &mut Parameters<S>,
    ) -> Result<()> {
        if caches.len() != grad_embeddings.len() {
            return Err(Error::Shape("one embedding gradient per cache is required".into()));
        }
        let e = self.config.embed_dim;
        if grad_embeddings.iter().any(|g| g.len() != e) {
            return Err(Error::Shape(format!("embedding gradients must have {e} entries")));
        }
        let act = self.config.activation;

        grads
            .mlps
            .par_iter_mut()
            .zip(self.params.mlps.par_iter())
            .enumerate()
            .try_for_each(|(l, (g_mlp, mlp))| -> Result<()> {
                for (cache, g) in caches.iter().zip(grad_embeddings) {
                    let w = cache.weights[l];
                    let grad_out: Vec<S> = g.iter().map(|x| S::from_f64(w * x)).collect();
                    mlp.accumulate_backward(act, &cache.mlp_caches[l], &grad_out, g_mlp, false)?;
                }
                Ok(())
            })?;

        // Softmax Jacobian: ∂L/∂z_k = w_k (∂L/∂w_k − Σ_ℓ w_ℓ ∂L/∂w_ℓ).
        let n = self.config.layer_ids.len();
        let mut logit_grads = vec![0.0f64; n];
        for (cache, g) in caches.iter().zip(grad_embeddings) {
            let d_w: Vec<f64> = cache.layer_outputs.iter().map(|o| nn::dot(o, g)).collect();
            let mean: f64 = cache.weights.iter().zip(&d_w).map(|(w, d)| w * d).sum();
            for k in 0..n {
                logit_grads[k] += cache.weights[k] * (d_w[k] - mean);
            }
        }
        for (acc, d) in grads.logits.iter_mut().zip(logit_grads) {
            *acc = S::from_f64(acc.to_f64() + d);
        }
        Ok(())
    }
}

impl RetrieverModel<f32> {
    pub fn to_checkpoint_bytes(&self, step: u64) -> Result<Vec<u8>> {
        let c = &self.config;
        let mut w = ByteWriter::new();
        w.bytes(&CHECKPOINT_MAGIC);
        w.u32(CHECKPOINT_VERSION);
        for v in [c.input_dim, c.hidden_dim, c.embed_dim, c.layer_ids.len()] {
            w.u32(u32::try_from(v).map_err(|_| Error::Format("dimension exceeds u32".into()))?);
        }
        for &l in &c.layer_ids {
            w.u16(l);
        }
        w.u8(c.pooling.tag());
        w.u8(c.activation.tag());
        w.u64(step);
        w.bytes(&c.digest());
        w.u64(self.params.count() as u64);
        for seg in self.params.segments() {
            w.f32s(seg);
        }
        Ok(w.into_inner())
    }

    /// Parses a checkpoint, verifying the stored config digest.
    pub fn from_checkpoint_bytes(bytes: &[u8]) -> Result<(Self, u64)> {
        let mut r = ByteReader::new(bytes, "checkpoint");
        r.expect_magic(&CHECKPOINT_MAGIC)?;
        r.expect_version(CHECKPOINT_VERSION)?;
        let input_dim = r.u32()? as usize;
        let hidden_dim = r.u32()? as usize;
        let embed_dim = r.u32()? as usize;
        let n_layers = r.u32()? as usize;
        let layer_ids = (0..n_layers).map(|_| r.u16()).collect::<Result<Vec<_>>>()?;
        let pooling = Pooling::from_tag(r.u8()?)?;
        let activation = Activation::from_tag(r.u8()?)?;
        let step = r.u64()?;
        let digest: [u8; 32] = r.take(32)?.try_into().unwrap();
        let config = ModelConfig {
            input_dim,
            hidden_dim,
            embed_dim,
            layer_ids,
            pooling,
            activation,
        };
        if digest != config.digest() {
            return Err(Error::Compatibility(
                "checkpoint config digest does not match its stored configuration".into(),
            ));
        }
        config
            .validate()
            .map_err(|e| Error::Corruption(format!("checkpoint header: {e}")))?;
        let count = r.u64()?;
        if count != config.param_count() as u64 {
            return Err(Error::Corruption(format!(
                "checkpoint holds {count} parameters, configuration implies {}",
                config.param_count()
            )));
        }
        let mut params = Parameters::<f32>::zeros(&config);
        for seg in params.segments_mut() {
            let values = r.f32s(seg.len())?;
            seg.copy_from_slice(&values);
        }
        r.finish()?;
        if !params.is_finite() {
            return Err(Error::Validation("checkpoint contains non-finite parameters".into()));
        }
        Ok((Self { config, params }, step))
    }
}

pub fn save_checkpoint(model: &RetrieverModel<f32>, step: u64, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let bytes = model.to_checkpoint_bytes(step)?;
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<(RetrieverModel<f32>, u64)> {
    RetrieverModel::from_checkpoint_bytes(&read_file(path.as_ref())?)
}

/// Loads a checkpoint and requires it to match `expected`.
pub fn load_checkpoint_for(
    path: impl AsRef<Path>,
    expected: &ModelConfig,
) -> Result<(RetrieverModel<f32>, u64)> {
    let (model, step) = load_checkpoint(path)?;
    if model.config.digest() != expected.digest() {
        return Err(Error::Compatibility(format!(
            "checkpoint config {:?} differs from expected {:?}",
            model.config, expected
        )));
    }
    Ok((model, step))
}
