//! AdamW with decoupled weight decay.

use serde::{Deserialize, Serialize};

use super::{all_finite, Scalar};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdamWConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            weight_decay: 0.01,
            beta1: 0.9,
            beta2: 0.98,
            epsilon: 1e-8,
        }
    }
}

impl AdamWConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.lr >= 0.0
            && self.weight_decay >= 0.0
            && (0.0..1.0).contains(&self.beta1)
            && (0.0..1.0).contains(&self.beta2)
            && self.epsilon > 0.0;
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("invalid AdamW hyperparameters {self:?}")))
        }
    }
}

/// Optimizer state: first/second moment buffers and the step counter.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamW<S = f32> {
    pub config: AdamWConfig,
    t: u64,
    m: Vec<S>,
    v: Vec<S>,
}

impl<S: Scalar> AdamW<S> {
    pub fn new(config: AdamWConfig) -> Self {
        Self {
            config,
            t: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    pub fn step_count(&self) -> u64 {
        self.t
    }

    pub fn first_moment(&self) -> &[S] {
        &self.m
    }

    pub fn second_moment(&self) -> &[S] {
        &self.v
    }

    /// One update of a flat parameter vector.
    pub fn step(&mut self, params: &mut [S], grads: &[S]) -> Result<()> {
        self.step_segments(std::iter::once((params, grads)))
    }

    /// One update over parameter tensors visited in a fixed order. The moment
    /// buffers are laid out as the concatenation of the segments.
    pub fn step_segments<'a, I>(&mut self, segments: I) -> Result<()>
    where
        I: IntoIterator<Item = (&'a mut [S], &'a [S])>,
    {
        let segments: Vec<_> = segments.into_iter().collect();
        let total: usize = segments.iter().map(|(p, _)| p.len()).sum();
        for (p, g) in &segments {
            if p.len() != g.len() {
                return Err(Error::Shape(format!(
                    "parameter segment of {} entries got {} gradients",
                    p.len(),
                    g.len()
                )));
            }
            if !all_finite(g) {
                return Err(Error::Validation("non-finite gradient".into()));
            }
        }
        if self.m.is_empty() && self.t == 0 {
            self.m = vec![S::default(); total];
            self.v = vec![S::default(); total];
        } else if self.m.len() != total {
            return Err(Error::Shape(format!(
                "optimizer holds state for {} parameters, got {total}",
                self.m.len()
            )));
        }

        self.t += 1;
        let AdamWConfig {
            lr,
            weight_decay,
            beta1,
            beta2,
            epsilon,
        } = self.config;
        let bc1 = 1.0 - beta1.powf(self.t as f64);
        let bc2 = 1.0 - beta2.powf(self.t as f64);
        let mut offset = 0;
        for (params, grads) in segments {
            let m = &mut self.m[offset..offset + params.len()];
            let v = &mut self.v[offset..offset + params.len()];
            for (((p, g), m), v) in params.iter_mut().zip(grads).zip(m).zip(v) {
                let g = g.to_f64();
                let m_new = beta1 * m.to_f64() + (1.0 - beta1) * g;
                let v_new = beta2 * v.to_f64() + (1.0 - beta2) * g * g;
                *m = S::from_f64(m_new);
                *v = S::from_f64(v_new);
                let m_hat = m_new / bc1;
                let v_hat = v_new / bc2;
                let p0 = p.to_f64();
                *p = S::from_f64(p0 - lr * (m_hat / (v_hat.sqrt() + epsilon) + weight_decay * p0));
            }
            offset += params.len();
        }
        Ok(())
    }
}
