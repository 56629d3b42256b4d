//! Dense numerics: vector kernels, the per-layer MLP and AdamW.
//!
//! Parameters are stored in a generic [`Scalar`] (f32 in production, f64 in
//! gradient checks). Dot products and reductions always accumulate in f64.

mod adamw;
mod mlp;

use std::fmt::Debug;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use adamw::{AdamW, AdamWConfig};
pub use mlp::{mlp_backward, mlp_forward, MlpCache, MlpDims, MlpParams};

/// Storage type for parameters and activations.
pub trait Scalar: Copy + Debug + Default + PartialEq + Send + Sync + 'static {
    fn to_f64(self) -> f64;
    fn from_f64(v: f64) -> Self;
}

impl Scalar for f32 {
    #[inline]
    fn to_f64(self) -> f64 {
        self as f64
    }
    #[inline]
    fn from_f64(v: f64) -> Self {
        v as f32
    }
}

impl Scalar for f64 {
    #[inline]
    fn to_f64(self) -> f64 {
        self
    }
    #[inline]
    fn from_f64(v: f64) -> Self {
        v
    }
}

/// Scoring function between two vectors.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Similarity {
    Dot,
    #[default]
    Cosine,
}

impl Similarity {
    pub(crate) fn tag(self) -> u8 {
        match self {
            Similarity::Dot => 0,
            Similarity::Cosine => 1,
        }
    }

    pub(crate) fn from_tag(tag: u8) -> Result<Self> {
        match tag {
            0 => Ok(Similarity::Dot),
            1 => Ok(Similarity::Cosine),
            other => Err(Error::UnsupportedFormat(format!("unknown similarity tag {other}"))),
        }
    }

    /// Score from a raw dot product and the two norms. Cosine against a zero
    /// vector is 0.
    #[inline]
    pub fn from_dot(self, dot: f64, norm_a: f64, norm_b: f64) -> f64 {
        match self {
            Similarity::Dot => dot,
            Similarity::Cosine => {
                if norm_a <= NORM_EPS || norm_b <= NORM_EPS {
                    0.0
                } else {
                    dot / (norm_a * norm_b)
                }
            }
        }
    }

    pub fn score<A: Scalar, B: Scalar>(self, a: &[A], b: &[B]) -> f64 {
        match self {
            Similarity::Dot => dot(a, b),
            Similarity::Cosine => self.from_dot(dot(a, b), norm(a), norm(b)),
        }
    }
}

impl std::fmt::Display for Similarity {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Similarity::Dot => "dot",
            Similarity::Cosine => "cosine",
        })
    }
}

/// Hidden-layer nonlinearity of the per-layer MLPs.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    #[default]
    Relu,
    /// tanh approximation.
    Gelu,
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

impl Activation {
    #[inline]
    pub fn apply(self, z: f64) -> f64 {
        match self {
            Activation::Relu => z.max(0.0),
            Activation::Gelu => {
                let u = GELU_C * (z + 0.044715 * z * z * z);
                0.5 * z * (1.0 + u.tanh())
            }
        }
    }

    /// Derivative at `z`; ReLU uses 0 at exactly 0.
    #[inline]
    pub fn derivative(self, z: f64) -> f64 {
        match self {
            Activation::Relu => {
                if z > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Gelu => {
                let u = GELU_C * (z + 0.044715 * z * z * z);
                let t = u.tanh();
                let du = GELU_C * (1.0 + 3.0 * 0.044715 * z * z);
                0.5 * (1.0 + t) + 0.5 * z * (1.0 - t * t) * du
            }
        }
    }

    pub(crate) fn tag(self) -> u8 {
        match self {
            Activation::Relu => 0,
            Activation::Gelu => 1,
        }
    }

    pub(crate) fn from_tag(tag: u8) -> Result<Self> {
        match tag {
            0 => Ok(Activation::Relu),
            1 => Ok(Activation::Gelu),
            other => Err(Error::UnsupportedFormat(format!("unknown activation tag {other}"))),
        }
    }
}

#[inline]
pub fn dot<A: Scalar, B: Scalar>(a: &[A], b: &[B]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    a.iter()
        .zip(b)
        .map(|(x, y)| x.to_f64() * y.to_f64())
        .sum()
}

pub fn norm<S: Scalar>(v: &[S]) -> f64 {
    dot(v, v).sqrt()
}

pub fn to_f64_vec<S: Scalar>(v: &[S]) -> Vec<f64> {
    v.iter().map(|x| x.to_f64()).collect()
}

pub fn from_f64_vec<S: Scalar>(v: &[f64]) -> Vec<S> {
    v.iter().map(|&x| S::from_f64(x)).collect()
}

pub fn all_finite<S: Scalar>(v: &[S]) -> bool {
    v.iter().all(|x| x.to_f64().is_finite())
}

/// Numerically stable softmax (max subtraction).
pub fn softmax<S: Scalar>(logits: &[S]) -> Result<Vec<S>> {
    if logits.is_empty() {
        return Err(Error::Validation("softmax of an empty vector".into()));
    }
    if !all_finite(logits) {
        return Err(Error::Validation("softmax of non-finite logits".into()));
    }
    let max = logits
        .iter()
        .map(|x| x.to_f64())
        .fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|x| (x.to_f64() - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    Ok(exps.iter().map(|e| S::from_f64(e / total)).collect())
}

/// `ln Σ exp(x_i)` with max subtraction.
pub fn log_sum_exp(values: &[f64]) -> f64 {
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        return max;
    }
    max + values.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}

/// Norms at or below this are treated as zero vectors.
pub const NORM_EPS: f64 = 1e-12;

#[derive(Clone, Debug, PartialEq)]
pub struct Normalized<S> {
    pub values: Vec<S>,
    /// Euclidean norm of the input.
    pub norm: f64,
    /// The input norm was at or below [`NORM_EPS`]; `values` is all zeros.
    pub degenerate: bool,
}

pub fn l2_normalize<S: Scalar>(v: &[S]) -> Normalized<S> {
    let n = norm(v);
    if n > NORM_EPS {
        Normalized {
            values: v.iter().map(|x| S::from_f64(x.to_f64() / n)).collect(),
            norm: n,
            degenerate: false,
        }
    } else {
        Normalized {
            values: vec![S::default(); v.len()],
            norm: n,
            degenerate: true,
        }
    }
}

/// Pulls a gradient w.r.t. `u = v / ||v||` back to `v`.
pub(crate) fn normalize_backward(unit: &[f64], norm: f64, degenerate: bool, grad_unit: &[f64]) -> Vec<f64> {
    if degenerate {
        return vec![0.0; unit.len()];
    }
    let proj: f64 = unit.iter().zip(grad_unit).map(|(u, g)| u * g).sum();
    unit.iter()
        .zip(grad_unit)
        .map(|(u, g)| (g - u * proj) / norm)
        .collect()
}
