use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{all_finite, Activation, Scalar};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct MlpDims {
    pub input: usize,
    pub hidden: usize,
    pub output: usize,
}

impl MlpDims {
    pub fn param_count(&self) -> usize {
        let MlpDims {
            input: d,
            hidden: h,
            output: e,
        } = *self;
        h * d + h + h * h + h + e * h + e
    }
}

/// Weights of a 3-layer MLP `input -> hidden -> hidden -> output`.
/// Matrices are row-major with shape `[out][in]`.
#[derive(Clone, Debug, PartialEq)]
pub struct MlpParams<S = f32> {
    dims: MlpDims,
    pub w1: Vec<S>,
    pub b1: Vec<S>,
    pub w2: Vec<S>,
    pub b2: Vec<S>,
    pub w3: Vec<S>,
    pub b3: Vec<S>,
}

impl<S: Scalar> MlpParams<S> {
    pub fn zeros(dims: MlpDims) -> Self {
        let MlpDims {
            input: d,
            hidden: h,
            output: e,
        } = dims;
        let z = |n: usize| vec![S::default(); n];
        Self {
            dims,
            w1: z(h * d),
            b1: z(h),
            w2: z(h * h),
            b2: z(h),
            w3: z(e * h),
            b3: z(e),
        }
    }

    /// Kaiming-uniform weights (bound `sqrt(6 / fan_in)`), zero biases.
    pub fn kaiming<R: Rng + ?Sized>(dims: MlpDims, rng: &mut R) -> Self {
        let mut p = Self::zeros(dims);
        let mut fill = |w: &mut [S], fan_in: usize| {
            let bound = (6.0 / fan_in as f64).sqrt();
            for x in w {
                *x = S::from_f64(rng.random_range(-bound..bound));
            }
        };
        fill(&mut p.w1, dims.input);
        fill(&mut p.w2, dims.hidden);
        fill(&mut p.w3, dims.hidden);
        p
    }

    /// Builds parameters from explicit tensors, checking every shape.
    pub fn from_parts(
        dims: MlpDims,
        w1: Vec<S>,
        b1: Vec<S>,
        w2: Vec<S>,
        b2: Vec<S>,
        w3: Vec<S>,
        b3: Vec<S>,
    ) -> Result<Self> {
        let p = Self {
            dims,
            w1,
            b1,
            w2,
            b2,
            w3,
            b3,
        };
        let expected = Self::zeros(dims);
        for (name, (a, b)) in ["w1", "b1", "w2", "b2", "w3", "b3"]
            .iter()
            .zip(p.segments().into_iter().zip(expected.segments()))
        {
            if a.len() != b.len() {
                return Err(Error::Shape(format!(
                    "{name} has {} entries, expected {}",
                    a.len(),
                    b.len()
                )));
            }
        }
        Ok(p)
    }

    pub fn dims(&self) -> MlpDims {
        self.dims
    }

    pub fn param_count(&self) -> usize {
        self.dims.param_count()
    }

    /// Parameter tensors in canonical order `w1, b1, w2, b2, w3, b3`.
    pub fn segments(&self) -> [&[S]; 6] {
        [&self.w1, &self.b1, &self.w2, &self.b2, &self.w3, &self.b3]
    }

    pub fn segments_mut(&mut self) -> [&mut [S]; 6] {
        [
            &mut self.w1,
            &mut self.b1,
            &mut self.w2,
            &mut self.b2,
            &mut self.w3,
            &mut self.b3,
        ]
    }

    pub fn is_finite(&self) -> bool {
        self.segments().iter().all(|s| all_finite(s))
    }

    pub fn forward(&self, act: Activation, input: &[S]) -> Result<(Vec<S>, MlpCache<S>)> {
        mlp_forward(self, act, input)
    }

    /// Adds the parameter gradients for one cotangent into `grads`.
    /// Returns the input gradient when `want_input` is set.
    pub fn accumulate_backward(
        &self,
        act: Activation,
        cache: &MlpCache<S>,
        grad_out: &[S],
        grads: &mut MlpParams<S>,
        want_input: bool,
    ) -> Result<Option<Vec<S>>> {
        let MlpDims {
            input: d,
            hidden: h,
            output: e,
        } = self.dims;
        if grad_out.len() != e {
            return Err(Error::Shape(format!(
                "output gradient has {} entries, expected {e}",
                grad_out.len()
            )));
        }
        if cache.input.len() != d || cache.z1.len() != h || cache.z2.len() != h {
            return Err(Error::Shape("activation cache does not match parameters".into()));
        }
        if grads.dims != self.dims {
            return Err(Error::Shape("gradient buffer does not match parameters".into()));
        }

        let delta3: Vec<f64> = grad_out.iter().map(|g| g.to_f64()).collect();
        outer_accumulate(&mut grads.w3, &mut grads.b3, &delta3, &cache.a2);
        let g_a2 = transpose_matvec(&self.w3, e, h, &delta3);
        let delta2: Vec<f64> = g_a2
            .iter()
            .zip(&cache.z2)
            .map(|(g, z)| g * act.derivative(z.to_f64()))
            .collect();
        outer_accumulate(&mut grads.w2, &mut grads.b2, &delta2, &cache.a1);
        let g_a1 = transpose_matvec(&self.w2, h, h, &delta2);
        let delta1: Vec<f64> = g_a1
            .iter()
            .zip(&cache.z1)
            .map(|(g, z)| g * act.derivative(z.to_f64()))
            .collect();
        outer_accumulate(&mut grads.w1, &mut grads.b1, &delta1, &cache.input);

        Ok(want_input.then(|| {
            transpose_matvec(&self.w1, h, d, &delta1)
                .into_iter()
                .map(S::from_f64)
                .collect()
        }))
    }
}

/// Intermediate values of one forward pass.
#[derive(Clone, Debug, PartialEq)]
pub struct MlpCache<S = f32> {
    pub input: Vec<S>,
    pub z1: Vec<S>,
    pub a1: Vec<S>,
    pub z2: Vec<S>,
    pub a2: Vec<S>,
}

/// `out = W3·a2 + b3`, `a2 = act(W2·a1 + b2)`, `a1 = act(W1·x + b1)`.
pub fn mlp_forward<S: Scalar>(
    params: &MlpParams<S>,
    act: Activation,
    input: &[S],
) -> Result<(Vec<S>, MlpCache<S>)> {
    let MlpDims {
        input: d,
        hidden: h,
        output: e,
    } = params.dims;
    if input.len() != d {
        return Err(Error::Shape(format!(
            "MLP input has {} entries, expected {d}",
            input.len()
        )));
    }
    if !all_finite(input) {
        return Err(Error::Validation("MLP input contains non-finite values".into()));
    }
    let z1 = affine(&params.w1, &params.b1, h, d, input);
    let a1: Vec<S> = z1.iter().map(|z| S::from_f64(act.apply(z.to_f64()))).collect();
    let z2 = affine(&params.w2, &params.b2, h, h, &a1);
    let a2: Vec<S> = z2.iter().map(|z| S::from_f64(act.apply(z.to_f64()))).collect();
    let out = affine(&params.w3, &params.b3, e, h, &a2);
    Ok((
        out,
        MlpCache {
            input: input.to_vec(),
            z1,
            a1,
            z2,
            a2,
        },
    ))
}

/// Fresh gradients for one cotangent: `(d params, d input)`.
pub fn mlp_backward<S: Scalar>(
    params: &MlpParams<S>,
    act: Activation,
    cache: &MlpCache<S>,
    grad_out: &[S],
) -> Result<(MlpParams<S>, Vec<S>)> {
    let mut grads = MlpParams::zeros(params.dims);
    let grad_input = params
        .accumulate_backward(act, cache, grad_out, &mut grads, true)?
        .expect("input gradient requested");
    Ok((grads, grad_input))
}

fn affine<S: Scalar>(w: &[S], b: &[S], rows: usize, cols: usize, x: &[S]) -> Vec<S> {
    (0..rows)
        .map(|i| {
            let row = &w[i * cols..(i + 1) * cols];
            S::from_f64(b[i].to_f64() + super::dot(row, x))
        })
        .collect()
}

/// `Wᵀ·delta` for a row-major `[rows][cols]` matrix.
fn transpose_matvec<S: Scalar>(w: &[S], rows: usize, cols: usize, delta: &[f64]) -> Vec<f64> {
    let mut acc = vec![0.0f64; cols];
    for (i, &d) in delta.iter().enumerate().take(rows) {
        if d == 0.0 {
            continue;
        }
        for (a, wij) in acc.iter_mut().zip(&w[i * cols..(i + 1) * cols]) {
            *a += wij.to_f64() * d;
        }
    }
    acc
}

fn outer_accumulate<S: Scalar>(gw: &mut [S], gb: &mut [S], delta: &[f64], x: &[S]) {
    let cols = x.len();
    for (i, &d) in delta.iter().enumerate() {
        if d == 0.0 {
            continue;
        }
        gb[i] = S::from_f64(gb[i].to_f64() + d);
        for (g, xj) in gw[i * cols..(i + 1) * cols].iter_mut().zip(x) {
            *g = S::from_f64(g.to_f64() + d * xj.to_f64());
        }
    }
}
