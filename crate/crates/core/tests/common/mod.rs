#![allow(dead_code)]

use demoret::container::{
    ExampleRecord, HiddenStateContainer, LayerStates, PooledStates, Split, TargetStates,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn random_states(rng: &mut ChaCha8Rng, n_layers: usize, dim: usize) -> LayerStates {
    let data = (0..n_layers * dim).map(|_| rng.random_range(-1.0f32..1.0)).collect();
    LayerStates::new(n_layers, dim, data).unwrap()
}

pub fn random_pooled(rng: &mut ChaCha8Rng, n_layers: usize, dim: usize) -> PooledStates {
    PooledStates {
        mean: Some(random_states(rng, n_layers, dim)),
        eos: Some(random_states(rng, n_layers, dim)),
    }
}

/// `n` records with every pooling and both target modes, `schemas` databases.
pub fn random_container(seed: u64, n: usize, layer_ids: &[u16], dim: usize, schemas: usize) -> HiddenStateContainer {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let l = layer_ids.len();
    let records = (0..n)
        .map(|i| ExampleRecord {
            id: format!("ex{i:04}"),
            schema_id: format!("db{}", i % schemas),
            split: Split::Train,
            problem_states: random_pooled(&mut rng, l, dim),
            target_states: Some(TargetStates {
                problem_plus_query: Some(random_pooled(&mut rng, l, dim)),
                query_only: Some(random_pooled(&mut rng, l, dim)),
            }),
        })
        .collect();
    HiddenStateContainer::new(layer_ids.to_vec(), records).unwrap()
}

pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}

pub mod gradcheck {
    use demoret::container::LayerStates;
    use demoret::model::{init_model, ModelConfig, Parameters, RetrieverModel};
    use demoret::nn::Activation;
    use demoret::train::contrastive_loss;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// One random model plus anchor/positive/negative inputs.
    pub struct Instance {
        pub model: RetrieverModel<f64>,
        pub inputs: Vec<LayerStates>,
        pub n_pos: usize,
        pub temperature: f64,
        pub normalize: bool,
    }

    impl Instance {
        /// Sizes are at most 8; the first input is the anchor.
        pub fn random(rng: &mut ChaCha8Rng) -> Self {
            let n_layers = rng.random_range(1..=4);
            let mut cfg = ModelConfig::new(rng.random_range(1..=8), (0..n_layers as u16).map(|l| l * 2).collect());
            cfg.hidden_dim = rng.random_range(1..=8);
            cfg.embed_dim = rng.random_range(1..=8);
            cfg.activation = if rng.random_bool(0.5) { Activation::Relu } else { Activation::Gelu };
            let mut model: RetrieverModel<f64> = init_model(&cfg, rng.random()).unwrap();
            for z in &mut model.params.logits {
                *z = rng.random_range(-1.0..1.0);
            }
            for m in &mut model.params.mlps {
                for b in [&mut m.b1, &mut m.b2, &mut m.b3] {
                    b.iter_mut().for_each(|x| *x = rng.random_range(-0.5..0.5));
                }
            }
            let n_pos = rng.random_range(1..=3);
            let n_neg = rng.random_range(1..=4);
            let inputs = (0..1 + n_pos + n_neg)
                .map(|_| {
                    let data = (0..n_layers * cfg.input_dim).map(|_| rng.random_range(-1.0..1.0)).collect();
                    LayerStates::new(n_layers, cfg.input_dim, data).unwrap()
                })
                .collect();
            Self {
                model,
                inputs,
                n_pos,
                temperature: rng.random_range(0.05..1.0),
                normalize: rng.random_bool(0.7),
            }
        }

        /// Smallest |pre-activation| over all hidden units; ReLU is only
        /// differentiable away from zero.
        pub fn kink_margin(&self) -> f64 {
            self.inputs
                .iter()
                .flat_map(|x| self.model.embed_cached(x).unwrap().1.mlp_caches)
                .flat_map(|c| c.z1.into_iter().chain(c.z2))
                .map(f64::abs)
                .fold(f64::INFINITY, f64::min)
        }

        pub fn loss_with(&self, model: &RetrieverModel<f64>) -> f64 {
            let embs: Vec<Vec<f64>> = self.inputs.iter().map(|x| model.embed_states(x).unwrap()).collect();
            let (pos, neg) = embs[1..].split_at(self.n_pos);
            contrastive_loss(&embs[0], pos, neg, self.temperature, self.normalize)
                .unwrap()
                .loss
        }

        pub fn analytic(&self) -> Parameters<f64> {
            let fwd: Vec<_> = self.inputs.iter().map(|x| self.model.embed_cached(x).unwrap()).collect();
            let embs: Vec<&[f64]> = fwd.iter().map(|(e, _)| e.as_slice()).collect();
            let out = contrastive_loss(embs[0], &embs[1..1 + self.n_pos], &embs[1 + self.n_pos..], self.temperature, self.normalize)
                .unwrap();
            let mut g_embs = vec![out.grad_anchor];
            g_embs.extend(out.grad_positives);
            g_embs.extend(out.grad_negatives);
            let caches: Vec<_> = fwd.iter().map(|(_, c)| c).collect();
            let mut grads = Parameters::zeros(self.model.config());
            self.model.backward_batch(&caches, &g_embs, &mut grads).unwrap();
            grads
        }

        /// Central differences over every parameter, in segment order.
        pub fn numeric(&self, h: f64) -> Vec<f64> {
            let mut model = self.model.clone();
            let count = model.params.count();
            let mut out = Vec::with_capacity(count);
            let mut flat_index = 0;
            while flat_index < count {
                let (seg, off) = locate(&model.params, flat_index);
                let orig = model.params.segments()[seg][off];
                model.params.segments_mut()[seg][off] = orig + h;
                let up = self.loss_with(&model);
                model.params.segments_mut()[seg][off] = orig - h;
                let down = self.loss_with(&model);
                model.params.segments_mut()[seg][off] = orig;
                out.push((up - down) / (2.0 * h));
                flat_index += 1;
            }
            out
        }

        /// Central differences with the O(h²) term extrapolated away:
        /// `(4·D(h) − D(2h)) / 3`.
        pub fn extrapolated(&self, h: f64) -> Vec<f64> {
            let fine = self.numeric(h);
            let coarse = self.numeric(2.0 * h);
            fine.iter().zip(&coarse).map(|(f, c)| (4.0 * f - c) / 3.0).collect()
        }

        pub fn gradient_norm(&self) -> f64 {
            norm(&self.analytic().flatten())
        }

        /// `‖analytic − numeric‖ / max(‖analytic‖, ‖numeric‖, GRAD_FLOOR)` at
        /// step 1e-4. Below the floor, rounding in the loss differences
        /// (≈ ε·|loss|/h per coordinate) swamps any relative comparison, so
        /// small gradients are held to an absolute `tol · GRAD_FLOOR` instead.
        pub fn relative_error(&self) -> f64 {
            let a = self.analytic().flatten();
            let n = self.extrapolated(1e-4);
            let diff: Vec<f64> = a.iter().zip(&n).map(|(x, y)| x - y).collect();
            norm(&diff) / norm(&a).max(norm(&n)).max(GRAD_FLOOR)
        }
    }

    pub const GRAD_FLOOR: f64 = 1e-3;

    fn norm(v: &[f64]) -> f64 {
        v.iter().map(|x| x * x).sum::<f64>().sqrt()
    }

    fn locate(p: &Parameters<f64>, mut i: usize) -> (usize, usize) {
        for (s, seg) in p.segments().iter().enumerate() {
            if i < seg.len() {
                return (s, i);
            }
            i -= seg.len();
        }
        unreachable!("index past the last parameter")
    }

    /// Draws instances until one sits at least `margin` away from every kink.
    pub fn draw(rng: &mut ChaCha8Rng, margin: f64) -> Instance {
        loop {
            let inst = Instance::random(rng);
            if inst.kink_margin() > margin {
                return inst;
            }
        }
    }

    pub fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }
}
