use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::{ModelConfig, ModelError};
use crate::tensor::{Scalar, Tensor};

const INIT_STD: f64 = 0.02;

/// Weights of one pre-norm transformer block.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerParams<T> {
    pub attn_norm_gain: Tensor<T>,
    pub attn_norm_bias: Tensor<T>,
    pub wq: Tensor<T>,
    pub wk: Tensor<T>,
    pub wv: Tensor<T>,
    pub wo: Tensor<T>,
    pub ff_norm_gain: Tensor<T>,
    pub ff_norm_bias: Tensor<T>,
    pub ff_in: Tensor<T>,
    pub ff_in_bias: Tensor<T>,
    pub ff_out: Tensor<T>,
    pub ff_out_bias: Tensor<T>,
}

pub(crate) const LAYER_TENSORS: usize = 12;

const LAYER_NAMES: [&str; LAYER_TENSORS] = [
    "attn_norm.gain",
    "attn_norm.bias",
    "attn.wq",
    "attn.wk",
    "attn.wv",
    "attn.wo",
    "ff_norm.gain",
    "ff_norm.bias",
    "ff.w_in",
    "ff.b_in",
    "ff.w_out",
    "ff.b_out",
];

impl<T: Scalar> LayerParams<T> {
    fn fields(&self) -> [&Tensor<T>; LAYER_TENSORS] {
        [
            &self.attn_norm_gain,
            &self.attn_norm_bias,
            &self.wq,
            &self.wk,
            &self.wv,
            &self.wo,
            &self.ff_norm_gain,
            &self.ff_norm_bias,
            &self.ff_in,
            &self.ff_in_bias,
            &self.ff_out,
            &self.ff_out_bias,
        ]
    }

    fn fields_mut(&mut self) -> [&mut Tensor<T>; LAYER_TENSORS] {
        [
            &mut self.attn_norm_gain,
            &mut self.attn_norm_bias,
            &mut self.wq,
            &mut self.wk,
            &mut self.wv,
            &mut self.wo,
            &mut self.ff_norm_gain,
            &mut self.ff_norm_bias,
            &mut self.ff_in,
            &mut self.ff_in_bias,
            &mut self.ff_out,
            &mut self.ff_out_bias,
        ]
    }

    fn from_fields(mut it: impl Iterator<Item = Tensor<T>>) -> Option<Self> {
        Some(Self {
            attn_norm_gain: it.next()?,
            attn_norm_bias: it.next()?,
            wq: it.next()?,
            wk: it.next()?,
            wv: it.next()?,
            wo: it.next()?,
            ff_norm_gain: it.next()?,
            ff_norm_bias: it.next()?,
            ff_in: it.next()?,
            ff_in_bias: it.next()?,
            ff_out: it.next()?,
            ff_out_bias: it.next()?,
        })
    }
}

/// All trainable tensors of the model.
#[derive(Debug, Clone, PartialEq)]
pub struct Parameters<T> {
    config: ModelConfig,
    pub token_embedding: Tensor<T>,
    pub layers: Vec<LayerParams<T>>,
    pub final_norm_gain: Tensor<T>,
    pub final_norm_bias: Tensor<T>,
    pub output: Tensor<T>,
}

impl<T: Scalar> Parameters<T> {
    /// Seeded initialization: N(0, 0.02) weights, residual projections
    /// shrunk by `sqrt(2 * n_layers)`, unit norm gains, zero biases.
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self, ModelError> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (v, d, f) = (config.vocab_size, config.d_model, config.d_ff);
        let residual_std = INIT_STD / (2.0 * config.n_layers.max(1) as f64).sqrt();
        let mut normal = |shape: Vec<usize>, std: f64| {
            let dist = Normal::new(0.0, std).expect("positive std");
            Tensor::from_fn(shape, |_| T::from_f64_lossy(dist.sample(&mut rng)))
        };
        let token_embedding = normal(vec![v, d], INIT_STD);
        let layers = (0..config.n_layers)
            .map(|_| LayerParams {
                attn_norm_gain: Tensor::from_fn(vec![d], |_| T::one()),
                attn_norm_bias: Tensor::zeros(vec![d]),
                wq: normal(vec![d, d], INIT_STD),
                wk: normal(vec![d, d], INIT_STD),
                wv: normal(vec![d, d], INIT_STD),
                wo: normal(vec![d, d], residual_std),
                ff_norm_gain: Tensor::from_fn(vec![d], |_| T::one()),
                ff_norm_bias: Tensor::zeros(vec![d]),
                ff_in: normal(vec![d, f], INIT_STD),
                ff_in_bias: Tensor::zeros(vec![f]),
                ff_out: normal(vec![f, d], residual_std),
                ff_out_bias: Tensor::zeros(vec![d]),
            })
            .collect();
        let output = normal(vec![d, v], INIT_STD);
        Ok(Self {
            config,
            token_embedding,
            layers,
            final_norm_gain: Tensor::from_fn(vec![d], |_| T::one()),
            final_norm_bias: Tensor::zeros(vec![d]),
            output,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    /// Tensors in canonical order with stable names.
    pub fn named_tensors(&self) -> Vec<(String, &Tensor<T>)> {
        let mut out = vec![("token_embedding".to_string(), &self.token_embedding)];
        for (l, layer) in self.layers.iter().enumerate() {
            for (name, t) in LAYER_NAMES.iter().zip(layer.fields()) {
                out.push((format!("layers.{l}.{name}"), t));
            }
        }
        out.push(("final_norm.gain".into(), &self.final_norm_gain));
        out.push(("final_norm.bias".into(), &self.final_norm_bias));
        out.push(("output".into(), &self.output));
        out
    }

    pub fn tensors(&self) -> Vec<&Tensor<T>> {
        self.named_tensors().into_iter().map(|(_, t)| t).collect()
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor<T>> {
        let mut out = vec![&mut self.token_embedding];
        for layer in &mut self.layers {
            out.extend(layer.fields_mut());
        }
        out.push(&mut self.final_norm_gain);
        out.push(&mut self.final_norm_bias);
        out.push(&mut self.output);
        out
    }

    pub fn names(&self) -> Vec<String> {
        self.named_tensors().into_iter().map(|(n, _)| n).collect()
    }

    /// Rebuilds parameters from tensors in canonical order, checking
    /// names and shapes against a freshly shaped model.
    pub fn from_named(config: ModelConfig, tensors: Vec<(String, Tensor<T>)>) -> Result<Self, ModelError> {
        let template = Self::init(config, 0)?;
        let expected = template.named_tensors();
        if expected.len() != tensors.len() {
            return Err(ModelError::InvalidConfig(format!(
                "expected {} tensors, found {}",
                expected.len(),
                tensors.len()
            )));
        }
        for ((want_name, want), (name, t)) in expected.iter().zip(&tensors) {
            if want_name != name || want.shape() != t.shape() {
                return Err(ModelError::InvalidConfig(format!(
                    "tensor {name} {:?} does not match expected {want_name} {:?}",
                    t.shape(),
                    want.shape()
                )));
            }
        }
        let mut it = tensors.into_iter().map(|(_, t)| t);
        let token_embedding = it.next().unwrap();
        let mut layers = Vec::with_capacity(config.n_layers);
        for _ in 0..config.n_layers {
            layers.push(LayerParams::from_fields(it.by_ref()).unwrap());
        }
        Ok(Self {
            config,
            token_embedding,
            layers,
            final_norm_gain: it.next().unwrap(),
            final_norm_bias: it.next().unwrap(),
            output: it.next().unwrap(),
        })
    }

    pub fn cast<U: Scalar>(&self) -> Parameters<U> {
        Parameters {
            config: self.config,
            token_embedding: self.token_embedding.cast(),
            layers: self
                .layers
                .iter()
                .map(|l| LayerParams::from_fields(l.fields().into_iter().map(|t| t.cast())).unwrap())
                .collect(),
            final_norm_gain: self.final_norm_gain.cast(),
            final_norm_bias: self.final_norm_bias.cast(),
            output: self.output.cast(),
        }
    }

    pub fn num_params(&self) -> usize {
        self.tensors().iter().map(|t| t.numel()).sum()
    }

    pub fn all_finite(&self) -> bool {
        self.tensors().iter().all(|t| t.is_finite())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> ModelConfig {
        ModelConfig {
            vocab_size: 20,
            d_model: 8,
            n_layers: 2,
            n_heads: 2,
            d_ff: 16,
            max_seq: 32,
            rope_base: 10_000.0,
        }
    }

    #[test]
    fn init_is_seeded() {
        let a = Parameters::<f32>::init(small(), 3).unwrap();
        let b = Parameters::<f32>::init(small(), 3).unwrap();
        let c = Parameters::<f32>::init(small(), 4).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
    }

    #[test]
    fn named_order_matches_mutable_order() {
        let mut p = Parameters::<f32>::init(small(), 0).unwrap();
        let shapes: Vec<Vec<usize>> = p.tensors().iter().map(|t| t.shape().to_vec()).collect();
        let shapes_mut: Vec<Vec<usize>> = p.tensors_mut().iter().map(|t| t.shape().to_vec()).collect();
        assert_eq!(shapes, shapes_mut);
        assert_eq!(p.names().len(), 1 + 2 * LAYER_TENSORS + 3);
    }

    #[test]
    fn from_named_round_trips() {
        let p = Parameters::<f32>::init(small(), 9).unwrap();
        let named = p.named_tensors().into_iter().map(|(n, t)| (n, t.clone())).collect();
        assert_eq!(Parameters::from_named(small(), named).unwrap(), p);
    }
}
