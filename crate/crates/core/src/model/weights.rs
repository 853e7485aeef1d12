//! Parameter containers generic over storage: `Weights<Tensor>` holds values,
//! `Weights<Var>` the same parameters bound to a tape.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{FastError, Result};
use crate::model::config::ModelConfig;
use crate::numerics::{Tape, Tensor, Var};

const INIT_STD: f64 = 0.02;

#[derive(Debug, Clone, PartialEq)]
pub struct LayerWeights<T> {
    pub ln1_gain: T,
    pub ln1_bias: T,
    pub query: T,
    pub query_bias: T,
    pub key: T,
    pub key_bias: T,
    pub value: T,
    pub value_bias: T,
    pub out: T,
    pub out_bias: T,
    pub ln2_gain: T,
    pub ln2_bias: T,
    /// FFN keys `K`, shape `[d_ffn, d_model]`.
    pub ffn_keys: T,
    /// FFN values `V`, shape `[d_ffn, d_model]`.
    pub ffn_values: T,
}

const LAYER_FIELDS: usize = 14;

impl<T> LayerWeights<T> {
    fn fields(&self) -> [&T; LAYER_FIELDS] {
        [
            &self.ln1_gain,
            &self.ln1_bias,
            &self.query,
            &self.query_bias,
            &self.key,
            &self.key_bias,
            &self.value,
            &self.value_bias,
            &self.out,
            &self.out_bias,
            &self.ln2_gain,
            &self.ln2_bias,
            &self.ffn_keys,
            &self.ffn_values,
        ]
    }

    fn fields_mut(&mut self) -> [&mut T; LAYER_FIELDS] {
        [
            &mut self.ln1_gain,
            &mut self.ln1_bias,
            &mut self.query,
            &mut self.query_bias,
            &mut self.key,
            &mut self.key_bias,
            &mut self.value,
            &mut self.value_bias,
            &mut self.out,
            &mut self.out_bias,
            &mut self.ln2_gain,
            &mut self.ln2_bias,
            &mut self.ffn_keys,
            &mut self.ffn_values,
        ]
    }

    fn from_iter(it: &mut impl Iterator<Item = T>) -> Option<Self> {
        Some(LayerWeights {
            ln1_gain: it.next()?,
            ln1_bias: it.next()?,
            query: it.next()?,
            query_bias: it.next()?,
            key: it.next()?,
            key_bias: it.next()?,
            value: it.next()?,
            value_bias: it.next()?,
            out: it.next()?,
            out_bias: it.next()?,
            ln2_gain: it.next()?,
            ln2_bias: it.next()?,
            ffn_keys: it.next()?,
            ffn_values: it.next()?,
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Weights<T> {
    pub token_embedding: T,
    pub position_embedding: T,
    pub layers: Vec<LayerWeights<T>>,
    pub final_gain: T,
    pub final_bias: T,
    /// Readout transform applied before the tied embedding projection.
    pub head: T,
    pub head_bias: T,
    pub vocab_bias: T,
}

impl<T> Weights<T> {
    /// All parameters in declared (checkpoint) order.
    pub fn iter(&self) -> Vec<&T> {
        let mut out = vec![&self.token_embedding, &self.position_embedding];
        for l in &self.layers {
            out.extend(l.fields());
        }
        out.extend([&self.final_gain, &self.final_bias, &self.head, &self.head_bias, &self.vocab_bias]);
        out
    }

    pub fn iter_mut(&mut self) -> Vec<&mut T> {
        let mut out = vec![&mut self.token_embedding, &mut self.position_embedding];
        for l in &mut self.layers {
            out.extend(l.fields_mut());
        }
        out.extend([
            &mut self.final_gain,
            &mut self.final_bias,
            &mut self.head,
            &mut self.head_bias,
            &mut self.vocab_bias,
        ]);
        out
    }

    /// Inverse of [`Weights::iter`].
    pub fn from_vec(n_layers: usize, items: Vec<T>) -> Option<Self> {
        if items.len() != 7 + n_layers * LAYER_FIELDS {
            return None;
        }
        let mut it = items.into_iter();
        let token_embedding = it.next()?;
        let position_embedding = it.next()?;
        let layers = (0..n_layers)
            .map(|_| LayerWeights::from_iter(&mut it))
            .collect::<Option<Vec<_>>>()?;
        Some(Weights {
            token_embedding,
            position_embedding,
            layers,
            final_gain: it.next()?,
            final_bias: it.next()?,
            head: it.next()?,
            head_bias: it.next()?,
            vocab_bias: it.next()?,
        })
    }
}

/// Expected shape of every parameter, in declared order.
pub fn parameter_shapes(c: &ModelConfig) -> Vec<Vec<usize>> {
    let (d, f) = (c.d_model, c.d_ffn);
    let mut out = vec![vec![c.vocab_size, d], vec![c.max_seq_len, d]];
    for _ in 0..c.n_layers {
        out.extend([
            vec![d],
            vec![d],
            vec![d, d],
            vec![d],
            vec![d, d],
            vec![d],
            vec![d, d],
            vec![d],
            vec![d, d],
            vec![d],
            vec![d],
            vec![d],
            vec![f, d],
            vec![f, d],
        ]);
    }
    out.extend([vec![d], vec![d], vec![d, d], vec![d], vec![c.vocab_size]]);
    out
}

impl Weights<Tensor> {
    /// Small-normal matrices and embeddings, unit gains, zero biases. The readout
    /// head starts at zero so an untrained model predicts the uniform distribution.
    pub fn init(c: &ModelConfig, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (d, f) = (c.d_model, c.d_ffn);
        let mut normal = |shape: &[usize]| Tensor::randn(shape, INIT_STD, &mut rng);
        let token_embedding = normal(&[c.vocab_size, d]);
        let position_embedding = normal(&[c.max_seq_len, d]);
        let layers = (0..c.n_layers)
            .map(|_| LayerWeights {
                ln1_gain: Tensor::full(&[d], 1.0),
                ln1_bias: Tensor::zeros(&[d]),
                query: normal(&[d, d]),
                query_bias: Tensor::zeros(&[d]),
                key: normal(&[d, d]),
                key_bias: Tensor::zeros(&[d]),
                value: normal(&[d, d]),
                value_bias: Tensor::zeros(&[d]),
                out: normal(&[d, d]),
                out_bias: Tensor::zeros(&[d]),
                ln2_gain: Tensor::full(&[d], 1.0),
                ln2_bias: Tensor::zeros(&[d]),
                ffn_keys: normal(&[f, d]),
                ffn_values: normal(&[f, d]),
            })
            .collect();
        Weights {
            token_embedding,
            position_embedding,
            layers,
            final_gain: Tensor::full(&[d], 1.0),
            final_bias: Tensor::zeros(&[d]),
            head: Tensor::zeros(&[d, d]),
            head_bias: Tensor::zeros(&[d]),
            vocab_bias: Tensor::zeros(&[c.vocab_size]),
        }
    }

    pub fn from_tensors(c: &ModelConfig, tensors: Vec<Tensor>) -> Result<Self> {
        let shapes = parameter_shapes(c);
        if shapes.len() != tensors.len() {
            return Err(FastError::Validation(format!(
                "expected {} parameter tensors, got {}",
                shapes.len(),
                tensors.len()
            )));
        }
        for (s, t) in shapes.iter().zip(&tensors) {
            if s.as_slice() != t.shape() {
                return Err(FastError::dim("parameters", s, t.shape()));
            }
        }
        Ok(Weights::from_vec(c.n_layers, tensors).expect("count checked"))
    }

    /// Places every parameter on `tape`, trainable or frozen.
    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> Weights<Var> {
        let vars = self
            .iter()
            .into_iter()
            .map(|t| {
                if trainable {
                    tape.param(t.clone())
                } else {
                    tape.constant(t.clone())
                }
            })
            .collect();
        Weights::from_vec(self.layers.len(), vars).expect("same layout")
    }
}
