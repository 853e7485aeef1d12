//! Pre-norm bidirectional transformer with a masked-LM readout.
//!
//! Residual stream per layer `l`:
//!
//! ```text
//! x  = x + Attn(LN1(x))
//! h  = LN2(x)
//! x  = x + Act(h Kᵀ) V  [+ Act(h K'ᵀ) V' when a stamp is attached]
//! ```
//!
//! The state after layer `l` is what capture records and what patches overwrite.
//! The readout is `(LN_f(x) W_head + b_head) Eᵀ + b_vocab` with `E` the token embedding.

use crate::error::{FastError, Result};
use crate::knowledge::tokenizer::{MASK_ID, PAD_ID};
use crate::model::config::{Activation, ModelConfig};
use crate::model::stamp::FairnessStamp;
use crate::model::weights::Weights;
use crate::numerics::{softmax, AttentionLayout, Tape, Tensor, Var};

/// Where a patch overwrites residual-stream rows.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum PatchSite {
    /// Token + position embeddings, before layer 0.
    Embedding,
    /// Output of layer `l` (after its FFN residual add).
    Layer(usize),
}

/// Replacement hidden states for some token positions at one site.
#[derive(Debug, Clone, PartialEq)]
pub struct PatchSpec {
    pub site: PatchSite,
    pub positions: Vec<usize>,
    /// `[positions.len(), d_model]`.
    pub states: Tensor,
}

impl PatchSpec {
    /// Patch that copies the given positions of a captured state.
    pub fn from_capture(site: PatchSite, positions: &[usize], captured: &Tensor) -> Self {
        let d = captured.cols();
        let mut data = Vec::with_capacity(positions.len() * d);
        for &p in positions {
            data.extend_from_slice(captured.row(p));
        }
        PatchSpec {
            site,
            positions: positions.to_vec(),
            states: Tensor::matrix(positions.len(), d, data).expect("rows of a matrix"),
        }
    }
}

/// Residual-stream states recorded during one forward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct ForwardTrace {
    /// `[seq_len, d_model]` embedding-level state.
    pub embedding: Tensor,
    /// One `[seq_len, d_model]` state per layer.
    pub layers: Vec<Tensor>,
    pub distribution: Vec<f64>,
}

impl ForwardTrace {
    pub fn state(&self, site: PatchSite) -> &Tensor {
        match site {
            PatchSite::Embedding => &self.embedding,
            PatchSite::Layer(l) => &self.layers[l],
        }
    }
}

/// Padded batch of token sequences.
#[derive(Debug, Clone, PartialEq)]
pub struct SeqBatch {
    pub tokens: Vec<usize>,
    pub valid: Vec<bool>,
    pub batch: usize,
    pub seq_len: usize,
}

impl SeqBatch {
    pub fn new<S: AsRef<[usize]>>(seqs: &[S]) -> Self {
        let seq_len = seqs.iter().map(|s| s.as_ref().len()).max().unwrap_or(0);
        let mut tokens = Vec::with_capacity(seqs.len() * seq_len);
        let mut valid = Vec::with_capacity(seqs.len() * seq_len);
        for s in seqs {
            let s = s.as_ref();
            tokens.extend_from_slice(s);
            valid.extend(std::iter::repeat_n(true, s.len()));
            tokens.extend(std::iter::repeat_n(PAD_ID, seq_len - s.len()));
            valid.extend(std::iter::repeat_n(false, seq_len - s.len()));
        }
        SeqBatch {
            tokens,
            valid,
            batch: seqs.len(),
            seq_len,
        }
    }

    pub fn row(&self, seq: usize, pos: usize) -> usize {
        seq * self.seq_len + pos
    }
}

/// Trainable stamp parameters bound on a tape.
#[derive(Debug, Clone, Copy)]
pub struct StampBinding {
    pub layer: usize,
    pub keys: Var,
    pub values: Var,
    pub activation: Activation,
}

#[derive(Debug, Clone)]
pub struct GraphOutput {
    /// Final layer-normed states `[batch * seq_len, d_model]`.
    pub hidden: Var,
    pub embedding: Var,
    pub layer_states: Vec<Var>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MicroTransformer {
    config: ModelConfig,
    weights: Weights<Tensor>,
    stamps: Vec<Option<FairnessStamp>>,
}

fn activate(tape: &mut Tape, x: Var, act: Activation) -> Var {
    match act {
        Activation::Relu => tape.relu(x),
        Activation::Gelu => tape.gelu(x),
    }
}

fn linear(tape: &mut Tape, x: Var, w: Var, b: Var) -> Result<Var> {
    let y = tape.matmul(x, w)?;
    tape.add_row(y, b)
}

/// `Act(h Kᵀ) V`.
fn key_value_memory(tape: &mut Tape, h: Var, keys: Var, values: Var, act: Activation) -> Result<Var> {
    let scores = tape.matmul_t(h, keys)?;
    let a = activate(tape, scores, act);
    tape.matmul(a, values)
}

impl MicroTransformer {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        Ok(MicroTransformer {
            weights: Weights::init(&config, seed),
            stamps: vec![None; config.n_layers],
            config,
        })
    }

    pub fn from_weights(config: ModelConfig, weights: Weights<Tensor>) -> Result<Self> {
        config.validate()?;
        let tensors = weights.iter().into_iter().cloned().collect();
        let weights = Weights::from_tensors(&config, tensors)?;
        Ok(MicroTransformer {
            weights,
            stamps: vec![None; config.n_layers],
            config,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn weights(&self) -> &Weights<Tensor> {
        &self.weights
    }

    pub fn weights_mut(&mut self) -> &mut Weights<Tensor> {
        &mut self.weights
    }

    /// Checksum over the base parameters only (stamps excluded).
    pub fn base_checksum(&self) -> u64 {
        use std::hash::Hasher;
        let mut h = fnv::FnvHasher::default();
        for t in self.weights.iter() {
            for v in t.data() {
                h.write_u64(v.to_bits());
            }
        }
        h.finish()
    }

    pub fn stamp(&self, layer: usize) -> Option<&FairnessStamp> {
        self.stamps.get(layer).and_then(|s| s.as_ref())
    }

    /// `(layer, stamp)` for every occupied slot.
    pub fn stamps(&self) -> impl Iterator<Item = (usize, &FairnessStamp)> {
        self.stamps
            .iter()
            .enumerate()
            .filter_map(|(l, s)| s.as_ref().map(|s| (l, s)))
    }

    pub fn attach_stamp(&mut self, layer: usize, stamp: FairnessStamp) -> Result<()> {
        self.check_layer(layer)?;
        if stamp.d_model() != self.config.d_model {
            return Err(FastError::dim("attach_stamp", stamp.keys.shape(), &[self.config.d_model]));
        }
        if self.stamps[layer].is_some() {
            return Err(FastError::State(format!(
                "layer {layer} already carries a stamp; detach it first"
            )));
        }
        self.stamps[layer] = Some(stamp);
        Ok(())
    }

    pub fn detach_stamp(&mut self, layer: usize) -> Result<FairnessStamp> {
        self.check_layer(layer)?;
        self.stamps[layer]
            .take()
            .ok_or_else(|| FastError::State(format!("layer {layer} has no stamp")))
    }

    pub fn without_stamps(&self) -> MicroTransformer {
        MicroTransformer {
            config: self.config,
            weights: self.weights.clone(),
            stamps: vec![None; self.config.n_layers],
        }
    }

    fn check_layer(&self, layer: usize) -> Result<()> {
        if layer >= self.config.n_layers {
            return Err(FastError::Input(format!(
                "layer {layer} out of range for a {}-layer model",
                self.config.n_layers
            )));
        }
        Ok(())
    }

    /// Checks length and vocabulary; returns the position of the single mask.
    pub fn check_prompt(&self, tokens: &[usize]) -> Result<usize> {
        if tokens.is_empty() || tokens.len() > self.config.max_seq_len {
            return Err(FastError::Input(format!(
                "sequence length {} outside 1..={}",
                tokens.len(),
                self.config.max_seq_len
            )));
        }
        if let Some(&t) = tokens.iter().find(|&&t| t >= self.config.vocab_size) {
            return Err(FastError::Vocab(format!("#{t}")));
        }
        let masks: Vec<usize> = (0..tokens.len()).filter(|&i| tokens[i] == MASK_ID).collect();
        match masks.as_slice() {
            [m] => Ok(*m),
            _ => Err(FastError::Input(format!(
                "expected exactly one [MASK], found {}",
                masks.len()
            ))),
        }
    }

    /// Records the forward graph for `batch` on `tape`. Attached stamps are bound as
    /// constants; `extra` supplies a tape-bound stamp for an empty slot.
    pub fn build_graph(
        &self,
        tape: &mut Tape,
        w: &Weights<Var>,
        extra: Option<&StampBinding>,
        batch: &SeqBatch,
        patches: &[PatchSpec],
    ) -> Result<GraphOutput> {
        let c = &self.config;
        if batch.seq_len > c.max_seq_len {
            return Err(FastError::Input(format!(
                "sequence length {} exceeds max_seq_len {}",
                batch.seq_len, c.max_seq_len
            )));
        }
        if let Some(e) = extra {
            self.check_layer(e.layer)?;
            if self.stamps[e.layer].is_some() {
                return Err(FastError::State(format!("layer {} already carries a stamp", e.layer)));
            }
        }
        for p in patches {
            if batch.batch != 1 {
                return Err(FastError::Usage("patching requires a single sequence".into()));
            }
            if let PatchSite::Layer(l) = p.site {
                self.check_layer(l)?;
            }
            if let Some(&pos) = p.positions.iter().find(|&&pos| pos >= batch.seq_len) {
                return Err(FastError::Input(format!(
                    "patch position {pos} outside sequence of length {}",
                    batch.seq_len
                )));
            }
            if p.states.shape() != [p.positions.len(), c.d_model] {
                return Err(FastError::dim("patch", p.states.shape(), &[p.positions.len(), c.d_model]));
            }
        }
        let apply = |tape: &mut Tape, x: Var, site: PatchSite| -> Result<Var> {
            let mut x = x;
            for p in patches.iter().filter(|p| p.site == site) {
                x = tape.overwrite_rows(x, &p.positions, &p.states)?;
            }
            Ok(x)
        };

        let positions: Vec<usize> = (0..batch.batch).flat_map(|_| 0..batch.seq_len).collect();
        let tok = tape.embedding(w.token_embedding, &batch.tokens)?;
        let pos = tape.embedding(w.position_embedding, &positions)?;
        let x = tape.add(tok, pos)?;
        let mut x = apply(tape, x, PatchSite::Embedding)?;
        let embedding = x;
        let layout = AttentionLayout {
            batch: batch.batch,
            seq_len: batch.seq_len,
            heads: c.n_heads,
            key_valid: batch.valid.clone(),
        };
        let constant_stamps: Vec<Option<(Var, Var, Activation)>> = self
            .stamps
            .iter()
            .map(|s| {
                s.as_ref().map(|s| {
                    (
                        tape.constant(s.keys.clone()),
                        tape.constant(s.values.clone()),
                        s.activation,
                    )
                })
            })
            .collect();

        let mut layer_states = Vec::with_capacity(c.n_layers);
        for (l, lw) in w.layers.iter().enumerate() {
            let a = tape.layer_norm(x, lw.ln1_gain, lw.ln1_bias)?;
            let q = linear(tape, a, lw.query, lw.query_bias)?;
            let k = linear(tape, a, lw.key, lw.key_bias)?;
            let v = linear(tape, a, lw.value, lw.value_bias)?;
            let attn = tape.attention(q, k, v, &layout)?;
            let o = linear(tape, attn, lw.out, lw.out_bias)?;
            x = tape.add(x, o)?;

            let h = tape.layer_norm(x, lw.ln2_gain, lw.ln2_bias)?;
            let mut f = key_value_memory(tape, h, lw.ffn_keys, lw.ffn_values, c.activation)?;
            let stamp = match (extra, constant_stamps[l]) {
                (Some(e), _) if e.layer == l => Some((e.keys, e.values, e.activation)),
                (_, s) => s,
            };
            if let Some((keys, values, act)) = stamp {
                let s = key_value_memory(tape, h, keys, values, act)?;
                f = tape.add(f, s)?;
            }
            x = tape.add(x, f)?;
            x = apply(tape, x, PatchSite::Layer(l))?;
            layer_states.push(x);
        }
        let hidden = tape.layer_norm(x, w.final_gain, w.final_bias)?;
        Ok(GraphOutput {
            hidden,
            embedding,
            layer_states,
        })
    }

    /// Vocabulary logits for the given rows of `hidden`.
    pub fn readout(&self, tape: &mut Tape, w: &Weights<Var>, hidden: Var, rows: &[usize]) -> Result<Var> {
        let sel = tape.select_rows(hidden, rows)?;
        let z = linear(tape, sel, w.head, w.head_bias)?;
        let logits = tape.matmul_t(z, w.token_embedding)?;
        tape.add_row(logits, w.vocab_bias)
    }

    fn run(&self, tokens: &[usize], patches: &[PatchSpec], capture: bool) -> Result<(Vec<f64>, Option<ForwardTrace>)> {
        let mask = self.check_prompt(tokens)?;
        let mut tape = Tape::new();
        let w = self.weights.bind(&mut tape, false);
        let batch = SeqBatch::new(&[tokens]);
        let out = self.build_graph(&mut tape, &w, None, &batch, patches)?;
        let logits = self.readout(&mut tape, &w, out.hidden, &[mask])?;
        let dist = softmax(tape.value(logits));
        if !dist.is_finite() {
            return Err(FastError::NonFinite("mask distribution".into()));
        }
        let trace = capture.then(|| ForwardTrace {
            embedding: tape.value(out.embedding).clone(),
            layers: out.layer_states.iter().map(|&v| tape.value(v).clone()).collect(),
            distribution: dist.data().to_vec(),
        });
        Ok((dist.into_data(), trace))
    }

    /// Distribution over the vocabulary at the single mask position.
    pub fn forward_mlm(&self, tokens: &[usize]) -> Result<Vec<f64>> {
        Ok(self.run(tokens, &[], false)?.0)
    }

    pub fn forward_with_capture(&self, tokens: &[usize]) -> Result<(Vec<f64>, ForwardTrace)> {
        let (d, t) = self.run(tokens, &[], true)?;
        Ok((d, t.expect("capture requested")))
    }

    pub fn forward_with_patch(&self, tokens: &[usize], patches: &[PatchSpec]) -> Result<Vec<f64>> {
        Ok(self.run(tokens, patches, false)?.0)
    }

    /// Mask distributions for many prompts, evaluated in padded batches.
    pub fn mask_distributions<S: AsRef<[usize]>>(&self, prompts: &[S]) -> Result<Vec<Vec<f64>>> {
        let mut out = Vec::with_capacity(prompts.len());
        for chunk in prompts.chunks(64) {
            let masks = chunk
                .iter()
                .map(|p| self.check_prompt(p.as_ref()))
                .collect::<Result<Vec<_>>>()?;
            let mut tape = Tape::new();
            let w = self.weights.bind(&mut tape, false);
            let batch = SeqBatch::new(chunk);
            let g = self.build_graph(&mut tape, &w, None, &batch, &[])?;
            let rows: Vec<usize> = masks.iter().enumerate().map(|(i, &m)| batch.row(i, m)).collect();
            let logits = self.readout(&mut tape, &w, g.hidden, &rows)?;
            let dist = softmax(tape.value(logits));
            if !dist.is_finite() {
                return Err(FastError::NonFinite("mask distribution".into()));
            }
            out.extend((0..rows.len()).map(|r| dist.row(r).to_vec()));
        }
        Ok(out)
    }
}
