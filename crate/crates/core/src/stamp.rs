//! Training a fairness stamp on a frozen model.
//!
//! ```text
//! L   = L_e + α L_s1 + β L_s2
//! L_e  = mean |P[o₁ | p₁] − P[o₂ | p₂]|           over pairs × prefix variants
//! L_s1 = mean KL(P_base[·|p] ‖ P_edit[·|p])        over pair prompts × prefix variants
//! L_s2 = mean KL(P_base[·|p'(s)] ‖ P_edit[·|p'(s)]) over distinct subjects × prefix variants
//! ```

use std::collections::HashMap;
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use crate::model::FairnessStamp;

use crate::error::{FastError, Result};
use crate::knowledge::{render_prompt, render_simple_prompt, BiasedPair, Prompt, Tokenizer, DEFAULT_PREFIXES};
use crate::model::{Activation, MicroTransformer, SeqBatch, StampBinding};
use crate::numerics::{AdamConfig, AdamState, Tape, Tensor, Var};

/// Which terms see the prefixed prompt variants.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PrefixScope {
    All,
    SpecificityOnly,
}

/// Support of the prompt-specificity KL.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SpecificityScope {
    /// Full vocabulary at the mask.
    FullVocabulary,
    /// Vocabulary minus the pair's scored objects, renormalized.
    OtherObjects,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EditConfig {
    /// `None` picks the decisive layer.
    pub target_layer: Option<usize>,
    pub d_c: usize,
    pub alpha: f64,
    pub beta: f64,
    pub lr: f64,
    pub iters_per_batch: usize,
    pub batch_size: usize,
    pub prefix_count: usize,
    pub prefix_scope: PrefixScope,
    pub specificity_scope: SpecificityScope,
    pub activation: Activation,
    pub seed: u64,
}

impl Default for EditConfig {
    fn default() -> Self {
        EditConfig {
            target_layer: None,
            d_c: 256,
            alpha: 40.0,
            beta: 0.1,
            lr: 0.1,
            iters_per_batch: 20,
            batch_size: 4,
            prefix_count: 2,
            prefix_scope: PrefixScope::All,
            specificity_scope: SpecificityScope::FullVocabulary,
            activation: Activation::Relu,
            seed: 7,
        }
    }
}

impl EditConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(FastError::Validation(m));
        if self.d_c == 0 {
            return bad("d_c must be >= 1".into());
        }
        if !(self.alpha >= 0.0 && self.beta >= 0.0 && self.alpha.is_finite() && self.beta.is_finite()) {
            return bad(format!("alpha {} and beta {} must be finite and >= 0", self.alpha, self.beta));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad(format!("lr {} must be positive", self.lr));
        }
        if self.batch_size == 0 {
            return bad("batch_size must be >= 1".into());
        }
        Ok(())
    }
}

/// Deterministic choice of `count` prefixes from `pool`, in pool order.
pub fn select_prefixes<T>(pool: &[T], count: usize, seed: u64) -> Result<Vec<&T>> {
    if count > pool.len() {
        return Err(FastError::Usage(format!(
            "prefix count {count} exceeds pool size {}",
            pool.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut idx = rand::seq::index::sample(&mut rng, pool.len(), count).into_vec();
    idx.sort_unstable();
    Ok(idx.into_iter().map(|i| &pool[i]).collect())
}

/// The bare prompt followed by one variant per selected prefix.
pub fn prefix_augment(
    prompt: &Prompt,
    pool: &[Vec<usize>],
    count: usize,
    seed: u64,
    max_seq_len: usize,
) -> Result<Vec<Prompt>> {
    let mut out = vec![prompt.clone()];
    for p in select_prefixes(pool, count, seed)? {
        out.push(prompt.with_prefix(p, max_seq_len)?);
    }
    Ok(out)
}

pub fn default_prefix_pool(tokenizer: &Tokenizer) -> Result<Vec<Vec<usize>>> {
    DEFAULT_PREFIXES.iter().map(|p| tokenizer.encode(p)).collect()
}

/// `mean |a − b|` over `(P[k₁], P[k₂])` pairs.
pub fn fairness_gap(pairs: &[(f64, f64)]) -> f64 {
    pairs.iter().map(|(a, b)| (a - b).abs()).sum::<f64>() / pairs.len() as f64
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossValues {
    pub fairness: f64,
    pub specificity_prompts: f64,
    pub specificity_subjects: f64,
    pub total: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct FairnessTerm {
    row1: usize,
    object1: usize,
    row2: usize,
    object2: usize,
}

#[derive(Debug, Clone, PartialEq)]
struct Row {
    tokens: Vec<usize>,
    mask: usize,
    /// Token ids removed from the support of the prompt KL.
    excluded: Vec<usize>,
}

/// Prompts, index bookkeeping and cached base distributions for one batch of pairs.
#[derive(Debug, Clone)]
pub struct EditProblem {
    rows: Vec<Row>,
    fairness: Vec<FairnessTerm>,
    prompt_rows: Vec<usize>,
    subject_rows: Vec<usize>,
    alpha: f64,
    beta: f64,
    scope: SpecificityScope,
    base: Option<Tensor>,
}

#[derive(Default)]
struct RowIndex {
    rows: Vec<Row>,
    index: HashMap<Vec<usize>, usize>,
}

impl RowIndex {
    fn add(&mut self, p: &Prompt) -> usize {
        if let Some(&i) = self.index.get(&p.tokens) {
            return i;
        }
        self.rows.push(Row {
            tokens: p.tokens.clone(),
            mask: p.mask_index,
            excluded: Vec::new(),
        });
        self.index.insert(p.tokens.clone(), self.rows.len() - 1);
        self.rows.len() - 1
    }
}

impl EditProblem {
    /// Renders every prompt the three losses need. Base distributions are not yet cached.
    pub fn prepare(
        tokenizer: &Tokenizer,
        pairs: &[&BiasedPair],
        config: &EditConfig,
        prefix_pool: &[Vec<usize>],
        max_seq_len: usize,
    ) -> Result<Self> {
        if pairs.is_empty() {
            return Err(FastError::Usage("cannot edit an empty batch".into()));
        }
        let variants = |p: &Prompt| prefix_augment(p, prefix_pool, config.prefix_count, config.seed, max_seq_len);
        let mut idx = RowIndex::default();
        let mut fairness = Vec::new();
        let mut prompt_rows = Vec::new();
        let mut subjects: Vec<&str> = Vec::new();
        for pair in pairs {
            let p1 = render_prompt(tokenizer, &pair.stereotyped, max_seq_len)?;
            let p2 = render_prompt(tokenizer, &pair.counterfactual, max_seq_len)?;
            let o1 = tokenizer.id(&pair.stereotyped.object)?;
            let o2 = tokenizer.id(&pair.counterfactual.object)?;
            let (v1, v2) = (variants(&p1)?, variants(&p2)?);
            for (j, (a, b)) in v1.iter().zip(&v2).enumerate() {
                let (r1, r2) = (idx.add(a), idx.add(b));
                for r in [r1, r2] {
                    for o in [o1, o2] {
                        if !idx.rows[r].excluded.contains(&o) {
                            idx.rows[r].excluded.push(o);
                        }
                    }
                    if !prompt_rows.contains(&r) {
                        prompt_rows.push(r);
                    }
                }
                if j == 0 || config.prefix_scope == PrefixScope::All {
                    fairness.push(FairnessTerm {
                        row1: r1,
                        object1: o1,
                        row2: r2,
                        object2: o2,
                    });
                }
            }
            for s in [&pair.stereotyped.subject, &pair.counterfactual.subject] {
                if !subjects.contains(&s.as_str()) {
                    subjects.push(s);
                }
            }
        }
        let mut subject_rows = Vec::new();
        for s in subjects {
            for v in variants(&render_simple_prompt(tokenizer, s, max_seq_len)?)? {
                let r = idx.add(&v);
                if !subject_rows.contains(&r) {
                    subject_rows.push(r);
                }
            }
        }
        Ok(EditProblem {
            rows: idx.rows,
            fairness,
            prompt_rows,
            subject_rows,
            alpha: config.alpha,
            beta: config.beta,
            scope: config.specificity_scope,
            base: None,
        })
    }

    pub fn n_sequences(&self) -> usize {
        self.rows.len()
    }

    /// Caches the model's current mask distributions as the specificity reference.
    pub fn capture_base(&mut self, model: &MicroTransformer) -> Result<()> {
        let seqs: Vec<&[usize]> = self.rows.iter().map(|r| r.tokens.as_slice()).collect();
        let dists = model.mask_distributions(&seqs)?;
        let v = model.config().vocab_size;
        let data = dists.into_iter().flatten().collect();
        self.base = Some(Tensor::matrix(self.rows.len(), v, data)?);
        Ok(())
    }

    fn base(&self) -> Result<&Tensor> {
        self.base
            .as_ref()
            .ok_or_else(|| FastError::State("base distributions have not been cached".into()))
    }

    fn reference_rows(&self, rows: &[usize], exclude: bool) -> Result<Tensor> {
        let base = self.base()?;
        let v = base.cols();
        let mut data = Vec::with_capacity(rows.len() * v);
        for &r in rows {
            let mut p = base.row(r).to_vec();
            if exclude {
                for &o in &self.rows[r].excluded {
                    p[o] = 0.0;
                }
                let z: f64 = p.iter().sum();
                p.iter_mut().for_each(|x| *x /= z);
            }
            data.extend(p);
        }
        Tensor::matrix(rows.len(), v, data)
    }

    /// Records the objective on `tape`; returns `(L_e, L_s1, L_s2, L)`.
    fn graph(
        &self,
        tape: &mut Tape,
        model: &MicroTransformer,
        binding: Option<&StampBinding>,
    ) -> Result<[Var; 4]> {
        let base_prompts = self.reference_rows(&self.prompt_rows, self.scope == SpecificityScope::OtherObjects)?;
        let base_subjects = self.reference_rows(&self.subject_rows, false)?;
        let w = model.weights().bind(tape, false);
        let batch = SeqBatch::new(&self.rows.iter().map(|r| r.tokens.clone()).collect::<Vec<_>>());
        let g = model.build_graph(tape, &w, binding, &batch, &[])?;
        let mask_rows: Vec<usize> = self.rows.iter().enumerate().map(|(i, r)| batch.row(i, r.mask)).collect();
        let logits = model.readout(tape, &w, g.hidden, &mask_rows)?;
        let v = model.config().vocab_size;
        let probs = tape.softmax(logits);

        let mut a_idx = Vec::with_capacity(self.fairness.len());
        let mut b_idx = Vec::with_capacity(self.fairness.len());
        for t in &self.fairness {
            a_idx.push(t.row1 * v + t.object1);
            b_idx.push(t.row2 * v + t.object2);
        }
        let a = tape.gather(probs, &a_idx)?;
        let b = tape.gather(probs, &b_idx)?;
        let diff = tape.sub(a, b)?;
        let gap = tape.abs(diff);
        let l_e = tape.mean(gap)?;

        let prompt_q = match self.scope {
            SpecificityScope::FullVocabulary => tape.select_rows(probs, &self.prompt_rows)?,
            SpecificityScope::OtherObjects => {
                let sel = tape.select_rows(logits, &self.prompt_rows)?;
                let mut mask = vec![0.0; self.prompt_rows.len() * v];
                for (i, &r) in self.prompt_rows.iter().enumerate() {
                    for &o in &self.rows[r].excluded {
                        mask[i * v + o] = f64::NEG_INFINITY;
                    }
                }
                let mask = tape.constant(Tensor::matrix(self.prompt_rows.len(), v, mask)?);
                let masked = tape.add(sel, mask)?;
                tape.softmax(masked)
            }
        };
        let kl1 = tape.kl_rows(&base_prompts, prompt_q)?;
        let l_s1 = tape.mean(kl1)?;
        let subject_q = tape.select_rows(probs, &self.subject_rows)?;
        let kl2 = tape.kl_rows(&base_subjects, subject_q)?;
        let l_s2 = tape.mean(kl2)?;

        let s1 = tape.scale(l_s1, self.alpha);
        let s2 = tape.scale(l_s2, self.beta);
        let t = tape.add(l_e, s1)?;
        let total = tape.add(t, s2)?;
        Ok([l_e, l_s1, l_s2, total])
    }

    fn bind_stamp(tape: &mut Tape, layer: usize, stamp: &FairnessStamp, trainable: bool) -> StampBinding {
        let (keys, values) = if trainable {
            (tape.param(stamp.keys.clone()), tape.param(stamp.values.clone()))
        } else {
            (tape.constant(stamp.keys.clone()), tape.constant(stamp.values.clone()))
        };
        StampBinding {
            layer,
            keys,
            values,
            activation: stamp.activation,
        }
    }

    fn values(tape: &Tape, vars: [Var; 4]) -> Result<LossValues> {
        let item = |v: Var| tape.value(v).item();
        Ok(LossValues {
            fairness: item(vars[0])?,
            specificity_prompts: item(vars[1])?,
            specificity_subjects: item(vars[2])?,
            total: item(vars[3])?,
        })
    }

    /// Loss components with `stamp` placed at `layer` (or no stamp).
    pub fn evaluate(&self, model: &MicroTransformer, stamp: Option<(usize, &FairnessStamp)>) -> Result<LossValues> {
        let mut tape = Tape::new();
        let binding = stamp.map(|(l, s)| Self::bind_stamp(&mut tape, l, s, false));
        let vars = self.graph(&mut tape, model, binding.as_ref())?;
        Self::values(&tape, vars)
    }

    /// Loss components and `(∂L/∂K', ∂L/∂V')`.
    pub fn gradients(
        &self,
        model: &MicroTransformer,
        layer: usize,
        stamp: &FairnessStamp,
    ) -> Result<(LossValues, Tensor, Tensor)> {
        let mut tape = Tape::new();
        let binding = Self::bind_stamp(&mut tape, layer, stamp, true);
        let vars = self.graph(&mut tape, model, Some(&binding))?;
        let values = Self::values(&tape, vars)?;
        if !values.total.is_finite() {
            return Err(FastError::NonFinite("stamp objective".into()));
        }
        let grads = tape.backward(vars[3])?;
        let gk = grads.get(binding.keys).expect("stamp keys are trainable").clone();
        let gv = grads.get(binding.values).expect("stamp values are trainable").clone();
        Ok((values, gk, gv))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationLog {
    pub batch: usize,
    pub iteration: usize,
    #[serde(flatten)]
    pub loss: LossValues,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairGap {
    pub pair: usize,
    pub label: String,
    /// `P[k₁] − P[k₂]` before editing.
    pub before: f64,
    pub after: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EditReport {
    pub layer: usize,
    pub d_c: usize,
    pub d_model: usize,
    pub stamp_parameters: usize,
    pub config: EditConfig,
    pub history: Vec<IterationLog>,
    pub gaps: Vec<PairGap>,
    /// Excluded from serialized reports so they stay reproducible.
    #[serde(skip)]
    pub wall_time_s: f64,
}

/// Signed `P[k₁] − P[k₂]` on the bare prompts of each pair.
pub fn pair_gaps(model: &MicroTransformer, tokenizer: &Tokenizer, pairs: &[BiasedPair]) -> Result<Vec<f64>> {
    let max = model.config().max_seq_len;
    let mut prompts = Vec::with_capacity(2 * pairs.len());
    let mut objects = Vec::with_capacity(2 * pairs.len());
    for p in pairs {
        for k in [&p.stereotyped, &p.counterfactual] {
            prompts.push(render_prompt(tokenizer, k, max)?.tokens);
            objects.push(tokenizer.id(&k.object)?);
        }
    }
    let d = model.mask_distributions(&prompts)?;
    Ok((0..pairs.len())
        .map(|i| d[2 * i][objects[2 * i]] - d[2 * i + 1][objects[2 * i + 1]])
        .collect())
}

/// Trains one stamp at `layer` over `pairs` in sequential batches and attaches it.
/// Only the stamp receives updates; the base parameters stay bitwise unchanged.
pub fn train_stamp(
    model: &mut MicroTransformer,
    tokenizer: &Tokenizer,
    pairs: &[BiasedPair],
    layer: usize,
    config: &EditConfig,
    prefix_pool: &[Vec<usize>],
) -> Result<(FairnessStamp, EditReport)> {
    config.validate()?;
    if pairs.is_empty() {
        return Err(FastError::Usage("cannot edit an empty pair set".into()));
    }
    let c = *model.config();
    if layer >= c.n_layers {
        return Err(FastError::Input(format!("layer {layer} out of range for a {}-layer model", c.n_layers)));
    }
    if model.stamp(layer).is_some() {
        return Err(FastError::State(format!("layer {layer} already carries a stamp")));
    }
    let start = Instant::now();
    let before = pair_gaps(model, tokenizer, pairs)?;
    let mut stamp = FairnessStamp::new(config.d_c, c.d_model, config.activation, config.seed);
    let mut adam = AdamState::new(AdamConfig::with_lr(config.lr), &[&stamp.keys, &stamp.values]);
    let mut history = Vec::new();
    let refs: Vec<&BiasedPair> = pairs.iter().collect();
    for (b, batch) in refs.chunks(config.batch_size).enumerate() {
        let mut problem = EditProblem::prepare(tokenizer, batch, config, prefix_pool, c.max_seq_len)?;
        problem.capture_base(model)?;
        for it in 0..config.iters_per_batch {
            let (loss, gk, gv) = problem.gradients(model, layer, &stamp).map_err(|e| match e {
                FastError::NonFinite(_) => FastError::Divergence {
                    stage: "stamp",
                    iteration: history.len(),
                    loss: f64::NAN,
                },
                other => other,
            })?;
            adam.step(&mut [&mut stamp.keys, &mut stamp.values], &[&gk, &gv])?;
            history.push(IterationLog {
                batch: b,
                iteration: it,
                loss,
            });
        }
    }
    if !(stamp.keys.is_finite() && stamp.values.is_finite()) {
        return Err(FastError::Divergence {
            stage: "stamp",
            iteration: history.len(),
            loss: f64::NAN,
        });
    }
    model.attach_stamp(layer, stamp.clone())?;
    let after = pair_gaps(model, tokenizer, pairs)?;
    let gaps = pairs
        .iter()
        .enumerate()
        .map(|(i, p)| PairGap {
            pair: i,
            label: p.label(),
            before: before[i],
            after: after[i],
        })
        .collect();
    let report = EditReport {
        layer,
        d_c: config.d_c,
        d_model: c.d_model,
        stamp_parameters: stamp.param_count(),
        config: EditConfig {
            target_layer: Some(layer),
            ..config.clone()
        },
        history,
        gaps,
        wall_time_s: start.elapsed().as_secs_f64(),
    };
    Ok((stamp, report))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::knowledge::{render, FlipKind};
    use crate::model::{ModelConfig, Weights};

    fn tok() -> Tokenizer {
        Tokenizer::build(["man woman is good at math art spoon a my friend said"])
    }

    fn model(tok: &Tokenizer) -> MicroTransformer {
        let c = ModelConfig {
            n_layers: 2,
            d_model: 8,
            n_heads: 2,
            d_ffn: 16,
            vocab_size: tok.len(),
            max_seq_len: 10,
            activation: Activation::Gelu,
        };
        let mut w = Weights::init(&c, 11);
        w.head = Tensor::randn(&[8, 8], 0.5, &mut ChaCha8Rng::seed_from_u64(12));
        MicroTransformer::from_weights(c, w).unwrap()
    }

    fn pair() -> BiasedPair {
        BiasedPair::new("man", "woman", "is good at", "math", "math", "spoon", FlipKind::Subject)
    }

    fn pool(tok: &Tokenizer) -> Vec<Vec<usize>> {
        ["my friend said", "a friend said", "my friend"]
            .iter()
            .map(|p| tok.encode(p).unwrap())
            .collect()
    }

    fn config(prefix_count: usize) -> EditConfig {
        EditConfig {
            d_c: 6,
            alpha: 3.0,
            beta: 0.7,
            prefix_count,
            ..EditConfig::default()
        }
    }

    fn random_stamp(seed: u64) -> FairnessStamp {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut s = FairnessStamp::new(6, 8, Activation::Relu, seed);
        s.keys = Tensor::randn(&[6, 8], 0.5, &mut rng);
        s.values = Tensor::randn(&[6, 8], 0.5, &mut rng);
        s
    }

    #[test]
    fn prefix_augmentation() {
        let t = tok();
        let p = render_prompt(&t, &pair().stereotyped, 10).unwrap();
        assert_eq!(prefix_augment(&p, &pool(&t), 0, 1, 10).unwrap(), vec![p.clone()]);
        let a = prefix_augment(&p, &pool(&t), 2, 1, 10).unwrap();
        assert_eq!(a, prefix_augment(&p, &pool(&t), 2, 1, 10).unwrap());
        assert_eq!(a.len(), 3);
        assert_eq!(a[0], p);
        for v in &a[1..] {
            let n = v.tokens.len() - p.tokens.len();
            assert_eq!(v.tokens[n..], p.tokens[..]);
            assert_eq!(v.mask_index, p.mask_index + n);
            assert_eq!(v.tokens[v.mask_index], crate::knowledge::MASK_ID);
            assert_eq!(v.subject_span, p.subject_span.start + n..p.subject_span.end + n);
        }
        assert!(matches!(prefix_augment(&p, &pool(&t), 4, 1, 10), Err(FastError::Usage(_))));
        assert!(matches!(prefix_augment(&p, &pool(&t), 1, 1, 5), Err(FastError::Input(_))));
    }

    #[test]
    fn fairness_gap_examples() {
        assert_eq!(fairness_gap(&[(0.6, 0.0)]), 0.6);
        assert!((fairness_gap(&[(0.7, 0.1), (0.3, 0.5)]) - 0.4).abs() < 1e-15);
        assert_eq!(fairness_gap(&[(0.2, 0.2)]), 0.0);
    }

    #[test]
    fn zero_values_leave_only_the_base_gap() {
        let t = tok();
        let m = model(&t);
        let mut prob = EditProblem::prepare(&t, &[&pair()], &config(0), &pool(&t), 10).unwrap();
        prob.capture_base(&m).unwrap();
        let stamp = FairnessStamp::new(6, 8, Activation::Relu, 3);
        let l = prob.evaluate(&m, Some((1, &stamp))).unwrap();
        assert_eq!(l.specificity_prompts, 0.0);
        assert_eq!(l.specificity_subjects, 0.0);
        let g = pair_gaps(&m, &t, &[pair()]).unwrap()[0];
        assert!((l.fairness - g.abs()).abs() < 1e-14);
        assert_eq!(l, prob.evaluate(&m, None).unwrap());
    }

    /// Every term recomputed from plain forward passes.
    #[test]
    fn objective_matches_forward_passes() {
        let t = tok();
        let base = model(&t);
        let stamp = random_stamp(21);
        let mut edited = base.clone();
        edited.attach_stamp(1, stamp.clone()).unwrap();
        let kl = |p: &[f64], q: &[f64]| -> f64 {
            p.iter().zip(q).filter(|(a, _)| **a > 0.0).map(|(a, b)| a * (a / b).ln()).sum()
        };
        let prompt = |s: &str, r: &str| render(&t, s, r, 10).unwrap().tokens;
        let prompts = [prompt("man", "is good at"), prompt("woman", "is good at")];
        let subjects = [prompt("man", "is a"), prompt("woman", "is a")];
        let math = t.id("math").unwrap();

        let e: Vec<Vec<f64>> = prompts.iter().map(|p| edited.forward_mlm(p).unwrap()).collect();
        let b: Vec<Vec<f64>> = prompts.iter().map(|p| base.forward_mlm(p).unwrap()).collect();
        let l_e = (e[0][math] - e[1][math]).abs();
        let l_s1 = (kl(&b[0], &e[0]) + kl(&b[1], &e[1])) / 2.0;
        let l_s2 = subjects
            .iter()
            .map(|p| kl(&base.forward_mlm(p).unwrap(), &edited.forward_mlm(p).unwrap()))
            .sum::<f64>()
            / 2.0;

        let mut prob = EditProblem::prepare(&t, &[&pair()], &config(0), &pool(&t), 10).unwrap();
        prob.capture_base(&base).unwrap();
        let l = prob.evaluate(&base, Some((1, &stamp))).unwrap();
        assert!((l.fairness - l_e).abs() < 1e-12);
        assert!((l.specificity_prompts - l_s1).abs() < 1e-12);
        assert!((l.specificity_subjects - l_s2).abs() < 1e-12);
        assert!((l.total - (l_e + 3.0 * l_s1 + 0.7 * l_s2)).abs() < 1e-12);
        assert!(l_s1 > 0.0 && l_s2 > 0.0);
    }

    #[test]
    fn other_objects_scope_ignores_the_pair_objects() {
        let t = tok();
        let base = model(&t);
        let cfg = EditConfig {
            specificity_scope: SpecificityScope::OtherObjects,
            ..config(0)
        };
        let mut prob = EditProblem::prepare(&t, &[&pair()], &cfg, &pool(&t), 10).unwrap();
        prob.capture_base(&base).unwrap();
        // A stamp that only moves the readout of `math` leaves the renormalized rest intact.
        let math = t.id("math").unwrap();
        let mut w = base.weights().clone();
        w.vocab_bias.data_mut()[math] += 2.0;
        let shifted = MicroTransformer::from_weights(*base.config(), w).unwrap();
        let l = prob.evaluate(&shifted, None).unwrap();
        assert!(l.specificity_prompts.abs() < 1e-12);
        assert!(l.specificity_subjects > 1e-6);
    }

    #[test]
    fn gradients_match_finite_differences() {
        let t = tok();
        let m = model(&t);
        let mut prob = EditProblem::prepare(&t, &[&pair()], &config(1), &pool(&t), 10).unwrap();
        prob.capture_base(&m).unwrap();
        let stamp = random_stamp(5);
        let (_, gk, gv) = prob.gradients(&m, 0, &stamp).unwrap();
        let f = |s: &FairnessStamp| prob.evaluate(&m, Some((0, s))).unwrap().total;
        let h = 1e-5;
        for (k, g) in [(true, &gk), (false, &gv)] {
            for i in 0..g.len() {
                let (mut p, mut q) = (stamp.clone(), stamp.clone());
                let (tp, tq) = if k { (&mut p.keys, &mut q.keys) } else { (&mut p.values, &mut q.values) };
                tp.data_mut()[i] += h;
                tq.data_mut()[i] -= h;
                let num = (f(&p) - f(&q)) / (2.0 * h);
                let a = g.data()[i];
                assert!((a - num).abs() <= 1e-5 * a.abs().max(num.abs()).max(1e-4), "{a} vs {num}");
            }
        }
    }

    #[test]
    fn training_touches_only_the_stamp() {
        let t = tok();
        let mut m = model(&t);
        let before = m.base_checksum();
        let original = m.clone();
        let cfg = EditConfig {
            iters_per_batch: 5,
            lr: 0.01,
            ..config(1)
        };
        let pairs = [pair(), BiasedPair::new("woman", "man", "is good at", "art", "art", "spoon", FlipKind::Subject)];
        let (stamp, rep) = train_stamp(&mut m, &t, &pairs, 1, &EditConfig { batch_size: 1, ..cfg.clone() }, &pool(&t)).unwrap();
        assert_eq!(m.base_checksum(), before);
        assert_eq!(m.without_stamps(), original);
        assert_eq!(m.stamp(1), Some(&stamp));
        assert_eq!(rep.stamp_parameters, 2 * 6 * 8);
        assert_eq!(rep.history.len(), 2 * 5);
        assert_eq!(rep.gaps.len(), 2);
        assert_eq!(rep.config.target_layer, Some(1));
        assert!(matches!(
            train_stamp(&mut m, &t, &pairs, 1, &cfg, &pool(&t)),
            Err(FastError::State(_))
        ));
        assert!(matches!(
            train_stamp(&mut m, &t, &pairs, 2, &cfg, &pool(&t)),
            Err(FastError::Input(_))
        ));
        assert!(matches!(train_stamp(&mut m, &t, &[], 0, &cfg, &pool(&t)), Err(FastError::Usage(_))));
    }

    #[test]
    fn fairness_loss_decreases() {
        let t = tok();
        let mut m = model(&t);
        let cfg = EditConfig {
            alpha: 0.0,
            beta: 0.0,
            lr: 0.01,
            iters_per_batch: 30,
            ..config(0)
        };
        let (_, rep) = train_stamp(&mut m, &t, &[pair()], 1, &cfg, &pool(&t)).unwrap();
        let first = rep.history.first().unwrap().loss.fairness;
        let last = rep.history.last().unwrap().loss.fairness;
        assert!(last < first, "{first} -> {last}");
        assert!(rep.gaps[0].after.abs() < rep.gaps[0].before.abs());
    }

    #[test]
    fn state_and_usage_errors() {
        let t = tok();
        let m = model(&t);
        assert!(matches!(
            EditProblem::prepare(&t, &[], &config(0), &pool(&t), 10),
            Err(FastError::Usage(_))
        ));
        let prob = EditProblem::prepare(&t, &[&pair()], &config(0), &pool(&t), 10).unwrap();
        assert!(matches!(prob.evaluate(&m, None), Err(FastError::State(_))));
        assert!(EditConfig { lr: 0.0, ..config(0) }.validate().is_err());
        assert!(EditConfig { d_c: 0, ..config(0) }.validate().is_err());
        assert!(EditConfig { alpha: -1.0, ..config(0) }.validate().is_err());
    }
}
