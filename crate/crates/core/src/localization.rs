//! Causal tracing over subject positions and decisive-layer selection.
//!
//! For a pair `(s1, r, o1)` / `(s2, r, o1)`: run the biased prompt and keep its
//! residual states, run the counterfactual prompt, then for each layer copy the
//! biased states at the subject positions into the counterfactual run.
//! `IE(l) = P_restored[o1] − P_counterfactual[o1]`.

use serde::{Deserialize, Serialize};

use crate::error::{FastError, Result};
use crate::knowledge::{render_prompt, BiasedPair, FlipKind, Tokenizer};
use crate::model::{ForwardTrace, MicroTransformer, PatchSite, PatchSpec};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceResult {
    pub label: String,
    /// One entry per layer.
    pub indirect_effects: Vec<f64>,
    /// `P[o1]` on the biased prompt.
    pub biased_probability: f64,
    /// `P[o1]` on the counterfactual prompt.
    pub counterfactual_probability: f64,
    pub subject_positions: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AieProfile {
    pub mean_effects: Vec<f64>,
    pub pairs: usize,
    pub decisive_layer: usize,
}

/// Token sequences, shared subject positions and target id for a traceable pair.
struct TraceInputs {
    biased: Vec<usize>,
    counterfactual: Vec<usize>,
    positions: Vec<usize>,
    object: usize,
}

fn trace_inputs(model: &MicroTransformer, tok: &Tokenizer, pair: &BiasedPair) -> Result<TraceInputs> {
    if pair.flip != FlipKind::Subject {
        return Err(FastError::UnsupportedTrace(format!(
            "`{}` differs in its object; tracing corrupts the subject",
            pair.label()
        )));
    }
    let max = model.config().max_seq_len;
    let p1 = render_prompt(tok, &pair.stereotyped, max)?;
    let p2 = render_prompt(tok, &pair.counterfactual, max)?;
    if p1.subject_span != p2.subject_span || p1.tokens.len() != p2.tokens.len() {
        return Err(FastError::Input(format!(
            "subjects of `{}` tokenize to different lengths",
            pair.label()
        )));
    }
    Ok(TraceInputs {
        positions: p1.subject_positions(),
        biased: p1.tokens,
        counterfactual: p2.tokens,
        object: tok.id(&pair.stereotyped.object)?,
    })
}

fn restore(
    model: &MicroTransformer,
    tokens: &[usize],
    trace: &ForwardTrace,
    sites: &[PatchSite],
    positions: &[usize],
) -> Result<Vec<f64>> {
    let patches: Vec<PatchSpec> = sites
        .iter()
        .map(|&s| PatchSpec::from_capture(s, positions, trace.state(s)))
        .collect();
    model.forward_with_patch(tokens, &patches)
}

/// Per-layer indirect effect of restoring the biased subject states.
pub fn trace_pair(model: &MicroTransformer, tok: &Tokenizer, pair: &BiasedPair) -> Result<TraceResult> {
    let inp = trace_inputs(model, tok, pair)?;
    let (p_biased, biased) = model.forward_with_capture(&inp.biased)?;
    let p_cf = model.forward_mlm(&inp.counterfactual)?;
    let base = p_cf[inp.object];
    let indirect_effects = (0..model.config().n_layers)
        .map(|l| {
            let d = restore(model, &inp.counterfactual, &biased, &[PatchSite::Layer(l)], &inp.positions)?;
            Ok(d[inp.object] - base)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(TraceResult {
        label: pair.label(),
        indirect_effects,
        biased_probability: p_biased[inp.object],
        counterfactual_probability: base,
        subject_positions: inp.positions,
    })
}

/// `P[o1]` after patching the biased embedding and every layer at the subject positions
/// into the counterfactual run, next to the biased run's own `P[o1]`.
pub fn full_restoration(model: &MicroTransformer, tok: &Tokenizer, pair: &BiasedPair) -> Result<(f64, f64)> {
    let inp = trace_inputs(model, tok, pair)?;
    let (p_biased, biased) = model.forward_with_capture(&inp.biased)?;
    let mut sites = vec![PatchSite::Embedding];
    sites.extend((0..model.config().n_layers).map(PatchSite::Layer));
    let d = restore(model, &inp.counterfactual, &biased, &sites, &inp.positions)?;
    Ok((d[inp.object], p_biased[inp.object]))
}

/// IE per layer when the counterfactual run is patched with its own states.
pub fn self_patch_effects(model: &MicroTransformer, tok: &Tokenizer, pair: &BiasedPair) -> Result<Vec<f64>> {
    let inp = trace_inputs(model, tok, pair)?;
    let (p_cf, own) = model.forward_with_capture(&inp.counterfactual)?;
    (0..model.config().n_layers)
        .map(|l| {
            let d = restore(model, &inp.counterfactual, &own, &[PatchSite::Layer(l)], &inp.positions)?;
            Ok(d[inp.object] - p_cf[inp.object])
        })
        .collect()
}

/// Mean of per-layer effects over traces that share a layer count.
pub fn aggregate(traces: &[TraceResult]) -> Result<AieProfile> {
    let first = traces
        .first()
        .ok_or_else(|| FastError::Usage("average indirect effect needs at least one pair".into()))?;
    let n_layers = first.indirect_effects.len();
    if let Some(t) = traces.iter().find(|t| t.indirect_effects.len() != n_layers) {
        return Err(FastError::Input(format!(
            "trace `{}` has {} layers, expected {n_layers}",
            t.label,
            t.indirect_effects.len()
        )));
    }
    let mut mean_effects = vec![0.0; n_layers];
    for t in traces {
        for (m, ie) in mean_effects.iter_mut().zip(&t.indirect_effects) {
            *m += ie;
        }
    }
    for m in &mut mean_effects {
        *m /= traces.len() as f64;
    }
    Ok(AieProfile {
        decisive_layer: decisive_layer(&mean_effects),
        mean_effects,
        pairs: traces.len(),
    })
}

pub fn average_indirect_effect(
    model: &MicroTransformer,
    tok: &Tokenizer,
    pairs: &[BiasedPair],
) -> Result<(AieProfile, Vec<TraceResult>)> {
    if pairs.is_empty() {
        return Err(FastError::Usage("average indirect effect needs at least one pair".into()));
    }
    let traces = pairs
        .iter()
        .map(|p| trace_pair(model, tok, p))
        .collect::<Result<Vec<_>>>()?;
    Ok((aggregate(&traces)?, traces))
}

/// Argmax; ties go to the deeper layer. An empty profile yields 0.
pub fn decisive_layer(effects: &[f64]) -> usize {
    let mut best = 0;
    for (l, &e) in effects.iter().enumerate() {
        if e >= effects[best] {
            best = l;
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{Activation, ModelConfig, Weights};
    use crate::numerics::Tensor;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn setup() -> (MicroTransformer, Tokenizer, BiasedPair) {
        let tok = Tokenizer::build(["man woman is good at math art spoon a"]);
        let c = ModelConfig {
            vocab_size: tok.len(),
            d_model: 16,
            n_heads: 2,
            n_layers: 3,
            d_ffn: 32,
            max_seq_len: 8,
            activation: Activation::Gelu,
        };
        // The untrained head is zero, which would make every run identical.
        let mut w = Weights::init(&c, 3);
        w.head = Tensor::randn(&[16, 16], 0.5, &mut ChaCha8Rng::seed_from_u64(4));
        let m = MicroTransformer::from_weights(c, w).unwrap();
        let pair = BiasedPair::new("man", "woman", "is good at", "math", "math", "spoon", FlipKind::Subject);
        (m, tok, pair)
    }

    #[test]
    fn decisive_layer_examples() {
        assert_eq!(decisive_layer(&[0.0, 0.3, 0.1]), 1);
        assert_eq!(decisive_layer(&[0.2, 0.2]), 1);
        assert_eq!(decisive_layer(&[-0.1, -0.3]), 0);
    }

    #[test]
    fn self_patch_is_exactly_zero() {
        let (m, tok, pair) = setup();
        assert!(self_patch_effects(&m, &tok, &pair).unwrap().iter().all(|&e| e == 0.0));
    }

    #[test]
    fn full_restoration_recovers_biased_probability() {
        let (m, tok, pair) = setup();
        let (restored, biased) = full_restoration(&m, &tok, &pair).unwrap();
        assert!((restored - biased).abs() < 1e-6);
        let t = trace_pair(&m, &tok, &pair).unwrap();
        assert_ne!(t.biased_probability, t.counterfactual_probability);
        assert!(t.indirect_effects.iter().all(|e| e.abs() <= 1.0));
    }

    #[test]
    fn object_flip_is_rejected() {
        let (m, tok, _) = setup();
        let pair = BiasedPair::new("man", "man", "is good at", "math", "art", "spoon", FlipKind::Object);
        assert!(matches!(trace_pair(&m, &tok, &pair), Err(FastError::UnsupportedTrace(_))));
    }

    #[test]
    fn aie_means() {
        let (m, tok, pair) = setup();
        assert!(matches!(average_indirect_effect(&m, &tok, &[]), Err(FastError::Usage(_))));
        let single = trace_pair(&m, &tok, &pair).unwrap();
        let (one, _) = average_indirect_effect(&m, &tok, std::slice::from_ref(&pair)).unwrap();
        assert_eq!(one.mean_effects, single.indirect_effects);
        let (two, _) = average_indirect_effect(&m, &tok, &[pair.clone(), pair.clone()]).unwrap();
        assert_eq!(two.mean_effects, one.mean_effects);
        assert_eq!(two.pairs, 2);

        let other = BiasedPair::new("woman", "man", "is good at", "art", "art", "spoon", FlipKind::Subject);
        let t2 = trace_pair(&m, &tok, &other).unwrap();
        let (mix, _) = average_indirect_effect(&m, &tok, &[pair, other]).unwrap();
        for l in 0..3 {
            let want = (single.indirect_effects[l] + t2.indirect_effects[l]) / 2.0;
            assert!((mix.mean_effects[l] - want).abs() < 1e-15);
        }
    }
}
