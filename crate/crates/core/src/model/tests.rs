use super::*;
use crate::error::FastError;
use crate::knowledge::MASK_ID;

fn tiny() -> ModelConfig {
    ModelConfig {
        n_layers: 2,
        d_model: 8,
        n_heads: 2,
        d_ffn: 16,
        vocab_size: 12,
        max_seq_len: 6,
        activation: Activation::Gelu,
    }
}

/// Model whose readout is not zero, so patches change the output.
fn trained_like(seed: u64) -> MicroTransformer {
    let c = tiny();
    let mut w = Weights::init(&c, seed);
    w.head = crate::numerics::Tensor::randn(
        &[c.d_model, c.d_model],
        0.5,
        &mut <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(seed + 1),
    );
    MicroTransformer::from_weights(c, w).unwrap()
}

const PROMPT: [usize; 4] = [5, 6, 7, MASK_ID];

#[test]
fn untrained_model_is_uniform() {
    let m = MicroTransformer::new(tiny(), 3).unwrap();
    let p = m.forward_mlm(&PROMPT).unwrap();
    for v in p {
        assert!((v - 1.0 / 12.0).abs() < 1e-12);
    }
}

#[test]
fn param_count_matches_tensors() {
    let c = tiny();
    let w = Weights::init(&c, 0);
    let n: usize = w.iter().iter().map(|t| t.len()).sum();
    assert_eq!(n, c.param_count());
}

#[test]
fn forward_is_deterministic() {
    let a = trained_like(1).forward_mlm(&PROMPT).unwrap();
    let b = trained_like(1).forward_mlm(&PROMPT).unwrap();
    assert_eq!(a, b);
    assert!((a.iter().sum::<f64>() - 1.0).abs() < 1e-12);
}

#[test]
fn mask_count_is_checked() {
    let m = trained_like(1);
    assert!(matches!(m.forward_mlm(&[5, 6, 7]), Err(FastError::Input(_))));
    assert!(matches!(m.forward_mlm(&[MASK_ID, 6, MASK_ID]), Err(FastError::Input(_))));
    assert!(matches!(m.forward_mlm(&[5, 6, 7, 8, 9, 10, MASK_ID]), Err(FastError::Input(_))));
    assert!(matches!(m.forward_mlm(&[40, MASK_ID]), Err(FastError::Vocab(_))));
}

#[test]
fn self_patch_is_identity() {
    let m = trained_like(2);
    let (p, trace) = m.forward_with_capture(&PROMPT).unwrap();
    for l in 0..2 {
        let site = PatchSite::Layer(l);
        let patch = PatchSpec::from_capture(site, &[0, 1], trace.state(site));
        assert_eq!(m.forward_with_patch(&PROMPT, &[patch]).unwrap(), p);
    }
    assert_eq!(m.forward_with_patch(&PROMPT, &[]).unwrap(), p);
}

#[test]
fn full_restoration_reproduces_source_run() {
    let m = trained_like(4);
    let source = [5, 6, 7, MASK_ID];
    let corrupt = [8, 6, 7, MASK_ID];
    let (p_src, trace) = m.forward_with_capture(&source).unwrap();
    let p_cor = m.forward_mlm(&corrupt).unwrap();
    assert_ne!(p_src, p_cor);
    let mut patches = vec![PatchSpec::from_capture(PatchSite::Embedding, &[0], &trace.embedding)];
    for l in 0..2 {
        patches.push(PatchSpec::from_capture(PatchSite::Layer(l), &[0], &trace.layers[l]));
    }
    let restored = m.forward_with_patch(&corrupt, &patches).unwrap();
    for (a, b) in restored.iter().zip(&p_src) {
        assert!((a - b).abs() < 1e-12);
    }
}

#[test]
fn patch_reaches_mask_only_through_later_layers() {
    let m = trained_like(5);
    let (_, base) = m.forward_with_capture(&PROMPT).unwrap();
    let perturb = |t: &crate::numerics::Tensor| {
        t.map(|v| v * 3.0 + 0.7 * v.signum())
    };
    // Last-layer states at non-mask positions never reach the readout.
    let last = PatchSpec::from_capture(PatchSite::Layer(1), &[1], &perturb(&base.layers[1]));
    assert_eq!(m.forward_with_patch(&PROMPT, &[last]).unwrap(), base.distribution);
    let early = PatchSpec::from_capture(PatchSite::Layer(0), &[1], &perturb(&base.layers[0]));
    assert_ne!(m.forward_with_patch(&PROMPT, &[early]).unwrap(), base.distribution);
}

#[test]
fn zero_value_stamp_is_neutral() {
    let mut m = trained_like(6);
    let before = m.forward_mlm(&PROMPT).unwrap();
    m.attach_stamp(1, FairnessStamp::new(10, 8, Activation::Gelu, 9)).unwrap();
    assert_eq!(m.forward_mlm(&PROMPT).unwrap(), before);
}

#[test]
fn attach_detach_round_trip() {
    let mut m = trained_like(7);
    let before = m.forward_mlm(&PROMPT).unwrap();
    let checksum = m.base_checksum();
    let mut s = FairnessStamp::new(4, 8, Activation::Relu, 1);
    for v in s.values.data_mut() {
        *v = 0.3;
    }
    m.attach_stamp(0, s.clone()).unwrap();
    assert_ne!(m.forward_mlm(&PROMPT).unwrap(), before);
    assert!(matches!(m.attach_stamp(0, s.clone()), Err(FastError::State(_))));
    assert_eq!(m.detach_stamp(0).unwrap(), s);
    assert!(matches!(m.detach_stamp(0), Err(FastError::State(_))));
    assert_eq!(m.forward_mlm(&PROMPT).unwrap(), before);
    assert_eq!(m.base_checksum(), checksum);
    assert!(m.attach_stamp(2, s).is_err());
}

#[test]
fn batched_distributions_match_single() {
    let m = trained_like(8);
    let prompts: Vec<Vec<usize>> = vec![
        vec![5, MASK_ID],
        vec![5, 6, 7, MASK_ID],
        vec![MASK_ID, 9, 10],
    ];
    let batched = m.mask_distributions(&prompts).unwrap();
    for (p, b) in prompts.iter().zip(&batched) {
        let single = m.forward_mlm(p).unwrap();
        for (x, y) in single.iter().zip(b) {
            assert!((x - y).abs() < 1e-12);
        }
    }
}
