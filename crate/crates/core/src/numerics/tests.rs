use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::*;

/// Central differences over every input entry; independent of the backward rules.
fn finite_diff(inputs: &[Tensor], f: &dyn Fn(&[Tensor]) -> f64, h: f64) -> Vec<Tensor> {
    let mut out = Vec::new();
    for i in 0..inputs.len() {
        let mut g = Tensor::zeros(inputs[i].shape());
        for k in 0..inputs[i].len() {
            let mut plus = inputs.to_vec();
            plus[i].data_mut()[k] += h;
            let mut minus = inputs.to_vec();
            minus[i].data_mut()[k] -= h;
            g.data_mut()[k] = (f(&plus) - f(&minus)) / (2.0 * h);
        }
        out.push(g);
    }
    out
}

/// Relative error with a floor: entries where both values are tiny must agree absolutely.
fn max_rel_err(a: &Tensor, b: &Tensor) -> f64 {
    a.data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| {
            let scale = x.abs().max(y.abs());
            if scale < 1e-7 {
                if (x - y).abs() < 1e-9 {
                    0.0
                } else {
                    f64::INFINITY
                }
            } else {
                (x - y).abs() / scale
            }
        })
        .fold(0.0, f64::max)
}

/// Builds the graph on a fresh tape; non-scalar outputs are contracted with fixed weights.
fn eval(inputs: &[Tensor], build: &dyn Fn(&mut Tape, &[Var]) -> Var) -> (Tape, Var, Vec<Var>) {
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t.clone())).collect();
    let out = build(&mut tape, &vars);
    let root = if tape.value(out).len() == 1 {
        out
    } else {
        let shape = tape.value(out).shape().to_vec();
        let n = tape.value(out).len();
        let w = Tensor::new(shape, (0..n).map(|i| ((i * 7 + 3) % 11) as f64 / 11.0 - 0.4).collect()).unwrap();
        let wv = tape.constant(w);
        let m = tape.mul(out, wv).unwrap();
        tape.sum(m)
    };
    (tape, root, vars)
}

fn gradcheck(inputs: Vec<Tensor>, build: &dyn Fn(&mut Tape, &[Var]) -> Var, tol: f64) {
    let (tape, root, vars) = eval(&inputs, build);
    let grads = tape.backward(root).unwrap();
    let f = |xs: &[Tensor]| {
        let (t, r, _) = eval(xs, build);
        t.value(r).data()[0]
    };
    let numeric = finite_diff(&inputs, &f, 1e-5);
    for (i, v) in vars.iter().enumerate() {
        let analytic = grads.get(*v).unwrap();
        assert_eq!(analytic.shape(), inputs[i].shape());
        let err = max_rel_err(analytic, &numeric[i]);
        assert!(err <= tol, "input {i}: rel err {err:e}\n{analytic:?}\n{:?}", numeric[i]);
    }
}

fn rng() -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(17)
}

#[test]
fn matmul_gradient_matches_finite_differences() {
    let mut r = rng();
    let a = Tensor::randn(&[3, 4], 1.0, &mut r);
    let b = Tensor::randn(&[4, 2], 1.0, &mut r);
    let build = |t: &mut Tape, v: &[Var]| {
        let c = t.matmul(v[0], v[1]).unwrap();
        t.sum(c)
    };
    gradcheck(vec![a, b], &build, 1e-6);
}

#[test]
fn matmul_t_and_batched_gradients() {
    let mut r = rng();
    let a = Tensor::randn(&[2, 3, 4], 1.0, &mut r);
    let b = Tensor::randn(&[5, 4], 1.0, &mut r);
    gradcheck(vec![a, b], &|t, v| t.matmul_t(v[0], v[1]).unwrap(), 1e-6);
}

#[test]
fn elementwise_gradients() {
    let mut r = rng();
    let a = Tensor::randn(&[3, 4], 1.0, &mut r);
    let b = Tensor::randn(&[3, 4], 1.0, &mut r);
    gradcheck(vec![a.clone(), b.clone()], &|t, v| t.add(v[0], v[1]).unwrap(), 1e-6);
    gradcheck(vec![a.clone(), b.clone()], &|t, v| t.sub(v[0], v[1]).unwrap(), 1e-6);
    gradcheck(vec![a.clone(), b], &|t, v| t.mul(v[0], v[1]).unwrap(), 1e-6);
    gradcheck(vec![a.clone()], &|t, v| t.scale(v[0], -2.5), 1e-6);
    gradcheck(vec![a.clone()], &|t, v| t.gelu(v[0]), 1e-6);
    gradcheck(vec![a.clone()], &|t, v| t.relu(v[0]), 1e-6);
    gradcheck(vec![a.clone()], &|t, v| t.abs(v[0]), 1e-6);
    gradcheck(vec![a.clone()], &|t, v| t.mean(v[0]).unwrap(), 1e-6);
    gradcheck(vec![a], &|t, v| t.gather(v[0], &[0, 5, 5, 11]).unwrap(), 1e-6);
}

#[test]
fn add_row_and_layer_norm_gradients() {
    let mut r = rng();
    let x = Tensor::randn(&[4, 6], 1.0, &mut r);
    let g = Tensor::randn(&[6], 1.0, &mut r);
    let b = Tensor::randn(&[6], 1.0, &mut r);
    gradcheck(vec![x.clone(), b.clone()], &|t, v| t.add_row(v[0], v[1]).unwrap(), 1e-6);
    gradcheck(vec![x, g, b], &|t, v| t.layer_norm(v[0], v[1], v[2]).unwrap(), 1e-5);
}

#[test]
fn softmax_and_cross_entropy_gradients() {
    let mut r = rng();
    let x = Tensor::randn(&[3, 5], 1.0, &mut r);
    gradcheck(vec![x.clone()], &|t, v| t.softmax(v[0]), 1e-6);
    gradcheck(vec![x], &|t, v| t.cross_entropy(v[0], &[1, 4, 0]).unwrap(), 1e-6);
}

#[test]
fn kl_rows_gradient() {
    let mut r = rng();
    let x = Tensor::randn(&[2, 4], 1.0, &mut r);
    let p = softmax(&Tensor::randn(&[2, 4], 1.0, &mut r));
    gradcheck(
        vec![x],
        &move |t, v| {
            let q = t.softmax(v[0]);
            let kl = t.kl_rows(&p, q).unwrap();
            t.sum(kl)
        },
        1e-6,
    );
}

#[test]
fn row_ops_gradients() {
    let mut r = rng();
    let table = Tensor::randn(&[5, 3], 1.0, &mut r);
    gradcheck(vec![table.clone()], &|t, v| t.embedding(v[0], &[4, 0, 4, 2]).unwrap(), 1e-6);
    gradcheck(vec![table.clone()], &|t, v| t.select_rows(v[0], &[3, 1, 3]).unwrap(), 1e-6);
    let repl = Tensor::full(&[2, 3], 0.5);
    gradcheck(
        vec![table],
        &move |t, v| {
            let sq = t.mul(v[0], v[0]).unwrap();
            t.overwrite_rows(sq, &[1, 4], &repl).unwrap()
        },
        1e-6,
    );
}

#[test]
fn attention_gradient_with_padding() {
    let mut r = rng();
    let (batch, seq, d) = (2, 3, 4);
    let q = Tensor::randn(&[batch * seq, d], 1.0, &mut r);
    let k = Tensor::randn(&[batch * seq, d], 1.0, &mut r);
    let v = Tensor::randn(&[batch * seq, d], 1.0, &mut r);
    let layout = AttentionLayout {
        batch,
        seq_len: seq,
        heads: 2,
        key_valid: vec![true, true, true, true, true, false],
    };
    gradcheck(vec![q, k, v], &move |t, x| t.attention(x[0], x[1], x[2], &layout).unwrap(), 1e-6);
}

#[test]
fn attention_ignores_padded_keys() {
    let mut tape = Tape::new();
    let layout = AttentionLayout {
        batch: 1,
        seq_len: 2,
        heads: 1,
        key_valid: vec![true, false],
    };
    let q = tape.constant(Tensor::matrix(2, 2, vec![1.0, 0.0, 0.0, 1.0]).unwrap());
    let v = tape.constant(Tensor::matrix(2, 2, vec![3.0, 4.0, 100.0, 100.0]).unwrap());
    let o = tape.attention(q, q, v, &layout).unwrap();
    assert_eq!(tape.value(o).data(), &[3.0, 4.0, 3.0, 4.0]);
}

#[test]
fn softmax_examples() {
    let s = softmax(&Tensor::vector(vec![0.0, 0.0, 0.0]));
    for v in s.data() {
        assert!((v - 1.0 / 3.0).abs() < 1e-15);
    }
    let s = softmax(&Tensor::vector(vec![1000.0, 0.0]));
    assert!(s.is_finite());
    assert!((s.data()[0] - 1.0).abs() < 1e-15 && s.data()[1] < 1e-300);

    // Direct evaluation of e^{x_i} / Σ e^{x_j}.
    let z: f64 = [1.0f64, 2.0, 3.0].iter().map(|v| v.exp()).sum();
    let expected: Vec<f64> = [1.0f64, 2.0, 3.0].iter().map(|v| v.exp() / z).collect();
    let s = softmax(&Tensor::vector(vec![1.0, 2.0, 3.0]));
    for (a, b) in s.data().iter().zip(&expected) {
        assert!((a - b).abs() < 1e-15);
    }
    assert!((s.data()[0] - 0.09003).abs() < 5e-6);
    assert!((s.data()[1] - 0.24473).abs() < 5e-6);
    assert!((s.data()[2] - 0.66524).abs() < 5e-6);
}

#[test]
fn kl_examples() {
    let p = [0.2, 0.3, 0.5];
    assert_eq!(kl_divergence(&p, &p).unwrap(), 0.0);
    let kl = kl_divergence(&[1.0, 0.0], &[0.5, 0.5]).unwrap();
    assert!((kl - std::f64::consts::LN_2).abs() < 1e-15);

    let q = [0.4, 0.3, 0.2, 0.1];
    let expected: f64 = q.iter().map(|qi| 0.25 * (0.25f64 / qi).ln()).sum();
    let kl = kl_divergence(&[0.25; 4], &q).unwrap();
    assert!((kl - expected).abs() < 1e-15);
}

#[test]
fn kl_floors_zero_q() {
    let kl = kl_divergence(&[0.5, 0.5], &[1.0, 0.0]).unwrap();
    let expected = 0.5 * (0.5f64).ln() + 0.5 * (0.5 / KL_FLOOR).ln();
    assert!((kl - expected).abs() < 1e-12);
    assert!(kl_divergence(&[0.5, 0.4], &[0.5, 0.5]).is_err());
}

#[test]
fn backward_identity_and_softmax_jacobian() {
    let mut tape = Tape::new();
    let x = tape.param(Tensor::scalar(3.0));
    let g = tape.backward(x).unwrap();
    assert_eq!(g.get(x).unwrap().data(), &[1.0]);

    let mut tape = Tape::new();
    let x = tape.param(Tensor::vector(vec![0.0, 0.0]));
    let s = tape.softmax(x);
    let first = tape.gather(s, &[0]).unwrap();
    let g = tape.backward(first).unwrap();
    // ∂s₀/∂x = s₀(δ₀ⱼ − sⱼ) = [0.25, −0.25]
    assert_eq!(g.get(x).unwrap().data(), &[0.25, -0.25]);
}

#[test]
fn backward_rejects_non_scalar_root() {
    let mut tape = Tape::new();
    let x = tape.param(Tensor::vector(vec![1.0, 2.0]));
    assert!(matches!(tape.backward(x), Err(crate::FastError::Usage(_))));
}

#[test]
fn constants_receive_no_gradient() {
    let mut tape = Tape::new();
    let w = tape.constant(Tensor::matrix(2, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap());
    let x = tape.param(Tensor::matrix(1, 2, vec![0.5, -0.5]).unwrap());
    let y = tape.matmul(x, w).unwrap();
    let s = tape.sum(y);
    let g = tape.backward(s).unwrap();
    assert!(g.get(w).is_none());
    assert_eq!(g.get(x).unwrap().shape(), &[1, 2]);
    assert_eq!(g.populated(), 3);
}

#[test]
fn tape_is_deterministic() {
    let run = || {
        let mut r = rng();
        let a = Tensor::randn(&[4, 4], 1.0, &mut r);
        let mut tape = Tape::new();
        let x = tape.param(a);
        let y = tape.matmul(x, x).unwrap();
        let z = tape.softmax(y);
        let s = tape.cross_entropy(z, &[0, 1, 2, 3]).unwrap();
        let g = tape.backward(s).unwrap();
        (tape.value(s).data()[0], g.get(x).unwrap().clone())
    };
    let (a, b) = (run(), run());
    assert_eq!(a.0.to_bits(), b.0.to_bits());
    assert!(a.1.data().iter().zip(b.1.data()).all(|(x, y)| x.to_bits() == y.to_bits()));
}

fn prob_vector(n: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-5.0f64..5.0, n).prop_map(|v| softmax(&Tensor::vector(v)).into_data())
}

proptest! {
    #[test]
    fn softmax_rows_normalized(v in prop::collection::vec(-50.0f64..50.0, 1..20)) {
        let s = softmax(&Tensor::vector(v));
        prop_assert!((s.sum() - 1.0).abs() <= 1e-12);
        prop_assert!(s.data().iter().all(|&x| x > 0.0));
    }

    #[test]
    fn kl_nonnegative_and_zero_on_self((p, q) in (2usize..8).prop_flat_map(|n| (prob_vector(n), prob_vector(n)))) {
        prop_assert!(kl_divergence(&p, &q).unwrap() >= -1e-12);
        prop_assert!(kl_divergence(&p, &p).unwrap().abs() <= 1e-12);
    }
}
