use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;

fn random_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect())
}

fn naive_biaffine(x1: &[f64], x2: &[f64], u: &Tensor, w: &Tensor, b: &[f64]) -> Vec<f64> {
    let k = b.len();
    let (d1, d2) = (x1.len(), x2.len());
    let mut out = vec![0.0; k];
    for c in 0..k {
        let mut s = b[c];
        for a in 0..d1 {
            for bb in 0..d2 {
                s += x1[a] * u.at3(a, c, bb) * x2[bb];
            }
        }
        for a in 0..d1 {
            s += w.at2(c, a) * x1[a];
        }
        for bb in 0..d2 {
            s += w.at2(c, d1 + bb) * x2[bb];
        }
        out[c] = s;
    }
    out
}

fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-3)
}

/// Central finite differences over every parameter entry.
fn check_gradients<F>(store: &mut ParamStore, build: F) -> f64
where
    F: Fn(&mut Tape, &ParamStore) -> Var,
{
    store.zero_grad();
    let mut tape = Tape::new();
    let loss = build(&mut tape, store);
    tape.backward(loss, store).unwrap();
    let analytic: Vec<Tensor> = store.iter().map(|p| p.grad.clone()).collect();

    let h = 1e-4;
    let mut worst: f64 = 0.0;
    let ids: Vec<ParamId> = store.ids().collect();
    for (pi, id) in ids.into_iter().enumerate() {
        for e in 0..store.get(id).value.len() {
            let orig = store.get(id).value.data()[e];
            store.get_mut(id).value.data_mut()[e] = orig + h;
            let mut t = Tape::new();
            let l = build(&mut t, store);
            let plus = t.value(l).item();
            store.get_mut(id).value.data_mut()[e] = orig - h;
            let mut t = Tape::new();
            let l = build(&mut t, store);
            let minus = t.value(l).item();
            store.get_mut(id).value.data_mut()[e] = orig;
            let numeric = (plus - minus) / (2.0 * h);
            worst = worst.max(rel_err(analytic[pi].data()[e], numeric));
        }
    }
    worst
}

#[test]
fn affine_zero_weights_gives_activation_of_zero() {
    let w = Tensor::zeros(&[3, 4]);
    let out = forward_affine(&[1.0, 2.0, 3.0, 4.0], &w, &[0.0; 3], Activation::Tanh).unwrap();
    assert_eq!(out, vec![0.0; 3]);
    let out = forward_affine(&[1.0, 2.0, 3.0, 4.0], &w, &[0.0; 3], Activation::Silu).unwrap();
    assert_eq!(out, vec![Activation::Silu.apply(0.0); 3]);
}

#[test]
fn affine_identity() {
    let mut data = vec![0.0; 9];
    for i in 0..3 {
        data[i * 3 + i] = 1.0;
    }
    let w = Tensor::matrix(3, 3, data);
    let x = [0.5, -2.0, 7.0];
    assert_eq!(forward_affine(&x, &w, &[0.0; 3], Activation::Identity).unwrap(), x.to_vec());
}

#[test]
fn affine_matches_scalar_loop() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let w = random_tensor(&mut rng, &[3, 4]);
    let x: Vec<f64> = (0..4).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let b: Vec<f64> = (0..3).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let out = forward_affine(&x, &w, &b, Activation::Silu).unwrap();
    for r in 0..3 {
        let mut s = b[r];
        for c in 0..4 {
            s += w.at2(r, c) * x[c];
        }
        let expected = s / (1.0 + (-s).exp());
        assert!((out[r] - expected).abs() < 1e-12);
    }
}

#[test]
fn affine_dimension_mismatch() {
    let w = Tensor::zeros(&[3, 4]);
    assert!(matches!(
        forward_affine(&[1.0; 3], &w, &[0.0; 3], Activation::Identity),
        Err(NumericError::DimensionMismatch(_))
    ));
}

#[test]
fn biaffine_bias_only() {
    let u = Tensor::zeros(&[2, 3, 2]);
    let w = Tensor::zeros(&[3, 4]);
    let b = [0.1, -0.2, 0.3];
    assert_eq!(forward_biaffine(&[1.0, 2.0], &[3.0, 4.0], &u, &w, &b).unwrap(), b.to_vec());
}

#[test]
fn biaffine_hand_expanded() {
    let u = Tensor::filled(&[2, 1, 2], 1.0);
    let w = Tensor::zeros(&[1, 4]);
    let out = forward_biaffine(&[1.0, 2.0], &[3.0, 4.0], &u, &w, &[0.0]).unwrap();
    assert_eq!(out, vec![21.0]);
}

#[test]
fn biaffine_matches_triple_loop() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for _ in 0..50 {
        let (d1, d2, k) = (rng.gen_range(1..6), rng.gen_range(1..6), 5);
        let u = random_tensor(&mut rng, &[d1, k, d2]);
        let w = random_tensor(&mut rng, &[k, d1 + d2]);
        let b: Vec<f64> = (0..k).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let x1: Vec<f64> = (0..d1).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let x2: Vec<f64> = (0..d2).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let fast = forward_biaffine(&x1, &x2, &u, &w, &b).unwrap();
        let slow = naive_biaffine(&x1, &x2, &u, &w, &b);
        for (a, s) in fast.iter().zip(&slow) {
            assert!((a - s).abs() <= 1e-10 * s.abs().max(1.0));
        }
    }
}

#[test]
fn biaffine_dimension_mismatch() {
    let u = Tensor::zeros(&[2, 1, 2]);
    let w = Tensor::zeros(&[1, 4]);
    assert!(forward_biaffine(&[1.0, 2.0, 3.0], &[3.0, 4.0], &u, &w, &[0.0]).is_err());
    assert!(forward_biaffine(&[1.0, 2.0], &[3.0, 4.0], &u, &w, &[0.0, 1.0]).is_err());
}

#[test]
fn tape_biaffine_matches_pairwise_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let (m, n, d1, d2, k) = (4, 3, 3, 5, 2);
    let h = random_tensor(&mut rng, &[m, d1]);
    let d = random_tensor(&mut rng, &[n, d2]);
    let u = random_tensor(&mut rng, &[d1, k, d2]);
    let w = random_tensor(&mut rng, &[k, d1 + d2]);
    let b = random_tensor(&mut rng, &[k]);
    let mut tape = Tape::new();
    let vars = [&h, &d, &u, &w, &b].map(|t| tape.constant(t.clone()));
    let out = tape.biaffine(vars[0], vars[1], vars[2], vars[3], vars[4]);
    let out = tape.value(out);
    assert_eq!(out.shape(), &[m, n, k]);
    for i in 0..m {
        for j in 0..n {
            let expected = naive_biaffine(h.row(i), d.row(j), &u, &w, b.data());
            for c in 0..k {
                assert!((out.at3(i, j, c) - expected[c]).abs() < 1e-10);
            }
        }
    }
}

#[test]
fn gradient_of_sum_is_ones() {
    let mut store = ParamStore::new();
    let id = store.add(Parameter::new("v", Tensor::vector(vec![1.0, -2.0, 3.0])));
    let mut tape = Tape::new();
    let v = tape.param(&store, id);
    let s = tape.sum(v);
    tape.backward(s, &mut store).unwrap();
    assert_eq!(store.get(id).grad.data(), &[1.0, 1.0, 1.0]);
}

#[test]
fn bilinear_gradient_is_outer_product() {
    let mut store = ParamStore::new();
    let u = store.add(Parameter::new("u", Tensor::new(vec![2, 1, 3], vec![0.3; 6])));
    let w = store.add(Parameter::new("w", Tensor::zeros(&[1, 5])));
    let b = store.add(Parameter::new("b", Tensor::zeros(&[1])));
    let x1 = [1.5, -2.0];
    let x2 = [0.5, 4.0, -1.0];
    let mut tape = Tape::new();
    let h = tape.constant(Tensor::matrix(1, 2, x1.to_vec()));
    let d = tape.constant(Tensor::matrix(1, 3, x2.to_vec()));
    let (uv, wv, bv) = (tape.param(&store, u), tape.param(&store, w), tape.param(&store, b));
    let s = tape.biaffine(h, d, uv, wv, bv);
    let loss = tape.sum(s);
    tape.backward(loss, &mut store).unwrap();
    let g = &store.get(u).grad;
    for a in 0..2 {
        for c in 0..3 {
            assert!((g.at3(a, 0, c) - x1[a] * x2[c]).abs() < 1e-12);
        }
    }
}

#[test]
fn backward_rejects_non_scalar_loss() {
    let mut store = ParamStore::new();
    let mut tape = Tape::new();
    let v = tape.constant(Tensor::vector(vec![1.0, 2.0]));
    assert_eq!(
        tape.backward(v, &mut store),
        Err(NumericError::NonScalarLoss(vec![2]))
    );
}

#[test]
fn backward_rejects_non_finite_loss() {
    let mut store = ParamStore::new();
    let mut tape = Tape::new();
    let v = tape.constant(Tensor::scalar(f64::NAN));
    assert!(matches!(tape.backward(v, &mut store), Err(NumericError::NonFinite(_))));
}

fn random_store(rng: &mut ChaCha8Rng, shapes: &[(&str, &[usize])]) -> (ParamStore, Vec<ParamId>) {
    let mut store = ParamStore::new();
    let ids = shapes
        .iter()
        .map(|(name, shape)| store.add(Parameter::new(*name, random_tensor(rng, shape))))
        .collect();
    (store, ids)
}

#[test]
fn finite_differences_affine_chain() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for act in [Activation::Silu, Activation::Tanh, Activation::Identity] {
        let (mut store, ids) = random_store(&mut rng, &[("x", &[3, 4]), ("w", &[4, 5]), ("b", &[5])]);
        let mask = Tensor::new(vec![3, 5], (0..15).map(|i| if i % 3 == 0 { 0.0 } else { 1.5 }).collect());
        let err = check_gradients(&mut store, |tape, store| {
            let x = tape.param(store, ids[0]);
            let w = tape.param(store, ids[1]);
            let b = tape.param(store, ids[2]);
            let y = tape.matmul(x, w);
            let y = tape.add_row(y, b);
            let y = tape.activation(y, act);
            let y = tape.mask(y, mask.clone());
            let y = tape.scale(y, 0.7);
            let s = tape.sum(y);
            let s2 = tape.scale(s, 2.0);
            tape.add(s, s2)
        });
        assert!(err < 1e-4, "{:?}: {}", act, err);
    }
}

#[test]
fn finite_differences_structure_ops() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let (mut store, ids) = random_store(
        &mut rng,
        &[("emb", &[6, 3]), ("mask", &[3]), ("pos", &[4, 2]), ("root", &[8])],
    );
    let err = check_gradients(&mut store, |tape, store| {
        let emb = tape.param(store, ids[0]);
        let mv = tape.param(store, ids[1]);
        let pos = tape.param(store, ids[2]);
        let root = tape.param(store, ids[3]);
        let g = tape.gather_rows(emb, vec![0, 2, 2, 5]);
        let g = tape.replace_rows(g, mv, vec![false, true, false, true]);
        let prev = tape.gather_rows(g, vec![0, 1, 2]);
        let next = tape.gather_rows(g, vec![1, 2, 3]);
        let p = tape.gather_rows(pos, vec![0, 1, 3]);
        let r = tape.concat_cols(vec![prev, next, p]);
        let full = tape.concat_rows(vec![root, r]);
        let sq = tape.activation(full, Activation::Tanh);
        tape.sum(sq)
    });
    assert!(err < 1e-4, "{}", err);
}

#[test]
fn finite_differences_scalar_mix() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let layers: Arc<Vec<Tensor>> = Arc::new((0..4).map(|_| random_tensor(&mut rng, &[3, 2])).collect());
    for active in [vec![true; 4], vec![true, false, true, false], vec![false, false, true, false]] {
        let (mut store, ids) = random_store(&mut rng, &[("logits", &[4]), ("w", &[2, 2])]);
        let layers = layers.clone();
        let err = check_gradients(&mut store, |tape, store| {
            let l = tape.param(store, ids[0]);
            let w = tape.param(store, ids[1]);
            let r = tape.scalar_mix(layers.clone(), l, active.clone());
            let y = tape.matmul(r, w);
            let y = tape.activation(y, Activation::Tanh);
            tape.sum(y)
        });
        assert!(err < 1e-4, "{}", err);
    }
}

#[test]
fn finite_differences_biaffine_and_losses() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for trial in 0..10 {
        let (m, n, d1, d2, k) = (
            rng.gen_range(1..5),
            rng.gen_range(1..5),
            rng.gen_range(1..5),
            rng.gen_range(1..5),
            rng.gen_range(1..4),
        );
        let (mut store, ids) = random_store(
            &mut rng,
            &[
                ("h", &[m, d1]),
                ("d", &[n, d2]),
                ("u", &[d1, k, d2]),
                ("w", &[k, d1 + d2]),
                ("b", &[k]),
            ],
        );
        let groups: Vec<SoftmaxGroup> = (0..n)
            .map(|j| SoftmaxGroup {
                base: j * k,
                stride: n * k,
                len: m,
                target: rng.gen_range(0..m),
            })
            .collect();
        let entries: Vec<(usize, bool)> = (0..m * n * k).map(|i| (i, rng.gen_bool(0.5))).collect();
        let err = check_gradients(&mut store, |tape, store| {
            let v: Vec<Var> = ids.iter().map(|&id| tape.param(store, id)).collect();
            let s = tape.biaffine(v[0], v[1], v[2], v[3], v[4]);
            let a = tape.softmax_xent(s, groups.clone());
            let b = tape.sigmoid_bce(s, entries.clone());
            let b = tape.scale(b, 0.3);
            tape.add(a, b)
        });
        assert!(err < 1e-4, "trial {}: {}", trial, err);
    }
}

#[test]
fn fault_injection_breaks_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let (mut store, ids) = random_store(&mut rng, &[("x", &[2, 3]), ("w", &[3, 2])]);
    store.zero_grad();
    let mut tape = Tape::with_fault(OpKind::MatMul);
    let x = tape.param(&store, ids[0]);
    let w = tape.param(&store, ids[1]);
    let y = tape.matmul(x, w);
    let l = tape.sum(y);
    tape.backward(l, &mut store).unwrap();
    let faulty = store.get(ids[1]).grad.clone();
    store.zero_grad();
    let mut tape = Tape::new();
    let x = tape.param(&store, ids[0]);
    let w = tape.param(&store, ids[1]);
    let y = tape.matmul(x, w);
    let l = tape.sum(y);
    tape.backward(l, &mut store).unwrap();
    assert_ne!(faulty, store.get(ids[1]).grad);
}

#[test]
fn softmax_xent_uniform_is_log_len() {
    let mut tape = Tape::new();
    let x = tape.constant(Tensor::zeros(&[5]));
    let l = tape.softmax_xent(
        x,
        vec![SoftmaxGroup {
            base: 0,
            stride: 1,
            len: 5,
            target: 2,
        }],
    );
    assert!((tape.value(l).item() - 5f64.ln()).abs() < 1e-12);
}

#[test]
fn adamw_zero_gradient_leaves_params() {
    let mut store = ParamStore::new();
    let id = store.add(Parameter::new("p", Tensor::vector(vec![0.5, -1.0])));
    let mut opt = AdamW::default();
    opt.step(&mut store, 0.1).unwrap();
    assert_eq!(store.get(id).value.data(), &[0.5, -1.0]);
}

#[test]
fn adamw_defaults() {
    let opt = AdamW::default();
    assert_eq!((opt.beta1, opt.beta2, opt.weight_decay), (0.9, 0.999, 0.0));
}

#[test]
fn adamw_descends_and_zeroes_gradients() {
    for g in [2.5, -0.01] {
        let mut store = ParamStore::new();
        let id = store.add(Parameter::new("p", Tensor::scalar(1.0)));
        store.get_mut(id).grad = Tensor::scalar(g);
        let mut opt = AdamW::default();
        opt.step(&mut store, 0.01).unwrap();
        let moved = store.get(id).value.item() - 1.0;
        assert!(moved * g < 0.0);
        assert_eq!(store.get(id).grad.item(), 0.0);
    }
}

#[test]
fn adamw_weight_decay_is_decoupled() {
    let mut store = ParamStore::new();
    let id = store.add(Parameter::new("p", Tensor::scalar(2.0)));
    let mut opt = AdamW::new(0.9, 0.999, 1e-8, 0.1);
    opt.step(&mut store, 0.5).unwrap();
    assert!((store.get(id).value.item() - (2.0 - 0.5 * 0.1 * 2.0)).abs() < 1e-12);
}

#[test]
fn adamw_aborts_on_non_finite_gradient() {
    let mut store = ParamStore::new();
    let id = store.add(Parameter::new("p", Tensor::scalar(1.0)));
    store.get_mut(id).grad = Tensor::scalar(f64::INFINITY);
    let mut opt = AdamW::default();
    assert!(opt.step(&mut store, 0.1).is_err());
    assert_eq!(store.get(id).value.item(), 1.0);
    assert_eq!(opt.steps_taken(), 0);
}

#[test]
fn noam_peak_and_start() {
    assert!((noam_lr(100, 4e-5, 100) - 4e-5).abs() < 1e-18);
    assert!((noam_lr(1, 4e-5, 100) - 4e-7).abs() < 1e-18);
}

#[test]
fn noam_is_unimodal() {
    let warmup = 37;
    let values: Vec<f64> = (1..=4 * warmup).map(|s| noam_lr(s, 1.0, warmup)).collect();
    let peak = values
        .iter()
        .enumerate()
        .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
        .unwrap()
        .0;
    assert_eq!(peak as u64 + 1, warmup);
    assert!(values[..peak].windows(2).all(|w| w[0] < w[1]));
    assert!(values[peak..].windows(2).all(|w| w[0] > w[1]));
    assert!(values.iter().all(|&v| v > 0.0));
}

#[test]
fn container_round_trip() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let (store, _) = random_store(&mut rng, &[("a", &[2, 3]), ("b.c", &[4]), ("u", &[2, 1, 2])]);
    let mut buf = Vec::new();
    write_container(&mut buf, "{\"x\":1}", &store).unwrap();
    let c = read_container(&buf[..]).unwrap();
    assert_eq!(c.meta, "{\"x\":1}");
    assert_eq!(c.params, store);
    assert!(read_container(&b"garbage!"[..]).is_err());
}

mod props {
    use super::*;
    use proptest::prelude::*;

    proptest! {
        #[test]
        fn noam_positive(step in 1u64..100_000, warmup in 1u64..10_000) {
            prop_assert!(noam_lr(step, 4e-5, warmup) > 0.0);
        }
    }
}
