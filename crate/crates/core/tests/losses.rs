use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use xdistil_core::losses::{attn_loss, ce_loss, layer_loss, layer_loss_tape, logit_loss, AlignmentMap};
use xdistil_core::transformer::{AttentionScaling, HeadKind, ModelConfig, TransformerModel};
use xdistil_core::{Tape, Tensor};

fn tensor(shape: &[usize], values: Vec<f64>) -> Tensor<f64> {
    Tensor::new(shape.to_vec(), values).unwrap()
}

fn row_stochastic(rng: &mut ChaCha8Rng, heads: usize, n: usize) -> Tensor<f64> {
    let mut v = Vec::with_capacity(heads * n * n);
    for _ in 0..heads * n {
        let row: Vec<f64> = (0..n).map(|_| rng.random::<f64>() + 1e-3).collect();
        let s: f64 = row.iter().sum();
        v.extend(row.into_iter().map(|x| x / s));
    }
    tensor(&[1, heads, n, n], v)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn logit_loss_is_symmetric_and_nonnegative(a in proptest::collection::vec(-5.0f64..5.0, 6), b in proptest::collection::vec(-5.0f64..5.0, 6)) {
        let (x, y) = (tensor(&[2, 3], a), tensor(&[2, 3], b));
        let ab = logit_loss(&x, &y).unwrap();
        prop_assert!(ab >= 0.0);
        prop_assert_eq!(ab, logit_loss(&y, &x).unwrap());
    }

    #[test]
    fn ce_is_positive_and_shift_invariant(z in proptest::collection::vec(-8.0f64..8.0, 4), label in 0usize..4, c in -50.0f64..50.0) {
        let l = ce_loss(&tensor(&[1, 4], z.clone()), &[label]).unwrap();
        prop_assert!(l > 0.0);
        let shifted = ce_loss(&tensor(&[1, 4], z.iter().map(|v| v + c).collect()), &[label]).unwrap();
        prop_assert!((l - shifted).abs() < 1e-9);
    }

    #[test]
    fn doubling_residuals_quadruples_layer_loss(seed in 0u64..1000) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let map = AlignmentMap::<f64>::new(3, 3, 2, 2, false, 0).unwrap();
        let teacher: Vec<Tensor<f64>> = (0..2).map(|_| Tensor::from_fn(&[1, 4, 3], |_| rng.random::<f64>() - 0.5)).collect();
        let delta: Vec<Tensor<f64>> = (0..2).map(|_| Tensor::from_fn(&[1, 4, 3], |_| rng.random::<f64>() - 0.5)).collect();
        let student = |k: f64| -> Vec<Tensor<f64>> {
            teacher.iter().zip(&delta).map(|(t, d)| {
                tensor(t.shape(), t.data().iter().zip(d.data()).map(|(a, b)| a + k * b).collect())
            }).collect()
        };
        let one = layer_loss(&student(1.0), &teacher, &map, None).unwrap();
        let two = layer_loss(&student(2.0), &teacher, &map, None).unwrap();
        prop_assert!(one > 0.0);
        prop_assert!((two - 4.0 * one).abs() <= 1e-9 * two);
    }

    #[test]
    fn attn_loss_of_row_stochastic_maps_is_at_most_one(seed in 0u64..10_000, n in 1usize..9, heads in 1usize..4, layers in 1usize..3) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let s: Vec<_> = (0..layers).map(|_| row_stochastic(&mut rng, heads, n)).collect();
        let t: Vec<_> = (0..layers).map(|_| row_stochastic(&mut rng, heads, n)).collect();
        let l = attn_loss(&s, &t, None).unwrap();
        prop_assert!((0.0..=1.0).contains(&l));
    }

    #[test]
    fn masked_positions_do_not_matter(seed in 0u64..1000, junk in -100.0f64..100.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = 5;
        let mask = vec![vec![true, true, true, false, false]];
        let map = AlignmentMap::<f64>::new(2, 3, 1, 1, false, seed).unwrap();
        let teacher = [Tensor::from_fn(&[1, n, 3], |_| rng.random::<f64>())];
        let base: Vec<f64> = (0..n * 2).map(|_| rng.random::<f64>()).collect();
        let mut poisoned = base.clone();
        poisoned[6..].iter_mut().for_each(|v| *v = junk);
        let a = layer_loss(&[tensor(&[1, n, 2], base)], &teacher, &map, Some(&mask)).unwrap();
        let b = layer_loss(&[tensor(&[1, n, 2], poisoned)], &teacher, &map, Some(&mask)).unwrap();
        prop_assert_eq!(a, b);

        let s = row_stochastic(&mut rng, 2, n);
        let t = row_stochastic(&mut rng, 2, n);
        let mut s2 = s.clone();
        // Rows of padded queries.
        for h in 0..2 {
            for q in 3..n {
                for k in 0..n {
                    s2.data_mut()[(h * n + q) * n + k] = junk;
                }
            }
        }
        let a = attn_loss(&[s], std::slice::from_ref(&t), Some(&mask)).unwrap();
        let b = attn_loss(&[s2], &[t], Some(&mask)).unwrap();
        prop_assert_eq!(a, b);
    }
}

#[test]
fn confident_correct_prediction_has_zero_ce() {
    let z = tensor(&[2, 3], vec![1e3, 0.0, 0.0, 0.0, -1e3, 1e3]);
    assert_eq!(ce_loss(&z, &[0, 2]).unwrap(), 0.0);
    let l = ce_loss(&tensor(&[1, 2], vec![10.0, -10.0]), &[0]).unwrap();
    assert!((l - (1.0 + (-20f64).exp()).ln()).abs() < 1e-14);
}

#[test]
fn teacher_receives_no_gradient() {
    let cfg = ModelConfig {
        num_layers: 2,
        hidden_dim: 8,
        num_heads: 2,
        ff_dim: 16,
        max_seq_len: 8,
        vocab_size: 12,
        num_classes: 3,
        attention_scaling: AttentionScaling::SqrtHeadDim,
        head: HeadKind::Sequence,
    };
    let teacher = TransformerModel::<f64>::random(cfg.clone(), 1).unwrap();
    let student = TransformerModel::<f64>::random(cfg, 2).unwrap();
    let map = AlignmentMap::<f64>::new(8, 8, 2, 2, false, 3).unwrap();
    let ids = [2, 5, 7, 3];
    let segs = [0, 0, 0, 0];
    let mut tape = Tape::new();
    let tv = teacher.params().bind(&mut tape, |_| false);
    let sv = student.params().bind(&mut tape, |_| true);
    let av = map.params().bind(&mut tape, |_| true);
    let te = teacher.encode(&mut tape, &tv, &ids, &segs, None).unwrap();
    let se = student.encode(&mut tape, &sv, &ids, &segs, None).unwrap();
    let loss = layer_loss_tape(&mut tape, &se.hidden, &te.hidden, &map, &av, None).unwrap();
    let grads = tape.backward(loss).unwrap();
    assert!(tv.iter().all(|&v| grads.get(v).is_none()));
    assert!(sv.iter().any(|&v| grads.get(v).is_some_and(|g| g.iter().any(|x| *x != 0.0))));
    assert!(av.iter().all(|&v| grads.get(v).is_some()));
}
