use proptest::prelude::*;
use xdistil_core::checkpoint::{decode, model_bytes, model_from_container, Container};
use xdistil_core::transformer::{tokenize, AttentionScaling, Batch, HeadKind, ModelConfig, TransformerModel, Vocab};
use xdistil_core::{Error, Execution};

fn config(layers: usize, dim: usize, head: HeadKind) -> ModelConfig {
    ModelConfig {
        num_layers: layers,
        hidden_dim: dim,
        num_heads: 2,
        ff_dim: 2 * dim,
        max_seq_len: 16,
        vocab_size: 30,
        num_classes: 3,
        attention_scaling: AttentionScaling::SqrtHeadDim,
        head,
    }
}

fn batch_of(ids: &[u32], segments: &[u8], pad_to: usize) -> Batch {
    let n = ids.len();
    let mut i = ids.to_vec();
    let mut s = segments.to_vec();
    let mut m = vec![true; n];
    i.resize(pad_to, 0);
    s.resize(pad_to, 0);
    m.resize(pad_to, false);
    Batch {
        ids: vec![i],
        segments: vec![s],
        mask: vec![m],
    }
}

fn sequence() -> impl Strategy<Value = (Vec<u32>, Vec<u8>)> {
    (2usize..9).prop_flat_map(|n| {
        (
            proptest::collection::vec(4u32..30, n),
            (1usize..n).prop_map(move |split| (0..n).map(|i| u8::from(i >= split)).collect::<Vec<u8>>()),
        )
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn padding_leaves_real_positions_unchanged((ids, segs) in sequence(), extra in 1usize..7, seed in 0u64..1000) {
        for head in [HeadKind::Sequence, HeadKind::Token] {
            let model = TransformerModel::<f32>::random(config(2, 8, head), seed).unwrap();
            let n = ids.len();
            let a = model.forward(&batch_of(&ids, &segs, n), Execution::Sequential).unwrap();
            let b = model.forward(&batch_of(&ids, &segs, n + extra), Execution::Sequential).unwrap();
            for (ha, hb) in a.hidden.iter().zip(&b.hidden) {
                let d = ha.shape()[2];
                for (x, y) in ha.data().iter().zip(&hb.data()[..n * d]) {
                    prop_assert!((x - y).abs() < 1e-5);
                }
            }
            let c = a.logits.numel();
            for (x, y) in a.logits.data().iter().zip(&b.logits.data()[..c]) {
                prop_assert!((x - y).abs() < 1e-5);
            }
        }
    }

    #[test]
    fn attention_rows_are_stochastic_over_real_keys((ids, segs) in sequence(), extra in 0usize..4, seed in 0u64..1000) {
        let model = TransformerModel::<f64>::random(config(2, 8, HeadKind::Sequence), seed).unwrap();
        let n = ids.len();
        let out = model.forward(&batch_of(&ids, &segs, n + extra), Execution::Sequential).unwrap();
        let width = n + extra;
        for a in &out.attn {
            for row in a.data().chunks(width) {
                let real: f64 = row[..n].iter().sum();
                prop_assert!((real - 1.0).abs() < 1e-6);
                prop_assert!(row[n..].iter().all(|&p| p == 0.0));
            }
        }
    }

    #[test]
    fn literal_sequence_scaling_is_also_row_stochastic((ids, segs) in sequence(), seed in 0u64..1000) {
        let mut cfg = config(1, 8, HeadKind::Sequence);
        cfg.attention_scaling = AttentionScaling::SqrtSeqLen;
        let model = TransformerModel::<f64>::random(cfg, seed).unwrap();
        let out = model.forward(&batch_of(&ids, &segs, ids.len()), Execution::Sequential).unwrap();
        for row in out.attn[0].data().chunks(ids.len()) {
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-6);
        }
    }
}

#[test]
fn parallel_and_sequential_forward_agree_bitwise() {
    let model = TransformerModel::<f32>::random(config(2, 8, HeadKind::Sequence), 0).unwrap();
    let vocab = Vocab::from_tokens(
        ["[PAD]", "[UNK]", "[CLS]", "[SEP]", "a", "b", "c", "##d"].iter().copied(),
    )
    .unwrap();
    let encs: Vec<_> = ["a b", "c a bd", "b"]
        .iter()
        .map(|t| tokenize(t, &vocab, Some("a c"), 10).unwrap())
        .collect();
    let batch = Batch::from_encodings(&encs).unwrap();
    let s = model.forward(&batch, Execution::Sequential).unwrap();
    let p = model.forward(&batch, Execution::Parallel).unwrap();
    assert_eq!(s, p);
    assert_eq!(s, model.forward(&batch, Execution::Sequential).unwrap());
}

#[test]
fn checkpoint_with_wrong_width_names_the_tensor() {
    let small = TransformerModel::<f32>::random(config(1, 8, HeadKind::Sequence), 0).unwrap();
    let wide = TransformerModel::<f32>::random(config(1, 16, HeadKind::Sequence), 0).unwrap();
    let c = Container {
        config: decode(&model_bytes(&small).unwrap()).unwrap().config,
        tensors: decode(&model_bytes(&wide).unwrap()).unwrap().tensors,
    };
    match model_from_container::<f32>(&c) {
        Err(Error::NamedTensor { name, .. }) => assert_eq!(name, "embeddings.word"),
        other => panic!("expected a named-tensor error, got {:?}", other.map(|m| m.config().clone())),
    }
}

#[test]
fn sequence_length_limit_is_enforced() {
    let model = TransformerModel::<f32>::random(config(1, 8, HeadKind::Sequence), 0).unwrap();
    let long = batch_of(&[4; 17], &[0; 17], 17);
    assert!(matches!(model.forward(&long, Execution::Sequential), Err(Error::Length { .. })));
}
