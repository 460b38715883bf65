//! Compare the full distillation recipe against two ablations on the
//! synthetic pair task.
//!
//! Usage: `cargo run --release --example ablation -- [labeled] [transfer] [seeds] [teacher-pool] [teacher-epochs]`

use std::time::Instant;

use xdistil_core::metrics::NullSink;
use xdistil_core::synthetic::{SyntheticSpec, SyntheticTask};
use xdistil_core::trainer::{distil, evaluate, fine_tune, DistilConfig, FineTuneOptions, StudentInit};
use xdistil_core::transformer::{AttentionScaling, HeadKind, ModelConfig, TransformerModel};
use xdistil_core::Execution;

fn model(layers: usize, dim: usize, vocab: usize, max_len: usize) -> ModelConfig {
    ModelConfig {
        num_layers: layers,
        hidden_dim: dim,
        num_heads: 2,
        ff_dim: 2 * dim,
        max_seq_len: max_len,
        vocab_size: vocab,
        num_classes: 3,
        attention_scaling: AttentionScaling::SqrtHeadDim,
        head: HeadKind::Sequence,
    }
}

fn main() -> xdistil_core::Result<()> {
    let args: Vec<usize> = std::env::args().skip(1).map(|a| a.parse().expect("numeric argument")).collect();
    let n_labeled = args.first().copied().unwrap_or(2000);
    let n_transfer = args.get(1).copied().unwrap_or(20000);
    let seeds = args.get(2).copied().unwrap_or(3) as u64;
    let n_teacher = args.get(3).copied().unwrap_or(2000);
    let teacher_epochs = args.get(4).copied().unwrap_or(12);

    let task = SyntheticTask::new(SyntheticSpec::default())?;
    let v = task.vocab().len();
    let max_len = task.spec().max_seq_len;
    // One teacher, trained on a larger labeled pool, shared by every seed.
    let t0 = Instant::now();
    let mut teacher = TransformerModel::<f32>::random(model(4, 32, v, max_len), 0)?;
    let pool = task.labeled(n_teacher, 99)?;
    // One epoch per round with a fresh optimizer; the restarts help the
    // teacher leave the early plateau where it only reads the negation cue.
    let ft = FineTuneOptions {
        epochs: teacher_epochs,
        lr: 1e-3,
        batch_size: 8,
        restart_each_epoch: true,
        ..Default::default()
    };
    fine_tune(&mut teacher, &pool, &ft, &mut NullSink)?;
    let teacher_acc = evaluate(&teacher, &task.labeled(1000, 98)?, Execution::default())?.accuracy;
    println!("teacher {teacher_acc:.3} ({} ms)", t0.elapsed().as_millis());

    for seed in 0..seeds {
        let labeled = task.labeled(n_labeled, 100 + seed)?;
        let transfer = task.transfer(n_transfer, 200 + seed)?;
        let test = task.labeled(1000, 300 + seed)?;

        let student_cfg = model(2, 16, v, max_len);
        let mut base = DistilConfig {
            seed,
            ..Default::default()
        };
        base.schedule.lr = [1e-3, 1e-3, 5e-4, 1e-3, 5e-4];
        let variants = [
            ("full", base.clone()),
            ("from-scratch", {
                let mut c = base.clone();
                c.ablations.init_from_scratch = true;
                c
            }),
            ("last-layer-only", {
                let mut c = base.clone();
                c.ablations.no_hidden_states_last_layer_only = true;
                c
            }),
        ];
        for (name, cfg) in variants {
            let t0 = Instant::now();
            let out = distil(&cfg, &teacher, StudentInit::Random(&student_cfg), &transfer, &labeled, &mut NullSink)?;
            let acc = evaluate(&out.student, &test, Execution::default())?.accuracy;
            println!("seed {seed}: {name:16} {acc:.3} ({} ms)", t0.elapsed().as_millis());
        }
    }
    Ok(())
}
