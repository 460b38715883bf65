use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::metrics::NullSink;
use crate::real::Real;
use crate::trainer::{fine_tune, FineTuneOptions, LabeledSet};
use crate::transformer::{HeadKind, TransformerModel};

use super::select::EvalMatrix;

fn head_of(set: &LabeledSet) -> HeadKind {
    match set.examples.first().map(|e| &e.target) {
        Some(crate::trainer::Target::Tokens(_)) => HeadKind::Token,
        _ => HeadKind::Sequence,
    }
}

fn lookup<'d>(datasets: &'d BTreeMap<String, LabeledSet>, name: &str) -> Result<&'d LabeledSet> {
    datasets
        .get(name)
        .ok_or_else(|| Error::Data(format!("no dataset for task `{name}`")))
}

/// Fill a source x target matrix by sequential fine-tuning.
///
/// For each source, `base` is fine-tuned on the source task with a fresh
/// head. That head is then discarded and a copy of the encoder is
/// fine-tuned on every target with another fresh head; the cell is the
/// target's held-out accuracy. Every cell uses seeds derived from `opts.seed`
/// and its position, so the matrix is reproducible.
pub fn build_eval_matrix<T: Real>(
    sources: &[String],
    targets: &[String],
    base: &TransformerModel<T>,
    datasets: &BTreeMap<String, LabeledSet>,
    opts: &FineTuneOptions,
) -> Result<EvalMatrix> {
    for name in sources.iter().chain(targets) {
        lookup(datasets, name)?;
    }
    let mut scores = Vec::with_capacity(sources.len());
    for (si, s) in sources.iter().enumerate() {
        let set = lookup(datasets, s)?;
        let cell_seed = |ti: usize| opts.seed.wrapping_add(1000 * si as u64 + ti as u64 + 1);
        let mut src = base.clone();
        src.reset_classifier(set.num_classes, head_of(set), opts.seed.wrapping_add(1000 * si as u64))?;
        let src_opts = FineTuneOptions {
            seed: opts.seed.wrapping_add(1000 * si as u64),
            ..*opts
        };
        fine_tune(&mut src, set, &src_opts, &mut NullSink)?;
        let mut row = Vec::with_capacity(targets.len());
        for (ti, t) in targets.iter().enumerate() {
            let tset = lookup(datasets, t)?;
            let mut m = src.clone();
            m.reset_classifier(tset.num_classes, head_of(tset), cell_seed(ti))?;
            let o = FineTuneOptions {
                seed: cell_seed(ti),
                ..*opts
            };
            let report = fine_tune(&mut m, tset, &o, &mut NullSink)?;
            let acc = report
                .validation
                .ok_or_else(|| Error::Data(format!("task `{t}` has no held-out examples")))?
                .accuracy;
            row.push(acc);
        }
        scores.push(row);
    }
    EvalMatrix::new(sources.to_vec(), targets.to_vec(), scores)
}
