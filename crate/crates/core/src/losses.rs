//! Distillation objectives and the student-to-teacher width alignment map.
//!
//! All losses are nonnegative quantities to be minimized:
//!
//! * layer: `sum ||h_S W + b - h_T||^2 / (2 L_S |x|)` over aligned layers,
//! * attention: `sum ||A_S - A_T||^2 / (2 L_S heads |x|)`,
//! * logit: `||z_S - z_T||^2 / 2`,
//! * cross-entropy: `-log softmax(z)[label]`.
//!
//! `|x|` counts non-padding positions. The tape functions work on one
//! example; the tensor functions take whole batches and average over them.
//! Student layer `l` is paired with teacher layer `l + L_T - L_S`.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::real::Real;
use crate::tensor::{ParamSet, Tape, Tensor, Var};
use crate::transformer::truncated_normal;

/// Learnable affine map from student width to teacher width, applied as
/// `h W + b` with `W: [d_S, d_T]`.
#[derive(Debug, Clone)]
pub struct AlignmentMap<T> {
    params: ParamSet<T>,
    student_layers: usize,
    teacher_layers: usize,
    per_layer: bool,
}

impl<T: Real> AlignmentMap<T> {
    /// Identity weights when the widths agree, otherwise truncated normal
    /// with standard deviation `1/sqrt(d_S)`. Biases start at zero.
    pub fn new(
        student_dim: usize,
        teacher_dim: usize,
        student_layers: usize,
        teacher_layers: usize,
        per_layer: bool,
        seed: u64,
    ) -> Result<Self> {
        if student_layers == 0 || student_layers > teacher_layers {
            return Err(Error::contract(format!(
                "cannot align {student_layers} student layers with {teacher_layers} teacher layers"
            )));
        }
        if student_dim == 0 || teacher_dim == 0 {
            return Err(Error::contract("alignment widths must be positive"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamSet::new();
        let copies = if per_layer { student_layers } else { 1 };
        for l in 0..copies {
            let weight = if student_dim == teacher_dim {
                Tensor::eye(student_dim)
            } else {
                let std = 1.0 / (student_dim as f64).sqrt();
                Tensor::from_fn(&[student_dim, teacher_dim], |_| T::lit(truncated_normal(&mut rng, std)))
            };
            let (wn, bn) = Self::names_for(per_layer, l);
            params.insert(wn, weight)?;
            params.insert(bn, Tensor::zeros(&[teacher_dim]))?;
        }
        Ok(AlignmentMap {
            params,
            student_layers,
            teacher_layers,
            per_layer,
        })
    }

    fn names_for(per_layer: bool, l: usize) -> (String, String) {
        if per_layer {
            (format!("align.{l}.weight"), format!("align.{l}.bias"))
        } else {
            ("align.weight".into(), "align.bias".into())
        }
    }

    pub fn params(&self) -> &ParamSet<T> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet<T> {
        &mut self.params
    }

    pub fn student_layers(&self) -> usize {
        self.student_layers
    }

    pub fn teacher_layers(&self) -> usize {
        self.teacher_layers
    }

    pub fn is_per_layer(&self) -> bool {
        self.per_layer
    }

    /// Zero-based `(student, teacher)` layer pairs.
    pub fn pairing(&self) -> Vec<(usize, usize)> {
        let off = self.teacher_layers - self.student_layers;
        (0..self.student_layers).map(|l| (l, l + off)).collect()
    }

    /// Positions of the weight and bias used for student layer `l`.
    fn slots(&self, l: usize) -> (usize, usize) {
        if self.per_layer {
            (2 * l, 2 * l + 1)
        } else {
            (0, 1)
        }
    }

    pub fn cast<U: Real>(&self) -> AlignmentMap<U> {
        let mut params = ParamSet::new();
        for p in self.params.iter() {
            params.insert(p.name.clone(), p.tensor.cast()).expect("names are unique");
        }
        AlignmentMap {
            params,
            student_layers: self.student_layers,
            teacher_layers: self.teacher_layers,
            per_layer: self.per_layer,
        }
    }
}

fn valid_positions(mask: Option<&[bool]>, n: usize) -> Result<Option<Vec<usize>>> {
    match mask {
        None => Ok(None),
        Some(m) if m.len() != n => Err(Error::contract(format!(
            "mask has {} entries for {n} positions",
            m.len()
        ))),
        Some(m) => {
            let keep: Vec<usize> = (0..n).filter(|&i| m[i]).collect();
            if keep.is_empty() {
                return Err(Error::contract("every position is padding"));
            }
            Ok(if keep.len() == n { None } else { Some(keep) })
        }
    }
}

/// Hidden-state loss for one example over every aligned layer pair.
/// Hidden states are `[n, d]`; `align_vars` are the map's parameters bound
/// in set order.
pub fn layer_loss_tape<T: Real>(
    tape: &mut Tape<'_, T>,
    student: &[Var],
    teacher: &[Var],
    map: &AlignmentMap<T>,
    align_vars: &[Var],
    mask: Option<&[bool]>,
) -> Result<Var> {
    layer_loss_tape_on(tape, student, teacher, map, align_vars, mask, &map.pairing())
}

/// Hidden-state loss restricted to the given `(student, teacher)` layer
/// pairs; the layer normalizer is the number of pairs.
pub fn layer_loss_tape_on<T: Real>(
    tape: &mut Tape<'_, T>,
    student: &[Var],
    teacher: &[Var],
    map: &AlignmentMap<T>,
    align_vars: &[Var],
    mask: Option<&[bool]>,
    pairs: &[(usize, usize)],
) -> Result<Var> {
    if student.len() != map.student_layers || teacher.len() != map.teacher_layers {
        return Err(Error::contract(format!(
            "alignment expects {} student and {} teacher layers, got {} and {}",
            map.student_layers,
            map.teacher_layers,
            student.len(),
            teacher.len()
        )));
    }
    if pairs.is_empty() || pairs.iter().any(|&(s, t)| s >= student.len() || t >= teacher.len()) {
        return Err(Error::contract(format!("invalid layer pairs {pairs:?}")));
    }
    let n = tape.shape(student[0])[0];
    let keep = valid_positions(mask, n)?;
    let count = keep.as_ref().map_or(n, Vec::len);
    let mut total: Option<Var> = None;
    for &(ls, lt) in pairs {
        let (mut hs, mut ht) = (student[ls], teacher[lt]);
        if let Some(k) = &keep {
            hs = tape.gather_rows(hs, k)?;
            ht = tape.gather_rows(ht, k)?;
        }
        let (wi, bi) = map.slots(ls);
        let proj = tape.linear(hs, align_vars[wi], align_vars[bi])?;
        let diff = tape.sub(proj, ht)?;
        let sq = tape.sum_squares(diff)?;
        total = Some(match total {
            None => sq,
            Some(t) => tape.add(t, sq)?,
        });
    }
    let total = total.expect("at least one aligned layer");
    Ok(tape.scale(total, T::lit(1.0 / (2.0 * pairs.len() as f64 * count as f64))))
}

/// Attention loss for one example. Maps are `[heads, n, n]`; only the last
/// `student.len()` teacher layers are used.
pub fn attn_loss_tape<T: Real>(
    tape: &mut Tape<'_, T>,
    student: &[Var],
    teacher: &[Var],
    mask: Option<&[bool]>,
) -> Result<Var> {
    let ls = student.len();
    if ls == 0 || ls > teacher.len() {
        return Err(Error::contract(format!(
            "cannot align {ls} student attention layers with {} teacher layers",
            teacher.len()
        )));
    }
    let (sh, th) = (tape.shape(student[0]).to_vec(), tape.shape(teacher[0]).to_vec());
    if sh[0] != th[0] {
        return Err(Error::contract(format!(
            "attention transfer assumes equal head counts in teacher and student, got {} and {}",
            th[0], sh[0]
        )));
    }
    let (heads, n) = (sh[0], sh[1]);
    let keep = valid_positions(mask, n)?;
    let count = keep.as_ref().map_or(n, Vec::len);
    let row_mask = match &keep {
        Some(k) => {
            let mut m = vec![T::zero(); n * n];
            for &q in k {
                m[q * n..(q + 1) * n].fill(T::one());
            }
            Some(tape.constant(Tensor::new(vec![n, n], m)?))
        }
        None => None,
    };
    let off = teacher.len() - ls;
    let mut total: Option<Var> = None;
    for l in 0..ls {
        if tape.shape(student[l]) != tape.shape(teacher[l + off]) {
            return Err(Error::shape(
                "attn_loss",
                tape.shape(student[l]),
                tape.shape(teacher[l + off]),
            ));
        }
        let mut diff = tape.sub(student[l], teacher[l + off])?;
        if let Some(m) = row_mask {
            diff = tape.mul(diff, m)?;
        }
        let sq = tape.sum_squares(diff)?;
        total = Some(match total {
            None => sq,
            Some(t) => tape.add(t, sq)?,
        });
    }
    let total = total.expect("at least one layer");
    Ok(tape.scale(total, T::lit(1.0 / (2.0 * (ls * heads * count) as f64))))
}

/// `||z_S - z_T||^2 / 2` for one example.
pub fn logit_loss_tape<T: Real>(tape: &mut Tape<'_, T>, student: Var, teacher: Var) -> Result<Var> {
    if tape.shape(student) != tape.shape(teacher) {
        return Err(Error::contract(format!(
            "logit shapes differ: {:?} vs {:?}",
            tape.shape(student),
            tape.shape(teacher)
        )));
    }
    let diff = tape.sub(student, teacher)?;
    let sq = tape.sum_squares(diff)?;
    Ok(tape.scale(sq, T::lit(0.5)))
}

/// Cross-entropy of `[C]` logits against `label`.
pub fn ce_loss_tape<T: Real>(tape: &mut Tape<'_, T>, logits: Var, label: usize) -> Result<Var> {
    let c = *tape.shape(logits).last().unwrap();
    if tape.shape(logits).len() != 1 {
        return Err(Error::contract(format!(
            "ce_loss_tape expects [C] logits, got {:?}",
            tape.shape(logits)
        )));
    }
    if label >= c {
        return Err(Error::contract(format!("label {label} out of range for {c} classes")));
    }
    let lp = tape.log_softmax(logits)?;
    let pick = tape.gather_rows(lp, &[label])?;
    let s = tape.sum(pick);
    Ok(tape.scale(s, -T::one()))
}

/// Mean token cross-entropy of `[n, C]` logits; `None` labels are skipped.
pub fn token_ce_loss_tape<T: Real>(tape: &mut Tape<'_, T>, logits: Var, labels: &[Option<usize>]) -> Result<Var> {
    let shape = tape.shape(logits).to_vec();
    if shape.len() != 2 || shape[0] != labels.len() {
        return Err(Error::contract(format!(
            "token logits {shape:?} do not match {} labels",
            labels.len()
        )));
    }
    let c = shape[1];
    let mut flat = Vec::new();
    for (i, l) in labels.iter().enumerate() {
        if let Some(l) = *l {
            if l >= c {
                return Err(Error::contract(format!("label {l} out of range for {c} classes")));
            }
            flat.push(i * c + l);
        }
    }
    if flat.is_empty() {
        return Err(Error::contract("no labeled positions"));
    }
    let lp = tape.log_softmax(logits)?;
    let col = tape.reshape(lp, &[shape[0] * c])?;
    let pick = tape.gather_rows(col, &flat)?;
    let m = tape.mean(pick);
    Ok(tape.scale(m, -T::one()))
}

fn batch_size<T: Real>(parts: &[Tensor<T>], what: &str) -> Result<usize> {
    let b = parts
        .first()
        .ok_or_else(|| Error::contract(format!("no {what} layers")))?
        .shape()[0];
    if b == 0 || parts.iter().any(|p| p.shape()[0] != b) {
        return Err(Error::contract(format!("inconsistent batch size across {what} layers")));
    }
    Ok(b)
}

fn mask_row(mask: Option<&[Vec<bool>]>, b: usize) -> Option<&[bool]> {
    mask.map(|m| m[b].as_slice())
}

/// Batch-mean hidden-state loss. Hidden tensors are `[batch, n, d]`.
pub fn layer_loss<T: Real>(
    student: &[Tensor<T>],
    teacher: &[Tensor<T>],
    map: &AlignmentMap<T>,
    mask: Option<&[Vec<bool>]>,
) -> Result<T> {
    let batch = batch_size(student, "student")?;
    if batch_size(teacher, "teacher")? != batch || mask.is_some_and(|m| m.len() != batch) {
        return Err(Error::contract("student, teacher and mask batch sizes differ"));
    }
    let mut acc = 0.0;
    for b in 0..batch {
        let mut tape = Tape::new();
        let s: Vec<Var> = student.iter().map(|t| tape.constant(t.index(b))).collect();
        let t: Vec<Var> = teacher.iter().map(|t| tape.constant(t.index(b))).collect();
        let a = map.params.bind(&mut tape, |_| false);
        let l = layer_loss_tape(&mut tape, &s, &t, map, &a, mask_row(mask, b))?;
        acc += tape.scalar(l).as_f64();
    }
    Ok(T::lit(acc / batch as f64))
}

/// Batch-mean attention loss. Maps are `[batch, heads, n, n]`.
pub fn attn_loss<T: Real>(student: &[Tensor<T>], teacher: &[Tensor<T>], mask: Option<&[Vec<bool>]>) -> Result<T> {
    let batch = batch_size(student, "student")?;
    if batch_size(teacher, "teacher")? != batch || mask.is_some_and(|m| m.len() != batch) {
        return Err(Error::contract("student, teacher and mask batch sizes differ"));
    }
    let mut acc = 0.0;
    for b in 0..batch {
        let mut tape = Tape::new();
        let s: Vec<Var> = student.iter().map(|t| tape.constant(t.index(b))).collect();
        let t: Vec<Var> = teacher.iter().map(|t| tape.constant(t.index(b))).collect();
        let l = attn_loss_tape(&mut tape, &s, &t, mask_row(mask, b))?;
        acc += tape.scalar(l).as_f64();
    }
    Ok(T::lit(acc / batch as f64))
}

/// Batch mean of `||z_S - z_T||^2 / 2` for `[batch, C]` logits.
pub fn logit_loss<T: Real>(student: &Tensor<T>, teacher: &Tensor<T>) -> Result<T> {
    if student.shape() != teacher.shape() || student.rank() != 2 {
        return Err(Error::contract(format!(
            "logit_loss needs equal [batch, C] shapes, got {:?} and {:?}",
            student.shape(),
            teacher.shape()
        )));
    }
    let c = student.shape()[1];
    let total: f64 = student
        .data()
        .chunks(c)
        .zip(teacher.data().chunks(c))
        .map(|(s, t)| 0.5 * s.iter().zip(t).map(|(a, b)| (*a - *b).as_f64().powi(2)).sum::<f64>())
        .sum();
    Ok(T::lit(total / student.shape()[0] as f64))
}

/// Batch-mean cross-entropy for `[batch, C]` logits.
pub fn ce_loss<T: Real>(logits: &Tensor<T>, labels: &[usize]) -> Result<T> {
    if logits.rank() != 2 || logits.shape()[0] != labels.len() || labels.is_empty() {
        return Err(Error::contract(format!(
            "ce_loss needs [batch, C] logits matching {} labels, got {:?}",
            labels.len(),
            logits.shape()
        )));
    }
    let c = logits.shape()[1];
    let mut total = 0.0;
    for (row, &label) in logits.data().chunks(c).zip(labels) {
        if label >= c {
            return Err(Error::contract(format!("label {label} out of range for {c} classes")));
        }
        let row: Vec<f64> = row.iter().map(|v| v.as_f64()).collect();
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = row.iter().map(|&v| (v - max).exp()).sum::<f64>().ln() + max;
        total += lse - row[label];
    }
    Ok(T::lit(total / labels.len() as f64))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], v: &[f64]) -> Tensor<f64> {
        Tensor::from_f64(shape, v).unwrap()
    }

    #[test]
    fn layer_loss_hand_value() {
        let map = AlignmentMap::<f64>::new(2, 2, 1, 1, false, 0).unwrap();
        let s = [t(&[1, 2, 2], &[1.0, 0.0, 0.0, 1.0])];
        let z = [Tensor::zeros(&[1, 2, 2])];
        assert!((layer_loss(&s, &z, &map, None).unwrap() - 0.5).abs() < 1e-12);
        assert_eq!(layer_loss(&s, &s, &map, None).unwrap(), 0.0);
    }

    #[test]
    fn attn_loss_hand_value() {
        let s = [t(&[1, 1, 2, 2], &[1.0, 0.0, 0.0, 1.0])];
        let te = [t(&[1, 1, 2, 2], &[0.5; 4])];
        assert!((attn_loss(&s, &te, None).unwrap() - 0.25).abs() < 1e-12);
        assert_eq!(attn_loss(&s, &s, None).unwrap(), 0.0);
    }

    #[test]
    fn attn_head_mismatch_is_contract_error() {
        let s = [Tensor::<f64>::zeros(&[1, 1, 2, 2])];
        let te = [Tensor::<f64>::zeros(&[1, 2, 2, 2])];
        match attn_loss(&s, &te, None) {
            Err(Error::Contract(msg)) => assert!(msg.contains("equal head counts")),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn logit_and_ce_hand_values() {
        let a = t(&[1, 3], &[1.0, 0.0, 0.0]);
        let b = t(&[1, 3], &[0.0, 1.0, 0.0]);
        assert!((logit_loss(&a, &b).unwrap() - 1.0).abs() < 1e-12);
        assert_eq!(logit_loss(&a, &a).unwrap(), 0.0);
        let u = Tensor::<f64>::zeros(&[1, 3]);
        assert!((ce_loss(&u, &[0]).unwrap() - 3f64.ln()).abs() < 1e-12);
        let m = t(&[1, 2], &[10.0, -10.0]);
        let v = ce_loss(&m, &[0]).unwrap();
        assert!((v - 2.061e-9).abs() < 1e-11, "{v}");
        assert!(ce_loss(&u, &[3]).is_err());
    }

    #[test]
    fn tape_ce_matches_batch_ce() {
        let z = t(&[3], &[0.2, -1.0, 0.7]);
        let mut tape = Tape::new();
        let v = tape.constant(z.clone());
        let l = ce_loss_tape(&mut tape, v, 2).unwrap();
        let batch = ce_loss(&z.reshape(&[1, 3]).unwrap(), &[2]).unwrap();
        assert!((tape.scalar(l) - batch).abs() < 1e-12);
    }

    #[test]
    fn pairing_covers_last_teacher_layers() {
        let map = AlignmentMap::<f32>::new(4, 8, 2, 5, false, 0).unwrap();
        assert_eq!(map.pairing(), vec![(0, 3), (1, 4)]);
        assert!(AlignmentMap::<f32>::new(4, 8, 3, 2, false, 0).is_err());
    }

    #[test]
    fn padded_rows_are_ignored() {
        let map = AlignmentMap::<f64>::new(2, 2, 1, 1, false, 0).unwrap();
        let mask = vec![vec![true, false]];
        let s1 = [t(&[1, 2, 2], &[1.0, 0.0, 5.0, 5.0])];
        let s2 = [t(&[1, 2, 2], &[1.0, 0.0, -3.0, 9.0])];
        let z = [Tensor::zeros(&[1, 2, 2])];
        let a = layer_loss(&s1, &z, &map, Some(&mask)).unwrap();
        let b = layer_loss(&s2, &z, &map, Some(&mask)).unwrap();
        assert_eq!(a, b);
        assert!((a - 0.5).abs() < 1e-12);
    }
}
