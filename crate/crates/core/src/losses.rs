//! Two-way softplus loss, the BCE baseline, and multi-hot targets.
//!
//! Both losses take flat logits `[n, 24]` and targets of the same shape.
//! For the two-way loss a target entry counts as positive when it is
//! strictly greater than zero, so mixup-blended targets keep their set
//! semantics.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::label_head::{TaskLabels, NUM_CLASSES, NUM_TASKS, TASKS};
use crate::tensor::{logsumexp, softplus, Tape, Tensor, Var};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LossKind {
    #[default]
    Twl,
    Bce,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossConfig {
    pub kind: LossKind,
    pub temperature: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            kind: LossKind::Twl,
            temperature: 4.0,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return Err(Error::Config(format!(
                "temperature must be positive, got {}",
                self.temperature
            )));
        }
        Ok(())
    }
}

pub fn labels_to_multihot(labels: &TaskLabels) -> Result<Vec<f64>> {
    let mut row = vec![0.0; NUM_CLASSES];
    for (t, (&c, task)) in labels.iter().zip(TASKS.iter()).enumerate() {
        if c >= task.cardinality() {
            return Err(Error::Data(format!(
                "class {c} out of range for task {} ({} classes)",
                task.name,
                task.cardinality()
            )));
        }
        debug_assert_eq!(TASKS[t].offset + c, crate::label_head::flat_index(t, c));
        row[task.offset + c] = 1.0;
    }
    Ok(row)
}

/// Inverse of [`labels_to_multihot`] for rows with exactly one 1 per task block.
pub fn multihot_to_labels(row: &[f64]) -> Result<TaskLabels> {
    if row.len() != NUM_CLASSES {
        return Err(Error::Data(format!(
            "multi-hot row of length {}",
            row.len()
        )));
    }
    let mut labels = [0; NUM_TASKS];
    for (t, task) in TASKS.iter().enumerate() {
        let block = &row[task.offset..task.offset + task.cardinality()];
        let ones: Vec<usize> = block
            .iter()
            .enumerate()
            .filter(|(_, &v)| v == 1.0)
            .map(|(i, _)| i)
            .collect();
        if ones.len() != 1 || block.iter().any(|&v| v != 0.0 && v != 1.0) {
            return Err(Error::Data(format!(
                "task {} block is not one-hot: {block:?}",
                task.name
            )));
        }
        labels[t] = ones[0];
    }
    Ok(labels)
}

fn check_temperature(t: f64) -> Result<()> {
    if t > 0.0 && t.is_finite() {
        Ok(())
    } else {
        Err(Error::Config(format!(
            "temperature must be positive, got {t}"
        )))
    }
}

/// `softplus(lse_{y=0}(l) + T * lse_{y>0}(-l / T))`; zero when either set is empty.
fn softplus_margin(logits: &[f64], targets: &[f64], t: f64) -> Result<f64> {
    check_temperature(t)?;
    if logits.len() != targets.len() {
        return Err(Error::shape(
            "two_way_loss",
            &[logits.len()],
            &[targets.len()],
        ));
    }
    if logits.iter().any(|v| !v.is_finite()) {
        return Err(Error::NumericOverflow { op: "two_way_loss" });
    }
    let neg: Vec<f64> = logits
        .iter()
        .zip(targets)
        .filter(|(_, &y)| y <= 0.0)
        .map(|(&l, _)| l)
        .collect();
    let pos: Vec<f64> = logits
        .iter()
        .zip(targets)
        .filter(|(_, &y)| y > 0.0)
        .map(|(&l, _)| -l / t)
        .collect();
    if neg.is_empty() || pos.is_empty() {
        return Ok(0.0);
    }
    Ok(softplus(logsumexp(&neg) + t * logsumexp(&pos)))
}

/// Per-sample term over the labels of one row.
pub fn twl_sample_term(logits: &[f64], targets: &[f64], t: f64) -> Result<f64> {
    softplus_margin(logits, targets, t)
}

/// Per-class term over the samples of one column.
pub fn twl_class_term(logits: &[f64], targets: &[f64], t: f64) -> Result<f64> {
    softplus_margin(logits, targets, t)
}

fn check_batch(op: &'static str, logits: &Tensor, targets: &Tensor) -> Result<(usize, usize)> {
    let s = logits.shape();
    if s.len() != 2 || s != targets.shape() {
        return Err(Error::shape(op, s, targets.shape()));
    }
    Ok((s[0], s[1]))
}

/// Plain evaluation of the two-way loss without a tape.
pub fn two_way_loss_value(logits: &Tensor, targets: &Tensor, t: f64) -> Result<f64> {
    let (n, k) = check_batch("two_way_loss", logits, targets)?;
    let (l, y) = (logits.data(), targets.data());
    let mut rows = 0.0;
    for i in 0..n {
        rows += twl_sample_term(&l[i * k..(i + 1) * k], &y[i * k..(i + 1) * k], t)?;
    }
    let mut cols = 0.0;
    for j in 0..k {
        let lc: Vec<f64> = (0..n).map(|i| l[i * k + j]).collect();
        let yc: Vec<f64> = (0..n).map(|i| y[i * k + j]).collect();
        cols += twl_class_term(&lc, &yc, t)?;
    }
    Ok(rows / n as f64 + cols / k as f64)
}

// Row-wise softplus margins on the tape; rows without both a positive and a
// negative entry contribute zero.
fn margin_rows(tape: &mut Tape, logits: Var, targets: &[f64], t: f64) -> Result<Var> {
    let s = tape.shape(logits).to_vec();
    let (rows, cols) = (s[0], s[1]);
    let neg: Arc<[bool]> = targets.iter().map(|&y| y <= 0.0).collect();
    let pos: Arc<[bool]> = targets.iter().map(|&y| y > 0.0).collect();
    let valid: Arc<[f64]> = (0..rows)
        .map(|r| {
            let row = r * cols..(r + 1) * cols;
            let has_neg = neg[row.clone()].iter().any(|&b| b);
            let has_pos = pos[row].iter().any(|&b| b);
            if has_neg && has_pos {
                1.0
            } else {
                0.0
            }
        })
        .collect();
    let a = tape.logsumexp(logits, Some(neg))?;
    let scaled = tape.scale(logits, -1.0 / t)?;
    let b = tape.logsumexp(scaled, Some(pos))?;
    let b = tape.scale(b, t)?;
    let z = tape.add(a, b)?;
    let sp = tape.softplus(z)?;
    tape.mul_const(sp, valid)
}

/// Two-way loss: mean per-sample margin plus mean per-class margin.
pub fn two_way_loss(tape: &mut Tape, logits: Var, targets: &Tensor, t: f64) -> Result<Var> {
    check_temperature(t)?;
    let (n, k) = check_batch("two_way_loss", tape.value(logits), targets)?;
    let sample_terms = margin_rows(tape, logits, targets.data(), t)?;
    let sample_sum = tape.sum(sample_terms)?;
    let sample_mean = tape.scale(sample_sum, 1.0 / n as f64)?;

    let lt = tape.permute(logits, &[1, 0])?;
    let yt: Vec<f64> = (0..k)
        .flat_map(|j| (0..n).map(move |i| (i, j)))
        .map(|(i, j)| targets.data()[i * k + j])
        .collect();
    let class_terms = margin_rows(tape, lt, &yt, t)?;
    let class_sum = tape.sum(class_terms)?;
    let class_mean = tape.scale(class_sum, 1.0 / k as f64)?;
    tape.add(sample_mean, class_mean)
}

/// Mean binary cross-entropy with logits, `softplus(l) - y * l` per entry.
pub fn bce_loss(tape: &mut Tape, logits: Var, targets: &Tensor) -> Result<Var> {
    check_batch("bce_loss", tape.value(logits), targets)?;
    let sp = tape.softplus(logits)?;
    let yl = tape.mul_const(logits, targets.data().into())?;
    let per = tape.sub(sp, yl)?;
    tape.mean(per)
}

pub fn bce_value(logits: &Tensor, targets: &Tensor) -> Result<f64> {
    check_batch("bce_loss", logits, targets)?;
    if !logits.is_finite() {
        return Err(Error::NumericOverflow { op: "bce_loss" });
    }
    let total: f64 = logits
        .data()
        .iter()
        .zip(targets.data())
        .map(|(&l, &y)| softplus(l) - y * l)
        .sum();
    Ok(total / logits.numel() as f64)
}

/// The configured training objective.
pub fn loss(tape: &mut Tape, cfg: &LossConfig, logits: Var, targets: &Tensor) -> Result<Var> {
    match cfg.kind {
        LossKind::Twl => two_way_loss(tape, logits, targets, cfg.temperature),
        LossKind::Bce => bce_loss(tape, logits, targets),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{grad_check, GradCheckOptions};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use std::f64::consts::LN_2;

    // Direct transcription with no max-shifting; fine for moderate logits.
    fn naive_term(l: &[f64], y: &[f64], t: f64) -> f64 {
        let neg: f64 = l
            .iter()
            .zip(y)
            .filter(|(_, &y)| y <= 0.0)
            .map(|(l, _)| l.exp())
            .sum();
        let pos: f64 = l
            .iter()
            .zip(y)
            .filter(|(_, &y)| y > 0.0)
            .map(|(l, _)| (-l / t).exp())
            .sum();
        if neg == 0.0 || pos == 0.0 {
            return 0.0;
        }
        (1.0 + (neg.ln() + t * pos.ln()).exp()).ln()
    }

    fn random_batch(rng: &mut ChaCha8Rng, n: usize, scale: f64) -> (Tensor, Tensor) {
        let logits = Tensor::from_fn(&[n, NUM_CLASSES], |_| rng.random_range(-scale..scale));
        let mut y = Vec::with_capacity(n * NUM_CLASSES);
        for _ in 0..n {
            let labels: TaskLabels =
                std::array::from_fn(|t| rng.random_range(0..TASKS[t].cardinality()));
            y.extend(labels_to_multihot(&labels).unwrap());
        }
        (logits, Tensor::new(vec![n, NUM_CLASSES], y).unwrap())
    }

    #[test]
    fn multihot_example() {
        let labels = [1, 0, 0, 0, 0, 0, 0, 0];
        let row = labels_to_multihot(&labels).unwrap();
        let ones: Vec<usize> = row
            .iter()
            .enumerate()
            .filter(|(_, &v)| v == 1.0)
            .map(|(i, _)| i)
            .collect();
        assert_eq!(ones, vec![1, 5, 8, 10, 13, 16, 19, 22]);
        assert_eq!(row.iter().sum::<f64>(), 8.0);
        assert_eq!(multihot_to_labels(&row).unwrap(), labels);
        assert!(labels_to_multihot(&[5, 0, 0, 0, 0, 0, 0, 0]).is_err());
    }

    #[test]
    fn sample_term_examples() {
        for t in [0.5, 1.0, 4.0] {
            let v = twl_sample_term(&[0.0, 0.0], &[1.0, 0.0], t).unwrap();
            assert!((v - LN_2).abs() < 1e-15);
        }
        let v = twl_sample_term(&[10.0, -10.0], &[1.0, 0.0], 1.0).unwrap();
        assert!((v - softplus(-20.0)).abs() < 1e-20);
        assert!((v - 2.061_153_6e-9).abs() < 1e-15);
    }

    #[test]
    fn class_term_examples() {
        assert_eq!(twl_class_term(&[1.0, 2.0], &[0.0, 0.0], 4.0).unwrap(), 0.0);
        assert!((twl_class_term(&[0.0, 0.0], &[1.0, 0.0], 4.0).unwrap() - LN_2).abs() < 1e-15);
        assert!(twl_class_term(&[f64::NAN, 0.0], &[1.0, 0.0], 4.0).is_err());
    }

    #[test]
    fn analytic_two_way_case() {
        let logits = Tensor::new(vec![1, 2], vec![0.0, 0.0]).unwrap();
        let y = Tensor::new(vec![1, 2], vec![1.0, 0.0]).unwrap();
        let v = two_way_loss_value(&logits, &y, 1.0).unwrap();
        assert!((v - LN_2).abs() < 1e-12);
        let mut tape = Tape::new();
        let l = tape.leaf(logits, true);
        let out = two_way_loss(&mut tape, l, &y, 1.0).unwrap();
        assert!((tape.data(out)[0] - LN_2).abs() < 1e-12);
    }

    #[test]
    fn matches_naive_formula() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..50 {
            let (l, y) = random_batch(&mut rng, 4, 20.0);
            for i in 0..4 {
                let lr = &l.data()[i * 24..(i + 1) * 24];
                let yr = &y.data()[i * 24..(i + 1) * 24];
                let got = twl_sample_term(lr, yr, 4.0).unwrap();
                let want = naive_term(lr, yr, 4.0);
                assert!(
                    (got - want).abs() <= 1e-10 * want.abs().max(1.0),
                    "{got} vs {want}"
                );
            }
        }
    }

    #[test]
    fn duplicated_rows_keep_sample_average() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let (l, y) = random_batch(&mut rng, 3, 3.0);
        let avg = |l: &Tensor, y: &Tensor| {
            let k = NUM_CLASSES;
            let n = l.shape()[0];
            (0..n)
                .map(|i| {
                    twl_sample_term(
                        &l.data()[i * k..(i + 1) * k],
                        &y.data()[i * k..(i + 1) * k],
                        4.0,
                    )
                    .unwrap()
                })
                .sum::<f64>()
                / n as f64
        };
        let dup = |t: &Tensor| {
            let mut d = t.data().to_vec();
            d.extend_from_slice(t.data());
            Tensor::new(vec![6, NUM_CLASSES], d).unwrap()
        };
        assert!((avg(&l, &y) - avg(&dup(&l), &dup(&y))).abs() < 1e-14);
    }

    #[test]
    fn tape_and_plain_paths_agree() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let (l, y) = random_batch(&mut rng, 5, 4.0);
        let plain = two_way_loss_value(&l, &y, 4.0).unwrap();
        let mut tape = Tape::new();
        let v = tape.leaf(l.clone(), true);
        let out = two_way_loss(&mut tape, v, &y, 4.0).unwrap();
        assert!((tape.data(out)[0] - plain).abs() < 1e-12);
        let mut tape = Tape::new();
        let v = tape.leaf(l.clone(), true);
        let out = bce_loss(&mut tape, v, &y).unwrap();
        assert!((tape.data(out)[0] - bce_value(&l, &y).unwrap()).abs() < 1e-12);
    }

    #[test]
    fn bce_zero_logits() {
        for target in [0.0, 1.0] {
            let l = Tensor::zeros(&[2, NUM_CLASSES]);
            let y = Tensor::full(&[2, NUM_CLASSES], target);
            assert!((bce_value(&l, &y).unwrap() - LN_2).abs() < 1e-12);
        }
    }

    #[test]
    fn bce_matches_sigmoid_formula() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let (l, y) = random_batch(&mut rng, 4, 6.0);
        let naive: f64 = l
            .data()
            .iter()
            .zip(y.data())
            .map(|(&l, &y)| {
                let s = 1.0 / (1.0 + (-l).exp());
                -(y * s.ln() + (1.0 - y) * (1.0 - s).ln())
            })
            .sum::<f64>()
            / l.numel() as f64;
        assert!((bce_value(&l, &y).unwrap() - naive).abs() < 1e-10);
    }

    #[test]
    fn rejects_bad_temperature() {
        let l = Tensor::zeros(&[1, 2]);
        let y = Tensor::new(vec![1, 2], vec![1.0, 0.0]).unwrap();
        assert!(matches!(
            two_way_loss_value(&l, &y, 0.0),
            Err(Error::Config(_))
        ));
        assert!(LossConfig {
            temperature: -1.0,
            ..Default::default()
        }
        .validate()
        .is_err());
    }

    #[test]
    fn twl_and_bce_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let (l, y) = random_batch(&mut rng, 4, 3.0);
        let opts = GradCheckOptions {
            tol: 1e-6,
            ..Default::default()
        };
        let yy = y.clone();
        let r = grad_check(
            |t, v| two_way_loss(t, v[0], &yy, 4.0),
            &[("logits".into(), l.clone())],
            &opts,
        )
        .unwrap();
        assert!(r.passed(), "{r:?}");
        let r = grad_check(|t, v| bce_loss(t, v[0], &y), &[("logits".into(), l)], &opts).unwrap();
        assert!(r.passed(), "{r:?}");
    }

    #[test]
    fn stable_at_huge_logits() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let (_, y) = random_batch(&mut rng, 4, 1.0);
        let l = Tensor::from_fn(&[4, NUM_CLASSES], |i| if i % 3 == 0 { 1e4 } else { -1e4 });
        let mut tape = Tape::new();
        let v = tape.leaf(l, true);
        let out = two_way_loss(&mut tape, v, &y, 4.0).unwrap();
        assert!(tape.data(out)[0].is_finite());
        tape.backward(out).unwrap();
        assert!(tape.grad(v).unwrap().iter().all(|g| g.is_finite()));
    }

    proptest! {
        #[test]
        fn gradient_signs_follow_labels(seed in 0u64..1000) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let (l, y) = random_batch(&mut rng, 1, 5.0);
            let mut tape = Tape::new();
            let v = tape.leaf(l, true);
            let terms = margin_rows(&mut tape, v, y.data(), 4.0).unwrap();
            let s = tape.sum(terms).unwrap();
            tape.backward(s).unwrap();
            for (g, &t) in tape.grad(v).unwrap().iter().zip(y.data()) {
                if t > 0.0 { prop_assert!(*g <= 0.0); } else { prop_assert!(*g >= 0.0); }
            }
        }

        #[test]
        fn column_permutation_invariance(seed in 0u64..1000) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let (l, y) = random_batch(&mut rng, 3, 5.0);
            let mut perm: Vec<usize> = (0..NUM_CLASSES).collect();
            for i in (1..NUM_CLASSES).rev() {
                perm.swap(i, rng.random_range(0..=i));
            }
            let p = |t: &Tensor| Tensor::from_fn(&[3, NUM_CLASSES], |i| t.data()[(i / NUM_CLASSES) * NUM_CLASSES + perm[i % NUM_CLASSES]]);
            let a = two_way_loss_value(&l, &y, 4.0).unwrap();
            let b = two_way_loss_value(&p(&l), &p(&y), 4.0).unwrap();
            prop_assert!((a - b).abs() <= 1e-12);
        }

        #[test]
        fn positive_whenever_mixed_labels(seed in 0u64..1000) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let (l, y) = random_batch(&mut rng, 2, 30.0);
            prop_assert!(two_way_loss_value(&l, &y, 4.0).unwrap() > 0.0);
        }
    }
}
