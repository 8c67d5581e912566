//! The eight-task label space and the classification head over it.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{Ctx, Linear, MultiHeadAttention, ParamStore};
use crate::tensor::Var;

/// Total number of classes across all tasks.
pub const NUM_CLASSES: usize = 24;
pub const NUM_TASKS: usize = 8;

/// One classification task of the label space.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Task {
    pub name: &'static str,
    pub classes: &'static [&'static str],
    pub offset: usize,
}

impl Task {
    pub fn cardinality(&self) -> usize {
        self.classes.len()
    }

    pub fn class_index(&self, label: &str) -> Option<usize> {
        let label = label.trim();
        self.classes
            .iter()
            .position(|c| c.eq_ignore_ascii_case(label))
            // "IRG" is used interchangeably with "IR" for irregular
            .or_else(|| {
                label
                    .eq_ignore_ascii_case("IRG")
                    .then(|| self.classes.iter().position(|c| *c == "IR"))
                    .flatten()
            })
    }
}

const DIAG: &[&str] = &["BCC", "NEV", "MEL", "MISC", "SK"];
const ABS_TYP_ATP: &[&str] = &["ABS", "TYP", "ATP"];
const ABS_PRS: &[&str] = &["ABS", "PRS"];
const ABS_REG_IR: &[&str] = &["ABS", "REG", "IR"];

/// Task order of the flat 24-class space: DIAG, PN, BWV, VS, PIG, STR, DaG, RS.
pub const TASKS: [Task; NUM_TASKS] = [
    Task {
        name: "DIAG",
        classes: DIAG,
        offset: 0,
    },
    Task {
        name: "PN",
        classes: ABS_TYP_ATP,
        offset: 5,
    },
    Task {
        name: "BWV",
        classes: ABS_PRS,
        offset: 8,
    },
    Task {
        name: "VS",
        classes: ABS_REG_IR,
        offset: 10,
    },
    Task {
        name: "PIG",
        classes: ABS_REG_IR,
        offset: 13,
    },
    Task {
        name: "STR",
        classes: ABS_REG_IR,
        offset: 16,
    },
    Task {
        name: "DaG",
        classes: ABS_REG_IR,
        offset: 19,
    },
    Task {
        name: "RS",
        classes: ABS_PRS,
        offset: 22,
    },
];

pub fn task_index(name: &str) -> Option<usize> {
    TASKS.iter().position(|t| t.name.eq_ignore_ascii_case(name))
}

/// Per-task class indices of one sample.
pub type TaskLabels = [usize; NUM_TASKS];

/// Flat offset of a (task, class) pair.
pub fn flat_index(task: usize, class: usize) -> usize {
    TASKS[task].offset + class
}

/// Splits a flat 24-vector into per-task slices.
pub fn unflatten(flat: &[f64]) -> Result<Vec<&[f64]>> {
    if flat.len() != NUM_CLASSES {
        return Err(Error::Data(format!(
            "expected {NUM_CLASSES} logits, got {}",
            flat.len()
        )));
    }
    Ok(TASKS
        .iter()
        .map(|t| &flat[t.offset..t.offset + t.cardinality()])
        .collect())
}

/// Softmax probabilities and argmax class for each task.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub classes: Vec<usize>,
    pub probabilities: Vec<Vec<f64>>,
}

/// Per-task softmax and argmax; ties resolve to the lowest class index.
pub fn predict(logits: &[f64]) -> Result<Prediction> {
    if logits.iter().any(|v| !v.is_finite()) {
        return Err(Error::NumericOverflow { op: "predict" });
    }
    let mut classes = Vec::with_capacity(NUM_TASKS);
    let mut probabilities = Vec::with_capacity(NUM_TASKS);
    for l in unflatten(logits)? {
        let m = l.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let e: Vec<f64> = l.iter().map(|v| (v - m).exp()).collect();
        let z: f64 = e.iter().sum();
        let p: Vec<f64> = e.iter().map(|v| v / z).collect();
        let mut best = 0;
        for (i, &v) in p.iter().enumerate() {
            if v > p[best] {
                best = i;
            }
        }
        classes.push(best);
        probabilities.push(p);
    }
    Ok(Prediction {
        classes,
        probabilities,
    })
}

impl Prediction {
    /// One JSON-lines record keyed by task name.
    pub fn to_json_record(&self, case_id: &str) -> serde_json::Value {
        let mut tasks = serde_json::Map::new();
        for (t, task) in TASKS.iter().enumerate() {
            tasks.insert(
                task.name.to_string(),
                serde_json::json!({
                    "class": task.classes[self.classes[t]],
                    "index": self.classes[t],
                    "probabilities": self.probabilities[t],
                }),
            );
        }
        serde_json::json!({ "case_id": case_id, "tasks": tasks })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HeadConfig {
    /// Label-correlation attention over the stacked task features.
    pub mha: bool,
    pub heads: usize,
    pub dim: usize,
}

impl Default for HeadConfig {
    fn default() -> Self {
        Self {
            mha: true,
            heads: 4,
            dim: 128,
        }
    }
}

/// Eight task projections, optional attention across them, eight classifiers.
#[derive(Clone, Debug)]
pub struct LabelHead {
    pub projections: Vec<Linear>,
    pub mha: Option<MultiHeadAttention>,
    pub classifiers: Vec<Linear>,
    pub dim: usize,
}

impl LabelHead {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut impl Rng,
        in_dim: usize,
        cfg: &HeadConfig,
    ) -> Result<Self> {
        let projections = TASKS
            .iter()
            .map(|t| {
                Linear::new(
                    store,
                    rng,
                    &format!("head.proj.{}", t.name),
                    in_dim,
                    cfg.dim,
                    true,
                )
            })
            .collect::<Result<Vec<_>>>()?;
        let mha = if cfg.mha {
            Some(MultiHeadAttention::new(
                store, rng, "head.mha", cfg.dim, cfg.heads,
            )?)
        } else {
            None
        };
        let classifiers = TASKS
            .iter()
            .map(|t| {
                Linear::new(
                    store,
                    rng,
                    &format!("head.cls.{}", t.name),
                    cfg.dim,
                    t.cardinality(),
                    true,
                )
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            projections,
            mha,
            classifiers,
            dim: cfg.dim,
        })
    }

    /// `f_final: [batch, in]` -> stacked task features `[batch, 8, dim]`.
    pub fn task_projections(&self, ctx: &mut Ctx, f_final: Var) -> Result<Var> {
        let b = ctx.tape.shape(f_final)[0];
        let mut parts = Vec::with_capacity(NUM_TASKS);
        for p in &self.projections {
            let y = p.forward(ctx, f_final)?;
            parts.push(ctx.tape.reshape(y, &[b, 1, self.dim])?);
        }
        ctx.tape.concat(&parts, 1)
    }

    /// Self-attention over the eight task tokens plus a residual.
    pub fn label_correlation(&self, ctx: &mut Ctx, stacked: Var) -> Result<Var> {
        match &self.mha {
            Some(mha) => {
                let a = mha.forward(ctx, stacked, stacked)?;
                ctx.tape.add(stacked, a)
            }
            None => Ok(stacked),
        }
    }

    /// `[batch, 8, dim]` -> flat logits `[batch, 24]`.
    pub fn task_classifiers(&self, ctx: &mut Ctx, features: Var) -> Result<Var> {
        let b = ctx.tape.shape(features)[0];
        let mut parts = Vec::with_capacity(NUM_TASKS);
        for (t, cls) in self.classifiers.iter().enumerate() {
            let f = ctx.tape.slice(features, 1, t, 1)?;
            let f = ctx.tape.reshape(f, &[b, self.dim])?;
            parts.push(cls.forward(ctx, f)?);
        }
        ctx.tape.concat(&parts, 1)
    }

    pub fn forward(&self, ctx: &mut Ctx, f_final: Var) -> Result<Var> {
        let stacked = self.task_projections(ctx, f_final)?;
        let mixed = self.label_correlation(ctx, stacked)?;
        self.task_classifiers(ctx, mixed)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{grad_check, GradCheckOptions, Tape, Tensor};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random(shape: &[usize], seed: u64) -> Tensor {
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_fn(shape, |_| r.random_range(-1.0..1.0))
    }

    fn head(mha: bool, in_dim: usize) -> (LabelHead, ParamStore) {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let cfg = HeadConfig {
            mha,
            ..Default::default()
        };
        let h = LabelHead::new(&mut store, &mut rng, in_dim, &cfg).unwrap();
        (h, store)
    }

    #[test]
    fn task_spec_offsets_are_prefix_sums() {
        let total: usize = TASKS.iter().map(Task::cardinality).sum();
        assert_eq!(total, NUM_CLASSES);
        let mut acc = 0;
        for t in &TASKS {
            assert_eq!(t.offset, acc);
            acc += t.cardinality();
        }
        let cards: Vec<usize> = TASKS.iter().map(Task::cardinality).collect();
        assert_eq!(cards, vec![5, 3, 2, 3, 3, 3, 3, 2]);
    }

    #[test]
    fn class_lookup_accepts_irg_alias() {
        let dag = &TASKS[task_index("DaG").unwrap()];
        assert_eq!(dag.class_index("IRG"), Some(2));
        assert_eq!(dag.class_index("ir"), Some(2));
        assert_eq!(TASKS[0].class_index("NEV"), Some(1));
        assert_eq!(TASKS[0].class_index("XYZ"), None);
    }

    #[test]
    fn predict_examples() {
        let mut l = vec![0.0; NUM_CLASSES];
        l[0] = 9.0;
        let p = predict(&l).unwrap();
        assert_eq!(p.classes[0], 0);
        assert_eq!(TASKS[0].classes[p.classes[0]], "BCC");
        // all-zero tasks tie-break to class 0
        assert!(p.classes[1..].iter().all(|&c| c == 0));
        for probs in &p.probabilities {
            assert!((probs.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
        l[3] = f64::NAN;
        assert!(predict(&l).is_err());
    }

    #[test]
    fn predict_matches_logit_argmax() {
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        for _ in 0..1000 {
            let l: Vec<f64> = (0..NUM_CLASSES)
                .map(|_| rng.random_range(-5.0..5.0))
                .collect();
            let p = predict(&l).unwrap();
            for (t, part) in unflatten(&l).unwrap().iter().enumerate() {
                let arg = part
                    .iter()
                    .enumerate()
                    .fold(0, |b, (i, &v)| if v > part[b] { i } else { b });
                assert_eq!(p.classes[t], arg);
            }
        }
    }

    #[test]
    fn projections_and_classifiers_of_zero_are_biases() {
        let (h, store) = head(false, 16);
        let mut tape = Tape::inference();
        let mut ctx = Ctx::new(&mut tape, &store);
        let x = ctx.tape.constant(Tensor::zeros(&[1, 16]));
        let stacked = h.task_projections(&mut ctx, x).unwrap();
        assert_eq!(ctx.tape.shape(stacked), &[1, 8, 128]);
        for (t, task) in TASKS.iter().enumerate() {
            let want = store
                .get(&format!("head.proj.{}.bias", task.name))
                .unwrap()
                .data();
            assert_eq!(&ctx.tape.data(stacked)[t * 128..(t + 1) * 128], want);
        }
        let z = ctx.tape.constant(Tensor::zeros(&[1, 8, 128]));
        let logits = h.task_classifiers(&mut ctx, z).unwrap();
        assert_eq!(ctx.tape.shape(logits), &[1, NUM_CLASSES]);
        let diag_bias = store.get("head.cls.DIAG.bias").unwrap().data();
        assert_eq!(&ctx.tape.data(logits)[0..5], diag_bias);
        let rs_bias = store.get("head.cls.RS.bias").unwrap().data();
        assert_eq!(&ctx.tape.data(logits)[22..24], rs_bias);
    }

    #[test]
    fn mha_equal_tokens_give_equal_outputs() {
        let (h, store) = head(true, 16);
        let mut tape = Tape::inference();
        let mut ctx = Ctx::new(&mut tape, &store);
        let token = random(&[128], 1).into_data();
        let x = ctx
            .tape
            .constant(Tensor::from_fn(&[1, 8, 128], |i| token[i % 128]));
        let y = h.label_correlation(&mut ctx, x).unwrap();
        let d = tape.data(y);
        for row in d.chunks(128) {
            for (a, b) in row.iter().zip(&d[..128]) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn mha_is_permutation_equivariant() {
        let (h, store) = head(true, 16);
        let x = random(&[1, 8, 128], 2);
        let perm = [3usize, 0, 7, 1, 6, 2, 5, 4];
        let permuted = Tensor::from_fn(&[1, 8, 128], |i| x.data()[perm[i / 128] * 128 + i % 128]);
        let mut tape = Tape::inference();
        let mut ctx = Ctx::new(&mut tape, &store);
        let a = ctx.tape.constant(x);
        let b = ctx.tape.constant(permuted);
        let ya = h.label_correlation(&mut ctx, a).unwrap();
        let yb = h.label_correlation(&mut ctx, b).unwrap();
        let (da, db) = (tape.data(ya), tape.data(yb));
        for (i, &p) in perm.iter().enumerate() {
            for c in 0..128 {
                assert!((db[i * 128 + c] - da[p * 128 + c]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn head_gradients() {
        let (h, store) = head(true, 16);
        let x = random(&[2, 8, 128], 3);
        let probe = random(&[2, 8, 128], 4);
        let report = grad_check(
            |tape, v| {
                let mut ctx = Ctx::new(tape, &store);
                let y = h.label_correlation(&mut ctx, v[0])?;
                let p = ctx.tape.constant(probe.clone());
                let y = ctx.tape.mul(y, p)?;
                ctx.tape.sum(y)
            },
            &[("stacked".into(), x)],
            &GradCheckOptions::default(),
        )
        .unwrap();
        assert!(report.passed(), "{report:?}");

        let f = random(&[2, 16], 5);
        let probe = random(&[2, 8, 128], 6);
        let report = grad_check(
            |tape, v| {
                let mut ctx = Ctx::new(tape, &store);
                let y = h.task_projections(&mut ctx, v[0])?;
                let p = ctx.tape.constant(probe.clone());
                let y = ctx.tape.mul(y, p)?;
                ctx.tape.sum(y)
            },
            &[("f_final".into(), f)],
            &GradCheckOptions {
                tol: 1e-5,
                ..Default::default()
            },
        )
        .unwrap();
        assert!(report.passed(), "{report:?}");
    }
}
