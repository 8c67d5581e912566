//! Synthetic multi-modal samples with Derm7pt-like label marginals.
//!
//! Every class of every task owns a smooth colour pattern. Attribute
//! patterns are strongest in the dermoscopic image and weaker in the
//! clinical one. The diagnosis pattern is split: part of it appears in both
//! images, the rest only in the clinical image, which also carries a
//! per-sample nuisance field that the dermoscopic image carries with the
//! opposite sign. Summing the two streams cancels the nuisance, so the
//! cross part is best read by fusing them. Metadata groups lean towards a
//! diagnosis-dependent preferred value.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::{encode_meta, Dataset, Sample, SplitSizes, META_GROUPS};
use crate::error::{Error, Result};
use crate::label_head::{task_index, TaskLabels, NUM_TASKS, TASKS};

/// Per-task class counts of the reference training split.
#[derive(Clone, Debug, PartialEq)]
pub struct MarginalTable {
    counts: Vec<Vec<f64>>,
}

impl MarginalTable {
    /// Training-split counts in task order DIAG, PN, BWV, VS, PIG, STR, DaG, RS.
    /// The PIG irregular count is 116 (its published row total minus the
    /// validation and test counts) so that every task sums to 413.
    pub fn derm7pt_train() -> Self {
        let counts = vec![
            vec![19.0, 256.0, 90.0, 32.0, 16.0],
            vec![160.0, 160.0, 93.0],
            vec![339.0, 74.0],
            vec![347.0, 43.0, 23.0],
            vec![253.0, 44.0, 116.0],
            vec![273.0, 39.0, 101.0],
            vec![84.0, 156.0, 173.0],
            vec![317.0, 96.0],
        ];
        Self { counts }
    }

    pub fn from_counts(counts: Vec<Vec<f64>>) -> Result<Self> {
        if counts.len() != NUM_TASKS {
            return Err(Error::Config(format!(
                "marginals need {NUM_TASKS} tasks, got {}",
                counts.len()
            )));
        }
        for (t, (row, task)) in counts.iter().zip(TASKS.iter()).enumerate() {
            if row.len() != task.cardinality() {
                return Err(Error::Config(format!(
                    "task {} needs {} counts, got {}",
                    TASKS[t].name,
                    task.cardinality(),
                    row.len()
                )));
            }
            if row.iter().any(|&c| !(c >= 0.0 && c.is_finite())) || row.iter().sum::<f64>() <= 0.0 {
                return Err(Error::Config(format!(
                    "invalid counts for task {}: {row:?}",
                    task.name
                )));
            }
        }
        Ok(Self { counts })
    }

    pub fn counts(&self, task: usize) -> &[f64] {
        &self.counts[task]
    }

    pub fn probabilities(&self, task: usize) -> Vec<f64> {
        let row = &self.counts[task];
        let total: f64 = row.iter().sum();
        row.iter().map(|c| c / total).collect()
    }
}

impl Default for MarginalTable {
    fn default() -> Self {
        Self::derm7pt_train()
    }
}

/// `P(task_b = class_b | task_a = class_a)` is raised to `strength + (1 - strength) p_b`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Correlation {
    pub task_a: String,
    pub class_a: String,
    pub task_b: String,
    pub class_b: String,
    pub strength: f64,
}

#[derive(Clone, Copy, Debug, PartialEq)]
struct ResolvedCorrelation {
    a: (usize, usize),
    b: (usize, usize),
    strength: f64,
}

/// Ordered pair-copulas applied after the independent label draws.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct CorrelationPlan {
    pairs: Vec<ResolvedCorrelation>,
}

fn resolve(task: &str, class: &str) -> Result<(usize, usize)> {
    let t = task_index(task).ok_or_else(|| Error::Config(format!("unknown task {task}")))?;
    let c = TASKS[t]
        .class_index(class)
        .ok_or_else(|| Error::Config(format!("unknown class {class} for task {task}")))?;
    Ok((t, c))
}

impl CorrelationPlan {
    pub fn new(pairs: &[Correlation]) -> Result<Self> {
        let pairs = pairs
            .iter()
            .map(|p| {
                if !(0.0..=1.0).contains(&p.strength) {
                    return Err(Error::Config(format!(
                        "correlation strength {} outside [0, 1]",
                        p.strength
                    )));
                }
                let a = resolve(&p.task_a, &p.class_a)?;
                let b = resolve(&p.task_b, &p.class_b)?;
                if a.0 == b.0 {
                    return Err(Error::Config(format!(
                        "correlation within task {}",
                        p.task_a
                    )));
                }
                Ok(ResolvedCorrelation {
                    a,
                    b,
                    strength: p.strength,
                })
            })
            .collect::<Result<_>>()?;
        Ok(Self { pairs })
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    fn apply(&self, labels: &mut TaskLabels, rng: &mut impl Rng) {
        for p in &self.pairs {
            let u: f64 = rng.random();
            if labels[p.a.0] == p.a.1 && u < p.strength {
                labels[p.b.0] = p.b.1;
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GeneratorConfig {
    pub sizes: SplitSizes,
    /// Amplitude of attribute patterns in the dermoscopic image.
    pub signal: f64,
    /// Attribute amplitude in the clinical image relative to `signal`.
    pub cli_signal_ratio: f64,
    pub diag_signal: f64,
    /// Share of the diagnosis pattern carried only by the clinical image.
    pub cross_fraction: f64,
    /// Amplitude of the nuisance field shared with opposite signs.
    pub cross_noise: f64,
    /// Per-pixel Gaussian noise.
    pub noise: f64,
    /// Probability that a metadata group takes its diagnosis-preferred value.
    pub meta_signal: f64,
    pub correlations: Vec<Correlation>,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        Self {
            sizes: SplitSizes::default(),
            signal: 0.12,
            cli_signal_ratio: 0.5,
            diag_signal: 0.12,
            cross_fraction: 0.5,
            cross_noise: 0.15,
            noise: 0.05,
            meta_signal: 0.3,
            correlations: Vec::new(),
        }
    }
}

impl GeneratorConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("signal", self.signal),
            ("cli_signal_ratio", self.cli_signal_ratio),
            ("diag_signal", self.diag_signal),
            ("cross_noise", self.cross_noise),
            ("noise", self.noise),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::Config(format!(
                    "{name} must be a non-negative number, got {v}"
                )));
            }
        }
        for (name, v) in [
            ("cross_fraction", self.cross_fraction),
            ("meta_signal", self.meta_signal),
        ] {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::Config(format!("{name} must lie in [0, 1], got {v}")));
            }
        }
        CorrelationPlan::new(&self.correlations)?;
        Ok(())
    }
}

const MAX_FREQ: usize = 3;

/// Smooth field `sum a * cos(2 pi kx u) cos(2 pi ky v)` over low frequencies,
/// scaled to unit RMS. Coordinates are centred, so the field is unchanged by
/// horizontal and vertical flips.
fn smooth_field(rng: &mut impl Rng, size: usize) -> Vec<f64> {
    let coef: Vec<f64> = (0..MAX_FREQ * MAX_FREQ * 3)
        .map(|_| StandardNormal.sample(rng))
        .collect();
    let coord: Vec<f64> = (0..size)
        .map(|i| (i as f64 + 0.5) / size as f64 - 0.5)
        .collect();
    let basis: Vec<Vec<f64>> = (0..MAX_FREQ)
        .map(|k| {
            coord
                .iter()
                .map(|u| (2.0 * std::f64::consts::PI * k as f64 * u).cos())
                .collect()
        })
        .collect();
    let mut out = vec![0.0; size * size * 3];
    for y in 0..size {
        for x in 0..size {
            for ch in 0..3 {
                let mut v = 0.0;
                for ky in 0..MAX_FREQ {
                    for kx in 0..MAX_FREQ {
                        v += coef[(ky * MAX_FREQ + kx) * 3 + ch] * basis[ky][y] * basis[kx][x];
                    }
                }
                out[(y * size + x) * 3 + ch] = v;
            }
        }
    }
    let rms = (out.iter().map(|v| v * v).sum::<f64>() / out.len() as f64).sqrt();
    if rms > 0.0 {
        out.iter_mut().for_each(|v| *v /= rms);
    }
    out
}

fn sample_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

fn categorical(u: f64, probs: &[f64]) -> usize {
    let mut acc = 0.0;
    for (i, p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return i;
        }
    }
    probs.len() - 1
}

/// Preferred value of metadata group `g` for diagnosis class `c`.
fn preferred(g: usize, c: usize) -> usize {
    (c * 2 + g) % META_GROUPS[g].values.len()
}

/// Generates `n` samples. Class patterns and label strata come from stream
/// 0 of `seed`; everything else about sample `i` comes from stream `i + 1`.
pub fn generate_dataset(
    n: usize,
    marginals: &MarginalTable,
    plan: &CorrelationPlan,
    image_size: usize,
    cfg: &GeneratorConfig,
    seed: u64,
) -> Result<Dataset> {
    if n == 0 {
        return Err(Error::Data("cannot generate an empty dataset".into()));
    }
    if image_size == 0 {
        return Err(Error::Config("image size must be positive".into()));
    }
    cfg.validate()?;
    let mut prng = sample_rng(seed, 0);
    let patterns: Vec<Vec<Vec<f64>>> = TASKS
        .iter()
        .map(|t| {
            (0..t.cardinality())
                .map(|_| smooth_field(&mut prng, image_size))
                .collect()
        })
        .collect();
    let probs: Vec<Vec<f64>> = (0..NUM_TASKS).map(|t| marginals.probabilities(t)).collect();
    // Latin hypercube over tasks: each task's uniforms occupy every stratum
    // [k/n, (k+1)/n) exactly once, in an independent random order.
    let strata: Vec<Vec<usize>> = (0..NUM_TASKS)
        .map(|_| {
            let mut p: Vec<usize> = (0..n).collect();
            p.shuffle(&mut prng);
            p
        })
        .collect();
    let px = image_size * image_size * 3;
    let samples = (0..n)
        .map(|i| {
            let mut rng = sample_rng(seed, i as u64 + 1);
            let mut labels = [0; NUM_TASKS];
            for (t, p) in probs.iter().enumerate() {
                let u = (strata[t][i] as f64 + rng.random::<f64>()) / n as f64;
                labels[t] = categorical(u, p);
            }
            plan.apply(&mut labels, &mut rng);

            let mut cli = vec![0.5; px];
            let mut der = vec![0.5; px];
            let diag = &patterns[0][labels[0]];
            let shared = (1.0 - cfg.cross_fraction) * cfg.diag_signal;
            let only_cli = cfg.cross_fraction * cfg.diag_signal;
            let nuisance = smooth_field(&mut rng, image_size);
            for k in 0..px {
                cli[k] += (shared + only_cli) * diag[k] + cfg.cross_noise * nuisance[k];
                der[k] += shared * diag[k] - cfg.cross_noise * nuisance[k];
            }
            for t in 1..NUM_TASKS {
                let p = &patterns[t][labels[t]];
                for k in 0..px {
                    der[k] += cfg.signal * p[k];
                    cli[k] += cfg.signal * cfg.cli_signal_ratio * p[k];
                }
            }
            for img in [&mut cli, &mut der] {
                for v in img.iter_mut() {
                    let e: f64 = StandardNormal.sample(&mut rng);
                    // f32-representable so stored images reload bit-exactly
                    *v = (*v + cfg.noise * e).clamp(0.0, 1.0) as f32 as f64;
                }
            }

            let mut values = [0; 5];
            for (g, slot) in values.iter_mut().enumerate() {
                let u: f64 = rng.random();
                let k = META_GROUPS[g].values.len();
                let other = rng.random_range(0..k);
                *slot = if u < cfg.meta_signal {
                    preferred(g, labels[0])
                } else {
                    other
                };
            }
            Ok(Sample {
                case_id: format!("syn{i:05}"),
                cli,
                der,
                meta: encode_meta(&values)?,
                labels,
                split: None,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Dataset {
        image_size,
        samples,
    })
}
