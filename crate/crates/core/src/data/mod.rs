//! Samples, metadata encoding, batching, and the synthetic generator.

mod augment;
mod io;
mod split;
mod synth;

pub use augment::{hflip, mixup, shift, vflip, AugmentConfig, Augmenter};
pub use io::{
    attach_images, load_csv, load_derm7pt_csv, placeholder_image, read_dataset_dir, write_csv,
    write_dataset_dir, write_images, Manifest, DATA_FILE, IMAGES_FILE, MANIFEST_FILE,
};
pub use split::{split_by_column, split_indices, Split, SplitSizes};
pub use synth::{generate_dataset, Correlation, CorrelationPlan, GeneratorConfig, MarginalTable};

use crate::error::{Error, Result};
use crate::label_head::{TaskLabels, NUM_CLASSES};
use crate::losses::labels_to_multihot;
use crate::tensor::Tensor;

pub const META_LEN: usize = 20;

/// One categorical covariate of the metadata vector.
#[derive(Clone, Copy, Debug)]
pub struct MetaGroup {
    pub column: &'static str,
    pub values: &'static [&'static str],
    pub offset: usize,
}

/// Covariates in encoding order; lengths sum to 20.
pub const META_GROUPS: [MetaGroup; 5] = [
    MetaGroup {
        column: "sex",
        values: &["female", "male"],
        offset: 0,
    },
    MetaGroup {
        column: "location",
        values: &[
            "abdomen",
            "acral",
            "back",
            "buttocks",
            "chest",
            "genital areas",
            "head neck",
            "lower limbs",
            "upper limbs",
        ],
        offset: 2,
    },
    MetaGroup {
        column: "elevation",
        values: &["flat", "palpable", "nodular"],
        offset: 11,
    },
    MetaGroup {
        column: "difficulty",
        values: &["low", "medium", "high"],
        offset: 14,
    },
    MetaGroup {
        column: "management",
        values: &["clinical follow up", "excision", "no further examination"],
        offset: 17,
    },
];

impl MetaGroup {
    /// Case-insensitive; underscores, hyphens and repeated spaces are folded.
    pub fn value_index(&self, raw: &str) -> Option<usize> {
        let norm = normalize(raw);
        self.values.iter().position(|v| *v == norm)
    }
}

fn normalize(raw: &str) -> String {
    raw.trim()
        .to_ascii_lowercase()
        .replace(['_', '-', '/'], " ")
        .split_whitespace()
        .collect::<Vec<_>>()
        .join(" ")
}

/// Category index per covariate group.
pub type MetaValues = [usize; 5];

pub fn encode_meta(values: &MetaValues) -> Result<Vec<f64>> {
    let mut v = vec![0.0; META_LEN];
    for (g, &i) in META_GROUPS.iter().zip(values) {
        if i >= g.values.len() {
            return Err(Error::Data(format!("{} index {i} out of range", g.column)));
        }
        v[g.offset + i] = 1.0;
    }
    Ok(v)
}

/// Inverse of [`encode_meta`] for unblended vectors (argmax per group).
pub fn decode_meta(meta: &[f64]) -> Result<MetaValues> {
    if meta.len() != META_LEN {
        return Err(Error::Data(format!(
            "metadata vector of length {}",
            meta.len()
        )));
    }
    let mut out = [0; 5];
    for (slot, g) in out.iter_mut().zip(&META_GROUPS) {
        let block = &meta[g.offset..g.offset + g.values.len()];
        let mut best = 0;
        for (i, &x) in block.iter().enumerate() {
            if x > block[best] {
                best = i;
            }
        }
        *slot = best;
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub case_id: String,
    /// `[size, size, 3]` row-major, values in `[0, 1]`.
    pub cli: Vec<f64>,
    pub der: Vec<f64>,
    pub meta: Vec<f64>,
    pub labels: TaskLabels,
    pub split: Option<Split>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub image_size: usize,
    pub samples: Vec<Sample>,
}

/// A stacked mini-batch; `targets` may be blended by mixup.
#[derive(Clone, Debug)]
pub struct Batch {
    pub cli: Tensor,
    pub der: Tensor,
    pub meta: Tensor,
    pub targets: Tensor,
    pub labels: Vec<TaskLabels>,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn subset(&self, indices: &[usize]) -> Dataset {
        Dataset {
            image_size: self.image_size,
            samples: indices.iter().map(|&i| self.samples[i].clone()).collect(),
        }
    }

    pub fn labels(&self) -> Vec<TaskLabels> {
        self.samples.iter().map(|s| s.labels).collect()
    }

    /// Stacks the given samples, unmodified.
    pub fn batch(&self, indices: &[usize]) -> Result<Batch> {
        let refs: Vec<&Sample> = indices
            .iter()
            .map(|&i| {
                self.samples
                    .get(i)
                    .ok_or_else(|| Error::Data(format!("sample index {i} out of range")))
            })
            .collect::<Result<_>>()?;
        let owned: Vec<Sample> = refs.into_iter().cloned().collect();
        stack(&owned, self.image_size, None)
    }
}

/// Stacks samples into a batch. `targets` overrides the one-hot targets
/// (used after mixup).
pub fn stack(
    samples: &[Sample],
    image_size: usize,
    targets: Option<Vec<Vec<f64>>>,
) -> Result<Batch> {
    if samples.is_empty() {
        return Err(Error::Data("empty batch".into()));
    }
    let b = samples.len();
    let px = image_size * image_size * 3;
    let mut cli = Vec::with_capacity(b * px);
    let mut der = Vec::with_capacity(b * px);
    let mut meta = Vec::with_capacity(b * META_LEN);
    for s in samples {
        if s.cli.len() != px || s.der.len() != px || s.meta.len() != META_LEN {
            return Err(Error::Data(format!(
                "sample {} has malformed tensors",
                s.case_id
            )));
        }
        cli.extend_from_slice(&s.cli);
        der.extend_from_slice(&s.der);
        meta.extend_from_slice(&s.meta);
    }
    let targets = match targets {
        Some(t) => t,
        None => samples
            .iter()
            .map(|s| labels_to_multihot(&s.labels))
            .collect::<Result<_>>()?,
    };
    let flat: Vec<f64> = targets.into_iter().flatten().collect();
    let shape = [b, image_size, image_size, 3];
    Ok(Batch {
        cli: Tensor::new(shape.to_vec(), cli)?,
        der: Tensor::new(shape.to_vec(), der)?,
        meta: Tensor::new(vec![b, META_LEN], meta)?,
        targets: Tensor::new(vec![b, NUM_CLASSES], flat)?,
        labels: samples.iter().map(|s| s.labels).collect(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn meta_groups_cover_twenty_slots() {
        let total: usize = META_GROUPS.iter().map(|g| g.values.len()).sum();
        assert_eq!(total, META_LEN);
        let mut next = 0;
        for g in META_GROUPS {
            assert_eq!(g.offset, next);
            next += g.values.len();
        }
    }

    #[test]
    fn meta_round_trip() {
        let v = [1, 8, 2, 0, 1];
        let enc = encode_meta(&v).unwrap();
        assert_eq!(enc.iter().sum::<f64>(), 5.0);
        assert_eq!(decode_meta(&enc).unwrap(), v);
        assert!(encode_meta(&[2, 0, 0, 0, 0]).is_err());
    }

    #[test]
    fn meta_value_spellings() {
        let loc = &META_GROUPS[1];
        assert_eq!(loc.value_index("Head Neck"), Some(6));
        assert_eq!(loc.value_index("upper_limbs"), Some(8));
        assert_eq!(META_GROUPS[4].value_index("clinical  follow-up"), Some(0));
        assert_eq!(loc.value_index("elbow"), None);
    }
}
