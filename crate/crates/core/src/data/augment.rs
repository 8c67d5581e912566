use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Beta, Distribution};
use serde::{Deserialize, Serialize};

use super::{stack, Batch, Sample};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Mirrors a `[size, size, 3]` image left to right.
pub fn hflip(img: &[f64], size: usize) -> Vec<f64> {
    let mut out = vec![0.0; img.len()];
    for y in 0..size {
        for x in 0..size {
            let src = (y * size + x) * 3;
            let dst = (y * size + size - 1 - x) * 3;
            out[dst..dst + 3].copy_from_slice(&img[src..src + 3]);
        }
    }
    out
}

/// Mirrors a `[size, size, 3]` image top to bottom.
pub fn vflip(img: &[f64], size: usize) -> Vec<f64> {
    let row = size * 3;
    let mut out = Vec::with_capacity(img.len());
    for y in (0..size).rev() {
        out.extend_from_slice(&img[y * row..(y + 1) * row]);
    }
    out
}

/// Translates by `(dx, dy)` pixels, repeating edge pixels.
pub fn shift(img: &[f64], size: usize, dx: isize, dy: isize) -> Vec<f64> {
    let last = size as isize - 1;
    let mut out = vec![0.0; img.len()];
    for y in 0..size {
        let sy = (y as isize - dy).clamp(0, last) as usize;
        for x in 0..size {
            let sx = (x as isize - dx).clamp(0, last) as usize;
            let dst = (y * size + x) * 3;
            let src = (sy * size + sx) * 3;
            out[dst..dst + 3].copy_from_slice(&img[src..src + 3]);
        }
    }
    out
}

fn blend(a: &Tensor, b_rows: &[usize], lambda: f64) -> Result<Tensor> {
    let n = a.shape()[0];
    let row = a.numel() / n.max(1);
    let d = a.data();
    let mut out = Vec::with_capacity(d.len());
    for (i, &j) in b_rows.iter().enumerate() {
        let (ra, rb) = (&d[i * row..(i + 1) * row], &d[j * row..(j + 1) * row]);
        out.extend(
            ra.iter()
                .zip(rb)
                .map(|(x, y)| lambda * x + (1.0 - lambda) * y),
        );
    }
    Tensor::new(a.shape().to_vec(), out)
}

/// Blends row `i` with row `partner[i]` in images, metadata and targets.
/// Hard labels stay those of row `i`.
pub fn mixup(batch: &Batch, partner: &[usize], lambda: f64) -> Result<Batch> {
    if partner.len() != batch.len() || partner.iter().any(|&j| j >= batch.len()) {
        return Err(Error::Data(
            "mixup partner list does not match the batch".into(),
        ));
    }
    if !(0.0..=1.0).contains(&lambda) {
        return Err(Error::Config(format!(
            "mixup weight {lambda} outside [0, 1]"
        )));
    }
    Ok(Batch {
        cli: blend(&batch.cli, partner, lambda)?,
        der: blend(&batch.der, partner, lambda)?,
        meta: blend(&batch.meta, partner, lambda)?,
        targets: blend(&batch.targets, partner, lambda)?,
        labels: batch.labels.clone(),
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AugmentConfig {
    pub hflip: bool,
    pub vflip: bool,
    /// Maximum translation in pixels; 0 disables shifting.
    pub max_shift: usize,
    /// Beta concentration for mixup; 0 disables it.
    pub mixup_alpha: f64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            hflip: true,
            vflip: true,
            max_shift: 2,
            mixup_alpha: 0.0,
        }
    }
}

impl AugmentConfig {
    pub fn none() -> Self {
        Self {
            hflip: false,
            vflip: false,
            max_shift: 0,
            mixup_alpha: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.mixup_alpha >= 0.0 && self.mixup_alpha.is_finite()) {
            return Err(Error::Config(format!(
                "mixup_alpha must be non-negative, got {}",
                self.mixup_alpha
            )));
        }
        Ok(())
    }
}

/// Seeded training-time augmentation. Both images of a sample receive the
/// same geometric transform.
pub struct Augmenter {
    cfg: AugmentConfig,
    rng: ChaCha8Rng,
}

impl Augmenter {
    pub fn new(cfg: AugmentConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        Ok(Self {
            cfg,
            rng: ChaCha8Rng::seed_from_u64(seed),
        })
    }

    fn geometric(&mut self, s: &Sample, size: usize) -> Sample {
        let mut out = s.clone();
        if self.cfg.hflip && self.rng.random_bool(0.5) {
            out.cli = hflip(&out.cli, size);
            out.der = hflip(&out.der, size);
        }
        if self.cfg.vflip && self.rng.random_bool(0.5) {
            out.cli = vflip(&out.cli, size);
            out.der = vflip(&out.der, size);
        }
        if self.cfg.max_shift > 0 {
            let m = self.cfg.max_shift as i64;
            let dx = self.rng.random_range(-m..=m) as isize;
            let dy = self.rng.random_range(-m..=m) as isize;
            out.cli = shift(&out.cli, size, dx, dy);
            out.der = shift(&out.der, size, dx, dy);
        }
        out
    }

    pub fn batch(&mut self, samples: &[&Sample], size: usize) -> Result<Batch> {
        let aug: Vec<Sample> = samples.iter().map(|s| self.geometric(s, size)).collect();
        let batch = stack(&aug, size, None)?;
        if self.cfg.mixup_alpha > 0.0 && batch.len() > 1 {
            let beta = Beta::new(self.cfg.mixup_alpha, self.cfg.mixup_alpha)
                .map_err(|e| Error::Config(format!("mixup: {e}")))?;
            let lambda = beta.sample(&mut self.rng);
            let mut partner: Vec<usize> = (0..batch.len()).collect();
            partner.shuffle(&mut self.rng);
            return mixup(&batch, &partner, lambda);
        }
        Ok(batch)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::encode_meta;
    use proptest::prelude::*;

    fn image(size: usize) -> Vec<f64> {
        (0..size * size * 3).map(|i| i as f64).collect()
    }

    fn sample(id: &str, fill: f64, labels: [usize; 8]) -> Sample {
        Sample {
            case_id: id.into(),
            cli: vec![fill; 48],
            der: vec![fill * 2.0; 48],
            meta: encode_meta(&[0, 0, 0, 0, 0]).unwrap(),
            labels,
            split: None,
        }
    }

    #[test]
    fn flips_move_pixels() {
        let img = image(2);
        // pixel (0,0) becomes pixel (0,1) and (1,0) respectively
        assert_eq!(&hflip(&img, 2)[3..6], &img[0..3]);
        assert_eq!(&vflip(&img, 2)[6..9], &img[0..3]);
    }

    #[test]
    fn shift_clamps_edges() {
        let img = image(3);
        let s = shift(&img, 3, 1, 0);
        assert_eq!(&s[0..3], &img[0..3]);
        assert_eq!(&s[3..6], &img[0..3]);
        assert_eq!(&s[6..9], &img[3..6]);
        assert_eq!(shift(&img, 3, 0, 0), img);
    }

    #[test]
    fn mixup_blends_targets() {
        let a = sample("a", 0.0, [0; 8]);
        let b = sample("b", 1.0, [1, 1, 1, 1, 1, 1, 1, 1]);
        let batch = stack(&[a, b], 4, None).unwrap();
        let m = mixup(&batch, &[1, 0], 0.25).unwrap();
        assert!((m.cli.data()[0] - 0.75).abs() < 1e-12);
        assert!((m.targets.data()[0] - 0.25).abs() < 1e-12);
        assert!((m.targets.data()[1] - 0.75).abs() < 1e-12);
        let row_sum: f64 = m.targets.data()[..24].iter().sum();
        assert!((row_sum - 8.0).abs() < 1e-12);
        let same = mixup(&batch, &[1, 0], 1.0).unwrap();
        assert_eq!(same.cli.data(), batch.cli.data());
        assert_eq!(same.targets.data(), batch.targets.data());
        let half = mixup(&batch, &[1, 0], 0.5).unwrap();
        let (ea, eb) = (&batch.targets.data()[..24], &batch.targets.data()[24..]);
        for k in 0..24 {
            assert_eq!(half.targets.data()[k], 0.5 * ea[k] + 0.5 * eb[k]);
        }
        assert!(mixup(&batch, &[0], 0.5).is_err());
        assert!(mixup(&batch, &[0, 1], 1.5).is_err());
    }

    #[test]
    fn augmenter_is_seeded() {
        let s = Sample {
            cli: image(4),
            der: image(4),
            ..sample("x", 0.0, [0; 8])
        };
        let cfg = AugmentConfig {
            mixup_alpha: 0.4,
            ..Default::default()
        };
        let run = |seed| {
            let mut a = Augmenter::new(cfg.clone(), seed).unwrap();
            a.batch(&[&s, &s, &s], 4).unwrap().cli.into_data()
        };
        assert_eq!(run(1), run(1));
        let mut none = Augmenter::new(AugmentConfig::none(), 0).unwrap();
        assert_eq!(none.batch(&[&s], 4).unwrap().cli.into_data(), s.cli);
        assert!(Augmenter::new(
            AugmentConfig {
                mixup_alpha: -1.0,
                ..Default::default()
            },
            0
        )
        .is_err());
    }

    proptest! {
        #[test]
        fn flips_are_involutions(size in 1usize..6, seed in 0u64..100) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let img: Vec<f64> = (0..size * size * 3).map(|_| rand::Rng::random::<f64>(&mut rng)).collect();
            prop_assert_eq!(hflip(&hflip(&img, size), size), img.clone());
            prop_assert_eq!(vflip(&vflip(&img, size), size), img.clone());
            prop_assert_eq!(hflip(&vflip(&img, size), size), vflip(&hflip(&img, size), size));
        }
    }
}
