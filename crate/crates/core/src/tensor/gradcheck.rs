//! Central-difference gradient checking.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use super::{Tape, Tensor, Var};
use crate::error::{Error, Result};

#[derive(Clone, Debug)]
pub struct GradCheckOptions {
    /// Finite-difference step; must lie in (0, 1e-2].
    pub step: f64,
    /// Pass threshold on the per-leaf maximum relative error.
    pub tol: f64,
    /// Lower bound on the relative-error denominator, so components whose
    /// true gradient is numerically zero are compared absolutely.
    pub floor: f64,
    /// Check at most this many coordinates per leaf (sampled without replacement).
    pub max_coords: Option<usize>,
    pub seed: u64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self {
            step: 1e-5,
            tol: 1e-4,
            floor: 1e-6,
            max_coords: None,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct LeafReport {
    pub name: String,
    pub max_rel_error: f64,
    /// Analytic and numeric derivative at the worst coordinate.
    pub worst: (f64, f64),
    pub checked: usize,
}

#[derive(Clone, Debug, Serialize)]
pub struct GradCheckReport {
    pub leaves: Vec<LeafReport>,
    pub tol: f64,
}

impl GradCheckReport {
    pub fn max_error(&self) -> f64 {
        self.leaves
            .iter()
            .map(|l| l.max_rel_error)
            .fold(0.0, f64::max)
    }

    pub fn passed(&self) -> bool {
        self.leaves.iter().all(|l| l.max_rel_error <= self.tol)
    }
}

fn evaluate<F>(f: &F, leaves: &[(String, Tensor)]) -> Result<f64>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::inference();
    let vars: Vec<Var> = leaves
        .iter()
        .map(|(_, t)| tape.leaf(t.clone(), true))
        .collect();
    let out = f(&mut tape, &vars)?;
    tape.value(out).item()
}

/// Compares tape gradients of the scalar program `f` against central
/// differences `(f(x+h) - f(x-h)) / 2h`, leaf by leaf.
pub fn grad_check<F>(
    f: F,
    leaves: &[(String, Tensor)],
    opts: &GradCheckOptions,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    if !(opts.step > 0.0 && opts.step <= 1e-2) {
        return Err(Error::GradCheck(format!(
            "step {} outside (0, 1e-2]",
            opts.step
        )));
    }
    if leaves.iter().any(|(_, t)| !t.is_finite()) {
        return Err(Error::GradCheck("non-finite leaf".into()));
    }

    let mut tape = Tape::new();
    let vars: Vec<Var> = leaves
        .iter()
        .map(|(_, t)| tape.leaf(t.clone(), true))
        .collect();
    let out = f(&mut tape, &vars)?;
    let base = tape.value(out).item()?;
    tape.backward(out)?;

    let again = evaluate(&f, leaves)?;
    if again.to_bits() != base.to_bits() {
        return Err(Error::GradCheck(format!(
            "program is not deterministic: {base} vs {again}"
        )));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut work: Vec<(String, Tensor)> = leaves.to_vec();
    let mut reports = Vec::with_capacity(leaves.len());
    for (li, var) in vars.iter().enumerate() {
        let n = leaves[li].1.numel();
        let analytic: Vec<f64> = match tape.grad(*var) {
            Some(g) => g.to_vec(),
            None => vec![0.0; n],
        };
        let coords: Vec<usize> = match opts.max_coords {
            Some(k) if k < n => {
                let mut c = sample(&mut rng, n, k).into_vec();
                c.sort_unstable();
                c
            }
            _ => (0..n).collect(),
        };
        let mut worst = 0.0f64;
        let mut worst_pair = (0.0, 0.0);
        for &c in &coords {
            let orig = work[li].1.data()[c];
            work[li].1.data_mut()[c] = orig + opts.step;
            let plus = evaluate(&f, &work)?;
            work[li].1.data_mut()[c] = orig - opts.step;
            let minus = evaluate(&f, &work)?;
            work[li].1.data_mut()[c] = orig;
            let numeric = (plus - minus) / (2.0 * opts.step);
            let a = analytic[c];
            let denom = a.abs().max(numeric.abs()).max(opts.floor);
            let err = (a - numeric).abs() / denom;
            if err > worst || c == coords[0] {
                worst = worst.max(err);
                worst_pair = (a, numeric);
            }
        }
        reports.push(LeafReport {
            name: leaves[li].0.clone(),
            max_rel_error: worst,
            worst: worst_pair,
            checked: coords.len(),
        });
    }
    Ok(GradCheckReport {
        leaves: reports,
        tol: opts.tol,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identity_sum_is_exact() {
        // dyadic step and integer inputs keep every difference exact
        let leaves = vec![("x".to_string(), Tensor::from_fn(&[3, 2], |i| i as f64))];
        let opts = GradCheckOptions {
            step: 2f64.powi(-16),
            ..Default::default()
        };
        let report = grad_check(|t, v| t.sum(v[0]), &leaves, &opts).unwrap();
        assert_eq!(report.max_error(), 0.0);
        assert!(report.passed());
    }

    #[test]
    fn rejects_bad_step() {
        let leaves = vec![("x".to_string(), Tensor::scalar(1.0))];
        let opts = GradCheckOptions {
            step: 0.1,
            ..Default::default()
        };
        assert!(grad_check(|t, v| t.sum(v[0]), &leaves, &opts).is_err());
    }

    #[test]
    fn detects_nondeterminism() {
        use std::cell::Cell;
        let calls = Cell::new(0.0);
        let leaves = vec![("x".to_string(), Tensor::scalar(1.0))];
        let f = |t: &mut Tape, v: &[Var]| {
            calls.set(calls.get() + 1.0);
            let s = t.scale(v[0], calls.get())?;
            t.sum(s)
        };
        assert!(matches!(
            grad_check(f, &leaves, &GradCheckOptions::default()),
            Err(Error::GradCheck(_))
        ));
    }

    #[test]
    fn softplus_dot_composite() {
        let leaves = vec![
            (
                "w".to_string(),
                Tensor::new(vec![3], vec![0.3, -1.2, 0.7]).unwrap(),
            ),
            (
                "v".to_string(),
                Tensor::new(vec![3], vec![1.5, 0.4, -0.9]).unwrap(),
            ),
        ];
        let f = |t: &mut Tape, v: &[Var]| {
            let p = t.mul(v[0], v[1])?;
            let s = t.sum(p)?;
            t.softplus(s)
        };
        let opts = GradCheckOptions {
            tol: 1e-6,
            ..Default::default()
        };
        let report = grad_check(f, &leaves, &opts).unwrap();
        assert!(report.passed(), "{report:?}");
    }
}
