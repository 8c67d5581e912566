use crate::config::Schedule;
use crate::error::{Error, Result};

/// Cosine annealing from `base` towards 0 over `total` epochs.
pub fn cosine_lr(epoch: usize, total: usize, base: f64) -> Result<f64> {
    if epoch >= total {
        return Err(Error::Config(format!("epoch {epoch} outside 0..{total}")));
    }
    let t = epoch as f64 / total as f64;
    Ok(0.5 * base * (1.0 + (std::f64::consts::PI * t).cos()))
}

pub fn learning_rate(schedule: Schedule, epoch: usize, total: usize, base: f64) -> Result<f64> {
    match schedule {
        Schedule::Cosine => cosine_lr(epoch, total, base),
        Schedule::Constant if epoch < total => Ok(base),
        Schedule::Constant => Err(Error::Config(format!("epoch {epoch} outside 0..{total}"))),
    }
}
