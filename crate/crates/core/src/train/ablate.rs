use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};

use super::{evaluate, EpochRecord, Metrics, ResultRow, Splits, Trainer};
use crate::config::RunConfig;
use crate::error::{Error, Result};

/// A named set of config overrides.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Arm {
    pub name: String,
    #[serde(default)]
    pub overrides: Vec<String>,
}

impl Arm {
    pub fn new(name: &str, overrides: &[&str]) -> Self {
        Self {
            name: name.into(),
            overrides: overrides.iter().map(|s| s.to_string()).collect(),
        }
    }
}

pub const PRESETS: [&str; 4] = ["components", "variants", "modalities", "decision"];

pub fn preset_arms(name: &str) -> Result<Vec<Arm>> {
    let arms = match name {
        "components" => vec![
            Arm::new(
                "Swin+BCE (Baseline)",
                &["fusion.tmct=false", "head.mha=false", "loss.kind=bce"],
            ),
            Arm::new(
                "TMCT+BCE",
                &["fusion.tmct=true", "head.mha=false", "loss.kind=bce"],
            ),
            Arm::new(
                "TMCT+TWL",
                &["fusion.tmct=true", "head.mha=false", "loss.kind=twl"],
            ),
            Arm::new(
                "TMCT+MHA+BCE",
                &["fusion.tmct=true", "head.mha=true", "loss.kind=bce"],
            ),
            Arm::new(
                "TMCT+MHA+TWL",
                &["fusion.tmct=true", "head.mha=true", "loss.kind=twl"],
            ),
        ],
        "variants" => vec![
            Arm::new("TMCT+MHA+TWL", &[]),
            Arm::new("TMCT+MHA+TWL (unshared)", &["encoder.shared_weights=false"]),
            Arm::new(
                "TMCT(concat.image)+MHA+TWL",
                &["fusion.meta_kv=concat-image"],
            ),
        ],
        "modalities" => {
            let sets: [(&str, &str); 7] = [
                ("Cli", "[\"cli\"]"),
                ("Der", "[\"der\"]"),
                ("Meta", "[\"meta\"]"),
                ("Cli+Der", "[\"cli\", \"der\"]"),
                ("Cli+Meta", "[\"cli\", \"meta\"]"),
                ("Der+Meta", "[\"der\", \"meta\"]"),
                ("Cli+Der+Meta", "[\"cli\", \"der\", \"meta\"]"),
            ];
            sets.iter()
                .map(|(n, v)| Arm {
                    name: n.to_string(),
                    overrides: vec![format!("fusion.modalities={v}")],
                })
                .collect()
        }
        "decision" => {
            let sets: [(&str, &str); 6] = [
                ("f_der", "[\"der\"]"),
                ("f_meta", "[\"meta\"]"),
                ("f_cli+f_der", "[\"cli\", \"der\"]"),
                ("f_cli+f_meta", "[\"cli\", \"meta\"]"),
                ("f_der+f_meta", "[\"der\", \"meta\"]"),
                ("f_cli+f_der+f_meta", "[\"cli\", \"der\", \"meta\"]"),
            ];
            sets.iter()
                .map(|(n, v)| Arm {
                    name: n.to_string(),
                    overrides: vec![format!("fusion.decision={v}")],
                })
                .collect()
        }
        other => {
            return Err(Error::Config(format!(
                "unknown preset {other}; known: {}",
                PRESETS.join(", ")
            )))
        }
    };
    Ok(arms)
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct ArmFile {
    #[serde(default)]
    arm: Vec<Arm>,
}

/// Parses `[[arm]]` tables with `name` and `overrides`.
pub fn parse_arms(text: &str) -> Result<Vec<Arm>> {
    let f: ArmFile = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
    Ok(f.arm)
}

#[derive(Clone, Debug)]
pub struct ArmResult {
    pub arm: String,
    pub seed: u64,
    pub config: RunConfig,
    /// Test metrics of the best-validation parameters.
    pub test: Metrics,
    pub history: Vec<EpochRecord>,
}

impl ArmResult {
    pub fn row(&self) -> ResultRow {
        ResultRow::new(&self.arm, self.seed, &self.test)
    }
}

/// Trains every arm under every seed and evaluates on the test split.
/// All configs are built and validated before any training starts. Up to
/// `jobs` runs execute concurrently; results come back in (arm, seed) order.
pub fn run_ablation<D>(
    base: &RunConfig,
    arms: &[Arm],
    seeds: &[u64],
    data: D,
    jobs: usize,
) -> Result<Vec<ArmResult>>
where
    D: Fn(&RunConfig) -> Result<Splits> + Sync,
{
    let mut work = Vec::with_capacity(arms.len() * seeds.len());
    for arm in arms {
        let cfg = base
            .with_overrides(&arm.overrides)
            .map_err(|e| Error::Config(format!("arm {:?}: {e}", arm.name)))?;
        cfg.validate()
            .map_err(|e| Error::Config(format!("arm {:?}: {e}", arm.name)))?;
        for &seed in seeds {
            let mut c = cfg.clone();
            c.seed = seed;
            work.push((arm.name.clone(), c));
        }
    }
    let run = |(name, cfg): &(String, RunConfig)| -> Result<ArmResult> {
        let splits = data(cfg)?;
        let out = Trainer::new(cfg)?.fit(&splits.train, &splits.val, |_| {})?;
        let test = evaluate(&out.model, &out.best, &splits.test, cfg.train.eval_chunk)?;
        Ok(ArmResult {
            arm: name.clone(),
            seed: cfg.seed,
            config: cfg.clone(),
            test,
            history: out.history,
        })
    };
    let jobs = jobs.clamp(1, work.len().max(1));
    if jobs == 1 {
        return work.iter().map(run).collect();
    }
    let next = AtomicUsize::new(0);
    let slots: Mutex<Vec<Option<Result<ArmResult>>>> =
        Mutex::new((0..work.len()).map(|_| None).collect());
    std::thread::scope(|s| {
        for _ in 0..jobs {
            s.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::SeqCst);
                if i >= work.len() {
                    break;
                }
                let r = run(&work[i]);
                slots.lock().expect("no poisoned workers")[i] = Some(r);
            });
        }
    });
    slots
        .into_inner()
        .expect("no poisoned workers")
        .into_iter()
        .map(|r| r.expect("every slot filled"))
        .collect()
}
