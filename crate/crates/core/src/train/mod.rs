//! Optimisation, evaluation, checkpoints and the ablation driver.

mod ablate;
mod checkpoint;
mod metrics;
mod optim;
mod report;
mod schedule;

pub use ablate::{parse_arms, preset_arms, run_ablation, Arm, ArmResult, PRESETS};
pub use checkpoint::{Checkpoint, StoredTensor, CHECKPOINT_VERSION};
pub use metrics::{average, Metrics};
pub use optim::{Adam, Moments};
pub use report::{
    read_history_csv, read_results_csv, render_metrics_table, render_summary_table, summarize,
    write_history_csv, write_results_csv, HistoryRow, ResultRow, Summary, HISTORY_COLUMNS,
    RESULT_COLUMNS,
};
pub use schedule::{cosine_lr, learning_rate};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::RunConfig;
use crate::data::{
    generate_dataset, split_by_column, split_indices, stack, Augmenter, Batch, CorrelationPlan,
    Dataset, MarginalTable, SplitSizes,
};
use crate::error::{Error, Result};
use crate::label_head::{predict, TaskLabels};
use crate::losses;
use crate::model::{Model, ModelInput};
use crate::nn::{collect_grads, Ctx, ParamStore};
use crate::tensor::Tape;

/// Independent 64-bit seed for a named purpose, derived from the run seed.
pub fn sub_seed(seed: u64, purpose: &str) -> u64 {
    let d = Sha256::new()
        .chain_update(seed.to_le_bytes())
        .chain_update(purpose.as_bytes())
        .finalize();
    u64::from_le_bytes(d[..8].try_into().expect("digest has 32 bytes"))
}

#[derive(Clone, Debug, PartialEq)]
pub struct Splits {
    pub train: Dataset,
    pub val: Dataset,
    pub test: Dataset,
}

/// Uses the split column when every sample has one, otherwise a seeded
/// random split with `sizes`.
pub fn split_dataset(ds: &Dataset, sizes: SplitSizes, seed: u64) -> Result<Splits> {
    let [a, b, c] = match split_by_column(ds) {
        Some(s) => s,
        None => split_indices(ds.len(), sizes, seed)?,
    };
    Ok(Splits {
        train: ds.subset(&a),
        val: ds.subset(&b),
        test: ds.subset(&c),
    })
}

/// The synthetic dataset of a run; the run seed drives generation and split.
pub fn synthetic_dataset(cfg: &RunConfig) -> Result<Dataset> {
    let plan = CorrelationPlan::new(&cfg.data.generator.correlations)?;
    generate_dataset(
        cfg.data.samples,
        &MarginalTable::default(),
        &plan,
        cfg.encoder.image_size,
        &cfg.data.generator,
        sub_seed(cfg.seed, "data"),
    )
}

pub fn synthetic_splits(cfg: &RunConfig) -> Result<Splits> {
    let ds = synthetic_dataset(cfg)?;
    split_dataset(&ds, cfg.data.generator.sizes, sub_seed(cfg.seed, "split"))
}

/// Predicted class per task for every sample.
pub fn predict_labels(
    model: &Model,
    store: &ParamStore,
    data: &Dataset,
    chunk: usize,
) -> Result<Vec<TaskLabels>> {
    let mut out = Vec::with_capacity(data.len());
    let idx: Vec<usize> = (0..data.len()).collect();
    for part in idx.chunks(chunk.max(1)) {
        let b = data.batch(part)?;
        let logits = model.predict_logits(
            store,
            ModelInput {
                cli: &b.cli,
                der: &b.der,
                meta: &b.meta,
            },
            chunk,
        )?;
        for row in logits.data().chunks(crate::label_head::NUM_CLASSES) {
            let p = predict(row)?;
            let mut l = [0; crate::label_head::NUM_TASKS];
            l.copy_from_slice(&p.classes);
            out.push(l);
        }
    }
    Ok(out)
}

pub fn evaluate(
    model: &Model,
    store: &ParamStore,
    data: &Dataset,
    chunk: usize,
) -> Result<Metrics> {
    if data.is_empty() {
        return Err(Error::Data("cannot evaluate an empty split".into()));
    }
    let pred = predict_labels(model, store, data, chunk)?;
    Metrics::from_predictions(&pred, &data.labels())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: f64,
    pub train_loss: f64,
    pub val: Metrics,
}

pub struct TrainOutcome {
    pub model: Model,
    /// Parameters of the best validation epoch (initialization if none ran).
    pub best: ParamStore,
    pub last: ParamStore,
    pub history: Vec<EpochRecord>,
    pub checkpoint: Checkpoint,
}

pub struct Trainer {
    pub cfg: RunConfig,
    pub model: Model,
    pub store: ParamStore,
    pub optimizer: Adam,
    augmenter: Augmenter,
    shuffle: ChaCha8Rng,
}

impl Trainer {
    pub fn new(cfg: &RunConfig) -> Result<Self> {
        cfg.validate()?;
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(sub_seed(cfg.seed, "init"));
        let model = Model::new(&mut store, &mut rng, &cfg.encoder, &cfg.fusion, &cfg.head)?;
        Ok(Self {
            cfg: cfg.clone(),
            model,
            store,
            optimizer: Adam::new(cfg.optim.clone()),
            augmenter: Augmenter::new(cfg.augment.clone(), sub_seed(cfg.seed, "augment"))?,
            shuffle: ChaCha8Rng::seed_from_u64(sub_seed(cfg.seed, "shuffle")),
        })
    }

    /// One optimisation step; returns the loss before the update.
    pub fn step(&mut self, batch: &Batch, lr: f64) -> Result<f64> {
        let mut tape = Tape::new();
        let mut ctx = Ctx::new(&mut tape, &self.store);
        let out = self.model.forward(
            &mut ctx,
            ModelInput {
                cli: &batch.cli,
                der: &batch.der,
                meta: &batch.meta,
            },
        )?;
        let l = losses::loss(ctx.tape, &self.cfg.loss, out.logits, &batch.targets)?;
        let bindings = ctx.into_bindings();
        let value = tape.value(l).item()?;
        if !value.is_finite() {
            return Err(Error::NumericOverflow { op: "loss" });
        }
        tape.backward(l)?;
        let grads = collect_grads(&tape, &bindings);
        self.optimizer.step(&mut self.store, &grads, lr)?;
        Ok(value)
    }

    /// One pass over `data` in shuffled, augmented mini-batches; returns the
    /// sample-weighted mean loss.
    pub fn epoch(&mut self, data: &Dataset, epoch: usize, lr: f64) -> Result<f64> {
        if data.is_empty() {
            return Err(Error::Data("empty training split".into()));
        }
        let mut order: Vec<usize> = (0..data.len()).collect();
        order.shuffle(&mut self.shuffle);
        let mut total = 0.0;
        for (bi, part) in order.chunks(self.cfg.train.batch_size).enumerate() {
            let refs: Vec<_> = part.iter().map(|&i| &data.samples[i]).collect();
            let batch = self.augmenter.batch(&refs, data.image_size)?;
            let loss = self.step(&batch, lr).map_err(|e| match e {
                Error::NumericOverflow { op } => Error::Diverged {
                    epoch,
                    batch: bi,
                    msg: format!("non-finite {op}"),
                },
                other => other,
            })?;
            total += loss * part.len() as f64;
        }
        Ok(total / data.len() as f64)
    }

    pub fn evaluate(&self, data: &Dataset) -> Result<Metrics> {
        evaluate(&self.model, &self.store, data, self.cfg.train.eval_chunk)
    }

    /// Full schedule with per-epoch validation; keeps the parameters of the
    /// epoch with the strictly highest validation AVG.
    pub fn fit(
        mut self,
        train: &Dataset,
        val: &Dataset,
        mut on_epoch: impl FnMut(&EpochRecord),
    ) -> Result<TrainOutcome> {
        if train.is_empty() || val.is_empty() {
            return Err(Error::Data(
                "training and validation splits must be non-empty".into(),
            ));
        }
        let hash = self.cfg.hash()?;
        let total = self.cfg.train.epochs;
        let mut checkpoint = Checkpoint::new(
            &self.store,
            &self.optimizer,
            &hash,
            self.cfg.seed,
            None,
            None,
        );
        let mut best = self.store.clone();
        let mut history = Vec::with_capacity(total);
        for epoch in 0..total {
            let lr = learning_rate(self.cfg.train.schedule, epoch, total, self.cfg.optim.lr)?;
            let train_loss = self.epoch(train, epoch, lr)?;
            let val_m = self.evaluate(val)?;
            if checkpoint.best_val_avg.is_none_or(|b| val_m.avg > b) {
                checkpoint = Checkpoint::new(
                    &self.store,
                    &self.optimizer,
                    &hash,
                    self.cfg.seed,
                    Some(epoch),
                    Some(val_m.avg),
                );
                best = self.store.clone();
            }
            let rec = EpochRecord {
                epoch,
                lr,
                train_loss,
                val: val_m,
            };
            on_epoch(&rec);
            history.push(rec);
        }
        Ok(TrainOutcome {
            model: self.model,
            best,
            last: self.store,
            history,
            checkpoint,
        })
    }
}

/// Stacks samples without augmentation.
pub fn plain_batch(data: &Dataset, indices: &[usize]) -> Result<Batch> {
    let owned: Vec<_> = indices.iter().map(|&i| data.samples[i].clone()).collect();
    stack(&owned, data.image_size, None)
}
