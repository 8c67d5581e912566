use std::fs;
use std::path::{Path, PathBuf};

use trimodal_core::config::RunConfig;
use trimodal_core::data::{
    load_csv, read_dataset_dir, split_indices, write_dataset_dir, Dataset, Manifest, Split,
};
use trimodal_core::label_head::{predict, TASKS};
use trimodal_core::model::ModelInput;
use trimodal_core::nn::ParamStore;
use trimodal_core::train::{
    parse_arms, preset_arms, read_history_csv, read_results_csv, render_metrics_table,
    render_summary_table, run_ablation, split_dataset, sub_seed, summarize, synthetic_dataset,
    synthetic_splits, write_history_csv, write_results_csv, Checkpoint, HistoryRow, Metrics,
    ResultRow, Splits, Trainer,
};
use trimodal_core::verify::{check_all, check_block, BlockReport, BLOCKS};
use trimodal_core::{Error, Result};

use crate::plot::{line_chart, Series};
use crate::{resolve_config, Command, Common, CONFIG_ECHO, FAILED_MARKER};

pub fn run(command: &Command, out: &Path, created: &mut bool) -> Result<()> {
    match command {
        Command::GenData { common } => gen_data(common, out, created),
        Command::Train { common, data } => train(common, data.as_deref(), out, created),
        Command::Eval {
            common,
            checkpoint,
            data,
            split,
        } => eval(common, checkpoint, data.as_deref(), split, out, created),
        Command::Gradcheck { common, blocks } => gradcheck(common, blocks, out, created),
        Command::Ablate {
            common,
            preset,
            arms,
            seeds,
            jobs,
            data,
        } => ablate(
            common,
            preset,
            arms.as_deref(),
            seeds,
            *jobs,
            data.as_deref(),
            out,
            created,
        ),
        Command::Report { common, inputs } => report(common, inputs, out, created),
    }
}

/// Creates the output directory, clears a stale failure marker and echoes
/// the effective config.
fn prepare(out: &Path, cfg: &RunConfig, created: &mut bool) -> Result<()> {
    fs::create_dir_all(out)?;
    *created = true;
    let marker = out.join(FAILED_MARKER);
    if marker.exists() {
        fs::remove_file(marker)?;
    }
    fs::write(out.join(CONFIG_ECHO), cfg.to_toml()?)?;
    Ok(())
}

fn read_data(path: &Path, cfg: &RunConfig) -> Result<Dataset> {
    if path.is_dir() {
        let (ds, manifest) = read_dataset_dir(path)?;
        if manifest.image_size != cfg.encoder.image_size {
            return Err(Error::Config(format!(
                "dataset images are {}px but encoder.image_size is {}",
                manifest.image_size, cfg.encoder.image_size
            )));
        }
        Ok(ds)
    } else {
        load_csv(path, cfg.encoder.image_size)
    }
}

fn load_splits(path: Option<&Path>, cfg: &RunConfig) -> Result<Splits> {
    match path {
        None => synthetic_splits(cfg),
        Some(p) => split_dataset(
            &read_data(p, cfg)?,
            cfg.data.generator.sizes,
            sub_seed(cfg.seed, "split"),
        ),
    }
}

fn gen_data(common: &Common, out: &Path, created: &mut bool) -> Result<()> {
    let cfg = resolve_config(common, None)?;
    prepare(out, &cfg, created)?;
    let mut ds = synthetic_dataset(&cfg)?;
    let sizes = cfg.data.generator.sizes;
    let parts = split_indices(ds.len(), sizes, sub_seed(cfg.seed, "split"))?;
    for (idx, split) in parts.iter().zip([Split::Train, Split::Val, Split::Test]) {
        for &i in idx {
            ds.samples[i].split = Some(split);
        }
    }
    // Samples beyond the requested split sizes stay unassigned.
    let manifest = Manifest {
        seed: cfg.seed,
        config_hash: cfg.hash()?,
        image_size: ds.image_size,
        samples: ds.len(),
        sizes,
    };
    write_dataset_dir(&ds, out, &manifest)?;
    println!(
        "wrote {} samples ({} train, {} val, {} test) to {}",
        ds.len(),
        parts[0].len(),
        parts[1].len(),
        parts[2].len(),
        out.display()
    );
    Ok(())
}

fn train(common: &Common, data: Option<&Path>, out: &Path, created: &mut bool) -> Result<()> {
    let cfg = resolve_config(common, None)?;
    prepare(out, &cfg, created)?;
    let splits = load_splits(data, &cfg)?;
    let total = cfg.train.epochs;
    let outcome = Trainer::new(&cfg)?.fit(&splits.train, &splits.val, |r| {
        eprintln!(
            "epoch {}/{total} lr {:.3e} loss {:.5} val AVG {:.2} meanF1 {:.2}",
            r.epoch + 1,
            r.lr,
            r.train_loss,
            r.val.avg,
            r.val.mean_f1
        );
    })?;
    outcome.checkpoint.save(&out.join("checkpoint.json"))?;
    write_history_csv(
        "train",
        cfg.seed,
        &outcome.history,
        &out.join("history.csv"),
    )?;
    match (outcome.checkpoint.epoch, outcome.checkpoint.best_val_avg) {
        (Some(e), Some(avg)) => println!(
            "best epoch {} val AVG {avg:.2}; checkpoint in {}",
            e + 1,
            out.display()
        ),
        _ => println!(
            "no epochs run; initial parameters saved in {}",
            out.display()
        ),
    }
    Ok(())
}

fn split_of(splits: Splits, name: &str) -> Dataset {
    match name {
        "train" => splits.train,
        "val" => splits.val,
        "all" => {
            let mut all = splits.train;
            all.samples.extend(splits.val.samples);
            all.samples.extend(splits.test.samples);
            all
        }
        _ => splits.test,
    }
}

fn eval(
    common: &Common,
    checkpoint: &Path,
    data: Option<&Path>,
    split: &str,
    out: &Path,
    created: &mut bool,
) -> Result<()> {
    let beside = checkpoint
        .parent()
        .map(|d| d.join(CONFIG_ECHO))
        .filter(|p| p.exists());
    let cfg = resolve_config(common, beside.as_deref())?;
    prepare(out, &cfg, created)?;
    let ck = Checkpoint::load(checkpoint)?;
    if ck.config_hash != cfg.hash()? {
        eprintln!(
            "note: checkpoint was trained under config {} (current {})",
            ck.config_hash,
            cfg.hash()?
        );
    }
    let trainer = Trainer::new(&cfg)?;
    let mut store: ParamStore = trainer.store;
    ck.restore_into(&mut store)?;
    let ds = split_of(load_splits(data, &cfg)?, split);
    if ds.is_empty() {
        return Err(Error::Data(format!("split {split} is empty")));
    }
    let model = trainer.model;
    let chunk = cfg.train.eval_chunk.max(1);
    let mut preds = Vec::with_capacity(ds.len());
    let mut lines = String::new();
    let idx: Vec<usize> = (0..ds.len()).collect();
    for part in idx.chunks(chunk) {
        let b = ds.batch(part)?;
        let logits = model.predict_logits(
            &store,
            ModelInput {
                cli: &b.cli,
                der: &b.der,
                meta: &b.meta,
            },
            chunk,
        )?;
        for (row, &i) in logits
            .data()
            .chunks(trimodal_core::label_head::NUM_CLASSES)
            .zip(part)
        {
            let p = predict(row)?;
            lines.push_str(&p.to_json_record(&ds.samples[i].case_id).to_string());
            lines.push('\n');
            let mut labels = [0; trimodal_core::label_head::NUM_TASKS];
            labels.copy_from_slice(&p.classes);
            preds.push(labels);
        }
    }
    let metrics = Metrics::from_predictions(&preds, &ds.labels())?;
    fs::write(out.join("predictions.jsonl"), lines)?;
    fs::write(
        out.join("metrics.json"),
        serde_json::to_string_pretty(&metrics)?,
    )?;
    let table = render_metrics_table(&[("Model", &metrics)]);
    fs::write(out.join("table.txt"), &table)?;
    print!("{table}");
    println!(
        "meanF1 {:.2} over {} samples ({split})",
        metrics.mean_f1, metrics.samples
    );
    Ok(())
}

fn gradcheck(common: &Common, blocks: &[String], out: &Path, created: &mut bool) -> Result<()> {
    let cfg = resolve_config(common, None)?;
    for b in blocks {
        if !BLOCKS.contains(&b.as_str()) {
            return Err(Error::Config(format!(
                "unknown block {b}; known: {}",
                BLOCKS.join(", ")
            )));
        }
    }
    prepare(out, &cfg, created)?;
    let print = |r: &BlockReport| {
        let status = if r.passed() { "ok" } else { "FAIL" };
        println!(
            "{:<22} {status:<4} max rel. error {:.3e} ({:.1}s)",
            r.block,
            r.report.max_error(),
            r.seconds
        );
    };
    let reports = if blocks.is_empty() {
        check_all(&cfg, print)?
    } else {
        let mut v = Vec::new();
        for b in blocks {
            let t = std::time::Instant::now();
            let report = check_block(b, &cfg)?;
            let r = BlockReport {
                block: b.clone(),
                report,
                seconds: t.elapsed().as_secs_f64(),
            };
            print(&r);
            v.push(r);
        }
        v
    };
    fs::write(
        out.join("gradcheck.json"),
        serde_json::to_string_pretty(&reports)?,
    )?;
    let failing: Vec<&str> = reports
        .iter()
        .filter(|r| !r.passed())
        .map(|r| r.block.as_str())
        .collect();
    if failing.is_empty() {
        println!("all {} blocks passed", reports.len());
        Ok(())
    } else {
        Err(Error::GradCheck(format!(
            "failing blocks: {}",
            failing.join(", ")
        )))
    }
}

fn slug(s: &str) -> String {
    let mut out: String = s
        .chars()
        .map(|c| {
            if c.is_ascii_alphanumeric() {
                c.to_ascii_lowercase()
            } else {
                '_'
            }
        })
        .collect();
    while out.contains("__") {
        out = out.replace("__", "_");
    }
    out.trim_matches('_').to_string()
}

#[allow(clippy::too_many_arguments)]
fn ablate(
    common: &Common,
    preset: &str,
    arms_file: Option<&Path>,
    seeds: &[u64],
    jobs: usize,
    data: Option<&Path>,
    out: &Path,
    created: &mut bool,
) -> Result<()> {
    let base = resolve_config(common, None)?;
    let arms = match arms_file {
        Some(p) => parse_arms(
            &fs::read_to_string(p).map_err(|e| Error::Config(format!("{}: {e}", p.display())))?,
        )?,
        None => preset_arms(preset)?,
    };
    if arms.is_empty() {
        return Err(Error::Config("no arms to run".into()));
    }
    for arm in &arms {
        base.with_overrides(&arm.overrides)
            .and_then(|c| c.validate())
            .map_err(|e| Error::Config(format!("arm {:?}: {e}", arm.name)))?;
    }
    let seeds = if seeds.is_empty() {
        vec![base.seed]
    } else {
        seeds.to_vec()
    };
    prepare(out, &base, created)?;
    let dataset = match data {
        Some(p) => Some(read_data(p, &base)?),
        None => None,
    };
    eprintln!(
        "running {} arms x {} seeds with {} jobs",
        arms.len(),
        seeds.len(),
        jobs.max(1)
    );
    let results = run_ablation(
        &base,
        &arms,
        &seeds,
        |cfg| match &dataset {
            Some(ds) => split_dataset(ds, cfg.data.generator.sizes, sub_seed(cfg.seed, "split")),
            None => synthetic_splits(cfg),
        },
        jobs,
    )?;
    let rows: Vec<ResultRow> = results.iter().map(|r| r.row()).collect();
    write_results_csv(&rows, &out.join("results.csv"))?;
    let hist = out.join("history");
    fs::create_dir_all(&hist)?;
    for (i, r) in results.iter().enumerate() {
        let name = format!("{i:02}_{}_seed{}.csv", slug(&r.arm), r.seed);
        write_history_csv(&r.arm, r.seed, &r.history, &hist.join(name))?;
    }
    let table = render_summary_table(&summarize(&rows));
    fs::write(out.join("summary.txt"), &table)?;
    print!("{table}");
    Ok(())
}

fn collect_csvs(path: &Path, found: &mut Vec<PathBuf>) -> Result<()> {
    if path.is_dir() {
        let mut entries: Vec<PathBuf> = fs::read_dir(path)?
            .map(|e| e.map(|e| e.path()))
            .collect::<std::io::Result<_>>()?;
        entries.sort();
        for e in entries {
            collect_csvs(&e, found)?;
        }
    } else if path.extension().is_some_and(|e| e == "csv") {
        found.push(path.to_path_buf());
    } else if !path.exists() {
        return Err(Error::Data(format!("{} does not exist", path.display())));
    }
    Ok(())
}

/// Labelled histories.
type Runs = Vec<(String, Vec<HistoryRow>)>;

fn curves(title: &str, runs: &Runs) -> (String, String) {
    let avg: Vec<Series> = runs
        .iter()
        .map(|(n, h)| Series {
            name: n.clone(),
            points: h
                .iter()
                .map(|r| (r.epoch as f64 + 1.0, r.row.avg))
                .collect(),
        })
        .collect();
    let loss: Vec<Series> = runs
        .iter()
        .map(|(n, h)| Series {
            name: n.clone(),
            points: h
                .iter()
                .map(|r| (r.epoch as f64 + 1.0, r.train_loss))
                .collect(),
        })
        .collect();
    (
        line_chart(
            &format!("{title}: validation AVG"),
            "epoch",
            "AVG (%)",
            &avg,
        ),
        line_chart(&format!("{title}: training loss"), "epoch", "loss", &loss),
    )
}

fn report(common: &Common, inputs: &[PathBuf], out: &Path, created: &mut bool) -> Result<()> {
    let cfg = resolve_config(common, None)?;
    let mut files = Vec::new();
    for p in inputs {
        collect_csvs(p, &mut files)?;
    }
    let out_abs = out.canonicalize().ok();
    files.retain(|f| {
        out_abs
            .as_ref()
            .is_none_or(|o| f.canonicalize().map_or(true, |f| !f.starts_with(o)))
    });
    let mut results: Vec<ResultRow> = Vec::new();
    let mut histories: Runs = Vec::new();
    for f in &files {
        if let Ok(rows) = read_results_csv(f) {
            results.extend(rows);
        } else if let Ok(h) = read_history_csv(f) {
            let label = h.first().map_or_else(
                || {
                    f.file_stem()
                        .map(|s| s.to_string_lossy().into_owned())
                        .unwrap_or_default()
                },
                |r| format!("{} (seed {})", r.row.config, r.row.seed),
            );
            histories.push((label, h));
        }
    }
    if results.is_empty() && histories.is_empty() {
        return Err(Error::Data(
            "no result or history CSVs found in the inputs".into(),
        ));
    }
    prepare(out, &cfg, created)?;
    let mut text = String::new();
    if !results.is_empty() {
        text.push_str("Test accuracy (mean±std over seeds)\n");
        text.push_str(&render_summary_table(&summarize(&results)));
        text.push('\n');
    }
    if !histories.is_empty() {
        let mut best = Vec::new();
        for (name, h) in &histories {
            if let Some(b) = h
                .iter()
                .max_by(|a, b| a.row.avg.total_cmp(&b.row.avg).then(b.epoch.cmp(&a.epoch)))
            {
                best.push((format!("{name} @{}", b.epoch + 1), b.row.clone()));
            }
        }
        let rows: Vec<ResultRow> = best
            .iter()
            .map(|(n, r)| ResultRow {
                config: n.clone(),
                ..r.clone()
            })
            .collect();
        text.push_str("Best validation epoch per run\n");
        let width = rows
            .iter()
            .map(|r| r.config.len())
            .max()
            .unwrap_or(0)
            .max(6);
        text.push_str(&format!("{:<width$}", "Run"));
        for t in TASKS.iter() {
            text.push_str(&format!(" {:>7}", t.name));
        }
        text.push_str("     AVG\n");
        for r in &rows {
            text.push_str(&format!("{:<width$}", r.config));
            for s in r.scores().iter().take(TASKS.len() + 1) {
                text.push_str(&format!(" {s:>7.2}"));
            }
            text.push('\n');
        }
        let plots = out.join("plots");
        fs::create_dir_all(&plots)?;
        let mut groups: Vec<(String, Runs)> = Vec::new();
        for (name, h) in histories {
            let config = h
                .first()
                .map(|r| r.row.config.clone())
                .unwrap_or_else(|| name.clone());
            match groups.iter_mut().find(|(c, _)| *c == config) {
                Some((_, runs)) => runs.push((name, h)),
                None => groups.push((config, vec![(name, h)])),
            }
        }
        for (config, runs) in &groups {
            let (avg, loss) = curves(config, runs);
            let stem = slug(config);
            fs::write(plots.join(format!("{stem}_val_avg.svg")), avg)?;
            fs::write(plots.join(format!("{stem}_train_loss.svg")), loss)?;
        }
    }
    fs::write(out.join("report.txt"), &text)?;
    print!("{text}");
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn slugs_are_file_safe() {
        assert_eq!(slug("Swin+BCE (Baseline)"), "swin_bce_baseline");
        assert_eq!(slug("TMCT+MHA+TWL"), "tmct_mha_twl");
    }
}
