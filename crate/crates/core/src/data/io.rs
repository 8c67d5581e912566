//! CSV ingestion and dataset directories.
//!
//! A dataset directory holds `data.csv` (labels, metadata, split),
//! `images.bin` (both image streams as little-endian f32, in row order,
//! clinical before dermoscopic) and `manifest.json`.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{decode_meta, encode_meta, Dataset, Sample, Split, SplitSizes, META_GROUPS};
use crate::error::{Error, Result};
use crate::label_head::{NUM_TASKS, TASKS};

pub const DATA_FILE: &str = "data.csv";
pub const IMAGES_FILE: &str = "images.bin";
pub const MANIFEST_FILE: &str = "manifest.json";

const LABEL_COLUMNS: [&str; NUM_TASKS] = ["diag", "pn", "bwv", "vs", "pig", "str", "dag", "rs"];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub seed: u64,
    pub config_hash: String,
    pub image_size: usize,
    pub samples: usize,
    pub sizes: SplitSizes,
}

impl Manifest {
    pub fn write(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self).map_err(|e| Error::Serde(e.to_string()))?;
        fs::write(path, text)?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        serde_json::from_str(&text).map_err(|e| Error::Serde(format!("{}: {e}", path.display())))
    }
}

fn header() -> Vec<&'static str> {
    let mut h = vec!["case_id", "split"];
    h.extend(LABEL_COLUMNS);
    h.extend(META_GROUPS.iter().map(|g| g.column));
    h
}

/// Writes labels, metadata and split (if any) with class-name strings.
pub fn write_csv(ds: &Dataset, path: &Path) -> Result<()> {
    let csv_err = |e: csv::Error| Error::Data(format!("{}: {e}", path.display()));
    let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
    w.write_record(header()).map_err(csv_err)?;
    for s in &ds.samples {
        let meta = decode_meta(&s.meta)?;
        let mut rec = vec![
            s.case_id.clone(),
            s.split.map(|x| x.as_str()).unwrap_or("").to_string(),
        ];
        rec.extend(
            TASKS
                .iter()
                .zip(&s.labels)
                .map(|(t, &c)| t.classes[c].to_string()),
        );
        rec.extend(
            META_GROUPS
                .iter()
                .zip(&meta)
                .map(|(g, &i)| g.values[i].to_string()),
        );
        w.write_record(&rec).map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}

struct Table {
    columns: HashMap<String, usize>,
    rows: Vec<csv::StringRecord>,
}

impl Table {
    fn read(path: &Path) -> Result<Self> {
        let mut r = csv::ReaderBuilder::new()
            .flexible(true)
            .trim(csv::Trim::All)
            .from_path(path)
            .map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
        let parse = |row: usize, e: csv::Error| Error::Parse {
            row,
            column: String::new(),
            msg: e.to_string(),
        };
        let head = r.headers().map_err(|e| parse(0, e))?.clone();
        if head.is_empty() || (head.len() == 1 && head[0].is_empty()) {
            return Err(Error::Data(format!("{} is empty", path.display())));
        }
        let columns = head
            .iter()
            .enumerate()
            .map(|(i, c)| (c.to_ascii_lowercase(), i))
            .collect();
        let mut rows = Vec::new();
        for (i, rec) in r.records().enumerate() {
            let rec = rec.map_err(|e| parse(i + 1, e))?;
            if rec.len() != head.len() {
                return Err(Error::Parse {
                    row: i + 1,
                    column: String::new(),
                    msg: format!("expected {} fields, found {}", head.len(), rec.len()),
                });
            }
            rows.push(rec);
        }
        if rows.is_empty() {
            return Err(Error::Data(format!("{} has no data rows", path.display())));
        }
        Ok(Self { columns, rows })
    }

    fn column(&self, name: &str) -> Result<usize> {
        self.columns.get(name).copied().ok_or_else(|| Error::Parse {
            row: 0,
            column: name.into(),
            msg: "missing column".into(),
        })
    }
}

fn parse_labels(
    rec: &csv::StringRecord,
    cols: &[usize; NUM_TASKS],
    row: usize,
) -> Result<[usize; NUM_TASKS]> {
    let mut labels = [0; NUM_TASKS];
    for (t, task) in TASKS.iter().enumerate() {
        let raw = &rec[cols[t]];
        labels[t] = task.class_index(raw).ok_or_else(|| Error::Parse {
            row,
            column: LABEL_COLUMNS[t].into(),
            msg: format!("unknown {} class {raw:?}", task.name),
        })?;
    }
    Ok(labels)
}

fn parse_meta(rec: &csv::StringRecord, cols: &[usize; 5], row: usize) -> Result<Vec<f64>> {
    let mut values = [0; 5];
    for (g, group) in META_GROUPS.iter().enumerate() {
        let raw = &rec[cols[g]];
        values[g] = group.value_index(raw).ok_or_else(|| Error::Parse {
            row,
            column: group.column.into(),
            msg: format!("unknown {} value {raw:?}", group.column),
        })?;
    }
    encode_meta(&values)
}

fn parse_split(rec: &csv::StringRecord, col: Option<usize>, row: usize) -> Result<Option<Split>> {
    let Some(c) = col else { return Ok(None) };
    let raw = &rec[c];
    if raw.is_empty() {
        return Ok(None);
    }
    Split::parse(raw).map(Some).ok_or_else(|| Error::Parse {
        row,
        column: "split".into(),
        msg: format!("unknown split {raw:?}"),
    })
}

/// Deterministic stand-in image derived from the case id.
pub fn placeholder_image(case_id: &str, stream: u8, size: usize) -> Vec<f64> {
    let digest = Sha256::new()
        .chain_update(case_id.as_bytes())
        .chain_update([stream])
        .finalize();
    let mut seed = [0u8; 32];
    seed.copy_from_slice(&digest);
    let mut rng = ChaCha8Rng::from_seed(seed);
    (0..size * size * 3)
        .map(|_| rng.random::<f32>() as f64)
        .collect()
}

/// Reads a single CSV carrying labels and metadata.
pub fn load_csv(path: &Path, image_size: usize) -> Result<Dataset> {
    load_derm7pt_csv(path, path, image_size)
}

/// Joins a metadata CSV and a label CSV on `case_id`. Either file may
/// carry a `split` column (the metadata file wins). Images are
/// placeholders; see [`attach_images`].
pub fn load_derm7pt_csv(
    meta_path: &Path,
    labels_path: &Path,
    image_size: usize,
) -> Result<Dataset> {
    let meta = Table::read(meta_path)?;
    let labels = if meta_path == labels_path {
        None
    } else {
        Some(Table::read(labels_path)?)
    };
    let lab = labels.as_ref().unwrap_or(&meta);

    let id_meta = meta.column("case_id")?;
    let id_lab = lab.column("case_id")?;
    let mut label_cols = [0; NUM_TASKS];
    for (slot, name) in label_cols.iter_mut().zip(LABEL_COLUMNS) {
        *slot = lab.column(name)?;
    }
    let mut meta_cols = [0; 5];
    for (slot, g) in meta_cols.iter_mut().zip(&META_GROUPS) {
        *slot = meta.column(g.column)?;
    }
    let split_meta = meta.column("split").ok();
    let split_lab = lab.column("split").ok();

    let mut by_id = HashMap::new();
    for (i, rec) in lab.rows.iter().enumerate() {
        if by_id.insert(rec[id_lab].to_string(), i).is_some() {
            return Err(Error::Parse {
                row: i + 1,
                column: "case_id".into(),
                msg: "duplicate case id".into(),
            });
        }
    }

    let mut samples = Vec::with_capacity(meta.rows.len());
    for (i, rec) in meta.rows.iter().enumerate() {
        let row = i + 1;
        let case_id = rec[id_meta].to_string();
        let li = *by_id.get(&case_id).ok_or_else(|| Error::Parse {
            row,
            column: "case_id".into(),
            msg: format!("no labels for case {case_id:?}"),
        })?;
        let lrec = &lab.rows[li];
        let split = match parse_split(rec, split_meta, row)? {
            Some(s) => Some(s),
            None => parse_split(lrec, split_lab, li + 1)?,
        };
        samples.push(Sample {
            cli: placeholder_image(&case_id, 0, image_size),
            der: placeholder_image(&case_id, 1, image_size),
            meta: parse_meta(rec, &meta_cols, row)?,
            labels: parse_labels(lrec, &label_cols, li + 1)?,
            case_id,
            split,
        });
    }
    Ok(Dataset {
        image_size,
        samples,
    })
}

/// Writes both image streams as little-endian f32.
pub fn write_images(ds: &Dataset, path: &Path) -> Result<()> {
    let px = ds.image_size * ds.image_size * 3;
    let mut bytes = Vec::with_capacity(ds.len() * px * 8);
    for s in &ds.samples {
        for v in s.cli.iter().chain(&s.der) {
            bytes.extend_from_slice(&(*v as f32).to_le_bytes());
        }
    }
    fs::write(path, bytes)?;
    Ok(())
}

/// Replaces images with those stored by [`write_images`].
pub fn attach_images(ds: &mut Dataset, path: &Path) -> Result<()> {
    let bytes = fs::read(path)?;
    let px = ds.image_size * ds.image_size * 3;
    if bytes.len() != ds.len() * px * 8 {
        return Err(Error::Data(format!(
            "{} holds {} bytes, expected {} for {} samples of size {}",
            path.display(),
            bytes.len(),
            ds.len() * px * 8,
            ds.len(),
            ds.image_size
        )));
    }
    let mut vals = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64);
    for s in &mut ds.samples {
        s.cli = vals.by_ref().take(px).collect();
        s.der = vals.by_ref().take(px).collect();
    }
    Ok(())
}

pub fn write_dataset_dir(ds: &Dataset, dir: &Path, manifest: &Manifest) -> Result<()> {
    fs::create_dir_all(dir)?;
    write_csv(ds, &dir.join(DATA_FILE))?;
    write_images(ds, &dir.join(IMAGES_FILE))?;
    manifest.write(&dir.join(MANIFEST_FILE))
}

/// Loads a dataset directory. Without `images.bin` the placeholders remain.
pub fn read_dataset_dir(dir: &Path) -> Result<(Dataset, Manifest)> {
    let manifest = Manifest::read(&dir.join(MANIFEST_FILE))?;
    let mut ds = load_csv(&dir.join(DATA_FILE), manifest.image_size)?;
    let images = dir.join(IMAGES_FILE);
    if images.exists() {
        attach_images(&mut ds, &images)?;
    }
    Ok((ds, manifest))
}
