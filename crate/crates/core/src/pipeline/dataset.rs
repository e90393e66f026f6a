//! On-disk pair sets: `pairs/NNN_{fixed,moving,label}.pgm`,
//! `pairs/NNN_truth.ddf` and one JSON object per record in `manifest.jsonl`.

use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::PairRecord;
use crate::augment::Level;
use crate::error::{Error, Result};
use crate::field::DisplacementField;
use crate::imagecore::{load_pgm, save_pgm};

pub const MANIFEST: &str = "manifest.jsonl";
pub const PAIRS_DIR: &str = "pairs";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub index: usize,
    pub id: String,
    pub source: String,
    pub width: usize,
    pub height: usize,
    /// Paths relative to the dataset directory.
    pub fixed: String,
    pub moving: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub truth: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub level: Option<Level>,
    /// Generator parameters of the record, if any.
    #[serde(default, skip_serializing_if = "serde_json::Value::is_null")]
    pub params: serde_json::Value,
}

/// Per-record metadata written next to the images.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct RecordMeta {
    pub level: Option<Level>,
    pub params: serde_json::Value,
}

fn rel(index: usize, role: &str, ext: &str) -> String {
    format!("{PAIRS_DIR}/{index:03}_{role}.{ext}")
}

pub fn write_dataset(dir: impl AsRef<Path>, records: &[PairRecord], meta: &[RecordMeta]) -> Result<Vec<ManifestEntry>> {
    let dir = dir.as_ref();
    if !meta.is_empty() && meta.len() != records.len() {
        return Err(Error::Param(format!(
            "{} metadata entries for {} records",
            meta.len(),
            records.len()
        )));
    }
    let pairs = dir.join(PAIRS_DIR);
    std::fs::create_dir_all(&pairs).map_err(|e| Error::io(&pairs, e))?;
    let mut entries = Vec::with_capacity(records.len());
    for (i, r) in records.iter().enumerate() {
        r.validate()?;
        let m = meta.get(i).cloned().unwrap_or_default();
        let entry = ManifestEntry {
            index: i,
            id: r.id.clone(),
            source: r.source.clone(),
            width: r.fixed.width(),
            height: r.fixed.height(),
            fixed: rel(i, "fixed", "pgm"),
            moving: rel(i, "moving", "pgm"),
            label: r.label.as_ref().map(|_| rel(i, "label", "pgm")),
            truth: r.truth_field.as_ref().map(|_| rel(i, "truth", "ddf")),
            level: m.level,
            params: m.params,
        };
        save_pgm(&r.fixed, dir.join(&entry.fixed))?;
        save_pgm(&r.moving, dir.join(&entry.moving))?;
        if let (Some(l), Some(p)) = (&r.label, &entry.label) {
            save_pgm(l, dir.join(p))?;
        }
        if let (Some(t), Some(p)) = (&r.truth_field, &entry.truth) {
            t.write_ddf(dir.join(p))?;
        }
        entries.push(entry);
    }
    let path = dir.join(MANIFEST);
    let mut body = Vec::new();
    for e in &entries {
        serde_json::to_writer(&mut body, e)?;
        body.push(b'\n');
    }
    std::fs::File::create(&path)
        .and_then(|mut f| f.write_all(&body))
        .map_err(|e| Error::io(&path, e))?;
    Ok(entries)
}

pub fn read_manifest(dir: impl AsRef<Path>) -> Result<Vec<ManifestEntry>> {
    let path = dir.as_ref().join(MANIFEST);
    let file = std::fs::File::open(&path).map_err(|e| Error::io(&path, e))?;
    let mut out = Vec::new();
    for (n, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(&path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let entry: ManifestEntry = serde_json::from_str(&line)
            .map_err(|e| Error::Data(format!("{}:{}: {e}", path.display(), n + 1)))?;
        out.push(entry);
    }
    Ok(out)
}

pub fn read_dataset(dir: impl AsRef<Path>) -> Result<Vec<PairRecord>> {
    let dir = dir.as_ref();
    read_manifest(dir)?
        .into_iter()
        .map(|e| {
            let record = PairRecord {
                fixed: load_pgm(dir.join(&e.fixed))?,
                moving: load_pgm(dir.join(&e.moving))?,
                label: e.label.as_ref().map(|p| load_pgm(dir.join(p))).transpose()?,
                truth_field: e
                    .truth
                    .as_ref()
                    .map(|p| DisplacementField::read_ddf(dir.join(p)))
                    .transpose()?,
                id: e.id,
                source: e.source,
            };
            record
                .validate()
                .map_err(|err| Error::Data(format!("record {}: {err}", record.id)))?;
            Ok(record)
        })
        .collect()
}

pub fn field_path(dir: impl AsRef<Path>, id: &str) -> PathBuf {
    dir.as_ref().join(format!("{id}.ddf"))
}

/// Writes one `{id}.ddf` per field.
pub fn write_fields(dir: impl AsRef<Path>, ids: &[String], fields: &[DisplacementField]) -> Result<()> {
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    for (id, f) in ids.iter().zip(fields) {
        f.write_ddf(field_path(dir, id))?;
    }
    Ok(())
}

pub fn read_fields(dir: impl AsRef<Path>, ids: &[String]) -> Result<Vec<DisplacementField>> {
    ids.iter()
        .map(|id| DisplacementField::read_ddf(field_path(&dir, id)))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::imagecore::GrayImage;

    fn record(i: usize, with_label: bool) -> PairRecord {
        let img = |k: f64| GrayImage::from_fn(6, 4, |x, y| ((x + y) as f64 * k / 10.0).min(1.0));
        PairRecord {
            id: format!("rec{i}"),
            source: format!("src{}", i / 2),
            fixed: img(0.5),
            moving: img(1.0),
            label: with_label.then(|| img(0.8)),
            truth_field: Some(DisplacementField::constant(6, 4, 0.5, -1.0).unwrap()),
        }
    }

    #[test]
    fn round_trip_through_disk() {
        let dir = tempfile::tempdir().unwrap();
        let records = vec![record(0, true), record(1, false), record(2, true)];
        let meta = vec![
            RecordMeta {
                level: Some(Level::High),
                params: serde_json::json!({"alpha": 3.0}),
            },
            RecordMeta::default(),
            RecordMeta::default(),
        ];
        write_dataset(dir.path(), &records, &meta).unwrap();
        assert!(dir.path().join("pairs/000_fixed.pgm").exists());
        assert!(dir.path().join("pairs/001_truth.ddf").exists());
        assert!(!dir.path().join("pairs/001_label.pgm").exists());
        let back = read_dataset(dir.path()).unwrap();
        assert_eq!(back.len(), 3);
        for (a, b) in records.iter().zip(&back) {
            assert_eq!(a.id, b.id);
            assert_eq!(a.source, b.source);
            assert_eq!(a.label.is_some(), b.label.is_some());
            assert_eq!(a.truth_field, b.truth_field);
            for (x, y) in a.fixed.data().iter().zip(b.fixed.data()) {
                assert!((x - y).abs() <= 0.5 / 255.0 + 1e-12);
            }
        }
        let m = read_manifest(dir.path()).unwrap();
        assert_eq!(m[0].level, Some(Level::High));
        assert_eq!(m[0].params["alpha"], 3.0);
    }

    #[test]
    fn missing_manifest_is_io_error() {
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(read_dataset(dir.path()), Err(Error::Io { .. })));
        std::fs::write(dir.path().join(MANIFEST), "{not json}\n").unwrap();
        assert!(matches!(read_dataset(dir.path()), Err(Error::Data(_))));
    }

    #[test]
    fn fields_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let ids = vec!["a".to_string(), "b".to_string()];
        let fields = vec![
            DisplacementField::constant(3, 2, 1.0, 2.0).unwrap(),
            DisplacementField::constant(3, 2, -1.0, 0.25).unwrap(),
        ];
        write_fields(dir.path(), &ids, &fields).unwrap();
        assert_eq!(read_fields(dir.path(), &ids).unwrap(), fields);
    }
}
