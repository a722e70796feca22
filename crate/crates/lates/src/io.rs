//! Filesystem side of the binary formats, plus atomic report writes.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use lates_core::dataio::ActivationDump;
use lates_core::probes::{decode_bundle, encode_bundle, LinearProbe};
use lates_core::Matrix;
use serde::Serialize;

use crate::report::{DumpManifest, LayerEntry};

/// Writes through a temporary file in the destination directory, then
/// renames it into place, so readers never observe a partial file.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    fs::create_dir_all(dir).with_context(|| format!("creating directory {}", dir.display()))?;
    let mut tmp = tempfile::NamedTempFile::new_in(dir)
        .with_context(|| format!("creating a temporary file in {}", dir.display()))?;
    tmp.write_all(bytes)
        .and_then(|_| tmp.as_file().sync_all())
        .with_context(|| format!("writing {}", path.display()))?;
    tmp.persist(path)
        .map_err(|e| e.error)
        .with_context(|| format!("renaming into {}", path.display()))?;
    Ok(())
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_vec_pretty(value)?;
    text.push(b'\n');
    write_atomic(path, &text)
}

pub fn read_bytes(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).with_context(|| format!("reading {}", path.display()))
}

pub fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))
}

pub fn read_dump(path: &Path) -> Result<ActivationDump> {
    let bytes = read_bytes(path)?;
    ActivationDump::decode(&bytes).with_context(|| format!("decoding activation dump {}", path.display()))
}

pub fn write_dump(path: &Path, dump: &ActivationDump) -> Result<()> {
    write_atomic(path, &dump.encode())
}

/// `<dir>/<stem>.manifest.json` next to `dump_path`.
pub fn manifest_path(dump_path: &Path) -> PathBuf {
    let stem = dump_path.file_stem().unwrap_or_default().to_string_lossy();
    dump_path.with_file_name(format!("{stem}.manifest.json"))
}

pub fn manifest_for(dump: &ActivationDump, model: &str, split: &str) -> DumpManifest {
    let bytes = dump.encode();
    let crc = u32::from_le_bytes(bytes[bytes.len() - 4..].try_into().expect("4-byte footer"));
    DumpManifest {
        model: model.to_owned(),
        split: split.to_owned(),
        n_examples: dump.n_examples(),
        n_classes: dump.n_classes(),
        layers: dump
            .layers()
            .iter()
            .map(|l| LayerEntry {
                index: l.layer_index(),
                dim: l.feature_dim(),
                is_final_logits: l.is_final_logits(),
            })
            .collect(),
        crc32: format!("{crc:08x}"),
    }
}

/// Writes the dump and its provenance manifest.
pub fn write_dump_with_manifest(path: &Path, dump: &ActivationDump, model: &str, split: &str) -> Result<()> {
    write_dump(path, dump)?;
    write_json(&manifest_path(path), &manifest_for(dump, model, split))
}

pub fn read_bundle(path: &Path) -> Result<Vec<LinearProbe>> {
    let bytes = read_bytes(path)?;
    decode_bundle(&bytes).with_context(|| format!("decoding probe bundle {}", path.display()))
}

pub fn write_bundle(path: &Path, probes: &[LinearProbe]) -> Result<()> {
    write_atomic(path, &encode_bundle(probes))
}

/// Headerless CSV of probabilities, one example per row.
pub fn read_probs_csv(path: &Path) -> Result<Matrix<f64>> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .trim(csv::Trim::All)
        .from_path(path)
        .with_context(|| format!("reading {}", path.display()))?;
    let mut rows = Vec::new();
    for (i, record) in reader.records().enumerate() {
        let record = record.with_context(|| format!("parsing row {} of {}", i + 1, path.display()))?;
        let row = record
            .iter()
            .map(|v| v.parse::<f64>())
            .collect::<Result<Vec<_>, _>>()
            .with_context(|| format!("row {} of {} has a non-numeric entry", i + 1, path.display()))?;
        rows.push(row);
    }
    Matrix::from_rows(&rows).with_context(|| format!("probability rows in {}", path.display()))
}

pub fn write_probs_csv(path: &Path, probs: &Matrix<f64>) -> Result<()> {
    let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(Vec::new());
    for row in probs.iter_rows() {
        w.write_record(row.iter().map(|v| format!("{v:.17e}")))?;
    }
    write_atomic(path, &w.into_inner()?)
}
