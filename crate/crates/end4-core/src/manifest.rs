//! Line-delimited JSON manifests describing benchmark samples.

use crate::benchgen::{MaskRegion, MaskSubset};
use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

#[derive(Clone, Copy, Debug, Serialize, Deserialize, PartialEq, Eq)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Test,
}

/// One image record. A fake record (label 1) always carries the mask region
/// and the prompt used to produce it; a real record carries neither.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct ManifestRecord {
    pub id: String,
    /// Path relative to the manifest file's directory.
    pub image_path: String,
    pub label: u8,
    pub subset: MaskSubset,
    pub mask: Option<MaskRegion>,
    pub prompt: Option<String>,
    pub generator: String,
    pub seed: u64,
    pub split: Split,
}

impl ManifestRecord {
    fn check(&self) -> std::result::Result<(), String> {
        if self.label > 1 {
            return Err(format!("label {} is not 0/1", self.label));
        }
        let fake = self.label == 1;
        if fake != self.mask.is_some() {
            return Err("label=1 must pair with a mask, label=0 with none".into());
        }
        if fake != self.prompt.is_some() {
            return Err("label=1 must pair with a prompt, label=0 with none".into());
        }
        if self.id.is_empty() || self.image_path.is_empty() {
            return Err("id and image_path must be non-empty".into());
        }
        if let Some(MaskRegion::Bbox { height, width, .. }) = &self.mask {
            if *height == 0 || *width == 0 {
                return Err("mask bbox must have positive extent".into());
            }
        }
        Ok(())
    }
}

/// Validate per-record invariants; returns the offending ids on failure.
pub fn validate_records(records: &[ManifestRecord]) -> Result<()> {
    let mut bad = Vec::new();
    let mut seen = std::collections::HashSet::new();
    for r in records {
        if r.check().is_err() || !seen.insert(&r.id) {
            bad.push(r.id.clone());
        }
    }
    if bad.is_empty() {
        Ok(())
    } else {
        Err(Error::ManifestInvalid { ids: bad })
    }
}

/// Enforce exact per-subset split sizes (for the full-benchmark layout).
pub fn validate_split_sizes(
    records: &[ManifestRecord],
    train_per_subset: usize,
    test_per_subset: usize,
) -> Result<()> {
    let mut counts: std::collections::BTreeMap<(MaskSubset, Split), usize> = Default::default();
    for r in records.iter().filter(|r| r.label == 1) {
        *counts.entry((r.subset, r.split)).or_default() += 1;
    }
    for subset in MaskSubset::ALL {
        let train = counts.get(&(subset, Split::Train)).copied().unwrap_or(0);
        let test = counts.get(&(subset, Split::Test)).copied().unwrap_or(0);
        if train != train_per_subset || test != test_per_subset {
            return Err(Error::Validation(format!(
                "subset {subset}: expected {train_per_subset}/{test_per_subset} fake records, found {train}/{test}"
            )));
        }
    }
    Ok(())
}

/// Write records as line-delimited JSON; validates first.
pub fn write_manifest(path: impl AsRef<Path>, records: &[ManifestRecord]) -> Result<()> {
    validate_records(records)?;
    let mut w = BufWriter::new(std::fs::File::create(path.as_ref())?);
    for r in records {
        serde_json::to_writer(&mut w, r)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

/// Read and validate a line-delimited JSON manifest.
pub fn read_manifest(path: impl AsRef<Path>) -> Result<Vec<ManifestRecord>> {
    let file = std::fs::File::open(path.as_ref())
        .map_err(|e| Error::Data(format!("cannot open manifest {}: {e}", path.as_ref().display())))?;
    let mut records = Vec::new();
    for (lineno, line) in BufReader::new(file).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let record: ManifestRecord = serde_json::from_str(&line).map_err(|e| {
            Error::Validation(format!(
                "{} line {}: {e}",
                path.as_ref().display(),
                lineno + 1
            ))
        })?;
        records.push(record);
    }
    validate_records(&records)?;
    Ok(records)
}

/// Resolve a record's image path against the manifest location.
pub fn resolve_image_path(manifest_path: &Path, record: &ManifestRecord) -> PathBuf {
    let rel = Path::new(&record.image_path);
    if rel.is_absolute() {
        rel.to_path_buf()
    } else {
        manifest_path
            .parent()
            .unwrap_or_else(|| Path::new("."))
            .join(rel)
    }
}
