//! Balanced, augmented, subject-disjoint datasets and minibatches.

mod augment;
mod build;
mod loader;

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::fs;
use std::path::{Component, Path, PathBuf};
use std::str::FromStr;

use crate::error::{QpiError, Result};
use crate::forward_model::{CellClass, Channel};

pub use augment::{augment_rotations, rotate_patch};
pub use build::{
    assign_subjects, balance_classes, leaked_subjects, read_patch_index, scan_patch_dir, write_patch_index, split_by_subject, BuildOptions, PatchRecord,
    SplitPreset, SplitSpec, SubjectQuota,
};
pub use loader::{BatchLoader, Standardizer, Task};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];

    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Split {
    type Err = QpiError;

    fn from_str(s: &str) -> Result<Self> {
        Split::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| QpiError::Domain(format!("unknown split {s:?}")))
    }
}

/// Rotation applied when a patch is loaded.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum AugTag {
    None,
    Rot45,
    Rot135,
}

impl AugTag {
    pub const ALL: [AugTag; 3] = [AugTag::None, AugTag::Rot45, AugTag::Rot135];

    pub fn degrees(self) -> f64 {
        match self {
            AugTag::None => 0.0,
            AugTag::Rot45 => 45.0,
            AugTag::Rot135 => 135.0,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            AugTag::None => "none",
            AugTag::Rot45 => "rot45",
            AugTag::Rot135 => "rot135",
        }
    }
}

impl fmt::Display for AugTag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for AugTag {
    type Err = QpiError;

    fn from_str(s: &str) -> Result<Self> {
        AugTag::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| QpiError::Domain(format!("unknown augmentation tag {s:?}")))
    }
}

/// Which wavelengths feed a sample: all three as channels, or one
/// wavelength replicated into every input channel.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum WavelengthSet {
    Rgb,
    Single(Channel),
}

impl WavelengthSet {
    pub fn name(self) -> &'static str {
        match self {
            WavelengthSet::Rgb => "rgb",
            WavelengthSet::Single(c) => c.name(),
        }
    }

    /// Source channel for each of the three input planes.
    pub fn planes(self) -> [Channel; 3] {
        match self {
            WavelengthSet::Rgb => Channel::ALL,
            WavelengthSet::Single(c) => [c; 3],
        }
    }
}

impl fmt::Display for WavelengthSet {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for WavelengthSet {
    type Err = QpiError;

    fn from_str(s: &str) -> Result<Self> {
        if s == "rgb" {
            return Ok(WavelengthSet::Rgb);
        }
        Channel::ALL
            .into_iter()
            .find(|c| c.name() == s)
            .map(WavelengthSet::Single)
            .ok_or_else(|| QpiError::Domain(format!("unknown wavelength set {s:?}")))
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ManifestEntry {
    pub patch_path: PathBuf,
    pub label: CellClass,
    pub subject_id: String,
    pub split: Split,
    pub aug: AugTag,
    pub wavelengths: WavelengthSet,
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct DatasetManifest {
    pub entries: Vec<ManifestEntry>,
}

impl DatasetManifest {
    pub fn split(&self, split: Split) -> impl Iterator<Item = &ManifestEntry> {
        self.entries.iter().filter(move |e| e.split == split)
    }

    pub fn count(&self, split: Split) -> usize {
        self.split(split).count()
    }

    pub fn class_counts(&self, split: Split) -> BTreeMap<CellClass, usize> {
        let mut counts = BTreeMap::new();
        for e in self.split(split) {
            *counts.entry(e.label).or_insert(0) += 1;
        }
        counts
    }

    pub fn subjects(&self, split: Split) -> BTreeSet<&str> {
        self.split(split).map(|e| e.subject_id.as_str()).collect()
    }

    /// Checks subject disjointness, Train class balance and unaugmented Test.
    pub fn validate(&self) -> Result<()> {
        let mut home: BTreeMap<&str, Split> = BTreeMap::new();
        for e in &self.entries {
            match home.insert(&e.subject_id, e.split) {
                Some(prev) if prev != e.split => {
                    return Err(QpiError::Split(format!(
                        "subject {} appears in both {prev} and {}",
                        e.subject_id, e.split
                    )));
                }
                _ => {}
            }
            if e.split == Split::Test && e.aug != AugTag::None {
                return Err(QpiError::Split(format!(
                    "test entry {} carries augmentation {}",
                    e.patch_path.display(),
                    e.aug
                )));
            }
        }
        let train = self.class_counts(Split::Train);
        if train.values().collect::<BTreeSet<_>>().len() > 1 {
            return Err(QpiError::Split(format!("train classes are unbalanced: {train:?}")));
        }
        Ok(())
    }

    /// Writes `path, label, subject, split, aug, wavelengths` per line.
    /// Patch paths are stored relative to the manifest's directory when both
    /// are absolute or both relative, so a moved artifact tree still reads.
    pub fn write(&self, path: &Path) -> Result<()> {
        let base = path.parent().unwrap_or(Path::new(""));
        let mut out = String::new();
        for e in &self.entries {
            let p = pathdiff::diff_paths(&e.patch_path, base).unwrap_or_else(|| e.patch_path.clone());
            out.push_str(&format!(
                "{}\t{}\t{}\t{}\t{}\t{}\n",
                p.display(),
                e.label,
                e.subject_id,
                e.split,
                e.aug,
                e.wavelengths
            ));
        }
        fs::write(path, out).map_err(|e| QpiError::io(path, e))
    }

    /// Reads a manifest; relative patch paths resolve against its directory.
    /// A missing sixth column means `rgb`.
    pub fn read(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| QpiError::io(path, e))?;
        let base = path.parent().unwrap_or(Path::new(""));
        let mut entries = Vec::new();
        for (n, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let f: Vec<&str> = line.split('\t').collect();
            if !(5..=6).contains(&f.len()) {
                return Err(QpiError::format(
                    path,
                    format!("line {}: expected 5 or 6 columns, found {}", n + 1, f.len()),
                ));
            }
            let bad = |e: QpiError| QpiError::format(path, format!("line {}: {e}", n + 1));
            let p = PathBuf::from(f[0]);
            entries.push(ManifestEntry {
                patch_path: if p.is_absolute() { p } else { resolve(base, &p) },
                label: f[1].parse().map_err(bad)?,
                subject_id: f[2].to_string(),
                split: f[3].parse().map_err(bad)?,
                aug: f[4].parse().map_err(bad)?,
                wavelengths: match f.get(5) {
                    Some(w) => w.parse().map_err(bad)?,
                    None => WavelengthSet::Rgb,
                },
            });
        }
        Ok(Self { entries })
    }
}

/// `base/rel` with `.` and `..` folded away lexically.
fn resolve(base: &Path, rel: &Path) -> PathBuf {
    let mut out = base.to_path_buf();
    for c in rel.components() {
        match c {
            Component::CurDir => {}
            Component::ParentDir if out.file_name().is_some() => {
                out.pop();
            }
            c => out.push(c),
        }
    }
    out
}
