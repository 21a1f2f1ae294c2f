use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};

use log::{info, warn};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{AugTag, DatasetManifest, ManifestEntry, Split, WavelengthSet};
use crate::error::{QpiError, Result};
use crate::forward_model::{CellClass, Channel};
use crate::patch_extraction::read_patch;
use crate::seed;

/// A labelled patch file before it is assigned to a split.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord)]
pub struct PatchRecord {
    pub path: PathBuf,
    pub label: CellClass,
    pub subject_id: String,
}

/// Every `*.qpa` file under `dir` (not recursive), sorted by name.
/// Unlabelled patches are skipped with a warning.
pub fn scan_patch_dir(dir: &Path) -> Result<Vec<PatchRecord>> {
    let mut paths = Vec::new();
    for entry in fs::read_dir(dir).map_err(|e| QpiError::io(dir, e))? {
        let path = entry.map_err(|e| QpiError::io(dir, e))?.path();
        if path.extension().is_some_and(|x| x == "qpa") {
            paths.push(path);
        }
    }
    paths.sort();
    let mut records = Vec::with_capacity(paths.len());
    let mut unlabeled = 0;
    for path in paths {
        let patch = read_patch(&path)?;
        match patch.label {
            Some(label) => records.push(PatchRecord {
                path,
                label,
                subject_id: patch.subject_id,
            }),
            None => unlabeled += 1,
        }
    }
    if unlabeled > 0 {
        warn!("skipped {unlabeled} unlabelled patches in {}", dir.display());
    }
    Ok(records)
}

/// Writes `file, label, subject` per labelled patch; file names are
/// relative to the index's directory.
pub fn write_patch_index(path: &Path, records: &[PatchRecord]) -> Result<()> {
    let base = path.parent().unwrap_or(Path::new(""));
    let mut out = String::from("file\tlabel\tsubject\n");
    for r in records {
        let p = r.path.strip_prefix(base).unwrap_or(&r.path);
        out.push_str(&format!("{}\t{}\t{}\n", p.display(), r.label, r.subject_id));
    }
    fs::write(path, out).map_err(|e| QpiError::io(path, e))
}

/// Reads an index written by [`write_patch_index`] without opening any patch.
pub fn read_patch_index(path: &Path) -> Result<Vec<PatchRecord>> {
    let text = fs::read_to_string(path).map_err(|e| QpiError::io(path, e))?;
    let base = path.parent().unwrap_or(Path::new(""));
    let mut records = Vec::new();
    for (n, line) in text.lines().enumerate().skip(1) {
        if line.trim().is_empty() {
            continue;
        }
        let f: Vec<&str> = line.split('\t').collect();
        if f.len() != 3 {
            return Err(QpiError::format(path, format!("line {}: expected 3 columns", n + 1)));
        }
        records.push(PatchRecord {
            path: base.join(f[0]),
            label: f[1]
                .parse()
                .map_err(|e| QpiError::format(path, format!("line {}: {e}", n + 1)))?,
            subject_id: f[2].to_string(),
        });
    }
    Ok(records)
}

/// Seeded subsample to exactly `per_class` records of every class. Output is
/// grouped by class and keeps the input order within a class.
pub fn balance_classes(records: &[PatchRecord], per_class: usize, seed: u64) -> Result<Vec<PatchRecord>> {
    let mut out = Vec::with_capacity(3 * per_class);
    for class in CellClass::ALL {
        let members: Vec<&PatchRecord> = records.iter().filter(|r| r.label == class).collect();
        if members.len() < per_class {
            return Err(QpiError::InsufficientData {
                class: format!("{} ({class})", class.index()),
                available: members.len(),
                required: per_class,
            });
        }
        let mut picks: Vec<usize> = (0..members.len()).collect();
        picks.shuffle(&mut ChaCha8Rng::seed_from_u64(seed::derive(seed, &format!("balance:{class}"))));
        picks.truncate(per_class);
        picks.sort_unstable();
        out.extend(picks.into_iter().map(|i| members[i].clone()));
    }
    Ok(out)
}

/// Subject ids of each split.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitSpec {
    #[serde(default)]
    pub train: Vec<String>,
    #[serde(default)]
    pub val: Vec<String>,
    #[serde(default)]
    pub test: Vec<String>,
}

impl SplitSpec {
    pub fn ids(&self, split: Split) -> &[String] {
        match split {
            Split::Train => &self.train,
            Split::Val => &self.val,
            Split::Test => &self.test,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let mut seen: BTreeMap<&str, Split> = BTreeMap::new();
        for split in Split::ALL {
            for id in self.ids(split) {
                if let Some(prev) = seen.insert(id, split) {
                    return Err(QpiError::Split(format!("subject {id} is listed in both {prev} and {split}")));
                }
            }
        }
        Ok(())
    }

    pub fn split_of(&self, subject: &str) -> Option<Split> {
        Split::ALL.into_iter().find(|&s| self.ids(s).iter().any(|id| id == subject))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| QpiError::io(path, e))?;
        let spec: Self = toml::from_str(&text).map_err(|e| QpiError::format(path, e.to_string()))?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = toml::to_string(self).map_err(|e| QpiError::Config(e.to_string()))?;
        fs::write(path, text).map_err(|e| QpiError::io(path, e))
    }
}

/// Number of subjects per class (healthy, early, late) in each split.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SubjectQuota {
    pub train: [usize; 3],
    pub val: [usize; 3],
    pub test: [usize; 3],
}

impl SubjectQuota {
    pub fn total(&self) -> [usize; 3] {
        std::array::from_fn(|c| self.train[c] + self.val[c] + self.test[c])
    }
}

/// Fixed subject groupings for an 8/15/13 subject cohort.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SplitPreset {
    /// Train 5/10/7, val 2/3/4, test 1/2/2, taken in subject-id order.
    Fixed,
    /// Train and val pooled as 7/13/11 with test 1/2/2; the val subjects
    /// (2/3/4) are drawn from the pool by seed.
    Pooled,
}

impl SplitPreset {
    pub fn quota(self) -> SubjectQuota {
        SubjectQuota {
            train: [5, 10, 7],
            val: [2, 3, 4],
            test: [1, 2, 2],
        }
    }
}

/// Assigns subjects to splits per class. A subject's class is the majority
/// label of its records; every class must have exactly the preset's total.
pub fn assign_subjects(records: &[PatchRecord], preset: SplitPreset, seed: u64) -> Result<SplitSpec> {
    let mut votes: BTreeMap<&str, [usize; 3]> = BTreeMap::new();
    for r in records {
        votes.entry(&r.subject_id).or_default()[r.label.index()] += 1;
    }
    let mut by_class: [Vec<String>; 3] = Default::default();
    for (id, v) in votes {
        let class = (0..3).max_by_key(|&c| (v[c], std::cmp::Reverse(c))).unwrap_or(0);
        by_class[class].push(id.to_string());
    }
    let quota = preset.quota();
    let mut spec = SplitSpec::default();
    for (c, mut ids) in by_class.into_iter().enumerate() {
        let class = CellClass::from_index(c).unwrap_or(CellClass::Healthy);
        if ids.len() != quota.total()[c] {
            return Err(QpiError::Split(format!(
                "preset needs {} {class} subjects, found {}",
                quota.total()[c],
                ids.len()
            )));
        }
        let test = ids.split_off(quota.train[c] + quota.val[c]);
        if preset == SplitPreset::Pooled {
            ids.shuffle(&mut ChaCha8Rng::seed_from_u64(seed::derive(seed, &format!("pool:{class}"))));
        }
        let val = ids.split_off(quota.train[c]);
        spec.train.extend(ids);
        spec.val.extend(val);
        spec.test.extend(test);
    }
    for ids in [&mut spec.train, &mut spec.val, &mut spec.test] {
        ids.sort();
    }
    Ok(spec)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BuildOptions {
    /// Patches per class across Train and Val, before augmentation.
    pub per_class: usize,
    pub augment_train: bool,
    pub augment_val: bool,
    /// One sample per wavelength instead of one three-channel sample.
    pub channels_as_samples: bool,
    pub seed: u64,
}

impl Default for BuildOptions {
    fn default() -> Self {
        Self {
            per_class: 600,
            augment_train: true,
            augment_val: false,
            channels_as_samples: false,
            seed: 0,
        }
    }
}

/// Train quota per class so that Train has `t` of every class and Val has
/// `per_class − t`.
fn train_quota(train: &[usize; 3], val: &[usize; 3], per_class: usize) -> Result<usize> {
    let lo = (0..3).map(|c| per_class.saturating_sub(val[c])).max().unwrap_or(0);
    let hi = (0..3).map(|c| train[c].min(per_class)).min().unwrap_or(0);
    if lo > hi {
        let c = (0..3).min_by_key(|&c| train[c]).unwrap_or(0);
        let class = CellClass::from_index(c).unwrap_or(CellClass::Healthy);
        return Err(QpiError::Split(format!(
            "train/val subjects cannot give {per_class} balanced {class} patches \
             (train offers {}, val offers {}; need a train share between {lo} and {hi})",
            train[c], val[c]
        )));
    }
    let t: usize = train.iter().sum();
    let v: usize = val.iter().sum();
    let natural = if t + v == 0 {
        0.0
    } else {
        per_class as f64 * t as f64 / (t + v) as f64
    };
    Ok((natural.round() as usize).clamp(lo, hi))
}

/// Assigns records to splits by subject, balances Train and Val to
/// `per_class` patches per class in total (equal class counts in each), and
/// expands augmentation and wavelength sets. Test keeps every record,
/// unaugmented.
pub fn split_by_subject(records: &[PatchRecord], spec: &SplitSpec, opts: &BuildOptions) -> Result<DatasetManifest> {
    spec.validate()?;
    let mut parts: BTreeMap<Split, Vec<PatchRecord>> = BTreeMap::new();
    for r in records {
        let split = spec
            .split_of(&r.subject_id)
            .ok_or_else(|| QpiError::Split(format!("subject {} is not assigned to a split", r.subject_id)))?;
        parts.entry(split).or_default().push(r.clone());
    }
    let pool = |s: Split| parts.get(&s).cloned().unwrap_or_default();
    let (train, val, test) = (pool(Split::Train), pool(Split::Val), pool(Split::Test));

    let mut tv = train.clone();
    tv.extend(val.iter().cloned());
    // Names the short class if the combined pool is too small.
    balance_classes(&tv, opts.per_class, opts.seed)?;
    let counts = |rs: &[PatchRecord]| -> [usize; 3] {
        let mut n = [0; 3];
        rs.iter().for_each(|r| n[r.label.index()] += 1);
        n
    };
    let t = train_quota(&counts(&train), &counts(&val), opts.per_class)?;
    let train = balance_classes(&train, t, seed::derive(opts.seed, "train"))?;
    let val = balance_classes(&val, opts.per_class - t, seed::derive(opts.seed, "val"))?;
    info!(
        "balanced {} per class: {t} train + {} val per class, {} test records",
        opts.per_class,
        opts.per_class - t,
        test.len()
    );

    let wavelengths: Vec<WavelengthSet> = if opts.channels_as_samples {
        Channel::ALL.into_iter().map(WavelengthSet::Single).collect()
    } else {
        vec![WavelengthSet::Rgb]
    };
    let mut entries = Vec::new();
    for (split, records, augment) in [
        (Split::Train, train, opts.augment_train),
        (Split::Val, val, opts.augment_val),
        (Split::Test, test, false),
    ] {
        let tags: &[AugTag] = if augment { &AugTag::ALL } else { &[AugTag::None] };
        for r in records {
            for &w in &wavelengths {
                for &aug in tags {
                    entries.push(ManifestEntry {
                        patch_path: r.path.clone(),
                        label: r.label,
                        subject_id: r.subject_id.clone(),
                        split,
                        aug,
                        wavelengths: w,
                    });
                }
            }
        }
    }
    let manifest = DatasetManifest { entries };
    manifest.validate()?;
    Ok(manifest)
}

/// Subjects shared between any two splits of a manifest.
pub fn leaked_subjects(manifest: &DatasetManifest) -> BTreeSet<String> {
    let mut home: BTreeMap<&str, BTreeSet<Split>> = BTreeMap::new();
    for e in &manifest.entries {
        home.entry(&e.subject_id).or_default().insert(e.split);
    }
    home.into_iter()
        .filter(|(_, s)| s.len() > 1)
        .map(|(id, _)| id.to_string())
        .collect()
}
