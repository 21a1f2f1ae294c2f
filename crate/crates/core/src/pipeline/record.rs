use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{Layout, Stage};
use crate::config::PipelineConfig;
use crate::dataset::{DatasetManifest, Split};
use crate::error::{QpiError, Result};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FileHash {
    /// Relative to the artifact directory.
    pub path: String,
    pub sha256: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SubSeed {
    pub label: String,
    /// Hex, since TOML integers stop at 2⁶³ − 1.
    pub value: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageRecord {
    pub stage: String,
    /// Root seed of the run.
    pub seed: u64,
    #[serde(default)]
    pub sub_seeds: Vec<SubSeed>,
    /// Digest of the configuration sections the stage reads.
    pub params_sha256: String,
    #[serde(default)]
    pub inputs: Vec<FileHash>,
    #[serde(default)]
    pub outputs: Vec<FileHash>,
}

impl StageRecord {
    pub fn save(&self, path: &Path) -> Result<()> {
        let text = toml::to_string(self).map_err(|e| QpiError::Config(e.to_string()))?;
        fs::write(path, text).map_err(|e| QpiError::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| QpiError::io(path, e))?;
        toml::from_str(&text).map_err(|e| QpiError::format(path, e.to_string()))
    }

    /// Files missing, added or changed between two records' outputs.
    pub fn diff_outputs(&self, other: &StageRecord) -> Vec<String> {
        let mut out = Vec::new();
        for f in &self.outputs {
            match other.outputs.iter().find(|g| g.path == f.path) {
                None => out.push(format!("{} is no longer written", f.path)),
                Some(g) if g.sha256 != f.sha256 => out.push(format!("{} changed", f.path)),
                Some(_) => {}
            }
        }
        for g in &other.outputs {
            if !self.outputs.iter().any(|f| f.path == g.path) {
                out.push(format!("{} is new", g.path));
            }
        }
        out
    }
}

pub fn hash_file(path: &Path) -> Result<String> {
    let bytes = fs::read(path).map_err(|e| QpiError::io(path, e))?;
    Ok(Sha256::digest(&bytes).iter().map(|b| format!("{b:02x}")).collect())
}

pub(super) fn hash_all(layout: &Layout, paths: &[PathBuf]) -> Result<Vec<FileHash>> {
    paths
        .iter()
        .map(|p| {
            Ok(FileHash {
                path: layout.relative(p),
                sha256: hash_file(p)?,
            })
        })
        .collect()
}

/// Regular files directly inside `dir`, sorted; empty if it does not exist.
pub(super) fn list_files(dir: &Path) -> Result<Vec<PathBuf>> {
    if !dir.exists() {
        return Ok(Vec::new());
    }
    let mut out = Vec::new();
    for entry in fs::read_dir(dir).map_err(|e| QpiError::io(dir, e))? {
        let path = entry.map_err(|e| QpiError::io(dir, e))?.path();
        if path.is_file() {
            out.push(path);
        }
    }
    out.sort();
    Ok(out)
}

fn patches_of(layout: &Layout, splits: &[Split]) -> Result<Vec<PathBuf>> {
    let manifest = DatasetManifest::read(&layout.manifest())?;
    let set: BTreeSet<PathBuf> = manifest
        .entries
        .into_iter()
        .filter(|e| splits.contains(&e.split))
        .map(|e| e.patch_path)
        .collect();
    Ok(set.into_iter().collect())
}

pub(super) fn stage_inputs(layout: &Layout, config: &PipelineConfig, stage: Stage) -> Result<Vec<PathBuf>> {
    let tasks = &config.eval.tasks;
    let mut files = match stage {
        Stage::Synth => Vec::new(),
        Stage::Retrieve => list_files(&layout.interferograms())?,
        Stage::Extract => {
            let mut f = list_files(&layout.phases())?;
            f.extend(list_files(&layout.cells())?);
            f
        }
        Stage::Dataset => vec![layout.patch_index()],
        Stage::Train => {
            let mut f = vec![layout.manifest()];
            f.extend(patches_of(layout, &[Split::Train, Split::Val])?);
            f
        }
        Stage::Predict => {
            let mut f = vec![layout.manifest()];
            for &t in tasks {
                f.push(layout.checkpoint(t));
                f.push(layout.norm(t));
            }
            f.extend(patches_of(layout, &[Split::Test])?);
            f
        }
        Stage::Eval => tasks.iter().map(|&t| layout.scores(t)).collect(),
    };
    if matches!(stage, Stage::Retrieve | Stage::Extract) {
        files.insert(0, layout.synth_manifest());
    }
    Ok(files)
}

pub(super) fn stage_outputs(layout: &Layout, config: &PipelineConfig, stage: Stage) -> Result<Vec<PathBuf>> {
    Ok(match stage {
        Stage::Synth => {
            let mut f = vec![layout.synth_manifest()];
            f.extend(list_files(&layout.interferograms())?);
            f.extend(list_files(&layout.truth())?);
            f.extend(list_files(&layout.cells())?);
            f
        }
        Stage::Retrieve => list_files(&layout.phases())?,
        Stage::Extract => list_files(&layout.patches())?,
        Stage::Dataset => list_files(&layout.dataset())?,
        Stage::Train => {
            let mut f = Vec::new();
            for &t in &config.eval.tasks {
                let ckpt = layout.checkpoint(t);
                f.push(crate::cnn::sidecar_path(&ckpt));
                f.push(ckpt);
                f.push(layout.norm(t));
                f.push(layout.train_log(t));
            }
            f
        }
        Stage::Predict => list_files(&layout.predictions())?,
        Stage::Eval => list_files(&layout.reports())?,
    })
}

/// Digest of the configuration a stage depends on.
pub(super) fn params_hash(config: &PipelineConfig, stage: Stage) -> String {
    let c = config;
    let text = match stage {
        Stage::Synth => format!("{:?}", c.synth),
        Stage::Retrieve => format!("{:?}", c.retrieval),
        Stage::Extract => format!("{:?}", c.extraction),
        Stage::Dataset => format!("{:?}{:?}", c.synth.subjects, c.dataset),
        Stage::Train => format!("{:?}{:?}{:?}", c.dataset.input_side, c.train, c.eval.tasks),
        Stage::Predict => format!("{:?}{:?}", c.train.batch_size, c.eval.tasks),
        Stage::Eval => format!("{:?}{:?}", c.eval.threshold, c.eval.tasks),
    };
    Sha256::digest(text.as_bytes()).iter().map(|b| format!("{b:02x}")).collect()
}
