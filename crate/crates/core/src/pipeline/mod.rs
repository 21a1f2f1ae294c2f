//! End-to-end runs: synth → retrieve → extract → dataset → train → predict →
//! eval, each stage writing under one artifact directory and leaving a
//! record of what it read, what it wrote and which seed it used.

mod record;
mod stages;

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use log::info;

use crate::config::{validate_config, PipelineConfig, SynthSection};
use crate::dataset::{Split, SplitSpec, Task};
use crate::error::{QpiError, Result};
use crate::forward_model::CellClass;

pub use record::{hash_file, FileHash, StageRecord, SubSeed};
pub use stages::{read_train_log, write_train_log};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Stage {
    Synth,
    Retrieve,
    Extract,
    Dataset,
    Train,
    Predict,
    Eval,
}

impl Stage {
    pub const ALL: [Stage; 7] = [
        Stage::Synth,
        Stage::Retrieve,
        Stage::Extract,
        Stage::Dataset,
        Stage::Train,
        Stage::Predict,
        Stage::Eval,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Stage::Synth => "synth",
            Stage::Retrieve => "retrieve",
            Stage::Extract => "extract",
            Stage::Dataset => "dataset",
            Stage::Train => "train",
            Stage::Predict => "predict",
            Stage::Eval => "eval",
        }
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Stage {
    type Err = QpiError;

    fn from_str(s: &str) -> Result<Self> {
        Stage::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| QpiError::Domain(format!("unknown stage {s:?}")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct RunOptions {
    /// Sequential loops everywhere, so every reduction has a fixed order.
    pub deterministic: bool,
}

/// File locations inside an artifact directory.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Layout {
    pub root: PathBuf,
}

impl Layout {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }

    pub fn config(&self) -> PathBuf {
        self.root.join("config.toml")
    }
    pub fn interferograms(&self) -> PathBuf {
        self.root.join("interferograms")
    }
    pub fn truth(&self) -> PathBuf {
        self.root.join("truth")
    }
    pub fn cells(&self) -> PathBuf {
        self.root.join("cells")
    }
    pub fn synth_manifest(&self) -> PathBuf {
        self.root.join("synth.tsv")
    }
    pub fn phases(&self) -> PathBuf {
        self.root.join("phases")
    }
    pub fn patches(&self) -> PathBuf {
        self.root.join("patches")
    }
    pub fn patch_index(&self) -> PathBuf {
        self.patches().join("index.tsv")
    }
    pub fn dataset(&self) -> PathBuf {
        self.root.join("dataset")
    }
    pub fn manifest(&self) -> PathBuf {
        self.dataset().join("manifest.tsv")
    }
    pub fn splits(&self) -> PathBuf {
        self.dataset().join("splits.toml")
    }
    pub fn models(&self) -> PathBuf {
        self.root.join("models")
    }
    pub fn checkpoint(&self, task: Task) -> PathBuf {
        self.models().join(format!("{task}.ckpt"))
    }
    /// Train-split standardisation saved beside a checkpoint.
    pub fn norm(&self, task: Task) -> PathBuf {
        self.models().join(format!("{task}.ckpt.norm.toml"))
    }
    pub fn train_log(&self, task: Task) -> PathBuf {
        self.models().join(format!("{task}.log.tsv"))
    }
    pub fn predictions(&self) -> PathBuf {
        self.root.join("predictions")
    }
    pub fn scores(&self, task: Task) -> PathBuf {
        self.predictions().join(format!("{task}.scores.csv"))
    }
    pub fn reports(&self) -> PathBuf {
        self.root.join("reports")
    }
    pub fn report(&self) -> PathBuf {
        self.reports().join("metrics.txt")
    }
    pub fn report_kv(&self, task: Task) -> PathBuf {
        self.reports().join(format!("{task}.kv"))
    }
    pub fn roc(&self, task: Task) -> PathBuf {
        self.reports().join(format!("{task}.roc.csv"))
    }
    pub fn stages(&self) -> PathBuf {
        self.root.join("stages")
    }
    pub fn stage_record(&self, stage: Stage) -> PathBuf {
        self.stages().join(format!("{stage}.toml"))
    }
    /// Wall-clock measurements; never part of a stage record.
    pub fn timing(&self) -> PathBuf {
        self.root.join("timing")
    }

    /// Path relative to the root, with `/` separators, for records.
    pub fn relative(&self, path: &Path) -> String {
        let rel = path.strip_prefix(&self.root).unwrap_or(path);
        rel.components()
            .map(|c| c.as_os_str().to_string_lossy())
            .collect::<Vec<_>>()
            .join("/")
    }
}

/// One synthetic subject and the split it belongs to.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SubjectPlan {
    pub id: String,
    pub class: CellClass,
    pub split: Split,
}

fn class_letter(class: CellClass) -> char {
    match class {
        CellClass::Healthy => 'h',
        CellClass::EarlyTrophozoite => 'e',
        CellClass::LateTrophozoite => 'l',
    }
}

/// Subjects `h00, h01, …, e00, …, l00, …`; within a class the first ids go to
/// Train, then Val, then Test.
pub fn plan_subjects(synth: &SynthSection) -> Vec<SubjectPlan> {
    let s = &synth.subjects;
    let mut out = Vec::new();
    for class in CellClass::ALL {
        let c = class.index();
        let splits = [(Split::Train, s.train[c]), (Split::Val, s.val[c]), (Split::Test, s.test[c])];
        let mut k = 0;
        for (split, n) in splits {
            for _ in 0..n {
                out.push(SubjectPlan {
                    id: format!("{}{k:02}", class_letter(class)),
                    class,
                    split,
                });
                k += 1;
            }
        }
    }
    out
}

pub fn split_spec(plan: &[SubjectPlan]) -> SplitSpec {
    let ids = |split: Split| plan.iter().filter(|p| p.split == split).map(|p| p.id.clone()).collect();
    SplitSpec {
        train: ids(Split::Train),
        val: ids(Split::Val),
        test: ids(Split::Test),
    }
}

/// Runs one stage and writes its record. The stage's previous outputs are
/// replaced.
pub fn run_stage(config: &PipelineConfig, out: &Path, stage: Stage, opts: RunOptions) -> Result<StageRecord> {
    let layout = Layout::new(out);
    crate::audit::record_stage(out, stage.name());
    info!("stage {stage} in {}", out.display());
    let inputs = record::stage_inputs(&layout, config, stage)?;
    let input_hashes = record::hash_all(&layout, &inputs)?;
    let sub_seeds = match stage {
        Stage::Synth => stages::synth_stage(config, &layout, opts)?,
        Stage::Retrieve => stages::retrieve_stage(config, &layout, opts)?,
        Stage::Extract => stages::extract_stage(config, &layout, opts)?,
        Stage::Dataset => stages::dataset_stage(config, &layout)?,
        Stage::Train => stages::train_stage(config, &layout)?,
        Stage::Predict => stages::predict_stage(config, &layout)?,
        Stage::Eval => stages::eval_stage(config, &layout)?,
    };
    let outputs = record::stage_outputs(&layout, config, stage)?;
    let rec = StageRecord {
        stage: stage.name().to_string(),
        seed: config.seed,
        sub_seeds: sub_seeds
            .into_iter()
            .map(|(label, value)| SubSeed {
                label,
                value: format!("{value:016x}"),
            })
            .collect(),
        params_sha256: record::params_hash(config, stage),
        inputs: input_hashes,
        outputs: record::hash_all(&layout, &outputs)?,
    };
    fs::create_dir_all(layout.stages()).map_err(|e| QpiError::io(layout.stages(), e))?;
    rec.save(&layout.stage_record(stage))?;
    Ok(rec)
}

/// Validates the configuration, then runs every stage in order. The first
/// failing stage stops the run; its error names the stage.
pub fn run_pipeline(config: &PipelineConfig, out: &Path, opts: RunOptions) -> Result<Vec<StageRecord>> {
    let violations = validate_config(config);
    if !violations.is_empty() {
        return Err(QpiError::Config(violations.join("; ")));
    }
    fs::create_dir_all(out).map_err(|e| QpiError::io(out, e))?;
    let layout = Layout::new(out);
    fs::write(layout.config(), config.to_toml()?).map_err(|e| QpiError::io(layout.config(), e))?;
    let mut records = Vec::with_capacity(Stage::ALL.len());
    for stage in Stage::ALL {
        let rec = run_stage(config, out, stage, opts).map_err(|e| QpiError::Stage {
            stage: stage.name().to_string(),
            source: Box::new(e),
        })?;
        records.push(rec);
    }
    Ok(records)
}

/// Re-runs a stage whose record exists and compares its outputs with the
/// recorded ones. Returns one message per difference; an input that changed
/// since the record was written is an error.
pub fn verify_stage(config: &PipelineConfig, out: &Path, stage: Stage, opts: RunOptions) -> Result<Vec<String>> {
    let layout = Layout::new(out);
    let before = StageRecord::load(&layout.stage_record(stage))?;
    let now = record::hash_all(
        &layout,
        &before.inputs.iter().map(|f| out.join(&f.path)).collect::<Vec<_>>(),
    )?;
    if now != before.inputs {
        return Err(QpiError::Contract(format!(
            "inputs of stage {stage} changed since it was recorded"
        )));
    }
    if record::params_hash(config, stage) != before.params_sha256 || config.seed != before.seed {
        return Err(QpiError::Contract(format!(
            "configuration of stage {stage} differs from the recorded one"
        )));
    }
    let after = run_stage(config, out, stage, opts)?;
    Ok(before.diff_outputs(&after))
}
