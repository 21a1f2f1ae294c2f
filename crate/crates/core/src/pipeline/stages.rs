use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use log::{info, warn};
use rayon::prelude::*;

use super::{plan_subjects, split_spec, Layout, RunOptions, SubjectPlan};
use crate::cnn::{predict, save_checkpoint, train, EpochLog, Model, TrainConfig};
use crate::config::PipelineConfig;
use crate::dataset::{
    read_patch_index, split_by_subject, write_patch_index, BatchLoader, DatasetManifest, PatchRecord, Split,
    Standardizer, Task,
};
use crate::error::{QpiError, Result};
use crate::forward_model::io::{
    read_cells, read_interferogram, read_phase_map, read_synth_manifest, write_cells, write_interferogram,
    write_phase_map, write_synth_manifest, SynthRecord,
};
use crate::forward_model::{make_subject, Channel, OverlapPolicy, PerChannel, SubjectSpec};
use crate::metrics::{read_scores, time_inference, write_roc_csv, write_scores, MetricsReport, Scored};
use crate::patch_extraction::{extract_cells, label_patches, write_patch};
use crate::phase_retrieval::retrieve;
use crate::seed;

/// Named sub-seeds a stage drew, as `(label, value)`.
pub type SubSeeds = Vec<(String, u64)>;

fn map_items<T, U, F>(items: &[T], opts: RunOptions, f: F) -> Result<Vec<U>>
where
    T: Sync,
    U: Send,
    F: Fn(&T) -> Result<U> + Sync + Send,
{
    if opts.deterministic {
        items.iter().map(f).collect()
    } else {
        items.par_iter().map(f).collect()
    }
}

fn reset_dir(dir: &Path) -> Result<()> {
    if dir.exists() {
        fs::remove_dir_all(dir).map_err(|e| QpiError::io(dir, e))?;
    }
    fs::create_dir_all(dir).map_err(|e| QpiError::io(dir, e))
}

fn channel_named(name: &str, path: &Path) -> Result<Channel> {
    Channel::ALL
        .into_iter()
        .find(|c| c.name() == name)
        .ok_or_else(|| QpiError::format(path, format!("unknown channel {name:?}")))
}

fn fov_id(subject: &str, fov: usize) -> String {
    format!("{subject}_f{fov:02}")
}

/// TOML integers are signed, and the training seed lands in the checkpoint
/// sidecar.
fn train_seed(root: u64, task: Task) -> u64 {
    seed::derive(root, &format!("train:{task}")) & (i64::MAX as u64)
}

pub fn synth_stage(config: &PipelineConfig, layout: &Layout, opts: RunOptions) -> Result<SubSeeds> {
    let s = &config.synth;
    for dir in [layout.interferograms(), layout.truth(), layout.cells()] {
        reset_dir(&dir)?;
    }
    let items: Vec<(SubjectPlan, usize)> = plan_subjects(s)
        .into_iter()
        .flat_map(|p| (0..s.fovs_per_subject).map(move |f| (p.clone(), f)))
        .collect();
    let per_fov = map_items(&items, opts, |(plan, fov)| {
        let label = format!("synth:{}:{fov}", plan.id);
        let seed_value = seed::derive(config.seed, &label);
        let spec = SubjectSpec {
            subject_id: plan.id.clone(),
            class_mix: vec![(plan.class, 1.0)],
            cell_count: s.cells_per_fov,
            fov: (s.fov[0], s.fov[1]),
            seed: seed_value,
            overlap: OverlapPolicy::Disjoint {
                min_gap_px: s.min_gap_px,
            },
            cell_radius_um: s.cell_radius_um(),
            red_peak_rad: (s.red_peak_rad[0], s.red_peak_rad[1]),
            fringe: s.fringe(),
        };
        let subject = make_subject(&spec)?;
        let id = fov_id(&plan.id, *fov);
        let cells = layout.cells().join(format!("{id}.tsv"));
        write_cells(&cells, &subject.cells)?;
        let mut records = Vec::with_capacity(3);
        for ch in Channel::ALL {
            let frame = layout.interferograms().join(format!("{id}_{}.qpi", ch.name()));
            let truth = layout.truth().join(format!("{id}_{}.qph", ch.name()));
            write_interferogram(&frame, subject.frames.get(ch))?;
            write_phase_map(&truth, subject.truth.get(ch))?;
            records.push(SynthRecord {
                file: layout.relative(&frame).into(),
                subject_id: plan.id.clone(),
                class: plan.class.name().to_string(),
                seed: seed_value,
                truth: layout.relative(&truth).into(),
                channel: ch.name().to_string(),
                cells: layout.relative(&cells).into(),
            });
        }
        Ok((records, (label, seed_value)))
    })?;
    let mut records = Vec::new();
    let mut seeds = Vec::new();
    for (r, s) in per_fov {
        records.extend(r);
        seeds.push(s);
    }
    write_synth_manifest(&layout.synth_manifest(), &records)?;
    info!("synthesised {} fields of view", items.len());
    Ok(seeds)
}

pub fn retrieve_stage(config: &PipelineConfig, layout: &Layout, opts: RunOptions) -> Result<SubSeeds> {
    let records = read_synth_manifest(&layout.synth_manifest())?;
    reset_dir(&layout.phases())?;
    let cfg = config.retrieval.to_config();
    let residues = map_items(&records, opts, |r| {
        let src = layout.root.join(&r.file);
        let frame = read_interferogram(&src)?;
        let out = retrieve(&frame, &cfg)?;
        let stem = src
            .file_stem()
            .ok_or_else(|| QpiError::format(&src, "interferogram path has no file name"))?;
        let mut name = stem.to_os_string();
        name.push(".qph");
        write_phase_map(&layout.phases().join(name), &out.phase)?;
        Ok(out.residue_count)
    })?;
    info!(
        "retrieved {} frames, {} residues in total",
        records.len(),
        residues.iter().sum::<usize>()
    );
    Ok(Vec::new())
}

fn phase_path(layout: &Layout, record: &SynthRecord) -> PathBuf {
    let name = Path::new(&record.file).with_extension("qph");
    layout.phases().join(name.file_name().unwrap_or_default())
}

pub fn extract_stage(config: &PipelineConfig, layout: &Layout, opts: RunOptions) -> Result<SubSeeds> {
    let manifest = layout.synth_manifest();
    let records = read_synth_manifest(&manifest)?;
    let mut fovs: BTreeMap<PathBuf, Vec<SynthRecord>> = BTreeMap::new();
    for r in records {
        fovs.entry(r.cells.clone()).or_default().push(r);
    }
    let fovs: Vec<(PathBuf, Vec<SynthRecord>)> = fovs.into_iter().collect();
    reset_dir(&layout.patches())?;
    let params = config.extraction.to_params();
    let per_fov = map_items(&fovs, opts, |(cells, recs)| {
        let mut maps: [Option<_>; 3] = [None, None, None];
        for r in recs {
            let ch = channel_named(&r.channel, &manifest)?;
            maps[ch.index()] = Some(read_phase_map(&phase_path(layout, r))?);
        }
        let [Some(red), Some(green), Some(blue)] = maps else {
            return Err(QpiError::format(&manifest, format!("{} lacks a channel", cells.display())));
        };
        let subject = &recs[0].subject_id;
        let mut ex = extract_cells(&PerChannel::new(red, green, blue), subject, &params)?;
        let annotations = read_cells(&layout.root.join(cells))?;
        let unmatched = label_patches(&mut ex, &annotations);
        if unmatched > 0 {
            warn!("{} patches of {} match no annotated cell", unmatched, cells.display());
        }
        let stem = Path::new(cells).file_stem().unwrap_or_default().to_string_lossy().into_owned();
        let mut out = Vec::new();
        for (k, patch) in ex.patches.iter().enumerate() {
            let path = layout.patches().join(format!("{stem}_{k:02}.qpa"));
            write_patch(&path, patch)?;
            if let Some(label) = patch.label {
                out.push(PatchRecord {
                    path,
                    label,
                    subject_id: subject.clone(),
                });
            }
        }
        Ok(out)
    })?;
    let index: Vec<PatchRecord> = per_fov.into_iter().flatten().collect();
    write_patch_index(&layout.patch_index(), &index)?;
    info!("extracted {} labelled patches from {} fields of view", index.len(), fovs.len());
    Ok(Vec::new())
}

pub fn dataset_stage(config: &PipelineConfig, layout: &Layout) -> Result<SubSeeds> {
    let records = read_patch_index(&layout.patch_index())?;
    let spec = split_spec(&plan_subjects(&config.synth));
    let seed_value = seed::derive(config.seed, "dataset:balance");
    let manifest = split_by_subject(&records, &spec, &config.dataset.build_options(seed_value))?;
    manifest.validate()?;
    reset_dir(&layout.dataset())?;
    manifest.write(&layout.manifest())?;
    spec.save(&layout.splits())?;
    info!(
        "manifest: {} train, {} val, {} test entries",
        manifest.count(Split::Train),
        manifest.count(Split::Val),
        manifest.count(Split::Test)
    );
    Ok(vec![("dataset:balance".into(), seed_value)])
}

pub fn write_train_log(path: &Path, log: &[EpochLog]) -> Result<()> {
    let mut out = String::from("epoch\tlr\tbatches\ttrain_loss\tval_loss\tval_accuracy\n");
    for l in log {
        writeln!(
            out,
            "{}\t{}\t{}\t{}\t{}\t{}",
            l.epoch, l.lr, l.batches, l.train_loss, l.val_loss, l.val_accuracy
        )
        .ok();
    }
    fs::write(path, out).map_err(|e| QpiError::io(path, e))
}

pub fn read_train_log(path: &Path) -> Result<Vec<EpochLog>> {
    let text = fs::read_to_string(path).map_err(|e| QpiError::io(path, e))?;
    let mut out = Vec::new();
    for line in text.lines().skip(1).filter(|l| !l.trim().is_empty()) {
        let f: Vec<&str> = line.split('\t').collect();
        let bad = || QpiError::format(path, format!("malformed log line {line:?}"));
        if f.len() != 6 {
            return Err(bad());
        }
        let num = |s: &str| s.parse::<f64>().map_err(|_| bad());
        let int = |s: &str| s.parse::<usize>().map_err(|_| bad());
        out.push(EpochLog {
            epoch: int(f[0])?,
            lr: num(f[1])?,
            batches: int(f[2])?,
            train_loss: num(f[3])?,
            val_loss: num(f[4])?,
            val_accuracy: num(f[5])?,
        });
    }
    Ok(out)
}

pub fn train_stage(config: &PipelineConfig, layout: &Layout) -> Result<SubSeeds> {
    let manifest = DatasetManifest::read(&layout.manifest())?;
    reset_dir(&layout.models())?;
    let mut seeds = Vec::new();
    for &task in &config.eval.tasks {
        let loader = BatchLoader::for_training(&manifest, task, config.dataset.input_side)?;
        let tc = TrainConfig {
            seed: train_seed(config.seed, task),
            ..config.train
        };
        seeds.push((format!("train:{task}"), tc.seed));
        let model = Model::<f32>::new(
            [3, config.dataset.input_side, config.dataset.input_side],
            crate::cnn::classifier_specs(),
            tc.init(),
            tc.seed,
        )?;
        info!(
            "training {task}: {} train, {} val samples",
            loader.len(Split::Train),
            loader.len(Split::Val)
        );
        let outcome = train(model, &loader, &tc)?;
        let ckpt = layout.checkpoint(task);
        save_checkpoint(&ckpt, &outcome.model, &tc)?;
        loader.standardizer().save(&layout.norm(task))?;
        write_train_log(&layout.train_log(task), &outcome.log)?;
        if let Some(reason) = outcome.diverged {
            return Err(QpiError::NumericFault {
                layer: format!("training {task}"),
                detail: format!("{reason}; last good state saved to {}", ckpt.display()),
            });
        }
    }
    Ok(seeds)
}

pub fn predict_stage(config: &PipelineConfig, layout: &Layout) -> Result<SubSeeds> {
    let manifest = DatasetManifest::read(&layout.manifest())?;
    reset_dir(&layout.predictions())?;
    for &task in &config.eval.tasks {
        let (mut model, _) = crate::cnn::load_checkpoint(&layout.checkpoint(task))?;
        let norm = Standardizer::load(&layout.norm(task))?;
        let loader = BatchLoader::with_standardizer(&manifest, task, &[Split::Test], norm)?;
        let ids = loader.sample_ids(Split::Test)?;
        let targets = loader.targets(Split::Test)?;
        let mut scores = Vec::with_capacity(ids.len());
        for batch in loader.batches(Split::Test, config.train.batch_size, None)? {
            scores.extend(predict(&mut model, batch?.inputs)?);
        }
        let scored: Vec<Scored> = ids
            .into_iter()
            .zip(targets)
            .zip(scores)
            .map(|((sample_id, t), score)| Scored {
                sample_id,
                score,
                truth: t >= 0.5,
            })
            .collect();
        write_scores(&layout.scores(task), &scored)?;
        info!("{task}: scored {} test samples", scored.len());

        let ev = &config.eval;
        if ev.timing_repeats > 0 && !scored.is_empty() {
            let n = ev.timing_images.clamp(1, scored.len());
            let images = loader.batch(Split::Test, &(0..n).collect::<Vec<_>>())?.inputs;
            let timing = time_inference(&mut model, &images, ev.timing_repeats)?;
            info!("{task}: {:.2} ms per image (median)", timing.median_ms);
            let dir = layout.timing();
            fs::create_dir_all(&dir).map_err(|e| QpiError::io(&dir, e))?;
            let path = dir.join(format!("{task}.toml"));
            let text = toml::to_string(&timing).map_err(|e| QpiError::Config(e.to_string()))?;
            fs::write(&path, text).map_err(|e| QpiError::io(&path, e))?;
        }
    }
    Ok(Vec::new())
}

pub fn eval_stage(config: &PipelineConfig, layout: &Layout) -> Result<SubSeeds> {
    reset_dir(&layout.reports())?;
    let mut summary = String::new();
    for &task in &config.eval.tasks {
        let scores = read_scores(&layout.scores(task))?;
        let (report, roc) = MetricsReport::compute(&scores, config.eval.threshold)?;
        writeln!(summary, "[{task}] {}, {} test samples", task.title(), scores.len()).ok();
        summary.push_str(&report.table());
        summary.push('\n');
        fs::write(layout.report_kv(task), report.key_values()).map_err(|e| QpiError::io(layout.report_kv(task), e))?;
        write_roc_csv(&layout.roc(task), &roc)?;
    }
    fs::write(layout.report(), &summary).map_err(|e| QpiError::io(layout.report(), e))?;
    Ok(Vec::new())
}
