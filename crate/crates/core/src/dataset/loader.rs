use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use super::{AugTag, DatasetManifest, Split, WavelengthSet};
use crate::cnn::{stack_samples, DataSource, Minibatch};
use crate::error::{QpiError, Result};
use crate::forward_model::CellClass;
use crate::imaging::{border_median, resize_bilinear, rotate_bilinear};
use crate::patch_extraction::{read_patch, RbcPatch};

/// The two binary experiments. Positive (target 1) is infected for
/// healthy-vs-infected and late trophozoite for early-vs-late.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Task {
    #[serde(rename = "hvi")]
    HealthyVsInfected,
    #[serde(rename = "evl")]
    EarlyVsLate,
}

impl Task {
    pub const ALL: [Task; 2] = [Task::HealthyVsInfected, Task::EarlyVsLate];

    pub fn code(self) -> &'static str {
        match self {
            Task::HealthyVsInfected => "hvi",
            Task::EarlyVsLate => "evl",
        }
    }

    pub fn title(self) -> &'static str {
        match self {
            Task::HealthyVsInfected => "healthy vs infected (positive: infected)",
            Task::EarlyVsLate => "early vs late trophozoite (positive: late)",
        }
    }

    /// Binary target of a class, or `None` if the task ignores it.
    pub fn target(self, class: CellClass) -> Option<f32> {
        match (self, class) {
            (Task::HealthyVsInfected, CellClass::Healthy) => Some(0.0),
            (Task::HealthyVsInfected, _) => Some(1.0),
            (Task::EarlyVsLate, CellClass::Healthy) => None,
            (Task::EarlyVsLate, CellClass::EarlyTrophozoite) => Some(0.0),
            (Task::EarlyVsLate, CellClass::LateTrophozoite) => Some(1.0),
        }
    }
}

impl fmt::Display for Task {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.code())
    }
}

impl FromStr for Task {
    type Err = QpiError;

    fn from_str(s: &str) -> Result<Self> {
        Task::ALL
            .into_iter()
            .find(|t| t.code() == s)
            .ok_or_else(|| QpiError::Domain(format!("unknown task {s:?} (expected hvi or evl)")))
    }
}

/// Per-input-channel mean and standard deviation, measured on Train.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Standardizer {
    pub side: usize,
    pub mean: [f64; 3],
    pub std: [f64; 3],
}

impl Standardizer {
    pub fn save(&self, path: &Path) -> Result<()> {
        let text = toml::to_string(self).map_err(|e| QpiError::Config(e.to_string()))?;
        fs::write(path, text).map_err(|e| QpiError::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| QpiError::io(path, e))?;
        toml::from_str(&text).map_err(|e| QpiError::format(path, e.to_string()))
    }
}

#[derive(Debug, Clone)]
struct Item {
    patch: usize,
    aug: AugTag,
    wavelengths: WavelengthSet,
    target: f32,
    id: String,
}

/// Serves standardised `(B, 3, side, side)` minibatches for one task. Only
/// the splits asked for are read from disk.
#[derive(Debug, Clone)]
pub struct BatchLoader {
    task: Task,
    patches: Vec<RbcPatch>,
    splits: BTreeMap<Split, Vec<Item>>,
    norm: Standardizer,
}

fn sample_id(path: &Path, aug: AugTag, w: WavelengthSet) -> String {
    let mut id = path
        .file_stem()
        .map(|s| s.to_string_lossy().replace(',', "_"))
        .unwrap_or_default();
    if w != WavelengthSet::Rgb {
        id.push('/');
        id.push_str(w.name());
    }
    if aug != AugTag::None {
        id.push('/');
        id.push_str(aug.name());
    }
    id
}

/// Rotated and upsampled planes of one sample, not yet standardised.
fn render(patch: &RbcPatch, aug: AugTag, w: WavelengthSet, side: usize) -> [Array2<f64>; 3] {
    w.planes().map(|channel| {
        let plane = patch.channels.get(channel);
        let rotated;
        let src = if aug == AugTag::None {
            plane
        } else {
            rotated = rotate_bilinear(plane, aug.degrees(), border_median(plane));
            &rotated
        };
        resize_bilinear(src, side, side)
    })
}

impl BatchLoader {
    /// Loads Train and Val and measures the standardisation on Train.
    pub fn for_training(manifest: &DatasetManifest, task: Task, side: usize) -> Result<Self> {
        let placeholder = Standardizer {
            side,
            mean: [0.0; 3],
            std: [1.0; 3],
        };
        let mut loader = Self::load(manifest, task, &[Split::Train, Split::Val], placeholder)?;
        loader.norm = loader.measure(side)?;
        Ok(loader)
    }

    /// Loads the given splits and applies an existing standardisation.
    pub fn with_standardizer(
        manifest: &DatasetManifest,
        task: Task,
        splits: &[Split],
        norm: Standardizer,
    ) -> Result<Self> {
        if norm.std.iter().any(|&s| !(s > 0.0 && s.is_finite())) || norm.side == 0 {
            return Err(QpiError::Contract("standardisation needs positive finite std and side".into()));
        }
        Self::load(manifest, task, splits, norm)
    }

    fn load(manifest: &DatasetManifest, task: Task, splits: &[Split], norm: Standardizer) -> Result<Self> {
        let mut patches = Vec::new();
        let mut index: HashMap<PathBuf, usize> = HashMap::new();
        let mut out: BTreeMap<Split, Vec<Item>> = splits.iter().map(|&s| (s, Vec::new())).collect();
        for e in &manifest.entries {
            let Some(items) = out.get_mut(&e.split) else {
                continue;
            };
            let Some(target) = task.target(e.label) else {
                continue;
            };
            let patch = match index.get(&e.patch_path) {
                Some(&i) => i,
                None => {
                    let p = read_patch(&e.patch_path)?;
                    p.validate()?;
                    patches.push(p);
                    index.insert(e.patch_path.clone(), patches.len() - 1);
                    patches.len() - 1
                }
            };
            items.push(Item {
                patch,
                aug: e.aug,
                wavelengths: e.wavelengths,
                target,
                id: sample_id(&e.patch_path, e.aug, e.wavelengths),
            });
        }
        Ok(Self {
            task,
            patches,
            splits: out,
            norm,
        })
    }

    fn measure(&self, side: usize) -> Result<Standardizer> {
        let items = self.items(Split::Train)?;
        if items.is_empty() {
            return Err(QpiError::EmptyInput("training split is empty".into()));
        }
        let mut sum = [0.0f64; 3];
        let mut sq = [0.0f64; 3];
        for it in items {
            let planes = render(&self.patches[it.patch], it.aug, it.wavelengths, side);
            for (k, plane) in planes.iter().enumerate() {
                for &v in plane {
                    sum[k] += v;
                    sq[k] += v * v;
                }
            }
        }
        let n = (items.len() * side * side) as f64;
        let mean = sum.map(|s| s / n);
        let std: [f64; 3] = std::array::from_fn(|k| {
            let var = (sq[k] / n - mean[k] * mean[k]).max(0.0);
            if var > 1e-24 {
                var.sqrt()
            } else {
                1.0
            }
        });
        Ok(Standardizer { side, mean, std })
    }

    fn items(&self, split: Split) -> Result<&[Item]> {
        self.splits
            .get(&split)
            .map(Vec::as_slice)
            .ok_or_else(|| QpiError::State(format!("{split} split was not loaded")))
    }

    pub fn task(&self) -> Task {
        self.task
    }

    pub fn standardizer(&self) -> Standardizer {
        self.norm
    }

    /// Samples in a split; zero if it was not loaded.
    pub fn len(&self, split: Split) -> usize {
        self.splits.get(&split).map_or(0, Vec::len)
    }

    pub fn sample_ids(&self, split: Split) -> Result<Vec<String>> {
        Ok(self.items(split)?.iter().map(|i| i.id.clone()).collect())
    }

    pub fn targets(&self, split: Split) -> Result<Vec<f32>> {
        Ok(self.items(split)?.iter().map(|i| i.target).collect())
    }

    /// Standardised samples at the given positions of a split.
    pub fn batch(&self, split: Split, indices: &[usize]) -> Result<Minibatch> {
        let items = self.items(split)?;
        let side = self.norm.side;
        let mut samples = Vec::with_capacity(indices.len());
        for &i in indices {
            let it = items
                .get(i)
                .ok_or_else(|| QpiError::Contract(format!("sample index {i} out of range for {split}")))?;
            let planes = render(&self.patches[it.patch], it.aug, it.wavelengths, side);
            let mut values = Vec::with_capacity(3 * side * side);
            for (k, plane) in planes.iter().enumerate() {
                let (m, s) = (self.norm.mean[k], self.norm.std[k]);
                values.extend(plane.iter().map(|&v| ((v - m) / s) as f32));
            }
            samples.push((values, it.target));
        }
        stack_samples(samples.iter().map(|(v, t)| (v.as_slice(), *t)), [3, side, side])
    }

    /// One pass over a split: shuffled by `epoch_seed` if given, else in
    /// manifest order.
    pub fn batches(
        &self,
        split: Split,
        batch_size: usize,
        epoch_seed: Option<u64>,
    ) -> Result<impl Iterator<Item = Result<Minibatch>> + '_> {
        if batch_size == 0 {
            return Err(QpiError::Contract("batch size must be positive".into()));
        }
        let n = self.items(split)?.len();
        let order: Vec<usize> = match epoch_seed {
            Some(seed) => shuffled(n, seed),
            None => (0..n).collect(),
        };
        let chunks: Vec<Vec<usize>> = order.chunks(batch_size).map(<[usize]>::to_vec).collect();
        Ok(chunks.into_iter().map(move |c| self.batch(split, &c)))
    }
}

fn shuffled(n: usize, seed: u64) -> Vec<usize> {
    use rand::seq::SliceRandom;
    use rand::SeedableRng;
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rand_chacha::ChaCha8Rng::seed_from_u64(seed));
    order
}

impl DataSource for BatchLoader {
    fn train_len(&self) -> usize {
        self.len(Split::Train)
    }

    fn val_len(&self) -> usize {
        self.len(Split::Val)
    }

    fn train_batch(&self, indices: &[usize]) -> Result<Minibatch> {
        self.batch(Split::Train, indices)
    }

    fn val_batch(&self, indices: &[usize]) -> Result<Minibatch> {
        self.batch(Split::Val, indices)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cnn::INPUT_SIDE;
    use crate::dataset::ManifestEntry;
    use crate::forward_model::PerChannel;
    use crate::imaging::BoundingBox;
    use crate::patch_extraction::{write_patch, PATCH_SIDE};

    fn write_fixture(dir: &Path, n: usize, split: Split, level: f64, out: &mut DatasetManifest) {
        for i in 0..n {
            let class = CellClass::ALL[i % 3];
            let v = level + 0.01 * i as f64;
            let plane = Array2::from_shape_fn((PATCH_SIDE, PATCH_SIDE), |(r, c)| v + 0.001 * (r + c) as f64);
            let patch = RbcPatch {
                channels: PerChannel::new(plane.clone(), plane.clone() * 2.0, plane * 3.0),
                label: Some(class),
                subject_id: format!("{split}{}", i % 2),
                bbox: BoundingBox {
                    row: 0,
                    col: 0,
                    height: PATCH_SIDE,
                    width: PATCH_SIDE,
                },
                normalized: true,
            };
            let path = dir.join(format!("{split}_{i:03}.qpa"));
            write_patch(&path, &patch).unwrap();
            out.entries.push(ManifestEntry {
                patch_path: path,
                label: class,
                subject_id: patch.subject_id.clone(),
                split,
                aug: AugTag::None,
                wavelengths: WavelengthSet::Rgb,
            });
        }
    }

    fn fixture(train: usize, val: usize, test: usize) -> (tempfile::TempDir, DatasetManifest) {
        let dir = tempfile::tempdir().unwrap();
        let mut m = DatasetManifest::default();
        write_fixture(dir.path(), train, Split::Train, 0.5, &mut m);
        write_fixture(dir.path(), val, Split::Val, 5.0, &mut m);
        write_fixture(dir.path(), test, Split::Test, -5.0, &mut m);
        (dir, m)
    }

    #[test]
    fn batch_sizes_and_shape() {
        let (_dir, m) = fixture(100, 6, 0);
        let loader = BatchLoader::for_training(&m, Task::HealthyVsInfected, INPUT_SIDE).unwrap();
        let sizes: Vec<usize> = loader
            .batches(Split::Train, 32, Some(1))
            .unwrap()
            .map(|b| b.unwrap().targets.len())
            .collect();
        assert_eq!(sizes, vec![32, 32, 32, 4]);
        let b = loader.batch(Split::Train, &[0, 1]).unwrap();
        assert_eq!(b.inputs.shape(), &[2, 3, INPUT_SIDE, INPUT_SIDE]);
        assert!(b.inputs.all_finite());
    }

    #[test]
    fn same_epoch_seed_same_batches() {
        let (_dir, m) = fixture(40, 6, 0);
        let loader = BatchLoader::for_training(&m, Task::HealthyVsInfected, 24).unwrap();
        let run = |seed| -> Vec<Vec<f32>> {
            loader
                .batches(Split::Train, 16, Some(seed))
                .unwrap()
                .map(|b| b.unwrap().inputs.into_data())
                .collect()
        };
        assert_eq!(run(3), run(3));
        assert_ne!(run(3), run(4));
        assert_eq!(loader.train_order(3), shuffled(40, 3));
    }

    #[test]
    fn standardisation_uses_train_pixels_only() {
        let (_dir, m) = fixture(12, 6, 3);
        let loader = BatchLoader::for_training(&m, Task::HealthyVsInfected, 30).unwrap();
        let norm = loader.standardizer();
        // Recompute from the Train patches alone.
        let mut sum = 0.0;
        let mut n = 0.0;
        for e in m.split(Split::Train) {
            let p = read_patch(&e.patch_path).unwrap();
            let up = resize_bilinear(&p.channels.green, 30, 30);
            sum += up.sum();
            n += up.len() as f64;
        }
        assert!((norm.mean[1] - sum / n).abs() < 1e-12);
        // Train inputs come out with zero mean and unit variance.
        let all: Vec<usize> = (0..12).collect();
        let b = loader.batch(Split::Train, &all).unwrap();
        let plane = 30 * 30;
        let mut s = 0.0f64;
        let mut q = 0.0f64;
        let mut k = 0.0f64;
        for (i, &v) in b.inputs.data().iter().enumerate() {
            if (i / plane) % 3 == 2 {
                s += v as f64;
                q += (v as f64).powi(2);
                k += 1.0;
            }
        }
        assert!((s / k).abs() < 1e-5);
        assert!((q / k - 1.0).abs() < 1e-4);
        // Val is far from Train, so standardised Val sits far from zero.
        let v = loader.batch(Split::Val, &[0]).unwrap();
        assert!(v.inputs.data()[0] > 10.0);
        assert_eq!(loader.len(Split::Test), 0);
    }

    #[test]
    fn early_vs_late_drops_healthy() {
        let (_dir, m) = fixture(30, 6, 0);
        let loader = BatchLoader::for_training(&m, Task::EarlyVsLate, 16).unwrap();
        assert_eq!(loader.len(Split::Train), 20);
        let t = loader.targets(Split::Train).unwrap();
        assert_eq!(t.iter().filter(|&&v| v == 1.0).count(), 10);
    }

    #[test]
    fn missing_patch_names_the_path() {
        let (dir, mut m) = fixture(6, 3, 0);
        m.entries[2].patch_path = dir.path().join("gone.qpa");
        let err = BatchLoader::for_training(&m, Task::HealthyVsInfected, 16).unwrap_err();
        assert!(err.to_string().contains("gone.qpa"), "{err}");
    }

    #[test]
    fn rotation_tags_render_rotated_planes() {
        let (_dir, mut m) = fixture(3, 3, 0);
        let mut e = m.entries[0].clone();
        e.aug = AugTag::Rot45;
        m.entries.push(e);
        let loader = BatchLoader::for_training(&m, Task::HealthyVsInfected, 60).unwrap();
        let ids = loader.sample_ids(Split::Train).unwrap();
        assert_eq!(ids[3], "train_000/rot45");
        let b = loader.batch(Split::Train, &[0, 3]).unwrap();
        let n = 3 * 60 * 60;
        assert_ne!(&b.inputs.data()[..n], &b.inputs.data()[n..]);
    }
}
