//! Dataset ingestion, stratified partitioning, batching and the synthetic
//! cell-image generator.

mod prng;
mod synth;

use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::imaging::{decode_image, ImagingError, PixelImage};

pub use prng::{mix64, SeededPrng};
pub use synth::{synth_generate, SynthConfig, SynthManifest, GENERATOR_VERSION};

#[derive(Debug, Error)]
pub enum DataError {
    #[error("dataset layout error: {0}")]
    Layout(String),
    #[error("dataset under {0} contains no readable images")]
    Empty(PathBuf),
    #[error("configuration error: {0}")]
    Config(String),
    #[error("I/O error on {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{path}: {source}")]
    Image { path: PathBuf, source: ImagingError },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Label {
    Uninfected = 0,
    Parasitized = 1,
}

impl Label {
    pub const ALL: [Label; 2] = [Label::Uninfected, Label::Parasitized];

    #[inline]
    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<Label> {
        match i {
            0 => Some(Label::Uninfected),
            1 => Some(Label::Parasitized),
            _ => None,
        }
    }

    /// Directory name used by the corpus layout.
    pub fn dir_name(self) -> &'static str {
        match self {
            Label::Uninfected => "Uninfected",
            Label::Parasitized => "Parasitized",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DatasetItem {
    /// Path relative to the dataset root, `/`-separated.
    pub id: String,
    pub path: PathBuf,
    pub label: Label,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SkippedFile {
    pub path: String,
    pub reason: String,
}

#[derive(Clone, Debug, Default)]
pub struct LabeledDataset {
    pub items: Vec<DatasetItem>,
    pub skipped: Vec<SkippedFile>,
}

impl LabeledDataset {
    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn labels(&self) -> Vec<Label> {
        self.items.iter().map(|i| i.label).collect()
    }

    /// `[uninfected, parasitized]`.
    pub fn class_counts(&self) -> [usize; 2] {
        let mut c = [0; 2];
        for item in &self.items {
            c[item.label.index()] += 1;
        }
        c
    }

    pub fn subset(&self, indices: &[usize]) -> LabeledDataset {
        LabeledDataset {
            items: indices.iter().map(|&i| self.items[i].clone()).collect(),
            skipped: self.skipped.clone(),
        }
    }

    pub fn decode(&self, index: usize) -> Result<PixelImage, DataError> {
        read_image(&self.items[index].path)
    }

    /// Decodes every image in parallel and maps it through `f`, preserving
    /// item order.
    pub fn map_images<R, F>(&self, f: F) -> Result<Vec<R>, DataError>
    where
        R: Send,
        F: Fn(&PixelImage) -> R + Sync,
    {
        self.items.par_iter().map(|item| read_image(&item.path).map(|img| f(&img))).collect()
    }
}

fn read_image(path: &Path) -> Result<PixelImage, DataError> {
    let bytes = fs::read(path).map_err(|source| DataError::Io { path: path.to_owned(), source })?;
    decode_image(&bytes).map_err(|source| DataError::Image { path: path.to_owned(), source })
}

fn is_png(path: &Path) -> bool {
    path.extension().and_then(|e| e.to_str()).is_some_and(|e| e.eq_ignore_ascii_case("png"))
}

/// Enumerates `Parasitized/` and `Uninfected/` under `root`. Files that fail
/// to decode are recorded in `skipped` and left out.
pub fn load_dataset(root: &Path) -> Result<LabeledDataset, DataError> {
    let mut candidates = Vec::new();
    for label in Label::ALL {
        let dir = root.join(label.dir_name());
        if !dir.is_dir() {
            return Err(DataError::Layout(format!("missing subdirectory {}", dir.display())));
        }
        let entries = fs::read_dir(&dir).map_err(|source| DataError::Io { path: dir.clone(), source })?;
        for entry in entries {
            let entry = entry.map_err(|source| DataError::Io { path: dir.clone(), source })?;
            let path = entry.path();
            if path.is_file() && is_png(&path) {
                let name = entry.file_name().to_string_lossy().into_owned();
                candidates.push(DatasetItem { id: format!("{}/{name}", label.dir_name()), path, label });
            }
        }
    }
    candidates.sort_by(|a, b| a.id.cmp(&b.id));

    let checks: Vec<Option<String>> =
        candidates.par_iter().map(|item| read_image(&item.path).err().map(|e| e.to_string())).collect();
    let mut dataset = LabeledDataset::default();
    for (item, failure) in candidates.into_iter().zip(checks) {
        match failure {
            None => dataset.items.push(item),
            Some(reason) => dataset.skipped.push(SkippedFile { path: item.id, reason }),
        }
    }
    if dataset.items.is_empty() {
        return Err(DataError::Empty(root.to_owned()));
    }
    Ok(dataset)
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FoldAssignment {
    pub folds: usize,
    /// Fold index of every item.
    pub assignment: Vec<usize>,
    pub seed: u64,
}

impl FoldAssignment {
    /// `(training rows, held-out rows)` for one fold, both ascending.
    pub fn split(&self, fold: usize) -> (Vec<usize>, Vec<usize>) {
        (0..self.assignment.len()).partition(|&i| self.assignment[i] != fold)
    }

    pub fn fold_sizes(&self) -> Vec<usize> {
        let mut sizes = vec![0; self.folds];
        for &f in &self.assignment {
            sizes[f] += 1;
        }
        sizes
    }

    /// Short hex digest identifying the partition.
    pub fn digest(&self) -> String {
        let mut h = Sha256::new();
        h.update((self.folds as u64).to_le_bytes());
        for &f in &self.assignment {
            h.update((f as u32).to_le_bytes());
        }
        h.finalize().iter().take(8).map(|b| format!("{b:02x}")).collect()
    }
}

fn class_indices(labels: &[Label]) -> [Vec<usize>; 2] {
    let mut out = [Vec::new(), Vec::new()];
    for (i, l) in labels.iter().enumerate() {
        out[l.index()].push(i);
    }
    out
}

/// Per-class seeded shuffle followed by round-robin dealing. The second
/// class continues the deal where the first stopped so total fold sizes
/// also differ by at most one.
pub fn stratified_folds(labels: &[Label], folds: usize, seed: u64) -> Result<FoldAssignment, DataError> {
    if folds < 2 {
        return Err(DataError::Config(format!("need at least 2 folds, got {folds}")));
    }
    let mut per_class = class_indices(labels);
    for (label, members) in Label::ALL.iter().zip(&per_class) {
        if members.len() < folds {
            return Err(DataError::Config(format!(
                "class {label:?} has {} samples, fewer than {folds} folds",
                members.len()
            )));
        }
    }
    let mut rng = SeededPrng::new(seed);
    let mut assignment = vec![0; labels.len()];
    let mut next = 0;
    for members in per_class.iter_mut() {
        rng.shuffle(members);
        for &i in members.iter() {
            assignment[i] = next % folds;
            next += 1;
        }
    }
    Ok(FoldAssignment { folds, assignment, seed })
}

/// Stratified seeded split into `(train, validation)` index lists, both
/// ascending. Each class contributes `round(n_class * val_fraction)`
/// samples to validation.
pub fn train_val_split(labels: &[Label], val_fraction: f64, seed: u64) -> Result<(Vec<usize>, Vec<usize>), DataError> {
    if !(val_fraction > 0.0 && val_fraction < 1.0) {
        return Err(DataError::Config(format!("validation fraction must be in (0, 1), got {val_fraction}")));
    }
    let mut rng = SeededPrng::new(seed);
    let (mut train, mut val) = (Vec::new(), Vec::new());
    for mut members in class_indices(labels) {
        rng.shuffle(&mut members);
        let n_val = (members.len() as f64 * val_fraction).round() as usize;
        val.extend_from_slice(&members[..n_val]);
        train.extend_from_slice(&members[n_val..]);
    }
    if train.is_empty() || val.is_empty() {
        return Err(DataError::Config(format!(
            "split of {} samples at fraction {val_fraction} leaves an empty side",
            labels.len()
        )));
    }
    train.sort_unstable();
    val.sort_unstable();
    Ok((train, val))
}

/// Index batches covering `0..n` exactly once; the last batch may be short.
pub fn batch_iter(n: usize, batch_size: usize, shuffle: bool, seed: u64) -> Vec<Vec<usize>> {
    assert!(batch_size >= 1, "batch size must be >= 1");
    let mut order: Vec<usize> = (0..n).collect();
    if shuffle {
        SeededPrng::new(seed).shuffle(&mut order);
    }
    order.chunks(batch_size).map(<[usize]>::to_vec).collect()
}
