use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::checkpoint::{encode, hex, read_checkpoint, restore};
use super::output::{csv_text, json_text};
use super::{
    write_atomic, CnnEvalConfig, CnnRecord, CnnTrainConfig, EvalSplit, ExperimentConfig, HarnessError, KnnConfig,
    KnnRecord, SynthCommandConfig,
};
use crate::data::{
    load_dataset, synth_generate, train_val_split, Label, LabeledDataset, SeededPrng, SkippedFile, SynthConfig,
    SynthManifest,
};
use crate::imaging::{extract_histogram_features, extract_raw_features, image_to_tensor, FeatureKind};
use crate::knn::{k_sweep, CvReport, FeatureMatrix};
use crate::nn::{
    build_fig11_network, build_fig11_network_with, build_reduced_network, count_params, evaluate, train_epoch,
    AdamConfig, DropoutRates, EvalStats, NetworkSpec, ParamCount, ParamState, Tensor,
};

pub const KNN_CSV_HEADER: [&str; 5] = ["feature", "metric", "k", "fold", "accuracy"];
pub const CNN_CSV_HEADER: [&str; 5] = ["epoch", "train_loss", "train_acc", "val_loss", "val_acc"];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetInfo {
    pub items: usize,
    /// `[uninfected, parasitized]`.
    pub class_counts: [usize; 2],
    pub skipped: Vec<SkippedFile>,
}

impl DatasetInfo {
    fn of(ds: &LabeledDataset) -> Self {
        Self { items: ds.len(), class_counts: ds.class_counts(), skipped: ds.skipped.clone() }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct KnnSummary {
    pub dataset: DatasetInfo,
    pub fold_digest: String,
    pub results: Vec<CvReport>,
    pub best_k: usize,
    pub best_mean_accuracy: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainSummary {
    pub dataset: DatasetInfo,
    pub train_size: usize,
    pub val_size: usize,
    pub network_digest: String,
    pub params: ParamCount,
    /// Metrics of the freshly initialized network, labelled epoch 0 like the first trained epoch.
    pub initial: CnnRecord,
    pub epochs: Vec<CnnRecord>,
}

impl TrainSummary {
    pub fn last(&self) -> Option<&CnnRecord> {
        self.epochs.last()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassCounts {
    pub label: Label,
    pub count: usize,
    pub correct: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub dataset: DatasetInfo,
    pub network_digest: String,
    pub split: EvalSplit,
    pub samples: usize,
    pub loss: f64,
    pub accuracy: f64,
    /// `confusion[actual][predicted]`, rows and columns ordered uninfected, parasitized.
    pub confusion: [[usize; 2]; 2],
    pub per_class: Vec<ClassCounts>,
}

/// Everything `cnn-eval` needs to rebuild a training run's network and split.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct Sidecar {
    config: ExperimentConfig,
    network: NetworkSpec,
    network_digest: String,
}

fn with_suffix(path: &Path, suffix: &str) -> PathBuf {
    let mut s: OsString = path.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

fn sidecar_path(checkpoint: &Path) -> PathBuf {
    with_suffix(checkpoint, ".json")
}

// ------------------------------------------------------------------- knn

pub fn cmd_knn(config: &KnnConfig) -> Result<KnnSummary, HarnessError> {
    let metric = config.distance_metric()?;
    if config.hist_bins == 0 {
        return Err(HarnessError::Config("histogram bins must be >= 1".into()));
    }
    let ds = load_dataset(&config.data)?;
    let features = match config.features {
        FeatureKind::RawPixel => ds.map_images(extract_raw_features)?,
        FeatureKind::HsvHistogram => ds.map_images(|img| extract_histogram_features(img, config.hist_bins))?,
    };
    let matrix = FeatureMatrix::from_features(&features)?;
    let labels = ds.labels();
    let sweep = k_sweep(&matrix, &labels, &config.k, config.folds, metric, config.seed)?;

    let mut records = Vec::with_capacity(sweep.rows.len() * config.folds);
    for row in &sweep.rows {
        for (fold, &accuracy) in row.fold_accuracies.iter().enumerate() {
            records.push(KnnRecord {
                feature: config.features.as_str().into(),
                metric: metric.name().into(),
                k: row.k,
                fold,
                accuracy,
            });
        }
    }
    let best = sweep.best().expect("at least one k").clone();
    let summary = KnnSummary {
        dataset: DatasetInfo::of(&ds),
        fold_digest: sweep.fold_digest.clone(),
        results: sweep.rows.clone(),
        best_k: best.k,
        best_mean_accuracy: best.mean_accuracy,
    };
    let header = ExperimentConfig::Knn(config.clone());
    write_atomic(&with_suffix(&config.out, ".csv"), &csv_text(&header, &KNN_CSV_HEADER, &records)?)?;
    write_atomic(&with_suffix(&config.out, ".json"), &json_text(&header, &summary))?;
    Ok(summary)
}

// ------------------------------------------------------------------- cnn

fn network_for(config: &CnnTrainConfig) -> NetworkSpec {
    if config.reduced {
        build_reduced_network(config.dropout)
    } else {
        build_fig11_network_with(config.dropout)
    }
}

fn load_tensors(ds: &LabeledDataset, side: usize) -> Result<(Tensor<f32>, Vec<usize>), HarnessError> {
    let images = ds.map_images(|img| image_to_tensor(img, side))?;
    let refs: Vec<&Tensor<f32>> = images.iter().collect();
    let inputs = Tensor::stack(&refs)?;
    Ok((inputs, ds.labels().iter().map(|l| l.index()).collect()))
}

fn record(epoch: usize, train: &EvalStats, val: &EvalStats) -> CnnRecord {
    CnnRecord { epoch, train_loss: train.loss, train_acc: train.accuracy, val_loss: val.loss, val_acc: val.accuracy }
}

fn pick(labels: &[usize], idx: &[usize]) -> Vec<usize> {
    idx.iter().map(|&i| labels[i]).collect()
}

/// Trains the configured network, rewriting the checkpoint and the curve
/// CSV after every epoch. Logged train metrics come from an eval-mode pass
/// over the training split at the end of each epoch.
pub fn cmd_cnn_train(config: &CnnTrainConfig) -> Result<TrainSummary, HarnessError> {
    if config.batch == 0 {
        return Err(HarnessError::Config("batch size must be >= 1".into()));
    }
    if !(config.lr >= 0.0 && config.lr.is_finite()) {
        return Err(HarnessError::Config(format!("learning rate must be finite and >= 0, got {}", config.lr)));
    }
    if config.dropout.0.iter().any(|r| !(0.0..1.0).contains(r)) {
        return Err(HarnessError::Config(format!("dropout rates must be in [0, 1), got {:?}", config.dropout.0)));
    }
    let spec = network_for(config);
    let params_count = count_params(&spec)?;
    let ds = load_dataset(&config.data)?;
    let labels_all = ds.labels();
    let (train_idx, val_idx) = train_val_split(&labels_all, config.val_frac, config.seed)?;
    let (inputs, labels) = load_tensors(&ds, spec.input_shape[0])?;
    let (train_x, train_y) = (inputs.gather(&train_idx), pick(&labels, &train_idx));
    let (val_x, val_y) = (inputs.gather(&val_idx), pick(&labels, &val_idx));
    drop(inputs);

    let header = ExperimentConfig::CnnTrain(config.clone());
    let digest = hex(&spec.digest());
    let sidecar = Sidecar { config: header.clone(), network: spec.clone(), network_digest: digest.clone() };
    write_atomic(&sidecar_path(&config.checkpoint), &json_text(&header, &sidecar))?;

    let mut params = ParamState::<f32>::init(&spec, &mut SeededPrng::derive(config.seed, 1))?;
    let mut rng = SeededPrng::derive(config.seed, 2);
    let adam = AdamConfig { lr: config.lr, ..AdamConfig::default() };
    let csv_path = with_suffix(&config.out, ".csv");

    let initial = record(
        0,
        &evaluate(&spec, &params, &train_x, &train_y, config.batch)?,
        &evaluate(&spec, &params, &val_x, &val_y, config.batch)?,
    );
    write_atomic(&config.checkpoint, &encode(&spec, &params))?;
    write_atomic(&csv_path, &csv_text::<CnnRecord>(&header, &CNN_CSV_HEADER, &[])?)?;

    let mut rows = Vec::with_capacity(config.epochs);
    for epoch in 0..config.epochs {
        train_epoch(&spec, &mut params, &train_x, &train_y, config.batch, &adam, &mut rng)?;
        let train = evaluate(&spec, &params, &train_x, &train_y, config.batch)?;
        let val = evaluate(&spec, &params, &val_x, &val_y, config.batch)?;
        rows.push(record(epoch, &train, &val));
        write_atomic(&config.checkpoint, &encode(&spec, &params))?;
        write_atomic(&csv_path, &csv_text(&header, &CNN_CSV_HEADER, &rows)?)?;
    }
    let summary = TrainSummary {
        dataset: DatasetInfo::of(&ds),
        train_size: train_idx.len(),
        val_size: val_idx.len(),
        network_digest: digest,
        params: params_count,
        initial,
        epochs: rows,
    };
    write_atomic(&with_suffix(&config.out, ".json"), &json_text(&header, &summary))?;
    Ok(summary)
}

fn resolve_network(checkpoint: &Path, digest: &str) -> Result<(NetworkSpec, Option<CnnTrainConfig>), HarnessError> {
    let side = sidecar_path(checkpoint);
    if side.exists() {
        let text = fs::read(&side).map_err(|source| HarnessError::Io { path: side.clone(), source })?;
        let car: Sidecar = serde_json::from_slice(&text)
            .map_err(|e| HarnessError::Config(format!("unreadable run description {}: {e}", side.display())))?;
        let train = match car.config {
            ExperimentConfig::CnnTrain(c) => Some(c),
            _ => None,
        };
        return Ok((car.network, train));
    }
    let presets = [build_fig11_network(), build_reduced_network(DropoutRates::default())];
    presets.into_iter().find(|s| hex(&s.digest()) == digest).map(|s| (s, None)).ok_or_else(|| {
        HarnessError::Config(format!(
            "no run description at {} and digest {digest} matches no built-in network",
            side.display()
        ))
    })
}

pub fn cmd_cnn_eval(config: &CnnEvalConfig) -> Result<EvalReport, HarnessError> {
    let file = read_checkpoint(&config.checkpoint)?;
    let (spec, train_cfg) = resolve_network(&config.checkpoint, &file.digest_hex())?;
    let params = restore(&spec, &file)?;
    let ds = load_dataset(&config.data)?;
    let indices: Vec<usize> = match config.split {
        EvalSplit::All => (0..ds.len()).collect(),
        EvalSplit::Train | EvalSplit::Val => {
            let t = train_cfg.as_ref().ok_or_else(|| {
                HarnessError::Config("train/val evaluation needs the run description written by cnn-train".into())
            })?;
            let (train, val) = train_val_split(&ds.labels(), t.val_frac, t.seed)?;
            if config.split == EvalSplit::Train {
                train
            } else {
                val
            }
        }
    };
    let (inputs, labels) = load_tensors(&ds, spec.input_shape[0])?;
    let (x, y) = (inputs.gather(&indices), pick(&labels, &indices));
    let batch = train_cfg.as_ref().map_or(32, |t| t.batch);
    let stats = evaluate(&spec, &params, &x, &y, batch)?;
    let per_class = Label::ALL
        .iter()
        .map(|&l| ClassCounts {
            label: l,
            count: stats.confusion[l.index()].iter().sum(),
            correct: stats.confusion[l.index()][l.index()],
        })
        .collect();
    let report = EvalReport {
        dataset: DatasetInfo::of(&ds),
        network_digest: file.digest_hex(),
        split: config.split,
        samples: y.len(),
        loss: stats.loss,
        accuracy: stats.accuracy,
        confusion: stats.confusion,
        per_class,
    };
    write_atomic(&config.out, &json_text(&ExperimentConfig::CnnEval(config.clone()), &report))?;
    Ok(report)
}

// ----------------------------------------------------------------- synth

pub fn cmd_synth(config: &SynthCommandConfig) -> Result<SynthManifest, HarnessError> {
    let cfg = SynthConfig { n: config.n, parasitized_fraction: config.fraction, side: config.side, seed: config.seed };
    Ok(synth_generate(&config.out, &cfg)?)
}
