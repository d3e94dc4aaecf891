use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use super::HarnessError;
use crate::imaging::FeatureKind;
use crate::knn::DistanceMetric;
use crate::nn::DropoutRates;

/// Written into every result file so outputs identify the build that made them.
pub const ARTIFACT_VERSION: &str = concat!("cellgrade/", env!("CARGO_PKG_VERSION"));

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MetricName {
    Euclidean,
    Manhattan,
    Hamming,
    Minkowski,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct KnnConfig {
    pub data: PathBuf,
    pub features: FeatureKind,
    pub metric: MetricName,
    /// Minkowski order; ignored by the other metrics.
    pub p: f64,
    pub k: Vec<usize>,
    pub folds: usize,
    pub seed: u64,
    pub hist_bins: usize,
    pub out: PathBuf,
}

impl KnnConfig {
    pub fn distance_metric(&self) -> Result<DistanceMetric, HarnessError> {
        Ok(match self.metric {
            MetricName::Euclidean => DistanceMetric::Euclidean,
            MetricName::Manhattan => DistanceMetric::Manhattan,
            MetricName::Hamming => DistanceMetric::Hamming,
            MetricName::Minkowski => DistanceMetric::minkowski(self.p)?,
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CnnTrainConfig {
    pub data: PathBuf,
    pub reduced: bool,
    pub epochs: usize,
    pub batch: usize,
    pub lr: f64,
    pub seed: u64,
    pub val_frac: f64,
    pub dropout: DropoutRates,
    pub checkpoint: PathBuf,
    pub out: PathBuf,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EvalSplit {
    All,
    Train,
    Val,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CnnEvalConfig {
    pub checkpoint: PathBuf,
    pub data: PathBuf,
    /// `train`/`val` reproduce the split recorded next to the checkpoint.
    pub split: EvalSplit,
    pub out: PathBuf,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthCommandConfig {
    pub out: PathBuf,
    pub n: usize,
    pub fraction: f64,
    pub side: usize,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "command", rename_all = "kebab-case")]
pub enum ExperimentConfig {
    Knn(KnnConfig),
    CnnTrain(CnnTrainConfig),
    CnnEval(CnnEvalConfig),
    Synth(SynthCommandConfig),
}

/// Parses `"1,5,10"`, `"1-150"` or mixtures such as `"1-5,10"`.
pub fn parse_k_list(text: &str) -> Result<Vec<usize>, HarnessError> {
    let bad = |part: &str| HarnessError::Config(format!("bad k value {part:?} in {text:?}"));
    let mut out = Vec::new();
    for part in text.split(',').map(str::trim) {
        let parsed = match part.split_once('-') {
            Some((a, b)) => {
                let (a, b): (usize, usize) =
                    (a.trim().parse().map_err(|_| bad(part))?, b.trim().parse().map_err(|_| bad(part))?);
                if a > b {
                    return Err(bad(part));
                }
                (a..=b).collect()
            }
            None => vec![part.parse().map_err(|_| bad(part))?],
        };
        out.extend(parsed);
    }
    if out.contains(&0) {
        return Err(HarnessError::Config("k must be >= 1".into()));
    }
    out.sort_unstable();
    out.dedup();
    Ok(out)
}
