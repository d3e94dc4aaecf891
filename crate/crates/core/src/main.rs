use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use cellgrade::harness::{
    cmd_cnn_eval, cmd_cnn_train, cmd_knn, cmd_synth, parse_k_list, CnnEvalConfig, CnnTrainConfig, EvalSplit,
    HarnessError, KnnConfig, MetricName, SynthCommandConfig,
};
use cellgrade::imaging::{FeatureKind, DEFAULT_HIST_BINS};
use cellgrade::nn::DropoutRates;

#[derive(Parser)]
#[command(name = "cellgrade", version, about = "Blood-smear cell classification experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum Features {
    Raw,
    Hist,
}

#[derive(Clone, Copy, ValueEnum)]
enum Metric {
    Euclidean,
    Manhattan,
    Hamming,
    Minkowski,
}

#[derive(Clone, Copy, ValueEnum)]
enum Split {
    All,
    Train,
    Val,
}

#[derive(Subcommand)]
enum Command {
    /// Cross-validated kNN over raw-pixel or HSV-histogram features.
    Knn {
        #[arg(long)]
        data: PathBuf,
        #[arg(long, value_enum, default_value = "hist")]
        features: Features,
        #[arg(long, value_enum, default_value = "euclidean")]
        metric: Metric,
        /// Minkowski order.
        #[arg(long, default_value_t = 2.0)]
        p: f64,
        /// Comma-separated k values and ranges, e.g. `1,5,10` or `1-150`.
        #[arg(long, default_value = "1-150")]
        k: String,
        #[arg(long, default_value_t = 4)]
        folds: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = DEFAULT_HIST_BINS)]
        bins: usize,
        /// Output prefix; writes PREFIX.csv and PREFIX.json.
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the CNN and log per-epoch curves.
    CnnTrain {
        #[arg(long)]
        data: PathBuf,
        /// Use the 32x32 desk-scale network instead of the full one.
        #[arg(long)]
        reduced: bool,
        #[arg(long, default_value_t = 10)]
        epochs: usize,
        #[arg(long, default_value_t = 32)]
        batch: usize,
        #[arg(long, default_value_t = 1e-3)]
        lr: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 0.2)]
        val_frac: f64,
        /// Four dropout rates, comma-separated, in network order.
        #[arg(long, default_value = "0.25,0.25,0.25,0.5")]
        dropout: String,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Output prefix; writes PREFIX.csv and PREFIX.json.
        #[arg(long)]
        out: PathBuf,
    },
    /// Evaluate a checkpoint and write accuracy and confusion counts as JSON.
    CnnEval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, value_enum, default_value = "all")]
        split: Split,
        #[arg(long)]
        out: PathBuf,
    },
    /// Generate a synthetic cell-image dataset.
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 200)]
        n: usize,
        #[arg(long, default_value_t = 0.5)]
        fraction: f64,
        #[arg(long, default_value_t = 64)]
        side: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

fn parse_rates(text: &str) -> Result<DropoutRates, HarnessError> {
    let vals: Vec<f64> = text
        .split(',')
        .map(|s| s.trim().parse::<f64>())
        .collect::<Result<_, _>>()
        .map_err(|e| HarnessError::Config(format!("bad dropout list {text:?}: {e}")))?;
    let rates: [f64; 4] = vals
        .try_into()
        .map_err(|v: Vec<f64>| HarnessError::Config(format!("need 4 dropout rates, got {}", v.len())))?;
    Ok(DropoutRates(rates))
}

fn print_json<T: serde::Serialize>(value: &T) {
    println!("{}", serde_json::to_string_pretty(value).expect("serializable"));
}

fn run(cli: Cli) -> Result<(), HarnessError> {
    match cli.command {
        Command::Knn { data, features, metric, p, k, folds, seed, bins, out } => {
            let config = KnnConfig {
                data,
                features: match features {
                    Features::Raw => FeatureKind::RawPixel,
                    Features::Hist => FeatureKind::HsvHistogram,
                },
                metric: match metric {
                    Metric::Euclidean => MetricName::Euclidean,
                    Metric::Manhattan => MetricName::Manhattan,
                    Metric::Hamming => MetricName::Hamming,
                    Metric::Minkowski => MetricName::Minkowski,
                },
                p,
                k: parse_k_list(&k)?,
                folds,
                seed,
                hist_bins: bins,
                out,
            };
            let s = cmd_knn(&config)?;
            eprintln!("best k = {} (mean accuracy {:.4})", s.best_k, s.best_mean_accuracy);
        }
        Command::CnnTrain { data, reduced, epochs, batch, lr, seed, val_frac, dropout, checkpoint, out } => {
            let config = CnnTrainConfig {
                data,
                reduced,
                epochs,
                batch,
                lr,
                seed,
                val_frac,
                dropout: parse_rates(&dropout)?,
                checkpoint,
                out,
            };
            let s = cmd_cnn_train(&config)?;
            if let Some(last) = s.last() {
                eprintln!("epoch {}: train acc {:.4}, val acc {:.4}", last.epoch, last.train_acc, last.val_acc);
            }
        }
        Command::CnnEval { checkpoint, data, split, out } => {
            let split = match split {
                Split::All => EvalSplit::All,
                Split::Train => EvalSplit::Train,
                Split::Val => EvalSplit::Val,
            };
            let report = cmd_cnn_eval(&CnnEvalConfig { checkpoint, data, split, out })?;
            eprintln!("accuracy {:.4} over {} samples", report.accuracy, report.samples);
        }
        Command::Synth { out, n, fraction, side, seed } => {
            print_json(&cmd_synth(&SynthCommandConfig { out, n, fraction, side, seed })?);
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
