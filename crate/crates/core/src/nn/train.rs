use serde::{Deserialize, Serialize};

use super::{
    adam_step, commit_batch_statistics, network_backward, network_forward, softmax_cross_entropy, AdamConfig,
    LayerSpec, Mode, NetworkSpec, NnError, ParamState, Tensor,
};
use crate::data::{batch_iter, SeededPrng};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    /// Mean train-mode loss over every sample seen this epoch.
    pub loss: f64,
    pub accuracy: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalStats {
    pub loss: f64,
    pub accuracy: f64,
    pub predictions: Vec<usize>,
    /// `confusion[actual][predicted]`.
    pub confusion: [[usize; 2]; 2],
}

fn check_inputs(spec: &NetworkSpec, inputs: &Tensor<f32>, labels: &[usize]) -> Result<(), NnError> {
    if inputs.rank() == 0 || inputs.shape()[0] != labels.len() {
        return Err(NnError::Shape(format!("{:?} inputs for {} labels", inputs.shape(), labels.len())));
    }
    if labels.is_empty() {
        return Err(NnError::InvalidParameter("empty dataset".into()));
    }
    if inputs.shape()[1..] != spec.input_shape[..] {
        return Err(NnError::Shape(format!(
            "sample shape {:?} does not match network input {:?}",
            &inputs.shape()[1..],
            spec.input_shape
        )));
    }
    Ok(())
}

fn argmax(row: &[f32]) -> usize {
    row.iter().enumerate().fold(0, |best, (i, &v)| if v > row[best] { i } else { best })
}

/// One pass over the data in a seeded random order: forward in train mode,
/// loss, backward, moving-statistics update and an Adam step per batch.
/// A trailing batch of one sample is folded into the previous batch when
/// the network contains batch norm.
pub fn train_epoch(
    spec: &NetworkSpec,
    params: &mut ParamState<f32>,
    inputs: &Tensor<f32>,
    labels: &[usize],
    batch_size: usize,
    adam: &AdamConfig,
    rng: &mut SeededPrng,
) -> Result<EpochStats, NnError> {
    check_inputs(spec, inputs, labels)?;
    if batch_size == 0 {
        return Err(NnError::InvalidParameter("batch size must be >= 1".into()));
    }
    let has_bn = spec.layers.iter().any(|l| matches!(l, LayerSpec::BatchNorm { .. }));
    let mut batches = batch_iter(labels.len(), batch_size, true, rng.next_u64());
    if has_bn && batches.len() > 1 && batches.last().is_some_and(|b| b.len() == 1) {
        let tail = batches.pop().expect("checked");
        batches.last_mut().expect("checked").extend(tail);
    }
    let mut loss_sum = 0.0f64;
    let mut correct = 0usize;
    for idx in batches {
        let x = inputs.gather(&idx);
        let y: Vec<usize> = idx.iter().map(|&i| labels[i]).collect();
        let (logits, cache) = network_forward(spec, params, &x, Mode::Train, rng)?;
        let out = softmax_cross_entropy(&logits, &y)?;
        loss_sum += out.sample_losses.iter().map(|&l| l as f64).sum::<f64>();
        correct += logits.data().chunks(logits.shape()[1]).zip(&y).filter(|(row, &l)| argmax(row) == l).count();
        let grads = network_backward(spec, params, &cache, &out.logit_grad)?;
        commit_batch_statistics(spec, params, &cache);
        adam_step(params, &grads, adam)?;
    }
    let n = labels.len() as f64;
    Ok(EpochStats { loss: loss_sum / n, accuracy: correct as f64 / n })
}

/// Eval-mode pass in fixed order. Safe to call concurrently on a shared
/// parameter snapshot.
pub fn evaluate(
    spec: &NetworkSpec,
    params: &ParamState<f32>,
    inputs: &Tensor<f32>,
    labels: &[usize],
    batch_size: usize,
) -> Result<EvalStats, NnError> {
    check_inputs(spec, inputs, labels)?;
    if labels.iter().any(|&l| l > 1) {
        return Err(NnError::InvalidParameter("labels must be 0 or 1".into()));
    }
    let mut unused = SeededPrng::new(0);
    let mut loss_sum = 0.0f64;
    let mut predictions = Vec::with_capacity(labels.len());
    for idx in batch_iter(labels.len(), batch_size.max(1), false, 0) {
        let x = inputs.gather(&idx);
        let y: Vec<usize> = idx.iter().map(|&i| labels[i]).collect();
        let (logits, _) = network_forward(spec, params, &x, Mode::Eval, &mut unused)?;
        let out = softmax_cross_entropy(&logits, &y)?;
        loss_sum += out.sample_losses.iter().map(|&l| l as f64).sum::<f64>();
        predictions.extend(logits.data().chunks(logits.shape()[1]).map(argmax));
    }
    let mut confusion = [[0usize; 2]; 2];
    for (&actual, &pred) in labels.iter().zip(&predictions) {
        confusion[actual][pred.min(1)] += 1;
    }
    let n = labels.len() as f64;
    Ok(EvalStats {
        loss: loss_sum / n,
        accuracy: (confusion[0][0] + confusion[1][1]) as f64 / n,
        predictions,
        confusion,
    })
}
