//! Central-difference verification of the analytic network gradients.

use serde::{Deserialize, Serialize};

use super::{
    network_backward, network_forward, network_forward_replay, softmax_cross_entropy, ForwardCache, Gradients,
    LayerCache, Mode, NetworkSpec, NnError, ParamState, Tensor,
};
use crate::data::SeededPrng;

/// Denominator floor. Gradients that are exactly zero in theory (a conv
/// bias feeding batch norm, say) come out of central differences as a few
/// ulps of the loss divided by `2h`, around 1e-12 for `h = 1e-4`.
const REL_FLOOR: f64 = 1e-7;

/// Step sizes tried per entry: `h`, `h / 10`, `h / 100`.
const KINK_RETRIES: i32 = 3;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerCheck {
    pub layer: usize,
    pub kind: String,
    /// Entries compared against finite differences.
    pub samples: usize,
    /// Entries rejected because the perturbation crossed a kink.
    pub skipped: usize,
    pub max_rel_error: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradCheckReport {
    pub layers: Vec<LayerCheck>,
    pub max_rel_error: f64,
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

/// Compares `analytic[i]` with `(f(x + h e_i) - f(x - h e_i)) / 2h` for each
/// listed index and returns the largest relative error. `x` is restored.
pub fn check_gradients(
    x: &mut [f64],
    analytic: &[f64],
    indices: &[usize],
    h: f64,
    mut loss: impl FnMut(&[f64]) -> f64,
) -> f64 {
    let mut worst = 0.0f64;
    for &i in indices {
        let orig = x[i];
        x[i] = orig + h;
        let plus = loss(x);
        x[i] = orig - h;
        let minus = loss(x);
        x[i] = orig;
        worst = worst.max(relative_error(analytic[i], (plus - minus) / (2.0 * h)));
    }
    worst
}

/// Runs one train-mode forward/backward pass and checks `sample_count`
/// randomly chosen trainable entries per parameterized layer.
pub fn gradient_check(
    spec: &NetworkSpec,
    params: &ParamState<f64>,
    batch: &Tensor<f64>,
    labels: &[usize],
    sample_count: usize,
    h: f64,
    rng: &mut SeededPrng,
) -> Result<GradCheckReport, NnError> {
    let (logits, cache) = network_forward(spec, params, batch, Mode::Train, rng)?;
    let out = softmax_cross_entropy(&logits, labels)?;
    let grads = network_backward(spec, params, &cache, &out.logit_grad)?;
    compare_gradients(spec, params, batch, labels, &cache, &grads, sample_count, h, rng)
}

/// Checks supplied gradients against finite differences. Dropout masks are
/// replayed from `cache` and moving statistics are left untouched, so every
/// perturbed evaluation sees the same stochastic state as the original pass.
///
/// A sampled entry whose `+h` or `-h` evaluation flips a ReLU sign or a
/// max-pool winner sits near a kink of the loss. It is retried with the step
/// shrunk tenfold, twice; if every step crosses a kink it is counted in
/// `skipped` and another entry is drawn in its place.
#[allow(clippy::too_many_arguments)]
pub fn compare_gradients(
    spec: &NetworkSpec,
    params: &ParamState<f64>,
    batch: &Tensor<f64>,
    labels: &[usize],
    cache: &ForwardCache<f64>,
    grads: &Gradients<f64>,
    sample_count: usize,
    h: f64,
    rng: &mut SeededPrng,
) -> Result<GradCheckReport, NnError> {
    let mut work = params.clone();
    let mut layers = Vec::new();
    for (i, layer) in spec.layers.iter().enumerate() {
        if params.layers[i].trainable.is_empty() {
            continue;
        }
        let analytic: Vec<f64> = grads.layers[i].iter().flat_map(|t| t.data().iter().copied()).collect();
        let total: usize = params.layers[i].trainable.iter().map(Tensor::len).sum();
        if analytic.len() != total {
            return Err(NnError::Shape(format!("layer {i}: gradient size does not match parameters")));
        }
        let mut order: Vec<usize> = (0..total).collect();
        rng.shuffle(&mut order);
        let (mut samples, mut skipped, mut worst) = (0, 0, 0.0f64);
        for flat in order {
            if samples == sample_count {
                break;
            }
            let (t, offset) = locate(&params.layers[i].trainable, flat);
            let orig = params.layers[i].trainable[t].data()[offset];
            let mut eval = |value: f64| -> Result<(f64, bool), NnError> {
                work.layers[i].trainable[t].data_mut()[offset] = value;
                let (z, c) = network_forward_replay(spec, &work, batch, cache)?;
                work.layers[i].trainable[t].data_mut()[offset] = orig;
                Ok((softmax_cross_entropy(&z, labels)?.loss, same_branches(cache, &c)))
            };
            let mut numeric = None;
            for step in (0..KINK_RETRIES).map(|r| h / 10f64.powi(r)) {
                let (plus, smooth_plus) = eval(orig + step)?;
                let (minus, smooth_minus) = eval(orig - step)?;
                if smooth_plus && smooth_minus {
                    numeric = Some((plus - minus) / (2.0 * step));
                    break;
                }
            }
            let Some(numeric) = numeric else {
                skipped += 1;
                continue;
            };
            worst = worst.max(relative_error(analytic[flat], numeric));
            samples += 1;
        }
        layers.push(LayerCheck { layer: i, kind: layer.kind().to_string(), samples, skipped, max_rel_error: worst });
    }
    let max_rel_error = layers.iter().map(|l| l.max_rel_error).fold(0.0, f64::max);
    Ok(GradCheckReport { layers, max_rel_error })
}

fn locate(tensors: &[Tensor<f64>], mut flat: usize) -> (usize, usize) {
    for (t, tensor) in tensors.iter().enumerate() {
        if flat < tensor.len() {
            return (t, flat);
        }
        flat -= tensor.len();
    }
    unreachable!("index within total size")
}

fn same_branches(a: &ForwardCache<f64>, b: &ForwardCache<f64>) -> bool {
    a.layers.iter().zip(&b.layers).all(|pair| match pair {
        (LayerCache::Relu(x), LayerCache::Relu(y)) => {
            x.data().iter().zip(y.data()).all(|(p, q)| (*p > 0.0) == (*q > 0.0))
        }
        (LayerCache::MaxPool { argmax: x, .. }, LayerCache::MaxPool { argmax: y, .. }) => x == y,
        _ => true,
    })
}
