//! Sequential network description, shape/parameter arithmetic, parameter
//! state and whole-network forward/backward passes.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::layers::{
    apply_mask, avg_pool_backward, avg_pool_forward, batch_norm_backward, batch_norm_eval, batch_norm_train,
    conv2d_backward, conv2d_forward, dense_backward, dense_forward, dropout_mask, max_pool_backward, max_pool_forward,
    relu_backward, relu_forward, update_moving_statistics, valid_extent, BatchNormCache, ConvCache, PoolGeometry,
};
use super::{NnError, Scalar, Tensor};
use crate::data::SeededPrng;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum LayerSpec {
    Conv2d { filters: usize, kernel: [usize; 2], stride: [usize; 2] },
    BatchNorm { channels: usize, epsilon: f64, momentum: f64 },
    Dropout { rate: f64 },
    MaxPool { pool: [usize; 2], stride: [usize; 2] },
    AvgPool { pool: [usize; 2], stride: [usize; 2] },
    Flatten,
    Dense { units: usize },
    Relu,
}

impl LayerSpec {
    pub fn kind(&self) -> &'static str {
        match self {
            LayerSpec::Conv2d { .. } => "conv2d",
            LayerSpec::BatchNorm { .. } => "batch_norm",
            LayerSpec::Dropout { .. } => "dropout",
            LayerSpec::MaxPool { .. } => "max_pool",
            LayerSpec::AvgPool { .. } => "avg_pool",
            LayerSpec::Flatten => "flatten",
            LayerSpec::Dense { .. } => "dense",
            LayerSpec::Relu => "relu",
        }
    }

    fn validate(&self) -> Result<(), String> {
        let positive = |xs: &[usize]| xs.iter().all(|&x| x >= 1);
        let ok = match self {
            LayerSpec::Conv2d { filters, kernel, stride } => *filters >= 1 && positive(kernel) && positive(stride),
            LayerSpec::BatchNorm { channels, epsilon, momentum } => {
                *channels >= 1 && *epsilon > 0.0 && (0.0..=1.0).contains(momentum)
            }
            LayerSpec::Dropout { rate } => (0.0..1.0).contains(rate),
            LayerSpec::MaxPool { pool, stride } | LayerSpec::AvgPool { pool, stride } => {
                positive(pool) && positive(stride)
            }
            LayerSpec::Dense { units } => *units >= 1,
            LayerSpec::Flatten | LayerSpec::Relu => true,
        };
        if ok {
            Ok(())
        } else {
            Err(format!("invalid hyperparameters {self:?}"))
        }
    }
}

/// Input shape (without the batch axis) plus an ordered layer list.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NetworkSpec {
    pub input_shape: Vec<usize>,
    pub layers: Vec<LayerSpec>,
}

impl NetworkSpec {
    /// SHA-256 of the canonical JSON encoding.
    pub fn digest(&self) -> [u8; 32] {
        let json = serde_json::to_vec(self).expect("spec serializes");
        Sha256::digest(&json).into()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DropoutRates(pub [f64; 4]);

impl Default for DropoutRates {
    fn default() -> Self {
        DropoutRates([0.25, 0.25, 0.25, 0.5])
    }
}

pub const BN_EPSILON: f64 = 1e-3;
pub const BN_MOMENTUM: f64 = 0.99;
/// A desk-scale run takes a few hundred steps, too few for 0.99 to forget
/// the initial moving statistics.
pub const REDUCED_BN_MOMENTUM: f64 = 0.9;

fn conv(filters: usize, stride: usize) -> LayerSpec {
    LayerSpec::Conv2d { filters, kernel: [3, 3], stride: [stride, stride] }
}

/// The malaria CNN. Kernel sizes and strides are recovered from the
/// published shape and parameter columns: every conv is 3x3, the first two
/// use stride 2 and the rest stride 1, and the pool is 2x2 with stride 2.
pub fn build_fig11_network_with(rates: DropoutRates) -> NetworkSpec {
    let [r1, r2, r3, r4] = rates.0;
    NetworkSpec {
        input_shape: vec![64, 64, 3],
        layers: vec![
            conv(64, 2),
            LayerSpec::BatchNorm { channels: 64, epsilon: BN_EPSILON, momentum: BN_MOMENTUM },
            LayerSpec::Relu,
            conv(128, 2),
            LayerSpec::Relu,
            LayerSpec::Dropout { rate: r1 },
            conv(256, 1),
            LayerSpec::Relu,
            LayerSpec::MaxPool { pool: [2, 2], stride: [2, 2] },
            conv(1024, 1),
            LayerSpec::Relu,
            LayerSpec::Dropout { rate: r2 },
            conv(512, 1),
            LayerSpec::Relu,
            LayerSpec::Dropout { rate: r3 },
            LayerSpec::Flatten,
            LayerSpec::Dense { units: 256 },
            LayerSpec::Relu,
            LayerSpec::Dropout { rate: r4 },
            LayerSpec::Dense { units: 2 },
        ],
    }
}

pub fn build_fig11_network() -> NetworkSpec {
    build_fig11_network_with(DropoutRates::default())
}

/// Desk-scale variant: same layer types and order up to the pool, 32x32
/// input, narrower filters.
pub fn build_reduced_network(rates: DropoutRates) -> NetworkSpec {
    let [r1, _, r3, r4] = rates.0;
    NetworkSpec {
        input_shape: vec![32, 32, 3],
        layers: vec![
            conv(16, 2),
            LayerSpec::BatchNorm { channels: 16, epsilon: BN_EPSILON, momentum: REDUCED_BN_MOMENTUM },
            LayerSpec::Relu,
            conv(32, 2),
            LayerSpec::Relu,
            LayerSpec::Dropout { rate: r1 },
            conv(32, 1),
            LayerSpec::Relu,
            LayerSpec::MaxPool { pool: [2, 2], stride: [2, 2] },
            LayerSpec::Dropout { rate: r3 },
            LayerSpec::Flatten,
            LayerSpec::Dense { units: 32 },
            LayerSpec::Relu,
            LayerSpec::Dropout { rate: r4 },
            LayerSpec::Dense { units: 2 },
        ],
    }
}

/// Output shape (without batch axis) after every layer.
pub fn infer_shapes(spec: &NetworkSpec) -> Result<Vec<Vec<usize>>, NnError> {
    if spec.input_shape.is_empty() || spec.input_shape.contains(&0) {
        return Err(NnError::Shape(format!("invalid input shape {:?}", spec.input_shape)));
    }
    let mut shape = spec.input_shape.clone();
    let mut out = Vec::with_capacity(spec.layers.len());
    for (i, layer) in spec.layers.iter().enumerate() {
        let fail = |msg: String| NnError::Shape(format!("layer {i} ({}): {msg}", layer.kind()));
        layer.validate().map_err(fail)?;
        shape = match layer {
            LayerSpec::Conv2d { filters, kernel, stride } => {
                let [h, w, _] = spatial(&shape).map_err(fail)?;
                let oh = valid_extent(h, kernel[0], stride[0]);
                let ow = valid_extent(w, kernel[1], stride[1]);
                match (oh, ow) {
                    (Some(oh), Some(ow)) => vec![oh, ow, *filters],
                    _ => return Err(fail(format!("kernel {kernel:?} larger than input {h}x{w}"))),
                }
            }
            LayerSpec::MaxPool { pool, stride } | LayerSpec::AvgPool { pool, stride } => {
                let [h, w, c] = spatial(&shape).map_err(fail)?;
                match (valid_extent(h, pool[0], stride[0]), valid_extent(w, pool[1], stride[1])) {
                    (Some(oh), Some(ow)) => vec![oh, ow, c],
                    _ => return Err(fail(format!("pool {pool:?} larger than input {h}x{w}"))),
                }
            }
            LayerSpec::BatchNorm { channels, .. } => {
                if shape.last() != Some(channels) {
                    return Err(fail(format!("declared {channels} channels, input is {shape:?}")));
                }
                shape
            }
            LayerSpec::Dropout { .. } | LayerSpec::Relu => shape,
            LayerSpec::Flatten => vec![shape.iter().product()],
            LayerSpec::Dense { units } => {
                if shape.len() != 1 {
                    return Err(fail(format!("dense needs a flat input, got {shape:?}")));
                }
                vec![*units]
            }
        };
        out.push(shape.clone());
    }
    Ok(out)
}

fn spatial(shape: &[usize]) -> Result<[usize; 3], String> {
    match *shape {
        [h, w, c] => Ok([h, w, c]),
        _ => Err(format!("expects a [height, width, channels] input, got {shape:?}")),
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamCount {
    pub total: usize,
    pub trainable: usize,
    pub non_trainable: usize,
}

/// Per-layer `(trainable, non_trainable)` parameter counts.
pub fn layer_param_counts(spec: &NetworkSpec) -> Result<Vec<(usize, usize)>, NnError> {
    let shapes = infer_shapes(spec)?;
    let mut input = spec.input_shape.clone();
    let mut counts = Vec::with_capacity(spec.layers.len());
    for (layer, out) in spec.layers.iter().zip(&shapes) {
        let in_ch = *input.last().expect("non-empty shape");
        counts.push(match layer {
            LayerSpec::Conv2d { filters, kernel, .. } => (filters * (kernel[0] * kernel[1] * in_ch + 1), 0),
            LayerSpec::Dense { units } => (input[0] * units + units, 0),
            LayerSpec::BatchNorm { channels, .. } => (2 * channels, 2 * channels),
            _ => (0, 0),
        });
        input = out.clone();
    }
    Ok(counts)
}

pub fn count_params(spec: &NetworkSpec) -> Result<ParamCount, NnError> {
    let counts = layer_param_counts(spec)?;
    let trainable = counts.iter().map(|c| c.0).sum();
    let non_trainable = counts.iter().map(|c| c.1).sum();
    Ok(ParamCount { total: trainable + non_trainable, trainable, non_trainable })
}

/// Parameters of one layer. Conv: `[kernel, bias]`; dense: `[weights,
/// bias]`; batch norm: `[gamma, beta]` trainable plus `[moving_mean,
/// moving_variance]` buffers. Adam moments mirror `trainable`.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerParams<T> {
    pub trainable: Vec<Tensor<T>>,
    pub buffers: Vec<Tensor<T>>,
    pub adam_m: Vec<Tensor<T>>,
    pub adam_v: Vec<Tensor<T>>,
}

impl<T: Scalar> LayerParams<T> {
    pub fn new(trainable: Vec<Tensor<T>>, buffers: Vec<Tensor<T>>) -> Self {
        let adam_m = trainable.iter().map(|t| Tensor::zeros(t.shape())).collect();
        let adam_v = trainable.iter().map(|t| Tensor::zeros(t.shape())).collect();
        Self { trainable, buffers, adam_m, adam_v }
    }

    fn empty() -> Self {
        Self::new(Vec::new(), Vec::new())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParamState<T> {
    pub layers: Vec<LayerParams<T>>,
    /// Number of optimizer steps taken.
    pub step: u64,
}

fn glorot<T: Scalar>(shape: &[usize], fan_in: usize, fan_out: usize, rng: &mut SeededPrng) -> Tensor<T> {
    let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let n = shape.iter().product();
    Tensor::from_vec(shape, (0..n).map(|_| T::of(rng.uniform(-limit, limit))).collect()).expect("sized")
}

impl<T: Scalar> ParamState<T> {
    /// Glorot-uniform weights, zero biases, unit gamma, zero beta, moving
    /// statistics `(0, 1)`.
    pub fn init(spec: &NetworkSpec, rng: &mut SeededPrng) -> Result<Self, NnError> {
        let shapes = infer_shapes(spec)?;
        let mut input = spec.input_shape.clone();
        let mut layers = Vec::with_capacity(spec.layers.len());
        for (layer, out) in spec.layers.iter().zip(&shapes) {
            let in_ch = *input.last().expect("non-empty shape");
            layers.push(match layer {
                LayerSpec::Conv2d { filters, kernel, .. } => {
                    let area = kernel[0] * kernel[1];
                    LayerParams::new(
                        vec![
                            glorot(&[kernel[0], kernel[1], in_ch, *filters], area * in_ch, area * filters, rng),
                            Tensor::zeros(&[*filters]),
                        ],
                        vec![],
                    )
                }
                LayerSpec::Dense { units } => LayerParams::new(
                    vec![glorot(&[input[0], *units], input[0], *units, rng), Tensor::zeros(&[*units])],
                    vec![],
                ),
                LayerSpec::BatchNorm { channels, .. } => LayerParams::new(
                    vec![Tensor::full(&[*channels], T::one()), Tensor::zeros(&[*channels])],
                    vec![Tensor::zeros(&[*channels]), Tensor::full(&[*channels], T::one())],
                ),
                _ => LayerParams::empty(),
            });
            input = out.clone();
        }
        Ok(Self { layers, step: 0 })
    }

    /// Stable names for every stored tensor, in storage order:
    /// per layer trainable, buffers, Adam first and second moments.
    pub fn named_tensors(&self, spec: &NetworkSpec) -> Vec<(String, &Tensor<T>)> {
        let mut out = Vec::new();
        for (i, (layer, p)) in spec.layers.iter().zip(&self.layers).enumerate() {
            let (tn, bn): (&[&str], &[&str]) = match layer {
                LayerSpec::Conv2d { .. } => (&["kernel", "bias"], &[]),
                LayerSpec::Dense { .. } => (&["weights", "bias"], &[]),
                LayerSpec::BatchNorm { .. } => (&["gamma", "beta"], &["moving_mean", "moving_variance"]),
                _ => (&[], &[]),
            };
            let prefix = format!("{i:02}.{}", layer.kind());
            for (n, t) in tn.iter().zip(&p.trainable) {
                out.push((format!("{prefix}.{n}"), t));
            }
            for (n, t) in bn.iter().zip(&p.buffers) {
                out.push((format!("{prefix}.{n}"), t));
            }
            for (n, t) in tn.iter().zip(&p.adam_m) {
                out.push((format!("{prefix}.{n}.adam_m"), t));
            }
            for (n, t) in tn.iter().zip(&p.adam_v) {
                out.push((format!("{prefix}.{n}.adam_v"), t));
            }
        }
        out
    }

    /// Mutable counterpart of [`named_tensors`](Self::named_tensors), same order.
    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor<T>> {
        let mut out = Vec::new();
        for p in &mut self.layers {
            out.extend(p.trainable.iter_mut());
            out.extend(p.buffers.iter_mut());
            out.extend(p.adam_m.iter_mut());
            out.extend(p.adam_v.iter_mut());
        }
        out
    }

    pub fn cast<U: Scalar>(&self) -> ParamState<U> {
        let conv = |ts: &Vec<Tensor<T>>| ts.iter().map(Tensor::cast).collect();
        ParamState {
            layers: self
                .layers
                .iter()
                .map(|p| LayerParams {
                    trainable: conv(&p.trainable),
                    buffers: conv(&p.buffers),
                    adam_m: conv(&p.adam_m),
                    adam_v: conv(&p.adam_v),
                })
                .collect(),
            step: self.step,
        }
    }
}

/// Gradients for the trainable tensors of every layer.
#[derive(Clone, Debug, PartialEq)]
pub struct Gradients<T> {
    pub layers: Vec<Vec<Tensor<T>>>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    Train,
    Eval,
}

/// Whatever backward needs from one layer's forward pass.
#[derive(Clone, Debug)]
pub enum LayerCache<T> {
    None,
    Conv(ConvCache<T>),
    BatchNorm(BatchNormCache<T>),
    Dropout(Vec<T>),
    MaxPool { argmax: Vec<usize>, geometry: PoolGeometry },
    AvgPool(PoolGeometry),
    Flatten(Vec<usize>),
    Dense(Tensor<T>),
    Relu(Tensor<T>),
}

#[derive(Clone, Debug)]
pub struct ForwardCache<T> {
    pub mode: Mode,
    pub layers: Vec<LayerCache<T>>,
}

enum Masks<'a, T> {
    Draw(&'a mut SeededPrng),
    Replay(&'a ForwardCache<T>),
}

/// Runs the network on a batch `[N, ...input_shape]`. In train mode batch
/// norm uses batch statistics and dropout draws masks from `rng`; the
/// moving statistics are not modified (see [`commit_batch_statistics`]).
pub fn network_forward<T: Scalar>(
    spec: &NetworkSpec,
    params: &ParamState<T>,
    batch: &Tensor<T>,
    mode: Mode,
    rng: &mut SeededPrng,
) -> Result<(Tensor<T>, ForwardCache<T>), NnError> {
    forward_impl(spec, params, batch, mode, Masks::Draw(rng))
}

/// Train-mode forward reusing the dropout masks recorded in `cache`.
pub fn network_forward_replay<T: Scalar>(
    spec: &NetworkSpec,
    params: &ParamState<T>,
    batch: &Tensor<T>,
    cache: &ForwardCache<T>,
) -> Result<(Tensor<T>, ForwardCache<T>), NnError> {
    forward_impl(spec, params, batch, Mode::Train, Masks::Replay(cache))
}

fn forward_impl<T: Scalar>(
    spec: &NetworkSpec,
    params: &ParamState<T>,
    batch: &Tensor<T>,
    mode: Mode,
    mut masks: Masks<'_, T>,
) -> Result<(Tensor<T>, ForwardCache<T>), NnError> {
    if batch.rank() != spec.input_shape.len() + 1 || batch.shape()[1..] != spec.input_shape[..] {
        return Err(NnError::Shape(format!(
            "batch shape {:?} does not match input {:?} with a leading batch axis",
            batch.shape(),
            spec.input_shape
        )));
    }
    if params.layers.len() != spec.layers.len() {
        return Err(NnError::Shape("parameter state does not match network".into()));
    }
    let train = mode == Mode::Train;
    let mut x = batch.clone();
    let mut caches = Vec::with_capacity(spec.layers.len());
    for (i, (layer, p)) in spec.layers.iter().zip(&params.layers).enumerate() {
        let ctx = |e: NnError| match e {
            NnError::Shape(m) => NnError::Shape(format!("layer {i} ({}): {m}", layer.kind())),
            NnError::InvalidParameter(m) => NnError::InvalidParameter(format!("layer {i} ({}): {m}", layer.kind())),
        };
        let (y, cache) = match layer {
            LayerSpec::Conv2d { stride, .. } => {
                let (y, c) =
                    conv2d_forward(&x, &p.trainable[0], &p.trainable[1], (stride[0], stride[1])).map_err(ctx)?;
                (y, if train { LayerCache::Conv(c) } else { LayerCache::None })
            }
            LayerSpec::BatchNorm { epsilon, .. } => {
                if train {
                    let (y, c) = batch_norm_train(&x, &p.trainable[0], &p.trainable[1], *epsilon).map_err(ctx)?;
                    (y, LayerCache::BatchNorm(c))
                } else {
                    let y =
                        batch_norm_eval(&x, &p.trainable[0], &p.trainable[1], &p.buffers[0], &p.buffers[1], *epsilon)
                            .map_err(ctx)?;
                    (y, LayerCache::None)
                }
            }
            LayerSpec::Dropout { rate } => {
                if train {
                    let mask = match &mut masks {
                        Masks::Draw(rng) => dropout_mask(x.len(), *rate, rng),
                        Masks::Replay(prev) => match prev.layers.get(i) {
                            Some(LayerCache::Dropout(m)) => m.clone(),
                            _ => return Err(NnError::Shape(format!("layer {i}: no recorded dropout mask"))),
                        },
                    };
                    (apply_mask(&x, &mask).map_err(ctx)?, LayerCache::Dropout(mask))
                } else {
                    (x.clone(), LayerCache::None)
                }
            }
            LayerSpec::MaxPool { pool, stride } => {
                let (y, argmax, geometry) =
                    max_pool_forward(&x, (pool[0], pool[1]), (stride[0], stride[1])).map_err(ctx)?;
                (y, if train { LayerCache::MaxPool { argmax, geometry } } else { LayerCache::None })
            }
            LayerSpec::AvgPool { pool, stride } => {
                let (y, geometry) = avg_pool_forward(&x, (pool[0], pool[1]), (stride[0], stride[1])).map_err(ctx)?;
                (y, if train { LayerCache::AvgPool(geometry) } else { LayerCache::None })
            }
            LayerSpec::Flatten => {
                let shape = x.shape().to_vec();
                let n = shape[0];
                let y = x.clone().reshape(&[n, shape[1..].iter().product()]).map_err(ctx)?;
                (y, LayerCache::Flatten(shape))
            }
            LayerSpec::Dense { .. } => {
                let y = dense_forward(&x, &p.trainable[0], &p.trainable[1]).map_err(ctx)?;
                (y, if train { LayerCache::Dense(x.clone()) } else { LayerCache::None })
            }
            LayerSpec::Relu => {
                let y = relu_forward(&x);
                let c = if train { LayerCache::Relu(y.clone()) } else { LayerCache::None };
                (y, c)
            }
        };
        caches.push(cache);
        x = y;
    }
    Ok((x, ForwardCache { mode, layers: caches }))
}

/// Backpropagates `grad_logits` through a train-mode cache.
pub fn network_backward<T: Scalar>(
    spec: &NetworkSpec,
    params: &ParamState<T>,
    cache: &ForwardCache<T>,
    grad_logits: &Tensor<T>,
) -> Result<Gradients<T>, NnError> {
    if cache.mode != Mode::Train || cache.layers.len() != spec.layers.len() {
        return Err(NnError::InvalidParameter("backward needs a train-mode cache of the same network".into()));
    }
    let first_param = spec
        .layers
        .iter()
        .position(|l| matches!(l, LayerSpec::Conv2d { .. } | LayerSpec::Dense { .. } | LayerSpec::BatchNorm { .. }))
        .unwrap_or(spec.layers.len());
    let mut grads: Vec<Vec<Tensor<T>>> = vec![Vec::new(); spec.layers.len()];
    let mut g = grad_logits.clone();
    for i in (0..spec.layers.len()).rev() {
        if i < first_param {
            break;
        }
        let need_input = i > first_param;
        let p = &params.layers[i];
        let missing = || NnError::InvalidParameter(format!("layer {i}: cache entry missing"));
        g = match (&spec.layers[i], &cache.layers[i]) {
            (LayerSpec::Conv2d { .. }, LayerCache::Conv(c)) => {
                let (dx, dw, db) = conv2d_backward(&g, c, &p.trainable[0], need_input)?;
                grads[i] = vec![dw, db];
                dx.unwrap_or(g)
            }
            (LayerSpec::BatchNorm { .. }, LayerCache::BatchNorm(c)) => {
                let (dx, dgamma, dbeta) = batch_norm_backward(&g, c, &p.trainable[0])?;
                grads[i] = vec![dgamma, dbeta];
                dx
            }
            (LayerSpec::Dropout { .. }, LayerCache::Dropout(mask)) => apply_mask(&g, mask)?,
            (LayerSpec::MaxPool { .. }, LayerCache::MaxPool { argmax, geometry }) => {
                max_pool_backward(&g, argmax, geometry)?
            }
            (LayerSpec::AvgPool { .. }, LayerCache::AvgPool(geometry)) => avg_pool_backward(&g, geometry)?,
            (LayerSpec::Flatten, LayerCache::Flatten(shape)) => g.reshape(shape)?,
            (LayerSpec::Dense { .. }, LayerCache::Dense(input)) => {
                let (dx, dw, db) = dense_backward(&g, input, &p.trainable[0], need_input)?;
                grads[i] = vec![dw, db];
                dx.unwrap_or(g)
            }
            (LayerSpec::Relu, LayerCache::Relu(out)) => relu_backward(&g, out)?,
            _ => return Err(missing()),
        };
    }
    Ok(Gradients { layers: grads })
}

/// Folds the batch statistics recorded in a train-mode cache into the
/// moving mean and variance of every batch-norm layer.
pub fn commit_batch_statistics<T: Scalar>(spec: &NetworkSpec, params: &mut ParamState<T>, cache: &ForwardCache<T>) {
    for ((layer, p), c) in spec.layers.iter().zip(&mut params.layers).zip(&cache.layers) {
        if let (LayerSpec::BatchNorm { momentum, .. }, LayerCache::BatchNorm(bc)) = (layer, c) {
            let (mean, var) = p.buffers.split_at_mut(1);
            update_moving_statistics(&mut mean[0], &mut var[0], bc, *momentum);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Published output shapes and parameter counts, excluding the input row.
    const FIG11_ROWS: [(&str, &[usize], usize); 14] = [
        ("conv2d", &[31, 31, 64], 1792),
        ("batch_norm", &[31, 31, 64], 256),
        ("conv2d", &[15, 15, 128], 73856),
        ("dropout", &[15, 15, 128], 0),
        ("conv2d", &[13, 13, 256], 295168),
        ("max_pool", &[6, 6, 256], 0),
        ("conv2d", &[4, 4, 1024], 2360320),
        ("dropout", &[4, 4, 1024], 0),
        ("conv2d", &[2, 2, 512], 4719104),
        ("dropout", &[2, 2, 512], 0),
        ("flatten", &[2048], 0),
        ("dense", &[256], 524544),
        ("dropout", &[256], 0),
        ("dense", &[2], 514),
    ];

    #[test]
    fn fig11_rows_match_exactly() {
        let spec = build_fig11_network();
        let shapes = infer_shapes(&spec).unwrap();
        let counts = layer_param_counts(&spec).unwrap();
        let rows: Vec<(&str, Vec<usize>, usize)> = spec
            .layers
            .iter()
            .zip(shapes)
            .zip(counts)
            .filter(|((l, _), _)| !matches!(l, LayerSpec::Relu))
            .map(|((l, s), (t, n))| (l.kind(), s, t + n))
            .collect();
        assert_eq!(rows.len(), FIG11_ROWS.len());
        for (got, want) in rows.iter().zip(FIG11_ROWS) {
            assert_eq!((got.0, got.1.as_slice(), got.2), want);
        }
        assert_eq!(
            count_params(&spec).unwrap(),
            ParamCount { total: 7_975_554, trainable: 7_975_426, non_trainable: 128 }
        );
    }

    #[test]
    fn kernel_and_stride_recovery() {
        // Solve params = filters * (k*k*in + 1) for k, then
        // out = floor((in - k) / s) + 1 for s, for each conv layer.
        let convs = [
            (64, 3, 1792, 64, 31),
            (31, 64, 73856, 128, 15),
            (15, 128, 295168, 256, 13),
            (6, 256, 2360320, 1024, 4),
            (4, 1024, 4719104, 512, 2),
        ];
        let mut recovered = Vec::new();
        for (in_side, in_ch, params, filters, out_side) in convs {
            let k = (1..=7).find(|k| filters * (k * k * in_ch + 1) == params).expect("kernel solves");
            let strides: Vec<usize> = (1..=4).filter(|s| (in_side - k) / s + 1 == out_side).collect();
            assert_eq!(strides.len(), 1, "stride must be unique");
            recovered.push((k, strides[0]));
        }
        assert_eq!(recovered, vec![(3, 2), (3, 2), (3, 1), (3, 1), (3, 1)]);
        let built: Vec<(usize, usize)> = build_fig11_network()
            .layers
            .iter()
            .filter_map(|l| match l {
                LayerSpec::Conv2d { kernel, stride, .. } => Some((kernel[0], stride[0])),
                _ => None,
            })
            .collect();
        assert_eq!(built, recovered);
        // Pool on 13 -> 6 with a 2x2 window: only stride 2 fits.
        assert_eq!((1..=4).filter(|s| (13 - 2) / s + 1 == 6).collect::<Vec<_>>(), vec![2]);
    }

    #[test]
    fn shape_errors_name_the_layer() {
        let spec = NetworkSpec { input_shape: vec![4, 4, 1], layers: vec![conv(2, 1), conv(2, 1), conv(2, 1)] };
        let err = infer_shapes(&spec).unwrap_err().to_string();
        assert!(err.contains("layer 1") && err.contains("conv2d"), "{err}");
        let bad_bn = NetworkSpec {
            input_shape: vec![4, 4, 3],
            layers: vec![LayerSpec::BatchNorm { channels: 2, epsilon: 1e-3, momentum: 0.9 }],
        };
        assert!(infer_shapes(&bad_bn).is_err());
    }

    #[test]
    fn reduced_network_is_consistent() {
        let spec = build_reduced_network(DropoutRates::default());
        assert_eq!(infer_shapes(&spec).unwrap().last().unwrap(), &vec![2]);
        let kinds: std::collections::BTreeSet<&str> = spec.layers.iter().map(LayerSpec::kind).collect();
        for k in ["conv2d", "batch_norm", "dropout", "max_pool", "flatten", "dense", "relu"] {
            assert!(kinds.contains(k));
        }
    }

    #[test]
    fn param_state_matches_counts() {
        let spec = build_reduced_network(DropoutRates::default());
        let p = ParamState::<f32>::init(&spec, &mut SeededPrng::new(1)).unwrap();
        let trainable: usize = p.layers.iter().flat_map(|l| &l.trainable).map(Tensor::len).sum();
        let buffers: usize = p.layers.iter().flat_map(|l| &l.buffers).map(Tensor::len).sum();
        let c = count_params(&spec).unwrap();
        assert_eq!((trainable, buffers), (c.trainable, c.non_trainable));
    }

    #[test]
    fn fig11_forward_on_batch_of_two() {
        let spec = build_fig11_network();
        let params = ParamState::<f32>::init(&spec, &mut SeededPrng::new(3)).unwrap();
        let batch = Tensor::full(&[2, 64, 64, 3], 0.5f32);
        let (a, _) = network_forward(&spec, &params, &batch, Mode::Eval, &mut SeededPrng::new(0)).unwrap();
        assert_eq!(a.shape(), &[2, 2]);
        let (b, _) = network_forward(&spec, &params, &batch, Mode::Eval, &mut SeededPrng::new(9)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn sequential_and_parallel_agree() {
        let spec = build_reduced_network(DropoutRates::default());
        let params = ParamState::<f32>::init(&spec, &mut SeededPrng::new(4)).unwrap();
        let mut rng = SeededPrng::new(5);
        let data: Vec<f32> = (0..4 * 32 * 32 * 3).map(|_| rng.next_f64() as f32).collect();
        let batch = Tensor::from_vec(&[4, 32, 32, 3], data).unwrap();
        let (par, _) = network_forward(&spec, &params, &batch, Mode::Train, &mut SeededPrng::new(1)).unwrap();
        crate::nn::set_parallel(false);
        let seq = network_forward(&spec, &params, &batch, Mode::Train, &mut SeededPrng::new(1));
        crate::nn::set_parallel(true);
        assert_eq!(par.data(), seq.unwrap().0.data());
    }
}
