//! Per-layer forward and backward kernels on NHWC tensors.

use super::linalg::{matmul, matmul_a_bt, matmul_at_b};
use super::{NnError, Scalar, Tensor};
use crate::data::SeededPrng;

/// `(input grad, weight grad, bias grad)` of a weighted layer. The input
/// gradient is `None` when it was not requested.
pub type WeightedGrads<T> = (Option<Tensor<T>>, Tensor<T>, Tensor<T>);

/// `(input grad, gamma grad, beta grad)` of batch norm.
pub type BatchNormGrads<T> = (Tensor<T>, Tensor<T>, Tensor<T>);

fn shape_err(msg: String) -> NnError {
    NnError::Shape(msg)
}

fn rank4(t: &Tensor<impl Scalar>, what: &str) -> Result<[usize; 4], NnError> {
    match *t.shape() {
        [n, h, w, c] => Ok([n, h, w, c]),
        ref s => Err(shape_err(format!("{what} expects a rank-4 NHWC tensor, got {s:?}"))),
    }
}

/// Output extent of a valid-padded window sweep.
pub fn valid_extent(input: usize, window: usize, stride: usize) -> Option<usize> {
    (input >= window && window >= 1 && stride >= 1).then(|| (input - window) / stride + 1)
}

// ---------------------------------------------------------------- conv2d

#[derive(Clone, Debug)]
pub struct ConvCache<T> {
    /// im2col matrix `[N*OH*OW, KH*KW*C]`.
    pub cols: Vec<T>,
    pub input_shape: [usize; 4],
    pub kernel: (usize, usize),
    pub stride: (usize, usize),
    pub out_hw: (usize, usize),
}

/// Valid cross-correlation. `weights` is `[KH, KW, C, F]`, `bias` is `[F]`.
pub fn conv2d_forward<T: Scalar>(
    input: &Tensor<T>,
    weights: &Tensor<T>,
    bias: &Tensor<T>,
    stride: (usize, usize),
) -> Result<(Tensor<T>, ConvCache<T>), NnError> {
    let [n, h, w, c] = rank4(input, "conv2d")?;
    let [kh, kw, wc, f] = match *weights.shape() {
        [a, b, c, d] => [a, b, c, d],
        ref s => return Err(shape_err(format!("conv2d kernel must be [kh, kw, in, filters], got {s:?}"))),
    };
    if wc != c {
        return Err(shape_err(format!("conv2d input has {c} channels, kernel expects {wc}")));
    }
    if bias.shape() != [f] {
        return Err(shape_err(format!("conv2d bias {:?} does not match {f} filters", bias.shape())));
    }
    let (sh, sw) = stride;
    let oh = valid_extent(h, kh, sh)
        .ok_or_else(|| shape_err(format!("conv2d kernel {kh}x{kw} stride {sh}x{sw} does not fit {h}x{w}")))?;
    let ow = valid_extent(w, kw, sw)
        .ok_or_else(|| shape_err(format!("conv2d kernel {kh}x{kw} stride {sh}x{sw} does not fit {h}x{w}")))?;

    let k = kh * kw * c;
    let p = n * oh * ow;
    let x = input.data();
    let mut cols = Vec::with_capacity(p * k);
    for b in 0..n {
        for oy in 0..oh {
            for ox in 0..ow {
                for ky in 0..kh {
                    let iy = oy * sh + ky;
                    let base = ((b * h + iy) * w + ox * sw) * c;
                    cols.extend_from_slice(&x[base..base + kw * c]);
                }
            }
        }
    }
    let mut out = matmul(&cols, weights.data(), p, k, f);
    for row in out.chunks_mut(f) {
        for (o, &bv) in row.iter_mut().zip(bias.data()) {
            *o = *o + bv;
        }
    }
    let cache = ConvCache { cols, input_shape: [n, h, w, c], kernel: (kh, kw), stride, out_hw: (oh, ow) };
    Ok((Tensor::from_vec(&[n, oh, ow, f], out)?, cache))
}

/// Returns `(input grad, weight grad, bias grad)`; the input gradient is
/// skipped when `need_input` is false.
pub fn conv2d_backward<T: Scalar>(
    grad_out: &Tensor<T>,
    cache: &ConvCache<T>,
    weights: &Tensor<T>,
    need_input: bool,
) -> Result<WeightedGrads<T>, NnError> {
    let [n, h, w, c] = cache.input_shape;
    let (kh, kw) = cache.kernel;
    let (sh, sw) = cache.stride;
    let (oh, ow) = cache.out_hw;
    let f = weights.shape()[3];
    if grad_out.shape() != [n, oh, ow, f] {
        return Err(shape_err(format!(
            "conv2d upstream gradient {:?} does not match output [{n}, {oh}, {ow}, {f}]",
            grad_out.shape()
        )));
    }
    let k = kh * kw * c;
    let p = n * oh * ow;
    let g = grad_out.data();
    let dw = matmul_at_b(&cache.cols, g, p, k, f);
    let mut db = vec![T::zero(); f];
    for row in g.chunks(f) {
        for (d, &v) in db.iter_mut().zip(row) {
            *d = *d + v;
        }
    }
    let dx = if need_input {
        let dcols = matmul_a_bt(g, weights.data(), p, f, k);
        let mut dx = vec![T::zero(); n * h * w * c];
        let mut row = 0;
        for b in 0..n {
            for oy in 0..oh {
                for ox in 0..ow {
                    let patch = &dcols[row * k..(row + 1) * k];
                    for ky in 0..kh {
                        let iy = oy * sh + ky;
                        let base = ((b * h + iy) * w + ox * sw) * c;
                        let src = &patch[ky * kw * c..(ky + 1) * kw * c];
                        for (d, &v) in dx[base..base + kw * c].iter_mut().zip(src) {
                            *d = *d + v;
                        }
                    }
                    row += 1;
                }
            }
        }
        Some(Tensor::from_vec(&[n, h, w, c], dx)?)
    } else {
        None
    };
    Ok((dx, Tensor::from_vec(weights.shape(), dw)?, Tensor::from_vec(&[f], db)?))
}

// ------------------------------------------------------------ batch norm

#[derive(Clone, Debug)]
pub struct BatchNormCache<T> {
    pub normalized: Vec<T>,
    pub inv_std: Vec<T>,
    pub batch_mean: Vec<T>,
    pub batch_var: Vec<T>,
}

fn channels_of<T: Scalar>(input: &Tensor<T>, gamma: &Tensor<T>) -> Result<usize, NnError> {
    let c = *input.shape().last().ok_or_else(|| shape_err("batch norm needs at least one axis".into()))?;
    if gamma.shape() != [c] {
        return Err(shape_err(format!("batch norm has {:?} scale, input has {c} channels", gamma.shape())));
    }
    Ok(c)
}

/// Training-mode normalization by per-channel batch statistics (biased
/// variance). Channels are the last axis.
pub fn batch_norm_train<T: Scalar>(
    input: &Tensor<T>,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
    epsilon: f64,
) -> Result<(Tensor<T>, BatchNormCache<T>), NnError> {
    let c = channels_of(input, gamma)?;
    if input.rank() < 2 || input.shape()[0] < 2 {
        return Err(NnError::InvalidParameter(format!(
            "batch norm in train mode needs a batch of at least 2, got shape {:?}",
            input.shape()
        )));
    }
    let x = input.data();
    let m = x.len() / c;
    let mf = T::of(m as f64);
    let mut mean = vec![T::zero(); c];
    for row in x.chunks(c) {
        for (s, &v) in mean.iter_mut().zip(row) {
            *s = *s + v;
        }
    }
    mean.iter_mut().for_each(|s| *s = *s / mf);
    let mut var = vec![T::zero(); c];
    for row in x.chunks(c) {
        for ((s, &v), &mu) in var.iter_mut().zip(row).zip(&mean) {
            let d = v - mu;
            *s = *s + d * d;
        }
    }
    var.iter_mut().for_each(|s| *s = *s / mf);
    let eps = T::of(epsilon);
    let inv_std: Vec<T> = var.iter().map(|&v| (v + eps).sqrt().recip()).collect();
    let mut normalized = Vec::with_capacity(x.len());
    let mut out = Vec::with_capacity(x.len());
    for row in x.chunks(c) {
        for ch in 0..c {
            let xh = (row[ch] - mean[ch]) * inv_std[ch];
            normalized.push(xh);
            out.push(gamma.data()[ch] * xh + beta.data()[ch]);
        }
    }
    let cache = BatchNormCache { normalized, inv_std, batch_mean: mean, batch_var: var };
    Ok((Tensor::from_vec(input.shape(), out)?, cache))
}

/// Inference-mode affine map using the moving statistics.
pub fn batch_norm_eval<T: Scalar>(
    input: &Tensor<T>,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
    moving_mean: &Tensor<T>,
    moving_var: &Tensor<T>,
    epsilon: f64,
) -> Result<Tensor<T>, NnError> {
    let c = channels_of(input, gamma)?;
    let eps = T::of(epsilon);
    let scale: Vec<T> = (0..c).map(|ch| gamma.data()[ch] / (moving_var.data()[ch] + eps).sqrt()).collect();
    let mut out = Vec::with_capacity(input.len());
    for row in input.data().chunks(c) {
        for ch in 0..c {
            out.push((row[ch] - moving_mean.data()[ch]) * scale[ch] + beta.data()[ch]);
        }
    }
    Tensor::from_vec(input.shape(), out)
}

/// `moving <- momentum * moving + (1 - momentum) * batch`.
pub fn update_moving_statistics<T: Scalar>(
    moving_mean: &mut Tensor<T>,
    moving_var: &mut Tensor<T>,
    cache: &BatchNormCache<T>,
    momentum: f64,
) {
    let mom = T::of(momentum);
    let rest = T::one() - mom;
    for (m, &b) in moving_mean.data_mut().iter_mut().zip(&cache.batch_mean) {
        *m = mom * *m + rest * b;
    }
    for (v, &b) in moving_var.data_mut().iter_mut().zip(&cache.batch_var) {
        *v = mom * *v + rest * b;
    }
}

/// Returns `(input grad, gamma grad, beta grad)`.
pub fn batch_norm_backward<T: Scalar>(
    grad_out: &Tensor<T>,
    cache: &BatchNormCache<T>,
    gamma: &Tensor<T>,
) -> Result<BatchNormGrads<T>, NnError> {
    let c = gamma.len();
    let g = grad_out.data();
    if g.len() != cache.normalized.len() {
        return Err(shape_err(format!(
            "batch norm upstream gradient has {} values, cache has {}",
            g.len(),
            cache.normalized.len()
        )));
    }
    let m = g.len() / c;
    let mut dgamma = vec![T::zero(); c];
    let mut dbeta = vec![T::zero(); c];
    for (row, xh) in g.chunks(c).zip(cache.normalized.chunks(c)) {
        for ch in 0..c {
            dbeta[ch] = dbeta[ch] + row[ch];
            dgamma[ch] = dgamma[ch] + row[ch] * xh[ch];
        }
    }
    let mf = T::of(m as f64);
    let coef: Vec<T> = (0..c).map(|ch| gamma.data()[ch] * cache.inv_std[ch] / mf).collect();
    let mut dx = Vec::with_capacity(g.len());
    for (row, xh) in g.chunks(c).zip(cache.normalized.chunks(c)) {
        for ch in 0..c {
            dx.push(coef[ch] * (mf * row[ch] - dbeta[ch] - xh[ch] * dgamma[ch]));
        }
    }
    Ok((Tensor::from_vec(grad_out.shape(), dx)?, Tensor::from_vec(&[c], dgamma)?, Tensor::from_vec(&[c], dbeta)?))
}

// --------------------------------------------------------------- dropout

/// Inverted-dropout mask: each entry is `0` with probability `rate`,
/// otherwise `1 / (1 - rate)`.
pub fn dropout_mask<T: Scalar>(len: usize, rate: f64, rng: &mut SeededPrng) -> Vec<T> {
    assert!((0.0..1.0).contains(&rate), "dropout rate must be in [0, 1)");
    if rate == 0.0 {
        return vec![T::one(); len];
    }
    let keep = T::of(1.0 / (1.0 - rate));
    (0..len).map(|_| if rng.next_f64() < rate { T::zero() } else { keep }).collect()
}

pub fn apply_mask<T: Scalar>(input: &Tensor<T>, mask: &[T]) -> Result<Tensor<T>, NnError> {
    if mask.len() != input.len() {
        return Err(shape_err(format!("dropout mask has {} entries, input {}", mask.len(), input.len())));
    }
    Tensor::from_vec(input.shape(), input.data().iter().zip(mask).map(|(&x, &m)| x * m).collect())
}

/// Train mode draws a fresh mask; eval mode is the identity with an
/// all-ones mask.
pub fn dropout<T: Scalar>(
    input: &Tensor<T>,
    rate: f64,
    train: bool,
    rng: &mut SeededPrng,
) -> Result<(Tensor<T>, Vec<T>), NnError> {
    if !(0.0..1.0).contains(&rate) {
        return Err(NnError::InvalidParameter(format!("dropout rate {rate} outside [0, 1)")));
    }
    if !train {
        return Ok((input.clone(), vec![T::one(); input.len()]));
    }
    let mask = dropout_mask(input.len(), rate, rng);
    Ok((apply_mask(input, &mask)?, mask))
}

// --------------------------------------------------------------- pooling

#[derive(Clone, Copy, Debug)]
pub struct PoolGeometry {
    pub input: [usize; 4],
    pub pool: (usize, usize),
    pub stride: (usize, usize),
    pub out_hw: (usize, usize),
}

fn pool_geometry<T: Scalar>(
    input: &Tensor<T>,
    pool: (usize, usize),
    stride: (usize, usize),
) -> Result<PoolGeometry, NnError> {
    let [n, h, w, c] = rank4(input, "pooling")?;
    let fit = || shape_err(format!("pool {}x{} stride {}x{} does not fit {h}x{w}", pool.0, pool.1, stride.0, stride.1));
    let oh = valid_extent(h, pool.0, stride.0).ok_or_else(fit)?;
    let ow = valid_extent(w, pool.1, stride.1).ok_or_else(fit)?;
    Ok(PoolGeometry { input: [n, h, w, c], pool, stride, out_hw: (oh, ow) })
}

/// Visits every output cell with the flat input indices of its window in
/// row-major order.
fn for_each_window(geo: &PoolGeometry, mut f: impl FnMut(usize, &mut dyn Iterator<Item = usize>)) {
    let [n, h, w, c] = geo.input;
    let (oh, ow) = geo.out_hw;
    let (ph, pw) = geo.pool;
    let (sh, sw) = geo.stride;
    let mut o = 0;
    for b in 0..n {
        for oy in 0..oh {
            for ox in 0..ow {
                for ch in 0..c {
                    let mut it = (0..ph).flat_map(move |ky| {
                        (0..pw).map(move |kx| ((b * h + oy * sh + ky) * w + ox * sw + kx) * c + ch)
                    });
                    f(o, &mut it);
                    o += 1;
                }
            }
        }
    }
}

/// Returns the pooled tensor and the flat input index that won each
/// window (first maximum in row-major window order).
pub fn max_pool_forward<T: Scalar>(
    input: &Tensor<T>,
    pool: (usize, usize),
    stride: (usize, usize),
) -> Result<(Tensor<T>, Vec<usize>, PoolGeometry), NnError> {
    let geo = pool_geometry(input, pool, stride)?;
    let [n, _, _, c] = geo.input;
    let (oh, ow) = geo.out_hw;
    let x = input.data();
    let mut out = vec![T::zero(); n * oh * ow * c];
    let mut argmax = vec![0usize; out.len()];
    for_each_window(&geo, |o, window| {
        let first = window.next().expect("non-empty window");
        let best = window.fold(first, |best, i| if x[i] > x[best] { i } else { best });
        out[o] = x[best];
        argmax[o] = best;
    });
    Ok((Tensor::from_vec(&[n, oh, ow, c], out)?, argmax, geo))
}

pub fn max_pool_backward<T: Scalar>(
    grad_out: &Tensor<T>,
    argmax: &[usize],
    geo: &PoolGeometry,
) -> Result<Tensor<T>, NnError> {
    if grad_out.len() != argmax.len() {
        return Err(shape_err("max pool gradient does not match cached windows".into()));
    }
    let mut dx = vec![T::zero(); geo.input.iter().product()];
    for (&g, &i) in grad_out.data().iter().zip(argmax) {
        dx[i] = dx[i] + g;
    }
    Tensor::from_vec(&geo.input, dx)
}

pub fn avg_pool_forward<T: Scalar>(
    input: &Tensor<T>,
    pool: (usize, usize),
    stride: (usize, usize),
) -> Result<(Tensor<T>, PoolGeometry), NnError> {
    let geo = pool_geometry(input, pool, stride)?;
    let [n, _, _, c] = geo.input;
    let (oh, ow) = geo.out_hw;
    let x = input.data();
    let area = T::of((pool.0 * pool.1) as f64);
    let mut out = vec![T::zero(); n * oh * ow * c];
    for_each_window(&geo, |o, window| {
        out[o] = window.fold(T::zero(), |s, i| s + x[i]) / area;
    });
    Ok((Tensor::from_vec(&[n, oh, ow, c], out)?, geo))
}

pub fn avg_pool_backward<T: Scalar>(grad_out: &Tensor<T>, geo: &PoolGeometry) -> Result<Tensor<T>, NnError> {
    let area = T::of((geo.pool.0 * geo.pool.1) as f64);
    let g = grad_out.data();
    let mut dx = vec![T::zero(); geo.input.iter().product()];
    for_each_window(geo, |o, window| {
        let share = g[o] / area;
        for i in window {
            dx[i] = dx[i] + share;
        }
    });
    Tensor::from_vec(&geo.input, dx)
}

// ----------------------------------------------------------------- dense

/// `input [N, D] * weights [D, U] + bias [U]`.
pub fn dense_forward<T: Scalar>(
    input: &Tensor<T>,
    weights: &Tensor<T>,
    bias: &Tensor<T>,
) -> Result<Tensor<T>, NnError> {
    let (n, d) = match *input.shape() {
        [n, d] => (n, d),
        ref s => return Err(shape_err(format!("dense expects [batch, features], got {s:?}"))),
    };
    let (wd, u) = match *weights.shape() {
        [a, b] => (a, b),
        ref s => return Err(shape_err(format!("dense weights must be [in, units], got {s:?}"))),
    };
    if wd != d {
        return Err(shape_err(format!("dense input has {d} features, weights expect {wd}")));
    }
    if bias.shape() != [u] {
        return Err(shape_err(format!("dense bias {:?} does not match {u} units", bias.shape())));
    }
    let mut out = matmul(input.data(), weights.data(), n, d, u);
    for row in out.chunks_mut(u) {
        for (o, &b) in row.iter_mut().zip(bias.data()) {
            *o = *o + b;
        }
    }
    Tensor::from_vec(&[n, u], out)
}

/// Returns `(input grad, weight grad, bias grad)`.
pub fn dense_backward<T: Scalar>(
    grad_out: &Tensor<T>,
    input: &Tensor<T>,
    weights: &Tensor<T>,
    need_input: bool,
) -> Result<WeightedGrads<T>, NnError> {
    let (n, d) = (input.shape()[0], input.shape()[1]);
    let u = weights.shape()[1];
    if grad_out.shape() != [n, u] {
        return Err(shape_err(format!("dense upstream gradient {:?}, expected [{n}, {u}]", grad_out.shape())));
    }
    let g = grad_out.data();
    let dw = matmul_at_b(input.data(), g, n, d, u);
    let mut db = vec![T::zero(); u];
    for row in g.chunks(u) {
        for (s, &v) in db.iter_mut().zip(row) {
            *s = *s + v;
        }
    }
    let dx = if need_input { Some(Tensor::from_vec(&[n, d], matmul_a_bt(g, weights.data(), n, u, d))?) } else { None };
    Ok((dx, Tensor::from_vec(&[d, u], dw)?, Tensor::from_vec(&[u], db)?))
}

// ------------------------------------------------------------------ relu

pub fn relu_forward<T: Scalar>(input: &Tensor<T>) -> Tensor<T> {
    input.map(|x| if x > T::zero() { x } else { T::zero() })
}

/// Gradient through ReLU given the layer's output.
pub fn relu_backward<T: Scalar>(grad_out: &Tensor<T>, output: &Tensor<T>) -> Result<Tensor<T>, NnError> {
    if grad_out.shape() != output.shape() {
        return Err(shape_err("relu gradient shape mismatch".into()));
    }
    let data =
        grad_out.data().iter().zip(output.data()).map(|(&g, &y)| if y > T::zero() { g } else { T::zero() }).collect();
    Tensor::from_vec(output.shape(), data)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rand_tensor(rng: &mut SeededPrng, shape: &[usize]) -> Tensor<f64> {
        let n = shape.iter().product();
        Tensor::from_vec(shape, (0..n).map(|_| rng.uniform(-1.0, 1.0)).collect()).unwrap()
    }

    fn rel_err(a: f64, b: f64) -> f64 {
        (a - b).abs() / a.abs().max(b.abs()).max(1e-8)
    }

    /// Central-difference gradient of `f` with respect to every entry of `x`.
    fn numeric_grad(x: &Tensor<f64>, f: impl Fn(&Tensor<f64>) -> f64) -> Vec<f64> {
        let h = 1e-5;
        (0..x.len())
            .map(|i| {
                let mut plus = x.clone();
                plus.data_mut()[i] += h;
                let mut minus = x.clone();
                minus.data_mut()[i] -= h;
                (f(&plus) - f(&minus)) / (2.0 * h)
            })
            .collect()
    }

    fn dot(a: &Tensor<f64>, b: &Tensor<f64>) -> f64 {
        a.data().iter().zip(b.data()).map(|(x, y)| x * y).sum()
    }

    fn assert_grad_close(analytic: &Tensor<f64>, numeric: &[f64]) {
        for (i, (&a, &n)) in analytic.data().iter().zip(numeric).enumerate() {
            assert!(rel_err(a, n) < 1e-4, "entry {i}: analytic {a} numeric {n}");
        }
    }

    #[test]
    fn conv_identity_and_window_sum() {
        let mut rng = SeededPrng::new(1);
        let x = rand_tensor(&mut rng, &[1, 4, 4, 1]);
        let w = Tensor::from_vec(&[1, 1, 1, 1], vec![1.0]).unwrap();
        let b = Tensor::zeros(&[1]);
        let (y, _) = conv2d_forward(&x, &w, &b, (1, 1)).unwrap();
        assert_eq!(y, x);

        let x = rand_tensor(&mut rng, &[1, 3, 3, 1]);
        let w = Tensor::full(&[3, 3, 1, 1], 1.0);
        let (y, _) = conv2d_forward(&x, &w, &b, (1, 1)).unwrap();
        assert_eq!(y.shape(), &[1, 1, 1, 1]);
        let sum: f64 = x.data().iter().sum();
        assert!((y.data()[0] - sum).abs() < 1e-12);
    }

    #[test]
    fn conv_shape_errors() {
        let x = Tensor::<f64>::zeros(&[1, 2, 2, 1]);
        let w = Tensor::zeros(&[3, 3, 1, 1]);
        let b = Tensor::zeros(&[1]);
        assert!(matches!(conv2d_forward(&x, &w, &b, (1, 1)), Err(NnError::Shape(_))));
        let w = Tensor::zeros(&[1, 1, 2, 1]);
        let err = conv2d_forward(&x, &w, &b, (1, 1)).unwrap_err();
        assert!(err.to_string().contains("1 channels") && err.to_string().contains("expects 2"));
    }

    #[test]
    fn conv_gradients_match_finite_differences() {
        let mut rng = SeededPrng::new(7);
        let x = rand_tensor(&mut rng, &[2, 8, 8, 2]);
        let w = rand_tensor(&mut rng, &[3, 3, 2, 3]);
        let b = rand_tensor(&mut rng, &[3]);
        for stride in [(1, 1), (2, 2)] {
            let (y, cache) = conv2d_forward(&x, &w, &b, stride).unwrap();
            let r = rand_tensor(&mut rng, y.shape());
            let (dx, dw, db) = conv2d_backward(&r, &cache, &w, true).unwrap();
            let loss = |x: &Tensor<f64>, w: &Tensor<f64>, b: &Tensor<f64>| {
                dot(&conv2d_forward(x, w, b, stride).unwrap().0, &r)
            };
            assert_grad_close(&dx.unwrap(), &numeric_grad(&x, |v| loss(v, &w, &b)));
            assert_grad_close(&dw, &numeric_grad(&w, |v| loss(&x, v, &b)));
            assert_grad_close(&db, &numeric_grad(&b, |v| loss(&x, &w, v)));
        }
    }

    #[test]
    fn batch_norm_train_statistics() {
        let mut rng = SeededPrng::new(3);
        let x = rand_tensor(&mut rng, &[4, 5, 5, 3]).map(|v| 3.0 * v + 2.0);
        let gamma = Tensor::full(&[3], 1.0);
        let beta = Tensor::zeros(&[3]);
        let (y, _) = batch_norm_train(&x, &gamma, &beta, 1e-3).unwrap();
        for ch in 0..3 {
            let vals: Vec<f64> = y.data().iter().skip(ch).step_by(3).copied().collect();
            let mean = vals.iter().sum::<f64>() / vals.len() as f64;
            let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / vals.len() as f64;
            assert!(mean.abs() < 1e-5);
            assert!((var - 1.0).abs() < 1e-3, "{var}");
        }
    }

    #[test]
    fn batch_norm_eval_identity_statistics() {
        let mut rng = SeededPrng::new(4);
        let x = rand_tensor(&mut rng, &[2, 3, 3, 4]);
        let one = Tensor::full(&[4], 1.0);
        let zero = Tensor::zeros(&[4]);
        let y = batch_norm_eval(&x, &one, &zero, &zero, &one, 1e-3).unwrap();
        let scale = 1.0 / (1.0f64 + 1e-3).sqrt();
        for (a, b) in y.data().iter().zip(x.data()) {
            assert!((a - b * scale).abs() < 1e-12);
        }
    }

    #[test]
    fn batch_norm_rejects_single_sample_training() {
        let x = Tensor::<f64>::zeros(&[1, 2, 2, 1]);
        let g = Tensor::full(&[1], 1.0);
        assert!(matches!(batch_norm_train(&x, &g, &Tensor::zeros(&[1]), 1e-3), Err(NnError::InvalidParameter(_))));
    }

    #[test]
    fn batch_norm_moving_update() {
        let mut mm = Tensor::<f64>::zeros(&[1]);
        let mut mv = Tensor::full(&[1], 1.0);
        let cache = BatchNormCache { normalized: vec![], inv_std: vec![], batch_mean: vec![2.0], batch_var: vec![3.0] };
        update_moving_statistics(&mut mm, &mut mv, &cache, 0.9);
        assert!((mm.data()[0] - 0.2).abs() < 1e-15);
        assert!((mv.data()[0] - 1.2).abs() < 1e-15);
    }

    #[test]
    fn batch_norm_gradients_match_finite_differences() {
        let mut rng = SeededPrng::new(5);
        let x = rand_tensor(&mut rng, &[3, 4, 4, 2]);
        let gamma = rand_tensor(&mut rng, &[2]);
        let beta = rand_tensor(&mut rng, &[2]);
        let (y, cache) = batch_norm_train(&x, &gamma, &beta, 1e-3).unwrap();
        let r = rand_tensor(&mut rng, y.shape());
        let (dx, dg, db) = batch_norm_backward(&r, &cache, &gamma).unwrap();
        let loss =
            |x: &Tensor<f64>, g: &Tensor<f64>, b: &Tensor<f64>| dot(&batch_norm_train(x, g, b, 1e-3).unwrap().0, &r);
        assert_grad_close(&dx, &numeric_grad(&x, |v| loss(v, &gamma, &beta)));
        assert_grad_close(&dg, &numeric_grad(&gamma, |v| loss(&x, v, &beta)));
        assert_grad_close(&db, &numeric_grad(&beta, |v| loss(&x, &gamma, v)));
    }

    #[test]
    fn dropout_modes() {
        let mut rng = SeededPrng::new(6);
        let x = rand_tensor(&mut rng, &[10, 10]);
        let (y, mask) = dropout(&x, 0.0, true, &mut rng).unwrap();
        assert_eq!(y, x);
        assert!(mask.iter().all(|&m| m == 1.0));
        let (y, _) = dropout(&x, 0.7, false, &mut rng).unwrap();
        assert_eq!(y, x);

        let ones = Tensor::<f64>::full(&[10_000], 1.0);
        let (y1, m1) = dropout(&ones, 0.5, true, &mut SeededPrng::new(42)).unwrap();
        let (y2, _) = dropout(&ones, 0.5, true, &mut SeededPrng::new(42)).unwrap();
        assert_eq!(y1, y2);
        let mean = y1.data().iter().sum::<f64>() / 10_000.0;
        assert!((mean - 1.0).abs() <= 0.05, "{mean}");
        assert!(m1.iter().all(|&m| m == 0.0 || m == 2.0));
        assert!(dropout(&ones, 1.0, true, &mut rng).is_err());
    }

    #[test]
    fn pooling_window_definitions() {
        let x = Tensor::<f64>::from_vec(&[1, 2, 2, 1], vec![1.0, 3.0, 2.0, 9.0]).unwrap();
        let (m, argmax, _) = max_pool_forward(&x, (2, 2), (2, 2)).unwrap();
        let (a, _) = avg_pool_forward(&x, (2, 2), (2, 2)).unwrap();
        assert_eq!(m.data(), &[9.0]);
        assert_eq!(argmax, vec![3]);
        assert_eq!(a.data(), &[3.75]);

        let c = Tensor::<f64>::full(&[2, 6, 6, 3], 0.25);
        let (m, _, _) = max_pool_forward(&c, (2, 2), (2, 2)).unwrap();
        let (a, _) = avg_pool_forward(&c, (2, 2), (2, 2)).unwrap();
        assert_eq!(m, a);
        assert!(m.data().iter().all(|&v| v == 0.25));
        assert_eq!(m.shape(), &[2, 3, 3, 3]);

        let odd = Tensor::<f64>::zeros(&[1, 13, 13, 2]);
        assert_eq!(max_pool_forward(&odd, (2, 2), (2, 2)).unwrap().0.shape(), &[1, 6, 6, 2]);
        assert!(max_pool_forward(&Tensor::<f64>::zeros(&[1, 1, 4, 1]), (2, 2), (2, 2)).is_err());
    }

    #[test]
    fn max_pool_tie_goes_to_first() {
        let x = Tensor::<f64>::from_vec(&[1, 2, 2, 1], vec![5.0, 5.0, 5.0, 5.0]).unwrap();
        let (_, argmax, geo) = max_pool_forward(&x, (2, 2), (2, 2)).unwrap();
        assert_eq!(argmax, vec![0]);
        let g = Tensor::from_vec(&[1, 1, 1, 1], vec![1.0]).unwrap();
        assert_eq!(max_pool_backward(&g, &argmax, &geo).unwrap().data(), &[1.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn max_pool_backward_positional_audit() {
        let mut rng = SeededPrng::new(8);
        let x = rand_tensor(&mut rng, &[2, 6, 6, 3]);
        let (y, argmax, geo) = max_pool_forward(&x, (2, 2), (2, 2)).unwrap();
        let g = rand_tensor(&mut rng, y.shape());
        let dx = max_pool_backward(&g, &argmax, &geo).unwrap();
        // Independent audit: recompute each window's maximum position by
        // brute force; the gradient must sit there and nowhere else.
        let mut expected = vec![0.0; x.len()];
        for b in 0..2 {
            for oy in 0..3 {
                for ox in 0..3 {
                    for c in 0..3 {
                        let idx = |yy: usize, xx: usize| ((b * 6 + yy) * 6 + xx) * 3 + c;
                        let mut best = idx(2 * oy, 2 * ox);
                        for (dy, dx_) in [(0, 1), (1, 0), (1, 1)] {
                            let i = idx(2 * oy + dy, 2 * ox + dx_);
                            if x.data()[i] > x.data()[best] {
                                best = i;
                            }
                        }
                        expected[best] += g.data()[((b * 3 + oy) * 3 + ox) * 3 + c];
                    }
                }
            }
        }
        assert_eq!(dx.data(), expected.as_slice());
        let total: f64 = dx.data().iter().sum();
        let upstream: f64 = g.data().iter().sum();
        assert!((total - upstream).abs() < 1e-12);
    }

    #[test]
    fn avg_pool_gradients_match_finite_differences() {
        let mut rng = SeededPrng::new(9);
        let x = rand_tensor(&mut rng, &[2, 5, 5, 2]);
        let (y, geo) = avg_pool_forward(&x, (2, 2), (1, 1)).unwrap();
        let r = rand_tensor(&mut rng, y.shape());
        let dx = avg_pool_backward(&r, &geo).unwrap();
        assert_grad_close(&dx, &numeric_grad(&x, |v| dot(&avg_pool_forward(v, (2, 2), (1, 1)).unwrap().0, &r)));
    }

    #[test]
    fn max_pool_gradients_match_finite_differences() {
        let mut rng = SeededPrng::new(10);
        let x = rand_tensor(&mut rng, &[2, 6, 6, 2]);
        let (y, argmax, geo) = max_pool_forward(&x, (2, 2), (2, 2)).unwrap();
        let r = rand_tensor(&mut rng, y.shape());
        let dx = max_pool_backward(&r, &argmax, &geo).unwrap();
        assert_grad_close(&dx, &numeric_grad(&x, |v| dot(&max_pool_forward(v, (2, 2), (2, 2)).unwrap().0, &r)));
    }

    #[test]
    fn dense_examples() {
        let mut rng = SeededPrng::new(11);
        let x = rand_tensor(&mut rng, &[3, 2]);
        let eye = Tensor::from_vec(&[2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        assert_eq!(dense_forward(&x, &eye, &Tensor::zeros(&[2])).unwrap(), x);
        let b = Tensor::from_vec(&[2], vec![1.0, 2.0]).unwrap();
        let y = dense_forward(&x, &Tensor::zeros(&[2, 2]), &b).unwrap();
        assert!(y.data().chunks(2).all(|r| r == [1.0, 2.0]));
        assert!(dense_forward(&x, &Tensor::zeros(&[3, 2]), &b).is_err());
    }

    #[test]
    fn dense_gradients_match_finite_differences() {
        let mut rng = SeededPrng::new(12);
        let x = rand_tensor(&mut rng, &[4, 8]);
        let w = rand_tensor(&mut rng, &[8, 3]);
        let b = rand_tensor(&mut rng, &[3]);
        let y = dense_forward(&x, &w, &b).unwrap();
        let r = rand_tensor(&mut rng, y.shape());
        let (dx, dw, db) = dense_backward(&r, &x, &w, true).unwrap();
        let loss = |x: &Tensor<f64>, w: &Tensor<f64>, b: &Tensor<f64>| dot(&dense_forward(x, w, b).unwrap(), &r);
        assert_grad_close(&dx.unwrap(), &numeric_grad(&x, |v| loss(v, &w, &b)));
        assert_grad_close(&dw, &numeric_grad(&w, |v| loss(&x, v, &b)));
        assert_grad_close(&db, &numeric_grad(&b, |v| loss(&x, &w, v)));
    }

    #[test]
    fn relu_gradients_match_finite_differences() {
        let mut rng = SeededPrng::new(13);
        let x = rand_tensor(&mut rng, &[4, 6]);
        let y = relu_forward(&x);
        let r = rand_tensor(&mut rng, y.shape());
        let dx = relu_backward(&r, &y).unwrap();
        assert_grad_close(&dx, &numeric_grad(&x, |v| dot(&relu_forward(v), &r)));
    }
}
