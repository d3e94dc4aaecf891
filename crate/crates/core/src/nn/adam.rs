use serde::{Deserialize, Serialize};

use super::{Gradients, NnError, ParamState, Scalar};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { lr: 1e-3, beta1: 0.9, beta2: 0.999, eps: 1e-7 }
    }
}

/// One bias-corrected Adam update of every trainable tensor. Batch-norm
/// moving statistics live in `buffers` and are never touched here.
pub fn adam_step<T: Scalar>(
    params: &mut ParamState<T>,
    grads: &Gradients<T>,
    config: &AdamConfig,
) -> Result<(), NnError> {
    if grads.layers.len() != params.layers.len() {
        return Err(NnError::Shape(format!(
            "{} gradient layers for {} parameter layers",
            grads.layers.len(),
            params.layers.len()
        )));
    }
    for (layer, (p, g)) in params.layers.iter().zip(&grads.layers).enumerate() {
        if p.trainable.len() != g.len() || p.trainable.iter().zip(g).any(|(a, b)| a.shape() != b.shape()) {
            return Err(NnError::Shape(format!("gradient shapes do not match trainable tensors of layer {layer}")));
        }
    }
    params.step += 1;
    let t = params.step as i32;
    let b1 = T::of(config.beta1);
    let b2 = T::of(config.beta2);
    let one = T::one();
    let lr = T::of(config.lr);
    let eps = T::of(config.eps);
    let c1 = one - b1.powi(t);
    let c2 = one - b2.powi(t);
    for (layer, g_layer) in params.layers.iter_mut().zip(&grads.layers) {
        for (i, g) in g_layer.iter().enumerate() {
            let w = layer.trainable[i].data_mut();
            let m = layer.adam_m[i].data_mut();
            let v = layer.adam_v[i].data_mut();
            for (((w, m), v), &g) in w.iter_mut().zip(m.iter_mut()).zip(v.iter_mut()).zip(g.data()) {
                *m = b1 * *m + (one - b1) * g;
                *v = b2 * *v + (one - b2) * g * g;
                let m_hat = *m / c1;
                let v_hat = *v / c2;
                *w = *w - lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
    }
    Ok(())
}
