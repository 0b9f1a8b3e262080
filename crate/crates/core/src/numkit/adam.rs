use serde::{Deserialize, Serialize};

use super::{Matrix, NumError};

/// A model's trainable tensors, in a fixed order with stable names.
///
/// The same type doubles as its own gradient container: a zeroed clone of
/// the parameters holds the gradients.
pub trait ParamSet {
    fn tensors(&self) -> Vec<(&str, &Matrix)>;
    fn tensors_mut(&mut self) -> Vec<(&str, &mut Matrix)>;

    fn num_params(&self) -> usize {
        self.tensors().iter().map(|(_, m)| m.len()).sum()
    }

    /// Flattened copy of every tensor, in `tensors()` order.
    fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.num_params());
        for (_, m) in self.tensors() {
            out.extend_from_slice(m.as_slice());
        }
        out
    }

    /// Inverse of [`ParamSet::flatten`]. Panics on length mismatch.
    fn assign_flat(&mut self, flat: &[f64]) {
        let mut offset = 0;
        for (_, m) in self.tensors_mut() {
            let n = m.len();
            m.as_mut_slice().copy_from_slice(&flat[offset..offset + n]);
            offset += n;
        }
        assert_eq!(offset, flat.len(), "flat parameter length mismatch");
    }

    fn zero(&mut self) {
        for (_, m) in self.tensors_mut() {
            m.fill(0.0);
        }
    }

    /// `self += other`, tensor by tensor.
    fn accumulate(&mut self, other: &Self)
    where
        Self: Sized,
    {
        for ((_, dst), (_, src)) in self.tensors_mut().into_iter().zip(other.tensors()) {
            dst.add_assign(src);
        }
    }

    fn scale(&mut self, c: f64) {
        for (_, m) in self.tensors_mut() {
            m.scale_assign(c);
        }
    }

    fn all_finite(&self) -> bool {
        self.tensors().iter().all(|(_, m)| m.is_finite())
    }
}

/// An ordered list of named tensors. Useful for tests and ad-hoc models.
#[derive(Debug, Clone, PartialEq)]
pub struct NamedTensors(pub Vec<(String, Matrix)>);

impl ParamSet for NamedTensors {
    fn tensors(&self) -> Vec<(&str, &Matrix)> {
        self.0.iter().map(|(n, m)| (n.as_str(), m)).collect()
    }

    fn tensors_mut(&mut self) -> Vec<(&str, &mut Matrix)> {
        self.0.iter_mut().map(|(n, m)| (n.as_str(), m)).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { lr: 1e-3, beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 0.0 }
    }
}

/// First/second moment estimates, one pair per parameter tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub step: u64,
    m: Vec<Matrix>,
    v: Vec<Matrix>,
}

impl AdamState {
    pub fn new<P: ParamSet>(params: &P) -> Self {
        let zeros: Vec<Matrix> = params.tensors().iter().map(|(_, t)| Matrix::zeros(t.rows(), t.cols())).collect();
        Self { step: 0, m: zeros.clone(), v: zeros }
    }
}

/// One Adam update with bias correction and decoupled weight decay
/// (`param -= lr * weight_decay * param`).
///
/// Gradients are validated before anything is written, so a non-finite
/// gradient leaves both params and state untouched.
pub fn adam_step<P: ParamSet>(
    params: &mut P,
    grads: &P,
    state: &mut AdamState,
    cfg: &AdamConfig,
) -> Result<(), NumError> {
    let gts = grads.tensors();
    if gts.len() != state.m.len() {
        return Err(NumError::Shape { op: "adam_step", left: (state.m.len(), 1), right: (gts.len(), 1) });
    }
    for ((name, g), m) in gts.iter().zip(&state.m) {
        if g.shape() != m.shape() {
            return Err(NumError::Shape { op: "adam_step", left: m.shape(), right: g.shape() });
        }
        if !g.is_finite() {
            return Err(NumError::NonFinite { name: (*name).to_string() });
        }
    }

    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - cfg.beta1.powi(t);
    let bc2 = 1.0 - cfg.beta2.powi(t);
    let decay = cfg.lr * cfg.weight_decay;

    for (((_, p), (_, g)), (m, v)) in
        params.tensors_mut().into_iter().zip(gts).zip(state.m.iter_mut().zip(state.v.iter_mut()))
    {
        let moments = m.as_mut_slice().iter_mut().zip(v.as_mut_slice().iter_mut());
        for ((pi, &gi), (mi, vi)) in p.as_mut_slice().iter_mut().zip(g.as_slice()).zip(moments) {
            *mi = cfg.beta1 * *mi + (1.0 - cfg.beta1) * gi;
            *vi = cfg.beta2 * *vi + (1.0 - cfg.beta2) * gi * gi;
            let m_hat = *mi / bc1;
            let v_hat = *vi / bc2;
            *pi -= decay * *pi + cfg.lr * m_hat / (v_hat.sqrt() + cfg.eps);
        }
    }
    Ok(())
}
