//! Decoupled-weight-decay adaptive optimizer with global-norm gradient
//! clipping. Moment state is keyed by parameter name so it survives
//! checkpoint round-trips.

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Debug)]
pub struct AdamW<T> {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub step: usize,
    m: Vec<(String, Tensor<T>)>,
    v: Vec<(String, Tensor<T>)>,
}

impl<T: Scalar> AdamW<T> {
    pub fn new(lr: f64, weight_decay: f64) -> Self {
        Self { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay, step: 0, m: Vec::new(), v: Vec::new() }
    }

    fn slot<'a>(
        store: &'a mut Vec<(String, Tensor<T>)>,
        name: &str,
        rows: usize,
        cols: usize,
    ) -> &'a mut Tensor<T> {
        if let Some(i) = store.iter().position(|(n, _)| n == name) {
            &mut store[i].1
        } else {
            store.push((name.to_string(), Tensor::zeros(rows, cols)));
            &mut store.last_mut().unwrap().1
        }
    }

    /// One update over named (param, grad) pairs. Order of application is the
    /// caller's order, which must be deterministic.
    pub fn apply(&mut self, params: Vec<(String, &mut Tensor<T>)>, grads: &[(String, Tensor<T>)]) -> Result<()> {
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        let (b1, b2) = (T::from_f64(self.beta1), T::from_f64(self.beta2));
        let one_m_b1 = T::from_f64(1.0 - self.beta1);
        let one_m_b2 = T::from_f64(1.0 - self.beta2);
        let eps = T::from_f64(self.eps);
        let lr = T::from_f64(self.lr);
        let wd = T::from_f64(self.lr * self.weight_decay);
        let inv_bc1 = T::from_f64(1.0 / bc1);
        let inv_bc2 = T::from_f64(1.0 / bc2);
        for (name, p) in params {
            let g = &grads
                .iter()
                .find(|(n, _)| *n == name)
                .ok_or_else(|| Error::InvalidInput(format!("no gradient for param {name}")))?
                .1;
            if g.shape() != p.shape() {
                return Err(Error::Shape(format!("grad shape mismatch for {name}")));
            }
            if !g.is_finite() {
                return Err(Error::NonFinite(format!("gradient of {name}")));
            }
            let m = Self::slot(&mut self.m, &name, p.rows(), p.cols());
            for (mi, gi) in m.as_mut_slice().iter_mut().zip(g.as_slice()) {
                *mi = b1 * *mi + one_m_b1 * *gi;
            }
            let m_snapshot: Vec<T> = m.as_slice().to_vec();
            let v = Self::slot(&mut self.v, &name, p.rows(), p.cols());
            for (vi, gi) in v.as_mut_slice().iter_mut().zip(g.as_slice()) {
                *vi = b2 * *vi + one_m_b2 * *gi * *gi;
            }
            for ((pi, mi), vi) in
                p.as_mut_slice().iter_mut().zip(&m_snapshot).zip(v.as_slice())
            {
                let m_hat = *mi * inv_bc1;
                let v_hat = *vi * inv_bc2;
                *pi = *pi - lr * m_hat / (v_hat.sqrt() + eps) - wd * *pi;
            }
        }
        Ok(())
    }

    pub fn state(&self) -> (usize, &[(String, Tensor<T>)], &[(String, Tensor<T>)]) {
        (self.step, &self.m, &self.v)
    }

    pub fn restore_state(&mut self, step: usize, m: Vec<(String, Tensor<T>)>, v: Vec<(String, Tensor<T>)>) {
        self.step = step;
        self.m = m;
        self.v = v;
    }
}

/// Scale all gradients so their global L2 norm is at most `max_norm`.
pub fn clip_global_norm<T: Scalar>(grads: &mut [(String, Tensor<T>)], max_norm: f64) {
    if max_norm <= 0.0 {
        return;
    }
    let total: f64 = grads.iter().map(|(_, g)| g.sq_norm()).sum();
    let norm = total.sqrt();
    if norm > max_norm {
        let scale = T::from_f64(max_norm / norm);
        for (_, g) in grads.iter_mut() {
            g.scale_assign(scale);
        }
    }
}
