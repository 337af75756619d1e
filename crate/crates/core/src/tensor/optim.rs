//! AdamW with decoupled weight decay.

use super::{Scalar, Tensor, TensorError};

#[derive(Debug, Clone, Copy)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
        }
    }
}

struct Slot<F: Scalar> {
    m: Vec<F>,
    v: Vec<F>,
}

/// Optimizer over a fixed, ordered set of named leaf parameters. Missing
/// gradients are treated as zero, so decoupled decay still applies.
pub struct AdamW<F: Scalar> {
    cfg: AdamWConfig,
    step_count: u64,
    params: Vec<(String, Tensor<F>)>,
    slots: Vec<Slot<F>>,
}

impl<F: Scalar> AdamW<F> {
    pub fn new(params: Vec<(String, Tensor<F>)>, cfg: AdamWConfig) -> Self {
        let slots = params
            .iter()
            .map(|(_, p)| Slot {
                m: vec![F::zero(); p.numel()],
                v: vec![F::zero(); p.numel()],
            })
            .collect();
        Self {
            cfg,
            step_count: 0,
            params,
            slots,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step_count
    }

    pub fn params(&self) -> &[(String, Tensor<F>)] {
        &self.params
    }

    pub fn config(&self) -> AdamWConfig {
        self.cfg
    }

    /// One bias-corrected moment update plus decoupled decay at `lr_now`.
    pub fn step(&mut self, lr_now: f64) -> Result<(), TensorError> {
        if lr_now <= 0.0 {
            return Err(TensorError::Contract(format!(
                "adamw step requires lr > 0, got {lr_now}"
            )));
        }
        self.step_count += 1;
        let t = self.step_count as i32;
        let b1 = F::from_f64(self.cfg.beta1);
        let b2 = F::from_f64(self.cfg.beta2);
        let eps = F::from_f64(self.cfg.eps);
        let lr = F::from_f64(lr_now);
        let bc1 = F::one() - b1.powi(t);
        let bc2 = F::one() - b2.powi(t);
        let decay = F::one() - F::from_f64(lr_now * self.cfg.weight_decay);
        for ((_, param), slot) in self.params.iter().zip(self.slots.iter_mut()) {
            let grad = param.grad();
            let grad = grad.as_deref();
            let mut data = param.data_clone();
            for i in 0..data.len() {
                let g = grad.map_or(F::zero(), |g| g[i]);
                slot.m[i] = b1 * slot.m[i] + (F::one() - b1) * g;
                slot.v[i] = b2 * slot.v[i] + (F::one() - b2) * g * g;
                let m_hat = slot.m[i] / bc1;
                let v_hat = slot.v[i] / bc2;
                data[i] = data[i] * decay - lr * m_hat / (v_hat.sqrt() + eps);
            }
            param.set_data(&data);
        }
        Ok(())
    }

    pub fn zero_grads(&self) {
        for (_, p) in &self.params {
            p.zero_grad();
        }
    }

    /// Moment arrays in parameter order, for checkpoint resume.
    pub fn export_moments(&self) -> Vec<(Vec<F>, Vec<F>)> {
        self.slots.iter().map(|s| (s.m.clone(), s.v.clone())).collect()
    }

    pub fn import_moments(
        &mut self,
        moments: Vec<(Vec<F>, Vec<F>)>,
        step_count: u64,
    ) -> Result<(), TensorError> {
        if moments.len() != self.slots.len() {
            return Err(TensorError::Contract(format!(
                "moment count {} != parameter count {}",
                moments.len(),
                self.slots.len()
            )));
        }
        for (slot, (m, v)) in self.slots.iter_mut().zip(moments) {
            if m.len() != slot.m.len() || v.len() != slot.v.len() {
                return Err(TensorError::Contract(
                    "moment shape mismatch on resume".into(),
                ));
            }
            slot.m = m;
            slot.v = v;
        }
        self.step_count = step_count;
        Ok(())
    }
}

/// Scales all gradients so the global L2 norm does not exceed `max_norm`.
/// Returns the pre-clip norm.
pub fn clip_grad_norm<F: Scalar>(params: &[(String, Tensor<F>)], max_norm: f64) -> f64 {
    let mut total = 0.0f64;
    for (_, p) in params {
        if let Some(g) = p.grad() {
            for v in g {
                let v = v.to_f64();
                total += v * v;
            }
        }
    }
    let norm = total.sqrt();
    if norm > max_norm && norm > 0.0 {
        let scale = F::from_f64(max_norm / norm);
        for (_, p) in params {
            let scaled = p.grad().map(|g| g.iter().map(|&v| v * scale).collect::<Vec<F>>());
            if let Some(s) = scaled {
                p.zero_grad();
                p.accumulate_grad(&s);
            }
        }
    }
    norm
}
