use super::{NumericError, ParamStore, Tensor};

/// AdamW with decoupled weight decay.
#[derive(Clone, Debug)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    step: u64,
    first: Vec<Tensor>,
    second: Vec<Tensor>,
}

impl AdamW {
    pub fn new(beta1: f64, beta2: f64, eps: f64, weight_decay: f64) -> Self {
        AdamW {
            beta1,
            beta2,
            eps,
            weight_decay,
            step: 0,
            first: Vec::new(),
            second: Vec::new(),
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// Applies one update with learning rate `lr` and zeroes the gradients.
    /// A non-finite gradient aborts the step and leaves everything as is.
    pub fn step(&mut self, params: &mut ParamStore, lr: f64) -> Result<(), NumericError> {
        if let Some(bad) = params.iter().find(|p| !p.grad.all_finite()) {
            return Err(NumericError::NonFinite(format!("gradient of {}", bad.name)));
        }
        if self.first.len() != params.len() {
            self.first = params.iter().map(|p| Tensor::zeros(p.value.shape())).collect();
            self.second = self.first.clone();
        }
        self.step += 1;
        let t = self.step as i32;
        let bias1 = 1.0 - self.beta1.powi(t);
        let bias2 = 1.0 - self.beta2.powi(t);

        for ((p, m), v) in params.iter_mut().zip(&mut self.first).zip(&mut self.second) {
            let values = p.value.data_mut();
            for (((x, g), m), v) in values
                .iter_mut()
                .zip(p.grad.data())
                .zip(m.data_mut())
                .zip(v.data_mut())
            {
                *m = self.beta1 * *m + (1.0 - self.beta1) * g;
                *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
                let m_hat = *m / bias1;
                let v_hat = *v / bias2;
                *x -= lr * (m_hat / (v_hat.sqrt() + self.eps) + self.weight_decay * *x);
            }
        }
        params.zero_grad();
        Ok(())
    }
}

impl Default for AdamW {
    fn default() -> Self {
        AdamW::new(0.9, 0.999, 1e-8, 0.0)
    }
}

/// Linear warmup followed by inverse square root decay, normalised so that
/// the value at `step == warmup_steps` is `base_lr`.
pub fn noam_lr(step: u64, base_lr: f64, warmup_steps: u64) -> f64 {
    let step = step.max(1) as f64;
    let warmup = warmup_steps.max(1) as f64;
    base_lr * warmup.sqrt() * step.powf(-0.5).min(step * warmup.powf(-1.5))
}
