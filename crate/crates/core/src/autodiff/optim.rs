use super::params::{ParamId, ParamStore};
use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 1e-4,
        }
    }
}

/// AdamW with decoupled weight decay and bias-corrected moments.
#[derive(Clone, Debug)]
pub struct AdamW<S: Real = f32> {
    pub config: AdamWConfig,
    step: u64,
    moments: Vec<Option<(Vec<S>, Vec<S>)>>,
}

impl<S: Real> AdamW<S> {
    pub fn new(config: AdamWConfig, num_params: usize) -> Self {
        AdamW {
            config,
            step: 0,
            moments: vec![None; num_params],
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// First and second moments of a parameter, if it has been updated.
    pub fn moments(&self, id: ParamId) -> Option<(&[S], &[S])> {
        self.moments[id.0]
            .as_ref()
            .map(|(m, v)| (m.as_slice(), v.as_slice()))
    }

    pub fn set_moments(&mut self, id: ParamId, m: Vec<S>, v: Vec<S>) {
        self.moments[id.0] = Some((m, v));
    }

    pub fn set_step_count(&mut self, step: u64) {
        self.step = step;
    }

    /// Applies one update to every parameter that has a gradient. Frozen
    /// parameters are never touched.
    pub fn step(
        &mut self,
        store: &mut ParamStore<S>,
        grads: &[(ParamId, Tensor<S>)],
        lr: f64,
    ) -> Result<()> {
        if !(lr >= 0.0) {
            return Err(Error::config(format!("learning rate must be ≥ 0, got {lr}")));
        }
        for (id, g) in grads {
            if !g.all_finite() {
                return Err(Error::Numerical(format!(
                    "gradient of parameter {}",
                    store.name(*id)
                )));
            }
        }
        self.step += 1;
        let t = self.step as i32;
        let c = self.config;
        let (b1, b2) = (S::c(c.beta1), S::c(c.beta2));
        let bc1 = S::c(1.0 - c.beta1.powi(t));
        let bc2 = S::c(1.0 - c.beta2.powi(t));
        let decay = S::c(1.0 - lr * c.weight_decay);
        let (lr_s, eps) = (S::c(lr), S::c(c.eps));
        for (id, g) in grads {
            if store.is_frozen(*id) {
                continue;
            }
            let w = store.get(*id);
            if w.shape() != g.shape() {
                return Err(Error::shape(format!(
                    "gradient for {} has shape {:?}, parameter {:?}",
                    store.name(*id),
                    g.shape(),
                    w.shape()
                )));
            }
            let (m, v) = self.moments[id.0]
                .get_or_insert_with(|| (vec![S::zero(); w.len()], vec![S::zero(); w.len()]));
            let mut next = w.to_vec();
            for i in 0..next.len() {
                let gi = g.data()[i];
                m[i] = b1 * m[i] + (S::one() - b1) * gi;
                v[i] = b2 * v[i] + (S::one() - b2) * gi * gi;
                let m_hat = m[i] / bc1;
                let v_hat = v[i] / bc2;
                next[i] = next[i] * decay - lr_s * m_hat / (v_hat.sqrt() + eps);
            }
            store.set(*id, Tensor::new(w.shape(), next)?)?;
        }
        Ok(())
    }
}

/// One-cycle schedule: linear warmup from `lr_max/25` to `lr_max` over the
/// first 5% of steps, then linear decay to `lr_max/1e4` at `total_steps`.
pub fn onecycle_lr(step: usize, total_steps: usize, lr_max: f64) -> Result<f64> {
    if total_steps == 0 {
        return Err(Error::config("one-cycle schedule needs total_steps > 0"));
    }
    if step > total_steps {
        return Err(Error::config(format!(
            "step {step} beyond schedule length {total_steps}"
        )));
    }
    let start = lr_max / 25.0;
    let end = lr_max / 1e4;
    let warm = 0.05 * total_steps as f64;
    let s = step as f64;
    Ok(if s <= warm {
        start + (lr_max - start) * s / warm
    } else {
        lr_max + (end - lr_max) * (s - warm) / (total_steps as f64 - warm)
    })
}
