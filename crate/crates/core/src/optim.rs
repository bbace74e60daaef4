use indexmap::IndexMap;

use crate::error::{Error, Result};

use crate::params::ParamStore;

/// Adaptive-moment optimizer with decoupled weight decay (AdamW).
pub struct AdamW {
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
    step: u64,
    moments: IndexMap<String, (Vec<f32>, Vec<f32>)>,
}

impl AdamW {
    pub fn new() -> Self {
        AdamW { beta1: 0.9, beta2: 0.999, eps: 1e-8, step: 0, moments: IndexMap::new() }
    }

    /// One update over all parameters. Names ending in `.ln_gain`,
    /// `.ln_bias` or `.bias` are exempt from weight decay.
    pub fn step(
        &mut self,
        params: &mut ParamStore,
        grads: &ParamStore,
        lr: f32,
        weight_decay: f32,
    ) -> Result<()> {
        self.step += 1;
        let t = self.step as f32;
        let bc1 = 1.0 - self.beta1.powf(t);
        let bc2 = 1.0 - self.beta2.powf(t);
        for (name, p) in params.iter_mut() {
            let g = grads.get(name)?;
            if g.shape() != p.shape() {
                return Err(Error::ShapeMismatch {
                    op: "AdamW::step",
                    lhs: p.shape().to_vec(),
                    rhs: g.shape().to_vec(),
                });
            }
            let (m, v) = self
                .moments
                .entry(name.to_string())
                .or_insert_with(|| (vec![0.0; p.numel()], vec![0.0; p.numel()]));
            let decay = if is_decay_exempt(name) { 0.0 } else { weight_decay };
            for i in 0..p.numel() {
                let gi = g.data()[i];
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * gi;
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * gi * gi;
                let mhat = m[i] / bc1;
                let vhat = v[i] / bc2;
                let pi = &mut p.data_mut()[i];
                *pi -= lr * (mhat / (vhat.sqrt() + self.eps) + decay * *pi);
            }
        }
        Ok(())
    }
}

impl Default for AdamW {
    fn default() -> Self {
        Self::new()
    }
}

fn is_decay_exempt(name: &str) -> bool {
    name.ends_with(".bias") || name.ends_with(".ln_gain") || name.ends_with(".ln_bias")
        || name.ends_with(".cls") || name.ends_with(".pos")
}

/// Cosine decay from `base_lr` to zero across `total_steps`.
pub fn cosine_lr(base_lr: f32, step: usize, total_steps: usize) -> f32 {
    if total_steps == 0 {
        return base_lr;
    }
    let p = (step as f32 / total_steps as f32).min(1.0);
    0.5 * base_lr * (1.0 + (std::f32::consts::PI * p).cos())
}

/// Linear ramp between two weight-decay values across training.
pub fn linear_wd(wd_start: f32, wd_end: f32, step: usize, total_steps: usize) -> f32 {
    if total_steps <= 1 {
        return wd_start;
    }
    let p = (step as f32 / (total_steps - 1) as f32).min(1.0);
    wd_start + (wd_end - wd_start) * p
}

/// Plain SGD update, used by small closed-loop fits in tests and eval.
pub fn sgd_step(params: &mut ParamStore, grads: &ParamStore, lr: f32) -> Result<()> {
    for (name, p) in params.iter_mut() {
        let g = grads.get(name)?;
        for (pi, gi) in p.data_mut().iter_mut().zip(g.data()) {
            *pi -= lr * gi;
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::Tensor;

    #[test]
    fn cosine_schedule_endpoints() {
        assert!((cosine_lr(1.0, 0, 100) - 1.0).abs() < 1e-6);
        assert!(cosine_lr(1.0, 100, 100).abs() < 1e-6);
        assert!((cosine_lr(1.0, 50, 100) - 0.5).abs() < 1e-6);
    }

    #[test]
    fn wd_ramp_endpoints() {
        assert_eq!(linear_wd(0.1, 0.5, 0, 10), 0.1);
        assert!((linear_wd(0.1, 0.5, 9, 10) - 0.5).abs() < 1e-6);
    }

    #[test]
    fn adamw_descends_a_quadratic() {
        let mut params = ParamStore::new();
        params.insert("w", Tensor::from_vec(vec![5.0, -3.0]));
        let mut opt = AdamW::new();
        for _ in 0..500 {
            let w = params.get("w").unwrap().clone();
            let mut grads = ParamStore::new();
            grads.insert("w", Tensor::from_vec(w.data().iter().map(|v| 2.0 * v).collect()));
            opt.step(&mut params, &grads, 0.05, 0.0).unwrap();
        }
        for &v in params.get("w").unwrap().data() {
            assert!(v.abs() < 1e-2, "did not converge: {v}");
        }
    }
}
