use super::params::ParamStore;
use super::tensor::Tensor;
use crate::error::{shape_err, Error, Result};

/// AdamW hyperparameters.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamW {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamW {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
        }
    }
}

/// Moment estimates, one pair per parameter of the store they were built for.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerState {
    pub step_count: u64,
    first_moment: Vec<Tensor>,
    second_moment: Vec<Tensor>,
}

impl OptimizerState {
    pub fn new(store: &ParamStore) -> Self {
        let zeros: Vec<Tensor> = store.iter().map(|(_, t)| Tensor::zeros(t.shape())).collect();
        Self {
            step_count: 0,
            first_moment: zeros.clone(),
            second_moment: zeros,
        }
    }

    pub fn first_moment(&self) -> &[Tensor] {
        &self.first_moment
    }

    pub fn second_moment(&self) -> &[Tensor] {
        &self.second_moment
    }
}

impl AdamW {
    /// One AdamW step at learning rate `lr` (pass `self.lr` for a constant
    /// schedule). Parameters whose gradient is `None` are left untouched,
    /// weight decay included.
    ///
    /// Decay is decoupled: `p ← p − lr·(m̂/(√v̂ + eps) + λ·p)`.
    pub fn step(
        &self,
        store: &mut ParamStore,
        grads: &[Option<Tensor>],
        state: &mut OptimizerState,
        lr: f64,
    ) -> Result<()> {
        if grads.len() != store.len() || state.first_moment.len() != store.len() {
            return shape_err(format!(
                "{} gradients and {} moments for {} parameters",
                grads.len(),
                state.first_moment.len(),
                store.len()
            ));
        }
        for (id, g) in store.ids().zip(grads) {
            if let Some(g) = g {
                if g.shape() != store.get(id).shape() {
                    return shape_err(format!("gradient for {}", store.name(id)));
                }
                if !g.is_finite() {
                    return Err(Error::NonFinite(format!("gradient of {}", store.name(id))));
                }
            }
        }
        state.step_count += 1;
        let t = state.step_count as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        for (i, (id, g)) in store.ids().zip(grads).enumerate().collect::<Vec<_>>() {
            let Some(g) = g else { continue };
            let m = state.first_moment[i].data_mut();
            let v = state.second_moment[i].data_mut();
            let p = store.get_mut(id).data_mut();
            for j in 0..p.len() {
                let gj = g.data()[j];
                m[j] = self.beta1 * m[j] + (1.0 - self.beta1) * gj;
                v[j] = self.beta2 * v[j] + (1.0 - self.beta2) * gj * gj;
                let mhat = m[j] / bc1;
                let vhat = v[j] / bc2;
                p[j] -= lr * (mhat / (vhat.sqrt() + self.eps) + self.weight_decay * p[j]);
            }
        }
        Ok(())
    }
}

/// Linear warmup to `base` over `warmup` steps, then cosine decay to zero
/// at `total`.
pub fn cosine_warmup_lr(base: f64, step: u64, warmup: u64, total: u64) -> f64 {
    if warmup > 0 && step < warmup {
        return base * (step + 1) as f64 / warmup as f64;
    }
    let span = total.saturating_sub(warmup).max(1) as f64;
    let progress = ((step - warmup.min(step)) as f64 / span).min(1.0);
    0.5 * base * (1.0 + (std::f64::consts::PI * progress).cos())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn store(values: Vec<f64>) -> ParamStore {
        let mut s = ParamStore::new();
        s.add("p", Tensor::vector(values)).unwrap();
        s
    }

    #[test]
    fn first_step_is_signed_lr() {
        let mut s = store(vec![1.0, -2.0, 0.5]);
        let mut st = OptimizerState::new(&s);
        let opt = AdamW { lr: 1e-3, ..AdamW::default() };
        let g = Tensor::vector(vec![0.3, -5.0, 2e-3]);
        opt.step(&mut s, &[Some(g.clone())], &mut st, opt.lr).unwrap();
        let p = s.get(s.id("p").unwrap()).data();
        let before = [1.0, -2.0, 0.5];
        for j in 0..3 {
            let expected = -opt.lr * g.data()[j].signum();
            // |g|/(|g|+eps) differs from 1 by eps/|g|.
            let tol = opt.lr * opt.eps / g.data()[j].abs() + 1e-15;
            assert!(((p[j] - before[j]) - expected).abs() <= tol);
        }
    }

    #[test]
    fn zero_gradient_leaves_params() {
        let mut s = store(vec![1.0, 2.0]);
        let mut st = OptimizerState::new(&s);
        let opt = AdamW::default();
        opt.step(&mut s, &[Some(Tensor::zeros(&[2]))], &mut st, opt.lr).unwrap();
        assert_eq!(s.get(s.id("p").unwrap()).data(), &[1.0, 2.0]);
    }

    #[test]
    fn decoupled_decay_scales_params() {
        let mut s = store(vec![1.0, -3.0]);
        let mut st = OptimizerState::new(&s);
        let opt = AdamW { lr: 0.1, weight_decay: 0.5, ..AdamW::default() };
        opt.step(&mut s, &[Some(Tensor::zeros(&[2]))], &mut st, opt.lr).unwrap();
        let p = s.get(s.id("p").unwrap()).data();
        assert!((p[0] - 0.95).abs() < 1e-15);
        assert!((p[1] + 2.85).abs() < 1e-15);
    }

    #[test]
    fn none_gradient_skips_decay() {
        let mut s = store(vec![1.0]);
        let mut st = OptimizerState::new(&s);
        let opt = AdamW { weight_decay: 0.5, ..AdamW::default() };
        opt.step(&mut s, &[None], &mut st, opt.lr).unwrap();
        assert_eq!(s.get(s.id("p").unwrap()).data(), &[1.0]);
    }

    #[test]
    fn rejects_bad_gradients() {
        let mut s = store(vec![1.0]);
        let mut st = OptimizerState::new(&s);
        let opt = AdamW::default();
        assert!(opt.step(&mut s, &[Some(Tensor::vector(vec![f64::NAN]))], &mut st, 1e-3).is_err());
        assert!(opt.step(&mut s, &[Some(Tensor::zeros(&[2]))], &mut st, 1e-3).is_err());
        assert_eq!(st.step_count, 0);
    }

    #[test]
    fn warmup_then_cosine() {
        assert!((cosine_warmup_lr(1.0, 0, 10, 100) - 0.1).abs() < 1e-12);
        assert!((cosine_warmup_lr(1.0, 10, 10, 100) - 1.0).abs() < 1e-12);
        assert!(cosine_warmup_lr(1.0, 100, 10, 100).abs() < 1e-12);
        assert!((cosine_warmup_lr(1.0, 55, 10, 100) - 0.5).abs() < 1e-12);
    }
}
