use crate::{ParamId, ParamStore, Scalar, Tensor};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig { beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 1e-5 }
    }
}

/// Adam with decoupled weight decay.
#[derive(Clone, Debug)]
pub struct AdamW<T> {
    pub config: AdamWConfig,
    pub step: u64,
    pub first: Vec<Tensor<T>>,
    pub second: Vec<Tensor<T>>,
}

impl<T: Scalar> AdamW<T> {
    pub fn new(store: &ParamStore<T>, config: AdamWConfig) -> Self {
        let zeros = |s: &ParamStore<T>| s.iter().map(|(_, _, t)| Tensor::zeros(t.shape())).collect();
        AdamW { config, step: 0, first: zeros(store), second: zeros(store) }
    }

    /// One update. Parameters without a gradient are left untouched, weight
    /// decay included.
    pub fn update(&mut self, store: &mut ParamStore<T>, grads: &[Option<Tensor<T>>], lr: f64) {
        assert_eq!(grads.len(), store.len(), "one gradient slot per parameter");
        self.step += 1;
        let c = self.config;
        let (b1, b2) = (T::lit(c.beta1), T::lit(c.beta2));
        let bc1 = T::lit(1.0 - c.beta1.powi(self.step as i32));
        let bc2 = T::lit(1.0 - c.beta2.powi(self.step as i32));
        let lr_t = T::lit(lr);
        let decay = T::one() - T::lit(lr * c.weight_decay);
        let eps = T::lit(c.eps);
        for (i, g) in grads.iter().enumerate() {
            let Some(g) = g else { continue };
            let p = store.get_mut(ParamId(i));
            let (m, v) = (&mut self.first[i], &mut self.second[i]);
            for (((p, &g), m), v) in p
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.data_mut().iter_mut())
                .zip(v.data_mut().iter_mut())
            {
                *m = b1 * *m + (T::one() - b1) * g;
                *v = b2 * *v + (T::one() - b2) * g * g;
                let mhat = *m / bc1;
                let vhat = *v / bc2;
                *p = *p * decay - lr_t * mhat / (vhat.sqrt() + eps);
            }
        }
    }
}

/// Linear warm-up followed by cosine decay to zero, indexed by optimizer step.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct WarmupCosine {
    pub base_lr: f64,
    pub warmup_steps: u64,
    pub total_steps: u64,
}

impl WarmupCosine {
    pub fn lr(&self, step: u64) -> f64 {
        if self.warmup_steps > 0 && step < self.warmup_steps {
            return self.base_lr * (step + 1) as f64 / self.warmup_steps as f64;
        }
        let span = self.total_steps.saturating_sub(self.warmup_steps).max(1);
        let t = (step - self.warmup_steps.min(step)) as f64 / span as f64;
        0.5 * self.base_lr * (1.0 + (std::f64::consts::PI * t.min(1.0)).cos())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schedule_warms_up_then_decays() {
        let s = WarmupCosine { base_lr: 1e-3, warmup_steps: 10, total_steps: 110 };
        assert!((s.lr(0) - 1e-4).abs() < 1e-15);
        assert!((s.lr(9) - 1e-3).abs() < 1e-15);
        assert!((s.lr(10) - 1e-3).abs() < 1e-15);
        assert!((s.lr(60) - 5e-4).abs() < 1e-12);
        assert!(s.lr(110).abs() < 1e-15);
        assert!(s.lr(500).abs() < 1e-15);
    }

    #[test]
    fn adamw_moves_against_gradient_and_skips_missing() {
        let mut store = ParamStore::<f64>::new();
        let a = store.add("a", Tensor::new(&[2], vec![1.0, -1.0]));
        store.add("b", Tensor::new(&[1], vec![3.0]));
        let mut opt = AdamW::new(&store, AdamWConfig::default());
        opt.update(&mut store, &[Some(Tensor::new(&[2], vec![0.5, -0.5])), None], 0.1);
        let av = store.get(a).data().to_vec();
        assert!(av[0] < 1.0 && av[1] > -1.0);
        assert_eq!(store.get(ParamId(1)).data(), &[3.0]);
    }
}
