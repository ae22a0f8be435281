use malenia_tensor::{AdamW, AdamWConfig, Binder, Graph, Scalar, Tensor, WarmupCosine};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::config::{LossConfig, TrainConfig};
use super::model::Malenia;
use crate::attributes::StructuredReport;
use crate::error::{Error, Result};
use crate::phantom::Sample;

/// Mean losses over one epoch.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub total: f64,
    pub deep: f64,
    pub sim: f64,
    pub seg: f64,
    pub lr: f64,
    pub tau: f64,
}

/// Per-sample loss values of one step.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct StepLosses {
    pub total: f64,
    pub deep: f64,
    pub sim: f64,
    pub seg: f64,
}

/// Optimisation state: parameters, optimiser moments and the loss curve.
#[derive(Clone, Debug)]
pub struct Trainer<T: Scalar> {
    pub model: Malenia<T>,
    pub optimizer: AdamW<T>,
    pub config: TrainConfig,
    pub loss: LossConfig,
    pub epoch: usize,
    pub curve: Vec<EpochRecord>,
    samples: Vec<Sample>,
}

fn to_f64<T: Scalar>(x: T) -> f64 {
    x.to_f64().unwrap_or(f64::NAN)
}

impl<T: Scalar> Trainer<T> {
    pub fn new(model: Malenia<T>, config: TrainConfig, loss: LossConfig, samples: Vec<Sample>) -> Result<Self> {
        if samples.is_empty() {
            return Err(Error::Config("empty training set".into()));
        }
        let optimizer = AdamW::new(
            &model.store,
            AdamWConfig { beta1: config.beta1, beta2: config.beta2, eps: 1e-8, weight_decay: config.weight_decay },
        );
        Ok(Trainer { model, optimizer, config, loss, epoch: 0, curve: Vec::new(), samples })
    }

    /// Continues from a saved optimiser state.
    pub fn resume(mut self, optimizer: AdamW<T>, epoch: usize, curve: Vec<EpochRecord>) -> Result<Self> {
        if optimizer.first.len() != self.model.store.len() {
            return Err(Error::Config("optimiser state does not match the model".into()));
        }
        self.optimizer = optimizer;
        self.epoch = epoch;
        self.curve = curve;
        Ok(self)
    }

    pub fn steps_per_epoch(&self) -> usize {
        self.samples.len().div_ceil(self.config.batch_size)
    }

    pub fn schedule(&self) -> WarmupCosine {
        let total = (self.steps_per_epoch() * self.config.epochs) as u64;
        WarmupCosine {
            base_lr: self.config.lr,
            warmup_steps: ((total as f64 * self.config.warmup_fraction).round() as u64).max(1),
            total_steps: total,
        }
    }

    /// Forward and backward on one sample; returns its losses and parameter
    /// gradients.
    pub fn sample_gradients(&self, sample: &Sample) -> Result<(StepLosses, Vec<Option<Tensor<T>>>)> {
        let g = Graph::new();
        let p = Binder::new(&g, &self.model.store);
        let pyramid = self.model.pyramid(&p, &sample.volume)?;
        let gt: Vec<&[u8]> = sample.lesions.iter().map(|l| l.mask.as_slice()).collect();
        let reports: Vec<StructuredReport> = sample.lesions.iter().map(|l| l.labels.clone()).collect();
        let parts = self.model.losses(&p, pyramid, &gt, &reports, &self.loss)?;
        let losses = StepLosses {
            total: to_f64(parts.total.item()),
            deep: parts.deep.map_or(0.0, |d| to_f64(d.item())),
            sim: to_f64(parts.sim.item()),
            seg: to_f64(parts.seg.item()),
        };
        if !losses.total.is_finite() {
            return Ok((losses, Vec::new()));
        }
        let mut grads = g.backward(parts.total);
        Ok((losses, p.collect(&mut grads)))
    }

    /// One pass over the shuffled training set. On a non-finite loss the
    /// parameters are restored to their state at the start of the epoch.
    pub fn run_epoch(&mut self) -> Result<EpochRecord> {
        let mut order: Vec<usize> = (0..self.samples.len()).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(self.config.seed ^ (self.epoch as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15));
        order.shuffle(&mut rng);
        let schedule = self.schedule();
        let last_good = (self.model.store.clone(), self.optimizer.clone());
        let mut sums = StepLosses::default();
        let mut lr = 0.0;
        for (b, batch) in order.chunks(self.config.batch_size).enumerate() {
            let mut acc: Vec<Option<Tensor<T>>> = vec![None; self.model.store.len()];
            let scale = T::one() / T::lit(batch.len() as f64);
            for &i in batch {
                // Non-finite parameters surface first as a numerical error in
                // matching; both cases are divergence.
                let (l, grads) = match self.sample_gradients(&self.samples[i]) {
                    Err(Error::Numerical(_)) => (StepLosses { total: f64::NAN, ..Default::default() }, Vec::new()),
                    other => other?,
                };
                if !l.total.is_finite() {
                    (self.model.store, self.optimizer) = last_good;
                    return Err(Error::Divergence { epoch: self.epoch, step: b, loss: l.total });
                }
                sums.total += l.total;
                sums.deep += l.deep;
                sums.sim += l.sim;
                sums.seg += l.seg;
                for (a, g) in acc.iter_mut().zip(grads) {
                    if let Some(g) = g {
                        let g = g.map(|x| x * scale);
                        match a {
                            Some(a) => a.add_assign(&g),
                            None => *a = Some(g),
                        }
                    }
                }
            }
            clip_gradients(&mut acc, self.config.grad_clip);
            lr = schedule.lr(self.optimizer.step);
            self.optimizer.update(&mut self.model.store, &acc, lr);
            self.model.clamp_tau();
        }
        let n = self.samples.len() as f64;
        let record = EpochRecord {
            epoch: self.epoch,
            total: sums.total / n,
            deep: sums.deep / n,
            sim: sums.sim / n,
            seg: sums.seg / n,
            lr,
            tau: self.model.tau(),
        };
        self.epoch += 1;
        self.curve.push(record.clone());
        Ok(record)
    }

    /// Runs the remaining configured epochs, reporting each to `progress`.
    pub fn run(&mut self, mut progress: impl FnMut(&EpochRecord)) -> Result<()> {
        while self.epoch < self.config.epochs {
            let r = self.run_epoch()?;
            progress(&r);
        }
        Ok(())
    }
}

/// Rescales `grads` so that their joint L2 norm is at most `max_norm`.
fn clip_gradients<T: Scalar>(grads: &mut [Option<Tensor<T>>], max_norm: f64) {
    if max_norm <= 0.0 {
        return;
    }
    let norm = grads.iter().flatten().flat_map(|g| g.data()).map(|&x| to_f64(x * x)).sum::<f64>().sqrt();
    if norm > max_norm {
        let scale = T::lit(max_norm / norm);
        for g in grads.iter_mut().flatten() {
            *g = g.map(|x| x * scale);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cmki::LossWeights;
    use crate::testutil::{tiny_model, tiny_setup};

    #[test]
    fn same_seed_same_trajectory() {
        let (config, samples) = tiny_setup();
        let run = || {
            let mut t =
                Trainer::new(tiny_model::<f32>(&config), config.train.clone(), config.loss.clone(), samples.clone())
                    .unwrap();
            t.run_epoch().unwrap();
            (t.curve, t.model.store)
        };
        let (a, sa) = run();
        let (b, sb) = run();
        assert_eq!(a, b);
        for ((_, _, x), (_, _, y)) in sa.iter().zip(sb.iter()) {
            assert_eq!(x.data(), y.data());
        }
    }

    fn param_grad(t: &Trainer<f64>, grads: &[Option<Tensor<f64>>], name: &str) -> f64 {
        let id = t.model.store.find(name).unwrap();
        grads[id.0].as_ref().map_or(0.0, |g| g.data().iter().map(|x| x.abs()).sum())
    }

    #[test]
    fn seg_only_weights_leave_alignment_without_gradient() {
        let (config, samples) = tiny_setup();
        let mut loss = config.loss.clone();
        loss.weights = LossWeights { lambda_deep: 0.0, lambda_sim: 0.0, lambda_seg: 1.0, ..loss.weights };
        let t = Trainer::new(tiny_model::<f64>(&config), config.train.clone(), loss, samples.clone()).unwrap();
        let (l, grads) = t.sample_gradients(&samples[0]).unwrap();
        assert_eq!(l.total, l.seg);
        assert_eq!(param_grad(&t, &grads, "text.tau"), 0.0);
        assert!(param_grad(&t, &grads, "decoder.tokens") > 0.0);
        assert!(param_grad(&t, &grads, "text.proj.weight") > 0.0);

        let full = Trainer::new(tiny_model::<f64>(&config), config.train.clone(), config.loss.clone(), samples.clone())
            .unwrap();
        let (_, grads) = full.sample_gradients(&samples[0]).unwrap();
        assert!(param_grad(&full, &grads, "text.tau") > 0.0);
    }

    #[test]
    fn clipping_caps_the_joint_norm() {
        let mut g = vec![Some(Tensor::new(&[2], vec![3.0f64, 0.0])), None, Some(Tensor::new(&[1], vec![4.0]))];
        clip_gradients(&mut g, 10.0);
        assert_eq!(g[0].as_ref().unwrap().data(), &[3.0, 0.0]);
        clip_gradients(&mut g, 1.0);
        assert!((g[0].as_ref().unwrap().data()[0] - 0.6).abs() < 1e-15);
        assert!((g[2].as_ref().unwrap().data()[0] - 0.8).abs() < 1e-15);
    }

    #[test]
    fn divergence_restores_parameters() {
        let (config, samples) = tiny_setup();
        let mut t = Trainer::new(tiny_model::<f32>(&config), config.train.clone(), config.loss.clone(), samples).unwrap();
        let id = t.model.store.find("decoder.tokens").unwrap();
        t.model.store.get_mut(id).data_mut()[0] = f32::NAN;
        let before = t.model.store.clone();
        let r = t.run_epoch();
        assert!(matches!(r, Err(Error::Divergence { epoch: 0, .. })), "{r:?}");
        assert_eq!(t.epoch, 0);
        assert_eq!(t.optimizer.step, 0);
        for ((_, _, x), (_, _, y)) in before.iter().zip(t.model.store.iter()) {
            assert_eq!(x.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>(), y.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>());
        }
    }
}
