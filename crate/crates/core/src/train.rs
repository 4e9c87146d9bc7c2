//! Plain minibatch SGD with momentum, shared by teacher training and the
//! evaluation harness.

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::augment::{self, AugmentPolicy};
use crate::nn::Network;
use crate::tensor::{grad, no_grad, Element, Tensor};
use crate::{Error, Result};

/// Borrowed images (`[N, C, H, W]`, row-major `f32`) with their labels.
#[derive(Debug, Clone, Copy)]
pub struct Samples<'a> {
    pub images: &'a [f32],
    pub item: [usize; 3],
    pub labels: &'a [usize],
}

impl<'a> Samples<'a> {
    pub fn new(images: &'a [f32], item: [usize; 3], labels: &'a [usize]) -> Result<Self> {
        let d: usize = item.iter().product();
        if d == 0 || images.len() != labels.len() * d {
            return Err(Error::Dimension(format!(
                "{} pixel values for {} items of shape {item:?}",
                images.len(),
                labels.len()
            )));
        }
        Ok(Self { images, item, labels })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn item_len(&self) -> usize {
        self.item.iter().product()
    }

    /// Gathers the listed items into an `[n, C, H, W]` tensor.
    pub fn batch<T: Element>(&self, idx: &[usize]) -> Tensor<T> {
        let d = self.item_len();
        let mut data = Vec::with_capacity(idx.len() * d);
        for &i in idx {
            data.extend(self.images[i * d..(i + 1) * d].iter().map(|&v| T::lit(f64::from(v))));
        }
        let [c, h, w] = self.item;
        Tensor::new(data, &[idx.len(), c, h, w]).expect("batch shape")
    }

    pub fn labels_of(&self, idx: &[usize]) -> Vec<usize> {
        idx.iter().map(|&i| self.labels[i]).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SgdConfig {
    pub lr: f64,
    pub momentum: f64,
    pub epochs: usize,
    pub batch_size: usize,
}

impl SgdConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("lr must be positive, got {}", self.lr)));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config(format!(
                "momentum must be in [0, 1), got {}",
                self.momentum
            )));
        }
        if self.epochs < 1 {
            return Err(Error::Config("epochs must be at least 1".into()));
        }
        if self.batch_size < 1 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        Ok(())
    }
}

/// Momentum-SGD state over a flat parameter vector: `v ← μv + g`, `θ ← θ − lr·v`.
#[derive(Debug, Clone)]
pub struct Momentum<T> {
    pub lr: T,
    pub mu: T,
    pub velocity: Vec<T>,
}

impl<T: Element> Momentum<T> {
    pub fn new(lr: T, mu: T, len: usize) -> Self {
        Self {
            lr,
            mu,
            velocity: vec![T::zero(); len],
        }
    }

    pub fn step(&mut self, params: &mut [T], grad: &[T]) {
        for ((p, v), &g) in params.iter_mut().zip(&mut self.velocity).zip(grad) {
            *v = self.mu * *v + g;
            *p = *p - self.lr * *v;
        }
    }
}

/// Trains `net` in place. `on_step(step, net)` runs after every optimizer
/// step, with `step` counted from 1. A non-finite loss is reported as a
/// training error tagged with `run` and the failing step.
pub fn fit<T: Element, R: Rng>(
    net: &mut Network<T>,
    data: &Samples<'_>,
    cfg: &SgdConfig,
    policy: &AugmentPolicy,
    rng: &mut R,
    run: usize,
    mut on_step: impl FnMut(usize, &Network<T>) -> Result<()>,
) -> Result<()> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::Dimension("cannot train on an empty dataset".into()));
    }
    let mut flat = net.param_vector().0;
    let mut opt = Momentum::new(T::lit(cfg.lr), T::lit(cfg.momentum), flat.len());
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut step = 0;
    for _ in 0..cfg.epochs {
        order.shuffle(rng);
        for idx in order.chunks(cfg.batch_size) {
            step += 1;
            let x = augment::apply(policy, &data.batch::<T>(idx), rng)?;
            let loss = net.forward(&x)?.cross_entropy(&data.labels_of(idx))?;
            let value = loss.item()?;
            if !value.is_finite() {
                return Err(Error::Training {
                    expert: run,
                    step,
                    loss: value.as_f64(),
                });
            }
            let grads = grad(&loss, net.params(), false)?;
            let g: Vec<T> = grads.iter().flat_map(|t| t.data().iter().copied()).collect();
            opt.step(&mut flat, &g);
            net.set_params(&flat)?;
            on_step(step, net)?;
        }
    }
    Ok(())
}

/// Fraction of `data` classified correctly, evaluated in chunks without
/// recording a graph.
pub fn accuracy<T: Element>(net: &Network<T>, data: &Samples<'_>) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::Dimension("cannot measure accuracy on an empty dataset".into()));
    }
    const CHUNK: usize = 256;
    let classes = net.spec().classes;
    let mut correct = 0usize;
    no_grad(|| -> Result<()> {
        let all: Vec<usize> = (0..data.len()).collect();
        for idx in all.chunks(CHUNK) {
            let logits = net.forward(&data.batch::<T>(idx))?;
            for (row, &i) in logits.data().chunks(classes).zip(idx) {
                let pred = row
                    .iter()
                    .enumerate()
                    .fold(
                        (0, T::neg_infinity()),
                        |best, (k, &v)| if v > best.1 { (k, v) } else { best },
                    )
                    .0;
                correct += usize::from(pred == data.labels[i]);
            }
        }
        Ok(())
    })?;
    Ok(correct as f64 / data.len() as f64)
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::nn::{Architecture, ModelSpec};

    fn two_clusters() -> (Vec<f32>, Vec<usize>) {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut images = Vec::new();
        let mut labels = Vec::new();
        for i in 0..80 {
            let label = i % 2;
            let centre = if label == 0 { -1.0 } else { 1.0 };
            images.push(centre + rng.random_range(-0.3..0.3));
            images.push(rng.random_range(-1.0..1.0));
            labels.push(label);
        }
        (images, labels)
    }

    #[test]
    fn momentum_update_by_hand() {
        let mut opt = Momentum::new(0.1, 0.9, 1);
        let mut p = [1.0];
        opt.step(&mut p, &[2.0]);
        assert!((p[0] - 0.8f64).abs() < 1e-15);
        opt.step(&mut p, &[2.0]);
        // v = 0.9·2 + 2 = 3.8
        assert!((p[0] - (0.8 - 0.38f64)).abs() < 1e-15);
    }

    #[test]
    fn fit_learns_separable_clusters_and_is_deterministic() {
        let (images, labels) = two_clusters();
        let data = Samples::new(&images, [2, 1, 1], &labels).unwrap();
        let spec = ModelSpec::new(Architecture::Mlp, 1, 8, [2, 1, 1], 2);
        let cfg = SgdConfig {
            lr: 0.1,
            momentum: 0.9,
            epochs: 20,
            batch_size: 16,
        };
        let run = || {
            let mut net = Network::<f32>::build(&spec, 1).unwrap();
            let mut steps = 0;
            fit(
                &mut net,
                &data,
                &cfg,
                &AugmentPolicy::none(),
                &mut ChaCha8Rng::seed_from_u64(2),
                0,
                |s, _| {
                    steps = s;
                    Ok(())
                },
            )
            .unwrap();
            assert_eq!(steps, 20 * 5);
            net.param_vector().0
        };
        let first = run();
        assert_eq!(first, run());
        let net = Network::from_params(&spec, &first).unwrap();
        assert!(accuracy(&net, &data).unwrap() > 0.95);
    }

    #[test]
    fn divergence_reports_the_step() {
        let (images, labels) = two_clusters();
        let data = Samples::new(&images, [2, 1, 1], &labels).unwrap();
        let spec = ModelSpec::new(Architecture::Mlp, 1, 8, [2, 1, 1], 2);
        let cfg = SgdConfig {
            lr: 1e30,
            momentum: 0.0,
            epochs: 5,
            batch_size: 16,
        };
        let mut net = Network::<f32>::build(&spec, 1).unwrap();
        let err = fit(
            &mut net,
            &data,
            &cfg,
            &AugmentPolicy::none(),
            &mut ChaCha8Rng::seed_from_u64(0),
            7,
            |_, _| Ok(()),
        );
        match err {
            Err(Error::Training { expert: 7, step, .. }) => assert!(step > 1),
            other => panic!("expected a training error, got {other:?}"),
        }
    }

    #[test]
    fn rejects_zero_epochs_and_mismatched_samples() {
        let cfg = SgdConfig {
            lr: 0.1,
            momentum: 0.9,
            epochs: 0,
            batch_size: 4,
        };
        assert!(matches!(cfg.validate(), Err(Error::Config(_))));
        assert!(Samples::new(&[0.0; 5], [2, 1, 1], &[0, 1]).is_err());
    }
}
