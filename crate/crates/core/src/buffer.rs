//! Teacher trajectories: training, storage and sampling.
//!
//! # File format (`TJBF`, version 1, little-endian)
//!
//! ```text
//! magic "TJBF" | u32 version
//! model spec:  u32 arch, u64 depth, u64 width, u64×3 input, u64 classes
//! hyper:       f64 lr, f64 momentum, u64 epochs, u64 batch_size,
//!              u64 snapshot_stride (0 = once per epoch), f64 ema_decay
//! u64 E, u64 T, u64 P
//! f32 × E·(T+1)·P   snapshots in [expert][t] order
//! u32 crc32 of everything above
//! ```

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::augment::AugmentPolicy;
use crate::binio::{Reader, Writer};
use crate::nn::{Architecture, ModelSpec, Network, ParamVector};
use crate::train::{self, Samples, SgdConfig};
use crate::{derive_seed, Error, Result};

const MAGIC: &[u8; 4] = b"TJBF";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrajectoryHyper {
    pub lr: f64,
    pub momentum: f64,
    /// Teacher epochs; with the default stride this is also T.
    pub epochs: usize,
    pub batch_size: usize,
    /// Optimizer steps per snapshot; `None` records once per epoch.
    pub snapshot_stride: Option<usize>,
    /// Recorded snapshots are an exponential moving average of the weights
    /// with this decay. 0 records the raw weights.
    pub ema_decay: f64,
}

impl Default for TrajectoryHyper {
    fn default() -> Self {
        Self {
            lr: 0.01,
            momentum: 0.9,
            epochs: 50,
            batch_size: 256,
            snapshot_stride: None,
            ema_decay: 0.0,
        }
    }
}

impl TrajectoryHyper {
    pub fn validate(&self) -> Result<()> {
        self.sgd().validate()?;
        if self.snapshot_stride == Some(0) {
            return Err(Error::Config("snapshot_stride must be at least 1".into()));
        }
        if !(0.0..1.0).contains(&self.ema_decay) {
            return Err(Error::Config(format!(
                "ema_decay must be in [0, 1), got {}",
                self.ema_decay
            )));
        }
        Ok(())
    }

    fn sgd(&self) -> SgdConfig {
        SgdConfig {
            lr: self.lr,
            momentum: self.momentum,
            epochs: self.epochs,
            batch_size: self.batch_size,
        }
    }

    pub fn steps_per_epoch(&self, n: usize) -> usize {
        n.div_ceil(self.batch_size)
    }

    /// Optimizer steps between snapshots for a dataset of `n` items.
    pub fn stride(&self, n: usize) -> usize {
        self.snapshot_stride.unwrap_or_else(|| self.steps_per_epoch(n))
    }

    /// Number of recorded steps T (snapshots per expert minus one).
    pub fn trajectory_len(&self, n: usize) -> usize {
        self.epochs * self.steps_per_epoch(n) / self.stride(n)
    }
}

/// Trains one teacher and returns its T+1 snapshots, the first being the
/// initialization. `expert` only tags errors.
pub fn train_expert(
    data: &Samples<'_>,
    spec: &ModelSpec,
    hyper: &TrajectoryHyper,
    seed: u64,
    expert: usize,
) -> Result<Vec<ParamVector<f32>>> {
    hyper.validate()?;
    if data.is_empty() {
        return Err(Error::Dimension("teacher training needs a nonempty dataset".into()));
    }
    let mut net = Network::<f32>::build(spec, derive_seed(seed, 0))?;
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, 1));
    let stride = hyper.stride(data.len());
    let decay = hyper.ema_decay as f32;
    let init = net.param_vector();
    let mut ema = init.0.clone();
    let mut snapshots = vec![init];
    train::fit(
        &mut net,
        data,
        &hyper.sgd(),
        &AugmentPolicy::none(),
        &mut rng,
        expert,
        |step, net| {
            if decay > 0.0 {
                for (e, p) in ema.iter_mut().zip(net.param_vector().0) {
                    *e = decay * *e + (1.0 - decay) * p;
                }
            }
            if step % stride == 0 {
                snapshots.push(if decay > 0.0 {
                    ParamVector(ema.clone())
                } else {
                    net.param_vector()
                });
            }
            Ok(())
        },
    )?;
    Ok(snapshots)
}

/// All snapshots of all experts, stored flat in `[expert][t][param]` order.
#[derive(Debug, Clone, PartialEq)]
pub struct TrajectoryBuffer {
    spec: ModelSpec,
    hyper: TrajectoryHyper,
    experts: usize,
    steps: usize,
    params: usize,
    data: Vec<f32>,
}

/// Read-only view of one expert's snapshots.
#[derive(Debug, Clone, Copy)]
pub struct ExpertView<'a> {
    index: usize,
    steps: usize,
    params: usize,
    data: &'a [f32],
}

impl<'a> ExpertView<'a> {
    pub fn index(&self) -> usize {
        self.index
    }

    /// T; valid snapshot indices are `0..=T`.
    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn snapshot(&self, t: usize) -> Result<&'a [f32]> {
        if t > self.steps {
            return Err(Error::State(format!(
                "snapshot {t} requested, expert has 0..={}",
                self.steps
            )));
        }
        Ok(&self.data[t * self.params..(t + 1) * self.params])
    }
}

impl TrajectoryBuffer {
    /// Assembles a buffer from per-expert snapshot lists, checking that every
    /// expert has the same number of snapshots of length `spec.num_params()`.
    pub fn from_experts(spec: ModelSpec, hyper: TrajectoryHyper, experts: Vec<Vec<ParamVector<f32>>>) -> Result<Self> {
        spec.validate()?;
        let params = spec.num_params();
        let snaps = experts.first().map_or(0, Vec::len);
        if snaps == 0 {
            return Err(Error::State("each expert needs at least the initial snapshot".into()));
        }
        let mut data = Vec::with_capacity(experts.len() * snaps * params);
        for (e, list) in experts.iter().enumerate() {
            if list.len() != snaps {
                return Err(Error::State(format!(
                    "expert {e} has {} snapshots, expert 0 has {snaps}",
                    list.len()
                )));
            }
            for (t, p) in list.iter().enumerate() {
                if p.len() != params {
                    return Err(Error::State(format!(
                        "expert {e} snapshot {t} has {} parameters, model has {params}",
                        p.len()
                    )));
                }
                data.extend_from_slice(p.as_slice());
            }
        }
        Ok(Self {
            spec,
            hyper,
            experts: experts.len(),
            steps: snaps - 1,
            params,
            data,
        })
    }

    /// Trains `experts` teachers in parallel. Expert `e` uses
    /// `derive_seed(seed, e)`, so the result does not depend on the thread
    /// count.
    pub fn generate(
        data: &Samples<'_>,
        spec: &ModelSpec,
        hyper: &TrajectoryHyper,
        experts: usize,
        seed: u64,
    ) -> Result<Self> {
        if experts == 0 {
            return Err(Error::Config("expert count must be at least 1".into()));
        }
        spec.validate()?;
        hyper.validate()?;
        let trained = (0..experts)
            .into_par_iter()
            .map(|e| train_expert(data, spec, hyper, derive_seed(seed, e as u64), e))
            .collect::<Result<Vec<_>>>()?;
        Self::from_experts(spec.clone(), hyper.clone(), trained)
    }

    pub fn spec(&self) -> &ModelSpec {
        &self.spec
    }

    pub fn hyper(&self) -> &TrajectoryHyper {
        &self.hyper
    }

    pub fn experts(&self) -> usize {
        self.experts
    }

    /// T: snapshots per expert minus one.
    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn num_params(&self) -> usize {
        self.params
    }

    pub fn expert(&self, e: usize) -> Result<ExpertView<'_>> {
        if e >= self.experts {
            return Err(Error::State(format!(
                "expert {e} requested, buffer has {}",
                self.experts
            )));
        }
        let len = (self.steps + 1) * self.params;
        Ok(ExpertView {
            index: e,
            steps: self.steps,
            params: self.params,
            data: &self.data[e * len..(e + 1) * len],
        })
    }

    /// Picks an expert uniformly at random.
    pub fn sample_trajectory<R: Rng + ?Sized>(&self, rng: &mut R) -> Result<ExpertView<'_>> {
        if self.experts == 0 {
            return Err(Error::State("cannot sample from an empty trajectory buffer".into()));
        }
        self.expert(rng.random_range(0..self.experts))
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = Writer::new(MAGIC, FORMAT_VERSION);
        let s = &self.spec;
        w.u32(s.arch.code());
        w.usize(s.depth);
        w.usize(s.width);
        for &d in &s.input {
            w.usize(d);
        }
        w.usize(s.classes);
        let h = &self.hyper;
        w.f64(h.lr);
        w.f64(h.momentum);
        w.usize(h.epochs);
        w.usize(h.batch_size);
        w.usize(h.snapshot_stride.unwrap_or(0));
        w.f64(h.ema_decay);
        w.usize(self.experts);
        w.usize(self.steps);
        w.usize(self.params);
        w.f32s(self.data.iter().copied());
        w.finish()
    }

    pub fn from_bytes(buf: &[u8]) -> Result<Self> {
        let mut r = Reader::open(buf, MAGIC, FORMAT_VERSION, "trajectory file")?;
        let arch = Architecture::from_code(r.u32()?).map_err(|e| Error::Format(format!("trajectory file: {e}")))?;
        let depth = r.usize()?;
        let width = r.usize()?;
        let input = [r.usize()?, r.usize()?, r.usize()?];
        let classes = r.usize()?;
        let spec = ModelSpec::new(arch, depth, width, input, classes);
        spec.validate()
            .map_err(|e| Error::Format(format!("trajectory file: invalid model spec: {e}")))?;
        let hyper = TrajectoryHyper {
            lr: r.f64()?,
            momentum: r.f64()?,
            epochs: r.usize()?,
            batch_size: r.usize()?,
            snapshot_stride: Some(r.usize()?).filter(|&s| s != 0),
            ema_decay: r.f64()?,
        };
        let experts = r.usize()?;
        let steps = r.usize()?;
        let params = r.usize()?;
        if params != spec.num_params() {
            return Err(Error::Format(format!(
                "trajectory file: P = {params} but the model spec has {} parameters",
                spec.num_params()
            )));
        }
        let count = steps
            .checked_add(1)
            .and_then(|s| s.checked_mul(experts))
            .and_then(|s| s.checked_mul(params))
            .and_then(|c| c.checked_mul(4).map(|_| c))
            .ok_or_else(|| Error::Format("trajectory file: snapshot count overflows".into()))?;
        r.expect_remaining(count * 4)?;
        let data = r.f32s(count)?;
        r.finish()?;
        Ok(Self {
            spec,
            hyper,
            experts,
            steps,
            params,
            data,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_spec() -> ModelSpec {
        ModelSpec::new(Architecture::Mlp, 1, 2, [2, 1, 1], 2)
    }

    /// A buffer with arbitrary distinct values, no training involved.
    fn synthetic_buffer(experts: usize, steps: usize) -> TrajectoryBuffer {
        let spec = tiny_spec();
        let p = spec.num_params();
        let lists = (0..experts)
            .map(|e| {
                (0..=steps)
                    .map(|t| ParamVector((0..p).map(|i| (e * 1000 + t * 10) as f32 + i as f32 * 0.25).collect()))
                    .collect()
            })
            .collect();
        TrajectoryBuffer::from_experts(spec, TrajectoryHyper::default(), lists).unwrap()
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let b = synthetic_buffer(2, 3);
        let bytes = b.to_bytes();
        let back = TrajectoryBuffer::from_bytes(&bytes).unwrap();
        assert_eq!(back, b);
        assert_eq!(back.to_bytes(), bytes);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.tjbf");
        b.save(&path).unwrap();
        assert_eq!(TrajectoryBuffer::load(&path).unwrap(), b);
    }

    #[test]
    fn wrong_magic_and_version_are_format_errors() {
        let mut bytes = synthetic_buffer(1, 1).to_bytes();
        bytes[0] = b'X';
        let err = TrajectoryBuffer::from_bytes(&bytes).unwrap_err();
        assert!(matches!(&err, Error::Format(m) if m.contains("magic")), "{err}");
        let mut bytes = synthetic_buffer(1, 1).to_bytes();
        bytes[4] = 9;
        let err = TrajectoryBuffer::from_bytes(&bytes).unwrap_err();
        assert!(matches!(&err, Error::Format(m) if m.contains("version")), "{err}");
    }

    #[test]
    fn truncation_names_expected_and_actual_sizes() {
        let bytes = synthetic_buffer(2, 3).to_bytes();
        let cut = &bytes[..bytes.len() - 30];
        let err = TrajectoryBuffer::from_bytes(cut).unwrap_err();
        let msg = err.to_string();
        assert!(
            msg.contains(&bytes.len().to_string()) && msg.contains(&cut.len().to_string()),
            "{msg}"
        );
    }

    #[test]
    fn flipped_bit_fails_the_checksum() {
        let mut bytes = synthetic_buffer(2, 3).to_bytes();
        let n = bytes.len();
        bytes[n - 10] ^= 1;
        let err = TrajectoryBuffer::from_bytes(&bytes).unwrap_err();
        assert!(err.to_string().contains("checksum"), "{err}");
    }

    #[test]
    fn views_expose_stored_snapshots() {
        let b = synthetic_buffer(3, 2);
        let v = b.expert(1).unwrap();
        assert_eq!(v.snapshot(0).unwrap()[0], 1000.0);
        assert_eq!(v.snapshot(2).unwrap()[1], 1020.25);
        assert!(v.snapshot(3).is_err());
        assert!(b.expert(3).is_err());
    }

    #[test]
    fn single_expert_is_always_sampled() {
        let b = synthetic_buffer(1, 1);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for _ in 0..50 {
            assert_eq!(b.sample_trajectory(&mut rng).unwrap().index(), 0);
        }
    }

    #[test]
    fn sampling_is_uniform_within_three_sigma() {
        let b = synthetic_buffer(100, 0);
        let mut rng = ChaCha8Rng::seed_from_u64(12345);
        let n = 10_000;
        let mut counts = [0usize; 100];
        for _ in 0..n {
            counts[b.sample_trajectory(&mut rng).unwrap().index()] += 1;
        }
        let p = 0.01;
        let mean = n as f64 * p;
        let sigma = (n as f64 * p * (1.0 - p)).sqrt();
        for (e, &c) in counts.iter().enumerate() {
            assert!((c as f64 - mean).abs() <= 3.0 * sigma, "expert {e}: {c}");
        }
    }

    #[test]
    fn zero_epochs_rejected() {
        let hyper = TrajectoryHyper {
            epochs: 0,
            ..TrajectoryHyper::default()
        };
        let images = [0.0f32; 4];
        let labels = [0, 1];
        let data = Samples::new(&images, [2, 1, 1], &labels).unwrap();
        assert!(train_expert(&data, &tiny_spec(), &hyper, 0, 0).is_err());
    }

    #[test]
    fn mismatched_snapshot_counts_rejected() {
        let spec = tiny_spec();
        let p = ParamVector(vec![0.0; spec.num_params()]);
        let lists = vec![vec![p.clone(), p.clone()], vec![p]];
        assert!(matches!(
            TrajectoryBuffer::from_experts(spec, TrajectoryHyper::default(), lists),
            Err(Error::State(_))
        ));
    }
}
