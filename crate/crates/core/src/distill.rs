//! Progressive trajectory matching with overlap mitigation.
//!
//! Each outer iteration starts a student at a teacher's snapshot, trains it
//! for `t` snapshot units on the synthetic set (keeping the whole unrolled
//! computation differentiable), and moves the synthetic pixels to reduce
//!
//! ```text
//! β1 · ‖θ_t^S − θ_t^D‖² / ‖θ_t^D − θ_0^D‖²  +  β2 · overlap(S^f, S^c)
//! ```
//!
//! The overlap term is the class-masked kernel double sum
//! `Σ_i Σ_j 2k(f_i, c_j) − k(c_i, c_j) − k(f_i, f_j)`, i.e. minus `n²` times the
//! biased squared MMD between the foundation and complement halves.
//!
//! Under the progressive schedule `t` grows from 1 to `T_max` and every
//! student starts from the teacher's initialization. At retraining points
//! `m_i = T_max − T_max/(k+1)·i` the complement half is rolled back to the
//! copy saved when `t` first reached the midpoint `(m_i + m_{i+1})/2`
//! (`m_{k+1} = 0`). Each snapshot and each rollback happens only the first
//! time its `t` value is reached.

use std::collections::{BTreeMap, BTreeSet};
use std::io::Write;
use std::path::Path;

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::augment::{self, AugmentPolicy};
use crate::binio::{Reader, Writer};
use crate::buffer::TrajectoryBuffer;
use crate::evaldata::{InitMode, SyntheticDataset};
use crate::nn::{forward, unflatten, ModelSpec};
use crate::tensor::{grad, no_grad, Element, Tensor};
use crate::{derive_seed, Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScheduleMode {
    /// `t(i) = clamp(⌈i·T_max/N⌉, 1, T_max)`, always starting at snapshot 0.
    Progressive,
    /// `t = T_max` every iteration, starting at snapshot 0.
    Fixed,
    /// `t = segment_len`, starting at a random snapshot in `0..=T_max − t`.
    RandomSegment,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DistillConfig {
    /// Outer iterations N.
    pub iterations: usize,
    /// Largest matched step size T_max, in snapshot indices.
    pub max_step: usize,
    pub schedule: ScheduleMode,
    /// Segment length for `random_segment`; defaults to `max(1, T_max / 2)`.
    pub segment_len: Option<usize>,
    /// Student SGD steps per snapshot unit.
    pub steps_per_snapshot: usize,
    /// Initial student learning rate η.
    pub student_lr: f64,
    /// Learn η (through its logarithm) alongside the pixels.
    pub learn_lr: bool,
    pub lr_lr: f64,
    pub image_lr: f64,
    /// Momentum shared by the pixel and η updates.
    pub image_momentum: f64,
    pub beta_match: f64,
    pub beta_overlap: f64,
    /// Kernel bandwidth; `None` uses the median pairwise distance of S at
    /// initialization.
    pub sigma: Option<f64>,
    /// Number of retraining points k.
    pub retrain_points: usize,
    /// Student minibatch size; `None` uses all of S every step.
    pub batch_size: Option<usize>,
    pub ipc: usize,
    pub init: InitMode,
    pub augment: AugmentPolicy,
    /// Master seed for per-iteration generators; set by the caller rather
    /// than read from config files.
    #[serde(skip)]
    pub seed: u64,
}

impl Default for DistillConfig {
    fn default() -> Self {
        Self {
            iterations: 1000,
            max_step: 20,
            schedule: ScheduleMode::Progressive,
            segment_len: None,
            steps_per_snapshot: 1,
            student_lr: 0.01,
            learn_lr: true,
            lr_lr: 1e-3,
            image_lr: 100.0,
            image_momentum: 0.5,
            beta_match: 1.0,
            beta_overlap: 0.1,
            sigma: None,
            retrain_points: 4,
            batch_size: None,
            ipc: 2,
            init: InitMode::FromReal,
            augment: AugmentPolicy::default(),
            seed: 0,
        }
    }
}

impl DistillConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.iterations < 1 {
            return bad("iterations must be at least 1".into());
        }
        if self.max_step < 1 {
            return bad("max_step must be at least 1".into());
        }
        if let Some(len) = self.segment_len {
            if len < 1 || len > self.max_step {
                return bad(format!("segment_len {len} must be in 1..={}", self.max_step));
            }
        }
        if self.steps_per_snapshot < 1 {
            return bad("steps_per_snapshot must be at least 1".into());
        }
        for (name, v) in [("student_lr", self.student_lr), ("image_lr", self.image_lr)] {
            if !(v > 0.0 && v.is_finite()) {
                return bad(format!("{name} must be positive, got {v}"));
            }
        }
        for (name, v) in [
            ("lr_lr", self.lr_lr),
            ("beta_match", self.beta_match),
            ("beta_overlap", self.beta_overlap),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return bad(format!("{name} must be non-negative, got {v}"));
            }
        }
        if !(0.0..1.0).contains(&self.image_momentum) {
            return bad(format!("image_momentum must be in [0, 1), got {}", self.image_momentum));
        }
        if let Some(s) = self.sigma {
            if !(s > 0.0 && s.is_finite()) {
                return bad(format!("sigma must be positive, got {s}"));
            }
        }
        if self.batch_size == Some(0) {
            return bad("batch_size must be at least 1".into());
        }
        if self.ipc == 0 || !self.ipc.is_multiple_of(2) {
            return Err(Error::Partition(format!(
                "ipc must be a positive even number, got {}",
                self.ipc
            )));
        }
        self.augment.validate()
    }

    pub fn segment_len(&self) -> usize {
        self.segment_len.unwrap_or((self.max_step / 2).max(1))
    }
}

/// Per-iteration step sizes and the retraining plan.
#[derive(Debug, Clone, PartialEq)]
pub struct DistillSchedule {
    steps: Vec<usize>,
    /// `m_1 > m_2 > … > m_k`.
    retrain: Vec<usize>,
    /// For each retraining point, the step size at which the snapshot it
    /// restores is taken, if that step size is ever visited.
    snapshot_at: Vec<Option<usize>>,
}

impl DistillSchedule {
    /// Step size of 1-based iteration `i`.
    pub fn t(&self, i: usize) -> usize {
        self.steps[i - 1]
    }

    pub fn steps(&self) -> &[usize] {
        &self.steps
    }

    pub fn retraining_points(&self) -> &[usize] {
        &self.retrain
    }

    /// `(m_i, snapshot step)` pairs.
    pub fn retraining_plan(&self) -> impl Iterator<Item = (usize, Option<usize>)> + '_ {
        self.retrain.iter().copied().zip(self.snapshot_at.iter().copied())
    }

    fn is_snapshot_step(&self, t: usize) -> bool {
        self.snapshot_at.contains(&Some(t))
    }

    fn restore_step(&self, t: usize) -> Option<Option<usize>> {
        self.retrain.iter().position(|&m| m == t).map(|j| self.snapshot_at[j])
    }
}

/// Retraining points `m_i = T − T/(k+1)·i`, rounded, deduplicated and kept
/// only when at least 1.
pub fn retraining_points(max_step: usize, k: usize) -> Vec<usize> {
    let t = max_step as f64;
    let mut out: Vec<usize> = Vec::with_capacity(k);
    for i in 1..=k {
        let m = (t - t / (k as f64 + 1.0) * i as f64).round();
        if m >= 1.0 && !out.contains(&(m as usize)) {
            out.push(m as usize);
        }
    }
    out
}

pub fn make_schedule(config: &DistillConfig) -> Result<DistillSchedule> {
    config.validate()?;
    let (n, tmax, k) = (config.iterations, config.max_step, config.retrain_points);
    if k > 0 && k >= tmax {
        return Err(Error::Schedule(format!(
            "{k} retraining points do not fit between 1 and T_max = {tmax}"
        )));
    }
    let steps: Vec<usize> = match config.schedule {
        ScheduleMode::Progressive => (1..=n).map(|i| (i * tmax).div_ceil(n).clamp(1, tmax)).collect(),
        ScheduleMode::Fixed => vec![tmax; n],
        ScheduleMode::RandomSegment => vec![config.segment_len(); n],
    };
    let visited: BTreeSet<usize> = steps.iter().copied().collect();
    let retrain = retraining_points(tmax, k);
    let snapshot_at = retrain
        .iter()
        .enumerate()
        .map(|(j, &m)| {
            let next = retrain.get(j + 1).copied().unwrap_or(0);
            let mid = (m + next) as f64 / 2.0;
            // Nearest visited value not above m; ties go to the smaller one.
            visited.range(..=m).copied().min_by(|&a, &b| {
                (a as f64 - mid)
                    .abs()
                    .total_cmp(&(b as f64 - mid).abs())
                    .then(a.cmp(&b))
            })
        })
        .collect();
    Ok(DistillSchedule {
        steps,
        retrain,
        snapshot_at,
    })
}

/// Runs `steps` differentiable SGD steps `θ ← θ − η·∇ℓ(θ)`. `loss(θ, step)`
/// gives the inner loss for 1-based `step`. With `create_graph` the result
/// stays differentiable with respect to everything the losses and `lr`
/// depend on.
pub fn unroll<T: Element>(
    params: Vec<Tensor<T>>,
    steps: usize,
    lr: &Tensor<T>,
    create_graph: bool,
    mut loss: impl FnMut(&[Tensor<T>], usize) -> Result<Tensor<T>>,
) -> Result<Vec<Tensor<T>>> {
    let mut theta = params;
    for step in 1..=steps {
        let l = loss(&theta, step)?;
        if !l.is_finite() {
            return Err(Error::Unroll { step });
        }
        let grads = grad(&l, &theta, create_graph)?;
        theta = theta
            .iter()
            .zip(&grads)
            .map(|(p, g)| {
                let next = p.sub(&g.mul_scalar(lr)?)?;
                Ok(if create_graph { next } else { next.detach_param() })
            })
            .collect::<Result<_>>()?;
    }
    Ok(theta)
}

/// Everything the outer objective needs besides the pixels and η.
#[derive(Debug, Clone)]
pub struct OuterProblem<'a, T: Element> {
    pub spec: &'a ModelSpec,
    /// Teacher snapshot the student starts from.
    pub start: &'a [T],
    /// Teacher snapshot the student should reach.
    pub target: &'a [T],
    pub labels: &'a [usize],
    pub foundation: &'a [usize],
    pub complement: &'a [usize],
    /// Student SGD steps.
    pub steps: usize,
    pub batch_size: Option<usize>,
    pub policy: &'a AugmentPolicy,
    pub beta_match: f64,
    pub beta_overlap: f64,
    pub sigma: f64,
}

/// The pieces of one outer objective evaluation.
pub struct OuterLoss<T: Element> {
    pub total: Tensor<T>,
    pub matching: Tensor<T>,
    pub overlap: Tensor<T>,
}

/// Unrolls a student from `problem.start` on `images` (`[n, C, H, W]`) with
/// learning rate `exp(log_lr)` and returns `β1·L_match + β2·L_overlap`.
/// Minibatches and augmentations are drawn from `rng`, so a fixed generator
/// state makes this a deterministic function of the pixels.
pub fn outer_objective<T: Element, R: Rng>(
    problem: &OuterProblem<'_, T>,
    images: &Tensor<T>,
    log_lr: &Tensor<T>,
    create_graph: bool,
    rng: &mut R,
) -> Result<OuterLoss<T>> {
    let n = images.shape()[0];
    let theta0 = unflatten(problem.spec, problem.start, true)?;
    let lr = log_lr.exp();
    let theta = unroll(theta0, problem.steps, &lr, create_graph, |theta, _| {
        let idx: Vec<usize> = match problem.batch_size {
            Some(b) if b < n => sample(rng, n, b).into_vec(),
            _ => (0..n).collect(),
        };
        let x = augment::apply(problem.policy, &images.gather_rows(&idx)?, rng)?;
        let labels: Vec<usize> = idx.iter().map(|&i| problem.labels[i]).collect();
        forward(problem.spec, theta, &x)?.cross_entropy(&labels)
    })?;
    let matching = matching_loss(&Tensor::concat(&theta), problem.target, problem.start)?;
    let d = images.numel() / n.max(1);
    let overlap = if problem.beta_overlap > 0.0 {
        let f = images
            .gather_rows(problem.foundation)?
            .reshape(&[problem.foundation.len(), d])?;
        let c = images
            .gather_rows(problem.complement)?
            .reshape(&[problem.complement.len(), d])?;
        let fl: Vec<usize> = problem.foundation.iter().map(|&i| problem.labels[i]).collect();
        let cl: Vec<usize> = problem.complement.iter().map(|&i| problem.labels[i]).collect();
        overlap_loss(&f, &c, &fl, &cl, T::lit(problem.sigma))?
    } else {
        Tensor::scalar(T::zero())
    };
    let total = matching
        .scale(T::lit(problem.beta_match))
        .add(&overlap.scale(T::lit(problem.beta_overlap)))?;
    Ok(OuterLoss {
        total,
        matching,
        overlap,
    })
}

/// `‖θ^S − target‖² / ‖target − start‖²`, differentiable in `θ^S`.
pub fn matching_loss<T: Element>(student: &Tensor<T>, target: &[T], start: &[T]) -> Result<Tensor<T>> {
    if student.numel() != target.len() || target.len() != start.len() {
        return Err(Error::Dimension(format!(
            "matching_loss: lengths {}, {} and {} differ",
            student.numel(),
            target.len(),
            start.len()
        )));
    }
    let denom = target
        .iter()
        .zip(start)
        .fold(T::zero(), |acc, (&a, &b)| acc + (a - b) * (a - b));
    if denom == T::zero() {
        return Err(Error::DegenerateTrajectory(
            "target and start snapshots are identical".into(),
        ));
    }
    let target = Tensor::new(target.to_vec(), &[target.len()])?;
    Ok(student
        .reshape(&[target.numel()])?
        .sub(&target)?
        .square()
        .sum()
        .div_scalar(denom))
}

/// `exp(−‖a − b‖² / 2σ²)` for same-class pairs, 0 otherwise.
pub fn gaussian_kernel(a: &[f64], b: &[f64], sigma: f64, class_a: usize, class_b: usize) -> f64 {
    if class_a != class_b {
        return 0.0;
    }
    let d = a.iter().zip(b).fold(0.0, |acc, (x, y)| acc + (x - y) * (x - y));
    (-d / (2.0 * sigma * sigma)).exp()
}

fn masked_kernel<T: Element>(a: &Tensor<T>, b: &Tensor<T>, la: &[usize], lb: &[usize], sigma: T) -> Result<Tensor<T>> {
    let two_sigma_sq = T::lit(2.0) * sigma * sigma;
    let k = a.pairwise_sq_dist(b)?.neg().div_scalar(two_sigma_sq).exp();
    let mask = la
        .iter()
        .flat_map(|&x| lb.iter().map(move |&y| if x == y { T::one() } else { T::zero() }))
        .collect();
    k.mul(&Tensor::new(mask, &[la.len(), lb.len()])?)
}

/// `Σ_i Σ_j 2k(f_i, c_j) − k(c_i, c_j) − k(f_i, f_j)` over `[n, d]` subsets.
pub fn overlap_loss<T: Element>(
    f: &Tensor<T>,
    c: &Tensor<T>,
    f_labels: &[usize],
    c_labels: &[usize],
    sigma: T,
) -> Result<Tensor<T>> {
    if f.shape()[0] != c.shape()[0] || f_labels.len() != f.shape()[0] || c_labels.len() != c.shape()[0] {
        return Err(Error::Partition(format!(
            "overlap_loss needs equal subsets, got {} foundation and {} complement items",
            f.shape()[0],
            c.shape()[0]
        )));
    }
    let kfc = masked_kernel(f, c, f_labels, c_labels, sigma)?;
    let kcc = masked_kernel(c, c, c_labels, c_labels, sigma)?;
    let kff = masked_kernel(f, f, f_labels, f_labels, sigma)?;
    Ok(kfc.scale(T::lit(2.0)).sub(&kcc)?.sub(&kff)?.sum())
}

/// Class-masked biased MMD implied by an overlap loss over `n` pairs.
pub fn mmd_from_overlap(overlap: f64, n: usize) -> f64 {
    (-overlap / (n * n) as f64).max(0.0).sqrt()
}

/// Median pairwise Euclidean distance between the items of `s`, or 1 when
/// that is zero or undefined.
pub fn median_bandwidth(s: &SyntheticDataset) -> f64 {
    let d = s.item_len();
    let mut dists = Vec::new();
    for i in 0..s.len() {
        for j in i + 1..s.len() {
            let a = &s.images[i * d..(i + 1) * d];
            let b = &s.images[j * d..(j + 1) * d];
            let sq = a.iter().zip(b).fold(0.0, |acc, (&x, &y)| {
                let diff = f64::from(x) - f64::from(y);
                acc + diff * diff
            });
            dists.push(sq.sqrt());
        }
    }
    if dists.is_empty() {
        return 1.0;
    }
    dists.sort_by(f64::total_cmp);
    let m = dists.len();
    let median = if m % 2 == 1 {
        dists[m / 2]
    } else {
        (dists[m / 2 - 1] + dists[m / 2]) / 2.0
    };
    if median > 0.0 && median.is_finite() {
        median
    } else {
        1.0
    }
}

/// One row of the metrics log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub iteration: usize,
    pub t: usize,
    pub start: usize,
    pub expert: usize,
    pub matching_loss: f64,
    pub overlap_loss: f64,
    pub mmd: f64,
    pub eta: f64,
    /// `snapshot`, `retrain`, both joined by `+`, or empty.
    pub event: String,
    pub config_hash: String,
}

pub fn write_metrics(path: impl AsRef<Path>, records: &[MetricsRecord]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in records {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_metrics(path: impl AsRef<Path>) -> Result<Vec<MetricsRecord>> {
    let mut r = csv::Reader::from_path(path)?;
    Ok(r.deserialize().collect::<std::result::Result<_, _>>()?)
}

/// Mutable distillation state; everything needed to resume a run.
#[derive(Debug, Clone, PartialEq)]
pub struct DistillState {
    pub synthetic: SyntheticDataset,
    pub velocity: Vec<f32>,
    pub log_lr: f64,
    pub lr_velocity: f64,
    pub sigma: f64,
    /// Completed iterations.
    pub iteration: usize,
    /// Saved complement pixels, keyed by the step size they were taken at.
    pub snapshots: BTreeMap<usize, Vec<f32>>,
    /// Retraining points already applied.
    pub retrained: BTreeSet<usize>,
}

const CHECKPOINT_MAGIC: &[u8; 4] = b"DSCK";

impl DistillState {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = Writer::new(CHECKPOINT_MAGIC, 1);
        let s = self.synthetic.to_bytes();
        w.usize(s.len());
        w.bytes(&s);
        w.usize(self.velocity.len());
        w.f32s(self.velocity.iter().copied());
        w.f64(self.log_lr);
        w.f64(self.lr_velocity);
        w.f64(self.sigma);
        w.usize(self.iteration);
        w.usize(self.snapshots.len());
        for (&t, px) in &self.snapshots {
            w.usize(t);
            w.usize(px.len());
            w.f32s(px.iter().copied());
        }
        w.usize(self.retrained.len());
        for &m in &self.retrained {
            w.usize(m);
        }
        w.finish()
    }

    pub fn from_bytes(buf: &[u8]) -> Result<Self> {
        let mut r = Reader::open(buf, CHECKPOINT_MAGIC, 1, "checkpoint")?;
        r.expect_remaining(buf.len().saturating_sub(r.position() + 4))?;
        let len = r.usize()?;
        let synthetic = SyntheticDataset::from_bytes(r.bytes(len)?)?;
        let len = r.usize()?;
        let velocity = r.f32s(len)?;
        if velocity.len() != synthetic.images.len() {
            return Err(Error::Format(
                "checkpoint: velocity length does not match the synthetic set".into(),
            ));
        }
        let log_lr = r.f64()?;
        let lr_velocity = r.f64()?;
        let sigma = r.f64()?;
        let iteration = r.usize()?;
        let mut snapshots = BTreeMap::new();
        for _ in 0..r.usize()? {
            let t = r.usize()?;
            let len = r.usize()?;
            snapshots.insert(t, r.f32s(len)?);
        }
        let mut retrained = BTreeSet::new();
        for _ in 0..r.usize()? {
            retrained.insert(r.usize()?);
        }
        r.finish()?;
        Ok(Self {
            synthetic,
            velocity,
            log_lr,
            lr_velocity,
            sigma,
            iteration,
            snapshots,
            retrained,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let tmp = path.with_extension("tmp");
        let mut f = std::fs::File::create(&tmp)?;
        f.write_all(&self.to_bytes())?;
        f.sync_all()?;
        std::fs::rename(tmp, path)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

fn to_elements<T: Element>(xs: &[f32]) -> Vec<T> {
    xs.iter().map(|&v| T::lit(f64::from(v))).collect()
}

/// Runs distillation against a loaded trajectory buffer.
pub struct Distiller<'a> {
    buffer: &'a TrajectoryBuffer,
    config: DistillConfig,
    schedule: DistillSchedule,
    config_hash: u64,
}

impl<'a> Distiller<'a> {
    pub fn new(buffer: &'a TrajectoryBuffer, config: DistillConfig, config_hash: u64) -> Result<Self> {
        config.validate()?;
        if config.max_step > buffer.steps() {
            return Err(Error::Config(format!(
                "max_step {} exceeds the {} steps stored in the trajectory buffer",
                config.max_step,
                buffer.steps()
            )));
        }
        let schedule = make_schedule(&config)?;
        Ok(Self {
            buffer,
            config,
            schedule,
            config_hash,
        })
    }

    pub fn schedule(&self) -> &DistillSchedule {
        &self.schedule
    }

    pub fn config(&self) -> &DistillConfig {
        &self.config
    }

    /// Fresh state around `synthetic`, which must match the buffer's model.
    pub fn init_state(&self, mut synthetic: SyntheticDataset) -> Result<DistillState> {
        let spec = self.buffer.spec();
        if synthetic.item != spec.input || synthetic.classes() != spec.classes {
            return Err(Error::Dimension(format!(
                "synthetic set has items {:?} in {} classes, the model expects {:?} in {}",
                synthetic.item,
                synthetic.classes(),
                spec.input,
                spec.classes
            )));
        }
        synthetic.config_hash = self.config_hash;
        let sigma = self.config.sigma.unwrap_or_else(|| median_bandwidth(&synthetic));
        Ok(DistillState {
            velocity: vec![0.0; synthetic.images.len()],
            synthetic,
            log_lr: self.config.student_lr.ln(),
            lr_velocity: 0.0,
            sigma,
            iteration: 0,
            snapshots: BTreeMap::new(),
            retrained: BTreeSet::new(),
        })
    }

    /// Performs iteration `state.iteration + 1`.
    pub fn step(&self, state: &mut DistillState) -> Result<MetricsRecord> {
        let i = state.iteration + 1;
        if i > self.config.iterations {
            return Err(Error::State(format!(
                "all {} iterations are already done",
                self.config.iterations
            )));
        }
        let cfg = &self.config;
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, i as u64));
        let t = self.schedule.t(i);
        let view = self.buffer.sample_trajectory(&mut rng)?;
        let start = match cfg.schedule {
            ScheduleMode::RandomSegment => rng.random_range(0..=cfg.max_step - t),
            _ => 0,
        };
        let theta_start = to_elements::<f32>(view.snapshot(start)?);
        let theta_target = to_elements::<f32>(view.snapshot(start + t)?);

        let s = &state.synthetic;
        let [c, h, w] = s.item;
        let foundation = s.foundation_indices();
        let complement = s.complement_indices();
        let problem = OuterProblem {
            spec: self.buffer.spec(),
            start: &theta_start,
            target: &theta_target,
            labels: s.labels(),
            foundation: &foundation,
            complement: &complement,
            steps: t * cfg.steps_per_snapshot,
            batch_size: cfg.batch_size,
            policy: &cfg.augment,
            beta_match: cfg.beta_match,
            beta_overlap: cfg.beta_overlap,
            sigma: state.sigma,
        };
        let images = Tensor::param(s.images.clone(), &[s.len(), c, h, w])?;
        let log_lr = if cfg.learn_lr && cfg.beta_match > 0.0 {
            Tensor::param(vec![state.log_lr as f32], &[])?
        } else {
            Tensor::scalar(state.log_lr as f32)
        };
        let outer = outer_objective(&problem, &images, &log_lr, true, &mut rng).map_err(|e| match e {
            Error::DegenerateTrajectory(m) => Error::DegenerateTrajectory(format!(
                "expert {} snapshots {start} and {}: {m}",
                view.index(),
                start + t
            )),
            other => other,
        })?;
        let matching = f64::from(outer.matching.item()?);
        let overlap = if cfg.beta_overlap > 0.0 {
            f64::from(outer.overlap.item()?)
        } else {
            no_grad(|| self.overlap_value(&state.synthetic, state.sigma))?
        };
        if !outer.total.is_finite() {
            return Err(Error::State(format!("iteration {i}: outer loss is not finite")));
        }

        if outer.total.requires_grad() {
            let wrt = if log_lr.requires_grad() {
                vec![images.clone(), log_lr.clone()]
            } else {
                vec![images.clone()]
            };
            let grads = grad(&outer.total, &wrt, false)?;
            let (mu, lr) = (cfg.image_momentum as f32, cfg.image_lr as f32);
            let pixels = &mut state.synthetic.images;
            for ((p, v), &g) in pixels.iter_mut().zip(&mut state.velocity).zip(grads[0].data()) {
                *v = mu * *v + g;
                *p -= lr * *v;
            }
            if let Some(g) = grads.get(1) {
                state.lr_velocity = cfg.image_momentum * state.lr_velocity + f64::from(g.item()?);
                state.log_lr -= cfg.lr_lr * state.lr_velocity;
            }
            if state.synthetic.images.iter().any(|v| !v.is_finite()) || !state.log_lr.is_finite() {
                return Err(Error::State(format!(
                    "iteration {i}: synthetic update produced non-finite values"
                )));
            }
        }

        let mut events = Vec::new();
        if self.schedule.is_snapshot_step(t) && !state.snapshots.contains_key(&t) {
            state.snapshots.insert(t, state.synthetic.gather(&complement));
            events.push("snapshot");
        }
        if let Some(source) = self.schedule.restore_step(t) {
            if state.retrained.insert(t) {
                let saved = source.and_then(|at| state.snapshots.get(&at)).ok_or_else(|| {
                    Error::Scheduler(format!(
                        "iteration {i}: retraining point {t} has no stored complement snapshot{}",
                        source.map_or(String::new(), |at| format!(" (expected one from t = {at})"))
                    ))
                })?;
                let saved = saved.clone();
                state.synthetic.scatter(&complement, &saved);
                let d = state.synthetic.item_len();
                for &ci in &complement {
                    state.velocity[ci * d..(ci + 1) * d].fill(0.0);
                }
                events.push("retrain");
            }
        }
        state.iteration = i;
        Ok(MetricsRecord {
            iteration: i,
            t,
            start,
            expert: view.index(),
            matching_loss: matching,
            overlap_loss: overlap,
            mmd: mmd_from_overlap(overlap, foundation.len()),
            eta: state.log_lr.exp(),
            event: events.join("+"),
            config_hash: format!("{:016x}", self.config_hash),
        })
    }

    /// Runs iterations until `until` (inclusive) or the configured count,
    /// calling `after` after each one.
    pub fn run(
        &self,
        state: &mut DistillState,
        until: usize,
        mut after: impl FnMut(&DistillState, &MetricsRecord) -> Result<()>,
    ) -> Result<Vec<MetricsRecord>> {
        let mut out = Vec::new();
        while state.iteration < until.min(self.config.iterations) {
            let rec = self.step(state)?;
            after(state, &rec)?;
            out.push(rec);
        }
        Ok(out)
    }

    /// Overlap loss of `s` without any graph.
    pub fn overlap_value(&self, s: &SyntheticDataset, sigma: f64) -> Result<f64> {
        let (fi, ci) = (s.foundation_indices(), s.complement_indices());
        let d = s.item_len();
        let f = Tensor::new(to_elements::<f64>(&s.gather(&fi)), &[fi.len(), d])?;
        let c = Tensor::new(to_elements::<f64>(&s.gather(&ci)), &[ci.len(), d])?;
        let fl: Vec<usize> = fi.iter().map(|&i| s.labels()[i]).collect();
        let cl: Vec<usize> = ci.iter().map(|&i| s.labels()[i]).collect();
        no_grad(|| overlap_loss(&f, &c, &fl, &cl, sigma)?.item())
    }

    /// Mean matching loss of `images` at step size `t` from snapshot 0, over
    /// every expert, with fixed generators so different image sets are
    /// compared under identical minibatches and augmentations.
    pub fn measure_matching(&self, synthetic: &SyntheticDataset, log_lr: f64, t: usize) -> Result<f64> {
        let [c, h, w] = synthetic.item;
        let images = Tensor::new(synthetic.images.clone(), &[synthetic.len(), c, h, w])?;
        let log_lr = Tensor::scalar(log_lr as f32);
        let mut total = 0.0;
        for e in 0..self.buffer.experts() {
            let view = self.buffer.expert(e)?;
            let start = to_elements::<f32>(view.snapshot(0)?);
            let target = to_elements::<f32>(view.snapshot(t)?);
            let problem = OuterProblem {
                spec: self.buffer.spec(),
                start: &start,
                target: &target,
                labels: synthetic.labels(),
                foundation: &[],
                complement: &[],
                steps: t * self.config.steps_per_snapshot,
                batch_size: self.config.batch_size,
                policy: &self.config.augment,
                beta_match: 1.0,
                beta_overlap: 0.0,
                sigma: 1.0,
            };
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(self.config.seed ^ 0x6d65_6173, e as u64));
            let out = outer_objective(&problem, &images, &log_lr, false, &mut rng)?;
            total += f64::from(out.matching.item()?);
        }
        Ok(total / self.buffer.experts() as f64)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::buffer::TrajectoryHyper;
    use crate::gradcheck::{numerical_grad, relative_error};
    use crate::nn::{Architecture, ParamVector};

    #[test]
    fn retraining_points_by_hand() {
        assert_eq!(retraining_points(100, 4), vec![80, 60, 40, 20]);
        assert!(retraining_points(100, 0).is_empty());
        // 10 − 10/7·i rounds to 9, 7, 6, 4, 3, 1
        assert_eq!(retraining_points(10, 6), vec![9, 7, 6, 4, 3, 1]);
    }

    #[test]
    fn progressive_schedule_by_hand() {
        let cfg = DistillConfig {
            iterations: 100,
            max_step: 10,
            retrain_points: 0,
            ..DistillConfig::default()
        };
        let s = make_schedule(&cfg).unwrap();
        assert_eq!((s.t(1), s.t(10), s.t(50), s.t(100)), (1, 1, 5, 10));
        assert!(s.steps().windows(2).all(|w| w[0] <= w[1]));
    }

    #[test]
    fn midpoints_for_the_worked_example() {
        let cfg = DistillConfig {
            iterations: 100,
            max_step: 100,
            retrain_points: 4,
            ..DistillConfig::default()
        };
        let s = make_schedule(&cfg).unwrap();
        let plan: Vec<_> = s.retraining_plan().collect();
        assert_eq!(
            plan,
            vec![(80, Some(70)), (60, Some(50)), (40, Some(30)), (20, Some(10))]
        );
    }

    #[test]
    fn too_many_retraining_points() {
        let cfg = DistillConfig {
            max_step: 4,
            retrain_points: 4,
            ..DistillConfig::default()
        };
        assert!(matches!(make_schedule(&cfg), Err(Error::Schedule(_))));
    }

    #[test]
    fn unroll_zero_steps_is_identity() {
        let theta = vec![Tensor::param(vec![1.5f64, -2.0], &[2]).unwrap()];
        let out = unroll(theta.clone(), 0, &Tensor::scalar(0.1), true, |_, _| unreachable!()).unwrap();
        assert_eq!(out[0].data(), theta[0].data());
    }

    #[test]
    fn unroll_closed_form_step() {
        // ℓ(θ) = ½(θ − s)², θ0 = 0, η = 0.1 → θ1 = 0.1·s, ∂θ1/∂s = 0.1
        let s = Tensor::param(vec![3.0f64], &[1]).unwrap();
        let theta0 = vec![Tensor::param(vec![0.0], &[1]).unwrap()];
        let out = unroll(theta0, 1, &Tensor::scalar(0.1), true, |th, _| {
            Ok(th[0].sub(&s)?.square().sum().scale(0.5))
        })
        .unwrap();
        assert!((out[0].data()[0] - 0.3).abs() < 1e-15);
        let g = grad(&out[0].sum(), &[s], false).unwrap();
        assert!((g[0].data()[0] - 0.1).abs() < 1e-15);
    }

    #[test]
    fn unroll_reports_non_finite_step() {
        let theta0 = vec![Tensor::param(vec![0.0f64], &[1]).unwrap()];
        let err = unroll(theta0, 3, &Tensor::scalar(0.1), false, |th, step| {
            let l = th[0].sum();
            Ok(if step == 2 { l.add_scalar(f64::NAN) } else { l })
        })
        .unwrap_err();
        assert!(matches!(err, Error::Unroll { step: 2 }));
    }

    #[test]
    fn student_distance_gradient_matches_finite_differences() {
        // ∂‖θ_t^S − c‖²/∂S on mlp 2-16-3 with t = 3.
        let spec = ModelSpec::new(Architecture::Mlp, 1, 16, [2, 1, 1], 3);
        let theta0: Vec<f64> = crate::nn::Network::<f64>::build(&spec, 4).unwrap().param_vector().0;
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let c: Vec<f64> = (0..theta0.len()).map(|_| rng.random_range(-0.5..0.5)).collect();
        let labels = [0, 1, 2, 0, 1, 2];
        let s0: Vec<f64> = (0..12).map(|_| rng.random_range(-1.0..1.0)).collect();
        let objective = |images: &Tensor<f64>| -> f64 {
            let params = unflatten(&spec, &theta0, true).unwrap();
            let out = unroll(params, 3, &Tensor::scalar(0.3), true, |th, _| {
                forward(&spec, th, images)?.cross_entropy(&labels)
            })
            .unwrap();
            let flat = Tensor::concat(&out);
            let target = Tensor::new(c.clone(), &[c.len()]).unwrap();
            flat.sub(&target).unwrap().square().sum().item().unwrap()
        };
        let images = Tensor::param(s0.clone(), &[6, 2, 1, 1]).unwrap();
        let params = unflatten(&spec, &theta0, true).unwrap();
        let out = unroll(params, 3, &Tensor::scalar(0.3), true, |th, _| {
            forward(&spec, th, &images)?.cross_entropy(&labels)
        })
        .unwrap();
        let target = Tensor::new(c.clone(), &[c.len()]).unwrap();
        let loss = Tensor::concat(&out).sub(&target).unwrap().square().sum();
        let analytic = grad(&loss, &[images], false).unwrap();
        let numeric = numerical_grad(
            |v| objective(&Tensor::new(v.to_vec(), &[6, 2, 1, 1]).unwrap()),
            &s0,
            1e-6,
        );
        let err = relative_error(analytic[0].data(), &numeric, 1e-12);
        assert!(err < 1e-3, "{err:e}");
    }

    fn loop_matching(s: &[f64], d: &[f64], o: &[f64]) -> f64 {
        let mut num = 0.0;
        for i in 0..s.len() {
            num += (s[i] - d[i]) * (s[i] - d[i]);
        }
        let mut den = 0.0;
        for i in 0..s.len() {
            den += (d[i] - o[i]) * (d[i] - o[i]);
        }
        num / den
    }

    #[test]
    fn matching_loss_cases() {
        let d = [1.0, 2.0, 3.0];
        let o = [0.0, 0.0, 1.0];
        let at = |v: &[f64]| {
            matching_loss(&Tensor::new(v.to_vec(), &[3]).unwrap(), &d, &o)
                .unwrap()
                .item()
                .unwrap()
        };
        assert_eq!(at(&d), 0.0);
        assert_eq!(at(&o), 1.0);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..20 {
            let gen = |rng: &mut ChaCha8Rng| (0..50).map(|_| rng.random_range(-2.0..2.0)).collect::<Vec<f64>>();
            let (s, d, o) = (gen(&mut rng), gen(&mut rng), gen(&mut rng));
            let v = matching_loss(&Tensor::new(s.clone(), &[50]).unwrap(), &d, &o)
                .unwrap()
                .item()
                .unwrap();
            assert_eq!(v, loop_matching(&s, &d, &o));
        }
        let err = matching_loss(&Tensor::new(vec![0.0f64; 3], &[3]).unwrap(), &d, &d).unwrap_err();
        assert!(matches!(err, Error::DegenerateTrajectory(_)));
    }

    #[test]
    fn kernel_values() {
        assert_eq!(gaussian_kernel(&[1.0, 2.0], &[1.0, 2.0], 0.7, 3, 3), 1.0);
        assert_eq!(gaussian_kernel(&[1.0, 2.0], &[1.0, 2.0], 0.7, 3, 4), 0.0);
        assert!((gaussian_kernel(&[0.0, 0.0], &[2.0, 0.0], 1.0, 0, 0) - 0.13534).abs() < 1e-5);
    }

    #[test]
    fn overlap_loss_cases() {
        let t = |v: &[f64], n: usize| Tensor::new(v.to_vec(), &[n, v.len() / n]).unwrap();
        let v = overlap_loss(&t(&[0.0], 1), &t(&[2.0], 1), &[0], &[0], 1.0)
            .unwrap()
            .item()
            .unwrap();
        assert!((v - (2.0 * (-2.0f64).exp() - 2.0)).abs() < 1e-12);
        assert!((v + 1.72932).abs() < 1e-5);
        let same = [0.5, -1.0, 2.0, 0.25];
        let v = overlap_loss(&t(&same, 2), &t(&same, 2), &[0, 1], &[0, 1], 0.8)
            .unwrap()
            .item()
            .unwrap();
        assert_eq!(v, 0.0);
        // No cross-subset pair shares a class, so only the i = j self terms
        // k(c_i, c_i) = k(f_i, f_i) = 1 survive: −2 per pair.
        let v = overlap_loss(&t(&[0.0, 1.0], 2), &t(&[0.3, 0.7], 2), &[0, 1], &[2, 3], 1.0)
            .unwrap()
            .item()
            .unwrap();
        assert_eq!(v, -4.0);
        assert!(matches!(
            overlap_loss(&t(&[0.0, 1.0], 2), &t(&[0.3], 1), &[0, 1], &[0], 1.0),
            Err(Error::Partition(_))
        ));
    }

    /// A buffer whose snapshots move linearly, for schedule tests that do
    /// not need real teachers.
    fn linear_buffer(spec: &ModelSpec, steps: usize) -> TrajectoryBuffer {
        let init = crate::nn::Network::<f32>::build(spec, 0).unwrap().param_vector().0;
        let snaps = (0..=steps)
            .map(|t| {
                ParamVector(
                    init.iter()
                        .enumerate()
                        .map(|(j, &v)| v + 0.01 * t as f32 * ((j % 7) as f32 - 3.0))
                        .collect(),
                )
            })
            .collect();
        TrajectoryBuffer::from_experts(spec.clone(), TrajectoryHyper::default(), vec![snaps]).unwrap()
    }

    fn small_synthetic(ipc: usize, seed: u64) -> SyntheticDataset {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let images = (0..3 * ipc * 16).map(|_| rng.random_range(-1.0..1.0f32)).collect();
        SyntheticDataset::new(images, [1, 4, 4], 3, ipc, InitMode::Noise, 0).unwrap()
    }

    #[test]
    fn replacement_restores_the_snapshot_bit_exactly() {
        let spec = ModelSpec::new(Architecture::Mlp, 1, 4, [1, 4, 4], 3);
        let buffer = linear_buffer(&spec, 10);
        let cfg = DistillConfig {
            iterations: 20,
            max_step: 10,
            retrain_points: 4,
            augment: AugmentPolicy::none(),
            image_lr: 1.0,
            ..DistillConfig::default()
        };
        let d = Distiller::new(&buffer, cfg, 7).unwrap();
        let mut state = d.init_state(small_synthetic(2, 1)).unwrap();
        let complement = state.synthetic.complement_indices();
        let labels_before = state.synthetic.labels().to_vec();
        let plan: Vec<_> = d.schedule().retraining_plan().collect();
        assert_eq!(plan, vec![(8, Some(7)), (6, Some(5)), (4, Some(3)), (2, Some(1))]);
        let mut retrains = 0;
        d.run(&mut state, usize::MAX, |st, rec| {
            if rec.event.contains("retrain") {
                retrains += 1;
                let at = plan.iter().find(|p| p.0 == rec.t).unwrap().1.unwrap();
                assert_eq!(st.synthetic.gather(&complement), st.snapshots[&at]);
            }
            Ok(())
        })
        .unwrap();
        assert_eq!(retrains, 4);
        assert_eq!(state.synthetic.labels(), &labels_before[..]);
    }

    #[test]
    fn disabled_overlap_never_replaces() {
        let spec = ModelSpec::new(Architecture::Mlp, 1, 4, [1, 4, 4], 3);
        let buffer = linear_buffer(&spec, 5);
        let cfg = DistillConfig {
            iterations: 10,
            max_step: 5,
            retrain_points: 0,
            beta_overlap: 0.0,
            augment: AugmentPolicy::none(),
            ..DistillConfig::default()
        };
        let d = Distiller::new(&buffer, cfg, 0).unwrap();
        let mut state = d.init_state(small_synthetic(2, 2)).unwrap();
        let recs = d.run(&mut state, usize::MAX, |_, _| Ok(())).unwrap();
        assert!(recs.iter().all(|r| r.event.is_empty()));
        assert!(state.snapshots.is_empty());
    }

    #[test]
    fn missing_snapshot_is_a_scheduler_error() {
        // m = 2 restores the copy saved at t = 1; drop it before t reaches 2.
        let spec = ModelSpec::new(Architecture::Mlp, 1, 4, [1, 4, 4], 3);
        let buffer = linear_buffer(&spec, 4);
        let cfg = DistillConfig {
            iterations: 4,
            max_step: 4,
            retrain_points: 1,
            augment: AugmentPolicy::none(),
            ..DistillConfig::default()
        };
        let d = Distiller::new(&buffer, cfg, 0).unwrap();
        assert_eq!(d.schedule().retraining_plan().collect::<Vec<_>>(), vec![(2, Some(1))]);
        let mut state = d.init_state(small_synthetic(2, 3)).unwrap();
        assert_eq!(d.step(&mut state).unwrap().event, "snapshot");
        state.snapshots.clear();
        assert!(matches!(d.step(&mut state), Err(Error::Scheduler(_))));
    }

    #[test]
    fn max_step_beyond_buffer_is_rejected() {
        let spec = ModelSpec::new(Architecture::Mlp, 1, 4, [1, 4, 4], 3);
        let buffer = linear_buffer(&spec, 3);
        let cfg = DistillConfig {
            max_step: 4,
            retrain_points: 0,
            ..DistillConfig::default()
        };
        assert!(matches!(Distiller::new(&buffer, cfg, 0), Err(Error::Config(_))));
    }

    #[test]
    fn checkpoint_round_trip_and_resume() {
        let spec = ModelSpec::new(Architecture::Mlp, 1, 4, [1, 4, 4], 3);
        let buffer = linear_buffer(&spec, 6);
        let cfg = DistillConfig {
            iterations: 12,
            max_step: 6,
            retrain_points: 2,
            ..DistillConfig::default()
        };
        let d = Distiller::new(&buffer, cfg, 5).unwrap();
        let mut full = d.init_state(small_synthetic(2, 4)).unwrap();
        let all = d.run(&mut full, usize::MAX, |_, _| Ok(())).unwrap();

        let mut part = d.init_state(small_synthetic(2, 4)).unwrap();
        let head = d.run(&mut part, 5, |_, _| Ok(())).unwrap();
        let restored = DistillState::from_bytes(&part.to_bytes()).unwrap();
        assert_eq!(restored, part);
        let mut resumed = restored;
        let tail = d.run(&mut resumed, usize::MAX, |_, _| Ok(())).unwrap();
        assert_eq!([head, tail].concat(), all);
        assert_eq!(resumed, full);
    }

    #[test]
    fn median_bandwidth_by_hand() {
        let s = SyntheticDataset::new(vec![0.0, 3.0, 4.0, 10.0], [1, 1, 1], 2, 2, InitMode::Noise, 0).unwrap();
        // distances 3, 4, 10, 1, 7, 6 → median of [1, 3, 4, 6, 7, 10] = 5
        assert_eq!(median_bandwidth(&s), 5.0);
    }

    #[test]
    fn outer_gradient_matches_finite_differences() {
        let spec = ModelSpec::new(Architecture::Mlp, 1, 16, [2, 1, 1], 3);
        let start: Vec<f64> = crate::nn::Network::<f64>::build(&spec, 1).unwrap().param_vector().0;
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let target: Vec<f64> = start.iter().map(|v| v + rng.random_range(-0.2..0.2)).collect();
        let labels = [0, 0, 1, 1, 2, 2];
        let s0: Vec<f64> = (0..12).map(|_| rng.random_range(-1.0..1.0)).collect();
        let policy = AugmentPolicy::none();
        let problem = OuterProblem {
            spec: &spec,
            start: &start,
            target: &target,
            labels: &labels,
            foundation: &[0, 2, 4],
            complement: &[1, 3, 5],
            steps: 3,
            batch_size: None,
            policy: &policy,
            beta_match: 1.0,
            beta_overlap: 0.5,
            sigma: 1.0,
        };
        let log_lr = Tensor::scalar(0.1f64.ln());
        let images = Tensor::param(s0.clone(), &[6, 2, 1, 1]).unwrap();
        let out = outer_objective(&problem, &images, &log_lr, true, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        let analytic = grad(&out.total, &[images], false).unwrap();
        let numeric = numerical_grad(
            |v| {
                let x = Tensor::new(v.to_vec(), &[6, 2, 1, 1]).unwrap();
                outer_objective(&problem, &x, &log_lr, false, &mut ChaCha8Rng::seed_from_u64(0))
                    .unwrap()
                    .total
                    .item()
                    .unwrap()
            },
            &s0,
            1e-6,
        );
        let err = relative_error(analytic[0].data(), &numeric, 1e-12);
        assert!(err < 1e-3, "{err:e}");
    }
}
