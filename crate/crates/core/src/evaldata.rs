//! Real datasets, the learnable synthetic set, and the evaluation harness.
//!
//! # Dataset formats
//!
//! * `idx_like`: an IDX image block (`00 00 08 03`, big-endian u32 N, H, W,
//!   or `00 00 08 04` with N, C, H, W; u8 pixels) immediately followed by an
//!   IDX label block (`00 00 08 01`, u32 N, u8 labels). Pixels are scaled to
//!   `[0, 1]`.
//! * `raw_tensor`: `"RAWT"`, u32 version 1, u64 N, C, H, W (little-endian),
//!   N·C·H·W f32 pixels, N u32 labels. Pixels are taken verbatim.
//! * `csv`: one item per row, `label,p0,p1,…` with C·H·W pixel values in
//!   `0..=255`, no header. Pixels are scaled to `[0, 1]`.
//!
//! Channel standardization is a separate step ([`ChannelStats`]) so the test
//! split can reuse the training statistics.
//!
//! # Synthetic set format (`SYND`, version 1, little-endian)
//!
//! ```text
//! magic "SYND" | u32 version
//! u64 classes, u64 ipc, u64 height, u64 width, u64 channels
//! f32 × classes·ipc·channels·height·width   pixels, class-major
//! u32 × classes·ipc                         labels
//! u8  × classes·ipc                         1 = foundation, 0 = complement
//! u8 init mode (0 from_real, 1 noise), u64 config hash
//! u32 crc32 of everything above
//! ```

use std::path::Path;

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::augment::AugmentPolicy;
use crate::binio::{Reader, Writer};
use crate::nn::{ModelSpec, Network};
use crate::train::{self, Samples, SgdConfig};
use crate::{derive_seed, Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Test,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind", deny_unknown_fields)]
pub enum DatasetFormat {
    IdxLike,
    RawTensor,
    /// CSV rows carry no shape, so it is given here as `[C, H, W]`.
    Csv {
        shape: [usize; 3],
    },
}

#[derive(Debug, Clone, PartialEq)]
pub struct LabeledDataset {
    pub images: Vec<f32>,
    pub item: [usize; 3],
    pub labels: Vec<usize>,
    pub classes: usize,
    pub split: Split,
}

fn ingest(offset: usize, message: impl Into<String>) -> Error {
    Error::Ingestion {
        offset: offset as u64,
        message: message.into(),
    }
}

impl LabeledDataset {
    pub fn new(images: Vec<f32>, item: [usize; 3], labels: Vec<usize>, classes: usize, split: Split) -> Result<Self> {
        Samples::new(&images, item, &labels)?;
        if let Some(&label) = labels.iter().find(|&&l| l >= classes) {
            return Err(Error::Label { label, classes });
        }
        Ok(Self {
            images,
            item,
            labels,
            classes,
            split,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn samples(&self) -> Samples<'_> {
        Samples {
            images: &self.images,
            item: self.item,
            labels: &self.labels,
        }
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.classes];
        for &l in &self.labels {
            counts[l] += 1;
        }
        counts
    }

    /// The items at `idx`, in that order.
    pub fn subset(&self, idx: &[usize]) -> Self {
        let d: usize = self.item.iter().product();
        Self {
            images: idx
                .iter()
                .flat_map(|&i| self.images[i * d..(i + 1) * d].iter().copied())
                .collect(),
            item: self.item,
            labels: idx.iter().map(|&i| self.labels[i]).collect(),
            classes: self.classes,
            split: self.split,
        }
    }

    /// Writes the `raw_tensor` format.
    pub fn save_raw_tensor(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut out = Vec::with_capacity(40 + self.images.len() * 4 + self.labels.len() * 4);
        out.extend_from_slice(b"RAWT");
        out.extend_from_slice(&1u32.to_le_bytes());
        for d in [self.len(), self.item[0], self.item[1], self.item[2]] {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for v in &self.images {
            out.extend_from_slice(&v.to_le_bytes());
        }
        for &l in &self.labels {
            out.extend_from_slice(&(l as u32).to_le_bytes());
        }
        std::fs::write(path, out)?;
        Ok(())
    }
}

/// Per-channel mean and standard deviation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChannelStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl ChannelStats {
    pub fn of(data: &LabeledDataset) -> Self {
        let [c, h, w] = data.item;
        let plane = h * w;
        let mut mean = vec![0.0; c];
        let mut sq = vec![0.0; c];
        for item in data.images.chunks(c * plane) {
            for (ch, px) in item.chunks(plane).enumerate() {
                for &v in px {
                    mean[ch] += f64::from(v);
                    sq[ch] += f64::from(v) * f64::from(v);
                }
            }
        }
        let count = (data.len() * plane).max(1) as f64;
        let std = mean
            .iter_mut()
            .zip(&sq)
            .map(|(m, s)| {
                *m /= count;
                (s / count - *m * *m).max(0.0).sqrt()
            })
            .collect();
        Self { mean, std }
    }

    /// Maps each channel to zero mean and unit variance under these
    /// statistics. Constant channels are only centred.
    pub fn standardize(&self, data: &mut LabeledDataset) -> Result<()> {
        let [c, h, w] = data.item;
        if self.mean.len() != c {
            return Err(Error::Dimension(format!(
                "statistics for {} channels, data has {c}",
                self.mean.len()
            )));
        }
        let plane = h * w;
        for item in data.images.chunks_mut(c * plane) {
            for (ch, px) in item.chunks_mut(plane).enumerate() {
                let s = if self.std[ch] > 0.0 { self.std[ch] } else { 1.0 };
                for v in px {
                    *v = ((f64::from(*v) - self.mean[ch]) / s) as f32;
                }
            }
        }
        Ok(())
    }
}

/// Reads a dataset file. Labels must be below `classes`.
pub fn load_dataset(
    path: impl AsRef<Path>,
    format: DatasetFormat,
    classes: usize,
    split: Split,
) -> Result<LabeledDataset> {
    let path = path.as_ref();
    match format {
        DatasetFormat::IdxLike => parse_idx(&std::fs::read(path)?, classes, split),
        DatasetFormat::RawTensor => parse_raw_tensor(&std::fs::read(path)?, classes, split),
        DatasetFormat::Csv { shape } => parse_csv(&std::fs::read(path)?, shape, classes, split),
    }
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or_else(|| {
                ingest(
                    self.pos,
                    format!("{what}: need {n} bytes, only {} remain", self.buf.len() - self.pos),
                )
            })?;
        let out = &self.buf[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u32_be(&mut self, what: &str) -> Result<usize> {
        Ok(u32::from_be_bytes(self.take(4, what)?.try_into().expect("4 bytes")) as usize)
    }

    fn u64_le(&mut self, what: &str) -> Result<usize> {
        let v = u64::from_le_bytes(self.take(8, what)?.try_into().expect("8 bytes"));
        usize::try_from(v).map_err(|_| ingest(self.pos - 8, format!("{what}: {v} is too large")))
    }
}

fn parse_idx(buf: &[u8], classes: usize, split: Split) -> Result<LabeledDataset> {
    let mut cur = Cursor { buf, pos: 0 };
    let magic = cur.take(4, "image header")?;
    let item = match magic {
        [0, 0, 8, 3] => {
            let n = cur.u32_be("image count")?;
            let (h, w) = (cur.u32_be("image height")?, cur.u32_be("image width")?);
            (n, [1, h, w])
        }
        [0, 0, 8, 4] => {
            let n = cur.u32_be("image count")?;
            let (c, h, w) = (
                cur.u32_be("channels")?,
                cur.u32_be("image height")?,
                cur.u32_be("image width")?,
            );
            (n, [c, h, w])
        }
        other => return Err(ingest(0, format!("unrecognized image block magic {other:02x?}"))),
    };
    let (n, shape) = item;
    let d: usize = shape.iter().product();
    if d == 0 {
        return Err(ingest(4, format!("image shape {shape:?} has a zero dimension")));
    }
    let pixels = n
        .checked_mul(d)
        .ok_or_else(|| ingest(4, "image block size overflows"))?;
    let images: Vec<f32> = cur
        .take(pixels, "image data")?
        .iter()
        .map(|&b| f32::from(b) / 255.0)
        .collect();
    let label_header = cur.pos;
    if cur.take(4, "label header")? != [0, 0, 8, 1] {
        return Err(ingest(label_header, "unrecognized label block magic"));
    }
    let count = cur.u32_be("label count")?;
    if count != n {
        return Err(ingest(
            label_header + 4,
            format!("label count {count} does not match image count {n}"),
        ));
    }
    let start = cur.pos;
    let raw = cur.take(n, "label data")?;
    let mut labels = Vec::with_capacity(n);
    for (i, &l) in raw.iter().enumerate() {
        if usize::from(l) >= classes {
            return Err(ingest(
                start + i,
                format!("label {l} out of range for {classes} classes"),
            ));
        }
        labels.push(usize::from(l));
    }
    if cur.pos != buf.len() {
        return Err(ingest(cur.pos, format!("{} trailing bytes", buf.len() - cur.pos)));
    }
    LabeledDataset::new(images, shape, labels, classes, split)
}

fn parse_raw_tensor(buf: &[u8], classes: usize, split: Split) -> Result<LabeledDataset> {
    let mut cur = Cursor { buf, pos: 0 };
    if cur.take(4, "header")? != b"RAWT" {
        return Err(ingest(0, "bad magic, expected RAWT"));
    }
    let version = u32::from_le_bytes(cur.take(4, "version")?.try_into().expect("4 bytes"));
    if version != 1 {
        return Err(ingest(4, format!("unsupported raw_tensor version {version}")));
    }
    let n = cur.u64_le("item count")?;
    let shape = [cur.u64_le("channels")?, cur.u64_le("height")?, cur.u64_le("width")?];
    let d: usize = shape.iter().product();
    if d == 0 {
        return Err(ingest(16, format!("image shape {shape:?} has a zero dimension")));
    }
    let bytes = n
        .checked_mul(d)
        .and_then(|p| p.checked_mul(4))
        .ok_or_else(|| ingest(8, "image block size overflows"))?;
    let images = cur
        .take(bytes, "image data")?
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
        .collect();
    let start = cur.pos;
    let raw = cur.take(n * 4, "label data")?;
    let mut labels = Vec::with_capacity(n);
    for (i, c) in raw.chunks_exact(4).enumerate() {
        let l = u32::from_le_bytes(c.try_into().expect("4 bytes")) as usize;
        if l >= classes {
            return Err(ingest(
                start + 4 * i,
                format!("label {l} out of range for {classes} classes"),
            ));
        }
        labels.push(l);
    }
    if cur.pos != buf.len() {
        return Err(ingest(cur.pos, format!("{} trailing bytes", buf.len() - cur.pos)));
    }
    LabeledDataset::new(images, shape, labels, classes, split)
}

fn parse_csv(buf: &[u8], shape: [usize; 3], classes: usize, split: Split) -> Result<LabeledDataset> {
    let d: usize = shape.iter().product();
    let mut reader = csv::ReaderBuilder::new().has_headers(false).from_reader(buf);
    let mut images = Vec::new();
    let mut labels = Vec::new();
    for record in reader.records() {
        let record = record.map_err(|e| {
            let offset = e.position().map_or(0, |p| p.byte() as usize);
            ingest(offset, e.to_string())
        })?;
        let offset = record.position().map_or(0, |p| p.byte() as usize);
        if record.len() != d + 1 {
            return Err(ingest(
                offset,
                format!("row has {} fields, expected {}", record.len(), d + 1),
            ));
        }
        let label: usize = record[0]
            .trim()
            .parse()
            .map_err(|_| ingest(offset, format!("label {:?} is not a class index", &record[0])))?;
        if label >= classes {
            return Err(ingest(
                offset,
                format!("label {label} out of range for {classes} classes"),
            ));
        }
        labels.push(label);
        for field in record.iter().skip(1) {
            let v: f32 = field
                .trim()
                .parse()
                .map_err(|_| ingest(offset, format!("pixel {field:?} is not a number")))?;
            if !(0.0..=255.0).contains(&v) {
                return Err(ingest(offset, format!("pixel {v} outside 0..=255")));
            }
            images.push(v / 255.0);
        }
    }
    LabeledDataset::new(images, shape, labels, classes, split)
}

/// How synthetic images are initialized.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InitMode {
    FromReal,
    Noise,
}

/// The learnable set S, stored class-major: the items of class `c` are
/// `c·ipc .. (c+1)·ipc`. Within a class, even positions belong to the
/// foundation subset and odd positions to the complement subset, so the
/// `i`-th foundation item and the `i`-th complement item share a class.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticDataset {
    pub images: Vec<f32>,
    pub item: [usize; 3],
    labels: Vec<usize>,
    foundation: Vec<bool>,
    classes: usize,
    ipc: usize,
    pub init: InitMode,
    pub config_hash: u64,
}

impl SyntheticDataset {
    /// A class-major set with the interleaved partition.
    pub fn new(
        images: Vec<f32>,
        item: [usize; 3],
        classes: usize,
        ipc: usize,
        init: InitMode,
        config_hash: u64,
    ) -> Result<Self> {
        if ipc == 0 || !ipc.is_multiple_of(2) {
            return Err(Error::Partition(format!(
                "ipc must be a positive even number to split evenly, got {ipc}"
            )));
        }
        let labels: Vec<usize> = (0..classes).flat_map(|c| std::iter::repeat_n(c, ipc)).collect();
        Samples::new(&images, item, &labels)?;
        let foundation = (0..classes * ipc).map(|i| i % 2 == 0).collect();
        Ok(Self {
            images,
            item,
            labels,
            foundation,
            classes,
            ipc,
            init,
            config_hash,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn ipc(&self) -> usize {
        self.ipc
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn item_len(&self) -> usize {
        self.item.iter().product()
    }

    pub fn is_foundation(&self, i: usize) -> bool {
        self.foundation[i]
    }

    pub fn foundation_indices(&self) -> Vec<usize> {
        (0..self.len()).filter(|&i| self.foundation[i]).collect()
    }

    pub fn complement_indices(&self) -> Vec<usize> {
        (0..self.len()).filter(|&i| !self.foundation[i]).collect()
    }

    pub fn samples(&self) -> Samples<'_> {
        Samples {
            images: &self.images,
            item: self.item,
            labels: &self.labels,
        }
    }

    /// Pixels of the listed items, concatenated.
    pub fn gather(&self, idx: &[usize]) -> Vec<f32> {
        let d = self.item_len();
        idx.iter()
            .flat_map(|&i| self.images[i * d..(i + 1) * d].iter().copied())
            .collect()
    }

    /// Overwrites the listed items with `pixels` (as produced by [`gather`](Self::gather)).
    pub fn scatter(&mut self, idx: &[usize], pixels: &[f32]) {
        let d = self.item_len();
        assert_eq!(pixels.len(), idx.len() * d, "scatter: pixel count");
        for (k, &i) in idx.iter().enumerate() {
            self.images[i * d..(i + 1) * d].copy_from_slice(&pixels[k * d..(k + 1) * d]);
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let [c, h, w] = self.item;
        let mut wr = Writer::new(b"SYND", 1);
        for v in [self.classes, self.ipc, h, w, c] {
            wr.usize(v);
        }
        wr.f32s(self.images.iter().copied());
        for &l in &self.labels {
            wr.u32(l as u32);
        }
        for &f in &self.foundation {
            wr.u8(u8::from(f));
        }
        wr.u8(match self.init {
            InitMode::FromReal => 0,
            InitMode::Noise => 1,
        });
        wr.u64(self.config_hash);
        wr.finish()
    }

    pub fn from_bytes(buf: &[u8]) -> Result<Self> {
        let mut r = Reader::open(buf, b"SYND", 1, "synthetic file")?;
        let classes = r.usize()?;
        let ipc = r.usize()?;
        let (h, w, c) = (r.usize()?, r.usize()?, r.usize()?);
        let n = classes
            .checked_mul(ipc)
            .ok_or_else(|| Error::Format("synthetic file: item count overflows".into()))?;
        let pixels = [c, h, w]
            .iter()
            .try_fold(n, |acc, &d| acc.checked_mul(d))
            .filter(|p| p.checked_mul(4).is_some())
            .ok_or_else(|| Error::Format("synthetic file: pixel count overflows".into()))?;
        r.expect_remaining(pixels * 4 + n * 5 + 1 + 8)?;
        let images = r.f32s(pixels)?;
        let mut labels = Vec::with_capacity(n);
        for _ in 0..n {
            labels.push(r.u32()? as usize);
        }
        let masks = r.bytes(n)?.to_vec();
        let init = match r.u8()? {
            0 => InitMode::FromReal,
            1 => InitMode::Noise,
            other => return Err(Error::Format(format!("synthetic file: unknown init mode {other}"))),
        };
        let config_hash = r.u64()?;
        r.finish()?;
        let s = Self::new(images, [c, h, w], classes, ipc, init, config_hash)
            .map_err(|e| Error::Format(format!("synthetic file: {e}")))?;
        if labels != s.labels {
            return Err(Error::Format(
                "synthetic file: labels are not class-balanced in class-major order".into(),
            ));
        }
        if masks.iter().zip(&s.foundation).any(|(&m, &f)| m != u8::from(f)) {
            return Err(Error::Format(
                "synthetic file: partition masks are not the interleaved even split".into(),
            ));
        }
        Ok(s)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

/// Draws `ipc` distinct real images per class, or Gaussian noise.
/// Class `c` uses the generator `derive_seed(seed, c)`.
pub fn init_synthetic(real: &LabeledDataset, ipc: usize, mode: InitMode, seed: u64) -> Result<SyntheticDataset> {
    if ipc == 0 || !ipc.is_multiple_of(2) {
        return Err(Error::Partition(format!(
            "ipc must be a positive even number to split evenly, got {ipc}"
        )));
    }
    let d: usize = real.item.iter().product();
    let mut images = Vec::with_capacity(real.classes * ipc * d);
    for class in 0..real.classes {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, class as u64));
        match mode {
            InitMode::FromReal => {
                let members: Vec<usize> = (0..real.len()).filter(|&i| real.labels[i] == class).collect();
                if members.len() < ipc {
                    return Err(Error::Init(format!(
                        "class {class} has {} real examples, {ipc} needed",
                        members.len()
                    )));
                }
                for k in sample(&mut rng, members.len(), ipc) {
                    let i = members[k];
                    images.extend_from_slice(&real.images[i * d..(i + 1) * d]);
                }
            }
            InitMode::Noise => {
                images.extend((0..ipc * d).map(|_| {
                    let v: f64 = StandardNormal.sample(&mut rng);
                    v as f32
                }));
            }
        }
    }
    SyntheticDataset::new(images, real.item, real.classes, ipc, mode, 0)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub runs: usize,
    pub epochs: usize,
    pub lr: f64,
    pub momentum: f64,
    pub batch_size: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            runs: 10,
            epochs: 1000,
            lr: 0.01,
            momentum: 0.9,
            batch_size: 256,
        }
    }
}

impl EvalConfig {
    pub fn validate(&self) -> Result<()> {
        if self.runs < 1 {
            return Err(Error::Config("eval runs must be at least 1".into()));
        }
        self.sgd().validate()
    }

    fn sgd(&self) -> SgdConfig {
        SgdConfig {
            lr: self.lr,
            momentum: self.momentum,
            epochs: self.epochs,
            batch_size: self.batch_size,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunResult {
    pub run: usize,
    pub seed: u64,
    /// `None` when training diverged.
    pub accuracy: Option<f64>,
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvalReport {
    pub mean: f64,
    /// Population standard deviation over completed runs.
    pub std: f64,
    pub runs: Vec<RunResult>,
}

impl EvalReport {
    pub fn completed(&self) -> usize {
        self.runs.iter().filter(|r| r.accuracy.is_some()).count()
    }
}

/// Mean and population standard deviation.
pub fn mean_std(xs: &[f64]) -> (f64, f64) {
    if xs.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// Trains `cfg.runs` fresh networks on `train_set` (augmented by `policy`)
/// and measures them on `test`. Run `r` uses `derive_seed(seed, r)`; runs
/// execute in parallel and are reported in run order. Diverged runs are
/// listed with their error and left out of the statistics.
pub fn evaluate(
    train_set: &Samples<'_>,
    test: &LabeledDataset,
    spec: &ModelSpec,
    cfg: &EvalConfig,
    policy: &AugmentPolicy,
    seed: u64,
) -> Result<EvalReport> {
    cfg.validate()?;
    spec.validate()?;
    policy.validate()?;
    if train_set.item != test.item || spec.input != test.item {
        return Err(Error::Dimension(format!(
            "training items {:?}, test items {:?}, model input {:?} must agree",
            train_set.item, test.item, spec.input
        )));
    }
    let test_samples = test.samples();
    let runs: Vec<RunResult> = (0..cfg.runs)
        .into_par_iter()
        .map(|run| {
            let run_seed = derive_seed(seed, run as u64);
            let outcome = (|| {
                let mut net = Network::<f32>::build(spec, derive_seed(run_seed, 0))?;
                let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(run_seed, 1));
                train::fit(&mut net, train_set, &cfg.sgd(), policy, &mut rng, run, |_, _| Ok(()))?;
                train::accuracy(&net, &test_samples)
            })();
            match outcome {
                Ok(acc) => RunResult {
                    run,
                    seed: run_seed,
                    accuracy: Some(acc),
                    error: None,
                },
                Err(e) => RunResult {
                    run,
                    seed: run_seed,
                    accuracy: None,
                    error: Some(e.to_string()),
                },
            }
        })
        .collect();
    let accs: Vec<f64> = runs.iter().filter_map(|r| r.accuracy).collect();
    if accs.is_empty() {
        return Err(Error::State(format!(
            "all {} evaluation runs failed; first error: {}",
            runs.len(),
            runs[0].error.as_deref().unwrap_or("unknown")
        )));
    }
    if accs.len() < runs.len() {
        log::warn!(
            "{} of {} evaluation runs failed; statistics use the rest",
            runs.len() - accs.len(),
            runs.len()
        );
    }
    let (mean, std) = mean_std(&accs);
    Ok(EvalReport { mean, std, runs })
}

/// Gaussian-blob image classification task: each class is a bright bump at
/// its own location on a noisy background, with per-image jitter in
/// position and amplitude. Pixels are clipped to `[0, 1]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ToyBlobs {
    pub classes: usize,
    pub side: usize,
    pub train: usize,
    pub test: usize,
    /// Standard deviation of the per-pixel noise.
    pub noise: f64,
    /// Standard deviation of the bump position, in pixels.
    pub jitter: f64,
    /// Bump radius, in pixels.
    pub radius: f64,
}

impl Default for ToyBlobs {
    fn default() -> Self {
        Self {
            classes: 3,
            side: 8,
            train: 3000,
            test: 600,
            noise: 0.35,
            jitter: 1.0,
            radius: 1.5,
        }
    }
}

impl ToyBlobs {
    fn centre(&self, class: usize) -> (f64, f64) {
        let mid = (self.side as f64 - 1.0) / 2.0;
        let r = self.side as f64 / 4.0;
        let angle = std::f64::consts::TAU * class as f64 / self.classes as f64;
        (mid + r * angle.sin(), mid + r * angle.cos())
    }

    fn split(&self, n: usize, split: Split, rng: &mut ChaCha8Rng) -> Result<LabeledDataset> {
        let s = self.side;
        let mut images = Vec::with_capacity(n * s * s);
        let mut labels = Vec::with_capacity(n);
        for i in 0..n {
            let class = i % self.classes;
            let (cy, cx) = self.centre(class);
            let jy: f64 = StandardNormal.sample(rng);
            let jx: f64 = StandardNormal.sample(rng);
            let (cy, cx) = (cy + self.jitter * jy, cx + self.jitter * jx);
            let amp = rng.random_range(0.6..1.0);
            for y in 0..s {
                for x in 0..s {
                    let d2 = (y as f64 - cy).powi(2) + (x as f64 - cx).powi(2);
                    let noise: f64 = StandardNormal.sample(rng);
                    let v = 0.2 + amp * (-d2 / (2.0 * self.radius * self.radius)).exp() + self.noise * noise;
                    images.push(v.clamp(0.0, 1.0) as f32);
                }
            }
            labels.push(class);
        }
        LabeledDataset::new(images, [1, s, s], labels, self.classes, split)
    }

    /// Train and test splits; classes cycle `0, 1, …` so both are balanced.
    pub fn generate(&self, seed: u64) -> Result<(LabeledDataset, LabeledDataset)> {
        if self.classes < 2 || self.side < 2 {
            return Err(Error::Config("toy blobs need at least 2 classes and side 2".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, 0));
        let train = self.split(self.train, Split::Train, &mut rng)?;
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, 1));
        let test = self.split(self.test, Split::Test, &mut rng)?;
        Ok((train, test))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::Architecture;

    fn idx_bytes(images: &[u8], n: u32, h: u32, w: u32, labels: &[u8]) -> Vec<u8> {
        let mut out = vec![0, 0, 8, 3];
        for v in [n, h, w] {
            out.extend_from_slice(&v.to_be_bytes());
        }
        out.extend_from_slice(images);
        out.extend_from_slice(&[0, 0, 8, 1]);
        out.extend_from_slice(&(labels.len() as u32).to_be_bytes());
        out.extend_from_slice(labels);
        out
    }

    #[test]
    fn idx_toy_file() {
        let bytes = idx_bytes(&[0, 255, 10, 20, 30, 40, 50, 60], 4, 1, 2, &[0, 1, 1, 0]);
        let ds = parse_idx(&bytes, 2, Split::Train).unwrap();
        assert_eq!((ds.len(), ds.classes, ds.item), (4, 2, [1, 1, 2]));
        assert_eq!(ds.images[1], 1.0);
    }

    #[test]
    fn idx_label_equal_to_class_count_reports_its_offset() {
        let bytes = idx_bytes(&[0; 8], 4, 1, 2, &[0, 1, 2, 0]);
        match parse_idx(&bytes, 2, Split::Train) {
            Err(Error::Ingestion { offset, .. }) => assert_eq!(offset, 16 + 8 + 8 + 2),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn idx_count_mismatch_and_truncation() {
        let mut bytes = idx_bytes(&[0; 8], 4, 1, 2, &[0, 1, 1, 0]);
        bytes[24 + 7] = 3;
        assert!(matches!(
            parse_idx(&bytes, 2, Split::Train),
            Err(Error::Ingestion { offset: 28, .. })
        ));
        let bytes = idx_bytes(&[0; 8], 4, 1, 2, &[0, 1, 1, 0]);
        assert!(matches!(
            parse_idx(&bytes[..20], 2, Split::Train),
            Err(Error::Ingestion { offset: 16, .. })
        ));
    }

    #[test]
    fn raw_tensor_round_trip_is_bit_exact() {
        let images = vec![0.1f32, -3.5, f32::MIN_POSITIVE, 7.25, 1e-30, 2.0];
        let ds = LabeledDataset::new(images, [1, 1, 3], vec![1, 0], 2, Split::Test).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.rawt");
        ds.save_raw_tensor(&path).unwrap();
        let back = load_dataset(&path, DatasetFormat::RawTensor, 2, Split::Test).unwrap();
        assert_eq!(
            back.images.iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
            ds.images.iter().map(|v| v.to_bits()).collect::<Vec<_>>()
        );
        assert_eq!(back, ds);
    }

    #[test]
    fn csv_rows_and_errors() {
        let ds = parse_csv(b"1,0,255\n0,51,102\n", [1, 1, 2], 2, Split::Train).unwrap();
        assert_eq!(ds.labels, vec![1, 0]);
        assert_eq!(ds.images, vec![0.0, 1.0, 0.2, 0.4]);
        match parse_csv(b"1,0,255\n2,0,0\n", [1, 1, 2], 2, Split::Train) {
            Err(Error::Ingestion { offset, .. }) => assert_eq!(offset, 8),
            other => panic!("{other:?}"),
        }
        assert!(parse_csv(b"1,0\n", [1, 1, 2], 2, Split::Train).is_err());
    }

    #[test]
    fn standardization_gives_zero_mean_unit_variance() {
        let (mut train, _) = ToyBlobs {
            train: 300,
            test: 3,
            ..ToyBlobs::default()
        }
        .generate(0)
        .unwrap();
        let stats = ChannelStats::of(&train);
        stats.standardize(&mut train).unwrap();
        let after = ChannelStats::of(&train);
        assert!(after.mean[0].abs() < 1e-5);
        assert!((after.std[0] - 1.0).abs() < 1e-4);
    }

    fn labeled(n_per_class: usize, classes: usize) -> LabeledDataset {
        let labels: Vec<usize> = (0..n_per_class * classes).map(|i| i % classes).collect();
        let images = (0..labels.len() * 4).map(|v| v as f32).collect();
        LabeledDataset::new(images, [1, 2, 2], labels, classes, Split::Train).unwrap()
    }

    #[test]
    fn init_sizes_partition_and_determinism() {
        let real = labeled(5, 9);
        let s = init_synthetic(&real, 2, InitMode::FromReal, 3).unwrap();
        assert_eq!(s.len(), 18);
        assert_eq!(s.foundation_indices().len(), 9);
        assert_eq!(s.complement_indices().len(), 9);
        for (f, c) in s.foundation_indices().into_iter().zip(s.complement_indices()) {
            assert_eq!(s.labels()[f], s.labels()[c]);
        }
        assert_eq!(init_synthetic(&real, 2, InitMode::FromReal, 3).unwrap(), s);
        // every chosen image is a real image of the right class
        for i in 0..s.len() {
            let img = &s.images[i * 4..(i + 1) * 4];
            let j = real.images.chunks(4).position(|r| r == img).unwrap();
            assert_eq!(real.labels[j], s.labels()[i]);
        }
        let noise = init_synthetic(&real, 4, InitMode::Noise, 3).unwrap();
        assert_eq!(noise.len(), 36);
    }

    #[test]
    fn odd_ipc_and_small_classes_rejected() {
        let real = labeled(5, 3);
        assert!(matches!(
            init_synthetic(&real, 3, InitMode::FromReal, 0),
            Err(Error::Partition(_))
        ));
        match init_synthetic(&real, 6, InitMode::FromReal, 0) {
            Err(Error::Init(m)) => assert!(m.contains("class 0")),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn synthetic_file_round_trip_and_errors() {
        let mut s = init_synthetic(&labeled(5, 3), 4, InitMode::FromReal, 1).unwrap();
        s.config_hash = 0xdead_beef;
        let bytes = s.to_bytes();
        let back = SyntheticDataset::from_bytes(&bytes).unwrap();
        assert_eq!(back, s);
        assert_eq!(back.to_bytes(), bytes);
        let err = SyntheticDataset::from_bytes(&bytes[..bytes.len() - 7]).unwrap_err();
        assert!(matches!(err, Error::Format(_)));
        let mut bad = bytes.clone();
        bad[..4].copy_from_slice(b"NOPE");
        assert!(matches!(SyntheticDataset::from_bytes(&bad), Err(Error::Format(_))));
    }

    #[test]
    fn evaluation_on_separable_data() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let make = |n: usize, rng: &mut ChaCha8Rng, split| {
            let labels: Vec<usize> = (0..n).map(|i| i % 2).collect();
            let images = labels
                .iter()
                .flat_map(|&l| {
                    let sign = if l == 0 { -1.0 } else { 1.0 };
                    [
                        sign * rng.random_range(0.5..1.5f32),
                        rng.random_range(-1.0..1.0),
                        0.0,
                        0.0,
                    ]
                })
                .collect();
            LabeledDataset::new(images, [1, 2, 2], labels, 2, split).unwrap()
        };
        let train_set = make(200, &mut rng, Split::Train);
        let test = make(100, &mut rng, Split::Test);
        let spec = ModelSpec::new(Architecture::Mlp, 1, 16, [1, 2, 2], 2);
        let cfg = EvalConfig {
            runs: 3,
            epochs: 20,
            lr: 0.05,
            batch_size: 32,
            ..EvalConfig::default()
        };
        let before = train_set.clone();
        let report = evaluate(&train_set.samples(), &test, &spec, &cfg, &AugmentPolicy::none(), 9).unwrap();
        assert_eq!(train_set, before);
        assert!(report.mean > 0.95, "{report:?}");
        let again = evaluate(&train_set.samples(), &test, &spec, &cfg, &AugmentPolicy::none(), 9).unwrap();
        assert_eq!(report, again);
        let single = evaluate(
            &train_set.samples(),
            &test,
            &spec,
            &EvalConfig { runs: 1, ..cfg },
            &AugmentPolicy::none(),
            9,
        )
        .unwrap();
        assert_eq!(single.std, 0.0);
    }

    #[test]
    fn diverged_runs_are_recorded() {
        let train_set = labeled(4, 2);
        let spec = ModelSpec::new(Architecture::Mlp, 1, 4, [1, 2, 2], 2);
        let cfg = EvalConfig {
            runs: 2,
            epochs: 5,
            lr: 1e30,
            momentum: 0.0,
            batch_size: 4,
        };
        // With this seed run 0 diverges and run 1 survives with dead units.
        let report = evaluate(&train_set.samples(), &train_set, &spec, &cfg, &AugmentPolicy::none(), 0).unwrap();
        assert_eq!(report.completed(), 1);
        let failed = &report.runs[0];
        assert!(failed.accuracy.is_none());
        assert!(failed.error.as_deref().unwrap().contains("network 0 diverged"));
        assert_eq!(report.mean, report.runs[1].accuracy.unwrap());

        let one = EvalConfig { runs: 1, ..cfg };
        let err = evaluate(&train_set.samples(), &train_set, &spec, &one, &AugmentPolicy::none(), 0).unwrap_err();
        assert!(err.to_string().contains("all 1 evaluation runs failed"), "{err}");
    }

    #[test]
    fn mean_std_by_hand() {
        assert_eq!(mean_std(&[0.5]), (0.5, 0.0));
        let (m, s) = mean_std(&[1.0, 3.0]);
        assert_eq!((m, s), (2.0, 1.0));
    }
}
