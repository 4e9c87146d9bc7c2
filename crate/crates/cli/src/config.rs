//! The TOML run configuration.
//!
//! ```toml
//! seed = 0
//! out_dir = "runs/toy"
//!
//! [dataset]
//! format = "raw_tensor"        # idx_like | raw_tensor | csv
//! train = "data/train.rawt"
//! test = "data/test.rawt"
//! classes = 3
//! # shape = [1, 8, 8]          # required for csv
//!
//! [model]
//! arch = "convnet_d"
//! depth = 2
//! width = 16
//!
//! [buffer]
//! experts = 5
//! epochs = 10
//!
//! [distill]
//! iterations = 300
//! max_step = 10
//!
//! [eval]
//! runs = 10
//! epochs = 200
//! ```
//!
//! Every section except `[dataset]` is optional and every key has a
//! default. Unknown keys are errors. Relative paths are resolved against the
//! directory holding the config file.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use trajdistill::augment::AugmentPolicy;
use trajdistill::buffer::TrajectoryHyper;
use trajdistill::distill::DistillConfig;
use trajdistill::evaldata::{DatasetFormat, EvalConfig};
use trajdistill::nn::{Architecture, ModelSpec};

use crate::CliError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FormatName {
    IdxLike,
    RawTensor,
    Csv,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetSection {
    pub format: FormatName,
    pub train: Option<PathBuf>,
    pub test: Option<PathBuf>,
    pub classes: usize,
    /// Item shape `[C, H, W]`, for formats that do not store it.
    pub shape: Option<[usize; 3]>,
    /// Standardize channels with the training split's statistics.
    #[serde(default = "yes")]
    pub standardize: bool,
}

fn yes() -> bool {
    true
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ArchSection {
    pub arch: Architecture,
    pub depth: usize,
    pub width: usize,
}

impl Default for ArchSection {
    fn default() -> Self {
        Self {
            arch: Architecture::ConvnetD,
            depth: 3,
            width: 128,
        }
    }
}

impl ArchSection {
    pub fn spec(&self, input: [usize; 3], classes: usize) -> ModelSpec {
        ModelSpec::new(self.arch, self.depth, self.width, input, classes)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BufferSection {
    pub experts: usize,
    pub lr: f64,
    pub momentum: f64,
    pub epochs: usize,
    pub batch_size: usize,
    /// Optimizer steps per snapshot; omit for once per epoch.
    pub snapshot_stride: Option<usize>,
    pub ema_decay: f64,
}

impl Default for BufferSection {
    fn default() -> Self {
        let h = TrajectoryHyper::default();
        Self {
            experts: 10,
            lr: h.lr,
            momentum: h.momentum,
            epochs: h.epochs,
            batch_size: h.batch_size,
            snapshot_stride: h.snapshot_stride,
            ema_decay: h.ema_decay,
        }
    }
}

impl BufferSection {
    pub fn hyper(&self) -> TrajectoryHyper {
        TrajectoryHyper {
            lr: self.lr,
            momentum: self.momentum,
            epochs: self.epochs,
            batch_size: self.batch_size,
            snapshot_stride: self.snapshot_stride,
            ema_decay: self.ema_decay,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalSection {
    pub runs: usize,
    pub epochs: usize,
    pub lr: f64,
    pub momentum: f64,
    pub batch_size: usize,
    /// Architectures to evaluate; empty means just `[model]`.
    pub models: Vec<ArchSection>,
    pub augment: AugmentPolicy,
}

impl Default for EvalSection {
    fn default() -> Self {
        let e = EvalConfig::default();
        Self {
            runs: e.runs,
            epochs: e.epochs,
            lr: e.lr,
            momentum: e.momentum,
            batch_size: e.batch_size,
            models: Vec::new(),
            augment: AugmentPolicy::default(),
        }
    }
}

impl EvalSection {
    pub fn train(&self) -> EvalConfig {
        EvalConfig {
            runs: self.runs,
            epochs: self.epochs,
            lr: self.lr,
            momentum: self.momentum,
            batch_size: self.batch_size,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default)]
    pub seed: u64,
    pub out_dir: Option<PathBuf>,
    /// Distillation iterations between checkpoints.
    #[serde(default = "default_checkpoint_every")]
    pub checkpoint_every: usize,
    pub dataset: DatasetSection,
    #[serde(default)]
    pub model: ArchSection,
    #[serde(default)]
    pub buffer: BufferSection,
    #[serde(default)]
    pub distill: DistillConfig,
    #[serde(default)]
    pub eval: EvalSection,
}

fn default_checkpoint_every() -> usize {
    50
}

fn invalid(field: &str, msg: impl std::fmt::Display) -> CliError {
    CliError::config(format!("{field}: {msg}"))
}

impl RunConfig {
    /// Reads and parses `path`, resolving relative paths against its directory.
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::config(format!("cannot read config {}: {e}", path.display())))?;
        let mut cfg: RunConfig =
            toml::from_str(&text).map_err(|e| CliError::config(format!("{}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new("."));
        let resolve = |p: &mut Option<PathBuf>| {
            if let Some(p) = p {
                if p.is_relative() {
                    *p = base.join(&*p);
                }
            }
        };
        resolve(&mut cfg.dataset.train);
        resolve(&mut cfg.dataset.test);
        resolve(&mut cfg.out_dir);
        Ok(cfg)
    }

    /// Checks everything that can be checked without reading data.
    pub fn validate(&self) -> Result<(), CliError> {
        let d = &self.dataset;
        if d.classes < 2 {
            return Err(invalid("dataset.classes", "must be at least 2"));
        }
        if d.format == FormatName::Csv && d.shape.is_none() {
            return Err(invalid("dataset.shape", "required for the csv format"));
        }
        if self.checkpoint_every == 0 {
            return Err(invalid("checkpoint_every", "must be at least 1"));
        }
        if self.buffer.experts == 0 {
            return Err(invalid("buffer.experts", "must be at least 1"));
        }
        self.buffer.hyper().validate().map_err(|e| invalid("buffer", e))?;
        self.distill.validate().map_err(|e| invalid("distill", e))?;
        self.eval.train().validate().map_err(|e| invalid("eval", e))?;
        self.eval.augment.validate().map_err(|e| invalid("eval.augment", e))?;
        if self.buffer.snapshot_stride.is_none() && self.distill.max_step > self.buffer.epochs {
            return Err(invalid(
                "distill.max_step",
                format!(
                    "{} exceeds the trajectory length T = buffer.epochs = {}",
                    self.distill.max_step, self.buffer.epochs
                ),
            ));
        }
        Ok(())
    }

    pub fn format(&self) -> DatasetFormat {
        match self.dataset.format {
            FormatName::IdxLike => DatasetFormat::IdxLike,
            FormatName::RawTensor => DatasetFormat::RawTensor,
            FormatName::Csv => DatasetFormat::Csv {
                shape: self.dataset.shape.unwrap_or([1, 1, 1]),
            },
        }
    }

    pub fn train_path(&self) -> Result<&Path, CliError> {
        existing(self.dataset.train.as_deref(), "dataset.train")
    }

    pub fn test_path(&self) -> Result<&Path, CliError> {
        existing(self.dataset.test.as_deref(), "dataset.test")
    }

    pub fn out_dir(&self, flag: Option<&Path>) -> PathBuf {
        flag.map(Path::to_path_buf)
            .or_else(|| self.out_dir.clone())
            .unwrap_or_else(|| PathBuf::from("out"))
    }

    pub fn eval_models(&self) -> Vec<ArchSection> {
        if self.eval.models.is_empty() {
            vec![self.model.clone()]
        } else {
            self.eval.models.clone()
        }
    }

    /// First 8 bytes of the SHA-256 of the effective configuration.
    pub fn hash(&self) -> u64 {
        let canonical = toml::to_string(self).expect("config serializes");
        let digest = Sha256::digest(canonical.as_bytes());
        u64::from_be_bytes(digest[..8].try_into().expect("8 bytes"))
    }
}

fn existing<'a>(path: Option<&'a Path>, field: &str) -> Result<&'a Path, CliError> {
    let path = path.ok_or_else(|| invalid(field, "missing; set it in the config file"))?;
    if !path.is_file() {
        return Err(invalid(field, format!("file not found: {}", path.display())));
    }
    Ok(path)
}

#[cfg(test)]
mod tests {
    use super::*;

    const FULL: &str = r#"
seed = 0
out_dir = "run"
checkpoint_every = 50

[dataset]
format = "raw_tensor"
train = "train.rawt"
test = "test.rawt"
classes = 3
standardize = true

[model]
arch = "convnet_d"
depth = 3
width = 128

[buffer]
experts = 10
epochs = 50
lr = 0.01
momentum = 0.9
batch_size = 256

[distill]
iterations = 1000
max_step = 20
schedule = "progressive"
steps_per_snapshot = 1
image_lr = 100.0
image_momentum = 0.5
student_lr = 0.01
learn_lr = true
beta_match = 1.0
beta_overlap = 0.1
retrain_points = 4
ipc = 2
init = "from_real"

[distill.augment]
transforms = ["flip", "translate", "scale", "rotate", "brightness", "cutout"]
mode = "single"

[eval]
runs = 10
epochs = 1000
models = [{ arch = "convnet_d", depth = 3, width = 128 }, { arch = "mlp", depth = 2, width = 256 }]
"#;

    fn parse(text: &str) -> RunConfig {
        toml::from_str(text).unwrap()
    }

    #[test]
    fn full_config_parses_and_validates() {
        let cfg = parse(FULL);
        cfg.validate().unwrap();
        assert_eq!(cfg.eval_models().len(), 2);
        assert_eq!(cfg.eval_models()[1].arch, Architecture::Mlp);
        assert_eq!(cfg.buffer.hyper().trajectory_len(1000), 50);
    }

    #[test]
    fn minimal_config_uses_defaults() {
        let cfg = parse("[dataset]\nformat = \"idx_like\"\nclasses = 10\n");
        cfg.validate().unwrap();
        assert_eq!(cfg.model, ArchSection::default());
        assert_eq!(cfg.eval_models(), vec![ArchSection::default()]);
        assert_eq!(cfg.checkpoint_every, 50);
    }

    #[test]
    fn hash_tracks_content() {
        let a = parse(FULL);
        let mut b = a.clone();
        assert_eq!(a.hash(), b.hash());
        b.seed = 1;
        assert_ne!(a.hash(), b.hash());
    }

    #[test]
    fn rejections_name_the_field() {
        assert!(toml::from_str::<RunConfig>(&FULL.replace("ipc = 2", "ipcs = 2")).is_err());
        let msg = |text: &str| parse(text).validate().unwrap_err().message;
        assert!(msg(&FULL.replace("max_step = 20", "max_step = 60")).starts_with("distill.max_step"));
        assert!(msg(&FULL.replace("format = \"raw_tensor\"", "format = \"csv\"")).starts_with("dataset.shape"));
        assert!(msg(&FULL.replace("ipc = 2", "ipc = 3")).starts_with("distill"));
        assert!(msg(&FULL.replace("experts = 10", "experts = 0")).starts_with("buffer.experts"));
    }
}
