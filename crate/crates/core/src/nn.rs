//! Teacher, student and evaluation architectures, and flat parameter views.
//!
//! # Parameter layout
//!
//! A [`ParamVector`] is every parameter tensor of a network flattened
//! row-major and concatenated in the order below. Trajectory files store
//! exactly this vector, so the order is part of the file contract.
//!
//! * `convnet_d`: for each of the `depth` blocks
//!   `conv.weight [width, c_in, 3, 3]`, `conv.bias [width]`,
//!   `norm.weight [width]`, `norm.bias [width]`; then
//!   `head.weight [classes, width·h·w]`, `head.bias [classes]`, where `h, w`
//!   are the input height and width halved (rounding down) once per block.
//!   Each block is conv3×3 → instance norm (affine) → ReLU → 2×2 average pool.
//! * `mlp`: for each of the `depth` hidden layers `weight [width, in]`,
//!   `bias [width]`; then `head.weight [classes, width]`, `head.bias [classes]`.
//!   Hidden layers use ReLU.
//! * `lenet_like`: `depth` blocks of `conv.weight [width, c_in, 3, 3]`,
//!   `conv.bias [width]` (conv3×3 → ReLU → 2×2 average pool, no
//!   normalization); then `fc.weight [4·width, width·h·w]`, `fc.bias [4·width]`
//!   with ReLU; then the head.

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::tensor::{Element, Tensor};
use crate::{Error, Result};

const NORM_EPS: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Architecture {
    ConvnetD,
    Mlp,
    LenetLike,
}

impl Architecture {
    pub fn code(self) -> u32 {
        match self {
            Architecture::ConvnetD => 1,
            Architecture::Mlp => 2,
            Architecture::LenetLike => 3,
        }
    }

    pub fn from_code(code: u32) -> Result<Self> {
        match code {
            1 => Ok(Architecture::ConvnetD),
            2 => Ok(Architecture::Mlp),
            3 => Ok(Architecture::LenetLike),
            other => Err(Error::Spec(format!("unknown architecture code {other}"))),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Architecture::ConvnetD => "convnet_d",
            Architecture::Mlp => "mlp",
            Architecture::LenetLike => "lenet_like",
        }
    }
}

impl fmt::Display for Architecture {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Architecture {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "convnet_d" => Ok(Architecture::ConvnetD),
            "mlp" => Ok(Architecture::Mlp),
            "lenet_like" => Ok(Architecture::LenetLike),
            other => Err(Error::Spec(format!("unsupported architecture id {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub arch: Architecture,
    pub depth: usize,
    /// Channels per conv block, or hidden units per MLP layer.
    pub width: usize,
    /// Input shape `[channels, height, width]`.
    pub input: [usize; 3],
    pub classes: usize,
}

/// Name and shape of one parameter tensor.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParamShape {
    pub name: String,
    pub shape: Vec<usize>,
}

impl ParamShape {
    fn new(name: String, shape: Vec<usize>) -> Self {
        Self { name, shape }
    }

    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }
}

impl ModelSpec {
    pub fn new(arch: Architecture, depth: usize, width: usize, input: [usize; 3], classes: usize) -> Self {
        Self {
            arch,
            depth,
            width,
            input,
            classes,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.depth < 1 {
            return Err(Error::Spec("depth must be at least 1".into()));
        }
        if self.classes < 2 {
            return Err(Error::Spec(format!(
                "class count must be at least 2, got {}",
                self.classes
            )));
        }
        if self.width < 1 {
            return Err(Error::Spec("width must be at least 1".into()));
        }
        if self.input.contains(&0) {
            return Err(Error::Spec(format!("input shape {:?} has an empty axis", self.input)));
        }
        if self.arch != Architecture::Mlp {
            let (mut h, mut w) = (self.input[1], self.input[2]);
            for block in 0..self.depth {
                if h < 2 || w < 2 {
                    return Err(Error::Spec(format!(
                        "input {}×{} is too small for {} pooling blocks (block {block} sees {h}×{w})",
                        self.input[1], self.input[2], self.depth
                    )));
                }
                h /= 2;
                w /= 2;
            }
        }
        Ok(())
    }

    fn pooled_hw(&self) -> (usize, usize) {
        let (mut h, mut w) = (self.input[1], self.input[2]);
        for _ in 0..self.depth {
            h /= 2;
            w /= 2;
        }
        (h, w)
    }

    pub fn input_len(&self) -> usize {
        self.input.iter().product()
    }

    /// Parameter tensors in layout order (see the module docs).
    pub fn param_shapes(&self) -> Vec<ParamShape> {
        let mut shapes = Vec::new();
        let c = self.classes;
        let w = self.width;
        let features = match self.arch {
            Architecture::ConvnetD | Architecture::LenetLike => {
                let mut c_in = self.input[0];
                for b in 0..self.depth {
                    shapes.push(ParamShape::new(format!("block{b}.conv.weight"), vec![w, c_in, 3, 3]));
                    shapes.push(ParamShape::new(format!("block{b}.conv.bias"), vec![w]));
                    if self.arch == Architecture::ConvnetD {
                        shapes.push(ParamShape::new(format!("block{b}.norm.weight"), vec![w]));
                        shapes.push(ParamShape::new(format!("block{b}.norm.bias"), vec![w]));
                    }
                    c_in = w;
                }
                let (h, wd) = self.pooled_hw();
                let flat = w * h * wd;
                if self.arch == Architecture::LenetLike {
                    shapes.push(ParamShape::new("fc.weight".into(), vec![4 * w, flat]));
                    shapes.push(ParamShape::new("fc.bias".into(), vec![4 * w]));
                    4 * w
                } else {
                    flat
                }
            }
            Architecture::Mlp => {
                let mut fan_in = self.input_len();
                for l in 0..self.depth {
                    shapes.push(ParamShape::new(format!("hidden{l}.weight"), vec![w, fan_in]));
                    shapes.push(ParamShape::new(format!("hidden{l}.bias"), vec![w]));
                    fan_in = w;
                }
                w
            }
        };
        shapes.push(ParamShape::new("head.weight".into(), vec![c, features]));
        shapes.push(ParamShape::new("head.bias".into(), vec![c]));
        shapes
    }

    /// Length `P` of the flat parameter vector.
    pub fn num_params(&self) -> usize {
        self.param_shapes().iter().map(ParamShape::numel).sum()
    }
}

/// All parameters of a network as one contiguous vector, in layout order.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamVector<T>(pub Vec<T>);

impl<T: Element> ParamVector<T> {
    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn as_slice(&self) -> &[T] {
        &self.0
    }

    pub fn cast<U: Element>(&self) -> ParamVector<U> {
        ParamVector(self.0.iter().map(|v| U::lit(v.as_f64())).collect())
    }
}

/// `Σ (a_i − b_i)²`, accumulated in index order.
pub fn param_distance_sq<T: Element>(a: &[T], b: &[T]) -> Result<T> {
    if a.len() != b.len() {
        return Err(Error::Dimension(format!(
            "parameter vectors have lengths {} and {}",
            a.len(),
            b.len()
        )));
    }
    Ok(a.iter().zip(b).fold(T::zero(), |acc, (&x, &y)| {
        let d = x - y;
        acc + d * d
    }))
}

/// Fan-in scaled uniform initialization, drawn in layout order.
fn init_params<T: Element>(spec: &ModelSpec, seed: u64) -> Vec<T> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(spec.num_params());
    let mut fan_in = 1;
    for ps in spec.param_shapes() {
        if ps.name.ends_with("norm.weight") {
            out.extend(std::iter::repeat_n(T::one(), ps.numel()));
            continue;
        }
        if ps.name.ends_with("norm.bias") {
            out.extend(std::iter::repeat_n(T::zero(), ps.numel()));
            continue;
        }
        if ps.shape.len() > 1 {
            fan_in = ps.shape[1..].iter().product();
        }
        let bound = 1.0 / (fan_in as f64).sqrt();
        out.extend((0..ps.numel()).map(|_| T::lit(rng.random_range(-bound..bound))));
    }
    out
}

pub fn flatten<T: Element>(params: &[Tensor<T>]) -> ParamVector<T> {
    let mut out = Vec::with_capacity(params.iter().map(Tensor::numel).sum());
    for p in params {
        out.extend_from_slice(p.data());
    }
    ParamVector(out)
}

/// Splits a flat vector into leaf tensors (gradient-tracked when
/// `requires_grad`).
pub fn unflatten<T: Element>(spec: &ModelSpec, flat: &[T], requires_grad: bool) -> Result<Vec<Tensor<T>>> {
    let shapes = spec.param_shapes();
    let total: usize = shapes.iter().map(ParamShape::numel).sum();
    if flat.len() != total {
        return Err(Error::Dimension(format!(
            "parameter vector has {} entries, {} model expects {total}",
            flat.len(),
            spec.arch
        )));
    }
    let mut offset = 0;
    shapes
        .iter()
        .map(|ps| {
            let chunk = flat[offset..offset + ps.numel()].to_vec();
            offset += ps.numel();
            if requires_grad {
                Tensor::param(chunk, &ps.shape)
            } else {
                Tensor::new(chunk, &ps.shape)
            }
        })
        .collect()
}

fn check_batch<T: Element>(spec: &ModelSpec, x: &Tensor<T>) -> Result<usize> {
    let shape = x.shape();
    let n = *shape
        .first()
        .ok_or_else(|| Error::Dimension("forward: empty batch shape".into()))?;
    let ok = match spec.arch {
        Architecture::Mlp => shape[1..] == spec.input || shape[1..] == [spec.input_len()],
        _ => shape[1..] == spec.input,
    };
    if !ok {
        return Err(Error::Dimension(format!(
            "forward: batch shape {shape:?} does not match model input {:?}",
            spec.input
        )));
    }
    Ok(n)
}

/// Logits `[N, classes]` of the network with the given parameters.
pub fn forward<T: Element>(spec: &ModelSpec, params: &[Tensor<T>], x: &Tensor<T>) -> Result<Tensor<T>> {
    let n = check_batch(spec, x)?;
    let expected = spec.param_shapes();
    if params.len() != expected.len() || params.iter().zip(&expected).any(|(p, e)| p.shape() != e.shape) {
        return Err(Error::Dimension(format!(
            "forward: parameter tensors do not match the {} layout",
            spec.arch
        )));
    }
    let eps = T::lit(NORM_EPS);
    let mut it = params.iter();
    let mut next = || it.next().expect("layout checked above");
    let features = match spec.arch {
        Architecture::ConvnetD | Architecture::LenetLike => {
            let mut h = x.reshape(&[n, spec.input[0], spec.input[1], spec.input[2]])?;
            for _ in 0..spec.depth {
                let (k, b) = (next(), next());
                h = h.conv2d_bias(k, b)?;
                if spec.arch == Architecture::ConvnetD {
                    let (g, beta) = (next(), next());
                    h = h.instance_norm_affine(g, beta, eps)?;
                }
                h = h.relu().avg_pool2d()?;
            }
            let flat = h.numel() / n;
            let mut f = h.reshape(&[n, flat])?;
            if spec.arch == Architecture::LenetLike {
                let (w, b) = (next(), next());
                f = f.linear(w, b)?.relu();
            }
            f
        }
        Architecture::Mlp => {
            let mut h = x.reshape(&[n, spec.input_len()])?;
            for _ in 0..spec.depth {
                let (w, b) = (next(), next());
                h = h.linear(w, b)?.relu();
            }
            h
        }
    };
    let (w, b) = (next(), next());
    features.linear(w, b)
}

/// A network together with its parameter tensors.
#[derive(Debug, Clone)]
pub struct Network<T: Element> {
    spec: ModelSpec,
    params: Vec<Tensor<T>>,
}

impl<T: Element> Network<T> {
    /// Freshly initialized network; identical `(spec, seed)` give bit-identical
    /// parameters.
    pub fn build(spec: &ModelSpec, seed: u64) -> Result<Self> {
        spec.validate()?;
        let flat = init_params::<T>(spec, seed);
        Self::from_params(spec, &flat)
    }

    pub fn from_params(spec: &ModelSpec, flat: &[T]) -> Result<Self> {
        spec.validate()?;
        Ok(Self {
            spec: spec.clone(),
            params: unflatten(spec, flat, true)?,
        })
    }

    pub fn spec(&self) -> &ModelSpec {
        &self.spec
    }

    pub fn params(&self) -> &[Tensor<T>] {
        &self.params
    }

    pub fn param_vector(&self) -> ParamVector<T> {
        flatten(&self.params)
    }

    /// Replaces the parameters with new leaf tensors holding `flat`.
    pub fn set_params(&mut self, flat: &[T]) -> Result<()> {
        self.params = unflatten(&self.spec, flat, true)?;
        Ok(())
    }

    pub fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        forward(&self.spec, &self.params, x)
    }
}
