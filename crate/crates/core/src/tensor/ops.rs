use std::rc::Rc;

use super::kernels::{self, ConvDims, ResamplePlan};
use super::{grad_enabled, numel, Element, Tensor};
use crate::{Error, Result};

/// Primitive that produced a tensor, with the inputs its backward rule needs.
pub(crate) enum Op<T: Element> {
    Leaf,
    Add(Tensor<T>, Tensor<T>),
    Sub(Tensor<T>, Tensor<T>),
    Mul(Tensor<T>, Tensor<T>),
    Div(Tensor<T>, Tensor<T>),
    Neg(Tensor<T>),
    Scale(Tensor<T>, T),
    DivConst(Tensor<T>, T),
    AddConst(Tensor<T>, T),
    /// Tensor times a single-element tensor.
    MulScalar(Tensor<T>, Tensor<T>),
    Exp(Tensor<T>),
    Log(Tensor<T>),
    Powf(Tensor<T>, T),
    Relu(Tensor<T>),
    Sum(Tensor<T>),
    /// Single element broadcast to the output shape.
    Expand(Tensor<T>),
    Reshape(Tensor<T>),
    MatMul(Tensor<T>, Tensor<T>),
    Transpose(Tensor<T>),
    /// `[m, n] -> [n]`
    SumRows(Tensor<T>),
    /// `[n] -> [m, n]`
    BroadcastRows(Tensor<T>),
    /// `[m, n] -> [m]`
    SumCols(Tensor<T>),
    /// `[m] -> [m, n]`
    BroadcastCols(Tensor<T>),
    Conv(Tensor<T>, Tensor<T>),
    /// (upstream, kernel) -> input-shaped
    ConvInputGrad(Tensor<T>, Tensor<T>),
    /// (input, upstream) -> kernel-shaped
    ConvWeightGrad(Tensor<T>, Tensor<T>),
    AvgPool(Tensor<T>),
    AvgPoolAdjoint(Tensor<T>),
    GatherRows(Tensor<T>, Rc<[usize]>),
    ScatterRows(Tensor<T>, Rc<[usize]>),
    Resample(Tensor<T>, Rc<ResamplePlan<T>>, bool),
    PairwiseSqDist(Tensor<T>, Tensor<T>),
    /// Flattened concatenation of all inputs.
    Concat(Vec<Tensor<T>>),
    /// Contiguous range `[offset, offset + len)` of the flattened input.
    Slice(Tensor<T>, usize),
    /// Places the input at `offset` inside a zero vector of the output length.
    Embed(Tensor<T>, usize),
}

impl<T: Element> Op<T> {
    pub(crate) fn inputs(&self) -> Vec<&Tensor<T>> {
        use Op::*;
        match self {
            Leaf => Vec::new(),
            Add(a, b)
            | Sub(a, b)
            | Mul(a, b)
            | Div(a, b)
            | MulScalar(a, b)
            | MatMul(a, b)
            | Conv(a, b)
            | ConvInputGrad(a, b)
            | ConvWeightGrad(a, b)
            | PairwiseSqDist(a, b) => vec![a, b],
            Neg(a)
            | Scale(a, _)
            | DivConst(a, _)
            | AddConst(a, _)
            | Exp(a)
            | Log(a)
            | Powf(a, _)
            | Relu(a)
            | Sum(a)
            | Expand(a)
            | Reshape(a)
            | Transpose(a)
            | SumRows(a)
            | BroadcastRows(a)
            | SumCols(a)
            | BroadcastCols(a)
            | AvgPool(a)
            | AvgPoolAdjoint(a)
            | GatherRows(a, _)
            | ScatterRows(a, _)
            | Resample(a, _, _)
            | Slice(a, _)
            | Embed(a, _) => vec![a],
            Concat(parts) => parts.iter().collect(),
        }
    }

    pub(crate) fn take_inputs(&mut self) -> Vec<Tensor<T>> {
        let op = std::mem::replace(self, Op::Leaf);
        use Op::*;
        match op {
            Leaf => Vec::new(),
            Add(a, b)
            | Sub(a, b)
            | Mul(a, b)
            | Div(a, b)
            | MulScalar(a, b)
            | MatMul(a, b)
            | Conv(a, b)
            | ConvInputGrad(a, b)
            | ConvWeightGrad(a, b)
            | PairwiseSqDist(a, b) => vec![a, b],
            Neg(a)
            | Scale(a, _)
            | DivConst(a, _)
            | AddConst(a, _)
            | Exp(a)
            | Log(a)
            | Powf(a, _)
            | Relu(a)
            | Sum(a)
            | Expand(a)
            | Reshape(a)
            | Transpose(a)
            | SumRows(a)
            | BroadcastRows(a)
            | SumCols(a)
            | BroadcastCols(a)
            | AvgPool(a)
            | AvgPoolAdjoint(a)
            | GatherRows(a, _)
            | ScatterRows(a, _)
            | Resample(a, _, _)
            | Slice(a, _)
            | Embed(a, _) => vec![a],
            Concat(parts) => parts,
        }
    }
}

fn dim_err(msg: String) -> Error {
    Error::Dimension(msg)
}

/// Records `op` only when grad mode is on and some input needs a gradient.
fn record<T: Element>(data: Vec<T>, shape: Vec<usize>, op: Op<T>) -> Tensor<T> {
    let needs = grad_enabled() && op.inputs().iter().any(|t| t.requires_grad());
    if needs {
        Tensor::from_parts(data, shape, true, op)
    } else {
        Tensor::from_parts(data, shape, false, Op::Leaf)
    }
}

fn same_shape<T: Element>(a: &Tensor<T>, b: &Tensor<T>, what: &str) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(dim_err(format!(
            "{what}: shapes {:?} and {:?} differ",
            a.shape(),
            b.shape()
        )));
    }
    Ok(())
}

fn zip_map<T: Element>(a: &Tensor<T>, b: &Tensor<T>, f: impl Fn(T, T) -> T) -> Vec<T> {
    a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect()
}

fn map<T: Element>(a: &Tensor<T>, f: impl Fn(T) -> T) -> Vec<T> {
    a.data().iter().map(|&x| f(x)).collect()
}

fn matrix_dims<T: Element>(a: &Tensor<T>, what: &str) -> Result<(usize, usize)> {
    match *a.shape() {
        [m, n] => Ok((m, n)),
        _ => Err(dim_err(format!("{what}: expected a matrix, got shape {:?}", a.shape()))),
    }
}

fn conv_dims(x_shape: &[usize], k_shape: &[usize]) -> Result<ConvDims> {
    let [n, c, h, w] = *x_shape else {
        return Err(dim_err(format!("conv2d: input must be N×C×H×W, got {x_shape:?}")));
    };
    let [o, kc, kh, kw] = *k_shape else {
        return Err(dim_err(format!("conv2d: kernel must be O×C×3×3, got {k_shape:?}")));
    };
    if kh != 3 || kw != 3 {
        return Err(dim_err(format!(
            "conv2d: kernel spatial size must be 3×3, got {kh}×{kw}"
        )));
    }
    if kc != c {
        return Err(dim_err(format!("conv2d: kernel expects {kc} channels, input has {c}")));
    }
    Ok(ConvDims { n, c, o, h, w })
}

impl<T: Element> Tensor<T> {
    pub fn add(&self, other: &Tensor<T>) -> Result<Tensor<T>> {
        same_shape(self, other, "add")?;
        Ok(record(
            zip_map(self, other, |x, y| x + y),
            self.shape().to_vec(),
            Op::Add(self.clone(), other.clone()),
        ))
    }

    pub fn sub(&self, other: &Tensor<T>) -> Result<Tensor<T>> {
        same_shape(self, other, "sub")?;
        Ok(record(
            zip_map(self, other, |x, y| x - y),
            self.shape().to_vec(),
            Op::Sub(self.clone(), other.clone()),
        ))
    }

    pub fn mul(&self, other: &Tensor<T>) -> Result<Tensor<T>> {
        same_shape(self, other, "mul")?;
        Ok(record(
            zip_map(self, other, |x, y| x * y),
            self.shape().to_vec(),
            Op::Mul(self.clone(), other.clone()),
        ))
    }

    pub fn div(&self, other: &Tensor<T>) -> Result<Tensor<T>> {
        same_shape(self, other, "div")?;
        Ok(record(
            zip_map(self, other, |x, y| x / y),
            self.shape().to_vec(),
            Op::Div(self.clone(), other.clone()),
        ))
    }

    pub fn neg(&self) -> Tensor<T> {
        record(map(self, |x| -x), self.shape().to_vec(), Op::Neg(self.clone()))
    }

    pub fn scale(&self, c: T) -> Tensor<T> {
        record(map(self, |x| x * c), self.shape().to_vec(), Op::Scale(self.clone(), c))
    }

    pub fn div_scalar(&self, c: T) -> Tensor<T> {
        record(
            map(self, |x| x / c),
            self.shape().to_vec(),
            Op::DivConst(self.clone(), c),
        )
    }

    pub fn add_scalar(&self, c: T) -> Tensor<T> {
        record(
            map(self, |x| x + c),
            self.shape().to_vec(),
            Op::AddConst(self.clone(), c),
        )
    }

    /// Multiplies every element by the value of a single-element tensor.
    pub fn mul_scalar(&self, s: &Tensor<T>) -> Result<Tensor<T>> {
        let v = s.item()?;
        Ok(record(
            map(self, |x| x * v),
            self.shape().to_vec(),
            Op::MulScalar(self.clone(), s.clone()),
        ))
    }

    pub fn exp(&self) -> Tensor<T> {
        record(map(self, |x| x.exp()), self.shape().to_vec(), Op::Exp(self.clone()))
    }

    pub fn ln(&self) -> Tensor<T> {
        record(map(self, |x| x.ln()), self.shape().to_vec(), Op::Log(self.clone()))
    }

    pub fn powf(&self, p: T) -> Tensor<T> {
        record(
            map(self, |x| x.powf(p)),
            self.shape().to_vec(),
            Op::Powf(self.clone(), p),
        )
    }

    pub fn square(&self) -> Tensor<T> {
        let data = map(self, |x| x * x);
        record(data, self.shape().to_vec(), Op::Mul(self.clone(), self.clone()))
    }

    pub fn relu(&self) -> Tensor<T> {
        record(
            map(self, |x| if x > T::zero() { x } else { T::zero() }),
            self.shape().to_vec(),
            Op::Relu(self.clone()),
        )
    }

    /// Sum of all elements, accumulated sequentially in storage order.
    pub fn sum(&self) -> Tensor<T> {
        let total = self.data().iter().fold(T::zero(), |acc, &x| acc + x);
        record(vec![total], Vec::new(), Op::Sum(self.clone()))
    }

    pub fn mean(&self) -> Tensor<T> {
        let n = T::from_usize(self.numel()).unwrap_or_else(T::one);
        self.sum().div_scalar(n)
    }

    /// Broadcasts a single-element tensor to `shape`.
    pub fn expand(&self, shape: &[usize]) -> Result<Tensor<T>> {
        let v = self.item()?;
        Ok(record(vec![v; numel(shape)], shape.to_vec(), Op::Expand(self.clone())))
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor<T>> {
        if numel(shape) != self.numel() {
            return Err(Error::Shape(format!(
                "cannot reshape {:?} into {:?}",
                self.shape(),
                shape
            )));
        }
        Ok(record(self.to_vec(), shape.to_vec(), Op::Reshape(self.clone())))
    }

    pub fn matmul(&self, other: &Tensor<T>) -> Result<Tensor<T>> {
        let (m, k) = matrix_dims(self, "matmul")?;
        let (k2, n) = matrix_dims(other, "matmul")?;
        if k != k2 {
            return Err(dim_err(format!("matmul: inner dimensions {k} and {k2} disagree")));
        }
        let data = kernels::matmul(self.data(), other.data(), m, k, n);
        Ok(record(data, vec![m, n], Op::MatMul(self.clone(), other.clone())))
    }

    pub fn transpose(&self) -> Result<Tensor<T>> {
        let (m, n) = matrix_dims(self, "transpose")?;
        Ok(record(
            kernels::transpose(self.data(), m, n),
            vec![n, m],
            Op::Transpose(self.clone()),
        ))
    }

    /// Column-wise totals of a matrix: `[m, n] -> [n]`.
    pub fn sum_rows(&self) -> Result<Tensor<T>> {
        let (m, n) = matrix_dims(self, "sum_rows")?;
        let mut out = vec![T::zero(); n];
        for i in 0..m {
            for (o, &v) in out.iter_mut().zip(&self.data()[i * n..(i + 1) * n]) {
                *o = *o + v;
            }
        }
        Ok(record(out, vec![n], Op::SumRows(self.clone())))
    }

    /// Repeats a vector as `m` rows: `[n] -> [m, n]`.
    pub fn broadcast_rows(&self, m: usize) -> Result<Tensor<T>> {
        let [n] = *self.shape() else {
            return Err(dim_err(format!(
                "broadcast_rows: expected a vector, got {:?}",
                self.shape()
            )));
        };
        let mut out = Vec::with_capacity(m * n);
        for _ in 0..m {
            out.extend_from_slice(self.data());
        }
        Ok(record(out, vec![m, n], Op::BroadcastRows(self.clone())))
    }

    /// Row totals of a matrix: `[m, n] -> [m]`.
    pub fn sum_cols(&self) -> Result<Tensor<T>> {
        let (m, n) = matrix_dims(self, "sum_cols")?;
        let out = (0..m)
            .map(|i| {
                self.data()[i * n..(i + 1) * n]
                    .iter()
                    .fold(T::zero(), |acc, &v| acc + v)
            })
            .collect();
        Ok(record(out, vec![m], Op::SumCols(self.clone())))
    }

    /// Repeats each element across `n` columns: `[m] -> [m, n]`.
    pub fn broadcast_cols(&self, n: usize) -> Result<Tensor<T>> {
        let [m] = *self.shape() else {
            return Err(dim_err(format!(
                "broadcast_cols: expected a vector, got {:?}",
                self.shape()
            )));
        };
        let mut out = Vec::with_capacity(m * n);
        for &v in self.data() {
            out.extend(std::iter::repeat_n(v, n));
        }
        Ok(record(out, vec![m, n], Op::BroadcastCols(self.clone())))
    }

    /// 3×3 convolution (cross-correlation) with "same" zero padding.
    pub fn conv2d(&self, kernel: &Tensor<T>) -> Result<Tensor<T>> {
        let d = conv_dims(self.shape(), kernel.shape())?;
        let data = kernels::conv3x3(self.data(), kernel.data(), d);
        Ok(record(
            data,
            vec![d.n, d.o, d.h, d.w],
            Op::Conv(self.clone(), kernel.clone()),
        ))
    }

    fn conv_input_grad(upstream: &Tensor<T>, kernel: &Tensor<T>, input_shape: &[usize]) -> Result<Tensor<T>> {
        let d = conv_dims(input_shape, kernel.shape())?;
        let data = kernels::conv3x3_input_grad(upstream.data(), kernel.data(), d);
        Ok(record(
            data,
            input_shape.to_vec(),
            Op::ConvInputGrad(upstream.clone(), kernel.clone()),
        ))
    }

    fn conv_weight_grad(input: &Tensor<T>, upstream: &Tensor<T>, kernel_shape: &[usize]) -> Result<Tensor<T>> {
        let d = conv_dims(input.shape(), kernel_shape)?;
        let data = kernels::conv3x3_weight_grad(input.data(), upstream.data(), d);
        Ok(record(
            data,
            kernel_shape.to_vec(),
            Op::ConvWeightGrad(input.clone(), upstream.clone()),
        ))
    }

    /// 2×2 average pooling, stride 2, over the last two axes of N×C×H×W.
    pub fn avg_pool2d(&self) -> Result<Tensor<T>> {
        let [n, c, h, w] = *self.shape() else {
            return Err(dim_err(format!("avg_pool2d: expected N×C×H×W, got {:?}", self.shape())));
        };
        if h < 2 || w < 2 {
            return Err(dim_err(format!("avg_pool2d: plane {h}×{w} is smaller than 2×2")));
        }
        let data = kernels::avg_pool2(self.data(), n * c, h, w);
        Ok(record(data, vec![n, c, h / 2, w / 2], Op::AvgPool(self.clone())))
    }

    fn avg_pool2d_adjoint(&self, full_shape: &[usize]) -> Tensor<T> {
        let (n, c, h, w) = (full_shape[0], full_shape[1], full_shape[2], full_shape[3]);
        let data = kernels::avg_pool2_adjoint(self.data(), n * c, h, w);
        record(data, full_shape.to_vec(), Op::AvgPoolAdjoint(self.clone()))
    }

    /// Selects entries along the first axis (repeats allowed).
    pub fn gather_rows(&self, idx: &[usize]) -> Result<Tensor<T>> {
        let rows = *self
            .shape()
            .first()
            .ok_or_else(|| dim_err("gather_rows on a scalar".into()))?;
        if let Some(&bad) = idx.iter().find(|&&i| i >= rows) {
            return Err(dim_err(format!("gather_rows: index {bad} out of {rows} rows")));
        }
        let row = self.numel() / rows.max(1);
        let mut shape = self.shape().to_vec();
        shape[0] = idx.len();
        let data = kernels::gather_rows(self.data(), row, idx);
        Ok(record(data, shape, Op::GatherRows(self.clone(), Rc::from(idx))))
    }

    fn scatter_rows(&self, idx: Rc<[usize]>, target_shape: &[usize]) -> Tensor<T> {
        let rows = target_shape[0];
        let row = numel(&target_shape[1..]);
        let data = kernels::scatter_rows(self.data(), row, &idx, rows);
        record(data, target_shape.to_vec(), Op::ScatterRows(self.clone(), idx))
    }

    /// Applies a fixed resampling plan to an N×C×H×W batch.
    pub fn resample(&self, plan: &Rc<ResamplePlan<T>>) -> Result<Tensor<T>> {
        self.resample_impl(plan, false)
    }

    fn resample_impl(&self, plan: &Rc<ResamplePlan<T>>, transposed: bool) -> Result<Tensor<T>> {
        let [n, c, h, w] = *self.shape() else {
            return Err(dim_err(format!("resample: expected N×C×H×W, got {:?}", self.shape())));
        };
        if h != plan.height() || w != plan.width() || n != plan.items() {
            return Err(dim_err(format!(
                "resample: plan is for {} items of {}×{}, batch is {n}×{c}×{h}×{w}",
                plan.items(),
                plan.height(),
                plan.width()
            )));
        }
        let data = plan.apply(self.data(), c, transposed);
        Ok(record(
            data,
            self.shape().to_vec(),
            Op::Resample(self.clone(), plan.clone(), transposed),
        ))
    }

    /// Squared Euclidean distance between every row of `self` ([n, d]) and
    /// every row of `other` ([m, d]).
    pub fn pairwise_sq_dist(&self, other: &Tensor<T>) -> Result<Tensor<T>> {
        let (n, d) = matrix_dims(self, "pairwise_sq_dist")?;
        let (m, d2) = matrix_dims(other, "pairwise_sq_dist")?;
        if d != d2 {
            return Err(dim_err(format!("pairwise_sq_dist: row lengths {d} and {d2} differ")));
        }
        let data = kernels::pairwise_sq_dist(self.data(), other.data(), n, m, d);
        Ok(record(
            data,
            vec![n, m],
            Op::PairwiseSqDist(self.clone(), other.clone()),
        ))
    }

    /// Flattens and concatenates tensors into one vector.
    pub fn concat(parts: &[Tensor<T>]) -> Tensor<T> {
        let total = parts.iter().map(Tensor::numel).sum();
        let mut data = Vec::with_capacity(total);
        for p in parts {
            data.extend_from_slice(p.data());
        }
        record(data, vec![total], Op::Concat(parts.to_vec()))
    }

    /// `len` consecutive elements of the flattened tensor starting at `offset`.
    pub fn slice_flat(&self, offset: usize, len: usize) -> Result<Tensor<T>> {
        if offset + len > self.numel() {
            return Err(dim_err(format!(
                "slice {offset}..{} exceeds {} elements",
                offset + len,
                self.numel()
            )));
        }
        Ok(record(
            self.data()[offset..offset + len].to_vec(),
            vec![len],
            Op::Slice(self.clone(), offset),
        ))
    }

    fn embed_flat(&self, offset: usize, total: usize) -> Tensor<T> {
        let mut data = vec![T::zero(); total];
        data[offset..offset + self.numel()].copy_from_slice(self.data());
        record(data, vec![total], Op::Embed(self.clone(), offset))
    }
}

fn opt<T: Element>(needed: bool, f: impl FnOnce() -> Result<Tensor<T>>) -> Result<Option<Tensor<T>>> {
    if needed {
        f().map(Some)
    } else {
        Ok(None)
    }
}

/// Gradient contributions of `out`'s primitive to each of its inputs, given
/// the upstream adjoint `g`. `needed[k]` says whether input `k` wants one.
/// Every rule is written with tensor ops so that it is recorded when grad
/// mode is on.
pub(crate) fn backward<T: Element>(out: &Tensor<T>, g: &Tensor<T>, needed: &[bool]) -> Result<Vec<Option<Tensor<T>>>> {
    use Op::*;
    let two = T::lit(2.0);
    let n0 = needed.first().copied().unwrap_or(false);
    let n1 = needed.get(1).copied().unwrap_or(false);
    Ok(match &out.0.op {
        Leaf => Vec::new(),
        Add(_, _) => vec![opt(n0, || Ok(g.clone()))?, opt(n1, || Ok(g.clone()))?],
        Sub(_, _) => vec![opt(n0, || Ok(g.clone()))?, opt(n1, || Ok(g.neg()))?],
        Mul(a, b) => vec![opt(n0, || g.mul(b))?, opt(n1, || g.mul(a))?],
        Div(_, b) => {
            let ga = g.div(b)?;
            let gb = opt(n1, || Ok(ga.mul(out)?.neg()))?;
            vec![n0.then_some(ga), gb]
        }
        Neg(_) => vec![Some(g.neg())],
        Scale(_, c) => vec![Some(g.scale(*c))],
        DivConst(_, c) => vec![Some(g.div_scalar(*c))],
        AddConst(_, _) => vec![Some(g.clone())],
        MulScalar(a, s) => vec![
            opt(n0, || g.mul_scalar(s))?,
            opt(n1, || g.mul(a)?.sum().reshape(s.shape()))?,
        ],
        Exp(_) => vec![Some(g.mul(out)?)],
        Log(a) => vec![Some(g.div(a)?)],
        Powf(a, p) => vec![Some(g.mul(&a.powf(*p - T::one()).scale(*p))?)],
        Relu(a) => {
            let mask = a
                .data()
                .iter()
                .map(|&x| if x > T::zero() { T::one() } else { T::zero() })
                .collect();
            vec![Some(g.mul(&Tensor::new(mask, a.shape())?)?)]
        }
        Sum(a) => vec![Some(g.expand(a.shape())?)],
        Expand(a) => vec![Some(g.sum().reshape(a.shape())?)],
        Reshape(a) => vec![Some(g.reshape(a.shape())?)],
        MatMul(a, b) => vec![
            opt(n0, || g.matmul(&b.transpose()?))?,
            opt(n1, || a.transpose()?.matmul(g))?,
        ],
        Transpose(_) => vec![Some(g.transpose()?)],
        SumRows(a) => vec![Some(g.broadcast_rows(a.shape()[0])?)],
        BroadcastRows(_) => vec![Some(g.sum_rows()?)],
        SumCols(a) => vec![Some(g.broadcast_cols(a.shape()[1])?)],
        BroadcastCols(_) => vec![Some(g.sum_cols()?)],
        Conv(x, k) => vec![
            opt(n0, || Tensor::conv_input_grad(g, k, x.shape()))?,
            opt(n1, || Tensor::conv_weight_grad(x, g, k.shape()))?,
        ],
        ConvInputGrad(up, k) => vec![
            opt(n0, || g.conv2d(k))?,
            opt(n1, || Tensor::conv_weight_grad(g, up, k.shape()))?,
        ],
        ConvWeightGrad(x, up) => vec![
            opt(n0, || Tensor::conv_input_grad(up, g, x.shape()))?,
            opt(n1, || x.conv2d(g))?,
        ],
        AvgPool(a) => vec![Some(g.avg_pool2d_adjoint(a.shape()))],
        AvgPoolAdjoint(_) => vec![Some(g.avg_pool2d()?)],
        GatherRows(a, idx) => vec![Some(g.scatter_rows(idx.clone(), a.shape()))],
        ScatterRows(_, idx) => vec![Some(g.gather_rows(idx)?)],
        Resample(_, plan, transposed) => vec![Some(g.resample_impl(plan, !transposed)?)],
        PairwiseSqDist(x, y) => {
            let d = x.shape()[1];
            vec![
                opt(n0, || {
                    Ok(g.sum_cols()?.broadcast_cols(d)?.mul(x)?.sub(&g.matmul(y)?)?.scale(two))
                })?,
                opt(n1, || {
                    Ok(g.sum_rows()?
                        .broadcast_cols(d)?
                        .mul(y)?
                        .sub(&g.transpose()?.matmul(x)?)?
                        .scale(two))
                })?,
            ]
        }
        Concat(parts) => {
            let mut offset = 0;
            let mut grads = Vec::with_capacity(parts.len());
            for (k, p) in parts.iter().enumerate() {
                let want = needed.get(k).copied().unwrap_or(false);
                grads.push(opt(want, || g.slice_flat(offset, p.numel())?.reshape(p.shape()))?);
                offset += p.numel();
            }
            grads
        }
        Slice(a, offset) => vec![Some(g.embed_flat(*offset, a.numel()).reshape(a.shape())?)],
        Embed(a, offset) => vec![Some(g.slice_flat(*offset, a.numel())?)],
    })
}
