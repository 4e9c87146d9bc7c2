//! Network building blocks composed from the graph primitives. Because they
//! are compositions, their backward passes are recorded like any other and
//! support second-order differentiation.

use super::{Element, Tensor};
use crate::{Error, Result};

fn nchw<T: Element>(x: &Tensor<T>, what: &str) -> Result<[usize; 4]> {
    match *x.shape() {
        [n, c, h, w] => Ok([n, c, h, w]),
        _ => Err(Error::Dimension(format!(
            "{what}: expected N×C×H×W, got {:?}",
            x.shape()
        ))),
    }
}

/// Broadcasts a per-channel vector `[C]` to an `[N*C, plane]` matrix.
fn per_channel<T: Element>(v: &Tensor<T>, n: usize, c: usize, plane: usize) -> Result<Tensor<T>> {
    v.broadcast_rows(n)?.reshape(&[n * c])?.broadcast_cols(plane)
}

/// One-hot rows for `labels`; errors on labels `>= classes`.
pub fn one_hot<T: Element>(labels: &[usize], classes: usize) -> Result<Tensor<T>> {
    let mut data = vec![T::zero(); labels.len() * classes];
    for (i, &l) in labels.iter().enumerate() {
        if l >= classes {
            return Err(Error::Label { label: l, classes });
        }
        data[i * classes + l] = T::one();
    }
    Tensor::new(data, &[labels.len(), classes])
}

impl<T: Element> Tensor<T> {
    /// 3×3 "same" convolution followed by a per-output-channel bias.
    pub fn conv2d_bias(&self, kernel: &Tensor<T>, bias: &Tensor<T>) -> Result<Tensor<T>> {
        let y = self.conv2d(kernel)?;
        let [n, o, h, w] = nchw(&y, "conv2d_bias")?;
        if bias.shape() != [o] {
            return Err(Error::Dimension(format!(
                "conv2d_bias: bias shape {:?}, expected [{o}]",
                bias.shape()
            )));
        }
        let b = per_channel(bias, n, o, h * w)?;
        y.reshape(&[n * o, h * w])?.add(&b)?.reshape(&[n, o, h, w])
    }

    /// `x · wᵀ + b` with `w` laid out as `[out, in]`.
    pub fn linear(&self, weight: &Tensor<T>, bias: &Tensor<T>) -> Result<Tensor<T>> {
        let y = self.matmul(&weight.transpose()?)?;
        let n = y.shape()[0];
        y.add(&bias.broadcast_rows(n)?)
    }

    /// Normalizes each (sample, channel) plane to zero mean and unit variance
    /// (biased variance, `eps` added before the square root).
    pub fn instance_norm(&self, eps: T) -> Result<Tensor<T>> {
        let [n, c, h, w] = nchw(self, "instance_norm")?;
        let plane = h * w;
        if plane < 2 {
            return Err(Error::Dimension(format!(
                "instance_norm: plane {h}×{w} has fewer than 2 pixels"
            )));
        }
        let count = T::from_usize(plane).expect("plane size");
        let x = self.reshape(&[n * c, plane])?;
        let mean = x.sum_cols()?.div_scalar(count);
        let centered = x.sub(&mean.broadcast_cols(plane)?)?;
        let var = centered.square().sum_cols()?.div_scalar(count);
        let inv_std = var.add_scalar(eps).powf(T::lit(-0.5));
        centered.mul(&inv_std.broadcast_cols(plane)?)?.reshape(&[n, c, h, w])
    }

    /// Instance norm with a learnable per-channel scale and shift.
    pub fn instance_norm_affine(&self, gamma: &Tensor<T>, beta: &Tensor<T>, eps: T) -> Result<Tensor<T>> {
        let [n, c, h, w] = nchw(self, "instance_norm_affine")?;
        if gamma.shape() != [c] || beta.shape() != [c] {
            return Err(Error::Dimension(format!(
                "instance_norm_affine: affine parameters must be [{c}], got {:?} and {:?}",
                gamma.shape(),
                beta.shape()
            )));
        }
        let plane = h * w;
        let y = self.instance_norm(eps)?.reshape(&[n * c, plane])?;
        y.mul(&per_channel(gamma, n, c, plane)?)?
            .add(&per_channel(beta, n, c, plane)?)?
            .reshape(&[n, c, h, w])
    }

    /// Row-wise log-softmax of an `[N, C]` matrix.
    pub fn log_softmax(&self) -> Result<Tensor<T>> {
        let [n, c] = *self.shape() else {
            return Err(Error::Dimension(format!(
                "log_softmax: expected N×C, got {:?}",
                self.shape()
            )));
        };
        // The row max is a constant shift; log-softmax is invariant to it.
        let maxes: Vec<T> = self
            .data()
            .chunks(c)
            .map(|row| row.iter().copied().fold(T::neg_infinity(), T::max))
            .collect();
        let shift = Tensor::new(maxes, &[n])?.broadcast_cols(c)?;
        let z = self.sub(&shift)?;
        let lse = z.exp().sum_cols()?.ln();
        z.sub(&lse.broadcast_cols(c)?)
    }

    /// Mean over the batch of `−log softmax(logits)[label]`.
    pub fn cross_entropy(&self, labels: &[usize]) -> Result<Tensor<T>> {
        let [n, c] = *self.shape() else {
            return Err(Error::Dimension(format!(
                "cross_entropy: expected N×C logits, got {:?}",
                self.shape()
            )));
        };
        if labels.len() != n {
            return Err(Error::Dimension(format!(
                "cross_entropy: {} labels for {n} rows",
                labels.len()
            )));
        }
        let targets = one_hot::<T>(labels, c)?;
        let picked = self.log_softmax()?.mul(&targets)?.sum();
        Ok(picked.div_scalar(T::from_usize(n).expect("batch size")).neg())
    }
}
