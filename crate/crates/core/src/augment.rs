//! Differentiable image augmentation.
//!
//! Every transform is linear in the pixels for a fixed draw of its random
//! parameters: geometric ones are bilinear resampling plans, brightness is a
//! constant shift, contrast a per-image affine map around the image mean and
//! cutout a constant mask. Gradients therefore reach the synthetic images
//! through whatever transform was drawn.

use std::rc::Rc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::tensor::{Element, ResamplePlan, Tensor};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Transform {
    Flip,
    Translate,
    Scale,
    Rotate,
    Brightness,
    Contrast,
    Cutout,
}

/// How the enabled transforms are combined on each call.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AugmentMode {
    /// One transform, drawn uniformly from the enabled list.
    Single,
    /// Every enabled transform, in list order.
    All,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AugmentPolicy {
    pub transforms: Vec<Transform>,
    pub mode: AugmentMode,
    /// Draw one set of transform parameters for the whole batch.
    pub shared: bool,
    pub flip_prob: f64,
    /// Maximum shift as a fraction of the image extent.
    pub translate_frac: f64,
    /// Zoom factor range `[lo, hi]`, sampled per axis.
    pub scale_range: [f64; 2],
    /// Maximum rotation in degrees, either direction.
    pub rotate_deg: f64,
    /// Maximum additive brightness shift, either direction.
    pub brightness: f64,
    /// Contrast factor range `[lo, hi]`.
    pub contrast_range: [f64; 2],
    /// Side of the cut-out square as a fraction of the image extent.
    pub cutout_frac: f64,
}

impl Default for AugmentPolicy {
    fn default() -> Self {
        Self {
            transforms: vec![
                Transform::Flip,
                Transform::Translate,
                Transform::Scale,
                Transform::Rotate,
                Transform::Brightness,
                Transform::Cutout,
            ],
            mode: AugmentMode::Single,
            shared: true,
            flip_prob: 0.5,
            translate_frac: 0.25,
            scale_range: [0.8, 1.2],
            rotate_deg: 15.0,
            brightness: 0.3,
            contrast_range: [0.5, 1.5],
            cutout_frac: 0.25,
        }
    }
}

impl AugmentPolicy {
    /// The identity policy.
    pub fn none() -> Self {
        Self {
            transforms: Vec::new(),
            ..Self::default()
        }
    }

    pub fn only(transforms: &[Transform]) -> Self {
        Self {
            transforms: transforms.to_vec(),
            mode: AugmentMode::All,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Policy(msg));
        if !(0.0..=1.0).contains(&self.flip_prob) {
            return bad(format!("flip_prob {} outside [0, 1]", self.flip_prob));
        }
        if !(0.0..=0.5).contains(&self.translate_frac) {
            return bad(format!("translate_frac {} outside [0, 0.5]", self.translate_frac));
        }
        let [lo, hi] = self.scale_range;
        if !(lo > 0.0 && lo <= hi && hi.is_finite()) {
            return bad(format!("scale_range {:?} must satisfy 0 < lo <= hi", self.scale_range));
        }
        if !(0.0..=180.0).contains(&self.rotate_deg) {
            return bad(format!("rotate_deg {} outside [0, 180]", self.rotate_deg));
        }
        if !(self.brightness >= 0.0 && self.brightness.is_finite()) {
            return bad(format!(
                "brightness {} must be a finite non-negative shift",
                self.brightness
            ));
        }
        let [lo, hi] = self.contrast_range;
        if !(lo > 0.0 && lo <= hi && hi.is_finite()) {
            return bad(format!(
                "contrast_range {:?} must satisfy 0 < lo <= hi",
                self.contrast_range
            ));
        }
        if !(0.0..=1.0).contains(&self.cutout_frac) {
            return bad(format!("cutout_frac {} outside [0, 1]", self.cutout_frac));
        }
        Ok(())
    }
}

/// Per-item draws, or a single shared draw repeated for every item.
fn draws<R: Rng + ?Sized, V: Clone>(n: usize, shared: bool, rng: &mut R, mut f: impl FnMut(&mut R) -> V) -> Vec<V> {
    if shared {
        vec![f(rng); n]
    } else {
        (0..n).map(|_| f(rng)).collect()
    }
}

fn uniform<R: Rng + ?Sized>(rng: &mut R, lo: f64, hi: f64) -> f64 {
    if hi > lo {
        rng.random_range(lo..hi)
    } else {
        lo
    }
}

/// Inverse map from output pixel offsets (relative to the image center) to
/// source offsets.
#[derive(Clone, Copy)]
struct Affine {
    a: f64,
    b: f64,
    c: f64,
    d: f64,
    tx: f64,
    ty: f64,
}

impl Affine {
    fn source(&self, u: f64, v: f64) -> (f64, f64) {
        (self.a * u + self.b * v + self.tx, self.c * u + self.d * v + self.ty)
    }
}

fn bilinear_map<T: Element>(h: usize, w: usize, inv: Affine) -> Vec<[(u32, T); 4]> {
    let cy = (h as f64 - 1.0) / 2.0;
    let cx = (w as f64 - 1.0) / 2.0;
    let mut map = Vec::with_capacity(h * w);
    for i in 0..h {
        for j in 0..w {
            let (su, sv) = inv.source(j as f64 - cx, i as f64 - cy);
            let (x, y) = (su + cx, sv + cy);
            let (x0, y0) = (x.floor(), y.floor());
            let (fx, fy) = (x - x0, y - y0);
            let mut taps = [(0u32, T::zero()); 4];
            let corners = [
                (y0, x0, (1.0 - fy) * (1.0 - fx)),
                (y0, x0 + 1.0, (1.0 - fy) * fx),
                (y0 + 1.0, x0, fy * (1.0 - fx)),
                (y0 + 1.0, x0 + 1.0, fy * fx),
            ];
            for (k, &(yy, xx, wt)) in corners.iter().enumerate() {
                if yy >= 0.0 && xx >= 0.0 && (yy as usize) < h && (xx as usize) < w && wt != 0.0 {
                    taps[k] = ((yy as usize * w + xx as usize) as u32, T::lit(wt));
                }
            }
            map.push(taps);
        }
    }
    map
}

fn flip_map<T: Element>(h: usize, w: usize, flip: bool) -> Vec<[(u32, T); 4]> {
    let zero = (0u32, T::zero());
    (0..h * w)
        .map(|p| {
            let (i, j) = (p / w, p % w);
            let src = if flip { i * w + (w - 1 - j) } else { p };
            [(src as u32, T::one()), zero, zero, zero]
        })
        .collect()
}

fn warp<T: Element>(x: &Tensor<T>, maps: Vec<Vec<[(u32, T); 4]>>, h: usize, w: usize) -> Result<Tensor<T>> {
    let n = maps.len();
    let plan = ResamplePlan::new(h, w, maps, (0..n).collect())?;
    x.resample(&Rc::new(plan))
}

fn apply_one<T: Element, R: Rng + ?Sized>(
    policy: &AugmentPolicy,
    t: Transform,
    x: &Tensor<T>,
    rng: &mut R,
) -> Result<Tensor<T>> {
    let [n, c, h, w] = *x.shape() else {
        unreachable!("checked by apply")
    };
    let shared = policy.shared;
    match t {
        Transform::Flip => {
            let flips = draws(n, shared, rng, |r| r.random_bool(policy.flip_prob));
            warp(x, flips.into_iter().map(|f| flip_map(h, w, f)).collect(), h, w)
        }
        Transform::Translate => {
            let (mx, my) = (policy.translate_frac * w as f64, policy.translate_frac * h as f64);
            let shifts = draws(n, shared, rng, |r| (uniform(r, -mx, mx), uniform(r, -my, my)));
            let maps = shifts
                .into_iter()
                .map(|(dx, dy)| {
                    bilinear_map(
                        h,
                        w,
                        Affine {
                            a: 1.0,
                            b: 0.0,
                            c: 0.0,
                            d: 1.0,
                            tx: -dx,
                            ty: -dy,
                        },
                    )
                })
                .collect();
            warp(x, maps, h, w)
        }
        Transform::Scale => {
            let [lo, hi] = policy.scale_range;
            let factors = draws(n, shared, rng, |r| (uniform(r, lo, hi), uniform(r, lo, hi)));
            let maps = factors
                .into_iter()
                .map(|(sx, sy)| {
                    bilinear_map(
                        h,
                        w,
                        Affine {
                            a: 1.0 / sx,
                            b: 0.0,
                            c: 0.0,
                            d: 1.0 / sy,
                            tx: 0.0,
                            ty: 0.0,
                        },
                    )
                })
                .collect();
            warp(x, maps, h, w)
        }
        Transform::Rotate => {
            let max = policy.rotate_deg.to_radians();
            let angles = draws(n, shared, rng, |r| uniform(r, -max, max));
            let maps = angles
                .into_iter()
                .map(|theta| {
                    let (s, co) = theta.sin_cos();
                    // inverse rotation
                    bilinear_map(
                        h,
                        w,
                        Affine {
                            a: co,
                            b: s,
                            c: -s,
                            d: co,
                            tx: 0.0,
                            ty: 0.0,
                        },
                    )
                })
                .collect();
            warp(x, maps, h, w)
        }
        Transform::Brightness => {
            let b = policy.brightness;
            let shifts = draws(n, shared, rng, |r| uniform(r, -b, b));
            let plane = c * h * w;
            let data = shifts
                .iter()
                .flat_map(|&s| std::iter::repeat_n(T::lit(s), plane))
                .collect();
            x.add(&Tensor::new(data, x.shape())?)
        }
        Transform::Contrast => {
            let [lo, hi] = policy.contrast_range;
            let factors = draws(n, shared, rng, |r| uniform(r, lo, hi));
            let d = c * h * w;
            let flat = x.reshape(&[n, d])?;
            let mean = flat
                .sum_cols()?
                .div_scalar(T::from_usize(d).expect("image size"))
                .broadcast_cols(d)?;
            let k = Tensor::new(factors.iter().map(|&f| T::lit(f)).collect(), &[n])?.broadcast_cols(d)?;
            flat.sub(&mean)?.mul(&k)?.add(&mean)?.reshape(x.shape())
        }
        Transform::Cutout => {
            let (ch, cw) = (
                ((policy.cutout_frac * h as f64).round() as usize).min(h),
                ((policy.cutout_frac * w as f64).round() as usize).min(w),
            );
            let centers = draws(n, shared, rng, |r| (r.random_range(0..h), r.random_range(0..w)));
            let mut mask = vec![T::one(); n * c * h * w];
            for (item, &(ci, cj)) in centers.iter().enumerate() {
                let (i0, j0) = (ci.saturating_sub(ch / 2), cj.saturating_sub(cw / 2));
                for ch_idx in 0..c {
                    let base = (item * c + ch_idx) * h * w;
                    for i in i0..(i0 + ch).min(h) {
                        for j in j0..(j0 + cw).min(w) {
                            mask[base + i * w + j] = T::zero();
                        }
                    }
                }
            }
            x.mul(&Tensor::new(mask, x.shape())?)
        }
    }
}

/// Applies the policy to an N×C×H×W batch. The same `rng` state always
/// produces the same transform; an empty policy returns the input unchanged.
pub fn apply<T: Element, R: Rng + ?Sized>(policy: &AugmentPolicy, batch: &Tensor<T>, rng: &mut R) -> Result<Tensor<T>> {
    let [_, _, h, w] = *batch.shape() else {
        return Err(Error::Dimension(format!(
            "augment: expected N×C×H×W, got {:?}",
            batch.shape()
        )));
    };
    policy.validate()?;
    if policy.transforms.is_empty() {
        return Ok(batch.clone());
    }
    if h < 2 || w < 2 {
        return Err(Error::Dimension(format!("augment: spatial size {h}×{w} is below 2×2")));
    }
    match policy.mode {
        AugmentMode::Single => {
            let t = policy.transforms[rng.random_range(0..policy.transforms.len())];
            apply_one(policy, t, batch, rng)
        }
        AugmentMode::All => {
            let mut x = batch.clone();
            for &t in &policy.transforms {
                x = apply_one(policy, t, &x, rng)?;
            }
            Ok(x)
        }
    }
}
