//! Plain numeric loops behind the graph primitives. Everything here works on
//! row-major slices and knows nothing about autograd.

use super::Element;

pub(crate) fn matmul<T: Element>(a: &[T], b: &[T], m: usize, k: usize, n: usize) -> Vec<T> {
    let mut out = vec![T::zero(); m * n];
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            let brow = &b[p * n..(p + 1) * n];
            for (o, &bv) in row.iter_mut().zip(brow) {
                *o = *o + av * bv;
            }
        }
    }
    out
}

pub(crate) fn transpose<T: Element>(a: &[T], m: usize, n: usize) -> Vec<T> {
    let mut out = vec![T::zero(); m * n];
    for i in 0..m {
        for j in 0..n {
            out[j * m + i] = a[i * n + j];
        }
    }
    out
}

/// Rows `lo..hi` of the output that read an in-bounds input row at `offset`.
fn valid_range(len: usize, offset: isize) -> (usize, usize) {
    let lo = (-offset).max(0) as usize;
    let hi = (len as isize - offset).clamp(0, len as isize) as usize;
    (lo.min(hi), hi)
}

#[derive(Clone, Copy)]
pub(crate) struct ConvDims {
    pub n: usize,
    pub c: usize,
    pub o: usize,
    pub h: usize,
    pub w: usize,
}

/// 3×3 cross-correlation with one pixel of zero padding.
pub(crate) fn conv3x3<T: Element>(x: &[T], k: &[T], d: ConvDims) -> Vec<T> {
    let plane = d.h * d.w;
    let mut out = vec![T::zero(); d.n * d.o * plane];
    for n in 0..d.n {
        for o in 0..d.o {
            let dst = &mut out[(n * d.o + o) * plane..(n * d.o + o + 1) * plane];
            for c in 0..d.c {
                let src = &x[(n * d.c + c) * plane..(n * d.c + c + 1) * plane];
                for di in 0..3 {
                    let oy = di as isize - 1;
                    let (ylo, yhi) = valid_range(d.h, oy);
                    for dj in 0..3 {
                        let ox = dj as isize - 1;
                        let (xlo, xhi) = valid_range(d.w, ox);
                        let kv = k[((o * d.c + c) * 3 + di) * 3 + dj];
                        for i in ylo..yhi {
                            let si = (i as isize + oy) as usize;
                            let drow = &mut dst[i * d.w + xlo..i * d.w + xhi];
                            let start = (si * d.w) as isize + xlo as isize + ox;
                            let srow = &src[start as usize..start as usize + (xhi - xlo)];
                            for (dv, &sv) in drow.iter_mut().zip(srow) {
                                *dv = *dv + kv * sv;
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

/// Adjoint of [`conv3x3`] with respect to its input.
pub(crate) fn conv3x3_input_grad<T: Element>(g: &[T], k: &[T], d: ConvDims) -> Vec<T> {
    let plane = d.h * d.w;
    let mut out = vec![T::zero(); d.n * d.c * plane];
    for n in 0..d.n {
        for c in 0..d.c {
            let dst = &mut out[(n * d.c + c) * plane..(n * d.c + c + 1) * plane];
            for o in 0..d.o {
                let src = &g[(n * d.o + o) * plane..(n * d.o + o + 1) * plane];
                for di in 0..3 {
                    let oy = di as isize - 1;
                    let (ylo, yhi) = valid_range(d.h, oy);
                    for dj in 0..3 {
                        let ox = dj as isize - 1;
                        let (xlo, xhi) = valid_range(d.w, ox);
                        let kv = k[((o * d.c + c) * 3 + di) * 3 + dj];
                        for i in ylo..yhi {
                            let si = (i as isize + oy) as usize;
                            let start = (si * d.w) as isize + xlo as isize + ox;
                            let drow = &mut dst[start as usize..start as usize + (xhi - xlo)];
                            let srow = &src[i * d.w + xlo..i * d.w + xhi];
                            for (dv, &sv) in drow.iter_mut().zip(srow) {
                                *dv = *dv + kv * sv;
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

/// Adjoint of [`conv3x3`] with respect to its kernel.
pub(crate) fn conv3x3_weight_grad<T: Element>(x: &[T], g: &[T], d: ConvDims) -> Vec<T> {
    let plane = d.h * d.w;
    let mut out = vec![T::zero(); d.o * d.c * 9];
    for o in 0..d.o {
        for c in 0..d.c {
            for di in 0..3 {
                let oy = di as isize - 1;
                let (ylo, yhi) = valid_range(d.h, oy);
                for dj in 0..3 {
                    let ox = dj as isize - 1;
                    let (xlo, xhi) = valid_range(d.w, ox);
                    let mut acc = T::zero();
                    for n in 0..d.n {
                        let src = &x[(n * d.c + c) * plane..(n * d.c + c + 1) * plane];
                        let gp = &g[(n * d.o + o) * plane..(n * d.o + o + 1) * plane];
                        for i in ylo..yhi {
                            let si = (i as isize + oy) as usize;
                            let start = (si * d.w) as isize + xlo as isize + ox;
                            let srow = &src[start as usize..start as usize + (xhi - xlo)];
                            let grow = &gp[i * d.w + xlo..i * d.w + xhi];
                            for (&sv, &gv) in srow.iter().zip(grow) {
                                acc = acc + sv * gv;
                            }
                        }
                    }
                    out[((o * d.c + c) * 3 + di) * 3 + dj] = acc;
                }
            }
        }
    }
    out
}

/// 2×2 average pooling with stride 2; trailing odd rows/columns are dropped.
pub(crate) fn avg_pool2<T: Element>(x: &[T], planes: usize, h: usize, w: usize) -> Vec<T> {
    let (oh, ow) = (h / 2, w / 2);
    let quarter = T::lit(0.25);
    let mut out = vec![T::zero(); planes * oh * ow];
    for p in 0..planes {
        let src = &x[p * h * w..(p + 1) * h * w];
        let dst = &mut out[p * oh * ow..(p + 1) * oh * ow];
        for i in 0..oh {
            for j in 0..ow {
                let a = src[2 * i * w + 2 * j];
                let b = src[2 * i * w + 2 * j + 1];
                let c = src[(2 * i + 1) * w + 2 * j];
                let d = src[(2 * i + 1) * w + 2 * j + 1];
                dst[i * ow + j] = (a + b + c + d) * quarter;
            }
        }
    }
    out
}

/// Adjoint of [`avg_pool2`]: spreads each value over its 2×2 block, scaled by ¼.
pub(crate) fn avg_pool2_adjoint<T: Element>(g: &[T], planes: usize, h: usize, w: usize) -> Vec<T> {
    let (oh, ow) = (h / 2, w / 2);
    let quarter = T::lit(0.25);
    let mut out = vec![T::zero(); planes * h * w];
    for p in 0..planes {
        let src = &g[p * oh * ow..(p + 1) * oh * ow];
        let dst = &mut out[p * h * w..(p + 1) * h * w];
        for i in 0..oh {
            for j in 0..ow {
                let v = src[i * ow + j] * quarter;
                dst[2 * i * w + 2 * j] = v;
                dst[2 * i * w + 2 * j + 1] = v;
                dst[(2 * i + 1) * w + 2 * j] = v;
                dst[(2 * i + 1) * w + 2 * j + 1] = v;
            }
        }
    }
    out
}

pub(crate) fn gather_rows<T: Element>(x: &[T], row: usize, idx: &[usize]) -> Vec<T> {
    let mut out = Vec::with_capacity(idx.len() * row);
    for &i in idx {
        out.extend_from_slice(&x[i * row..(i + 1) * row]);
    }
    out
}

pub(crate) fn scatter_rows<T: Element>(g: &[T], row: usize, idx: &[usize], rows: usize) -> Vec<T> {
    let mut out = vec![T::zero(); rows * row];
    for (k, &i) in idx.iter().enumerate() {
        for (o, &v) in out[i * row..(i + 1) * row].iter_mut().zip(&g[k * row..(k + 1) * row]) {
            *o = *o + v;
        }
    }
    out
}

/// `out[i, j] = Σ_k (x[i,k] − y[j,k])²`, accumulated in index order.
pub(crate) fn pairwise_sq_dist<T: Element>(x: &[T], y: &[T], n: usize, m: usize, d: usize) -> Vec<T> {
    let mut out = Vec::with_capacity(n * m);
    for i in 0..n {
        let a = &x[i * d..(i + 1) * d];
        for j in 0..m {
            let b = &y[j * d..(j + 1) * d];
            let mut acc = T::zero();
            for (&av, &bv) in a.iter().zip(b) {
                let diff = av - bv;
                acc = acc + diff * diff;
            }
            out.push(acc);
        }
    }
    out
}

/// Up to four weighted source pixels feeding one output pixel.
pub type PixelTaps<T> = [(u32, T); 4];

/// A fixed linear resampling of image planes: each output pixel is a weighted
/// sum of at most four input pixels of the same plane. Bilinear warps, flips
/// and shifts are all expressed this way, which keeps them differentiable
/// with respect to pixel values (the plan itself is a constant).
#[derive(Debug, Clone)]
pub struct ResamplePlan<T> {
    height: usize,
    width: usize,
    maps: Vec<Vec<PixelTaps<T>>>,
    item_map: Vec<usize>,
}

impl<T: Element> ResamplePlan<T> {
    /// `maps[k]` holds `height * width` taps; item `n` of the batch uses
    /// `maps[item_map[n]]`.
    pub fn new(height: usize, width: usize, maps: Vec<Vec<PixelTaps<T>>>, item_map: Vec<usize>) -> crate::Result<Self> {
        let plane = height * width;
        for (k, map) in maps.iter().enumerate() {
            if map.len() != plane {
                return Err(crate::Error::Shape(format!(
                    "resample map {k} has {} entries, expected {plane}",
                    map.len()
                )));
            }
            if map.iter().flatten().any(|&(src, _)| src as usize >= plane) {
                return Err(crate::Error::Shape(format!("resample map {k} reads outside the plane")));
            }
        }
        if let Some(&bad) = item_map.iter().find(|&&k| k >= maps.len()) {
            return Err(crate::Error::Shape(format!("item map references missing map {bad}")));
        }
        Ok(Self {
            height,
            width,
            maps,
            item_map,
        })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn items(&self) -> usize {
        self.item_map.len()
    }

    pub(crate) fn apply(&self, x: &[T], channels: usize, transposed: bool) -> Vec<T> {
        let plane = self.height * self.width;
        let mut out = vec![T::zero(); x.len()];
        for (n, &mi) in self.item_map.iter().enumerate() {
            let map = &self.maps[mi];
            for c in 0..channels {
                let base = (n * channels + c) * plane;
                let src = &x[base..base + plane];
                let dst = &mut out[base..base + plane];
                if transposed {
                    for (p, taps) in map.iter().enumerate() {
                        for &(s, wt) in taps {
                            if wt != T::zero() {
                                dst[s as usize] = dst[s as usize] + wt * src[p];
                            }
                        }
                    }
                } else {
                    for (p, taps) in map.iter().enumerate() {
                        let mut acc = T::zero();
                        for &(s, wt) in taps {
                            if wt != T::zero() {
                                acc = acc + wt * src[s as usize];
                            }
                        }
                        dst[p] = acc;
                    }
                }
            }
        }
        out
    }
}
