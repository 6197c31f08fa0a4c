//! Forward and backward kernels shared by the autodiff graph and the
//! standalone layer functions.

use super::tensor::{Real, Tensor};
use crate::error::{OqatError, Result};

/// Geometry of a grouped 2-D convolution.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeometry {
    pub batch: usize,
    pub in_channels: usize,
    pub out_channels: usize,
    pub groups: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    pub in_h: usize,
    pub in_w: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl ConvGeometry {
    pub fn infer(
        input: &[usize],
        weight: &[usize],
        stride: usize,
        padding: usize,
        groups: usize,
    ) -> Result<Self> {
        if input.len() != 4 || weight.len() != 4 {
            return Err(OqatError::Shape(format!(
                "conv2d expects NCHW input and OIHW weight, got input {:?} weight {:?}",
                input, weight
            )));
        }
        let (n, c, h, w) = (input[0], input[1], input[2], input[3]);
        let (o, i, kh, kw) = (weight[0], weight[1], weight[2], weight[3]);
        if groups == 0 || stride == 0 {
            return Err(OqatError::Shape("conv2d stride and groups must be positive".into()));
        }
        if kh != kw {
            return Err(OqatError::Shape(format!("conv2d needs a square kernel, got {}x{}", kh, kw)));
        }
        if c % groups != 0 || o % groups != 0 || i * groups != c {
            return Err(OqatError::Shape(format!(
                "conv2d channel mismatch: input has {} channels, weight {:?} with {} groups",
                c, weight, groups
            )));
        }
        if h + 2 * padding < kh || w + 2 * padding < kw {
            return Err(OqatError::Shape(format!(
                "conv2d kernel {} larger than padded input {}x{} (padding {})",
                kh, h, w, padding
            )));
        }
        Ok(Self {
            batch: n,
            in_channels: c,
            out_channels: o,
            groups,
            kernel: kh,
            stride,
            padding,
            in_h: h,
            in_w: w,
            out_h: (h + 2 * padding - kh) / stride + 1,
            out_w: (w + 2 * padding - kw) / stride + 1,
        })
    }

    fn out_per_group(&self) -> usize {
        self.out_channels / self.groups
    }

    fn in_per_group(&self) -> usize {
        self.in_channels / self.groups
    }

    /// Valid output-column range `[lo, hi)` for kernel column `kx`.
    fn col_range(&self, kx: usize) -> (usize, usize) {
        let s = self.stride as isize;
        let p = self.padding as isize;
        let k = kx as isize;
        let lo = ceil_div((p - k).max(0), s);
        let hi_incl = (self.in_w as isize - 1 + p - k).div_euclid(s);
        let hi = (hi_incl + 1).clamp(0, self.out_w as isize);
        (lo.min(self.out_w as isize) as usize, hi.max(lo.min(self.out_w as isize)) as usize)
    }

    fn is_pointwise(&self) -> bool {
        self.kernel == 1 && self.stride == 1 && self.padding == 0
    }
}

fn ceil_div(a: isize, b: isize) -> isize {
    (a + b - 1).div_euclid(b)
}

/// Cross-correlation of NCHW input with OIHW weight.
pub fn conv2d<T: Real>(input: &Tensor<T>, weight: &Tensor<T>, stride: usize, padding: usize, groups: usize) -> Result<Tensor<T>> {
    let g = ConvGeometry::infer(input.shape(), weight.shape(), stride, padding, groups)?;
    let mut out = vec![T::zero(); g.batch * g.out_channels * g.out_h * g.out_w];
    conv2d_raw(&g, input.data(), weight.data(), &mut out);
    Tensor::new(vec![g.batch, g.out_channels, g.out_h, g.out_w], out)
}

pub(crate) fn conv2d_raw<T: Real>(g: &ConvGeometry, input: &[T], weight: &[T], out: &mut [T]) {
    let (ih, iw, oh, ow, k) = (g.in_h, g.in_w, g.out_h, g.out_w, g.kernel);
    let in_plane = ih * iw;
    let out_plane = oh * ow;
    let opg = g.out_per_group();
    let ipg = g.in_per_group();
    let col_ranges: Vec<(usize, usize)> = (0..k).map(|kx| g.col_range(kx)).collect();
    for n in 0..g.batch {
        for oc in 0..g.out_channels {
            let grp = oc / opg;
            let o_base = (n * g.out_channels + oc) * out_plane;
            let out_p = &mut out[o_base..o_base + out_plane];
            for icg in 0..ipg {
                let ic = grp * ipg + icg;
                let in_p = &input[(n * g.in_channels + ic) * in_plane..][..in_plane];
                let w_base = (oc * ipg + icg) * k * k;
                if g.is_pointwise() {
                    let wv = weight[w_base];
                    for (o, &x) in out_p.iter_mut().zip(in_p) {
                        *o = *o + wv * x;
                    }
                    continue;
                }
                for ky in 0..k {
                    for kx in 0..k {
                        let wv = weight[w_base + ky * k + kx];
                        let (lo, hi) = col_ranges[kx];
                        if lo >= hi {
                            continue;
                        }
                        for oy in 0..oh {
                            let iy = (oy * g.stride + ky) as isize - g.padding as isize;
                            if iy < 0 || iy >= ih as isize {
                                continue;
                            }
                            let in_row = &in_p[iy as usize * iw..(iy as usize + 1) * iw];
                            let out_row = &mut out_p[oy * ow..(oy + 1) * ow];
                            let ix0 = lo * g.stride + kx - g.padding;
                            if g.stride == 1 {
                                for (o, &x) in out_row[lo..hi].iter_mut().zip(&in_row[ix0..ix0 + (hi - lo)]) {
                                    *o = *o + wv * x;
                                }
                            } else {
                                for (j, o) in out_row[lo..hi].iter_mut().enumerate() {
                                    *o = *o + wv * in_row[ix0 + j * g.stride];
                                }
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Gradients of `conv2d` with respect to input and weight.
pub(crate) fn conv2d_backward_raw<T: Real>(
    g: &ConvGeometry,
    input: &[T],
    weight: &[T],
    grad_out: &[T],
    grad_in: Option<&mut [T]>,
    grad_w: Option<&mut [T]>,
) {
    let (ih, iw, oh, ow, k) = (g.in_h, g.in_w, g.out_h, g.out_w, g.kernel);
    let in_plane = ih * iw;
    let out_plane = oh * ow;
    let opg = g.out_per_group();
    let ipg = g.in_per_group();
    let col_ranges: Vec<(usize, usize)> = (0..k).map(|kx| g.col_range(kx)).collect();

    if let Some(gin) = grad_in {
        for n in 0..g.batch {
            for oc in 0..g.out_channels {
                let grp = oc / opg;
                let go = &grad_out[(n * g.out_channels + oc) * out_plane..][..out_plane];
                for icg in 0..ipg {
                    let ic = grp * ipg + icg;
                    let gi = &mut gin[(n * g.in_channels + ic) * in_plane..][..in_plane];
                    let w_base = (oc * ipg + icg) * k * k;
                    if g.is_pointwise() {
                        let wv = weight[w_base];
                        for (d, &x) in gi.iter_mut().zip(go) {
                            *d = *d + wv * x;
                        }
                        continue;
                    }
                    for ky in 0..k {
                        for kx in 0..k {
                            let wv = weight[w_base + ky * k + kx];
                            let (lo, hi) = col_ranges[kx];
                            if lo >= hi {
                                continue;
                            }
                            for oy in 0..oh {
                                let iy = (oy * g.stride + ky) as isize - g.padding as isize;
                                if iy < 0 || iy >= ih as isize {
                                    continue;
                                }
                                let gi_row = &mut gi[iy as usize * iw..(iy as usize + 1) * iw];
                                let go_row = &go[oy * ow..(oy + 1) * ow];
                                let ix0 = lo * g.stride + kx - g.padding;
                                for (j, &v) in go_row[lo..hi].iter().enumerate() {
                                    let d = &mut gi_row[ix0 + j * g.stride];
                                    *d = *d + wv * v;
                                }
                            }
                        }
                    }
                }
            }
        }
    }

    if let Some(gw) = grad_w {
        for n in 0..g.batch {
            for oc in 0..g.out_channels {
                let grp = oc / opg;
                let go = &grad_out[(n * g.out_channels + oc) * out_plane..][..out_plane];
                for icg in 0..ipg {
                    let ic = grp * ipg + icg;
                    let in_p = &input[(n * g.in_channels + ic) * in_plane..][..in_plane];
                    let w_base = (oc * ipg + icg) * k * k;
                    if g.is_pointwise() {
                        let acc = go.iter().zip(in_p).fold(T::zero(), |a, (&x, &y)| a + x * y);
                        gw[w_base] = gw[w_base] + acc;
                        continue;
                    }
                    for ky in 0..k {
                        for kx in 0..k {
                            let (lo, hi) = col_ranges[kx];
                            if lo >= hi {
                                continue;
                            }
                            let mut acc = T::zero();
                            for oy in 0..oh {
                                let iy = (oy * g.stride + ky) as isize - g.padding as isize;
                                if iy < 0 || iy >= ih as isize {
                                    continue;
                                }
                                let in_row = &in_p[iy as usize * iw..(iy as usize + 1) * iw];
                                let go_row = &go[oy * ow..(oy + 1) * ow];
                                let ix0 = lo * g.stride + kx - g.padding;
                                for (j, &v) in go_row[lo..hi].iter().enumerate() {
                                    acc = acc + v * in_row[ix0 + j * g.stride];
                                }
                            }
                            let idx = w_base + ky * k + kx;
                            gw[idx] = gw[idx] + acc;
                        }
                    }
                }
            }
        }
    }
}

/// `input [N, F] x weight [O, F]^T + bias [O]`.
pub fn linear<T: Real>(input: &Tensor<T>, weight: &Tensor<T>, bias: Option<&Tensor<T>>) -> Result<Tensor<T>> {
    let (n, f, o) = linear_dims(input.shape(), weight.shape(), bias.map(|b| b.shape()))?;
    let mut out = vec![T::zero(); n * o];
    for r in 0..n {
        let x = &input.data()[r * f..(r + 1) * f];
        for c in 0..o {
            let w = &weight.data()[c * f..(c + 1) * f];
            let mut acc = x.iter().zip(w).fold(T::zero(), |a, (&p, &q)| a + p * q);
            if let Some(b) = bias {
                acc = acc + b.data()[c];
            }
            out[r * o + c] = acc;
        }
    }
    Tensor::new(vec![n, o], out)
}

pub(crate) fn linear_dims(input: &[usize], weight: &[usize], bias: Option<&[usize]>) -> Result<(usize, usize, usize)> {
    if input.len() != 2 || weight.len() != 2 || input[1] != weight[1] {
        return Err(OqatError::Shape(format!(
            "linear expects [N, F] input and [O, F] weight, got {:?} and {:?}",
            input, weight
        )));
    }
    if let Some(b) = bias {
        if b != [weight[0]] {
            return Err(OqatError::Shape(format!("linear bias {:?} does not match {} outputs", b, weight[0])));
        }
    }
    Ok((input[0], input[1], weight[0]))
}

pub fn relu<T: Real>(input: &Tensor<T>) -> Tensor<T> {
    input.map(|v| if v > T::zero() { v } else { T::zero() })
}

pub fn add<T: Real>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    if a.shape() != b.shape() {
        return Err(OqatError::Shape(format!("add: {:?} vs {:?}", a.shape(), b.shape())));
    }
    Tensor::new(a.shape().to_vec(), a.data().iter().zip(b.data()).map(|(&x, &y)| x + y).collect())
}

/// Mean over spatial dims: `[N, C, H, W] -> [N, C]`.
pub fn global_avg_pool<T: Real>(input: &Tensor<T>) -> Result<Tensor<T>> {
    if input.shape().len() != 4 {
        return Err(OqatError::Shape(format!("global_avg_pool expects NCHW, got {:?}", input.shape())));
    }
    let s = input.shape();
    let plane = s[2] * s[3];
    let inv = T::one() / T::from_usize(plane).unwrap();
    let data = input.data().chunks(plane).map(|p| p.iter().copied().sum::<T>() * inv).collect();
    Tensor::new(vec![s[0], s[1]], data)
}

/// Row-wise softmax of `[N, C]` logits.
pub fn softmax_rows<T: Real>(logits: &[T], classes: usize) -> Vec<T> {
    let mut out = Vec::with_capacity(logits.len());
    for row in logits.chunks(classes) {
        let m = row.iter().copied().fold(T::neg_infinity(), T::max);
        let exps: Vec<T> = row.iter().map(|&v| (v - m).exp()).collect();
        let z: T = exps.iter().copied().sum();
        out.extend(exps.into_iter().map(|e| e / z));
    }
    out
}

/// Mean cross-entropy of `[N, C]` logits against integer labels.
pub fn cross_entropy<T: Real>(logits: &Tensor<T>, labels: &[usize]) -> Result<T> {
    let (n, c) = ce_dims(logits.shape(), labels)?;
    let mut total = T::zero();
    for (row, &y) in logits.data().chunks(c).zip(labels) {
        let m = row.iter().copied().fold(T::neg_infinity(), T::max);
        let lse = row.iter().map(|&v| (v - m).exp()).sum::<T>().ln() + m;
        total = total + (lse - row[y]);
    }
    Ok(total / T::from_usize(n).unwrap())
}

pub(crate) fn ce_dims(shape: &[usize], labels: &[usize]) -> Result<(usize, usize)> {
    if shape.len() != 2 || shape[0] != labels.len() || shape[0] == 0 {
        return Err(OqatError::Shape(format!(
            "cross_entropy expects [N, C] logits with N labels, got {:?} and {} labels",
            shape,
            labels.len()
        )));
    }
    if let Some(&bad) = labels.iter().find(|&&y| y >= shape[1]) {
        return Err(OqatError::Shape(format!("label {} out of range for {} classes", bad, shape[1])));
    }
    Ok((shape[0], shape[1]))
}

/// Index of the largest logit in each row; ties go to the lowest index.
pub fn argmax_rows<T: Real>(logits: &Tensor<T>) -> Vec<usize> {
    let c = logits.shape()[1];
    logits
        .data()
        .chunks(c)
        .map(|row| {
            let mut best = 0;
            for (i, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = i;
                }
            }
            best
        })
        .collect()
}

/// Bilinear resize of NCHW images (half-pixel centers, edge clamped).
pub fn resize_bilinear<T: Real>(input: &Tensor<T>, out_h: usize, out_w: usize) -> Result<Tensor<T>> {
    let s = input.shape();
    if s.len() != 4 || out_h == 0 || out_w == 0 {
        return Err(OqatError::Shape(format!("resize expects NCHW input, got {:?}", s)));
    }
    let (n, c, h, w) = (s[0], s[1], s[2], s[3]);
    if h == out_h && w == out_w {
        return Ok(input.clone());
    }
    let taps = |out: usize, inp: usize| -> Vec<(usize, usize, T)> {
        let scale = inp as f64 / out as f64;
        (0..out)
            .map(|o| {
                let src = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
                let i0 = (src.floor() as usize).min(inp - 1);
                let i1 = (i0 + 1).min(inp - 1);
                (i0, i1, T::lit(src - i0 as f64))
            })
            .collect()
    };
    let ys = taps(out_h, h);
    let xs = taps(out_w, w);
    let mut out = Vec::with_capacity(n * c * out_h * out_w);
    for plane in input.data().chunks(h * w) {
        for &(y0, y1, fy) in &ys {
            for &(x0, x1, fx) in &xs {
                let top = plane[y0 * w + x0] * (T::one() - fx) + plane[y0 * w + x1] * fx;
                let bot = plane[y1 * w + x0] * (T::one() - fx) + plane[y1 * w + x1] * fx;
                out.push(top * (T::one() - fy) + bot * fy);
            }
        }
    }
    Tensor::new(vec![n, c, out_h, out_w], out)
}
