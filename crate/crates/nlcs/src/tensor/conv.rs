//! Spatial ops on NCHW tensors: convolution, pooling, depth/space
//! rearrangement, reflection padding and cropping.

use super::ops::{matmul_raw, transpose_raw};
use super::{Element, Tensor};
use crate::error::{Error, Result};

fn shape4<E: Element>(op: &'static str, t: &Tensor<E>) -> Result<[usize; 4]> {
    let s = t.shape();
    if s.len() != 4 {
        return Err(Error::dim(op, format!("expected 4-d tensor, got {:?}", s)));
    }
    Ok([s[0], s[1], s[2], s[3]])
}

/// Gather k×k patches into a `[C*kH*kW, H'*W']` matrix for one batch item.
fn im2col<E: Element>(
    x: &[E],
    c: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    oh: usize,
    ow: usize,
) -> Vec<E> {
    let mut cols = vec![E::zero(); c * kh * kw * oh * ow];
    let ncols = oh * ow;
    for ci in 0..c {
        for u in 0..kh {
            for v in 0..kw {
                let row = (ci * kh + u) * kw + v;
                for oy in 0..oh {
                    let iy = (oy * stride + u) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for ox in 0..ow {
                        let ix = (ox * stride + v) as isize - pad as isize;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        cols[row * ncols + oy * ow + ox] =
                            x[(ci * h + iy as usize) * w + ix as usize];
                    }
                }
            }
        }
    }
    cols
}

/// Scatter-add of a column matrix back onto the (unpadded) input plane.
fn col2im_add<E: Element>(
    cols: &[E],
    c: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    oh: usize,
    ow: usize,
    out: &mut [E],
) {
    let ncols = oh * ow;
    for ci in 0..c {
        for u in 0..kh {
            for v in 0..kw {
                let row = (ci * kh + u) * kw + v;
                for oy in 0..oh {
                    let iy = (oy * stride + u) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for ox in 0..ow {
                        let ix = (ox * stride + v) as isize - pad as isize;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        let idx = (ci * h + iy as usize) * w + ix as usize;
                        out[idx] = out[idx] + cols[row * ncols + oy * ow + ox];
                    }
                }
            }
        }
    }
}

impl<E: Element> Tensor<E> {
    /// 2-d convolution. `self` is `[N,C,H,W]`, `weight` is `[F,C,kH,kW]`,
    /// optional `bias` is `[F]`. Differentiable in input, weight and bias.
    pub fn conv2d(
        &self,
        weight: &Tensor<E>,
        bias: Option<&Tensor<E>>,
        stride: usize,
        padding: usize,
    ) -> Result<Tensor<E>> {
        let [n, c, h, w] = shape4("conv2d", self)?;
        let [f, wc, kh, kw] = shape4("conv2d", weight)?;
        if wc != c {
            return Err(Error::dim(
                "conv2d",
                format!("input has {} channels but weight expects {}", c, wc),
            ));
        }
        if stride < 1 {
            return Err(Error::Parameter("conv2d stride must be >= 1".into()));
        }
        if kh > h + 2 * padding || kw > w + 2 * padding {
            return Err(Error::dim(
                "conv2d",
                format!(
                    "kernel {}x{} exceeds padded input {}x{}",
                    kh,
                    kw,
                    h + 2 * padding,
                    w + 2 * padding
                ),
            ));
        }
        if let Some(b) = bias {
            if b.shape() != [f] {
                return Err(Error::dim(
                    "conv2d",
                    format!("bias shape {:?} does not match {} filters", b.shape(), f),
                ));
            }
        }
        let oh = (h + 2 * padding - kh) / stride + 1;
        let ow = (w + 2 * padding - kw) / stride + 1;
        let krows = c * kh * kw;
        let plane = oh * ow;

        let mut data = vec![E::zero(); n * f * plane];
        {
            let x = self.data();
            let wv = weight.data();
            for b in 0..n {
                let cols = im2col(
                    &x[b * c * h * w..(b + 1) * c * h * w],
                    c,
                    h,
                    w,
                    kh,
                    kw,
                    stride,
                    padding,
                    oh,
                    ow,
                );
                let out = matmul_raw(&wv, &cols, f, krows, plane);
                data[b * f * plane..(b + 1) * f * plane].copy_from_slice(&out);
            }
            if let Some(bt) = bias {
                let bv = bt.data();
                for b in 0..n {
                    for fi in 0..f {
                        let base = (b * f + fi) * plane;
                        for o in &mut data[base..base + plane] {
                            *o = *o + bv[fi];
                        }
                    }
                }
            }
        }

        let px = self.clone();
        let pw = weight.clone();
        let pb = bias.cloned();
        let mut parents = vec![self.clone(), weight.clone()];
        if let Some(b) = bias {
            parents.push(b.clone());
        }
        Ok(Tensor::new_node(
            vec![n, f, oh, ow],
            data,
            parents,
            Box::new(move |g| {
                let xv = px.to_vec();
                let wv = pw.to_vec();
                if px.requires_grad() {
                    // dX = col2im(W^T · dOut)
                    let wt = transpose_raw(&wv, f, krows);
                    px.accumulate_grad(|gx| {
                        for b in 0..n {
                            let dcols =
                                matmul_raw(&wt, &g[b * f * plane..(b + 1) * f * plane], krows, f, plane);
                            col2im_add(
                                &dcols,
                                c,
                                h,
                                w,
                                kh,
                                kw,
                                stride,
                                padding,
                                oh,
                                ow,
                                &mut gx[b * c * h * w..(b + 1) * c * h * w],
                            );
                        }
                    });
                }
                if pw.requires_grad() {
                    pw.accumulate_grad(|gw| {
                        for b in 0..n {
                            let cols = im2col(
                                &xv[b * c * h * w..(b + 1) * c * h * w],
                                c,
                                h,
                                w,
                                kh,
                                kw,
                                stride,
                                padding,
                                oh,
                                ow,
                            );
                            let colst = transpose_raw(&cols, krows, plane);
                            let dw = matmul_raw(
                                &g[b * f * plane..(b + 1) * f * plane],
                                &colst,
                                f,
                                plane,
                                krows,
                            );
                            for i in 0..gw.len() {
                                gw[i] = gw[i] + dw[i];
                            }
                        }
                    });
                }
                if let Some(bt) = &pb {
                    bt.accumulate_grad(|gb| {
                        for b in 0..n {
                            for fi in 0..f {
                                let base = (b * f + fi) * plane;
                                let s = g[base..base + plane]
                                    .iter()
                                    .fold(E::zero(), |acc, &v| acc + v);
                                gb[fi] = gb[fi] + s;
                            }
                        }
                    });
                }
            }),
        ))
    }

    /// Mean pooling over non-overlapping k×k windows.
    pub fn avg_pool2d(&self, k: usize) -> Result<Tensor<E>> {
        let [n, c, h, w] = shape4("avg_pool2d", self)?;
        if k == 0 {
            return Err(Error::Parameter("avg_pool2d window must be >= 1".into()));
        }
        if h % k != 0 || w % k != 0 {
            return Err(Error::dim(
                "avg_pool2d",
                format!("{}x{} not divisible by window {}", h, w, k),
            ));
        }
        let (oh, ow) = (h / k, w / k);
        let inv = E::one() / E::from_f64_lossy((k * k) as f64);
        let mut data = vec![E::zero(); n * c * oh * ow];
        {
            let x = self.data();
            for nc in 0..n * c {
                for oy in 0..oh {
                    for ox in 0..ow {
                        let mut s = E::zero();
                        for u in 0..k {
                            for v in 0..k {
                                s = s + x[(nc * h + oy * k + u) * w + ox * k + v];
                            }
                        }
                        data[(nc * oh + oy) * ow + ox] = s * inv;
                    }
                }
            }
        }
        let pa = self.clone();
        Ok(Tensor::new_node(
            vec![n, c, oh, ow],
            data,
            vec![self.clone()],
            Box::new(move |g| {
                pa.accumulate_grad(|ga| {
                    for nc in 0..n * c {
                        for oy in 0..oh {
                            for ox in 0..ow {
                                let u0 = g[(nc * oh + oy) * ow + ox] * inv;
                                for u in 0..k {
                                    for v in 0..k {
                                        let idx = (nc * h + oy * k + u) * w + ox * k + v;
                                        ga[idx] = ga[idx] + u0;
                                    }
                                }
                            }
                        }
                    }
                });
            }),
        ))
    }

    /// Depth-to-space: `[N, C*s*s, H, W]` -> `[N, C, H*s, W*s]`.
    pub fn pixel_shuffle(&self, s: usize) -> Result<Tensor<E>> {
        let [n, cin, h, w] = shape4("pixel_shuffle", self)?;
        if s == 0 || cin % (s * s) != 0 {
            return Err(Error::dim(
                "pixel_shuffle",
                format!("{} channels not divisible by {}^2", cin, s),
            ));
        }
        let c = cin / (s * s);
        let (oh, ow) = (h * s, w * s);
        let mut data = vec![E::zero(); n * c * oh * ow];
        {
            let x = self.data();
            for b in 0..n {
                for ci in 0..c {
                    for i in 0..s {
                        for j in 0..s {
                            let src_c = (ci * s + i) * s + j;
                            for y in 0..h {
                                for xw in 0..w {
                                    data[((b * c + ci) * oh + y * s + i) * ow + xw * s + j] =
                                        x[((b * cin + src_c) * h + y) * w + xw];
                                }
                            }
                        }
                    }
                }
            }
        }
        let pa = self.clone();
        Ok(Tensor::new_node(
            vec![n, c, oh, ow],
            data,
            vec![self.clone()],
            Box::new(move |g| {
                pa.accumulate_grad(|ga| {
                    for b in 0..n {
                        for ci in 0..c {
                            for i in 0..s {
                                for j in 0..s {
                                    let src_c = (ci * s + i) * s + j;
                                    for y in 0..h {
                                        for xw in 0..w {
                                            let idx = ((b * cin + src_c) * h + y) * w + xw;
                                            ga[idx] = ga[idx]
                                                + g[((b * c + ci) * oh + y * s + i) * ow
                                                    + xw * s
                                                    + j];
                                        }
                                    }
                                }
                            }
                        }
                    }
                });
            }),
        ))
    }

    /// Space-to-depth, the exact inverse of [`Tensor::pixel_shuffle`].
    pub fn space_to_depth(&self, s: usize) -> Result<Tensor<E>> {
        let [n, c, h, w] = shape4("space_to_depth", self)?;
        if s == 0 || h % s != 0 || w % s != 0 {
            return Err(Error::dim(
                "space_to_depth",
                format!("{}x{} not divisible by factor {}", h, w, s),
            ));
        }
        let (oh, ow) = (h / s, w / s);
        let cout = c * s * s;
        let mut data = vec![E::zero(); n * cout * oh * ow];
        {
            let x = self.data();
            for b in 0..n {
                for ci in 0..c {
                    for i in 0..s {
                        for j in 0..s {
                            let dst_c = (ci * s + i) * s + j;
                            for y in 0..oh {
                                for xw in 0..ow {
                                    data[((b * cout + dst_c) * oh + y) * ow + xw] =
                                        x[((b * c + ci) * h + y * s + i) * w + xw * s + j];
                                }
                            }
                        }
                    }
                }
            }
        }
        let pa = self.clone();
        Ok(Tensor::new_node(
            vec![n, cout, oh, ow],
            data,
            vec![self.clone()],
            Box::new(move |g| {
                pa.accumulate_grad(|ga| {
                    for b in 0..n {
                        for ci in 0..c {
                            for i in 0..s {
                                for j in 0..s {
                                    let dst_c = (ci * s + i) * s + j;
                                    for y in 0..oh {
                                        for xw in 0..ow {
                                            let idx =
                                                ((b * c + ci) * h + y * s + i) * w + xw * s + j;
                                            ga[idx] = ga[idx]
                                                + g[((b * cout + dst_c) * oh + y) * ow + xw];
                                        }
                                    }
                                }
                            }
                        }
                    }
                });
            }),
        ))
    }

    /// Mirror padding on the right/bottom (and optionally left/top) edges
    /// without repeating the border sample.
    pub fn reflect_pad2d(
        &self,
        left: usize,
        right: usize,
        top: usize,
        bottom: usize,
    ) -> Result<Tensor<E>> {
        let [n, c, h, w] = shape4("reflect_pad2d", self)?;
        if left >= w || right >= w || top >= h || bottom >= h {
            return Err(Error::dim(
                "reflect_pad2d",
                format!("pad ({left},{right},{top},{bottom}) too large for {h}x{w}"),
            ));
        }
        let (oh, ow) = (h + top + bottom, w + left + right);
        let reflect = |i: isize, len: usize| -> usize {
            let len = len as isize;
            let mut i = i;
            if i < 0 {
                i = -i;
            }
            if i >= len {
                i = 2 * len - 2 - i;
            }
            i as usize
        };
        let mut data = vec![E::zero(); n * c * oh * ow];
        {
            let x = self.data();
            for nc in 0..n * c {
                for oy in 0..oh {
                    let sy = reflect(oy as isize - top as isize, h);
                    for ox in 0..ow {
                        let sx = reflect(ox as isize - left as isize, w);
                        data[(nc * oh + oy) * ow + ox] = x[(nc * h + sy) * w + sx];
                    }
                }
            }
        }
        let pa = self.clone();
        Ok(Tensor::new_node(
            vec![n, c, oh, ow],
            data,
            vec![self.clone()],
            Box::new(move |g| {
                pa.accumulate_grad(|ga| {
                    for nc in 0..n * c {
                        for oy in 0..oh {
                            let sy = reflect(oy as isize - top as isize, h);
                            for ox in 0..ow {
                                let sx = reflect(ox as isize - left as isize, w);
                                let idx = (nc * h + sy) * w + sx;
                                ga[idx] = ga[idx] + g[(nc * oh + oy) * ow + ox];
                            }
                        }
                    }
                });
            }),
        ))
    }

    /// Spatial crop to `height` x `width` starting at `(top, left)`.
    pub fn crop2d(&self, top: usize, left: usize, height: usize, width: usize) -> Result<Tensor<E>> {
        let [n, c, h, w] = shape4("crop2d", self)?;
        if top + height > h || left + width > w {
            return Err(Error::dim(
                "crop2d",
                format!("crop {height}x{width}@({top},{left}) exceeds {h}x{w}"),
            ));
        }
        let mut data = vec![E::zero(); n * c * height * width];
        {
            let x = self.data();
            for nc in 0..n * c {
                for y in 0..height {
                    let src = (nc * h + top + y) * w + left;
                    let dst = (nc * height + y) * width;
                    data[dst..dst + width].copy_from_slice(&x[src..src + width]);
                }
            }
        }
        let pa = self.clone();
        Ok(Tensor::new_node(
            vec![n, c, height, width],
            data,
            vec![self.clone()],
            Box::new(move |g| {
                pa.accumulate_grad(|ga| {
                    for nc in 0..n * c {
                        for y in 0..height {
                            let src = (nc * height + y) * width;
                            let dst = (nc * h + top + y) * w + left;
                            for x in 0..width {
                                ga[dst + x] = ga[dst + x] + g[src + x];
                            }
                        }
                    }
                });
            }),
        ))
    }
}
