//! Channels-last convolution family: im2col convolution, unfold/fold,
//! pooling and resampling. All spatial tensors are `[N, (D,) H, W, C]`.

use std::rc::Rc;

use rayon::prelude::*;

use super::array::{numel, Tensor};
use super::graph::Var;
use super::ops::gemm;
use crate::error::{Error, Result};

/// Geometry of a 3-D patch extraction (depth may be 1 for 2-D).
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PatchGeom {
    pub kernel: [usize; 3],
    pub stride: [usize; 3],
    pub pad: [usize; 3],
}

impl PatchGeom {
    pub fn square2d(kernel: usize, stride: usize, pad: usize) -> Self {
        PatchGeom {
            kernel: [1, kernel, kernel],
            stride: [1, stride, stride],
            pad: [0, pad, pad],
        }
    }

    pub fn out_extent(&self, axis: usize, len: usize) -> Option<usize> {
        let padded = len + 2 * self.pad[axis];
        if padded < self.kernel[axis] || self.stride[axis] == 0 {
            return None;
        }
        Some((padded - self.kernel[axis]) / self.stride[axis] + 1)
    }

    pub fn patch_len(&self, channels: usize) -> usize {
        self.kernel.iter().product::<usize>() * channels
    }
}

/// Resolved sizes of one im2col problem.
#[derive(Clone, Copy, Debug)]
struct Cols {
    n: usize,
    inp: [usize; 3],
    out: [usize; 3],
    c: usize,
    geom: PatchGeom,
}

impl Cols {
    fn new(n: usize, inp: [usize; 3], c: usize, geom: PatchGeom, op: &'static str) -> Result<Self> {
        let mut out = [0; 3];
        for a in 0..3 {
            out[a] = geom.out_extent(a, inp[a]).ok_or_else(|| {
                Error::invalid_shape(op, format!("input {inp:?} too small for {geom:?}"))
            })?;
        }
        Ok(Cols { n, inp, out, c, geom })
    }

    fn rows_per_item(&self) -> usize {
        self.out.iter().product()
    }

    fn row_len(&self) -> usize {
        self.geom.patch_len(self.c)
    }

    fn in_per_item(&self) -> usize {
        self.inp.iter().product::<usize>() * self.c
    }

    /// Visit `(row_offset_in_item_cols, input_offset_in_item)` for every
    /// in-bounds `C`-length run of one item.
    #[inline]
    fn for_each_run(&self, mut f: impl FnMut(usize, usize)) {
        let [kd, kh, kw] = self.geom.kernel;
        let [sd, sh, sw] = self.geom.stride;
        let [pd, ph, pw] = self.geom.pad;
        let [id, ih, iw] = self.inp;
        let [od, oh, ow] = self.out;
        let c = self.c;
        let row_len = self.row_len();
        let mut row = 0;
        for z in 0..od {
            for y in 0..oh {
                for x in 0..ow {
                    let base = row * row_len;
                    let mut tap = 0;
                    for dz in 0..kd {
                        let iz = (z * sd + dz) as isize - pd as isize;
                        for dy in 0..kh {
                            let iy = (y * sh + dy) as isize - ph as isize;
                            for dx in 0..kw {
                                let ix = (x * sw + dx) as isize - pw as isize;
                                if iz >= 0
                                    && iy >= 0
                                    && ix >= 0
                                    && (iz as usize) < id
                                    && (iy as usize) < ih
                                    && (ix as usize) < iw
                                {
                                    let src = ((iz as usize * ih + iy as usize) * iw + ix as usize) * c;
                                    f(base + tap * c, src);
                                }
                                tap += 1;
                            }
                        }
                    }
                    row += 1;
                }
            }
        }
    }

    fn im2col(&self, x: &[f64]) -> Vec<f64> {
        let per_item = self.rows_per_item() * self.row_len();
        let per_in = self.in_per_item();
        let c = self.c;
        let mut cols = vec![0.0; self.n * per_item];
        cols.par_chunks_mut(per_item.max(1))
            .zip(x.par_chunks(per_in.max(1)))
            .for_each(|(dst, src)| {
                self.for_each_run(|o, i| dst[o..o + c].copy_from_slice(&src[i..i + c]));
            });
        cols
    }

    fn col2im(&self, cols: &[f64]) -> Vec<f64> {
        let per_item = self.rows_per_item() * self.row_len();
        let per_in = self.in_per_item();
        let c = self.c;
        let mut x = vec![0.0; self.n * per_in];
        x.par_chunks_mut(per_in.max(1))
            .zip(cols.par_chunks(per_item.max(1)))
            .for_each(|(dst, src)| {
                self.for_each_run(|o, i| {
                    for j in 0..c {
                        dst[i + j] += src[o + j];
                    }
                });
            });
        x
    }
}

/// Split a `[N, D, H, W, C]` or `[N, H, W, C]` shape into batch, spatial, channels.
fn spatial_dims(shape: &[usize], op: &'static str) -> Result<(usize, [usize; 3], usize)> {
    match *shape {
        [n, d, h, w, c] => Ok((n, [d, h, w], c)),
        [n, h, w, c] => Ok((n, [1, h, w], c)),
        _ => Err(Error::invalid_shape(op, format!("expected rank 4 or 5, got {shape:?}"))),
    }
}

fn out_shape(rank5: bool, n: usize, out: [usize; 3], c: usize) -> Vec<usize> {
    if rank5 {
        vec![n, out[0], out[1], out[2], c]
    } else {
        vec![n, out[1], out[2], c]
    }
}

impl<'g> Var<'g> {
    /// Zero-padded convolution. `weight` is `[kd, kh, kw, C_in, C_out]` for
    /// rank-5 input or `[kh, kw, C_in, C_out]` for rank-4 input.
    pub fn conv(self, weight: Var<'g>, bias: Option<Var<'g>>, stride: [usize; 3], pad: [usize; 3]) -> Result<Var<'g>> {
        let xv = self.value();
        let wv = weight.value();
        let (n, inp, c_in) = spatial_dims(xv.shape(), "conv")?;
        let rank5 = xv.ndim() == 5;
        let ws = wv.shape().to_vec();
        let (kernel, wc_in, c_out) = match (rank5, ws.as_slice()) {
            (true, &[kd, kh, kw, ci, co]) => ([kd, kh, kw], ci, co),
            (false, &[kh, kw, ci, co]) => ([1, kh, kw], ci, co),
            _ => return Err(Error::shape("conv", xv.shape(), &ws)),
        };
        if wc_in != c_in {
            return Err(Error::shape("conv", xv.shape(), &ws));
        }
        let geom = PatchGeom { kernel, stride, pad };
        let cols = Cols::new(n, inp, c_in, geom, "conv")?;
        let rows = n * cols.rows_per_item();
        let k = cols.row_len();
        let col_data = cols.im2col(xv.data());
        let mut out = vec![0.0; rows * c_out];
        if let Some(b) = bias {
            let bv = b.value();
            if bv.shape() != [c_out] {
                return Err(Error::shape("conv bias", bv.shape(), &[c_out]));
            }
            for row in out.chunks_mut(c_out) {
                row.copy_from_slice(bv.data());
            }
        }
        gemm(rows, k, c_out, &col_data, false, wv.data(), false, &mut out, 1.0);
        let value = Tensor::from_parts(out_shape(rank5, n, cols.out, c_out), out);

        let x_shape = xv.shape().to_vec();
        let reqs = [self.requires_grad(), weight.requires_grad(), bias.is_some_and(|b| b.requires_grad())];
        let col_data = Rc::new(col_data);
        let mut inputs = vec![self, weight];
        inputs.extend(bias);
        let has_bias = bias.is_some();
        self.graph().record("conv", &inputs, value, move |g| {
            let gd = g.data();
            let gx = reqs[0].then(|| {
                let mut dcols = vec![0.0; rows * k];
                gemm(rows, c_out, k, gd, false, wv.data(), true, &mut dcols, 0.0);
                Tensor::from_parts(x_shape.clone(), cols.col2im(&dcols))
            });
            let gw = reqs[1].then(|| {
                let mut dw = vec![0.0; k * c_out];
                gemm(k, rows, c_out, &col_data, true, gd, false, &mut dw, 0.0);
                Tensor::from_parts(ws.clone(), dw)
            });
            let mut grads = vec![gx, gw];
            if has_bias {
                grads.push(reqs[2].then(|| {
                    let mut db = vec![0.0; c_out];
                    for row in gd.chunks(c_out) {
                        for (a, b) in db.iter_mut().zip(row) {
                            *a += b;
                        }
                    }
                    Tensor::from_parts(vec![c_out], db)
                }));
            }
            grads
        })
    }

    /// 2-D convolution with square kernel, equal stride and padding.
    pub fn conv2d(self, weight: Var<'g>, bias: Option<Var<'g>>, stride: usize, pad: usize) -> Result<Var<'g>> {
        self.conv(weight, bias, [1, stride, stride], [0, pad, pad])
    }

    /// Extract zero-padded patches: `[N, H, W, C] -> [N, M, Nw, kh*kw*C]`
    /// with per-patch layout `(ky, kx, c)`.
    pub fn unfold2d(self, kernel: usize, stride: usize, pad: usize) -> Result<Var<'g>> {
        let xv = self.value();
        let shape = xv.shape().to_vec();
        let [n, h, w, c] = shape[..] else {
            return Err(Error::invalid_shape("unfold2d", format!("expected rank 4, got {shape:?}")));
        };
        let geom = PatchGeom::square2d(kernel, stride, pad);
        let cols = Cols::new(n, [1, h, w], c, geom, "unfold2d")?;
        let data = cols.im2col(xv.data());
        let value = Tensor::from_parts(vec![n, cols.out[1], cols.out[2], cols.row_len()], data);
        self.graph().record("unfold2d", &[self], value, move |g| {
            vec![Some(Tensor::from_parts(shape.clone(), cols.col2im(g.data())))]
        })
    }

    /// Overlap-add patches back onto an `[N, H, W, C]` canvas (adjoint of
    /// [`unfold2d`](Self::unfold2d)); no count normalization.
    pub fn fold2d(self, out_hw: (usize, usize), kernel: usize, stride: usize, pad: usize) -> Result<Var<'g>> {
        let xv = self.value();
        let shape = xv.shape().to_vec();
        let [n, m, nw, len] = shape[..] else {
            return Err(Error::invalid_shape("fold2d", format!("expected rank 4, got {shape:?}")));
        };
        if len % (kernel * kernel) != 0 {
            return Err(Error::invalid_shape("fold2d", format!("patch length {len} not a multiple of {kernel}x{kernel}")));
        }
        let c = len / (kernel * kernel);
        let geom = PatchGeom::square2d(kernel, stride, pad);
        let cols = Cols::new(n, [1, out_hw.0, out_hw.1], c, geom, "fold2d")?;
        if cols.out[1] != m || cols.out[2] != nw {
            return Err(Error::invalid_shape(
                "fold2d",
                format!("token grid {m}x{nw} inconsistent with canvas {out_hw:?} and geometry {geom:?}"),
            ));
        }
        let data = cols.col2im(xv.data());
        let value = Tensor::from_parts(vec![n, out_hw.0, out_hw.1, c], data);
        self.graph().record("fold2d", &[self], value, move |g| {
            vec![Some(Tensor::from_parts(shape.clone(), cols.im2col(g.data())))]
        })
    }

    /// Non-overlapping `factor x factor` mean pooling of `[N, H, W, C]`.
    pub fn avg_pool2d(self, factor: usize) -> Result<Var<'g>> {
        let xv = self.value();
        let shape = xv.shape().to_vec();
        let [n, h, w, c] = shape[..] else {
            return Err(Error::invalid_shape("avg_pool2d", format!("expected rank 4, got {shape:?}")));
        };
        if factor == 0 || h % factor != 0 || w % factor != 0 {
            return Err(Error::invalid_shape("avg_pool2d", format!("{h}x{w} not divisible by {factor}")));
        }
        let (oh, ow) = (h / factor, w / factor);
        let scale = 1.0 / (factor * factor) as f64;
        let src = xv.data();
        let mut out = vec![0.0; n * oh * ow * c];
        for b in 0..n {
            for y in 0..h {
                for x in 0..w {
                    let si = ((b * h + y) * w + x) * c;
                    let di = ((b * oh + y / factor) * ow + x / factor) * c;
                    for ch in 0..c {
                        out[di + ch] += src[si + ch] * scale;
                    }
                }
            }
        }
        let value = Tensor::from_parts(vec![n, oh, ow, c], out);
        self.graph().record("avg_pool2d", &[self], value, move |g| {
            let gd = g.data();
            let mut gx = vec![0.0; numel(&shape)];
            for b in 0..n {
                for y in 0..h {
                    for x in 0..w {
                        let si = ((b * h + y) * w + x) * c;
                        let di = ((b * oh + y / factor) * ow + x / factor) * c;
                        for ch in 0..c {
                            gx[si + ch] = gd[di + ch] * scale;
                        }
                    }
                }
            }
            vec![Some(Tensor::from_parts(shape.clone(), gx))]
        })
    }

    /// Nearest-neighbour upsampling of `[N, H, W, C]` by an integer factor.
    pub fn upsample_nearest2d(self, factor: usize) -> Result<Var<'g>> {
        let xv = self.value();
        let shape = xv.shape().to_vec();
        let [n, h, w, c] = shape[..] else {
            return Err(Error::invalid_shape("upsample_nearest2d", format!("expected rank 4, got {shape:?}")));
        };
        let (oh, ow) = (h * factor, w * factor);
        let src = xv.data();
        let mut out = vec![0.0; n * oh * ow * c];
        for b in 0..n {
            for y in 0..oh {
                for x in 0..ow {
                    let si = ((b * h + y / factor) * w + x / factor) * c;
                    let di = ((b * oh + y) * ow + x) * c;
                    out[di..di + c].copy_from_slice(&src[si..si + c]);
                }
            }
        }
        let value = Tensor::from_parts(vec![n, oh, ow, c], out);
        self.graph().record("upsample_nearest2d", &[self], value, move |g| {
            let gd = g.data();
            let mut gx = vec![0.0; numel(&shape)];
            for b in 0..n {
                for y in 0..oh {
                    for x in 0..ow {
                        let si = ((b * h + y / factor) * w + x / factor) * c;
                        let di = ((b * oh + y) * ow + x) * c;
                        for ch in 0..c {
                            gx[si + ch] += gd[di + ch];
                        }
                    }
                }
            }
            vec![Some(Tensor::from_parts(shape.clone(), gx))]
        })
    }

    /// Bilinear resize of `[N, H, W, C]` with half-pixel centres and edge
    /// clamping.
    pub fn resize_bilinear(self, out_h: usize, out_w: usize) -> Result<Var<'g>> {
        let xv = self.value();
        let shape = xv.shape().to_vec();
        let [n, h, w, c] = shape[..] else {
            return Err(Error::invalid_shape("resize_bilinear", format!("expected rank 4, got {shape:?}")));
        };
        let taps = resize_taps(h, w, out_h, out_w);
        let src = xv.data();
        let mut out = vec![0.0; n * out_h * out_w * c];
        for b in 0..n {
            for (p, t) in taps.iter().enumerate() {
                let di = (b * out_h * out_w + p) * c;
                for &(idx, wt) in t {
                    let si = (b * h * w + idx) * c;
                    for ch in 0..c {
                        out[di + ch] += wt * src[si + ch];
                    }
                }
            }
        }
        let value = Tensor::from_parts(vec![n, out_h, out_w, c], out);
        self.graph().record("resize_bilinear", &[self], value, move |g| {
            let gd = g.data();
            let mut gx = vec![0.0; numel(&shape)];
            for b in 0..n {
                for (p, t) in taps.iter().enumerate() {
                    let di = (b * out_h * out_w + p) * c;
                    for &(idx, wt) in t {
                        let si = (b * h * w + idx) * c;
                        for ch in 0..c {
                            gx[si + ch] += wt * gd[di + ch];
                        }
                    }
                }
            }
            vec![Some(Tensor::from_parts(shape.clone(), gx))]
        })
    }
}

fn resize_taps(h: usize, w: usize, oh: usize, ow: usize) -> Vec<[(usize, f64); 4]> {
    let axis = |len: usize, out: usize, i: usize| {
        let s = ((i as f64 + 0.5) * len as f64 / out as f64 - 0.5).clamp(0.0, (len - 1) as f64);
        let i0 = s.floor() as usize;
        let i1 = (i0 + 1).min(len - 1);
        (i0, i1, s - i0 as f64)
    };
    let mut taps = Vec::with_capacity(oh * ow);
    for y in 0..oh {
        let (y0, y1, fy) = axis(h, oh, y);
        for x in 0..ow {
            let (x0, x1, fx) = axis(w, ow, x);
            taps.push([
                (y0 * w + x0, (1.0 - fy) * (1.0 - fx)),
                (y0 * w + x1, (1.0 - fy) * fx),
                (y1 * w + x0, fy * (1.0 - fx)),
                (y1 * w + x1, fy * fx),
            ]);
        }
    }
    taps
}
