//! Flow warping and modulated deformable convolution.
//!
//! Both kernels use backward sampling: the value written at pixel `p` is
//! read from the source at `p + displacement(p)`. Sampling coordinates are
//! clamped to the image rectangle, so out-of-range reads replicate the
//! nearest edge pixel. Flow channel 0 is the horizontal displacement `dx`,
//! channel 1 the vertical `dy`, both in pixels of the sampled grid.

use std::cell::Cell;
use std::rc::Rc;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::tensor::{gemm, sigmoid, Tensor, Var};

thread_local! {
    static WRONG_DCN_BACKWARD: Cell<bool> = const { Cell::new(false) };
}

/// Negative-control hook: while enabled on the current thread, the
/// deformable convolution reports offset gradients with the wrong sign.
#[doc(hidden)]
pub fn inject_wrong_dcn_backward(enabled: bool) {
    WRONG_DCN_BACKWARD.with(|c| c.set(enabled));
}

fn wrong_dcn_backward() -> bool {
    WRONG_DCN_BACKWARD.with(|c| c.get())
}

/// Four bilinear taps of one sampling location together with the partial
/// derivatives of their weights with respect to the (unclamped) coordinate.
#[derive(Clone, Copy, Debug)]
struct Taps {
    idx: [usize; 4],
    w: [f64; 4],
    dwdx: [f64; 4],
    dwdy: [f64; 4],
}

#[inline]
fn taps(x: f64, y: f64, width: usize, height: usize) -> Taps {
    let xmax = (width - 1) as f64;
    let ymax = (height - 1) as f64;
    let (xc, ax) = if x <= 0.0 {
        (0.0, 0.0)
    } else if x >= xmax {
        (xmax, 0.0)
    } else {
        (x, 1.0)
    };
    let (yc, ay) = if y <= 0.0 {
        (0.0, 0.0)
    } else if y >= ymax {
        (ymax, 0.0)
    } else {
        (y, 1.0)
    };
    let x0 = xc.floor() as usize;
    let y0 = yc.floor() as usize;
    let x1 = (x0 + 1).min(width - 1);
    let y1 = (y0 + 1).min(height - 1);
    let fx = xc - x0 as f64;
    let fy = yc - y0 as f64;
    Taps {
        idx: [y0 * width + x0, y0 * width + x1, y1 * width + x0, y1 * width + x1],
        w: [(1.0 - fy) * (1.0 - fx), (1.0 - fy) * fx, fy * (1.0 - fx), fy * fx],
        dwdx: [-(1.0 - fy) * ax, (1.0 - fy) * ax, -fy * ax, fy * ax],
        dwdy: [-(1.0 - fx) * ay, -fx * ay, (1.0 - fx) * ay, fx * ay],
    }
}

fn rank4(shape: &[usize], op: &'static str) -> Result<[usize; 4]> {
    match *shape {
        [n, h, w, c] => Ok([n, h, w, c]),
        _ => Err(Error::invalid_shape(op, format!("expected [N, H, W, C], got {shape:?}"))),
    }
}

/// Sample `src` `[N, h, w, c]` at `p + flow(p)` for every pixel, with
/// `flow` `[N, h, w, 2]`. Differentiable with respect to both inputs.
pub fn bilinear_warp<'g>(src: Var<'g>, flow: Var<'g>) -> Result<Var<'g>> {
    let sv = src.value();
    let fv = flow.value();
    let [n, h, w, c] = rank4(sv.shape(), "bilinear_warp")?;
    if fv.shape() != [n, h, w, 2] {
        return Err(Error::shape("bilinear_warp", sv.shape(), fv.shape()));
    }
    let plane = h * w;
    let sd = sv.data();
    let fd = fv.data();
    let mut out = vec![0.0; n * plane * c];
    let mut all_taps = Vec::with_capacity(n * plane);
    for b in 0..n {
        for y in 0..h {
            for x in 0..w {
                let p = b * plane + y * w + x;
                let t = taps(x as f64 + fd[p * 2], y as f64 + fd[p * 2 + 1], w, h);
                let dst = &mut out[p * c..(p + 1) * c];
                for k in 0..4 {
                    let s = &sd[(b * plane + t.idx[k]) * c..][..c];
                    for ch in 0..c {
                        dst[ch] += t.w[k] * s[ch];
                    }
                }
                all_taps.push(t);
            }
        }
    }
    let value = Tensor::from_parts(vec![n, h, w, c], out);
    let (src_req, flow_req) = (src.requires_grad(), flow.requires_grad());
    src.graph().record("bilinear_warp", &[src, flow], value, move |g| {
        let gd = g.data();
        let sd = sv.data();
        let mut gsrc = src_req.then(|| vec![0.0; n * plane * c]);
        let mut gflow = flow_req.then(|| vec![0.0; n * plane * 2]);
        for b in 0..n {
            for q in 0..plane {
                let p = b * plane + q;
                let t = &all_taps[p];
                let gp = &gd[p * c..(p + 1) * c];
                if let Some(gs) = gsrc.as_mut() {
                    for k in 0..4 {
                        let dst = &mut gs[(b * plane + t.idx[k]) * c..][..c];
                        for ch in 0..c {
                            dst[ch] += t.w[k] * gp[ch];
                        }
                    }
                }
                if let Some(gf) = gflow.as_mut() {
                    let (mut dx, mut dy) = (0.0, 0.0);
                    for k in 0..4 {
                        let s = &sd[(b * plane + t.idx[k]) * c..][..c];
                        let dot: f64 = s.iter().zip(gp).map(|(a, b)| a * b).sum();
                        dx += t.dwdx[k] * dot;
                        dy += t.dwdy[k] * dot;
                    }
                    gf[p * 2] = dx;
                    gf[p * 2 + 1] = dy;
                }
            }
        }
        vec![
            gsrc.map(|d| Tensor::from_parts(sv.shape().to_vec(), d)),
            gflow.map(|d| Tensor::from_parts(fv.shape().to_vec(), d)),
        ]
    })
}

/// Kernel size and deformable group count of a modulated deformable
/// convolution.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct DeformSpec {
    pub kernel: usize,
    pub groups: usize,
}

impl DeformSpec {
    /// Channels of the offset tensor: `(tap, group, {dx, dy})`.
    pub fn offset_channels(&self) -> usize {
        2 * self.mask_channels()
    }

    /// Channels of the mask-logit tensor: `(tap, group)`.
    pub fn mask_channels(&self) -> usize {
        self.kernel * self.kernel * self.groups
    }

    pub fn validate(&self, c_in: usize) -> Result<()> {
        if self.kernel.is_multiple_of(2) {
            return Err(Error::InvalidArgument(format!(
                "deformable kernel size must be odd, got {}",
                self.kernel
            )));
        }
        if self.groups == 0 || !c_in.is_multiple_of(self.groups) {
            return Err(Error::InvalidArgument(format!(
                "{c_in} input channels not divisible into {} deformable groups",
                self.groups
            )));
        }
        Ok(())
    }
}

/// Inputs of [`mod_deform_conv`] other than the spec.
pub struct DeformInputs<'g> {
    /// Sampled feature map `[N, h, w, c_in]`.
    pub input: Var<'g>,
    /// `[K, K, c_in, c_out]`.
    pub weight: Var<'g>,
    /// `[c_out]`.
    pub bias: Var<'g>,
    /// Shared displacement `[N, h, w, 2]` added to every tap.
    pub base_flow: Var<'g>,
    /// Per-tap, per-group residual displacement `[N, h, w, K²·G·2]`.
    pub offsets: Var<'g>,
    /// `[N, h, w, K²·G]`, passed through a sigmoid.
    pub mask_logits: Var<'g>,
}

/// Modulated deformable convolution with flow-guided sampling:
///
/// `out(p) = Σ_k σ(m(p,k)) · w_k · x_g(p + p_k + flow(p) + Δ(p,k)) + b`
///
/// where `p_k` enumerates the integer K×K taps and the input channels are
/// split into `G` groups that each have their own offsets and masks. The
/// output keeps the input's spatial size.
pub fn mod_deform_conv<'g>(spec: DeformSpec, inputs: DeformInputs<'g>) -> Result<Var<'g>> {
    let DeformInputs {
        input,
        weight,
        bias,
        base_flow,
        offsets,
        mask_logits,
    } = inputs;
    let xv = input.value();
    let wv = weight.value();
    let bv = bias.value();
    let fv = base_flow.value();
    let ov = offsets.value();
    let mv = mask_logits.value();
    let [n, h, w, c_in] = rank4(xv.shape(), "mod_deform_conv")?;
    spec.validate(c_in)?;
    let kk = spec.kernel * spec.kernel;
    let groups = spec.groups;
    let cg = c_in / groups;
    let ws = wv.shape().to_vec();
    if ws.len() != 4 || ws[0] != spec.kernel || ws[1] != spec.kernel || ws[2] != c_in {
        return Err(Error::shape("mod_deform_conv weight", xv.shape(), &ws));
    }
    let c_out = ws[3];
    if bv.shape() != [c_out] {
        return Err(Error::shape("mod_deform_conv bias", &ws, bv.shape()));
    }
    if fv.shape() != [n, h, w, 2] {
        return Err(Error::shape("mod_deform_conv flow", xv.shape(), fv.shape()));
    }
    if ov.shape() != [n, h, w, spec.offset_channels()] {
        return Err(Error::shape("mod_deform_conv offsets", xv.shape(), ov.shape()));
    }
    if mv.shape() != [n, h, w, spec.mask_channels()] {
        return Err(Error::shape("mod_deform_conv mask", xv.shape(), mv.shape()));
    }

    let plane = h * w;
    let rows = n * plane;
    let row_len = kk * c_in;
    let half = (spec.kernel / 2) as isize;

    // Per (row, tap, group): taps and modulation.
    let n_samples = rows * kk * groups;
    let mut sample_taps = vec![
        Taps {
            idx: [0; 4],
            w: [0.0; 4],
            dwdx: [0.0; 4],
            dwdy: [0.0; 4]
        };
        n_samples
    ];
    let mut modulation = vec![0.0; n_samples];
    let mut raw = vec![0.0; rows * row_len];
    {
        let xd = xv.data();
        let fd = fv.data();
        let od = ov.data();
        let md = mv.data();
        raw.par_chunks_mut(row_len)
            .zip(sample_taps.par_chunks_mut(kk * groups))
            .zip(modulation.par_chunks_mut(kk * groups))
            .enumerate()
            .for_each(|(r, ((raw_row, taps_row), mod_row))| {
                let b = r / plane;
                let q = r % plane;
                let (y, x) = (q / w, q % w);
                let item = &xd[b * plane * c_in..(b + 1) * plane * c_in];
                for k in 0..kk {
                    let ky = (k / spec.kernel) as isize - half;
                    let kx = (k % spec.kernel) as isize - half;
                    for gi in 0..groups {
                        let s = k * groups + gi;
                        let sx = x as f64 + kx as f64 + fd[r * 2] + od[r * 2 * kk * groups + s * 2];
                        let sy = y as f64 + ky as f64 + fd[r * 2 + 1] + od[r * 2 * kk * groups + s * 2 + 1];
                        let t = taps(sx, sy, w, h);
                        taps_row[s] = t;
                        mod_row[s] = sigmoid(md[r * kk * groups + s]);
                        let dst = &mut raw_row[k * c_in + gi * cg..][..cg];
                        for j in 0..4 {
                            let src = &item[t.idx[j] * c_in + gi * cg..][..cg];
                            for ch in 0..cg {
                                dst[ch] += t.w[j] * src[ch];
                            }
                        }
                    }
                }
            });
    }
    let mut cols = raw.clone();
    for (r, row) in cols.chunks_mut(row_len).enumerate() {
        for k in 0..kk {
            for gi in 0..groups {
                let m = modulation[(r * kk + k) * groups + gi];
                for v in &mut row[k * c_in + gi * cg..][..cg] {
                    *v *= m;
                }
            }
        }
    }
    let mut out = vec![0.0; rows * c_out];
    for row in out.chunks_mut(c_out) {
        row.copy_from_slice(bv.data());
    }
    gemm(rows, row_len, c_out, &cols, false, wv.data(), false, &mut out, 1.0);
    let value = Tensor::from_parts(vec![n, h, w, c_out], out);

    let reqs = [
        input.requires_grad(),
        weight.requires_grad(),
        bias.requires_grad(),
        base_flow.requires_grad(),
        offsets.requires_grad(),
        mask_logits.requires_grad(),
    ];
    let cols = Rc::new(cols);
    let wrong_sign = wrong_dcn_backward();
    input.graph().record(
        "mod_deform_conv",
        &[input, weight, bias, base_flow, offsets, mask_logits],
        value,
        move |g| {
            let gd = g.data();
            let xd = xv.data();
            let mut dcols = vec![0.0; rows * row_len];
            gemm(rows, c_out, row_len, gd, false, wv.data(), true, &mut dcols, 0.0);

            let gweight = reqs[1].then(|| {
                let mut dw = vec![0.0; row_len * c_out];
                gemm(row_len, rows, c_out, &cols, true, gd, false, &mut dw, 0.0);
                Tensor::from_parts(ws.clone(), dw)
            });
            let gbias = reqs[2].then(|| {
                let mut db = vec![0.0; c_out];
                for row in gd.chunks(c_out) {
                    for (a, b) in db.iter_mut().zip(row) {
                        *a += b;
                    }
                }
                Tensor::from_parts(vec![c_out], db)
            });

            let mut ginput = vec![0.0; n * plane * c_in];
            let mut gflow = vec![0.0; rows * 2];
            let mut goff = vec![0.0; rows * 2 * kk * groups];
            let mut gmask = vec![0.0; rows * kk * groups];
            let offset_sign = if wrong_sign { -1.0 } else { 1.0 };
            // Parallel over batch items: each owns its slice of every output.
            ginput
                .par_chunks_mut(plane * c_in)
                .zip(gflow.par_chunks_mut(plane * 2))
                .zip(goff.par_chunks_mut(plane * 2 * kk * groups))
                .zip(gmask.par_chunks_mut(plane * kk * groups))
                .enumerate()
                .for_each(|(b, (((gin, gfl), gof), gma))| {
                    let item = &xd[b * plane * c_in..(b + 1) * plane * c_in];
                    for q in 0..plane {
                        let r = b * plane + q;
                        let drow = &dcols[r * row_len..(r + 1) * row_len];
                        let rrow = &raw[r * row_len..(r + 1) * row_len];
                        for k in 0..kk {
                            for gi in 0..groups {
                                let s = k * groups + gi;
                                let t = &sample_taps[r * kk * groups + s];
                                let m = modulation[r * kk * groups + s];
                                let dc = &drow[k * c_in + gi * cg..][..cg];
                                let sv = &rrow[k * c_in + gi * cg..][..cg];
                                let dot: f64 = dc.iter().zip(sv).map(|(a, b)| a * b).sum();
                                gma[q * kk * groups + s] = dot * m * (1.0 - m);
                                let (mut dx, mut dy) = (0.0, 0.0);
                                for j in 0..4 {
                                    let base = t.idx[j] * c_in + gi * cg;
                                    let src = &item[base..base + cg];
                                    let mut dsrc = 0.0;
                                    for ch in 0..cg {
                                        gin[base + ch] += t.w[j] * m * dc[ch];
                                        dsrc += src[ch] * dc[ch];
                                    }
                                    dx += t.dwdx[j] * m * dsrc;
                                    dy += t.dwdy[j] * m * dsrc;
                                }
                                gof[q * 2 * kk * groups + s * 2] = offset_sign * dx;
                                gof[q * 2 * kk * groups + s * 2 + 1] = offset_sign * dy;
                                gfl[q * 2] += dx;
                                gfl[q * 2 + 1] += dy;
                            }
                        }
                    }
                });
            vec![
                reqs[0].then(|| Tensor::from_parts(xv.shape().to_vec(), ginput)),
                gweight,
                gbias,
                reqs[3].then(|| Tensor::from_parts(fv.shape().to_vec(), gflow)),
                reqs[4].then(|| Tensor::from_parts(ov.shape().to_vec(), goff)),
                reqs[5].then(|| Tensor::from_parts(mv.shape().to_vec(), gmask)),
            ]
        },
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Graph;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape, data.to_vec()).unwrap()
    }

    #[test]
    fn zero_flow_is_identity() {
        let g = Graph::new();
        let src = Tensor::from_fn(&[1, 3, 4, 2], |i| (i as f64 * 0.37).sin());
        let out = bilinear_warp(g.constant(src.clone()), g.constant(Tensor::zeros(&[1, 3, 4, 2])))
            .unwrap()
            .value();
        assert_eq!(*out, src);
    }

    #[test]
    fn integer_shift_replicates_right_column() {
        let g = Graph::new();
        let src = Tensor::from_fn(&[1, 2, 3, 1], |i| i as f64);
        let flow = Tensor::from_fn(&[1, 2, 3, 2], |i| if i % 2 == 0 { 1.0 } else { 0.0 });
        let out = bilinear_warp(g.constant(src), g.constant(flow)).unwrap().value();
        assert_eq!(out.data(), &[1.0, 2.0, 2.0, 4.0, 5.0, 5.0]);
    }

    #[test]
    fn half_pixel_shift_hand_values() {
        let g = Graph::new();
        let src = t(&[1, 2, 2, 1], &[0.0, 1.0, 2.0, 3.0]);
        let flow = Tensor::from_fn(&[1, 2, 2, 2], |i| if i % 2 == 0 { 0.5 } else { 0.0 });
        let out = bilinear_warp(g.constant(src), g.constant(flow)).unwrap().value();
        assert!((out.at(&[0, 0, 0, 0]) - 0.5).abs() < 1e-10);
        assert!((out.at(&[0, 1, 0, 0]) - 2.5).abs() < 1e-10);
    }

    #[test]
    fn warp_rejects_mismatched_flow() {
        let g = Graph::new();
        let r = bilinear_warp(g.constant(Tensor::zeros(&[1, 4, 4, 3])), g.constant(Tensor::zeros(&[1, 4, 3, 2])));
        assert!(matches!(r, Err(Error::ShapeMismatch { .. })));
    }

    fn deform_inputs<'g>(g: &'g Graph, c_in: usize, spec: DeformSpec, mask: f64) -> DeformInputs<'g> {
        let (h, w) = (4, 5);
        DeformInputs {
            input: g.constant(Tensor::from_fn(&[1, h, w, c_in], |i| (i as f64 * 0.3).cos())),
            weight: g.constant(Tensor::from_fn(&[spec.kernel, spec.kernel, c_in, 3], |i| (i as f64 * 0.11).sin())),
            bias: g.constant(t(&[3], &[0.1, -0.2, 0.3])),
            base_flow: g.constant(Tensor::zeros(&[1, h, w, 2])),
            offsets: g.constant(Tensor::zeros(&[1, h, w, spec.offset_channels()])),
            mask_logits: g.constant(Tensor::full(&[1, h, w, spec.mask_channels()], mask)),
        }
    }

    #[test]
    fn annihilated_taps_leave_bias() {
        let g = Graph::new();
        let spec = DeformSpec { kernel: 3, groups: 2 };
        let out = mod_deform_conv(spec, deform_inputs(&g, 4, spec, -40.0)).unwrap().value();
        for px in out.data().chunks(3) {
            assert!((px[0] - 0.1).abs() < 1e-8 && (px[1] + 0.2).abs() < 1e-8 && (px[2] - 0.3).abs() < 1e-8);
        }
    }

    #[test]
    fn rejects_even_kernel_and_bad_groups() {
        let g = Graph::new();
        let spec = DeformSpec { kernel: 3, groups: 3 };
        let r = mod_deform_conv(spec, deform_inputs(&g, 4, spec, 0.0));
        assert!(matches!(r, Err(Error::InvalidArgument(_))));
        let even = DeformSpec { kernel: 2, groups: 1 };
        let r = mod_deform_conv(even, deform_inputs(&g, 4, even, 0.0));
        assert!(matches!(r, Err(Error::InvalidArgument(_))));
    }
}
