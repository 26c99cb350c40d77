//! PSNR, SSIM and flow-warping error, plus the evaluation report.

use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::flowcomp::BidirectionalFlows;
use crate::geom::bilinear_warp;
use crate::tensor::{Graph, Tensor};

pub const PSNR_CAP: f64 = 99.0;
pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_C1: f64 = 0.01 * 0.01;
pub const SSIM_C2: f64 = 0.03 * 0.03;
pub const DEFAULT_OCCLUSION_THRESHOLD: f64 = 1.0;

fn frames_of(a: &Tensor, b: &Tensor, op: &'static str) -> Result<(usize, usize, usize, usize)> {
    if a.shape() != b.shape() {
        return Err(Error::shape(op, a.shape(), b.shape()));
    }
    match a.shape()[..] {
        [t, h, w, c] => Ok((t, h, w, c)),
        _ => Err(Error::invalid_shape(op, format!("expected [T, H, W, C], got {:?}", a.shape()))),
    }
}

/// Per-frame PSNR in dB for values in [0, 1], capped at 99.
pub fn psnr(a: &Tensor, b: &Tensor) -> Result<Vec<f64>> {
    let (t, h, w, c) = frames_of(a, b, "psnr")?;
    let n = h * w * c;
    Ok((0..t)
        .map(|f| {
            let r = f * n..(f + 1) * n;
            let mse = a.data()[r.clone()]
                .iter()
                .zip(&b.data()[r])
                .map(|(x, y)| (x - y) * (x - y))
                .sum::<f64>()
                / n as f64;
            if mse == 0.0 {
                PSNR_CAP
            } else {
                (10.0 * (1.0 / mse).log10()).min(PSNR_CAP)
            }
        })
        .collect())
}

/// Normalised 1-D Gaussian taps.
pub fn gaussian_window(size: usize, sigma: f64) -> Vec<f64> {
    let c = (size as f64 - 1.0) / 2.0;
    let g: Vec<f64> = (0..size).map(|i| (-(i as f64 - c).powi(2) / (2.0 * sigma * sigma)).exp()).collect();
    let s: f64 = g.iter().sum();
    g.into_iter().map(|v| v / s).collect()
}

/// Separable valid-mode filtering of an `h x w` plane.
fn filter_valid(x: &[f64], h: usize, w: usize, g: &[f64]) -> Vec<f64> {
    let k = g.len();
    let (oh, ow) = (h - k + 1, w - k + 1);
    let mut rows = vec![0.0; h * ow];
    for y in 0..h {
        for x0 in 0..ow {
            rows[y * ow + x0] = (0..k).map(|i| g[i] * x[y * w + x0 + i]).sum();
        }
    }
    let mut out = vec![0.0; oh * ow];
    for y0 in 0..oh {
        for x0 in 0..ow {
            out[y0 * ow + x0] = (0..k).map(|i| g[i] * rows[(y0 + i) * ow + x0]).sum();
        }
    }
    out
}

/// Per-frame SSIM: 11x11 Gaussian window (sigma 1.5) over valid positions,
/// averaged over channels and positions.
pub fn ssim(a: &Tensor, b: &Tensor) -> Result<Vec<f64>> {
    let (t, h, w, c) = frames_of(a, b, "ssim")?;
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(Error::invalid_shape("ssim", format!("frame {h}x{w} smaller than {SSIM_WINDOW}x{SSIM_WINDOW} window")));
    }
    let g = gaussian_window(SSIM_WINDOW, SSIM_SIGMA);
    let plane = |x: &Tensor, f: usize, ch: usize| -> Vec<f64> {
        (0..h * w).map(|p| x.data()[(f * h * w + p) * c + ch]).collect()
    };
    let mut out = Vec::with_capacity(t);
    for f in 0..t {
        let mut total = 0.0;
        let mut count = 0usize;
        for ch in 0..c {
            let x = plane(a, f, ch);
            let y = plane(b, f, ch);
            let xx: Vec<f64> = x.iter().map(|v| v * v).collect();
            let yy: Vec<f64> = y.iter().map(|v| v * v).collect();
            let xy: Vec<f64> = x.iter().zip(&y).map(|(p, q)| p * q).collect();
            let [mx, my, sxx, syy, sxy] = [&x, &y, &xx, &yy, &xy].map(|p| filter_valid(p, h, w, &g));
            for i in 0..mx.len() {
                let (ux, uy) = (mx[i], my[i]);
                let vx = sxx[i] - ux * ux;
                let vy = syy[i] - uy * uy;
                let cxy = sxy[i] - ux * uy;
                total += ((2.0 * ux * uy + SSIM_C1) * (2.0 * cxy + SSIM_C2))
                    / ((ux * ux + uy * uy + SSIM_C1) * (vx + vy + SSIM_C2));
                count += 1;
            }
        }
        out.push(total / count as f64);
    }
    Ok(out)
}

/// Mean over adjacent pairs of the squared difference between frame `t` and
/// frame `t+1` warped back by `F(t→t+1)`, over pixels that pass the
/// forward-backward consistency check and whose target lies inside the frame.
pub fn warp_error(video: &Tensor, flows_full: &BidirectionalFlows, occlusion_threshold: f64) -> Result<f64> {
    let s = video.shape();
    let [t, h, w, c] = s[..] else {
        return Err(Error::invalid_shape("warp_error", format!("{s:?}")));
    };
    if t < 2 {
        return Ok(0.0);
    }
    let want = [t - 1, h, w, 2];
    if flows_full.forward.shape() != want || flows_full.backward.shape() != want {
        return Err(Error::shape("warp_error", &want, flows_full.forward.shape()));
    }
    let g = Graph::new();
    let fwd = g.constant(flows_full.forward.clone());
    let next = g.constant(video.narrow0(1, t - 1));
    let warped = bilinear_warp(next, fwd)?.value();
    let back_at_target = bilinear_warp(g.constant(flows_full.backward.clone()), fwd)?.value();
    let mut total = 0.0;
    for pair in 0..t - 1 {
        let mut sum = 0.0;
        let mut valid = 0usize;
        for y in 0..h {
            for x in 0..w {
                let px = (pair * h + y) * w + x;
                let (fx, fy) = (flows_full.forward.data()[px * 2], flows_full.forward.data()[px * 2 + 1]);
                let (tx, ty) = (x as f64 + fx, y as f64 + fy);
                if tx < 0.0 || ty < 0.0 || tx > (w - 1) as f64 || ty > (h - 1) as f64 {
                    continue;
                }
                let (bx, by) = (back_at_target.data()[px * 2], back_at_target.data()[px * 2 + 1]);
                if ((fx + bx).powi(2) + (fy + by).powi(2)).sqrt() >= occlusion_threshold {
                    continue;
                }
                valid += 1;
                for ch in 0..c {
                    let a = video.data()[px * c + ch];
                    let b = warped.data()[px * c + ch];
                    sum += (a - b) * (a - b);
                }
            }
        }
        if valid > 0 {
            total += sum / (valid * c) as f64;
        }
    }
    Ok(total / (t - 1) as f64)
}

/// Metrics of one video.
#[derive(Clone, Debug, PartialEq)]
pub struct VideoMetrics {
    pub name: String,
    pub frames: usize,
    pub psnr: f64,
    pub ssim: f64,
    pub ewarp: f64,
}

impl VideoMetrics {
    pub fn compute(name: &str, output: &Tensor, target: &Tensor, flows_full: &BidirectionalFlows) -> Result<Self> {
        let p = psnr(output, target)?;
        let s = ssim(output, target)?;
        let n = p.len() as f64;
        Ok(VideoMetrics {
            name: name.to_string(),
            frames: p.len(),
            psnr: p.iter().sum::<f64>() / n,
            ssim: s.iter().sum::<f64>() / n,
            ewarp: warp_error(output, flows_full, DEFAULT_OCCLUSION_THRESHOLD)?,
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub label: String,
    pub videos: Vec<VideoMetrics>,
}

impl EvalReport {
    /// Frame-count-weighted aggregate.
    pub fn aggregate(&self) -> VideoMetrics {
        let n: usize = self.videos.iter().map(|v| v.frames).sum();
        let mean = |f: fn(&VideoMetrics) -> f64| {
            if n == 0 {
                0.0
            } else {
                self.videos.iter().map(|v| f(v) * v.frames as f64).sum::<f64>() / n as f64
            }
        };
        VideoMetrics {
            name: "ALL".into(),
            frames: n,
            psnr: mean(|v| v.psnr),
            ssim: mean(|v| v.ssim),
            ewarp: mean(|v| v.ewarp),
        }
    }

    /// Aligned plain-text table; E_warp is shown in units of 1e-2.
    pub fn table(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "[{}]", self.label);
        let _ = writeln!(
            s,
            "{:<14} {:>6} {:>9} {:>8} {:>16} {:>6}",
            "video", "frames", "PSNR", "SSIM", "E_warp (x1e-2)", "VFID"
        );
        for v in self.videos.iter().chain(std::iter::once(&self.aggregate())) {
            let _ = writeln!(
                s,
                "{:<14} {:>6} {:>9.4} {:>8.5} {:>16.6} {:>6}",
                v.name,
                v.frames,
                v.psnr,
                v.ssim,
                v.ewarp * 100.0,
                "-"
            );
        }
        s
    }

    /// One `key=value` record per line.
    pub fn records(&self) -> String {
        let mut s = String::new();
        for v in self.videos.iter().chain(std::iter::once(&self.aggregate())) {
            let _ = writeln!(
                s,
                "label={} video={} frames={} psnr={:.6} ssim={:.6} ewarp_x1e-2={:.6} vfid=null",
                self.label,
                v.name,
                v.frames,
                v.psnr,
                v.ssim,
                v.ewarp * 100.0
            );
        }
        s
    }
}
