//! Corruption masks: stationary rectangle unions and moving blobs.

use std::f64::consts::TAU;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MaskMode {
    /// One mask repeated on every frame.
    Stationary,
    /// A smooth blob moving along a random walk.
    ObjectLike,
}

impl std::str::FromStr for MaskMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "stationary" => Ok(MaskMode::Stationary),
            "object" | "object-like" => Ok(MaskMode::ObjectLike),
            other => Err(Error::Config(format!("mask mode must be stationary|object, got {other:?}"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct MaskSpec {
    pub mode: MaskMode,
    pub seed: u64,
}

/// Allowed fraction of corrupted pixels per frame.
pub const AREA_BOUNDS: (f64, f64) = (0.05, 0.60);
const MAX_ATTEMPTS: usize = 100;

fn area_ok(frame: &[f64]) -> bool {
    let area = frame.iter().sum::<f64>() / frame.len() as f64;
    (AREA_BOUNDS.0..=AREA_BOUNDS.1).contains(&area)
}

fn stationary<R: Rng>(rng: &mut R, h: usize, w: usize) -> Vec<f64> {
    let mut m = vec![0.0; h * w];
    for _ in 0..rng.gen_range(1..=3) {
        let rh = rng.gen_range(h / 6..=h / 2).max(1);
        let rw = rng.gen_range(w / 6..=w / 2).max(1);
        let y0 = rng.gen_range(0..=h - rh);
        let x0 = rng.gen_range(0..=w - rw);
        for y in y0..y0 + rh {
            m[y * w + x0..y * w + x0 + rw].fill(1.0);
        }
    }
    m
}

fn object_like<R: Rng>(rng: &mut R, t: usize, h: usize, w: usize) -> Vec<f64> {
    let (fh, fw) = (h as f64, w as f64);
    let rx = rng.gen_range(0.12..0.3) * fw;
    let ry = rng.gen_range(0.12..0.3) * fh;
    let lobes = rng.gen_range(2..=5) as f64;
    let phase = rng.gen_range(0.0..TAU);
    let mut cx = rng.gen_range(rx..fw - rx);
    let mut cy = rng.gen_range(ry..fh - ry);
    let step = |rng: &mut R| {
        let s = rng.gen_range(1..=3) as f64;
        if rng.gen_bool(0.5) {
            s
        } else {
            -s
        }
    };
    let (mut vx, mut vy) = (step(rng), step(rng));
    let mut out = vec![0.0; t * h * w];
    for f in 0..t {
        let frame = &mut out[f * h * w..(f + 1) * h * w];
        for y in 0..h {
            for x in 0..w {
                let dx = (x as f64 - cx) / rx;
                let dy = (y as f64 - cy) / ry;
                let r = (dx * dx + dy * dy).sqrt();
                let bound = 1.0 + 0.25 * (lobes * dy.atan2(dx) + phase).sin();
                if r <= bound {
                    frame[y * w + x] = 1.0;
                }
            }
        }
        if rng.gen_bool(0.3) {
            vx = step(rng);
        }
        if rng.gen_bool(0.3) {
            vy = step(rng);
        }
        // Reflect at the borders so the blob never stalls.
        if !(0.0..fw).contains(&(cx + vx)) {
            vx = -vx;
        }
        if !(0.0..fh).contains(&(cy + vy)) {
            vy = -vy;
        }
        cx += vx;
        cy += vy;
    }
    out
}

/// `[T, H, W, 1]` binary masks (1 = corrupted). Draws are rejected until
/// every frame covers between 5% and 60% of the image.
pub fn make_masks(spec: &MaskSpec, t: usize, h: usize, w: usize) -> Result<Tensor> {
    if t == 0 || h < 6 || w < 6 {
        return Err(Error::Data(format!("mask extents {t}x{h}x{w} too small")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    for _ in 0..MAX_ATTEMPTS {
        let data = match spec.mode {
            MaskMode::Stationary => {
                let frame = stationary(&mut rng, h, w);
                frame.iter().copied().cycle().take(t * h * w).collect()
            }
            MaskMode::ObjectLike => object_like(&mut rng, t, h, w),
        };
        if data.chunks(h * w).all(area_ok) {
            return Tensor::new(&[t, h, w, 1], data);
        }
    }
    Err(Error::Data(format!(
        "no {:?} mask within area bounds after {MAX_ATTEMPTS} attempts (seed {})",
        spec.mode, spec.seed
    )))
}
