//! Moving-sprite scenes with exact ground-truth flow.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::flowcomp::BidirectionalFlows;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SpriteKind {
    Rect,
    Disc,
}

/// A textured shape translating at constant velocity.
#[derive(Clone, Debug, PartialEq)]
pub struct Sprite {
    pub kind: SpriteKind,
    pub color: [f64; 3],
    /// Half extents `(x, y)` for rectangles; `x` is the radius for discs.
    pub half: (f64, f64),
    /// Centre at frame 0, pixels.
    pub origin: (f64, f64),
    /// Displacement per frame `(dx, dy)`, pixels.
    pub velocity: (f64, f64),
    /// Spatial frequencies and phase of the sprite's stripe texture.
    pub texture: (f64, f64, f64),
}

#[derive(Clone, Debug, PartialEq)]
pub struct SceneSpec {
    pub seed: u64,
    pub frames: usize,
    pub height: usize,
    pub width: usize,
    /// Drawn back to front.
    pub sprites: Vec<Sprite>,
}

impl SceneSpec {
    /// Random scene of 2 to 4 sprites with integer velocities bounded by
    /// `max_speed` pixels per frame; `fractional` adds sub-pixel parts.
    pub fn random(seed: u64, frames: usize, height: usize, width: usize, max_speed: usize, fractional: bool) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = rng.gen_range(2..=4);
        let min_side = height.min(width) as f64;
        let speed = max_speed as i64;
        let sprites = (0..n)
            .map(|_| {
                let kind = if rng.gen_bool(0.5) { SpriteKind::Rect } else { SpriteKind::Disc };
                let hx = rng.gen_range(0.12..0.3) * min_side;
                let hy = rng.gen_range(0.12..0.3) * min_side;
                let mut v = || {
                    let base = rng.gen_range(-speed..=speed) as f64;
                    if fractional {
                        base + rng.gen_range(-0.5..0.5)
                    } else {
                        base
                    }
                };
                let velocity = (v(), v());
                Sprite {
                    kind,
                    color: [rng.gen_range(0.05..0.95), rng.gen_range(0.05..0.95), rng.gen_range(0.05..0.95)],
                    half: (hx.round().max(2.0), hy.round().max(2.0)),
                    origin: (rng.gen_range(0..width) as f64, rng.gen_range(0..height) as f64),
                    velocity,
                    texture: (rng.gen_range(0.08..0.2), rng.gen_range(0.08..0.2), rng.gen_range(0.0..std::f64::consts::TAU)),
                }
            })
            .collect();
        SceneSpec {
            seed,
            frames,
            height,
            width,
            sprites,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.frames == 0 || self.height == 0 || self.width == 0 {
            return Err(Error::Data(format!(
                "scene needs positive extents, got {}x{}x{}",
                self.frames, self.height, self.width
            )));
        }
        if !self.height.is_multiple_of(4) || !self.width.is_multiple_of(4) {
            return Err(Error::Data(format!("frame size {}x{} must be divisible by 4", self.height, self.width)));
        }
        for s in &self.sprites {
            let finite = s.color.iter().all(|c| (0.0..=1.0).contains(c))
                && [s.half.0, s.half.1, s.origin.0, s.origin.1, s.velocity.0, s.velocity.1]
                    .iter()
                    .all(|v| v.is_finite());
            if !finite || s.half.0 <= 0.0 || s.half.1 <= 0.0 {
                return Err(Error::Data(format!("invalid sprite {s:?}")));
            }
        }
        Ok(())
    }
}

/// A rendered clip with flows at quarter and full resolution.
#[derive(Clone, Debug, PartialEq)]
pub struct Scene {
    /// `[T, H, W, 3]` in [0, 1].
    pub video: Tensor,
    /// Quarter-resolution flows, `[T-1, H/4, W/4, 2]` each.
    pub flows: BidirectionalFlows,
    /// Full-resolution flows, `[T-1, H, W, 2]` each.
    pub flows_full: BidirectionalFlows,
}

impl Scene {
    pub fn frames(&self) -> usize {
        self.video.shape()[0]
    }
}

fn background(seed: u64, h: usize, w: usize) -> Vec<[f64; 3]> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9_7f4a_7c15);
    const G: usize = 5;
    let grid: Vec<[f64; 3]> = (0..G * G)
        .map(|_| [rng.gen_range(0.2..0.8), rng.gen_range(0.2..0.8), rng.gen_range(0.2..0.8)])
        .collect();
    let mut out = Vec::with_capacity(h * w);
    for y in 0..h {
        let gy = y as f64 / (h - 1).max(1) as f64 * (G - 1) as f64;
        let y0 = (gy.floor() as usize).min(G - 2);
        let fy = gy - y0 as f64;
        for x in 0..w {
            let gx = x as f64 / (w - 1).max(1) as f64 * (G - 1) as f64;
            let x0 = (gx.floor() as usize).min(G - 2);
            let fx = gx - x0 as f64;
            let mut c = [0.0; 3];
            for (ch, v) in c.iter_mut().enumerate() {
                let a = grid[y0 * G + x0][ch] * (1.0 - fx) + grid[y0 * G + x0 + 1][ch] * fx;
                let b = grid[(y0 + 1) * G + x0][ch] * (1.0 - fx) + grid[(y0 + 1) * G + x0 + 1][ch] * fx;
                *v = a * (1.0 - fy) + b * fy;
            }
            out.push(c);
        }
    }
    out
}

impl Sprite {
    fn centre(&self, t: usize) -> (f64, f64) {
        (self.origin.0 + self.velocity.0 * t as f64, self.origin.1 + self.velocity.1 * t as f64)
    }

    /// Colour at pixel `(x, y)` of frame `t`, if covered.
    fn sample(&self, x: f64, y: f64, t: usize) -> Option<[f64; 3]> {
        let (cx, cy) = self.centre(t);
        let (u, v) = (x - cx, y - cy);
        let inside = match self.kind {
            SpriteKind::Rect => u.abs() <= self.half.0 && v.abs() <= self.half.1,
            SpriteKind::Disc => u * u + v * v <= self.half.0 * self.half.0,
        };
        inside.then(|| {
            let (fu, fv, phase) = self.texture;
            let shade = 0.75 + 0.25 * (fu * u + fv * v + phase).sin();
            self.color.map(|c| c * shade)
        })
    }
}

/// Area-average a `[P, H, W, 2]` flow stack by 4 and rescale to quarter
/// resolution pixel units.
pub fn quarter_flow(full: &Tensor) -> Tensor {
    let s = full.shape();
    let (p, h, w) = (s[0], s[1], s[2]);
    let (qh, qw) = (h / 4, w / 4);
    let mut out = Tensor::zeros(&[p, qh, qw, 2]);
    let src = full.data();
    let dst = out.data_mut();
    for i in 0..p {
        for y in 0..h {
            for x in 0..w {
                let s = ((i * h + y) * w + x) * 2;
                let d = ((i * qh + y / 4) * qw + x / 4) * 2;
                dst[d] += src[s] / 64.0;
                dst[d + 1] += src[s + 1] / 64.0;
            }
        }
    }
    out
}

/// Deterministic rendering of `spec`. Ground-truth flow on a pixel is the
/// velocity of the top-most sprite covering it (negated for backward flow)
/// and zero on the static background.
pub fn render_scene(spec: &SceneSpec) -> Result<Scene> {
    spec.validate()?;
    let (t, h, w) = (spec.frames, spec.height, spec.width);
    let bg = background(spec.seed, h, w);
    let mut video = Tensor::zeros(&[t, h, w, 3]);
    let pairs = t - 1;
    let mut fwd = Tensor::zeros(&[pairs, h, w, 2]);
    let mut bwd = Tensor::zeros(&[pairs, h, w, 2]);
    for f in 0..t {
        for y in 0..h {
            for x in 0..w {
                let px = f * h * w + y * w + x;
                let mut color = bg[y * w + x];
                let mut top = None;
                for s in &spec.sprites {
                    if let Some(c) = s.sample(x as f64, y as f64, f) {
                        color = c;
                        top = Some(s.velocity);
                    }
                }
                video.data_mut()[px * 3..px * 3 + 3].copy_from_slice(&color);
                let v = top.unwrap_or((0.0, 0.0));
                if f < pairs {
                    let i = (f * h * w + y * w + x) * 2;
                    fwd.data_mut()[i..i + 2].copy_from_slice(&[v.0, v.1]);
                }
                if f > 0 {
                    let i = ((f - 1) * h * w + y * w + x) * 2;
                    bwd.data_mut()[i..i + 2].copy_from_slice(&[-v.0, -v.1]);
                }
            }
        }
    }
    let flows = BidirectionalFlows {
        forward: quarter_flow(&fwd),
        backward: quarter_flow(&bwd),
    };
    Ok(Scene {
        video,
        flows,
        flows_full: BidirectionalFlows {
            forward: fwd,
            backward: bwd,
        },
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn one_sprite(velocity: (f64, f64)) -> SceneSpec {
        SceneSpec {
            seed: 1,
            frames: 3,
            height: 32,
            width: 32,
            sprites: vec![Sprite {
                kind: SpriteKind::Rect,
                color: [0.9, 0.2, 0.1],
                half: (6.0, 6.0),
                origin: (12.0, 16.0),
                velocity,
                texture: (0.5, 0.7, 0.0),
            }],
        }
    }

    #[test]
    fn static_scene_has_zero_flow() {
        let scene = render_scene(&one_sprite((0.0, 0.0))).unwrap();
        assert!(scene.flows.forward.data().iter().all(|&v| v == 0.0));
        assert!(scene.flows.backward.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn quarter_resolution_scaling() {
        let scene = render_scene(&one_sprite((4.0, 0.0))).unwrap();
        // quarter cell (4, 3) lies inside the sprite at frame 0: x 12..16, y 16..20
        assert_eq!(scene.flows.forward.at(&[0, 4, 3, 0]), 1.0);
        assert_eq!(scene.flows.forward.at(&[0, 4, 3, 1]), 0.0);
        assert_eq!(scene.flows.backward.at(&[0, 4, 3, 0]), -1.0);
        assert_eq!(scene.flows.forward.at(&[0, 0, 0, 0]), 0.0);
    }

    #[test]
    fn rendering_is_deterministic() {
        let spec = SceneSpec::random(9, 4, 32, 32, 4, false);
        assert_eq!(render_scene(&spec).unwrap(), render_scene(&spec).unwrap());
        assert_eq!(spec, SceneSpec::random(9, 4, 32, 32, 4, false));
    }
}
