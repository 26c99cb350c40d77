//! Temporal focal transformer: overlapped patch embedding, 3-D window
//! partition, spatial window pooling and window attention over fine and
//! pooled coarse tokens.
//!
//! Token grids are `[T, M, N, C_e]`. Windowed layouts are `[W, L, C_e]` with
//! `L = s_t * s_h * s_w` and windows ordered `(wt, wh, ww)` row-major; the
//! tokens inside a window are ordered `(t, y, x)`.

use rand::Rng;

use crate::error::{Error, Result};
use crate::nn::{Bound, LayerNorm, Linear, ParamGroup, ParamStore};
use crate::tensor::{concat, Tensor, Var};

/// Overlapped patch geometry shared by soft split and soft composite.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SplitGeom {
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

impl SplitGeom {
    /// Token grid extents `(M, N)` for an `h x w` feature map.
    pub fn grid(&self, h: usize, w: usize) -> Result<(usize, usize)> {
        let extent = |len: usize| {
            let padded = len + 2 * self.pad;
            (self.stride > 0 && self.kernel > 0 && padded >= self.kernel).then(|| (padded - self.kernel) / self.stride + 1)
        };
        match (extent(h), extent(w)) {
            (Some(m), Some(n)) => Ok((m, n)),
            _ => Err(Error::invalid_shape("soft_split", format!("degenerate geometry {self:?} for {h}x{w}"))),
        }
    }

    /// Number of patches covering each pixel, `[1, h, w, 1]`.
    pub fn overlap_count(&self, h: usize, w: usize) -> Result<Tensor> {
        let (m, n) = self.grid(h, w)?;
        let mut count = Tensor::zeros(&[1, h, w, 1]);
        for ty in 0..m {
            for tx in 0..n {
                for ky in 0..self.kernel {
                    for kx in 0..self.kernel {
                        let y = (ty * self.stride + ky) as isize - self.pad as isize;
                        let x = (tx * self.stride + kx) as isize - self.pad as isize;
                        if (0..h as isize).contains(&y) && (0..w as isize).contains(&x) {
                            count.data_mut()[y as usize * w + x as usize] += 1.0;
                        }
                    }
                }
            }
        }
        if count.data().contains(&0.0) {
            return Err(Error::invalid_shape("soft_composite", format!("geometry {self:?} leaves pixels of {h}x{w} uncovered")));
        }
        Ok(count)
    }
}

/// Overlap-add patches `[T, M, N, k*k*C]` onto an `h x w` canvas and divide
/// each pixel by its overlap count.
pub fn composite_patches<'g>(patches: Var<'g>, geom: SplitGeom, hw: (usize, usize)) -> Result<Var<'g>> {
    let count = patches.graph().constant(geom.overlap_count(hw.0, hw.1)?);
    patches.fold2d(hw, geom.kernel, geom.stride, geom.pad)?.div(count)
}

/// Patch extraction followed by a linear projection to the token width.
#[derive(Clone, Debug)]
pub struct SoftSplit {
    pub geom: SplitGeom,
    pub proj: Linear,
}

impl SoftSplit {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, geom: SplitGeom, channels: usize, dim: usize, rng: &mut R) -> Self {
        let d_in = geom.kernel * geom.kernel * channels;
        SoftSplit {
            geom,
            proj: Linear::new(store, "soft_split", ParamGroup::Blocks, d_in, dim, rng),
        }
    }

    pub fn forward<'g>(&self, p: &Bound<'g>, features: Var<'g>) -> Result<Var<'g>> {
        let shape = features.shape();
        if shape.len() != 4 {
            return Err(Error::invalid_shape("soft_split", format!("expected [T, h, w, C], got {shape:?}")));
        }
        self.geom.grid(shape[1], shape[2])?;
        let g = self.geom;
        self.proj.forward(p, features.unfold2d(g.kernel, g.stride, g.pad)?)
    }
}

/// Linear projection of tokens back to patches, then count-normalised
/// overlap-add.
#[derive(Clone, Debug)]
pub struct SoftComposite {
    pub geom: SplitGeom,
    pub proj: Linear,
}

impl SoftComposite {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, geom: SplitGeom, dim: usize, channels: usize, rng: &mut R) -> Self {
        let d_out = geom.kernel * geom.kernel * channels;
        SoftComposite {
            geom,
            proj: Linear::new(store, "soft_composite", ParamGroup::Blocks, dim, d_out, rng),
        }
    }

    pub fn forward<'g>(&self, p: &Bound<'g>, tokens: Var<'g>, hw: (usize, usize)) -> Result<Var<'g>> {
        composite_patches(self.proj.forward(p, tokens)?, self.geom, hw)
    }
}

/// Window extents `(s_t, s_h, s_w)` in tokens.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct WindowSpec {
    pub t: usize,
    pub h: usize,
    pub w: usize,
}

impl WindowSpec {
    pub fn len(&self) -> usize {
        self.t * self.h * self.w
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Window counts `(W_t, W_h, W_w)` for a `[T, M, N, _]` grid.
    pub fn counts(&self, grid: &[usize]) -> Result<(usize, usize, usize)> {
        let [t, m, n, _] = grid[..] else {
            return Err(Error::invalid_shape("partition_windows", format!("expected [T, M, N, C], got {grid:?}")));
        };
        for (axis, len, win) in [("temporal", t, self.t), ("height", m, self.h), ("width", n, self.w)] {
            if win == 0 || len % win != 0 {
                return Err(Error::invalid_shape(
                    "partition_windows",
                    format!("{axis} axis: extent {len} not divisible by window {win}"),
                ));
            }
        }
        Ok((t / self.t, m / self.h, n / self.w))
    }
}

/// `[T, M, N, C] -> [W, s_t*s_h*s_w, C]`.
pub fn partition_windows<'g>(tokens: Var<'g>, win: WindowSpec) -> Result<Var<'g>> {
    let shape = tokens.shape();
    let (wt, wh, ww) = win.counts(&shape)?;
    let c = shape[3];
    tokens
        .reshape(&[wt, win.t, wh, win.h, ww, win.w, c])?
        .permute(&[0, 2, 4, 1, 3, 5, 6])?
        .reshape(&[wt * wh * ww, win.len(), c])
}

/// Inverse of [`partition_windows`] for a `[T, M, N]` grid.
pub fn unpartition_windows<'g>(windows: Var<'g>, win: WindowSpec, grid: (usize, usize, usize)) -> Result<Var<'g>> {
    let shape = windows.shape();
    let c = *shape.last().unwrap_or(&0);
    let (wt, wh, ww) = win.counts(&[grid.0, grid.1, grid.2, c])?;
    if shape != [wt * wh * ww, win.len(), c] {
        return Err(Error::shape("unpartition_windows", &[wt * wh * ww, win.len(), c], &shape));
    }
    windows
        .reshape(&[wt, wh, ww, win.t, win.h, win.w, c])?
        .permute(&[0, 3, 1, 4, 2, 5, 6])?
        .reshape(&[grid.0, grid.1, grid.2, c])
}

/// Collapse each window's `s_h x s_w` tokens per temporal slice into one
/// token with `f_p`: `[W, L, C] -> [W, s_t, C]`.
pub fn pool_windows<'g>(p: &Bound<'g>, windows: Var<'g>, win: WindowSpec, f_p: &Linear) -> Result<Var<'g>> {
    let shape = windows.shape();
    let [nw, l, c] = shape[..] else {
        return Err(Error::invalid_shape("pool_windows", format!("expected [W, L, C], got {shape:?}")));
    };
    if l != win.len() {
        return Err(Error::invalid_shape("pool_windows", format!("window length {l} != {}", win.len())));
    }
    let spatial = windows.reshape(&[nw, win.t, win.h * win.w, c])?.permute(&[0, 1, 3, 2])?;
    f_p.forward(p, spatial)?.reshape(&[nw, win.t, c])
}

/// Row indices into the pooled tokens flattened to `[W*s_t, C]` that form
/// each window's coarse key set: the `s_h x s_w` windows centred on it,
/// clamped at the grid border, every temporal slice. Ordered per window as
/// `(dy, dx, t)`.
pub fn coarse_indices(counts: (usize, usize, usize), win: WindowSpec) -> Vec<usize> {
    let (wt, wh, ww) = counts;
    let clamp = |v: isize, len: usize| v.clamp(0, len as isize - 1) as usize;
    let mut idx = Vec::with_capacity(wt * wh * ww * win.len());
    for a in 0..wt {
        for b in 0..wh {
            for c in 0..ww {
                for dy in 0..win.h {
                    for dx in 0..win.w {
                        let y = clamp(b as isize + dy as isize - (win.h / 2) as isize, wh);
                        let x = clamp(c as isize + dx as isize - (win.w / 2) as isize, ww);
                        let window = (a * wh + y) * ww + x;
                        idx.extend((0..win.t).map(|t| window * win.t + t));
                    }
                }
            }
        }
    }
    idx
}

/// Which keys each query window sees.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AttentionMode {
    /// Own fine tokens plus pooled tokens of the surrounding windows.
    Focal,
    /// Own fine tokens only.
    Local,
    /// Every token of the grid.
    Global,
}

impl std::str::FromStr for AttentionMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "focal" => Ok(AttentionMode::Focal),
            "local" => Ok(AttentionMode::Local),
            "global" => Ok(AttentionMode::Global),
            other => Err(Error::Config(format!("attention must be focal|local|global, got {other:?}"))),
        }
    }
}

impl std::fmt::Display for AttentionMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            AttentionMode::Focal => "focal",
            AttentionMode::Local => "local",
            AttentionMode::Global => "global",
        })
    }
}

/// Multi-head scaled dot-product attention. `q` is `[B, L, C]`, `k` and `v`
/// are `[B, S, C]`. Returns the head-concatenated output `[B, L, C]` and the
/// attention probabilities `[B, heads, L, S]`.
pub fn multi_head_attention<'g>(q: Var<'g>, k: Var<'g>, v: Var<'g>, heads: usize) -> Result<(Var<'g>, Var<'g>)> {
    let qs = q.shape();
    let ks = k.shape();
    let [b, l, c] = qs[..] else {
        return Err(Error::invalid_shape("attention", format!("queries {qs:?}")));
    };
    if ks.len() != 3 || ks[0] != b || ks[2] != c || v.shape() != ks {
        return Err(Error::shape("attention", &qs, &ks));
    }
    if heads == 0 || c % heads != 0 {
        return Err(Error::InvalidArgument(format!("attention: width {c} not divisible by {heads} heads")));
    }
    let s = ks[1];
    let d = c / heads;
    let qh = q.reshape(&[b, l, heads, d])?.permute(&[0, 2, 1, 3])?;
    let kt = k.reshape(&[b, s, heads, d])?.permute(&[0, 2, 3, 1])?;
    let vh = v.reshape(&[b, s, heads, d])?.permute(&[0, 2, 1, 3])?;
    let probs = qh.matmul(kt)?.mul_scalar(1.0 / (d as f64).sqrt())?.softmax()?;
    let out = probs.matmul(vh)?.permute(&[0, 2, 1, 3])?.reshape(&[b, l, c])?;
    Ok((out, probs))
}

/// Multi-head focal self-attention.
#[derive(Clone, Debug)]
pub struct FocalAttention {
    pub heads: usize,
    pub window: WindowSpec,
    pub f_q: Linear,
    pub f_kv: Linear,
    pub f_p: Linear,
    pub proj: Linear,
}

impl FocalAttention {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, name: &str, dim: usize, heads: usize, window: WindowSpec, rng: &mut R) -> Self {
        let g = ParamGroup::Blocks;
        let pool = window.h * window.w;
        let f_p = Linear::zeros(store, &format!("{name}.f_p"), g, pool, 1);
        *store.get_mut(f_p.weight) = Tensor::full(&[pool, 1], 1.0 / pool as f64);
        FocalAttention {
            heads,
            window,
            f_q: Linear::new(store, &format!("{name}.f_q"), g, dim, dim, rng),
            f_kv: Linear::new(store, &format!("{name}.f_kv"), g, dim, 2 * dim, rng),
            f_p,
            proj: Linear::new(store, &format!("{name}.proj"), g, dim, dim, rng),
        }
    }

    /// Attend over `[T, M, N, C]` tokens. Also returns the number of
    /// query-key score evaluations (per head).
    pub fn forward<'g>(&self, p: &Bound<'g>, tokens: Var<'g>, mode: AttentionMode) -> Result<(Var<'g>, u64)> {
        let shape = tokens.shape();
        let [t, m, n, c] = shape[..] else {
            return Err(Error::invalid_shape("focal_attention", format!("expected [T, M, N, C], got {shape:?}")));
        };
        if self.heads == 0 || c % self.heads != 0 {
            return Err(Error::InvalidArgument(format!("focal_attention: width {c} not divisible by {} heads", self.heads)));
        }
        let (queries, keys_in, restore): (Var<'g>, Var<'g>, Box<dyn Fn(Var<'g>) -> Result<Var<'g>>>) = match mode {
            AttentionMode::Global => {
                let flat = tokens.reshape(&[1, t * m * n, c])?;
                (flat, flat, Box::new(move |o: Var<'g>| o.reshape(&[t, m, n, c])))
            }
            AttentionMode::Local | AttentionMode::Focal => {
                let win = self.window;
                let counts = win.counts(&shape)?;
                let windows = partition_windows(tokens, win)?;
                let keys_in = if mode == AttentionMode::Focal {
                    let nw = counts.0 * counts.1 * counts.2;
                    let pooled = pool_windows(p, windows, win, &self.f_p)?.reshape(&[nw * win.t, c])?;
                    let coarse = pooled
                        .index_select(0, &coarse_indices(counts, win))?
                        .reshape(&[nw, win.h * win.w * win.t, c])?;
                    concat(&[windows, coarse], 1)?
                } else {
                    windows
                };
                (windows, keys_in, Box::new(move |o: Var<'g>| unpartition_windows(o, win, (t, m, n))))
            }
        };
        let q = self.f_q.forward(p, queries)?;
        let kv = self.f_kv.forward(p, keys_in)?;
        let k = kv.narrow(2, 0, c)?;
        let v = kv.narrow(2, c, c)?;
        let (qs, ks) = (q.shape(), k.shape());
        let scores = (qs[0] * qs[1] * ks[1]) as u64;
        let (out, _) = multi_head_attention(q, k, v, self.heads)?;
        let out = restore(out)?;
        Ok((self.proj.forward(p, out)?, scores))
    }
}

/// Feed-forward with a soft composite / soft split stage between its two
/// linear layers.
#[derive(Clone, Debug)]
pub struct F3n {
    pub geom: SplitGeom,
    pub fc1: Linear,
    pub fc2: Linear,
}

impl F3n {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, name: &str, dim: usize, hidden_channels: usize, geom: SplitGeom, rng: &mut R) -> Self {
        let hidden = geom.kernel * geom.kernel * hidden_channels;
        F3n {
            geom,
            fc1: Linear::new(store, &format!("{name}.fc1"), ParamGroup::Blocks, dim, hidden, rng),
            fc2: Linear::new(store, &format!("{name}.fc2"), ParamGroup::Blocks, hidden, dim, rng),
        }
    }

    pub fn forward<'g>(&self, p: &Bound<'g>, tokens: Var<'g>, hw: (usize, usize)) -> Result<Var<'g>> {
        let g = self.geom;
        let x = composite_patches(self.fc1.forward(p, tokens)?, g, hw)?;
        let x = x.unfold2d(g.kernel, g.stride, g.pad)?.gelu()?;
        self.fc2.forward(p, x)
    }
}

#[derive(Clone, Debug)]
pub struct FocalBlock {
    pub ln1: LayerNorm,
    pub attn: FocalAttention,
    pub ln2: LayerNorm,
    pub ffn: F3n,
}

/// Geometry of a transformer stack.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct FocalConfig {
    pub dim: usize,
    pub heads: usize,
    pub window: WindowSpec,
    pub split: SplitGeom,
    pub ffn_channels: usize,
}

impl FocalBlock {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, name: &str, cfg: &FocalConfig, rng: &mut R) -> Self {
        let g = ParamGroup::Blocks;
        FocalBlock {
            ln1: LayerNorm::new(store, &format!("{name}.ln1"), g, cfg.dim),
            attn: FocalAttention::new(store, &format!("{name}.attn"), cfg.dim, cfg.heads, cfg.window, rng),
            ln2: LayerNorm::new(store, &format!("{name}.ln2"), g, cfg.dim),
            ffn: F3n::new(store, &format!("{name}.ffn"), cfg.dim, cfg.ffn_channels, cfg.split, rng),
        }
    }

    /// `Z' = MFSA(LN1(Z)) + Z`, `Z_out = F3N(LN2(Z')) + Z'`. `hw` is the
    /// feature extent the token grid was split from.
    pub fn forward<'g>(&self, p: &Bound<'g>, tokens: Var<'g>, hw: (usize, usize), mode: AttentionMode) -> Result<(Var<'g>, u64)> {
        let (attn, scores) = self.attn.forward(p, self.ln1.forward(p, tokens)?, mode)?;
        let z = attn.add(tokens)?;
        let out = self.ffn.forward(p, self.ln2.forward(p, z)?, hw)?.add(z)?;
        Ok((out, scores))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Graph;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    const PAPER_GEOM: SplitGeom = SplitGeom { kernel: 7, stride: 3, pad: 3 };

    #[test]
    fn token_grid_sizes() {
        assert_eq!(PAPER_GEOM.grid(60, 108).unwrap(), (20, 36));
        assert_eq!(PAPER_GEOM.grid(16, 16).unwrap(), (6, 6));
        assert!(SplitGeom { kernel: 9, stride: 1, pad: 0 }.grid(4, 4).is_err());
    }

    #[test]
    fn partition_counts_and_errors() {
        let win = WindowSpec { t: 8, h: 5, w: 9 };
        assert_eq!(win.counts(&[8, 20, 36, 4]).unwrap(), (1, 4, 4));
        let err = win.counts(&[8, 21, 36, 4]).unwrap_err().to_string();
        assert!(err.contains("height"), "{err}");
    }

    #[test]
    fn equal_tokens_composite_to_constant() {
        let g = Graph::new();
        let geom = PAPER_GEOM;
        let (m, n) = geom.grid(16, 16).unwrap();
        let patches = g.constant(Tensor::full(&[2, m, n, 49 * 3], 0.7));
        let out = composite_patches(patches, geom, (16, 16)).unwrap().value();
        assert!(out.data().iter().all(|v| (v - 0.7).abs() < 1e-12));
    }

    #[test]
    fn uniform_keys_give_mean_values() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let g = Graph::new();
        let q = g.constant(Tensor::randn(&[1, 4, 4], 1.0, &mut rng));
        let k = g.constant(Tensor::full(&[1, 6, 4], 0.3));
        let vt = Tensor::randn(&[1, 6, 4], 1.0, &mut rng);
        let (out, probs) = multi_head_attention(q, k, g.constant(vt.clone()), 2).unwrap();
        for row in probs.value().data().chunks(6) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
        let out = out.value();
        for ch in 0..4 {
            let mean = (0..6).map(|s| vt.at(&[0, s, ch])).sum::<f64>() / 6.0;
            for l in 0..4 {
                assert!((out.at(&[0, l, ch]) - mean).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn score_counts_order_local_focal_global() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut store = ParamStore::new();
        let win = WindowSpec { t: 5, h: 3, w: 3 };
        let attn = FocalAttention::new(&mut store, "a", 8, 2, win, &mut rng);
        let g = Graph::new();
        let p = store.bind(&g, |_| false);
        let z = g.constant(Tensor::randn(&[5, 6, 6, 8], 1.0, &mut rng));
        let count = |mode| attn.forward(&p, z, mode).unwrap().1;
        let (l, f, gl) = (count(AttentionMode::Local), count(AttentionMode::Focal), count(AttentionMode::Global));
        assert_eq!(l, 4 * 45 * 45);
        assert_eq!(f, 4 * 45 * 90);
        assert_eq!(gl, 180 * 180);
    }
}
