//! Flow completion: a coarse-to-fine residual flow estimator applied to
//! quarter-resolution corrupted frames, producing forward and backward flows
//! for every adjacent local pair in one feed-forward pass.

use rand::Rng;

use crate::error::{Error, Result};
use crate::geom::bilinear_warp;
use crate::nn::{Bound, Conv2d, ParamGroup, ParamStore};
use crate::tensor::{concat, Graph, Tensor, Var};

/// Area-average `[T, H, W, C]` frames down by 4 in each spatial axis.
pub fn downsample_quarter<'g>(frames: Var<'g>) -> Result<Var<'g>> {
    let shape = frames.shape();
    if shape.len() != 4 || !shape[1].is_multiple_of(4) || !shape[2].is_multiple_of(4) {
        return Err(Error::invalid_shape(
            "downsample_quarter",
            format!("spatial extents of {shape:?} must be divisible by 4"),
        ));
    }
    frames.avg_pool2d(4)
}

/// Architecture of the flow estimator.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct FlowNetConfig {
    pub levels: usize,
    /// Hidden widths of the per-level stack; the stack has
    /// `hidden.len() + 1` convolutions, the first 7×7 and the rest 3×3.
    pub hidden: Vec<usize>,
}

impl Default for FlowNetConfig {
    fn default() -> Self {
        FlowNetConfig {
            levels: 3,
            hidden: vec![16, 16, 16, 8],
        }
    }
}

#[derive(Clone, Debug)]
struct FlowLevel {
    convs: Vec<Conv2d>,
}

/// Gain on the photometric residual fed to each level. Residuals on the
/// desk data are small next to the raw intensities.
pub const RESIDUAL_GAIN: f64 = 5.0;

/// Residual flow pyramid. Level 0 is the finest (quarter-resolution) level.
/// Each level sees `[a, warp(b), gain * (a - warp(b)), flow]`, 11 channels.
#[derive(Clone, Debug)]
pub struct FlowPyramidNet {
    levels: Vec<FlowLevel>,
}

/// Forward flows `F(t→t+1)` and backward flows `F(t→t-1)` for a clip of
/// `T` frames, each `[T-1, h, w, 2]`.
#[derive(Clone, Debug, PartialEq)]
pub struct BidirectionalFlows {
    pub forward: Tensor,
    pub backward: Tensor,
}

impl BidirectionalFlows {
    pub fn pairs(&self) -> usize {
        self.forward.shape().first().copied().unwrap_or(0)
    }

    pub fn zeros(pairs: usize, h: usize, w: usize) -> Self {
        BidirectionalFlows {
            forward: Tensor::zeros(&[pairs, h, w, 2]),
            backward: Tensor::zeros(&[pairs, h, w, 2]),
        }
    }

    /// Flows of the sub-clip `[start, start + len)`.
    pub fn window(&self, start: usize, len: usize) -> Self {
        let pairs = len.saturating_sub(1);
        BidirectionalFlows {
            forward: self.forward.narrow0(start, pairs),
            backward: self.backward.narrow0(start, pairs),
        }
    }
}

/// Graph-side flows; `None` when the clip has fewer than two frames.
#[derive(Clone, Copy, Debug)]
pub struct FlowVars<'g> {
    pub forward: Var<'g>,
    pub backward: Var<'g>,
}

impl<'g> FlowVars<'g> {
    pub fn constant(graph: &'g Graph, flows: &BidirectionalFlows) -> Option<Self> {
        (flows.pairs() > 0).then(|| FlowVars {
            forward: graph.constant(flows.forward.clone()),
            backward: graph.constant(flows.backward.clone()),
        })
    }

    pub fn values(&self) -> BidirectionalFlows {
        BidirectionalFlows {
            forward: (*self.forward.value()).clone(),
            backward: (*self.backward.value()).clone(),
        }
    }
}

impl FlowPyramidNet {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, cfg: &FlowNetConfig, rng: &mut R) -> Self {
        let levels = (0..cfg.levels)
            .map(|l| {
                let mut convs = Vec::new();
                let mut c_in = 11;
                for (i, &c_out) in cfg.hidden.iter().enumerate() {
                    let k = if i == 0 { 7 } else { 3 };
                    let name = format!("flow.level{l}.conv{i}");
                    convs.push(Conv2d::new(store, &name, ParamGroup::FlowComp, c_in, c_out, k, 1, rng));
                    c_in = c_out;
                }
                let name = format!("flow.level{l}.conv{}", cfg.hidden.len());
                let k = if cfg.hidden.is_empty() { 7 } else { 3 };
                convs.push(Conv2d::zeros(store, &name, ParamGroup::FlowComp, c_in, 2, k));
                FlowLevel { convs }
            })
            .collect();
        FlowPyramidNet { levels }
    }

    pub fn num_levels(&self) -> usize {
        self.levels.len()
    }

    /// Flow `F(a→b)` for batched image pairs `[N, h, w, 3]`, such that
    /// `a(p) ≈ b(p + F(p))`.
    pub fn forward<'g>(&self, p: &Bound<'g>, a: Var<'g>, b: Var<'g>) -> Result<Var<'g>> {
        let shape = a.shape();
        if shape != b.shape() {
            return Err(Error::shape("flow pyramid", &shape, &b.shape()));
        }
        let [n, h, w, _] = shape[..] else {
            return Err(Error::invalid_shape("flow pyramid", format!("{shape:?}")));
        };
        let depth = self.levels.len();
        let scale = 1usize << (depth - 1);
        if h % scale != 0 || w % scale != 0 {
            return Err(Error::invalid_shape(
                "flow pyramid",
                format!("{h}x{w} not divisible by 2^{}", depth - 1),
            ));
        }
        let mut pyr_a = vec![a];
        let mut pyr_b = vec![b];
        for _ in 1..depth {
            pyr_a.push(pyr_a.last().expect("level").avg_pool2d(2)?);
            pyr_b.push(pyr_b.last().expect("level").avg_pool2d(2)?);
        }
        let graph = p.graph();
        let mut flow = graph.constant(Tensor::zeros(&[n, h / scale, w / scale, 2]));
        for l in (0..depth).rev() {
            let (lh, lw) = (h >> l, w >> l);
            if l + 1 < depth {
                flow = flow.resize_bilinear(lh, lw)?.mul_scalar(2.0)?;
            }
            let warped = bilinear_warp(pyr_b[l], flow)?;
            let diff = pyr_a[l].sub(warped)?.mul_scalar(RESIDUAL_GAIN)?;
            let mut x = concat(&[pyr_a[l], warped, diff, flow], 3)?;
            let convs = &self.levels[l].convs;
            for (i, conv) in convs.iter().enumerate() {
                x = conv.forward(p, x)?;
                if i + 1 < convs.len() {
                    x = x.lrelu()?;
                }
            }
            flow = flow.add(x)?;
        }
        Ok(flow)
    }
}

/// Estimate forward and backward flows between adjacent frames of the
/// quarter-resolution clip `[T, h, w, 3]`. Both directions run through the
/// same network in one batch by swapping the argument order.
pub fn estimate_bidirectional<'g>(p: &Bound<'g>, net: &FlowPyramidNet, frames_small: Var<'g>) -> Result<Option<FlowVars<'g>>> {
    let t = frames_small.shape()[0];
    if t < 2 {
        return Ok(None);
    }
    let pairs = t - 1;
    let earlier = frames_small.narrow(0, 0, pairs)?;
    let later = frames_small.narrow(0, 1, pairs)?;
    let a = concat(&[earlier, later], 0)?;
    let b = concat(&[later, earlier], 0)?;
    let flows = net.forward(p, a, b)?;
    Ok(Some(FlowVars {
        forward: flows.narrow(0, 0, pairs)?,
        backward: flows.narrow(0, pairs, pairs)?,
    }))
}

/// Per-direction mean absolute error, summed over the two directions.
pub fn flow_loss<'g>(pred: FlowVars<'g>, gt: FlowVars<'g>) -> Result<Var<'g>> {
    for (a, b) in [(pred.forward, gt.forward), (pred.backward, gt.backward)] {
        if a.shape() != b.shape() {
            return Err(Error::shape("flow_loss", &a.shape(), &b.shape()));
        }
    }
    let f = pred.forward.sub(gt.forward)?;
    let b = pred.backward.sub(gt.backward)?;
    f.abs()?.mean()?.add(b.abs()?.mean()?)
}

/// Mean endpoint error between two flow stacks `[P, h, w, 2]`.
pub fn endpoint_error(pred: &Tensor, gt: &Tensor) -> Result<f64> {
    if pred.shape() != gt.shape() {
        return Err(Error::shape("endpoint_error", pred.shape(), gt.shape()));
    }
    let n = pred.numel() / 2;
    if n == 0 {
        return Ok(0.0);
    }
    let total: f64 = pred
        .data()
        .chunks(2)
        .zip(gt.data().chunks(2))
        .map(|(a, b)| ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)).sqrt())
        .sum();
    Ok(total / n as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn downsample_constant_and_shape() {
        let g = Graph::new();
        let x = g.constant(Tensor::full(&[2, 64, 64, 3], 0.3));
        let y = downsample_quarter(x).unwrap().value();
        assert_eq!(y.shape(), &[2, 16, 16, 3]);
        assert!(y.data().iter().all(|v| (v - 0.3).abs() < 1e-15));
        let bad = g.constant(Tensor::zeros(&[1, 6, 8, 3]));
        assert!(downsample_quarter(bad).is_err());
    }

    #[test]
    fn zero_initialised_net_predicts_zero_flow() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut store = ParamStore::new();
        let net = FlowPyramidNet::new(&mut store, &FlowNetConfig::default(), &mut rng);
        let g = Graph::new();
        let p = store.bind(&g, |_| false);
        let frame = Tensor::uniform(&[1, 16, 16, 3], 0.0, 1.0, &mut rng);
        let clip = Tensor::stack(&[frame.clone(), frame]).unwrap().reshape(&[2, 16, 16, 3]).unwrap();
        let flows = estimate_bidirectional(&p, &net, g.constant(clip)).unwrap().unwrap();
        assert!(flows.forward.value().data().iter().all(|&v| v == 0.0));
        assert!(flows.backward.value().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn pair_counts_follow_clip_length() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut store = ParamStore::new();
        let net = FlowPyramidNet::new(&mut store, &FlowNetConfig::default(), &mut rng);
        let g = Graph::new();
        let p = store.bind(&g, |_| false);
        let clip = g.constant(Tensor::uniform(&[5, 16, 16, 3], 0.0, 1.0, &mut rng));
        let flows = estimate_bidirectional(&p, &net, clip).unwrap().unwrap();
        assert_eq!(flows.forward.shape(), vec![4, 16, 16, 2]);
        assert_eq!(flows.backward.shape(), vec![4, 16, 16, 2]);
        let single = g.constant(Tensor::zeros(&[1, 16, 16, 3]));
        assert!(estimate_bidirectional(&p, &net, single).unwrap().is_none());
    }

    #[test]
    fn flow_loss_reduction() {
        let g = Graph::new();
        let gt = BidirectionalFlows::zeros(2, 4, 4);
        let shifted = BidirectionalFlows {
            forward: gt.forward.map(|v| v + 1.0),
            backward: gt.backward.map(|v| v + 1.0),
        };
        let a = FlowVars::constant(&g, &gt).unwrap();
        let b = FlowVars::constant(&g, &shifted).unwrap();
        assert_eq!(flow_loss(a, a).unwrap().value().item().unwrap(), 0.0);
        assert_eq!(flow_loss(b, a).unwrap().value().item().unwrap(), 2.0);
    }
}
