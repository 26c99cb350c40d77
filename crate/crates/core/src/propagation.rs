//! Bidirectional flow-guided feature propagation.
//!
//! The backward pass walks from the last local frame to the first. At each
//! step the already propagated feature of frame `t+1` is aligned to frame
//! `t`, either by plain flow warping or by a modulated deformable
//! convolution whose sampling grid starts at the completed flow and is
//! refined by predicted offsets, and then merged with the frame's own
//! feature. The forward pass mirrors this from the first frame to the last.

use rand::Rng;

use crate::error::{Error, Result};
use crate::geom::{bilinear_warp, mod_deform_conv, DeformInputs, DeformSpec};
use crate::nn::{Bound, Conv2d, ParamGroup, ParamId, ParamStore};
use crate::tensor::{concat, Tensor, Var};

/// How the neighbouring propagated feature is brought onto the current frame.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Alignment {
    /// Flow warp followed by a deformable convolution with predicted
    /// offsets and modulation masks.
    Deformable,
    /// Flow warp only.
    FlowWarp,
}

#[derive(Clone, Debug)]
pub struct PropagationCell {
    pub spec: DeformSpec,
    /// Offset/mask predictor: concat(E_t, warped, flow) → offsets ⊕ mask logits.
    offset_net: [Conv2d; 3],
    deform_weight: ParamId,
    deform_bias: ParamId,
    /// Merge: concat(E_t, aligned) → C.
    merge: [Conv2d; 2],
}

impl PropagationCell {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, name: &str, channels: usize, spec: DeformSpec, rng: &mut R) -> Self {
        let g = ParamGroup::Propagation;
        let c = channels;
        let offset_net = [
            Conv2d::new(store, &format!("{name}.offset0"), g, 2 * c + 2, c, 3, 1, rng),
            Conv2d::new(store, &format!("{name}.offset1"), g, c, c, 3, 1, rng),
            Conv2d::zeros(store, &format!("{name}.offset2"), g, c, spec.offset_channels() + spec.mask_channels(), 3),
        ];
        // Centre-tap identity: with zero offsets the layer reproduces the
        // flow-warped feature scaled by the initial 0.5 gate.
        let k = spec.kernel;
        let mut w = Tensor::zeros(&[k, k, c, c]);
        for ch in 0..c {
            w.set(&[k / 2, k / 2, ch, ch], 1.0);
        }
        let deform_weight = store.add(format!("{name}.deform.weight"), g, w);
        let deform_bias = store.add(format!("{name}.deform.bias"), g, Tensor::zeros(&[c]));
        let merge = [
            Conv2d::new(store, &format!("{name}.merge0"), g, 2 * c, c, 3, 1, rng),
            Conv2d::new(store, &format!("{name}.merge1"), g, c, c, 3, 1, rng),
        ];
        PropagationCell {
            spec,
            offset_net,
            deform_weight,
            deform_bias,
            merge,
        }
    }

    pub fn offset_net(&self) -> &[Conv2d; 3] {
        &self.offset_net
    }

    pub fn merge_convs(&self) -> &[Conv2d; 2] {
        &self.merge
    }

    pub fn deform_params(&self) -> (ParamId, ParamId) {
        (self.deform_weight, self.deform_bias)
    }

    /// One recurrence step: align `prev` (`[1, h, w, C]`) onto `current`
    /// using `flow` and merge.
    pub fn step<'g>(
        &self,
        p: &Bound<'g>,
        current: Var<'g>,
        prev: Var<'g>,
        flow: Var<'g>,
        alignment: Alignment,
        observer: &mut dyn FnMut(&Tensor),
    ) -> Result<Var<'g>> {
        let warped = bilinear_warp(prev, flow)?;
        let aligned = match alignment {
            Alignment::FlowWarp => warped,
            Alignment::Deformable => {
                let mut x = concat(&[current, warped, flow], 3)?;
                for (i, conv) in self.offset_net.iter().enumerate() {
                    x = conv.forward(p, x)?;
                    if i + 1 < self.offset_net.len() {
                        x = x.lrelu()?;
                    }
                }
                let n_off = self.spec.offset_channels();
                let offsets = x.narrow(3, 0, n_off)?;
                let mask_logits = x.narrow(3, n_off, self.spec.mask_channels())?;
                observer(&mask_logits.value().map(crate::tensor::sigmoid));
                mod_deform_conv(
                    self.spec,
                    DeformInputs {
                        input: prev,
                        weight: p.var(self.deform_weight),
                        bias: p.var(self.deform_bias),
                        base_flow: flow,
                        offsets,
                        mask_logits,
                    },
                )?
            }
        };
        let merged = self.merge[0].forward(p, concat(&[current, aligned], 3)?)?.lrelu()?;
        self.merge[1].forward(p, merged)
    }
}

fn check_flows(features: &[usize], flows: Option<Var<'_>>, op: &'static str) -> Result<()> {
    let t = features[0];
    match flows {
        None if t <= 1 => Ok(()),
        None => Err(Error::InvalidArgument(format!("{op}: {t} frames need {} flows, got none", t - 1))),
        Some(f) => {
            let fs = f.shape();
            if fs.len() != 4 || fs[0] + 1 != t || fs[1..3] != features[1..3] || fs[3] != 2 {
                Err(Error::shape(op, features, &fs))
            } else {
                Ok(())
            }
        }
    }
}

/// Propagate from the last frame to the first, guided by forward flows
/// `F(t→t+1)` (`[T-1, h, w, 2]`). The last frame passes through unchanged.
pub fn propagate_backward<'g>(
    p: &Bound<'g>,
    cell: &PropagationCell,
    features: Var<'g>,
    forward_flows: Option<Var<'g>>,
    alignment: Alignment,
    observer: &mut dyn FnMut(&Tensor),
) -> Result<Var<'g>> {
    let shape = features.shape();
    check_flows(&shape, forward_flows, "propagate_backward")?;
    let t = shape[0];
    let Some(flows) = forward_flows.filter(|_| t > 1) else {
        return Ok(features);
    };
    let mut out: Vec<Var<'g>> = vec![features.narrow(0, t - 1, 1)?];
    for i in (0..t - 1).rev() {
        let prev = *out.last().expect("seeded");
        let current = features.narrow(0, i, 1)?;
        let flow = flows.narrow(0, i, 1)?;
        out.push(cell.step(p, current, prev, flow, alignment, observer)?);
    }
    out.reverse();
    concat(&out, 0)
}

/// Propagate from the first frame to the last, guided by backward flows
/// `F(t→t-1)` (`[T-1, h, w, 2]`, entry `i` belonging to frame `i+1`).
pub fn propagate_forward<'g>(
    p: &Bound<'g>,
    cell: &PropagationCell,
    features: Var<'g>,
    backward_flows: Option<Var<'g>>,
    alignment: Alignment,
    observer: &mut dyn FnMut(&Tensor),
) -> Result<Var<'g>> {
    let shape = features.shape();
    check_flows(&shape, backward_flows, "propagate_forward")?;
    let t = shape[0];
    let Some(flows) = backward_flows.filter(|_| t > 1) else {
        return Ok(features);
    };
    let mut out: Vec<Var<'g>> = vec![features.narrow(0, 0, 1)?];
    for i in 1..t {
        let prev = *out.last().expect("seeded");
        let current = features.narrow(0, i, 1)?;
        let flow = flows.narrow(0, i - 1, 1)?;
        out.push(cell.step(p, current, prev, flow, alignment, observer)?);
    }
    concat(&out, 0)
}

/// Learned 1×1 fusion of the two propagation streams.
#[derive(Clone, Debug)]
pub struct Fusion {
    pub conv: Conv2d,
}

impl Fusion {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, channels: usize, rng: &mut R) -> Self {
        Fusion {
            conv: Conv2d::new(store, "fusion", ParamGroup::Fusion, 2 * channels, channels, 1, 1, rng),
        }
    }

    /// Per-pixel linear map of `concat(forward, backward)` to `C` channels.
    pub fn fuse<'g>(&self, p: &Bound<'g>, forward: Var<'g>, backward: Var<'g>) -> Result<Var<'g>> {
        if forward.shape() != backward.shape() {
            return Err(Error::shape("fuse", &forward.shape(), &backward.shape()));
        }
        self.conv.forward(p, concat(&[forward, backward], 3)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Graph;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn cell(c: usize) -> (ParamStore, PropagationCell) {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut store = ParamStore::new();
        let cell = PropagationCell::new(&mut store, "b", c, DeformSpec { kernel: 3, groups: 2 }, &mut rng);
        (store, cell)
    }

    #[test]
    fn single_frame_is_identity() {
        let (store, cell) = cell(4);
        let g = Graph::new();
        let p = store.bind(&g, |_| false);
        let x = Tensor::uniform(&[1, 8, 8, 4], -1.0, 1.0, &mut ChaCha8Rng::seed_from_u64(0));
        let out = propagate_backward(&p, &cell, g.constant(x.clone()), None, Alignment::Deformable, &mut |_| {}).unwrap();
        assert_eq!(*out.value(), x);
        let out = propagate_forward(&p, &cell, g.constant(x.clone()), None, Alignment::Deformable, &mut |_| {}).unwrap();
        assert_eq!(*out.value(), x);
    }

    #[test]
    fn shape_contract_and_flow_count() {
        let (store, cell) = cell(4);
        let g = Graph::new();
        let p = store.bind(&g, |_| false);
        let x = g.constant(Tensor::zeros(&[5, 16, 16, 4]));
        let flows = g.constant(Tensor::zeros(&[4, 16, 16, 2]));
        let out = propagate_backward(&p, &cell, x, Some(flows), Alignment::Deformable, &mut |_| {}).unwrap();
        assert_eq!(out.shape(), vec![5, 16, 16, 4]);
        let wrong = g.constant(Tensor::zeros(&[3, 16, 16, 2]));
        assert!(propagate_backward(&p, &cell, x, Some(wrong), Alignment::Deformable, &mut |_| {}).is_err());
    }

    #[test]
    fn averaging_fusion_and_bias_only_fusion() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut store = ParamStore::new();
        let fusion = Fusion::new(&mut store, 3, &mut rng);
        let mut w = Tensor::zeros(&[1, 1, 6, 3]);
        for c in 0..3 {
            w.set(&[0, 0, c, c], 0.5);
            w.set(&[0, 0, c + 3, c], 0.5);
        }
        *store.get_mut(fusion.conv.weight) = w;
        *store.get_mut(fusion.conv.bias) = Tensor::zeros(&[3]);
        let a = Tensor::uniform(&[2, 4, 4, 3], -1.0, 1.0, &mut rng);
        let b = Tensor::uniform(&[2, 4, 4, 3], -1.0, 1.0, &mut rng);
        let g = Graph::new();
        let p = store.bind(&g, |_| false);
        let out = fusion.fuse(&p, g.constant(a.clone()), g.constant(b.clone())).unwrap().value();
        let mean = a.zip_map(&b, |x, y| 0.5 * (x + y)).unwrap();
        assert!(out.max_abs_diff(&mean) < 1e-12);

        *store.get_mut(fusion.conv.weight) = Tensor::zeros(&[1, 1, 6, 3]);
        *store.get_mut(fusion.conv.bias) = Tensor::new(&[3], vec![0.1, 0.2, 0.3]).unwrap();
        let g = Graph::new();
        let p = store.bind(&g, |_| false);
        let out = fusion.fuse(&p, g.constant(a), g.constant(b)).unwrap().value();
        for px in out.data().chunks(3) {
            assert_eq!(px, &[0.1, 0.2, 0.3]);
        }
    }
}
