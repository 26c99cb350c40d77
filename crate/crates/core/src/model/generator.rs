//! Generator: encoder, flow completion, bidirectional propagation, focal
//! transformer and decoder.

use rand::Rng;

use crate::error::{Error, Result};
use crate::flowcomp::{downsample_quarter, estimate_bidirectional, FlowPyramidNet, FlowVars};
use crate::focal::{FocalBlock, SoftComposite, SoftSplit};
use crate::nn::{Bound, Conv2d, ParamGroup, ParamStore};
use crate::propagation::{propagate_backward, propagate_forward, Alignment, Fusion, PropagationCell};
use crate::tensor::{concat, Graph, Tensor, Var};

use super::config::ModelConfig;

#[derive(Clone, Debug)]
pub struct Generator {
    pub cfg: ModelConfig,
    pub store: ParamStore,
    encoder: Vec<Conv2d>,
    pub flow_net: FlowPyramidNet,
    pub backward_cell: PropagationCell,
    pub forward_cell: PropagationCell,
    pub fusion: Fusion,
    split: SoftSplit,
    blocks: Vec<FocalBlock>,
    composite: SoftComposite,
    decoder: Vec<Conv2d>,
}

/// Result of one generator pass.
pub struct GeneratorOutput<'g> {
    /// Decoded frames `[T, H, W, 3]` in (0, 1), local frames first.
    pub frames: Var<'g>,
    /// Flows estimated between adjacent local frames, if any were needed.
    pub flows: Option<FlowVars<'g>>,
    /// Query-key score evaluations across all transformer blocks.
    pub attention_scores: u64,
}

impl Generator {
    pub fn new<R: Rng + ?Sized>(cfg: &ModelConfig, rng: &mut R) -> Result<Self> {
        cfg.validate()?;
        let mut store = ParamStore::new();
        let c = cfg.channels;
        let enc = ParamGroup::Encoder;
        let encoder = vec![
            Conv2d::new(&mut store, "enc0", enc, 4, c, 3, 2, rng),
            Conv2d::new(&mut store, "enc1", enc, c, c, 3, 1, rng),
            Conv2d::new(&mut store, "enc2", enc, c, c, 3, 2, rng),
            Conv2d::new(&mut store, "enc3", enc, c, c, 3, 1, rng),
        ];
        let flow_net = FlowPyramidNet::new(&mut store, &cfg.flow_net(), rng);
        let backward_cell = PropagationCell::new(&mut store, "prop_b", c, cfg.deform_spec(), rng);
        let forward_cell = PropagationCell::new(&mut store, "prop_f", c, cfg.deform_spec(), rng);
        let fusion = Fusion::new(&mut store, c, rng);
        let split = SoftSplit::new(&mut store, cfg.split_geom(), c, cfg.dim, rng);
        let focal = cfg.focal(cfg.t_local + cfg.t_nonlocal);
        let blocks = (0..cfg.blocks)
            .map(|i| FocalBlock::new(&mut store, &format!("block{i}"), &focal, rng))
            .collect();
        let composite = SoftComposite::new(&mut store, cfg.split_geom(), cfg.dim, c, rng);
        let dec = ParamGroup::Decoder;
        let decoder = vec![
            Conv2d::new(&mut store, "dec0", dec, c, c, 3, 1, rng),
            Conv2d::new(&mut store, "dec1", dec, c, 3, 3, 1, rng),
        ];
        Ok(Generator {
            cfg: cfg.clone(),
            store,
            encoder,
            flow_net,
            backward_cell,
            forward_cell,
            fusion,
            split,
            blocks,
            composite,
            decoder,
        })
    }

    /// Bind parameters to `graph`; everything is trainable except the flow
    /// network when it is frozen.
    pub fn bind<'g>(&self, graph: &'g Graph, trainable: bool) -> Bound<'g> {
        let freeze_flow = self.cfg.ablation.freeze_flow;
        self.store
            .bind(graph, |g| trainable && !(freeze_flow && g == ParamGroup::FlowComp))
    }

    pub fn encode<'g>(&self, p: &Bound<'g>, frames: Var<'g>, masks: Var<'g>) -> Result<Var<'g>> {
        let masked = frames.mul(masks.mul_scalar(-1.0)?.add_scalar(1.0)?)?;
        let mut x = concat(&[masked, masks], 3)?;
        for (i, conv) in self.encoder.iter().enumerate() {
            x = conv.forward(p, x)?;
            if i + 1 < self.encoder.len() {
                x = x.lrelu()?;
            }
        }
        Ok(x)
    }

    pub fn decode<'g>(&self, p: &Bound<'g>, features: Var<'g>) -> Result<Var<'g>> {
        let x = self.decoder[0].forward(p, features.upsample_nearest2d(2)?)?.lrelu()?;
        self.decoder[1].forward(p, x.upsample_nearest2d(2)?)?.sigmoid()
    }

    /// Run the generator on `frames`/`masks` (`[T, H, W, 3]`/`[T, H, W, 1]`)
    /// whose first `t_local` frames are the contiguous local window.
    pub fn forward<'g>(&self, p: &Bound<'g>, frames: Var<'g>, masks: Var<'g>, t_local: usize) -> Result<GeneratorOutput<'g>> {
        let fs = frames.shape();
        let ms = masks.shape();
        if fs.len() != 4 || fs[3] != 3 || ms.len() != 4 || ms[3] != 1 || fs[..3] != ms[..3] {
            return Err(Error::shape("generator", &fs, &ms));
        }
        let (t, h, w) = (fs[0], fs[1], fs[2]);
        if t_local == 0 || t_local > t {
            return Err(Error::InvalidArgument(format!("generator: {t_local} local frames out of {t}")));
        }
        if h % 4 != 0 || w % 4 != 0 {
            return Err(Error::invalid_shape("generator", format!("frame size {h}x{w} not divisible by 4")));
        }
        let ablation = self.cfg.ablation;
        let features = self.encode(p, frames, masks)?;
        let local = features.narrow(0, 0, t_local)?;

        let mut flows = None;
        let local = if ablation.disable_propagation {
            local
        } else {
            let masked = frames.mul(masks.mul_scalar(-1.0)?.add_scalar(1.0)?)?;
            let small = downsample_quarter(masked.narrow(0, 0, t_local)?)?;
            flows = estimate_bidirectional(p, &self.flow_net, small)?;
            let align = if ablation.disable_dcn {
                Alignment::FlowWarp
            } else {
                Alignment::Deformable
            };
            let bwd = propagate_backward(p, &self.backward_cell, local, flows.map(|f| f.forward), align, &mut |_| {})?;
            let fwd = propagate_forward(p, &self.forward_cell, local, flows.map(|f| f.backward), align, &mut |_| {})?;
            self.fusion.fuse(p, fwd, bwd)?
        };
        let features = if t_local < t {
            concat(&[local, features.narrow(0, t_local, t - t_local)?], 0)?
        } else {
            local
        };

        let hw = (h / 4, w / 4);
        let mut tokens = self.split.forward(p, features)?;
        let mut attention_scores = 0;
        for block in &self.blocks {
            let block = retarget(block, t);
            let (out, scores) = block.forward(p, tokens, hw, ablation.attention)?;
            tokens = out;
            attention_scores += scores;
        }
        let features = self.composite.forward(p, tokens, hw)?.add(features)?;
        Ok(GeneratorOutput {
            frames: self.decode(p, features)?,
            flows,
            attention_scores,
        })
    }

    /// Forward pass without gradient tracking; returns `[T, H, W, 3]`.
    pub fn infer(&self, frames: &Tensor, masks: &Tensor, t_local: usize) -> Result<Tensor> {
        let graph = Graph::new();
        let p = self.bind(&graph, false);
        let out = self.forward(&p, graph.constant(frames.clone()), graph.constant(masks.clone()), t_local)?;
        let frames = out.frames.value();
        Ok((*frames).clone())
    }
}

/// The temporal window always spans the whole clip, so a block built for one
/// clip length is reused for another by adjusting `s_t`.
fn retarget(block: &FocalBlock, frames: usize) -> FocalBlock {
    let mut b = block.clone();
    b.attn.window.t = frames;
    b
}
