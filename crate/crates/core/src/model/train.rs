//! Alternating discriminator / generator updates and trainer state.

use rand::seq::index::sample;
use rand::Rng;

use crate::data::{make_masks, MaskMode, MaskSpec, Scene};
use crate::error::{Error, Result};
use crate::flowcomp::{downsample_quarter, estimate_bidirectional, flow_loss, BidirectionalFlows, FlowVars};
use crate::nn::{ParamGroup, ParamStore};
use crate::tensor::{Graph, Tensor};

use super::checkpoint::Checkpoint;
use super::config::ModelConfig;
use super::discriminator::Discriminator;
use super::generator::Generator;
use super::loss::{discriminator_loss, generator_loss};
use super::optim::Adam;

/// One training clip: the first `t_local` frames are contiguous.
#[derive(Clone, Debug)]
pub struct Batch {
    /// Uncorrupted frames `[T, H, W, 3]`, also the reconstruction target.
    pub video: Tensor,
    pub masks: Tensor,
    /// Ground-truth flows between adjacent local frames.
    pub gt_flows: Option<BidirectionalFlows>,
    pub t_local: usize,
}

/// Loss components of one step.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepRecord {
    pub iteration: usize,
    pub rec: f64,
    pub adv: f64,
    pub flow: f64,
    pub disc: f64,
    pub total: f64,
}

impl StepRecord {
    pub fn log_line(&self) -> String {
        format!(
            "{} {:.9e} {:.9e} {:.9e} {:.9e}",
            self.iteration, self.rec, self.adv, self.flow, self.disc
        )
    }
}

pub const LOG_HEADER: &str = "# iteration L_rec L_adv L_flow L_D";

#[derive(Clone, Debug)]
pub struct Trainer {
    pub gen: Generator,
    pub disc: Discriminator,
    pub opt_g: Adam,
    pub opt_d: Adam,
    pub iteration: usize,
}

impl Trainer {
    pub fn new<R: Rng + ?Sized>(cfg: &ModelConfig, rng: &mut R) -> Result<Self> {
        let gen = Generator::new(cfg, rng)?;
        let disc = Discriminator::new(&cfg.disc_channels, rng);
        let opt_g = Adam::new(&gen.store, cfg.lr, cfg.beta1, cfg.beta2, cfg.lr_drop_at);
        let opt_d = Adam::new(&disc.store, cfg.lr, cfg.beta1, cfg.beta2, cfg.lr_drop_at);
        Ok(Trainer {
            gen,
            disc,
            opt_g,
            opt_d,
            iteration: 0,
        })
    }

    pub fn cfg(&self) -> &ModelConfig {
        &self.gen.cfg
    }

    /// One discriminator update on (target, detached output) followed by one
    /// generator update through the updated discriminator.
    pub fn step(&mut self, batch: &Batch) -> Result<StepRecord> {
        let cfg = self.gen.cfg.clone();
        let gg = Graph::new();
        let gp = self.gen.bind(&gg, true);
        let video = gg.constant(batch.video.clone());
        let out = self.gen.forward(&gp, video, gg.constant(batch.masks.clone()), batch.t_local)?;
        let fake = (*out.frames.value()).clone();

        let gd = Graph::new();
        let dp = self.disc.bind(&gd, true);
        let d_real = self.disc.forward(&dp, gd.constant(batch.video.clone()))?;
        let d_fake = self.disc.forward(&dp, gd.constant(fake))?;
        let l_d = discriminator_loss(d_real, d_fake)?;
        let disc_value = l_d.value().item()?;
        gd.backward(l_d)?;
        self.opt_d.update(&mut self.disc.store, &dp.grads())?;

        let d_gen = if cfg.w_adv != 0.0 {
            let frozen = self.disc.bind(&gg, false);
            Some(self.disc.forward(&frozen, out.frames)?)
        } else {
            None
        };
        let gt = batch.gt_flows.as_ref().and_then(|f| FlowVars::constant(&gg, f));
        let flows = out.flows.zip(gt);
        let w_flow = if cfg.ablation.freeze_flow { 0.0 } else { cfg.flow_weight() };
        let loss = generator_loss(out.frames, video, flows, d_gen, (cfg.w_rec, cfg.w_adv, w_flow))?;
        let total = loss.total.value().item()?;
        if !total.is_finite() {
            return Err(Error::NonFinite(format!("generator loss at iteration {}", self.iteration + 1)));
        }
        gg.backward(loss.total)?;
        self.opt_g.update(&mut self.gen.store, &gp.grads())?;
        self.iteration += 1;
        Ok(StepRecord {
            iteration: self.iteration,
            rec: loss.rec,
            adv: loss.adv,
            flow: loss.flow,
            disc: disc_value,
            total,
        })
    }

    pub fn to_checkpoint(&self, echo: &str) -> Checkpoint {
        let mut ck = Checkpoint::new(echo);
        ck.push("iteration", Tensor::scalar(self.iteration as f64));
        push_store(&mut ck, "g", &self.gen.store, &self.opt_g);
        push_store(&mut ck, "d", &self.disc.store, &self.opt_d);
        ck
    }

    /// Rebuild from a checkpoint written by [`to_checkpoint`](Self::to_checkpoint)
    /// for the same model configuration.
    pub fn from_checkpoint(cfg: &ModelConfig, ck: &Checkpoint) -> Result<Self> {
        let mut rng = rand::rngs::mock::StepRng::new(0, 0);
        let mut t = Trainer::new(cfg, &mut rng)?;
        t.iteration = ck.require("iteration")?.item()? as usize;
        load_store(ck, "g", &mut t.gen.store, &mut t.opt_g)?;
        load_store(ck, "d", &mut t.disc.store, &mut t.opt_d)?;
        Ok(t)
    }
}

fn push_store(ck: &mut Checkpoint, prefix: &str, store: &ParamStore, opt: &Adam) {
    ck.push(format!("{prefix}.adam.step"), Tensor::scalar(opt.step as f64));
    for (i, p) in store.iter().enumerate() {
        ck.push(format!("{prefix}.{}", p.name), p.value.clone());
        ck.push(format!("{prefix}.adam.m.{}", p.name), opt.m[i].clone());
        ck.push(format!("{prefix}.adam.v.{}", p.name), opt.v[i].clone());
    }
}

fn load_store(ck: &Checkpoint, prefix: &str, store: &mut ParamStore, opt: &mut Adam) -> Result<()> {
    opt.step = ck.require(&format!("{prefix}.adam.step"))?.item()? as usize;
    for (i, p) in store.iter_mut().enumerate() {
        let shape = p.value.shape().to_vec();
        let fetch = |name: String| -> Result<Tensor> {
            let t = ck.require(&name)?;
            if t.shape() != shape {
                return Err(Error::Checkpoint(format!(
                    "{name}: stored shape {:?}, model expects {shape:?}",
                    t.shape()
                )));
            }
            Ok(t.clone())
        };
        let value = fetch(format!("{prefix}.{}", p.name))?;
        opt.m[i] = fetch(format!("{prefix}.adam.m.{}", p.name))?;
        opt.v[i] = fetch(format!("{prefix}.adam.v.{}", p.name))?;
        p.value = value;
    }
    Ok(())
}

/// Load only the generator weights from a trainer checkpoint.
pub fn load_generator(cfg: &ModelConfig, ck: &Checkpoint) -> Result<Generator> {
    let mut rng = rand::rngs::mock::StepRng::new(0, 0);
    let mut gen = Generator::new(cfg, &mut rng)?;
    for p in gen.store.iter_mut() {
        let name = format!("g.{}", p.name);
        let t = ck.require(&name)?;
        if t.shape() != p.value.shape() {
            return Err(Error::Checkpoint(format!("{name}: shape {:?} != {:?}", t.shape(), p.value.shape())));
        }
        p.value = t.clone();
    }
    Ok(gen)
}

/// Draw a training clip: a random contiguous local window, randomly chosen
/// non-local frames from outside it, and fresh random masks.
pub fn sample_batch<R: Rng + ?Sized>(scene: &Scene, cfg: &ModelConfig, rng: &mut R) -> Result<Batch> {
    let t = scene.frames();
    let t_local = cfg.t_local.min(t);
    let start = rng.gen_range(0..=t - t_local);
    let outside: Vec<usize> = (0..t).filter(|&i| i < start || i >= start + t_local).collect();
    let t_nl = cfg.t_nonlocal.min(outside.len());
    let mut nonlocal: Vec<usize> = sample(rng, outside.len(), t_nl).into_iter().map(|i| outside[i]).collect();
    nonlocal.sort_unstable();
    let order: Vec<usize> = (start..start + t_local).chain(nonlocal).collect();
    let video = gather(&scene.video, &order)?;
    let mode = if rng.gen_bool(0.5) {
        MaskMode::Stationary
    } else {
        MaskMode::ObjectLike
    };
    let spec = MaskSpec { mode, seed: rng.gen() };
    let (h, w) = (scene.video.shape()[1], scene.video.shape()[2]);
    let masks = make_masks(&spec, order.len(), h, w)?;
    Ok(Batch {
        video,
        masks,
        gt_flows: Some(scene.flows.window(start, t_local)),
        t_local,
    })
}

/// Stack frames `index` of a `[T, ...]` tensor.
pub fn gather(x: &Tensor, index: &[usize]) -> Result<Tensor> {
    let frames: Vec<Tensor> = index.iter().map(|&i| x.index0(i)).collect();
    Tensor::stack(&frames)
}

/// Fit only the flow network to ground truth on clean frames; used to give
/// a frozen flow module a sensible starting point.
pub fn flow_warmup_step(gen: &mut Generator, opt: &mut Adam, batch: &Batch) -> Result<f64> {
    let Some(gt) = &batch.gt_flows else {
        return Err(Error::InvalidArgument("flow warm-up needs ground-truth flows".into()));
    };
    let g = Graph::new();
    let p = gen.store.bind(&g, |grp| grp == ParamGroup::FlowComp);
    let local = g.constant(batch.video.narrow0(0, batch.t_local));
    let Some(pred) = estimate_bidirectional(&p, &gen.flow_net, downsample_quarter(local)?)? else {
        return Ok(0.0);
    };
    let gt = FlowVars::constant(&g, gt).expect("pairs > 0");
    let loss = flow_loss(pred, gt)?;
    let value = loss.value().item()?;
    g.backward(loss)?;
    opt.update(&mut gen.store, &p.grads())?;
    Ok(value)
}
