//! Model hyperparameters, presets and ablation switches.

use std::fmt::Write as _;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::flowcomp::FlowNetConfig;
use crate::focal::{AttentionMode, FocalConfig, SplitGeom, WindowSpec};
use crate::geom::DeformSpec;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Preset {
    Paper,
    Desk,
}

impl FromStr for Preset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "paper" => Ok(Preset::Paper),
            "desk" => Ok(Preset::Desk),
            other => Err(Error::Config(format!("preset must be paper|desk, got {other:?}"))),
        }
    }
}

impl std::fmt::Display for Preset {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Preset::Paper => "paper",
            Preset::Desk => "desk",
        })
    }
}

/// Switches that remove or weaken parts of the model.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Ablation {
    /// Local features skip propagation and fusion entirely.
    pub disable_propagation: bool,
    /// The flow loss weight is treated as zero.
    pub disable_flow_loss: bool,
    /// The flow network receives no updates.
    pub freeze_flow: bool,
    /// Propagation aligns by flow warping only.
    pub disable_dcn: bool,
    pub attention: AttentionMode,
}

impl Default for Ablation {
    fn default() -> Self {
        Ablation {
            disable_propagation: false,
            disable_flow_loss: false,
            freeze_flow: false,
            disable_dcn: false,
            attention: AttentionMode::Focal,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub preset: Preset,
    /// Encoder/decoder channels `C`.
    pub channels: usize,
    /// Token width `C_e`.
    pub dim: usize,
    pub blocks: usize,
    pub heads: usize,
    pub deform_kernel: usize,
    pub deform_groups: usize,
    pub t_local: usize,
    pub t_nonlocal: usize,
    /// Spatial window extents `(s_h, s_w)`; the temporal extent always
    /// spans every frame of the clip.
    pub window_h: usize,
    pub window_w: usize,
    pub split_kernel: usize,
    pub split_stride: usize,
    pub split_pad: usize,
    /// Hidden channels of the F3N canvas.
    pub ffn_channels: usize,
    pub flow_levels: usize,
    pub flow_hidden: Vec<usize>,
    pub disc_channels: Vec<usize>,
    pub w_rec: f64,
    pub w_adv: f64,
    pub w_flow: f64,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    /// Iteration after which the learning rate is multiplied by 0.1; 0 disables.
    pub lr_drop_at: usize,
    pub height: usize,
    pub width: usize,
    pub sliding_window: usize,
    pub sample_rate: usize,
    pub ablation: Ablation,
}

impl ModelConfig {
    pub fn preset(preset: Preset) -> Self {
        match preset {
            Preset::Paper => Self::paper(),
            Preset::Desk => Self::desk(),
        }
    }

    pub fn paper() -> Self {
        ModelConfig {
            preset: Preset::Paper,
            channels: 128,
            dim: 512,
            blocks: 8,
            heads: 4,
            deform_kernel: 3,
            deform_groups: 16,
            t_local: 5,
            t_nonlocal: 3,
            window_h: 5,
            window_w: 9,
            split_kernel: 7,
            split_stride: 3,
            split_pad: 3,
            ffn_channels: 40,
            flow_levels: 3,
            flow_hidden: vec![32, 64, 32, 16],
            disc_channels: vec![64, 128, 256, 256],
            w_rec: 1.0,
            w_adv: 1e-2,
            w_flow: 1.0,
            lr: 1e-4,
            beta1: 0.0,
            beta2: 0.99,
            lr_drop_at: 400_000,
            height: 240,
            width: 432,
            sliding_window: 10,
            sample_rate: 10,
            ablation: Ablation::default(),
        }
    }

    pub fn desk() -> Self {
        ModelConfig {
            preset: Preset::Desk,
            channels: 16,
            dim: 32,
            blocks: 2,
            heads: 2,
            deform_kernel: 3,
            deform_groups: 2,
            t_local: 3,
            t_nonlocal: 2,
            window_h: 3,
            window_w: 3,
            split_kernel: 7,
            split_stride: 3,
            split_pad: 3,
            ffn_channels: 4,
            flow_levels: 3,
            flow_hidden: vec![16, 16, 16, 8],
            disc_channels: vec![8, 16, 16, 16],
            w_rec: 1.0,
            w_adv: 1e-2,
            w_flow: 1.0,
            lr: 1e-3,
            beta1: 0.0,
            beta2: 0.99,
            lr_drop_at: 0,
            height: 64,
            width: 64,
            sliding_window: 3,
            sample_rate: 3,
            ablation: Ablation::default(),
        }
    }

    pub fn deform_spec(&self) -> DeformSpec {
        DeformSpec {
            kernel: self.deform_kernel,
            groups: self.deform_groups,
        }
    }

    pub fn split_geom(&self) -> SplitGeom {
        SplitGeom {
            kernel: self.split_kernel,
            stride: self.split_stride,
            pad: self.split_pad,
        }
    }

    pub fn flow_net(&self) -> FlowNetConfig {
        FlowNetConfig {
            levels: self.flow_levels,
            hidden: self.flow_hidden.clone(),
        }
    }

    /// Transformer geometry for a clip of `frames` frames.
    pub fn focal(&self, frames: usize) -> FocalConfig {
        FocalConfig {
            dim: self.dim,
            heads: self.heads,
            window: WindowSpec {
                t: frames,
                h: self.window_h,
                w: self.window_w,
            },
            split: self.split_geom(),
            ffn_channels: self.ffn_channels,
        }
    }

    pub fn feature_hw(&self) -> (usize, usize) {
        (self.height / 4, self.width / 4)
    }

    /// Effective flow-loss weight after ablations.
    pub fn flow_weight(&self) -> f64 {
        if self.ablation.disable_flow_loss || self.ablation.disable_propagation {
            0.0
        } else {
            self.w_flow
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::Config(msg));
        if !self.height.is_multiple_of(4) || !self.width.is_multiple_of(4) || self.height == 0 || self.width == 0 {
            return fail(format!("frame size {}x{} must be a positive multiple of 4", self.height, self.width));
        }
        let (h, w) = self.feature_hw();
        let scale = 1usize << self.flow_levels.saturating_sub(1);
        if self.flow_levels == 0 || h % scale != 0 || w % scale != 0 {
            return fail(format!("feature size {h}x{w} not divisible by 2^(flow_levels-1) = {scale}"));
        }
        self.deform_spec().validate(self.channels).map_err(|e| Error::Config(e.to_string()))?;
        if self.heads == 0 || !self.dim.is_multiple_of(self.heads) {
            return fail(format!("dim {} not divisible by heads {}", self.dim, self.heads));
        }
        let (m, n) = self.split_geom().grid(h, w).map_err(|e| Error::Config(e.to_string()))?;
        if self.window_h == 0 || self.window_w == 0 || m % self.window_h != 0 || n % self.window_w != 0 {
            return fail(format!("token grid {m}x{n} not divisible by window {}x{}", self.window_h, self.window_w));
        }
        self.split_geom().overlap_count(h, w).map_err(|e| Error::Config(e.to_string()))?;
        if self.t_local == 0 || self.sliding_window == 0 || self.sample_rate == 0 {
            return fail("t_local, sliding_window and sample_rate must be positive".into());
        }
        if self.disc_channels.is_empty() {
            return fail("disc_channels must not be empty".into());
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) || !(self.lr > 0.0) {
            return fail("require 0 <= beta1, beta2 < 1 and lr > 0".into());
        }
        Ok(())
    }

    /// Every key with its current value, in a fixed order.
    pub fn entries(&self) -> Vec<(&'static str, String)> {
        let list = |v: &[usize]| v.iter().map(usize::to_string).collect::<Vec<_>>().join(",");
        let a = &self.ablation;
        vec![
            ("preset", self.preset.to_string()),
            ("channels", self.channels.to_string()),
            ("dim", self.dim.to_string()),
            ("blocks", self.blocks.to_string()),
            ("heads", self.heads.to_string()),
            ("deform_kernel", self.deform_kernel.to_string()),
            ("deform_groups", self.deform_groups.to_string()),
            ("t_local", self.t_local.to_string()),
            ("t_nonlocal", self.t_nonlocal.to_string()),
            ("window_h", self.window_h.to_string()),
            ("window_w", self.window_w.to_string()),
            ("split_kernel", self.split_kernel.to_string()),
            ("split_stride", self.split_stride.to_string()),
            ("split_pad", self.split_pad.to_string()),
            ("ffn_channels", self.ffn_channels.to_string()),
            ("flow_levels", self.flow_levels.to_string()),
            ("flow_hidden", list(&self.flow_hidden)),
            ("disc_channels", list(&self.disc_channels)),
            ("w_rec", self.w_rec.to_string()),
            ("w_adv", self.w_adv.to_string()),
            ("w_flow", self.w_flow.to_string()),
            ("lr", self.lr.to_string()),
            ("beta1", self.beta1.to_string()),
            ("beta2", self.beta2.to_string()),
            ("lr_drop_at", self.lr_drop_at.to_string()),
            ("height", self.height.to_string()),
            ("width", self.width.to_string()),
            ("sliding_window", self.sliding_window.to_string()),
            ("sample_rate", self.sample_rate.to_string()),
            ("disable_propagation", a.disable_propagation.to_string()),
            ("disable_flow_loss", a.disable_flow_loss.to_string()),
            ("freeze_flow", a.freeze_flow.to_string()),
            ("disable_dcn", a.disable_dcn.to_string()),
            ("attention", a.attention.to_string()),
        ]
    }

    /// Set one key. Returns `Ok(false)` if the key is not a model key.
    pub fn set(&mut self, key: &str, value: &str) -> Result<bool> {
        fn parse<T: FromStr>(key: &str, value: &str) -> Result<T> {
            value
                .trim()
                .parse()
                .map_err(|_| Error::Config(format!("invalid value {value:?} for {key}")))
        }
        fn list(key: &str, value: &str) -> Result<Vec<usize>> {
            value.split(',').map(|v| parse(key, v)).collect()
        }
        match key {
            "preset" => self.preset = value.trim().parse()?,
            "channels" => self.channels = parse(key, value)?,
            "dim" => self.dim = parse(key, value)?,
            "blocks" => self.blocks = parse(key, value)?,
            "heads" => self.heads = parse(key, value)?,
            "deform_kernel" => self.deform_kernel = parse(key, value)?,
            "deform_groups" => self.deform_groups = parse(key, value)?,
            "t_local" => self.t_local = parse(key, value)?,
            "t_nonlocal" => self.t_nonlocal = parse(key, value)?,
            "window_h" => self.window_h = parse(key, value)?,
            "window_w" => self.window_w = parse(key, value)?,
            "split_kernel" => self.split_kernel = parse(key, value)?,
            "split_stride" => self.split_stride = parse(key, value)?,
            "split_pad" => self.split_pad = parse(key, value)?,
            "ffn_channels" => self.ffn_channels = parse(key, value)?,
            "flow_levels" => self.flow_levels = parse(key, value)?,
            "flow_hidden" => self.flow_hidden = list(key, value)?,
            "disc_channels" => self.disc_channels = list(key, value)?,
            "w_rec" => self.w_rec = parse(key, value)?,
            "w_adv" => self.w_adv = parse(key, value)?,
            "w_flow" => self.w_flow = parse(key, value)?,
            "lr" => self.lr = parse(key, value)?,
            "beta1" => self.beta1 = parse(key, value)?,
            "beta2" => self.beta2 = parse(key, value)?,
            "lr_drop_at" => self.lr_drop_at = parse(key, value)?,
            "height" => self.height = parse(key, value)?,
            "width" => self.width = parse(key, value)?,
            "sliding_window" => self.sliding_window = parse(key, value)?,
            "sample_rate" => self.sample_rate = parse(key, value)?,
            "disable_propagation" => self.ablation.disable_propagation = parse(key, value)?,
            "disable_flow_loss" => self.ablation.disable_flow_loss = parse(key, value)?,
            "freeze_flow" => self.ablation.freeze_flow = parse(key, value)?,
            "disable_dcn" => self.ablation.disable_dcn = parse(key, value)?,
            "attention" => self.ablation.attention = value.trim().parse()?,
            _ => return Ok(false),
        }
        Ok(true)
    }

    /// `key=value` lines, one per key.
    pub fn echo(&self) -> String {
        let mut s = String::new();
        for (k, v) in self.entries() {
            let _ = writeln!(s, "{k}={v}");
        }
        s
    }
}
