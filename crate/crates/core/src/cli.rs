//! Run configuration and the command implementations behind the binary.

use std::fmt::Write as _;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::data::{encode_ppm, read_dataset, render_scene, write_dataset, GenSpec, MaskMode, SceneRecord, SceneSpec};
use crate::error::{Error, Result};
use crate::metrics::{EvalReport, VideoMetrics};
use crate::model::{
    flow_endpoint_error, flow_warmup_step, load_generator, sample_batch, sliding_window_inference, Adam, Batch, Checkpoint,
    Generator, ModelConfig, Preset, StepRecord, Trainer, LOG_HEADER,
};
use crate::tensor::Tensor;
use crate::verify::{run_suite, CheckResult, SuiteOptions};

/// Everything a command needs: the model configuration plus paths, seeds
/// and schedule. Parsed from flat `key = value` text.
#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub seed: u64,
    /// Training dataset, also the target of `gen`.
    pub data_dir: PathBuf,
    /// Held-out dataset used by `eval` and `infer`.
    pub eval_dir: PathBuf,
    pub checkpoint: PathBuf,
    pub log: PathBuf,
    pub report: PathBuf,
    pub infer_dir: PathBuf,
    pub iterations: usize,
    /// Write a checkpoint every this many iterations; 0 only at the end.
    pub checkpoint_every: usize,
    /// Continue from `checkpoint` if it exists.
    pub resume: bool,
    /// Supervised flow-network steps on fresh clean clips before training.
    pub flow_warmup: usize,
    /// Mask regime used by `eval` and `infer`.
    pub mask: MaskMode,
    pub scenes: usize,
    pub frames: usize,
    pub max_speed: usize,
    pub fractional: bool,
}

/// Run-level keys, in echo order.
pub const RUN_KEYS: &[&str] = &[
    "seed",
    "data_dir",
    "eval_dir",
    "checkpoint",
    "log",
    "report",
    "infer_dir",
    "iterations",
    "checkpoint_every",
    "resume",
    "flow_warmup",
    "mask",
    "scenes",
    "frames",
    "max_speed",
    "fractional",
];

impl RunConfig {
    pub fn defaults(preset: Preset) -> Self {
        RunConfig {
            model: ModelConfig::preset(preset),
            seed: 0,
            data_dir: "data/train".into(),
            eval_dir: "data/eval".into(),
            checkpoint: "run/model.fvip".into(),
            log: "run/train.log".into(),
            report: "run/report.txt".into(),
            infer_dir: "run/infer".into(),
            iterations: 200,
            checkpoint_every: 100,
            resume: false,
            flow_warmup: 2000,
            mask: MaskMode::Stationary,
            scenes: 8,
            frames: 12,
            max_speed: 4,
            fractional: false,
        }
    }

    /// Build from config-file text followed by `overrides`; later entries
    /// win. The preset is resolved first so that other keys refine it.
    pub fn resolve(text: Option<&str>, overrides: &[(String, String)]) -> Result<Self> {
        let mut pairs = match text {
            Some(t) => parse_pairs(t)?,
            None => Vec::new(),
        };
        pairs.extend(overrides.iter().cloned());
        let preset = match pairs.iter().rev().find(|(k, _)| k == "preset") {
            Some((_, v)) => v.parse()?,
            None => Preset::Desk,
        };
        let mut cfg = RunConfig::defaults(preset);
        for (k, v) in &pairs {
            if k != "preset" {
                cfg.set(k, v)?;
            }
        }
        cfg.model.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path, overrides: &[(String, String)]) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::resolve(Some(&text), overrides)
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        if self.model.set(key, value)? {
            return Ok(());
        }
        fn parse<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
            value.parse().map_err(|_| Error::Config(format!("invalid value {value:?} for {key}")))
        }
        match key {
            "seed" => self.seed = parse(key, value)?,
            "data_dir" => self.data_dir = value.into(),
            "eval_dir" => self.eval_dir = value.into(),
            "checkpoint" => self.checkpoint = value.into(),
            "log" => self.log = value.into(),
            "report" => self.report = value.into(),
            "infer_dir" => self.infer_dir = value.into(),
            "iterations" => self.iterations = parse(key, value)?,
            "checkpoint_every" => self.checkpoint_every = parse(key, value)?,
            "resume" => self.resume = parse(key, value)?,
            "flow_warmup" => self.flow_warmup = parse(key, value)?,
            "mask" => self.mask = value.parse()?,
            "scenes" => self.scenes = parse(key, value)?,
            "frames" => self.frames = parse(key, value)?,
            "max_speed" => self.max_speed = parse(key, value)?,
            "fractional" => self.fractional = parse(key, value)?,
            _ => return Err(Error::Config(format!("unknown key {key:?}"))),
        }
        Ok(())
    }

    fn run_value(&self, key: &str) -> String {
        let path = |p: &Path| p.display().to_string();
        match key {
            "seed" => self.seed.to_string(),
            "data_dir" => path(&self.data_dir),
            "eval_dir" => path(&self.eval_dir),
            "checkpoint" => path(&self.checkpoint),
            "log" => path(&self.log),
            "report" => path(&self.report),
            "infer_dir" => path(&self.infer_dir),
            "iterations" => self.iterations.to_string(),
            "checkpoint_every" => self.checkpoint_every.to_string(),
            "resume" => self.resume.to_string(),
            "flow_warmup" => self.flow_warmup.to_string(),
            "mask" => match self.mask {
                MaskMode::Stationary => "stationary".into(),
                MaskMode::ObjectLike => "object".into(),
            },
            "scenes" => self.scenes.to_string(),
            "frames" => self.frames.to_string(),
            "max_speed" => self.max_speed.to_string(),
            "fractional" => self.fractional.to_string(),
            _ => unreachable!("not a run key: {key}"),
        }
    }

    /// Every resolved key as `key=value`, one per line. Parsing the echo
    /// yields the same configuration.
    pub fn echo(&self) -> String {
        let mut s = self.model.echo();
        for k in RUN_KEYS {
            let _ = writeln!(s, "{k}={}", self.run_value(k));
        }
        s
    }

    pub fn gen_spec(&self) -> GenSpec {
        GenSpec {
            scenes: self.scenes,
            frames: self.frames,
            height: self.model.height,
            width: self.model.width,
            max_speed: self.max_speed,
            fractional: self.fractional,
            seed: self.seed,
        }
    }
}

/// `key = value` lines; `#` starts a comment, blank lines are skipped.
pub fn parse_pairs(text: &str) -> Result<Vec<(String, String)>> {
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("line {}: expected key=value, got {raw:?}", i + 1)))?;
        out.push((k.trim().to_string(), v.trim().to_string()));
    }
    Ok(out)
}

/// Process exit status for an error.
pub fn exit_code(err: &Error) -> i32 {
    match err {
        Error::Config(_) => 2,
        Error::Data(_) | Error::Checkpoint(_) => 3,
        Error::NonFinite(_) => 4,
        _ => 1,
    }
}

/// Exit status when the property suite reports a failure.
pub const EXIT_VERIFY_FAILED: i32 = 5;

/// Independent RNG per (stream, index), so a resumed run draws exactly
/// what an uninterrupted one would.
pub fn stream_rng(seed: u64, stream: u64, index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng.set_word_pos(index as u128 * 1024);
    rng
}

const STREAM_TRAIN: u64 = 1;
const STREAM_WARMUP: u64 = 2;

pub fn cmd_gen(cfg: &RunConfig) -> Result<Vec<PathBuf>> {
    write_dataset(&cfg.data_dir, &cfg.gen_spec())
}

fn load_scenes(dir: &Path) -> Result<Vec<SceneRecord>> {
    let scenes = read_dataset(dir)?;
    if scenes.is_empty() {
        return Err(Error::Data(format!("{}: dataset has no scenes", dir.display())));
    }
    Ok(scenes)
}

fn ensure_parent(path: &Path) -> Result<()> {
    match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => std::fs::create_dir_all(p).map_err(|e| Error::io(p, e)),
        _ => Ok(()),
    }
}

fn append(path: &Path, text: &str) -> Result<()> {
    ensure_parent(path)?;
    let mut f = std::fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .map_err(|e| Error::io(path, e))?;
    f.write_all(text.as_bytes()).map_err(|e| Error::io(path, e))
}

/// Frames per warm-up clip.
pub const WARMUP_CLIP: usize = 4;

/// Pretrain the flow network with ground-truth flow on freshly rendered
/// clean clips, drawn from their own seed stream so that neither the
/// training nor the held-out scenes are seen. Stands in for loading a
/// pretrained estimator.
pub fn warm_up_flow(trainer: &mut Trainer, cfg: &RunConfig) -> Result<f64> {
    if trainer.cfg().ablation.disable_propagation {
        return Ok(0.0);
    }
    let model = trainer.cfg().clone();
    let mut opt = Adam::new(&trainer.gen.store, model.lr, 0.9, 0.999, 0);
    let mut last = 0.0;
    for i in 0..cfg.flow_warmup {
        let mut rng = stream_rng(cfg.seed, STREAM_WARMUP, i);
        let spec = SceneSpec::random(rng.gen(), WARMUP_CLIP, model.height, model.width, cfg.max_speed, cfg.fractional);
        let scene = render_scene(&spec)?;
        let batch = Batch {
            masks: Tensor::zeros(&[WARMUP_CLIP, model.height, model.width, 1]),
            gt_flows: Some(scene.flows),
            t_local: WARMUP_CLIP,
            video: scene.video,
        };
        last = flow_warmup_step(&mut trainer.gen, &mut opt, &batch)?;
    }
    Ok(last)
}

/// Train `trainer` up to `cfg.iterations` total iterations on `scenes`,
/// calling `on_step` after each one.
pub fn train_loop(
    trainer: &mut Trainer,
    scenes: &[SceneRecord],
    cfg: &RunConfig,
    mut on_step: impl FnMut(&Trainer, &StepRecord) -> Result<()>,
) -> Result<()> {
    while trainer.iteration < cfg.iterations {
        let mut rng = stream_rng(cfg.seed, STREAM_TRAIN, trainer.iteration);
        let scene = &scenes[rng.gen_range(0..scenes.len())].scene;
        let batch = sample_batch(scene, &trainer.gen.cfg, &mut rng)?;
        let rec = trainer.step(&batch)?;
        on_step(trainer, &rec)?;
    }
    Ok(())
}

/// Fresh trainer for `cfg`: seeded initialisation plus flow warm-up.
pub fn fresh_trainer(cfg: &RunConfig) -> Result<Trainer> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut trainer = Trainer::new(&cfg.model, &mut rng)?;
    warm_up_flow(&mut trainer, cfg)?;
    Ok(trainer)
}

pub fn cmd_train(cfg: &RunConfig) -> Result<Trainer> {
    let scenes = load_scenes(&cfg.data_dir)?;
    let echo = cfg.echo();
    let mut trainer = if cfg.resume && cfg.checkpoint.exists() {
        Trainer::from_checkpoint(&cfg.model, &Checkpoint::load(&cfg.checkpoint)?)?
    } else {
        if cfg.log.exists() {
            std::fs::remove_file(&cfg.log).map_err(|e| Error::io(&cfg.log, e))?;
        }
        let t = fresh_trainer(cfg)?;
        append(&cfg.log, &format!("{LOG_HEADER}\n"))?;
        t
    };
    ensure_parent(&cfg.checkpoint)?;
    train_loop(&mut trainer, &scenes, cfg, |t, rec| {
        append(&cfg.log, &format!("{}\n", rec.log_line()))?;
        let due = cfg.checkpoint_every > 0 && t.iteration % cfg.checkpoint_every == 0;
        if due || t.iteration == cfg.iterations {
            t.to_checkpoint(&echo).save(&cfg.checkpoint)?;
        }
        if t.iteration % 10 == 0 || t.iteration == cfg.iterations {
            eprintln!("iter {} L_rec {:.5} L_adv {:.5} L_flow {:.5} L_D {:.5}", rec.iteration, rec.rec, rec.adv, rec.flow, rec.disc);
        }
        Ok(())
    })?;
    if trainer.iteration == 0 || !cfg.checkpoint.exists() {
        trainer.to_checkpoint(&echo).save(&cfg.checkpoint)?;
    }
    Ok(trainer)
}

fn masks_of(rec: &SceneRecord, mode: MaskMode) -> &crate::tensor::Tensor {
    match mode {
        MaskMode::Stationary => &rec.stationary,
        MaskMode::ObjectLike => &rec.object,
    }
}

/// Composited sliding-window output of every scene, scored against the
/// clean frames; also returns the flow network's mean endpoint error.
pub fn evaluate(gen: &Generator, scenes: &[SceneRecord], mode: MaskMode, label: &str) -> Result<(EvalReport, f64)> {
    let mut videos = Vec::new();
    let mut epe = 0.0;
    for rec in scenes {
        let masks = masks_of(rec, mode);
        let out = sliding_window_inference(gen, &rec.scene.video, masks)?;
        videos.push(VideoMetrics::compute(&rec.name, &out, &rec.scene.video, &rec.scene.flows_full)?);
        epe += flow_endpoint_error(gen, &rec.scene.video, masks, &rec.scene.flows)?;
    }
    let n = scenes.len().max(1) as f64;
    Ok((
        EvalReport {
            label: label.to_string(),
            videos,
        },
        epe / n,
    ))
}

/// Reference scores of the corrupted input itself, holes filled with zeros.
pub fn baseline_report(scenes: &[SceneRecord], mode: MaskMode) -> Result<EvalReport> {
    let mut videos = Vec::new();
    for rec in scenes {
        let masks = masks_of(rec, mode);
        let video = &rec.scene.video;
        let c = video.shape()[3];
        let filled = crate::tensor::Tensor::from_fn(video.shape(), |i| {
            if masks.data()[i / c] > 0.5 {
                0.0
            } else {
                video.data()[i]
            }
        });
        videos.push(VideoMetrics::compute(&rec.name, &filled, video, &rec.scene.flows_full)?);
    }
    Ok(EvalReport {
        label: "copy-input".into(),
        videos,
    })
}

/// Result of `eval`.
#[derive(Clone, Debug, PartialEq)]
pub struct EvalOutcome {
    pub model: EvalReport,
    pub baseline: EvalReport,
    pub flow_epe: f64,
    /// Text appended to the report file.
    pub text: String,
}

pub fn cmd_eval(cfg: &RunConfig) -> Result<EvalOutcome> {
    if !cfg.checkpoint.exists() {
        return Err(Error::Data(format!("checkpoint {} not found", cfg.checkpoint.display())));
    }
    let gen = load_generator(&cfg.model, &Checkpoint::load(&cfg.checkpoint)?)?;
    let scenes = load_scenes(&cfg.eval_dir)?;
    let (model, flow_epe) = evaluate(&gen, &scenes, cfg.mask, "model")?;
    let baseline = baseline_report(&scenes, cfg.mask)?;
    let mut text = String::from("## eval\n");
    for line in cfg.echo().lines() {
        let _ = writeln!(text, "# {line}");
    }
    text.push_str(&model.table());
    text.push_str(&baseline.table());
    text.push_str(&model.records());
    text.push_str(&baseline.records());
    let _ = writeln!(text, "label=model flow_epe={flow_epe:.6}");
    append(&cfg.report, &text)?;
    Ok(EvalOutcome {
        model,
        baseline,
        flow_epe,
        text,
    })
}

/// Inpaint every held-out scene and write the frames as PPM files.
pub fn cmd_infer(cfg: &RunConfig) -> Result<Vec<PathBuf>> {
    if !cfg.checkpoint.exists() {
        return Err(Error::Data(format!("checkpoint {} not found", cfg.checkpoint.display())));
    }
    let gen = load_generator(&cfg.model, &Checkpoint::load(&cfg.checkpoint)?)?;
    let mut dirs = Vec::new();
    for rec in load_scenes(&cfg.eval_dir)? {
        let out = sliding_window_inference(&gen, &rec.scene.video, masks_of(&rec, cfg.mask))?;
        let dir = cfg.infer_dir.join(&rec.name);
        std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        for f in 0..out.shape()[0] {
            let path = dir.join(format!("frame_{f:03}.ppm"));
            std::fs::write(&path, encode_ppm(&out.index0(f))?).map_err(|e| Error::io(&path, e))?;
        }
        dirs.push(dir);
    }
    Ok(dirs)
}

/// Run the property suite and return every check.
pub fn cmd_verify(cfg: &RunConfig, options: &SuiteOptions) -> Vec<CheckResult> {
    run_suite(cfg.seed, options)
}
