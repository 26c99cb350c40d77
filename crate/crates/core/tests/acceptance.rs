//! Acceptance criteria, one `PASS`/`FAIL` line each.
//!
//! The training criteria (4 and 5) take tens of minutes on one core and are
//! ignored by default:
//!
//! ```text
//! cargo test -p flowvip --test acceptance -- --include-ignored --nocapture
//! ```

use std::path::Path;
use std::time::{Duration, Instant};

use flowvip::cli::{cmd_eval, cmd_gen, cmd_train, evaluate, fresh_trainer, train_loop, RunConfig};
use flowvip::data::{read_dataset, render_scene, MaskMode, SceneRecord, SceneSpec};
use flowvip::flowcomp::{downsample_quarter, estimate_bidirectional};
use flowvip::model::{load_generator, sample_batch, Checkpoint, Trainer};
use flowvip::nn::ParamGroup;
use flowvip::verify::{gradient_checks, metric_checks, oracle_checks, roundtrip_checks, CheckResult, SuiteOptions};
use flowvip::{Graph, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

const ORACLE_BUDGET: Duration = Duration::from_secs(120);
const GRADCHECK_BUDGET: Duration = Duration::from_secs(300);
const TRAIN_BUDGET: Duration = Duration::from_secs(30 * 60);
const TRAIN_ITERATIONS: usize = 2000;
const TRAIN_SCENES: usize = 32;
const EVAL_SCENES: usize = 8;
const PSNR_MARGIN_DB: f64 = 3.0;
const EPE_RATIO: f64 = 0.5;
const FOCAL_GAP_DB: f64 = 0.3;
const ABLATION_SEEDS: [u64; 3] = [11, 12, 13];
const ABLATION_ITERATIONS: usize = 300;

fn line(id: u32, name: &str, passed: bool, detail: &str) -> bool {
    println!("{} criterion {id} ({name}): {detail}", if passed { "PASS" } else { "FAIL" });
    passed
}

fn suite(id: u32, name: &str, results: &[CheckResult], elapsed: Duration, budget: Option<Duration>) -> bool {
    let failed: Vec<&CheckResult> = results.iter().filter(|r| !r.passed).collect();
    for r in &failed {
        println!("  {r}");
    }
    line(
        id,
        name,
        failed.is_empty() && budget.is_none_or(|b| elapsed <= b),
        &format!(
            "{}/{} properties, {:.1} s{}",
            results.len() - failed.len(),
            results.len(),
            elapsed.as_secs_f64(),
            budget.map_or(String::new(), |b| format!(" (budget {} s)", b.as_secs()))
        ),
    )
}

fn timed<T>(f: impl FnOnce() -> T) -> (T, Duration) {
    let start = Instant::now();
    let out = f();
    (out, start.elapsed())
}

fn config(root: &Path, pairs: &[(&str, String)]) -> RunConfig {
    let p = |name: &str| root.join(name).display().to_string();
    let mut all: Vec<(String, String)> = [
        ("preset", "desk".to_string()),
        ("data_dir", p("data/train")),
        ("eval_dir", p("data/eval")),
        ("checkpoint", p("run/model.fvip")),
        ("log", p("run/train.log")),
        ("report", p("run/report.txt")),
        ("infer_dir", p("run/infer")),
    ]
    .into_iter()
    .map(|(k, v)| (k.to_string(), v))
    .collect();
    all.extend(pairs.iter().map(|(k, v)| (k.to_string(), v.clone())));
    RunConfig::resolve(None, &all).unwrap()
}

/// Training scenes from `seed`, held-out scenes from an unrelated seed.
fn datasets(root: &Path, seed: u64) -> (Vec<SceneRecord>, Vec<SceneRecord>) {
    let train = config(root, &[("seed", seed.to_string()), ("scenes", TRAIN_SCENES.to_string())]);
    cmd_gen(&train).unwrap();
    let mut eval = config(root, &[("seed", (seed ^ 0xe7a1).to_string()), ("scenes", EVAL_SCENES.to_string())]);
    eval.data_dir = eval.eval_dir.clone();
    cmd_gen(&eval).unwrap();
    (read_dataset(&train.data_dir).unwrap(), read_dataset(&train.eval_dir).unwrap())
}

fn one_step_changes_every_group() -> bool {
    let cfg = RunConfig::resolve(None, &[]).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let mut trainer = Trainer::new(&cfg.model, &mut rng).unwrap();
    let scene = render_scene(&SceneSpec::random(21, 6, 64, 64, 4, false)).unwrap();
    let batch = sample_batch(&scene, &cfg.model, &mut rng).unwrap();
    let before = trainer.gen.store.clone();
    trainer.step(&batch).unwrap();
    let mut ok = true;
    let mut detail = Vec::new();
    for group in ParamGroup::GENERATOR {
        let (mut changed, mut total) = (0, 0);
        for (a, b) in before.iter().zip(trainer.gen.store.iter()).filter(|(a, _)| a.group == group) {
            total += 1;
            changed += (a.value.max_abs_diff(&b.value) > 0.0) as usize;
        }
        ok &= changed > 0;
        detail.push(format!("{group:?} {changed}/{total}"));
    }
    line(3, "one step updates all trainable groups", ok, &detail.join(", "))
}

fn fixed_seed_is_reproducible() -> bool {
    let logs: Vec<Vec<u8>> = (0..2)
        .map(|_| {
            let dir = tempfile::tempdir().unwrap();
            let small = |seed: u64| {
                config(
                    dir.path(),
                    &[
                        ("seed", seed.to_string()),
                        ("scenes", "2".into()),
                        ("frames", "5".into()),
                        ("iterations", "6".into()),
                        ("flow_warmup", "4".into()),
                    ],
                )
            };
            let cfg = small(5);
            cmd_gen(&cfg).unwrap();
            cmd_train(&cfg).unwrap();
            std::fs::read(&cfg.log).unwrap()
        })
        .collect();
    let same_log = logs[0] == logs[1];
    let roundtrip = roundtrip_checks(5);
    let bit_exact = roundtrip.iter().all(|r| r.passed);
    for r in &roundtrip {
        println!("  {r}");
    }
    line(
        7,
        "determinism and checkpoint round trip",
        same_log && bit_exact,
        &format!("identical logs ({} bytes): {same_log}; bit-exact reload: {bit_exact}", logs[0].len()),
    )
}

#[test]
fn acceptance_fast_criteria() {
    let (oracles, t1) = timed(|| oracle_checks(1));
    let c1 = suite(1, "oracle equivalences", &oracles, t1, Some(ORACLE_BUDGET));
    let (grads, t2) = timed(|| gradient_checks(2, &SuiteOptions::default()));
    let c2 = suite(2, "gradient checks incl. desk generator", &grads, t2, Some(GRADCHECK_BUDGET));
    let c3 = one_step_changes_every_group();
    let (metrics, t6) = timed(|| metric_checks(6));
    let c6 = suite(6, "metric self-tests", &metrics, t6, None);
    let c7 = fixed_seed_is_reproducible();
    assert!(c1 && c2 && c3 && c6 && c7);
}

#[test]
#[ignore = "trains for several minutes; run with --include-ignored"]
fn acceptance_training_beats_baseline() {
    let dir = tempfile::tempdir().unwrap();
    let seed = 1;
    let (_, eval) = datasets(dir.path(), seed);
    let cfg = config(
        dir.path(),
        &[("seed", seed.to_string()), ("iterations", TRAIN_ITERATIONS.to_string()), ("checkpoint_every", "0".into())],
    );
    let untrained = Trainer::new(&cfg.model, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
    let (_, epe0) = evaluate(&untrained.gen, &eval, MaskMode::Stationary, "untrained").unwrap();
    let (outcome, elapsed) = timed(|| {
        cmd_train(&cfg).unwrap();
        cmd_eval(&cfg).unwrap()
    });
    let (model, base) = (outcome.model.aggregate().psnr, outcome.baseline.aggregate().psnr);
    let in_time = line(
        4,
        "training budget",
        elapsed <= TRAIN_BUDGET,
        &format!("{TRAIN_ITERATIONS} iterations + eval in {:.0} s (budget {} s)", elapsed.as_secs_f64(), TRAIN_BUDGET.as_secs()),
    );
    let psnr_ok = line(
        4,
        "PSNR over copy-input baseline",
        model >= base + PSNR_MARGIN_DB,
        &format!("model {model:.2} dB vs baseline {base:.2} dB (need +{PSNR_MARGIN_DB} dB)"),
    );
    let epe_ok = line(
        4,
        "flow EPE vs untrained",
        outcome.flow_epe <= EPE_RATIO * epe0,
        &format!("{:.4} vs untrained {epe0:.4} (need <= {EPE_RATIO} x)", outcome.flow_epe),
    );
    let shift = translation_epe(&cfg, &eval[0]);
    let shift_ok = line(4, "flow on a (2,0) px translation", shift < 1.0, &format!("mean EPE {shift:.3} px (need < 1)"));
    assert!(in_time && psnr_ok && epe_ok && shift_ok);
}

/// Mean endpoint error, in full-resolution pixels, of the trained flow
/// network on a frame and its copy translated by (2, 0) px.
fn translation_epe(cfg: &RunConfig, rec: &SceneRecord) -> f64 {
    let gen = load_generator(&cfg.model, &Checkpoint::load(&cfg.checkpoint).unwrap()).unwrap();
    let a = rec.scene.video.index0(0);
    let [h, w, c] = a.shape()[..] else { unreachable!() };
    let b = Tensor::from_fn(&[h, w, c], |i| {
        let (y, x, ch) = (i / (w * c), (i / c) % w, i % c);
        a.at(&[y, x.saturating_sub(2), ch])
    });
    let g = Graph::new();
    let p = gen.bind(&g, false);
    let small = downsample_quarter(g.constant(Tensor::stack(&[a, b]).unwrap())).unwrap();
    let flow = estimate_bidirectional(&p, &gen.flow_net, small).unwrap().unwrap().values().forward;
    let (fh, fw) = (flow.shape()[1], flow.shape()[2]);
    let mut total = 0.0;
    for y in 0..fh {
        for x in 1..fw {
            let (dx, dy) = (4.0 * flow.at(&[0, y, x, 0]) - 2.0, 4.0 * flow.at(&[0, y, x, 1]));
            total += (dx * dx + dy * dy).sqrt();
        }
    }
    total / (fh * (fw - 1)) as f64
}

/// Attention score evaluations of one forward pass on a held-out clip.
fn score_count(trainer: &Trainer, clip: &SceneRecord) -> u64 {
    let g = Graph::new();
    let p = trainer.gen.bind(&g, false);
    let t = trainer.gen.cfg.sliding_window;
    let frames = g.constant(clip.scene.video.narrow0(0, t));
    let masks = g.constant(clip.stationary.narrow0(0, t));
    trainer.gen.forward(&p, frames, masks, t).unwrap().attention_scores
}

fn copy_flow_params(dst: &mut Trainer, src: &Trainer) {
    for p in dst.gen.store.iter_mut().filter(|p| p.group == ParamGroup::FlowComp) {
        if let Some(s) = src.gen.store.iter().find(|s| s.name == p.name) {
            p.value = s.value.clone();
        }
    }
}

#[test]
#[ignore = "trains 21 models; run with --include-ignored"]
fn acceptance_ablation_orderings() {
    const VARIANTS: [(&str, &[(&str, &str)]); 7] = [
        ("full", &[]),
        ("no-dcn", &[("disable_dcn", "true")]),
        ("no-propagation", &[("disable_propagation", "true")]),
        ("frozen-flow", &[("freeze_flow", "true")]),
        ("no-flow-loss", &[("disable_flow_loss", "true")]),
        ("local", &[("attention", "local")]),
        ("global", &[("attention", "global")]),
    ];
    let dir = tempfile::tempdir().unwrap();
    let (train, eval) = datasets(dir.path(), 10);
    let mut psnr = vec![0.0; VARIANTS.len()];
    let mut scores = vec![0u64; VARIANTS.len()];
    for &seed in &ABLATION_SEEDS {
        let base = config(dir.path(), &[("seed", seed.to_string()), ("iterations", ABLATION_ITERATIONS.to_string())]);
        // Every variant starts from the same warmed-up flow estimator.
        let template = fresh_trainer(&base).unwrap();
        for (i, (name, extra)) in VARIANTS.iter().enumerate() {
            let mut pairs = vec![("seed", seed.to_string()), ("iterations", ABLATION_ITERATIONS.to_string())];
            pairs.extend(extra.iter().map(|(k, v)| (*k, v.to_string())));
            let cfg = config(dir.path(), &pairs);
            let mut trainer = Trainer::new(&cfg.model, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
            copy_flow_params(&mut trainer, &template);
            train_loop(&mut trainer, &train, &cfg, |_, _| Ok(())).unwrap();
            let (report, _) = evaluate(&trainer.gen, &eval, MaskMode::Stationary, name).unwrap();
            let p = report.aggregate().psnr;
            println!("  seed {seed} {name:<15} psnr {p:.3} dB");
            psnr[i] += p / ABLATION_SEEDS.len() as f64;
            scores[i] = score_count(&trainer, &eval[0]);
        }
    }
    let [full, no_dcn, no_prop, frozen, no_flow_loss, local, global] = psnr[..] else { unreachable!() };
    let [_, _, _, _, _, n_local, n_global] = scores[..] else { unreachable!() };
    let n_focal = scores[0];
    let a = line(
        5,
        "full >= no-DCN >= no-propagation",
        full >= no_dcn && no_dcn >= no_prop,
        &format!("{full:.3} / {no_dcn:.3} / {no_prop:.3} dB"),
    );
    let b = line(
        5,
        "trainable flow >= frozen flow >= no flow loss",
        full >= frozen && frozen >= no_flow_loss,
        &format!("{full:.3} / {frozen:.3} / {no_flow_loss:.3} dB"),
    );
    let c = line(
        5,
        "focal near global, cheaper than global",
        (full - global).abs() <= FOCAL_GAP_DB && n_local < n_focal && n_focal < n_global,
        &format!(
            "focal {full:.3} vs global {global:.3} dB (local {local:.3}); scores {n_local} < {n_focal} < {n_global}"
        ),
    );
    assert!(a && b && c);
}
