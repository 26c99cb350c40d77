use std::path::Path;

use flowvip::cli::{cmd_eval, cmd_gen, cmd_infer, cmd_train, RunConfig};
use flowvip::data::decode_pnm;
use flowvip::model::{load_generator, Checkpoint, LOG_HEADER};

fn config(root: &Path, extra: &[(&str, &str)]) -> RunConfig {
    let p = |name: &str| root.join(name).display().to_string();
    let mut pairs: Vec<(String, String)> = vec![
        ("preset".into(), "desk".into()),
        ("seed".into(), "3".into()),
        ("data_dir".into(), p("data/train")),
        ("eval_dir".into(), p("data/eval")),
        ("checkpoint".into(), p("run/model.fvip")),
        ("log".into(), p("run/train.log")),
        ("report".into(), p("run/report.txt")),
        ("infer_dir".into(), p("run/infer")),
        ("scenes".into(), "2".into()),
        ("frames".into(), "5".into()),
        ("iterations".into(), "4".into()),
        ("checkpoint_every".into(), "2".into()),
        ("flow_warmup".into(), "3".into()),
    ];
    pairs.extend(extra.iter().map(|(k, v)| (k.to_string(), v.to_string())));
    RunConfig::resolve(None, &pairs).unwrap()
}

fn prepare(root: &Path) {
    let cfg = config(root, &[]);
    cmd_gen(&cfg).unwrap();
    let mut eval = cfg.clone();
    eval.data_dir = cfg.eval_dir.clone();
    eval.seed = 4;
    cmd_gen(&eval).unwrap();
}

/// Checkpoints of runs in different directories differ only in the echoed
/// paths; compare the tensors bit for bit.
fn same_records(a: &Path, b: &Path) -> bool {
    let (a, b) = (Checkpoint::load(a).unwrap(), Checkpoint::load(b).unwrap());
    a.records.len() == b.records.len()
        && a.records.iter().zip(&b.records).all(|((na, ta), (nb, tb))| {
            na == nb && ta.shape() == tb.shape() && ta.data().iter().zip(tb.data()).all(|(x, y)| x.to_bits() == y.to_bits())
        })
}

#[test]
fn fixed_seed_training_is_byte_reproducible() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    for root in [a.path(), b.path()] {
        prepare(root);
        cmd_train(&config(root, &[])).unwrap();
    }
    let log_a = std::fs::read(a.path().join("run/train.log")).unwrap();
    let log_b = std::fs::read(b.path().join("run/train.log")).unwrap();
    assert!(log_a == log_b);
    let text = String::from_utf8(log_a).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines[0], LOG_HEADER);
    assert_eq!(lines.len(), 5);
    assert!(same_records(&a.path().join("run/model.fvip"), &b.path().join("run/model.fvip")));

    let c = tempfile::tempdir().unwrap();
    prepare(c.path());
    cmd_train(&config(c.path(), &[("seed", "5")])).unwrap();
    assert!(std::fs::read(c.path().join("run/train.log")).unwrap() != std::fs::read(a.path().join("run/train.log")).unwrap());
}

#[test]
fn resumed_training_matches_an_uninterrupted_run() {
    let whole = tempfile::tempdir().unwrap();
    prepare(whole.path());
    cmd_train(&config(whole.path(), &[])).unwrap();

    let split = tempfile::tempdir().unwrap();
    prepare(split.path());
    let first = cmd_train(&config(split.path(), &[("iterations", "2")])).unwrap();
    assert_eq!(first.iteration, 2);
    let second = cmd_train(&config(split.path(), &[("resume", "true")])).unwrap();
    assert_eq!(second.iteration, 4);

    assert!(std::fs::read(whole.path().join("run/train.log")).unwrap() == std::fs::read(split.path().join("run/train.log")).unwrap());
    assert!(same_records(&whole.path().join("run/model.fvip"), &split.path().join("run/model.fvip")));
}

#[test]
fn checkpoint_stores_the_config_and_reloads_bit_exact() {
    let dir = tempfile::tempdir().unwrap();
    prepare(dir.path());
    let cfg = config(dir.path(), &[("iterations", "1")]);
    let trainer = cmd_train(&cfg).unwrap();
    let ck = Checkpoint::load(&cfg.checkpoint).unwrap();
    assert_eq!(ck.echo, cfg.echo());
    assert_eq!(RunConfig::resolve(Some(&ck.echo), &[]).unwrap(), cfg);
    let gen = load_generator(&cfg.model, &ck).unwrap();
    for (a, b) in gen.store.iter().zip(trainer.gen.store.iter()) {
        assert_eq!(a.name, b.name);
        assert!(a.value.data().iter().zip(b.value.data()).all(|(x, y)| x.to_bits() == y.to_bits()));
    }
}

#[test]
fn eval_is_deterministic_and_appends_reports() {
    let dir = tempfile::tempdir().unwrap();
    prepare(dir.path());
    let cfg = config(dir.path(), &[("iterations", "2")]);
    cmd_train(&cfg).unwrap();
    let first = cmd_eval(&cfg).unwrap();
    let second = cmd_eval(&cfg).unwrap();
    assert_eq!(first, second);
    assert!(first.text.contains("label=model video=ALL"));
    assert!(first.text.contains("label=copy-input video=ALL"));
    assert!(first.text.contains("vfid=null"));
    assert!(first.text.contains("# preset=desk"));
    let report = std::fs::read_to_string(&cfg.report).unwrap();
    assert_eq!(report, format!("{}{}", first.text, second.text));
    assert!(first.model.aggregate().psnr > first.baseline.aggregate().psnr);
}

#[test]
fn infer_writes_every_frame_and_keeps_unmasked_pixels() {
    let dir = tempfile::tempdir().unwrap();
    prepare(dir.path());
    let cfg = config(dir.path(), &[("iterations", "1")]);
    cmd_train(&cfg).unwrap();
    let dirs = cmd_infer(&cfg).unwrap();
    assert_eq!(dirs.len(), 2);
    let scenes = flowvip::data::read_dataset(&cfg.eval_dir).unwrap();
    for (rec, out_dir) in scenes.iter().zip(&dirs) {
        for f in 0..5 {
            let bytes = std::fs::read(out_dir.join(format!("frame_{f:03}.ppm"))).unwrap();
            let frame = decode_pnm(&bytes).unwrap();
            let want = rec.scene.video.index0(f);
            let masks = rec.stationary.index0(f);
            for (px, &m) in masks.data().iter().enumerate() {
                if m < 0.5 {
                    for ch in 0..3 {
                        // PPM stores 8-bit values.
                        assert!((frame.data()[px * 3 + ch] - want.data()[px * 3 + ch]).abs() <= 0.5 / 255.0 + 1e-12);
                    }
                }
            }
        }
    }
}

#[test]
fn missing_inputs_are_reported() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config(dir.path(), &[]);
    assert!(matches!(cmd_train(&cfg), Err(flowvip::Error::Data(_) | flowvip::Error::Io { .. })));
    assert!(matches!(cmd_eval(&cfg), Err(flowvip::Error::Data(_))));
    assert!(matches!(cmd_infer(&cfg), Err(flowvip::Error::Data(_))));
}
