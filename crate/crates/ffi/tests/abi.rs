use std::ffi::{CStr, CString};
use std::path::Path;
use std::ptr;

use flowvip::cli::RunConfig;
use flowvip::data::{make_masks, MaskMode, MaskSpec};
use flowvip::metrics;
use flowvip::model::{load_generator, sliding_window_inference, Checkpoint, Trainer};
use flowvip::Tensor;
use flowvip_ffi::*;
use rand::SeedableRng;

fn last_error() -> String {
    unsafe { CStr::from_ptr(fvip_last_error()) }.to_string_lossy().into_owned()
}

fn write_checkpoint(dir: &Path) -> (RunConfig, CString) {
    let cfg = RunConfig::resolve(None, &[("preset".into(), "desk".into()), ("seed".into(), "5".into())]).unwrap();
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(5);
    let trainer = Trainer::new(&cfg.model, &mut rng).unwrap();
    let path = dir.join("model.fvip");
    trainer.to_checkpoint(&cfg.echo()).save(&path).unwrap();
    (cfg, CString::new(path.to_str().unwrap()).unwrap())
}

fn clip(t: usize, h: usize, w: usize) -> (Tensor, Tensor) {
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
    let video = Tensor::uniform(&[t, h, w, 3], 0.0, 1.0, &mut rng);
    let masks = make_masks(&MaskSpec { mode: MaskMode::Stationary, seed: 3 }, t, h, w).unwrap();
    (video, masks)
}

#[test]
fn version_is_crate_version() {
    let v = unsafe { CStr::from_ptr(fvip_version()) };
    assert_eq!(v.to_str().unwrap(), env!("CARGO_PKG_VERSION"));
}

#[test]
fn inpaint_matches_library_bit_for_bit() {
    let dir = tempfile::tempdir().unwrap();
    let (cfg, path) = write_checkpoint(dir.path());
    let mut model = ptr::null_mut();
    assert_eq!(unsafe { fvip_model_load(path.as_ptr(), &mut model) }, FvipStatus::Ok, "{}", last_error());
    assert!(!model.is_null());

    let (t, h, w) = (4, 64, 64);
    let (video, masks) = clip(t, h, w);
    let mut out = vec![0.0; t * h * w * 3];
    let status = unsafe { fvip_model_inpaint(model, video.data().as_ptr(), masks.data().as_ptr(), t, h, w, out.as_mut_ptr()) };
    assert_eq!(status, FvipStatus::Ok, "{}", last_error());

    let ck = Checkpoint::load(Path::new(path.to_str().unwrap())).unwrap();
    let gen = load_generator(&cfg.model, &ck).unwrap();
    let want = sliding_window_inference(&gen, &video, &masks).unwrap();
    assert!(out.iter().zip(want.data()).all(|(a, b)| a.to_bits() == b.to_bits()));
    for (px, &m) in masks.data().iter().enumerate() {
        if m < 0.5 {
            assert_eq!(&out[px * 3..px * 3 + 3], &video.data()[px * 3..px * 3 + 3]);
        }
    }
    unsafe { fvip_model_free(model) };
}

#[test]
fn load_failures_report_status_and_message() {
    let mut model = ptr::null_mut();
    let missing = CString::new("/nonexistent/flowvip/model.fvip").unwrap();
    let status = unsafe { fvip_model_load(missing.as_ptr(), &mut model) };
    assert_eq!(status, FvipStatus::Io);
    assert!(model.is_null());
    assert!(last_error().contains("nonexistent"));

    let dir = tempfile::tempdir().unwrap();
    let junk = dir.path().join("junk.fvip");
    std::fs::write(&junk, b"not a checkpoint").unwrap();
    let junk = CString::new(junk.to_str().unwrap()).unwrap();
    assert_eq!(unsafe { fvip_model_load(junk.as_ptr(), &mut model) }, FvipStatus::Checkpoint);
    assert!(!last_error().is_empty());

    assert_eq!(unsafe { fvip_model_load(ptr::null(), &mut model) }, FvipStatus::NullPointer);
    assert_eq!(unsafe { fvip_model_load(missing.as_ptr(), ptr::null_mut()) }, FvipStatus::NullPointer);
    unsafe { fvip_model_free(ptr::null_mut()) };
}

#[test]
fn inpaint_rejects_null_model_and_buffers() {
    let (video, masks) = clip(2, 16, 16);
    let mut out = vec![0.0; video.numel()];
    let s = unsafe { fvip_model_inpaint(ptr::null(), video.data().as_ptr(), masks.data().as_ptr(), 2, 16, 16, out.as_mut_ptr()) };
    assert_eq!(s, FvipStatus::NullPointer);
    assert!(last_error().contains("model"));
}

#[test]
fn metrics_match_library() {
    let (a, _) = clip(3, 16, 16);
    let b = a.map(|v| (v * 0.9 + 0.05).clamp(0.0, 1.0));
    let mean = |v: Vec<f64>| v.iter().sum::<f64>() / v.len() as f64;

    let mut got = 0.0;
    assert_eq!(unsafe { fvip_psnr(a.data().as_ptr(), b.data().as_ptr(), 3, 16, 16, 3, &mut got) }, FvipStatus::Ok);
    assert_eq!(got, mean(metrics::psnr(&a, &b).unwrap()));
    assert_eq!(unsafe { fvip_ssim(a.data().as_ptr(), b.data().as_ptr(), 3, 16, 16, 3, &mut got) }, FvipStatus::Ok);
    assert_eq!(got, mean(metrics::ssim(&a, &b).unwrap()));

    let zeros = vec![0.0; 2 * 16 * 16 * 2];
    let s = unsafe { fvip_warp_error(a.data().as_ptr(), 3, 16, 16, 3, zeros.as_ptr(), zeros.as_ptr(), 1.0, &mut got) };
    assert_eq!(s, FvipStatus::Ok);
    let flows = flowvip::flowcomp::BidirectionalFlows::zeros(2, 16, 16);
    assert_eq!(got, metrics::warp_error(&a, &flows, 1.0).unwrap());
}

#[test]
fn metric_errors_map_to_status() {
    let small = vec![0.5; 8 * 8 * 3];
    let mut got = 0.0;
    let s = unsafe { fvip_ssim(small.as_ptr(), small.as_ptr(), 1, 8, 8, 3, &mut got) };
    assert_eq!(s, FvipStatus::Shape);
    assert!(last_error().contains("11x11"));
    let s = unsafe { fvip_psnr(small.as_ptr(), small.as_ptr(), 1, 8, 8, 3, ptr::null_mut()) };
    assert_eq!(s, FvipStatus::NullPointer);
    let s = unsafe { fvip_warp_error(small.as_ptr(), 0, 8, 8, 3, ptr::null(), ptr::null(), 1.0, &mut got) };
    assert_eq!(s, FvipStatus::InvalidArgument);
    let s = unsafe { fvip_psnr(small.as_ptr(), small.as_ptr(), usize::MAX, 8, 8, 3, &mut got) };
    assert_eq!(s, FvipStatus::InvalidArgument);
}

#[test]
fn header_declares_every_export_and_compiles() {
    let header = Path::new(env!("CARGO_MANIFEST_DIR")).join("include/flowvip.h");
    let text = std::fs::read_to_string(&header).unwrap();
    for name in [
        "fvip_version",
        "fvip_last_error",
        "fvip_model_load",
        "fvip_model_free",
        "fvip_model_inpaint",
        "fvip_psnr",
        "fvip_ssim",
        "fvip_warp_error",
        "FVIP_STATUS_CHECKPOINT",
        "typedef struct FvipModel FvipModel",
    ] {
        assert!(text.contains(name), "header lacks {name}");
    }
    let dir = tempfile::tempdir().unwrap();
    let src = dir.path().join("use.c");
    std::fs::write(
        &src,
        "#include \"flowvip.h\"\nint main(void) { FvipModel *m = 0; return fvip_model_load(\"x\", &m) == FVIP_STATUS_OK; }\n",
    )
    .unwrap();
    match std::process::Command::new("cc")
        .arg("-fsyntax-only")
        .arg("-Wall")
        .arg("-Werror")
        .arg("-I")
        .arg(header.parent().unwrap())
        .arg(&src)
        .output()
    {
        Ok(out) => assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr)),
        Err(e) => eprintln!("cc unavailable, header syntax not checked: {e}"),
    }
}
