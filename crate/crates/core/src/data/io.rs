//! Netpbm frame/mask files and the on-disk dataset layout.
//!
//! ```text
//! <root>/manifest.txt
//! <root>/scene_0000/frame_000.ppm           RGB frames
//! <root>/scene_0000/stationary_000.pgm      stationary masks (0/255)
//! <root>/scene_0000/object_000.pgm          object-like masks (0/255)
//! <root>/scene_0000/flows.fvip              ground-truth flows
//! ```

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::flowcomp::BidirectionalFlows;
use crate::model::Checkpoint;
use crate::tensor::Tensor;

use super::mask::{make_masks, MaskMode, MaskSpec};
use super::scene::{render_scene, Scene, SceneSpec};

fn to_byte(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

fn encode_pnm(magic: &str, h: usize, w: usize, body: Vec<u8>) -> Vec<u8> {
    let mut out = format!("{magic}\n{w} {h}\n255\n").into_bytes();
    out.extend(body);
    out
}

/// Binary PPM (P6) bytes of an `[H, W, 3]` frame.
pub fn encode_ppm(frame: &Tensor) -> Result<Vec<u8>> {
    let [h, w, 3] = frame.shape()[..] else {
        return Err(Error::invalid_shape("encode_ppm", format!("{:?}", frame.shape())));
    };
    Ok(encode_pnm("P6", h, w, frame.data().iter().map(|&v| to_byte(v)).collect()))
}

/// Binary PGM (P5) bytes of an `[H, W, 1]` mask, 0 or 255.
pub fn encode_pgm(mask: &Tensor) -> Result<Vec<u8>> {
    let [h, w, 1] = mask.shape()[..] else {
        return Err(Error::invalid_shape("encode_pgm", format!("{:?}", mask.shape())));
    };
    Ok(encode_pnm("P5", h, w, mask.data().iter().map(|&v| if v > 0.5 { 255 } else { 0 }).collect()))
}

/// Parse a binary PPM/PGM; returns `[H, W, C]` scaled to [0, 1].
pub fn decode_pnm(bytes: &[u8]) -> Result<Tensor> {
    let mut pos = 0;
    let mut token = || -> Result<String> {
        loop {
            while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
                pos += 1;
            }
            if pos < bytes.len() && bytes[pos] == b'#' {
                while pos < bytes.len() && bytes[pos] != b'\n' {
                    pos += 1;
                }
                continue;
            }
            break;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(Error::Data("truncated netpbm header".into()));
        }
        Ok(String::from_utf8_lossy(&bytes[start..pos]).into_owned())
    };
    let channels = match token()?.as_str() {
        "P6" => 3,
        "P5" => 1,
        other => return Err(Error::Data(format!("unsupported netpbm magic {other:?}"))),
    };
    let num = |s: String| s.parse::<usize>().map_err(|_| Error::Data(format!("bad netpbm number {s:?}")));
    let w = num(token()?)?;
    let h = num(token()?)?;
    let max = num(token()?)?;
    if max != 255 {
        return Err(Error::Data(format!("only 8-bit netpbm supported, maxval {max}")));
    }
    let body = &bytes[pos + 1..];
    let n = h * w * channels;
    if body.len() != n {
        return Err(Error::Data(format!("netpbm body has {} bytes, expected {n}", body.len())));
    }
    Tensor::new(&[h, w, channels], body.iter().map(|&b| b as f64 / 255.0).collect())
}

fn read(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|e| Error::io(path, e))
}

fn write(path: &Path, bytes: &[u8]) -> Result<()> {
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Parameters of a generated dataset.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct GenSpec {
    pub scenes: usize,
    pub frames: usize,
    pub height: usize,
    pub width: usize,
    pub max_speed: usize,
    pub fractional: bool,
    pub seed: u64,
}

/// A scene with both mask regimes.
#[derive(Clone, Debug, PartialEq)]
pub struct SceneRecord {
    pub name: String,
    pub seed: u64,
    pub scene: Scene,
    pub stationary: Tensor,
    pub object: Tensor,
}

/// Render scene `index` of the dataset described by `spec`.
pub fn generate_scene(spec: &GenSpec, index: usize) -> Result<SceneRecord> {
    let seed = ChaCha8Rng::seed_from_u64(spec.seed).gen::<u64>() ^ (index as u64).wrapping_mul(0x2545_f491_4f6c_dd1d);
    let scene_spec = SceneSpec::random(seed, spec.frames, spec.height, spec.width, spec.max_speed, spec.fractional);
    let scene = render_scene(&scene_spec)?;
    let masks = |mode, salt: u64| make_masks(&MaskSpec { mode, seed: seed ^ salt }, spec.frames, spec.height, spec.width);
    Ok(SceneRecord {
        name: format!("scene_{index:04}"),
        seed,
        scene,
        stationary: masks(MaskMode::Stationary, 0x51)?,
        object: masks(MaskMode::ObjectLike, 0x0b)?,
    })
}

pub fn flows_checkpoint(scene: &Scene) -> Checkpoint {
    let mut ck = Checkpoint::new("ground-truth flows");
    ck.push("forward", scene.flows.forward.clone());
    ck.push("backward", scene.flows.backward.clone());
    ck.push("forward_full", scene.flows_full.forward.clone());
    ck.push("backward_full", scene.flows_full.backward.clone());
    ck
}

pub fn write_scene(dir: &Path, rec: &SceneRecord) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    for f in 0..rec.scene.frames() {
        write(&dir.join(format!("frame_{f:03}.ppm")), &encode_ppm(&rec.scene.video.index0(f))?)?;
        write(&dir.join(format!("stationary_{f:03}.pgm")), &encode_pgm(&rec.stationary.index0(f))?)?;
        write(&dir.join(format!("object_{f:03}.pgm")), &encode_pgm(&rec.object.index0(f))?)?;
    }
    write(&dir.join("flows.fvip"), &flows_checkpoint(&rec.scene).to_bytes())
}

/// Render and write the whole dataset plus its manifest.
pub fn write_dataset(root: &Path, spec: &GenSpec) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(root).map_err(|e| Error::io(root, e))?;
    let mut manifest = String::new();
    let _ = writeln!(manifest, "# flowvip synthetic dataset");
    let _ = writeln!(
        manifest,
        "scenes={} frames={} height={} width={} max_speed={} fractional={} seed={}",
        spec.scenes, spec.frames, spec.height, spec.width, spec.max_speed, spec.fractional, spec.seed
    );
    let mut dirs = Vec::new();
    for i in 0..spec.scenes {
        let rec = generate_scene(spec, i)?;
        let dir = root.join(&rec.name);
        write_scene(&dir, &rec)?;
        let _ = writeln!(manifest, "{} seed={}", rec.name, rec.seed);
        dirs.push(dir);
    }
    write(&root.join("manifest.txt"), manifest.as_bytes())?;
    Ok(dirs)
}

/// Scene names listed in a dataset manifest.
pub fn read_manifest(root: &Path) -> Result<Vec<String>> {
    let path = root.join("manifest.txt");
    let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let mut lines = text.lines().filter(|l| !l.starts_with('#') && !l.trim().is_empty());
    lines
        .next()
        .filter(|l| l.starts_with("scenes="))
        .ok_or_else(|| Error::Data(format!("{}: missing header line", path.display())))?;
    Ok(lines.filter_map(|l| l.split_whitespace().next().map(str::to_string)).collect())
}

fn read_stack(dir: &Path, prefix: &str, ext: &str) -> Result<Tensor> {
    let mut frames = Vec::new();
    loop {
        let path = dir.join(format!("{prefix}_{:03}.{ext}", frames.len()));
        if !path.exists() {
            break;
        }
        frames.push(decode_pnm(&read(&path)?).map_err(|e| Error::Data(format!("{}: {e}", path.display())))?);
    }
    if frames.is_empty() {
        return Err(Error::Data(format!("{}: no {prefix} frames", dir.display())));
    }
    Tensor::stack(&frames)
}

pub fn read_scene(dir: &Path) -> Result<SceneRecord> {
    let video = read_stack(dir, "frame", "ppm")?;
    let stationary = read_stack(dir, "stationary", "pgm")?;
    let object = read_stack(dir, "object", "pgm")?;
    let flows_path = dir.join("flows.fvip");
    let ck = Checkpoint::load(&flows_path).map_err(|e| Error::Data(format!("{}: {e}", flows_path.display())))?;
    let pair = |f: &str, b: &str| -> Result<BidirectionalFlows> {
        Ok(BidirectionalFlows {
            forward: ck.require(f)?.clone(),
            backward: ck.require(b)?.clone(),
        })
    };
    let scene = Scene {
        video,
        flows: pair("forward", "backward")?,
        flows_full: pair("forward_full", "backward_full")?,
    };
    let t = scene.frames();
    if stationary.shape()[0] != t || object.shape()[0] != t || scene.flows.pairs() + 1 != t {
        return Err(Error::Data(format!("{}: inconsistent frame counts", dir.display())));
    }
    Ok(SceneRecord {
        name: dir.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default(),
        seed: 0,
        scene,
        stationary,
        object,
    })
}

pub fn read_dataset(root: &Path) -> Result<Vec<SceneRecord>> {
    read_manifest(root)?.iter().map(|name| read_scene(&root.join(name))).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pnm_roundtrip_of_quantised_values() {
        let frame = Tensor::from_fn(&[3, 2, 3], |i| (i * 13 % 256) as f64 / 255.0);
        assert_eq!(decode_pnm(&encode_ppm(&frame).unwrap()).unwrap(), frame);
        let mask = Tensor::new(&[2, 2, 1], vec![0.0, 1.0, 1.0, 0.0]).unwrap();
        assert_eq!(decode_pnm(&encode_pgm(&mask).unwrap()).unwrap(), mask);
        assert!(decode_pnm(b"P3\n1 1\n255\n").is_err());
    }
}
