//! Synthetic scenes, corruption masks and dataset files.

mod io;
mod mask;
mod scene;

pub use io::{
    decode_pnm, encode_pgm, encode_ppm, flows_checkpoint, generate_scene, read_dataset, read_manifest, read_scene,
    write_dataset, write_scene, GenSpec, SceneRecord,
};
pub use mask::{make_masks, MaskMode, MaskSpec, AREA_BOUNDS};
pub use scene::{quarter_flow, render_scene, Scene, SceneSpec, Sprite, SpriteKind};
