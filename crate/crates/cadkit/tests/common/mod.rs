#![allow(dead_code)]

use std::path::Path;

use cadkit::dataset::write_synthetic_scene;
use cadkit_core::synth::{generate_synthetic_scene, SynthSpec, SyntheticScene};

/// A data directory holding one generated scene under `scenes/`.
pub fn data_dir_with_scene(root: &Path, seed: u64, objects: usize) -> SyntheticScene {
    let spec = SynthSpec {
        objects,
        pixel_noise: 0.5,
        ..SynthSpec::default()
    };
    let synth = generate_synthetic_scene(&spec, seed);
    write_synthetic_scene(&root.join("scenes").join(&synth.scene.scene_id), &synth).unwrap();
    synth
}
