//! Scene directories.
//!
//! ```text
//! <scene>/
//!   scene.json                 cameras and frame images
//!   tracks.json                object tracks
//!   models/<model_id>.obj      CAD models referenced by the tracks
//!   descriptors.jsonl          model view descriptors (optional)
//!   correspondences/<track>.json
//!   poses.json                 solved poses (optional)
//!   ground_truth.json          reference poses (optional, synthetic data)
//! ```

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use cadkit_core::mesh::to_obj;
use cadkit_core::retrieval::{ModelViewDescriptors, VIEWS_PER_MODEL};
use cadkit_core::scene::Scene;
use cadkit_core::stats::{compute_scene_stats, PosedObject, SceneStats};
use cadkit_core::synth::SyntheticScene;
use cadkit_core::{load_obj, CorrespondenceSet, Track, TriangleMesh};

use crate::formats::{
    load_scene, parse_correspondences, parse_descriptor_db, parse_poses, parse_tracks, read_text,
    save_scene, to_json, to_jsonl, write_text, FormatError, PoseEntry,
};

pub const SCENE_FILE: &str = "scene.json";
pub const TRACKS_FILE: &str = "tracks.json";
pub const DESCRIPTORS_FILE: &str = "descriptors.jsonl";
pub const POSES_FILE: &str = "poses.json";
pub const GROUND_TRUTH_FILE: &str = "ground_truth.json";

#[derive(Debug, thiserror::Error)]
pub enum DatasetError {
    #[error(transparent)]
    Format(#[from] FormatError),
    #[error("{path}: {message}")]
    Invalid { path: PathBuf, message: String },
}

fn invalid(path: &Path, message: impl ToString) -> DatasetError {
    DatasetError::Invalid {
        path: path.to_owned(),
        message: message.to_string(),
    }
}

/// Everything stored for one scene.
#[derive(Debug, Clone)]
pub struct SceneDir {
    pub dir: PathBuf,
    pub scene: Scene,
    pub tracks: Vec<Track>,
    pub models: BTreeMap<String, TriangleMesh>,
    pub descriptors: Vec<ModelViewDescriptors>,
    pub correspondences: BTreeMap<String, CorrespondenceSet>,
    pub poses: Vec<PoseEntry>,
    pub ground_truth: Vec<PoseEntry>,
}

fn read_optional(path: &Path) -> Result<Option<String>, FormatError> {
    if path.exists() {
        read_text(path).map(Some)
    } else {
        Ok(None)
    }
}

fn files_with_ext(dir: &Path, ext: &str) -> Result<Vec<(String, PathBuf)>, DatasetError> {
    let mut out = Vec::new();
    let entries = match fs::read_dir(dir) {
        Ok(e) => e,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(out),
        Err(source) => {
            return Err(FormatError::Io {
                path: dir.to_owned(),
                source,
            }
            .into())
        }
    };
    for entry in entries {
        let path = entry
            .map_err(|source| FormatError::Io {
                path: dir.to_owned(),
                source,
            })?
            .path();
        if path.extension().and_then(|e| e.to_str()) == Some(ext) {
            let stem = path.file_stem().and_then(|s| s.to_str()).unwrap_or_default();
            out.push((stem.to_string(), path));
        }
    }
    out.sort();
    Ok(out)
}

/// Load a mesh file, naming it after the file.
pub fn load_model(path: &Path, model_id: &str, category: &str) -> Result<TriangleMesh, DatasetError> {
    let bytes = fs::read(path).map_err(|source| FormatError::Io {
        path: path.to_owned(),
        source,
    })?;
    let mesh = load_obj(&bytes).map_err(|e| invalid(path, e))?;
    Ok(mesh.with_identity(model_id, category))
}

impl SceneDir {
    pub fn load(dir: &Path) -> Result<SceneDir, DatasetError> {
        let scene = load_scene(&dir.join(SCENE_FILE))?;
        let tracks = match read_optional(&dir.join(TRACKS_FILE))? {
            Some(text) => parse_tracks(&text)?,
            None => Vec::new(),
        };
        let descriptors = match read_optional(&dir.join(DESCRIPTORS_FILE))? {
            Some(text) => parse_descriptor_db(&text)?,
            None => Vec::new(),
        };
        let category_of: BTreeMap<&str, &str> = descriptors
            .iter()
            .map(|d| (d.model_id.as_str(), d.category.as_str()))
            .collect();

        let mut models = BTreeMap::new();
        for (id, path) in files_with_ext(&dir.join("models"), "obj")? {
            let category = category_of.get(id.as_str()).copied().unwrap_or("");
            models.insert(id.clone(), load_model(&path, &id, category)?);
        }

        let mut correspondences = BTreeMap::new();
        for (id, path) in files_with_ext(&dir.join("correspondences"), "json")? {
            let set = parse_correspondences(&read_text(&path)?)?;
            if set.track_id != id {
                return Err(invalid(&path, format!("holds track {}", set.track_id)));
            }
            correspondences.insert(id, set);
        }

        let poses = match read_optional(&dir.join(POSES_FILE))? {
            Some(text) => parse_poses(&text)?,
            None => Vec::new(),
        };
        let ground_truth = match read_optional(&dir.join(GROUND_TRUTH_FILE))? {
            Some(text) => parse_poses(&text)?,
            None => Vec::new(),
        };

        Ok(SceneDir {
            dir: dir.to_owned(),
            scene,
            tracks,
            models,
            descriptors,
            correspondences,
            poses,
            ground_truth,
        })
    }

    pub fn track(&self, track_id: &str) -> Option<&Track> {
        self.tracks.iter().find(|t| t.track_id == track_id)
    }

    /// Statistics over the objects in `poses` (typically [`Self::poses`]).
    pub fn stats(&self, poses: &[PoseEntry]) -> Result<SceneStats, DatasetError> {
        let mut objects = Vec::with_capacity(poses.len());
        for p in poses {
            let track = self
                .track(&p.track_id)
                .ok_or_else(|| invalid(&self.dir, format!("pose for unknown track {}", p.track_id)))?;
            let mesh = self
                .models
                .get(&p.model_id)
                .ok_or_else(|| invalid(&self.dir, format!("pose uses unknown model {}", p.model_id)))?;
            objects.push(PosedObject {
                track,
                pose: &p.pose,
                mesh,
            });
        }
        compute_scene_stats(&self.scene.cameras(), &objects).map_err(|e| invalid(&self.dir, e))
    }
}

/// Write a generated scene in the directory layout above. Each model's view
/// descriptors are drawn from its track so the true model ranks first.
pub fn write_synthetic_scene(dir: &Path, synth: &SyntheticScene) -> Result<(), DatasetError> {
    save_scene(&dir.join(SCENE_FILE), &synth.scene)?;
    let tracks: Vec<&Track> = synth.objects.iter().map(|o| &o.track).collect();
    write_text(&dir.join(TRACKS_FILE), &to_json(&tracks))?;

    let mut descriptors = Vec::new();
    let mut truth = Vec::new();
    for obj in &synth.objects {
        let model_id = &obj.correspondences.model_id;
        write_text(&dir.join("models").join(format!("{model_id}.obj")), &to_obj(&obj.mesh))?;
        write_text(
            &dir.join("correspondences").join(format!("{}.json", obj.track.track_id)),
            &to_json(&obj.correspondences),
        )?;
        let views = obj
            .track
            .detections
            .iter()
            .cycle()
            .take(VIEWS_PER_MODEL)
            .map(|d| d.descriptor.clone())
            .collect();
        descriptors.push(ModelViewDescriptors {
            model_id: model_id.clone(),
            category: obj.mesh.category.clone(),
            view_descriptors: views,
        });
        truth.push(PoseEntry {
            track_id: obj.track.track_id.clone(),
            model_id: model_id.clone(),
            pose: obj.pose.clone(),
        });
    }
    write_text(&dir.join(DESCRIPTORS_FILE), &to_jsonl(&descriptors))?;
    write_text(&dir.join(GROUND_TRUTH_FILE), &to_json(&truth))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use cadkit_core::synth::{generate_synthetic_scene, SynthSpec};

    #[test]
    fn synthetic_scene_loads_back() {
        let dir = tempfile::tempdir().unwrap();
        let synth = generate_synthetic_scene(&SynthSpec { objects: 4, ..SynthSpec::default() }, 3);
        write_synthetic_scene(dir.path(), &synth).unwrap();
        let loaded = SceneDir::load(dir.path()).unwrap();
        assert_eq!(loaded.scene, synth.scene);
        assert_eq!(loaded.tracks.len(), 4);
        assert_eq!(loaded.models.len(), 4);
        assert_eq!(loaded.correspondences.len(), 4);
        assert_eq!(loaded.ground_truth.len(), 4);
        for obj in &synth.objects {
            let m = &loaded.models[&obj.correspondences.model_id];
            assert_eq!(m.category, obj.mesh.category);
            assert_eq!(m.triangles, obj.mesh.triangles);
        }
        let stats = loaded.stats(&loaded.ground_truth).unwrap();
        assert_eq!(stats.truncation_histogram.iter().sum::<usize>(), 4);
    }

    #[test]
    fn missing_scene_file_is_an_io_error() {
        let dir = tempfile::tempdir().unwrap();
        let err = SceneDir::load(dir.path()).unwrap_err();
        assert!(matches!(err, DatasetError::Format(FormatError::Io { .. })));
    }

    #[test]
    fn pose_for_unknown_track_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let synth = generate_synthetic_scene(&SynthSpec { objects: 1, ..SynthSpec::default() }, 0);
        write_synthetic_scene(dir.path(), &synth).unwrap();
        let loaded = SceneDir::load(dir.path()).unwrap();
        let mut poses = loaded.ground_truth.clone();
        poses[0].track_id = "nope".into();
        assert!(loaded.stats(&poses).is_err());
    }
}
