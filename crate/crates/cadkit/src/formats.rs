//! On-disk formats: scene JSON, JSONL inputs, correspondence/pose/solve JSON
//! and stats CSV.
//!
//! Every writer produces a canonical form (pretty JSON, fixed field order,
//! trailing newline) so files round-trip byte for byte.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use cadkit_core::retrieval::{EmbeddingProvider, HashEmbedding, ModelViewDescriptors};
use cadkit_core::scene::{Scene, SceneFrame, Split};
use cadkit_core::stats::SceneStats;
use cadkit_core::{CameraFrame, CorrespondenceSet, Detection, Intrinsics, Mat3, Pose9DoF, Track, Vec3};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

#[derive(Debug, thiserror::Error)]
pub enum FormatError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    /// Malformed or mistyped JSON; `path` is the offending field.
    #[error("at `{path}`: {message}")]
    Json { path: String, message: String },
    /// Well-formed JSON that violates a domain invariant.
    #[error("at `{path}`: {message}")]
    Schema { path: String, message: String },
    #[error("line {line}: {message}")]
    Line { line: usize, message: String },
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
}

fn schema(path: impl Into<String>, message: impl ToString) -> FormatError {
    FormatError::Schema {
        path: path.into(),
        message: message.to_string(),
    }
}

pub fn read_text(path: &Path) -> Result<String, FormatError> {
    fs::read_to_string(path).map_err(|source| FormatError::Io {
        path: path.to_owned(),
        source,
    })
}

pub fn write_text(path: &Path, text: &str) -> Result<(), FormatError> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|source| FormatError::Io {
            path: dir.to_owned(),
            source,
        })?;
    }
    fs::write(path, text).map_err(|source| FormatError::Io {
        path: path.to_owned(),
        source,
    })
}

/// Deserialize JSON, reporting the field path of the first error.
pub fn from_json<T: DeserializeOwned>(text: &str) -> Result<T, FormatError> {
    let de = &mut serde_json::Deserializer::from_str(text);
    serde_path_to_error::deserialize(de).map_err(|e| FormatError::Json {
        path: e.path().to_string(),
        message: e.inner().to_string(),
    })
}

pub fn to_json<T: Serialize>(value: &T) -> String {
    let mut s = serde_json::to_string_pretty(value).expect("in-memory values serialize");
    s.push('\n');
    s
}

/// One record per non-blank line.
pub fn from_jsonl<T: DeserializeOwned>(text: &str) -> Result<Vec<T>, FormatError> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            let de = &mut serde_json::Deserializer::from_str(l);
            serde_path_to_error::deserialize(de).map_err(|e| FormatError::Line {
                line: i + 1,
                message: format!("at `{}`: {}", e.path(), e.inner()),
            })
        })
        .collect()
}

pub fn to_jsonl<T: Serialize>(records: &[T]) -> String {
    records
        .iter()
        .map(|r| serde_json::to_string(r).expect("in-memory values serialize") + "\n")
        .collect()
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct FrameRecord {
    frame_id: u32,
    intrinsics: [f64; 4],
    extrinsics: [f64; 12],
    image_size: [u32; 2],
    #[serde(default)]
    timestamp_us: i64,
    image: String,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct SceneRecord {
    scene_id: String,
    split: Split,
    world_up: [f64; 3],
    frames: Vec<FrameRecord>,
}

fn frame_record(f: &SceneFrame) -> FrameRecord {
    let c = &f.camera;
    let mut extrinsics = [0.0; 12];
    for r in 0..3 {
        for col in 0..3 {
            extrinsics[4 * r + col] = c.rotation[(r, col)];
        }
        extrinsics[4 * r + 3] = c.translation[r];
    }
    let k = c.intrinsics;
    FrameRecord {
        frame_id: c.frame_id,
        intrinsics: [k.fx, k.fy, k.cx, k.cy],
        extrinsics,
        image_size: [c.width, c.height],
        timestamp_us: c.timestamp_us,
        image: f.image.clone(),
    }
}

fn frame_from_record(index: usize, r: FrameRecord) -> Result<SceneFrame, FormatError> {
    let e = &r.extrinsics;
    let [fx, fy, cx, cy] = r.intrinsics;
    let camera = CameraFrame::new(
        r.frame_id,
        Intrinsics { fx, fy, cx, cy },
        Mat3::new(e[0], e[1], e[2], e[4], e[5], e[6], e[8], e[9], e[10]),
        Vec3::new(e[3], e[7], e[11]),
        (r.image_size[0], r.image_size[1]),
        r.timestamp_us,
    )
    .map_err(|err| schema(format!("frames[{index}]"), format!("frame {}: {err}", r.frame_id)))?;
    Ok(SceneFrame {
        camera,
        image: r.image,
    })
}

pub fn parse_scene(text: &str) -> Result<Scene, FormatError> {
    let rec: SceneRecord = from_json(text)?;
    let frames = rec
        .frames
        .into_iter()
        .enumerate()
        .map(|(i, f)| frame_from_record(i, f))
        .collect::<Result<Vec<_>, _>>()?;
    let scene = Scene {
        scene_id: rec.scene_id,
        frames,
        world_up: Vec3::from(rec.world_up),
        split: rec.split,
    };
    scene.validate().map_err(|m| schema("frames", m))?;
    Ok(scene)
}

pub fn scene_to_json(scene: &Scene) -> String {
    to_json(&SceneRecord {
        scene_id: scene.scene_id.clone(),
        split: scene.split,
        world_up: scene.world_up.into(),
        frames: scene.frames.iter().map(frame_record).collect(),
    })
}

pub fn load_scene(path: &Path) -> Result<Scene, FormatError> {
    parse_scene(&read_text(path)?)
}

pub fn save_scene(path: &Path, scene: &Scene) -> Result<(), FormatError> {
    write_text(path, &scene_to_json(scene))
}

/// Detections JSONL; every record must satisfy the detection invariants.
pub fn parse_detections(text: &str) -> Result<Vec<Detection>, FormatError> {
    let dets: Vec<Detection> = from_jsonl(text)?;
    for (i, d) in dets.iter().enumerate() {
        d.validate().map_err(|e| schema(format!("[{i}]"), e))?;
    }
    Ok(dets)
}

pub fn parse_tracks(text: &str) -> Result<Vec<Track>, FormatError> {
    let tracks: Vec<Track> = from_json(text)?;
    for (i, t) in tracks.iter().enumerate() {
        let rebuilt = Track::from_detections(t.track_id.clone(), t.detections.clone(), t.source)
            .map_err(|e| schema(format!("[{i}]"), e))?;
        if rebuilt.detections != t.detections {
            return Err(schema(
                format!("[{i}].detections"),
                format!("track {} detections are not ordered by frame", t.track_id),
            ));
        }
    }
    Ok(tracks)
}

/// Descriptor database JSONL, one model per line.
pub fn parse_descriptor_db(text: &str) -> Result<Vec<ModelViewDescriptors>, FormatError> {
    let models: Vec<ModelViewDescriptors> = from_jsonl(text)?;
    for (i, m) in models.iter().enumerate() {
        m.validate().map_err(|e| FormatError::Line {
            line: i + 1,
            message: e.to_string(),
        })?;
    }
    Ok(models)
}

pub fn parse_correspondences(text: &str) -> Result<CorrespondenceSet, FormatError> {
    let set: CorrespondenceSet = from_json(text)?;
    if set.items.is_empty() {
        return Err(schema("items", "no correspondences"));
    }
    Ok(set)
}

pub fn parse_pose(text: &str) -> Result<Pose9DoF, FormatError> {
    from_json(text)
}

/// A solved or ground-truth pose for one track.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PoseEntry {
    pub track_id: String,
    pub model_id: String,
    pub pose: Pose9DoF,
}

pub fn parse_poses(text: &str) -> Result<Vec<PoseEntry>, FormatError> {
    from_json(text)
}

const STATS_HEADER: [&str; 5] = [
    "scene_id",
    "objects_per_frame",
    "mean_bbox_area_fraction",
    "z_dynamic_range",
    "n_objects",
];

/// One row per scene; the truncation histogram follows as `trunc_0..trunc_9`.
pub fn stats_to_csv(rows: &[(String, SceneStats)]) -> Result<String, FormatError> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let mut header: Vec<String> = STATS_HEADER.iter().map(|s| s.to_string()).collect();
    header.extend((0..10).map(|k| format!("trunc_{k}")));
    w.write_record(&header)?;
    for (scene_id, s) in rows {
        let mut rec = vec![
            scene_id.clone(),
            s.objects_per_frame.to_string(),
            s.mean_bbox_area_fraction.to_string(),
            s.z_dynamic_range.to_string(),
            s.truncation_histogram.iter().sum::<usize>().to_string(),
        ];
        rec.extend(s.truncation_histogram.iter().map(|c| c.to_string()));
        w.write_record(&rec)?;
    }
    let bytes = w.into_inner().map_err(|e| csv::Error::from(e.into_error()))?;
    Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
}

#[derive(Deserialize)]
struct EmbeddingRecord {
    label: String,
    vector: Vec<f32>,
}

/// Label embeddings read from a table, e.g. exported from a sentence
/// encoder. Unknown labels fall back to [`HashEmbedding`] of the same
/// dimension.
#[derive(Debug, Clone)]
pub struct LookupEmbedding {
    table: BTreeMap<String, Vec<f32>>,
    fallback: HashEmbedding,
}

impl LookupEmbedding {
    /// JSONL records `{"label": ..., "vector": [...]}`; vectors are
    /// normalized on load and must share one dimension.
    pub fn parse(text: &str) -> Result<Self, FormatError> {
        let records: Vec<EmbeddingRecord> = from_jsonl(text)?;
        let dim = records.first().map_or(64, |r| r.vector.len());
        let mut table = BTreeMap::new();
        for (i, r) in records.into_iter().enumerate() {
            let norm = r.vector.iter().map(|&x| (x as f64).powi(2)).sum::<f64>().sqrt();
            if r.vector.len() != dim || !(norm > 0.0) {
                return Err(FormatError::Line {
                    line: i + 1,
                    message: format!("label {:?}: need a non-zero vector of dimension {dim}", r.label),
                });
            }
            let v = r.vector.iter().map(|&x| (x as f64 / norm) as f32).collect();
            table.insert(r.label, v);
        }
        Ok(LookupEmbedding {
            table,
            fallback: HashEmbedding { dim },
        })
    }
}

impl EmbeddingProvider for LookupEmbedding {
    fn embed(&self, label: &str) -> Vec<f32> {
        match self.table.get(label) {
            Some(v) => v.clone(),
            None => self.fallback.embed(label),
        }
    }
}
