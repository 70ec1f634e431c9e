//! Dataset statistics over annotated scenes.

use alloc::vec::Vec;

#[cfg(feature = "serde")]
use serde::{Deserialize, Serialize};

use crate::geometry::{camera_depth, CameraFrame, Pose9DoF};
use crate::mesh::{truncation_fraction, TriangleMesh};
use crate::tracking::Track;

pub const TRUNCATION_BINS: usize = 10;
const TRUNCATION_SAMPLES: usize = 500;
const TRUNCATION_SEED: u64 = 0x7472_756e;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum StatsError {
    #[error("scene has no posed objects")]
    NoPosedObjects,
    #[error("scene has no frames")]
    NoFrames,
}

/// One annotated object: its track, solved pose and CAD model.
#[derive(Debug, Clone, Copy)]
pub struct PosedObject<'a> {
    pub track: &'a Track,
    pub pose: &'a Pose9DoF,
    pub mesh: &'a TriangleMesh,
}

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(Serialize, Deserialize))]
pub struct SceneStats {
    pub objects_per_frame: f64,
    pub mean_bbox_area_fraction: f64,
    /// Farthest over nearest object-centre depth, per frame, averaged over
    /// frames with at least one visible object.
    pub z_dynamic_range: f64,
    /// Objects binned by mean truncation over their visible frames.
    pub truncation_histogram: [usize; TRUNCATION_BINS],
}

fn truncation_bin(fraction: f64) -> usize {
    ((fraction * TRUNCATION_BINS as f64) as usize).min(TRUNCATION_BINS - 1)
}

/// Statistics of one scene. An object counts as visible in a frame when its
/// track has a detection there.
pub fn compute_scene_stats(
    cameras: &[CameraFrame],
    objects: &[PosedObject<'_>],
) -> Result<SceneStats, StatsError> {
    if objects.is_empty() {
        return Err(StatsError::NoPosedObjects);
    }
    if cameras.is_empty() {
        return Err(StatsError::NoFrames);
    }

    let mut visible_total = 0usize;
    let mut area_sum = 0.0;
    let mut area_count = 0usize;
    let mut range_sum = 0.0;
    let mut range_frames = 0usize;
    for cam in cameras {
        let image_area = cam.width as f64 * cam.height as f64;
        let mut near = f64::INFINITY;
        let mut far = 0.0f64;
        for obj in objects {
            let Some(det) = obj.track.detection_in(cam.frame_id) else {
                continue;
            };
            visible_total += 1;
            area_sum += det.bbox.area() / image_area;
            area_count += 1;
            let depth = camera_depth(cam, &obj.pose.apply(&obj.mesh.center()));
            if depth > 0.0 {
                near = near.min(depth);
                far = far.max(depth);
            }
        }
        if near.is_finite() {
            range_sum += far / near;
            range_frames += 1;
        }
    }

    let mut truncation_histogram = [0usize; TRUNCATION_BINS];
    for obj in objects {
        let visible: Vec<&CameraFrame> = cameras
            .iter()
            .filter(|c| obj.track.detection_in(c.frame_id).is_some())
            .collect();
        let frames: Vec<&CameraFrame> = if visible.is_empty() {
            cameras.iter().collect()
        } else {
            visible
        };
        let mean = frames
            .iter()
            .map(|c| {
                truncation_fraction(obj.mesh, obj.pose, c, TRUNCATION_SAMPLES, TRUNCATION_SEED)
                    .unwrap_or(1.0)
            })
            .sum::<f64>()
            / frames.len() as f64;
        truncation_histogram[truncation_bin(mean)] += 1;
    }

    Ok(SceneStats {
        objects_per_frame: visible_total as f64 / cameras.len() as f64,
        mean_bbox_area_fraction: if area_count > 0 {
            area_sum / area_count as f64
        } else {
            0.0
        },
        z_dynamic_range: if range_frames > 0 {
            range_sum / range_frames as f64
        } else {
            0.0
        },
        truncation_histogram,
    })
}
