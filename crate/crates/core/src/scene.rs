//! Scenes: the calibrated frames of one video.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

#[cfg(feature = "serde")]
use serde::{Deserialize, Serialize};

use crate::geometry::{CameraFrame, Vec3};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(Serialize, Deserialize), serde(rename_all = "lowercase"))]
pub enum Split {
    Train,
    Val,
    Test,
}

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(Serialize, Deserialize))]
pub struct SceneFrame {
    pub camera: CameraFrame,
    /// Image path relative to the scene directory.
    pub image: String,
}

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(Serialize, Deserialize))]
pub struct Scene {
    pub scene_id: String,
    pub frames: Vec<SceneFrame>,
    pub world_up: Vec3,
    pub split: Split,
}

impl Scene {
    /// Frames ordered by timestamp, at least two of them, unique frame ids,
    /// unit world up.
    pub fn validate(&self) -> Result<(), String> {
        if self.frames.len() < 2 {
            return Err(format!("scene {} has {} frames, need 2", self.scene_id, self.frames.len()));
        }
        for w in self.frames.windows(2) {
            if w[1].camera.timestamp_us < w[0].camera.timestamp_us {
                return Err(format!(
                    "frame {} is out of timestamp order",
                    w[1].camera.frame_id
                ));
            }
        }
        let mut ids: Vec<u32> = self.frames.iter().map(|f| f.camera.frame_id).collect();
        ids.sort_unstable();
        if let Some(w) = ids.windows(2).find(|w| w[0] == w[1]) {
            return Err(format!("duplicate frame id {}", w[0]));
        }
        if (self.world_up.norm() - 1.0).abs() > 1e-6 {
            return Err("world_up is not a unit vector".into());
        }
        for f in &self.frames {
            f.camera
                .validate()
                .map_err(|e| format!("frame {}: {e}", f.camera.frame_id))?;
        }
        Ok(())
    }

    pub fn cameras(&self) -> Vec<CameraFrame> {
        self.frames.iter().map(|f| f.camera.clone()).collect()
    }
}
