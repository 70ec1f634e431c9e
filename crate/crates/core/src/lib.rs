//! Numerical kernels for annotating video objects with posed CAD models.
//!
//! The crate covers the parts of the annotation pipeline that are pure
//! computation: camera projection and pose transforms, mesh sampling and
//! rotational symmetry detection, clustering of detections into tracks,
//! CAD candidate ranking, and the multi-objective 9-DoF pose solver.
//!
//! It builds without `std` (an allocator is required); file formats, the
//! annotation service and the command line live in the `cadkit` crate.

#![cfg_attr(not(any(feature = "std", test)), no_std)]

extern crate alloc;

pub mod adam;
pub mod geometry;
pub mod keyframes;
pub mod mesh;
pub mod pose;
pub mod retrieval;
pub mod scene;
pub mod stats;
pub mod synth;
pub mod tracking;

#[cfg(feature = "serde")]
mod serde_helpers;

pub use geometry::{
    apply_pose, camera_depth, fit_plane, project_point, BehindCamera, CameraFrame,
    GeometryError, Intrinsics, Mat3, PlaneFit, Pose9DoF, Vec2, Vec3,
};
pub use mesh::{
    detect_symmetry, load_obj, sample_surface, truncation_fraction, MeshError, SymmetryClass,
    TriangleMesh,
};
pub use pose::{
    estimate_pose, verify_pose_proxy, Correspondence, CorrespondenceSet, PoseError, ScaleMode,
    SolveResult, SolverConfig,
};
pub use retrieval::{CandidateList, EmbeddingProvider, HashEmbedding, ModelViewDescriptors};
pub use tracking::{BoundingBox, Detection, SimilarityWeights, Track, TrackSource};
