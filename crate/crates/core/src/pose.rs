//! 9-DoF pose recovery from annotated 3D↔2D correspondences.
//!
//! The solver minimizes
//!
//! ```text
//! L(T, R, S) = L_repr + α·L_up + β·L_front
//! ```
//!
//! where `L_repr` is the summed L1 pixel error of the projected model points
//! (minimized over the model's symmetry rotations separately in each frame),
//! `L_up` is the L1 distance between the rotated model up axis and the world
//! up axis (upright categories only), and `L_front` is a hinge on points
//! that fall behind a camera. Optimization uses Adam from several start
//! rotations.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;

use nalgebra::Matrix3;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
#[cfg(feature = "serde")]
use serde::{Deserialize, Serialize};

use crate::geometry::{
    camera_depth, fit_plane, project_point, CameraFrame, GeometryError, Mat3, Pose9DoF, Vec2,
    Vec3, COPLANAR_REL_TOL,
};
use crate::mesh::{SymmetryClass, TriangleMesh};

pub mod objective;

use objective::{behind_penalty, FrameBlock, FrameResidual, Objective};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum PoseError {
    #[error("correspondence set is empty")]
    Empty,
    #[error("need at least 4 correspondences, got {0}")]
    Underdetermined(usize),
    #[error("no camera for frame {0}")]
    MissingCamera(u32),
    #[error("loss became non-finite in start {start}")]
    NonFinite { start: usize },
    #[error("invalid correspondence: {0}")]
    BadCorrespondence(String),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
}

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(Serialize, Deserialize))]
pub struct Correspondence {
    pub frame_id: u32,
    /// Point on the CAD surface, canonical model frame.
    pub model_point: Vec3,
    pub pixel: Vec2,
}

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(Serialize, Deserialize))]
pub struct CorrespondenceSet {
    pub track_id: String,
    pub model_id: String,
    /// The model was mirrored across its x = 0 plane while annotating.
    #[cfg_attr(feature = "serde", serde(default))]
    pub flipped: bool,
    pub items: Vec<Correspondence>,
}

/// Mirror across the model's x = 0 plane.
pub fn flip(p: &Vec3) -> Vec3 {
    Vec3::new(-p.x, p.y, p.z)
}

impl CorrespondenceSet {
    pub fn oriented_point(&self, p: &Vec3) -> Vec3 {
        if self.flipped {
            flip(p)
        } else {
            *p
        }
    }

    /// Distinct frame ids in ascending order.
    pub fn frame_ids(&self) -> Vec<u32> {
        let mut ids: Vec<u32> = self.items.iter().map(|c| c.frame_id).collect();
        ids.sort_unstable();
        ids.dedup();
        ids
    }

    /// Every frame has a camera and every pixel lies within 10% of the
    /// image outside its bounds.
    pub fn validate(&self, cams: &[CameraFrame]) -> Result<(), PoseError> {
        if self.items.is_empty() {
            return Err(PoseError::Empty);
        }
        let lookup = camera_lookup(cams);
        for c in &self.items {
            let cam = lookup
                .get(&c.frame_id)
                .ok_or(PoseError::MissingCamera(c.frame_id))?;
            let (w, h) = (cam.width as f64, cam.height as f64);
            let (mx, my) = (0.1 * w, 0.1 * h);
            let px = &c.pixel;
            if !(px.x >= -mx && px.x <= w + mx && px.y >= -my && px.y <= h + my) {
                return Err(PoseError::BadCorrespondence(format!(
                    "frame {}: pixel ({}, {}) is far outside the {}x{} image",
                    c.frame_id, px.x, px.y, cam.width, cam.height
                )));
            }
            if !c.model_point.iter().all(|v| v.is_finite()) {
                return Err(PoseError::BadCorrespondence(format!(
                    "frame {}: non-finite model point",
                    c.frame_id
                )));
            }
        }
        Ok(())
    }
}

fn camera_lookup(cams: &[CameraFrame]) -> BTreeMap<u32, &CameraFrame> {
    cams.iter().map(|c| (c.frame_id, c)).collect()
}

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(Serialize, Deserialize))]
pub struct SolverConfig {
    /// Up-axis weight.
    pub alpha: f64,
    /// Front-of-camera weight.
    pub beta: f64,
    pub steps: usize,
    /// Initial Adam step size; decays along a cosine to
    /// `learning_rate · final_lr_fraction`.
    pub learning_rate: f64,
    pub final_lr_fraction: f64,
    pub n_starts: usize,
    /// Seeds start rotations beyond the 24 octahedral ones.
    pub seed: u64,
    pub upright_categories: Vec<String>,
    /// Depth below which the front-of-camera hinge is active.
    pub front_margin: f64,
    pub world_up: Vec3,
    /// Mean reprojection error (px) under which a solve counts as converged.
    pub verify_tau_px: f64,
    /// Tie the scale normal to a coplanar annotation to the other two.
    pub coplanar_scale: bool,
    /// Use the model's rotational symmetry in the reprojection term and,
    /// for 36-way models, tie the horizontal scales.
    pub symmetry_aware: bool,
    pub coplanar_rel_tol: f64,
}

pub const DEFAULT_UPRIGHT: [&str; 8] = [
    "chair", "table", "cabinet", "sofa", "bed", "bookshelf", "display", "bin",
];

impl Default for SolverConfig {
    fn default() -> Self {
        SolverConfig {
            alpha: 10.0,
            beta: 100.0,
            steps: 500,
            learning_rate: 0.05,
            final_lr_fraction: 0.02,
            n_starts: 24,
            seed: 0,
            upright_categories: DEFAULT_UPRIGHT.iter().map(|s| s.to_string()).collect(),
            front_margin: 0.0,
            world_up: Vec3::y(),
            verify_tau_px: 5.0,
            coplanar_scale: true,
            symmetry_aware: true,
            coplanar_rel_tol: COPLANAR_REL_TOL,
        }
    }
}

impl SolverConfig {
    fn lr_at(&self, step: usize) -> f64 {
        let progress = if self.steps > 1 {
            step as f64 / (self.steps - 1) as f64
        } else {
            0.0
        };
        let floor = self.learning_rate * self.final_lr_fraction;
        floor
            + (self.learning_rate - floor)
                * 0.5
                * (1.0 + libm::cos(core::f64::consts::PI * progress))
    }
}

/// How the three scale factors map onto free parameters.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[cfg_attr(
    feature = "serde",
    derive(Serialize, Deserialize),
    serde(tag = "mode", rename_all = "snake_case")
)]
pub enum ScaleMode {
    /// Three independent scales.
    Full,
    /// Scale along `axis` is the mean of the other two.
    Coplanar2Dof { axis: usize },
    /// The two scales orthogonal to `up_axis` are equal.
    RotsymTied { up_axis: usize },
}

impl ScaleMode {
    pub fn free_scales(&self) -> usize {
        match self {
            ScaleMode::Full => 3,
            _ => 2,
        }
    }
}

/// Why [`scale_parameterization`] fell back to full scale.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(Serialize, Deserialize), serde(rename_all = "snake_case"))]
pub enum ScaleNote {
    /// Fewer than three distinct, non-collinear model points.
    Underdetermined,
    /// Points are coplanar but the plane is not near any model axis.
    NoAxisSnap,
}

/// Coplanar planes snap to a model axis within this angle.
pub const AXIS_SNAP_DEG: f64 = 15.0;

fn dominant_axis(v: &Vec3) -> usize {
    let a = v.abs();
    if a.x >= a.y && a.x >= a.z {
        0
    } else if a.y >= a.z {
        1
    } else {
        2
    }
}

/// Choose the scale parameterization for a correspondence set.
pub fn scale_parameterization(
    corr: &CorrespondenceSet,
    sym: &SymmetryClass,
    mesh_up: &Vec3,
    rel_tol: f64,
) -> (ScaleMode, Option<ScaleNote>) {
    if sym.order == 36 {
        return (
            ScaleMode::RotsymTied {
                up_axis: dominant_axis(mesh_up),
            },
            None,
        );
    }
    let mut points: Vec<Vec3> = Vec::new();
    for c in &corr.items {
        if !points.iter().any(|p| (p - c.model_point).norm() <= 1e-12) {
            points.push(c.model_point);
        }
    }
    if points.len() < 3 {
        return (ScaleMode::Full, Some(ScaleNote::Underdetermined));
    }
    let Ok((fit, coplanar)) = fit_plane(&points, rel_tol) else {
        return (ScaleMode::Full, Some(ScaleNote::Underdetermined));
    };
    if fit.is_degenerate {
        return (ScaleMode::Full, Some(ScaleNote::Underdetermined));
    }
    if !coplanar {
        return (ScaleMode::Full, None);
    }
    let axis = dominant_axis(&fit.normal);
    let cos_snap = libm::cos(AXIS_SNAP_DEG.to_radians());
    if fit.normal[axis].abs() >= cos_snap {
        (ScaleMode::Coplanar2Dof { axis }, None)
    } else {
        (ScaleMode::Full, Some(ScaleNote::NoAxisSnap))
    }
}

/// Everything the objective needs besides the solver settings.
#[derive(Debug, Clone)]
pub struct PoseProblem<'a> {
    pub corr: &'a CorrespondenceSet,
    pub cams: &'a [CameraFrame],
    pub mesh_up: Vec3,
    /// Category used to decide whether the up-axis term applies.
    pub category: &'a str,
}

impl<'a> PoseProblem<'a> {
    pub fn new(corr: &'a CorrespondenceSet, cams: &'a [CameraFrame], mesh: &'a TriangleMesh) -> Self {
        PoseProblem {
            corr,
            cams,
            mesh_up: mesh.up_axis,
            category: &mesh.category,
        }
    }

    fn frame_blocks(&self) -> Result<Vec<FrameBlock>, PoseError> {
        if self.corr.items.is_empty() {
            return Err(PoseError::Empty);
        }
        let lookup = camera_lookup(self.cams);
        let mut blocks: BTreeMap<u32, FrameBlock> = BTreeMap::new();
        for c in &self.corr.items {
            let cam = lookup
                .get(&c.frame_id)
                .ok_or(PoseError::MissingCamera(c.frame_id))?;
            let block = blocks.entry(c.frame_id).or_insert_with(|| FrameBlock {
                frame_id: c.frame_id,
                cam: (*cam).clone(),
                points: Vec::new(),
                pixels: Vec::new(),
            });
            block.points.push(self.corr.oriented_point(&c.model_point));
            block.pixels.push(c.pixel);
        }
        Ok(blocks.into_values().collect())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
#[cfg_attr(feature = "serde", derive(Serialize, Deserialize))]
pub struct LossBreakdown {
    pub repr: f64,
    pub up: f64,
    pub front: f64,
}

impl LossBreakdown {
    pub fn total(&self, alpha: f64, beta: f64) -> f64 {
        self.repr + alpha * self.up + beta * self.front
    }
}

/// Symmetry group actually used by the solver for a configuration.
fn effective_group(sym: &SymmetryClass, cfg: &SolverConfig) -> Vec<Mat3> {
    if cfg.symmetry_aware && sym.order > 1 {
        sym.elements()
    } else {
        vec![Mat3::identity()]
    }
}

/// Summed L1 pixel error, each frame taking its best symmetry element.
/// Points behind a camera cost `2·(width + height)` each.
pub fn reprojection_loss(
    pose: &Pose9DoF,
    corr: &CorrespondenceSet,
    cams: &[CameraFrame],
    sym: &SymmetryClass,
) -> Result<f64, PoseError> {
    let problem = PoseProblem {
        corr,
        cams,
        mesh_up: sym.axis,
        category: "",
    };
    let blocks = problem.frame_blocks()?;
    let group = sym.elements();
    let mut total = 0.0;
    for b in &blocks {
        let best = group
            .iter()
            .map(|g| {
                b.points
                    .iter()
                    .zip(&b.pixels)
                    .map(|(p, q)| match project_point(&b.cam, &pose.apply(&(g * p))) {
                        Ok(px) => (px - q).abs().sum(),
                        Err(_) => behind_penalty(&b.cam),
                    })
                    .sum::<f64>()
            })
            .fold(f64::INFINITY, f64::min);
        total += best;
    }
    Ok(total)
}

/// `‖R·mesh_up − world_up‖₁`.
pub fn up_axis_loss(rotation: &Mat3, mesh_up: &Vec3, world_up: &Vec3) -> f64 {
    (rotation * mesh_up - world_up).abs().sum()
}

/// Sum of `max(0, margin − depth)` over all annotated points.
pub fn front_loss(
    pose: &Pose9DoF,
    corr: &CorrespondenceSet,
    cams: &[CameraFrame],
    margin: f64,
) -> Result<f64, PoseError> {
    let lookup = camera_lookup(cams);
    let mut total = 0.0;
    for c in &corr.items {
        let cam = lookup
            .get(&c.frame_id)
            .ok_or(PoseError::MissingCamera(c.frame_id))?;
        let depth = camera_depth(cam, &pose.apply(&corr.oriented_point(&c.model_point)));
        total += (margin - depth).max(0.0);
    }
    Ok(total)
}

/// The combined objective at a pose, as the solver sees it for `cfg`.
pub fn total_loss(
    pose: &Pose9DoF,
    problem: &PoseProblem<'_>,
    sym: &SymmetryClass,
    cfg: &SolverConfig,
) -> Result<(f64, LossBreakdown), PoseError> {
    let objective = Objective::new(problem, cfg, effective_group(sym, cfg), ScaleMode::Full)?;
    let params = objective.params_from_pose(pose);
    let parts = objective
        .value(&params)
        .ok_or(PoseError::NonFinite { start: 0 })?;
    Ok((objective.total(&parts), parts))
}

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(Serialize, Deserialize))]
pub struct FrameError {
    pub frame_id: u32,
    pub mean_px: f64,
}

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(Serialize, Deserialize))]
pub struct SolveResult {
    pub pose: Pose9DoF,
    pub final_losses: LossBreakdown,
    /// Mean Euclidean pixel error over all correspondences.
    pub mean_reproj_px: f64,
    pub per_frame_reproj_px: Vec<FrameError>,
    /// Symmetry element chosen in the first annotated frame.
    pub chosen_symmetry_index: u32,
    pub scale_mode: ScaleMode,
    #[cfg_attr(feature = "serde", serde(default))]
    pub scale_note: Option<ScaleNote>,
    pub converged: bool,
    pub start_index: usize,
}

/// The 24 proper rotations of the cube, identity first.
pub fn octahedral_rotations() -> Vec<Mat3> {
    const PERMS: [[usize; 3]; 6] = [[0, 1, 2], [0, 2, 1], [1, 0, 2], [1, 2, 0], [2, 0, 1], [2, 1, 0]];
    let mut out = Vec::with_capacity(24);
    for perm in PERMS {
        for signs in 0..8u8 {
            let mut m = Mat3::zeros();
            for row in 0..3 {
                let s = if signs & (1 << row) != 0 { -1.0 } else { 1.0 };
                m[(row, perm[row])] = s;
            }
            if m.determinant() > 0.0 {
                out.push(m);
            }
        }
    }
    out
}

fn start_rotations(cfg: &SolverConfig) -> Vec<Mat3> {
    let mut starts = octahedral_rotations();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    while starts.len() < cfg.n_starts {
        let q: nalgebra::UnitQuaternion<f64> = random_quaternion(&mut rng);
        starts.push(q.to_rotation_matrix().into_inner());
    }
    starts.truncate(cfg.n_starts.max(1));
    starts
}

fn random_quaternion(rng: &mut ChaCha8Rng) -> nalgebra::UnitQuaternion<f64> {
    use rand::Rng;
    let (u1, u2, u3): (f64, f64, f64) = (rng.gen(), rng.gen(), rng.gen());
    let tau = core::f64::consts::TAU;
    let (a, b) = (libm::sqrt(1.0 - u1), libm::sqrt(u1));
    nalgebra::UnitQuaternion::from_quaternion(nalgebra::Quaternion::new(
        b * libm::cos(tau * u3),
        a * libm::sin(tau * u2),
        a * libm::cos(tau * u2),
        b * libm::sin(tau * u3),
    ))
}

/// Translation minimizing the algebraic reprojection error for a fixed
/// rotation and unit scale.
fn initial_translation(blocks: &[FrameBlock], rotation: &Mat3) -> Vec3 {
    let mut ata = Matrix3::<f64>::zeros();
    let mut atb = Vec3::zeros();
    for b in blocks {
        let k = &b.cam.intrinsics;
        let rc = &b.cam.rotation;
        let tc = &b.cam.translation;
        for (p, q) in b.points.iter().zip(&b.pixels) {
            let w = rotation * p;
            let x = (q.x - k.cx) / k.fx;
            let y = (q.y - k.cy) / k.fy;
            for (row, coord, tcoord) in [(0, x, tc.x), (1, y, tc.y)] {
                let a = rc.row(row).transpose() - rc.row(2).transpose() * coord;
                let rhs = -a.dot(&w) - (tcoord - coord * tc.z);
                ata += a * a.transpose();
                atb += a * rhs;
            }
        }
    }
    ata.try_inverse().map(|inv| inv * atb).unwrap_or_else(Vec3::zeros)
}

/// Recover the 9-DoF pose of `mesh` from `corr`.
pub fn estimate_pose(
    corr: &CorrespondenceSet,
    cams: &[CameraFrame],
    mesh: &TriangleMesh,
    sym: &SymmetryClass,
    cfg: &SolverConfig,
) -> Result<SolveResult, PoseError> {
    estimate_pose_for(&PoseProblem::new(corr, cams, mesh), sym, cfg)
}

/// [`estimate_pose`] with an explicit problem description.
pub fn estimate_pose_for(
    problem: &PoseProblem<'_>,
    sym: &SymmetryClass,
    cfg: &SolverConfig,
) -> Result<SolveResult, PoseError> {
    let corr = problem.corr;
    if corr.items.len() < 4 {
        return Err(PoseError::Underdetermined(corr.items.len()));
    }
    let group_sym = if cfg.symmetry_aware {
        sym.clone()
    } else {
        SymmetryClass::none(sym.axis)
    };
    let (mut mode, mut note) =
        scale_parameterization(corr, &group_sym, &problem.mesh_up, cfg.coplanar_rel_tol);
    if !cfg.coplanar_scale {
        if let ScaleMode::Coplanar2Dof { .. } = mode {
            mode = ScaleMode::Full;
            note = None;
        }
    }
    let objective = Objective::new(problem, cfg, effective_group(sym, cfg), mode)?;

    let mut best: Option<(f64, Vec<f64>, LossBreakdown, usize)> = None;
    for (start, rot) in start_rotations(cfg).iter().enumerate() {
        let init = Pose9DoF {
            translation: initial_translation(&objective.frames, rot),
            rotation: *rot,
            scale: Vec3::repeat(1.0),
        };
        let (value, params, parts) =
            run_start(&objective, cfg, &init).ok_or(PoseError::NonFinite { start })?;
        if best.as_ref().map_or(true, |b| value < b.0) {
            best = Some((value, params, parts, start));
        }
    }
    let (_, params, parts, start_index) = best.expect("at least one start");
    let pose = objective
        .pose_from_params(&params)
        .ok_or(PoseError::NonFinite { start: start_index })?;

    let residuals = objective.residuals(&pose);
    let n_items = corr.items.len() as f64;
    let mean_reproj_px = residuals
        .iter()
        .map(|r| r.mean_px * objective_frame_len(&objective, r))
        .sum::<f64>()
        / n_items;
    let converged = mean_reproj_px <= cfg.verify_tau_px;
    Ok(SolveResult {
        pose,
        final_losses: parts,
        mean_reproj_px,
        chosen_symmetry_index: residuals.first().map_or(0, |r| r.symmetry_index),
        per_frame_reproj_px: residuals
            .iter()
            .map(|r| FrameError {
                frame_id: r.frame_id,
                mean_px: r.mean_px,
            })
            .collect(),
        scale_mode: mode,
        scale_note: note,
        converged,
        start_index,
    })
}

fn objective_frame_len(objective: &Objective, r: &FrameResidual) -> f64 {
    objective
        .frames
        .iter()
        .find(|b| b.frame_id == r.frame_id)
        .map_or(0.0, |b| b.points.len() as f64)
}

/// Adam from one initial pose; returns the best iterate seen.
fn run_start(
    objective: &Objective,
    cfg: &SolverConfig,
    init: &Pose9DoF,
) -> Option<(f64, Vec<f64>, LossBreakdown)> {
    let mut params = objective.params_from_pose(init);
    let mut grad = vec![0.0; params.len()];
    let mut adam = crate::adam::Adam::new(params.len());
    let mut best: Option<(f64, Vec<f64>, LossBreakdown)> = None;
    for step in 0..=cfg.steps {
        let parts = objective.value_and_gradient(&params, &mut grad)?;
        let value = objective.total(&parts);
        if best.as_ref().map_or(true, |b| value < b.0) {
            best = Some((value, params.clone(), parts));
        }
        if step == cfg.steps {
            break;
        }
        adam.step(&mut params, &grad, cfg.lr_at(step));
    }
    best
}

/// Stand-in for human verification: the mean error is within `tau_px` and
/// no frame's mean exceeds `2·tau_px`.
pub fn verify_pose_proxy(result: &SolveResult, tau_px: f64) -> bool {
    verify_residuals(
        result.mean_reproj_px,
        result.per_frame_reproj_px.iter().map(|f| f.mean_px),
        tau_px,
    )
}

pub fn verify_residuals(mean_px: f64, per_frame: impl IntoIterator<Item = f64>, tau_px: f64) -> bool {
    mean_px <= tau_px && per_frame.into_iter().all(|m| m <= 2.0 * tau_px)
}
