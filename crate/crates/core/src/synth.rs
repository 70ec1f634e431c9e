//! Synthetic annotated scenes with known ground truth.
//!
//! Objects are procedural primitives standing upright on the floor `y = 0`,
//! seen by cameras on an arc around the scene. Correspondences come from
//! projecting surface samples and adding Gaussian pixel noise. On symmetric
//! objects each frame's model points are re-labelled by a random symmetry
//! rotation, the way an annotator picks "the same" point differently from
//! one frame to the next. Coplanar objects only get points from one planar
//! face, and their scale normal to that face is the mean of the other two.

use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;
use core::f64::consts::{PI, TAU};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::geometry::{axis_angle, project_point, CameraFrame, Intrinsics, Pose9DoF, Vec2, Vec3};
use crate::mesh::primitives::{box_mesh, l_extrusion, prism};
use crate::mesh::{sample_surface, SymmetryClass, TriangleMesh};
use crate::pose::{
    verify_pose_proxy, verify_residuals, Correspondence, CorrespondenceSet, FrameError, SolveResult,
};
use crate::retrieval::random_unit_vector;
use crate::scene::{Scene, SceneFrame, Split};
use crate::tracking::{BoundingBox, Detection, Track, TrackSource};

/// Population shares of symmetric and coplanar-annotated objects observed in
/// a large annotated video dataset.
pub const SYMMETRIC_FRACTION: f64 = 0.278;
pub const COPLANAR_FRACTION: f64 = 0.155;

pub const DESCRIPTOR_DIM: usize = 32;

#[derive(Debug, Clone, PartialEq)]
pub struct SynthSpec {
    pub objects: usize,
    pub cameras: usize,
    /// Inclusive range of annotated frames per object.
    pub frames_per_object: (usize, usize),
    /// Inclusive range of correspondences per annotated frame.
    pub points_per_frame: (usize, usize),
    /// Standard deviation of pixel noise per coordinate.
    pub pixel_noise: f64,
    pub symmetric_fraction: f64,
    pub coplanar_fraction: f64,
    pub flip_fraction: f64,
    pub image_size: (u32, u32),
    pub focal_px: f64,
    /// Angular extent of the camera arc.
    pub orbit_arc_deg: f64,
    pub camera_radius: (f64, f64),
    /// Objects are placed in `[-h, h]²` on the floor.
    pub placement_half_extent: f64,
    /// Chance that a frame of a symmetric object is annotated against a
    /// randomly rotated copy of the model.
    pub relabel_probability: f64,
    /// How far the real object departs from its CAD proxy: each clicked
    /// point is imaged from a spot displaced by Gaussian noise of this
    /// standard deviation, as a fraction of the model's bbox diagonal.
    pub shape_mismatch: f64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        SynthSpec {
            objects: 10,
            cameras: 6,
            frames_per_object: (3, 4),
            points_per_frame: (4, 6),
            pixel_noise: 1.0,
            symmetric_fraction: SYMMETRIC_FRACTION,
            coplanar_fraction: COPLANAR_FRACTION,
            flip_fraction: 0.1,
            image_size: (800, 600),
            focal_px: 600.0,
            orbit_arc_deg: 60.0,
            camera_radius: (7.0, 9.0),
            placement_half_extent: 2.5,
            relabel_probability: 1.0,
            shape_mismatch: 0.0,
        }
    }
}

impl SynthSpec {
    /// Harder capture conditions for comparing solver variants: longer
    /// lenses on a shorter camera path, CAD proxies that only roughly match
    /// the real object, and annotators who usually but not always orient the
    /// model consistently across frames.
    pub fn walkthrough() -> Self {
        SynthSpec {
            orbit_arc_deg: 30.0,
            focal_px: 900.0,
            shape_mismatch: 0.01,
            relabel_probability: 0.3,
            ..SynthSpec::default()
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ShapeKind {
    /// Rectangular footprint, 2-way symmetric.
    Oblong,
    /// Square footprint, 4-way symmetric.
    Square,
    /// 72-gon prism, 36-way symmetric.
    Round,
    /// L-shaped extrusion, no rotational symmetry.
    Irregular,
}

impl ShapeKind {
    pub fn symmetry_order(&self) -> u32 {
        match self {
            ShapeKind::Oblong => 2,
            ShapeKind::Square => 4,
            ShapeKind::Round => 36,
            ShapeKind::Irregular => 1,
        }
    }
}

#[derive(Debug, Clone)]
pub struct SyntheticObject {
    pub mesh: TriangleMesh,
    pub shape: ShapeKind,
    pub symmetry: SymmetryClass,
    pub pose: Pose9DoF,
    pub correspondences: CorrespondenceSet,
    pub track: Track,
    /// Model axis normal to the annotated face, for coplanar objects.
    pub coplanar_axis: Option<usize>,
}

#[derive(Debug, Clone)]
pub struct SyntheticScene {
    pub scene: Scene,
    pub objects: Vec<SyntheticObject>,
}

impl SyntheticScene {
    pub fn cameras(&self) -> Vec<CameraFrame> {
        self.scene.cameras()
    }

    /// Diagonal of the box around all camera centres and object positions.
    pub fn diameter(&self) -> f64 {
        let mut pts: Vec<Vec3> = self.scene.frames.iter().map(|f| f.camera.center()).collect();
        pts.extend(self.objects.iter().map(|o| o.pose.translation));
        crate::geometry::bounds(&pts).map_or(0.0, |(lo, hi)| (hi - lo).norm())
    }
}

fn uniform(rng: &mut ChaCha8Rng, (lo, hi): (f64, f64)) -> f64 {
    lo + (hi - lo) * rng.gen::<f64>()
}

fn log_uniform(rng: &mut ChaCha8Rng, lo: f64, hi: f64) -> f64 {
    libm::exp(uniform(rng, (libm::log(lo), libm::log(hi))))
}

fn inclusive(rng: &mut ChaCha8Rng, (lo, hi): (usize, usize)) -> usize {
    if hi <= lo {
        lo
    } else {
        rng.gen_range(lo..=hi)
    }
}

const UPRIGHT_IRREGULAR: [&str; 5] = ["chair", "sofa", "cabinet", "bed", "bookshelf"];

fn make_shape(rng: &mut ChaCha8Rng, kind: ShapeKind) -> (TriangleMesh, &'static str) {
    match kind {
        ShapeKind::Oblong => {
            let w = uniform(rng, (1.0, 1.4));
            let d = w * uniform(rng, (0.45, 0.6));
            (box_mesh(w, uniform(rng, (0.5, 0.9)), d), "table")
        }
        ShapeKind::Square => {
            let w = uniform(rng, (0.7, 1.1));
            (box_mesh(w, uniform(rng, (0.4, 1.0)), w), "table")
        }
        ShapeKind::Round => {
            let cat = if rng.gen::<bool>() { "table" } else { "lamp" };
            (
                prism(72, uniform(rng, (0.35, 0.55)), uniform(rng, (0.5, 1.2))),
                cat,
            )
        }
        ShapeKind::Irregular => {
            let size = uniform(rng, (0.8, 1.2));
            let mesh = l_extrusion(size, uniform(rng, (0.6, 1.2)), size * uniform(rng, (0.3, 0.45)));
            (mesh, UPRIGHT_IRREGULAR[rng.gen_range(0..UPRIGHT_IRREGULAR.len())])
        }
    }
}

fn make_cameras(spec: &SynthSpec, rng: &mut ChaCha8Rng) -> Vec<CameraFrame> {
    let (w, h) = spec.image_size;
    let k = Intrinsics {
        fx: spec.focal_px,
        fy: spec.focal_px,
        cx: w as f64 / 2.0,
        cy: h as f64 / 2.0,
    };
    let centre_angle = rng.gen::<f64>() * TAU;
    let arc = spec.orbit_arc_deg.to_radians();
    let n = spec.cameras.max(1);
    (0..n)
        .map(|i| {
            let t = if n > 1 { i as f64 / (n - 1) as f64 - 0.5 } else { 0.0 };
            let angle = centre_angle + arc * t;
            let radius = uniform(rng, spec.camera_radius);
            let eye = Vec3::new(
                radius * libm::cos(angle),
                uniform(rng, (1.4, 1.8)),
                radius * libm::sin(angle),
            );
            let target = Vec3::new(
                uniform(rng, (-0.3, 0.3)),
                0.4,
                uniform(rng, (-0.3, 0.3)),
            );
            let mut cam = CameraFrame::look_at(i as u32, k, &eye, &target, &Vec3::y(), spec.image_size)
                .expect("orbit camera is valid");
            cam.timestamp_us = i as i64 * 33_333;
            cam
        })
        .collect()
}

/// Object kinds for a scene with the requested shares, in random order.
fn assign_kinds(spec: &SynthSpec, rng: &mut ChaCha8Rng) -> Vec<(ShapeKind, bool)> {
    let n = spec.objects;
    let n_sym = libm::round(spec.symmetric_fraction.clamp(0.0, 1.0) * n as f64) as usize;
    let n_cop = libm::round(spec.coplanar_fraction.clamp(0.0, 1.0) * n as f64) as usize;
    let mut kinds: Vec<(ShapeKind, bool)> = (0..n)
        .map(|i| {
            let kind = if i < n_sym {
                [ShapeKind::Oblong, ShapeKind::Square, ShapeKind::Round][rng.gen_range(0..3)]
            } else {
                ShapeKind::Irregular
            };
            (kind, false)
        })
        .collect();
    // coplanar annotations go to irregular shapes first, then to
    // oblong/square ones; round objects keep the tied-scale model
    let mut order: Vec<usize> = (n_sym..n).collect();
    order.extend((0..n_sym).filter(|&i| kinds[i].0 != ShapeKind::Round));
    for &i in order.iter().take(n_cop) {
        kinds[i].1 = true;
    }
    kinds.shuffle(rng);
    kinds
}

/// Generate a scene with ground truth. Deterministic in `seed`.
pub fn generate_synthetic_scene(spec: &SynthSpec, seed: u64) -> SyntheticScene {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cameras = make_cameras(spec, &mut rng);
    let scene = Scene {
        scene_id: format!("synth-{seed}"),
        frames: cameras
            .iter()
            .map(|c| SceneFrame {
                camera: c.clone(),
                image: format!("frames/{:04}.png", c.frame_id),
            })
            .collect(),
        world_up: Vec3::y(),
        split: Split::Train,
    };
    let objects = assign_kinds(spec, &mut rng)
        .into_iter()
        .enumerate()
        .map(|(i, (kind, coplanar))| make_object(spec, &cameras, &mut rng, seed, i, kind, coplanar))
        .collect();
    SyntheticScene { scene, objects }
}

fn make_object(
    spec: &SynthSpec,
    cameras: &[CameraFrame],
    rng: &mut ChaCha8Rng,
    seed: u64,
    index: usize,
    shape: ShapeKind,
    coplanar: bool,
) -> SyntheticObject {
    let (mesh, category) = make_shape(rng, shape);
    let model_id = format!("synth-{seed}-model-{index:03}");
    let track_id = format!("synth-{seed}-track-{index:03}");
    let mesh = mesh.with_identity(&model_id, category);
    let symmetry = SymmetryClass::new(shape.symmetry_order(), mesh.up_axis).expect("valid order");

    let coplanar_axis = coplanar.then(|| match shape {
        ShapeKind::Oblong | ShapeKind::Square if rng.gen::<f64>() < 0.4 => 2,
        _ => 1,
    });

    let mut scale = Vec3::new(
        log_uniform(rng, 0.7, 1.4),
        log_uniform(rng, 0.7, 1.4),
        log_uniform(rng, 0.7, 1.4),
    );
    if matches!(shape, ShapeKind::Square | ShapeKind::Round) {
        scale.z = scale.x;
    }
    if let Some(axis) = coplanar_axis {
        let others: f64 = (0..3).filter(|&k| k != axis).map(|k| scale[k]).sum();
        scale[axis] = 0.5 * others;
    }
    let flipped = rng.gen::<f64>() < spec.flip_fraction;
    let (lo, hi) = mesh.bounds();

    // points the annotator may click: the whole surface, or one face
    let samples = sample_surface(&mesh, 600, rng.gen()).expect("primitive has area");
    let pool: Vec<Vec3> = match coplanar_axis {
        Some(axis) => samples
            .into_iter()
            .filter(|p| (p[axis] - hi[axis]).abs() <= 1e-9 * (1.0 + hi[axis].abs()))
            .collect(),
        None => samples,
    };

    let sigma = spec.shape_mismatch * mesh.bbox_diagonal();
    let mismatch: Vec<Vec3> = pool
        .iter()
        .map(|_| {
            if sigma > 0.0 {
                Vec3::from_fn(|_, _| sigma * rng.sample::<f64, _>(StandardNormal))
            } else {
                Vec3::zeros()
            }
        })
        .collect();
    let orient = |p: &Vec3| if flipped { crate::pose::flip(p) } else { *p };
    let half = spec.placement_half_extent;
    let mut attempt = 0;
    loop {
        attempt += 1;
        let rotation = axis_angle(&Vec3::y(), rng.gen::<f64>() * TAU);
        // the arc looks at the origin, so the last attempt parks the object there
        let half = if attempt >= 100 { 0.0 } else { half };
        let translation = Vec3::new(
            uniform(rng, (-half, half)),
            -lo.y * scale.y,
            uniform(rng, (-half, half)),
        );
        let pose = Pose9DoF::new(translation, rotation, scale).expect("valid pose");

        let visible: Vec<&CameraFrame> = cameras
            .iter()
            .filter(|c| fully_visible(c, &pose, &mesh))
            .collect();
        let need = spec.frames_per_object.0.min(cameras.len());
        if visible.len() < need && attempt < 100 {
            continue;
        }

        let n_frames = inclusive(rng, spec.frames_per_object).min(visible.len());
        let mut chosen: Vec<&CameraFrame> = visible.clone();
        chosen.shuffle(rng);
        chosen.truncate(n_frames);
        chosen.sort_by_key(|c| c.frame_id);

        let mut items = Vec::new();
        for cam in &chosen {
            let on_screen: Vec<(Vec3, Vec2)> = pool
                .iter()
                .zip(&mismatch)
                .filter_map(|(p, d)| {
                    let px = project_point(cam, &pose.apply(&orient(&(p + d)))).ok()?;
                    cam.contains_pixel(&px).then_some((*p, px))
                })
                .collect();
            let n_points = inclusive(rng, spec.points_per_frame).min(on_screen.len());
            let relabel = if symmetry.order > 1 && rng.gen::<f64>() < spec.relabel_probability {
                symmetry.element(rng.gen_range(0..symmetry.order))
            } else {
                crate::geometry::Mat3::identity()
            };
            for (p, px) in spread_out(&on_screen, n_points, rng) {
                let nu: f64 = rng.sample(StandardNormal);
                let nv: f64 = rng.sample(StandardNormal);
                items.push(Correspondence {
                    frame_id: cam.frame_id,
                    model_point: relabel * p,
                    pixel: px + Vec2::new(nu, nv) * spec.pixel_noise,
                });
            }
        }

        let base = random_unit_vector(DESCRIPTOR_DIM, rng.gen());
        let detections: Vec<Detection> = visible
            .iter()
            .map(|cam| Detection {
                frame_id: cam.frame_id,
                bbox: projected_box(cam, &pose, &mesh, flipped),
                category: category.to_string(),
                score: 0.9,
                descriptor: jitter(&base, rng, 0.05),
            })
            .collect();
        let track = Track::from_detections(track_id.clone(), detections, TrackSource::Automatic)
            .expect("object is visible in at least one frame");

        return SyntheticObject {
            mesh,
            shape,
            symmetry,
            pose,
            correspondences: CorrespondenceSet {
                track_id,
                model_id,
                flipped,
                items,
            },
            track,
            coplanar_axis,
        };
    }
}

/// Greedy farthest-point pick from a random start, mimicking annotators who
/// click distinctive, well separated points.
fn spread_out<'a>(
    candidates: &'a [(Vec3, Vec2)],
    n: usize,
    rng: &mut ChaCha8Rng,
) -> Vec<&'a (Vec3, Vec2)> {
    if candidates.is_empty() || n == 0 {
        return Vec::new();
    }
    let mut picked = alloc::vec![rng.gen_range(0..candidates.len())];
    let mut dist: Vec<f64> = candidates
        .iter()
        .map(|c| (c.0 - candidates[picked[0]].0).norm())
        .collect();
    while picked.len() < n.min(candidates.len()) {
        let (next, _) = dist
            .iter()
            .enumerate()
            .fold((0, -1.0), |best, (i, &d)| if d > best.1 { (i, d) } else { best });
        picked.push(next);
        for (d, c) in dist.iter_mut().zip(candidates) {
            *d = d.min((c.0 - candidates[next].0).norm());
        }
    }
    picked.into_iter().map(|i| &candidates[i]).collect()
}

fn fully_visible(cam: &CameraFrame, pose: &Pose9DoF, mesh: &TriangleMesh) -> bool {
    mesh.vertices.iter().all(|v| {
        project_point(cam, &pose.apply(v))
            .map(|px| cam.contains_pixel(&px))
            .unwrap_or(false)
    })
}

fn projected_box(cam: &CameraFrame, pose: &Pose9DoF, mesh: &TriangleMesh, flipped: bool) -> BoundingBox {
    let mut b = BoundingBox::new(f64::INFINITY, f64::INFINITY, f64::NEG_INFINITY, f64::NEG_INFINITY);
    for v in &mesh.vertices {
        let v = if flipped { crate::pose::flip(v) } else { *v };
        if let Ok(px) = project_point(cam, &pose.apply(&v)) {
            b.x_min = b.x_min.min(px.x.max(0.0));
            b.y_min = b.y_min.min(px.y.max(0.0));
            b.x_max = b.x_max.max(px.x.min(cam.width as f64));
            b.y_max = b.y_max.max(px.y.min(cam.height as f64));
        }
    }
    b
}

fn jitter(base: &[f32], rng: &mut ChaCha8Rng, sigma: f64) -> Vec<f32> {
    let v: Vec<f64> = base
        .iter()
        .map(|&x| x as f64 + sigma * rng.sample::<f64, _>(StandardNormal) / libm::sqrt(base.len() as f64))
        .collect();
    let n = libm::sqrt(v.iter().map(|x| x * x).sum());
    v.iter().map(|x| (x / n) as f32).collect()
}

/// Smallest rotation angle between `estimate` and `truth` composed with any
/// symmetry element.
pub fn rotation_error_mod_symmetry(
    estimate: &crate::geometry::Mat3,
    truth: &crate::geometry::Mat3,
    symmetry: &SymmetryClass,
) -> f64 {
    symmetry
        .elements()
        .iter()
        .map(|g| crate::geometry::rotation_angle_between(estimate, &(truth * g)))
        .fold(PI, f64::min)
}

/// Descriptive label for a generated object, used in reports.
pub fn object_label(obj: &SyntheticObject) -> String {
    let mut s = format!("{:?}", obj.shape).to_lowercase();
    if obj.coplanar_axis.is_some() {
        s.push_str("+coplanar");
    }
    if obj.correspondences.flipped {
        s.push_str("+flipped");
    }
    s
}

/// Surface samples used for overlay checks.
pub const OVERLAY_SAMPLES: usize = 200;
const OVERLAY_SEED: u64 = 0x6f76_6c79;

/// Mean pixel distance between the model rendered under `solved` and under
/// the ground truth, for every frame the object is tracked in. Each frame
/// takes its best symmetry element, since symmetric renders coincide.
pub fn overlay_residuals(obj: &SyntheticObject, solved: &Pose9DoF, cams: &[CameraFrame]) -> Vec<FrameError> {
    let samples: Vec<Vec3> = sample_surface(&obj.mesh, OVERLAY_SAMPLES, OVERLAY_SEED)
        .expect("generated meshes have area")
        .iter()
        .map(|p| obj.correspondences.oriented_point(p))
        .collect();
    let group = obj.symmetry.elements();
    cams.iter()
        .filter(|c| obj.track.detection_in(c.frame_id).is_some())
        .map(|cam| {
            let mean_px = group
                .iter()
                .map(|g| {
                    samples
                        .iter()
                        .map(|p| {
                            match (
                                project_point(cam, &solved.apply(p)),
                                project_point(cam, &obj.pose.apply(&(g * p))),
                            ) {
                                (Ok(a), Ok(b)) => (a - b).norm(),
                                _ => f64::INFINITY,
                            }
                        })
                        .sum::<f64>()
                        / samples.len() as f64
                })
                .fold(f64::INFINITY, f64::min);
            FrameError {
                frame_id: cam.frame_id,
                mean_px,
            }
        })
        .collect()
}

/// Whether `result` would pass an overlay check against the ground truth:
/// the reprojection proxy passes and the rendered model sits within the same
/// thresholds of the true one.
pub fn overlay_verified(obj: &SyntheticObject, result: &SolveResult, cams: &[CameraFrame], tau_px: f64) -> bool {
    if !verify_pose_proxy(result, tau_px) {
        return false;
    }
    let frames = overlay_residuals(obj, &result.pose, cams);
    if frames.is_empty() {
        return false;
    }
    let mean = frames.iter().map(|f| f.mean_px).sum::<f64>() / frames.len() as f64;
    verify_residuals(mean, frames.iter().map(|f| f.mean_px), tau_px)
}
