//! Pinhole cameras, 9-DoF pose transforms, and plane fitting.
//!
//! Cameras follow the usual SfM convention: extrinsics map world points into
//! a camera frame whose +z axis points forward, and pixel (0, 0) is the
//! top-left corner of the image.

use nalgebra::{Matrix3, Rotation3, SymmetricEigen, Unit, Vector2, Vector3};
#[cfg(feature = "serde")]
use serde::{Deserialize, Serialize};

pub type Vec2 = Vector2<f64>;
pub type Vec3 = Vector3<f64>;
pub type Mat3 = Matrix3<f64>;

const ROTATION_TOL: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum GeometryError {
    #[error("rotation is not orthonormal with det +1 (deviation {deviation:.3e})")]
    NotARotation { deviation: f64 },
    #[error("focal lengths must be positive (fx={fx}, fy={fy})")]
    BadFocalLength { fx: f64, fy: f64 },
    #[error("image size must be positive ({width}x{height})")]
    BadImageSize { width: u32, height: u32 },
    #[error("scale components must be positive and finite")]
    BadScale,
    #[error("plane fit needs at least 3 points, got {0}")]
    TooFewPoints(usize),
}

/// How far `r` is from SO(3): max of |RᵀR − I| entries and |det − 1|.
pub fn rotation_deviation(r: &Mat3) -> f64 {
    let ortho = (r.transpose() * r - Mat3::identity()).abs().max();
    let det = (r.determinant() - 1.0).abs();
    if ortho.is_nan() || det.is_nan() {
        return f64::INFINITY;
    }
    ortho.max(det)
}

fn check_rotation(r: &Mat3) -> Result<(), GeometryError> {
    let deviation = rotation_deviation(r);
    if deviation > ROTATION_TOL {
        return Err(GeometryError::NotARotation { deviation });
    }
    Ok(())
}

/// Rotation by `angle` radians about `axis` (need not be normalized).
pub fn axis_angle(axis: &Vec3, angle: f64) -> Mat3 {
    Rotation3::from_axis_angle(&Unit::new_normalize(*axis), angle).into_inner()
}

/// Geodesic angle in radians between two rotations.
pub fn rotation_angle_between(a: &Mat3, b: &Mat3) -> f64 {
    let rel = a.transpose() * b;
    let c = ((rel.trace() - 1.0) * 0.5).clamp(-1.0, 1.0);
    libm::acos(c)
}

#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(Serialize, Deserialize))]
pub struct Intrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
}

/// One video frame's calibrated camera.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(
    feature = "serde",
    derive(Serialize, Deserialize),
    serde(into = "CameraRecord", try_from = "CameraRecord")
)]
pub struct CameraFrame {
    pub frame_id: u32,
    pub intrinsics: Intrinsics,
    /// World-to-camera rotation.
    pub rotation: Mat3,
    /// World-to-camera translation.
    pub translation: Vec3,
    pub width: u32,
    pub height: u32,
    pub timestamp_us: i64,
}

impl CameraFrame {
    pub fn new(
        frame_id: u32,
        intrinsics: Intrinsics,
        rotation: Mat3,
        translation: Vec3,
        (width, height): (u32, u32),
        timestamp_us: i64,
    ) -> Result<Self, GeometryError> {
        let cam = CameraFrame {
            frame_id,
            intrinsics,
            rotation,
            translation,
            width,
            height,
            timestamp_us,
        };
        cam.validate()?;
        Ok(cam)
    }

    pub fn validate(&self) -> Result<(), GeometryError> {
        let Intrinsics { fx, fy, .. } = self.intrinsics;
        if !(fx > 0.0 && fy > 0.0) {
            return Err(GeometryError::BadFocalLength { fx, fy });
        }
        if self.width == 0 || self.height == 0 {
            return Err(GeometryError::BadImageSize {
                width: self.width,
                height: self.height,
            });
        }
        check_rotation(&self.rotation)
    }

    /// Camera that sits at `eye` and looks at `target`, with image-up
    /// roughly along `up`.
    pub fn look_at(
        frame_id: u32,
        intrinsics: Intrinsics,
        eye: &Vec3,
        target: &Vec3,
        up: &Vec3,
        size: (u32, u32),
    ) -> Result<Self, GeometryError> {
        let forward = (target - eye).normalize();
        let right = forward.cross(up).normalize();
        // image y points down
        let down = forward.cross(&right);
        let rotation = Mat3::from_rows(&[right.transpose(), down.transpose(), forward.transpose()]);
        let translation = -(rotation * eye);
        Self::new(frame_id, intrinsics, rotation, translation, size, 0)
    }

    pub fn to_camera(&self, p_world: &Vec3) -> Vec3 {
        self.rotation * p_world + self.translation
    }

    /// Camera centre in world coordinates.
    pub fn center(&self) -> Vec3 {
        -(self.rotation.transpose() * self.translation)
    }

    /// Perspective division of a camera-frame point with positive depth.
    pub fn pixel_from_camera(&self, p_cam: &Vec3) -> Vec2 {
        let k = &self.intrinsics;
        Vec2::new(
            k.fx * p_cam.x / p_cam.z + k.cx,
            k.fy * p_cam.y / p_cam.z + k.cy,
        )
    }

    pub fn contains_pixel(&self, px: &Vec2) -> bool {
        px.x >= 0.0 && px.y >= 0.0 && px.x < self.width as f64 && px.y < self.height as f64
    }
}

#[cfg(feature = "serde")]
#[derive(Serialize, Deserialize)]
struct CameraRecord {
    frame_id: u32,
    intrinsics: [f64; 4],
    extrinsics: [f64; 12],
    image_size: [u32; 2],
    #[serde(default)]
    timestamp_us: i64,
}

#[cfg(feature = "serde")]
impl From<CameraFrame> for CameraRecord {
    fn from(c: CameraFrame) -> Self {
        let mut extrinsics = [0.0; 12];
        for r in 0..3 {
            for col in 0..3 {
                extrinsics[4 * r + col] = c.rotation[(r, col)];
            }
            extrinsics[4 * r + 3] = c.translation[r];
        }
        let k = c.intrinsics;
        CameraRecord {
            frame_id: c.frame_id,
            intrinsics: [k.fx, k.fy, k.cx, k.cy],
            extrinsics,
            image_size: [c.width, c.height],
            timestamp_us: c.timestamp_us,
        }
    }
}

#[cfg(feature = "serde")]
impl TryFrom<CameraRecord> for CameraFrame {
    type Error = GeometryError;

    fn try_from(r: CameraRecord) -> Result<Self, Self::Error> {
        let e = &r.extrinsics;
        let rotation = Mat3::new(e[0], e[1], e[2], e[4], e[5], e[6], e[8], e[9], e[10]);
        let translation = Vec3::new(e[3], e[7], e[11]);
        let [fx, fy, cx, cy] = r.intrinsics;
        CameraFrame::new(
            r.frame_id,
            Intrinsics { fx, fy, cx, cy },
            rotation,
            translation,
            (r.image_size[0], r.image_size[1]),
            r.timestamp_us,
        )
    }
}

/// Translation, rotation and per-axis scale taking a CAD model from its
/// canonical frame into the world.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(
    feature = "serde",
    derive(Serialize, Deserialize),
    serde(into = "PoseRecord", try_from = "PoseRecord")
)]
pub struct Pose9DoF {
    pub translation: Vec3,
    pub rotation: Mat3,
    pub scale: Vec3,
}

impl Pose9DoF {
    pub fn new(translation: Vec3, rotation: Mat3, scale: Vec3) -> Result<Self, GeometryError> {
        let pose = Pose9DoF {
            translation,
            rotation,
            scale,
        };
        pose.validate()?;
        Ok(pose)
    }

    pub fn identity() -> Self {
        Pose9DoF {
            translation: Vec3::zeros(),
            rotation: Mat3::identity(),
            scale: Vec3::repeat(1.0),
        }
    }

    pub fn validate(&self) -> Result<(), GeometryError> {
        if !self.scale.iter().all(|s| s.is_finite() && *s > 0.0)
            || !self.translation.iter().all(|t| t.is_finite())
        {
            return Err(GeometryError::BadScale);
        }
        check_rotation(&self.rotation)
    }

    pub fn apply(&self, p: &Vec3) -> Vec3 {
        self.rotation * self.scale.component_mul(p) + self.translation
    }
}

#[cfg(feature = "serde")]
#[derive(Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
struct PoseRecord {
    t: [f64; 3],
    #[serde(with = "crate::serde_helpers::mat3_row_major")]
    r: Mat3,
    s: [f64; 3],
}

#[cfg(feature = "serde")]
impl From<Pose9DoF> for PoseRecord {
    fn from(p: Pose9DoF) -> Self {
        PoseRecord {
            t: p.translation.into(),
            r: p.rotation,
            s: p.scale.into(),
        }
    }
}

#[cfg(feature = "serde")]
impl TryFrom<PoseRecord> for Pose9DoF {
    type Error = GeometryError;

    fn try_from(r: PoseRecord) -> Result<Self, Self::Error> {
        Pose9DoF::new(r.t.into(), r.r, r.s.into())
    }
}

/// `R·(S⊙p) + T`: scale in the model's own axes, then rotate, then translate.
pub fn apply_pose(pose: &Pose9DoF, p: &Vec3) -> Vec3 {
    pose.apply(p)
}

/// Returned by [`project_point`] for points at or behind the camera plane.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BehindCamera {
    pub depth: f64,
}

/// Pixel coordinates of a world point. The result may fall outside the
/// image; only non-positive depth is reported.
pub fn project_point(cam: &CameraFrame, p_world: &Vec3) -> Result<Vec2, BehindCamera> {
    let p_cam = cam.to_camera(p_world);
    if p_cam.z <= 0.0 {
        return Err(BehindCamera { depth: p_cam.z });
    }
    Ok(cam.pixel_from_camera(&p_cam))
}

/// Signed depth of a world point along the camera's optical axis.
pub fn camera_depth(cam: &CameraFrame, p_world: &Vec3) -> f64 {
    cam.rotation.row(2).transpose().dot(p_world) + cam.translation.z
}

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(Serialize, Deserialize))]
pub struct PlaneFit {
    /// Unit normal; for degenerate input it is the least-spread direction
    /// and carries no meaning.
    pub normal: Vec3,
    /// Plane is `normal · x = offset`.
    pub offset: f64,
    pub rms_residual: f64,
    /// Points were collinear or coincident.
    pub is_degenerate: bool,
}

/// Least-squares plane through `points`.
///
/// The second value is `σ_min ≤ rel_tol·σ_max` over the singular values of
/// the centred point matrix. Three non-collinear points are always
/// coplanar; degenerate inputs are never reported coplanar.
pub fn fit_plane(points: &[Vec3], rel_tol: f64) -> Result<(PlaneFit, bool), GeometryError> {
    if points.len() < 3 {
        return Err(GeometryError::TooFewPoints(points.len()));
    }
    let n = points.len() as f64;
    let centroid = points.iter().fold(Vec3::zeros(), |acc, p| acc + p) / n;
    let mut scatter = Mat3::zeros();
    for p in points {
        let d = p - centroid;
        scatter += d * d.transpose();
    }
    let eig = SymmetricEigen::new(scatter);
    let mut order = [0usize, 1, 2];
    order.sort_by(|&a, &b| eig.eigenvalues[a].total_cmp(&eig.eigenvalues[b]));
    let sigma = |i: usize| libm::sqrt(eig.eigenvalues[order[i]].max(0.0));
    let (s_min, s_mid, s_max) = (sigma(0), sigma(1), sigma(2));

    let normal = eig.eigenvectors.column(order[0]).normalize();
    let offset = normal.dot(&centroid);
    let rms_residual = s_min / libm::sqrt(n);

    let extent = points
        .iter()
        .map(|p| (p - centroid).norm())
        .fold(0.0f64, f64::max);
    let is_degenerate = s_max <= 1e-12 * extent.max(1e-300) || s_mid <= 1e-9 * s_max;
    let fit = PlaneFit {
        normal,
        offset,
        rms_residual,
        is_degenerate,
    };
    let coplanar = !is_degenerate && (points.len() == 3 || s_min <= rel_tol * s_max);
    Ok((fit, coplanar))
}

/// Default relative tolerance for [`fit_plane`] coplanarity.
pub const COPLANAR_REL_TOL: f64 = 0.02;

/// Axis-aligned bounding box of a point set as `(min, max)`.
pub fn bounds(points: &[Vec3]) -> Option<(Vec3, Vec3)> {
    let first = points.first()?;
    Some(points.iter().fold((*first, *first), |(lo, hi), p| {
        (lo.inf(p), hi.sup(p))
    }))
}
