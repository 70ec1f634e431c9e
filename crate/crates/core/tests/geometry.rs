//! Projection and plane fitting checked against direct constructions.

use cadkit_core::geometry::{
    apply_pose, camera_depth, fit_plane, project_point, CameraFrame, Intrinsics, Mat3, Pose9DoF, Vec2, Vec3,
};
use nalgebra::{Matrix3x4, Rotation3, Vector4};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

fn rotation(axis: [f64; 3], angle: f64) -> Mat3 {
    let a = Vec3::from(axis);
    if a.norm() < 1e-6 {
        return Mat3::identity();
    }
    *Rotation3::from_scaled_axis(a.normalize() * angle).matrix()
}

fn vec3() -> impl Strategy<Value = [f64; 3]> {
    [-5.0..5.0f64, -5.0..5.0f64, -5.0..5.0f64]
}

fn camera(r: Mat3, t: Vec3) -> CameraFrame {
    let k = Intrinsics {
        fx: 700.0,
        fy: 650.0,
        cx: 400.0,
        cy: 300.0,
    };
    CameraFrame::new(0, k, r, t, (800, 600), 0).unwrap()
}

/// `K [R | t]` applied to the homogeneous point, then dehomogenized.
fn projection_matrix_oracle(cam: &CameraFrame, p: &Vec3) -> Option<Vec2> {
    let k = &cam.intrinsics;
    let kmat = Mat3::new(k.fx, 0.0, k.cx, 0.0, k.fy, k.cy, 0.0, 0.0, 1.0);
    let mut rt = Matrix3x4::zeros();
    rt.fixed_view_mut::<3, 3>(0, 0).copy_from(&cam.rotation);
    rt.set_column(3, &cam.translation);
    let h = kmat * rt * Vector4::new(p.x, p.y, p.z, 1.0);
    (h.z > 0.0).then(|| Vec2::new(h.x / h.z, h.y / h.z))
}

#[test]
fn noisy_plane_matches_regression_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(42);
    let expected = Vec3::new(1.0, 1.0, 1.0).normalize();
    for _ in 0..20 {
        let points: Vec<Vec3> = (0..20)
            .map(|_| {
                let (x, y): (f64, f64) = (rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0));
                let noise: f64 = rng.sample::<f64, _>(StandardNormal) * 1e-4;
                Vec3::new(x, y, 1.0 - x - y + noise)
            })
            .collect();
        let (fit, coplanar) = fit_plane(&points, 0.01).unwrap();
        assert!(coplanar);
        assert!(!fit.is_degenerate);

        // z = a·x + b·y + c by normal equations
        let mut ata = Mat3::zeros();
        let mut atz = Vec3::zeros();
        for p in &points {
            let row = Vec3::new(p.x, p.y, 1.0);
            ata += row * row.transpose();
            atz += row * p.z;
        }
        let abc = ata.try_inverse().unwrap() * atz;
        let oracle = Vec3::new(-abc.x, -abc.y, 1.0).normalize();

        assert!((fit.normal.norm() - 1.0).abs() < 1e-9);
        assert!(fit.normal.dot(&oracle).abs() > 1.0 - 1e-8);
        assert!(fit.normal.dot(&expected).abs() > 1.0 - 1e-6);
        assert!(fit.rms_residual < 3e-4);
    }
}

#[test]
fn pinned_projection_examples() {
    let k = Intrinsics {
        fx: 100.0,
        fy: 100.0,
        cx: 50.0,
        cy: 50.0,
    };
    let cam = CameraFrame::new(0, k, Mat3::identity(), Vec3::zeros(), (100, 100), 0).unwrap();
    assert_eq!(project_point(&cam, &Vec3::new(0.0, 0.0, 1.0)).unwrap(), Vec2::new(50.0, 50.0));
    assert_eq!(project_point(&cam, &Vec3::new(1.0, 1.0, 2.0)).unwrap(), Vec2::new(100.0, 100.0));
    assert!(project_point(&cam, &Vec3::new(0.0, 0.0, -1.0)).is_err());
    assert_eq!(camera_depth(&cam, &Vec3::new(5.0, 5.0, -2.0)), -2.0);
}

proptest! {
    #[test]
    fn projection_matches_homogeneous_matrix(
        axis in vec3(), angle in -3.1..3.1f64, t in vec3(), p in vec3(),
    ) {
        let cam = camera(rotation(axis, angle), Vec3::from(t));
        let p = Vec3::from(p);
        match (project_point(&cam, &p), projection_matrix_oracle(&cam, &p)) {
            (Ok(px), Some(oracle)) => prop_assert!((px - oracle).norm() < 1e-6 * (1.0 + oracle.norm())),
            (Err(_), None) => {}
            (got, oracle) => prop_assert!(
                camera_depth(&cam, &p).abs() < 1e-9,
                "disagree away from the image plane: {got:?} vs {oracle:?}"
            ),
        }
    }

    #[test]
    fn identity_pose_and_origin(p in vec3(), t in vec3(), s in [0.1..3.0f64, 0.1..3.0f64, 0.1..3.0f64],
                                axis in vec3(), angle in -3.1..3.1f64) {
        let p = Vec3::from(p);
        prop_assert_eq!(apply_pose(&Pose9DoF::identity(), &p), p);
        let pose = Pose9DoF::new(Vec3::from(t), rotation(axis, angle), Vec3::from(s)).unwrap();
        prop_assert_eq!(apply_pose(&pose, &Vec3::zeros()), Vec3::from(t));
        let expected = pose.rotation * p.component_mul(&pose.scale) + pose.translation;
        prop_assert!((apply_pose(&pose, &p) - expected).norm() < 1e-12);
    }

    /// Moving the world by a rigid transform G while re-expressing both the
    /// camera and the object in the new world leaves every pixel in place.
    #[test]
    fn projection_is_invariant_to_rebasing(
        cam_axis in vec3(), cam_angle in -3.1..3.1f64,
        obj_axis in vec3(), obj_angle in -3.1..3.1f64, obj_t in vec3(),
        g_axis in vec3(), g_angle in -3.1..3.1f64, g_t in vec3(),
        p in vec3(),
    ) {
        let obj = Pose9DoF::new(Vec3::from(obj_t), rotation(obj_axis, obj_angle), Vec3::new(1.5, 0.7, 1.1)).unwrap();
        // keep the object in front of the camera
        let rc = rotation(cam_axis, cam_angle);
        let tc = -(rc * obj.translation) + Vec3::new(0.0, 0.0, 20.0);
        let cam = camera(rc, tc);

        let (rg, tg) = (rotation(g_axis, g_angle), Vec3::from(g_t));
        let moved_obj = Pose9DoF::new(rg * obj.translation + tg, rg * obj.rotation, obj.scale).unwrap();
        let moved_cam = camera(rc * rg.transpose(), tc - rc * rg.transpose() * tg);

        let p = Vec3::from(p) * 0.2;
        let before = project_point(&cam, &apply_pose(&obj, &p));
        let after = project_point(&moved_cam, &apply_pose(&moved_obj, &p));
        match (before, after) {
            (Ok(a), Ok(b)) => prop_assert!((a - b).norm() < 1e-6, "{a} vs {b}"),
            (a, b) => prop_assert!(a.is_err() && b.is_err()),
        }
    }

    #[test]
    fn plane_normal_follows_rigid_motion(
        seed in any::<u64>(), axis in vec3(), angle in -3.1..3.1f64, t in vec3(),
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let points: Vec<Vec3> = (0..12)
            .map(|_| Vec3::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-0.3..0.3)))
            .collect();
        let r = rotation(axis, angle);
        let moved: Vec<Vec3> = points.iter().map(|p| r * p + Vec3::from(t)).collect();
        let (a, _) = fit_plane(&points, 0.02).unwrap();
        let (b, _) = fit_plane(&moved, 0.02).unwrap();
        prop_assert!((r * a.normal).dot(&b.normal).abs() > 1.0 - 1e-6);
    }
}
