//! Procedural meshes used by the synthetic harness and tests. All of them
//! use +y as up and are centred on the y axis.

use alloc::vec::Vec;
use core::f64::consts::TAU;

use super::TriangleMesh;
use crate::geometry::Vec3;

/// Prism over a polygon in the xz plane (counter-clockwise seen from +y,
/// star-shaped about its first vertex), spanning `y ∈ [-h/2, h/2]`.
pub fn extrude(footprint: &[(f64, f64)], height: f64) -> TriangleMesh {
    let n = footprint.len();
    assert!(n >= 3, "footprint needs at least 3 vertices");
    let half = 0.5 * height;
    let mut vertices = Vec::with_capacity(2 * n);
    for &(x, z) in footprint {
        vertices.push(Vec3::new(x, -half, z));
    }
    for &(x, z) in footprint {
        vertices.push(Vec3::new(x, half, z));
    }
    let n32 = n as u32;
    let mut triangles = Vec::new();
    for k in 1..n32 - 1 {
        triangles.push([0, k + 1, k]);
        triangles.push([n32, n32 + k, n32 + k + 1]);
    }
    for k in 0..n32 {
        let next = (k + 1) % n32;
        triangles.push([k, next, n32 + next]);
        triangles.push([k, n32 + next, n32 + k]);
    }
    TriangleMesh::new(vertices, triangles).expect("extrusion is a valid mesh")
}

/// Axis-aligned box centred at the origin.
pub fn box_mesh(width: f64, height: f64, depth: f64) -> TriangleMesh {
    let (hx, hz) = (0.5 * width, 0.5 * depth);
    extrude(&[(-hx, -hz), (-hx, hz), (hx, hz), (hx, -hz)], height)
}

/// Regular `sides`-gon prism of circumradius `radius`.
pub fn prism(sides: usize, radius: f64, height: f64) -> TriangleMesh {
    let footprint: Vec<(f64, f64)> = (0..sides)
        .map(|k| {
            let a = -TAU * k as f64 / sides as f64;
            (radius * libm::cos(a), radius * libm::sin(a))
        })
        .collect();
    extrude(&footprint, height)
}

/// L-shaped extrusion with arm length `size` and arm width `thickness`.
/// Has no rotational symmetry about +y.
pub fn l_extrusion(size: f64, height: f64, thickness: f64) -> TriangleMesh {
    let (a, t) = (size, thickness);
    let raw = [(0.0, 0.0), (0.0, a), (t, a), (t, t), (a, t), (a, 0.0)];
    // shift the footprint centroid onto the axis
    let area = a * t + (a - t) * t;
    let cx = (a * t * (0.5 * t) + (a - t) * t * (t + 0.5 * (a - t))) / area;
    let cz = (a * t * (0.5 * a) + (a - t) * t * (0.5 * t)) / area;
    let shifted: Vec<(f64, f64)> = raw.iter().map(|&(x, z)| (x - cx, z - cz)).collect();
    extrude(&shifted, height)
}

/// Single square of side `side` in the plane `z = 0`, centred at the origin.
pub fn square(side: f64) -> TriangleMesh {
    let h = 0.5 * side;
    TriangleMesh::new(
        alloc::vec![
            Vec3::new(-h, -h, 0.0),
            Vec3::new(h, -h, 0.0),
            Vec3::new(h, h, 0.0),
            Vec3::new(-h, h, 0.0),
        ],
        alloc::vec![[0, 1, 2], [0, 2, 3]],
    )
    .expect("square is a valid mesh")
}
