//! CAD model geometry: OBJ loading, surface sampling, rotational symmetry
//! detection and truncation measurement.

use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;
use core::f64::consts::TAU;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
#[cfg(feature = "serde")]
use serde::{Deserialize, Serialize};

use crate::geometry::{axis_angle, bounds, project_point, CameraFrame, Pose9DoF, Vec3};

pub mod primitives;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum MeshError {
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("mesh has no triangles")]
    Empty,
    #[error("mesh surface has zero area")]
    ZeroArea,
    #[error("invalid mesh: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(Serialize, Deserialize))]
pub struct TriangleMesh {
    pub vertices: Vec<Vec3>,
    pub triangles: Vec<[u32; 3]>,
    pub up_axis: Vec3,
    pub model_id: String,
    pub category: String,
}

impl TriangleMesh {
    pub fn new(vertices: Vec<Vec3>, triangles: Vec<[u32; 3]>) -> Result<Self, MeshError> {
        let mesh = TriangleMesh {
            vertices,
            triangles,
            up_axis: Vec3::y(),
            model_id: String::new(),
            category: String::new(),
        };
        mesh.validate()?;
        Ok(mesh)
    }

    pub fn with_identity(mut self, model_id: &str, category: &str) -> Self {
        self.model_id = model_id.to_string();
        self.category = category.to_string();
        self
    }

    pub fn validate(&self) -> Result<(), MeshError> {
        if self.triangles.is_empty() {
            return Err(MeshError::Empty);
        }
        let n = self.vertices.len() as u32;
        if let Some(t) = self.triangles.iter().find(|t| t.iter().any(|&i| i >= n)) {
            return Err(MeshError::Invalid(format!(
                "triangle {t:?} indexes past {n} vertices"
            )));
        }
        if (self.up_axis.norm() - 1.0).abs() > 1e-9 {
            return Err(MeshError::Invalid("up_axis is not unit length".into()));
        }
        Ok(())
    }

    pub fn triangle(&self, i: usize) -> [Vec3; 3] {
        let [a, b, c] = self.triangles[i];
        [
            self.vertices[a as usize],
            self.vertices[b as usize],
            self.vertices[c as usize],
        ]
    }

    pub fn triangle_area(&self, i: usize) -> f64 {
        let [a, b, c] = self.triangle(i);
        0.5 * (b - a).cross(&(c - a)).norm()
    }

    pub fn surface_area(&self) -> f64 {
        (0..self.triangles.len()).map(|i| self.triangle_area(i)).sum()
    }

    /// Bounding box as `(min, max)`.
    pub fn bounds(&self) -> (Vec3, Vec3) {
        bounds(&self.vertices).unwrap_or((Vec3::zeros(), Vec3::zeros()))
    }

    pub fn bbox_diagonal(&self) -> f64 {
        let (lo, hi) = self.bounds();
        (hi - lo).norm()
    }

    /// Centre of the bounding box.
    pub fn center(&self) -> Vec3 {
        let (lo, hi) = self.bounds();
        (lo + hi) * 0.5
    }
}

/// Parse the `v` and `f` records of a Wavefront OBJ file. Polygons are fan
/// triangulated; every other record is ignored. The up axis defaults to +y.
pub fn load_obj(bytes: &[u8]) -> Result<TriangleMesh, MeshError> {
    let text = core::str::from_utf8(bytes).map_err(|e| MeshError::Parse {
        line: 1 + bytes[..e.valid_up_to()].iter().filter(|&&b| b == b'\n').count(),
        message: "invalid UTF-8".into(),
    })?;
    let mut vertices = Vec::new();
    let mut faces: Vec<(usize, Vec<i64>)> = Vec::new();

    for (idx, raw) in text.lines().enumerate() {
        let line_no = idx + 1;
        let err = |message: String| MeshError::Parse {
            line: line_no,
            message,
        };
        let line = raw.split('#').next().unwrap_or("").trim();
        let mut fields = line.split_whitespace();
        match fields.next() {
            Some("v") => {
                let mut xyz = [0.0; 3];
                for c in xyz.iter_mut() {
                    let tok = fields
                        .next()
                        .ok_or_else(|| err("vertex needs 3 coordinates".into()))?;
                    *c = tok
                        .parse::<f64>()
                        .map_err(|_| err(format!("bad coordinate {tok:?}")))?;
                }
                vertices.push(Vec3::from(xyz));
            }
            Some("f") => {
                let mut idxs = Vec::new();
                for tok in fields {
                    let head = tok.split('/').next().unwrap_or("");
                    let i = head
                        .parse::<i64>()
                        .map_err(|_| err(format!("bad face index {tok:?}")))?;
                    idxs.push(i);
                }
                if idxs.len() < 3 {
                    return Err(err("face needs at least 3 vertices".into()));
                }
                faces.push((line_no, idxs));
            }
            _ => {}
        }
    }

    let n = vertices.len() as i64;
    let mut triangles = Vec::new();
    for (line, idxs) in faces {
        let mut resolved = Vec::with_capacity(idxs.len());
        for i in idxs {
            // 1-based, negative values count back from the latest vertex
            let zero_based = if i > 0 { i - 1 } else { n + i };
            if i == 0 || zero_based < 0 || zero_based >= n {
                return Err(MeshError::Parse {
                    line,
                    message: format!("face index {i} out of range (1..={n})"),
                });
            }
            resolved.push(zero_based as u32);
        }
        for k in 1..resolved.len() - 1 {
            triangles.push([resolved[0], resolved[k], resolved[k + 1]]);
        }
    }
    if triangles.is_empty() {
        return Err(MeshError::Empty);
    }
    TriangleMesh::new(vertices, triangles)
}

/// Serialize as OBJ text (vertices and triangles only).
pub fn to_obj(mesh: &TriangleMesh) -> String {
    let mut out = String::new();
    for v in &mesh.vertices {
        out.push_str(&format!("v {} {} {}\n", v.x, v.y, v.z));
    }
    for t in &mesh.triangles {
        out.push_str(&format!("f {} {} {}\n", t[0] + 1, t[1] + 1, t[2] + 1));
    }
    out
}

/// Area-uniform surface samples, deterministic in `seed`.
pub fn sample_surface(mesh: &TriangleMesh, n: usize, seed: u64) -> Result<Vec<Vec3>, MeshError> {
    let mut cumulative = Vec::with_capacity(mesh.triangles.len());
    let mut total = 0.0;
    for i in 0..mesh.triangles.len() {
        total += mesh.triangle_area(i);
        cumulative.push(total);
    }
    if !(total > 0.0) {
        return Err(MeshError::ZeroArea);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(n);
    for _ in 0..n {
        let target = rng.gen::<f64>() * total;
        let tri = cumulative
            .partition_point(|&c| c <= target)
            .min(cumulative.len() - 1);
        let [a, b, c] = mesh.triangle(tri);
        let r1 = libm::sqrt(rng.gen::<f64>());
        let r2 = rng.gen::<f64>();
        out.push(a * (1.0 - r1) + b * (r1 * (1.0 - r2)) + c * (r1 * r2));
    }
    Ok(out)
}

/// Discrete rotational symmetry about the model's up axis.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(Serialize, Deserialize))]
pub struct SymmetryClass {
    /// 1 (none), 2, 4 or 36.
    pub order: u32,
    pub axis: Vec3,
}

pub const SYMMETRY_ORDERS: [u32; 3] = [36, 4, 2];

impl SymmetryClass {
    pub fn none(axis: Vec3) -> Self {
        SymmetryClass { order: 1, axis }
    }

    pub fn new(order: u32, axis: Vec3) -> Result<Self, MeshError> {
        if !matches!(order, 1 | 2 | 4 | 36) {
            return Err(MeshError::Invalid(format!("unsupported symmetry order {order}")));
        }
        Ok(SymmetryClass { order, axis })
    }

    /// Rotation by `2πj/order` about the axis through the model origin.
    pub fn element(&self, j: u32) -> crate::geometry::Mat3 {
        axis_angle(&self.axis, TAU * j as f64 / self.order as f64)
    }

    pub fn elements(&self) -> Vec<crate::geometry::Mat3> {
        (0..self.order).map(|j| self.element(j)).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SymmetryParams {
    pub samples: usize,
    /// Chamfer threshold as a fraction of the bounding-box diagonal.
    pub tau: f64,
    pub seed: u64,
}

impl Default for SymmetryParams {
    fn default() -> Self {
        SymmetryParams {
            samples: 2000,
            tau: 0.015,
            seed: 0x5eed,
        }
    }
}

/// [`detect_symmetry_with`] using the default parameters.
pub fn detect_symmetry(mesh: &TriangleMesh) -> SymmetryClass {
    detect_symmetry_with(mesh, &SymmetryParams::default())
}

/// Largest order `k ∈ {36, 4, 2}` for which every rotation by a multiple of
/// `2π/k` about the up axis (through the model origin) maps one surface
/// sample onto an independent second sample.
///
/// A rotation matches when its symmetric Chamfer distance exceeds the
/// unrotated sample-to-sample Chamfer distance by at most
/// `tau · bbox_diagonal`. Subtracting the unrotated distance removes the
/// sampling floor, which at 2000 samples is comparable to the threshold.
pub fn detect_symmetry_with(mesh: &TriangleMesh, params: &SymmetryParams) -> SymmetryClass {
    let axis = mesh.up_axis;
    let (Ok(a), Ok(b)) = (
        sample_surface(mesh, params.samples, params.seed),
        sample_surface(mesh, params.samples, params.seed ^ 0x9e37_79b9_7f4a_7c15),
    ) else {
        return SymmetryClass::none(axis);
    };
    let grid_a = PointGrid::new(&a);
    let grid_b = PointGrid::new(&b);
    let floor = symmetric_chamfer(&a, &b, &grid_a, &grid_b);
    let limit = floor + params.tau * mesh.bbox_diagonal();

    for &order in &SYMMETRY_ORDERS {
        let class = SymmetryClass { order, axis };
        let ok = (1..=order / 2).all(|j| {
            let rot = class.element(j);
            let rotated: Vec<Vec3> = a.iter().map(|p| rot * p).collect();
            let grid_r = PointGrid::new(&rotated);
            symmetric_chamfer(&rotated, &b, &grid_r, &grid_b) <= limit
        });
        if ok {
            return class;
        }
    }
    SymmetryClass::none(axis)
}

fn symmetric_chamfer(a: &[Vec3], b: &[Vec3], grid_a: &PointGrid, grid_b: &PointGrid) -> f64 {
    let ab: f64 = a.iter().map(|p| grid_b.nearest_distance(p)).sum::<f64>() / a.len() as f64;
    let ba: f64 = b.iter().map(|p| grid_a.nearest_distance(p)).sum::<f64>() / b.len() as f64;
    0.5 * (ab + ba)
}

/// Uniform grid over a point set for nearest-neighbour queries.
pub struct PointGrid {
    origin: Vec3,
    cell: f64,
    dims: [usize; 3],
    /// Start offsets into `items` per cell (CSR layout), length cells+1.
    starts: Vec<usize>,
    items: Vec<Vec3>,
}

impl PointGrid {
    pub fn new(points: &[Vec3]) -> Self {
        let (lo, hi) = bounds(points).unwrap_or((Vec3::zeros(), Vec3::zeros()));
        let extent = hi - lo;
        let diag = extent.norm().max(1e-12);
        // roughly two points per occupied cell on a surface
        let target_cells = (points.len() as f64 / 2.0).max(1.0);
        let cell = (diag / libm::sqrt(target_cells)).max(diag * 1e-3);
        let dims = [0, 1, 2].map(|k| ((extent[k] / cell) as usize + 1).min(1024));
        let n_cells = dims[0] * dims[1] * dims[2];

        let mut counts = vec![0usize; n_cells + 1];
        let keys: Vec<usize> = points
            .iter()
            .map(|p| Self::flat(dims, Self::coords(lo, cell, dims, p)))
            .collect();
        for &k in &keys {
            counts[k + 1] += 1;
        }
        for i in 0..n_cells {
            counts[i + 1] += counts[i];
        }
        let mut fill = counts.clone();
        let mut items = vec![Vec3::zeros(); points.len()];
        for (p, &k) in points.iter().zip(&keys) {
            items[fill[k]] = *p;
            fill[k] += 1;
        }
        PointGrid {
            origin: lo,
            cell,
            dims,
            starts: counts,
            items,
        }
    }

    fn coords(origin: Vec3, cell: f64, dims: [usize; 3], p: &Vec3) -> [usize; 3] {
        [0, 1, 2].map(|k| {
            let c = libm::floor((p[k] - origin[k]) / cell);
            if c <= 0.0 {
                0
            } else {
                (c as usize).min(dims[k] - 1)
            }
        })
    }

    fn flat(dims: [usize; 3], c: [usize; 3]) -> usize {
        (c[0] * dims[1] + c[1]) * dims[2] + c[2]
    }

    pub fn nearest_distance(&self, q: &Vec3) -> f64 {
        if self.items.is_empty() {
            return f64::INFINITY;
        }
        let center = Self::coords(self.origin, self.cell, self.dims, q);
        // distance from q to the box covered by the centre cell, per axis
        let max_ring = *self.dims.iter().max().unwrap();
        let mut best = f64::INFINITY;
        for ring in 0..=max_ring {
            if ring > 0 {
                // every unvisited cell is at least this far away
                let reach = self.clearance(q, center, ring - 1);
                if best * best <= reach * reach {
                    break;
                }
            }
            self.visit_ring(center, ring, |p| {
                let d = (p - q).norm_squared();
                if d < best * best {
                    best = libm::sqrt(d);
                }
            });
        }
        best
    }

    /// Lower bound on the distance from `q` to any cell outside the cube of
    /// radius `ring` around `center`.
    fn clearance(&self, q: &Vec3, center: [usize; 3], ring: usize) -> f64 {
        let mut d = f64::INFINITY;
        for k in 0..3 {
            let lo_cell = center[k] as isize - ring as isize;
            let hi_cell = center[k] + ring + 1;
            if lo_cell > 0 {
                d = d.min(q[k] - (self.origin[k] + lo_cell as f64 * self.cell));
            }
            if hi_cell < self.dims[k] {
                d = d.min(self.origin[k] + hi_cell as f64 * self.cell - q[k]);
            }
        }
        d.max(0.0)
    }

    fn visit_ring(&self, c: [usize; 3], ring: usize, mut f: impl FnMut(&Vec3)) {
        let r = ring as isize;
        let range = |k: usize| {
            let lo = (c[k] as isize - r).max(0);
            let hi = (c[k] as isize + r).min(self.dims[k] as isize - 1);
            lo..=hi
        };
        for x in range(0) {
            for y in range(1) {
                for z in range(2) {
                    let on_shell = (x - c[0] as isize).abs() == r
                        || (y - c[1] as isize).abs() == r
                        || (z - c[2] as isize).abs() == r;
                    if !on_shell {
                        continue;
                    }
                    let k = Self::flat(self.dims, [x as usize, y as usize, z as usize]);
                    for p in &self.items[self.starts[k]..self.starts[k + 1]] {
                        f(p);
                    }
                }
            }
        }
    }
}

/// Share of `n` surface samples that land outside `[0,w)×[0,h)` or behind
/// the camera under `pose`.
pub fn truncation_fraction(
    mesh: &TriangleMesh,
    pose: &Pose9DoF,
    cam: &CameraFrame,
    n: usize,
    seed: u64,
) -> Result<f64, MeshError> {
    let samples = sample_surface(mesh, n, seed)?;
    let outside = samples
        .iter()
        .filter(|p| match project_point(cam, &pose.apply(p)) {
            Ok(px) => !cam.contains_pixel(&px),
            Err(_) => true,
        })
        .count();
    Ok(outside as f64 / samples.len().max(1) as f64)
}
