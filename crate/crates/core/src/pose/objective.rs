//! The pose objective over a flat parameter vector, with its exact gradient.
//!
//! Layout: `[a1 (3), a2 (3), T (3), scale params (1..=3)]`. Rotation is the
//! Gram–Schmidt frame of `(a1, a2)`; scales are exponentials of the free
//! scale parameters, tied according to the [`ScaleMode`].

use alloc::vec;
use alloc::vec::Vec;

use super::{LossBreakdown, PoseError, PoseProblem, ScaleMode, SolverConfig};
use crate::geometry::{CameraFrame, Mat3, Pose9DoF, Vec2, Vec3};

/// Correspondences of one frame, with model points already flipped.
#[derive(Debug, Clone)]
pub(crate) struct FrameBlock {
    pub frame_id: u32,
    pub cam: CameraFrame,
    pub points: Vec<Vec3>,
    pub pixels: Vec<Vec2>,
}

#[derive(Debug, Clone)]
pub struct Objective {
    pub(crate) frames: Vec<FrameBlock>,
    /// Symmetry rotations in the model frame; `[I]` without symmetry.
    pub(crate) group: Vec<Mat3>,
    mesh_up: Vec3,
    world_up: Vec3,
    /// Up-axis weight, zero for categories that are not upright.
    alpha: f64,
    beta: f64,
    margin: f64,
    pub(crate) mode: ScaleMode,
}

/// Per-frame residual summary at a pose.
#[derive(Debug, Clone, PartialEq)]
pub struct FrameResidual {
    pub frame_id: u32,
    pub symmetry_index: u32,
    pub l1: f64,
    pub mean_px: f64,
}

impl Objective {
    pub fn new(
        problem: &PoseProblem<'_>,
        cfg: &SolverConfig,
        group: Vec<Mat3>,
        mode: ScaleMode,
    ) -> Result<Self, PoseError> {
        let frames = problem.frame_blocks()?;
        let upright = cfg
            .upright_categories
            .iter()
            .any(|c| c.as_str() == problem.category);
        Ok(Objective {
            frames,
            group: if group.is_empty() { vec![Mat3::identity()] } else { group },
            mesh_up: problem.mesh_up,
            world_up: cfg.world_up,
            alpha: if upright { cfg.alpha } else { 0.0 },
            beta: cfg.beta,
            margin: cfg.front_margin,
            mode,
        })
    }

    pub fn dim(&self) -> usize {
        9 + self.mode.free_scales()
    }

    pub fn scale_mode(&self) -> ScaleMode {
        self.mode
    }

    pub fn params_from_pose(&self, pose: &Pose9DoF) -> Vec<f64> {
        let mut p = Vec::with_capacity(self.dim());
        p.extend(pose.rotation.column(0).iter());
        p.extend(pose.rotation.column(1).iter());
        p.extend(pose.translation.iter());
        let s = pose.scale;
        match self.mode {
            ScaleMode::Full => p.extend(s.iter().map(|x| libm::log(*x))),
            ScaleMode::Coplanar2Dof { axis } => {
                let (i, j) = other_axes(axis);
                p.push(libm::log(s[i]));
                p.push(libm::log(s[j]));
            }
            ScaleMode::RotsymTied { up_axis } => {
                let (i, j) = other_axes(up_axis);
                p.push(libm::log(s[up_axis]));
                p.push(libm::log(0.5 * (s[i] + s[j])));
            }
        }
        p
    }

    pub fn pose_from_params(&self, params: &[f64]) -> Option<Pose9DoF> {
        let (rotation, _) = gram_schmidt(&vec3(params, 0), &vec3(params, 3), None)?;
        let (scale, _) = self.scales(&params[9..]);
        Some(Pose9DoF {
            translation: vec3(params, 6),
            rotation,
            scale,
        })
    }

    /// Scales and their derivatives with respect to each free parameter.
    fn scales(&self, theta: &[f64]) -> (Vec3, [Vec3; 3]) {
        let mut jac = [Vec3::zeros(); 3];
        let mut s = Vec3::zeros();
        match self.mode {
            ScaleMode::Full => {
                for k in 0..3 {
                    s[k] = libm::exp(theta[k]);
                    jac[k][k] = s[k];
                }
            }
            ScaleMode::Coplanar2Dof { axis } => {
                let (i, j) = other_axes(axis);
                s[i] = libm::exp(theta[0]);
                s[j] = libm::exp(theta[1]);
                s[axis] = 0.5 * (s[i] + s[j]);
                jac[0][i] = s[i];
                jac[0][axis] = 0.5 * s[i];
                jac[1][j] = s[j];
                jac[1][axis] = 0.5 * s[j];
            }
            ScaleMode::RotsymTied { up_axis } => {
                let (i, j) = other_axes(up_axis);
                s[up_axis] = libm::exp(theta[0]);
                let h = libm::exp(theta[1]);
                s[i] = h;
                s[j] = h;
                jac[0][up_axis] = s[up_axis];
                jac[1][i] = h;
                jac[1][j] = h;
            }
        }
        (s, jac)
    }

    /// Total loss and its parts. Returns `None` if the rotation
    /// parameters have collapsed.
    pub fn value(&self, params: &[f64]) -> Option<LossBreakdown> {
        self.evaluate(params, None)
    }

    /// Loss parts, writing `∂total/∂params` into `grad`.
    pub fn value_and_gradient(&self, params: &[f64], grad: &mut [f64]) -> Option<LossBreakdown> {
        self.evaluate(params, Some(grad))
    }

    pub fn total(&self, parts: &LossBreakdown) -> f64 {
        parts.repr + self.alpha * parts.up + self.beta * parts.front
    }

    fn evaluate(&self, params: &[f64], grad: Option<&mut [f64]>) -> Option<LossBreakdown> {
        let want = grad.is_some();
        let (r, _) = gram_schmidt(&vec3(params, 0), &vec3(params, 3), None)?;
        let t = vec3(params, 6);
        let (s, s_jac) = self.scales(&params[9..]);

        let mut g = Grads::default();
        let mut repr = 0.0;
        for block in &self.frames {
            let (j, l1) = self.best_element(block, &r, &t, &s);
            repr += l1;
            if want {
                for (p, q) in block.points.iter().zip(&block.pixels) {
                    item_l1(&block.cam, &r, &t, &s, &(self.group[j] * p), q, Some(&mut g));
                }
            }
        }

        let mut front = 0.0;
        for block in &self.frames {
            let row = block.cam.rotation.row(2).transpose();
            for p in &block.points {
                let w = r * s.component_mul(p) + t;
                let depth = row.dot(&w) + block.cam.translation.z;
                let gap = self.margin - depth;
                if gap > 0.0 {
                    front += gap;
                    if want {
                        g.add_world(&(-row * self.beta), &r, &s, p);
                    }
                }
            }
        }

        let up_res = r * self.mesh_up - self.world_up;
        let up = up_res.abs().sum();
        if want && self.alpha != 0.0 {
            g.r += up_res.map(sign) * self.mesh_up.transpose() * self.alpha;
        }

        let parts = LossBreakdown { repr, up, front };
        if !self.total(&parts).is_finite() {
            return None;
        }
        if let Some(out) = grad {
            self.chain(params, &g, &s_jac, out)?;
        }
        Some(parts)
    }

    fn chain(&self, params: &[f64], g: &Grads, s_jac: &[Vec3; 3], out: &mut [f64]) -> Option<()> {
        let a1 = vec3(params, 0);
        let a2 = vec3(params, 3);
        for k in 0..6 {
            let mut d = [Vec3::zeros(); 2];
            d[k / 3][k % 3] = 1.0;
            let (_, dr) = gram_schmidt(&a1, &a2, Some((&d[0], &d[1])))?;
            out[k] = g.r.component_mul(&dr).sum();
        }
        for k in 0..3 {
            out[6 + k] = g.t[k];
        }
        for k in 0..self.mode.free_scales() {
            out[9 + k] = g.s.dot(&s_jac[k]);
        }
        Some(())
    }

    /// Symmetry element with the lowest L1 residual for a frame (first on
    /// ties) and that residual.
    fn best_element(&self, block: &FrameBlock, r: &Mat3, t: &Vec3, s: &Vec3) -> (usize, f64) {
        let mut best = (0, f64::INFINITY);
        for (j, gj) in self.group.iter().enumerate() {
            let l1: f64 = block
                .points
                .iter()
                .zip(&block.pixels)
                .map(|(p, q)| item_l1(&block.cam, r, t, s, &(gj * p), q, None))
                .sum();
            if l1 < best.1 {
                best = (j, l1);
            }
        }
        best
    }

    /// Per-frame residuals at `pose`, each frame using its best symmetry
    /// element. Behind-camera items count as the penalty distance.
    pub fn residuals(&self, pose: &Pose9DoF) -> Vec<FrameResidual> {
        let (r, t, s) = (pose.rotation, pose.translation, pose.scale);
        self.frames
            .iter()
            .map(|block| {
                let (j, l1) = self.best_element(block, &r, &t, &s);
                let dist: f64 = block
                    .points
                    .iter()
                    .zip(&block.pixels)
                    .map(|(p, q)| {
                        let w = r * s.component_mul(&(self.group[j] * p)) + t;
                        let c = block.cam.to_camera(&w);
                        if c.z <= 0.0 {
                            behind_penalty(&block.cam)
                        } else {
                            (block.cam.pixel_from_camera(&c) - q).norm()
                        }
                    })
                    .sum();
                FrameResidual {
                    frame_id: block.frame_id,
                    symmetry_index: j as u32,
                    l1,
                    mean_px: dist / block.points.len() as f64,
                }
            })
            .collect()
    }
}

#[derive(Default)]
struct Grads {
    r: Mat3,
    t: Vec3,
    s: Vec3,
}

impl Grads {
    /// Accumulate a gradient with respect to the world point `R·(S⊙m) + T`.
    fn add_world(&mut self, dw: &Vec3, r: &Mat3, s: &Vec3, m: &Vec3) {
        self.t += dw;
        self.r += dw * s.component_mul(m).transpose();
        self.s += (r.transpose() * dw).component_mul(m);
    }
}

pub(crate) fn behind_penalty(cam: &CameraFrame) -> f64 {
    2.0 * (cam.width as f64 + cam.height as f64)
}

fn sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// L1 pixel residual of one model point (already symmetry-rotated and
/// flipped), optionally accumulating its gradient.
fn item_l1(
    cam: &CameraFrame,
    r: &Mat3,
    t: &Vec3,
    s: &Vec3,
    m: &Vec3,
    q: &Vec2,
    grads: Option<&mut Grads>,
) -> f64 {
    let w = r * s.component_mul(m) + t;
    let c = cam.to_camera(&w);
    if c.z <= 0.0 {
        return behind_penalty(cam);
    }
    let k = &cam.intrinsics;
    let du = k.fx * c.x / c.z + k.cx - q.x;
    let dv = k.fy * c.y / c.z + k.cy - q.y;
    if let Some(g) = grads {
        let (su, sv) = (sign(du), sign(dv));
        let dc = Vec3::new(
            su * k.fx / c.z,
            sv * k.fy / c.z,
            -(su * k.fx * c.x + sv * k.fy * c.y) / (c.z * c.z),
        );
        let dw = cam.rotation.transpose() * dc;
        g.add_world(&dw, r, s, m);
    }
    du.abs() + dv.abs()
}

fn vec3(p: &[f64], at: usize) -> Vec3 {
    Vec3::new(p[at], p[at + 1], p[at + 2])
}

fn other_axes(axis: usize) -> (usize, usize) {
    match axis {
        0 => (1, 2),
        1 => (0, 2),
        _ => (0, 1),
    }
}

/// Orthonormal frame `[b1 b2 b1×b2]` from two vectors, and optionally its
/// directional derivative along `(da1, da2)`.
pub fn gram_schmidt(a1: &Vec3, a2: &Vec3, dir: Option<(&Vec3, &Vec3)>) -> Option<(Mat3, Mat3)> {
    let n1 = a1.norm();
    if !(n1 > 1e-12) {
        return None;
    }
    let b1 = a1 / n1;
    let u2 = a2 - b1 * b1.dot(a2);
    let n2 = u2.norm();
    if !(n2 > 1e-12 * a2.norm().max(1e-300)) || !n2.is_finite() {
        return None;
    }
    let b2 = u2 / n2;
    let b3 = b1.cross(&b2);
    let r = Mat3::from_columns(&[b1, b2, b3]);
    let dr = match dir {
        None => Mat3::zeros(),
        Some((da1, da2)) => {
            let db1 = (da1 - b1 * b1.dot(da1)) / n1;
            let du2 = da2 - b1 * (db1.dot(a2) + b1.dot(da2)) - db1 * b1.dot(a2);
            let db2 = (du2 - b2 * b2.dot(&du2)) / n2;
            let db3 = db1.cross(&b2) + b1.cross(&db2);
            Mat3::from_columns(&[db1, db2, db3])
        }
    };
    Some((r, dr))
}
