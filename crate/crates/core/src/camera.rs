//! Pinhole cameras and ray generation.
//!
//! Poses follow the OpenGL convention: the camera looks down −z with +x right
//! and +y up. Pixel `(i, j)` covers the continuous image-plane square
//! `[i, i+1) × [j, j+1)`, so its center sits at `(i + 0.5, j + 0.5)`.

use alloc::vec::Vec;
use serde::{Deserialize, Serialize};

use crate::error::{config_err, Error, Result};
use crate::math::{Mat4, Vec3};

/// Tolerance on `RᵀR = I` for camera rotations.
pub const ORTHONORMAL_TOL: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CameraPose {
    /// Row-major camera-to-world rigid transform.
    pub cam_to_world: Mat4,
    /// Horizontal field of view in radians.
    pub fov_x: f64,
    pub width: usize,
    pub height: usize,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Ray {
    pub origin: Vec3,
    /// Unit direction.
    pub dir: Vec3,
}

impl Ray {
    #[inline]
    pub fn at(&self, t: f64) -> Vec3 {
        self.origin + self.dir * t
    }
}

impl CameraPose {
    pub fn new(cam_to_world: Mat4, fov_x: f64, width: usize, height: usize) -> Result<Self> {
        let pose = CameraPose { cam_to_world, fov_x, width, height };
        pose.validate()?;
        Ok(pose)
    }

    /// Check the rigid-transform and size invariants.
    pub fn validate(&self) -> Result<()> {
        if self.width < 8 || self.height < 8 {
            return Err(Error::Validation(alloc::format!(
                "camera resolution {}x{} is below 8x8",
                self.width,
                self.height
            )));
        }
        if !(self.fov_x > 0.0 && self.fov_x < core::f64::consts::PI) {
            return Err(Error::Validation(alloc::format!("fov_x {} out of range", self.fov_x)));
        }
        let m = &self.cam_to_world;
        if m[3] != [0.0, 0.0, 0.0, 1.0] {
            return Err(Error::Validation("last row of camera transform must be [0,0,0,1]".into()));
        }
        for a in 0..3 {
            for b in 0..3 {
                let dot: f64 = (0..3).map(|r| m[r][a] * m[r][b]).sum();
                let want = if a == b { 1.0 } else { 0.0 };
                if (dot - want).abs() > ORTHONORMAL_TOL {
                    return Err(Error::Validation(alloc::format!(
                        "rotation is not orthonormal: (RᵀR)[{a}][{b}] = {dot}"
                    )));
                }
            }
        }
        Ok(())
    }

    /// Same extrinsics and field of view at another resolution.
    pub fn scaled(&self, width: usize, height: usize) -> CameraPose {
        CameraPose { width, height, ..self.clone() }
    }

    /// Focal length in pixels (square pixels).
    pub fn focal(&self) -> f64 {
        0.5 * self.width as f64 / libm::tan(0.5 * self.fov_x)
    }

    pub fn origin(&self) -> Vec3 {
        let m = &self.cam_to_world;
        Vec3::new(m[0][3], m[1][3], m[2][3])
    }

    fn rotate(&self, v: Vec3) -> Vec3 {
        let m = &self.cam_to_world;
        Vec3::new(
            m[0][0] * v[0] + m[0][1] * v[1] + m[0][2] * v[2],
            m[1][0] * v[0] + m[1][1] * v[1] + m[1][2] * v[2],
            m[2][0] * v[0] + m[2][1] * v[1] + m[2][2] * v[2],
        )
    }

    fn rotate_inv(&self, v: Vec3) -> Vec3 {
        let m = &self.cam_to_world;
        Vec3::new(
            m[0][0] * v[0] + m[1][0] * v[1] + m[2][0] * v[2],
            m[0][1] * v[0] + m[1][1] * v[1] + m[2][1] * v[2],
            m[0][2] * v[0] + m[1][2] * v[1] + m[2][2] * v[2],
        )
    }

    /// World-space forward axis (camera −z).
    pub fn forward(&self) -> Vec3 {
        self.rotate(Vec3::new(0.0, 0.0, -1.0))
    }

    /// Ray through continuous image-plane point `(u, v)` (pixel units, origin at the
    /// top-left image corner, `v` growing downward).
    pub fn ray_through(&self, u: f64, v: f64) -> Ray {
        let f = self.focal();
        let local = Vec3::new(
            (u - 0.5 * self.width as f64) / f,
            -(v - 0.5 * self.height as f64) / f,
            -1.0,
        );
        Ray { origin: self.origin(), dir: self.rotate(local).normalized() }
    }

    /// Project a world point to continuous image-plane coordinates. `None` when the
    /// point is behind the camera.
    pub fn project(&self, p: Vec3) -> Option<(f64, f64)> {
        let local = self.rotate_inv(p - self.origin());
        if local[2] >= -1e-9 {
            return None;
        }
        let f = self.focal();
        let u = 0.5 * self.width as f64 + f * local[0] / -local[2];
        let v = 0.5 * self.height as f64 - f * local[1] / -local[2];
        Some((u, v))
    }

    /// Camera at `eye` looking at `target` with world `up`.
    pub fn look_at(eye: Vec3, target: Vec3, up: Vec3, fov_x: f64, width: usize, height: usize) -> Result<Self> {
        let back = (eye - target).normalized();
        let right = up.cross(back);
        if right.norm() < 1e-9 {
            return Err(config_err!("look_at: up vector parallel to view direction"));
        }
        let right = right.normalized();
        let true_up = back.cross(right);
        let m = [
            [right[0], true_up[0], back[0], eye[0]],
            [right[1], true_up[1], back[1], eye[1]],
            [right[2], true_up[2], back[2], eye[2]],
            [0.0, 0.0, 0.0, 1.0],
        ];
        CameraPose::new(m, fov_x, width, height)
    }
}

/// Image-plane coordinates (in pixel units of `pose`) of the `s×s` sub-pixel grid:
/// row-major over the `(s·H) × (s·W)` output, sub-cell `(k, l)` of pixel `(u, v)` at
/// `(u + (k + 0.5)/s, v + (l + 0.5)/s)`.
pub fn subpixel_coords(pose: &CameraPose, s: usize) -> Vec<(f64, f64)> {
    let (w, h) = (pose.width * s, pose.height * s);
    let inv = 1.0 / s as f64;
    let mut out = Vec::with_capacity(w * h);
    for row in 0..h {
        for col in 0..w {
            out.push(((col as f64 + 0.5) * inv, (row as f64 + 0.5) * inv));
        }
    }
    out
}

/// Pinhole rays through every sub-pixel center, row-major over `(s·H) × (s·W)`.
pub fn gen_rays(pose: &CameraPose, s: usize) -> Result<Vec<Ray>> {
    if s == 0 {
        return Err(config_err!("scale factor must be at least 1"));
    }
    Ok(subpixel_coords(pose, s).into_iter().map(|(u, v)| pose.ray_through(u, v)).collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pose(w: usize, h: usize, fov: f64) -> CameraPose {
        CameraPose::look_at(Vec3::new(0.3, 2.0, 3.0), Vec3::ZERO, Vec3::new(0.0, 0.0, 1.0), fov, w, h)
            .unwrap()
    }

    #[test]
    fn center_ray_is_forward_axis() {
        let p = pose(16, 16, core::f64::consts::FRAC_PI_2);
        let r = p.ray_through(8.0, 8.0);
        assert!((r.dir - p.forward()).norm() < 1e-6);
    }

    #[test]
    fn subpixel_grid_averages_to_pixel_center() {
        let p = pose(8, 8, 0.9);
        let s = 2;
        let coords = subpixel_coords(&p, s);
        let w = 8 * s;
        for j in 0..8 {
            for i in 0..8 {
                let mut acc = (0.0, 0.0);
                for l in 0..s {
                    for k in 0..s {
                        let c = coords[(j * s + l) * w + i * s + k];
                        acc.0 += c.0;
                        acc.1 += c.1;
                    }
                }
                assert_eq!(acc.0 / 4.0, i as f64 + 0.5);
                assert_eq!(acc.1 / 4.0, j as f64 + 0.5);
            }
        }
    }

    #[test]
    fn directions_are_unit() {
        let p = pose(9, 12, 1.1);
        for s in 1..=4 {
            let rays = gen_rays(&p, s).unwrap();
            assert_eq!(rays.len(), 9 * 12 * s * s);
            assert!(rays.iter().all(|r| (r.dir.norm() - 1.0).abs() < 1e-6));
        }
    }

    #[test]
    fn projection_inverts_ray_generation() {
        let p = pose(20, 10, 0.8);
        let r = p.ray_through(3.25, 7.5);
        let (u, v) = p.project(r.at(2.7)).unwrap();
        assert!((u - 3.25).abs() < 1e-9 && (v - 7.5).abs() < 1e-9);
    }

    #[test]
    fn skewed_rotation_fails_validation() {
        let mut p = pose(16, 16, 0.8);
        p.cam_to_world[0][0] += 1e-2;
        assert!(matches!(p.validate(), Err(Error::Validation(_))));
    }
}
