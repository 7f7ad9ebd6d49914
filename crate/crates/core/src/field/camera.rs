use crate::error::{Error, Result};
use nalgebra::{Matrix3, Matrix4, Vector3};

/// Pinhole camera. Camera space looks down `-z` with `+y` up and `+x`
/// right; pixel `(col, row)` has its center at `(col + 0.5, row + 0.5)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Camera {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: usize,
    pub height: usize,
    /// Camera-to-world rigid transform.
    pub c2w: Matrix4<f64>,
}

/// Largest rotation error accepted as-is.
pub const ROTATION_TOLERANCE: f64 = 1e-5;

impl Camera {
    pub fn validate(&self) -> Result<()> {
        if !(self.fx > 0.0 && self.fy > 0.0 && self.fx.is_finite() && self.fy.is_finite()) {
            return Err(Error::invalid(format!(
                "focal lengths must be positive, got {} {}",
                self.fx, self.fy
            )));
        }
        if self.width == 0 || self.height == 0 {
            return Err(Error::invalid("camera resolution must be positive"));
        }
        if self.c2w.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("camera pose has non-finite entries"));
        }
        let err = self.rotation_error();
        if err > ROTATION_TOLERANCE {
            return Err(Error::invalid(format!(
                "camera rotation is not orthonormal (error {err:.3e})"
            )));
        }
        Ok(())
    }

    /// Camera looking from `eye` at `target`.
    pub fn look_at(
        eye: [f64; 3],
        target: [f64; 3],
        up: [f64; 3],
        width: usize,
        height: usize,
        fov_y_degrees: f64,
    ) -> Result<Self> {
        let eye_v = Vector3::from(eye);
        let back = (eye_v - Vector3::from(target)).normalize();
        let right = Vector3::from(up).cross(&back);
        if right.norm() < 1e-9 || !back.iter().all(|v| v.is_finite()) {
            return Err(Error::invalid("look_at: degenerate eye/target/up"));
        }
        let right = right.normalize();
        let true_up = back.cross(&right);
        let mut c2w = Matrix4::identity();
        for r in 0..3 {
            c2w[(r, 0)] = right[r];
            c2w[(r, 1)] = true_up[r];
            c2w[(r, 2)] = back[r];
            c2w[(r, 3)] = eye[r];
        }
        let f = 0.5 * height as f64 / (0.5 * fov_y_degrees.to_radians()).tan();
        let cam = Self {
            fx: f,
            fy: f,
            cx: 0.5 * width as f64,
            cy: 0.5 * height as f64,
            width,
            height,
            c2w,
        };
        cam.validate()?;
        Ok(cam)
    }

    pub fn rotation(&self) -> Matrix3<f64> {
        self.c2w.fixed_view::<3, 3>(0, 0).into_owned()
    }

    pub fn origin(&self) -> [f64; 3] {
        [self.c2w[(0, 3)], self.c2w[(1, 3)], self.c2w[(2, 3)]]
    }

    /// Max abs entry of `R^T R - I`.
    pub fn rotation_error(&self) -> f64 {
        let r = self.rotation();
        (r.transpose() * r - Matrix3::identity()).amax()
    }

    /// Replaces the rotation by its nearest orthonormal matrix.
    pub fn orthonormalize(&mut self) {
        let svd = self.rotation().svd(true, true);
        let (u, vt) = (svd.u.expect("u requested"), svd.v_t.expect("v_t requested"));
        let mut r = u * vt;
        if r.determinant() < 0.0 {
            let mut u = u;
            u.column_mut(2).neg_mut();
            r = u * vt;
        }
        self.c2w.fixed_view_mut::<3, 3>(0, 0).copy_from(&r);
    }

    /// World-space origin and unit direction of the ray through a pixel
    /// position (pixel centers at half-integers).
    pub fn ray(&self, px: f64, py: f64) -> ([f64; 3], [f64; 3]) {
        let d_cam = Vector3::new((px - self.cx) / self.fx, -(py - self.cy) / self.fy, -1.0);
        let d = (self.rotation() * d_cam).normalize();
        (self.origin(), [d[0], d[1], d[2]])
    }

    pub fn pixel_ray(&self, col: usize, row: usize) -> ([f64; 3], [f64; 3]) {
        self.ray(col as f64 + 0.5, row as f64 + 0.5)
    }

    /// Projects a world point to continuous pixel coordinates and its
    /// distance from the camera center; `None` behind the camera.
    pub fn project(&self, p: [f64; 3]) -> Option<(f64, f64, f64)> {
        let o = Vector3::from(self.origin());
        let rel = Vector3::from(p) - o;
        let c = self.rotation().transpose() * rel;
        if c[2] >= -1e-12 {
            return None;
        }
        let z = -c[2];
        let px = self.cx + self.fx * c[0] / z;
        let py = self.cy - self.fy * c[1] / z;
        Some((px, py, rel.norm()))
    }

    pub fn translated(&self, by: [f64; 3]) -> Self {
        let mut c = self.clone();
        for r in 0..3 {
            c.c2w[(r, 3)] += by[r];
        }
        c
    }
}
