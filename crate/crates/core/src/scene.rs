//! Particles, cameras and scenes.

use nalgebra::{Matrix3, Matrix4, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[inline]
pub fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

/// One anisotropic 3D Gaussian.
///
/// `rotation` is a quaternion `[w, x, y, z]`; it is kept at unit norm by the
/// optimizer but every consumer normalizes it again before use.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GaussianParticle {
    pub center: [f64; 3],
    pub rotation: [f64; 4],
    pub log_scale: [f64; 3],
    pub amplitude: Vec<f64>,
    pub opacity_logit: f64,
}

impl GaussianParticle {
    pub fn isotropic(center: [f64; 3], sigma: f64, amplitude: Vec<f64>, opacity: f64) -> Self {
        Self {
            center,
            rotation: [1.0, 0.0, 0.0, 0.0],
            log_scale: [sigma.ln(); 3],
            amplitude,
            opacity_logit: logit(opacity),
        }
    }

    #[inline]
    pub fn opacity(&self) -> f64 {
        sigmoid(self.opacity_logit)
    }

    pub fn scale(&self) -> Vector3<f64> {
        Vector3::new(
            self.log_scale[0].exp(),
            self.log_scale[1].exp(),
            self.log_scale[2].exp(),
        )
    }

    pub fn max_scale(&self) -> f64 {
        self.scale().max()
    }

    pub fn center_vec(&self) -> Vector3<f64> {
        Vector3::from(self.center)
    }

    pub fn rotation_matrix(&self) -> Matrix3<f64> {
        quat_to_matrix(&self.rotation)
    }

    pub fn normalize_rotation(&mut self) {
        let n = quat_norm(&self.rotation);
        if n > 0.0 && n.is_finite() {
            self.rotation.iter_mut().for_each(|q| *q /= n);
        } else {
            self.rotation = [1.0, 0.0, 0.0, 0.0];
        }
    }

    pub fn validate(&self, index: usize) -> Result<()> {
        let bad = |reason: String| Error::InvalidParticle { index, reason };
        let finite = self.center.iter().all(|v| v.is_finite())
            && self.rotation.iter().all(|v| v.is_finite())
            && self.log_scale.iter().all(|v| v.is_finite())
            && self.amplitude.iter().all(|v| v.is_finite())
            && self.opacity_logit.is_finite();
        if !finite {
            return Err(bad("non-finite field".into()));
        }
        let qn = quat_norm(&self.rotation);
        if qn == 0.0 {
            return Err(bad("zero quaternion".into()));
        }
        let s = self.scale();
        if !s.iter().all(|v| v.is_finite() && *v > 0.0) {
            return Err(bad(format!("scale {s:?} not finite and positive")));
        }
        Ok(())
    }
}

pub fn quat_norm(q: &[f64; 4]) -> f64 {
    q.iter().map(|v| v * v).sum::<f64>().sqrt()
}

/// Rotation matrix of the normalized quaternion `[w, x, y, z]`.
pub fn quat_to_matrix(q: &[f64; 4]) -> Matrix3<f64> {
    let n = quat_norm(q);
    let (w, x, y, z) = (q[0] / n, q[1] / n, q[2] / n, q[3] / n);
    unit_quat_matrix(w, x, y, z)
}

#[inline]
fn unit_quat_matrix(w: f64, x: f64, y: f64, z: f64) -> Matrix3<f64> {
    Matrix3::new(
        1.0 - 2.0 * (y * y + z * z),
        2.0 * (x * y - w * z),
        2.0 * (x * z + w * y),
        2.0 * (x * y + w * z),
        1.0 - 2.0 * (x * x + z * z),
        2.0 * (y * z - w * x),
        2.0 * (x * z - w * y),
        2.0 * (y * z + w * x),
        1.0 - 2.0 * (x * x + y * y),
    )
}

/// Pull a gradient w.r.t. the rotation matrix back to the raw quaternion
/// (including the normalization step).
pub fn quat_matrix_backward(q: &[f64; 4], d_rot: &Matrix3<f64>) -> [f64; 4] {
    let n = quat_norm(q);
    let (w, x, y, z) = (q[0] / n, q[1] / n, q[2] / n, q[3] / n);
    let g = d_rot;
    // dR/dw, dR/dx, dR/dy, dR/dz contracted with g.
    let dw = 2.0
        * (-z * g[(0, 1)] + y * g[(0, 2)] + z * g[(1, 0)] - x * g[(1, 2)] - y * g[(2, 0)]
            + x * g[(2, 1)]);
    let dx = 2.0
        * (y * g[(0, 1)] + z * g[(0, 2)] + y * g[(1, 0)] - 2.0 * x * g[(1, 1)] - w * g[(1, 2)]
            + z * g[(2, 0)]
            + w * g[(2, 1)]
            - 2.0 * x * g[(2, 2)]);
    let dy = 2.0
        * (-2.0 * y * g[(0, 0)] + x * g[(0, 1)] + w * g[(0, 2)] + x * g[(1, 0)] + z * g[(1, 2)]
            - w * g[(2, 0)]
            + z * g[(2, 1)]
            - 2.0 * y * g[(2, 2)]);
    let dz = 2.0
        * (-2.0 * z * g[(0, 0)] - w * g[(0, 1)] + x * g[(0, 2)] + w * g[(1, 0)]
            - 2.0 * z * g[(1, 1)]
            + y * g[(1, 2)]
            + x * g[(2, 0)]
            + y * g[(2, 1)]);
    let dn = [dw, dx, dy, dz];
    let unit = [w, x, y, z];
    let radial: f64 = dn.iter().zip(&unit).map(|(a, b)| a * b).sum();
    [
        (dn[0] - unit[0] * radial) / n,
        (dn[1] - unit[1] * radial) / n,
        (dn[2] - unit[2] * radial) / n,
        (dn[3] - unit[3] * radial) / n,
    ]
}

/// Hamilton product `a * b`.
pub fn quat_mul(a: &[f64; 4], b: &[f64; 4]) -> [f64; 4] {
    [
        a[0] * b[0] - a[1] * b[1] - a[2] * b[2] - a[3] * b[3],
        a[0] * b[1] + a[1] * b[0] + a[2] * b[3] - a[3] * b[2],
        a[0] * b[2] - a[1] * b[3] + a[2] * b[0] + a[3] * b[1],
        a[0] * b[3] + a[1] * b[2] - a[2] * b[1] + a[3] * b[0],
    ]
}

/// Quaternion for a rotation of `angle` radians about `axis`.
pub fn quat_from_axis_angle(axis: [f64; 3], angle: f64) -> [f64; 4] {
    let a = Vector3::from(axis).normalize();
    let (s, c) = (0.5 * angle).sin_cos();
    [c, a.x * s, a.y * s, a.z * s]
}

/// World-space covariance `R S Sᵀ Rᵀ`.
pub fn covariance(p: &GaussianParticle) -> Result<Matrix3<f64>> {
    p.validate(0)?;
    Ok(covariance_unchecked(p))
}

pub(crate) fn covariance_unchecked(p: &GaussianParticle) -> Matrix3<f64> {
    let r = p.rotation_matrix();
    let s2 = Matrix3::from_diagonal(&Vector3::new(
        (2.0 * p.log_scale[0]).exp(),
        (2.0 * p.log_scale[1]).exp(),
        (2.0 * p.log_scale[2]).exp(),
    ));
    let sigma = r * s2 * r.transpose();
    // exact symmetry
    0.5 * (sigma + sigma.transpose())
}

/// Unnormalized kernel `exp(-dᵀ Σ⁻¹ d)` with `d = x - center`.
///
/// No factor ½ in the exponent.
pub fn eval_gaussian(p: &GaussianParticle, x: [f64; 3]) -> Result<f64> {
    let sigma = covariance(p)?;
    let inv = sigma
        .try_inverse()
        .filter(|m| m.iter().all(|v| v.is_finite()))
        .ok_or_else(|| Error::Degenerate("singular particle covariance".into()))?;
    let d = Vector3::from(x) - p.center_vec();
    Ok((-(d.transpose() * inv * d)[(0, 0)]).exp())
}

#[derive(Debug, Clone, PartialEq)]
pub struct Camera {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: usize,
    pub height: usize,
    /// Row-major 4×4 rigid transform taking world points to camera space
    /// (x right, y down, z forward).
    pub world_to_camera: [f64; 16],
}

impl Camera {
    /// Camera at `eye` looking at `target`. `up` is the approximate world up
    /// direction (image y points opposite to it).
    pub fn look_at(
        eye: [f64; 3],
        target: [f64; 3],
        up: [f64; 3],
        focal: f64,
        width: usize,
        height: usize,
    ) -> Result<Self> {
        let eye_v = Vector3::from(eye);
        let fwd = Vector3::from(target) - eye_v;
        if fwd.norm() < 1e-12 {
            return Err(Error::InvalidCamera("look-at target coincides with camera position".into()));
        }
        let z = fwd.normalize();
        let down = -Vector3::from(up);
        let x = down.cross(&z);
        if x.norm() < 1e-12 {
            return Err(Error::InvalidCamera("up vector parallel to viewing direction".into()));
        }
        let x = x.normalize();
        let y = z.cross(&x);
        let rot = Matrix3::from_rows(&[x.transpose(), y.transpose(), z.transpose()]);
        let t = -(rot * eye_v);
        let mut m = [0.0; 16];
        for r in 0..3 {
            for c in 0..3 {
                m[4 * r + c] = rot[(r, c)];
            }
            m[4 * r + 3] = t[r];
        }
        m[15] = 1.0;
        let cam = Camera {
            fx: focal,
            fy: focal,
            cx: (width as f64 - 1.0) / 2.0,
            cy: (height as f64 - 1.0) / 2.0,
            width,
            height,
            world_to_camera: m,
        };
        cam.validate()?;
        Ok(cam)
    }

    pub fn identity(focal: f64, width: usize, height: usize) -> Self {
        let mut m = [0.0; 16];
        m[0] = 1.0;
        m[5] = 1.0;
        m[10] = 1.0;
        m[15] = 1.0;
        Camera {
            fx: focal,
            fy: focal,
            cx: (width as f64 - 1.0) / 2.0,
            cy: (height as f64 - 1.0) / 2.0,
            width,
            height,
            world_to_camera: m,
        }
    }

    pub fn matrix(&self) -> Matrix4<f64> {
        Matrix4::from_row_slice(&self.world_to_camera)
    }

    pub fn rotation(&self) -> Matrix3<f64> {
        let m = &self.world_to_camera;
        Matrix3::new(m[0], m[1], m[2], m[4], m[5], m[6], m[8], m[9], m[10])
    }

    pub fn translation(&self) -> Vector3<f64> {
        let m = &self.world_to_camera;
        Vector3::new(m[3], m[7], m[11])
    }

    pub fn to_camera(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation() * p + self.translation()
    }

    /// Camera center in world coordinates.
    pub fn position(&self) -> Vector3<f64> {
        -(self.rotation().transpose() * self.translation())
    }

    /// Pixel coordinates of a camera-space point (pixel centers sit on integers).
    pub fn project_camera_point(&self, t: &Vector3<f64>) -> [f64; 2] {
        [self.fx * t.x / t.z + self.cx, self.fy * t.y / t.z + self.cy]
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |s: String| Err(Error::InvalidCamera(s));
        if !self.world_to_camera.iter().all(|v| v.is_finite()) {
            return bad("non-finite extrinsics".into());
        }
        if !(self.fx > 0.0 && self.fy > 0.0 && self.fx.is_finite() && self.fy.is_finite()) {
            return bad(format!("focal lengths must be positive (fx={}, fy={})", self.fx, self.fy));
        }
        if self.width == 0 || self.height == 0 {
            return bad("zero image size".into());
        }
        if !(0.0..self.width as f64).contains(&self.cx) || !(0.0..self.height as f64).contains(&self.cy) {
            return bad(format!("principal point ({}, {}) outside image", self.cx, self.cy));
        }
        let r = self.rotation();
        let err = (r * r.transpose() - Matrix3::identity()).abs().max();
        if err > 1e-6 {
            return bad(format!("rotation block not orthonormal (error {err:.2e})"));
        }
        if r.determinant() < 0.0 {
            return bad("rotation block is a reflection".into());
        }
        let m = &self.world_to_camera;
        if m[12] != 0.0 || m[13] != 0.0 || m[14] != 0.0 || m[15] != 1.0 {
            return bad("last row of world_to_camera must be [0, 0, 0, 1]".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Aabb {
    pub min: [f64; 3],
    pub max: [f64; 3],
}

impl Aabb {
    pub fn new(min: [f64; 3], max: [f64; 3]) -> Self {
        Self { min, max }
    }

    pub fn center(&self) -> [f64; 3] {
        [0, 1, 2].map(|i| 0.5 * (self.min[i] + self.max[i]))
    }

    pub fn extent(&self) -> f64 {
        (0..3)
            .map(|i| (self.max[i] - self.min[i]).powi(2))
            .sum::<f64>()
            .sqrt()
    }

    pub fn contains_inflated(&self, p: &[f64; 3], margin: f64) -> bool {
        (0..3).all(|i| p[i] >= self.min[i] - margin && p[i] <= self.max[i] + margin)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Scene {
    pub particles: Vec<GaussianParticle>,
    pub bounds: Aabb,
    /// Per-channel mean intensity, restores the Poisson solution's free constant.
    pub dc_model: Vec<f64>,
    /// Pixels per world unit at which Laplacian amplitudes are expressed.
    /// When set, a particle at camera depth `z` splats `a · (d z / f)²`
    /// instead of `a`, so the same amplitudes give the same image detail at
    /// any viewing distance. `None` splats amplitudes unchanged.
    pub laplacian_density: Option<f64>,
}

impl Scene {
    pub fn channels(&self) -> usize {
        self.dc_model.len()
    }

    pub fn len(&self) -> usize {
        self.particles.len()
    }

    pub fn is_empty(&self) -> bool {
        self.particles.is_empty()
    }

    pub fn validate(&self) -> Result<()> {
        if self.particles.is_empty() {
            return Err(Error::InvalidScene("scene has no particles".into()));
        }
        if let Some(d) = self.laplacian_density {
            if !(d.is_finite() && d > 0.0) {
                return Err(Error::InvalidScene(format!("laplacian_density must be positive, got {d}")));
            }
        }
        if self.dc_model.is_empty() || !self.dc_model.iter().all(|v| v.is_finite()) {
            return Err(Error::InvalidScene("dc_model must be a non-empty finite vector".into()));
        }
        if !(0..3).all(|i| {
            self.bounds.min[i].is_finite() && self.bounds.max[i].is_finite() && self.bounds.min[i] <= self.bounds.max[i]
        }) {
            return Err(Error::InvalidScene(format!("bad bounds {:?}", self.bounds)));
        }
        let channels = self.channels();
        for (i, p) in self.particles.iter().enumerate() {
            p.validate(i)?;
            if p.amplitude.len() != channels {
                return Err(Error::InvalidParticle {
                    index: i,
                    reason: format!("{} amplitude channels, scene has {channels}", p.amplitude.len()),
                });
            }
            if !self.bounds.contains_inflated(&p.center, 3.0 * p.max_scale()) {
                return Err(Error::InvalidParticle {
                    index: i,
                    reason: format!("center {:?} outside inflated bounds", p.center),
                });
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[track_caller]
    fn assert_close(a: f64, b: f64, tol: f64) {
        assert!((a - b).abs() <= tol, "{a} vs {b} (tol {tol})");
    }

    fn particle(rotation: [f64; 4], log_scale: [f64; 3]) -> GaussianParticle {
        GaussianParticle {
            center: [0.0; 3],
            rotation,
            log_scale,
            amplitude: vec![1.0],
            opacity_logit: 0.0,
        }
    }

    #[test]
    fn covariance_identity() {
        let c = covariance(&particle([1.0, 0.0, 0.0, 0.0], [0.0; 3])).unwrap();
        assert!((c - Matrix3::identity()).abs().max() < 1e-15);
    }

    #[test]
    fn covariance_axis_scale() {
        let ln2 = 2f64.ln();
        let c = covariance(&particle([1.0, 0.0, 0.0, 0.0], [ln2, 0.0, 0.0])).unwrap();
        let want = Matrix3::from_diagonal(&Vector3::new(4.0, 1.0, 1.0));
        assert!((c - want).abs().max() < 1e-12);
    }

    #[test]
    fn covariance_rotated_about_z() {
        // R = [[0,-1,0],[1,0,0],[0,0,1]]; R diag(4,1,1) Rᵀ = diag(1,4,1)
        let q = quat_from_axis_angle([0.0, 0.0, 1.0], std::f64::consts::FRAC_PI_2);
        let c = covariance(&particle(q, [2f64.ln(), 0.0, 0.0])).unwrap();
        let want = Matrix3::from_diagonal(&Vector3::new(1.0, 4.0, 1.0));
        assert!((c - want).abs().max() < 1e-12, "{c}");
    }

    #[test]
    fn covariance_rejects_nan() {
        let mut p = particle([1.0, 0.0, 0.0, 0.0], [0.0; 3]);
        p.center[1] = f64::NAN;
        assert!(matches!(covariance(&p), Err(Error::InvalidParticle { .. })));
    }

    #[test]
    fn gaussian_values() {
        let p = particle([1.0, 0.0, 0.0, 0.0], [0.0; 3]);
        assert_close(eval_gaussian(&p, [0.0; 3]).unwrap(), 1.0, 1e-15);
        assert_close(eval_gaussian(&p, [0.0, 1.0, 0.0]).unwrap(), (-1f64).exp(), 1e-15);
        let p = particle([1.0, 0.0, 0.0, 0.0], [2f64.ln(), 0.0, 0.0]);
        assert_close(eval_gaussian(&p, [2.0, 0.0, 0.0]).unwrap(), (-1f64).exp(), 1e-14);
    }

    #[test]
    fn gaussian_singular() {
        let p = particle([1.0, 0.0, 0.0, 0.0], [-400.0, 0.0, 0.0]);
        assert!(eval_gaussian(&p, [1.0, 0.0, 0.0]).is_err());
    }

    #[test]
    fn quaternion_backward_matches_finite_differences() {
        let q = [0.9, -0.2, 0.35, 0.1];
        let g = Matrix3::new(0.3, -1.0, 0.2, 0.5, 0.7, -0.4, 1.1, 0.0, -0.6);
        let f = |q: &[f64; 4]| quat_to_matrix(q).component_mul(&g).sum();
        let analytic = quat_matrix_backward(&q, &g);
        for i in 0..4 {
            let h = 1e-6;
            let mut qp = q;
            let mut qm = q;
            qp[i] += h;
            qm[i] -= h;
            let fd = (f(&qp) - f(&qm)) / (2.0 * h);
            assert_close(analytic[i], fd, 1e-8);
        }
    }

    #[test]
    fn look_at_is_rigid_and_centers_target() {
        let cam = Camera::look_at([1.0, 2.0, -3.0], [0.0, 0.0, 0.0], [0.0, 1.0, 0.0], 50.0, 64, 48).unwrap();
        let t = cam.to_camera(&Vector3::zeros());
        let px = cam.project_camera_point(&t);
        assert_close(px[0], cam.cx, 1e-9);
        assert_close(px[1], cam.cy, 1e-9);
        assert!((cam.position() - Vector3::new(1.0, 2.0, -3.0)).norm() < 1e-12);
        // world up maps to image up (negative y)
        let up = cam.to_camera(&Vector3::new(0.0, 0.1, 0.0));
        assert!(cam.project_camera_point(&up)[1] < cam.cy);
    }

    #[test]
    fn degenerate_look_at() {
        assert!(Camera::look_at([1.0; 3], [1.0; 3], [0.0, 1.0, 0.0], 10.0, 8, 8).is_err());
    }

    #[test]
    fn camera_validation() {
        let mut cam = Camera::identity(10.0, 8, 8);
        assert!(cam.validate().is_ok());
        cam.cx = 8.0;
        assert!(cam.validate().is_err());
        let mut cam = Camera::identity(10.0, 8, 8);
        cam.world_to_camera[0] = 1.1;
        assert!(cam.validate().is_err());
    }

    #[test]
    fn scene_bounds_check() {
        let mut s = Scene {
            particles: vec![GaussianParticle::isotropic([0.5; 3], 0.1, vec![0.0], 0.5)],
            bounds: Aabb::new([0.0; 3], [1.0; 3]),
            dc_model: vec![0.5],
            laplacian_density: None,
        };
        assert!(s.validate().is_ok());
        s.particles[0].center = [1.25, 0.5, 0.5];
        assert!(s.validate().is_ok(), "inside 3-sigma inflation");
        s.particles[0].center = [1.5, 0.5, 0.5];
        assert!(s.validate().is_err());
        s.particles.clear();
        assert!(s.validate().is_err());
    }
}
