//! Pinhole cameras and view rigs.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::num::Scalar;

/// Pinhole camera with a world-to-camera rigid transform.
///
/// Camera space: `x` right, `y` down, `z` forward (in front of the lens is
/// positive depth). Pixel `(u, v)` has its center at `(u + 0.5, v + 0.5)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Camera<T> {
    pub width: usize,
    pub height: usize,
    pub fx: T,
    pub fy: T,
    pub cx: T,
    pub cy: T,
    /// World-to-camera rotation, row major. Rows are the camera axes
    /// expressed in world coordinates.
    pub rot: [[T; 3]; 3],
    /// World-to-camera translation: `p_cam = rot * p_world + trans`.
    pub trans: [T; 3],
    pub near: T,
    pub far: T,
}

fn cross<T: Scalar>(a: [T; 3], b: [T; 3]) -> [T; 3] {
    [
        a[1] * b[2] - a[2] * b[1],
        a[2] * b[0] - a[0] * b[2],
        a[0] * b[1] - a[1] * b[0],
    ]
}

fn norm3<T: Scalar>(a: [T; 3]) -> T {
    (a[0] * a[0] + a[1] * a[1] + a[2] * a[2]).sqrt()
}

fn normalize3<T: Scalar>(a: [T; 3]) -> Result<[T; 3]> {
    let n = norm3(a);
    if n < T::of(1e-9) {
        return Err(Error::Validation("degenerate direction vector".into()));
    }
    Ok([a[0] / n, a[1] / n, a[2] / n])
}

impl<T: Scalar> Camera<T> {
    /// Square camera looking from `eye` toward `target` with the given
    /// vertical field of view in degrees.
    pub fn look_at(
        eye: [T; 3],
        target: [T; 3],
        up: [T; 3],
        width: usize,
        height: usize,
        fov_y_deg: T,
    ) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::Validation("camera resolution must be nonzero".into()));
        }
        let z = normalize3([target[0] - eye[0], target[1] - eye[1], target[2] - eye[2]])?;
        // Fall back to a different up hint when the view axis is (anti)parallel
        // to the requested up vector.
        let mut x = cross(up, z);
        if norm3(x) < T::of(1e-6) {
            x = cross([T::one(), T::zero(), T::zero()], z);
        }
        let x = normalize3(x)?;
        let y = cross(z, x);
        let y = [-y[0], -y[1], -y[2]]; // image y grows downward
        let rot = [x, y, z];
        let mut trans = [T::zero(); 3];
        for r in 0..3 {
            trans[r] = -(rot[r][0] * eye[0] + rot[r][1] * eye[1] + rot[r][2] * eye[2]);
        }
        let half = T::of(0.5) * fov_y_deg.to_radians();
        let fy = T::of(0.5) * T::of(height as f64) / half.tan();
        Ok(Camera {
            width,
            height,
            fx: fy,
            fy,
            cx: T::of(0.5) * T::of(width as f64),
            cy: T::of(0.5) * T::of(height as f64),
            rot,
            trans,
            near: T::of(0.01),
            far: T::of(1e4),
        })
    }

    /// Camera position in world coordinates.
    pub fn eye(&self) -> [T; 3] {
        // p_cam = R p + t with p_cam = 0  =>  p = -R^T t.
        let r = &self.rot;
        let t = &self.trans;
        [
            -(r[0][0] * t[0] + r[1][0] * t[1] + r[2][0] * t[2]),
            -(r[0][1] * t[0] + r[1][1] * t[1] + r[2][1] * t[2]),
            -(r[0][2] * t[0] + r[1][2] * t[1] + r[2][2] * t[2]),
        ]
    }

    /// World point to camera coordinates.
    pub fn to_camera(&self, p: [T; 3]) -> [T; 3] {
        let r = &self.rot;
        [
            r[0][0] * p[0] + r[0][1] * p[1] + r[0][2] * p[2] + self.trans[0],
            r[1][0] * p[0] + r[1][1] * p[1] + r[1][2] * p[2] + self.trans[1],
            r[2][0] * p[0] + r[2][1] * p[1] + r[2][2] * p[2] + self.trans[2],
        ]
    }

    pub fn cast<U: Scalar>(&self) -> Camera<U> {
        let c = |v: T| U::of(v.widen());
        let mut rot = [[U::zero(); 3]; 3];
        for r in 0..3 {
            for k in 0..3 {
                rot[r][k] = c(self.rot[r][k]);
            }
        }
        Camera {
            width: self.width,
            height: self.height,
            fx: c(self.fx),
            fy: c(self.fy),
            cx: c(self.cx),
            cy: c(self.cy),
            rot,
            trans: [c(self.trans[0]), c(self.trans[1]), c(self.trans[2])],
            near: c(self.near),
            far: c(self.far),
        }
    }
}

/// A fixed set of training/checking viewpoints around a scene.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CameraRig<T> {
    pub cameras: Vec<Camera<T>>,
}

impl<T: Scalar> CameraRig<T> {
    /// Evenly spread cameras on a spherical band around the origin, all
    /// looking at the center. Azimuths follow the golden angle so any prefix
    /// of the rig is also well spread.
    pub fn orbit(
        count: usize,
        radius: T,
        max_elevation_deg: T,
        width: usize,
        height: usize,
        fov_y_deg: T,
    ) -> Result<Self> {
        if count == 0 {
            return Err(Error::Validation("camera rig needs at least one view".into()));
        }
        let golden = T::of(std::f64::consts::PI * (3.0 - 5.0f64.sqrt()));
        let band = max_elevation_deg.to_radians().sin();
        let mut cameras = Vec::with_capacity(count);
        for i in 0..count {
            let frac = (T::of(i as f64) + T::of(0.5)) / T::of(count as f64);
            // Uniform in sin(elevation) gives even area coverage on the band.
            let sin_el = band * (T::of(2.0) * frac - T::one());
            let el = sin_el.asin();
            let az = T::of(i as f64) * golden;
            let eye = [
                radius * el.cos() * az.cos(),
                radius * sin_el,
                radius * el.cos() * az.sin(),
            ];
            cameras.push(Camera::look_at(
                eye,
                [T::zero(); 3],
                [T::zero(), T::one(), T::zero()],
                width,
                height,
                fov_y_deg,
            )?);
        }
        Ok(CameraRig { cameras })
    }

    pub fn len(&self) -> usize {
        self.cameras.len()
    }

    pub fn is_empty(&self) -> bool {
        self.cameras.is_empty()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn look_at_centers_target() {
        let cam = Camera::<f64>::look_at(
            [0.0, 0.0, -5.0],
            [0.0, 0.0, 0.0],
            [0.0, 1.0, 0.0],
            64,
            64,
            60.0,
        )
        .unwrap();
        let t = cam.to_camera([0.0, 0.0, 0.0]);
        assert!((t[0]).abs() < 1e-12 && (t[1]).abs() < 1e-12);
        assert!((t[2] - 5.0).abs() < 1e-12);
    }

    #[test]
    fn world_up_projects_above_center() {
        let cam = Camera::<f64>::look_at(
            [0.0, 0.0, -5.0],
            [0.0, 0.0, 0.0],
            [0.0, 1.0, 0.0],
            64,
            64,
            60.0,
        )
        .unwrap();
        let t = cam.to_camera([0.0, 1.0, 0.0]);
        // y down in camera space: a point above the axis has negative y.
        assert!(t[1] < 0.0);
    }

    #[test]
    fn rotation_is_orthonormal() {
        let cam = Camera::<f64>::look_at(
            [2.0, 1.5, -3.0],
            [0.1, -0.2, 0.3],
            [0.0, 1.0, 0.0],
            32,
            32,
            45.0,
        )
        .unwrap();
        for i in 0..3 {
            for j in 0..3 {
                let dot: f64 = (0..3).map(|k| cam.rot[i][k] * cam.rot[j][k]).sum();
                let want = if i == j { 1.0 } else { 0.0 };
                assert!((dot - want).abs() < 1e-12, "rot row {i}.{j} dot {dot}");
            }
        }
    }

    #[test]
    fn eye_round_trips() {
        let eye = [1.0, 2.0, 3.0];
        let cam =
            Camera::<f64>::look_at(eye, [0.0; 3], [0.0, 1.0, 0.0], 16, 16, 50.0).unwrap();
        let back = cam.eye();
        for k in 0..3 {
            assert!((back[k] - eye[k]).abs() < 1e-12);
        }
    }

    #[test]
    fn orbit_rig_spreads_views() {
        let rig = CameraRig::<f32>::orbit(32, 4.0, 60.0, 128, 128, 60.0).unwrap();
        assert_eq!(rig.len(), 32);
        for cam in &rig.cameras {
            let eye = cam.eye();
            let r = (eye[0] * eye[0] + eye[1] * eye[1] + eye[2] * eye[2]).sqrt();
            assert!((r - 4.0).abs() < 1e-3, "radius {r}");
            // elevation stays inside the requested band
            let el = (eye[1] / r).asin().to_degrees();
            assert!(el.abs() <= 60.0 + 1e-3, "elevation {el}");
        }
        // distinct azimuths
        let a0 = rig.cameras[0].eye();
        let a1 = rig.cameras[1].eye();
        assert!((a0[0] - a1[0]).abs() + (a0[2] - a1[2]).abs() > 0.1);
    }
}
