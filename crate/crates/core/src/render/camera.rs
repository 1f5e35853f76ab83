use serde::{Deserialize, Serialize};

use crate::chunk::{EmbeddingData, TensorMetaData};
use crate::error::{Error, Result};

/// A point or direction in physical space, in tensor dimension order.
pub type Vec3 = [f64; 3];

pub(crate) fn sub(a: Vec3, b: Vec3) -> Vec3 {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

pub(crate) fn add(a: Vec3, b: Vec3) -> Vec3 {
    [a[0] + b[0], a[1] + b[1], a[2] + b[2]]
}

pub(crate) fn scale(a: Vec3, s: f64) -> Vec3 {
    [a[0] * s, a[1] * s, a[2] * s]
}

pub(crate) fn dot(a: Vec3, b: Vec3) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

pub(crate) fn cross(a: Vec3, b: Vec3) -> Vec3 {
    [
        a[1] * b[2] - a[2] * b[1],
        a[2] * b[0] - a[0] * b[2],
        a[0] * b[1] - a[1] * b[0],
    ]
}

pub(crate) fn norm(a: Vec3) -> f64 {
    dot(a, a).sqrt()
}

pub(crate) fn normalize(a: Vec3) -> Vec3 {
    scale(a, 1.0 / norm(a))
}

/// Perspective pinhole camera in the physical space of a volume.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CameraState {
    pub eye: Vec3,
    pub look_at: Vec3,
    pub up: Vec3,
    /// Vertical field of view in degrees.
    pub fov: f64,
    pub near: f64,
    pub far: f64,
}

impl CameraState {
    pub fn new(eye: Vec3, look_at: Vec3, up: Vec3, fov: f64, near: f64, far: f64) -> Result<Self> {
        let c = CameraState {
            eye,
            look_at,
            up,
            fov,
            near,
            far,
        };
        c.validate()?;
        Ok(c)
    }

    pub fn validate(&self) -> Result<()> {
        let finite = self
            .eye
            .iter()
            .chain(&self.look_at)
            .chain(&self.up)
            .chain([&self.fov, &self.near, &self.far])
            .all(|v| v.is_finite());
        if !finite {
            return Err(Error::invalid("camera parameters must be finite"));
        }
        if !(self.fov > 0.0 && self.fov < 180.0) {
            return Err(Error::invalid(format!("fov must be in (0, 180), got {}", self.fov)));
        }
        if !(self.near > 0.0 && self.near < self.far) {
            return Err(Error::invalid("camera needs 0 < near < far"));
        }
        let view = sub(self.look_at, self.eye);
        if norm(view) == 0.0 {
            return Err(Error::invalid("camera eye and look-at coincide"));
        }
        let c = cross(normalize(view), self.up);
        if norm(self.up) == 0.0 || norm(c) < 1e-9 * norm(self.up) {
            return Err(Error::invalid("camera up vector is parallel to the view direction"));
        }
        Ok(())
    }

    /// Looks at the center of the volume's physical box from the +diagonal,
    /// far enough that the box's bounding sphere fills the vertical fov.
    pub fn for_volume(md: &TensorMetaData, embedding: &EmbeddingData, fov: f64) -> Result<Self> {
        if md.num_dims() != 3 {
            return Err(Error::invalid(format!(
                "camera_for_volume needs a 3-D tensor, got {} dims",
                md.num_dims()
            )));
        }
        if !(fov > 0.0 && fov < 180.0) {
            return Err(Error::invalid(format!("fov must be in (0, 180), got {fov}")));
        }
        let p = embedding.physical_size(md);
        let center = [p[0] / 2.0, p[1] / 2.0, p[2] / 2.0];
        let radius = norm([p[0], p[1], p[2]]) / 2.0;
        let dist = radius / (fov.to_radians() / 2.0).tan();
        let diag = normalize([1.0, 1.0, 1.0]);
        CameraState::new(
            add(center, scale(diag, dist)),
            center,
            [0.0, 1.0, 0.0],
            fov,
            dist * 1e-3,
            dist + 2.0 * radius,
        )
    }

    /// Unit forward, right and up vectors.
    pub fn basis(&self) -> (Vec3, Vec3, Vec3) {
        let f = normalize(sub(self.look_at, self.eye));
        let r = normalize(cross(f, self.up));
        let u = cross(r, f);
        (f, r, u)
    }

    /// Unit direction of the ray through the center of pixel (`row`, `col`)
    /// of a `width` x `height` frame.
    pub fn ray_dir(&self, row: u64, col: u64, width: u64, height: u64) -> Vec3 {
        let (f, r, u) = self.basis();
        let h = (self.fov.to_radians() / 2.0).tan();
        let aspect = width as f64 / height as f64;
        let x = (2.0 * (col as f64 + 0.5) / width as f64 - 1.0) * h * aspect;
        let y = (1.0 - 2.0 * (row as f64 + 0.5) / height as f64) * h;
        normalize(add(f, add(scale(r, x), scale(u, y))))
    }

    /// Continuous (row, col) frame coordinates of `p`, or `None` behind the eye.
    pub fn project(&self, p: Vec3, width: u64, height: u64) -> Option<(f64, f64)> {
        let (f, r, u) = self.basis();
        let v = sub(p, self.eye);
        let z = dot(v, f);
        if z <= 0.0 {
            return None;
        }
        let h = (self.fov.to_radians() / 2.0).tan();
        let aspect = width as f64 / height as f64;
        let x = dot(v, r) / z / (h * aspect);
        let y = dot(v, u) / z / h;
        Some(((1.0 - y) / 2.0 * height as f64, (x + 1.0) / 2.0 * width as f64))
    }

    /// Physical size of one pixel per unit of distance from the eye.
    pub fn pixel_angle(&self, height: u64) -> f64 {
        2.0 * (self.fov.to_radians() / 2.0).tan() / height as f64
    }

    /// Rotates the eye around the look-at point by `yaw` (about `up`) and
    /// `pitch` (about the right vector), in degrees.
    pub fn orbit(&self, yaw: f64, pitch: f64) -> Result<Self> {
        let (_, r, _) = self.basis();
        let up = normalize(self.up);
        let v = sub(self.eye, self.look_at);
        let v = rotate(v, up, yaw.to_radians());
        let v = rotate(v, r, pitch.to_radians());
        let mut c = self.clone();
        c.eye = add(self.look_at, v);
        c.validate()?;
        Ok(c)
    }
}

fn rotate(v: Vec3, axis: Vec3, angle: f64) -> Vec3 {
    let (s, c) = angle.sin_cos();
    add(
        add(scale(v, c), scale(cross(axis, v), s)),
        scale(axis, dot(axis, v) * (1.0 - c)),
    )
}

/// Parameter range `[t0, t1]` where the ray `origin + t * dir` lies inside
/// the box `[0, size]`, or `None`.
pub fn ray_box(origin: Vec3, dir: Vec3, size: Vec3) -> Option<(f64, f64)> {
    let mut t0 = f64::NEG_INFINITY;
    let mut t1 = f64::INFINITY;
    for i in 0..3 {
        if dir[i] == 0.0 {
            if origin[i] < 0.0 || origin[i] > size[i] {
                return None;
            }
            continue;
        }
        let a = (0.0 - origin[i]) / dir[i];
        let b = (size[i] - origin[i]) / dir[i];
        t0 = t0.max(a.min(b));
        t1 = t1.min(a.max(b));
    }
    (t0 < t1).then_some((t0, t1))
}
