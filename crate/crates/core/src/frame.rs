use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};

use crate::rod::so3::orthonormality_error;

/// Base pose of one segment: position `p(s₀)` and orientation `R(s₀)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(from = "FrameRepr", into = "FrameRepr")]
pub struct SegmentFrame {
    pub origin: Vector3<f64>,
    pub rotation: Matrix3<f64>,
}

impl SegmentFrame {
    pub fn identity() -> Self {
        Self {
            origin: Vector3::zeros(),
            rotation: Matrix3::identity(),
        }
    }

    pub fn new(origin: Vector3<f64>, rotation: Matrix3<f64>) -> Self {
        Self { origin, rotation }
    }

    pub fn orthonormality_error(&self) -> f64 {
        orthonormality_error(&self.rotation)
    }

    /// Map a world point into this frame.
    #[inline]
    pub fn to_local(&self, world: &Vector3<f64>) -> Vector3<f64> {
        self.rotation.transpose() * (world - self.origin)
    }

    #[inline]
    pub fn to_world(&self, local: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * local + self.origin
    }

    /// Left-compose with a rigid motion `(R, t)`.
    pub fn transformed(&self, rotation: &Matrix3<f64>, translation: &Vector3<f64>) -> Self {
        Self {
            origin: rotation * self.origin + translation,
            rotation: rotation * self.rotation,
        }
    }
}

/// Row-major rotation for files.
#[derive(Serialize, Deserialize)]
struct FrameRepr {
    origin: [f64; 3],
    rotation: [[f64; 3]; 3],
}

impl From<FrameRepr> for SegmentFrame {
    fn from(f: FrameRepr) -> Self {
        Self {
            origin: Vector3::from(f.origin),
            rotation: from_rows(&f.rotation),
        }
    }
}

impl From<SegmentFrame> for FrameRepr {
    fn from(f: SegmentFrame) -> Self {
        Self {
            origin: f.origin.into(),
            rotation: rows(&f.rotation),
        }
    }
}

pub(crate) fn rows(m: &Matrix3<f64>) -> [[f64; 3]; 3] {
    [
        [m[(0, 0)], m[(0, 1)], m[(0, 2)]],
        [m[(1, 0)], m[(1, 1)], m[(1, 2)]],
        [m[(2, 0)], m[(2, 1)], m[(2, 2)]],
    ]
}

pub(crate) fn from_rows(r: &[[f64; 3]; 3]) -> Matrix3<f64> {
    Matrix3::new(
        r[0][0], r[0][1], r[0][2], r[1][0], r[1][1], r[1][2], r[2][0], r[2][1], r[2][2],
    )
}
