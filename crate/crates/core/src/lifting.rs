//! Observables: per-segment projection, delay embedding and input encoding.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::frame::SegmentFrame;
use crate::rod::BackboneSample;

/// Frames further than this from SO(3) are rejected.
pub const FRAME_TOLERANCE: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InputMode {
    /// Model input is `u_k`.
    Absolute,
    /// Model input is `Δu_k = u_k − u_{k−1}`.
    Difference,
}

impl std::str::FromStr for InputMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "u" | "absolute" => Ok(Self::Absolute),
            "du" | "difference" => Ok(Self::Difference),
            _ => Err(Error::InvalidArgument(format!("unknown input mode {s:?}"))),
        }
    }
}

impl std::fmt::Display for InputMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Absolute => "u",
            Self::Difference => "du",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct LiftingSpec {
    pub per_segment_projection: bool,
    pub delay_depth: usize,
    pub input_mode: InputMode,
    pub per_segment: usize,
    pub segments: usize,
}

impl LiftingSpec {
    pub fn new(segments: usize, per_segment_projection: bool, input_mode: InputMode) -> Self {
        Self {
            per_segment_projection,
            delay_depth: 3,
            input_mode,
            per_segment: 10,
            segments,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.delay_depth == 0 || self.per_segment == 0 || self.segments == 0 {
            return Err(Error::InvalidConfig(format!(
                "lifting needs positive delay depth, stations and segments: {self:?}"
            )));
        }
        Ok(())
    }

    /// `n = 3 × segments × per_segment`.
    pub fn state_dim(&self) -> usize {
        3 * self.segments * self.per_segment
    }

    /// `M − m = delay_depth × n`.
    pub fn lifted_dim(&self) -> usize {
        self.delay_depth * self.state_dim()
    }

    /// `C = [I_n 0]`.
    pub fn selector(&self) -> DMatrix<f64> {
        let n = self.state_dim();
        let mut c = DMatrix::zeros(n, self.lifted_dim());
        c.fill_diagonal(1.0);
        c
    }

    /// State `x` of a backbone sample: projected or raw world positions.
    pub fn observe(&self, sample: &BackboneSample) -> Result<DVector<f64>> {
        self.check_sample(sample)?;
        let x = if self.per_segment_projection {
            project_segments(&sample.positions, &sample.frames, self.per_segment)?
        } else {
            sample.positions.clone()
        };
        Ok(DVector::from_vec(x))
    }

    /// World positions of a state under `frames` (identity when unprojected).
    pub fn reconstruct(&self, x: &[f64], frames: &[SegmentFrame]) -> Result<Vec<f64>> {
        if x.len() != self.state_dim() {
            return Err(Error::DimensionMismatch {
                context: "state",
                expected: self.state_dim(),
                found: x.len(),
            });
        }
        if self.per_segment_projection {
            unproject_segments(x, frames, self.per_segment)
        } else {
            Ok(x.to_vec())
        }
    }

    fn check_sample(&self, sample: &BackboneSample) -> Result<()> {
        if sample.positions.len() != self.state_dim() {
            return Err(Error::DimensionMismatch {
                context: "backbone sample",
                expected: self.state_dim(),
                found: sample.positions.len(),
            });
        }
        if sample.frames.len() != self.segments {
            return Err(Error::DimensionMismatch {
                context: "segment frames",
                expected: self.segments,
                found: sample.frames.len(),
            });
        }
        Ok(())
    }

    pub fn embed(&self, history: &[DVector<f64>]) -> Result<DVector<f64>> {
        delay_embed(history, self.delay_depth)
    }

    pub fn encode(&self, u: &[f64], u_prev: &[f64]) -> Vec<f64> {
        encode_input(u, u_prev, self.input_mode)
    }
}

fn check_frames(frames: &[SegmentFrame], positions: usize, per_segment: usize) -> Result<()> {
    if per_segment == 0 || positions != 3 * per_segment * frames.len() {
        return Err(Error::DimensionMismatch {
            context: "positions per segment frame",
            expected: 3 * per_segment * frames.len(),
            found: positions,
        });
    }
    for (segment, f) in frames.iter().enumerate() {
        let error = f.orthonormality_error();
        if !(error <= FRAME_TOLERANCE) {
            return Err(Error::NonOrthonormalFrame { segment, error });
        }
    }
    Ok(())
}

/// `x = R(s₀)ᵀ (p(s) − p(s₀))` for every station, segment by segment.
pub fn project_segments(
    positions: &[f64],
    frames: &[SegmentFrame],
    per_segment: usize,
) -> Result<Vec<f64>> {
    check_frames(frames, positions.len(), per_segment)?;
    let mut out = Vec::with_capacity(positions.len());
    for (j, f) in frames.iter().enumerate() {
        for c in positions[3 * per_segment * j..3 * per_segment * (j + 1)].chunks_exact(3) {
            out.extend_from_slice(f.to_local(&nalgebra::Vector3::new(c[0], c[1], c[2])).as_slice());
        }
    }
    Ok(out)
}

/// Inverse of [`project_segments`].
pub fn unproject_segments(
    x: &[f64],
    frames: &[SegmentFrame],
    per_segment: usize,
) -> Result<Vec<f64>> {
    check_frames(frames, x.len(), per_segment)?;
    let mut out = Vec::with_capacity(x.len());
    for (j, f) in frames.iter().enumerate() {
        for c in x[3 * per_segment * j..3 * per_segment * (j + 1)].chunks_exact(3) {
            out.extend_from_slice(f.to_world(&nalgebra::Vector3::new(c[0], c[1], c[2])).as_slice());
        }
    }
    Ok(out)
}

/// `[x_k; x_{k−1}; …]` from a history ordered oldest to newest. Missing
/// delays replicate the oldest entry.
pub fn delay_embed(history: &[DVector<f64>], depth: usize) -> Result<DVector<f64>> {
    let newest = history.last().ok_or(Error::EmptyHistory)?;
    let n = newest.len();
    let mut z = DVector::zeros(n * depth);
    for d in 0..depth {
        let x = &history[history.len().saturating_sub(d + 1)];
        if x.len() != n {
            return Err(Error::DimensionMismatch {
                context: "history entry",
                expected: n,
                found: x.len(),
            });
        }
        z.rows_mut(d * n, n).copy_from(x);
    }
    Ok(z)
}

pub fn encode_input(u: &[f64], u_prev: &[f64], mode: InputMode) -> Vec<f64> {
    match mode {
        InputMode::Absolute => u.to_vec(),
        InputMode::Difference => u.iter().zip(u_prev).map(|(a, b)| a - b).collect(),
    }
}

/// Rolling window of the most recent states for online lifting.
#[derive(Debug, Clone)]
pub struct DelayBuffer {
    depth: usize,
    history: Vec<DVector<f64>>,
}

impl DelayBuffer {
    pub fn new(depth: usize) -> Self {
        Self {
            depth,
            history: Vec::with_capacity(depth),
        }
    }

    pub fn push(&mut self, x: DVector<f64>) {
        if self.history.len() == self.depth {
            self.history.remove(0);
        }
        self.history.push(x);
    }

    pub fn lifted(&self) -> Result<DVector<f64>> {
        delay_embed(&self.history, self.depth)
    }

    pub fn is_empty(&self) -> bool {
        self.history.is_empty()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::{Matrix3, Vector3};

    #[test]
    fn dims() {
        let s = LiftingSpec::new(3, true, InputMode::Difference);
        assert_eq!(s.state_dim(), 90);
        assert_eq!(s.lifted_dim(), 270);
        let c = s.selector();
        assert_eq!(c.shape(), (90, 270));
        assert_eq!(c.sum(), 90.0);
    }

    #[test]
    fn identity_frame_projection_is_identity() {
        let p: Vec<f64> = (0..6).map(|i| i as f64 * 0.3 - 0.5).collect();
        let x = project_segments(&p, &[SegmentFrame::identity()], 2).unwrap();
        assert_eq!(x, p);
    }

    #[test]
    fn zero_segment_maps_to_base() {
        let f = SegmentFrame::new(Vector3::new(1.0, 2.0, 3.0), crate::rod::so3::axis_angle(&Vector3::new(0.3, 0.1, 0.0).normalize(), 0.4));
        let w = unproject_segments(&[0.0; 6], &[f], 2).unwrap();
        for c in w.chunks(3) {
            assert_eq!(c, f.origin.as_slice());
        }
    }

    #[test]
    fn rejects_bad_frame() {
        let f = SegmentFrame::new(Vector3::zeros(), Matrix3::identity() * 1.1);
        assert!(matches!(
            project_segments(&[0.0; 3], &[f], 1),
            Err(Error::NonOrthonormalFrame { segment: 0, .. })
        ));
    }

    #[test]
    fn embedding_cases() {
        let a = DVector::from_vec(vec![1.0, 2.0]);
        let b = DVector::from_vec(vec![3.0, 4.0]);
        assert_eq!(delay_embed(std::slice::from_ref(&a), 3).unwrap().as_slice(), &[1.0, 2.0, 1.0, 2.0, 1.0, 2.0]);
        assert_eq!(delay_embed(&[a.clone(), b.clone()], 3).unwrap().as_slice(), &[3.0, 4.0, 1.0, 2.0, 1.0, 2.0]);
        assert_eq!(delay_embed(&[a, b.clone()], 1).unwrap(), b);
        assert!(matches!(delay_embed(&[], 3), Err(Error::EmptyHistory)));
    }

    #[test]
    fn input_encoding() {
        assert_eq!(encode_input(&[1.0, 2.0], &[1.0, 2.0], InputMode::Difference), vec![0.0, 0.0]);
        assert_eq!(encode_input(&[1.0, 2.0], &[0.0, 0.0], InputMode::Difference), vec![1.0, 2.0]);
        assert_eq!(encode_input(&[1.0, 2.0], &[5.0, 5.0], InputMode::Absolute), vec![1.0, 2.0]);
    }

    #[test]
    fn buffer_keeps_depth() {
        let mut b = DelayBuffer::new(2);
        for i in 0..4 {
            b.push(DVector::from_element(1, i as f64));
        }
        assert_eq!(b.lifted().unwrap().as_slice(), &[3.0, 2.0]);
    }
}
