use std::path::Path;

use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};

use super::config::RobotConfig;
use crate::error::{Error, Result};
use crate::frame::{from_rows, rows, SegmentFrame};

/// Tendon tensions in newtons, ordered by segment and then by routing angle.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct TendonTension(Vec<f64>);

impl TendonTension {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if let Some((index, &value)) = values
            .iter()
            .enumerate()
            .find(|(_, v)| !(v.is_finite() && **v >= 0.0))
        {
            return Err(Error::NegativeTension { index, value });
        }
        Ok(Self(values))
    }

    pub fn zeros(len: usize) -> Self {
        Self(vec![0.0; len])
    }

    pub fn for_config(&self, cfg: &RobotConfig) -> Result<&Self> {
        if self.0.len() != cfg.num_tendons() {
            return Err(Error::DimensionMismatch {
                context: "tendon tensions",
                expected: cfg.num_tendons(),
                found: self.0.len(),
            });
        }
        Ok(self)
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NodeState {
    /// Position (m, world frame).
    pub p: Vector3<f64>,
    /// Cross-section orientation.
    pub r: Matrix3<f64>,
    /// Angular strain (1/m, body frame).
    pub v: Vector3<f64>,
    /// Linear velocity (m/s, body frame).
    pub q: Vector3<f64>,
    /// Angular velocity (rad/s, body frame).
    pub omega: Vector3<f64>,
    /// Total internal force across the section, backbone plus tendons (N, world frame).
    pub force: Vector3<f64>,
    /// Total internal moment across the section (N·m, world frame).
    pub moment: Vector3<f64>,
}

/// Discretized backbone at one time instant.
#[derive(Debug, Clone, PartialEq)]
pub struct RodState {
    pub time: f64,
    pub segments: usize,
    pub nodes_per_segment: usize,
    pub length_per_segment: f64,
    pub nodes: Vec<NodeState>,
}

impl RodState {
    pub fn ds(&self) -> f64 {
        self.length_per_segment / self.nodes_per_segment as f64
    }

    pub fn tip(&self) -> Vector3<f64> {
        self.nodes.last().expect("rod has nodes").p
    }

    /// Base frame of every segment.
    pub fn segment_frames(&self) -> Vec<SegmentFrame> {
        (0..self.segments)
            .map(|j| {
                let node = &self.nodes[j * self.nodes_per_segment];
                SegmentFrame::new(node.p, node.r)
            })
            .collect()
    }

    pub fn max_node_distance(&self, other: &RodState) -> f64 {
        self.nodes
            .iter()
            .zip(&other.nodes)
            .map(|(a, b)| (a.p - b.p).norm())
            .fold(0.0, f64::max)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(&RodSnapshot::from(self))?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let snap: RodSnapshot = serde_json::from_str(text)?;
        snap.try_into()
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_json()?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }
}

/// Backbone positions at the sampling stations, with each segment's base frame.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BackboneSample {
    /// `segments × per_segment` points, segment-major, flattened xyz.
    pub positions: Vec<f64>,
    pub frames: Vec<SegmentFrame>,
}

impl BackboneSample {
    pub fn point(&self, i: usize) -> Vector3<f64> {
        Vector3::new(
            self.positions[3 * i],
            self.positions[3 * i + 1],
            self.positions[3 * i + 2],
        )
    }

    pub fn num_points(&self) -> usize {
        self.positions.len() / 3
    }
}

/// Sample `per_segment` stations per segment at fractions `k / per_segment`
/// (k = 1..=per_segment) of the segment's arclength, so each segment base is
/// excluded and each segment tip included. Stations off the node grid are
/// interpolated with cubic Hermite splines using the exact tangents `R e₃`.
pub fn sample_backbone(state: &RodState, per_segment: usize) -> Result<BackboneSample> {
    if per_segment < 2 {
        return Err(Error::InvalidArgument(format!(
            "per_segment must be at least 2, got {per_segment}"
        )));
    }
    let nps = state.nodes_per_segment;
    let h = state.ds();
    let mut positions = Vec::with_capacity(3 * state.segments * per_segment);
    for seg in 0..state.segments {
        for k in 1..=per_segment {
            let exact = k * nps;
            let p = if exact % per_segment == 0 {
                state.nodes[seg * nps + exact / per_segment].p
            } else {
                let x = exact as f64 / per_segment as f64;
                let i = x.floor() as usize;
                let t = x - i as f64;
                let a = &state.nodes[seg * nps + i];
                let b = &state.nodes[seg * nps + i + 1];
                let (t2, t3) = (t * t, t * t * t);
                a.p * (2.0 * t3 - 3.0 * t2 + 1.0)
                    + a.r.column(2) * (h * (t3 - 2.0 * t2 + t))
                    + b.p * (-2.0 * t3 + 3.0 * t2)
                    + b.r.column(2) * (h * (t3 - t2))
            };
            positions.extend_from_slice(p.as_slice());
        }
    }
    Ok(BackboneSample {
        positions,
        frames: state.segment_frames(),
    })
}

#[derive(Serialize, Deserialize)]
struct NodeSnapshot {
    p: [f64; 3],
    #[serde(rename = "R")]
    r: [[f64; 3]; 3],
    v: [f64; 3],
    q: [f64; 3],
    omega: [f64; 3],
    force: [f64; 3],
    moment: [f64; 3],
}

/// JSON layout: SI units, rotation matrices row-major.
#[derive(Serialize, Deserialize)]
struct RodSnapshot {
    time: f64,
    segments: usize,
    nodes_per_segment: usize,
    length_per_segment: f64,
    nodes: Vec<NodeSnapshot>,
}

impl From<&RodState> for RodSnapshot {
    fn from(s: &RodState) -> Self {
        Self {
            time: s.time,
            segments: s.segments,
            nodes_per_segment: s.nodes_per_segment,
            length_per_segment: s.length_per_segment,
            nodes: s
                .nodes
                .iter()
                .map(|n| NodeSnapshot {
                    p: n.p.into(),
                    r: rows(&n.r),
                    v: n.v.into(),
                    q: n.q.into(),
                    omega: n.omega.into(),
                    force: n.force.into(),
                    moment: n.moment.into(),
                })
                .collect(),
        }
    }
}

impl TryFrom<RodSnapshot> for RodState {
    type Error = Error;

    fn try_from(s: RodSnapshot) -> Result<Self> {
        let expected = s.segments * s.nodes_per_segment + 1;
        if s.nodes.len() != expected {
            return Err(Error::DimensionMismatch {
                context: "rod snapshot nodes",
                expected,
                found: s.nodes.len(),
            });
        }
        Ok(Self {
            time: s.time,
            segments: s.segments,
            nodes_per_segment: s.nodes_per_segment,
            length_per_segment: s.length_per_segment,
            nodes: s
                .nodes
                .iter()
                .map(|n| NodeState {
                    p: n.p.into(),
                    r: from_rows(&n.r),
                    v: n.v.into(),
                    q: n.q.into(),
                    omega: n.omega.into(),
                    force: n.force.into(),
                    moment: n.moment.into(),
                })
                .collect(),
        })
    }
}
