//! Loads exerted on the backbone by tendons routed at fixed offsets.
//!
//! The simulator never needs these explicitly (it integrates the combined
//! backbone+tendon wrench), but they are the physical loads and are useful
//! for diagnostics and for checking equilibria.

use nalgebra::Vector3;

use super::config::RobotConfig;
use super::state::{RodState, TendonTension};
use crate::error::{Error, Result};

const E3: Vector3<f64> = Vector3::new(0.0, 0.0, 1.0);

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PointWrench {
    pub segment: usize,
    pub node: usize,
    pub force: Vector3<f64>,
    pub moment: Vector3<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TendonLoads {
    /// Distributed force per unit length at each node (world frame). Segment
    /// boundary nodes report the distal segment's load.
    pub force: Vec<Vector3<f64>>,
    /// Distributed moment per unit length at each node (world frame).
    pub moment: Vec<Vector3<f64>>,
    /// Termination wrench at each segment's distal disk.
    pub tip_wrenches: Vec<PointWrench>,
}

/// Strains of segment `seg` at its local nodes `0..=nps`. The base node of a
/// distal segment is extrapolated from inside the segment because the stored
/// strain there belongs to the proximal side of the discontinuity.
fn segment_strains(state: &RodState, seg: usize) -> Vec<Vector3<f64>> {
    let nps = state.nodes_per_segment;
    let mut v: Vec<Vector3<f64>> = (0..=nps)
        .map(|k| state.nodes[seg * nps + k].v)
        .collect();
    if seg > 0 {
        v[0] = if nps >= 3 {
            v[1] * 3.0 - v[2] * 3.0 + v[3]
        } else if nps == 2 {
            v[1] * 2.0 - v[2]
        } else {
            v[1]
        };
    }
    v
}

fn derivative(v: &[Vector3<f64>], k: usize, h: f64) -> Vector3<f64> {
    let n = v.len() - 1;
    match (k, n) {
        (_, 0) => Vector3::zeros(),
        (_, 1) => (v[1] - v[0]) / h,
        (0, _) => (v[0] * -3.0 + v[1] * 4.0 - v[2]) / (2.0 * h),
        (k, n) if k == n => (v[n] * 3.0 - v[n - 1] * 4.0 + v[n - 2]) / (2.0 * h),
        (k, _) => (v[k + 1] - v[k - 1]) / (2.0 * h),
    }
}

pub fn tendon_loads(
    state: &RodState,
    tensions: &TendonTension,
    cfg: &RobotConfig,
) -> Result<TendonLoads> {
    let tau = tensions.for_config(cfg)?.as_slice();
    if state.segments != cfg.segments || state.nodes_per_segment != cfg.nodes_per_segment {
        return Err(Error::DimensionMismatch {
            context: "rod state nodes",
            expected: cfg.node_count(),
            found: state.nodes.len(),
        });
    }
    let nps = cfg.nodes_per_segment;
    let tps = cfg.tendons_per_segment;
    let h = state.ds();
    let offsets = cfg.tendon_offsets();
    let n_nodes = state.nodes.len();
    let mut force = vec![Vector3::zeros(); n_nodes];
    let mut moment = vec![Vector3::zeros(); n_nodes];
    let mut tip_wrenches = Vec::with_capacity(cfg.segments);

    for seg in 0..cfg.segments {
        let seg_tau = &tau[seg * tps..(seg + 1) * tps];
        let strains = segment_strains(state, seg);
        for k in 0..=nps {
            let node = seg * nps + k;
            let u = strains[k];
            let u_s = derivative(&strains, k, h);
            let nd = &state.nodes[node];
            let (mut f, mut l) = (Vector3::zeros(), Vector3::zeros());
            for (&t, r) in seg_tau.iter().zip(&offsets) {
                if t == 0.0 {
                    continue;
                }
                let b = E3 + u.cross(r);
                let len = b.norm();
                if len < 1e-12 {
                    return Err(Error::DegenerateTangent { node });
                }
                let tb = b / len;
                let db = u_s.cross(r);
                let dtb = (db - tb * tb.dot(&db)) / len;
                let fi = nd.r * (u.cross(&tb) + dtb) * t;
                f += fi;
                l += (nd.r * r).cross(&fi);
            }
            // The last segment's tip node only carries its own loads; boundary
            // nodes report the distal segment, so skip k == nps unless last.
            if k < nps || seg + 1 == cfg.segments {
                force[node] = f;
                moment[node] = l;
            }
        }

        let node = (seg + 1) * nps;
        let nd = &state.nodes[node];
        let u = strains[nps];
        let (mut tf, mut tm) = (Vector3::zeros(), Vector3::zeros());
        for (&t, r) in seg_tau.iter().zip(&offsets) {
            let b = E3 + u.cross(r);
            let len = b.norm();
            if len < 1e-12 {
                return Err(Error::DegenerateTangent { node });
            }
            let fi = -(nd.r * b / len) * t;
            tf += fi;
            tm += (nd.r * r).cross(&fi);
        }
        tip_wrenches.push(PointWrench {
            segment: seg,
            node,
            force: tf,
            moment: tm,
        });
    }
    Ok(TendonLoads {
        force,
        moment,
        tip_wrenches,
    })
}
