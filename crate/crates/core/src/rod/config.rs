//! Robot configuration and derived section properties.
//!
//! Config files are TOML with one `key = value` per line. Angles are given in
//! degrees in the file and stored in radians:
//!
//! ```toml
//! segments = 2
//! length_per_segment = 1.0
//! youngs_modulus = 200e9
//! poisson_ratio = 0.3
//! density = 8000.0
//! backbone_radius = 0.01
//! tendons_per_segment = 3
//! tendon_offset = 0.04
//! tendon_angles_deg = [0.0, 120.0, 240.0]
//! nodes_per_segment = 100
//! dt = 0.01
//! bdf_alpha = 0.0
//! gravity = [0.0, 0.0, 0.0]
//! ```
//!
//! Every key is optional; missing keys take the defaults above.

use std::f64::consts::PI;
use std::path::Path;

use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub const MAX_SEGMENTS: usize = 5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RobotConfig {
    pub segments: usize,
    /// m
    pub length_per_segment: f64,
    /// Pa
    pub youngs_modulus: f64,
    pub poisson_ratio: f64,
    /// kg/m³
    pub density: f64,
    /// m
    pub backbone_radius: f64,
    pub tendons_per_segment: usize,
    /// m
    pub tendon_offset: f64,
    /// rad, one entry per tendon of a segment
    pub tendon_angles: Vec<f64>,
    pub nodes_per_segment: usize,
    /// s
    pub dt: f64,
    pub bdf_alpha: f64,
    /// m/s², zero by default
    pub gravity: [f64; 3],
}

impl Default for RobotConfig {
    fn default() -> Self {
        Self {
            segments: 1,
            length_per_segment: 1.0,
            youngs_modulus: 200e9,
            poisson_ratio: 0.3,
            density: 8000.0,
            backbone_radius: 0.01,
            tendons_per_segment: 3,
            tendon_offset: 0.04,
            tendon_angles: vec![0.0, 2.0 * PI / 3.0, 4.0 * PI / 3.0],
            nodes_per_segment: 100,
            dt: 0.01,
            bdf_alpha: 0.0,
            gravity: [0.0; 3],
        }
    }
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct ConfigFile {
    segments: Option<usize>,
    length_per_segment: Option<f64>,
    youngs_modulus: Option<f64>,
    poisson_ratio: Option<f64>,
    density: Option<f64>,
    backbone_radius: Option<f64>,
    tendons_per_segment: Option<usize>,
    tendon_offset: Option<f64>,
    tendon_angles_deg: Option<Vec<f64>>,
    nodes_per_segment: Option<usize>,
    dt: Option<f64>,
    bdf_alpha: Option<f64>,
    gravity: Option<[f64; 3]>,
}

impl RobotConfig {
    pub fn with_segments(segments: usize) -> Self {
        Self {
            segments,
            ..Self::default()
        }
    }

    pub fn from_toml_str(text: &str) -> Result<Self> {
        let file: ConfigFile = toml::from_str(text)?;
        let d = Self::default();
        let cfg = Self {
            segments: file.segments.unwrap_or(d.segments),
            length_per_segment: file.length_per_segment.unwrap_or(d.length_per_segment),
            youngs_modulus: file.youngs_modulus.unwrap_or(d.youngs_modulus),
            poisson_ratio: file.poisson_ratio.unwrap_or(d.poisson_ratio),
            density: file.density.unwrap_or(d.density),
            backbone_radius: file.backbone_radius.unwrap_or(d.backbone_radius),
            tendons_per_segment: file.tendons_per_segment.unwrap_or(d.tendons_per_segment),
            tendon_offset: file.tendon_offset.unwrap_or(d.tendon_offset),
            tendon_angles: file
                .tendon_angles_deg
                .map(|a| a.iter().map(|deg| deg.to_radians()).collect())
                .unwrap_or(d.tendon_angles),
            nodes_per_segment: file.nodes_per_segment.unwrap_or(d.nodes_per_segment),
            dt: file.dt.unwrap_or(d.dt),
            bdf_alpha: file.bdf_alpha.unwrap_or(d.bdf_alpha),
            gravity: file.gravity.unwrap_or(d.gravity),
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_toml_str(&std::fs::read_to_string(path)?)
    }

    pub fn to_toml_string(&self) -> String {
        let angles: Vec<String> = self
            .tendon_angles
            .iter()
            .map(|a| format!("{:?}", a.to_degrees()))
            .collect();
        format!(
            "segments = {}\nlength_per_segment = {:?}\nyoungs_modulus = {:?}\npoisson_ratio = {:?}\n\
             density = {:?}\nbackbone_radius = {:?}\ntendons_per_segment = {}\ntendon_offset = {:?}\n\
             tendon_angles_deg = [{}]\nnodes_per_segment = {}\ndt = {:?}\nbdf_alpha = {:?}\n\
             gravity = [{:?}, {:?}, {:?}]\n",
            self.segments,
            self.length_per_segment,
            self.youngs_modulus,
            self.poisson_ratio,
            self.density,
            self.backbone_radius,
            self.tendons_per_segment,
            self.tendon_offset,
            angles.join(", "),
            self.nodes_per_segment,
            self.dt,
            self.bdf_alpha,
            self.gravity[0],
            self.gravity[1],
            self.gravity[2],
        )
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidConfig(msg));
        if !(1..=MAX_SEGMENTS).contains(&self.segments) {
            return bad(format!("segments must be in 1..={MAX_SEGMENTS}, got {}", self.segments));
        }
        let positive = [
            ("length_per_segment", self.length_per_segment),
            ("youngs_modulus", self.youngs_modulus),
            ("density", self.density),
            ("backbone_radius", self.backbone_radius),
            ("tendon_offset", self.tendon_offset),
            ("dt", self.dt),
        ];
        for (name, value) in positive {
            if !(value.is_finite() && value > 0.0) {
                return bad(format!("{name} must be positive, got {value}"));
            }
        }
        if !(self.poisson_ratio > -1.0 && self.poisson_ratio < 0.5) {
            return bad(format!("poisson_ratio must be in (-1, 0.5), got {}", self.poisson_ratio));
        }
        if self.tendons_per_segment == 0 {
            return bad("tendons_per_segment must be positive".into());
        }
        if self.tendon_angles.len() != self.tendons_per_segment {
            return bad(format!(
                "expected {} tendon angles, got {}",
                self.tendons_per_segment,
                self.tendon_angles.len()
            ));
        }
        if let Some(a) = self
            .tendon_angles
            .iter()
            .find(|a| !(0.0..2.0 * PI).contains(*a))
        {
            return bad(format!("tendon angle {a} outside [0, 2π)"));
        }
        if self.nodes_per_segment == 0 {
            return bad("nodes_per_segment must be positive".into());
        }
        if !(0.0..=1.0).contains(&self.bdf_alpha) {
            return bad(format!("bdf_alpha must be in [0, 1], got {}", self.bdf_alpha));
        }
        if self.gravity.iter().any(|g| !g.is_finite()) {
            return bad("gravity must be finite".into());
        }
        Ok(())
    }

    pub fn total_length(&self) -> f64 {
        self.length_per_segment * self.segments as f64
    }

    pub fn node_count(&self) -> usize {
        self.segments * self.nodes_per_segment + 1
    }

    pub fn num_tendons(&self) -> usize {
        self.segments * self.tendons_per_segment
    }

    /// Arclength spacing of the node grid.
    pub fn ds(&self) -> f64 {
        self.length_per_segment / self.nodes_per_segment as f64
    }

    pub fn shear_modulus(&self) -> f64 {
        self.youngs_modulus / (2.0 * (1.0 + self.poisson_ratio))
    }

    pub fn area(&self) -> f64 {
        PI * self.backbone_radius.powi(2)
    }

    /// Second moment of area about a bending axis.
    pub fn second_moment(&self) -> f64 {
        PI * self.backbone_radius.powi(4) / 4.0
    }

    /// Bending/torsion stiffness `diag(EI, EI, GJp)`.
    pub fn stiffness(&self) -> Matrix3<f64> {
        let i = self.second_moment();
        Matrix3::from_diagonal(&Vector3::new(
            self.youngs_modulus * i,
            self.youngs_modulus * i,
            self.shear_modulus() * 2.0 * i,
        ))
    }

    /// Rotational inertia density `ρJ`.
    pub fn rotational_inertia(&self) -> Matrix3<f64> {
        let i = self.second_moment();
        Matrix3::from_diagonal(&Vector3::new(i, i, 2.0 * i)) * self.density
    }

    pub fn mass_per_length(&self) -> f64 {
        self.density * self.area()
    }

    /// Tendon routing offsets in the local cross-section frame.
    pub fn tendon_offsets(&self) -> Vec<Vector3<f64>> {
        self.tendon_angles
            .iter()
            .map(|a| Vector3::new(a.cos(), a.sin(), 0.0) * self.tendon_offset)
            .collect()
    }

    /// Stable digest of every field, hex encoded.
    pub fn hash(&self) -> String {
        let mut h = Sha256::new();
        h.update(b"robot-config/v1");
        h.update((self.segments as u64).to_le_bytes());
        for v in [
            self.length_per_segment,
            self.youngs_modulus,
            self.poisson_ratio,
            self.density,
            self.backbone_radius,
            self.tendon_offset,
            self.dt,
            self.bdf_alpha,
        ] {
            h.update(v.to_le_bytes());
        }
        h.update((self.tendons_per_segment as u64).to_le_bytes());
        for a in &self.tendon_angles {
            h.update(a.to_le_bytes());
        }
        h.update((self.nodes_per_segment as u64).to_le_bytes());
        for g in self.gravity {
            h.update(g.to_le_bytes());
        }
        hex::encode(&h.finalize()[..16])
    }
}
