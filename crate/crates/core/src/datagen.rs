//! Ramp-and-hold excitation, batch trajectory collection and the dataset file
//! format.
//!
//! # File format
//!
//! ```text
//! magic   b"SKDS"
//! u32 LE  format version
//! u64 LE  header length in bytes
//! ...     header, UTF-8 JSON (`DatasetHeader` plus per-trajectory metadata)
//! then, per trajectory in header order:
//! u64 LE  payload length in bytes
//! ...     f64 LE values: every sample as `positions ‖ frames`, where each
//!         frame is `origin(3) ‖ rotation(9, row-major)`, followed by every
//!         input vector
//! ```

use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use nalgebra::{Matrix3, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::frame::SegmentFrame;
use crate::rod::{sample_backbone, BackboneSample, RobotConfig, RodModel, Simulator, TendonTension};

pub const DATASET_MAGIC: &[u8; 4] = b"SKDS";
pub const DATASET_VERSION: u32 = 1;

/// Piecewise-linear ramp-and-hold input schedule starting from `u = 0`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RampHoldSchedule {
    /// Targets `u₁ … u_P`; `u₀ = 0` is implicit.
    pub waypoints: Vec<TendonTension>,
    /// Ramp duration `t_r` (s).
    pub ramp: f64,
    /// Hold duration `t_h` (s).
    pub hold: f64,
    pub seed: u64,
}

impl RampHoldSchedule {
    /// Draw `count` waypoints with components from `U(0, max_tension)`.
    pub fn sample(
        num_tendons: usize,
        count: usize,
        max_tension: f64,
        ramp: f64,
        hold: f64,
        seed: u64,
    ) -> Result<Self> {
        if !(max_tension > 0.0 && max_tension.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "max tension must be positive and finite, got {max_tension}"
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let waypoints = (0..count)
            .map(|_| {
                TendonTension::new(
                    (0..num_tendons)
                        .map(|_| rng.random_range(0.0..max_tension))
                        .collect(),
                )
            })
            .collect::<Result<Vec<_>>>()?;
        let schedule = Self {
            waypoints,
            ramp,
            hold,
            seed,
        };
        schedule.validate()?;
        Ok(schedule)
    }

    pub fn validate(&self) -> Result<()> {
        if self.waypoints.is_empty() {
            return Err(Error::InvalidArgument("schedule needs at least one waypoint".into()));
        }
        if !(self.ramp > 0.0 && self.hold >= 0.0) {
            return Err(Error::InvalidArgument(format!(
                "ramp must be positive and hold non-negative (got {}, {})",
                self.ramp, self.hold
            )));
        }
        let m = self.waypoints[0].len();
        if self.waypoints.iter().any(|w| w.len() != m) {
            return Err(Error::InvalidArgument("waypoints differ in length".into()));
        }
        Ok(())
    }

    pub fn num_tendons(&self) -> usize {
        self.waypoints[0].len()
    }

    pub fn period(&self) -> f64 {
        self.ramp + self.hold
    }

    pub fn duration(&self) -> f64 {
        self.period() * self.waypoints.len() as f64
    }

    fn waypoint(&self, i: usize) -> &[f64] {
        self.waypoints[i - 1].as_slice()
    }

    /// Input at time `t ∈ [0, duration)`. Ramps run linearly from `uᵢ` to
    /// `uᵢ₊₁` over `t_r`, then `uᵢ₊₁` is held for `t_h`.
    pub fn input_at(&self, t: f64) -> Result<TendonTension> {
        let end = self.duration();
        if !(0.0..end).contains(&t) {
            return Err(Error::TimeOutOfRange { t, end });
        }
        let phases = self.waypoints.len();
        let i = ((t / self.period()).floor() as usize).min(phases - 1);
        let local = t - i as f64 * self.period();
        let target = self.waypoint(i + 1);
        let values = if local < self.ramp {
            let theta = local / self.ramp;
            let zeros = vec![0.0; target.len()];
            let from = if i == 0 { &zeros[..] } else { self.waypoint(i) };
            from.iter()
                .zip(target)
                .map(|(a, b)| a * (1.0 - theta) + b * theta)
                .collect()
        } else {
            target.to_vec()
        };
        TendonTension::new(values)
    }
}

/// Knobs for [`collect_trajectory`] / [`collect_dataset`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CollectionOptions {
    pub per_segment: usize,
    pub waypoints: usize,
    pub max_tension: f64,
    /// Ramp duration in simulation steps.
    pub ramp_steps: usize,
    /// Hold duration in simulation steps.
    pub hold_steps: usize,
    /// Record every `stride`-th simulation step.
    pub stride: usize,
}

impl Default for CollectionOptions {
    fn default() -> Self {
        Self {
            per_segment: 10,
            waypoints: 5,
            max_tension: 8.0,
            ramp_steps: 40,
            hold_steps: 10,
            stride: 1,
        }
    }
}

impl CollectionOptions {
    pub fn steps_per_trajectory(&self) -> usize {
        self.waypoints * (self.ramp_steps + self.hold_steps)
    }

    pub fn schedule(&self, cfg: &RobotConfig, seed: u64) -> Result<RampHoldSchedule> {
        RampHoldSchedule::sample(
            cfg.num_tendons(),
            self.waypoints,
            self.max_tension,
            self.ramp_steps as f64 * cfg.dt,
            self.hold_steps as f64 * cfg.dt,
            seed,
        )
    }
}

/// Seed of trajectory `index` under `master` (SplitMix64 of a counter).
pub fn trajectory_seed(master: u64, index: usize) -> u64 {
    let mut z = master.wrapping_add((index as u64 + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// One simulated run: `samples[k]` is the backbone at `t = k Δt`, `inputs[k]`
/// the tensions held over `[t_k, t_k + Δt)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub index: usize,
    pub seed: u64,
    pub schedule: RampHoldSchedule,
    pub samples: Vec<BackboneSample>,
    pub inputs: Vec<Vec<f64>>,
}

impl Trajectory {
    pub fn len(&self) -> usize {
        self.inputs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.inputs.is_empty()
    }

    /// Snapshot `k`: `(x(t_k), x(t_k + Δt), u(t_k))`.
    pub fn snapshot(&self, k: usize) -> (&BackboneSample, &BackboneSample, &[f64]) {
        (&self.samples[k], &self.samples[k + 1], &self.inputs[k])
    }
}

/// Simulate one ramp-and-hold run from the unactuated equilibrium.
pub fn collect_trajectory(
    model: &RodModel,
    schedule: &RampHoldSchedule,
    options: &CollectionOptions,
    index: usize,
) -> Result<Trajectory> {
    let cfg = model.config();
    schedule.validate()?;
    if schedule.num_tendons() != cfg.num_tendons() {
        return Err(Error::DimensionMismatch {
            context: "schedule tendons",
            expected: cfg.num_tendons(),
            found: schedule.num_tendons(),
        });
    }
    let stride = options.stride.max(1);
    let steps = (schedule.duration() / cfg.dt).round() as usize;
    let wrap = |e: Error| Error::Trajectory {
        index,
        source: Box::new(e),
    };

    let mut sim = Simulator::at_equilibrium(model.clone(), &TendonTension::zeros(cfg.num_tendons()))
        .map_err(wrap)?;
    let mut samples = vec![sample_backbone(sim.state(), options.per_segment)?];
    let mut inputs = Vec::with_capacity(steps / stride);
    for k in 0..steps {
        let u = schedule.input_at(k as f64 * cfg.dt)?;
        if k % stride == 0 {
            inputs.push(u.as_slice().to_vec());
        }
        let state = sim.step(&u).map_err(wrap)?;
        if (k + 1) % stride == 0 {
            samples.push(sample_backbone(state, options.per_segment)?);
        }
    }
    samples.truncate(inputs.len() + 1);
    inputs.truncate(samples.len() - 1);
    Ok(Trajectory {
        index,
        seed: schedule.seed,
        schedule: schedule.clone(),
        samples,
        inputs,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetHeader {
    pub version: u32,
    pub config: RobotConfig,
    pub config_hash: String,
    pub per_segment: usize,
    pub stride: usize,
    /// Snapshot spacing `Δt` (s).
    pub dt: f64,
    pub master_seed: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrajectoryDataset {
    pub header: DatasetHeader,
    pub trajectories: Vec<Trajectory>,
}

/// Run `count` trajectories in parallel; output order follows trajectory index.
pub fn collect_dataset(
    cfg: &RobotConfig,
    count: usize,
    master_seed: u64,
    options: &CollectionOptions,
) -> Result<TrajectoryDataset> {
    let model = RodModel::new(cfg)?;
    let trajectories = (0..count)
        .into_par_iter()
        .map(|i| {
            let schedule = options.schedule(cfg, trajectory_seed(master_seed, i))?;
            collect_trajectory(&model, &schedule, options, i)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(TrajectoryDataset {
        header: DatasetHeader {
            version: DATASET_VERSION,
            config: cfg.clone(),
            config_hash: cfg.hash(),
            per_segment: options.per_segment,
            stride: options.stride.max(1),
            dt: cfg.dt * options.stride.max(1) as f64,
            master_seed,
        },
        trajectories,
    })
}

#[derive(Serialize, Deserialize)]
struct TrajectoryMeta {
    index: usize,
    seed: u64,
    schedule: RampHoldSchedule,
    samples: usize,
    inputs: usize,
}

#[derive(Serialize, Deserialize)]
struct FileHeader {
    #[serde(flatten)]
    header: DatasetHeader,
    trajectories: Vec<TrajectoryMeta>,
}

impl TrajectoryDataset {
    pub fn empty(cfg: &RobotConfig, per_segment: usize) -> Self {
        Self {
            header: DatasetHeader {
                version: DATASET_VERSION,
                config: cfg.clone(),
                config_hash: cfg.hash(),
                per_segment,
                stride: 1,
                dt: cfg.dt,
                master_seed: 0,
            },
            trajectories: Vec::new(),
        }
    }

    pub fn snapshot_count(&self) -> usize {
        self.trajectories.iter().map(Trajectory::len).sum()
    }

    /// State dimension `n = 3 × segments × per_segment`.
    pub fn state_dim(&self) -> usize {
        3 * self.header.config.segments * self.header.per_segment
    }

    pub fn input_dim(&self) -> usize {
        self.header.config.num_tendons()
    }

    /// Append another dataset recorded with the same robot and sampling.
    pub fn merge(&mut self, other: TrajectoryDataset) -> Result<()> {
        if other.header.config_hash != self.header.config_hash {
            return Err(Error::ConfigHashMismatch {
                expected: self.header.config_hash.clone(),
                found: other.header.config_hash,
            });
        }
        if other.header.per_segment != self.header.per_segment
            || other.header.stride != self.header.stride
        {
            return Err(Error::InvalidArgument(
                "datasets differ in sampling or stride".into(),
            ));
        }
        let offset = self.trajectories.len();
        self.trajectories
            .extend(other.trajectories.into_iter().enumerate().map(|(i, mut t)| {
                t.index = offset + i;
                t
            }));
        Ok(())
    }

    /// Split by trajectory: the first `round(fraction × len)` go left.
    pub fn split(&self, fraction: f64) -> (TrajectoryDataset, TrajectoryDataset) {
        let cut = ((self.trajectories.len() as f64) * fraction).round() as usize;
        let cut = cut.min(self.trajectories.len());
        let part = |ts: &[Trajectory]| TrajectoryDataset {
            header: self.header.clone(),
            trajectories: ts.to_vec(),
        };
        (
            part(&self.trajectories[..cut]),
            part(&self.trajectories[cut..]),
        )
    }

    /// Digest of the exact file contents.
    pub fn hash(&self) -> String {
        let mut buf = Vec::new();
        self.write_to(&mut buf).expect("in-memory write");
        hex::encode(&Sha256::digest(&buf)[..16])
    }

    pub fn write_to(&self, w: &mut impl Write) -> Result<()> {
        let header = FileHeader {
            header: self.header.clone(),
            trajectories: self
                .trajectories
                .iter()
                .map(|t| TrajectoryMeta {
                    index: t.index,
                    seed: t.seed,
                    schedule: t.schedule.clone(),
                    samples: t.samples.len(),
                    inputs: t.inputs.len(),
                })
                .collect(),
        };
        let json = serde_json::to_vec(&header)?;
        w.write_all(DATASET_MAGIC)?;
        w.write_all(&self.header.version.to_le_bytes())?;
        w.write_all(&(json.len() as u64).to_le_bytes())?;
        w.write_all(&json)?;
        for t in &self.trajectories {
            let mut payload: Vec<f64> = Vec::new();
            for s in &t.samples {
                payload.extend_from_slice(&s.positions);
                for f in &s.frames {
                    payload.extend_from_slice(f.origin.as_slice());
                    payload.extend_from_slice(f.rotation.transpose().as_slice());
                }
            }
            for u in &t.inputs {
                payload.extend_from_slice(u);
            }
            w.write_all(&((payload.len() * 8) as u64).to_le_bytes())?;
            for v in payload {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn read_from(r: &mut impl Read) -> Result<Self> {
        let mut magic = [0u8; 4];
        read_exact(r, &mut magic, "magic")?;
        if &magic != DATASET_MAGIC {
            return Err(Error::Corrupt("not a dataset file".into()));
        }
        let version = u32::from_le_bytes(read_array(r, "version")?);
        if version != DATASET_VERSION {
            return Err(Error::VersionMismatch {
                expected: DATASET_VERSION,
                found: version,
            });
        }
        let hlen = u64::from_le_bytes(read_array(r, "header length")?) as usize;
        let mut json = vec![0u8; hlen];
        read_exact(r, &mut json, "header")?;
        let file: FileHeader = serde_json::from_slice(&json)
            .map_err(|e| Error::Corrupt(format!("header: {e}")))?;
        let header = file.header;
        if header.config_hash != header.config.hash() {
            return Err(Error::ConfigHashMismatch {
                expected: header.config.hash(),
                found: header.config_hash,
            });
        }
        let segments = header.config.segments;
        let pos_len = 3 * segments * header.per_segment;
        let m = header.config.num_tendons();
        let sample_len = pos_len + 12 * segments;

        let mut trajectories = Vec::with_capacity(file.trajectories.len());
        for meta in file.trajectories {
            let bytes = u64::from_le_bytes(read_array(r, "payload length")?) as usize;
            let expected = 8 * (meta.samples * sample_len + meta.inputs * m);
            if bytes != expected {
                return Err(Error::Corrupt(format!(
                    "trajectory {}: payload {bytes} bytes, expected {expected}",
                    meta.index
                )));
            }
            let mut raw = vec![0u8; bytes];
            read_exact(r, &mut raw, "payload")?;
            let values: Vec<f64> = raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect();
            let (sample_vals, input_vals) = values.split_at(meta.samples * sample_len);
            let samples = sample_vals
                .chunks_exact(sample_len)
                .map(|c| {
                    let (pos, fr) = c.split_at(pos_len);
                    BackboneSample {
                        positions: pos.to_vec(),
                        frames: fr
                            .chunks_exact(12)
                            .map(|f| {
                                SegmentFrame::new(
                                    Vector3::from_column_slice(&f[..3]),
                                    Matrix3::from_row_slice(&f[3..]),
                                )
                            })
                            .collect(),
                    }
                })
                .collect();
            let inputs = input_vals.chunks_exact(m.max(1)).map(|c| c.to_vec()).collect();
            trajectories.push(Trajectory {
                index: meta.index,
                seed: meta.seed,
                schedule: meta.schedule,
                samples,
                inputs,
            });
        }
        let mut rest = [0u8; 1];
        if r.read(&mut rest)? != 0 {
            return Err(Error::Corrupt("trailing bytes".into()));
        }
        Ok(Self {
            header,
            trajectories,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut w = BufWriter::new(std::fs::File::create(path)?);
        self.write_to(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::read_from(&mut BufReader::new(std::fs::File::open(path)?))
    }

    /// One JSON object per snapshot, for inspection.
    pub fn write_jsonl(&self, w: &mut impl Write) -> Result<()> {
        #[derive(Serialize)]
        struct Line<'a> {
            trajectory: usize,
            k: usize,
            x: &'a [f64],
            x_next: &'a [f64],
            u: &'a [f64],
        }
        for t in &self.trajectories {
            for k in 0..t.len() {
                let (x, xn, u) = t.snapshot(k);
                serde_json::to_writer(
                    &mut *w,
                    &Line {
                        trajectory: t.index,
                        k,
                        x: &x.positions,
                        x_next: &xn.positions,
                        u,
                    },
                )?;
                w.write_all(b"\n")?;
            }
        }
        Ok(())
    }
}

fn read_exact(r: &mut impl Read, buf: &mut [u8], what: &str) -> Result<()> {
    r.read_exact(buf).map_err(|e| match e.kind() {
        std::io::ErrorKind::UnexpectedEof => Error::Corrupt(format!("truncated {what}")),
        _ => Error::Io(e),
    })
}

fn read_array<const N: usize>(r: &mut impl Read, what: &str) -> Result<[u8; N]> {
    let mut buf = [0u8; N];
    read_exact(r, &mut buf, what)?;
    Ok(buf)
}

/// Count lines of a JSON-lines export.
pub fn count_jsonl(path: impl AsRef<Path>) -> Result<usize> {
    Ok(BufReader::new(std::fs::File::open(path)?).lines().count())
}
