//! Condensed linear MPC over a lifted model, and the closed loop around the
//! rod simulator.
//!
//! Decision variables are the input moves `d = [Δu₀; …; Δu_{H−1}]`. Applied
//! tensions are `u_k = u_prev + Σ_{j≤k} Δu_j`; an absolute-input model is fed
//! `u_k`, a difference-input model `Δu_k`. With predicted outputs
//! `y = Ψ d + e₀` the cost `Σ (y_k − r)ᵀQ(y_k − r) + Δu_kᵀRΔu_k` becomes
//! `½ dᵀ P d + qᵀ d` with `P = 2(ΨᵀQ̄Ψ + R̄)` and `q = 2ΨᵀQ̄e₀`.

use std::io::Write;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::eval::shape_mse;
use crate::frame::SegmentFrame;
use crate::koopman::KoopmanModel;
use crate::lifting::{DelayBuffer, InputMode, LiftingSpec};
use crate::qp::{solve_qp, QpProblem, QpSettings, QpStatus, WarmStart};
use crate::rod::{sample_backbone, static_solve, RobotConfig, RodModel, Simulator, TendonTension};

/// Default move penalty per unit tension change squared.
pub const DEFAULT_MOVE_WEIGHT: f64 = 1e-10;

/// `scale · I_{3p̄}`.
pub fn identity_q(segments: usize, per_segment: usize, scale: f64) -> DMatrix<f64> {
    DMatrix::identity(3 * segments * per_segment, 3 * segments * per_segment) * scale
}

/// Diagonal weight `scale · (p̄ − j)` on the three coordinates of station `j`
/// (counted from the clamped base), `p̄ = segments × per_segment`.
pub fn make_weighted_q(segments: usize, per_segment: usize, scale: f64) -> DMatrix<f64> {
    let pbar = segments * per_segment;
    DMatrix::from_diagonal(&DVector::from_fn(3 * pbar, |i, _| scale * (pbar - i / 3) as f64))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QWeighting {
    Identity,
    Weighted,
}

impl std::str::FromStr for QWeighting {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "identity" => Ok(Self::Identity),
            "weighted" => Ok(Self::Weighted),
            _ => Err(Error::InvalidArgument(format!("unknown Q weighting {s:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MpcConfig {
    pub horizon: usize,
    pub q: DMatrix<f64>,
    pub r: DMatrix<f64>,
    pub u_min: Vec<f64>,
    pub u_max: Vec<f64>,
    pub du_max: Option<Vec<f64>>,
    pub qp: QpSettings,
}

impl MpcConfig {
    /// `H = 10`, `Q` by `weighting` with scale 20, `R = DEFAULT_MOVE_WEIGHT · I`,
    /// tensions in `[0, 8]`.
    pub fn new(spec: &LiftingSpec, inputs: usize, weighting: QWeighting) -> Self {
        let q = match weighting {
            QWeighting::Identity => identity_q(spec.segments, spec.per_segment, 20.0),
            QWeighting::Weighted => make_weighted_q(spec.segments, spec.per_segment, 20.0),
        };
        Self {
            horizon: 10,
            q,
            r: DMatrix::identity(inputs, inputs) * DEFAULT_MOVE_WEIGHT,
            u_min: vec![0.0; inputs],
            u_max: vec![8.0; inputs],
            du_max: None,
            qp: QpSettings::default(),
        }
    }

    pub fn inputs(&self) -> usize {
        self.r.nrows()
    }

    pub fn validate(&self, n: usize) -> Result<()> {
        let m = self.inputs();
        if self.horizon == 0 {
            return Err(Error::InvalidConfig("horizon must be at least 1".into()));
        }
        if self.q.shape() != (n, n) {
            return Err(Error::DimensionMismatch {
                context: "Q",
                expected: n,
                found: self.q.nrows(),
            });
        }
        for (context, len) in [("R cols", self.r.ncols()), ("u_min", self.u_min.len()), ("u_max", self.u_max.len())] {
            if len != m {
                return Err(Error::DimensionMismatch {
                    context,
                    expected: m,
                    found: len,
                });
            }
        }
        if let Some(d) = &self.du_max {
            if d.len() != m || d.iter().any(|v| !(*v >= 0.0)) {
                return Err(Error::InvalidConfig("rate bounds must be non-negative, one per input".into()));
            }
        }
        if self.u_min.iter().zip(&self.u_max).any(|(a, b)| !(a <= b)) {
            return Err(Error::InfeasibleBounds("u_min exceeds u_max".into()));
        }
        let sym = |m: &DMatrix<f64>| (m - m.transpose()).amax() <= 1e-12 * m.amax().max(1.0);
        if !sym(&self.q) || self.q.clone().symmetric_eigen().eigenvalues.min() < -1e-12 * self.q.amax() {
            return Err(Error::InvalidConfig("Q must be symmetric positive semidefinite".into()));
        }
        if !sym(&self.r) || self.r.clone().cholesky().is_none() {
            return Err(Error::InvalidConfig("R must be symmetric positive definite".into()));
        }
        Ok(())
    }
}

/// Target shape from a static solve, with its segment frames.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReferenceShape {
    pub tensions: Vec<f64>,
    pub positions: Vec<f64>,
    pub frames: Vec<SegmentFrame>,
    pub per_segment: usize,
    pub config_hash: String,
}

impl ReferenceShape {
    pub fn from_tensions(cfg: &RobotConfig, tensions: &TendonTension, per_segment: usize) -> Result<Self> {
        let model = RodModel::new(cfg)?;
        let state = static_solve(tensions, &model, None)?;
        let sample = sample_backbone(&state, per_segment)?;
        Ok(Self {
            tensions: tensions.as_slice().to_vec(),
            positions: sample.positions,
            frames: sample.frames,
            per_segment,
            config_hash: cfg.hash(),
        })
    }

    /// Tensions drawn from `U(u_min, u_max)` per tendon.
    pub fn random(cfg: &RobotConfig, seed: u64, per_segment: usize, u_min: f64, u_max: f64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let u = (0..cfg.num_tendons())
            .map(|_| rng.random_range(u_min..u_max))
            .collect();
        Self::from_tensions(cfg, &TendonTension::new(u)?, per_segment)
    }

    /// Reference state `r` in the model's coordinates.
    pub fn state(&self, spec: &LiftingSpec) -> Result<DVector<f64>> {
        if spec.per_segment != self.per_segment {
            return Err(Error::DimensionMismatch {
                context: "reference stations",
                expected: spec.per_segment,
                found: self.per_segment,
            });
        }
        spec.observe(&crate::rod::BackboneSample {
            positions: self.positions.clone(),
            frames: self.frames.clone(),
        })
    }

    /// Lifted reference: every delay slot holds `r`.
    pub fn lifted(&self, spec: &LiftingSpec) -> Result<DVector<f64>> {
        let r = self.state(spec)?;
        spec.embed(&[r])
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Ok(serde_json::from_str(&std::fs::read_to_string(path)?)?)
    }
}

/// Condensed prediction matrices for one model and configuration.
#[derive(Debug, Clone)]
pub struct MpcController {
    cfg: MpcConfig,
    lifting: LiftingSpec,
    /// `C A^{k+1}` stacked over `k`: `(nH) × (M−m)`.
    free: DMatrix<f64>,
    /// Response of the stacked outputs to a constant model input: `(nH) × m`.
    hold: DMatrix<f64>,
    /// `Ψ`: `(nH) × (mH)`.
    psi: DMatrix<f64>,
    /// `2 Ψᵀ Q̄`, normalized with `p`.
    cost_map: DMatrix<f64>,
    p: DMatrix<f64>,
    g: DMatrix<f64>,
    reference: DVector<f64>,
}

impl MpcController {
    pub fn new(model: &KoopmanModel, reference: &ReferenceShape, cfg: MpcConfig) -> Result<Self> {
        let spec = model.lifting;
        let n = spec.state_dim();
        let m = model.inputs();
        let h = cfg.horizon;
        cfg.validate(n)?;
        if cfg.inputs() != m {
            return Err(Error::DimensionMismatch {
                context: "MPC inputs",
                expected: m,
                found: cfg.inputs(),
            });
        }
        if reference.config_hash != model.meta.config_hash {
            return Err(Error::ConfigHashMismatch {
                expected: model.meta.config_hash.clone(),
                found: reference.config_hash.clone(),
            });
        }
        let r = reference.state(&spec)?;

        // C Aᵏ for k = 0..=H and the Markov blocks C Aᵏ B.
        let mut ca = Vec::with_capacity(h + 1);
        ca.push(model.selector());
        for k in 0..h {
            let next = &ca[k] * &model.a;
            ca.push(next);
        }
        let markov: Vec<DMatrix<f64>> = ca.iter().take(h).map(|c| c * &model.b).collect();

        let mut free = DMatrix::zeros(n * h, model.a.nrows());
        // Γ maps stacked model inputs v to stacked outputs.
        let mut gamma = DMatrix::zeros(n * h, m * h);
        for k in 0..h {
            free.view_mut((k * n, 0), (n, model.a.ncols())).copy_from(&ca[k + 1]);
            for j in 0..=k {
                gamma.view_mut((k * n, j * m), (n, m)).copy_from(&markov[k - j]);
            }
        }
        // Stacked model inputs v = T d + v₀.
        let cumsum = lower_block_ones(h, m);
        let (t, hold) = match spec.input_mode {
            InputMode::Absolute => {
                let mut hold = DMatrix::zeros(n * h, m);
                for j in 0..h {
                    hold += gamma.columns(j * m, m);
                }
                (cumsum.clone(), hold)
            }
            InputMode::Difference => (DMatrix::identity(m * h, m * h), DMatrix::zeros(n * h, m)),
        };
        let psi = &gamma * t;
        let qbar = block_diag(&cfg.q, h);
        let rbar = block_diag(&cfg.r, h);
        let mut cost_map = psi.transpose() * &qbar * 2.0;
        let mut p = &cost_map * &psi + rbar * 2.0;
        p = (&p + p.transpose()) * 0.5;
        // Shape errors are tiny in SI units; normalizing the cost keeps the
        // solver's absolute tolerances meaningful without moving the argmin.
        let norm = 1.0 / p.diagonal().amax();
        p *= norm;
        cost_map *= norm;

        let g = match &cfg.du_max {
            Some(_) => {
                let mut g = DMatrix::zeros(2 * m * h, m * h);
                g.view_mut((0, 0), (m * h, m * h)).copy_from(&cumsum);
                g.view_mut((m * h, 0), (m * h, m * h)).fill_diagonal(1.0);
                g
            }
            None => cumsum,
        };
        Ok(Self {
            cfg,
            lifting: spec,
            free,
            hold,
            psi,
            cost_map,
            p,
            g,
            reference: r,
        })
    }

    pub fn config(&self) -> &MpcConfig {
        &self.cfg
    }

    pub fn reference_state(&self) -> &DVector<f64> {
        &self.reference
    }

    /// Stacked predicted outputs for moves `d`.
    pub fn predict(&self, z0: &DVector<f64>, u_prev: &[f64], d: &DVector<f64>) -> DVector<f64> {
        self.free_response(z0, u_prev) + &self.psi * d
    }

    fn free_response(&self, z0: &DVector<f64>, u_prev: &[f64]) -> DVector<f64> {
        &self.free * z0 + &self.hold * DVector::from_column_slice(u_prev)
    }

    pub fn build_qp(&self, z0: &DVector<f64>, u_prev: &[f64]) -> Result<QpProblem> {
        let m = self.cfg.inputs();
        let h = self.cfg.horizon;
        if z0.len() != self.free.ncols() {
            return Err(Error::DimensionMismatch {
                context: "lifted state",
                expected: self.free.ncols(),
                found: z0.len(),
            });
        }
        if u_prev.len() != m {
            return Err(Error::DimensionMismatch {
                context: "previous input",
                expected: m,
                found: u_prev.len(),
            });
        }
        let n = self.lifting.state_dim();
        let mut e0 = self.free_response(z0, u_prev);
        for k in 0..h {
            let mut block = e0.rows_mut(k * n, n);
            block -= &self.reference;
        }
        let q = &self.cost_map * e0;
        let mut l = DVector::zeros(self.g.nrows());
        let mut u = DVector::zeros(self.g.nrows());
        for k in 0..h {
            for i in 0..m {
                l[k * m + i] = self.cfg.u_min[i] - u_prev[i];
                u[k * m + i] = self.cfg.u_max[i] - u_prev[i];
            }
        }
        if let Some(d) = &self.cfg.du_max {
            for k in 0..h {
                for i in 0..m {
                    l[m * h + k * m + i] = -d[i];
                    u[m * h + k * m + i] = d[i];
                }
            }
        }
        QpProblem::new(self.p.clone(), q, self.g.clone(), l, u)
    }
}

fn block_diag(b: &DMatrix<f64>, count: usize) -> DMatrix<f64> {
    let (r, c) = b.shape();
    let mut out = DMatrix::zeros(r * count, c * count);
    for k in 0..count {
        out.view_mut((k * r, k * c), (r, c)).copy_from(b);
    }
    out
}

/// Block lower-triangular matrix of `m × m` identities.
fn lower_block_ones(h: usize, m: usize) -> DMatrix<f64> {
    let mut s = DMatrix::zeros(m * h, m * h);
    for k in 0..h {
        for j in 0..=k {
            s.view_mut((k * m, j * m), (m, m)).fill_diagonal(1.0);
        }
    }
    s
}

/// One-shot [`MpcController::build_qp`].
pub fn build_qp(
    model: &KoopmanModel,
    z0: &DVector<f64>,
    u_prev: &[f64],
    reference: &ReferenceShape,
    cfg: &MpcConfig,
) -> Result<QpProblem> {
    MpcController::new(model, reference, cfg.clone())?.build_qp(z0, u_prev)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    /// Time after the step.
    pub t: f64,
    /// Tensions applied over the step.
    pub u: Vec<f64>,
    /// World-frame shape MSE after the step.
    pub mse: f64,
    pub qp_iters: usize,
    pub qp_status: String,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub event: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ControlLog {
    pub initial_mse: f64,
    pub records: Vec<StepRecord>,
    /// Set when the simulator failed and the run stopped early.
    pub aborted: Option<String>,
}

impl ControlLog {
    /// MSE at every logged time, starting with the initial state.
    pub fn mse_series(&self) -> Vec<f64> {
        std::iter::once(self.initial_mse)
            .chain(self.records.iter().map(|r| r.mse))
            .collect()
    }

    pub fn final_mse(&self) -> f64 {
        self.records.last().map_or(self.initial_mse, |r| r.mse)
    }

    pub fn write_jsonl(&self, w: &mut impl Write) -> Result<()> {
        for r in &self.records {
            serde_json::to_writer(&mut *w, r)?;
            w.write_all(b"\n")?;
        }
        Ok(())
    }
}

/// Run `steps` MPC steps on `sim`, starting from tensions `u_init`.
pub fn control_loop(
    sim: &mut Simulator,
    model: &KoopmanModel,
    reference: &ReferenceShape,
    cfg: &MpcConfig,
    steps: usize,
    u_init: &[f64],
) -> Result<ControlLog> {
    let spec = model.lifting;
    if sim.model().config().hash() != model.meta.config_hash {
        return Err(Error::ConfigHashMismatch {
            expected: model.meta.config_hash.clone(),
            found: sim.model().config().hash(),
        });
    }
    let ctrl = MpcController::new(model, reference, cfg.clone())?;
    let m = model.inputs();
    let h = cfg.horizon;
    let mut buffer = DelayBuffer::new(spec.delay_depth);
    let mut u_prev = u_init.to_vec();
    let mut warm: Option<WarmStart> = None;

    let sample = sample_backbone(sim.state(), spec.per_segment)?;
    let initial_mse = shape_mse(&sample.positions, &reference.positions)?;
    buffer.push(spec.observe(&sample)?);
    let mut log = ControlLog {
        initial_mse,
        records: Vec::with_capacity(steps),
        aborted: None,
    };

    for _ in 0..steps {
        let z0 = buffer.lifted()?;
        let qp = ctrl.build_qp(&z0, &u_prev)?;
        let (u, iters, status, event) = match solve_qp(&qp, &cfg.qp, warm.as_ref()) {
            Ok(sol) if sol.status == QpStatus::Solved => {
                let u: Vec<f64> = (0..m)
                    .map(|i| (u_prev[i] + sol.x[i]).clamp(cfg.u_min[i], cfg.u_max[i]))
                    .collect();
                warm = Some(shift_warm_start(&sol.x, &sol.y, m, h));
                (u, sol.iterations, sol.status.to_string(), None)
            }
            Ok(sol) => {
                warm = None;
                (
                    u_prev.clone(),
                    sol.iterations,
                    sol.status.to_string(),
                    Some("qp not solved; holding input".to_string()),
                )
            }
            Err(e) => (u_prev.clone(), 0, "error".to_string(), Some(format!("qp error: {e}"))),
        };
        let tensions = TendonTension::new(u.clone())?;
        let state = match sim.step(&tensions) {
            Ok(s) => s,
            Err(e) => {
                log.aborted = Some(e.to_string());
                break;
            }
        };
        let sample = sample_backbone(state, spec.per_segment)?;
        let mse = shape_mse(&sample.positions, &reference.positions)?;
        buffer.push(spec.observe(&sample)?);
        log.records.push(StepRecord {
            t: state.time,
            u: u.clone(),
            mse,
            qp_iters: iters,
            qp_status: status,
            event,
        });
        u_prev = u;
    }
    Ok(log)
}

/// Shift the move sequence one step ahead and pad with a zero move.
fn shift_warm_start(x: &DVector<f64>, y: &DVector<f64>, m: usize, h: usize) -> WarmStart {
    let shift = |v: &DVector<f64>| {
        let mut out = v.clone();
        let blocks = v.len() / (m * h);
        for b in 0..blocks {
            let base = b * m * h;
            for k in 0..h - 1 {
                for i in 0..m {
                    out[base + k * m + i] = v[base + (k + 1) * m + i];
                }
            }
            for i in 0..m {
                out[base + (h - 1) * m + i] = 0.0;
            }
        }
        out
    };
    WarmStart { x: shift(x), y: shift(y) }
}
