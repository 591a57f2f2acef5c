//! Extended DMD with a control-affine split, optional L1 regularization, and
//! the model file format.
//!
//! # Model file
//!
//! ```text
//! magic   b"SKKM"
//! u32 LE  format version
//! u64 LE  header length, then the JSON header (`ModelHeader`)
//! ...     A then B as f64 LE, column-major
//! ```

use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use log::warn;
use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::datagen::{Trajectory, TrajectoryDataset};
use crate::error::{Error, Result};
use crate::lifting::LiftingSpec;
use crate::rod::RobotConfig;

pub const MODEL_MAGIC: &[u8; 4] = b"SKKM";
pub const MODEL_VERSION: u32 = 1;

/// Relative singular-value cutoff for the least-squares pseudoinverse.
pub const DEFAULT_RCOND: f64 = 1e-10;

/// How the first `delay_depth − 1` snapshots of each trajectory are handled.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DelayStart {
    /// Replicate `x₀` into missing delay slots.
    Bootstrap,
    /// Drop snapshots without a full delay history.
    Strict,
}

/// Regressors `Θ` (lifted state stacked over the encoded input, one column
/// per snapshot) and targets `Θ′` restricted to the lifted-state rows.
#[derive(Debug, Clone)]
pub struct DataMatrices {
    pub theta: DMatrix<f64>,
    pub theta_next: DMatrix<f64>,
}

impl DataMatrices {
    pub fn columns(&self) -> usize {
        self.theta.ncols()
    }
}

/// Lifted states `z₀ … z_T` of one trajectory.
pub fn lift_trajectory(
    traj: &Trajectory,
    spec: &LiftingSpec,
) -> Result<Vec<DVector<f64>>> {
    let xs = traj
        .samples
        .iter()
        .map(|s| spec.observe(s))
        .collect::<Result<Vec<_>>>()?;
    (0..xs.len())
        .map(|k| spec.embed(&xs[k.saturating_sub(spec.delay_depth - 1)..=k]))
        .collect()
}

/// Encoded model inputs of one trajectory; `u₋₁ = 0` (runs start at rest).
pub fn encode_trajectory_inputs(traj: &Trajectory, spec: &LiftingSpec) -> Vec<Vec<f64>> {
    let m = traj.inputs.first().map_or(0, Vec::len);
    let zero = vec![0.0; m];
    (0..traj.inputs.len())
        .map(|k| {
            let prev = if k == 0 { &zero } else { &traj.inputs[k - 1] };
            spec.encode(&traj.inputs[k], prev)
        })
        .collect()
}

pub fn build_data_matrices(
    ds: &TrajectoryDataset,
    spec: &LiftingSpec,
    start: DelayStart,
) -> Result<DataMatrices> {
    spec.validate()?;
    if ds.header.per_segment != spec.per_segment || ds.header.config.segments != spec.segments {
        return Err(Error::DimensionMismatch {
            context: "dataset stations vs lifting",
            expected: spec.state_dim(),
            found: ds.state_dim(),
        });
    }
    let first = match start {
        DelayStart::Bootstrap => 0,
        DelayStart::Strict => spec.delay_depth - 1,
    };
    let lifted = spec.lifted_dim();
    let m = ds.input_dim();
    let blocks = ds
        .trajectories
        .par_iter()
        .map(|t| {
            let z = lift_trajectory(t, spec)?;
            let inputs = encode_trajectory_inputs(t, spec);
            let cols: Vec<usize> = (first..t.len()).collect();
            let mut theta = DMatrix::zeros(lifted + m, cols.len());
            let mut next = DMatrix::zeros(lifted, cols.len());
            for (c, &k) in cols.iter().enumerate() {
                theta.view_mut((0, c), (lifted, 1)).copy_from(&z[k]);
                for (i, v) in inputs[k].iter().enumerate() {
                    theta[(lifted + i, c)] = *v;
                }
                next.column_mut(c).copy_from(&z[k + 1]);
            }
            Ok((theta, next))
        })
        .collect::<Result<Vec<_>>>()?;
    let total: usize = blocks.iter().map(|(t, _)| t.ncols()).sum();
    let mut theta = DMatrix::zeros(lifted + m, total);
    let mut theta_next = DMatrix::zeros(lifted, total);
    let mut at = 0;
    for (t, n) in blocks {
        let w = t.ncols();
        theta.columns_mut(at, w).copy_from(&t);
        theta_next.columns_mut(at, w).copy_from(&n);
        at += w;
    }
    Ok(DataMatrices { theta, theta_next })
}

/// Row norms of `Θ`, with zero rows mapped to 1.
fn row_scales(theta: &DMatrix<f64>) -> DVector<f64> {
    DVector::from_iterator(
        theta.nrows(),
        theta.row_iter().enumerate().map(|(i, r)| {
            let n = r.norm();
            if n > 0.0 {
                n
            } else {
                warn!("regressor row {i} is identically zero");
                1.0
            }
        }),
    )
}

fn check_pair(theta: &DMatrix<f64>, target: &DMatrix<f64>) -> Result<()> {
    if theta.ncols() != target.ncols() {
        return Err(Error::DimensionMismatch {
            context: "snapshot columns",
            expected: theta.ncols(),
            found: target.ncols(),
        });
    }
    if theta.ncols() < theta.nrows() {
        warn!(
            "fewer snapshots ({}) than regressors ({})",
            theta.ncols(),
            theta.nrows()
        );
    }
    Ok(())
}

/// `K = Θ′ Θ†`, the minimum-norm minimizer of `‖K Θ − Θ′‖_F`, via QR of `Θᵀ`
/// followed by an SVD of the triangular factor. Singular values below
/// `rcond · σ_max` are discarded.
pub fn edmd_least_squares(
    theta: &DMatrix<f64>,
    target: &DMatrix<f64>,
    rcond: f64,
) -> Result<DMatrix<f64>> {
    check_pair(theta, target)?;
    let rows = theta.nrows();
    let at = theta.transpose();
    let mut bt = target.transpose();
    let (r, qtb) = if at.nrows() > rows {
        let qr = at.qr();
        qr.q_tr_mul(&mut bt);
        (qr.r(), bt.rows(0, rows).into_owned())
    } else {
        (at, bt)
    };
    let svd = r.svd(true, true);
    let (u, vt) = (svd.u.as_ref().expect("u"), svd.v_t.as_ref().expect("v_t"));
    let smax = svd.singular_values.max();
    let cut = rcond * smax;
    let utb = u.transpose() * qtb;
    let mut scaled = DMatrix::zeros(utb.nrows(), utb.ncols());
    for (i, s) in svd.singular_values.iter().enumerate() {
        if *s > cut && *s > 0.0 {
            scaled.row_mut(i).copy_from(&(utb.row(i) / *s));
        }
    }
    Ok((vt.transpose() * scaled).transpose())
}

/// [`edmd_least_squares`] on `Θ` with each row divided by its Euclidean norm,
/// coefficients rescaled afterwards. Same minimizer set; better conditioned
/// when regressors differ in scale by orders of magnitude, but in the
/// rank-deficient case the minimum norm is taken in the scaled coordinates.
pub fn edmd_least_squares_equilibrated(
    theta: &DMatrix<f64>,
    target: &DMatrix<f64>,
    rcond: f64,
) -> Result<DMatrix<f64>> {
    let scales = row_scales(theta);
    let mut ts = theta.clone();
    for (i, s) in scales.iter().enumerate() {
        ts.row_mut(i).unscale_mut(*s);
    }
    let mut k = edmd_least_squares(&ts, target, rcond)?;
    for (j, s) in scales.iter().enumerate() {
        k.column_mut(j).unscale_mut(*s);
    }
    Ok(k)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LassoSettings {
    pub tolerance: f64,
    pub max_iterations: usize,
}

impl Default for LassoSettings {
    fn default() -> Self {
        Self {
            tolerance: 1e-8,
            max_iterations: 5000,
        }
    }
}

fn soft_threshold(x: f64, t: f64) -> f64 {
    x.signum() * (x.abs() - t).max(0.0)
}

/// Row-wise `min ‖kΘ − θ′‖² + α‖k‖₁` by FISTA with adaptive restart.
///
/// Each row of `Θ` is divided by its Euclidean norm before regression and the
/// coefficients are divided by the same norms afterwards, so `α` penalizes the
/// coefficients of the normalized regressors. The step is `1 / L` with the
/// exact Lipschitz constant `L = 2 λ_max(Θ̃Θ̃ᵀ)`. Iteration stops when the
/// optimality residual (distance of the gradient to `−α ∂‖k‖₁`) falls below
/// `tolerance · max(1, ‖Θ̃ Θ′ᵀ‖_max)`.
pub fn edmd_lasso(
    theta: &DMatrix<f64>,
    target: &DMatrix<f64>,
    alpha: f64,
    settings: &LassoSettings,
) -> Result<DMatrix<f64>> {
    check_pair(theta, target)?;
    if !(alpha >= 0.0) {
        return Err(Error::InvalidArgument(format!("alpha must be non-negative, got {alpha}")));
    }
    let scales = row_scales(theta);
    let mut ts = theta.clone();
    for (i, s) in scales.iter().enumerate() {
        ts.row_mut(i).unscale_mut(*s);
    }
    let gram = &ts * ts.transpose();
    let cross = target * ts.transpose();
    let lipschitz = 2.0 * gram.clone().symmetric_eigen().eigenvalues.max();
    if !(lipschitz > 0.0) {
        return Ok(DMatrix::zeros(target.nrows(), theta.nrows()));
    }
    let step = 1.0 / lipschitz;
    let scale = cross.amax().max(1.0);

    let grad = |k: &DMatrix<f64>| (k * &gram - &cross) * 2.0;
    let kkt = |k: &DMatrix<f64>| {
        let g = grad(k);
        k.iter()
            .zip(g.iter())
            .map(|(&x, &gi)| {
                if x != 0.0 {
                    (gi + alpha * x.signum()).abs()
                } else {
                    (gi.abs() - alpha).max(0.0)
                }
            })
            .fold(0.0, f64::max)
    };

    let mut k = DMatrix::zeros(target.nrows(), theta.nrows());
    let mut y = k.clone();
    let mut t: f64 = 1.0;
    let mut residual = f64::INFINITY;
    for it in 0..settings.max_iterations {
        let g = grad(&y);
        let mut next = &y - g * step;
        next.apply(|v| *v = soft_threshold(*v, alpha * step));
        // Restart momentum when it points uphill.
        let uphill = (&y - &next).dot(&(&next - &k)) > 0.0;
        let t_next = if uphill { 1.0 } else { 0.5 * (1.0 + (1.0 + 4.0 * t * t).sqrt()) };
        y = if uphill {
            next.clone()
        } else {
            &next + (&next - &k) * ((t - 1.0) / t_next)
        };
        t = t_next;
        k = next;
        if it % 10 == 9 || it + 1 == settings.max_iterations {
            residual = kkt(&k);
            if residual <= settings.tolerance * scale {
                for (j, s) in scales.iter().enumerate() {
                    k.column_mut(j).unscale_mut(*s);
                }
                return Ok(k);
            }
        }
    }
    Err(Error::LassoNonConvergence {
        iterations: settings.max_iterations,
        gap: residual,
    })
}

/// Split the `(M−m) × M` operator into `A` (lifted-state columns) and `B`
/// (input columns). A square `M × M` operator has its last `m` rows dropped.
pub fn extract_affine(k: &DMatrix<f64>, m: usize) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
    let cols = k.ncols();
    if m > cols || !(k.nrows() == cols || k.nrows() == cols - m) {
        return Err(Error::DimensionMismatch {
            context: "operator rows",
            expected: cols.saturating_sub(m),
            found: k.nrows(),
        });
    }
    let lifted = cols - m;
    Ok((
        k.view((0, 0), (lifted, lifted)).into_owned(),
        k.view((0, lifted), (lifted, m)).into_owned(),
    ))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelMeta {
    pub alpha: f64,
    pub rcond: f64,
    pub snapshots: usize,
    pub dataset_hash: String,
    pub config_hash: String,
    pub config: RobotConfig,
}

/// Control-affine lifted model `z′ = A z + B v`, `x̂ = C z`.
#[derive(Debug, Clone, PartialEq)]
pub struct KoopmanModel {
    pub a: DMatrix<f64>,
    pub b: DMatrix<f64>,
    pub lifting: LiftingSpec,
    pub meta: ModelMeta,
}

#[derive(Serialize, Deserialize)]
struct ModelHeader {
    lifted_dim: usize,
    inputs: usize,
    lifting: LiftingSpec,
    meta: ModelMeta,
}

impl KoopmanModel {
    pub fn new(
        a: DMatrix<f64>,
        b: DMatrix<f64>,
        lifting: LiftingSpec,
        meta: ModelMeta,
    ) -> Result<Self> {
        lifting.validate()?;
        let n = lifting.lifted_dim();
        if a.shape() != (n, n) {
            return Err(Error::DimensionMismatch {
                context: "A rows",
                expected: n,
                found: a.nrows(),
            });
        }
        if b.nrows() != n {
            return Err(Error::DimensionMismatch {
                context: "B rows",
                expected: n,
                found: b.nrows(),
            });
        }
        Ok(Self { a, b, lifting, meta })
    }

    pub fn inputs(&self) -> usize {
        self.b.ncols()
    }

    pub fn selector(&self) -> DMatrix<f64> {
        self.lifting.selector()
    }

    /// `C z`, the leading `n` coordinates.
    pub fn state(&self, z: &DVector<f64>) -> DVector<f64> {
        z.rows(0, self.lifting.state_dim()).into_owned()
    }

    pub fn step(&self, z: &DVector<f64>, v: &[f64]) -> Result<DVector<f64>> {
        if v.len() != self.inputs() {
            return Err(Error::DimensionMismatch {
                context: "model input",
                expected: self.inputs(),
                found: v.len(),
            });
        }
        Ok(&self.a * z + &self.b * DVector::from_column_slice(v))
    }

    /// `[z₀, z₁, …, z_H]` under encoded inputs `v₀ … v_{H−1}`.
    pub fn rollout(&self, z0: &DVector<f64>, inputs: &[Vec<f64>]) -> Result<Vec<DVector<f64>>> {
        if z0.len() != self.a.nrows() {
            return Err(Error::DimensionMismatch {
                context: "initial lifted state",
                expected: self.a.nrows(),
                found: z0.len(),
            });
        }
        let mut out = Vec::with_capacity(inputs.len() + 1);
        out.push(z0.clone());
        for (k, v) in inputs.iter().enumerate() {
            let z = self.step(out.last().expect("nonempty"), v)?;
            if !z.iter().all(|x| x.is_finite()) {
                return Err(Error::NumericalBlowup { time: (k + 1) as f64 });
            }
            out.push(z);
        }
        Ok(out)
    }

    pub fn write_to(&self, w: &mut impl Write) -> Result<()> {
        let header = serde_json::to_vec(&ModelHeader {
            lifted_dim: self.a.nrows(),
            inputs: self.inputs(),
            lifting: self.lifting,
            meta: self.meta.clone(),
        })?;
        w.write_all(MODEL_MAGIC)?;
        w.write_all(&MODEL_VERSION.to_le_bytes())?;
        w.write_all(&(header.len() as u64).to_le_bytes())?;
        w.write_all(&header)?;
        for v in self.a.iter().chain(self.b.iter()) {
            w.write_all(&v.to_le_bytes())?;
        }
        Ok(())
    }

    pub fn read_from(r: &mut impl Read) -> Result<Self> {
        let mut bytes = Vec::new();
        r.read_to_end(&mut bytes)?;
        let corrupt = |what: &str| Error::Corrupt(format!("model file: {what}"));
        if bytes.len() < 16 || &bytes[..4] != MODEL_MAGIC {
            return Err(corrupt("bad magic"));
        }
        let version = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
        if version != MODEL_VERSION {
            return Err(Error::VersionMismatch {
                expected: MODEL_VERSION,
                found: version,
            });
        }
        let hlen = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
        let body = bytes.get(16..).ok_or_else(|| corrupt("truncated"))?;
        if body.len() < hlen {
            return Err(corrupt("truncated header"));
        }
        let header: ModelHeader = serde_json::from_slice(&body[..hlen])
            .map_err(|e| corrupt(&e.to_string()))?;
        let (n, m) = (header.lifted_dim, header.inputs);
        let payload = &body[hlen..];
        if payload.len() != 8 * (n * n + n * m) {
            return Err(corrupt("payload size"));
        }
        let mut values = payload
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")));
        let a = DMatrix::from_iterator(n, n, values.by_ref().take(n * n));
        let b = DMatrix::from_iterator(n, m, values);
        Self::new(a, b, header.lifting, header.meta)
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

    pub fn hash(&self) -> String {
        let mut buf = Vec::new();
        self.write_to(&mut buf).expect("in-memory write");
        hex::encode(&Sha256::digest(&buf)[..16])
    }
}

/// Regularization used by [`train`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Regularization {
    /// Minimum-norm least squares with the given `rcond`.
    LeastSquares { rcond: f64 },
    /// Least squares on row-equilibrated regressors.
    Equilibrated { rcond: f64 },
    Lasso { alpha: f64, settings: LassoSettings },
}

impl Default for Regularization {
    fn default() -> Self {
        Self::Equilibrated {
            rcond: DEFAULT_RCOND,
        }
    }
}

/// Identify a model from a dataset.
pub fn train(
    ds: &TrajectoryDataset,
    spec: &LiftingSpec,
    reg: Regularization,
) -> Result<KoopmanModel> {
    let data = build_data_matrices(ds, spec, DelayStart::Bootstrap)?;
    let (k, alpha, rcond) = match reg {
        Regularization::LeastSquares { rcond } => {
            (edmd_least_squares(&data.theta, &data.theta_next, rcond)?, 0.0, rcond)
        }
        Regularization::Equilibrated { rcond } => (
            edmd_least_squares_equilibrated(&data.theta, &data.theta_next, rcond)?,
            0.0,
            rcond,
        ),
        Regularization::Lasso { alpha, settings } => (
            edmd_lasso(&data.theta, &data.theta_next, alpha, &settings)?,
            alpha,
            0.0,
        ),
    };
    let (a, b) = extract_affine(&k, ds.input_dim())?;
    KoopmanModel::new(
        a,
        b,
        *spec,
        ModelMeta {
            alpha,
            rcond,
            snapshots: data.columns(),
            dataset_hash: ds.hash(),
            config_hash: ds.header.config_hash.clone(),
            config: ds.header.config.clone(),
        },
    )
}

/// Mean squared one-step prediction error of the lifted state.
pub fn one_step_error(model: &KoopmanModel, ds: &TrajectoryDataset) -> Result<f64> {
    let data = build_data_matrices(ds, &model.lifting, DelayStart::Bootstrap)?;
    let n = model.a.nrows();
    let pred = &model.a * data.theta.rows(0, n) + &model.b * data.theta.rows(n, model.inputs());
    Ok((pred - &data.theta_next).norm_squared() / data.theta_next.len().max(1) as f64)
}

/// Outcome of one α candidate in [`select_alpha`].
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AlphaCandidate {
    pub alpha: f64,
    pub validation_error: Option<f64>,
}

/// Sweep `α ∈ factors × ‖Θ‖_max` on an 80/20 trajectory split and return the
/// candidate with the lowest one-step validation error. `α = 0` uses least
/// squares; candidates whose LASSO solve fails are recorded and skipped.
pub fn select_alpha(
    ds: &TrajectoryDataset,
    spec: &LiftingSpec,
    factors: &[f64],
) -> Result<(f64, Vec<AlphaCandidate>)> {
    let (fit, val) = ds.split(0.8);
    if fit.trajectories.is_empty() || val.trajectories.is_empty() {
        return Err(Error::InvalidArgument("alpha sweep needs at least 2 trajectories".into()));
    }
    let scale = build_data_matrices(&fit, spec, DelayStart::Bootstrap)?.theta.amax();
    let mut results = Vec::new();
    for &f in factors {
        let alpha = f * scale;
        let reg = if alpha == 0.0 {
            Regularization::default()
        } else {
            Regularization::Lasso {
                alpha,
                settings: LassoSettings::default(),
            }
        };
        let err = match train(&fit, spec, reg) {
            Ok(m) => Some(one_step_error(&m, &val)?),
            Err(Error::LassoNonConvergence { iterations, gap }) => {
                warn!("alpha {alpha:e}: no convergence after {iterations} iterations (residual {gap:e})");
                None
            }
            Err(e) => return Err(e),
        };
        results.push(AlphaCandidate {
            alpha,
            validation_error: err,
        });
    }
    let best = results
        .iter()
        .filter_map(|c| c.validation_error.map(|e| (c.alpha, e)))
        .min_by(|a, b| a.1.total_cmp(&b.1))
        .map(|(a, _)| a)
        .ok_or_else(|| Error::InvalidArgument("no alpha candidate converged".into()))?;
    Ok((best, results))
}
