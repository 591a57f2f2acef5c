//! Shape metrics, model-accuracy and closed-loop studies, and report export.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::datagen::{trajectory_seed, Trajectory, TrajectoryDataset};
use crate::error::{Error, Result};
use crate::koopman::{encode_trajectory_inputs, lift_trajectory, KoopmanModel};
use crate::mpc::{control_loop, MpcConfig, QWeighting, ReferenceShape, DEFAULT_MOVE_WEIGHT};
use crate::rod::{sample_backbone, static_solve, RobotConfig, RodModel, Simulator, TendonTension};

/// `(1/p) Σᵢ ‖pᵢ − p_ref,ᵢ‖²` over `p` points given as flattened xyz.
pub fn shape_mse(p: &[f64], p_ref: &[f64]) -> Result<f64> {
    if p.len() != p_ref.len() || p.len() % 3 != 0 {
        return Err(Error::DimensionMismatch {
            context: "shape points",
            expected: p_ref.len(),
            found: p.len(),
        });
    }
    if p.is_empty() {
        return Ok(0.0);
    }
    let sum: f64 = p.iter().zip(p_ref).map(|(a, b)| (a - b) * (a - b)).sum();
    Ok(sum / (p.len() / 3) as f64)
}

/// One raw series: `values[k]` at step or horizon `k`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSeries {
    pub variant: String,
    pub run: String,
    pub values: Vec<f64>,
    /// Applied inputs per step, when the series comes from a closed loop.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub inputs: Vec<Vec<f64>>,
}

/// Mean and `band × σ` range of one variant at one step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AggregateRow {
    pub step: usize,
    pub variant: String,
    pub mean: f64,
    pub std: f64,
    pub lower: f64,
    pub upper: f64,
    pub count: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub name: String,
    /// Half-width of the reported band in standard deviations.
    pub band: f64,
    pub metadata: BTreeMap<String, serde_json::Value>,
    pub runs: Vec<RunSeries>,
    pub aggregates: Vec<AggregateRow>,
    /// Runs that failed, as `variant/run: message`.
    pub failures: Vec<String>,
}

impl ExperimentReport {
    pub fn new(name: &str, band: f64, runs: Vec<RunSeries>) -> Self {
        let aggregates = aggregate(&runs, band);
        Self {
            name: name.to_string(),
            band,
            metadata: BTreeMap::new(),
            runs,
            aggregates,
            failures: Vec::new(),
        }
    }

    pub fn variants(&self) -> Vec<String> {
        let mut seen = Vec::new();
        for r in &self.runs {
            if !seen.contains(&r.variant) {
                seen.push(r.variant.clone());
            }
        }
        seen
    }

    pub fn aggregate_at(&self, variant: &str, step: usize) -> Option<&AggregateRow> {
        self.aggregates
            .iter()
            .find(|a| a.variant == variant && a.step == step)
    }

    pub fn runs_of<'a>(&'a self, variant: &'a str) -> impl Iterator<Item = &'a RunSeries> + 'a {
        self.runs.iter().filter(move |r| r.variant == variant)
    }

    pub fn with_meta(mut self, key: &str, value: impl Serialize) -> Self {
        self.metadata.insert(
            key.to_string(),
            serde_json::to_value(value).unwrap_or(serde_json::Value::Null),
        );
        self
    }
}

/// Per-variant, per-step mean and population standard deviation over runs.
/// Variants appear in order of first occurrence; non-finite values and runs
/// shorter than the step are skipped.
pub fn aggregate(runs: &[RunSeries], band: f64) -> Vec<AggregateRow> {
    let mut order: Vec<&str> = Vec::new();
    for r in runs {
        if !order.contains(&r.variant.as_str()) {
            order.push(&r.variant);
        }
    }
    let mut rows = Vec::new();
    for v in order {
        let series: Vec<&RunSeries> = runs.iter().filter(|r| r.variant == v).collect();
        let len = series.iter().map(|r| r.values.len()).max().unwrap_or(0);
        for step in 0..len {
            let vals: Vec<f64> = series
                .iter()
                .filter_map(|r| r.values.get(step).copied())
                .filter(|x| x.is_finite())
                .collect();
            if vals.is_empty() {
                continue;
            }
            let n = vals.len() as f64;
            let mean = vals.iter().sum::<f64>() / n;
            let std = (vals.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n).sqrt();
            rows.push(AggregateRow {
                step,
                variant: v.to_string(),
                mean,
                std,
                lower: mean - band * std,
                upper: mean + band * std,
                count: vals.len(),
            });
        }
    }
    rows
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReportFormat {
    Csv,
    Json,
}

/// Write the aggregate table as CSV or the whole report as JSON.
pub fn write_report(report: &ExperimentReport, w: &mut impl Write, format: ReportFormat) -> Result<()> {
    match format {
        ReportFormat::Csv => {
            writeln!(w, "step,variant,mean,std,lower,upper,count")?;
            for a in &report.aggregates {
                writeln!(
                    w,
                    "{},{},{:e},{:e},{:e},{:e},{}",
                    a.step, a.variant, a.mean, a.std, a.lower, a.upper, a.count
                )?;
            }
        }
        ReportFormat::Json => {
            serde_json::to_writer(&mut *w, report)?;
            w.write_all(b"\n")?;
        }
    }
    Ok(())
}

pub fn export_report(report: &ExperimentReport, path: impl AsRef<Path>, format: ReportFormat) -> Result<()> {
    let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
    write_report(report, &mut w, format)?;
    w.flush()?;
    Ok(())
}

/// Write `<dir>/<name>.csv` and `<dir>/<name>.json`.
pub fn export_report_dir(report: &ExperimentReport, dir: impl AsRef<Path>) -> Result<()> {
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir)?;
    export_report(report, dir.join(format!("{}.csv", report.name)), ReportFormat::Csv)?;
    export_report(report, dir.join(format!("{}.json", report.name)), ReportFormat::Json)
}

pub fn load_report(path: impl AsRef<Path>) -> Result<ExperimentReport> {
    Ok(serde_json::from_reader(std::io::BufReader::new(
        std::fs::File::open(path)?,
    ))?)
}

/// World-frame MSE of open-loop rollouts of one model from every start `k`
/// with `k + max_horizon ≤ T` of one trajectory: `out[k][h]`. Projected
/// predictions are mapped back with the true segment frames at `k + h`.
pub fn trajectory_horizon_errors(
    model: &KoopmanModel,
    traj: &Trajectory,
    max_horizon: usize,
) -> Result<Vec<Vec<f64>>> {
    let spec = &model.lifting;
    let steps = traj.len();
    if steps < max_horizon {
        return Ok(Vec::new());
    }
    let z = lift_trajectory(traj, spec)?;
    let inputs = encode_trajectory_inputs(traj, spec);
    let starts = steps - max_horizon + 1;
    let n = spec.state_dim();
    let m = model.inputs();

    // Propagate every start at once: column s holds the rollout from k = s.
    let mut zs = DMatrix::zeros(model.a.nrows(), starts);
    for s in 0..starts {
        zs.set_column(s, &z[s]);
    }
    let mut errors = vec![vec![0.0; max_horizon + 1]; starts];
    for h in 0..=max_horizon {
        for (s, row) in errors.iter_mut().enumerate() {
            let truth = &traj.samples[s + h];
            let xhat: Vec<f64> = zs.column(s).rows(0, n).iter().copied().collect();
            let world = spec.reconstruct(&xhat, &truth.frames)?;
            row[h] = shape_mse(&world, &truth.positions)?;
        }
        if h == max_horizon {
            break;
        }
        let mut v = DMatrix::zeros(m, starts);
        for s in 0..starts {
            v.set_column(s, &DVector::from_column_slice(&inputs[s + h]));
        }
        zs = &model.a * zs + &model.b * v;
        if !zs.iter().all(|x| x.is_finite()) {
            return Err(Error::NumericalBlowup { time: (h + 1) as f64 });
        }
    }
    Ok(errors)
}

/// Open-loop world-frame MSE versus horizon for each named model over all
/// valid start points of every test trajectory. Band is one σ.
pub fn horizon_error_study(
    models: &[(String, &KoopmanModel)],
    test: &TrajectoryDataset,
    max_horizon: usize,
) -> Result<ExperimentReport> {
    if models.is_empty() {
        return Err(Error::MissingVariant("no models given".into()));
    }
    for (name, m) in models {
        if m.meta.config_hash != test.header.config_hash {
            return Err(Error::ConfigHashMismatch {
                expected: test.header.config_hash.clone(),
                found: format!("{} ({name})", m.meta.config_hash),
            });
        }
        if m.meta.dataset_hash == test.hash() {
            return Err(Error::InvalidArgument(format!(
                "model {name} was trained on the test set"
            )));
        }
    }
    let mut runs = Vec::new();
    for (name, model) in models {
        let per_traj = test
            .trajectories
            .par_iter()
            .map(|t| trajectory_horizon_errors(model, t, max_horizon).map(|e| (t.index, e)))
            .collect::<Result<Vec<_>>>()?;
        for (ti, errs) in per_traj {
            for (k, values) in errs.into_iter().enumerate() {
                runs.push(RunSeries {
                    variant: name.clone(),
                    run: format!("{ti}:{k}"),
                    values,
                    inputs: Vec::new(),
                });
            }
        }
    }
    Ok(ExperimentReport::new("horizon", 1.0, runs)
        .with_meta("test_dataset", test.hash())
        .with_meta("test_trajectories", test.trajectories.len())
        .with_meta("max_horizon", max_horizon)
        .with_meta(
            "models",
            models
                .iter()
                .map(|(n, m)| (n.clone(), m.hash()))
                .collect::<BTreeMap<_, _>>(),
        ))
}

/// A closed-loop controller variant: model plus state weighting.
#[derive(Debug, Clone)]
pub struct ControllerSpec<'a> {
    pub name: String,
    pub model: &'a KoopmanModel,
    pub weighting: QWeighting,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConvergenceSettings {
    pub runs: usize,
    pub steps: usize,
    pub seed: u64,
    pub horizon: usize,
    pub move_weight: f64,
}

impl Default for ConvergenceSettings {
    fn default() -> Self {
        Self {
            runs: 20,
            steps: 200,
            seed: 0,
            horizon: 10,
            move_weight: DEFAULT_MOVE_WEIGHT,
        }
    }
}

/// Reference of run `i`: static shape under `u ~ U(0, 8)^m` from a seed
/// derived from the study seed, shared by all controllers.
pub fn convergence_reference(cfg: &RobotConfig, seed: u64, run: usize, per_segment: usize) -> Result<ReferenceShape> {
    ReferenceShape::random(cfg, trajectory_seed(seed, run), per_segment, 0.0, 8.0)
}

/// Closed-loop MSE from the unactuated rest shape toward random static
/// references, for every controller on the same references. Band is 0.25 σ.
/// Failed runs are listed in `failures` and left out of the aggregates.
pub fn convergence_study(
    cfg: &RobotConfig,
    controllers: &[ControllerSpec<'_>],
    settings: &ConvergenceSettings,
) -> Result<ExperimentReport> {
    if controllers.is_empty() {
        return Err(Error::MissingVariant("no controllers given".into()));
    }
    let rod = RodModel::new(cfg)?;
    let m = cfg.num_tendons();
    for c in controllers {
        if c.model.meta.config_hash != cfg.hash() {
            return Err(Error::ConfigHashMismatch {
                expected: cfg.hash(),
                found: format!("{} ({})", c.model.meta.config_hash, c.name),
            });
        }
    }
    let jobs: Vec<(usize, usize)> = (0..settings.runs)
        .flat_map(|r| (0..controllers.len()).map(move |c| (r, c)))
        .collect();
    let outcomes: Vec<std::result::Result<RunSeries, String>> = jobs
        .par_iter()
        .map(|&(run, ci)| {
            let c = &controllers[ci];
            let label = format!("{}/{run}", c.name);
            let go = || -> Result<RunSeries> {
                let spec = &c.model.lifting;
                let reference = convergence_reference(cfg, settings.seed, run, spec.per_segment)?;
                let mut mpc = MpcConfig::new(spec, m, c.weighting);
                mpc.horizon = settings.horizon;
                mpc.r = DMatrix::identity(m, m) * settings.move_weight;
                let mut sim = Simulator::at_equilibrium(rod.clone(), &TendonTension::zeros(m))?;
                let log = control_loop(&mut sim, c.model, &reference, &mpc, settings.steps, &vec![0.0; m])?;
                if let Some(e) = &log.aborted {
                    return Err(Error::InvalidArgument(format!("simulation aborted: {e}")));
                }
                Ok(RunSeries {
                    variant: c.name.clone(),
                    run: run.to_string(),
                    values: log.mse_series(),
                    inputs: log.records.iter().map(|r| r.u.clone()).collect(),
                })
            };
            go().map_err(|e| format!("{label}: {e}"))
        })
        .collect();
    let mut runs = Vec::new();
    let mut failures = Vec::new();
    for o in outcomes {
        match o {
            Ok(r) => runs.push(r),
            Err(e) => failures.push(e),
        }
    }
    // Group by controller, runs in index order.
    runs.sort_by_key(|r| {
        (
            controllers.iter().position(|c| c.name == r.variant),
            r.run.parse::<usize>().unwrap_or(0),
        )
    });
    let mut report = ExperimentReport::new("convergence", 0.25, runs)
        .with_meta("config_hash", cfg.hash())
        .with_meta("segments", cfg.segments)
        .with_meta("settings", settings)
        .with_meta(
            "controllers",
            controllers
                .iter()
                .map(|c| (c.name.clone(), (c.model.hash(), c.weighting)))
                .collect::<BTreeMap<_, _>>(),
        );
    report.failures = failures;
    Ok(report)
}

/// `‖C z_k − x₀‖` for `k = 0..=steps` under zero model input, starting from
/// the lifted unactuated rest shape of the model's robot.
pub fn steady_state_drift(model: &KoopmanModel, steps: usize) -> Result<Vec<f64>> {
    let cfg = &model.meta.config;
    let spec = &model.lifting;
    let rest = static_solve(
        &TendonTension::zeros(cfg.num_tendons()),
        &RodModel::new(cfg)?,
        None,
    )?;
    let x0 = spec.observe(&sample_backbone(&rest, spec.per_segment)?)?;
    let z0 = spec.embed(std::slice::from_ref(&x0))?;
    let zero = vec![vec![0.0; model.inputs()]; steps];
    let traj = model.rollout(&z0, &zero)?;
    Ok(traj.iter().map(|z| (model.state(z) - &x0).norm()).collect())
}

pub fn drift_report(models: &[(String, &KoopmanModel)], steps: usize) -> Result<ExperimentReport> {
    let mut runs = Vec::new();
    for (name, model) in models {
        runs.push(RunSeries {
            variant: name.clone(),
            run: "0".into(),
            values: steady_state_drift(model, steps)?,
            inputs: Vec::new(),
        });
    }
    Ok(ExperimentReport::new("drift", 0.0, runs).with_meta("steps", steps))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mse_closed_forms() {
        let p = [0.0, 1.0, 2.0, 3.0, 4.0, 5.0];
        assert_eq!(shape_mse(&p, &p).unwrap(), 0.0);
        let q: Vec<f64> = p.iter().enumerate().map(|(i, v)| if i % 3 == 0 { v + 0.5 } else { *v }).collect();
        assert!((shape_mse(&q, &p).unwrap() - 0.25).abs() < 1e-15);
        assert!(shape_mse(&p[..3], &p).is_err());
    }

    #[test]
    fn aggregates_skip_missing() {
        let runs = vec![
            RunSeries { variant: "a".into(), run: "0".into(), values: vec![1.0, 2.0], inputs: vec![] },
            RunSeries { variant: "a".into(), run: "1".into(), values: vec![3.0], inputs: vec![] },
            RunSeries { variant: "b".into(), run: "0".into(), values: vec![5.0], inputs: vec![] },
        ];
        let agg = aggregate(&runs, 0.5);
        assert_eq!(agg.len(), 3);
        assert_eq!((agg[0].mean, agg[0].std, agg[0].lower), (2.0, 1.0, 1.5));
        assert_eq!((agg[1].mean, agg[1].count), (2.0, 1));
        assert_eq!(agg[2].variant, "b");
    }
}
