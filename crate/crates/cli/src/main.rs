//! `segkoop`: simulate, collect, train, control and evaluate from the shell.
//!
//! Progress goes to stderr, data to files. Every subcommand writes a run
//! manifest next to its output. Failures end with one JSON line on stderr,
//! `{"error":{"kind":…,"message":…}}`, and a nonzero exit code.

mod manifest;

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use log::info;

use segkoop::datagen::{collect_dataset, CollectionOptions};
use segkoop::eval::{
    convergence_study, drift_report, export_report_dir, horizon_error_study, ControllerSpec,
    ConvergenceSettings, ExperimentReport,
};
use segkoop::koopman::{select_alpha, train, LassoSettings, Regularization, DEFAULT_RCOND};
use segkoop::mpc::{control_loop, MpcConfig, QWeighting, ReferenceShape, DEFAULT_MOVE_WEIGHT};
use segkoop::rod::sample_backbone;
use segkoop::{
    InputMode, KoopmanModel, LiftingSpec, RobotConfig, RodModel, Simulator, TendonTension,
    TrajectoryDataset,
};

use manifest::{now_unix, RunManifest};

const ALPHA_FACTORS: [f64; 4] = [0.0, 1e-6, 1e-4, 1e-2];

#[derive(Parser)]
#[command(name = "segkoop", version, about = "Koopman shape control of tendon-driven continuum robots")]
struct Cli {
    /// Robot configuration file (TOML); missing keys take the default robot.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override the number of segments from the configuration.
    #[arg(long, global = true)]
    segments: Option<usize>,
    /// Master seed; all randomness derives from it.
    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,
    /// Worker threads (default: available cores).
    #[arg(long, global = true)]
    jobs: Option<usize>,
    /// Full-size experiment defaults (480 trajectories, 200 control runs).
    #[arg(long, global = true)]
    paper_scale: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate the rod from rest and write sampled shapes as JSON lines.
    Simulate(SimulateArgs),
    /// Collect ramp-and-hold training trajectories.
    Collect(CollectArgs),
    /// Identify a Koopman model from a dataset.
    Train(TrainArgs),
    /// Compute a static reference shape.
    Reference(ReferenceArgs),
    /// Run closed-loop MPC on the simulator.
    Control(ControlArgs),
    /// Run a model-accuracy or closed-loop study.
    Evaluate {
        #[command(subcommand)]
        study: Study,
    },
}

#[derive(Args)]
struct SimulateArgs {
    /// Constant tensions (N), comma separated; a random ramp-and-hold
    /// schedule from the seed when omitted.
    #[arg(long, value_delimiter = ',')]
    tensions: Option<Vec<f64>>,
    #[arg(long, default_value_t = 100)]
    steps: usize,
    #[arg(long, default_value_t = 10)]
    per_segment: usize,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct CollectArgs {
    /// Number of trajectories (default 60, or 480 with --paper-scale).
    #[arg(long)]
    trajectories: Option<usize>,
    #[arg(long, default_value_t = 10)]
    per_segment: usize,
    #[arg(long, default_value_t = 5)]
    waypoints: usize,
    #[arg(long, default_value_t = 8.0)]
    max_tension: f64,
    #[arg(long, default_value_t = 40)]
    ramp_steps: usize,
    #[arg(long, default_value_t = 10)]
    hold_steps: usize,
    #[arg(long, default_value_t = 1)]
    stride: usize,
    /// Binary dataset output.
    #[arg(long)]
    out: PathBuf,
    /// Also write every snapshot as a JSON line here.
    #[arg(long)]
    jsonl: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum Toggle {
    On,
    Off,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Model input: `u` (tensions) or `du` (tension changes).
    #[arg(long, default_value = "du")]
    mode: InputMode,
    /// Per-segment projection of the backbone samples.
    #[arg(long, value_enum, default_value_t = Toggle::On)]
    project: Toggle,
    /// LASSO weight, or `auto` for a validation sweep; 0 is least squares.
    #[arg(long, default_value = "0")]
    alpha: String,
    #[arg(long, default_value_t = 3)]
    delay_depth: usize,
    #[arg(long, default_value_t = DEFAULT_RCOND)]
    rcond: f64,
    /// Least squares without row equilibration.
    #[arg(long)]
    plain: bool,
}

#[derive(Args)]
struct ReferenceArgs {
    /// Tensions (N), comma separated; `U(0, 8)` per tendon from the seed when omitted.
    #[arg(long, value_delimiter = ',')]
    tensions: Option<Vec<f64>>,
    #[arg(long, default_value_t = 10)]
    per_segment: usize,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct ControlArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    reference: PathBuf,
    #[arg(long, default_value_t = 200)]
    steps: usize,
    #[arg(long, default_value_t = 10)]
    horizon: usize,
    #[arg(long, default_value = "weighted")]
    weighting: QWeighting,
    #[arg(long, default_value_t = DEFAULT_MOVE_WEIGHT)]
    move_weight: f64,
    /// Per-step log (JSON lines).
    #[arg(long)]
    out: PathBuf,
}

#[derive(Subcommand)]
enum Study {
    /// Open-loop world-frame MSE versus prediction horizon on a test set.
    Horizon {
        /// `NAME=PATH`, repeatable.
        #[arg(long = "model", required = true)]
        models: Vec<String>,
        /// Held-out dataset.
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value_t = 50)]
        max_horizon: usize,
        /// Report directory.
        #[arg(long)]
        out: PathBuf,
    },
    /// Closed-loop convergence toward random static references.
    Convergence {
        /// `NAME[:identity|weighted]=PATH`, repeatable; weighting defaults to weighted.
        #[arg(long = "controller", required = true)]
        controllers: Vec<String>,
        /// Runs per controller (default 20, or 200 with --paper-scale).
        #[arg(long)]
        runs: Option<usize>,
        #[arg(long, default_value_t = 200)]
        steps: usize,
        #[arg(long, default_value_t = 10)]
        horizon: usize,
        #[arg(long, default_value_t = DEFAULT_MOVE_WEIGHT)]
        move_weight: f64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Zero-input rollout drift from the rest shape.
    Drift {
        #[arg(long = "model", required = true)]
        models: Vec<String>,
        #[arg(long, default_value_t = 500)]
        steps: usize,
        #[arg(long)]
        out: PathBuf,
    },
}

impl Cli {
    /// Configuration from `--config`/`--segments`, or `None` if neither is given.
    fn explicit_config(&self) -> Result<Option<RobotConfig>> {
        if self.config.is_none() && self.segments.is_none() {
            return Ok(None);
        }
        let mut cfg = match &self.config {
            Some(p) => RobotConfig::load(p).with_context(|| format!("loading config {}", p.display()))?,
            None => RobotConfig::default(),
        };
        if let Some(s) = self.segments {
            cfg.segments = s;
        }
        cfg.validate()?;
        Ok(Some(cfg))
    }

    fn config(&self) -> Result<RobotConfig> {
        Ok(self.explicit_config()?.unwrap_or_default())
    }

    fn start(&self, subcommand: &str, cfg: &RobotConfig) -> RunManifest {
        RunManifest {
            subcommand: subcommand.to_string(),
            argv: std::env::args().collect(),
            tool_version: env!("CARGO_PKG_VERSION"),
            config_path: self.config.clone(),
            config_hash: cfg.hash(),
            seed: self.seed,
            jobs: self.jobs,
            paper_scale: self.paper_scale,
            inputs: Vec::new(),
            outputs: Vec::new(),
            details: BTreeMap::new(),
            started_unix: now_unix(),
            finished_unix: 0.0,
        }
    }
}

/// Fail unless an explicitly given configuration matches `found`.
fn check_hash(explicit: &Option<RobotConfig>, found: &str, what: &str) -> Result<()> {
    if let Some(cfg) = explicit {
        if cfg.hash() != found {
            return Err(segkoop::Error::ConfigHashMismatch {
                expected: cfg.hash(),
                found: found.to_string(),
            })
            .with_context(|| format!("{what} was produced for a different robot configuration"));
        }
    }
    Ok(())
}

fn parse_named(s: &str) -> Result<(String, PathBuf)> {
    let (name, path) = s
        .split_once('=')
        .ok_or_else(|| anyhow!("expected NAME=PATH, got {s:?}"))?;
    if name.is_empty() {
        bail!("empty model name in {s:?}");
    }
    Ok((name.to_string(), PathBuf::from(path)))
}

fn load_models(specs: &[String], man: &mut RunManifest) -> Result<Vec<(String, KoopmanModel)>> {
    specs
        .iter()
        .map(|s| {
            let (name, path) = parse_named(s)?;
            let m = KoopmanModel::load(&path).with_context(|| format!("loading model {}", path.display()))?;
            man.input(&path)?;
            Ok((name, m))
        })
        .collect()
}

fn finish_report(report: &ExperimentReport, out: &Path, mut man: RunManifest) -> Result<()> {
    export_report_dir(report, out)?;
    for ext in ["csv", "json"] {
        man.output(&out.join(format!("{}.{ext}", report.name)))?;
    }
    if !report.failures.is_empty() {
        man.detail("failures", &report.failures);
    }
    man.write_for(out)?;
    info!("wrote {}", out.display());
    Ok(())
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    Ok(BufWriter::new(
        File::create(path).with_context(|| format!("creating {}", path.display()))?,
    ))
}

fn simulate(cli: &Cli, a: &SimulateArgs) -> Result<()> {
    let cfg = cli.config()?;
    let mut man = cli.start("simulate", &cfg);
    let m = cfg.num_tendons();
    let schedule = match &a.tensions {
        Some(_) => None,
        None => Some(CollectionOptions::default().schedule(&cfg, cli.seed)?),
    };
    let constant = a.tensions.as_ref().map(|t| TendonTension::new(t.clone())).transpose()?;
    if let Some(c) = &constant {
        if c.len() != m {
            bail!("expected {m} tensions, got {}", c.len());
        }
    }
    let steps = match &schedule {
        Some(s) => a.steps.min((s.duration() / cfg.dt).round() as usize),
        None => a.steps,
    };
    let mut sim = Simulator::at_equilibrium(RodModel::new(&cfg)?, &TendonTension::zeros(m))?;
    let mut w = create(&a.out)?;
    let mut record = |t: f64, u: &[f64], state: &segkoop::RodState| -> Result<()> {
        let s = sample_backbone(state, a.per_segment)?;
        serde_json::to_writer(&mut w, &serde_json::json!({ "t": t, "u": u, "positions": s.positions }))?;
        w.write_all(b"\n")?;
        Ok(())
    };
    record(0.0, &vec![0.0; m], sim.state())?;
    for k in 0..steps {
        let u = match (&constant, &schedule) {
            (Some(c), _) => c.clone(),
            (None, Some(s)) => s.input_at(k as f64 * cfg.dt)?,
            (None, None) => unreachable!(),
        };
        let state = sim.step(&u)?;
        record(state.time, u.as_slice(), state)?;
    }
    w.flush()?;
    man.detail("steps", steps);
    man.output(&a.out)?;
    man.write_for(&a.out)?;
    info!("simulated {steps} steps to {}", a.out.display());
    Ok(())
}

fn collect(cli: &Cli, a: &CollectArgs) -> Result<()> {
    let cfg = cli.config()?;
    let mut man = cli.start("collect", &cfg);
    let count = a.trajectories.unwrap_or(if cli.paper_scale { 480 } else { 60 });
    let opts = CollectionOptions {
        per_segment: a.per_segment,
        waypoints: a.waypoints,
        max_tension: a.max_tension,
        ramp_steps: a.ramp_steps,
        hold_steps: a.hold_steps,
        stride: a.stride,
    };
    info!("collecting {count} trajectories on {} segment(s)", cfg.segments);
    let ds = collect_dataset(&cfg, count, cli.seed, &opts)?;
    ds.save(&a.out)?;
    man.output(&a.out)?;
    if let Some(j) = &a.jsonl {
        let mut w = create(j)?;
        ds.write_jsonl(&mut w)?;
        w.flush()?;
        man.output(j)?;
    }
    man.detail("trajectories", count);
    man.detail("options", &opts);
    man.detail("dataset_hash", ds.hash());
    man.write_for(&a.out)?;
    info!("{} snapshots written to {}", ds.snapshot_count(), a.out.display());
    Ok(())
}

fn train_cmd(cli: &Cli, a: &TrainArgs) -> Result<()> {
    let ds = TrajectoryDataset::load(&a.data).with_context(|| format!("loading {}", a.data.display()))?;
    check_hash(&cli.explicit_config()?, &ds.header.config_hash, "dataset")?;
    let mut man = cli.start("train", &ds.header.config);
    man.input(&a.data)?;
    let mut spec = LiftingSpec::new(
        ds.header.config.segments,
        matches!(a.project, Toggle::On),
        a.mode,
    );
    spec.per_segment = ds.header.per_segment;
    spec.delay_depth = a.delay_depth;

    let alpha = if a.alpha == "auto" {
        let (best, candidates) = select_alpha(&ds, &spec, &ALPHA_FACTORS)?;
        man.detail("alpha_candidates", &candidates);
        info!("selected alpha {best:e}");
        best
    } else {
        a.alpha
            .parse::<f64>()
            .map_err(|_| anyhow!("--alpha must be a number or `auto`, got {:?}", a.alpha))?
    };
    let reg = if alpha > 0.0 {
        Regularization::Lasso {
            alpha,
            settings: LassoSettings::default(),
        }
    } else if alpha == 0.0 {
        if a.plain {
            Regularization::LeastSquares { rcond: a.rcond }
        } else {
            Regularization::Equilibrated { rcond: a.rcond }
        }
    } else {
        bail!("--alpha must be non-negative, got {alpha}");
    };
    let model = train(&ds, &spec, reg)?;
    model.save(&a.out)?;
    man.output(&a.out)?;
    man.detail("lifting", spec);
    man.detail("alpha", alpha);
    man.detail("snapshots", model.meta.snapshots);
    man.write_for(&a.out)?;
    info!("model ({} lifted states) written to {}", model.a.nrows(), a.out.display());
    Ok(())
}

fn reference(cli: &Cli, a: &ReferenceArgs) -> Result<()> {
    let cfg = cli.config()?;
    let mut man = cli.start("reference", &cfg);
    let r = match &a.tensions {
        Some(t) => {
            if t.len() != cfg.num_tendons() {
                bail!("expected {} tensions, got {}", cfg.num_tendons(), t.len());
            }
            ReferenceShape::from_tensions(&cfg, &TendonTension::new(t.clone())?, a.per_segment)?
        }
        None => ReferenceShape::random(&cfg, cli.seed, a.per_segment, 0.0, 8.0)?,
    };
    r.save(&a.out)?;
    man.output(&a.out)?;
    man.detail("tensions", &r.tensions);
    man.write_for(&a.out)?;
    info!("reference written to {}", a.out.display());
    Ok(())
}

fn control(cli: &Cli, a: &ControlArgs) -> Result<()> {
    let model = KoopmanModel::load(&a.model).with_context(|| format!("loading {}", a.model.display()))?;
    check_hash(&cli.explicit_config()?, &model.meta.config_hash, "model")?;
    let reference = ReferenceShape::load(&a.reference)
        .with_context(|| format!("loading {}", a.reference.display()))?;
    let cfg = model.meta.config.clone();
    let mut man = cli.start("control", &cfg);
    man.input(&a.model)?;
    man.input(&a.reference)?;
    let m = model.inputs();
    let mut mpc = MpcConfig::new(&model.lifting, m, a.weighting);
    mpc.horizon = a.horizon;
    mpc.r.fill_diagonal(a.move_weight);
    let mut sim = Simulator::at_equilibrium(RodModel::new(&cfg)?, &TendonTension::zeros(m))?;
    let log = control_loop(&mut sim, &model, &reference, &mpc, a.steps, &vec![0.0; m])?;
    let mut w = create(&a.out)?;
    log.write_jsonl(&mut w)?;
    w.flush()?;
    man.output(&a.out)?;
    man.detail("initial_mse", log.initial_mse);
    man.detail("final_mse", log.final_mse());
    if let Some(e) = &log.aborted {
        man.detail("aborted", e);
    }
    man.write_for(&a.out)?;
    info!(
        "MSE {:.3e} -> {:.3e} over {} steps",
        log.initial_mse,
        log.final_mse(),
        log.records.len()
    );
    if let Some(e) = log.aborted {
        bail!("simulation aborted after {} steps: {e}", log.records.len());
    }
    Ok(())
}

fn evaluate(cli: &Cli, study: &Study) -> Result<()> {
    match study {
        Study::Horizon {
            models,
            data,
            max_horizon,
            out,
        } => {
            let test = TrajectoryDataset::load(data).with_context(|| format!("loading {}", data.display()))?;
            check_hash(&cli.explicit_config()?, &test.header.config_hash, "test dataset")?;
            let mut man = cli.start("evaluate horizon", &test.header.config);
            man.input(data)?;
            let loaded = load_models(models, &mut man)?;
            let named: Vec<(String, &KoopmanModel)> = loaded.iter().map(|(n, m)| (n.clone(), m)).collect();
            let report = horizon_error_study(&named, &test, *max_horizon)?;
            finish_report(&report, out, man)
        }
        Study::Convergence {
            controllers,
            runs,
            steps,
            horizon,
            move_weight,
            out,
        } => {
            let mut parsed = Vec::new();
            for c in controllers {
                let (head, path) = parse_named(c)?;
                let (name, weighting) = match head.split_once(':') {
                    Some((n, w)) => (n.to_string(), w.parse::<QWeighting>()?),
                    None => (head, QWeighting::Weighted),
                };
                parsed.push((name, weighting, path));
            }
            let mut models = Vec::new();
            for (_, _, path) in &parsed {
                models.push(KoopmanModel::load(path).with_context(|| format!("loading {}", path.display()))?);
            }
            let cfg = models[0].meta.config.clone();
            check_hash(&cli.explicit_config()?, &cfg.hash(), "model")?;
            let mut man = cli.start("evaluate convergence", &cfg);
            for (_, _, path) in &parsed {
                man.input(path)?;
            }
            let specs: Vec<ControllerSpec<'_>> = parsed
                .iter()
                .zip(&models)
                .map(|((name, weighting, _), model)| ControllerSpec {
                    name: name.clone(),
                    model,
                    weighting: *weighting,
                })
                .collect();
            let settings = ConvergenceSettings {
                runs: runs.unwrap_or(if cli.paper_scale { 200 } else { 20 }),
                steps: *steps,
                seed: cli.seed,
                horizon: *horizon,
                move_weight: *move_weight,
            };
            let report = convergence_study(&cfg, &specs, &settings)?;
            finish_report(&report, out, man)
        }
        Study::Drift { models, steps, out } => {
            let mut probe = cli.start("evaluate drift", &RobotConfig::default());
            let loaded = load_models(models, &mut probe)?;
            let explicit = cli.explicit_config()?;
            for (name, m) in &loaded {
                check_hash(&explicit, &m.meta.config_hash, &format!("model {name}"))?;
            }
            probe.config_hash = loaded[0].1.meta.config_hash.clone();
            let named: Vec<(String, &KoopmanModel)> = loaded.iter().map(|(n, m)| (n.clone(), m)).collect();
            let report = drift_report(&named, *steps)?;
            finish_report(&report, out, probe)
        }
    }
}

fn run(cli: &Cli) -> Result<()> {
    if let Some(j) = cli.jobs {
        rayon::ThreadPoolBuilder::new()
            .num_threads(j)
            .build_global()
            .context("configuring worker threads")?;
    }
    match &cli.command {
        Command::Simulate(a) => simulate(cli, a),
        Command::Collect(a) => collect(cli, a),
        Command::Train(a) => train_cmd(cli, a),
        Command::Reference(a) => reference(cli, a),
        Command::Control(a) => control(cli, a),
        Command::Evaluate { study } => evaluate(cli, study),
    }
}

fn error_line(kind: &str, message: &str) {
    let line = serde_json::json!({ "error": { "kind": kind, "message": message } });
    eprintln!("{line}");
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            let _ = e.print();
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                return ExitCode::SUCCESS;
            }
            let message = e.to_string();
            error_line("usage", message.lines().next().unwrap_or_default().trim_start_matches("error: "));
            return ExitCode::from(2);
        }
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let kind = e
                .chain()
                .find_map(|c| c.downcast_ref::<segkoop::Error>())
                .map_or("error", |e| e.kind());
            error_line(kind, &format!("{e:#}"));
            ExitCode::FAILURE
        }
    }
}
