//! Acceptance suite. Each criterion is one test that writes a single
//! `[PASS]`/`[FAIL]` line to stderr (bypassing output capture) and then
//! asserts its outcome.

use std::cell::Cell;
use std::io::Write;
use std::sync::OnceLock;
use std::time::{Duration, Instant};

use nalgebra::{DMatrix, DVector, Vector3};
use proptest::prelude::*;
use proptest::test_runner::{Config, TestRunner};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use segkoop::datagen::{collect_dataset, CollectionOptions};
use segkoop::eval::{
    convergence_study, drift_report, export_report_dir, horizon_error_study, ControllerSpec,
    ConvergenceSettings,
};
use segkoop::koopman::{edmd_lasso, edmd_least_squares, train, LassoSettings, Regularization};
use segkoop::lifting::{delay_embed, project_segments, unproject_segments};
use segkoop::mpc::QWeighting;
use segkoop::qp::{solve_qp, QpProblem, QpSettings, QpStatus};
use segkoop::rod::{so3, static_solve};
use segkoop::{
    InputMode, KoopmanModel, LiftingSpec, RobotConfig, RodModel, SegmentFrame, Simulator,
    TendonTension, TrajectoryDataset,
};

mod common;

use common::{active_set_oracle, linear_snapshots, planar_oracle, random_qp, stable_system};

const DATA_SEED: u64 = 2024;
const TRAIN_TRAJECTORIES: usize = 60;
const TEST_TRAJECTORIES: usize = 20;

struct Outcome {
    id: u8,
    title: &'static str,
    pass: bool,
    detail: String,
    elapsed: Duration,
    limit: Option<Duration>,
}

impl Outcome {
    fn finish(self) {
        let in_time = self.limit.is_none_or(|l| self.elapsed <= l);
        let pass = self.pass && in_time;
        let limit = self
            .limit
            .map_or(String::new(), |l| format!(" (limit {} s)", l.as_secs()));
        let line = format!(
            "[{}] C{} {}: {}; {:.1} s{}\n",
            if pass { "PASS" } else { "FAIL" },
            self.id,
            self.title,
            self.detail,
            self.elapsed.as_secs_f64(),
            limit,
        );
        let _ = std::io::stderr().write_all(line.as_bytes());
        assert!(pass, "{}", line.trim_end());
    }
}

struct TwoSegment {
    test: TrajectoryDataset,
    proj_du: KoopmanModel,
    world_du: KoopmanModel,
}

fn two_segment() -> &'static TwoSegment {
    static DATA: OnceLock<TwoSegment> = OnceLock::new();
    DATA.get_or_init(|| {
        let cfg = RobotConfig::with_segments(2);
        let all = collect_dataset(
            &cfg,
            TRAIN_TRAJECTORIES + TEST_TRAJECTORIES,
            DATA_SEED,
            &CollectionOptions::default(),
        )
        .expect("2-segment data collection");
        let (train_ds, test) =
            all.split(TRAIN_TRAJECTORIES as f64 / (TRAIN_TRAJECTORIES + TEST_TRAJECTORIES) as f64);
        let fit = |proj| {
            train(&train_ds, &LiftingSpec::new(2, proj, InputMode::Difference), Regularization::default())
                .expect("training")
        };
        TwoSegment {
            proj_du: fit(true),
            world_du: fit(false),
            test,
        }
    })
}

fn rotation(axis: [f64; 3], angle: f64) -> nalgebra::Matrix3<f64> {
    let a = Vector3::from(axis);
    let a = if a.norm() < 1e-6 { Vector3::z() } else { a.normalize() };
    so3::axis_angle(&a, angle)
}

#[test]
fn c1_rod_model_correctness() {
    let start = Instant::now();
    let runner = |cases| {
        TestRunner::new(Config {
            cases,
            ..Config::default()
        })
    };
    let worst = [Cell::new(0.0f64), Cell::new(0.0), Cell::new(0.0)];
    let checked = [Cell::new(0usize), Cell::new(0), Cell::new(0)];

    let straight = runner(6).run(&(1usize..=3), |segs| {
        let cfg = RobotConfig::with_segments(segs);
        let s = static_solve(&TendonTension::zeros(3 * segs), &RodModel::new(&cfg).unwrap(), None).unwrap();
        let err = (s.tip() - Vector3::new(0.0, 0.0, segs as f64)).norm();
        worst[0].set(worst[0].get().max(err));
        checked[0].set(checked[0].get() + 1);
        prop_assert!(err <= 1e-10);
        Ok(())
    });

    let cfg = RobotConfig::default();
    let model = RodModel::new(&cfg).unwrap();
    let planar = runner(6).run(&(0.5f64..8.0), |tau| {
        let s = static_solve(&TendonTension::new(vec![tau, 0.0, 0.0]).unwrap(), &model, None).unwrap();
        let (x, z) = planar_oracle(&cfg, tau, 10 * cfg.nodes_per_segment);
        let tip = s.tip();
        let err = ((tip.x - x).powi(2) + tip.y.powi(2) + (tip.z - z).powi(2)).sqrt();
        worst[1].set(worst[1].get().max(err));
        checked[1].set(checked[1].get() + 1);
        prop_assert!(err <= 1e-6);
        Ok(())
    });

    let drift = runner(4).run(
        &(1usize..=2, prop::collection::vec(0.0f64..8.0, 6)),
        |(segs, u)| {
            let cfg = RobotConfig::with_segments(segs);
            let u = TendonTension::new(u[..3 * segs].to_vec()).unwrap();
            let mut sim = Simulator::at_equilibrium(RodModel::new(&cfg).unwrap(), &u).unwrap();
            let p0: Vec<Vector3<f64>> = sim.state().nodes.iter().map(|n| n.p).collect();
            let mut err = 0.0f64;
            for _ in 0..100 {
                let s = sim.step(&u).unwrap();
                for (n, p) in s.nodes.iter().zip(&p0) {
                    err = err.max((n.p - p).norm());
                }
            }
            worst[2].set(worst[2].get().max(err));
        checked[2].set(checked[2].get() + 1);
            prop_assert!(err <= 1e-6);
            Ok(())
        },
    );

    Outcome {
        id: 1,
        title: "rod model correctness",
        pass: straight.is_ok() && planar.is_ok() && drift.is_ok(),
        detail: format!(
            "straight tip err {:.1e} (≤1e-10, {} cases), planar oracle err {:.1e} (≤1e-6, {} cases), equilibrium drift {:.1e} m (≤1e-6, {} cases)",
            worst[0].get(),
            checked[0].get(),
            worst[1].get(),
            checked[1].get(),
            worst[2].get(),
            checked[2].get()
        ),
        elapsed: start.elapsed(),
        limit: Some(Duration::from_secs(120)),
    }
    .finish();
}

#[test]
fn c2_edmd_exactness() {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(42);
    let (a0, b0) = stable_system(&mut rng, 6, 2);
    let (theta, next) = linear_snapshots(&a0, &b0, 500, &mut rng);
    let mut truth = DMatrix::zeros(6, 8);
    truth.columns_mut(0, 6).copy_from(&a0);
    truth.columns_mut(6, 2).copy_from(&b0);

    let ls = edmd_least_squares(&theta, &next, 1e-10).unwrap();
    let ls_err = (&ls - &truth).norm();
    let lasso = edmd_lasso(&theta, &next, 0.0, &LassoSettings::default()).unwrap();
    let lasso_err = (&lasso - &ls).norm();
    let mut counts = Vec::new();
    for alpha in [0.0, 0.01, 0.1, 1.0, 10.0, 100.0, 1000.0] {
        let k = edmd_lasso(&theta, &next, alpha, &LassoSettings::default()).unwrap();
        counts.push(k.iter().filter(|v| v.abs() < 1e-12).count());
    }
    let monotone = counts.windows(2).all(|w| w[0] <= w[1]);
    Outcome {
        id: 2,
        title: "EDMD exactness",
        pass: ls_err <= 1e-8 && lasso_err <= 1e-6 && monotone,
        detail: format!(
            "‖[A B] − gen‖_F {ls_err:.1e} (≤1e-8), LASSO(0) vs LS {lasso_err:.1e} (≤1e-6), zero counts {counts:?}"
        ),
        elapsed: start.elapsed(),
        limit: Some(Duration::from_secs(30)),
    }
    .finish();
}

#[test]
fn c3_projection_scheme_value() {
    let start = Instant::now();
    let d = two_segment();
    let horizon = 50;
    let report = horizon_error_study(
        &[("proj-du".into(), &d.proj_du), ("world-du".into(), &d.world_du)],
        &d.test,
        horizon,
    )
    .unwrap();
    let proj = report.aggregate_at("proj-du", horizon).unwrap().mean;
    let world = report.aggregate_at("world-du", horizon).unwrap().mean;
    let ratio = proj / world;
    Outcome {
        id: 3,
        title: "projection scheme value",
        pass: proj < world && ratio <= 1.0 / 3.0,
        detail: format!("h={horizon} MSE proj-du {proj:.2e}, world-du {world:.2e}, ratio {ratio:.3} (≤0.333)"),
        elapsed: start.elapsed(),
        limit: Some(Duration::from_secs(20 * 60)),
    }
    .finish();
}

#[test]
fn c4_closed_loop_shape_control() {
    let start = Instant::now();
    let cfg = RobotConfig::default();
    let ds = collect_dataset(&cfg, TRAIN_TRAJECTORIES, DATA_SEED, &CollectionOptions::default()).unwrap();
    let model = train(&ds, &LiftingSpec::new(1, true, InputMode::Difference), Regularization::default()).unwrap();
    let settings = ConvergenceSettings {
        seed: 1,
        ..ConvergenceSettings::default()
    };
    let report = convergence_study(
        &cfg,
        &[ControllerSpec {
            name: "proj-du".into(),
            model: &model,
            weighting: QWeighting::Weighted,
        }],
        &settings,
    )
    .unwrap();
    let mut ratios: Vec<f64> = report
        .runs
        .iter()
        .map(|r| r.values.last().unwrap() / r.values[0])
        .collect();
    ratios.sort_by(f64::total_cmp);
    let median = if ratios.is_empty() {
        f64::NAN
    } else if ratios.len() % 2 == 1 {
        ratios[ratios.len() / 2]
    } else {
        0.5 * (ratios[ratios.len() / 2 - 1] + ratios[ratios.len() / 2])
    };
    let in_bounds = report
        .runs
        .iter()
        .flat_map(|r| r.inputs.iter().flatten())
        .all(|u| (0.0..=8.0).contains(u));
    let complete = report.failures.is_empty()
        && report.runs.len() == settings.runs
        && report.runs.iter().all(|r| r.values.len() == settings.steps + 1);
    Outcome {
        id: 4,
        title: "closed-loop shape control",
        pass: complete && median <= 1e-2 && in_bounds,
        detail: format!(
            "{} runs, median final/initial MSE {median:.1e} (≤1e-2), tensions in [0, 8]: {in_bounds}, failures {}",
            report.runs.len(),
            report.failures.len()
        ),
        elapsed: start.elapsed(),
        limit: Some(Duration::from_secs(15 * 60)),
    }
    .finish();
}

#[test]
fn c5_projection_necessity() {
    let start = Instant::now();
    let d = two_segment();
    let cfg = RobotConfig::with_segments(2);
    let settings = ConvergenceSettings {
        seed: 2,
        ..ConvergenceSettings::default()
    };
    let report = convergence_study(
        &cfg,
        &[
            ControllerSpec {
                name: "proj-weighted".into(),
                model: &d.proj_du,
                weighting: QWeighting::Weighted,
            },
            ControllerSpec {
                name: "world-weighted".into(),
                model: &d.world_du,
                weighting: QWeighting::Weighted,
            },
        ],
        &settings,
    )
    .unwrap();
    let finals = |v: &str| -> Vec<(String, f64)> {
        report
            .runs_of(v)
            .map(|r| (r.run.clone(), *r.values.last().unwrap()))
            .collect()
    };
    let world = finals("world-weighted");
    let mut wins = 0;
    let mut pairs = 0;
    for (run, p) in finals("proj-weighted") {
        if let Some((_, w)) = world.iter().find(|(r, _)| *r == run) {
            pairs += 1;
            if p < *w {
                wins += 1;
            }
        }
    }
    let median = |mut v: Vec<f64>| {
        v.sort_by(f64::total_cmp);
        v.get(v.len() / 2).copied().unwrap_or(f64::NAN)
    };
    let med_p = median(finals("proj-weighted").into_iter().map(|x| x.1).collect());
    let med_w = median(world.iter().map(|x| x.1).collect());
    Outcome {
        id: 5,
        title: "projection necessity",
        pass: pairs == settings.runs && wins * 5 >= settings.runs * 4,
        detail: format!(
            "projected lower in {wins}/{pairs} paired runs (≥80% of {}); median final MSE proj {med_p:.1e}, world {med_w:.1e}; failures {}",
            settings.runs,
            report.failures.len()
        ),
        elapsed: start.elapsed(),
        limit: None,
    }
    .finish();
}

#[test]
fn c6_qp_solver() {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mut worst_x = 0.0f64;
    let mut worst_kkt = 0.0f64;
    let mut unsolved = 0;
    for _ in 0..200 {
        let n = rng.random_range(1..=10);
        let m = rng.random_range(1..=8);
        let r = random_qp(&mut rng, n, m);
        let (x_ref, _) = active_set_oracle(&r);
        let qp = QpProblem::new(r.p, r.q, r.g, r.l, r.u).unwrap();
        let sol = solve_qp(&qp, &QpSettings::default(), None).unwrap();
        if sol.status != QpStatus::Solved {
            unsolved += 1;
        }
        worst_x = worst_x.max((&sol.x - &x_ref).amax());
        worst_kkt = worst_kkt.max(qp.kkt_residuals(&sol.x, &sol.y).max());
    }
    Outcome {
        id: 6,
        title: "QP solver",
        pass: unsolved == 0 && worst_x <= 1e-6 && worst_kkt <= 1e-5,
        detail: format!(
            "200 problems, max |x − x*| {worst_x:.1e} (≤1e-6), max KKT residual {worst_kkt:.1e} (≤1e-5), unsolved {unsolved}"
        ),
        elapsed: start.elapsed(),
        limit: None,
    }
    .finish();
}

#[test]
fn c7_steady_state_drift() {
    let start = Instant::now();
    let d = two_segment();
    let steps = 500;
    let report = drift_report(
        &[("proj-du".into(), &d.proj_du), ("world-du".into(), &d.world_du)],
        steps,
    )
    .unwrap();
    let dir = tempfile::tempdir().unwrap();
    export_report_dir(&report, dir.path()).unwrap();
    let csv = std::fs::read_to_string(dir.path().join("drift.csv")).unwrap();
    let finite = report.runs.iter().all(|r| r.values.len() == steps + 1 && r.values.iter().all(|v| v.is_finite()));
    let last = |v: &str| report.aggregate_at(v, steps).map_or(f64::NAN, |r| r.mean);
    Outcome {
        id: 7,
        title: "steady-state drift diagnostic",
        pass: finite && csv.lines().count() == 1 + 2 * (steps + 1),
        detail: format!(
            "drift after {steps} zero-input steps: proj-du {:.2e} m, world-du {:.2e} m; report emitted",
            last("proj-du"),
            last("world-du")
        ),
        elapsed: start.elapsed(),
        limit: None,
    }
    .finish();
}

fn frame_strategy() -> impl Strategy<Value = SegmentFrame> {
    (
        prop::array::uniform3(-1.0f64..1.0),
        -3.1f64..3.1,
        prop::array::uniform3(-2.0f64..2.0),
    )
        .prop_map(|(axis, angle, o)| SegmentFrame::new(Vector3::from(o), rotation(axis, angle)))
}

#[test]
fn c8_lifting_invariants() {
    let start = Instant::now();
    let mut runner = TestRunner::new(Config {
        cases: 512,
        ..Config::default()
    });
    let case = (1usize..=5, 1usize..=10).prop_flat_map(|(segs, ps)| {
        (
            prop::collection::vec(frame_strategy(), segs),
            Just(ps),
            prop::collection::vec(-3.0f64..3.0, 3 * segs * ps),
            prop::array::uniform3(-1.0f64..1.0),
            -3.1f64..3.1,
            prop::array::uniform3(-5.0f64..5.0),
        )
    });
    let worst = [Cell::new(0.0f64), Cell::new(0.0)];
    let invariants = runner.run(&case, |(frames, ps, p, axis, angle, shift)| {
        let diff = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
        let x = project_segments(&p, &frames, ps).unwrap();
        let back = unproject_segments(&x, &frames, ps).unwrap();
        let round = diff(&p, &back);

        let q = rotation(axis, angle);
        let t = Vector3::from(shift);
        let moved: Vec<f64> = p
            .chunks_exact(3)
            .flat_map(|c| {
                let w = q * Vector3::new(c[0], c[1], c[2]) + t;
                [w.x, w.y, w.z]
            })
            .collect();
        let moved_frames: Vec<SegmentFrame> = frames.iter().map(|f| f.transformed(&q, &t)).collect();
        let rigid = diff(&x, &project_segments(&moved, &moved_frames, ps).unwrap());
        worst[0].set(worst[0].get().max(round));
        worst[1].set(worst[1].get().max(rigid));
        prop_assert!(round <= 1e-12 && rigid <= 1e-12);

        let mut spec = LiftingSpec::new(frames.len(), true, InputMode::Difference);
        spec.per_segment = ps;
        let history: Vec<DVector<f64>> = (0..4)
            .map(|k| DVector::from_iterator(x.len(), x.iter().map(|v| v + k as f64)))
            .collect();
        let z = delay_embed(&history, spec.delay_depth).unwrap();
        prop_assert_eq!(z.len(), spec.lifted_dim());
        prop_assert_eq!(spec.selector() * z, history[3].clone());
        Ok(())
    });
    Outcome {
        id: 8,
        title: "lifting invariants",
        pass: invariants.is_ok(),
        detail: format!(
            "512 random cases: round trip {:.1e} (≤1e-12), rigid invariance {:.1e} (≤1e-12), C·θ(x) = x exact{}",
            worst[0].get(),
            worst[1].get(),
            invariants.err().map_or(String::new(), |e| format!("; {e}"))
        ),
        elapsed: start.elapsed(),
        limit: Some(Duration::from_secs(60)),
    }
    .finish();
}
