//! Independent oracles shared by the integration tests.
#![allow(dead_code)]

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use segkoop::datagen::{DatasetHeader, RampHoldSchedule, Trajectory, TrajectoryDataset};
use segkoop::rod::BackboneSample;
use segkoop::{RobotConfig, SegmentFrame, TendonTension};

/// Planar Kirchhoff BVP for one segment pulled by a single tendon at angle 0,
/// written with the backbone-only internal wrench and explicit distributed
/// tendon forces. Fixed-step RK4 with `steps` steps; bisection on the base
/// curvature until the tip moment balances the termination moment `τ d`.
/// Returns the tip position (x, z).
pub fn planar_oracle(cfg: &RobotConfig, tau: f64, steps: usize) -> (f64, f64) {
    let ei = cfg.youngs_modulus * cfg.second_moment();
    let d = cfg.tendon_offset;
    let len = cfg.length_per_segment;

    // y = [x, z, theta, nx, nz, m]
    let rhs = |y: &[f64; 6]| -> [f64; 6] {
        let (th, nx, nz, m) = (y[2], y[3], y[4], y[5]);
        let kappa = m / ei;
        let (s, c) = th.sin_cos();
        let (fx, fz) = (tau * kappa * c, -tau * kappa * s);
        [s, c, kappa, -fx, -fz, -(c * nx - s * nz)]
    };
    let shoot = |kappa0: f64| -> [f64; 6] {
        let h = len / steps as f64;
        let mut y = [0.0, 0.0, 0.0, 0.0, -tau, ei * kappa0];
        for _ in 0..steps {
            let add = |a: &[f64; 6], k: &[f64; 6], s: f64| {
                let mut o = *a;
                for i in 0..6 {
                    o[i] += s * k[i];
                }
                o
            };
            let k1 = rhs(&y);
            let k2 = rhs(&add(&y, &k1, h / 2.0));
            let k3 = rhs(&add(&y, &k2, h / 2.0));
            let k4 = rhs(&add(&y, &k3, h));
            for i in 0..6 {
                y[i] += h / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]);
            }
        }
        y
    };
    let residual = |k: f64| shoot(k)[5] - tau * d;
    let (mut lo, mut hi) = (0.0, 10.0 * tau * d / ei);
    assert!(residual(lo) * residual(hi) < 0.0, "bracket");
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if residual(lo) * residual(mid) <= 0.0 {
            hi = mid;
        } else {
            lo = mid;
        }
        if hi - lo <= 1e-17 * hi.abs() {
            break;
        }
    }
    let y = shoot(0.5 * (lo + hi));
    (y[0], y[1])
}

/// Strictly convex QP with a known feasible point.
pub struct RandomQp {
    pub p: DMatrix<f64>,
    pub q: DVector<f64>,
    pub g: DMatrix<f64>,
    pub l: DVector<f64>,
    pub u: DVector<f64>,
}

pub fn random_qp(rng: &mut ChaCha8Rng, n: usize, m: usize) -> RandomQp {
    let mut normal = || rng.random_range(-1.0..1.0);
    let a = DMatrix::from_fn(n, n, |_, _| normal());
    let p = a.transpose() * &a + DMatrix::identity(n, n) * 0.1;
    let q = DVector::from_fn(n, |_, _| 3.0 * normal());
    let g = DMatrix::from_fn(m, n, |_, _| normal());
    let x0 = DVector::from_fn(n, |_, _| 0.5 * normal());
    let gx = &g * &x0;
    let mut l = DVector::zeros(m);
    let mut u = DVector::zeros(m);
    for i in 0..m {
        let kind: f64 = rng.random_range(0.0..1.0);
        let lo = gx[i] - rng.random_range(0.0..0.5);
        let hi = gx[i] + rng.random_range(0.0..0.5);
        (l[i], u[i]) = if kind < 0.2 {
            (f64::NEG_INFINITY, hi)
        } else if kind < 0.4 {
            (lo, f64::INFINITY)
        } else if kind < 0.5 {
            (gx[i], gx[i])
        } else {
            (lo, hi)
        };
    }
    RandomQp { p, q, g, l, u }
}

/// Exhaustive active-set enumeration: every constraint is inactive, at its
/// lower bound or at its upper bound; each guess is a linear KKT solve. The
/// optimum is the primal-feasible, dual-sign-consistent candidate with the
/// lowest objective. Returns `(x, y)` with `y > 0` on upper bounds.
pub fn active_set_oracle(qp: &RandomQp) -> (DVector<f64>, DVector<f64>) {
    let n = qp.q.len();
    let m = qp.l.len();
    let mut best: Option<(f64, DVector<f64>, DVector<f64>)> = None;
    let total = 3usize.pow(m as u32);
    'outer: for code in 0..total {
        let mut c = code;
        let mut active = Vec::new();
        for i in 0..m {
            let side = c % 3;
            c /= 3;
            match side {
                1 if qp.l[i].is_finite() => active.push((i, qp.l[i], -1.0)),
                2 if qp.u[i].is_finite() && qp.u[i] != qp.l[i] => active.push((i, qp.u[i], 1.0)),
                0 => {}
                _ => continue 'outer,
            }
        }
        let k = active.len();
        let mut kkt = DMatrix::zeros(n + k, n + k);
        kkt.view_mut((0, 0), (n, n)).copy_from(&qp.p);
        let mut rhs = DVector::zeros(n + k);
        rhs.rows_mut(0, n).copy_from(&(-&qp.q));
        for (r, &(i, b, _)) in active.iter().enumerate() {
            for j in 0..n {
                kkt[(n + r, j)] = qp.g[(i, j)];
                kkt[(j, n + r)] = qp.g[(i, j)];
            }
            rhs[n + r] = b;
        }
        let Some(sol) = kkt.lu().solve(&rhs) else { continue };
        let x = sol.rows(0, n).into_owned();
        let gx = &qp.g * &x;
        let tol = 1e-9;
        if (0..m).any(|i| gx[i] < qp.l[i] - tol || gx[i] > qp.u[i] + tol) {
            continue;
        }
        let mut y = DVector::zeros(m);
        for (r, &(i, _, sign)) in active.iter().enumerate() {
            let v = sol[n + r];
            let equality = qp.l[i] == qp.u[i];
            if !equality && v * sign < -tol {
                continue 'outer;
            }
            y[i] = v;
        }
        let obj = 0.5 * x.dot(&(&qp.p * &x)) + qp.q.dot(&x);
        if best.as_ref().is_none_or(|b| obj < b.0 - 1e-12) {
            best = Some((obj, x, y));
        }
    }
    let (_, x, y) = best.expect("feasible by construction");
    (x, y)
}

/// Random stable `A₀ (n×n)`, `B₀ (n×m)`: spectral radius ≤ 0.9.
pub fn stable_system(rng: &mut ChaCha8Rng, n: usize, m: usize) -> (DMatrix<f64>, DMatrix<f64>) {
    let a = DMatrix::from_fn(n, n, |_, _| rng.random_range(-1.0..1.0));
    let radius = a
        .clone()
        .complex_eigenvalues()
        .iter()
        .map(|c| c.norm())
        .fold(0.0, f64::max);
    let a = a * (0.9 / radius);
    let b = DMatrix::from_fn(n, m, |_, _| rng.random_range(-1.0..1.0));
    (a, b)
}

/// Snapshot matrices of `z' = A₀z + B₀u` from random states and inputs.
pub fn linear_snapshots(
    a: &DMatrix<f64>,
    b: &DMatrix<f64>,
    count: usize,
    rng: &mut ChaCha8Rng,
) -> (DMatrix<f64>, DMatrix<f64>) {
    let (n, m) = (a.nrows(), b.ncols());
    let theta = DMatrix::from_fn(n + m, count, |_, _| rng.random_range(-1.0..1.0));
    let next = a * theta.rows(0, n) + b * theta.rows(n, m);
    (theta, next)
}

/// 1-segment dataset whose 2 stations (6 coordinates) evolve exactly as
/// `x' = A₀x + B₀u` from rest, with identity segment frames.
pub fn linear_plant_dataset(
    a: &DMatrix<f64>,
    b: &DMatrix<f64>,
    trajectories: usize,
    steps: usize,
    seed: u64,
) -> TrajectoryDataset {
    assert_eq!(a.nrows(), 6);
    assert_eq!(b.ncols(), 3);
    let cfg = RobotConfig::default();
    let mut ds = TrajectoryDataset::empty(&cfg, 2);
    ds.header = DatasetHeader {
        master_seed: seed,
        ..ds.header
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for t in 0..trajectories {
        let mut x = DVector::zeros(6);
        let mut samples = Vec::new();
        let mut inputs = Vec::new();
        for _ in 0..steps {
            samples.push(BackboneSample {
                positions: x.iter().copied().collect(),
                frames: vec![SegmentFrame::identity()],
            });
            let u: Vec<f64> = (0..3).map(|_| rng.random_range(0.0..8.0)).collect();
            x = a * &x + b * DVector::from_column_slice(&u);
            inputs.push(u);
        }
        samples.push(BackboneSample {
            positions: x.iter().copied().collect(),
            frames: vec![SegmentFrame::identity()],
        });
        ds.trajectories.push(Trajectory {
            index: t,
            seed,
            schedule: RampHoldSchedule {
                waypoints: vec![TendonTension::zeros(3)],
                ramp: 1.0,
                hold: 0.0,
                seed,
            },
            samples,
            inputs,
        });
    }
    ds
}
