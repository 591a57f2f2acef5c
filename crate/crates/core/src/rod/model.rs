//! Spatial integration of the semi-discretized Kirchhoff rod.
//!
//! The shooting state carries the *total* internal force `n` and moment `m`
//! across a cross section, i.e. backbone plus the tendons crossing it. With
//! massless tendons routed at fixed offsets this wrench obeys the unloaded
//! rod balance laws and is continuous through tendon terminations, so the free
//! tip condition is simply `n(L) = m(L) = 0`. The backbone strain `u` follows
//! from the local constitutive balance
//!
//! `K u + Σ τᵢ rᵢ × b̂ᵢ = Rᵀ m`, with `bᵢ = e₃ + u × rᵢ`,
//!
//! solved by Newton at every evaluation point.
//!
//! Time derivatives enter through `y_t = c₀ y + y_h`, where `y_h` is a history
//! term supplied per RK4 stage. Storing the history at stage points (not just
//! at nodes) makes a static equilibrium an exact fixed point of the stepper.

use nalgebra::{Matrix3, Matrix6, Vector3, Vector6};

use super::config::RobotConfig;
use super::so3::{hat, orthonormalize};
use crate::error::{Error, Result};

pub(crate) const STAGES: usize = 4;
const E3: Vector3<f64> = Vector3::new(0.0, 0.0, 1.0);

/// Shooting state at one arclength station.
#[derive(Debug, Clone, Copy, PartialEq)]
pub(crate) struct Point {
    pub p: Vector3<f64>,
    pub r: Matrix3<f64>,
    pub n: Vector3<f64>,
    pub m: Vector3<f64>,
    pub q: Vector3<f64>,
    pub w: Vector3<f64>,
}

impl Point {
    pub fn base(n: Vector3<f64>, m: Vector3<f64>) -> Self {
        Self {
            p: Vector3::zeros(),
            r: Matrix3::identity(),
            n,
            m,
            q: Vector3::zeros(),
            w: Vector3::zeros(),
        }
    }

    #[inline]
    fn axpy(&self, h: f64, d: &Point) -> Point {
        Point {
            p: self.p + d.p * h,
            r: self.r + d.r * h,
            n: self.n + d.n * h,
            m: self.m + d.m * h,
            q: self.q + d.q * h,
            w: self.w + d.w * h,
        }
    }

    fn is_finite(&self) -> bool {
        self.p.iter().all(|x| x.is_finite())
            && self.r.iter().all(|x| x.is_finite())
            && self.n.iter().all(|x| x.is_finite())
            && self.m.iter().all(|x| x.is_finite())
            && self.q.iter().all(|x| x.is_finite())
            && self.w.iter().all(|x| x.is_finite())
    }
}

/// History terms `y_h` for q, ω and u at one stage point.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub(crate) struct StageTerms {
    pub q: Vector3<f64>,
    pub w: Vector3<f64>,
    pub u: Vector3<f64>,
}

/// Time-level data for one spatial sweep. `history == None` is the static problem.
#[derive(Clone, Copy)]
pub(crate) struct TimeLevel<'a> {
    pub c0: f64,
    pub history: Option<&'a [StageTerms]>,
}

impl TimeLevel<'_> {
    pub const STATIC: TimeLevel<'static> = TimeLevel {
        c0: 0.0,
        history: None,
    };
}

/// Everything recorded from one base-to-tip sweep.
#[derive(Debug, Clone)]
pub(crate) struct Sweep {
    pub points: Vec<Point>,
    /// Backbone strain at each node, evaluated with the tendons of the segment
    /// the node closes (node 0 uses segment 0).
    pub strains: Vec<Vector3<f64>>,
    /// (q, ω, u) at every stage point, `intervals × STAGES` entries.
    pub stages: Vec<StageTerms>,
}

impl Sweep {
    pub fn tip_residual(&self) -> Vector6<f64> {
        let tip = self.points.last().expect("non-empty sweep");
        Vector6::new(tip.n.x, tip.n.y, tip.n.z, tip.m.x, tip.m.y, tip.m.z)
    }
}

/// Precomputed section and routing constants for a robot configuration.
#[derive(Debug, Clone)]
pub struct RodModel {
    cfg: RobotConfig,
    stiffness: Matrix3<f64>,
    stiffness_inv: Matrix3<f64>,
    mass_per_length: f64,
    rot_inertia: Matrix3<f64>,
    offsets: Vec<Vector3<f64>>,
    offset_hats: Vec<Matrix3<f64>>,
    gravity_force: Vector3<f64>,
}

impl RodModel {
    pub fn new(cfg: &RobotConfig) -> Result<Self> {
        cfg.validate()?;
        let stiffness = cfg.stiffness();
        let offsets = cfg.tendon_offsets();
        Ok(Self {
            stiffness,
            stiffness_inv: stiffness.try_inverse().expect("diagonal positive stiffness"),
            mass_per_length: cfg.mass_per_length(),
            rot_inertia: cfg.rotational_inertia(),
            offset_hats: offsets.iter().map(hat).collect(),
            offsets,
            gravity_force: Vector3::from(cfg.gravity) * cfg.mass_per_length(),
            cfg: cfg.clone(),
        })
    }

    pub fn config(&self) -> &RobotConfig {
        &self.cfg
    }

    pub(crate) fn intervals(&self) -> usize {
        self.cfg.segments * self.cfg.nodes_per_segment
    }

    /// Solve the local constitutive balance for the backbone strain.
    pub(crate) fn strain(
        &self,
        r: &Matrix3<f64>,
        m: &Vector3<f64>,
        tensions: &[f64],
        guess: &Vector3<f64>,
        node: usize,
    ) -> Result<Vector3<f64>> {
        let target = r.transpose() * m;
        if tensions.iter().all(|&t| t == 0.0) {
            return Ok(self.stiffness_inv * target);
        }
        let mut u = *guess;
        for _ in 0..30 {
            let mut g = self.stiffness * u - target;
            let mut jac = self.stiffness;
            for ((&tau, rv), rh) in tensions.iter().zip(&self.offsets).zip(&self.offset_hats) {
                if tau == 0.0 {
                    continue;
                }
                let b = E3 + u.cross(rv);
                let len = b.norm();
                if len < 1e-12 {
                    return Err(Error::DegenerateTangent { node });
                }
                let bh = b / len;
                g += rv.cross(&bh) * tau;
                let proj = (Matrix3::identity() - bh * bh.transpose()) / len;
                jac -= rh * proj * rh * tau;
            }
            let du = jac
                .lu()
                .solve(&g)
                .ok_or(Error::DegenerateTangent { node })?;
            u -= du;
            if du.norm() <= 1e-14 * (1.0 + u.norm()) {
                return Ok(u);
            }
        }
        Ok(u)
    }

    #[inline]
    fn derivative(
        &self,
        y: &Point,
        u: &Vector3<f64>,
        c0: f64,
        hist: &StageTerms,
    ) -> Point {
        let u_t = u * c0 + hist.u;
        let q_t = y.q * c0 + hist.q;
        let w_t = y.w * c0 + hist.w;
        let p_s = y.r.column(2).into_owned();
        let jw = self.rot_inertia * y.w;
        Point {
            p: p_s,
            r: y.r * hat(u),
            n: y.r * (y.w.cross(&y.q) + q_t) * self.mass_per_length - self.gravity_force,
            m: -p_s.cross(&y.n) + y.r * (self.rot_inertia * w_t + y.w.cross(&jw)),
            q: -u.cross(&y.q) + y.w.cross(&E3),
            w: u_t - u.cross(&y.w),
        }
    }

    /// Integrate from the clamped base with the given base wrench.
    pub(crate) fn sweep(
        &self,
        tensions: &[f64],
        base_n: Vector3<f64>,
        base_m: Vector3<f64>,
        level: TimeLevel<'_>,
        time: f64,
    ) -> Result<Sweep> {
        let nps = self.cfg.nodes_per_segment;
        let tps = self.cfg.tendons_per_segment;
        let h = self.cfg.ds();
        let intervals = self.intervals();
        let zero = StageTerms::default();

        let mut points = Vec::with_capacity(intervals + 1);
        let mut strains = Vec::with_capacity(intervals + 1);
        let mut stages = Vec::with_capacity(intervals * STAGES);

        let mut y = Point::base(base_n, base_m);
        let seg0 = &tensions[..tps];
        let mut u = self.strain(&y.r, &y.m, seg0, &Vector3::zeros(), 0)?;
        points.push(y);
        strains.push(u);

        for seg in 0..self.cfg.segments {
            let tau = &tensions[seg * tps..(seg + 1) * tps];
            if seg > 0 {
                // Strain jumps where the previous segment's tendons terminate.
                u = self.strain(&y.r, &y.m, tau, &u, seg * nps)?;
            }
            for k in 0..nps {
                let idx = seg * nps + k;
                let hist = |s: usize| match level.history {
                    Some(hs) => hs[idx * STAGES + s],
                    None => zero,
                };

                let u1 = u;
                let h1 = hist(0);
                let k1 = self.derivative(&y, &u1, level.c0, &h1);

                let y2 = y.axpy(0.5 * h, &k1);
                let u2 = self.strain(&y2.r, &y2.m, tau, &u1, idx)?;
                let h2 = hist(1);
                let k2 = self.derivative(&y2, &u2, level.c0, &h2);

                let y3 = y.axpy(0.5 * h, &k2);
                let u3 = self.strain(&y3.r, &y3.m, tau, &u2, idx)?;
                let h3 = hist(2);
                let k3 = self.derivative(&y3, &u3, level.c0, &h3);

                let y4 = y.axpy(h, &k3);
                let u4 = self.strain(&y4.r, &y4.m, tau, &u3, idx + 1)?;
                let h4 = hist(3);
                let k4 = self.derivative(&y4, &u4, level.c0, &h4);

                stages.push(StageTerms { q: y.q, w: y.w, u: u1 });
                stages.push(StageTerms { q: y2.q, w: y2.w, u: u2 });
                stages.push(StageTerms { q: y3.q, w: y3.w, u: u3 });
                stages.push(StageTerms { q: y4.q, w: y4.w, u: u4 });

                let mut next = Point {
                    p: y.p + (k1.p + (k2.p + k3.p) * 2.0 + k4.p) * (h / 6.0),
                    r: y.r + (k1.r + (k2.r + k3.r) * 2.0 + k4.r) * (h / 6.0),
                    n: y.n + (k1.n + (k2.n + k3.n) * 2.0 + k4.n) * (h / 6.0),
                    m: y.m + (k1.m + (k2.m + k3.m) * 2.0 + k4.m) * (h / 6.0),
                    q: y.q + (k1.q + (k2.q + k3.q) * 2.0 + k4.q) * (h / 6.0),
                    w: y.w + (k1.w + (k2.w + k3.w) * 2.0 + k4.w) * (h / 6.0),
                };
                next.r = orthonormalize(&next.r);
                if !next.is_finite() {
                    return Err(Error::NumericalBlowup { time });
                }
                u = self.strain(&next.r, &next.m, tau, &u4, idx + 1)?;
                y = next;
                points.push(y);
                strains.push(u);
            }
        }
        Ok(Sweep {
            points,
            strains,
            stages,
        })
    }

    /// Damped Newton shooting on the base wrench.
    ///
    /// `jacobian` is reused when supplied and refreshed by finite differences
    /// when progress stalls; on return it holds the latest estimate.
    pub(crate) fn shoot(
        &self,
        tensions: &[f64],
        guess: Vector6<f64>,
        level: TimeLevel<'_>,
        time: f64,
        settings: &ShootingSettings,
        jacobian: &mut Option<Matrix6<f64>>,
    ) -> Result<(Vector6<f64>, Sweep)> {
        let run = |x: &Vector6<f64>| {
            self.sweep(
                tensions,
                Vector3::new(x[0], x[1], x[2]),
                Vector3::new(x[3], x[4], x[5]),
                level,
                time,
            )
        };
        let mut x = guess;
        let mut sweep = run(&x)?;
        let mut res = sweep.tip_residual();
        let mut norm = res.norm();
        let mut fresh = false;
        let mut lm_mu = 0.0;

        for iter in 0..settings.max_iterations {
            if norm <= settings.tolerance {
                return Ok((x, sweep));
            }
            let jac = match jacobian {
                Some(j) => *j,
                None => {
                    let j = self.fd_jacobian(&x, &res, &run)?;
                    fresh = true;
                    *jacobian = Some(j);
                    j
                }
            };
            let step = if lm_mu > 0.0 {
                let jt = jac.transpose();
                (jt * jac + Matrix6::identity() * lm_mu)
                    .lu()
                    .solve(&(-(jt * res)))
            } else {
                jac.lu().solve(&(-res))
            };

            let mut accepted = None;
            if let Some(step) = step {
                let mut lambda = 1.0;
                for _ in 0..12 {
                    let trial = x + step * lambda;
                    if let Ok(s) = run(&trial) {
                        let r = s.tip_residual();
                        if r.norm() < (1.0 - 1e-4 * lambda) * norm {
                            accepted = Some((trial, s, r));
                            break;
                        }
                    }
                    lambda *= 0.5;
                }
            }

            match accepted {
                Some((trial, s, r)) => {
                    let ratio = r.norm() / norm;
                    x = trial;
                    sweep = s;
                    res = r;
                    norm = res.norm();
                    lm_mu = 0.0;
                    // Slow contraction with a stale Jacobian: refresh it.
                    if ratio > 0.25 && !fresh {
                        *jacobian = None;
                    }
                    fresh = false;
                }
                None if !fresh => {
                    *jacobian = None;
                }
                None => {
                    let scale = jac.norm().powi(2).max(1e-300);
                    lm_mu = if lm_mu == 0.0 { 1e-6 * scale } else { lm_mu * 10.0 };
                    log::debug!("shooting iteration {iter}: falling back to LM (mu = {lm_mu:e})");
                }
            }
        }
        if norm <= settings.tolerance {
            Ok((x, sweep))
        } else {
            Err(Error::NonConvergence {
                iterations: settings.max_iterations,
                residual: norm,
            })
        }
    }

    fn fd_jacobian(
        &self,
        x: &Vector6<f64>,
        res: &Vector6<f64>,
        run: &impl Fn(&Vector6<f64>) -> Result<Sweep>,
    ) -> Result<Matrix6<f64>> {
        let mut jac = Matrix6::zeros();
        for j in 0..6 {
            let h = 1e-7 * (1.0 + x[j].abs());
            let mut xp = *x;
            xp[j] += h;
            let rp = run(&xp)?.tip_residual();
            jac.set_column(j, &((rp - res) / h));
        }
        Ok(jac)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ShootingSettings {
    pub tolerance: f64,
    pub max_iterations: usize,
}

impl Default for ShootingSettings {
    fn default() -> Self {
        Self {
            tolerance: 1e-8,
            max_iterations: 50,
        }
    }
}
