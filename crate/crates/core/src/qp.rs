//! Dense ADMM solver for `min ½ zᵀPz + qᵀz  s.t.  l ≤ Gz ≤ u`.
//!
//! Operator splitting in the style of OSQP: Ruiz equilibration, a reduced
//! `(P + σI + Gᵀ diag(ρ) G)` Cholesky factor refreshed only when `ρ` adapts,
//! over-relaxation, a primal-infeasibility certificate, and an optional
//! polishing step that solves the equality-constrained KKT system on the
//! guessed active set.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct QpProblem {
    pub p: DMatrix<f64>,
    pub q: DVector<f64>,
    pub g: DMatrix<f64>,
    pub l: DVector<f64>,
    pub u: DVector<f64>,
}

impl QpProblem {
    pub fn new(
        p: DMatrix<f64>,
        q: DVector<f64>,
        g: DMatrix<f64>,
        l: DVector<f64>,
        u: DVector<f64>,
    ) -> Result<Self> {
        let qp = Self { p, q, g, l, u };
        qp.validate()?;
        Ok(qp)
    }

    /// Problem without constraints.
    pub fn unconstrained(p: DMatrix<f64>, q: DVector<f64>) -> Result<Self> {
        let n = q.len();
        Self::new(p, q, DMatrix::zeros(0, n), DVector::zeros(0), DVector::zeros(0))
    }

    pub fn variables(&self) -> usize {
        self.q.len()
    }

    pub fn constraints(&self) -> usize {
        self.l.len()
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.q.len();
        let m = self.l.len();
        let dims = [
            ("P rows", n, self.p.nrows()),
            ("P cols", n, self.p.ncols()),
            ("G cols", n, self.g.ncols()),
            ("G rows", m, self.g.nrows()),
            ("upper bounds", m, self.u.len()),
        ];
        for (context, expected, found) in dims {
            if expected != found {
                return Err(Error::DimensionMismatch {
                    context,
                    expected,
                    found,
                });
            }
        }
        let asym = (&self.p - self.p.transpose()).amax();
        if asym > 1e-10 * self.p.amax().max(1.0) {
            return Err(Error::InvalidArgument(format!("P is not symmetric ({asym:e})")));
        }
        for i in 0..m {
            if !(self.l[i] <= self.u[i]) || self.l[i] == f64::INFINITY || self.u[i] == f64::NEG_INFINITY {
                return Err(Error::InfeasibleBounds(format!(
                    "constraint {i}: [{}, {}]",
                    self.l[i], self.u[i]
                )));
            }
        }
        Ok(())
    }

    pub fn objective(&self, x: &DVector<f64>) -> f64 {
        0.5 * x.dot(&(&self.p * x)) + self.q.dot(x)
    }

    /// Stationarity, primal feasibility and complementarity residuals (∞-norm)
    /// of a primal-dual pair.
    pub fn kkt_residuals(&self, x: &DVector<f64>, y: &DVector<f64>) -> KktResiduals {
        let gx = &self.g * x;
        let stationarity = (&self.p * x + &self.q + self.g.transpose() * y).amax();
        let mut primal: f64 = 0.0;
        let mut comp: f64 = 0.0;
        for i in 0..self.l.len() {
            primal = primal.max(self.l[i] - gx[i]).max(gx[i] - self.u[i]);
            // y⁺ pairs with the upper bound, y⁻ with the lower.
            let (yp, ym) = (y[i].max(0.0), (-y[i]).max(0.0));
            if yp > 0.0 {
                comp = comp.max(yp * (self.u[i] - gx[i]).abs().min(1.0 / f64::EPSILON));
            }
            if ym > 0.0 {
                comp = comp.max(ym * (gx[i] - self.l[i]).abs().min(1.0 / f64::EPSILON));
            }
        }
        KktResiduals {
            stationarity,
            primal: primal.max(0.0),
            complementarity: comp,
        }
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(&QpDump::from(self))?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let d: QpDump = serde_json::from_str(s)?;
        d.into_problem()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KktResiduals {
    pub stationarity: f64,
    pub primal: f64,
    pub complementarity: f64,
}

impl KktResiduals {
    pub fn max(&self) -> f64 {
        self.stationarity.max(self.primal).max(self.complementarity)
    }
}

/// Debug dump: row-major matrices; infinite bounds as `null`.
#[derive(Serialize, Deserialize)]
struct QpDump {
    #[serde(rename = "P")]
    p: Vec<Vec<f64>>,
    q: Vec<f64>,
    #[serde(rename = "G")]
    g: Vec<Vec<f64>>,
    l: Vec<Option<f64>>,
    u: Vec<Option<f64>>,
}

impl From<&QpProblem> for QpDump {
    fn from(qp: &QpProblem) -> Self {
        let rows = |m: &DMatrix<f64>| -> Vec<Vec<f64>> {
            m.row_iter().map(|r| r.iter().copied().collect()).collect()
        };
        let bound = |v: &DVector<f64>| v.iter().map(|x| x.is_finite().then_some(*x)).collect();
        Self {
            p: rows(&qp.p),
            q: qp.q.iter().copied().collect(),
            g: rows(&qp.g),
            l: bound(&qp.l),
            u: bound(&qp.u),
        }
    }
}

impl QpDump {
    fn into_problem(self) -> Result<QpProblem> {
        let n = self.q.len();
        let m = self.l.len();
        let mat = |rows: Vec<Vec<f64>>, r: usize| -> Result<DMatrix<f64>> {
            if rows.len() != r || rows.iter().any(|row| row.len() != n) {
                return Err(Error::Corrupt("QP dump matrix shape".into()));
            }
            Ok(DMatrix::from_row_iterator(r, n, rows.into_iter().flatten()))
        };
        QpProblem::new(
            mat(self.p, n)?,
            DVector::from_vec(self.q),
            mat(self.g, m)?,
            DVector::from_iterator(m, self.l.into_iter().map(|x| x.unwrap_or(f64::NEG_INFINITY))),
            DVector::from_iterator(self.u.len(), self.u.into_iter().map(|x| x.unwrap_or(f64::INFINITY))),
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct QpSettings {
    pub rho: f64,
    pub sigma: f64,
    pub alpha: f64,
    pub eps_abs: f64,
    pub eps_rel: f64,
    pub eps_prim_inf: f64,
    pub max_iter: usize,
    pub scaling_iterations: usize,
    pub adaptive_rho: bool,
    /// Check termination every this many iterations.
    pub check_interval: usize,
    pub polish: bool,
}

impl Default for QpSettings {
    fn default() -> Self {
        Self {
            rho: 0.1,
            sigma: 1e-6,
            alpha: 1.6,
            eps_abs: 1e-6,
            eps_rel: 1e-6,
            eps_prim_inf: 1e-5,
            max_iter: 4000,
            scaling_iterations: 10,
            adaptive_rho: true,
            check_interval: 5,
            polish: true,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QpStatus {
    Solved,
    MaxIter,
    PrimalInfeasible,
}

impl std::fmt::Display for QpStatus {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Solved => "solved",
            Self::MaxIter => "max_iter",
            Self::PrimalInfeasible => "primal_infeasible",
        })
    }
}

/// Primal `x` and dual `y` (positive on active upper bounds).
#[derive(Debug, Clone, PartialEq)]
pub struct QpSolution {
    pub x: DVector<f64>,
    pub y: DVector<f64>,
    pub status: QpStatus,
    pub iterations: usize,
    pub primal_residual: f64,
    pub dual_residual: f64,
    pub polished: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct WarmStart {
    pub x: DVector<f64>,
    pub y: DVector<f64>,
}

impl From<&QpSolution> for WarmStart {
    fn from(s: &QpSolution) -> Self {
        Self {
            x: s.x.clone(),
            y: s.y.clone(),
        }
    }
}

struct Scaled {
    p: DMatrix<f64>,
    q: DVector<f64>,
    g: DMatrix<f64>,
    l: DVector<f64>,
    u: DVector<f64>,
    d: DVector<f64>,
    e: DVector<f64>,
    c: f64,
}

fn col_amax(m: &DMatrix<f64>, j: usize) -> f64 {
    m.column(j).amax()
}

/// Modified Ruiz equilibration of the KKT matrix plus cost scaling.
fn ruiz(qp: &QpProblem, iterations: usize) -> Scaled {
    let n = qp.variables();
    let m = qp.constraints();
    let mut p = qp.p.clone();
    let mut q = qp.q.clone();
    let mut g = qp.g.clone();
    let mut d = DVector::from_element(n, 1.0);
    let mut e = DVector::from_element(m, 1.0);
    let mut c = 1.0;
    let clip = |v: f64| if v < 1e-4 { 1.0 } else { v.min(1e4) };
    for _ in 0..iterations {
        let dk = DVector::from_fn(n, |j, _| {
            1.0 / clip(col_amax(&p, j).max(if m > 0 { col_amax(&g, j) } else { 0.0 })).sqrt()
        });
        let ek = DVector::from_fn(m, |i, _| 1.0 / clip(g.row(i).amax()).sqrt());
        for j in 0..n {
            p.column_mut(j).scale_mut(dk[j]);
            p.row_mut(j).scale_mut(dk[j]);
            g.column_mut(j).scale_mut(dk[j]);
            q[j] *= dk[j];
        }
        for i in 0..m {
            g.row_mut(i).scale_mut(ek[i]);
        }
        d.component_mul_assign(&dk);
        e.component_mul_assign(&ek);

        let mean_col = if n > 0 {
            (0..n).map(|j| col_amax(&p, j)).sum::<f64>() / n as f64
        } else {
            0.0
        };
        let gamma = 1.0 / clip(mean_col.max(q.amax()));
        p *= gamma;
        q *= gamma;
        c *= gamma;
    }
    let l = qp.l.component_mul(&e);
    let u = qp.u.component_mul(&e);
    Scaled { p, q, g, l, u, d, e, c }
}

/// Per-constraint ρ: large for equalities, tiny for free rows.
fn rho_vector(s: &Scaled, rho: f64) -> DVector<f64> {
    DVector::from_fn(s.l.len(), |i, _| {
        let (l, u) = (s.l[i], s.u[i]);
        if l == f64::NEG_INFINITY && u == f64::INFINITY {
            1e-6
        } else if (u - l).abs() < 1e-8 {
            1e3 * rho
        } else {
            rho
        }
    })
}

fn factor(s: &Scaled, sigma: f64, rho: &DVector<f64>) -> Result<Cholesky<f64, Dyn>> {
    let n = s.q.len();
    let mut k = &s.p + DMatrix::identity(n, n) * sigma;
    let mut gr = s.g.clone();
    for (i, r) in rho.iter().enumerate() {
        gr.row_mut(i).scale_mut(*r);
    }
    k += s.g.transpose() * gr;
    Cholesky::new(k).ok_or(Error::NotPositiveSemidefinite)
}

fn clamp(v: &DVector<f64>, l: &DVector<f64>, u: &DVector<f64>) -> DVector<f64> {
    DVector::from_fn(v.len(), |i, _| v[i].max(l[i]).min(u[i]))
}

/// Solve `qp` from `warm` (or zero) and return the best iterate.
pub fn solve_qp(qp: &QpProblem, settings: &QpSettings, warm: Option<&WarmStart>) -> Result<QpSolution> {
    qp.validate()?;
    let n = qp.variables();
    let m = qp.constraints();
    let s = ruiz(qp, settings.scaling_iterations);
    let sigma = settings.sigma;
    if Cholesky::new(&s.p + DMatrix::identity(n, n) * sigma).is_none() {
        return Err(Error::NotPositiveSemidefinite);
    }
    let mut rho_scalar = settings.rho;
    let mut rho = rho_vector(&s, rho_scalar);
    let mut chol = factor(&s, sigma, &rho)?;

    // Scaled iterates.
    let (mut x, mut y) = match warm {
        Some(w) if w.x.len() == n && w.y.len() == m => (
            w.x.component_div(&s.d),
            w.y.component_div(&s.e) * s.c,
        ),
        _ => (DVector::zeros(n), DVector::zeros(m)),
    };
    let mut z = clamp(&(&s.g * &x), &s.l, &s.u);
    let alpha = settings.alpha;

    let unscale_x = |x: &DVector<f64>| x.component_mul(&s.d);
    let unscale_y = |y: &DVector<f64>| y.component_mul(&s.e) / s.c;

    let mut status = QpStatus::MaxIter;
    let mut iterations = settings.max_iter;
    let mut prim_res = f64::INFINITY;
    let mut dual_res = f64::INFINITY;
    for it in 1..=settings.max_iter {
        let y_prev = y.clone();
        let rz: DVector<f64> = rho.component_mul(&z) - &y;
        let rhs = &x * sigma - &s.q + s.g.transpose() * rz;
        let xt = chol.solve(&rhs);
        let zt = &s.g * &xt;
        x = &xt * alpha + &x * (1.0 - alpha);
        let zr = &zt * alpha + &z * (1.0 - alpha);
        let z_new = clamp(&(&zr + y.component_div(&rho)), &s.l, &s.u);
        y += rho.component_mul(&(&zr - &z_new));
        z = z_new;

        if it % settings.check_interval.max(1) != 0 && it != settings.max_iter {
            continue;
        }
        // Residuals in original units.
        let gx = (&s.g * &x).component_div(&s.e);
        let zu = z.component_div(&s.e);
        let px = (&s.p * &x).component_div(&s.d) / s.c;
        let gty = (s.g.transpose() * &y).component_div(&s.d) / s.c;
        let qu = s.q.component_div(&s.d) / s.c;
        prim_res = if m > 0 { (&gx - &zu).amax() } else { 0.0 };
        dual_res = (&px + &qu + &gty).amax();
        let eps_prim = settings.eps_abs
            + settings.eps_rel * if m > 0 { gx.amax().max(zu.amax()) } else { 0.0 };
        let eps_dual = settings.eps_abs
            + settings.eps_rel * px.amax().max(gty.amax()).max(qu.amax());
        if prim_res <= eps_prim && dual_res <= eps_dual {
            status = QpStatus::Solved;
            iterations = it;
            break;
        }

        if m > 0 {
            let dy = &y - &y_prev;
            let dy_u = dy.component_mul(&s.e);
            let norm = dy_u.amax();
            if norm > 0.0 {
                let gtdy = (s.g.transpose() * &dy).component_div(&s.d).amax();
                let mut support = 0.0;
                for i in 0..m {
                    support += if dy[i] > 0.0 {
                        s.u[i] * dy[i]
                    } else if dy[i] < 0.0 {
                        s.l[i] * dy[i]
                    } else {
                        0.0
                    };
                }
                if gtdy <= settings.eps_prim_inf * norm && support < -settings.eps_prim_inf * norm {
                    status = QpStatus::PrimalInfeasible;
                    iterations = it;
                    break;
                }
            }
        }

        if settings.adaptive_rho && m > 0 && it % 25 == 0 {
            let pn = prim_res / gx.amax().max(zu.amax()).max(1e-30);
            let dn = dual_res / px.amax().max(gty.amax()).max(qu.amax()).max(1e-30);
            let proposed = (rho_scalar * (pn / dn.max(1e-30)).sqrt()).clamp(1e-6, 1e6);
            if proposed > 5.0 * rho_scalar || proposed < 0.2 * rho_scalar {
                rho_scalar = proposed;
                rho = rho_vector(&s, rho_scalar);
                chol = factor(&s, sigma, &rho)?;
            }
        }
    }

    let mut sol = QpSolution {
        x: unscale_x(&x),
        y: unscale_y(&y),
        status,
        iterations,
        primal_residual: prim_res,
        dual_residual: dual_res,
        polished: false,
    };
    if settings.polish && status == QpStatus::Solved {
        if let Some((px, py)) = polish(qp, &sol.x, &sol.y) {
            let before = qp.kkt_residuals(&sol.x, &sol.y).max();
            let after = qp.kkt_residuals(&px, &py);
            if after.max() <= before {
                sol.primal_residual = after.primal;
                sol.dual_residual = after.stationarity;
                sol.x = px;
                sol.y = py;
                sol.polished = true;
            }
        }
    }
    Ok(sol)
}

/// Solve the KKT system with the active set guessed from `(x, y)`. Constraints
/// whose multipliers come out with the wrong sign are dropped and the system
/// re-solved; `None` if that does not settle or the system is singular.
fn polish(qp: &QpProblem, x: &DVector<f64>, y: &DVector<f64>) -> Option<(DVector<f64>, DVector<f64>)> {
    let n = qp.variables();
    let gx = &qp.g * x;
    let mut active: Vec<(usize, f64)> = Vec::new();
    for i in 0..qp.constraints() {
        if gx[i] - qp.l[i] < -y[i] {
            active.push((i, qp.l[i]));
        } else if qp.u[i] - gx[i] < y[i] {
            active.push((i, qp.u[i]));
        }
    }
    for _ in 0..=active.len() {
        let sol = solve_reduced_kkt(qp, &active)?;
        let mut py = DVector::zeros(qp.constraints());
        let mut keep = Vec::with_capacity(active.len());
        for (r, &(i, b)) in active.iter().enumerate() {
            let v = sol[n + r];
            let wrong = if qp.l[i] == qp.u[i] {
                false
            } else if b == qp.l[i] {
                v > 1e-12
            } else {
                v < -1e-12
            };
            if !wrong {
                keep.push((i, b));
                py[i] = v;
            }
        }
        if keep.len() == active.len() {
            return Some((sol.rows(0, n).into_owned(), py));
        }
        active = keep;
    }
    None
}

/// `[P Gₐᵀ; Gₐ 0] [x; yₐ] = [−q; bₐ]` through a δ-regularized factor and
/// iterative refinement, so dependent active rows stay solvable.
fn solve_reduced_kkt(qp: &QpProblem, active: &[(usize, f64)]) -> Option<DVector<f64>> {
    let n = qp.variables();
    let k = active.len();
    let mut kkt = DMatrix::zeros(n + k, n + k);
    kkt.view_mut((0, 0), (n, n)).copy_from(&qp.p);
    let mut rhs = DVector::zeros(n + k);
    rhs.rows_mut(0, n).copy_from(&(-&qp.q));
    for (r, &(i, b)) in active.iter().enumerate() {
        let row = qp.g.row(i);
        kkt.view_mut((n + r, 0), (1, n)).copy_from(&row);
        kkt.view_mut((0, n + r), (n, 1)).copy_from(&row.transpose());
        rhs[n + r] = b;
    }
    let delta = 1e-7;
    let mut reg = kkt.clone();
    for i in 0..n + k {
        reg[(i, i)] += if i < n { delta } else { -delta };
    }
    let lu = reg.lu();
    let mut sol = lu.solve(&rhs)?;
    for _ in 0..5 {
        sol += lu.solve(&(&rhs - &kkt * &sol))?;
    }
    sol.iter().all(|v| v.is_finite()).then_some(sol)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unconstrained_minimum() {
        // (z − 1)² = z² − 2z + 1
        let qp = QpProblem::unconstrained(DMatrix::from_element(1, 1, 2.0), DVector::from_element(1, -2.0)).unwrap();
        let s = solve_qp(&qp, &QpSettings::default(), None).unwrap();
        assert_eq!(s.status, QpStatus::Solved);
        assert!((s.x[0] - 1.0).abs() < 1e-8);
    }

    #[test]
    fn active_lower_bound() {
        let qp = QpProblem::new(
            DMatrix::from_element(1, 1, 1.0),
            DVector::zeros(1),
            DMatrix::from_element(1, 1, 1.0),
            DVector::from_element(1, 2.0),
            DVector::from_element(1, f64::INFINITY),
        )
        .unwrap();
        let s = solve_qp(&qp, &QpSettings::default(), None).unwrap();
        assert_eq!(s.status, QpStatus::Solved);
        assert!((s.x[0] - 2.0).abs() < 1e-9);
        assert!((s.y[0] + 2.0).abs() < 1e-8);
    }

    #[test]
    fn detects_infeasibility() {
        // z ≥ 1 and z ≤ −1 through two rows.
        let qp = QpProblem::new(
            DMatrix::from_element(1, 1, 1.0),
            DVector::zeros(1),
            DMatrix::from_column_slice(2, 1, &[1.0, 1.0]),
            DVector::from_vec(vec![1.0, f64::NEG_INFINITY]),
            DVector::from_vec(vec![f64::INFINITY, -1.0]),
        )
        .unwrap();
        let s = solve_qp(&qp, &QpSettings::default(), None).unwrap();
        assert_eq!(s.status, QpStatus::PrimalInfeasible);
    }

    #[test]
    fn rejects_indefinite_and_bad_bounds() {
        let p = DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, -1.0]);
        let qp = QpProblem::unconstrained(p, DVector::zeros(2)).unwrap();
        assert!(matches!(solve_qp(&qp, &QpSettings::default(), None), Err(Error::NotPositiveSemidefinite)));
        let bad = QpProblem::new(
            DMatrix::identity(1, 1),
            DVector::zeros(1),
            DMatrix::identity(1, 1),
            DVector::from_element(1, 1.0),
            DVector::from_element(1, 0.0),
        );
        assert!(matches!(bad, Err(Error::InfeasibleBounds(_))));
    }

    #[test]
    fn json_dump_round_trip() {
        let qp = QpProblem::new(
            DMatrix::from_row_slice(2, 2, &[2.0, 0.5, 0.5, 1.0]),
            DVector::from_vec(vec![1.0, -1.0]),
            DMatrix::from_row_slice(1, 2, &[1.0, 1.0]),
            DVector::from_element(1, f64::NEG_INFINITY),
            DVector::from_element(1, 3.0),
        )
        .unwrap();
        let back = QpProblem::from_json(&qp.to_json().unwrap()).unwrap();
        assert_eq!(back, qp);
    }
}
