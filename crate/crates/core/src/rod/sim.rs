use nalgebra::{Matrix6, Vector3, Vector6};

use super::model::{RodModel, ShootingSettings, StageTerms, Sweep, TimeLevel};
use super::state::{NodeState, RodState, TendonTension};
use crate::error::{Error, Result};

fn to_state(model: &RodModel, sweep: &Sweep, time: f64) -> RodState {
    let cfg = model.config();
    RodState {
        time,
        segments: cfg.segments,
        nodes_per_segment: cfg.nodes_per_segment,
        length_per_segment: cfg.length_per_segment,
        nodes: sweep
            .points
            .iter()
            .zip(&sweep.strains)
            .map(|(pt, u)| NodeState {
                p: pt.p,
                r: pt.r,
                v: *u,
                q: pt.q,
                omega: pt.w,
                force: pt.n,
                moment: pt.m,
            })
            .collect(),
    }
}

fn base_wrench(state: &RodState) -> Vector6<f64> {
    let n = &state.nodes[0];
    Vector6::new(
        n.force.x, n.force.y, n.force.z, n.moment.x, n.moment.y, n.moment.z,
    )
}

/// Static equilibrium under constant tensions (all time derivatives zero).
pub fn static_solve(
    tensions: &TendonTension,
    model: &RodModel,
    guess: Option<&RodState>,
) -> Result<RodState> {
    static_solve_with(tensions, model, guess, &ShootingSettings::default())
}

pub fn static_solve_with(
    tensions: &TendonTension,
    model: &RodModel,
    guess: Option<&RodState>,
    settings: &ShootingSettings,
) -> Result<RodState> {
    let tau = tensions.for_config(model.config())?.as_slice();
    let x0 = guess.map(base_wrench).unwrap_or_else(Vector6::zeros);
    let mut jac = None;
    let (_, sweep) = model.shoot(tau, x0, TimeLevel::STATIC, 0.0, settings, &mut jac)?;
    Ok(to_state(model, &sweep, 0.0))
}

/// BDF-α weights: `y_t(tᵢ) = c₀ yᵢ + c₁ yᵢ₋₁ + c₂ yᵢ₋₂ + d₁ y_t(tᵢ₋₁)`.
/// `α = 0` is BDF2.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BdfCoefficients {
    pub c0: f64,
    pub c1: f64,
    pub c2: f64,
    pub d1: f64,
}

impl BdfCoefficients {
    pub fn new(dt: f64, alpha: f64) -> Self {
        Self {
            c0: (1.5 + alpha) / (dt * (1.0 + alpha)),
            c1: -2.0 / dt,
            c2: (0.5 + alpha) / (dt * (1.0 + alpha)),
            d1: alpha / (1.0 + alpha),
        }
    }
}

/// Time-stepping history for the implicit scheme.
#[derive(Debug, Clone)]
pub struct StepperState {
    coeffs: BdfCoefficients,
    prev: Vec<StageTerms>,
    prev2: Vec<StageTerms>,
    prev_rate: Vec<StageTerms>,
    base_guess: Vector6<f64>,
    jacobian: Option<Matrix6<f64>>,
    time: f64,
    pub settings: ShootingSettings,
}

impl StepperState {
    /// Bootstrap from a state at rest under `tensions`: both history levels
    /// equal the rest state and all rates are zero.
    pub fn from_rest(model: &RodModel, state: &RodState, tensions: &TendonTension) -> Result<Self> {
        let cfg = model.config();
        if state.nodes.len() != cfg.node_count() {
            return Err(Error::DimensionMismatch {
                context: "rod state nodes",
                expected: cfg.node_count(),
                found: state.nodes.len(),
            });
        }
        let tau = tensions.for_config(cfg)?.as_slice();
        let guess = base_wrench(state);
        let sweep = model.sweep(
            tau,
            Vector3::new(guess[0], guess[1], guess[2]),
            Vector3::new(guess[3], guess[4], guess[5]),
            TimeLevel::STATIC,
            state.time,
        )?;
        let stages = sweep.stages;
        Ok(Self {
            coeffs: BdfCoefficients::new(cfg.dt, cfg.bdf_alpha),
            prev2: stages.clone(),
            prev_rate: vec![StageTerms::default(); stages.len()],
            prev: stages,
            base_guess: guess,
            jacobian: None,
            time: state.time,
            settings: ShootingSettings::default(),
        })
    }

    pub fn time(&self) -> f64 {
        self.time
    }

    pub fn coefficients(&self) -> BdfCoefficients {
        self.coeffs
    }

    fn history_terms(&self) -> Vec<StageTerms> {
        let c = self.coeffs;
        self.prev
            .iter()
            .zip(&self.prev2)
            .zip(&self.prev_rate)
            .map(|((a, b), r)| StageTerms {
                q: a.q * c.c1 + b.q * c.c2 + r.q * c.d1,
                w: a.w * c.c1 + b.w * c.c2 + r.w * c.d1,
                u: a.u * c.c1 + b.u * c.c2 + r.u * c.d1,
            })
            .collect()
    }
}

/// Advance one time step with `tensions` held over the step.
pub fn dynamic_step(
    state: &RodState,
    tensions: &TendonTension,
    model: &RodModel,
    stepper: &mut StepperState,
) -> Result<RodState> {
    if (state.time - stepper.time).abs() > 1e-9 * (1.0 + state.time.abs()) {
        return Err(Error::InvalidArgument(format!(
            "stepper is at t = {} but state is at t = {}",
            stepper.time, state.time
        )));
    }
    let cfg = model.config();
    let tau = tensions.for_config(cfg)?.as_slice();
    let time = stepper.time + cfg.dt;
    let hist = stepper.history_terms();
    let c0 = stepper.coeffs.c0;
    let level = TimeLevel {
        c0,
        history: Some(&hist),
    };
    let (x, sweep) = model.shoot(
        tau,
        stepper.base_guess,
        level,
        time,
        &stepper.settings,
        &mut stepper.jacobian,
    )?;
    let next = to_state(model, &sweep, time);

    let rates: Vec<StageTerms> = sweep
        .stages
        .iter()
        .zip(&hist)
        .map(|(y, h)| StageTerms {
            q: y.q * c0 + h.q,
            w: y.w * c0 + h.w,
            u: y.u * c0 + h.u,
        })
        .collect();
    stepper.prev2 = std::mem::replace(&mut stepper.prev, sweep.stages);
    stepper.prev_rate = rates;
    stepper.base_guess = x;
    stepper.time = time;
    Ok(next)
}

/// A rod instance together with its stepper history.
#[derive(Debug, Clone)]
pub struct Simulator {
    model: RodModel,
    state: RodState,
    stepper: StepperState,
}

impl Simulator {
    /// Start at static equilibrium under `tensions`.
    pub fn at_equilibrium(model: RodModel, tensions: &TendonTension) -> Result<Self> {
        let state = static_solve(tensions, &model, None)?;
        let stepper = StepperState::from_rest(&model, &state, tensions)?;
        Ok(Self {
            model,
            state,
            stepper,
        })
    }

    pub fn step(&mut self, tensions: &TendonTension) -> Result<&RodState> {
        self.state = dynamic_step(&self.state, tensions, &self.model, &mut self.stepper)?;
        Ok(&self.state)
    }

    pub fn state(&self) -> &RodState {
        &self.state
    }

    pub fn model(&self) -> &RodModel {
        &self.model
    }
}
