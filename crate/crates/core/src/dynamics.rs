//! Discrete-time leaky-integrator dynamics.
//!
//! Each free unit moves a fraction `epsilon` of the way toward the drive
//! evaluated at a noise-corrupted copy of the state:
//!
//! ```text
//! s_{t+1} = s_t + eps (R(s_t + eta_t) - s_t),   eta_t ~ N(0, sigma^2 I)
//! ```
//!
//! Since `R(s) = s - dE/ds`, this is gradient descent on `E` with injected
//! noise, i.e. a Langevin chain. All units read `s_t` and write `s_{t+1}`
//! synchronously.

use std::io::Write;

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::fmt::float;
use crate::model::{self, ClampMode, ModelError, NetworkParams, StateVector};

/// RNG used for every stochastic step. Seeded streams are reproducible across platforms.
pub type NoiseRng = ChaCha8Rng;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum DynamicsError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("invalid dynamics config: {field} {reason}")]
    InvalidConfig { field: &'static str, reason: String },
    #[error("no fixed point after {steps} steps (last step size {residual:e})")]
    NonConvergence {
        steps: usize,
        residual: f64,
        last_state: Box<StateVector>,
    },
    #[error("trajectory has no noise records")]
    MissingNoiseLog,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DynamicsConfig {
    pub epsilon: f64,
    pub sigma: f64,
    pub tolerance: f64,
    pub max_steps: usize,
    pub seed: u64,
}

impl Default for DynamicsConfig {
    fn default() -> Self {
        DynamicsConfig {
            epsilon: 0.05,
            sigma: 0.0,
            tolerance: 1e-10,
            max_steps: 100_000,
            seed: 42,
        }
    }
}

impl DynamicsConfig {
    pub fn validate(&self) -> Result<(), DynamicsError> {
        let bad = |field, reason: &str| {
            Err(DynamicsError::InvalidConfig {
                field,
                reason: reason.to_string(),
            })
        };
        if !(self.epsilon > 0.0 && self.epsilon <= 1.0) {
            return bad("epsilon", "must lie in (0, 1]");
        }
        if !(self.sigma >= 0.0 && self.sigma.is_finite()) {
            return bad("sigma", "must be finite and >= 0");
        }
        if !(self.tolerance > 0.0 && self.tolerance.is_finite()) {
            return bad("tolerance", "must be finite and > 0");
        }
        if self.max_steps == 0 {
            return bad("max_steps", "must be positive");
        }
        Ok(())
    }

    pub fn rng(&self) -> NoiseRng {
        NoiseRng::seed_from_u64(self.seed)
    }

    pub fn noise_free(mut self) -> Self {
        self.sigma = 0.0;
        self
    }
}

/// One Gaussian draw per unit. `sigma == 0` returns zeros without touching the RNG.
pub fn draw_noise(n: usize, sigma: f64, rng: &mut NoiseRng) -> Vec<f64> {
    if sigma == 0.0 {
        return vec![0.0; n];
    }
    let normal = Normal::new(0.0, sigma).expect("sigma validated as finite and non-negative");
    (0..n).map(|_| normal.sample(rng)).collect()
}

/// `s + eta` on every unit, clamped or not.
pub fn corrupt(state: &StateVector, sigma: f64, rng: &mut NoiseRng) -> StateVector {
    let noise = draw_noise(state.len(), sigma, rng);
    let values = state.values().iter().zip(&noise).map(|(s, e)| s + e).collect();
    StateVector::new(values, state.clamp_modes().to_vec()).expect("lengths match")
}

/// Scratch buffers for allocation-free stepping.
struct Stepper {
    corrupted: Vec<f64>,
    rates: Vec<f64>,
    input: Vec<f64>,
}

impl Stepper {
    fn new(n: usize) -> Self {
        Stepper {
            corrupted: vec![0.0; n],
            rates: vec![0.0; n],
            input: vec![0.0; n],
        }
    }

    /// Writes `s_{t+1}` into `next` given `noise` (None means zero noise).
    fn advance(
        &mut self,
        params: &NetworkParams,
        values: &[f64],
        clamp: &[ClampMode],
        epsilon: f64,
        noise: Option<&[f64]>,
        next: &mut [f64],
    ) {
        let nl = params.nonlinearity();
        match noise {
            Some(eta) => {
                for ((c, s), e) in self.corrupted.iter_mut().zip(values).zip(eta) {
                    *c = s + e;
                }
            }
            None => self.corrupted.copy_from_slice(values),
        }
        for (r, &c) in self.rates.iter_mut().zip(&self.corrupted) {
            *r = nl.rho(c);
        }
        self.input.copy_from_slice(params.biases());
        params.accumulate_coupling(&self.rates, &mut self.input);
        for i in 0..values.len() {
            let s = values[i];
            next[i] = match clamp[i] {
                ClampMode::Free => {
                    let drive = nl.rho_prime(self.corrupted[i]) * self.input[i];
                    s + epsilon * (drive - s)
                }
                ClampMode::WeaklyDriven { target } => s + epsilon * (target - s),
                ClampMode::HardClamped => s,
            };
        }
    }
}

fn check_state(params: &NetworkParams, state: &StateVector) -> Result<(), DynamicsError> {
    if state.len() != params.n_units() {
        return Err(ModelError::DimensionMismatch {
            expected: params.n_units(),
            found: state.len(),
        }
        .into());
    }
    Ok(())
}

/// One synchronous update. Free units follow the drive at the corrupted
/// state, weakly driven units follow their target, hard-clamped units stay put.
pub fn step(
    params: &NetworkParams,
    state: &StateVector,
    config: &DynamicsConfig,
    rng: &mut NoiseRng,
) -> Result<StateVector, DynamicsError> {
    check_state(params, state)?;
    let noise = draw_noise(state.len(), config.sigma, rng);
    Ok(step_with_noise(params, state, config.epsilon, &noise))
}

pub(crate) fn step_with_noise(
    params: &NetworkParams,
    state: &StateVector,
    epsilon: f64,
    noise: &[f64],
) -> StateVector {
    let mut stepper = Stepper::new(state.len());
    let mut next = vec![0.0; state.len()];
    stepper.advance(
        params,
        state.values(),
        state.clamp_modes(),
        epsilon,
        Some(noise),
        &mut next,
    );
    StateVector::new(next, state.clamp_modes().to_vec()).expect("lengths match")
}

/// Noise-free step.
pub fn step_deterministic(params: &NetworkParams, state: &StateVector, epsilon: f64) -> StateVector {
    let mut stepper = Stepper::new(state.len());
    let mut next = vec![0.0; state.len()];
    stepper.advance(params, state.values(), state.clamp_modes(), epsilon, None, &mut next);
    StateVector::new(next, state.clamp_modes().to_vec()).expect("lengths match")
}

#[derive(Debug, Clone, PartialEq)]
pub struct Relaxation {
    pub state: StateVector,
    pub steps: usize,
    /// Infinity norm of the last state change.
    pub residual: f64,
}

/// Iterates noise-free steps until the infinity-norm state change drops
/// below `config.tolerance`. `config.sigma` is ignored.
pub fn relax(
    params: &NetworkParams,
    state: &StateVector,
    config: &DynamicsConfig,
) -> Result<Relaxation, DynamicsError> {
    config.validate()?;
    check_state(params, state)?;
    let n = state.len();
    let clamp = state.clamp_modes().to_vec();
    let mut stepper = Stepper::new(n);
    let mut current = state.values().to_vec();
    let mut next = vec![0.0; n];
    let mut residual = f64::INFINITY;
    for steps in 1..=config.max_steps {
        stepper.advance(params, &current, &clamp, config.epsilon, None, &mut next);
        residual = current
            .iter()
            .zip(&next)
            .fold(0.0f64, |m, (a, b)| m.max((a - b).abs()));
        std::mem::swap(&mut current, &mut next);
        if residual < config.tolerance {
            return Ok(Relaxation {
                state: StateVector::new(current, clamp)?,
                steps,
                residual,
            });
        }
    }
    Err(DynamicsError::NonConvergence {
        steps: config.max_steps,
        residual,
        last_state: Box::new(StateVector::new(current, clamp)?),
    })
}

/// `max_i |R_i(s) - s_i|` over free units.
pub fn fixed_point_residual(params: &NetworkParams, state: &StateVector) -> Result<f64, ModelError> {
    let r = model::drive(params, state.values())?;
    Ok(state
        .values()
        .iter()
        .zip(&r)
        .enumerate()
        .filter(|(i, _)| state.is_free(*i))
        .fold(0.0f64, |m, (_, (s, r))| m.max((r - s).abs())))
}

/// Newton refinement of a relaxed state on the free units.
///
/// On each piece where `rho` is affine the fixed-point equation
/// `R(s) = s` is linear, so one Newton step lands on it up to rounding.
/// A step is kept only if it leaves every free unit on the same side of
/// every kink and does not increase the residual.
pub fn refine_fixed_point(params: &NetworkParams, state: &StateVector) -> Result<StateVector, ModelError> {
    let nl = params.nonlinearity();
    let free: Vec<usize> = (0..state.len()).filter(|&i| state.is_free(i)).collect();
    if free.is_empty() {
        return Ok(state.clone());
    }
    let region = |s: f64| {
        if s < nl.beta1() {
            0u8
        } else if s > nl.beta2() {
            2
        } else {
            1
        }
    };
    let mut best = state.clone();
    let mut best_residual = fixed_point_residual(params, &best)?;
    for _ in 0..3 {
        if best_residual == 0.0 {
            break;
        }
        let jac = model::drive_jacobian(params, best.values(), 0.0)?.matrix;
        let r = model::drive(params, best.values())?;
        let m = free.len();
        let system = DMatrix::from_fn(m, m, |a, b| {
            let identity = if a == b { 1.0 } else { 0.0 };
            identity - jac[(free[a], free[b])]
        });
        let rhs = DVector::from_iterator(m, free.iter().map(|&i| r[i] - best.values()[i]));
        let Some(step) = system.lu().solve(&rhs) else {
            break;
        };
        let mut candidate = best.clone();
        for (a, &i) in free.iter().enumerate() {
            candidate.values_mut()[i] += step[a];
        }
        let same_regions = free
            .iter()
            .all(|&i| region(candidate.values()[i]) == region(best.values()[i]));
        let residual = fixed_point_residual(params, &candidate)?;
        if !same_regions || residual > best_residual {
            break;
        }
        let improved = residual < best_residual;
        best = candidate;
        best_residual = residual;
        if !improved {
            break;
        }
    }
    Ok(best)
}

/// One logged chain step: `s_t`, `eta_t`, `s_t + eta_t`, `E(s_t)` and `s_{t+1} - s_t`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryStep {
    pub state: Vec<f64>,
    pub noise: Option<Vec<f64>>,
    pub corrupted: Vec<f64>,
    pub energy: f64,
    pub delta: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryLog {
    pub clamp: Vec<ClampMode>,
    pub epsilon: f64,
    pub sigma: f64,
    pub steps: Vec<TrajectoryStep>,
    pub final_state: Vec<f64>,
}

impl TrajectoryLog {
    /// Drops the per-step noise draws, keeping only states.
    pub fn without_noise(mut self) -> Self {
        for step in &mut self.steps {
            step.noise = None;
        }
        self
    }

    pub fn energies(&self) -> impl Iterator<Item = f64> + '_ {
        self.steps.iter().map(|s| s.energy)
    }

    /// Long-format CSV: one row per (step, unit), energy repeated per row.
    pub fn write_csv<W: Write>(&self, out: W) -> csv::Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["step", "unit", "state", "corrupted_state", "delta", "energy"])?;
        for (t, step) in self.steps.iter().enumerate() {
            let energy = float(step.energy);
            for i in 0..step.state.len() {
                w.write_record([
                    t.to_string(),
                    i.to_string(),
                    float(step.state[i]),
                    float(step.corrupted[i]),
                    float(step.delta[i]),
                    energy.clone(),
                ])?;
            }
        }
        w.flush()?;
        Ok(())
    }
}

/// Runs `num_steps` noisy steps from `state`, logging everything needed to
/// re-derive the chain afterwards. The RNG is seeded from `config.seed`.
pub fn langevin_chain(
    params: &NetworkParams,
    state: &StateVector,
    config: &DynamicsConfig,
    num_steps: usize,
) -> Result<TrajectoryLog, DynamicsError> {
    config.validate()?;
    check_state(params, state)?;
    let mut rng = config.rng();
    let n = state.len();
    let clamp = state.clamp_modes().to_vec();
    let mut stepper = Stepper::new(n);
    let mut current = state.values().to_vec();
    let mut next = vec![0.0; n];
    let mut steps = Vec::with_capacity(num_steps);
    for _ in 0..num_steps {
        let noise = draw_noise(n, config.sigma, &mut rng);
        stepper.advance(params, &current, &clamp, config.epsilon, Some(&noise), &mut next);
        let corrupted = current.iter().zip(&noise).map(|(s, e)| s + e).collect();
        let delta = next.iter().zip(&current).map(|(b, a)| b - a).collect();
        steps.push(TrajectoryStep {
            energy: model::energy(params, &current)?,
            state: current.clone(),
            noise: Some(noise),
            corrupted,
            delta,
        });
        std::mem::swap(&mut current, &mut next);
    }
    Ok(TrajectoryLog {
        clamp,
        epsilon: config.epsilon,
        sigma: config.sigma,
        steps,
        final_state: current,
    })
}

/// Checks the noisy-state form of the chain on free units:
///
/// ```text
/// s~_{t+1} = s~_t - eps dE(s~_t)/ds~ + eta_{t+1} - (1 - eps) eta_t
/// ```
///
/// comparing the logged `s~_{t+1}` with the right-hand side. Returns the
/// largest absolute discrepancy.
pub fn verify_langevin_identity(
    params: &NetworkParams,
    log: &TrajectoryLog,
    config: &DynamicsConfig,
) -> Result<f64, DynamicsError> {
    let eps = config.epsilon;
    let mut worst = 0.0f64;
    for pair in log.steps.windows(2) {
        let (now, then) = (&pair[0], &pair[1]);
        let (Some(eta_now), Some(eta_next)) = (&now.noise, &then.noise) else {
            return Err(DynamicsError::MissingNoiseLog);
        };
        let grad = model::energy_gradient(params, &now.corrupted)?;
        for (i, mode) in log.clamp.iter().enumerate() {
            if !matches!(mode, ClampMode::Free) {
                continue;
            }
            let rebuilt = now.corrupted[i] - eps * grad[i] + eta_next[i] - (1.0 - eps) * eta_now[i];
            worst = worst.max((then.corrupted[i] - rebuilt).abs());
        }
    }
    if log.steps.iter().any(|s| s.noise.is_none()) {
        return Err(DynamicsError::MissingNoiseLog);
    }
    Ok(worst)
}
