//! Nudge-phase measurements against back-propagated gradients.
//!
//! With the input clamped, the network settles to a fixed point `s^`. A
//! target `y` then pulls the output units by `dy = eps (y - y^)`. One step
//! later the first hidden layer moves by
//!
//! ```text
//! dh_1 = eps (R_h1(x, y^ + dy, h^) - h^_1) = -eps^2 dC/dh^_1
//! ```
//!
//! with `C = |y^ - y|^2 / 2`, and layer `k` moves by `-eps^(k+1) dC/dh^_k`
//! once the perturbation reaches it. Because `rho` is piecewise linear the
//! relation has no remainder while every unit stays off the kinks.
//!
//! This module runs that experiment and compares the measured changes with
//! two independent gradient oracles: an explicit chain rule through the
//! drive Jacobian and central finite differences of the cost.

use std::io::Write;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dynamics::{self, DynamicsConfig, DynamicsError};
use crate::fmt::float;
use crate::model::{self, ClampMode, ModelError, NetworkParams, StateVector};

/// A layer counts as changed once its infinity-norm step exceeds this.
pub const FIRST_CHANGE_THRESHOLD: f64 = 1e-14;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum BridgeError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Dynamics(#[from] DynamicsError),
    #[error("invalid nudge config: {0}")]
    InvalidConfig(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NudgeMode {
    /// Perturb one layer at a time from the fixed point and take a single step.
    OneShotProbe,
    /// Weakly drive the outputs and run the ordinary noise-free dynamics.
    FreeRun,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NudgeExperimentConfig {
    pub epsilon: f64,
    pub mode: NudgeMode,
    pub num_layers_to_check: usize,
    pub kink_margin: f64,
}

impl Default for NudgeExperimentConfig {
    fn default() -> Self {
        NudgeExperimentConfig {
            epsilon: 0.01,
            mode: NudgeMode::OneShotProbe,
            num_layers_to_check: 3,
            kink_margin: 1e-3,
        }
    }
}

impl NudgeExperimentConfig {
    pub fn validate(&self) -> Result<(), BridgeError> {
        if !(self.epsilon > 0.0 && self.epsilon <= 0.5) {
            return Err(BridgeError::InvalidConfig(format!(
                "epsilon {} must lie in (0, 0.5]",
                self.epsilon
            )));
        }
        if !(self.kink_margin >= 0.0 && self.kink_margin.is_finite()) {
            return Err(BridgeError::InvalidConfig(format!(
                "kink_margin {} must be finite and >= 0",
                self.kink_margin
            )));
        }
        Ok(())
    }
}

/// Clamps `x`, frees everything else from zero, relaxes, and refines the
/// result to machine precision when the affine piece allows it.
pub fn settle(
    params: &NetworkParams,
    x: &[f64],
    config: &DynamicsConfig,
) -> Result<StateVector, BridgeError> {
    let topology = params.topology();
    let mut state = StateVector::zeros(topology);
    state.clamp_layer(topology, topology.input_layer(), x)?;
    let relaxed = dynamics::relax(params, &state, config)?;
    Ok(dynamics::refine_fixed_point(params, &relaxed.state)?)
}

/// `C = |R_y(s^) - y|^2 / 2`.
pub fn cost(params: &NetworkParams, fixed: &StateVector, y_target: &[f64]) -> Result<f64, BridgeError> {
    let topology = params.topology();
    check_target(params, y_target)?;
    let r = model::drive(params, fixed.values())?;
    let out = &r[topology.layer_range(topology.output_layer())];
    Ok(0.5 * out.iter().zip(y_target).map(|(a, b)| (a - b).powi(2)).sum::<f64>())
}

/// `dy = eps (y - y^)`.
pub fn nudge_once(
    params: &NetworkParams,
    fixed: &StateVector,
    y_target: &[f64],
    epsilon: f64,
) -> Result<Vec<f64>, BridgeError> {
    check_target(params, y_target)?;
    let y_hat = fixed.layer(params.topology(), params.topology().output_layer());
    Ok(y_hat.iter().zip(y_target).map(|(h, y)| epsilon * (y - h)).collect())
}

fn check_target(params: &NetworkParams, y_target: &[f64]) -> Result<(), BridgeError> {
    let n = params.topology().layer_size(params.topology().output_layer());
    if n != y_target.len() {
        return Err(ModelError::DimensionMismatch {
            expected: n,
            found: y_target.len(),
        }
        .into());
    }
    Ok(())
}

/// Cost gradients with respect to the output layer and each hidden layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OracleGradients {
    /// `dC/dy^ = y^ - y`.
    pub output: Vec<f64>,
    /// `dC/dh^_k` for k = 1.. (nearest the output first).
    pub hidden: Vec<Vec<f64>>,
    pub linear_regime: bool,
    pub kink_contacts: Vec<usize>,
}

impl OracleGradients {
    /// Gradient for topology layer `layer` (0 = output).
    pub fn layer(&self, layer: usize) -> &[f64] {
        if layer == 0 {
            &self.output
        } else {
            &self.hidden[layer - 1]
        }
    }
}

/// Explicit back-propagation through the fixed-point relation
/// `y^ = R_y(s^)`, `h^_k = R_hk(s^)`:
/// `g_k = (dR_{k-1}/dh^_k)^T g_{k-1}` using blocks of the drive Jacobian.
pub fn backprop_oracle(
    params: &NetworkParams,
    fixed: &StateVector,
    y_target: &[f64],
    kink_margin: f64,
) -> Result<OracleGradients, BridgeError> {
    check_target(params, y_target)?;
    let topology = params.topology();
    let jac = model::drive_jacobian(params, fixed.values(), kink_margin)?;
    let y_hat = fixed.layer(topology, topology.output_layer());
    let output: Vec<f64> = y_hat.iter().zip(y_target).map(|(h, y)| h - y).collect();
    let mut hidden = Vec::new();
    let mut upstream = output.clone();
    for layer in topology.hidden_layers() {
        let rows = topology.layer_range(layer - 1);
        let cols = topology.layer_range(layer);
        let g: Vec<f64> = cols
            .clone()
            .map(|j| rows.clone().zip(&upstream).map(|(i, gi)| jac.matrix[(i, j)] * gi).sum())
            .collect();
        hidden.push(g.clone());
        upstream = g;
    }
    Ok(OracleGradients {
        output,
        hidden,
        linear_regime: !jac.touches_kink(),
        kink_contacts: jac.kink_contacts,
    })
}

/// Central differences of `C = |R_y(s) - y|^2 / 2` over each `h_1` unit,
/// all other coordinates held at the fixed point.
pub fn finite_difference_oracle(
    params: &NetworkParams,
    fixed: &StateVector,
    y_target: &[f64],
    delta: f64,
) -> Result<Vec<f64>, BridgeError> {
    check_target(params, y_target)?;
    if delta.is_nan() || delta <= 0.0 {
        return Err(BridgeError::InvalidConfig(format!("delta {delta} must be > 0")));
    }
    let topology = params.topology();
    let out_range = topology.layer_range(topology.output_layer());
    let cost_at = |s: &[f64]| -> Result<f64, BridgeError> {
        let r = model::drive(params, s)?;
        Ok(0.5
            * r[out_range.clone()]
                .iter()
                .zip(y_target)
                .map(|(a, b)| (a - b).powi(2))
                .sum::<f64>())
    };
    let mut s = fixed.values().to_vec();
    let mut grad = Vec::new();
    for i in topology.layer_range(1) {
        let centre = s[i];
        s[i] = centre + delta;
        let up = cost_at(&s)?;
        s[i] = centre - delta;
        let down = cost_at(&s)?;
        s[i] = centre;
        grad.push((up - down) / (2.0 * delta));
    }
    Ok(grad)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerReport {
    /// Topology layer index (1 = hidden layer nearest the output).
    pub layer: usize,
    pub measured_delta: Vec<f64>,
    pub oracle_gradient: Vec<f64>,
    pub predicted_delta: Vec<f64>,
    pub relative_l2_error: f64,
    pub cosine_similarity: f64,
    pub epsilon_power_used: i32,
    pub linear_regime: bool,
    /// Dynamics step at which the change was recorded (free-run only).
    pub first_change_step: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradientReport {
    pub mode: NudgeMode,
    pub epsilon: f64,
    pub cost: f64,
    pub output_nudge: Vec<f64>,
    pub linear_regime: bool,
    pub kink_contacts: Vec<usize>,
    pub layers: Vec<LayerReport>,
}

impl GradientReport {
    /// Flat CSV `layer,unit,measured_delta,oracle_gradient,predicted_delta`.
    pub fn write_csv<W: Write>(&self, out: W) -> csv::Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["layer", "unit", "measured_delta", "oracle_gradient", "predicted_delta"])?;
        for layer in &self.layers {
            for u in 0..layer.measured_delta.len() {
                w.write_record([
                    layer.layer.to_string(),
                    u.to_string(),
                    float(layer.measured_delta[u]),
                    float(layer.oracle_gradient[u]),
                    float(layer.predicted_delta[u]),
                ])?;
            }
        }
        w.flush()?;
        Ok(())
    }

    pub fn max_relative_error(&self) -> f64 {
        self.layers.iter().map(|l| l.relative_l2_error).fold(0.0, f64::max)
    }

    pub fn min_cosine(&self) -> f64 {
        self.layers.iter().map(|l| l.cosine_similarity).fold(1.0, f64::min)
    }
}

/// `|a - b| / |b|`; falls back to `|a - b|` when `b` is zero.
pub fn relative_l2_error(measured: &[f64], reference: &[f64]) -> f64 {
    let diff = l2(measured.iter().zip(reference).map(|(a, b)| a - b));
    let scale = l2(reference.iter().copied());
    if scale > 0.0 {
        diff / scale
    } else {
        diff
    }
}

/// Cosine similarity; 1 when both vectors are zero, 0 when exactly one is.
pub fn cosine_similarity(a: &[f64], b: &[f64]) -> f64 {
    let na = l2(a.iter().copied());
    let nb = l2(b.iter().copied());
    match (na > 0.0, nb > 0.0) {
        (false, false) => 1.0,
        (true, true) => {
            let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
            (dot / (na * nb)).clamp(-1.0, 1.0)
        }
        _ => 0.0,
    }
}

fn l2(values: impl Iterator<Item = f64>) -> f64 {
    values.map(|v| v * v).sum::<f64>().sqrt()
}

/// Settles on `x`, nudges the outputs toward `y_target`, measures how each
/// hidden layer responds and compares with `-eps^(k+1) dC/dh^_k`.
pub fn run_nudge_experiment(
    params: &NetworkParams,
    x: &[f64],
    y_target: &[f64],
    config: &NudgeExperimentConfig,
    dynamics_config: &DynamicsConfig,
) -> Result<GradientReport, BridgeError> {
    config.validate()?;
    let fixed = settle(params, x, dynamics_config)?;
    measure_at_fixed_point(params, &fixed, y_target, config)
}

/// The measurement part of [`run_nudge_experiment`] for an already settled state.
pub fn measure_at_fixed_point(
    params: &NetworkParams,
    fixed: &StateVector,
    y_target: &[f64],
    config: &NudgeExperimentConfig,
) -> Result<GradientReport, BridgeError> {
    config.validate()?;
    let topology = params.topology();
    let eps = config.epsilon;
    let oracle = backprop_oracle(params, fixed, y_target, config.kink_margin)?;
    let dy = nudge_once(params, fixed, y_target, eps)?;
    let n_hidden = topology.hidden_layers().len();
    let depth = config.num_layers_to_check.min(n_hidden);
    let layers: Vec<usize> = (1..=depth).collect();

    let measured: Vec<(Vec<f64>, Option<usize>)> = match config.mode {
        NudgeMode::OneShotProbe => one_shot_probe(params, fixed, &dy, &layers, eps)?
            .into_iter()
            .map(|d| (d, None))
            .collect(),
        NudgeMode::FreeRun => free_run(params, fixed, y_target, &layers, eps)?,
    };

    let reports = layers
        .iter()
        .zip(measured)
        .map(|(&layer, (measured_delta, first_change_step))| {
            let power = layer as i32 + 1;
            let gradient = oracle.layer(layer).to_vec();
            let factor = eps.powi(power);
            let predicted: Vec<f64> = gradient.iter().map(|g| -factor * g).collect();
            LayerReport {
                layer,
                relative_l2_error: relative_l2_error(&measured_delta, &predicted),
                cosine_similarity: cosine_similarity(&measured_delta, &predicted),
                measured_delta,
                oracle_gradient: gradient,
                predicted_delta: predicted,
                epsilon_power_used: power,
                linear_regime: oracle.linear_regime,
                first_change_step,
            }
        })
        .collect();

    Ok(GradientReport {
        mode: config.mode,
        epsilon: eps,
        cost: cost(params, fixed, y_target)?,
        output_nudge: dy,
        linear_regime: oracle.linear_regime,
        kink_contacts: oracle.kink_contacts,
        layers: reports,
    })
}

/// `a + b` as an unevaluated pair `(sum, error)` with `sum + error` exact.
fn two_sum(a: f64, b: f64) -> (f64, f64) {
    let s = a + b;
    let bb = s - a;
    (s, (a - (s - bb)) + (b - bb))
}

/// `R(s) - s` on free units, accumulated with error-free transformations so
/// the result is accurate to well below one ulp of the state values.
fn compensated_residual(params: &NetworkParams, state: &StateVector) -> Vec<f64> {
    let nl = params.nonlinearity();
    let values = state.values();
    let weights = params.global_weights();
    let rates: Vec<(f64, f64)> = values
        .iter()
        .map(|&s| {
            if nl.is_linear(s) {
                two_sum(s, -nl.beta1())
            } else {
                (nl.rho(s), 0.0)
            }
        })
        .collect();
    (0..values.len())
        .map(|i| {
            if !state.is_free(i) {
                return 0.0;
            }
            let slope = nl.rho_prime(values[i]);
            if slope == 0.0 {
                return -values[i];
            }
            let (mut sum, mut err) = two_sum(params.biases()[i], -values[i]);
            for (j, &(hi, lo)) in rates.iter().enumerate() {
                let w = weights[(i, j)];
                if w == 0.0 {
                    continue;
                }
                let p = w * hi;
                let (s, e) = two_sum(sum, p);
                sum = s;
                err += e + w.mul_add(hi, -p) + w * lo;
            }
            sum + err
        })
        .collect()
}

/// What one noise-free full step from the settled state would add, i.e.
/// `R(s*) - s*` where `s*` is the exact fixed point of the current affine
/// piece rather than its rounded representation `s^`.
///
/// Writing `s* = s^ + c`, the correction solves `(I - J) c = R(s^) - s^` on
/// the free units, and the returned value is `r - (I - J) c`. For a state
/// that is already a fixed point this is zero up to products of round-off,
/// which keeps the probe's base term far below the `eps^(k+1)` signal.
fn settled_step_residual(params: &NetworkParams, fixed: &StateVector) -> Result<Vec<f64>, BridgeError> {
    let residual = compensated_residual(params, fixed);
    let free: Vec<usize> = (0..fixed.len()).filter(|&i| fixed.is_free(i)).collect();
    let jac = model::drive_jacobian(params, fixed.values(), 0.0)?.matrix;
    let m = nalgebra::DMatrix::from_fn(free.len(), free.len(), |a, b| {
        let delta = if a == b { 1.0 } else { 0.0 };
        delta - jac[(free[a], free[b])]
    });
    let rhs = nalgebra::DVector::from_iterator(free.len(), free.iter().map(|&i| residual[i]));
    let Some(correction) = m.clone().lu().solve(&rhs) else {
        return Ok(residual);
    };
    let applied = &m * &correction;
    let mut out = residual;
    for (a, &i) in free.iter().enumerate() {
        out[i] -= applied[a];
    }
    Ok(out)
}

/// Layer by layer: displace only the previous layer by its measured change
/// and take one step, `dh_k = eps (R_hk(s* + d) - h*_k)`. The drive at the
/// displaced state is formed as `R(s*) + [R(s* + d) - R(s*)]` with the
/// bracket evaluated through rate increments, so the tiny displacement is
/// never added onto the O(1) fixed-point values.
fn one_shot_probe(
    params: &NetworkParams,
    fixed: &StateVector,
    dy: &[f64],
    layers: &[usize],
    eps: f64,
) -> Result<Vec<Vec<f64>>, BridgeError> {
    let topology = params.topology();
    let base = settled_step_residual(params, fixed)?;
    let mut displacement = vec![0.0; fixed.len()];
    displacement[topology.layer_range(topology.output_layer())].copy_from_slice(dy);
    let mut out = Vec::with_capacity(layers.len());
    for &layer in layers {
        let increment = model::drive_increment(params, fixed.values(), &displacement)?;
        let range = topology.layer_range(layer);
        let dh: Vec<f64> = range
            .clone()
            .map(|i| eps * (base[i] + increment[i]))
            .collect();
        displacement.iter_mut().for_each(|d| *d = 0.0);
        displacement[range].copy_from_slice(&dh);
        out.push(dh);
    }
    Ok(out)
}

/// A layer's measured change and the step at which it first appeared.
type LayerChange = (Vec<f64>, Option<usize>);

/// Weakly drives the outputs and records, per layer, the state change at the
/// first step where it exceeds [`FIRST_CHANGE_THRESHOLD`]. Layers that never
/// move within `n_layers + 1` steps report zeros.
fn free_run(
    params: &NetworkParams,
    fixed: &StateVector,
    y_target: &[f64],
    layers: &[usize],
    eps: f64,
) -> Result<Vec<LayerChange>, BridgeError> {
    let topology = params.topology();
    let mut state = fixed.clone();
    state.drive_layer(topology, topology.output_layer(), y_target)?;
    let mut found: Vec<Option<(Vec<f64>, usize)>> = vec![None; layers.len()];
    for step in 1..=topology.n_layers() + 1 {
        let next = dynamics::step_deterministic(params, &state, eps);
        for (slot, &layer) in found.iter_mut().zip(layers) {
            if slot.is_some() {
                continue;
            }
            let range = topology.layer_range(layer);
            let change: Vec<f64> = range.map(|i| next.values()[i] - state.values()[i]).collect();
            if change.iter().any(|c| c.abs() > FIRST_CHANGE_THRESHOLD) {
                *slot = Some((change, step));
            }
        }
        state = next;
        if found.iter().all(Option::is_some) {
            break;
        }
    }
    Ok(found
        .into_iter()
        .zip(layers)
        .map(|(slot, &layer)| match slot {
            Some((change, step)) => (change, Some(step)),
            None => (vec![0.0; topology.layer_size(layer)], None),
        })
        .collect())
}

/// Output state with `y` replaced by weak driving, as used for the nudge phase.
pub fn nudged_state(
    params: &NetworkParams,
    fixed: &StateVector,
    y_target: &[f64],
) -> Result<StateVector, BridgeError> {
    let topology = params.topology();
    let mut state = fixed.clone();
    state.drive_layer(topology, topology.output_layer(), y_target)?;
    debug_assert!(state
        .clamp_modes()
        .iter()
        .any(|m| matches!(m, ClampMode::WeaklyDriven { .. })));
    Ok(state)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dynamics::NoiseRng;
    use crate::model::{HardSigmoid, LayeredTopology, WeightScale};
    use nalgebra::DMatrix;
    use rand::{Rng, SeedableRng};

    fn net(sizes: &[usize], seed: u64) -> NetworkParams {
        let topo = LayeredTopology::new(sizes.to_vec()).unwrap();
        let mut rng = NoiseRng::seed_from_u64(seed);
        NetworkParams::random(topo, HardSigmoid::default(), WeightScale::FanIn, &mut rng).unwrap()
    }

    fn inputs(n: usize, seed: u64) -> Vec<f64> {
        let mut rng = NoiseRng::seed_from_u64(seed);
        (0..n).map(|_| rng.random_range(-0.4..0.4)).collect()
    }

    #[test]
    fn zero_net_settles_to_zero() {
        let topo = LayeredTopology::new(vec![2, 3, 2]).unwrap();
        let p = NetworkParams::zeros(topo, HardSigmoid::default());
        let s = settle(&p, &[0.3, -0.2], &DynamicsConfig::default()).unwrap();
        assert!(s.values()[..5].iter().all(|v| v.abs() < 1e-9));
    }

    #[test]
    fn settled_state_is_a_fixed_point() {
        let p = net(&[3, 4, 5, 2], 1);
        let cfg = DynamicsConfig::default();
        let s = settle(&p, &inputs(2, 2), &cfg).unwrap();
        assert!(dynamics::fixed_point_residual(&p, &s).unwrap() < cfg.tolerance);
    }

    #[test]
    fn settle_independent_of_hidden_init() {
        let topo = LayeredTopology::new(vec![2, 4, 3]).unwrap();
        let mut rng = NoiseRng::seed_from_u64(8);
        let p = NetworkParams::random(topo.clone(), HardSigmoid::default(), WeightScale::Uniform(0.1), &mut rng)
            .unwrap();
        let cfg = DynamicsConfig::default();
        let x = [0.1, -0.2, 0.3];
        let a = settle(&p, &x, &cfg).unwrap();
        let mut init = StateVector::free(vec![0.4, -0.4, 0.3, -0.2, 0.1, 0.0, 0.0, 0.0, 0.0]);
        init.clamp_layer(&topo, 2, &x).unwrap();
        let b = dynamics::relax(&p, &init, &cfg).unwrap().state;
        for (u, v) in a.values().iter().zip(b.values()) {
            assert!((u - v).abs() <= 10.0 * cfg.tolerance / cfg.epsilon);
        }
    }

    #[test]
    fn cost_values() {
        let p = net(&[2, 3, 2], 3);
        let s = settle(&p, &[0.1, 0.2], &DynamicsConfig::default()).unwrap();
        let y_hat = s.layer(p.topology(), 0).to_vec();
        assert!(cost(&p, &s, &y_hat).unwrap() < 1e-20);

        let zero = NetworkParams::zeros(p.topology().clone(), HardSigmoid::default());
        let s0 = StateVector::zeros(zero.topology());
        assert_eq!(cost(&zero, &s0, &[1.0, 0.0]).unwrap(), 0.5);

        let y = [0.3, -0.25];
        let eps = 0.01;
        let dy = nudge_once(&p, &s, &y, eps).unwrap();
        let via_nudge = dy.iter().map(|d| d * d).sum::<f64>() / (2.0 * eps * eps);
        assert!((cost(&p, &s, &y).unwrap() - via_nudge).abs() <= 1e-9);
    }

    #[test]
    fn nudge_values() {
        let topo = LayeredTopology::new(vec![2, 1, 1]).unwrap();
        let p = NetworkParams::zeros(topo, HardSigmoid::default());
        let s = StateVector::zeros(p.topology());
        let dy = nudge_once(&p, &s, &[1.0, -1.0], 0.1).unwrap();
        assert_eq!(dy, vec![0.1, -0.1]);
        assert_eq!(nudge_once(&p, &s, &[0.0, 0.0], 0.1).unwrap(), vec![0.0, 0.0]);
    }

    #[test]
    fn oracle_zero_when_on_target() {
        let p = net(&[2, 3, 3, 2], 5);
        let s = settle(&p, &[0.1, 0.2], &DynamicsConfig::default()).unwrap();
        let y_hat = s.layer(p.topology(), 0).to_vec();
        let g = backprop_oracle(&p, &s, &y_hat, 1e-3).unwrap();
        assert!(g.hidden.iter().flatten().all(|v| *v == 0.0));
    }

    #[test]
    fn saturated_h1_blocks_gradient() {
        let topo = LayeredTopology::new(vec![1, 2, 1]).unwrap();
        let blocks = vec![
            DMatrix::from_row_slice(1, 2, &[0.5, -0.4]),
            DMatrix::from_row_slice(2, 1, &[0.3, 0.2]),
        ];
        let p = NetworkParams::new(topo, blocks, vec![0.0; 4], HardSigmoid::default()).unwrap();
        let s = StateVector::free(vec![0.1, 2.0, -3.0, 0.0]);
        let g = backprop_oracle(&p, &s, &[0.4], 1e-3).unwrap();
        assert_eq!(g.hidden[0], vec![0.0, 0.0]);
    }

    #[test]
    fn oracles_agree_in_linear_regime() {
        let p = net(&[3, 5, 4, 2], 9);
        let s = settle(&p, &inputs(2, 10), &DynamicsConfig::default()).unwrap();
        let y = [0.3, -0.2, 0.1];
        let bp = backprop_oracle(&p, &s, &y, 1e-3).unwrap();
        assert!(bp.linear_regime);
        let fd = finite_difference_oracle(&p, &s, &y, 1e-5).unwrap();
        assert!(relative_l2_error(&fd, &bp.hidden[0]) <= 1e-6);

        let y_hat = s.layer(p.topology(), 0).to_vec();
        let fd0 = finite_difference_oracle(&p, &s, &y_hat, 1e-5).unwrap();
        assert!(fd0.iter().all(|v| v.abs() <= 1e-8));
    }

    #[test]
    fn finite_differences_straddling_a_kink_disagree() {
        // h1 unit sits 1e-6 below beta2; a 1e-3 probe crosses it
        let topo = LayeredTopology::new(vec![1, 1, 1]).unwrap();
        let blocks = vec![DMatrix::from_element(1, 1, 0.8), DMatrix::zeros(1, 1)];
        let p = NetworkParams::new(topo, blocks, vec![0.0; 3], HardSigmoid::default()).unwrap();
        let s = StateVector::free(vec![0.1, 0.5 - 1e-6, 0.0]);
        let y = [-0.3];
        let bp = backprop_oracle(&p, &s, &y, 1e-3).unwrap();
        assert!(!bp.linear_regime);
        let fd = finite_difference_oracle(&p, &s, &y, 1e-3).unwrap();
        assert!(relative_l2_error(&fd, &bp.hidden[0]) > 0.1);
    }

    #[test]
    fn one_shot_probe_matches_backprop() {
        let p = net(&[3, 5, 4, 4, 2], 13);
        let y = [0.35, -0.3, 0.1];
        let cfg = NudgeExperimentConfig::default();
        let report = run_nudge_experiment(&p, &inputs(2, 14), &y, &cfg, &DynamicsConfig::default()).unwrap();
        assert!(report.linear_regime);
        assert_eq!(report.layers.len(), 3);
        for layer in &report.layers {
            assert_eq!(layer.epsilon_power_used, layer.layer as i32 + 1);
            assert!(layer.relative_l2_error <= 1e-9, "{layer:?}");
        }
    }

    #[test]
    fn free_run_layers_change_in_order() {
        let p = net(&[3, 5, 4, 4, 2], 13);
        let y = [0.35, -0.3, 0.1];
        let cfg = NudgeExperimentConfig {
            mode: NudgeMode::FreeRun,
            ..Default::default()
        };
        let report = run_nudge_experiment(&p, &inputs(2, 14), &y, &cfg, &DynamicsConfig::default()).unwrap();
        for layer in &report.layers {
            assert_eq!(layer.first_change_step, Some(layer.layer + 1));
            assert!(layer.cosine_similarity >= 0.999);
        }
    }

    #[test]
    fn on_target_report_is_all_zero() {
        let p = net(&[2, 3, 3, 2], 21);
        let s = settle(&p, &[0.2, -0.1], &DynamicsConfig::default()).unwrap();
        let y_hat = s.layer(p.topology(), 0).to_vec();
        for mode in [NudgeMode::OneShotProbe, NudgeMode::FreeRun] {
            let cfg = NudgeExperimentConfig {
                mode,
                ..Default::default()
            };
            let r = measure_at_fixed_point(&p, &s, &y_hat, &cfg).unwrap();
            for l in &r.layers {
                assert!(l.oracle_gradient.iter().all(|v| *v == 0.0));
                assert!(l.measured_delta.iter().all(|v| v.abs() < 1e-20), "{mode:?} {l:?}");
            }
        }
    }

    #[test]
    fn metric_conventions() {
        assert_eq!(cosine_similarity(&[0.0, 0.0], &[0.0, 0.0]), 1.0);
        assert_eq!(cosine_similarity(&[1.0, 0.0], &[0.0, 0.0]), 0.0);
        assert!((cosine_similarity(&[1.0, 1.0], &[2.0, 2.0]) - 1.0).abs() < 1e-15);
        assert_eq!(relative_l2_error(&[3.0, 4.0], &[0.0, 0.0]), 5.0);
        assert_eq!(relative_l2_error(&[1.0, 1.0], &[1.0, 1.0]), 0.0);
    }

    #[test]
    fn config_rejects_large_epsilon() {
        let cfg = NudgeExperimentConfig {
            epsilon: 0.6,
            ..Default::default()
        };
        assert!(cfg.validate().is_err());
    }
}
