//! Network parameterization for layered continuous-state energy-based networks.
//!
//! The energy of a state `s` is
//!
//! ```text
//! E(s) = sum_i s_i^2 / 2 - 1/2 sum_{i != j} W_ij rho(s_i) rho(s_j) - sum_i b_i rho(s_i)
//! ```
//!
//! with `rho` a hard sigmoid. Weights live in dense blocks between adjacent
//! layers only; the global matrix `W` is implied by mirroring each block, so it
//! is symmetric with a zero diagonal by construction.
//!
//! The driving function `R(s) = s - dE/ds` has entries
//! `R_i(s) = rho'(s_i) (b_i + sum_j W_ij rho(s_j))`.

use std::ops::Range;

use nalgebra::DMatrix;
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Number of draws [`NetworkParams::random`] makes before giving up.
pub const MAX_INIT_ATTEMPTS: usize = 1000;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ModelError {
    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },
    #[error("invalid thresholds beta1={beta1}, beta2={beta2}: need beta2 - beta1 = 1 and beta1 < 0 < beta2")]
    InvalidThresholds { beta1: f64, beta2: f64 },
    #[error("invalid topology: {0}")]
    InvalidTopology(String),
    #[error("expected {expected} weight blocks, found {found}")]
    BlockCount { expected: usize, found: usize },
    #[error("weight block {index}: expected shape {expected:?}, found {found:?}")]
    BlockShape {
        index: usize,
        expected: (usize, usize),
        found: (usize, usize),
    },
    #[error("non-finite value in {0}")]
    NonFinite(&'static str),
    #[error("no draw with a positive-definite linear-region Hessian in {0} attempts")]
    InitExhausted(usize),
}

/// Piecewise-linear rate function with kinks at `beta1` and `beta2 = beta1 + 1`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawThresholds", into = "RawThresholds")]
pub struct HardSigmoid {
    beta1: f64,
    beta2: f64,
}

#[derive(Serialize, Deserialize)]
struct RawThresholds {
    beta1: f64,
    beta2: f64,
}

impl TryFrom<RawThresholds> for HardSigmoid {
    type Error = ModelError;
    fn try_from(raw: RawThresholds) -> Result<Self, Self::Error> {
        HardSigmoid::new(raw.beta1, raw.beta2)
    }
}

impl From<HardSigmoid> for RawThresholds {
    fn from(nl: HardSigmoid) -> Self {
        RawThresholds {
            beta1: nl.beta1,
            beta2: nl.beta2,
        }
    }
}

impl Default for HardSigmoid {
    fn default() -> Self {
        HardSigmoid {
            beta1: -0.5,
            beta2: 0.5,
        }
    }
}

impl HardSigmoid {
    pub fn new(beta1: f64, beta2: f64) -> Result<Self, ModelError> {
        let width_ok = ((beta2 - beta1) - 1.0).abs() <= 4.0 * f64::EPSILON;
        if beta1.is_finite() && beta2.is_finite() && beta1 < 0.0 && beta2 > 0.0 && width_ok {
            Ok(HardSigmoid { beta1, beta2 })
        } else {
            Err(ModelError::InvalidThresholds { beta1, beta2 })
        }
    }

    pub fn beta1(&self) -> f64 {
        self.beta1
    }

    pub fn beta2(&self) -> f64 {
        self.beta2
    }

    #[inline]
    pub fn rho(&self, s: f64) -> f64 {
        if s < self.beta1 {
            0.0
        } else if s > self.beta2 {
            1.0
        } else {
            // the clamp pins rho(beta2) to exactly 1 when beta2 - beta1 rounds off 1
            (s - self.beta1).clamp(0.0, 1.0)
        }
    }

    /// Derivative of [`rho`](Self::rho), taken as 1 on the closed interval `[beta1, beta2]`.
    #[inline]
    pub fn rho_prime(&self, s: f64) -> f64 {
        if self.is_linear(s) {
            1.0
        } else {
            0.0
        }
    }

    #[inline]
    pub fn is_linear(&self, s: f64) -> bool {
        self.beta1 <= s && s <= self.beta2
    }

    /// `rho(s + d) - rho(s)`, exact when both points lie in the linear region.
    #[inline]
    pub fn rho_increment(&self, s: f64, d: f64) -> f64 {
        let t = s + d;
        if self.is_linear(s) && self.is_linear(t) {
            d
        } else {
            self.rho(t) - self.rho(s)
        }
    }

    /// Distance from `s` to the nearest kink.
    pub fn kink_distance(&self, s: f64) -> f64 {
        (s - self.beta1).abs().min((s - self.beta2).abs())
    }
}

/// Layer sizes ordered from the output layer, through the hidden layers, to
/// the input layer. Units are numbered contiguously layer by layer in that order.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "Vec<usize>", into = "Vec<usize>")]
pub struct LayeredTopology {
    layer_sizes: Vec<usize>,
    offsets: Vec<usize>,
}

impl TryFrom<Vec<usize>> for LayeredTopology {
    type Error = ModelError;
    fn try_from(sizes: Vec<usize>) -> Result<Self, Self::Error> {
        LayeredTopology::new(sizes)
    }
}

impl From<LayeredTopology> for Vec<usize> {
    fn from(t: LayeredTopology) -> Self {
        t.layer_sizes
    }
}

impl LayeredTopology {
    pub fn new(layer_sizes: Vec<usize>) -> Result<Self, ModelError> {
        if layer_sizes.len() < 3 {
            return Err(ModelError::InvalidTopology(format!(
                "need at least 3 layers (output, hidden, input), got {}",
                layer_sizes.len()
            )));
        }
        if let Some(pos) = layer_sizes.iter().position(|&n| n == 0) {
            return Err(ModelError::InvalidTopology(format!("layer {pos} is empty")));
        }
        let mut offsets = Vec::with_capacity(layer_sizes.len() + 1);
        let mut total = 0usize;
        offsets.push(0);
        for &n in &layer_sizes {
            total = total
                .checked_add(n)
                .ok_or_else(|| ModelError::InvalidTopology("unit count overflows".into()))?;
            offsets.push(total);
        }
        Ok(LayeredTopology {
            layer_sizes,
            offsets,
        })
    }

    pub fn layer_sizes(&self) -> &[usize] {
        &self.layer_sizes
    }

    pub fn n_layers(&self) -> usize {
        self.layer_sizes.len()
    }

    pub fn n_units(&self) -> usize {
        self.offsets[self.layer_sizes.len()]
    }

    pub fn layer_size(&self, layer: usize) -> usize {
        self.layer_sizes[layer]
    }

    pub fn layer_range(&self, layer: usize) -> Range<usize> {
        self.offsets[layer]..self.offsets[layer + 1]
    }

    pub fn unit_index(&self, layer: usize, unit: usize) -> usize {
        assert!(unit < self.layer_sizes[layer], "unit {unit} out of range for layer {layer}");
        self.offsets[layer] + unit
    }

    /// Inverse of [`unit_index`](Self::unit_index).
    pub fn locate(&self, index: usize) -> (usize, usize) {
        assert!(index < self.n_units(), "unit index {index} out of range");
        let layer = self.offsets.partition_point(|&o| o <= index) - 1;
        (layer, index - self.offsets[layer])
    }

    pub fn output_layer(&self) -> usize {
        0
    }

    pub fn input_layer(&self) -> usize {
        self.layer_sizes.len() - 1
    }

    /// Hidden layer indices, nearest the output first.
    pub fn hidden_layers(&self) -> Range<usize> {
        1..self.layer_sizes.len() - 1
    }

    /// Blocks connect layer `k` (upper, closer to the output) with layer `k + 1`.
    pub fn n_blocks(&self) -> usize {
        self.layer_sizes.len() - 1
    }

    pub fn block_shape(&self, block: usize) -> (usize, usize) {
        (self.layer_sizes[block], self.layer_sizes[block + 1])
    }

    /// Number of units feeding a unit of `layer` through the symmetric couplings.
    pub fn fan_in(&self, layer: usize) -> usize {
        let above = if layer > 0 { self.layer_sizes[layer - 1] } else { 0 };
        let below = self.layer_sizes.get(layer + 1).copied().unwrap_or(0);
        above + below
    }
}

/// Per-unit clamping behaviour.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClampMode {
    Free,
    HardClamped,
    /// Leaky integration toward an external target instead of the network drive.
    WeaklyDriven { target: f64 },
}

/// Flat state `s` with one clamp mode per unit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StateVector {
    values: Vec<f64>,
    clamp: Vec<ClampMode>,
}

impl StateVector {
    pub fn new(values: Vec<f64>, clamp: Vec<ClampMode>) -> Result<Self, ModelError> {
        if values.len() != clamp.len() {
            return Err(ModelError::DimensionMismatch {
                expected: values.len(),
                found: clamp.len(),
            });
        }
        Ok(StateVector { values, clamp })
    }

    /// All units free.
    pub fn free(values: Vec<f64>) -> Self {
        let clamp = vec![ClampMode::Free; values.len()];
        StateVector { values, clamp }
    }

    pub fn zeros(topology: &LayeredTopology) -> Self {
        StateVector::free(vec![0.0; topology.n_units()])
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn clamp_modes(&self) -> &[ClampMode] {
        &self.clamp
    }

    pub fn mode(&self, unit: usize) -> ClampMode {
        self.clamp[unit]
    }

    pub fn set_mode(&mut self, unit: usize, mode: ClampMode) {
        self.clamp[unit] = mode;
    }

    pub fn is_free(&self, unit: usize) -> bool {
        matches!(self.clamp[unit], ClampMode::Free)
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    /// Hard-clamps `layer` to `values`.
    pub fn clamp_layer(
        &mut self,
        topology: &LayeredTopology,
        layer: usize,
        values: &[f64],
    ) -> Result<(), ModelError> {
        let range = topology.layer_range(layer);
        check_len(range.len(), values.len())?;
        for (i, &v) in range.zip(values) {
            self.values[i] = v;
            self.clamp[i] = ClampMode::HardClamped;
        }
        Ok(())
    }

    /// Switches `layer` to weak driving toward `targets`, keeping current values.
    pub fn drive_layer(
        &mut self,
        topology: &LayeredTopology,
        layer: usize,
        targets: &[f64],
    ) -> Result<(), ModelError> {
        let range = topology.layer_range(layer);
        check_len(range.len(), targets.len())?;
        for (i, &target) in range.zip(targets) {
            self.clamp[i] = ClampMode::WeaklyDriven { target };
        }
        Ok(())
    }

    pub fn layer<'a>(&'a self, topology: &LayeredTopology, layer: usize) -> &'a [f64] {
        &self.values[topology.layer_range(layer)]
    }
}

fn check_len(expected: usize, found: usize) -> Result<(), ModelError> {
    if expected == found {
        Ok(())
    } else {
        Err(ModelError::DimensionMismatch { expected, found })
    }
}

/// Weights for one adjacent-layer pair as supplied by a caller.
#[derive(Debug, Clone, PartialEq)]
pub enum RawBlock {
    /// One matrix (upper x lower) used for both directions.
    Single(DMatrix<f64>),
    /// Independent directed weights: `forward` is upper x lower (into the
    /// upper layer), `backward` is lower x upper (into the lower layer).
    Directed {
        forward: DMatrix<f64>,
        backward: DMatrix<f64>,
    },
}

/// How [`NetworkParams::random`] scales the uniform weight draw.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WeightScale {
    /// `w0 = 1 / sqrt(fan_in)` with the larger fan-in of the two coupled layers.
    FanIn,
    /// Fixed half-width `w0`.
    Uniform(f64),
}

#[derive(Debug, Clone, PartialEq)]
pub struct NetworkParams {
    topology: LayeredTopology,
    blocks: Vec<DMatrix<f64>>,
    biases: Vec<f64>,
    nonlinearity: HardSigmoid,
}

impl NetworkParams {
    pub fn new(
        topology: LayeredTopology,
        blocks: Vec<DMatrix<f64>>,
        biases: Vec<f64>,
        nonlinearity: HardSigmoid,
    ) -> Result<Self, ModelError> {
        if blocks.len() != topology.n_blocks() {
            return Err(ModelError::BlockCount {
                expected: topology.n_blocks(),
                found: blocks.len(),
            });
        }
        for (index, block) in blocks.iter().enumerate() {
            let expected = topology.block_shape(index);
            if block.shape() != expected {
                return Err(ModelError::BlockShape {
                    index,
                    expected,
                    found: block.shape(),
                });
            }
            if block.iter().any(|w| !w.is_finite()) {
                return Err(ModelError::NonFinite("weights"));
            }
        }
        check_len(topology.n_units(), biases.len())?;
        if biases.iter().any(|b| !b.is_finite()) {
            return Err(ModelError::NonFinite("biases"));
        }
        Ok(NetworkParams {
            topology,
            blocks,
            biases,
            nonlinearity,
        })
    }

    pub fn zeros(topology: LayeredTopology, nonlinearity: HardSigmoid) -> Self {
        let blocks = (0..topology.n_blocks())
            .map(|k| {
                let (r, c) = topology.block_shape(k);
                DMatrix::zeros(r, c)
            })
            .collect();
        let biases = vec![0.0; topology.n_units()];
        NetworkParams {
            topology,
            blocks,
            biases,
            nonlinearity,
        }
    }

    /// Builds parameters from caller blocks. A directed pair `(A, B)` is
    /// stored as `(A + B^T) / 2`, the coupling the energy actually sees.
    pub fn assemble_symmetric(
        topology: LayeredTopology,
        raw_blocks: Vec<RawBlock>,
        biases: Vec<f64>,
        nonlinearity: HardSigmoid,
    ) -> Result<Self, ModelError> {
        if raw_blocks.len() != topology.n_blocks() {
            return Err(ModelError::BlockCount {
                expected: topology.n_blocks(),
                found: raw_blocks.len(),
            });
        }
        let mut blocks = Vec::with_capacity(raw_blocks.len());
        for (index, raw) in raw_blocks.into_iter().enumerate() {
            let expected = topology.block_shape(index);
            let block = match raw {
                RawBlock::Single(m) => m,
                RawBlock::Directed { forward, backward } => {
                    let transposed = (backward.ncols(), backward.nrows());
                    if transposed != expected {
                        return Err(ModelError::BlockShape {
                            index,
                            expected: (expected.1, expected.0),
                            found: backward.shape(),
                        });
                    }
                    if forward.shape() != expected {
                        return Err(ModelError::BlockShape {
                            index,
                            expected,
                            found: forward.shape(),
                        });
                    }
                    (forward + backward.transpose()) * 0.5
                }
            };
            blocks.push(block);
        }
        NetworkParams::new(topology, blocks, biases, nonlinearity)
    }

    /// Uniform weights in `[-w0, w0]` per block, biases centred so that the
    /// origin is a fixed point when every neighbour sits at 0, redrawn until
    /// the linear-region Hessian `I - W` is positive definite.
    pub fn random<R: Rng + ?Sized>(
        topology: LayeredTopology,
        nonlinearity: HardSigmoid,
        scale: WeightScale,
        rng: &mut R,
    ) -> Result<Self, ModelError> {
        for _ in 0..MAX_INIT_ATTEMPTS {
            let params = Self::draw(&topology, nonlinearity, scale, rng);
            if params.linear_region_stable() {
                return Ok(params);
            }
        }
        Err(ModelError::InitExhausted(MAX_INIT_ATTEMPTS))
    }

    fn draw<R: Rng + ?Sized>(
        topology: &LayeredTopology,
        nonlinearity: HardSigmoid,
        scale: WeightScale,
        rng: &mut R,
    ) -> Self {
        let blocks: Vec<DMatrix<f64>> = (0..topology.n_blocks())
            .map(|k| {
                let (r, c) = topology.block_shape(k);
                let w0 = match scale {
                    WeightScale::FanIn => {
                        let fan_in = topology.fan_in(k).max(topology.fan_in(k + 1));
                        1.0 / (fan_in as f64).sqrt()
                    }
                    WeightScale::Uniform(w0) => w0,
                };
                // row-major draw order so the stream does not depend on storage layout
                let mut m = DMatrix::zeros(r, c);
                for i in 0..r {
                    for j in 0..c {
                        m[(i, j)] = if w0 > 0.0 { rng.random_range(-w0..=w0) } else { 0.0 };
                    }
                }
                m
            })
            .collect();
        let mut params = NetworkParams::zeros(topology.clone(), nonlinearity);
        params.blocks = blocks;
        let rest = nonlinearity.rho(0.0);
        let mut row_sums = vec![0.0; topology.n_units()];
        params.accumulate_coupling(&vec![rest; topology.n_units()], &mut row_sums);
        params.biases = row_sums.into_iter().map(|s| -s).collect();
        params
    }

    pub fn topology(&self) -> &LayeredTopology {
        &self.topology
    }

    pub fn blocks(&self) -> &[DMatrix<f64>] {
        &self.blocks
    }

    pub fn block(&self, k: usize) -> &DMatrix<f64> {
        &self.blocks[k]
    }

    pub fn biases(&self) -> &[f64] {
        &self.biases
    }

    pub fn nonlinearity(&self) -> HardSigmoid {
        self.nonlinearity
    }

    pub fn n_units(&self) -> usize {
        self.topology.n_units()
    }

    /// Entry `W_ij` of the implied global matrix.
    pub fn weight(&self, i: usize, j: usize) -> f64 {
        let (li, ui) = self.topology.locate(i);
        let (lj, uj) = self.topology.locate(j);
        if lj == li + 1 {
            self.blocks[li][(ui, uj)]
        } else if li == lj + 1 {
            self.blocks[lj][(uj, ui)]
        } else {
            0.0
        }
    }

    /// Dense symmetric `W`, zero outside the adjacent-layer blocks.
    pub fn global_weights(&self) -> DMatrix<f64> {
        let n = self.n_units();
        let mut w = DMatrix::zeros(n, n);
        for (k, block) in self.blocks.iter().enumerate() {
            let upper = self.topology.layer_range(k);
            let lower = self.topology.layer_range(k + 1);
            for (bi, i) in upper.clone().enumerate() {
                for (bj, j) in lower.clone().enumerate() {
                    w[(i, j)] = block[(bi, bj)];
                    w[(j, i)] = block[(bi, bj)];
                }
            }
        }
        w
    }

    /// True when `I - W` is positive definite, i.e. the energy is strictly
    /// convex while every unit is in the linear region.
    pub fn linear_region_stable(&self) -> bool {
        let n = self.n_units();
        let hessian = DMatrix::<f64>::identity(n, n) - self.global_weights();
        hessian.cholesky().is_some()
    }

    pub fn with_biases(mut self, biases: Vec<f64>) -> Result<Self, ModelError> {
        check_len(self.n_units(), biases.len())?;
        self.biases = biases;
        Ok(self)
    }

    /// Adds `sum_j W_ij r_j` into `out[i]` for every unit.
    pub(crate) fn accumulate_coupling(&self, rates: &[f64], out: &mut [f64]) {
        for (k, block) in self.blocks.iter().enumerate() {
            let upper = self.topology.layer_range(k);
            let lower = self.topology.layer_range(k + 1);
            let (r, c) = block.shape();
            let upper_rates = &rates[upper.clone()];
            let lower_rates = &rates[lower.clone()];
            let (out_upper, out_lower) = out.split_at_mut(lower.start);
            let out_upper = &mut out_upper[upper];
            let out_lower = &mut out_lower[..c];
            // column-major storage: walk columns outermost
            for j in 0..c {
                let col = block.column(j);
                let rj = lower_rates[j];
                let mut into_lower = 0.0;
                for i in 0..r {
                    let w = col[i];
                    out_upper[i] += w * rj;
                    into_lower += w * upper_rates[i];
                }
                out_lower[j] += into_lower;
            }
        }
    }

    fn check_state(&self, state: &[f64]) -> Result<(), ModelError> {
        check_len(self.n_units(), state.len())
    }
}

/// Net input `b_i + sum_j W_ij rho(s_j)` for every unit.
pub fn net_input(params: &NetworkParams, state: &[f64]) -> Result<Vec<f64>, ModelError> {
    params.check_state(state)?;
    let nl = params.nonlinearity;
    let rates: Vec<f64> = state.iter().map(|&s| nl.rho(s)).collect();
    let mut out = params.biases.clone();
    params.accumulate_coupling(&rates, &mut out);
    Ok(out)
}

pub fn energy(params: &NetworkParams, state: &[f64]) -> Result<f64, ModelError> {
    params.check_state(state)?;
    let nl = params.nonlinearity;
    let rates: Vec<f64> = state.iter().map(|&s| nl.rho(s)).collect();
    let quadratic: f64 = state.iter().map(|s| s * s).sum::<f64>() * 0.5;
    // each unordered pair once; the i != j double sum counts it twice with a 1/2
    let mut pair = 0.0;
    for (k, block) in params.blocks.iter().enumerate() {
        let upper = &rates[params.topology.layer_range(k)];
        let lower = &rates[params.topology.layer_range(k + 1)];
        for (j, &rj) in lower.iter().enumerate() {
            let col = block.column(j);
            for (i, &ri) in upper.iter().enumerate() {
                pair += col[i] * ri * rj;
            }
        }
    }
    let bias: f64 = params.biases.iter().zip(&rates).map(|(b, r)| b * r).sum();
    Ok(quadratic - pair - bias)
}

/// `R_i(s) = rho'(s_i) (b_i + sum_j W_ij rho(s_j))`.
pub fn drive(params: &NetworkParams, state: &[f64]) -> Result<Vec<f64>, ModelError> {
    let mut out = net_input(params, state)?;
    let nl = params.nonlinearity;
    for (r, &s) in out.iter_mut().zip(state) {
        *r *= nl.rho_prime(s);
    }
    Ok(out)
}

/// Analytic `dE/ds_i = s_i - rho'(s_i) (b_i + sum_j W_ij rho(s_j))`.
pub fn energy_gradient(params: &NetworkParams, state: &[f64]) -> Result<Vec<f64>, ModelError> {
    let r = drive(params, state)?;
    Ok(state.iter().zip(r).map(|(s, r)| s - r).collect())
}

/// `R(s + delta) - R(s)`, evaluated through rate increments so that small
/// perturbations do not cancel against the much larger base values.
pub fn drive_increment(
    params: &NetworkParams,
    state: &[f64],
    delta: &[f64],
) -> Result<Vec<f64>, ModelError> {
    params.check_state(state)?;
    check_len(state.len(), delta.len())?;
    let nl = params.nonlinearity;
    let rate_steps: Vec<f64> = state
        .iter()
        .zip(delta)
        .map(|(&s, &d)| nl.rho_increment(s, d))
        .collect();
    let mut input_steps = vec![0.0; state.len()];
    params.accumulate_coupling(&rate_steps, &mut input_steps);
    let base = net_input(params, state)?;
    Ok((0..state.len())
        .map(|i| {
            let before = nl.rho_prime(state[i]);
            let after = nl.rho_prime(state[i] + delta[i]);
            if before == after {
                before * input_steps[i]
            } else {
                after * (base[i] + input_steps[i]) - before * base[i]
            }
        })
        .collect())
}

/// `dR/ds` together with the units sitting close to a kink.
#[derive(Debug, Clone, PartialEq)]
pub struct DriveJacobian {
    pub matrix: DMatrix<f64>,
    /// Units within the requested margin of `beta1` or `beta2`; the matrix
    /// there uses the closed-interval `rho'` convention.
    pub kink_contacts: Vec<usize>,
}

impl DriveJacobian {
    pub fn touches_kink(&self) -> bool {
        !self.kink_contacts.is_empty()
    }

    pub fn max_asymmetry(&self) -> f64 {
        max_asymmetry(&self.matrix)
    }
}

/// Entries `rho'(s_i) W_ij rho'(s_j)` with a zero diagonal (`rho'' = 0` away from kinks).
pub fn drive_jacobian(
    params: &NetworkParams,
    state: &[f64],
    kink_margin: f64,
) -> Result<DriveJacobian, ModelError> {
    params.check_state(state)?;
    Ok(jacobian_from_dense(
        &params.global_weights(),
        params.nonlinearity,
        state,
        kink_margin,
    ))
}

/// Same as [`drive_jacobian`] for an arbitrary dense coupling matrix.
pub fn jacobian_from_dense(
    weights: &DMatrix<f64>,
    nonlinearity: HardSigmoid,
    state: &[f64],
    kink_margin: f64,
) -> DriveJacobian {
    let n = state.len();
    assert_eq!(weights.shape(), (n, n), "coupling matrix must be n x n");
    let slopes: Vec<f64> = state.iter().map(|&s| nonlinearity.rho_prime(s)).collect();
    let matrix = DMatrix::from_fn(n, n, |i, j| {
        if i == j {
            0.0
        } else {
            slopes[i] * weights[(i, j)] * slopes[j]
        }
    });
    let kink_contacts = kink_contacts(nonlinearity, state, kink_margin);
    DriveJacobian {
        matrix,
        kink_contacts,
    }
}

pub fn kink_contacts(nonlinearity: HardSigmoid, state: &[f64], margin: f64) -> Vec<usize> {
    state
        .iter()
        .enumerate()
        .filter(|(_, &s)| nonlinearity.kink_distance(s) < margin)
        .map(|(i, _)| i)
        .collect()
}

pub fn max_asymmetry(m: &DMatrix<f64>) -> f64 {
    let mut worst = 0.0f64;
    for i in 0..m.nrows() {
        for j in (i + 1)..m.ncols() {
            worst = worst.max((m[(i, j)] - m[(j, i)]).abs());
        }
    }
    worst
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn nl() -> HardSigmoid {
        HardSigmoid::default()
    }

    fn two_unit_net(w12: f64) -> NetworkParams {
        // smallest legal topology is three layers; a zero-sized coupling to a
        // third unit leaves the pair isolated
        let topo = LayeredTopology::new(vec![1, 1, 1]).unwrap();
        let blocks = vec![DMatrix::from_element(1, 1, w12), DMatrix::zeros(1, 1)];
        NetworkParams::new(topo, blocks, vec![0.0; 3], nl()).unwrap()
    }

    #[test]
    fn rho_piecewise_values() {
        let nl = nl();
        assert_eq!(nl.rho(-1.0), 0.0);
        assert_eq!(nl.rho(0.0), 0.5);
        assert_eq!(nl.rho(2.0), 1.0);
        assert_eq!(nl.rho(nl.beta1()), 0.0);
        assert_eq!(nl.rho(nl.beta2()), 1.0);
    }

    #[test]
    fn rho_endpoints_exact_for_awkward_thresholds() {
        let nl = HardSigmoid::new(-0.3, 0.7).unwrap();
        assert_eq!(nl.rho(0.7), 1.0);
        assert_eq!(nl.rho(-0.3), 0.0);
    }

    #[test]
    fn rho_prime_closed_interval() {
        let nl = nl();
        assert_eq!(nl.rho_prime(0.0), 1.0);
        assert_eq!(nl.rho_prime(nl.beta2()), 1.0);
        assert_eq!(nl.rho_prime(nl.beta1()), 1.0);
        assert_eq!(nl.rho_prime(10.0), 0.0);
        assert_eq!(nl.rho_prime(f64::NAN), 0.0);
    }

    #[test]
    fn thresholds_rejected() {
        assert!(HardSigmoid::new(-0.5, 0.6).is_err());
        assert!(HardSigmoid::new(0.1, 1.1).is_err());
        assert!(HardSigmoid::new(-1.0, 0.0).is_err());
        assert!(HardSigmoid::new(f64::NAN, 0.5).is_err());
    }

    #[test]
    fn topology_index_map_is_a_bijection() {
        let topo = LayeredTopology::new(vec![2, 3, 4]).unwrap();
        assert_eq!(topo.n_units(), 9);
        let mut seen = vec![false; 9];
        for l in 0..3 {
            for u in 0..topo.layer_size(l) {
                let idx = topo.unit_index(l, u);
                assert!(!seen[idx]);
                seen[idx] = true;
                assert_eq!(topo.locate(idx), (l, u));
            }
        }
        assert!(seen.into_iter().all(|s| s));
        assert_eq!(topo.fan_in(0), 3);
        assert_eq!(topo.fan_in(1), 6);
        assert_eq!(topo.fan_in(2), 3);
    }

    #[test]
    fn topology_rejects_short_or_empty() {
        assert!(LayeredTopology::new(vec![2, 3]).is_err());
        assert!(LayeredTopology::new(vec![2, 0, 3]).is_err());
    }

    #[test]
    fn energy_hand_values() {
        let topo = LayeredTopology::new(vec![1, 1, 1]).unwrap();
        let zero = NetworkParams::zeros(topo.clone(), nl());
        assert_eq!(energy(&zero, &[0.0; 3]).unwrap(), 0.0);

        // pair W12 = 1 at s = 0: E = -1 * 0.5 * 0.5
        let pair = two_unit_net(1.0);
        let mut s = vec![0.0, 0.0, -2.0]; // third unit silent: rho = 0
        assert_eq!(energy(&pair, &s).unwrap(), -0.25 + 2.0);
        s[2] = -0.5;
        // rho(-0.5) = 0 exactly so the third unit contributes only s^2/2
        assert_eq!(energy(&pair, &s).unwrap(), -0.25 + 0.125);

        // isolated unit with b = 1 at 0: -b rho(0)
        let biased = zero.with_biases(vec![1.0, 0.0, 0.0]).unwrap();
        let e = energy(&biased, &[0.0, -1.0, -1.0]).unwrap();
        assert_eq!(e, -0.5 + 1.0);
    }

    #[test]
    fn drive_of_saturated_unit_is_zero() {
        let p = two_unit_net(0.9).with_biases(vec![3.0, 0.0, 0.0]).unwrap();
        let r = drive(&p, &[5.0, 0.1, 0.0]).unwrap();
        assert_eq!(r[0], 0.0);
    }

    #[test]
    fn isolated_unit_drive_is_bias() {
        let topo = LayeredTopology::new(vec![1, 1, 1]).unwrap();
        let p = NetworkParams::zeros(topo, nl())
            .with_biases(vec![0.3, 0.0, 0.0])
            .unwrap();
        assert_eq!(drive(&p, &[0.1, 0.0, 0.0]).unwrap()[0], 0.3);
    }

    #[test]
    fn zero_net_gradient_is_state_when_saturated() {
        let topo = LayeredTopology::new(vec![2, 2, 2]).unwrap();
        let p = NetworkParams::zeros(topo, nl());
        let s = [3.0, -4.0, 0.9, -0.7, 1.5, -2.5];
        assert_eq!(energy_gradient(&p, &s).unwrap(), s.to_vec());
    }

    #[test]
    fn jacobian_hand_values() {
        let p = two_unit_net(0.7);
        let j = drive_jacobian(&p, &[0.1, -0.2, 0.0], 1e-3).unwrap();
        assert_eq!(j.matrix[(0, 1)], 0.7);
        assert_eq!(j.matrix[(1, 0)], 0.7);
        assert_eq!(j.matrix[(0, 0)], 0.0);
        assert_eq!(j.matrix[(1, 1)], 0.0);
        assert!(!j.touches_kink());

        let saturated = drive_jacobian(&p, &[2.0, -3.0, 9.0], 1e-3).unwrap();
        assert!(saturated.matrix.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn jacobian_reports_kink_contacts() {
        let p = two_unit_net(0.7);
        let j = drive_jacobian(&p, &[0.4999995, -0.2, -0.5], 1e-3).unwrap();
        assert_eq!(j.kink_contacts, vec![0, 2]);
        // rho' convention still applied at the contact
        assert_eq!(j.matrix[(0, 1)], 0.7);
    }

    #[test]
    fn dimension_mismatch_is_reported() {
        let p = two_unit_net(0.1);
        assert!(matches!(
            energy(&p, &[0.0; 2]),
            Err(ModelError::DimensionMismatch { expected: 3, found: 2 })
        ));
        assert!(drive(&p, &[0.0; 4]).is_err());
        assert!(energy_gradient(&p, &[0.0; 1]).is_err());
    }

    #[test]
    fn assemble_symmetric_variants() {
        let topo = LayeredTopology::new(vec![2, 3, 1]).unwrap();
        let a = DMatrix::from_row_slice(2, 3, &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let b = DMatrix::from_row_slice(3, 2, &[0.0, 1.0, 0.0, 1.0, 0.0, 1.0]);
        let lower = DMatrix::from_row_slice(3, 1, &[0.5, -0.5, 0.25]);

        let same = NetworkParams::assemble_symmetric(
            topo.clone(),
            vec![
                RawBlock::Directed {
                    forward: a.clone(),
                    backward: a.transpose(),
                },
                RawBlock::Single(lower.clone()),
            ],
            vec![0.0; 6],
            nl(),
        )
        .unwrap();
        assert_eq!(same.block(0), &a);
        assert_eq!(same.block(1), &lower);

        let averaged = NetworkParams::assemble_symmetric(
            topo.clone(),
            vec![
                RawBlock::Directed {
                    forward: a.clone(),
                    backward: b.clone(),
                },
                RawBlock::Single(lower),
            ],
            vec![0.0; 6],
            nl(),
        )
        .unwrap();
        let expected = DMatrix::from_row_slice(2, 3, &[0.5, 1.0, 1.5, 2.5, 3.0, 3.5]);
        assert_eq!(averaged.block(0), &expected);
        assert_eq!(max_asymmetry(&averaged.global_weights()), 0.0);

        let bad = NetworkParams::assemble_symmetric(
            topo,
            vec![RawBlock::Single(b), RawBlock::Single(DMatrix::zeros(3, 1))],
            vec![0.0; 6],
            nl(),
        );
        assert!(matches!(bad, Err(ModelError::BlockShape { index: 0, .. })));
    }

    #[test]
    fn global_matrix_structure() {
        let topo = LayeredTopology::new(vec![2, 3, 2, 4]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let p = NetworkParams::random(topo.clone(), nl(), WeightScale::FanIn, &mut rng).unwrap();
        let w = p.global_weights();
        for i in 0..topo.n_units() {
            assert_eq!(w[(i, i)], 0.0);
            for j in 0..topo.n_units() {
                assert_eq!(w[(i, j)], w[(j, i)]);
                assert_eq!(w[(i, j)], p.weight(i, j));
                let (li, _) = topo.locate(i);
                let (lj, _) = topo.locate(j);
                if li.abs_diff(lj) != 1 {
                    assert_eq!(w[(i, j)], 0.0);
                }
            }
        }
        assert!(p.linear_region_stable());
    }

    #[test]
    fn random_init_centres_biases() {
        let topo = LayeredTopology::new(vec![3, 5, 4]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let p = NetworkParams::random(topo, nl(), WeightScale::Uniform(0.1), &mut rng).unwrap();
        // at s = 0 every unit has zero drive
        let r = drive(&p, &[0.0; 12]).unwrap();
        assert!(r.iter().all(|v| v.abs() < 1e-15), "{r:?}");
    }

    #[test]
    fn drive_increment_matches_difference_away_from_kinks() {
        let topo = LayeredTopology::new(vec![3, 4, 2]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let p = NetworkParams::random(topo, nl(), WeightScale::FanIn, &mut rng).unwrap();
        let s: Vec<f64> = (0..9).map(|i| -0.4 + 0.09 * i as f64).collect();
        let mut d = vec![0.0; 9];
        d[1] = 0.3; // crosses beta2
        d[4] = -1e-3;
        let inc = drive_increment(&p, &s, &d).unwrap();
        let moved: Vec<f64> = s.iter().zip(&d).map(|(a, b)| a + b).collect();
        let r0 = drive(&p, &s).unwrap();
        let r1 = drive(&p, &moved).unwrap();
        for i in 0..9 {
            assert!((inc[i] - (r1[i] - r0[i])).abs() < 1e-14, "unit {i}");
        }
    }
}
