//! Local weight updates from the nudge phase and a reference gradient-descent
//! updater to compare them with.
//!
//! During the nudge phase a weight `W_ij` changes by `eta * ds_i * rho(s_j)`:
//! the post-synaptic rate of change times the pre-synaptic rate. Layer `k`
//! only starts moving with a factor `eps^(k+1)`, so updates to the block whose
//! output side is layer `k` are optionally rescaled by `eps^-(k+1)`.

use std::io::Write;

use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::bridge::{self, BridgeError};
use crate::dynamics::{self, DynamicsConfig, DynamicsError, NoiseRng};
use crate::fmt::float;
use crate::model::{HardSigmoid, LayeredTopology, ModelError, NetworkParams, RawBlock, StateVector};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum LearningError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Dynamics(#[from] DynamicsError),
    #[error(transparent)]
    Bridge(#[from] BridgeError),
    #[error("invalid learning config: {field} {reason}")]
    InvalidConfig { field: &'static str, reason: String },
    #[error("dataset is empty")]
    EmptyDataset,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LearningConfig {
    pub base_rate: f64,
    pub per_layer_rescale: bool,
    pub nudge_steps: usize,
    pub symmetrize_updates: bool,
    pub update_biases: bool,
    pub epochs: usize,
    pub dynamics: DynamicsConfig,
}

impl Default for LearningConfig {
    fn default() -> Self {
        LearningConfig {
            base_rate: 0.1,
            per_layer_rescale: true,
            nudge_steps: 3,
            symmetrize_updates: true,
            update_biases: false,
            epochs: 200,
            dynamics: DynamicsConfig::default(),
        }
    }
}

impl LearningConfig {
    pub fn validate(&self) -> Result<(), LearningError> {
        if !(self.base_rate > 0.0 && self.base_rate.is_finite()) {
            return Err(LearningError::InvalidConfig {
                field: "base_rate",
                reason: "must be finite and > 0".into(),
            });
        }
        if self.nudge_steps == 0 {
            return Err(LearningError::InvalidConfig {
                field: "nudge_steps",
                reason: "must be >= 1".into(),
            });
        }
        self.dynamics.validate()?;
        Ok(())
    }
}

/// One training pair.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Example {
    pub x: Vec<f64>,
    pub y: Vec<f64>,
}

/// Per-block weight changes in both directions plus bias changes.
///
/// `forward[k]` (upper x lower) changes the weights into layer `k`,
/// `backward[k]` (lower x upper) the weights into layer `k + 1`.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightDeltas {
    pub forward: Vec<DMatrix<f64>>,
    pub backward: Vec<DMatrix<f64>>,
    pub biases: Vec<f64>,
}

impl WeightDeltas {
    pub fn zeros(topology: &LayeredTopology) -> Self {
        let forward: Vec<DMatrix<f64>> = (0..topology.n_blocks())
            .map(|k| {
                let (r, c) = topology.block_shape(k);
                DMatrix::zeros(r, c)
            })
            .collect();
        let backward = forward.iter().map(|m| m.transpose()).collect();
        WeightDeltas {
            forward,
            backward,
            biases: vec![0.0; topology.n_units()],
        }
    }

    pub fn add_assign(&mut self, other: &WeightDeltas) {
        for (a, b) in self.forward.iter_mut().zip(&other.forward) {
            *a += b;
        }
        for (a, b) in self.backward.iter_mut().zip(&other.backward) {
            *a += b;
        }
        for (a, b) in self.biases.iter_mut().zip(&other.biases) {
            *a += b;
        }
    }

    /// Multiplies block `k` (both directions) by `eps^-(k+1)`. Biases of
    /// layer `k` get the same factor.
    pub fn rescale_per_layer(&mut self, topology: &LayeredTopology, epsilon: f64) {
        for k in 0..self.forward.len() {
            let factor = epsilon.powi(-(k as i32 + 1));
            self.forward[k] *= factor;
            self.backward[k] *= factor;
        }
        for layer in 0..topology.n_layers() {
            let factor = epsilon.powi(-(layer as i32 + 1));
            for b in &mut self.biases[topology.layer_range(layer)] {
                *b *= factor;
            }
        }
    }

    /// Forward blocks flattened in order, the vector compared across updaters.
    pub fn forward_flat(&self) -> Vec<f64> {
        self.forward.iter().flat_map(|m| m.iter().copied()).collect()
    }

    pub fn max_abs(&self) -> f64 {
        self.forward
            .iter()
            .chain(&self.backward)
            .flat_map(|m| m.iter())
            .chain(&self.biases)
            .fold(0.0f64, |m, v| m.max(v.abs()))
    }

    /// `max |forward_k - backward_k^T|` over all blocks.
    pub fn asymmetry(&self) -> f64 {
        directed_asymmetry(&self.forward, &self.backward)
    }
}

fn directed_asymmetry(forward: &[DMatrix<f64>], backward: &[DMatrix<f64>]) -> f64 {
    forward
        .iter()
        .zip(backward)
        .map(|(f, b)| (f - b.transpose()).amax())
        .fold(0.0, f64::max)
}

/// `D_ij = eta * (s_after - s_before)_i * rho(s_before_j)` on every existing
/// connection, optionally symmetrized as `(D + D^T) / 2`.
pub fn stdp_update(
    params: &NetworkParams,
    s_before: &StateVector,
    s_after: &StateVector,
    config: &LearningConfig,
) -> Result<WeightDeltas, LearningError> {
    let topology = params.topology();
    for len in [s_before.len(), s_after.len()] {
        if len != topology.n_units() {
            return Err(ModelError::DimensionMismatch {
                expected: topology.n_units(),
                found: len,
            }
            .into());
        }
    }
    let nl = params.nonlinearity();
    let eta = config.base_rate;
    let rate_of_change: Vec<f64> = s_after
        .values()
        .iter()
        .zip(s_before.values())
        .map(|(a, b)| a - b)
        .collect();
    let rates: Vec<f64> = s_before.values().iter().map(|&s| nl.rho(s)).collect();

    let mut forward = Vec::with_capacity(topology.n_blocks());
    let mut backward = Vec::with_capacity(topology.n_blocks());
    for k in 0..topology.n_blocks() {
        let upper = topology.layer_range(k);
        let lower = topology.layer_range(k + 1);
        let f = DMatrix::from_fn(upper.len(), lower.len(), |a, b| {
            eta * rate_of_change[upper.start + a] * rates[lower.start + b]
        });
        let bw = DMatrix::from_fn(lower.len(), upper.len(), |b, a| {
            eta * rate_of_change[lower.start + b] * rates[upper.start + a]
        });
        if config.symmetrize_updates {
            let sym = (f + bw.transpose()) * 0.5;
            backward.push(sym.transpose());
            forward.push(sym);
        } else {
            forward.push(f);
            backward.push(bw);
        }
    }
    let biases = if config.update_biases {
        rate_of_change.iter().map(|d| eta * d).collect()
    } else {
        vec![0.0; topology.n_units()]
    };
    Ok(WeightDeltas {
        forward,
        backward,
        biases,
    })
}

/// Settles on `x` and returns `-eta dC/dW` by the chain rule at the fixed point.
pub fn reference_sgd_update(
    params: &NetworkParams,
    x: &[f64],
    y_target: &[f64],
    config: &LearningConfig,
) -> Result<WeightDeltas, LearningError> {
    let fixed = bridge::settle(params, x, &config.dynamics)?;
    reference_sgd_update_at(params, &fixed, y_target, config)
}

/// Block `k`: `-eta (g_k * rho'(h^_k)) rho(h^_{k+1})^T` with `g_k = dC/dh^_k`
/// (`g_0 = y^ - y`). Bias changes, when enabled, are `-eta g_k * rho'(h^_k)`
/// on the free layers.
pub fn reference_sgd_update_at(
    params: &NetworkParams,
    fixed: &StateVector,
    y_target: &[f64],
    config: &LearningConfig,
) -> Result<WeightDeltas, LearningError> {
    let topology = params.topology();
    let nl = params.nonlinearity();
    let eta = config.base_rate;
    let oracle = bridge::backprop_oracle(params, fixed, y_target, 0.0)?;
    let mut deltas = WeightDeltas::zeros(topology);
    for k in 0..topology.n_blocks() {
        let upper = fixed.layer(topology, k);
        let lower = fixed.layer(topology, k + 1);
        let local: Vec<f64> = oracle
            .layer(k)
            .iter()
            .zip(upper)
            .map(|(g, &h)| g * nl.rho_prime(h))
            .collect();
        let block = DMatrix::from_fn(upper.len(), lower.len(), |a, b| -eta * local[a] * nl.rho(lower[b]));
        deltas.backward[k] = block.transpose();
        deltas.forward[k] = block;
        if config.update_biases {
            for (d, l) in deltas.biases[topology.layer_range(k)].iter_mut().zip(&local) {
                *d = -eta * l;
            }
        }
    }
    Ok(deltas)
}

/// One row of the training log. Epoch 0 is the untrained network and has no
/// update statistics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainMetrics {
    pub epoch: usize,
    pub mse: f64,
    pub cosine_stdp_vs_sgd: Option<f64>,
    pub weight_asymmetry: f64,
    pub skipped_examples: usize,
}

pub fn write_metrics_csv<W: Write>(rows: &[TrainMetrics], out: W) -> csv::Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["epoch", "mse", "cosine_stdp_vs_sgd", "weight_asymmetry", "skipped_examples"])?;
    for r in rows {
        w.write_record([
            r.epoch.to_string(),
            float(r.mse),
            r.cosine_stdp_vs_sgd.map(float).unwrap_or_default(),
            float(r.weight_asymmetry),
            r.skipped_examples.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// Mean over examples of the per-unit squared output error at the settled
/// state. When relaxation does not converge the last visited state is used.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Evaluation {
    pub mse: f64,
    pub non_converged: usize,
}

pub fn evaluate(
    params: &NetworkParams,
    dataset: &[Example],
    config: &DynamicsConfig,
) -> Result<Evaluation, LearningError> {
    if dataset.is_empty() {
        return Err(LearningError::EmptyDataset);
    }
    let topology = params.topology();
    let per_example: Vec<Result<(f64, bool), LearningError>> = dataset
        .par_iter()
        .map(|ex| {
            let (state, converged) = match bridge::settle(params, &ex.x, config) {
                Ok(s) => (s, true),
                Err(BridgeError::Dynamics(DynamicsError::NonConvergence { last_state, .. })) => {
                    (*last_state, false)
                }
                Err(e) => return Err(e.into()),
            };
            let out = state.layer(topology, topology.output_layer());
            if out.len() != ex.y.len() {
                return Err(ModelError::DimensionMismatch {
                    expected: out.len(),
                    found: ex.y.len(),
                }
                .into());
            }
            let se = out.iter().zip(&ex.y).map(|(a, b)| (a - b).powi(2)).sum::<f64>() / out.len() as f64;
            Ok((se, converged))
        })
        .collect();
    let mut total = 0.0;
    let mut non_converged = 0;
    for r in per_example {
        let (se, converged) = r?;
        total += se;
        non_converged += usize::from(!converged);
    }
    Ok(Evaluation {
        mse: total / dataset.len() as f64,
        non_converged,
    })
}

/// Sequential per-example training with directed weights.
///
/// Each direction of a connection is stored separately so that turning off
/// symmetrization lets them drift apart. The dynamics always run on the
/// symmetric coupling `(forward + backward^T) / 2`.
#[derive(Debug, Clone)]
pub struct Trainer {
    forward: Vec<DMatrix<f64>>,
    backward: Vec<DMatrix<f64>>,
    biases: Vec<f64>,
    topology: LayeredTopology,
    nonlinearity: HardSigmoid,
    params: NetworkParams,
    config: LearningConfig,
    rng: NoiseRng,
    epoch: usize,
}

impl Trainer {
    pub fn new(params: NetworkParams, config: LearningConfig) -> Result<Self, LearningError> {
        config.validate()?;
        Ok(Trainer {
            forward: params.blocks().to_vec(),
            backward: params.blocks().iter().map(|b| b.transpose()).collect(),
            biases: params.biases().to_vec(),
            topology: params.topology().clone(),
            nonlinearity: params.nonlinearity(),
            rng: config.dynamics.rng(),
            params,
            config,
            epoch: 0,
        })
    }

    pub fn params(&self) -> &NetworkParams {
        &self.params
    }

    pub fn into_params(self) -> NetworkParams {
        self.params
    }

    pub fn config(&self) -> &LearningConfig {
        &self.config
    }

    pub fn forward(&self) -> &[DMatrix<f64>] {
        &self.forward
    }

    pub fn backward(&self) -> &[DMatrix<f64>] {
        &self.backward
    }

    pub fn epoch(&self) -> usize {
        self.epoch
    }

    /// `max |forward_k - backward_k^T|`.
    pub fn weight_asymmetry(&self) -> f64 {
        directed_asymmetry(&self.forward, &self.backward)
    }

    /// The untrained row (epoch 0).
    pub fn initial_metrics(&self, dataset: &[Example]) -> Result<TrainMetrics, LearningError> {
        let eval = evaluate(&self.params, dataset, &self.config.dynamics)?;
        Ok(TrainMetrics {
            epoch: self.epoch,
            mse: eval.mse,
            cosine_stdp_vs_sgd: None,
            weight_asymmetry: self.weight_asymmetry(),
            skipped_examples: eval.non_converged,
        })
    }

    /// One pass over `dataset` in order. Examples whose free phase does not
    /// converge are skipped and counted.
    pub fn train_epoch(&mut self, dataset: &[Example]) -> Result<TrainMetrics, LearningError> {
        if dataset.is_empty() {
            return Err(LearningError::EmptyDataset);
        }
        let mut skipped = 0;
        let mut cosines = Vec::with_capacity(dataset.len());
        for example in dataset {
            match self.train_example(example) {
                Ok(cosine) => cosines.push(cosine),
                Err(LearningError::Bridge(BridgeError::Dynamics(DynamicsError::NonConvergence { .. }))) => {
                    skipped += 1
                }
                Err(e) => return Err(e),
            }
        }
        self.epoch += 1;
        let eval = evaluate(&self.params, dataset, &self.config.dynamics)?;
        let cosine = (!cosines.is_empty()).then(|| cosines.iter().sum::<f64>() / cosines.len() as f64);
        Ok(TrainMetrics {
            epoch: self.epoch,
            mse: eval.mse,
            cosine_stdp_vs_sgd: cosine,
            weight_asymmetry: self.weight_asymmetry(),
            skipped_examples: skipped,
        })
    }

    /// Initial row followed by one row per configured epoch.
    pub fn train(&mut self, dataset: &[Example]) -> Result<Vec<TrainMetrics>, LearningError> {
        let mut rows = vec![self.initial_metrics(dataset)?];
        for _ in 0..self.config.epochs {
            rows.push(self.train_epoch(dataset)?);
        }
        Ok(rows)
    }

    /// Free phase, nudge phase, update. Returns the cosine between the
    /// applied update and the reference gradient step at the same fixed point.
    fn train_example(&mut self, example: &Example) -> Result<f64, LearningError> {
        let cfg = self.config;
        let fixed = bridge::settle(&self.params, &example.x, &cfg.dynamics)?;
        let reference = reference_sgd_update_at(&self.params, &fixed, &example.y, &cfg)?;

        let mut state = bridge::nudged_state(&self.params, &fixed, &example.y)?;
        let mut total = WeightDeltas::zeros(&self.topology);
        for _ in 0..cfg.nudge_steps {
            let next = dynamics::step(&self.params, &state, &cfg.dynamics, &mut self.rng)?;
            total.add_assign(&stdp_update(&self.params, &state, &next, &cfg)?);
            state = next;
        }
        if cfg.per_layer_rescale {
            total.rescale_per_layer(&self.topology, cfg.dynamics.epsilon);
        }
        let cosine = bridge::cosine_similarity(&total.forward_flat(), &reference.forward_flat());
        self.apply(&total)?;
        Ok(cosine)
    }

    fn apply(&mut self, deltas: &WeightDeltas) -> Result<(), LearningError> {
        for (w, d) in self.forward.iter_mut().zip(&deltas.forward) {
            *w += d;
        }
        for (w, d) in self.backward.iter_mut().zip(&deltas.backward) {
            *w += d;
        }
        for (b, d) in self.biases.iter_mut().zip(&deltas.biases) {
            *b += d;
        }
        let raw = self
            .forward
            .iter()
            .zip(&self.backward)
            .map(|(f, b)| RawBlock::Directed {
                forward: f.clone(),
                backward: b.clone(),
            })
            .collect();
        self.params = NetworkParams::assemble_symmetric(
            self.topology.clone(),
            raw,
            self.biases.clone(),
            self.nonlinearity,
        )?;
        Ok(())
    }
}
