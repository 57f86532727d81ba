//! Synthetic datasets.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::config::DatasetKind;
use super::{stream_rng, HarnessError, Stream};
use crate::bridge;
use crate::dynamics::DynamicsConfig;
use crate::learning::Example;
use crate::model::{HardSigmoid, LayeredTopology, NetworkParams, WeightScale};

/// Inputs and targets are drawn inside the linear region of the default rate function.
pub const INPUT_RANGE: f64 = 0.4;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeneratorDescriptor {
    pub name: DatasetKind,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub examples: Vec<Example>,
    pub generator: GeneratorDescriptor,
}

/// Builds a dataset for `topology`. `n` is ignored for xor. The teacher for
/// `random_teacher` is a fresh network drawn from its own seed stream.
pub fn generate_dataset(
    kind: DatasetKind,
    topology: &LayeredTopology,
    nonlinearity: HardSigmoid,
    n: usize,
    seed: u64,
    dynamics: &DynamicsConfig,
) -> Result<Dataset, HarnessError> {
    let n_in = topology.layer_size(topology.input_layer());
    let n_out = topology.layer_size(topology.output_layer());
    let examples = match kind {
        DatasetKind::Xor => {
            if n_in != 2 || n_out != 1 {
                return Err(HarnessError::Dataset(format!(
                    "xor needs 2 inputs and 1 output, topology has {n_in} and {n_out}"
                )));
            }
            xor_examples()
        }
        DatasetKind::Identity => {
            let mut rng = stream_rng(seed, Stream::DatasetInputs);
            (0..n)
                .map(|_| {
                    let x = random_vector(n_in, &mut rng);
                    let y = (0..n_out).map(|i| x.get(i).copied().unwrap_or(0.0)).collect();
                    Example { x, y }
                })
                .collect()
        }
        DatasetKind::RandomTeacher => {
            let mut rng = stream_rng(seed, Stream::Teacher);
            let teacher = NetworkParams::random(topology.clone(), nonlinearity, WeightScale::FanIn, &mut rng)?;
            return random_teacher_dataset(&teacher, n, seed, dynamics);
        }
    };
    Ok(Dataset {
        examples,
        generator: GeneratorDescriptor { name: kind, seed },
    })
}

/// `n` examples labelled by settling `teacher` on uniform inputs. Inputs on
/// which the teacher does not settle are redrawn, up to `10 n` attempts.
pub fn random_teacher_dataset(
    teacher: &NetworkParams,
    n: usize,
    seed: u64,
    dynamics: &DynamicsConfig,
) -> Result<Dataset, HarnessError> {
    let topology = teacher.topology();
    let n_in = topology.layer_size(topology.input_layer());
    let mut rng = stream_rng(seed, Stream::DatasetInputs);
    let mut examples = Vec::with_capacity(n);
    let mut attempts = 0;
    while examples.len() < n {
        attempts += 1;
        if attempts > 10 * n.max(1) {
            return Err(HarnessError::Dataset(format!(
                "teacher settled on only {} of {attempts} inputs",
                examples.len()
            )));
        }
        let x = random_vector(n_in, &mut rng);
        match bridge::settle(teacher, &x, dynamics) {
            Ok(fixed) => examples.push(Example {
                y: fixed.layer(topology, topology.output_layer()).to_vec(),
                x,
            }),
            Err(bridge::BridgeError::Dynamics(crate::dynamics::DynamicsError::NonConvergence { .. })) => {}
            Err(e) => return Err(e.into()),
        }
    }
    Ok(Dataset {
        examples,
        generator: GeneratorDescriptor {
            name: DatasetKind::RandomTeacher,
            seed,
        },
    })
}

/// The four truth-table rows with 0/1 mapped to -0.4/0.4.
pub fn xor_examples() -> Vec<Example> {
    let level = |bit: u8| if bit == 1 { INPUT_RANGE } else { -INPUT_RANGE };
    [(0u8, 0u8), (0, 1), (1, 0), (1, 1)]
        .into_iter()
        .map(|(a, b)| Example {
            x: vec![level(a), level(b)],
            y: vec![level(a ^ b)],
        })
        .collect()
}

pub fn random_vector<R: Rng + ?Sized>(n: usize, rng: &mut R) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(-INPUT_RANGE..=INPUT_RANGE)).collect()
}
