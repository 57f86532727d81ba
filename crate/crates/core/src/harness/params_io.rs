//! Parameter files: versioned TOML with topology, thresholds, biases and
//! row-major weight blocks.
//!
//! ```toml
//! format_version = 1
//! layers = [1, 2, 2]
//! beta1 = -0.5
//! beta2 = 0.5
//! biases = [0.0, 0.0, 0.0, 0.0, 0.0]
//!
//! [[blocks]]
//! rows = 1
//! cols = 2
//! values = [0.1, -0.2]
//!
//! [[blocks]]
//! rows = 2
//! cols = 2
//! values = [0.3, 0.0, 0.0, 0.3]
//! ```

use std::path::Path;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{HardSigmoid, LayeredTopology, ModelError, NetworkParams};

pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum ParamsError {
    #[error("malformed parameter file: {0}")]
    Syntax(String),
    #[error("unsupported format_version {0} (expected {FORMAT_VERSION})")]
    Version(u32),
    #[error("block {index}: {rows}x{cols} needs {expected} values, found {found}")]
    BlockLength {
        index: usize,
        rows: usize,
        cols: usize,
        expected: usize,
        found: usize,
    },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("{path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct BlockRecord {
    rows: usize,
    cols: usize,
    values: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ParamsRecord {
    format_version: u32,
    layers: Vec<usize>,
    beta1: f64,
    beta2: f64,
    biases: Vec<f64>,
    blocks: Vec<BlockRecord>,
}

pub fn params_to_toml(params: &NetworkParams) -> String {
    let nl = params.nonlinearity();
    let record = ParamsRecord {
        format_version: FORMAT_VERSION,
        layers: params.topology().layer_sizes().to_vec(),
        beta1: nl.beta1(),
        beta2: nl.beta2(),
        biases: params.biases().to_vec(),
        blocks: params
            .blocks()
            .iter()
            .map(|m| BlockRecord {
                rows: m.nrows(),
                cols: m.ncols(),
                values: m.transpose().iter().copied().collect(),
            })
            .collect(),
    };
    toml::to_string(&record).expect("parameter record serializes")
}

pub fn parse_params(text: &str) -> Result<NetworkParams, ParamsError> {
    let record: ParamsRecord = toml::from_str(text).map_err(|e| ParamsError::Syntax(e.message().trim().to_string()))?;
    if record.format_version != FORMAT_VERSION {
        return Err(ParamsError::Version(record.format_version));
    }
    let topology = LayeredTopology::new(record.layers)?;
    let nonlinearity = HardSigmoid::new(record.beta1, record.beta2)?;
    let blocks = record
        .blocks
        .into_iter()
        .enumerate()
        .map(|(index, b)| {
            let expected = b.rows.saturating_mul(b.cols);
            if b.values.len() != expected {
                return Err(ParamsError::BlockLength {
                    index,
                    rows: b.rows,
                    cols: b.cols,
                    expected,
                    found: b.values.len(),
                });
            }
            Ok(DMatrix::from_row_slice(b.rows, b.cols, &b.values))
        })
        .collect::<Result<Vec<_>, _>>()?;
    Ok(NetworkParams::new(topology, blocks, record.biases, nonlinearity)?)
}

pub fn read_params(path: &Path) -> Result<NetworkParams, ParamsError> {
    let text = std::fs::read_to_string(path).map_err(|source| ParamsError::Io {
        path: path.display().to_string(),
        source,
    })?;
    parse_params(&text)
}

pub fn write_params(params: &NetworkParams, path: &Path) -> Result<(), ParamsError> {
    std::fs::write(path, params_to_toml(params)).map_err(|source| ParamsError::Io {
        path: path.display().to_string(),
        source,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dynamics::NoiseRng;
    use crate::model::WeightScale;
    use rand::SeedableRng;

    #[test]
    fn round_trip_is_bit_exact() {
        let topo = LayeredTopology::new(vec![2, 3, 4, 2]).unwrap();
        let mut rng = NoiseRng::seed_from_u64(3);
        let p = NetworkParams::random(topo, HardSigmoid::default(), WeightScale::FanIn, &mut rng).unwrap();
        let back = parse_params(&params_to_toml(&p)).unwrap();
        assert_eq!(back, p);
        assert_eq!(params_to_toml(&back), params_to_toml(&p));
    }

    #[test]
    fn documented_example_parses() {
        let text = "format_version = 1\nlayers = [1, 2, 2]\nbeta1 = -0.5\nbeta2 = 0.5\n\
                    biases = [0.0, 0.0, 0.0, 0.0, 0.0]\n\
                    [[blocks]]\nrows = 1\ncols = 2\nvalues = [0.1, -0.2]\n\
                    [[blocks]]\nrows = 2\ncols = 2\nvalues = [0.3, 0.0, 0.0, 0.3]\n";
        let p = parse_params(text).unwrap();
        assert_eq!(p.block(0)[(0, 1)], -0.2);
        assert_eq!(p.weight(0, 2), -0.2);
    }

    #[test]
    fn rejects_bad_files() {
        let good = "format_version = 1\nlayers = [1, 1, 1]\nbeta1 = -0.5\nbeta2 = 0.5\nbiases = [0.0, 0.0, 0.0]\n\
                    [[blocks]]\nrows = 1\ncols = 1\nvalues = [0.1]\n\
                    [[blocks]]\nrows = 1\ncols = 1\nvalues = [0.1]\n";
        assert!(parse_params(good).is_ok());
        assert!(matches!(
            parse_params(&good.replace("format_version = 1", "format_version = 2")),
            Err(ParamsError::Version(2))
        ));
        assert!(matches!(
            parse_params(&good.replacen("values = [0.1]", "values = [0.1, 0.2]", 1)),
            Err(ParamsError::BlockLength { .. })
        ));
        assert!(parse_params(&good.replace("beta2 = 0.5", "beta2 = 0.6")).is_err());
        assert!(parse_params(&good.replacen("rows = 1", "rows = 2", 1)).is_err());
        assert!(parse_params("layers = ").is_err());
    }
}
