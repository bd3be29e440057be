//! JSON checkpoints of trained cells.

use std::path::Path;

use featpred::layers::{AnyLayer, Layer};
use featpred::network::Network;
use featpred::rica::{RicaModel, Whitening};
use featpred::Matrix;
use serde::{Deserialize, Serialize};

use crate::error::CliError;

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum SavedModel {
    Network { network: Network },
    Rica { model: RicaModel, whitening: Whitening },
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Checkpoint {
    pub experiment_id: String,
    pub strategy: String,
    pub fraction: f64,
    pub columns: usize,
    pub seed: u64,
    /// Height, width and channels of one input image (or patch for RICA).
    pub input_shape: [usize; 3],
    pub model: SavedModel,
}

/// Feature vectors of one layer with the shape each should be drawn in.
pub struct Features {
    /// One feature per column.
    pub weights: Matrix,
    pub shape: [usize; 3],
}

fn flat_shape(n: usize) -> [usize; 3] {
    let side = (n as f64).sqrt().round() as usize;
    if side * side == n {
        [side, side, 1]
    } else {
        [1, n, 1]
    }
}

impl Checkpoint {
    pub fn save(&self, path: &Path) -> Result<(), CliError> {
        let text = serde_json::to_string(self).map_err(|e| CliError::Other(e.to_string()))?;
        std::fs::write(path, text).map_err(|e| CliError::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| CliError::Data(format!("{}: not a checkpoint: {e}", path.display())))
    }

    pub fn features(&self, layer: usize) -> Result<Features, CliError> {
        match &self.model {
            SavedModel::Network { network } => {
                let l = network.layers.get(layer).ok_or_else(|| {
                    CliError::Config(format!("layer {layer} does not exist; the network has {}", network.layers.len()))
                })?;
                let shape = match l {
                    AnyLayer::Conv(c) => [c.geometry.filter_height, c.geometry.filter_width, c.geometry.in_channels],
                    AnyLayer::PredictedConv(c) => [c.geometry.filter_height, c.geometry.filter_width, c.geometry.in_channels],
                    _ if layer == 0 => self.input_shape,
                    other => flat_shape(other.input_len()),
                };
                Ok(Features {
                    weights: l.effective_weights(),
                    shape,
                })
            }
            SavedModel::Rica { model, .. } => {
                if layer != 0 {
                    return Err(CliError::Config(format!("layer {layer} does not exist; RICA has one layer")));
                }
                Ok(Features {
                    weights: model.weights(),
                    shape: self.input_shape,
                })
            }
        }
    }
}
