//! JSON wire format for network layers: row-major weight matrices.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{Activation, Dense, DenseNet};
use crate::scalar::Scalar;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Scalar")]
pub struct LayerRecord<T> {
    pub w: Vec<Vec<T>>,
    pub b: Vec<T>,
    pub act: Activation,
}

pub fn layers_to_records<T: Scalar>(net: &DenseNet<T>) -> Vec<LayerRecord<T>> {
    net.layers
        .iter()
        .map(|l| LayerRecord {
            w: l.weights.chunks_exact(l.inputs).map(<[T]>::to_vec).collect(),
            b: l.bias.clone(),
            act: l.activation,
        })
        .collect()
}

pub fn records_to_net<T: Scalar>(records: &[LayerRecord<T>]) -> Result<DenseNet<T>> {
    let mut layers = Vec::with_capacity(records.len());
    for (i, r) in records.iter().enumerate() {
        let outputs = r.w.len();
        let inputs = r.w.first().map_or(0, Vec::len);
        if outputs == 0 || inputs == 0 || r.w.iter().any(|row| row.len() != inputs) {
            return Err(Error::Checkpoint(format!("layer {i}: ragged or empty weight matrix")));
        }
        if r.b.len() != outputs {
            return Err(Error::Checkpoint(format!("layer {i}: bias length {} != {outputs}", r.b.len())));
        }
        layers.push(Dense {
            inputs,
            outputs,
            weights: r.w.concat(),
            bias: r.b.clone(),
            activation: r.act,
        });
    }
    DenseNet::from_layers(layers).map_err(|e| Error::Checkpoint(e.to_string()))
}
