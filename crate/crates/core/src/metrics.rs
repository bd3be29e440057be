//! Parameter accounting and classification scores.
//!
//! Dynamic parameters are those updated by training: dense weights,
//! coefficients `W_α`, biases, and the dictionary itself for low-rank
//! layers. Static parameters are frozen dictionary entries. The
//! full-equivalent count is what the layer would need unfactored.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::layers::AnyLayer;
use crate::network::Network;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerParams {
    pub kind: String,
    pub dynamic: usize,
    pub r#static: usize,
    pub full_equivalent: usize,
    pub biases: usize,
}

impl LayerParams {
    /// Dynamic count without biases.
    pub fn dynamic_weights(&self) -> usize {
        self.dynamic - self.biases
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamReport {
    pub layers: Vec<LayerParams>,
    pub dynamic: usize,
    pub r#static: usize,
    pub full_equivalent: usize,
    pub fraction_dynamic: f64,
}

pub fn layer_params(layer: &AnyLayer) -> LayerParams {
    let (dynamic_w, static_w, full_w, biases) = match layer {
        AnyLayer::Dense(l) => (l.w.len(), 0, l.w.len(), l.bias.len()),
        AnyLayer::Conv(l) => (l.w.len(), 0, l.w.len(), l.bias.len()),
        AnyLayer::PredictedDense(l) => {
            let (mut d, mut s) = (0, 0);
            for c in &l.columns {
                d += c.w_alpha.len();
                if c.dictionary.trainable {
                    d += c.dictionary.u.len();
                } else {
                    s += c.dictionary.u.len();
                }
            }
            (d, s, l.n_v() * l.n_h(), l.bias.len())
        }
        AnyLayer::PredictedConv(l) => {
            let u = l.dictionary.u.len();
            let (d, s) = if l.dictionary.trainable { (u, 0) } else { (0, u) };
            (l.w_alpha.len() + d, s, l.geometry.patch_len() * l.n_filters(), l.bias.len())
        }
    };
    LayerParams {
        kind: layer.kind().to_string(),
        dynamic: dynamic_w + biases,
        r#static: static_w,
        full_equivalent: full_w + biases,
        biases,
    }
}

pub fn count_parameters(net: &Network) -> ParamReport {
    let layers: Vec<LayerParams> = net.layers.iter().map(layer_params).collect();
    let dynamic = layers.iter().map(|l| l.dynamic).sum();
    let r#static = layers.iter().map(|l| l.r#static).sum();
    let full_equivalent: usize = layers.iter().map(|l| l.full_equivalent).sum();
    ParamReport {
        fraction_dynamic: dynamic as f64 / full_equivalent as f64,
        layers,
        dynamic,
        r#static,
        full_equivalent,
    }
}

/// Fraction of predictions equal to their label.
pub fn accuracy(predictions: &[usize], labels: &[usize]) -> Result<f64> {
    if predictions.len() != labels.len() {
        return Err(Error::shape(
            "accuracy",
            format!("{} predictions for {} labels", predictions.len(), labels.len()),
        ));
    }
    if labels.is_empty() {
        return Err(Error::InsufficientData("accuracy of an empty set".into()));
    }
    let hits = predictions.iter().zip(labels).filter(|(p, l)| p == l).count();
    Ok(hits as f64 / labels.len() as f64)
}

/// Fraction of predictions that differ from their label.
pub fn error_rate(predictions: &[usize], labels: &[usize]) -> Result<f64> {
    accuracy(predictions, labels)?;
    let misses = predictions.iter().zip(labels).filter(|(p, l)| p != l).count();
    Ok(misses as f64 / labels.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dictionary::{build_dictionary, DictionaryContext, DictionaryStrategy};
    use crate::index_sets::{make_columns, WeightSpace};
    use crate::layers::{split_units, Activation, DenseLayer, PredictedDenseLayer};
    use crate::seed::rng_from_seed;

    #[test]
    fn accuracy_cases() {
        assert_eq!(accuracy(&[1, 2], &[1, 2]).unwrap(), 1.0);
        assert!(accuracy(&[], &[]).is_err());
        assert!((accuracy(&[0, 1, 2, 3, 4], &[0, 1, 2, 0, 0]).unwrap() - 0.6).abs() < 1e-15);
        assert!(accuracy(&[1], &[1, 2]).is_err());
    }

    #[test]
    fn full_mlp_counts() {
        let mut rng = rng_from_seed(0);
        let net = Network::new(vec![
            AnyLayer::Dense(DenseLayer::random(784, 500, Activation::Sigmoid, &mut rng)),
            AnyLayer::Dense(DenseLayer::random(500, 500, Activation::Sigmoid, &mut rng)),
            AnyLayer::Dense(DenseLayer::random(500, 10, Activation::Softmax, &mut rng)),
        ])
        .unwrap();
        let r = count_parameters(&net);
        let weights: usize = r.layers.iter().map(LayerParams::dynamic_weights).sum();
        assert_eq!(weights, 647_000);
        assert_eq!(r.fraction_dynamic, 1.0);
        let share = r.layers[2].dynamic_weights() as f64 / weights as f64;
        assert!((share - 0.0077).abs() < 1e-3);
    }

    fn predicted(j: usize) -> LayerParams {
        let space = WeightSpace::flat(784).unwrap();
        let fam = make_columns(space, j, 78.0 / 784.0, 5).unwrap();
        let dicts = fam
            .into_columns()
            .into_iter()
            .map(|a| {
                let d = build_dictionary(DictionaryStrategy::RandCon, &a, DictionaryContext::None, None, 0).unwrap();
                (a, d)
            })
            .collect();
        let hidden = split_units(500, j).unwrap();
        let layer = PredictedDenseLayer::random(dicts, &hidden, Activation::Sigmoid, &mut rng_from_seed(1)).unwrap();
        layer_params(&AnyLayer::PredictedDense(layer))
    }

    #[test]
    fn dynamic_count_ignores_columns() {
        let one = predicted(1);
        assert_eq!(one.dynamic_weights(), 39_000);
        assert_eq!(one.full_equivalent - one.biases, 392_000);
        for j in [2, 5, 10] {
            let p = predicted(j);
            assert_eq!(p.dynamic, one.dynamic);
            assert_eq!(p.r#static, j * one.r#static);
        }
    }
}
