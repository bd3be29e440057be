//! A feed-forward stack of layers with its loss.
//!
//! Classification heads use softmax with cross-entropy; any other head is
//! trained on squared error, `L = (1/2B) Σ ‖y − t‖²`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::layers::{Activation, AnyLayer, Layer, ParamMut};
use crate::linalg::Matrix;

#[derive(Clone, Copy, Debug)]
pub enum Targets<'a> {
    Labels(&'a [usize]),
    Values(&'a Matrix),
}

impl Targets<'_> {
    pub fn len(&self) -> usize {
        match self {
            Targets::Labels(l) => l.len(),
            Targets::Values(v) => v.rows(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn select(&self, idx: &[usize]) -> OwnedTargets {
        match self {
            Targets::Labels(l) => OwnedTargets::Labels(idx.iter().map(|&i| l[i]).collect()),
            Targets::Values(v) => OwnedTargets::Values(v.select_rows(idx).expect("indices in range")),
        }
    }
}

#[derive(Clone, Debug)]
pub enum OwnedTargets {
    Labels(Vec<usize>),
    Values(Matrix),
}

impl OwnedTargets {
    pub fn as_ref(&self) -> Targets<'_> {
        match self {
            OwnedTargets::Labels(l) => Targets::Labels(l),
            OwnedTargets::Values(v) => Targets::Values(v),
        }
    }
}

/// Loss of network outputs against targets. Cross-entropy needs a softmax
/// head; probabilities are floored at 1e-300 before the logarithm.
pub fn loss(out: &Matrix, act: Activation, targets: Targets<'_>) -> Result<f64> {
    if targets.len() != out.rows() {
        return Err(Error::shape("loss", "target count differs from batch size"));
    }
    let b = out.rows().max(1) as f64;
    match targets {
        Targets::Labels(labels) => {
            if act != Activation::Softmax {
                return Err(Error::Config("label targets need a softmax output layer".into()));
            }
            let mut s = 0.0;
            for (r, &y) in labels.iter().enumerate() {
                if y >= out.cols() {
                    return Err(Error::LabelRange {
                        label: y as u32,
                        classes: out.cols(),
                        record: r,
                    });
                }
                s -= out.get(r, y).max(1e-300).ln();
            }
            Ok(s / b)
        }
        Targets::Values(t) => {
            if t.shape() != out.shape() {
                return Err(Error::shape("loss", "target matrix shape differs from output"));
            }
            Ok(0.5 * out.sub(t)?.as_slice().iter().map(|v| v * v).sum::<f64>() / b)
        }
    }
}

/// Gradient of [`loss`] with respect to the output layer's pre-activation.
fn output_delta(out: &Matrix, act: Activation, targets: Targets<'_>) -> Result<Matrix> {
    let b = out.rows().max(1) as f64;
    match targets {
        Targets::Labels(labels) => {
            let mut d = out.scale(1.0 / b);
            for (r, &y) in labels.iter().enumerate() {
                d.set(r, y, d.get(r, y) - 1.0 / b);
            }
            Ok(d)
        }
        Targets::Values(t) => Ok(act.backprop(out, &out.sub(t)?.scale(1.0 / b))),
    }
}

/// Row-wise argmax.
pub fn predict_classes(out: &Matrix) -> Vec<usize> {
    (0..out.rows())
        .map(|r| {
            out.row(r)
                .iter()
                .enumerate()
                .fold((0, f64::NEG_INFINITY), |best, (k, &v)| if v > best.1 { (k, v) } else { best })
                .0
        })
        .collect()
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Network {
    pub layers: Vec<AnyLayer>,
}

impl Network {
    pub fn new(layers: Vec<AnyLayer>) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::Config("a network needs at least one layer".into()));
        }
        for (k, pair) in layers.windows(2).enumerate() {
            if pair[0].output_len() != pair[1].input_len() {
                return Err(Error::shape(
                    "Network::new",
                    format!(
                        "layer {k} emits {} values, layer {} expects {}",
                        pair[0].output_len(),
                        k + 1,
                        pair[1].input_len()
                    ),
                ));
            }
        }
        Ok(Self { layers })
    }

    pub fn input_len(&self) -> usize {
        self.layers[0].input_len()
    }

    pub fn output_len(&self) -> usize {
        self.layers.last().unwrap().output_len()
    }

    pub fn output_activation(&self) -> Activation {
        self.layers.last().unwrap().activation()
    }

    pub fn infer(&self, x: &Matrix) -> Result<Matrix> {
        let mut h = self.layers[0].infer(x)?;
        for l in &self.layers[1..] {
            h = l.infer(&h)?;
        }
        Ok(h)
    }

    /// Outputs in chunks of at most `chunk` rows, to bound memory.
    pub fn infer_chunked(&self, x: &Matrix, chunk: usize) -> Result<Matrix> {
        if x.rows() <= chunk {
            return self.infer(x);
        }
        let mut data = Vec::with_capacity(x.rows() * self.output_len());
        let mut start = 0;
        while start < x.rows() {
            let end = (start + chunk).min(x.rows());
            let idx: Vec<usize> = (start..end).collect();
            data.extend(self.infer(&x.select_rows(&idx)?)?.into_vec());
            start = end;
        }
        Matrix::new(x.rows(), self.output_len(), data)
    }

    /// Outputs of every layer, input first.
    pub fn activations(&self, x: &Matrix) -> Result<Vec<Matrix>> {
        let mut out = vec![x.clone()];
        for l in &self.layers {
            let h = l.infer(out.last().unwrap())?;
            out.push(h);
        }
        Ok(out)
    }

    pub fn loss(&self, x: &Matrix, targets: Targets<'_>) -> Result<f64> {
        loss(&self.infer(x)?, self.output_activation(), targets)
    }

    /// Forward and backward pass; leaves gradients in every layer and
    /// returns the loss.
    pub fn loss_and_grad(&mut self, x: &Matrix, targets: Targets<'_>) -> Result<f64> {
        let mut outs = Vec::with_capacity(self.layers.len());
        let mut h = x.clone();
        for l in &mut self.layers {
            h = l.forward(&h)?;
            outs.push(h.clone());
        }
        let last = self.layers.len() - 1;
        let act = self.layers[last].activation();
        let value = loss(&outs[last], act, targets)?;
        let mut delta = output_delta(&outs[last], act, targets)?;
        for k in (0..=last).rev() {
            let dx = self.layers[k].backward(&delta, k > 0)?;
            if k > 0 {
                let prev = self.layers[k - 1].activation();
                delta = prev.backprop(&outs[k - 1], &dx.expect("input gradient requested"));
            }
        }
        Ok(value)
    }

    /// Dynamic parameters of all layers, in order.
    pub fn params(&mut self) -> Vec<ParamMut<'_>> {
        self.layers.iter_mut().flat_map(|l| l.params()).collect()
    }

    /// Copies of all dynamic parameter values.
    pub fn snapshot(&mut self) -> Vec<Vec<f64>> {
        self.params().into_iter().map(|p| p.value.to_vec()).collect()
    }

    pub fn restore(&mut self, snapshot: &[Vec<f64>]) {
        for (p, s) in self.params().into_iter().zip(snapshot) {
            p.value.copy_from_slice(s);
        }
    }

    pub fn classify(&self, x: &Matrix) -> Result<Vec<usize>> {
        Ok(predict_classes(&self.infer_chunked(x, 1000)?))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::layers::DenseLayer;
    use crate::seed::rng_from_seed;

    #[test]
    fn rejects_mismatched_stack() {
        let mut rng = rng_from_seed(0);
        let a = AnyLayer::Dense(DenseLayer::random(4, 3, Activation::Sigmoid, &mut rng));
        let b = AnyLayer::Dense(DenseLayer::random(5, 2, Activation::Softmax, &mut rng));
        assert!(matches!(Network::new(vec![a, b]), Err(Error::Shape { .. })));
    }

    #[test]
    fn uniform_softmax_loss_is_log_classes() {
        let out = Matrix::from_fn(3, 4, |_, _| 0.25);
        let l = loss(&out, Activation::Softmax, Targets::Labels(&[0, 1, 3])).unwrap();
        assert!((l - 4f64.ln()).abs() < 1e-15);
        assert!(loss(&out, Activation::Sigmoid, Targets::Labels(&[0, 1, 3])).is_err());
    }

    #[test]
    fn chunked_inference_matches() {
        let mut rng = rng_from_seed(1);
        let net = Network::new(vec![
            AnyLayer::Dense(DenseLayer::random(6, 5, Activation::Sigmoid, &mut rng)),
            AnyLayer::Dense(DenseLayer::random(5, 3, Activation::Softmax, &mut rng)),
        ])
        .unwrap();
        let x = Matrix::random_normal(23, 6, 1.0, &mut rng);
        assert_eq!(net.infer(&x).unwrap(), net.infer_chunked(&x, 5).unwrap());
        assert_eq!(predict_classes(&Matrix::from_rows(&[vec![0.1, 0.7, 0.2]]).unwrap()), vec![1]);
    }
}
