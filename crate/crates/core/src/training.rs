//! Optimization of dynamic parameters.
//!
//! [`train`] runs mini-batch SGD with momentum. With `halve_on_increase`
//! set, an epoch that ends with a higher training loss than the best so far
//! is rolled back and the learning rate halved, so the recorded epoch-end
//! loss never increases.
//!
//! [`pretrain_stack`] trains each hidden dense layer greedily as a
//! tied-weight autoencoder with a sigmoid encoder and linear decoder.

use std::time::Instant;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::dictionary::{coefficients_from_weights, BuiltDictionary};
use crate::error::{Error, Result};
use crate::index_sets::IndexSet;
use crate::layers::{sigmoid, AnyLayer, DenseColumn, DenseLayer, Layer, PredictedDenseLayer};
use crate::linalg::{gemm, Matrix, Trans};
use crate::metrics::error_rate;
use crate::network::{predict_classes, Network, Targets};
use crate::seed::{derive_seed, rng_from_seed};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OptimizerConfig {
    pub learning_rate: f64,
    #[serde(default)]
    pub momentum: f64,
    pub batch_size: usize,
    pub epochs: usize,
    #[serde(default)]
    pub seed: u64,
    /// Multiplies the learning rate after every epoch.
    #[serde(default = "one")]
    pub lr_decay: f64,
    #[serde(default)]
    pub halve_on_increase: bool,
}

fn one() -> f64 {
    1.0
}

impl OptimizerConfig {
    pub fn sgd(learning_rate: f64, batch_size: usize, epochs: usize, seed: u64) -> Self {
        Self {
            learning_rate,
            momentum: 0.0,
            batch_size,
            epochs,
            seed,
            lr_decay: 1.0,
            halve_on_increase: false,
        }
    }

    /// A zero learning rate is accepted and leaves parameters untouched.
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!("learning_rate must be ≥ 0, got {}", self.learning_rate)));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config(format!("momentum must lie in [0, 1), got {}", self.momentum)));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be ≥ 1".into()));
        }
        if !(self.lr_decay > 0.0 && self.lr_decay <= 1.0) {
            return Err(Error::Config(format!("lr_decay must lie in (0, 1], got {}", self.lr_decay)));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    /// 0 is the state before training.
    pub epoch: usize,
    pub train_loss: f64,
    pub train_error: Option<f64>,
    pub test_error: Option<f64>,
    pub learning_rate: f64,
    pub wall_seconds: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum TrainStatus {
    Completed,
    Diverged { epoch: usize, detail: String },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainingTrace {
    pub epochs: Vec<EpochRecord>,
    pub status: TrainStatus,
}

impl TrainingTrace {
    pub fn last(&self) -> &EpochRecord {
        self.epochs.last().expect("trace always holds the initial record")
    }

    pub fn diverged(&self) -> bool {
        matches!(self.status, TrainStatus::Diverged { .. })
    }
}

/// Momentum SGD state over a flat list of parameter tensors.
#[derive(Debug, Default)]
pub struct Momentum {
    velocity: Vec<Vec<f64>>,
}

impl Momentum {
    pub fn reset(&mut self) {
        self.velocity.clear();
    }

    /// `v ← μv − ηg; θ ← θ + v` for every tensor.
    pub fn step<'a>(&mut self, params: impl IntoIterator<Item = (&'a mut [f64], &'a [f64])>, lr: f64, mu: f64) -> Result<()> {
        for (k, (value, grad)) in params.into_iter().enumerate() {
            if grad.len() != value.len() {
                return Err(Error::State("parameter has no gradient; run a backward pass first"));
            }
            if self.velocity.len() <= k {
                self.velocity.push(vec![0.0; value.len()]);
            }
            let v = &mut self.velocity[k];
            for ((p, g), vi) in value.iter_mut().zip(grad).zip(v.iter_mut()) {
                *vi = mu * *vi - lr * g;
                *p += *vi;
            }
        }
        Ok(())
    }
}

fn evaluate(
    net: &Network,
    x: &Matrix,
    targets: Targets<'_>,
    test: Option<(&Matrix, &[usize])>,
) -> Result<(f64, Option<f64>, Option<f64>)> {
    let out = net.infer_chunked(x, 1000)?;
    let loss = crate::network::loss(&out, net.output_activation(), targets)?;
    let train_error = match targets {
        Targets::Labels(l) => Some(error_rate(&predict_classes(&out), l)?),
        Targets::Values(_) => None,
    };
    let test_error = match test {
        Some((tx, tl)) => Some(error_rate(&net.classify(tx)?, tl)?),
        None => None,
    };
    Ok((loss, train_error, test_error))
}

fn batches(n: usize, size: usize, seed: u64, epoch: usize) -> Vec<Vec<usize>> {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut rng_from_seed(derive_seed(seed, epoch as u64)));
    idx.chunks(size).map(<[usize]>::to_vec).collect()
}

fn is_divergence(e: &Error) -> bool {
    matches!(e, Error::NonFinite(_))
}

/// Trains the dynamic parameters of `net`. Shape and configuration problems
/// are errors; a non-finite loss stops training and is reported in the
/// trace status.
pub fn train(
    net: &mut Network,
    x: &Matrix,
    targets: Targets<'_>,
    test: Option<(&Matrix, &[usize])>,
    cfg: &OptimizerConfig,
) -> Result<TrainingTrace> {
    cfg.validate()?;
    if x.rows() != targets.len() {
        return Err(Error::shape("train", "observation count differs from target count"));
    }
    if x.rows() == 0 {
        return Err(Error::InsufficientData("no training observations".into()));
    }
    let start = Instant::now();
    let mut lr = cfg.learning_rate;
    let (l0, e0, t0) = evaluate(net, x, targets, test)?;
    let mut records = vec![EpochRecord {
        epoch: 0,
        train_loss: l0,
        train_error: e0,
        test_error: t0,
        learning_rate: lr,
        wall_seconds: 0.0,
    }];
    let mut best = records[0].clone();
    let mut snapshot = cfg.halve_on_increase.then(|| net.snapshot());
    let mut opt = Momentum::default();

    for epoch in 1..=cfg.epochs {
        let mut failure = None;
        for batch in batches(x.rows(), cfg.batch_size, cfg.seed, epoch) {
            let bx = x.select_rows(&batch)?;
            let bt = targets.select(&batch);
            match net.loss_and_grad(&bx, bt.as_ref()) {
                Ok(l) if l.is_finite() => {}
                Ok(l) => {
                    failure = Some(format!("mini-batch loss {l}"));
                    break;
                }
                Err(e) if is_divergence(&e) => {
                    failure = Some(e.to_string());
                    break;
                }
                Err(e) => return Err(e),
            }
            let params = net.params();
            opt.step(params.into_iter().map(|p| (p.value, p.grad)), lr, cfg.momentum)?;
        }
        let evaluated = match failure {
            Some(f) => Err(f),
            None => match evaluate(net, x, targets, test) {
                Ok((l, ..)) if !l.is_finite() => Err(format!("epoch loss {l}")),
                Ok(v) => Ok(v),
                Err(e) if is_divergence(&e) => Err(e.to_string()),
                Err(e) => return Err(e),
            },
        };
        let wall = start.elapsed().as_secs_f64();
        match evaluated {
            Err(detail) => {
                return Ok(TrainingTrace {
                    epochs: records,
                    status: TrainStatus::Diverged { epoch, detail },
                });
            }
            Ok((l, train_error, test_error)) => {
                let rec = if cfg.halve_on_increase && l > best.train_loss {
                    net.restore(snapshot.as_ref().unwrap());
                    opt.reset();
                    lr *= 0.5;
                    EpochRecord {
                        epoch,
                        learning_rate: lr,
                        wall_seconds: wall,
                        ..best.clone()
                    }
                } else {
                    let rec = EpochRecord {
                        epoch,
                        train_loss: l,
                        train_error,
                        test_error,
                        learning_rate: lr,
                        wall_seconds: wall,
                    };
                    if let Some(s) = snapshot.as_mut() {
                        *s = net.snapshot();
                    }
                    best = rec.clone();
                    rec
                };
                records.push(rec);
            }
        }
        lr *= cfg.lr_decay;
    }
    Ok(TrainingTrace {
        epochs: records,
        status: TrainStatus::Completed,
    })
}

/// Tied-weight autoencoder: `h = σ(xW + b)`, `x̂ = hWᵀ + c`.
#[derive(Clone, Debug)]
pub struct Autoencoder {
    pub w: Matrix,
    pub b: Vec<f64>,
    pub c: Vec<f64>,
}

impl Autoencoder {
    /// Random encoder with standard deviation `1/√n_v`; the decoder bias
    /// starts at the data mean.
    pub fn init(data: &Matrix, n_hidden: usize, seed: u64) -> Self {
        let nv = data.cols();
        let w = Matrix::random_normal(nv, n_hidden, 1.0 / (nv as f64).sqrt(), &mut rng_from_seed(seed));
        let n = data.rows().max(1) as f64;
        Self {
            w,
            b: vec![0.0; n_hidden],
            c: data.column_sums().into_iter().map(|s| s / n).collect(),
        }
    }

    pub fn encode(&self, x: &Matrix) -> Matrix {
        let mut h = gemm(x, Trans::N, &self.w, Trans::N);
        h.add_row_vector(&self.b);
        h.as_mut_slice().iter_mut().for_each(|v| *v = sigmoid(*v));
        h
    }

    pub fn reconstruct(&self, x: &Matrix) -> Matrix {
        let mut r = gemm(&self.encode(x), Trans::N, &self.w, Trans::T);
        r.add_row_vector(&self.c);
        r
    }

    /// Mean squared reconstruction error per entry.
    pub fn mse(&self, x: &Matrix) -> f64 {
        let r = self.reconstruct(x);
        r.as_slice().iter().zip(x.as_slice()).map(|(a, b)| (a - b).powi(2)).sum::<f64>() / x.len().max(1) as f64
    }

    /// Loss `(1/2B) Σ ‖x̂ − x‖²` and gradients for `(w, b, c)`.
    pub fn loss_and_grad(&self, x: &Matrix) -> (f64, [Vec<f64>; 3]) {
        let bsz = x.rows().max(1) as f64;
        let h = self.encode(x);
        let mut r = gemm(&h, Trans::N, &self.w, Trans::T);
        r.add_row_vector(&self.c);
        let resid = r.sub(x).expect("same shape");
        let loss = 0.5 * resid.as_slice().iter().map(|v| v * v).sum::<f64>() / bsz;
        let rs = resid.scale(1.0 / bsz);
        let mut gw = gemm(&rs, Trans::T, &h, Trans::N);
        let dh = gemm(&rs, Trans::N, &self.w, Trans::N);
        let dz = Matrix::new(
            h.rows(),
            h.cols(),
            dh.as_slice().iter().zip(h.as_slice()).map(|(g, y)| g * y * (1.0 - y)).collect(),
        )
        .expect("finite");
        gw.axpy(1.0, &gemm(x, Trans::T, &dz, Trans::N));
        (loss, [gw.into_vec(), dz.column_sums(), rs.column_sums()])
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PretrainPlan {
    /// Autoencoder epochs for hidden layer `k`; missing entries mean 0.
    pub layer_epochs: Vec<usize>,
    pub learning_rate: f64,
    #[serde(default)]
    pub momentum: f64,
    pub batch_size: usize,
    #[serde(default)]
    pub seed: u64,
}

impl PretrainPlan {
    pub fn uniform(epochs: usize, layers: usize) -> Self {
        Self {
            layer_epochs: vec![epochs; layers],
            learning_rate: 0.01,
            momentum: 0.9,
            batch_size: 20,
            seed: 0,
        }
    }

    pub fn disabled() -> Self {
        Self::uniform(0, 0)
    }

    fn epochs_for(&self, layer: usize) -> usize {
        self.layer_epochs.get(layer).copied().unwrap_or(0)
    }
}

/// Trains `ae` on `data`; returns the reconstruction MSE after each epoch.
pub fn train_autoencoder(
    ae: &mut Autoencoder,
    data: &Matrix,
    epochs: usize,
    plan: &PretrainPlan,
    seed: u64,
) -> Result<Vec<f64>> {
    let mut opt = Momentum::default();
    let mut trace = Vec::with_capacity(epochs);
    for epoch in 1..=epochs {
        for batch in batches(data.rows(), plan.batch_size.max(1), seed, epoch) {
            let bx = data.select_rows(&batch)?;
            let (loss, [gw, gb, gc]) = ae.loss_and_grad(&bx);
            if !loss.is_finite() {
                return Err(Error::Divergence {
                    layer: None,
                    epoch,
                    detail: format!("autoencoder loss {loss}"),
                });
            }
            let params = [
                (ae.w.as_mut_slice(), gw.as_slice()),
                (ae.b.as_mut_slice(), gb.as_slice()),
                (ae.c.as_mut_slice(), gc.as_slice()),
            ];
            opt.step(params, plan.learning_rate, plan.momentum)?;
        }
        let mse = ae.mse(data);
        if !mse.is_finite() {
            return Err(Error::Divergence {
                layer: None,
                epoch,
                detail: format!("autoencoder reconstruction error {mse}"),
            });
        }
        trace.push(mse);
    }
    Ok(trace)
}

/// An autoencoder-trained basis: the `n_alpha` encoder features learned on
/// `inputs`, as the columns of an `n_v × n_alpha` matrix.
pub fn autoencoder_dictionary(inputs: &Matrix, n_alpha: usize, epochs: usize, plan: &PretrainPlan, seed: u64) -> Result<Matrix> {
    let mut ae = Autoencoder::init(inputs, n_alpha, seed);
    train_autoencoder(&mut ae, inputs, epochs, plan, derive_seed(seed, 1))?;
    Ok(ae.w)
}

/// Greedy layerwise pretraining of the hidden dense layers (every layer
/// except the output layer). Other layer kinds pass through unchanged.
/// Returns the input activations of every layer, starting with `x`.
pub fn pretrain_stack(net: &mut Network, x: &Matrix, plan: &PretrainPlan) -> Result<Vec<Matrix>> {
    let mut acts = vec![x.clone()];
    let hidden = net.layers.len() - 1;
    for k in 0..hidden {
        let input = acts.last().unwrap();
        let epochs = plan.epochs_for(k);
        if let (AnyLayer::Dense(layer), true) = (&mut net.layers[k], epochs > 0) {
            let mut ae = Autoencoder {
                w: layer.w.clone(),
                b: layer.bias.clone(),
                c: Autoencoder::init(input, 1, 0).c,
            };
            train_autoencoder(&mut ae, input, epochs, plan, derive_seed(plan.seed, k as u64)).map_err(|e| match e {
                Error::Divergence { epoch, detail, .. } => Error::Divergence {
                    layer: Some(k),
                    epoch,
                    detail,
                },
                e => e,
            })?;
            layer.w = ae.w;
            layer.bias = ae.b;
        }
        let h = net.layers[k].infer(input)?;
        acts.push(h);
    }
    Ok(acts)
}

/// Replaces a dense layer by a predicted one whose coefficients are fitted
/// to the dense weights, column block by column block.
pub fn predicted_from_dense(
    dense: &DenseLayer,
    dictionaries: Vec<(IndexSet, BuiltDictionary)>,
    hidden: &[usize],
) -> Result<PredictedDenseLayer> {
    if hidden.iter().sum::<usize>() != dense.w.cols() || dictionaries.len() != hidden.len() {
        return Err(Error::shape("predicted_from_dense", "column split does not cover the layer"));
    }
    let mut at = 0;
    let mut columns = Vec::with_capacity(hidden.len());
    for ((alpha, dict), &h) in dictionaries.into_iter().zip(hidden) {
        let block = dense.w.col_block(at, h);
        let w_alpha = coefficients_from_weights(&dict, &alpha, &block)?;
        columns.push(DenseColumn::new(alpha, dict, w_alpha)?);
        at += h;
    }
    PredictedDenseLayer::new(columns, dense.bias.clone(), dense.activation)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GradCheckConfig {
    pub step: f64,
    pub probes: usize,
    pub seed: u64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        Self {
            step: 1e-6,
            probes: 10,
            seed: 0,
        }
    }
}

/// Compares a gradient with central differences of `f` along random unit
/// directions. Returns the worst relative error
/// `|a − n| / max(|a|, |n|, 1e-12)`.
pub fn check_directional(
    mut f: impl FnMut(&[f64]) -> Result<f64>,
    theta: &[f64],
    grad: &[f64],
    cfg: GradCheckConfig,
) -> Result<f64> {
    let mut rng = rng_from_seed(cfg.seed);
    let mut worst: f64 = 0.0;
    let mut probe = theta.to_vec();
    for _ in 0..cfg.probes {
        let d = Matrix::random_normal(1, theta.len(), 1.0, &mut rng).into_vec();
        let norm = d.iter().map(|v| v * v).sum::<f64>().sqrt();
        let d: Vec<f64> = d.iter().map(|v| v / norm).collect();
        let analytic: f64 = grad.iter().zip(&d).map(|(g, v)| g * v).sum();
        for (p, (t, v)) in probe.iter_mut().zip(theta.iter().zip(&d)) {
            *p = t + cfg.step * v;
        }
        let plus = f(&probe)?;
        for (p, (t, v)) in probe.iter_mut().zip(theta.iter().zip(&d)) {
            *p = t - cfg.step * v;
        }
        let minus = f(&probe)?;
        let numeric = (plus - minus) / (2.0 * cfg.step);
        let rel = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-12);
        worst = worst.max(rel);
    }
    Ok(worst)
}

fn flatten(net: &mut Network) -> (Vec<f64>, Vec<f64>) {
    let mut theta = Vec::new();
    let mut grad = Vec::new();
    for p in net.params() {
        theta.extend_from_slice(p.value);
        grad.extend_from_slice(p.grad);
    }
    (theta, grad)
}

fn unflatten(net: &mut Network, theta: &[f64]) {
    let mut at = 0;
    for p in net.params() {
        let n = p.value.len();
        p.value.copy_from_slice(&theta[at..at + n]);
        at += n;
    }
}

/// Worst relative error between backpropagated gradients of all dynamic
/// parameters and central differences. The network is left unchanged.
pub fn grad_check(net: &mut Network, x: &Matrix, targets: Targets<'_>, cfg: GradCheckConfig) -> Result<f64> {
    net.loss_and_grad(x, targets)?;
    let (theta, grad) = flatten(net);
    let mut probe_net = net.clone();
    check_directional(
        |t| {
            unflatten(&mut probe_net, t);
            probe_net.loss(x, targets)
        },
        &theta,
        &grad,
        cfg,
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::layers::Activation;

    fn linear_net(seed: u64) -> Network {
        Network::new(vec![AnyLayer::Dense(DenseLayer::random(2, 1, Activation::Linear, &mut rng_from_seed(seed)))]).unwrap()
    }

    #[test]
    fn zero_learning_rate_keeps_parameters() {
        let (x, y) = crate::data::separable_blobs(40, 1);
        let mut net = Network::new(vec![AnyLayer::Dense(DenseLayer::random(2, 2, Activation::Softmax, &mut rng_from_seed(0)))]).unwrap();
        let before = net.snapshot();
        let trace = train(&mut net, &x, Targets::Labels(&y), None, &OptimizerConfig::sgd(0.0, 8, 3, 0)).unwrap();
        assert_eq!(net.snapshot(), before);
        assert_eq!(trace.epochs.len(), 4);
    }

    #[test]
    fn logistic_regression_separates_blobs() {
        let (x, y) = crate::data::separable_blobs(200, 2);
        let mut net = Network::new(vec![AnyLayer::Dense(DenseLayer::random(2, 2, Activation::Softmax, &mut rng_from_seed(0)))]).unwrap();
        let trace = train(&mut net, &x, Targets::Labels(&y), None, &OptimizerConfig::sgd(0.5, 10, 30, 0)).unwrap();
        assert_eq!(trace.last().train_error, Some(0.0));
    }

    #[test]
    fn full_batch_descent_on_linear_regression() {
        let mut rng = rng_from_seed(4);
        let x = Matrix::random_normal(50, 2, 1.0, &mut rng);
        let t = Matrix::from_fn(50, 1, |r, _| 2.0 * x.get(r, 0) - x.get(r, 1) + 0.5);
        let mut net = linear_net(1);
        let trace = train(&mut net, &x, Targets::Values(&t), None, &OptimizerConfig::sgd(0.3, 50, 100, 0)).unwrap();
        for w in trace.epochs.windows(2) {
            assert!(w[1].train_loss <= w[0].train_loss);
        }
        assert!(trace.last().train_loss < 1e-3);
    }

    #[test]
    fn halving_keeps_loss_monotone() {
        let (x, y) = crate::data::separable_blobs(100, 3);
        let mut net = Network::new(vec![AnyLayer::Dense(DenseLayer::random(2, 2, Activation::Softmax, &mut rng_from_seed(0)))]).unwrap();
        let mut cfg = OptimizerConfig::sgd(200.0, 5, 15, 0);
        cfg.momentum = 0.9;
        cfg.halve_on_increase = true;
        let trace = train(&mut net, &x, Targets::Labels(&y), None, &cfg).unwrap();
        assert!(!trace.diverged());
        for w in trace.epochs.windows(2) {
            assert!(w[1].train_loss <= w[0].train_loss);
        }
    }

    #[test]
    fn training_is_seed_deterministic() {
        let (x, y) = crate::data::separable_blobs(60, 5);
        let run = || {
            let mut rng = rng_from_seed(9);
            let mut net = Network::new(vec![
                AnyLayer::Dense(DenseLayer::random(2, 4, Activation::Sigmoid, &mut rng)),
                AnyLayer::Dense(DenseLayer::random(4, 2, Activation::Softmax, &mut rng)),
            ])
            .unwrap();
            let mut cfg = OptimizerConfig::sgd(0.3, 7, 4, 11);
            cfg.momentum = 0.5;
            train(&mut net, &x, Targets::Labels(&y), None, &cfg).unwrap();
            net.snapshot()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn linear_layer_gradient_check() {
        let mut rng = rng_from_seed(2);
        let x = Matrix::random_normal(8, 2, 1.0, &mut rng);
        let t = Matrix::random_normal(8, 1, 1.0, &mut rng);
        let mut net = linear_net(3);
        let err = grad_check(&mut net, &x, Targets::Values(&t), GradCheckConfig::default()).unwrap();
        assert!(err < 1e-8, "{err}");
    }

    #[test]
    fn zero_epoch_pretraining_is_identity() {
        let mut rng = rng_from_seed(3);
        let mut net = Network::new(vec![
            AnyLayer::Dense(DenseLayer::random(5, 4, Activation::Sigmoid, &mut rng)),
            AnyLayer::Dense(DenseLayer::random(4, 3, Activation::Softmax, &mut rng)),
        ])
        .unwrap();
        let before = net.snapshot();
        let x = Matrix::random_normal(10, 5, 1.0, &mut rng);
        let acts = pretrain_stack(&mut net, &x, &PretrainPlan::disabled()).unwrap();
        assert_eq!(net.snapshot(), before);
        assert_eq!(acts.len(), 2);
        assert_eq!(acts[1], net.layers[0].infer(&x).unwrap());
    }

    #[test]
    fn autoencoder_gradient_matches_differences() {
        let mut rng = rng_from_seed(6);
        let x = Matrix::random_normal(6, 5, 1.0, &mut rng);
        let ae = Autoencoder::init(&x, 3, 1);
        let (_, [gw, gb, gc]) = ae.loss_and_grad(&x);
        let theta: Vec<f64> = [ae.w.as_slice(), &ae.b, &ae.c].concat();
        let grad = [gw, gb, gc].concat();
        let err = check_directional(
            |t| {
                let a = Autoencoder {
                    w: Matrix::new(5, 3, t[..15].to_vec())?,
                    b: t[15..18].to_vec(),
                    c: t[18..].to_vec(),
                };
                Ok(a.loss_and_grad(&x).0)
            },
            &theta,
            &grad,
            GradCheckConfig::default(),
        )
        .unwrap();
        assert!(err < 1e-6, "{err}");
    }
}
