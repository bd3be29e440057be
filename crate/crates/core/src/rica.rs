//! Reconstruction ICA, with full or predicted feature matrices.
//!
//! For patches `X` (one per row) and features `W` (`n_v × n_h`) the
//! objective is
//!
//! ```text
//! L(W) = (1/N) Σ_n ‖x_n W Wᵀ − x_n‖² + (s/N) Σ_n Σ_k φ((x_n W)_k)
//! φ(z) = √(z² + ε²) − ε
//! ```
//!
//! A predicted model stores `W = U_α W_α` and learns only `W_α`.

use nalgebra::{DMatrix, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::dictionary::BuiltDictionary;
use crate::error::{Error, Result};
use crate::index_sets::IndexSet;
use crate::layers::{Activation, AnyLayer, DenseLayer};
use crate::linalg::{gemm, im2col, ConvGeometry, Matrix, Trans};
use crate::metrics::accuracy;
use crate::network::{Network, Targets};
use crate::seed::{derive_seed, rng_from_seed};
use crate::training::{train, Momentum, OptimizerConfig};

pub const DEFAULT_EPSILON: f64 = 1e-2;

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum RicaFeatures {
    Full {
        w: Matrix,
    },
    Predicted {
        alpha: IndexSet,
        dictionary: BuiltDictionary,
        w_alpha: Matrix,
    },
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RicaModel {
    pub features: RicaFeatures,
    pub sparsity: f64,
    pub epsilon: f64,
}

/// How the objective evaluates `x W`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum RicaOrder {
    Materialized,
    /// `(x U_α) W_α`; identical to materialized for full models.
    Pooled,
}

impl RicaModel {
    fn check(sparsity: f64, epsilon: f64) -> Result<()> {
        if !(sparsity >= 0.0 && sparsity.is_finite()) || !(epsilon > 0.0 && epsilon.is_finite()) {
            return Err(Error::Config(format!(
                "RICA needs sparsity ≥ 0 and ε > 0, got {sparsity} and {epsilon}"
            )));
        }
        Ok(())
    }

    /// Gaussian features with standard deviation `1/√n_v`.
    pub fn full(n_v: usize, n_h: usize, sparsity: f64, seed: u64) -> Result<Self> {
        Self::check(sparsity, DEFAULT_EPSILON)?;
        let w = Matrix::random_normal(n_v, n_h, 1.0 / (n_v as f64).sqrt(), &mut rng_from_seed(seed));
        Ok(Self {
            features: RicaFeatures::Full { w },
            sparsity,
            epsilon: DEFAULT_EPSILON,
        })
    }

    /// Gaussian coefficients with standard deviation `1/√n_v`, the same
    /// per-weight scale as [`RicaModel::full`], so predicted features start
    /// with roughly the norm of full ones.
    pub fn predicted(alpha: IndexSet, dictionary: BuiltDictionary, n_h: usize, sparsity: f64, seed: u64) -> Result<Self> {
        Self::check(sparsity, DEFAULT_EPSILON)?;
        if dictionary.n_v() != alpha.space().size() {
            return Err(Error::shape("RicaModel::predicted", "dictionary does not span the patch space"));
        }
        let na = dictionary.n_alpha();
        let scale = 1.0 / (dictionary.n_v() as f64).sqrt();
        let w_alpha = Matrix::random_normal(na, n_h, scale, &mut rng_from_seed(seed));
        Ok(Self {
            features: RicaFeatures::Predicted {
                alpha,
                dictionary,
                w_alpha,
            },
            sparsity,
            epsilon: DEFAULT_EPSILON,
        })
    }

    pub fn weights(&self) -> Matrix {
        match &self.features {
            RicaFeatures::Full { w } => w.clone(),
            RicaFeatures::Predicted { dictionary, w_alpha, .. } => gemm(&dictionary.u, Trans::N, w_alpha, Trans::N),
        }
    }

    pub fn n_v(&self) -> usize {
        match &self.features {
            RicaFeatures::Full { w } => w.rows(),
            RicaFeatures::Predicted { dictionary, .. } => dictionary.n_v(),
        }
    }

    pub fn n_features(&self) -> usize {
        self.dynamic().cols()
    }

    /// The learned matrix: `W` or `W_α`.
    pub fn dynamic(&self) -> &Matrix {
        match &self.features {
            RicaFeatures::Full { w } => w,
            RicaFeatures::Predicted { w_alpha, .. } => w_alpha,
        }
    }

    pub fn dynamic_mut(&mut self) -> &mut Matrix {
        match &mut self.features {
            RicaFeatures::Full { w } => w,
            RicaFeatures::Predicted { w_alpha, .. } => w_alpha,
        }
    }

    pub fn dynamic_count(&self) -> usize {
        self.dynamic().len()
    }

    pub fn static_count(&self) -> usize {
        match &self.features {
            RicaFeatures::Full { .. } => 0,
            RicaFeatures::Predicted { dictionary, .. } => dictionary.u.len(),
        }
    }

    /// `x W` for a batch of patches.
    pub fn encode(&self, x: &Matrix, order: RicaOrder) -> Matrix {
        match (&self.features, order) {
            (RicaFeatures::Predicted { dictionary, w_alpha, .. }, RicaOrder::Pooled) => {
                gemm(&gemm(x, Trans::N, &dictionary.u, Trans::N), Trans::N, w_alpha, Trans::N)
            }
            _ => gemm(x, Trans::N, &self.weights(), Trans::N),
        }
    }
}

fn smooth_l1(z: f64, eps: f64) -> f64 {
    (z * z + eps * eps).sqrt() - eps
}

/// Objective value only, in the chosen evaluation order.
pub fn rica_loss(model: &RicaModel, patches: &Matrix, order: RicaOrder) -> Result<f64> {
    if patches.cols() != model.n_v() {
        return Err(Error::shape("rica_loss", "patch width differs from feature length"));
    }
    let n = patches.rows().max(1) as f64;
    let z = model.encode(patches, order);
    let recon = match (&model.features, order) {
        (RicaFeatures::Predicted { dictionary, w_alpha, .. }, RicaOrder::Pooled) => {
            gemm(&gemm(&z, Trans::N, w_alpha, Trans::T), Trans::N, &dictionary.u, Trans::T)
        }
        _ => gemm(&z, Trans::N, &model.weights(), Trans::T),
    };
    let rec: f64 = recon.as_slice().iter().zip(patches.as_slice()).map(|(a, b)| (a - b).powi(2)).sum();
    let sparse: f64 = z.as_slice().iter().map(|&v| smooth_l1(v, model.epsilon)).sum();
    let loss = (rec + model.sparsity * sparse) / n;
    if !loss.is_finite() {
        return Err(Error::NonFinite("rica_loss"));
    }
    Ok(loss)
}

/// Objective value and its gradient with respect to the dynamic matrix.
pub fn rica_objective(model: &RicaModel, patches: &Matrix) -> Result<(f64, Matrix)> {
    if patches.cols() != model.n_v() {
        return Err(Error::shape("rica_objective", "patch width differs from feature length"));
    }
    let n = patches.rows().max(1) as f64;
    let w = model.weights();
    let z = gemm(patches, Trans::N, &w, Trans::N);
    let mut e = gemm(&z, Trans::N, &w, Trans::T);
    e.axpy(-1.0, patches);
    let rec: f64 = e.as_slice().iter().map(|v| v * v).sum();
    let eps = model.epsilon;
    let sparse: f64 = z.as_slice().iter().map(|&v| smooth_l1(v, eps)).sum();
    let loss = (rec + model.sparsity * sparse) / n;
    if !loss.is_finite() {
        return Err(Error::NonFinite("rica_objective"));
    }
    // dL/dZ = (2/N) E W + (s/N) φ'(Z);  dL/dW = Xᵀ dZ + (2/N) Eᵀ Z
    let ew = gemm(&e, Trans::N, &w, Trans::N);
    let dz = Matrix::new(
        z.rows(),
        z.cols(),
        ew.as_slice()
            .iter()
            .zip(z.as_slice())
            .map(|(&a, &v)| (2.0 * a + model.sparsity * v / (v * v + eps * eps).sqrt()) / n)
            .collect(),
    )?;
    let mut grad = gemm(patches, Trans::T, &dz, Trans::N);
    gemm_acc(&mut grad, &e, &z, 2.0 / n);
    let grad = match &model.features {
        RicaFeatures::Full { .. } => grad,
        RicaFeatures::Predicted { dictionary, .. } => gemm(&dictionary.u, Trans::T, &grad, Trans::N),
    };
    Ok((loss, grad))
}

fn gemm_acc(acc: &mut Matrix, a: &Matrix, b: &Matrix, s: f64) {
    crate::linalg::gemm_into(s, a, Trans::T, b, Trans::N, 1.0, acc);
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RicaTrace {
    /// Full-data objective before training and after each epoch.
    pub losses: Vec<f64>,
    pub diverged: Option<String>,
}

/// Mini-batch SGD with momentum on the dynamic matrix. With
/// `halve_on_increase`, an epoch that raises the loss is undone and the
/// learning rate halved.
pub fn train_rica(model: &mut RicaModel, patches: &Matrix, cfg: &OptimizerConfig) -> Result<RicaTrace> {
    cfg.validate()?;
    let mut lr = cfg.learning_rate;
    let mut best = rica_loss(model, patches, RicaOrder::Materialized)?;
    let mut losses = vec![best];
    let mut keep = model.dynamic().clone();
    let mut opt = Momentum::default();
    let n = patches.rows();
    for epoch in 1..=cfg.epochs {
        let mut idx: Vec<usize> = (0..n).collect();
        rand::seq::SliceRandom::shuffle(idx.as_mut_slice(), &mut rng_from_seed(derive_seed(cfg.seed, epoch as u64)));
        let mut failed = None;
        for batch in idx.chunks(cfg.batch_size) {
            let bx = patches.select_rows(batch)?;
            match rica_objective(model, &bx) {
                Ok((_, g)) => opt.step([(model.dynamic_mut().as_mut_slice(), g.as_slice())], lr, cfg.momentum)?,
                Err(Error::NonFinite(_)) => {
                    failed = Some(format!("non-finite objective in epoch {epoch}"));
                    break;
                }
                Err(e) => return Err(e),
            }
        }
        let loss = match failed {
            Some(_) => f64::NAN,
            None => rica_loss(model, patches, RicaOrder::Materialized).unwrap_or(f64::NAN),
        };
        if !loss.is_finite() && !cfg.halve_on_increase {
            return Ok(RicaTrace {
                losses,
                diverged: Some(failed.unwrap_or_else(|| format!("non-finite objective after epoch {epoch}"))),
            });
        }
        if cfg.halve_on_increase && !(loss <= best) {
            *model.dynamic_mut() = keep.clone();
            opt.reset();
            lr *= 0.5;
            losses.push(best);
        } else {
            best = loss;
            keep = model.dynamic().clone();
            losses.push(loss);
        }
        lr *= cfg.lr_decay;
    }
    Ok(RicaTrace { losses, diverged: None })
}

/// Per-patch contrast normalization followed by ZCA whitening.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Whitening {
    pub contrast_eps: f64,
    pub mean: Vec<f64>,
    /// Symmetric `n_v × n_v` transform.
    pub transform: Matrix,
}

/// Subtracts each row's mean and divides by `√(var + eps)`.
pub fn normalize_rows(x: &mut Matrix, eps: f64) {
    let cols = x.cols();
    for row in x.as_mut_slice().chunks_exact_mut(cols) {
        let m = row.iter().sum::<f64>() / cols as f64;
        let var = row.iter().map(|v| (v - m).powi(2)).sum::<f64>() / cols as f64;
        let s = 1.0 / (var + eps).sqrt();
        row.iter_mut().for_each(|v| *v = (*v - m) * s);
    }
}

impl Whitening {
    /// Fits on raw patches. `contrast_eps` regularizes the per-patch
    /// normalization and `zca_eps` the eigenvalues.
    pub fn fit(patches: &Matrix, contrast_eps: f64, zca_eps: f64) -> Result<Self> {
        if patches.rows() < 2 {
            return Err(Error::InsufficientData("whitening needs at least two patches".into()));
        }
        let mut x = patches.clone();
        normalize_rows(&mut x, contrast_eps);
        let cov = crate::kernels::empirical_covariance(&x)?;
        let n = x.rows() as f64;
        let mean: Vec<f64> = x.column_sums().into_iter().map(|s| s / n).collect();
        let d = cov.rows();
        let eig = SymmetricEigen::new(DMatrix::from_row_slice(d, d, cov.as_slice()));
        let scale = eig.eigenvalues.map(|l| 1.0 / (l.max(0.0) + zca_eps).sqrt());
        let v = &eig.eigenvectors;
        let t = v * DMatrix::from_diagonal(&scale) * v.transpose();
        let transform = Matrix::from_fn(d, d, |r, c| t[(r, c)]);
        Ok(Self {
            contrast_eps,
            mean,
            transform,
        })
    }

    pub fn apply(&self, patches: &Matrix) -> Matrix {
        let mut x = patches.clone();
        normalize_rows(&mut x, self.contrast_eps);
        x.add_row_vector(&self.mean.iter().map(|m| -m).collect::<Vec<_>>());
        gemm(&x, Trans::N, &self.transform, Trans::N)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ReadoutConfig {
    pub patch: usize,
    pub stride: usize,
    /// Average-pooling grid per axis.
    pub pool: usize,
    pub optimizer: OptimizerConfig,
}

/// Pooled split-polarity features for every image: for each patch position
/// `z = whiten(p) W`, then `max(z, 0)` and `max(−z, 0)` averaged over a
/// `pool × pool` grid of image regions.
pub fn image_features(model: &RicaModel, whitening: &Whitening, data: &Dataset, patch: usize, stride: usize, pool: usize) -> Result<Matrix> {
    let (n, h, w, c) = data.images.dims();
    let g = ConvGeometry {
        in_height: h,
        in_width: w,
        in_channels: c,
        filter_height: patch,
        filter_width: patch,
        stride,
    };
    g.validate()?;
    if g.patch_len() != model.n_v() {
        return Err(Error::shape("image_features", "patch size does not match the model"));
    }
    if pool == 0 || pool > g.out_height().min(g.out_width()) {
        return Err(Error::Config(format!("pool grid {pool} does not fit {}x{} positions", g.out_height(), g.out_width())));
    }
    // whiten(p) W = normalize(p) (T W) − mean (T W)
    let tw = gemm(&whitening.transform, Trans::N, &model.weights(), Trans::N);
    let mean = Matrix::new(1, whitening.mean.len(), whitening.mean.clone())?;
    let offset = gemm(&mean, Trans::N, &tw, Trans::N);
    let k = tw.cols();
    let (oh, ow) = (g.out_height(), g.out_width());
    let cell = |p: usize, len: usize| (p * pool / len).min(pool - 1);
    let width = pool * pool * 2 * k;
    let mut out = Vec::with_capacity(n * width);
    let chunk = 64;
    let images = data.images.as_slice();
    let mut start = 0;
    while start < n {
        let end = (start + chunk).min(n);
        let mut cols = im2col(&images[start * g.input_len()..end * g.input_len()], end - start, &g);
        normalize_rows(&mut cols, whitening.contrast_eps);
        let mut z = gemm(&cols, Trans::N, &tw, Trans::N);
        z.add_row_vector(&offset.as_slice().iter().map(|v| -v).collect::<Vec<_>>());
        for b in 0..end - start {
            let mut f = vec![0.0; width];
            let mut counts = vec![0usize; pool * pool];
            for y in 0..oh {
                for x in 0..ow {
                    let q = cell(y, oh) * pool + cell(x, ow);
                    counts[q] += 1;
                    let row = z.row((b * oh + y) * ow + x);
                    let base = q * 2 * k;
                    for (j, &v) in row.iter().enumerate() {
                        f[base + j] += v.max(0.0);
                        f[base + k + j] += (-v).max(0.0);
                    }
                }
            }
            for (q, &cnt) in counts.iter().enumerate() {
                f[q * 2 * k..(q + 1) * 2 * k].iter_mut().for_each(|v| *v /= cnt as f64);
            }
            out.extend(f);
        }
        start = end;
    }
    Matrix::new(n, width, out)
}

fn standardize(train: &mut Matrix, test: &mut Matrix) {
    let n = train.rows().max(1) as f64;
    let mean: Vec<f64> = train.column_sums().into_iter().map(|s| s / n).collect();
    let mut var = vec![0.0; train.cols()];
    for r in 0..train.rows() {
        for (k, v) in train.row(r).iter().enumerate() {
            var[k] += (v - mean[k]).powi(2) / n;
        }
    }
    let inv: Vec<f64> = var.iter().map(|v| 1.0 / (v + 1e-8).sqrt()).collect();
    for m in [train, test] {
        let cols = m.cols();
        for row in m.as_mut_slice().chunks_exact_mut(cols) {
            for (k, v) in row.iter_mut().enumerate() {
                *v = (*v - mean[k]) * inv[k];
            }
        }
    }
}

/// Test accuracy of a softmax readout trained on pooled RICA features.
pub fn rica_classify(model: &RicaModel, whitening: &Whitening, train_set: &Dataset, test_set: &Dataset, cfg: &ReadoutConfig) -> Result<f64> {
    let mut ftr = image_features(model, whitening, train_set, cfg.patch, cfg.stride, cfg.pool)?;
    let mut fte = image_features(model, whitening, test_set, cfg.patch, cfg.stride, cfg.pool)?;
    standardize(&mut ftr, &mut fte);
    let classes = train_set.classes.max(test_set.classes);
    let head = DenseLayer::new(Matrix::zeros(ftr.cols(), classes), vec![0.0; classes], Activation::Softmax)?;
    let mut net = Network::new(vec![AnyLayer::Dense(head)])?;
    let trace = train(&mut net, &ftr, Targets::Labels(&train_set.labels), None, &cfg.optimizer)?;
    if trace.diverged() {
        return Err(Error::Divergence {
            layer: Some(0),
            epoch: trace.epochs.len(),
            detail: "softmax readout diverged".into(),
        });
    }
    accuracy(&net.classify(&fte)?, &test_set.labels)
}

/// Mean lag-one correlation between neighbouring taps (horizontal and
/// vertical) over all features, each feature an `h × w × c` column of `w`.
pub fn spatial_autocorrelation(features: &Matrix, height: usize, width: usize, channels: usize) -> f64 {
    let at = |y: usize, x: usize, c: usize| (y * width + x) * channels + c;
    let mut total = 0.0;
    for f in 0..features.cols() {
        let col = features.column(f);
        let m = col.iter().sum::<f64>() / col.len() as f64;
        let var = col.iter().map(|v| (v - m).powi(2)).sum::<f64>() / col.len() as f64;
        let (mut s, mut cnt) = (0.0, 0usize);
        for y in 0..height {
            for x in 0..width {
                for c in 0..channels {
                    let a = col[at(y, x, c)] - m;
                    if x + 1 < width {
                        s += a * (col[at(y, x + 1, c)] - m);
                        cnt += 1;
                    }
                    if y + 1 < height {
                        s += a * (col[at(y + 1, x, c)] - m);
                        cnt += 1;
                    }
                }
            }
        }
        total += s / cnt as f64 / var.max(1e-300);
    }
    total / features.cols() as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dictionary::{build_dictionary, DictionaryContext, DictionaryStrategy};
    use crate::index_sets::{sample_alpha, WeightSpace};
    use crate::training::{check_directional, GradCheckConfig};

    fn predicted_model(seed: u64) -> RicaModel {
        let space = WeightSpace::grid(4, 4, 1).unwrap();
        let alpha = sample_alpha(space, 0.5, seed, true).unwrap();
        let dict = build_dictionary(DictionaryStrategy::Se { sigma: 1.0 }, &alpha, DictionaryContext::None, None, 0).unwrap();
        RicaModel::predicted(alpha, dict, 12, 0.3, seed).unwrap()
    }

    #[test]
    fn zero_features_cost_the_patch_energy() {
        let x = Matrix::random_normal(9, 16, 1.0, &mut rng_from_seed(1));
        let mut m = RicaModel::full(16, 8, 0.5, 0).unwrap();
        *m.dynamic_mut() = Matrix::zeros(16, 8);
        let energy = x.as_slice().iter().map(|v| v * v).sum::<f64>() / 9.0;
        assert_eq!(rica_loss(&m, &x, RicaOrder::Materialized).unwrap(), energy);
    }

    #[test]
    fn orthonormal_features_reconstruct_exactly() {
        let q = Matrix::from_fn(4, 4, |r, c| if (r + 1) % 4 == c { 1.0 } else { 0.0 });
        let m = RicaModel {
            features: RicaFeatures::Full { w: q },
            sparsity: 0.0,
            epsilon: DEFAULT_EPSILON,
        };
        let x = Matrix::random_normal(5, 4, 1.0, &mut rng_from_seed(2));
        assert!(rica_loss(&m, &x, RicaOrder::Materialized).unwrap() < 1e-28);
    }

    #[test]
    fn orders_agree() {
        let m = predicted_model(3);
        let x = Matrix::random_normal(20, 16, 1.0, &mut rng_from_seed(4));
        let a = rica_loss(&m, &x, RicaOrder::Materialized).unwrap();
        let b = rica_loss(&m, &x, RicaOrder::Pooled).unwrap();
        assert!((a - b).abs() <= 1e-10 * a.abs().max(1.0));
        assert!((rica_objective(&m, &x).unwrap().0 - a).abs() <= 1e-10 * a);
    }

    fn grad_error(m: &RicaModel, x: &Matrix) -> f64 {
        let (_, g) = rica_objective(m, x).unwrap();
        let shape = m.dynamic().shape();
        let mut probe = m.clone();
        check_directional(
            |t| {
                *probe.dynamic_mut() = Matrix::new(shape.0, shape.1, t.to_vec())?;
                rica_loss(&probe, x, RicaOrder::Materialized)
            },
            m.dynamic().as_slice(),
            g.as_slice(),
            GradCheckConfig::default(),
        )
        .unwrap()
    }

    #[test]
    fn gradients_match_differences() {
        let x = Matrix::random_normal(10, 16, 1.0, &mut rng_from_seed(5));
        assert!(grad_error(&RicaModel::full(16, 10, 0.3, 6).unwrap(), &x) < 1e-5);
        assert!(grad_error(&predicted_model(7), &x) < 1e-5);
    }

    #[test]
    fn whitening_decorrelates() {
        let mut rng = rng_from_seed(8);
        let base = Matrix::random_normal(2000, 6, 1.0, &mut rng);
        let mix = Matrix::random_normal(6, 6, 1.0, &mut rng);
        let x = gemm(&base, Trans::N, &mix, Trans::N);
        let wh = Whitening::fit(&x, 0.01, 1e-6).unwrap();
        let y = wh.apply(&x);
        let c = crate::kernels::empirical_covariance(&y).unwrap();
        // Contrast normalization removes one direction (the row mean).
        let mut eig: Vec<f64> = SymmetricEigen::new(DMatrix::from_row_slice(6, 6, c.as_slice())).eigenvalues.iter().copied().collect();
        eig.sort_by(f64::total_cmp);
        assert!(eig[0].abs() < 1e-3);
        for &l in &eig[1..] {
            assert!((l - 1.0).abs() < 1e-3, "{eig:?}");
        }
    }

    #[test]
    fn autocorrelation_separates_smooth_from_noise() {
        let smooth = Matrix::from_fn(64, 1, |i, _| ((i / 8) as f64 * 0.3).sin() + ((i % 8) as f64 * 0.3).cos());
        let noise = Matrix::random_normal(64, 1, 1.0, &mut rng_from_seed(1));
        assert!(spatial_autocorrelation(&smooth, 8, 8, 1) > 0.8);
        assert!(spatial_autocorrelation(&noise, 8, 8, 1).abs() < 0.3);
    }
}
