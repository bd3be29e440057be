//! Network layers with forward and backward passes.
//!
//! Every layer maps a batch matrix (observations in rows) to a batch
//! matrix. Convolutional layers read each row as an NHWC image and write
//! NHWC feature maps, so they chain with dense layers without reshaping.
//!
//! `backward` takes the gradient with respect to the layer's
//! pre-activation, stores gradients for the layer's dynamic parameters and
//! optionally returns the gradient with respect to its input. Static
//! parameters (fixed dictionaries) never receive gradients.

use serde::{Deserialize, Serialize};

use crate::dictionary::BuiltDictionary;
use crate::error::{Error, Result};
use crate::index_sets::IndexSet;
use crate::linalg::{col2im, gemm, gemm_into, im2col, ConvGeometry, FilterBank, Matrix, Tensor4, Trans};
use crate::seed::Rng;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Sigmoid,
    Linear,
    Softmax,
}

pub fn sigmoid(z: f64) -> f64 {
    1.0 / (1.0 + (-z).exp())
}

impl Activation {
    pub fn apply(&self, z: &mut Matrix) {
        match self {
            Activation::Linear => {}
            Activation::Sigmoid => z.as_mut_slice().iter_mut().for_each(|v| *v = sigmoid(*v)),
            Activation::Softmax => {
                let cols = z.cols();
                for row in z.as_mut_slice().chunks_exact_mut(cols) {
                    let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                    let mut s = 0.0;
                    for v in row.iter_mut() {
                        *v = (*v - m).exp();
                        s += *v;
                    }
                    row.iter_mut().for_each(|v| *v /= s);
                }
            }
        }
    }

    /// Gradient with respect to the pre-activation given the activation
    /// output and the gradient with respect to that output.
    pub fn backprop(&self, out: &Matrix, grad_out: &Matrix) -> Matrix {
        assert_eq!(out.shape(), grad_out.shape());
        match self {
            Activation::Linear => grad_out.clone(),
            Activation::Sigmoid => {
                let data = out
                    .as_slice()
                    .iter()
                    .zip(grad_out.as_slice())
                    .map(|(&y, &g)| g * y * (1.0 - y))
                    .collect();
                Matrix::from_parts(out.rows(), out.cols(), data)
            }
            Activation::Softmax => {
                let cols = out.cols();
                let mut d = Matrix::zeros(out.rows(), cols);
                for r in 0..out.rows() {
                    let (p, g) = (out.row(r), grad_out.row(r));
                    let dot: f64 = p.iter().zip(g).map(|(a, b)| a * b).sum();
                    for (k, v) in d.row_mut(r).iter_mut().enumerate() {
                        *v = p[k] * (g[k] - dot);
                    }
                }
                d
            }
        }
    }
}

/// A dynamic parameter tensor and its most recent gradient.
pub struct ParamMut<'a> {
    pub name: &'static str,
    pub value: &'a mut [f64],
    pub grad: &'a [f64],
}

pub trait Layer {
    fn input_len(&self) -> usize;
    fn output_len(&self) -> usize;
    fn activation(&self) -> Activation;

    /// Forward pass without caching; safe to call concurrently on a shared
    /// layer.
    fn infer(&self, x: &Matrix) -> Result<Matrix>;

    /// Forward pass that caches what `backward` needs.
    fn forward(&mut self, x: &Matrix) -> Result<Matrix>;

    fn backward(&mut self, delta: &Matrix, need_input_grad: bool) -> Result<Option<Matrix>>;

    /// Dynamic parameters with their gradients, in a fixed order. Gradients
    /// are empty until the first `backward`.
    fn params(&mut self) -> Vec<ParamMut<'_>>;
}

fn check_input(x: &Matrix, n: usize, op: &'static str) -> Result<()> {
    if x.cols() != n {
        return Err(Error::shape(op, format!("input has {} columns, layer expects {n}", x.cols())));
    }
    Ok(())
}

fn check_delta(delta: &Matrix, rows: usize, cols: usize, op: &'static str) -> Result<()> {
    if delta.shape() != (rows, cols) {
        return Err(Error::shape(
            op,
            format!("gradient is {:?}, expected ({rows}, {cols})", delta.shape()),
        ));
    }
    Ok(())
}

fn finish(mut z: Matrix, bias: &[f64], act: Activation, op: &'static str) -> Result<Matrix> {
    z.add_row_vector(bias);
    act.apply(&mut z);
    if !z.is_finite() {
        return Err(Error::NonFinite(op));
    }
    Ok(z)
}

fn sizes_of(n: usize, parts: usize) -> Vec<usize> {
    (0..parts)
        .map(|j| n / parts + usize::from(j < n % parts))
        .collect()
}

/// Splits `n_h` hidden units over `j` columns as evenly as possible; the
/// first `n_h mod j` columns get one extra unit.
pub fn split_units(n_h: usize, j: usize) -> Result<Vec<usize>> {
    if j == 0 || j > n_h {
        return Err(Error::Config(format!("cannot split {n_h} units over {j} columns")));
    }
    Ok(sizes_of(n_h, j))
}

/// `h = g(v W + b)`.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct DenseLayer {
    pub w: Matrix,
    pub bias: Vec<f64>,
    pub activation: Activation,
    #[serde(skip)]
    cache: Option<Matrix>,
    #[serde(skip)]
    grads: [Vec<f64>; 2],
}

impl DenseLayer {
    pub fn new(w: Matrix, bias: Vec<f64>, activation: Activation) -> Result<Self> {
        if bias.len() != w.cols() {
            return Err(Error::shape("DenseLayer::new", "bias length must equal output width"));
        }
        Ok(Self {
            w,
            bias,
            activation,
            cache: None,
            grads: Default::default(),
        })
    }

    /// Gaussian weights with standard deviation `1/√n_v`, zero bias.
    pub fn random(n_v: usize, n_h: usize, activation: Activation, rng: &mut Rng) -> Self {
        let w = Matrix::random_normal(n_v, n_h, 1.0 / (n_v as f64).sqrt(), rng);
        Self::new(w, vec![0.0; n_h], activation).unwrap()
    }
}

impl Layer for DenseLayer {
    fn input_len(&self) -> usize {
        self.w.rows()
    }
    fn output_len(&self) -> usize {
        self.w.cols()
    }
    fn activation(&self) -> Activation {
        self.activation
    }

    fn infer(&self, x: &Matrix) -> Result<Matrix> {
        check_input(x, self.w.rows(), "dense forward")?;
        finish(gemm(x, Trans::N, &self.w, Trans::N), &self.bias, self.activation, "dense forward")
    }

    fn forward(&mut self, x: &Matrix) -> Result<Matrix> {
        let out = self.infer(x)?;
        self.cache = Some(x.clone());
        Ok(out)
    }

    fn backward(&mut self, delta: &Matrix, need_input_grad: bool) -> Result<Option<Matrix>> {
        let x = self.cache.as_ref().ok_or(Error::State("backward called before forward"))?;
        check_delta(delta, x.rows(), self.w.cols(), "dense backward")?;
        self.grads = [
            gemm(x, Trans::T, delta, Trans::N).into_vec(),
            delta.column_sums(),
        ];
        Ok(need_input_grad.then(|| gemm(delta, Trans::N, &self.w, Trans::T)))
    }

    fn params(&mut self) -> Vec<ParamMut<'_>> {
        let [gw, gb] = &self.grads;
        vec![
            ParamMut {
                name: "w",
                value: self.w.as_mut_slice(),
                grad: gw,
            },
            ParamMut {
                name: "bias",
                value: &mut self.bias,
                grad: gb,
            },
        ]
    }
}

/// One column of a predicted layer: its index set, its dictionary `U_{α_j}`
/// and its learned coefficients `W_{α_j}` (`n_α × n_{h_j}`).
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct DenseColumn {
    pub alpha: IndexSet,
    pub dictionary: BuiltDictionary,
    pub w_alpha: Matrix,
}

impl DenseColumn {
    pub fn new(alpha: IndexSet, dictionary: BuiltDictionary, w_alpha: Matrix) -> Result<Self> {
        if dictionary.n_v() != alpha.space().size() {
            return Err(Error::shape("DenseColumn::new", "dictionary does not span the weight space"));
        }
        if w_alpha.rows() != dictionary.n_alpha() {
            return Err(Error::shape(
                "DenseColumn::new",
                format!("w_α has {} rows, dictionary has {} atoms", w_alpha.rows(), dictionary.n_alpha()),
            ));
        }
        Ok(Self {
            alpha,
            dictionary,
            w_alpha,
        })
    }

    pub fn hidden(&self) -> usize {
        self.w_alpha.cols()
    }

    pub fn n_alpha(&self) -> usize {
        self.w_alpha.rows()
    }
}

/// Evaluation order for a predicted dense layer. Both orders compute the
/// same function.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum DenseOrder {
    /// `(v U_α) W_α`: a fixed linear pooling followed by a small dense layer.
    Pooled,
    /// `v (U_α W_α)`: materialize the predicted weights first.
    Materialized,
    /// Whichever needs fewer multiply-adds for the batch at hand.
    #[default]
    Auto,
}

#[derive(Clone, Debug)]
enum DenseCache {
    Pooled { x: Matrix, pooled: Vec<Matrix> },
    Materialized { x: Matrix },
}

/// A dense layer whose weight matrix is `⟦U_{α_1}W_{α_1}, …, U_{α_J}W_{α_J}⟧`.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct PredictedDenseLayer {
    pub columns: Vec<DenseColumn>,
    pub bias: Vec<f64>,
    pub activation: Activation,
    #[serde(default)]
    pub order: DenseOrder,
    #[serde(skip)]
    cache: Option<DenseCache>,
    #[serde(skip)]
    grads: Vec<Vec<f64>>,
}

impl PredictedDenseLayer {
    pub fn new(columns: Vec<DenseColumn>, bias: Vec<f64>, activation: Activation) -> Result<Self> {
        let first = columns
            .first()
            .ok_or_else(|| Error::Config("a predicted layer needs at least one column".into()))?;
        let n_v = first.dictionary.n_v();
        if columns.iter().any(|c| c.dictionary.n_v() != n_v) {
            return Err(Error::shape("PredictedDenseLayer::new", "columns disagree on input width"));
        }
        let n_h: usize = columns.iter().map(DenseColumn::hidden).sum();
        if bias.len() != n_h {
            return Err(Error::shape("PredictedDenseLayer::new", "bias length must equal total hidden units"));
        }
        Ok(Self {
            columns,
            bias,
            activation,
            order: DenseOrder::Auto,
            cache: None,
            grads: Vec::new(),
        })
    }

    /// Columns with Gaussian coefficients of standard deviation `1/√n_α`
    /// and zero bias. `hidden[j]` units go to column `j`.
    pub fn random(
        dictionaries: Vec<(IndexSet, BuiltDictionary)>,
        hidden: &[usize],
        activation: Activation,
        rng: &mut Rng,
    ) -> Result<Self> {
        if dictionaries.len() != hidden.len() {
            return Err(Error::Config("one hidden-unit count per column is required".into()));
        }
        let columns = dictionaries
            .into_iter()
            .zip(hidden)
            .map(|((alpha, dict), &h)| {
                let na = dict.n_alpha();
                let w = Matrix::random_normal(na, h, 1.0 / (na as f64).sqrt(), rng);
                DenseColumn::new(alpha, dict, w)
            })
            .collect::<Result<Vec<_>>>()?;
        let n_h = hidden.iter().sum();
        Self::new(columns, vec![0.0; n_h], activation)
    }

    pub fn n_v(&self) -> usize {
        self.columns[0].dictionary.n_v()
    }

    pub fn n_h(&self) -> usize {
        self.bias.len()
    }

    /// The full predicted weight matrix `[U_1 W_1, …, U_J W_J]`.
    pub fn materialize(&self) -> Matrix {
        let mut w = Matrix::zeros(self.n_v(), self.n_h());
        let mut at = 0;
        for c in &self.columns {
            let block = gemm(&c.dictionary.u, Trans::N, &c.w_alpha, Trans::N);
            w.set_col_block(at, &block);
            at += c.hidden();
        }
        w
    }

    fn resolve_order(&self, batch: usize) -> DenseOrder {
        match self.order {
            DenseOrder::Auto => {
                let nv = self.n_v();
                let pooled: usize = self
                    .columns
                    .iter()
                    .map(|c| batch * c.n_alpha() * (nv + c.hidden()))
                    .sum();
                let materialized: usize = self
                    .columns
                    .iter()
                    .map(|c| nv * c.n_alpha() * c.hidden())
                    .sum::<usize>()
                    + batch * nv * self.n_h();
                if pooled <= materialized {
                    DenseOrder::Pooled
                } else {
                    DenseOrder::Materialized
                }
            }
            o => o,
        }
    }

    fn run(&self, x: &Matrix, order: DenseOrder) -> Result<(Matrix, DenseCache)> {
        check_input(x, self.n_v(), "predicted dense forward")?;
        let order = match order {
            DenseOrder::Auto => self.resolve_order(x.rows()),
            o => o,
        };
        match order {
            DenseOrder::Pooled => {
                let mut z = Matrix::zeros(x.rows(), self.n_h());
                let mut pooled = Vec::with_capacity(self.columns.len());
                let mut at = 0;
                for c in &self.columns {
                    let p = gemm(x, Trans::N, &c.dictionary.u, Trans::N);
                    z.set_col_block(at, &gemm(&p, Trans::N, &c.w_alpha, Trans::N));
                    at += c.hidden();
                    pooled.push(p);
                }
                let out = finish(z, &self.bias, self.activation, "predicted dense forward")?;
                Ok((out, DenseCache::Pooled { x: x.clone(), pooled }))
            }
            _ => {
                let w = self.materialize();
                let out = finish(gemm(x, Trans::N, &w, Trans::N), &self.bias, self.activation, "predicted dense forward")?;
                Ok((out, DenseCache::Materialized { x: x.clone() }))
            }
        }
    }

    /// Forward pass in an explicit order, without caching.
    pub fn infer_with(&self, x: &Matrix, order: DenseOrder) -> Result<Matrix> {
        self.run(x, order).map(|(out, _)| out)
    }
}

impl Layer for PredictedDenseLayer {
    fn input_len(&self) -> usize {
        self.n_v()
    }
    fn output_len(&self) -> usize {
        self.n_h()
    }
    fn activation(&self) -> Activation {
        self.activation
    }

    fn infer(&self, x: &Matrix) -> Result<Matrix> {
        self.infer_with(x, self.order)
    }

    fn forward(&mut self, x: &Matrix) -> Result<Matrix> {
        let (out, cache) = self.run(x, self.order)?;
        self.cache = Some(cache);
        Ok(out)
    }

    fn backward(&mut self, delta: &Matrix, need_input_grad: bool) -> Result<Option<Matrix>> {
        let cache = self.cache.as_ref().ok_or(Error::State("backward called before forward"))?;
        let x = match cache {
            DenseCache::Pooled { x, .. } | DenseCache::Materialized { x } => x,
        };
        check_delta(delta, x.rows(), self.n_h(), "predicted dense backward")?;
        let mut grads = Vec::with_capacity(2 * self.columns.len() + 1);
        let mut dx = need_input_grad.then(|| Matrix::zeros(x.rows(), self.n_v()));
        let full_grad = match cache {
            DenseCache::Materialized { x } => Some(gemm(x, Trans::T, delta, Trans::N)),
            DenseCache::Pooled { .. } => None,
        };
        let mut at = 0;
        for (j, c) in self.columns.iter().enumerate() {
            let dj = delta.col_block(at, c.hidden());
            let (g_alpha, g_u) = match (cache, &full_grad) {
                (DenseCache::Pooled { x, pooled }, _) => {
                    let g_alpha = gemm(&pooled[j], Trans::T, &dj, Trans::N);
                    let g_u = c.dictionary.trainable.then(|| {
                        let back = gemm(&dj, Trans::N, &c.w_alpha, Trans::T);
                        gemm(x, Trans::T, &back, Trans::N)
                    });
                    (g_alpha, g_u)
                }
                (DenseCache::Materialized { .. }, Some(g)) => {
                    let gj = g.col_block(at, c.hidden());
                    let g_alpha = gemm(&c.dictionary.u, Trans::T, &gj, Trans::N);
                    let g_u = c
                        .dictionary
                        .trainable
                        .then(|| gemm(&gj, Trans::N, &c.w_alpha, Trans::T));
                    (g_alpha, g_u)
                }
                _ => unreachable!(),
            };
            grads.push(g_alpha.into_vec());
            if let Some(g_u) = g_u {
                grads.push(g_u.into_vec());
            }
            if let Some(dx) = dx.as_mut() {
                // dx += (δ_j W_jᵀ) U_jᵀ
                let back = gemm(&dj, Trans::N, &c.w_alpha, Trans::T);
                gemm_into(1.0, &back, Trans::N, &c.dictionary.u, Trans::T, 1.0, dx);
            }
            at += c.hidden();
        }
        grads.push(delta.column_sums());
        self.grads = grads;
        Ok(dx)
    }

    fn params(&mut self) -> Vec<ParamMut<'_>> {
        let mut out = Vec::new();
        let mut g = self.grads.iter().map(Vec::as_slice);
        let empty: &[f64] = &[];
        let have = !self.grads.is_empty();
        for c in self.columns.iter_mut() {
            out.push(ParamMut {
                name: "w_alpha",
                value: c.w_alpha.as_mut_slice(),
                grad: if have { g.next().unwrap() } else { empty },
            });
            if c.dictionary.trainable {
                out.push(ParamMut {
                    name: "u",
                    value: c.dictionary.u.as_mut_slice(),
                    grad: if have { g.next().unwrap() } else { empty },
                });
            }
        }
        out.push(ParamMut {
            name: "bias",
            value: &mut self.bias,
            grad: if have { g.next().unwrap() } else { empty },
        });
        out
    }
}

/// Spec-style entry point: forward pass of a predicted dense layer.
pub fn forward_dense_predicted(layer: &PredictedDenseLayer, v: &Matrix) -> Result<Matrix> {
    layer.infer(v)
}

fn conv_apply(x: &Matrix, g: &ConvGeometry, op: &'static str) -> Result<Matrix> {
    check_input(x, g.input_len(), op)?;
    Ok(im2col(x.as_slice(), x.rows(), g))
}

/// Reinterprets `(B·P) × F` as `B × (P·F)`; identical memory in NHWC.
fn to_batch(z: Matrix, batch: usize) -> Matrix {
    let (r, c) = z.shape();
    Matrix::from_parts(batch, r * c / batch.max(1), z.into_vec())
}

fn to_positions(delta: &Matrix, positions: usize, filters: usize) -> Matrix {
    Matrix::from_parts(delta.rows() * positions, filters, delta.as_slice().to_vec())
}

/// Full convolutional layer: valid, strided cross-correlation with a filter
/// bank, then bias and activation.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ConvLayer {
    pub geometry: ConvGeometry,
    /// `(h·w·c) × n_filters`.
    pub w: Matrix,
    pub bias: Vec<f64>,
    pub activation: Activation,
    #[serde(skip)]
    cache: Option<(Matrix, usize)>,
    #[serde(skip)]
    grads: [Vec<f64>; 2],
}

impl ConvLayer {
    pub fn new(geometry: ConvGeometry, w: Matrix, bias: Vec<f64>, activation: Activation) -> Result<Self> {
        geometry.validate()?;
        if w.rows() != geometry.patch_len() || bias.len() != w.cols() {
            return Err(Error::shape("ConvLayer::new", "filter bank does not match geometry"));
        }
        Ok(Self {
            geometry,
            w,
            bias,
            activation,
            cache: None,
            grads: Default::default(),
        })
    }

    pub fn random(geometry: ConvGeometry, n_filters: usize, activation: Activation, rng: &mut Rng) -> Result<Self> {
        let n = geometry.patch_len();
        let w = Matrix::random_normal(n, n_filters, 1.0 / (n as f64).sqrt(), rng);
        Self::new(geometry, w, vec![0.0; n_filters], activation)
    }

    pub fn n_filters(&self) -> usize {
        self.w.cols()
    }

    pub fn filter_bank(&self) -> FilterBank {
        let g = &self.geometry;
        FilterBank::new(g.filter_height, g.filter_width, g.in_channels, self.w.clone()).unwrap()
    }
}

impl Layer for ConvLayer {
    fn input_len(&self) -> usize {
        self.geometry.input_len()
    }
    fn output_len(&self) -> usize {
        self.geometry.positions() * self.n_filters()
    }
    fn activation(&self) -> Activation {
        self.activation
    }

    fn infer(&self, x: &Matrix) -> Result<Matrix> {
        let cols = conv_apply(x, &self.geometry, "conv forward")?;
        let z = finish(gemm(&cols, Trans::N, &self.w, Trans::N), &self.bias, self.activation, "conv forward")?;
        Ok(to_batch(z, x.rows()))
    }

    fn forward(&mut self, x: &Matrix) -> Result<Matrix> {
        let cols = conv_apply(x, &self.geometry, "conv forward")?;
        let z = finish(gemm(&cols, Trans::N, &self.w, Trans::N), &self.bias, self.activation, "conv forward")?;
        self.cache = Some((cols, x.rows()));
        Ok(to_batch(z, x.rows()))
    }

    fn backward(&mut self, delta: &Matrix, need_input_grad: bool) -> Result<Option<Matrix>> {
        let (cols, batch) = self.cache.as_ref().ok_or(Error::State("backward called before forward"))?;
        check_delta(delta, *batch, self.output_len(), "conv backward")?;
        let d = to_positions(delta, self.geometry.positions(), self.n_filters());
        self.grads = [gemm(cols, Trans::T, &d, Trans::N).into_vec(), d.column_sums()];
        Ok(need_input_grad.then(|| col2im(&gemm(&d, Trans::N, &self.w, Trans::T), *batch, &self.geometry)))
    }

    fn params(&mut self) -> Vec<ParamMut<'_>> {
        let [gw, gb] = &self.grads;
        vec![
            ParamMut {
                name: "w",
                value: self.w.as_mut_slice(),
                grad: gw,
            },
            ParamMut {
                name: "bias",
                value: &mut self.bias,
                grad: gb,
            },
        ]
    }
}

/// Evaluation order for a predicted convolution.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum ConvOrder {
    /// Correlate with the `n_α` dictionary filters, then mix the feature
    /// maps with `w_α`.
    DictionaryFirst,
    /// Build the filter bank `U_α w_α`, then correlate.
    Materialized,
    /// Dictionary first when there are more filters than atoms.
    #[default]
    Auto,
}

/// Convolutional layer with filter bank `reshape(U_α w_α)`.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct PredictedConvLayer {
    pub geometry: ConvGeometry,
    pub alpha: IndexSet,
    pub dictionary: BuiltDictionary,
    /// `n_α × n_filters`.
    pub w_alpha: Matrix,
    pub bias: Vec<f64>,
    pub activation: Activation,
    #[serde(default)]
    pub order: ConvOrder,
    #[serde(skip)]
    cache: Option<ConvCache>,
    #[serde(skip)]
    grads: Vec<Vec<f64>>,
}

#[derive(Clone, Debug)]
struct ConvCache {
    cols: Matrix,
    batch: usize,
    /// Dictionary responses, present in dictionary-first order.
    maps: Option<Matrix>,
}

impl PredictedConvLayer {
    pub fn new(
        geometry: ConvGeometry,
        alpha: IndexSet,
        dictionary: BuiltDictionary,
        w_alpha: Matrix,
        bias: Vec<f64>,
        activation: Activation,
    ) -> Result<Self> {
        geometry.validate()?;
        if dictionary.n_v() != geometry.patch_len() || alpha.space().size() != geometry.patch_len() {
            return Err(Error::shape("PredictedConvLayer::new", "dictionary does not span the filter space"));
        }
        if w_alpha.rows() != dictionary.n_alpha() || bias.len() != w_alpha.cols() {
            return Err(Error::shape("PredictedConvLayer::new", "w_α or bias has the wrong shape"));
        }
        Ok(Self {
            geometry,
            alpha,
            dictionary,
            w_alpha,
            bias,
            activation,
            order: ConvOrder::Auto,
            cache: None,
            grads: Vec::new(),
        })
    }

    pub fn random(
        geometry: ConvGeometry,
        alpha: IndexSet,
        dictionary: BuiltDictionary,
        n_filters: usize,
        activation: Activation,
        rng: &mut Rng,
    ) -> Result<Self> {
        let na = dictionary.n_alpha();
        let w = Matrix::random_normal(na, n_filters, 1.0 / (na as f64).sqrt(), rng);
        Self::new(geometry, alpha, dictionary, w, vec![0.0; n_filters], activation)
    }

    pub fn n_filters(&self) -> usize {
        self.w_alpha.cols()
    }

    /// The effective filter bank `U_α w_α`.
    pub fn filter_bank(&self) -> FilterBank {
        let g = &self.geometry;
        let w = gemm(&self.dictionary.u, Trans::N, &self.w_alpha, Trans::N);
        FilterBank::new(g.filter_height, g.filter_width, g.in_channels, w).unwrap()
    }

    fn resolve_order(&self, order: ConvOrder) -> ConvOrder {
        match order {
            ConvOrder::Auto if self.n_filters() > self.dictionary.n_alpha() => ConvOrder::DictionaryFirst,
            ConvOrder::Auto => ConvOrder::Materialized,
            o => o,
        }
    }

    fn run(&self, x: &Matrix, order: ConvOrder) -> Result<(Matrix, ConvCache)> {
        let cols = conv_apply(x, &self.geometry, "predicted conv forward")?;
        let (z, maps) = match self.resolve_order(order) {
            ConvOrder::DictionaryFirst => {
                let maps = gemm(&cols, Trans::N, &self.dictionary.u, Trans::N);
                (gemm(&maps, Trans::N, &self.w_alpha, Trans::N), Some(maps))
            }
            _ => (gemm(&cols, Trans::N, &self.filter_bank().weights, Trans::N), None),
        };
        let z = finish(z, &self.bias, self.activation, "predicted conv forward")?;
        Ok((
            to_batch(z, x.rows()),
            ConvCache {
                cols,
                batch: x.rows(),
                maps,
            },
        ))
    }

    pub fn infer_with(&self, x: &Matrix, order: ConvOrder) -> Result<Matrix> {
        self.run(x, order).map(|(out, _)| out)
    }
}

impl Layer for PredictedConvLayer {
    fn input_len(&self) -> usize {
        self.geometry.input_len()
    }
    fn output_len(&self) -> usize {
        self.geometry.positions() * self.n_filters()
    }
    fn activation(&self) -> Activation {
        self.activation
    }

    fn infer(&self, x: &Matrix) -> Result<Matrix> {
        self.infer_with(x, self.order)
    }

    fn forward(&mut self, x: &Matrix) -> Result<Matrix> {
        let (out, cache) = self.run(x, self.order)?;
        self.cache = Some(cache);
        Ok(out)
    }

    fn backward(&mut self, delta: &Matrix, need_input_grad: bool) -> Result<Option<Matrix>> {
        let cache = self.cache.as_ref().ok_or(Error::State("backward called before forward"))?;
        check_delta(delta, cache.batch, self.output_len(), "predicted conv backward")?;
        let d = to_positions(delta, self.geometry.positions(), self.n_filters());
        let u = &self.dictionary.u;
        let mut grads = Vec::with_capacity(3);
        match &cache.maps {
            Some(maps) => {
                grads.push(gemm(maps, Trans::T, &d, Trans::N).into_vec());
                if self.dictionary.trainable {
                    let back = gemm(&d, Trans::N, &self.w_alpha, Trans::T);
                    grads.push(gemm(&cache.cols, Trans::T, &back, Trans::N).into_vec());
                }
            }
            None => {
                let g = gemm(&cache.cols, Trans::T, &d, Trans::N);
                grads.push(gemm(u, Trans::T, &g, Trans::N).into_vec());
                if self.dictionary.trainable {
                    grads.push(gemm(&g, Trans::N, &self.w_alpha, Trans::T).into_vec());
                }
            }
        }
        grads.push(d.column_sums());
        self.grads = grads;
        Ok(need_input_grad.then(|| {
            let back = gemm(&d, Trans::N, &self.w_alpha, Trans::T);
            col2im(&gemm(&back, Trans::N, u, Trans::T), cache.batch, &self.geometry)
        }))
    }

    fn params(&mut self) -> Vec<ParamMut<'_>> {
        let empty: &[f64] = &[];
        let have = !self.grads.is_empty();
        let mut g = self.grads.iter().map(Vec::as_slice);
        let mut next = || if have { g.next().unwrap() } else { empty };
        let mut out = vec![ParamMut {
            name: "w_alpha",
            value: self.w_alpha.as_mut_slice(),
            grad: next(),
        }];
        if self.dictionary.trainable {
            out.push(ParamMut {
                name: "u",
                value: self.dictionary.u.as_mut_slice(),
                grad: next(),
            });
        }
        out.push(ParamMut {
            name: "bias",
            value: &mut self.bias,
            grad: next(),
        });
        out
    }
}

/// Spec-style entry point: forward pass of a predicted convolution on NHWC
/// images.
pub fn forward_conv_predicted(layer: &PredictedConvLayer, v: &Tensor4) -> Result<Tensor4> {
    let g = &layer.geometry;
    if (v.height(), v.width(), v.channels()) != (g.in_height, g.in_width, g.in_channels) {
        return Err(Error::shape("forward_conv_predicted", "input does not match layer geometry"));
    }
    let out = layer.infer(&v.as_matrix())?;
    Tensor4::from_matrix(out, g.out_height(), g.out_width(), layer.n_filters())
}

/// Any layer kind, as stored in a network and its checkpoints.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum AnyLayer {
    Dense(DenseLayer),
    PredictedDense(PredictedDenseLayer),
    Conv(ConvLayer),
    PredictedConv(PredictedConvLayer),
}

macro_rules! dispatch {
    ($self:expr, $l:ident => $e:expr) => {
        match $self {
            AnyLayer::Dense($l) => $e,
            AnyLayer::PredictedDense($l) => $e,
            AnyLayer::Conv($l) => $e,
            AnyLayer::PredictedConv($l) => $e,
        }
    };
}

impl AnyLayer {
    pub fn kind(&self) -> &'static str {
        match self {
            AnyLayer::Dense(_) => "dense",
            AnyLayer::PredictedDense(_) => "predicted_dense",
            AnyLayer::Conv(_) => "conv",
            AnyLayer::PredictedConv(_) => "predicted_conv",
        }
    }

    /// The effective `n_v × n_h` weight matrix (filter bank for conv layers).
    pub fn effective_weights(&self) -> Matrix {
        match self {
            AnyLayer::Dense(l) => l.w.clone(),
            AnyLayer::PredictedDense(l) => l.materialize(),
            AnyLayer::Conv(l) => l.w.clone(),
            AnyLayer::PredictedConv(l) => l.filter_bank().weights,
        }
    }
}

impl Layer for AnyLayer {
    fn input_len(&self) -> usize {
        dispatch!(self, l => l.input_len())
    }
    fn output_len(&self) -> usize {
        dispatch!(self, l => l.output_len())
    }
    fn activation(&self) -> Activation {
        dispatch!(self, l => l.activation())
    }
    fn infer(&self, x: &Matrix) -> Result<Matrix> {
        dispatch!(self, l => l.infer(x))
    }
    fn forward(&mut self, x: &Matrix) -> Result<Matrix> {
        dispatch!(self, l => l.forward(x))
    }
    fn backward(&mut self, delta: &Matrix, need_input_grad: bool) -> Result<Option<Matrix>> {
        dispatch!(self, l => l.backward(delta, need_input_grad))
    }
    fn params(&mut self) -> Vec<ParamMut<'_>> {
        dispatch!(self, l => l.params())
    }
}
