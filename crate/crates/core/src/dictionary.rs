//! Construction of the static factor `U_α` for each dictionary strategy.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::index_sets::IndexSet;
use crate::kernels::{empirical_kernel_from_activations, ridge_dictionary, Kernel, RidgeConfig};
use crate::linalg::{matmul, matmul_tn, solve_spd, Matrix};
use crate::seed::rng_from_seed;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind")]
pub enum DictionaryStrategy {
    /// Kernel ridge regression with a squared-exponential kernel.
    #[serde(rename = "SE")]
    Se { sigma: f64 },
    /// Kernel ridge regression with the empirical covariance of the layer inputs.
    Emp,
    /// As `Emp` with the elementwise squared covariance.
    Emp2,
    /// Features of a tied-weight autoencoder trained on the layer inputs.
    #[serde(rename = "AE")]
    Ae { epochs: usize },
    /// iid Gaussian columns, normalized to unit length.
    RandFixU,
    /// Columns of the identity selected by α.
    RandCon,
    /// Gaussian initialized and trained together with the coefficients.
    LowRank,
}

impl DictionaryStrategy {
    pub fn validate(&self) -> Result<()> {
        match *self {
            DictionaryStrategy::Se { sigma } if !(sigma > 0.0 && sigma.is_finite()) => {
                Err(Error::Config(format!("SE length scale must be > 0, got {sigma}")))
            }
            DictionaryStrategy::Ae { epochs: 0 } => {
                Err(Error::Config("AE pretraining budget must be >= 1 epoch".into()))
            }
            _ => Ok(()),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            DictionaryStrategy::Se { .. } => "SE",
            DictionaryStrategy::Emp => "Emp",
            DictionaryStrategy::Emp2 => "Emp2",
            DictionaryStrategy::Ae { .. } => "AE",
            DictionaryStrategy::RandFixU => "RandFixU",
            DictionaryStrategy::RandCon => "RandCon",
            DictionaryStrategy::LowRank => "LowRank",
        }
    }

    /// Whether `U_α` is built by kernel ridge regression.
    pub fn is_kernel(&self) -> bool {
        matches!(
            self,
            DictionaryStrategy::Se { .. } | DictionaryStrategy::Emp | DictionaryStrategy::Emp2
        )
    }

    /// Whether the strategy indexes weight-space locations, so that `w_α`
    /// are literally the weights at α.
    pub fn anchors_locations(&self) -> bool {
        self.is_kernel() || matches!(self, DictionaryStrategy::RandCon)
    }

    pub fn needs_activations(&self) -> bool {
        matches!(self, DictionaryStrategy::Emp | DictionaryStrategy::Emp2)
    }

    pub fn needs_encoder(&self) -> bool {
        matches!(self, DictionaryStrategy::Ae { .. })
    }
}

impl fmt::Display for DictionaryStrategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Parses a strategy name. `SE` takes length scale 1 and `AE` a one-epoch
/// budget; callers override the parameters afterwards.
impl FromStr for DictionaryStrategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "SE" => DictionaryStrategy::Se { sigma: 1.0 },
            "Emp" => DictionaryStrategy::Emp,
            "Emp2" => DictionaryStrategy::Emp2,
            "AE" => DictionaryStrategy::Ae { epochs: 1 },
            "RandFixU" => DictionaryStrategy::RandFixU,
            "RandCon" => DictionaryStrategy::RandCon,
            "LowRank" => DictionaryStrategy::LowRank,
            other => return Err(Error::Config(format!("unknown dictionary strategy `{other}`"))),
        })
    }
}

/// Data a strategy may need beyond α.
#[derive(Clone, Copy, Debug)]
pub enum DictionaryContext<'a> {
    None,
    /// Layer input activations, observations in rows (`Emp`, `Emp2`).
    Activations(&'a Matrix),
    /// Pretrained encoder weights, `n_v × n_α` (`AE`).
    Encoder(&'a Matrix),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub strategy: DictionaryStrategy,
    pub seed: u64,
    pub lambda: Option<f64>,
    /// SHA-256 prefix of the context data, when a context was used.
    pub context_digest: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BuiltDictionary {
    pub u: Matrix,
    pub trainable: bool,
    pub provenance: Provenance,
}

impl BuiltDictionary {
    pub fn n_v(&self) -> usize {
        self.u.rows()
    }

    pub fn n_alpha(&self) -> usize {
        self.u.cols()
    }

    /// A fixed, untrainable dictionary wrapping an arbitrary matrix.
    pub fn fixed(u: Matrix, strategy: DictionaryStrategy) -> Self {
        Self {
            u,
            trainable: false,
            provenance: Provenance {
                strategy,
                seed: 0,
                lambda: None,
                context_digest: None,
            },
        }
    }
}

pub fn digest_matrix(m: &Matrix) -> String {
    let mut h = Sha256::new();
    h.update((m.rows() as u64).to_le_bytes());
    h.update((m.cols() as u64).to_le_bytes());
    for v in m.as_slice() {
        h.update(v.to_le_bytes());
    }
    h.finalize()[..8].iter().map(|b| format!("{b:02x}")).collect()
}

/// Builds `U_α` for one column.
///
/// `ridge` overrides the kernel's default λ for the kernel strategies and is
/// ignored otherwise.
pub fn build_dictionary(
    strategy: DictionaryStrategy,
    alpha: &IndexSet,
    context: DictionaryContext<'_>,
    ridge: Option<RidgeConfig>,
    seed: u64,
) -> Result<BuiltDictionary> {
    strategy.validate()?;
    let nv = alpha.space().size();
    let na = alpha.len();
    match (&context, strategy.needs_activations(), strategy.needs_encoder()) {
        (DictionaryContext::Activations(_), true, _) | (DictionaryContext::Encoder(_), _, true) => {}
        (DictionaryContext::None, false, false) => {}
        (DictionaryContext::None, _, _) => {
            return Err(Error::Config(format!("{strategy} dictionary requires context data")));
        }
        _ => {
            return Err(Error::Config(format!(
                "{strategy} dictionary does not accept this kind of context"
            )));
        }
    }
    let digest = match context {
        DictionaryContext::Activations(m) | DictionaryContext::Encoder(m) => Some(digest_matrix(m)),
        DictionaryContext::None => None,
    };
    let mut lambda = None;

    let u = match strategy {
        DictionaryStrategy::Se { sigma } => {
            let k = Kernel::squared_exponential(sigma)?;
            let cfg = ridge.unwrap_or(RidgeConfig::new(k.default_lambda())?);
            lambda = Some(cfg.lambda);
            ridge_dictionary(&k, alpha, cfg)?
        }
        DictionaryStrategy::Emp | DictionaryStrategy::Emp2 => {
            let DictionaryContext::Activations(h) = context else { unreachable!() };
            if h.cols() != nv {
                return Err(Error::shape(
                    "build_dictionary",
                    format!("activations have {} units, weight space has {nv}", h.cols()),
                ));
            }
            let k = empirical_kernel_from_activations(h, strategy == DictionaryStrategy::Emp2)?;
            let cfg = ridge.unwrap_or(RidgeConfig::new(k.default_lambda())?);
            lambda = Some(cfg.lambda);
            ridge_dictionary(&k, alpha, cfg)?
        }
        DictionaryStrategy::Ae { .. } => {
            let DictionaryContext::Encoder(e) = context else { unreachable!() };
            if e.shape() != (nv, na) {
                return Err(Error::shape(
                    "build_dictionary",
                    format!("AE encoder is {:?}, need {nv}x{na}", e.shape()),
                ));
            }
            e.clone()
        }
        DictionaryStrategy::RandFixU => {
            let mut u = Matrix::random_normal(nv, na, 1.0, &mut rng_from_seed(seed));
            normalize_columns(&mut u);
            u
        }
        DictionaryStrategy::RandCon => {
            if na > nv {
                return Err(Error::Infeasible(format!(
                    "random connections need n_α ≤ n_v, got {na} > {nv}"
                )));
            }
            let mut u = Matrix::zeros(nv, na);
            for (col, &i) in alpha.indices().iter().enumerate() {
                u.set(i, col, 1.0);
            }
            u
        }
        DictionaryStrategy::LowRank => {
            Matrix::random_normal(nv, na, 1.0 / (na as f64).sqrt(), &mut rng_from_seed(seed))
        }
    };
    if !u.is_finite() {
        return Err(Error::NonFinite("build_dictionary"));
    }
    Ok(BuiltDictionary {
        u,
        trainable: strategy == DictionaryStrategy::LowRank,
        provenance: Provenance {
            strategy,
            seed,
            lambda,
            context_digest: digest,
        },
    })
}

fn normalize_columns(u: &mut Matrix) {
    let (rows, cols) = u.shape();
    for c in 0..cols {
        let norm = (0..rows).map(|r| u.get(r, c).powi(2)).sum::<f64>().sqrt();
        if norm > 0.0 {
            for r in 0..rows {
                u.set(r, c, u.get(r, c) / norm);
            }
        }
    }
}

/// `U_α W_α`, the full `n_v × n_h` weight matrix.
pub fn predict_weights(dict: &BuiltDictionary, w_alpha: &Matrix) -> Result<Matrix> {
    if w_alpha.rows() != dict.n_alpha() {
        return Err(Error::shape(
            "predict_weights",
            format!("w_α has {} rows, dictionary has {} atoms", w_alpha.rows(), dict.n_alpha()),
        ));
    }
    matmul(&dict.u, w_alpha)
}

/// Coefficients that best represent existing full weights `w` (`n_v × n_h`)
/// in a dictionary. Location-anchored strategies take the weights at α;
/// others use a least-squares fit.
pub fn coefficients_from_weights(dict: &BuiltDictionary, alpha: &IndexSet, w: &Matrix) -> Result<Matrix> {
    if w.rows() != dict.n_v() {
        return Err(Error::shape(
            "coefficients_from_weights",
            format!("weights have {} rows, dictionary spans {}", w.rows(), dict.n_v()),
        ));
    }
    if dict.provenance.strategy.anchors_locations() && alpha.len() == dict.n_alpha() {
        return w.select_rows(alpha.indices());
    }
    let mut gram = matmul_tn(&dict.u, &dict.u)?;
    let jitter = 1e-8 * (0..gram.rows()).map(|i| gram.get(i, i)).fold(0.0, f64::max).max(1e-300);
    for i in 0..gram.rows() {
        gram.set(i, i, gram.get(i, i) + jitter);
    }
    solve_spd(&gram, &matmul_tn(&dict.u, w)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::gabor_filter;
    use crate::index_sets::{sample_alpha, WeightSpace};
    use proptest::prelude::*;

    #[test]
    fn random_connections_are_identity_columns() {
        let space = WeightSpace::flat(4).unwrap();
        let alpha = IndexSet::new(space, vec![0, 2]).unwrap();
        let d = build_dictionary(DictionaryStrategy::RandCon, &alpha, DictionaryContext::None, None, 1).unwrap();
        let expect = Matrix::from_rows(&[
            vec![1.0, 0.0],
            vec![0.0, 0.0],
            vec![0.0, 1.0],
            vec![0.0, 0.0],
        ])
        .unwrap();
        assert_eq!(d.u, expect);
        assert!(!d.trainable);
    }

    #[test]
    fn se_full_domain_is_identity() {
        let full = IndexSet::full(WeightSpace::grid(5, 5, 1).unwrap());
        let d = build_dictionary(
            DictionaryStrategy::Se { sigma: 1.0 },
            &full,
            DictionaryContext::None,
            Some(RidgeConfig::new(1e-8).unwrap()),
            0,
        )
        .unwrap();
        assert!(d.u.max_abs_diff(&Matrix::identity(25)) < 1e-6);
        assert_eq!(d.provenance.lambda, Some(1e-8));
    }

    #[test]
    fn random_projection_columns_have_unit_norm() {
        let alpha = sample_alpha(WeightSpace::flat(100).unwrap(), 0.1, 3, false).unwrap();
        let a = build_dictionary(DictionaryStrategy::RandFixU, &alpha, DictionaryContext::None, None, 11).unwrap();
        for c in 0..10 {
            let n: f64 = a.u.column(c).iter().map(|v| v * v).sum::<f64>().sqrt();
            assert!((n - 1.0).abs() < 1e-12);
        }
        let b = build_dictionary(DictionaryStrategy::RandFixU, &alpha, DictionaryContext::None, None, 12).unwrap();
        assert_ne!(a.u, b.u);
        let again = build_dictionary(DictionaryStrategy::RandFixU, &alpha, DictionaryContext::None, None, 11).unwrap();
        assert_eq!(a, again);
    }

    #[test]
    fn context_rules() {
        let alpha = sample_alpha(WeightSpace::flat(6).unwrap(), 0.5, 0, false).unwrap();
        let h = Matrix::random_normal(20, 6, 1.0, &mut rng_from_seed(1));
        assert!(matches!(
            build_dictionary(DictionaryStrategy::Emp, &alpha, DictionaryContext::None, None, 0),
            Err(Error::Config(_))
        ));
        assert!(matches!(
            build_dictionary(DictionaryStrategy::RandCon, &alpha, DictionaryContext::Activations(&h), None, 0),
            Err(Error::Config(_))
        ));
        assert!(matches!(
            build_dictionary(DictionaryStrategy::Ae { epochs: 1 }, &alpha, DictionaryContext::Activations(&h), None, 0),
            Err(Error::Config(_))
        ));
        let emp = build_dictionary(DictionaryStrategy::Emp2, &alpha, DictionaryContext::Activations(&h), None, 0).unwrap();
        assert_eq!(emp.u.shape(), (6, 3));
        assert_eq!(emp.provenance.lambda, Some(crate::kernels::DEFAULT_COVARIANCE_LAMBDA));
        assert_eq!(emp.provenance.context_digest, Some(digest_matrix(&h)));

        let enc = Matrix::random_normal(6, 3, 1.0, &mut rng_from_seed(2));
        let ae = build_dictionary(DictionaryStrategy::Ae { epochs: 2 }, &alpha, DictionaryContext::Encoder(&enc), None, 0).unwrap();
        assert_eq!(ae.u, enc);
        let wrong = Matrix::zeros(6, 2);
        assert!(build_dictionary(DictionaryStrategy::Ae { epochs: 2 }, &alpha, DictionaryContext::Encoder(&wrong), None, 0).is_err());
    }

    #[test]
    fn low_rank_is_the_only_trainable_strategy() {
        let alpha = sample_alpha(WeightSpace::flat(30).unwrap(), 0.2, 0, false).unwrap();
        let lr = build_dictionary(DictionaryStrategy::LowRank, &alpha, DictionaryContext::None, None, 4).unwrap();
        assert!(lr.trainable);
        assert_eq!(lr.u.shape(), (30, 6));
        for s in [DictionaryStrategy::RandCon, DictionaryStrategy::RandFixU, DictionaryStrategy::Se { sigma: 2.0 }] {
            assert!(!build_dictionary(s, &alpha, DictionaryContext::None, None, 4).unwrap().trainable);
        }
    }

    #[test]
    fn zero_coefficients_predict_zero() {
        let alpha = sample_alpha(WeightSpace::grid(4, 4, 1).unwrap(), 0.5, 0, true).unwrap();
        let d = build_dictionary(DictionaryStrategy::Se { sigma: 1.0 }, &alpha, DictionaryContext::None, None, 0).unwrap();
        let w = predict_weights(&d, &Matrix::zeros(8, 3)).unwrap();
        assert_eq!(w.max_abs(), 0.0);
        assert!(predict_weights(&d, &Matrix::zeros(7, 3)).is_err());
    }

    #[test]
    fn random_connections_touch_only_alpha_rows() {
        let space = WeightSpace::flat(20).unwrap();
        let alpha = sample_alpha(space, 0.3, 5, false).unwrap();
        let d = build_dictionary(DictionaryStrategy::RandCon, &alpha, DictionaryContext::None, None, 0).unwrap();
        let wa = Matrix::random_normal(alpha.len(), 4, 1.0, &mut rng_from_seed(6));
        let w = predict_weights(&d, &wa).unwrap();
        for r in 0..20 {
            let nonzero = w.row(r).iter().any(|&v| v != 0.0);
            assert_eq!(nonzero, alpha.contains(r));
        }
        assert_eq!(w.select_rows(alpha.indices()).unwrap(), wa);
    }

    #[test]
    fn smooth_filters_predict_better_than_random_connections() {
        let (h, w) = (12, 12);
        let space = WeightSpace::grid(h, w, 1).unwrap();
        let truth = Matrix::hcat(
            &(0..6)
                .map(|k| gabor_filter(h, w, 1, 0.5 * k as f64, 3.0, 6.0 + k as f64, 0.0))
                .map(|f| Matrix::new(h * w, 1, f).unwrap())
                .collect::<Vec<_>>(),
        )
        .unwrap();
        for seed in 0..5 {
            let alpha = sample_alpha(space, 0.3, seed, true).unwrap();
            let wa = truth.select_rows(alpha.indices()).unwrap();
            let rel = |s: DictionaryStrategy| {
                let d = build_dictionary(s, &alpha, DictionaryContext::None, None, 0).unwrap();
                predict_weights(&d, &wa).unwrap().sub(&truth).unwrap().frobenius_norm() / truth.frobenius_norm()
            };
            let se = rel(DictionaryStrategy::Se { sigma: 1.0 });
            let rc = rel(DictionaryStrategy::RandCon);
            assert!(se < rc, "seed {seed}: SE {se:.3} vs RandCon {rc:.3}");
        }
    }

    #[test]
    fn coefficient_fit_recovers_representable_weights() {
        let alpha = sample_alpha(WeightSpace::flat(40).unwrap(), 0.25, 1, false).unwrap();
        let d = build_dictionary(DictionaryStrategy::RandFixU, &alpha, DictionaryContext::None, None, 2).unwrap();
        let wa = Matrix::random_normal(10, 3, 1.0, &mut rng_from_seed(3));
        let w = predict_weights(&d, &wa).unwrap();
        let back = coefficients_from_weights(&d, &alpha, &w).unwrap();
        assert!(back.max_abs_diff(&wa) < 1e-6);
    }

    proptest! {
        #[test]
        fn prediction_is_linear_in_coefficients(seed in any::<u64>(), s in -2.0f64..2.0) {
            let alpha = sample_alpha(WeightSpace::flat(25).unwrap(), 0.4, seed, false).unwrap();
            let d = build_dictionary(DictionaryStrategy::RandFixU, &alpha, DictionaryContext::None, None, seed).unwrap();
            let mut r = rng_from_seed(seed);
            let a = Matrix::random_normal(10, 2, 1.0, &mut r);
            let b = Matrix::random_normal(10, 2, 1.0, &mut r);
            let lhs = predict_weights(&d, &a.scale(s).add(&b).unwrap()).unwrap();
            let rhs = predict_weights(&d, &a).unwrap().scale(s).add(&predict_weights(&d, &b).unwrap()).unwrap();
            prop_assert!(lhs.max_abs_diff(&rhs) < 1e-12);
        }

        #[test]
        fn construction_is_deterministic(seed in any::<u64>()) {
            let alpha = sample_alpha(WeightSpace::grid(5, 5, 1).unwrap(), 0.4, seed, true).unwrap();
            let h = Matrix::random_normal(30, 25, 1.0, &mut rng_from_seed(seed));
            for s in [DictionaryStrategy::RandFixU, DictionaryStrategy::LowRank, DictionaryStrategy::RandCon] {
                let a = build_dictionary(s, &alpha, DictionaryContext::None, None, seed).unwrap();
                prop_assert_eq!(a, build_dictionary(s, &alpha, DictionaryContext::None, None, seed).unwrap());
            }
            let a = build_dictionary(DictionaryStrategy::Emp, &alpha, DictionaryContext::Activations(&h), None, seed).unwrap();
            prop_assert_eq!(a, build_dictionary(DictionaryStrategy::Emp, &alpha, DictionaryContext::Activations(&h), None, seed).unwrap());
        }
    }
}
