//! Kernels over weight-space coordinates and the kernel ridge predictor
//! that turns an index set into a dictionary.
//!
//! For locations α the predictor extends observed weights `w_α` to the
//! whole space as `w = k_αᵀ (K_α + λI)⁻¹ w_α`, so the dictionary is
//! `U_α = k_αᵀ (K_α + λI)⁻¹` (`n_v × n_α`). It is formed with a Cholesky
//! solve, never an explicit inverse.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::index_sets::{IndexSet, WeightSpace};
use crate::linalg::{matmul_tn, solve_spd, Matrix};

/// Default ridge for squared-exponential grams, which only need jitter.
pub const DEFAULT_SE_LAMBDA: f64 = 1e-6;
/// Default ridge for empirical covariance grams, which are often rank
/// deficient.
pub const DEFAULT_COVARIANCE_LAMBDA: f64 = 1e-3;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Kernel {
    /// `exp(−‖p_i − p_j‖² / 2σ²)` over spatial positions within one
    /// channel, zero across channels. The channel coordinate never enters
    /// the distance, so every channel gets the same spatial kernel.
    SquaredExponential { sigma: f64 },
    /// `C[i, j]`.
    EmpiricalCovariance { c: Matrix },
    /// `C[i, j]²`.
    SquaredEmpiricalCovariance { c: Matrix },
}

impl Kernel {
    pub fn squared_exponential(sigma: f64) -> Result<Self> {
        if !(sigma > 0.0 && sigma.is_finite()) {
            return Err(Error::InvalidKernel(format!("length scale must be > 0, got {sigma}")));
        }
        Ok(Kernel::SquaredExponential { sigma })
    }

    pub fn covariance(c: Matrix, squared: bool) -> Result<Self> {
        if c.rows() != c.cols() {
            return Err(Error::InvalidKernel("covariance matrix must be square".into()));
        }
        for i in 0..c.rows() {
            if c.get(i, i) < 0.0 {
                return Err(Error::InvalidKernel(format!("negative variance at {i}")));
            }
            for j in 0..i {
                if c.get(i, j) != c.get(j, i) {
                    return Err(Error::InvalidKernel("covariance matrix is not symmetric".into()));
                }
            }
        }
        Ok(if squared {
            Kernel::SquaredEmpiricalCovariance { c }
        } else {
            Kernel::EmpiricalCovariance { c }
        })
    }

    pub fn default_lambda(&self) -> f64 {
        match self {
            Kernel::SquaredExponential { .. } => DEFAULT_SE_LAMBDA,
            _ => DEFAULT_COVARIANCE_LAMBDA,
        }
    }

    fn check_space(&self, space: &WeightSpace) -> Result<()> {
        match self {
            Kernel::SquaredExponential { .. } => Ok(()),
            Kernel::EmpiricalCovariance { c } | Kernel::SquaredEmpiricalCovariance { c } => {
                if c.rows() != space.size() {
                    Err(Error::InvalidKernel(format!(
                        "covariance is {0}x{0} but the weight space has {1} points",
                        c.rows(),
                        space.size()
                    )))
                } else {
                    Ok(())
                }
            }
        }
    }

    /// `k(i, j)` for two indices of `space`.
    pub fn eval(&self, space: &WeightSpace, i: usize, j: usize) -> Result<f64> {
        match self {
            Kernel::SquaredExponential { sigma } => {
                if space.coord(i)?.c != space.coord(j)?.c {
                    return Ok(0.0);
                }
                let d2 = space.spatial_dist2(i, j)?;
                Ok((-d2 / (2.0 * sigma * sigma)).exp())
            }
            Kernel::EmpiricalCovariance { c } | Kernel::SquaredEmpiricalCovariance { c } => {
                let n = c.rows();
                for idx in [i, j] {
                    if idx >= n || idx >= space.size() {
                        return Err(Error::Index {
                            index: idx,
                            size: n.min(space.size()),
                        });
                    }
                }
                let v = c.get(i, j);
                Ok(if matches!(self, Kernel::SquaredEmpiricalCovariance { .. }) {
                    v * v
                } else {
                    v
                })
            }
        }
    }
}

/// Free-function form of [`Kernel::eval`].
pub fn eval_kernel(kernel: &Kernel, space: &WeightSpace, i: usize, j: usize) -> Result<f64> {
    kernel.eval(space, i, j)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RidgeConfig {
    pub lambda: f64,
}

impl RidgeConfig {
    pub fn new(lambda: f64) -> Result<Self> {
        if !(lambda >= 0.0 && lambda.is_finite()) {
            return Err(Error::InvalidKernel(format!("ridge coefficient must be >= 0, got {lambda}")));
        }
        Ok(Self { lambda })
    }
}

/// `K_α`, the `n_α × n_α` gram over α. Built from one triangle and mirrored,
/// so it is exactly symmetric.
pub fn gram(kernel: &Kernel, alpha: &IndexSet) -> Result<Matrix> {
    let space = alpha.space();
    kernel.check_space(&space)?;
    let idx = alpha.indices();
    let n = idx.len();
    let mut g = Matrix::zeros(n, n);
    for a in 0..n {
        for b in 0..=a {
            let v = kernel.eval(&space, idx[a], idx[b])?;
            g.set(a, b, v);
            g.set(b, a, v);
        }
    }
    Ok(g)
}

/// `k_α`, the `n_α × n_v` matrix of kernel values between α and all of 𝒲.
pub fn cross_gram(kernel: &Kernel, alpha: &IndexSet) -> Result<Matrix> {
    let space = alpha.space();
    kernel.check_space(&space)?;
    let idx = alpha.indices();
    let nv = space.size();
    let mut k = Matrix::zeros(idx.len(), nv);
    for (a, &i) in idx.iter().enumerate() {
        for j in 0..nv {
            k.set(a, j, kernel.eval(&space, i, j)?);
        }
    }
    Ok(k)
}

/// The ridge dictionary `U_α = k_αᵀ (K_α + λI)⁻¹`, shape `n_v × n_α`.
pub fn ridge_dictionary(kernel: &Kernel, alpha: &IndexSet, cfg: RidgeConfig) -> Result<Matrix> {
    let mut k = gram(kernel, alpha)?;
    for i in 0..k.rows() {
        k.set(i, i, k.get(i, i) + cfg.lambda);
    }
    let kx = cross_gram(kernel, alpha)?;
    // K is symmetric, so U = ((K + λI)⁻¹ k_α)ᵀ.
    let x = solve_spd(&k, &kx).map_err(|e| match e {
        Error::NotPositiveDefinite { index, pivot } => Error::InvalidKernel(format!(
            "K_α + λI is not positive definite (pivot {index} = {pivot:e}, λ = {}); increase λ",
            cfg.lambda
        )),
        other => other,
    })?;
    Ok(x.transpose())
}

/// Empirical covariance of the columns of `h` (observations in rows),
/// normalized by the observation count. With `squared` the kernel uses the
/// elementwise square.
pub fn empirical_kernel_from_activations(h: &Matrix, squared: bool) -> Result<Kernel> {
    Kernel::covariance(empirical_covariance(h)?, squared)
}

pub fn empirical_covariance(h: &Matrix) -> Result<Matrix> {
    let n = h.rows();
    if n < 2 {
        return Err(Error::InsufficientData(format!(
            "covariance needs at least 2 observations, got {n}"
        )));
    }
    let mean: Vec<f64> = h.column_sums().into_iter().map(|s| s / n as f64).collect();
    let mut centered = h.clone();
    for r in 0..n {
        for (v, m) in centered.row_mut(r).iter_mut().zip(&mean) {
            *v -= m;
        }
    }
    let mut c = matmul_tn(&centered, &centered)?.scale(1.0 / n as f64);
    let d = c.rows();
    for i in 0..d {
        for j in 0..i {
            let v = c.get(i, j);
            c.set(j, i, v);
        }
    }
    Ok(c)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::index_sets::sample_alpha;
    use crate::linalg::{matmul, Cholesky};
    use crate::seed::rng_from_seed;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    fn flat(n: usize) -> WeightSpace {
        WeightSpace::flat(n).unwrap()
    }

    fn set(space: WeightSpace, idx: &[usize]) -> IndexSet {
        IndexSet::new(space, idx.to_vec()).unwrap()
    }

    #[test]
    fn se_values() {
        let k = Kernel::squared_exponential(1.0).unwrap();
        let space = WeightSpace::grid(4, 4, 3).unwrap();
        assert_eq!(k.eval(&space, 5, 5).unwrap(), 1.0);
        // (0,0,c=0) vs (0,1,c=0): distance 1.
        assert_abs_diff_eq!(k.eval(&space, 0, 3).unwrap(), (-0.5f64).exp(), epsilon = 1e-15);
        assert_abs_diff_eq!(k.eval(&space, 0, 3).unwrap(), 0.606531, epsilon = 1e-6);
        // Channels are independent: same position, different channel.
        assert_eq!(k.eval(&space, 0, 2).unwrap(), 0.0);
        // Same channel one row apart matches the in-row value.
        assert_eq!(k.eval(&space, 1, 13).unwrap(), k.eval(&space, 1, 4).unwrap());
        assert!(matches!(k.eval(&space, 0, 48), Err(Error::Index { .. })));
        assert!(Kernel::squared_exponential(0.0).is_err());
    }

    #[test]
    fn squared_covariance_squares() {
        let c = Matrix::from_rows(&[vec![1.0, -0.3], vec![-0.3, 1.0]]).unwrap();
        let k = Kernel::covariance(c, true).unwrap();
        assert_abs_diff_eq!(k.eval(&flat(2), 0, 1).unwrap(), 0.09, epsilon = 1e-15);
        assert!(matches!(k.eval(&flat(2), 2, 0), Err(Error::Index { .. })));
    }

    #[test]
    fn gram_examples() {
        let k = Kernel::squared_exponential(1.0).unwrap();
        let a = sample_alpha(WeightSpace::grid(5, 5, 2).unwrap(), 0.4, 3, true).unwrap();
        let g = gram(&k, &a).unwrap();
        assert!((0..g.rows()).all(|i| g.get(i, i) == 1.0));
        // Tied α over two channels: the gram is positive definite.
        assert!(Cholesky::factor(&g).is_ok());

        let single = gram(&k, &set(flat(3), &[1])).unwrap();
        assert_eq!(single.as_slice(), &[1.0]);

        let g = gram(&k, &set(flat(3), &[0, 2])).unwrap();
        let e2 = (-2.0f64).exp();
        assert_abs_diff_eq!(g.get(0, 1), e2, epsilon = 1e-15);
        assert_abs_diff_eq!(g.get(1, 0), e2, epsilon = 1e-15);
    }

    #[test]
    fn cross_gram_examples() {
        let k = Kernel::squared_exponential(1.0).unwrap();
        let space = flat(3);
        let kx = cross_gram(&k, &set(space, &[0, 2])).unwrap();
        assert_eq!(kx.shape(), (2, 3));
        assert_abs_diff_eq!(kx.get(0, 1), (-0.5f64).exp(), epsilon = 1e-15);
        assert_abs_diff_eq!(kx.get(1, 1), (-0.5f64).exp(), epsilon = 1e-15);

        let full = IndexSet::full(WeightSpace::grid(3, 3, 1).unwrap());
        assert_eq!(cross_gram(&k, &full).unwrap(), gram(&k, &full).unwrap());

        let one = cross_gram(&k, &set(space, &[1])).unwrap();
        for j in 0..3 {
            assert_eq!(one.get(0, j), k.eval(&space, 1, j).unwrap());
        }
    }

    #[test]
    fn ridge_full_domain_interpolates() {
        let k = Kernel::squared_exponential(1.0).unwrap();
        let full = IndexSet::full(WeightSpace::grid(6, 6, 1).unwrap());
        let u = ridge_dictionary(&k, &full, RidgeConfig::new(1e-8).unwrap()).unwrap();
        let w = Matrix::random_normal(36, 4, 1.0, &mut rng_from_seed(1));
        assert!(matmul(&u, &w).unwrap().max_abs_diff(&w) < 1e-6);
    }

    #[test]
    fn ridge_midpoint_prediction() {
        // Oracle: solve the 2x2 system by Cramer's rule, then predict at x = 1.
        let e2 = (-2.0f64).exp();
        let e05 = (-0.5f64).exp();
        let det = 1.0 - e2 * e2;
        let coef = [(1.0 - e2) / det, (1.0 - e2) / det];
        let expected = e05 * coef[0] + e05 * coef[1];
        assert_abs_diff_eq!(expected, 2.0 * e05 / (1.0 + e2), epsilon = 1e-15);
        assert_abs_diff_eq!(expected, 1.0685, epsilon = 1e-4);

        let k = Kernel::squared_exponential(1.0).unwrap();
        let u = ridge_dictionary(&k, &set(flat(3), &[0, 2]), RidgeConfig::new(0.0).unwrap()).unwrap();
        let w = matmul(&u, &Matrix::new(2, 1, vec![1.0, 1.0]).unwrap()).unwrap();
        assert_abs_diff_eq!(w.get(1, 0), expected, epsilon = 1e-12);
        assert_abs_diff_eq!(w.get(0, 0), 1.0, epsilon = 1e-12);
    }

    #[test]
    fn ridge_rows_approach_one_hot_as_lambda_shrinks() {
        let k = Kernel::squared_exponential(1.0).unwrap();
        let a = sample_alpha(WeightSpace::grid(6, 6, 1).unwrap(), 0.3, 4, true).unwrap();
        let dist = |lambda: f64| {
            let u = ridge_dictionary(&k, &a, RidgeConfig::new(lambda).unwrap()).unwrap();
            u.select_rows(a.indices())
                .unwrap()
                .sub(&Matrix::identity(a.len()))
                .unwrap()
                .frobenius_norm()
        };
        let d: Vec<f64> = [1.0, 1e-2, 1e-4].into_iter().map(dist).collect();
        assert!(d[0] > d[1] && d[1] > d[2], "{d:?}");
        assert!(dist(1e-3) < d[1]);
    }

    #[test]
    fn ridge_reports_bad_lambda() {
        let c = Matrix::zeros(3, 3);
        let k = Kernel::covariance(c, false).unwrap();
        let err = ridge_dictionary(&k, &IndexSet::full(flat(3)), RidgeConfig::new(0.0).unwrap()).unwrap_err();
        assert!(matches!(err, Error::InvalidKernel(_)));
    }

    #[test]
    fn covariance_examples() {
        let constant = Matrix::new(5, 2, vec![0.7; 10]).unwrap();
        assert_eq!(empirical_covariance(&constant).unwrap().max_abs(), 0.0);

        let mut r = rng_from_seed(8);
        let base = Matrix::random_normal(50, 1, 1.0, &mut r);
        let other = Matrix::random_normal(50, 1, 1.0, &mut r);
        let h = Matrix::hcat(&[base.clone(), other, base]).unwrap();
        let c = empirical_covariance(&h).unwrap();
        for j in 0..3 {
            assert_eq!(c.get(0, j), c.get(2, j));
        }

        assert!(matches!(
            empirical_covariance(&Matrix::zeros(1, 3)),
            Err(Error::InsufficientData(_))
        ));
    }

    #[test]
    fn covariance_matches_two_pass_oracle() {
        let h = Matrix::random_normal(100, 3, 2.0, &mut rng_from_seed(9)).map(|v| v + 5.0);
        let n = h.rows() as f64;
        let mean: Vec<f64> = (0..3).map(|j| h.column(j).iter().sum::<f64>() / n).collect();
        let c = empirical_covariance(&h).unwrap();
        for a in 0..3 {
            for b in 0..3 {
                let mut s = 0.0;
                for r in 0..h.rows() {
                    s += (h.get(r, a) - mean[a]) * (h.get(r, b) - mean[b]);
                }
                assert_abs_diff_eq!(c.get(a, b), s / n, epsilon = 1e-12);
            }
        }
        let k2 = empirical_kernel_from_activations(&h, true).unwrap();
        assert_abs_diff_eq!(k2.eval(&flat(3), 0, 1).unwrap(), c.get(0, 1).powi(2), epsilon = 1e-15);
    }

    #[test]
    fn se_gram_is_positive_definite() {
        for sigma in [0.5, 1.0, 1.5] {
            let k = Kernel::squared_exponential(sigma).unwrap();
            for seed in 0..5 {
                let a = sample_alpha(WeightSpace::grid(10, 10, 1).unwrap(), 1.0, seed, true).unwrap();
                let g = gram(&k, &a).unwrap();
                assert!(Cholesky::factor(&g).unwrap().min_pivot() > 0.0);
            }
        }
    }

    #[test]
    fn batched_prediction_matches_columnwise() {
        let k = Kernel::squared_exponential(1.5).unwrap();
        let a = sample_alpha(WeightSpace::grid(7, 7, 2).unwrap(), 0.4, 2, true).unwrap();
        let u = ridge_dictionary(&k, &a, RidgeConfig::new(1e-6).unwrap()).unwrap();
        let w = Matrix::random_normal(a.len(), 5, 1.0, &mut rng_from_seed(3));
        let batched = matmul(&u, &w).unwrap();
        for col in 0..5 {
            let single = matmul(&u, &w.select_cols(&[col]).unwrap()).unwrap();
            for r in 0..u.rows() {
                assert_abs_diff_eq!(single.get(r, 0), batched.get(r, col), epsilon = 1e-12);
            }
        }
    }

    proptest! {
        #[test]
        fn gram_is_exactly_symmetric(seed in any::<u64>(), sigma in 0.3f64..4.0) {
            let k = Kernel::squared_exponential(sigma).unwrap();
            let a = sample_alpha(WeightSpace::grid(6, 5, 2).unwrap(), 0.5, seed, false).unwrap();
            let g = gram(&k, &a).unwrap();
            prop_assert_eq!(g.transpose(), g);
        }

        #[test]
        fn interpolation_with_zero_ridge(seed in any::<u64>(), sigma in 0.5f64..2.0) {
            let k = Kernel::squared_exponential(sigma).unwrap();
            let a = sample_alpha(WeightSpace::grid(8, 8, 1).unwrap(), 0.2, seed, true).unwrap();
            let u = ridge_dictionary(&k, &a, RidgeConfig::new(0.0).unwrap()).unwrap();
            let w = Matrix::random_normal(a.len(), 3, 1.0, &mut rng_from_seed(seed));
            let pred = matmul(&u, &w).unwrap();
            prop_assert!(pred.select_rows(a.indices()).unwrap().max_abs_diff(&w) < 1e-8);
        }

        #[test]
        fn prediction_is_linear(seed in any::<u64>(), s in -3.0f64..3.0, t in -3.0f64..3.0) {
            let k = Kernel::squared_exponential(1.0).unwrap();
            let a = sample_alpha(WeightSpace::grid(5, 5, 1).unwrap(), 0.4, seed, true).unwrap();
            let u = ridge_dictionary(&k, &a, RidgeConfig::new(1e-6).unwrap()).unwrap();
            let mut r = rng_from_seed(seed);
            let w1 = Matrix::random_normal(a.len(), 1, 1.0, &mut r);
            let w2 = Matrix::random_normal(a.len(), 1, 1.0, &mut r);
            let combo = w1.scale(s).add(&w2.scale(t)).unwrap();
            let lhs = matmul(&u, &combo).unwrap();
            let rhs = matmul(&u, &w1).unwrap().scale(s).add(&matmul(&u, &w2).unwrap().scale(t)).unwrap();
            prop_assert!(lhs.max_abs_diff(&rhs) < 1e-12);
        }
    }
}
