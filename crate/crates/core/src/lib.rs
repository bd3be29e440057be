//! Neural networks whose weight matrices are predicted from a fixed
//! dictionary and a small matrix of learned coefficients.
//!
//! A predicted layer stores `W = [U_1 W_1, …, U_J W_J]`. The dictionaries
//! `U_j` are static: built once (from a kernel, from data, or at random)
//! and never updated. Only the coefficients `W_j` and the biases are
//! dynamic.
//!
//! ```
//! use featpred::{build_dictionary, sample_alpha, DictionaryContext, DictionaryStrategy, WeightSpace};
//!
//! let space = WeightSpace::grid(8, 8, 1).unwrap();
//! let alpha = sample_alpha(space, 0.25, 7, true).unwrap();
//! let dict = build_dictionary(DictionaryStrategy::Se { sigma: 1.0 }, &alpha, DictionaryContext::None, None, 0).unwrap();
//! assert_eq!(dict.u.shape(), (64, 16));
//! ```

pub mod data;
pub mod dictionary;
pub mod error;
pub mod index_sets;
pub mod kernels;
pub mod layers;
pub mod linalg;
pub mod metrics;
pub mod network;
pub mod rica;
pub mod seed;
pub mod training;

pub use data::{extract_patches, gabor_filter, load_cifar10, load_idx, Dataset};
pub use dictionary::{build_dictionary, predict_weights, BuiltDictionary, DictionaryContext, DictionaryStrategy};
pub use error::{Error, Result};
pub use index_sets::{make_columns, sample_alpha, ColumnFamily, IndexSet, WeightSpace};
pub use kernels::{cross_gram, eval_kernel, gram, ridge_dictionary, Kernel, RidgeConfig};
pub use layers::{
    forward_conv_predicted, forward_dense_predicted, Activation, AnyLayer, ConvLayer, DenseLayer, Layer,
    PredictedConvLayer, PredictedDenseLayer,
};
pub use linalg::{correlate2d, matmul, solve_spd, ConvGeometry, FilterBank, Matrix, Tensor4};
pub use metrics::{accuracy, count_parameters, ParamReport};
pub use network::{Network, Targets};
pub use rica::{rica_classify, rica_objective, train_rica, RicaModel};
pub use seed::{derive_seed, rng_from_seed};
pub use training::{grad_check, pretrain_stack, train, OptimizerConfig, PretrainPlan, TrainingTrace};
