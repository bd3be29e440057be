//! Experiment configuration files (TOML).
//!
//! Unknown keys are rejected, and [`ExperimentConfig::validate`] checks
//! every value before any data is loaded. Errors name the offending field.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use featpred::training::{OptimizerConfig, PretrainPlan};
use featpred::DictionaryStrategy;
use serde::Deserialize;

use crate::error::CliError;

#[derive(Clone, Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub experiment_id: String,
    pub seed: u64,
    #[serde(default = "default_output")]
    pub output_dir: PathBuf,
    /// Grid cells trained concurrently.
    #[serde(default = "one")]
    pub workers: usize,
    pub dataset: DatasetSpec,
    pub model: ModelSpec,
    pub sweep: SweepSpec,
    pub training: OptimizerConfig,
    pub pretrain: Option<PretrainPlan>,
}

fn default_output() -> PathBuf {
    PathBuf::from("results")
}

fn one() -> usize {
    1
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DatasetKind {
    Mnist,
    Cifar10,
}

#[derive(Clone, Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetSpec {
    pub kind: DatasetKind,
    /// Relative paths resolve against the data directory. Defaults to
    /// `mnist` or `cifar-10-batches-bin`.
    pub path: Option<PathBuf>,
    pub train_subset: Option<usize>,
    pub test_subset: Option<usize>,
    pub seed: u64,
    /// Subtract the per-channel training mean from every pixel.
    #[serde(default)]
    pub center: bool,
}

impl DatasetSpec {
    pub fn resolve(&self, data_dir: &Path) -> PathBuf {
        let p = self.path.clone().unwrap_or_else(|| match self.kind {
            DatasetKind::Mnist => PathBuf::from("mnist"),
            DatasetKind::Cifar10 => PathBuf::from("cifar-10-batches-bin"),
        });
        if p.is_absolute() {
            p
        } else {
            data_dir.join(p)
        }
    }
}

#[derive(Clone, Debug, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum ModelSpec {
    /// Sigmoid MLP with a softmax head; every hidden layer is predicted.
    Mlp { hidden: Vec<usize>, columns: usize },
    /// One convolution, one dense sigmoid layer, softmax head; only the
    /// convolution is predicted.
    Convnet {
        filters: usize,
        filter_size: usize,
        stride: usize,
        hidden: usize,
    },
    Rica(RicaSpec),
}

#[derive(Clone, Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RicaSpec {
    pub patch: usize,
    pub features: usize,
    pub sparsity: f64,
    /// Patches sampled for unsupervised training.
    pub patches: usize,
    /// Scale the feature count by `1/fraction` so every cell has the same
    /// number of dynamic parameters.
    #[serde(default)]
    pub match_dynamic: bool,
    #[serde(default = "contrast_eps")]
    pub contrast_eps: f64,
    #[serde(default = "zca_eps")]
    pub zca_eps: f64,
    pub readout: ReadoutSpec,
}

fn contrast_eps() -> f64 {
    0.01
}

fn zca_eps() -> f64 {
    0.1
}

#[derive(Clone, Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ReadoutSpec {
    pub stride: usize,
    pub pool: usize,
    pub optimizer: OptimizerConfig,
}

#[derive(Clone, Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepSpec {
    /// `nokernel`, a single strategy for every predicted layer, or one
    /// strategy per predicted layer joined by `-` (`SE-Emp`).
    pub strategies: Vec<String>,
    pub fractions: Vec<f64>,
    #[serde(default = "sigma")]
    pub sigma: f64,
    /// Ridge coefficient override for the kernel strategies.
    pub lambda: Option<f64>,
    #[serde(default = "ae_epochs")]
    pub ae_epochs: usize,
}

fn sigma() -> f64 {
    1.0
}

fn ae_epochs() -> usize {
    10
}

/// A parsed sweep strategy.
#[derive(Clone, Debug, PartialEq)]
pub enum StrategySpec {
    NoKernel,
    PerLayer(Vec<DictionaryStrategy>),
}

impl StrategySpec {
    pub fn parse(s: &str, sweep: &SweepSpec) -> Result<Self, String> {
        if s == "nokernel" {
            return Ok(StrategySpec::NoKernel);
        }
        s.split('-')
            .map(|part| {
                let st = DictionaryStrategy::from_str(part).map_err(|e| e.to_string())?;
                let st = match st {
                    DictionaryStrategy::Se { .. } => DictionaryStrategy::Se { sigma: sweep.sigma },
                    DictionaryStrategy::Ae { .. } => DictionaryStrategy::Ae {
                        epochs: sweep.ae_epochs,
                    },
                    other => other,
                };
                st.validate().map_err(|e| e.to_string())?;
                Ok(st)
            })
            .collect::<Result<Vec<_>, String>>()
            .map(StrategySpec::PerLayer)
    }

    /// The strategy of predicted layer `k`; a single entry covers all.
    pub fn layer(&self, k: usize) -> Option<DictionaryStrategy> {
        match self {
            StrategySpec::NoKernel => None,
            StrategySpec::PerLayer(v) if v.len() == 1 => Some(v[0]),
            StrategySpec::PerLayer(v) => Some(v[k]),
        }
    }

    pub fn is_nokernel(&self) -> bool {
        matches!(self, StrategySpec::NoKernel)
    }
}

impl fmt::Display for StrategySpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            StrategySpec::NoKernel => f.write_str("nokernel"),
            StrategySpec::PerLayer(v) => {
                let names: Vec<&str> = v.iter().map(DictionaryStrategy::name).collect();
                f.write_str(&names.join("-"))
            }
        }
    }
}

fn field(name: impl Into<String>, msg: impl fmt::Display) -> CliError {
    CliError::Config(format!("{}: {msg}", name.into()))
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self, CliError> {
        let cfg: Self = toml::from_str(text).map_err(|e| CliError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    /// Number of predicted layers in the architecture.
    pub fn predicted_layers(&self) -> usize {
        match &self.model {
            ModelSpec::Mlp { hidden, .. } => hidden.len(),
            ModelSpec::Convnet { .. } | ModelSpec::Rica(_) => 1,
        }
    }

    pub fn strategies(&self) -> Result<Vec<StrategySpec>, CliError> {
        self.sweep
            .strategies
            .iter()
            .enumerate()
            .map(|(i, s)| StrategySpec::parse(s, &self.sweep).map_err(|e| field(format!("sweep.strategies[{i}]"), e)))
            .collect()
    }

    pub fn validate(&self) -> Result<(), CliError> {
        if self.experiment_id.trim().is_empty() {
            return Err(field("experiment_id", "must not be empty"));
        }
        if self.workers == 0 {
            return Err(field("workers", "must be ≥ 1"));
        }
        for (name, n) in [("dataset.train_subset", self.dataset.train_subset), ("dataset.test_subset", self.dataset.test_subset)] {
            if n == Some(0) {
                return Err(field(name, "must be ≥ 1"));
            }
        }
        self.training.validate().map_err(|e| field("training", e))?;
        if let Some(p) = &self.pretrain {
            if !(p.learning_rate > 0.0 && p.learning_rate.is_finite()) {
                return Err(field("pretrain.learning_rate", "must be > 0"));
            }
            if p.batch_size == 0 {
                return Err(field("pretrain.batch_size", "must be ≥ 1"));
            }
            if !(0.0..1.0).contains(&p.momentum) {
                return Err(field("pretrain.momentum", "must lie in [0, 1)"));
            }
        }
        let sw = &self.sweep;
        if sw.strategies.is_empty() {
            return Err(field("sweep.strategies", "must name at least one strategy"));
        }
        if sw.fractions.is_empty() {
            return Err(field("sweep.fractions", "must list at least one fraction"));
        }
        for (i, &f) in sw.fractions.iter().enumerate() {
            if !(f > 0.0 && f <= 1.0) {
                return Err(field(format!("sweep.fractions[{i}]"), format!("{f} is outside (0, 1]")));
            }
        }
        if !(sw.sigma > 0.0 && sw.sigma.is_finite()) {
            return Err(field("sweep.sigma", "must be > 0"));
        }
        if let Some(l) = sw.lambda {
            if !(l >= 0.0 && l.is_finite()) {
                return Err(field("sweep.lambda", "must be ≥ 0"));
            }
        }
        if sw.ae_epochs == 0 {
            return Err(field("sweep.ae_epochs", "must be ≥ 1"));
        }
        let layers = self.predicted_layers();
        for (i, s) in self.strategies()?.iter().enumerate() {
            let name = format!("sweep.strategies[{i}]");
            let StrategySpec::PerLayer(v) = s else { continue };
            if v.len() != 1 && v.len() != layers {
                return Err(field(name, format!("names {} layers, the model predicts {layers}", v.len())));
            }
            for st in v {
                let ok = match &self.model {
                    ModelSpec::Mlp { .. } => true,
                    ModelSpec::Convnet { .. } => !st.needs_activations() && !st.needs_encoder(),
                    ModelSpec::Rica(_) => !st.needs_encoder() && *st != DictionaryStrategy::LowRank,
                };
                if !ok {
                    return Err(field(name, format!("{st} is not available for this model kind")));
                }
            }
        }
        match &self.model {
            ModelSpec::Mlp { hidden, columns } => {
                if hidden.is_empty() || hidden.contains(&0) {
                    return Err(field("model.hidden", "needs at least one layer, each with ≥ 1 unit"));
                }
                if *columns == 0 || hidden.iter().any(|h| h < columns) {
                    return Err(field("model.columns", "must be ≥ 1 and at most the smallest hidden width"));
                }
            }
            ModelSpec::Convnet {
                filters,
                filter_size,
                stride,
                hidden,
            } => {
                for (n, v) in [("model.filters", filters), ("model.filter_size", filter_size), ("model.stride", stride), ("model.hidden", hidden)] {
                    if *v == 0 {
                        return Err(field(n, "must be ≥ 1"));
                    }
                }
                if self.dataset.kind != DatasetKind::Cifar10 {
                    return Err(field("dataset.kind", "the convnet expects cifar10"));
                }
            }
            ModelSpec::Rica(r) => {
                if r.patch == 0 || r.features == 0 || r.patches < 2 {
                    return Err(field("model", "patch and features must be ≥ 1 and patches ≥ 2"));
                }
                if !(r.sparsity >= 0.0) {
                    return Err(field("model.sparsity", "must be ≥ 0"));
                }
                if !(r.contrast_eps > 0.0) || !(r.zca_eps > 0.0) {
                    return Err(field("model.zca_eps", "regularizers must be > 0"));
                }
                if r.readout.stride == 0 || r.readout.pool == 0 {
                    return Err(field("model.readout", "stride and pool must be ≥ 1"));
                }
                r.readout.optimizer.validate().map_err(|e| field("model.readout.optimizer", e))?;
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = r#"
experiment_id = "t"
seed = 1
[dataset]
kind = "mnist"
seed = 2
[model]
kind = "mlp"
hidden = [20, 20]
columns = 2
[sweep]
strategies = ["nokernel", "SE-Emp", "RandCon"]
fractions = [0.1, 1.0]
[training]
learning_rate = 0.1
batch_size = 10
epochs = 1
"#;

    #[test]
    fn parses_minimal_config() {
        let c = ExperimentConfig::from_toml(MINIMAL).unwrap();
        let s = c.strategies().unwrap();
        assert_eq!(s[0], StrategySpec::NoKernel);
        assert_eq!(s[1].to_string(), "SE-Emp");
        assert_eq!(s[2].layer(1), Some(DictionaryStrategy::RandCon));
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let text = MINIMAL.replace("columns = 2", "columns = 2\nwidth = 3");
        assert!(matches!(ExperimentConfig::from_toml(&text), Err(CliError::Config(_))));
    }

    #[test]
    fn errors_name_the_field() {
        let text = MINIMAL.replace("[0.1, 1.0]", "[0.1, 1.5]");
        let err = ExperimentConfig::from_toml(&text).unwrap_err().to_string();
        assert!(err.contains("sweep.fractions[1]"), "{err}");
        let text = MINIMAL.replace("\"SE-Emp\"", "\"SE-Emp-Emp\"");
        let err = ExperimentConfig::from_toml(&text).unwrap_err().to_string();
        assert!(err.contains("sweep.strategies[1]"), "{err}");
        let text = MINIMAL.replace("\"RandCon\"", "\"Fourier\"");
        assert!(ExperimentConfig::from_toml(&text).is_err());
    }
}
