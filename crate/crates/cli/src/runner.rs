//! Runs every (strategy, fraction) cell of an experiment and writes the
//! results table, per-cell training traces and checkpoints.
//!
//! Layout under the output directory:
//!
//! ```text
//! results.csv
//! traces/<cell>.csv        epoch,train_loss,train_error,test_error,wall_seconds
//! checkpoints/<cell>.json
//! ```
//!
//! Cells may run on several worker threads; rows are still written in cell
//! order, so the table does not depend on the worker count.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::mpsc;
use std::time::Instant;

use featpred::data::{load_cifar10_dir, load_mnist, Dataset, Split};
use featpred::dictionary::{build_dictionary, BuiltDictionary, DictionaryContext, DictionaryStrategy};
use featpred::index_sets::{make_columns, sample_alpha, IndexSet, WeightSpace};
use featpred::kernels::RidgeConfig;
use featpred::layers::{split_units, Activation, AnyLayer, ConvLayer, DenseLayer, PredictedConvLayer, PredictedDenseLayer};
use featpred::metrics::count_parameters;
use featpred::network::{Network, Targets};
use featpred::rica::{rica_classify, train_rica, ReadoutConfig, RicaModel, Whitening};
use featpred::training::{autoencoder_dictionary, predicted_from_dense, pretrain_stack, train, PretrainPlan, TrainingTrace};
use featpred::{derive_seed, extract_patches, rng_from_seed, ConvGeometry, Matrix, Tensor4};
use sha2::{Digest, Sha256};

use crate::checkpoint::{Checkpoint, SavedModel};
use crate::config::{DatasetKind, ExperimentConfig, ModelSpec, RicaSpec, StrategySpec};
use crate::error::CliError;

pub const DATA_DIR_ENV: &str = "FEATPRED_DATA_DIR";

pub const CSV_HEADER: [&str; 14] = [
    "experiment_id",
    "layer_digest",
    "strategy",
    "fraction",
    "columns",
    "dynamic",
    "static",
    "fraction_dynamic",
    "train_error",
    "test_error",
    "epochs",
    "seed",
    "status",
    "wall_seconds",
];

pub const TRACE_HEADER: [&str; 5] = ["epoch", "train_loss", "train_error", "test_error", "wall_seconds"];

/// `$FEATPRED_DATA_DIR`, or `./data`.
pub fn default_data_dir() -> PathBuf {
    std::env::var_os(DATA_DIR_ENV).map(PathBuf::from).unwrap_or_else(|| PathBuf::from("data"))
}

#[derive(Clone, Debug)]
pub struct RunOptions {
    pub data_dir: PathBuf,
    /// Overrides the configured output directory.
    pub output_dir: Option<PathBuf>,
    /// Overrides the configured worker count.
    pub workers: Option<usize>,
    pub quiet: bool,
}

impl Default for RunOptions {
    fn default() -> Self {
        Self {
            data_dir: default_data_dir(),
            output_dir: None,
            workers: None,
            quiet: false,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CellStatus {
    Ok,
    Diverged,
    Error,
}

impl CellStatus {
    pub fn as_str(&self) -> &'static str {
        match self {
            CellStatus::Ok => "ok",
            CellStatus::Diverged => "diverged",
            CellStatus::Error => "error",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ResultRow {
    pub experiment_id: String,
    pub layer_digest: String,
    pub strategy: String,
    pub fraction: f64,
    pub columns: usize,
    pub dynamic: usize,
    pub r#static: usize,
    pub fraction_dynamic: f64,
    pub train_error: Option<f64>,
    pub test_error: Option<f64>,
    pub epochs: usize,
    pub seed: u64,
    pub status: CellStatus,
    pub wall_seconds: f64,
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| format!("{x:.6}")).unwrap_or_default()
}

impl ResultRow {
    pub fn fields(&self) -> Vec<String> {
        vec![
            self.experiment_id.clone(),
            self.layer_digest.clone(),
            self.strategy.clone(),
            self.fraction.to_string(),
            self.columns.to_string(),
            self.dynamic.to_string(),
            self.r#static.to_string(),
            format!("{:.6}", self.fraction_dynamic),
            opt(self.train_error),
            opt(self.test_error),
            self.epochs.to_string(),
            self.seed.to_string(),
            self.status.as_str().to_string(),
            format!("{:.3}", self.wall_seconds),
        ]
    }
}

#[derive(Debug)]
pub struct RunSummary {
    pub rows: Vec<ResultRow>,
    pub results_csv: PathBuf,
    pub output_dir: PathBuf,
}

impl RunSummary {
    pub fn row(&self, strategy: &str, fraction: f64) -> Option<&ResultRow> {
        self.rows.iter().find(|r| r.strategy == strategy && r.fraction == fraction)
    }
}

#[derive(Clone, Debug)]
struct Cell {
    index: usize,
    strategy: StrategySpec,
    fraction: f64,
}

impl Cell {
    fn name(&self) -> String {
        format!("{:02}_{}_{}", self.index, self.strategy, self.fraction)
    }
}

fn cells(cfg: &ExperimentConfig) -> Result<Vec<Cell>, CliError> {
    let mut out = Vec::new();
    for s in cfg.strategies()? {
        let fractions: Vec<f64> = if s.is_nokernel() { vec![1.0] } else { cfg.sweep.fractions.clone() };
        for f in fractions {
            out.push(Cell {
                index: out.len(),
                strategy: s.clone(),
                fraction: f,
            });
        }
    }
    Ok(out)
}

struct CellOutput {
    row: ResultRow,
    trace: Vec<[String; 5]>,
    checkpoint: Option<Checkpoint>,
}

fn data_err(e: featpred::Error) -> CliError {
    CliError::Data(e.to_string())
}

fn center_channels(train: &mut Dataset, test: &mut Dataset) -> Result<(), CliError> {
    let c = train.images.channels();
    let n = (train.images.as_slice().len() / c).max(1) as f64;
    let mut mean = vec![0.0; c];
    for (i, v) in train.images.as_slice().iter().enumerate() {
        mean[i % c] += v / n;
    }
    for ds in [train, test] {
        let (_, h, w, ch) = ds.images.dims();
        let data: Vec<f64> = ds.images.as_slice().iter().enumerate().map(|(i, v)| v - mean[i % c]).collect();
        let m = Matrix::new(ds.len(), h * w * ch, data)?;
        ds.images = Tensor4::from_matrix(m, h, w, ch)?;
    }
    Ok(())
}

fn load_data(cfg: &ExperimentConfig, data_dir: &Path) -> Result<(Dataset, Dataset), CliError> {
    let spec = &cfg.dataset;
    let path = spec.resolve(data_dir);
    if !path.is_dir() {
        return Err(CliError::Data(format!(
            "dataset directory {} not found (set {DATA_DIR_ENV} or dataset.path)",
            path.display()
        )));
    }
    let (train, test) = match spec.kind {
        DatasetKind::Mnist => (load_mnist(&path, Split::Train), load_mnist(&path, Split::Test)),
        DatasetKind::Cifar10 => (load_cifar10_dir(&path, Split::Train), load_cifar10_dir(&path, Split::Test)),
    };
    let (mut train, mut test) = (train.map_err(data_err)?, test.map_err(data_err)?);
    if let Some(n) = spec.train_subset {
        train = train.subset(n, derive_seed(spec.seed, 0));
    }
    if let Some(n) = spec.test_subset {
        test = test.subset(n, derive_seed(spec.seed, 1));
    }
    if spec.center {
        center_channels(&mut train, &mut test)?;
    }
    Ok((train, test))
}

fn digest(s: &str) -> String {
    Sha256::digest(s.as_bytes())[..8].iter().map(|b| format!("{b:02x}")).collect()
}

fn architecture(cfg: &ExperimentConfig, train: &Dataset) -> String {
    let (_, h, w, c) = train.images.dims();
    match &cfg.model {
        ModelSpec::Mlp { hidden, columns } => {
            let widths: Vec<String> = hidden.iter().map(usize::to_string).collect();
            format!("mlp:{}-{}-{}:J{columns}", h * w * c, widths.join("-"), train.classes)
        }
        ModelSpec::Convnet {
            filters,
            filter_size,
            stride,
            hidden,
        } => format!("convnet:{h}x{w}x{c}:conv{filters}x{filter_size}x{filter_size}s{stride}:dense{hidden}:{}", train.classes),
        ModelSpec::Rica(r) => format!("rica:{}x{}x{c}:{}:s{}", r.patch, r.patch, r.features, r.sparsity),
    }
}

/// State shared by all cells of a run.
enum Shared {
    Mlp {
        /// Randomly initialized network.
        base: Network,
        /// After autoencoder pretraining, when configured.
        pretrained: Option<Network>,
        /// Layer inputs under the pretrained (or base) network.
        activations: Vec<Matrix>,
    },
    Convnet,
    Rica {
        whitening: Whitening,
        patches: Matrix,
    },
}

struct Ctx<'a> {
    cfg: &'a ExperimentConfig,
    train: Dataset,
    test: Dataset,
    train_x: Matrix,
    test_x: Matrix,
    digest: String,
    shared: Shared,
}

fn mlp_base(cfg: &ExperimentConfig, input: usize, hidden: &[usize], classes: usize) -> Network {
    let mut rng = rng_from_seed(derive_seed(cfg.seed, 10));
    let mut widths = vec![input];
    widths.extend_from_slice(hidden);
    let mut layers: Vec<AnyLayer> = widths
        .windows(2)
        .map(|w| AnyLayer::Dense(DenseLayer::random(w[0], w[1], Activation::Sigmoid, &mut rng)))
        .collect();
    layers.push(AnyLayer::Dense(DenseLayer::random(*widths.last().unwrap(), classes, Activation::Softmax, &mut rng)));
    Network::new(layers).expect("widths chain")
}

fn prepare_shared(cfg: &ExperimentConfig, cells: &[Cell], train: &Dataset, train_x: &Matrix, quiet: bool) -> Result<Shared, CliError> {
    match &cfg.model {
        ModelSpec::Mlp { hidden, .. } => {
            let base = mlp_base(cfg, train_x.cols(), hidden, train.classes);
            let wants = cells.iter().any(|c| (0..hidden.len()).any(|k| c.strategy.layer(k) != Some(DictionaryStrategy::LowRank)));
            let pretrained = match (&cfg.pretrain, wants) {
                (Some(plan), true) => {
                    let t = Instant::now();
                    let mut net = base.clone();
                    pretrain_stack(&mut net, train_x, plan)?;
                    if !quiet {
                        eprintln!("pretrained {} hidden layers in {:.1}s", hidden.len(), t.elapsed().as_secs_f64());
                    }
                    Some(net)
                }
                _ => None,
            };
            let activations = pretrained.as_ref().unwrap_or(&base).activations(train_x)?;
            Ok(Shared::Mlp {
                base,
                pretrained,
                activations,
            })
        }
        ModelSpec::Convnet { .. } => {
            if cfg.pretrain.is_some() {
                return Err(CliError::Config("pretrain: only mlp models are pretrained".into()));
            }
            Ok(Shared::Convnet)
        }
        ModelSpec::Rica(r) => {
            if cfg.pretrain.is_some() {
                return Err(CliError::Config("pretrain: only mlp models are pretrained".into()));
            }
            let raw = extract_patches(&train.images, r.patch, r.patch, r.patches, derive_seed(cfg.seed, 20))?;
            let whitening = Whitening::fit(&raw, r.contrast_eps, r.zca_eps)?;
            let patches = whitening.apply(&raw);
            Ok(Shared::Rica { whitening, patches })
        }
    }
}

fn ridge(cfg: &ExperimentConfig) -> Result<Option<RidgeConfig>, CliError> {
    Ok(match cfg.sweep.lambda {
        Some(l) => Some(RidgeConfig::new(l)?),
        None => None,
    })
}

fn trace_rows(t: &TrainingTrace) -> Vec<[String; 5]> {
    t.epochs
        .iter()
        .map(|r| {
            [
                r.epoch.to_string(),
                format!("{:.6}", r.train_loss),
                opt(r.train_error),
                opt(r.test_error),
                format!("{:.3}", r.wall_seconds),
            ]
        })
        .collect()
}

impl Ctx<'_> {
    fn row(&self, cell: &Cell) -> ResultRow {
        ResultRow {
            experiment_id: self.cfg.experiment_id.clone(),
            layer_digest: self.digest.clone(),
            strategy: cell.strategy.to_string(),
            fraction: cell.fraction,
            columns: match &self.cfg.model {
                ModelSpec::Mlp { columns, .. } => *columns,
                _ => 1,
            },
            dynamic: 0,
            r#static: 0,
            fraction_dynamic: 0.0,
            train_error: None,
            test_error: None,
            epochs: 0,
            seed: self.cfg.seed,
            status: CellStatus::Ok,
            wall_seconds: 0.0,
        }
    }

    fn input_shape(&self) -> [usize; 3] {
        let (_, h, w, c) = self.train.images.dims();
        [h, w, c]
    }

    fn finish_network(&self, cell: &Cell, mut net: Network) -> Result<CellOutput, CliError> {
        let report = count_parameters(&net);
        let trace = train(
            &mut net,
            &self.train_x,
            Targets::Labels(&self.train.labels),
            Some((&self.test_x, &self.test.labels)),
            &self.cfg.training,
        )?;
        let last = trace.last();
        let row = ResultRow {
            dynamic: report.dynamic,
            r#static: report.r#static,
            fraction_dynamic: report.fraction_dynamic,
            train_error: last.train_error,
            test_error: last.test_error,
            epochs: last.epoch,
            status: if trace.diverged() { CellStatus::Diverged } else { CellStatus::Ok },
            ..self.row(cell)
        };
        Ok(CellOutput {
            trace: trace_rows(&trace),
            checkpoint: Some(Checkpoint {
                experiment_id: self.cfg.experiment_id.clone(),
                strategy: row.strategy.clone(),
                fraction: cell.fraction,
                columns: row.columns,
                seed: self.cfg.seed,
                input_shape: self.input_shape(),
                model: SavedModel::Network { network: net },
            }),
            row,
        })
    }

    fn mlp_cell(&self, cell: &Cell, hidden: &[usize], columns: usize) -> Result<CellOutput, CliError> {
        let Shared::Mlp {
            base,
            pretrained,
            activations,
        } = &self.shared
        else {
            unreachable!()
        };
        let source = |k: usize| match (cell.strategy.layer(k), pretrained) {
            (Some(DictionaryStrategy::LowRank), _) | (_, None) => base,
            (_, Some(p)) => p,
        };
        let mut layers = Vec::with_capacity(hidden.len() + 1);
        for k in 0..hidden.len() {
            let AnyLayer::Dense(dense) = &source(k).layers[k] else { unreachable!() };
            let Some(st) = cell.strategy.layer(k) else {
                layers.push(AnyLayer::Dense(dense.clone()));
                continue;
            };
            let space = if k == 0 {
                let [h, w, c] = self.input_shape();
                WeightSpace::grid(h, w, c)?
            } else {
                WeightSpace::flat(hidden[k - 1])?
            };
            let family = make_columns(space, columns, cell.fraction, derive_seed(self.cfg.seed, 100 + k as u64))?;
            let dicts = family
                .into_columns()
                .into_iter()
                .enumerate()
                .map(|(j, alpha)| {
                    let seed = derive_seed(self.cfg.seed, 1000 + 100 * k as u64 + j as u64);
                    let dict = self.dense_dictionary(st, &alpha, &activations[k], seed)?;
                    Ok((alpha, dict))
                })
                .collect::<Result<Vec<_>, CliError>>()?;
            let split = split_units(hidden[k], columns)?;
            let layer = if st == DictionaryStrategy::LowRank {
                PredictedDenseLayer::random(dicts, &split, Activation::Sigmoid, &mut rng_from_seed(derive_seed(self.cfg.seed, 200 + k as u64)))?
            } else {
                predicted_from_dense(dense, dicts, &split)?
            };
            layers.push(AnyLayer::PredictedDense(layer));
        }
        layers.push(base.layers.last().unwrap().clone());
        self.finish_network(cell, Network::new(layers)?)
    }

    fn dense_dictionary(&self, st: DictionaryStrategy, alpha: &IndexSet, inputs: &Matrix, seed: u64) -> Result<BuiltDictionary, CliError> {
        let ridge = ridge(self.cfg)?;
        Ok(match st {
            DictionaryStrategy::Emp | DictionaryStrategy::Emp2 => {
                build_dictionary(st, alpha, DictionaryContext::Activations(inputs), ridge, seed)?
            }
            DictionaryStrategy::Ae { epochs } => {
                let plan = self.cfg.pretrain.clone().unwrap_or_else(|| PretrainPlan::uniform(epochs, 0));
                let enc = autoencoder_dictionary(inputs, alpha.len(), epochs, &plan, seed)?;
                build_dictionary(st, alpha, DictionaryContext::Encoder(&enc), ridge, seed)?
            }
            _ => build_dictionary(st, alpha, DictionaryContext::None, ridge, seed)?,
        })
    }

    fn convnet_cell(&self, cell: &Cell, filters: usize, size: usize, stride: usize, hidden: usize) -> Result<CellOutput, CliError> {
        let [h, w, c] = self.input_shape();
        let g = ConvGeometry {
            in_height: h,
            in_width: w,
            in_channels: c,
            filter_height: size,
            filter_width: size,
            stride,
        };
        g.validate()?;
        let mut rng = rng_from_seed(derive_seed(self.cfg.seed, 10));
        let conv = match cell.strategy.layer(0) {
            None => AnyLayer::Conv(ConvLayer::random(g, filters, Activation::Sigmoid, &mut rng)?),
            Some(st) => {
                let alpha = sample_alpha(WeightSpace::grid(size, size, c)?, cell.fraction, derive_seed(self.cfg.seed, 100), true)?;
                let dict = build_dictionary(st, &alpha, DictionaryContext::None, ridge(self.cfg)?, derive_seed(self.cfg.seed, 1000))?;
                AnyLayer::PredictedConv(PredictedConvLayer::random(g, alpha, dict, filters, Activation::Sigmoid, &mut rng)?)
            }
        };
        let mut rng = rng_from_seed(derive_seed(self.cfg.seed, 11));
        let dense = DenseLayer::random(g.positions() * filters, hidden, Activation::Sigmoid, &mut rng);
        let out = DenseLayer::random(hidden, self.train.classes, Activation::Softmax, &mut rng);
        self.finish_network(cell, Network::new(vec![conv, AnyLayer::Dense(dense), AnyLayer::Dense(out)])?)
    }

    fn rica_cell(&self, cell: &Cell, spec: &RicaSpec) -> Result<CellOutput, CliError> {
        let Shared::Rica { whitening, patches } = &self.shared else { unreachable!() };
        let c = self.train.images.channels();
        let n_h = if spec.match_dynamic {
            (spec.features as f64 / cell.fraction).round() as usize
        } else {
            spec.features
        };
        let seed = derive_seed(self.cfg.seed, 30);
        let mut model = match cell.strategy.layer(0) {
            None => RicaModel::full(patches.cols(), n_h, spec.sparsity, seed)?,
            Some(st) => {
                let alpha = sample_alpha(WeightSpace::grid(spec.patch, spec.patch, c)?, cell.fraction, derive_seed(self.cfg.seed, 100), true)?;
                let ctx = if st.needs_activations() {
                    DictionaryContext::Activations(patches)
                } else {
                    DictionaryContext::None
                };
                let dict = build_dictionary(st, &alpha, ctx, ridge(self.cfg)?, derive_seed(self.cfg.seed, 1000))?;
                RicaModel::predicted(alpha, dict, n_h, spec.sparsity, seed)?
            }
        };
        let start = Instant::now();
        let trace = train_rica(&mut model, patches, &self.cfg.training)?;
        let mut row = ResultRow {
            dynamic: model.dynamic_count(),
            r#static: model.static_count(),
            fraction_dynamic: model.dynamic_count() as f64 / (patches.cols() * n_h) as f64,
            epochs: trace.losses.len() - 1,
            ..self.row(cell)
        };
        if trace.diverged.is_some() {
            row.status = CellStatus::Diverged;
        } else {
            let readout = ReadoutConfig {
                patch: spec.patch,
                stride: spec.readout.stride,
                pool: spec.readout.pool,
                optimizer: spec.readout.optimizer.clone(),
            };
            let acc = rica_classify(&model, whitening, &self.train, &self.test, &readout)?;
            row.test_error = Some(1.0 - acc);
        }
        let elapsed = start.elapsed().as_secs_f64();
        let n = trace.losses.len().max(1) as f64;
        let trace_rows = trace
            .losses
            .iter()
            .enumerate()
            .map(|(e, l)| [e.to_string(), format!("{l:.6}"), String::new(), String::new(), format!("{:.3}", elapsed * e as f64 / n)])
            .collect();
        Ok(CellOutput {
            trace: trace_rows,
            checkpoint: Some(Checkpoint {
                experiment_id: self.cfg.experiment_id.clone(),
                strategy: row.strategy.clone(),
                fraction: cell.fraction,
                columns: 1,
                seed: self.cfg.seed,
                input_shape: [spec.patch, spec.patch, c],
                model: SavedModel::Rica {
                    model,
                    whitening: whitening.clone(),
                },
            }),
            row,
        })
    }

    fn run_cell(&self, cell: &Cell) -> CellOutput {
        let start = Instant::now();
        let result = match &self.cfg.model {
            ModelSpec::Mlp { hidden, columns } => self.mlp_cell(cell, hidden, *columns),
            ModelSpec::Convnet {
                filters,
                filter_size,
                stride,
                hidden,
            } => self.convnet_cell(cell, *filters, *filter_size, *stride, *hidden),
            ModelSpec::Rica(spec) => self.rica_cell(cell, spec),
        };
        let mut out = result.unwrap_or_else(|e| {
            eprintln!("cell {}: {e}", cell.name());
            CellOutput {
                row: ResultRow {
                    status: CellStatus::Error,
                    ..self.row(cell)
                },
                trace: Vec::new(),
                checkpoint: None,
            }
        });
        out.row.wall_seconds = start.elapsed().as_secs_f64();
        out
    }
}

fn write_csv<I, R>(path: &Path, header: &[&str], rows: I) -> Result<(), CliError>
where
    I: IntoIterator<Item = R>,
    R: IntoIterator,
    R::Item: AsRef<[u8]>,
{
    let mut w = csv::Writer::from_path(path).map_err(|e| CliError::Other(format!("{}: {e}", path.display())))?;
    w.write_record(header).map_err(|e| CliError::Other(e.to_string()))?;
    for r in rows {
        w.write_record(r).map_err(|e| CliError::Other(e.to_string()))?;
    }
    w.flush().map_err(|e| CliError::io(path, e))
}

fn create_dir(p: &Path) -> Result<(), CliError> {
    std::fs::create_dir_all(p).map_err(|e| CliError::io(p, e))
}

pub fn run_experiment(cfg: &ExperimentConfig, opts: &RunOptions) -> Result<RunSummary, CliError> {
    cfg.validate()?;
    let cells = cells(cfg)?;
    let out_dir = opts.output_dir.clone().unwrap_or_else(|| cfg.output_dir.clone());
    let (train_set, test_set) = load_data(cfg, &opts.data_dir)?;
    create_dir(&out_dir.join("traces"))?;
    create_dir(&out_dir.join("checkpoints"))?;
    let train_x = train_set.to_matrix();
    let test_x = test_set.to_matrix();
    let shared = prepare_shared(cfg, &cells, &train_set, &train_x, opts.quiet)?;
    let ctx = Ctx {
        cfg,
        digest: digest(&architecture(cfg, &train_set)),
        train: train_set,
        test: test_set,
        train_x,
        test_x,
        shared,
    };

    let results_csv = out_dir.join("results.csv");
    let mut writer = csv::Writer::from_path(&results_csv).map_err(|e| CliError::Other(format!("{}: {e}", results_csv.display())))?;
    writer.write_record(CSV_HEADER).map_err(|e| CliError::Other(e.to_string()))?;
    writer.flush().map_err(|e| CliError::io(&results_csv, e))?;

    let workers = opts.workers.unwrap_or(cfg.workers).clamp(1, cells.len().max(1));
    let next = AtomicUsize::new(0);
    let (tx, rx) = mpsc::channel::<(usize, CellOutput)>();
    let mut rows = Vec::with_capacity(cells.len());
    let mut pending: BTreeMap<usize, CellOutput> = BTreeMap::new();
    let mut write_err = None;
    std::thread::scope(|scope| {
        for _ in 0..workers {
            let tx = tx.clone();
            let (ctx, cells, next) = (&ctx, &cells, &next);
            scope.spawn(move || loop {
                let i = next.fetch_add(1, Ordering::SeqCst);
                let Some(cell) = cells.get(i) else { break };
                if tx.send((i, ctx.run_cell(cell))).is_err() {
                    break;
                }
            });
        }
        drop(tx);
        for (i, out) in rx {
            pending.insert(i, out);
            while let Some(out) = pending.remove(&rows.len()) {
                let cell = &cells[rows.len()];
                if !opts.quiet {
                    eprintln!(
                        "[{}/{}] {} fraction {}: test error {} ({})",
                        rows.len() + 1,
                        cells.len(),
                        out.row.strategy,
                        out.row.fraction,
                        opt(out.row.test_error),
                        out.row.status.as_str()
                    );
                }
                let saved = (|| -> Result<(), CliError> {
                    writer.write_record(out.row.fields()).map_err(|e| CliError::Other(e.to_string()))?;
                    writer.flush().map_err(|e| CliError::io(&results_csv, e))?;
                    write_csv(&out_dir.join("traces").join(format!("{}.csv", cell.name())), &TRACE_HEADER, &out.trace)?;
                    if let Some(cp) = &out.checkpoint {
                        cp.save(&out_dir.join("checkpoints").join(format!("{}.json", cell.name())))?;
                    }
                    Ok(())
                })();
                if let Err(e) = saved {
                    write_err.get_or_insert(e);
                }
                rows.push(out.row);
            }
        }
    });
    if let Some(e) = write_err {
        return Err(e);
    }
    if !rows.is_empty() && rows.iter().all(|r| r.status != CellStatus::Ok) {
        return Err(CliError::AllDiverged(rows.len()));
    }
    Ok(RunSummary {
        rows,
        results_csv,
        output_dir: out_dir,
    })
}
