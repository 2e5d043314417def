//! Forecasters: stacked RNN/GRU series models, GCN/GAT + GRU graph models,
//! a ConvGRU grid model, and the ridge and IDW baselines.

mod baseline;
mod nets;
mod train;

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use baseline::{ridge_fit, ridge_predict, IdwBaseline, RidgeWeights};
pub use nets::{GraphCtx, GraphNet, GridNet, NetShape, SeriesNet};
pub use train::{Sample, TrainConfig, TrainReport};

use crate::error::{Error, Result};
use crate::graph::DEFAULT_K;
use crate::impute::IdwConfig;
use crate::neuralnet::{load_checkpoint, save_checkpoint, ParamSet, Tape, Tensor};
use crate::represent::{
    BaselineRows, Dataset, GraphNodes, Normalizer, SeriesSample, View, Windows, N_BASELINE_FEATURES,
    N_FEATURES,
};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum ModelKind {
    #[serde(rename = "RNN")]
    Rnn,
    #[serde(rename = "GRU")]
    Gru,
    #[serde(rename = "GCN_GRU")]
    GcnGru,
    #[serde(rename = "GAT_GRU")]
    GatGru,
    #[serde(rename = "CONVGRU")]
    ConvGru,
    #[serde(rename = "RIDGE")]
    Ridge,
    #[serde(rename = "IDW_BASE")]
    IdwBase,
}

impl ModelKind {
    pub const ALL: [ModelKind; 7] = [
        ModelKind::Rnn,
        ModelKind::Gru,
        ModelKind::GcnGru,
        ModelKind::GatGru,
        ModelKind::ConvGru,
        ModelKind::Ridge,
        ModelKind::IdwBase,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            ModelKind::Rnn => "RNN",
            ModelKind::Gru => "GRU",
            ModelKind::GcnGru => "GCN_GRU",
            ModelKind::GatGru => "GAT_GRU",
            ModelKind::ConvGru => "CONVGRU",
            ModelKind::Ridge => "RIDGE",
            ModelKind::IdwBase => "IDW_BASE",
        }
    }

    pub fn is_graph(self) -> bool {
        matches!(self, ModelKind::GcnGru | ModelKind::GatGru)
    }

    pub fn is_neural(self) -> bool {
        !matches!(self, ModelKind::Ridge | ModelKind::IdwBase)
    }

    pub fn default_epochs(self) -> usize {
        match self {
            ModelKind::Rnn | ModelKind::Gru => 50,
            _ => 200,
        }
    }
}

impl fmt::Display for ModelKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ModelKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        ModelKind::ALL
            .into_iter()
            .find(|k| k.as_str().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::InvalidArgument(format!("unknown model kind `{s}`")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ForecasterConfig {
    pub kind: ModelKind,
    /// Stacked recurrent layers (RNN, GRU), graph layers before the GRU
    /// (GCN_GRU, GAT_GRU), or stacked ConvGRU cells (CONVGRU).
    pub layers: usize,
    pub hidden: usize,
    pub k_neighbors: usize,
    /// ConvGRU kernel size (odd).
    pub kernel: usize,
    pub use_static: bool,
    pub ridge_lambda: f64,
    pub seed: u64,
}

impl Default for ForecasterConfig {
    fn default() -> Self {
        ForecasterConfig {
            kind: ModelKind::Gru,
            layers: 3,
            hidden: 64,
            k_neighbors: DEFAULT_K,
            kernel: 3,
            use_static: false,
            ridge_lambda: 1.0,
            seed: 0,
        }
    }
}

impl ForecasterConfig {
    pub fn validate(&self) -> Result<()> {
        let min_layers = if self.kind.is_graph() { 0 } else { 1 };
        if self.kind.is_neural() && self.layers < min_layers {
            return Err(Error::Config(format!("{} needs at least one layer", self.kind)));
        }
        if self.kind.is_neural() && self.hidden == 0 {
            return Err(Error::Config("hidden width must be positive".into()));
        }
        if self.kind.is_graph() && self.k_neighbors == 0 {
            return Err(Error::Config("k_neighbors must be positive".into()));
        }
        if self.kind == ModelKind::ConvGru && self.kernel.is_multiple_of(2) {
            return Err(Error::Config(format!("kernel must be odd, got {}", self.kernel)));
        }
        if !(self.ridge_lambda >= 0.0) {
            return Err(Error::Config("ridge_lambda must be ≥ 0".into()));
        }
        Ok(())
    }
}

/// Everything besides the weights needed to run a trained forecaster.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelMeta {
    pub config: ForecasterConfig,
    pub windows: Windows,
    pub normalizer: Normalizer,
    pub n_features: usize,
    pub static_dim: usize,
    pub grid_shape: (usize, usize),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Split {
    Test,
    Extended,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Test => "test",
            Split::Extended => "extended",
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Flattened predictions and targets in µg/m³ for one split.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Predictions {
    pub pred: Vec<f64>,
    pub target: Vec<f64>,
    pub mask: Vec<bool>,
    /// Pollutant index of each entry.
    pub pollutant: Vec<u8>,
    pub n_samples: usize,
}

impl Predictions {
    fn push<T: Sample>(&mut self, s: &T, pred: impl IntoIterator<Item = f64>) {
        self.n_samples += 1;
        for (i, p) in pred.into_iter().enumerate() {
            self.pred.push(p);
            self.target.push(s.target()[i]);
            self.mask.push(s.mask()[i]);
            self.pollutant.push(s.pollutant_at(i) as u8);
        }
    }

    /// `(pred, target, mask)` restricted to one pollutant.
    pub fn for_pollutant(&self, p: usize) -> (Vec<f64>, Vec<f64>, Vec<bool>) {
        let mut out = (Vec::new(), Vec::new(), Vec::new());
        for i in (0..self.pred.len()).filter(|&i| self.pollutant[i] as usize == p) {
            out.0.push(self.pred[i]);
            out.1.push(self.target[i]);
            out.2.push(self.mask[i]);
        }
        out
    }
}

/// A configured forecaster with its parameters.
#[derive(Clone, Debug)]
pub struct Forecaster {
    pub meta: ModelMeta,
    pub params: ParamSet,
}

const EVAL_BATCH: usize = 64;

impl Forecaster {
    /// Freshly initialized parameters for `ds`.
    pub fn init(config: ForecasterConfig, ds: &Dataset) -> Result<Self> {
        config.validate()?;
        if config.use_static && ds.statics.is_none() {
            return Err(Error::Config("use_static is set but no static feature file was loaded".into()));
        }
        let grid = ds.train_view.grid;
        let meta = ModelMeta {
            static_dim: if config.use_static { ds.static_dim() } else { 0 },
            config,
            windows: ds.windows,
            normalizer: ds.normalizer.clone(),
            n_features: N_FEATURES,
            grid_shape: (grid.n_rows, grid.n_cols),
        };
        let mut f = Forecaster {
            meta,
            params: ParamSet::new(),
        };
        let mut rng = ChaCha8Rng::seed_from_u64(f.meta.config.seed);
        match f.meta.config.kind {
            ModelKind::Rnn | ModelKind::Gru => f.series_net().init(&mut f.params, &mut rng),
            ModelKind::GcnGru | ModelKind::GatGru => f.graph_net().init(&mut f.params, &mut rng),
            ModelKind::ConvGru => f.grid_net().init(&mut f.params, &mut rng),
            ModelKind::Ridge | ModelKind::IdwBase => {}
        }
        Ok(f)
    }

    pub fn kind(&self) -> ModelKind {
        self.meta.config.kind
    }

    pub fn net_shape(&self) -> NetShape {
        let c = &self.meta.config;
        NetShape {
            kind: c.kind,
            layers: c.layers,
            hidden: c.hidden,
            kernel: c.kernel,
            n_features: self.meta.n_features,
            static_dim: self.meta.static_dim,
            window: self.meta.windows.input,
            horizon: self.meta.windows.horizon,
        }
    }

    pub fn series_net(&self) -> SeriesNet {
        SeriesNet::new(self.net_shape())
    }

    pub fn graph_net(&self) -> GraphNet {
        GraphNet::new(self.net_shape())
    }

    pub fn grid_net(&self) -> GridNet {
        GridNet::new(self.net_shape())
    }

    /// Errors when `ds` was built with different windows, features or grid.
    pub fn check_compatible(&self, ds: &Dataset) -> Result<()> {
        if ds.windows != self.meta.windows {
            return Err(Error::InvalidArgument(format!(
                "model was trained with windows {:?} but the dataset uses {:?}",
                self.meta.windows, ds.windows
            )));
        }
        let g = ds.train_view.grid;
        if self.kind() == ModelKind::ConvGru && (g.n_rows, g.n_cols) != self.meta.grid_shape {
            return Err(Error::InvalidArgument(format!(
                "model grid {:?} differs from dataset grid {:?}",
                self.meta.grid_shape,
                (g.n_rows, g.n_cols)
            )));
        }
        if self.meta.static_dim > 0 && ds.static_dim() != self.meta.static_dim {
            return Err(Error::InvalidArgument(format!(
                "model expects {} static features, dataset has {}",
                self.meta.static_dim,
                ds.static_dim()
            )));
        }
        Ok(())
    }

    fn strip_static(&self, mut s: Vec<SeriesSample>) -> Vec<SeriesSample> {
        if self.meta.static_dim == 0 {
            s.iter_mut().for_each(|x| x.static_features.clear());
        }
        s
    }

    /// Trains on the dataset's training windows.
    pub fn fit(config: ForecasterConfig, tc: &TrainConfig, ds: &Dataset) -> Result<(Self, TrainReport)> {
        let mut f = Self::init(config, ds)?;
        let report = f.train(tc, ds)?;
        Ok((f, report))
    }

    fn val_cutoff(&self, tc: &TrainConfig, ds: &Dataset) -> Option<usize> {
        tc.validation_frac.map(|frac| {
            let days = ds.tsplit.train_days;
            let held = ((days as f64 * frac).round() as usize).clamp(1, days.saturating_sub(1).max(1));
            (days - held) * ds.train_view.bins_per_day()
        })
    }

    pub fn train(&mut self, tc: &TrainConfig, ds: &Dataset) -> Result<TrainReport> {
        self.check_compatible(ds)?;
        let seed = self.meta.config.seed;
        let norm = self.meta.normalizer.clone();
        let epochs = tc.epochs.unwrap_or(self.kind().default_epochs());
        let h = self.meta.windows.horizon;
        let cut = self.val_cutoff(tc, ds);
        let started = std::time::Instant::now();
        let mut report = match self.kind() {
            ModelKind::Rnn | ModelKind::Gru => {
                let net = self.series_net();
                let samples = self.strip_static(ds.series_samples().train);
                train::fit_params(&mut self.params, &samples, tc, epochs, seed, &norm, h, cut, |t, p, b| {
                    net.forward(t, p, b)
                })?
            }
            ModelKind::GcnGru | ModelKind::GatGru => {
                let net = self.graph_net();
                let sets = ds.graph_samples(self.meta.config.k_neighbors)?;
                let ctx = graph_ctx(&sets.core);
                let mut samples = sets.samples.train;
                if self.meta.static_dim == 0 {
                    samples.iter_mut().for_each(|s| s.static_features.clear());
                }
                train::fit_params(&mut self.params, &samples, tc, epochs, seed, &norm, h, cut, |t, p, b| {
                    net.forward(t, p, &ctx, b)
                })?
            }
            ModelKind::ConvGru => {
                let net = self.grid_net();
                let mut samples = ds.grid_samples().train;
                if self.meta.static_dim == 0 {
                    samples.iter_mut().for_each(|s| s.static_features.clear());
                }
                train::fit_params(&mut self.params, &samples, tc, epochs, seed, &norm, h, cut, |t, p, b| {
                    net.forward(t, p, b)
                })?
            }
            ModelKind::Ridge => {
                let rows = ds.baseline_rows(&ds.series_samples().train, View::Train);
                self.fit_ridge(&rows)?;
                TrainReport {
                    seed,
                    ..TrainReport::default()
                }
            }
            ModelKind::IdwBase => {
                let rows = ds.baseline_rows(&ds.series_samples().train, View::Train);
                if rows.is_empty() {
                    return Err(Error::Empty("no baseline training rows".into()));
                }
                let x = self.scale_baseline_x(&rows.x);
                self.params.insert("idw.x", Tensor::new([rows.len(), N_BASELINE_FEATURES], x)?);
                let y: Vec<f64> = rows.y.iter().flatten().copied().collect();
                self.params.insert("idw.y", Tensor::new([rows.len(), 2], y)?);
                TrainReport {
                    seed,
                    ..TrainReport::default()
                }
            }
        };
        report.wall_clock_s = started.elapsed().as_secs_f64();
        Ok(report)
    }

    /// Baseline lag features in the shared normalized units.
    fn scale_baseline_x(&self, x: &[f64]) -> Vec<f64> {
        let n = &self.meta.normalizer;
        x.iter()
            .enumerate()
            .map(|(i, v)| {
                let p = i % 2;
                (v - n.target_mean[p]) / n.target_std[p]
            })
            .collect()
    }

    fn fit_ridge(&mut self, rows: &BaselineRows) -> Result<()> {
        let x = self.scale_baseline_x(&rows.x);
        let f = N_BASELINE_FEATURES;
        let mut w = Tensor::zeros([f, 2]);
        let mut b = Tensor::zeros([2]);
        for p in 0..2 {
            let y: Vec<f64> = rows
                .y
                .iter()
                .map(|v| (v[p] - self.meta.normalizer.target_mean[p]) / self.meta.normalizer.target_std[p])
                .collect();
            let rw = ridge_fit(&x, f, &y, self.meta.config.ridge_lambda)?;
            for (j, v) in rw.w.iter().enumerate() {
                w.set(&[j, p], *v);
            }
            b.set(&[p], rw.intercept);
        }
        self.params.insert("ridge.w", w);
        self.params.insert("ridge.b", b);
        Ok(())
    }

    fn unscale(&self, raw: &[f64], pollutant_at: impl Fn(usize) -> usize) -> Vec<f64> {
        let n = &self.meta.normalizer;
        raw.iter()
            .enumerate()
            .map(|(i, v)| {
                let p = pollutant_at(i);
                v * n.target_std[p] + n.target_mean[p]
            })
            .collect()
    }

    /// Predictions (µg/m³) for series samples, layout `[H × 2]` each.
    pub fn predict_series(&self, samples: &[SeriesSample]) -> Result<Vec<Vec<f64>>> {
        let net = self.series_net();
        let samples = self.strip_static(samples.to_vec());
        let two_h = 2 * self.meta.windows.horizon;
        let mut out = Vec::with_capacity(samples.len());
        for chunk in samples.chunks(EVAL_BATCH) {
            let batch: Vec<&SeriesSample> = chunk.iter().collect();
            let mut tape = Tape::new();
            let p = self.params.bind_frozen(&mut tape);
            let y = net.forward(&mut tape, &p, &batch)?;
            for row in tape.value(y).data().chunks(two_h) {
                out.push(self.unscale(row, |i| i % 2));
            }
        }
        Ok(out)
    }

    /// Predictions for graph samples over `nodes`, layout `[N × H × 2]` each.
    pub fn predict_graph(&self, nodes: &GraphNodes, samples: &[crate::represent::GraphSample]) -> Result<Vec<Vec<f64>>> {
        let net = self.graph_net();
        let ctx = graph_ctx(nodes);
        let mut samples = samples.to_vec();
        if self.meta.static_dim == 0 {
            samples.iter_mut().for_each(|s| s.static_features.clear());
        }
        let per = nodes.len() * 2 * self.meta.windows.horizon;
        let mut out = Vec::with_capacity(samples.len());
        for chunk in samples.chunks(4) {
            let batch: Vec<_> = chunk.iter().collect();
            let mut tape = Tape::new();
            let p = self.params.bind_frozen(&mut tape);
            let y = net.forward(&mut tape, &p, &ctx, &batch)?;
            for s in tape.value(y).data().chunks(per) {
                out.push(self.unscale(s, |i| i % 2));
            }
        }
        Ok(out)
    }

    /// Predictions for grid samples, layout `[H × 2 × rows × cols]` each.
    pub fn predict_grid(&self, samples: &[crate::represent::GridSample]) -> Result<Vec<Vec<f64>>> {
        let net = self.grid_net();
        let mut samples = samples.to_vec();
        if self.meta.static_dim == 0 {
            samples.iter_mut().for_each(|s| s.static_features.clear());
        }
        let (r, c) = self.meta.grid_shape;
        let per = 2 * self.meta.windows.horizon * r * c;
        let mut out = Vec::with_capacity(samples.len());
        for chunk in samples.chunks(8) {
            let batch: Vec<_> = chunk.iter().collect();
            let mut tape = Tape::new();
            let p = self.params.bind_frozen(&mut tape);
            let y = net.forward(&mut tape, &p, &batch)?;
            for s in tape.value(y).data().chunks(per) {
                out.push(self.unscale(s, |i| (i / (r * c)) % 2));
            }
        }
        Ok(out)
    }

    /// Baseline predictions (µg/m³) for raw lag-feature rows.
    pub fn predict_baseline(&self, rows: &BaselineRows) -> Result<Vec<[f64; 2]>> {
        let x = self.scale_baseline_x(&rows.x);
        let f = N_BASELINE_FEATURES;
        let n = &self.meta.normalizer;
        let missing = || Error::InvalidArgument(format!("{} model has no fitted parameters", self.kind()));
        match self.kind() {
            ModelKind::Ridge => {
                let w = self.params.get("ridge.w").ok_or_else(missing)?;
                let b = self.params.get("ridge.b").ok_or_else(missing)?;
                Ok(x.chunks(f)
                    .map(|r| {
                        let mut out = [0.0; 2];
                        for (p, o) in out.iter_mut().enumerate() {
                            let v = b.get(&[p]) + (0..f).map(|j| r[j] * w.get(&[j, p])).sum::<f64>();
                            *o = v * n.target_std[p] + n.target_mean[p];
                        }
                        out
                    })
                    .collect())
            }
            ModelKind::IdwBase => {
                let tx = self.params.get("idw.x").ok_or_else(missing)?;
                let ty = self.params.get("idw.y").ok_or_else(missing)?;
                let y: Vec<[f64; 2]> = ty.data().chunks(2).map(|v| [v[0], v[1]]).collect();
                let m = IdwBaseline::fit(f, tx.data(), y, IdwConfig::default())?;
                x.chunks(f).map(|r| m.predict(r)).collect()
            }
            k => Err(Error::InvalidArgument(format!("{k} is not a baseline model"))),
        }
    }

    /// Test or extended-set predictions against observed targets.
    pub fn predict_split(&self, ds: &Dataset, split: Split) -> Result<Predictions> {
        self.check_compatible(ds)?;
        let mut out = Predictions::default();
        match self.kind() {
            ModelKind::Rnn | ModelKind::Gru | ModelKind::Ridge | ModelKind::IdwBase => {
                let sets = ds.series_samples();
                let (samples, view) = match split {
                    Split::Test => (sets.test, View::Train),
                    Split::Extended => (sets.extended, View::Eval),
                };
                if self.kind().is_neural() {
                    for (s, p) in samples.iter().zip(self.predict_series(&samples)?) {
                        out.push(s, p);
                    }
                } else {
                    // one row per observed target entry, in sample order
                    let rows = ds.baseline_rows(&samples, view);
                    let mut ys = self.predict_baseline(&rows)?.into_iter();
                    let h = ds.windows.horizon;
                    for s in &samples {
                        let mut pred = vec![0.0; 2 * h];
                        for hh in (0..h).filter(|&hh| s.mask[2 * hh]) {
                            let y = ys.next().expect("one row per observed entry");
                            pred[2 * hh] = y[0];
                            pred[2 * hh + 1] = y[1];
                        }
                        out.push(s, pred);
                    }
                }
            }
            ModelKind::GcnGru | ModelKind::GatGru => {
                let sets = ds.graph_samples(self.meta.config.k_neighbors)?;
                let (nodes, samples) = match split {
                    Split::Test => (&sets.core, sets.samples.test),
                    Split::Extended => (&sets.enlarged, sets.samples.extended),
                };
                for (s, p) in samples.iter().zip(self.predict_graph(nodes, &samples)?) {
                    out.push(s, p);
                }
            }
            ModelKind::ConvGru => {
                let sets = ds.grid_samples();
                let samples = match split {
                    Split::Test => sets.test,
                    Split::Extended => sets.extended,
                };
                for (s, p) in samples.iter().zip(self.predict_grid(&samples)?) {
                    out.push(s, p);
                }
            }
        }
        Ok(out)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let meta = serde_json::to_string(&self.meta)?;
        save_checkpoint(path, &self.params, &meta)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let (params, meta) = load_checkpoint(path)?;
        let meta: ModelMeta = serde_json::from_str(&meta).map_err(|e| Error::Format {
            path: path.display().to_string(),
            reason: format!("checkpoint metadata: {e}"),
        })?;
        Ok(Forecaster { meta, params })
    }
}

pub fn graph_ctx(nodes: &GraphNodes) -> GraphCtx {
    GraphCtx {
        n: nodes.len(),
        norm_adj: nodes.norm_adj.clone(),
        neighborhoods: nodes.neighborhoods.clone(),
    }
}
