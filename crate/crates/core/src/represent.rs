//! Per-entry feature vectors, train-only normalization, and the three
//! model-ready sample layouts (per-cell series, graph sequences, 2-D grids).

use std::collections::BTreeMap;
use std::f64::consts::TAU;
use std::io::Read;
use std::ops::Range;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::domain::{CellId, Pollutant};
use crate::error::{Error, Result};
use crate::graph::{knn_graph_cells, normalize_adjacency, Adjacency};
use crate::impute::ImputedViews;
use crate::ingest::{CellSplit, STFrameSet, TemporalSplit};
use crate::neuralnet::{Neighborhoods, Tensor};

/// Same-slot lags, in days.
pub const LAG_DAYS: [usize; 4] = [1, 2, 3, 7];

/// Feature layout.
pub mod feat {
    pub const PM25: usize = 0;
    pub const PM10: usize = 1;
    pub const SPEED: usize = 2;
    pub const DEVICES: usize = 3;
    /// Lag `i` (of `LAG_DAYS`) of pollutant `p` sits at `LAG + 2*i + p`.
    pub const LAG: usize = 4;
    pub const SIN: usize = 12;
    pub const COS: usize = 13;
    pub const IMPUTED: usize = 14;
    pub const SPEED_ABSENT: usize = 15;
}

pub const N_FEATURES: usize = 16;
/// Features `0..N_SCALED` are standardized; the rest pass through.
pub const N_SCALED: usize = 12;
pub const N_BASELINE_FEATURES: usize = 2 * LAG_DAYS.len();

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct WindowConfig {
    /// Input window in bins; defaults to two days.
    pub input_bins: Option<usize>,
    /// Forecast horizon in bins; defaults to one day.
    pub horizon_bins: Option<usize>,
    /// Spacing of forecast origins in bins; defaults to one day.
    pub anchor_stride: Option<usize>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Windows {
    pub input: usize,
    pub horizon: usize,
    pub stride: usize,
}

impl WindowConfig {
    pub fn resolve(&self, bins_per_day: usize) -> Result<Windows> {
        let w = Windows {
            input: self.input_bins.unwrap_or(2 * bins_per_day),
            horizon: self.horizon_bins.unwrap_or(bins_per_day),
            stride: self.anchor_stride.unwrap_or(bins_per_day),
        };
        if w.input == 0 || w.horizon == 0 || w.stride == 0 {
            return Err(Error::InvalidArgument(format!(
                "input, horizon and stride must be positive, got {w:?}"
            )));
        }
        Ok(w)
    }
}

/// Bin read by lag `d` days from `bin`; before the dataset start it falls back
/// to day 0 at the same slot.
pub fn lag_bin(bin: usize, days: usize, bins_per_day: usize) -> usize {
    bin.checked_sub(days * bins_per_day).unwrap_or(bin % bins_per_day)
}

/// Unstandardized feature vector of a completed (imputed) frame set. Absent
/// speed is NaN here; see [`Normalizer::apply`].
pub fn raw_features(frames: &STFrameSet, cell: usize, bin: usize) -> Result<[f64; N_FEATURES]> {
    let bpd = frames.bins_per_day();
    let missing = |b: usize| {
        Error::InvalidArgument(format!(
            "entry (cell {cell}, bin {b}) has no pollutant values; impute the frame set first"
        ))
    };
    let e = frames.entry(cell, bin);
    let pm = frames.pollutants(cell, bin).ok_or_else(|| missing(bin))?;
    let mut f = [0.0; N_FEATURES];
    f[feat::PM25] = pm[0];
    f[feat::PM10] = pm[1];
    f[feat::SPEED] = e.speed.unwrap_or(f64::NAN);
    f[feat::DEVICES] = e.device_count as f64;
    for (i, &d) in LAG_DAYS.iter().enumerate() {
        let lb = lag_bin(bin, d, bpd);
        let lv = frames.pollutants(cell, lb).ok_or_else(|| missing(lb))?;
        f[feat::LAG + 2 * i] = lv[0];
        f[feat::LAG + 2 * i + 1] = lv[1];
    }
    let phase = TAU * (bin % bpd) as f64 / bpd as f64;
    f[feat::SIN] = phase.sin();
    f[feat::COS] = phase.cos();
    f[feat::IMPUTED] = e.imputed as u8 as f64;
    f[feat::SPEED_ABSENT] = e.speed.is_none() as u8 as f64;
    Ok(f)
}

/// Standardization statistics fitted on training bins of training cells.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Normalizer {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
    pub target_mean: [f64; 2],
    pub target_std: [f64; 2],
    /// Bins the statistics were computed from.
    pub fit_bins: Range<usize>,
}

fn mean_std(sum: f64, sq: f64, n: usize) -> (f64, f64) {
    if n == 0 {
        return (0.0, 1.0);
    }
    let m = sum / n as f64;
    let var = (sq / n as f64 - m * m).max(0.0);
    let s = var.sqrt();
    // zero variance → divisor 1
    (m, if s > 1e-12 { s } else { 1.0 })
}

impl Normalizer {
    /// Fits on every entry of `cells` within `bins` of a completed frame set.
    /// Target statistics use observed entries only.
    pub fn fit(frames: &STFrameSet, cells: &[usize], bins: Range<usize>) -> Result<Self> {
        if cells.is_empty() || bins.is_empty() {
            return Err(Error::Empty("normalizer needs at least one cell and bin".into()));
        }
        let mut sum = [0.0; N_SCALED];
        let mut sq = [0.0; N_SCALED];
        let mut cnt = [0usize; N_SCALED];
        let mut tsum = [0.0; 2];
        let mut tsq = [0.0; 2];
        let mut tcnt = 0usize;
        for &c in cells {
            for b in bins.clone() {
                let f = raw_features(frames, c, b)?;
                for j in 0..N_SCALED {
                    if f[j].is_finite() {
                        sum[j] += f[j];
                        sq[j] += f[j] * f[j];
                        cnt[j] += 1;
                    }
                }
                if frames.observed(c, b) {
                    for p in 0..2 {
                        tsum[p] += f[p];
                        tsq[p] += f[p] * f[p];
                    }
                    tcnt += 1;
                }
            }
        }
        if tcnt == 0 {
            return Err(Error::Empty("no observed training targets".into()));
        }
        let mut mean = vec![0.0; N_FEATURES];
        let mut std = vec![1.0; N_FEATURES];
        for j in 0..N_SCALED {
            (mean[j], std[j]) = mean_std(sum[j], sq[j], cnt[j]);
        }
        let (m0, s0) = mean_std(tsum[0], tsq[0], tcnt);
        let (m1, s1) = mean_std(tsum[1], tsq[1], tcnt);
        Ok(Normalizer {
            mean,
            std,
            target_mean: [m0, m1],
            target_std: [s0, s1],
            fit_bins: bins,
        })
    }

    /// Standardizes in place; an absent speed becomes 0.
    pub fn apply(&self, f: &mut [f64]) {
        for j in 0..N_SCALED {
            f[j] = if f[j].is_finite() {
                (f[j] - self.mean[j]) / self.std[j]
            } else {
                0.0
            };
        }
    }

    pub fn invert(&self, f: &mut [f64]) {
        for j in 0..N_SCALED {
            f[j] = f[j] * self.std[j] + self.mean[j];
        }
    }

    pub fn scale_target(&self, p: Pollutant, v: f64) -> f64 {
        (v - self.target_mean[p.index()]) / self.target_std[p.index()]
    }

    pub fn unscale_target(&self, p: Pollutant, v: f64) -> f64 {
        v * self.target_std[p.index()] + self.target_mean[p.index()]
    }
}

/// Standardized feature vector of one entry.
pub fn assemble_features(frames: &STFrameSet, norm: &Normalizer, cell: usize, bin: usize) -> Result<Vec<f64>> {
    let mut f = raw_features(frames, cell, bin)?.to_vec();
    norm.apply(&mut f);
    Ok(f)
}

/// Optional per-cell static vectors, standardized per column across cells.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct StaticFeatures {
    pub dim: usize,
    pub by_cell: BTreeMap<CellId, Vec<f64>>,
}

impl StaticFeatures {
    /// Reads `row,col,f1..fs` rows (with a header).
    pub fn read_csv<R: Read>(r: R, delimiter: u8) -> Result<Self> {
        let mut rdr = csv::ReaderBuilder::new().delimiter(delimiter).from_reader(r);
        let dim = rdr.headers()?.len().saturating_sub(2);
        let mut by_cell = BTreeMap::new();
        for (i, rec) in rdr.records().enumerate() {
            let rec = rec?;
            let bad = |what: &str| Error::InvalidArgument(format!("static features line {}: {what}", i + 2));
            if rec.len() != dim + 2 {
                return Err(bad("wrong field count"));
            }
            let row: usize = rec[0].trim().parse().map_err(|_| bad("bad row"))?;
            let col: usize = rec[1].trim().parse().map_err(|_| bad("bad col"))?;
            let v = (2..rec.len())
                .map(|j| rec[j].trim().parse::<f64>().ok().filter(|x| x.is_finite()))
                .collect::<Option<Vec<_>>>()
                .ok_or_else(|| bad("non-numeric feature"))?;
            by_cell.insert(CellId::new(row, col), v);
        }
        let mut s = StaticFeatures { dim, by_cell };
        s.standardize();
        Ok(s)
    }

    fn standardize(&mut self) {
        let n = self.by_cell.len();
        for j in 0..self.dim {
            let (sum, sq) = self
                .by_cell
                .values()
                .fold((0.0, 0.0), |(s, q), v| (s + v[j], q + v[j] * v[j]));
            let (m, sd) = mean_std(sum, sq, n);
            self.by_cell.values_mut().for_each(|v| v[j] = (v[j] - m) / sd);
        }
    }

    /// The cell's vector, or zeros for cells absent from the file.
    pub fn vector(&self, cell: CellId) -> Vec<f64> {
        self.by_cell.get(&cell).cloned().unwrap_or_else(|| vec![0.0; self.dim])
    }
}

/// Standardized features of every grid cell and bin: `[cell][bin][feature]`.
#[derive(Clone, Debug)]
pub struct FeatureCube {
    n_bins: usize,
    data: Vec<f64>,
}

impl FeatureCube {
    pub fn build(frames: &STFrameSet, norm: &Normalizer) -> Result<Self> {
        let n_bins = frames.n_bins();
        let mut data = Vec::with_capacity(frames.n_cells() * n_bins * N_FEATURES);
        for c in 0..frames.n_cells() {
            for b in 0..n_bins {
                let mut f = raw_features(frames, c, b)?;
                norm.apply(&mut f);
                data.extend_from_slice(&f);
            }
        }
        Ok(FeatureCube { n_bins, data })
    }

    #[inline]
    pub fn get(&self, cell: usize, bin: usize) -> &[f64] {
        let o = (cell * self.n_bins + bin) * N_FEATURES;
        &self.data[o..o + N_FEATURES]
    }
}

/// One cell's input window and forecast targets.
#[derive(Clone, Debug, PartialEq)]
pub struct SeriesSample {
    pub cell: CellId,
    /// Forecast origin: inputs cover `anchor-W..anchor`, targets `anchor..anchor+H`.
    pub anchor: usize,
    /// `[W × F]`, standardized.
    pub input: Vec<f64>,
    /// `[H × 2]` in µg/m³; 0 where unobserved.
    pub target: Vec<f64>,
    pub mask: Vec<bool>,
    pub static_features: Vec<f64>,
    /// Largest bin index read while building the sample (inputs, lags, targets).
    pub max_bin_read: usize,
}

#[derive(Clone, Debug)]
pub struct GraphNodes {
    pub cells: Vec<CellId>,
    pub adjacency: Adjacency,
    pub norm_adj: Arc<Tensor>,
    pub neighborhoods: Neighborhoods,
}

impl GraphNodes {
    pub fn build(cells: Vec<CellId>, grid: &crate::domain::GridSpec, k: usize) -> Result<Self> {
        let adjacency = knn_graph_cells(&cells, grid, k)?;
        let norm_adj = Arc::new(normalize_adjacency(&adjacency));
        let neighborhoods = adjacency.neighborhoods();
        Ok(GraphNodes {
            cells,
            adjacency,
            norm_adj,
            neighborhoods,
        })
    }

    pub fn len(&self) -> usize {
        self.cells.len()
    }

    pub fn is_empty(&self) -> bool {
        self.cells.is_empty()
    }
}

/// A window over a fixed node list.
#[derive(Clone, Debug, PartialEq)]
pub struct GraphSample {
    pub anchor: usize,
    /// `[W × N × F]`
    pub input: Vec<f64>,
    /// `[N × H × 2]` in µg/m³.
    pub target: Vec<f64>,
    pub mask: Vec<bool>,
    /// `[N × s]`
    pub static_features: Vec<f64>,
    pub max_bin_read: usize,
}

/// A window over the whole grid.
#[derive(Clone, Debug, PartialEq)]
pub struct GridSample {
    pub anchor: usize,
    /// `[W × F × rows × cols]`
    pub input: Vec<f64>,
    /// `[H × 2 × rows × cols]` in µg/m³.
    pub target: Vec<f64>,
    pub mask: Vec<bool>,
    /// `[s × rows × cols]`
    pub static_features: Vec<f64>,
    pub max_bin_read: usize,
    /// `(rows, cols)`
    pub shape: (usize, usize),
}

#[derive(Clone, Debug, Default)]
pub struct SampleSets<T> {
    pub train: Vec<T>,
    pub test: Vec<T>,
    pub extended: Vec<T>,
}

#[derive(Clone, Debug)]
pub struct GraphSets {
    pub core: GraphNodes,
    pub enlarged: GraphNodes,
    pub samples: SampleSets<GraphSample>,
}

/// Lag-feature rows for the regression baselines, one per observed target
/// entry: `x` is `[n × 8]` (pm25/pm10 at each lag), `y` in µg/m³.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct BaselineRows {
    pub x: Vec<f64>,
    pub y: Vec<[f64; 2]>,
}

impl BaselineRows {
    pub fn len(&self) -> usize {
        self.y.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y.is_empty()
    }
}

/// Which imputed view a sample set reads.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum View {
    Train,
    Eval,
}

/// Everything downstream models need: both imputed views, the splits, the
/// fitted normalizer, and standardized feature cubes.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub split: CellSplit,
    pub tsplit: TemporalSplit,
    pub windows: Windows,
    pub train_view: STFrameSet,
    pub eval_view: STFrameSet,
    pub normalizer: Normalizer,
    pub statics: Option<StaticFeatures>,
    train_cube: FeatureCube,
    eval_cube: FeatureCube,
    /// Per cell, ascending observed bins (pre-imputation, eval view).
    observed_bins: Vec<Vec<usize>>,
}

impl Dataset {
    pub fn new(
        views: &ImputedViews,
        split: CellSplit,
        tsplit: TemporalSplit,
        windows: WindowConfig,
        statics: Option<StaticFeatures>,
    ) -> Result<Self> {
        let train_view = views.train.frames.clone();
        let eval_view = views.eval.frames.clone();
        let windows = windows.resolve(train_view.bins_per_day())?;
        let n_bins = train_view.n_bins();
        if windows.input + windows.horizon > n_bins {
            return Err(Error::TooShort(format!(
                "window {} + horizon {} exceeds the {n_bins} available bins",
                windows.input, windows.horizon
            )));
        }
        let grid = train_view.grid;
        let core: Vec<usize> = split.core_cells.iter().map(|&c| grid.index_of(c)).collect();
        let normalizer = Normalizer::fit(&train_view, &core, tsplit.train_bins.clone())?;
        let train_cube = FeatureCube::build(&train_view, &normalizer)?;
        let eval_cube = FeatureCube::build(&eval_view, &normalizer)?;
        let observed_bins = (0..eval_view.n_cells())
            .map(|c| (0..n_bins).filter(|&b| eval_view.observed(c, b)).collect())
            .collect();
        let ds = Dataset {
            split,
            tsplit,
            windows,
            train_view,
            eval_view,
            normalizer,
            statics,
            train_cube,
            eval_cube,
            observed_bins,
        };
        if ds.train_anchors().is_empty() {
            return Err(Error::TooShort(format!(
                "no forecast origin fits in the {} training bins with window {} and horizon {}",
                ds.tsplit.train_bins.len(),
                windows.input,
                windows.horizon
            )));
        }
        Ok(ds)
    }

    pub fn static_dim(&self) -> usize {
        self.statics.as_ref().map_or(0, |s| s.dim)
    }

    fn static_vec(&self, cell: CellId) -> Vec<f64> {
        self.statics.as_ref().map_or_else(Vec::new, |s| s.vector(cell))
    }

    fn view(&self, v: View) -> (&STFrameSet, &FeatureCube) {
        match v {
            View::Train => (&self.train_view, &self.train_cube),
            View::Eval => (&self.eval_view, &self.eval_cube),
        }
    }

    fn anchors(&self) -> impl Iterator<Item = usize> + '_ {
        let Windows { input, horizon, stride } = self.windows;
        let n = self.train_view.n_bins();
        (input.div_ceil(stride)..)
            .map(move |m| m * stride)
            .take_while(move |&t| t + horizon <= n)
    }

    /// Forecast origins whose targets all lie in the training bins.
    pub fn train_anchors(&self) -> Vec<usize> {
        let end = self.tsplit.train_bins.end;
        self.anchors().filter(|&t| t + self.windows.horizon <= end).collect()
    }

    /// Forecast origins whose targets all lie in the test bins.
    pub fn test_anchors(&self) -> Vec<usize> {
        let start = self.tsplit.test_bins.start;
        self.anchors().filter(|&t| t >= start).collect()
    }

    pub fn core_cells(&self) -> Vec<CellId> {
        self.split.core_list()
    }

    pub fn extended_cells(&self) -> Vec<CellId> {
        self.split.extended_list()
    }

    /// Largest bin a window at `anchor` reads: its last target bin.
    fn max_read(&self, anchor: usize) -> usize {
        anchor + self.windows.horizon - 1
    }

    fn fill_targets(&self, frames: &STFrameSet, cell: usize, anchor: usize, target: &mut [f64], mask: &mut [bool]) {
        for h in 0..self.windows.horizon {
            let b = anchor + h;
            if frames.observed(cell, b) {
                let v = frames.pollutants(cell, b).expect("observed entries carry values");
                target[2 * h] = v[0];
                target[2 * h + 1] = v[1];
                mask[2 * h] = true;
                mask[2 * h + 1] = true;
            }
        }
    }

    pub fn series_sample(&self, cell: CellId, anchor: usize, view: View) -> SeriesSample {
        let (frames, cube) = self.view(view);
        let ci = frames.grid.index_of(cell);
        let Windows { input: w, horizon: h, .. } = self.windows;
        let mut input = Vec::with_capacity(w * N_FEATURES);
        for b in anchor - w..anchor {
            input.extend_from_slice(cube.get(ci, b));
        }
        let mut target = vec![0.0; 2 * h];
        let mut mask = vec![false; 2 * h];
        self.fill_targets(frames, ci, anchor, &mut target, &mut mask);
        SeriesSample {
            cell,
            anchor,
            input,
            target,
            mask,
            static_features: self.static_vec(cell),
            max_bin_read: self.max_read(anchor),
        }
    }

    pub fn series_samples(&self) -> SampleSets<SeriesSample> {
        let make = |cells: &[CellId], anchors: &[usize], view: View| {
            cells
                .iter()
                .flat_map(|&c| anchors.iter().map(move |&a| (c, a)))
                .map(|(c, a)| self.series_sample(c, a, view))
                .collect::<Vec<_>>()
        };
        let (core, ext) = (self.core_cells(), self.extended_cells());
        let (tr, te) = (self.train_anchors(), self.test_anchors());
        SampleSets {
            train: make(&core, &tr, View::Train),
            test: make(&core, &te, View::Train),
            extended: make(&ext, &te, View::Eval),
        }
    }

    pub fn graph_sample(&self, nodes: &[CellId], anchor: usize, view: View, mask_cells: Option<&[CellId]>) -> GraphSample {
        let (frames, cube) = self.view(view);
        let Windows { input: w, horizon: h, .. } = self.windows;
        let n = nodes.len();
        let idx: Vec<usize> = nodes.iter().map(|&c| frames.grid.index_of(c)).collect();
        let mut input = Vec::with_capacity(w * n * N_FEATURES);
        for b in anchor - w..anchor {
            for &ci in &idx {
                input.extend_from_slice(cube.get(ci, b));
            }
        }
        let mut target = vec![0.0; n * h * 2];
        let mut mask = vec![false; n * h * 2];
        for (i, (&ci, &cell)) in idx.iter().zip(nodes).enumerate() {
            if mask_cells.is_some_and(|m| !m.contains(&cell)) {
                continue;
            }
            let r = i * h * 2..(i + 1) * h * 2;
            self.fill_targets(frames, ci, anchor, &mut target[r.clone()], &mut mask[r]);
        }
        let static_features = nodes.iter().flat_map(|&c| self.static_vec(c)).collect();
        GraphSample {
            anchor,
            input,
            target,
            mask,
            static_features,
            max_bin_read: self.max_read(anchor),
        }
    }

    /// Graph samples over core nodes (train/test) and over core + extended
    /// nodes on a rebuilt k-NN graph (extended evaluation, targets only at
    /// extended nodes).
    pub fn graph_samples(&self, k: usize) -> Result<GraphSets> {
        let grid = self.train_view.grid;
        let core_cells = self.core_cells();
        let core = GraphNodes::build(core_cells.clone(), &grid, k)?;
        let mut all = core_cells.clone();
        all.extend(self.extended_cells());
        all.sort();
        let enlarged = GraphNodes::build(all, &grid, k)?;
        let ext = self.extended_cells();
        let train = self
            .train_anchors()
            .into_iter()
            .map(|a| self.graph_sample(&core.cells, a, View::Train, None))
            .collect();
        let test = self
            .test_anchors()
            .into_iter()
            .map(|a| self.graph_sample(&core.cells, a, View::Train, None))
            .collect();
        let extended = if ext.is_empty() {
            Vec::new()
        } else {
            self.test_anchors()
                .into_iter()
                .map(|a| self.graph_sample(&enlarged.cells, a, View::Eval, Some(&ext)))
                .collect()
        };
        Ok(GraphSets {
            core,
            enlarged,
            samples: SampleSets { train, test, extended },
        })
    }

    pub fn grid_sample(&self, anchor: usize, view: View, mask_cells: &[CellId]) -> GridSample {
        let (frames, cube) = self.view(view);
        let Windows { input: w, horizon: h, .. } = self.windows;
        let nc = frames.n_cells();
        let mut input = vec![0.0; w * N_FEATURES * nc];
        for (t, b) in (anchor - w..anchor).enumerate() {
            for c in 0..nc {
                let f = cube.get(c, b);
                for (j, &v) in f.iter().enumerate() {
                    input[(t * N_FEATURES + j) * nc + c] = v;
                }
            }
        }
        let mut target = vec![0.0; h * 2 * nc];
        let mut mask = vec![false; h * 2 * nc];
        for &cell in mask_cells {
            let c = frames.grid.index_of(cell);
            for hh in 0..h {
                let b = anchor + hh;
                if frames.observed(c, b) {
                    let v = frames.pollutants(c, b).expect("observed entries carry values");
                    for p in 0..2 {
                        target[(hh * 2 + p) * nc + c] = v[p];
                        mask[(hh * 2 + p) * nc + c] = true;
                    }
                }
            }
        }
        let s = self.static_dim();
        let mut static_features = vec![0.0; s * nc];
        if let Some(st) = &self.statics {
            for (c, cell) in frames.grid.cells().enumerate() {
                for (j, v) in st.vector(cell).into_iter().enumerate() {
                    static_features[j * nc + c] = v;
                }
            }
        }
        GridSample {
            anchor,
            input,
            target,
            mask,
            static_features,
            max_bin_read: self.max_read(anchor),
            shape: (frames.grid.n_rows, frames.grid.n_cols),
        }
    }

    pub fn grid_samples(&self) -> SampleSets<GridSample> {
        let core = self.core_cells();
        let ext = self.extended_cells();
        SampleSets {
            train: self
                .train_anchors()
                .into_iter()
                .map(|a| self.grid_sample(a, View::Train, &core))
                .collect(),
            test: self
                .test_anchors()
                .into_iter()
                .map(|a| self.grid_sample(a, View::Train, &core))
                .collect(),
            extended: if ext.is_empty() {
                Vec::new()
            } else {
                self.test_anchors()
                    .into_iter()
                    .map(|a| self.grid_sample(a, View::Eval, &ext))
                    .collect()
            },
        }
    }

    /// Latest observed value of `cell` at a bin `<= bin`.
    fn last_observed(&self, view: View, cell: usize, bin: usize) -> Option<[f64; 2]> {
        let obs = &self.observed_bins[cell];
        let pos = obs.partition_point(|&b| b <= bin);
        let frames = self.view(view).0;
        obs[..pos]
            .iter()
            .rev()
            .find(|&&b| frames.observed(cell, b))
            .and_then(|&b| frames.pollutants(cell, b))
    }

    /// Baseline lag features for target bin `bin` of a window at `anchor`:
    /// the observed value of each same-slot lag, else the cell's last reading
    /// before that lag (and before the anchor), else the training mean.
    pub fn baseline_features(&self, view: View, cell: CellId, anchor: usize, bin: usize) -> [f64; N_BASELINE_FEATURES] {
        let frames = self.view(view).0;
        let ci = frames.grid.index_of(cell);
        let bpd = frames.bins_per_day();
        let mut x = [0.0; N_BASELINE_FEATURES];
        for (i, &d) in LAG_DAYS.iter().enumerate() {
            let v = bin
                .checked_sub(d * bpd)
                .and_then(|lb| self.last_observed(view, ci, lb.min(anchor - 1)))
                .unwrap_or(self.normalizer.target_mean);
            x[2 * i] = v[0];
            x[2 * i + 1] = v[1];
        }
        x
    }

    /// One baseline row per observed target entry of the given samples.
    pub fn baseline_rows(&self, samples: &[SeriesSample], view: View) -> BaselineRows {
        let mut rows = BaselineRows::default();
        let h = self.windows.horizon;
        for s in samples {
            for hh in 0..h {
                if s.mask[2 * hh] {
                    rows.x.extend_from_slice(&self.baseline_features(view, s.cell, s.anchor, s.anchor + hh));
                    rows.y.push([s.target[2 * hh], s.target[2 * hh + 1]]);
                }
            }
        }
        rows
    }
}
