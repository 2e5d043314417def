//! Causal inverse-distance-weighting imputation over (lon, lat, time of day),
//! with a k-d tree search and an exhaustive oracle.

mod kdtree;

use std::collections::BTreeSet;
use std::io::Write;

use serde::{Deserialize, Serialize};

pub use kdtree::{dist2, nearest_brute, KdTree};

use crate::domain::{cell_center, CellId};
use crate::error::{Error, Result};
use crate::ingest::{CellSplit, STFrameSet};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct IdwConfig {
    pub k: usize,
    pub power: f64,
    /// Multiplier on the standardized lon/lat features.
    pub coord_weight: f64,
    pub lookback_days: usize,
    pub zero_dist_eps: f64,
}

impl Default for IdwConfig {
    fn default() -> Self {
        IdwConfig {
            k: 3,
            power: 3.0,
            coord_weight: 50.0,
            lookback_days: 2,
            zero_dist_eps: 1e-9,
        }
    }
}

impl IdwConfig {
    pub fn validate(&self) -> Result<()> {
        if self.k == 0 {
            return Err(Error::InvalidArgument("idw k must be at least 1".into()));
        }
        if !(self.power > 0.0) || !(self.coord_weight > 0.0) {
            return Err(Error::InvalidArgument("idw power and coord_weight must be positive".into()));
        }
        if self.lookback_days == 0 {
            return Err(Error::InvalidArgument("idw lookback_days must be at least 1".into()));
        }
        if !(self.zero_dist_eps >= 0.0) {
            return Err(Error::InvalidArgument("idw zero_dist_eps must be non-negative".into()));
        }
        Ok(())
    }
}

/// Per-feature mean and population standard deviation.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl FeatureStats {
    pub fn fit(dim: usize, rows: &[f64]) -> Self {
        let n = (rows.len() / dim.max(1)) as f64;
        let mut mean = vec![0.0; dim];
        for r in rows.chunks(dim) {
            mean.iter_mut().zip(r).for_each(|(m, v)| *m += v);
        }
        mean.iter_mut().for_each(|m| *m /= n.max(1.0));
        let mut var = vec![0.0; dim];
        for r in rows.chunks(dim) {
            for j in 0..dim {
                var[j] += (r[j] - mean[j]).powi(2);
            }
        }
        let std = var.into_iter().map(|v| (v / n.max(1.0)).sqrt()).collect();
        FeatureStats { mean, std }
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    /// Zero-variance features map to 0.
    pub fn apply(&self, row: &[f64], out: &mut [f64]) {
        for j in 0..self.dim() {
            out[j] = if self.std[j] > 0.0 {
                (row[j] - self.mean[j]) / self.std[j]
            } else {
                0.0
            };
        }
    }

    pub fn invert(&self, row: &[f64], out: &mut [f64]) {
        for j in 0..self.dim() {
            out[j] = row[j] * self.std[j] + self.mean[j];
        }
    }
}

/// Standardizes flat `dim`-wide rows over the whole pool.
pub fn standardize_features(dim: usize, rows: &[f64]) -> (Vec<f64>, FeatureStats) {
    let stats = FeatureStats::fit(dim, rows);
    let mut out = vec![0.0; rows.len()];
    for (r, o) in rows.chunks(dim).zip(out.chunks_mut(dim)) {
        stats.apply(r, o);
    }
    (out, stats)
}

/// An observed entry offered to the imputer.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Candidate {
    pub lon: f64,
    pub lat: f64,
    /// Minute of day at the bin center.
    pub tod_min: f64,
    pub value: [f64; 2],
}

impl Candidate {
    fn features(&self) -> [f64; 3] {
        [self.lon, self.lat, self.tod_min]
    }
}

/// Too few candidates to run IDW at this bin.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct FallbackNeeded {
    pub available: usize,
}

/// Standardized, weighted point set with a k-d tree.
#[derive(Clone, Debug)]
pub struct SpatialIndex {
    tree: KdTree,
    values: Vec<[f64; 2]>,
    stats: FeatureStats,
    scale: Vec<f64>,
}

impl SpatialIndex {
    /// Standardizes `rows` over themselves, multiplies feature `j` by
    /// `scale[j]`, and indexes the result.
    pub fn from_rows(dim: usize, rows: &[f64], values: Vec<[f64; 2]>, scale: Vec<f64>) -> Result<Self> {
        if rows.len() != dim * values.len() || scale.len() != dim {
            return Err(Error::InvalidArgument("spatial index rows/values/scale disagree".into()));
        }
        if values.is_empty() {
            return Err(Error::Empty("spatial index needs at least one point".into()));
        }
        let (mut std_rows, stats) = standardize_features(dim, rows);
        for r in std_rows.chunks_mut(dim) {
            r.iter_mut().zip(&scale).for_each(|(v, s)| *v *= s);
        }
        Ok(SpatialIndex {
            tree: KdTree::build(dim, std_rows),
            values,
            stats,
            scale,
        })
    }

    pub fn from_candidates(cands: &[Candidate], cfg: &IdwConfig) -> Result<Self> {
        let rows: Vec<f64> = cands.iter().flat_map(Candidate::features).collect();
        let values = cands.iter().map(|c| c.value).collect();
        let w = cfg.coord_weight;
        Self::from_rows(3, &rows, values, vec![w, w, 1.0])
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Maps a raw query into the index's weighted feature space.
    pub fn transform(&self, raw: &[f64]) -> Vec<f64> {
        let mut q = vec![0.0; self.stats.dim()];
        self.stats.apply(raw, &mut q);
        q.iter_mut().zip(&self.scale).for_each(|(v, s)| *v *= s);
        q
    }

    /// IDW prediction at a raw (unstandardized) query.
    pub fn query(&self, raw: &[f64], cfg: &IdwConfig) -> Result<[f64; 2]> {
        if raw.len() != self.stats.dim() {
            return Err(Error::shape("idw_query", &[raw.len()], &[self.stats.dim()]));
        }
        let q = self.transform(raw);
        let nn = self.tree.nearest(&q, cfg.k);
        Ok(idw_combine(&nn, &self.values, cfg))
    }
}

fn idw_combine(nn: &[(f64, usize)], values: &[[f64; 2]], cfg: &IdwConfig) -> [f64; 2] {
    let (d2, first) = nn[0];
    if d2.sqrt() < cfg.zero_dist_eps {
        return values[first];
    }
    let mut num = [0.0; 2];
    let mut den = 0.0;
    for &(d2, i) in nn {
        let w = d2.sqrt().powf(-cfg.power);
        num[0] += w * values[i][0];
        num[1] += w * values[i][1];
        den += w;
    }
    [num[0] / den, num[1] / den]
}

/// IDW over the `(lon, lat, time-of-day)` candidate pool.
pub fn idw_query(index: &SpatialIndex, lon: f64, lat: f64, tod_min: f64, cfg: &IdwConfig) -> Result<[f64; 2]> {
    index.query(&[lon, lat, tod_min], cfg)
}

/// Exhaustive-scan IDW with the same contract as [`idw_query`] on an index
/// built from `cands`.
pub fn idw_brute(cands: &[Candidate], lon: f64, lat: f64, tod_min: f64, cfg: &IdwConfig) -> Result<[f64; 2]> {
    if cands.is_empty() {
        return Err(Error::Empty("idw needs at least one candidate".into()));
    }
    let rows: Vec<f64> = cands.iter().flat_map(Candidate::features).collect();
    let values: Vec<[f64; 2]> = cands.iter().map(|c| c.value).collect();
    let w = cfg.coord_weight;
    idw_brute_rows(3, &rows, &values, &[w, w, 1.0], &[lon, lat, tod_min], cfg)
}

/// Exhaustive-scan IDW over generic rows (standardized over `rows`, then scaled).
pub fn idw_brute_rows(
    dim: usize,
    rows: &[f64],
    values: &[[f64; 2]],
    scale: &[f64],
    raw_query: &[f64],
    cfg: &IdwConfig,
) -> Result<[f64; 2]> {
    if values.is_empty() {
        return Err(Error::Empty("idw needs at least one candidate".into()));
    }
    let (std_rows, stats) = standardize_features(dim, rows);
    let mut q = vec![0.0; dim];
    stats.apply(raw_query, &mut q);
    let weigh = |v: &[f64]| -> Vec<f64> { v.iter().zip(scale).map(|(a, s)| a * s).collect() };
    let q = weigh(&q);
    let mut scored: Vec<(f64, usize)> = std_rows
        .chunks(dim)
        .enumerate()
        .map(|(i, r)| (dist2(&weigh(r), &q), i))
        .collect();
    scored.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    scored.truncate(cfg.k);
    if let Some(&(_, i)) = scored.iter().find(|(d2, _)| d2.sqrt() < cfg.zero_dist_eps) {
        return Ok(values[i]);
    }
    let weights: Vec<f64> = scored.iter().map(|&(d2, _)| 1.0 / d2.sqrt().powf(cfg.power)).collect();
    let total: f64 = weights.iter().sum();
    let mut out = [0.0; 2];
    for (w, &(_, i)) in weights.iter().zip(&scored) {
        out[0] += w * values[i][0] / total;
        out[1] += w * values[i][1] / total;
    }
    Ok(out)
}

fn cell_lon_lat(frames: &STFrameSet) -> Vec<(f64, f64)> {
    frames
        .grid
        .cells()
        .map(|c| cell_center(c, &frames.grid).expect("grid cell"))
        .collect()
}

fn bin_tod(frames: &STFrameSet, bin: usize) -> f64 {
    let slot = bin % frames.bins_per_day();
    frames.tspec.slot_start_minute(slot) as f64 + frames.tspec.bin_minutes as f64 / 2.0
}

/// Observed entries of `pool` cells usable for a query at `query_bin`: bins
/// strictly earlier, no older than `lookback_days` whole days before its day.
pub fn candidates_for(frames: &STFrameSet, pool: &[bool], query_bin: usize, cfg: &IdwConfig) -> Vec<Candidate> {
    let bpd = frames.bins_per_day();
    let start = (query_bin / bpd).saturating_sub(cfg.lookback_days) * bpd;
    let centers = cell_lon_lat(frames);
    let mut out = Vec::new();
    for b in start..query_bin {
        let tod = bin_tod(frames, b);
        for (c, &(lon, lat)) in centers.iter().enumerate() {
            if pool[c] && frames.observed(c, b) {
                let value = frames.pollutants(c, b).expect("observed entries carry values");
                out.push(Candidate {
                    lon,
                    lat,
                    tod_min: tod,
                    value,
                });
            }
        }
    }
    out
}

/// Index for one query bin, or the signal that there are fewer than `k`
/// candidates.
pub fn build_index(
    frames: &STFrameSet,
    pool: &[bool],
    query_bin: usize,
    cfg: &IdwConfig,
) -> Result<std::result::Result<SpatialIndex, FallbackNeeded>> {
    let cands = candidates_for(frames, pool, query_bin, cfg);
    if cands.len() < cfg.k {
        return Ok(Err(FallbackNeeded {
            available: cands.len(),
        }));
    }
    Ok(Ok(SpatialIndex::from_candidates(&cands, cfg)?))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct CoverageRow {
    pub bin: usize,
    pub observed: usize,
    pub imputed: usize,
}

#[derive(Clone, Debug)]
pub struct Imputed {
    pub frames: STFrameSet,
    pub coverage: Vec<CoverageRow>,
    /// Entries filled by the last-value / running-mean fallback.
    pub fallback_count: usize,
}

/// Fills every empty (cell, bin) of the grid using only observations of the
/// `pool` cells; observations of other cells are removed first. Observed and
/// previously filled entries are left as they are.
///
/// Each fill at bin `b` uses only observations from bins `< b`: IDW when at
/// least `k` candidates exist, else the cell's latest earlier observation,
/// else the running mean of all earlier pool observations, else 0.
pub fn impute_with_pool(frames: &STFrameSet, pool: &BTreeSet<CellId>, cfg: &IdwConfig) -> Result<Imputed> {
    cfg.validate()?;
    let mut out = frames.clone();
    let grid = frames.grid;
    let mask: Vec<bool> = grid.cells().map(|c| pool.contains(&c)).collect();
    for (i, &m) in mask.iter().enumerate() {
        if !m {
            out.clear_cell(i);
        }
    }
    let centers = cell_lon_lat(frames);
    let n_cells = grid.n_cells();
    let mut last: Vec<Option<[f64; 2]>> = vec![None; n_cells];
    let mut sum = [0.0; 2];
    let mut count = 0usize;
    let mut coverage = Vec::with_capacity(out.n_bins());
    let mut fallback_count = 0;

    for b in 0..out.n_bins() {
        let tod = bin_tod(&out, b);
        let empty: Vec<usize> = (0..n_cells).filter(|&c| out.pollutants(c, b).is_none()).collect();
        let index = if empty.is_empty() {
            None
        } else {
            build_index(&out, &mask, b, cfg)?.ok()
        };
        for &c in &empty {
            let v = match &index {
                Some(ix) => idw_query(ix, centers[c].0, centers[c].1, tod, cfg)?,
                None => {
                    fallback_count += 1;
                    last[c].unwrap_or(if count > 0 {
                        [sum[0] / count as f64, sum[1] / count as f64]
                    } else {
                        [0.0, 0.0]
                    })
                }
            };
            out.fill_imputed(c, b, v);
        }
        let mut observed = 0;
        for c in 0..n_cells {
            if out.observed(c, b) {
                let v = out.pollutants(c, b).expect("observed entries carry values");
                last[c] = Some(v);
                sum[0] += v[0];
                sum[1] += v[1];
                count += 1;
                observed += 1;
            }
        }
        coverage.push(CoverageRow {
            bin: b,
            observed,
            imputed: empty.len(),
        });
    }
    Ok(Imputed {
        frames: out,
        coverage,
        fallback_count,
    })
}

/// The two imputed views of a dataset: `train` sees only core cells (so held
/// out cells leak nothing into training inputs), `eval` pools core and
/// extended cells for inference on unseen coordinates.
#[derive(Clone, Debug)]
pub struct ImputedViews {
    pub train: Imputed,
    pub eval: Imputed,
}

pub fn impute_frameset(frames: &STFrameSet, split: &CellSplit, cfg: &IdwConfig) -> Result<ImputedViews> {
    let train = impute_with_pool(frames, &split.core_cells, cfg)?;
    let all: BTreeSet<CellId> = split.core_cells.union(&split.extended_cells).copied().collect();
    let eval = impute_with_pool(frames, &all, cfg)?;
    Ok(ImputedViews { train, eval })
}

pub fn write_coverage_csv<W: Write>(w: W, rows: &[CoverageRow]) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record(["bin", "observed_count", "imputed_count"])?;
    for r in rows {
        out.write_record([r.bin.to_string(), r.observed.to_string(), r.imputed.to_string()])?;
    }
    out.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::domain::{GridSpec, TemporalSpec};
    use crate::ingest::Entry;

    fn cand(lon: f64, lat: f64, tod: f64, v: f64) -> Candidate {
        Candidate {
            lon,
            lat,
            tod_min: tod,
            value: [v, 2.0 * v],
        }
    }

    #[test]
    fn constant_feature_standardizes_to_zero() {
        let (rows, stats) = standardize_features(2, &[5.0, 1.0, 5.0, 3.0]);
        assert_eq!(rows, vec![0.0, -1.0, 0.0, 1.0]);
        assert_eq!(stats.std, vec![0.0, 1.0]);
        let mut back = [0.0; 2];
        stats.invert(&rows[2..], &mut back);
        assert_eq!(back, [5.0, 3.0]);
    }

    #[test]
    fn hand_weighted_example() {
        let cfg = IdwConfig {
            k: 2,
            ..IdwConfig::default()
        };
        // rows standardize to -1 and 1 (mean 1.5, std 1.5)
        let rows = [0.0, 3.0];
        let values = [[10.0, 0.0], [40.0, 0.0]];
        // raw query -1.5 → standardized -2: distances 1 and 3
        let v = idw_brute_rows(1, &rows, &values, &[1.0], &[-1.5], &cfg).unwrap();
        let expect = (10.0 + 40.0 / 27.0) / (1.0 + 1.0 / 27.0);
        assert!((v[0] - expect).abs() < 1e-12);
        // raw 3.0 → standardized 1 exactly: zero distance to row 1
        let v = idw_brute_rows(1, &rows, &values, &[1.0], &[3.0], &cfg).unwrap();
        assert_eq!(v[0], 40.0);
    }

    #[test]
    fn distances_one_and_two_give_thirteen_and_a_third() {
        let cfg = IdwConfig {
            k: 2,
            ..IdwConfig::default()
        };
        let nn = [(1.0, 0), (4.0, 1)];
        let v = idw_combine(&nn, &[[10.0, 0.0], [40.0, 0.0]], &cfg);
        assert!((v[0] - 40.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn single_candidate_and_clamped_k() {
        let cfg = IdwConfig::default();
        let c = [cand(77.1, 28.6, 400.0, 55.0)];
        assert_eq!(idw_brute(&c, 77.2, 28.5, 600.0, &cfg).unwrap(), [55.0, 110.0]);
        let ix = SpatialIndex::from_candidates(&c, &cfg).unwrap();
        assert_eq!(idw_query(&ix, 77.2, 28.5, 600.0, &cfg).unwrap(), [55.0, 110.0]);
    }

    #[test]
    fn equidistant_neighbors_average() {
        let cfg = IdwConfig::default();
        let cs = [
            cand(1.0, 0.0, 0.0, 3.0),
            cand(-1.0, 0.0, 0.0, 6.0),
            cand(0.0, 1.0, 0.0, 9.0),
            cand(0.0, -1.0, 0.0, 100.0),
        ];
        // four points symmetric about the query
        let ix = SpatialIndex::from_candidates(&cs, &cfg).unwrap();
        let v = idw_query(&ix, 0.0, 0.0, 0.0, &cfg).unwrap();
        // lon and lat have equal spread, so all four are equidistant; the
        // three lowest indices win the tie
        assert!((v[0] - 6.0).abs() < 1e-12, "{v:?}");
    }

    #[test]
    fn empty_index_is_error() {
        assert!(SpatialIndex::from_candidates(&[], &IdwConfig::default()).is_err());
        assert!(idw_brute(&[], 0.0, 0.0, 0.0, &IdwConfig::default()).is_err());
    }

    fn small_frames(n_days: usize) -> STFrameSet {
        let grid = GridSpec {
            n_rows: 2,
            n_cols: 2,
            ..GridSpec::default()
        };
        let tspec = TemporalSpec {
            bin_minutes: 330,
            day_start_min: 330,
            day_end_min: 1320,
            ..TemporalSpec::default()
        };
        STFrameSet::empty(grid, tspec, n_days)
    }

    fn observe(f: &mut STFrameSet, cell: usize, bin: usize, v: f64) {
        f.set_entry(
            cell,
            bin,
            Entry {
                pm25: Some(v),
                pm10: Some(v + 1.0),
                speed: None,
                device_count: 1,
                reading_count: 1,
                observed: true,
                imputed: false,
            },
        );
    }

    #[test]
    fn lookback_window_and_strict_past() {
        let mut f = small_frames(6);
        let bpd = f.bins_per_day();
        assert_eq!(bpd, 3);
        for b in 0..f.n_bins() {
            observe(&mut f, b % 4, b, b as f64);
        }
        let pool = vec![true; 4];
        let cfg = IdwConfig::default();
        let q = 5 * bpd + 1;
        let cands = candidates_for(&f, &pool, q, &cfg);
        // days 3 and 4 in full plus slot 0 of day 5
        assert_eq!(cands.len(), 2 * bpd + 1);
        assert!(cands.iter().all(|c| c.value[0] >= (3 * bpd) as f64 && c.value[0] < q as f64));
        assert!(matches!(build_index(&f, &pool, 0, &cfg).unwrap(), Err(FallbackNeeded { available: 0 })));
    }

    #[test]
    fn impute_fills_everything_and_keeps_observed() {
        let mut f = small_frames(3);
        observe(&mut f, 0, 0, 10.0);
        observe(&mut f, 1, 1, 20.0);
        observe(&mut f, 2, 2, 30.0);
        observe(&mut f, 3, 4, 40.0);
        let pool: BTreeSet<CellId> = f.grid.cells().collect();
        let out = impute_with_pool(&f, &pool, &IdwConfig::default()).unwrap();
        for c in 0..4 {
            for b in 0..f.n_bins() {
                let e = out.frames.entry(c, b);
                assert!(e.pm25.is_some());
                assert_eq!(e.imputed, !f.observed(c, b));
                if f.observed(c, b) {
                    assert_eq!(e, f.entry(c, b));
                }
            }
        }
        // bin 0: nothing earlier anywhere → zero
        assert_eq!(out.frames.pollutants(1, 0), Some([0.0, 0.0]));
        // bin 1, cell 0: its own last value
        assert_eq!(out.frames.pollutants(0, 1), Some([10.0, 11.0]));
        // bin 1, cell 3: never observed → running mean of earlier observations
        assert_eq!(out.frames.pollutants(3, 1), Some([10.0, 11.0]));
        // bin 3: three candidates → IDW
        let idw = out.frames.pollutants(3, 3).unwrap();
        assert!(idw[0] > 10.0 && idw[0] < 30.0);
        assert_eq!(out.coverage[0], CoverageRow { bin: 0, observed: 1, imputed: 3 });

        let again = impute_with_pool(&out.frames, &pool, &IdwConfig::default()).unwrap();
        assert_eq!(again.frames, out.frames);
    }

    #[test]
    fn cells_outside_pool_are_hidden() {
        let mut f = small_frames(2);
        observe(&mut f, 0, 0, 10.0);
        observe(&mut f, 3, 0, 99.0);
        let pool = BTreeSet::from([CellId::new(0, 0)]);
        let out = impute_with_pool(&f, &pool, &IdwConfig::default()).unwrap();
        assert!(!out.frames.observed(3, 0));
        assert_eq!(out.frames.pollutants(3, 1), Some([10.0, 11.0]));
    }

    #[test]
    fn coverage_csv_format() {
        let mut buf = Vec::new();
        write_coverage_csv(&mut buf, &[CoverageRow { bin: 0, observed: 2, imputed: 5 }]).unwrap();
        assert_eq!(String::from_utf8(buf).unwrap(), "bin,observed_count,imputed_count\n0,2,5\n");
    }
}
