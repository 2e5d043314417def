//! Reading-file parsing, traffic proxies, spatio-temporal aggregation, and the
//! cell / temporal splits.

mod frames;

use std::collections::{BTreeSet, HashMap};
use std::io::Read;
use std::ops::Range;

use chrono::{DateTime, NaiveDateTime};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use frames::{Entry, STFrameSet, FRAMESET_VERSION};

use crate::domain::{
    bucket_coordinate, bucket_time, CellId, GridSpec, RawReading, TemporalSpec, M_PER_DEG_LAT,
    M_PER_DEG_LON_EQUATOR,
};
use crate::error::{Error, Result};

/// Pairs further apart than this get no speed.
pub const MAX_SPEED_GAP_S: i64 = 300;
/// Speeds above this are treated as GPS glitches.
pub const MAX_SPEED_MPS: f64 = 40.0;

/// Column layout of a delimiter-separated readings file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ReadingFormat {
    pub delimiter: char,
    pub timestamp_col: String,
    pub lon_col: String,
    pub lat_col: String,
    pub pm25_col: String,
    pub pm10_col: String,
    pub device_col: String,
    /// Offset applied to timestamps without a zone (naive local times).
    pub naive_utc_offset_min: i32,
}

impl Default for ReadingFormat {
    fn default() -> Self {
        ReadingFormat {
            delimiter: ',',
            timestamp_col: "timestamp".into(),
            lon_col: "lon".into(),
            lat_col: "lat".into(),
            pm25_col: "pm25".into(),
            pm10_col: "pm10".into(),
            device_col: "device_id".into(),
            naive_utc_offset_min: 0,
        }
    }
}

#[derive(Clone, Debug, Default)]
pub struct ParsedReadings {
    pub readings: Vec<RawReading>,
    pub skipped: usize,
}

/// Parses a timestamp given as epoch seconds, RFC 3339, or a naive
/// `YYYY-MM-DD[ T]HH:MM:SS[.f]` local time.
pub fn parse_timestamp(raw: &str, naive_utc_offset_min: i32) -> Option<i64> {
    let s = raw.trim();
    if let Ok(v) = s.parse::<i64>() {
        return Some(v);
    }
    if let Ok(v) = s.parse::<f64>() {
        return v.is_finite().then(|| v.floor() as i64);
    }
    if let Ok(dt) = DateTime::parse_from_rfc3339(s) {
        return Some(dt.timestamp());
    }
    for fmt in ["%Y-%m-%d %H:%M:%S%.f", "%Y-%m-%dT%H:%M:%S%.f", "%Y-%m-%d %H:%M"] {
        if let Ok(dt) = NaiveDateTime::parse_from_str(s, fmt) {
            return Some(dt.and_utc().timestamp() - naive_utc_offset_min as i64 * 60);
        }
    }
    None
}

/// Parses delimiter-separated readings. Unparseable or out-of-range rows are
/// skipped and counted; a missing required column is a hard error. Output is
/// sorted by `(device_id, timestamp)`.
pub fn parse_readings<R: Read>(input: R, fmt: &ReadingFormat) -> Result<ParsedReadings> {
    if !fmt.delimiter.is_ascii() {
        return Err(Error::InvalidArgument("delimiter must be ASCII".into()));
    }
    let mut rdr = csv::ReaderBuilder::new()
        .delimiter(fmt.delimiter as u8)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_reader(input);
    let headers = rdr.headers()?.clone();
    let find = |name: &str| {
        headers
            .iter()
            .position(|h| h.eq_ignore_ascii_case(name))
            .ok_or_else(|| Error::MissingColumn(name.to_string()))
    };
    let cols = [
        find(&fmt.timestamp_col)?,
        find(&fmt.lon_col)?,
        find(&fmt.lat_col)?,
        find(&fmt.pm25_col)?,
        find(&fmt.pm10_col)?,
        find(&fmt.device_col)?,
    ];

    let mut out = ParsedReadings::default();
    for record in rdr.records() {
        let Ok(record) = record else {
            out.skipped += 1;
            continue;
        };
        let field = |i: usize| record.get(cols[i]);
        let num = |i: usize| field(i).and_then(|s| s.parse::<f64>().ok());
        let reading = (|| {
            Some(RawReading {
                timestamp: parse_timestamp(field(0)?, fmt.naive_utc_offset_min)?,
                lon: num(1)?,
                lat: num(2)?,
                pm25: num(3)?,
                pm10: num(4)?,
                device_id: field(5).filter(|s| !s.is_empty())?.to_string(),
            })
        })();
        match reading {
            Some(r) if r.is_valid() => out.readings.push(r),
            _ => out.skipped += 1,
        }
    }
    sort_readings(&mut out.readings);
    Ok(out)
}

/// Canonical order: device, time, then the remaining fields so the order is total.
pub fn sort_readings(readings: &mut [RawReading]) {
    readings.sort_by(|a, b| {
        a.device_id
            .cmp(&b.device_id)
            .then(a.timestamp.cmp(&b.timestamp))
            .then(a.lon.total_cmp(&b.lon))
            .then(a.lat.total_cmp(&b.lat))
            .then(a.pm25.total_cmp(&b.pm25))
            .then(a.pm10.total_cmp(&b.pm10))
    });
}

/// Equirectangular distance in meters.
pub fn equirect_distance_m(lon1: f64, lat1: f64, lon2: f64, lat2: f64) -> f64 {
    let mean_lat = 0.5 * (lat1 + lat2);
    let dx = (lon2 - lon1) * M_PER_DEG_LON_EQUATOR * mean_lat.to_radians().cos();
    let dy = (lat2 - lat1) * M_PER_DEG_LAT;
    dx.hypot(dy)
}

/// Per-reading bus speed from the previous reading of the same device.
/// Expects readings grouped by device and time-ascending within a device.
pub fn derive_speeds(readings: &[RawReading]) -> Vec<Option<f64>> {
    let mut out = Vec::with_capacity(readings.len());
    for (i, r) in readings.iter().enumerate() {
        let speed = (i > 0)
            .then(|| &readings[i - 1])
            .filter(|prev| prev.device_id == r.device_id)
            .and_then(|prev| {
                let dt = r.timestamp - prev.timestamp;
                if dt <= 0 || dt > MAX_SPEED_GAP_S {
                    return None;
                }
                let v = equirect_distance_m(prev.lon, prev.lat, r.lon, r.lat) / dt as f64;
                (v <= MAX_SPEED_MPS).then_some(v)
            });
        out.push(speed);
    }
    out
}

/// Smallest grid (origin at the southwest extreme) covering every reading.
pub fn covering_grid(readings: &[RawReading], cell_size_m: f64) -> Result<GridSpec> {
    if readings.is_empty() {
        return Err(Error::Empty("cannot infer a grid from zero readings".into()));
    }
    let (mut lo_lon, mut hi_lon, mut lo_lat, mut hi_lat) = (f64::MAX, f64::MIN, f64::MAX, f64::MIN);
    for r in readings {
        lo_lon = lo_lon.min(r.lon);
        hi_lon = hi_lon.max(r.lon);
        lo_lat = lo_lat.min(r.lat);
        hi_lat = hi_lat.max(r.lat);
    }
    let mut grid = GridSpec {
        origin_lon: lo_lon,
        origin_lat: lo_lat,
        cell_size_m,
        n_rows: 1,
        n_cols: 1,
        ref_lat: 0.5 * (lo_lat + hi_lat),
    };
    let (east, north) = grid.project(hi_lon, hi_lat);
    grid.n_cols = (east / cell_size_m).floor() as usize + 1;
    grid.n_rows = (north / cell_size_m).floor() as usize + 1;
    grid.validate()?;
    Ok(grid)
}

#[derive(Default)]
struct Accum {
    pm25: f64,
    pm10: f64,
    speed: f64,
    n: u32,
    n_speed: u32,
    devices: Vec<u32>,
}

/// Aggregates readings into per-(cell, bin) means. Readings outside the grid
/// or the daily window are dropped. When `tspec.epoch_day` is unset it is
/// anchored at the first in-window reading's local day.
pub fn aggregate(readings: &[RawReading], grid: &GridSpec, tspec: &TemporalSpec) -> Result<STFrameSet> {
    grid.validate()?;
    tspec.validate()?;
    let mut sorted = readings.to_vec();
    sort_readings(&mut sorted);
    let speeds = derive_speeds(&sorted);

    let mut tspec = *tspec;
    if tspec.epoch_day.is_none() {
        let probe = TemporalSpec {
            epoch_day: Some(i64::MIN / 4),
            ..tspec
        };
        tspec.epoch_day = sorted
            .iter()
            .filter(|r| bucket_time(r.timestamp, &probe).is_some())
            .filter(|r| bucket_coordinate(r.lon, r.lat, grid).is_some())
            .map(|r| tspec.local_day(r.timestamp))
            .min()
            .or(Some(0));
    }

    let mut device_ids: HashMap<&str, u32> = HashMap::new();
    let mut hits = Vec::new();
    let mut last_day = None::<usize>;
    for (r, speed) in sorted.iter().zip(&speeds) {
        let (Some(cell), Some(bin)) = (bucket_coordinate(r.lon, r.lat, grid), bucket_time(r.timestamp, &tspec)) else {
            continue;
        };
        let next_id = device_ids.len() as u32;
        let dev = *device_ids.entry(r.device_id.as_str()).or_insert(next_id);
        last_day = Some(last_day.map_or(bin.day_index, |d| d.max(bin.day_index)));
        hits.push((grid.index_of(cell), bin, r, *speed, dev));
    }

    let n_days = last_day.map_or(0, |d| d + 1);
    let bpd = tspec.bins_per_day();
    let n_bins = n_days * bpd;
    let mut acc: HashMap<usize, Accum> = HashMap::new();
    for (cell, bin, r, speed, dev) in hits {
        let a = acc.entry(cell * n_bins + bin.global(bpd)).or_default();
        a.pm25 += r.pm25;
        a.pm10 += r.pm10;
        a.n += 1;
        if let Some(v) = speed {
            a.speed += v;
            a.n_speed += 1;
        }
        if !a.devices.contains(&dev) {
            a.devices.push(dev);
        }
    }

    let mut frames = STFrameSet::empty(*grid, tspec, n_days);
    for (key, a) in acc {
        let n = a.n as f64;
        frames.set_entry(
            key / n_bins,
            key % n_bins,
            Entry {
                pm25: Some(a.pm25 / n),
                pm10: Some(a.pm10 / n),
                speed: (a.n_speed > 0).then(|| a.speed / a.n_speed as f64),
                device_count: a.devices.len() as u32,
                reading_count: a.n,
                observed: true,
                imputed: false,
            },
        );
    }
    Ok(frames)
}

/// Partition of observed cells into the training ("core") set and the
/// held-out "extended" set.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct CellSplit {
    pub core_cells: BTreeSet<CellId>,
    pub extended_cells: BTreeSet<CellId>,
}

/// Cells averaging fewer than this many observed bins per day are extended.
pub const MIN_OBSERVED_BINS_PER_DAY: f64 = 2.0;

pub fn split_cells(frames: &STFrameSet) -> Result<CellSplit> {
    if frames.is_empty() {
        return Err(Error::Empty("frame set has no observations".into()));
    }
    let mut split = CellSplit::default();
    for (i, cell) in frames.grid.cells().enumerate() {
        let count = frames.observed_count(i);
        if count == 0 {
            continue;
        }
        if (count as f64) / (frames.n_days as f64) < MIN_OBSERVED_BINS_PER_DAY {
            split.extended_cells.insert(cell);
        } else {
            split.core_cells.insert(cell);
        }
    }
    Ok(split)
}

impl CellSplit {
    /// Moves the given core cells to the extended set.
    pub fn with_holdout(mut self, cells: impl IntoIterator<Item = CellId>) -> Self {
        for c in cells {
            if self.core_cells.remove(&c) {
                self.extended_cells.insert(c);
            }
        }
        self
    }

    /// Moves `n` seeded-randomly chosen core cells to the extended set.
    pub fn with_random_holdout(self, n: usize, seed: u64) -> Result<Self> {
        if n >= self.core_cells.len() && n > 0 {
            return Err(Error::InvalidArgument(format!(
                "cannot hold out {n} of {} core cells",
                self.core_cells.len()
            )));
        }
        let mut cells: Vec<CellId> = self.core_cells.iter().copied().collect();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        cells.shuffle(&mut rng);
        cells.truncate(n);
        Ok(self.with_holdout(cells))
    }

    pub fn core_list(&self) -> Vec<CellId> {
        self.core_cells.iter().copied().collect()
    }

    pub fn extended_list(&self) -> Vec<CellId> {
        self.extended_cells.iter().copied().collect()
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TemporalSplit {
    pub train_bins: Range<usize>,
    pub test_bins: Range<usize>,
    pub train_days: usize,
    pub test_days: usize,
}

pub const MIN_SPLIT_DAYS: usize = 10;

/// Splits the span at the day boundary nearest to `ratio`.
pub fn temporal_split(frames: &STFrameSet, ratio: f64) -> Result<TemporalSplit> {
    if !(ratio > 0.0 && ratio < 1.0) {
        return Err(Error::InvalidArgument(format!(
            "train ratio must lie strictly between 0 and 1, got {ratio}"
        )));
    }
    let n_days = frames.n_days;
    if n_days < MIN_SPLIT_DAYS {
        return Err(Error::TooShort(format!(
            "{n_days} days; at least {MIN_SPLIT_DAYS} are required for a temporal split"
        )));
    }
    let train_days = ((n_days as f64 * ratio).round() as usize).clamp(1, n_days - 1);
    let bpd = frames.bins_per_day();
    Ok(TemporalSplit {
        train_bins: 0..train_days * bpd,
        test_bins: train_days * bpd..n_days * bpd,
        train_days,
        test_days: n_days - train_days,
    })
}
