//! Core types shared across the pipeline: grid and time geometry, readings,
//! and the six-level AQI categorization.
//!
//! Cells are formed with an equirectangular approximation: one degree of
//! latitude is [`M_PER_DEG_LAT`] meters and one degree of longitude is
//! [`M_PER_DEG_LON_EQUATOR`]`·cos(ref_lat)` meters. Over a metropolitan extent
//! this is accurate to well under a percent, and it makes bucketing exactly
//! invertible at cell centers.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const M_PER_DEG_LAT: f64 = 110_574.0;
pub const M_PER_DEG_LON_EQUATOR: f64 = 111_320.0;
pub const SECONDS_PER_DAY: i64 = 86_400;

/// One mobile-sensor sample.
#[derive(Clone, Debug, PartialEq)]
pub struct RawReading {
    /// UTC seconds since the Unix epoch.
    pub timestamp: i64,
    pub lon: f64,
    pub lat: f64,
    pub pm25: f64,
    pub pm10: f64,
    pub device_id: String,
}

impl RawReading {
    pub fn is_valid(&self) -> bool {
        self.pm25.is_finite()
            && self.pm10.is_finite()
            && self.pm25 >= 0.0
            && self.pm10 >= 0.0
            && (-180.0..=180.0).contains(&self.lon)
            && (-90.0..=90.0).contains(&self.lat)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Pollutant {
    #[serde(rename = "PM25")]
    Pm25,
    #[serde(rename = "PM10")]
    Pm10,
}

impl Pollutant {
    pub const ALL: [Pollutant; 2] = [Pollutant::Pm25, Pollutant::Pm10];

    /// Channel index used in every `[.., 2]` target layout.
    pub fn index(self) -> usize {
        match self {
            Pollutant::Pm25 => 0,
            Pollutant::Pm10 => 1,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Pollutant::Pm25 => "PM25",
            Pollutant::Pm10 => "PM10",
        }
    }
}

impl std::fmt::Display for Pollutant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GridSpec {
    /// Southwest corner longitude.
    pub origin_lon: f64,
    /// Southwest corner latitude.
    pub origin_lat: f64,
    pub cell_size_m: f64,
    pub n_rows: usize,
    pub n_cols: usize,
    /// Latitude used for the meters-per-degree-longitude scale.
    pub ref_lat: f64,
}

impl Default for GridSpec {
    fn default() -> Self {
        GridSpec {
            origin_lon: 77.0,
            origin_lat: 28.5,
            cell_size_m: 1000.0,
            n_rows: 10,
            n_cols: 10,
            ref_lat: 28.55,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct CellId {
    pub row: usize,
    pub col: usize,
}

impl CellId {
    pub fn new(row: usize, col: usize) -> Self {
        CellId { row, col }
    }
}

impl GridSpec {
    pub fn validate(&self) -> Result<()> {
        if !(self.cell_size_m > 0.0) {
            return Err(Error::InvalidArgument(format!(
                "cell_size_m must be positive, got {}",
                self.cell_size_m
            )));
        }
        if self.n_rows == 0 || self.n_cols == 0 {
            return Err(Error::InvalidArgument(format!(
                "grid must have at least one cell, got {}x{}",
                self.n_rows, self.n_cols
            )));
        }
        if !(-90.0..=90.0).contains(&self.ref_lat) {
            return Err(Error::InvalidArgument(format!("ref_lat out of range: {}", self.ref_lat)));
        }
        Ok(())
    }

    pub fn n_cells(&self) -> usize {
        self.n_rows * self.n_cols
    }

    pub fn m_per_deg_lon(&self) -> f64 {
        M_PER_DEG_LON_EQUATOR * self.ref_lat.to_radians().cos()
    }

    pub fn contains(&self, cell: CellId) -> bool {
        cell.row < self.n_rows && cell.col < self.n_cols
    }

    /// Row-major linear index.
    pub fn index_of(&self, cell: CellId) -> usize {
        debug_assert!(self.contains(cell));
        cell.row * self.n_cols + cell.col
    }

    pub fn cell_at(&self, index: usize) -> CellId {
        CellId::new(index / self.n_cols, index % self.n_cols)
    }

    pub fn cells(&self) -> impl Iterator<Item = CellId> + '_ {
        (0..self.n_cells()).map(move |i| self.cell_at(i))
    }

    /// Projects a coordinate to meters east/north of the origin.
    pub fn project(&self, lon: f64, lat: f64) -> (f64, f64) {
        (
            (lon - self.origin_lon) * self.m_per_deg_lon(),
            (lat - self.origin_lat) * M_PER_DEG_LAT,
        )
    }

    pub fn unproject(&self, east_m: f64, north_m: f64) -> (f64, f64) {
        (
            self.origin_lon + east_m / self.m_per_deg_lon(),
            self.origin_lat + north_m / M_PER_DEG_LAT,
        )
    }
}

/// Maps a coordinate to its grid cell, or `None` when it falls outside the grid.
pub fn bucket_coordinate(lon: f64, lat: f64, grid: &GridSpec) -> Option<CellId> {
    let (east, north) = grid.project(lon, lat);
    let row = (north / grid.cell_size_m).floor();
    let col = (east / grid.cell_size_m).floor();
    if !(row >= 0.0 && col >= 0.0) {
        return None;
    }
    let (row, col) = (row as usize, col as usize);
    if row < grid.n_rows && col < grid.n_cols {
        Some(CellId { row, col })
    } else {
        None
    }
}

/// Center of a cell as (lon, lat).
pub fn cell_center(cell: CellId, grid: &GridSpec) -> Result<(f64, f64)> {
    if !grid.contains(cell) {
        return Err(Error::CellOutOfGrid {
            row: cell.row,
            col: cell.col,
            n_rows: grid.n_rows,
            n_cols: grid.n_cols,
        });
    }
    Ok(grid.unproject(
        (cell.col as f64 + 0.5) * grid.cell_size_m,
        (cell.row as f64 + 0.5) * grid.cell_size_m,
    ))
}

/// Cell center in projected meters (east, north) relative to the origin.
pub fn cell_center_m(cell: CellId, grid: &GridSpec) -> (f64, f64) {
    (
        (cell.col as f64 + 0.5) * grid.cell_size_m,
        (cell.row as f64 + 0.5) * grid.cell_size_m,
    )
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TemporalSpec {
    pub bin_minutes: u32,
    /// Local minutes after midnight at which the daily window opens (inclusive).
    pub day_start_min: u32,
    /// Local minutes after midnight at which the daily window closes (exclusive).
    pub day_end_min: u32,
    pub utc_offset_min: i32,
    /// Local calendar day (days since 1970-01-01) that is day index 0.
    /// `None` lets ingestion anchor it at the first in-window reading.
    pub epoch_day: Option<i64>,
}

impl Default for TemporalSpec {
    fn default() -> Self {
        TemporalSpec {
            bin_minutes: 30,
            day_start_min: 330,
            day_end_min: 1320,
            utc_offset_min: 330,
            epoch_day: None,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct TimeBin {
    pub day_index: usize,
    pub slot: usize,
}

impl TimeBin {
    pub fn new(day_index: usize, slot: usize) -> Self {
        TimeBin { day_index, slot }
    }

    pub fn global(&self, bins_per_day: usize) -> usize {
        self.day_index * bins_per_day + self.slot
    }

    pub fn from_global(bin: usize, bins_per_day: usize) -> Self {
        TimeBin {
            day_index: bin / bins_per_day,
            slot: bin % bins_per_day,
        }
    }
}

impl TemporalSpec {
    pub fn validate(&self) -> Result<()> {
        if self.day_start_min >= self.day_end_min {
            return Err(Error::InvalidArgument(format!(
                "day_start_min ({}) must precede day_end_min ({})",
                self.day_start_min, self.day_end_min
            )));
        }
        if self.day_end_min > 1440 {
            return Err(Error::InvalidArgument("day_end_min exceeds 1440".into()));
        }
        if self.bin_minutes == 0 || !(self.day_end_min - self.day_start_min).is_multiple_of(self.bin_minutes) {
            return Err(Error::InvalidArgument(format!(
                "bin_minutes ({}) must divide the daily window ({} min)",
                self.bin_minutes,
                self.day_end_min - self.day_start_min
            )));
        }
        Ok(())
    }

    pub fn bins_per_day(&self) -> usize {
        ((self.day_end_min - self.day_start_min) / self.bin_minutes) as usize
    }

    /// Local calendar day (since 1970-01-01) of a UTC timestamp.
    pub fn local_day(&self, timestamp: i64) -> i64 {
        (timestamp + self.utc_offset_min as i64 * 60).div_euclid(SECONDS_PER_DAY)
    }

    /// Local minute-of-day of the start of a slot.
    pub fn slot_start_minute(&self, slot: usize) -> u32 {
        self.day_start_min + slot as u32 * self.bin_minutes
    }

    /// UTC timestamp of a local (day index, minute-of-day) under this spec's epoch.
    pub fn utc_timestamp(&self, day_index: usize, minute_of_day: f64) -> i64 {
        let epoch = self.epoch_day.unwrap_or(0);
        let local = (epoch + day_index as i64) * SECONDS_PER_DAY + (minute_of_day * 60.0).round() as i64;
        local - self.utc_offset_min as i64 * 60
    }
}

/// Maps a UTC timestamp to its (day, slot) bin, or `None` when the local time
/// is outside the daily window or before the epoch day.
pub fn bucket_time(timestamp: i64, spec: &TemporalSpec) -> Option<TimeBin> {
    let local = timestamp + spec.utc_offset_min as i64 * 60;
    let day = local.div_euclid(SECONDS_PER_DAY) - spec.epoch_day.unwrap_or(0);
    if day < 0 {
        return None;
    }
    let minute = (local.rem_euclid(SECONDS_PER_DAY) / 60) as u32;
    if minute < spec.day_start_min || minute >= spec.day_end_min {
        return None;
    }
    Some(TimeBin {
        day_index: day as usize,
        slot: ((minute - spec.day_start_min) / spec.bin_minutes) as usize,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum AqiCategory {
    Good,
    Satisfactory,
    ModeratelyPolluted,
    Poor,
    VeryPoor,
    Severe,
}

impl AqiCategory {
    pub const ALL: [AqiCategory; 6] = [
        AqiCategory::Good,
        AqiCategory::Satisfactory,
        AqiCategory::ModeratelyPolluted,
        AqiCategory::Poor,
        AqiCategory::VeryPoor,
        AqiCategory::Severe,
    ];
}

/// Inclusive upper bounds of the first five categories; anything above is Severe.
const PM25_UPPER: [f64; 5] = [30.0, 60.0, 90.0, 120.0, 250.0];
const PM10_UPPER: [f64; 5] = [50.0, 100.0, 250.0, 350.0, 430.0];

pub fn category_bounds(pollutant: Pollutant) -> &'static [f64; 5] {
    match pollutant {
        Pollutant::Pm25 => &PM25_UPPER,
        Pollutant::Pm10 => &PM10_UPPER,
    }
}

pub fn categorize(value: f64, pollutant: Pollutant) -> Result<AqiCategory> {
    if !(value >= 0.0) {
        return Err(Error::InvalidArgument(format!(
            "concentration must be non-negative, got {value}"
        )));
    }
    Ok(categorize_clamped(value, pollutant))
}

/// Like [`categorize`] but maps negative values (e.g. model outputs) to Good.
pub fn categorize_clamped(value: f64, pollutant: Pollutant) -> AqiCategory {
    let bounds = category_bounds(pollutant);
    let idx = bounds.iter().position(|&ub| value <= ub).unwrap_or(5);
    AqiCategory::ALL[idx]
}
